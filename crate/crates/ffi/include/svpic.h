/* Generated by cbindgen from crates/ffi. Do not edit. */

#ifndef SVPIC_H
#define SVPIC_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result code of every fallible call.
typedef enum SvpicStatus {
  SVPIC_STATUS_OK = 0,
  SVPIC_STATUS_NULL_POINTER = 1,
  SVPIC_STATUS_INVALID_UTF8 = 2,
  // Bad configuration or argument.
  SVPIC_STATUS_INVALID_CONFIG = 3,
  // Numerical blow-up (non-finite state, singular or invalid diffusion).
  SVPIC_STATUS_NUMERICAL = 4,
  SVPIC_STATUS_IO = 5,
  // Unreadable or inconsistent snapshot.
  SVPIC_STATUS_SNAPSHOT = 6,
  SVPIC_STATUS_BUFFER_TOO_SMALL = 7,
  // A Rust panic was caught at the boundary.
  SVPIC_STATUS_PANIC = 8,
} SvpicStatus;

// Opaque simulation handle.
typedef struct SvpicSimulation SvpicSimulation;

// Ensemble velocity moments.
typedef struct SvpicMoments {
  size_t n_particles;
  double mean_velocity[3];
  double velocity_variance[3];
  double kinetic_energy;
  double total_momentum[3];
  double mean_speed;
  double min_speed;
  double max_speed;
} SvpicMoments;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *svpic_version(void);

// Message of the last failed call on this thread, or NULL after a success.
//
// The pointer stays valid until the next library call on the same thread.
const char *svpic_last_error_message(void);

// Releases a string returned by the library. NULL is ignored.
//
// # Safety
// `s` must come from this library and not have been freed already.
void svpic_string_free(char *s);

// Builds a simulation from TOML config text. Output settings other than
// `output.restart` and `output.momentum_check` are ignored.
//
// # Safety
// `config_toml` must be a NUL-terminated string and `out_sim` a valid pointer.
enum SvpicStatus svpic_simulation_new(const char *config_toml, struct SvpicSimulation **out_sim);

// Releases a simulation. NULL is ignored.
//
// # Safety
// `sim` must come from [`svpic_simulation_new`] and not have been freed.
void svpic_simulation_free(struct SvpicSimulation *sim);

// Advances `n_steps` steps. On a numerical failure the ensemble holds the
// state before the failing step.
//
// # Safety
// `sim` must be a live handle.
enum SvpicStatus svpic_simulation_advance(struct SvpicSimulation *sim, uint64_t n_steps);

// # Safety
// `sim` must be a live handle and `out_time` a valid pointer.
enum SvpicStatus svpic_simulation_time(const struct SvpicSimulation *sim, double *out_time);

// # Safety
// `sim` must be a live handle and `out_step` a valid pointer.
enum SvpicStatus svpic_simulation_step_index(const struct SvpicSimulation *sim, uint64_t *out_step);

// # Safety
// `sim` must be a live handle and `out_count` a valid pointer.
enum SvpicStatus svpic_simulation_particle_count(const struct SvpicSimulation *sim,
                                                 size_t *out_count);

// # Safety
// `sim` must be a live handle and `out_moments` a valid pointer.
enum SvpicStatus svpic_simulation_moments(const struct SvpicSimulation *sim,
                                          struct SvpicMoments *out_moments);

// Copies positions as interleaved `x, y, z` triples; `len` counts doubles.
//
// # Safety
// `sim` must be a live handle and `buf` must hold `len` writable doubles.
enum SvpicStatus svpic_simulation_positions(const struct SvpicSimulation *sim,
                                            double *buf,
                                            size_t len);

// Copies velocities as interleaved `vx, vy, vz` triples; `len` counts doubles.
//
// # Safety
// `sim` must be a live handle and `buf` must hold `len` writable doubles.
enum SvpicStatus svpic_simulation_velocities(const struct SvpicSimulation *sim,
                                             double *buf,
                                             size_t len);

// Writes the current state as a binary snapshot.
//
// # Safety
// `sim` must be a live handle and `path` a NUL-terminated string.
enum SvpicStatus svpic_simulation_save_snapshot(const struct SvpicSimulation *sim,
                                                const char *path);

// Replaces the ensemble, time and step counter with a snapshot's. The
// particle count must match; the noise stream resumes at the loaded step.
//
// # Safety
// `sim` must be a live handle and `path` a NUL-terminated string.
enum SvpicStatus svpic_simulation_load_snapshot(struct SvpicSimulation *sim, const char *path);

// Runs a TOML config to completion, writing the files it requests, and
// returns the run summary as JSON in `*out_json`.
//
// # Safety
// `config_toml` must be a NUL-terminated string and `out_json` a valid
// pointer. The returned string must be released with [`svpic_string_free`].
enum SvpicStatus svpic_run(const char *config_toml, char **out_json);

// Runs a built-in verification suite (`lb`, `lorentz`, `coulomb`,
// `fields`, `momentum` or `all`) and returns its checks as a JSON array.
// `out_passed` may be NULL; otherwise it receives whether every check passed.
//
// # Safety
// `suite` must be a NUL-terminated string, `out_json` a valid pointer and
// `out_passed` NULL or valid. Release the string with [`svpic_string_free`].
enum SvpicStatus svpic_verify(const char *suite,
                              uint64_t seed,
                              double scale,
                              char **out_json,
                              bool *out_passed);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SVPIC_H */
