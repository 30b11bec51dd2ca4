//! C ABI for `svpic`.
//!
//! Every entry point returns an [`SvpicStatus`]. On failure the thread's last
//! error message is set and can be read with [`svpic_last_error_message`].
//! Simulations are opaque [`SvpicSimulation`] handles released with
//! [`svpic_simulation_free`]; strings handed out by the library are released
//! with [`svpic_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use svpic::config::{parse_config, SimConfig};
use svpic::ensemble::{moments, ParticleEnsemble};
use svpic::io::{read_snapshot, write_snapshot, SnapshotMeta};
use svpic::rng::NoiseSource;
use svpic::sde::{run, Simulation};
use svpic::verify::{run_suite, Suite, VerifyOptions};
use svpic::{Error, Vec3};

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SvpicStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    /// Bad configuration or argument.
    InvalidConfig = 3,
    /// Numerical blow-up (non-finite state, singular or invalid diffusion).
    Numerical = 4,
    Io = 5,
    /// Unreadable or inconsistent snapshot.
    Snapshot = 6,
    BufferTooSmall = 7,
    /// A Rust panic was caught at the boundary.
    Panic = 8,
}

/// Ensemble velocity moments.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct SvpicMoments {
    pub n_particles: usize,
    pub mean_velocity: [f64; 3],
    pub velocity_variance: [f64; 3],
    pub kinetic_energy: f64,
    pub total_momentum: [f64; 3],
    pub mean_speed: f64,
    pub min_speed: f64,
    pub max_speed: f64,
}

/// Opaque simulation handle.
pub struct SvpicSimulation {
    sim: Simulation,
    config_hash: String,
    seed: u64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

struct Failure(SvpicStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = if e.is_numerical() {
            SvpicStatus::Numerical
        } else {
            match e {
                Error::Io(_) => SvpicStatus::Io,
                Error::Snapshot(_) | Error::Json(_) => SvpicStatus::Snapshot,
                _ => SvpicStatus::InvalidConfig,
            }
        };
        Failure(status, e.to_string())
    }
}

type Outcome<T = ()> = Result<T, Failure>;

fn set_last_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior NULs were replaced");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn guard(f: impl FnOnce() -> Outcome) -> SvpicStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => SvpicStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_last_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_last_error(format!("panic: {msg}"));
            SvpicStatus::Panic
        }
    }
}

fn null(what: &str) -> Failure {
    Failure(SvpicStatus::NullPointer, format!("{what} is null"))
}

unsafe fn text<'a>(p: *const c_char, what: &str) -> Outcome<&'a str> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|e| Failure(SvpicStatus::InvalidUtf8, format!("{what}: {e}")))
}

unsafe fn out<'a, T>(p: *mut T, what: &str) -> Outcome<&'a mut T> {
    p.as_mut().ok_or_else(|| null(what))
}

unsafe fn handle<'a>(p: *const SvpicSimulation) -> Outcome<&'a SvpicSimulation> {
    p.as_ref().ok_or_else(|| null("simulation"))
}

unsafe fn handle_mut<'a>(p: *mut SvpicSimulation) -> Outcome<&'a mut SvpicSimulation> {
    p.as_mut().ok_or_else(|| null("simulation"))
}

fn hand_out(s: String) -> *mut c_char {
    CString::new(s).expect("JSON has no interior NULs").into_raw()
}

fn build(config: &SimConfig) -> svpic::Result<SvpicSimulation> {
    config.validate()?;
    let seed = config.resolved_seed();
    let (mut ensemble, t0, step0) = match &config.output.restart {
        Some(path) => {
            let (ens, meta) = read_snapshot(path)?;
            (ens, meta.time, meta.step)
        }
        None => (
            ParticleEnsemble::sample(config.n_particles, &config.initial, &config.species, seed)?,
            0.0,
            0,
        ),
    };
    let fields = config.fields.build(&ensemble)?;
    if config.output.momentum_check && ensemble.momenta.is_none() {
        if let Some(pot) = fields.potentials() {
            ensemble.init_momenta(&config.species, |x| pot.a(x, t0));
        }
    }
    let sim = Simulation::new(
        config.species,
        config.collision_model(),
        fields,
        config.integrator,
        NoiseSource::Direct { seed },
        ensemble,
    )?
    .with_start(t0, step0);
    Ok(SvpicSimulation {
        sim,
        config_hash: config.hash(),
        seed,
    })
}

fn copy_vectors(src: &[Vec3], dst: *mut f64, len: usize) -> Outcome {
    if dst.is_null() {
        return Err(null("output buffer"));
    }
    let need = 3 * src.len();
    if len < need {
        return Err(Failure(
            SvpicStatus::BufferTooSmall,
            format!("buffer holds {len} values, {need} needed"),
        ));
    }
    // SAFETY: the caller guarantees `dst` points to `len >= need` writable doubles.
    let dst = unsafe { std::slice::from_raw_parts_mut(dst, need) };
    for (chunk, v) in dst.chunks_exact_mut(3).zip(src) {
        chunk.copy_from_slice(v.as_slice());
    }
    Ok(())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn svpic_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread, or NULL after a success.
///
/// The pointer stays valid until the next library call on the same thread.
#[no_mangle]
pub extern "C" fn svpic_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Releases a string returned by the library. NULL is ignored.
///
/// # Safety
/// `s` must come from this library and not have been freed already.
#[no_mangle]
pub unsafe extern "C" fn svpic_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Builds a simulation from TOML config text. Output settings other than
/// `output.restart` and `output.momentum_check` are ignored.
///
/// # Safety
/// `config_toml` must be a NUL-terminated string and `out_sim` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn svpic_simulation_new(
    config_toml: *const c_char,
    out_sim: *mut *mut SvpicSimulation,
) -> SvpicStatus {
    guard(|| {
        let slot = out(out_sim, "output handle")?;
        *slot = ptr::null_mut();
        let config = parse_config(text(config_toml, "config")?)?;
        *slot = Box::into_raw(Box::new(build(&config)?));
        Ok(())
    })
}

/// Releases a simulation. NULL is ignored.
///
/// # Safety
/// `sim` must come from [`svpic_simulation_new`] and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn svpic_simulation_free(sim: *mut SvpicSimulation) {
    if !sim.is_null() {
        drop(Box::from_raw(sim));
    }
}

/// Advances `n_steps` steps. On a numerical failure the ensemble holds the
/// state before the failing step.
///
/// # Safety
/// `sim` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn svpic_simulation_advance(sim: *mut SvpicSimulation, n_steps: u64) -> SvpicStatus {
    guard(|| Ok(handle_mut(sim)?.sim.advance(n_steps)?))
}

/// # Safety
/// `sim` must be a live handle and `out_time` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn svpic_simulation_time(sim: *const SvpicSimulation, out_time: *mut f64) -> SvpicStatus {
    guard(|| {
        *out(out_time, "time")? = handle(sim)?.sim.time();
        Ok(())
    })
}

/// # Safety
/// `sim` must be a live handle and `out_step` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn svpic_simulation_step_index(sim: *const SvpicSimulation, out_step: *mut u64) -> SvpicStatus {
    guard(|| {
        *out(out_step, "step")? = handle(sim)?.sim.step_index();
        Ok(())
    })
}

/// # Safety
/// `sim` must be a live handle and `out_count` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn svpic_simulation_particle_count(
    sim: *const SvpicSimulation,
    out_count: *mut usize,
) -> SvpicStatus {
    guard(|| {
        *out(out_count, "count")? = handle(sim)?.sim.ensemble.len();
        Ok(())
    })
}

/// # Safety
/// `sim` must be a live handle and `out_moments` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn svpic_simulation_moments(
    sim: *const SvpicSimulation,
    out_moments: *mut SvpicMoments,
) -> SvpicStatus {
    guard(|| {
        let h = handle(sim)?;
        let m = moments(&h.sim.ensemble, &h.sim.species);
        *out(out_moments, "moments")? = SvpicMoments {
            n_particles: m.n_particles,
            mean_velocity: m.mean_velocity.into(),
            velocity_variance: m.velocity_variance.into(),
            kinetic_energy: m.kinetic_energy,
            total_momentum: m.total_momentum.into(),
            mean_speed: m.mean_speed,
            min_speed: m.min_speed,
            max_speed: m.max_speed,
        };
        Ok(())
    })
}

/// Copies positions as interleaved `x, y, z` triples; `len` counts doubles.
///
/// # Safety
/// `sim` must be a live handle and `buf` must hold `len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn svpic_simulation_positions(
    sim: *const SvpicSimulation,
    buf: *mut f64,
    len: usize,
) -> SvpicStatus {
    guard(|| copy_vectors(&handle(sim)?.sim.ensemble.positions, buf, len))
}

/// Copies velocities as interleaved `vx, vy, vz` triples; `len` counts doubles.
///
/// # Safety
/// `sim` must be a live handle and `buf` must hold `len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn svpic_simulation_velocities(
    sim: *const SvpicSimulation,
    buf: *mut f64,
    len: usize,
) -> SvpicStatus {
    guard(|| copy_vectors(&handle(sim)?.sim.ensemble.velocities, buf, len))
}

/// Writes the current state as a binary snapshot.
///
/// # Safety
/// `sim` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn svpic_simulation_save_snapshot(
    sim: *const SvpicSimulation,
    path: *const c_char,
) -> SvpicStatus {
    guard(|| {
        let h = handle(sim)?;
        let path = PathBuf::from(text(path, "path")?);
        let meta = SnapshotMeta {
            time: h.sim.time(),
            step: h.sim.step_index(),
            config_hash: h.config_hash.clone(),
            seed: h.seed,
            n_particles: h.sim.ensemble.len(),
            species: h.sim.species,
            has_momenta: h.sim.ensemble.momenta.is_some(),
        };
        Ok(write_snapshot(&path, &h.sim.ensemble, &meta)?)
    })
}

/// Replaces the ensemble, time and step counter with a snapshot's. The
/// particle count must match; the noise stream resumes at the loaded step.
///
/// # Safety
/// `sim` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn svpic_simulation_load_snapshot(sim: *mut SvpicSimulation, path: *const c_char) -> SvpicStatus {
    guard(|| {
        let h = handle_mut(sim)?;
        let (ens, meta) = read_snapshot(&PathBuf::from(text(path, "path")?))?;
        if ens.len() != h.sim.ensemble.len() {
            return Err(Failure(
                SvpicStatus::Snapshot,
                format!(
                    "snapshot holds {} particles, simulation has {}",
                    ens.len(),
                    h.sim.ensemble.len()
                ),
            ));
        }
        h.sim.ensemble = ens;
        h.sim.set_start(meta.time, meta.step);
        Ok(())
    })
}

/// Runs a TOML config to completion, writing the files it requests, and
/// returns the run summary as JSON in `*out_json`.
///
/// # Safety
/// `config_toml` must be a NUL-terminated string and `out_json` a valid
/// pointer. The returned string must be released with [`svpic_string_free`].
#[no_mangle]
pub unsafe extern "C" fn svpic_run(config_toml: *const c_char, out_json: *mut *mut c_char) -> SvpicStatus {
    guard(|| {
        let slot = out(out_json, "output string")?;
        *slot = ptr::null_mut();
        let config = parse_config(text(config_toml, "config")?)?;
        let result = run(&config)?;
        *slot = hand_out(serde_json::to_string(&result).map_err(Error::from)?);
        Ok(())
    })
}

/// Runs a built-in verification suite (`lb`, `lorentz`, `coulomb`,
/// `fields`, `momentum` or `all`) and returns its checks as a JSON array.
/// `out_passed` may be NULL; otherwise it receives whether every check passed.
///
/// # Safety
/// `suite` must be a NUL-terminated string, `out_json` a valid pointer and
/// `out_passed` NULL or valid. Release the string with [`svpic_string_free`].
#[no_mangle]
pub unsafe extern "C" fn svpic_verify(
    suite: *const c_char,
    seed: u64,
    scale: f64,
    out_json: *mut *mut c_char,
    out_passed: *mut bool,
) -> SvpicStatus {
    guard(|| {
        let slot = out(out_json, "output string")?;
        *slot = ptr::null_mut();
        let name = text(suite, "suite")?;
        let suites = match (name, Suite::from_name(name)) {
            (_, Some(s)) => vec![s],
            ("all", None) => Suite::ALL.to_vec(),
            _ => {
                return Err(Failure(SvpicStatus::InvalidConfig, format!("unknown suite {name:?}")));
            }
        };
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Failure(
                SvpicStatus::InvalidConfig,
                format!("scale must be positive, got {scale}"),
            ));
        }
        let opts = VerifyOptions { seed, scale };
        let mut checks = Vec::new();
        for s in suites {
            checks.extend(run_suite(s, &opts)?);
        }
        if let Some(passed) = out_passed.as_mut() {
            *passed = checks.iter().all(|c| c.pass);
        }
        *slot = hand_out(serde_json::to_string(&checks).map_err(Error::from)?);
        Ok(())
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn message() -> String {
        unsafe { CStr::from_ptr(svpic_last_error_message()) }
            .to_string_lossy()
            .into_owned()
    }

    #[test]
    fn panics_become_a_status() {
        assert_eq!(guard(|| panic!("boom")), SvpicStatus::Panic);
        assert_eq!(message(), "panic: boom");
        assert_eq!(guard(|| Ok(())), SvpicStatus::Ok);
        assert!(svpic_last_error_message().is_null());
    }

    #[test]
    fn core_errors_map_to_codes() {
        let code = |e: Error| Failure::from(e).0;
        assert_eq!(code(Error::Config(vec!["x".into()])), SvpicStatus::InvalidConfig);
        assert_eq!(code(Error::Singular("r = 0".into())), SvpicStatus::Numerical);
        assert_eq!(code(Error::Snapshot("magic".into())), SvpicStatus::Snapshot);
        assert_eq!(
            code(Error::Io(std::io::Error::new(std::io::ErrorKind::NotFound, "gone"))),
            SvpicStatus::Io
        );
    }

    #[test]
    fn interior_nuls_are_replaced() {
        set_last_error("a\0b".into());
        assert_eq!(message(), "a b");
    }
}
