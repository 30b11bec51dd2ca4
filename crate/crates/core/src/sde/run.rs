//! The time loop behind `svpic run`.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::config::SimConfig;
use crate::diagnostics::{
    field_energy_estimate, track_conjugate_momentum, ConservationLedger, MomentumCheckReport, SpeedReport,
    SpeedTracker, Trajectory,
};
use crate::ensemble::{moments, DepositionGrid, MomentReport, ParticleEnsemble};
use crate::error::{Error, Result};
use crate::io::{self, FileEntry, Manifest, SnapshotMeta};
use crate::rng::NoiseSource;

use super::Simulation;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WallClock {
    pub total_seconds: f64,
    pub stepping_seconds: f64,
    pub seconds_per_step: f64,
}

/// Summary of a finished run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunResult {
    pub config_hash: String,
    pub seed: u64,
    pub start_step: u64,
    pub steps: u64,
    pub t_final: f64,
    pub initial_moments: MomentReport,
    pub final_moments: MomentReport,
    /// Also written to `diagnostics.csv`.
    #[serde(skip)]
    pub ledger: ConservationLedger,
    #[serde(skip)]
    pub speed: SpeedReport,
    pub max_rel_speed_drift: f64,
    pub momentum_check: Option<MomentumCheckReport>,
    #[serde(skip)]
    pub trajectory: Option<Trajectory>,
    #[serde(skip)]
    pub wall_clock: WallClock,
    pub warnings: Vec<String>,
    #[serde(skip)]
    pub files: Vec<PathBuf>,
}

/// `count` particle indices spread evenly over `0..n`.
fn tracked_particles(n: usize, count: usize) -> Vec<usize> {
    let count = count.min(n);
    (0..count).map(|i| i * n / count).collect()
}

struct Outputs<'a> {
    dir: Option<&'a Path>,
    files: Vec<PathBuf>,
}

impl Outputs<'_> {
    fn path(&mut self, name: &str) -> Option<PathBuf> {
        let p = self.dir?.join(name);
        self.files.push(p.clone());
        Some(p)
    }
}

/// Runs `config` to completion, writing the files its output plan asks for.
///
/// With `output.restart` set the ensemble, time and step counter come from the
/// snapshot; the noise stream continues where the interrupted run stopped.
pub fn run(config: &SimConfig) -> Result<RunResult> {
    let started = Instant::now();
    config.validate()?;
    let seed = config.resolved_seed();
    let hash = config.hash();
    let mut warnings = Vec::new();

    let (mut ensemble, t0, step0) = match &config.output.restart {
        Some(path) => {
            let (ens, meta) = io::read_snapshot(path)?;
            if meta.n_particles != config.n_particles {
                return Err(Error::param(format!(
                    "restart snapshot holds {} particles, config asks for {}",
                    meta.n_particles, config.n_particles
                )));
            }
            if meta.config_hash != hash {
                warnings.push(format!(
                    "restart snapshot {} was written by config {} (this config is {hash})",
                    path.display(),
                    meta.config_hash
                ));
            }
            if meta.seed != seed {
                warnings.push(format!(
                    "restart snapshot used seed {}, this run uses {seed}",
                    meta.seed
                ));
            }
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

    let dir = config.output.dir.as_deref();
    if let Some(d) = dir {
        std::fs::create_dir_all(d)?;
    }
    let mut out = Outputs { dir, files: Vec::new() };
    let grid: Option<DepositionGrid> = config.output.field_grid.map(|g| g.build()).transpose()?;
    let species = config.species;
    let initial_moments = moments(&ensemble, &species);

    let mut sim = Simulation::new(
        species,
        config.collision_model(),
        fields,
        config.integrator,
        NoiseSource::Direct { seed },
        ensemble,
    )?
    .with_start(t0, step0);

    let mut ledger = ConservationLedger::new();
    let record = |sim: &Simulation, ledger: &mut ConservationLedger| -> Result<()> {
        let fe = match &grid {
            Some(g) => field_energy_estimate(&sim.ensemble, &sim.species, &sim.fields, g, sim.time())?,
            None => 0.0,
        };
        ledger.record(sim.time(), &sim.ensemble, &sim.species, fe)?;
        Ok(())
    };
    let snapshot = |sim: &Simulation, out: &mut Outputs<'_>| -> Result<()> {
        let name = format!("snapshot_{:010}.svpm", sim.step_index());
        if let Some(path) = out.path(&name) {
            let meta = SnapshotMeta {
                time: sim.time(),
                step: sim.step_index(),
                config_hash: hash.clone(),
                seed,
                n_particles: sim.ensemble.len(),
                species: sim.species,
                has_momenta: sim.ensemble.momenta.is_some(),
            };
            io::write_snapshot(&path, &sim.ensemble, &meta)?;
        }
        Ok(())
    };

    let plan = &config.output;
    let record_traj = plan.trajectory || plan.momentum_check;
    let mut trajectory = if record_traj {
        let stride = if plan.momentum_check { 1 } else { plan.trajectory_stride };
        let mut t = Trajectory::new(
            tracked_particles(sim.ensemble.len(), plan.trajectory_particles),
            stride,
            sim.integrator.dt,
        )?;
        t.observe(0, sim.time(), &sim.ensemble, None);
        Some(t)
    } else {
        None
    };
    let mut speed = SpeedTracker::new(&sim.ensemble.velocities);

    record(&sim, &mut ledger)?;
    let stepping = Instant::now();
    let n_steps = config.integrator.n_steps;
    for i in 1..=n_steps {
        let noise = sim.step()?;
        speed.observe(&sim.ensemble.velocities);
        if let Some(t) = trajectory.as_mut() {
            t.observe(i, sim.time(), &sim.ensemble, Some(&noise));
        }
        if i % plan.diagnostics_stride == 0 || i == n_steps {
            record(&sim, &mut ledger)?;
        }
        if plan.snapshot_stride > 0 && i % plan.snapshot_stride == 0 && i != n_steps {
            snapshot(&sim, &mut out)?;
        }
    }
    let stepping_seconds = stepping.elapsed().as_secs_f64();
    snapshot(&sim, &mut out)?;

    let momentum_check = match (&trajectory, plan.momentum_check) {
        (Some(t), true) if t.frames.len() >= 2 => {
            Some(track_conjugate_momentum(t, &sim.species, &sim.collision, &sim.fields)?)
        }
        _ => None,
    };
    let speed = speed.report();
    let mut result = RunResult {
        config_hash: hash.clone(),
        seed,
        start_step: step0,
        steps: n_steps,
        t_final: sim.time(),
        initial_moments,
        final_moments: moments(&sim.ensemble, &sim.species),
        ledger,
        max_rel_speed_drift: speed.max_rel_drift,
        speed,
        momentum_check,
        trajectory: if plan.trajectory { trajectory } else { None },
        wall_clock: WallClock {
            total_seconds: 0.0,
            stepping_seconds,
            seconds_per_step: if n_steps > 0 {
                stepping_seconds / n_steps as f64
            } else {
                0.0
            },
        },
        warnings,
        files: Vec::new(),
    };

    if let Some(path) = out.path("diagnostics.csv") {
        io::write_ledger_csv(&path, &result.ledger)?;
    }
    if let (Some(t), true) = (&result.trajectory, dir.is_some()) {
        let path = out.path("trajectory.csv").expect("output dir set");
        io::write_trajectory_csv(&path, t)?;
    }
    if let Some(path) = out.path("summary.json") {
        io::write_json(&path, &result)?;
    }
    result.wall_clock.total_seconds = started.elapsed().as_secs_f64();
    if let Some(d) = dir {
        let files = out
            .files
            .iter()
            .map(|p| FileEntry::describe(p, d))
            .collect::<Result<Vec<_>>>()?;
        let manifest = Manifest {
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            snapshot_version: io::SNAPSHOT_VERSION,
            csv_schema_version: io::CSV_SCHEMA_VERSION,
            config: config.clone(),
            config_hash: hash,
            seed,
            start_step: step0,
            restart_from: config.output.restart.clone(),
            files,
            warnings: result.warnings.clone(),
            wall_clock: Some(result.wall_clock),
        };
        let path = d.join("manifest.json");
        io::write_json(&path, &manifest)?;
        out.files.push(path);
    }
    result.files = out.files;
    Ok(result)
}
