//! Conservation ledgers, distribution comparisons and checks of the structural
//! identities (conjugate momentum, speed conservation, Gauss's law).

use rayon::prelude::*;
use serde::Serialize;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::collision::{CollisionModel, ForcingEval};
use crate::ensemble::{
    deposit_charge_current, deposit_density, moments, DepositSpace, DepositionGrid, DepositionKernel, ParticleEnsemble,
    SpeciesParams,
};
use crate::error::{Error, Result};
use crate::fields::{efield_at, FieldModel};
use crate::rng::{self, WienerBatch};
use crate::summation::NeumaierSum;
use crate::{Mat3, Vec3};

/// One row of the conservation ledger.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LedgerRow {
    pub t: f64,
    pub kinetic_energy: f64,
    /// `½ Σ_cells |E|² ΔV` on the diagnostic grid; zero when no grid is configured.
    pub field_energy: f64,
    pub total_momentum: Vec3,
    pub mean_speed: f64,
    pub min_speed: f64,
    pub max_speed: f64,
}

impl LedgerRow {
    pub const CSV_HEADER: &'static str = "t,ke,fe,px,py,pz,mean_speed,min_speed,max_speed";

    pub fn to_csv(&self) -> String {
        let p = &self.total_momentum;
        [
            self.t,
            self.kinetic_energy,
            self.field_energy,
            p[0],
            p[1],
            p[2],
            self.mean_speed,
            self.min_speed,
            self.max_speed,
        ]
        .iter()
        .map(|x| format!("{x:.16e}"))
        .collect::<Vec<_>>()
        .join(",")
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ConservationLedger {
    pub rows: Vec<LedgerRow>,
}

impl ConservationLedger {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a row; timestamps must be strictly increasing.
    pub fn push(&mut self, row: LedgerRow) -> Result<()> {
        if let Some(last) = self.rows.last() {
            if !(row.t > last.t) {
                return Err(Error::param(format!(
                    "ledger timestamps must increase ({} after {})",
                    row.t, last.t
                )));
            }
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn record(
        &mut self,
        t: f64,
        ens: &ParticleEnsemble,
        species: &SpeciesParams,
        field_energy: f64,
    ) -> Result<LedgerRow> {
        let m = moments(ens, species);
        let row = LedgerRow {
            t,
            kinetic_energy: m.kinetic_energy,
            field_energy,
            total_momentum: m.total_momentum,
            mean_speed: m.mean_speed,
            min_speed: m.min_speed,
            max_speed: m.max_speed,
        };
        self.push(row)?;
        Ok(row)
    }

    pub fn last(&self) -> Option<&LedgerRow> {
        self.rows.last()
    }
}

/// `½ Σ_cells |E(center)|² ΔV`, with `E` the total (self plus external) field.
pub fn field_energy_estimate(
    ens: &ParticleEnsemble,
    species: &SpeciesParams,
    fields: &FieldModel,
    grid: &DepositionGrid,
    t: f64,
) -> Result<f64> {
    let softening = match fields {
        FieldModel::Vacuum => return Ok(0.0),
        FieldModel::External(_) => None,
        FieldModel::SelfConsistent { softening, .. } => Some(*softening),
    };
    let centers = cell_centers(grid);
    let energies: Vec<f64> = centers
        .par_iter()
        .map(|x| {
            let mut e = crate::fields::external_field_at(fields, x, t).0;
            if let Some(eps) = softening {
                e += efield_at(x, ens, species, eps)?;
            }
            Ok(e.norm_squared())
        })
        .collect::<Result<_>>()?;
    Ok(0.5 * grid.cell_volume() * crate::summation::sum(energies))
}

fn cell_centers(grid: &DepositionGrid) -> Vec<Vec3> {
    let [nx, ny, nz] = grid.cells;
    let mut out = Vec::with_capacity(nx * ny * nz);
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                out.push(grid.center(i, j, k));
            }
        }
    }
    out
}

/// States of selected particles at one recorded step.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Frame {
    pub step: u64,
    pub t: f64,
    pub positions: Vec<Vec3>,
    pub velocities: Vec<Vec3>,
    /// Increments of the step that ended at this frame (empty for the first frame).
    pub noise: Vec<[f64; 3]>,
}

/// Recorded frames of a subset of particles.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Trajectory {
    pub particles: Vec<usize>,
    pub stride: u64,
    pub dt: f64,
    pub frames: Vec<Frame>,
}

impl Trajectory {
    pub fn new(particles: Vec<usize>, stride: u64, dt: f64) -> Result<Self> {
        if stride == 0 {
            return Err(Error::param("trajectory stride must be at least 1"));
        }
        Ok(Self {
            particles,
            stride,
            dt,
            frames: Vec::new(),
        })
    }

    /// Records the ensemble if `step` falls on the stride; `noise` is the batch
    /// that produced this state.
    pub fn observe(&mut self, step: u64, t: f64, ens: &ParticleEnsemble, noise: Option<&WienerBatch>) {
        if !step.is_multiple_of(self.stride) {
            return;
        }
        let pick = |a: usize| -> [f64; 3] {
            match noise {
                Some(b) if b.m_channels() >= 3 => {
                    let w = b.particle(a);
                    [w[0], w[1], w[2]]
                }
                _ => [0.0; 3],
            }
        };
        self.frames.push(Frame {
            step,
            t,
            positions: self.particles.iter().map(|&a| ens.positions[a]).collect(),
            velocities: self.particles.iter().map(|&a| ens.velocities[a]).collect(),
            noise: if noise.is_some() {
                self.particles.iter().map(|&a| pick(a)).collect()
            } else {
                Vec::new()
            },
        });
    }
}

/// Largest magnitude reached by each term of the conjugate-momentum equation.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct RhsDecomposition {
    pub scalar_potential_force: f64,
    pub a_gradient_term: f64,
    pub collisional_drift: f64,
    pub noise_term: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MomentumCheckReport {
    /// `max |ΔP − [½(F_n + F_{n+1}) Δt + m ½(g_n + g_{n+1}) ΔW]|` over steps and particles.
    pub max_residual: f64,
    pub mean_residual: f64,
    /// `max |ΔP − m ΔV − q ½[(∇A)V + ∂A/∂t]_{n,n+1} Δt|`.
    pub max_chain_rule_residual: f64,
    pub rhs_decomposition: RhsDecomposition,
    pub samples: usize,
}

struct MomentumTerms {
    p: Vec3,
    scalar: Vec3,
    a_grad: Vec3,
    drift: Vec3,
    forcing: ForcingEval,
    chain: Vec3,
}

/// Checks per-step increments of `P = mV + qA` against the discrete
/// conjugate-momentum equation
///
/// ```text
/// dP = −q∇φ dt + q (∇A)ᵀV dt + m G dt + m Σ g_ν ∘ dW^ν.
/// ```
///
/// Needs consecutive frames (stride 1) with noise, external potentials, and a
/// collision operator that does not depend on the ensemble.
pub fn track_conjugate_momentum(
    traj: &Trajectory,
    species: &SpeciesParams,
    collision: &CollisionModel,
    fields: &FieldModel,
) -> Result<MomentumCheckReport> {
    let pot = fields
        .potentials()
        .ok_or_else(|| Error::param("momentum check needs external potentials with A"))?;
    if matches!(fields, FieldModel::SelfConsistent { .. }) {
        return Err(Error::param("momentum check needs purely external fields"));
    }
    if traj.stride != 1 || traj.frames.len() < 2 {
        return Err(Error::param("momentum check needs at least two consecutive frames"));
    }
    let (q, m, dt) = (species.charge, species.mass, traj.dt);
    let terms = |x: &Vec3, v: &Vec3, t: f64| -> Result<MomentumTerms> {
        let forcing = collision.eval_local(x, v)?;
        let grad_a: Mat3 = pot.grad_a(x, t);
        Ok(MomentumTerms {
            p: v * m + pot.a(x, t) * q,
            scalar: -pot.grad_phi(x, t) * q,
            a_grad: grad_a.transpose() * v * q,
            drift: forcing.drift_g * m,
            chain: (grad_a * v + pot.da_dt(x, t)) * q,
            forcing,
        })
    };
    let mut rhs = RhsDecomposition::default();
    let mut max_res: f64 = 0.0;
    let mut max_chain: f64 = 0.0;
    let mut total = NeumaierSum::new();
    let mut samples = 0usize;
    for pair in traj.frames.windows(2) {
        let (f0, f1) = (&pair[0], &pair[1]);
        if f1.step != f0.step + 1 || f1.noise.len() != traj.particles.len() {
            return Err(Error::param("trajectory frames are not consecutive or lack noise"));
        }
        for a in 0..traj.particles.len() {
            let s0 = terms(&f0.positions[a], &f0.velocities[a], f0.t)?;
            let s1 = terms(&f1.positions[a], &f1.velocities[a], f1.t)?;
            let dw = &f1.noise[a];
            let noise = (s0.forcing.noise_kick(dw) + s1.forcing.noise_kick(dw)) * (0.5 * m);
            let scalar = (s0.scalar + s1.scalar) * (0.5 * dt);
            let a_grad = (s0.a_grad + s1.a_grad) * (0.5 * dt);
            let drift = (s0.drift + s1.drift) * (0.5 * dt);
            let dp = s1.p - s0.p;
            let r = (dp - (scalar + a_grad + drift + noise)).norm();
            let dv = f1.velocities[a] - f0.velocities[a];
            let chain = (dp - dv * m - (s0.chain + s1.chain) * (0.5 * dt)).norm();
            rhs.scalar_potential_force = rhs.scalar_potential_force.max(scalar.norm());
            rhs.a_gradient_term = rhs.a_gradient_term.max(a_grad.norm());
            rhs.collisional_drift = rhs.collisional_drift.max(drift.norm());
            rhs.noise_term = rhs.noise_term.max(noise.norm());
            max_res = max_res.max(r);
            max_chain = max_chain.max(chain);
            total.add(r);
            samples += 1;
        }
    }
    let report = MomentumCheckReport {
        max_residual: max_res,
        mean_residual: total.value() / samples as f64,
        max_chain_rule_residual: max_chain,
        rhs_decomposition: rhs,
        samples,
    };
    if !report.max_residual.is_finite() {
        return Err(Error::Singular("momentum residual is not finite".into()));
    }
    Ok(report)
}

/// Running record of `| |v(t)| − |v(0)| | / |v(0)|`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpeedTracker {
    initial: Vec<f64>,
    pub per_step_drift: Vec<f64>,
    pub max_rel_drift: f64,
    pub excluded: usize,
}

impl SpeedTracker {
    pub fn new(velocities: &[Vec3]) -> Self {
        let initial: Vec<f64> = velocities.iter().map(|v| v.norm()).collect();
        let excluded = initial.iter().filter(|s| **s == 0.0).count();
        Self {
            initial,
            per_step_drift: Vec::new(),
            max_rel_drift: 0.0,
            excluded,
        }
    }

    pub fn observe(&mut self, velocities: &[Vec3]) {
        let worst = velocities
            .par_iter()
            .zip(&self.initial)
            .filter(|(_, s0)| **s0 > 0.0)
            .map(|(v, s0)| (v.norm() - s0).abs() / s0)
            .reduce(|| 0.0, f64::max);
        self.per_step_drift.push(worst);
        self.max_rel_drift = self.max_rel_drift.max(worst);
    }

    pub fn report(&self) -> SpeedReport {
        SpeedReport {
            max_rel_drift: self.max_rel_drift,
            per_step_drift: self.per_step_drift.clone(),
            excluded_zero_speed: self.excluded,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SpeedReport {
    pub max_rel_drift: f64,
    /// Worst particle at each frame after the first.
    pub per_step_drift: Vec<f64>,
    pub excluded_zero_speed: usize,
}

pub fn speed_conservation_report(traj: &Trajectory) -> Result<SpeedReport> {
    let first = traj.frames.first().ok_or_else(|| Error::param("empty trajectory"))?;
    let mut tracker = SpeedTracker::new(&first.velocities);
    for f in &traj.frames[1..] {
        tracker.observe(&f.velocities);
    }
    Ok(tracker.report())
}

/// Flux of the softened field of a unit charge at `p` through the rectangle
/// `{x_n = c} × [lo_u, hi_u] × [lo_w, hi_w]`, in the `+n` direction.
///
/// With `d = c − p_n` and `D² = d² + ε²` the Plummer field reduces to a
/// point-charge field at distance `D` scaled by `d/D`, whose flux through a
/// rectangle is the corner sum of `atan(u w / (D √(u² + w² + D²))) / 4π`.
pub fn plummer_face_flux(p: &Vec3, axis: usize, c: f64, lo: [f64; 2], hi: [f64; 2], softening: f64) -> f64 {
    let (ua, wa) = ((axis + 1) % 3, (axis + 2) % 3);
    let d = c - p[axis];
    let big_d = (d * d + softening * softening).sqrt();
    if big_d == 0.0 {
        return 0.0;
    }
    let corner = |u: f64, w: f64| (u * w / (big_d * (u * u + w * w + big_d * big_d).sqrt())).atan();
    let (u0, u1) = (lo[0] - p[ua], hi[0] - p[ua]);
    let (w0, w1) = (lo[1] - p[wa], hi[1] - p[wa]);
    let solid = corner(u1, w1) - corner(u0, w1) - corner(u1, w0) + corner(u0, w0);
    d / big_d * solid / (4.0 * std::f64::consts::PI)
}

/// Relative L² residual of Gauss's law in finite-volume form.
///
/// For each cell the divergence of the softened pairwise field is its
/// outward flux divided by the cell volume, with face fluxes integrated
/// exactly; `ρ` is the nearest-cell charge density. The residual is the
/// charge the softening kernel moves across cell faces, so it vanishes as
/// `ε/h → 0`.
pub fn gauss_residual(
    ens: &ParticleEnsemble,
    species: &SpeciesParams,
    grid: &DepositionGrid,
    softening: f64,
) -> Result<f64> {
    if !(softening >= 0.0) {
        return Err(Error::param("softening must be non-negative"));
    }
    let rho = deposit_charge_current(ens, species, grid, DepositionKernel::NearestCell).rho;
    let q = species.charge * ens.weight;
    let h = grid.cell_size();
    let cells = grid.cells;
    // flux[axis][(plane, a, b)] through the face at plane index `plane` along `axis`.
    let flux: Vec<Vec<f64>> = (0..3)
        .map(|axis| {
            let (ua, wa) = ((axis + 1) % 3, (axis + 2) % 3);
            let (nu, nw) = (cells[ua], cells[wa]);
            let faces = (cells[axis] + 1) * nu * nw;
            (0..faces)
                .into_par_iter()
                .map(|f| {
                    let plane = f / (nu * nw);
                    let (iu, iw) = ((f / nw) % nu, f % nw);
                    let c = grid.lo[axis] + plane as f64 * h[axis];
                    let lo = [grid.lo[ua] + iu as f64 * h[ua], grid.lo[wa] + iw as f64 * h[wa]];
                    let hi = [lo[0] + h[ua], lo[1] + h[wa]];
                    let mut acc = NeumaierSum::new();
                    for p in &ens.positions {
                        acc.add(plummer_face_flux(p, axis, c, lo, hi, softening));
                    }
                    q * acc.value()
                })
                .collect()
        })
        .collect();
    let face = |axis: usize, idx: [usize; 3], upper: bool| {
        let (ua, wa) = ((axis + 1) % 3, (axis + 2) % 3);
        let plane = idx[axis] + usize::from(upper);
        flux[axis][(plane * cells[ua] + idx[ua]) * cells[wa] + idx[wa]]
    };
    let vol = grid.cell_volume();
    let mut diff = NeumaierSum::new();
    let mut norm = NeumaierSum::new();
    for k in 0..cells[2] {
        for j in 0..cells[1] {
            for i in 0..cells[0] {
                let idx = [i, j, k];
                let out: f64 = (0..3).map(|ax| face(ax, idx, true) - face(ax, idx, false)).sum();
                let r = rho.get(i, j, k);
                diff.add((out / vol - r).powi(2));
                norm.add(r * r);
            }
        }
    }
    let (d, n) = (diff.value(), norm.value());
    if n == 0.0 {
        return Ok(if d == 0.0 { 0.0 } else { f64::INFINITY });
    }
    Ok((d / n).sqrt())
}

/// Per-component Kolmogorov-Smirnov comparison with `N(0, temperature)`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GoodnessReport {
    pub n: usize,
    pub ks_statistic: [f64; 3],
    pub p_value: [f64; 3],
    pub critical_1pct: f64,
    pub critical_5pct: f64,
    pub mean_delta: Vec3,
    pub variance_delta: Vec3,
    /// Excess kurtosis (zero for a normal law).
    pub excess_kurtosis: Vec3,
}

impl GoodnessReport {
    pub fn max_statistic(&self) -> f64 {
        self.ks_statistic.iter().copied().fold(0.0, f64::max)
    }

    /// True when every component is below the critical value at level `alpha` (0.01 or 0.05).
    pub fn passes(&self, alpha: f64) -> bool {
        let c = if alpha <= 0.01 {
            self.critical_1pct
        } else {
            self.critical_5pct
        };
        self.max_statistic() < c
    }
}

/// Asymptotic Kolmogorov critical constants `c(α)` with `D_crit = c/√N`.
pub const KS_C_1PCT: f64 = 1.628;
pub const KS_C_5PCT: f64 = 1.358;

/// `P(K > λ)` for the Kolmogorov distribution.
pub fn kolmogorov_survival(lambda: f64) -> f64 {
    if lambda <= 0.0 {
        return 1.0;
    }
    if lambda < 0.2 {
        return 1.0;
    }
    let mut s = 0.0;
    for k in 1..=100 {
        let kf = k as f64;
        let term = (-2.0 * kf * kf * lambda * lambda).exp();
        s += if k % 2 == 1 { term } else { -term };
        if term < 1e-17 {
            break;
        }
    }
    (2.0 * s).clamp(0.0, 1.0)
}

/// One-sample KS statistic of `samples` against `cdf`.
pub fn ks_statistic(samples: &mut [f64], cdf: impl Fn(f64) -> f64) -> f64 {
    samples.sort_by(|a, b| a.total_cmp(b));
    let n = samples.len() as f64;
    let mut d: f64 = 0.0;
    for (i, &x) in samples.iter().enumerate() {
        let f = cdf(x);
        d = d.max((i as f64 + 1.0) / n - f).max(f - i as f64 / n);
    }
    d
}

pub fn compare_to_maxwellian(ens: &ParticleEnsemble, temperature: f64) -> Result<GoodnessReport> {
    if !(temperature > 0.0) {
        return Err(Error::param("temperature must be positive"));
    }
    let normal = Normal::new(0.0, temperature.sqrt()).map_err(|e| Error::param(e.to_string()))?;
    let n = ens.len();
    let nf = n as f64;
    let mut ks = [0.0; 3];
    let mut pv = [0.0; 3];
    let mut mean_delta = Vec3::zeros();
    let mut var_delta = Vec3::zeros();
    let mut kurt = Vec3::zeros();
    for k in 0..3 {
        let mut comp: Vec<f64> = ens.velocities.iter().map(|v| v[k]).collect();
        let mean = crate::summation::sum(comp.iter().copied()) / nf;
        let m2 = crate::summation::sum(comp.iter().map(|x| (x - mean).powi(2))) / nf;
        let m4 = crate::summation::sum(comp.iter().map(|x| (x - mean).powi(4))) / nf;
        mean_delta[k] = mean;
        var_delta[k] = m2 - temperature;
        kurt[k] = if m2 > 0.0 { m4 / (m2 * m2) - 3.0 } else { f64::NAN };
        ks[k] = ks_statistic(&mut comp, |x| normal.cdf(x));
        pv[k] = kolmogorov_survival(nf.sqrt() * ks[k]);
    }
    Ok(GoodnessReport {
        n,
        ks_statistic: ks,
        p_value: pv,
        critical_1pct: KS_C_1PCT / nf.sqrt(),
        critical_5pct: KS_C_5PCT / nf.sqrt(),
        mean_delta,
        variance_delta: var_delta,
        excess_kurtosis: kurt,
    })
}

/// Normalized histogram of one velocity component on `cells` bins of `[lo, hi]`,
/// built with the nearest-cell deposition. Returns `(density, out_of_bounds)`.
pub fn velocity_histogram(
    ens: &ParticleEnsemble,
    component: usize,
    lo: f64,
    hi: f64,
    cells: usize,
) -> Result<(Vec<f64>, usize)> {
    // One cell spanning the whole sample along the other two components.
    let mut blo = Vec3::repeat(f64::INFINITY);
    let mut bhi = Vec3::repeat(f64::NEG_INFINITY);
    for v in &ens.velocities {
        blo = blo.inf(v);
        bhi = bhi.sup(v);
    }
    blo.add_scalar_mut(-1.0);
    bhi.add_scalar_mut(1.0);
    blo[component] = lo;
    bhi[component] = hi;
    let mut shape = [1usize; 3];
    shape[component] = cells;
    let grid = DepositionGrid::new(blo, bhi, shape)?;
    let dep = deposit_density(ens, &grid, DepositSpace::Velocity, DepositionKernel::NearestCell);
    let h = (hi - lo) / cells as f64;
    let across = grid.cell_volume() / h;
    Ok((dep.grid.values.iter().map(|v| v * across).collect(), dep.out_of_bounds))
}

fn histogram_of(values: &[f64], lo: f64, hi: f64, cells: usize) -> Vec<f64> {
    let h = (hi - lo) / cells as f64;
    let mut counts = vec![0u64; cells];
    for &x in values {
        if x >= lo && x <= hi {
            let i = (((x - lo) / h).floor() as usize).min(cells - 1);
            counts[i] += 1;
        }
    }
    let norm = 1.0 / (values.len() as f64 * h);
    counts.into_iter().map(|c| c as f64 * norm).collect()
}

/// Bootstrap estimate of the sampling floor `E ∫|f̂* − f̂|` for a histogram density.
pub fn bootstrap_l1_floor(values: &[f64], lo: f64, hi: f64, cells: usize, resamples: usize, seed: u64) -> f64 {
    let base = histogram_of(values, lo, hi, cells);
    let h = (hi - lo) / cells as f64;
    let n = values.len();
    let dists: Vec<f64> = (0..resamples)
        .into_par_iter()
        .map(|r| {
            let mut stream = rng::aux_stream(seed, 1, r as u64);
            let sample: Vec<f64> = (0..n)
                .map(|_| values[((rng::uniform(&mut stream) * n as f64) as usize).min(n - 1)])
                .collect();
            let hist = histogram_of(&sample, lo, hi, cells);
            h * crate::summation::sum(hist.iter().zip(&base).map(|(a, b)| (a - b).abs()))
        })
        .collect();
    crate::summation::sum(dists) / resamples as f64
}
