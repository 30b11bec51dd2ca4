//! Particle state and the empirical-measure deposition operators.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::summation::{NeumaierSum, NeumaierSum3};
use crate::Vec3;

/// Charge, mass and physical particle count of the single plasma species.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpeciesParams {
    pub charge: f64,
    pub mass: f64,
    pub n_total: f64,
}

impl SpeciesParams {
    pub fn new(charge: f64, mass: f64, n_total: f64) -> Result<Self> {
        let s = Self { charge, mass, n_total };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.charge.is_finite() {
            return Err(Error::param("charge must be finite"));
        }
        if !(self.mass > 0.0 && self.mass.is_finite()) {
            return Err(Error::param(format!("mass must be positive, got {}", self.mass)));
        }
        if !(self.n_total > 0.0 && self.n_total.is_finite()) {
            return Err(Error::param(format!("n_total must be positive, got {}", self.n_total)));
        }
        Ok(())
    }

    pub fn charge_to_mass(&self) -> f64 {
        self.charge / self.mass
    }
}

impl Default for SpeciesParams {
    fn default() -> Self {
        Self {
            charge: 1.0,
            mass: 1.0,
            n_total: 1.0,
        }
    }
}

/// Initial phase-space distributions. `thermal_speed` is the per-component
/// velocity standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InitialDistribution {
    /// Drifting isotropic Maxwellian; positions Gaussian about the origin
    /// with standard deviation `position_spread` (zero puts every particle at the origin).
    Maxwellian {
        thermal_speed: f64,
        drift: Vec3,
        position_spread: f64,
    },
    UniformBoxMaxwellian {
        lo: Vec3,
        hi: Vec3,
        thermal_speed: f64,
        drift: Vec3,
    },
    /// Two counter-streaming Maxwellians at `±beam`; even particles take `+beam`.
    TwoStream {
        thermal_speed: f64,
        beam: Vec3,
        position_spread: f64,
    },
    ColdBeam {
        position: Vec3,
        velocity: Vec3,
    },
}

impl InitialDistribution {
    pub const NAMES: [&'static str; 4] = ["maxwellian", "uniform_box_maxwellian", "two_stream", "cold_beam"];

    pub fn validate(&self) -> Result<()> {
        let thermal = match self {
            InitialDistribution::Maxwellian {
                thermal_speed,
                position_spread,
                ..
            }
            | InitialDistribution::TwoStream {
                thermal_speed,
                position_spread,
                ..
            } => {
                if !(*position_spread >= 0.0) {
                    return Err(Error::param("position_spread must be non-negative"));
                }
                Some(*thermal_speed)
            }
            InitialDistribution::UniformBoxMaxwellian {
                lo, hi, thermal_speed, ..
            } => {
                if (0..3).any(|k| !(hi[k] > lo[k])) {
                    return Err(Error::param("uniform box needs hi > lo on every axis"));
                }
                Some(*thermal_speed)
            }
            InitialDistribution::ColdBeam { .. } => None,
        };
        if let Some(t) = thermal {
            if !(t > 0.0 && t.is_finite()) {
                return Err(Error::param(format!("thermal_speed must be positive, got {t}")));
            }
        }
        Ok(())
    }

    fn sample_one(&self, seed: u64, a: usize) -> (Vec3, Vec3) {
        let mut s = rng::initial_stream(seed, a as u64);
        let gauss3 = |s: &mut rng::PhiloxStream| Vec3::new(s.normal(), s.normal(), s.normal());
        match self {
            InitialDistribution::Maxwellian {
                thermal_speed,
                drift,
                position_spread,
            } => {
                let v = drift + gauss3(&mut s) * *thermal_speed;
                let x = gauss3(&mut s) * *position_spread;
                (x, v)
            }
            InitialDistribution::UniformBoxMaxwellian {
                lo,
                hi,
                thermal_speed,
                drift,
            } => {
                let v = drift + gauss3(&mut s) * *thermal_speed;
                let x = Vec3::from_fn(|k, _| lo[k] + (hi[k] - lo[k]) * rng::uniform(&mut s));
                (x, v)
            }
            InitialDistribution::TwoStream {
                thermal_speed,
                beam,
                position_spread,
            } => {
                let sign = if a.is_multiple_of(2) { 1.0 } else { -1.0 };
                let v = beam * sign + gauss3(&mut s) * *thermal_speed;
                let x = gauss3(&mut s) * *position_spread;
                (x, v)
            }
            InitialDistribution::ColdBeam { position, velocity } => (*position, *velocity),
        }
    }
}

/// Positions, velocities and (optionally) conjugate momenta of `N` particles.
#[derive(Debug, Clone, PartialEq)]
pub struct ParticleEnsemble {
    pub positions: Vec<Vec3>,
    pub velocities: Vec<Vec3>,
    pub momenta: Option<Vec<Vec3>>,
    /// Common particle weight `N_tot / N`.
    pub weight: f64,
}

impl ParticleEnsemble {
    pub fn new(positions: Vec<Vec3>, velocities: Vec<Vec3>, species: &SpeciesParams) -> Result<Self> {
        if positions.is_empty() {
            return Err(Error::param("an ensemble needs at least one particle"));
        }
        if positions.len() != velocities.len() {
            return Err(Error::param("positions and velocities differ in length"));
        }
        let ens = Self {
            weight: species.n_total / positions.len() as f64,
            positions,
            velocities,
            momenta: None,
        };
        ens.check_finite(0)?;
        Ok(ens)
    }

    /// Draws `n` particles i.i.d. from `dist`; the result depends only on `seed`.
    pub fn sample(n: usize, dist: &InitialDistribution, species: &SpeciesParams, seed: u64) -> Result<Self> {
        if n == 0 {
            return Err(Error::param("n_particles must be at least 1"));
        }
        dist.validate()?;
        let pairs: Vec<(Vec3, Vec3)> = (0..n).into_par_iter().map(|a| dist.sample_one(seed, a)).collect();
        let (positions, velocities) = pairs.into_iter().unzip();
        Self::new(positions, velocities, species)
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// Initializes `P_a = m V_a + q A(X_a, t0)`.
    pub fn init_momenta(&mut self, species: &SpeciesParams, vector_potential: impl Fn(&Vec3) -> Vec3) {
        self.momenta = Some(conjugate_momenta(self, species, vector_potential));
    }

    pub fn check_finite(&self, step: u64) -> Result<()> {
        for (a, (x, v)) in self.positions.iter().zip(&self.velocities).enumerate() {
            if !x.iter().all(|c| c.is_finite()) {
                return Err(Error::NonFinite {
                    step,
                    particle: a,
                    what: "position",
                });
            }
            if !v.iter().all(|c| c.is_finite()) {
                return Err(Error::NonFinite {
                    step,
                    particle: a,
                    what: "velocity",
                });
            }
        }
        Ok(())
    }
}

pub fn conjugate_momenta(
    ens: &ParticleEnsemble,
    species: &SpeciesParams,
    vector_potential: impl Fn(&Vec3) -> Vec3,
) -> Vec<Vec3> {
    ens.positions
        .iter()
        .zip(&ens.velocities)
        .map(|(x, v)| v * species.mass + vector_potential(x) * species.charge)
        .collect()
}

/// Ensemble velocity moments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentReport {
    pub n_particles: usize,
    pub mean_velocity: Vec3,
    pub velocity_variance: Vec3,
    /// `(N_tot/N) Σ m|V_a|²/2`.
    pub kinetic_energy: f64,
    /// `(N_tot/N) Σ m V_a`.
    pub total_momentum: Vec3,
    pub mean_speed: f64,
    pub min_speed: f64,
    pub max_speed: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_conjugate_momentum: Option<Vec3>,
}

pub fn moments(ens: &ParticleEnsemble, species: &SpeciesParams) -> MomentReport {
    let n = ens.len() as f64;
    let mut vsum = NeumaierSum3::new();
    let mut e2 = NeumaierSum::new();
    let mut speed = NeumaierSum::new();
    let (mut smin, mut smax) = (f64::INFINITY, 0.0f64);
    for v in &ens.velocities {
        vsum.add(v);
        let s2 = v.norm_squared();
        e2.add(s2);
        let s = s2.sqrt();
        speed.add(s);
        smin = smin.min(s);
        smax = smax.max(s);
    }
    let mean = vsum.value() / n;
    let mut var = NeumaierSum3::new();
    for v in &ens.velocities {
        let d = v - mean;
        var.add(&d.component_mul(&d));
    }
    let denom = if ens.len() > 1 { n - 1.0 } else { 1.0 };
    MomentReport {
        n_particles: ens.len(),
        mean_velocity: mean,
        velocity_variance: var.value() / denom,
        kinetic_energy: ens.weight * 0.5 * species.mass * e2.value(),
        total_momentum: vsum.value() * (ens.weight * species.mass),
        mean_speed: speed.value() / n,
        min_speed: smin,
        max_speed: smax,
        mean_conjugate_momentum: ens.momenta.as_ref().map(|p| crate::summation::sum3(p.iter()) / n),
    }
}

/// Which coordinates a deposition bins.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DepositSpace {
    Position,
    Velocity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DepositionKernel {
    NearestCell,
    CloudInCell,
}

/// Cell-centred values on an axis-aligned box.
#[derive(Debug, Clone, PartialEq)]
pub struct DepositionGrid {
    pub lo: Vec3,
    pub hi: Vec3,
    pub cells: [usize; 3],
    pub values: Vec<f64>,
    pub periodic: bool,
}

impl DepositionGrid {
    pub fn new(lo: Vec3, hi: Vec3, cells: [usize; 3]) -> Result<Self> {
        if cells.contains(&0) {
            return Err(Error::param("deposition grid needs at least one cell per axis"));
        }
        if (0..3).any(|k| !(hi[k] > lo[k]) || !(hi[k] - lo[k]).is_finite()) {
            return Err(Error::param("deposition grid has zero-volume cells"));
        }
        Ok(Self {
            lo,
            hi,
            cells,
            values: vec![0.0; cells[0] * cells[1] * cells[2]],
            periodic: false,
        })
    }

    pub fn periodic(mut self, periodic: bool) -> Self {
        self.periodic = periodic;
        self
    }

    /// A zeroed grid with the same geometry.
    pub fn empty_like(&self) -> Self {
        Self {
            values: vec![0.0; self.values.len()],
            ..self.clone()
        }
    }

    pub fn cell_size(&self) -> Vec3 {
        Vec3::from_fn(|k, _| (self.hi[k] - self.lo[k]) / self.cells[k] as f64)
    }

    pub fn cell_volume(&self) -> f64 {
        self.cell_size().product()
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.cells[0] * (j + self.cells[1] * k)
    }

    pub fn center(&self, i: usize, j: usize, k: usize) -> Vec3 {
        let h = self.cell_size();
        Vec3::new(
            self.lo[0] + (i as f64 + 0.5) * h[0],
            self.lo[1] + (j as f64 + 0.5) * h[1],
            self.lo[2] + (k as f64 + 0.5) * h[2],
        )
    }

    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        self.values[self.index(i, j, k)]
    }

    /// `Σ values · cell volume`.
    pub fn integral(&self) -> f64 {
        crate::summation::sum(self.values.iter().copied()) * self.cell_volume()
    }

    pub fn contains(&self, p: &Vec3) -> bool {
        (0..3).all(|k| p[k] >= self.lo[k] && p[k] <= self.hi[k])
    }

    fn wrap_or_clamp(&self, idx: isize, axis: usize) -> usize {
        let n = self.cells[axis] as isize;
        if self.periodic {
            idx.rem_euclid(n) as usize
        } else {
            idx.clamp(0, n - 1) as usize
        }
    }

    /// Cell indices and weights a point contributes to. Weights sum to one.
    fn stencil(&self, p: &Vec3, kernel: DepositionKernel, out: &mut Vec<(usize, f64)>) {
        out.clear();
        let h = self.cell_size();
        match kernel {
            DepositionKernel::NearestCell => {
                let idx: [usize; 3] = std::array::from_fn(|k| {
                    let c = ((p[k] - self.lo[k]) / h[k]).floor() as isize;
                    self.wrap_or_clamp(c, k)
                });
                out.push((self.index(idx[0], idx[1], idx[2]), 1.0));
            }
            DepositionKernel::CloudInCell => {
                let mut base = [0isize; 3];
                let mut frac = [0.0; 3];
                for k in 0..3 {
                    // Coordinate in units of cells, measured from the first cell centre.
                    let s = (p[k] - self.lo[k]) / h[k] - 0.5;
                    let f = s.floor();
                    base[k] = f as isize;
                    frac[k] = s - f;
                }
                for corner in 0..8 {
                    let mut w = 1.0;
                    let mut idx = [0usize; 3];
                    for k in 0..3 {
                        let upper = (corner >> k) & 1 == 1;
                        w *= if upper { frac[k] } else { 1.0 - frac[k] };
                        idx[k] = self.wrap_or_clamp(base[k] + isize::from(upper), k);
                    }
                    out.push((self.index(idx[0], idx[1], idx[2]), w));
                }
            }
        }
    }

    /// CIC weights of one point; exposed for the partition-of-unity property.
    pub fn cic_weights(&self, p: &Vec3) -> Vec<(usize, f64)> {
        let mut out = Vec::with_capacity(8);
        self.stencil(p, DepositionKernel::CloudInCell, &mut out);
        out
    }
}

/// Result of a deposition: the grid plus the count of particles it excluded.
#[derive(Debug, Clone, PartialEq)]
pub struct Deposit {
    pub grid: DepositionGrid,
    pub in_bounds: usize,
    pub out_of_bounds: usize,
}

fn deposit_weighted(
    points: &[Vec3],
    weights: impl Fn(usize) -> f64,
    grid: &DepositionGrid,
    kernel: DepositionKernel,
) -> Deposit {
    let mut out = grid.empty_like();
    let mut acc = vec![NeumaierSum::new(); out.values.len()];
    let vol = grid.cell_volume();
    let mut stencil = Vec::with_capacity(8);
    let mut inside = 0;
    for (a, p) in points.iter().enumerate() {
        if !grid.periodic && !grid.contains(p) {
            continue;
        }
        inside += 1;
        let w = weights(a) / vol;
        grid.stencil(p, kernel, &mut stencil);
        for &(idx, s) in &stencil {
            acc[idx].add(w * s);
        }
    }
    for (v, a) in out.values.iter_mut().zip(&acc) {
        *v = a.value();
    }
    Deposit {
        grid: out,
        in_bounds: inside,
        out_of_bounds: points.len() - inside,
    }
}

/// Empirical probability density `(1/N) Σ δ(· − Z_a)` regularized by `kernel`,
/// over positions or velocities.
pub fn deposit_density(
    ens: &ParticleEnsemble,
    grid: &DepositionGrid,
    space: DepositSpace,
    kernel: DepositionKernel,
) -> Deposit {
    let points = match space {
        DepositSpace::Position => &ens.positions,
        DepositSpace::Velocity => &ens.velocities,
    };
    let w = 1.0 / ens.len() as f64;
    deposit_weighted(points, |_| w, grid, kernel)
}

/// Charge density and current density grids.
#[derive(Debug, Clone, PartialEq)]
pub struct ChargeCurrent {
    pub rho: DepositionGrid,
    pub current: [DepositionGrid; 3],
    pub in_bounds: usize,
}

/// `ρ ≈ (qN_tot/N) Σ δ(x − X_a)` and `J ≈ (qN_tot/N) Σ V_a δ(x − X_a)` on a position grid.
pub fn deposit_charge_current(
    ens: &ParticleEnsemble,
    species: &SpeciesParams,
    grid: &DepositionGrid,
    kernel: DepositionKernel,
) -> ChargeCurrent {
    let q = species.charge * ens.weight;
    let rho = deposit_weighted(&ens.positions, |_| q, grid, kernel);
    let current =
        std::array::from_fn(|k| deposit_weighted(&ens.positions, |a| q * ens.velocities[a][k], grid, kernel).grid);
    ChargeCurrent {
        rho: rho.grid,
        current,
        in_bounds: rho.in_bounds,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn species() -> SpeciesParams {
        SpeciesParams::new(1.0, 1.0, 1.0).unwrap()
    }

    #[test]
    fn cold_beam_is_exact() {
        let dist = InitialDistribution::ColdBeam {
            position: Vec3::zeros(),
            velocity: Vec3::new(1.0, 0.0, 0.0),
        };
        let ens = ParticleEnsemble::sample(1, &dist, &species(), 0).unwrap();
        assert_eq!(ens.positions[0], Vec3::zeros());
        assert_eq!(ens.velocities[0], Vec3::new(1.0, 0.0, 0.0));
    }

    #[test]
    fn sampler_validation() {
        let bad = InitialDistribution::Maxwellian {
            thermal_speed: 0.0,
            drift: Vec3::zeros(),
            position_spread: 0.0,
        };
        assert!(ParticleEnsemble::sample(10, &bad, &species(), 1).is_err());
        let good = InitialDistribution::Maxwellian {
            thermal_speed: 1.0,
            drift: Vec3::zeros(),
            position_spread: 0.0,
        };
        assert!(ParticleEnsemble::sample(0, &good, &species(), 1).is_err());
        assert!(SpeciesParams::new(1.0, 0.0, 1.0).is_err());
        assert!(SpeciesParams::new(1.0, 1.0, -1.0).is_err());
    }

    #[test]
    fn maxwellian_sample_statistics() {
        let n = 100_000;
        let dist = InitialDistribution::Maxwellian {
            thermal_speed: 1.0,
            drift: Vec3::zeros(),
            position_spread: 0.0,
        };
        let ens = ParticleEnsemble::sample(n, &dist, &species(), 7).unwrap();
        // Independent statistics pass over the raw arrays.
        for k in 0..3 {
            let xs: Vec<f64> = ens.velocities.iter().map(|v| v[k]).collect();
            let mean = xs.iter().sum::<f64>() / n as f64;
            let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n as f64 - 1.0);
            assert!(mean.abs() < 4.0 / (n as f64).sqrt(), "axis {k} mean {mean}");
            assert!((var - 1.0).abs() < 0.05, "axis {k} variance {var}");
        }
        let again = ParticleEnsemble::sample(n, &dist, &species(), 7).unwrap();
        assert_eq!(ens, again);
    }

    #[test]
    fn two_stream_alternates_beams() {
        let dist = InitialDistribution::TwoStream {
            thermal_speed: 1e-6,
            beam: Vec3::new(3.0, 0.0, 0.0),
            position_spread: 0.0,
        };
        let ens = ParticleEnsemble::sample(4, &dist, &species(), 2).unwrap();
        assert!((ens.velocities[0][0] - 3.0).abs() < 1e-4);
        assert!((ens.velocities[1][0] + 3.0).abs() < 1e-4);
    }

    #[test]
    fn cold_beam_moments() {
        let n = 100;
        let dist = InitialDistribution::ColdBeam {
            position: Vec3::zeros(),
            velocity: Vec3::new(1.0, 0.0, 0.0),
        };
        let sp = SpeciesParams::new(1.0, 1.0, 100.0).unwrap();
        let ens = ParticleEnsemble::sample(n, &dist, &sp, 0).unwrap();
        let m = moments(&ens, &sp);
        assert_eq!(m.kinetic_energy, 50.0);
        assert_eq!(m.mean_velocity, Vec3::new(1.0, 0.0, 0.0));
        assert_eq!(m.velocity_variance, Vec3::zeros());
        assert_eq!(m.min_speed, 1.0);
        assert_eq!(m.max_speed, 1.0);
        assert!(m.mean_conjugate_momentum.is_none());
        let json = serde_json::to_string(&m).unwrap();
        assert!(!json.contains("conjugate"));
    }

    fn unit_grid(cells: usize) -> DepositionGrid {
        DepositionGrid::new(Vec3::zeros(), Vec3::repeat(cells as f64), [cells; 3]).unwrap()
    }

    #[test]
    fn nearest_cell_single_particle() {
        let grid = DepositionGrid::new(Vec3::zeros(), Vec3::repeat(2.0), [4, 4, 4]).unwrap();
        let ens = ParticleEnsemble::new(vec![Vec3::new(0.75, 0.25, 1.25)], vec![Vec3::zeros()], &species()).unwrap();
        let d = deposit_density(&ens, &grid, DepositSpace::Position, DepositionKernel::NearestCell);
        let vol = grid.cell_volume();
        assert_eq!(d.grid.get(1, 0, 2), 1.0 / vol);
        assert_eq!(d.grid.values.iter().filter(|&&v| v != 0.0).count(), 1);
    }

    #[test]
    fn cic_corner_splits_equally() {
        let grid = unit_grid(4);
        // A cell corner lies halfway between the centres of its 8 neighbouring cells.
        let ens = ParticleEnsemble::new(vec![Vec3::repeat(2.0)], vec![Vec3::zeros()], &species()).unwrap();
        let d = deposit_density(&ens, &grid, DepositSpace::Position, DepositionKernel::CloudInCell);
        for i in 1..3 {
            for j in 1..3 {
                for k in 1..3 {
                    assert!((d.grid.get(i, j, k) - 0.125).abs() < 1e-15);
                }
            }
        }
        assert!((d.grid.integral() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn deposition_conserves_in_bounds_mass() {
        let dist = InitialDistribution::Maxwellian {
            thermal_speed: 1.0,
            drift: Vec3::zeros(),
            position_spread: 1.5,
        };
        let ens = ParticleEnsemble::sample(5000, &dist, &species(), 3).unwrap();
        let grid = DepositionGrid::new(Vec3::repeat(-2.0), Vec3::repeat(2.0), [7, 6, 5]).unwrap();
        for kernel in [DepositionKernel::NearestCell, DepositionKernel::CloudInCell] {
            let d = deposit_density(&ens, &grid, DepositSpace::Position, kernel);
            let expect = d.in_bounds as f64 / ens.len() as f64;
            assert!(d.out_of_bounds > 0);
            assert!((d.grid.integral() - expect).abs() < 1e-12, "{kernel:?}");
        }
    }

    #[test]
    fn maxwellian_velocity_deposit_variance() {
        let n = 10_000;
        let dist = InitialDistribution::Maxwellian {
            thermal_speed: 1.0,
            drift: Vec3::zeros(),
            position_spread: 0.0,
        };
        let ens = ParticleEnsemble::sample(n, &dist, &species(), 11).unwrap();
        let grid = DepositionGrid::new(Vec3::repeat(-6.0), Vec3::repeat(6.0), [32; 3]).unwrap();
        let d = deposit_density(&ens, &grid, DepositSpace::Velocity, DepositionKernel::CloudInCell);
        let vol = grid.cell_volume();
        // Direct sample moment of the same ensemble.
        let direct: Vec<f64> = (0..3)
            .map(|k| ens.velocities.iter().map(|v| v[k] * v[k]).sum::<f64>() / n as f64)
            .collect();
        for axis in 0..3 {
            let mut m2 = 0.0;
            for i in 0..32 {
                for j in 0..32 {
                    for k in 0..32 {
                        let c = grid.center(i, j, k);
                        m2 += d.grid.get(i, j, k) * vol * c[axis] * c[axis];
                    }
                }
            }
            assert!(
                (m2 / direct[axis] - 1.0).abs() < 0.05,
                "axis {axis}: {m2} vs {}",
                direct[axis]
            );
        }
    }

    #[test]
    fn charge_and_current_identities() {
        let sp = SpeciesParams::new(2.0, 1.0, 10.0).unwrap();
        let grid = unit_grid(4);
        let at = Vec3::new(1.5, 1.5, 1.5);
        let still = ParticleEnsemble::new(vec![at], vec![Vec3::zeros()], &sp).unwrap();
        let cc = deposit_charge_current(&still, &sp, &grid, DepositionKernel::CloudInCell);
        assert!(cc.current.iter().all(|g| g.values.iter().all(|&v| v == 0.0)));
        assert_eq!(cc.rho.values.iter().filter(|&&v| v != 0.0).count(), 1);
        assert!((cc.rho.integral() - 20.0).abs() < 1e-12);

        let moving = ParticleEnsemble::new(vec![at], vec![Vec3::new(2.0, 0.0, 0.0)], &sp).unwrap();
        let cc = deposit_charge_current(&moving, &sp, &grid, DepositionKernel::CloudInCell);
        for (j, r) in cc.current[0].values.iter().zip(&cc.rho.values) {
            assert_eq!(*j, 2.0 * r);
        }

        let pair = ParticleEnsemble::new(
            vec![at, at],
            vec![Vec3::new(1.0, -2.0, 0.5), Vec3::new(-1.0, 2.0, -0.5)],
            &sp,
        )
        .unwrap();
        let cc2 = deposit_charge_current(&pair, &sp, &grid, DepositionKernel::CloudInCell);
        assert!(cc2.current.iter().all(|g| g.values.iter().all(|&v| v == 0.0)));
        // Same total charge spread over two particles of half the weight each,
        // i.e. twice the single-particle value at equal weight.
        let single_equal_weight = cc.rho.get(1, 1, 1) / 2.0;
        assert_eq!(cc2.rho.get(1, 1, 1), 2.0 * single_equal_weight);
    }

    #[test]
    fn periodic_grid_wraps() {
        let grid = unit_grid(4).periodic(true);
        let ens = ParticleEnsemble::new(vec![Vec3::new(5.0, 0.5, 0.5)], vec![Vec3::zeros()], &species()).unwrap();
        let d = deposit_density(&ens, &grid, DepositSpace::Position, DepositionKernel::NearestCell);
        assert_eq!(d.in_bounds, 1);
        assert_eq!(d.grid.get(1, 0, 0), 1.0);
    }

    #[test]
    fn bad_grids_rejected() {
        assert!(DepositionGrid::new(Vec3::zeros(), Vec3::repeat(1.0), [0, 1, 1]).is_err());
        assert!(DepositionGrid::new(Vec3::zeros(), Vec3::new(1.0, 0.0, 1.0), [1, 1, 1]).is_err());
    }

    proptest::proptest! {
        #[test]
        fn cic_partition_of_unity(x in 0.0f64..8.0, y in 0.0f64..8.0, z in 0.0f64..8.0) {
            let grid = unit_grid(8);
            let w = grid.cic_weights(&Vec3::new(x, y, z));
            let s: f64 = w.iter().map(|(_, w)| w).sum();
            proptest::prop_assert!((s - 1.0).abs() < 1e-15);
            proptest::prop_assert!(w.iter().all(|&(_, w)| w >= 0.0));
        }
    }
}
