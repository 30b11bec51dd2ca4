//! Independent reference solutions for the verification suites.

use std::fmt;

use serde::Serialize;

use crate::collision::LenardBernstein;
use crate::error::{Error, Result};
use crate::summation::NeumaierSum;
use crate::Vec3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct OuMoments {
    pub mean: Vec3,
    pub variance: f64,
}

/// Closed-form Ornstein-Uhlenbeck moments of the Lenard-Bernstein process
/// started from the point mass `v0`.
pub fn ou_moments(nu: f64, mu: f64, gamma: f64, v0: &Vec3, t: f64) -> OuMoments {
    let rate = nu * mu;
    OuMoments {
        mean: v0 * (-rate * t).exp(),
        variance: gamma * gamma / (2.0 * mu) * -(-2.0 * rate * t).exp_m1(),
    }
}

/// The 1D operator `∂f/∂t = ½ ∂²(D f)/∂v² − ∂(K f)/∂v`.
pub enum FpOperator1D<'a> {
    /// One velocity component of the Lenard-Bernstein operator: `D = ν γ²`, `K = −ν μ v`.
    LenardBernstein(LenardBernstein),
    Custom {
        d: &'a dyn Fn(f64) -> f64,
        k: &'a dyn Fn(f64) -> f64,
    },
}

impl fmt::Debug for FpOperator1D<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FpOperator1D::LenardBernstein(p) => f.debug_tuple("LenardBernstein").field(p).finish(),
            FpOperator1D::Custom { .. } => write!(f, "Custom"),
        }
    }
}

impl FpOperator1D<'_> {
    fn d(&self, v: f64) -> f64 {
        match self {
            FpOperator1D::LenardBernstein(p) => p.nu * p.gamma * p.gamma,
            FpOperator1D::Custom { d, .. } => d(v),
        }
    }

    fn k(&self, v: f64) -> f64 {
        match self {
            FpOperator1D::LenardBernstein(p) => -p.nu * p.mu * v,
            FpOperator1D::Custom { k, .. } => k(v),
        }
    }
}

/// Cell-averaged density on `[v_lo, v_hi]`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FokkerPlanckGrid1D {
    pub v_lo: f64,
    pub v_hi: f64,
    pub values: Vec<f64>,
    /// Step used by the last solve (0 before any solve).
    pub dt: f64,
    pub time: f64,
    /// Smallest cell value seen during the solve; positivity is monitored, not enforced.
    pub min_value: f64,
    /// Largest relative per-step change of total mass.
    pub max_mass_drift: f64,
}

impl FokkerPlanckGrid1D {
    /// Cell averages of `f` by 3-point Gauss-Legendre quadrature.
    pub fn from_fn(v_lo: f64, v_hi: f64, n_cells: usize, f: impl Fn(f64) -> f64) -> Result<Self> {
        if n_cells < 3 || !(v_hi > v_lo) {
            return Err(Error::param(
                "Fokker-Planck grid needs v_hi > v_lo and at least 3 cells",
            ));
        }
        let h = (v_hi - v_lo) / n_cells as f64;
        let node = 0.5 * (0.6f64).sqrt();
        let values: Vec<f64> = (0..n_cells)
            .map(|i| {
                let c = v_lo + (i as f64 + 0.5) * h;
                (5.0 * f(c - node * h) + 8.0 * f(c) + 5.0 * f(c + node * h)) / 18.0
            })
            .collect();
        let min_value = values.iter().copied().fold(f64::INFINITY, f64::min);
        Ok(Self {
            v_lo,
            v_hi,
            values,
            dt: 0.0,
            time: 0.0,
            min_value,
            max_mass_drift: 0.0,
        })
    }

    /// Gaussian with the given mean and variance.
    pub fn gaussian(v_lo: f64, v_hi: f64, n_cells: usize, mean: f64, variance: f64) -> Result<Self> {
        let norm = (2.0 * std::f64::consts::PI * variance).sqrt().recip();
        Self::from_fn(v_lo, v_hi, n_cells, |v| {
            norm * (-(v - mean).powi(2) / (2.0 * variance)).exp()
        })
    }

    pub fn n_cells(&self) -> usize {
        self.values.len()
    }

    pub fn cell_width(&self) -> f64 {
        (self.v_hi - self.v_lo) / self.n_cells() as f64
    }

    pub fn center(&self, i: usize) -> f64 {
        self.v_lo + (i as f64 + 0.5) * self.cell_width()
    }

    pub fn mass(&self) -> f64 {
        self.cell_width() * crate::summation::sum(self.values.iter().copied())
    }

    pub fn mean(&self) -> f64 {
        let h = self.cell_width();
        h * crate::summation::sum(self.values.iter().enumerate().map(|(i, f)| f * self.center(i))) / self.mass()
    }

    /// Variance including the within-cell contribution `h²/12`.
    pub fn variance(&self) -> f64 {
        let h = self.cell_width();
        let m = self.mean();
        let second = h * crate::summation::sum(
            self.values
                .iter()
                .enumerate()
                .map(|(i, f)| f * (self.center(i) - m).powi(2)),
        ) / self.mass();
        second + h * h / 12.0
    }

    /// `∫|f − g|` against cell values on the same grid.
    pub fn l1_distance(&self, other: &[f64]) -> f64 {
        assert_eq!(other.len(), self.values.len(), "grids differ");
        self.cell_width() * crate::summation::sum(self.values.iter().zip(other).map(|(a, b)| (a - b).abs()))
    }
}

/// Largest stable step of the central scheme with SSP-RK3 time stepping:
/// the diffusive limit `h²/D` combined with the central-advection limit `√3 h/|K|`.
pub fn fp_stable_dt(op: &FpOperator1D<'_>, grid: &FokkerPlanckGrid1D) -> f64 {
    let h = grid.cell_width();
    let mut d_max: f64 = 0.0;
    let mut k_max: f64 = 0.0;
    for i in 0..=grid.n_cells() {
        let v = grid.v_lo + i as f64 * h;
        d_max = d_max.max(op.d(v).abs());
        k_max = k_max.max(op.k(v).abs());
        if i < grid.n_cells() {
            d_max = d_max.max(op.d(grid.center(i)).abs());
        }
    }
    let rate = d_max / (h * h) + k_max / (3f64.sqrt() * h);
    if rate == 0.0 {
        f64::INFINITY
    } else {
        1.0 / rate
    }
}

struct FpStencil {
    d_center: Vec<f64>,
    k_face: Vec<f64>,
    h: f64,
}

impl FpStencil {
    fn rhs(&self, f: &[f64], out: &mut [f64]) {
        let n = f.len();
        let mut flux_left = 0.0;
        for i in 0..n {
            let flux_right = if i + 1 < n {
                -0.5 * (self.d_center[i + 1] * f[i + 1] - self.d_center[i] * f[i]) / self.h
                    + self.k_face[i + 1] * 0.5 * (f[i] + f[i + 1])
            } else {
                0.0
            };
            out[i] = -(flux_right - flux_left) / self.h;
            flux_left = flux_right;
        }
    }
}

/// Evolves `grid` to `time + horizon` with the conservative central scheme
/// and zero-flux boundaries. `dt = None` picks 0.9 of the stable limit.
pub fn fp_solve_1d(
    op: &FpOperator1D<'_>,
    mut grid: FokkerPlanckGrid1D,
    horizon: f64,
    dt: Option<f64>,
) -> Result<FokkerPlanckGrid1D> {
    if !(horizon >= 0.0) {
        return Err(Error::param("horizon must be non-negative"));
    }
    let limit = fp_stable_dt(op, &grid);
    let dt_max = match dt {
        Some(dt) if dt > limit => return Err(Error::Stability { dt, limit }),
        Some(dt) if dt > 0.0 => dt,
        Some(dt) => return Err(Error::param(format!("dt must be positive, got {dt}"))),
        None => 0.9 * limit,
    };
    if horizon == 0.0 {
        return Ok(grid);
    }
    let n_steps = (horizon / dt_max).ceil().max(1.0) as u64;
    let dt = horizon / n_steps as f64;
    let n = grid.n_cells();
    let h = grid.cell_width();
    let stencil = FpStencil {
        d_center: (0..n).map(|i| op.d(grid.center(i))).collect(),
        k_face: (0..=n).map(|i| op.k(grid.v_lo + i as f64 * h)).collect(),
        h,
    };
    let mut f = std::mem::take(&mut grid.values);
    let mut k = vec![0.0; n];
    let mut s1 = vec![0.0; n];
    let mut s2 = vec![0.0; n];
    let mut mass = mass_of(&f);
    for _ in 0..n_steps {
        stencil.rhs(&f, &mut k);
        for i in 0..n {
            s1[i] = f[i] + dt * k[i];
        }
        stencil.rhs(&s1, &mut k);
        for i in 0..n {
            s2[i] = 0.75 * f[i] + 0.25 * (s1[i] + dt * k[i]);
        }
        stencil.rhs(&s2, &mut k);
        for i in 0..n {
            f[i] = f[i] / 3.0 + 2.0 / 3.0 * (s2[i] + dt * k[i]);
        }
        let new_mass = mass_of(&f);
        grid.max_mass_drift = grid.max_mass_drift.max(((new_mass - mass) / mass).abs());
        mass = new_mass;
        grid.min_value = f.iter().copied().fold(grid.min_value, f64::min);
    }
    grid.values = f;
    grid.dt = dt;
    grid.time += horizon;
    Ok(grid)
}

fn mass_of(f: &[f64]) -> f64 {
    let mut s = NeumaierSum::new();
    for &x in f {
        s.add(x);
    }
    s.value()
}

/// `½ Σ_ν Σ_j (∂g_ν^i/∂v^j) g_ν^j` by central differences with step `h`.
pub fn fd_strat_correction(g_field: &dyn Fn(&Vec3) -> [Vec3; 3], v: &Vec3, h: f64) -> Vec3 {
    let g0 = g_field(v);
    let mut out = Vec3::zeros();
    for j in 0..3 {
        let mut dv = Vec3::zeros();
        dv[j] = h;
        let gp = g_field(&(v + dv));
        let gm = g_field(&(v - dv));
        for nu in 0..3 {
            out += (gp[nu] - gm[nu]) / (2.0 * h) * g0[nu][j];
        }
    }
    out * 0.5
}
