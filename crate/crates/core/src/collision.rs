//! Collision operators expressed as forcing terms.
//!
//! A Fokker-Planck collision operator with diffusion matrix `D` and drift `K`
//! is realized by a Stratonovich drift `G` and diffusion vectors `g_ν` with
//!
//! ```text
//! D_ij = Σ_ν g_ν^i g_ν^j,        K_i = G^i + ½ Σ_ν Σ_j (∂g_ν^i/∂v^j) g_ν^j.
//! ```
//!
//! Lenard-Bernstein and Lorentz come with closed-form `(G, g)`. Coulomb and
//! user-supplied `(D, K)` pairs go through [`decompose_dk`], which takes the
//! symmetric PSD square root of `D` as `g` (so `M = 3`).

use std::fmt;
use std::sync::Arc;

use nalgebra::SymmetricEigen;
use serde::{Deserialize, Serialize};

use crate::ensemble::{ParticleEnsemble, SpeciesParams};
use crate::error::{Error, Result};
use crate::{Mat3, Vec3};

/// Number of Wiener channels per particle for every operator in this module.
pub const CHANNELS: usize = 3;

/// Default finite-difference step: `max(1e-5, 1e-5·|v|)`.
pub fn fd_step(v: &Vec3) -> f64 {
    1e-5f64.max(1e-5 * v.norm())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ForcingEval {
    /// Stratonovich drift `G`.
    pub drift_g: Vec3,
    /// `g_ν` for `ν = 1..3`.
    pub diffusion_g: [Vec3; CHANNELS],
    /// Itô drift `K`.
    pub ito_drift_k: Vec3,
}

impl ForcingEval {
    pub fn zero() -> Self {
        Self {
            drift_g: Vec3::zeros(),
            diffusion_g: [Vec3::zeros(); CHANNELS],
            ito_drift_k: Vec3::zeros(),
        }
    }

    /// `Σ_ν g_ν g_νᵀ`.
    pub fn diffusion_matrix(&self) -> Mat3 {
        self.diffusion_g.iter().map(|g| g * g.transpose()).sum()
    }

    /// `K − G`, the noise-induced drift.
    pub fn stratonovich_correction(&self) -> Vec3 {
        self.ito_drift_k - self.drift_g
    }

    /// `Σ_ν g_ν ΔW^ν`.
    #[inline]
    pub fn noise_kick(&self, dw: &[f64]) -> Vec3 {
        self.diffusion_g[0] * dw[0] + self.diffusion_g[1] * dw[1] + self.diffusion_g[2] * dw[2]
    }

    #[inline]
    pub fn is_finite(&self) -> bool {
        self.drift_g.iter().all(|c| c.is_finite())
            && self.ito_drift_k.iter().all(|c| c.is_finite())
            && self.diffusion_g.iter().all(|g| g.iter().all(|c| c.is_finite()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LenardBernstein {
    pub nu: f64,
    pub mu: f64,
    pub gamma: f64,
}

impl LenardBernstein {
    pub fn validate(&self) -> Result<()> {
        for (name, x) in [("nu", self.nu), ("mu", self.mu), ("gamma", self.gamma)] {
            if !(x > 0.0 && x.is_finite()) {
                return Err(Error::param(format!(
                    "lenard_bernstein.{name} must be positive, got {x}"
                )));
            }
        }
        Ok(())
    }

    /// Per-component stationary velocity variance `γ²/(2μ)`.
    pub fn stationary_variance(&self) -> f64 {
        self.gamma * self.gamma / (2.0 * self.mu)
    }
}

/// `G = −ν_c μ v`, `g_ν = √ν_c γ e_ν`; `g` is constant so `K = G`.
#[inline]
pub fn eval_lenard_bernstein(params: &LenardBernstein, _x: &Vec3, v: &Vec3) -> ForcingEval {
    let drift = -v * (params.nu * params.mu);
    let s = params.nu.sqrt() * params.gamma;
    ForcingEval {
        drift_g: drift,
        diffusion_g: [Vec3::x() * s, Vec3::y() * s, Vec3::z() * s],
        ito_drift_k: drift,
    }
}

/// Collision frequency `ν_c(|v|)` of the Lorentz operator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LorentzFrequency {
    Constant {
        nu: f64,
    },
    /// `ν₀ · max(|v|, v_min)^-3`.
    PowerLaw {
        nu0: f64,
        v_min: f64,
    },
}

impl LorentzFrequency {
    pub const DEFAULT_V_MIN: f64 = 1e-6;

    pub fn at(&self, speed: f64) -> f64 {
        match *self {
            LorentzFrequency::Constant { nu } => nu,
            LorentzFrequency::PowerLaw { nu0, v_min } => nu0 * speed.max(v_min).powi(-3),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            LorentzFrequency::Constant { nu } => nu > 0.0 && nu.is_finite(),
            LorentzFrequency::PowerLaw { nu0, v_min } => nu0 > 0.0 && v_min > 0.0 && nu0.is_finite(),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::param(format!("invalid Lorentz collision frequency {self:?}")))
        }
    }
}

/// Pitch-angle scattering: `G = 0`, `g_ν = √ν_c(|v|) (e_ν × v)`.
///
/// The generators are orthogonal to `v` and `∇_v √ν_c` is parallel to `v`, so
/// the Stratonovich correction reduces to `½ ν_c Σ_ν A_ν² v = −ν_c(|v|) v`
/// for the skew generators `A_ν v = e_ν × v`.
pub fn eval_lorentz(freq: &LorentzFrequency, _x: &Vec3, v: &Vec3) -> ForcingEval {
    let nu = freq.at(v.norm());
    let s = nu.sqrt();
    ForcingEval {
        drift_g: Vec3::zeros(),
        diffusion_g: [
            Vec3::new(0.0, -v[2], v[1]) * s,
            Vec3::new(v[2], 0.0, -v[0]) * s,
            Vec3::new(-v[1], v[0], 0.0) * s,
        ],
        ito_drift_k: -v * nu,
    }
}

/// How the `δ(x − X)` factor of the Coulomb expectation is regularized.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Locality {
    /// Every other particle is a field particle (spatially uniform limit).
    Homogeneous,
    /// Only particles in the same cell of this grid interact; particles
    /// outside the box are assigned to the nearest boundary cell.
    CellLocal { lo: Vec3, hi: Vec3, cells: [usize; 3] },
}

impl Locality {
    fn cell_of(&self, x: &Vec3) -> usize {
        match self {
            Locality::Homogeneous => 0,
            Locality::CellLocal { lo, hi, cells } => {
                let idx: [usize; 3] = std::array::from_fn(|k| {
                    let s = (x[k] - lo[k]) / (hi[k] - lo[k]) * cells[k] as f64;
                    (s.floor().max(0.0) as usize).min(cells[k] - 1)
                });
                idx[0] + cells[0] * (idx[1] + cells[1] * idx[2])
            }
        }
    }

    fn n_cells(&self) -> usize {
        match self {
            Locality::Homogeneous => 1,
            Locality::CellLocal { cells, .. } => cells.iter().product(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoulombParams {
    /// `Γ = (4π q⁴/m²) ln Λ`.
    pub gamma: f64,
    /// Velocity softening `δ_v` in `(|v−u|² + δ_v²)^{1/2}`.
    pub softening: f64,
    pub locality: Locality,
}

impl CoulombParams {
    pub const DEFAULT_SOFTENING: f64 = 1e-3;

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(Error::param(format!(
                "coulomb.gamma must be positive, got {}",
                self.gamma
            )));
        }
        if !(self.softening >= 0.0 && self.softening.is_finite()) {
            return Err(Error::param("coulomb.softening must be non-negative"));
        }
        if let Locality::CellLocal { lo, hi, cells } = &self.locality {
            if cells.contains(&0) || (0..3).any(|k| !(hi[k] > lo[k])) {
                return Err(Error::param("coulomb locality grid is degenerate"));
            }
        }
        Ok(())
    }
}

/// Empirical Coulomb diffusion tensor, drift and `∂D/∂v_k`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoulombTensors {
    pub d: Mat3,
    pub k: Vec3,
    /// `d_grad[k] = ∂D/∂v^k`.
    pub d_grad: [Mat3; 3],
    /// Field particles that contributed.
    pub used: usize,
}

/// Sums the softened Landau kernel over field velocities `u`:
///
/// ```text
/// D = scale Σ (|w|² I − w wᵀ)/r³,   K = −2 scale Σ w/r³,   w = v − u,  r² = |w|² + δ²
/// ```
///
/// Softening only the denominator keeps `K_i = Σ_j ∂D_ij/∂v_j` exact. With
/// `δ = 0`, field particles at exactly `v` have no defined contribution and
/// are skipped; if nothing else remains the evaluation is singular.
pub fn coulomb_tensors<'a>(
    softening: f64,
    scale: f64,
    v: &Vec3,
    field: impl IntoIterator<Item = &'a Vec3>,
) -> Result<CoulombTensors> {
    let d2 = softening * softening;
    let mut d = Mat3::zeros();
    let mut k = Vec3::zeros();
    let mut grad = [Mat3::zeros(); 3];
    let (mut seen, mut used) = (0usize, 0usize);
    for u in field {
        seen += 1;
        let w = v - u;
        let w2 = w.norm_squared();
        let r2 = w2 + d2;
        if r2 == 0.0 {
            continue;
        }
        used += 1;
        let inv_r = r2.sqrt().recip();
        let inv_r3 = inv_r * inv_r * inv_r;
        let inv_r5 = inv_r3 * inv_r * inv_r;
        let wwt = w * w.transpose();
        let proj = Mat3::identity() * w2 - wwt;
        d += proj * inv_r3;
        k -= w * (2.0 * inv_r3);
        for (m, g) in grad.iter_mut().enumerate() {
            // ∂/∂v_m of (|w|²δ_ij − w_i w_j) r⁻³.
            let mut num = Mat3::identity() * (2.0 * w[m]);
            for i in 0..3 {
                num[(i, m)] -= w[i];
                num[(m, i)] -= w[i];
            }
            *g += num * inv_r3 - proj * (3.0 * w[m] * inv_r5);
        }
    }
    if seen > 0 && used == 0 {
        return Err(Error::Singular(
            "every field particle coincides with the test velocity and softening is zero".into(),
        ));
    }
    Ok(CoulombTensors {
        d: d * scale,
        k: k * scale,
        d_grad: grad.map(|g| g * scale),
        used,
    })
}

/// Coulomb forcing at `(x, v)` against the whole ensemble.
///
/// `exclude` removes one particle (the test particle itself) from the field
/// average; the normalization then uses `N − 1` field particles.
pub fn eval_coulomb(
    params: &CoulombParams,
    x: &Vec3,
    v: &Vec3,
    ens: &ParticleEnsemble,
    species: &SpeciesParams,
    exclude: Option<usize>,
) -> Result<ForcingEval> {
    let snapshot = CoulombSnapshot::new(params, ens, species);
    snapshot.eval(x, v, exclude)
}

/// Frozen field-particle data for evaluating Coulomb forcing during one step.
#[derive(Debug, Clone)]
pub struct CoulombSnapshot {
    params: CoulombParams,
    velocities: Vec<Vec3>,
    members: Vec<Vec<usize>>,
    n_total: f64,
}

impl CoulombSnapshot {
    pub fn new(params: &CoulombParams, ens: &ParticleEnsemble, species: &SpeciesParams) -> Self {
        let mut members = vec![Vec::new(); params.locality.n_cells()];
        for (a, x) in ens.positions.iter().enumerate() {
            members[params.locality.cell_of(x)].push(a);
        }
        Self {
            params: *params,
            velocities: ens.velocities.clone(),
            members,
            n_total: species.n_total,
        }
    }

    pub fn tensors(&self, x: &Vec3, v: &Vec3, exclude: Option<usize>) -> Result<CoulombTensors> {
        let n_field = self.velocities.len() - usize::from(exclude.is_some());
        if n_field == 0 {
            return Ok(CoulombTensors {
                d: Mat3::zeros(),
                k: Vec3::zeros(),
                d_grad: [Mat3::zeros(); 3],
                used: 0,
            });
        }
        let scale = self.n_total * self.params.gamma / n_field as f64;
        let cell = &self.members[self.params.locality.cell_of(x)];
        let field = cell
            .iter()
            .filter(|&&b| Some(b) != exclude)
            .map(|&b| &self.velocities[b]);
        coulomb_tensors(self.params.softening, scale, v, field)
    }

    pub fn eval(&self, x: &Vec3, v: &Vec3, exclude: Option<usize>) -> Result<ForcingEval> {
        let t = self.tensors(x, v, exclude)?;
        if t.used == 0 {
            return Ok(ForcingEval::zero());
        }
        decompose_dk(&t.d, &t.k, DiffusionGradient::Analytic(&t.d_grad))
    }
}

/// How `∂D/∂v` is obtained when computing the Stratonovich correction.
#[derive(Clone, Copy)]
pub enum DiffusionGradient<'a> {
    /// `D` does not depend on `v`; the square root is constant and `G = K`.
    Constant,
    /// `[∂D/∂v^1, ∂D/∂v^2, ∂D/∂v^3]`.
    Analytic(&'a [Mat3; 3]),
    /// Central differences of the square root of `D(v)` with step `h`.
    FiniteDifference {
        d_at: &'a dyn Fn(&Vec3) -> Mat3,
        v: Vec3,
        h: f64,
    },
}

impl fmt::Debug for DiffusionGradient<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DiffusionGradient::Constant => write!(f, "Constant"),
            DiffusionGradient::Analytic(g) => f.debug_tuple("Analytic").field(g).finish(),
            DiffusionGradient::FiniteDifference { v, h, .. } => {
                f.debug_struct("FiniteDifference").field("v", v).field("h", h).finish()
            }
        }
    }
}

/// Eigen-decomposition based square root of a symmetric PSD matrix.
#[derive(Debug, Clone, Copy)]
pub struct PsdSqrt {
    pub root: Mat3,
    eigenvectors: Mat3,
    sqrt_eigenvalues: Vec3,
}

impl PsdSqrt {
    /// Rejects asymmetric input and eigenvalues below `−1e-12` (relative); clips the rest at 0.
    pub fn new(d: &Mat3) -> Result<Self> {
        if !d.iter().all(|x| x.is_finite()) {
            return Err(Error::InvalidDiffusion("non-finite entries".into()));
        }
        let scale = d.amax().max(1.0);
        let asym = (d - d.transpose()).amax();
        if asym > 1e-10 * scale {
            return Err(Error::InvalidDiffusion(format!("not symmetric (|D − Dᵀ| = {asym:e})")));
        }
        let sym = (d + d.transpose()) * 0.5;
        let eig = SymmetricEigen::new(sym);
        let lmin = eig.eigenvalues.min();
        if lmin < -1e-12 * scale {
            return Err(Error::InvalidDiffusion(format!("negative eigenvalue {lmin:e}")));
        }
        let s = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
        let q = eig.eigenvectors;
        let root = q * Mat3::from_diagonal(&s) * q.transpose();
        Ok(Self {
            root,
            eigenvectors: q,
            sqrt_eigenvalues: s,
        })
    }

    /// Directional derivative of the root: solves `S X + X S = dD`.
    pub fn derivative(&self, d_dot: &Mat3) -> Mat3 {
        let q = &self.eigenvectors;
        let s = &self.sqrt_eigenvalues;
        let tol = 1e-300f64.max(1e-14 * s.max());
        let mut x = q.transpose() * d_dot * q;
        for i in 0..3 {
            for j in 0..3 {
                let denom = s[i] + s[j];
                x[(i, j)] = if denom > tol { x[(i, j)] / denom } else { 0.0 };
            }
        }
        q * x * q.transpose()
    }
}

/// `½ Σ_ν Σ_j (∂g_ν^i/∂v^j) g_ν^j` for `g_ν^i = S_{νi}` with `S` symmetric,
/// given `∂S/∂v^j` for each `j`.
fn symmetric_root_correction(root: &Mat3, root_grad: &[Mat3; 3]) -> Vec3 {
    let mut c = Vec3::zeros();
    for (j, dj) in root_grad.iter().enumerate() {
        // Σ_ν (∂_j S)_{iν} S_{νj}
        c += dj * root.column(j);
    }
    c * 0.5
}

/// Forcing terms `(G, g)` from `(D, K)`, with `g` the symmetric square root of `D`.
pub fn decompose_dk(d: &Mat3, k: &Vec3, gradient: DiffusionGradient<'_>) -> Result<ForcingEval> {
    let sqrt = PsdSqrt::new(d)?;
    let root = sqrt.root;
    let correction = match gradient {
        DiffusionGradient::Constant => Vec3::zeros(),
        DiffusionGradient::Analytic(grad) => {
            let root_grad = grad.map(|g| sqrt.derivative(&g));
            symmetric_root_correction(&root, &root_grad)
        }
        DiffusionGradient::FiniteDifference { d_at, v, h } => {
            let mut root_grad = [Mat3::zeros(); 3];
            for (j, slot) in root_grad.iter_mut().enumerate() {
                let mut dv = Vec3::zeros();
                dv[j] = h;
                let plus = PsdSqrt::new(&d_at(&(v + dv)))?.root;
                let minus = PsdSqrt::new(&d_at(&(v - dv)))?.root;
                *slot = (plus - minus) / (2.0 * h);
            }
            symmetric_root_correction(&root, &root_grad)
        }
    };
    Ok(ForcingEval {
        drift_g: k - correction,
        diffusion_g: [
            root.row(0).transpose(),
            root.row(1).transpose(),
            root.row(2).transpose(),
        ],
        ito_drift_k: *k,
    })
}

type DiffusionFn = dyn Fn(&Vec3, &Vec3) -> Mat3 + Send + Sync;
type DriftFn = dyn Fn(&Vec3, &Vec3) -> Vec3 + Send + Sync;
type DiffusionGradFn = dyn Fn(&Vec3, &Vec3) -> [Mat3; 3] + Send + Sync;

/// A user-supplied `(D(x,v), K(x,v))` pair.
#[derive(Clone)]
pub struct CustomDk {
    diffusion: Arc<DiffusionFn>,
    drift: Arc<DriftFn>,
    diffusion_grad: Option<Arc<DiffusionGradFn>>,
    description: String,
}

impl fmt::Debug for CustomDk {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CustomDk")
            .field("description", &self.description)
            .field("analytic_gradient", &self.diffusion_grad.is_some())
            .finish()
    }
}

impl CustomDk {
    /// Without an analytic `∂D/∂v` the correction is taken by central differences.
    pub fn new(
        diffusion: impl Fn(&Vec3, &Vec3) -> Mat3 + Send + Sync + 'static,
        drift: impl Fn(&Vec3, &Vec3) -> Vec3 + Send + Sync + 'static,
    ) -> Self {
        Self {
            diffusion: Arc::new(diffusion),
            drift: Arc::new(drift),
            diffusion_grad: None,
            description: "closure".into(),
        }
    }

    pub fn with_gradient(mut self, grad: impl Fn(&Vec3, &Vec3) -> [Mat3; 3] + Send + Sync + 'static) -> Self {
        self.diffusion_grad = Some(Arc::new(grad));
        self
    }

    /// Constant `D` and affine drift `K = k0 + A v`.
    pub fn affine(d: Mat3, k0: Vec3, a: Mat3) -> Self {
        let mut c = Self::new(move |_, _| d, move |_, v| k0 + a * v).with_gradient(|_, _| [Mat3::zeros(); 3]);
        c.description = format!("affine D={d:?} k0={k0:?} A={a:?}");
        c
    }

    pub fn diffusion(&self, x: &Vec3, v: &Vec3) -> Mat3 {
        (self.diffusion)(x, v)
    }

    pub fn drift(&self, x: &Vec3, v: &Vec3) -> Vec3 {
        (self.drift)(x, v)
    }

    pub fn eval(&self, x: &Vec3, v: &Vec3) -> Result<ForcingEval> {
        let d = self.diffusion(x, v);
        let k = self.drift(x, v);
        match &self.diffusion_grad {
            Some(grad) => {
                let g = grad(x, v);
                decompose_dk(&d, &k, DiffusionGradient::Analytic(&g))
            }
            None => {
                let x = *x;
                let d_at = move |w: &Vec3| (self.diffusion)(&x, w);
                decompose_dk(
                    &d,
                    &k,
                    DiffusionGradient::FiniteDifference {
                        d_at: &d_at,
                        v: *v,
                        h: fd_step(v),
                    },
                )
            }
        }
    }
}

#[derive(Debug, Clone)]
pub enum CollisionModel {
    None,
    LenardBernstein(LenardBernstein),
    Lorentz(LorentzFrequency),
    Coulomb(CoulombParams),
    Custom(CustomDk),
}

impl CollisionModel {
    pub const NAMES: [&'static str; 5] = ["none", "lenard_bernstein", "lorentz", "coulomb", "custom"];

    pub fn name(&self) -> &'static str {
        match self {
            CollisionModel::None => "none",
            CollisionModel::LenardBernstein(_) => "lenard_bernstein",
            CollisionModel::Lorentz(_) => "lorentz",
            CollisionModel::Coulomb(_) => "coulomb",
            CollisionModel::Custom(_) => "custom",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            CollisionModel::None | CollisionModel::Custom(_) => Ok(()),
            CollisionModel::LenardBernstein(p) => p.validate(),
            CollisionModel::Lorentz(f) => f.validate(),
            CollisionModel::Coulomb(p) => p.validate(),
        }
    }

    /// True when `g_ν` never depends on the state (Itô and Stratonovich coincide).
    pub fn has_additive_noise(&self) -> bool {
        matches!(self, CollisionModel::None | CollisionModel::LenardBernstein(_))
    }

    /// Forcing for operators that depend only on the particle's own state.
    #[inline(always)]
    pub fn eval_local(&self, x: &Vec3, v: &Vec3) -> Result<ForcingEval> {
        match self {
            CollisionModel::None => Ok(ForcingEval::zero()),
            CollisionModel::LenardBernstein(p) => Ok(eval_lenard_bernstein(p, x, v)),
            CollisionModel::Lorentz(f) => Ok(eval_lorentz(f, x, v)),
            CollisionModel::Custom(c) => c.eval(x, v),
            CollisionModel::Coulomb(_) => Err(Error::param("the coulomb operator depends on the whole ensemble")),
        }
    }

    /// Freezes whatever ensemble data the operator needs for one step.
    pub fn prepare<'a>(&'a self, ens: &ParticleEnsemble, species: &SpeciesParams) -> PreparedCollision<'a> {
        let coulomb = match self {
            CollisionModel::Coulomb(p) => Some(CoulombSnapshot::new(p, ens, species)),
            _ => None,
        };
        PreparedCollision { model: self, coulomb }
    }
}

/// A collision model ready to be evaluated per particle within one step.
#[derive(Debug, Clone)]
pub struct PreparedCollision<'a> {
    model: &'a CollisionModel,
    coulomb: Option<CoulombSnapshot>,
}

impl PreparedCollision<'_> {
    pub fn model(&self) -> &CollisionModel {
        self.model
    }

    /// Forcing for particle `a` at state `(x, v)`.
    #[inline(always)]
    pub fn eval(&self, a: usize, x: &Vec3, v: &Vec3) -> Result<ForcingEval> {
        match &self.coulomb {
            Some(snapshot) => snapshot.eval(x, v, Some(a)),
            None => self.model.eval_local(x, v),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn lenard_bernstein_forcing() {
        let p = LenardBernstein {
            nu: 1.0,
            mu: 1.0,
            gamma: 1.0,
        };
        let f = eval_lenard_bernstein(&p, &Vec3::zeros(), &Vec3::new(1.0, 2.0, 3.0));
        assert_eq!(f.drift_g, Vec3::new(-1.0, -2.0, -3.0));
        assert_eq!(f.diffusion_g, [Vec3::x(), Vec3::y(), Vec3::z()]);
        assert_eq!(f.ito_drift_k, f.drift_g);

        let f0 = eval_lenard_bernstein(&p, &Vec3::zeros(), &Vec3::zeros());
        assert_eq!(f0.drift_g, Vec3::zeros());
        assert_eq!(f0.diffusion_g, f.diffusion_g);

        let q = LenardBernstein {
            nu: 2.0,
            mu: 0.5,
            gamma: 3.0,
        };
        let d = eval_lenard_bernstein(&q, &Vec3::zeros(), &Vec3::zeros()).diffusion_matrix();
        assert_relative_eq!(d, Mat3::identity() * 18.0, epsilon = 1e-12);
    }

    #[test]
    fn lorentz_generators() {
        let v = Vec3::new(1.0, 2.0, 3.0);
        let f = eval_lorentz(&LorentzFrequency::Constant { nu: 1.0 }, &Vec3::zeros(), &v);
        assert_eq!(f.diffusion_g[0], Vec3::new(0.0, -3.0, 2.0));
        assert_eq!(f.diffusion_g[1], Vec3::new(3.0, 0.0, -1.0));
        assert_eq!(f.diffusion_g[2], Vec3::new(-2.0, 1.0, 0.0));
        for g in &f.diffusion_g {
            assert_eq!(g.dot(&v), 0.0);
        }
        let expect = Mat3::identity() * v.norm_squared() - v * v.transpose();
        assert_relative_eq!(f.diffusion_matrix(), expect, epsilon = 1e-12);

        let f1 = eval_lorentz(&LorentzFrequency::Constant { nu: 1.0 }, &Vec3::zeros(), &Vec3::x());
        assert_eq!(f1.ito_drift_k, Vec3::new(-1.0, 0.0, 0.0));
    }

    #[test]
    fn power_law_frequency_has_cutoff() {
        let f = LorentzFrequency::PowerLaw { nu0: 2.0, v_min: 0.1 };
        assert_eq!(f.at(2.0), 0.25);
        assert_eq!(f.at(0.0), f.at(0.1));
        assert!(LorentzFrequency::PowerLaw { nu0: 1.0, v_min: 0.0 }.validate().is_err());
    }

    #[test]
    fn coulomb_single_field_particle() {
        let sp = SpeciesParams::new(1.0, 1.0, 3.0).unwrap();
        let ens = ParticleEnsemble::new(
            vec![Vec3::zeros(), Vec3::zeros()],
            vec![Vec3::zeros(), Vec3::new(1.0, 0.0, 0.0)],
            &sp,
        )
        .unwrap();
        let params = CoulombParams {
            gamma: 1.0,
            softening: 0.0,
            locality: Locality::Homogeneous,
        };
        let snap = CoulombSnapshot::new(&params, &ens, &sp);
        let t = snap.tensors(&Vec3::zeros(), &Vec3::zeros(), Some(0)).unwrap();
        assert_relative_eq!(
            t.d,
            Mat3::from_diagonal(&Vec3::new(0.0, 1.0, 1.0)) * 3.0,
            epsilon = 1e-15
        );
        assert_relative_eq!(t.k, Vec3::new(2.0, 0.0, 0.0) * 3.0, epsilon = 1e-15);
        let f = eval_coulomb(&params, &Vec3::zeros(), &Vec3::zeros(), &ens, &sp, Some(0)).unwrap();
        assert_relative_eq!(f.diffusion_matrix(), t.d, epsilon = 1e-12);
    }

    #[test]
    fn coulomb_coincident_velocities_are_singular() {
        let field = [Vec3::x(), Vec3::x()];
        assert!(matches!(
            coulomb_tensors(0.0, 1.0, &Vec3::x(), field.iter()),
            Err(Error::Singular(_))
        ));
        assert!(coulomb_tensors(1e-3, 1.0, &Vec3::x(), field.iter()).is_ok());
        // One coincident particle among others is skipped rather than fatal.
        let mixed = [Vec3::x(), Vec3::y()];
        assert_eq!(coulomb_tensors(0.0, 1.0, &Vec3::x(), mixed.iter()).unwrap().used, 1);
    }

    #[test]
    fn cell_locality_restricts_field_particles() {
        let sp = SpeciesParams::default();
        let ens = ParticleEnsemble::new(
            vec![Vec3::repeat(0.25), Vec3::repeat(0.3), Vec3::repeat(0.75)],
            vec![Vec3::zeros(), Vec3::x(), Vec3::y() * 5.0],
            &sp,
        )
        .unwrap();
        let params = CoulombParams {
            gamma: 1.0,
            softening: 0.0,
            locality: Locality::CellLocal {
                lo: Vec3::zeros(),
                hi: Vec3::repeat(1.0),
                cells: [2, 2, 2],
            },
        };
        let snap = CoulombSnapshot::new(&params, &ens, &sp);
        let t = snap.tensors(&ens.positions[0], &ens.velocities[0], Some(0)).unwrap();
        assert_eq!(t.used, 1);
        // N_tot · (1/N_field) · kernel of the single same-cell neighbour.
        assert_relative_eq!(t.d, Mat3::from_diagonal(&Vec3::new(0.0, 0.5, 0.5)), epsilon = 1e-15);
    }

    #[test]
    fn decompose_identity() {
        let f = decompose_dk(&Mat3::identity(), &Vec3::zeros(), DiffusionGradient::Constant).unwrap();
        assert_relative_eq!(f.diffusion_g[0], Vec3::x(), epsilon = 1e-15);
        assert_relative_eq!(f.diffusion_g[1], Vec3::y(), epsilon = 1e-15);
        assert_relative_eq!(f.diffusion_g[2], Vec3::z(), epsilon = 1e-15);
        assert_eq!(f.drift_g, Vec3::zeros());
    }

    #[test]
    fn decompose_recovers_lenard_bernstein() {
        let p = LenardBernstein {
            nu: 2.0,
            mu: 0.7,
            gamma: 1.3,
        };
        let v = Vec3::new(0.3, -1.0, 2.0);
        let d = Mat3::identity() * (p.nu * p.gamma * p.gamma);
        let k = -v * (p.nu * p.mu);
        let f = decompose_dk(&d, &k, DiffusionGradient::Constant).unwrap();
        let lb = eval_lenard_bernstein(&p, &Vec3::zeros(), &v);
        for (a, b) in f.diffusion_g.iter().zip(&lb.diffusion_g) {
            assert_relative_eq!(a, b, epsilon = 1e-14);
        }
        assert_eq!(f.drift_g, lb.drift_g);
    }

    #[test]
    fn decompose_rejects_invalid_matrices() {
        let mut asym = Mat3::identity();
        asym[(0, 1)] = 0.5;
        assert!(matches!(
            decompose_dk(&asym, &Vec3::zeros(), DiffusionGradient::Constant),
            Err(Error::InvalidDiffusion(_))
        ));
        let neg = Mat3::from_diagonal(&Vec3::new(1.0, -1e-3, 1.0));
        assert!(matches!(
            decompose_dk(&neg, &Vec3::zeros(), DiffusionGradient::Constant),
            Err(Error::InvalidDiffusion(_))
        ));
        // Tiny negative eigenvalues from round-off are clipped.
        let nearly = Mat3::from_diagonal(&Vec3::new(1.0, -1e-14, 1.0));
        let f = decompose_dk(&nearly, &Vec3::zeros(), DiffusionGradient::Constant).unwrap();
        assert_eq!(f.diffusion_g[1][1], 0.0);
    }

    #[test]
    fn analytic_and_fd_root_derivatives_agree() {
        // D(v) = B(v) B(v)ᵀ + I with B linear in v.
        let b0 = Mat3::new(1.0, 0.2, 0.0, -0.3, 0.8, 0.1, 0.5, 0.0, 1.1);
        let b1 = [
            Mat3::new(0.1, 0.0, 0.3, 0.0, -0.2, 0.0, 0.4, 0.1, 0.0),
            Mat3::new(0.0, 0.5, 0.0, 0.2, 0.0, -0.1, 0.0, 0.0, 0.3),
            Mat3::new(-0.2, 0.0, 0.1, 0.0, 0.3, 0.0, 0.1, -0.4, 0.0),
        ];
        let bmat = |v: &Vec3| b0 + b1[0] * v[0] + b1[1] * v[1] + b1[2] * v[2];
        let d_at = |v: &Vec3| {
            let b = bmat(v);
            b * b.transpose() + Mat3::identity()
        };
        let v = Vec3::new(0.4, -0.7, 1.2);
        let b = bmat(&v);
        let grad: [Mat3; 3] = std::array::from_fn(|j| b1[j] * b.transpose() + b * b1[j].transpose());
        let k = Vec3::new(0.1, 0.2, 0.3);
        let fa = decompose_dk(&d_at(&v), &k, DiffusionGradient::Analytic(&grad)).unwrap();
        let ff = decompose_dk(
            &d_at(&v),
            &k,
            DiffusionGradient::FiniteDifference {
                d_at: &d_at,
                v,
                h: fd_step(&v),
            },
        )
        .unwrap();
        assert_relative_eq!(fa.drift_g, ff.drift_g, epsilon = 1e-8);
        assert!(fa.stratonovich_correction().norm() > 1e-2);
    }

    #[test]
    fn custom_affine_model() {
        let d = Mat3::new(2.0, 0.5, 0.0, 0.5, 1.0, 0.0, 0.0, 0.0, 3.0);
        let a = -Mat3::identity();
        let c = CustomDk::affine(d, Vec3::x(), a);
        let v = Vec3::new(1.0, 2.0, 3.0);
        let f = c.eval(&Vec3::zeros(), &v).unwrap();
        assert_relative_eq!(f.diffusion_matrix(), d, epsilon = 1e-12);
        assert_eq!(f.drift_g, Vec3::new(0.0, -2.0, -3.0));
        assert!(format!("{c:?}").contains("affine"));
    }

    #[test]
    fn prepared_models_dispatch() {
        let sp = SpeciesParams::default();
        let ens = ParticleEnsemble::new(vec![Vec3::zeros()], vec![Vec3::x()], &sp).unwrap();
        let none = CollisionModel::None;
        assert_eq!(
            none.prepare(&ens, &sp).eval(0, &Vec3::zeros(), &Vec3::x()).unwrap(),
            ForcingEval::zero()
        );
        let coul = CollisionModel::Coulomb(CoulombParams {
            gamma: 1.0,
            softening: 1e-3,
            locality: Locality::Homogeneous,
        });
        // A lone particle has no collision partners.
        assert_eq!(
            coul.prepare(&ens, &sp).eval(0, &Vec3::zeros(), &Vec3::x()).unwrap(),
            ForcingEval::zero()
        );
        assert_eq!(coul.name(), "coulomb");
    }
}
