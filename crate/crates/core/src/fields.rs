//! Electric and magnetic field sources.
//!
//! The self-consistent field is the Green's-function solution of Poisson's
//! equation evaluated on the empirical measure, with Plummer softening:
//!
//! ```text
//! φ(x) = q N_tot/(4π N) Σ_a (|x − X_a|² + ε²)^{-1/2}
//! E(x) = q N_tot/(4π N) Σ_a (x − X_a) (|x − X_a|² + ε²)^{-3/2}
//! ```

use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ensemble::{ParticleEnsemble, SpeciesParams};
use crate::error::{Error, Result};
use crate::summation::{NeumaierSum, NeumaierSum3};
use crate::{Mat3, Vec3};

/// Scalar and vector potentials with `E = −∇φ − ∂A/∂t` and `B = ∇×A`.
pub trait Potentials: Send + Sync {
    fn phi(&self, x: &Vec3, t: f64) -> f64;
    fn grad_phi(&self, x: &Vec3, t: f64) -> Vec3;
    fn a(&self, x: &Vec3, t: f64) -> Vec3;
    fn da_dt(&self, x: &Vec3, t: f64) -> Vec3;
    /// `(i, j)` entry is `∂A^i/∂x^j`.
    fn grad_a(&self, x: &Vec3, t: f64) -> Mat3;
}

/// A prescribed `(E, B)` field.
pub trait ExternalField: Send + Sync + fmt::Debug {
    fn e_at(&self, x: &Vec3, t: f64) -> Vec3;
    fn b_at(&self, x: &Vec3, t: f64) -> Vec3;
    fn potentials(&self) -> Option<&dyn Potentials> {
        None
    }
}

/// The closed-form family
///
/// ```text
/// φ = −e0·x + ½ k |x|²,   A = ½ b0 × x + t a_rate,
/// E = e0 − k x − a_rate,  B = b0.
/// ```
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct AnalyticField {
    pub e0: Vec3,
    pub b0: Vec3,
    pub trap_k: f64,
    pub a_rate: Vec3,
}

impl AnalyticField {
    pub const NAMES: [&'static str; 4] = ["uniform_e", "uniform_b", "harmonic_trap", "affine"];

    pub fn uniform_e(e: Vec3) -> Self {
        Self {
            e0: e,
            ..Self::default()
        }
    }

    pub fn uniform_b(b: Vec3) -> Self {
        Self {
            b0: b,
            ..Self::default()
        }
    }

    pub fn harmonic_trap(k: f64) -> Self {
        Self {
            trap_k: k,
            ..Self::default()
        }
    }

    /// Builds a named field, keeping only the parameters that name uses.
    pub fn named(name: &str, params: &AnalyticField) -> Result<Self> {
        match name {
            "uniform_e" => Ok(Self::uniform_e(params.e0)),
            "uniform_b" => Ok(Self::uniform_b(params.b0)),
            "harmonic_trap" => Ok(Self::harmonic_trap(params.trap_k)),
            "affine" => Ok(*params),
            other => Err(Error::param(format!(
                "unknown external field `{other}` (expected one of {})",
                Self::NAMES.join(", ")
            ))),
        }
    }
}

impl ExternalField for AnalyticField {
    fn e_at(&self, x: &Vec3, _t: f64) -> Vec3 {
        self.e0 - x * self.trap_k - self.a_rate
    }

    fn b_at(&self, _x: &Vec3, _t: f64) -> Vec3 {
        self.b0
    }

    fn potentials(&self) -> Option<&dyn Potentials> {
        Some(self)
    }
}

impl Potentials for AnalyticField {
    fn phi(&self, x: &Vec3, _t: f64) -> f64 {
        -self.e0.dot(x) + 0.5 * self.trap_k * x.norm_squared()
    }

    fn grad_phi(&self, x: &Vec3, _t: f64) -> Vec3 {
        -self.e0 + x * self.trap_k
    }

    fn a(&self, x: &Vec3, t: f64) -> Vec3 {
        0.5 * self.b0.cross(x) + self.a_rate * t
    }

    fn da_dt(&self, _x: &Vec3, _t: f64) -> Vec3 {
        self.a_rate
    }

    fn grad_a(&self, _x: &Vec3, _t: f64) -> Mat3 {
        // ½ b0 × x is linear in x with matrix ½[b0]×.
        self.b0.cross_matrix() * 0.5
    }
}

/// Residuals of `E + ∇φ + ∂A/∂t = 0` and `B − ∇×A = 0`, by central differences.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ConsistencyReport {
    pub max_e_residual: f64,
    pub max_b_residual: f64,
}

pub fn check_consistency(field: &dyn ExternalField, points: &[Vec3], t: f64, h: f64) -> Result<ConsistencyReport> {
    let pot = field
        .potentials()
        .ok_or_else(|| Error::param("field has no potentials to check"))?;
    let mut report = ConsistencyReport {
        max_e_residual: 0.0,
        max_b_residual: 0.0,
    };
    for x in points {
        let mut grad_phi = Vec3::zeros();
        let mut jac = Mat3::zeros();
        for j in 0..3 {
            let mut dx = Vec3::zeros();
            dx[j] = h;
            grad_phi[j] = (pot.phi(&(x + dx), t) - pot.phi(&(x - dx), t)) / (2.0 * h);
            let col = (pot.a(&(x + dx), t) - pot.a(&(x - dx), t)) / (2.0 * h);
            jac.set_column(j, &col);
        }
        let da_dt = (pot.a(x, t + h) - pot.a(x, t - h)) / (2.0 * h);
        let curl = Vec3::new(
            jac[(2, 1)] - jac[(1, 2)],
            jac[(0, 2)] - jac[(2, 0)],
            jac[(1, 0)] - jac[(0, 1)],
        );
        let e_res = (field.e_at(x, t) + grad_phi + da_dt).norm();
        let b_res = (field.b_at(x, t) - curl).norm();
        report.max_e_residual = report.max_e_residual.max(e_res);
        report.max_b_residual = report.max_b_residual.max(b_res);
    }
    Ok(report)
}

fn prefactor(ens: &ParticleEnsemble, species: &SpeciesParams) -> f64 {
    species.charge * species.n_total / (4.0 * PI * ens.len() as f64)
}

fn coincident(x: &Vec3, a: usize) -> Error {
    Error::Singular(format!(
        "evaluation point {x:?} coincides with particle {a} and softening is zero"
    ))
}

/// Softened potential of the ensemble at `x`.
pub fn potential_at(x: &Vec3, ens: &ParticleEnsemble, species: &SpeciesParams, softening: f64) -> Result<f64> {
    let eps2 = softening * softening;
    let mut acc = NeumaierSum::new();
    for (a, xa) in ens.positions.iter().enumerate() {
        let r2 = (x - xa).norm_squared() + eps2;
        if r2 == 0.0 {
            return Err(coincident(x, a));
        }
        acc.add(r2.sqrt().recip());
    }
    Ok(prefactor(ens, species) * acc.value())
}

/// Softened electric field of the ensemble at `x`.
pub fn efield_at(x: &Vec3, ens: &ParticleEnsemble, species: &SpeciesParams, softening: f64) -> Result<Vec3> {
    field_sum(x, ens, softening * softening, None).map(|s| s * prefactor(ens, species))
}

fn field_sum(x: &Vec3, ens: &ParticleEnsemble, eps2: f64, skip: Option<usize>) -> Result<Vec3> {
    let mut acc = NeumaierSum3::new();
    for (b, xb) in ens.positions.iter().enumerate() {
        if Some(b) == skip {
            continue;
        }
        let w = x - xb;
        let r2 = w.norm_squared() + eps2;
        if r2 == 0.0 {
            return Err(coincident(x, b));
        }
        let inv_r = r2.sqrt().recip();
        acc.add(&(w * (inv_r * inv_r * inv_r)));
    }
    Ok(acc.value())
}

/// `E(X_a)` for every particle; `exclude_self` drops the `b = a` term.
pub fn self_field_batch(
    ens: &ParticleEnsemble,
    species: &SpeciesParams,
    softening: f64,
    exclude_self: bool,
) -> Result<Vec<Vec3>> {
    let pre = prefactor(ens, species);
    let eps2 = softening * softening;
    ens.positions
        .par_iter()
        .enumerate()
        .map(|(a, x)| field_sum(x, ens, eps2, exclude_self.then_some(a)).map(|s| s * pre))
        .collect()
}

/// `φ(X_a)` for every particle, with the same self-term convention.
pub fn self_potential_batch(
    ens: &ParticleEnsemble,
    species: &SpeciesParams,
    softening: f64,
    exclude_self: bool,
) -> Result<Vec<f64>> {
    let pre = prefactor(ens, species);
    let eps2 = softening * softening;
    ens.positions
        .par_iter()
        .enumerate()
        .map(|(a, x)| {
            let mut acc = NeumaierSum::new();
            for (b, xb) in ens.positions.iter().enumerate() {
                if exclude_self && a == b {
                    continue;
                }
                let r2 = (x - xb).norm_squared() + eps2;
                if r2 == 0.0 {
                    return Err(coincident(x, b));
                }
                acc.add(r2.sqrt().recip());
            }
            Ok(pre * acc.value())
        })
        .collect()
}

/// `(V / N)^{1/3}` with `V` the volume of the box whose per-axis widths are
/// `√12 σ_k` (exact for a uniformly filled box).
pub fn mean_interparticle_spacing(ens: &ParticleEnsemble) -> f64 {
    let n = ens.len() as f64;
    let mut mean = NeumaierSum3::new();
    for x in &ens.positions {
        mean.add(x);
    }
    let mean = mean.value() / n;
    let mut var = [NeumaierSum::new(); 3];
    for x in &ens.positions {
        for k in 0..3 {
            var[k].add((x[k] - mean[k]).powi(2));
        }
    }
    let volume: f64 = var.iter().map(|v| (12.0 * v.value() / n).sqrt()).product();
    (volume / n).cbrt()
}

/// Softening choice for the self-consistent field.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum Softening {
    Fixed(f64),
    /// `0.05 ×` the mean interparticle spacing of the initial ensemble.
    Auto,
}

impl Softening {
    pub const AUTO_FRACTION: f64 = 0.05;

    pub fn resolve(&self, ens: &ParticleEnsemble) -> Result<f64> {
        match *self {
            Softening::Fixed(eps) if eps >= 0.0 && eps.is_finite() => Ok(eps),
            Softening::Fixed(eps) => Err(Error::param(format!("softening must be non-negative, got {eps}"))),
            Softening::Auto => {
                let eps = Self::AUTO_FRACTION * mean_interparticle_spacing(ens);
                if eps > 0.0 && eps.is_finite() {
                    Ok(eps)
                } else {
                    Err(Error::param(
                        "cannot derive a softening length from a degenerate cloud; set fields.softening",
                    ))
                }
            }
        }
    }
}

#[derive(Debug, Clone, Default)]
pub enum FieldModel {
    #[default]
    Vacuum,
    External(Arc<dyn ExternalField>),
    /// Pairwise Coulomb field of the ensemble, optionally superposed on an external field.
    SelfConsistent {
        softening: f64,
        exclude_self: bool,
        external: Option<Arc<dyn ExternalField>>,
    },
}

impl FieldModel {
    pub fn name(&self) -> &'static str {
        match self {
            FieldModel::Vacuum => "vacuum",
            FieldModel::External(_) => "external",
            FieldModel::SelfConsistent { .. } => "self_consistent",
        }
    }

    pub fn external(&self) -> Option<&dyn ExternalField> {
        match self {
            FieldModel::Vacuum => None,
            FieldModel::External(f) => Some(f.as_ref()),
            FieldModel::SelfConsistent { external, .. } => external.as_deref(),
        }
    }

    pub fn potentials(&self) -> Option<&dyn Potentials> {
        self.external().and_then(|f| f.potentials())
    }

    pub fn is_vacuum(&self) -> bool {
        matches!(self, FieldModel::Vacuum)
    }

    /// Computes the self field at the current particle positions, if any.
    pub fn prepare(&self, ens: &ParticleEnsemble, species: &SpeciesParams) -> Result<PreparedFields<'_>> {
        let self_e = match self {
            FieldModel::SelfConsistent {
                softening,
                exclude_self,
                ..
            } => Some(self_field_batch(ens, species, *softening, *exclude_self)?),
            _ => None,
        };
        Ok(PreparedFields { model: self, self_e })
    }
}

/// External `(E, B)` at `(x, t)`; vacuum and the self field contribute nothing here.
pub fn external_field_at(model: &FieldModel, x: &Vec3, t: f64) -> (Vec3, Vec3) {
    match model.external() {
        Some(f) => (f.e_at(x, t), f.b_at(x, t)),
        None => (Vec3::zeros(), Vec3::zeros()),
    }
}

/// Fields for one step, with the self field frozen at the step's start.
#[derive(Debug, Clone)]
pub struct PreparedFields<'a> {
    model: &'a FieldModel,
    self_e: Option<Vec<Vec3>>,
}

impl PreparedFields<'_> {
    /// `(E, B)` seen by particle `a` at position `x` and time `t`.
    #[inline]
    pub fn at(&self, a: usize, x: &Vec3, t: f64) -> (Vec3, Vec3) {
        let (mut e, b) = external_field_at(self.model, x, t);
        if let Some(s) = &self.self_e {
            e += s[a];
        }
        (e, b)
    }

    pub fn self_field(&self) -> Option<&[Vec3]> {
        self.self_e.as_deref()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ensemble::InitialDistribution;
    use approx::assert_relative_eq;

    fn unit_charge_species() -> SpeciesParams {
        // q N_tot = 4π
        SpeciesParams::new(1.0, 1.0, 4.0 * PI).unwrap()
    }

    fn cloud(n: usize, seed: u64) -> (ParticleEnsemble, SpeciesParams) {
        let sp = SpeciesParams::new(1.0, 1.0, 1.0).unwrap();
        let dist = InitialDistribution::Maxwellian {
            thermal_speed: 1.0,
            drift: Vec3::zeros(),
            position_spread: 1.0,
        };
        (ParticleEnsemble::sample(n, &dist, &sp, seed).unwrap(), sp)
    }

    #[test]
    fn single_particle_coulomb_law() {
        let sp = unit_charge_species();
        let ens = ParticleEnsemble::new(vec![Vec3::zeros()], vec![Vec3::zeros()], &sp).unwrap();
        let x = Vec3::new(2.0, 0.0, 0.0);
        assert_eq!(potential_at(&x, &ens, &sp, 0.0).unwrap(), 0.5);
        assert_eq!(efield_at(&x, &ens, &sp, 0.0).unwrap(), Vec3::new(0.25, 0.0, 0.0));
        assert!(matches!(
            potential_at(&Vec3::zeros(), &ens, &sp, 0.0),
            Err(Error::Singular(_))
        ));
    }

    #[test]
    fn softened_self_term_is_finite() {
        let sp = unit_charge_species();
        let ens = ParticleEnsemble::new(
            vec![Vec3::zeros(), Vec3::new(1.0, 0.0, 0.0)],
            vec![Vec3::zeros(); 2],
            &sp,
        )
        .unwrap();
        let eps = 0.1;
        let phi = potential_at(&Vec3::zeros(), &ens, &sp, eps).unwrap();
        let expect = 0.5 * (1.0 / eps + 1.0 / (1.0f64 + eps * eps).sqrt());
        assert_relative_eq!(phi, expect, epsilon = 1e-14);
    }

    #[test]
    fn field_is_minus_gradient_of_potential() {
        let (ens, sp) = cloud(50, 3);
        let h = 1e-4;
        for k in 0..20 {
            let x = Vec3::new(0.3 * k as f64 - 2.0, 0.1 * k as f64, 1.5 - 0.2 * k as f64);
            let e = efield_at(&x, &ens, &sp, 0.05).unwrap();
            let fd = Vec3::from_fn(|j, _| {
                let mut dx = Vec3::zeros();
                dx[j] = h;
                -(potential_at(&(x + dx), &ens, &sp, 0.05).unwrap() - potential_at(&(x - dx), &ens, &sp, 0.05).unwrap())
                    / (2.0 * h)
            });
            assert!((e - fd).norm() <= 1e-6 * e.norm().max(1.0), "{e:?} vs {fd:?}");
        }
    }

    #[test]
    fn symmetric_pair_has_no_axial_field() {
        let sp = unit_charge_species();
        let ens = ParticleEnsemble::new(
            vec![Vec3::new(0.0, 1.0, 0.0), Vec3::new(0.0, -1.0, 0.0)],
            vec![Vec3::zeros(); 2],
            &sp,
        )
        .unwrap();
        let e = efield_at(&Vec3::new(0.7, 0.0, 0.0), &ens, &sp, 0.0).unwrap();
        assert_eq!(e[1], 0.0);
    }

    #[test]
    fn pair_forces_are_equal_and_opposite() {
        let sp = SpeciesParams::default();
        let ens = ParticleEnsemble::new(
            vec![Vec3::new(0.1, 0.2, 0.3), Vec3::new(-0.4, 0.5, 0.9)],
            vec![Vec3::zeros(); 2],
            &sp,
        )
        .unwrap();
        let e = self_field_batch(&ens, &sp, 0.0, true).unwrap();
        assert_eq!(e[0] + e[1], Vec3::zeros());
    }

    #[test]
    fn total_self_force_vanishes() {
        let (ens, sp) = cloud(300, 11);
        let e = self_field_batch(&ens, &sp, 0.01, true).unwrap();
        let total = crate::summation::sum3(e.iter());
        let largest = e.iter().map(|v| v.norm()).fold(0.0, f64::max);
        assert!(total.norm() <= 1e-12 * largest, "{total:?}");
    }

    #[test]
    fn lone_particle_feels_no_self_field() {
        let sp = SpeciesParams::default();
        let ens = ParticleEnsemble::new(vec![Vec3::x()], vec![Vec3::zeros()], &sp).unwrap();
        assert_eq!(self_field_batch(&ens, &sp, 0.0, true).unwrap(), vec![Vec3::zeros()]);
    }

    #[test]
    fn far_field_is_monopole() {
        let (ens, sp) = cloud(200, 5);
        let r = 50.0;
        let x = Vec3::new(r, 0.0, 0.0);
        let phi = potential_at(&x, &ens, &sp, 0.01).unwrap();
        let mono = sp.charge * sp.n_total / (4.0 * PI * r);
        assert!((phi - mono).abs() < 5.0 / (r * r), "{phi} vs {mono}");
    }

    #[test]
    fn uniform_b_vector_potential_has_right_curl() {
        let f = AnalyticField::uniform_b(Vec3::z());
        let pts = [Vec3::new(0.3, -1.0, 2.0), Vec3::new(5.0, 1.0, -1.0)];
        let r = check_consistency(&f, &pts, 0.0, 1e-4).unwrap();
        assert!(r.max_b_residual < 1e-9 && r.max_e_residual < 1e-9, "{r:?}");
    }

    #[test]
    fn affine_family_is_consistent() {
        let f = AnalyticField {
            e0: Vec3::new(0.5, -1.0, 0.2),
            b0: Vec3::new(0.1, 0.3, 1.0),
            trap_k: 0.7,
            a_rate: Vec3::new(0.0, 0.2, -0.1),
        };
        let pts = [Vec3::new(0.3, -1.0, 2.0), Vec3::new(-5.0, 1.0, -1.0)];
        let r = check_consistency(&f, &pts, 1.5, 1e-4).unwrap();
        assert!(r.max_b_residual < 1e-9 && r.max_e_residual < 1e-9, "{r:?}");
        let ga = f.grad_a(&Vec3::zeros(), 0.0);
        let x = Vec3::new(1.0, 2.0, 3.0);
        assert_relative_eq!(ga * x, f.a(&x, 0.0), epsilon = 1e-15);
    }

    #[test]
    fn builtin_fields() {
        let trap = AnalyticField::harmonic_trap(2.0);
        let x = Vec3::new(1.0, -1.0, 0.5);
        assert_eq!(trap.e_at(&x, 0.0), -x * 2.0);
        assert_eq!(
            external_field_at(&FieldModel::Vacuum, &x, 0.0),
            (Vec3::zeros(), Vec3::zeros())
        );
        assert!(AnalyticField::named("dipole", &AnalyticField::default()).is_err());
        let named = AnalyticField::named(
            "uniform_b",
            &AnalyticField {
                b0: Vec3::z(),
                e0: Vec3::x(),
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(named.e0, Vec3::zeros());
    }

    #[test]
    fn auto_softening_matches_box_density() {
        let sp = SpeciesParams::default();
        let dist = InitialDistribution::UniformBoxMaxwellian {
            lo: Vec3::zeros(),
            hi: Vec3::repeat(10.0),
            thermal_speed: 1.0,
            drift: Vec3::zeros(),
        };
        let ens = ParticleEnsemble::sample(8000, &dist, &sp, 1).unwrap();
        let spacing = mean_interparticle_spacing(&ens);
        assert!((spacing - 0.5).abs() < 0.01, "{spacing}");
        let cold = ParticleEnsemble::new(vec![Vec3::zeros(); 3], vec![Vec3::zeros(); 3], &sp).unwrap();
        assert!(Softening::Auto.resolve(&cold).is_err());
    }
}
