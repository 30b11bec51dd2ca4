//! Weak-order measurement on Brownian-bridge coupled runs.
//!
//! Level `k` integrates the same configuration with `dt / 2^k` on increments
//! refined from the level-0 path, so the statistical error is largely shared
//! between levels and cancels in their differences.

use serde::Serialize;

use crate::collision::CollisionModel;
use crate::config::{CollisionSpec, FieldKind, SimConfig};
use crate::ensemble::{InitialDistribution, ParticleEnsemble};
use crate::error::{Error, Result};
use crate::oracle::ou_moments;
use crate::rng::NoiseSource;
use crate::sde::{IntegratorSpec, Simulation};
use crate::summation;
use crate::Vec3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Observable {
    /// `E|V(T)|²`.
    MeanSquareSpeed,
    /// `E|V(T)|`.
    MeanSpeed,
}

impl Observable {
    pub const NAMES: [&'static str; 2] = ["mean_square_speed", "mean_speed"];

    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "mean_square_speed" => Some(Observable::MeanSquareSpeed),
            "mean_speed" => Some(Observable::MeanSpeed),
            _ => None,
        }
    }

    pub fn evaluate(&self, ens: &ParticleEnsemble) -> f64 {
        let n = ens.len() as f64;
        match self {
            Observable::MeanSquareSpeed => summation::sum(ens.velocities.iter().map(|v| v.norm_squared())) / n,
            Observable::MeanSpeed => summation::sum(ens.velocities.iter().map(|v| v.norm())) / n,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LevelResult {
    pub dt: f64,
    pub n_steps: u64,
    pub value: f64,
    /// `value − reference` when a closed form is known.
    pub error: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConvergenceReport {
    pub observable: Observable,
    pub scheme: &'static str,
    pub levels: Vec<LevelResult>,
    pub reference: Option<f64>,
    /// `"successive_differences"` or `"reference_error"`.
    pub fit_basis: &'static str,
    pub fitted_order: f64,
}

/// Least-squares slope of `ln |err|` against `ln h`.
pub fn fit_order(h: &[f64], err: &[f64]) -> Result<f64> {
    if h.len() != err.len() || h.len() < 2 {
        return Err(Error::param("an order fit needs at least two points"));
    }
    if err.iter().any(|e| !(e.abs() > 0.0) || !e.is_finite()) {
        return Err(Error::param(format!("cannot fit an order to errors {err:?}")));
    }
    let xs: Vec<f64> = h.iter().map(|x| x.ln()).collect();
    let ys: Vec<f64> = err.iter().map(|e| e.abs().ln()).collect();
    let n = xs.len() as f64;
    let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    Ok(sxy / sxx)
}

/// Closed-form `E|V(T)|²` for Lenard-Bernstein relaxation without fields.
pub fn analytic_reference(config: &SimConfig, observable: Observable) -> Option<f64> {
    let CollisionSpec::LenardBernstein(p) = config.collision else {
        return None;
    };
    if observable != Observable::MeanSquareSpeed || config.fields.kind != FieldKind::Vacuum {
        return None;
    }
    let (mean, var0) = match &config.initial {
        InitialDistribution::Maxwellian {
            thermal_speed, drift, ..
        }
        | InitialDistribution::UniformBoxMaxwellian {
            thermal_speed, drift, ..
        } => (*drift, thermal_speed.powi(2)),
        InitialDistribution::TwoStream {
            thermal_speed, beam, ..
        } => (*beam, thermal_speed.powi(2)),
        InitialDistribution::ColdBeam { velocity, .. } => (*velocity, 0.0),
    };
    let t = config.integrator.horizon();
    let ou = ou_moments(p.nu, p.mu, p.gamma, &Vec3::zeros(), t);
    let decay = (-2.0 * p.nu * p.mu * t).exp();
    Some((mean.norm_squared() + 3.0 * var0) * decay + 3.0 * ou.variance)
}

/// Runs `config` at `levels` step sizes `dt, dt/2, …` on coupled paths.
///
/// With three or more levels the order comes from successive differences;
/// with two it needs a closed-form reference.
pub fn run_convergence(config: &SimConfig, levels: usize, observable: Observable) -> Result<ConvergenceReport> {
    config.validate()?;
    let reference = analytic_reference(config, observable);
    if levels < 2 || (levels == 2 && reference.is_none()) {
        return Err(Error::param(format!(
            "insufficient levels ({levels}): need at least 3, or 2 with a closed-form reference"
        )));
    }
    if levels > 20 {
        return Err(Error::param("at most 20 refinement levels"));
    }
    let seed = config.resolved_seed();
    let initial = ParticleEnsemble::sample(config.n_particles, &config.initial, &config.species, seed)?;
    let fields = config.fields.build(&initial)?;
    let collision: CollisionModel = config.collision_model();
    let base = config.integrator;
    let mut results = Vec::with_capacity(levels);
    for k in 0..levels {
        let factor = 1u64 << k;
        let spec = IntegratorSpec {
            scheme: base.scheme,
            dt: base.dt / factor as f64,
            n_steps: base.n_steps * factor,
        };
        let mut sim = Simulation::new(
            config.species,
            collision.clone(),
            fields.clone(),
            spec,
            NoiseSource::Bridged { seed, depth: k as u32 },
            initial.clone(),
        )?;
        sim.advance(spec.n_steps)?;
        let value = observable.evaluate(&sim.ensemble);
        results.push(LevelResult {
            dt: spec.dt,
            n_steps: spec.n_steps,
            value,
            error: reference.map(|r| value - r),
        });
    }
    let (fit_basis, fitted_order) = if levels >= 3 {
        let h: Vec<f64> = results[..levels - 1].iter().map(|l| l.dt).collect();
        let d: Vec<f64> = results.windows(2).map(|w| w[0].value - w[1].value).collect();
        ("successive_differences", fit_order(&h, &d)?)
    } else {
        let h: Vec<f64> = results.iter().map(|l| l.dt).collect();
        let e: Vec<f64> = results.iter().map(|l| l.error.expect("reference present")).collect();
        ("reference_error", fit_order(&h, &e)?)
    };
    Ok(ConvergenceReport {
        observable,
        scheme: base.scheme.name(),
        levels: results,
        reference,
        fit_basis,
        fitted_order,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::collision::LenardBernstein;
    use crate::config::{ExternalSpec, FieldSpec};
    use crate::fields::AnalyticField;
    use crate::sde::Scheme;

    fn lb_config(scheme: Scheme) -> SimConfig {
        let mut c = SimConfig::new(4000, 0.1, 10);
        c.seed = Some(21);
        c.collision = CollisionSpec::LenardBernstein(LenardBernstein {
            nu: 1.0,
            mu: 1.0,
            gamma: 1.0,
        });
        c.initial = InitialDistribution::Maxwellian {
            thermal_speed: 1.0,
            drift: Vec3::new(1.0, 0.0, 0.0),
            position_spread: 0.0,
        };
        c.integrator.scheme = scheme;
        c
    }

    #[test]
    fn fit_recovers_known_slopes() {
        let h = [0.1, 0.05, 0.025];
        let e: Vec<f64> = h.iter().map(|x| 3.0 * x * x).collect();
        assert!((fit_order(&h, &e).unwrap() - 2.0).abs() < 1e-12);
        assert!(fit_order(&h, &[1.0, 0.0, 1.0]).is_err());
    }

    #[test]
    fn one_level_is_rejected() {
        let c = lb_config(Scheme::ItoEuler);
        assert!(run_convergence(&c, 1, Observable::MeanSquareSpeed).is_err());
        let mut no_ref = c.clone();
        no_ref.collision = CollisionSpec::None;
        assert!(run_convergence(&no_ref, 2, Observable::MeanSquareSpeed).is_err());
    }

    #[test]
    fn reference_matches_the_ou_law() {
        let c = lb_config(Scheme::ItoEuler);
        // T = 1: (1 + 3) e^{-2} + 3 (1 − e^{-2}) / 2.
        let expect = 4.0 * (-2.0f64).exp() + 1.5 * (1.0 - (-2.0f64).exp());
        assert!((analytic_reference(&c, Observable::MeanSquareSpeed).unwrap() - expect).abs() < 1e-14);
    }

    #[test]
    fn euler_is_first_order_on_lenard_bernstein() {
        let r = run_convergence(&lb_config(Scheme::ItoEuler), 4, Observable::MeanSquareSpeed).unwrap();
        assert!((r.fitted_order - 1.0).abs() < 0.3, "{r:?}");
    }

    #[test]
    fn deterministic_trap_shows_the_scheme_order() {
        let mut c = SimConfig::new(64, 0.02, 50);
        c.seed = Some(2);
        c.initial = InitialDistribution::Maxwellian {
            thermal_speed: 1.0,
            drift: Vec3::zeros(),
            position_spread: 1.0,
        };
        c.fields = FieldSpec {
            kind: FieldKind::External,
            external: Some(ExternalSpec {
                name: "harmonic_trap".into(),
                params: AnalyticField::harmonic_trap(1.0),
            }),
            ..FieldSpec::default()
        };
        let euler = run_convergence(&c, 4, Observable::MeanSquareSpeed).unwrap();
        assert!((euler.fitted_order - 1.0).abs() < 0.2, "{euler:?}");
        c.integrator.scheme = Scheme::StratonovichHeun;
        let heun = run_convergence(&c, 4, Observable::MeanSquareSpeed).unwrap();
        assert!((heun.fitted_order - 2.0).abs() < 0.3, "{heun:?}");
    }
}
