//! Acceptance criteria 1-10 at full size. Prints one PASS/FAIL line per
//! criterion and exits non-zero if any fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::Instant;

use svpic::collision::{CollisionModel, LenardBernstein};
use svpic::ensemble::{moments, InitialDistribution, MomentReport, ParticleEnsemble, SpeciesParams};
use svpic::fields::FieldModel;
use svpic::rng::NoiseSource;
use svpic::sde::{IntegratorSpec, Scheme, Simulation};
use svpic::verify::{self, CriterionResult, Suite, VerifyOptions};
use svpic::Vec3;

struct Outcome {
    pass: bool,
    detail: String,
}

fn describe(results: &[CriterionResult]) -> Outcome {
    let pass = results.iter().all(|c| c.pass);
    let detail = results
        .iter()
        .map(|c| {
            let bound = match (c.min, c.max) {
                (Some(lo), Some(hi)) => format!("in [{lo}, {hi}]"),
                (None, Some(hi)) if c.strict => format!("< {hi:e}"),
                (None, Some(hi)) => format!("<= {hi:e}"),
                (Some(lo), None) => format!(">= {lo:e}"),
                (None, None) => String::new(),
            };
            let mark = if c.pass { "" } else { " (failed)" };
            format!("{}={:.4e} {bound}{mark}", c.criterion, c.value)
        })
        .collect::<Vec<_>>()
        .join("; ");
    Outcome { pass, detail }
}

fn pairs(points: &[(f64, f64)]) -> String {
    let items: Vec<String> = points.iter().map(|(h, e)| format!("({h:.3e}, {e:.3e})")).collect();
    format!("[{}]", items.join(", "))
}

fn relative_gap(a: f64, b: f64) -> f64 {
    if a == b {
        0.0
    } else {
        (a - b).abs() / a.abs().max(b.abs())
    }
}

fn moments_gap(a: &MomentReport, b: &MomentReport) -> f64 {
    let mut gap = relative_gap(a.kinetic_energy, b.kinetic_energy);
    for k in 0..3 {
        gap = gap
            .max(relative_gap(a.mean_velocity[k], b.mean_velocity[k]))
            .max(relative_gap(a.velocity_variance[k], b.velocity_variance[k]))
            .max(relative_gap(a.total_momentum[k], b.total_momentum[k]));
    }
    gap
}

/// A short self-consistent LB run; exercises every parallel reduction.
fn threaded_moments(threads: usize) -> MomentReport {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
    pool.install(|| {
        let species = SpeciesParams::new(1.0, 1.0, 10.0).unwrap();
        let initial = InitialDistribution::Maxwellian {
            thermal_speed: 1.0,
            drift: Vec3::new(0.5, 0.0, 0.0),
            position_spread: 1.0,
        };
        let ens = ParticleEnsemble::sample(2000, &initial, &species, 11).unwrap();
        let fields = FieldModel::SelfConsistent {
            softening: 0.05,
            exclude_self: true,
            external: None,
        };
        let mut sim = Simulation::new(
            species,
            CollisionModel::LenardBernstein(LenardBernstein {
                nu: 1.0,
                mu: 1.0,
                gamma: 1.0,
            }),
            fields,
            IntegratorSpec {
                scheme: Scheme::StratonovichHeun,
                dt: 0.01,
                n_steps: 20,
            },
            NoiseSource::Direct { seed: 11 },
            ens,
        )
        .unwrap();
        sim.advance(20).unwrap();
        moments(&sim.ensemble, &sim.species)
    })
}

fn main() -> ExitCode {
    let opts = VerifyOptions::default();
    let relaxation = std::cell::RefCell::new(None);
    let mut failures = 0;

    type Check<'a> = Box<dyn FnMut() -> svpic::Result<Outcome> + 'a>;
    let checks: Vec<(&str, Check)> = vec![
        (
            "LB relaxation",
            Box::new(|| {
                let started = Instant::now();
                let r = verify::lb_relaxation(&opts)?;
                let secs = started.elapsed().as_secs_f64();
                let mut out = describe(&r.criteria);
                out.detail.push_str(&format!("; runtime {secs:.1} s (target < 60 s)"));
                *relaxation.borrow_mut() = Some(r);
                Ok(out)
            }),
        ),
        (
            "LB distributional match",
            Box::new(|| {
                let started = Instant::now();
                let relaxed = relaxation.borrow();
                let Some(r) = relaxed.as_ref() else {
                    return Ok(Outcome {
                        pass: false,
                        detail: "relaxation run unavailable".into(),
                    });
                };
                let mut out = describe(&verify::lb_distribution(&opts, &r.final_ensemble)?);
                out.detail.push_str(&format!(
                    "; runtime {:.1} s (target < 120 s)",
                    started.elapsed().as_secs_f64()
                ));
                Ok(out)
            }),
        ),
        (
            "Lorentz speed conservation",
            Box::new(|| {
                let rotation = verify::lorentz_rotation_drift(&opts)?;
                let (heun, points) = verify::lorentz_heun_drift_order(&opts)?;
                let mut out = describe(&[rotation, heun]);
                out.detail.push_str(&format!("; heun (dt, drift) = {}", pairs(&points)));
                Ok(out)
            }),
        ),
        (
            "drift/diffusion consistency",
            Box::new(|| {
                let mut all = verify::eq7_lenard_bernstein(&opts);
                all.extend(verify::eq7_lorentz(&opts));
                all.extend(verify::eq7_random_psd(&opts)?);
                Ok(describe(&all))
            }),
        ),
        (
            "Coulomb identities",
            Box::new(|| Ok(describe(&verify::coulomb_identities(&opts)?))),
        ),
        (
            "field correctness",
            Box::new(|| Ok(describe(&verify::field_checks(&opts)?))),
        ),
        (
            "momentum equivalence",
            Box::new(|| {
                let (order, points) = verify::momentum_residual_order(&opts)?;
                let mut out = describe(&[order]);
                out.detail.push_str(&format!("; (dt, residual) = {}", pairs(&points)));
                Ok(out)
            }),
        ),
        (
            "weak convergence",
            Box::new(|| {
                let (criteria, reports) = verify::lb_weak_order(&opts)?;
                let mut out = describe(&criteria);
                for r in reports {
                    let diffs: Vec<String> = r
                        .levels
                        .windows(2)
                        .map(|w| format!("{:.3e}", w[0].value - w[1].value))
                        .collect();
                    out.detail
                        .push_str(&format!("; {} level differences [{}]", r.scheme, diffs.join(", ")));
                }
                Ok(out)
            }),
        ),
        (
            "determinism",
            Box::new(|| {
                let run = || -> svpic::Result<Vec<String>> {
                    Ok(verify::run_suite(Suite::Coulomb, &opts)?
                        .iter()
                        .map(CriterionResult::to_json_line)
                        .collect())
                };
                let identical = run()? == run()?;
                let max_threads = std::thread::available_parallelism().map_or(1, |n| n.get()).max(4);
                let gap = moments_gap(&threaded_moments(1), &threaded_moments(max_threads));
                Ok(Outcome {
                    pass: identical && gap <= 1e-12,
                    detail: format!(
                        "repeat run byte-identical: {identical}; 1 vs {max_threads} threads moment gap {gap:.3e} <= 1e-12"
                    ),
                })
            }),
        ),
        (
            "Gauss's law refinement",
            Box::new(|| {
                let (c, residuals) = verify::gauss_refinement(&opts)?;
                let mut out = describe(&[c]);
                out.detail.push_str(&format!(
                    "; residuals [{}]",
                    residuals
                        .iter()
                        .map(|r| format!("{r:.4e}"))
                        .collect::<Vec<_>>()
                        .join(", ")
                ));
                Ok(out)
            }),
        ),
    ];

    for (i, (name, mut check)) in checks.into_iter().enumerate() {
        let outcome = match catch_unwind(AssertUnwindSafe(&mut check)) {
            Ok(Ok(o)) => o,
            Ok(Err(e)) => Outcome {
                pass: false,
                detail: format!("error: {e}"),
            },
            Err(_) => Outcome {
                pass: false,
                detail: "panicked".into(),
            },
        };
        if !outcome.pass {
            failures += 1;
        }
        let status = if outcome.pass { "PASS" } else { "FAIL" };
        println!("criterion {:>2} {status} {name}: {}", i + 1, outcome.detail);
    }
    println!("acceptance: {} passed, {failures} failed", 10 - failures);
    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
