//! Time integrators for the particle SDE system
//!
//! ```text
//! dX = V dt
//! dV = (q/m)(E + V×B) dt + G dt + Σ_ν g_ν ∘ dW^ν
//! ```
//!
//! Every scheme pushes all particles in parallel from a snapshot taken at the
//! start of the step; the self field and the Coulomb `(D, K)` are frozen there.

use std::cell::RefCell;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::collision::{CollisionModel, ForcingEval, PreparedCollision, CHANNELS};
use crate::ensemble::{conjugate_momenta, ParticleEnsemble, SpeciesParams};
use crate::error::{Error, Result};
use crate::fields::{FieldModel, PreparedFields};
use crate::rng::{NoiseSource, WienerBatch};
use crate::Vec3;

mod run;
pub use run::{run, RunResult, WallClock};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    /// Euler-Maruyama with the Itô drift `K`.
    ItoEuler,
    /// Euler-Heun predictor-corrector with the Stratonovich drift `G`.
    StratonovichHeun,
    /// Half kick, exact rotation for Lorentz scattering, half kick.
    LorentzRotation,
    /// Boris push; collisionless runs only.
    Boris,
}

impl Scheme {
    pub const NAMES: [&'static str; 4] = ["ito_euler", "stratonovich_heun", "lorentz_rotation", "boris"];

    pub fn name(&self) -> &'static str {
        match self {
            Scheme::ItoEuler => "ito_euler",
            Scheme::StratonovichHeun => "stratonovich_heun",
            Scheme::LorentzRotation => "lorentz_rotation",
            Scheme::Boris => "boris",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::NAMES.iter().position(|n| *n == name).map(|i| {
            [
                Scheme::ItoEuler,
                Scheme::StratonovichHeun,
                Scheme::LorentzRotation,
                Scheme::Boris,
            ][i]
        })
    }

    /// Rejects scheme/operator pairs the scheme cannot integrate.
    pub fn check_compatible(&self, collision: &CollisionModel) -> Result<()> {
        match (self, collision) {
            (Scheme::LorentzRotation, CollisionModel::Lorentz(_)) => Ok(()),
            (Scheme::LorentzRotation, other) => Err(Error::param(format!(
                "scheme lorentz_rotation requires collision lorentz, got {}",
                other.name()
            ))),
            (Scheme::Boris, CollisionModel::None) => Ok(()),
            (Scheme::Boris, other) => Err(Error::param(format!(
                "scheme boris is collisionless, got collision {}",
                other.name()
            ))),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntegratorSpec {
    pub scheme: Scheme,
    pub dt: f64,
    pub n_steps: u64,
}

impl IntegratorSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::param(format!("dt must be positive, got {}", self.dt)));
        }
        Ok(())
    }

    pub fn horizon(&self) -> f64 {
        self.dt * self.n_steps as f64
    }
}

/// Everything a single step needs besides the ensemble and the noise.
#[derive(Debug, Clone, Copy)]
pub struct StepContext<'a> {
    pub species: &'a SpeciesParams,
    pub collision: &'a CollisionModel,
    pub fields: &'a FieldModel,
    pub t: f64,
    pub dt: f64,
    /// Index of the step being taken, for error reports.
    pub step: u64,
}

/// Wiener channels consumed per particle by `collision`.
pub fn channels_for(collision: &CollisionModel) -> usize {
    match collision {
        CollisionModel::None => 0,
        _ => CHANNELS,
    }
}

#[inline]
fn lorentz_accel(qm: f64, e: &Vec3, b: &Vec3, v: &Vec3) -> Vec3 {
    (e + v.cross(b)) * qm
}

#[inline]
fn finite(v: &Vec3) -> bool {
    v.iter().all(|c| c.is_finite())
}

#[inline]
fn kick(f: &ForcingEval, noise: &WienerBatch, a: usize) -> Vec3 {
    if noise.m_channels() == 0 {
        Vec3::zeros()
    } else {
        f.noise_kick(noise.particle(a))
    }
}

fn with_context(err: Error, step: u64, a: usize) -> Error {
    match err {
        Error::Singular(m) => Error::Singular(format!("step {step}, particle {a}: {m}")),
        Error::InvalidDiffusion(m) => Error::InvalidDiffusion(format!("step {step}, particle {a}: {m}")),
        other => other,
    }
}

struct Pass<'a> {
    ctx: &'a StepContext<'a>,
    fields: PreparedFields<'a>,
    collision: PreparedCollision<'a>,
    qm: f64,
}

impl<'a> Pass<'a> {
    fn new(ens: &ParticleEnsemble, ctx: &'a StepContext<'a>, noise: &WienerBatch) -> Result<Self> {
        let want = channels_for(ctx.collision);
        if noise.n_particles() != ens.len() || noise.m_channels() != want {
            return Err(Error::param(format!(
                "noise batch is {}x{}, step needs {}x{}",
                noise.n_particles(),
                noise.m_channels(),
                ens.len(),
                want
            )));
        }
        Ok(Self {
            ctx,
            fields: ctx.fields.prepare(ens, ctx.species)?,
            collision: ctx.collision.prepare(ens, ctx.species),
            qm: ctx.species.charge_to_mass(),
        })
    }

    // Finiteness is checked once on the pushed state; see `diagnose`.
    #[inline(always)]
    fn field(&self, a: usize, x: &Vec3, t: f64) -> Result<(Vec3, Vec3)> {
        Ok(self.fields.at(a, x, t))
    }

    #[inline(always)]
    fn forcing(&self, a: usize, x: &Vec3, v: &Vec3) -> Result<ForcingEval> {
        self.collision
            .eval(a, x, v)
            .map_err(|e| with_context(e, self.ctx.step, a))
    }

    /// Names the first non-finite quantity behind a non-finite pushed state.
    fn diagnose(&self, a: usize, x: &Vec3, v: &Vec3, x_new: &Vec3) -> &'static str {
        let (e, b) = self.fields.at(a, x, self.ctx.t);
        if !finite(&e) || !finite(&b) {
            "field"
        } else if !self.collision.eval(a, x, v).is_ok_and(|f| f.is_finite()) {
            "collision forcing"
        } else if !finite(x_new) {
            "position"
        } else {
            "velocity"
        }
    }
}

/// Particles pushed sequentially per parallel task.
const PUSH_CHUNK: usize = 256;

thread_local! {
    /// Pushed states of the current step, kept between steps to avoid
    /// reallocating an ensemble-sized buffer every step.
    static PUSHED: RefCell<Vec<(Vec3, Vec3)>> = const { RefCell::new(Vec::new()) };
}

/// The lower-indexed of two failures, so the reported particle does not depend
/// on how the work was split between threads.
fn first_failure(a: Option<(usize, Error)>, b: Option<(usize, Error)>) -> Option<(usize, Error)> {
    match (a, b) {
        (Some(x), Some(y)) => Some(if x.0 <= y.0 { x } else { y }),
        (x, y) => x.or(y),
    }
}

/// Pushes every particle from the pre-step state and commits only if all
/// pushes succeed; otherwise reports the lowest failing particle index.
fn push_all(
    ens: &mut ParticleEnsemble,
    ctx: &StepContext<'_>,
    noise: &WienerBatch,
    push: impl Fn(&Pass<'_>, usize, Vec3, Vec3) -> Result<(Vec3, Vec3)> + Sync,
) -> Result<()> {
    let pass = Pass::new(ens, ctx, noise)?;
    let mut pushed = PUSHED.take();
    pushed.resize(ens.len(), (Vec3::zeros(), Vec3::zeros()));
    let failure = pushed
        .par_chunks_mut(PUSH_CHUNK)
        .enumerate()
        .map(|(chunk, slots)| {
            let offset = chunk * PUSH_CHUNK;
            for (i, slot) in slots.iter_mut().enumerate() {
                let a = offset + i;
                let (x0, v0) = (ens.positions[a], ens.velocities[a]);
                match push(&pass, a, x0, v0) {
                    Ok((x, v)) if finite(&x) && finite(&v) => *slot = (x, v),
                    Ok((x, _)) => {
                        let what = pass.diagnose(a, &x0, &v0, &x);
                        return Some((
                            a,
                            Error::NonFinite {
                                step: ctx.step,
                                particle: a,
                                what,
                            },
                        ));
                    }
                    Err(e) => return Some((a, e)),
                }
            }
            None
        })
        .reduce(|| None, first_failure);
    if failure.is_none() {
        for (a, (x, v)) in pushed.iter().enumerate() {
            ens.positions[a] = *x;
            ens.velocities[a] = *v;
        }
    }
    PUSHED.set(pushed);
    if let Some((_, err)) = failure {
        return Err(err);
    }
    drop(pass);
    if ens.momenta.is_some() {
        let t1 = ctx.t + ctx.dt;
        let p = match ctx.fields.potentials() {
            Some(pot) => conjugate_momenta(ens, ctx.species, |x| pot.a(x, t1)),
            None => conjugate_momenta(ens, ctx.species, |_| Vec3::zeros()),
        };
        ens.momenta = Some(p);
    }
    Ok(())
}

/// `X += V dt`, `V += [(q/m)(E + V×B) + K] dt + Σ g ΔW`, all at the pre-step state.
pub fn step_ito_euler(ens: &mut ParticleEnsemble, ctx: &StepContext<'_>, noise: &WienerBatch) -> Result<()> {
    let (t, dt) = (ctx.t, ctx.dt);
    push_all(ens, ctx, noise, |p, a, x, v| {
        let (e, b) = p.field(a, &x, t)?;
        let f = p.forcing(a, &x, &v)?;
        let acc = lorentz_accel(p.qm, &e, &b, &v) + f.ito_drift_k;
        Ok((x + v * dt, v + acc * dt + kick(&f, noise, a)))
    })
}

/// Euler-Heun: Euler predictor with drift `G`, then the trapezoidal average of
/// drift and diffusion between the current and predicted states.
pub fn step_stratonovich_heun(ens: &mut ParticleEnsemble, ctx: &StepContext<'_>, noise: &WienerBatch) -> Result<()> {
    let (t, dt) = (ctx.t, ctx.dt);
    push_all(ens, ctx, noise, |p, a, x, v| {
        let (e0, b0) = p.field(a, &x, t)?;
        let f0 = p.forcing(a, &x, &v)?;
        let drift0 = lorentz_accel(p.qm, &e0, &b0, &v) + f0.drift_g;
        let v_pred = v + drift0 * dt + kick(&f0, noise, a);
        let x_pred = x + v * dt;

        let (e1, b1) = p.field(a, &x_pred, t + dt)?;
        let f1 = p.forcing(a, &x_pred, &v_pred)?;
        let drift1 = lorentz_accel(p.qm, &e1, &b1, &v_pred) + f1.drift_g;
        let mut avg = f0;
        for (g, g1) in avg.diffusion_g.iter_mut().zip(&f1.diffusion_g) {
            *g = (*g + g1) * 0.5;
        }
        let v_new = v + (drift0 + drift1) * (0.5 * dt) + kick(&avg, noise, a);
        let x_new = x + (v + v_pred) * (0.5 * dt);
        Ok((x_new, v_new))
    })
}

/// Rotation of `v` by the rotation vector `omega` (Rodrigues' formula).
pub fn rotate(v: &Vec3, omega: &Vec3) -> Vec3 {
    let theta = omega.norm();
    if theta == 0.0 {
        return *v;
    }
    let k = omega / theta;
    let (s, c) = theta.sin_cos();
    v * c + k.cross(v) * s + k * (k.dot(v) * (1.0 - c))
}

/// Lorentz scattering as the exact flow of `dv = √ν_c (ΔW × v)` over the step,
/// wrapped between two explicit half kicks from the fields.
pub fn step_lorentz_rotation(ens: &mut ParticleEnsemble, ctx: &StepContext<'_>, noise: &WienerBatch) -> Result<()> {
    let CollisionModel::Lorentz(freq) = ctx.collision else {
        return Err(Error::param("lorentz_rotation requires the lorentz collision operator"));
    };
    let (t, dt) = (ctx.t, ctx.dt);
    let collisionless_fields = ctx.fields.is_vacuum();
    push_all(ens, ctx, noise, |p, a, x, v| {
        let mut v = v;
        if !collisionless_fields {
            let (e, b) = p.field(a, &x, t)?;
            v += lorentz_accel(p.qm, &e, &b, &v) * (0.5 * dt);
        }
        let dw = noise.particle(a);
        let omega = Vec3::new(dw[0], dw[1], dw[2]) * freq.at(v.norm()).sqrt();
        v = rotate(&v, &omega);
        let x_new = x + v * dt;
        if !collisionless_fields {
            let (e, b) = p.field(a, &x_new, t + dt)?;
            v += lorentz_accel(p.qm, &e, &b, &v) * (0.5 * dt);
        }
        Ok((x_new, v))
    })
}

/// Boris push with `E` and `B` at the pre-step position, then `X += V' dt`.
pub fn step_boris(ens: &mut ParticleEnsemble, ctx: &StepContext<'_>, noise: &WienerBatch) -> Result<()> {
    if !matches!(ctx.collision, CollisionModel::None) {
        return Err(Error::param("boris is a collisionless scheme"));
    }
    let (t, dt) = (ctx.t, ctx.dt);
    push_all(ens, ctx, noise, |p, a, x, v| {
        let (e, b) = p.field(a, &x, t)?;
        let half = 0.5 * p.qm * dt;
        let v_minus = v + e * half;
        let tv = b * half;
        let s = tv * (2.0 / (1.0 + tv.norm_squared()));
        let v_prime = v_minus + v_minus.cross(&tv);
        let v_plus = v_minus + v_prime.cross(&s);
        let v_new = v_plus + e * half;
        Ok((x + v_new * dt, v_new))
    })
}

pub fn step_scheme(
    scheme: Scheme,
    ens: &mut ParticleEnsemble,
    ctx: &StepContext<'_>,
    noise: &WienerBatch,
) -> Result<()> {
    match scheme {
        Scheme::ItoEuler => step_ito_euler(ens, ctx, noise),
        Scheme::StratonovichHeun => step_stratonovich_heun(ens, ctx, noise),
        Scheme::LorentzRotation => step_lorentz_rotation(ens, ctx, noise),
        Scheme::Boris => step_boris(ens, ctx, noise),
    }
}

/// A configured ensemble together with its operators and noise source.
#[derive(Debug, Clone)]
pub struct Simulation {
    pub species: SpeciesParams,
    pub collision: CollisionModel,
    pub fields: FieldModel,
    pub integrator: IntegratorSpec,
    pub noise: NoiseSource,
    pub ensemble: ParticleEnsemble,
    t0: f64,
    step: u64,
    /// Reused by [`Simulation::advance`].
    noise_buf: Option<WienerBatch>,
}

impl Simulation {
    pub fn new(
        species: SpeciesParams,
        collision: CollisionModel,
        fields: FieldModel,
        integrator: IntegratorSpec,
        noise: NoiseSource,
        ensemble: ParticleEnsemble,
    ) -> Result<Self> {
        species.validate()?;
        collision.validate()?;
        integrator.validate()?;
        integrator.scheme.check_compatible(&collision)?;
        Ok(Self {
            species,
            collision,
            fields,
            integrator,
            noise,
            ensemble,
            t0: 0.0,
            step: 0,
            noise_buf: None,
        })
    }

    /// Resumes at `step` (time `t0 + step·dt`), e.g. after loading a snapshot.
    pub fn with_start(mut self, t0: f64, step: u64) -> Self {
        self.set_start(t0, step);
        self
    }

    /// In-place form of [`Simulation::with_start`].
    pub fn set_start(&mut self, t0: f64, step: u64) {
        self.t0 = t0 - step as f64 * self.integrator.dt;
        self.step = step;
    }

    pub fn time(&self) -> f64 {
        self.t0 + self.step as f64 * self.integrator.dt
    }

    pub fn step_index(&self) -> u64 {
        self.step
    }

    pub fn channels(&self) -> usize {
        channels_for(&self.collision)
    }

    /// The increments the next step will consume.
    pub fn next_noise(&self) -> Result<WienerBatch> {
        let (n, m, dt) = (self.ensemble.len(), self.channels(), self.integrator.dt);
        if m == 0 {
            Ok(WienerBatch::zeros(dt, n, 0))
        } else {
            self.noise.batch(self.step, n, m, dt)
        }
    }

    /// Advances one step with caller-supplied increments.
    pub fn step_with(&mut self, noise: &WienerBatch) -> Result<()> {
        let ctx = StepContext {
            species: &self.species,
            collision: &self.collision,
            fields: &self.fields,
            t: self.time(),
            dt: self.integrator.dt,
            step: self.step,
        };
        step_scheme(self.integrator.scheme, &mut self.ensemble, &ctx, noise)?;
        self.step += 1;
        Ok(())
    }

    /// Advances one step and returns the increments it used.
    pub fn step(&mut self) -> Result<WienerBatch> {
        let noise = self.next_noise()?;
        self.step_with(&noise)?;
        Ok(noise)
    }

    pub fn advance(&mut self, n_steps: u64) -> Result<()> {
        let (n, m, dt) = (self.ensemble.len(), self.channels(), self.integrator.dt);
        let mut buf = self.noise_buf.take().unwrap_or_else(|| WienerBatch::zeros(dt, 0, m));
        for _ in 0..n_steps {
            if m == 0 {
                buf = WienerBatch::zeros(dt, n, 0);
            } else {
                self.noise.fill_batch(self.step, n, m, dt, &mut buf)?;
            }
            self.step_with(&buf)?;
        }
        self.noise_buf = Some(buf);
        Ok(())
    }
}
