//! Run configuration.
//!
//! The file is TOML. Unknown keys are errors, and every problem in a document
//! is reported together rather than stopping at the first. The grammar, with
//! defaults:
//!
//! ```toml
//! seed = 7                      # optional; derived from the config hash when absent
//! n_particles = 10000           # required
//!
//! [species]                     # charge = 1, mass = 1, n_total = 1
//!
//! [initial]                     # kind = "maxwellian", thermal_speed = 1, drift = [0,0,0], position_spread = 0
//! # kind = "uniform_box_maxwellian": lo, hi (required), thermal_speed, drift
//! # kind = "two_stream": thermal_speed, beam (required), position_spread
//! # kind = "cold_beam": position = [0,0,0], velocity (required)
//!
//! [collision]                   # kind = "none"
//! # "lenard_bernstein": nu = 1, mu = 1, gamma = 1
//! # "lorentz": frequency = "constant" (nu = 1) | "power_law" (nu0 = 1, v_min = 1e-6)
//! # "coulomb": gamma = 1, softening = 1e-3, locality = "homogeneous" | "cell_local" (lo, hi, cells)
//! # "custom": diffusion (3x3, required), drift = [0,0,0], drift_jacobian = 0   (K = drift + J v)
//!
//! [fields]                      # kind = "vacuum"
//! # "external": field = "uniform_e" | "uniform_b" | "harmonic_trap" | "affine",
//! #             e0, b0, trap_k, a_rate as the chosen field needs
//! # "self_consistent": softening = "auto" | number, exclude_self = true, optional field as above
//!
//! [integrator]                  # scheme = "ito_euler"; dt required; exactly one of n_steps, horizon
//!
//! [output]
//! # dir, diagnostics_stride = 1, snapshot_stride = 0 (final only), trajectory = false,
//! # trajectory_stride = 1, trajectory_particles = 8, momentum_check = false,
//! # field_grid = { lo, hi, cells }, restart = "path/to/snapshot.svpm"
//! ```

use std::path::PathBuf;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use toml::{Table, Value};

use crate::collision::{CollisionModel, CoulombParams, CustomDk, LenardBernstein, Locality, LorentzFrequency};
use crate::ensemble::{DepositionGrid, InitialDistribution, ParticleEnsemble, SpeciesParams};
use crate::error::{Error, Result};
use crate::fields::{AnalyticField, ExternalField, FieldModel, Softening};
use crate::sde::{IntegratorSpec, Scheme};
use crate::{Mat3, Vec3};

/// Collision operator as written in a config file.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "params", rename_all = "snake_case")]
pub enum CollisionSpec {
    None,
    LenardBernstein(LenardBernstein),
    Lorentz(LorentzFrequency),
    Coulomb(CoulombParams),
    /// Constant `D` and affine Itô drift `K = drift + drift_jacobian · v`.
    Custom {
        diffusion: Mat3,
        drift: Vec3,
        drift_jacobian: Mat3,
    },
}

impl CollisionSpec {
    pub fn name(&self) -> &'static str {
        self.build().name()
    }

    pub fn build(&self) -> CollisionModel {
        match *self {
            CollisionSpec::None => CollisionModel::None,
            CollisionSpec::LenardBernstein(p) => CollisionModel::LenardBernstein(p),
            CollisionSpec::Lorentz(f) => CollisionModel::Lorentz(f),
            CollisionSpec::Coulomb(p) => CollisionModel::Coulomb(p),
            CollisionSpec::Custom {
                diffusion,
                drift,
                drift_jacobian,
            } => CollisionModel::Custom(CustomDk::affine(diffusion, drift, drift_jacobian)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FieldKind {
    Vacuum,
    External,
    SelfConsistent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExternalSpec {
    pub name: String,
    pub params: AnalyticField,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldSpec {
    pub kind: FieldKind,
    pub external: Option<ExternalSpec>,
    pub softening: Softening,
    pub exclude_self: bool,
}

impl Default for FieldSpec {
    fn default() -> Self {
        Self {
            kind: FieldKind::Vacuum,
            external: None,
            softening: Softening::Auto,
            exclude_self: true,
        }
    }
}

impl FieldSpec {
    fn analytic(&self) -> Result<Option<Arc<dyn ExternalField>>> {
        match &self.external {
            None => Ok(None),
            Some(spec) => Ok(Some(Arc::new(AnalyticField::named(&spec.name, &spec.params)?))),
        }
    }

    /// Builds the field model; `Softening::Auto` is resolved against `ens`.
    pub fn build(&self, ens: &ParticleEnsemble) -> Result<FieldModel> {
        match self.kind {
            FieldKind::Vacuum => Ok(FieldModel::Vacuum),
            FieldKind::External => self
                .analytic()?
                .map(FieldModel::External)
                .ok_or_else(|| Error::param("external fields need fields.field")),
            FieldKind::SelfConsistent => Ok(FieldModel::SelfConsistent {
                softening: self.softening.resolve(ens)?,
                exclude_self: self.exclude_self,
                external: self.analytic()?,
            }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub lo: Vec3,
    pub hi: Vec3,
    pub cells: [usize; 3],
}

impl GridSpec {
    pub fn build(&self) -> Result<DepositionGrid> {
        DepositionGrid::new(self.lo, self.hi, self.cells)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputPlan {
    pub dir: Option<PathBuf>,
    pub diagnostics_stride: u64,
    /// `0` writes only the final snapshot.
    pub snapshot_stride: u64,
    pub trajectory: bool,
    pub trajectory_stride: u64,
    pub trajectory_particles: usize,
    pub momentum_check: bool,
    pub field_grid: Option<GridSpec>,
    pub restart: Option<PathBuf>,
}

impl Default for OutputPlan {
    fn default() -> Self {
        Self {
            dir: None,
            diagnostics_stride: 1,
            snapshot_stride: 0,
            trajectory: false,
            trajectory_stride: 1,
            trajectory_particles: 8,
            momentum_check: false,
            field_grid: None,
            restart: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub seed: Option<u64>,
    pub n_particles: usize,
    pub species: SpeciesParams,
    pub initial: InitialDistribution,
    pub collision: CollisionSpec,
    pub fields: FieldSpec,
    pub integrator: IntegratorSpec,
    pub output: OutputPlan,
}

/// The part of a config that determines the physics; hashed for provenance.
#[derive(Serialize)]
struct HashedView<'a> {
    n_particles: usize,
    species: &'a SpeciesParams,
    initial: &'a InitialDistribution,
    collision: &'a CollisionSpec,
    fields: &'a FieldSpec,
    integrator: &'a IntegratorSpec,
}

impl SimConfig {
    /// A config with defaults everywhere except the particle count and step.
    pub fn new(n_particles: usize, dt: f64, n_steps: u64) -> Self {
        Self {
            seed: None,
            n_particles,
            species: SpeciesParams::default(),
            initial: default_initial(),
            collision: CollisionSpec::None,
            fields: FieldSpec::default(),
            integrator: IntegratorSpec {
                scheme: Scheme::ItoEuler,
                dt,
                n_steps,
            },
            output: OutputPlan::default(),
        }
    }

    /// Hex SHA-256 of the canonical JSON form of the physics sections.
    /// The seed and the output plan do not enter.
    pub fn hash(&self) -> String {
        let view = HashedView {
            n_particles: self.n_particles,
            species: &self.species,
            initial: &self.initial,
            collision: &self.collision,
            fields: &self.fields,
            integrator: &self.integrator,
        };
        let json = serde_json::to_string(&view).expect("config serializes");
        crate::io::hex(&Sha256::digest(json.as_bytes()))
    }

    /// The configured seed, or the first eight bytes of the config hash.
    pub fn resolved_seed(&self) -> u64 {
        self.seed.unwrap_or_else(|| {
            let hash = self.hash();
            u64::from_str_radix(&hash[..16], 16).expect("hex digest")
        })
    }

    pub fn collision_model(&self) -> CollisionModel {
        self.collision.build()
    }

    /// Checks every cross-section constraint and collects all violations.
    pub fn validate(&self) -> Result<()> {
        let mut errors = Vec::new();
        self.collect_errors(&mut errors);
        if errors.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errors))
        }
    }

    fn collect_errors(&self, errors: &mut Vec<String>) {
        section_errors(
            Some(self.n_particles),
            Some(&self.species),
            Some(&self.initial),
            Some(&self.collision),
            Some(&self.integrator),
            errors,
        );
        self.cross_errors(errors);
    }

    fn cross_errors(&self, errors: &mut Vec<String>) {
        let collision = self.collision.build();
        if let Err(e) = self.integrator.scheme.check_compatible(&collision) {
            errors.push(format!(
                "integrator.scheme = \"{}\" conflicts with collision.kind = \"{}\": {}",
                self.integrator.scheme.name(),
                collision.name(),
                strip_prefix(&e)
            ));
        }
        let fields = &self.fields;
        match (fields.kind, &fields.external) {
            (FieldKind::External, None) => {
                errors.push("fields.field is required when fields.kind = \"external\"".into())
            }
            (FieldKind::Vacuum, Some(_)) => {
                errors.push("fields.field is not allowed when fields.kind = \"vacuum\"".into())
            }
            _ => {}
        }
        if let Some(spec) = &fields.external {
            if let Err(e) = AnalyticField::named(&spec.name, &spec.params) {
                errors.push(format!("fields.field: {}", strip_prefix(&e)));
            }
        }
        if let Softening::Fixed(eps) = fields.softening {
            if !(eps >= 0.0 && eps.is_finite()) {
                errors.push(format!("fields.softening must be non-negative, got {eps}"));
            }
        }
        let out = &self.output;
        if out.diagnostics_stride == 0 {
            errors.push("output.diagnostics_stride must be at least 1".into());
        }
        if out.trajectory_stride == 0 {
            errors.push("output.trajectory_stride must be at least 1".into());
        }
        if (out.trajectory || out.momentum_check) && out.trajectory_particles == 0 {
            errors.push("output.trajectory_particles must be at least 1".into());
        }
        if let Some(g) = &out.field_grid {
            if let Err(e) = g.build() {
                errors.push(format!("output.field_grid: {}", strip_prefix(&e)));
            }
        }
        if out.momentum_check {
            if fields.kind != FieldKind::External {
                errors.push(format!(
                    "output.momentum_check requires fields.kind = \"external\" (with potentials), got \"{}\"",
                    field_kind_name(fields.kind)
                ));
            }
            if matches!(self.collision, CollisionSpec::Coulomb(_)) {
                errors.push(
                    "output.momentum_check conflicts with collision.kind = \"coulomb\": the check needs an operator local to each particle"
                        .into(),
                );
            }
        }
    }
}

/// Checks that need only one section each, so they can run even when
/// another section failed to parse.
fn section_errors(
    n_particles: Option<usize>,
    species: Option<&SpeciesParams>,
    initial: Option<&InitialDistribution>,
    collision: Option<&CollisionSpec>,
    integrator: Option<&IntegratorSpec>,
    errors: &mut Vec<String>,
) {
    let mut check = |key: &str, r: Result<()>| {
        if let Err(e) = r {
            errors.push(format!("{key}: {}", strip_prefix(&e)));
        }
    };
    if n_particles == Some(0) {
        check("n_particles", Err(Error::param("must be at least 1")));
    }
    if let Some(s) = species {
        check("species", s.validate());
    }
    if let Some(d) = initial {
        check("initial", d.validate());
    }
    if let Some(c) = collision {
        check("collision", c.build().validate());
        if let CollisionSpec::Custom { diffusion, .. } = c {
            check(
                "collision.diffusion",
                crate::collision::PsdSqrt::new(diffusion).map(|_| ()),
            );
        }
    }
    if let Some(i) = integrator {
        check("integrator.dt", i.validate());
    }
}

fn strip_prefix(e: &Error) -> String {
    match e {
        Error::InvalidParameter(m) => m.clone(),
        other => other.to_string(),
    }
}

fn default_initial() -> InitialDistribution {
    InitialDistribution::Maxwellian {
        thermal_speed: 1.0,
        drift: Vec3::zeros(),
        position_spread: 0.0,
    }
}

fn field_kind_name(kind: FieldKind) -> &'static str {
    match kind {
        FieldKind::Vacuum => "vacuum",
        FieldKind::External => "external",
        FieldKind::SelfConsistent => "self_consistent",
    }
}

// ---------------------------------------------------------------------------
// Parsing

const TOP_KEYS: &[&str] = &[
    "seed",
    "n_particles",
    "species",
    "initial",
    "collision",
    "fields",
    "integrator",
    "output",
];
const SPECIES_KEYS: &[&str] = &["charge", "mass", "n_total"];
const INITIAL_KEYS: &[&str] = &[
    "kind",
    "thermal_speed",
    "drift",
    "position_spread",
    "lo",
    "hi",
    "beam",
    "position",
    "velocity",
];
const COLLISION_KEYS: &[&str] = &[
    "kind",
    "nu",
    "mu",
    "gamma",
    "frequency",
    "nu0",
    "v_min",
    "softening",
    "locality",
    "lo",
    "hi",
    "cells",
    "diffusion",
    "drift",
    "drift_jacobian",
];
const FIELD_KEYS: &[&str] = &[
    "kind",
    "field",
    "e0",
    "b0",
    "trap_k",
    "a_rate",
    "softening",
    "exclude_self",
];
const INTEGRATOR_KEYS: &[&str] = &["scheme", "dt", "n_steps", "horizon"];
const OUTPUT_KEYS: &[&str] = &[
    "dir",
    "diagnostics_stride",
    "snapshot_stride",
    "trajectory",
    "trajectory_stride",
    "trajectory_particles",
    "momentum_check",
    "field_grid",
    "restart",
];
const GRID_KEYS: &[&str] = &["lo", "hi", "cells"];

/// Suggests the closest allowed key, if any is reasonably close.
pub fn suggest(key: &str, allowed: &[&str]) -> Option<String> {
    allowed
        .iter()
        .map(|k| (strsim::normalized_damerau_levenshtein(key, k), *k))
        .filter(|(score, _)| *score >= 0.6)
        .max_by(|a, b| a.0.total_cmp(&b.0))
        .map(|(_, k)| k.to_string())
}

/// A TOML table being consumed key by key.
struct Section<'e> {
    path: String,
    table: Table,
    allowed: &'static [&'static str],
    errors: &'e mut Vec<String>,
}

impl<'e> Section<'e> {
    fn new(path: &str, table: Table, allowed: &'static [&'static str], errors: &'e mut Vec<String>) -> Self {
        Self {
            path: path.to_string(),
            table,
            allowed,
            errors,
        }
    }

    fn key(&self, k: &str) -> String {
        if self.path.is_empty() {
            k.to_string()
        } else {
            format!("{}.{k}", self.path)
        }
    }

    fn error(&mut self, msg: String) {
        self.errors.push(msg);
    }

    fn take<T>(&mut self, k: &str, what: &str, conv: impl Fn(&Value) -> Option<T>) -> Option<T> {
        let v = self.table.remove(k)?;
        match conv(&v) {
            Some(x) => Some(x),
            None => {
                let msg = format!("{}: expected {what}, got {}", self.key(k), describe(&v));
                self.error(msg);
                None
            }
        }
    }

    fn required<T>(&mut self, k: &str, value: Option<T>, context: &str) -> Option<T> {
        if value.is_none() && !self.errors.iter().any(|e| e.starts_with(&format!("{}:", self.key(k)))) {
            let msg = format!("{}: missing (required {context})", self.key(k));
            self.error(msg);
        }
        value
    }

    fn f64(&mut self, k: &str) -> Option<f64> {
        self.take(k, "a number", as_f64)
    }

    fn f64_or(&mut self, k: &str, default: f64) -> f64 {
        self.f64(k).unwrap_or(default)
    }

    fn u64(&mut self, k: &str) -> Option<u64> {
        self.take(k, "a non-negative integer", |v| {
            v.as_integer().and_then(|i| u64::try_from(i).ok())
        })
    }

    fn bool(&mut self, k: &str) -> Option<bool> {
        self.take(k, "a boolean", Value::as_bool)
    }

    fn str(&mut self, k: &str) -> Option<String> {
        self.take(k, "a string", |v| v.as_str().map(str::to_string))
    }

    fn vec3(&mut self, k: &str) -> Option<Vec3> {
        self.take(k, "an array of 3 numbers", as_vec3)
    }

    fn mat3(&mut self, k: &str) -> Option<Mat3> {
        self.take(k, "a 3x3 array of numbers (rows)", |v| {
            let rows = v.as_array().filter(|r| r.len() == 3)?;
            let r: Vec<Vec3> = rows.iter().map(as_vec3).collect::<Option<_>>()?;
            Some(Mat3::from_rows(&[r[0].transpose(), r[1].transpose(), r[2].transpose()]))
        })
    }

    fn cells(&mut self, k: &str) -> Option<[usize; 3]> {
        self.take(k, "an array of 3 positive integers", |v| {
            let a = v.as_array().filter(|a| a.len() == 3)?;
            let c: Vec<usize> = a
                .iter()
                .map(|x| x.as_integer().and_then(|i| usize::try_from(i).ok()).filter(|&i| i > 0))
                .collect::<Option<_>>()?;
            Some([c[0], c[1], c[2]])
        })
    }

    fn table(&mut self, k: &str) -> Option<Table> {
        self.take(k, "a table", |v| v.as_table().cloned())
    }

    fn kind(&mut self, names: &[&str], default: &str) -> String {
        let k = self.str("kind").unwrap_or_else(|| default.to_string());
        if !names.contains(&k.as_str()) {
            let hint = suggest(&k, names)
                .map(|s| format!("; did you mean \"{s}\"?"))
                .unwrap_or_default();
            let msg = format!(
                "{}: unknown kind \"{k}\" (expected one of {}){hint}",
                self.key("kind"),
                names.join(", ")
            );
            self.error(msg);
        }
        k
    }

    /// Reports whatever keys are left unconsumed.
    fn finish(self, context: &str) {
        let Section {
            path,
            table,
            allowed,
            errors,
        } = self;
        for k in table.keys() {
            let full = if path.is_empty() {
                k.clone()
            } else {
                format!("{path}.{k}")
            };
            if allowed.contains(&k.as_str()) {
                errors.push(format!("{full}: not used {context}"));
            } else {
                let hint = suggest(k, allowed)
                    .map(|s| format!("; did you mean `{s}`?"))
                    .unwrap_or_default();
                errors.push(format!("{full}: unknown key{hint}"));
            }
        }
    }
}

fn as_f64(v: &Value) -> Option<f64> {
    match v {
        Value::Float(f) => Some(*f),
        Value::Integer(i) => Some(*i as f64),
        _ => None,
    }
}

fn as_vec3(v: &Value) -> Option<Vec3> {
    let a = v.as_array().filter(|a| a.len() == 3)?;
    let c: Vec<f64> = a.iter().map(as_f64).collect::<Option<_>>()?;
    Some(Vec3::new(c[0], c[1], c[2]))
}

fn describe(v: &Value) -> String {
    match v {
        Value::String(s) => format!("string \"{s}\""),
        Value::Integer(i) => format!("integer {i}"),
        Value::Float(f) => format!("float {f}"),
        Value::Boolean(b) => format!("boolean {b}"),
        Value::Datetime(d) => format!("datetime {d}"),
        Value::Array(a) => format!("array of length {}", a.len()),
        Value::Table(_) => "table".into(),
    }
}

/// Parses and validates a config document, reporting every problem found.
pub fn parse_config(text: &str) -> Result<SimConfig> {
    let root: Table = text
        .parse()
        .map_err(|e: toml::de::Error| Error::Config(vec![format!("syntax: {}", e.to_string().trim())]))?;
    let mut errors = Vec::new();
    let config = parse_root(root, &mut errors);
    if let Some(c) = &config {
        c.cross_errors(&mut errors);
    }
    match config {
        Some(c) if errors.is_empty() => Ok(c),
        _ => Err(Error::Config(errors)),
    }
}

pub fn load_config(path: &std::path::Path) -> Result<SimConfig> {
    parse_config(&std::fs::read_to_string(path)?)
}

fn sub<'e>(
    top: &mut Section<'_>,
    name: &str,
    allowed: &'static [&'static str],
    errors: &'e mut Vec<String>,
) -> Section<'e> {
    let table = top.table(name).unwrap_or_default();
    Section::new(name, table, allowed, errors)
}

fn parse_root(root: Table, errors: &mut Vec<String>) -> Option<SimConfig> {
    let mut local = Vec::new();
    let mut top = Section::new("", root, TOP_KEYS, &mut local);
    let seed = top.u64("seed");
    let n = top.u64("n_particles");
    let n_particles = top.required("n_particles", n, "particle count").map(|n| n as usize);

    let mut e = Vec::new();
    let species = parse_species(sub(&mut top, "species", SPECIES_KEYS, &mut e));
    let initial = parse_initial(sub(&mut top, "initial", INITIAL_KEYS, &mut e));
    let collision = parse_collision(sub(&mut top, "collision", COLLISION_KEYS, &mut e));
    let fields = parse_fields(sub(&mut top, "fields", FIELD_KEYS, &mut e));
    let has_integrator = top.table.contains_key("integrator");
    let integrator = parse_integrator(sub(&mut top, "integrator", INTEGRATOR_KEYS, &mut e));
    if !has_integrator {
        e.push("integrator: missing section (dt and n_steps or horizon are required)".into());
    }
    let output = parse_output(sub(&mut top, "output", OUTPUT_KEYS, &mut e));
    top.finish("at the top level");
    errors.extend(local);
    errors.extend(e);
    section_errors(
        n_particles,
        species.as_ref(),
        initial.as_ref(),
        collision.as_ref(),
        integrator.as_ref(),
        errors,
    );

    Some(SimConfig {
        seed,
        n_particles: n_particles?,
        species: species?,
        initial: initial?,
        collision: collision?,
        fields: fields?,
        integrator: integrator?,
        output: output?,
    })
}

fn parse_species(mut s: Section<'_>) -> Option<SpeciesParams> {
    let d = SpeciesParams::default();
    let p = SpeciesParams {
        charge: s.f64_or("charge", d.charge),
        mass: s.f64_or("mass", d.mass),
        n_total: s.f64_or("n_total", d.n_total),
    };
    s.finish("");
    Some(p)
}

fn parse_initial(mut s: Section<'_>) -> Option<InitialDistribution> {
    let kind = s.kind(&InitialDistribution::NAMES, "maxwellian");
    let dist = match kind.as_str() {
        "maxwellian" => Some(InitialDistribution::Maxwellian {
            thermal_speed: s.f64_or("thermal_speed", 1.0),
            drift: s.vec3("drift").unwrap_or_else(Vec3::zeros),
            position_spread: s.f64_or("position_spread", 0.0),
        }),
        "uniform_box_maxwellian" => {
            let lo = s.vec3("lo");
            let lo = s.required("lo", lo, "for a uniform box");
            let hi = s.vec3("hi");
            let hi = s.required("hi", hi, "for a uniform box");
            let thermal_speed = s.f64_or("thermal_speed", 1.0);
            let drift = s.vec3("drift").unwrap_or_else(Vec3::zeros);
            Some(InitialDistribution::UniformBoxMaxwellian {
                lo: lo?,
                hi: hi?,
                thermal_speed,
                drift,
            })
        }
        "two_stream" => {
            let beam = s.vec3("beam");
            let beam = s.required("beam", beam, "for two_stream");
            Some(InitialDistribution::TwoStream {
                thermal_speed: s.f64_or("thermal_speed", 1.0),
                beam: beam?,
                position_spread: s.f64_or("position_spread", 0.0),
            })
        }
        "cold_beam" => {
            let position = s.vec3("position").unwrap_or_else(Vec3::zeros);
            let velocity = s.vec3("velocity");
            let velocity = s.required("velocity", velocity, "for cold_beam");
            Some(InitialDistribution::ColdBeam {
                position,
                velocity: velocity?,
            })
        }
        _ => None,
    };
    s.finish(&format!("by initial.kind = \"{kind}\""));
    dist
}

fn parse_collision(mut s: Section<'_>) -> Option<CollisionSpec> {
    let kind = s.kind(&CollisionModel::NAMES, "none");
    let spec = match kind.as_str() {
        "none" => Some(CollisionSpec::None),
        "lenard_bernstein" => Some(CollisionSpec::LenardBernstein(LenardBernstein {
            nu: s.f64_or("nu", 1.0),
            mu: s.f64_or("mu", 1.0),
            gamma: s.f64_or("gamma", 1.0),
        })),
        "lorentz" => {
            let freq = s.str("frequency").unwrap_or_else(|| "constant".into());
            match freq.as_str() {
                "constant" => Some(CollisionSpec::Lorentz(LorentzFrequency::Constant {
                    nu: s.f64_or("nu", 1.0),
                })),
                "power_law" => Some(CollisionSpec::Lorentz(LorentzFrequency::PowerLaw {
                    nu0: s.f64_or("nu0", 1.0),
                    v_min: s.f64_or("v_min", LorentzFrequency::DEFAULT_V_MIN),
                })),
                other => {
                    let msg =
                        format!("collision.frequency: unknown frequency \"{other}\" (expected constant, power_law)");
                    s.error(msg);
                    None
                }
            }
        }
        "coulomb" => {
            let gamma = s.f64_or("gamma", 1.0);
            let softening = s.f64_or("softening", CoulombParams::DEFAULT_SOFTENING);
            let locality = s.str("locality").unwrap_or_else(|| "homogeneous".into());
            let locality = match locality.as_str() {
                "homogeneous" => Some(Locality::Homogeneous),
                "cell_local" => {
                    let lo = s.vec3("lo");
                    let lo = s.required("lo", lo, "for cell_local locality");
                    let hi = s.vec3("hi");
                    let hi = s.required("hi", hi, "for cell_local locality");
                    let cells = s.cells("cells");
                    let cells = s.required("cells", cells, "for cell_local locality");
                    Some(Locality::CellLocal {
                        lo: lo?,
                        hi: hi?,
                        cells: cells?,
                    })
                }
                other => {
                    let msg =
                        format!("collision.locality: unknown locality \"{other}\" (expected homogeneous, cell_local)");
                    s.error(msg);
                    None
                }
            };
            locality.map(|locality| {
                CollisionSpec::Coulomb(CoulombParams {
                    gamma,
                    softening,
                    locality,
                })
            })
        }
        "custom" => {
            let d = s.mat3("diffusion");
            let d = s.required("diffusion", d, "for custom");
            let drift = s.vec3("drift").unwrap_or_else(Vec3::zeros);
            let jac = s.mat3("drift_jacobian").unwrap_or_else(Mat3::zeros);
            d.map(|diffusion| CollisionSpec::Custom {
                diffusion,
                drift,
                drift_jacobian: jac,
            })
        }
        _ => None,
    };
    s.finish(&format!("by collision.kind = \"{kind}\""));
    spec
}

fn parse_fields(mut s: Section<'_>) -> Option<FieldSpec> {
    let kind = s.kind(&["vacuum", "external", "self_consistent"], "vacuum");
    let mut spec = FieldSpec::default();
    match kind.as_str() {
        "vacuum" => {}
        "external" | "self_consistent" => {
            spec.kind = if kind == "external" {
                FieldKind::External
            } else {
                FieldKind::SelfConsistent
            };
            if let Some(name) = s.str("field") {
                let mut params = AnalyticField::default();
                let want = |s: &mut Section<'_>, key: &str| -> Option<Vec3> {
                    let v = s.vec3(key);
                    s.required(key, v, &format!("for field \"{name}\""))
                };
                match name.as_str() {
                    "uniform_e" => params.e0 = want(&mut s, "e0").unwrap_or_default(),
                    "uniform_b" => params.b0 = want(&mut s, "b0").unwrap_or_default(),
                    "harmonic_trap" => {
                        let k = s.f64("trap_k");
                        params.trap_k = s.required("trap_k", k, "for field \"harmonic_trap\"").unwrap_or(0.0);
                    }
                    "affine" => {
                        params.e0 = s.vec3("e0").unwrap_or_default();
                        params.b0 = s.vec3("b0").unwrap_or_default();
                        params.trap_k = s.f64_or("trap_k", 0.0);
                        params.a_rate = s.vec3("a_rate").unwrap_or_default();
                    }
                    other => {
                        let hint = suggest(other, &AnalyticField::NAMES)
                            .map(|h| format!("; did you mean \"{h}\"?"))
                            .unwrap_or_default();
                        let msg = format!(
                            "fields.field: unknown external field \"{other}\" (expected one of {}){hint}",
                            AnalyticField::NAMES.join(", ")
                        );
                        s.error(msg);
                    }
                }
                if AnalyticField::NAMES.contains(&name.as_str()) {
                    spec.external = Some(ExternalSpec { name, params });
                }
            }
            if kind == "self_consistent" {
                if let Some(v) = s.table.remove("softening") {
                    spec.softening = match &v {
                        Value::String(t) if t == "auto" => Softening::Auto,
                        other => match as_f64(other) {
                            Some(eps) => Softening::Fixed(eps),
                            None => {
                                let msg = format!(
                                    "fields.softening: expected \"auto\" or a number, got {}",
                                    describe(other)
                                );
                                s.error(msg);
                                Softening::Auto
                            }
                        },
                    };
                }
                spec.exclude_self = s.bool("exclude_self").unwrap_or(true);
            }
        }
        _ => {
            s.finish("");
            return None;
        }
    }
    s.finish(&format!("by fields.kind = \"{kind}\" with this field"));
    Some(spec)
}

fn parse_integrator(mut s: Section<'_>) -> Option<IntegratorSpec> {
    let name = s.str("scheme").unwrap_or_else(|| "ito_euler".into());
    let scheme = Scheme::from_name(&name);
    if scheme.is_none() {
        let hint = suggest(&name, &Scheme::NAMES)
            .map(|h| format!("; did you mean \"{h}\"?"))
            .unwrap_or_default();
        let msg = format!(
            "integrator.scheme: unknown scheme \"{name}\" (expected one of {}){hint}",
            Scheme::NAMES.join(", ")
        );
        s.error(msg);
    }
    let dt = s.f64("dt");
    let dt = s.required("dt", dt, "time step");
    let n_steps = s.u64("n_steps");
    let horizon = s.f64("horizon");
    let steps = match (n_steps, horizon, dt) {
        (Some(_), Some(_), _) => {
            s.error("integrator: give n_steps or horizon, not both".into());
            None
        }
        (Some(n), None, _) => Some(n),
        (None, Some(t), Some(dt)) if dt > 0.0 && t >= 0.0 => {
            let n = (t / dt).round();
            if (n * dt - t).abs() > 1e-12 * t.max(1.0) {
                s.error(format!(
                    "integrator.horizon: {t} is not an integer multiple of dt = {dt} (within 1e-12)"
                ));
                None
            } else {
                Some(n as u64)
            }
        }
        (None, Some(t), _) => {
            if !(t >= 0.0) {
                s.error(format!("integrator.horizon must be non-negative, got {t}"));
            }
            None
        }
        (None, None, _) => {
            s.error("integrator: one of n_steps or horizon is required".into());
            None
        }
    };
    s.finish("");
    Some(IntegratorSpec {
        scheme: scheme?,
        dt: dt?,
        n_steps: steps?,
    })
}

fn parse_output(mut s: Section<'_>) -> Option<OutputPlan> {
    let d = OutputPlan::default();
    let dir = s.str("dir").map(PathBuf::from);
    let diagnostics_stride = s.u64("diagnostics_stride").unwrap_or(d.diagnostics_stride);
    let snapshot_stride = s.u64("snapshot_stride").unwrap_or(d.snapshot_stride);
    let trajectory = s.bool("trajectory").unwrap_or(d.trajectory);
    let trajectory_stride = s.u64("trajectory_stride").unwrap_or(d.trajectory_stride);
    let trajectory_particles = s
        .u64("trajectory_particles")
        .map(|n| n as usize)
        .unwrap_or(d.trajectory_particles);
    let momentum_check = s.bool("momentum_check").unwrap_or(d.momentum_check);
    let restart = s.str("restart").map(PathBuf::from);
    let field_grid = s.table("field_grid").and_then(|t| {
        let mut g = Section::new("output.field_grid", t, GRID_KEYS, s.errors);
        let lo = g.vec3("lo");
        let lo = g.required("lo", lo, "for the field grid");
        let hi = g.vec3("hi");
        let hi = g.required("hi", hi, "for the field grid");
        let cells = g.cells("cells");
        let cells = g.required("cells", cells, "for the field grid");
        g.finish("");
        Some(GridSpec {
            lo: lo?,
            hi: hi?,
            cells: cells?,
        })
    });
    s.finish("");
    Some(OutputPlan {
        dir,
        diagnostics_stride,
        snapshot_stride,
        trajectory,
        trajectory_stride,
        trajectory_particles,
        momentum_check,
        field_grid,
        restart,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
n_particles = 100
[collision]
kind = "lenard_bernstein"
[integrator]
dt = 0.01
n_steps = 10
"#;

    fn errors_of(text: &str) -> Vec<String> {
        match parse_config(text) {
            Err(Error::Config(e)) => e,
            other => panic!("expected config errors, got {other:?}"),
        }
    }

    #[test]
    fn minimal_config_fills_defaults() {
        let c = parse_config(MINIMAL).unwrap();
        assert_eq!(c.n_particles, 100);
        assert_eq!(c.species, SpeciesParams::default());
        assert_eq!(
            c.collision,
            CollisionSpec::LenardBernstein(LenardBernstein {
                nu: 1.0,
                mu: 1.0,
                gamma: 1.0
            })
        );
        assert_eq!(c.fields, FieldSpec::default());
        assert_eq!(c.integrator.scheme, Scheme::ItoEuler);
        assert_eq!(c.integrator.n_steps, 10);
        assert_eq!(c.initial, default_initial());
        assert_eq!(c.output, OutputPlan::default());
        assert_eq!(c.seed, None);
    }

    #[test]
    fn rotation_scheme_needs_lorentz() {
        let text = MINIMAL.replace("dt = 0.01", "scheme = \"lorentz_rotation\"\ndt = 0.01");
        let errs = errors_of(&text);
        assert_eq!(errs.len(), 1, "{errs:?}");
        assert!(
            errs[0].contains("integrator.scheme") && errs[0].contains("collision.kind"),
            "{errs:?}"
        );
    }

    #[test]
    fn misspelled_section_gets_a_suggestion() {
        let text = MINIMAL.replace("[collision]", "[colision]");
        let errs = errors_of(&text);
        assert!(
            errs.iter()
                .any(|e| e.contains("colision") && e.contains("did you mean `collision`")),
            "{errs:?}"
        );
    }

    #[test]
    fn all_errors_are_reported() {
        let text = r#"
n_particles = "many"
[collision]
kind = "lenard_bernstein"
nu = -1.0
frobnicate = 3
[integrator]
scheme = "ito_eulr"
"#;
        let errs = errors_of(text);
        let joined = errs.join("\n");
        for needle in [
            "n_particles",
            "frobnicate",
            "ito_eulr",
            "integrator.dt",
            "n_steps or horizon",
        ] {
            assert!(joined.contains(needle), "missing {needle} in {joined}");
        }
        assert!(joined.contains("did you mean \"ito_euler\""), "{joined}");
    }

    #[test]
    fn keys_for_another_kind_are_rejected() {
        let text = MINIMAL.replace("kind = \"lenard_bernstein\"", "kind = \"lenard_bernstein\"\nnu0 = 2.0");
        let errs = errors_of(&text);
        assert!(
            errs[0].contains("collision.nu0") && errs[0].contains("not used"),
            "{errs:?}"
        );
    }

    #[test]
    fn horizon_must_be_a_multiple_of_dt() {
        let c = parse_config(&MINIMAL.replace("n_steps = 10", "horizon = 1.0")).unwrap();
        assert_eq!(c.integrator.n_steps, 100);
        let errs = errors_of(&MINIMAL.replace("n_steps = 10", "horizon = 1.005"));
        assert!(errs[0].contains("integer multiple"), "{errs:?}");
    }

    #[test]
    fn full_grammar_round_trips() {
        let text = r#"
seed = 11
n_particles = 64
[species]
charge = -1.0
mass = 2.0
n_total = 1e3
[initial]
kind = "uniform_box_maxwellian"
lo = [-1, -1, -1]
hi = [1, 1, 1]
thermal_speed = 0.5
[collision]
kind = "coulomb"
gamma = 0.1
locality = "cell_local"
lo = [-1, -1, -1]
hi = [1, 1, 1]
cells = [2, 2, 2]
[fields]
kind = "self_consistent"
softening = 0.05
field = "uniform_b"
b0 = [0, 0, 1]
[integrator]
scheme = "stratonovich_heun"
dt = 0.01
n_steps = 3
[output]
dir = "out"
snapshot_stride = 2
trajectory = true
field_grid = { lo = [-2, -2, -2], hi = [2, 2, 2], cells = [4, 4, 4] }
"#;
        let c = parse_config(text).unwrap();
        assert_eq!(c.seed, Some(11));
        assert!(matches!(c.collision, CollisionSpec::Coulomb(p) if matches!(p.locality, Locality::CellLocal { .. })));
        assert_eq!(c.fields.softening, Softening::Fixed(0.05));
        assert_eq!(c.fields.external.as_ref().unwrap().params.b0, Vec3::z());
        assert_eq!(c.output.field_grid.unwrap().cells, [4, 4, 4]);
        // Serializing and reparsing via serde keeps the resolved config.
        let json = serde_json::to_string(&c).unwrap();
        let back: SimConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn momentum_check_needs_external_potentials() {
        let text = format!("{MINIMAL}[output]\nmomentum_check = true\n");
        let errs = errors_of(&text);
        assert!(errs[0].contains("output.momentum_check"), "{errs:?}");
    }

    #[test]
    fn hash_ignores_seed_and_output() {
        let a = parse_config(MINIMAL).unwrap();
        let mut b = a.clone();
        b.seed = Some(3);
        b.output.dir = Some("elsewhere".into());
        assert_eq!(a.hash(), b.hash());
        b.integrator.dt = 0.02;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
        assert_eq!(a.resolved_seed(), a.resolved_seed());
        assert_eq!(b.resolved_seed(), b.resolved_seed());
    }

    #[test]
    fn syntax_errors_are_config_errors() {
        assert!(matches!(parse_config("n_particles = ="), Err(Error::Config(_))));
    }

    #[test]
    fn custom_diffusion_must_be_psd() {
        let text = MINIMAL.replace(
            "kind = \"lenard_bernstein\"",
            "kind = \"custom\"\ndiffusion = [[1, 0, 0], [0, -1, 0], [0, 0, 1]]",
        );
        let errs = errors_of(&text);
        assert!(errs[0].contains("collision.diffusion"), "{errs:?}");
    }
}
