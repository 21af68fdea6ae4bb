//! JSON run configuration and its translation into model parameters.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use beable_core::dynamics::{Guidance, DEFAULT_MAX_HALVINGS};
use beable_core::ensemble::EnsembleConfig;
use beable_core::linalg::{c, C64};
use beable_core::models::larmor::{Orientation, PrepTerm};
use beable_core::models::{EprbParams, LarmorParams, SurrealParams};
use beable_core::spin::Level;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExperimentKind {
    Larmor,
    Eprb,
    Surreal,
}

/// A complex number written either as a plain real or as `[re, im]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ComplexInput {
    Real(f64),
    Pair([f64; 2]),
}

impl ComplexInput {
    fn value(self) -> C64 {
        match self {
            ComplexInput::Real(re) => c(re, 0.0),
            ComplexInput::Pair([re, im]) => c(re, im),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OrientationConfig {
    pub theta: f64,
    pub phi: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TermConfig {
    pub coefficient: ComplexInput,
    pub m1: f64,
    pub m2: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LarmorConfig {
    #[serde(default = "LarmorConfig::default_s")]
    pub s: f64,
    #[serde(default = "LarmorConfig::default_mu1")]
    pub mu1: f64,
    #[serde(default = "LarmorConfig::default_mu2")]
    pub mu2: f64,
    #[serde(default = "LarmorConfig::default_orientations")]
    pub orientations: [OrientationConfig; 2],
    #[serde(default = "LarmorConfig::default_terms")]
    pub terms: Vec<TermConfig>,
    pub eps: f64,
    #[serde(default)]
    pub duration: Option<f64>,
}

impl LarmorConfig {
    fn default_s() -> f64 {
        2.0
    }
    fn default_mu1() -> f64 {
        1.0
    }
    fn default_mu2() -> f64 {
        1.5
    }
    fn default_orientations() -> [OrientationConfig; 2] {
        [
            OrientationConfig { theta: PI / 2.0, phi: PI / 4.0 },
            OrientationConfig { theta: PI / 4.0, phi: PI / 8.0 },
        ]
    }
    fn default_terms() -> Vec<TermConfig> {
        vec![
            TermConfig { coefficient: ComplexInput::Real(1.0), m1: 2.0, m2: -2.0 },
            TermConfig { coefficient: ComplexInput::Real(-2.0), m1: -2.0, m2: 2.0 },
        ]
    }

    pub fn params(&self) -> Result<LarmorParams, CliError> {
        let twice_s = twice(self.s, "larmor.s")?;
        if twice_s < 1 {
            return Err(CliError::config("larmor.s", "must be at least 1/2"));
        }
        let mut terms = Vec::with_capacity(self.terms.len());
        for (k, t) in self.terms.iter().enumerate() {
            let field = format!("larmor.terms[{k}]");
            let m1 = twice(t.m1, &format!("{field}.m1"))?;
            let m2 = twice(t.m2, &format!("{field}.m2"))?;
            for (name, m) in [("m1", m1), ("m2", m2)] {
                if m.abs() > twice_s || (twice_s - m) % 2 != 0 {
                    return Err(CliError::config(format!("{field}.{name}"), format!("not a level of spin {}", self.s)));
                }
            }
            terms.push(PrepTerm {
                coefficient: t.coefficient.value(),
                levels: (Level::from_twice(m1), Level::from_twice(m2)),
            });
        }
        Ok(LarmorParams {
            twice_s: twice_s as u32,
            mu1: self.mu1,
            mu2: self.mu2,
            orientations: self.orientations.map(|o| Orientation { theta: o.theta, phi: o.phi }),
            terms,
            eps: positive(self.eps, "larmor.eps")?,
            duration: self.duration,
        })
    }
}

fn twice(v: f64, field: &str) -> Result<i32, CliError> {
    let t = 2.0 * v;
    if !t.is_finite() || (t - t.round()).abs() > 1e-9 || t.abs() > 1e6 {
        return Err(CliError::config(field, format!("must be a multiple of 1/2, got {v}")));
    }
    Ok(t.round() as i32)
}

fn positive(v: f64, field: &str) -> Result<f64, CliError> {
    if v.is_finite() && v > 0.0 {
        Ok(v)
    } else {
        Err(CliError::config(field, format!("must be positive, got {v}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EprbConfig {
    #[serde(default = "EprbConfig::default_gamma_1")]
    pub gamma_alpha_1: ComplexInput,
    /// Approximate: only `|γ'_α|² ≈ 0.79` is known for the second particle.
    #[serde(default = "EprbConfig::default_gamma_2")]
    pub gamma_alpha_2: ComplexInput,
    #[serde(default = "EprbConfig::default_alpha")]
    pub alpha: f64,
    #[serde(default = "EprbConfig::default_beta")]
    pub beta: f64,
    pub eps: f64,
    /// Defaults to `round(1/eps)`; `n_substeps · eps` must equal 1.
    #[serde(default)]
    pub n_substeps: Option<usize>,
}

impl EprbConfig {
    fn default_gamma_1() -> ComplexInput {
        ComplexInput::Real((PI / 5.0).sin())
    }
    fn default_gamma_2() -> ComplexInput {
        ComplexInput::Real(0.79f64.sqrt())
    }
    fn default_alpha() -> f64 {
        PI / 5.0
    }
    fn default_beta() -> f64 {
        3.0 * PI / 5.0
    }

    pub fn params(&self) -> Result<EprbParams, CliError> {
        let eps = positive(self.eps, "eprb.eps")?;
        let n_substeps = self.n_substeps.unwrap_or_else(|| (1.0 / eps).round().max(1.0) as usize);
        let p = EprbParams {
            gamma_alpha_1: self.gamma_alpha_1.value(),
            gamma_alpha_2: self.gamma_alpha_2.value(),
            alpha: self.alpha,
            beta: self.beta,
            n_substeps,
            eps,
        };
        p.validate().map_err(|e| CliError::Config(format!("eprb: {e}")))?;
        Ok(p)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GuidanceMode {
    Marginal,
    Ebbb,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SurrealConfig {
    #[serde(default = "SurrealConfig::default_lattice")]
    pub lattice_size: usize,
    #[serde(default = "SurrealConfig::default_width")]
    pub width: f64,
    #[serde(default = "SurrealConfig::default_offset")]
    pub offset: f64,
    #[serde(default = "SurrealConfig::default_momentum")]
    pub momentum: f64,
    #[serde(default = "SurrealConfig::default_mass")]
    pub mass: f64,
    #[serde(default = "SurrealConfig::default_guidance")]
    pub guidance: GuidanceMode,
    pub eps: f64,
    #[serde(default)]
    pub duration: Option<f64>,
}

impl SurrealConfig {
    fn default_lattice() -> usize {
        SurrealParams::default().lattice_size
    }
    fn default_width() -> f64 {
        SurrealParams::default().width
    }
    fn default_offset() -> f64 {
        SurrealParams::default().offset
    }
    fn default_momentum() -> f64 {
        SurrealParams::default().momentum
    }
    fn default_mass() -> f64 {
        SurrealParams::default().mass
    }
    fn default_guidance() -> GuidanceMode {
        GuidanceMode::Marginal
    }

    pub fn params(&self) -> Result<SurrealParams, CliError> {
        let p = SurrealParams {
            lattice_size: self.lattice_size,
            width: self.width,
            offset: self.offset,
            momentum: self.momentum,
            mass: self.mass,
            guidance: match self.guidance {
                GuidanceMode::Marginal => Guidance::Marginal,
                GuidanceMode::Ebbb => Guidance::Full,
            },
            eps: positive(self.eps, "surreal.eps")?,
            duration: self.duration,
        };
        p.validate().map_err(|e| CliError::Config(format!("surreal: {e}")))?;
        Ok(p)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnsembleBlock {
    pub n: usize,
    pub seed: u64,
    pub workers: usize,
    pub record_every: usize,
    pub max_halvings: u32,
}

impl Default for EnsembleBlock {
    fn default() -> Self {
        Self {
            n: 1000,
            seed: 0,
            workers: 1,
            record_every: 1,
            max_halvings: DEFAULT_MAX_HALVINGS,
        }
    }
}

impl EnsembleBlock {
    pub fn validate(&self) -> Result<(), CliError> {
        for (field, v) in [("ensemble.n", self.n), ("ensemble.workers", self.workers), ("ensemble.record_every", self.record_every)] {
            if v == 0 {
                return Err(CliError::config(field, "must be at least 1"));
            }
        }
        Ok(())
    }

    pub fn ensemble_config(&self) -> EnsembleConfig {
        EnsembleConfig {
            n_trajectories: self.n,
            base_seed: self.seed,
            record_every: self.record_every,
            workers: self.workers,
            max_halvings: self.max_halvings,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputFormat {
    Probabilities,
    Trajectories,
    Summary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputBlock {
    pub directory: PathBuf,
    pub formats: Vec<OutputFormat>,
}

impl Default for OutputBlock {
    fn default() -> Self {
        Self {
            directory: PathBuf::from("out"),
            formats: vec![OutputFormat::Probabilities, OutputFormat::Trajectories, OutputFormat::Summary],
        }
    }
}

/// Model parameters of whichever experiment the file selects.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(untagged)]
pub enum ParamBlock {
    Larmor(LarmorConfig),
    Eprb(EprbConfig),
    Surreal(SurrealConfig),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub experiment: ExperimentKind,
    pub params: ParamBlock,
    pub ensemble: EnsembleBlock,
    pub output: OutputBlock,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    experiment: ExperimentKind,
    #[serde(default)]
    params: Option<Value>,
    #[serde(default)]
    ensemble: EnsembleBlock,
    #[serde(default)]
    output: OutputBlock,
}

fn parse_block<T: for<'de> Deserialize<'de>>(name: &str, value: Value) -> Result<T, CliError> {
    serde_json::from_value(value).map_err(|e| CliError::Config(format!("params ({name}): {e}")))
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let raw: RawConfig = serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        let value = raw.params.unwrap_or_else(|| Value::Object(Default::default()));
        let params = match raw.experiment {
            ExperimentKind::Larmor => ParamBlock::Larmor(parse_block("larmor", value)?),
            ExperimentKind::Eprb => ParamBlock::Eprb(parse_block("eprb", value)?),
            ExperimentKind::Surreal => ParamBlock::Surreal(parse_block("surreal", value)?),
        };
        let cfg = Self {
            experiment: raw.experiment,
            params,
            ensemble: raw.ensemble,
            output: raw.output,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Checks every parameter without building anything.
    pub fn validate(&self) -> Result<(), CliError> {
        match &self.params {
            ParamBlock::Larmor(p) => p.params().map(|_| ()),
            ParamBlock::Eprb(p) => p.params().map(|_| ()),
            ParamBlock::Surreal(p) => p.params().map(|_| ()),
        }?;
        self.ensemble.validate()
    }
}
