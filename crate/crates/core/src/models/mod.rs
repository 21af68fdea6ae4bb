//! Experiment builders: state space, initial state, evolution schedule and
//! the observables decoded from beable positions.

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::Guidance;
use crate::linalg::{is_normalized, unitarity_error, ComplexMatrix, ComplexVector, LinalgError, UNITARY_TOL};
use crate::space::{ConfigurationSpace, SpaceError};
use crate::spin::{FitMode, SpinOperators};

pub mod eprb;
pub mod larmor;
pub mod surreal;

pub use eprb::{build_eprb_stage1, build_eprb_stage2, EprbParams};
pub use larmor::{build_larmor, LarmorParams};
pub use surreal::{build_surreal, SurrealParams};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("invalid parameter `{field}`: {reason}")]
    InvalidParameter { field: &'static str, reason: String },
    #[error("stage `{stage}`: step operator is not unitary (error {error:e})")]
    NonUnitaryStage { stage: String, error: f64 },
    #[error("initial state is not normalized")]
    NotNormalized,
    #[error(transparent)]
    Space(#[from] SpaceError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

pub(crate) fn invalid(field: &'static str, reason: impl Into<String>) -> ModelError {
    ModelError::InvalidParameter {
        field,
        reason: reason.into(),
    }
}

/// How spin bases are chosen during a stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FramePolicy {
    /// Unrotated `S_z` bases throughout.
    Identity,
    /// One fit per configuration, made at the first time the configuration
    /// carries weight, then held for the rest of the stage.
    Static(FitMode),
    /// Refit at every time step from the current wave function.
    Adaptive(FitMode),
}

#[derive(Debug, Clone)]
pub struct Stage {
    pub label: String,
    /// Operator over the whole stage, when known in closed form.
    pub full: Option<Arc<ComplexMatrix>>,
    /// Operator applied at every sub-step.
    pub step: Arc<ComplexMatrix>,
    pub n_substeps: usize,
    pub eps: f64,
    pub frames: FramePolicy,
}

impl Stage {
    pub fn duration(&self) -> f64 {
        self.eps * self.n_substeps as f64
    }
}

/// Maps composite indices to labelled outcomes.
#[derive(Debug, Clone, PartialEq)]
pub struct Decoder {
    pub name: String,
    pub labels: Vec<String>,
    /// Label index for every composite index.
    pub map: Vec<u32>,
    /// Whether the outcome depends on spin indices (meaningless under marginal guidance).
    pub uses_spin: bool,
}

impl Decoder {
    pub fn from_fn<F>(
        name: impl Into<String>,
        labels: Vec<String>,
        space: &ConfigurationSpace,
        uses_spin: bool,
        f: F,
    ) -> Self
    where
        F: Fn(&[(usize, usize)]) -> usize,
    {
        let map = (0..space.total_dim())
            .map(|n| f(&space.decode(n).expect("index in range")) as u32)
            .collect();
        Self {
            name: name.into(),
            labels,
            map,
            uses_spin,
        }
    }

    /// One label per composite index.
    pub fn full_state(space: &ConfigurationSpace, label: impl Fn(&[(usize, usize)]) -> String) -> Self {
        let labels = (0..space.total_dim())
            .map(|n| label(&space.decode(n).expect("index in range")))
            .collect();
        Self {
            name: "state".into(),
            labels,
            map: (0..space.total_dim() as u32).collect(),
            uses_spin: true,
        }
    }

    pub fn decode(&self, n: usize) -> usize {
        self.map[n] as usize
    }

    /// Sums a distribution over composite indices into label probabilities.
    pub fn aggregate(&self, p: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.labels.len()];
        for (n, &pn) in p.iter().enumerate() {
            out[self.map[n] as usize] += pn;
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentSpec {
    pub name: String,
    pub space: Arc<ConfigurationSpace>,
    /// Spin operators per particle, used when fitting frames.
    pub spins: Vec<SpinOperators>,
    pub initial_state: ComplexVector,
    pub schedule: Vec<Stage>,
    pub guidance: Guidance,
    pub decoders: Vec<Decoder>,
}

impl ExperimentSpec {
    pub fn n_steps(&self) -> usize {
        self.schedule.iter().map(|s| s.n_substeps).sum()
    }

    /// Times of all grid points, starting at 0.
    pub fn times(&self) -> Vec<f64> {
        let mut t = 0.0;
        let mut out = vec![0.0];
        for stage in &self.schedule {
            for k in 1..=stage.n_substeps {
                out.push(t + stage.eps * k as f64);
            }
            t += stage.duration();
        }
        out
    }

    /// `(stage, eps, frame policy)` for each step.
    pub fn step_plan(&self) -> Vec<(usize, f64, FramePolicy)> {
        self.schedule
            .iter()
            .enumerate()
            .flat_map(|(i, s)| std::iter::repeat((i, s.eps, s.frames)).take(s.n_substeps))
            .collect()
    }

    pub fn decoder(&self, name: &str) -> Option<&Decoder> {
        self.decoders.iter().find(|d| d.name == name)
    }

    /// Checks normalization, unitarity of every stage operator and decoder sizes.
    pub fn validate(&self) -> Result<(), ModelError> {
        let n = self.space.total_dim();
        if self.initial_state.len() != n || !is_normalized(&self.initial_state) {
            return Err(ModelError::NotNormalized);
        }
        for stage in &self.schedule {
            if stage.n_substeps == 0 {
                return Err(invalid("n_substeps", "must be at least 1"));
            }
            if !(stage.eps > 0.0) {
                return Err(invalid("eps", "must be positive"));
            }
            for op in std::iter::once(&stage.step).chain(stage.full.iter()) {
                if op.nrows() != n || op.ncols() != n {
                    return Err(invalid("schedule", "operator dimension does not match the space"));
                }
                let error = unitarity_error(op);
                if error > UNITARY_TOL {
                    return Err(ModelError::NonUnitaryStage {
                        stage: stage.label.clone(),
                        error,
                    });
                }
            }
        }
        for d in &self.decoders {
            if d.map.len() != n || d.map.iter().any(|&l| l as usize >= d.labels.len()) {
                return Err(invalid("decoders", format!("decoder `{}` is malformed", d.name)));
            }
        }
        Ok(())
    }
}

pub(crate) fn require_positive(field: &'static str, value: f64) -> Result<(), ModelError> {
    if value.is_finite() && value > 0.0 {
        Ok(())
    } else {
        Err(invalid(field, format!("must be a positive number, got {value}")))
    }
}

/// Number of sub-steps covering `duration` with step `eps`; the step is then
/// `duration / n`.
pub(crate) fn substeps_for(duration: f64, eps: f64) -> Result<usize, ModelError> {
    require_positive("eps", eps)?;
    require_positive("duration", duration)?;
    let n = (duration / eps).round().max(1.0);
    if n > 1e7 {
        return Err(invalid("eps", "too many sub-steps"));
    }
    Ok(n as usize)
}
