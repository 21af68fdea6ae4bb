//! Two entangled spins precessing in a static field along `z`.

use std::f64::consts::PI;
use std::sync::Arc;

use crate::dynamics::Guidance;
use crate::linalg::{c, evolution_from_hamiltonian, tensor_product, tensor_product_vec, ComplexMatrix, ComplexVector, C64};
use crate::space::{ConfigurationSpace, ParticleDims};
use crate::spin::{rotated_eigenvector, spin_operators, FitMode, Level};

use super::{invalid, substeps_for, Decoder, ExperimentSpec, FramePolicy, ModelError, Stage};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Orientation {
    pub theta: f64,
    pub phi: f64,
}

/// One product term `coefficient · v^{m₁}_{θ₁φ₁} ⊗ v^{m₂}_{θ₂φ₂}` of the
/// preparation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrepTerm {
    pub coefficient: C64,
    pub levels: (Level, Level),
}

#[derive(Debug, Clone, PartialEq)]
pub struct LarmorParams {
    pub twice_s: u32,
    pub mu1: f64,
    pub mu2: f64,
    pub orientations: [Orientation; 2],
    pub terms: Vec<PrepTerm>,
    pub eps: f64,
    /// Defaults to `4π / μ₁`.
    pub duration: Option<f64>,
}

impl Default for LarmorParams {
    fn default() -> Self {
        let up = Level::from_twice(4);
        let down = Level::from_twice(-4);
        Self {
            twice_s: 4,
            mu1: 1.0,
            mu2: 1.5,
            orientations: [
                Orientation {
                    theta: PI / 2.0,
                    phi: PI / 4.0,
                },
                Orientation {
                    theta: PI / 4.0,
                    phi: PI / 8.0,
                },
            ],
            terms: vec![
                PrepTerm {
                    coefficient: c(1.0, 0.0),
                    levels: (up, down),
                },
                PrepTerm {
                    coefficient: c(-2.0, 0.0),
                    levels: (down, up),
                },
            ],
            eps: 0.02,
            duration: None,
        }
    }
}

impl LarmorParams {
    pub fn duration(&self) -> f64 {
        self.duration.unwrap_or(if self.mu1 != 0.0 { 4.0 * PI / self.mu1.abs() } else { 4.0 * PI })
    }
}

/// `H = -μ₁ S_z ⊗ I - μ₂ I ⊗ S_z`.
pub fn larmor_hamiltonian(params: &LarmorParams) -> ComplexMatrix {
    let ops = spin_operators(params.twice_s);
    let id = ComplexMatrix::identity(ops.dim(), ops.dim());
    tensor_product(&ops.sz, &id) * c(-params.mu1, 0.0) + tensor_product(&id, &ops.sz) * c(-params.mu2, 0.0)
}

/// The normalized preparation `Σ_k c_k v^{m₁ₖ}_{θ₁φ₁} ⊗ v^{m₂ₖ}_{θ₂φ₂}`.
pub fn larmor_initial_state(params: &LarmorParams) -> Result<ComplexVector, ModelError> {
    let ops = spin_operators(params.twice_s);
    let [o1, o2] = params.orientations;
    let mut psi = ComplexVector::zeros(ops.dim() * ops.dim());
    for term in &params.terms {
        let a = rotated_eigenvector(&ops, term.levels.0, o1.theta, o1.phi).map_err(|e| invalid("terms", e.to_string()))?;
        let b = rotated_eigenvector(&ops, term.levels.1, o2.theta, o2.phi).map_err(|e| invalid("terms", e.to_string()))?;
        psi += tensor_product_vec(&a, &b) * term.coefficient;
    }
    let norm = psi.norm();
    if !(norm > 1e-12) {
        return Err(invalid("terms", "preparation has zero norm"));
    }
    Ok(psi / c(norm, 0.0))
}

pub fn build_larmor(params: &LarmorParams) -> Result<ExperimentSpec, ModelError> {
    if params.terms.is_empty() {
        return Err(invalid("terms", "at least one preparation term is required"));
    }
    for (field, v) in [("mu1", params.mu1), ("mu2", params.mu2)] {
        if !v.is_finite() {
            return Err(invalid(field, "must be finite"));
        }
    }
    let duration = params.duration();
    let n = substeps_for(duration, params.eps)?;
    let eps = duration / n as f64;
    let ops = spin_operators(params.twice_s);
    let dim = ops.dim();
    let space = ConfigurationSpace::new(vec![ParticleDims::new(1, dim); 2])?;
    let h = larmor_hamiltonian(params);
    let step = evolution_from_hamiltonian(&h, eps)?;
    let full = evolution_from_hamiltonian(&h, duration)?;
    let level_label = |k: usize| ops.level(k).to_string();
    let levels: Vec<String> = (0..dim).map(level_label).collect();
    let decoders = vec![
        Decoder::full_state(&space, |p| format!("({},{})", level_label(p[0].1), level_label(p[1].1))),
        Decoder::from_fn("s1", levels.clone(), &space, true, |p| p[0].1),
        Decoder::from_fn("s2", levels, &space, true, |p| p[1].1),
    ];
    let spec = ExperimentSpec {
        name: "larmor".into(),
        space: Arc::new(space),
        spins: vec![ops.clone(), ops],
        initial_state: larmor_initial_state(params)?,
        schedule: vec![Stage {
            label: "precession".into(),
            full: Some(Arc::new(full)),
            step: Arc::new(step),
            n_substeps: n,
            eps,
            frames: FramePolicy::Adaptive(FitMode::Full),
        }],
        guidance: Guidance::Full,
        decoders,
    };
    spec.validate()?;
    Ok(spec)
}
