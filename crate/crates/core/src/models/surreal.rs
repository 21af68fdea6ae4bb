//! Two mirror-image packets on a periodic lattice, tagged by a binary
//! internal state, crossing at `x = 0`.

use std::f64::consts::PI;
use std::sync::Arc;

use crate::dynamics::Guidance;
use crate::linalg::{c, evolution_from_hamiltonian, tensor_product, ComplexMatrix, ComplexVector};
use crate::space::{ConfigurationSpace, ParticleDims};
use crate::spin::spin_operators;

use super::{invalid, require_positive, substeps_for, Decoder, ExperimentSpec, FramePolicy, ModelError, Stage};

/// Overlap `Σ |ψ₁| |ψ₂|` above which the preparation is reported as overlapping.
pub const OVERLAP_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SurrealParams {
    pub lattice_size: usize,
    /// Gaussian width σ in lattice units.
    pub width: f64,
    /// Packets start centered at `∓x₀`.
    pub offset: f64,
    pub momentum: f64,
    pub mass: f64,
    pub guidance: Guidance,
    pub eps: f64,
    /// Defaults to `2x₀/v`, the time for the packets to swap places.
    pub duration: Option<f64>,
}

impl Default for SurrealParams {
    fn default() -> Self {
        Self {
            lattice_size: 256,
            width: 6.0,
            offset: 40.0,
            momentum: PI / 2.0,
            mass: 1.0,
            guidance: Guidance::Marginal,
            eps: 0.1,
            duration: None,
        }
    }
}

impl SurrealParams {
    /// Lattice group velocity `sin(p)/m`.
    pub fn group_velocity(&self) -> f64 {
        self.momentum.sin() / self.mass
    }

    pub fn duration(&self) -> f64 {
        self.duration.unwrap_or(2.0 * self.offset / self.group_velocity().abs())
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.lattice_size < 4 || self.lattice_size % 2 != 0 {
            return Err(invalid("lattice_size", format!("must be even and at least 4, got {}", self.lattice_size)));
        }
        require_positive("width", self.width)?;
        require_positive("offset", self.offset)?;
        require_positive("mass", self.mass)?;
        require_positive("eps", self.eps)?;
        if !self.momentum.is_finite() {
            return Err(invalid("momentum", "must be finite"));
        }
        if self.offset >= self.lattice_size as f64 / 2.0 {
            return Err(invalid("offset", "packets must start inside the lattice"));
        }
        if self.duration.is_none() && self.group_velocity().abs() < 1e-9 {
            return Err(invalid("momentum", "packets do not move; give an explicit duration"));
        }
        Ok(())
    }
}

/// Position of site `i`: `i - L/2 + 1/2`, symmetric about zero.
pub fn site_position(lattice_size: usize, i: usize) -> f64 {
    i as f64 - lattice_size as f64 / 2.0 + 0.5
}

/// Nearest-neighbour ring Hamiltonian `-(1/2m) Δ`.
pub fn lattice_hamiltonian(lattice_size: usize, mass: f64) -> ComplexMatrix {
    let mut h = ComplexMatrix::zeros(lattice_size, lattice_size);
    for i in 0..lattice_size {
        let j = (i + 1) % lattice_size;
        h[(i, i)] = c(1.0 / mass, 0.0);
        h[(i, j)] = c(-0.5 / mass, 0.0);
        h[(j, i)] = c(-0.5 / mass, 0.0);
    }
    h
}

/// `exp(ipx) exp(-(x - center)²/(4σ²))`, normalized on the lattice.
pub fn lattice_packet(lattice_size: usize, center: f64, width: f64, momentum: f64) -> ComplexVector {
    let v = ComplexVector::from_fn(lattice_size, |i, _| {
        let x = site_position(lattice_size, i);
        let g = (-(x - center).powi(2) / (4.0 * width * width)).exp();
        c(0.0, momentum * x).exp() * g
    });
    let norm = v.norm();
    v / c(norm, 0.0)
}

/// `(ψ_p(x+x₀) ⊗ e₁ + ψ_{-p}(x-x₀) ⊗ e₂)/√2` and the packet overlap.
pub fn surreal_initial_state(params: &SurrealParams) -> (ComplexVector, f64) {
    let l = params.lattice_size;
    let left = lattice_packet(l, -params.offset, params.width, params.momentum);
    let right = lattice_packet(l, params.offset, params.width, -params.momentum);
    let overlap: f64 = left.iter().zip(right.iter()).map(|(a, b)| a.norm() * b.norm()).sum();
    let r = c(1.0 / 2f64.sqrt(), 0.0);
    let mut psi = ComplexVector::zeros(2 * l);
    for i in 0..l {
        psi[2 * i] = left[i] * r;
        psi[2 * i + 1] = right[i] * r;
    }
    // the two internal states are orthogonal, so the norm is exactly 1 up to rounding
    let norm = psi.norm();
    (psi / c(norm, 0.0), overlap)
}

pub fn build_surreal(params: &SurrealParams) -> Result<ExperimentSpec, ModelError> {
    params.validate()?;
    let l = params.lattice_size;
    let duration = params.duration();
    let n = substeps_for(duration, params.eps)?;
    let eps = duration / n as f64;
    let space = ConfigurationSpace::new(vec![ParticleDims::new(l, 2)])?;
    let (psi, overlap) = surreal_initial_state(params);
    if overlap > OVERLAP_TOL {
        log::warn!("surreal packets overlap at t = 0 (overlap {overlap:.3e}); increase offset or reduce width");
    }
    let h = lattice_hamiltonian(l, params.mass);
    let id = ComplexMatrix::identity(2, 2);
    let step = tensor_product(&evolution_from_hamiltonian(&h, eps)?, &id);
    let full = tensor_product(&evolution_from_hamiltonian(&h, duration)?, &id);
    let positions: Vec<String> = (0..l).map(|i| format!("{}", site_position(l, i))).collect();
    let decoders = vec![
        Decoder::full_state(&space, |p| format!("{},{}", site_position(l, p[0].0), p[0].1 + 1)),
        Decoder::from_fn("position", positions, &space, false, |p| p[0].0),
        Decoder::from_fn("internal", vec!["1".into(), "2".into()], &space, true, |p| p[0].1),
        Decoder::from_fn("side", vec!["left".into(), "right".into()], &space, false, |p| {
            usize::from(site_position(l, p[0].0) > 0.0)
        }),
    ];
    let spec = ExperimentSpec {
        name: "surreal".into(),
        space: Arc::new(space),
        spins: vec![spin_operators(1)],
        initial_state: psi,
        schedule: vec![Stage {
            label: "crossing".into(),
            full: Some(Arc::new(full)),
            step: Arc::new(step),
            n_substeps: n,
            eps,
            frames: FramePolicy::Identity,
        }],
        guidance: params.guidance,
        decoders,
    };
    spec.validate()?;
    Ok(spec)
}
