//! Two-stage EPRB experiment with the magnet angles and particle positions
//! inside the quantum system.
//!
//! Stage 1 takes each particle from the ready state `(φ₀, x_r)` to the
//! all-set state `γ_α |α, x_a⟩ + γ_β |β, x_a⟩`; stage 2 moves `x_a` to one of
//! the measured positions `x_{φ±}` while projecting the spin onto `|φ±⟩`.
//! Both particles start in the spin singlet.

use std::f64::consts::PI;
use std::sync::Arc;

use crate::dynamics::Guidance;
use crate::linalg::{c, tensor_product, tensor_product_all, unitary_root_with, BranchPolicy, ComplexMatrix, ComplexVector, C64};
use crate::space::{ConfigurationSpace, ParticleDims};
use crate::spin::{spin_operators, FitMode};

use super::{invalid, require_positive, Decoder, ExperimentSpec, FramePolicy, ModelError, Stage};

/// Magnet angle index in stage 1.
pub mod stage1 {
    pub const PHI0: usize = 0;
    pub const ALPHA: usize = 1;
    pub const BETA: usize = 2;
    pub const X_READY: usize = 0;
    pub const X_ALLSET: usize = 1;
    pub const N_PHI: usize = 3;
    pub const N_X: usize = 2;
}

/// Magnet angle and position indices in stage 2.
pub mod stage2 {
    pub const ALPHA: usize = 0;
    pub const BETA: usize = 1;
    pub const X_ALLSET: usize = 0;
    pub const X_ALPHA_PLUS: usize = 1;
    pub const X_ALPHA_MINUS: usize = 2;
    pub const X_BETA_PLUS: usize = 3;
    pub const X_BETA_MINUS: usize = 4;
    pub const N_PHI: usize = 2;
    pub const N_X: usize = 5;
}

/// Spin index of `|0+⟩` and `|0-⟩`.
pub const SPIN_PLUS: usize = 0;
pub const SPIN_MINUS: usize = 1;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EprbParams {
    pub gamma_alpha_1: C64,
    /// Particle 2; the default `√0.79` is approximate.
    pub gamma_alpha_2: C64,
    pub alpha: f64,
    pub beta: f64,
    pub n_substeps: usize,
    pub eps: f64,
}

impl Default for EprbParams {
    fn default() -> Self {
        Self {
            gamma_alpha_1: c((PI / 5.0).sin(), 0.0),
            gamma_alpha_2: c(0.79f64.sqrt(), 0.0),
            alpha: PI / 5.0,
            beta: 3.0 * PI / 5.0,
            n_substeps: 50,
            eps: 0.02,
        }
    }
}

impl EprbParams {
    pub fn validate(&self) -> Result<(), ModelError> {
        for (field, g) in [("gamma_alpha_1", self.gamma_alpha_1), ("gamma_alpha_2", self.gamma_alpha_2)] {
            if !(g.re.is_finite() && g.im.is_finite()) || g.norm() > 1.0 + 1e-12 {
                return Err(invalid(field, format!("|γ| must be at most 1, got {}", g.norm())));
            }
        }
        for (field, a) in [("alpha", self.alpha), ("beta", self.beta)] {
            if !a.is_finite() {
                return Err(invalid(field, "must be finite"));
            }
        }
        if self.n_substeps == 0 {
            return Err(invalid("n_substeps", "must be at least 1"));
        }
        require_positive("eps", self.eps)?;
        if (self.n_substeps as f64 * self.eps - 1.0).abs() > 1e-9 {
            return Err(invalid(
                "eps",
                format!("n_substeps × eps must equal the stage duration 1, got {}", self.n_substeps as f64 * self.eps),
            ));
        }
        Ok(())
    }

    pub fn gammas(&self, particle: usize) -> (C64, C64) {
        let g = if particle == 0 { self.gamma_alpha_1 } else { self.gamma_alpha_2 };
        (g, c((1.0 - g.norm_sqr()).max(0.0).sqrt(), 0.0))
    }

    pub fn angle(&self, phi_index: usize) -> f64 {
        if phi_index == stage2::ALPHA {
            self.alpha
        } else {
            self.beta
        }
    }
}

/// Magnet-angle operator of stage 1 in the basis `(φ₀, α, β)`.
pub fn stage1_phi_operator(gamma_alpha: C64, gamma_beta: C64) -> ComplexMatrix {
    let z = c(0.0, 0.0);
    ComplexMatrix::from_row_slice(
        3,
        3,
        &[z, z, c(1.0, 0.0), gamma_alpha, -gamma_beta.conj(), z, gamma_beta, gamma_alpha.conj(), z],
    )
}

/// Position swap `x_r ↔ x_a`.
pub fn stage1_x_operator() -> ComplexMatrix {
    let (z, o) = (c(0.0, 0.0), c(1.0, 0.0));
    ComplexMatrix::from_row_slice(2, 2, &[z, o, o, z])
}

fn single_particle_stage1(params: &EprbParams, particle: usize, n: usize) -> Result<(ComplexMatrix, ComplexMatrix), ModelError> {
    let (ga, gb) = params.gammas(particle);
    let phi = stage1_phi_operator(ga, gb);
    let x = stage1_x_operator();
    let id = ComplexMatrix::identity(2, 2);
    let full = tensor_product_all([&phi, &x, &id]);
    let phi_root = unitary_root_with(&phi, n, BranchPolicy::ClosedAtPi)?;
    let x_root = unitary_root_with(&x, n, BranchPolicy::ClosedAtPi)?;
    let step = tensor_product_all([&phi_root, &x_root, &id]);
    Ok((full, step))
}

/// `|φ+⟩ = (cos φ/2, sin φ/2)`, `|φ-⟩ = (sin φ/2, -cos φ/2)`.
pub fn spin_projection(phi: f64, plus: bool) -> ComplexVector {
    let (s, co) = (phi / 2.0).sin_cos();
    if plus {
        ComplexVector::from_vec(vec![c(co, 0.0), c(s, 0.0)])
    } else {
        ComplexVector::from_vec(vec![c(s, 0.0), c(-co, 0.0)])
    }
}

/// Swap `x_a ↔ x_k` on the five stage-2 positions.
pub fn stage2_x_operator(k: usize) -> ComplexMatrix {
    let mut u = ComplexMatrix::identity(stage2::N_X, stage2::N_X);
    u[(stage2::X_ALLSET, stage2::X_ALLSET)] = c(0.0, 0.0);
    u[(k, k)] = c(0.0, 0.0);
    u[(k, stage2::X_ALLSET)] = c(1.0, 0.0);
    u[(stage2::X_ALLSET, k)] = c(1.0, 0.0);
    u
}

/// `U⁽ᶠ⁾ = Σ_{φ,±} P^φ ⊗ U^x_{x_{φ±}} ⊗ |φ±⟩⟨φ±|` on the 20-dim particle space.
pub fn stage2_operator(params: &EprbParams) -> ComplexMatrix {
    let mut u = ComplexMatrix::zeros(20, 20);
    for phi in [stage2::ALPHA, stage2::BETA] {
        let mut proj = ComplexMatrix::zeros(2, 2);
        proj[(phi, phi)] = c(1.0, 0.0);
        let angle = params.angle(phi);
        let targets = if phi == stage2::ALPHA {
            [(stage2::X_ALPHA_PLUS, true), (stage2::X_ALPHA_MINUS, false)]
        } else {
            [(stage2::X_BETA_PLUS, true), (stage2::X_BETA_MINUS, false)]
        };
        for (k, plus) in targets {
            let v = spin_projection(angle, plus);
            let spin = &v * v.adjoint();
            u += tensor_product_all([&proj, &stage2_x_operator(k), &spin]);
        }
    }
    u
}

fn singlet_pair(
    space: &ConfigurationSpace,
    amplitude: impl Fn(usize, usize) -> C64,
    n_ext: usize,
) -> ComplexVector {
    // Σ a(e₁) a'(e₂) |e₁⟩|e₂⟩ ⊗ (|+-⟩ - |-+⟩)/√2
    let r = 1.0 / 2f64.sqrt();
    let mut psi = ComplexVector::zeros(space.total_dim());
    for e1 in 0..n_ext {
        for e2 in 0..n_ext {
            let a = amplitude(e1, e2);
            if a == c(0.0, 0.0) {
                continue;
            }
            let up_down = space.encode(&[(e1, SPIN_PLUS), (e2, SPIN_MINUS)]).unwrap();
            let down_up = space.encode(&[(e1, SPIN_MINUS), (e2, SPIN_PLUS)]).unwrap();
            psi[up_down] += a * r;
            psi[down_up] -= a * r;
        }
    }
    psi
}

pub fn stage1_space() -> ConfigurationSpace {
    let p = ParticleDims::new(stage1::N_PHI * stage1::N_X, 2);
    ConfigurationSpace::new(vec![p, p]).expect("fixed dims")
}

pub fn stage2_space() -> ConfigurationSpace {
    let p = ParticleDims::new(stage2::N_PHI * stage2::N_X, 2);
    ConfigurationSpace::new(vec![p, p]).expect("fixed dims")
}

/// Ready state: both particles at `(φ₀, x_r)` in the spin singlet.
pub fn ready_state(space: &ConfigurationSpace) -> ComplexVector {
    let ready = stage1::PHI0 * stage1::N_X + stage1::X_READY;
    singlet_pair(space, |a, b| if a == ready && b == ready { c(1.0, 0.0) } else { c(0.0, 0.0) }, stage1::N_PHI * stage1::N_X)
}

/// All-set state on the stage-2 space.
pub fn allset_state(params: &EprbParams) -> ComplexVector {
    let space = stage2_space();
    let (a1, b1) = params.gammas(0);
    let (a2, b2) = params.gammas(1);
    let amp = |e: usize, ga: C64, gb: C64| {
        let (phi, x) = (e / stage2::N_X, e % stage2::N_X);
        match (phi, x) {
            (stage2::ALPHA, stage2::X_ALLSET) => ga,
            (stage2::BETA, stage2::X_ALLSET) => gb,
            _ => c(0.0, 0.0),
        }
    };
    singlet_pair(&space, |e1, e2| amp(e1, a1, b1) * amp(e2, a2, b2), stage2::N_PHI * stage2::N_X)
}

/// Stage-2 external index of a stage-1 external index, when it survives the
/// reduction (`φ ∈ {α, β}` and `x = x_a`).
pub fn stage1_to_stage2_external(e: usize) -> Option<usize> {
    let (phi, x) = (e / stage1::N_X, e % stage1::N_X);
    if x != stage1::X_ALLSET {
        return None;
    }
    match phi {
        stage1::ALPHA => Some(stage2::ALPHA * stage2::N_X + stage2::X_ALLSET),
        stage1::BETA => Some(stage2::BETA * stage2::N_X + stage2::X_ALLSET),
        _ => None,
    }
}

/// Composite stage-2 index of a composite stage-1 index, if it survives.
pub fn stage1_to_stage2_index(n: usize) -> Option<usize> {
    let s1 = stage1_space();
    let s2 = stage2_space();
    let parts = s1.decode(n).ok()?;
    let mapped: Option<Vec<(usize, usize)>> = parts
        .iter()
        .map(|&(e, s)| stage1_to_stage2_external(e).map(|e2| (e2, s)))
        .collect();
    s2.encode(&mapped?).ok()
}

/// Restricts a stage-1 state onto the stage-2 space. Returns the restricted
/// (renormalized) state and the weight that was dropped.
pub fn restrict_allset(stage1_state: &ComplexVector) -> (ComplexVector, f64) {
    let s2 = stage2_space();
    let mut out = ComplexVector::zeros(s2.total_dim());
    let mut kept = 0.0;
    for (n, z) in stage1_state.iter().enumerate() {
        if let Some(m) = stage1_to_stage2_index(n) {
            out[m] = *z;
            kept += z.norm_sqr();
        }
    }
    let total = stage1_state.norm_squared();
    if kept > 0.0 {
        out /= c(kept.sqrt(), 0.0);
    }
    (out, (total - kept).max(0.0))
}

fn stage1_labels() -> Vec<String> {
    let phis = ["phi0", "alpha", "beta"];
    let xs = ["x_r", "x_a"];
    phis.iter().flat_map(|p| xs.iter().map(move |x| format!("{p},{x}"))).collect()
}

fn stage2_phi_labels() -> Vec<String> {
    vec!["alpha".into(), "beta".into()]
}

fn stage2_x_labels() -> Vec<String> {
    ["x_a", "x_alpha+", "x_alpha-", "x_beta+", "x_beta-"].iter().map(|s| s.to_string()).collect()
}

fn spin_labels() -> Vec<String> {
    vec!["+".into(), "-".into()]
}

pub fn build_eprb_stage1(params: &EprbParams) -> Result<ExperimentSpec, ModelError> {
    params.validate()?;
    let n = params.n_substeps;
    let (full1, step1) = single_particle_stage1(params, 0, n)?;
    let (full2, step2) = single_particle_stage1(params, 1, n)?;
    let space = stage1_space();
    let labels = stage1_labels();
    let mut decoders = vec![Decoder::full_state(&space, |p| {
        let l = stage1_labels();
        let s = spin_labels();
        format!("{},{}|{},{}", l[p[0].0], s[p[0].1], l[p[1].0], s[p[1].1])
    })];
    for particle in 0..2 {
        decoders.push(Decoder::from_fn(format!("phi_x_{}", particle + 1), labels.clone(), &space, false, move |p| p[particle].0));
        decoders.push(Decoder::from_fn(format!("sigma_{}", particle + 1), spin_labels(), &space, true, move |p| p[particle].1));
    }
    let spec = ExperimentSpec {
        name: "eprb-stage1".into(),
        initial_state: ready_state(&space),
        space: Arc::new(space),
        spins: vec![spin_operators(1), spin_operators(1)],
        schedule: vec![Stage {
            label: "ready-to-allset".into(),
            full: Some(Arc::new(tensor_product(&full1, &full2))),
            step: Arc::new(tensor_product(&step1, &step2)),
            n_substeps: n,
            eps: params.eps,
            frames: FramePolicy::Static(FitMode::PolarOnly),
        }],
        guidance: Guidance::Full,
        decoders,
    };
    spec.validate()?;
    Ok(spec)
}

/// Stage 2 from a given state on the 400-dim space (normally [`allset_state`]
/// or [`restrict_allset`] of a stage-1 run).
pub fn build_eprb_stage2(params: &EprbParams, allset: &ComplexVector) -> Result<ExperimentSpec, ModelError> {
    params.validate()?;
    let space = stage2_space();
    if allset.len() != space.total_dim() {
        return Err(invalid("allset", format!("expected dimension {}, got {}", space.total_dim(), allset.len())));
    }
    let single = stage2_operator(params);
    let root = unitary_root_with(&single, params.n_substeps, BranchPolicy::ClosedAtPi)?;
    let mut decoders = vec![Decoder::full_state(&space, |p| {
        let (phis, xs, s) = (stage2_phi_labels(), stage2_x_labels(), spin_labels());
        let one = |(e, sp): (usize, usize)| format!("{},{},{}", phis[e / stage2::N_X], xs[e % stage2::N_X], s[sp]);
        format!("{}|{}", one(p[0]), one(p[1]))
    })];
    for particle in 0..2 {
        let i = particle + 1;
        decoders.push(Decoder::from_fn(format!("phi_{i}"), stage2_phi_labels(), &space, false, move |p| p[particle].0 / stage2::N_X));
        decoders.push(Decoder::from_fn(format!("x_{i}"), stage2_x_labels(), &space, false, move |p| p[particle].0 % stage2::N_X));
        decoders.push(Decoder::from_fn(format!("sigma_{i}"), spin_labels(), &space, true, move |p| p[particle].1));
    }
    let spec = ExperimentSpec {
        name: "eprb-stage2".into(),
        initial_state: allset.clone(),
        space: Arc::new(space),
        spins: vec![spin_operators(1), spin_operators(1)],
        schedule: vec![Stage {
            label: "allset-to-measured".into(),
            full: Some(Arc::new(tensor_product(&single, &single))),
            step: Arc::new(tensor_product(&root, &root)),
            n_substeps: params.n_substeps,
            eps: params.eps,
            frames: FramePolicy::Adaptive(FitMode::PolarOnly),
        }],
        guidance: Guidance::Full,
        decoders,
    };
    spec.validate()?;
    Ok(spec)
}

/// Spin sign recorded by a stage-2 position: `+1` for `x_{φ+}`, `-1` for
/// `x_{φ-}`, `None` while still at `x_a`.
pub fn position_sign(x: usize) -> Option<i8> {
    match x {
        stage2::X_ALPHA_PLUS | stage2::X_BETA_PLUS => Some(1),
        stage2::X_ALPHA_MINUS | stage2::X_BETA_MINUS => Some(-1),
        _ => None,
    }
}

/// Magnet angle a measured position belongs to.
pub fn position_device(x: usize) -> Option<usize> {
    match x {
        stage2::X_ALPHA_PLUS | stage2::X_ALPHA_MINUS => Some(stage2::ALPHA),
        stage2::X_BETA_PLUS | stage2::X_BETA_MINUS => Some(stage2::BETA),
        _ => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{matrix_power, max_abs, max_abs_vec, unitarity_error};

    #[test]
    fn stage1_operators_are_unitary_and_prepare_allset() {
        let params = EprbParams::default();
        let (ga, gb) = params.gammas(0);
        let phi = stage1_phi_operator(ga, gb);
        assert!(unitarity_error(&phi) < 1e-12);
        let (full, step) = single_particle_stage1(&params, 0, 50).unwrap();
        assert!(unitarity_error(&full) < 1e-12);
        assert!(max_abs(&(matrix_power(&step, 50) - &full)) < 1e-8);
        // |φ₀, x_r, +⟩ ↦ γ_α |α, x_a, +⟩ + γ_β |β, x_a, +⟩
        let mut ready = ComplexVector::zeros(12);
        ready[0] = c(1.0, 0.0);
        let out = &full * ready;
        let idx = |phi: usize, x: usize| (phi * 2 + x) * 2;
        assert!((out[idx(stage1::ALPHA, stage1::X_ALLSET)] - ga).norm() < 1e-14);
        assert!((out[idx(stage1::BETA, stage1::X_ALLSET)] - gb).norm() < 1e-14);
        assert!((ga.norm_sqr() - 0.3455).abs() < 1e-4);
    }

    #[test]
    fn stage1_final_state_is_allset() {
        let params = EprbParams::default();
        let spec = build_eprb_stage1(&params).unwrap();
        let stage = &spec.schedule[0];
        let final_state = &**stage.full.as_ref().unwrap() * &spec.initial_state;
        let (restricted, dropped) = restrict_allset(&final_state);
        assert!(dropped < 1e-14);
        assert!(max_abs_vec(&(restricted - allset_state(&params))) < 1e-12);
    }

    #[test]
    fn stage2_operator_is_unitary() {
        let params = EprbParams::default();
        let u = stage2_operator(&params);
        assert!(unitarity_error(&u) < 1e-12);
        let spec = build_eprb_stage2(&params, &allset_state(&params)).unwrap();
        let stage = &spec.schedule[0];
        assert!(max_abs(&(matrix_power(&stage.step, 50) - &**stage.full.as_ref().unwrap())) < 1e-8);
    }

    #[test]
    fn projections_match_half_angles() {
        let phi = 1.1;
        let zero_plus = ComplexVector::from_vec(vec![c(1.0, 0.0), c(0.0, 0.0)]);
        let zero_minus = ComplexVector::from_vec(vec![c(0.0, 0.0), c(1.0, 0.0)]);
        let plus = spin_projection(phi, true);
        let minus = spin_projection(phi, false);
        assert!((plus.dotc(&zero_plus) - c((phi / 2.0).cos(), 0.0)).norm() < 1e-15);
        assert!((plus.dotc(&zero_minus) - c((phi / 2.0).sin(), 0.0)).norm() < 1e-15);
        assert!((minus.dotc(&zero_plus) - c((phi / 2.0).sin(), 0.0)).norm() < 1e-15);
        assert!((minus.dotc(&zero_minus) - c(-(phi / 2.0).cos(), 0.0)).norm() < 1e-15);
    }

    #[test]
    fn conditional_final_state_coefficients() {
        let params = EprbParams::default();
        let spec = build_eprb_stage2(&params, &allset_state(&params)).unwrap();
        let final_state = &**spec.schedule[0].full.as_ref().unwrap() * &spec.initial_state;
        let (a, b) = (params.alpha, params.beta);
        let (ga, _) = params.gammas(0);
        let (_, gb2) = params.gammas(1);
        let weight = ga * gb2;
        let d = (a - b) / 2.0;
        let r = 1.0 / 2f64.sqrt();
        let cases = [
            (stage2::X_ALPHA_PLUS, SPIN_PLUS, stage2::X_BETA_PLUS, SPIN_PLUS, -d.sin()),
            (stage2::X_ALPHA_PLUS, SPIN_PLUS, stage2::X_BETA_MINUS, SPIN_MINUS, -d.cos()),
            (stage2::X_ALPHA_MINUS, SPIN_MINUS, stage2::X_BETA_PLUS, SPIN_PLUS, d.cos()),
            (stage2::X_ALPHA_MINUS, SPIN_MINUS, stage2::X_BETA_MINUS, SPIN_MINUS, -d.sin()),
        ];
        let space = &spec.space;
        let mut total = 0.0;
        for (x1, _, x2, _, coeff) in cases {
            // amplitude in the rotated spin basis: project onto |α±⟩ ⊗ |β±⟩
            let s1 = spin_projection(a, x1 == stage2::X_ALPHA_PLUS);
            let s2 = spin_projection(b, x2 == stage2::X_BETA_PLUS);
            let mut amp = c(0.0, 0.0);
            for i in 0..2 {
                for j in 0..2 {
                    let n = space
                        .encode(&[(stage2::ALPHA * 5 + x1, i), (stage2::BETA * 5 + x2, j)])
                        .unwrap();
                    amp += s1[i].conj() * s2[j].conj() * final_state[n];
                }
            }
            assert!((amp - weight * coeff * r).norm() < 1e-12, "{amp} vs {}", coeff * r);
            total += amp.norm_sqr();
        }
        assert!((total - weight.norm_sqr()).abs() < 1e-12);
    }

    #[test]
    fn allset_conditional_spin_is_singlet() {
        let params = EprbParams::default();
        let space = stage2_space();
        let psi = allset_state(&params);
        for phi1 in 0..2 {
            for phi2 in 0..2 {
                let x = space.external_of(space.encode(&[(phi1 * 5, 0), (phi2 * 5, 0)]).unwrap());
                let st = crate::spin::conditional_spin_state(&psi, &space, x).unwrap();
                let r = 1.0 / 2f64.sqrt();
                let singlet = ComplexVector::from_vec(vec![c(0., 0.), c(r, 0.), c(-r, 0.), c(0., 0.)]);
                assert!((st.amplitudes.dotc(&singlet).norm() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn index_mapping_between_stages() {
        let s1 = stage1_space();
        let n = s1.encode(&[(stage1::BETA * 2 + stage1::X_ALLSET, 1), (stage1::ALPHA * 2 + stage1::X_ALLSET, 0)]).unwrap();
        let m = stage1_to_stage2_index(n).unwrap();
        let parts = stage2_space().decode(m).unwrap();
        assert_eq!(parts, vec![(stage2::BETA * 5, 1), (stage2::ALPHA * 5, 0)]);
        let ready = s1.encode(&[(0, 0), (0, 1)]).unwrap();
        assert_eq!(stage1_to_stage2_index(ready), None);
    }

    #[test]
    fn parameter_validation() {
        let mut p = EprbParams::default();
        p.gamma_alpha_1 = c(1.2, 0.0);
        assert!(matches!(p.validate(), Err(ModelError::InvalidParameter { field: "gamma_alpha_1", .. })));
        let mut p = EprbParams::default();
        p.eps = 0.5;
        assert!(p.validate().is_err());
        p.n_substeps = 2;
        assert!(p.validate().is_ok());
    }
}
