//! Self-adjusting spin representation.
//!
//! At every external configuration `x` the spin block of the wave function is
//! renormalized into a conditional spin state, approximated by a product of
//! single-particle spin states, and each factor is matched against the
//! eigenbasis of a rotated `S_z`. The resulting per-particle rotations define
//! the basis in which spin beables take their values.
//!
//! Conventions:
//! * `S_z` is diagonal with entries `s, s-1, …, -s`; level index `k` holds
//!   `m = s - k`.
//! * The rotation with Euler angles `(θ, φ)` is `R = exp(-iφS_z) exp(-iθS_y)`
//!   and its columns are the rotated eigenvectors `v^m_{θφ}`.
//! * Since `v^{-m}_{π-θ, φ+π}` equals `v^m_{θφ}` up to a phase, the full fit
//!   reports the representative with `m ≥ 0` (and `θ ≤ π/2` when `m = 0`).

use std::f64::consts::{FRAC_PI_2, PI, TAU};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{
    c, hermitian_eig, hermitian_function, tensor_product, ComplexMatrix, ComplexVector, HermitianEigen,
    LinalgError, C64,
};
use crate::space::ConfigurationSpace;

/// Conditional spin blocks with less weight than this are not fitted.
pub const CONDITIONAL_FLOOR: f64 = 1e-12;
/// Relative gap below which the top Schmidt weight counts as degenerate.
pub const DEGENERACY_TOL: f64 = 1e-9;
/// Below this distance from a pole the azimuth is reported as zero.
pub const POLE_GAUGE: f64 = 1e-9;

const GRID_THETA: usize = 64;
const GRID_PHI: usize = 64;
const POLAR_GRID: usize = 256;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SpinBasisError {
    #[error("conditional spin block at configuration {configuration} has weight {weight:e}")]
    DegenerateConfiguration { configuration: usize, weight: f64 },
    #[error("frames are only supported for one or two particles, got {0}")]
    UnsupportedParticleCount(usize),
    #[error("particle {particle} has {internal} internal states but its spin operators have dimension {spin_dim}")]
    DimensionMismatch {
        particle: usize,
        internal: usize,
        spin_dim: usize,
    },
    #[error("spin level 2m = {twice_m} is not allowed for 2s = {twice_s}")]
    InvalidLevel { twice_m: i32, twice_s: u32 },
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

/// Magnetic quantum number stored as `2m` so half-integers stay exact.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Level {
    pub twice_m: i32,
}

impl Level {
    pub fn from_twice(twice_m: i32) -> Self {
        Self { twice_m }
    }

    pub fn m(&self) -> f64 {
        self.twice_m as f64 / 2.0
    }
}

impl std::fmt::Display for Level {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.twice_m % 2 == 0 {
            write!(f, "{:+}", self.twice_m / 2)
        } else {
            write!(f, "{:+}/2", self.twice_m)
        }
    }
}

#[derive(Debug, Clone)]
pub struct SpinOperators {
    twice_s: u32,
    pub sx: ComplexMatrix,
    pub sy: ComplexMatrix,
    pub sz: ComplexMatrix,
    sy_eig: HermitianEigen,
}

/// Builds the spin matrices for spin `twice_s / 2` from the ladder operators.
pub fn spin_operators(twice_s: u32) -> SpinOperators {
    let dim = twice_s as usize + 1;
    let s = twice_s as f64 / 2.0;
    let m_of = |k: usize| s - k as f64;
    let mut raise = ComplexMatrix::zeros(dim, dim);
    for k in 1..dim {
        let m = m_of(k);
        raise[(k - 1, k)] = c((s * (s + 1.0) - m * (m + 1.0)).sqrt(), 0.0);
    }
    let lower = raise.adjoint();
    let sx = (&raise + &lower) * c(0.5, 0.0);
    let sy = (&raise - &lower) * c(0.0, -0.5);
    let sz = ComplexMatrix::from_fn(dim, dim, |i, j| if i == j { c(m_of(i), 0.0) } else { c(0.0, 0.0) });
    let sy_eig = hermitian_eig(&sy).expect("S_y is Hermitian by construction");
    SpinOperators {
        twice_s,
        sx,
        sy,
        sz,
        sy_eig,
    }
}

impl SpinOperators {
    pub fn twice_s(&self) -> u32 {
        self.twice_s
    }

    pub fn s(&self) -> f64 {
        self.twice_s as f64 / 2.0
    }

    pub fn dim(&self) -> usize {
        self.twice_s as usize + 1
    }

    /// Level held by basis index `k`.
    pub fn level(&self, k: usize) -> Level {
        Level::from_twice(self.twice_s as i32 - 2 * k as i32)
    }

    pub fn index_of(&self, level: Level) -> Result<usize, SpinBasisError> {
        let ts = self.twice_s as i32;
        let diff = ts - level.twice_m;
        if level.twice_m.abs() > ts || diff % 2 != 0 {
            return Err(SpinBasisError::InvalidLevel {
                twice_m: level.twice_m,
                twice_s: self.twice_s,
            });
        }
        Ok((diff / 2) as usize)
    }

    pub fn levels(&self) -> impl Iterator<Item = Level> + '_ {
        (0..self.dim()).map(|k| self.level(k))
    }

    /// `exp(-iθ S_y)`, real up to rounding.
    pub fn polar_rotation(&self, theta: f64) -> ComplexMatrix {
        hermitian_function(&self.sy_eig, |lambda| C64::from_polar(1.0, -theta * lambda))
    }

    /// `R(θ, φ) = exp(-iφ S_z) exp(-iθ S_y)`.
    pub fn rotation(&self, theta: f64, phi: f64) -> ComplexMatrix {
        let mut r = self.polar_rotation(theta);
        for i in 0..self.dim() {
            let w = C64::from_polar(1.0, -phi * self.level(i).m());
            for j in 0..self.dim() {
                r[(i, j)] *= w;
            }
        }
        r
    }

    /// Column `k` of `exp(-iθ S_y)`, computed without forming the matrix.
    fn polar_column(&self, theta: f64, k: usize) -> ComplexVector {
        let w = &self.sy_eig.vectors;
        let n = self.dim();
        let coeffs = ComplexVector::from_fn(n, |j, _| {
            w[(k, j)].conj() * C64::from_polar(1.0, -theta * self.sy_eig.values[j])
        });
        w * coeffs
    }

    /// `⟨v^m_{θφ}, ψ⟩` for the level at basis index `k`.
    fn overlap(&self, psi: &ComplexVector, k: usize, theta: f64, phi: f64) -> C64 {
        let col = self.polar_column(theta, k);
        (0..self.dim())
            .map(|j| C64::from_polar(1.0, phi * self.level(j).m()) * col[j].conj() * psi[j])
            .sum()
    }
}

/// `v^m_{θφ}`: the `S_z` eigenvector of level `m` rotated by `R(θ, φ)`.
pub fn rotated_eigenvector(
    ops: &SpinOperators,
    level: Level,
    theta: f64,
    phi: f64,
) -> Result<ComplexVector, SpinBasisError> {
    let k = ops.index_of(level)?;
    let col = ops.polar_column(theta, k);
    Ok(ComplexVector::from_fn(ops.dim(), |j, _| {
        C64::from_polar(1.0, -phi * ops.level(j).m()) * col[j]
    }))
}

#[derive(Debug, Clone)]
pub struct ConditionalSpinState {
    pub configuration: usize,
    /// Normalized amplitudes over the joint spin index.
    pub amplitudes: ComplexVector,
    /// `Σ_s |ψ_{xs}|²` before normalization.
    pub weight: f64,
}

pub fn conditional_spin_state(
    psi: &ComplexVector,
    space: &ConfigurationSpace,
    x: usize,
) -> Result<ConditionalSpinState, SpinBasisError> {
    let d = space.internal_dim();
    let block = ComplexVector::from_fn(d, |s, _| psi[space.join(x, s)]);
    let weight = block.norm_squared();
    if !(weight > CONDITIONAL_FLOOR) {
        return Err(SpinBasisError::DegenerateConfiguration {
            configuration: x,
            weight,
        });
    }
    Ok(ConditionalSpinState {
        configuration: x,
        amplitudes: block / c(weight.sqrt(), 0.0),
        weight,
    })
}

/// Multiplies by a global phase so the largest-magnitude component (the first
/// one on near-ties) is real and positive.
pub fn fix_global_phase(v: &mut ComplexVector) {
    let max = v.iter().map(|z| z.norm()).fold(0.0, f64::max);
    if max == 0.0 {
        return;
    }
    let pivot = v
        .iter()
        .find(|z| z.norm() >= max * (1.0 - 1e-9))
        .copied()
        .expect("max is attained");
    let rot = pivot.conj() / pivot.norm();
    for z in v.iter_mut() {
        *z *= rot;
    }
}

#[derive(Debug, Clone)]
pub struct TwoSpinFactors {
    pub psi1: ComplexVector,
    pub psi2: ComplexVector,
    /// Largest Schmidt weight; `|⟨psi1 ⊗ psi2, ψ̃⟩|² = lambda_max`.
    pub lambda_max: f64,
    pub degenerate: bool,
}

/// Best product approximation of a two-spin state.
///
/// `psi1` is the dominant eigenvector of `M M†` where `M[s1][s2]` is the
/// amplitude matrix; a degenerate top eigenspace is resolved by projecting the
/// constant vector onto it. `psi2` is the matching partner `Mᵀ psi1*`,
/// normalized, which is the dominant eigenvector of the partner problem
/// `(M† M)*` and makes the product overlap equal to `sqrt(lambda_max)`.
pub fn factorize_two_spin(state: &ConditionalSpinState, dims: (usize, usize)) -> TwoSpinFactors {
    let (n1, n2) = dims;
    assert_eq!(state.amplitudes.len(), n1 * n2, "spin block does not match dims");
    let m = ComplexMatrix::from_fn(n1, n2, |i, j| state.amplitudes[i * n2 + j]);
    let gram = &m * m.adjoint();
    let eig = hermitian_eig(&gram).expect("M M† is Hermitian");
    let lambda_max = *eig.values.last().expect("non-empty");
    let top: Vec<usize> = (0..n1)
        .filter(|&k| eig.values[k] >= lambda_max - DEGENERACY_TOL)
        .collect();
    let fallback = eig.vectors.column(n1 - 1).into_owned();
    let mut psi1 = if top.len() > 1 {
        let constant = ComplexVector::from_element(n1, c(1.0 / (n1 as f64).sqrt(), 0.0));
        let mut proj = ComplexVector::zeros(n1);
        for &k in &top {
            let v = eig.vectors.column(k);
            proj += v * v.dotc(&constant);
        }
        let norm = proj.norm();
        if norm > DEGENERACY_TOL {
            proj / c(norm, 0.0)
        } else {
            fallback
        }
    } else {
        fallback
    };
    fix_global_phase(&mut psi1);
    let partner = m.transpose() * psi1.map(|z| z.conj());
    let norm = partner.norm();
    let mut psi2 = partner / c(norm, 0.0);
    fix_global_phase(&mut psi2);
    TwoSpinFactors {
        psi1,
        psi2,
        lambda_max,
        degenerate: top.len() > 1,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EulerFit {
    pub theta: f64,
    pub phi: f64,
    pub level: Level,
    /// `1 - |⟨v, ψ⟩|²`.
    pub residual: f64,
}

/// Which rotations are admissible when fitting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitMode {
    /// Both Euler angles free.
    #[default]
    Full,
    /// `φ = 0`, only the polar angle is fitted.
    PolarOnly,
}

fn wrap_angle(phi: f64) -> f64 {
    let w = phi.rem_euclid(TAU);
    if w >= TAU {
        0.0
    } else {
        w
    }
}

/// Maps any `(θ, φ)` to `θ ∈ [0, π]`, `φ ∈ [0, 2π)` describing the same
/// rotated axis.
fn canonical_axis(theta: f64, phi: f64) -> (f64, f64) {
    let mut t = theta.rem_euclid(TAU);
    let mut p = phi;
    if t > PI {
        t = TAU - t;
        p += PI;
    }
    (t, wrap_angle(p))
}

fn gauge_poles(theta: f64, phi: f64) -> (f64, f64) {
    if theta < POLE_GAUGE || theta > PI - POLE_GAUGE {
        (theta, 0.0)
    } else {
        (theta, phi)
    }
}

fn residual_of(ops: &SpinOperators, psi: &ComplexVector, level: Level, theta: f64, phi: f64) -> f64 {
    let k = ops.index_of(level).expect("level from ops");
    (1.0 - ops.overlap(psi, k, theta, phi).norm_sqr()).max(0.0)
}

/// Best-fitting rotated `S_z` eigenvector for a single-spin state: maximizes
/// `|⟨v^m_{θφ}, ψ⟩|` over both angles and the level.
pub fn fit_euler(psi: &ComplexVector, ops: &SpinOperators) -> EulerFit {
    assert_eq!(psi.len(), ops.dim(), "state dimension does not match spin");
    let norm = psi.norm();
    let psi = psi / c(norm, 0.0);
    if ops.twice_s == 1 {
        let (a, b) = (psi[0], psi[1]);
        let theta = 2.0 * b.norm().atan2(a.norm());
        let phi = wrap_angle(b.arg() - a.arg());
        let (theta, phi) = gauge_poles(theta, phi);
        let level = Level::from_twice(1);
        return EulerFit {
            theta,
            phi,
            level,
            residual: residual_of(ops, &psi, level, theta, phi),
        };
    }

    let non_negative: Vec<usize> = (0..ops.dim()).filter(|&k| ops.level(k).twice_m >= 0).collect();
    let mut best: Option<(f64, usize, f64, f64)> = None;
    for &k in &non_negative {
        // coarse grid
        let mut seed = (f64::INFINITY, 0.0, 0.0);
        for i in 0..GRID_THETA {
            let theta = PI * i as f64 / (GRID_THETA - 1) as f64;
            let col = ops.polar_column(theta, k);
            let weights: Vec<C64> = (0..ops.dim()).map(|j| col[j].conj() * psi[j]).collect();
            for jp in 0..GRID_PHI {
                let phi = TAU * jp as f64 / GRID_PHI as f64;
                let ov: C64 = weights
                    .iter()
                    .enumerate()
                    .map(|(j, w)| C64::from_polar(1.0, phi * ops.level(j).m()) * w)
                    .sum();
                let f = 1.0 - ov.norm_sqr();
                if f < seed.0 {
                    seed = (f, theta, phi);
                }
            }
        }
        let step = PI / (GRID_THETA - 1) as f64;
        let objective = |p: [f64; 2]| 1.0 - ops.overlap(&psi, k, p[0], p[1]).norm_sqr();
        let (point, value) = nelder_mead(objective, [seed.1, seed.2], step, 1e-14, 4000);
        // the highest level is visited first, so ties keep the larger m
        if best.map_or(true, |b| value < b.0 - 1e-12) {
            best = Some((value, k, point[0], point[1]));
        }
    }
    let (_, k, theta, phi) = best.expect("at least one non-negative level");
    let level = ops.level(k);
    let (mut theta, mut phi) = canonical_axis(theta, phi);
    if level.twice_m == 0 && theta > FRAC_PI_2 {
        theta = PI - theta;
        phi = wrap_angle(phi + PI);
    }
    let (theta, phi) = gauge_poles(theta, phi);
    EulerFit {
        theta,
        phi,
        level,
        residual: residual_of(ops, &psi, level, theta, phi),
    }
}

/// Best fit with the azimuth pinned to zero.
pub fn fit_euler_polar(psi: &ComplexVector, ops: &SpinOperators) -> EulerFit {
    assert_eq!(psi.len(), ops.dim(), "state dimension does not match spin");
    let norm = psi.norm();
    let psi = psi / c(norm, 0.0);
    if ops.twice_s == 1 {
        let (a, b) = (psi[0], psi[1]);
        let along = a.norm_sqr() - b.norm_sqr();
        let across = 2.0 * (a.conj() * b).re;
        let chi = across.atan2(along);
        let (theta, level) = if chi >= 0.0 {
            (chi, Level::from_twice(1))
        } else {
            (chi + PI, Level::from_twice(-1))
        };
        return EulerFit {
            theta,
            phi: 0.0,
            level,
            residual: residual_of(ops, &psi, level, theta, 0.0),
        };
    }
    let h = PI / (POLAR_GRID - 1) as f64;
    let mut best: Option<(f64, usize, f64)> = None;
    for k in 0..ops.dim() {
        let f = |theta: f64| 1.0 - ops.overlap(&psi, k, theta, 0.0).norm_sqr();
        let (mut fb, mut tb) = (f64::INFINITY, 0.0);
        for i in 0..POLAR_GRID {
            let theta = h * i as f64;
            let v = f(theta);
            if v < fb {
                fb = v;
                tb = theta;
            }
        }
        let (theta, value) = golden_section(f, (tb - h).max(0.0), (tb + h).min(PI), 1e-13);
        if best.map_or(true, |b| value < b.0 - 1e-12) {
            best = Some((value, k, theta));
        }
    }
    let (_, k, theta) = best.expect("non-empty spin");
    let level = ops.level(k);
    EulerFit {
        theta,
        phi: 0.0,
        level,
        residual: residual_of(ops, &psi, level, theta, 0.0),
    }
}

pub fn fit(psi: &ComplexVector, ops: &SpinOperators, mode: FitMode) -> EulerFit {
    match mode {
        FitMode::Full => fit_euler(psi, ops),
        FitMode::PolarOnly => fit_euler_polar(psi, ops),
    }
}

fn golden_section<F: Fn(f64) -> f64>(f: F, mut a: f64, mut b: f64, tol: f64) -> (f64, f64) {
    let ratio = (5f64.sqrt() - 1.0) / 2.0;
    let mut x1 = b - ratio * (b - a);
    let mut x2 = a + ratio * (b - a);
    let (mut f1, mut f2) = (f(x1), f(x2));
    while b - a > tol {
        if f1 <= f2 {
            b = x2;
            x2 = x1;
            f2 = f1;
            x1 = b - ratio * (b - a);
            f1 = f(x1);
        } else {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = a + ratio * (b - a);
            f2 = f(x2);
        }
    }
    let x = 0.5 * (a + b);
    (x, f(x))
}

/// Two-parameter Nelder–Mead minimizer.
fn nelder_mead<F: Fn([f64; 2]) -> f64>(
    f: F,
    start: [f64; 2],
    step: f64,
    tol: f64,
    max_iter: usize,
) -> ([f64; 2], f64) {
    let mut simplex = [
        start,
        [start[0] + step, start[1]],
        [start[0], start[1] + step],
    ];
    let mut values = simplex.map(&f);
    for _ in 0..max_iter {
        let mut order = [0usize, 1, 2];
        order.sort_by(|&i, &j| values[i].total_cmp(&values[j]));
        simplex = order.map(|i| simplex[i]);
        values = order.map(|i| values[i]);
        let size = (1..3)
            .map(|i| (simplex[i][0] - simplex[0][0]).abs().max((simplex[i][1] - simplex[0][1]).abs()))
            .fold(0.0, f64::max);
        if size < tol {
            break;
        }
        let centroid = [
            0.5 * (simplex[0][0] + simplex[1][0]),
            0.5 * (simplex[0][1] + simplex[1][1]),
        ];
        let along = |t: f64| {
            [
                centroid[0] + t * (simplex[2][0] - centroid[0]),
                centroid[1] + t * (simplex[2][1] - centroid[1]),
            ]
        };
        let reflected = along(-1.0);
        let fr = f(reflected);
        if fr < values[0] {
            let expanded = along(-2.0);
            let fe = f(expanded);
            if fe < fr {
                simplex[2] = expanded;
                values[2] = fe;
            } else {
                simplex[2] = reflected;
                values[2] = fr;
            }
        } else if fr < values[1] {
            simplex[2] = reflected;
            values[2] = fr;
        } else {
            let contracted = if fr < values[2] { along(-0.5) } else { along(0.5) };
            let fc = f(contracted);
            if fc < values[2].min(fr) {
                simplex[2] = contracted;
                values[2] = fc;
            } else {
                for i in 1..3 {
                    simplex[i] = [
                        simplex[0][0] + 0.5 * (simplex[i][0] - simplex[0][0]),
                        simplex[0][1] + 0.5 * (simplex[i][1] - simplex[0][1]),
                    ];
                    values[i] = f(simplex[i]);
                }
            }
        }
    }
    let best = (0..3).min_by(|&i, &j| values[i].total_cmp(&values[j])).unwrap();
    (simplex[best], values[best])
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParticleFrame {
    pub theta: f64,
    pub phi: f64,
    /// Level of the basis vector the fitted factor aligns with.
    pub level: Level,
    pub residual: f64,
    /// Columns are `v^m_{θφ}`, levels descending.
    pub rotation: ComplexMatrix,
}

impl ParticleFrame {
    pub fn unrotated(dim: usize) -> Self {
        Self {
            theta: 0.0,
            phi: 0.0,
            level: Level::from_twice(dim as i32 - 1),
            residual: 0.0,
            rotation: ComplexMatrix::identity(dim, dim),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConfigurationFrame {
    pub particles: Vec<ParticleFrame>,
    /// `V^x = R₁† ⊗ R₂† ⊗ …`, acting on the joint spin block.
    pub transform: ComplexMatrix,
}

impl ConfigurationFrame {
    fn from_particles(particles: Vec<ParticleFrame>) -> Self {
        let transform = particles
            .iter()
            .fold(ComplexMatrix::identity(1, 1), |acc, p| tensor_product(&acc, &p.rotation.adjoint()));
        Self { particles, transform }
    }

    pub fn angles(&self) -> Vec<(f64, f64)> {
        self.particles.iter().map(|p| (p.theta, p.phi)).collect()
    }
}

/// Per-configuration spin bases: one [`ConfigurationFrame`] for every joint
/// external configuration of the space.
#[derive(Debug, Clone, PartialEq)]
pub struct BasisFrame {
    pub entries: Vec<ConfigurationFrame>,
}

impl BasisFrame {
    /// Unrotated `S_z` bases everywhere.
    pub fn identity(space: &ConfigurationSpace) -> Self {
        let dims = space.internal_dims();
        let entry = ConfigurationFrame::from_particles(dims.iter().map(|&d| ParticleFrame::unrotated(d)).collect());
        Self {
            entries: vec![entry; space.external_dim()],
        }
    }

    pub fn at(&self, x: usize) -> &ConfigurationFrame {
        &self.entries[x]
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

fn check_spins(space: &ConfigurationSpace, spins: &[SpinOperators]) -> Result<(), SpinBasisError> {
    let n = space.n_particles();
    if n == 0 || n > 2 {
        return Err(SpinBasisError::UnsupportedParticleCount(n));
    }
    if spins.len() != n {
        return Err(SpinBasisError::UnsupportedParticleCount(spins.len()));
    }
    for (particle, (d, ops)) in space.particles().iter().zip(spins).enumerate() {
        if d.internal != ops.dim() {
            return Err(SpinBasisError::DimensionMismatch {
                particle,
                internal: d.internal,
                spin_dim: ops.dim(),
            });
        }
    }
    Ok(())
}

fn fit_configuration(
    state: &ConditionalSpinState,
    spins: &[SpinOperators],
    mode: FitMode,
) -> ConfigurationFrame {
    let factors: Vec<ComplexVector> = if spins.len() == 1 {
        vec![state.amplitudes.clone()]
    } else {
        let f = factorize_two_spin(state, (spins[0].dim(), spins[1].dim()));
        vec![f.psi1, f.psi2]
    };
    let particles = factors
        .iter()
        .zip(spins)
        .map(|(psi, ops)| {
            let fit = fit(psi, ops, mode);
            ParticleFrame {
                theta: fit.theta,
                phi: fit.phi,
                level: fit.level,
                residual: fit.residual,
                rotation: ops.rotation(fit.theta, fit.phi),
            }
        })
        .collect();
    ConfigurationFrame::from_particles(particles)
}

/// Fits a frame at every external configuration. Configurations whose
/// conditional spin block is degenerate keep the entry of `previous`.
pub fn build_frame(
    psi: &ComplexVector,
    space: &ConfigurationSpace,
    spins: &[SpinOperators],
    mode: FitMode,
    previous: Option<&BasisFrame>,
) -> Result<BasisFrame, SpinBasisError> {
    let all: Vec<usize> = (0..space.external_dim()).collect();
    build_frame_for(psi, space, spins, mode, previous, &all)
}

/// Like [`build_frame`] but only refits the listed configurations; all others
/// are copied from `previous` (or left unrotated without one).
pub fn build_frame_for(
    psi: &ComplexVector,
    space: &ConfigurationSpace,
    spins: &[SpinOperators],
    mode: FitMode,
    previous: Option<&BasisFrame>,
    configurations: &[usize],
) -> Result<BasisFrame, SpinBasisError> {
    check_spins(space, spins)?;
    let mut frame = previous.cloned().unwrap_or_else(|| BasisFrame::identity(space));
    for &x in configurations {
        match conditional_spin_state(psi, space, x) {
            Ok(state) => frame.entries[x] = fit_configuration(&state, spins, mode),
            Err(err @ SpinBasisError::DegenerateConfiguration { .. }) => {
                if previous.is_none() {
                    return Err(err);
                }
            }
            Err(other) => return Err(other),
        }
    }
    Ok(frame)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{max_abs, tensor_product_vec, unitarity_error};
    use crate::space::ParticleDims;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_state(n: usize, rng: &mut impl Rng) -> ComplexVector {
        let v = ComplexVector::from_fn(n, |_, _| c(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)));
        let norm = v.norm();
        v / c(norm, 0.0)
    }

    fn commutator(a: &ComplexMatrix, b: &ComplexMatrix) -> ComplexMatrix {
        a * b - b * a
    }

    #[test]
    fn spin_half_matrices() {
        let ops = spin_operators(1);
        assert_eq!(ops.sz[(0, 0)], c(0.5, 0.0));
        assert_eq!(ops.sz[(1, 1)], c(-0.5, 0.0));
    }

    #[test]
    fn spin_two_spectrum() {
        let ops = spin_operators(4);
        assert_eq!(ops.dim(), 5);
        let eig = hermitian_eig(&ops.sz).unwrap();
        for (got, want) in eig.values.iter().zip([-2.0, -1.0, 0.0, 1.0, 2.0]) {
            assert!((got - want).abs() < 1e-14);
        }
        let levels: Vec<i32> = ops.levels().map(|l| l.twice_m).collect();
        assert_eq!(levels, vec![4, 2, 0, -2, -4]);
    }

    #[test]
    fn commutators_and_casimir() {
        for twice_s in 1..=4 {
            let ops = spin_operators(twice_s);
            let n = ops.dim();
            let i = c(0.0, 1.0);
            assert!(max_abs(&(commutator(&ops.sx, &ops.sy) - &ops.sz * i)) < 1e-12);
            assert!(max_abs(&(commutator(&ops.sy, &ops.sz) - &ops.sx * i)) < 1e-12);
            assert!(max_abs(&(commutator(&ops.sz, &ops.sx) - &ops.sy * i)) < 1e-12);
            let s = ops.s();
            let casimir = &ops.sx * &ops.sx + &ops.sy * &ops.sy + &ops.sz * &ops.sz;
            let expected = ComplexMatrix::identity(n, n) * c(s * (s + 1.0), 0.0);
            assert!(max_abs(&(casimir - expected)) < 1e-12);
        }
    }

    #[test]
    fn unrotated_eigenvectors() {
        let ops = spin_operators(4);
        for k in 0..5 {
            let v = rotated_eigenvector(&ops, ops.level(k), 0.0, 0.0).unwrap();
            for j in 0..5 {
                let want = if j == k { 1.0 } else { 0.0 };
                assert!((v[j] - c(want, 0.0)).norm() < 1e-14);
            }
        }
        assert!(rotated_eigenvector(&ops, Level::from_twice(1), 0.0, 0.0).is_err());
    }

    #[test]
    fn rotated_vectors_are_rotated_eigenvectors() {
        for twice_s in [1, 2, 3, 4] {
            let ops = spin_operators(twice_s);
            for &(theta, phi) in &[(0.3, 1.1), (2.0, 5.0), (PI / 2.0, 0.0)] {
                let r = ops.rotation(theta, phi);
                assert!(unitarity_error(&r) < 1e-12);
                let rotated_sz = &r * &ops.sz * r.adjoint();
                for level in ops.levels() {
                    let v = rotated_eigenvector(&ops, level, theta, phi).unwrap();
                    let lhs = &rotated_sz * &v;
                    assert!((lhs - &v * c(level.m(), 0.0)).norm() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn spin_half_analytic_rotation() {
        let ops = spin_operators(1);
        let (theta, phi) = (1.2, 2.3);
        let v = rotated_eigenvector(&ops, Level::from_twice(1), theta, phi).unwrap();
        let want = ComplexVector::from_vec(vec![
            c((theta / 2.0).cos(), 0.0),
            C64::from_polar((theta / 2.0).sin(), phi),
        ]);
        // equal up to a global phase
        assert!((v.dotc(&want).norm() - 1.0).abs() < 1e-14);
    }

    #[test]
    fn antipodal_representatives_agree() {
        for twice_s in [1, 2, 4] {
            let ops = spin_operators(twice_s);
            for level in ops.levels() {
                let a = rotated_eigenvector(&ops, level, 0.7, 1.9).unwrap();
                let b = rotated_eigenvector(&ops, Level::from_twice(-level.twice_m), PI - 0.7, 1.9 + PI).unwrap();
                assert!((a.dotc(&b).norm() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conditional_state_of_product() {
        let space = ConfigurationSpace::single(3, 2).unwrap();
        let chi = ComplexVector::from_vec(vec![c(0.6, 0.0), c(0.0, 0.0), c(0.0, 0.8)]);
        let xi = ComplexVector::from_vec(vec![c(0.0, 0.6), c(0.8, 0.0)]);
        let psi = tensor_product_vec(&chi, &xi);
        for x in [0, 2] {
            let st = conditional_spin_state(&psi, &space, x).unwrap();
            assert!((st.amplitudes.dotc(&xi).norm() - 1.0).abs() < 1e-12);
        }
        assert!(matches!(
            conditional_spin_state(&psi, &space, 1),
            Err(SpinBasisError::DegenerateConfiguration { configuration: 1, .. })
        ));
    }

    #[test]
    fn conditional_states_are_normalized() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let space = ConfigurationSpace::new(vec![ParticleDims::new(2, 2), ParticleDims::new(3, 2)]).unwrap();
        for _ in 0..100 {
            let psi = random_state(space.total_dim(), &mut rng);
            for x in 0..space.external_dim() {
                let st = conditional_spin_state(&psi, &space, x).unwrap();
                assert!((st.amplitudes.norm_squared() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn separable_factorization() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let a = random_state(3, &mut rng);
        let b = random_state(4, &mut rng);
        let state = ConditionalSpinState {
            configuration: 0,
            amplitudes: tensor_product_vec(&a, &b),
            weight: 1.0,
        };
        let f = factorize_two_spin(&state, (3, 4));
        assert!((f.lambda_max - 1.0).abs() < 1e-12);
        assert!(!f.degenerate);
        assert!((f.psi1.dotc(&a).norm() - 1.0).abs() < 1e-12);
        assert!((f.psi2.dotc(&b).norm() - 1.0).abs() < 1e-12);
    }

    fn singlet() -> ConditionalSpinState {
        let r = 1.0 / 2f64.sqrt();
        ConditionalSpinState {
            configuration: 0,
            amplitudes: ComplexVector::from_vec(vec![c(0., 0.), c(r, 0.), c(-r, 0.), c(0., 0.)]),
            weight: 1.0,
        }
    }

    #[test]
    fn singlet_tie_break_aligns_with_constant_vector() {
        let f = factorize_two_spin(&singlet(), (2, 2));
        assert!(f.degenerate);
        assert!((f.lambda_max - 0.5).abs() < 1e-12);
        let r = 1.0 / 2f64.sqrt();
        assert!((f.psi1[0] - c(r, 0.0)).norm() < 1e-12);
        assert!((f.psi1[1] - c(r, 0.0)).norm() < 1e-12);
        let ops = spin_operators(1);
        assert!((fit_euler_polar(&f.psi1, &ops).theta - PI / 2.0).abs() < 1e-12);
        assert!((fit_euler_polar(&f.psi2, &ops).theta - PI / 2.0).abs() < 1e-12);
        assert!((fit_euler(&f.psi1, &ops).theta - PI / 2.0).abs() < 1e-12);
        assert!((fit_euler(&f.psi2, &ops).theta - PI / 2.0).abs() < 1e-12);
    }

    #[test]
    fn factorization_beats_random_product_probes() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let state = ConditionalSpinState {
            configuration: 0,
            amplitudes: random_state(25, &mut rng),
            weight: 1.0,
        };
        let f = factorize_two_spin(&state, (5, 5));
        let best = tensor_product_vec(&f.psi1, &f.psi2).dotc(&state.amplitudes).norm_sqr();
        assert!((best - f.lambda_max).abs() < 1e-10);
        for _ in 0..10_000 {
            let probe = tensor_product_vec(&random_state(5, &mut rng), &random_state(5, &mut rng));
            assert!(probe.dotc(&state.amplitudes).norm_sqr() <= best + 1e-12);
        }
    }

    #[test]
    fn top_weight_is_largest_singular_value_squared() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        for (n1, n2) in [(2, 2), (3, 5), (5, 5)] {
            let amplitudes = random_state(n1 * n2, &mut rng);
            let m = ComplexMatrix::from_fn(n1, n2, |i, j| amplitudes[i * n2 + j]);
            let sigma = m.singular_values().max();
            let state = ConditionalSpinState {
                configuration: 0,
                amplitudes,
                weight: 1.0,
            };
            let f = factorize_two_spin(&state, (n1, n2));
            assert!((f.lambda_max - sigma * sigma).abs() < 1e-12);
        }
    }

    #[test]
    fn fit_of_unrotated_levels() {
        let ops = spin_operators(4);
        for k in 0..3 {
            let v = rotated_eigenvector(&ops, ops.level(k), 0.0, 0.0).unwrap();
            let f = fit_euler(&v, &ops);
            assert!(f.theta < 1e-6, "{f:?}");
            assert_eq!(f.phi, 0.0);
            assert_eq!(f.level, ops.level(k));
            assert!(f.residual < 1e-12);
        }
    }

    #[test]
    fn fit_recovers_spin_two_rotation() {
        let ops = spin_operators(4);
        let v = rotated_eigenvector(&ops, Level::from_twice(4), PI / 4.0, PI / 2.0).unwrap();
        let f = fit_euler(&v, &ops);
        assert_eq!(f.level, Level::from_twice(4));
        assert!((f.theta - PI / 4.0).abs() < 1e-6);
        assert!((f.phi - PI / 2.0).abs() < 1e-6);
    }

    #[test]
    fn negative_levels_fit_to_antipodal_representative() {
        let ops = spin_operators(4);
        let v = rotated_eigenvector(&ops, Level::from_twice(-2), 0.9, 0.4).unwrap();
        let f = fit_euler(&v, &ops);
        assert_eq!(f.level, Level::from_twice(2));
        assert!((f.theta - (PI - 0.9)).abs() < 1e-6);
        assert!((f.phi - (0.4 + PI)).abs() < 1e-6);
        assert!(f.residual < 1e-12);
    }

    #[test]
    fn fit_is_phase_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for twice_s in [1, 4] {
            let ops = spin_operators(twice_s);
            for _ in 0..5 {
                let psi = random_state(ops.dim(), &mut rng);
                let gamma = rng.gen_range(0.0..TAU);
                let a = fit_euler(&psi, &ops);
                let b = fit_euler(&(&psi * C64::from_polar(1.0, gamma)), &ops);
                assert_eq!(a.level, b.level);
                assert!((a.theta - b.theta).abs() < 1e-6);
                let dphi = (a.phi - b.phi).rem_euclid(TAU);
                assert!(dphi.min(TAU - dphi) < 1e-6);
            }
        }
    }

    #[test]
    fn polar_fit_of_rotated_projections() {
        let ops = spin_operators(1);
        let alpha = PI / 5.0;
        let plus = ComplexVector::from_vec(vec![c((alpha / 2.).cos(), 0.), c((alpha / 2.).sin(), 0.)]);
        let minus = ComplexVector::from_vec(vec![c((alpha / 2.).sin(), 0.), c(-(alpha / 2.).cos(), 0.)]);
        let f = fit_euler_polar(&plus, &ops);
        assert!((f.theta - alpha).abs() < 1e-12 && f.level == Level::from_twice(1));
        let f = fit_euler_polar(&minus, &ops);
        assert!((f.theta - alpha).abs() < 1e-12 && f.level == Level::from_twice(-1));
    }

    #[test]
    fn generic_polar_fit_matches_closed_form() {
        // spin one embeds no closed form; compare against a dense scan
        let ops = spin_operators(2);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let psi = random_state(3, &mut rng);
        let f = fit_euler_polar(&psi, &ops);
        let mut best = 0.0f64;
        for i in 0..=20_000 {
            let theta = PI * i as f64 / 20_000.0;
            for k in 0..3 {
                best = best.max(ops.overlap(&psi, k, theta, 0.0).norm_sqr());
            }
        }
        assert!(1.0 - f.residual >= best - 1e-9);
    }

    #[test]
    fn frames_for_aligned_product() {
        let space = ConfigurationSpace::new(vec![ParticleDims::new(1, 2), ParticleDims::new(1, 2)]).unwrap();
        let ops = spin_operators(1);
        let a = rotated_eigenvector(&ops, Level::from_twice(1), 0.4, 1.0).unwrap();
        let b = rotated_eigenvector(&ops, Level::from_twice(1), 2.1, 4.0).unwrap();
        let psi = tensor_product_vec(&a, &b);
        let frame = build_frame(&psi, &space, &[ops.clone(), ops.clone()], FitMode::Full, None).unwrap();
        let angles = frame.at(0).angles();
        assert!((angles[0].0 - 0.4).abs() < 1e-12 && (angles[0].1 - 1.0).abs() < 1e-12);
        assert!((angles[1].0 - 2.1).abs() < 1e-12 && (angles[1].1 - 4.0).abs() < 1e-12);
    }

    #[test]
    fn frames_are_unitary_block_structured_and_idempotent() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let space = ConfigurationSpace::new(vec![ParticleDims::new(1, 2), ParticleDims::new(1, 2)]).unwrap();
        let spins = [spin_operators(1), spin_operators(1)];
        for _ in 0..100 {
            let psi = random_state(4, &mut rng);
            let frame = build_frame(&psi, &space, &spins, FitMode::Full, None).unwrap();
            let entry = frame.at(0);
            assert!(unitarity_error(&entry.transform) < 1e-10);
            let expected = tensor_product(&entry.particles[0].rotation.adjoint(), &entry.particles[1].rotation.adjoint());
            assert!(max_abs(&(&entry.transform - expected)) < 1e-14);
            let again = build_frame(&psi, &space, &spins, FitMode::Full, None).unwrap();
            assert_eq!(frame, again);
        }
    }

    #[test]
    fn degenerate_configurations_inherit() {
        let space = ConfigurationSpace::new(vec![ParticleDims::new(2, 2)]).unwrap();
        let spins = [spin_operators(1)];
        let psi = ComplexVector::from_vec(vec![c(0.6, 0.), c(0.8, 0.), c(0., 0.), c(0., 0.)]);
        assert!(build_frame(&psi, &space, &spins, FitMode::Full, None).is_err());
        let prev = BasisFrame::identity(&space);
        let frame = build_frame(&psi, &space, &spins, FitMode::Full, Some(&prev)).unwrap();
        assert_eq!(frame.at(1), prev.at(1));
        assert!(frame.at(0).particles[0].theta > 0.1);
    }

    #[test]
    fn three_particles_unsupported() {
        let space = ConfigurationSpace::new(vec![ParticleDims::new(1, 2); 3]).unwrap();
        let spins = vec![spin_operators(1); 3];
        let psi = ComplexVector::from_element(8, c(1.0 / 8f64.sqrt(), 0.0));
        assert_eq!(
            build_frame(&psi, &space, &spins, FitMode::Full, None),
            Err(SpinBasisError::UnsupportedParticleCount(3))
        );
    }
}
