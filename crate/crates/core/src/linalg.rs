//! Dense complex linear algebra: Kronecker products, Hermitian and unitary
//! eigendecompositions, exponentials of Hermitian generators and principal
//! fractional roots of unitaries.
//!
//! Matrices are plain `nalgebra::DMatrix<Complex64>`. The "unitary" and
//! "hermitian" roles are checked at function boundaries rather than encoded
//! in the type, since most matrices in this crate change role freely
//! (a Hamiltonian becomes an evolution operator, a frame becomes its adjoint).

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use thiserror::Error;

pub type C64 = Complex64;
pub type ComplexMatrix = DMatrix<C64>;
pub type ComplexVector = DVector<C64>;

/// Max-norm tolerance on `U†U - I` for a matrix used as unitary.
pub const UNITARY_TOL: f64 = 1e-10;
/// Max-norm tolerance on `H - H†`, relative to `max(1, |H|_max)`.
pub const HERMITIAN_TOL: f64 = 1e-12;
/// Tolerance on `|‖ψ‖² - 1|` for a normalized state.
pub const STATE_NORM_TOL: f64 = 1e-10;
/// Eigenphases closer than this to the branch cut at ±π are ambiguous.
pub const BRANCH_CUT_TOL: f64 = 1e-12;

const SCHUR_EPS: f64 = 1e-15;
const SCHUR_MAX_ITER: usize = 10_000;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LinalgError {
    #[error("matrix is not square ({rows}x{cols})")]
    NotSquare { rows: usize, cols: usize },
    #[error("matrix is not Hermitian: max |H - H†| = {deviation:e}")]
    NotHermitian { deviation: f64 },
    #[error("matrix is not unitary: max |U†U - I| = {deviation:e}")]
    NotUnitary { deviation: f64 },
    #[error("time step must be positive and finite, got {0}")]
    InvalidStep(f64),
    #[error("root order must be at least 1")]
    ZeroRootOrder,
    #[error("eigenphase {phase} lies on the branch cut at -pi; perturb the operator or pick another step count")]
    BranchCut { phase: f64 },
    #[error("eigendecomposition did not converge")]
    NoConvergence,
}

/// How eigenphases sitting on the branch cut are treated by
/// [`unitary_root_with`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BranchPolicy {
    /// Reject phases within [`BRANCH_CUT_TOL`] of ±π.
    #[default]
    Strict,
    /// Treat such phases as exactly +π, the closed end of (−π, π].
    ClosedAtPi,
}

#[derive(Debug, Clone)]
pub struct HermitianEigen {
    /// Ascending.
    pub values: Vec<f64>,
    /// Orthonormal eigenvectors as columns, in the order of `values`.
    pub vectors: ComplexMatrix,
}

#[derive(Debug, Clone)]
pub struct UnitaryEigen {
    /// Eigenvalues on the unit circle.
    pub values: Vec<C64>,
    pub vectors: ComplexMatrix,
}

pub fn c(re: f64, im: f64) -> C64 {
    C64::new(re, im)
}

pub fn max_abs(m: &ComplexMatrix) -> f64 {
    m.iter().map(|z| z.norm()).fold(0.0, f64::max)
}

pub fn max_abs_vec(v: &ComplexVector) -> f64 {
    v.iter().map(|z| z.norm()).fold(0.0, f64::max)
}

pub fn hermiticity_error(h: &ComplexMatrix) -> f64 {
    max_abs(&(h - h.adjoint()))
}

pub fn unitarity_error(u: &ComplexMatrix) -> f64 {
    let n = u.nrows();
    max_abs(&(u.adjoint() * u - ComplexMatrix::identity(n, n)))
}

pub fn is_unitary(u: &ComplexMatrix) -> bool {
    u.is_square() && unitarity_error(u) < UNITARY_TOL
}

pub fn is_hermitian(h: &ComplexMatrix) -> bool {
    h.is_square() && hermiticity_error(h) < HERMITIAN_TOL * max_abs(h).max(1.0)
}

pub fn is_normalized(psi: &ComplexVector) -> bool {
    (psi.norm_squared() - 1.0).abs() < STATE_NORM_TOL
}

fn require_square(m: &ComplexMatrix) -> Result<(), LinalgError> {
    if m.is_square() {
        Ok(())
    } else {
        Err(LinalgError::NotSquare {
            rows: m.nrows(),
            cols: m.ncols(),
        })
    }
}

fn require_hermitian(h: &ComplexMatrix) -> Result<(), LinalgError> {
    require_square(h)?;
    let deviation = hermiticity_error(h);
    if deviation < HERMITIAN_TOL * max_abs(h).max(1.0) {
        Ok(())
    } else {
        Err(LinalgError::NotHermitian { deviation })
    }
}

fn require_unitary(u: &ComplexMatrix) -> Result<(), LinalgError> {
    require_square(u)?;
    let deviation = unitarity_error(u);
    if deviation < UNITARY_TOL {
        Ok(())
    } else {
        Err(LinalgError::NotUnitary { deviation })
    }
}

/// Kronecker product `a ⊗ b`; the row/column index of `a` is the slow index.
pub fn tensor_product(a: &ComplexMatrix, b: &ComplexMatrix) -> ComplexMatrix {
    a.kronecker(b)
}

/// Left-folded Kronecker product of all factors. Empty input gives the 1x1
/// identity.
pub fn tensor_product_all<'a, I>(factors: I) -> ComplexMatrix
where
    I: IntoIterator<Item = &'a ComplexMatrix>,
{
    factors
        .into_iter()
        .fold(ComplexMatrix::identity(1, 1), |acc, f| acc.kronecker(f))
}

pub fn tensor_product_vec(a: &ComplexVector, b: &ComplexVector) -> ComplexVector {
    a.kronecker(b)
}

/// Eigendecomposition of a Hermitian matrix with ascending real eigenvalues.
pub fn hermitian_eig(h: &ComplexMatrix) -> Result<HermitianEigen, LinalgError> {
    require_hermitian(h)?;
    let sym = (h + h.adjoint()) * c(0.5, 0.0);
    let eig = nalgebra::SymmetricEigen::try_new(sym, SCHUR_EPS, SCHUR_MAX_ITER)
        .ok_or(LinalgError::NoConvergence)?;
    let n = h.nrows();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]));
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vectors = ComplexMatrix::from_fn(n, n, |r, k| eig.eigenvectors[(r, order[k])]);
    Ok(HermitianEigen { values, vectors })
}

/// Applies `f` to the eigenvalues of a Hermitian matrix: `V f(Λ) V†`.
pub fn hermitian_function<F>(eig: &HermitianEigen, f: F) -> ComplexMatrix
where
    F: Fn(f64) -> C64,
{
    let n = eig.values.len();
    let mut scaled = eig.vectors.clone();
    for (k, &lambda) in eig.values.iter().enumerate() {
        let w = f(lambda);
        for r in 0..n {
            scaled[(r, k)] *= w;
        }
    }
    scaled * eig.vectors.adjoint()
}

/// `exp(-i h eps)` through the eigendecomposition of `h`.
pub fn evolution_from_hamiltonian(h: &ComplexMatrix, eps: f64) -> Result<ComplexMatrix, LinalgError> {
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(LinalgError::InvalidStep(eps));
    }
    let eig = hermitian_eig(h)?;
    Ok(hermitian_function(&eig, |lambda| C64::from_polar(1.0, -lambda * eps)))
}

/// Eigendecomposition of a unitary matrix. Unitaries are normal, so the
/// complex Schur form is diagonal and its Schur vectors are eigenvectors.
/// When the QR iteration stalls (large, highly degenerate spectra) the
/// eigenvectors are taken from a Hermitian Cayley transform instead.
pub fn unitary_eig(u: &ComplexMatrix) -> Result<UnitaryEigen, LinalgError> {
    require_unitary(u)?;
    match nalgebra::linalg::Schur::try_new(u.clone(), SCHUR_EPS, SCHUR_MAX_ITER) {
        Some(schur) => {
            let (q, t) = schur.unpack();
            let n = u.nrows();
            let mut off_diag = 0.0f64;
            for j in 0..n {
                for i in 0..j {
                    off_diag = off_diag.max(t[(i, j)].norm());
                }
            }
            if off_diag > 1e3 * UNITARY_TOL {
                return Err(LinalgError::NotUnitary { deviation: off_diag });
            }
            let values = (0..n).map(|i| t[(i, i)] / t[(i, i)].norm()).collect();
            Ok(UnitaryEigen { values, vectors: q })
        }
        None => unitary_eig_cayley(u),
    }
}

/// `K = i(I - e^{iα}U)(I + e^{iα}U)⁻¹` is Hermitian and shares the
/// eigenvectors of `U`; `α` is varied until `I + e^{iα}U` is well
/// conditioned enough for the eigenpairs to reproduce `U`.
fn unitary_eig_cayley(u: &ComplexMatrix) -> Result<UnitaryEigen, LinalgError> {
    let n = u.nrows();
    let id = ComplexMatrix::identity(n, n);
    for alpha in [0.0, 0.913, 2.087, 2.771, 4.129, 5.303] {
        let shifted = u * C64::from_polar(1.0, alpha);
        let Some(inv) = (&id + &shifted).try_inverse() else {
            continue;
        };
        let k = (&id - &shifted) * inv * c(0.0, 1.0);
        let k = (&k + k.adjoint()) * c(0.5, 0.0);
        let Ok(eig) = hermitian_eig(&k) else {
            continue;
        };
        let v = eig.vectors;
        let uv = u * &v;
        let values: Vec<C64> = (0..n)
            .map(|j| {
                let l = v.column(j).dotc(&uv.column(j));
                l / l.norm()
            })
            .collect();
        let mut residual = 0.0f64;
        for j in 0..n {
            for r in 0..n {
                residual = residual.max((uv[(r, j)] - v[(r, j)] * values[j]).norm());
            }
        }
        if residual < 1e-10 {
            return Ok(UnitaryEigen { values, vectors: v });
        }
    }
    Err(LinalgError::NoConvergence)
}

/// Principal `n_steps`-th root of a unitary, rejecting eigenphases on the
/// branch cut.
pub fn unitary_root(u: &ComplexMatrix, n_steps: usize) -> Result<ComplexMatrix, LinalgError> {
    unitary_root_with(u, n_steps, BranchPolicy::Strict)
}

pub fn unitary_root_with(
    u: &ComplexMatrix,
    n_steps: usize,
    policy: BranchPolicy,
) -> Result<ComplexMatrix, LinalgError> {
    if n_steps == 0 {
        return Err(LinalgError::ZeroRootOrder);
    }
    if n_steps == 1 {
        require_unitary(u)?;
        return Ok(u.clone());
    }
    let eig = unitary_eig(u)?;
    let n = u.nrows();
    let mut scaled = eig.vectors.clone();
    for (k, lambda) in eig.values.iter().enumerate() {
        let mut phase = lambda.arg();
        if PI - phase.abs() < BRANCH_CUT_TOL {
            match policy {
                BranchPolicy::Strict => return Err(LinalgError::BranchCut { phase }),
                BranchPolicy::ClosedAtPi => phase = PI,
            }
        }
        let w = C64::from_polar(1.0, phase / n_steps as f64);
        for r in 0..n {
            scaled[(r, k)] *= w;
        }
    }
    Ok(scaled * eig.vectors.adjoint())
}

/// `u^k` by binary exponentiation.
pub fn matrix_power(u: &ComplexMatrix, mut k: usize) -> ComplexMatrix {
    let n = u.nrows();
    let mut result = ComplexMatrix::identity(n, n);
    let mut base = u.clone();
    while k > 0 {
        if k & 1 == 1 {
            result = &result * &base;
        }
        k >>= 1;
        if k > 0 {
            base = &base * &base;
        }
    }
    result
}
