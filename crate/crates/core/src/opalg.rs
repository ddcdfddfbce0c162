//! Operator algebra on a truncated multi-mode Fock space.
//!
//! Every operator is stored as a dense complex matrix over the tensor
//! product of the per-mode truncated spaces, modes ordered as given in the
//! [`ModeSpace`]. The first mode is the most significant factor of the
//! Kronecker product.

use std::fmt;
use std::ops::{Add, Mul, Sub};

use nalgebra::{DMatrix, SymmetricEigen};
use num_complex::Complex64;

use crate::error::{Error, Result};

pub type C64 = Complex64;
pub type Matrix = DMatrix<C64>;

const HERMITIAN_TOL: f64 = 1e-12;
const EIGEN_HERMITIAN_TOL: f64 = 1e-10;

/// Registry of bosonic modes and their truncation dimensions.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct ModeSpace {
    dims: Vec<usize>,
    total_dim: usize,
}

impl ModeSpace {
    pub fn new(dims: &[usize]) -> Result<Self> {
        if dims.is_empty() {
            return Err(Error::InvalidDimension("mode space needs at least one mode".into()));
        }
        if let Some(d) = dims.iter().find(|&&d| d < 2) {
            return Err(Error::InvalidDimension(format!(
                "truncation dimension {d} is below the minimum of 2"
            )));
        }
        Ok(Self {
            dims: dims.to_vec(),
            total_dim: dims.iter().product(),
        })
    }

    /// Single-mode space of the given truncation.
    pub fn single(dim: usize) -> Result<Self> {
        Self::new(&[dim])
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn total_dim(&self) -> usize {
        self.total_dim
    }

    pub fn num_modes(&self) -> usize {
        self.dims.len()
    }

    /// Per-mode occupation numbers of a product basis index.
    pub fn occupations(&self, mut index: usize) -> Vec<usize> {
        let mut occ = vec![0; self.dims.len()];
        for (k, &d) in self.dims.iter().enumerate().rev() {
            occ[k] = index % d;
            index /= d;
        }
        occ
    }

    /// Product basis index of per-mode occupation numbers.
    pub fn index_of(&self, occupations: &[usize]) -> Result<usize> {
        if occupations.len() != self.dims.len() {
            return Err(Error::InvalidDimension(format!(
                "{} occupations given for {} modes",
                occupations.len(),
                self.dims.len()
            )));
        }
        let mut index = 0;
        for (&n, &d) in occupations.iter().zip(&self.dims) {
            if n >= d {
                return Err(Error::InvalidDimension(format!(
                    "occupation {n} exceeds truncation {d}"
                )));
            }
            index = index * d + n;
        }
        Ok(index)
    }
}

impl fmt::Display for ModeSpace {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.dims.iter().map(|d| d.to_string()).collect();
        write!(f, "{}", parts.join("x"))
    }
}

/// Dense operator on a [`ModeSpace`].
#[derive(Clone, Debug)]
pub struct Operator {
    space: ModeSpace,
    matrix: Matrix,
}

impl Operator {
    pub fn new(space: ModeSpace, matrix: Matrix) -> Result<Self> {
        let n = space.total_dim();
        if matrix.nrows() != n || matrix.ncols() != n {
            return Err(Error::InvalidDimension(format!(
                "{}x{} matrix on a space of dimension {n}",
                matrix.nrows(),
                matrix.ncols()
            )));
        }
        Ok(Self { space, matrix })
    }

    pub fn zeros(space: &ModeSpace) -> Self {
        let n = space.total_dim();
        Self {
            space: space.clone(),
            matrix: Matrix::zeros(n, n),
        }
    }

    pub fn identity(space: &ModeSpace) -> Self {
        let n = space.total_dim();
        Self {
            space: space.clone(),
            matrix: Matrix::identity(n, n),
        }
    }

    /// Real diagonal operator.
    pub fn from_diagonal(space: &ModeSpace, diagonal: &[f64]) -> Result<Self> {
        let n = space.total_dim();
        if diagonal.len() != n {
            return Err(Error::InvalidDimension(format!(
                "{} diagonal entries for dimension {n}",
                diagonal.len()
            )));
        }
        let mut matrix = Matrix::zeros(n, n);
        for (i, &v) in diagonal.iter().enumerate() {
            matrix[(i, i)] = C64::new(v, 0.0);
        }
        Ok(Self {
            space: space.clone(),
            matrix,
        })
    }

    pub fn space(&self) -> &ModeSpace {
        &self.space
    }

    pub fn dim(&self) -> usize {
        self.space.total_dim()
    }

    pub fn matrix(&self) -> &Matrix {
        &self.matrix
    }

    pub fn into_matrix(self) -> Matrix {
        self.matrix
    }

    pub fn adjoint(&self) -> Self {
        Self {
            space: self.space.clone(),
            matrix: self.matrix.adjoint(),
        }
    }

    pub fn trace(&self) -> C64 {
        self.matrix.trace()
    }

    /// Largest entry modulus.
    pub fn max_abs(&self) -> f64 {
        self.matrix.iter().fold(0.0, |m, z| m.max(z.norm()))
    }

    /// Frobenius norm.
    pub fn norm(&self) -> f64 {
        self.matrix.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
    }

    /// max|M - M†|.
    pub fn hermiticity_error(&self) -> f64 {
        let n = self.dim();
        let mut err: f64 = 0.0;
        for i in 0..n {
            for j in i..n {
                err = err.max((self.matrix[(i, j)] - self.matrix[(j, i)].conj()).norm());
            }
        }
        err
    }

    /// True when max|M - M†| < tol · max|M|.
    pub fn is_hermitian(&self, tol: f64) -> bool {
        let scale = self.max_abs();
        scale == 0.0 || self.hermiticity_error() < tol * scale
    }

    pub fn scale(&self, factor: C64) -> Self {
        Self {
            space: self.space.clone(),
            matrix: &self.matrix * factor,
        }
    }

    fn check_same_space(&self, other: &Self) -> Result<()> {
        if self.space != other.space {
            return Err(Error::InvalidDimension(format!(
                "operator spaces differ: {} vs {}",
                self.space, other.space
            )));
        }
        Ok(())
    }

    pub fn try_compose(&self, other: &Self) -> Result<Self> {
        self.check_same_space(other)?;
        Ok(Self {
            space: self.space.clone(),
            matrix: &self.matrix * &other.matrix,
        })
    }

    /// [self, other]
    pub fn commutator(&self, other: &Self) -> Result<Self> {
        self.check_same_space(other)?;
        Ok(Self {
            space: self.space.clone(),
            matrix: &self.matrix * &other.matrix - &other.matrix * &self.matrix,
        })
    }
}

impl Add for &Operator {
    type Output = Operator;

    /// Panics when the spaces differ.
    fn add(self, rhs: &Operator) -> Operator {
        assert_eq!(self.space, rhs.space, "adding operators on different spaces");
        Operator {
            space: self.space.clone(),
            matrix: &self.matrix + &rhs.matrix,
        }
    }
}

impl Sub for &Operator {
    type Output = Operator;

    /// Panics when the spaces differ.
    fn sub(self, rhs: &Operator) -> Operator {
        assert_eq!(self.space, rhs.space, "subtracting operators on different spaces");
        Operator {
            space: self.space.clone(),
            matrix: &self.matrix - &rhs.matrix,
        }
    }
}

impl Mul for &Operator {
    type Output = Operator;

    /// Panics when the spaces differ; see [`Operator::try_compose`].
    fn mul(self, rhs: &Operator) -> Operator {
        self.try_compose(rhs).expect("multiplying operators on different spaces")
    }
}

impl Mul<f64> for &Operator {
    type Output = Operator;

    fn mul(self, rhs: f64) -> Operator {
        self.scale(C64::new(rhs, 0.0))
    }
}

/// Bosonic lowering operator truncated to `dim` Fock levels.
pub fn annihilation(dim: usize) -> Result<Operator> {
    let space = ModeSpace::single(dim)?;
    let mut m = Matrix::zeros(dim, dim);
    for n in 1..dim {
        m[(n - 1, n)] = C64::new((n as f64).sqrt(), 0.0);
    }
    Operator::new(space, m)
}

pub fn creation(dim: usize) -> Result<Operator> {
    Ok(annihilation(dim)?.adjoint())
}

/// a†a, diagonal with entries 0..dim-1.
pub fn number(dim: usize) -> Result<Operator> {
    let diag: Vec<f64> = (0..dim).map(|n| n as f64).collect();
    Operator::from_diagonal(&ModeSpace::single(dim)?, &diag)
}

/// Lift a single-mode operator into `space` at `mode_index`.
pub fn embed(op: &Operator, mode_index: usize, space: &ModeSpace) -> Result<Operator> {
    let dims = space.dims();
    if mode_index >= dims.len() {
        return Err(Error::InvalidDimension(format!(
            "mode index {mode_index} out of range for {} modes",
            dims.len()
        )));
    }
    if op.dim() != dims[mode_index] {
        return Err(Error::InvalidDimension(format!(
            "operator of dimension {} embedded into mode {mode_index} of dimension {}",
            op.dim(),
            dims[mode_index]
        )));
    }
    let left: usize = dims[..mode_index].iter().product();
    let right: usize = dims[mode_index + 1..].iter().product();
    let m = Matrix::identity(left, left)
        .kronecker(op.matrix())
        .kronecker(&Matrix::identity(right, right));
    Operator::new(space.clone(), m)
}

/// Tensor product of operators, one per mode of the combined space.
pub fn tensor(factors: &[&Operator]) -> Result<Operator> {
    let (first, rest) = factors
        .split_first()
        .ok_or_else(|| Error::InvalidDimension("empty tensor product".into()))?;
    let mut dims = first.space().dims().to_vec();
    let mut m = first.matrix().clone();
    for f in rest {
        dims.extend_from_slice(f.space().dims());
        m = m.kronecker(f.matrix());
    }
    Operator::new(ModeSpace::new(&dims)?, m)
}

/// Validated quantum state: Hermitian, unit trace, positive semidefinite.
#[derive(Clone, Debug)]
pub struct DensityMatrix {
    op: Operator,
}

impl DensityMatrix {
    pub const TRACE_TOL: f64 = 1e-9;
    pub const MIN_EIGENVALUE: f64 = -1e-9;

    pub fn new(op: Operator) -> Result<Self> {
        let tr = op.trace();
        if (tr.re - 1.0).abs() > Self::TRACE_TOL || tr.im.abs() > Self::TRACE_TOL {
            return Err(Error::InvalidOperator(format!("density matrix trace is {tr}")));
        }
        if op.hermiticity_error() > HERMITIAN_TOL * op.max_abs().max(1.0) {
            return Err(Error::InvalidOperator("density matrix is not Hermitian".into()));
        }
        let min_eig = hermitian_eigensolve(&op)?.values[0];
        if min_eig < Self::MIN_EIGENVALUE {
            return Err(Error::InvalidOperator(format!(
                "density matrix has negative eigenvalue {min_eig:e}"
            )));
        }
        Ok(Self { op })
    }

    /// Wraps an operator without checking state properties.
    pub(crate) fn from_operator_unchecked(op: Operator) -> Self {
        Self { op }
    }

    pub fn from_diagonal(space: &ModeSpace, probabilities: &[f64]) -> Result<Self> {
        Self::new(Operator::from_diagonal(space, probabilities)?)
    }

    /// |n⟩⟨n| in a single mode.
    pub fn fock(dim: usize, n: usize) -> Result<Self> {
        if n >= dim {
            return Err(Error::InvalidDimension(format!(
                "Fock level {n} exceeds truncation {dim}"
            )));
        }
        let mut p = vec![0.0; dim];
        p[n] = 1.0;
        Self::from_diagonal(&ModeSpace::single(dim)?, &p)
    }

    /// Product state of independent single-mode states.
    pub fn product(factors: &[&DensityMatrix]) -> Result<Self> {
        let ops: Vec<&Operator> = factors.iter().map(|f| &f.op).collect();
        Ok(Self {
            op: tensor(&ops)?,
        })
    }

    pub fn as_operator(&self) -> &Operator {
        &self.op
    }

    pub fn into_operator(self) -> Operator {
        self.op
    }

    pub fn space(&self) -> &ModeSpace {
        self.op.space()
    }

    pub fn trace(&self) -> f64 {
        self.op.trace().re
    }

    /// Tr[ρ²].
    pub fn purity(&self) -> f64 {
        let m = self.op.matrix();
        m.iter().map(|z| z.norm_sqr()).sum()
    }

    pub fn min_eigenvalue(&self) -> Result<f64> {
        Ok(hermitian_eigensolve(&self.op)?.values[0])
    }

    /// Diagonal in the product Fock basis.
    pub fn populations(&self) -> Vec<f64> {
        self.op.matrix().diagonal().iter().map(|z| z.re).collect()
    }
}

/// Geometric occupation law p(n) = nbarⁿ/(1+nbar)ⁿ⁺¹ for n < dim, without
/// renormalization.
pub fn thermal_probabilities(dim: usize, nbar: f64) -> Result<Vec<f64>> {
    if !(nbar >= 0.0) || !nbar.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "mean occupation must be finite and nonnegative, got {nbar}"
        )));
    }
    if dim < 2 {
        return Err(Error::InvalidDimension(format!(
            "truncation dimension {dim} is below the minimum of 2"
        )));
    }
    let ratio = nbar / (1.0 + nbar);
    let p0 = 1.0 / (1.0 + nbar);
    Ok((0..dim).map(|n| p0 * ratio.powi(n as i32)).collect())
}

/// Thermal state truncated to `dim` levels and renormalized to unit trace.
pub fn thermal_state(dim: usize, nbar: f64) -> Result<DensityMatrix> {
    let mut p = thermal_probabilities(dim, nbar)?;
    let total: f64 = p.iter().sum();
    p.iter_mut().for_each(|v| *v /= total);
    DensityMatrix::from_diagonal(&ModeSpace::single(dim)?, &p)
}

/// Tr[ρ · op].
pub fn expectation(rho: &DensityMatrix, op: &Operator) -> Result<C64> {
    if rho.space() != op.space() {
        return Err(Error::InvalidDimension(format!(
            "state on {} measured with operator on {}",
            rho.space(),
            op.space()
        )));
    }
    Ok(trace_of_product(rho.as_operator().matrix(), op.matrix()))
}

/// Tr[a·b] without forming the product.
pub(crate) fn trace_of_product(a: &Matrix, b: &Matrix) -> C64 {
    let n = a.nrows();
    let mut acc = C64::new(0.0, 0.0);
    for i in 0..n {
        for j in 0..n {
            acc += a[(i, j)] * b[(j, i)];
        }
    }
    acc
}

/// Spectral decomposition of a Hermitian operator.
#[derive(Clone, Debug)]
pub struct HermitianEigen {
    /// Ascending.
    pub values: Vec<f64>,
    /// Orthonormal columns matching `values`.
    pub vectors: Matrix,
}

/// Eigen-decomposition of a Hermitian operator.
pub fn hermitian_eigensolve(op: &Operator) -> Result<HermitianEigen> {
    if !op.is_hermitian(EIGEN_HERMITIAN_TOL) {
        return Err(Error::InvalidOperator(format!(
            "eigensolver needs a Hermitian operator (asymmetry {:e})",
            op.hermiticity_error()
        )));
    }
    hermitian_eigen_matrix(op.matrix())
}

/// Same as [`hermitian_eigensolve`] on a bare matrix; the lower triangle is
/// taken as authoritative.
pub(crate) fn hermitian_eigen_matrix(m: &Matrix) -> Result<HermitianEigen> {
    let eig = SymmetricEigen::try_new(m.clone(), f64::EPSILON, 0)
        .ok_or_else(|| Error::InvalidOperator("eigensolver did not converge".into()))?;
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let values = order.iter().map(|&k| eig.eigenvalues[k]).collect();
    let n = m.nrows();
    let mut vectors = Matrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        vectors.set_column(dst, &eig.eigenvectors.column(src));
    }
    Ok(HermitianEigen { values, vectors })
}
