//! Symmetric sparse matrices and SPD solvers.
//!
//! Factorization is delegated to faer's supernodal sparse Cholesky; a
//! Jacobi-preconditioned conjugate gradient is kept as a fallback and as an
//! independent route for tests.

use faer::linalg::solvers::Solve;
use faer::sparse::linalg::solvers::{Llt, SymbolicLlt};
use faer::sparse::{SparseColMatRef, SymbolicSparseColMatRef};
use faer::{Mat, Par, Side};

use crate::error::{Error, Result};

/// Square sparse matrix in compressed-column form with both triangles stored.
#[derive(Clone, Debug)]
pub struct SymCsc {
    n: usize,
    col_ptr: Vec<usize>,
    row_idx: Vec<usize>,
    pub values: Vec<f64>,
}

impl SymCsc {
    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.row_idx.len()
    }

    /// Position of entry `(i, j)` in `values`.
    pub fn slot(&self, i: usize, j: usize) -> Option<usize> {
        let rows = &self.row_idx[self.col_ptr[j]..self.col_ptr[j + 1]];
        rows.binary_search(&i).ok().map(|k| self.col_ptr[j] + k)
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.slot(i, j).map_or(0.0, |k| self.values[k])
    }

    /// Same sparsity pattern, all values zero.
    pub fn zeros_like(&self) -> SymCsc {
        SymCsc { values: vec![0.0; self.values.len()], ..self.clone() }
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.n];
        self.mul_vec_into(x, &mut y);
        y
    }

    pub fn mul_vec_into(&self, x: &[f64], y: &mut [f64]) {
        assert_eq!(x.len(), self.n);
        y.iter_mut().for_each(|v| *v = 0.0);
        // symmetric storage: column j times x[j] equals row j dotted with x
        for j in 0..self.n {
            let mut acc = 0.0;
            for k in self.col_ptr[j]..self.col_ptr[j + 1] {
                acc += self.values[k] * x[self.row_idx[k]];
            }
            y[j] = acc;
        }
    }

    /// `xᵀ A y`.
    pub fn bilinear(&self, x: &[f64], y: &[f64]) -> f64 {
        let mut total = 0.0;
        for j in 0..self.n {
            let mut acc = 0.0;
            for k in self.col_ptr[j]..self.col_ptr[j + 1] {
                acc += self.values[k] * x[self.row_idx[k]];
            }
            total += acc * y[j];
        }
        total
    }

    pub fn quad(&self, x: &[f64]) -> f64 {
        self.bilinear(x, x)
    }

    pub fn diag(&self) -> Vec<f64> {
        (0..self.n).map(|i| self.get(i, i)).collect()
    }

    /// Replace row and column `k` by the identity row, keeping the pattern.
    pub fn pin(&mut self, k: usize) {
        for j in 0..self.n {
            for p in self.col_ptr[j]..self.col_ptr[j + 1] {
                let i = self.row_idx[p];
                if i == k || j == k {
                    self.values[p] = if i == j { 1.0 } else { 0.0 };
                }
            }
        }
    }

    fn faer_ref(&self) -> SparseColMatRef<'_, usize, f64> {
        let symbolic =
            SymbolicSparseColMatRef::new_checked(self.n, self.n, &self.col_ptr, None, &self.row_idx);
        SparseColMatRef::new(symbolic, &self.values)
    }

    pub fn to_dense(&self) -> nalgebra::DMatrix<f64> {
        let mut d = nalgebra::DMatrix::zeros(self.n, self.n);
        for j in 0..self.n {
            for k in self.col_ptr[j]..self.col_ptr[j + 1] {
                d[(self.row_idx[k], j)] = self.values[k];
            }
        }
        d
    }
}

/// Triplet accumulator; duplicate entries are summed.
pub struct CscBuilder {
    n: usize,
    entries: Vec<(usize, usize, f64)>,
}

impl CscBuilder {
    pub fn new(n: usize) -> Self {
        Self { n, entries: Vec::new() }
    }

    pub fn add(&mut self, i: usize, j: usize, v: f64) {
        self.entries.push((i, j, v));
    }

    pub fn build(mut self) -> SymCsc {
        self.entries.sort_unstable_by_key(|&(i, j, _)| (j, i));
        let mut col_ptr = vec![0usize; self.n + 1];
        let mut row_idx = Vec::with_capacity(self.entries.len());
        let mut values: Vec<f64> = Vec::with_capacity(self.entries.len());
        let mut last: Option<(usize, usize)> = None;
        for &(i, j, v) in &self.entries {
            if last == Some((i, j)) {
                *values.last_mut().unwrap() += v;
            } else {
                row_idx.push(i);
                values.push(v);
                col_ptr[j + 1] += 1;
                last = Some((i, j));
            }
        }
        for j in 0..self.n {
            col_ptr[j + 1] += col_ptr[j];
        }
        SymCsc { n: self.n, col_ptr, row_idx, values }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum SolverKind {
    #[default]
    Cholesky,
    ConjugateGradient,
}

/// Symbolic analysis reusable across matrices sharing one pattern.
#[derive(Clone)]
pub struct SymbolicFactor(SymbolicLlt<usize>);

impl SymbolicFactor {
    pub fn analyze(pattern: &SymCsc) -> Result<Self> {
        faer::set_global_parallelism(Par::Seq);
        SymbolicLlt::try_new(pattern.faer_ref().symbolic(), Side::Lower)
            .map(SymbolicFactor)
            .map_err(|e| Error::Factorization(format!("{e:?}")))
    }
}

pub const CG_TOLERANCE: f64 = 1e-10;

enum Backend {
    Cholesky(Llt<usize, f64>),
    Cg { matrix: SymCsc, inv_diag: Vec<f64> },
}

/// Factorized (or iteratively solvable) SPD operator.
pub struct SpdSolver {
    backend: Backend,
    n: usize,
}

impl SpdSolver {
    pub fn new(matrix: &SymCsc, symbolic: Option<&SymbolicFactor>, kind: SolverKind) -> Result<Self> {
        let n = matrix.dim();
        match kind {
            SolverKind::Cholesky => {
                let symbolic = match symbolic {
                    Some(s) => s.clone(),
                    None => SymbolicFactor::analyze(matrix)?,
                };
                match Llt::try_new_with_symbolic(symbolic.0, matrix.faer_ref(), Side::Lower) {
                    Ok(llt) => Ok(Self { backend: Backend::Cholesky(llt), n }),
                    Err(faer::sparse::linalg::LltError::Numeric(e)) => {
                        Err(Error::NotSpd(format!("{e:?}")))
                    }
                    Err(e) => {
                        log_fallback(&e);
                        Self::new(matrix, None, SolverKind::ConjugateGradient)
                    }
                }
            }
            SolverKind::ConjugateGradient => {
                let inv_diag = matrix
                    .diag()
                    .into_iter()
                    .map(|d| if d > 0.0 { Ok(1.0 / d) } else { Err(Error::NotSpd("non-positive diagonal".into())) })
                    .collect::<Result<Vec<_>>>()?;
                Ok(Self { backend: Backend::Cg { matrix: matrix.clone(), inv_diag }, n })
            }
        }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn solve_in_place(&self, rhs: &mut [f64]) -> Result<()> {
        match &self.backend {
            Backend::Cholesky(llt) => {
                let mut b = faer::MatMut::from_column_major_slice_mut(rhs, self.n, 1);
                llt.solve_in_place(b.as_mut());
                Ok(())
            }
            Backend::Cg { matrix, inv_diag } => pcg(matrix, inv_diag, rhs),
        }
    }

    /// Solve for several right-hand sides at once.
    pub fn solve_many(&self, rhs: &mut [Vec<f64>]) -> Result<()> {
        match &self.backend {
            Backend::Cholesky(llt) if rhs.len() > 1 => {
                let mut b = Mat::<f64>::from_fn(self.n, rhs.len(), |i, j| rhs[j][i]);
                llt.solve_in_place(b.as_mut());
                for (j, col) in rhs.iter_mut().enumerate() {
                    for (i, v) in col.iter_mut().enumerate() {
                        *v = b[(i, j)];
                    }
                }
                Ok(())
            }
            _ => rhs.iter_mut().try_for_each(|r| self.solve_in_place(r)),
        }
    }
}

fn log_fallback(e: &faer::sparse::linalg::LltError) {
    eprintln!("sparse Cholesky unavailable ({e:?}); falling back to conjugate gradient");
}

fn pcg(a: &SymCsc, inv_diag: &[f64], rhs: &mut [f64]) -> Result<()> {
    let n = rhs.len();
    let b = rhs.to_vec();
    let bnorm = dot(&b, &b).sqrt();
    if bnorm == 0.0 {
        return Ok(());
    }
    let mut x = vec![0.0; n];
    let mut r = b;
    let mut z: Vec<f64> = r.iter().zip(inv_diag).map(|(r, d)| r * d).collect();
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    let mut ap = vec![0.0; n];
    let max_iter = 20 * n + 100;
    for _ in 0..max_iter {
        a.mul_vec_into(&p, &mut ap);
        let alpha = rz / dot(&p, &ap);
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        if dot(&r, &r).sqrt() <= CG_TOLERANCE * bnorm {
            rhs.copy_from_slice(&x);
            return Ok(());
        }
        for i in 0..n {
            z[i] = r[i] * inv_diag[i];
        }
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    Err(Error::NoConvergence {
        what: "conjugate gradient",
        iterations: max_iter,
        residual: dot(&r, &r).sqrt() / bnorm,
    })
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn laplacian_1d(n: usize) -> SymCsc {
        let mut b = CscBuilder::new(n);
        for i in 0..n {
            b.add(i, i, 2.0);
            if i + 1 < n {
                b.add(i, i + 1, -1.0);
                b.add(i + 1, i, -1.0);
            }
        }
        b.build()
    }

    #[test]
    fn builder_sums_duplicates() {
        let mut b = CscBuilder::new(2);
        b.add(0, 0, 1.0);
        b.add(0, 0, 2.0);
        b.add(1, 0, 0.5);
        b.add(0, 1, 0.5);
        let m = b.build();
        assert_eq!(m.nnz(), 3);
        assert_eq!(m.get(0, 0), 3.0);
        assert_eq!(m.get(1, 1), 0.0);
    }

    #[test]
    fn cholesky_and_cg_agree() {
        let a = laplacian_1d(50);
        let rhs: Vec<f64> = (0..50).map(|i| (i as f64 * 0.3).sin()).collect();
        let mut x1 = rhs.clone();
        SpdSolver::new(&a, None, SolverKind::Cholesky).unwrap().solve_in_place(&mut x1).unwrap();
        let mut x2 = rhs.clone();
        SpdSolver::new(&a, None, SolverKind::ConjugateGradient)
            .unwrap()
            .solve_in_place(&mut x2)
            .unwrap();
        let r = a.mul_vec(&x1);
        for i in 0..50 {
            assert!((r[i] - rhs[i]).abs() < 1e-10);
            assert!((x1[i] - x2[i]).abs() < 1e-7);
        }
    }

    #[test]
    fn indefinite_matrix_rejected() {
        let mut a = laplacian_1d(4);
        a.values.iter_mut().for_each(|v| *v = -*v);
        assert!(matches!(SpdSolver::new(&a, None, SolverKind::Cholesky), Err(Error::NotSpd(_))));
    }
}
