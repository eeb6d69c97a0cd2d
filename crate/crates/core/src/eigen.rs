//! Block Krylov (Lanczos-type) eigensolver for operators that are
//! self-adjoint in a mass inner product and only available through their
//! action on vectors.
//!
//! The basis is kept fully reorthogonalized and the Rayleigh–Ritz problem is
//! solved over the whole basis at every step, which is affordable for the
//! boundary-sized problems met here (a few thousand unknowns at most).

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};
use crate::sparse::{dot, SymCsc};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Target {
    /// Algebraically largest eigenvalues.
    Largest,
    /// Eigenvalues of largest absolute value.
    LargestMagnitude,
}

#[derive(Clone, Debug)]
pub struct EigenResult {
    pub values: Vec<f64>,
    /// Mass-orthonormal eigenvectors.
    pub vectors: Vec<Vec<f64>>,
    /// Mass-norm residuals `‖A v − λ v‖`.
    pub residuals: Vec<f64>,
    pub basis_size: usize,
}

/// Constant function to project out: `weights` are the integrals of the
/// basis functions, `total` their sum (the measure of the domain).
#[derive(Clone, Copy)]
pub struct Deflation<'a> {
    pub weights: &'a [f64],
    pub total: f64,
}

impl Deflation<'_> {
    fn apply(&self, v: &mut [f64]) {
        let c = dot(self.weights, v) / self.total;
        v.iter_mut().for_each(|x| *x -= c);
    }
}

pub struct KrylovOptions {
    pub nev: usize,
    pub target: Target,
    /// Convergence when every wanted residual is at most `tol · max|λ|`.
    pub tol: f64,
    pub max_basis: Option<usize>,
}

/// Compute `nev` eigenpairs of `apply`, self-adjoint in the `mass` inner
/// product on the complement of the deflated constant.
pub fn block_krylov(
    mut apply: impl FnMut(&[Vec<f64>]) -> Result<Vec<Vec<f64>>>,
    mass: &SymCsc,
    deflation: Option<Deflation<'_>>,
    start: Vec<Vec<f64>>,
    opts: &KrylovOptions,
) -> Result<EigenResult> {
    let n = mass.dim();
    let space_dim = n - usize::from(deflation.is_some());
    let max_basis = opts.max_basis.unwrap_or(space_dim).min(space_dim);
    let mut v: Vec<Vec<f64>> = Vec::new();
    let mut mv: Vec<Vec<f64>> = Vec::new();
    let mut w: Vec<Vec<f64>> = Vec::new();
    let mut t = DMatrix::<f64>::zeros(0, 0);
    let mut block = start;
    let mut last_residual = f64::INFINITY;

    loop {
        let mut fresh = Vec::new();
        for mut x in block.drain(..) {
            if v.len() + fresh.len() >= max_basis {
                break;
            }
            if let Some(d) = deflation {
                d.apply(&mut x);
            }
            let before = mass.quad(&x).max(0.0).sqrt();
            if before == 0.0 {
                continue;
            }
            // two passes of classical Gram–Schmidt against the basis and the block
            for _ in 0..2 {
                for (q, mq) in v.iter().zip(&mv).chain(fresh.iter().map(|(a, b): &(Vec<f64>, Vec<f64>)| (a, b))) {
                    let c = dot(mq, &x);
                    x.iter_mut().zip(q).for_each(|(a, b)| *a -= c * b);
                }
            }
            if let Some(d) = deflation {
                d.apply(&mut x);
            }
            let after = mass.quad(&x).max(0.0).sqrt();
            if after <= 1e-10 * before {
                continue;
            }
            x.iter_mut().for_each(|a| *a /= after);
            let mx = mass.mul_vec(&x);
            fresh.push((x, mx));
        }
        if fresh.is_empty() {
            break;
        }
        let new_v: Vec<Vec<f64>> = fresh.iter().map(|(x, _)| x.clone()).collect();
        let mut new_w = apply(&new_v)?;
        if let Some(d) = deflation {
            new_w.iter_mut().for_each(|x| d.apply(x));
        }
        let old = v.len();
        for (x, mx) in fresh {
            v.push(x);
            mv.push(mx);
        }
        w.extend(new_w.iter().cloned());

        let k = v.len();
        let mut grown = DMatrix::<f64>::zeros(k, k);
        grown.view_mut((0, 0), (old, old)).copy_from(&t);
        for j in old..k {
            for i in 0..k {
                let a = dot(&mv[i], &w[j]);
                let b = if i < old { a } else { dot(&mv[j], &w[i]) };
                grown[(i, j)] = 0.5 * (a + b);
                grown[(j, i)] = grown[(i, j)];
            }
        }
        t = grown;

        let ritz = rayleigh_ritz(&t, &v, &w, mass, opts);
        let scale = ritz.values.iter().fold(0.0f64, |m, x| m.max(x.abs())).max(f64::MIN_POSITIVE);
        last_residual = ritz.residuals.iter().fold(0.0f64, |m, &r| m.max(r)) / scale;
        let converged = ritz.values.len() == opts.nev.min(space_dim) && last_residual <= opts.tol;
        // a basis spanning the whole space makes Rayleigh–Ritz exact
        if converged || k >= space_dim {
            return Ok(ritz);
        }
        if k >= max_basis {
            break;
        }
        block = new_w;
    }
    if !v.is_empty() {
        // the Krylov space became invariant: Ritz pairs are exact within it
        let ritz = rayleigh_ritz(&t, &v, &w, mass, opts);
        let scale = ritz.values.iter().fold(0.0f64, |m, x| m.max(x.abs())).max(f64::MIN_POSITIVE);
        let worst = ritz.residuals.iter().fold(0.0f64, |m, &r| m.max(r)) / scale;
        if worst <= opts.tol {
            return Ok(ritz);
        }
        last_residual = worst;
    }
    Err(Error::NoConvergence { what: "block Krylov eigensolver", iterations: v.len(), residual: last_residual })
}

fn rayleigh_ritz(
    t: &DMatrix<f64>,
    v: &[Vec<f64>],
    w: &[Vec<f64>],
    mass: &SymCsc,
    opts: &KrylovOptions,
) -> EigenResult {
    let k = v.len();
    let eig = SymmetricEigen::new(t.clone());
    let mut order: Vec<usize> = (0..k).collect();
    let key = |i: usize| match opts.target {
        Target::Largest => eig.eigenvalues[i],
        Target::LargestMagnitude => eig.eigenvalues[i].abs(),
    };
    order.sort_by(|&a, &b| key(b).total_cmp(&key(a)));
    order.truncate(opts.nev);
    let n = mass.dim();
    let mut out = EigenResult { values: vec![], vectors: vec![], residuals: vec![], basis_size: k };
    for &i in &order {
        let theta = eig.eigenvalues[i];
        let y = eig.eigenvectors.column(i);
        let mut x = vec![0.0; n];
        let mut r = vec![0.0; n];
        for j in 0..k {
            let c = y[j];
            for p in 0..n {
                x[p] += c * v[j][p];
                r[p] += c * w[j][p];
            }
        }
        for p in 0..n {
            r[p] -= theta * x[p];
        }
        out.values.push(theta);
        out.residuals.push(mass.quad(&r).max(0.0).sqrt());
        out.vectors.push(x);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sparse::CscBuilder;

    #[test]
    fn diagonal_operator_in_weighted_product() {
        // A = diag(d) self-adjoint for the mass diag(m) when applied as x ↦ d∘x
        let n = 40;
        let mut b = CscBuilder::new(n);
        let m: Vec<f64> = (0..n).map(|i| 1.0 + (i % 3) as f64).collect();
        for i in 0..n {
            b.add(i, i, m[i]);
        }
        let mass = b.build();
        let d: Vec<f64> = (0..n).map(|i| 1.0 / (1.0 + i as f64) - if i == 5 { 2.0 } else { 0.0 }).collect();
        let start = vec![(0..n).map(|i| ((i * 7 + 3) % 11) as f64 - 5.5).collect()];
        let apply = |xs: &[Vec<f64>]| Ok(xs.iter().map(|x| x.iter().zip(&d).map(|(a, b)| a * b).collect()).collect());
        let r = block_krylov(
            apply,
            &mass,
            None,
            start.clone(),
            &KrylovOptions { nev: 3, target: Target::Largest, tol: 1e-12, max_basis: None },
        )
        .unwrap();
        assert!((r.values[0] - 1.0).abs() < 1e-12);
        assert!((r.values[1] - 0.5).abs() < 1e-12);
        assert!((r.values[2] - 1.0 / 3.0).abs() < 1e-12);
        let r = block_krylov(
            apply,
            &mass,
            None,
            start,
            &KrylovOptions { nev: 1, target: Target::LargestMagnitude, tol: 1e-12, max_basis: None },
        )
        .unwrap();
        assert!((r.values[0] - (1.0 / 6.0 - 2.0)).abs() < 1e-12);
        assert!((mass.quad(&r.vectors[0]) - 1.0).abs() < 1e-12);
    }
}
