//! Boundary-condition families spanning the search space of the sup
//! problem: eigenmodes of the Laplace Neumann-to-Dirichlet operator `R` and
//! the affine family `e_ij · n`.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::coefficients::{CoefficientField, SymMat};
use crate::eigen::{block_krylov, Deflation, KrylovOptions, Target};
use crate::error::{Error, Result};
use crate::mesh::{Point, TriMesh};
use crate::solver::{BoundaryFunction, BoundarySpace, NeumannSolver};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModeFamily {
    RModes,
    Affine,
}

/// Ordered boundary data spanning the search space.
#[derive(Clone, Debug)]
pub struct ModeBasis {
    pub modes: Vec<BoundaryFunction>,
    /// Eigenvalues of `R`, non-increasing; absent for the affine family.
    pub eigenvalues: Option<Vec<f64>>,
    pub family: ModeFamily,
}

impl ModeBasis {
    pub fn len(&self) -> usize {
        self.modes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.modes.is_empty()
    }

    /// Keep the first `p` modes.
    pub fn truncated(&self, p: usize) -> ModeBasis {
        ModeBasis {
            modes: self.modes[..p.min(self.len())].to_vec(),
            eigenvalues: self.eigenvalues.as_ref().map(|e| e[..p.min(e.len())].to_vec()),
            family: self.family,
        }
    }

    /// One row per boundary node: `arclength x y φ_1 … φ_P`.
    pub fn write_table<W: std::io::Write>(&self, mesh: &TriMesh, mut out: W) -> std::io::Result<()> {
        for (k, &node) in mesh.boundary_nodes.iter().enumerate() {
            let [x, y] = mesh.nodes[node];
            write!(out, "{} {x} {y}", mesh.boundary_arclength(node))?;
            for m in &self.modes {
                write!(out, " {}", m.values[k])?;
            }
            writeln!(out)?;
        }
        Ok(())
    }
}

/// Number of modes used for a given ε: 3 below 0.2, 5 from 0.2 on.
pub fn choose_p(epsilon: f64) -> usize {
    if epsilon < 0.2 {
        3
    } else {
        5
    }
}

/// Relative gap below which eigenvalues are treated as one multiple eigenvalue.
pub const DEGENERACY_GAP: f64 = 1e-8;
pub const MODE_TOLERANCE: f64 = 1e-10;
const START_SEED: u64 = 0x5eed_0f_b10c;

/// Discrete operator `g ↦ trace u(Id, g)` on the given mesh.
pub fn laplace_ntd(mesh: &TriMesh) -> Result<NeumannSolver> {
    NeumannSolver::for_field(mesh, &CoefficientField::constant(SymMat::identity()))
}

/// Leading `p` eigenpairs of `R` on zero-mean boundary data, orthonormal in
/// the boundary L² product and put in canonical form.
pub fn compute_r_modes(mesh: &TriMesh, p: usize) -> Result<ModeBasis> {
    let nb = mesh.num_boundary_dofs();
    if p == 0 || p > nb - 1 {
        return Err(Error::invalid(format!(
            "cannot extract {p} modes from {} zero-mean boundary functions",
            nb.saturating_sub(1)
        )));
    }
    let ntd = laplace_ntd(mesh)?;
    let space = ntd.space().clone();
    // extra pairs so that a multiple eigenvalue straddling index p is complete
    let nev = (p + 3).min(nb - 1);
    let start = start_block(mesh, 2);
    let eig = block_krylov(
        |xs| xs.iter().map(|g| ntd.apply_ntd(g)).collect(),
        &space.mass,
        Some(Deflation { weights: &space.weights, total: space.perimeter }),
        start,
        &KrylovOptions { nev, target: Target::Largest, tol: MODE_TOLERANCE, max_basis: None },
    )?;
    let (values, vectors) = canonicalize(mesh, &space, eig.values, eig.vectors);
    if values.iter().take(p).any(|&l| !(l > 0.0)) {
        return Err(Error::NotSpd("Neumann-to-Dirichlet operator has a non-positive mode".into()));
    }
    Ok(ModeBasis {
        modes: vectors.into_iter().take(p).map(BoundaryFunction::new).collect(),
        eigenvalues: Some(values.into_iter().take(p).collect()),
        family: ModeFamily::RModes,
    })
}

/// Smooth generic traces followed by seeded random vectors. The random part
/// keeps the Krylov space from being trapped in a symmetry class of the square.
fn start_block(mesh: &TriMesh, random: usize) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = (0..2).map(|k| reference_trace(mesh, k)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(START_SEED);
    for _ in 0..random {
        out.push((0..mesh.num_boundary_dofs()).map(|_| rng.random::<f64>() - 0.5).collect());
    }
    out
}

/// Reference functions fixing a basis inside multiple eigenspaces: the k-th
/// is `(cos θ_k X + sin θ_k Y)^{1 + k/2}` with `X = x − ½`, `Y = y − ½` and
/// generic angles, so that no reflection symmetry of the square is preserved.
fn reference_trace(mesh: &TriMesh, k: usize) -> Vec<f64> {
    let theta = PI / 8.0 + if k == 1 { PI / 2.0 } else { 0.7 * k as f64 };
    let degree = 1 + k as i32 / 2;
    let (c, s) = (theta.cos(), theta.sin());
    BoundaryFunction::interpolate(mesh, |p: Point| (c * (p[0] - 0.5) + s * (p[1] - 0.5)).powi(degree)).values
}

/// Fix a deterministic representative of every eigenvector: within a block of
/// numerically equal eigenvalues the basis is obtained by projecting the
/// reference functions into the eigenspace (Gram–Schmidt in their order);
/// then each vector's entry of largest absolute value is made positive.
pub fn canonicalize(
    mesh: &TriMesh,
    space: &BoundarySpace,
    values: Vec<f64>,
    vectors: Vec<Vec<f64>>,
) -> (Vec<f64>, Vec<Vec<f64>>) {
    let scale = values.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
    let mut out_vecs: Vec<Vec<f64>> = Vec::with_capacity(vectors.len());
    let mut start = 0;
    while start < values.len() {
        let mut end = start + 1;
        while end < values.len() && (values[end] - values[end - 1]).abs() <= DEGENERACY_GAP * scale {
            end += 1;
        }
        let block = &vectors[start..end];
        if block.len() == 1 {
            out_vecs.push(block[0].clone());
        } else {
            let mut chosen: Vec<Vec<f64>> = Vec::new();
            let mut k = 0;
            while chosen.len() < block.len() && k < 64 {
                let r = reference_trace(mesh, k);
                k += 1;
                // M-orthogonal projection of r onto the block, minus earlier picks
                let mut x = vec![0.0; r.len()];
                for b in block {
                    let c = space.inner(b, &r);
                    x.iter_mut().zip(b).for_each(|(a, v)| *a += c * v);
                }
                for q in &chosen {
                    let c = space.inner(q, &x);
                    x.iter_mut().zip(q).for_each(|(a, v)| *a -= c * v);
                }
                let after = space.norm(&x);
                if after > 1e-6 * space.norm(&r) {
                    x.iter_mut().for_each(|a| *a /= after);
                    chosen.push(x);
                }
            }
            // fall back to the solver's own vectors if the references do not span the block
            for b in block.iter() {
                if chosen.len() == block.len() {
                    break;
                }
                let mut x = b.clone();
                for q in &chosen {
                    let c = space.inner(q, &x);
                    x.iter_mut().zip(q).for_each(|(a, v)| *a -= c * v);
                }
                let n = space.norm(&x);
                if n > 1e-6 {
                    x.iter_mut().for_each(|a| *a /= n);
                    chosen.push(x);
                }
            }
            out_vecs.extend(chosen);
        }
        start = end;
    }
    for v in out_vecs.iter_mut() {
        apply_sign_convention(v);
    }
    (values, out_vecs)
}

/// Make the entry of largest absolute value positive. Entries within a
/// relative 1e-6 of each other count as tied and the first one wins, so that
/// symmetric modes get the same sign whatever solver produced them.
pub fn apply_sign_convention(v: &mut [f64]) {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if x.abs() > v[best].abs() * (1.0 + 1e-6) {
            best = i;
        }
    }
    if v.get(best).is_some_and(|&x| x < 0.0) {
        v.iter_mut().for_each(|x| *x = -*x);
    }
}

/// The three data `n₁`, `n₂`, `(n₁ + n₂)/2`, each L²-projected, made
/// zero-mean and normalized. The family is linearly dependent (the third
/// datum is the average of the first two), so it is not orthonormalized.
pub fn affine_modes(mesh: &TriMesh) -> Result<ModeBasis> {
    let space = BoundarySpace::new(mesh);
    let dirs: [Point; 3] = [[1.0, 0.0], [0.0, 1.0], [0.5, 0.5]];
    let modes = dirs
        .iter()
        .map(|&e| BoundaryFunction::normal_component(mesh, &space, e)?.zero_mean(&space).normalized(&space))
        .collect::<Result<Vec<_>>>()?;
    Ok(ModeBasis { modes, eigenvalues: None, family: ModeFamily::Affine })
}

/// Transfer a basis computed on `coarse` to a nested `fine` mesh.
pub fn prolongate_basis(basis: &ModeBasis, transfer: &crate::mesh::Transfer) -> ModeBasis {
    ModeBasis {
        modes: basis.modes.iter().map(|m| BoundaryFunction::new(transfer.boundary(&m.values))).collect(),
        eigenvalues: basis.eigenvalues.clone(),
        family: basis.family,
    }
}
