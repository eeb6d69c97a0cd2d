//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

use effective_diffusion::TriMesh;
use nalgebra::{DMatrix, DVector, SymmetricEigen};

/// Dense Laplace stiffness and boundary mass built directly from the mesh.
pub fn dense_operators(mesh: &TriMesh) -> (DMatrix<f64>, DMatrix<f64>) {
    let n = mesh.num_nodes();
    let mut k = DMatrix::zeros(n, n);
    for tri in &mesh.triangles {
        let p: Vec<[f64; 2]> = tri.iter().map(|&i| mesh.nodes[i]).collect();
        let det = (p[1][0] - p[0][0]) * (p[2][1] - p[0][1]) - (p[2][0] - p[0][0]) * (p[1][1] - p[0][1]);
        let area = 0.5 * det.abs();
        // gradient of the barycentric coordinate of vertex a
        let grad = |a: usize| {
            let (b, c) = ((a + 1) % 3, (a + 2) % 3);
            [(p[b][1] - p[c][1]) / det, (p[c][0] - p[b][0]) / det]
        };
        for a in 0..3 {
            for b in 0..3 {
                let (ga, gb) = (grad(a), grad(b));
                k[(tri[a], tri[b])] += area * (ga[0] * gb[0] + ga[1] * gb[1]);
            }
        }
    }
    let nb = mesh.num_boundary_dofs();
    let mut m = DMatrix::zeros(nb, nb);
    for e in &mesh.boundary_edges {
        let d = [mesh.boundary_dof(e.nodes[0]).unwrap(), mesh.boundary_dof(e.nodes[1]).unwrap()];
        for a in 0..2 {
            for b in 0..2 {
                m[(d[a], d[b])] += e.length / 6.0 * if a == b { 2.0 } else { 1.0 };
            }
        }
    }
    (k, m)
}

/// Leading eigenpairs of the Neumann-to-Dirichlet map from a dense
/// Lagrange-multiplier solve, mass-orthonormal.
pub fn dense_modes(mesh: &TriMesh) -> (Vec<f64>, Vec<Vec<f64>>) {
    let (k, m) = dense_operators(mesh);
    let n = mesh.num_nodes();
    let nb = mesh.num_boundary_dofs();
    let bnodes: Vec<usize> =
        (0..n).filter_map(|i| mesh.boundary_dof(i).map(|d| (d, i))).collect::<std::collections::BTreeMap<_, _>>().into_values().collect();
    let w: DVector<f64> = m.column_sum();
    // [K C; Cᵀ 0] with C the boundary-integral functional
    let mut a = DMatrix::zeros(n + 1, n + 1);
    a.view_mut((0, 0), (n, n)).copy_from(&k);
    for (d, &node) in bnodes.iter().enumerate() {
        a[(node, n)] = w[d];
        a[(n, node)] = w[d];
    }
    let lu = a.lu();
    let perim = w.sum();
    // T = trace ∘ solve ∘ M_b on zero-mean data: columns T P e_j
    let mut t = DMatrix::zeros(nb, nb);
    for j in 0..nb {
        let mut g = DVector::zeros(nb);
        g[j] = 1.0;
        let c = w.dot(&g) / perim;
        g.add_scalar_mut(-c);
        let load = &m * &g;
        let mut rhs = DVector::zeros(n + 1);
        for (d, &node) in bnodes.iter().enumerate() {
            rhs[node] = load[d];
        }
        let u = lu.solve(&rhs).unwrap();
        for (d, &node) in bnodes.iter().enumerate() {
            t[(d, j)] = u[node];
        }
    }
    // S = M T is symmetric; reduce with the Cholesky factor of M
    let s = &m * &t;
    let s = (&s + s.transpose()) * 0.5;
    let l = m.clone().cholesky().unwrap().l();
    let x = l.solve_lower_triangular(&s).unwrap();
    let c = l.solve_lower_triangular(&x.transpose()).unwrap();
    let eig = SymmetricEigen::new((&c + c.transpose()) * 0.5);
    let mut idx: Vec<usize> = (0..nb).collect();
    idx.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));
    let lt = l.transpose();
    let values = idx.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vectors = idx
        .iter()
        .map(|&i| {
            let y = eig.eigenvectors.column(i).into_owned();
            lt.clone().solve_upper_triangular(&y).unwrap().iter().copied().collect()
        })
        .collect();
    (values, vectors)
}

