//! P1 finite elements for pure-Neumann diffusion problems and periodic
//! cell problems.
//!
//! Solutions are normalized to zero boundary mean. The singular Neumann
//! matrix is made invertible by replacing one row and column with the
//! identity; for compatible data this reproduces the unique solution up to
//! an additive constant, which is then removed by the boundary-mean shift.

use crate::coefficients::{CoefficientField, SymMat};
use crate::error::{Error, Result};
use crate::mesh::{Point, TriMesh};
use crate::sparse::{dot, CscBuilder, SolverKind, SpdSolver, SymCsc, SymbolicFactor};

/// Boundary degrees of freedom of a mesh with their mass matrix.
#[derive(Clone, Debug)]
pub struct BoundarySpace {
    pub nodes: Vec<usize>,
    pub mass: SymCsc,
    /// `∫ φ_k` for every boundary hat function (row sums of `mass`).
    pub weights: Vec<f64>,
    pub perimeter: f64,
    num_mesh_nodes: usize,
}

impl BoundarySpace {
    pub fn new(mesh: &TriMesh) -> Self {
        let mass = mesh.boundary_mass_matrix();
        let weights = mass.mul_vec(&vec![1.0; mass.dim()]);
        Self {
            nodes: mesh.boundary_nodes.clone(),
            perimeter: weights.iter().sum(),
            weights,
            mass,
            num_mesh_nodes: mesh.num_nodes(),
        }
    }

    pub fn dim(&self) -> usize {
        self.nodes.len()
    }

    pub fn inner(&self, f: &[f64], g: &[f64]) -> f64 {
        self.mass.bilinear(f, g)
    }

    pub fn norm(&self, f: &[f64]) -> f64 {
        self.inner(f, f).max(0.0).sqrt()
    }

    /// `⟨f, 1⟩`.
    pub fn integral(&self, f: &[f64]) -> f64 {
        dot(&self.weights, f)
    }

    pub fn trace(&self, nodal: &[f64]) -> Vec<f64> {
        self.nodes.iter().map(|&k| nodal[k]).collect()
    }

    /// Remove the boundary mean from a boundary vector in place.
    pub fn remove_mean(&self, f: &mut [f64]) {
        let c = self.integral(f) / self.perimeter;
        f.iter_mut().for_each(|v| *v -= c);
    }

    fn check_mesh(&self, mesh: &TriMesh) -> Result<()> {
        if mesh.num_nodes() != self.num_mesh_nodes || mesh.boundary_nodes != self.nodes {
            return Err(Error::invalid("boundary data belongs to a different mesh"));
        }
        Ok(())
    }
}

/// Boundary datum `g`, stored as a continuous piecewise-linear function on the
/// boundary loop.
#[derive(Clone, Debug, PartialEq)]
pub struct BoundaryFunction {
    pub values: Vec<f64>,
}

impl BoundaryFunction {
    pub fn new(values: Vec<f64>) -> Self {
        Self { values }
    }

    pub fn zeros(n: usize) -> Self {
        Self { values: vec![0.0; n] }
    }

    /// L² projection of `f(x, normal)` onto boundary P1 functions. Edge
    /// integrals use three-point Gauss quadrature, which is exact for the
    /// piecewise-polynomial data used here (normals, traces of low-degree
    /// polynomials).
    pub fn project(
        mesh: &TriMesh,
        space: &BoundarySpace,
        f: impl Fn(Point, Point) -> f64,
    ) -> Result<Self> {
        const GAUSS: [(f64, f64); 3] = [
            (0.112_701_665_379_258_3, 5.0 / 18.0),
            (0.5, 8.0 / 18.0),
            (0.887_298_334_620_741_7, 5.0 / 18.0),
        ];
        let mut load = vec![0.0; space.dim()];
        for e in &mesh.boundary_edges {
            let (pa, pb) = (mesh.nodes[e.nodes[0]], mesh.nodes[e.nodes[1]]);
            let a = mesh.boundary_dof(e.nodes[0]).expect("boundary node");
            let b = mesh.boundary_dof(e.nodes[1]).expect("boundary node");
            for (s, w) in GAUSS {
                let x = [pa[0] + s * (pb[0] - pa[0]), pa[1] + s * (pb[1] - pa[1])];
                let v = w * e.length * f(x, e.normal);
                load[a] += (1.0 - s) * v;
                load[b] += s * v;
            }
        }
        SpdSolver::new(&space.mass, None, SolverKind::Cholesky)?.solve_in_place(&mut load)?;
        Ok(Self { values: load })
    }

    /// Projection of the normal component `e · n`.
    pub fn normal_component(mesh: &TriMesh, space: &BoundarySpace, e: Point) -> Result<Self> {
        Self::project(mesh, space, |_, n| e[0] * n[0] + e[1] * n[1])
    }

    /// Nodal interpolation of a function on the boundary.
    pub fn interpolate(mesh: &TriMesh, f: impl Fn(Point) -> f64) -> Self {
        Self { values: mesh.boundary_nodes.iter().map(|&k| f(mesh.nodes[k])).collect() }
    }

    pub fn mean(&self, space: &BoundarySpace) -> f64 {
        space.integral(&self.values) / space.perimeter
    }

    pub fn norm(&self, space: &BoundarySpace) -> f64 {
        space.norm(&self.values)
    }

    pub fn zero_mean(mut self, space: &BoundarySpace) -> Self {
        space.remove_mean(&mut self.values);
        self
    }

    pub fn normalized(mut self, space: &BoundarySpace) -> Result<Self> {
        let n = self.norm(space);
        if n == 0.0 || !n.is_finite() {
            return Err(Error::invalid("cannot normalize a zero boundary function"));
        }
        self.values.iter_mut().for_each(|v| *v /= n);
        Ok(self)
    }

    pub fn scaled(mut self, c: f64) -> Self {
        self.values.iter_mut().for_each(|v| *v *= c);
        self
    }

    /// `M_b g`, the discrete flux load on boundary DOFs.
    pub fn load(&self, space: &BoundarySpace) -> Vec<f64> {
        space.mass.mul_vec(&self.values)
    }
}

/// Discrete Neumann solution over all mesh nodes, with zero boundary mean.
#[derive(Clone, Debug)]
pub struct NeumannSolution {
    pub values: Vec<f64>,
    pub flux_datum: BoundaryFunction,
}

impl NeumannSolution {
    pub fn trace(&self, space: &BoundarySpace) -> Vec<f64> {
        space.trace(&self.values)
    }
}

/// Element-by-element stiffness assembly on a fixed sparsity pattern.
#[derive(Clone)]
pub struct StiffnessAssembler {
    pattern: SymCsc,
    slots: Vec<[usize; 9]>,
    elements: Vec<([Point; 3], f64)>,
    barycenters: Vec<Point>,
}

impl StiffnessAssembler {
    pub fn new(mesh: &TriMesh) -> Self {
        let mut b = CscBuilder::new(mesh.num_nodes());
        for tri in &mesh.triangles {
            for &i in tri {
                for &j in tri {
                    b.add(i, j, 0.0);
                }
            }
        }
        let pattern = b.build();
        let slots = mesh
            .triangles
            .iter()
            .map(|tri| {
                let mut s = [0; 9];
                for a in 0..3 {
                    for c in 0..3 {
                        s[3 * a + c] = pattern.slot(tri[a], tri[c]).expect("pattern entry");
                    }
                }
                s
            })
            .collect();
        let elements = (0..mesh.triangles.len()).map(|t| mesh.shape_gradients(t)).collect();
        let barycenters = (0..mesh.triangles.len()).map(|t| mesh.barycenter(t)).collect();
        Self { pattern, slots, elements, barycenters }
    }

    pub fn pattern(&self) -> &SymCsc {
        &self.pattern
    }

    /// Assemble `∫ A ∇φ_j · ∇φ_i` with a constant matrix per element.
    pub fn assemble_with(&self, coef: impl Fn(usize) -> SymMat) -> SymCsc {
        let mut k = self.pattern.zeros_like();
        for (t, (grads, area)) in self.elements.iter().enumerate() {
            let a = coef(t);
            for i in 0..3 {
                for j in 0..3 {
                    k.values[self.slots[t][3 * i + j]] += area * a.form(grads[i], grads[j]);
                }
            }
        }
        k
    }

    /// One-point (barycenter) quadrature of the coefficient field.
    pub fn assemble(&self, field: &CoefficientField) -> SymCsc {
        if let Some(m) = field.is_constant() {
            return self.assemble_with(|_| m);
        }
        self.assemble_with(|t| field.eval(self.barycenters[t]))
    }

    /// Derivatives of the stiffness matrix with respect to `(a11, a12, a22)`
    /// of a constant coefficient: `K(A) = a11·K₁ + a12·K₂ + a22·K₃`.
    pub fn components(&self) -> [SymCsc; 3] {
        [
            self.assemble_with(|_| SymMat::new(1.0, 0.0, 0.0)),
            self.assemble_with(|_| SymMat::new(0.0, 1.0, 0.0)),
            self.assemble_with(|_| SymMat::new(0.0, 0.0, 1.0)),
        ]
    }
}

/// Factorized Neumann operator for one coefficient on one mesh.
pub struct NeumannSolver {
    space: BoundarySpace,
    factor: SpdSolver,
    pin: usize,
}

impl NeumannSolver {
    /// Factor a (singular, Neumann) stiffness matrix. The symbolic analysis may
    /// be shared between coefficients on the same mesh.
    pub fn new(
        space: BoundarySpace,
        stiffness: &SymCsc,
        symbolic: Option<&SymbolicFactor>,
        kind: SolverKind,
    ) -> Result<Self> {
        let pin = space.nodes[0];
        let mut k = stiffness.clone();
        k.pin(pin);
        let factor = SpdSolver::new(&k, symbolic, kind)?;
        Ok(Self { space, factor, pin })
    }

    pub fn for_field(mesh: &TriMesh, field: &CoefficientField) -> Result<Self> {
        let k = StiffnessAssembler::new(mesh).assemble(field);
        Self::new(BoundarySpace::new(mesh), &k, None, SolverKind::Cholesky)
    }

    pub fn space(&self) -> &BoundarySpace {
        &self.space
    }

    fn embed(&self, load: &[f64]) -> Result<Vec<f64>> {
        let norm_bound = load.iter().map(|v| v * v).sum::<f64>().sqrt();
        let mean: f64 = load.iter().sum();
        if mean.abs() > 1e-10 * norm_bound.max(f64::MIN_POSITIVE) * (self.space.dim() as f64).sqrt() {
            return Err(Error::Incompatible { mean, norm: norm_bound });
        }
        let mut b = vec![0.0; self.factor.dim()];
        for (&node, &v) in self.space.nodes.iter().zip(load) {
            b[node] = v;
        }
        b[self.pin] = 0.0;
        Ok(b)
    }

    fn normalize(&self, u: &mut [f64]) {
        let c = self
            .space
            .nodes
            .iter()
            .zip(&self.space.weights)
            .map(|(&k, w)| w * u[k])
            .sum::<f64>()
            / self.space.perimeter;
        u.iter_mut().for_each(|v| *v -= c);
    }

    /// Solve for a boundary load vector `M_b g` (must sum to zero).
    pub fn solve_load(&self, load: &[f64]) -> Result<Vec<f64>> {
        let mut u = self.embed(load)?;
        self.factor.solve_in_place(&mut u)?;
        self.normalize(&mut u);
        Ok(u)
    }

    pub fn solve_loads(&self, loads: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        let mut rhs = loads.iter().map(|l| self.embed(l)).collect::<Result<Vec<_>>>()?;
        self.factor.solve_many(&mut rhs)?;
        rhs.iter_mut().for_each(|u| self.normalize(u));
        Ok(rhs)
    }

    pub fn solve(&self, g: &BoundaryFunction) -> Result<NeumannSolution> {
        self.check_datum(g)?;
        let values = self.solve_load(&g.load(&self.space))?;
        Ok(NeumannSolution { values, flux_datum: g.clone() })
    }

    pub fn solve_many(&self, gs: &[BoundaryFunction]) -> Result<Vec<NeumannSolution>> {
        for g in gs {
            self.check_datum(g)?;
        }
        let loads: Vec<_> = gs.iter().map(|g| g.load(&self.space)).collect();
        Ok(self
            .solve_loads(&loads)?
            .into_iter()
            .zip(gs)
            .map(|(values, g)| NeumannSolution { values, flux_datum: g.clone() })
            .collect())
    }

    /// Boundary trace of the solution for datum `g`: the discrete
    /// Neumann-to-Dirichlet map.
    pub fn apply_ntd(&self, g: &[f64]) -> Result<Vec<f64>> {
        let u = self.solve_load(&self.space.mass.mul_vec(g))?;
        Ok(self.space.trace(&u))
    }

    fn check_datum(&self, g: &BoundaryFunction) -> Result<()> {
        if g.values.len() != self.space.dim() {
            return Err(Error::invalid(format!(
                "boundary datum has {} values, mesh has {} boundary DOFs",
                g.values.len(),
                self.space.dim()
            )));
        }
        let mean = self.space.integral(&g.values);
        let norm = g.norm(&self.space);
        if mean.abs() > 1e-10 * norm * self.space.perimeter.sqrt() {
            return Err(Error::Incompatible { mean, norm });
        }
        Ok(())
    }
}

/// Solve the Neumann problem `-div(A ∇u) = 0`, `A∇u·n = g`, with zero boundary mean.
pub fn solve_neumann(
    mesh: &TriMesh,
    field: &CoefficientField,
    g: &BoundaryFunction,
) -> Result<NeumannSolution> {
    NeumannSolver::for_field(mesh, field)?.solve(g)
}

/// Stored energy `-½ ∫ g u` as a boundary form.
pub fn energy(mesh: &TriMesh, g: &BoundaryFunction, u: &NeumannSolution) -> Result<f64> {
    let space = BoundarySpace::new(mesh);
    space.check_mesh(mesh)?;
    if g.values.len() != space.dim() || u.values.len() != mesh.num_nodes() {
        return Err(Error::invalid("energy inputs do not match the mesh"));
    }
    Ok(energy_in(&space, g, &u.values))
}

pub(crate) fn energy_in(space: &BoundarySpace, g: &BoundaryFunction, u: &[f64]) -> f64 {
    -0.5 * space.inner(&g.values, &space.trace(u))
}

/// Periodic corrector `w_p` on the unit cell, one value per independent DOF.
#[derive(Clone, Debug)]
pub struct CorrectorSolution {
    pub values: Vec<f64>,
    pub direction: Point,
}

impl CorrectorSolution {
    pub fn nodal(&self, cell_mesh: &TriMesh) -> Vec<f64> {
        let map = cell_mesh.periodic.as_ref().expect("periodic mesh");
        map.dof.iter().map(|&d| self.values[d]).collect()
    }
}

/// Solve `-div(A(∇w + p)) = 0` with periodic `w` of zero cell average.
pub fn solve_corrector(
    cell_mesh: &TriMesh,
    field: &CoefficientField,
    p: Point,
) -> Result<CorrectorSolution> {
    Ok(solve_correctors(cell_mesh, field, &[p])?.remove(0))
}

/// Corrector solves for several directions against one factorization.
pub fn solve_correctors(
    cell_mesh: &TriMesh,
    field: &CoefficientField,
    directions: &[Point],
) -> Result<Vec<CorrectorSolution>> {
    let map = cell_mesh
        .periodic
        .as_ref()
        .ok_or_else(|| Error::invalid("corrector problems need a periodic cell mesh"))?;
    if !field.is_periodic() {
        return Err(Error::invalid("corrector problems need a unit-periodic field"));
    }
    let nd = map.num_dofs;
    let mut builder = CscBuilder::new(nd);
    let mut rhs = vec![vec![0.0; nd]; directions.len()];
    let mut weights = vec![0.0; nd];
    for (t, tri) in cell_mesh.triangles.iter().enumerate() {
        let (grads, area) = cell_mesh.shape_gradients(t);
        let a = field.eval(cell_mesh.barycenter(t));
        let dofs = tri.map(|k| map.dof[k]);
        for i in 0..3 {
            weights[dofs[i]] += area / 3.0;
            for j in 0..3 {
                builder.add(dofs[i], dofs[j], area * a.form(grads[i], grads[j]));
            }
            for (r, p) in rhs.iter_mut().zip(directions) {
                r[dofs[i]] -= area * a.form(grads[i], *p);
            }
        }
    }
    let mut k = builder.build();
    k.pin(0);
    let factor = SpdSolver::new(&k, None, SolverKind::Cholesky).map_err(|e| match e {
        Error::NotSpd(m) => Error::NotSpd(format!("corrector matrix: {m}")),
        e => e,
    })?;
    for r in rhs.iter_mut() {
        r[0] = 0.0;
    }
    factor.solve_many(&mut rhs)?;
    let total: f64 = weights.iter().sum();
    Ok(rhs
        .into_iter()
        .zip(directions)
        .map(|(mut w, p)| {
            let c = dot(&weights, &w) / total;
            w.iter_mut().for_each(|v| *v -= c);
            CorrectorSolution { values: w, direction: *p }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::build_unit_square_mesh;

    fn n1(mesh: &TriMesh, space: &BoundarySpace) -> BoundaryFunction {
        BoundaryFunction::normal_component(mesh, space, [1.0, 0.0]).unwrap()
    }

    #[test]
    fn affine_solution_is_exact() {
        let mesh = build_unit_square_mesh(8).unwrap();
        let space = BoundarySpace::new(&mesh);
        let g = n1(&mesh, &space);
        assert!(g.mean(&space).abs() < 1e-14);
        let u = solve_neumann(&mesh, &CoefficientField::constant(SymMat::identity()), &g).unwrap();
        for (k, p) in mesh.nodes.iter().enumerate() {
            assert!((u.values[k] - (p[0] - 0.5)).abs() < 1e-9);
        }
        assert!((energy(&mesh, &g, &u).unwrap() + 0.5).abs() < 1e-9);
    }

    #[test]
    fn scaling_and_linearity() {
        let mesh = build_unit_square_mesh(6).unwrap();
        let space = BoundarySpace::new(&mesh);
        let g = BoundaryFunction::interpolate(&mesh, |p| (3.0 * p[0]).sin() + p[1] * p[1])
            .zero_mean(&space);
        let id = solve_neumann(&mesh, &CoefficientField::constant(SymMat::identity()), &g).unwrap();
        let seven = solve_neumann(&mesh, &CoefficientField::constant(SymMat::scalar(7.0)), &g).unwrap();
        let neg = solve_neumann(
            &mesh,
            &CoefficientField::constant(SymMat::identity()),
            &g.clone().scaled(-1.0),
        )
        .unwrap();
        for k in 0..mesh.num_nodes() {
            assert!((seven.values[k] * 7.0 - id.values[k]).abs() < 1e-11);
            assert!((neg.values[k] + id.values[k]).abs() < 1e-12);
        }
        let e1 = energy(&mesh, &g, &id).unwrap();
        let e7 = energy(&mesh, &g, &seven).unwrap();
        assert!(e1 < 0.0 && (e7 * 7.0 - e1).abs() < 1e-12);
        let zero = BoundaryFunction::zeros(space.dim());
        let u0 = solve_neumann(&mesh, &CoefficientField::PeriodicPaper, &zero).unwrap();
        assert_eq!(energy(&mesh, &zero, &u0).unwrap(), 0.0);
    }

    #[test]
    fn incompatible_datum_rejected() {
        let mesh = build_unit_square_mesh(4).unwrap();
        let space = BoundarySpace::new(&mesh);
        let g = BoundaryFunction::new(vec![1.0; space.dim()]);
        let r = solve_neumann(&mesh, &CoefficientField::PeriodicPaper, &g);
        assert!(matches!(r, Err(Error::Incompatible { .. })));
    }

    #[test]
    fn solution_has_zero_boundary_mean_and_small_residual() {
        let mesh = build_unit_square_mesh(12).unwrap();
        let space = BoundarySpace::new(&mesh);
        let field = CoefficientField::PeriodicPaper;
        let g = BoundaryFunction::interpolate(&mesh, |p| p[0] * p[1] - p[1].powi(3)).zero_mean(&space);
        let u = solve_neumann(&mesh, &field, &g).unwrap();
        assert!(space.integral(&u.trace(&space)).abs() < 1e-12);
        let k = StiffnessAssembler::new(&mesh).assemble(&field);
        let ku = k.mul_vec(&u.values);
        let mut b = vec![0.0; mesh.num_nodes()];
        for (&node, v) in space.nodes.iter().zip(g.load(&space)) {
            b[node] = v;
        }
        let res: f64 = ku.iter().zip(&b).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let scale: f64 = b.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(res <= 1e-9 * scale, "residual {res}");
    }

    #[test]
    fn constant_corrector_vanishes() {
        let cell = crate::mesh::build_periodic_cell_mesh(8).unwrap();
        let m = CoefficientField::constant(SymMat::new(3.0, 0.4, 2.0));
        for p in [[1.0, 0.0], [0.0, 1.0]] {
            let w = solve_corrector(&cell, &m, p).unwrap();
            assert!(w.values.iter().all(|v| v.abs() < 1e-10));
        }
    }

    #[test]
    fn corrector_needs_periodic_mesh() {
        let mesh = build_unit_square_mesh(4).unwrap();
        assert!(solve_corrector(&mesh, &CoefficientField::PeriodicPaper, [1.0, 0.0]).is_err());
    }
}
