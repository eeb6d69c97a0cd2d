//! Structured triangulations of the unit square.
//!
//! Every square cell of an `n × n` grid is split along its lower-left to
//! upper-right diagonal. Node `(i, j)` has index `j * (n + 1) + i` and sits
//! at `(i / n, j / n)`. The boundary is traversed counter-clockwise starting
//! at the origin, which fixes the ordering of boundary degrees of freedom.

use std::io::{self, Write};

use crate::error::{Error, Result};
use crate::sparse::{CscBuilder, SymCsc};

pub type Point = [f64; 2];

/// One edge of the boundary loop, oriented counter-clockwise.
#[derive(Clone, Debug)]
pub struct BoundaryEdge {
    pub nodes: [usize; 2],
    pub normal: Point,
    pub length: f64,
}

/// Periodic identification of a cell mesh.
#[derive(Clone, Debug)]
pub struct PeriodicMap {
    /// Involution pairing each node with its lattice translate on the
    /// opposite face; interior nodes are fixed points.
    pub partner: Vec<usize>,
    /// Independent degree of freedom carried by each node.
    pub dof: Vec<usize>,
    pub num_dofs: usize,
}

#[derive(Clone, Debug)]
pub struct TriMesh {
    pub n: usize,
    pub nodes: Vec<Point>,
    pub triangles: Vec<[usize; 3]>,
    pub boundary_edges: Vec<BoundaryEdge>,
    /// Boundary nodes in loop order; position in this list is the boundary DOF.
    pub boundary_nodes: Vec<usize>,
    boundary_dof: Vec<Option<usize>>,
    pub h: f64,
    pub periodic: Option<PeriodicMap>,
}

impl TriMesh {
    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn num_boundary_dofs(&self) -> usize {
        self.boundary_nodes.len()
    }

    /// Boundary DOF of a node, if it lies on the boundary.
    pub fn boundary_dof(&self, node: usize) -> Option<usize> {
        self.boundary_dof[node]
    }

    pub fn node_index(&self, i: usize, j: usize) -> usize {
        j * (self.n + 1) + i
    }

    /// Signed area of a triangle (positive for counter-clockwise vertices).
    pub fn signed_area(&self, t: usize) -> f64 {
        let [a, b, c] = self.triangles[t];
        let (pa, pb, pc) = (self.nodes[a], self.nodes[b], self.nodes[c]);
        0.5 * ((pb[0] - pa[0]) * (pc[1] - pa[1]) - (pc[0] - pa[0]) * (pb[1] - pa[1]))
    }

    /// Gradients of the three barycentric coordinates and the area.
    pub fn shape_gradients(&self, t: usize) -> ([Point; 3], f64) {
        let [a, b, c] = self.triangles[t];
        let (pa, pb, pc) = (self.nodes[a], self.nodes[b], self.nodes[c]);
        let area = self.signed_area(t);
        let inv = 1.0 / (2.0 * area);
        let grads = [
            [(pb[1] - pc[1]) * inv, (pc[0] - pb[0]) * inv],
            [(pc[1] - pa[1]) * inv, (pa[0] - pc[0]) * inv],
            [(pa[1] - pb[1]) * inv, (pb[0] - pa[0]) * inv],
        ];
        (grads, area)
    }

    pub fn barycenter(&self, t: usize) -> Point {
        let [a, b, c] = self.triangles[t];
        let (pa, pb, pc) = (self.nodes[a], self.nodes[b], self.nodes[c]);
        [(pa[0] + pb[0] + pc[0]) / 3.0, (pa[1] + pb[1] + pc[1]) / 3.0]
    }

    pub fn perimeter(&self) -> f64 {
        self.boundary_edges.iter().map(|e| e.length).sum()
    }

    /// Boundary mass matrix of continuous P1 functions on the boundary loop,
    /// indexed by boundary DOF.
    pub fn boundary_mass_matrix(&self) -> SymCsc {
        let nb = self.num_boundary_dofs();
        let mut builder = CscBuilder::new(nb);
        for e in &self.boundary_edges {
            let a = self.boundary_dof[e.nodes[0]].expect("boundary edge node");
            let b = self.boundary_dof[e.nodes[1]].expect("boundary edge node");
            let l = e.length;
            builder.add(a, a, l / 3.0);
            builder.add(b, b, l / 3.0);
            builder.add(a, b, l / 6.0);
            builder.add(b, a, l / 6.0);
        }
        builder.build()
    }

    /// Consistent volume mass matrix over all nodes.
    pub fn volume_mass_matrix(&self) -> SymCsc {
        let mut builder = CscBuilder::new(self.num_nodes());
        for (t, tri) in self.triangles.iter().enumerate() {
            let area = self.signed_area(t);
            for a in 0..3 {
                for b in 0..3 {
                    let w = if a == b { area / 6.0 } else { area / 12.0 };
                    builder.add(tri[a], tri[b], w);
                }
            }
        }
        builder.build()
    }

    /// Locate the triangle containing `p` and return it with barycentric
    /// weights. Points are clamped to the closed unit square.
    pub fn locate(&self, p: Point) -> (usize, [f64; 3]) {
        let n = self.n as f64;
        let x = p[0].clamp(0.0, 1.0) * n;
        let y = p[1].clamp(0.0, 1.0) * n;
        let i = (x.floor() as usize).min(self.n - 1);
        let j = (y.floor() as usize).min(self.n - 1);
        let (fx, fy) = (x - i as f64, y - j as f64);
        let cell = j * self.n + i;
        // lower triangle (0,0)-(1,0)-(1,1) has fx >= fy
        if fx >= fy {
            (2 * cell, [1.0 - fx, fx - fy, fy])
        } else {
            (2 * cell + 1, [1.0 - fy, fx, fy - fx])
        }
    }

    /// Arc-length coordinate of a boundary node along the loop, in `[0, 4)`.
    pub fn boundary_arclength(&self, node: usize) -> f64 {
        let [x, y] = self.nodes[node];
        arclength_of(x, y)
    }

    /// Write a plain-text dump: `v index x y` per node then `t index a b c`
    /// per triangle. Debugging aid only.
    pub fn dump<W: Write>(&self, mut out: W, values: Option<&[f64]>) -> io::Result<()> {
        for (k, p) in self.nodes.iter().enumerate() {
            match values {
                Some(v) => writeln!(out, "v {k} {} {} {}", p[0], p[1], v[k])?,
                None => writeln!(out, "v {k} {} {}", p[0], p[1])?,
            }
        }
        for (k, t) in self.triangles.iter().enumerate() {
            writeln!(out, "t {k} {} {} {}", t[0], t[1], t[2])?;
        }
        Ok(())
    }
}

pub(crate) fn arclength_of(x: f64, y: f64) -> f64 {
    const TOL: f64 = 1e-12;
    if y <= TOL {
        x
    } else if x >= 1.0 - TOL {
        1.0 + y
    } else if y >= 1.0 - TOL {
        2.0 + (1.0 - x)
    } else {
        3.0 + (1.0 - y)
    }
}

fn structured(n: usize) -> TriMesh {
    let m = n + 1;
    let nodes: Vec<Point> = (0..m * m)
        .map(|k| [(k % m) as f64 / n as f64, (k / m) as f64 / n as f64])
        .collect();
    let idx = |i: usize, j: usize| j * m + i;
    let mut triangles = Vec::with_capacity(2 * n * n);
    for j in 0..n {
        for i in 0..n {
            let (a, b, c, d) = (idx(i, j), idx(i + 1, j), idx(i + 1, j + 1), idx(i, j + 1));
            triangles.push([a, b, c]);
            triangles.push([a, c, d]);
        }
    }

    let mut boundary_nodes = Vec::with_capacity(4 * n);
    boundary_nodes.extend((0..n).map(|i| idx(i, 0)));
    boundary_nodes.extend((0..n).map(|j| idx(n, j)));
    boundary_nodes.extend((0..n).map(|i| idx(n - i, n)));
    boundary_nodes.extend((0..n).map(|j| idx(0, n - j)));
    let mut boundary_dof = vec![None; m * m];
    for (k, &node) in boundary_nodes.iter().enumerate() {
        boundary_dof[node] = Some(k);
    }

    let len = 1.0 / n as f64;
    let nb = boundary_nodes.len();
    let boundary_edges = (0..nb)
        .map(|k| {
            let normal = match k / n {
                0 => [0.0, -1.0],
                1 => [1.0, 0.0],
                2 => [0.0, 1.0],
                _ => [-1.0, 0.0],
            };
            BoundaryEdge {
                nodes: [boundary_nodes[k], boundary_nodes[(k + 1) % nb]],
                normal,
                length: len,
            }
        })
        .collect();

    TriMesh {
        n,
        nodes,
        triangles,
        boundary_edges,
        boundary_nodes,
        boundary_dof,
        h: std::f64::consts::SQRT_2 / n as f64,
        periodic: None,
    }
}

/// Structured mesh of `(0,1)²` with `n` subdivisions per side.
pub fn build_unit_square_mesh(n: usize) -> Result<TriMesh> {
    if n == 0 {
        return Err(Error::invalid("mesh needs at least one subdivision per side"));
    }
    Ok(structured(n))
}

/// Structured mesh of the periodic cell with opposite faces identified.
pub fn build_periodic_cell_mesh(n: usize) -> Result<TriMesh> {
    if n < 2 {
        return Err(Error::invalid("periodic cell mesh needs n >= 2"));
    }
    let mut mesh = structured(n);
    let m = n + 1;
    let flip = |i: usize| match i {
        0 => n,
        i if i == n => 0,
        i => i,
    };
    let mut partner = vec![0; m * m];
    let mut dof = vec![0; m * m];
    for j in 0..m {
        for i in 0..m {
            partner[j * m + i] = flip(j) * m + flip(i);
            dof[j * m + i] = (j % n) * n + (i % n);
        }
    }
    mesh.periodic = Some(PeriodicMap { partner, dof, num_dofs: n * n });
    Ok(mesh)
}

/// Number of subdivisions giving a mesh size of at most `h` under the
/// `h = √2 / n` convention.
pub fn subdivisions_for_size(h: f64) -> usize {
    ((std::f64::consts::SQRT_2 / h) - 1e-9).ceil().max(1.0) as usize
}

pub fn lcm(a: usize, b: usize) -> usize {
    fn gcd(a: usize, b: usize) -> usize {
        if b == 0 {
            a
        } else {
            gcd(b, a % b)
        }
    }
    a / gcd(a, b) * b
}

/// Interpolation of P1 functions from one structured mesh to another.
/// Exact (up to rounding) when the target refines the source.
#[derive(Clone, Debug)]
pub struct Transfer {
    boundary: Vec<(usize, usize, f64)>,
    volume: Vec<([usize; 3], [f64; 3])>,
}

impl Transfer {
    pub fn new(source: &TriMesh, target: &TriMesh) -> Self {
        let nb = source.num_boundary_dofs();
        let n = source.n as f64;
        let boundary = target
            .boundary_nodes
            .iter()
            .map(|&k| {
                // source boundary DOF k sits at arclength k / n
                let s = target.boundary_arclength(k) * n;
                let r = s.round();
                let (base, frac) = if (s - r).abs() < 1e-9 { (r, 0.0) } else { (s.floor(), s - s.floor()) };
                let a = base as usize % nb;
                (a, (a + 1) % nb, frac)
            })
            .collect();
        let volume = target
            .nodes
            .iter()
            .map(|&p| {
                let (t, w) = source.locate(p);
                (source.triangles[t], w)
            })
            .collect();
        Self { boundary, volume }
    }

    /// Boundary-DOF values on the source to boundary-DOF values on the target.
    pub fn boundary(&self, values: &[f64]) -> Vec<f64> {
        self.boundary.iter().map(|&(a, b, f)| (1.0 - f) * values[a] + f * values[b]).collect()
    }

    /// Nodal values on the source to nodal values on the target.
    pub fn volume(&self, values: &[f64]) -> Vec<f64> {
        self.volume
            .iter()
            .map(|(tri, w)| w[0] * values[tri[0]] + w[1] * values[tri[1]] + w[2] * values[tri[2]])
            .collect()
    }
}
