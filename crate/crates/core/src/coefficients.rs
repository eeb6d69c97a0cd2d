//! Diffusion coefficients: constant symmetric matrices and the
//! spatially varying fields evaluated at quadrature points.

use std::f64::consts::PI;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mesh::Point;

/// Constant symmetric 2×2 matrix stored through its three independent entries.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SymMat {
    pub a11: f64,
    pub a12: f64,
    pub a22: f64,
}

impl SymMat {
    pub const fn new(a11: f64, a12: f64, a22: f64) -> Self {
        Self { a11, a12, a22 }
    }

    pub const fn diag(a11: f64, a22: f64) -> Self {
        Self::new(a11, 0.0, a22)
    }

    pub const fn scalar(c: f64) -> Self {
        Self::new(c, 0.0, c)
    }

    pub fn identity() -> Self {
        Self::scalar(1.0)
    }

    pub fn from_vec(v: [f64; 3]) -> Self {
        Self::new(v[0], v[1], v[2])
    }

    /// The vectorization `(a11, a12, a22)` used as optimization variable.
    pub fn to_vec(self) -> [f64; 3] {
        [self.a11, self.a12, self.a22]
    }

    pub fn scale(self, c: f64) -> Self {
        Self::new(c * self.a11, c * self.a12, c * self.a22)
    }

    pub fn add(self, o: Self) -> Self {
        Self::new(self.a11 + o.a11, self.a12 + o.a12, self.a22 + o.a22)
    }

    pub fn sub(self, o: Self) -> Self {
        Self::new(self.a11 - o.a11, self.a12 - o.a12, self.a22 - o.a22)
    }

    pub fn apply(self, p: Point) -> Point {
        [self.a11 * p[0] + self.a12 * p[1], self.a12 * p[0] + self.a22 * p[1]]
    }

    /// `xᵀ A y`.
    pub fn form(self, x: Point, y: Point) -> f64 {
        let ay = self.apply(y);
        x[0] * ay[0] + x[1] * ay[1]
    }

    pub fn trace(self) -> f64 {
        self.a11 + self.a22
    }

    pub fn det(self) -> f64 {
        self.a11 * self.a22 - self.a12 * self.a12
    }

    /// Eigenvalues in increasing order.
    pub fn eigenvalues(self) -> [f64; 2] {
        let m = 0.5 * (self.a11 + self.a22);
        let r = (0.25 * (self.a11 - self.a22).powi(2) + self.a12 * self.a12).sqrt();
        [m - r, m + r]
    }

    pub fn spectral_norm(self) -> f64 {
        let [l, u] = self.eigenvalues();
        l.abs().max(u.abs())
    }

    pub fn is_spd(self) -> bool {
        self.a11 > 0.0 && self.det() > 0.0
    }

    /// Membership in the set of α-coercive, β-bounded matrices.
    pub fn in_region(self, alpha: f64, beta: f64) -> bool {
        let [l, _] = self.eigenvalues();
        l >= alpha && self.spectral_norm() <= beta
    }

    pub fn inverse(self) -> Result<Self> {
        let d = self.det();
        if d == 0.0 || !d.is_finite() {
            return Err(Error::invalid("singular matrix has no inverse"));
        }
        Ok(Self::new(self.a22 / d, -self.a12 / d, self.a11 / d))
    }

    /// Frobenius norm of the full 2×2 matrix (off-diagonal counted twice).
    pub fn frobenius(self) -> f64 {
        (self.a11 * self.a11 + 2.0 * self.a12 * self.a12 + self.a22 * self.a22).sqrt()
    }

    /// Euclidean norm of the upper-triangular entries, `√(Σ_{i≤j} B_ij²)`.
    pub fn entry_norm(self) -> f64 {
        (self.a11 * self.a11 + self.a12 * self.a12 + self.a22 * self.a22).sqrt()
    }
}

impl fmt::Display for SymMat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[[{:.6}, {:.6}], [{:.6}, {:.6}]]", self.a11, self.a12, self.a12, self.a22)
    }
}

/// One seeded realization of the two-phase random checkerboard.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckerboardRealization {
    pub seed: u64,
    pub epsilon: f64,
    pub cells_per_side: usize,
    /// Row-major cell values: entry `ky * N + kx` covers `ε((0,1)² + (kx, ky))`.
    pub values: Vec<f64>,
}

pub const CHECKERBOARD_PHASES: [f64; 2] = [4.0, 16.0];

impl CheckerboardRealization {
    pub fn cell_value(&self, kx: usize, ky: usize) -> f64 {
        self.values[ky * self.cells_per_side + kx]
    }

    fn value_at(&self, p: Point) -> f64 {
        let last = self.cells_per_side - 1;
        let k = |x: f64| ((x / self.epsilon).floor().max(0.0) as usize).min(last);
        self.cell_value(k(p[0]), k(p[1]))
    }
}

/// Draw i.i.d. phases in {4, 16} with equal probability on the lattice of
/// ε-cells anchored at the origin that meet the unit square.
pub fn sample_checkerboard(seed: u64, epsilon: f64) -> Result<CoefficientField> {
    if !(epsilon > 0.0 && epsilon <= 1.0) {
        return Err(Error::invalid(format!("checkerboard needs 0 < ε ≤ 1, got {epsilon}")));
    }
    let n = cells_per_side(epsilon);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let values = (0..n * n)
        .map(|_| if rng.random_bool(0.5) { CHECKERBOARD_PHASES[1] } else { CHECKERBOARD_PHASES[0] })
        .collect();
    Ok(CoefficientField::Checkerboard(CheckerboardRealization {
        seed,
        epsilon,
        cells_per_side: n,
        values,
    }))
}

/// Number of ε-cells per side, `ceil(1/ε)`, guarded against round-off
/// (`1/0.1` must give 10, not 11).
pub fn cells_per_side(epsilon: f64) -> usize {
    let r = 1.0 / epsilon;
    let k = r.round();
    if (r - k).abs() < 1e-9 * k.max(1.0) {
        k as usize
    } else {
        r.ceil() as usize
    }
}

/// Point-to-matrix map describing a diffusion coefficient on the unit square.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CoefficientField {
    Constant { matrix: SymMat },
    /// `A11 = 22 + 10(sin 2πx + sin 2πy)`, `A22 = 12 + 2(sin 2πx + sin 2πy)`, `A12 = 0`.
    PeriodicPaper,
    /// `(base + amplitude·cos 2πy)·Id`, varying along `y` only.
    Layered { base: f64, amplitude: f64 },
    EpsilonScaled { inner: Box<CoefficientField>, epsilon: f64 },
    Checkerboard(CheckerboardRealization),
}

impl CoefficientField {
    pub fn constant(m: SymMat) -> Self {
        Self::Constant { matrix: m }
    }

    pub fn eval(&self, p: Point) -> SymMat {
        match self {
            Self::Constant { matrix } => *matrix,
            Self::PeriodicPaper => eval_periodic(p),
            Self::Layered { base, amplitude } => {
                SymMat::scalar(base + amplitude * (2.0 * PI * p[1]).cos())
            }
            Self::EpsilonScaled { inner, epsilon } => inner.eval([p[0] / epsilon, p[1] / epsilon]),
            Self::Checkerboard(r) => SymMat::scalar(r.value_at(p)),
        }
    }

    /// Declared coercivity and boundedness constants `(α, β)`.
    pub fn bounds(&self) -> (f64, f64) {
        match self {
            Self::Constant { matrix } => {
                let [l, _] = matrix.eigenvalues();
                (l, matrix.spectral_norm())
            }
            Self::PeriodicPaper => (2.0, 42.0),
            Self::Layered { base, amplitude } => (base - amplitude.abs(), base + amplitude.abs()),
            Self::EpsilonScaled { inner, .. } => inner.bounds(),
            Self::Checkerboard(_) => (CHECKERBOARD_PHASES[0], CHECKERBOARD_PHASES[1]),
        }
    }

    /// Whether the field is unit-periodic, so that cell averages and
    /// correctors make sense.
    pub fn is_periodic(&self) -> bool {
        matches!(self, Self::Constant { .. } | Self::PeriodicPaper | Self::Layered { .. })
    }

    pub fn is_constant(&self) -> Option<SymMat> {
        match self {
            Self::Constant { matrix } => Some(*matrix),
            _ => None,
        }
    }
}

pub fn eval_periodic(p: Point) -> SymMat {
    let s = (2.0 * PI * p[0]).sin() + (2.0 * PI * p[1]).sin();
    SymMat::diag(22.0 + 10.0 * s, 12.0 + 2.0 * s)
}

/// `A_ε(x) = A(x/ε)`.
pub fn scale_epsilon(field: CoefficientField, epsilon: f64) -> Result<CoefficientField> {
    if !(epsilon > 0.0) || !epsilon.is_finite() {
        return Err(Error::invalid(format!("scaling parameter must be positive, got {epsilon}")));
    }
    Ok(CoefficientField::EpsilonScaled { inner: Box::new(field), epsilon })
}

pub const DEFAULT_CELL_QUADRATURE: usize = 256;

/// Entrywise average over the unit cell by the composite midpoint rule on a
/// `k × k` grid (exact for trigonometric polynomials of degree below `k`).
pub fn mean_over_cell(field: &CoefficientField, k: usize) -> Result<SymMat> {
    if !field.is_periodic() {
        return Err(Error::InvalidInput(
            "cell average is defined for periodic or constant fields only".into(),
        ));
    }
    if let Some(m) = field.is_constant() {
        return Ok(m);
    }
    let h = 1.0 / k as f64;
    let mut acc = SymMat::scalar(0.0);
    for j in 0..k {
        for i in 0..k {
            acc = acc.add(field.eval([(i as f64 + 0.5) * h, (j as f64 + 0.5) * h]));
        }
    }
    Ok(acc.scale(h * h))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop_assert, proptest};

    fn close(a: SymMat, b: SymMat, tol: f64) -> bool {
        a.sub(b).entry_norm() <= tol
    }

    #[test]
    fn periodic_reference_points() {
        assert!(close(eval_periodic([0.0, 0.0]), SymMat::diag(22.0, 12.0), 1e-12));
        assert!(close(eval_periodic([0.25, 0.0]), SymMat::diag(32.0, 14.0), 1e-12));
    }

    #[test]
    fn epsilon_scaling() {
        let f = scale_epsilon(CoefficientField::PeriodicPaper, 0.5).unwrap();
        assert!(close(f.eval([0.125, 0.0]), SymMat::diag(32.0, 14.0), 1e-12));
        let one = scale_epsilon(CoefficientField::PeriodicPaper, 1.0).unwrap();
        assert_eq!(one.eval([0.3, 0.7]), eval_periodic([0.3, 0.7]));
        assert!(scale_epsilon(CoefficientField::PeriodicPaper, 0.0).is_err());
        assert!(scale_epsilon(CoefficientField::PeriodicPaper, -1.0).is_err());
    }

    #[test]
    fn nested_scaling_composes() {
        let f = scale_epsilon(scale_epsilon(CoefficientField::PeriodicPaper, 0.5).unwrap(), 0.2).unwrap();
        let g = scale_epsilon(CoefficientField::PeriodicPaper, 0.1).unwrap();
        for p in [[0.013, 0.77], [0.5, 0.25], [0.91, 0.02]] {
            assert!(close(f.eval(p), g.eval(p), 1e-9));
        }
    }

    #[test]
    fn periodic_field_bounds_hold() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..100_000 {
            let p = [rng.random::<f64>() * 3.0 - 1.0, rng.random::<f64>() * 3.0 - 1.0];
            let a = eval_periodic(p);
            assert!(a.in_region(2.0, 42.0));
            assert!((8.0..=16.0).contains(&a.a22));
        }
    }

    #[test]
    fn checkerboard_determinism_and_statistics() {
        let a = sample_checkerboard(42, 0.01).unwrap();
        let b = sample_checkerboard(42, 0.01).unwrap();
        assert_eq!(a, b);
        let CoefficientField::Checkerboard(r) = &a else { unreachable!() };
        assert_eq!(r.cells_per_side, 100);
        let n = r.values.len() as f64;
        let mean = r.values.iter().sum::<f64>() / n;
        let var = r.values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!((9.7..=10.3).contains(&mean), "mean {mean}");
        // variance of a ±6 coin is 36; the sample variance has sd ≈ 36·√(2/n) at most
        assert!((var - 36.0).abs() < 3.0 * 36.0 * (2.0 / n).sqrt(), "var {var}");
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let p = [rng.random::<f64>(), rng.random::<f64>()];
            let m = a.eval(p);
            assert_eq!(m.a12, 0.0);
            assert_eq!(m.a11, m.a22);
            assert!(m.a11 == 4.0 || m.a11 == 16.0);
            assert_eq!(m, b.eval(p));
        }
    }

    #[test]
    fn checkerboard_cells_are_piecewise_constant() {
        let f = sample_checkerboard(3, 0.25).unwrap();
        let CoefficientField::Checkerboard(r) = &f else { unreachable!() };
        assert_eq!(f.eval([0.3, 0.8]).a11, r.cell_value(1, 3));
        assert_eq!(f.eval([1.0, 1.0]).a11, r.cell_value(3, 3));
        assert_eq!(cells_per_side(0.1), 10);
        assert_eq!(cells_per_side(0.3), 4);
    }

    #[test]
    fn cell_means() {
        let m = mean_over_cell(&CoefficientField::PeriodicPaper, 64).unwrap();
        assert!(close(m, SymMat::diag(22.0, 12.0), 1e-12));
        let c = SymMat::new(3.0, 0.5, 2.0);
        assert_eq!(mean_over_cell(&CoefficientField::constant(c), 8).unwrap(), c);
        let f = CoefficientField::Layered { base: 2.0, amplitude: 1.0 };
        let a = mean_over_cell(&f, 128).unwrap();
        let b = mean_over_cell(&f, 256).unwrap();
        assert!(a.sub(b).entry_norm() < 1e-8);
        assert!(mean_over_cell(&sample_checkerboard(1, 0.5).unwrap(), 8).is_err());
    }

    #[test]
    fn symmat_algebra() {
        let a = SymMat::new(4.0, 1.0, 3.0);
        let inv = a.inverse().unwrap();
        let p = a.apply(inv.apply([1.0, 0.0]));
        assert!((p[0] - 1.0).abs() < 1e-14 && p[1].abs() < 1e-14);
        let [l, u] = a.eigenvalues();
        assert!((l * u - a.det()).abs() < 1e-12 && (l + u - a.trace()).abs() < 1e-12);
        assert!(!SymMat::new(1.0, 2.0, 1.0).is_spd());
    }

    proptest! {
        #[test]
        fn periodicity(x in -5.0f64..5.0, y in -5.0f64..5.0) {
            prop_assert!(close(eval_periodic([x + 1.0, y]), eval_periodic([x, y]), 1e-10));
            prop_assert!(close(eval_periodic([x, y + 1.0]), eval_periodic([x, y]), 1e-10));
        }

        #[test]
        fn epsilon_periodicity(x in 0.0f64..0.8, y in 0.0f64..0.8) {
            let f = scale_epsilon(CoefficientField::PeriodicPaper, 0.2).unwrap();
            prop_assert!(close(f.eval([x + 0.2, y]), f.eval([x, y]), 1e-9));
        }
    }
}
