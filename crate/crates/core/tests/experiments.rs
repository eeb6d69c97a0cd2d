use effective_diffusion::experiments::{
    argmin, batch_seeds, ensemble, grid, one_d_profile, CoefficientSpec, EnsembleStat, QualityProbe, Setup,
};
use effective_diffusion::modes::prolongate_basis;
use effective_diffusion::solver::NeumannSolver;
use effective_diffusion::{CoefficientField, SymMat, TriMesh};
use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// `∫ f g` for P1 fields, triangle by triangle.
fn l2_inner(mesh: &TriMesh, f: &[f64], g: &[f64]) -> f64 {
    let mut s = 0.0;
    for (t, tri) in mesh.triangles.iter().enumerate() {
        let area = mesh.signed_area(t).abs();
        let (mut diag, mut sf, mut sg) = (0.0, 0.0, 0.0);
        for &k in tri {
            diag += f[k] * g[k];
            sf += f[k];
            sg += g[k];
        }
        s += area / 12.0 * (diag + sf * sg);
    }
    s
}

#[test]
fn operator_error_matches_random_search() {
    let spec = CoefficientSpec::PeriodicPaper;
    let setup = Setup::new(&spec, 0.25, 3, 5, 3.0, 0.1).unwrap();
    let run = setup.fine_run(&spec, &setup.basis, &[]).unwrap();
    let probe = QualityProbe::new(&setup.transfer, &setup.basis, &run).unwrap();
    let abar = SymMat::new(17.0, 0.5, 12.0);
    let value = probe.evaluate(abar).unwrap().value;

    let solver = NeumannSolver::for_field(&setup.fine, &CoefficientField::constant(abar)).unwrap();
    let modes = prolongate_basis(&setup.basis, &setup.transfer).modes;
    let ubar = solver.solve_many(&modes).unwrap();
    let q = modes.len();
    let diffs: Vec<Vec<f64>> = (0..q)
        .map(|i| run.solutions[i].iter().zip(&ubar[i].values).map(|(a, b)| a - b).collect())
        .collect();
    let gram = |v: &[Vec<f64>]| {
        (0..q).map(|i| (0..q).map(|j| l2_inner(&setup.fine, &v[i], &v[j])).collect()).collect::<Vec<Vec<f64>>>()
    };
    let (d, n) = (gram(&diffs), gram(&run.solutions[..q]));
    let form = |m: &[Vec<f64>], c: &[f64]| (0..q).map(|i| (0..q).map(|j| c[i] * m[i][j] * c[j]).sum::<f64>()).sum::<f64>();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut best = 0.0f64;
    for _ in 0..100_000 {
        let c: Vec<f64> = (0..q).map(|_| StandardNormal.sample(&mut rng)).collect();
        best = best.max((form(&d, &c) / form(&n, &c)).sqrt());
    }
    assert!(best <= value + 1e-8, "sampled {best} above the supremum {value}");
    assert!(best >= 0.97 * value, "sampled {best} far below the supremum {value}");
    // exact supremum: largest eigenvalue of N^{-1/2} D N^{-1/2}
    let dm = DMatrix::from_fn(q, q, |i, j| d[i][j]);
    let nm = SymmetricEigen::new(DMatrix::from_fn(q, q, |i, j| n[i][j]));
    let inv_sqrt = &nm.eigenvectors
        * DMatrix::from_diagonal(&nm.eigenvalues.map(|v| 1.0 / v.sqrt()))
        * nm.eigenvectors.transpose();
    let top = SymmetricEigen::new(&inv_sqrt * dm * &inv_sqrt).eigenvalues.max();
    assert!((top.sqrt() - value).abs() < 1e-8 * value, "{} vs {value}", top.sqrt());
}

#[test]
fn operator_error_vanishes_for_constant_fields() {
    let spec = CoefficientSpec::Constant { a11: 3.0, a12: 0.4, a22: 2.0 };
    let setup = Setup::new(&spec, 0.5, 2, 4, 2.0, 0.1).unwrap();
    let run = setup.fine_run(&spec, &setup.basis, &[]).unwrap();
    let probe = QualityProbe::new(&setup.transfer, &setup.basis, &run).unwrap();
    assert!(probe.evaluate(SymMat::new(3.0, 0.4, 2.0)).unwrap().value < 1e-10);
    assert!(probe.evaluate(SymMat::new(6.0, 0.8, 4.0)).unwrap().value > 0.4);
}

#[test]
fn confidence_interval_shrinks_like_root_batches() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let values: Vec<f64> = (0..4000).map(|_| 2.0 + rng.random::<f64>()).collect();
    let narrow = EnsembleStat::from_batches(&values, 1).unwrap();
    let wide = EnsembleStat::from_batches(&values[..1000], 1).unwrap();
    let ratio = wide.width() / narrow.width();
    assert!((ratio - 2.0).abs() < 0.1, "width ratio {ratio}");
    assert!(narrow.ci95_low < 2.5 && 2.5 < narrow.ci95_high);
    assert!(EnsembleStat::from_batches(&values[..1], 1).is_err());
}

#[test]
fn batches_use_fresh_seeds() {
    assert_eq!(batch_seeds(7, 0, 3), vec![7, 8, 9]);
    assert_eq!(batch_seeds(7, 2, 3), vec![13, 14, 15]);
    let stat = ensemble(3, 4, 7, |s| Ok(s.iter().sum::<u64>() as f64)).unwrap();
    assert_eq!(stat.mean, (24 + 33 + 42 + 51) as f64 / 4.0);
}

#[test]
fn one_dimensional_profile_is_unimodal() {
    let a = |y: f64| 2.0 + (2.0 * std::f64::consts::PI * y / 0.1).cos();
    let prof = one_d_profile(a, &grid(0.5, 4.0, 0.01), 640).unwrap();
    let (amin, vmin) = argmin(&prof).unwrap();
    assert!((amin - 3f64.sqrt()).abs() < 0.01);
    assert!(vmin < 1e-3);
    let k = prof.iter().position(|p| p.0 == amin).unwrap();
    assert!(prof[..=k].windows(2).all(|w| w[1].1 <= w[0].1));
    assert!(prof[k..].windows(2).all(|w| w[1].1 >= w[0].1));
}

#[test]
fn checkerboard_runs_are_reproducible() {
    let spec = CoefficientSpec::Checkerboard;
    let setup = Setup::new(&spec, 0.25, 2, 2, 3.0, 0.1).unwrap();
    let seeds = batch_seeds(3, 0, 10);
    let a = setup.fine_run(&spec, &setup.basis, &seeds).unwrap();
    let b = setup.fine_run(&spec, &setup.basis, &seeds).unwrap();
    assert_eq!(a.energies, b.energies);
    assert_eq!(a.solutions, b.solutions);
    // the fine mesh resolves every cell edge
    assert_eq!(setup.fine.n % 4, 0);
}
