//! Library results against independent reference computations.

mod common;

use ndarray::{array, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stratlearn::cdens::{
    grid_point, interpolate, pointwise_losses, target_risk_cde, trapezoid, trapezoid_sq, CdeKind, CdeSpec, FittedCde,
    GRID_POINTS,
};
use stratlearn::eval::{auc, bootstrap_indices, bootstrap_se, roc_curve, trapezoid_area, Metric};
use stratlearn::learn::{cross_validate, fit, fold_assignment, CvConfig, LearnerSpec};
use stratlearn::propensity::{fit_propensity, PropensityConfig};
use stratlearn::tabular::Dataset;
use stratlearn::weights::ulsif_loo_scores;

/// Plain gradient ascent on `sum_i [s_i eta_i - log(1 + e^eta_i)] - lambda/2 b^2`.
fn logistic_gradient_ascent(x: &[f64], s: &[f64], lambda: f64) -> (f64, f64) {
    let (mut b0, mut b1) = (0.0, 0.0);
    for _ in 0..200_000 {
        let (mut g0, mut g1) = (0.0, -lambda * b1);
        for (&xi, &si) in x.iter().zip(s) {
            let p = 1.0 / (1.0 + (-(b0 + b1 * xi)).exp());
            g0 += si - p;
            g1 += (si - p) * xi;
        }
        b0 += 0.05 * g0;
        b1 += 0.05 * g1;
    }
    (b0, b1)
}

#[test]
fn penalized_logistic_matches_gradient_ascent_on_separable_toy() {
    let xv = [-2.0, -1.0, -0.5, 0.5, 1.0, 2.0];
    let s = [0.0, 0.0, 0.0, 1.0, 1.0, 1.0];
    let (b0, b1) = logistic_gradient_ascent(&xv, &s, 1.0);
    assert!(b1 > 0.5 && b1.is_finite());

    let x = Array2::from_shape_vec((6, 1), xv.to_vec()).unwrap();
    let d = Dataset::new(x.clone(), None, s.iter().map(|&v| v == 1.0).collect(), vec!["x".into()]).unwrap();
    let m = fit_propensity(&d, &PropensityConfig { ridge_lambda: 1.0, ..Default::default() }).unwrap();
    assert!((m.intercept - b0).abs() < 1e-6, "{} vs {b0}", m.intercept);
    assert!((m.slopes()[0] - b1).abs() < 1e-6, "{:?} vs {b1}", m.slopes());

    let f = fit(&LearnerSpec::LogisticClassifier { lambda: 1.0 }, x.view(), &s, None).unwrap();
    let p = f.predict(array![[0.7]].view()).unwrap()[0];
    let want = 1.0 / (1.0 + (-(b0 + b1 * 0.7)).exp());
    assert!((p - want).abs() < 1e-6);
}

fn gauss_design(x: &Array2<f64>, c: &Array2<f64>, sigma: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.nrows() * c.nrows());
    for r in x.rows() {
        for cr in c.rows() {
            let d2: f64 = r.iter().zip(cr.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
            out.push((-d2 / (2.0 * sigma * sigma)).exp());
        }
    }
    out
}

#[test]
fn ulsif_closed_form_loo_matches_refitting() {
    let mut r = ChaCha8Rng::seed_from_u64(5);
    let xs = Array2::from_shape_fn((14, 2), |_| r.random::<f64>());
    let xt = Array2::from_shape_fn((11, 2), |_| r.random::<f64>() + 0.25);
    let centers = common::rows_of(xt.view(), &[1, 4, 7, 9]);
    let lambdas = [1e-3, 0.1, 1.0];
    for sigma in [0.2, 0.6] {
        let ps = gauss_design(&xs, &centers, sigma);
        let pt = gauss_design(&xt, &centers, sigma);
        for max_pairs in [usize::MAX, 5] {
            let fast = ulsif_loo_scores(&ps, &pt, centers.nrows(), &lambdas, max_pairs);
            for (l, &lambda) in lambdas.iter().enumerate() {
                let slow = common::ulsif_loo_brute(xs.view(), xt.view(), centers.view(), sigma, lambda, max_pairs);
                assert!((fast[l] - slow).abs() < 1e-9 * slow.abs().max(1.0), "{} vs {slow}", fast[l]);
            }
        }
    }
}

#[test]
fn roc_hand_case_and_area_equals_auc() {
    let pts = roc_curve(&[0.9, 0.8, 0.8, 0.3], &[1.0, 1.0, 0.0, 0.0]).unwrap();
    assert_eq!(pts, vec![(0.0, 0.0), (0.0, 0.5), (0.5, 1.0), (1.0, 1.0)]);
    assert_eq!(trapezoid_area(&pts), 0.875);

    let mut r = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..50 {
        let n = r.random_range(4..50);
        let mut y: Vec<f64> = (0..n).map(|_| f64::from(r.random::<bool>())).collect();
        y[0] = 1.0;
        y[1] = 0.0;
        let s: Vec<f64> = (0..n).map(|_| f64::from(r.random_range(0..6u8))).collect();
        let area = trapezoid_area(&roc_curve(&s, &y).unwrap());
        assert!((area - common::auc_pairs(&s, &y)).abs() < 1e-12);
        assert!((auc(&s, &y).unwrap() - area).abs() < 1e-12);
    }
}

#[test]
fn two_fold_cv_on_four_rows_by_hand() {
    let xv = [0.0, 1.0, 2.0, 4.0];
    let y = [1.0, 0.0, 3.0, 2.0];
    let x = Array2::from_shape_vec((4, 1), xv.to_vec()).unwrap();
    let cfg = CvConfig { folds: 2, ..Default::default() };
    let grid = [LearnerSpec::LeastSquares { lambda: 0.0 }, LearnerSpec::LeastSquares { lambda: 1e3 }];
    let seed = 21;
    let res = cross_validate(&grid, x.view(), &y, &cfg, None, seed).unwrap();

    let fold = fold_assignment(4, 2, seed);
    let mut hand = 0.0;
    for f in 0..2 {
        let tr: Vec<usize> = (0..4).filter(|&i| fold[i] != f).collect();
        let te: Vec<usize> = (0..4).filter(|&i| fold[i] == f).collect();
        // the line through the two training points
        let slope = (y[tr[1]] - y[tr[0]]) / (xv[tr[1]] - xv[tr[0]]);
        let at = |v: f64| y[tr[0]] + slope * (v - xv[tr[0]]);
        hand += te.iter().map(|&i| (at(xv[i]) - y[i]).powi(2)).sum::<f64>() / 2.0 / 2.0;
    }
    assert!((res.table[0].risk - hand).abs() < 1e-10, "{} vs {hand}", res.table[0].risk);
}

#[test]
fn bootstrap_se_reimplemented_from_indices() {
    let mut r = ChaCha8Rng::seed_from_u64(3);
    let y: Vec<f64> = (0..80).map(|_| r.random::<f64>()).collect();
    let p: Vec<f64> = y.iter().map(|v| v + 0.3 * (r.random::<f64>() - 0.5)).collect();
    let (n_boot, seed) = (200, 17);
    let reps: Vec<f64> = (0..n_boot)
        .map(|b| {
            let idx = bootstrap_indices(&y, false, seed, b).unwrap();
            idx.iter().map(|&i| (p[i] - y[i]).powi(2)).sum::<f64>() / idx.len() as f64
        })
        .collect();
    let m = reps.iter().sum::<f64>() / n_boot as f64;
    let sd = (reps.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n_boot - 1) as f64).sqrt();
    let got = bootstrap_se(Metric::Mse, &p, &y, n_boot, seed).unwrap();
    assert!((got.se - sd).abs() < 1e-12 * sd.max(1.0));
}

#[test]
fn cde_risk_by_hand_quadrature() {
    // A uniform density on [0, 1]: int f^2 = 1 and f(z) = 1, so every loss is -1.
    let dens = Array2::from_elem((3, GRID_POINTS), 1.0);
    for l in pointwise_losses(&dens, &[0.1, 0.5, 1.0]) {
        assert!((l + 1.0).abs() < 1e-12);
    }
    // f(z) = 2z: int f^2 = 4/3, trapezoid error is O(h^2).
    let tri: Vec<f64> = (0..GRID_POINTS).map(|b| 2.0 * grid_point(b)).collect();
    assert!((trapezoid(&tri) - 1.0).abs() < 1e-12);
    let h = grid_point(1);
    assert!((trapezoid_sq(&tri) - 4.0 / 3.0).abs() <= 4.0 * h * h);
    assert!((interpolate(&tri, 0.37) - 0.74).abs() < 1e-12);
}

#[test]
fn kernel_nn_with_all_neighbours_is_the_marginal_kde() {
    let mut r = ChaCha8Rng::seed_from_u64(12);
    let n = 40;
    let x = Array2::from_shape_fn((n, 2), |_| r.random::<f64>());
    let z: Vec<f64> = (0..n).map(|_| 0.2 + 0.6 * r.random::<f64>()).collect();
    let h = 0.08;
    let spec = CdeSpec { kind: CdeKind::KerNn, neighbors: n, smoothing: h };
    let m = FittedCde::new(spec, x.view(), &z).unwrap();
    let q = array![[0.3, 0.9], [0.5, 0.5]];
    let dens = stratlearn::cdens::DensityModel::densities(&m, q.view()).unwrap();
    let raw: Vec<f64> = (0..GRID_POINTS)
        .map(|b| z.iter().map(|&zi| (-(grid_point(b) - zi).powi(2) / (2.0 * h * h)).exp()).sum())
        .collect();
    let mass = trapezoid(&raw);
    for row in dens.rows() {
        for (b, v) in row.iter().enumerate() {
            assert!((v - raw[b] / mass).abs() < 1e-9 * (raw[b] / mass).max(1.0));
        }
    }
    let risk = target_risk_cde(&m, q.view(), &[0.4, 0.6]).unwrap();
    let manual = pointwise_losses(&dens, &[0.4, 0.6]);
    assert!((risk - (manual[0] + manual[1]) / 2.0).abs() < 1e-12);
}
