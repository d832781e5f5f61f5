use std::f64::consts::PI;

use nalgebra::DMatrix;
use occfluct_core::branching::{ModelParams, SigmaProfile};
use occfluct_core::gaussian::limit_constants;
use occfluct_core::occupation::ScalingRegime;
use occfluct_core::oracle::{cov_n, exact_cov_xt, exact_cov_xt_matrix, mean_n, MomentOracle, QuadratureSpec, COV_XT_TOL};
use occfluct_core::quad::GaussLegendre;
use occfluct_core::stable::{semigroup_apply, SpatialGrid, MASS_LEAK_TOL};
use occfluct_core::{Error, TestFunction};

fn model(alpha: f64, gamma: f64, sigma: SigmaProfile, horizon: f64) -> ModelParams {
    ModelParams::with_window(alpha, gamma, sigma, horizon, &TestFunction::unit_bump(), 10.0, 0.25).unwrap()
}

fn default_model(horizon: f64) -> ModelParams {
    model(1.5, 1.0, SigmaProfile::default(), horizon)
}

#[test]
fn overlap_only_without_branching() {
    let phi = TestFunction::unit_bump();
    let p = model(2.0, 0.0, SigmaProfile::default(), 20.0);
    let v = cov_n(&phi, &p, 3.0, 3.0).unwrap();
    assert!((v - PI.sqrt()).abs() < 1e-10, "{v}");
    // α = 2: ∫φ L_d φ = √(2π) · √(2π) N(0; 0, 2 + 2d)
    let d = 1.5;
    let want = 2.0 * PI / (2.0 * PI * (2.0 + 2.0 * d)).sqrt();
    assert!((cov_n(&phi, &p, 2.0, 2.0 + d).unwrap() - want).abs() < 1e-10);
}

#[test]
fn symmetric_in_time_arguments() {
    let phi = TestFunction::unit_bump();
    let o = MomentOracle::new(&phi, &default_model(20.0), QuadratureSpec::default()).unwrap();
    assert_eq!(o.cov_n(4.0, 9.0), o.cov_n(9.0, 4.0));
    let m = exact_cov_xt_matrix(&phi, &default_model(20.0), &ScalingRegime::for_alpha(1.5).unwrap(), &[0.3, 0.8], QuadratureSpec::default()).unwrap();
    assert_eq!(m.values[0][1], m.values[1][0]);
}

/// Branching term of `cov_N` through FFT semigroup grids and Simpson in x.
fn branching_term_on_grid(phi: &TestFunction, alpha: f64, s: f64, t: f64) -> f64 {
    let step = 0.05;
    let grid = SpatialGrid::for_semigroup(alpha, t, phi, step, MASS_LEAK_TOL).unwrap();
    let lo = grid.points().position(|x| (x + 1.0).abs() < 1e-9).unwrap();
    let n = (2.0 / step).round() as usize;
    let simpson = |f: &[f64]| -> f64 {
        let mut acc = f[lo] + f[lo + n];
        for k in 1..n {
            acc += if k % 2 == 1 { 4.0 } else { 2.0 } * f[lo + k];
        }
        acc * step / 3.0
    };
    let gl = GaussLegendre::new(10);
    let panels = 4;
    let mut total = 0.0;
    for k in 0..panels {
        let (a, b) = (s * k as f64 / panels as f64, s * (k + 1) as f64 / panels as f64);
        total += gl.integrate(a, b, |u| {
            let ls = semigroup_apply(alpha, s - u, phi, &grid).unwrap();
            let lt = semigroup_apply(alpha, t - u, phi, &grid).unwrap();
            let prod: Vec<f64> = ls.iter().zip(&lt).map(|(x, y)| 0.5 * x * y).collect();
            simpson(&prod)
        });
    }
    2.0 * total
}

#[test]
fn spectral_route_matches_grid_route() {
    let phi = TestFunction::unit_bump();
    let p = default_model(20.0);
    let o = MomentOracle::new(&phi, &p, QuadratureSpec::default()).unwrap();
    let (_, br) = o.cov_n_terms(3.0, 5.0);
    let grid = branching_term_on_grid(&phi, 1.5, 3.0, 5.0);
    assert!((br - grid).abs() < 1e-4 * grid, "{br} vs {grid}");
}

#[test]
fn branching_term_is_linear_in_sigma() {
    let phi = TestFunction::unit_bump();
    let base = MomentOracle::new(&phi, &default_model(20.0), QuadratureSpec::default()).unwrap();
    let half = MomentOracle::new(&phi, &model(1.5, 1.0, SigmaProfile::default().scaled(0.5), 20.0), QuadratureSpec::default()).unwrap();
    let (f0, b0) = base.cov_n_terms(6.0, 8.0);
    let (f1, b1) = half.cov_n_terms(6.0, 8.0);
    assert_eq!(f0, f1);
    assert!((b1 - 0.5 * b0).abs() < 1e-13 * b0);
}

#[test]
fn five_by_five_matrix_is_psd() {
    let phi = TestFunction::unit_bump();
    let grid = [0.2, 0.4, 0.6, 0.8, 1.0];
    for (alpha, horizon) in [(1.5, 20.0), (1.2, 60.0), (1.0, 20.0)] {
        let p = model(alpha, 1.0, SigmaProfile::default(), horizon);
        let r = ScalingRegime::for_alpha(alpha).unwrap();
        let m = exact_cov_xt_matrix(&phi, &p, &r, &grid, QuadratureSpec::default()).unwrap();
        assert!(m.max_rel_change <= COV_XT_TOL);
        let mat = DMatrix::from_fn(5, 5, |i, j| m.values[i][j]);
        let min = mat.symmetric_eigen().eigenvalues.min();
        assert!(min >= -1e-8, "α={alpha}: {min}");
        assert!((0..5).all(|i| m.values[i][i] > 0.0));
    }
}

#[test]
fn zero_times_give_zero() {
    let phi = TestFunction::unit_bump();
    let p = default_model(20.0);
    let r = ScalingRegime::for_alpha(1.5).unwrap();
    assert_eq!(exact_cov_xt(&phi, &p, &r, 0.0, 0.7).unwrap(), 0.0);
    assert_eq!(exact_cov_xt(&phi, &p, &r, 0.4, 0.0).unwrap(), 0.0);
}

#[test]
fn regime_must_match_alpha() {
    let phi = TestFunction::unit_bump();
    let p = default_model(20.0);
    assert!(exact_cov_xt(&phi, &p, &ScalingRegime::LogCase, 0.5, 1.0).is_err());
    let r = ScalingRegime::for_alpha(1.5).unwrap();
    assert!(exact_cov_xt_matrix(&phi, &p, &r, &[0.5, 1.2], QuadratureSpec::default()).is_err());
}

#[test]
fn overlap_term_alone_vanishes_under_norming() {
    // without branching the endpoint variance decays like T^{1/α - 1}
    let phi = TestFunction::unit_bump();
    let r = ScalingRegime::for_alpha(1.5).unwrap();
    let v: Vec<f64> = [200.0, 2000.0, 20000.0]
        .iter()
        .map(|&horizon| exact_cov_xt(&phi, &model(1.5, 0.0, SigmaProfile::default(), horizon), &r, 1.0, 1.0).unwrap())
        .collect();
    // per-decade ratios fall toward 10^{-1/3}
    let rate = 10f64.powf(-1.0 / 3.0);
    let (r1, r2) = (v[1] / v[0], v[2] / v[1]);
    assert!(r1 < 1.0 && rate < r2 && r2 < r1, "{v:?}");
    assert!(r2 / rate - 1.0 < 0.1, "{v:?}");
}

#[test]
fn endpoint_variance_approaches_limit() {
    let phi = TestFunction::unit_bump();
    let r = ScalingRegime::for_alpha(1.5).unwrap();
    let k = limit_constants(1.5, 1.0, 1.0).unwrap();
    let limit = (k.amplitude * phi.integral()).powi(2) * 0.6;
    let mut prev = f64::INFINITY;
    for horizon in [20.0, 60.0, 200.0, 2000.0] {
        let v = exact_cov_xt(&phi, &default_model(horizon), &r, 1.0, 1.0).unwrap();
        let dev = (v - limit).abs() / limit;
        assert!(dev < prev, "T={horizon}: {dev}");
        prev = dev;
    }
}

#[test]
fn mean_measure() {
    let phi = TestFunction::unit_bump();
    let p = default_model(50.0);
    assert!((mean_n(&phi, &p, 0.0, true).unwrap() - 2.506_628_274_631).abs() < 1e-12);
    assert!((mean_n(&phi, &p, 50.0, true).unwrap() - (2.0 * PI).sqrt()).abs() < 1e-15);
    assert!(matches!(mean_n(&phi, &p, -1.0, false), Err(Error::InvalidParameter { .. })));
}

#[test]
fn refinement_check_is_reported() {
    let phi = TestFunction::unit_bump();
    let spec = QuadratureSpec::default();
    let m = exact_cov_xt_matrix(&phi, &default_model(60.0), &ScalingRegime::for_alpha(1.5).unwrap(), &[0.5, 1.0], spec).unwrap();
    assert!(m.max_rel_change <= COV_XT_TOL);
    for (v, r) in m.values.iter().flatten().zip(m.reference.iter().flatten()) {
        assert!((v - r).abs() <= COV_XT_TOL * r.abs());
    }
}
