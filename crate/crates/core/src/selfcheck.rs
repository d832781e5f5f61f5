//! Closed-form invariant suite behind the `self-check` command.

use std::f64::consts::PI;

use crate::branching::{ModelParams, OccupationRecord, SigmaProfile};
use crate::gaussian::{dependence_exponent_fit, increment_cov, limit_constants, CovKernel, Family};
use crate::occupation::{fluctuation_path, ScalingRegime};
use crate::oracle::{exact_cov_xt_matrix, mean_n, MomentOracle, QuadratureSpec};
use crate::stable::{cdf, density, density_at_zero, semigroup_apply, SpatialGrid};
use crate::testfn::{Bump, TestFunction};

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub pass: bool,
    pub detail: String,
}

fn check(name: &'static str, f: impl FnOnce() -> crate::Result<(bool, String)>) -> CheckResult {
    match f() {
        Ok((pass, detail)) => CheckResult { name, pass, detail },
        Err(e) => CheckResult {
            name,
            pass: false,
            detail: format!("error: {e}"),
        },
    }
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * b.abs().max(1e-300)
}

pub fn run_self_checks() -> Vec<CheckResult> {
    vec![
        check("kernel closed forms", || {
            let fbm = CovKernel::fbm(0.75)?.cov(1.0, 2.0);
            let sub = CovKernel::sub_fbm(0.75)?.cov(1.0, 1.0);
            let rl = CovKernel::rl(5.0 / 6.0)?.cov(1.0, 1.0);
            let ok = close(fbm, 2f64.sqrt(), 1e-12) && close(sub, 2.0 - 2f64.sqrt(), 1e-12) && close(rl, 0.6, 1e-12);
            Ok((ok, format!("fbm {fbm:.6} sub-fbm {sub:.6} rl {rl:.6}")))
        }),
        check("H = 1/2 collapses to s∧t", || {
            let ks = [CovKernel::bm(), CovKernel::fbm(0.5)?, CovKernel::sub_fbm(0.5)?, CovKernel::rl(0.5)?];
            let ok = ks.iter().all(|k| k.cov(1.0, 3.0) == 1.0 && k.cov(2.5, 0.7) == 0.7);
            Ok((ok, String::new()))
        }),
        check("self-similarity", || {
            let ks = [CovKernel::bm(), CovKernel::fbm(0.3)?, CovKernel::sub_fbm(0.8)?, CovKernel::rl(5.0 / 6.0)?, CovKernel::rl(0.3)?];
            let mut worst: f64 = 0.0;
            for k in &ks {
                for a in [0.5, 2.0, 10.0] {
                    let lhs = k.cov(a * 0.4, a * 1.3);
                    let rhs = a.powf(2.0 * k.h()) * k.cov(0.4, 1.3);
                    worst = worst.max((lhs - rhs).abs() / rhs.abs());
                }
            }
            Ok((worst < 1e-10, format!("max rel error {worst:.1e}")))
        }),
        check("limit constants", || {
            let k = limit_constants(1.5, 1.0, 1.0)?;
            let c = limit_constants(1.0, 1.0, 1.0)?;
            let k4 = limit_constants(1.5, 4.0, 1.0)?;
            let ok = close(k.h, 5.0 / 6.0, 1e-15)
                && (k.amplitude - 1.219).abs() < 5e-4
                && close(c.amplitude, 2.0 / PI, 1e-15)
                && close(k4.amplitude, 2.0 * k.amplitude, 1e-14);
            Ok((ok, format!("K {:.6} C {:.6}", k.amplitude, c.amplitude)))
        }),
        check("stable density closed forms", || {
            let ok = close(density_at_zero(1.0)?, 1.0 / PI, 1e-12)
                && close(density_at_zero(2.0)?, 0.5 / PI.sqrt(), 1e-12)
                && close(density(1.0, 2.0, 1.0)?, 2.0 / (PI * 5.0), 1e-12)
                && close(cdf(2.0, 1.0, 2.0)?, 0.5 * (1.0 + statrs::function::erf::erf(1.0)), 1e-10);
            Ok((ok, String::new()))
        }),
        check("semigroup of a Gaussian bump under α = 2", || {
            let phi = TestFunction::unit_bump();
            let grid = SpatialGrid::symmetric(40.0, 0.05)?;
            let out = semigroup_apply(2.0, 1.5, &phi, &grid)?;
            // N(0,1) * N(0, 2t) = N(0, 1 + 2t) scaled by √(2π)
            let v = 1.0 + 3.0;
            let worst = grid
                .points()
                .zip(&out)
                .map(|(x, y)| (y - (-x * x / (2.0 * v)).exp() / v.sqrt()).abs())
                .fold(0.0, f64::max);
            Ok((worst < 1e-10, format!("max abs error {worst:.1e}")))
        }),
        check("centered record gives a zero path", || {
            let phi = TestFunction::unit_bump();
            let p = ModelParams::with_window(1.5, 1.0, SigmaProfile::default(), 10.0, &phi, 10.0, 0.25)?;
            let rec = OccupationRecord { step: 0.25, values: vec![phi.integral(); 41] };
            let path = fluctuation_path(&rec, &p, &phi, &ScalingRegime::for_alpha(1.5)?, 20)?;
            Ok((path.values.iter().all(|v| *v == 0.0), String::new()))
        }),
        check("linearity in φ", || {
            let phi = TestFunction::unit_bump();
            let twice = TestFunction::new(vec![Bump { amplitude: 2.0, center: 0.0, width: 1.0 }])?;
            let p = ModelParams::with_window(1.5, 1.0, SigmaProfile::default(), 10.0, &phi, 10.0, 0.25)?;
            let values: Vec<f64> = (0..41).map(|k| (k as f64 * 0.37).sin() + 2.0).collect();
            let r = ScalingRegime::for_alpha(1.5)?;
            let a = fluctuation_path(&OccupationRecord { step: 0.25, values: values.clone() }, &p, &phi, &r, 20)?;
            let doubled = values.iter().map(|v| 2.0 * v).collect();
            let b = fluctuation_path(&OccupationRecord { step: 0.25, values: doubled }, &p, &twice, &r, 20)?;
            Ok((a.values.iter().zip(&b.values).all(|(x, y)| 2.0 * x == *y), String::new()))
        }),
        check("increment covariance laws", || {
            let bm = increment_cov(&CovKernel::bm(), 0.0, 1.0, 2.0, 3.0, 50.0)?;
            let k = dependence_exponent_fit(&CovKernel::rl(5.0 / 6.0)?, 0.0, 1.0, 2.0, 3.0, &[1e2, 1e3, 1e4, 1e5])?;
            let f = dependence_exponent_fit(&CovKernel::new(Family::Fbm, 0.75)?, 0.0, 1.0, 2.0, 3.0, &[1e2, 1e3, 1e4, 1e5])?;
            let ok = bm == 0.0 && (k - 2.0 / 3.0).abs() < 0.05 && (f - 0.5).abs() < 0.05;
            Ok((ok, format!("rl κ̂ {k:.4} fbm κ̂ {f:.4}")))
        }),
        check("oracle symmetry and zero times", || {
            let phi = TestFunction::unit_bump();
            let p = ModelParams::with_window(1.5, 1.0, SigmaProfile::default(), 20.0, &phi, 10.0, 0.25)?;
            let r = ScalingRegime::for_alpha(1.5)?;
            let m = exact_cov_xt_matrix(&phi, &p, &r, &[0.0, 0.5, 1.0], QuadratureSpec::default())?;
            let o = MomentOracle::new(&phi, &p, QuadratureSpec::default())?;
            let ok = m.values[0].iter().all(|v| *v == 0.0)
                && m.values[1][2] == m.values[2][1]
                && o.cov_n(3.0, 7.0) == o.cov_n(7.0, 3.0);
            Ok((ok, format!("refinement change {:.1e}", m.max_rel_change)))
        }),
        check("mean measure is preserved", || {
            let phi = TestFunction::unit_bump();
            let p = ModelParams::with_window(1.5, 1.0, SigmaProfile::default(), 50.0, &phi, 10.0, 0.25)?;
            let m = mean_n(&phi, &p, 50.0, true)?;
            Ok((close(m, (2.0 * PI).sqrt(), 1e-15), format!("{m:.6}")))
        }),
    ]
}
