use occfluct_core::branching::{
    evolve, evolve_with_stats, init_population, offspring_count, EvolveOptions, ModelParams, OccupationRecord,
    SigmaProfile,
};
use occfluct_core::oracle::{cov_n, mean_n};
use occfluct_core::parallel::map_replications;
use occfluct_core::rng::{replication_rng, BOOTSTRAP_STREAM};
use occfluct_core::stable::two_sided_tail;
use occfluct_core::stats::{bootstrap_covariance_se, chi_square_test, covariance_matrix, ks_one_sample, ks_two_sample, mean, standard_error};
use occfluct_core::TestFunction;
use statrs::distribution::{Discrete, Poisson};

fn params(alpha: f64, gamma: f64, sigma: SigmaProfile, horizon: f64, c: f64) -> ModelParams {
    ModelParams::with_window(alpha, gamma, sigma, horizon, &TestFunction::unit_bump(), c, 0.25).unwrap()
}

fn records(p: &ModelParams, n: usize, seed: u64, opts: EvolveOptions) -> Vec<OccupationRecord> {
    let phi = TestFunction::unit_bump();
    map_replications(n, 1, |rep| evolve(p, &phi, &opts, &mut replication_rng(seed, rep)).unwrap()).unwrap()
}

#[test]
fn initial_count_is_poisson() {
    let mut rng = replication_rng(5, 0);
    let n = 10_000;
    let counts: Vec<usize> = (0..n).map(|_| init_population(10.0, 1.0, &mut rng).unwrap().len()).collect();
    let pois = Poisson::new(20.0).unwrap();
    // bins 0..=10 pooled, 11..=30 single, 31+ pooled
    let mut observed = vec![0u64; 22];
    for &c in &counts {
        observed[c.clamp(10, 31) - 10] += 1;
    }
    let mut expected: Vec<f64> = (10..=31).map(|k| n as f64 * pois.pmf(k)).collect();
    expected[0] = n as f64 * (0..=10).map(|k| pois.pmf(k)).sum::<f64>();
    expected[21] = n as f64 - expected[..21].iter().sum::<f64>();
    let (_, p) = chi_square_test(&observed, &expected).unwrap();
    assert!(p > 0.01, "p = {p}");
    let m = counts.iter().sum::<usize>() as f64 / n as f64;
    assert!((m - 20.0).abs() < 3.0 * (20.0 / n as f64).sqrt());
}

#[test]
fn initial_positions_are_uniform() {
    let mut rng = replication_rng(6, 0);
    let xs: Vec<f64> = (0..500)
        .flat_map(|_| init_population(10.0, 1.0, &mut rng).unwrap())
        .map(|p| p.position)
        .collect();
    let (_, p) = ks_one_sample(&xs, |x| ((x + 10.0) / 20.0).clamp(0.0, 1.0));
    assert!(p > 0.01, "p = {p}");
}

#[test]
fn no_branching_rate_means_no_clocks() {
    let mut rng = replication_rng(7, 0);
    let pop = init_population(10.0, 0.0, &mut rng).unwrap();
    assert!(pop.iter().all(|p| p.next_branch_time == f64::INFINITY));
}

#[test]
fn offspring_frequencies() {
    let n = 100_000u64;
    for sigma in [0.25, 0.5] {
        let mut rng = replication_rng(8, (sigma * 100.0) as u64);
        let mut counts = [0u64; 3];
        for _ in 0..n {
            counts[offspring_count(sigma, &mut rng).unwrap() as usize] += 1;
        }
        for (c, p) in counts.iter().zip([sigma, 1.0 - 2.0 * sigma, sigma]) {
            let sd = (n as f64 * p * (1.0 - p)).sqrt();
            assert!((*c as f64 - n as f64 * p).abs() <= 3.0 * sd.max(f64::MIN_POSITIVE), "σ={sigma}: {counts:?}");
        }
    }
}

#[test]
fn mean_is_conserved_without_branching() {
    let p = params(2.0, 0.0, SigmaProfile::default(), 10.0, 10.0);
    let recs = records(&p, 2000, 9, EvolveOptions::default());
    let target = TestFunction::unit_bump().integral();
    for k in (0..=p.steps()).step_by(4) {
        let xs: Vec<f64> = recs.iter().map(|r| r.values[k]).collect();
        assert!((mean(&xs) - target).abs() <= 3.0 * standard_error(&xs), "k={k}");
    }
}

#[test]
fn mean_is_conserved_with_branching() {
    let p = params(1.5, 1.0, SigmaProfile::default(), 10.0, 10.0);
    let recs = records(&p, 2000, 10, EvolveOptions::default());
    let target = mean_n(&TestFunction::unit_bump(), &p, 10.0, true).unwrap();
    for k in (0..=p.steps()).step_by(4) {
        let xs: Vec<f64> = recs.iter().map(|r| r.values[k]).collect();
        assert!((mean(&xs) - target).abs() <= 3.0 * standard_error(&xs), "k={k}");
    }
}

#[test]
fn zero_sigma_short_circuit_keeps_the_law() {
    let p = params(1.5, 2.0, SigmaProfile::Zero, 5.0, 10.0);
    let on = records(&p, 2000, 11, EvolveOptions::default());
    let off = records(&p, 2000, 11, EvolveOptions { skip_noop_branching: false, ..Default::default() });
    for k in [4, 20] {
        let a: Vec<f64> = on.iter().map(|r| r.values[k]).collect();
        let b: Vec<f64> = off.iter().map(|r| r.values[k]).collect();
        let (_, pv) = ks_two_sample(&a, &b);
        assert!(pv > 0.01, "k={k}: p = {pv}");
    }
}

#[test]
fn branching_only_where_sigma_lives() {
    let sigma = SigmaProfile::ConstantOnInterval { level: 0.5, left: -1.0, right: 1.0 };
    let p = params(1.5, 1.0, sigma, 10.0, 10.0);
    let phi = TestFunction::unit_bump();
    for rep in 0..50 {
        let (_, stats) = evolve_with_stats(&p, &phi, &EvolveOptions::default(), rep, &mut replication_rng(12, rep)).unwrap();
        assert!(stats.max_abs_branch_position <= 1.0);
    }
}

#[test]
fn deterministic_records() {
    let p = params(1.5, 1.0, SigmaProfile::default(), 10.0, 10.0);
    assert_eq!(records(&p, 5, 13, EvolveOptions::default()), records(&p, 5, 13, EvolveOptions::default()));
}

fn cov_10_15(recs: &[OccupationRecord], seed: u64) -> (f64, f64) {
    let rows: Vec<Vec<f64>> = recs.iter().map(|r| vec![r.values[40], r.values[60]]).collect();
    let c = covariance_matrix(&rows)[0][1];
    let se = bootstrap_covariance_se(&rows, 1000, &mut replication_rng(seed, BOOTSTRAP_STREAM))[0][1];
    (c, se)
}

#[test]
fn covariance_matches_oracle() {
    let p = params(1.5, 1.0, SigmaProfile::default(), 20.0, 10.0);
    let recs = records(&p, 5000, 14, EvolveOptions::default());
    let (mc, se) = cov_10_15(&recs, 14);
    let exact = cov_n(&TestFunction::unit_bump(), &p, 10.0, 15.0).unwrap();
    assert!((mc - exact).abs() <= 3.0 * se, "{mc} ± {se} vs {exact}");
}

#[test]
fn window_truncation_is_negligible() {
    let phi = TestFunction::unit_bump();
    let p = params(1.5, 1.0, SigmaProfile::default(), 20.0, 10.0);
    // Monte Carlo with the window doubled agrees within the combined error
    let wide = params(1.5, 1.0, SigmaProfile::default(), 20.0, 20.0);
    assert!((wide.window_halfwidth - p.window_halfwidth - 10.0 * 20f64.powf(2.0 / 3.0)).abs() < 1e-9);
    let (a, sa) = cov_10_15(&records(&p, 2000, 15, EvolveOptions::default()), 15);
    let (b, sb) = cov_10_15(&records(&wide, 2000, 16, EvolveOptions::default()), 16);
    // fraction of the intensity near φ that starts outside [-L, L]
    let r = phi.support_radius(1e-8);
    let leak = two_sided_tail(1.5, 20.0, p.window_halfwidth - 2.0 * r).unwrap();
    let exact = cov_n(&phi, &p, 10.0, 15.0).unwrap();
    assert!(leak * exact < sa, "leak {leak} of {exact}, se {sa}");
    assert!((a - b).abs() <= 3.0 * (sa * sa + sb * sb).sqrt(), "{a} ± {sa} vs {b} ± {sb}");
}
