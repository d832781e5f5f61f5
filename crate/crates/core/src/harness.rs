//! Experiment orchestration: configuration, covariance reports with
//! bootstrap errors, limit-trend verdicts and report files.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::branching::{EvolveOptions, ModelParams, SigmaProfile, DEFAULT_OCCUPATION_STEP, DEFAULT_WINDOW_CONSTANT};
use crate::error::{Error, Result};
use crate::gaussian::{limit_constants, CovKernel, Family, LimitConstants};
use crate::quad::GaussLegendre;
use crate::occupation::{grid_stride, run_ensemble, spacetime_functional, Ensemble, FluctuationPath, ScalingRegime};
use crate::oracle::{exact_cov_xt_matrix, OracleMatrix, QuadratureSpec};
use crate::rng::{replication_rng, BOOTSTRAP_STREAM};
use crate::stats::{bootstrap_covariance_se, covariance_matrix};
use crate::testfn::TestFunction;

pub const SCHEMA_VERSION: u32 = 1;
pub const DEFAULT_SEED: u64 = 7_346_129;
/// Minimum ensemble size for covariance estimation.
pub const MIN_REPLICATIONS: usize = 100;

fn config_err(field: impl Into<String>, reason: impl Into<String>) -> Error {
    Error::Config {
        field: field.into(),
        reason: reason.into(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub alpha: f64,
    pub gamma: f64,
    pub sigma: SigmaProfile,
    pub window_constant: f64,
    pub occupation_step: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            alpha: 1.5,
            gamma: 1.0,
            sigma: SigmaProfile::default(),
            window_constant: DEFAULT_WINDOW_CONSTANT,
            occupation_step: DEFAULT_OCCUPATION_STEP,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Thresholds {
    /// Final-T median deviation bound for α ∈ (1, 2).
    pub final_deviation: f64,
    /// Final-T deviation bound for the α = 1 space-time functional.
    pub final_deviation_log: f64,
    /// Per-pair band in bootstrap standard errors.
    pub se_band: f64,
    /// Pairs whose limit value is below this are excluded.
    pub limit_floor: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            final_deviation: 0.15,
            final_deviation_log: 0.20,
            se_band: 3.0,
            limit_floor: 0.02,
        }
    }
}

/// One experiment, as a single JSON document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub phi: TestFunction,
    /// Horizons `T`, strictly increasing.
    pub horizons: Vec<f64>,
    pub replications: usize,
    pub n_t: usize,
    pub seed: u64,
    pub workers: usize,
    pub out: PathBuf,
    pub thresholds: Thresholds,
    pub bootstrap_resamples: usize,
    pub population_cap: usize,
    /// Evaluate the moment oracle alongside the Monte Carlo estimates.
    pub oracle: bool,
    /// Write one `s,value` CSV per replication.
    pub dump_records: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            phi: TestFunction::default(),
            horizons: vec![20.0, 60.0, 200.0],
            replications: 2000,
            n_t: 20,
            seed: DEFAULT_SEED,
            workers: std::thread::available_parallelism().map_or(1, |n| n.get()),
            out: PathBuf::from("out"),
            thresholds: Thresholds::default(),
            bootstrap_resamples: 1000,
            population_cap: 1_000_000,
            oracle: true,
            dump_records: false,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(|e| {
            let field = e.path().to_string();
            config_err(if field == "." { "<root>".into() } else { field }, e.into_inner().to_string())
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| config_err("--config", format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// Apply `key.path=value` overrides; `value` is parsed as JSON and falls
    /// back to a plain string.
    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self> {
        if overrides.is_empty() {
            return Ok(self.clone());
        }
        let mut doc = serde_json::to_value(self)?;
        for o in overrides {
            let (key, raw) = o
                .split_once('=')
                .ok_or_else(|| config_err(o.clone(), "override must look like key.path=value"))?;
            let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            set_path(&mut doc, key, value)?;
        }
        Self::from_json(&doc.to_string())
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        if !(m.alpha > 0.0 && m.alpha <= 2.0) {
            return Err(config_err("model.alpha", format!("{} is outside (0, 2]", m.alpha)));
        }
        if !(m.gamma >= 0.0 && m.gamma.is_finite()) {
            return Err(config_err("model.gamma", "must be finite and >= 0"));
        }
        m.sigma.validate().map_err(|e| config_err("model.sigma", e.to_string()))?;
        if !(m.window_constant > 0.0) {
            return Err(config_err("model.window_constant", "must be > 0"));
        }
        if !(m.occupation_step > 0.0) {
            return Err(config_err("model.occupation_step", "must be > 0"));
        }
        self.phi.validate().map_err(|e| config_err("phi", e.to_string()))?;
        if self.horizons.is_empty() {
            return Err(config_err("horizons", "need at least one horizon"));
        }
        if self.horizons.iter().any(|t| !(*t > 0.0 && t.is_finite())) {
            return Err(config_err("horizons", "horizons must be finite and > 0"));
        }
        if self.horizons.windows(2).any(|w| w[1] <= w[0]) {
            return Err(config_err("horizons", "must be strictly increasing"));
        }
        if self.replications < 2 {
            return Err(config_err("replications", "need >= 2"));
        }
        if self.n_t == 0 {
            return Err(config_err("n_t", "need >= 1"));
        }
        if self.workers == 0 {
            return Err(config_err("workers", "need >= 1"));
        }
        if self.bootstrap_resamples < 2 {
            return Err(config_err("bootstrap_resamples", "need >= 2"));
        }
        let th = &self.thresholds;
        if !(th.final_deviation > 0.0 && th.final_deviation_log > 0.0 && th.se_band >= 0.0 && th.limit_floor >= 0.0) {
            return Err(config_err("thresholds", "bounds must be positive"));
        }
        for (i, &t) in self.horizons.iter().enumerate() {
            self.model_params(t)
                .map_err(|e| config_err(format!("horizons[{i}]"), e.to_string()))?;
            grid_stride(t, m.occupation_step, self.n_t).map_err(|e| config_err(format!("horizons[{i}]"), e.to_string()))?;
        }
        Ok(())
    }

    /// Validation for limit experiments: additionally α ∈ {1} ∪ (1, 2),
    /// `D > 0` and `T > 1` in the logarithmic case.
    pub fn validate_for_limit(&self) -> Result<()> {
        self.validate()?;
        let regime = ScalingRegime::for_alpha(self.model.alpha).map_err(|e| config_err("model.alpha", e.to_string()))?;
        for (i, &t) in self.horizons.iter().enumerate() {
            regime
                .norming(t)
                .map_err(|e| config_err(format!("horizons[{i}]"), e.to_string()))?;
        }
        if self.model.gamma <= 0.0 || self.model.sigma.total_mass() <= 0.0 {
            return Err(config_err("model", "limit experiments need γ > 0 and a nonzero σ"));
        }
        Ok(())
    }

    pub fn model_params(&self, horizon: f64) -> Result<ModelParams> {
        let m = &self.model;
        ModelParams::with_window(
            m.alpha,
            m.gamma,
            m.sigma.clone(),
            horizon,
            &self.phi,
            m.window_constant,
            m.occupation_step,
        )
    }

    pub fn regime(&self) -> Result<ScalingRegime> {
        ScalingRegime::for_alpha(self.model.alpha)
    }

    pub fn limit(&self) -> Result<LimitConstants> {
        limit_constants(self.model.alpha, self.model.gamma, self.model.sigma.total_mass())
    }

    pub fn evolve_options(&self) -> EvolveOptions {
        EvolveOptions {
            population_cap: self.population_cap,
            ..Default::default()
        }
    }

    /// The config without run-location fields (`out`, `workers`), which do
    /// not affect any result.
    pub fn canonical(&self) -> Value {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Value::Object(map) = &mut v {
            map.remove("out");
            map.remove("workers");
        }
        v
    }

    /// SHA-256 of the canonical config JSON.
    pub fn content_hash(&self) -> String {
        hex::encode(Sha256::digest(self.canonical().to_string().as_bytes()))
    }

    /// Master seed for the `index`-th horizon.
    pub fn horizon_seed(&self, index: usize) -> u64 {
        self.seed.wrapping_add((index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
    }

    /// Scaled-time grid `t_j = j/n_t`, `j = 1..=n_t`.
    pub fn time_grid(&self) -> Vec<f64> {
        (1..=self.n_t).map(|j| j as f64 / self.n_t as f64).collect()
    }
}

fn set_path(doc: &mut Value, key: &str, value: Value) -> Result<()> {
    let mut cur = doc;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let last = i + 1 == parts.len();
        cur = match cur {
            Value::Object(map) => {
                if last {
                    map.insert(part.to_string(), value);
                    return Ok(());
                }
                map.entry(part.to_string()).or_insert_with(|| Value::Object(Default::default()))
            }
            Value::Array(items) => {
                let idx: usize = part
                    .parse()
                    .map_err(|_| config_err(key, format!("`{part}` is not an array index")))?;
                let len = items.len();
                let slot = items
                    .get_mut(idx)
                    .ok_or_else(|| config_err(key, format!("index {idx} out of range (len {len})")))?;
                if last {
                    *slot = value;
                    return Ok(());
                }
                slot
            }
            _ => return Err(config_err(key, format!("`{part}` does not name a nested field"))),
        };
    }
    Err(config_err(key, "empty override key"))
}

/// Monte Carlo covariance of `<X_T(t_i), φ>` with bootstrap errors.
#[derive(Debug, Clone, PartialEq)]
pub struct CovEstimate {
    pub grid: Vec<f64>,
    pub cov: Vec<Vec<f64>>,
    pub se: Vec<Vec<f64>>,
    pub replications: usize,
}

/// Unbiased covariance over replications at the grid points `t_j, j >= 1`
/// with bootstrap SEs from `resamples` draws seeded by `seed`.
pub fn estimate_cov(ensemble: &Ensemble<FluctuationPath>, resamples: usize, seed: u64) -> Result<CovEstimate> {
    if ensemble.len() < MIN_REPLICATIONS {
        return Err(Error::TooFewReplications {
            got: ensemble.len(),
            need: MIN_REPLICATIONS,
        });
    }
    let rows: Vec<Vec<f64>> = ensemble.items.iter().map(|p| p.values[1..].to_vec()).collect();
    let grid = ensemble.items[0].t[1..].to_vec();
    let cov = covariance_matrix(&rows);
    let se = bootstrap_covariance_se(&rows, resamples, &mut replication_rng(seed, BOOTSTRAP_STREAM));
    Ok(CovEstimate {
        grid,
        cov,
        se,
        replications: ensemble.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovEntry {
    pub s: f64,
    pub t: f64,
    pub mc: f64,
    pub se: f64,
    pub oracle: Option<f64>,
    pub limit: f64,
}

impl CovEntry {
    pub fn deviation(&self) -> f64 {
        (self.mc - self.limit).abs() / self.limit.abs()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovReport {
    pub schema_version: u32,
    pub horizon: f64,
    pub replications: usize,
    pub aborted: Vec<u64>,
    pub seed: u64,
    pub bootstrap_resamples: usize,
    pub phi_mass: f64,
    pub limit: LimitConstants,
    pub config_hash: String,
    pub oracle_max_rel_change: Option<f64>,
    /// Upper triangle `s <= t`.
    pub entries: Vec<CovEntry>,
}

impl CovReport {
    #[allow(clippy::too_many_arguments)]
    pub fn build(
        est: &CovEstimate,
        horizon: f64,
        aborted: Vec<u64>,
        seed: u64,
        bootstrap_resamples: usize,
        phi_mass: f64,
        limit: LimitConstants,
        oracle: Option<&OracleMatrix>,
        config_hash: String,
    ) -> Result<Self> {
        if let Some(o) = oracle {
            if o.grid != est.grid {
                return Err(Error::GridMismatch("oracle grid differs from ensemble grid".into()));
            }
        }
        let n = est.grid.len();
        let mut entries = Vec::with_capacity(n * (n + 1) / 2);
        for i in 0..n {
            for j in i..n {
                let (s, t) = (est.grid[i], est.grid[j]);
                entries.push(CovEntry {
                    s,
                    t,
                    mc: est.cov[i][j],
                    se: est.se[i][j],
                    oracle: oracle.map(|o| o.values[i][j]),
                    limit: limit.limit_cov(phi_mass, s, t),
                });
            }
        }
        Ok(Self {
            schema_version: SCHEMA_VERSION,
            horizon,
            replications: est.replications,
            aborted,
            seed,
            bootstrap_resamples,
            phi_mass,
            limit,
            config_hash,
            oracle_max_rel_change: oracle.map(|o| o.max_rel_change),
            entries,
        })
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(fs::File::create(path)?);
        writeln!(w, "s,t,mc,se,oracle,limit")?;
        for e in &self.entries {
            let oracle = e.oracle.map_or(String::new(), |v| v.to_string());
            writeln!(w, "{},{},{},{},{},{}", e.s, e.t, e.mc, e.se, oracle, e.limit)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Outcome of a limit-trend test.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrendVerdict {
    pub statistic: String,
    pub horizons: Vec<f64>,
    /// Median-over-pairs relative deviation per horizon.
    pub deviations: Vec<f64>,
    pub monotone: bool,
    pub threshold: f64,
    pub final_ok: bool,
    /// `(s, t, deviation, allowed)` for final-horizon pairs outside their band.
    pub pair_failures: Vec<(f64, f64, f64, f64)>,
    /// Pairs with `|limit|` below the floor.
    pub excluded: Vec<(f64, f64)>,
    pub pass: bool,
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// PASS when the median relative deviation from the limit is nonincreasing
/// across the horizons, the final one is below `thresholds.final_deviation`,
/// and every final-horizon pair lies within
/// `max(final_deviation, se_band · SE / |limit|)`.
pub fn limit_trend_test(reports: &[CovReport], thresholds: &Thresholds) -> Result<TrendVerdict> {
    if reports.len() < 3 {
        return Err(crate::error::invalid("reports", format!("need >= 3 horizons, got {}", reports.len())));
    }
    let floor = thresholds.limit_floor;
    let mut excluded = Vec::new();
    let mut deviations = Vec::with_capacity(reports.len());
    for (k, r) in reports.iter().enumerate() {
        let devs: Vec<f64> = r
            .entries
            .iter()
            .filter(|e| {
                let keep = e.limit.abs() >= floor && e.limit != 0.0;
                if !keep && k == 0 {
                    excluded.push((e.s, e.t));
                }
                keep
            })
            .map(CovEntry::deviation)
            .collect();
        if devs.is_empty() {
            return Err(crate::error::invalid("reports", "every limit value is below the floor"));
        }
        deviations.push(median(devs));
    }
    let last = reports.last().unwrap();
    let pair_failures: Vec<(f64, f64, f64, f64)> = last
        .entries
        .iter()
        .filter(|e| e.limit.abs() >= floor && e.limit != 0.0)
        .filter_map(|e| {
            let allowed = thresholds.final_deviation.max(thresholds.se_band * e.se / e.limit.abs());
            let d = e.deviation();
            (d > allowed).then_some((e.s, e.t, d, allowed))
        })
        .collect();
    Ok(trend(
        "covariance-matrix median relative deviation",
        reports.iter().map(|r| r.horizon).collect(),
        deviations,
        thresholds.final_deviation,
        pair_failures,
        excluded,
    ))
}

fn trend(
    statistic: &str,
    horizons: Vec<f64>,
    deviations: Vec<f64>,
    threshold: f64,
    pair_failures: Vec<(f64, f64, f64, f64)>,
    excluded: Vec<(f64, f64)>,
) -> TrendVerdict {
    let monotone = deviations.windows(2).all(|w| w[1] <= w[0]);
    let final_ok = *deviations.last().unwrap() < threshold;
    let pass = monotone && final_ok && pair_failures.is_empty();
    TrendVerdict {
        statistic: statistic.into(),
        horizons,
        deviations,
        monotone,
        threshold,
        final_ok,
        pair_failures,
        excluded,
        pass,
    }
}

/// Variance of the space-time functional `∫_0^1 <X_T(t),φ> dt` at one horizon.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FunctionalReport {
    pub horizon: f64,
    pub variance: f64,
    pub se: f64,
    pub oracle: Option<f64>,
    /// `amplitude² <λ,φ>² ∫∫ cov`, which is `C² <λ,φ>² / 3` for α = 1.
    pub limit: f64,
}

impl FunctionalReport {
    pub fn deviation(&self) -> f64 {
        (self.variance - self.limit).abs() / self.limit
    }
}

/// Variance over replications of the h ≡ 1 functional, with bootstrap SE.
pub fn functional_variance(ensemble: &Ensemble<FluctuationPath>, resamples: usize, seed: u64) -> Result<(f64, f64)> {
    if ensemble.len() < MIN_REPLICATIONS {
        return Err(Error::TooFewReplications {
            got: ensemble.len(),
            need: MIN_REPLICATIONS,
        });
    }
    let rows: Vec<Vec<f64>> = ensemble.items.iter().map(|p| vec![spacetime_functional(p, |_| 1.0)]).collect();
    let var = covariance_matrix(&rows)[0][0];
    let se = bootstrap_covariance_se(&rows, resamples, &mut replication_rng(seed, BOOTSTRAP_STREAM))[0][0];
    Ok((var, se))
}

/// Trend of the functional variance toward its limit: nonincreasing
/// deviation and final deviation below `threshold`.
pub fn functional_trend_test(reports: &[FunctionalReport], threshold: f64) -> Result<TrendVerdict> {
    if reports.len() < 3 {
        return Err(crate::error::invalid("reports", format!("need >= 3 horizons, got {}", reports.len())));
    }
    Ok(trend(
        "space-time functional variance relative deviation",
        reports.iter().map(|r| r.horizon).collect(),
        reports.iter().map(FunctionalReport::deviation).collect(),
        threshold,
        Vec::new(),
        Vec::new(),
    ))
}

/// `∫_0^1 ∫_0^1 cov(s, t) ds dt`.
pub fn kernel_square_integral(kernel: &CovKernel) -> f64 {
    if kernel.family() == Family::Bm || kernel.h() == 0.5 {
        return 1.0 / 3.0;
    }
    // symmetric: twice the triangle s < t, mapped as s = t·r
    let gl = GaussLegendre::new(48);
    2.0 * gl.integrate(0.0, 1.0, |t| t * gl.integrate(0.0, 1.0, |r| kernel.cov(t * r, t)))
}

/// Oracle value of `Var ∫_0^1 <X_T(t),φ> dt` from a matrix on the path grid
/// `t_j = j/n_t`, `j = 1..=n_t`, with the trapezoid weights of
/// [`spacetime_functional`].
pub fn functional_variance_from_matrix(m: &[Vec<f64>]) -> f64 {
    let n = m.len();
    let h = 1.0 / n as f64;
    let w: Vec<f64> = (0..n).map(|i| if i + 1 == n { 0.5 * h } else { h }).collect();
    (0..n).map(|i| (0..n).map(|j| w[i] * w[j] * m[i][j]).sum::<f64>()).sum()
}

/// Everything computed at one horizon.
#[derive(Debug, Clone)]
pub struct HorizonRun {
    pub horizon: f64,
    pub seed: u64,
    pub ensemble: Ensemble<FluctuationPath>,
    pub report: CovReport,
    pub oracle: Option<OracleMatrix>,
    pub functional: FunctionalReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LimitVerdict {
    pub schema_version: u32,
    pub config_hash: String,
    pub regime: ScalingRegime,
    /// Gate of the run: the covariance trend for α ∈ (1,2), the space-time
    /// functional trend for α = 1.
    pub primary: TrendVerdict,
    /// Informational: covariance marginals for α = 1.
    pub secondary: Option<TrendVerdict>,
    pub pass: bool,
}

#[derive(Debug, Clone)]
pub struct LimitCheck {
    pub runs: Vec<HorizonRun>,
    pub verdict: LimitVerdict,
}

/// Simulate the ensemble at horizon index `index`.
pub fn simulate_horizon(config: &ExperimentConfig, index: usize) -> Result<(ModelParams, u64, Ensemble<FluctuationPath>)> {
    let horizon = config.horizons[index];
    let params = config.model_params(horizon)?;
    let seed = config.horizon_seed(index);
    let regime = config.regime()?;
    let ens = run_ensemble(
        &params,
        &config.phi,
        &regime,
        config.n_t,
        config.replications,
        seed,
        config.workers,
        &config.evolve_options(),
    )?;
    Ok((params, seed, ens))
}

/// Oracle matrix on the config's scaled-time grid at horizon `T`.
pub fn oracle_matrix(config: &ExperimentConfig, horizon: f64) -> Result<OracleMatrix> {
    let params = config.model_params(horizon)?;
    exact_cov_xt_matrix(&config.phi, &params, &config.regime()?, &config.time_grid(), QuadratureSpec::default())
}

/// Full pipeline over the horizon list.
pub fn limit_check(config: &ExperimentConfig) -> Result<LimitCheck> {
    config.validate_for_limit()?;
    let regime = config.regime()?;
    let limit = config.limit()?;
    let hash = config.content_hash();
    let phi_mass = config.phi.integral();
    let mut runs = Vec::with_capacity(config.horizons.len());
    for (i, &horizon) in config.horizons.iter().enumerate() {
        let (_, seed, ensemble) = simulate_horizon(config, i)?;
        let est = estimate_cov(&ensemble, config.bootstrap_resamples, seed)?;
        let oracle = if config.oracle { Some(oracle_matrix(config, horizon)?) } else { None };
        let report = CovReport::build(
            &est,
            horizon,
            ensemble.aborted.clone(),
            seed,
            config.bootstrap_resamples,
            phi_mass,
            limit,
            oracle.as_ref(),
            hash.clone(),
        )?;
        let (variance, se) = functional_variance(&ensemble, config.bootstrap_resamples, seed)?;
        let functional = FunctionalReport {
            horizon,
            variance,
            se,
            oracle: oracle.as_ref().map(|o| functional_variance_from_matrix(&o.values)),
            limit: (limit.amplitude * phi_mass).powi(2) * kernel_square_integral(&limit.kernel()),
        };
        runs.push(HorizonRun {
            horizon,
            seed,
            ensemble,
            report,
            oracle,
            functional,
        });
    }
    let reports: Vec<CovReport> = runs.iter().map(|r| r.report.clone()).collect();
    let cov_verdict = limit_trend_test(&reports, &config.thresholds)?;
    let (primary, secondary) = match regime {
        ScalingRegime::SupercriticalAlpha { .. } => (cov_verdict, None),
        ScalingRegime::LogCase => {
            let f: Vec<FunctionalReport> = runs.iter().map(|r| r.functional.clone()).collect();
            (functional_trend_test(&f, config.thresholds.final_deviation_log)?, Some(cov_verdict))
        }
    };
    let pass = primary.pass;
    Ok(LimitCheck {
        runs,
        verdict: LimitVerdict {
            schema_version: SCHEMA_VERSION,
            config_hash: hash,
            regime,
            primary,
            secondary,
            pass,
        },
    })
}

/// Sub-directory for horizon `T`.
pub fn horizon_dir(out: &Path, horizon: f64) -> PathBuf {
    out.join(format!("T{horizon}"))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleMeta {
    pub schema_version: u32,
    pub horizon: f64,
    pub seed: u64,
    pub replications: usize,
    pub aborted: Vec<u64>,
    pub n_t: usize,
    pub params: ModelParams,
    pub config: Value,
    pub config_hash: String,
}

pub fn parse_ensemble_meta(text: &str) -> Result<EnsembleMeta> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| config_err(format!("ensemble.json: {}", e.path()), e.into_inner().to_string()))
}

/// `ensemble.csv` plus its `ensemble.json` sidecar.
pub fn write_ensemble(
    dir: &Path,
    config: &ExperimentConfig,
    params: &ModelParams,
    seed: u64,
    ensemble: &Ensemble<FluctuationPath>,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    ensemble.write_csv(&dir.join("ensemble.csv"))?;
    write_json(
        &dir.join("ensemble.json"),
        &EnsembleMeta {
            schema_version: SCHEMA_VERSION,
            horizon: params.horizon,
            seed,
            replications: config.replications,
            aborted: ensemble.aborted.clone(),
            n_t: config.n_t,
            params: params.clone(),
            config: config.canonical(),
            config_hash: config.content_hash(),
        },
    )
}

/// Read an `ensemble.csv` written by [`write_ensemble`].
pub fn read_ensemble_csv(path: &Path) -> Result<Ensemble<FluctuationPath>> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    if lines.next() != Some("rep,t,value") {
        return Err(config_err(path.display().to_string(), "missing `rep,t,value` header"));
    }
    let mut by_rep: BTreeMap<u64, FluctuationPath> = BTreeMap::new();
    for (no, line) in lines.enumerate() {
        let bad = || config_err(format!("{}:{}", path.display(), no + 2), "malformed row");
        let mut it = line.split(',');
        let rep: u64 = it.next().and_then(|v| v.parse().ok()).ok_or_else(bad)?;
        let t: f64 = it.next().and_then(|v| v.parse().ok()).ok_or_else(bad)?;
        let v: f64 = it.next().and_then(|v| v.parse().ok()).ok_or_else(bad)?;
        let p = by_rep.entry(rep).or_insert_with(|| FluctuationPath { t: Vec::new(), values: Vec::new() });
        p.t.push(t);
        p.values.push(v);
    }
    let reps: Vec<u64> = by_rep.keys().copied().collect();
    let items: Vec<FluctuationPath> = by_rep.into_values().collect();
    if items.windows(2).any(|w| w[0].t != w[1].t) {
        return Err(config_err(path.display().to_string(), "replications use different time grids"));
    }
    Ok(Ensemble {
        reps,
        items,
        aborted: Vec::new(),
    })
}

/// `s,t,value` rows of a symmetric matrix on `grid`.
pub fn write_matrix_csv(path: &Path, grid: &[f64], m: &[Vec<f64>]) -> Result<()> {
    let mut w = std::io::BufWriter::new(fs::File::create(path)?);
    writeln!(w, "s,t,value")?;
    for (i, s) in grid.iter().enumerate() {
        for (j, t) in grid.iter().enumerate() {
            writeln!(w, "{s},{t},{}", m[i][j])?;
        }
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct OracleMeta<'a> {
    schema_version: u32,
    horizon: f64,
    params: &'a ModelParams,
    node_counts: BTreeMap<&'static str, f64>,
    max_rel_change: f64,
    config_hash: String,
}

/// `oracle.csv` and `oracle.json` for one horizon.
pub fn write_oracle(dir: &Path, config: &ExperimentConfig, horizon: f64, m: &OracleMatrix) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_matrix_csv(&dir.join("oracle.csv"), &m.grid, &m.values)?;
    let q = QuadratureSpec::default();
    let node_counts = BTreeMap::from([
        ("sigma_nodes_per_unit", q.sigma_nodes as f64),
        ("tau_panels_per_decade", q.tau_panels_per_decade as f64),
        ("tau_nodes_per_panel", q.tau_nodes_per_panel as f64),
        ("table_points_per_decade", q.table_points_per_decade as f64),
        ("spectral_panels_per_decade", q.spectral.panels_per_decade as f64),
        ("spectral_nodes_per_panel", q.spectral.nodes_per_panel as f64),
        ("spectral_high_panel_width", q.spectral.high_panel_width),
    ]);
    write_json(
        &dir.join("oracle.json"),
        &OracleMeta {
            schema_version: SCHEMA_VERSION,
            horizon,
            params: &config.model_params(horizon)?,
            node_counts,
            max_rel_change: m.max_rel_change,
            config_hash: config.content_hash(),
        },
    )
}

pub fn write_cov_report(dir: &Path, report: &CovReport) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_json(&dir.join("cov_report.json"), report)?;
    report.write_csv(&dir.join("cov_report.csv"))
}

/// All limit-check outputs under `out`.
pub fn write_limit_check(out: &Path, config: &ExperimentConfig, check: &LimitCheck) -> Result<()> {
    fs::create_dir_all(out)?;
    for run in &check.runs {
        let dir = horizon_dir(out, run.horizon);
        let params = config.model_params(run.horizon)?;
        write_ensemble(&dir, config, &params, run.seed, &run.ensemble)?;
        write_cov_report(&dir, &run.report)?;
        if let Some(o) = &run.oracle {
            write_oracle(&dir, config, run.horizon, o)?;
        }
    }
    write_json(&out.join("verdict.json"), &check.verdict)?;
    let mut w = std::io::BufWriter::new(fs::File::create(out.join("deviation_vs_T.csv"))?);
    writeln!(
        w,
        "T,median_cov_deviation,functional_variance,functional_se,functional_oracle,functional_limit,functional_deviation"
    )?;
    let reports: Vec<CovReport> = check.runs.iter().map(|r| r.report.clone()).collect();
    let cov_trend = limit_trend_test(&reports, &config.thresholds)?;
    for (run, dev) in check.runs.iter().zip(&cov_trend.deviations) {
        let f = &run.functional;
        let oracle = f.oracle.map_or(String::new(), |v| v.to_string());
        writeln!(
            w,
            "{},{},{},{},{},{},{}",
            run.horizon,
            dev,
            f.variance,
            f.se,
            oracle,
            f.limit,
            f.deviation()
        )?;
    }
    w.flush()?;
    Ok(())
}
