//! Occupation records to normalized fluctuation paths `<X_T(t), φ>` and
//! replication ensembles.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::branching::{evolve_with_stats, EvolveOptions, ModelParams, OccupationRecord};
use crate::error::{invalid, Error, Result};
use crate::parallel::map_replications;
use crate::rng::replication_rng;
use crate::testfn::TestFunction;

/// Norming regime for `F_T`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "regime", rename_all = "kebab-case")]
pub enum ScalingRegime {
    /// α ∈ (1, 2): `F_T² = T^{3-2/α}`.
    SupercriticalAlpha { alpha: f64 },
    /// α = 1: `F_T² = T (ln T)²`.
    LogCase,
}

impl ScalingRegime {
    pub fn for_alpha(alpha: f64) -> Result<Self> {
        if alpha == 1.0 {
            Ok(Self::LogCase)
        } else if alpha > 1.0 && alpha < 2.0 {
            Ok(Self::SupercriticalAlpha { alpha })
        } else {
            Err(invalid("alpha", format!("no scaling regime for α = {alpha}")))
        }
    }

    pub fn alpha(&self) -> f64 {
        match *self {
            Self::SupercriticalAlpha { alpha } => alpha,
            Self::LogCase => 1.0,
        }
    }

    pub fn norming_sq(&self, horizon: f64) -> Result<f64> {
        let f2 = match *self {
            Self::SupercriticalAlpha { alpha } => horizon.powf(3.0 - 2.0 / alpha),
            Self::LogCase => horizon * horizon.ln().powi(2),
        };
        if !(f2 > 0.0 && f2.is_finite()) {
            return Err(invalid("horizon", format!("F_T² = {f2} at T = {horizon}")));
        }
        Ok(f2)
    }

    pub fn norming(&self, horizon: f64) -> Result<f64> {
        self.norming_sq(horizon).map(f64::sqrt)
    }
}

/// `<X_T(t_j), φ>` on `t_j = j / n_t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FluctuationPath {
    pub t: Vec<f64>,
    pub values: Vec<f64>,
}

impl FluctuationPath {
    pub fn n_t(&self) -> usize {
        self.t.len() - 1
    }
}

/// Record steps per scaled-time step, if the grids line up.
pub fn grid_stride(horizon: f64, step: f64, n_t: usize) -> Result<usize> {
    if n_t == 0 {
        return Err(invalid("n_t", "must be >= 1"));
    }
    let ratio = horizon / (n_t as f64 * step);
    let stride = ratio.round();
    if stride < 1.0 || (ratio - stride).abs() > 1e-9 * ratio {
        return Err(Error::GridMismatch(format!(
            "record step {step} does not divide T/n_t = {}",
            horizon / n_t as f64
        )));
    }
    Ok(stride as usize)
}

/// `(1/F_T) ∫_0^{T t_j} (v(s) - ∫φ) ds` by the trapezoid rule on the record grid.
pub fn fluctuation_path(
    record: &OccupationRecord,
    params: &ModelParams,
    phi: &TestFunction,
    regime: &ScalingRegime,
    n_t: usize,
) -> Result<FluctuationPath> {
    if record.step != params.occupation_step || record.values.len() != params.steps() + 1 {
        return Err(Error::GridMismatch(format!(
            "record has {} values at step {}, params expect {} at step {}",
            record.values.len(),
            record.step,
            params.steps() + 1,
            params.occupation_step
        )));
    }
    let stride = grid_stride(params.horizon, params.occupation_step, n_t)?;
    let f_t = regime.norming(params.horizon)?;
    let mass = phi.integral();
    let half = 0.5 * record.step;
    let mut values = Vec::with_capacity(n_t + 1);
    values.push(0.0);
    let mut acc = 0.0;
    for (k, w) in record.values.windows(2).enumerate() {
        acc += half * ((w[0] - mass) + (w[1] - mass));
        if (k + 1) % stride == 0 {
            values.push(acc / f_t);
        }
    }
    let t = (0..=n_t).map(|j| j as f64 / n_t as f64).collect();
    Ok(FluctuationPath { t, values })
}

/// Trapezoid of `h(t) <X_T(t), φ>` over `[0, 1]`.
pub fn spacetime_functional(path: &FluctuationPath, h: impl Fn(f64) -> f64) -> f64 {
    path.t
        .windows(2)
        .zip(path.values.windows(2))
        .map(|(t, v)| 0.5 * (t[1] - t[0]) * (h(t[0]) * v[0] + h(t[1]) * v[1]))
        .sum()
}

/// Replications that completed, indexed by replication id, plus the ids
/// aborted by the explosion guard.
#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble<T> {
    pub reps: Vec<u64>,
    pub items: Vec<T>,
    pub aborted: Vec<u64>,
}

impl<T> Ensemble<T> {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

impl Ensemble<FluctuationPath> {
    /// CSV with header `rep,t,value`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(w, "rep,t,value")?;
        for (rep, p) in self.reps.iter().zip(&self.items) {
            for (t, v) in p.t.iter().zip(&p.values) {
                writeln!(w, "{rep},{t},{v}")?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// `values[rep][j]` as a matrix.
    pub fn value_matrix(&self) -> Vec<Vec<f64>> {
        self.items.iter().map(|p| p.values.clone()).collect()
    }
}

/// Run `n_reps` replications of [`evolve_with_stats`] with per-replication
/// streams derived from `master_seed`.
pub fn run_records(
    params: &ModelParams,
    phi: &TestFunction,
    n_reps: usize,
    master_seed: u64,
    workers: usize,
    options: &EvolveOptions,
) -> Result<Ensemble<OccupationRecord>> {
    params.validate(phi)?;
    let results = map_replications(n_reps, workers, |rep| {
        let mut rng = replication_rng(master_seed, rep);
        evolve_with_stats(params, phi, options, rep, &mut rng).map(|(r, _)| r)
    })?;
    collect(results)
}

/// Ensemble of fluctuation paths; explosion aborts are counted, other
/// errors propagate.
#[allow(clippy::too_many_arguments)]
pub fn run_ensemble(
    params: &ModelParams,
    phi: &TestFunction,
    regime: &ScalingRegime,
    n_t: usize,
    n_reps: usize,
    master_seed: u64,
    workers: usize,
    options: &EvolveOptions,
) -> Result<Ensemble<FluctuationPath>> {
    if n_reps < 2 {
        return Err(invalid("n_reps", format!("{n_reps} < 2")));
    }
    params.validate(phi)?;
    grid_stride(params.horizon, params.occupation_step, n_t)?;
    regime.norming(params.horizon)?;
    let results = map_replications(n_reps, workers, |rep| {
        let mut rng = replication_rng(master_seed, rep);
        evolve_with_stats(params, phi, options, rep, &mut rng)
            .and_then(|(r, _)| fluctuation_path(&r, params, phi, regime, n_t))
    })?;
    collect(results)
}

fn collect<T>(results: Vec<Result<T>>) -> Result<Ensemble<T>> {
    let mut out = Ensemble {
        reps: Vec::with_capacity(results.len()),
        items: Vec::with_capacity(results.len()),
        aborted: Vec::new(),
    };
    for (rep, r) in results.into_iter().enumerate() {
        match r {
            Ok(item) => {
                out.reps.push(rep as u64);
                out.items.push(item);
            }
            Err(Error::Explosion { rep, .. }) => out.aborted.push(rep),
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}
