//! Noise-free finite-T moments of the particle system.
//!
//! With Poisson initial condition and critical branching,
//!
//! ```text
//! Cov(<N(s),φ>, <N(t),φ>) = ∫ φ L_{t-s}φ dx + 2γ ∫ σ(x) ∫_0^s L_τφ(x) L_{τ+t-s}φ(x) dτ dx
//! ```
//!
//! for `s <= t`. Integrating twice in time and exchanging the order of
//! integration gives, with `A = Ts`, `B = Tt`,
//!
//! ```text
//! F_T² Cov(<X_T(s),φ>, <X_T(t),φ>) = 2γ ∫ σ(x) ∫_0^A G_τφ(x) G_{τ+B-A}φ(x) dτ dx
//!                                   + K(A) + K(B) - K(B - A)
//! ```
//!
//! where `G_τφ = ∫_0^τ L_uφ du` and `K(a) = ∫_0^a (a - τ) ∫ φ L_τφ dx dτ`.
//! `L`, `G` and `K` come from the Fourier representation in
//! [`SpectralSemigroup`]; `G` is tabulated per σ-node on a log-τ grid.

use serde::{Deserialize, Serialize};

use crate::branching::{ModelParams, SigmaProfile};
use crate::error::{invalid, Error, Result};
use crate::occupation::ScalingRegime;
use crate::quad::{geometric_edges, trapezoid_uniform, GaussLegendre};
use crate::stable::{semigroup_apply, PointKernel, SpatialGrid, SpectralSemigroup, SpectralSpec, MASS_LEAK_TOL};
use crate::testfn::TestFunction;

/// Node counts for the oracle quadratures.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuadratureSpec {
    pub spectral: SpectralSpec,
    /// Gauss–Legendre nodes per unit length of σ's support.
    pub sigma_nodes: usize,
    pub tau_panels_per_decade: usize,
    pub tau_nodes_per_panel: usize,
    /// Density of the `G_τ` table in `ln τ`.
    pub table_points_per_decade: usize,
    /// Spatial step for grid-based self-checks.
    pub grid_step: f64,
}

impl Default for QuadratureSpec {
    fn default() -> Self {
        Self {
            spectral: SpectralSpec::default(),
            sigma_nodes: 12,
            tau_panels_per_decade: 4,
            tau_nodes_per_panel: 8,
            table_points_per_decade: 32,
            grid_step: 0.25,
        }
    }
}

impl QuadratureSpec {
    /// Every node count doubled.
    pub fn refined(&self) -> Self {
        Self {
            spectral: self.spectral.refined(),
            sigma_nodes: 2 * self.sigma_nodes,
            tau_panels_per_decade: 2 * self.tau_panels_per_decade,
            tau_nodes_per_panel: 2 * self.tau_nodes_per_panel,
            table_points_per_decade: 2 * self.table_points_per_decade,
            grid_step: 0.5 * self.grid_step,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.sigma_nodes < 8 || self.tau_nodes_per_panel < 8 || self.table_points_per_decade < 8 {
            return Err(invalid("quadrature", "node counts must be >= 8"));
        }
        if self.tau_panels_per_decade == 0 {
            return Err(invalid("quadrature", "need >= 1 τ panel per decade"));
        }
        if !(self.grid_step > 0.0) {
            return Err(invalid("quadrature", "grid step must be > 0"));
        }
        Ok(())
    }
}

/// Relative change allowed between `cov_N` at a spec and its refinement.
pub const COV_N_TOL: f64 = 1e-4;
/// Relative change allowed between `exact_cov_xt` at a spec and its refinement.
pub const COV_XT_TOL: f64 = 1e-3;

/// Smallest tabulated τ; below it `G_τ` is evaluated directly.
const TABLE_TAU_MIN: f64 = 1e-3;

/// `G_τφ(x)` at one `x`, cubic Hermite in `u = ln τ` with `dG/du = τ L_τφ(x)`.
#[derive(Debug, Clone)]
pub struct GTable {
    kernel: PointKernel,
    ln_min: f64,
    h: f64,
    g: Vec<f64>,
    dg: Vec<f64>,
}

impl GTable {
    fn build(kernel: PointKernel, tau_max: f64, per_decade: usize) -> Self {
        let ln_min = TABLE_TAU_MIN.ln();
        let span = (tau_max.max(TABLE_TAU_MIN * 10.0)).ln() - ln_min;
        let n = ((span / std::f64::consts::LN_10 * per_decade as f64).ceil() as usize).max(2);
        let h = span / n as f64;
        let (g, dg) = (0..=n)
            .map(|i| {
                let tau = (ln_min + i as f64 * h).exp();
                (kernel.integrated(tau), tau * kernel.semigroup(tau))
            })
            .unzip();
        Self { kernel, ln_min, h, g, dg }
    }

    pub fn eval(&self, tau: f64) -> f64 {
        if tau <= 0.0 {
            return 0.0;
        }
        if tau < TABLE_TAU_MIN {
            return self.kernel.integrated(tau);
        }
        let u = (tau.ln() - self.ln_min) / self.h;
        let last = self.g.len() - 2;
        let i = (u.floor() as usize).min(last);
        let r = u - i as f64;
        let (r2, r3) = (r * r, r * r * r);
        let h00 = 2.0 * r3 - 3.0 * r2 + 1.0;
        let h10 = r3 - 2.0 * r2 + r;
        let h01 = -2.0 * r3 + 3.0 * r2;
        let h11 = r3 - r2;
        h00 * self.g[i] + h10 * self.h * self.dg[i] + h01 * self.g[i + 1] + h11 * self.h * self.dg[i + 1]
    }
}

/// Gauss–Legendre nodes `x` and weights `w σ(x)` over σ's support.
pub fn sigma_nodes(sigma: &SigmaProfile, per_unit: usize) -> Vec<(f64, f64)> {
    let (lo, hi, panel) = match *sigma {
        SigmaProfile::Zero => return Vec::new(),
        SigmaProfile::ConstantOnInterval { left, right, .. } => (left, right, 1.0),
        SigmaProfile::GaussianProfile { center, width, .. } => (center - 9.0 * width, center + 9.0 * width, width.min(1.0)),
    };
    let panels = ((hi - lo) / panel).ceil().max(1.0) as usize;
    let edges: Vec<f64> = (0..=panels).map(|i| lo + (hi - lo) * i as f64 / panels as f64).collect();
    let nodes = ((per_unit as f64 * panel).ceil() as usize).max(8);
    let (xs, ws) = GaussLegendre::new(nodes).composite(&edges);
    xs.into_iter().zip(ws).map(|(x, w)| (x, w * sigma.eval(x))).collect()
}

/// Quadrature nodes on `[0, a]`, geometric towards 0.
fn tau_nodes(a: f64, spec: &QuadratureSpec, gl: &GaussLegendre) -> (Vec<f64>, Vec<f64>) {
    let lo = (1e-2_f64).min(a / 100.0);
    gl.composite(&geometric_edges(lo, a, spec.tau_panels_per_decade))
}

/// Moment formulas for one (φ, model, quadrature spec).
#[derive(Debug, Clone)]
pub struct MomentOracle {
    gamma: f64,
    spec: QuadratureSpec,
    semigroup: SpectralSemigroup,
    nodes: Vec<(f64, f64)>,
    kernels: Vec<PointKernel>,
    gl: GaussLegendre,
}

impl MomentOracle {
    pub fn new(phi: &TestFunction, params: &ModelParams, spec: QuadratureSpec) -> Result<Self> {
        spec.validate()?;
        phi.validate()?;
        params.sigma.validate()?;
        if !(params.gamma >= 0.0) {
            return Err(invalid("gamma", "must be >= 0"));
        }
        let semigroup = SpectralSemigroup::new(params.alpha, phi, spec.spectral)?;
        let nodes = sigma_nodes(&params.sigma, spec.sigma_nodes);
        let kernels = nodes.iter().map(|&(x, _)| semigroup.at(x)).collect();
        Ok(Self {
            gamma: params.gamma,
            spec,
            semigroup,
            nodes,
            kernels,
            gl: GaussLegendre::new(spec.tau_nodes_per_panel),
        })
    }

    pub fn spec(&self) -> &QuadratureSpec {
        &self.spec
    }

    /// `∫ φ L_τ φ dx`.
    pub fn overlap(&self, tau: f64) -> f64 {
        self.semigroup.self_overlap(tau)
    }

    /// The two terms of `cov_N(s, t)`: `(overlap, branching)`.
    pub fn cov_n_terms(&self, s: f64, t: f64) -> (f64, f64) {
        let (s, t) = if s <= t { (s, t) } else { (t, s) };
        let d = t - s;
        let free = self.overlap(d);
        if s <= 0.0 || self.gamma == 0.0 || self.nodes.is_empty() {
            return (free, 0.0);
        }
        let (taus, ws) = tau_nodes(s, &self.spec, &self.gl);
        let mut br = 0.0;
        for (&(_, wx), k) in self.nodes.iter().zip(&self.kernels) {
            let inner: f64 = taus.iter().zip(&ws).map(|(&tau, &w)| w * k.semigroup(tau) * k.semigroup(tau + d)).sum();
            br += wx * inner;
        }
        (free, 2.0 * self.gamma * br)
    }

    pub fn cov_n(&self, s: f64, t: f64) -> f64 {
        let (a, b) = self.cov_n_terms(s, t);
        a + b
    }

    /// `G_τ` tables for τ up to `tau_max`, one per σ-node.
    pub fn tables(&self, tau_max: f64) -> Vec<GTable> {
        self.kernels
            .iter()
            .map(|k| GTable::build(k.clone(), tau_max, self.spec.table_points_per_decade))
            .collect()
    }

    /// `F_T² Cov(<X_T(s),φ>, <X_T(t),φ>)` split into `(overlap, branching)`,
    /// `tables` covering τ up to `T max(s, t)`.
    pub fn unnormed_cov_xt_terms(&self, tables: &[GTable], horizon: f64, s: f64, t: f64) -> (f64, f64) {
        let (s, t) = if s <= t { (s, t) } else { (t, s) };
        if s <= 0.0 {
            return (0.0, 0.0);
        }
        let (a, b) = (horizon * s, horizon * t);
        let k2 = |x: f64| self.semigroup.self_overlap_double_integral(x);
        let free = k2(a) + k2(b) - k2(horizon * (t - s));
        if self.gamma == 0.0 || self.nodes.is_empty() {
            return (free, 0.0);
        }
        let gap = b - a;
        let (taus, ws) = tau_nodes(a, &self.spec, &self.gl);
        let mut br = 0.0;
        for (&(_, wx), g) in self.nodes.iter().zip(tables) {
            let inner: f64 = taus.iter().zip(&ws).map(|(&tau, &w)| w * g.eval(tau) * g.eval(tau + gap)).sum();
            br += wx * inner;
        }
        (free, 2.0 * self.gamma * br)
    }
}

/// Covariance matrix together with its refined reference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleMatrix {
    pub grid: Vec<f64>,
    pub values: Vec<Vec<f64>>,
    pub reference: Vec<Vec<f64>>,
    /// Largest `|value - reference| / |reference|` over entries above the
    /// matrix-scale floor.
    pub max_rel_change: f64,
}

fn check_regime(params: &ModelParams, regime: &ScalingRegime) -> Result<()> {
    if regime.alpha() != params.alpha {
        return Err(invalid("regime", format!("regime α = {} but model α = {}", regime.alpha(), params.alpha)));
    }
    Ok(())
}

fn rel_change(values: &[Vec<f64>], reference: &[Vec<f64>]) -> f64 {
    let scale = reference.iter().flatten().fold(0.0_f64, |m, v| m.max(v.abs()));
    let floor = 1e-9 * scale;
    values
        .iter()
        .flatten()
        .zip(reference.iter().flatten())
        .filter(|(_, r)| r.abs() > floor)
        .map(|(v, r)| (v - r).abs() / r.abs())
        .fold(0.0, f64::max)
}

fn xt_matrix(oracle: &MomentOracle, horizon: f64, f2: f64, grid: &[f64]) -> Vec<Vec<f64>> {
    let tmax = grid.iter().fold(0.0_f64, |m, &t| m.max(t));
    let tables = oracle.tables(horizon * tmax);
    let n = grid.len();
    let mut m = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i..n {
            let (a, b) = oracle.unnormed_cov_xt_terms(&tables, horizon, grid[i], grid[j]);
            m[i][j] = (a + b) / f2;
            m[j][i] = m[i][j];
        }
    }
    m
}

/// `Cov(<X_T(s),φ>, <X_T(t),φ>)` over `grid × grid`, checked against the
/// refined quadrature at relative tolerance [`COV_XT_TOL`].
pub fn exact_cov_xt_matrix(
    phi: &TestFunction,
    params: &ModelParams,
    regime: &ScalingRegime,
    grid: &[f64],
    spec: QuadratureSpec,
) -> Result<OracleMatrix> {
    check_regime(params, regime)?;
    if grid.iter().any(|&t| !(0.0..=1.0).contains(&t)) {
        return Err(invalid("grid", "scaled times must lie in [0, 1]"));
    }
    let f2 = regime.norming_sq(params.horizon)?;
    let values = xt_matrix(&MomentOracle::new(phi, params, spec)?, params.horizon, f2, grid);
    let reference = xt_matrix(&MomentOracle::new(phi, params, spec.refined())?, params.horizon, f2, grid);
    let change = rel_change(&values, &reference);
    if !(change <= COV_XT_TOL) {
        return Err(Error::NonConvergence {
            what: "exact_cov_xt".into(),
            change,
            tolerance: COV_XT_TOL,
        });
    }
    Ok(OracleMatrix {
        grid: grid.to_vec(),
        values,
        reference,
        max_rel_change: change,
    })
}

/// `Cov(<X_T(s),φ>, <X_T(t),φ>)` at default quadrature, refinement-checked.
pub fn exact_cov_xt(phi: &TestFunction, params: &ModelParams, regime: &ScalingRegime, s: f64, t: f64) -> Result<f64> {
    if s == 0.0 || t == 0.0 {
        check_regime(params, regime)?;
        return Ok(0.0);
    }
    let m = exact_cov_xt_matrix(phi, params, regime, &[s, t], QuadratureSpec::default())?;
    Ok(m.values[0][1])
}

/// `Cov(<N(s),φ>, <N(t),φ>)`, refinement-checked at [`COV_N_TOL`].
pub fn cov_n(phi: &TestFunction, params: &ModelParams, s: f64, t: f64) -> Result<f64> {
    cov_n_with(phi, params, s, t, QuadratureSpec::default())
}

pub fn cov_n_with(phi: &TestFunction, params: &ModelParams, s: f64, t: f64, spec: QuadratureSpec) -> Result<f64> {
    if !(s >= 0.0 && t >= 0.0) {
        return Err(invalid("s,t", "times must be >= 0"));
    }
    let v = MomentOracle::new(phi, params, spec)?.cov_n(s, t);
    let r = MomentOracle::new(phi, params, spec.refined())?.cov_n(s, t);
    let change = (v - r).abs() / r.abs();
    if !(change <= COV_N_TOL) {
        return Err(Error::NonConvergence {
            what: "cov_n".into(),
            change,
            tolerance: COV_N_TOL,
        });
    }
    Ok(v)
}

/// Relative agreement demanded of the semigroup mass self-check.
pub const MEAN_SELF_CHECK_TOL: f64 = 1e-5;

/// `E<N(t), φ> = ∫ φ`. With `self_check`, also integrates `L_t φ` on a
/// spatial grid and fails if the two disagree beyond [`MEAN_SELF_CHECK_TOL`].
pub fn mean_n(phi: &TestFunction, params: &ModelParams, t: f64, self_check: bool) -> Result<f64> {
    if !(t >= 0.0) {
        return Err(invalid("t", "must be >= 0"));
    }
    let analytic = phi.integral();
    if self_check {
        let step = QuadratureSpec::default().grid_step.min(phi.min_width() / 2.0);
        let grid = SpatialGrid::for_semigroup(params.alpha, t, phi, step, MASS_LEAK_TOL)?;
        let numeric = trapezoid_uniform(&semigroup_apply(params.alpha, t, phi, &grid)?, grid.step);
        if !((numeric - analytic).abs() <= MEAN_SELF_CHECK_TOL * analytic.abs()) {
            return Err(Error::SelfCheck { numeric, analytic });
        }
    }
    Ok(analytic)
}
