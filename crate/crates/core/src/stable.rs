//! Symmetric α-stable motion: exact increments, transition density, and the
//! semigroup `L_t f = p_t * f`.
//!
//! Normalization: the motion has characteristic function `exp(-t |z|^α)`,
//! so `p_t(x) = t^{-1/α} p_1(x t^{-1/α})` and α = 2 is Brownian motion with
//! variance `2t`.

use std::collections::HashMap;
use std::f64::consts::{FRAC_PI_2, PI};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::{Arc, Mutex, OnceLock};

use rand::Rng;
use rustfft::{num_complex::Complex, FftPlanner};
use statrs::function::erf::erfc;
use statrs::function::gamma::{gamma, ln_gamma};

use crate::error::{invalid, Error, Result};
use crate::quad::{geometric_edges, GaussLegendre};
use crate::testfn::TestFunction;

/// Stability index, validated to lie in `(0, 2]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StableParams {
    alpha: f64,
}

impl StableParams {
    pub fn new(alpha: f64) -> Result<Self> {
        if alpha > 0.0 && alpha <= 2.0 {
            Ok(Self { alpha })
        } else {
            Err(invalid("alpha", format!("{alpha} is outside (0, 2]")))
        }
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }
}

// ---------------------------------------------------------------------------
// Sampling
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
enum SamplerKind {
    Cauchy,
    Gaussian,
    General,
}

/// Chambers–Mallows–Stuck sampler for the symmetric law with
/// characteristic function `exp(-|z|^α)`. Construct once, sample many times.
#[derive(Debug, Clone, Copy)]
pub struct StableSampler {
    alpha: f64,
    inv_alpha: f64,
    tail_exp: f64,
    kind: SamplerKind,
}

impl StableSampler {
    pub fn new(alpha: f64) -> Result<Self> {
        let alpha = StableParams::new(alpha)?.alpha();
        let kind = if alpha == 1.0 {
            SamplerKind::Cauchy
        } else if alpha == 2.0 {
            SamplerKind::Gaussian
        } else {
            SamplerKind::General
        };
        Ok(Self {
            alpha,
            inv_alpha: 1.0 / alpha,
            tail_exp: (1.0 - alpha) / alpha,
            kind,
        })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    /// One draw of `S` with `E exp(izS) = exp(-|z|^α)`.
    #[inline]
    pub fn sample_unit<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        // V uniform on (-π/2, π/2), W standard exponential.
        let v = PI * (rng.gen::<f64>() - 0.5);
        match self.kind {
            SamplerKind::Cauchy => v.tan(),
            SamplerKind::Gaussian => {
                let w = -(1.0 - rng.gen::<f64>()).ln();
                2.0 * v.sin() * w.sqrt()
            }
            SamplerKind::General => {
                let w = -(1.0 - rng.gen::<f64>()).ln();
                let a = self.alpha;
                let cv = v.cos();
                let log_mag = -self.inv_alpha * cv.ln() + self.tail_exp * (((1.0 - a) * v).cos().ln() - w.ln());
                (a * v).sin() * log_mag.exp()
            }
        }
    }

    /// Displacement over a span `dt > 0`: `dt^{1/α} S`.
    #[inline]
    pub fn sample<R: Rng + ?Sized>(&self, dt: f64, rng: &mut R) -> f64 {
        self.scale(dt) * self.sample_unit(rng)
    }

    /// `dt^{1/α}`.
    #[inline]
    pub fn scale(&self, dt: f64) -> f64 {
        match self.kind {
            SamplerKind::Cauchy => dt,
            SamplerKind::Gaussian => dt.sqrt(),
            SamplerKind::General => dt.powf(self.inv_alpha),
        }
    }
}

/// Exact displacement of the motion over a span `dt`.
pub fn sample_increment<R: Rng + ?Sized>(alpha: f64, dt: f64, rng: &mut R) -> Result<f64> {
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(invalid("dt", format!("{dt} must be > 0")));
    }
    Ok(StableSampler::new(alpha)?.sample(dt, rng))
}

// ---------------------------------------------------------------------------
// Density and CDF
// ---------------------------------------------------------------------------

/// `p_1(0) = Γ(1/α) / (α π)`.
pub fn density_at_zero(alpha: f64) -> Result<f64> {
    let alpha = StableParams::new(alpha)?.alpha();
    Ok(gamma(1.0 / alpha) / (alpha * PI))
}

/// Transition density `p_t(x)`.
pub fn density(alpha: f64, t: f64, x: f64) -> Result<f64> {
    let alpha = StableParams::new(alpha)?.alpha();
    if !(t > 0.0) {
        return Err(invalid("t", format!("{t} must be > 0")));
    }
    let scale = t.powf(1.0 / alpha);
    Ok(unit_density(alpha, x / scale)? / scale)
}

/// Distribution function `P(X_t <= x)` of the motion started at 0.
pub fn cdf(alpha: f64, t: f64, x: f64) -> Result<f64> {
    let alpha = StableParams::new(alpha)?.alpha();
    if !(t > 0.0) {
        return Err(invalid("t", format!("{t} must be > 0")));
    }
    unit_cdf(alpha, x / t.powf(1.0 / alpha))
}

/// `P(|X_t| > r)`.
pub fn two_sided_tail(alpha: f64, t: f64, r: f64) -> Result<f64> {
    if r <= 0.0 {
        return Ok(1.0);
    }
    let alpha = StableParams::new(alpha)?.alpha();
    let y = r / t.powf(1.0 / alpha);
    Ok(2.0 * unit_upper_tail(alpha, y)?)
}

fn unit_density(alpha: f64, x: f64) -> Result<f64> {
    if alpha == 1.0 {
        return Ok(1.0 / (PI * (1.0 + x * x)));
    }
    if alpha == 2.0 {
        return Ok((-0.25 * x * x).exp() / (2.0 * PI.sqrt()));
    }
    Ok(density_table(alpha)?.density(x))
}

fn unit_cdf(alpha: f64, x: f64) -> Result<f64> {
    if x < 0.0 {
        return unit_upper_tail(alpha, -x);
    }
    Ok(1.0 - unit_upper_tail(alpha, x)?)
}

/// `P(S > y)` for `y >= 0`.
fn unit_upper_tail(alpha: f64, y: f64) -> Result<f64> {
    let y = y.abs();
    if alpha == 1.0 {
        return Ok(0.5 - y.atan() / PI);
    }
    if alpha == 2.0 {
        return Ok(0.5 * erfc(0.5 * y));
    }
    Ok(density_table(alpha)?.upper_tail(y))
}

/// Resolution of a tabulated unit density.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TableSpec {
    /// Last tabulated abscissa; beyond it the asymptotic tail series is used.
    pub x_max: f64,
    pub step: f64,
}

impl Default for TableSpec {
    fn default() -> Self {
        Self { x_max: 40.0, step: 0.02 }
    }
}

/// `p_1` and its distribution function on `[0, x_max]`, with exact
/// derivatives at the nodes for cubic Hermite interpolation.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityTable {
    alpha: f64,
    spec: TableSpec,
    values: Vec<f64>,
    slopes: Vec<f64>,
    /// `P(S > x_i)`.
    tails: Vec<f64>,
}

const TABLE_MAGIC: &[u8; 8] = b"OCCFDT\0\0";
const TABLE_VERSION: u32 = 1;
/// Smallest α the tabulated density supports.
pub const MIN_TABLE_ALPHA: f64 = 0.5;

impl DensityTable {
    /// Cosine-transform quadrature `p_1(x) = (1/π) ∫_0^∞ cos(zx) e^{-z^α} dz`,
    /// truncated where `e^{-z^α} < 1e-16`.
    pub fn build(alpha: f64, spec: TableSpec) -> Result<Self> {
        let alpha = StableParams::new(alpha)?.alpha();
        if alpha < MIN_TABLE_ALPHA {
            return Err(invalid("alpha", format!("density tables need alpha >= {MIN_TABLE_ALPHA}")));
        }
        if !(spec.step > 0.0 && spec.x_max > spec.step) {
            return Err(invalid("table", "need 0 < step < x_max"));
        }
        let z_max = (16.0 * std::f64::consts::LN_10).powf(1.0 / alpha);
        // Panels resolve cos(z x_max); geometric refinement at z=0 handles
        // the z^α kink of the integrand.
        let width = (0.4 / spec.x_max).min(0.1);
        let mut edges = geometric_edges(1e-8, width, 4);
        let mut z = width;
        while z < z_max {
            z = (z + width).min(z_max);
            edges.push(z);
        }
        let gl = GaussLegendre::new(12);
        let (zs, ws) = gl.composite(&edges);
        let weights: Vec<f64> = zs.iter().zip(&ws).map(|(&z, &w)| w * (-z.powf(alpha)).exp() / PI).collect();

        let n = (spec.x_max / spec.step).round() as usize + 1;
        let mut values = Vec::with_capacity(n);
        let mut slopes = Vec::with_capacity(n);
        for i in 0..n {
            let x = i as f64 * spec.step;
            let (mut p, mut dp) = (0.0, 0.0);
            for (&z, &w) in zs.iter().zip(&weights) {
                let (s, c) = (z * x).sin_cos();
                p += w * c;
                dp -= w * z * s;
            }
            values.push(p);
            slopes.push(dp);
        }
        // Upper tail by exact integration of the Hermite interpolant, anchored
        // at P(S > 0) = 1/2.
        let h = spec.step;
        let mut tails = Vec::with_capacity(n);
        let mut acc = 0.5;
        tails.push(acc);
        for i in 0..n - 1 {
            let seg = h * (values[i] + values[i + 1]) / 2.0 + h * h * (slopes[i] - slopes[i + 1]) / 12.0;
            acc -= seg;
            tails.push(acc);
        }
        Ok(Self {
            alpha,
            spec,
            values,
            slopes,
            tails,
        })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn spec(&self) -> TableSpec {
        self.spec
    }

    pub fn density(&self, x: f64) -> f64 {
        let x = x.abs();
        if x >= self.spec.x_max {
            return asymptotic_density(self.alpha, x);
        }
        let (i, u) = self.locate(x);
        let h = self.spec.step;
        hermite(self.values[i], self.values[i + 1], h * self.slopes[i], h * self.slopes[i + 1], u)
    }

    /// `P(S > y)` for `y >= 0`.
    pub fn upper_tail(&self, y: f64) -> f64 {
        let y = y.abs();
        if y >= self.spec.x_max {
            return asymptotic_tail(self.alpha, y);
        }
        let (i, u) = self.locate(y);
        let h = self.spec.step;
        // derivative of the tail is -p
        hermite(self.tails[i], self.tails[i + 1], -h * self.values[i], -h * self.values[i + 1], u)
    }

    fn locate(&self, x: f64) -> (usize, f64) {
        let pos = x / self.spec.step;
        let i = (pos.floor() as usize).min(self.values.len() - 2);
        (i, pos - i as f64)
    }

    /// Write the table to a versioned little-endian binary file.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(TABLE_MAGIC)?;
        w.write_all(&TABLE_VERSION.to_le_bytes())?;
        for v in [self.alpha, self.spec.x_max, self.spec.step] {
            w.write_all(&v.to_le_bytes())?;
        }
        w.write_all(&(self.values.len() as u64).to_le_bytes())?;
        for col in [&self.values, &self.slopes, &self.tails] {
            for v in col.iter() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Read a table written by [`save`](Self::save); `None` when the file is
    /// missing, stale or keyed to a different `(α, spec)`.
    pub fn load(path: &Path, alpha: f64, spec: TableSpec) -> Option<Self> {
        let mut r = BufReader::new(File::open(path).ok()?);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).ok()?;
        if &magic != TABLE_MAGIC || read_u32(&mut r)? != TABLE_VERSION {
            return None;
        }
        let (a, x_max, step) = (read_f64(&mut r)?, read_f64(&mut r)?, read_f64(&mut r)?);
        if a.to_bits() != alpha.to_bits() || x_max.to_bits() != spec.x_max.to_bits() || step.to_bits() != spec.step.to_bits() {
            return None;
        }
        let n = read_u64(&mut r)? as usize;
        let mut cols = [Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n)];
        for col in cols.iter_mut() {
            for _ in 0..n {
                col.push(read_f64(&mut r)?);
            }
        }
        let [values, slopes, tails] = cols;
        Some(Self {
            alpha,
            spec,
            values,
            slopes,
            tails,
        })
    }

    /// Load from `dir` if a matching cache file exists, else build and store.
    pub fn load_or_build(dir: &Path, alpha: f64, spec: TableSpec) -> Result<Self> {
        let path = dir.join(format!(
            "p1_a{:016x}_x{:016x}_h{:016x}.bin",
            alpha.to_bits(),
            spec.x_max.to_bits(),
            spec.step.to_bits()
        ));
        if let Some(t) = Self::load(&path, alpha, spec) {
            return Ok(t);
        }
        let t = Self::build(alpha, spec)?;
        std::fs::create_dir_all(dir)?;
        t.save(&path)?;
        Ok(t)
    }
}

fn read_u32<R: Read>(r: &mut R) -> Option<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).ok()?;
    Some(u32::from_le_bytes(b))
}
fn read_u64<R: Read>(r: &mut R) -> Option<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).ok()?;
    Some(u64::from_le_bytes(b))
}
fn read_f64<R: Read>(r: &mut R) -> Option<f64> {
    read_u64(r).map(f64::from_bits)
}

#[inline]
fn hermite(y0: f64, y1: f64, m0: f64, m1: f64, u: f64) -> f64 {
    let u2 = u * u;
    let u3 = u2 * u;
    (2.0 * u3 - 3.0 * u2 + 1.0) * y0 + (u3 - 2.0 * u2 + u) * m0 + (-2.0 * u3 + 3.0 * u2) * y1 + (u3 - u2) * m1
}

/// Large-|x| series `(1/π) Σ (-1)^{k+1} Γ(αk+1)/k! sin(παk/2) x^{-αk-1}`.
fn asymptotic_density(alpha: f64, x: f64) -> f64 {
    tail_series(alpha, x, 1.0) / x
}

/// `P(S > y) ≈ (1/π) Σ (-1)^{k+1} Γ(αk)/k! sin(παk/2) y^{-αk}`.
fn asymptotic_tail(alpha: f64, y: f64) -> f64 {
    tail_series(alpha, y, 0.0)
}

fn tail_series(alpha: f64, x: f64, shift: f64) -> f64 {
    let lx = x.ln();
    let mut sum = 0.0;
    let mut prev = f64::INFINITY;
    for k in 1..=30 {
        let kf = k as f64;
        // Γ(αk + shift) / k!
        let log_mag = ln_gamma(alpha * kf + shift) - ln_gamma(kf + 1.0) - alpha * kf * lx;
        let mag = log_mag.exp();
        if mag > prev {
            break; // asymptotic series starts diverging
        }
        let sign = if k % 2 == 1 { 1.0 } else { -1.0 };
        sum += sign * mag * (FRAC_PI_2 * alpha * kf).sin();
        if mag < 1e-18 * sum.abs() {
            break;
        }
        prev = mag;
    }
    sum / PI
}

fn table_cache() -> &'static Mutex<HashMap<u64, Arc<DensityTable>>> {
    static CACHE: OnceLock<Mutex<HashMap<u64, Arc<DensityTable>>>> = OnceLock::new();
    CACHE.get_or_init(|| Mutex::new(HashMap::new()))
}

/// Shared, lazily built table at the default resolution.
pub fn density_table(alpha: f64) -> Result<Arc<DensityTable>> {
    let key = alpha.to_bits();
    if let Some(t) = table_cache().lock().expect("table cache poisoned").get(&key) {
        return Ok(t.clone());
    }
    // Built outside the lock; a concurrent duplicate build is harmless.
    let table = Arc::new(DensityTable::build(alpha, TableSpec::default())?);
    let mut guard = table_cache().lock().expect("table cache poisoned");
    Ok(guard.entry(key).or_insert(table).clone())
}

// ---------------------------------------------------------------------------
// Gridded density and semigroup
// ---------------------------------------------------------------------------

/// Uniform spatial grid `x_i = start + i * step`, `i = 0..len`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpatialGrid {
    pub start: f64,
    pub step: f64,
    pub len: usize,
}

impl SpatialGrid {
    pub fn new(start: f64, step: f64, len: usize) -> Result<Self> {
        if !(step > 0.0) || len < 2 {
            return Err(invalid("grid", "need step > 0 and at least two points"));
        }
        Ok(Self { start, step, len })
    }

    /// Grid symmetric about 0 with `half_width` rounded up to a whole step.
    pub fn symmetric(half_width: f64, step: f64) -> Result<Self> {
        let half = (half_width / step).ceil() as usize;
        Self::new(-(half as f64) * step, step, 2 * half + 1)
    }

    /// Symmetric grid wide enough that `L_t φ` leaks less than `tol` of its
    /// mass; the tail bound uses the stable distribution function.
    pub fn for_semigroup(alpha: f64, t: f64, phi: &TestFunction, step: f64, tol: f64) -> Result<Self> {
        let r_phi = phi.support_radius(1e-9 * tol);
        if t == 0.0 {
            return Self::symmetric(r_phi, step);
        }
        let (mut lo, mut hi) = (0.0_f64, 1.0_f64);
        while two_sided_tail(alpha, t, hi)? > 0.5 * tol {
            lo = hi;
            hi *= 2.0;
        }
        for _ in 0..60 {
            let mid = 0.5 * (lo + hi);
            if two_sided_tail(alpha, t, mid)? > 0.5 * tol {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Self::symmetric(r_phi + hi, step)
    }

    #[inline]
    pub fn x(&self, i: usize) -> f64 {
        self.start + i as f64 * self.step
    }

    pub fn end(&self) -> f64 {
        self.x(self.len - 1)
    }

    pub fn points(&self) -> impl Iterator<Item = f64> + '_ {
        (0..self.len).map(|i| self.x(i))
    }

    pub fn is_symmetric(&self) -> bool {
        (self.start + self.end()).abs() <= 1e-12 * self.step
    }
}

/// Transition density `p_t` sampled on a grid.
#[derive(Debug, Clone)]
pub struct DensityGrid {
    pub alpha: f64,
    pub t: f64,
    pub grid: SpatialGrid,
    pub values: Vec<f64>,
}

impl DensityGrid {
    pub fn new(alpha: f64, t: f64, grid: SpatialGrid) -> Result<Self> {
        let values = grid.points().map(|x| density(alpha, t, x)).collect::<Result<Vec<_>>>()?;
        Ok(Self { alpha, t, grid, values })
    }

    pub fn mass(&self) -> f64 {
        crate::quad::trapezoid_uniform(&self.values, self.grid.step)
    }
}

/// Relative mass-leak tolerance enforced by [`semigroup_apply`].
pub const MASS_LEAK_TOL: f64 = 1e-6;

/// `L_t φ` on a uniform grid.
///
/// `t = 0` returns φ sampled on the grid. For `t > 0` the samples are
/// zero-padded and convolved with `p_t` through the FFT, using the exact
/// transform `exp(-t|ξ|^α)` of the kernel. Fails with [`Error::MassLeak`]
/// when more than [`MASS_LEAK_TOL`] of the output mass would leave the grid.
pub fn semigroup_apply(alpha: f64, t: f64, phi: &TestFunction, grid: &SpatialGrid) -> Result<Vec<f64>> {
    let alpha = StableParams::new(alpha)?.alpha();
    if !(t >= 0.0) {
        return Err(invalid("t", format!("{t} must be >= 0")));
    }
    let samples: Vec<f64> = grid.points().map(|x| phi.eval(x)).collect();
    let total = phi.integral();
    if total == 0.0 {
        return Ok(samples);
    }
    let inside: f64 = phi
        .components()
        .iter()
        .map(|b| {
            let s = b.width * std::f64::consts::SQRT_2;
            b.amplitude * b.width * (PI / 2.0).sqrt() * (erfc((b.center - grid.start) / s) + erfc((grid.end() - b.center) / s))
        })
        .sum::<f64>();
    if inside / total > 1e-8 {
        return Err(Error::MassLeak { leak: inside / total, tolerance: 1e-8 });
    }
    if t == 0.0 {
        return Ok(samples);
    }

    // Fraction of mass transported beyond either end of the grid.
    let mut leak = 0.0;
    for (i, &f) in samples.iter().enumerate() {
        if f == 0.0 {
            continue;
        }
        let y = grid.x(i);
        leak += f * (1.0 - cdf(alpha, t, grid.end() - y)? + cdf(alpha, t, grid.start - y)?);
    }
    leak *= grid.step / total;
    if leak > MASS_LEAK_TOL {
        return Err(Error::MassLeak { leak, tolerance: MASS_LEAK_TOL });
    }

    let m = (2 * grid.len).next_power_of_two();
    let mut buf: Vec<Complex<f64>> = samples.iter().map(|&v| Complex::new(v, 0.0)).collect();
    buf.resize(m, Complex::new(0.0, 0.0));
    let mut planner = FftPlanner::new();
    planner.plan_fft_forward(m).process(&mut buf);
    let dxi = 2.0 * PI / (m as f64 * grid.step);
    for (k, c) in buf.iter_mut().enumerate() {
        let kk = if k <= m / 2 { k as f64 } else { k as f64 - m as f64 };
        let xi = (kk * dxi).abs();
        *c *= (-t * xi.powf(alpha)).exp();
    }
    planner.plan_fft_inverse(m).process(&mut buf);
    let norm = 1.0 / m as f64;
    Ok(buf[..grid.len].iter().map(|c| c.re * norm).collect())
}

// ---------------------------------------------------------------------------
// Pointwise spectral evaluation
// ---------------------------------------------------------------------------

/// Pointwise `L_τ φ(x)` and `G_τ φ(x) = ∫_0^τ L_u φ(x) du` through the
/// Fourier representation of a Gaussian-mixture φ:
///
/// ```text
/// L_τ φ(x) = (1/π) ∫_0^∞ Re[φ̂(ξ) e^{-iξx}] e^{-τ ξ^α} dξ
/// G_τ φ(x) = (1/π) ∫_0^∞ Re[φ̂(ξ) e^{-iξx}] (1 - e^{-τ ξ^α}) / ξ^α dξ
/// ```
#[derive(Debug, Clone)]
pub struct SpectralSemigroup {
    alpha: f64,
    xi: Vec<f64>,
    /// `ξ^α`
    rate: Vec<f64>,
    weight: Vec<f64>,
    re: Vec<f64>,
    im: Vec<f64>,
    phi: TestFunction,
}

/// Node density for [`SpectralSemigroup`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpectralSpec {
    /// Lower edge of the geometric panels near ξ = 0.
    pub xi_min: f64,
    pub panels_per_decade: usize,
    /// Width of the uniform panels for ξ >= 1 (in units of 1/min width).
    pub high_panel_width: f64,
    pub nodes_per_panel: usize,
}

impl Default for SpectralSpec {
    fn default() -> Self {
        Self {
            xi_min: 1e-12,
            panels_per_decade: 6,
            high_panel_width: 0.25,
            nodes_per_panel: 10,
        }
    }
}

impl SpectralSpec {
    pub fn refined(&self) -> Self {
        Self {
            panels_per_decade: self.panels_per_decade * 2,
            high_panel_width: self.high_panel_width / 2.0,
            ..*self
        }
    }
}

/// Evaluation weights of `SpectralSemigroup` frozen at one position `x`.
#[derive(Debug, Clone)]
pub struct PointKernel {
    rate: Vec<f64>,
    coef: Vec<f64>,
}

impl PointKernel {
    /// `L_τ φ(x)`.
    pub fn semigroup(&self, tau: f64) -> f64 {
        self.rate.iter().zip(&self.coef).map(|(&c, &a)| a * (-tau * c).exp()).sum()
    }

    /// `G_τ φ(x)`.
    pub fn integrated(&self, tau: f64) -> f64 {
        tau * self.rate.iter().zip(&self.coef).map(|(&c, &a)| a * exp_ratio(tau * c)).sum::<f64>()
    }
}

impl SpectralSemigroup {
    pub fn new(alpha: f64, phi: &TestFunction, spec: SpectralSpec) -> Result<Self> {
        let alpha = StableParams::new(alpha)?.alpha();
        if spec.nodes_per_panel < 2 || spec.panels_per_decade == 0 {
            return Err(invalid("spectral", "need >= 2 nodes per panel and >= 1 panel per decade"));
        }
        let w = phi.min_width();
        // |φ̂| < 1e-17 relative beyond ξ = 9 / w.
        let xi_max = 9.0 / w;
        let mut edges = geometric_edges(spec.xi_min, 1.0_f64.min(xi_max), spec.panels_per_decade);
        let step = spec.high_panel_width;
        let mut z = *edges.last().unwrap();
        while z < xi_max {
            z = (z + step).min(xi_max);
            edges.push(z);
        }
        let gl = GaussLegendre::new(spec.nodes_per_panel);
        let (xi, weight) = gl.composite(&edges);
        let rate = xi.iter().map(|&z| z.powf(alpha)).collect();
        let (re, im): (Vec<f64>, Vec<f64>) = xi.iter().map(|&z| phi.fourier(z)).unzip();
        Ok(Self {
            alpha,
            xi,
            rate,
            weight,
            re,
            im,
            phi: phi.clone(),
        })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn test_function(&self) -> &TestFunction {
        &self.phi
    }

    pub fn at(&self, x: f64) -> PointKernel {
        let coef = (0..self.xi.len())
            .map(|j| {
                let (s, c) = (self.xi[j] * x).sin_cos();
                self.weight[j] * (self.re[j] * c + self.im[j] * s) / PI
            })
            .collect();
        PointKernel { rate: self.rate.clone(), coef }
    }

    pub fn semigroup(&self, tau: f64, x: f64) -> f64 {
        self.at(x).semigroup(tau)
    }

    pub fn integrated(&self, tau: f64, x: f64) -> f64 {
        self.at(x).integrated(tau)
    }

    /// `∫ φ(x) L_τ φ(x) dx = (1/π) ∫_0^∞ |φ̂|² e^{-τ ξ^α} dξ`.
    pub fn self_overlap(&self, tau: f64) -> f64 {
        (0..self.xi.len())
            .map(|j| self.weight[j] * (self.re[j].powi(2) + self.im[j].powi(2)) * (-tau * self.rate[j]).exp())
            .sum::<f64>()
            / PI
    }

    /// `∫_0^A (A - τ) ∫ φ L_τ φ dx dτ`, the double time integral of the
    /// overlap over `[0, A]²` divided by two.
    pub fn self_overlap_double_integral(&self, a: f64) -> f64 {
        if a <= 0.0 {
            return 0.0;
        }
        a * a
            * (0..self.xi.len())
                .map(|j| self.weight[j] * (self.re[j].powi(2) + self.im[j].powi(2)) * exp_ratio2(a * self.rate[j]))
                .sum::<f64>()
            / PI
    }
}

/// `(1 - e^{-y}) / y`.
#[inline]
fn exp_ratio(y: f64) -> f64 {
    if y < 1e-5 {
        1.0 - y * (0.5 - y / 6.0)
    } else {
        -(-y).exp_m1() / y
    }
}

/// `(y - 1 + e^{-y}) / y²`.
#[inline]
fn exp_ratio2(y: f64) -> f64 {
    if y < 1e-3 {
        0.5 - y * (1.0 / 6.0 - y * (1.0 / 24.0 - y / 120.0))
    } else {
        (y + (-y).exp_m1()) / (y * y)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quad::adaptive;
    use crate::testfn::Bump;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn rejects_bad_arguments() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(sample_increment(1.5, 0.0, &mut rng).is_err());
        assert!(sample_increment(1.5, -1.0, &mut rng).is_err());
        assert!(sample_increment(2.5, 1.0, &mut rng).is_err());
        assert!(sample_increment(0.0, 1.0, &mut rng).is_err());
        assert!(density(1.5, 0.0, 0.0).is_err());
        assert!(density_at_zero(2.1).is_err());
    }

    #[test]
    fn closed_form_densities() {
        assert!((density(1.0, 1.0, 0.0).unwrap() - 1.0 / PI).abs() < 1e-15);
        assert!((density(2.0, 1.0, 0.0).unwrap() - 0.282_094_791_773_878_1).abs() < 1e-15);
        assert!((density_at_zero(1.0).unwrap() - 1.0 / PI).abs() < 1e-15);
        assert!((density_at_zero(2.0).unwrap() - 1.0 / (2.0 * PI.sqrt())).abs() < 1e-15);
    }

    #[test]
    fn tabulated_density_matches_direct_quadrature() {
        // independent oracle: adaptive cosine-transform integral
        let oracle = |alpha: f64, x: f64| {
            adaptive(|z| (z * x).cos() * (-z.powf(alpha)).exp(), 0.0, 60.0, 1e-15, 1e-14) / PI
        };
        for &alpha in &[1.2, 1.5, 1.8] {
            for &x in &[0.0, 0.013, 0.7, 2.31, 9.99, 25.0] {
                let got = density(alpha, 1.0, x).unwrap();
                let want = oracle(alpha, x);
                assert!((got - want).abs() < 1e-9, "alpha={alpha} x={x}: {got} vs {want}");
            }
        }
        // alpha = 1.5 at zero: Γ(2/3) / (1.5π) ≈ 0.287
        let p0 = density(1.5, 1.0, 0.0).unwrap();
        assert!((p0 - density_at_zero(1.5).unwrap()).abs() < 1e-10);
        assert!((p0 - 0.287).abs() < 5e-4);
    }

    #[test]
    fn tail_series_joins_table() {
        for &alpha in &[1.2, 1.5, 1.8] {
            let t = density_table(alpha).unwrap();
            let x = t.spec().x_max;
            let inside = {
                let (i, u) = t.locate(x - 1e-9);
                hermite(t.values[i], t.values[i + 1], t.spec.step * t.slopes[i], t.spec.step * t.slopes[i + 1], u)
            };
            let outside = asymptotic_density(alpha, x);
            assert!(((inside - outside) / outside).abs() < 1e-7, "alpha={alpha}: {inside} vs {outside}");
            let tail_in = t.tails[t.tails.len() - 1];
            let tail_out = asymptotic_tail(alpha, x);
            assert!(((tail_in - tail_out) / tail_out).abs() < 1e-6, "alpha={alpha}: {tail_in} vs {tail_out}");
        }
    }

    #[test]
    fn cdf_matches_closed_forms() {
        for &x in &[-3.0, -0.2, 0.0, 1.0, 50.0] {
            let c = cdf(1.0, 1.0, x).unwrap();
            assert!((c - (0.5 + x.atan() / PI)).abs() < 1e-15);
            let g = cdf(2.0, 1.0, x).unwrap();
            let want = 0.5 * erfc(-x / 2.0);
            assert!((g - want).abs() < 1e-15);
        }
    }

    #[test]
    fn density_table_cache_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let spec = TableSpec { x_max: 10.0, step: 0.05 };
        let a = DensityTable::load_or_build(dir.path(), 1.3, spec).unwrap();
        let b = DensityTable::load_or_build(dir.path(), 1.3, spec).unwrap();
        assert_eq!(a, b);
        assert!(DensityTable::load(&dir.path().join("missing.bin"), 1.3, spec).is_none());
    }

    #[test]
    fn semigroup_identity_at_zero() {
        let phi = TestFunction::unit_bump();
        let grid = SpatialGrid::symmetric(12.0, 0.1).unwrap();
        let out = semigroup_apply(1.5, 0.0, &phi, &grid).unwrap();
        for (i, v) in out.iter().enumerate() {
            assert_eq!(*v, phi.eval(grid.x(i)));
        }
    }

    #[test]
    fn semigroup_gaussian_closed_form() {
        let phi = TestFunction::new(vec![Bump { amplitude: 1.3, center: 0.4, width: 0.8 }]).unwrap();
        let t = 2.5;
        let grid = SpatialGrid::for_semigroup(2.0, t, &phi, 0.05, MASS_LEAK_TOL).unwrap();
        let out = semigroup_apply(2.0, t, &phi, &grid).unwrap();
        let var = 0.64 + 2.0 * t;
        let mut sup: f64 = 0.0;
        for (i, v) in out.iter().enumerate() {
            let x = grid.x(i);
            let want = 1.3 * 0.8 / var.sqrt() * (-(x - 0.4).powi(2) / (2.0 * var)).exp();
            sup = sup.max((v - want).abs());
        }
        assert!(sup < 1e-10, "{sup}");
    }

    #[test]
    fn semigroup_rejects_narrow_grid() {
        let phi = TestFunction::unit_bump();
        let grid = SpatialGrid::symmetric(50.0, 0.1).unwrap();
        assert!(matches!(semigroup_apply(1.5, 10.0, &phi, &grid), Err(Error::MassLeak { .. })));
    }

    #[test]
    fn spectral_matches_fft_semigroup() {
        let phi = TestFunction::new(vec![
            Bump { amplitude: 1.0, center: 0.0, width: 1.0 },
            Bump { amplitude: 0.5, center: 1.5, width: 0.5 },
        ])
        .unwrap();
        let alpha = 1.5;
        let t = 3.0;
        let grid = SpatialGrid::for_semigroup(alpha, t, &phi, 0.1, MASS_LEAK_TOL).unwrap();
        let out = semigroup_apply(alpha, t, &phi, &grid).unwrap();
        let sp = SpectralSemigroup::new(alpha, &phi, SpectralSpec::default()).unwrap();
        let mid = grid.len / 2;
        for off in [-30i64, -7, 0, 4, 19, 60] {
            let i = (mid as i64 + off) as usize;
            let x = grid.x(i);
            assert!((out[i] - sp.semigroup(t, x)).abs() < 1e-8, "x={x}");
        }
    }

    #[test]
    fn integrated_semigroup_is_time_integral() {
        let phi = TestFunction::unit_bump();
        let sp = SpectralSemigroup::new(1.5, &phi, SpectralSpec::default()).unwrap();
        let k = sp.at(0.3);
        let num = adaptive(|u| k.semigroup(u), 0.0, 7.0, 1e-13, 1e-12);
        assert!((num - k.integrated(7.0)).abs() < 1e-9);
        let a = 5.0;
        let num2 = adaptive(|u| (a - u) * sp.self_overlap(u), 0.0, a, 1e-13, 1e-12);
        assert!((num2 - sp.self_overlap_double_integral(a)).abs() < 1e-9);
        assert!((sp.self_overlap(0.0) - phi.l2_norm_sq()).abs() < 1e-10);
    }
}
