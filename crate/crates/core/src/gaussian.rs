//! Gaussian limit laws: Brownian motion, fractional and sub-fractional
//! Brownian motion and the Riemann–Liouville process, with the limit
//! constants of the occupation-time fluctuations and the increment-decay
//! (dependence exponent) machinery.

use std::f64::consts::PI;
use std::fmt;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::gamma;

use crate::error::{invalid, Error, Result};
use crate::quad::adaptive;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    Bm,
    Fbm,
    SubFbm,
    Rl,
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Family::Bm => "bm",
            Family::Fbm => "fbm",
            Family::SubFbm => "sub-fbm",
            Family::Rl => "rl",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "bm" | "brownian" => Ok(Family::Bm),
            "fbm" => Ok(Family::Fbm),
            "subfbm" | "sub-fbm" | "sfbm" => Ok(Family::SubFbm),
            "rl" | "riemann-liouville" => Ok(Family::Rl),
            other => Err(invalid("family", format!("unknown kernel family `{other}`"))),
        }
    }
}

/// A centered Gaussian covariance law with its index `H`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CovKernel {
    family: Family,
    h: f64,
}

impl CovKernel {
    pub fn new(family: Family, h: f64) -> Result<Self> {
        let ok = match family {
            Family::Bm => h == 0.5,
            Family::Fbm | Family::SubFbm => h > 0.0 && h < 1.0,
            Family::Rl => h > 0.0 && h.is_finite(),
        };
        if !ok {
            return Err(invalid("H", format!("{h} is not a valid index for {family}")));
        }
        Ok(Self { family, h })
    }

    pub fn bm() -> Self {
        Self { family: Family::Bm, h: 0.5 }
    }

    pub fn fbm(h: f64) -> Result<Self> {
        Self::new(Family::Fbm, h)
    }

    pub fn sub_fbm(h: f64) -> Result<Self> {
        Self::new(Family::SubFbm, h)
    }

    pub fn rl(h: f64) -> Result<Self> {
        Self::new(Family::Rl, h)
    }

    pub fn family(&self) -> Family {
        self.family
    }

    pub fn h(&self) -> f64 {
        self.h
    }

    /// `Cov(Z(s), Z(t))`.
    pub fn cov(&self, s: f64, t: f64) -> f64 {
        let (s, t) = (s.max(0.0), t.max(0.0));
        // every family reduces to Brownian motion at H = 1/2
        if self.h == 0.5 {
            return s.min(t);
        }
        let two_h = 2.0 * self.h;
        match self.family {
            Family::Bm => s.min(t),
            Family::Fbm => 0.5 * (s.powf(two_h) + t.powf(two_h) - (t - s).abs().powf(two_h)),
            Family::SubFbm => {
                s.powf(two_h) + t.powf(two_h) - 0.5 * ((s + t).powf(two_h) + (t - s).abs().powf(two_h))
            }
            Family::Rl => rl_cov(self.h, s, t),
        }
    }

    /// Covariance matrix on `grid`.
    pub fn matrix(&self, grid: &[f64]) -> Vec<Vec<f64>> {
        let n = grid.len();
        let mut m = vec![vec![0.0; n]; n];
        for i in 0..n {
            for j in i..n {
                let c = self.cov(grid[i], grid[j]);
                m[i][j] = c;
                m[j][i] = c;
            }
        }
        m
    }
}

/// `∫_0^{s∧t} ((t-u)(s-u))^{H-1/2} du`.
fn rl_cov(h: f64, s: f64, t: f64) -> f64 {
    let m = s.min(t);
    let d = (t - s).abs();
    if m == 0.0 {
        return 0.0;
    }
    let p = h - 0.5;
    if d == 0.0 {
        return m.powf(2.0 * h) / (2.0 * h);
    }
    // Integer exponent: expand (w + d)^n and integrate term by term.
    if p >= 0.0 && p.fract() == 0.0 && p <= 16.0 {
        let n = p as u32;
        let mut acc = 0.0;
        let mut binom = 1.0;
        for k in 0..=n {
            acc += binom * d.powi((n - k) as i32) * m.powi((n + k + 1) as i32) / (n + k + 1) as f64;
            binom = binom * (n - k) as f64 / (k + 1) as f64;
        }
        return acc;
    }
    // w = s∧t - u, then w = m v^{1/(p+1)} absorbs the w^p endpoint factor.
    let q = 1.0 / (p + 1.0);
    let pref = m.powf(p + 1.0) / (p + 1.0);
    pref * adaptive(|v| (m * v.powf(q) + d).powf(p), 0.0, 1.0, 0.0, 1e-14)
}

/// `x^q - y^q` without cancellation for nearby positive `x, y`.
#[inline]
fn pow_diff(x: f64, y: f64, q: f64) -> f64 {
    y.powf(q) * (q * ((x - y) / y).ln_1p()).exp_m1()
}

/// `Cov(Z(v) - Z(u), Z(T+t) - Z(T+s))` for `0 <= u < v < s < t`, `T >= 0`.
pub fn increment_cov(kernel: &CovKernel, u: f64, v: f64, s: f64, t: f64, big_t: f64) -> Result<f64> {
    if !(0.0 <= u && u < v && v < s && s < t) {
        return Err(invalid("u,v,s,t", format!("need 0 <= u < v < s < t, got {u}, {v}, {s}, {t}")));
    }
    if !(big_t >= 0.0 && big_t.is_finite()) {
        return Err(invalid("T", format!("{big_t} must be >= 0")));
    }
    let (a, b) = (big_t + s, big_t + t);
    let four_term = || kernel.cov(v, b) - kernel.cov(v, a) - kernel.cov(u, b) + kernel.cov(u, a);
    Ok(match kernel.family {
        Family::Bm | Family::Rl => four_term(),
        Family::Fbm | Family::SubFbm => {
            if v > 0.05 * a {
                return Ok(four_term());
            }
            // With f(x) = x^{2H}, the a^{2H} and b^{2H} terms cancel and the
            // rest expands around b and a in powers of the left endpoint:
            //   FBM:    -1/2 Σ_{k>=1} (-1)^k (v^k - u^k)/k! [f^(k)(b) - f^(k)(a)]
            //   subFBM:      -Σ_{k even>=2} (v^k - u^k)/k! [f^(k)(b) - f^(k)(a)]
            let two_h = 2.0 * kernel.h;
            let mut coef = 1.0; // 2H (2H-1) ... (2H-k+1)
            let mut fact = 1.0;
            let mut sum = 0.0;
            for k in 1..=60 {
                let kf = k as f64;
                coef *= two_h - kf + 1.0;
                fact *= kf;
                if coef == 0.0 {
                    break;
                }
                let diff = coef * pow_diff(b, a, two_h - kf);
                let pw = v.powi(k) - u.powi(k);
                let term = match kernel.family {
                    Family::Fbm => -0.5 * if k % 2 == 0 { 1.0 } else { -1.0 } * pw / fact * diff,
                    _ => {
                        if k % 2 == 0 {
                            -pw / fact * diff
                        } else {
                            0.0
                        }
                    }
                };
                sum += term;
                if k > 2 && term != 0.0 && term.abs() < 1e-17 * sum.abs() {
                    break;
                }
            }
            sum
        }
    })
}

/// RL increment covariance by direct quadrature of the moving-average
/// representation, independent of [`CovKernel::cov`].
pub fn rl_increment_cov_direct(h: f64, u: f64, v: f64, s: f64, t: f64, big_t: f64) -> Result<f64> {
    CovKernel::rl(h)?;
    if !(0.0 <= u && u < v && v < s && s < t && big_t >= 0.0) {
        return Err(invalid("u,v,s,t", "need 0 <= u < v < s < t and T >= 0"));
    }
    let p = h - 0.5;
    let right = |r: f64| pow_diff(big_t + t - r, big_t + s - r, p);
    let tol = 1e-15;
    let part_u = if u > 0.0 {
        adaptive(|r| ((v - r).powf(p) - (u - r).powf(p)) * right(r), 0.0, u, 0.0, tol)
    } else {
        0.0
    };
    let part_v = adaptive(|r| (v - r).powf(p) * right(r), u, v, 0.0, tol);
    Ok(part_u + part_v)
}

/// The RL increment-covariance limit `(2H-1)/(2H+1) (v^{H+1/2} - u^{H+1/2}) (t-s)`
/// of `T^{3/2-H} Cov(R(v)-R(u), R(T+t)-R(T+s))`.
pub fn rl_increment_limit(h: f64, u: f64, v: f64, s: f64, t: f64) -> f64 {
    (2.0 * h - 1.0) / (2.0 * h + 1.0) * (v.powf(h + 0.5) - u.powf(h + 0.5)) * (t - s)
}

/// Decay exponent of the increment covariance: minus the least-squares
/// slope of `ln|Cov|` against `ln T` over `t_grid`.
pub fn dependence_exponent_fit(kernel: &CovKernel, u: f64, v: f64, s: f64, t: f64, t_grid: &[f64]) -> Result<f64> {
    if t_grid.len() < 2 {
        return Err(invalid("T_grid", "need at least two horizons"));
    }
    let mut xs = Vec::with_capacity(t_grid.len());
    let mut ys = Vec::with_capacity(t_grid.len());
    for &big_t in t_grid {
        if !(big_t > 0.0) {
            return Err(invalid("T_grid", "horizons must be > 0"));
        }
        let c = increment_cov(kernel, u, v, s, t, big_t)?;
        // below rounding noise of the four-term expansion counts as zero
        let noise = match kernel.family {
            Family::Bm | Family::Rl => 1e-13 * kernel.cov(v, big_t + t).abs(),
            Family::Fbm | Family::SubFbm => 0.0,
        };
        if c == 0.0 || c.abs() <= noise {
            return Err(Error::NoPolynomialDecay(big_t));
        }
        xs.push(big_t.ln());
        ys.push(c.abs().ln());
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    Ok(-sxy / sxx)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LimitRegime {
    /// α ∈ (1, 2): limit `K λ R^H`.
    RiemannLiouville,
    /// α = 1: limit `C λ B` in the space-time integral sense.
    Brownian,
}

/// Index and amplitude of the fluctuation limit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LimitConstants {
    pub h: f64,
    /// `K` for α ∈ (1,2), `C` for α = 1.
    pub amplitude: f64,
    pub regime: LimitRegime,
}

impl LimitConstants {
    pub fn kernel(&self) -> CovKernel {
        match self.regime {
            LimitRegime::RiemannLiouville => CovKernel { family: Family::Rl, h: self.h },
            LimitRegime::Brownian => CovKernel::bm(),
        }
    }

    /// Limit of `Cov(<X_T(s), φ>, <X_T(t), φ>)` given `<λ, φ>`.
    pub fn limit_cov(&self, phi_mass: f64, s: f64, t: f64) -> f64 {
        (self.amplitude * phi_mass).powi(2) * self.kernel().cov(s, t)
    }
}

/// `H = 3/2 - 1/α` and `K = √(2γD) Γ(1/α) / (π(α-1))` for α ∈ (1,2);
/// `C = 2√(γD)/π` with a Brownian limit for α = 1.
pub fn limit_constants(alpha: f64, gamma_rate: f64, d: f64) -> Result<LimitConstants> {
    if !(gamma_rate > 0.0) {
        return Err(invalid("gamma", format!("{gamma_rate} must be > 0")));
    }
    if !(d > 0.0 && d.is_finite()) {
        return Err(invalid("D", format!("{d} must be finite and > 0")));
    }
    if alpha == 1.0 {
        return Ok(LimitConstants {
            h: 0.5,
            amplitude: 2.0 * (gamma_rate * d).sqrt() / PI,
            regime: LimitRegime::Brownian,
        });
    }
    if alpha > 1.0 && alpha < 2.0 {
        return Ok(LimitConstants {
            h: 1.5 - 1.0 / alpha,
            amplitude: (2.0 * gamma_rate * d).sqrt() * gamma(1.0 / alpha) / (PI * (alpha - 1.0)),
            regime: LimitRegime::RiemannLiouville,
        });
    }
    Err(invalid("alpha", format!("{alpha} is outside {{1}} ∪ (1, 2)")))
}

/// Lower-triangular `L` with `L L^T = m + jitter I`, trying jitter levels up
/// to `1e-10` times the largest diagonal entry.
pub fn cholesky_with_jitter(m: &[Vec<f64>]) -> Result<(Vec<Vec<f64>>, f64)> {
    let scale = m.iter().enumerate().map(|(i, r)| r[i].abs()).fold(0.0, f64::max).max(f64::MIN_POSITIVE);
    for level in [0.0, 1e-14, 1e-12, 1e-10] {
        if let Some(l) = cholesky(m, level * scale) {
            return Ok((l, level * scale));
        }
    }
    Err(Error::NotPositiveDefinite(format!(
        "Cholesky failed with diagonal jitter up to {:.1e}",
        1e-10 * scale
    )))
}

fn cholesky(m: &[Vec<f64>], jitter: f64) -> Option<Vec<Vec<f64>>> {
    let n = m.len();
    let mut l = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..=i {
            let mut sum = m[i][j] + if i == j { jitter } else { 0.0 };
            for k in 0..j {
                sum -= l[i][k] * l[j][k];
            }
            if i == j {
                if !(sum > 0.0) {
                    return None;
                }
                l[i][i] = sum.sqrt();
            } else {
                l[i][j] = sum / l[j][j];
            }
        }
    }
    Some(l)
}

/// `n` exact draws of the process on `grid` (strictly increasing, `>= 0`);
/// a leading zero time is pinned to 0.
pub fn sample_paths<R: Rng + ?Sized>(kernel: &CovKernel, grid: &[f64], n: usize, rng: &mut R) -> Result<Vec<Vec<f64>>> {
    if grid.windows(2).any(|w| !(w[1] > w[0])) || grid.first().is_some_and(|&t| t < 0.0) {
        return Err(invalid("grid", "must be strictly increasing and nonnegative"));
    }
    let pinned = grid.first() == Some(&0.0);
    let free: Vec<f64> = grid.iter().copied().skip(usize::from(pinned)).collect();
    let (l, _) = cholesky_with_jitter(&kernel.matrix(&free))?;
    let m = free.len();
    let mut z = vec![0.0; m];
    Ok((0..n)
        .map(|_| {
            for zi in z.iter_mut() {
                *zi = rng.sample(StandardNormal);
            }
            let mut path = Vec::with_capacity(grid.len());
            if pinned {
                path.push(0.0);
            }
            for i in 0..m {
                path.push((0..=i).map(|k| l[i][k] * z[k]).sum());
            }
            path
        })
        .collect())
}

/// Discretized moving average `Σ_{j<i} (t_i - u_j)^{H-1/2} √Δ Z_j` with
/// midpoints `u_j = (j + 1/2)Δ` on `t_i = iΔ, i = 0..=steps`.
pub fn rl_moving_average_sample<R: Rng + ?Sized>(h: f64, step: f64, steps: usize, rng: &mut R) -> Result<Vec<f64>> {
    let noise: Vec<f64> = (0..steps).map(|_| rng.sample(StandardNormal)).collect();
    rl_moving_average_from_noise(h, step, &noise)
}

/// Same as [`rl_moving_average_sample`] with caller-supplied standard normals.
pub fn rl_moving_average_from_noise(h: f64, step: f64, noise: &[f64]) -> Result<Vec<f64>> {
    if !(0.5..=1.0).contains(&h) {
        return Err(invalid("H", format!("{h} is outside [1/2, 1]")));
    }
    if !(step > 0.0) {
        return Err(invalid("step", "must be > 0"));
    }
    let n = noise.len();
    let p = h - 0.5;
    // weight for lag m = i - j >= 1: ((m - 1/2)Δ)^p √Δ
    let weights: Vec<f64> = (1..=n).map(|m| ((m as f64 - 0.5) * step).powf(p) * step.sqrt()).collect();
    let mut path = vec![0.0; n + 1];
    for i in 1..=n {
        path[i] = (0..i).map(|j| weights[i - j - 1] * noise[j]).sum();
    }
    Ok(path)
}
