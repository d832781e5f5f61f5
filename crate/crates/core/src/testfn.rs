//! Nonnegative Gaussian-mixture test functions.

use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::error::{invalid, Result};

/// One bump `amplitude * exp(-(x - center)^2 / (2 width^2))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Bump {
    pub amplitude: f64,
    pub center: f64,
    pub width: f64,
}

/// A test function given as a finite sum of Gaussian bumps with
/// nonnegative amplitudes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TestFunction {
    components: Vec<Bump>,
}

impl Default for TestFunction {
    fn default() -> Self {
        Self::unit_bump()
    }
}

impl TestFunction {
    pub fn new(components: Vec<Bump>) -> Result<Self> {
        let phi = Self { components };
        phi.validate()?;
        Ok(phi)
    }

    /// `exp(-x^2/2)`, the default test function.
    pub fn unit_bump() -> Self {
        Self {
            components: vec![Bump {
                amplitude: 1.0,
                center: 0.0,
                width: 1.0,
            }],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.components.is_empty() {
            return Err(invalid("phi", "needs at least one component"));
        }
        for b in &self.components {
            if !(b.amplitude >= 0.0 && b.amplitude.is_finite()) {
                return Err(invalid("phi.amplitude", format!("{} must be >= 0", b.amplitude)));
            }
            if !(b.width > 0.0 && b.width.is_finite()) {
                return Err(invalid("phi.width", format!("{} must be > 0", b.width)));
            }
            if !b.center.is_finite() {
                return Err(invalid("phi.center", "must be finite"));
            }
        }
        Ok(())
    }

    pub fn components(&self) -> &[Bump] {
        &self.components
    }

    #[inline]
    pub fn eval(&self, x: f64) -> f64 {
        self.components
            .iter()
            .map(|b| {
                let z = (x - b.center) / b.width;
                let q = 0.5 * z * z;
                // exp(-q) underflows to exactly 0 past this point
                if q > 746.0 {
                    0.0
                } else {
                    b.amplitude * (-q).exp()
                }
            })
            .sum()
    }

    /// `<lambda, phi>`, the Lebesgue integral.
    pub fn integral(&self) -> f64 {
        self.components
            .iter()
            .map(|b| b.amplitude * b.width * (2.0 * PI).sqrt())
            .sum()
    }

    /// `∫ phi(x)^2 dx`.
    pub fn l2_norm_sq(&self) -> f64 {
        let mut acc = 0.0;
        for a in &self.components {
            for b in &self.components {
                let s2 = a.width * a.width + b.width * b.width;
                let d = a.center - b.center;
                acc += a.amplitude
                    * b.amplitude
                    * a.width
                    * b.width
                    * (2.0 * PI / s2).sqrt()
                    * (-0.5 * d * d / s2).exp();
            }
        }
        acc
    }

    /// Fourier transform `∫ phi(x) e^{i xi x} dx` as `(re, im)`.
    #[inline]
    pub fn fourier(&self, xi: f64) -> (f64, f64) {
        let mut re = 0.0;
        let mut im = 0.0;
        for b in &self.components {
            let mag = b.amplitude * b.width * (2.0 * PI).sqrt() * (-0.5 * b.width * b.width * xi * xi).exp();
            let (s, c) = (xi * b.center).sin_cos();
            re += mag * c;
            im += mag * s;
        }
        (re, im)
    }

    /// Radius `R` with all but `eps` of the mass inside `[-R, R]`.
    pub fn support_radius(&self, eps: f64) -> f64 {
        // Per-component two-sided Gaussian tail, split evenly across components.
        let share = eps / self.components.len() as f64;
        let z = normal_two_sided_quantile(share);
        self.components
            .iter()
            .map(|b| b.center.abs() + z * b.width)
            .fold(0.0, f64::max)
    }

    pub fn min_width(&self) -> f64 {
        self.components.iter().map(|b| b.width).fold(f64::INFINITY, f64::min)
    }

    /// Largest `|center|`.
    pub fn max_offset(&self) -> f64 {
        self.components.iter().map(|b| b.center.abs()).fold(0.0, f64::max)
    }

    /// The same function with every amplitude multiplied by `k >= 0`.
    pub fn scaled(&self, k: f64) -> Self {
        Self {
            components: self
                .components
                .iter()
                .map(|b| Bump {
                    amplitude: b.amplitude * k,
                    ..*b
                })
                .collect(),
        }
    }
}

/// Smallest `z` with `P(|Z| > z) <= p` for a standard normal `Z`.
fn normal_two_sided_quantile(p: f64) -> f64 {
    let (mut lo, mut hi) = (0.0_f64, 40.0_f64);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if statrs::function::erf::erfc(mid / std::f64::consts::SQRT_2) > p {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    hi
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quad::adaptive;

    #[test]
    fn unit_bump_integral() {
        let phi = TestFunction::unit_bump();
        assert!((phi.integral() - 2.506_628_274_631).abs() < 1e-12);
        assert!((phi.l2_norm_sq() - PI.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn analytic_integrals_match_quadrature() {
        let phi = TestFunction::new(vec![
            Bump { amplitude: 0.7, center: -1.5, width: 0.4 },
            Bump { amplitude: 2.0, center: 0.8, width: 1.3 },
        ])
        .unwrap();
        let num = adaptive(|x| phi.eval(x), -30.0, 30.0, 1e-14, 1e-13);
        assert!((num - phi.integral()).abs() < 1e-10);
        let num2 = adaptive(|x| phi.eval(x).powi(2), -30.0, 30.0, 1e-14, 1e-13);
        assert!((num2 - phi.l2_norm_sq()).abs() < 1e-10);
        let (re, im) = phi.fourier(0.9);
        let nre = adaptive(|x| phi.eval(x) * (0.9 * x).cos(), -30.0, 30.0, 1e-14, 1e-13);
        let nim = adaptive(|x| phi.eval(x) * (0.9 * x).sin(), -30.0, 30.0, 1e-14, 1e-13);
        assert!((re - nre).abs() < 1e-10 && (im - nim).abs() < 1e-10);
    }

    #[test]
    fn support_radius_contains_mass() {
        let phi = TestFunction::unit_bump();
        let r = phi.support_radius(1e-8);
        assert!((r - 5.730_7).abs() < 1e-3, "{r}");
    }

    #[test]
    fn rejects_negative_amplitude() {
        assert!(TestFunction::new(vec![Bump { amplitude: -1.0, center: 0.0, width: 1.0 }]).is_err());
        assert!(TestFunction::new(vec![]).is_err());
    }
}
