//! Event-driven simulation of the `(1, α, σ(x))` branching particle system
//! started from a Poisson field with Lebesgue intensity.
//!
//! Every particle carries an exponential branching clock of rate γ. Between
//! clock rings and record times it moves by exact stable increments; at a
//! ring at position `x` it is replaced by 0, 1 or 2 copies at `x` with
//! probabilities `σ(x), 1 - 2σ(x), σ(x)`.

use rand::Rng;
use rand_distr::{Distribution, Exp1, Poisson};
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

use crate::error::{invalid, Error, Result};
use crate::stable::{StableParams, StableSampler};
use crate::testfn::TestFunction;

/// Branching-law profile `σ(x) ∈ [0, 1/2]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum SigmaProfile {
    Zero,
    /// `level` on `[left, right]`, zero elsewhere.
    ConstantOnInterval { level: f64, left: f64, right: f64 },
    /// `level * exp(-(x - center)^2 / (2 width^2))`.
    GaussianProfile { level: f64, center: f64, width: f64 },
}

impl Default for SigmaProfile {
    fn default() -> Self {
        SigmaProfile::ConstantOnInterval {
            level: 0.5,
            left: -1.0,
            right: 1.0,
        }
    }
}

impl SigmaProfile {
    pub fn validate(&self) -> Result<()> {
        let level = match *self {
            SigmaProfile::Zero => return Ok(()),
            SigmaProfile::ConstantOnInterval { level, left, right } => {
                if !(left < right) || !left.is_finite() || !right.is_finite() {
                    return Err(invalid("sigma", format!("interval [{left}, {right}] is empty or unbounded")));
                }
                level
            }
            SigmaProfile::GaussianProfile { level, center, width } => {
                if !(width > 0.0 && width.is_finite()) || !center.is_finite() {
                    return Err(invalid("sigma.width", format!("{width} must be > 0")));
                }
                level
            }
        };
        if !(0.0..=0.5).contains(&level) {
            return Err(invalid("sigma.level", format!("{level} is outside [0, 1/2]")));
        }
        Ok(())
    }

    #[inline]
    pub fn eval(&self, x: f64) -> f64 {
        match *self {
            SigmaProfile::Zero => 0.0,
            SigmaProfile::ConstantOnInterval { level, left, right } => {
                if x >= left && x <= right {
                    level
                } else {
                    0.0
                }
            }
            SigmaProfile::GaussianProfile { level, center, width } => {
                let z = (x - center) / width;
                level * (-0.5 * z * z).exp()
            }
        }
    }

    /// `D = ∫ σ(x) dx`.
    pub fn total_mass(&self) -> f64 {
        match *self {
            SigmaProfile::Zero => 0.0,
            SigmaProfile::ConstantOnInterval { level, left, right } => level * (right - left),
            SigmaProfile::GaussianProfile { level, width, .. } => level * width * (2.0 * std::f64::consts::PI).sqrt(),
        }
    }

    /// True when every branching event is a no-op.
    pub fn is_zero(&self) -> bool {
        match *self {
            SigmaProfile::Zero => true,
            SigmaProfile::ConstantOnInterval { level, .. } | SigmaProfile::GaussianProfile { level, .. } => level == 0.0,
        }
    }

    /// Same profile with the level multiplied by `k`.
    pub fn scaled(&self, k: f64) -> Self {
        match *self {
            SigmaProfile::Zero => SigmaProfile::Zero,
            SigmaProfile::ConstantOnInterval { level, left, right } => SigmaProfile::ConstantOnInterval {
                level: level * k,
                left,
                right,
            },
            SigmaProfile::GaussianProfile { level, center, width } => SigmaProfile::GaussianProfile {
                level: level * k,
                center,
                width,
            },
        }
    }
}

/// One experiment's model: motion, branching and discretization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelParams {
    pub alpha: f64,
    pub gamma: f64,
    pub sigma: SigmaProfile,
    /// Time horizon `T`.
    pub horizon: f64,
    /// Particles are seeded on `[-L, L]`.
    pub window_halfwidth: f64,
    /// Record step δ; `T / δ` must be an integer.
    pub occupation_step: f64,
}

/// Default window constant `c` in `L = R_φ + c T^{1/α}`.
pub const DEFAULT_WINDOW_CONSTANT: f64 = 10.0;
/// Default record step δ.
pub const DEFAULT_OCCUPATION_STEP: f64 = 0.25;

impl ModelParams {
    /// Parameters with the window `L = R_φ + c T^{1/α}`, `R_φ` holding all
    /// but `1e-8` of φ's mass.
    pub fn with_window(
        alpha: f64,
        gamma: f64,
        sigma: SigmaProfile,
        horizon: f64,
        phi: &TestFunction,
        window_constant: f64,
        occupation_step: f64,
    ) -> Result<Self> {
        StableParams::new(alpha)?;
        if !(horizon > 0.0) {
            return Err(invalid("horizon", format!("{horizon} must be > 0")));
        }
        if !(window_constant > 0.0) {
            return Err(invalid("window_constant", format!("{window_constant} must be > 0")));
        }
        let window_halfwidth = phi.support_radius(1e-8) + window_constant * horizon.powf(1.0 / alpha);
        let p = Self {
            alpha,
            gamma,
            sigma,
            horizon,
            window_halfwidth,
            occupation_step,
        };
        p.validate(phi)?;
        Ok(p)
    }

    pub fn validate(&self, phi: &TestFunction) -> Result<()> {
        StableParams::new(self.alpha)?;
        self.sigma.validate()?;
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(invalid("gamma", format!("{} must be >= 0", self.gamma)));
        }
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return Err(invalid("horizon", format!("{} must be > 0", self.horizon)));
        }
        if !(self.occupation_step > 0.0) {
            return Err(invalid("occupation_step", format!("{} must be > 0", self.occupation_step)));
        }
        let ratio = self.horizon / self.occupation_step;
        if (ratio - ratio.round()).abs() > 1e-9 * ratio.max(1.0) {
            return Err(invalid(
                "occupation_step",
                format!("T / δ = {ratio} is not an integer"),
            ));
        }
        let r_phi = phi.support_radius(1e-8);
        if !(self.window_halfwidth >= r_phi) {
            return Err(invalid(
                "window_halfwidth",
                format!("{} is below the test-function radius {r_phi}", self.window_halfwidth),
            ));
        }
        Ok(())
    }

    /// Number of record steps `T / δ`.
    pub fn steps(&self) -> usize {
        (self.horizon / self.occupation_step).round() as usize
    }
}

/// A live particle. `updated_at` is the time `position` refers to.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Particle {
    pub position: f64,
    pub updated_at: f64,
    /// Absolute time of the next branching event (`+∞` without branching).
    pub next_branch_time: f64,
}

/// `v_k = <N(kδ), φ>` for `k = 0..=T/δ`.
#[derive(Debug, Clone, PartialEq)]
pub struct OccupationRecord {
    pub step: f64,
    pub values: Vec<f64>,
}

impl OccupationRecord {
    pub fn time(&self, k: usize) -> f64 {
        k as f64 * self.step
    }

    pub fn horizon(&self) -> f64 {
        self.time(self.values.len() - 1)
    }

    /// CSV with header `s,value`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(w, "s,value")?;
        for (k, v) in self.values.iter().enumerate() {
            writeln!(w, "{},{}", self.time(k), v)?;
        }
        w.flush()?;
        Ok(())
    }
}

#[inline]
fn clock<R: Rng + ?Sized>(gamma: f64, rng: &mut R) -> f64 {
    if gamma > 0.0 {
        let e: f64 = Exp1.sample(rng);
        e / gamma
    } else {
        f64::INFINITY
    }
}

/// Poisson(2L) particles uniform on `[-L, L]`, each with an Exp(γ) clock.
pub fn init_population<R: Rng + ?Sized>(half_width: f64, gamma: f64, rng: &mut R) -> Result<Vec<Particle>> {
    if !(half_width > 0.0 && half_width.is_finite()) {
        return Err(invalid("window_halfwidth", format!("{half_width} must be > 0")));
    }
    let count = Poisson::new(2.0 * half_width)
        .map_err(|e| invalid("window_halfwidth", e.to_string()))?
        .sample(rng) as usize;
    Ok((0..count)
        .map(|_| {
            let position = half_width * (2.0 * rng.gen::<f64>() - 1.0);
            Particle {
                position,
                updated_at: 0.0,
                next_branch_time: clock(gamma, rng),
            }
        })
        .collect())
}

/// Offspring number from `g(s, x) = s + σ(x)(1 - s)^2`: 0 and 2 with
/// probability σ each, 1 otherwise. σ = 0 consumes no randomness.
#[inline]
pub fn offspring_count<R: Rng + ?Sized>(sigma_x: f64, rng: &mut R) -> Result<u8> {
    if !(0.0..=0.5).contains(&sigma_x) {
        return Err(invalid("sigma_x", format!("{sigma_x} is outside [0, 1/2]")));
    }
    Ok(draw_offspring(sigma_x, rng))
}

#[inline]
fn draw_offspring<R: Rng + ?Sized>(sigma_x: f64, rng: &mut R) -> u8 {
    if sigma_x == 0.0 {
        return 1;
    }
    let u: f64 = rng.gen();
    if u < sigma_x {
        0
    } else if u < 1.0 - sigma_x {
        1
    } else {
        2
    }
}

/// Knobs that do not change the law of the record.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvolveOptions {
    /// Abort when the live population exceeds this.
    pub population_cap: usize,
    /// Skip branching clocks entirely when σ ≡ 0.
    pub skip_noop_branching: bool,
}

impl Default for EvolveOptions {
    fn default() -> Self {
        Self {
            population_cap: 1_000_000,
            skip_noop_branching: true,
        }
    }
}

/// Event counters from one replication.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct EvolveStats {
    pub initial_population: usize,
    pub clock_rings: u64,
    pub deaths: u64,
    pub births: u64,
    pub peak_population: usize,
    /// Largest `|x|` at which a non-trivial branching (0 or 2 offspring) occurred.
    pub max_abs_branch_position: f64,
}

/// Simulate one replication on `[0, T]` and record `<N(kδ), φ>`.
pub fn evolve<R: Rng + ?Sized>(
    params: &ModelParams,
    phi: &TestFunction,
    options: &EvolveOptions,
    rng: &mut R,
) -> Result<OccupationRecord> {
    evolve_with_stats(params, phi, options, 0, rng).map(|(r, _)| r)
}

/// [`evolve`] returning event counters; `rep` labels explosion errors.
pub fn evolve_with_stats<R: Rng + ?Sized>(
    params: &ModelParams,
    phi: &TestFunction,
    options: &EvolveOptions,
    rep: u64,
    rng: &mut R,
) -> Result<(OccupationRecord, EvolveStats)> {
    params.validate(phi)?;
    let sampler = StableSampler::new(params.alpha)?;
    let sigma = &params.sigma;
    let gamma = if options.skip_noop_branching && sigma.is_zero() {
        0.0
    } else {
        params.gamma
    };
    let steps = params.steps();
    let delta = params.occupation_step;
    let step_scale = sampler.scale(delta);

    let mut pop = init_population(params.window_halfwidth, gamma, rng)?;
    let mut alive = vec![true; pop.len()];
    let mut dead = 0usize;
    let mut stats = EvolveStats {
        initial_population: pop.len(),
        peak_population: pop.len(),
        ..Default::default()
    };
    let mut values = Vec::with_capacity(steps + 1);
    values.push(pop.iter().map(|p| phi.eval(p.position)).sum());

    for k in 1..=steps {
        let now = k as f64 * delta;
        let mut acc = 0.0;
        let mut i = 0;
        while i < pop.len() {
            if !alive[i] {
                i += 1;
                continue;
            }
            let mut p = pop[i];
            let mut survived = true;
            // A ring exactly at `now` is handled after the record (next step).
            while p.next_branch_time < now {
                let dt = p.next_branch_time - p.updated_at;
                if dt > 0.0 {
                    p.position += sampler.sample(dt, rng);
                }
                p.updated_at = p.next_branch_time;
                stats.clock_rings += 1;
                match draw_offspring(sigma.eval(p.position), rng) {
                    0 => {
                        stats.deaths += 1;
                        stats.max_abs_branch_position = stats.max_abs_branch_position.max(p.position.abs());
                        survived = false;
                        break;
                    }
                    1 => p.next_branch_time = p.updated_at + clock(gamma, rng),
                    _ => {
                        stats.births += 1;
                        stats.max_abs_branch_position = stats.max_abs_branch_position.max(p.position.abs());
                        p.next_branch_time = p.updated_at + clock(gamma, rng);
                        let child = Particle {
                            position: p.position,
                            updated_at: p.updated_at,
                            next_branch_time: p.updated_at + clock(gamma, rng),
                        };
                        pop.push(child);
                        alive.push(true);
                    }
                }
            }
            if survived {
                let dt = now - p.updated_at;
                if dt == delta {
                    p.position += step_scale * sampler.sample_unit(rng);
                } else if dt > 0.0 {
                    p.position += sampler.sample(dt, rng);
                }
                p.updated_at = now;
                acc += phi.eval(p.position);
            } else {
                alive[i] = false;
                dead += 1;
            }
            pop[i] = p;
            i += 1;
        }
        values.push(acc);

        let live = pop.len() - dead;
        stats.peak_population = stats.peak_population.max(live);
        if live > options.population_cap {
            return Err(Error::Explosion {
                rep,
                count: live,
                cap: options.population_cap,
            });
        }
        if 2 * dead > pop.len() {
            let mut flags = alive.iter();
            pop.retain(|_| *flags.next().unwrap());
            alive.clear();
            alive.resize(pop.len(), true);
            dead = 0;
        }
    }
    Ok((OccupationRecord { step: delta, values }, stats))
}
