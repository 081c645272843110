//! Discrete noise schedule, IKL weights and bridge coefficients.
//!
//! The continuous rate `β(τ)`, `τ ∈ [0, 1]`, is the piecewise-linear
//! interpolation of `T·β_i` placed at `τ_i = (i-1)/(T-1)`. Scaling by `T`
//! makes `exp(-∫₀¹ β)` track the discrete `ᾱ_T`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{ImageGrid, RangeTag};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleParams {
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleParams {
    fn default() -> Self {
        Self { timesteps: 400, beta_start: 1e-4, beta_end: 0.02 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScheduleTable {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
    /// Knot values of the continuous rate.
    rate: Vec<f64>,
    /// `∫₀^{τ_i} β` at each knot.
    cumulative: Vec<f64>,
    beta_total: f64,
}

/// Linearly spaced betas from `beta_start` to `beta_end`.
pub fn linear_schedule(timesteps: usize, beta_start: f64, beta_end: f64) -> Result<ScheduleTable> {
    if timesteps == 0 {
        return Err(Error::InvalidArgument("schedule needs at least one timestep".into()));
    }
    if !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})"
        )));
    }
    let betas = if timesteps == 1 {
        vec![beta_start]
    } else {
        let step = (beta_end - beta_start) / (timesteps - 1) as f64;
        (0..timesteps).map(|i| beta_start + step * i as f64).collect()
    };
    ScheduleTable::from_betas(betas)
}

impl ScheduleTable {
    pub fn from_params(p: &ScheduleParams) -> Result<Self> {
        linear_schedule(p.timesteps, p.beta_start, p.beta_end)
    }

    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::InvalidArgument("empty beta schedule".into()));
        }
        if let Some(b) = betas.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(Error::InvalidArgument(format!("beta {b} outside (0, 1)")));
        }
        let t = betas.len();
        let mut alpha_bars = Vec::with_capacity(t);
        let mut acc = 1.0;
        for b in &betas {
            acc *= 1.0 - b;
            alpha_bars.push(acc);
        }
        let rate: Vec<f64> = betas.iter().map(|b| b * t as f64).collect();
        let (cumulative, beta_total) = if t == 1 {
            (vec![0.0], rate[0])
        } else {
            let dt = 1.0 / (t - 1) as f64;
            let mut cum = Vec::with_capacity(t);
            let mut acc = 0.0;
            cum.push(0.0);
            for w in rate.windows(2) {
                acc += 0.5 * (w[0] + w[1]) * dt;
                cum.push(acc);
            }
            (cum, acc)
        };
        Ok(Self { betas, alpha_bars, rate, cumulative, beta_total })
    }

    pub fn timesteps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    /// `∫₀¹ β(τ) dτ`
    pub fn beta_total(&self) -> f64 {
        self.beta_total
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.timesteps() {
            return Err(Error::OutOfRange(format!("timestep {t} outside 1..={}", self.timesteps())));
        }
        Ok(())
    }

    /// `ᾱ_t` for `1 ≤ t ≤ T`.
    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.check_t(t)?;
        Ok(self.alpha_bars[t - 1])
    }

    /// Noise level `√(1-ᾱ_t)`.
    pub fn sigma(&self, t: usize) -> Result<f64> {
        Ok((1.0 - self.alpha_bar(t)?).sqrt())
    }

    /// `w(t) = √ᾱ_t / √(1-ᾱ_t)`
    pub fn ikl_weight(&self, t: usize) -> Result<f64> {
        let ab = self.alpha_bar(t)?;
        Ok(ab.sqrt() / (1.0 - ab).sqrt())
    }

    /// Continuous rate `β(τ)`.
    pub fn rate(&self, tau: f64) -> f64 {
        let t = self.timesteps();
        if t == 1 {
            return self.rate[0];
        }
        let pos = tau.clamp(0.0, 1.0) * (t - 1) as f64;
        let i = (pos.floor() as usize).min(t - 2);
        let f = pos - i as f64;
        self.rate[i] * (1.0 - f) + self.rate[i + 1] * f
    }

    /// `∫₀^a β(τ) dτ`, exact per linear piece.
    pub fn integrated_rate(&self, a: f64) -> f64 {
        let t = self.timesteps();
        if a <= 0.0 {
            return 0.0;
        }
        if a >= 1.0 {
            return self.beta_total;
        }
        if t == 1 {
            return self.rate[0] * a;
        }
        let dt = 1.0 / (t - 1) as f64;
        let pos = a * (t - 1) as f64;
        let i = (pos.floor() as usize).min(t - 2);
        let f = pos - i as f64;
        let (r0, r1) = (self.rate[i], self.rate[i + 1]);
        // ∫ over [τ_i, τ_i + f·dt] of r0 + (r1-r0)s/dt
        self.cumulative[i] + dt * (r0 * f + 0.5 * (r1 - r0) * f * f)
    }

    /// `(σ_a, σ̄_a)` for a bridge position `a ∈ [0, 1]`.
    pub fn bridge_coeffs(&self, a: f64) -> Result<(f64, f64)> {
        if !(0.0..=1.0).contains(&a) {
            return Err(Error::OutOfRange(format!("bridge position {a} outside [0, 1]")));
        }
        let head = self.integrated_rate(a);
        let sigma_a = (self.beta_total - head) / self.beta_total;
        let sigma_bar = (1.0 - (-head).exp()).sqrt();
        Ok((sigma_a, sigma_bar))
    }

    /// `√ᾱ_t x0 + √(1-ᾱ_t) z`
    pub fn diffuse(&self, x0: &ImageGrid, t: usize, z: &ImageGrid) -> Result<ImageGrid> {
        x0.ensure_same_dims(z, "diffuse")?;
        let mut out = vec![0.0; x0.len()];
        self.diffuse_into(x0.values(), t, z.values(), &mut out)?;
        ImageGrid::new(x0.dims(), out, RangeTag::Unbounded)
    }

    pub fn diffuse_into(&self, x0: &[f64], t: usize, z: &[f64], out: &mut [f64]) -> Result<()> {
        let ab = self.alpha_bar(t)?;
        let (s, n) = (ab.sqrt(), (1.0 - ab).sqrt());
        for ((o, x), e) in out.iter_mut().zip(x0).zip(z) {
            *o = s * x + n * e;
        }
        Ok(())
    }
}
