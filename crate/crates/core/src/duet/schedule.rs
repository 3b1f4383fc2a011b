//! Linear beta schedule and the forward noising process.

use crate::error::{domain, shape, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha(&self, t: usize) -> f64 {
        1.0 - self.betas[t]
    }

    /// Cumulative product of `1 - beta` up to and including `t`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }
}

/// `T` betas spaced linearly from `beta_start` to `beta_end`.
pub fn make_schedule(t: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if t == 0 {
        return domain("schedule needs at least one step");
    }
    if !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
        return domain(format!("need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"));
    }
    let betas: Vec<f64> = if t == 1 {
        vec![beta_start]
    } else {
        (0..t).map(|i| beta_start + (beta_end - beta_start) * i as f64 / (t - 1) as f64).collect()
    };
    let mut acc = 1.0;
    let alpha_bars = betas
        .iter()
        .map(|b| {
            acc *= 1.0 - b;
            acc
        })
        .collect();
    Ok(NoiseSchedule { betas, alpha_bars })
}

/// `sqrt(ab) * x0 + sqrt(1 - ab) * eps`.
pub fn add_noise_with(alpha_bar: f64, x0: &[f64], eps: &[f64]) -> Result<Vec<f64>> {
    if x0.len() != eps.len() {
        return shape(format!("signal has {} values, noise {}", x0.len(), eps.len()));
    }
    let (a, b) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    Ok(x0.iter().zip(eps).map(|(x, e)| a * x + b * e).collect())
}

pub fn add_noise(schedule: &NoiseSchedule, x0: &[f64], t: usize, eps: &[f64]) -> Result<Vec<f64>> {
    if t >= schedule.len() {
        return domain(format!("timestep {t} outside schedule of {}", schedule.len()));
    }
    add_noise_with(schedule.alpha_bar(t), x0, eps)
}
