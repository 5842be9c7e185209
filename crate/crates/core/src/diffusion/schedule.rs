use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Linear β endpoints of the standard 1000-step DDPM schedule.
pub const REFERENCE_BETA_START: f64 = 1e-4;
pub const REFERENCE_BETA_END: f64 = 0.02;
pub const REFERENCE_STEPS: usize = 1000;
pub const DEFAULT_STEPS: usize = 40;

/// ᾱ_T must fall below this for the default schedule.
pub const MAX_FINAL_ALPHA_BAR: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub t_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl ScheduleConfig {
    /// The reference endpoints rescaled by `REFERENCE_STEPS / t_steps`, which
    /// keeps the total noise injected (Σβ) equal to the 1000-step schedule.
    pub fn rescaled(t_steps: usize) -> Self {
        let k = REFERENCE_STEPS as f64 / t_steps as f64;
        Self {
            t_steps,
            beta_start: REFERENCE_BETA_START * k,
            beta_end: REFERENCE_BETA_END * k,
        }
    }
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self::rescaled(DEFAULT_STEPS)
    }
}

/// β, α and ᾱ for steps `1..=T`; index 0 of `alpha_bar` holds ᾱ_0 = 1.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    /// Linear schedule from `beta_start` to `beta_end` over `t_steps` steps.
    pub fn linear(t_steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if t_steps == 0 {
            return Err(Error::Domain("schedule needs at least one step".into()));
        }
        if t_steps > 1 && beta_end <= beta_start {
            return Err(Error::Domain(format!(
                "beta must increase: {beta_start} -> {beta_end}"
            )));
        }
        let betas: Vec<f64> = (0..t_steps)
            .map(|i| {
                if t_steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (t_steps - 1) as f64
                }
            })
            .collect();
        if betas.iter().any(|b| !(*b > 0.0 && *b < 1.0)) {
            return Err(Error::Domain(format!("betas must lie in (0, 1): {betas:?}")));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = vec![1.0];
        for a in &alphas {
            let last = *alpha_bars.last().expect("non-empty");
            alpha_bars.push(last * a);
        }
        Ok(Self {
            betas,
            alphas,
            alpha_bars,
        })
    }

    /// Builds from config and requires ᾱ_T < 0.05.
    pub fn from_config(cfg: &ScheduleConfig) -> Result<Self> {
        let s = Self::linear(cfg.t_steps, cfg.beta_start, cfg.beta_end)?;
        let last = s.alpha_bar(s.steps());
        if last >= MAX_FINAL_ALPHA_BAR {
            return Err(Error::Domain(format!(
                "final alpha_bar {last:.4} leaves too much signal (need < {MAX_FINAL_ALPHA_BAR})"
            )));
        }
        Ok(s)
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::Step { t, max: self.steps() });
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    /// ᾱ_t, with ᾱ_0 = 1.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    /// Posterior variance β̃_t = β_t (1 − ᾱ_{t−1}) / (1 − ᾱ_t).
    pub fn posterior_variance(&self, t: usize) -> f64 {
        self.beta(t) * (1.0 - self.alpha_bar(t - 1)) / (1.0 - self.alpha_bar(t))
    }
}
