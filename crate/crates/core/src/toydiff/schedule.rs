use crate::error::{Error, Result};

pub fn make_schedule(steps: usize) -> Result<DiffusionSchedule> {
    DiffusionSchedule::cosine(steps)
}

const ALPHA_BAR_FLOOR: f64 = 1e-6;

/// Cumulative signal levels `alpha_bar[t]` for `t = 0..=steps`, with
/// `alpha_bar[0] = 1` and a cosine decay toward `steps`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionSchedule {
    pub steps: usize,
    pub alpha_bar: Vec<f64>,
}

impl DiffusionSchedule {
    pub fn cosine(steps: usize) -> Result<Self> {
        if steps < 2 {
            return Err(Error::domain(format!("diffusion needs at least 2 steps, got {steps}")));
        }
        // cos²(πt/2T) written as (1 + cos(πt/T)) / 2 so that t = T/2 lands on 0.5
        let alpha_bar = (0..=steps)
            .map(|t| {
                let c = (std::f64::consts::PI * t as f64 / steps as f64).cos();
                (0.5 * (1.0 + c)).clamp(ALPHA_BAR_FLOOR, 1.0)
            })
            .collect();
        Ok(DiffusionSchedule { steps, alpha_bar })
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    /// Posterior-mean blend weight for a Gaussian prior with standard
    /// deviation `prior_std`: `a s² / (a s² + 1 - a)`.
    pub fn posterior_gain(&self, t: usize, prior_std: f64) -> f64 {
        let a = self.alpha_bar[t];
        let s2 = prior_std * prior_std;
        a * s2 / (a * s2 + 1.0 - a)
    }
}
