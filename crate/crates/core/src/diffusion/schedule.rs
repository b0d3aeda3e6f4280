use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Linear-beta DDPM noise schedule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    #[serde(skip)]
    betas: Vec<f64>,
    #[serde(skip)]
    alpha_bars: Vec<f64>,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self::linear(200, 1e-4, 0.02)
    }
}

impl NoiseSchedule {
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Self {
        assert!(steps >= 2, "schedule needs at least two steps");
        assert!(0.0 < beta_start && beta_start < beta_end && beta_end < 1.0, "betas must increase inside (0, 1)");
        let betas: Vec<f64> =
            (0..steps).map(|i| beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64).collect();
        let mut alpha_bars = Vec::with_capacity(steps);
        let mut prod = 1.0;
        for b in &betas {
            prod *= 1.0 - b;
            alpha_bars.push(prod);
        }
        Self { steps, beta_start, beta_end, betas, alpha_bars }
    }

    /// Recomputes derived arrays after deserialisation.
    pub fn rebuilt(&self) -> Self {
        Self::linear(self.steps, self.beta_start, self.beta_end)
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas(&self) -> Vec<f64> {
        self.betas.iter().map(|b| 1.0 - b).collect()
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t >= self.steps {
            return Err(Error::Argument(format!("timestep {t} outside [0, {})", self.steps)));
        }
        Ok(())
    }

    /// Forward noising `sqrt(abar_t) x0 + sqrt(1 - abar_t) eps`.
    pub fn q_sample(&self, x0: &[f32], t: usize, eps: &[f32]) -> Result<Vec<f32>> {
        self.check_t(t)?;
        if x0.len() != eps.len() {
            return Err(Error::Shape(format!("x0 has {} values, eps {}", x0.len(), eps.len())));
        }
        let a = self.alpha_bars[t].sqrt() as f32;
        let s = (1.0 - self.alpha_bars[t]).sqrt() as f32;
        Ok(x0.iter().zip(eps).map(|(&x, &e)| a * x + s * e).collect())
    }

    /// Descending timesteps visited by an `n`-step sampler: evenly strided
    /// over `[0, T)`, stride 1 when `n == T`.
    pub fn sampling_timesteps(&self, n: usize) -> Result<Vec<usize>> {
        if n == 0 || n > self.steps {
            return Err(Error::Argument(format!("sampling steps {n} must be in [1, {}]", self.steps)));
        }
        if n == 1 {
            return Ok(vec![self.steps - 1]);
        }
        let mut ts: Vec<usize> =
            (0..n).map(|i| ((i * (self.steps - 1)) as f64 / (n - 1) as f64).round() as usize).collect();
        ts.dedup();
        ts.reverse();
        Ok(ts)
    }

    /// Ancestral update from `t` to `t_prev` (`None` = final step) given the
    /// predicted noise. Returns the new sample; `noise` is only used when a
    /// previous step remains.
    pub fn step(&self, x_t: &[f32], eps_hat: &[f32], t: usize, t_prev: Option<usize>, noise: &[f32]) -> Vec<f32> {
        let ab = self.alpha_bars[t];
        let ab_prev = t_prev.map_or(1.0, |p| self.alpha_bars[p]);
        let beta = 1.0 - ab / ab_prev;
        let sqrt_ab = ab.sqrt();
        let sqrt_1m = (1.0 - ab).sqrt();
        let c0 = ab_prev.sqrt() * beta / (1.0 - ab);
        let ct = (1.0 - beta).sqrt() * (1.0 - ab_prev) / (1.0 - ab);
        let sigma = ((1.0 - ab_prev) / (1.0 - ab) * beta).max(0.0).sqrt();
        x_t.iter()
            .zip(eps_hat)
            .enumerate()
            .map(|(i, (&x, &e))| {
                let x0 = ((x as f64 - sqrt_1m * e as f64) / sqrt_ab).clamp(-1.0, 1.0);
                let mean = c0 * x0 + ct * x as f64;
                match t_prev {
                    Some(_) => (mean + sigma * noise[i] as f64) as f32,
                    None => mean as f32,
                }
            })
            .collect()
    }
}
