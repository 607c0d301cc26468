use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BetaSchedule {
    Linear,
    /// Linear in `sqrt(beta)`, as used by latent diffusion models.
    ScaledLinear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub kind: BetaSchedule,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            beta_start: 0.00085,
            beta_end: 0.012,
            kind: BetaSchedule::ScaledLinear,
        }
    }
}

/// Discrete forward-noising schedule. Timesteps run `1..=steps`;
/// `alpha_bar(0) = 1` is the clean signal.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn new(config: &ScheduleConfig) -> Result<Self> {
        let n = config.steps;
        if n < 2 {
            return Err(Error::invalid("noise schedule needs at least two steps"));
        }
        let lerp = |a: f64, b: f64, i: usize| a + (b - a) * i as f64 / (n - 1) as f64;
        let betas: Vec<f64> = match config.kind {
            BetaSchedule::Linear => (0..n).map(|i| lerp(config.beta_start, config.beta_end, i)).collect(),
            BetaSchedule::ScaledLinear => (0..n)
                .map(|i| lerp(config.beta_start.sqrt(), config.beta_end.sqrt(), i).powi(2))
                .collect(),
        };
        Self::from_betas(betas)
    }

    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.iter().any(|b| !(*b > 0.0 && *b < 1.0)) {
            return Err(Error::invalid("every beta must lie in (0, 1)"));
        }
        let mut alphas_bar = Vec::with_capacity(betas.len() + 1);
        alphas_bar.push(1.0);
        let mut acc = 1.0;
        for b in &betas {
            acc *= 1.0 - b;
            alphas_bar.push(acc);
        }
        if alphas_bar.windows(2).any(|w| !(w[1] < w[0])) || acc <= 0.0 {
            return Err(Error::invalid("alpha_bar must be strictly decreasing and positive"));
        }
        Ok(Self { betas, alphas_bar })
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    /// `alpha_bar(t)` for `t` in `0..=steps`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alphas_bar[t]
    }

    pub fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::invalid(format!(
                "timestep {t} outside 1..={}",
                self.steps()
            )));
        }
        Ok(())
    }

    /// `sqrt(alpha_bar) clean + sqrt(1 - alpha_bar) eps`.
    pub fn add_noise(&self, clean: &Array3<f64>, t: usize, eps: &Array3<f64>) -> Result<Array3<f64>> {
        self.check_step(t)?;
        if clean.shape() != eps.shape() {
            return Err(Error::ShapeMismatch(format!(
                "clean {:?} vs noise {:?}",
                clean.shape(),
                eps.shape()
            )));
        }
        let a = self.alpha_bar(t);
        let (sa, sn) = (a.sqrt(), (1.0 - a).sqrt());
        let mut out = clean * sa;
        out.scaled_add(sn, eps);
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn schedule() -> NoiseSchedule {
        NoiseSchedule::new(&ScheduleConfig::default()).unwrap()
    }

    #[test]
    fn alpha_bar_is_monotone() {
        let s = schedule();
        assert_eq!(s.alpha_bar(0), 1.0);
        assert!((s.alpha_bar(1) - (1.0 - 0.00085)).abs() < 1e-12);
        for t in 1..=s.steps() {
            assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
            assert!(s.alpha_bar(t) > 0.0);
        }
        assert!(NoiseSchedule::from_betas(vec![0.1, 0.0]).is_err());
    }

    #[test]
    fn first_step_barely_perturbs() {
        let s = schedule();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let clean = Array3::from_shape_fn((4, 4, 3), |_| StandardNormal.sample(&mut rng));
        let eps: Array3<f64> = Array3::from_shape_fn((4, 4, 3), |_| StandardNormal.sample(&mut rng));
        let noisy = s.add_noise(&clean, 1, &eps).unwrap();
        let dev = (&noisy - &clean).mapv(|v| v * v).sum().sqrt();
        let bound = (1.0 - s.alpha_bar(1)).sqrt() * eps.mapv(|v| v * v).sum().sqrt()
            + (1.0 - s.alpha_bar(1).sqrt()) * clean.mapv(|v| v * v).sum().sqrt();
        assert!(dev <= bound + 1e-12);
        assert!(dev < 0.05 * clean.mapv(|v| v * v).sum().sqrt());
    }

    #[test]
    fn zero_signal_is_scaled_noise() {
        let s = schedule();
        let eps = Array3::from_shape_fn((2, 3, 3), |(i, j, k)| (i + 2 * j + 3 * k) as f64 - 2.0);
        let out = s.add_noise(&Array3::zeros((2, 3, 3)), 400, &eps).unwrap();
        let expected = &eps * (1.0 - s.alpha_bar(400)).sqrt();
        assert_eq!(out, expected);
    }

    #[test]
    fn noisy_variance_stays_unit() {
        let s = schedule();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let n = 100_000;
        for t in [50, 500, 950] {
            let clean = Array3::from_shape_fn((n, 1, 1), |_| StandardNormal.sample(&mut rng));
            let eps = Array3::from_shape_fn((n, 1, 1), |_| StandardNormal.sample(&mut rng));
            let noisy = s.add_noise(&clean, t, &eps).unwrap();
            let mean = noisy.mean().unwrap();
            let var = noisy.mapv(|v| (v - mean) * (v - mean)).sum() / (n - 1) as f64;
            assert!((var - 1.0).abs() < 0.02, "t={t}: variance {var}");
        }
    }

    #[test]
    fn out_of_range_step_is_rejected() {
        let s = schedule();
        let x = Array3::zeros((1, 1, 3));
        assert!(s.add_noise(&x, 0, &x).is_err());
        assert!(s.add_noise(&x, 1001, &x).is_err());
        assert!(s.add_noise(&x, 1, &Array3::zeros((1, 2, 3))).is_err());
    }
}
