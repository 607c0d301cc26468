use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-15,
        }
    }
}

/// Adam over a fixed list of parameter groups, each with its own learning rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub config: AdamConfig,
    pub group_lr: Vec<f64>,
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(config: AdamConfig, sizes: &[usize]) -> Self {
        Self {
            group_lr: vec![config.lr; sizes.len()],
            config,
            step: 0,
            m: sizes.iter().map(|n| vec![0.0; *n]).collect(),
            v: sizes.iter().map(|n| vec![0.0; *n]).collect(),
        }
    }

    pub fn set_group_lr(&mut self, group: usize, lr: f64) {
        self.group_lr[group] = lr;
    }

    pub fn scale_lr(&mut self, factor: f64) {
        for lr in &mut self.group_lr {
            *lr *= factor;
        }
    }

    pub fn step(&mut self, params: Vec<&mut [f64]>, grads: Vec<&[f64]>) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::ShapeMismatch(format!(
                "optimizer has {} groups, got {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        self.step += 1;
        let c = &self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (g_idx, (p, g)) in params.into_iter().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[g_idx], &mut self.v[g_idx]);
            if p.len() != m.len() || g.len() != m.len() {
                return Err(Error::ShapeMismatch(format!("parameter group {g_idx} changed size")));
            }
            let lr = self.group_lr[g_idx];
            for i in 0..p.len() {
                let gi = g[i];
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * gi;
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * gi * gi;
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                p[i] -= lr * mh / (vh.sqrt() + c.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut opt = Adam::new(AdamConfig { lr: 0.1, ..Default::default() }, &[2]);
        let mut p = vec![1.0, -1.0];
        opt.step(vec![&mut p], vec![&[3.0, -0.5]]).unwrap();
        assert!((p[0] - 0.9).abs() < 1e-9);
        assert!((p[1] + 0.9).abs() < 1e-9);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut opt = Adam::new(AdamConfig { lr: 0.05, ..Default::default() }, &[3]);
        let target = [0.3, -2.0, 5.0];
        let mut p = vec![0.0; 3];
        for _ in 0..2000 {
            let g: Vec<f64> = p.iter().zip(target).map(|(x, t)| 2.0 * (x - t)).collect();
            opt.step(vec![&mut p], vec![&g]).unwrap();
        }
        for (x, t) in p.iter().zip(target) {
            assert!((x - t).abs() < 1e-3);
        }
    }

    #[test]
    fn zero_gradient_never_moves() {
        let mut opt = Adam::new(AdamConfig::default(), &[2]);
        let mut p = vec![0.25, 0.5];
        for _ in 0..10 {
            opt.step(vec![&mut p], vec![&[0.0, 0.0]]).unwrap();
        }
        assert_eq!(p, vec![0.25, 0.5]);
    }
}
