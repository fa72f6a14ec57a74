use serde::{Deserialize, Serialize};

use super::Param;

/// Adam hyperparameters. Defaults are the usual `(0.9, 0.999, 1e-8)` with no
/// weight decay.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: u64,
    pub first: Vec<Vec<f32>>,
    pub second: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self { config, step: 0, first: Vec::new(), second: Vec::new() }
    }

    /// One update over the trainable params, in the order given.
    pub fn update(&mut self, params: &mut [&mut Param], lr: f64) {
        let trainable: Vec<&mut &mut Param> = params.iter_mut().filter(|p| p.trainable).collect();
        if self.first.is_empty() {
            self.first = trainable.iter().map(|p| vec![0.0; p.numel()]).collect();
            self.second = self.first.clone();
        }
        assert_eq!(self.first.len(), trainable.len(), "optimizer state does not match parameter list");
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        let step_size = (lr / bc1) as f32;
        let (b1, b2) = (beta1 as f32, beta2 as f32);
        let bc2_sqrt = bc2.sqrt() as f32;
        for (k, p) in trainable.into_iter().enumerate() {
            let m = &mut self.first[k];
            let v = &mut self.second[k];
            for i in 0..p.value.len() {
                let g = p.grad[i];
                m[i] = b1 * m[i] + (1.0 - b1) * g;
                v[i] = b2 * v[i] + (1.0 - b2) * g * g;
                let denom = v[i].sqrt() / bc2_sqrt + eps as f32;
                p.value[i] -= step_size * m[i] / denom;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimises_a_quadratic() {
        let mut p = Param::new("x", vec![2], vec![3.0, -2.0], true);
        let mut opt = Adam::new(AdamConfig::default());
        for _ in 0..2000 {
            p.grad = p.value.iter().map(|x| 2.0 * x).collect();
            opt.update(&mut [&mut p], 0.01);
        }
        assert!(p.value.iter().all(|x| x.abs() < 1e-2), "{:?}", p.value);
    }

    #[test]
    fn zero_lr_leaves_values_untouched() {
        let mut p = Param::new("x", vec![3], vec![0.1, 0.2, 0.3], true);
        let before = p.value.clone();
        let mut opt = Adam::new(AdamConfig::default());
        p.grad = vec![1.0, -1.0, 5.0];
        opt.update(&mut [&mut p], 0.0);
        assert_eq!(p.value, before);
    }

    #[test]
    fn skips_buffers() {
        let mut p = Param::new("w", vec![1], vec![1.0], true);
        let mut b = Param::new("running_mean", vec![1], vec![1.0], false);
        p.grad = vec![1.0];
        b.grad = vec![1.0];
        let mut opt = Adam::new(AdamConfig::default());
        opt.update(&mut [&mut p, &mut b], 0.1);
        assert_eq!(b.value, vec![1.0]);
        assert!(p.value[0] < 1.0);
        assert_eq!(opt.first.len(), 1);
    }
}
