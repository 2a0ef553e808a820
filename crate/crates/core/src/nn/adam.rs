use serde::{Deserialize, Serialize};

use super::layers::Gradients;

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    /// DCGAN settings: betas (0.5, 0.999).
    pub fn dcgan(lr: f64) -> Self {
        Self::new(lr, 0.5, 0.999, 1e-8)
    }

    pub fn new(lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// Applies one update to `params` in place.
    pub fn update(&mut self, mut params: Vec<&mut Vec<f64>>, grads: &Gradients) {
        if self.m.is_empty() {
            self.m = grads.tensors.iter().map(|g| vec![0.0; g.len()]).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (i, p) in params.iter_mut().enumerate() {
            let g = &grads.tensors[i];
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..p.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                p[j] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr() {
        // With bias correction the first step is lr * g/|g| (up to eps).
        let mut p = vec![1.0, -2.0];
        let g = Gradients {
            tensors: vec![vec![0.5, -3.0]],
        };
        let mut opt = Adam::dcgan(0.1);
        opt.update(vec![&mut p], &g);
        assert!((p[0] - 0.9).abs() < 1e-6);
        assert!((p[1] + 1.9).abs() < 1e-6);
    }

    #[test]
    fn zero_learning_rate_is_a_no_op() {
        let mut p = vec![0.25; 4];
        let g = Gradients {
            tensors: vec![vec![1.0, -1.0, 2.0, 0.0]],
        };
        let mut opt = Adam::dcgan(0.0);
        opt.update(vec![&mut p], &g);
        assert_eq!(p, vec![0.25; 4]);
    }
}
