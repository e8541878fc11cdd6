use serde::{Deserialize, Serialize};

use crate::model::{Parameters, TrainedModel};

/// Adam over the model's trainable tensors, flattened in visiting order.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub grad_clip: Option<f64>,
    step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(weight_decay: f64, grad_clip: Option<f64>) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            grad_clip,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update; the backbone moves only if it is trainable.
    pub fn step(&mut self, model: &mut TrainedModel, grads: &Parameters, lr: f64) {
        let include_backbone = model.backbone_trainable();
        let mut g = grads.flatten(include_backbone);
        if self.m.len() != g.len() {
            self.m = vec![0.0; g.len()];
            self.v = vec![0.0; g.len()];
        }
        if self.weight_decay != 0.0 {
            let theta = model.params.flatten(include_backbone);
            for (gi, t) in g.iter_mut().zip(&theta) {
                *gi += self.weight_decay * t;
            }
        }
        if let Some(max_norm) = self.grad_clip {
            let norm = g.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > max_norm {
                let s = max_norm / norm;
                g.iter_mut().for_each(|x| *x *= s);
            }
        }
        self.step += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        for i in 0..g.len() {
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g[i];
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * g[i] * g[i];
        }
        let (m, v, eps) = (&self.m, &self.v, self.eps);
        let mut pos = 0;
        model.params.visit_mut(include_backbone, &mut |_, t| {
            for x in t.iter_mut() {
                let m_hat = m[pos] / c1;
                let v_hat = v[pos] / c2;
                *x -= lr * m_hat / (v_hat.sqrt() + eps);
                pos += 1;
            }
        });
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SchedulerConfig {
    pub patience: usize,
    pub factor: f64,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        Self {
            patience: 5,
            factor: 0.1,
        }
    }
}

/// Reduce-on-plateau on validation loss. An epoch improves when its loss is
/// strictly below the best so far; after `patience` consecutive epochs
/// without improvement the rate is multiplied by `factor` and the count
/// restarts.
#[derive(Clone, Debug)]
pub struct PlateauScheduler {
    config: SchedulerConfig,
    lr: f64,
    best: f64,
    bad_epochs: usize,
}

impl PlateauScheduler {
    pub fn new(lr0: f64, config: SchedulerConfig) -> Self {
        Self {
            config,
            lr: lr0,
            best: f64::INFINITY,
            bad_epochs: 0,
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn bad_epochs(&self) -> usize {
        self.bad_epochs
    }

    /// Records one epoch's validation loss and returns the rate for the next.
    pub fn step(&mut self, val_loss: f64) -> f64 {
        if val_loss < self.best {
            self.best = val_loss;
            self.bad_epochs = 0;
        } else {
            self.bad_epochs += 1;
            if self.bad_epochs >= self.config.patience {
                self.lr *= self.config.factor;
                self.bad_epochs = 0;
            }
        }
        self.lr
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn five_flat_epochs_reduce_once() {
        let mut s = PlateauScheduler::new(0.001, SchedulerConfig::default());
        assert_eq!(s.step(1.0), 0.001);
        for _ in 0..4 {
            assert_eq!(s.step(1.0), 0.001);
        }
        let lr = s.step(1.0);
        assert_eq!(lr, 0.001 * 0.1);
        assert!((lr - 0.0001).abs() < 1e-18);
        for _ in 0..4 {
            assert_eq!(s.step(2.0), lr);
        }
    }

    #[test]
    fn improvement_resets_the_count() {
        let mut s = PlateauScheduler::new(1.0, SchedulerConfig::default());
        s.step(5.0);
        for _ in 0..4 {
            s.step(6.0);
        }
        s.step(4.0);
        assert_eq!(s.bad_epochs(), 0);
        for _ in 0..4 {
            assert_eq!(s.step(4.0), 1.0);
        }
    }

    proptest! {
        #[test]
        fn never_increases_and_steps_by_factor(losses in prop::collection::vec(0.0f64..2.0, 1..60)) {
            let mut s = PlateauScheduler::new(0.001, SchedulerConfig::default());
            let mut prev = s.lr();
            let mut run = 0usize;
            let mut best = f64::INFINITY;
            for l in losses {
                if l < best { best = l; run = 0 } else { run += 1 }
                let lr = s.step(l);
                prop_assert!(lr == prev || lr == prev * 0.1);
                if lr != prev {
                    prop_assert!(run >= 5);
                    run = 0;
                }
                prev = lr;
            }
        }
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        use crate::model::{ClassifierConfig, FeatureExtractorSpec};
        let mut spec = FeatureExtractorSpec::resnext101();
        spec.raw_feature_dim = 3;
        let config = ClassifierConfig {
            feature_dim: 2,
            lstm_hidden: 2,
            num_classes: 2,
            ..ClassifierConfig::default()
        };
        let mut model = TrainedModel::new(spec, config, 0).unwrap();
        let before = model.params.flatten(false);
        let mut g = model.params.zeros_like();
        g.head_fc.bias[0] = 0.5;
        let mut adam = Adam::new(0.0, None);
        adam.step(&mut model, &g, 0.01);
        let after = model.params.flatten(false);
        let moved: Vec<usize> = (0..before.len()).filter(|&i| before[i] != after[i]).collect();
        assert_eq!(moved.len(), 1);
        let i = moved[0];
        assert!((before[i] - after[i] - 0.01).abs() < 1e-9);
    }
}
