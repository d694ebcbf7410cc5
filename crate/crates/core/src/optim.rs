//! AdamW with decoupled weight decay and a cosine learning-rate schedule.

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::params::{GradMap, ParamGroup};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct AdamWConfig {
    pub base_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
    /// Total optimizer steps the cosine schedule spans.
    pub total_steps: u64,
}

impl AdamWConfig {
    pub fn new(base_lr: f64, total_steps: u64) -> Self {
        AdamWConfig {
            base_lr,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.01,
            total_steps,
        }
    }
}

/// Cosine decay without warmup: full rate at step 0, zero at `total_steps`.
pub fn cosine_lr(base_lr: f64, step: u64, total_steps: u64) -> f64 {
    base_lr * 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / total_steps as f64).cos())
}

pub struct AdamW {
    config: AdamWConfig,
    step_count: u64,
    first_moment: IndexMap<String, Tensor>,
    second_moment: IndexMap<String, Tensor>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Result<Self> {
        if config.base_lr <= 0.0 {
            return Err(Error::Config("base_lr must be positive".into()));
        }
        if config.weight_decay < 0.0 {
            return Err(Error::Config("weight_decay must be non-negative".into()));
        }
        if config.total_steps == 0 {
            return Err(Error::Config("total_steps must be positive".into()));
        }
        if !(0.0..1.0).contains(&config.beta1) || !(0.0..1.0).contains(&config.beta2) {
            return Err(Error::Config("betas must lie in [0, 1)".into()));
        }
        Ok(AdamW {
            config,
            step_count: 0,
            first_moment: IndexMap::new(),
            second_moment: IndexMap::new(),
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn config(&self) -> &AdamWConfig {
        &self.config
    }

    /// Learning rate the next `step` call will use.
    pub fn effective_lr(&self) -> f64 {
        cosine_lr(self.config.base_lr, self.step_count, self.config.total_steps)
    }

    /// One decoupled-weight-decay Adam update with bias correction.
    /// Parameters missing from `grads` are treated as having zero gradient.
    pub fn step(&mut self, params: &mut dyn ParamGroup, grads: &GradMap) -> Result<()> {
        if self.step_count >= self.config.total_steps {
            return Err(Error::ScheduleExhausted {
                step: self.step_count,
                total: self.config.total_steps,
            });
        }
        let lr = self.effective_lr();
        let t = (self.step_count + 1) as i32;
        let beta1 = self.config.beta1;
        let beta2 = self.config.beta2;
        let bias1 = 1.0 - beta1.powi(t);
        let bias2 = 1.0 - beta2.powi(t);
        let eps = self.config.epsilon;
        let decay_factor = 1.0 - lr * self.config.weight_decay;

        let mut divergent: Option<String> = None;
        for (name, g) in grads {
            if !g.is_finite() {
                divergent = Some(name.clone());
                break;
            }
        }
        if let Some(name) = divergent {
            return Err(Error::TrainingDivergence { name });
        }

        let first = &mut self.first_moment;
        let second = &mut self.second_moment;
        let mut err: Option<Error> = None;
        params.for_each_mut(&mut |name, theta| {
            if err.is_some() {
                return;
            }
            let (r, c) = theta.shape();
            let zero = Tensor::zeros(r, c);
            let g = grads.get(name).unwrap_or(&zero);
            if g.shape() != (r, c) {
                err = Some(Error::ShapeMismatch {
                    op: "adamw_step",
                    left_rows: r,
                    left_cols: c,
                    right_rows: g.rows(),
                    right_cols: g.cols(),
                });
                return;
            }
            let m = first
                .entry(name.to_string())
                .or_insert_with(|| Tensor::zeros(r, c));
            let v = second
                .entry(name.to_string())
                .or_insert_with(|| Tensor::zeros(r, c));
            let td = theta.data_mut();
            for i in 0..td.len() {
                let gi = g.data()[i];
                let mi = beta1 * m.data()[i] + (1.0 - beta1) * gi;
                let vi = beta2 * v.data()[i] + (1.0 - beta2) * gi * gi;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                let m_hat = mi / bias1;
                let v_hat = vi / bias2;
                td[i] = td[i] * decay_factor - lr * m_hat / (v_hat.sqrt() + eps);
            }
        });
        if let Some(e) = err {
            return Err(e);
        }
        self.step_count += 1;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamBag;

    fn bag(values: &[f64]) -> ParamBag {
        let mut b = ParamBag::new();
        b.insert("w", Tensor::row(values));
        b
    }

    #[test]
    fn zero_grad_zero_decay_leaves_params_unchanged() {
        let mut params = bag(&[1.5, -0.25, 3.0]);
        let mut cfg = AdamWConfig::new(4e-5, 10);
        cfg.weight_decay = 0.0;
        let mut opt = AdamW::new(cfg).unwrap();
        let mut grads = GradMap::new();
        grads.insert("w".into(), Tensor::row(&[0.0, 0.0, 0.0]));
        opt.step(&mut params, &grads).unwrap();
        assert_eq!(params.get("w").unwrap().data(), &[1.5, -0.25, 3.0]);
    }

    #[test]
    fn schedule_endpoints() {
        // Paper default learning rate 4e-5 at step 0, zero at the end.
        assert_eq!(cosine_lr(4e-5, 0, 100), 4e-5);
        let end = cosine_lr(4e-5, 100, 100);
        assert!(end.abs() < 1e-20, "lr at the endpoint was {end}");
        assert!((cosine_lr(1.0, 50, 100) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn zero_grad_decay_shrinks_exactly() {
        let start = [2.0, -8.0, 0.5];
        let mut params = bag(&start);
        let mut cfg = AdamWConfig::new(0.1, 4);
        cfg.weight_decay = 0.2;
        let mut opt = AdamW::new(cfg).unwrap();
        let lr_eff = opt.effective_lr();
        let mut grads = GradMap::new();
        grads.insert("w".into(), Tensor::row(&[0.0, 0.0, 0.0]));
        opt.step(&mut params, &grads).unwrap();
        let factor = 1.0 - lr_eff * 0.2;
        for (after, before) in params.get("w").unwrap().data().iter().zip(&start) {
            assert_eq!(*after, before * factor);
        }
    }

    #[test]
    fn nan_gradient_reports_parameter_name() {
        let mut params = bag(&[1.0]);
        let mut opt = AdamW::new(AdamWConfig::new(1e-3, 10)).unwrap();
        let mut grads = GradMap::new();
        grads.insert("w".into(), Tensor::row(&[f64::NAN]));
        match opt.step(&mut params, &grads) {
            Err(Error::TrainingDivergence { name }) => assert_eq!(name, "w"),
            other => panic!("expected divergence error, got {other:?}"),
        }
    }

    #[test]
    fn step_past_schedule_is_rejected() {
        let mut params = bag(&[1.0]);
        let mut opt = AdamW::new(AdamWConfig::new(1e-3, 1)).unwrap();
        let grads = GradMap::new();
        opt.step(&mut params, &grads).unwrap();
        assert_eq!(opt.step_count(), 1);
        assert!(matches!(
            opt.step(&mut params, &grads),
            Err(Error::ScheduleExhausted { .. })
        ));
    }

    #[test]
    fn descends_a_quadratic() {
        // Minimize (w - 3)^2; gradient 2(w - 3).
        let mut params = bag(&[0.0]);
        let mut cfg = AdamWConfig::new(0.3, 200);
        cfg.weight_decay = 0.0;
        let mut opt = AdamW::new(cfg).unwrap();
        for _ in 0..200 {
            let w = params.get("w").unwrap().data()[0];
            let mut grads = GradMap::new();
            grads.insert("w".into(), Tensor::row(&[2.0 * (w - 3.0)]));
            opt.step(&mut params, &grads).unwrap();
        }
        let w = params.get("w").unwrap().data()[0];
        assert!((w - 3.0).abs() < 0.05, "ended at {w}");
    }
}
