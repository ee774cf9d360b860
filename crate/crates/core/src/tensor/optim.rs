//! AdamW with decoupled weight decay and a linear-warmup cosine schedule.

use std::f64::consts::PI;

use super::{ParamStore, Result, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.05,
        }
    }
}

/// Optimizer state: one pair of moment buffers per parameter slot of the
/// store it was created for. Non-trainable slots keep empty buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub step: u64,
    pub first_moment: Vec<Vec<f64>>,
    pub second_moment: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(config: AdamWConfig, params: &ParamStore) -> Self {
        let zeros = |p: &crate::tensor::Param| {
            if p.trainable {
                vec![0.0; p.value.len()]
            } else {
                Vec::new()
            }
        };
        let first_moment = params.iter().map(|(_, p)| zeros(p)).collect();
        let second_moment = params.iter().map(|(_, p)| zeros(p)).collect();
        Self {
            config,
            step: 0,
            first_moment,
            second_moment,
        }
    }

    /// Applies one update. `grads[i]` pairs with parameter slot `i`; `None`
    /// is treated as a zero gradient (decay still applies).
    pub fn step(&mut self, params: &mut ParamStore, grads: &[Option<Tensor>], lr: f64) -> Result<()> {
        if grads.len() != params.len() || self.first_moment.len() != params.len() {
            return Err(TensorError::Invalid {
                op: "adamw_step",
                msg: format!(
                    "{} gradients and {} moment slots for {} parameters",
                    grads.len(),
                    self.first_moment.len(),
                    params.len()
                ),
            });
        }
        for ((id, p), g) in params.iter().zip(grads) {
            if let Some(g) = g {
                if g.shape() != p.value.shape() {
                    return Err(TensorError::Shape {
                        op: "adamw_step",
                        lhs: p.value.shape().to_vec(),
                        rhs: g.shape().to_vec(),
                    });
                }
            }
            if p.trainable && self.first_moment[id.0].len() != p.value.len() {
                return Err(TensorError::Invalid {
                    op: "adamw_step",
                    msg: format!("moment buffer for {} does not match", p.name),
                });
            }
        }

        self.step += 1;
        let AdamWConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let t = self.step as f64;
        let bc1 = 1.0 - beta1.powf(t);
        let bc2 = 1.0 - beta2.powf(t);
        let decay = 1.0 - lr * weight_decay;

        for ((id, p), g) in params.iter_mut().zip(grads) {
            if !p.trainable {
                continue;
            }
            let m = &mut self.first_moment[id.0];
            let v = &mut self.second_moment[id.0];
            let values = p.value.data_mut();
            for j in 0..values.len() {
                let gj = g.as_ref().map_or(0.0, |g| g.data()[j]);
                values[j] *= decay;
                m[j] = beta1 * m[j] + (1.0 - beta1) * gj;
                v[j] = beta2 * v[j] + (1.0 - beta2) * gj * gj;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                values[j] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Learning rate at `step`: linear ramp from 0 to `base_lr` over
/// `warmup_steps`, then half-cosine from `base_lr` down to `min_lr` at
/// `total_steps`. Steps outside `[0, total_steps]` are clamped.
pub fn cosine_warmup_lr(
    step: u64,
    warmup_steps: u64,
    total_steps: u64,
    base_lr: f64,
    min_lr: f64,
) -> f64 {
    let step = step.min(total_steps);
    if step < warmup_steps {
        return base_lr * step as f64 / warmup_steps as f64;
    }
    let span = total_steps.saturating_sub(warmup_steps);
    if span == 0 {
        return base_lr;
    }
    let progress = (step - warmup_steps) as f64 / span as f64;
    min_lr + 0.5 * (base_lr - min_lr) * (1.0 + (PI * progress).cos())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub min_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
}

impl LrSchedule {
    pub fn at(&self, step: u64) -> f64 {
        cosine_warmup_lr(
            step,
            self.warmup_steps,
            self.total_steps,
            self.base_lr,
            self.min_lr,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(values: &[f64]) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("p", Tensor::new(&[values.len()], values.to_vec()).unwrap(), true)
            .unwrap();
        s
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let mut params = store(&[1.5, -2.0]);
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut opt = AdamW::new(cfg, &params);
        let g = vec![Some(Tensor::zeros(&[2]))];
        opt.step(&mut params, &g, 1e-3).unwrap();
        assert_eq!(params.value(crate::tensor::ParamId(0)).data(), &[1.5, -2.0]);
        assert_eq!(opt.step, 1);
    }

    #[test]
    fn first_step_with_unit_gradient_moves_by_lr() {
        let mut params = store(&[0.0]);
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut opt = AdamW::new(cfg, &params);
        let lr = 1e-3;
        opt.step(&mut params, &[Some(Tensor::new(&[1], vec![1.0]).unwrap())], lr)
            .unwrap();
        // mhat = 1, vhat = 1 after bias correction.
        let expected = -lr / (1.0 + 1e-8);
        assert!((params.value(crate::tensor::ParamId(0)).data()[0] - expected).abs() < 1e-18);
    }

    #[test]
    fn decay_uses_parameter_value() {
        let mut params = store(&[2.0, -4.0]);
        let mut opt = AdamW::new(AdamWConfig::default(), &params);
        let lr = 0.1;
        opt.step(&mut params, &[Some(Tensor::zeros(&[2]))], lr).unwrap();
        let v = params.value(crate::tensor::ParamId(0)).data();
        assert_eq!(v, &[2.0 * (1.0 - lr * 0.05), -4.0 * (1.0 - lr * 0.05)]);
    }

    #[test]
    fn gradient_shape_mismatch_is_an_error() {
        let mut params = store(&[0.0, 0.0]);
        let mut opt = AdamW::new(AdamWConfig::default(), &params);
        assert!(opt
            .step(&mut params, &[Some(Tensor::zeros(&[3]))], 1e-3)
            .is_err());
        assert_eq!(opt.step, 0);
    }

    #[test]
    fn frozen_params_are_untouched() {
        let mut params = ParamStore::new();
        params.insert("buf", Tensor::full(&[2], 3.0), false).unwrap();
        let mut opt = AdamW::new(AdamWConfig::default(), &params);
        opt.step(&mut params, &[Some(Tensor::full(&[2], 1.0))], 0.5).unwrap();
        assert_eq!(params.value(crate::tensor::ParamId(0)).data(), &[3.0, 3.0]);
    }

    #[test]
    fn schedule_endpoints_and_midpoint() {
        let (warm, total, base, min) = (10, 110, 5e-4, 1e-6);
        assert_eq!(cosine_warmup_lr(0, warm, total, base, min), 0.0);
        assert_eq!(cosine_warmup_lr(5, warm, total, base, min), base * 0.5);
        assert_eq!(cosine_warmup_lr(warm, warm, total, base, min), base);
        let mid = cosine_warmup_lr((warm + total) / 2, warm, total, base, min);
        assert!((mid - (base + min) / 2.0).abs() < 1e-18);
        assert!((cosine_warmup_lr(total, warm, total, base, min) - min).abs() < 1e-18);
        assert_eq!(
            cosine_warmup_lr(total + 50, warm, total, base, min),
            cosine_warmup_lr(total, warm, total, base, min)
        );
    }

    #[test]
    fn adamw_descends_a_convex_quadratic() {
        // f(x) = |x|², gradient 2x.
        let mut params = store(&[1.0, -0.5, 0.25]);
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut opt = AdamW::new(cfg, &params);
        let id = crate::tensor::ParamId(0);
        let f = |p: &ParamStore| p.value(id).data().iter().map(|x| x * x).sum::<f64>();
        let mut prev = f(&params);
        for _ in 0..200 {
            let g: Vec<f64> = params.value(id).data().iter().map(|x| 2.0 * x).collect();
            opt.step(&mut params, &[Some(Tensor::new(&[3], g).unwrap())], 1e-3)
                .unwrap();
            let cur = f(&params);
            assert!(cur < prev, "{cur} !< {prev}");
            prev = cur;
        }
    }
}
