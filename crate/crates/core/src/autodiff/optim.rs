//! AdamW with per-group learning rates and the warmup/cosine schedule.

use serde::{Deserialize, Serialize};

use crate::autodiff::nn::{Bound, ParamId, ParamSet};
use crate::autodiff::tape::Gradients;
use crate::autodiff::tensor::Tensor;
use crate::error::TensorError;
use crate::scalar::Scalar;

/// Gradients indexed by [`ParamId`]; `None` for parameters the loss does not reach.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads<T> {
    pub grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> ParamGrads<T> {
    pub fn zeros_like(params: &ParamSet<T>) -> Self {
        Self {
            grads: vec![None; params.len()],
        }
    }

    /// Pulls the trainable parameters' gradients out of a backward pass.
    pub fn collect(params: &ParamSet<T>, bound: &Bound, grads: &Gradients<T>) -> Self {
        let grads = params
            .ids()
            .map(|id| {
                if params.is_trainable(id) {
                    grads.get(bound.var(id)).cloned()
                } else {
                    None
                }
            })
            .collect();
        Self { grads }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    /// Adds `other` into `self`, parameter by parameter.
    pub fn accumulate(&mut self, other: &ParamGrads<T>) {
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            match (a.as_mut(), b) {
                (Some(a), Some(b)) => a.add_assign(b),
                (None, Some(b)) => *a = Some(b.clone()),
                _ => {}
            }
        }
    }

    pub fn scale(&mut self, c: T) {
        for g in self.grads.iter_mut().flatten() {
            g.data_mut().iter_mut().for_each(|v| *v *= c);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.grads.iter().flatten().all(|g| g.is_finite())
    }

    /// Adds `delta` to one entry, materializing a zero gradient if needed.
    pub fn perturb(&mut self, params: &ParamSet<T>, id: ParamId, index: usize, delta: T) {
        let g = self.grads[id.0].get_or_insert_with(|| Tensor::zeros(params.get(id).shape()));
        g.data_mut()[index] += delta;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Base learning rate of each parameter group.
    pub lrs: Vec<f64>,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            lrs: vec![1e-5, 1e-4],
        }
    }
}

/// Decoupled-weight-decay Adam.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW<T> {
    pub config: AdamWConfig,
    first: Vec<Tensor<T>>,
    second: Vec<Tensor<T>>,
    step: u64,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(config: AdamWConfig, params: &ParamSet<T>) -> Self {
        let first = params
            .ids()
            .map(|id| Tensor::zeros(params.get(id).shape()))
            .collect();
        let second = params
            .ids()
            .map(|id| Tensor::zeros(params.get(id).shape()))
            .collect();
        Self {
            config,
            first,
            second,
            step: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self, id: ParamId) -> &Tensor<T> {
        &self.first[id.0]
    }

    pub fn second_moment(&self, id: ParamId) -> &Tensor<T> {
        &self.second[id.0]
    }

    /// Restores moments and the step counter, e.g. from a checkpoint.
    pub fn restore(
        &mut self,
        first: Vec<Tensor<T>>,
        second: Vec<Tensor<T>>,
        step: u64,
    ) -> Result<(), TensorError> {
        for (a, b) in first
            .iter()
            .zip(&self.first)
            .chain(second.iter().zip(&self.second))
        {
            if a.shape() != b.shape() {
                return Err(TensorError::ShapeMismatch {
                    op: "adamw_restore",
                    left: a.shape().to_vec(),
                    right: b.shape().to_vec(),
                });
            }
        }
        if first.len() != self.first.len() || second.len() != self.second.len() {
            return Err(TensorError::ShapeMismatch {
                op: "adamw_restore",
                left: vec![first.len(), second.len()],
                right: vec![self.first.len(), self.second.len()],
            });
        }
        self.first = first;
        self.second = second;
        self.step = step;
        Ok(())
    }

    /// One update with learning rate `lrs[group] · multiplier`.
    pub fn step(
        &mut self,
        params: &mut ParamSet<T>,
        grads: &ParamGrads<T>,
        multiplier: f64,
    ) -> Result<(), TensorError> {
        for id in params.trainable_ids() {
            if let Some(g) = grads.get(id) {
                if g.shape() != params.get(id).shape() {
                    return Err(TensorError::ShapeMismatch {
                        op: "adamw_step",
                        left: params.get(id).shape().to_vec(),
                        right: g.shape().to_vec(),
                    });
                }
            }
        }
        self.step += 1;
        let c = &self.config;
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let bc1 = T::lit(1.0 - c.beta1.powi(self.step as i32));
        let bc2 = T::lit(1.0 - c.beta2.powi(self.step as i32));
        let eps = T::lit(c.eps);
        let ids: Vec<ParamId> = params.trainable_ids().collect();
        for id in ids {
            let Some(g) = grads.get(id) else { continue };
            let group = params.group(id).unwrap_or(0);
            let base = c
                .lrs
                .get(group)
                .copied()
                .unwrap_or_else(|| *c.lrs.last().unwrap_or(&0.0));
            let lr = T::lit(base * multiplier);
            let decay = T::one() - lr * T::lit(c.weight_decay);
            let m = self.first[id.0].data_mut();
            let v = self.second[id.0].data_mut();
            let p = params.get_mut(id).data_mut();
            for i in 0..p.len() {
                let gi = g.data()[i];
                m[i] = b1 * m[i] + (T::one() - b1) * gi;
                v[i] = b2 * v[i] + (T::one() - b2) * gi * gi;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p[i] = p[i] * decay - lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Linear warmup from 0 to 1 over `[0, warmup]`, cosine decay to 0 at `total`.
pub fn lr_schedule(epoch: usize, warmup: usize, total: usize) -> Result<f64, String> {
    if warmup == 0 || warmup > total {
        return Err(format!("warmup {warmup} must be in 1..={total}"));
    }
    if epoch > total {
        return Err(format!("epoch {epoch} exceeds total {total}"));
    }
    if epoch <= warmup {
        return Ok(epoch as f64 / warmup as f64);
    }
    let progress = (epoch - warmup) as f64 / (total - warmup) as f64;
    Ok(0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}
