use super::element::Element;
use super::params::{ParamId, ParamSet};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-2,
        }
    }
}

#[derive(Clone, Debug)]
struct Slot<T> {
    id: ParamId,
    lr_mult: f64,
    m: Tensor<T>,
    v: Tensor<T>,
}

/// AdamW with decoupled weight decay and per-parameter learning-rate
/// multipliers (used for differential backbone/head rates).
#[derive(Clone, Debug)]
pub struct AdamW<T = f32> {
    pub config: AdamWConfig,
    step: u64,
    slots: Vec<Slot<T>>,
}

impl<T: Element> AdamW<T> {
    /// Manages `ids` with learning-rate multiplier 1.
    pub fn new(config: AdamWConfig, params: &ParamSet<T>, ids: &[ParamId]) -> Self {
        let mut opt = AdamW {
            config,
            step: 0,
            slots: Vec::new(),
        };
        opt.add_group(params, ids, 1.0);
        opt
    }

    pub fn add_group(&mut self, params: &ParamSet<T>, ids: &[ParamId], lr_mult: f64) {
        for &id in ids {
            let shape = params.value(id).shape().to_vec();
            self.slots.push(Slot {
                id,
                lr_mult,
                m: Tensor::zeros(&shape),
                v: Tensor::zeros(&shape),
            });
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn managed(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.slots.iter().map(|s| s.id)
    }

    /// One update of every managed parameter; grads are cleared afterwards.
    pub fn step(&mut self, params: &mut ParamSet<T>) -> Result<()> {
        for s in &self.slots {
            if params.grad(s.id).is_none() {
                return Err(Error::MissingGrad(params.name(s.id).to_string()));
            }
            if params.value(s.id).shape() != s.m.shape() {
                return Err(Error::shape(
                    "adamw",
                    format!(
                        "state {:?} vs parameter {:?}",
                        s.m.shape(),
                        params.value(s.id).shape()
                    ),
                ));
            }
        }
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let (b1, b2) = (T::from_f64_lossy(c.beta1), T::from_f64_lossy(c.beta2));
        let (ob1, ob2) = (T::one() - b1, T::one() - b2);
        let eps = T::from_f64_lossy(c.eps);
        for s in &mut self.slots {
            let grad = params.take_grad(s.id).expect("checked above");
            let lr = c.lr * s.lr_mult;
            let decay = T::from_f64_lossy(1.0 - lr * c.weight_decay);
            let step_size = T::from_f64_lossy(lr / bc1);
            let inv_bc2_sqrt = T::from_f64_lossy(1.0 / bc2.sqrt());
            let p = params.value_mut(s.id).data_mut();
            let (m, v) = (s.m.data_mut(), s.v.data_mut());
            for i in 0..p.len() {
                let g = grad.data()[i];
                m[i] = b1 * m[i] + ob1 * g;
                v[i] = b2 * v[i] + ob2 * g * g;
                let denom = v[i].sqrt() * inv_bc2_sqrt + eps;
                p[i] = p[i] * decay - step_size * m[i] / denom;
            }
        }
        Ok(())
    }

    /// `(name, m, v)` per managed parameter, for checkpointing.
    pub fn state<'a>(
        &'a self,
        params: &'a ParamSet<T>,
    ) -> impl Iterator<Item = (&'a str, &'a Tensor<T>, &'a Tensor<T>)> {
        self.slots.iter().map(|s| (params.name(s.id), &s.m, &s.v))
    }

    /// Restores moments saved by [`AdamW::state`].
    pub fn restore(
        &mut self,
        step: u64,
        moments: impl Fn(&str) -> Option<(Tensor<T>, Tensor<T>)>,
        params: &ParamSet<T>,
    ) -> Result<()> {
        for s in &mut self.slots {
            let name = params.name(s.id);
            let (m, v) = moments(name)
                .ok_or_else(|| Error::Format(format!("missing optimizer state for {name}")))?;
            if m.shape() != s.m.shape() || v.shape() != s.v.shape() {
                return Err(Error::shape(
                    "adamw",
                    format!("restored state for {name} has wrong shape"),
                ));
            }
            s.m = m;
            s.v = v;
        }
        self.step = step;
        Ok(())
    }
}
