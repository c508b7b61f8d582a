//! AdamW with decoupled weight decay, plus the warmup + cosine learning-rate
//! schedule.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::array::DenseArray;
use crate::error::{Error, Result};
use crate::model::{Param, ParamKind};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Applied to weights only, never to selection scores.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

pub struct AdamW<T> {
    config: AdamConfig,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    t: u32,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            m: Vec::new(),
            v: Vec::new(),
            t: 0,
        }
    }

    pub fn steps_taken(&self) -> u32 {
        self.t
    }

    /// One update. `lr_for` gives the learning rate for each parameter kind;
    /// parameters without a gradient are only decayed.
    pub fn step(&mut self, params: Vec<&mut Param<T>>, grads: &[Option<DenseArray<T>>], lr_for: impl Fn(ParamKind) -> f64) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::shape(
                "adamw",
                format!("{} parameters, {} gradients", params.len(), grads.len()),
            ));
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![T::zero(); p.value.len()]).collect();
            self.v = self.m.clone();
        }
        if self.m.len() != params.len() {
            return Err(Error::shape("adamw", "parameter set changed between steps"));
        }
        self.t += 1;
        let c = &self.config;
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let bc1 = T::of(1.0 - c.beta1.powi(self.t as i32));
        let bc2 = T::of(1.0 - c.beta2.powi(self.t as i32));
        let eps = T::of(c.eps);
        for ((p, g), (m, v)) in params.into_iter().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            let lr = lr_for(p.kind);
            let decay = match p.kind {
                ParamKind::Weight => T::of(1.0 - lr * c.weight_decay),
                ParamKind::Score => T::one(),
            };
            let lr = T::of(lr);
            let data = p.value_mut().data_mut();
            if m.len() != data.len() {
                return Err(Error::shape("adamw", format!("{} changed size", p.name)));
            }
            match g {
                Some(g) => {
                    if g.len() != data.len() {
                        return Err(Error::shape("adamw", format!("gradient for {} has wrong size", p.name)));
                    }
                    for i in 0..data.len() {
                        let gi = g.data()[i];
                        m[i] = b1 * m[i] + (T::one() - b1) * gi;
                        v[i] = b2 * v[i] + (T::one() - b2) * gi * gi;
                        let mh = m[i] / bc1;
                        let vh = v[i] / bc2;
                        data[i] = data[i] * decay - lr * mh / (vh.sqrt() + eps);
                    }
                }
                None => data.iter_mut().for_each(|x| *x *= decay),
            }
        }
        Ok(())
    }
}

/// Linear warmup over the first `warmup_fraction` of `total` steps, then
/// cosine annealing to zero.
pub fn warmup_cosine(step: usize, total: usize, base: f64, warmup_fraction: f64) -> f64 {
    if total == 0 {
        return base;
    }
    let warmup = ((total as f64) * warmup_fraction).round() as usize;
    if step < warmup {
        return base * (step + 1) as f64 / warmup as f64;
    }
    let span = (total - warmup).max(1) as f64;
    let progress = ((step - warmup) as f64 / span).min(1.0);
    0.5 * base * (1.0 + (PI * progress).cos())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_shape() {
        let total = 100;
        assert!((warmup_cosine(0, total, 1e-4, 0.1) - 1e-5).abs() < 1e-15);
        assert!((warmup_cosine(9, total, 1e-4, 0.1) - 1e-4).abs() < 1e-15);
        assert!((warmup_cosine(10, total, 1e-4, 0.1) - 1e-4).abs() < 1e-15);
        assert!(warmup_cosine(55, total, 1e-4, 0.1) < 0.51e-4);
        assert!(warmup_cosine(99, total, 1e-4, 0.1) < 1e-6);
        let lrs: Vec<f64> = (10..total).map(|s| warmup_cosine(s, total, 1.0, 0.1)).collect();
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
    }

    fn param(kind: ParamKind, v: &[f64]) -> Param<f64> {
        Param {
            name: "p".into(),
            kind,
            value: std::rc::Rc::new(DenseArray::from_f64(&[v.len()], v).unwrap()),
        }
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut w = param(ParamKind::Weight, &[1.0, -1.0]);
        let mut s = param(ParamKind::Score, &[1.0]);
        let mut opt = AdamW::new(AdamConfig::default());
        let grads = vec![
            Some(DenseArray::from_f64(&[2], &[0.5, -3.0]).unwrap()),
            Some(DenseArray::from_f64(&[1], &[2.0]).unwrap()),
        ];
        opt.step(vec![&mut w, &mut s], &grads, |k| match k {
            ParamKind::Weight => 0.1,
            ParamKind::Score => 0.01,
        })
        .unwrap();
        let decay = 1.0 - 0.1 * 1e-4;
        assert!((w.value.data()[0] - (decay - 0.1)).abs() < 1e-6);
        assert!((w.value.data()[1] - (-decay + 0.1)).abs() < 1e-6);
        // no decay on scores
        assert!((s.value.data()[0] - 0.99).abs() < 1e-6);
    }
}
