//! Flow-matching pre-training of the softmax teacher.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::ToyData;
use crate::error::{Error, Result};
use crate::flow::{fm_loss, DifferentiableVelocity};
use crate::grad::Tape;
use crate::model::{ModelConfig, ParamKind, ToyTransformer};
use crate::optim::{warmup_cosine, AdamConfig, AdamW};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TeacherConfig {
    pub data: ToyData,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_fraction: f64,
    pub adam: AdamConfig,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        Self {
            data: ToyData::Sinusoid,
            steps: 1500,
            batch_size: 32,
            lr: 3e-3,
            warmup_fraction: 0.05,
            adam: AdamConfig {
                weight_decay: 0.0,
                ..AdamConfig::default()
            },
        }
    }
}

impl TeacherConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("teacher.batch_size must be positive".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config("teacher.lr must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return Err(Error::Config("teacher.warmup_fraction must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Trains a fresh all-softmax model; returns it with the per-step loss.
pub fn train_teacher<T: Scalar>(model_config: &ModelConfig, config: &TeacherConfig, seed: u64) -> Result<(ToyTransformer<T>, Vec<f64>)> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = ToyTransformer::<T>::softmax(model_config, &mut rng)?;
    let mut opt = AdamW::new(config.adam.clone());
    let mut losses = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let x0 = config
            .data
            .sample::<T, _>(config.batch_size, model_config.seq_len, model_config.d_state, &mut rng)?;
        let tape = Tape::new();
        let params = model.bind(&tape, true);
        let loss = fm_loss(&tape, &model, &params, &x0, &mut rng, |_| T::one())?;
        let value = loss.value().item()?.as_f64();
        if !value.is_finite() {
            return Err(Error::Divergence {
                step,
                detail: format!("flow-matching loss is {value}"),
            });
        }
        let grads = loss.backward()?;
        let grads: Vec<_> = params.iter().map(|&p| grads.get(p).cloned()).collect();
        let lr = warmup_cosine(step, config.steps, config.lr, config.warmup_fraction);
        opt.step(model.params_mut(), &grads, |k| match k {
            ParamKind::Weight => lr,
            ParamKind::Score => 0.0,
        })?;
        losses.push(value);
    }
    Ok((model, losses))
}
