//! Flat run configuration shared by every pipeline stage.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attention::SimilarityScale;
use crate::data::ToyData;
use crate::error::{Error, Result};
use crate::flow::FlowSchedule;
use crate::model::ModelConfig;
use crate::optim::AdamConfig;
use crate::teacher::TeacherConfig;
use crate::transfer::{Objective, Reduction, TransferConfig};

/// Every knob of a run as one flat key-value document. Unknown keys are
/// rejected; missing keys take the defaults below.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,

    pub n_layers: usize,
    pub d_model: usize,
    pub seq_len: usize,
    pub d_state: usize,
    pub mlp_ratio: usize,
    pub similarity: SimilarityScale,

    pub data: ToyData,
    pub teacher_steps: usize,
    pub teacher_batch_size: usize,
    pub teacher_lr: f64,

    /// Euler steps of the sampling grid used for trajectories and samples.
    pub sample_steps: usize,
    pub n_trajectories: usize,

    pub target: usize,
    pub lambda: f64,
    pub alpha_start: f64,
    pub alpha_end: f64,
    pub transfer_steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub score_lr: f64,
    pub warmup_fraction: f64,
    pub weight_decay: f64,
    pub objective: Objective,
    pub reduction: Reduction,
    pub regularization: bool,

    pub eval_samples: usize,
    pub sw2_projections: usize,
    pub probe_batch: usize,

    pub bench_n: Vec<usize>,
    pub bench_d: usize,
    pub bench_repeats: usize,

    /// Seeds each ablation cell is repeated over.
    pub ablation_seeds: Vec<u64>,
    pub ablation_targets: Vec<usize>,
    pub ablation_lambdas: Vec<f64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let model = ModelConfig::default();
        let teacher = TeacherConfig::default();
        let transfer = TransferConfig::default();
        Self {
            seed: 0,
            n_layers: model.n_layers,
            d_model: model.d_model,
            seq_len: model.seq_len,
            d_state: model.d_state,
            mlp_ratio: model.mlp_ratio,
            similarity: model.similarity,
            data: teacher.data,
            teacher_steps: teacher.steps,
            teacher_batch_size: teacher.batch_size,
            teacher_lr: teacher.lr,
            sample_steps: 8,
            n_trajectories: 1024,
            target: transfer.target,
            lambda: transfer.lambda,
            alpha_start: transfer.alpha_start,
            alpha_end: transfer.alpha_end,
            transfer_steps: transfer.total_steps,
            batch_size: transfer.batch_size,
            lr: transfer.lr,
            score_lr: transfer.score_lr,
            warmup_fraction: transfer.warmup_fraction,
            weight_decay: transfer.adam.weight_decay,
            objective: transfer.objective,
            reduction: transfer.reduction,
            regularization: transfer.regularization,
            eval_samples: 512,
            sw2_projections: 128,
            probe_batch: 64,
            bench_n: vec![1024, 2048, 4096, 8192],
            bench_d: 64,
            bench_repeats: 3,
            ablation_seeds: vec![0, 1, 2],
            ablation_targets: vec![2, 4, 6],
            ablation_lambdas: vec![0.1, 0.01, 0.001],
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingInput(path.to_path_buf()),
            _ => Error::Io(e),
        })?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("flat config always serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.model().validate()?;
        self.teacher().validate()?;
        self.transfer().validate()?;
        self.schedule()?;
        if self.target > self.n_layers {
            return Err(Error::Config(format!(
                "target {} exceeds n_layers {}",
                self.target, self.n_layers
            )));
        }
        if self.n_trajectories == 0 || self.eval_samples == 0 || self.sw2_projections == 0 || self.probe_batch == 0 {
            return Err(Error::Config(
                "n_trajectories, eval_samples, sw2_projections and probe_batch must be positive".into(),
            ));
        }
        if self.bench_n.len() < 2 || self.bench_n.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Config("bench_n must hold at least two ascending lengths".into()));
        }
        if self.bench_d == 0 || self.bench_repeats == 0 {
            return Err(Error::Config("bench_d and bench_repeats must be positive".into()));
        }
        if self.ablation_seeds.is_empty() {
            return Err(Error::Config("ablation_seeds must not be empty".into()));
        }
        Ok(())
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            n_layers: self.n_layers,
            d_model: self.d_model,
            seq_len: self.seq_len,
            d_state: self.d_state,
            mlp_ratio: self.mlp_ratio,
            similarity: self.similarity,
        }
    }

    pub fn teacher(&self) -> TeacherConfig {
        TeacherConfig {
            data: self.data,
            steps: self.teacher_steps,
            batch_size: self.teacher_batch_size,
            lr: self.teacher_lr,
            ..TeacherConfig::default()
        }
    }

    pub fn schedule(&self) -> Result<FlowSchedule> {
        FlowSchedule::uniform(self.sample_steps).map_err(|e| Error::Config(format!("sample_steps: {e}")))
    }

    pub fn transfer(&self) -> TransferConfig {
        TransferConfig {
            target: self.target,
            lambda: self.lambda,
            alpha_start: self.alpha_start,
            alpha_end: self.alpha_end,
            total_steps: self.transfer_steps,
            batch_size: self.batch_size,
            lr: self.lr,
            score_lr: self.score_lr,
            warmup_fraction: self.warmup_fraction,
            t_min_clamp: FlowSchedule::uniform(self.sample_steps.max(1))
                .map(|s| s.t_min_clamp)
                .unwrap_or(0.02),
            objective: self.objective,
            reduction: self.reduction,
            regularization: self.regularization,
            train_scores: true,
            adam: AdamConfig {
                weight_decay: self.weight_decay,
                ..AdamConfig::default()
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips_through_toml() {
        let c = RunConfig {
            seed: 9,
            target: 2,
            ..RunConfig::default()
        };
        assert_eq!(RunConfig::from_toml(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn missing_keys_take_defaults() {
        let c = RunConfig::from_toml("seed = 3\ntarget = 6\n").unwrap();
        assert_eq!(c.seed, 3);
        assert_eq!(c.transfer().target, 6);
        assert_eq!(c.n_layers, 8);
    }

    #[test]
    fn rejects_unknown_and_invalid() {
        assert!(matches!(RunConfig::from_toml("sede = 3"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::from_toml("target = 9"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::from_toml("lambda = -1.0"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::from_toml("objective = \"kl\""), Err(Error::Config(_))));
    }

    #[test]
    fn clamp_follows_grid() {
        let c = RunConfig {
            sample_steps: 50,
            ..RunConfig::default()
        };
        assert_eq!(c.transfer().t_min_clamp, c.schedule().unwrap().t_min_clamp);
    }
}
