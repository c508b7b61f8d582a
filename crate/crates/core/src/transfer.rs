//! Selective transfer: trains a mixed-attention student against the frozen
//! softmax teacher while learnable per-layer scores decide which layers end
//! up linear.
//!
//! The objective is `L_main + λ·(L_con + L_reg)` where `L_main` is either the
//! distribution-matching surrogate ([`adm_loss`]) or plain velocity
//! regression ([`mse_loss`]).

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::array::DenseArray;
use crate::error::{Error, Result};
use crate::flow::{eval_no_grad, per_sample, score_difference_value, DifferentiableVelocity, VelocityField};
use crate::grad::{ste_round, Tape, Var};
use crate::model::{Frozen, ParamKind, ToyTransformer};
use crate::optim::{warmup_cosine, AdamConfig, AdamW};
use crate::scalar::Scalar;
use crate::trajectory::{RecordBatch, TrajectorySet};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    #[default]
    Adm,
    Mse,
}

impl std::str::FromStr for Objective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adm" => Ok(Objective::Adm),
            "mse" => Ok(Objective::Mse),
            other => Err(Error::Config(format!("unknown objective `{other}` (expected adm or mse)"))),
        }
    }
}

/// How the main objective is normalised.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    /// Sum over a sample's entries, mean over the batch.
    PerSample,
    /// Mean over the batch and over entries; the gradient direction is the
    /// same as [`Reduction::PerSample`], scaled by `1/(seq_len·d_state)`.
    #[default]
    PerElement,
}

impl Reduction {
    fn scale(self, batch: usize, per_sample: usize) -> f64 {
        match self {
            Reduction::PerSample => 1.0 / batch as f64,
            Reduction::PerElement => 1.0 / (batch * per_sample) as f64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TransferConfig {
    /// Number of layers that should end up linear.
    pub target: usize,
    pub lambda: f64,
    pub alpha_start: f64,
    pub alpha_end: f64,
    pub total_steps: usize,
    pub batch_size: usize,
    /// Peak learning rate of the network weights (warmup + cosine).
    pub lr: f64,
    /// Constant learning rate of the selection scores.
    pub score_lr: f64,
    pub warmup_fraction: f64,
    pub t_min_clamp: f64,
    pub objective: Objective,
    pub reduction: Reduction,
    /// Include `L_reg`; off only for ablations.
    pub regularization: bool,
    /// Let the scores learn; off pins every score at its initial value.
    pub train_scores: bool,
    pub adam: AdamConfig,
}

impl Default for TransferConfig {
    fn default() -> Self {
        Self {
            target: 4,
            lambda: 0.01,
            alpha_start: 20.0,
            alpha_end: 2.0,
            total_steps: 1000,
            batch_size: 64,
            lr: 1e-4,
            score_lr: 5e-2,
            warmup_fraction: 0.1,
            t_min_clamp: 0.02,
            objective: Objective::Adm,
            reduction: Reduction::PerElement,
            regularization: true,
            train_scores: true,
            adam: AdamConfig::default(),
        }
    }
}

impl TransferConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.lambda >= 0.0) {
            return fail("transfer.lambda must be non-negative");
        }
        if !(self.alpha_end > 0.0 && self.alpha_start >= self.alpha_end) {
            return fail("transfer.alpha_start >= alpha_end > 0 is required");
        }
        if self.batch_size == 0 {
            return fail("transfer.batch_size must be positive");
        }
        if !(self.lr >= 0.0 && self.score_lr >= 0.0) {
            return fail("learning rates must be non-negative");
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return fail("transfer.warmup_fraction must lie in [0, 1)");
        }
        if !(self.t_min_clamp > 0.0 && self.t_min_clamp < 1.0) {
            return fail("transfer.t_min_clamp must lie in (0, 1)");
        }
        Ok(())
    }
}

/// `(Σ_l (1 − ⌈r_l⌋) − target)²`: squared error of the number of layers
/// that round to linear. Rounding passes gradients straight through.
pub fn constraint_loss<'t, T: Scalar>(scores: Var<'t, T>, target: usize) -> Result<Var<'t, T>> {
    let rounded = ste_round(scores.clip(T::zero(), T::one()));
    let linear = rounded.neg().add_scalar(T::one()).sum()?;
    let gap = linear.add_scalar(-T::of(target as f64));
    gap.mul(gap)
}

/// `Σ_l (1 − |2r_l − 1|^α)`; zero exactly when every score is 0 or 1.
pub fn regularization_loss<'t, T: Scalar>(scores: Var<'t, T>, alpha: f64) -> Result<Var<'t, T>> {
    if !(alpha > 0.0) {
        return Err(Error::InvalidArgument(format!("alpha must be positive, got {alpha}")));
    }
    let r = scores.clip(T::zero(), T::one());
    let dist = r.mul_scalar(T::of(2.0)).add_scalar(-T::one()).abs().powf(T::of(alpha));
    dist.neg().add_scalar(T::one()).sum()
}

/// Linear interpolation from `alpha_start` at step 0 to `alpha_end` at
/// `total_steps`.
pub fn alpha_at(step: usize, config: &TransferConfig) -> f64 {
    if config.total_steps == 0 {
        return config.alpha_end;
    }
    let f = (step as f64 / config.total_steps as f64).min(1.0);
    config.alpha_start + (config.alpha_end - config.alpha_start) * f
}

/// Velocity regression onto the stored teacher outputs. With
/// [`Reduction::PerSample`] this is `(1/B) Σ_b ‖u_b − û(x_b, t_b)‖²_F`;
/// [`Reduction::PerElement`] further divides by the entries per sample.
pub fn mse_loss<'t, T: Scalar, M: DifferentiableVelocity<T> + ?Sized>(
    tape: &'t Tape<T>,
    student: &M,
    params: &[Var<'t, T>],
    batch: &RecordBatch<T>,
    reduction: Reduction,
) -> Result<Var<'t, T>> {
    let b = batch.t.len();
    let pred = student.forward(params, tape.constant(batch.x.clone()), &batch.t)?;
    let diff = pred.sub(tape.constant(batch.u.clone()))?;
    let scale = reduction.scale(b, batch.x.len() / b.max(1));
    Ok(diff.mul(diff)?.sum()?.mul_scalar(T::of(scale)))
}

/// Distribution-matching surrogate for one batch of `(x_{t'}, t')` with
/// grid successors `t`:
///
/// 1. `x̂_t = x_{t'} + (t − t')·û(x_{t'}, t')`, differentiable in the student;
/// 2. `Δ = s_teacher(x̂_t, t) − s_student(x̂_t, t)`, evaluated without gradient;
/// 3. `(1/B) Σ_b ⟨−Δ_b, x̂_{t,b}⟩`, further divided by the entries per
///    sample under [`Reduction::PerElement`].
///
/// Its gradient is `−E[Δᵀ ∂x̂_t/∂θ]` (times the reduction's constant), the KL
/// gradient between the student's and teacher's marginals at `t`.
pub fn adm_loss<'t, T, M, Q>(
    tape: &'t Tape<T>,
    student: &M,
    params: &[Var<'t, T>],
    teacher: &Q,
    batch: &RecordBatch<T>,
    t_min_clamp: f64,
    reduction: Reduction,
) -> Result<Var<'t, T>>
where
    T: Scalar,
    M: DifferentiableVelocity<T> + ?Sized,
    Q: VelocityField<T> + ?Sized,
{
    let b = batch.t.len();
    if let Some(t) = batch.t_next.iter().find(|t| t.as_f64() < t_min_clamp) {
        return Err(Error::InvalidArgument(format!(
            "successor time {t} below the clamp {t_min_clamp}"
        )));
    }
    let h: Vec<T> = batch.t.iter().zip(&batch.t_next).map(|(&tp, &t)| t - tp).collect();
    let x = tape.constant(batch.x.clone());
    let u = student.forward(params, x, &batch.t)?;
    let x_hat = u.mul(tape.constant(per_sample(batch.x.shape(), &h)))?.add(x)?;

    let x_hat_value = (*x_hat.value()).clone();
    let u_teacher = teacher.velocity(&x_hat_value, &batch.t_next)?;
    let u_student = eval_no_grad(student, &x_hat_value, &batch.t_next)?;
    let delta = score_difference_value(&u_teacher, &u_student, &batch.t_next)?;
    if !delta.all_finite() {
        return Err(Error::NonFinite("score difference".into()));
    }
    let weight = delta.scale(-T::of(reduction.scale(b, batch.x.len() / b)));
    x_hat.mul(tape.constant(weight))?.sum()
}

/// Loss components of one step, as plain numbers.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub main: f64,
    pub con: f64,
    pub reg: f64,
    pub total: f64,
}

/// Positions of the selection scores among a model's bound parameters.
pub fn score_positions<T: Scalar>(model: &ToyTransformer<T>) -> Vec<usize> {
    model
        .params()
        .iter()
        .enumerate()
        .filter(|(_, p)| p.kind == ParamKind::Score)
        .map(|(i, _)| i)
        .collect()
}

/// `L_main + λ·(L_con + L_reg)` at `alpha_at(step)`, with its components.
pub fn total_loss<'t, T: Scalar>(
    tape: &'t Tape<T>,
    student: &ToyTransformer<T>,
    params: &[Var<'t, T>],
    teacher: &Frozen<T>,
    batch: &RecordBatch<T>,
    config: &TransferConfig,
    step: usize,
) -> Result<(Var<'t, T>, LossParts)> {
    let main = match config.objective {
        Objective::Adm => adm_loss(tape, student, params, teacher, batch, config.t_min_clamp, config.reduction)?,
        Objective::Mse => mse_loss(tape, student, params, batch, config.reduction)?,
    };
    let positions = score_positions(student);
    let lambda = T::of(config.lambda);
    let zero = || tape.constant(DenseArray::scalar(T::zero()));
    let (con, reg) = if positions.is_empty() {
        (zero(), zero())
    } else {
        let scores = Var::concat_last(&positions.iter().map(|&i| params[i]).collect::<Vec<_>>())?;
        let con = constraint_loss(scores, config.target)?;
        let reg = if config.regularization {
            regularization_loss(scores, alpha_at(step, config))?
        } else {
            zero()
        };
        (con, reg)
    };
    let total = main.add(con.add(reg)?.mul_scalar(lambda))?;
    let item = |v: Var<'t, T>| v.value().item().map(|x| x.as_f64());
    let parts = LossParts {
        main: item(main)?,
        con: item(con)?,
        reg: item(reg)?,
        total: item(total)?,
    };
    Ok((total, parts))
}

/// One line of the training report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    pub alpha: f64,
    pub objective: Objective,
    #[serde(rename = "loss_main")]
    pub main: f64,
    #[serde(rename = "loss_con")]
    pub con: f64,
    #[serde(rename = "loss_reg")]
    pub reg: f64,
    #[serde(rename = "loss_total")]
    pub total: f64,
    /// Scores after this step's update.
    pub scores: Vec<f64>,
}

pub struct TransferOutcome<T> {
    pub student: ToyTransformer<T>,
    pub history: Vec<StepRecord>,
}

impl<T: Scalar> TransferOutcome<T> {
    /// Final scores of the mixed layers.
    pub fn scores(&self) -> Vec<f64> {
        self.student.scores().into_iter().flatten().map(|s| s.as_f64()).collect()
    }
}

/// Scores live in the box `[0, 1]`. A gradient component that would push a
/// score already on the boundary further out is zeroed, so the optimizer
/// state does not accumulate pressure it can never act on.
fn project_score_gradients<T: Scalar>(model: &ToyTransformer<T>, grads: &mut [Option<DenseArray<T>>]) {
    for (p, g) in model.params().iter().zip(grads.iter_mut()) {
        if p.kind != ParamKind::Score {
            continue;
        }
        if let Some(g) = g {
            for (gi, &r) in g.data_mut().iter_mut().zip(p.value.data()) {
                if (r >= T::one() && *gi < T::zero()) || (r <= T::zero() && *gi > T::zero()) {
                    *gi = T::zero();
                }
            }
        }
    }
}

fn batch_seed(seed: u64, epoch: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ epoch.wrapping_add(0xD1B5_4A32_D192_ED03)
}

/// Runs `config.total_steps` optimizer updates of `student` against
/// `teacher` on `data`. Each step's [`StepRecord`] is appended to the
/// history and, when `report` is given, written to it as one JSON line.
pub fn train<T: Scalar>(
    mut student: ToyTransformer<T>,
    teacher: &Frozen<T>,
    data: &TrajectorySet<T>,
    config: &TransferConfig,
    seed: u64,
    mut report: Option<&mut dyn Write>,
) -> Result<TransferOutcome<T>> {
    config.validate()?;
    let n_scores = score_positions(&student).len();
    if config.target > n_scores {
        return Err(Error::Config(format!(
            "target {} exceeds the {n_scores} selectable layers",
            config.target
        )));
    }
    let c = student.config();
    if (c.seq_len, c.d_state) != (data.seq_len, data.d_state) {
        return Err(Error::shape(
            "train",
            format!(
                "model takes {} × {} samples, trajectories hold {} × {}",
                c.seq_len, c.d_state, data.seq_len, data.d_state
            ),
        ));
    }
    let eligible = match config.objective {
        Objective::Adm => data.indices_with_next_at_least(config.t_min_clamp),
        Objective::Mse => (0..data.len()).collect(),
    };
    if eligible.is_empty() && config.total_steps > 0 {
        return Err(Error::InvalidArgument("no usable trajectory records".into()));
    }
    let batch_size = config.batch_size.min(eligible.len().max(1));

    let mut opt = AdamW::new(config.adam.clone());
    let mut history = Vec::with_capacity(config.total_steps);
    let mut epoch = 0u64;
    let mut order = data.epoch_order(Some(&eligible), batch_seed(seed, epoch));
    let mut cursor = 0;
    for step in 0..config.total_steps {
        if cursor + batch_size > order.len() {
            epoch += 1;
            order = data.epoch_order(Some(&eligible), batch_seed(seed, epoch));
            cursor = 0;
        }
        let batch = data.batch(&order[cursor..cursor + batch_size])?;
        cursor += batch_size;

        let tape = Tape::new();
        let params = student.bind_with(&tape, |p| p.kind == ParamKind::Weight || config.train_scores);
        let (loss, parts) = total_loss(&tape, &student, &params, teacher, &batch, config, step)?;
        if !parts.total.is_finite() {
            return Err(Error::Divergence {
                step,
                detail: format!("loss components {parts:?}, scores {:?}", student.scores()),
            });
        }
        let grads = loss.backward()?;
        let mut grads: Vec<_> = params.iter().map(|&p| grads.get(p).cloned()).collect();
        project_score_gradients(&student, &mut grads);
        let lr = warmup_cosine(step, config.total_steps, config.lr, config.warmup_fraction);
        let score_lr = if config.train_scores { config.score_lr } else { 0.0 };
        opt.step(student.params_mut(), &grads, |k| match k {
            ParamKind::Weight => lr,
            ParamKind::Score => score_lr,
        })?;
        for p in student.params_mut() {
            if p.kind == ParamKind::Score {
                p.value_mut().data_mut().iter_mut().for_each(|r| *r = r.max(T::zero()).min(T::one()));
            }
        }
        let record = StepRecord {
            step,
            lr,
            alpha: alpha_at(step, config),
            objective: config.objective,
            main: parts.main,
            con: parts.con,
            reg: parts.reg,
            total: parts.total,
            scores: student.scores().into_iter().flatten().map(|s| s.as_f64()).collect(),
        };
        if let Some(w) = report.as_deref_mut() {
            serde_json::to_writer(&mut *w, &record).map_err(|e| Error::Io(e.into()))?;
            w.write_all(b"\n")?;
        }
        history.push(record);
    }
    Ok(TransferOutcome { student, history })
}
