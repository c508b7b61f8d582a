//! Rectified-flow machinery: the `x_t = (1−t)·x₀ + t·ε` path, velocity
//! targets, the flow-matching loss, Euler sampling of the probability-flow
//! ODE, and the velocity-to-score conversion.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::array::DenseArray;
use crate::error::{Error, Result};
use crate::grad::{Tape, Var};
use crate::scalar::Scalar;

/// Default lower bound on `t` wherever `1/t` appears.
pub const DEFAULT_T_MIN_CLAMP: f64 = 0.02;

/// Eager velocity field `u(x, t)` evaluated on a batch `x: [B, ..]` with one
/// time per batch entry.
pub trait VelocityField<T: Scalar> {
    fn velocity(&self, x: &DenseArray<T>, t: &[T]) -> Result<DenseArray<T>>;
}

/// A velocity model whose parameters can be placed on a tape.
pub trait DifferentiableVelocity<T: Scalar> {
    /// Puts every parameter on `tape` in a fixed order.
    fn bind<'t>(&self, tape: &'t Tape<T>, trainable: bool) -> Vec<Var<'t, T>>;

    fn forward<'t>(&self, params: &[Var<'t, T>], x: Var<'t, T>, t: &[T]) -> Result<Var<'t, T>>;
}

/// Adapts a closure to [`VelocityField`].
pub struct FnField<F>(pub F);

impl<T: Scalar, F> VelocityField<T> for FnField<F>
where
    F: Fn(&DenseArray<T>, &[T]) -> Result<DenseArray<T>>,
{
    fn velocity(&self, x: &DenseArray<T>, t: &[T]) -> Result<DenseArray<T>> {
        (self.0)(x, t)
    }
}

/// Evaluates a differentiable model without recording gradients.
pub fn eval_no_grad<T: Scalar, M: DifferentiableVelocity<T> + ?Sized>(
    model: &M,
    x: &DenseArray<T>,
    t: &[T],
) -> Result<DenseArray<T>> {
    let tape = Tape::no_grad();
    let params = model.bind(&tape, false);
    let xv = tape.constant(x.clone());
    let out = model.forward(&params, xv, t)?;
    Ok((*out.value()).clone())
}

fn check_batch<T: Scalar>(x: &DenseArray<T>, t: &[T]) -> Result<usize> {
    let b = x.shape().first().copied().unwrap_or(0);
    if b != t.len() || b == 0 {
        return Err(Error::shape(
            "batch",
            format!("x {:?} with {} times", x.shape(), t.len()),
        ));
    }
    Ok(x.len() / b)
}

/// Expands one value per batch entry to the full shape of `x`.
pub fn per_sample<T: Scalar>(x_shape: &[usize], values: &[T]) -> DenseArray<T> {
    let per = x_shape.iter().skip(1).product::<usize>().max(1);
    DenseArray::from_fn(x_shape, |i| values[i / per])
}

/// Probability-flow time grid for a rectified flow, `α_t = 1 − t`, `σ_t = t`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowSchedule {
    /// Strictly decreasing from 1.0 to 0.0.
    pub grid: Vec<f64>,
    pub t_min_clamp: f64,
}

impl FlowSchedule {
    /// `steps` uniform Euler steps from 1 to 0.
    pub fn uniform(steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(Error::InvalidArgument("schedule needs at least one step".into()));
        }
        let grid = (0..=steps).map(|i| 1.0 - i as f64 / steps as f64).collect();
        let clamp = DEFAULT_T_MIN_CLAMP.min(0.5 / steps as f64);
        Self::new(grid, clamp)
    }

    pub fn new(grid: Vec<f64>, t_min_clamp: f64) -> Result<Self> {
        let s = Self { grid, t_min_clamp };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let g = &self.grid;
        if g.len() < 2 {
            return Err(Error::InvalidArgument("empty time grid".into()));
        }
        if g[0] != 1.0 || *g.last().unwrap() != 0.0 {
            return Err(Error::InvalidArgument(format!(
                "time grid must run from 1.0 to 0.0, got {} .. {}",
                g[0],
                g.last().unwrap()
            )));
        }
        if g.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::InvalidArgument("time grid must be strictly decreasing".into()));
        }
        let first_interior = if g.len() > 2 { g[g.len() - 2] } else { 1.0 };
        if !(self.t_min_clamp > 0.0 && self.t_min_clamp < first_interior) {
            return Err(Error::InvalidArgument(format!(
                "t_min_clamp {} must lie in (0, {first_interior})",
                self.t_min_clamp
            )));
        }
        Ok(())
    }

    pub fn steps(&self) -> usize {
        self.grid.len() - 1
    }

    pub fn alpha(t: f64) -> f64 {
        1.0 - t
    }

    pub fn sigma(t: f64) -> f64 {
        t
    }

    /// Adjacent `(t', t)` pairs with `t' > t`, in sampling order.
    pub fn pairs(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.grid.windows(2).map(|w| (w[0], w[1]))
    }
}

/// `x_t = (1 − t)·x₀ + t·ε`.
pub fn add_noise<T: Scalar>(x0: &DenseArray<T>, eps: &DenseArray<T>, t: T) -> Result<DenseArray<T>> {
    if !(t >= T::zero() && t <= T::one()) {
        return Err(Error::InvalidArgument(format!("t = {t} outside [0, 1]")));
    }
    let a = T::one() - t;
    x0.zip_map(eps, "add_noise", |x, e| {
        // exact endpoints
        if t == T::zero() {
            x
        } else if t == T::one() {
            e
        } else {
            a * x + t * e
        }
    })
}

/// Per-sample [`add_noise`] for a batch `[B, ..]`.
pub fn add_noise_batch<T: Scalar>(x0: &DenseArray<T>, eps: &DenseArray<T>, t: &[T]) -> Result<DenseArray<T>> {
    let per = check_batch(x0, t)?;
    let mut out = Vec::with_capacity(x0.len());
    for (b, &tb) in t.iter().enumerate() {
        let rows = |a: &DenseArray<T>| DenseArray::new(&[per], a.data()[b * per..(b + 1) * per].to_vec());
        out.extend(add_noise(&rows(x0)?, &rows(eps)?, tb)?.into_data());
    }
    DenseArray::new(x0.shape(), out)
}

/// Rectified-flow velocity `dα/dt·x₀ + dσ/dt·ε = ε − x₀`.
pub fn velocity_target<T: Scalar>(x0: &DenseArray<T>, eps: &DenseArray<T>) -> Result<DenseArray<T>> {
    eps.zip_map(x0, "velocity_target", |e, x| e - x)
}

/// Flow-matching loss on fixed noise and times:
/// `(1/B) Σ_b w(t_b)·‖v_b − u(x_{t_b}, t_b)‖²_F`.
#[allow(clippy::too_many_arguments)]
pub fn fm_loss_at<'t, T: Scalar, M: DifferentiableVelocity<T> + ?Sized>(
    tape: &'t Tape<T>,
    model: &M,
    params: &[Var<'t, T>],
    x0: &DenseArray<T>,
    eps: &DenseArray<T>,
    t: &[T],
    weight: impl Fn(T) -> T,
) -> Result<Var<'t, T>> {
    check_batch(x0, t)?;
    let xt = add_noise_batch(x0, eps, t)?;
    let target = velocity_target(x0, eps)?;
    let u = model.forward(params, tape.constant(xt), t)?;
    let diff = u.sub(tape.constant(target))?;
    let inv_b = T::one() / T::of(t.len() as f64);
    let w: Vec<T> = t.iter().map(|&tb| weight(tb) * inv_b).collect();
    let w = tape.constant(per_sample(x0.shape(), &w));
    diff.mul(diff)?.mul(w)?.sum()
}

/// [`fm_loss_at`] with `ε ~ N(0, I)` and `t ~ U(0, 1)` drawn from `rng`.
pub fn fm_loss<'t, T: Scalar, M: DifferentiableVelocity<T> + ?Sized, R: Rng + ?Sized>(
    tape: &'t Tape<T>,
    model: &M,
    params: &[Var<'t, T>],
    x0: &DenseArray<T>,
    rng: &mut R,
    weight: impl Fn(T) -> T,
) -> Result<Var<'t, T>> {
    let b = x0.shape().first().copied().unwrap_or(0);
    let eps = DenseArray::randn(x0.shape(), 1.0, rng);
    let t: Vec<T> = (0..b)
        .map(|_| T::of(rng.random_range(1e-4..1.0 - 1e-4)))
        .collect();
    fm_loss_at(tape, model, params, x0, &eps, &t, weight)
}

/// One Euler step of the PF-ODE from `t'` down to `t`:
/// `x̂_t = (t − t')·u(x_{t'}, t') + x_{t'}`.
pub fn euler_step<T: Scalar, M: VelocityField<T> + ?Sized>(
    model: &M,
    x: &DenseArray<T>,
    t_prime: f64,
    t: f64,
) -> Result<DenseArray<T>> {
    if !(t < t_prime) || t < 0.0 || t_prime > 1.0 {
        return Err(Error::InvalidArgument(format!(
            "euler step needs 0 <= t < t' <= 1, got t = {t}, t' = {t_prime}"
        )));
    }
    let b = x.shape().first().copied().unwrap_or(1);
    let u = model.velocity(x, &vec![T::of(t_prime); b])?;
    let h = T::of(t - t_prime);
    u.zip_map(x, "euler_step", |ui, xi| h * ui + xi)
}

/// Output of [`sample`].
#[derive(Clone, Debug)]
pub struct Sampled<T> {
    pub x0: DenseArray<T>,
    /// State at every grid node, starting with `x₁`; empty unless requested.
    pub trajectory: Vec<DenseArray<T>>,
}

/// Integrates the PF-ODE over `schedule.grid` from `x1` with Euler steps.
pub fn sample<T: Scalar, M: VelocityField<T> + ?Sized>(
    model: &M,
    schedule: &FlowSchedule,
    x1: &DenseArray<T>,
    keep_trajectory: bool,
) -> Result<Sampled<T>> {
    schedule.validate()?;
    let mut x = x1.clone();
    let mut trajectory = Vec::new();
    if keep_trajectory {
        trajectory.push(x.clone());
    }
    for (tp, t) in schedule.pairs() {
        x = euler_step(model, &x, tp, t)?;
        if keep_trajectory {
            trajectory.push(x.clone());
        }
    }
    Ok(Sampled { x0: x, trajectory })
}

/// Score estimate together with whether `t` had to be clamped.
#[derive(Clone, Debug)]
pub struct ScoreEstimate<T> {
    pub score: DenseArray<T>,
    pub t_used: f64,
    pub clamped: bool,
}

fn clamp_t(t: f64, t_min: f64) -> (f64, bool) {
    if t < t_min {
        (t_min, true)
    } else {
        (t, false)
    }
}

/// Score of the marginal at time `t` implied by a velocity field:
/// `s = −(1/t)·((1 − t)·u(x, t) + x)`.
pub fn score_from_velocity<T: Scalar, M: VelocityField<T> + ?Sized>(
    model: &M,
    x: &DenseArray<T>,
    t: f64,
    t_min_clamp: f64,
) -> Result<ScoreEstimate<T>> {
    let (t, clamped) = clamp_t(t, t_min_clamp);
    let b = x.shape().first().copied().unwrap_or(1);
    let u = model.velocity(x, &vec![T::of(t); b])?;
    let score = score_from_velocity_value(&u, x, t)?;
    Ok(ScoreEstimate {
        score,
        t_used: t,
        clamped,
    })
}

/// [`score_from_velocity`] on an already evaluated velocity.
pub fn score_from_velocity_value<T: Scalar>(u: &DenseArray<T>, x: &DenseArray<T>, t: f64) -> Result<DenseArray<T>> {
    let a = T::of(1.0 - t);
    let inv_t = T::of(1.0 / t);
    u.zip_map(x, "score_from_velocity", |ui, xi| -(inv_t * (a * ui + xi)))
}

/// Teacher-minus-student score difference via the closed form
/// `−((1 − t)/t)·(u_teacher − u_student)`; the `x` terms cancel.
pub fn score_difference<T, A, B>(
    teacher: &A,
    student: &B,
    x: &DenseArray<T>,
    t: f64,
    t_min_clamp: f64,
) -> Result<ScoreEstimate<T>>
where
    T: Scalar,
    A: VelocityField<T> + ?Sized,
    B: VelocityField<T> + ?Sized,
{
    let (t, clamped) = clamp_t(t, t_min_clamp);
    let b = x.shape().first().copied().unwrap_or(1);
    let times = vec![T::of(t); b];
    let ut = teacher.velocity(x, &times)?;
    let us = student.velocity(x, &times)?;
    Ok(ScoreEstimate {
        score: score_difference_value(&ut, &us, &times)?,
        t_used: t,
        clamped,
    })
}

/// Closed-form score difference from evaluated velocities, one `t` per batch entry.
pub fn score_difference_value<T: Scalar>(
    u_teacher: &DenseArray<T>,
    u_student: &DenseArray<T>,
    t: &[T],
) -> Result<DenseArray<T>> {
    let per = check_batch(u_teacher, t)?;
    let diff = u_teacher.sub(u_student)?;
    let data = diff
        .data()
        .iter()
        .enumerate()
        .map(|(i, &d)| {
            let tb = t[i / per];
            -((T::one() - tb) / tb) * d
        })
        .collect();
    DenseArray::new(u_teacher.shape(), data)
}
