//! Small pre-norm transformer used as the velocity field `u(x_t, t)`.
//!
//! Input is a batch of token sequences `[B, n, d_state]`; each block is
//! RMSNorm → attention → residual → RMSNorm → SiLU MLP → residual. The
//! attention in a block is softmax, linear (Hedgehog), or the score-gated
//! mixture of both.

pub(crate) mod checkpoint;

use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::array::DenseArray;
use crate::attention::{orthogonal_hedgehog, tape as attn, SelectionScore, SimilarityScale};
use crate::error::{Error, Result};
use crate::flow::{eval_no_grad, DifferentiableVelocity, VelocityField};
use crate::grad::{Tape, Var};
use crate::scalar::Scalar;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_VERSION};

const NORM_EPS: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub seq_len: usize,
    pub d_state: usize,
    /// MLP hidden width as a multiple of `d_model`.
    pub mlp_ratio: usize,
    pub similarity: SimilarityScale,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_layers: 8,
            d_model: 32,
            seq_len: 16,
            d_state: 2,
            mlp_ratio: 4,
            similarity: SimilarityScale::Dim,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_layers", self.n_layers),
            ("d_model", self.d_model),
            ("seq_len", self.seq_len),
            ("d_state", self.d_state),
            ("mlp_ratio", self.mlp_ratio),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("model.{name} must be positive")));
            }
        }
        if self.d_model % 2 != 0 {
            return Err(Error::Config(format!(
                "model.d_model must be even for the feature map, got {}",
                self.d_model
            )));
        }
        Ok(())
    }

    pub fn mlp_hidden(&self) -> usize {
        self.mlp_ratio * self.d_model
    }
}

/// Attention used by one block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Softmax,
    Linear,
    /// `r·softmax + (1 − r)·linear` with a learnable score `r`.
    Mixed,
}

impl LayerKind {
    pub fn code(self) -> u8 {
        match self {
            LayerKind::Softmax => 0,
            LayerKind::Linear => 1,
            LayerKind::Mixed => 2,
        }
    }

    pub fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(LayerKind::Softmax),
            1 => Some(LayerKind::Linear),
            2 => Some(LayerKind::Mixed),
            _ => None,
        }
    }

    fn has_feature_map(self) -> bool {
        self != LayerKind::Softmax
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    /// Selection score; excluded from weight decay.
    Score,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub kind: ParamKind,
    /// Shared so that binding to a tape does not copy.
    pub value: Rc<DenseArray<T>>,
}

impl<T: Scalar> Param<T> {
    fn new(name: String, kind: ParamKind, value: DenseArray<T>) -> Self {
        Self {
            name,
            kind,
            value: Rc::new(value),
        }
    }

    pub fn value_mut(&mut self) -> &mut DenseArray<T> {
        Rc::make_mut(&mut self.value)
    }
}

#[derive(Clone, Copy, Debug)]
enum Init {
    Normal(f64),
    Zeros,
    Ones,
    Orthogonal,
    Const(f64),
}

#[derive(Clone, Debug)]
struct Block<T> {
    kind: LayerKind,
    norm1: Param<T>,
    wq: Param<T>,
    wk: Param<T>,
    wv: Param<T>,
    feature_map: Option<[Param<T>; 2]>,
    score: Option<Param<T>>,
    wo: Param<T>,
    norm2: Param<T>,
    w1: Param<T>,
    b1: Param<T>,
    w2: Param<T>,
    b2: Param<T>,
}

/// The toy velocity transformer. Cloning is a cheap snapshot: parameters are
/// copy-on-write, so later updates never alias a clone.
#[derive(Clone, Debug)]
pub struct ToyTransformer<T> {
    config: ModelConfig,
    embed_w: Param<T>,
    embed_b: Param<T>,
    pos: Param<T>,
    time_w1: Param<T>,
    time_b1: Param<T>,
    time_w2: Param<T>,
    time_b2: Param<T>,
    blocks: Vec<Block<T>>,
    head_norm: Param<T>,
    head_w: Param<T>,
    head_b: Param<T>,
}

struct Builder<'a, T> {
    init: &'a mut dyn FnMut(&[usize], Init) -> DenseArray<T>,
}

impl<T: Scalar> Builder<'_, T> {
    fn p(&mut self, name: impl Into<String>, shape: &[usize], init: Init) -> Param<T> {
        Param::new(name.into(), ParamKind::Weight, (self.init)(shape, init))
    }

    fn block(&mut self, c: &ModelConfig, i: usize, kind: LayerKind, score: f64) -> Block<T> {
        let d = c.d_model;
        let h = c.mlp_hidden();
        let std = 1.0 / (d as f64).sqrt();
        let depth = 1.0 / (2.0 * c.n_layers as f64).sqrt();
        let feature_map = kind.has_feature_map().then(|| {
            let hq = self.p(format!("blocks.{i}.hq"), &[d, d / 2], Init::Orthogonal);
            let hk = Param::new(format!("blocks.{i}.hk"), ParamKind::Weight, (*hq.value).clone());
            [hq, hk]
        });
        let score = (kind == LayerKind::Mixed).then(|| {
            let mut p = self.p(format!("blocks.{i}.score"), &[1], Init::Const(score));
            p.kind = ParamKind::Score;
            p
        });
        Block {
            kind,
            norm1: self.p(format!("blocks.{i}.norm1"), &[d], Init::Ones),
            wq: self.p(format!("blocks.{i}.wq"), &[d, d], Init::Normal(std)),
            wk: self.p(format!("blocks.{i}.wk"), &[d, d], Init::Normal(std)),
            wv: self.p(format!("blocks.{i}.wv"), &[d, d], Init::Normal(std)),
            feature_map,
            score,
            wo: self.p(format!("blocks.{i}.wo"), &[d, d], Init::Normal(std * depth)),
            norm2: self.p(format!("blocks.{i}.norm2"), &[d], Init::Ones),
            w1: self.p(format!("blocks.{i}.w1"), &[d, h], Init::Normal(std)),
            b1: self.p(format!("blocks.{i}.b1"), &[h], Init::Zeros),
            w2: self.p(format!("blocks.{i}.w2"), &[h, d], Init::Normal(depth / (h as f64).sqrt())),
            b2: self.p(format!("blocks.{i}.b2"), &[d], Init::Zeros),
        }
    }
}

fn random_init<T: Scalar, R: Rng + ?Sized>(rng: &mut R) -> impl FnMut(&[usize], Init) -> DenseArray<T> + '_ {
    move |shape, init| match init {
        Init::Normal(std) => DenseArray::randn(shape, std, rng),
        Init::Zeros => DenseArray::zeros(shape),
        Init::Ones => DenseArray::ones(shape),
        Init::Const(v) => DenseArray::full(shape, T::of(v)),
        Init::Orthogonal => orthogonal_hedgehog(shape[0], 1.0, rng).expect("even d_model checked by config"),
    }
}

fn rms_norm<'t, T: Scalar>(x: Var<'t, T>, gain: Var<'t, T>) -> Result<Var<'t, T>> {
    let inv = x.mul(x)?.mean_last().add_scalar(T::of(NORM_EPS)).powf(T::of(-0.5));
    x.mul(inv)?.mul(gain)
}

/// Sinusoidal features of `t`, repeated for every token: `[B, n, d]`.
/// Frequencies are geometric from 1 to `d/2`.
fn time_features<T: Scalar>(t: &[T], n: usize, d: usize) -> DenseArray<T> {
    let half = d / 2;
    let step = if half > 1 { (half as f64).ln() / (half - 1) as f64 } else { 0.0 };
    DenseArray::from_fn(&[t.len(), n, d], |i| {
        let b = i / (n * d);
        let j = i % d;
        let w = (step * (j % half) as f64).exp();
        let a = w * t[b].as_f64();
        T::of(if j < half { a.sin() } else { a.cos() })
    })
}

impl<T: Scalar> ToyTransformer<T> {
    fn build(config: &ModelConfig, kinds: &[LayerKind], score: f64, init: &mut dyn FnMut(&[usize], Init) -> DenseArray<T>) -> Result<Self> {
        config.validate()?;
        if kinds.len() != config.n_layers {
            return Err(Error::Config(format!(
                "{} layer kinds for {} layers",
                kinds.len(),
                config.n_layers
            )));
        }
        let (d, s, n) = (config.d_model, config.d_state, config.seq_len);
        let std = 1.0 / (d as f64).sqrt();
        let mut b = Builder { init };
        Ok(Self {
            embed_w: b.p("embed.w", &[s, d], Init::Normal(1.0 / (s as f64).sqrt())),
            embed_b: b.p("embed.b", &[d], Init::Zeros),
            pos: b.p("embed.pos", &[n, d], Init::Normal(0.5)),
            time_w1: b.p("time.w1", &[d, d], Init::Normal(std)),
            time_b1: b.p("time.b1", &[d], Init::Zeros),
            time_w2: b.p("time.w2", &[d, d], Init::Normal(std)),
            time_b2: b.p("time.b2", &[d], Init::Zeros),
            blocks: kinds
                .iter()
                .enumerate()
                .map(|(i, &k)| b.block(config, i, k, score))
                .collect(),
            head_norm: b.p("head.norm", &[d], Init::Ones),
            head_w: b.p("head.w", &[d, s], Init::Normal(std)),
            head_b: b.p("head.b", &[s], Init::Zeros),
            config: config.clone(),
        })
    }

    /// Randomly initialised model with the given attention kind per layer.
    /// Mixed layers start at score `r = 1`.
    pub fn new<R: Rng + ?Sized>(config: &ModelConfig, kinds: &[LayerKind], rng: &mut R) -> Result<Self> {
        Self::build(config, kinds, 1.0, &mut random_init(rng))
    }

    /// All-softmax model, the usual teacher architecture.
    pub fn softmax<R: Rng + ?Sized>(config: &ModelConfig, rng: &mut R) -> Result<Self> {
        Self::new(config, &vec![LayerKind::Softmax; config.n_layers], rng)
    }

    /// Model with every parameter zero (norm gains included); used as the
    /// target skeleton when loading checkpoints.
    pub(crate) fn zeros(config: &ModelConfig, kinds: &[LayerKind]) -> Result<Self> {
        Self::build(config, kinds, 0.0, &mut |shape, _| DenseArray::zeros(shape))
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layer_kinds(&self) -> Vec<LayerKind> {
        self.blocks.iter().map(|b| b.kind).collect()
    }

    /// Changes the attention kind of layer `i`, adding a freshly initialised
    /// feature map or score (`r = score_init`) when needed and dropping
    /// parameters the new kind does not use.
    pub fn set_layer_kind<R: Rng + ?Sized>(&mut self, i: usize, kind: LayerKind, score_init: f64, rng: &mut R) -> Result<()> {
        let d = self.config.d_model;
        let block = self
            .blocks
            .get_mut(i)
            .ok_or_else(|| Error::InvalidArgument(format!("layer {i} out of range")))?;
        if kind.has_feature_map() {
            if block.feature_map.is_none() {
                let w = orthogonal_hedgehog(d, 1.0, rng)?;
                block.feature_map = Some([
                    Param::new(format!("blocks.{i}.hq"), ParamKind::Weight, w.clone()),
                    Param::new(format!("blocks.{i}.hk"), ParamKind::Weight, w),
                ]);
            }
        } else {
            block.feature_map = None;
        }
        if kind == LayerKind::Mixed {
            if block.score.is_none() {
                block.score = Some(Param::new(
                    format!("blocks.{i}.score"),
                    ParamKind::Score,
                    DenseArray::full(&[1], T::of(score_init)),
                ));
            }
        } else {
            block.score = None;
        }
        block.kind = kind;
        Ok(())
    }

    /// Copy of a softmax model with every layer turned into a mixed layer
    /// (new Hedgehog maps, `r = 1`); the copy computes the same function.
    pub fn to_mixed<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Self> {
        let mut out = self.clone();
        for i in 0..out.blocks.len() {
            out.set_layer_kind(i, LayerKind::Mixed, 1.0, rng)?;
        }
        Ok(out)
    }

    /// Current scores, `None` for layers that are not mixed.
    pub fn scores(&self) -> Vec<Option<T>> {
        self.blocks
            .iter()
            .map(|b| b.score.as_ref().map(|p| p.value.data()[0]))
            .collect()
    }

    pub fn set_score(&mut self, layer: usize, value: T) -> Result<()> {
        let p = self
            .blocks
            .get_mut(layer)
            .and_then(|b| b.score.as_mut())
            .ok_or_else(|| Error::InvalidArgument(format!("layer {layer} has no score")))?;
        p.value_mut().data_mut()[0] = value;
        Ok(())
    }

    /// Replaces every mixed layer by the branch its rounded score selects
    /// (ties keep softmax) and drops parameters the result does not use.
    pub fn finalize(&self) -> Self {
        let mut out = self.clone();
        for (i, b) in out.blocks.iter_mut().enumerate() {
            if b.kind != LayerKind::Mixed {
                continue;
            }
            let r = b.score.as_ref().map(|p| p.value.data()[0]).unwrap_or(T::one());
            let keep = SelectionScore::new(r, i).keeps_softmax();
            b.score = None;
            if keep {
                b.kind = LayerKind::Softmax;
                b.feature_map = None;
            } else {
                b.kind = LayerKind::Linear;
            }
        }
        out
    }

    /// Every parameter in declaration order.
    pub fn params(&self) -> Vec<&Param<T>> {
        let mut v = vec![
            &self.embed_w,
            &self.embed_b,
            &self.pos,
            &self.time_w1,
            &self.time_b1,
            &self.time_w2,
            &self.time_b2,
        ];
        for b in &self.blocks {
            v.extend([&b.norm1, &b.wq, &b.wk, &b.wv]);
            if let Some([hq, hk]) = &b.feature_map {
                v.extend([hq, hk]);
            }
            if let Some(s) = &b.score {
                v.push(s);
            }
            v.extend([&b.wo, &b.norm2, &b.w1, &b.b1, &b.w2, &b.b2]);
        }
        v.extend([&self.head_norm, &self.head_w, &self.head_b]);
        v
    }

    /// Mutable access in the same order as [`Self::params`].
    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut v = vec![
            &mut self.embed_w,
            &mut self.embed_b,
            &mut self.pos,
            &mut self.time_w1,
            &mut self.time_b1,
            &mut self.time_w2,
            &mut self.time_b2,
        ];
        for b in &mut self.blocks {
            v.extend([&mut b.norm1, &mut b.wq, &mut b.wk, &mut b.wv]);
            if let Some([hq, hk]) = &mut b.feature_map {
                v.extend([hq, hk]);
            }
            if let Some(s) = &mut b.score {
                v.push(s);
            }
            v.extend([&mut b.wo, &mut b.norm2, &mut b.w1, &mut b.b1, &mut b.w2, &mut b.b2]);
        }
        v.extend([&mut self.head_norm, &mut self.head_w, &mut self.head_b]);
        v
    }

    pub fn num_parameters(&self) -> usize {
        self.params().iter().map(|p| p.value.len()).sum()
    }

    /// Binds parameters to `tape`; `trainable` decides per parameter.
    pub fn bind_with<'t>(&self, tape: &'t Tape<T>, trainable: impl Fn(&Param<T>) -> bool) -> Vec<Var<'t, T>> {
        self.params()
            .into_iter()
            .map(|p| tape.shared_leaf(Rc::clone(&p.value), trainable(p)))
            .collect()
    }

    /// Same model with parameters converted to another precision.
    pub fn cast<U: Scalar>(&self) -> ToyTransformer<U> {
        let mut out = ToyTransformer::<U>::zeros(&self.config, &self.layer_kinds()).expect("valid model");
        for (dst, src) in out.params_mut().into_iter().zip(self.params()) {
            dst.value = Rc::new(src.value.cast());
        }
        out
    }

    fn check_input(&self, shape: &[usize], t: &[T]) -> Result<()> {
        let c = &self.config;
        if shape.len() != 3 || shape[1] != c.seq_len || shape[2] != c.d_state || shape[0] != t.len() {
            return Err(Error::shape(
                "model",
                format!(
                    "expected x of shape [B, {}, {}] with B times, got {:?} and {} times",
                    c.seq_len,
                    c.d_state,
                    shape,
                    t.len()
                ),
            ));
        }
        Ok(())
    }
}

impl<T: Scalar> DifferentiableVelocity<T> for ToyTransformer<T> {
    fn bind<'t>(&self, tape: &'t Tape<T>, trainable: bool) -> Vec<Var<'t, T>> {
        self.bind_with(tape, |_| trainable)
    }

    fn forward<'t>(&self, params: &[Var<'t, T>], x: Var<'t, T>, t: &[T]) -> Result<Var<'t, T>> {
        self.check_input(&x.shape(), t)?;
        let expected = self.params().len();
        if params.len() != expected {
            return Err(Error::shape(
                "model",
                format!("{} bound parameters for a model with {expected}", params.len()),
            ));
        }
        let tape = x.tape();
        let c = &self.config;
        let mut next = params.iter().copied();
        let mut p = || next.next().expect("parameter count checked");

        let (ew, eb, pos) = (p(), p(), p());
        let mut h = x.matmul(ew)?.add(eb)?.add(pos)?;
        let (tw1, tb1, tw2, tb2) = (p(), p(), p(), p());
        let feats = tape.constant(time_features(t, c.seq_len, c.d_model));
        let temb = feats.matmul(tw1)?.add(tb1)?.silu().matmul(tw2)?.add(tb2)?;
        h = h.add(temb)?;

        for block in &self.blocks {
            let (n1, wq, wk, wv) = (p(), p(), p(), p());
            let fmap = block.feature_map.as_ref().map(|_| (p(), p()));
            let score = block.score.as_ref().map(|_| p());
            let a = rms_norm(h, n1)?;
            let (q, k, v) = (a.matmul(wq)?, a.matmul(wk)?, a.matmul(wv)?);
            let mixed = match (block.kind, fmap, score) {
                (LayerKind::Softmax, _, _) => attn::softmax_attention(q, k, v, c.similarity)?,
                (LayerKind::Linear, Some((hq, hk)), _) => attn::linear_attention(q, k, v, hq, hk)?,
                (LayerKind::Mixed, Some((hq, hk)), Some(r)) => attn::mixed_attention(q, k, v, hq, hk, r, c.similarity)?,
                _ => unreachable!("block parameters match its kind"),
            };
            let (wo, n2, w1, b1, w2, b2) = (p(), p(), p(), p(), p(), p());
            h = h.add(mixed.matmul(wo)?)?;
            let m = rms_norm(h, n2)?;
            h = h.add(m.matmul(w1)?.add(b1)?.silu().matmul(w2)?.add(b2)?)?;
        }

        let (hn, hw, hb) = (p(), p(), p());
        rms_norm(h, hn)?.matmul(hw)?.add(hb)
    }
}

impl<T: Scalar> VelocityField<T> for ToyTransformer<T> {
    fn velocity(&self, x: &DenseArray<T>, t: &[T]) -> Result<DenseArray<T>> {
        eval_no_grad(self, x, t)
    }
}

/// Read-only copy of a model. It can only be evaluated, never bound to a
/// tape, so it cannot receive gradients.
#[derive(Clone, Debug)]
pub struct Frozen<T>(ToyTransformer<T>);

impl<T: Scalar> Frozen<T> {
    pub fn new(model: &ToyTransformer<T>) -> Self {
        Self(model.clone())
    }

    pub fn model(&self) -> &ToyTransformer<T> {
        &self.0
    }

    /// Overwrites `target` with this snapshot.
    pub fn restore_into(&self, target: &mut ToyTransformer<T>) {
        *target = self.0.clone();
    }
}

impl<T: Scalar> VelocityField<T> for Frozen<T> {
    fn velocity(&self, x: &DenseArray<T>, t: &[T]) -> Result<DenseArray<T>> {
        self.0.velocity(x, t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            d_model: 8,
            seq_len: 4,
            d_state: 2,
            mlp_ratio: 2,
            similarity: SimilarityScale::Dim,
        }
    }

    fn input(b: usize, c: &ModelConfig, rng: &mut ChaCha8Rng) -> DenseArray<f64> {
        DenseArray::randn(&[b, c.seq_len, c.d_state], 1.0, rng)
    }

    #[test]
    fn output_shape_and_batch_mismatch() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let c = small();
        let m = ToyTransformer::<f64>::softmax(&c, &mut rng).unwrap();
        let x = input(3, &c, &mut rng);
        let u = m.velocity(&x, &[0.1, 0.5, 0.9]).unwrap();
        assert_eq!(u.shape(), x.shape());
        assert!(matches!(m.velocity(&x, &[0.1, 0.5]), Err(Error::Shape { .. })));
        let bad = DenseArray::<f64>::zeros(&[3, c.seq_len + 1, c.d_state]);
        assert!(m.velocity(&bad, &[0.1, 0.5, 0.9]).is_err());
    }

    #[test]
    fn zero_weights_give_zero_velocity() {
        let c = small();
        let m = ToyTransformer::<f64>::zeros(&c, &[LayerKind::Softmax; 2]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let u = m.velocity(&input(2, &c, &mut rng), &[0.3, 0.7]).unwrap();
        assert!(u.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mixed_copy_at_score_one_matches_teacher() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let c = small();
        let teacher = ToyTransformer::<f64>::softmax(&c, &mut rng).unwrap();
        let student = teacher.to_mixed(&mut rng).unwrap();
        assert_eq!(student.scores(), vec![Some(1.0); 2]);
        let x = input(2, &c, &mut rng);
        let t = [0.2, 0.8];
        let diff = teacher
            .velocity(&x, &t)
            .unwrap()
            .max_abs_diff(&student.velocity(&x, &t).unwrap())
            .unwrap();
        assert!(diff < 1e-12, "{diff}");
        assert!(student.num_parameters() > teacher.num_parameters());
    }

    #[test]
    fn finalize_rounds_scores() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let c = small();
        let mut m = ToyTransformer::<f64>::softmax(&c, &mut rng).unwrap().to_mixed(&mut rng).unwrap();
        m.set_score(0, 0.5).unwrap();
        m.set_score(1, 0.49).unwrap();
        let f = m.finalize();
        assert_eq!(f.layer_kinds(), vec![LayerKind::Softmax, LayerKind::Linear]);
        assert_eq!(f.scores(), vec![None, None]);
        // softmax layer lost its feature map; linear layer kept it
        let names: Vec<_> = f.params().iter().map(|p| p.name.clone()).collect();
        assert!(!names.contains(&"blocks.0.hq".to_string()));
        assert!(names.contains(&"blocks.1.hq".to_string()));
    }

    #[test]
    fn snapshot_is_independent() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut m = ToyTransformer::<f64>::softmax(&small(), &mut rng).unwrap();
        let snap = Frozen::new(&m);
        m.params_mut()[0].value_mut().data_mut()[0] += 1.0;
        assert_ne!(m.params()[0].value, snap.model().params()[0].value);
        snap.restore_into(&mut m);
        assert_eq!(m.params()[0].value, snap.model().params()[0].value);
    }

    #[test]
    fn odd_width_is_a_config_error() {
        let c = ModelConfig { d_model: 7, ..small() };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        assert!(matches!(ToyTransformer::<f64>::softmax(&c, &mut rng), Err(Error::Config(_))));
    }
}
