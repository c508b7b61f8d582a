//! Differentiable attention over batched `[.., n, d]` inputs.

use super::{SimilarityScale, DENOMINATOR_EPS};
use crate::array::DenseArray;
use crate::error::{Error, Result};
use crate::grad::Var;
use crate::scalar::Scalar;

/// `softmax(x·W) ⊕ softmax(−x·W)` along the feature axis.
pub fn hedgehog<'t, T: Scalar>(x: Var<'t, T>, w: Var<'t, T>) -> Result<Var<'t, T>> {
    let d = *x.shape().last().unwrap_or(&0);
    if d % 2 != 0 || w.shape() != [d, d / 2] {
        return Err(Error::shape(
            "hedgehog",
            format!("x {:?} with W {:?}", x.shape(), w.shape()),
        ));
    }
    let p = x.matmul(w)?;
    Var::concat_last(&[p.softmax_last(), p.neg().softmax_last()])
}

pub fn softmax_attention<'t, T: Scalar>(
    q: Var<'t, T>,
    k: Var<'t, T>,
    v: Var<'t, T>,
    scale: SimilarityScale,
) -> Result<Var<'t, T>> {
    let d = *q.shape().last().unwrap_or(&1);
    let logits = q.matmul(k.transpose()?)?.mul_scalar(scale.factor(d));
    logits.softmax_last().matmul(v)
}

/// `φ(q)·(φ(k)ᵀ v) / (φ(q)·(φ(k)ᵀ 1) + ε)`; never materialises an `n × n` matrix.
pub fn linear_attention<'t, T: Scalar>(
    q: Var<'t, T>,
    k: Var<'t, T>,
    v: Var<'t, T>,
    hq: Var<'t, T>,
    hk: Var<'t, T>,
) -> Result<Var<'t, T>> {
    let fq = hedgehog(q, hq)?;
    let fk = hedgehog(k, hk)?;
    let fkt = fk.transpose()?;
    let kv = fkt.matmul(v)?;
    let mut ones_shape = k.shape();
    if let Some(last) = ones_shape.last_mut() {
        *last = 1;
    }
    let ones = q.tape().constant(DenseArray::ones(&ones_shape));
    let ksum = fkt.matmul(ones)?;
    let num = fq.matmul(kv)?;
    let den = fq.matmul(ksum)?.add_scalar(T::of(DENOMINATOR_EPS));
    num.div(den)
}

/// `r·softmax_branch + (1 − r)·linear_branch`, `r` a one-element var
/// clipped to `[0, 1]` before use.
#[allow(clippy::too_many_arguments)]
pub fn mixed_attention<'t, T: Scalar>(
    q: Var<'t, T>,
    k: Var<'t, T>,
    v: Var<'t, T>,
    hq: Var<'t, T>,
    hk: Var<'t, T>,
    r: Var<'t, T>,
    scale: SimilarityScale,
) -> Result<Var<'t, T>> {
    let r = r.clip(T::zero(), T::one());
    let soft = softmax_attention(q, k, v, scale)?;
    let lin = linear_attention(q, k, v, hq, hk)?;
    let one_minus = r.neg().add_scalar(T::one());
    soft.mul(r)?.add(lin.mul(one_minus)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::{self as eager, orthogonal_hedgehog, AttentionParams, SelectionScore};
    use crate::grad::{grad_check, Tape};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn taped_kernels_match_eager_kernels() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let d = 8;
        let p = AttentionParams::<f64>::random(d, &mut rng).unwrap();
        let x = DenseArray::randn(&[10, d], 1.0, &mut rng);
        let [q, k, v] = p.project(&x).unwrap();
        let tape = Tape::no_grad();
        let (tq, tk, tv) = (tape.constant(q.clone()), tape.constant(k.clone()), tape.constant(v.clone()));
        let (hq, hk) = (tape.constant(p.hq.clone()), tape.constant(p.hk.clone()));
        for scale in [SimilarityScale::Dim, SimilarityScale::SqrtDim] {
            let a = softmax_attention(tq, tk, tv, scale).unwrap().value();
            let b = eager::softmax_attention(&q, &k, &v, scale).unwrap();
            assert!(a.max_abs_diff(&b).unwrap() < 1e-12);
        }
        let a = linear_attention(tq, tk, tv, hq, hk).unwrap().value();
        let b = eager::linear_attention(&q, &k, &v, &p.hq, &p.hk).unwrap();
        assert!(a.max_abs_diff(&b).unwrap() < 1e-12);
        let r = tape.constant(DenseArray::from_f64(&[1], &[0.3]).unwrap());
        let a = mixed_attention(tq, tk, tv, hq, hk, r, SimilarityScale::Dim).unwrap().value();
        let b = eager::mixed_attention(&q, &k, &v, &p, SelectionScore::new(0.3, 0), SimilarityScale::Dim).unwrap();
        assert!(a.max_abs_diff(&b).unwrap() < 1e-12);
    }

    #[test]
    fn batched_linear_attention_is_per_sequence() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let d = 4;
        let h = orthogonal_hedgehog::<f64, _>(d, 1.0, &mut rng).unwrap();
        let q = DenseArray::randn(&[2, 5, d], 1.0, &mut rng);
        let k = DenseArray::randn(&[2, 5, d], 1.0, &mut rng);
        let v = DenseArray::randn(&[2, 5, d], 1.0, &mut rng);
        let tape = Tape::no_grad();
        let out = linear_attention(
            tape.constant(q.clone()),
            tape.constant(k.clone()),
            tape.constant(v.clone()),
            tape.constant(h.clone()),
            tape.constant(h.clone()),
        )
        .unwrap()
        .value();
        for b in 0..2 {
            let slice = |a: &DenseArray<f64>| a.reshape(&[10, d]).unwrap().row_slice(5 * b, 5 * b + 5).unwrap();
            let want = eager::linear_attention(&slice(&q), &slice(&k), &slice(&v), &h, &h).unwrap();
            let got = slice(&out);
            assert!(got.max_abs_diff(&want).unwrap() < 1e-12);
        }
    }

    #[test]
    fn score_gradient_matches_branch_difference() {
        // d/dr Σ w ⊙ (r·S + (1−r)·L) = Σ w ⊙ (S − L)
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let d = 4;
        let p = AttentionParams::<f64>::random(d, &mut rng).unwrap();
        let x = DenseArray::randn(&[6, d], 1.0, &mut rng);
        let w = DenseArray::randn(&[6, d], 1.0, &mut rng);
        let [q, k, v] = p.project(&x).unwrap();
        let point = DenseArray::from_f64(&[1], &[0.4]).unwrap();
        let check = grad_check(|r| {
            let tape = r.tape();
            let o = mixed_attention(
                tape.constant(q.clone()),
                tape.constant(k.clone()),
                tape.constant(v.clone()),
                tape.constant(p.hq.clone()),
                tape.constant(p.hk.clone()),
                r,
                SimilarityScale::Dim,
            )?;
            o.mul(tape.constant(w.clone()))?.sum()
        }, &point, 1e-5).unwrap();
        assert!(check.max_rel_error < 1e-3, "{check:?}");
        let soft = eager::softmax_attention(&q, &k, &v, SimilarityScale::Dim).unwrap();
        let lin = eager::linear_attention(&q, &k, &v, &p.hq, &p.hk).unwrap();
        let diff: f64 = soft.sub(&lin).unwrap().data().iter().zip(w.data()).map(|(a, b)| a * b).sum();
        assert!((check.tape_grad[0] - diff).abs() < 1e-10);
    }
}
