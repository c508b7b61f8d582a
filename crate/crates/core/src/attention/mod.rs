//! Softmax, kernelized and linear attention, plus the score-gated mixture
//! of the softmax and linear branches.
//!
//! The functions here are eager kernels on single `n × d` sequences and are
//! what the scaling benchmark times. [`tape`] holds the differentiable
//! batched equivalents used by the toy transformer.

pub mod tape;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::array::{softmax_in_place, DenseArray};
use crate::error::{Error, Result};
use crate::parallel;
use crate::scalar::Scalar;

/// Added to the linear-attention normaliser.
pub const DENOMINATOR_EPS: f64 = 1e-6;

/// Divisor applied to `q·kᵀ` inside the softmax similarity.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimilarityScale {
    /// `exp(q·kᵀ / √d)`, the usual transformer scaling.
    SqrtDim,
    /// `exp(q·kᵀ / d)`, the form used by the mixed layer.
    #[default]
    Dim,
}

impl SimilarityScale {
    pub fn factor<T: Scalar>(self, d: usize) -> T {
        let d = d as f64;
        T::of(match self {
            SimilarityScale::SqrtDim => 1.0 / d.sqrt(),
            SimilarityScale::Dim => 1.0 / d,
        })
    }
}

/// Per-layer projections: `wq, wk, wv` are `d × d`, the Hedgehog maps
/// `hq, hk` are `d × d/2`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams<T> {
    pub wq: DenseArray<T>,
    pub wk: DenseArray<T>,
    pub wv: DenseArray<T>,
    pub hq: DenseArray<T>,
    pub hk: DenseArray<T>,
}

impl<T: Scalar> AttentionParams<T> {
    pub fn random<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Result<Self> {
        check_even(d)?;
        let std = 1.0 / (d as f64).sqrt();
        let hedgehog = orthogonal_hedgehog(d, 1.0, rng)?;
        Ok(Self {
            wq: DenseArray::randn(&[d, d], std, rng),
            wk: DenseArray::randn(&[d, d], std, rng),
            wv: DenseArray::randn(&[d, d], std, rng),
            hq: hedgehog.clone(),
            hk: hedgehog,
        })
    }

    pub fn dim(&self) -> usize {
        self.wq.shape()[0]
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        check_even(d)?;
        for (name, w, cols) in [
            ("wq", &self.wq, d),
            ("wk", &self.wk, d),
            ("wv", &self.wv, d),
            ("hq", &self.hq, d / 2),
            ("hk", &self.hk, d / 2),
        ] {
            if w.shape() != [d, cols] {
                return Err(Error::shape("attention_params", format!("{name} is {:?}", w.shape())));
            }
            if !w.all_finite() {
                return Err(Error::NonFinite(format!("attention parameter {name}")));
            }
        }
        Ok(())
    }

    /// Projects an `n × d` input to `(q, k, v)`.
    pub fn project(&self, x: &DenseArray<T>) -> Result<[DenseArray<T>; 3]> {
        Ok([x.matmul(&self.wq)?, x.matmul(&self.wk)?, x.matmul(&self.wv)?])
    }
}

/// Learnable per-layer gate between the softmax (`r = 1`) and linear
/// (`r = 0`) branches.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SelectionScore<T> {
    pub value: T,
    pub layer: usize,
}

impl<T: Scalar> SelectionScore<T> {
    pub fn new(value: T, layer: usize) -> Self {
        Self { value, layer }
    }

    /// The value actually used in the mixture, clipped into `[0, 1]`.
    pub fn effective(&self) -> T {
        self.value.max(T::zero()).min(T::one())
    }

    /// Branch kept after finalisation; a tie at 0.5 keeps the softmax branch.
    pub fn keeps_softmax(&self) -> bool {
        self.effective().round() >= T::one()
    }
}

fn check_even(d: usize) -> Result<()> {
    if d == 0 || d % 2 != 0 {
        return Err(Error::InvalidArgument(format!(
            "feature dimension must be even and positive, got {d}"
        )));
    }
    Ok(())
}

fn check_qkv<T: Scalar>(
    op: &'static str,
    q: &DenseArray<T>,
    k: &DenseArray<T>,
    v: &DenseArray<T>,
) -> Result<(usize, usize, usize)> {
    if q.rank() != 2 || k.rank() != 2 || v.rank() != 2 {
        return Err(Error::shape(
            op,
            format!("expected rank-2 q/k/v, got {:?} {:?} {:?}", q.shape(), k.shape(), v.shape()),
        ));
    }
    let (n, d) = (q.shape()[0], q.shape()[1]);
    let (m, dv) = (k.shape()[0], v.shape()[1]);
    if k.shape()[1] != d || v.shape()[0] != m {
        return Err(Error::shape(
            op,
            format!("q {:?}, k {:?}, v {:?}", q.shape(), k.shape(), v.shape()),
        ));
    }
    for (name, a) in [("q", q), ("k", k), ("v", v)] {
        if !a.all_finite() {
            return Err(Error::NonFinite(format!("{op} input {name}")));
        }
    }
    Ok((n, m, dv))
}

/// Softmax attention `o_i = Σ_j softmax_j(q_i·k_jᵀ · s) v_j`, streamed one
/// query row at a time so memory stays `O(n·d)`.
pub fn softmax_attention<T: Scalar>(
    q: &DenseArray<T>,
    k: &DenseArray<T>,
    v: &DenseArray<T>,
    scale: SimilarityScale,
) -> Result<DenseArray<T>> {
    let (n, m, dv) = check_qkv("softmax_attention", q, k, v)?;
    let d = q.shape()[1];
    let s: T = scale.factor(d);
    let (qd, kd, vd) = (q.data(), k.data(), v.data());
    let mut out = vec![T::zero(); n * dv];
    parallel::for_each_row(&mut out, dv, m * (d + dv), |i, orow| {
        let qi = &qd[i * d..(i + 1) * d];
        let mut w: Vec<T> = kd
            .chunks_exact(d)
            .map(|kj| qi.iter().zip(kj).map(|(&a, &b)| a * b).sum::<T>() * s)
            .collect();
        softmax_in_place(&mut w);
        for (wj, vj) in w.iter().zip(vd.chunks_exact(dv)) {
            for (o, &x) in orow.iter_mut().zip(vj) {
                *o += *wj * x;
            }
        }
    });
    DenseArray::new(&[n, dv], out)
}

/// Hedgehog feature map `φ(x) = softmax(x·W) ⊕ softmax(−x·W)` with
/// `W: d × d/2`; every output row is positive and sums to 2.
pub fn hedgehog_feature_map<T: Scalar>(x: &DenseArray<T>, w: &DenseArray<T>) -> Result<DenseArray<T>> {
    let d = x.last_dim();
    check_even(d)?;
    if w.shape() != [d, d / 2] {
        return Err(Error::shape(
            "hedgehog_feature_map",
            format!("x {:?} with W {:?}, W must be [{d}, {}]", x.shape(), w.shape(), d / 2),
        ));
    }
    let proj = x.matmul(w)?;
    let half = d / 2;
    let mut out = vec![T::zero(); x.rows() * d];
    parallel::for_each_row(&mut out, d, 8 * d, |i, row| {
        let p = &proj.data()[i * half..(i + 1) * half];
        let (pos, neg) = row.split_at_mut(half);
        pos.copy_from_slice(p);
        for (n, &v) in neg.iter_mut().zip(p) {
            *n = -v;
        }
        softmax_in_place(pos);
        softmax_in_place(neg);
    });
    DenseArray::new(x.shape(), out)
}

/// Kernelized attention computed pair by pair:
/// `o_i = Σ_j φ(q_i)·φ(k_j)ᵀ v_j / (Σ_j φ(q_i)·φ(k_j)ᵀ + ε)`. `O(n²)`; this
/// is the reference that [`linear_attention`] must reproduce, guard included.
pub fn kernel_quadratic_attention<T: Scalar>(
    q: &DenseArray<T>,
    k: &DenseArray<T>,
    v: &DenseArray<T>,
    hq: &DenseArray<T>,
    hk: &DenseArray<T>,
) -> Result<DenseArray<T>> {
    let (n, _, dv) = check_qkv("kernel_quadratic_attention", q, k, v)?;
    let fq = hedgehog_feature_map(q, hq)?;
    let fk = hedgehog_feature_map(k, hk)?;
    let mut out = vec![T::zero(); n * dv];
    for i in 0..n {
        let mut total = T::zero();
        let orow = &mut out[i * dv..(i + 1) * dv];
        for j in 0..k.shape()[0] {
            let w: T = fq.row(i).iter().zip(fk.row(j)).map(|(&a, &b)| a * b).sum();
            total += w;
            for (o, &x) in orow.iter_mut().zip(v.row(j)) {
                *o += w * x;
            }
        }
        let den = total + T::of(DENOMINATOR_EPS);
        for o in orow.iter_mut() {
            *o /= den;
        }
    }
    DenseArray::new(&[n, dv], out)
}

/// Keys per partial sum in [`linear_attention`]. Fixed, so the summation
/// order (and every output bit) does not depend on the thread count.
const KEY_CHUNK: usize = 256;

/// One row of [`hedgehog_feature_map`] written into `out` (length `d`).
fn hedgehog_row<T: Scalar>(x: &[T], w: &[T], out: &mut [T]) {
    let half = out.len() / 2;
    let (pos, neg) = out.split_at_mut(half);
    pos.fill(T::zero());
    for (&xa, wa) in x.iter().zip(w.chunks_exact(half)) {
        for (p, &wc) in pos.iter_mut().zip(wa) {
            *p += xa * wc;
        }
    }
    for (n, &p) in neg.iter_mut().zip(pos.iter()) {
        *n = -p;
    }
    softmax_in_place(pos);
    softmax_in_place(neg);
}

/// Linear attention in `Θ(n·d²)`: one pass over keys accumulates
/// `S = Σ_j φ(k_j)ᵀ v_j` and `z = Σ_j φ(k_j)`, then each query reads
/// `φ(q_i)·S / (φ(q_i)·z + ε)`. Feature rows are computed on the fly, so the
/// working set beyond the inputs is `O(d²)`.
pub fn linear_attention<T: Scalar>(
    q: &DenseArray<T>,
    k: &DenseArray<T>,
    v: &DenseArray<T>,
    hq: &DenseArray<T>,
    hk: &DenseArray<T>,
) -> Result<DenseArray<T>> {
    let (n, m, dv) = check_qkv("linear_attention", q, k, v)?;
    let d = q.shape()[1];
    check_even(d)?;
    for (name, w) in [("W_q", hq), ("W_k", hk)] {
        if w.shape() != [d, d / 2] {
            return Err(Error::shape(
                "linear_attention",
                format!("{name} is {:?}, expected [{d}, {}]", w.shape(), d / 2),
            ));
        }
    }
    let (kd, vd) = (k.data(), v.data());
    let partials = parallel::map_indexed(m.div_ceil(KEY_CHUNK), |c| {
        let mut kv = vec![T::zero(); d * dv];
        let mut z = vec![T::zero(); d];
        let mut f = vec![T::zero(); d];
        for j in c * KEY_CHUNK..((c + 1) * KEY_CHUNK).min(m) {
            hedgehog_row(&kd[j * d..(j + 1) * d], hk.data(), &mut f);
            let vj = &vd[j * dv..(j + 1) * dv];
            for ((&fa, zs), kv_row) in f.iter().zip(z.iter_mut()).zip(kv.chunks_exact_mut(dv)) {
                *zs += fa;
                for (s, &x) in kv_row.iter_mut().zip(vj) {
                    *s += fa * x;
                }
            }
        }
        (kv, z)
    });
    let mut kv = vec![T::zero(); d * dv];
    let mut z = vec![T::zero(); d];
    for (pkv, pz) in partials {
        kv.iter_mut().zip(&pkv).for_each(|(a, &b)| *a += b);
        z.iter_mut().zip(&pz).for_each(|(a, &b)| *a += b);
    }

    let eps = T::of(DENOMINATOR_EPS);
    let qd = q.data();
    let mut out = vec![T::zero(); n * dv];
    parallel::for_each_row(&mut out, dv, 3 * d * dv, |i, orow| {
        let mut f = vec![T::zero(); d];
        hedgehog_row(&qd[i * d..(i + 1) * d], hq.data(), &mut f);
        let den: T = f.iter().zip(&z).map(|(&a, &b)| a * b).sum();
        if !(den > T::zero()) || !den.is_finite() {
            orow.fill(T::nan());
            return;
        }
        for (&fa, kv_row) in f.iter().zip(kv.chunks_exact(dv)) {
            for (o, &s) in orow.iter_mut().zip(kv_row) {
                *o += fa * s;
            }
        }
        let den = den + eps;
        for o in orow.iter_mut() {
            *o /= den;
        }
    });
    if let Some(i) = out.chunks_exact(dv.max(1)).position(|row| row.iter().any(|x| !x.is_finite())) {
        return Err(Error::NonFinite(format!(
            "linear attention normaliser for query {i} (degenerate feature map)"
        )));
    }
    DenseArray::new(&[n, dv], out)
}

/// `r · softmax_branch + (1 − r) · linear_branch` with `r` clipped to `[0, 1]`.
pub fn mixed_attention<T: Scalar>(
    q: &DenseArray<T>,
    k: &DenseArray<T>,
    v: &DenseArray<T>,
    params: &AttentionParams<T>,
    r: SelectionScore<T>,
    scale: SimilarityScale,
) -> Result<DenseArray<T>> {
    let soft = softmax_attention(q, k, v, scale)?;
    let lin = linear_attention(q, k, v, &params.hq, &params.hk)?;
    let r = r.effective();
    let one_minus = T::one() - r;
    soft.zip_map(&lin, "mixed_attention", |a, b| r * a + one_minus * b)
}

/// Hedgehog initialisation: the first `d/2` columns of a random orthogonal
/// matrix, times `gain`.
pub fn orthogonal_hedgehog<T: Scalar, R: Rng + ?Sized>(d: usize, gain: f64, rng: &mut R) -> Result<DenseArray<T>> {
    check_even(d)?;
    let half = d / 2;
    let g = DenseArray::<f64>::randn(&[d, d], 1.0, rng);
    // modified Gram-Schmidt over columns
    let mut cols: Vec<Vec<f64>> = (0..half)
        .map(|c| (0..d).map(|r| g.data()[r * d + c]).collect())
        .collect();
    for c in 0..half {
        for p in 0..c {
            let dot: f64 = cols[c].iter().zip(&cols[p]).map(|(a, b)| a * b).sum();
            let prev = cols[p].clone();
            for (x, y) in cols[c].iter_mut().zip(prev) {
                *x -= dot * y;
            }
        }
        let norm = cols[c].iter().map(|x| x * x).sum::<f64>().sqrt();
        for x in cols[c].iter_mut() {
            *x /= norm;
        }
    }
    Ok(DenseArray::from_fn(&[d, half], |i| {
        T::of(gain * cols[i % half][i / half])
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(11)
    }

    #[test]
    fn single_token_returns_its_value() {
        let mut rng = rng();
        let q = DenseArray::<f64>::randn(&[1, 4], 1.0, &mut rng);
        let k = DenseArray::randn(&[1, 4], 1.0, &mut rng);
        let v = DenseArray::randn(&[1, 4], 1.0, &mut rng);
        let h = orthogonal_hedgehog::<f64, _>(4, 1.0, &mut rng).unwrap();
        for scale in [SimilarityScale::Dim, SimilarityScale::SqrtDim] {
            let o = softmax_attention(&q, &k, &v, scale).unwrap();
            assert!(o.max_abs_diff(&v).unwrap() < 1e-12);
        }
        // exact up to the ε added to the normaliser
        for o in [
            linear_attention(&q, &k, &v, &h, &h).unwrap(),
            kernel_quadratic_attention(&q, &k, &v, &h, &h).unwrap(),
        ] {
            assert!(o.max_abs_diff(&v).unwrap() < 1e-5 * v.max_abs());
        }
    }

    #[test]
    fn dominant_key_selects_its_value() {
        // q = k, key 0 aligned with the query by a logit gap of 50
        let d = 2;
        let big = (50.0f64 * d as f64).sqrt();
        let k = DenseArray::<f64>::from_f64(&[3, 2], &[big, 0.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        let q = DenseArray::from_f64(&[1, 2], &[big, 0.0]).unwrap();
        let v = DenseArray::from_f64(&[3, 2], &[1.0, 2.0, -5.0, 3.0, 7.0, 0.5]).unwrap();
        let o = softmax_attention(&q, &k, &v, SimilarityScale::Dim).unwrap();
        assert!((o.data()[0] - 1.0).abs() < 1e-9 && (o.data()[1] - 2.0).abs() < 1e-9, "{o:?}");
    }

    #[test]
    fn hedgehog_zero_row_is_uniform() {
        let x = DenseArray::<f32>::zeros(&[1, 4]);
        let w = orthogonal_hedgehog(4, 1.0, &mut rng()).unwrap();
        let phi = hedgehog_feature_map(&x, &w).unwrap();
        assert_eq!(phi.data(), &[0.5; 4]);
    }

    #[test]
    fn hedgehog_sign_symmetry() {
        let mut rng = rng();
        let x = DenseArray::<f64>::randn(&[5, 6], 1.0, &mut rng);
        let w = DenseArray::randn(&[6, 3], 1.0, &mut rng);
        let a = hedgehog_feature_map(&x, &w).unwrap();
        let b = hedgehog_feature_map(&x.scale(-1.0), &w.scale(-1.0)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn hedgehog_rejects_odd_dimension() {
        let x = DenseArray::<f32>::zeros(&[2, 3]);
        let w = DenseArray::zeros(&[3, 1]);
        assert!(matches!(hedgehog_feature_map(&x, &w), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn mixed_endpoints_and_midpoint() {
        let mut rng = rng();
        let d = 8;
        let params = AttentionParams::<f64>::random(d, &mut rng).unwrap();
        let x = DenseArray::randn(&[6, d], 1.0, &mut rng);
        let [q, k, v] = params.project(&x).unwrap();
        let soft = softmax_attention(&q, &k, &v, SimilarityScale::Dim).unwrap();
        let lin = linear_attention(&q, &k, &v, &params.hq, &params.hk).unwrap();
        let at = |r: f64| {
            mixed_attention(&q, &k, &v, &params, SelectionScore::new(r, 0), SimilarityScale::Dim).unwrap()
        };
        assert_eq!(at(1.0), soft);
        assert_eq!(at(0.0), lin);
        assert_eq!(at(3.0), soft, "r is clipped before use");
        let mid = soft.zip_map(&lin, "mean", |a, b| 0.5 * (a + b)).unwrap();
        assert!(at(0.5).max_abs_diff(&mid).unwrap() < 1e-15);
    }

    #[test]
    fn orthogonal_columns() {
        let w = orthogonal_hedgehog::<f64, _>(8, 1.0, &mut rng()).unwrap();
        for a in 0..4 {
            for b in 0..4 {
                let dot: f64 = (0..8).map(|r| w.data()[r * 4 + a] * w.data()[r * 4 + b]).sum();
                let want = if a == b { 1.0 } else { 0.0 };
                assert!((dot - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn score_rounding_rule() {
        assert!(SelectionScore::new(0.5f32, 0).keeps_softmax());
        assert!(!SelectionScore::new(0.4999f32, 0).keeps_softmax());
        assert!(!SelectionScore::new(-2.0f32, 0).keeps_softmax());
        assert_eq!(SelectionScore::new(1.7f32, 0).effective(), 1.0);
    }
}
