//! Dense row-major arrays and the numeric kernels shared by the eager and
//! taped code paths.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::parallel;
use crate::scalar::Scalar;

/// N-dimensional row-major array. `data.len()` always equals the product of
/// `shape`; a rank-0 array holds one element.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseArray<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Scalar> DenseArray<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        if numel(shape) != data.len() {
            return Err(Error::shape(
                "new",
                format!("shape {:?} needs {} elements, got {}", shape, numel(shape), data.len()),
            ));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel(shape)],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn from_fn(shape: &[usize], f: impl FnMut(usize) -> T) -> Self {
        Self {
            shape: shape.to_vec(),
            data: (0..numel(shape)).map(f).collect(),
        }
    }

    pub fn from_f64(shape: &[usize], data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&x| T::of(x)).collect())
    }

    /// Standard normal entries scaled by `std`.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        Self::from_fn(shape, |_| {
            let z: f64 = StandardNormal.sample(rng);
            T::of(z * std)
        })
    }

    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Self {
        Self::from_fn(shape, |_| T::of(rng.random_range(lo..hi)))
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Size of the last axis (1 for rank-0 arrays).
    pub fn last_dim(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    /// Number of rows when viewed as `[len / last_dim, last_dim]`.
    pub fn rows(&self) -> usize {
        self.len() / self.last_dim().max(1)
    }

    /// The single value of a one-element array.
    pub fn item(&self) -> Result<T> {
        match self.data.as_slice() {
            [x] => Ok(*x),
            _ => Err(Error::shape(
                "item",
                format!("expected one element, shape is {:?}", self.shape),
            )),
        }
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        if numel(shape) != self.len() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {:?}", self.shape, shape),
            ));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    pub fn cast<U: Scalar>(&self) -> DenseArray<U> {
        DenseArray {
            shape: self.shape.clone(),
            data: self.data.iter().map(|x| U::of(x.as_f64())).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::shape(op, format!("{:?} vs {:?}", self.shape, other.shape)));
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|x| x * s)
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "sub", |a, b| a - b)
    }

    /// Elementwise product of equal shapes.
    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "mul", |a, b| a * b)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn mean(&self) -> T {
        self.sum() / T::of(self.len() as f64)
    }

    pub fn sq_norm(&self) -> T {
        self.data.iter().map(|&x| x * x).sum()
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, &x| m.max(x.abs()))
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<T> {
        Ok(self.sub(other)?.max_abs())
    }

    /// Swaps the last two axes.
    pub fn transpose_last2(&self) -> Result<Self> {
        let r = self.rank();
        if r < 2 {
            return Err(Error::shape("transpose", format!("rank {} < 2", r)));
        }
        let (m, n) = (self.shape[r - 2], self.shape[r - 1]);
        let mut shape = self.shape.clone();
        shape.swap(r - 2, r - 1);
        let mut out = vec![T::zero(); self.len()];
        for (src, dst) in self.data.chunks(m * n).zip(out.chunks_mut(m * n)) {
            for i in 0..m {
                for j in 0..n {
                    dst[j * m + i] = src[i * n + j];
                }
            }
        }
        Ok(Self { shape, data: out })
    }

    /// Matrix product over the last two axes.
    ///
    /// Either `other` is a plain matrix shared by every leading index of
    /// `self`, or both operands have the same rank and leading axes.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        let plan = MatmulPlan::new(self.shape(), other.shape())?;
        let mut out = vec![T::zero(); numel(&plan.out_shape)];
        plan.run(&self.data, &other.data, &mut out);
        Ok(Self {
            shape: plan.out_shape,
            data: out,
        })
    }

    /// Concatenation along the last axis; all other axes must agree.
    pub fn concat_last(parts: &[&Self]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat", "no inputs"))?;
        let lead = &first.shape[..first.rank().saturating_sub(1)];
        for p in parts {
            if p.rank() != first.rank() || &p.shape[..p.rank() - 1] != lead {
                return Err(Error::shape(
                    "concat",
                    format!("{:?} vs {:?}", first.shape, p.shape),
                ));
            }
        }
        let widths: Vec<usize> = parts.iter().map(|p| p.last_dim()).collect();
        let total: usize = widths.iter().sum();
        let rows = first.rows();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&p.data[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        Ok(Self { shape, data })
    }

    /// Numerically stable softmax over the last axis.
    pub fn softmax_last(&self) -> Self {
        let d = self.last_dim();
        let mut out = self.data.clone();
        parallel::for_each_row(&mut out, d, 4 * d, |_, row| softmax_in_place(row));
        Self {
            shape: self.shape.clone(),
            data: out,
        }
    }

    /// Rows `[start, end)` of a rank-2 array.
    /// Entries `start..end` along the leading axis.
    pub fn row_slice(&self, start: usize, end: usize) -> Result<Self> {
        if self.rank() == 0 || end > self.shape[0] || start > end {
            return Err(Error::shape(
                "row_slice",
                format!("rows {}..{} of {:?}", start, end, self.shape),
            ));
        }
        let d: usize = self.shape[1..].iter().product();
        let mut shape = self.shape.clone();
        shape[0] = end - start;
        Ok(Self {
            shape,
            data: self.data[start * d..end * d].to_vec(),
        })
    }

    pub fn row(&self, i: usize) -> &[T] {
        let d = self.last_dim();
        &self.data[i * d..(i + 1) * d]
    }
}

pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
    let mut total = T::zero();
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    for x in row.iter_mut() {
        *x /= total;
    }
}

/// `c[m×n] (+)= a[m×k] · b[k×n]`, rows of `c` processed independently.
pub(crate) fn gemm<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    parallel::for_each_row(c, n, 2 * k * n, |i, crow| {
        let arow = &a[i * k..(i + 1) * k];
        for (p, &aip) in arow.iter().enumerate() {
            if aip == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cj, &bj) in crow.iter_mut().zip(brow) {
                *cj += aip * bj;
            }
        }
    });
}

/// Shape bookkeeping for [`DenseArray::matmul`] and its taped counterpart.
#[derive(Clone, Debug)]
pub(crate) struct MatmulPlan {
    pub batch: usize,
    pub m: usize,
    pub k: usize,
    pub n: usize,
    /// `other` is one matrix reused for every batch entry.
    pub shared_rhs: bool,
    pub out_shape: Vec<usize>,
}

impl MatmulPlan {
    pub fn new(a: &[usize], b: &[usize]) -> Result<Self> {
        let bad = || Error::shape("matmul", format!("{:?} x {:?}", a, b));
        if a.len() < 2 || b.len() < 2 {
            return Err(bad());
        }
        let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
        let (k2, n) = (b[b.len() - 2], b[b.len() - 1]);
        if k != k2 {
            return Err(bad());
        }
        let lead = &a[..a.len() - 2];
        let batch = numel(lead);
        let shared_rhs = if b.len() == 2 {
            true
        } else if b.len() == a.len() && &b[..b.len() - 2] == lead {
            false
        } else {
            return Err(bad());
        };
        let mut out_shape = lead.to_vec();
        out_shape.extend([m, n]);
        Ok(Self {
            batch,
            m,
            k,
            n,
            shared_rhs,
            out_shape,
        })
    }

    pub fn run<T: Scalar>(&self, a: &[T], b: &[T], out: &mut [T]) {
        let (m, k, n) = (self.m, self.k, self.n);
        if self.shared_rhs {
            gemm(a, b, out, self.batch * m, k, n);
        } else {
            for bi in 0..self.batch {
                gemm(
                    &a[bi * m * k..(bi + 1) * m * k],
                    &b[bi * k * n..(bi + 1) * k * n],
                    &mut out[bi * m * n..(bi + 1) * m * n],
                    m,
                    k,
                    n,
                );
            }
        }
    }
}

/// How the right operand of a binary elementwise op expands to the left
/// operand's shape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Broadcast {
    Same,
    /// Right operand has one element.
    Scalar,
    /// Right shape is a proper suffix of the left shape; it repeats `len / inner` times.
    Suffix { inner: usize },
    /// Right shape equals the left shape with the last axis set to 1.
    Trailing { width: usize },
}

impl Broadcast {
    pub fn resolve(op: &'static str, a: &[usize], b: &[usize]) -> Result<Self> {
        if a == b {
            return Ok(Broadcast::Same);
        }
        if numel(b) == 1 && b.iter().all(|&e| e == 1) {
            return Ok(Broadcast::Scalar);
        }
        if b.len() < a.len() && &a[a.len() - b.len()..] == b {
            return Ok(Broadcast::Suffix { inner: numel(b) });
        }
        if a.len() == b.len()
            && !a.is_empty()
            && b[b.len() - 1] == 1
            && a[..a.len() - 1] == b[..b.len() - 1]
        {
            return Ok(Broadcast::Trailing {
                width: a[a.len() - 1],
            });
        }
        Err(Error::shape(op, format!("cannot broadcast {:?} onto {:?}", b, a)))
    }

    /// Index into the right operand for flat index `i` of the left operand.
    #[inline]
    pub fn rhs_index(self, i: usize) -> usize {
        match self {
            Broadcast::Same => i,
            Broadcast::Scalar => 0,
            Broadcast::Suffix { inner } => i % inner,
            Broadcast::Trailing { width } => i / width,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_identity() {
        let a = DenseArray::<f64>::from_fn(&[3, 3], |i| i as f64 - 4.0);
        let eye = DenseArray::from_fn(&[3, 3], |i| if i % 4 == 0 { 1.0 } else { 0.0 });
        assert_eq!(eye.matmul(&a).unwrap(), a);
        assert_eq!(a.matmul(&eye).unwrap(), a);
    }

    #[test]
    fn matmul_rejects_inner_mismatch() {
        let a = DenseArray::<f32>::zeros(&[2, 3]);
        let b = DenseArray::<f32>::zeros(&[4, 2]);
        let err = a.matmul(&b).unwrap_err().to_string();
        assert!(err.contains("matmul") && err.contains("[2, 3]") && err.contains("[4, 2]"));
    }

    #[test]
    fn batched_matmul_matches_per_batch() {
        let a = DenseArray::<f64>::from_fn(&[2, 2, 3], |i| (i as f64).sin());
        let b = DenseArray::<f64>::from_fn(&[2, 3, 2], |i| (i as f64).cos());
        let c = a.matmul(&b).unwrap();
        for bi in 0..2 {
            for i in 0..2 {
                for j in 0..2 {
                    let want: f64 = (0..3)
                        .map(|p| a.data()[bi * 6 + i * 3 + p] * b.data()[bi * 6 + p * 2 + j])
                        .sum();
                    assert!((c.data()[bi * 4 + i * 2 + j] - want).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let s = DenseArray::<f32>::zeros(&[1, 2]).softmax_last();
        assert_eq!(s.data(), &[0.5, 0.5]);
    }

    #[test]
    fn transpose_roundtrip() {
        let a = DenseArray::<f32>::from_fn(&[2, 3, 4], |i| i as f32);
        let t = a.transpose_last2().unwrap();
        assert_eq!(t.shape(), &[2, 4, 3]);
        assert_eq!(t.transpose_last2().unwrap(), a);
    }

    #[test]
    fn broadcast_rules() {
        use Broadcast::*;
        assert_eq!(Broadcast::resolve("t", &[2, 3], &[2, 3]).unwrap(), Same);
        assert_eq!(Broadcast::resolve("t", &[2, 3], &[1]).unwrap(), Scalar);
        assert_eq!(Broadcast::resolve("t", &[4, 2, 3], &[2, 3]).unwrap(), Suffix { inner: 6 });
        assert_eq!(Broadcast::resolve("t", &[4, 2, 3], &[4, 2, 1]).unwrap(), Trailing { width: 3 });
        assert!(Broadcast::resolve("t", &[4, 2, 3], &[4, 1, 3]).is_err());
    }

    #[test]
    fn new_checks_length() {
        assert!(DenseArray::<f32>::new(&[2, 2], vec![0.0; 3]).is_err());
    }
}
