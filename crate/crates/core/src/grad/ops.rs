use std::rc::Rc;

use super::Var;
use crate::array::{Broadcast, DenseArray, MatmulPlan};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Sums `g` (shaped like the left operand) down to the right operand's shape.
fn reduce_to<T: Scalar>(g: &DenseArray<T>, shape: &[usize], bc: Broadcast) -> DenseArray<T> {
    if bc == Broadcast::Same {
        return g.clone();
    }
    let mut out = DenseArray::zeros(shape);
    let o = out.data_mut();
    for (i, &x) in g.data().iter().enumerate() {
        o[bc.rhs_index(i)] += x;
    }
    out
}

fn binary_value<T: Scalar>(
    a: &DenseArray<T>,
    b: &DenseArray<T>,
    bc: Broadcast,
    f: impl Fn(T, T) -> T,
) -> DenseArray<T> {
    let bd = b.data();
    let data = a
        .data()
        .iter()
        .enumerate()
        .map(|(i, &x)| f(x, bd[bc.rhs_index(i)]))
        .collect();
    DenseArray::new(a.shape(), data).expect("shape preserved")
}

impl<'t, T: Scalar> Var<'t, T> {
    fn same_tape(&self, other: &Var<'t, T>, op: &'static str) -> Result<()> {
        if std::ptr::eq(self.tape, other.tape) {
            Ok(())
        } else {
            Err(Error::shape(op, "operands live on different tapes"))
        }
    }

    fn unary<F, B>(&self, op: &'static str, f: F, backward: B) -> Var<'t, T>
    where
        F: Fn(T) -> T,
        B: Fn(&DenseArray<T>, &DenseArray<T>, &DenseArray<T>) -> DenseArray<T> + 'static,
    {
        let x = self.value();
        let y = Rc::new(x.map(f));
        let y_keep = Rc::clone(&y);
        self.tape.record(op, &[self.id], y, move |g, _| {
            vec![Some(backward(g, &x, &y_keep))]
        })
    }

    fn binary_bc(
        &self,
        other: Var<'t, T>,
        op: &'static str,
        f: fn(T, T) -> T,
        grad_a: fn(T, T, T) -> T,
        grad_b: fn(T, T, T) -> T,
    ) -> Result<Var<'t, T>> {
        self.same_tape(&other, op)?;
        let a = self.value();
        let b = other.value();
        let bc = Broadcast::resolve(op, a.shape(), b.shape())?;
        let y = binary_value(&a, &b, bc, f);
        Ok(self
            .tape
            .record(op, &[self.id, other.id], y, move |g, needs| {
                let bd = b.data();
                let ga = needs[0].then(|| {
                    let data = g
                        .data()
                        .iter()
                        .zip(a.data())
                        .enumerate()
                        .map(|(i, (&gi, &ai))| grad_a(gi, ai, bd[bc.rhs_index(i)]))
                        .collect();
                    DenseArray::new(a.shape(), data).expect("shape preserved")
                });
                let gb = needs[1].then(|| {
                    let full: Vec<T> = g
                        .data()
                        .iter()
                        .zip(a.data())
                        .enumerate()
                        .map(|(i, (&gi, &ai))| grad_b(gi, ai, bd[bc.rhs_index(i)]))
                        .collect();
                    let full = DenseArray::new(a.shape(), full).expect("shape preserved");
                    reduce_to(&full, b.shape(), bc)
                });
                vec![ga, gb]
            }))
    }

    /// Elementwise `self + other`; `other` may broadcast (scalar, suffix or trailing axis).
    pub fn add(&self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary_bc(other, "add", |a, b| a + b, |g, _, _| g, |g, _, _| g)
    }

    pub fn sub(&self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary_bc(other, "sub", |a, b| a - b, |g, _, _| g, |g, _, _| -g)
    }

    pub fn mul(&self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary_bc(other, "mul", |a, b| a * b, |g, _, b| g * b, |g, a, _| g * a)
    }

    pub fn div(&self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary_bc(
            other,
            "div",
            |a, b| a / b,
            |g, _, b| g / b,
            |g, a, b| -g * a / (b * b),
        )
    }

    pub fn neg(&self) -> Var<'t, T> {
        self.unary("neg", |x| -x, |g, _, _| g.map(|v| -v))
    }

    pub fn add_scalar(&self, s: T) -> Var<'t, T> {
        self.unary("add_scalar", move |x| x + s, |g, _, _| g.clone())
    }

    pub fn mul_scalar(&self, s: T) -> Var<'t, T> {
        self.unary("mul_scalar", move |x| x * s, move |g, _, _| g.scale(s))
    }

    pub fn exp(&self) -> Var<'t, T> {
        self.unary("exp", |x| x.exp(), |g, _, y| {
            g.zip_map(y, "exp", |a, b| a * b).expect("same shape")
        })
    }

    pub fn abs(&self) -> Var<'t, T> {
        self.unary("abs", |x| x.abs(), |g, x, _| {
            g.zip_map(x, "abs", |gi, xi| {
                if xi > T::zero() {
                    gi
                } else if xi < T::zero() {
                    -gi
                } else {
                    T::zero()
                }
            })
            .expect("same shape")
        })
    }

    /// Elementwise `x^p` for a constant exponent.
    pub fn powf(&self, p: T) -> Var<'t, T> {
        self.unary("powf", move |x| x.powf(p), move |g, x, _| {
            g.zip_map(x, "powf", |gi, xi| {
                if p == T::one() {
                    gi
                } else if xi == T::zero() && p > T::one() {
                    T::zero()
                } else {
                    gi * p * xi.powf(p - T::one())
                }
            })
            .expect("same shape")
        })
    }

    /// `x · sigmoid(x)`.
    pub fn silu(&self) -> Var<'t, T> {
        self.unary(
            "silu",
            |x| x / (T::one() + (-x).exp()),
            |g, x, _| {
                g.zip_map(x, "silu", |gi, xi| {
                    let s = T::one() / (T::one() + (-xi).exp());
                    gi * s * (T::one() + xi * (T::one() - s))
                })
                .expect("same shape")
            },
        )
    }

    /// Clamps into `[lo, hi]`; the gradient passes where `lo <= x <= hi`.
    pub fn clip(&self, lo: T, hi: T) -> Var<'t, T> {
        self.unary("clip", move |x| x.max(lo).min(hi), move |g, x, _| {
            g.zip_map(x, "clip", |gi, xi| {
                if xi >= lo && xi <= hi {
                    gi
                } else {
                    T::zero()
                }
            })
            .expect("same shape")
        })
    }

    pub fn matmul(&self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_tape(&other, "matmul")?;
        let a = self.value();
        let b = other.value();
        let y = a.matmul(&b)?;
        let plan = MatmulPlan::new(a.shape(), b.shape())?;
        Ok(self
            .tape
            .record("matmul", &[self.id, other.id], y, move |g, needs| {
                let ga = needs[0].then(|| {
                    let bt = b.transpose_last2().expect("rank >= 2");
                    let mut ga = g.matmul(&bt).expect("conforming shapes");
                    if ga.shape() != a.shape() {
                        ga = ga.reshape(a.shape()).expect("same size");
                    }
                    ga
                });
                let gb = needs[1].then(|| {
                    if plan.shared_rhs {
                        let rows = plan.batch * plan.m;
                        let a2 = a.reshape(&[rows, plan.k]).expect("same size");
                        let g2 = g.reshape(&[rows, plan.n]).expect("same size");
                        a2.transpose_last2()
                            .expect("rank 2")
                            .matmul(&g2)
                            .expect("conforming shapes")
                    } else {
                        a.transpose_last2()
                            .expect("rank >= 2")
                            .matmul(g)
                            .expect("conforming shapes")
                    }
                });
                vec![ga, gb]
            }))
    }

    /// Swaps the last two axes.
    pub fn transpose(&self) -> Result<Var<'t, T>> {
        let y = self.value().transpose_last2()?;
        Ok(self.tape.record("transpose", &[self.id], y, |g, _| {
            vec![Some(g.transpose_last2().expect("rank >= 2"))]
        }))
    }

    /// Softmax over the last axis.
    pub fn softmax_last(&self) -> Var<'t, T> {
        let y = Rc::new(self.value().softmax_last());
        let keep = Rc::clone(&y);
        self.tape
            .record("softmax", &[self.id], y, move |g, _| {
                let d = keep.last_dim();
                let mut out = vec![T::zero(); g.len()];
                for (r, o) in out.chunks_mut(d).enumerate() {
                    let yr = &keep.data()[r * d..(r + 1) * d];
                    let gr = &g.data()[r * d..(r + 1) * d];
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for ((oi, &yi), &gi) in o.iter_mut().zip(yr).zip(gr) {
                        *oi = yi * (gi - dot);
                    }
                }
                vec![Some(DenseArray::new(keep.shape(), out).expect("same shape"))]
            })
    }

    /// Concatenation along the last axis.
    pub fn concat_last(parts: &[Var<'t, T>]) -> Result<Var<'t, T>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat", "no inputs"))?;
        for p in parts {
            first.same_tape(p, "concat")?;
        }
        let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let refs: Vec<&DenseArray<T>> = values.iter().map(|v| v.as_ref()).collect();
        let y = DenseArray::concat_last(&refs)?;
        let widths: Vec<usize> = values.iter().map(|v| v.last_dim()).collect();
        let shapes: Vec<Vec<usize>> = values.iter().map(|v| v.shape().to_vec()).collect();
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        Ok(first.tape.record("concat", &ids, y, move |g, needs| {
            let total: usize = widths.iter().sum();
            let rows = g.len() / total;
            let mut offset = 0;
            let mut out = Vec::with_capacity(widths.len());
            for ((&w, shape), &need) in widths.iter().zip(&shapes).zip(needs) {
                if need {
                    let mut data = Vec::with_capacity(rows * w);
                    for r in 0..rows {
                        data.extend_from_slice(&g.data()[r * total + offset..r * total + offset + w]);
                    }
                    out.push(Some(DenseArray::new(shape, data).expect("split shape")));
                } else {
                    out.push(None);
                }
                offset += w;
            }
            out
        }))
    }

    /// Sum of all elements, as a rank-0 array.
    pub fn sum(&self) -> Result<Var<'t, T>> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let y = DenseArray::scalar(x.sum());
        Ok(self.tape.record("sum", &[self.id], y, move |g, _| {
            vec![Some(DenseArray::full(&shape, g.data()[0]))]
        }))
    }

    pub fn mean(&self) -> Result<Var<'t, T>> {
        let n = T::of(self.value().len() as f64);
        Ok(self.sum()?.mul_scalar(T::one() / n))
    }

    /// Sum over the last axis, keeping it with extent 1.
    pub fn sum_last(&self) -> Var<'t, T> {
        let x = self.value();
        let d = x.last_dim();
        let mut shape = x.shape().to_vec();
        if let Some(last) = shape.last_mut() {
            *last = 1;
        }
        let data: Vec<T> = x.data().chunks(d).map(|r| r.iter().copied().sum()).collect();
        let y = DenseArray::new(&shape, data).expect("reduced shape");
        let in_shape = x.shape().to_vec();
        self.tape.record("sum_last", &[self.id], y, move |g, _| {
            let data = (0..g.len() * d).map(|i| g.data()[i / d]).collect();
            vec![Some(DenseArray::new(&in_shape, data).expect("expanded shape"))]
        })
    }

    pub fn mean_last(&self) -> Var<'t, T> {
        let d = T::of(self.value().last_dim() as f64);
        self.sum_last().mul_scalar(T::one() / d)
    }

    /// Squared Frobenius norm.
    pub fn sq_norm(&self) -> Result<Var<'t, T>> {
        let x = self.value();
        let y = DenseArray::scalar(x.sq_norm());
        Ok(self.tape.record("sq_norm", &[self.id], y, move |g, _| {
            let s = g.data()[0] + g.data()[0];
            vec![Some(x.scale(s))]
        }))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t, T>> {
        let x = self.value();
        let y = x.reshape(shape)?;
        let in_shape = x.shape().to_vec();
        Ok(self.tape.record("reshape", &[self.id], y, move |g, _| {
            vec![Some(g.reshape(&in_shape).expect("same size"))]
        }))
    }
}

/// Builds an operation whose forward pass is `forward` and whose backward
/// pass maps the output gradient through `backward` instead of the
/// forward's true Jacobian. A produced gradient whose shape differs from
/// the input's is reported as an error by [`Var::backward`].
pub fn custom_grad<'t, T, F, B>(x: Var<'t, T>, forward: F, backward: B) -> Var<'t, T>
where
    T: Scalar,
    F: FnOnce(&DenseArray<T>) -> DenseArray<T>,
    B: Fn(&DenseArray<T>) -> DenseArray<T> + 'static,
{
    let y = forward(&x.value());
    x.tape
        .record("custom", &[x.id], y, move |g, _| vec![Some(backward(g))])
}

/// Rounds to the nearest integer (ties away from zero) with an identity
/// gradient.
pub fn ste_round<'t, T: Scalar>(x: Var<'t, T>) -> Var<'t, T> {
    custom_grad(x, |v| v.map(|e| e.round()), |g| g.clone())
}

/// Identity forward, zero gradient.
pub fn detach<'t, T: Scalar>(x: Var<'t, T>) -> Var<'t, T> {
    custom_grad(x, |v| v.clone(), |g| DenseArray::zeros(g.shape()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grad::Tape;

    fn arr(shape: &[usize], v: &[f64]) -> DenseArray<f64> {
        DenseArray::from_f64(shape, v).unwrap()
    }

    #[test]
    fn sum_of_squares_gradient() {
        let tape = Tape::new();
        let x = tape.leaf(arr(&[2], &[1.0, 2.0]), true);
        let y = x.mul(x).unwrap().sum().unwrap();
        let g = y.backward().unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn ste_round_forward_and_backward() {
        let tape = Tape::new();
        let r = tape.leaf(arr(&[1], &[0.7]), true);
        let y = ste_round(r);
        assert_eq!(y.value().data(), &[1.0]);
        let g = y.sum().unwrap().backward().unwrap();
        assert_eq!(g.get(r).unwrap().data(), &[1.0]);
    }

    #[test]
    fn ste_round_tie_goes_up() {
        let tape = Tape::<f32>::new();
        let r = tape.leaf(DenseArray::from_f64(&[2], &[0.5, 0.4999]).unwrap(), true);
        assert_eq!(ste_round(r).value().data(), &[1.0, 0.0]);
    }

    #[test]
    fn detach_blocks_gradient() {
        let tape = Tape::new();
        let x = tape.leaf(arr(&[3], &[1.0, -2.0, 3.0]), true);
        let d = detach(x);
        assert_eq!(*d.value(), *x.value());
        let y = d.mul(x).unwrap().sum().unwrap();
        let g = y.backward().unwrap();
        // only the non-detached factor contributes: d/dx (c·x) = c
        assert_eq!(g.get(x).unwrap().data(), &[1.0, -2.0, 3.0]);
    }

    #[test]
    fn identity_custom_grad_is_pass_through() {
        let tape = Tape::new();
        let x = tape.leaf(arr(&[2], &[3.0, 4.0]), true);
        let y = custom_grad(x, |v| v.clone(), |g| g.clone());
        let g = y.mul(y).unwrap().sum().unwrap().backward().unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[6.0, 8.0]);
    }

    #[test]
    fn custom_grad_shape_mismatch_is_reported() {
        let tape = Tape::new();
        let x = tape.leaf(arr(&[2], &[3.0, 4.0]), true);
        let y = custom_grad(x, |v| v.clone(), |_| DenseArray::zeros(&[3]));
        let err = y.sum().unwrap().backward().unwrap_err();
        assert!(matches!(err, Error::Shape { op: "custom", .. }), "{err}");
    }

    #[test]
    fn backward_invokes_each_op_once() {
        let tape = Tape::new();
        let x = tape.leaf(arr(&[2, 2], &[1.0, 2.0, 3.0, 4.0]), true);
        let w = tape.leaf(arr(&[2, 2], &[0.5, -1.0, 2.0, 0.25]), true);
        let h = x.matmul(w).unwrap();
        let h = h.exp().mul(h).unwrap().softmax_last();
        let y = h.sq_norm().unwrap();
        let g = y.backward().unwrap();
        assert_eq!(tape.op_count(), 5);
        assert_eq!(g.invocations(), 5);
    }

    #[test]
    fn no_grad_tape_records_no_rules() {
        let tape = Tape::<f32>::no_grad();
        let x = tape.leaf(DenseArray::ones(&[2]), true);
        let _ = x.exp().sum().unwrap();
        assert_eq!(tape.op_count(), 0);
        assert!(!x.requires_grad());
    }

    #[test]
    fn broadcast_gradients_reduce() {
        let tape = Tape::new();
        let x = tape.leaf(arr(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]), true);
        let bias = tape.leaf(arr(&[3], &[1.0, 1.0, 1.0]), true);
        let den = tape.leaf(arr(&[2, 1], &[2.0, 4.0]), true);
        let y = x.add(bias).unwrap().div(den).unwrap().sum().unwrap();
        let g = y.backward().unwrap();
        assert_eq!(g.get(bias).unwrap().data(), &[0.75, 0.75, 0.75]);
        // d/dden Σ_j (x_j+1)/den = -Σ_j (x_j+1)/den²
        assert_eq!(g.get(den).unwrap().data(), &[-9.0 / 4.0, -18.0 / 16.0]);
    }

    #[test]
    fn shape_errors_name_the_op() {
        let tape = Tape::<f32>::new();
        let a = tape.leaf(DenseArray::zeros(&[2, 3]), true);
        let b = tape.leaf(DenseArray::zeros(&[2, 2]), true);
        let err = a.add(b).unwrap_err().to_string();
        assert!(err.contains("add") && err.contains("[2, 2]") && err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn clip_passes_gradient_at_boundary() {
        let tape = Tape::new();
        let x = tape.leaf(arr(&[3], &[1.0, 1.5, -0.5]), true);
        let y = x.clip(0.0, 1.0);
        assert_eq!(y.value().data(), &[1.0, 1.0, 0.0]);
        let g = y.sum().unwrap().backward().unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0, 0.0, 0.0]);
    }
}
