use super::{matmul, Real, Shape, Tensor};
use crate::error::{Error, Result};

pub fn relu<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Concatenates along the channel axis, preserving input order.
pub fn concat_channels<T: Real>(xs: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = xs.first().ok_or(Error::Contract {
        op: "concat_channels",
        msg: "no inputs".into(),
    })?;
    let base = first.shape();
    for x in xs {
        for axis in [0, 2, 3, 4] {
            if x.shape().0[axis] != base.0[axis] {
                return Err(Error::dim("concat_channels", axis, base.0[axis], x.shape().0[axis]));
            }
        }
    }
    let c: usize = xs.iter().map(|x| x.shape().c()).sum();
    let shape = base.with_c(c);
    let mut data = Vec::with_capacity(shape.numel());
    for n in 0..base.n() {
        for x in xs {
            data.extend_from_slice(x.sample(n));
        }
    }
    Tensor::from_vec(shape, data)
}

/// Channels `[start, start + len)`.
pub fn slice_channels<T: Real>(x: &Tensor<T>, start: usize, len: usize) -> Result<Tensor<T>> {
    let shape = x.shape();
    if len == 0 || start + len > shape.c() {
        return Err(Error::dim("slice_channels", 1, shape.c(), start + len));
    }
    let plane = shape.plane();
    let out = shape.with_c(len);
    let mut data = Vec::with_capacity(out.numel());
    for n in 0..shape.n() {
        let s = x.sample(n);
        data.extend_from_slice(&s[start * plane..(start + len) * plane]);
    }
    Tensor::from_vec(out, data)
}

/// Mean over `(t, h, w)`: `(n, c, t, h, w) → (n, c, 1, 1, 1)`.
pub fn global_avg_pool<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let shape = x.shape();
    let plane = shape.plane();
    let inv = T::one() / T::lit(plane as f64);
    let data = x
        .data()
        .chunks(plane)
        .map(|p| p.iter().copied().sum::<T>() * inv)
        .collect();
    Tensor::from_vec(Shape::vector(shape.n(), shape.c()), data).expect("pooled shape")
}

/// `y = x · Wᵀ + b` with each batch entry flattened to `c·t·h·w` features.
/// `w` has shape `(out, in, 1, 1, 1)`.
pub fn linear<T: Real>(x: &Tensor<T>, w: &Tensor<T>, b: Option<&[T]>) -> Result<Tensor<T>> {
    let (n, fin) = (x.shape().n(), x.shape().sample());
    let (fout, win) = (w.shape().n(), w.shape().sample());
    if win != fin {
        return Err(Error::Dimension {
            op: "linear",
            axis: "in_features",
            expected: win,
            got: fin,
        });
    }
    let mut out = Tensor::zeros(Shape::vector(n, fout));
    matmul(n, fin, fout, x.data(), false, w.data(), true, out.data_mut(), false);
    if let Some(b) = b {
        if b.len() != fout {
            return Err(Error::Dimension {
                op: "linear",
                axis: "bias",
                expected: fout,
                got: b.len(),
            });
        }
        for row in out.data_mut().chunks_mut(fout) {
            for (v, &bv) in row.iter_mut().zip(b) {
                *v += bv;
            }
        }
    }
    Ok(out)
}

/// Returns `(dx, dw, db)` for [`linear`].
pub fn linear_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Vec<T>) {
    let (n, fin) = (x.shape().n(), x.shape().sample());
    let fout = w.shape().n();
    let g = grad_out.data();
    let mut dx = Tensor::zeros(x.shape());
    matmul(n, fout, fin, g, false, w.data(), false, dx.data_mut(), false);
    let mut dw = Tensor::zeros(w.shape());
    matmul(fout, n, fin, g, true, x.data(), false, dw.data_mut(), false);
    let mut db = vec![T::zero(); fout];
    for row in g.chunks(fout) {
        for (d, &v) in db.iter_mut().zip(row) {
            *d += v;
        }
    }
    (dx, dw, db)
}

/// Numerically stable softmax.
pub fn softmax<T: Real>(logits: &[T]) -> Vec<T> {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = logits.iter().map(|&z| (z - max).exp()).collect();
    let total: T = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Row-wise softmax of a `(n, k, 1, 1, 1)` logits batch.
pub fn softmax_rows<T: Real>(logits: &Tensor<T>) -> Vec<Vec<T>> {
    let k = logits.shape().sample();
    logits.data().chunks(k).map(softmax).collect()
}
