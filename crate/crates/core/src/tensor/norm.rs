use super::{Real, Tensor};
use crate::error::{Error, Result};

pub const BN_EPS: f64 = 1e-5;
/// Weight of the current batch in the running-statistics moving average.
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BnMode {
    /// Normalize with batch statistics and update the running averages.
    Train,
    /// Normalize with the running averages.
    Eval,
}

/// Running per-channel statistics, updated in place in train mode.
#[derive(Debug)]
pub struct BatchNormState<'a, T> {
    pub mean: &'a mut [T],
    pub var: &'a mut [T],
}

/// Forward context kept for the backward pass.
#[derive(Debug, Clone)]
pub struct BnSaved<T: Real> {
    pub mode: BnMode,
    pub xhat: Tensor<T>,
    pub inv_std: Vec<T>,
}

/// Per-channel batch normalization over `(n, t, h, w)`:
/// `gamma · (x − mean) / sqrt(var + eps) + beta`.
pub fn batchnorm3d<T: Real>(
    x: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
    state: BatchNormState<'_, T>,
    mode: BnMode,
) -> Result<(Tensor<T>, BnSaved<T>)> {
    let shape = x.shape();
    let c = shape.c();
    for (name, len) in [
        ("gamma", gamma.len()),
        ("beta", beta.len()),
        ("running mean", state.mean.len()),
        ("running var", state.var.len()),
    ] {
        if len != c {
            return Err(Error::Dimension {
                op: "batchnorm3d",
                axis: name,
                expected: c,
                got: len,
            });
        }
    }
    let plane = shape.plane();
    let count = shape.n() * plane;
    let data = x.data();
    let channel = |ci: usize| {
        (0..shape.n()).flat_map(move |n| {
            let o = (n * c + ci) * plane;
            data[o..o + plane].iter().map(|v| v.as_f64())
        })
    };

    let mut mean = vec![0.0f64; c];
    let mut var = vec![0.0f64; c];
    match mode {
        BnMode::Train => {
            for ci in 0..c {
                let m = channel(ci).sum::<f64>() / count as f64;
                let v = channel(ci).map(|v| (v - m).powi(2)).sum::<f64>() / count as f64;
                mean[ci] = m;
                var[ci] = v;
                let unbiased = if count > 1 {
                    v * count as f64 / (count - 1) as f64
                } else {
                    v
                };
                let r = &mut state.mean[ci];
                *r = T::lit((1.0 - BN_MOMENTUM) * r.as_f64() + BN_MOMENTUM * m);
                let r = &mut state.var[ci];
                *r = T::lit((1.0 - BN_MOMENTUM) * r.as_f64() + BN_MOMENTUM * unbiased);
            }
        }
        BnMode::Eval => {
            for ci in 0..c {
                mean[ci] = state.mean[ci].as_f64();
                var[ci] = state.var[ci].as_f64();
            }
        }
    }

    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
    let mut xhat = Tensor::zeros(shape);
    let mut out = Tensor::zeros(shape);
    for n in 0..shape.n() {
        for ci in 0..c {
            let o = (n * c + ci) * plane;
            let (m, s) = (mean[ci], inv_std[ci]);
            let (g, b) = (gamma[ci], beta[ci]);
            let src = &data[o..o + plane];
            let xh = &mut xhat.data_mut()[o..o + plane];
            for (d, &v) in xh.iter_mut().zip(src) {
                *d = T::lit((v.as_f64() - m) * s);
            }
            let xh = &xhat.data()[o..o + plane];
            for (d, &v) in out.data_mut()[o..o + plane].iter_mut().zip(xh) {
                *d = g * v + b;
            }
        }
    }
    Ok((
        out,
        BnSaved {
            mode,
            xhat,
            inv_std: inv_std.into_iter().map(T::lit).collect(),
        },
    ))
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn batchnorm3d_backward<T: Real>(
    saved: &BnSaved<T>,
    gamma: &[T],
    grad_out: &Tensor<T>,
) -> (Tensor<T>, Vec<T>, Vec<T>) {
    let shape = grad_out.shape();
    let c = shape.c();
    let plane = shape.plane();
    let count = (shape.n() * plane) as f64;
    let g = grad_out.data();
    let xh = saved.xhat.data();

    let mut dgamma = vec![0.0f64; c];
    let mut dbeta = vec![0.0f64; c];
    for n in 0..shape.n() {
        for ci in 0..c {
            let o = (n * c + ci) * plane;
            for (&gv, &xv) in g[o..o + plane].iter().zip(&xh[o..o + plane]) {
                dbeta[ci] += gv.as_f64();
                dgamma[ci] += gv.as_f64() * xv.as_f64();
            }
        }
    }

    let mut dx = Tensor::zeros(shape);
    for n in 0..shape.n() {
        for ci in 0..c {
            let o = (n * c + ci) * plane;
            let gam = gamma[ci].as_f64();
            let s = saved.inv_std[ci].as_f64();
            let dst = &mut dx.data_mut()[o..o + plane];
            match saved.mode {
                BnMode::Train => {
                    // dx = gamma·s/m · (m·dy − Σdy − xhat·Σ(dy·xhat))
                    let (sum_g, sum_gx) = (dbeta[ci], dgamma[ci]);
                    for ((d, &gv), &xv) in dst.iter_mut().zip(&g[o..o + plane]).zip(&xh[o..o + plane]) {
                        let v = gam * s / count * (count * gv.as_f64() - sum_g - xv.as_f64() * sum_gx);
                        *d = T::lit(v);
                    }
                }
                BnMode::Eval => {
                    for (d, &gv) in dst.iter_mut().zip(&g[o..o + plane]) {
                        *d = T::lit(gam * s * gv.as_f64());
                    }
                }
            }
        }
    }
    (
        dx,
        dgamma.into_iter().map(T::lit).collect(),
        dbeta.into_iter().map(T::lit).collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    fn run(x: &Tensor<f64>, g: &[f64], b: &[f64], mean: &mut [f64], var: &mut [f64], mode: BnMode) -> Tensor<f64> {
        batchnorm3d(x, g, b, BatchNormState { mean, var }, mode).unwrap().0
    }

    #[test]
    fn train_mode_standardizes() {
        let mut rng = rand::rng();
        let x = Tensor::<f64>::randn(Shape::new(3, 2, 2, 3, 3), 4.0, &mut rng).map(|v| v + 7.0);
        let (mut m, mut v) = (vec![0.0; 2], vec![1.0; 2]);
        let y = run(&x, &[1.0, 1.0], &[0.0, 0.0], &mut m, &mut v, BnMode::Train);
        for ci in 0..2 {
            let vals: Vec<f64> = (0..3).flat_map(|n| y.sample(n)[ci * 18..(ci + 1) * 18].to_vec()).collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-5, "var {var}");
        }
        // running stats moved 10% of the way towards the batch statistics
        assert!(m.iter().all(|&v| v > 0.0));
    }

    #[test]
    fn constant_input_maps_to_beta() {
        let x = Tensor::<f64>::full(Shape::new(2, 1, 2, 2, 2), 3.0);
        let (mut m, mut v) = (vec![0.0], vec![1.0]);
        let y = run(&x, &[2.0], &[5.0], &mut m, &mut v, BnMode::Train);
        assert!(y.data().iter().all(|&v| v == 5.0));
    }

    #[test]
    fn eval_mode_hand_evaluated() {
        // Two-element channel [1, 3] with running mean 1.5, var 4:
        // y = 2·(x − 1.5)/sqrt(4 + 1e-5) + 0.5
        let x = Tensor::<f64>::from_vec(Shape::new(1, 1, 1, 1, 2), vec![1.0, 3.0]).unwrap();
        let (mut m, mut v) = (vec![1.5], vec![4.0]);
        let y = run(&x, &[2.0], &[0.5], &mut m, &mut v, BnMode::Eval);
        let s = (4.0f64 + 1e-5).sqrt();
        let expected = [2.0 * -0.5 / s + 0.5, 2.0 * 1.5 / s + 0.5];
        for (a, b) in y.data().iter().zip(expected) {
            assert!((a - b).abs() < 1e-14);
        }
        assert_eq!((m[0], v[0]), (1.5, 4.0), "eval mode must not update stats");
    }

    #[test]
    fn running_stats_update() {
        // batch [1, 3]: mean 2, biased var 1, unbiased var 2
        let x = Tensor::<f64>::from_vec(Shape::new(1, 1, 1, 1, 2), vec![1.0, 3.0]).unwrap();
        let (mut m, mut v) = (vec![0.0], vec![1.0]);
        run(&x, &[1.0], &[0.0], &mut m, &mut v, BnMode::Train);
        assert!((m[0] - 0.2).abs() < 1e-15);
        assert!((v[0] - (0.9 + 0.2)).abs() < 1e-15);
    }

    #[test]
    fn wrong_gamma_length() {
        let x = Tensor::<f32>::zeros(Shape::new(1, 2, 1, 1, 1));
        let (mut m, mut v) = (vec![0.0; 2], vec![1.0; 2]);
        let err = batchnorm3d(&x, &[1.0], &[0.0, 0.0], BatchNormState { mean: &mut m, var: &mut v }, BnMode::Train);
        assert!(matches!(err, Err(Error::Dimension { axis: "gamma", .. })));
    }
}
