use super::conv::{output_len, Dims3, Pad3};
use super::{Real, Shape, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PoolMode {
    /// Window maximum; padded positions never win.
    Max,
    /// Window sum divided by the full kernel volume, padding counted as zeros.
    Avg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PoolSpec {
    pub mode: PoolMode,
    pub kernel: Dims3,
    pub stride: Dims3,
    pub pad: Pad3,
}

impl PoolSpec {
    pub fn new(mode: PoolMode, kernel: Dims3, stride: Dims3) -> Self {
        PoolSpec {
            mode,
            kernel,
            stride,
            pad: [(0, 0); 3],
        }
    }

    pub fn with_pad(mut self, pad: Dims3) -> Self {
        self.pad = pad.map(|p| (p, p));
        self
    }

    pub fn output_volume(&self, input: Dims3) -> Result<Dims3> {
        let mut out = [0; 3];
        for axis in 0..3 {
            let (k, s, p) = (self.kernel[axis], self.stride[axis], self.pad[axis]);
            if k == 0 || s == 0 || p.0 >= k || p.1 >= k {
                return Err(Error::Contract {
                    op: "pool3d",
                    msg: format!("invalid pooling geometry {self:?}"),
                });
            }
            out[axis] = output_len("pool3d", axis, input[axis], k, s, p)?;
        }
        Ok(out)
    }

    pub fn output_shape(&self, input: Shape) -> Result<Shape> {
        let [t, h, w] = self.output_volume(input.volume())?;
        Ok(Shape::new(input.n(), input.c(), t, h, w))
    }

    /// Input index ranges `[lo, hi)` covered by output `o` along each axis.
    #[inline]
    fn window(&self, input: Dims3, o: Dims3) -> [(usize, usize); 3] {
        let mut r = [(0, 0); 3];
        for axis in 0..3 {
            let start = (o[axis] * self.stride[axis]) as isize - self.pad[axis].0 as isize;
            let end = start + self.kernel[axis] as isize;
            r[axis] = (
                start.max(0) as usize,
                (end.min(input[axis] as isize)).max(0) as usize,
            );
        }
        r
    }
}

/// 3D max or average pooling.
///
/// For max pooling the second return value holds, for every output, the
/// plane offset of the winning input (first maximum in `(t, h, w)` scan order).
pub fn pool3d<T: Real>(x: &Tensor<T>, spec: &PoolSpec) -> Result<(Tensor<T>, Vec<u32>)> {
    let out_shape = spec.output_shape(x.shape())?;
    let input = x.shape().volume();
    let [_, ih, iw] = input;
    let [ot, oh, ow] = out_shape.volume();
    let in_plane = x.shape().plane();
    let planes = x.shape().n() * x.shape().c();
    let inv_volume = T::one() / T::lit(spec.kernel.iter().product::<usize>() as f64);

    let mut out = Tensor::zeros(out_shape);
    let mut argmax = match spec.mode {
        PoolMode::Max => vec![0u32; out_shape.numel()],
        PoolMode::Avg => Vec::new(),
    };
    let out_data = out.data_mut();
    let mut o = 0;
    for p in 0..planes {
        let xp = &x.data()[p * in_plane..(p + 1) * in_plane];
        for to in 0..ot {
            for ho in 0..oh {
                for wo in 0..ow {
                    let [(t0, t1), (h0, h1), (w0, w1)] = spec.window(input, [to, ho, wo]);
                    match spec.mode {
                        PoolMode::Max => {
                            let mut best = T::neg_infinity();
                            let mut best_at = 0;
                            for t in t0..t1 {
                                for h in h0..h1 {
                                    let row = (t * ih + h) * iw;
                                    for (w, &v) in xp[row + w0..row + w1].iter().enumerate() {
                                        if v > best {
                                            best = v;
                                            best_at = row + w0 + w;
                                        }
                                    }
                                }
                            }
                            out_data[o] = best;
                            argmax[o] = best_at as u32;
                        }
                        PoolMode::Avg => {
                            let mut acc = T::zero();
                            for t in t0..t1 {
                                for h in h0..h1 {
                                    let row = (t * ih + h) * iw;
                                    acc += xp[row + w0..row + w1].iter().copied().sum::<T>();
                                }
                            }
                            out_data[o] = acc * inv_volume;
                        }
                    }
                    o += 1;
                }
            }
        }
    }
    Ok((out, argmax))
}

/// Routes the output gradient back through [`pool3d`]: max pooling sends it
/// to the recorded argmax, average pooling spreads it uniformly.
pub fn pool3d_backward<T: Real>(
    input_shape: Shape,
    spec: &PoolSpec,
    argmax: &[u32],
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    let out_shape = spec.output_shape(input_shape)?;
    if grad_out.shape() != out_shape {
        return Err(Error::Contract {
            op: "pool3d_backward",
            msg: format!("grad shape {} != output shape {out_shape}", grad_out.shape()),
        });
    }
    let input = input_shape.volume();
    let [_, ih, iw] = input;
    let [ot, oh, ow] = out_shape.volume();
    let in_plane = input_shape.plane();
    let out_plane = out_shape.plane();
    let planes = input_shape.n() * input_shape.c();
    let inv_volume = T::one() / T::lit(spec.kernel.iter().product::<usize>() as f64);

    let mut dx = Tensor::zeros(input_shape);
    let g = grad_out.data();
    for p in 0..planes {
        let dxp = &mut dx.data_mut()[p * in_plane..(p + 1) * in_plane];
        let gp = &g[p * out_plane..(p + 1) * out_plane];
        match spec.mode {
            PoolMode::Max => {
                let ap = &argmax[p * out_plane..(p + 1) * out_plane];
                for (&at, &gv) in ap.iter().zip(gp) {
                    dxp[at as usize] += gv;
                }
            }
            PoolMode::Avg => {
                let mut o = 0;
                for to in 0..ot {
                    for ho in 0..oh {
                        for wo in 0..ow {
                            let share = gp[o] * inv_volume;
                            let [(t0, t1), (h0, h1), (w0, w1)] = spec.window(input, [to, ho, wo]);
                            for t in t0..t1 {
                                for h in h0..h1 {
                                    let row = (t * ih + h) * iw;
                                    dxp[row + w0..row + w1].iter_mut().for_each(|v| *v += share);
                                }
                            }
                            o += 1;
                        }
                    }
                }
            }
        }
    }
    Ok(dx)
}
