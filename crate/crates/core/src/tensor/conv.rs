//! 3D convolution via im2col + GEMM.

use super::{matmul, Real, Shape, Tensor};
use crate::error::{Error, Result};

/// Extent along `(t, h, w)`.
pub type Dims3 = [usize; 3];

/// `(front, back)` zero padding along `(t, h, w)`.
pub type Pad3 = [(usize, usize); 3];

/// Geometry of a 3D convolution: `kernel = (d, s, s)` for temporal depth
/// `d` and spatial size `s`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: Dims3,
    pub stride: Dims3,
    pub pad: Pad3,
}

/// `floor((input + pad - kernel) / stride) + 1`, rejecting empty outputs.
pub fn output_len(
    op: &'static str,
    axis: usize,
    input: usize,
    kernel: usize,
    stride: usize,
    pad: (usize, usize),
) -> Result<usize> {
    let span = input as i64 + pad.0 as i64 + pad.1 as i64 - kernel as i64;
    let len = if span < 0 {
        // floor division for a negative numerator
        (span - (stride as i64 - 1)) / stride as i64 + 1
    } else {
        span / stride as i64 + 1
    };
    if len < 1 {
        return Err(Error::EmptyOutput {
            op,
            axis: crate::error::AXIS_NAMES[axis + 2],
            size: len,
        });
    }
    Ok(len as usize)
}

impl ConvSpec {
    /// Stride 1, no padding.
    pub fn new(in_channels: usize, out_channels: usize, kernel: Dims3) -> Self {
        ConvSpec {
            in_channels,
            out_channels,
            kernel,
            stride: [1; 3],
            pad: [(0, 0); 3],
        }
    }

    /// Stride 1 with padding that preserves `(t, h, w)`. Even kernel extents
    /// pad `ceil((k-1)/2)` in front and `floor((k-1)/2)` behind.
    pub fn same(in_channels: usize, out_channels: usize, kernel: Dims3) -> Self {
        let pad = kernel.map(|k| (k / 2, (k - 1) / 2));
        ConvSpec {
            pad,
            ..Self::new(in_channels, out_channels, kernel)
        }
    }

    pub fn with_stride(mut self, stride: Dims3) -> Self {
        self.stride = stride;
        self
    }

    /// Symmetric padding.
    pub fn with_pad(mut self, pad: Dims3) -> Self {
        self.pad = pad.map(|p| (p, p));
        self
    }

    pub fn with_pad_asym(mut self, pad: Pad3) -> Self {
        self.pad = pad;
        self
    }

    pub fn weight_shape(&self) -> Shape {
        let [kt, kh, kw] = self.kernel;
        Shape::new(self.out_channels, self.in_channels, kt, kh, kw)
    }

    pub fn fan_in(&self) -> usize {
        self.in_channels * self.kernel.iter().product::<usize>()
    }

    pub fn num_weights(&self) -> usize {
        self.out_channels * self.fan_in()
    }

    fn check(&self) -> Result<()> {
        let ok = self.in_channels > 0
            && self.out_channels > 0
            && self.kernel.iter().all(|&k| k > 0)
            && self.stride.iter().all(|&s| s > 0);
        if ok {
            Ok(())
        } else {
            Err(Error::Contract {
                op: "conv3d",
                msg: format!("degenerate kernel spec {self:?}"),
            })
        }
    }

    /// Output `(t, h, w)` for an input volume.
    pub fn output_volume(&self, input: Dims3) -> Result<Dims3> {
        self.check()?;
        let mut out = [0; 3];
        for axis in 0..3 {
            out[axis] = output_len(
                "conv3d",
                axis,
                input[axis],
                self.kernel[axis],
                self.stride[axis],
                self.pad[axis],
            )?;
        }
        Ok(out)
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == [1; 3] && self.stride == [1; 3] && self.pad == [(0, 0); 3]
    }
}

pub fn conv3d_output_shape(input: Shape, spec: &ConvSpec) -> Result<Shape> {
    if input.c() != spec.in_channels {
        return Err(Error::dim("conv3d", 1, spec.in_channels, input.c()));
    }
    let [t, h, w] = spec.output_volume(input.volume())?;
    Ok(Shape::new(input.n(), spec.out_channels, t, h, w))
}

fn check_weights<T: Real>(spec: &ConvSpec, weights: &Tensor<T>) -> Result<()> {
    let expected = spec.weight_shape();
    for axis in 0..5 {
        if weights.shape().0[axis] != expected.0[axis] {
            return Err(Error::Dimension {
                op: "conv3d weights",
                axis: ["out_channels", "in_channels", "kt", "kh", "kw"][axis],
                expected: expected.0[axis],
                got: weights.shape().0[axis],
            });
        }
    }
    Ok(())
}

struct Geometry {
    cin: usize,
    input: Dims3,
    output: Dims3,
    kernel: Dims3,
    stride: Dims3,
    pad: Dims3,
}

impl Geometry {
    fn new(spec: &ConvSpec, input: Dims3, output: Dims3) -> Self {
        Geometry {
            cin: spec.in_channels,
            input,
            output,
            kernel: spec.kernel,
            stride: spec.stride,
            pad: spec.pad.map(|p| p.0),
        }
    }

    fn rows(&self) -> usize {
        self.cin * self.kernel.iter().product::<usize>()
    }

    fn cols(&self) -> usize {
        self.output.iter().product()
    }

    /// Input index along `axis` touched by output `o` and kernel tap `k`.
    #[inline]
    fn source(&self, axis: usize, o: usize, k: usize) -> Option<usize> {
        let i = (o * self.stride[axis] + k) as isize - self.pad[axis] as isize;
        (i >= 0 && (i as usize) < self.input[axis]).then_some(i as usize)
    }

    /// Visits every (column-row offset, input offset) pair of one kernel row,
    /// covering the output volume.
    #[inline]
    fn for_row(&self, taps: Dims3, mut f: impl FnMut(usize, Option<usize>)) {
        let [_, ih, iw] = self.input;
        let [ot, oh, ow] = self.output;
        let mut col = 0;
        for to in 0..ot {
            let ti = self.source(0, to, taps[0]);
            for ho in 0..oh {
                let hi = self.source(1, ho, taps[1]);
                for wo in 0..ow {
                    let wi = self.source(2, wo, taps[2]);
                    let src = match (ti, hi, wi) {
                        (Some(t), Some(h), Some(w)) => Some((t * ih + h) * iw + w),
                        _ => None,
                    };
                    f(col, src);
                    col += 1;
                }
            }
        }
    }

    fn im2col<T: Real>(&self, x: &[T], col: &mut [T]) {
        let plane: usize = self.input.iter().product();
        let cols = self.cols();
        let [kt, kh, kw] = self.kernel;
        let mut row = 0;
        for ci in 0..self.cin {
            let xc = &x[ci * plane..(ci + 1) * plane];
            for a in 0..kt {
                for b in 0..kh {
                    for c in 0..kw {
                        let dst = &mut col[row * cols..(row + 1) * cols];
                        self.for_row([a, b, c], |j, src| {
                            dst[j] = src.map_or(T::zero(), |s| xc[s]);
                        });
                        row += 1;
                    }
                }
            }
        }
    }

    fn col2im<T: Real>(&self, col: &[T], dx: &mut [T]) {
        let plane: usize = self.input.iter().product();
        let cols = self.cols();
        let [kt, kh, kw] = self.kernel;
        let mut row = 0;
        for ci in 0..self.cin {
            let dxc = &mut dx[ci * plane..(ci + 1) * plane];
            for a in 0..kt {
                for b in 0..kh {
                    for c in 0..kw {
                        let src_row = &col[row * cols..(row + 1) * cols];
                        self.for_row([a, b, c], |j, dst| {
                            if let Some(d) = dst {
                                dxc[d] += src_row[j];
                            }
                        });
                        row += 1;
                    }
                }
            }
        }
    }
}

/// 3D convolution (cross-correlation) with zero padding.
///
/// `weights` has shape `(out_channels, in_channels, kt, kh, kw)`; `bias`,
/// when present, has one entry per output channel.
pub fn conv3d<T: Real>(
    x: &Tensor<T>,
    spec: &ConvSpec,
    weights: &Tensor<T>,
    bias: Option<&[T]>,
) -> Result<Tensor<T>> {
    let out_shape = conv3d_output_shape(x.shape(), spec)?;
    check_weights(spec, weights)?;
    if let Some(b) = bias {
        if b.len() != spec.out_channels {
            return Err(Error::Dimension {
                op: "conv3d bias",
                axis: "out_channels",
                expected: spec.out_channels,
                got: b.len(),
            });
        }
    }
    let geo = Geometry::new(spec, x.shape().volume(), out_shape.volume());
    let (rows, cols, cout) = (geo.rows(), geo.cols(), spec.out_channels);
    let mut out = Tensor::zeros(out_shape);
    let mut col = if spec.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); rows * cols]
    };
    for n in 0..x.shape().n() {
        let xs = x.sample(n);
        let patches: &[T] = if spec.is_pointwise() {
            xs
        } else {
            geo.im2col(xs, &mut col);
            &col
        };
        let ys = out.sample_mut(n);
        matmul(cout, rows, cols, weights.data(), false, patches, false, ys, false);
        if let Some(b) = bias {
            for (co, y) in ys.chunks_mut(cols).enumerate() {
                y.iter_mut().for_each(|v| *v += b[co]);
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct ConvGrads<T: Real> {
    pub input: Option<Tensor<T>>,
    pub weight: Option<Tensor<T>>,
    pub bias: Option<Vec<T>>,
}

/// Gradients of [`conv3d`] given the output gradient. Each flag selects
/// which gradient to compute.
pub fn conv3d_backward<T: Real>(
    x: &Tensor<T>,
    spec: &ConvSpec,
    weights: &Tensor<T>,
    grad_out: &Tensor<T>,
    want_input: bool,
    want_weight: bool,
    want_bias: bool,
) -> Result<ConvGrads<T>> {
    let out_shape = conv3d_output_shape(x.shape(), spec)?;
    check_weights(spec, weights)?;
    if grad_out.shape() != out_shape {
        return Err(Error::Contract {
            op: "conv3d_backward",
            msg: format!("grad shape {} != output shape {out_shape}", grad_out.shape()),
        });
    }
    let geo = Geometry::new(spec, x.shape().volume(), out_shape.volume());
    let (rows, cols, cout) = (geo.rows(), geo.cols(), spec.out_channels);
    let pointwise = spec.is_pointwise();

    let mut dx = want_input.then(|| Tensor::zeros(x.shape()));
    let mut dw = want_weight.then(|| Tensor::zeros(weights.shape()));
    let mut db = want_bias.then(|| vec![T::zero(); cout]);
    let mut col = vec![T::zero(); if pointwise { 0 } else { rows * cols }];
    let mut dcol = vec![T::zero(); if pointwise || !want_input { 0 } else { rows * cols }];

    for n in 0..x.shape().n() {
        let dy = grad_out.sample(n);
        if let Some(db) = db.as_mut() {
            for (co, g) in dy.chunks(cols).enumerate() {
                db[co] += g.iter().copied().sum::<T>();
            }
        }
        if let Some(dw) = dw.as_mut() {
            let patches: &[T] = if pointwise {
                x.sample(n)
            } else {
                geo.im2col(x.sample(n), &mut col);
                &col
            };
            matmul(cout, cols, rows, dy, false, patches, true, dw.data_mut(), true);
        }
        if let Some(dx) = dx.as_mut() {
            let dxs = dx.sample_mut(n);
            if pointwise {
                matmul(rows, cout, cols, weights.data(), true, dy, false, dxs, false);
            } else {
                matmul(rows, cout, cols, weights.data(), true, dy, false, &mut dcol, false);
                geo.col2im(&dcol, dxs);
            }
        }
    }
    Ok(ConvGrads {
        input: dx,
        weight: dw,
        bias: db,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_kernel() {
        let x = Tensor::<f32>::from_vec(Shape::scalar(), vec![3.5]).unwrap();
        let spec = ConvSpec::new(1, 1, [1, 1, 1]);
        let w = Tensor::ones(spec.weight_shape());
        let y = conv3d(&x, &spec, &w, None).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn window_sum() {
        let x = Tensor::<f32>::ones(Shape::new(1, 1, 2, 2, 2));
        let spec = ConvSpec::new(1, 1, [2, 2, 2]);
        let w = Tensor::ones(spec.weight_shape());
        let y = conv3d(&x, &spec, &w, None).unwrap();
        assert_eq!(y.shape(), Shape::scalar());
        assert_eq!(y.data(), &[8.0]);
    }

    #[test]
    fn stem_shape() {
        let spec = ConvSpec::new(3, 64, [3, 7, 7])
            .with_stride([1, 2, 2])
            .with_pad([1, 3, 3]);
        let out = conv3d_output_shape(Shape::new(1, 3, 16, 224, 224), &spec).unwrap();
        assert_eq!(out, Shape::new(1, 64, 16, 112, 112));
    }

    #[test]
    fn same_padding_even_depth() {
        for d in 1..=7 {
            let spec = ConvSpec::same(2, 2, [d, 3, 3]);
            assert_eq!(spec.pad[0], (d / 2, (d - 1) / 2));
            assert_eq!(spec.output_volume([4, 5, 5]).unwrap(), [4, 5, 5], "depth {d}");
        }
    }

    #[test]
    fn channel_mismatch_names_axis() {
        let x = Tensor::<f32>::zeros(Shape::new(1, 2, 3, 3, 3));
        let spec = ConvSpec::new(3, 1, [1, 1, 1]);
        let w = Tensor::zeros(spec.weight_shape());
        match conv3d(&x, &spec, &w, None) {
            Err(Error::Dimension { axis, expected, got, .. }) => {
                assert_eq!((axis, expected, got), ("c", 3, 2));
            }
            other => panic!("unexpected {other:?}"),
        }
        let spec = ConvSpec::new(2, 1, [1, 1, 1]);
        let bad_w = Tensor::<f32>::zeros(Shape::new(1, 2, 1, 3, 1));
        assert!(matches!(
            conv3d(&x, &spec, &bad_w, None),
            Err(Error::Dimension { axis: "kh", .. })
        ));
    }

    #[test]
    fn empty_output_is_an_error() {
        let spec = ConvSpec::new(1, 1, [3, 3, 3]);
        assert!(matches!(
            spec.output_volume([2, 5, 5]),
            Err(Error::EmptyOutput { axis: "t", .. })
        ));
        assert_eq!(output_len("x", 0, 1, 2, 2, (0, 0)).unwrap_err().kind(), "dimension");
    }

    #[test]
    fn bias_applied_per_channel() {
        let x = Tensor::<f64>::zeros(Shape::new(2, 1, 1, 2, 2));
        let spec = ConvSpec::new(1, 2, [1, 1, 1]);
        let w = Tensor::zeros(spec.weight_shape());
        let y = conv3d(&x, &spec, &w, Some(&[1.0, -2.0])).unwrap();
        assert!(y.sample(1)[..4].iter().all(|&v| v == 1.0));
        assert!(y.sample(1)[4..].iter().all(|&v| v == -2.0));
    }
}
