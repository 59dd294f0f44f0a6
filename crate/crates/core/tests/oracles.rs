//! Direct-loop reference implementations checked against the optimized
//! kernels.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use t3d::tensor::{conv3d, conv3d_output_shape, pool3d, ConvSpec, PoolMode, PoolSpec, Shape, Tensor};

/// Seven nested loops over (n, out-channel, t, h, w, in-channel, kernel).
fn naive_conv(x: &Tensor<f64>, spec: &ConvSpec, w: &Tensor<f64>, b: &[f64]) -> Tensor<f64> {
    let out = conv3d_output_shape(x.shape(), spec).unwrap();
    let [n, _, it, ih, iw] = x.shape().0;
    let [_, co, ot, oh, ow] = out.0;
    let [kt, kh, kw] = spec.kernel;
    let mut y = Tensor::zeros(out);
    for ni in 0..n {
        for o in 0..co {
            for t in 0..ot {
                for h in 0..oh {
                    for wi in 0..ow {
                        let mut acc = b[o];
                        for c in 0..spec.in_channels {
                            for dt in 0..kt {
                                for dh in 0..kh {
                                    for dw in 0..kw {
                                        let st = (t * spec.stride[0] + dt) as i64 - spec.pad[0].0 as i64;
                                        let sh = (h * spec.stride[1] + dh) as i64 - spec.pad[1].0 as i64;
                                        let sw = (wi * spec.stride[2] + dw) as i64 - spec.pad[2].0 as i64;
                                        if st < 0 || sh < 0 || sw < 0 || st >= it as i64 || sh >= ih as i64 || sw >= iw as i64 {
                                            continue;
                                        }
                                        let xv = x.data()[x.shape().offset([ni, c, st as usize, sh as usize, sw as usize])];
                                        let wv = w.data()[w.shape().offset([o, c, dt, dh, dw])];
                                        acc += xv * wv;
                                    }
                                }
                            }
                        }
                        let off = out.offset([ni, o, t, h, wi]);
                        y.data_mut()[off] = acc;
                    }
                }
            }
        }
    }
    y
}

fn naive_pool(x: &Tensor<f64>, spec: &PoolSpec) -> Tensor<f64> {
    let out = spec.output_shape(x.shape()).unwrap();
    let [n, c, it, ih, iw] = x.shape().0;
    let [_, _, ot, oh, ow] = out.0;
    let volume = (spec.kernel[0] * spec.kernel[1] * spec.kernel[2]) as f64;
    let mut y = Tensor::zeros(out);
    for ni in 0..n {
        for ci in 0..c {
            for t in 0..ot {
                for h in 0..oh {
                    for w in 0..ow {
                        let mut vals = Vec::new();
                        for dt in 0..spec.kernel[0] {
                            for dh in 0..spec.kernel[1] {
                                for dw in 0..spec.kernel[2] {
                                    let st = (t * spec.stride[0] + dt) as i64 - spec.pad[0].0 as i64;
                                    let sh = (h * spec.stride[1] + dh) as i64 - spec.pad[1].0 as i64;
                                    let sw = (w * spec.stride[2] + dw) as i64 - spec.pad[2].0 as i64;
                                    if st >= 0 && sh >= 0 && sw >= 0 && st < it as i64 && sh < ih as i64 && sw < iw as i64 {
                                        vals.push(x.data()[x.shape().offset([ni, ci, st as usize, sh as usize, sw as usize])]);
                                    }
                                }
                            }
                        }
                        let v = match spec.mode {
                            PoolMode::Max => vals.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                            PoolMode::Avg => vals.iter().sum::<f64>() / volume,
                        };
                        let off = out.offset([ni, ci, t, h, w]);
                        y.data_mut()[off] = v;
                    }
                }
            }
        }
    }
    y
}

fn max_abs_diff(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn conv_matches_direct_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..40 {
        let kernel = [rng.random_range(1..=3), rng.random_range(1..=3), rng.random_range(1..=3)];
        let spec = ConvSpec {
            in_channels: rng.random_range(1..=3),
            out_channels: rng.random_range(1..=4),
            kernel,
            stride: [rng.random_range(1..=2), rng.random_range(1..=2), rng.random_range(1..=2)],
            pad: kernel.map(|k| (rng.random_range(0..k), rng.random_range(0..k))),
        };
        let x = Tensor::<f64>::randn(
            Shape::new(rng.random_range(1..=2), spec.in_channels, rng.random_range(3..=5), rng.random_range(3..=6), rng.random_range(3..=6)),
            1.0,
            &mut rng,
        );
        let w = Tensor::<f64>::randn(spec.weight_shape(), 1.0, &mut rng);
        let b: Vec<f64> = (0..spec.out_channels).map(|_| rng.random_range(-1.0..1.0)).collect();
        let fast = conv3d(&x, &spec, &w, Some(&b)).unwrap();
        let slow = naive_conv(&x, &spec, &w, &b);
        assert!(max_abs_diff(&fast, &slow) < 1e-5, "{spec:?}");

        let fast32 = conv3d(&x.cast::<f32>(), &spec, &w.cast(), Some(&b.iter().map(|&v| v as f32).collect::<Vec<_>>())).unwrap();
        assert!(max_abs_diff(&fast32.cast(), &slow) < 1e-4, "{spec:?}");
    }
}

#[test]
fn pool_matches_direct_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for i in 0..40 {
        let mode = if i % 2 == 0 { PoolMode::Max } else { PoolMode::Avg };
        let kernel = [rng.random_range(1..=3), rng.random_range(1..=3), rng.random_range(1..=3)];
        let spec = PoolSpec::new(mode, kernel, [rng.random_range(1..=2), rng.random_range(1..=2), rng.random_range(1..=2)])
            .with_pad(kernel.map(|k| rng.random_range(0..=k / 2)));
        let x = Tensor::<f64>::randn(Shape::new(2, 2, rng.random_range(3..=5), rng.random_range(3..=6), 5), 1.0, &mut rng);
        let (fast, _) = pool3d(&x, &spec).unwrap();
        assert!(max_abs_diff(&fast, &naive_pool(&x, &spec)) < 1e-12, "{spec:?}");
    }
}

#[test]
fn stem_geometry_on_video_input() {
    let spec = ConvSpec {
        in_channels: 3,
        out_channels: 2,
        kernel: [3, 7, 7],
        stride: [1, 2, 2],
        pad: [(1, 1), (3, 3), (3, 3)],
    };
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let x = Tensor::<f64>::randn(Shape::new(1, 3, 4, 16, 16), 1.0, &mut rng);
    let w = Tensor::<f64>::randn(spec.weight_shape(), 0.1, &mut rng);
    let fast = conv3d(&x, &spec, &w, None).unwrap();
    assert_eq!(fast.shape(), Shape::new(1, 2, 4, 8, 8));
    assert!(max_abs_diff(&fast, &naive_conv(&x, &spec, &w, &[0.0, 0.0])) < 1e-10);
}
