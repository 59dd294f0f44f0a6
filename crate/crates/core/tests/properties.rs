use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use t3d::arch::{audit, ArchSpec, Model, StageSpec, StemSpec, TransitionKind};
use t3d::autograd::Graph;
use t3d::blocks::{transition_pool, ttl_branch_kernel, ttl_widths, DenseBlock, Ttl};
use t3d::params::{Ctx, Init, ParamStore};
use t3d::tensor::{concat_channels, conv3d, conv3d_output_shape, slice_channels, softmax, BnMode, ConvSpec, PoolMode, PoolSpec, Shape, Tensor};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn conv_spec() -> impl Strategy<Value = (ConvSpec, Shape)> {
    (1usize..=3, 1usize..=3, prop::array::uniform3(1usize..=3), prop::array::uniform3(1usize..=2), prop::array::uniform3(0usize..=2), 1usize..=2)
        .prop_flat_map(|(ci, co, kernel, stride, pad, n)| {
            let spec = ConvSpec {
                in_channels: ci,
                out_channels: co,
                kernel,
                stride,
                pad: pad.map(|p| (p, p)),
            };
            (Just(spec), (3usize..=6, 3usize..=6, 3usize..=6).prop_map(move |(t, h, w)| Shape::new(n, ci, t, h, w)))
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn conv_shape_formula((spec, input) in conv_spec()) {
        let out = conv3d_output_shape(input, &spec).unwrap();
        for axis in 0..3 {
            let expected = (input.0[2 + axis] + 2 * spec.pad[axis].0 - spec.kernel[axis]) / spec.stride[axis] + 1;
            prop_assert_eq!(out.0[2 + axis], expected);
        }
        prop_assert_eq!(out.c(), spec.out_channels);
        prop_assert_eq!(out.n(), input.n());
    }

    #[test]
    fn conv_is_linear((spec, input) in conv_spec(), seed in any::<u64>(), a in -2.0f64..2.0, b in -2.0f64..2.0) {
        let mut r = rng(seed);
        let x = Tensor::<f64>::randn(input, 1.0, &mut r);
        let y = Tensor::<f64>::randn(input, 1.0, &mut r);
        let w = Tensor::<f64>::randn(spec.weight_shape(), 1.0, &mut r);
        let lhs = conv3d(&x.axpby(a, &y, b), &spec, &w, None).unwrap();
        let rhs = conv3d(&x, &spec, &w, None).unwrap().axpby(a, &conv3d(&y, &spec, &w, None).unwrap(), b);
        for (l, r) in lhs.data().iter().zip(rhs.data()) {
            prop_assert!((l - r).abs() < 1e-9);
        }
    }

    #[test]
    fn concat_then_slice_is_identity(c1 in 1usize..4, c2 in 1usize..4, seed in any::<u64>()) {
        let mut r = rng(seed);
        let a = Tensor::<f32>::randn(Shape::new(2, c1, 2, 3, 3), 1.0, &mut r);
        let b = Tensor::<f32>::randn(Shape::new(2, c2, 2, 3, 3), 1.0, &mut r);
        let cat = concat_channels(&[&a, &b]).unwrap();
        prop_assert_eq!(cat.shape().c(), c1 + c2);
        prop_assert_eq!(slice_channels(&cat, 0, c1).unwrap(), a);
        prop_assert_eq!(slice_channels(&cat, c1, c2).unwrap(), b);
    }

    #[test]
    fn softmax_is_a_distribution(logits in prop::collection::vec(-50.0f64..50.0, 1..20)) {
        let p = softmax(&logits);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(p.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn max_pool_dominates_avg_pool(seed in any::<u64>(), k in 1usize..=3) {
        let x = Tensor::<f64>::randn(Shape::new(1, 2, 4, 4, 4), 1.0, &mut rng(seed));
        let (mx, _) = t3d::tensor::pool3d(&x, &PoolSpec::new(PoolMode::Max, [k; 3], [1; 3])).unwrap();
        let (av, _) = t3d::tensor::pool3d(&x, &PoolSpec::new(PoolMode::Avg, [k; 3], [1; 3])).unwrap();
        prop_assert!(mx.data().iter().zip(av.data()).all(|(m, a)| m >= &(a - 1e-12)));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn dense_block_channel_law(c in 1usize..12, layers in 0usize..4, growth in 1usize..6, bf in 1usize..4, seed in any::<u64>()) {
        let mut store = ParamStore::<f32>::new();
        let mut r = rng(seed);
        let block = DenseBlock::new(&mut Init { store: &mut store, rng: &mut r }, "b", c, layers, growth, bf, [3, 3, 3]);
        prop_assert_eq!(block.out_channels(), c + layers * growth);
        let mut g = Graph::new();
        let bound = store.bind(&mut g, false);
        let x = g.constant(Tensor::randn(Shape::new(2, c, 2, 3, 3), 1.0, &mut r));
        let mut cx = Ctx::new(&mut g, &store, &bound, BnMode::Train);
        let y = block.forward(&mut cx, x).unwrap();
        prop_assert_eq!(g.shape(y), Shape::new(2, c + layers * growth, 2, 3, 3));
    }

    #[test]
    fn ttl_channel_law(c in 4usize..40, depths in prop::collection::btree_set(1usize..=6, 1..=4), theta in prop::sample::select(vec![0.5, 0.75, 1.0]), seed in any::<u64>()) {
        let depths: Vec<usize> = depths.into_iter().collect();
        let widths = ttl_widths(c, theta, depths.len());
        prop_assume!(widths.iter().all(|&w| w > 0));
        let branches: Vec<_> = depths.iter().zip(&widths).map(|(&d, &w)| (ttl_branch_kernel(d, 3), w)).collect();
        let mut store = ParamStore::<f32>::new();
        let mut r = rng(seed);
        let ttl = Ttl::new(&mut Init { store: &mut store, rng: &mut r }, "ttl", c, &branches, transition_pool()).unwrap();
        let total: usize = widths.iter().sum();
        prop_assert_eq!(ttl.out_channels(), total);
        let mut g = Graph::new();
        let bound = store.bind(&mut g, false);
        let x = g.constant(Tensor::randn(Shape::new(1, c, 4, 4, 4), 1.0, &mut r));
        let mut cx = Ctx::new(&mut g, &store, &bound, BnMode::Eval);
        let y = ttl.forward(&mut cx, x).unwrap();
        prop_assert_eq!(g.shape(y), Shape::new(1, total, 2, 2, 2));
    }
}

fn small_arch() -> impl Strategy<Value = ArchSpec> {
    let transition = prop_oneof![
        Just(TransitionKind::Standard),
        prop::collection::btree_set(1usize..=4, 1..=3).prop_map(|d| TransitionKind::Ttl {
            depths: d.into_iter().collect(),
            widths: None,
        }),
    ];
    (
        1usize..=4,
        1usize..=3,
        2usize..=8,
        prop::collection::vec((0usize..=2, transition), 0..=2),
        0usize..=2,
        any::<bool>(),
        2usize..=5,
        prop::sample::select(vec![12usize, 16, 20]),
    )
        .prop_map(|(growth, bottleneck, stem, stages, last, pool, classes, side)| {
            let mut stages: Vec<StageSpec> = stages.into_iter().map(|(layers, transition)| StageSpec { layers, transition }).collect();
            stages.push(StageSpec {
                layers: last,
                transition: TransitionKind::None,
            });
            ArchSpec {
                name: "random".into(),
                input: [3, 4, side, side],
                num_classes: classes,
                growth,
                bottleneck,
                theta: 0.5,
                stem: StemSpec {
                    channels: stem,
                    kernel: [3, 3, 3],
                    stride: [1, 2, 2],
                    pad: [1, 1, 1],
                },
                stem_pool: pool.then(|| PoolSpec::new(PoolMode::Max, [1, 3, 3], [1, 1, 1]).with_pad([0, 1, 1])),
                dense_kernel: [3, 3, 3],
                transition_pool: transition_pool(),
                stages,
            }
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn spec_text_round_trips(spec in small_arch()) {
        prop_assume!(spec.validate().is_ok());
        let text = spec.to_string();
        prop_assert_eq!(ArchSpec::parse(&text).unwrap(), spec);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(20))]

    #[test]
    fn audit_agrees_with_forward(spec in small_arch(), seed in any::<u64>()) {
        prop_assume!(spec.validate().is_ok());
        let report = audit(&spec).unwrap();
        let model = Model::<f32>::build(&spec, seed).unwrap();
        prop_assert_eq!(report.total_params(), model.params.num_trainable());
        let observed = model.trace_shapes(&Tensor::zeros(model.input_shape(1))).unwrap();
        prop_assert_eq!(observed.len(), report.rows.len());
        for ((name, shape), row) in observed.iter().zip(&report.rows) {
            prop_assert_eq!(name, &row.layer);
            prop_assert_eq!(*shape, row.shape);
        }
    }
}

#[test]
fn shared_value_gets_summed_gradient() {
    let mut g = Graph::<f64>::new();
    let x = g.leaf(Tensor::from_rows(&[vec![1.0, -2.0, 3.0]]).unwrap());
    let a = g.dot(x, Tensor::from_rows(&[vec![1.0, 2.0, 3.0]]).unwrap()).unwrap();
    let b = g.dot(x, Tensor::from_rows(&[vec![10.0, 20.0, 30.0]]).unwrap()).unwrap();
    let s = g.add(a, b).unwrap();
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[11.0, 22.0, 33.0]);
}

#[test]
fn backward_is_deterministic() {
    let spec = t3d::arch::tiny_t3d();
    let model = Model::<f32>::build(&spec, 3).unwrap();
    let x = Tensor::randn(model.input_shape(2), 1.0, &mut rng(4));
    let grads = || {
        let mut g = Graph::new();
        let bound = model.params.bind(&mut g, false);
        let xn = g.constant(x.clone());
        let (logits, _) = model.record(&mut g, &bound, xn, BnMode::Train).unwrap();
        let loss = g.softmax_cross_entropy(logits, &[1, 5]).unwrap();
        g.backward(loss).unwrap();
        bound.grads(&mut g, &model.params)
    };
    assert_eq!(grads(), grads());
}
