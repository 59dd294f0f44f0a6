//! Finite-difference checks of every layer type, in 64-bit.
//!
//! Each case builds a small random instance of a layer, reduces its output
//! to a scalar, and compares the backward pass against central
//! differences on a random subset of elements of every parameter and input.

use std::fmt;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::arch::{ArchSpec, Model, StageSpec, StemSpec, TransitionKind};
use crate::autograd::{finite_diff_check, Evaluation, Graph, NodeId};
use crate::blocks::{transition_pool, BnReluConv, Classifier, DenseBlock, DenseLayer, Transition, Ttl};
use crate::error::{Error, Result};
use crate::params::{Ctx, Init, ParamStore};
use crate::tensor::{BnMode, ConvSpec, PoolMode, PoolSpec, Shape, Tensor};
use crate::transfer::HeadModel;

pub const STEP: f64 = 1e-4;
pub const TOLERANCE: f64 = 1e-5;

/// Registered layer names, in report order.
pub const LAYERS: &[&str] = &[
    "conv3d",
    "max_pool3d",
    "avg_pool3d",
    "batchnorm3d",
    "relu_conv",
    "dense_layer",
    "dense_block",
    "transition",
    "ttl",
    "classifier",
    "transfer_head",
    "t3d_small",
];

type Forward = Box<dyn Fn(&mut Ctx<'_, f64>, &[NodeId]) -> Result<NodeId>>;

struct Case {
    params: ParamStore<f64>,
    inputs: Vec<Tensor<f64>>,
    mode: BnMode,
    /// Maps the layer output to the scalar objective.
    forward: Forward,
}

impl Case {
    fn eval(&self, params: &ParamStore<f64>, inputs: &[Tensor<f64>], grads: bool) -> Result<(Evaluation, Vec<Tensor<f64>>)> {
        let mut g = Graph::new();
        let bound = params.bind(&mut g, false);
        let xs: Vec<NodeId> = inputs.iter().map(|x| g.leaf(x.clone())).collect();
        let loss = {
            let mut cx = Ctx::new(&mut g, params, &bound, self.mode);
            (self.forward)(&mut cx, &xs)?
        };
        let e = Evaluation {
            value: g.value(loss).data()[0],
            signature: g.kink_signature(),
        };
        if !grads {
            return Ok((e, Vec::new()));
        }
        g.backward(loss)?;
        let mut out = Vec::new();
        for (id, p) in params.iter() {
            if p.kind.trainable() {
                let n = bound.node(id);
                out.push(g.grad(n).cloned().unwrap_or_else(|| Tensor::zeros(p.value.shape())));
            }
        }
        for (&x, t) in xs.iter().zip(inputs) {
            out.push(g.grad(x).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())));
        }
        Ok((e, out))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckRow {
    pub layer: String,
    pub seeds: usize,
    pub checked: usize,
    pub skipped: usize,
    pub max_rel_error: f64,
}

impl GradcheckRow {
    pub fn passed(&self) -> bool {
        self.checked > 0 && self.max_rel_error < TOLERANCE
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct GradcheckReport {
    pub rows: Vec<GradcheckRow>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        !self.rows.is_empty() && self.rows.iter().all(GradcheckRow::passed)
    }
}

impl fmt::Display for GradcheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<14} {:>5} {:>8} {:>8} {:>12}  status", "layer", "seeds", "checked", "skipped", "max rel err")?;
        for r in &self.rows {
            writeln!(
                f,
                "{:<14} {:>5} {:>8} {:>8} {:>12.3e}  {}",
                r.layer,
                r.seeds,
                r.checked,
                r.skipped,
                r.max_rel_error,
                if r.passed() { "ok" } else { "FAIL" }
            )?;
        }
        Ok(())
    }
}

fn init<'a>(store: &'a mut ParamStore<f64>, rng: &'a mut ChaCha8Rng) -> Init<'a, f64> {
    Init { store, rng }
}

/// Perturbs batch-norm affine parameters away from their (1, 0) init so
/// their gradients are exercised at a generic point.
fn jitter_params(store: &mut ParamStore<f64>, rng: &mut ChaCha8Rng) {
    for (_, p) in store.iter_mut() {
        if p.kind.trainable() {
            for v in p.value.data_mut() {
                *v += rng.random_range(-0.2..0.2);
            }
        }
    }
}

fn projection(g: &mut Graph<f64>, out: NodeId, rng: &mut ChaCha8Rng) -> Result<NodeId> {
    let r = Tensor::randn(g.shape(out), 1.0, rng);
    g.dot(out, r)
}

/// Values `0.01·k` for distinct `k` in random order: no two window entries
/// within a few steps of each other, so the argmax is stable under ±step.
fn spaced(shape: Shape, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.numel();
    let mut v: Vec<f64> = (0..n).map(|k| 0.01 * k as f64 - 0.005 * n as f64).collect();
    rand::seq::SliceRandom::shuffle(&mut v[..], rng);
    Tensor::from_vec(shape, v).expect("matching length")
}

fn small_t3d() -> ArchSpec {
    ArchSpec {
        name: "t3d-small".into(),
        input: [3, 4, 12, 12],
        num_classes: 3,
        growth: 2,
        bottleneck: 2,
        theta: 0.5,
        stem: StemSpec {
            channels: 4,
            kernel: [3, 3, 3],
            stride: [1, 2, 2],
            pad: [1, 1, 1],
        },
        stem_pool: None,
        dense_kernel: [3, 3, 3],
        transition_pool: transition_pool(),
        stages: vec![
            StageSpec {
                layers: 1,
                transition: TransitionKind::Ttl {
                    depths: vec![1, 3],
                    widths: None,
                },
            },
            StageSpec {
                layers: 1,
                transition: TransitionKind::None,
            },
        ],
    }
}

fn build_case(layer: &str, seed: u64) -> Result<Case> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamStore::new();
    let proj_seed = rng.random::<u64>();
    let project = move |g: &mut Graph<f64>, out: NodeId| projection(g, out, &mut ChaCha8Rng::seed_from_u64(proj_seed));
    let randn = |shape, rng: &mut ChaCha8Rng| Tensor::<f64>::randn(shape, 1.0, rng);
    let case = match layer {
        "conv3d" => {
            let spec = ConvSpec {
                in_channels: 2,
                out_channels: 3,
                kernel: [3, 3, 2],
                stride: [1, 2, 1],
                pad: [(1, 1), (1, 0), (0, 1)],
            };
            let w = params.add("w", crate::params::ParamKind::ConvWeight, randn(spec.weight_shape(), &mut rng));
            let b = params.add("b", crate::params::ParamKind::Bias, randn(Shape::vector(1, 3), &mut rng));
            Case {
                params,
                inputs: vec![randn(Shape::new(1, 2, 3, 5, 5), &mut rng)],
                mode: BnMode::Train,
                forward: Box::new(move |cx, xs| {
                    let (w, b) = (cx.node(w), cx.node(b));
                    let y = cx.graph.conv3d(xs[0], w, Some(b), &spec)?;
                    project(cx.graph, y)
                }),
            }
        }
        "max_pool3d" | "avg_pool3d" => {
            let mode = if layer == "max_pool3d" { PoolMode::Max } else { PoolMode::Avg };
            let spec = PoolSpec::new(mode, [2, 3, 3], [2, 2, 2]).with_pad([0, 1, 1]);
            Case {
                params,
                inputs: vec![spaced(Shape::new(2, 2, 4, 5, 5), &mut rng)],
                mode: BnMode::Train,
                forward: Box::new(move |cx, xs| {
                    let y = cx.graph.pool3d(xs[0], &spec)?;
                    project(cx.graph, y)
                }),
            }
        }
        "batchnorm3d" => {
            let bn = crate::blocks::BatchNorm::new(&mut init(&mut params, &mut rng), "bn", 3);
            jitter_params(&mut params, &mut rng);
            Case {
                params,
                inputs: vec![randn(Shape::new(3, 3, 2, 3, 3), &mut rng)],
                mode: BnMode::Train,
                forward: Box::new(move |cx, xs| {
                    let y = bn.forward(cx, xs[0])?;
                    project(cx.graph, y)
                }),
            }
        }
        "relu_conv" => {
            let l = BnReluConv::new(&mut init(&mut params, &mut rng), "l", ConvSpec::same(3, 2, [3, 3, 3]));
            jitter_params(&mut params, &mut rng);
            Case {
                params,
                inputs: vec![randn(Shape::new(3, 3, 3, 4, 4), &mut rng)],
                mode: BnMode::Train,
                forward: Box::new(move |cx, xs| {
                    let y = l.forward(cx, xs[0])?;
                    project(cx.graph, y)
                }),
            }
        }
        "dense_layer" => {
            let l = DenseLayer::new(&mut init(&mut params, &mut rng), "l", 4, 2, 2, [3, 3, 3]);
            jitter_params(&mut params, &mut rng);
            Case {
                params,
                inputs: vec![randn(Shape::new(3, 3, 3, 4, 4), &mut rng), randn(Shape::new(3, 1, 3, 4, 4), &mut rng)],
                mode: BnMode::Train,
                forward: Box::new(move |cx, xs| {
                    let y = l.forward(cx, xs)?;
                    project(cx.graph, y)
                }),
            }
        }
        "dense_block" => {
            let b = DenseBlock::new(&mut init(&mut params, &mut rng), "b", 3, 2, 2, 2, [3, 3, 3]);
            jitter_params(&mut params, &mut rng);
            Case {
                params,
                inputs: vec![randn(Shape::new(3, 3, 2, 4, 4), &mut rng)],
                mode: BnMode::Train,
                forward: Box::new(move |cx, xs| {
                    let y = b.forward(cx, xs[0])?;
                    project(cx.graph, y)
                }),
            }
        }
        "transition" => {
            let t = Transition::new(&mut init(&mut params, &mut rng), "t", 6, 0.5, transition_pool())?;
            jitter_params(&mut params, &mut rng);
            Case {
                params,
                inputs: vec![randn(Shape::new(3, 6, 2, 4, 4), &mut rng)],
                mode: BnMode::Train,
                forward: Box::new(move |cx, xs| {
                    let y = t.forward(cx, xs[0])?;
                    project(cx.graph, y)
                }),
            }
        }
        "ttl" => {
            let t = Ttl::new(
                &mut init(&mut params, &mut rng),
                "ttl",
                4,
                &[([1, 1, 1], 2), ([3, 3, 3], 1), ([4, 3, 3], 1)],
                transition_pool(),
            )?;
            jitter_params(&mut params, &mut rng);
            Case {
                params,
                inputs: vec![randn(Shape::new(3, 4, 4, 4, 4), &mut rng)],
                mode: BnMode::Train,
                forward: Box::new(move |cx, xs| {
                    let y = t.forward(cx, xs[0])?;
                    project(cx.graph, y)
                }),
            }
        }
        "classifier" => {
            let c = Classifier::new(&mut init(&mut params, &mut rng), "c", 5, 4);
            jitter_params(&mut params, &mut rng);
            let labels: Vec<usize> = (0..3).map(|_| rng.random_range(0..4)).collect();
            Case {
                params,
                inputs: vec![randn(Shape::new(3, 5, 2, 3, 3), &mut rng)],
                mode: BnMode::Train,
                forward: Box::new(move |cx, xs| {
                    let y = c.forward(cx, xs[0])?;
                    cx.graph.softmax_cross_entropy(y, &labels)
                }),
            }
        }
        "transfer_head" => {
            let head = HeadModel::<f64>::build(12, 20, rng.random());
            params = head.params;
            jitter_params(&mut params, &mut rng);
            let h = head.head;
            let labels: Vec<usize> = (0..4).map(|i| i % 2).collect();
            Case {
                params,
                inputs: vec![randn(Shape::vector(4, 12), &mut rng), randn(Shape::vector(4, 20), &mut rng)],
                mode: BnMode::Train,
                forward: Box::new(move |cx, xs| {
                    let y = h.forward(cx, xs[0], xs[1])?;
                    cx.graph.softmax_cross_entropy(y, &labels)
                }),
            }
        }
        "t3d_small" => {
            let spec = small_t3d();
            let model: Model<f64> = Model::<f32>::build(&spec, rng.random())?.cast();
            params = model.params.clone();
            jitter_params(&mut params, &mut rng);
            let net = model.net;
            let labels: Vec<usize> = (0..3).map(|_| rng.random_range(0..3)).collect();
            Case {
                params,
                inputs: vec![randn(Shape::new(3, 3, 4, 12, 12), &mut rng)],
                mode: BnMode::Train,
                forward: Box::new(move |cx, xs| {
                    let y = net.forward(cx, xs[0])?;
                    cx.graph.softmax_cross_entropy(y, &labels)
                }),
            }
        }
        other => return Err(Error::Config(format!("unknown gradcheck layer `{other}`"))),
    };
    Ok(case)
}

/// Checks up to `per_tensor` random elements of every parameter and input
/// of `layer`, for each of `seeds` independent instances.
pub fn check_layer(layer: &str, seeds: usize, per_tensor: usize) -> Result<GradcheckRow> {
    let mut row = GradcheckRow {
        layer: layer.to_string(),
        seeds,
        checked: 0,
        skipped: 0,
        max_rel_error: 0.0,
    };
    for seed in 0..seeds as u64 {
        let case = build_case(layer, 1000 + seed)?;
        let (_, grads) = case.eval(&case.params, &case.inputs, true)?;
        let trainable: Vec<_> = case.params.iter().filter(|(_, p)| p.kind.trainable()).map(|(id, _)| id).collect();
        let mut pick = ChaCha8Rng::seed_from_u64(seed);
        for (k, analytic) in grads.iter().enumerate() {
            let elements = sample(&mut pick, analytic.len(), per_tensor.min(analytic.len())).into_vec();
            let report = if k < trainable.len() {
                let id = trainable[k];
                let p = case.params.value(id).clone();
                finite_diff_check(analytic, &p, STEP, Some(&elements), |q| {
                    let mut params = case.params.clone();
                    *params.value_mut(id) = q.clone();
                    eval_or_nan(&case, &params, &case.inputs)
                })
            } else {
                let i = k - trainable.len();
                finite_diff_check(analytic, &case.inputs[i], STEP, Some(&elements), |q| {
                    let mut inputs = case.inputs.clone();
                    inputs[i] = q.clone();
                    eval_or_nan(&case, &case.params, &inputs)
                })
            };
            row.checked += report.checked;
            row.skipped += report.skipped;
            if report.max_rel_error.is_nan() || report.max_rel_error > row.max_rel_error {
                row.max_rel_error = report.max_rel_error;
            }
        }
    }
    Ok(row)
}

fn eval_or_nan(case: &Case, params: &ParamStore<f64>, inputs: &[Tensor<f64>]) -> Evaluation {
    case.eval(params, inputs, false).map_or(
        Evaluation {
            value: f64::NAN,
            signature: 0,
        },
        |(e, _)| e,
    )
}

/// Every registered layer.
pub fn check_all(seeds: usize, per_tensor: usize) -> Result<GradcheckReport> {
    let rows = LAYERS.iter().map(|l| check_layer(l, seeds, per_tensor)).collect::<Result<_>>()?;
    Ok(GradcheckReport { rows })
}
