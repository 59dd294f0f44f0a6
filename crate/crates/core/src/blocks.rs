//! Composite building blocks: BN-ReLU-Conv units, 3D dense layers and
//! blocks, the standard transition, the Temporal Transition Layer (TTL) and
//! the classifier head.
//!
//! Every block is a plain description (kernel geometry plus [`ParamId`]s)
//! and records its forward pass onto a [`Graph`](crate::autograd::Graph)
//! through a [`Ctx`].

use crate::autograd::NodeId;
use crate::error::{Error, Result};
use crate::params::{Ctx, Init, ParamId, ParamKind};
use crate::tensor::{ConvSpec, Dims3, PoolMode, PoolSpec, Real, Shape};

/// Default TTL / transition compression.
pub const DEFAULT_THETA: f64 = 0.5;

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub channels: usize,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub mean: ParamId,
    pub var: ParamId,
}

impl BatchNorm {
    pub fn new<T: Real>(init: &mut Init<'_, T>, name: &str, channels: usize) -> Self {
        let shape = Shape::vector(1, channels);
        BatchNorm {
            channels,
            gamma: init.constant(&format!("{name}.gamma"), ParamKind::BnScale, shape, 1.0),
            beta: init.constant(&format!("{name}.beta"), ParamKind::BnShift, shape, 0.0),
            mean: init.constant(&format!("{name}.running_mean"), ParamKind::RunningMean, shape, 0.0),
            var: init.constant(&format!("{name}.running_var"), ParamKind::RunningVar, shape, 1.0),
        }
    }

    pub fn forward<T: Real>(&self, cx: &mut Ctx<'_, T>, x: NodeId) -> Result<NodeId> {
        cx.batchnorm(x, self.gamma, self.beta, self.mean, self.var)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conv {
    pub spec: ConvSpec,
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Conv {
    pub fn new<T: Real>(init: &mut Init<'_, T>, name: &str, spec: ConvSpec, bias: bool) -> Self {
        let weight = init.he(&format!("{name}.weight"), ParamKind::ConvWeight, spec.weight_shape(), spec.fan_in());
        let bias = bias.then(|| {
            init.constant(&format!("{name}.bias"), ParamKind::Bias, Shape::vector(1, spec.out_channels), 0.0)
        });
        Conv { spec, weight, bias }
    }

    pub fn forward<T: Real>(&self, cx: &mut Ctx<'_, T>, x: NodeId) -> Result<NodeId> {
        let w = cx.node(self.weight);
        let b = self.bias.map(|b| cx.node(b));
        cx.graph.conv3d(x, w, b, &self.spec)
    }
}

/// The composite function BN → ReLU → Conv. The convolution has no bias;
/// its output always reaches another batch norm.
#[derive(Debug, Clone, PartialEq)]
pub struct BnReluConv {
    pub bn: BatchNorm,
    pub conv: Conv,
}

impl BnReluConv {
    pub fn new<T: Real>(init: &mut Init<'_, T>, name: &str, spec: ConvSpec) -> Self {
        BnReluConv {
            bn: BatchNorm::new(init, &format!("{name}.norm"), spec.in_channels),
            conv: Conv::new(init, &format!("{name}.conv"), spec, false),
        }
    }

    pub fn forward<T: Real>(&self, cx: &mut Ctx<'_, T>, x: NodeId) -> Result<NodeId> {
        let y = self.bn.forward(cx, x)?;
        let y = cx.graph.relu(y);
        self.conv.forward(cx, y)
    }
}

/// One layer `H_l` of a dense block: a pointwise bottleneck to
/// `bottleneck_factor · growth` channels followed by the main kernel
/// (`3×3×3`, same-padded) producing `growth` channels.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub bottleneck: BnReluConv,
    pub main: BnReluConv,
}

impl DenseLayer {
    pub fn new<T: Real>(
        init: &mut Init<'_, T>,
        name: &str,
        in_channels: usize,
        growth: usize,
        bottleneck_factor: usize,
        kernel: Dims3,
    ) -> Self {
        let width = bottleneck_factor * growth;
        DenseLayer {
            bottleneck: BnReluConv::new(init, &format!("{name}.bottleneck"), ConvSpec::new(in_channels, width, [1; 3])),
            main: BnReluConv::new(init, &format!("{name}.main"), ConvSpec::same(width, growth, kernel)),
        }
    }

    pub fn in_channels(&self) -> usize {
        self.bottleneck.conv.spec.in_channels
    }

    pub fn growth(&self) -> usize {
        self.main.conv.spec.out_channels
    }

    /// `x_l = H_l([x_0, …, x_{l−1}])`.
    pub fn forward<T: Real>(&self, cx: &mut Ctx<'_, T>, inputs: &[NodeId]) -> Result<NodeId> {
        let total: usize = inputs.iter().map(|&i| cx.graph.shape(i).c()).sum();
        if total != self.in_channels() {
            return Err(Error::Dimension {
                op: "dense_layer",
                axis: "c",
                expected: self.in_channels(),
                got: total,
            });
        }
        let x = cx.graph.concat(inputs)?;
        let y = self.bottleneck.forward(cx, x)?;
        self.main.forward(cx, y)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseBlock {
    pub in_channels: usize,
    pub growth: usize,
    pub layers: Vec<DenseLayer>,
}

impl DenseBlock {
    pub fn new<T: Real>(
        init: &mut Init<'_, T>,
        name: &str,
        in_channels: usize,
        num_layers: usize,
        growth: usize,
        bottleneck_factor: usize,
        kernel: Dims3,
    ) -> Self {
        let layers = (0..num_layers)
            .map(|i| {
                DenseLayer::new(
                    init,
                    &format!("{name}.layer{i}"),
                    in_channels + i * growth,
                    growth,
                    bottleneck_factor,
                    kernel,
                )
            })
            .collect();
        DenseBlock {
            in_channels,
            growth,
            layers,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.in_channels + self.layers.len() * self.growth
    }

    /// Returns `concat(x, x_1, …, x_L)`; with no layers, `x` itself.
    pub fn forward<T: Real>(&self, cx: &mut Ctx<'_, T>, x: NodeId) -> Result<NodeId> {
        if self.layers.is_empty() {
            return Ok(x);
        }
        let mut features = vec![x];
        for layer in &self.layers {
            let y = layer.forward(cx, &features)?;
            features.push(y);
        }
        cx.graph.concat(&features)
    }
}

/// The `2×2×2`, stride-2 average pool closing every transition.
pub fn transition_pool() -> PoolSpec {
    PoolSpec::new(PoolMode::Avg, [2, 2, 2], [2, 2, 2])
}

/// Standard transition: BN-ReLU-Conv(1×1×1) to `floor(θ·c)` channels, then
/// average pooling.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub unit: BnReluConv,
    pub pool: PoolSpec,
}

impl Transition {
    pub fn new<T: Real>(init: &mut Init<'_, T>, name: &str, in_channels: usize, theta: f64, pool: PoolSpec) -> Result<Self> {
        let out = compressed_width(in_channels, theta);
        if out == 0 {
            return Err(Error::Spec(format!("{name}: compression {theta} leaves no channels of {in_channels}")));
        }
        Ok(Transition {
            unit: BnReluConv::new(init, name, ConvSpec::new(in_channels, out, [1; 3])),
            pool,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.unit.conv.spec.out_channels
    }

    pub fn forward<T: Real>(&self, cx: &mut Ctx<'_, T>, x: NodeId) -> Result<NodeId> {
        let y = self.unit.forward(cx, x)?;
        cx.graph.pool3d(y, &self.pool)
    }
}

/// `floor(θ · c)`.
pub fn compressed_width(channels: usize, theta: f64) -> usize {
    (theta * channels as f64 + 1e-9).floor() as usize
}

/// Splits `total` channels as evenly as possible over `branches`, the
/// remainder going to the first branch.
pub fn split_widths(total: usize, branches: usize) -> Vec<usize> {
    let base = total / branches;
    let mut widths = vec![base; branches];
    widths[0] += total - base * branches;
    widths
}

/// TTL branch widths for `in_channels` inputs: `floor(θ·c)` split by
/// [`split_widths`].
pub fn ttl_widths(in_channels: usize, theta: f64, branches: usize) -> Vec<usize> {
    split_widths(compressed_width(in_channels, theta), branches)
}

/// Kernel of a TTL branch with temporal depth `depth`: `1×1×1` for depth 1,
/// otherwise `spatial×spatial×depth`.
pub fn ttl_branch_kernel(depth: usize, spatial: usize) -> Dims3 {
    if depth == 1 {
        [1, 1, 1]
    } else {
        [depth, spatial, spatial]
    }
}

/// Temporal Transition Layer: parallel BN-ReLU-Conv branches of different
/// temporal depths, each same-padded, concatenated on channels in
/// declaration order and average-pooled.
#[derive(Debug, Clone, PartialEq)]
pub struct Ttl {
    pub branches: Vec<BnReluConv>,
    pub pool: PoolSpec,
}

impl Ttl {
    /// One branch per `(kernel, width)`.
    pub fn new<T: Real>(
        init: &mut Init<'_, T>,
        name: &str,
        in_channels: usize,
        branches: &[(Dims3, usize)],
        pool: PoolSpec,
    ) -> Result<Self> {
        if branches.is_empty() {
            return Err(Error::Spec(format!("{name}: TTL needs at least one branch")));
        }
        if let Some(i) = branches.iter().position(|&(k, w)| w == 0 || k.contains(&0)) {
            return Err(Error::Spec(format!("{name}: branch {i} is empty")));
        }
        let branches = branches
            .iter()
            .enumerate()
            .map(|(i, &(kernel, width))| {
                BnReluConv::new(init, &format!("{name}.branch{i}"), ConvSpec::same(in_channels, width, kernel))
            })
            .collect();
        Ok(Ttl { branches, pool })
    }

    pub fn in_channels(&self) -> usize {
        self.branches[0].conv.spec.in_channels
    }

    pub fn widths(&self) -> Vec<usize> {
        self.branches.iter().map(|b| b.conv.spec.out_channels).collect()
    }

    pub fn out_channels(&self) -> usize {
        self.widths().iter().sum()
    }

    pub fn forward<T: Real>(&self, cx: &mut Ctx<'_, T>, x: NodeId) -> Result<NodeId> {
        let c = cx.graph.shape(x).c();
        if c != self.in_channels() {
            return Err(Error::Dimension {
                op: "ttl",
                axis: "c",
                expected: self.in_channels(),
                got: c,
            });
        }
        let mut maps = Vec::with_capacity(self.branches.len());
        for branch in &self.branches {
            maps.push(branch.forward(cx, x)?);
        }
        let y = cx.graph.concat(&maps)?;
        cx.graph.pool3d(y, &self.pool)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub in_features: usize,
    pub out_features: usize,
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<T: Real>(init: &mut Init<'_, T>, name: &str, in_features: usize, out_features: usize) -> Self {
        Linear {
            in_features,
            out_features,
            weight: init.he(
                &format!("{name}.weight"),
                ParamKind::LinearWeight,
                Shape::new(out_features, in_features, 1, 1, 1),
                in_features,
            ),
            bias: init.constant(&format!("{name}.bias"), ParamKind::Bias, Shape::vector(1, out_features), 0.0),
        }
    }

    pub fn forward<T: Real>(&self, cx: &mut Ctx<'_, T>, x: NodeId) -> Result<NodeId> {
        let (w, b) = (cx.node(self.weight), cx.node(self.bias));
        cx.graph.linear(x, w, Some(b))
    }
}

/// Global average pooling over whatever `(t, h, w)` remains, then a linear
/// map to class logits.
#[derive(Debug, Clone, PartialEq)]
pub struct Classifier {
    pub linear: Linear,
}

impl Classifier {
    pub fn new<T: Real>(init: &mut Init<'_, T>, name: &str, channels: usize, num_classes: usize) -> Self {
        Classifier {
            linear: Linear::new(init, name, channels, num_classes),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.linear.out_features
    }

    pub fn forward<T: Real>(&self, cx: &mut Ctx<'_, T>, x: NodeId) -> Result<NodeId> {
        let pooled = cx.graph.global_avg_pool(x);
        self.linear.forward(cx, pooled)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Graph;
    use crate::params::ParamStore;
    use crate::tensor::{BnMode, Tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    struct Fixture {
        store: ParamStore<f32>,
        rng: ChaCha8Rng,
    }

    impl Fixture {
        fn new() -> Self {
            Fixture {
                store: ParamStore::new(),
                rng: ChaCha8Rng::seed_from_u64(11),
            }
        }

        fn init(&mut self) -> Init<'_, f32> {
            Init {
                store: &mut self.store,
                rng: &mut self.rng,
            }
        }

        fn run(&mut self, inputs: &[Shape], f: impl FnOnce(&mut Ctx<'_, f32>, &[NodeId]) -> Result<NodeId>) -> Result<Shape> {
            let mut g = Graph::new();
            let bound = self.store.bind(&mut g, false);
            let xs: Vec<NodeId> = inputs
                .iter()
                .map(|&s| g.constant(Tensor::randn(s, 1.0, &mut self.rng)))
                .collect();
            let mut cx = Ctx::new(&mut g, &self.store, &bound, BnMode::Train);
            let y = f(&mut cx, &xs)?;
            Ok(g.shape(y))
        }
    }

    #[test]
    fn dense_layer_growth() {
        let mut fx = Fixture::new();
        let layer = DenseLayer::new(&mut fx.init(), "l", 64, 32, 4, [3, 3, 3]);
        assert_eq!(layer.bottleneck.conv.spec.out_channels, 128);
        let out = fx.run(&[Shape::new(1, 64, 8, 16, 16)], |cx, xs| layer.forward(cx, xs)).unwrap();
        assert_eq!(out, Shape::new(1, 32, 8, 16, 16));
    }

    #[test]
    fn dense_layer_concatenates_inputs() {
        let mut fx = Fixture::new();
        let layer = DenseLayer::new(&mut fx.init(), "l", 128, 32, 4, [3, 3, 3]);
        assert_eq!(layer.in_channels(), 128);
        let shapes = [64, 32, 32].map(|c| Shape::new(1, c, 2, 3, 3));
        let out = fx.run(&shapes, |cx, xs| layer.forward(cx, xs)).unwrap();
        assert_eq!(out.c(), 32);
        let err = fx.run(&shapes[..2], |cx, xs| layer.forward(cx, xs)).unwrap_err();
        assert!(matches!(err, Error::Dimension { op: "dense_layer", expected: 128, got: 96, .. }));
    }

    #[test]
    fn dense_block_channel_arithmetic() {
        let mut fx = Fixture::new();
        assert_eq!(DenseBlock::new(&mut fx.init(), "b", 64, 6, 32, 4, [3, 3, 3]).out_channels(), 256);
        assert_eq!(DenseBlock::new(&mut fx.init(), "b", 128, 12, 32, 4, [3, 3, 3]).out_channels(), 512);
    }

    #[test]
    fn empty_block_is_identity() {
        let mut fx = Fixture::new();
        let block = DenseBlock::new(&mut fx.init(), "b", 5, 0, 8, 4, [3, 3, 3]);
        let mut g = Graph::<f32>::new();
        let bound = fx.store.bind(&mut g, false);
        let x = g.constant(Tensor::ones(Shape::new(1, 5, 1, 2, 2)));
        let mut cx = Ctx::new(&mut g, &fx.store, &bound, BnMode::Train);
        assert_eq!(block.forward(&mut cx, x).unwrap(), x);
    }

    #[test]
    fn ttl_width_allocation() {
        assert_eq!(ttl_widths(256, 0.5, 3), vec![44, 42, 42]);
        assert_eq!(ttl_widths(512, 0.5, 3), vec![86, 85, 85]);
        assert_eq!(ttl_widths(7, 0.5, 1), vec![3]);
        assert_eq!(compressed_width(256, 1.0), 256);
    }

    #[test]
    fn ttl_table_shape() {
        let mut fx = Fixture::new();
        let branches: Vec<(Dims3, usize)> = [1, 3, 6]
            .iter()
            .zip(ttl_widths(16, 0.5, 3))
            .map(|(&d, w)| (ttl_branch_kernel(d, 3), w))
            .collect();
        let ttl = Ttl::new(&mut fx.init(), "ttl", 16, &branches, transition_pool()).unwrap();
        assert_eq!(ttl.widths(), vec![4, 2, 2]);
        let out = fx.run(&[Shape::new(1, 16, 8, 6, 6)], |cx, xs| ttl.forward(cx, xs[0])).unwrap();
        assert_eq!(out, Shape::new(1, 8, 4, 3, 3));
    }

    #[test]
    fn deep_temporal_branch_on_short_input() {
        let mut fx = Fixture::new();
        let ttl = Ttl::new(&mut fx.init(), "ttl", 4, &[([6, 3, 3], 2)], transition_pool()).unwrap();
        let mut g = Graph::<f32>::new();
        let bound = fx.store.bind(&mut g, false);
        let x = g.constant(Tensor::ones(Shape::new(1, 4, 4, 4, 4)));
        let mut cx = Ctx::new(&mut g, &fx.store, &bound, BnMode::Train);
        let y = ttl.branches[0].forward(&mut cx, x).unwrap();
        assert_eq!(g.shape(y), Shape::new(1, 2, 4, 4, 4));
    }

    #[test]
    fn transition_compresses_and_halves() {
        let mut fx = Fixture::new();
        let tr = Transition::new(&mut fx.init(), "tr", 32, 0.5, transition_pool()).unwrap();
        let out = fx.run(&[Shape::new(1, 32, 4, 6, 6)], |cx, xs| tr.forward(cx, xs[0])).unwrap();
        assert_eq!(out, Shape::new(1, 16, 2, 3, 3));
        let keep = Transition::new(&mut fx.init(), "tr", 10, 1.0, transition_pool()).unwrap();
        assert_eq!(keep.out_channels(), 10);
        let err = fx.run(&[Shape::new(1, 32, 1, 6, 6)], |cx, xs| tr.forward(cx, xs[0])).unwrap_err();
        assert!(matches!(err, Error::EmptyOutput { axis: "t", .. }));
    }

    #[test]
    fn classifier_constant_and_bias() {
        let mut fx = Fixture::new();
        let head = Classifier::new(&mut fx.init(), "fc", 3, 4);
        *fx.store.value_mut(head.linear.weight) = Tensor::zeros(Shape::new(4, 3, 1, 1, 1));
        *fx.store.value_mut(head.linear.bias) = Tensor::from_rows(&[vec![1.0, 2.0, 3.0, 4.0]]).unwrap();
        let mut g = Graph::<f32>::new();
        let bound = fx.store.bind(&mut g, false);
        let x = g.constant(Tensor::full(Shape::new(2, 3, 2, 7, 7), 0.5));
        let mut cx = Ctx::new(&mut g, &fx.store, &bound, BnMode::Eval);
        let y = head.forward(&mut cx, x).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 2.0, 3.0, 4.0, 1.0, 2.0, 3.0, 4.0]);
        let pooled = g.inputs(g.inputs(y)[0])[0];
        assert_eq!(g.op_name(g.inputs(y)[0]), "global_avg_pool");
        assert_eq!(g.shape(pooled), Shape::new(2, 3, 2, 7, 7));
    }
}
