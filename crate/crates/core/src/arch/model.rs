use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{ArchSpec, TransitionKind};
use crate::autograd::{Graph, NodeId};
use crate::blocks::{ttl_branch_kernel, BatchNorm, Classifier, Conv, DenseBlock, Transition, Ttl};
use crate::error::{Error, Result};
use crate::params::{Bound, Ctx, Init, ParamId, ParamStore};
use crate::tensor::{BnMode, ConvSpec, PoolSpec, Real, Shape, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub enum StageTransition {
    None,
    Standard(Transition),
    Ttl(Ttl),
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageNet {
    pub block: DenseBlock,
    pub transition: StageTransition,
}

/// Layer structure of a built [`ArchSpec`]; parameters live in the
/// accompanying [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub stem: Conv,
    pub stem_norm: BatchNorm,
    pub stem_pool: Option<PoolSpec>,
    pub stages: Vec<StageNet>,
    pub final_norm: BatchNorm,
    pub classifier: Classifier,
}

impl Network {
    pub fn new<T: Real>(spec: &ArchSpec, init: &mut Init<'_, T>) -> Result<Self> {
        spec.validate()?;
        let s = &spec.stem;
        let stem_spec = ConvSpec::new(spec.input[0], s.channels, s.kernel)
            .with_stride(s.stride)
            .with_pad(s.pad);
        let stem = Conv::new(init, "stem.conv", stem_spec, false);
        let stem_norm = BatchNorm::new(init, "stem.norm", s.channels);

        let mut c = s.channels;
        let mut stages = Vec::with_capacity(spec.stages.len());
        for (i, stage) in spec.stages.iter().enumerate() {
            let name = format!("stage{}", i + 1);
            let block = DenseBlock::new(
                init,
                &format!("{name}.block"),
                c,
                stage.layers,
                spec.growth,
                spec.bottleneck,
                spec.dense_kernel,
            );
            c = block.out_channels();
            let transition = match &stage.transition {
                TransitionKind::None => StageTransition::None,
                TransitionKind::Standard => StageTransition::Standard(Transition::new(
                    init,
                    &format!("{name}.transition"),
                    c,
                    spec.theta,
                    spec.transition_pool,
                )?),
                TransitionKind::Ttl { depths, .. } => {
                    let widths = spec.ttl_branch_widths(i, c).unwrap_or_default();
                    let branches: Vec<_> = depths
                        .iter()
                        .zip(widths)
                        .map(|(&d, w)| (ttl_branch_kernel(d, spec.spatial_kernel()), w))
                        .collect();
                    StageTransition::Ttl(Ttl::new(init, &format!("{name}.ttl"), c, &branches, spec.transition_pool)?)
                }
            };
            c = match &transition {
                StageTransition::None => c,
                StageTransition::Standard(t) => t.out_channels(),
                StageTransition::Ttl(t) => t.out_channels(),
            };
            stages.push(StageNet { block, transition });
        }
        let final_norm = BatchNorm::new(init, "head.norm", c);
        let classifier = Classifier::new(init, "classifier", c, spec.num_classes);
        Ok(Network {
            stem,
            stem_norm,
            stem_pool: spec.stem_pool,
            stages,
            final_norm,
            classifier,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.classifier.linear.in_features
    }

    /// Records the forward pass; logits have shape `(n, classes, 1, 1, 1)`.
    pub fn forward<T: Real>(&self, cx: &mut Ctx<'_, T>, x: NodeId) -> Result<NodeId> {
        self.forward_traced(cx, x, &mut |_, _| {})
    }

    /// [`Network::forward`], reporting the output shape of every audit row.
    pub fn forward_traced<T: Real>(
        &self,
        cx: &mut Ctx<'_, T>,
        x: NodeId,
        trace: &mut dyn FnMut(&str, Shape),
    ) -> Result<NodeId> {
        let mut y = self.stem.forward(cx, x)?;
        y = self.stem_norm.forward(cx, y)?;
        y = cx.graph.relu(y);
        trace("stem.conv", cx.graph.shape(y));
        if let Some(pool) = &self.stem_pool {
            y = cx.graph.pool3d(y, pool)?;
            trace("stem.pool", cx.graph.shape(y));
        }
        for (i, stage) in self.stages.iter().enumerate() {
            y = stage.block.forward(cx, y)?;
            trace(&format!("block{}", i + 1), cx.graph.shape(y));
            match &stage.transition {
                StageTransition::None => {}
                StageTransition::Standard(t) => {
                    y = t.forward(cx, y)?;
                    trace(&format!("transition{}", i + 1), cx.graph.shape(y));
                }
                StageTransition::Ttl(t) => {
                    y = t.forward(cx, y)?;
                    trace(&format!("ttl{}", i + 1), cx.graph.shape(y));
                }
            }
        }
        y = self.final_norm.forward(cx, y)?;
        y = cx.graph.relu(y);
        trace("head.norm", cx.graph.shape(y));
        let y = self.classifier.forward(cx, y)?;
        trace("classifier", cx.graph.shape(y));
        Ok(y)
    }
}

/// A network together with its spec and parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<T: Real = f32> {
    pub spec: ArchSpec,
    pub net: Network,
    pub params: ParamStore<T>,
}

impl<T: Real> Model<T> {
    /// Conv and linear weights are He-normal, batch-norm scale 1 and shift
    /// 0, biases 0. Deterministic per `seed`.
    pub fn build(spec: &ArchSpec, seed: u64) -> Result<Self> {
        let mut params = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = Network::new(
            spec,
            &mut Init {
                store: &mut params,
                rng: &mut rng,
            },
        )?;
        Ok(Model {
            spec: spec.clone(),
            net,
            params,
        })
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            spec: self.spec.clone(),
            net: self.net.clone(),
            params: self.params.cast(),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.spec.num_classes
    }

    /// Input shape for a batch of `n` clips.
    pub fn input_shape(&self, n: usize) -> Shape {
        let [c, t, h, w] = self.spec.input;
        Shape::new(n, c, t, h, w)
    }

    pub fn check_input(&self, x: Shape) -> Result<()> {
        let expected = self.input_shape(x.n());
        for axis in 1..5 {
            if x.0[axis] != expected.0[axis] {
                return Err(Error::Dimension {
                    op: "model input",
                    axis: crate::error::AXIS_NAMES[axis],
                    expected: expected.0[axis],
                    got: x.0[axis],
                });
            }
        }
        Ok(())
    }

    /// Records the forward pass of `x` on `graph` with parameters already
    /// bound there; returns the logits node and the queued running-stat
    /// updates (empty in eval mode).
    pub fn record(
        &self,
        graph: &mut Graph<T>,
        bound: &Bound,
        x: NodeId,
        mode: BnMode,
    ) -> Result<(NodeId, Vec<(ParamId, Tensor<T>)>)> {
        self.check_input(graph.shape(x))?;
        let mut cx = Ctx::new(graph, &self.params, bound, mode);
        let y = self.net.forward(&mut cx, x)?;
        Ok((y, cx.finish()))
    }

    /// Eval-mode logits, `(n, classes, 1, 1, 1)`.
    pub fn logits(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let bound = self.params.bind(&mut g, true);
        let xn = g.constant(x.clone());
        let (y, _) = self.record(&mut g, &bound, xn, BnMode::Eval)?;
        Ok(g.value(y).clone())
    }

    /// Observed `(row, shape)` of every audit row for one eval-mode forward
    /// pass of `x`.
    pub fn trace_shapes(&self, x: &Tensor<T>) -> Result<Vec<(String, Shape)>> {
        self.check_input(x.shape())?;
        let mut g = Graph::new();
        let bound = self.params.bind(&mut g, true);
        let xn = g.constant(x.clone());
        let mut rows = Vec::new();
        let mut cx = Ctx::new(&mut g, &self.params, &bound, BnMode::Eval);
        self.net
            .forward_traced(&mut cx, xn, &mut |name, shape| rows.push((name.to_string(), shape)))?;
        Ok(rows)
    }

    /// The same network with a freshly initialized `num_classes`-way
    /// classifier; every other parameter is copied.
    pub fn with_new_head(&self, num_classes: usize, seed: u64) -> Result<Self> {
        let spec = self.spec.clone().with_classes(num_classes);
        let mut fresh = Model::build(&spec, seed)?;
        for (id, p) in fresh.params.iter_mut() {
            if p.name.starts_with("classifier.") {
                continue;
            }
            let old = self.params.get(id);
            debug_assert_eq!(old.name, p.name);
            p.value = old.value.clone();
        }
        Ok(fresh)
    }
}
