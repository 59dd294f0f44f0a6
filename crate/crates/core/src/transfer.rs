//! Supervision transfer from a frozen 2D teacher to a 3D student.
//!
//! The teacher embeds `X` single frames and averages them; the student
//! embeds the clip those frames (may) come from. A small head on the
//! concatenated embeddings decides whether the two correspond, and only
//! the student and the head are trained.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::arch::{ArchSpec, Model};
use crate::autograd::{Graph, NodeId};
use crate::blocks::Linear;
use crate::data::{make_pairs, sample_clip, ClipBatch, PairBatch, SamplerConfig, Split, Video, VideoStore};
use crate::error::{Error, Result};
use crate::inference::argmax;
use crate::params::{Bound, Ctx, Init, ParamStore};
use crate::tensor::{BnMode, Real, Shape, Tensor};
use crate::training::{sgd_step, train, History, LrSchedule, Schedule, SgdState, TrainConfig, TrainOutcome};

/// Width of the teacher and student embeddings.
pub const EMBED_DIM: usize = 1024;

/// `concat(teacher, student) → fc1 → ReLU → fc2 → ReLU → 2 logits`.
#[derive(Debug, Clone, PartialEq)]
pub struct TransferHead {
    pub fc1: Linear,
    pub fc2: Linear,
    pub classifier: Linear,
}

impl TransferHead {
    pub fn new<T: Real>(init: &mut Init<'_, T>, teacher_dim: usize, student_dim: usize) -> Self {
        TransferHead {
            fc1: Linear::new(init, "head.fc1", teacher_dim + student_dim, 512),
            fc2: Linear::new(init, "head.fc2", 512, 128),
            classifier: Linear::new(init, "head.classifier", 128, 2),
        }
    }

    pub fn forward<T: Real>(&self, cx: &mut Ctx<'_, T>, teacher: NodeId, student: NodeId) -> Result<NodeId> {
        let x = cx.graph.concat(&[teacher, student])?;
        let x = self.fc1.forward(cx, x)?;
        let x = cx.graph.relu(x);
        let x = self.fc2.forward(cx, x)?;
        let x = cx.graph.relu(x);
        self.classifier.forward(cx, x)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadModel<T: Real = f32> {
    pub head: TransferHead,
    pub params: ParamStore<T>,
}

impl<T: Real> HeadModel<T> {
    pub fn build(teacher_dim: usize, student_dim: usize, seed: u64) -> Self {
        let mut params = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let head = TransferHead::new(
            &mut Init {
                store: &mut params,
                rng: &mut rng,
            },
            teacher_dim,
            student_dim,
        );
        HeadModel { head, params }
    }

    pub fn cast<U: Real>(&self) -> HeadModel<U> {
        HeadModel {
            head: self.head.clone(),
            params: self.params.cast(),
        }
    }
}

/// Per-frame teacher embeddings averaged in groups of `x`, recorded on
/// `graph` in eval mode and detached from everything upstream.
pub fn record_teacher_embedding<T: Real>(
    graph: &mut Graph<T>,
    teacher: &Model<T>,
    bound: &Bound,
    frames: NodeId,
    x: usize,
) -> Result<NodeId> {
    let (per_frame, _) = teacher.record(graph, bound, frames, BnMode::Eval)?;
    let mean = graph.group_mean(per_frame, x)?;
    Ok(graph.detach(mean))
}

/// `(n·x, 3, 1, h, w)` frames → `(n, embed)` averaged teacher embeddings.
pub fn teacher_embed(teacher: &Model, frames: &Tensor, x: usize) -> Result<Tensor> {
    let mut g = Graph::new();
    let bound = teacher.params.bind(&mut g, true);
    let f = g.constant(frames.clone());
    let e = record_teacher_embedding(&mut g, teacher, &bound, f, x)?;
    Ok(g.value(e).clone())
}

/// The student: `spec` with its classifier widened to the embedding size.
pub fn student_spec(spec: &ArchSpec) -> ArchSpec {
    spec.clone().with_classes(EMBED_DIM)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TeacherConfig {
    pub epochs: usize,
    /// Random frames drawn from each train video per epoch.
    pub frames_per_video: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        TeacherConfig {
            epochs: 40,
            frames_per_video: 8,
            batch_size: 32,
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 1e-4,
            seed: 0,
        }
    }
}

/// Pretrains a 2D teacher on single frames, labelled by appearance
/// (shape × hue) through an auxiliary linear classifier that is then
/// discarded. Returns the teacher and its final frame accuracy on the
/// val split.
pub fn pretrain_teacher(
    spec: &ArchSpec,
    store: &VideoStore,
    sampler: &SamplerConfig,
    cfg: &TeacherConfig,
    on_epoch: &mut dyn FnMut(usize, f64, f64),
) -> Result<(Model, f64)> {
    use crate::data::NUM_APPEARANCE_CLASSES;
    if spec.input[1] != 1 {
        return Err(Error::Spec(format!("teacher `{}` must take single frames (t = 1)", spec.name)));
    }
    let mut teacher = Model::build(spec, cfg.seed)?;
    let mut aux = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7eac);
    let aux_fc = Linear::new(
        &mut Init {
            store: &mut aux,
            rng: &mut rng,
        },
        "aux",
        spec.num_classes,
        NUM_APPEARANCE_CLASSES,
    );
    let frame_cfg = SamplerConfig {
        clip_len: 1,
        stride: 1,
        ..sampler.clone()
    };
    let sample = |v: &Video, rng: &mut ChaCha8Rng| -> Result<(Tensor, usize)> {
        let t = rng.random_range(0..v.num_frames());
        let frame = Video {
            frames: v.frames.select_frames(&[t])?,
            ..v.clone()
        };
        let clip = sample_clip(&frame, &frame_cfg, &store.means, rng)?;
        Ok((clip.data, v.jitter.appearance_class()))
    };

    let train_videos: Vec<&Video> = store.split(Split::Train).collect();
    let mut order: Vec<&Video> = (0..cfg.frames_per_video).flat_map(|_| train_videos.iter().copied()).collect();
    let val: Vec<&Video> = (0..cfg.frames_per_video).flat_map(|_| store.split(Split::Val)).collect();
    let (mut st, mut sa) = (SgdState::new(), SgdState::new());
    let mut val_acc = 0.0;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut steps) = (0.0, 0);
        for chunk in order.chunks(cfg.batch_size) {
            let (xs, labels): (Vec<_>, Vec<_>) =
                chunk.iter().map(|v| sample(v, &mut rng)).collect::<Result<Vec<_>>>()?.into_iter().unzip();
            let mut g = Graph::new();
            let tb = teacher.params.bind(&mut g, false);
            let ab = aux.bind(&mut g, false);
            let x = g.constant(Tensor::stack_batch(&xs)?);
            let (emb, stats) = teacher.record(&mut g, &tb, x, BnMode::Train)?;
            let mut cx = Ctx::new(&mut g, &aux, &ab, BnMode::Train);
            let logits = aux_fc.forward(&mut cx, emb)?;
            let loss = g.softmax_cross_entropy(logits, &labels)?;
            loss_sum += g.value(loss).data()[0] as f64;
            steps += 1;
            g.backward(loss)?;
            let gt = tb.grads(&mut g, &teacher.params);
            let ga = ab.grads(&mut g, &aux);
            sgd_step(&mut teacher.params, &gt, &mut st, cfg.lr, cfg.momentum, cfg.weight_decay)?;
            sgd_step(&mut aux, &ga, &mut sa, cfg.lr, cfg.momentum, cfg.weight_decay)?;
            teacher.params.apply_stats(stats);
        }
        let mut vrng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
        let (xs, labels): (Vec<_>, Vec<_>) =
            val.iter().map(|v| sample(v, &mut vrng)).collect::<Result<Vec<_>>>()?.into_iter().unzip();
        if !xs.is_empty() {
            let mut g = Graph::new();
            let tb = teacher.params.bind(&mut g, true);
            let ab = aux.bind(&mut g, true);
            let x = g.constant(Tensor::stack_batch(&xs)?);
            let (emb, _) = teacher.record(&mut g, &tb, x, BnMode::Eval)?;
            let mut cx = Ctx::new(&mut g, &aux, &ab, BnMode::Eval);
            let logits = aux_fc.forward(&mut cx, emb)?;
            val_acc = accuracy(g.value(logits), &labels);
        }
        on_epoch(epoch, loss_sum / steps.max(1) as f64, val_acc);
    }
    Ok((teacher, val_acc))
}

fn accuracy(logits: &Tensor, labels: &[usize]) -> f64 {
    let k = logits.shape().c();
    let correct = logits
        .data()
        .chunks(k)
        .zip(labels)
        .filter(|(row, &l)| argmax(&row.iter().map(|&v| v as f64).collect::<Vec<_>>()) == l)
        .count();
    correct as f64 / labels.len().max(1) as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransferConfig {
    pub steps: usize,
    /// Pairs per step.
    pub batch_size: usize,
    /// Teacher frames per pair; `None` means the clip length.
    #[serde(default)]
    pub frames: Option<usize>,
    pub lr: f64,
    /// Stepped once per training step, with the batch loss.
    pub schedule: Schedule,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Size of the fixed training pair set drawn from the train split.
    pub train_pairs: usize,
    /// Size of the held-out pair set drawn from the val split.
    pub eval_pairs: usize,
    /// Evaluate every this many steps (and after the last).
    pub eval_every: usize,
}

impl Default for TransferConfig {
    fn default() -> Self {
        TransferConfig {
            steps: 400,
            batch_size: 32,
            frames: None,
            lr: 0.05,
            schedule: Schedule::StepEvery { every: 300, factor: 0.1 },
            momentum: 0.9,
            weight_decay: 1e-4,
            seed: 0,
            train_pairs: 500,
            eval_pairs: 500,
            eval_every: 50,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TransferRecord {
    pub step: usize,
    pub loss: f64,
    /// Accuracy on the step's own batch, before the update.
    pub batch_accuracy: f64,
    /// Eval-mode accuracy on the whole training pair set, when evaluated.
    pub train_accuracy: Option<f64>,
    /// Eval-mode accuracy on the held-out pairs, when evaluated.
    pub heldout_accuracy: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TransferOutcome {
    pub student: Model,
    pub head: HeadModel,
    pub curve: Vec<TransferRecord>,
    /// Final accuracy on the training pair set.
    pub pair_accuracy: f64,
    /// Final accuracy on pairs from videos never seen in training.
    pub heldout_accuracy: f64,
}

impl TransferOutcome {
    /// `step,loss,batch_accuracy,train_accuracy,heldout_accuracy`; the
    /// last two columns are empty on steps without evaluation.
    pub fn curve_csv(&self) -> String {
        let opt = |a: Option<f64>| a.map(|a| format!("{a:.6}")).unwrap_or_default();
        let mut out = String::from("step,loss,batch_accuracy,train_accuracy,heldout_accuracy\n");
        for r in &self.curve {
            out.push_str(&format!(
                "{},{:.6},{:.6},{},{}\n",
                r.step,
                r.loss,
                r.batch_accuracy,
                opt(r.train_accuracy),
                opt(r.heldout_accuracy)
            ));
        }
        out
    }
}

/// Result of one recorded transfer forward/backward pass.
pub struct StepResult {
    pub loss: f64,
    pub correct: usize,
    /// Gradient norm of every teacher parameter, when probed.
    pub teacher_grad_norms: Option<Vec<f64>>,
}

/// One correspondence step. With `probe`, teacher parameters are bound as
/// differentiable leaves instead of constants, and their gradient norms
/// after the backward pass are reported. Nothing is updated when `lr` is
/// `None`.
pub fn transfer_step(
    teacher: &Model,
    student: &mut Model,
    head: &mut HeadModel,
    batch: &PairBatch,
    update: Option<(&mut SgdState<f32>, &mut SgdState<f32>, &TransferConfig)>,
    probe: bool,
) -> Result<StepResult> {
    let mut g = Graph::new();
    let tb = teacher.params.bind(&mut g, !probe);
    let sb = student.params.bind(&mut g, false);
    let hb = head.params.bind(&mut g, false);
    let frames = g.constant(batch.frames.clone());
    let t_emb = record_teacher_embedding(&mut g, teacher, &tb, frames, batch.x)?;
    let clips = g.constant(batch.clips.clone());
    let (s_emb, stats) = student.record(&mut g, &sb, clips, BnMode::Train)?;
    let mut cx = Ctx::new(&mut g, &head.params, &hb, BnMode::Train);
    let logits = head.head.forward(&mut cx, t_emb, s_emb)?;
    let loss = g.softmax_cross_entropy(logits, &batch.labels)?;
    let value = g.value(loss).data()[0] as f64;
    if !value.is_finite() {
        return Err(Error::Numeric(format!("transfer loss is {value}")));
    }
    let correct = (accuracy(g.value(logits), &batch.labels) * batch.len() as f64).round() as usize;
    g.backward(loss)?;
    let teacher_grad_norms = probe.then(|| {
        teacher
            .params
            .ids()
            .filter_map(|id| tb.get(id))
            .map(|n| g.grad(n).map_or(0.0, |t| t.sum_sq().sqrt()))
            .collect()
    });
    if let Some((ss, sh, cfg)) = update {
        let gs = sb.grads(&mut g, &student.params);
        let gh = hb.grads(&mut g, &head.params);
        sgd_step(&mut student.params, &gs, ss, cfg.lr, cfg.momentum, cfg.weight_decay)?;
        sgd_step(&mut head.params, &gh, sh, cfg.lr, cfg.momentum, cfg.weight_decay)?;
        student.params.apply_stats(stats);
    }
    Ok(StepResult {
        loss: value,
        correct,
        teacher_grad_norms,
    })
}

/// Eval-mode pair accuracy.
pub fn pair_accuracy(teacher: &Model, student: &Model, head: &HeadModel, pairs: &[PairBatch]) -> Result<f64> {
    let (mut correct, mut total) = (0usize, 0usize);
    for batch in pairs {
        let mut g = Graph::new();
        let tb = teacher.params.bind(&mut g, true);
        let sb = student.params.bind(&mut g, true);
        let hb = head.params.bind(&mut g, true);
        let frames = g.constant(batch.frames.clone());
        let t_emb = record_teacher_embedding(&mut g, teacher, &tb, frames, batch.x)?;
        let clips = g.constant(batch.clips.clone());
        let (s_emb, _) = student.record(&mut g, &sb, clips, BnMode::Eval)?;
        let mut cx = Ctx::new(&mut g, &head.params, &hb, BnMode::Eval);
        let logits = head.head.forward(&mut cx, t_emb, s_emb)?;
        correct += (accuracy(g.value(logits), &batch.labels) * batch.len() as f64).round() as usize;
        total += batch.len();
    }
    Ok(correct as f64 / total.max(1) as f64)
}

/// A fixed pair set of `n` pairs in batches of at most `batch`.
pub fn pair_set(
    videos: &[&Video],
    sampler: &SamplerConfig,
    means: &[f32; 3],
    x: usize,
    n: usize,
    batch: usize,
    rng: &mut impl Rng,
) -> Result<Vec<PairBatch>> {
    let mut out = Vec::new();
    let mut left = n;
    while left > 0 {
        let m = left.min(batch);
        out.push(make_pairs(videos, sampler, means, x, m, rng)?);
        left -= m;
    }
    Ok(out)
}

/// Trains `student` and a fresh head on a fixed set of correspondence
/// pairs drawn from the train split; the teacher is only read. Held-out
/// pairs from the val split measure how well the matching generalizes.
pub fn transfer_train(
    teacher: &Model,
    student: Model,
    store: &VideoStore,
    sampler: &SamplerConfig,
    cfg: &TransferConfig,
    on_record: &mut dyn FnMut(&TransferRecord),
) -> Result<TransferOutcome> {
    if teacher.num_classes() != EMBED_DIM || student.num_classes() != EMBED_DIM {
        return Err(Error::Spec(format!(
            "teacher and student must both embed to {EMBED_DIM} (got {} and {})",
            teacher.num_classes(),
            student.num_classes()
        )));
    }
    let x = cfg.frames.unwrap_or(sampler.clip_len);
    let train_videos: Vec<&Video> = store.split(Split::Train).collect();
    let val_videos: Vec<&Video> = store.split(Split::Val).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut pairs = pair_set(&train_videos, sampler, &store.means, x, cfg.train_pairs, cfg.batch_size, &mut rng)?;
    let mut eval_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xe7a1);
    let heldout = pair_set(&val_videos, sampler, &store.means, x, cfg.eval_pairs, 50, &mut eval_rng)?;

    let mut student = student;
    let mut head = HeadModel::build(EMBED_DIM, EMBED_DIM, cfg.seed ^ 0x4ead);
    let (mut ss, mut sh) = (SgdState::new(), SgdState::new());
    let mut curve = Vec::with_capacity(cfg.steps);
    let mut accuracy = (
        pair_accuracy(teacher, &student, &head, &pairs)?,
        pair_accuracy(teacher, &student, &head, &heldout)?,
    );
    let mut schedule = LrSchedule::new(cfg.schedule, cfg.lr);
    let mut step_cfg = cfg.clone();
    for step in 0..cfg.steps {
        let k = step % pairs.len();
        if k == 0 {
            pairs.shuffle(&mut rng);
        }
        let batch = &pairs[k];
        step_cfg.lr = schedule.lr();
        let r = transfer_step(teacher, &mut student, &mut head, batch, Some((&mut ss, &mut sh, &step_cfg)), false)?;
        schedule.end_epoch(step, r.loss);
        let evaluated = (step + 1) % cfg.eval_every.max(1) == 0 || step + 1 == cfg.steps;
        if evaluated {
            accuracy = (
                pair_accuracy(teacher, &student, &head, &pairs)?,
                pair_accuracy(teacher, &student, &head, &heldout)?,
            );
        }
        let record = TransferRecord {
            step,
            loss: r.loss,
            batch_accuracy: r.correct as f64 / batch.len() as f64,
            train_accuracy: evaluated.then_some(accuracy.0),
            heldout_accuracy: evaluated.then_some(accuracy.1),
        };
        on_record(&record);
        curve.push(record);
    }
    Ok(TransferOutcome {
        student,
        head,
        curve,
        pair_accuracy: accuracy.0,
        heldout_accuracy: accuracy.1,
    })
}

/// Supervised training of a model whose head already matches the dataset;
/// the history is tagged with how the model was initialized.
pub fn finetune(
    model: Model,
    store: &VideoStore,
    sampler: &SamplerConfig,
    cfg: &TrainConfig,
    init_tag: &str,
    out_dir: Option<&Path>,
    on_epoch: &mut dyn FnMut(&crate::training::EpochRecord),
) -> Result<TrainOutcome> {
    if cfg.max_epochs == 0 {
        if model.num_classes() != store.num_classes() {
            return Err(Error::Spec(format!(
                "model has {} classes, dataset {}",
                model.num_classes(),
                store.num_classes()
            )));
        }
        return Ok(TrainOutcome {
            best: model.clone(),
            model,
            history: History::tagged(init_tag),
        });
    }
    train(model, store, sampler, cfg, init_tag, out_dir, on_epoch)
}

/// Student clips as a batch, for callers embedding them directly.
pub fn student_embed(student: &Model, clips: &ClipBatch) -> Result<Tensor> {
    let e = student.logits(&clips.clips)?;
    debug_assert_eq!(e.shape(), Shape::vector(clips.len(), student.num_classes()));
    Ok(e)
}
