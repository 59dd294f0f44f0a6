//! SGD with Nesterov momentum, learning-rate schedules and the supervised
//! clip-classification loop.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::arch::{save_checkpoint, Model};
use crate::autograd::Graph;
use crate::data::{sample_clip, ClipBatch, SamplerConfig, Split, Video, VideoStore};
use crate::error::{Error, Result};
use crate::inference::evaluate;
use crate::params::ParamStore;
use crate::tensor::{BnMode, Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Schedule {
    Constant,
    /// Multiply by `factor` every `every` epochs.
    StepEvery { every: usize, factor: f64 },
    /// Multiply by `factor` once the validation loss has failed to improve
    /// by more than `threshold` for `patience` epochs in a row.
    Plateau { patience: usize, factor: f64, threshold: f64 },
}

impl Schedule {
    pub fn step_every_30() -> Self {
        Schedule::StepEvery { every: 30, factor: 0.1 }
    }

    pub fn plateau(patience: usize) -> Self {
        Schedule::Plateau {
            patience,
            factor: 0.1,
            threshold: 1e-4,
        }
    }
}

/// `constant`, `step[:every[:factor]]` or `plateau[:patience[:factor]]`.
impl std::str::FromStr for Schedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut parts = s.split(':');
        let kind = parts.next().unwrap_or_default();
        let args: Vec<&str> = parts.collect();
        let bad = || Error::Config(format!("bad schedule `{s}`"));
        let num = |i: usize| -> Result<Option<f64>> { args.get(i).map(|a| a.parse::<f64>().map_err(|_| bad())).transpose() };
        let count = |i: usize| -> Result<Option<usize>> { args.get(i).map(|a| a.parse::<usize>().map_err(|_| bad())).transpose() };
        let schedule = match kind {
            "constant" if args.is_empty() => Schedule::Constant,
            "step" if args.len() <= 2 => Schedule::StepEvery {
                every: count(0)?.unwrap_or(30),
                factor: num(1)?.unwrap_or(0.1),
            },
            "plateau" if args.len() <= 2 => Schedule::Plateau {
                patience: count(0)?.unwrap_or(5),
                factor: num(1)?.unwrap_or(0.1),
                threshold: 1e-4,
            },
            _ => return Err(bad()),
        };
        Ok(schedule)
    }
}

/// Stop as soon as an epoch reaches both accuracies.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StopRule {
    pub train_accuracy: f64,
    pub val_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub schedule: Schedule,
    pub max_epochs: usize,
    pub seed: u64,
    #[serde(default)]
    pub stop: Option<StopRule>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr0: 0.1,
            momentum: 0.9,
            weight_decay: 1e-4,
            batch_size: 64,
            schedule: Schedule::step_every_30(),
            max_epochs: 90,
            seed: 0,
            stop: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > 0.0) {
            return Err(Error::Config(format!("lr0 must be positive, got {}", self.lr0)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        if self.weight_decay < 0.0 || self.batch_size == 0 {
            return Err(Error::Config("weight_decay must be ≥ 0 and batch_size ≥ 1".into()));
        }
        if let Schedule::StepEvery { every: 0, .. } = self.schedule {
            return Err(Error::Config("step schedule needs every ≥ 1".into()));
        }
        Ok(())
    }
}

/// Per-parameter momentum buffers.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SgdState<T: Real> {
    velocity: Vec<Option<Tensor<T>>>,
}

impl<T: Real> SgdState<T> {
    pub fn new() -> Self {
        SgdState { velocity: Vec::new() }
    }
}

/// One Nesterov step over every parameter with a gradient:
/// `g' = g + wd·w`, `v ← μ·v + g'`, `w ← w − lr·(g' + μ·v)`.
/// Weight decay reaches conv and linear weights only. A non-finite
/// gradient aborts before anything is modified.
pub fn sgd_step<T: Real>(
    params: &mut ParamStore<T>,
    grads: &[Option<Tensor<T>>],
    state: &mut SgdState<T>,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    if grads.len() != params.len() {
        return Err(Error::Contract {
            op: "sgd_step",
            msg: format!("{} gradients for {} parameters", grads.len(), params.len()),
        });
    }
    for ((_, p), g) in params.iter().zip(grads) {
        if let Some(g) = g {
            if g.shape() != p.value.shape() {
                return Err(Error::Contract {
                    op: "sgd_step",
                    msg: format!("gradient of `{}` has shape {}, value {}", p.name, g.shape(), p.value.shape()),
                });
            }
            if !g.is_finite() {
                return Err(Error::Numeric(format!("non-finite gradient for `{}`", p.name)));
            }
        }
    }
    state.velocity.resize(params.len(), None);
    let (lr, mu) = (T::lit(lr), T::lit(momentum));
    for (((_, p), g), v) in params.iter_mut().zip(grads).zip(state.velocity.iter_mut()) {
        let Some(g) = g else { continue };
        let wd = T::lit(if p.kind.decayed() { weight_decay } else { 0.0 });
        let vel = v.get_or_insert_with(|| Tensor::zeros(g.shape()));
        for ((w, &gi), vi) in p.value.data_mut().iter_mut().zip(g.data()).zip(vel.data_mut()) {
            let gd = gi + wd * *w;
            *vi = mu * *vi + gd;
            *w -= lr * (gd + mu * *vi);
        }
    }
    Ok(())
}

/// Learning rate as a function of the epoch and the validation history.
#[derive(Debug, Clone, PartialEq)]
pub struct LrSchedule {
    schedule: Schedule,
    lr0: f64,
    lr: f64,
    best: f64,
    wait: usize,
}

impl LrSchedule {
    pub fn new(schedule: Schedule, lr0: f64) -> Self {
        LrSchedule {
            schedule,
            lr0,
            lr: lr0,
            best: f64::INFINITY,
            wait: 0,
        }
    }

    /// Rate for the current epoch.
    pub fn lr(&self) -> f64 {
        self.lr
    }

    /// Records the end of `epoch` (0-based) and prepares `epoch + 1`.
    pub fn end_epoch(&mut self, epoch: usize, val_loss: f64) {
        match self.schedule {
            Schedule::Constant => {}
            Schedule::StepEvery { every, factor } => {
                self.lr = self.lr0 * factor.powi(((epoch + 1) / every) as i32);
            }
            Schedule::Plateau {
                patience,
                factor,
                threshold,
            } => {
                if val_loss < self.best - threshold {
                    self.best = val_loss;
                    self.wait = 0;
                } else {
                    self.wait += 1;
                    if self.wait >= patience {
                        self.lr *= factor;
                        self.wait = 0;
                    }
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    /// Running accuracy of the train-mode forward passes.
    pub train_accuracy: f64,
    pub val_loss: f64,
    /// Video-level accuracy.
    pub val_accuracy: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct History {
    /// How the trained model was initialized, e.g. `scratch` or `transfer`.
    pub tag: String,
    pub epochs: Vec<EpochRecord>,
}

impl History {
    pub fn tagged(tag: impl Into<String>) -> Self {
        History {
            tag: tag.into(),
            epochs: Vec::new(),
        }
    }

    pub fn last(&self) -> Option<&EpochRecord> {
        self.epochs.last()
    }

    pub fn best_val_accuracy(&self) -> Option<f64> {
        self.epochs.iter().map(|e| e.val_accuracy).reduce(f64::max)
    }

    /// `epoch,split,loss,accuracy,lr`, one train and one val row per epoch.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,split,loss,accuracy,lr\n");
        for e in &self.epochs {
            let _ = writeln!(out, "{},train,{:.6},{:.6},{:e}", e.epoch, e.train_loss, e.train_accuracy, e.lr);
            let _ = writeln!(out, "{},val,{:.6},{:.6},{:e}", e.epoch, e.val_loss, e.val_accuracy, e.lr);
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters after the last epoch.
    pub model: Model,
    /// Parameters of the epoch with the best validation accuracy (earliest
    /// on ties).
    pub best: Model,
    pub history: History,
}

/// Cross-entropy forward/backward on one batch; returns `(loss, correct)`
/// and leaves `model` updated (running statistics and weights).
pub fn train_step(
    model: &mut Model,
    batch: &ClipBatch,
    state: &mut SgdState<f32>,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<(f64, usize)> {
    let mut g = Graph::new();
    let bound = model.params.bind(&mut g, false);
    let x = g.constant(batch.clips.clone());
    let (logits, stats) = model.record(&mut g, &bound, x, BnMode::Train)?;
    let loss = g.softmax_cross_entropy(logits, &batch.labels)?;
    let value = g.value(loss).data()[0] as f64;
    if !value.is_finite() {
        return Err(Error::Numeric(format!("loss is {value}")));
    }
    let k = g.shape(logits).c();
    let correct = g
        .value(logits)
        .data()
        .chunks(k)
        .zip(&batch.labels)
        .filter(|(row, &label)| {
            let row: Vec<f64> = row.iter().map(|&v| v as f64).collect();
            crate::inference::argmax(&row) == label
        })
        .count();
    g.backward(loss)?;
    let grads = bound.grads(&mut g, &model.params);
    sgd_step(&mut model.params, &grads, state, lr, cfg.momentum, cfg.weight_decay)?;
    model.params.apply_stats(stats);
    Ok((value, correct))
}

/// Trains `model` on the train split of `store` and validates on its val
/// split after every epoch. With `out_dir`, writes `best.ckpt` whenever
/// the validation accuracy improves, `metrics.csv` after every epoch, and
/// `last_good.ckpt` before reporting a divergence.
pub fn train(
    model: Model,
    store: &VideoStore,
    sampler: &SamplerConfig,
    cfg: &TrainConfig,
    tag: &str,
    out_dir: Option<&Path>,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if model.num_classes() != store.num_classes() {
        return Err(Error::Spec(format!(
            "model `{}` has {} classes, dataset {}",
            model.spec.name,
            model.num_classes(),
            store.num_classes()
        )));
    }
    let train_videos: Vec<&Video> = store.split(Split::Train).collect();
    let val_videos: Vec<&Video> = store.split(Split::Val).collect();
    if train_videos.is_empty() || val_videos.is_empty() {
        return Err(Error::Config("both the train and the val split must be non-empty".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = model;
    let mut best = model.clone();
    let mut best_acc = f64::NEG_INFINITY;
    let mut state = SgdState::new();
    let mut schedule = LrSchedule::new(cfg.schedule, cfg.lr0);
    let mut history = History::tagged(tag);
    let mut order = train_videos.clone();

    for epoch in 0..cfg.max_epochs {
        let lr = schedule.lr();
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct, mut seen) = (0.0, 0usize, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let clips = chunk
                .iter()
                .map(|v| sample_clip(v, sampler, &store.means, &mut rng))
                .collect::<Result<Vec<_>>>()?;
            let batch = ClipBatch::from_clips(&clips)?;
            let before = model.clone();
            match train_step(&mut model, &batch, &mut state, lr, cfg) {
                Ok((loss, c)) => {
                    loss_sum += loss * batch.len() as f64;
                    correct += c;
                    seen += batch.len();
                }
                Err(e @ Error::Numeric(_)) => {
                    if let Some(dir) = out_dir {
                        save_checkpoint(&before, dir.join("last_good.ckpt"))?;
                    }
                    return Err(Error::Numeric(format!("epoch {epoch}: {e}")));
                }
                Err(e) => return Err(e),
            }
        }
        let (val_accuracy, val_loss) = evaluate(&model, val_videos.iter().copied(), sampler, &store.means)?;
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / seen as f64,
            train_accuracy: correct as f64 / seen as f64,
            val_loss,
            val_accuracy,
            lr,
        };
        history.epochs.push(record);
        on_epoch(&record);
        if val_accuracy > best_acc {
            best_acc = val_accuracy;
            best = model.clone();
            if let Some(dir) = out_dir {
                save_checkpoint(&best, dir.join("best.ckpt"))?;
            }
        }
        if let Some(dir) = out_dir {
            let path = dir.join("metrics.csv");
            std::fs::write(&path, history.to_csv()).map_err(|e| Error::io(&path, e))?;
        }
        schedule.end_epoch(epoch, val_loss);
        if let Some(stop) = cfg.stop {
            if record.train_accuracy >= stop.train_accuracy && record.val_accuracy >= stop.val_accuracy {
                break;
            }
        }
    }
    Ok(TrainOutcome { model, best, history })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamKind;
    use crate::tensor::Shape;

    fn one(kind: ParamKind, w: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.add("p", kind, Tensor::full(Shape::scalar(), w));
        s
    }

    fn step(store: &mut ParamStore<f64>, g: f64, lr: f64, mu: f64, wd: f64, state: &mut SgdState<f64>) {
        let grads = vec![Some(Tensor::full(Shape::scalar(), g))];
        sgd_step(store, &grads, state, lr, mu, wd).unwrap();
    }

    #[test]
    fn nesterov_first_step() {
        let mut s = one(ParamKind::ConvWeight, 0.0);
        let mut state = SgdState::new();
        step(&mut s, 1.0, 0.1, 0.9, 0.0, &mut state);
        let w = s.value(s.ids().next().unwrap()).data()[0];
        assert!((w - -0.19).abs() < 1e-15, "{w}");
        assert_eq!(state.velocity[0].as_ref().unwrap().data()[0], 1.0);
    }

    #[test]
    fn zero_momentum_is_plain_sgd() {
        let mut s = one(ParamKind::ConvWeight, 1.0);
        let mut state = SgdState::new();
        step(&mut s, 0.5, 0.1, 0.0, 0.0, &mut state);
        assert!((s.value(s.ids().next().unwrap()).data()[0] - 0.95).abs() < 1e-15);
    }

    #[test]
    fn weight_decay_only_on_weights() {
        let mut s = one(ParamKind::LinearWeight, 1.0);
        let mut state = SgdState::new();
        step(&mut s, 0.0, 0.1, 0.0, 1e-4, &mut state);
        assert_eq!(s.value(s.ids().next().unwrap()).data()[0], 1.0 - 0.1 * 1e-4);
        let mut s = one(ParamKind::BnScale, 1.0);
        step(&mut s, 0.0, 0.1, 0.0, 1e-4, &mut SgdState::new());
        assert_eq!(s.value(s.ids().next().unwrap()).data()[0], 1.0);
    }

    #[test]
    fn nan_gradient_aborts_untouched() {
        let mut s = one(ParamKind::ConvWeight, 1.0);
        let before = s.clone();
        let grads = vec![Some(Tensor::full(Shape::scalar(), f64::NAN))];
        let err = sgd_step(&mut s, &grads, &mut SgdState::new(), 0.1, 0.9, 0.0).unwrap_err();
        assert!(matches!(err, Error::Numeric(_)));
        assert_eq!(s, before);
    }

    #[test]
    fn step_schedule() {
        let mut s = LrSchedule::new(Schedule::step_every_30(), 0.1);
        let mut lrs = Vec::new();
        for e in 0..61 {
            lrs.push(s.lr());
            s.end_epoch(e, 1.0);
        }
        assert_eq!(lrs[0], 0.1);
        assert_eq!(lrs[29], 0.1);
        assert!((lrs[30] - 0.01).abs() < 1e-15);
        assert!((lrs[60] - 0.001).abs() < 1e-15);
    }

    #[test]
    fn plateau_schedule() {
        let mut s = LrSchedule::new(Schedule::plateau(2), 0.1);
        let mut lrs = Vec::new();
        for (e, loss) in [1.0, 0.9, 0.9, 0.9, 0.9].into_iter().enumerate() {
            lrs.push(s.lr());
            s.end_epoch(e, loss);
        }
        assert_eq!(&lrs[..4], &[0.1; 4]);
        assert!((lrs[4] - 0.01).abs() < 1e-15);
    }

    #[test]
    fn csv_layout() {
        let mut h = History::tagged("scratch");
        h.epochs.push(EpochRecord {
            epoch: 0,
            train_loss: 2.0,
            train_accuracy: 0.25,
            val_loss: 1.5,
            val_accuracy: 0.5,
            lr: 0.1,
        });
        assert_eq!(
            h.to_csv(),
            "epoch,split,loss,accuracy,lr\n0,train,2.000000,0.250000,1e-1\n0,val,1.500000,0.500000,1e-1\n"
        );
    }

    #[test]
    fn schedule_strings() {
        assert_eq!("constant".parse::<Schedule>().unwrap(), Schedule::Constant);
        assert_eq!("step".parse::<Schedule>().unwrap(), Schedule::step_every_30());
        assert_eq!("step:10:0.5".parse::<Schedule>().unwrap(), Schedule::StepEvery { every: 10, factor: 0.5 });
        assert_eq!("plateau:3".parse::<Schedule>().unwrap(), Schedule::plateau(3));
        for bad in ["", "cosine", "step:x", "constant:1", "plateau:1:2:3"] {
            assert!(bad.parse::<Schedule>().is_err(), "{bad}");
        }
    }
}
