//! Pretrains a 2D teacher on frame appearance, transfers it to a tiny 3D
//! student through frame/clip correspondence, then fine-tunes the student
//! on motion classes next to a model trained from scratch.
//!
//! `cargo run --release --example supervision_transfer -- [steps] [epochs]`

use std::time::Instant;

use t3d::arch::{teacher_2d, tiny_t3d, Model};
use t3d::data::{generate_dataset, SamplerConfig, SyntheticVideoSpec};
use t3d::training::{Schedule, TrainConfig};
use t3d::transfer::{finetune, pretrain_teacher, student_spec, transfer_train, TeacherConfig, TransferConfig};

fn main() -> t3d::Result<()> {
    let mut args = std::env::args().skip(1);
    let steps = args.next().and_then(|a| a.parse().ok()).unwrap_or(200);
    let epochs = args.next().and_then(|a| a.parse().ok()).unwrap_or(10);

    let store = generate_dataset(&SyntheticVideoSpec::default(), 200);
    let sampler = SamplerConfig::toy();
    let t0 = Instant::now();

    let (teacher, acc) = pretrain_teacher(&teacher_2d(), &store, &sampler, &TeacherConfig::default(), &mut |e, loss, acc| {
        println!("teacher epoch {e}  loss {loss:.3}  val frame acc {acc:.3}  {:.0?}", t0.elapsed());
    })?;
    println!("teacher appearance accuracy {acc:.3}");

    let student = Model::build(&student_spec(&tiny_t3d()), 1)?;
    let cfg = TransferConfig { steps, ..TransferConfig::default() };
    let out = transfer_train(&teacher, student, &store, &sampler, &cfg, &mut |r| {
        if let (Some(a), Some(h)) = (r.train_accuracy, r.heldout_accuracy) {
            println!("step {:>4}  loss {:.3}  pair acc {a:.3}  held-out {h:.3}  {:.0?}", r.step, r.loss, t0.elapsed());
        }
    })?;
    println!("pair accuracy {:.3}  held-out {:.3}", out.pair_accuracy, out.heldout_accuracy);

    let train_cfg = TrainConfig {
        batch_size: 16,
        max_epochs: epochs,
        schedule: Schedule::Constant,
        lr0: 0.01,
        ..TrainConfig::default()
    };
    let transferred = out.student.with_new_head(store.num_classes(), 7)?;
    let scratch = Model::build(&tiny_t3d(), 7)?;
    for (tag, model) in [("transfer", transferred), ("scratch", scratch)] {
        let r = finetune(model, &store, &sampler, &train_cfg, tag, None, &mut |_| {})?;
        let best = r.history.best_val_accuracy().unwrap_or(0.0);
        println!("{tag:>8}: best val accuracy {best:.3} after {} epochs", r.history.epochs.len());
    }
    Ok(())
}
