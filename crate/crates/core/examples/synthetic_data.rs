//! The synthetic motion dataset: class balance, a frame dump, and the
//! single-frame baseline on the speed-only task, which cannot beat chance
//! because a lone frame carries no speed information.
//!
//! `cargo run --release --example synthetic_data -- [out-dir]`

use t3d::arch::{teacher_2d, tiny_t3d, Model};
use t3d::data::{generate_dataset, SamplerConfig, Split, SyntheticVideoSpec, Task};
use t3d::training::{train, Schedule, TrainConfig};

fn main() -> t3d::Result<()> {
    let out = std::env::args().nth(1);
    let motion = generate_dataset(&SyntheticVideoSpec::default(), 200);
    for label in 0..motion.num_classes() {
        let n = |s| motion.split(s).filter(|v| v.label == label).count();
        println!("{:<12} train {:>2}  val {:>2}", motion.spec.task.class_name(label), n(Split::Train), n(Split::Val));
    }
    println!("channel means {:.4?}", motion.means);
    if let Some(dir) = out {
        motion.save(&dir)?;
        println!("saved to {dir}");
    }

    let speed = generate_dataset(&SyntheticVideoSpec { task: Task::Speed, ..Default::default() }, 200);
    let cfg = TrainConfig { batch_size: 16, max_epochs: 10, schedule: Schedule::Constant, lr0: 0.05, ..TrainConfig::default() };
    let frame = SamplerConfig { clip_len: 1, ..SamplerConfig::toy() };
    let single = teacher_2d().with_classes(2).with_name("single-frame");
    let a = train(Model::build(&single, 0)?, &speed, &frame, &cfg, "single-frame", None, &mut |_| {})?;
    let b = train(Model::build(&tiny_t3d().with_classes(2), 0)?, &speed, &SamplerConfig::toy(), &cfg, "clip", None, &mut |_| {})?;
    for (name, h) in [("single frame", &a.history), ("8-frame clip", &b.history)] {
        println!("{name:<13} best val accuracy on speed {:.3}", h.best_val_accuracy().unwrap_or(0.0));
    }
    Ok(())
}
