//! Trains `tiny-t3d` on the 8-class synthetic motion task.
//!
//! ```text
//! cargo run --release --example train_toy -- [epochs] [seed]
//! ```

use std::time::Instant;

use t3d::arch::{tiny_t3d, Model};
use t3d::data::{generate_dataset, SamplerConfig, SyntheticVideoSpec};
use t3d::training::{train, Schedule, StopRule, TrainConfig};

fn main() -> t3d::Result<()> {
    let mut args = std::env::args().skip(1);
    let epochs = args.next().and_then(|a| a.parse().ok()).unwrap_or(50);
    let seed = args.next().and_then(|a| a.parse().ok()).unwrap_or(0);

    let store = generate_dataset(&SyntheticVideoSpec { seed, ..Default::default() }, 200);
    let sampler = SamplerConfig::toy();
    let cfg = TrainConfig {
        batch_size: 16,
        max_epochs: epochs,
        schedule: Schedule::plateau(5),
        seed,
        stop: Some(StopRule {
            train_accuracy: 0.9,
            val_accuracy: 0.8,
        }),
        ..TrainConfig::default()
    };
    let model = Model::build(&tiny_t3d(), seed)?;
    let t0 = Instant::now();
    let out = train(model, &store, &sampler, &cfg, "scratch", None, &mut |e| {
        println!(
            "epoch {:>2}  loss {:.3}  train {:.3}  val {:.3} (loss {:.3})  lr {:.0e}  {:.0?}",
            e.epoch,
            e.train_loss,
            e.train_accuracy,
            e.val_accuracy,
            e.val_loss,
            e.lr,
            t0.elapsed()
        );
    })?;
    let last = out.history.last().expect("at least one epoch");
    println!("final train {:.3} val {:.3}", last.train_accuracy, last.val_accuracy);
    Ok(())
}
