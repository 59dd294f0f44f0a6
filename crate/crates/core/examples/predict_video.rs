//! Video-level prediction: per-clip softmax over non-overlapping windows,
//! averaged. Trains briefly first so the distributions are not uniform.
//!
//! `cargo run --release --example predict_video -- [epochs]`

use t3d::arch::{tiny_t3d, Model};
use t3d::data::{generate_dataset, test_windows, SamplerConfig, Split, SyntheticVideoSpec};
use t3d::inference::predict_video;
use t3d::training::{train, Schedule, TrainConfig};

fn main() -> t3d::Result<()> {
    let epochs = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(8);
    let store = generate_dataset(&SyntheticVideoSpec { num_frames: 48, ..Default::default() }, 200);
    let sampler = SamplerConfig::toy();
    let cfg = TrainConfig { batch_size: 16, max_epochs: epochs, schedule: Schedule::Constant, ..TrainConfig::default() };
    let model = train(Model::build(&tiny_t3d(), 0)?, &store, &sampler, &cfg, "scratch", None, &mut |_| {})?.best;

    for video in store.split(Split::Val).take(6) {
        let p = predict_video(&model, video, &sampler, &store.means)?;
        println!(
            "video {:>3} ({}): windows at {:?}",
            video.id,
            store.spec.task.class_name(video.label),
            test_windows(video.num_frames(), &sampler)
        );
        for (i, clip) in p.clip_probs.iter().enumerate() {
            println!("  clip {i}: {:.2?}", clip);
        }
        println!("  mean:   {:.2?} → class {} (label {})", p.probs, p.class, video.label);
    }
    Ok(())
}
