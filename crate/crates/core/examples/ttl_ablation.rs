//! Multi-depth temporal transition layers against plain transitions on the
//! speed-only task, over several seeds.
//!
//! `cargo run --release --example ttl_ablation -- [seeds] [epochs]`

use t3d::arch::{tiny_densenet3d, tiny_t3d, Model};
use t3d::data::{generate_dataset, SamplerConfig, SyntheticVideoSpec, Task};
use t3d::training::{train, Schedule, TrainConfig};

fn main() -> t3d::Result<()> {
    let mut args = std::env::args().skip(1);
    let seeds: u64 = args.next().and_then(|a| a.parse().ok()).unwrap_or(3);
    let epochs = args.next().and_then(|a| a.parse().ok()).unwrap_or(15);

    let store = generate_dataset(&SyntheticVideoSpec { task: Task::Speed, ..Default::default() }, 120);
    let sampler = SamplerConfig::toy();
    for spec in [tiny_t3d(), tiny_densenet3d()] {
        let spec = spec.with_classes(2);
        let mut finals = Vec::new();
        for seed in 0..seeds {
            let cfg = TrainConfig {
                batch_size: 16,
                max_epochs: epochs,
                schedule: Schedule::plateau(3),
                seed,
                ..TrainConfig::default()
            };
            let out = train(Model::build(&spec, seed)?, &store, &sampler, &cfg, &spec.name, None, &mut |_| {})?;
            print!("{}", out.history.to_csv().lines().skip(1).map(|l| format!("{},{seed},{l}\n", spec.name)).collect::<String>());
            finals.push(out.history.last().map_or(0.0, |e| e.val_accuracy));
        }
        let mean = finals.iter().sum::<f64>() / finals.len() as f64;
        println!("# {}: final val accuracy {finals:.3?}, mean {mean:.3}", spec.name);
    }
    Ok(())
}
