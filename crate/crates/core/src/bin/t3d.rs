use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use t3d::arch::{audit, load_checkpoint, save_checkpoint, Model};
use t3d::config::{resolve_arch, RunConfig};
use t3d::data::{generate_dataset, Split, VideoStore};
use t3d::gradcheck::{check_all, check_layer, GradcheckReport, LAYERS};
use t3d::inference::evaluate;
use t3d::training::Schedule;
use t3d::transfer::{finetune, pretrain_teacher, student_spec, transfer_train, EMBED_DIM};
use t3d::{Error, Result};

#[derive(Parser)]
#[command(name = "t3d", version, about = "Temporal 3D ConvNets on synthetic video")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; every section is optional.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the seed of the stage being run.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct DataArg {
    /// Dataset directory written by `gen-data`; generated from the config when absent.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic video dataset to a directory.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a network from scratch.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
        #[arg(long)]
        out: PathBuf,
        /// Preset name or spec file, overriding the config.
        #[arg(long)]
        arch: Option<String>,
        /// `constant`, `step[:every[:factor]]` or `plateau[:patience[:factor]]`.
        #[arg(long)]
        schedule: Option<Schedule>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Pretrain the 2D teacher on single-frame appearance classes.
    PretrainTeacher {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Train a 3D student from a frozen teacher on frame/clip correspondence.
    Transfer {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
        #[arg(long)]
        teacher_checkpoint: PathBuf,
        /// Size of the fixed training pair set.
        #[arg(long)]
        pairs: Option<usize>,
        #[arg(long)]
        out_student: PathBuf,
        /// Directory for the pair-accuracy curve; defaults to the student's directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fine-tune a transferred student with a fresh classification head.
    Finetune {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
        #[arg(long)]
        student: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        schedule: Option<Schedule>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Also train the same architecture from scratch into `<out>/scratch`.
        #[arg(long)]
        scratch: bool,
    },
    /// Video-level accuracy of a checkpoint.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
        #[arg(long)]
        checkpoint: PathBuf,
        /// `train`, `val` or `all`.
        #[arg(long, default_value = "val")]
        split: String,
    },
    /// Per-layer output shapes, parameters and multiply-accumulates.
    Audit {
        /// Preset name or spec file.
        #[arg(long)]
        arch: String,
        /// `CxTxHxW`, overriding the spec's input.
        #[arg(long)]
        input: Option<String>,
        /// Also print the parameter ratio against this architecture.
        #[arg(long)]
        compare: Option<String>,
    },
    /// Finite-difference gradient checks.
    Gradcheck {
        /// Check every registered layer.
        #[arg(long)]
        all: bool,
        #[arg(long)]
        layer: Vec<String>,
        #[arg(long, default_value_t = 5)]
        seeds: usize,
        /// Elements checked per parameter and input tensor.
        #[arg(long, default_value_t = 16)]
        elements: usize,
    },
}

fn config(common: &Common) -> Result<RunConfig> {
    common.config.as_ref().map_or_else(|| Ok(RunConfig::default()), RunConfig::load)
}

fn dataset(cfg: &RunConfig, data: &DataArg) -> Result<VideoStore> {
    match &data.data {
        Some(dir) => VideoStore::load(dir),
        None => Ok(generate_dataset(&cfg.data.spec(), cfg.data.videos)),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.into(),
        source: e,
    })
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::Io {
        path: path.into(),
        source: e,
    })
}

fn parse_input(s: &str) -> Result<[usize; 4]> {
    let dims: Vec<usize> = s
        .split(['x', '×'])
        .map(|d| d.trim().parse().map_err(|_| Error::Config(format!("bad input `{s}`, expected CxTxHxW"))))
        .collect::<Result<_>>()?;
    dims.try_into().map_err(|_| Error::Config(format!("bad input `{s}`, expected CxTxHxW")))
}

fn print_epoch(e: &t3d::training::EpochRecord) {
    println!(
        "epoch {:>3}  train loss {:.4} acc {:.4}  val loss {:.4} acc {:.4}  lr {:e}",
        e.epoch, e.train_loss, e.train_accuracy, e.val_loss, e.val_accuracy, e.lr
    );
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { common, out } => {
            let mut cfg = config(&common)?;
            if let Some(seed) = common.seed {
                cfg.data.seed = seed;
            }
            let store = generate_dataset(&cfg.data.spec(), cfg.data.videos);
            store.save(&out)?;
            println!("{} videos, {} classes → {}", store.len(), store.num_classes(), out.display());
        }
        Command::Train {
            common,
            data,
            out,
            arch,
            schedule,
            epochs,
        } => {
            let mut cfg = config(&common)?;
            if let Some(seed) = common.seed {
                cfg.train.seed = seed;
            }
            if let Some(a) = arch {
                cfg.arch = a;
            }
            if let Some(s) = schedule {
                cfg.train.schedule = s;
            }
            if let Some(e) = epochs {
                cfg.train.max_epochs = e;
            }
            let store = dataset(&cfg, &data)?;
            let spec = resolve_arch(&cfg.arch)?.with_classes(store.num_classes());
            create_dir(&out)?;
            write(&out.join("config.toml"), &cfg.to_toml())?;
            let model = Model::build(&spec, cfg.train.seed)?;
            let r = t3d::training::train(model, &store, &cfg.sampler, &cfg.train, "scratch", Some(&out), &mut print_epoch)?;
            save_checkpoint(&r.model, out.join("final.ckpt"))?;
        }
        Command::PretrainTeacher {
            common,
            data,
            out,
            epochs,
        } => {
            let mut cfg = config(&common)?;
            if let Some(seed) = common.seed {
                cfg.teacher.seed = seed;
            }
            if let Some(e) = epochs {
                cfg.teacher.epochs = e;
            }
            let store = dataset(&cfg, &data)?;
            let spec = resolve_arch(&cfg.teacher_arch)?.with_classes(EMBED_DIM);
            create_dir(&out)?;
            let mut csv = String::from("epoch,train_loss,val_accuracy\n");
            let (teacher, acc) = pretrain_teacher(&spec, &store, &cfg.sampler, &cfg.teacher, &mut |e, loss, acc| {
                println!("teacher epoch {e:>3}  loss {loss:.4}  val frame acc {acc:.4}");
                let _ = writeln!(csv, "{e},{loss:.6},{acc:.6}");
            })?;
            write(&out.join("teacher_metrics.csv"), &csv)?;
            save_checkpoint(&teacher, out.join("teacher.ckpt"))?;
            println!("teacher frame accuracy {acc:.4}");
        }
        Command::Transfer {
            common,
            data,
            teacher_checkpoint,
            pairs,
            out_student,
            out,
        } => {
            let mut cfg = config(&common)?;
            if let Some(seed) = common.seed {
                cfg.transfer.seed = seed;
            }
            if let Some(p) = pairs {
                cfg.transfer.train_pairs = p;
            }
            let store = dataset(&cfg, &data)?;
            let teacher = load_checkpoint(&teacher_checkpoint)?;
            let before = teacher.params.checksum();
            let student = Model::build(&student_spec(&resolve_arch(&cfg.arch)?), cfg.transfer.seed)?;
            let r = transfer_train(&teacher, student, &store, &cfg.sampler, &cfg.transfer, &mut |r| {
                if let (Some(a), Some(h)) = (r.train_accuracy, r.heldout_accuracy) {
                    println!("step {:>5}  loss {:.4}  pair acc {a:.4}  held-out {h:.4}", r.step, r.loss);
                }
            })?;
            if teacher.params.checksum() != before {
                return Err(Error::Invariant("teacher parameters changed during transfer".into()));
            }
            let dir = out.unwrap_or_else(|| out_student.parent().map(Path::to_path_buf).unwrap_or_default());
            if !dir.as_os_str().is_empty() {
                create_dir(&dir)?;
            }
            write(&dir.join("pair_curve.csv"), &r.curve_csv())?;
            save_checkpoint(&r.student, &out_student)?;
            println!("pair accuracy {:.4}  held-out {:.4}", r.pair_accuracy, r.heldout_accuracy);
        }
        Command::Finetune {
            common,
            data,
            student,
            out,
            schedule,
            epochs,
            scratch,
        } => {
            let mut cfg = config(&common)?;
            if let Some(seed) = common.seed {
                cfg.train.seed = seed;
            }
            if let Some(s) = schedule {
                cfg.train.schedule = s;
            }
            if let Some(e) = epochs {
                cfg.train.max_epochs = e;
            }
            let store = dataset(&cfg, &data)?;
            let mut model = load_checkpoint(&student)?;
            if model.num_classes() != store.num_classes() {
                model = model.with_new_head(store.num_classes(), cfg.train.seed)?;
            }
            let spec = model.spec.clone();
            create_dir(&out)?;
            write(&out.join("config.toml"), &cfg.to_toml())?;
            let r = finetune(model, &store, &cfg.sampler, &cfg.train, "transfer", Some(&out), &mut print_epoch)?;
            save_checkpoint(&r.model, out.join("final.ckpt"))?;
            let mut summary = format!("transfer best val {:.4}", r.history.best_val_accuracy().unwrap_or(0.0));
            if scratch {
                let dir = out.join("scratch");
                create_dir(&dir)?;
                let model = Model::build(&spec, cfg.train.seed)?;
                let s = finetune(model, &store, &cfg.sampler, &cfg.train, "scratch", Some(&dir), &mut print_epoch)?;
                save_checkpoint(&s.model, dir.join("final.ckpt"))?;
                let _ = write!(summary, "  scratch best val {:.4}", s.history.best_val_accuracy().unwrap_or(0.0));
            }
            println!("{summary}");
        }
        Command::Eval {
            common,
            data,
            checkpoint,
            split,
        } => {
            let cfg = config(&common)?;
            let store = dataset(&cfg, &data)?;
            let model = load_checkpoint(&checkpoint)?;
            let videos: Vec<_> = match split.as_str() {
                "train" => store.split(Split::Train).collect(),
                "val" => store.split(Split::Val).collect(),
                "all" => store.videos.iter().collect(),
                other => return Err(Error::Config(format!("unknown split `{other}`"))),
            };
            let (acc, nll) = evaluate(&model, videos.iter().copied(), &cfg.sampler, &store.means)?;
            println!(
                "{}",
                serde_json::json!({ "split": split, "videos": videos.len(), "accuracy": acc, "nll": nll })
            );
        }
        Command::Audit { arch, input, compare } => {
            let mut spec = resolve_arch(&arch)?;
            if let Some(i) = input {
                spec = spec.with_input(parse_input(&i)?);
            }
            let report = audit(&spec)?;
            println!("{report}");
            if let Some(other) = compare {
                let mut base = resolve_arch(&other)?;
                base.input = spec.input;
                let base = audit(&base)?;
                println!(
                    "parameter ratio {} / {} = {:.4}",
                    spec.name,
                    base.name,
                    t3d::arch::param_ratio(&report, &base)
                );
            }
        }
        Command::Gradcheck {
            all,
            layer,
            seeds,
            elements,
        } => {
            let report = if all {
                check_all(seeds, elements)?
            } else if layer.is_empty() {
                return Err(Error::Config(format!("pass --all or --layer (one of {})", LAYERS.join(", "))));
            } else {
                GradcheckReport {
                    rows: layer.iter().map(|l| check_layer(l, seeds, elements)).collect::<Result<_>>()?,
                }
            };
            print!("{report}");
            if !report.passed() {
                return Err(Error::Invariant("gradient check above tolerance".into()));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", serde_json::json!({ "error": e.kind(), "message": e.to_string() }));
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
