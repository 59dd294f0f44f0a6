//! Synthetic moving-shape videos, the clip sampler and transfer pairs.
//!
//! A video is a shape of fixed appearance translating over a black torus
//! at a constant integer velocity. Class labels encode the motion program,
//! never the appearance, and the two speeds (1 and 2 pixels per frame) give
//! identical single-frame statistics: frame `j` of a fast video is exactly
//! frame `2j` of the slow video with the same jitter.

mod pairs;
mod sampler;
mod store;

pub use pairs::{frames_as_batch, make_pairs, PairBatch, PairMeta};
pub use sampler::{sample_clip, test_clips, test_windows, Clip, ClipBatch, Crop, SamplerConfig};
pub use store::{Manifest, VideoStore};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::tensor::{Shape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Up,
    Down,
    Left,
    Right,
}

impl Direction {
    pub const ALL: [Direction; 4] = [Direction::Up, Direction::Down, Direction::Left, Direction::Right];

    /// Unit step `(dx, dy)` in image coordinates.
    pub fn step(self) -> (i64, i64) {
        match self {
            Direction::Up => (0, -1),
            Direction::Down => (0, 1),
            Direction::Left => (-1, 0),
            Direction::Right => (1, 0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Speed {
    Slow,
    Fast,
}

impl Speed {
    pub const ALL: [Speed; 2] = [Speed::Slow, Speed::Fast];

    pub fn pixels_per_frame(self) -> i64 {
        match self {
            Speed::Slow => 1,
            Speed::Fast => 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Square,
    Disc,
    Diamond,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 3] = [ShapeKind::Square, ShapeKind::Disc, ShapeKind::Diamond];
}

/// What the labels mean.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    /// 8 classes: 4 directions × 2 speeds.
    Motion,
    /// 2 classes (slow, fast); the direction is a jitter field.
    Speed,
}

impl Task {
    pub fn num_classes(self) -> usize {
        match self {
            Task::Motion => 8,
            Task::Speed => 2,
        }
    }

    pub fn class_name(self, label: usize) -> String {
        let p = MotionProgram::for_label(self, label, Direction::Up);
        match self {
            Task::Motion => format!("{:?}-{:?}", p.speed, p.direction).to_lowercase(),
            Task::Speed => format!("{:?}", p.speed).to_lowercase(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MotionProgram {
    pub direction: Direction,
    pub speed: Speed,
}

impl MotionProgram {
    /// Program of class `label`; `direction` is used only by
    /// [`Task::Speed`], where it is not part of the class.
    pub fn for_label(task: Task, label: usize, direction: Direction) -> Self {
        match task {
            Task::Motion => MotionProgram {
                direction: Direction::ALL[label / 2],
                speed: Speed::ALL[label % 2],
            },
            Task::Speed => MotionProgram {
                direction,
                speed: Speed::ALL[label],
            },
        }
    }
}

/// Per-video appearance and phase, independent of the class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Jitter {
    pub shape: ShapeKind,
    /// Index into [`PALETTE`].
    pub hue: usize,
    pub brightness: f32,
    /// Half extent in pixels.
    pub radius: i64,
    pub start: (i64, i64),
    /// Direction for [`Task::Speed`] videos.
    pub direction: Direction,
    pub noise_seed: u64,
}

pub const PALETTE: [[f32; 3]; 4] = [[1.0, 0.25, 0.2], [0.2, 1.0, 0.3], [0.25, 0.35, 1.0], [1.0, 0.9, 0.2]];

impl Jitter {
    pub fn draw(frame_size: usize, rng: &mut impl Rng) -> Self {
        let size = frame_size as i64;
        Jitter {
            shape: ShapeKind::ALL[rng.random_range(0..3)],
            hue: rng.random_range(0..PALETTE.len()),
            brightness: rng.random_range(0.6..1.0),
            radius: rng.random_range(3..=5),
            start: (rng.random_range(0..size), rng.random_range(0..size)),
            direction: Direction::ALL[rng.random_range(0..4)],
            noise_seed: rng.random(),
        }
    }

    /// Appearance class (shape × hue), used to pretrain the 2D teacher.
    pub fn appearance_class(&self) -> usize {
        let shape = ShapeKind::ALL.iter().position(|&s| s == self.shape).unwrap_or(0);
        shape * PALETTE.len() + self.hue
    }
}

pub const NUM_APPEARANCE_CLASSES: usize = 12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticVideoSpec {
    pub task: Task,
    /// Side of the square frames.
    pub frame_size: usize,
    pub num_frames: usize,
    pub noise_std: f64,
    pub seed: u64,
    /// Fraction of each class assigned to the train split.
    pub train_fraction: f64,
}

impl Default for SyntheticVideoSpec {
    fn default() -> Self {
        SyntheticVideoSpec {
            task: Task::Motion,
            frame_size: 40,
            num_frames: 32,
            noise_std: 0.05,
            seed: 0,
            train_fraction: 0.8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Video {
    pub id: usize,
    pub label: usize,
    pub split: Split,
    pub program: MotionProgram,
    pub jitter: Jitter,
    /// `(1, 3, T, H, W)`.
    pub frames: Tensor,
}

impl Video {
    pub fn num_frames(&self) -> usize {
        self.frames.shape().t()
    }
}

fn wrap(d: i64, size: i64) -> i64 {
    (d + size / 2).rem_euclid(size) - size / 2
}

/// Renders a `(1, 3, T, H, W)` video. Positions advance by whole pixels
/// on the torus so renders at different speeds coincide exactly.
pub fn render(spec: &SyntheticVideoSpec, program: MotionProgram, jitter: &Jitter) -> Tensor {
    let size = spec.frame_size as i64;
    let t = spec.num_frames;
    let shape = Shape::new(1, 3, t, spec.frame_size, spec.frame_size);
    let mut video = Tensor::zeros(shape);
    let color = PALETTE[jitter.hue].map(|c| c * jitter.brightness);
    let (dx, dy) = program.direction.step();
    let v = program.speed.pixels_per_frame();
    let r = jitter.radius;
    for f in 0..t {
        let cx = jitter.start.0 + dx * v * f as i64;
        let cy = jitter.start.1 + dy * v * f as i64;
        for y in 0..size {
            let oy = wrap(y - cy, size);
            for x in 0..size {
                let ox = wrap(x - cx, size);
                let inside = match jitter.shape {
                    ShapeKind::Square => ox.abs() <= r && oy.abs() <= r,
                    ShapeKind::Disc => ox * ox + oy * oy <= r * r,
                    ShapeKind::Diamond => ox.abs() + oy.abs() <= r,
                };
                if inside {
                    for (c, &value) in color.iter().enumerate() {
                        video[[0, c, f, y as usize, x as usize]] = value;
                    }
                }
            }
        }
    }
    if spec.noise_std > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(jitter.noise_seed);
        for v in video.data_mut() {
            let z: f64 = StandardNormal.sample(&mut rng);
            *v += (z * spec.noise_std) as f32;
        }
    }
    video
}

/// `count` videos with round-robin labels; within each class the first
/// `train_fraction` of videos form the train split. Deterministic per
/// `spec.seed`.
pub fn generate_dataset(spec: &SyntheticVideoSpec, count: usize) -> VideoStore {
    let k = spec.task.num_classes();
    let per_class: Vec<usize> = (0..k).map(|c| (count + k - 1 - c) / k).collect();
    let mut videos = Vec::with_capacity(count);
    for id in 0..count {
        let label = id % k;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(id as u64 + 1);
        let jitter = Jitter::draw(spec.frame_size, &mut rng);
        let program = MotionProgram::for_label(spec.task, label, jitter.direction);
        let rank = id / k;
        let n_train = (per_class[label] as f64 * spec.train_fraction).round() as usize;
        videos.push(Video {
            id,
            label,
            split: if rank < n_train { Split::Train } else { Split::Val },
            program,
            jitter,
            frames: render(spec, program, &jitter),
        });
    }
    VideoStore::new(spec.clone(), videos)
}
