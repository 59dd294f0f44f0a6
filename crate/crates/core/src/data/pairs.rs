use rand::seq::SliceRandom;
use rand::Rng;

use super::sampler::{sample_clip, SamplerConfig};
use super::Video;
use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct PairMeta {
    pub frame_video: usize,
    /// Source frames shown to the teacher.
    pub frame_indices: Vec<usize>,
    pub clip_video: usize,
    /// Source frames of the student clip.
    pub clip_indices: Vec<usize>,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairBatch {
    /// `(n·X, 3, 1, h, w)`: the X frames of pair `i` occupy rows
    /// `i·X .. (i+1)·X`.
    pub frames: Tensor,
    /// `(n, 3, clip_len, h, w)`.
    pub clips: Tensor,
    /// 1 for corresponding pairs, 0 otherwise.
    pub labels: Vec<usize>,
    pub meta: Vec<PairMeta>,
    pub x: usize,
}

impl PairBatch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Rearranges `(n, c, t, h, w)` into `t`-frame groups of single-frame
/// samples, `(n·t, c, 1, h, w)`.
pub fn frames_as_batch(x: &Tensor) -> Tensor {
    let [n, c, t, h, w] = x.shape().0;
    let plane = h * w;
    let mut data = Vec::with_capacity(x.len());
    for ni in 0..n {
        for ti in 0..t {
            for ci in 0..c {
                let o = x.shape().offset([ni, ci, ti, 0, 0]);
                data.extend_from_slice(&x.data()[o..o + plane]);
            }
        }
    }
    Tensor::from_vec(Shape::new(n * t, c, 1, h, w), data).expect("same element count")
}

/// Positions of `x` frames spread evenly over a `len`-frame clip.
fn subset(len: usize, x: usize) -> Vec<usize> {
    (0..x).map(|j| j * len / x).collect()
}

/// `n` pairs, half corresponding and half not, in random order.
///
/// A corresponding pair shows the teacher `x` frames of the very clip the
/// student sees (same video, same timestamps, same crop). A
/// non-corresponding pair takes the frames and the clip from two different
/// videos.
pub fn make_pairs(
    videos: &[&Video],
    cfg: &SamplerConfig,
    means: &[f32; 3],
    x: usize,
    n: usize,
    rng: &mut impl Rng,
) -> Result<PairBatch> {
    if videos.len() < 2 {
        return Err(Error::Contract {
            op: "make_pairs",
            msg: format!("need at least 2 videos, got {}", videos.len()),
        });
    }
    if x == 0 || x > cfg.clip_len || n == 0 {
        return Err(Error::Contract {
            op: "make_pairs",
            msg: format!("need 1 ≤ X ≤ clip_len ({}) and n ≥ 1, got X = {x}, n = {n}", cfg.clip_len),
        });
    }
    let positions = subset(cfg.clip_len, x);
    let mut labels: Vec<usize> = (0..n).map(|i| usize::from(i < n.div_ceil(2))).collect();
    labels.shuffle(rng);

    let mut frames = Vec::with_capacity(n);
    let mut clips = Vec::with_capacity(n);
    let mut meta = Vec::with_capacity(n);
    for &label in &labels {
        let clip_video = rng.random_range(0..videos.len());
        let clip = sample_clip(videos[clip_video], cfg, means, rng)?;
        let source = if label == 1 {
            clip.clone()
        } else {
            let mut other = rng.random_range(0..videos.len() - 1);
            if other >= clip_video {
                other += 1;
            }
            sample_clip(videos[other], cfg, means, rng)?
        };
        frames.push(frames_as_batch(&source.data.select_frames(&positions)?));
        meta.push(PairMeta {
            frame_video: source.video,
            frame_indices: positions.iter().map(|&p| source.frames[p]).collect(),
            clip_video: clip.video,
            clip_indices: clip.frames.clone(),
            label,
        });
        clips.push(clip.data);
    }
    Ok(PairBatch {
        frames: Tensor::stack_batch(&frames)?,
        clips: Tensor::stack_batch(&clips)?,
        labels,
        meta,
        x,
    })
}
