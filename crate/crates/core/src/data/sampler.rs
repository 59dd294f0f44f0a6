use rand::Rng;
use serde::{Deserialize, Serialize};

use super::Video;
use crate::error::Result;
use crate::tensor::{Shape, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub clip_len: usize,
    /// Temporal sampling stride.
    pub stride: usize,
    /// Frames whose short side is smaller are upscaled to this size.
    pub resize_short_side: usize,
    /// Side of the square crop.
    pub crop: usize,
    /// Random horizontal flips in train mode.
    pub flip: bool,
    pub mean_subtract: bool,
}

impl SamplerConfig {
    /// 32-frame clips at stride 2, 224 crops from 256-pixel frames.
    pub fn full_scale() -> Self {
        SamplerConfig {
            clip_len: 32,
            stride: 2,
            resize_short_side: 256,
            crop: 224,
            flip: true,
            mean_subtract: true,
        }
    }

    /// 8-frame clips at stride 2, 32 crops from the 40-pixel synthetic
    /// frames. Flips are off: they would swap left and right motion.
    pub fn toy() -> Self {
        SamplerConfig {
            clip_len: 8,
            stride: 2,
            resize_short_side: 40,
            crop: 32,
            flip: false,
            mean_subtract: true,
        }
    }

    /// Frames spanned by one clip, `clip_len · stride`.
    pub fn span(&self) -> usize {
        self.clip_len * self.stride
    }
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self::toy()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Crop {
    TopLeft,
    TopRight,
    BottomLeft,
    BottomRight,
    Center,
}

impl Crop {
    pub const ALL: [Crop; 5] = [Crop::TopLeft, Crop::TopRight, Crop::BottomLeft, Crop::BottomRight, Crop::Center];

    /// Top-left corner `(y, x)` of a `size` crop from an `h × w` frame.
    pub fn origin(self, h: usize, w: usize, size: usize) -> (usize, usize) {
        let (bottom, right) = (h - size, w - size);
        match self {
            Crop::TopLeft => (0, 0),
            Crop::TopRight => (0, right),
            Crop::BottomLeft => (bottom, 0),
            Crop::BottomRight => (bottom, right),
            Crop::Center => (bottom / 2, right / 2),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Clip {
    /// `(1, 3, clip_len, crop, crop)`.
    pub data: Tensor,
    pub label: usize,
    pub video: usize,
    pub start: usize,
    pub stride: usize,
    /// Source frame of every clip frame.
    pub frames: Vec<usize>,
    pub crop: Crop,
    pub flipped: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClipBatch {
    /// `(n, 3, t, h, w)`.
    pub clips: Tensor,
    pub labels: Vec<usize>,
    /// `(video id, start frame, stride)` of every clip.
    pub provenance: Vec<(usize, usize, usize)>,
}

impl ClipBatch {
    pub fn from_clips(clips: &[Clip]) -> Result<Self> {
        let data: Vec<Tensor> = clips.iter().map(|c| c.data.clone()).collect();
        Ok(ClipBatch {
            clips: Tensor::stack_batch(&data)?,
            labels: clips.iter().map(|c| c.label).collect(),
            provenance: clips.iter().map(|c| (c.video, c.start, c.stride)).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Frames `start, start + stride, …` (`clip_len` of them), wrapping around
/// videos that are too short.
pub fn clip_frames(num_frames: usize, start: usize, cfg: &SamplerConfig) -> Vec<usize> {
    (0..cfg.clip_len).map(|i| (start + i * cfg.stride) % num_frames).collect()
}

/// Starts of the non-overlapping test windows of `span()` frames. A video
/// shorter than one window gets a single, loop-padded window at 0; frames
/// after the last whole window are not used.
pub fn test_windows(num_frames: usize, cfg: &SamplerConfig) -> Vec<usize> {
    let span = cfg.span();
    let k = (num_frames / span).max(1);
    (0..k).map(|c| c * span).collect()
}

/// Bilinear resize of every `(h, w)` plane with half-pixel centers.
pub fn resize_bilinear(x: &Tensor, out_h: usize, out_w: usize) -> Tensor {
    let [n, c, t, h, w] = x.shape().0;
    if (h, w) == (out_h, out_w) {
        return x.clone();
    }
    let mut out = Tensor::zeros(Shape::new(n, c, t, out_h, out_w));
    let src = |o: usize, scale: f64, len: usize| {
        let p = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (len - 1) as f64);
        let i0 = p.floor() as usize;
        (i0, (i0 + 1).min(len - 1), (p - i0 as f64) as f32)
    };
    let (sy, sx) = (h as f64 / out_h as f64, w as f64 / out_w as f64);
    let planes = n * c * t;
    for p in 0..planes {
        let xp = &x.data()[p * h * w..(p + 1) * h * w];
        let op = &mut out.data_mut()[p * out_h * out_w..(p + 1) * out_h * out_w];
        for oy in 0..out_h {
            let (y0, y1, fy) = src(oy, sy, h);
            for ox in 0..out_w {
                let (x0, x1, fx) = src(ox, sx, w);
                let top = xp[y0 * w + x0] * (1.0 - fx) + xp[y0 * w + x1] * fx;
                let bottom = xp[y1 * w + x0] * (1.0 - fx) + xp[y1 * w + x1] * fx;
                op[oy * out_w + ox] = top * (1.0 - fy) + bottom * fy;
            }
        }
    }
    out
}

fn build_clip(
    video: &Video,
    cfg: &SamplerConfig,
    means: &[f32; 3],
    start: usize,
    crop: Crop,
    flipped: bool,
) -> Result<Clip> {
    let frames = clip_frames(video.num_frames(), start, cfg);
    let mut x = video.frames.select_frames(&frames)?;
    let (h, w) = (x.shape().h(), x.shape().w());
    let short = h.min(w);
    if short < cfg.resize_short_side {
        let scale = cfg.resize_short_side as f64 / short as f64;
        x = resize_bilinear(&x, (h as f64 * scale).round() as usize, (w as f64 * scale).round() as usize);
    }
    let (h, w) = (x.shape().h(), x.shape().w());
    let (y0, x0) = crop.origin(h, w, cfg.crop.min(h).min(w));
    x = x.crop([0, y0, x0], [cfg.clip_len, cfg.crop, cfg.crop])?;
    if flipped {
        x = x.flip_w();
    }
    if cfg.mean_subtract {
        let plane = x.shape().plane();
        for (c, chunk) in x.data_mut().chunks_mut(plane).enumerate() {
            let m = means[c % 3];
            chunk.iter_mut().for_each(|v| *v -= m);
        }
    }
    Ok(Clip {
        data: x,
        label: video.label,
        video: video.id,
        start,
        stride: cfg.stride,
        frames,
        crop,
        flipped,
    })
}

/// Train-mode clip: random start, one of the five crops, optional flip.
pub fn sample_clip(video: &Video, cfg: &SamplerConfig, means: &[f32; 3], rng: &mut impl Rng) -> Result<Clip> {
    let t = video.num_frames();
    let span = cfg.span();
    let start = if t > span { rng.random_range(0..=t - span) } else { 0 };
    let crop = Crop::ALL[rng.random_range(0..Crop::ALL.len())];
    let flipped = cfg.flip && rng.random_bool(0.5);
    build_clip(video, cfg, means, start, crop, flipped)
}

/// Test-mode decomposition: one center-cropped, unflipped clip per
/// [`test_windows`] entry.
pub fn test_clips(video: &Video, cfg: &SamplerConfig, means: &[f32; 3]) -> Result<Vec<Clip>> {
    test_windows(video.num_frames(), cfg)
        .into_iter()
        .map(|s| build_clip(video, cfg, means, s, Crop::Center, false))
        .collect()
}
