//! Video-level prediction: the mean of per-clip softmax distributions over
//! a video's non-overlapping test clips.

use crate::arch::Model;
use crate::data::{test_clips, ClipBatch, SamplerConfig, Video};
use crate::error::{Error, Result};
use crate::tensor::softmax;

#[derive(Debug, Clone, PartialEq)]
pub struct VideoPrediction {
    pub clip_probs: Vec<Vec<f64>>,
    /// Arithmetic mean of `clip_probs`.
    pub probs: Vec<f64>,
    pub class: usize,
}

impl VideoPrediction {
    pub fn from_clip_probs(clip_probs: Vec<Vec<f64>>) -> Result<Self> {
        let k = clip_probs.first().map_or(0, Vec::len);
        if k == 0 || clip_probs.iter().any(|p| p.len() != k) {
            return Err(Error::Contract {
                op: "video_prediction",
                msg: "clip distributions must be non-empty and of equal length".into(),
            });
        }
        let mut probs = vec![0.0; k];
        for p in &clip_probs {
            for (m, &v) in probs.iter_mut().zip(p) {
                *m += v;
            }
        }
        let n = clip_probs.len() as f64;
        probs.iter_mut().for_each(|m| *m /= n);
        let class = argmax(&probs);
        Ok(VideoPrediction {
            clip_probs,
            probs,
            class,
        })
    }

    pub fn num_clips(&self) -> usize {
        self.clip_probs.len()
    }

    /// `−ln p(label)`, floored at `1e-12` probability.
    pub fn nll(&self, label: usize) -> f64 {
        -self.probs[label].max(1e-12).ln()
    }
}

/// Index of the first maximum.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Eval-mode prediction over all test clips of `video`.
pub fn predict_video(model: &Model, video: &Video, cfg: &SamplerConfig, means: &[f32; 3]) -> Result<VideoPrediction> {
    let clips = test_clips(video, cfg, means)?;
    let batch = ClipBatch::from_clips(&clips)?;
    let logits = model.logits(&batch.clips)?;
    let k = logits.shape().c();
    let clip_probs = logits
        .data()
        .chunks(k)
        .map(|row| {
            let row: Vec<f64> = row.iter().map(|&v| v as f64).collect();
            softmax(&row)
        })
        .collect();
    VideoPrediction::from_clip_probs(clip_probs)
}

/// Video-level accuracy and mean negative log-likelihood.
pub fn evaluate<'a>(
    model: &Model,
    videos: impl IntoIterator<Item = &'a Video>,
    cfg: &SamplerConfig,
    means: &[f32; 3],
) -> Result<(f64, f64)> {
    let (mut correct, mut nll, mut n) = (0usize, 0.0, 0usize);
    for v in videos {
        let p = predict_video(model, v, cfg, means)?;
        correct += usize::from(p.class == v.label);
        nll += p.nll(v.label);
        n += 1;
    }
    if n == 0 {
        return Err(Error::Contract {
            op: "evaluate",
            msg: "no videos".into(),
        });
    }
    Ok((correct as f64 / n as f64, nll / n as f64))
}
