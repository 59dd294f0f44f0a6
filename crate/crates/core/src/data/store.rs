use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Jitter, MotionProgram, Split, SyntheticVideoSpec, Video};
use crate::error::{Error, Result};
use crate::tensor::{read_tensor, write_tensor};

/// In-memory video collection with train-split channel means.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoStore {
    pub spec: SyntheticVideoSpec,
    pub videos: Vec<Video>,
    /// Per-channel mean over every train-split pixel.
    pub means: [f32; 3],
}

/// `manifest.json` of a store directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub spec: SyntheticVideoSpec,
    pub count: usize,
    pub num_classes: usize,
    pub class_names: Vec<String>,
    pub means: [f32; 3],
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct IndexEntry {
    id: usize,
    class: usize,
    frames: usize,
    split: Split,
    file: String,
    program: MotionProgram,
    jitter: Jitter,
}

impl VideoStore {
    pub fn new(spec: SyntheticVideoSpec, videos: Vec<Video>) -> Self {
        let mut sums = [0f64; 3];
        let mut count = 0usize;
        for v in videos.iter().filter(|v| v.split == Split::Train) {
            let plane = v.frames.shape().plane();
            for (c, sum) in sums.iter_mut().enumerate() {
                *sum += v.frames.data()[c * plane..(c + 1) * plane]
                    .iter()
                    .map(|&x| x as f64)
                    .sum::<f64>();
            }
            count += plane;
        }
        let means = sums.map(|s| if count > 0 { (s / count as f64) as f32 } else { 0.0 });
        VideoStore { spec, videos, means }
    }

    pub fn num_classes(&self) -> usize {
        self.spec.task.num_classes()
    }

    pub fn len(&self) -> usize {
        self.videos.len()
    }

    pub fn is_empty(&self) -> bool {
        self.videos.is_empty()
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &Video> {
        self.videos.iter().filter(move |v| v.split == split)
    }

    pub fn manifest(&self) -> Manifest {
        Manifest {
            spec: self.spec.clone(),
            count: self.videos.len(),
            num_classes: self.num_classes(),
            class_names: (0..self.num_classes()).map(|c| self.spec.task.class_name(c)).collect(),
            means: self.means,
        }
    }

    /// Writes `manifest.json`, `index.jsonl` and one tensor file per video
    /// under `videos/`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        let vdir = dir.join("videos");
        fs::create_dir_all(&vdir).map_err(|e| Error::io(&vdir, e))?;
        let index_path = dir.join("index.jsonl");
        let mut index = BufWriter::new(File::create(&index_path).map_err(|e| Error::io(&index_path, e))?);
        for v in &self.videos {
            let file = format!("videos/{:05}.t5", v.id);
            write_tensor(dir.join(&file), &v.frames)?;
            let entry = IndexEntry {
                id: v.id,
                class: v.label,
                frames: v.num_frames(),
                split: v.split,
                file,
                program: v.program,
                jitter: v.jitter,
            };
            let line = serde_json::to_string(&entry).map_err(|e| Error::Format(e.to_string()))?;
            writeln!(index, "{line}").map_err(|e| Error::io(&index_path, e))?;
        }
        index.flush().map_err(|e| Error::io(&index_path, e))?;
        let manifest_path = dir.join("manifest.json");
        let text = serde_json::to_string_pretty(&self.manifest()).map_err(|e| Error::Format(e.to_string()))?;
        fs::write(&manifest_path, text + "\n").map_err(|e| Error::io(&manifest_path, e))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let manifest_path = dir.join("manifest.json");
        let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
        let manifest: Manifest = serde_json::from_str(&text)
            .map_err(|e| Error::Format(format!("{}: {e}", manifest_path.display())))?;

        let index_path = dir.join("index.jsonl");
        let f = File::open(&index_path).map_err(|e| Error::io(&index_path, e))?;
        let mut videos = Vec::with_capacity(manifest.count);
        for (no, line) in BufReader::new(f).lines().enumerate() {
            let line = line.map_err(|e| Error::io(&index_path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let e: IndexEntry = serde_json::from_str(&line)
                .map_err(|err| Error::Format(format!("{} line {}: {err}", index_path.display(), no + 1)))?;
            let frames = read_tensor(dir.join(&e.file))?;
            if frames.shape().t() != e.frames || frames.shape().n() != 1 || frames.shape().c() != 3 {
                return Err(Error::Format(format!("{}: shape {} disagrees with index", e.file, frames.shape())));
            }
            if e.class >= manifest.num_classes {
                return Err(Error::Format(format!("video {}: class {} out of range", e.id, e.class)));
            }
            videos.push(Video {
                id: e.id,
                label: e.class,
                split: e.split,
                program: e.program,
                jitter: e.jitter,
                frames,
            });
        }
        if videos.len() != manifest.count {
            return Err(Error::Format(format!(
                "index lists {} videos, manifest {}",
                videos.len(),
                manifest.count
            )));
        }
        let store = VideoStore {
            spec: manifest.spec,
            videos,
            means: manifest.means,
        };
        Ok(store)
    }
}

#[cfg(test)]
mod tests {
    use super::super::generate_dataset;
    use super::*;

    #[test]
    fn disk_round_trip() {
        let store = generate_dataset(&SyntheticVideoSpec::default(), 12);
        let dir = tempfile::tempdir().unwrap();
        store.save(dir.path()).unwrap();
        let back = VideoStore::load(dir.path()).unwrap();
        assert_eq!(back, store);
        let index = fs::read_to_string(dir.path().join("index.jsonl")).unwrap();
        assert_eq!(index.lines().count(), 12);
        assert!(index.lines().next().unwrap().contains("\"class\":0"));
    }

    #[test]
    fn means_come_from_train_split() {
        let store = generate_dataset(&SyntheticVideoSpec::default(), 16);
        assert!(store.means.iter().all(|&m| m > 0.0 && m < 0.5), "{:?}", store.means);
    }
}
