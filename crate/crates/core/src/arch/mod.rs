//! Declarative stage-wise architecture specs, the presets built from them,
//! shape/parameter auditing and checkpoints.
//!
//! Kernel, stride and padding triples are written `TxHxW` throughout, in
//! the `(t, h, w)` order of the tensor layout. Printed feature-map sizes
//! in audit tables follow the `h×w×t` convention instead.

mod audit;
mod checkpoint;
mod model;

use std::fmt;

pub use audit::{audit, hwt, param_ratio, AuditReport, AuditRow};
pub use checkpoint::{load_checkpoint, load_checkpoint_as, read_checkpoint, save_checkpoint, write_checkpoint};
pub use model::{Model, Network, StageNet, StageTransition};

use crate::blocks::{compressed_width, ttl_widths};
use crate::error::{Error, Result};
use crate::tensor::{Dims3, PoolMode, PoolSpec};

#[derive(Debug, Clone, PartialEq)]
pub struct StemSpec {
    pub channels: usize,
    pub kernel: Dims3,
    pub stride: Dims3,
    pub pad: Dims3,
}

#[derive(Debug, Clone, PartialEq)]
pub enum TransitionKind {
    /// Feeds the next stage (or the classifier) directly.
    None,
    /// BN-ReLU-Conv(1×1×1) with compression, then the transition pool.
    Standard,
    /// Temporal Transition Layer with one branch per temporal depth.
    /// Without explicit `widths`, branch widths follow [`ttl_widths`].
    Ttl {
        depths: Vec<usize>,
        widths: Option<Vec<usize>>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageSpec {
    pub layers: usize,
    pub transition: TransitionKind,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArchSpec {
    pub name: String,
    /// `(c, t, h, w)` of one input clip.
    pub input: [usize; 4],
    pub num_classes: usize,
    pub growth: usize,
    /// Bottleneck width as a multiple of `growth`.
    pub bottleneck: usize,
    /// Channel compression θ of standard transitions and TTLs.
    pub theta: f64,
    pub stem: StemSpec,
    pub stem_pool: Option<PoolSpec>,
    /// Main kernel of every dense layer; its spatial extent is also the
    /// spatial extent of every TTL branch deeper than 1.
    pub dense_kernel: Dims3,
    pub transition_pool: PoolSpec,
    pub stages: Vec<StageSpec>,
}

impl ArchSpec {
    pub fn preset(name: &str) -> Result<ArchSpec> {
        Ok(match name {
            "t3d-121" => t3d_121(),
            "t3d-169" => t3d_169(),
            "densenet3d-121" => densenet3d_121(),
            "densenet3d-169" => densenet3d_169(),
            "tiny-t3d" => tiny_t3d(),
            "tiny-densenet3d" => tiny_densenet3d(),
            "teacher-2d" => teacher_2d(),
            _ => {
                return Err(Error::Spec(format!(
                    "unknown architecture `{name}` (known: {})",
                    PRESETS.join(", ")
                )))
            }
        })
    }

    pub fn with_classes(mut self, num_classes: usize) -> Self {
        self.num_classes = num_classes;
        self
    }

    pub fn with_input(mut self, input: [usize; 4]) -> Self {
        self.input = input;
        self
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    pub fn spatial_kernel(&self) -> usize {
        self.dense_kernel[1]
    }

    /// Branch widths of the TTL closing stage `i`, if it has one.
    pub fn ttl_branch_widths(&self, i: usize, in_channels: usize) -> Option<Vec<usize>> {
        match &self.stages[i].transition {
            TransitionKind::Ttl { depths, widths } => Some(
                widths
                    .clone()
                    .unwrap_or_else(|| ttl_widths(in_channels, self.theta, depths.len())),
            ),
            _ => None,
        }
    }

    /// Checks everything that can be checked without an input shape and
    /// returns the channel count entering the classifier.
    pub fn validate(&self) -> Result<usize> {
        let spec_err = |msg: String| Err(Error::Spec(format!("{}: {msg}", self.name)));
        if self.input.contains(&0) {
            return spec_err(format!("input {:?} has an empty axis", self.input));
        }
        if self.num_classes == 0 || self.growth == 0 || self.bottleneck == 0 || self.stem.channels == 0 {
            return spec_err("classes, growth, bottleneck and stem width must be positive".into());
        }
        if !(self.theta > 0.0 && self.theta <= 1.0) {
            return spec_err(format!("compression {} outside (0, 1]", self.theta));
        }
        let triples = [self.stem.kernel, self.stem.stride, self.dense_kernel];
        if triples.iter().any(|k| k.contains(&0)) {
            return spec_err("kernel and stride extents must be positive".into());
        }
        if self.dense_kernel.iter().any(|k| k % 2 == 0) {
            return spec_err(format!("dense kernel {:?} must have odd extents", self.dense_kernel));
        }
        if self.transition_pool.mode != PoolMode::Avg {
            return spec_err("transition pool must be average pooling".into());
        }
        let Some(last) = self.stages.last() else {
            return spec_err("at least one stage is required".into());
        };
        if last.transition != TransitionKind::None {
            return spec_err(format!("stage {} (the last) must not have a transition", self.stages.len()));
        }

        let mut c = self.stem.channels;
        for (i, stage) in self.stages.iter().enumerate() {
            let stage_no = i + 1;
            c += stage.layers * self.growth;
            c = match &stage.transition {
                TransitionKind::None => c,
                TransitionKind::Standard => {
                    let out = compressed_width(c, self.theta);
                    if out == 0 {
                        return spec_err(format!("stage {stage_no}: transition compresses {c} channels to 0"));
                    }
                    out
                }
                TransitionKind::Ttl { depths, widths } => {
                    if depths.is_empty() || depths.contains(&0) {
                        return spec_err(format!("stage {stage_no}: TTL depths {depths:?} must be positive"));
                    }
                    let w = self.ttl_branch_widths(i, c).unwrap_or_default();
                    if let Some(given) = widths {
                        if given.len() != depths.len() {
                            return spec_err(format!(
                                "stage {stage_no}: {} widths for {} TTL branches",
                                given.len(),
                                depths.len()
                            ));
                        }
                    }
                    if w.contains(&0) {
                        return spec_err(format!("stage {stage_no}: TTL branch widths {w:?} include an empty branch"));
                    }
                    w.iter().sum()
                }
            };
        }
        Ok(c)
    }

    /// Parses the line-oriented text format written by `Display`.
    pub fn parse(text: &str) -> Result<ArchSpec> {
        parse::parse(text)
    }
}

pub const PRESETS: [&str; 7] = [
    "t3d-121",
    "t3d-169",
    "densenet3d-121",
    "densenet3d-169",
    "tiny-t3d",
    "tiny-densenet3d",
    "teacher-2d",
];

fn ttl(layers: usize, depths: &[usize]) -> StageSpec {
    StageSpec {
        layers,
        transition: TransitionKind::Ttl {
            depths: depths.to_vec(),
            widths: None,
        },
    }
}

fn standard(layers: usize) -> StageSpec {
    StageSpec {
        layers,
        transition: TransitionKind::Standard,
    }
}

fn last(layers: usize) -> StageSpec {
    StageSpec {
        layers,
        transition: TransitionKind::None,
    }
}

fn full_scale(name: &str, stages: Vec<StageSpec>) -> ArchSpec {
    ArchSpec {
        name: name.into(),
        input: [3, 16, 224, 224],
        num_classes: 400,
        growth: 32,
        bottleneck: 4,
        theta: 0.5,
        stem: StemSpec {
            channels: 64,
            kernel: [3, 7, 7],
            stride: [1, 2, 2],
            pad: [1, 3, 3],
        },
        stem_pool: Some(PoolSpec::new(PoolMode::Max, [3, 3, 3], [1, 2, 2]).with_pad([1, 1, 1])),
        dense_kernel: [3, 3, 3],
        transition_pool: PoolSpec::new(PoolMode::Avg, [2, 2, 2], [2, 2, 2]),
        stages,
    }
}

pub fn t3d_121() -> ArchSpec {
    full_scale(
        "t3d-121",
        vec![ttl(6, &[1, 3, 6]), ttl(12, &[1, 3, 4]), ttl(24, &[1, 3, 4]), last(16)],
    )
}

pub fn t3d_169() -> ArchSpec {
    full_scale(
        "t3d-169",
        vec![ttl(6, &[1, 3, 6]), ttl(12, &[1, 3, 4]), ttl(32, &[1, 3, 4]), last(32)],
    )
}

pub fn densenet3d_121() -> ArchSpec {
    full_scale("densenet3d-121", vec![standard(6), standard(12), standard(24), last(16)])
}

pub fn densenet3d_169() -> ArchSpec {
    full_scale("densenet3d-169", vec![standard(6), standard(12), standard(32), last(32)])
}

fn tiny(name: &str, stages: Vec<StageSpec>) -> ArchSpec {
    ArchSpec {
        name: name.into(),
        input: [3, 8, 32, 32],
        num_classes: 8,
        growth: 8,
        stem: StemSpec {
            channels: 16,
            ..full_scale("", vec![]).stem
        },
        ..full_scale(name, stages)
    }
}

/// Stages 2-2-2-2, growth 8, TTL depths {1,2,4}; input `3×8×32×32`.
pub fn tiny_t3d() -> ArchSpec {
    tiny("tiny-t3d", vec![ttl(2, &[1, 2, 4]), ttl(2, &[1, 2, 4]), ttl(2, &[1, 2, 4]), last(2)])
}

/// [`tiny_t3d`] with standard depth-1 transitions.
pub fn tiny_densenet3d() -> ArchSpec {
    tiny("tiny-densenet3d", vec![standard(2), standard(2), standard(2), last(2)])
}

/// A 2D dense network expressed with unit temporal kernels: single frames
/// in, a 1024-wide embedding out.
pub fn teacher_2d() -> ArchSpec {
    ArchSpec {
        name: "teacher-2d".into(),
        input: [3, 1, 32, 32],
        num_classes: 1024,
        growth: 8,
        bottleneck: 4,
        theta: 0.5,
        stem: StemSpec {
            channels: 16,
            kernel: [1, 7, 7],
            stride: [1, 2, 2],
            pad: [0, 3, 3],
        },
        stem_pool: Some(PoolSpec::new(PoolMode::Max, [1, 3, 3], [1, 2, 2]).with_pad([0, 1, 1])),
        dense_kernel: [1, 3, 3],
        transition_pool: PoolSpec::new(PoolMode::Avg, [1, 2, 2], [1, 2, 2]),
        stages: vec![standard(2), standard(2), standard(2), last(2)],
    }
}

fn dims(d: Dims3) -> String {
    format!("{}x{}x{}", d[0], d[1], d[2])
}

fn pool_text(p: &PoolSpec) -> String {
    let mode = match p.mode {
        PoolMode::Max => "max",
        PoolMode::Avg => "avg",
    };
    format!(
        "{mode} kernel {} stride {} pad {}",
        dims(p.kernel),
        dims(p.stride),
        dims(p.pad.map(|(front, _)| front))
    )
}

fn list(v: &[usize]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl fmt::Display for ArchSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let [c, t, h, w] = self.input;
        writeln!(f, "name {}", self.name)?;
        writeln!(f, "input {c}x{t}x{h}x{w}")?;
        writeln!(f, "classes {}", self.num_classes)?;
        writeln!(f, "growth {}", self.growth)?;
        writeln!(f, "bottleneck {}", self.bottleneck)?;
        writeln!(f, "compression {}", self.theta)?;
        let s = &self.stem;
        writeln!(
            f,
            "stem {} kernel {} stride {} pad {}",
            s.channels,
            dims(s.kernel),
            dims(s.stride),
            dims(s.pad)
        )?;
        match &self.stem_pool {
            Some(p) => writeln!(f, "stem-pool {}", pool_text(p))?,
            None => writeln!(f, "stem-pool none")?,
        }
        writeln!(f, "dense-kernel {}", dims(self.dense_kernel))?;
        writeln!(f, "transition-pool {}", pool_text(&self.transition_pool))?;
        for stage in &self.stages {
            match &stage.transition {
                TransitionKind::None => writeln!(f, "stage {} none", stage.layers)?,
                TransitionKind::Standard => writeln!(f, "stage {} transition", stage.layers)?,
                TransitionKind::Ttl { depths, widths } => {
                    write!(f, "stage {} ttl {}", stage.layers, list(depths))?;
                    if let Some(w) = widths {
                        write!(f, " widths {}", list(w))?;
                    }
                    writeln!(f)?;
                }
            }
        }
        Ok(())
    }
}

mod parse {
    use super::*;

    struct Line<'a> {
        no: usize,
        words: Vec<&'a str>,
    }

    impl<'a> Line<'a> {
        fn err<T>(&self, msg: impl fmt::Display) -> Result<T> {
            Err(Error::Spec(format!("line {}: {msg}", self.no)))
        }

        fn arity(&self, n: usize) -> Result<()> {
            if self.words.len() == n {
                Ok(())
            } else {
                self.err(format!("`{}` expects {} fields, found {}", self.words[0], n - 1, self.words.len() - 1))
            }
        }

        fn num(&self, i: usize) -> Result<usize> {
            let w = self.words[i];
            w.parse().or_else(|_| self.err(format!("`{w}` is not a non-negative integer")))
        }

        fn keyword(&self, i: usize, expected: &str) -> Result<()> {
            match self.words.get(i) {
                Some(&w) if w == expected => Ok(()),
                Some(w) => self.err(format!("expected `{expected}`, found `{w}`")),
                None => self.err(format!("expected `{expected}`")),
            }
        }

        fn dims<const N: usize>(&self, i: usize) -> Result<[usize; N]> {
            let w = self.words[i];
            let parts: Vec<_> = w.split('x').collect();
            if parts.len() != N {
                return self.err(format!("`{w}` should have {N} `x`-separated extents"));
            }
            let mut out = [0; N];
            for (o, p) in out.iter_mut().zip(parts) {
                *o = p.parse().or_else(|_| self.err(format!("`{w}` has a non-integer extent")))?;
            }
            Ok(out)
        }

        fn list(&self, i: usize) -> Result<Vec<usize>> {
            let w = self.words[i];
            w.split(',')
                .map(|p| p.parse().or_else(|_| self.err(format!("`{w}` is not a comma-separated list"))))
                .collect()
        }

        /// `max|avg kernel K stride S pad P` starting at word `i`.
        fn pool(&self, i: usize) -> Result<PoolSpec> {
            self.arity(i + 7)?;
            let mode = match self.words[i] {
                "max" => PoolMode::Max,
                "avg" => PoolMode::Avg,
                w => return self.err(format!("unknown pool mode `{w}`")),
            };
            self.keyword(i + 1, "kernel")?;
            self.keyword(i + 3, "stride")?;
            self.keyword(i + 5, "pad")?;
            let spec = PoolSpec::new(mode, self.dims(i + 2)?, self.dims(i + 4)?).with_pad(self.dims(i + 6)?);
            if spec.kernel.contains(&0) || spec.stride.contains(&0) {
                return self.err("pool kernel and stride must be positive");
            }
            if (0..3).any(|a| spec.pad[a].0 >= spec.kernel[a]) {
                return self.err("pool padding must be smaller than the kernel");
            }
            Ok(spec)
        }
    }

    #[derive(Default)]
    struct Fields {
        name: Option<String>,
        input: Option<[usize; 4]>,
        classes: Option<usize>,
        growth: Option<usize>,
        bottleneck: Option<usize>,
        theta: Option<f64>,
        stem: Option<StemSpec>,
        stem_pool: Option<Option<PoolSpec>>,
        dense_kernel: Option<Dims3>,
        transition_pool: Option<PoolSpec>,
    }

    fn set<T>(slot: &mut Option<T>, value: T, line: &Line<'_>) -> Result<()> {
        if slot.is_some() {
            return line.err(format!("duplicate `{}`", line.words[0]));
        }
        *slot = Some(value);
        Ok(())
    }

    pub(super) fn parse(text: &str) -> Result<ArchSpec> {
        let mut f = Fields::default();
        let mut stages = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let content = raw.split('#').next().unwrap_or("");
            let words: Vec<&str> = content.split_whitespace().collect();
            if words.is_empty() {
                continue;
            }
            let line = Line { no: i + 1, words };
            match line.words[0] {
                "name" => {
                    line.arity(2)?;
                    set(&mut f.name, line.words[1].to_string(), &line)?;
                }
                "input" => {
                    line.arity(2)?;
                    set(&mut f.input, line.dims::<4>(1)?, &line)?;
                }
                "classes" => {
                    line.arity(2)?;
                    set(&mut f.classes, line.num(1)?, &line)?;
                }
                "growth" => {
                    line.arity(2)?;
                    set(&mut f.growth, line.num(1)?, &line)?;
                }
                "bottleneck" => {
                    line.arity(2)?;
                    set(&mut f.bottleneck, line.num(1)?, &line)?;
                }
                "compression" => {
                    line.arity(2)?;
                    let w = line.words[1];
                    let theta: f64 = w.parse().or_else(|_| line.err(format!("`{w}` is not a number")))?;
                    set(&mut f.theta, theta, &line)?;
                }
                "stem" => {
                    line.arity(8)?;
                    line.keyword(2, "kernel")?;
                    line.keyword(4, "stride")?;
                    line.keyword(6, "pad")?;
                    let stem = StemSpec {
                        channels: line.num(1)?,
                        kernel: line.dims(3)?,
                        stride: line.dims(5)?,
                        pad: line.dims(7)?,
                    };
                    set(&mut f.stem, stem, &line)?;
                }
                "stem-pool" => {
                    let pool = if line.words.get(1) == Some(&"none") {
                        line.arity(2)?;
                        None
                    } else {
                        Some(line.pool(1)?)
                    };
                    set(&mut f.stem_pool, pool, &line)?;
                }
                "dense-kernel" => {
                    line.arity(2)?;
                    set(&mut f.dense_kernel, line.dims(1)?, &line)?;
                }
                "transition-pool" => {
                    let pool = line.pool(1)?;
                    set(&mut f.transition_pool, pool, &line)?;
                }
                "stage" => {
                    if line.words.len() < 3 {
                        return line.err("`stage` expects a layer count and a transition kind");
                    }
                    let layers = line.num(1)?;
                    let transition = match line.words[2] {
                        "none" => {
                            line.arity(3)?;
                            TransitionKind::None
                        }
                        "transition" => {
                            line.arity(3)?;
                            TransitionKind::Standard
                        }
                        "ttl" => {
                            if line.words.len() == 4 {
                                TransitionKind::Ttl {
                                    depths: line.list(3)?,
                                    widths: None,
                                }
                            } else {
                                line.arity(6)?;
                                line.keyword(4, "widths")?;
                                TransitionKind::Ttl {
                                    depths: line.list(3)?,
                                    widths: Some(line.list(5)?),
                                }
                            }
                        }
                        w => return line.err(format!("unknown transition kind `{w}`")),
                    };
                    stages.push(StageSpec { layers, transition });
                }
                w => return line.err(format!("unknown key `{w}`")),
            }
        }

        fn need<T>(v: Option<T>, key: &str) -> Result<T> {
            v.ok_or_else(|| Error::Spec(format!("missing `{key}`")))
        }
        let spec = ArchSpec {
            name: need(f.name, "name")?,
            input: need(f.input, "input")?,
            num_classes: need(f.classes, "classes")?,
            growth: need(f.growth, "growth")?,
            bottleneck: need(f.bottleneck, "bottleneck")?,
            theta: need(f.theta, "compression")?,
            stem: need(f.stem, "stem")?,
            stem_pool: need(f.stem_pool, "stem-pool")?,
            dense_kernel: need(f.dense_kernel, "dense-kernel")?,
            transition_pool: need(f.transition_pool, "transition-pool")?,
            stages,
        };
        spec.validate()?;
        Ok(spec)
    }
}
