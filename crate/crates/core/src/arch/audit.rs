//! Shape and cost audit computed from an [`ArchSpec`] alone, without
//! allocating weights.

use std::fmt;

use super::{ArchSpec, TransitionKind};
use crate::blocks::{compressed_width, ttl_branch_kernel};
use crate::error::Result;
use crate::tensor::{conv3d_output_shape, ConvSpec, Shape};

#[derive(Debug, Clone, PartialEq)]
pub struct AuditRow {
    pub layer: String,
    /// Output of the row for one clip.
    pub shape: Shape,
    /// Trainable parameters introduced by the row.
    pub params: usize,
    /// Multiply-accumulates of the row's convolutions and linear maps.
    pub macs: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AuditReport {
    pub name: String,
    pub input: Shape,
    pub rows: Vec<AuditRow>,
}

impl AuditReport {
    pub fn total_params(&self) -> usize {
        self.rows.iter().map(|r| r.params).sum()
    }

    pub fn total_macs(&self) -> u64 {
        self.rows.iter().map(|r| r.macs).sum()
    }

    pub fn row(&self, layer: &str) -> Option<&AuditRow> {
        self.rows.iter().find(|r| r.layer == layer)
    }

    /// Output sizes written `h×w×t`, one per row.
    pub fn sizes(&self) -> Vec<String> {
        self.rows.iter().map(|r| hwt(r.shape)).collect()
    }
}

/// `h×w×t` rendering of a feature-map size.
pub fn hwt(s: Shape) -> String {
    format!("{}×{}×{}", s.h(), s.w(), s.t())
}

/// `a`'s parameter count over `b`'s.
pub fn param_ratio(a: &AuditReport, b: &AuditReport) -> f64 {
    a.total_params() as f64 / b.total_params() as f64
}

fn conv_macs(spec: &ConvSpec, out: Shape) -> u64 {
    (out.numel() * spec.fan_in()) as u64
}

struct Walker {
    shape: Shape,
    rows: Vec<AuditRow>,
}

impl Walker {
    /// BN-ReLU-Conv on the current shape; returns `(out, params, macs)`.
    fn unit(&self, input: Shape, spec: &ConvSpec) -> Result<(Shape, usize, u64)> {
        let out = conv3d_output_shape(input, spec)?;
        Ok((out, 2 * spec.in_channels + spec.num_weights(), conv_macs(spec, out)))
    }

    fn push(&mut self, layer: String, shape: Shape, params: usize, macs: u64) {
        self.shape = shape;
        self.rows.push(AuditRow {
            layer,
            shape,
            params,
            macs,
        });
    }
}

pub fn audit(spec: &ArchSpec) -> Result<AuditReport> {
    spec.validate()?;
    let [c, t, h, w] = spec.input;
    let input = Shape::new(1, c, t, h, w);
    let mut wk = Walker {
        shape: input,
        rows: Vec::new(),
    };

    let s = &spec.stem;
    let stem = ConvSpec::new(c, s.channels, s.kernel).with_stride(s.stride).with_pad(s.pad);
    let out = conv3d_output_shape(input, &stem)?;
    wk.push("stem.conv".into(), out, stem.num_weights() + 2 * s.channels, conv_macs(&stem, out));
    if let Some(pool) = &spec.stem_pool {
        let out = pool.output_shape(wk.shape)?;
        wk.push("stem.pool".into(), out, 0, 0);
    }

    for (i, stage) in spec.stages.iter().enumerate() {
        let stage_no = i + 1;
        let (mut params, mut macs) = (0, 0);
        let mut x = wk.shape;
        for _ in 0..stage.layers {
            let width = spec.bottleneck * spec.growth;
            let (b, p1, m1) = wk.unit(x, &ConvSpec::new(x.c(), width, [1; 3]))?;
            let (o, p2, m2) = wk.unit(b, &ConvSpec::same(width, spec.growth, spec.dense_kernel))?;
            params += p1 + p2;
            macs += m1 + m2;
            x = x.with_c(x.c() + o.c());
        }
        wk.push(format!("block{stage_no}"), x, params, macs);

        let (layer, convs) = match &stage.transition {
            TransitionKind::None => continue,
            TransitionKind::Standard => (
                format!("transition{stage_no}"),
                vec![ConvSpec::new(x.c(), compressed_width(x.c(), spec.theta), [1; 3])],
            ),
            TransitionKind::Ttl { depths, .. } => {
                let widths = spec.ttl_branch_widths(i, x.c()).unwrap_or_default();
                let convs = depths
                    .iter()
                    .zip(widths)
                    .map(|(&d, w)| ConvSpec::same(x.c(), w, ttl_branch_kernel(d, spec.spatial_kernel())))
                    .collect();
                (format!("ttl{stage_no}"), convs)
            }
        };
        let (mut params, mut macs, mut channels) = (0, 0, 0);
        for conv in &convs {
            let (o, p, m) = wk.unit(x, conv)?;
            params += p;
            macs += m;
            channels += o.c();
        }
        let out = spec.transition_pool.output_shape(x.with_c(channels))?;
        wk.push(layer, out, params, macs);
    }

    let c = wk.shape.c();
    wk.push("head.norm".into(), wk.shape, 2 * c, 0);
    let k = spec.num_classes;
    wk.push("classifier".into(), Shape::vector(1, k), c * k + k, (c * k) as u64);

    Ok(AuditReport {
        name: spec.name.clone(),
        input,
        rows: wk.rows,
    })
}

fn grouped(mut v: u64) -> String {
    let mut parts = Vec::new();
    while v >= 1000 {
        parts.push(format!("{:03}", v % 1000));
        v /= 1000;
    }
    parts.push(v.to_string());
    parts.reverse();
    parts.join(",")
}

impl fmt::Display for AuditReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let i = self.input;
        writeln!(f, "{} | input {}×{}×{}×{} (c×t×h×w)", self.name, i.c(), i.t(), i.h(), i.w())?;
        writeln!(f, "{:<12} {:>14} {:>8} {:>14} {:>18}", "layer", "output h×w×t", "channels", "params", "MACs")?;
        for r in &self.rows {
            writeln!(
                f,
                "{:<12} {:>14} {:>8} {:>14} {:>18}",
                r.layer,
                hwt(r.shape),
                r.shape.c(),
                grouped(r.params as u64),
                grouped(r.macs)
            )?;
        }
        write!(
            f,
            "{:<12} {:>14} {:>8} {:>14} {:>18}",
            "total",
            "",
            "",
            grouped(self.total_params() as u64),
            grouped(self.total_macs())
        )
    }
}
