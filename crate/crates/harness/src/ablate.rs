//! Ablation runner: trains and evaluates model variants under one seed and
//! budget and lays the results out like the paper's ablation tables.

use std::collections::HashMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use synwarp_core::cgf::FusionVariant;
use synwarp_core::data::SequenceRecord;
use synwarp_core::error::{Error, Result};
use synwarp_core::model::KeypointMode;
use synwarp_core::train::{TrainConfig, Trainer};

use crate::eval::{self_reenact_eval, Row};

#[derive(Debug, Clone, PartialEq)]
pub enum Axis {
    KeypointDim(Vec<KeypointMode>),
    Refs(Vec<usize>),
    Fusion(Vec<FusionVariant>),
}

fn parse_values<T>(values: &str, f: impl Fn(&str) -> Option<T>) -> Result<Vec<T>> {
    values
        .split(',')
        .map(|v| f(v.trim()).ok_or_else(|| Error::InvalidArgument(format!("unknown axis value `{v}`"))))
        .collect()
}

/// Parses `name=v1,v2[;name=…]`; axes in one string form a cartesian product.
pub fn parse_axes(spec: &str) -> Result<Vec<Axis>> {
    let mut axes = Vec::new();
    for part in spec.split(';').map(str::trim).filter(|p| !p.is_empty()) {
        let (name, values) = part
            .split_once('=')
            .ok_or_else(|| Error::InvalidArgument(format!("axis `{part}` must look like name=v1,v2")))?;
        let axis = match name.trim() {
            "keypoint-dim" => Axis::KeypointDim(parse_values(values, |v| match v.to_ascii_uppercase().as_str() {
                "2D" => Some(KeypointMode::TwoD),
                "3D" => Some(KeypointMode::ThreeD),
                _ => None,
            })?),
            "R" | "refs" => Axis::Refs(parse_values(values, |v| v.parse().ok().filter(|&r| r == 1 || r == 2))?),
            "fusion" => Axis::Fusion(parse_values(values, |v| v.parse().ok())?),
            other => return Err(Error::InvalidArgument(format!("unknown ablation axis `{other}`"))),
        };
        axes.push(axis);
    }
    if axes.is_empty() {
        return Err(Error::InvalidArgument("no ablation axes given".into()));
    }
    Ok(axes)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Variant {
    pub name: String,
    pub config: TrainConfig,
}

fn fusion_label(v: FusionVariant) -> &'static str {
    match v {
        FusionVariant::Concat => "Concatenate",
        FusionVariant::Sum => "Sum",
        FusionVariant::SumMask => "Sum-mask",
        FusionVariant::Cgf => "Ours",
    }
}

fn apply_kp(cfg: &mut TrainConfig, mode: KeypointMode) {
    if mode == KeypointMode::TwoD && cfg.model.keypoint_mode != KeypointMode::TwoD {
        cfg.model = cfg.model.clone().planar();
    }
}

/// Cartesian product of the axes applied to `base`, in listing order.
pub fn expand(base: &TrainConfig, axes: &[Axis]) -> Vec<Variant> {
    let geometry = axes.iter().any(|a| matches!(a, Axis::KeypointDim(_) | Axis::Refs(_)));
    let mut configs = vec![base.clone()];
    for axis in axes {
        let mut next = Vec::new();
        for c in &configs {
            match axis {
                Axis::KeypointDim(ms) => {
                    for &m in ms {
                        let mut c = c.clone();
                        apply_kp(&mut c, m);
                        next.push(c);
                    }
                }
                Axis::Refs(rs) => {
                    for &r in rs {
                        next.push(TrainConfig { refs: r, ..c.clone() });
                    }
                }
                Axis::Fusion(fs) => {
                    for &f in fs {
                        let mut c = c.clone();
                        c.model.fusion = f;
                        next.push(c);
                    }
                }
            }
        }
        configs = next;
    }
    let has_fusion = axes.iter().any(|a| matches!(a, Axis::Fusion(_)));
    configs
        .into_iter()
        .map(|config| {
            let mut parts = Vec::new();
            if has_fusion {
                parts.push(fusion_label(config.model.fusion).to_string());
            }
            if geometry {
                let dim = if config.model.keypoint_mode == KeypointMode::TwoD { "2D" } else { "3D" };
                parts.push(format!("{dim}-based (R={})", config.refs));
            }
            Variant { name: parts.join(", "), config }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub variant: String,
    pub lpips: String,
    #[serde(flatten)]
    pub metrics: Row,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table {
    pub title: String,
    pub columns: Vec<String>,
    pub rows: Vec<TableRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub config: serde_json::Value,
    pub rows: Vec<Row>,
    pub baseline: Option<Row>,
    pub tables: Vec<Table>,
}

fn title(axes: &[Axis]) -> String {
    let names: Vec<&str> = axes
        .iter()
        .map(|a| match a {
            Axis::KeypointDim(_) => "dimension of keypoints",
            Axis::Refs(_) => "number of references",
            Axis::Fusion(_) => "fusion mechanism",
        })
        .collect();
    format!("Ablation study for the {}", names.join(" and "))
}

fn fmt_metric(v: Option<f64>, digits: usize) -> String {
    match v {
        Some(x) if x.is_infinite() => "inf".into(),
        Some(x) => format!("{x:.digits$}"),
        None => "n/a".into(),
    }
}

impl AblationReport {
    /// Plain-text tables with the paper's column order.
    pub fn markdown(&self) -> String {
        let mut s = String::new();
        for t in &self.tables {
            let _ = writeln!(s, "{}\n", t.title);
            let _ = writeln!(s, "| {} |", t.columns.join(" | "));
            let _ = writeln!(s, "|{}", "---|".repeat(t.columns.len()));
            for r in &t.rows {
                let m = &r.metrics;
                let _ = writeln!(
                    s,
                    "| {} | {} | {} | {} | {} |",
                    r.variant,
                    r.lpips,
                    fmt_metric(m.psnr, 4),
                    fmt_metric(m.ssim, 4),
                    fmt_metric(m.l1, 4)
                );
            }
            let _ = writeln!(s);
        }
        if let Some(b) = &self.baseline {
            let _ = writeln!(s, "copy-source baseline: PSNR {} SSIM {} L1 {}", fmt_metric(b.psnr, 4), fmt_metric(b.ssim, 4), fmt_metric(b.l1, 4));
        }
        s
    }
}

/// Trains every variant of every table on `train` and evaluates it on
/// `held_out`. Variants with identical configurations are trained once.
pub fn ablate(
    base: &TrainConfig,
    tables: &[Vec<Axis>],
    train: &[SequenceRecord<f64>],
    held_out: &[SequenceRecord<f64>],
    mut progress: impl FnMut(&str, &Row),
) -> Result<AblationReport> {
    if train.is_empty() || held_out.is_empty() {
        return Err(Error::InvalidArgument("ablation needs training and held-out sequences".into()));
    }
    let train32: Vec<SequenceRecord<f32>> = train.iter().map(|r| r.cast()).collect();
    let mut cache: HashMap<u64, Row> = HashMap::new();
    let mut baseline = None;
    let mut all_rows = Vec::new();
    let mut out_tables = Vec::new();
    for axes in tables {
        let mut rows = Vec::new();
        for v in expand(base, axes) {
            v.config.validate()?;
            let row = match cache.get(&v.config.hash()) {
                Some(r) => r.clone(),
                None => {
                    let mut trainer = Trainer::<f32>::new(v.config.clone())?;
                    trainer.train(&train32, None, None, |_| {})?;
                    let report = self_reenact_eval(
                        &trainer.model,
                        held_out,
                        v.config.refs,
                        v.config.motion,
                        serde_json::Value::Null,
                    )?;
                    if baseline.is_none() {
                        baseline = report.baseline.clone();
                    }
                    let r = report.rows[0].clone();
                    cache.insert(v.config.hash(), r.clone());
                    r
                }
            };
            let row = Row { name: v.name.clone(), ..row };
            progress(&v.name, &row);
            all_rows.push(row.clone());
            rows.push(TableRow { variant: v.name, lpips: "n/a".into(), metrics: row });
        }
        out_tables.push(Table {
            title: title(axes),
            columns: ["Variant", "LPIPS", "PSNR", "SSIM", "L1"].map(String::from).to_vec(),
            rows,
        });
    }
    Ok(AblationReport {
        config: serde_json::to_value(base).map_err(Error::from)?,
        rows: all_rows,
        baseline,
        tables: out_tables,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_known_axes() {
        let axes = parse_axes("fusion=cgf,concat,sum,sum-mask").unwrap();
        assert_eq!(axes, vec![Axis::Fusion(FusionVariant::ALL.to_vec())]);
        let axes = parse_axes("keypoint-dim=2D,3D;R=1,2").unwrap();
        assert_eq!(axes.len(), 2);
        assert!(parse_axes("fusion=cgf,avg").is_err());
        assert!(parse_axes("depth=1").is_err());
        assert!(parse_axes("R=3").is_err());
    }

    #[test]
    fn expansion_names_mirror_tables() {
        let base = TrainConfig::smoke();
        let v = expand(&base, &parse_axes("keypoint-dim=2D,3D").unwrap());
        let names: Vec<_> = v.iter().map(|v| v.name.as_str()).collect();
        assert_eq!(names, ["2D-based (R=1)", "3D-based (R=1)"]);
        assert_eq!(v[0].config.model.feat_depth, 1);
        let v = expand(&base, &parse_axes("fusion=concat,sum,sum-mask,cgf").unwrap());
        let names: Vec<_> = v.iter().map(|v| v.name.as_str()).collect();
        assert_eq!(names, ["Concatenate", "Sum", "Sum-mask", "Ours"]);
        let v = expand(&base, &parse_axes("keypoint-dim=3D;R=1,2").unwrap());
        assert_eq!(v[1].name, "3D-based (R=2)");
        assert_eq!(v[1].config.refs, 2);
    }
}
