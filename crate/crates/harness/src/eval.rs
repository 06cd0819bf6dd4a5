//! Self- and cross-reenactment evaluation.

use std::time::Instant;

use serde::{Deserialize, Serialize};
use synwarp_core::data::{cross_frame_inputs, frame_inputs, MotionMode, SequenceRecord};
use synwarp_core::encoding::{encode_motion, transform_keypoints, KeypointSet, MotionSource};
use synwarp_core::error::{Error, Result};
use synwarp_core::model::Model;
use synwarp_core::Tensor;

use crate::metrics;

/// PSNR values serialize as numbers, with `+inf` written as the string "inf".
mod db {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn serialize<S: Serializer>(v: &Option<f64>, s: S) -> Result<S::Ok, S::Error> {
        match v {
            Some(x) if x.is_infinite() && *x > 0.0 => s.serialize_str("inf"),
            Some(x) => s.serialize_f64(*x),
            None => s.serialize_none(),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<f64>, D::Error> {
        match Option::<Repr>::deserialize(d)? {
            None => Ok(None),
            Some(Repr::Num(x)) => Ok(Some(x)),
            Some(Repr::Text(t)) if t == "inf" => Ok(Some(f64::INFINITY)),
            Some(Repr::Text(t)) => Err(serde::de::Error::custom(format!("unexpected PSNR value `{t}`"))),
        }
    }
}

/// One line of a report table. Metrics without ground truth are `null`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Row {
    pub name: String,
    #[serde(with = "db")]
    pub psnr: Option<f64>,
    pub ssim: Option<f64>,
    pub l1: Option<f64>,
    pub temporal: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameMetrics {
    pub sequence: usize,
    pub frame: usize,
    #[serde(with = "db")]
    pub psnr: Option<f64>,
    pub ssim: f64,
    pub l1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config: serde_json::Value,
    pub rows: Vec<Row>,
    pub baseline: Option<Row>,
    #[serde(default)]
    pub frames: Vec<FrameMetrics>,
    #[serde(default)]
    pub noise_bound: Option<f64>,
    #[serde(default)]
    pub wall_clock_s: f64,
}

/// Predicted frames and their ground truth for one sequence.
pub struct SequencePrediction {
    pub sequence: usize,
    /// Index of the first predicted frame within the sequence.
    pub first_frame: usize,
    pub pred: Vec<Tensor<f32>>,
    pub gt: Vec<Tensor<f32>>,
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

/// Aggregate row (means of per-frame values) and the per-frame metrics.
pub fn score(name: &str, seqs: &[SequencePrediction]) -> Result<(Row, Vec<FrameMetrics>)> {
    let mut frames = Vec::new();
    let mut temporal = Vec::new();
    for s in seqs {
        if s.pred.len() != s.gt.len() {
            return Err(Error::InvalidArgument("prediction and ground truth lengths differ".into()));
        }
        for (t, (p, g)) in s.pred.iter().zip(&s.gt).enumerate() {
            frames.push(FrameMetrics {
                sequence: s.sequence,
                frame: s.first_frame + t,
                psnr: Some(metrics::psnr(p, g)?),
                ssim: metrics::ssim(p, g)?,
                l1: metrics::l1(p, g)?,
            });
        }
        if s.pred.len() >= 2 {
            temporal.push(metrics::temporal_consistency(&s.pred, &s.gt)?);
        }
    }
    let row = Row {
        name: name.to_string(),
        psnr: Some(mean(frames.iter().map(|f| f.psnr.unwrap_or(f64::NAN)))),
        ssim: Some(mean(frames.iter().map(|f| f.ssim))),
        l1: Some(mean(frames.iter().map(|f| f.l1))),
        temporal: (!temporal.is_empty()).then(|| mean(temporal.iter().copied())),
    };
    Ok((row, frames))
}

/// Frame 0 of each sequence is the source; every later frame drives and is
/// compared against itself. Returns the model's and the copy-source
/// baseline's predictions.
pub fn self_reenact_predictions(
    model: &Model<f32>,
    data: &[SequenceRecord<f64>],
    refs: usize,
    mode: MotionMode,
) -> Result<(Vec<SequencePrediction>, Vec<SequencePrediction>)> {
    let mut ours = Vec::with_capacity(data.len());
    let mut copy = Vec::with_capacity(data.len());
    for rec in data {
        rec.validate()?;
        let rec = rec.cast::<f32>();
        let gt: Vec<Tensor<f32>> = rec.frames[1..].to_vec();
        let mut pred = Vec::with_capacity(gt.len());
        for d in 1..rec.len() {
            let inputs = frame_inputs(model, &rec, 0, d, refs, mode)?;
            pred.push(model.animate(&inputs)?.image);
        }
        copy.push(SequencePrediction { sequence: rec.id, first_frame: 1, pred: vec![rec.frames[0].clone(); gt.len()], gt: gt.clone() });
        ours.push(SequencePrediction { sequence: rec.id, first_frame: 1, pred, gt });
    }
    Ok((ours, copy))
}

pub fn self_reenact_eval(
    model: &Model<f32>,
    data: &[SequenceRecord<f64>],
    refs: usize,
    mode: MotionMode,
    config: serde_json::Value,
) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("evaluation dataset is empty".into()));
    }
    let start = Instant::now();
    let (ours, copy) = self_reenact_predictions(model, data, refs, mode)?;
    let (row, frames) = score(&format!("Ours (R={refs})"), &ours)?;
    let (baseline, _) = score("copy-source", &copy)?;
    Ok(EvalReport {
        config,
        rows: vec![row],
        baseline: Some(baseline),
        frames,
        noise_bound: None,
        wall_clock_s: start.elapsed().as_secs_f64(),
    })
}

fn projection_l1(a: &KeypointSet<f32>, b: &KeypointSet<f32>) -> f64 {
    let k = a.count();
    let mut s = 0.0;
    for i in 0..k {
        let (p, q) = (a.point(i), b.point(i));
        s += (p[0] - q[0]).abs() as f64 + (p[1] - q[1]).abs() as f64;
    }
    s / (2 * k) as f64
}

/// L1 between the 2D projection of `target` and the keypoints the motion
/// encoder extracts from `frame`.
pub fn keypoint_proxy(model: &Model<f32>, frame: &Tensor<f32>, target: &KeypointSet<f32>) -> Result<f64> {
    let (c, p) = encode_motion(frame, &model.config, MotionSource::Network(&model.params))?;
    Ok(projection_l1(&transform_keypoints(&c, &p)?, target))
}

/// Mean keypoint proxy of ground-truth frames against their own keypoints:
/// the floor any generated frame can reach.
pub fn encoder_noise_bound(model: &Model<f32>, data: &[SequenceRecord<f64>]) -> Result<f64> {
    let mut v = Vec::new();
    for rec in data {
        let rec = rec.cast::<f32>();
        for (img, p) in rec.frames.iter().zip(&rec.params) {
            v.push(keypoint_proxy(model, img, &transform_keypoints(&rec.canonical, p)?)?);
        }
    }
    Ok(mean(v.into_iter()))
}

/// Sequence id pairs `(source, driving)` with `i` driven by `i + 1`.
pub fn default_pairs(data: &[SequenceRecord<f64>]) -> Vec<(usize, usize)> {
    let n = data.len();
    (0..n).filter(|_| n >= 2).map(|i| (data[i].id, data[(i + 1) % n].id)).collect()
}

pub struct CrossOptions {
    pub refs: usize,
    pub mode: MotionMode,
    /// Permits a sequence to drive itself (test mode only).
    pub allow_same: bool,
}

/// Animates frame 0 of each source with every later frame of its driver.
/// Rows report the keypoint proxy in the `l1` column.
pub fn cross_reenact_eval(
    model: &Model<f32>,
    data: &[SequenceRecord<f64>],
    pairs: &[(usize, usize)],
    opts: &CrossOptions,
    config: serde_json::Value,
) -> Result<EvalReport> {
    let start = Instant::now();
    let find = |id: usize| {
        data.iter().find(|r| r.id == id).ok_or_else(|| Error::InvalidArgument(format!("unknown sequence id {id}")))
    };
    let mut rows = Vec::with_capacity(pairs.len());
    for &(a, b) in pairs {
        if a == b && !opts.allow_same {
            return Err(Error::InvalidArgument(format!("pair ({a}, {b}) uses the same sequence twice")));
        }
        let src = find(a)?.cast::<f32>();
        let drv = find(b)?.cast::<f32>();
        let canonical = match opts.mode {
            MotionMode::Oracle => src.canonical.clone(),
            MotionMode::Network => encode_motion(&src.frames[0], &model.config, MotionSource::Network(&model.params))?.0,
        };
        let mut proxy = Vec::new();
        for t in 1..drv.len() {
            let pd = match opts.mode {
                MotionMode::Oracle => drv.params[t].clone(),
                MotionMode::Network => encode_motion(&drv.frames[t], &model.config, MotionSource::Network(&model.params))?.1,
            };
            let inputs = cross_frame_inputs(model, &src, 0, &pd, opts.refs, opts.mode)?;
            let out = model.animate(&inputs)?.image;
            let target = transform_keypoints(&canonical, &drv.params[t])?;
            proxy.push(keypoint_proxy(model, &out, &target)?);
        }
        rows.push(Row {
            name: format!("seq_{a:04}<-seq_{b:04}"),
            psnr: None,
            ssim: None,
            l1: Some(mean(proxy.into_iter())),
            temporal: None,
        });
    }
    Ok(EvalReport {
        config,
        rows,
        baseline: None,
        frames: Vec::new(),
        noise_bound: Some(encoder_noise_bound(model, data)?),
        wall_clock_s: start.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn inf_psnr_serializes_as_text() {
        let row = Row { name: "x".into(), psnr: Some(f64::INFINITY), ssim: Some(1.0), l1: Some(0.0), temporal: None };
        let s = serde_json::to_string(&row).unwrap();
        assert!(s.contains(r#""psnr":"inf""#), "{s}");
        let back: Row = serde_json::from_str(&s).unwrap();
        assert_eq!(back, row);
    }
}
