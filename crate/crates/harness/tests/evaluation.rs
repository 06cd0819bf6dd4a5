//! Self/cross-reenactment reports and the ablation runner on the micro model.

use synwarp_core::data::{MotionMode, SequenceRecord};
use synwarp_core::model::{Model, ModelConfig};
use synwarp_core::rng::Rng;
use synwarp_core::train::TrainConfig;
use synwarp_harness::ablate::{ablate, parse_axes};
use synwarp_harness::dataset::{self, DatasetSpec};
use synwarp_harness::eval::{cross_reenact_eval, default_pairs, self_reenact_eval, CrossOptions, EvalReport};

fn data(n: usize) -> Vec<SequenceRecord<f64>> {
    let spec = DatasetSpec { sequences: n, frames: 4, size: 16, keypoints: 3, seed: 5, first_id: 0 };
    dataset::generate(&spec).unwrap().into_iter().map(|(_, r)| r).collect()
}

fn model() -> Model<f32> {
    Model::new(ModelConfig::micro(), &mut Rng::new(1)).unwrap()
}

#[test]
fn self_reenactment_report_has_the_documented_schema() {
    let data = data(2);
    let report = self_reenact_eval(&model(), &data, 2, MotionMode::Oracle, serde_json::json!({"k": 1})).unwrap();
    assert_eq!(report.rows.len(), 1);
    assert_eq!(report.rows[0].name, "Ours (R=2)");
    assert_eq!(report.frames.len(), 2 * 3);
    assert_eq!(report.baseline.as_ref().unwrap().name, "copy-source");
    let v: serde_json::Value = serde_json::to_value(&report).unwrap();
    for key in ["config", "rows", "baseline"] {
        assert!(v.get(key).is_some(), "{key}");
    }
    for key in ["name", "psnr", "ssim", "l1", "temporal"] {
        assert!(v["rows"][0].get(key).is_some(), "{key}");
    }
    let back: EvalReport = serde_json::from_value(v).unwrap();
    assert_eq!(back.rows, report.rows);
}

#[test]
fn self_reenactment_is_deterministic() {
    let data = data(2);
    let a = self_reenact_eval(&model(), &data, 1, MotionMode::Network, serde_json::Value::Null).unwrap();
    let b = self_reenact_eval(&model(), &data, 1, MotionMode::Network, serde_json::Value::Null).unwrap();
    assert_eq!(a.rows, b.rows);
    assert_eq!(a.frames, b.frames);
}

#[test]
fn cross_reenactment_lists_one_row_per_pair() {
    let data = data(3);
    let pairs = default_pairs(&data);
    assert_eq!(pairs, vec![(0, 1), (1, 2), (2, 0)]);
    let opts = CrossOptions { refs: 1, mode: MotionMode::Oracle, allow_same: false };
    let r = cross_reenact_eval(&model(), &data, &pairs, &opts, serde_json::Value::Null).unwrap();
    assert_eq!(r.rows.len(), 3);
    assert_eq!(r.rows[2].name, "seq_0002<-seq_0000");
    assert!(r.rows.iter().all(|row| row.psnr.is_none() && row.l1.is_some_and(f64::is_finite)));
    assert!(r.noise_bound.is_some_and(f64::is_finite));
}

#[test]
fn cross_reenactment_rejects_a_sequence_driving_itself() {
    let data = data(2);
    let strict = CrossOptions { refs: 1, mode: MotionMode::Oracle, allow_same: false };
    assert!(cross_reenact_eval(&model(), &data, &[(1, 1)], &strict, serde_json::Value::Null).is_err());
    let lenient = CrossOptions { allow_same: true, ..strict };
    assert_eq!(cross_reenact_eval(&model(), &data, &[(1, 1)], &lenient, serde_json::Value::Null).unwrap().rows.len(), 1);
}

fn tiny_config() -> TrainConfig {
    TrainConfig { model: ModelConfig::micro(), epochs: 2, warmup_epochs: Some(1), batch_size: 2, ..TrainConfig::default() }
}

#[test]
fn ablation_tables_follow_the_requested_axes() {
    let all = data(4);
    let (train, held) = all.split_at(3);
    let tables = vec![parse_axes("fusion=cgf").unwrap(), parse_axes("fusion=sum,sum").unwrap(), parse_axes("keypoint-dim=2D,3D").unwrap()];
    let mut seen = Vec::new();
    let report = ablate(&tiny_config(), &tables, train, held, |name, _| seen.push(name.to_string())).unwrap();
    assert_eq!(report.tables.len(), 3);
    assert_eq!(report.tables[0].rows.len(), 1);
    assert_eq!(report.tables[0].rows[0].variant, "Ours");
    let dup = &report.tables[1].rows;
    assert_eq!(dup.len(), 2);
    assert_eq!(dup[0], dup[1]);
    let kp: Vec<_> = report.tables[2].rows.iter().map(|r| r.variant.as_str()).collect();
    assert_eq!(kp, ["2D-based (R=1)", "3D-based (R=1)"]);
    for t in &report.tables {
        assert_eq!(t.columns, ["Variant", "LPIPS", "PSNR", "SSIM", "L1"]);
        for r in &t.rows {
            assert_eq!(r.lpips, "n/a");
            assert!(r.metrics.psnr.is_some_and(f64::is_finite));
        }
    }
    assert_eq!(seen.len(), 5);
    let md = report.markdown();
    assert!(md.contains("| Variant | LPIPS | PSNR | SSIM | L1 |"));
    assert!(md.contains("Ablation study for the fusion mechanism"));
    assert!(md.contains("Ablation study for the dimension of keypoints"));
}

#[test]
fn ablation_rejects_unknown_axis_values() {
    assert!(parse_axes("fusion=cgf,average").is_err());
    assert!(parse_axes("keypoint-dim=4D").is_err());
    assert!(parse_axes("R=0").is_err());
    assert!(parse_axes("").is_err());
}
