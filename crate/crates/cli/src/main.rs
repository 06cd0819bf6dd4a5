use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use synwarp_core::bundle::Bundle;
use synwarp_core::cgf::FusionVariant;
use synwarp_core::data::{MotionMode, SequenceRecord};
use synwarp_core::encoding::{encode_motion, transform_keypoints, KeypointSet, MotionParams, MotionSource};
use synwarp_core::model::{FrameInputs, Model};
use synwarp_core::train::{load_model, TrainConfig, Trainer};
use synwarp_core::{Scalar, Tensor};
use synwarp_harness::ablate::{ablate, parse_axes};
use synwarp_harness::dataset::{self, DatasetSpec};
use synwarp_harness::eval::{cross_reenact_eval, default_pairs, self_reenact_eval, CrossOptions};
use synwarp_harness::gradcheck::{run_check, Precision, KERNELS, PIPELINE};

#[derive(Parser)]
#[command(name = "synwarp", version, about = "Keypoint-driven portrait animation on synthetic avatars")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    GenData(GenData),
    /// Train a model and write a checkpoint.
    Train(Train),
    /// Animate a source image with a directory of driving frames.
    Animate(Animate),
    /// Evaluate a checkpoint and write a JSON report.
    Eval(Eval),
    /// Train and evaluate ablation variants.
    Ablate(Ablate),
    /// Check every kernel VJP and the pipeline gradient by finite differences.
    Gradcheck(Gradcheck),
}

#[derive(Args)]
struct GenData {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seqs: usize,
    #[arg(long, default_value_t = 20)]
    frames: usize,
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 21)]
    keypoints: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Id of the first sequence; lets a held-out set continue a training set.
    #[arg(long, default_value_t = 0)]
    first_id: usize,
}

#[derive(Args)]
struct Train {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Appends one JSON line of metrics per epoch.
    #[arg(long)]
    log: Option<PathBuf>,
    /// Continue from the checkpoint at `--out` if it exists.
    #[arg(long)]
    resume: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum Motion {
    Oracle,
    Network,
}

#[derive(Args)]
struct Animate {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    source: PathBuf,
    /// Directory of driving frames (`*.ppm`, processed in name order).
    #[arg(long)]
    driving: PathBuf,
    #[arg(long, value_delimiter = ',', required = true)]
    refs: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    fusion: Option<FusionVariant>,
    /// Oracle motion reads ground-truth parameters from the `meta.swnb` next to each frame.
    #[arg(long, value_enum, default_value_t = Motion::Network)]
    motion: Motion,
    #[arg(long)]
    dump_flow: bool,
    #[arg(long)]
    dump_mask: bool,
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum EvalMode {
    #[value(name = "self")]
    SelfReenact,
    Cross,
}

#[derive(Args)]
struct Eval {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum)]
    mode: EvalMode,
    #[arg(long, default_value_t = 1)]
    refs_count: usize,
    #[arg(long)]
    report: PathBuf,
    /// Defaults to the motion source the checkpoint was trained with.
    #[arg(long, value_enum)]
    motion: Option<Motion>,
}

#[derive(Args)]
struct Ablate {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// One table per occurrence; `;` joins axes into a product, e.g. `keypoint-dim=2D,3D;R=1,2`.
    #[arg(long, required = true)]
    axes: Vec<String>,
    #[arg(long)]
    report: PathBuf,
    /// Fraction of sequences held out for evaluation.
    #[arg(long, default_value_t = 0.2)]
    held_out: f64,
}

#[derive(Args)]
struct Gradcheck {
    /// A kernel name or `pipeline`; all checks run when omitted.
    #[arg(long)]
    op: Option<String>,
    /// Both precisions run when omitted.
    #[arg(long)]
    precision: Option<Precision>,
    #[arg(long)]
    tol: Option<f64>,
    #[arg(long, default_value_t = 20)]
    seeds: usize,
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::GenData(a) => gen_data(a)?,
        Command::Train(a) => train(a)?,
        Command::Animate(a) => animate(a)?,
        Command::Eval(a) => eval(a)?,
        Command::Ablate(a) => run_ablate(a)?,
        Command::Gradcheck(a) => return gradcheck(a),
    }
    Ok(ExitCode::SUCCESS)
}

fn gen_data(a: GenData) -> Result<()> {
    let spec = DatasetSpec {
        sequences: a.seqs,
        frames: a.frames,
        size: a.size,
        keypoints: a.keypoints,
        seed: a.seed,
        first_id: a.first_id,
    };
    let seqs = dataset::generate(&spec)?;
    dataset::write_dataset(&a.out, &seqs)?;
    eprintln!("wrote {} sequences to {}", seqs.len(), a.out.display());
    Ok(())
}

fn read_config(path: &Path) -> Result<TrainConfig> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(TrainConfig::from_json(&text)?)
}

fn read_data(dir: &Path, image_size: usize) -> Result<Vec<SequenceRecord<f64>>> {
    let data = dataset::read_dataset(dir).with_context(|| format!("reading dataset {}", dir.display()))?;
    if data.is_empty() {
        bail!("no seq_* directories under {}", dir.display());
    }
    check_size(&data[0].frames[0], image_size)?;
    Ok(data)
}

fn check_size<T: Scalar>(img: &Tensor<T>, image_size: usize) -> Result<()> {
    if img.shape() != [3, image_size, image_size] {
        bail!("frames are {:?} but the model expects [3, {image_size}, {image_size}]", img.shape());
    }
    Ok(())
}

fn train(a: Train) -> Result<()> {
    let config = read_config(&a.config)?;
    let data = read_data(&a.data, config.model.image_size)?;
    let data: Vec<SequenceRecord<f32>> = data.iter().map(SequenceRecord::cast).collect();
    let mut trainer = if a.resume && a.out.exists() {
        let t = Trainer::<f32>::load(&a.out)?;
        if t.config != config {
            bail!("checkpoint {} was trained with a different config", a.out.display());
        }
        t
    } else {
        Trainer::<f32>::new(config)?
    };
    trainer.train(&data, Some(&a.out), a.log.as_deref(), |m| {
        eprintln!(
            "epoch {:>3} {:?}: loss {:.5} (rec {:.5} perc {:.5} motion {:.5})",
            m.epoch, m.phase, m.total, m.reconstruction, m.perceptual, m.motion
        );
    })?;
    eprintln!("checkpoint written to {}", a.out.display());
    Ok(())
}

/// Parses the frame index out of `frame_NNNN.ext`.
fn frame_index(path: &Path) -> Result<usize> {
    path.file_stem()
        .and_then(|s| s.to_str())
        .and_then(|s| s.strip_prefix("frame_"))
        .and_then(|s| s.parse().ok())
        .with_context(|| format!("{} is not named frame_NNNN", path.display()))
}

/// Ground-truth canonical keypoints and motion of a dataset frame.
fn oracle_motion(path: &Path) -> Result<(KeypointSet<f32>, MotionParams<f32>)> {
    let dir = path.parent().context("frame has no parent directory")?;
    let (_, rec) = dataset::read_sequence(dir).with_context(|| format!("oracle motion for {}", path.display()))?;
    let i = frame_index(path)?;
    let p = rec.params.get(i).with_context(|| format!("{} is past the end of its sequence", path.display()))?;
    Ok((KeypointSet::new(rec.canonical.tensor().cast())?, p.cast()))
}

fn animate(a: Animate) -> Result<()> {
    let mut model: Model<f32> = load_model(&a.ckpt)?;
    if let Some(f) = a.fusion {
        model.config.fusion = f;
    }
    let size = model.config.image_size;
    if a.refs.len() > model.config.max_refs {
        bail!("{} references given but the model takes at most {}", a.refs.len(), model.config.max_refs);
    }
    let mut driving: Vec<PathBuf> = fs::read_dir(&a.driving)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "ppm"))
        .collect();
    driving.sort();
    if driving.is_empty() {
        bail!("no .ppm frames in {}", a.driving.display());
    }
    let motion = |path: &Path, img: &Tensor<f32>| -> Result<(KeypointSet<f32>, MotionParams<f32>)> {
        match a.motion {
            Motion::Oracle => oracle_motion(path),
            Motion::Network => Ok(encode_motion(img, &model.config, MotionSource::Network(&model.params))?),
        }
    };
    let source: Tensor<f32> = dataset::read_image(&a.source)?;
    check_size(&source, size)?;
    let (canonical, ps) = motion(&a.source, &source)?;
    let x_s = transform_keypoints(&canonical, &ps)?;
    let mut refs = Vec::with_capacity(a.refs.len());
    for p in &a.refs {
        let img: Tensor<f32> = dataset::read_image(p)?;
        check_size(&img, size)?;
        let (_, pr) = motion(p, &img)?;
        refs.push((img, transform_keypoints(&canonical, &pr)?));
    }
    fs::create_dir_all(&a.out)?;
    for (t, path) in driving.iter().enumerate() {
        let img: Tensor<f32> = dataset::read_image(path)?;
        check_size(&img, size)?;
        let (_, pd) = motion(path, &img)?;
        let inputs = FrameInputs {
            source: source.clone(),
            x_s: x_s.clone(),
            x_d: transform_keypoints(&canonical, &pd)?,
            refs: refs.clone(),
        };
        let anim = model.animate(&inputs)?;
        dataset::write_ppm(&a.out.join(format!("frame_{t:04}.ppm")), &anim.image)?;
        let mut exact = Bundle::new();
        exact.insert("image", anim.image.clone());
        exact.save(a.out.join(format!("frame_{t:04}.swnb")))?;
        if a.dump_flow {
            let mut b = Bundle::new();
            b.insert("flow", anim.flow.clone());
            b.insert("flow_masks", anim.flow_masks.clone());
            b.save(a.out.join(format!("flow_{t:04}.swnb")))?;
        }
        if a.dump_mask {
            let m = anim
                .mask
                .as_ref()
                .with_context(|| format!("fusion `{}` has no confidence mask", model.config.fusion))?;
            let mut b = Bundle::new();
            b.insert("mask", m.clone());
            b.save(a.out.join(format!("mask_{t:04}.swnb")))?;
            dataset::write_pgm(&a.out.join(format!("mask_{t:04}.pgm")), m)?;
        }
    }
    eprintln!("wrote {} frames to {}", driving.len(), a.out.display());
    Ok(())
}

fn motion_mode(m: Motion) -> MotionMode {
    match m {
        Motion::Oracle => MotionMode::Oracle,
        Motion::Network => MotionMode::Network,
    }
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, serde_json::to_string_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

fn eval(a: Eval) -> Result<()> {
    let config = synwarp_core::train::config_from_bundle(&Bundle::load(&a.ckpt)?)?;
    let model: Model<f32> = load_model(&a.ckpt)?;
    let data = read_data(&a.data, model.config.image_size)?;
    let mode = a.motion.map(motion_mode).unwrap_or(config.motion);
    let cfg_json = serde_json::json!({
        "train": config,
        "mode": if a.mode == EvalMode::Cross { "cross" } else { "self" },
        "refs": a.refs_count,
        "motion": mode,
        "sequences": data.len(),
    });
    let report = match a.mode {
        EvalMode::SelfReenact => self_reenact_eval(&model, &data, a.refs_count, mode, cfg_json)?,
        EvalMode::Cross => {
            let pairs = default_pairs(&data);
            if pairs.is_empty() {
                bail!("cross-reenactment needs at least two sequences");
            }
            let opts = CrossOptions { refs: a.refs_count, mode, allow_same: false };
            cross_reenact_eval(&model, &data, &pairs, &opts, cfg_json)?
        }
    };
    for r in report.rows.iter().chain(&report.baseline) {
        println!("{}", serde_json::to_string(r)?);
    }
    write_json(&a.report, &report)
}

fn run_ablate(a: Ablate) -> Result<()> {
    let base = read_config(&a.config)?;
    let tables = a.axes.iter().map(|s| parse_axes(s)).collect::<Result<Vec<_>, _>>()?;
    if !(0.0..1.0).contains(&a.held_out) || a.held_out == 0.0 {
        bail!("--held-out must lie in (0, 1)");
    }
    let data = read_data(&a.data, base.model.image_size)?;
    let n_eval = ((data.len() as f64 * a.held_out).round() as usize).clamp(1, data.len().saturating_sub(1));
    if data.len() < 2 {
        bail!("ablation needs at least two sequences");
    }
    let (train, held_out) = data.split_at(data.len() - n_eval);
    eprintln!("ablation: {} training and {} held-out sequences", train.len(), held_out.len());
    let report = ablate(&base, &tables, train, held_out, |name, row| {
        eprintln!("{name}: PSNR {:?} SSIM {:?} L1 {:?}", row.psnr, row.ssim, row.l1);
    })?;
    print!("{}", report.markdown());
    write_json(&a.report, &report)
}

fn gradcheck(a: Gradcheck) -> Result<ExitCode> {
    let names: Vec<&str> = match &a.op {
        Some(op) if op == PIPELINE || KERNELS.contains(&op.as_str()) => vec![op.as_str()],
        Some(op) => bail!("unknown op `{op}`; known: {}, {PIPELINE}", KERNELS.join(", ")),
        None => KERNELS.iter().copied().chain([PIPELINE]).collect(),
    };
    let precisions = match a.precision {
        Some(p) => vec![p],
        None => vec![Precision::F32, Precision::F64],
    };
    let mut failures = 0;
    for &p in &precisions {
        for &name in &names {
            let r = run_check(name, p, a.seeds, a.tol)?;
            println!(
                "{} {:<22} {:?} worst {:.3e} tol {:.0e} over {} seeds",
                if r.passed { "PASS" } else { "FAIL" },
                r.name,
                r.precision,
                r.worst,
                r.tolerance,
                r.seeds
            );
            failures += usize::from(!r.passed);
        }
    }
    if failures > 0 {
        eprintln!("{failures} gradient check(s) failed");
        return Ok(ExitCode::FAILURE);
    }
    Ok(ExitCode::SUCCESS)
}
