//! On-disk dataset layout: `DIR/seq_NNNN/{frame_NNNN.ppm, frame_NNNN.swnb, meta.swnb}`.

use std::fs;
use std::io::{BufRead, BufReader, Read};
use std::path::{Path, PathBuf};

use synwarp_core::bundle::Bundle;
use synwarp_core::data::SequenceRecord;
use synwarp_core::encoding::{KeypointSet, MotionParams};
use synwarp_core::error::{Error, Result};
use synwarp_core::{Scalar, Tensor};

use crate::scene::{gen_indexed, MotionAmplitude, SyntheticSceneSpec};

pub fn sequence_dir(root: &Path, id: usize) -> PathBuf {
    root.join(format!("seq_{id:04}"))
}

/// Writes a `3×H×W` image in `[0, 1]` as binary PPM.
pub fn write_ppm<T: Scalar>(path: &Path, img: &Tensor<T>) -> Result<()> {
    let s = img.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::InvalidArgument(format!("PPM needs a 3×H×W image, got {s:?}")));
    }
    let (h, w) = (s[1], s[2]);
    let mut bytes = format!("P6\n{w} {h}\n255\n").into_bytes();
    for i in 0..h * w {
        for c in 0..3 {
            bytes.push(quantize(img.data()[c * h * w + i]));
        }
    }
    fs::write(path, bytes)?;
    Ok(())
}

/// Writes a single-channel map in `[0, 1]` (any `1×…×H×W` shape) as binary PGM.
pub fn write_pgm<T: Scalar>(path: &Path, map: &Tensor<T>) -> Result<()> {
    let s = map.shape();
    if s.len() < 2 || s[..s.len() - 2].iter().product::<usize>() != 1 {
        return Err(Error::InvalidArgument(format!("PGM needs a single-channel map, got {s:?}")));
    }
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    let mut bytes = format!("P5\n{w} {h}\n255\n").into_bytes();
    bytes.extend(map.data().iter().map(|&v| quantize(v)));
    fs::write(path, bytes)?;
    Ok(())
}

fn quantize<T: Scalar>(v: T) -> u8 {
    (v.to_f64().unwrap_or(0.0).clamp(0.0, 1.0) * 255.0).round() as u8
}

fn header_token(r: &mut impl BufRead) -> Result<String> {
    let mut tok = String::new();
    loop {
        let mut b = [0u8; 1];
        if r.read(&mut b)? == 0 {
            break;
        }
        let c = b[0] as char;
        if c == '#' && tok.is_empty() {
            let mut skip = String::new();
            r.read_line(&mut skip)?;
        } else if c.is_ascii_whitespace() {
            if !tok.is_empty() {
                break;
            }
        } else {
            tok.push(c);
        }
    }
    Ok(tok)
}

/// Reads a binary PPM (maxval 255) into a `3×H×W` image in `[0, 1]`.
pub fn read_ppm<T: Scalar>(path: &Path) -> Result<Tensor<T>> {
    let mut r = BufReader::new(fs::File::open(path)?);
    let bad = |m: &str| Error::Format(format!("{}: {m}", path.display()));
    if header_token(&mut r)? != "P6" {
        return Err(bad("not a binary PPM"));
    }
    let mut num = || -> Result<usize> { header_token(&mut r)?.parse().map_err(|_| bad("bad header")) };
    let (w, h, max) = (num()?, num()?, num()?);
    if max != 255 || w == 0 || h == 0 {
        return Err(bad("only 8-bit PPM is supported"));
    }
    let mut raw = vec![0u8; 3 * w * h];
    r.read_exact(&mut raw)?;
    let mut data = vec![T::zero(); 3 * w * h];
    for i in 0..w * h {
        for c in 0..3 {
            data[c * w * h + i] = T::from(raw[3 * i + c] as f64 / 255.0).expect("finite");
        }
    }
    Tensor::new(&[3, h, w], data)
}

/// Reads a frame, preferring the exact bundle next to the PPM.
pub fn read_image<T: Scalar>(path: &Path) -> Result<Tensor<T>> {
    let exact = path.with_extension("swnb");
    if exact.exists() {
        return Bundle::load(&exact)?.tensor("image");
    }
    read_ppm(path)
}

fn params_to_bundle(b: &mut Bundle, rec: &SequenceRecord<f64>) -> Result<()> {
    let t = rec.params.len();
    let k = rec.canonical.count();
    let mut angles = Vec::with_capacity(3 * t);
    let mut trans = Vec::with_capacity(3 * t);
    let mut delta = Vec::with_capacity(3 * k * t);
    let mut scale = Vec::with_capacity(t);
    for p in &rec.params {
        angles.extend([p.yaw, p.pitch, p.roll]);
        trans.extend(p.translation);
        delta.extend_from_slice(p.delta.data());
        scale.push(p.scale);
    }
    b.insert("params.angles", Tensor::new(&[t, 3], angles)?);
    b.insert("params.translation", Tensor::new(&[t, 3], trans)?);
    b.insert("params.delta", Tensor::new(&[t, k, 3], delta)?);
    b.insert("params.scale", Tensor::new(&[t], scale)?);
    b.insert("canonical", rec.canonical.tensor().clone());
    b.insert("id", Tensor::<f64>::scalar(rec.id as f64));
    let s = rec.seed;
    b.insert("seed", Tensor::<f64>::from_f64(&[2], &[(s >> 32) as f64, (s & 0xffff_ffff) as f64])?);
    Ok(())
}

fn scene_to_bundle(b: &mut Bundle, spec: &SyntheticSceneSpec) -> Result<()> {
    let k = spec.keypoints;
    b.insert("scene.palette", Tensor::new(&[k, 3], spec.palette.concat())?);
    b.insert("scene.head_color", Tensor::new(&[3], spec.head_color.to_vec())?);
    b.insert("scene.background", Tensor::new(&[3, 3], spec.background.concat())?);
    let a = spec.amplitude;
    let scalars = [
        spec.image_size as f64,
        spec.blob_radius,
        spec.head_axes[0],
        spec.head_axes[1],
        spec.smoothness,
        spec.step_cap,
        a.yaw,
        a.pitch,
        a.roll,
        a.translation_xy,
        a.translation_z,
        a.delta,
        a.log_scale,
    ];
    b.insert("scene.scalars", Tensor::new(&[scalars.len()], scalars.to_vec())?);
    Ok(())
}

fn scene_from_bundle(b: &Bundle) -> Result<SyntheticSceneSpec> {
    let palette: Tensor<f64> = b.tensor("scene.palette")?;
    let head: Tensor<f64> = b.tensor("scene.head_color")?;
    let bg: Tensor<f64> = b.tensor("scene.background")?;
    let s: Tensor<f64> = b.tensor("scene.scalars")?;
    let s = s.data();
    if s.len() != 13 || bg.len() != 9 || head.len() != 3 || palette.ndim() != 2 || palette.shape()[1] != 3 {
        return Err(Error::Format("malformed scene description".into()));
    }
    let rgb = |v: &[f64]| [v[0], v[1], v[2]];
    Ok(SyntheticSceneSpec {
        keypoints: palette.shape()[0],
        image_size: s[0] as usize,
        palette: palette.data().chunks_exact(3).map(rgb).collect(),
        head_color: rgb(head.data()),
        background: [rgb(&bg.data()[0..3]), rgb(&bg.data()[3..6]), rgb(&bg.data()[6..9])],
        blob_radius: s[1],
        head_axes: [s[2], s[3]],
        smoothness: s[4],
        step_cap: s[5],
        amplitude: MotionAmplitude {
            yaw: s[6],
            pitch: s[7],
            roll: s[8],
            translation_xy: s[9],
            translation_z: s[10],
            delta: s[11],
            log_scale: s[12],
        },
    })
}

/// Writes one sequence with its scene description.
pub fn write_sequence(root: &Path, spec: &SyntheticSceneSpec, rec: &SequenceRecord<f64>) -> Result<()> {
    let dir = sequence_dir(root, rec.id);
    fs::create_dir_all(&dir)?;
    for (t, img) in rec.frames.iter().enumerate() {
        write_ppm(&dir.join(format!("frame_{t:04}.ppm")), img)?;
        let mut b = Bundle::new();
        b.insert("image", img.cast::<f32>());
        b.save(dir.join(format!("frame_{t:04}.swnb")))?;
    }
    let mut meta = Bundle::new();
    params_to_bundle(&mut meta, rec)?;
    scene_to_bundle(&mut meta, spec)?;
    meta.save(dir.join("meta.swnb"))
}

/// Reads one sequence directory.
pub fn read_sequence(dir: &Path) -> Result<(SyntheticSceneSpec, SequenceRecord<f64>)> {
    let meta = Bundle::load(dir.join("meta.swnb"))?;
    let angles: Tensor<f64> = meta.tensor("params.angles")?;
    let trans: Tensor<f64> = meta.tensor("params.translation")?;
    let delta: Tensor<f64> = meta.tensor("params.delta")?;
    let scale: Tensor<f64> = meta.tensor("params.scale")?;
    let canonical = KeypointSet::new(meta.tensor("canonical")?)?;
    let t = scale.len();
    let k = canonical.count();
    if angles.shape() != [t, 3] || trans.shape() != [t, 3] || delta.shape() != [t, k, 3] {
        return Err(Error::Format(format!("{}: inconsistent motion parameters", dir.display())));
    }
    let mut params = Vec::with_capacity(t);
    let mut frames = Vec::with_capacity(t);
    for i in 0..t {
        let a = angles.outer(i);
        let tr = trans.outer(i);
        params.push(MotionParams {
            yaw: a[0],
            pitch: a[1],
            roll: a[2],
            translation: [tr[0], tr[1], tr[2]],
            delta: Tensor::new(&[k, 3], delta.outer(i).to_vec())?,
            scale: scale.data()[i],
        });
        frames.push(read_image(&dir.join(format!("frame_{i:04}.ppm")))?);
    }
    let seed: Tensor<f64> = meta.tensor("seed")?;
    let rec = SequenceRecord {
        id: meta.tensor::<f64>("id")?.item() as usize,
        seed: ((seed.data()[0] as u64) << 32) | seed.data()[1] as u64,
        canonical,
        params,
        frames,
    };
    Ok((scene_from_bundle(&meta)?, rec))
}

/// Reads every `seq_*` directory under `root` in id order.
pub fn read_dataset(root: &Path) -> Result<Vec<SequenceRecord<f64>>> {
    Ok(read_dataset_with_scenes(root)?.into_iter().map(|(_, r)| r).collect())
}

pub fn read_dataset_with_scenes(root: &Path) -> Result<Vec<(SyntheticSceneSpec, SequenceRecord<f64>)>> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir() && p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.starts_with("seq_")))
        .collect();
    dirs.sort();
    dirs.iter().map(|d| read_sequence(d)).collect()
}

/// Generation settings for a whole dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DatasetSpec {
    pub sequences: usize,
    pub frames: usize,
    pub size: usize,
    pub keypoints: usize,
    pub seed: u64,
    /// Id of the first sequence, so held-out sets can continue a training set.
    pub first_id: usize,
}

pub fn generate(spec: &DatasetSpec) -> Result<Vec<(SyntheticSceneSpec, SequenceRecord<f64>)>> {
    (spec.first_id..spec.first_id + spec.sequences)
        .map(|id| gen_indexed(spec.seed, id, spec.frames, spec.keypoints, spec.size))
        .collect()
}

pub fn write_dataset(root: &Path, seqs: &[(SyntheticSceneSpec, SequenceRecord<f64>)]) -> Result<()> {
    fs::create_dir_all(root)?;
    for (spec, rec) in seqs {
        write_sequence(root, spec, rec)?;
    }
    Ok(())
}
