//! Ground-truth sequences and the assembly of pipeline inputs from them.

use serde::{Deserialize, Serialize};

use crate::encoding::{self, transform_keypoints, KeypointSet, MotionParams, MotionSource};
use crate::error::{invalid, Result};
use crate::model::{FrameInputs, Model};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// One rendered sequence with the exact parameters it was rendered from.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceRecord<T> {
    pub id: usize,
    pub seed: u64,
    pub canonical: KeypointSet<T>,
    pub params: Vec<MotionParams<T>>,
    pub frames: Vec<Tensor<T>>,
}

impl<T: Scalar> SequenceRecord<T> {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames.len() < 2 || self.frames.len() != self.params.len() {
            return invalid(format!(
                "sequence {} has {} frames and {} parameter sets",
                self.id,
                self.frames.len(),
                self.params.len()
            ));
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> SequenceRecord<U> {
        SequenceRecord {
            id: self.id,
            seed: self.seed,
            canonical: KeypointSet::new(self.canonical.tensor().cast()).expect("finite keypoints"),
            params: self.params.iter().map(MotionParams::cast).collect(),
            frames: self.frames.iter().map(Tensor::cast).collect(),
        }
    }
}

/// Source of the motion parameters fed to the generator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum MotionMode {
    /// Ground-truth parameters from the generator of the data.
    #[default]
    Oracle,
    /// Parameters predicted by the motion encoder.
    Network,
}

/// Reference frame indices: the source itself, then `r − 1` frames spread
/// evenly over the sequence with the source and driving frames removed.
pub fn reference_frames(len: usize, source: usize, driving: usize, r: usize) -> Result<Vec<usize>> {
    if r == 0 {
        return invalid("at least one reference is required");
    }
    if source >= len || driving >= len {
        return invalid(format!("frame index out of range for a {len}-frame sequence"));
    }
    let pool: Vec<usize> = (0..len).filter(|&i| i != source && i != driving).collect();
    let extra = r - 1;
    if extra > pool.len() {
        return invalid(format!("{r} references requested but only {} distinct frames are available", pool.len() + 1));
    }
    let mut out = vec![source];
    out.extend((0..extra).map(|i| pool[(2 * i + 1) * pool.len() / (2 * extra)]));
    Ok(out)
}

/// Builds pipeline inputs for animating `driving` from `source` within one
/// sequence. The driving keypoints always derive from the source's canonical
/// keypoints.
pub fn frame_inputs<T: Scalar>(
    model: &Model<T>,
    record: &SequenceRecord<T>,
    source: usize,
    driving: usize,
    refs: usize,
    mode: MotionMode,
) -> Result<FrameInputs<T>> {
    let idx = reference_frames(record.len(), source, driving, refs)?;
    let cfg = &model.config;
    let motion = |i: usize| -> Result<(KeypointSet<T>, MotionParams<T>)> {
        match mode {
            MotionMode::Oracle => Ok((record.canonical.clone(), record.params[i].clone())),
            MotionMode::Network => {
                encoding::encode_motion(&record.frames[i], cfg, MotionSource::Network(&model.params))
            }
        }
    };
    let (canonical, ps) = motion(source)?;
    let (_, pd) = motion(driving)?;
    let x_s = transform_keypoints(&canonical, &ps)?;
    let x_d = transform_keypoints(&canonical, &pd)?;
    let mut references = Vec::with_capacity(idx.len());
    for &i in &idx {
        let kp = if i == source { x_s.clone() } else { transform_keypoints(&canonical, &motion(i)?.1)? };
        references.push((record.frames[i].clone(), kp));
    }
    Ok(FrameInputs { source: record.frames[source].clone(), x_s, x_d, refs: references })
}

/// Inputs for driving `source_record`'s frame `source` with another
/// sequence's motion. The source's canonical keypoints are kept; only pose
/// and expression come from the driver.
pub fn cross_frame_inputs<T: Scalar>(
    model: &Model<T>,
    source_record: &SequenceRecord<T>,
    source: usize,
    driving_params: &MotionParams<T>,
    refs: usize,
    mode: MotionMode,
) -> Result<FrameInputs<T>> {
    let mut inputs = frame_inputs(model, source_record, source, source, refs, mode)?;
    let canonical = match mode {
        MotionMode::Oracle => source_record.canonical.clone(),
        MotionMode::Network => {
            encoding::encode_motion(&source_record.frames[source], &model.config, MotionSource::Network(&model.params))?.0
        }
    };
    inputs.x_d = transform_keypoints(&canonical, driving_params)?;
    Ok(inputs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_reference_is_the_source() {
        assert_eq!(reference_frames(20, 0, 7, 1).unwrap(), vec![0]);
    }

    #[test]
    fn extra_references_skip_source_and_driving() {
        for d in 0..10 {
            let r = reference_frames(10, 0, d, 4).unwrap();
            assert_eq!(r.len(), 4);
            assert_eq!(r[0], 0);
            assert!(r[1..].iter().all(|&i| i != 0 && i != d));
            let mut u = r.clone();
            u.dedup();
            assert_eq!(u, r);
        }
        assert_eq!(reference_frames(20, 0, 5, 2).unwrap(), vec![0, 11]);
    }

    #[test]
    fn too_many_references_rejected() {
        assert!(reference_frames(3, 0, 1, 3).is_err());
        assert!(reference_frames(3, 0, 1, 2).is_ok());
        assert!(reference_frames(3, 0, 1, 0).is_err());
    }
}
