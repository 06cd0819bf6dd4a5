//! Two-phase training: an attention-only warm-up followed by joint
//! optimization of every sub-network.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bundle::{Bundle, IntoEntry};
use crate::data::{frame_inputs, MotionMode, SequenceRecord};
use crate::encoding::{encode_motion_on, motion_targets};
use crate::error::{invalid, Error, Result};
use crate::loss::{self, LossBreakdown, LossWeights, Role};
use crate::model::{ForwardOptions, Model, ModelConfig};
use crate::ops::Op;
use crate::optim::{Adam, AdamConfig};
use crate::params::{ParamStore, ParamVars};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tape::{Gradients, Tape};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub epochs: usize,
    /// Defaults to a fifth of `epochs` when absent.
    pub warmup_epochs: Option<usize>,
    pub batch_size: usize,
    pub seed: u64,
    /// Training pairs drawn from each sequence per epoch.
    pub samples_per_sequence: usize,
    /// Reference count `R`.
    pub refs: usize,
    pub motion: MotionMode,
    /// Weight of the supervised motion-encoder regression (joint phase only).
    pub motion_weight: f64,
    pub adam: AdamConfig,
    pub loss: LossWeights,
    pub discriminator: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            epochs: 150,
            warmup_epochs: None,
            batch_size: 4,
            seed: 0,
            samples_per_sequence: 1,
            refs: 1,
            motion: MotionMode::Oracle,
            motion_weight: 1.0,
            adam: AdamConfig::default(),
            loss: LossWeights::default(),
            discriminator: false,
        }
    }
}

impl TrainConfig {
    /// Desk-scale run: smoke model geometry, 3 warm-up and 12 joint epochs of
    /// single-pair steps, two pairs per sequence and epoch.
    pub fn smoke() -> Self {
        Self {
            model: ModelConfig::smoke(),
            epochs: 15,
            warmup_epochs: Some(3),
            batch_size: 1,
            samples_per_sequence: 2,
            ..Self::default()
        }
    }

    pub fn warmup(&self) -> usize {
        self.warmup_epochs.unwrap_or(self.epochs / 5)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.adam.validate()?;
        self.loss.validate()?;
        if self.warmup() > self.epochs {
            return invalid("warmup_epochs must not exceed epochs");
        }
        if self.batch_size == 0 || self.samples_per_sequence == 0 {
            return invalid("batch_size and samples_per_sequence must be positive");
        }
        if self.refs == 0 || self.refs > self.model.max_refs {
            return invalid(format!("refs must lie in 1..={}", self.model.max_refs));
        }
        if !(self.motion_weight >= 0.0 && self.motion_weight.is_finite()) {
            return invalid("motion_weight must be finite and non-negative");
        }
        if self.loss.adversarial > 0.0 && !self.discriminator {
            return invalid("an adversarial weight needs the discriminator enabled");
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    /// FNV-1a of the canonical JSON form.
    pub fn hash(&self) -> u64 {
        self.to_json().bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Warmup,
    Joint,
}

impl Phase {
    /// Whether a parameter is updated by the generator objective in this phase.
    pub fn trains(self, name: &str) -> bool {
        match self {
            Phase::Warmup => name.starts_with("rac.") || name.starts_with("dec."),
            Phase::Joint => !name.starts_with("disc."),
        }
    }
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub phase: Phase,
    pub steps: usize,
    pub samples: usize,
    pub total: f64,
    pub reconstruction: f64,
    pub perceptual: f64,
    pub adversarial: f64,
    pub motion: f64,
    pub discriminator: f64,
}

/// Model, optimizer and progress of a training run.
#[derive(Debug, Clone)]
pub struct Trainer<T> {
    pub config: TrainConfig,
    pub model: Model<T>,
    pub adam: Adam<T>,
    pub epoch: usize,
}

fn collect_grads<T: Scalar>(
    acc: &mut BTreeMap<String, Tensor<T>>,
    grads: &Gradients<T>,
    pv: &ParamVars,
    only: impl Fn(&str) -> bool,
) -> Result<()> {
    for (name, var) in pv.iter() {
        if !only(name) {
            continue;
        }
        if let Some(g) = grads.get(var) {
            match acc.get_mut(name) {
                Some(a) => a.add_assign(g)?,
                None => {
                    acc.insert(name.to_string(), g.clone());
                }
            }
        }
    }
    Ok(())
}

fn scalar_of<T: Scalar>(t: &Tensor<T>) -> f64 {
    t.item().to_f64().unwrap_or(f64::NAN)
}

impl<T: Scalar> Trainer<T>
where
    Tensor<T>: IntoEntry,
{
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let rng = Rng::new(config.seed);
        let mut model = Model::new(config.model.clone(), &mut rng.fork(0x6d6f64656c))?;
        if config.discriminator {
            loss::init_discriminator(&mut model.params, &mut rng.fork(0x64697363))?;
        }
        let adam = Adam::new(config.adam);
        Ok(Self { config, model, adam, epoch: 0 })
    }

    pub fn phase(&self, epoch: usize) -> Phase {
        if epoch < self.config.warmup() {
            Phase::Warmup
        } else {
            Phase::Joint
        }
    }

    /// Samples of one epoch as `(sequence, source, driving)` in visiting order.
    fn schedule(&self, data: &[SequenceRecord<T>], epoch: usize) -> Vec<(usize, usize, usize)> {
        let mut rng = Rng::new(self.config.seed).fork(1000 + epoch as u64);
        let mut out = Vec::new();
        for (i, rec) in data.iter().enumerate() {
            for _ in 0..self.config.samples_per_sequence {
                let n = rec.len();
                let src = rng.below(n);
                let drv = (src + 1 + rng.below(n - 1)) % n;
                out.push((i, src, drv));
            }
        }
        rng.shuffle(&mut out);
        out
    }

    /// Generator loss and gradients for one sample.
    fn sample_grads(
        &self,
        rec: &SequenceRecord<T>,
        src: usize,
        drv: usize,
        phase: Phase,
        acc: &mut BTreeMap<String, Tensor<T>>,
    ) -> Result<(LossBreakdown, f64)> {
        let cfg = &self.config;
        let inputs = frame_inputs(&self.model, rec, src, drv, cfg.refs, cfg.motion)?;
        let mut tape = Tape::new();
        let pv = self.model.params.bind(&mut tape);
        let opts = ForwardOptions { force_mask_zero: phase == Phase::Warmup };
        let out = self.model.forward_on(&mut tape, &pv, &inputs, opts)?;
        let gt = tape.constant(rec.frames[drv].clone());
        let disc = cfg.discriminator.then_some(&pv);
        let l = loss::total_loss_on(&mut tape, out.image, gt, &cfg.loss, disc)?;
        let breakdown = l.breakdown(&tape);
        if !breakdown.total.is_finite() {
            return Err(Error::Divergence(format!("non-finite loss at epoch {}", self.epoch)));
        }
        let grads = tape.backward(l.total)?;
        collect_grads(acc, &grads, &pv, |n| phase.trains(n))?;

        let mut motion = 0.0;
        if phase == Phase::Joint && cfg.motion_weight > 0.0 {
            let mut tape = Tape::new();
            let pv = self.model.params.bind(&mut tape);
            let img = tape.constant(rec.frames[drv].clone());
            let head = encode_motion_on(&mut tape, &pv, &cfg.model, img)?;
            let target = tape.constant(motion_targets(&rec.canonical, &rec.params[drv])?);
            let l1 = tape.apply(Op::L1, &[head, target])?;
            let weighted = tape.apply1(Op::Scale(cfg.motion_weight), l1)?;
            motion = scalar_of(tape.value(l1));
            let grads = tape.backward(weighted)?;
            collect_grads(acc, &grads, &pv, |n| n.starts_with("enc.mot."))?;
        }
        Ok((breakdown, motion))
    }

    /// Hinge loss and gradients for the discriminator on one sample.
    fn disc_grads(&self, rec: &SequenceRecord<T>, src: usize, drv: usize, acc: &mut BTreeMap<String, Tensor<T>>) -> Result<f64> {
        let cfg = &self.config;
        let inputs = frame_inputs(&self.model, rec, src, drv, cfg.refs, cfg.motion)?;
        let fake = self.model.animate(&inputs)?.image;
        let mut tape = Tape::new();
        let pv = self.model.params.bind(&mut tape);
        let fake = tape.constant(fake);
        let real = tape.constant(rec.frames[drv].clone());
        let l = loss::adversarial_loss_on(&mut tape, Some(&pv), fake, real, Role::Discriminator)?;
        let grads = tape.backward(l)?;
        collect_grads(acc, &grads, &pv, |n| n.starts_with("disc."))?;
        Ok(scalar_of(tape.value(l)))
    }

    fn apply(&mut self, mut grads: BTreeMap<String, Tensor<T>>, n: usize, rule: impl Fn(&str) -> bool) -> Result<()> {
        let inv = T::one() / T::from(n).expect("batch size");
        for g in grads.values_mut() {
            g.scale_in_place(inv);
        }
        self.model.params.set_trainable(rule);
        let r = self.adam.step(&mut self.model.params, &grads);
        self.model.params.set_trainable(|_| true);
        r
    }

    /// Runs one epoch and advances the epoch counter.
    pub fn run_epoch(&mut self, data: &[SequenceRecord<T>]) -> Result<EpochMetrics> {
        if data.is_empty() {
            return invalid("training dataset is empty");
        }
        for rec in data {
            rec.validate()?;
        }
        let epoch = self.epoch;
        let phase = self.phase(epoch);
        let schedule = self.schedule(data, epoch);
        let mut sum = LossBreakdown::default();
        let (mut motion, mut disc) = (0.0, 0.0);
        let mut steps = 0;
        for batch in schedule.chunks(self.config.batch_size) {
            let mut acc = BTreeMap::new();
            for &(i, s, d) in batch {
                let (b, m) = self.sample_grads(&data[i], s, d, phase, &mut acc)?;
                sum.add(&b);
                motion += m;
            }
            self.apply(acc, batch.len(), |n| phase.trains(n))?;
            if self.config.discriminator && phase == Phase::Joint {
                let mut acc = BTreeMap::new();
                for &(i, s, d) in batch {
                    disc += self.disc_grads(&data[i], s, d, &mut acc)?;
                }
                self.apply(acc, batch.len(), |n| n.starts_with("disc."))?;
            }
            steps += 1;
        }
        let n = schedule.len() as f64;
        let mean = sum.scaled(1.0 / n);
        self.epoch += 1;
        Ok(EpochMetrics {
            epoch,
            phase,
            steps,
            samples: schedule.len(),
            total: mean.total,
            reconstruction: mean.reconstruction,
            perceptual: mean.perceptual,
            adversarial: mean.adversarial,
            motion: motion / n,
            discriminator: disc / n,
        })
    }

    /// Trains for the remaining epochs. After every epoch the checkpoint at
    /// `ckpt` is replaced and a line is appended to `log`; an epoch that
    /// diverges leaves the last good checkpoint in place.
    pub fn train(
        &mut self,
        data: &[SequenceRecord<T>],
        ckpt: Option<&Path>,
        log: Option<&Path>,
        mut on_epoch: impl FnMut(&EpochMetrics),
    ) -> Result<Vec<EpochMetrics>> {
        if data.is_empty() {
            return invalid("training dataset is empty");
        }
        let mut log = match log {
            Some(p) => Some(fs::OpenOptions::new().create(true).append(true).open(p)?),
            None => None,
        };
        let mut all = Vec::new();
        while self.epoch < self.config.epochs {
            let m = self.run_epoch(data)?;
            if let Some(f) = log.as_mut() {
                writeln!(f, "{}", serde_json::to_string(&m)?)?;
            }
            if let Some(p) = ckpt {
                self.to_bundle().save(p)?;
            }
            on_epoch(&m);
            all.push(m);
        }
        Ok(all)
    }

    pub fn to_bundle(&self) -> Bundle {
        let mut b = Bundle::new();
        self.model.params.write_into(&mut b);
        self.adam.write_into(&mut b);
        let json = self.config.to_json();
        let bytes: Vec<f32> = json.bytes().map(f32::from).collect();
        let n = bytes.len();
        b.insert("meta.config", Tensor::new(&[n], bytes).expect("non-empty config"));
        let h = self.config.hash();
        b.insert("meta.config_hash", Tensor::<f64>::from_f64(&[2], &[(h >> 32) as f64, (h & 0xffff_ffff) as f64]).expect("shape"));
        b.insert("meta.epoch", Tensor::<f64>::scalar(self.epoch as f64));
        b
    }

    pub fn from_bundle(b: &Bundle) -> Result<Self> {
        let config = config_from_bundle(b)?;
        let mut t = Self::new(config)?;
        t.model.params.read_from(b)?;
        t.adam.read_from(b)?;
        t.epoch = b.tensor::<f64>("meta.epoch")?.item() as usize;
        Ok(t)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bundle(&Bundle::load(path)?)
    }
}

/// Recovers and verifies the training configuration stored in a checkpoint.
pub fn config_from_bundle(b: &Bundle) -> Result<TrainConfig> {
    let raw: Tensor<f32> = b.tensor("meta.config")?;
    let bytes: Vec<u8> = raw.data().iter().map(|&v| v as u8).collect();
    let text = String::from_utf8(bytes).map_err(|e| Error::Format(format!("config is not UTF-8: {e}")))?;
    let config = TrainConfig::from_json(&text)?;
    let h: Tensor<f64> = b.tensor("meta.config_hash")?;
    let stored = ((h.data()[0] as u64) << 32) | h.data()[1] as u64;
    if stored != config.hash() {
        return Err(Error::Format("checkpoint config hash mismatch".into()));
    }
    Ok(config)
}

/// Loads only the model from a checkpoint.
pub fn load_model<T: Scalar>(path: impl AsRef<Path>) -> Result<Model<T>> {
    let b = Bundle::load(path)?;
    let config = config_from_bundle(&b)?;
    let mut model = Model::new(config.model.clone(), &mut Rng::new(config.seed))?;
    if config.discriminator {
        loss::init_discriminator(&mut model.params, &mut Rng::new(0))?;
    }
    model.params.read_from(&b)?;
    Ok(model)
}

/// Parameters that differ bitwise between two stores.
pub fn changed_params<T: Scalar>(a: &ParamStore<T>, b: &ParamStore<T>) -> Vec<String> {
    a.iter()
        .filter(|(name, p)| match b.get(name) {
            Ok(q) => p.value.data().iter().zip(q.data()).any(|(x, y)| x.to_bits_u64() != y.to_bits_u64()),
            Err(_) => true,
        })
        .map(|(n, _)| n.to_string())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_defaults_and_strictness() {
        let c = TrainConfig::from_json("{}").unwrap();
        assert_eq!(c.warmup(), 30);
        assert_eq!(c.batch_size, 4);
        assert!(TrainConfig::from_json(r#"{"epochs": 3, "typo": 1}"#).is_err());
        assert!(TrainConfig::from_json(r#"{"epochs": 3, "warmup_epochs": 4}"#).is_err());
        assert!(TrainConfig::from_json(r#"{"adam": {"lr": 0.001}}"#).is_ok());
    }

    #[test]
    fn smoke_file_matches_preset() {
        let text = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/smoke.json")).unwrap();
        assert_eq!(TrainConfig::from_json(&text).unwrap(), TrainConfig::smoke());
    }

    #[test]
    fn hash_tracks_content() {
        let a = TrainConfig::smoke();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.seed = 9;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn phase_membership() {
        assert!(Phase::Warmup.trains("rac.kp.l0.weight"));
        assert!(Phase::Warmup.trains("dec.out.bias"));
        assert!(!Phase::Warmup.trains("dofw.l0.weight"));
        assert!(!Phase::Warmup.trains("cgf.mask.l0.weight"));
        assert!(Phase::Joint.trains("dofw.l0.weight"));
        assert!(!Phase::Joint.trains("disc.l0.weight"));
    }
}
