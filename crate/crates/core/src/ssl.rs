//! Masked-latent prediction.
//!
//! An EMA teacher encodes the unmasked input; the student sees the same
//! front-end output with masked frames replaced by the learned mask
//! embedding and regresses the teacher's final-layer latents at the masked
//! frames. Targets are instance-normalised over time, so utterance-level
//! constants (speaker, channel) cannot solve the task on their own.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Corpus;
use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::numerics::{Adam, AdamConfig, Graph, ParamStore, Tensor, Var};
use crate::report::CsvTable;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MaskSpec {
    pub p_start: f64,
    pub span: usize,
}

impl Default for MaskSpec {
    fn default() -> Self {
        Self {
            p_start: 0.15,
            span: 3,
        }
    }
}

impl MaskSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p_start) {
            return Err(Error::Config(format!("mask p_start {} outside [0, 1]", self.p_start)));
        }
        if self.span == 0 {
            return Err(Error::Config("mask span must be at least 1".into()));
        }
        Ok(())
    }

    /// Probability that frame `i` of `t` is covered by at least one span
    /// (ignoring the forced-span rule).
    pub fn coverage(&self, i: usize, t: usize) -> f64 {
        let starts = (i + 1).min(self.span).min(t);
        1.0 - (1.0 - self.p_start).powi(starts as i32)
    }
}

/// Union of spans: each frame starts a span of `spec.span` frames with
/// probability `spec.p_start`. If nothing gets masked, one span of length
/// `min(span, t)` is placed at a uniform start.
pub fn sample_mask<R: Rng + ?Sized>(t: usize, spec: &MaskSpec, rng: &mut R) -> Vec<bool> {
    let mut mask = vec![false; t];
    for i in 0..t {
        if rng.random::<f64>() < spec.p_start {
            for m in &mut mask[i..(i + spec.span).min(t)] {
                *m = true;
            }
        }
    }
    if t > 0 && !mask.contains(&true) {
        let len = spec.span.min(t);
        let start = rng.random_range(0..=t - len);
        for m in &mut mask[start..start + len] {
            *m = true;
        }
    }
    mask
}

/// Exponential-moving-average copy of the pretrained encoder parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct TeacherState {
    pub params: ParamStore,
    pub decay: f64,
}

impl TeacherState {
    /// Shadow of every pretrained-encoder parameter of `student`.
    pub fn from_student(student: &ParamStore, decay: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&decay) {
            return Err(Error::Config(format!("EMA decay {decay} outside [0, 1]")));
        }
        let mut params = student.filter_groups(|g| g.is_pretrained_encoder());
        params.set_all_trainable(false);
        Ok(Self { params, decay })
    }

    /// `shadow <- decay * shadow + (1 - decay) * student` for every shadow entry.
    pub fn ema_update(&mut self, student: &ParamStore) -> Result<()> {
        for (name, _) in self.params.iter() {
            let s = student.value(name)?;
            let t = self.params.value(name)?;
            if s.shape() != t.shape() {
                return Err(Error::shape(format!(
                    "teacher `{name}` {:?} vs student {:?}",
                    t.shape(),
                    s.shape()
                )));
            }
        }
        let tau = self.decay;
        for (name, p) in self.params.iter_mut() {
            let s = student.value(name)?;
            for (t, &s) in p.value.data_mut().iter_mut().zip(s.data()) {
                *t = tau * *t + (1.0 - tau) * s;
            }
        }
        Ok(())
    }

    /// Final-layer latents of the unmasked input, normalised per channel over time.
    pub fn targets(&self, encoder: &Encoder, features: &Tensor) -> Result<Tensor> {
        let mut g = Graph::no_grad(&self.params);
        let out = encoder.base().forward(&mut g, features, None)?;
        let y = g.instance_norm(out.last());
        g.check_finite()?;
        Ok(g.value(y).clone())
    }
}

/// Student pass with `mask` applied, regressed onto precomputed `targets`.
pub fn ssl_loss_against(
    g: &mut Graph,
    encoder: &Encoder,
    features: &Tensor,
    targets: &Tensor,
    mask: &[bool],
) -> Result<Var> {
    if !mask.contains(&true) {
        return Err(Error::Config("SSL loss needs at least one masked frame".into()));
    }
    let out = encoder.forward(g, features, Some(mask))?;
    let pred = out.last();
    if g.value(pred).shape() != targets.shape() {
        return Err(Error::shape(format!(
            "student latents {:?} vs teacher targets {:?}",
            g.value(pred).shape(),
            targets.shape()
        )));
    }
    Ok(g.masked_mse(pred, targets.clone(), mask))
}

/// Masked-prediction loss of the student on `g` against `teacher`, for a
/// given mask.
pub fn ssl_loss_with_mask(
    g: &mut Graph,
    encoder: &Encoder,
    teacher: &TeacherState,
    features: &Tensor,
    mask: &[bool],
) -> Result<Var> {
    let targets = teacher.targets(encoder, features)?;
    ssl_loss_against(g, encoder, features, &targets, mask)
}

/// Masked-prediction loss with a freshly sampled mask.
pub fn ssl_loss<R: Rng + ?Sized>(
    g: &mut Graph,
    encoder: &Encoder,
    teacher: &TeacherState,
    features: &Tensor,
    spec: &MaskSpec,
    rng: &mut R,
) -> Result<Var> {
    let t = encoder.config.output_frames(features.rows());
    let mask = sample_mask(t, spec, rng);
    ssl_loss_with_mask(g, encoder, teacher, features, &mask)
}

/// Mask RNG for utterance `index` under `seed`, independent of any other.
pub fn utterance_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// Mean SSL loss over `corpus` with fixed per-utterance masks, no gradients.
pub fn evaluate_ssl(
    encoder: &Encoder,
    params: &ParamStore,
    teacher: &TeacherState,
    corpus: &Corpus,
    spec: &MaskSpec,
    mask_seed: u64,
) -> Result<f64> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus("SSL evaluation".into()));
    }
    let mut total = 0.0;
    for (i, u) in corpus.iter().enumerate() {
        let x = u.features_tensor();
        let mask = sample_mask(encoder.config.output_frames(u.frames), spec, &mut utterance_rng(mask_seed, i));
        let mut g = Graph::no_grad(params);
        let loss = ssl_loss_with_mask(&mut g, encoder, teacher, &x, &mask)?;
        g.check_finite()?;
        total += g.value(loss).item();
    }
    Ok(total / corpus.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub mask: MaskSpec,
    pub ema_decay: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 8,
            adam: AdamConfig::default(),
            mask: MaskSpec::default(),
            ema_decay: 0.999,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SslLogRow {
    pub epoch: usize,
    pub split: String,
    pub ssl_loss: f64,
}

/// Result of pretraining: final student parameters and the frozen teacher.
#[derive(Clone, Debug)]
pub struct Pretrained {
    pub encoder: Encoder,
    pub params: ParamStore,
    pub teacher: TeacherState,
    pub log: Vec<SslLogRow>,
}

impl Pretrained {
    pub fn log_table(&self) -> CsvTable {
        let mut t = CsvTable::new(&["epoch", "split", "ssl_loss"]);
        for r in &self.log {
            t.push(vec![r.epoch.to_string(), r.split.clone(), r.ssl_loss.to_string()]);
        }
        t
    }

    pub fn write_log(&self, path: &Path) -> Result<()> {
        self.log_table().write(path)
    }
}

/// Trains `params` on `train` with the masked-prediction objective.
///
/// Each batch averages the per-utterance losses in one graph, takes one Adam
/// step and one EMA update of the teacher. The log holds the mean training
/// loss per epoch and, when `valid` is given, the validation loss under fixed
/// masks and the current teacher.
pub fn pretrain(
    encoder: &Encoder,
    mut params: ParamStore,
    train: &Corpus,
    valid: Option<&Corpus>,
    config: &PretrainConfig,
    seed: u64,
) -> Result<Pretrained> {
    if train.is_empty() {
        return Err(Error::EmptyCorpus("pretraining corpus".into()));
    }
    config.mask.validate()?;
    if config.batch_size == 0 {
        return Err(Error::Config("batch size must be at least 1".into()));
    }
    let mut teacher = TeacherState::from_student(&params, config.ema_decay)?;
    let mut adam = Adam::new(config.adam);
    let mut order_rng = utterance_rng(seed, 0);
    let mut mask_rng = utterance_rng(seed, 1);
    let valid_seed = seed ^ 0x5ee_d0f7_a11d;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut log = Vec::new();
    let mut step = 0;
    for epoch in 1..=config.epochs {
        order.shuffle(&mut order_rng);
        let mut sum = 0.0;
        for batch in order.chunks(config.batch_size) {
            step += 1;
            let targets = batch
                .iter()
                .map(|&i| teacher.targets(encoder, &train.utterances[i].features_tensor()))
                .collect::<Result<Vec<_>>>()?;
            let mut g = Graph::new(&params);
            let mut losses = Vec::with_capacity(batch.len());
            for (&i, target) in batch.iter().zip(&targets) {
                let x = train.utterances[i].features_tensor();
                let mask = sample_mask(target.rows(), &config.mask, &mut mask_rng);
                losses.push(ssl_loss_against(&mut g, encoder, &x, target, &mask)?);
            }
            let loss = mean_of(&mut g, &losses);
            let value = g.value(loss).item();
            if !value.is_finite() || g.check_finite().is_err() {
                return Err(Error::Diverged { epoch, step, loss: value });
            }
            let grads = g.backward(loss)?;
            drop(g);
            adam.step(&mut params, &grads)?;
            teacher.ema_update(&params)?;
            sum += value * batch.len() as f64;
        }
        log.push(SslLogRow {
            epoch,
            split: "train".into(),
            ssl_loss: sum / train.len() as f64,
        });
        if let Some(v) = valid.filter(|v| !v.is_empty()) {
            log.push(SslLogRow {
                epoch,
                split: "valid".into(),
                ssl_loss: evaluate_ssl(encoder, &params, &teacher, v, &config.mask, valid_seed)?,
            });
        }
    }
    Ok(Pretrained {
        encoder: encoder.clone(),
        params,
        teacher,
        log,
    })
}

/// Mean of scalar nodes.
pub(crate) fn mean_of(g: &mut Graph, losses: &[Var]) -> Var {
    let mut acc = losses[0];
    for &l in &losses[1..] {
        acc = g.add(acc, l);
    }
    g.scale(acc, 1.0 / losses.len() as f64)
}
