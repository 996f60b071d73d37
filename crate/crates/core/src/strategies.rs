//! Fine-tuning strategies.
//!
//! A strategy decides which parameters train in a given epoch, which extra
//! losses join the CTC objective (EWC penalty, gated SSL replay), and where
//! the head reads from (last layer or a learned weighted sum of layers).

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, CheckpointMeta};
use crate::ctc::{ctc_loss_var, error_rate, greedy_decode, DownstreamHead, ErrorUnit, Vocabulary};
use crate::data::Corpus;
use crate::encoder::{weighted_layer_sum, AdaptationSpec, Encoder};
use crate::error::{Error, Result};
use crate::numerics::{Adam, AdamConfig, Graph, ParamGroup, ParamStore, Tensor, Var};
use crate::report::CsvTable;
use crate::ssl::{mean_of, sample_mask, ssl_loss_against, utterance_rng, MaskSpec, TeacherState};

pub const LAYER_WEIGHTS: &str = "head.layer_weights";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyKind {
    Frozen,
    FullFt,
    FixedCnn,
    TwoPhase,
    Lora,
    Adapters,
    Ewc,
    Replay,
}

impl StrategyKind {
    pub const ALL: [StrategyKind; 8] = [
        StrategyKind::Frozen,
        StrategyKind::FullFt,
        StrategyKind::FixedCnn,
        StrategyKind::TwoPhase,
        StrategyKind::Lora,
        StrategyKind::Adapters,
        StrategyKind::Ewc,
        StrategyKind::Replay,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            StrategyKind::Frozen => "frozen",
            StrategyKind::FullFt => "full_ft",
            StrategyKind::FixedCnn => "fixed_cnn",
            StrategyKind::TwoPhase => "two_phase",
            StrategyKind::Lora => "lora",
            StrategyKind::Adapters => "adapters",
            StrategyKind::Ewc => "ewc",
            StrategyKind::Replay => "replay",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.as_str() == s)
    }
}

impl fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReplaySource {
    PretrainCorpus,
    FinetuneCorpus,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StrategyConfig {
    pub kind: StrategyKind,
    pub lambda: f64,
    pub rank: usize,
    pub bottleneck: usize,
    pub p_replay: f64,
    pub freeze_epochs: usize,
    pub replay_source: ReplaySource,
}

impl Default for StrategyConfig {
    fn default() -> Self {
        Self::new(StrategyKind::FullFt)
    }
}

impl StrategyConfig {
    pub fn new(kind: StrategyKind) -> Self {
        Self {
            kind,
            lambda: 50.0,
            rank: 16,
            bottleneck: 8,
            p_replay: 0.25,
            freeze_epochs: 3,
            replay_source: ReplaySource::PretrainCorpus,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("strategy {}: {m}", self.kind)));
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda must be a non-negative number, got {}", self.lambda));
        }
        if !(0.0..=1.0).contains(&self.p_replay) {
            return bad(format!("p_replay must lie in [0, 1], got {}", self.p_replay));
        }
        if self.kind == StrategyKind::Lora && self.rank == 0 {
            return bad("rank must be at least 1".into());
        }
        if self.kind == StrategyKind::Adapters && self.bottleneck == 0 {
            return bad("bottleneck must be at least 1".into());
        }
        Ok(())
    }

    /// Short label used in run ids, e.g. `ewc-lambda50`.
    pub fn label(&self) -> String {
        match self.kind {
            StrategyKind::Lora => format!("lora-r{}", self.rank),
            StrategyKind::Adapters => format!("adapters-m{}", self.bottleneck),
            StrategyKind::Ewc => format!("ewc-lambda{}", self.lambda),
            StrategyKind::Replay => {
                let src = match self.replay_source {
                    ReplaySource::PretrainCorpus => "pretrain",
                    ReplaySource::FinetuneCorpus => "auto",
                };
                format!("replay-{src}-p{}", self.p_replay)
            }
            StrategyKind::TwoPhase => format!("two_phase-f{}", self.freeze_epochs),
            k => k.as_str().to_string(),
        }
    }

    pub fn adaptation(&self) -> AdaptationSpec {
        match self.kind {
            StrategyKind::Lora => AdaptationSpec::Lora { rank: self.rank },
            StrategyKind::Adapters => AdaptationSpec::Adapter {
                bottleneck: self.bottleneck,
            },
            _ => AdaptationSpec::None,
        }
    }
}

/// Diagonal Fisher values per pretrained-encoder parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct FisherInfo {
    pub values: BTreeMap<String, Tensor>,
    pub corpus_id: String,
    pub samples: usize,
}

impl FisherInfo {
    /// Mean of the Fisher entries over all parameters.
    pub fn mean(&self) -> f64 {
        let (s, n) = self
            .values
            .values()
            .fold((0.0, 0), |(s, n), t| (s + t.sum(), n + t.len()));
        if n == 0 {
            0.0
        } else {
            s / n as f64
        }
    }

    pub fn zeros_like(params: &ParamStore) -> Self {
        Self {
            values: params.iter().map(|(n, p)| (n.to_string(), Tensor::zeros(p.value.shape()))).collect(),
            corpus_id: String::new(),
            samples: 0,
        }
    }
}

/// `(1/n) Σ_i (∂L_i/∂θ)²` for every parameter in `names`, where `L_i` is
/// recorded by `loss(g, i)`. Gradients are taken regardless of trainable
/// flags.
pub fn diagonal_fisher<F>(params: &ParamStore, names: &[String], n: usize, mut loss: F) -> Result<BTreeMap<String, Tensor>>
where
    F: FnMut(&mut Graph, usize) -> Result<Var>,
{
    if n == 0 {
        return Err(Error::Config("Fisher estimation needs at least one sample".into()));
    }
    let mut acc: BTreeMap<String, Tensor> = names
        .iter()
        .map(|name| Ok((name.clone(), Tensor::zeros(params.value(name)?.shape()))))
        .collect::<Result<_>>()?;
    for i in 0..n {
        let mut g = Graph::with_all_grads(params);
        let l = loss(&mut g, i)?;
        let grads = g.backward(l)?;
        for (name, a) in &mut acc {
            let gr = &grads[name];
            for (a, x) in a.data_mut().iter_mut().zip(gr.data()) {
                *a += x * x;
            }
        }
    }
    let inv = 1.0 / n as f64;
    for a in acc.values_mut() {
        for v in a.data_mut() {
            *v *= inv;
        }
    }
    Ok(acc)
}

/// Empirical Fisher of the SSL loss at `theta_star`, one utterance per
/// sample (cycling through `corpus`), masks drawn from `seed`.
pub fn estimate_fisher(
    encoder: &Encoder,
    theta_star: &ParamStore,
    teacher: &TeacherState,
    corpus: &Corpus,
    corpus_id: &str,
    n_samples: usize,
    mask: &MaskSpec,
    seed: u64,
) -> Result<FisherInfo> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus("Fisher estimation".into()));
    }
    let names: Vec<String> = theta_star
        .iter()
        .filter(|(_, p)| p.group.is_pretrained_encoder())
        .map(|(n, _)| n.to_string())
        .collect();
    let base = encoder.base();
    let values = diagonal_fisher(theta_star, &names, n_samples, |g, i| {
        let u = &corpus.utterances[i % corpus.len()];
        let x = u.features_tensor();
        let targets = teacher.targets(&base, &x)?;
        let m = sample_mask(targets.rows(), mask, &mut utterance_rng(seed, i));
        ssl_loss_against(g, &base, &x, &targets, &m)
    })?;
    Ok(FisherInfo {
        values,
        corpus_id: corpus_id.to_string(),
        samples: n_samples,
    })
}

fn check_fisher(theta_star: &ParamStore, fisher: &FisherInfo) -> Result<()> {
    for (name, f) in &fisher.values {
        let s = theta_star.value(name)?;
        if s.shape() != f.shape() {
            return Err(Error::shape(format!(
                "Fisher for `{name}` is {:?}, parameter {:?}",
                f.shape(),
                s.shape()
            )));
        }
    }
    Ok(())
}

/// `Σ_i (λ/2) F_i (θ_i − θ*_i)²` over the parameters covered by `fisher`,
/// recorded on `g` (θ comes from the graph's store).
pub fn ewc_penalty(g: &mut Graph, theta_star: &ParamStore, fisher: &FisherInfo, lambda: f64) -> Result<Var> {
    check_fisher(theta_star, fisher)?;
    let mut total: Option<Var> = None;
    for (name, f) in &fisher.values {
        let p = g.param(name)?;
        if g.value(p).shape() != f.shape() {
            return Err(Error::shape(format!("parameter `{name}` does not match its Fisher entry")));
        }
        let anchor = g.constant(theta_star.value(name)?.clone());
        let d = g.sub(p, anchor);
        let sq = g.square(d);
        let fc = g.constant(f.clone());
        let w = g.mul(fc, sq);
        let s = g.sum(w);
        total = Some(match total {
            Some(t) => g.add(t, s),
            None => s,
        });
    }
    let total = match total {
        Some(t) => t,
        None => g.constant(Tensor::scalar(0.0)),
    };
    Ok(g.scale(total, lambda / 2.0))
}

/// Value of [`ewc_penalty`] for a parameter store.
pub fn ewc_penalty_value(theta: &ParamStore, theta_star: &ParamStore, fisher: &FisherInfo, lambda: f64) -> Result<f64> {
    let mut g = Graph::no_grad(theta);
    let v = ewc_penalty(&mut g, theta_star, fisher, lambda)?;
    Ok(g.value(v).item())
}

/// Bernoulli gate deciding whether a step gets a replay batch.
#[derive(Clone, Debug)]
pub struct ReplayGate {
    rng: ChaCha8Rng,
    pub p: f64,
}

impl ReplayGate {
    pub fn new(p: f64, seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            p,
        }
    }

    /// Never fires in epoch 1 (and draws nothing then); afterwards fires when
    /// a uniform draw falls below `p`.
    pub fn fire(&mut self, epoch: usize) -> bool {
        if epoch <= 1 {
            return false;
        }
        self.rng.random::<f64>() < self.p
    }
}

/// Which parameters train under `strategy` in `epoch` (1-indexed).
pub fn trainable_set(
    params: &ParamStore,
    encoder: &Encoder,
    strategy: &StrategyConfig,
    epoch: usize,
) -> Result<BTreeSet<String>> {
    let wanted = strategy.adaptation();
    if encoder.adaptation != wanted {
        return Err(Error::Adaptation(format!(
            "strategy {} needs adaptation {wanted:?}, encoder has {:?}",
            strategy.kind, encoder.adaptation
        )));
    }
    if strategy.kind == StrategyKind::Frozen && !params.contains(LAYER_WEIGHTS) {
        return Err(Error::Missing(format!("`{LAYER_WEIGHTS}` for the frozen strategy")));
    }
    let select = |keep: &dyn Fn(ParamGroup) -> bool| -> BTreeSet<String> {
        params
            .iter()
            .filter(|(_, p)| keep(p.group))
            .map(|(n, _)| n.to_string())
            .collect()
    };
    Ok(match strategy.kind {
        StrategyKind::Frozen => select(&|g| matches!(g, ParamGroup::Head | ParamGroup::LayerWeights)),
        StrategyKind::FullFt | StrategyKind::Ewc | StrategyKind::Replay => select(&|_| true),
        StrategyKind::FixedCnn => select(&|g| g != ParamGroup::FrontEnd),
        StrategyKind::TwoPhase if epoch <= strategy.freeze_epochs => select(&|g| g == ParamGroup::Head),
        StrategyKind::TwoPhase => select(&|_| true),
        StrategyKind::Lora | StrategyKind::Adapters => {
            select(&|g| matches!(g, ParamGroup::Head | ParamGroup::Adaptation))
        }
    })
}

/// Sets trainable flags so that exactly `set` trains.
pub fn apply_trainable(params: &mut ParamStore, set: &BTreeSet<String>) {
    for (name, p) in params.iter_mut() {
        p.trainable = set.contains(name);
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadInput {
    LastLayer,
    WeightedSum,
}

/// Encoder plus recognition head.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub encoder: Encoder,
    pub head: DownstreamHead,
    pub input: HeadInput,
}

impl Model {
    /// Copies the pretrained parameters, attaches what `strategy` needs and
    /// initialises the head.
    pub fn prepare(
        encoder: &Encoder,
        pretrained: &ParamStore,
        strategy: &StrategyConfig,
        vocab: &Vocabulary,
        head_hidden: usize,
        seed: u64,
    ) -> Result<(Self, ParamStore)> {
        strategy.validate()?;
        if encoder.adaptation != AdaptationSpec::None {
            return Err(Error::Adaptation("pretrained encoder already carries attachments".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut encoder = encoder.clone();
        let mut params = pretrained.clone();
        match strategy.adaptation() {
            AdaptationSpec::Lora { rank } => encoder.inject_lora(&mut params, rank, &mut rng)?,
            AdaptationSpec::Adapter { bottleneck } => encoder.inject_adapters(&mut params, bottleneck, &mut rng)?,
            AdaptationSpec::None => {}
        }
        let head = DownstreamHead::new(encoder.config.d_model, head_hidden, vocab);
        head.init_params(&mut params, &mut rng)?;
        let input = if strategy.kind == StrategyKind::Frozen {
            params.insert(
                LAYER_WEIGHTS,
                Tensor::zeros(&[encoder.config.num_layers()]),
                ParamGroup::LayerWeights,
            )?;
            HeadInput::WeightedSum
        } else {
            HeadInput::LastLayer
        };
        Ok((Self { encoder, head, input }, params))
    }

    pub fn log_probs(&self, g: &mut Graph, features: &Tensor) -> Result<Var> {
        let out = self.encoder.forward(g, features, None)?;
        let latents = match self.input {
            HeadInput::LastLayer => out.last(),
            HeadInput::WeightedSum => {
                let w = g.param(LAYER_WEIGHTS)?;
                weighted_layer_sum(g, &out.all(), w)?
            }
        };
        self.head.forward(g, latents)
    }

    pub fn transcribe(&self, params: &ParamStore, features: &Tensor, vocab: &Vocabulary) -> Result<String> {
        let mut g = Graph::no_grad(params);
        let lp = self.log_probs(&mut g, features)?;
        g.check_finite()?;
        Ok(vocab.decode(&greedy_decode(g.value(lp))))
    }

    /// (CER, WER) over `corpus`.
    pub fn evaluate(&self, params: &ParamStore, corpus: &Corpus, vocab: &Vocabulary) -> Result<(f64, f64)> {
        let hyps = corpus
            .iter()
            .map(|u| self.transcribe(params, &u.features_tensor(), vocab))
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<String> = corpus.iter().map(|u| u.text.clone()).collect();
        Ok((
            error_rate(&hyps, &refs, ErrorUnit::Char)?,
            error_rate(&hyps, &refs, ErrorUnit::Word)?,
        ))
    }
}

/// Labelled utterance ready for the CTC loss.
#[derive(Clone, Debug)]
pub struct LabelledItem {
    pub features: Tensor,
    pub labels: Vec<usize>,
}

/// Replay utterance with its frozen-teacher targets and a fixed mask.
#[derive(Clone, Debug)]
pub struct ReplayItem {
    pub features: Tensor,
    pub targets: Tensor,
    pub mask: Vec<bool>,
}

/// Mutable state of one fine-tuning run.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub epoch: usize,
    pub gate: ReplayGate,
    pub theta_star: ParamStore,
    pub fisher: Option<FisherInfo>,
    pub teacher: TeacherState,
    pub adam: Adam,
}

impl TrainState {
    pub fn new(
        theta_star: ParamStore,
        teacher: TeacherState,
        fisher: Option<FisherInfo>,
        strategy: &StrategyConfig,
        adam: AdamConfig,
        seed: u64,
    ) -> Self {
        Self {
            epoch: 1,
            gate: ReplayGate::new(strategy.p_replay, seed ^ 0x6a7e_5eed),
            theta_star,
            fisher,
            teacher,
            adam: Adam::new(adam),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepLosses {
    pub ds: f64,
    pub ewc: f64,
    pub replay: Option<f64>,
    pub total: f64,
}

/// Records the combined objective on `g`; returns the total and its parts.
pub fn record_objective(
    g: &mut Graph,
    model: &Model,
    ds_batch: &[LabelledItem],
    replay_batch: Option<&[ReplayItem]>,
    strategy: &StrategyConfig,
    state: &TrainState,
) -> Result<(Var, Var, Option<Var>, Option<Var>)> {
    if ds_batch.is_empty() {
        return Err(Error::Config("empty downstream batch".into()));
    }
    let mut ds_losses = Vec::with_capacity(ds_batch.len());
    for item in ds_batch {
        let lp = model.log_probs(g, &item.features)?;
        ds_losses.push(ctc_loss_var(g, lp, &item.labels)?);
    }
    let ds = mean_of(g, &ds_losses);
    let mut total = ds;
    let ewc = if strategy.kind == StrategyKind::Ewc {
        let fisher = state
            .fisher
            .as_ref()
            .ok_or_else(|| Error::Missing("Fisher information for the ewc strategy".into()))?;
        let e = ewc_penalty(g, &state.theta_star, fisher, strategy.lambda)?;
        total = g.add(total, e);
        Some(e)
    } else {
        None
    };
    let replay = match replay_batch {
        Some(batch) if !batch.is_empty() => {
            let losses = batch
                .iter()
                .map(|r| ssl_loss_against(g, &model.encoder, &r.features, &r.targets, &r.mask))
                .collect::<Result<Vec<_>>>()?;
            let r = mean_of(g, &losses);
            total = g.add(total, r);
            Some(r)
        }
        _ => None,
    };
    Ok((total, ds, ewc, replay))
}

/// One backward pass and one Adam step on the trainable parameters.
pub fn finetune_step(
    model: &Model,
    params: &mut ParamStore,
    ds_batch: &[LabelledItem],
    replay_batch: Option<&[ReplayItem]>,
    strategy: &StrategyConfig,
    state: &mut TrainState,
) -> Result<StepLosses> {
    let (losses, grads) = {
        let mut g = Graph::new(params);
        let (total, ds, ewc, replay) = record_objective(&mut g, model, ds_batch, replay_batch, strategy, state)?;
        let losses = StepLosses {
            ds: g.value(ds).item(),
            ewc: ewc.map_or(0.0, |e| g.value(e).item()),
            replay: replay.map(|r| g.value(r).item()),
            total: g.value(total).item(),
        };
        if !losses.total.is_finite() || g.check_finite().is_err() {
            return Err(Error::Diverged {
                epoch: state.epoch,
                step: state.adam.steps() as usize + 1,
                loss: losses.total,
            });
        }
        (losses, g.backward(total)?)
    };
    state.adam.step(params, &grads)?;
    Ok(losses)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub head_hidden: usize,
    pub mask: MaskSpec,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 8,
            adam: AdamConfig {
                lr: 2e-3,
                ..AdamConfig::default()
            },
            head_hidden: 64,
            mask: MaskSpec::default(),
        }
    }
}

/// Everything a fine-tuning run reads.
pub struct FinetuneInputs<'a> {
    pub encoder: &'a Encoder,
    pub theta_star: &'a ParamStore,
    pub teacher: &'a TeacherState,
    pub vocab: &'a Vocabulary,
    pub train: &'a Corpus,
    pub eval_splits: Vec<(String, &'a Corpus)>,
    pub replay: Option<&'a Corpus>,
    pub fisher: Option<&'a FisherInfo>,
}

pub struct FinetuneOutcome {
    pub model: Model,
    pub params: ParamStore,
    pub metrics: CsvTable,
    pub checkpoints: Vec<PathBuf>,
}

pub const METRICS_HEADER: [&str; 7] = ["run_id", "strategy", "seed", "epoch", "split", "metric", "value"];

/// Checks that `strategy` has what it needs before any training happens.
pub fn check_inputs(strategy: &StrategyConfig, inputs: &FinetuneInputs) -> Result<()> {
    strategy.validate()?;
    if inputs.train.is_empty() {
        return Err(Error::EmptyCorpus("fine-tuning corpus".into()));
    }
    match strategy.kind {
        StrategyKind::Ewc if inputs.fisher.is_none() => {
            Err(Error::Missing("Fisher information for the ewc strategy".into()))
        }
        StrategyKind::Replay
            if strategy.replay_source == ReplaySource::PretrainCorpus
                && inputs.replay.is_none_or(|c| c.is_empty()) =>
        {
            Err(Error::Missing("replay corpus for the replay strategy".into()))
        }
        _ => Ok(()),
    }
}

fn labelled(corpus: &Corpus, vocab: &Vocabulary) -> Result<Vec<LabelledItem>> {
    corpus
        .iter()
        .map(|u| {
            Ok(LabelledItem {
                features: u.features_tensor(),
                labels: vocab.encode(&u.text)?,
            })
        })
        .collect()
}

/// Trains a model from `theta_star` under `strategy`.
///
/// Writes `{run_dir}/epoch_{N}.ckpt` after every epoch when `run_dir` is
/// given and logs per-epoch training losses, replay rate and CER/WER on the
/// evaluation splits.
pub fn finetune(
    inputs: &FinetuneInputs,
    strategy: &StrategyConfig,
    config: &FinetuneConfig,
    seed: u64,
    run_id: &str,
    run_dir: Option<&Path>,
) -> Result<FinetuneOutcome> {
    check_inputs(strategy, inputs)?;
    if config.batch_size == 0 {
        return Err(Error::Config("batch size must be at least 1".into()));
    }
    let (model, mut params) = Model::prepare(
        inputs.encoder,
        inputs.theta_star,
        strategy,
        inputs.vocab,
        config.head_hidden,
        seed,
    )?;
    let mut state = TrainState::new(
        inputs.theta_star.clone(),
        inputs.teacher.clone(),
        inputs.fisher.cloned(),
        strategy,
        config.adam,
        seed,
    );
    let train = labelled(inputs.train, inputs.vocab)?;
    let replay_corpus = match strategy.replay_source {
        ReplaySource::PretrainCorpus => inputs.replay,
        ReplaySource::FinetuneCorpus => Some(inputs.train),
    };
    let mut replay_cache: Vec<Option<(Tensor, Tensor)>> = match (strategy.kind, replay_corpus) {
        (StrategyKind::Replay, Some(c)) => vec![None; c.len()],
        _ => Vec::new(),
    };
    let mut order_rng = utterance_rng(seed, 0);
    let mut replay_rng = utterance_rng(seed, 1);
    let mut order: Vec<usize> = (0..train.len()).collect();

    let mut metrics = CsvTable::new(&METRICS_HEADER);
    let label = strategy.label();
    let mut push = |epoch: usize, split: &str, metric: &str, value: f64| {
        metrics.push(vec![
            run_id.to_string(),
            label.to_string(),
            seed.to_string(),
            epoch.to_string(),
            split.to_string(),
            metric.to_string(),
            value.to_string(),
        ]);
    };
    let mut checkpoints = Vec::new();
    for epoch in 1..=config.epochs {
        state.epoch = epoch;
        let set = trainable_set(&params, &model.encoder, strategy, epoch)?;
        apply_trainable(&mut params, &set);
        order.shuffle(&mut order_rng);
        let (mut ds_sum, mut ewc_sum, mut replay_sum, mut total_sum) = (0.0, 0.0, 0.0, 0.0);
        let (mut steps, mut fired) = (0usize, 0usize);
        for chunk in order.chunks(config.batch_size) {
            steps += 1;
            let batch: Vec<LabelledItem> = chunk.iter().map(|&i| train[i].clone()).collect();
            let replay_batch = if strategy.kind == StrategyKind::Replay && state.gate.fire(epoch) {
                fired += 1;
                let corpus = replay_corpus.expect("checked by check_inputs");
                let mut items = Vec::with_capacity(config.batch_size);
                for _ in 0..config.batch_size {
                    let j = replay_rng.random_range(0..corpus.len());
                    if replay_cache[j].is_none() {
                        let features = corpus.utterances[j].features_tensor();
                        let targets = state.teacher.targets(&model.encoder, &features)?;
                        replay_cache[j] = Some((features, targets));
                    }
                    let (features, targets) = replay_cache[j].clone().expect("filled above");
                    let mask = sample_mask(targets.rows(), &config.mask, &mut replay_rng);
                    items.push(ReplayItem { features, targets, mask });
                }
                Some(items)
            } else {
                None
            };
            let l = finetune_step(&model, &mut params, &batch, replay_batch.as_deref(), strategy, &mut state)?;
            ds_sum += l.ds;
            ewc_sum += l.ewc;
            replay_sum += l.replay.unwrap_or(0.0);
            total_sum += l.total;
        }
        let n = steps as f64;
        push(epoch, "train", "train_loss", total_sum / n);
        push(epoch, "train", "ctc_loss", ds_sum / n);
        if strategy.kind == StrategyKind::Ewc {
            push(epoch, "train", "ewc_penalty", ewc_sum / n);
        }
        if strategy.kind == StrategyKind::Replay {
            push(epoch, "train", "replay_loss", replay_sum / fired.max(1) as f64);
            push(epoch, "train", "replay_rate", fired as f64 / n);
        }
        for (split, corpus) in &inputs.eval_splits {
            let (cer, wer) = model.evaluate(&params, corpus, inputs.vocab)?;
            push(epoch, split, "cer", cer);
            push(epoch, split, "wer", wer);
        }
        if let Some(dir) = run_dir {
            let path = dir.join(format!("epoch_{epoch}.ckpt"));
            Checkpoint {
                meta: CheckpointMeta {
                    encoder: model.encoder.clone(),
                    run_id: run_id.to_string(),
                    epoch,
                },
                params: params.clone(),
            }
            .save(&path)?;
            checkpoints.push(path);
        }
    }
    Ok(FinetuneOutcome {
        model,
        params,
        metrics,
        checkpoints,
    })
}
