//! Config-driven pipeline: data generation, pretraining, Fisher estimation,
//! fine-tuning per (strategy, seed), probing, sweeps and reports.
//!
//! Output layout under the run directory:
//!
//! ```text
//! config.json
//! data/{split}/manifest.jsonl, data/{split}/feats/*.f32
//! pretrain/log.csv, pretrain/theta_star.ckpt, pretrain/teacher.ckpt, pretrain/fisher.ckpt
//! runs/{run_id}/epoch_{N}.ckpt
//! metrics.csv, probe.csv, probe.svg
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use log::{info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, CheckpointMeta};
use crate::ctc::Vocabulary;
use crate::data::{generate_corpus, load_corpus, save_corpus, Corpus, DomainSpec, Lexicon, MANIFEST_FILE};
use crate::encoder::{Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::numerics::ParamGroup;
use crate::probe::{probe_plot, probe_series, probe_table, ProbeReport, ProbeSet, PROBE_HEADER};
use crate::report::{write_atomic, CsvTable, LinePlot, Series};
use crate::ssl::{pretrain, MaskSpec, PretrainConfig, TeacherState};
use crate::strategies::{
    check_inputs, estimate_fisher, finetune, FinetuneConfig, FinetuneInputs, FisherInfo, ReplaySource, StrategyConfig,
    StrategyKind, METRICS_HEADER,
};

/// Corpus splits of an experiment.
pub const SPLITS: [&str; 6] = ["pretrain", "pretrain_valid", "train", "valid", "test_id", "test_ood"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSizes {
    pub pretrain: usize,
    pub pretrain_valid: usize,
    pub train: usize,
    pub valid: usize,
    pub test_id: usize,
    pub test_ood: usize,
}

impl Default for CorpusSizes {
    fn default() -> Self {
        Self {
            pretrain: 2000,
            pretrain_valid: 100,
            train: 200,
            valid: 50,
            test_id: 100,
            test_ood: 100,
        }
    }
}

impl CorpusSizes {
    fn get(&self, split: &str) -> usize {
        match split {
            "pretrain" => self.pretrain,
            "pretrain_valid" => self.pretrain_valid,
            "train" => self.train,
            "valid" => self.valid,
            "test_id" => self.test_id,
            _ => self.test_ood,
        }
    }
}

/// Synthetic data generation settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Generate corpora under `{out}/data` for splits without an explicit path.
    pub generate: bool,
    pub seed: u64,
    pub lexicon_words: usize,
    pub lengths: (usize, usize),
    pub indomain: DomainSpec,
    pub ood: DomainSpec,
    pub sizes: CorpusSizes,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            generate: true,
            seed: 1,
            lexicon_words: 200,
            lengths: (5, 15),
            indomain: DomainSpec::indomain(),
            ood: DomainSpec::ood(),
            sizes: CorpusSizes::default(),
        }
    }
}

/// Explicit manifest paths, overriding generation per split.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorporaPaths {
    pub pretrain: Option<PathBuf>,
    pub pretrain_valid: Option<PathBuf>,
    pub train: Option<PathBuf>,
    pub valid: Option<PathBuf>,
    pub test_id: Option<PathBuf>,
    pub test_ood: Option<PathBuf>,
}

impl CorporaPaths {
    fn get(&self, split: &str) -> Option<&PathBuf> {
        match split {
            "pretrain" => self.pretrain.as_ref(),
            "pretrain_valid" => self.pretrain_valid.as_ref(),
            "train" => self.train.as_ref(),
            "valid" => self.valid.as_ref(),
            "test_id" => self.test_id.as_ref(),
            _ => self.test_ood.as_ref(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub encoder: EncoderConfig,
    pub mask: MaskSpec,
    pub vocabulary: Vocabulary,
    pub data: DataConfig,
    pub corpora: CorporaPaths,
    pub pretrain: PretrainConfig,
    pub pretrain_seed: u64,
    /// Directory with `theta_star.ckpt` and `teacher.ckpt` to reuse instead of pretraining.
    pub pretrained: Option<PathBuf>,
    pub finetune: FinetuneConfig,
    pub fisher_samples: usize,
    pub strategies: Vec<StrategyConfig>,
    pub seeds: Vec<u64>,
    pub probe_seed: u64,
    pub output_dir: PathBuf,
    /// Worker threads for independent fine-tuning runs.
    pub workers: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let ewc = |lambda| StrategyConfig {
            lambda,
            ..StrategyConfig::new(StrategyKind::Ewc)
        };
        Self {
            name: "default".into(),
            encoder: EncoderConfig::default(),
            mask: MaskSpec::default(),
            vocabulary: Vocabulary::default(),
            data: DataConfig::default(),
            corpora: CorporaPaths::default(),
            pretrain: PretrainConfig::default(),
            pretrain_seed: 0,
            pretrained: None,
            finetune: FinetuneConfig::default(),
            fisher_samples: 100,
            strategies: vec![
                StrategyConfig::new(StrategyKind::FullFt),
                StrategyConfig::new(StrategyKind::Frozen),
                ewc(5.0),
                ewc(50.0),
                ewc(500.0),
                StrategyConfig::new(StrategyKind::Lora),
                StrategyConfig::new(StrategyKind::Replay),
            ],
            seeds: vec![1, 2, 3],
            probe_seed: 1234,
            output_dir: PathBuf::from("runs/default"),
            workers: 1,
        }
    }
}

fn field_err(field: &str, msg: impl std::fmt::Display) -> Error {
    Error::Config(format!("{field}: {msg}"))
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }

    /// Checks every field and every strategy/input combination.
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate().map_err(|e| field_err("encoder", e))?;
        self.mask.validate().map_err(|e| field_err("mask", e))?;
        if self.seeds.is_empty() {
            return Err(field_err("seeds", "at least one seed is required"));
        }
        let unique: BTreeSet<_> = self.seeds.iter().collect();
        if unique.len() != self.seeds.len() {
            return Err(field_err("seeds", "duplicate seed"));
        }
        if self.strategies.is_empty() {
            return Err(field_err("strategies", "at least one strategy is required"));
        }
        let mut labels = BTreeSet::new();
        for (i, s) in self.strategies.iter().enumerate() {
            let at = format!("strategies[{i}]");
            s.validate().map_err(|e| field_err(&at, e))?;
            if let StrategyKind::Lora = s.kind {
                let c = &self.encoder;
                if s.rank > c.d_model.min(c.d_ff) {
                    return Err(field_err(
                        &format!("{at}.rank"),
                        format!("{} exceeds min(d_model, d_ff) = {}", s.rank, c.d_model.min(c.d_ff)),
                    ));
                }
            }
            if s.kind == StrategyKind::Replay
                && s.replay_source == ReplaySource::PretrainCorpus
                && !self.has_split("pretrain")
            {
                return Err(field_err(
                    &format!("{at}.replay_source"),
                    "replay from the pretraining corpus needs corpora.pretrain or data.generate",
                ));
            }
            if !labels.insert(s.label()) {
                return Err(field_err(&at, format!("duplicate strategy `{}`", s.label())));
            }
        }
        if self.finetune.epochs == 0 || self.finetune.batch_size == 0 {
            return Err(field_err("finetune", "epochs and batch_size must be positive"));
        }
        if self.pretrain.batch_size == 0 {
            return Err(field_err("pretrain.batch_size", "must be positive"));
        }
        if self.fisher_samples == 0 && self.strategies.iter().any(|s| s.kind == StrategyKind::Ewc) {
            return Err(field_err("fisher_samples", "must be positive for the ewc strategy"));
        }
        for split in ["train", "valid", "test_id", "test_ood", "pretrain_valid"] {
            if !self.has_split(split) {
                return Err(field_err(&format!("corpora.{split}"), "missing and data.generate is off"));
            }
        }
        if self.pretrained.is_none() && !self.has_split("pretrain") {
            return Err(field_err("corpora.pretrain", "missing and no pretrained checkpoint given"));
        }
        if self.data.generate {
            let (lo, hi) = self.data.lengths;
            if lo == 0 || lo > hi {
                return Err(field_err("data.lengths", format!("bad range {lo}..={hi}")));
            }
            for split in SPLITS {
                if self.corpora.get(split).is_none() && self.data.sizes.get(split) == 0 {
                    return Err(field_err(&format!("data.sizes.{split}"), "must be positive"));
                }
            }
            if self.data.indomain.d_in != self.encoder.d_in || self.data.ood.d_in != self.encoder.d_in {
                return Err(field_err("data", "domain d_in differs from encoder.d_in"));
            }
        }
        if self.workers == 0 {
            return Err(field_err("workers", "must be at least 1"));
        }
        Ok(())
    }

    fn has_split(&self, split: &str) -> bool {
        self.corpora.get(split).is_some() || self.data.generate
    }

    pub fn run_ids(&self) -> Vec<(String, &StrategyConfig, u64)> {
        self.strategies
            .iter()
            .flat_map(|s| self.seeds.iter().map(move |&seed| (run_id(s, seed), s, seed)))
            .collect()
    }
}

pub fn run_id(strategy: &StrategyConfig, seed: u64) -> String {
    format!("{}-s{seed}", strategy.label())
}

/// Loaded corpora by split name.
pub type Corpora = BTreeMap<String, Corpus>;

fn manifest_path(out: &Path, split: &str) -> PathBuf {
    out.join("data").join(split).join(MANIFEST_FILE)
}

/// Generates every split without an explicit path into `{out}/data`.
///
/// Pretraining splits draw transcripts from one half of a random lexicon,
/// fine-tuning and test splits from the other; `test_ood` uses the OOD domain.
pub fn generate_data(config: &ExperimentConfig, out: &Path, overwrite: bool) -> Result<Vec<PathBuf>> {
    let d = &config.data;
    let (pre_lex, ft_lex) = Lexicon::generate(&config.vocabulary, d.lexicon_words, d.seed)?.split();
    let enc = &config.encoder;
    let mut written = Vec::new();
    for (i, split) in SPLITS.iter().enumerate() {
        if config.corpora.get(split).is_some() {
            continue;
        }
        let lexicon = if split.starts_with("pretrain") { &pre_lex } else { &ft_lex };
        let domain = if *split == "test_ood" { &d.ood } else { &d.indomain };
        let seed = d.seed.wrapping_mul(1000).wrapping_add(i as u64);
        let corpus = generate_corpus(
            domain,
            &config.vocabulary,
            lexicon,
            d.sizes.get(split),
            d.lengths,
            seed,
            split,
            |t| enc.output_frames(t),
        )?;
        let dir = out.join("data").join(split);
        written.push(save_corpus(&corpus, &dir, overwrite)?);
        info!("generated {split}: {} utterances", corpus.len());
    }
    Ok(written)
}

/// Loads every split, from explicit paths or `{out}/data`.
pub fn load_corpora(config: &ExperimentConfig, out: &Path) -> Result<Corpora> {
    let mut corpora = Corpora::new();
    for split in SPLITS {
        let path = match config.corpora.get(split) {
            Some(p) => p.clone(),
            None => manifest_path(out, split),
        };
        if !path.exists() {
            if split == "pretrain" && config.pretrained.is_some() && !needs_pretrain_corpus(config) {
                continue;
            }
            return Err(Error::Missing(format!("corpus `{split}` at {}", path.display())));
        }
        corpora.insert(split.to_string(), load_corpus(&path, &config.vocabulary)?);
    }
    Ok(corpora)
}

fn needs_pretrain_corpus(config: &ExperimentConfig) -> bool {
    config
        .strategies
        .iter()
        .any(|s| s.kind == StrategyKind::Replay && s.replay_source == ReplaySource::PretrainCorpus)
}

/// Pretrained parameters and the frozen teacher.
#[derive(Clone, Debug)]
pub struct PretrainArtifacts {
    pub encoder: Encoder,
    pub theta_star: Checkpoint,
    pub teacher: TeacherState,
}

fn pretrain_dir(out: &Path) -> PathBuf {
    out.join("pretrain")
}

/// Pretrains (or reuses `{out}/pretrain` when complete and `overwrite` is off).
pub fn pretrain_stage(config: &ExperimentConfig, out: &Path, corpora: &Corpora, overwrite: bool) -> Result<PretrainArtifacts> {
    if let Some(dir) = &config.pretrained {
        return load_pretrained(dir, config.pretrain.ema_decay);
    }
    let dir = pretrain_dir(out);
    if !overwrite && dir.join("teacher.ckpt").exists() {
        info!("reusing pretrained model in {}", dir.display());
        return load_pretrained(&dir, config.pretrain.ema_decay);
    }
    let train = corpora
        .get("pretrain")
        .ok_or_else(|| Error::Missing("pretraining corpus".into()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.pretrain_seed);
    let (encoder, params) = Encoder::init(config.encoder.clone(), &mut rng)?;
    info!("pretraining on {} utterances for {} epochs", train.len(), config.pretrain.epochs);
    let result = pretrain(
        &encoder,
        params,
        train,
        corpora.get("pretrain_valid"),
        &config.pretrain,
        config.pretrain_seed,
    )?;
    result.write_log(&dir.join("log.csv"))?;
    let meta = |run_id: &str| CheckpointMeta {
        encoder: encoder.clone(),
        run_id: run_id.to_string(),
        epoch: 0,
    };
    let theta_star = Checkpoint {
        meta: meta("theta_star"),
        params: result.params,
    };
    theta_star.save(&dir.join("theta_star.ckpt"))?;
    Checkpoint {
        meta: meta("teacher"),
        params: result.teacher.params.clone(),
    }
    .save(&dir.join("teacher.ckpt"))?;
    Ok(PretrainArtifacts {
        encoder,
        theta_star,
        teacher: result.teacher,
    })
}

pub fn load_pretrained(dir: &Path, decay: f64) -> Result<PretrainArtifacts> {
    let theta_star = Checkpoint::load(&dir.join("theta_star.ckpt"))?;
    let teacher = Checkpoint::load(&dir.join("teacher.ckpt"))?;
    let mut params = teacher.params;
    params.set_all_trainable(false);
    Ok(PretrainArtifacts {
        encoder: theta_star.meta.encoder.clone(),
        theta_star,
        teacher: TeacherState { params, decay },
    })
}

/// Fisher information on the held-out pretraining split, cached in
/// `{out}/pretrain/fisher.ckpt`.
pub fn fisher_stage(config: &ExperimentConfig, out: &Path, corpora: &Corpora, pre: &PretrainArtifacts) -> Result<FisherInfo> {
    let path = pretrain_dir(out).join("fisher.ckpt");
    let corpus = corpora
        .get("pretrain_valid")
        .ok_or_else(|| Error::Missing("pretrain_valid corpus for Fisher estimation".into()))?;
    if path.exists() {
        let c = Checkpoint::load(&path)?;
        if c.meta.epoch == config.fisher_samples {
            return Ok(FisherInfo {
                values: c.params.iter().map(|(n, p)| (n.to_string(), p.value.clone())).collect(),
                corpus_id: "pretrain_valid".into(),
                samples: c.meta.epoch,
            });
        }
    }
    info!("estimating Fisher information on {} samples", config.fisher_samples);
    let fisher = estimate_fisher(
        &pre.encoder,
        &pre.theta_star.params,
        &pre.teacher,
        corpus,
        "pretrain_valid",
        config.fisher_samples,
        &config.mask,
        config.probe_seed ^ 0xf15e,
    )?;
    let mut params = crate::numerics::ParamStore::new();
    for (n, v) in &fisher.values {
        params.insert(n.clone(), v.clone(), ParamGroup::Other)?;
    }
    Checkpoint {
        meta: CheckpointMeta {
            encoder: pre.encoder.clone(),
            run_id: "fisher".into(),
            epoch: config.fisher_samples,
        },
        params,
    }
    .save(&path)?;
    Ok(fisher)
}

pub const EVAL_SPLITS: [&str; 3] = ["valid", "test_id", "test_ood"];

/// Fine-tunes every (strategy, seed) pair; returns the merged metrics table
/// in config order.
pub fn finetune_stage(
    config: &ExperimentConfig,
    out: &Path,
    corpora: &Corpora,
    pre: &PretrainArtifacts,
    fisher: Option<&FisherInfo>,
) -> Result<CsvTable> {
    let runs = config.run_ids();
    let eval_splits: Vec<(String, &Corpus)> = EVAL_SPLITS
        .iter()
        .map(|s| {
            corpora
                .get(*s)
                .map(|c| (s.to_string(), c))
                .ok_or_else(|| Error::Missing(format!("corpus `{s}`")))
        })
        .collect::<Result<_>>()?;
    let train = corpora.get("train").ok_or_else(|| Error::Missing("corpus `train`".into()))?;
    let inputs = FinetuneInputs {
        encoder: &pre.encoder,
        theta_star: &pre.theta_star.params,
        teacher: &pre.teacher,
        vocab: &config.vocabulary,
        train,
        eval_splits,
        replay: corpora.get("pretrain"),
        fisher,
    };
    for (_, s, _) in &runs {
        check_inputs(s, &inputs)?;
    }
    let slots: Vec<Mutex<Option<Result<CsvTable>>>> = runs.iter().map(|_| Mutex::new(None)).collect();
    let next = Mutex::new(0usize);
    let work = || loop {
        let i = {
            let mut n = next.lock().expect("queue lock");
            let i = *n;
            *n += 1;
            i
        };
        let Some((id, strategy, seed)) = runs.get(i) else { break };
        let dir = out.join("runs").join(id);
        info!("fine-tuning {id}");
        let result = fs::remove_dir_all(&dir)
            .or_else(|e| if e.kind() == std::io::ErrorKind::NotFound { Ok(()) } else { Err(e) })
            .map_err(|e| Error::io(&dir, e))
            .and_then(|_| finetune(&inputs, strategy, &config.finetune, *seed, id, Some(&dir)))
            .map(|o| o.metrics);
        *slots[i].lock().expect("slot lock") = Some(result);
    };
    std::thread::scope(|scope| {
        for _ in 1..config.workers.min(runs.len()) {
            scope.spawn(work);
        }
        work();
    });
    let mut table = CsvTable::new(&METRICS_HEADER);
    for slot in slots {
        let t = slot.into_inner().expect("slot lock").expect("every run is processed")?;
        table.extend(&t)?;
    }
    Ok(table)
}

/// Probe sets for the in-domain and OOD test splits.
pub fn probe_sets(config: &ExperimentConfig, corpora: &Corpora, pre: &PretrainArtifacts) -> Result<Vec<ProbeSet>> {
    ["test_id", "test_ood"]
        .iter()
        .map(|s| {
            let c = corpora.get(*s).ok_or_else(|| Error::Missing(format!("corpus `{s}`")))?;
            ProbeSet::new(s, c, &pre.encoder, &pre.teacher, &config.mask, config.probe_seed)
        })
        .collect()
}

/// Probes every run directory; returns the probe table and reports.
pub fn probe_stage(
    config: &ExperimentConfig,
    out: &Path,
    corpora: &Corpora,
    pre: &PretrainArtifacts,
) -> Result<(CsvTable, Vec<ProbeReport>)> {
    let sets = probe_sets(config, corpora, pre)?;
    let mut reports = Vec::new();
    for (id, _, _) in config.run_ids() {
        reports.extend(probe_series(&out.join("runs").join(&id), &id, &pre.teacher, &sets)?);
    }
    let refs = sets
        .iter()
        .map(|s| Ok((format!("pretrained / {}", s.id), s.evaluate(&pre.encoder, &pre.theta_star.params)?)))
        .collect::<Result<Vec<_>>>()?;
    let mut table = CsvTable::new(&PROBE_HEADER);
    for (label, v) in &refs {
        let set = label.trim_start_matches("pretrained / ");
        table.push(vec!["pretrained".into(), set.into(), "0".into(), v.to_string()]);
    }
    table.extend(&probe_table(&reports))?;
    table.write(&out.join("probe.csv"))?;
    let id_reports: Vec<ProbeReport> = reports.iter().filter(|r| r.probe_set == "test_id").cloned().collect();
    probe_plot(
        &id_reports,
        &format!("{}: SSL probe loss during fine-tuning", config.name),
        refs.into_iter().filter(|(l, _)| l.ends_with("test_id")).collect(),
    )
    .write(&out.join("probe.svg"))?;
    Ok((table, reports))
}

const RUNNING: &str = "RUNNING";
const FAILED: &str = "FAILED";

/// Runs the whole pipeline into `out`.
///
/// While running, `{out}/RUNNING` exists; on failure it is replaced by
/// `{out}/FAILED` holding the error message.
pub fn run_experiment(config: &ExperimentConfig, out: &Path, overwrite: bool) -> Result<PathBuf> {
    config.validate()?;
    if out.exists() && fs::read_dir(out).map_err(|e| Error::io(out, e))?.next().is_some() {
        if !overwrite {
            return Err(Error::Config(format!(
                "{} exists and is not empty (pass --overwrite to replace)",
                out.display()
            )));
        }
        fs::remove_dir_all(out).map_err(|e| Error::io(out, e))?;
    }
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let _ = fs::remove_file(out.join(FAILED));
    write_atomic(&out.join(RUNNING), b"")?;
    match run_stages(config, out) {
        Ok(()) => {
            fs::remove_file(out.join(RUNNING)).map_err(|e| Error::io(out, e))?;
            Ok(out.to_path_buf())
        }
        Err(e) => {
            let _ = write_atomic(&out.join(FAILED), format!("{e}\n").as_bytes());
            let _ = fs::remove_file(out.join(RUNNING));
            Err(e)
        }
    }
}

fn run_stages(config: &ExperimentConfig, out: &Path) -> Result<()> {
    write_atomic(&out.join("config.json"), config.to_json().as_bytes())?;
    if config.data.generate {
        generate_data(config, out, true)?;
    }
    let corpora = load_corpora(config, out)?;
    let pre = pretrain_stage(config, out, &corpora, true)?;
    let fisher = if config.strategies.iter().any(|s| s.kind == StrategyKind::Ewc) {
        Some(fisher_stage(config, out, &corpora, &pre)?)
    } else {
        None
    };
    let metrics = finetune_stage(config, out, &corpora, &pre, fisher.as_ref())?;
    metrics.write(&out.join("metrics.csv"))?;
    probe_stage(config, out, &corpora, &pre)?;
    Ok(())
}

fn refuse_existing(path: &Path, overwrite: bool) -> Result<()> {
    if path.exists() && !overwrite {
        return Err(Error::Config(format!(
            "{} exists (pass --overwrite to replace)",
            path.display()
        )));
    }
    Ok(())
}

/// Pretrained artifacts from `config.pretrained` or `{out}/pretrain`.
pub fn existing_pretrained(config: &ExperimentConfig, out: &Path) -> Result<PretrainArtifacts> {
    let dir = config.pretrained.clone().unwrap_or_else(|| pretrain_dir(out));
    if !dir.join("teacher.ckpt").exists() {
        return Err(Error::Missing(format!(
            "pretrained checkpoints in {} (run `pretrain` first)",
            dir.display()
        )));
    }
    load_pretrained(&dir, config.pretrain.ema_decay)
}

/// `pretrain` subcommand: corpora must already exist under `out` or be configured.
pub fn run_pretrain(config: &ExperimentConfig, out: &Path, overwrite: bool) -> Result<PretrainArtifacts> {
    config.validate()?;
    refuse_existing(&pretrain_dir(out).join("teacher.ckpt"), overwrite)?;
    let corpora = load_corpora(config, out)?;
    pretrain_stage(config, out, &corpora, true)
}

/// `finetune` subcommand: fine-tunes every (strategy, seed) pair and writes `metrics.csv`.
pub fn run_finetune(config: &ExperimentConfig, out: &Path, overwrite: bool) -> Result<CsvTable> {
    config.validate()?;
    refuse_existing(&out.join("metrics.csv"), overwrite)?;
    let corpora = load_corpora(config, out)?;
    let pre = existing_pretrained(config, out)?;
    let fisher = if config.strategies.iter().any(|s| s.kind == StrategyKind::Ewc) {
        Some(fisher_stage(config, out, &corpora, &pre)?)
    } else {
        None
    };
    let metrics = finetune_stage(config, out, &corpora, &pre, fisher.as_ref())?;
    metrics.write(&out.join("metrics.csv"))?;
    Ok(metrics)
}

/// `probe` subcommand: probes the checkpoints of every run and writes `probe.csv` and `probe.svg`.
pub fn run_probe(config: &ExperimentConfig, out: &Path, overwrite: bool) -> Result<CsvTable> {
    config.validate()?;
    refuse_existing(&out.join("probe.csv"), overwrite)?;
    let corpora = load_corpora(config, out)?;
    let pre = existing_pretrained(config, out)?;
    Ok(probe_stage(config, out, &corpora, &pre)?.0)
}

/// Hyperparameters a sweep can vary.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SweepParam {
    #[serde(rename = "r")]
    Rank,
    #[serde(rename = "lambda")]
    Lambda,
    #[serde(rename = "p_R")]
    ReplayProbability,
}

impl SweepParam {
    pub fn as_str(self) -> &'static str {
        match self {
            SweepParam::Rank => "r",
            SweepParam::Lambda => "lambda",
            SweepParam::ReplayProbability => "p_R",
        }
    }

    fn kind(self) -> StrategyKind {
        match self {
            SweepParam::Rank => StrategyKind::Lora,
            SweepParam::Lambda => StrategyKind::Ewc,
            SweepParam::ReplayProbability => StrategyKind::Replay,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub base: ExperimentConfig,
    /// Strategy whose hyperparameter varies; defaults follow `hyperparameter`.
    #[serde(default)]
    pub strategy: Option<StrategyConfig>,
    pub hyperparameter: SweepParam,
    pub values: Vec<f64>,
    /// Adds a full fine-tuning run drawn as the reference line.
    #[serde(default = "yes")]
    pub baseline: bool,
}

fn yes() -> bool {
    true
}

impl SweepSpec {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            source,
        })
    }

    fn strategy_for(&self, value: f64) -> Result<StrategyConfig> {
        let mut s = self
            .strategy
            .clone()
            .unwrap_or_else(|| StrategyConfig::new(self.hyperparameter.kind()));
        if s.kind != self.hyperparameter.kind() {
            return Err(field_err(
                "hyperparameter",
                format!("`{}` does not apply to strategy {}", self.hyperparameter.as_str(), s.kind),
            ));
        }
        match self.hyperparameter {
            SweepParam::Rank => {
                if value < 1.0 || value.fract() != 0.0 {
                    return Err(field_err("values", format!("rank {value} is not a positive integer")));
                }
                s.rank = value as usize;
            }
            SweepParam::Lambda => s.lambda = value,
            SweepParam::ReplayProbability => s.p_replay = value,
        }
        Ok(s)
    }

    /// Experiment config with one strategy per grid value (plus the baseline).
    pub fn expand(&self) -> Result<ExperimentConfig> {
        if self.values.is_empty() {
            return Err(field_err("values", "grid is empty"));
        }
        let mut cfg = self.base.clone();
        cfg.strategies = Vec::new();
        if self.baseline {
            cfg.strategies.push(StrategyConfig::new(StrategyKind::FullFt));
        }
        for &v in &self.values {
            cfg.strategies.push(self.strategy_for(v)?);
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

pub const SWEEP_HEADER: [&str; 6] = ["run_id", "hyperparameter", "hp_value", "split", "metric", "value"];

/// Runs the grid and writes `sweep.csv` and `sweep.svg` into `out`.
pub fn sweep(spec: &SweepSpec, out: &Path, overwrite: bool) -> Result<CsvTable> {
    let cfg = spec.expand()?;
    run_experiment(&cfg, out, overwrite)?;
    let metrics = CsvTable::read(&out.join("metrics.csv"))?;
    let finals = final_metrics(&metrics)?;
    let mut table = CsvTable::new(&SWEEP_HEADER);
    let mut curves: BTreeMap<(String, String), BTreeMap<u64, Vec<f64>>> = BTreeMap::new();
    let mut baseline: BTreeMap<(String, String), Vec<f64>> = BTreeMap::new();
    let grid: Vec<(StrategyConfig, f64)> = spec
        .values
        .iter()
        .map(|&v| spec.strategy_for(v).map(|s| (s, v)))
        .collect::<Result<_>>()?;
    for (s, v) in &grid {
        for &seed in &cfg.seeds {
            let id = run_id(s, seed);
            for ((rid, split, metric), value) in finals.range((id.clone(), String::new(), String::new())..) {
                if rid != &id {
                    break;
                }
                table.push(vec![
                    id.clone(),
                    spec.hyperparameter.as_str().into(),
                    v.to_string(),
                    split.clone(),
                    metric.clone(),
                    value.to_string(),
                ]);
                curves
                    .entry((split.clone(), metric.clone()))
                    .or_default()
                    .entry(v.to_bits())
                    .or_default()
                    .push(*value);
            }
        }
    }
    if spec.baseline {
        let base = StrategyConfig::new(StrategyKind::FullFt);
        for &seed in &cfg.seeds {
            let id = run_id(&base, seed);
            for ((rid, split, metric), value) in &finals {
                if rid == &id {
                    baseline.entry((split.clone(), metric.clone())).or_default().push(*value);
                }
            }
        }
    }
    table.write(&out.join("sweep.csv"))?;
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let mut series = Vec::new();
    let mut references = Vec::new();
    for split in ["test_id", "test_ood"] {
        let key = (split.to_string(), "cer".to_string());
        if let Some(c) = curves.get(&key) {
            let mut points: Vec<(f64, f64)> = c.iter().map(|(b, v)| (f64::from_bits(*b), mean(v))).collect();
            points.sort_by(|a, b| a.0.total_cmp(&b.0));
            series.push(Series {
                name: format!("{} CER {split}", spec.hyperparameter.as_str()),
                points,
                dashed: split == "test_ood",
            });
        }
        if let Some(b) = baseline.get(&key) {
            references.push((format!("full_ft CER {split}"), mean(b)));
        }
    }
    let positive = spec.values.iter().all(|v| *v > 0.0);
    let spread = spec.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
        / spec.values.iter().copied().fold(f64::INFINITY, f64::min);
    LinePlot {
        title: format!("{}: final CER vs {}", cfg.name, spec.hyperparameter.as_str()),
        x_label: spec.hyperparameter.as_str().into(),
        y_label: "CER".into(),
        series,
        references,
        log_x: positive && spread >= 20.0,
    }
    .write(&out.join("sweep.svg"))?;
    Ok(table)
}

/// Final-epoch value per (run_id, split, metric).
pub fn final_metrics(metrics: &CsvTable) -> Result<BTreeMap<(String, String, String), f64>> {
    let col = |name: &str| {
        metrics
            .column(name)
            .ok_or_else(|| Error::Config(format!("metrics table lacks column `{name}`")))
    };
    let (rid, ep, sp, me, va) = (col("run_id")?, col("epoch")?, col("split")?, col("metric")?, col("value")?);
    let mut last: BTreeMap<(String, String, String), (usize, f64)> = BTreeMap::new();
    for r in &metrics.rows {
        let parse_err = |f: &str| Error::Config(format!("bad {f} in metrics row {r:?}"));
        let epoch: usize = r[ep].parse().map_err(|_| parse_err("epoch"))?;
        let value: f64 = r[va].parse().map_err(|_| parse_err("value"))?;
        let key = (r[rid].clone(), r[sp].clone(), r[me].clone());
        match last.get(&key) {
            Some((e, _)) if *e >= epoch => {}
            _ => {
                last.insert(key, (epoch, value));
            }
        }
    }
    Ok(last.into_iter().map(|(k, (_, v))| (k, v)).collect())
}

/// Per-strategy means over seeds of final-epoch metrics, one table row per
/// (strategy, metric) with a column per test split plus their mean.
#[derive(Clone, Debug, PartialEq)]
pub struct Report {
    pub table: CsvTable,
    pub skipped: Vec<(PathBuf, String)>,
}

/// Builds `table.csv` and `probe_overlay.svg` from completed run directories.
pub fn report(run_dirs: &[PathBuf], out: &Path) -> Result<Report> {
    let mut skipped = Vec::new();
    let mut metrics = CsvTable::new(&METRICS_HEADER);
    let mut probes = CsvTable::new(&PROBE_HEADER);
    for dir in run_dirs {
        let reason = if dir.join(RUNNING).exists() {
            Some("still running".to_string())
        } else if dir.join(FAILED).exists() {
            Some("failed".to_string())
        } else if !dir.join("metrics.csv").exists() || !dir.join("probe.csv").exists() {
            Some("missing metrics.csv or probe.csv".to_string())
        } else {
            None
        };
        if let Some(reason) = reason {
            warn!("skipping {}: {reason}", dir.display());
            skipped.push((dir.clone(), reason));
            continue;
        }
        metrics.extend(&CsvTable::read(&dir.join("metrics.csv"))?)?;
        probes.extend(&CsvTable::read(&dir.join("probe.csv"))?)?;
    }
    if metrics.rows.is_empty() {
        return Err(Error::Missing("completed run directories".into()));
    }
    let table = summary_table(&metrics)?;
    table.write(&out.join("table.csv"))?;
    probe_overlay(&probes)?.write(&out.join("probe_overlay.svg"))?;
    Ok(Report { table, skipped })
}

/// Mean over seeds of final test CER/WER per strategy.
pub fn summary_table(metrics: &CsvTable) -> Result<CsvTable> {
    let finals = final_metrics(metrics)?;
    let strategy_col = metrics.column("strategy").expect("metrics header");
    let rid_col = metrics.column("run_id").expect("metrics header");
    let mut strategy_of: BTreeMap<String, String> = BTreeMap::new();
    let mut order: Vec<String> = Vec::new();
    for r in &metrics.rows {
        strategy_of.entry(r[rid_col].clone()).or_insert_with(|| r[strategy_col].clone());
        if !order.contains(&r[strategy_col]) {
            order.push(r[strategy_col].clone());
        }
    }
    let splits: Vec<String> = finals
        .keys()
        .map(|(_, s, _)| s.clone())
        .filter(|s| s.starts_with("test"))
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let mut header = vec!["strategy".to_string(), "metric".to_string(), "seeds".to_string()];
    header.extend(splits.iter().cloned());
    header.push("mean".into());
    let mut table = CsvTable {
        header,
        rows: Vec::new(),
    };
    for strategy in &order {
        for metric in ["cer", "wer"] {
            let mut row = vec![strategy.clone(), metric.to_string()];
            let mut means = Vec::new();
            let mut seeds = 0;
            for split in &splits {
                let vals: Vec<f64> = finals
                    .iter()
                    .filter(|((rid, s, m), _)| s == split && m == metric && strategy_of.get(rid) == Some(strategy))
                    .map(|(_, v)| *v)
                    .collect();
                seeds = seeds.max(vals.len());
                if vals.is_empty() {
                    means.push(None);
                } else {
                    means.push(Some(vals.iter().sum::<f64>() / vals.len() as f64));
                }
            }
            if means.iter().all(Option::is_none) {
                continue;
            }
            row.push(seeds.to_string());
            row.extend(means.iter().map(|m| m.map_or(String::new(), |v| v.to_string())));
            let present: Vec<f64> = means.iter().flatten().copied().collect();
            row.push((present.iter().sum::<f64>() / present.len() as f64).to_string());
            table.rows.push(row);
        }
    }
    Ok(table)
}

/// Mean in-domain probe curve per strategy (run ids without the seed suffix).
fn probe_overlay(probes: &CsvTable) -> Result<LinePlot> {
    let col = |n: &str| probes.column(n).ok_or_else(|| Error::Config(format!("probe table lacks `{n}`")));
    let (rid, set, ep, loss) = (col("run_id")?, col("probe_set")?, col("epoch")?, col("ssl_loss")?);
    let mut curves: BTreeMap<String, BTreeMap<usize, Vec<f64>>> = BTreeMap::new();
    let mut order = Vec::new();
    let mut references = Vec::new();
    for r in probes.rows.iter().filter(|r| r[set] == "test_id") {
        let value: f64 = r[loss].parse().map_err(|_| Error::Config(format!("bad probe row {r:?}")))?;
        if r[rid] == "pretrained" {
            if references.is_empty() {
                references.push(("pretrained".to_string(), value));
            }
            continue;
        }
        let label = r[rid].rsplit_once("-s").map_or(r[rid].as_str(), |(l, _)| l).to_string();
        let epoch: usize = r[ep].parse().map_err(|_| Error::Config(format!("bad probe row {r:?}")))?;
        if !order.contains(&label) {
            order.push(label.clone());
        }
        curves.entry(label).or_default().entry(epoch).or_default().push(value);
    }
    Ok(LinePlot {
        title: "SSL probe loss during fine-tuning (mean over seeds)".into(),
        x_label: "fine-tuning epoch".into(),
        y_label: "SSL probe loss".into(),
        series: order
            .iter()
            .map(|label| Series {
                name: label.clone(),
                points: curves[label]
                    .iter()
                    .map(|(e, v)| (*e as f64, v.iter().sum::<f64>() / v.len() as f64))
                    .collect(),
                dashed: false,
            })
            .collect(),
        references,
        log_x: false,
    })
}
