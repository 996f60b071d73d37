//! Forgetting probe: SSL loss of fine-tuned checkpoints against the teacher
//! frozen at the end of pretraining, with fixed per-utterance masks.

use std::path::{Path, PathBuf};

use crate::checkpoint::Checkpoint;
use crate::data::Corpus;
use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::numerics::{Graph, ParamStore, Tensor};
use crate::report::{CsvTable, LinePlot, Series};
use crate::ssl::{sample_mask, ssl_loss_against, utterance_rng, MaskSpec, TeacherState};

#[derive(Clone, Debug)]
struct ProbeItem {
    features: Tensor,
    targets: Tensor,
    mask: Vec<bool>,
}

/// Probe corpus with teacher targets and masks fixed once.
#[derive(Clone, Debug)]
pub struct ProbeSet {
    pub id: String,
    pub mask_seed: u64,
    items: Vec<ProbeItem>,
}

fn mask_hash(masks: impl Iterator<Item = bool>) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for m in masks {
        h ^= u64::from(m) + 1;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

impl ProbeSet {
    /// Utterance `i` gets its mask from stream `i` of `mask_seed`, the same
    /// masks [`crate::ssl::evaluate_ssl`] would draw.
    pub fn new(
        id: &str,
        corpus: &Corpus,
        encoder: &Encoder,
        teacher: &TeacherState,
        mask: &MaskSpec,
        mask_seed: u64,
    ) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::EmptyCorpus(format!("probe set `{id}`")));
        }
        mask.validate()?;
        let items = corpus
            .iter()
            .enumerate()
            .map(|(i, u)| {
                let features = u.features_tensor();
                let targets = teacher.targets(encoder, &features)?;
                let mask = sample_mask(targets.rows(), mask, &mut utterance_rng(mask_seed, i));
                Ok(ProbeItem {
                    features,
                    targets,
                    mask,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            id: id.to_string(),
            mask_seed,
            items,
        })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Hash of every mask in the set, in order.
    pub fn mask_hash(&self) -> u64 {
        mask_hash(self.items.iter().flat_map(|it| it.mask.iter().copied()))
    }

    /// Mean SSL loss of `encoder` with `params` over the set.
    pub fn evaluate(&self, encoder: &Encoder, params: &ParamStore) -> Result<f64> {
        let mut total = 0.0;
        for it in &self.items {
            let mut g = Graph::no_grad(params);
            let l = ssl_loss_against(&mut g, encoder, &it.features, &it.targets, &it.mask)?;
            g.check_finite()?;
            total += g.value(l).item();
        }
        Ok(total / self.items.len() as f64)
    }
}

/// Mean probe loss of a checkpoint, attachments included.
pub fn probe_checkpoint(checkpoint: &Checkpoint, teacher: &TeacherState, set: &ProbeSet) -> Result<f64> {
    for (name, p) in teacher.params.iter() {
        let c = checkpoint
            .params
            .value(name)
            .map_err(|_| Error::shape(format!("checkpoint lacks teacher parameter `{name}`")))?;
        if c.shape() != p.value.shape() {
            return Err(Error::shape(format!(
                "`{name}`: checkpoint {:?}, teacher {:?}",
                c.shape(),
                p.value.shape()
            )));
        }
    }
    set.evaluate(&checkpoint.meta.encoder, &checkpoint.params)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeReport {
    pub run_id: String,
    pub probe_set: String,
    pub mask_seed: u64,
    pub mask_hash: u64,
    /// `(epoch, ssl_loss)` with strictly increasing epochs.
    pub points: Vec<(usize, f64)>,
}

/// `epoch_{N}.ckpt` files of a run directory, sorted by `N`.
pub fn list_checkpoints(run_dir: &Path) -> Result<Vec<(usize, PathBuf)>> {
    let entries = std::fs::read_dir(run_dir).map_err(|e| Error::io(run_dir, e))?;
    let mut out = Vec::new();
    for e in entries {
        let e = e.map_err(|e| Error::io(run_dir, e))?;
        let name = e.file_name();
        let Some(name) = name.to_str() else { continue };
        let epoch = name
            .strip_prefix("epoch_")
            .and_then(|s| s.strip_suffix(".ckpt"))
            .and_then(|s| s.parse::<usize>().ok());
        if let Some(epoch) = epoch {
            out.push((epoch, e.path()));
        }
    }
    out.sort();
    Ok(out)
}

/// Probes every epoch checkpoint of `run_dir` on each set.
pub fn probe_series(run_dir: &Path, run_id: &str, teacher: &TeacherState, sets: &[ProbeSet]) -> Result<Vec<ProbeReport>> {
    let ckpts = list_checkpoints(run_dir)?;
    if ckpts.is_empty() {
        return Err(Error::Missing(format!("checkpoints in {}", run_dir.display())));
    }
    let mut reports: Vec<ProbeReport> = sets
        .iter()
        .map(|s| ProbeReport {
            run_id: run_id.to_string(),
            probe_set: s.id.clone(),
            mask_seed: s.mask_seed,
            mask_hash: s.mask_hash(),
            points: Vec::with_capacity(ckpts.len()),
        })
        .collect();
    for (epoch, path) in &ckpts {
        let ckpt = Checkpoint::load(path)?;
        for (set, report) in sets.iter().zip(&mut reports) {
            if set.mask_hash() != report.mask_hash {
                return Err(Error::Config(format!("masks of probe set `{}` changed mid-series", set.id)));
            }
            report.points.push((*epoch, probe_checkpoint(&ckpt, teacher, set)?));
        }
    }
    Ok(reports)
}

pub const PROBE_HEADER: [&str; 4] = ["run_id", "probe_set", "epoch", "ssl_loss"];

pub fn probe_table(reports: &[ProbeReport]) -> CsvTable {
    let mut t = CsvTable::new(&PROBE_HEADER);
    for r in reports {
        for (epoch, loss) in &r.points {
            t.push(vec![r.run_id.clone(), r.probe_set.clone(), epoch.to_string(), loss.to_string()]);
        }
    }
    t
}

/// One line per (run, probe set); OOD sets dashed.
pub fn probe_plot(reports: &[ProbeReport], title: &str, references: Vec<(String, f64)>) -> LinePlot {
    LinePlot {
        title: title.to_string(),
        x_label: "fine-tuning epoch".into(),
        y_label: "SSL probe loss".into(),
        series: reports
            .iter()
            .map(|r| Series {
                name: format!("{} / {}", r.run_id, r.probe_set),
                points: r.points.iter().map(|&(e, l)| (e as f64, l)).collect(),
                dashed: r.probe_set.contains("ood"),
            })
            .collect(),
        references,
        log_x: false,
    }
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::checkpoint::CheckpointMeta;
    use crate::data::Utterance;
    use crate::encoder::EncoderConfig;
    use crate::ssl::evaluate_ssl;

    fn setup() -> (Encoder, ParamStore, TeacherState, Corpus) {
        let cfg = EncoderConfig {
            d_in: 4,
            conv_channels: 6,
            blocks: 2,
            d_model: 8,
            heads: 2,
            d_ff: 16,
            ..EncoderConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (e, p) = Encoder::init(cfg, &mut rng).unwrap();
        let mut teacher_params = p.clone();
        for (_, q) in teacher_params.iter_mut() {
            q.value = q.value.map(|v| v * 0.9);
        }
        let teacher = TeacherState::from_student(&teacher_params, 0.999).unwrap();
        let corpus = Corpus {
            utterances: (0..5)
                .map(|i| Utterance {
                    id: format!("p{i}"),
                    frames: 12,
                    dim: 4,
                    features: (0..48).map(|_| rng.random::<f32>()).collect(),
                    text: "a".into(),
                    domain: "indomain".into(),
                })
                .collect(),
        };
        (e, p, teacher, corpus)
    }

    #[test]
    fn identity_attachments_reproduce_the_pretrained_loss() {
        let (e, p, teacher, corpus) = setup();
        let spec = MaskSpec::default();
        let set = ProbeSet::new("id", &corpus, &e, &teacher, &spec, 5).unwrap();
        let reference = evaluate_ssl(&e, &p, &teacher, &corpus, &spec, 5).unwrap();
        for adapt in 0..3 {
            let mut enc = e.clone();
            let mut params = p.clone();
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            match adapt {
                1 => enc.inject_lora(&mut params, 2, &mut rng).unwrap(),
                2 => enc.inject_adapters(&mut params, 3, &mut rng).unwrap(),
                _ => {}
            }
            let ckpt = Checkpoint {
                meta: CheckpointMeta {
                    encoder: enc,
                    run_id: "r".into(),
                    epoch: 1,
                },
                params,
            };
            let a = probe_checkpoint(&ckpt, &teacher, &set).unwrap();
            let b = probe_checkpoint(&ckpt, &teacher, &set).unwrap();
            assert_eq!(a.to_bits(), reference.to_bits());
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn series_over_a_run_directory() {
        let (e, p, teacher, corpus) = setup();
        let dir = tempfile::tempdir().unwrap();
        assert!(probe_series(dir.path(), "r", &teacher, &[]).is_err());
        for epoch in [2, 1, 10] {
            Checkpoint {
                meta: CheckpointMeta {
                    encoder: e.clone(),
                    run_id: "r".into(),
                    epoch,
                },
                params: p.clone(),
            }
            .save(&dir.path().join(format!("epoch_{epoch}.ckpt")))
            .unwrap();
        }
        let set = ProbeSet::new("id", &corpus, &e, &teacher, &MaskSpec::default(), 3).unwrap();
        let reports = probe_series(dir.path(), "r", &teacher, &[set]).unwrap();
        let epochs: Vec<usize> = reports[0].points.iter().map(|p| p.0).collect();
        assert_eq!(epochs, vec![1, 2, 10]);
        assert!(reports[0].points.windows(2).all(|w| w[0].1 == w[1].1));
        let table = probe_table(&reports);
        assert_eq!(table.header, PROBE_HEADER);
        assert_eq!(table.rows.len(), 3);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let (e, p, teacher, corpus) = setup();
        let set = ProbeSet::new("id", &corpus, &e, &teacher, &MaskSpec::default(), 3).unwrap();
        let mut params = p;
        params.remove("enc.final_norm.gain");
        params
            .insert("enc.final_norm.gain", Tensor::zeros(&[3]), crate::numerics::ParamGroup::Transformer)
            .unwrap();
        let ckpt = Checkpoint {
            meta: CheckpointMeta {
                encoder: e,
                run_id: "r".into(),
                epoch: 1,
            },
            params,
        };
        assert!(matches!(probe_checkpoint(&ckpt, &teacher, &set), Err(Error::Shape(_))));
    }
}
