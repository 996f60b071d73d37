//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Criteria 8 and 9 run the default experiment twice end to end (about
//! 20 minutes on one core).

use std::collections::BTreeMap;
use std::path::Path;
use std::time::{Duration, Instant};

use clft_core::checkpoint::{Checkpoint, CheckpointMeta};
use clft_core::ctc::{ctc_loss, ctc_loss_var, DownstreamHead, Vocabulary};
use clft_core::data::{generate_corpus, load_corpus, save_corpus, Corpus, DomainSpec, Lexicon, Utterance};
use clft_core::encoder::{Encoder, EncoderConfig};
use clft_core::experiment::{final_metrics, run_experiment, ExperimentConfig};
use clft_core::numerics::{finite_diff_check, AdamConfig, Graph, ParamGroup, ParamStore, Tensor};
use clft_core::report::CsvTable;
use clft_core::ssl::{sample_mask, ssl_loss_against, utterance_rng, MaskSpec, TeacherState};
use clft_core::strategies::{
    apply_trainable, diagonal_fisher, ewc_penalty, ewc_penalty_value, finetune_step, record_objective, trainable_set,
    FisherInfo, LabelledItem, Model, ReplayGate, ReplayItem, StrategyConfig, StrategyKind, TrainState,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn tiny_config() -> EncoderConfig {
    EncoderConfig {
        d_in: 4,
        conv_channels: 6,
        blocks: 2,
        d_model: 8,
        heads: 2,
        d_ff: 16,
        ..EncoderConfig::default()
    }
}

fn random_corpus(n: usize, seed: u64) -> Corpus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Corpus {
        utterances: (0..n)
            .map(|i| {
                let t = 16 + i % 5;
                Utterance {
                    id: format!("u{i}"),
                    frames: t,
                    dim: 4,
                    features: (0..t * 4).map(|_| rng.random::<f32>() * 2.0 - 1.0).collect(),
                    text: ["ab", "c d", "gfe"][i % 3].into(),
                    domain: "indomain".into(),
                }
            })
            .collect(),
    }
}

fn some_mask(t: usize, rng: &mut impl Rng) -> Vec<bool> {
    let mut m = sample_mask(t, &MaskSpec::default(), rng);
    m[t / 2] = true;
    m
}

fn brute_force_ctc(log_probs: &Tensor, target: &[usize]) -> f64 {
    let (t, k) = (log_probs.rows(), log_probs.cols());
    let mut total = 0.0;
    let mut path = vec![0usize; t];
    loop {
        let mut collapsed = Vec::new();
        let mut prev = usize::MAX;
        for &s in &path {
            if s != prev && s != 0 {
                collapsed.push(s);
            }
            prev = s;
        }
        if collapsed == target {
            total += path.iter().enumerate().map(|(i, &s)| log_probs.get(i, s)).sum::<f64>().exp();
        }
        let mut i = 0;
        loop {
            if i == t {
                return -total.ln();
            }
            path[i] += 1;
            if path[i] < k {
                break;
            }
            path[i] = 0;
            i += 1;
        }
    }
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    let mut cases = 0;
    while cases < 200 {
        let t = rng.random_range(1..=6);
        let labels = rng.random_range(1..=4);
        let k = labels + 1;
        let len = rng.random_range(0..=3);
        let target: Vec<usize> = (0..len).map(|_| rng.random_range(1..k)).collect();
        let repeats = target.windows(2).filter(|w| w[0] == w[1]).count();
        if target.len() + repeats > t {
            continue;
        }
        let logits = Tensor::randn(&[t, k], 1.5, &mut rng);
        let rows: Vec<Vec<f64>> = (0..t)
            .map(|r| {
                let row = logits.row(r);
                let z = row.iter().map(|v| v.exp()).sum::<f64>().ln();
                row.iter().map(|v| v - z).collect()
            })
            .collect();
        let lp = Tensor::from_rows(&rows).map_err(|e| e.to_string())?;
        let fast = ctc_loss(&lp, &target).map_err(|e| e.to_string())?.loss;
        let slow = brute_force_ctc(&lp, &target);
        worst = worst.max((fast - slow).abs());
        cases += 1;
    }
    let elapsed = start.elapsed();
    ensure(worst <= 1e-6, format!("max |diff| {worst:e}"))?;
    ensure(elapsed <= Duration::from_secs(10), format!("took {elapsed:?}"))?;
    Ok(format!("200 cases, max |diff| {worst:.2e}, {:.2}s", elapsed.as_secs_f64()))
}

fn criterion_2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (encoder, params) = Encoder::init(tiny_config(), &mut rng).map_err(|e| e.to_string())?;
    let x = Tensor::randn(&[18, 4], 1.0, &mut rng);
    let names: Vec<String> = params.names().map(String::from).collect();
    let refs: Vec<&str> = names.iter().map(String::as_str).collect();
    let mut lines = Vec::new();
    let mut check = |label: &str, store: &ParamStore, names: &[&str], f: &mut dyn FnMut(&mut Graph) -> clft_core::Result<clft_core::numerics::Var>| -> Result<(), String> {
        let r = finite_diff_check(store, names, 1e-5, 60, 7, |g| f(g)).map_err(|e| e.to_string())?;
        ensure(r.checked >= 50, format!("{label}: only {} coordinates", r.checked))?;
        ensure(r.max_rel_error <= 1e-4, format!("{label}: max rel error {:e} at {:?}", r.max_rel_error, r.worst))?;
        lines.push(format!("{label} {:.1e}", r.max_rel_error));
        Ok(())
    };

    let proj = Tensor::randn(&[5, 8], 1.0, &mut rng);
    check("encoder", &params, &refs, &mut |g| {
        let out = encoder.forward(g, &x, None)?;
        let p = g.constant(proj.clone());
        let m = g.mul(out.last(), p);
        let front = g.square(out.front_end);
        let a = g.sum(m);
        let b = g.mean(front);
        Ok(g.add(a, b))
    })?;

    let vocab = Vocabulary::default();
    let head = DownstreamHead::new(8, 12, &vocab);
    let mut head_params = ParamStore::new();
    head.init_params(&mut head_params, &mut rng).map_err(|e| e.to_string())?;
    let head_names: Vec<String> = head_params.names().map(String::from).collect();
    let head_refs: Vec<&str> = head_names.iter().map(String::as_str).collect();
    let latents = Tensor::randn(&[9, 8], 1.0, &mut rng);
    let labels = vocab.encode("bad").map_err(|e| e.to_string())?;
    check("head", &head_params, &head_refs, &mut |g| {
        let l = g.constant(latents.clone());
        let lp = head.forward(g, l)?;
        ctc_loss_var(g, lp, &labels)
    })?;

    let mut teacher_params = params.clone();
    for (_, p) in teacher_params.iter_mut() {
        p.value = p.value.map(|v| v * 0.8 + 0.01);
    }
    let teacher = TeacherState::from_student(&teacher_params, 0.999).map_err(|e| e.to_string())?;
    let targets = teacher.targets(&encoder, &x).map_err(|e| e.to_string())?;
    let mask = some_mask(targets.rows(), &mut rng);
    check("ssl_loss", &params, &refs, &mut |g| ssl_loss_against(g, &encoder, &x, &targets, &mask))?;

    let mut fisher = FisherInfo::zeros_like(&params);
    for v in fisher.values.values_mut() {
        *v = Tensor::randn(v.shape(), 1.0, &mut rng).map(f64::abs);
    }
    let mut theta = params.clone();
    for (_, p) in theta.iter_mut() {
        p.value = p.value.map(|v| v + 0.05);
    }
    check("ewc_penalty", &theta, &refs, &mut |g| ewc_penalty(g, &params, &fisher, 50.0))?;

    let strategy = StrategyConfig::new(StrategyKind::Ewc);
    let (model, mut ft_params) =
        Model::prepare(&encoder, &params, &strategy, &vocab, 12, 3).map_err(|e| e.to_string())?;
    for (_, p) in ft_params.iter_mut() {
        if p.group.is_pretrained_encoder() {
            p.value = p.value.map(|v| v - 0.03);
        }
    }
    let corpus = random_corpus(3, 4);
    let ds: Vec<LabelledItem> = corpus
        .iter()
        .map(|u| LabelledItem {
            features: u.features_tensor(),
            labels: vocab.encode(&u.text).unwrap(),
        })
        .collect();
    let replay: Vec<ReplayItem> = corpus
        .iter()
        .enumerate()
        .map(|(i, u)| {
            let features = u.features_tensor();
            let targets = teacher.targets(&encoder, &features).unwrap();
            let mask = some_mask(targets.rows(), &mut utterance_rng(5, i));
            ReplayItem { features, targets, mask }
        })
        .collect();
    let fisher_enc = FisherInfo {
        values: fisher.values.clone(),
        corpus_id: "toy".into(),
        samples: 1,
    };
    let state = TrainState::new(params.clone(), teacher.clone(), Some(fisher_enc), &strategy, AdamConfig::default(), 1);
    let ft_names: Vec<String> = ft_params.names().map(String::from).collect();
    let ft_refs: Vec<&str> = ft_names.iter().map(String::as_str).collect();
    check("finetune_step objective", &ft_params, &ft_refs, &mut |g| {
        Ok(record_objective(g, &model, &ds, Some(&replay), &strategy, &state)?.0)
    })?;
    Ok(lines.join(", "))
}

fn criterion_3() -> Outcome {
    let mut worst = 0.0f64;
    for (i, adapter) in [(0u64, false), (1, true)] {
        let mut rng = ChaCha8Rng::seed_from_u64(30 + i);
        let (base, params) = Encoder::init(EncoderConfig::default(), &mut rng).map_err(|e| e.to_string())?;
        let mut enc = base.clone();
        let mut injected = params.clone();
        if adapter {
            enc.inject_adapters(&mut injected, 8, &mut rng).map_err(|e| e.to_string())?;
        } else {
            enc.inject_lora(&mut injected, 16, &mut rng).map_err(|e| e.to_string())?;
        }
        for _ in 0..20 {
            let t = rng.random_range(8..80);
            let x = Tensor::randn(&[t, 16], 1.0, &mut rng);
            let a = base.encode(&params, &x).map_err(|e| e.to_string())?;
            let b = enc.encode(&injected, &x).map_err(|e| e.to_string())?;
            for (la, lb) in a.iter().zip(&b) {
                worst = worst.max(la.max_abs_diff(lb));
            }
        }
    }
    ensure(worst <= 1e-12, format!("max abs diff {worst:e}"))?;
    Ok(format!("LoRA r16 and adapters m8, 20 inputs each, max abs diff {worst:.1e}"))
}

fn criterion_4() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (_, star) = Encoder::init(tiny_config(), &mut rng).map_err(|e| e.to_string())?;
    let mut fisher = FisherInfo::zeros_like(&star);
    for v in fisher.values.values_mut() {
        *v = Tensor::randn(v.shape(), 1.0, &mut rng).map(f64::abs);
    }
    let zero = ewc_penalty_value(&star, &star, &fisher, 50.0).map_err(|e| e.to_string())?;
    ensure(zero == 0.0, format!("penalty at the anchor is {zero:e}"))?;

    let mut theta = star.clone();
    for (_, p) in theta.iter_mut() {
        let noise = Tensor::randn(p.value.shape(), 0.3, &mut rng);
        p.value = Tensor::new(
            p.value.shape().to_vec(),
            p.value.data().iter().zip(noise.data()).map(|(a, b)| a + b).collect(),
        )
        .unwrap();
    }
    let lambda = 50.0;
    let mut g = Graph::with_all_grads(&theta);
    let pen = ewc_penalty(&mut g, &star, &fisher, lambda).map_err(|e| e.to_string())?;
    let grads = g.backward(pen).map_err(|e| e.to_string())?;
    let mut worst = 0.0f64;
    for (name, f) in &fisher.values {
        let (t, s) = (theta.value(name).unwrap(), star.value(name).unwrap());
        for i in 0..f.len() {
            let want = lambda * f.data()[i] * (t.data()[i] - s.data()[i]);
            worst = worst.max((grads[name].data()[i] - want).abs());
        }
    }
    ensure(worst <= 1e-10, format!("gradient error {worst:e}"))?;

    let mut a = ParamStore::new();
    a.insert("w", Tensor::vector(vec![1.0, 2.0]), ParamGroup::Transformer).unwrap();
    let mut b = ParamStore::new();
    b.insert("w", Tensor::vector(vec![0.0, 0.0]), ParamGroup::Transformer).unwrap();
    let hand = FisherInfo {
        values: [("w".to_string(), Tensor::vector(vec![0.5, 1.0]))].into(),
        corpus_id: "hand".into(),
        samples: 1,
    };
    let v = ewc_penalty_value(&a, &b, &hand, 50.0).map_err(|e| e.to_string())?;
    ensure((v - 112.5).abs() <= 1e-9, format!("hand case {v}"))?;
    Ok(format!("anchor 0 exactly, gradient error {worst:.1e}, hand case {v}"))
}

fn criterion_5() -> Outcome {
    let mut p = ParamStore::new();
    p.insert("theta", Tensor::scalar(0.0), ParamGroup::Transformer).unwrap();
    p.insert("idle", Tensor::scalar(3.0), ParamGroup::Transformer).unwrap();
    let names = vec!["idle".to_string(), "theta".to_string()];
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let xs: Vec<f64> = (0..10_000).map(|_| StandardNormal.sample(&mut rng)).collect();
    let f = diagonal_fisher(&p, &names, xs.len(), |g, i| {
        let t = g.param("theta")?;
        let x = g.constant(Tensor::scalar(xs[i]));
        let d = g.sub(t, x);
        let s = g.square(d);
        Ok(g.scale(s, 0.5))
    })
    .map_err(|e| e.to_string())?;
    let idle = f["idle"].item();
    let gauss = f["theta"].item();
    ensure(idle == 0.0, format!("untouched parameter has F = {idle}"))?;
    ensure((gauss - 1.0).abs() <= 0.05, format!("Gaussian toy F = {gauss}"))?;
    Ok(format!("untouched F = 0, Gaussian toy F = {gauss:.4}"))
}

fn criterion_6() -> Outcome {
    let mut gate = ReplayGate::new(1.0, 6);
    let first = (0..10_000).filter(|_| gate.fire(1)).count();
    ensure(first == 0, format!("{first} fires in epoch 1"))?;
    let mut gate = ReplayGate::new(0.25, 7);
    let n = 100_000;
    let fired = (0..n).filter(|_| gate.fire(2)).count();
    let freq = fired as f64 / n as f64;
    ensure((0.2459..=0.2541).contains(&freq), format!("frequency {freq}"))?;
    Ok(format!("epoch 1: 0/10000 fires, p = 0.25: frequency {freq:.5} over {n} draws"))
}

fn criterion_7() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(70);
    let (encoder, theta_star) = Encoder::init(tiny_config(), &mut rng).map_err(|e| e.to_string())?;
    let teacher = TeacherState::from_student(&theta_star, 0.999).map_err(|e| e.to_string())?;
    let vocab = Vocabulary::default();
    let corpus = random_corpus(8, 71);
    let items: Vec<LabelledItem> = corpus
        .iter()
        .map(|u| LabelledItem {
            features: u.features_tensor(),
            labels: vocab.encode(&u.text).unwrap(),
        })
        .collect();
    let replay_items: Vec<ReplayItem> = items
        .iter()
        .enumerate()
        .map(|(i, it)| {
            let targets = teacher.targets(&encoder, &it.features).unwrap();
            let mask = some_mask(targets.rows(), &mut utterance_rng(74, i));
            ReplayItem {
                features: it.features.clone(),
                targets,
                mask,
            }
        })
        .collect();
    let mut fisher = FisherInfo::zeros_like(&theta_star.filter_groups(|g| g.is_pretrained_encoder()));
    for v in fisher.values.values_mut() {
        *v = v.map(|_| 0.2);
    }
    let mut summary = Vec::new();
    for kind in StrategyKind::ALL {
        let strategy = StrategyConfig {
            rank: 2,
            bottleneck: 3,
            p_replay: 0.5,
            ..StrategyConfig::new(kind)
        };
        let (model, mut params) =
            Model::prepare(&encoder, &theta_star, &strategy, &vocab, 8, 72).map_err(|e| e.to_string())?;
        let mut state = TrainState::new(
            theta_star.clone(),
            teacher.clone(),
            Some(fisher.clone()),
            &strategy,
            AdamConfig {
                lr: 1e-2,
                ..AdamConfig::default()
            },
            73,
        );
        let mut frozen_checks = 0usize;
        for step in 0..50 {
            let epoch = 1 + step / 10;
            state.epoch = epoch;
            let set = trainable_set(&params, &model.encoder, &strategy, epoch).map_err(|e| e.to_string())?;
            apply_trainable(&mut params, &set);
            let before = params.clone();
            let batch: Vec<LabelledItem> = (0..2).map(|j| items[(2 * step + j) % items.len()].clone()).collect();
            let replay = kind == StrategyKind::Replay && state.gate.fire(epoch);
            let replay = replay.then_some(&replay_items[step % 3..step % 3 + 2]);
            finetune_step(&model, &mut params, &batch, replay, &strategy, &mut state)
                .map_err(|e| e.to_string())?;
            for (name, p) in before.iter() {
                let after = params.value(name).unwrap();
                if set.contains(name) {
                    continue;
                }
                frozen_checks += 1;
                let same = p.value.data().iter().zip(after.data()).all(|(a, b)| a.to_bits() == b.to_bits());
                ensure(same, format!("{kind}: `{name}` changed at step {step} while frozen"))?;
            }
        }
        summary.push(format!("{kind} {frozen_checks}"));
        if kind == StrategyKind::TwoPhase {
            let f = strategy.freeze_epochs;
            let encoder_in = |epoch| -> Result<bool, String> {
                let set = trainable_set(&params, &model.encoder, &strategy, epoch).map_err(|e| e.to_string())?;
                Ok(set.iter().any(|n| params.get(n).unwrap().group.is_pretrained_encoder()))
            };
            ensure(!encoder_in(f)?, "two_phase trains the encoder before the flip")?;
            ensure(encoder_in(f + 1)?, "two_phase does not unfreeze at freeze_epochs + 1")?;
        }
    }
    Ok(format!(
        "50 steps per strategy; frozen-parameter checks: {}; two_phase flips at epoch 4",
        summary.join(", ")
    ))
}

struct EndToEnd {
    elapsed: Duration,
    metrics: CsvTable,
    probe: CsvTable,
    config: ExperimentConfig,
}

fn run_default(dir: &Path) -> Result<EndToEnd, String> {
    let config = ExperimentConfig::default();
    let start = Instant::now();
    run_experiment(&config, dir, true).map_err(|e| e.to_string())?;
    Ok(EndToEnd {
        elapsed: start.elapsed(),
        metrics: CsvTable::read(&dir.join("metrics.csv")).map_err(|e| e.to_string())?,
        probe: CsvTable::read(&dir.join("probe.csv")).map_err(|e| e.to_string())?,
        config,
    })
}

fn criterion_8(run: &EndToEnd) -> Outcome {
    let finals = final_metrics(&run.metrics).map_err(|e| e.to_string())?;
    let seeds = &run.config.seeds;
    let label_of = |kind: StrategyKind| -> Vec<String> {
        run.config.strategies.iter().filter(|s| s.kind == kind).map(|s| s.label()).collect()
    };
    let value = |label: &str, seed: u64, split: &str, metric: &str| -> Result<f64, String> {
        finals
            .get(&(format!("{label}-s{seed}"), split.to_string(), metric.to_string()))
            .copied()
            .ok_or_else(|| format!("missing {label}-s{seed} {split} {metric}"))
    };
    let mean = |label: &str, split: &str| -> Result<f64, String> {
        let v = seeds.iter().map(|&s| value(label, s, split, "cer")).collect::<Result<Vec<_>, _>>()?;
        Ok(v.iter().sum::<f64>() / v.len() as f64)
    };
    let mut best_ewc: Option<(String, f64)> = None;
    for label in label_of(StrategyKind::Ewc) {
        let v = mean(&label, "valid")?;
        if best_ewc.as_ref().is_none_or(|(_, b)| v < *b) {
            best_ewc = Some((label, v));
        }
    }
    let best_ewc = best_ewc.ok_or("no ewc runs")?.0;
    let full = label_of(StrategyKind::FullFt).remove(0);
    let frozen = label_of(StrategyKind::Frozen).remove(0);
    let lora = label_of(StrategyKind::Lora).remove(0);
    let replay = label_of(StrategyKind::Replay).remove(0);
    let cl = [best_ewc.clone(), lora.clone(), replay.clone()];

    let mut probe: BTreeMap<(String, usize), f64> = BTreeMap::new();
    let (rid, set, ep, loss) = (
        run.probe.column("run_id").unwrap(),
        run.probe.column("probe_set").unwrap(),
        run.probe.column("epoch").unwrap(),
        run.probe.column("ssl_loss").unwrap(),
    );
    for r in run.probe.rows.iter().filter(|r| r[set] == "test_id") {
        probe.insert((r[rid].clone(), r[ep].parse().unwrap()), r[loss].parse().unwrap());
    }
    let last_epoch = run.config.finetune.epochs;
    let probe_of = |label: &str, seed: u64| -> Result<f64, String> {
        probe
            .get(&(format!("{label}-s{seed}"), last_epoch))
            .copied()
            .ok_or_else(|| format!("missing probe for {label}-s{seed}"))
    };

    let mut failures = Vec::new();
    let mut notes = Vec::new();
    for &seed in seeds {
        let f = probe_of(&full, seed)?;
        let others = cl.iter().map(|l| probe_of(l, seed).map(|v| (l, v))).collect::<Result<Vec<_>, _>>()?;
        notes.push(format!(
            "seed {seed} probe full_ft {f:.4} vs {}",
            others.iter().map(|(l, v)| format!("{l} {v:.4}")).collect::<Vec<_>>().join(" ")
        ));
        for (l, v) in &others {
            if f <= *v {
                failures.push(format!("(a) seed {seed}: probe full_ft {f:.4} <= {l} {v:.4}"));
            }
        }
        let fz = value(&frozen, seed, "test_id", "cer")?;
        for s in &run.config.strategies {
            let l = s.label();
            if l != frozen {
                let v = value(&l, seed, "test_id", "cer")?;
                if v >= fz {
                    failures.push(format!("(b) seed {seed}: {l} CER {v:.4} >= frozen {fz:.4}"));
                }
            }
        }
    }
    let full_ood = mean(&full, "test_ood")?;
    let best_cl_ood = cl
        .iter()
        .map(|l| mean(l, "test_ood").map(|v| (l.clone(), v)))
        .collect::<Result<Vec<_>, _>>()?
        .into_iter()
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .unwrap();
    notes.push(format!(
        "OOD CER full_ft {full_ood:.4}, best CL {} {:.4}",
        best_cl_ood.0, best_cl_ood.1
    ));
    if best_cl_ood.1 > full_ood {
        failures.push(format!("(c) no CL strategy reaches full_ft OOD CER {full_ood:.4}"));
    }
    if run.elapsed > Duration::from_secs(30 * 60) {
        failures.push(format!("runtime {:?} exceeds 30 min", run.elapsed));
    }
    notes.push(format!("best ewc {best_ewc}, runtime {:.0}s", run.elapsed.as_secs_f64()));
    for n in &notes {
        println!("    {n}");
    }
    if failures.is_empty() {
        Ok(notes.last().unwrap().clone())
    } else {
        Err(failures.join("; "))
    }
}

fn criterion_9(first: &EndToEnd, second: &EndToEnd) -> Outcome {
    ensure(first.metrics.to_bytes() == second.metrics.to_bytes(), "metrics.csv differs between runs")?;
    ensure(first.probe.to_bytes() == second.probe.to_bytes(), "probe.csv differs between runs")?;
    Ok(format!(
        "metrics.csv ({} rows) and probe.csv ({} rows) byte-identical",
        first.metrics.rows.len(),
        first.probe.rows.len()
    ))
}

fn criterion_10() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let vocab = Vocabulary::default();
    let (lexicon, _) = Lexicon::generate(&vocab, 40, 10).map_err(|e| e.to_string())?.split();
    let enc = EncoderConfig::default();
    let mut details = Vec::new();
    for (i, domain) in [DomainSpec::indomain(), DomainSpec::ood()].iter().enumerate() {
        let corpus = generate_corpus(domain, &vocab, &lexicon, 25, (5, 15), 100 + i as u64, "rt", |t| {
            enc.output_frames(t)
        })
        .map_err(|e| e.to_string())?;
        let manifest = save_corpus(&corpus, &dir.path().join(format!("c{i}")), false).map_err(|e| e.to_string())?;
        let back = load_corpus(&manifest, &vocab).map_err(|e| e.to_string())?;
        ensure(back.len() == corpus.len(), "corpus size changed")?;
        for (a, b) in corpus.iter().zip(back.iter()) {
            let same = a.features.iter().zip(&b.features).all(|(x, y)| x.to_bits() == y.to_bits());
            ensure(same && a.text == b.text && a.id == b.id && a.frames == b.frames, format!("`{}` differs", a.id))?;
        }
        ensure(corpus.checksum() == back.checksum(), "checksum differs")?;
    }
    details.push("corpora (2 domains x 25 utterances) bit-exact".to_string());

    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let (mut encoder, mut params) = Encoder::init(EncoderConfig::default(), &mut rng).map_err(|e| e.to_string())?;
    encoder.inject_lora(&mut params, 16, &mut rng).map_err(|e| e.to_string())?;
    let ckpt = Checkpoint {
        meta: CheckpointMeta {
            encoder,
            run_id: "roundtrip".into(),
            epoch: 7,
        },
        params,
    };
    let path = dir.path().join("epoch_7.ckpt");
    ckpt.save(&path).map_err(|e| e.to_string())?;
    let back = Checkpoint::load(&path).map_err(|e| e.to_string())?;
    ensure(back.to_bytes() == ckpt.to_bytes(), "checkpoint bytes differ")?;
    for ((na, a), (nb, b)) in ckpt.params.iter().zip(back.params.iter()) {
        let same = a.value.data().iter().zip(b.value.data()).all(|(x, y)| x.to_bits() == y.to_bits());
        ensure(na == nb && same && a.trainable == b.trainable, format!("`{na}` differs"))?;
    }
    details.push(format!("checkpoint ({} tensors) bit-exact", ckpt.params.len()));
    Ok(details.join(", "))
}

fn report(n: usize, outcome: Outcome, failed: &mut Vec<usize>) {
    match outcome {
        Ok(msg) => println!("PASS criterion {n}: {msg}"),
        Err(msg) => {
            println!("FAIL criterion {n}: {msg}");
            failed.push(n);
        }
    }
}

fn main() {
    let mut failed = Vec::new();
    report(1, criterion_1(), &mut failed);
    report(2, criterion_2(), &mut failed);
    report(3, criterion_3(), &mut failed);
    report(4, criterion_4(), &mut failed);
    report(5, criterion_5(), &mut failed);
    report(6, criterion_6(), &mut failed);
    report(7, criterion_7(), &mut failed);

    let root = tempfile::tempdir().expect("temporary directory");
    let first = run_default(&root.path().join("first"));
    match &first {
        Ok(run) => report(8, criterion_8(run), &mut failed),
        Err(e) => report(8, Err(format!("experiment failed: {e}")), &mut failed),
    }
    let second = run_default(&root.path().join("second"));
    match (&first, &second) {
        (Ok(a), Ok(b)) => report(9, criterion_9(a, b), &mut failed),
        (Err(e), _) | (_, Err(e)) => report(9, Err(format!("experiment failed: {e}")), &mut failed),
    }
    report(10, criterion_10(), &mut failed);

    if !failed.is_empty() {
        println!("{} criteria failed: {failed:?}", failed.len());
        std::process::exit(1);
    }
    println!("all 10 criteria passed");
}
