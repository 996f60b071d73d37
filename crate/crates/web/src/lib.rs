//! WebAssembly bindings for three small interactive demos. Every exported
//! function returns a JSON document (or `{"error": ...}`).

use clft_core::ctc::{ctc_loss, greedy_decode, Vocabulary};
use clft_core::numerics::{ParamGroup, ParamStore, Tensor};
use clft_core::ssl::{sample_mask, MaskSpec};
use clft_core::strategies::{ewc_penalty_value, FisherInfo};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use wasm_bindgen::prelude::wasm_bindgen;

fn respond(r: Result<Value, String>) -> String {
    r.unwrap_or_else(|e| json!({ "error": e })).to_string()
}

/// Several sampled span masks plus the exact per-frame coverage.
pub fn mask_demo(frames: usize, p_start: f64, span: usize, samples: usize, seed: u64) -> Result<Value, String> {
    if frames == 0 || frames > 400 || samples > 64 {
        return Err("frames must be in 1..=400 and samples at most 64".into());
    }
    let spec = MaskSpec { p_start, span };
    spec.validate().map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let masks: Vec<Vec<bool>> = (0..samples).map(|_| sample_mask(frames, &spec, &mut rng)).collect();
    let coverage: Vec<f64> = (0..frames).map(|i| spec.coverage(i, frames)).collect();
    let mean = coverage.iter().sum::<f64>() / frames as f64;
    let empirical = masks.iter().flatten().filter(|m| **m).count() as f64 / (frames * samples.max(1)) as f64;
    Ok(json!({ "masks": masks, "coverage": coverage, "mean_coverage": mean, "empirical": empirical }))
}

/// CTC loss, gradient and greedy decoding of random logits (scaled by
/// `sharpness`) for `target` over the default alphabet.
pub fn ctc_demo(frames: usize, target: &str, sharpness: f64, seed: u64) -> Result<Value, String> {
    if frames == 0 || frames > 60 {
        return Err("frames must be in 1..=60".into());
    }
    let vocab = Vocabulary::default();
    let labels = vocab.encode(target).map_err(|e| e.to_string())?;
    let k = vocab.num_classes();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let logits = Tensor::randn(&[frames, k], sharpness, &mut rng);
    let log_probs = Tensor::from_rows(
        &(0..frames)
            .map(|t| {
                let row = logits.row(t);
                let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let z = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
                row.iter().map(|v| v - z).collect()
            })
            .collect::<Vec<Vec<f64>>>(),
    )
    .map_err(|e| e.to_string())?;
    let out = ctc_loss(&log_probs, &labels).map_err(|e| e.to_string())?;
    let rows = |t: &Tensor| (0..t.rows()).map(|r| t.row(r).to_vec()).collect::<Vec<_>>();
    let mut symbols = vec!["∅".to_string()];
    symbols.extend(vocab.chars().iter().map(|c| if *c == ' ' { "␣".to_string() } else { c.to_string() }));
    Ok(json!({
        "loss": out.loss,
        "decoded": vocab.decode(&greedy_decode(&log_probs)),
        "symbols": symbols,
        "probs": rows(&log_probs.map(f64::exp)),
        "grad": rows(&out.grad),
    }))
}

/// EWC penalty and its gradient for a parameter vector.
pub fn ewc_demo(lambda: f64, theta: &[f64], theta_star: &[f64], fisher: &[f64]) -> Result<Value, String> {
    if theta.len() != theta_star.len() || theta.len() != fisher.len() || theta.is_empty() {
        return Err("theta, theta_star and fisher need the same non-zero length".into());
    }
    if fisher.iter().any(|f| *f < 0.0) {
        return Err("Fisher values must be non-negative".into());
    }
    let store = |v: &[f64]| {
        let mut p = ParamStore::new();
        p.insert("w", Tensor::vector(v.to_vec()), ParamGroup::Transformer).map(|_| p)
    };
    let (a, b) = (store(theta).map_err(|e| e.to_string())?, store(theta_star).map_err(|e| e.to_string())?);
    let info = FisherInfo {
        values: [("w".to_string(), Tensor::vector(fisher.to_vec()))].into(),
        corpus_id: "demo".into(),
        samples: 1,
    };
    let penalty = ewc_penalty_value(&a, &b, &info, lambda).map_err(|e| e.to_string())?;
    let grad: Vec<f64> = (0..theta.len()).map(|i| lambda * fisher[i] * (theta[i] - theta_star[i])).collect();
    Ok(json!({ "penalty": penalty, "grad": grad }))
}

#[wasm_bindgen]
pub fn masks(frames: usize, p_start: f64, span: usize, samples: usize, seed: u32) -> String {
    respond(mask_demo(frames, p_start, span, samples, u64::from(seed)))
}

#[wasm_bindgen]
pub fn ctc(frames: usize, target: &str, sharpness: f64, seed: u32) -> String {
    respond(ctc_demo(frames, target, sharpness, u64::from(seed)))
}

#[wasm_bindgen]
pub fn ewc(lambda: f64, theta: Vec<f64>, theta_star: Vec<f64>, fisher: Vec<f64>) -> String {
    respond(ewc_demo(lambda, &theta, &theta_star, &fisher))
}
