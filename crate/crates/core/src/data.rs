//! Synthetic speech-like corpora with controllable domain shift.
//!
//! Every character of the vocabulary owns a prototype: a short sequence of
//! `d_in`-dimensional frames. An utterance concatenates tempo-stretched
//! prototypes of its transcript, then applies a speaker offset, a per-dim
//! channel filter (`gain * x + bias`) and additive Gaussian noise.
//!
//! On disk a corpus is a `manifest.jsonl` (one record per utterance) plus one
//! raw little-endian `f32` payload per utterance, row-major `[frames, dim]`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::ctc::Vocabulary;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const MANIFEST_FILE: &str = "manifest.jsonl";

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub frames: usize,
    pub dim: usize,
    /// Row-major `[frames, dim]`.
    pub features: Vec<f32>,
    pub text: String,
    pub domain: String,
}

impl Utterance {
    pub fn features_tensor(&self) -> Tensor {
        Tensor::matrix(
            self.frames,
            self.dim,
            self.features.iter().map(|&v| f64::from(v)).collect(),
        )
        .expect("utterance payload matches its shape")
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Corpus {
    pub utterances: Vec<Utterance>,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Utterance> {
        self.utterances.iter()
    }

    /// FNV-1a over ids, texts, shapes and feature bits in corpus order.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut feed = |bytes: &[u8]| {
            for &b in bytes {
                h ^= u64::from(b);
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        };
        for u in &self.utterances {
            feed(u.id.as_bytes());
            feed(u.text.as_bytes());
            feed(u.domain.as_bytes());
            feed(&(u.frames as u64).to_le_bytes());
            feed(&(u.dim as u64).to_le_bytes());
            for v in &u.features {
                feed(&v.to_le_bytes());
            }
        }
        h
    }
}

impl<'a> IntoIterator for &'a Corpus {
    type Item = &'a Utterance;
    type IntoIter = std::slice::Iter<'a, Utterance>;

    fn into_iter(self) -> Self::IntoIter {
        self.utterances.iter()
    }
}

/// Generation conditions of one acoustic domain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DomainSpec {
    pub name: String,
    /// Seed of the prototype dictionary. Domains sharing it share a "language".
    pub prototype_seed: u64,
    pub d_in: usize,
    /// Inclusive range of prototype lengths in frames.
    pub prototype_len: (usize, usize),
    /// Minimum pairwise L2 distance between prototype mean frames.
    pub prototype_margin: f64,
    pub noise_std: f64,
    /// Per-dim channel gain; empty means unit gain.
    pub channel_gain: Vec<f64>,
    /// Per-dim channel bias; empty means zero.
    pub channel_bias: Vec<f64>,
    pub speaker_offset_std: f64,
    /// Inclusive range of per-utterance tempo factors.
    pub tempo: (f64, f64),
}

impl Default for DomainSpec {
    fn default() -> Self {
        Self::indomain()
    }
}

impl DomainSpec {
    pub fn indomain() -> Self {
        Self {
            name: "indomain".into(),
            prototype_seed: 17,
            d_in: 16,
            prototype_len: (3, 6),
            prototype_margin: 1.0,
            noise_std: 0.3,
            channel_gain: Vec::new(),
            channel_bias: Vec::new(),
            speaker_offset_std: 0.3,
            tempo: (1.6, 2.2),
        }
    }

    /// Noisier domain with a different channel response.
    pub fn ood() -> Self {
        let base = Self::indomain();
        let d = base.d_in;
        Self {
            name: "ood".into(),
            noise_std: base.noise_std * 3.0,
            channel_gain: (0..d)
                .map(|i| 1.0 + 0.35 * (1.3 * i as f64 + 0.5).sin())
                .collect(),
            channel_bias: (0..d).map(|i| 0.4 * (0.9 * i as f64).cos()).collect(),
            ..base
        }
    }

    /// Noise-free, identity-channel, unit-tempo variant (for tests).
    pub fn clean(self) -> Self {
        Self {
            noise_std: 0.0,
            channel_gain: Vec::new(),
            channel_bias: Vec::new(),
            speaker_offset_std: 0.0,
            tempo: (1.0, 1.0),
            ..self
        }
    }

    fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("domain `{}`: {m}", self.name)));
        if self.d_in == 0 {
            return bad("d_in must be positive".into());
        }
        if !(self.noise_std >= 0.0 && self.speaker_offset_std >= 0.0) {
            return bad("standard deviations must be non-negative".into());
        }
        let (lo, hi) = self.prototype_len;
        if lo == 0 || lo > hi {
            return bad(format!("bad prototype length range {lo}..={hi}"));
        }
        let (tlo, thi) = self.tempo;
        if !(tlo > 0.0 && tlo <= thi) {
            return bad(format!("bad tempo range {tlo}..={thi}"));
        }
        for (v, what) in [(&self.channel_gain, "gain"), (&self.channel_bias, "bias")] {
            if !v.is_empty() && v.len() != self.d_in {
                return bad(format!("channel {what} has {} entries, need {}", v.len(), self.d_in));
            }
        }
        Ok(())
    }
}

/// Frame sequence per vocabulary character.
#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeDictionary {
    /// `prototypes[i]` belongs to label `i + 1`, rows of length `d_in`.
    pub prototypes: Vec<Vec<Vec<f64>>>,
}

impl PrototypeDictionary {
    /// Draws prototypes until all pairs clear the margin. Whitespace
    /// characters get low-energy "silence" prototypes.
    pub fn generate(spec: &DomainSpec, vocab: &Vocabulary) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.prototype_seed);
        let (lo, hi) = spec.prototype_len;
        for _attempt in 0..64 {
            let prototypes: Vec<Vec<Vec<f64>>> = vocab
                .chars()
                .iter()
                .map(|c| {
                    let len = rng.random_range(lo..=hi);
                    let std = if c.is_whitespace() { 0.05 } else { 1.0 };
                    let normal = Normal::new(0.0, std).expect("valid std");
                    (0..len)
                        .map(|_| {
                            (0..spec.d_in)
                                .map(|_| f64::from(normal.sample(&mut rng) as f32))
                                .collect()
                        })
                        .collect()
                })
                .collect();
            let dict = Self { prototypes };
            if dict.min_pairwise_distance() >= spec.prototype_margin {
                return Ok(dict);
            }
        }
        Err(Error::Config(format!(
            "domain `{}`: could not draw prototypes {} apart",
            spec.name, spec.prototype_margin
        )))
    }

    fn mean_frame(proto: &[Vec<f64>]) -> Vec<f64> {
        let d = proto[0].len();
        (0..d)
            .map(|j| proto.iter().map(|f| f[j]).sum::<f64>() / proto.len() as f64)
            .collect()
    }

    pub fn min_pairwise_distance(&self) -> f64 {
        let means: Vec<Vec<f64>> = self.prototypes.iter().map(|p| Self::mean_frame(p)).collect();
        let mut best = f64::INFINITY;
        for i in 0..means.len() {
            for j in i + 1..means.len() {
                let d: f64 = means[i]
                    .iter()
                    .zip(&means[j])
                    .map(|(a, b)| (a - b).powi(2))
                    .sum::<f64>()
                    .sqrt();
                best = best.min(d);
            }
        }
        best
    }
}

/// Source of transcripts: words drawn uniformly from a lexicon and joined by
/// single spaces.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lexicon {
    pub words: Vec<String>,
}

impl Lexicon {
    /// Random words of 1 to 4 letters (no whitespace, no doubled letters).
    pub fn generate(vocab: &Vocabulary, n_words: usize, seed: u64) -> Result<Self> {
        let letters: Vec<char> = vocab.chars().iter().copied().filter(|c| !c.is_whitespace()).collect();
        if letters.len() < 2 {
            return Err(Error::Config("lexicon needs at least two letters".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut words: Vec<String> = Vec::with_capacity(n_words);
        let mut guard = 0;
        while words.len() < n_words {
            guard += 1;
            if guard > 100 * n_words + 1000 {
                return Err(Error::Config(format!("cannot draw {n_words} distinct words")));
            }
            let len = rng.random_range(1..=4);
            let mut w = String::new();
            let mut prev = None;
            while w.chars().count() < len {
                let c = letters[rng.random_range(0..letters.len())];
                if Some(c) != prev {
                    w.push(c);
                    prev = Some(c);
                }
            }
            if !words.contains(&w) {
                words.push(w);
            }
        }
        Ok(Self { words })
    }

    /// Splits into two disjoint lexicons (even and odd positions).
    pub fn split(&self) -> (Lexicon, Lexicon) {
        let (a, b): (Vec<_>, Vec<_>) = self.words.iter().cloned().enumerate().partition(|(i, _)| i % 2 == 0);
        (
            Lexicon {
                words: a.into_iter().map(|(_, w)| w).collect(),
            },
            Lexicon {
                words: b.into_iter().map(|(_, w)| w).collect(),
            },
        )
    }

    fn sample<R: Rng + ?Sized>(&self, lengths: (usize, usize), rng: &mut R) -> String {
        let target = rng.random_range(lengths.0..=lengths.1);
        loop {
            let mut text = String::new();
            while text.chars().count() < target {
                let w = &self.words[rng.random_range(0..self.words.len())];
                if !text.is_empty() {
                    text.push(' ');
                }
                text.push_str(w);
            }
            if text.chars().count() <= lengths.1 {
                return text;
            }
        }
    }
}

/// Renders transcripts into feature matrices for one domain.
pub struct Synthesizer<'a> {
    pub spec: &'a DomainSpec,
    pub vocab: &'a Vocabulary,
    pub dict: PrototypeDictionary,
}

impl<'a> Synthesizer<'a> {
    pub fn new(spec: &'a DomainSpec, vocab: &'a Vocabulary) -> Result<Self> {
        let dict = PrototypeDictionary::generate(spec, vocab)?;
        Ok(Self { spec, vocab, dict })
    }

    /// Rows of the rendered utterance, each of length `d_in`.
    pub fn render<R: Rng + ?Sized>(&self, text: &str, rng: &mut R) -> Result<Vec<Vec<f64>>> {
        let spec = self.spec;
        let labels = self.vocab.encode(text)?;
        let tempo = if spec.tempo.0 == spec.tempo.1 {
            spec.tempo.0
        } else {
            rng.random_range(spec.tempo.0..=spec.tempo.1)
        };
        let d = spec.d_in;
        let offset: Vec<f64> = if spec.speaker_offset_std > 0.0 {
            let n = Normal::new(0.0, spec.speaker_offset_std).expect("valid std");
            (0..d).map(|_| n.sample(rng)).collect()
        } else {
            vec![0.0; d]
        };
        let noise = (spec.noise_std > 0.0).then(|| Normal::new(0.0, spec.noise_std).expect("valid std"));

        let mut rows = Vec::new();
        for l in labels {
            let proto = &self.dict.prototypes[l - 1];
            let len = ((proto.len() as f64 * tempo).round() as usize).max(1);
            for i in 0..len {
                // Nearest-neighbour time stretch.
                let src = ((i as f64 + 0.5) / tempo).floor() as usize;
                let frame = &proto[src.min(proto.len() - 1)];
                let row: Vec<f64> = (0..d)
                    .map(|j| {
                        let mut v = frame[j] + offset[j];
                        if let Some(g) = spec.channel_gain.get(j) {
                            v *= g;
                        }
                        if let Some(b) = spec.channel_bias.get(j) {
                            v += b;
                        }
                        if let Some(n) = &noise {
                            v += n.sample(rng);
                        }
                        v
                    })
                    .collect();
                rows.push(row);
            }
        }
        Ok(rows)
    }
}

/// Inclusive range of transcript lengths, in characters.
pub type LengthRange = (usize, usize);

/// Generates `n` utterances; utterance `i` uses its own ChaCha stream of
/// `seed`, so the result is a pure function of the arguments.
///
/// `min_frames` rejects (and redraws) utterances whose encoder output would
/// be too short to align their transcript: it maps a frame count to the
/// number of frames available after the front-end.
pub fn generate_corpus(
    spec: &DomainSpec,
    vocab: &Vocabulary,
    lexicon: &Lexicon,
    n: usize,
    lengths: LengthRange,
    seed: u64,
    id_prefix: &str,
    output_frames: impl Fn(usize) -> usize,
) -> Result<Corpus> {
    if n == 0 {
        return Err(Error::Config("corpus size must be at least 1".into()));
    }
    if lexicon.words.is_empty() {
        return Err(Error::Config("empty lexicon".into()));
    }
    if lengths.0 == 0 || lengths.0 > lengths.1 {
        return Err(Error::Config(format!("bad length range {lengths:?}")));
    }
    let synth = Synthesizer::new(spec, vocab)?;
    let mut utterances = Vec::with_capacity(n);
    for i in 0..n {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        let (text, rows) = loop {
            let text = lexicon.sample(lengths, &mut rng);
            let rows = synth.render(&text, &mut rng)?;
            let labels = vocab.encode(&text)?;
            let need = labels.len() + crate::ctc::repeat_count(&labels);
            if output_frames(rows.len()) >= need {
                break (text, rows);
            }
        };
        let features: Vec<f32> = rows.iter().flatten().map(|&v| v as f32).collect();
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config(format!("non-finite features in domain `{}`", spec.name)));
        }
        utterances.push(Utterance {
            id: format!("{id_prefix}-{i:05}"),
            frames: rows.len(),
            dim: spec.d_in,
            features,
            text,
            domain: spec.name.clone(),
        });
    }
    Ok(Corpus { utterances })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub id: String,
    pub path: String,
    pub frames: usize,
    pub dim: usize,
    pub text: String,
    pub domain: String,
}

fn payload_name(id: &str) -> String {
    format!("feats/{id}.f32")
}

/// Writes `manifest.jsonl` and one payload per utterance under `dir`.
pub fn save_corpus(corpus: &Corpus, dir: &Path, overwrite: bool) -> Result<PathBuf> {
    if dir.exists() {
        let non_empty = fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .next()
            .is_some();
        if non_empty && !overwrite {
            return Err(Error::Config(format!(
                "{} exists and is not empty (pass overwrite to replace)",
                dir.display()
            )));
        }
    }
    let feats = dir.join("feats");
    fs::create_dir_all(&feats).map_err(|e| Error::io(&feats, e))?;
    let mut manifest = String::new();
    for u in corpus {
        let rel = payload_name(&u.id);
        let mut bytes = Vec::with_capacity(u.features.len() * 4);
        for v in &u.features {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        let path = dir.join(&rel);
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        let rec = ManifestRecord {
            id: u.id.clone(),
            path: rel,
            frames: u.frames,
            dim: u.dim,
            text: u.text.clone(),
            domain: u.domain.clone(),
        };
        manifest.push_str(&serde_json::to_string(&rec).expect("record serialises"));
        manifest.push('\n');
    }
    let path = dir.join(MANIFEST_FILE);
    let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    f.write_all(manifest.as_bytes()).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Reads a manifest and its payloads, validating shapes and transcripts.
pub fn load_corpus(manifest: &Path, vocab: &Vocabulary) -> Result<Corpus> {
    let text = fs::read_to_string(manifest).map_err(|e| Error::io(manifest, e))?;
    let root = manifest.parent().unwrap_or(Path::new("."));
    let mut utterances = Vec::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let rec: ManifestRecord = serde_json::from_str(line).map_err(|source| Error::Json {
            path: manifest.to_path_buf(),
            source,
        })?;
        let fail = |reason: String| Error::Utterance {
            id: rec.id.clone(),
            reason,
        };
        if rec.frames == 0 || rec.dim == 0 {
            return Err(fail("zero frames or dim".into()));
        }
        if rec.text.is_empty() {
            return Err(fail("empty transcript".into()));
        }
        vocab.encode(&rec.text).map_err(|e| fail(e.to_string()))?;
        let path = root.join(&rec.path);
        let bytes = fs::read(&path).map_err(|e| fail(format!("{}: {e}", path.display())))?;
        let expected = rec.frames * rec.dim * 4;
        if bytes.len() != expected {
            return Err(fail(format!(
                "payload has {} bytes, expected {expected} ({} x {} x 4)",
                bytes.len(),
                rec.frames,
                rec.dim
            )));
        }
        let features: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        if features.iter().any(|v| !v.is_finite()) {
            return Err(fail("non-finite feature".into()));
        }
        utterances.push(Utterance {
            id: rec.id,
            frames: rec.frames,
            dim: rec.dim,
            features,
            text: rec.text,
            domain: rec.domain,
        });
    }
    Ok(Corpus { utterances })
}
