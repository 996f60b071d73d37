//! Character recognition head, CTC objective, greedy decoding and error rates.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{affine, linear};
use crate::error::{Error, Result};
use crate::numerics::{Graph, ParamGroup, ParamStore, Tensor, Var};

/// CTC blank label.
pub const BLANK: usize = 0;

/// Ordered characters; label `i + 1` is `chars[i]`, label 0 is the blank.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Vocabulary {
    chars: Vec<char>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::new("abcdefg ").expect("default vocabulary is valid")
    }
}

impl Vocabulary {
    pub fn new(chars: &str) -> Result<Self> {
        let chars: Vec<char> = chars.chars().collect();
        if chars.is_empty() {
            return Err(Error::Config("vocabulary is empty".into()));
        }
        for (i, c) in chars.iter().enumerate() {
            if chars[..i].contains(c) {
                return Err(Error::Config(format!("duplicate character {c:?} in vocabulary")));
            }
        }
        Ok(Self { chars })
    }

    pub fn chars(&self) -> &[char] {
        &self.chars
    }

    pub fn len(&self) -> usize {
        self.chars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chars.is_empty()
    }

    /// Output classes including the blank.
    pub fn num_classes(&self) -> usize {
        self.chars.len() + 1
    }

    pub fn label(&self, c: char) -> Option<usize> {
        self.chars.iter().position(|&x| x == c).map(|i| i + 1)
    }

    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        text.chars()
            .map(|c| {
                self.label(c)
                    .ok_or_else(|| Error::Config(format!("character {c:?} not in vocabulary")))
            })
            .collect()
    }

    /// Labels to text; blanks and unknown labels are skipped.
    pub fn decode(&self, labels: &[usize]) -> String {
        labels
            .iter()
            .filter_map(|&l| l.checked_sub(1).and_then(|i| self.chars.get(i)))
            .collect()
    }
}

impl TryFrom<String> for Vocabulary {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        Self::new(&s)
    }
}

impl From<Vocabulary> for String {
    fn from(v: Vocabulary) -> String {
        v.chars.into_iter().collect()
    }
}

/// Two dense layers (`d -> hidden -> classes`) with ReLU between, followed by
/// a per-frame log-softmax.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DownstreamHead {
    pub input_dim: usize,
    pub hidden: usize,
    pub classes: usize,
}

impl DownstreamHead {
    pub fn new(input_dim: usize, hidden: usize, vocab: &Vocabulary) -> Self {
        Self {
            input_dim,
            hidden,
            classes: vocab.num_classes(),
        }
    }

    pub fn init_params<R: Rng + ?Sized>(&self, params: &mut ParamStore, rng: &mut R) -> Result<()> {
        linear(params, "head.fc1", self.input_dim, self.hidden, ParamGroup::Head, rng)?;
        linear(params, "head.fc2", self.hidden, self.classes, ParamGroup::Head, rng)
    }

    /// `[T', d]` latents to `[T', classes]` log-probabilities.
    pub fn forward(&self, g: &mut Graph, latents: Var) -> Result<Var> {
        let cols = g.value(latents).cols();
        if cols != self.input_dim {
            return Err(Error::shape(format!(
                "head expects dim {}, latents have {cols}",
                self.input_dim
            )));
        }
        let h = affine(g, latents, "head.fc1")?;
        let h = g.relu(h);
        let o = affine(g, h, "head.fc2")?;
        Ok(g.log_softmax(o))
    }
}

/// Loss value and its gradient w.r.t. the log-probability matrix.
#[derive(Clone, Debug)]
pub struct CtcOutput {
    pub loss: f64,
    pub grad: Tensor,
}

fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Adjacent equal labels in `target`.
pub fn repeat_count(target: &[usize]) -> usize {
    target.windows(2).filter(|w| w[0] == w[1]).count()
}

/// Negative log-likelihood of `target` under CTC, via the forward-backward
/// recursions over the blank-interleaved label sequence, in log space.
pub fn ctc_loss(log_probs: &Tensor, target: &[usize]) -> Result<CtcOutput> {
    let (t_len, classes) = (log_probs.rows(), log_probs.cols());
    if target.iter().any(|&l| l == BLANK || l >= classes) {
        return Err(Error::Config(format!(
            "target labels must lie in 1..{classes}, got {target:?}"
        )));
    }
    let repeats = repeat_count(target);
    if t_len < target.len() + repeats || t_len == 0 {
        return Err(Error::UnalignableTarget {
            target: target.len(),
            repeats,
            frames: t_len,
        });
    }

    let s_len = 2 * target.len() + 1;
    let ext = |s: usize| if s.is_multiple_of(2) { BLANK } else { target[s / 2] };
    let lp = |t: usize, s: usize| log_probs.data()[t * classes + ext(s)];
    let can_skip = |s: usize| s >= 2 && ext(s) != BLANK && ext(s) != ext(s - 2);

    let ninf = f64::NEG_INFINITY;
    let mut alpha = vec![ninf; t_len * s_len];
    alpha[0] = lp(0, 0);
    if s_len > 1 {
        alpha[1] = lp(0, 1);
    }
    for t in 1..t_len {
        for s in 0..s_len {
            let prev = &alpha[(t - 1) * s_len..t * s_len];
            let mut a = prev[s];
            if s >= 1 {
                a = log_add(a, prev[s - 1]);
            }
            if can_skip(s) {
                a = log_add(a, prev[s - 2]);
            }
            alpha[t * s_len + s] = if a == ninf { ninf } else { a + lp(t, s) };
        }
    }

    let mut beta = vec![ninf; t_len * s_len];
    let last = (t_len - 1) * s_len;
    beta[last + s_len - 1] = lp(t_len - 1, s_len - 1);
    if s_len > 1 {
        beta[last + s_len - 2] = lp(t_len - 1, s_len - 2);
    }
    for t in (0..t_len - 1).rev() {
        for s in 0..s_len {
            let next = &beta[(t + 1) * s_len..(t + 2) * s_len];
            let mut b = next[s];
            if s + 1 < s_len {
                b = log_add(b, next[s + 1]);
            }
            if s + 2 < s_len && can_skip(s + 2) {
                b = log_add(b, next[s + 2]);
            }
            beta[t * s_len + s] = if b == ninf { ninf } else { b + lp(t, s) };
        }
    }

    let mut log_p = alpha[last + s_len - 1];
    if s_len > 1 {
        log_p = log_add(log_p, alpha[last + s_len - 2]);
    }
    if !log_p.is_finite() {
        return Err(Error::UnalignableTarget {
            target: target.len(),
            repeats,
            frames: t_len,
        });
    }

    // d(-log P)/d lp[t,k] = -sum_{s: ext(s)=k} exp(alpha + beta - lp - log P)
    let mut grad = vec![0.0; t_len * classes];
    for t in 0..t_len {
        for s in 0..s_len {
            let ab = alpha[t * s_len + s] + beta[t * s_len + s];
            if ab == ninf {
                continue;
            }
            grad[t * classes + ext(s)] -= (ab - lp(t, s) - log_p).exp();
        }
    }
    Ok(CtcOutput {
        loss: -log_p,
        grad: Tensor::matrix(t_len, classes, grad)?,
    })
}

/// Records the CTC loss of `target` on the graph.
pub fn ctc_loss_var(g: &mut Graph, log_probs: Var, target: &[usize]) -> Result<Var> {
    let out = ctc_loss(g.value(log_probs), target)?;
    Ok(g.external(log_probs, out.loss, out.grad))
}

/// Per-frame argmax (ties to the lowest label), merge repeats, drop blanks.
pub fn greedy_decode(log_probs: &Tensor) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for t in 0..log_probs.rows() {
        let row = log_probs.row(t);
        let mut best = 0;
        for (k, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = k;
            }
        }
        if Some(best) != prev && best != BLANK {
            out.push(best);
        }
        prev = Some(best);
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorUnit {
    Word,
    Char,
}

/// Levenshtein distance with unit costs.
pub fn edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

fn units(s: &str, unit: ErrorUnit) -> Vec<&str> {
    match unit {
        ErrorUnit::Word => s.split_whitespace().collect(),
        ErrorUnit::Char => s
            .char_indices()
            .map(|(i, c)| &s[i..i + c.len_utf8()])
            .collect(),
    }
}

/// Total edit distance over total reference length (WER or CER).
pub fn error_rate<S: AsRef<str>>(hypotheses: &[S], references: &[S], unit: ErrorUnit) -> Result<f64> {
    if hypotheses.len() != references.len() {
        return Err(Error::shape(format!(
            "{} hypotheses for {} references",
            hypotheses.len(),
            references.len()
        )));
    }
    let mut dist = 0;
    let mut total = 0;
    for (h, r) in hypotheses.iter().zip(references) {
        let (h, r) = (units(h.as_ref(), unit), units(r.as_ref(), unit));
        dist += edit_distance(&h, &r);
        total += r.len();
    }
    if total == 0 {
        return Err(Error::Config("references are empty".into()));
    }
    Ok(dist as f64 / total as f64)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn probs(rows: &[Vec<f64>]) -> Tensor {
        Tensor::from_rows(rows).unwrap().map(f64::ln)
    }

    #[test]
    fn single_frame_single_label() {
        let lp = probs(&[vec![0.2, 0.5, 0.3]]);
        let out = ctc_loss(&lp, &[1]).unwrap();
        assert!((out.loss - -(0.5f64.ln())).abs() < 1e-12);
    }

    #[test]
    fn two_frames_single_label_sums_three_paths() {
        let p1 = [0.2, 0.5, 0.3];
        let p2 = [0.6, 0.1, 0.3];
        let lp = probs(&[p1.to_vec(), p2.to_vec()]);
        let expected = -(p1[1] * p2[1] + p1[1] * p2[0] + p1[0] * p2[1]).ln();
        let out = ctc_loss(&lp, &[1]).unwrap();
        assert!((out.loss - expected).abs() < 1e-12);
    }

    #[test]
    fn empty_target_is_all_blank_path() {
        let lp = probs(&[vec![0.2, 0.8], vec![0.7, 0.3]]);
        let out = ctc_loss(&lp, &[]).unwrap();
        assert!((out.loss - -(0.2f64 * 0.7).ln()).abs() < 1e-12);
    }

    #[test]
    fn unalignable_targets_are_rejected() {
        let lp = probs(&[vec![0.5, 0.5], vec![0.5, 0.5]]);
        assert!(matches!(ctc_loss(&lp, &[1, 1]), Err(Error::UnalignableTarget { .. })));
        let lp3 = probs(&vec![vec![0.5, 0.5]; 3]);
        assert!(ctc_loss(&lp3, &[1, 1]).is_ok());
        assert!(ctc_loss(&lp3, &[0]).is_err());
        assert!(ctc_loss(&lp3, &[2]).is_err());
    }

    #[test]
    fn greedy_collapse_rules() {
        let onehot = |path: &[usize]| {
            let rows: Vec<Vec<f64>> = path
                .iter()
                .map(|&k| (0..3).map(|c| if c == k { 0.9 } else { 0.05 }).collect())
                .collect();
            probs(&rows)
        };
        assert_eq!(greedy_decode(&onehot(&[0, 1, 1, 0, 2])), vec![1, 2]);
        assert_eq!(greedy_decode(&onehot(&[0, 0, 0])), Vec::<usize>::new());
        assert_eq!(greedy_decode(&onehot(&[1, 1, 0, 1])), vec![1, 1]);
        // Exact tie between blank and a label resolves to the blank.
        assert!(greedy_decode(&probs(&[vec![0.5, 0.5]])).is_empty());
    }

    #[test]
    fn vocabulary_round_trip() {
        let v = Vocabulary::default();
        assert_eq!(v.num_classes(), 9);
        let labels = v.encode("bad cafe").unwrap();
        assert!(labels.iter().all(|&l| l != BLANK));
        assert_eq!(v.decode(&labels), "bad cafe");
        assert!(v.encode("xyz").is_err());
        assert!(Vocabulary::new("aa").is_err());
    }

    #[test]
    fn error_rates() {
        assert_eq!(error_rate(&["a b c"], &["a b c"], ErrorUnit::Word).unwrap(), 0.0);
        let wer = error_rate(&["a x c"], &["a b c"], ErrorUnit::Word).unwrap();
        assert!((wer - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(error_rate(&[""], &["a b"], ErrorUnit::Word).unwrap(), 1.0);
        let cer = error_rate(&["abd", "x"], &["abc", "xy"], ErrorUnit::Char).unwrap();
        assert!((cer - 2.0 / 5.0).abs() < 1e-15);
        assert!(error_rate(&["a"], &[""], ErrorUnit::Char).is_err());
        assert!(error_rate(&["a"], &["a", "b"], ErrorUnit::Char).is_err());
    }

    #[test]
    fn edit_distance_oracle_cases() {
        assert_eq!(edit_distance(b"kitten", b"sitting"), 3);
        assert_eq!(edit_distance(b"", b"abc"), 3);
        assert_eq!(edit_distance(b"flaw", b"lawn"), 2);
    }

    #[test]
    fn head_rows_are_normalised_and_uniform_at_zero() {
        let vocab = Vocabulary::default();
        let head = DownstreamHead::new(8, 16, &vocab);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut p = ParamStore::new();
        head.init_params(&mut p, &mut rng).unwrap();
        let x = Tensor::randn(&[5, 8], 1.0, &mut rng);
        let mut g = Graph::no_grad(&p);
        let xv = g.constant(x.clone());
        let lp = head.forward(&mut g, xv).unwrap();
        for r in 0..5 {
            let z: f64 = g.value(lp).row(r).iter().map(|v| v.exp()).sum();
            assert!((z - 1.0).abs() < 1e-9);
        }

        let zeroed: Vec<(String, Tensor)> = p
            .iter()
            .map(|(n, q)| (n.to_string(), Tensor::zeros(q.value.shape())))
            .collect();
        for (n, t) in zeroed {
            p.set_value(&n, t).unwrap();
        }
        let mut g = Graph::no_grad(&p);
        let xv = g.constant(x);
        let lp = head.forward(&mut g, xv).unwrap();
        let uniform = -(9f64).ln();
        assert!(g.value(lp).data().iter().all(|v| (v - uniform).abs() < 1e-12));
    }

    #[test]
    fn head_matches_dense_layer_oracle() {
        let vocab = Vocabulary::new("ab").unwrap();
        let head = DownstreamHead::new(3, 4, &vocab);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut p = ParamStore::new();
        head.init_params(&mut p, &mut rng).unwrap();
        for name in ["head.fc1.bias", "head.fc2.bias"] {
            let n = p.value(name).unwrap().len();
            p.set_value(name, Tensor::randn(&[n], 0.5, &mut rng)).unwrap();
        }
        let x = Tensor::randn(&[2, 3], 1.0, &mut rng);
        let mut g = Graph::no_grad(&p);
        let xv = g.constant(x.clone());
        let lp = head.forward(&mut g, xv).unwrap();

        let w1 = p.value("head.fc1.weight").unwrap();
        let b1 = p.value("head.fc1.bias").unwrap();
        let w2 = p.value("head.fc2.weight").unwrap();
        let b2 = p.value("head.fc2.bias").unwrap();
        for r in 0..2 {
            let hidden: Vec<f64> = (0..4)
                .map(|j| {
                    let z: f64 = (0..3).map(|i| x.get(r, i) * w1.get(i, j)).sum::<f64>() + b1.data()[j];
                    z.max(0.0)
                })
                .collect();
            let logits: Vec<f64> = (0..3)
                .map(|k| (0..4).map(|j| hidden[j] * w2.get(j, k)).sum::<f64>() + b2.data()[k])
                .collect();
            let z: f64 = logits.iter().map(|l| l.exp()).sum();
            for k in 0..3 {
                assert!((g.value(lp).get(r, k) - (logits[k] - z.ln())).abs() < 1e-12);
            }
        }
    }

    mod props {
        use proptest::prelude::*;

        use super::*;

        fn log_softmax_rows(logits: &[Vec<f64>]) -> Tensor {
            let rows: Vec<Vec<f64>> = logits
                .iter()
                .map(|r| {
                    let z = r.iter().map(|v| v.exp()).sum::<f64>().ln();
                    r.iter().map(|v| v - z).collect()
                })
                .collect();
            Tensor::from_rows(&rows).unwrap()
        }

        proptest! {
            #[test]
            fn edit_distance_is_a_metric(
                a in prop::collection::vec(0u8..4, 0..12),
                b in prop::collection::vec(0u8..4, 0..12),
                c in prop::collection::vec(0u8..4, 0..12),
            ) {
                let ab = edit_distance(&a, &b);
                prop_assert_eq!(edit_distance(&a, &a), 0);
                prop_assert_eq!(ab, edit_distance(&b, &a));
                prop_assert!(ab <= edit_distance(&a, &c) + edit_distance(&c, &b));
                prop_assert!(ab <= a.len().max(b.len()));
                prop_assert!(ab >= a.len().abs_diff(b.len()));
            }

            #[test]
            fn vocabulary_round_trips(text in "[a-g ]{0,20}") {
                let v = Vocabulary::default();
                prop_assert_eq!(v.decode(&v.encode(&text).unwrap()), text);
            }

            #[test]
            fn ctc_loss_is_a_negative_log_probability(
                logits in prop::collection::vec(prop::collection::vec(-3.0f64..3.0, 4), 1..8),
                target in prop::collection::vec(1usize..4, 0..4),
            ) {
                let lp = log_softmax_rows(&logits);
                prop_assume!(target.len() + repeat_count(&target) <= lp.rows());
                let out = ctc_loss(&lp, &target).unwrap();
                prop_assert!(out.loss.is_finite() && out.loss >= -1e-12);
                for r in 0..out.grad.rows() {
                    let occupancy: f64 = out.grad.row(r).iter().sum();
                    prop_assert!((occupancy + 1.0).abs() < 1e-9);
                    prop_assert!(out.grad.row(r).iter().all(|g| *g <= 1e-12));
                }
            }
        }
    }
}
