//! ROUGE, sentiment precision, Dif, counterfactual reconstruction and the
//! mean-latent summarizer.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::corpus::{split_words, CounterfactualPair};
use crate::judge::{Polarity3, ThreeWayJudge};
use crate::model::{DisAeModel, ModelError};

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Prf {
    fn from_counts(overlap: usize, cand: usize, refr: usize) -> Self {
        let precision = if cand == 0 { 0.0 } else { overlap as f64 / cand as f64 };
        let recall = if refr == 0 { 0.0 } else { overlap as f64 / refr as f64 };
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Self { precision, recall, f1 }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct RougeScore {
    pub r1: Prf,
    pub r2: Prf,
    pub rl: Prf,
    /// Set when the reference had no scorable tokens; all values are then 0.
    #[serde(default)]
    pub empty_reference: bool,
}

/// Lowercased word tokens; punctuation tokens are dropped.
pub fn rouge_tokens(text: &str) -> Vec<String> {
    split_words(text)
        .into_iter()
        .filter(|w| w.chars().any(|c| c.is_alphanumeric()))
        .collect()
}

fn ngram_counts(toks: &[String], n: usize) -> BTreeMap<&[String], usize> {
    let mut m = BTreeMap::new();
    if toks.len() >= n {
        for w in toks.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

fn ngram_prf(cand: &[String], refr: &[String], n: usize) -> Prf {
    let c = ngram_counts(cand, n);
    let r = ngram_counts(refr, n);
    let overlap = c
        .iter()
        .map(|(g, &k)| k.min(r.get(g).copied().unwrap_or(0)))
        .sum();
    Prf::from_counts(overlap, c.values().sum(), r.values().sum())
}

fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        core::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub fn rouge(candidate: &str, reference: &str) -> RougeScore {
    let cand = rouge_tokens(candidate);
    let refr = rouge_tokens(reference);
    if refr.is_empty() {
        return RougeScore {
            empty_reference: true,
            ..RougeScore::default()
        };
    }
    RougeScore {
        r1: ngram_prf(&cand, &refr, 1),
        r2: ngram_prf(&cand, &refr, 2),
        rl: Prf::from_counts(lcs_len(&cand, &refr), cand.len(), refr.len()),
        empty_reference: false,
    }
}

/// Element-wise mean; empty input gives zeros.
pub fn mean_rouge(scores: &[RougeScore]) -> RougeScore {
    let mut out = RougeScore::default();
    if scores.is_empty() {
        return out;
    }
    let n = scores.len() as f64;
    let add = |acc: &mut Prf, s: &Prf| {
        acc.precision += s.precision / n;
        acc.recall += s.recall / n;
        acc.f1 += s.f1 / n;
    };
    for s in scores {
        add(&mut out.r1, &s.r1);
        add(&mut out.r2, &s.r2);
        add(&mut out.rl, &s.rl);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Polarity {
    Positive,
    Negative,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SentimentReport {
    pub review_level: f64,
    pub sentence_level: f64,
    pub polarity: Polarity,
    /// Number of empty summaries, each scored 0.
    pub empty_summaries: usize,
}

/// 1 for a match, 0.5 for neutral, 0 for the opposite polarity.
pub fn verdict_score(v: Polarity3, target: Polarity) -> f64 {
    match (v, target) {
        (Polarity3::Neutral, _) => 0.5,
        (Polarity3::Positive, Polarity::Positive) | (Polarity3::Negative, Polarity::Negative) => 1.0,
        _ => 0.0,
    }
}

/// Splits after `.`, `!` or `?` when followed by whitespace.
pub fn split_sentences(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut start = 0;
    let mut chars = text.char_indices().peekable();
    while let Some((_, c)) = chars.next() {
        if matches!(c, '.' | '!' | '?') {
            if let Some(&(j, next)) = chars.peek() {
                if next.is_whitespace() {
                    let s = text[start..j].trim();
                    if !s.is_empty() {
                        out.push(s);
                    }
                    start = j;
                }
            }
        }
    }
    let tail = text[start..].trim();
    if !tail.is_empty() {
        out.push(tail);
    }
    out
}

pub fn sentiment_precision<S: AsRef<str>>(
    summaries: &[S],
    judge: &dyn ThreeWayJudge,
    polarity: Polarity,
) -> SentimentReport {
    let mut rev = 0.0;
    let mut sen = 0.0;
    let mut empty = 0;
    for s in summaries {
        let text = s.as_ref();
        if text.trim().is_empty() {
            empty += 1;
            continue;
        }
        rev += verdict_score(judge.judge3(text), polarity);
        let sents = split_sentences(text);
        sen += sents
            .iter()
            .map(|x| verdict_score(judge.judge3(x), polarity))
            .sum::<f64>()
            / sents.len() as f64;
    }
    let n = summaries.len().max(1) as f64;
    SentimentReport {
        review_level: rev / n,
        sentence_level: sen / n,
        polarity,
        empty_summaries: empty,
    }
}

/// Mean change of review- and sentence-level scores, on whatever scale the
/// inputs use (percentages in published tables).
pub fn dif(base_rev: f64, base_sen: f64, new_rev: f64, new_sen: f64) -> f64 {
    ((new_rev - base_rev) + (new_sen - base_sen)) / 2.0
}

/// Decodes each side of a pair from its own sentiment latent and its
/// partner's content latent, scoring against the original text.
/// Returns the mean over both directions of all pairs.
pub fn counterfactual_reconstruction_rouge(
    model: &DisAeModel,
    pairs: &[CounterfactualPair],
) -> Result<RougeScore, ModelError> {
    let mut scores = Vec::with_capacity(pairs.len() * 2);
    for pair in pairs {
        for (x, partner) in [(&pair.positive, &pair.negative), (&pair.negative, &pair.positive)] {
            let own = model.encode_text(&x.text)?.factors;
            let other = model.encode_text(&partner.text)?.factors;
            let mut z = own.z_tilde_e;
            z.extend_from_slice(&other.z_c);
            let out = model.generate(&z)?;
            scores.push(rouge(&out, &x.text));
        }
    }
    Ok(mean_rouge(&scores))
}

/// Averages the decoder inputs of all reviews and beam-decodes the mean.
pub fn summarize_mean<S: AsRef<str>>(model: &DisAeModel, reviews: &[S]) -> Result<String, ModelError> {
    if reviews.is_empty() {
        return Err(ModelError::EmptyInput);
    }
    let mut mean = vec![0.0; model.config().latent_dim()];
    for r in reviews {
        let z = model.encode_text(r.as_ref())?.factors.joint();
        for (m, v) in mean.iter_mut().zip(&z) {
            *m += v;
        }
    }
    let n = reviews.len() as f64;
    for m in &mut mean {
        *m /= n;
    }
    model.generate(&mean)
}

/// Held-out accuracy of a binary logistic probe on `features`.
///
/// Features are standardized with training-split statistics; the split is a
/// seeded shuffle with `train_fraction` of the rows used for fitting.
pub fn probe_accuracy(features: &[Vec<f64>], labels: &[bool], train_fraction: f64, seed: u64) -> f64 {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;

    let n = features.len().min(labels.len());
    if n < 2 {
        return 0.0;
    }
    let dim = features[0].len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
    let cut = ((n as f64 * train_fraction) as usize).clamp(1, n - 1);
    let (train, test) = idx.split_at(cut);

    let mut mean = vec![0.0; dim];
    let mut sd = vec![0.0; dim];
    for &i in train {
        for (m, x) in mean.iter_mut().zip(&features[i]) {
            *m += x / train.len() as f64;
        }
    }
    for &i in train {
        for ((s, m), x) in sd.iter_mut().zip(&mean).zip(&features[i]) {
            *s += (x - m) * (x - m) / train.len() as f64;
        }
    }
    for s in &mut sd {
        *s = crate::math::sqrt(*s).max(1e-8);
    }
    let norm = |i: usize| -> Vec<f64> {
        features[i]
            .iter()
            .zip(mean.iter().zip(&sd))
            .map(|(x, (m, s))| (x - m) / s)
            .collect()
    };
    let train_x: Vec<Vec<f64>> = train.iter().map(|&i| norm(i)).collect();
    let mut w = vec![0.0; dim];
    let mut b = 0.0;
    for _ in 0..500 {
        let mut gw = vec![0.0; dim];
        let mut gb = 0.0;
        for (x, &i) in train_x.iter().zip(train) {
            let p = crate::math::sigmoid(crate::math::dot(&w, x) + b);
            let err = p - if labels[i] { 1.0 } else { 0.0 };
            for (g, xi) in gw.iter_mut().zip(x) {
                *g += err * xi;
            }
            gb += err;
        }
        let m = train.len() as f64;
        for (wi, g) in w.iter_mut().zip(&gw) {
            *wi -= 0.5 * (g / m + 1e-3 * *wi);
        }
        b -= 0.5 * gb / m;
    }
    let correct = test
        .iter()
        .filter(|&&i| (crate::math::dot(&w, &norm(i)) + b > 0.0) == labels[i])
        .count();
    correct as f64 / test.len() as f64
}
