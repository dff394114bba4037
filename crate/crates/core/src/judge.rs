//! Sentiment judges: the interfaces used by filtering and evaluation, plus
//! bag-of-words logistic reference implementations trained on corpus ratings.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::corpus::split_words;
use crate::math;

/// Binary verdict used by the reproduction filter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Negative,
    NonNegative,
    Unscored,
}

pub trait SentimentJudge {
    fn judge(&self, text: &str) -> Verdict;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Polarity3 {
    Positive,
    Neutral,
    Negative,
}

pub trait ThreeWayJudge {
    fn judge3(&self, text: &str) -> Polarity3;
}

impl<F: Fn(&str) -> Verdict> SentimentJudge for F {
    fn judge(&self, text: &str) -> Verdict {
        self(text)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BowTrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub l2: f64,
}

impl Default for BowTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 300,
            learning_rate: 1.0,
            l2: 1e-4,
        }
    }
}

/// Multinomial logistic regression over word-presence features.
/// Trained by deterministic full-batch gradient descent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BowClassifier {
    features: BTreeMap<String, usize>,
    /// `classes` rows of `features + 1` weights; the last column is the bias.
    weights: Vec<Vec<f64>>,
}

fn is_word(tok: &str) -> bool {
    tok.chars().any(|c| c.is_alphanumeric())
}

impl BowClassifier {
    pub fn train(docs: &[(&str, usize)], classes: usize, cfg: &BowTrainConfig) -> Self {
        let mut features = BTreeMap::new();
        for (text, _) in docs {
            for w in split_words(text) {
                if is_word(&w) {
                    let next = features.len();
                    features.entry(w).or_insert(next);
                }
            }
        }
        let mut model = Self {
            weights: vec![vec![0.0; features.len() + 1]; classes],
            features,
        };
        if docs.is_empty() || classes == 0 {
            return model;
        }
        let encoded: Vec<(Vec<usize>, usize)> = docs.iter().map(|(t, y)| (model.featurize(t), *y)).collect();
        let bias = model.features.len();
        let n = docs.len() as f64;
        for _ in 0..cfg.epochs {
            let mut grad = vec![vec![0.0; bias + 1]; classes];
            for (feats, y) in &encoded {
                let p = math::softmax(&model.logits_of(feats));
                for (k, row) in grad.iter_mut().enumerate() {
                    let err = p[k] - if k == *y { 1.0 } else { 0.0 };
                    for &f in feats {
                        row[f] += err;
                    }
                    row[bias] += err;
                }
            }
            for (row, g) in model.weights.iter_mut().zip(&grad) {
                for (w, gi) in row.iter_mut().zip(g) {
                    *w -= cfg.learning_rate * (gi / n + cfg.l2 * *w);
                }
            }
        }
        model
    }

    fn featurize(&self, text: &str) -> Vec<usize> {
        let set: BTreeSet<usize> = split_words(text)
            .iter()
            .filter_map(|w| self.features.get(w.as_str()).copied())
            .collect();
        set.into_iter().collect()
    }

    fn logits_of(&self, feats: &[usize]) -> Vec<f64> {
        let bias = self.features.len();
        self.weights
            .iter()
            .map(|row| row[bias] + feats.iter().map(|&f| row[f]).sum::<f64>())
            .collect()
    }

    pub fn classes(&self) -> usize {
        self.weights.len()
    }

    pub fn predict_proba(&self, text: &str) -> Vec<f64> {
        math::softmax(&self.logits_of(&self.featurize(text)))
    }

    /// Weight of `word` for class `k`, if the word is a known feature.
    pub fn weight(&self, word: &str, k: usize) -> Option<f64> {
        self.features.get(word).map(|&f| self.weights[k][f])
    }
}

/// Binary negative-vs-positive judge; ratings 3 are ignored in training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BowSentimentJudge {
    clf: BowClassifier,
}

impl BowSentimentJudge {
    pub fn train(rated: &[(&str, u8)], cfg: &BowTrainConfig) -> Self {
        let docs: Vec<(&str, usize)> = rated
            .iter()
            .filter_map(|&(t, r)| match r {
                1 | 2 => Some((t, 0)),
                4 | 5 => Some((t, 1)),
                _ => None,
            })
            .collect();
        Self {
            clf: BowClassifier::train(&docs, 2, cfg),
        }
    }

    pub fn negative_probability(&self, text: &str) -> f64 {
        self.clf.predict_proba(text)[0]
    }
}

impl SentimentJudge for BowSentimentJudge {
    fn judge(&self, text: &str) -> Verdict {
        if text.trim().is_empty() {
            return Verdict::Unscored;
        }
        if self.negative_probability(text) > 0.5 {
            Verdict::Negative
        } else {
            Verdict::NonNegative
        }
    }
}

/// Three-way judge: a softmax classifier over (negative, neutral, positive)
/// combined with a polarity lexicon read off the learned weights. Texts with
/// no lexicon word are neutral.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LexiconLogisticJudge {
    clf: BowClassifier,
    lexicon: BTreeSet<String>,
}

pub const DEFAULT_LEXICON_MARGIN: f64 = 0.5;

impl LexiconLogisticJudge {
    pub fn train(rated: &[(&str, u8)], cfg: &BowTrainConfig, lexicon_margin: f64) -> Self {
        let docs: Vec<(&str, usize)> = rated
            .iter()
            .map(|&(t, r)| {
                let y = match r {
                    0..=2 => 0,
                    3 => 1,
                    _ => 2,
                };
                (t, y)
            })
            .collect();
        let clf = BowClassifier::train(&docs, 3, cfg);
        let lexicon = clf
            .features
            .keys()
            .filter(|w| {
                let neg = clf.weight(w, 0).unwrap_or(0.0);
                let pos = clf.weight(w, 2).unwrap_or(0.0);
                (pos - neg).abs() >= lexicon_margin
            })
            .cloned()
            .collect();
        Self { clf, lexicon }
    }

    pub fn lexicon(&self) -> impl Iterator<Item = &str> {
        self.lexicon.iter().map(String::as_str)
    }
}

impl ThreeWayJudge for LexiconLogisticJudge {
    fn judge3(&self, text: &str) -> Polarity3 {
        let has_cue = split_words(text).iter().any(|w| self.lexicon.contains(w));
        if !has_cue {
            return Polarity3::Neutral;
        }
        let p = self.clf.predict_proba(text);
        match math::argmax(&p) {
            0 => Polarity3::Negative,
            1 => Polarity3::Neutral,
            _ => Polarity3::Positive,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn corpus() -> Vec<(&'static str, u8)> {
        vec![
            ("the food was great", 5),
            ("great staff and lovely room", 5),
            ("lovely place , great view", 4),
            ("the food was awful", 1),
            ("awful staff and dirty room", 1),
            ("dirty place , awful view", 2),
            ("the place was open", 3),
        ]
    }

    #[test]
    fn binary_judge_separates_training_polarity() {
        let j = BowSentimentJudge::train(&corpus(), &BowTrainConfig::default());
        assert_eq!(j.judge("great food"), Verdict::NonNegative);
        assert_eq!(j.judge("awful dirty food"), Verdict::Negative);
        assert_eq!(j.judge("   "), Verdict::Unscored);
    }

    #[test]
    fn three_way_judge_is_neutral_without_cues() {
        let j = LexiconLogisticJudge::train(&corpus(), &BowTrainConfig::default(), DEFAULT_LEXICON_MARGIN);
        assert_eq!(j.judge3("great lovely"), Polarity3::Positive);
        assert_eq!(j.judge3("awful dirty"), Polarity3::Negative);
        assert_eq!(j.judge3("zebra"), Polarity3::Neutral);
        assert!(j.lexicon().any(|w| w == "great"));
        assert!(!j.lexicon().any(|w| w == "the"));
    }

    #[test]
    fn training_is_deterministic() {
        let a = BowSentimentJudge::train(&corpus(), &BowTrainConfig::default());
        let b = BowSentimentJudge::train(&corpus(), &BowTrainConfig::default());
        assert_eq!(a, b);
    }
}
