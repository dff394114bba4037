//! Fluency scoring: the scorer interface, perplexity, and an add-one
//! smoothed trigram reference model.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::corpus::split_words;
use crate::math;

/// Minimum trimmed length (in characters) for a text to receive a perplexity.
pub const MIN_SCORABLE_CHARS: usize = 10;

pub trait FluencyScorer {
    /// Per-token negative log-likelihoods (natural log) of `text`.
    fn token_nlls(&self, text: &str) -> Result<Vec<f64>, String>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum PplScore {
    Scored { ppl: f64 },
    Unscored { reason: String },
}

impl PplScore {
    pub fn value(&self) -> Option<f64> {
        match self {
            Self::Scored { ppl } => Some(*ppl),
            Self::Unscored { .. } => None,
        }
    }
}

/// `exp(mean token NLL)`; short texts and scorer failures are unscored.
pub fn compute_ppl(scorer: &dyn FluencyScorer, text: &str, min_chars: usize) -> PplScore {
    let len = text.trim().chars().count();
    if len < min_chars {
        return PplScore::Unscored {
            reason: alloc::format!("text has {len} characters, below {min_chars}"),
        };
    }
    match scorer.token_nlls(text) {
        Ok(nlls) if nlls.is_empty() => PplScore::Unscored {
            reason: "scorer returned no tokens".into(),
        },
        Ok(nlls) => {
            let mean = nlls.iter().sum::<f64>() / nlls.len() as f64;
            PplScore::Scored { ppl: math::exp(mean) }
        }
        Err(e) => PplScore::Unscored {
            reason: alloc::format!("scorer failed: {e}"),
        },
    }
}

/// Mean perplexity over scored entries only; `None` if nothing was scored.
pub fn mean_ppl<'a>(scores: impl IntoIterator<Item = &'a PplScore>) -> Option<f64> {
    let (sum, n) = scores
        .into_iter()
        .filter_map(PplScore::value)
        .fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

const START: u32 = 0;
const END: u32 = 1;
const UNK: u32 = 2;

/// Word trigram model with add-one smoothing.
#[derive(Debug, Clone, PartialEq)]
pub struct TrigramLm {
    words: BTreeMap<String, u32>,
    trigrams: BTreeMap<(u32, u32, u32), u32>,
    contexts: BTreeMap<(u32, u32), u32>,
}

impl TrigramLm {
    pub fn train<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut lm = Self {
            words: BTreeMap::new(),
            trigrams: BTreeMap::new(),
            contexts: BTreeMap::new(),
        };
        let texts: Vec<Vec<String>> = texts.into_iter().map(split_words).collect();
        for toks in &texts {
            for t in toks {
                let next = lm.words.len() as u32 + 3;
                lm.words.entry(t.clone()).or_insert(next);
            }
        }
        for toks in &texts {
            let ids = lm.ids(toks);
            for w in ids.windows(3) {
                *lm.trigrams.entry((w[0], w[1], w[2])).or_insert(0) += 1;
                *lm.contexts.entry((w[0], w[1])).or_insert(0) += 1;
            }
        }
        lm
    }

    fn ids(&self, toks: &[String]) -> Vec<u32> {
        let mut ids = Vec::with_capacity(toks.len() + 3);
        ids.push(START);
        ids.push(START);
        ids.extend(toks.iter().map(|t| self.words.get(t).copied().unwrap_or(UNK)));
        ids.push(END);
        ids
    }

    /// Size of the predicted-symbol set: known words, end marker and unknown.
    pub fn support(&self) -> usize {
        self.words.len() + 2
    }
}

impl FluencyScorer for TrigramLm {
    fn token_nlls(&self, text: &str) -> Result<Vec<f64>, String> {
        let ids = self.ids(&split_words(text));
        let v = self.support() as f64;
        Ok(ids
            .windows(3)
            .map(|w| {
                let c3 = self.trigrams.get(&(w[0], w[1], w[2])).copied().unwrap_or(0) as f64;
                let c2 = self.contexts.get(&(w[0], w[1])).copied().unwrap_or(0) as f64;
                -math::ln((c3 + 1.0) / (c2 + v))
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    struct Uniform(usize);

    impl FluencyScorer for Uniform {
        fn token_nlls(&self, text: &str) -> Result<Vec<f64>, String> {
            Ok(split_words(text).iter().map(|_| math::ln(self.0 as f64)).collect())
        }
    }

    struct Fixed(Vec<f64>);

    impl FluencyScorer for Fixed {
        fn token_nlls(&self, _: &str) -> Result<Vec<f64>, String> {
            Ok(self.0.iter().map(|p| -math::ln(*p)).collect())
        }
    }

    #[test]
    fn uniform_scorer_gives_vocab_size() {
        let p = compute_ppl(&Uniform(10), "the food was fine", MIN_SCORABLE_CHARS);
        assert!((p.value().unwrap() - 10.0).abs() < 1e-9);
    }

    #[test]
    fn short_texts_are_unscored() {
        assert_eq!("123456789".len(), 9);
        assert!(compute_ppl(&Uniform(10), "123456789", 10).value().is_none());
        assert!(compute_ppl(&Uniform(10), "1234567890", 10).value().is_some());
    }

    #[test]
    fn ppl_decreases_when_all_probabilities_increase() {
        let lo = compute_ppl(&Fixed(vec![0.1, 0.2, 0.3]), "long enough text", 10);
        let hi = compute_ppl(&Fixed(vec![0.2, 0.25, 0.5]), "long enough text", 10);
        assert!(hi.value().unwrap() < lo.value().unwrap());
    }

    #[test]
    fn scorer_errors_become_unscored() {
        struct Broken;
        impl FluencyScorer for Broken {
            fn token_nlls(&self, _: &str) -> Result<Vec<f64>, String> {
                Err("offline".into())
            }
        }
        assert!(matches!(compute_ppl(&Broken, "long enough text", 10), PplScore::Unscored { .. }));
    }

    #[test]
    fn trigram_add_one_probabilities() {
        let lm = TrigramLm::train(["a b", "a c"]);
        // support: a, b, c, end, unk = 5; context (start,start) seen twice, followed by a twice
        let nll = lm.token_nlls("a b").unwrap();
        assert_eq!(nll.len(), 3);
        assert!((nll[0] - -math::ln(3.0 / 7.0)).abs() < 1e-12);
        assert!((nll[1] - -math::ln(2.0 / 7.0)).abs() < 1e-12);
        assert!((nll[2] - -math::ln(2.0 / 6.0)).abs() < 1e-12);
    }

    #[test]
    fn training_text_is_more_fluent_than_scramble() {
        let corpus = ["the food was great", "the staff was great", "the food was cold"];
        let lm = TrigramLm::train(corpus);
        let good = compute_ppl(&lm, "the food was great", 10).value().unwrap();
        let bad = compute_ppl(&lm, "great was food the", 10).value().unwrap();
        assert!(good < bad);
    }

    #[test]
    fn mean_skips_unscored() {
        let xs = [
            PplScore::Scored { ppl: 10.0 },
            PplScore::Unscored { reason: "short".into() },
            PplScore::Scored { ppl: 20.0 },
        ];
        assert_eq!(mean_ppl(&xs), Some(15.0));
        assert_eq!(mean_ppl(&xs[1..2]), None);
    }
}
