//! Reviews, counterfactual pairs, vocabulary and word-level tokenization.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

pub type TokenId = usize;

pub const PAD: TokenId = 0;
pub const BOS: TokenId = 1;
pub const EOS: TokenId = 2;
pub const UNK: TokenId = 3;
pub const SPECIAL_TOKENS: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

pub const DEFAULT_MIN_FREQ: usize = 2;
pub const DEFAULT_MAX_ENCODE_LEN: usize = 128;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CorpusError {
    InvalidRating { review_id: String, rating: i64 },
    EmptyText { review_id: String },
    DuplicateReviewId(String),
    PairRating { positive: u8, negative: u8 },
    PairProductMismatch { positive: String, negative: String },
}

impl fmt::Display for CorpusError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::InvalidRating { review_id, rating } => {
                write!(f, "review {review_id}: rating {rating} outside 1-5")
            }
            Self::EmptyText { review_id } => write!(f, "review {review_id}: empty text"),
            Self::DuplicateReviewId(id) => write!(f, "duplicate review id {id}"),
            Self::PairRating { positive, negative } => write!(
                f,
                "counterfactual pair needs ratings 5/1, got {positive}/{negative}"
            ),
            Self::PairProductMismatch { positive, negative } => write!(
                f,
                "counterfactual pair spans products {positive} and {negative}"
            ),
        }
    }
}

impl core::error::Error for CorpusError {}

/// One user review with its 1-5 star rating.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Review {
    pub review_id: String,
    pub product_id: String,
    pub text: String,
    pub rating: u8,
}

impl Review {
    pub fn new(
        review_id: impl Into<String>,
        product_id: impl Into<String>,
        text: impl Into<String>,
        rating: i64,
    ) -> Result<Self, CorpusError> {
        let review = Self {
            review_id: review_id.into(),
            product_id: product_id.into(),
            text: text.into(),
            rating: u8::try_from(rating).unwrap_or(0),
        };
        if !(1..=5).contains(&rating) {
            return Err(CorpusError::InvalidRating {
                review_id: review.review_id,
                rating,
            });
        }
        review.validate()?;
        Ok(review)
    }

    pub fn validate(&self) -> Result<(), CorpusError> {
        if !(1..=5).contains(&self.rating) {
            return Err(CorpusError::InvalidRating {
                review_id: self.review_id.clone(),
                rating: i64::from(self.rating),
            });
        }
        if self.text.trim().is_empty() {
            return Err(CorpusError::EmptyText {
                review_id: self.review_id.clone(),
            });
        }
        Ok(())
    }

    pub fn is_positive(&self) -> bool {
        self.rating > 3
    }

    pub fn is_negative(&self) -> bool {
        self.rating <= 2
    }
}

/// Ordered reviews indexed by product.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ReviewSet {
    reviews: Vec<Review>,
    by_product: BTreeMap<String, Vec<usize>>,
}

impl ReviewSet {
    pub fn new(reviews: Vec<Review>) -> Result<Self, CorpusError> {
        let mut seen = BTreeMap::new();
        let mut by_product: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for (i, r) in reviews.iter().enumerate() {
            r.validate()?;
            if seen.insert(r.review_id.as_str(), ()).is_some() {
                return Err(CorpusError::DuplicateReviewId(r.review_id.clone()));
            }
            by_product.entry(r.product_id.clone()).or_default().push(i);
        }
        Ok(Self {
            reviews,
            by_product,
        })
    }

    pub fn reviews(&self) -> &[Review] {
        &self.reviews
    }

    pub fn len(&self) -> usize {
        self.reviews.len()
    }

    pub fn is_empty(&self) -> bool {
        self.reviews.is_empty()
    }

    pub fn product_ids(&self) -> impl Iterator<Item = &str> {
        self.by_product.keys().map(String::as_str)
    }

    pub fn product(&self, product_id: &str) -> impl Iterator<Item = &Review> {
        self.by_product
            .get(product_id)
            .into_iter()
            .flatten()
            .map(|&i| &self.reviews[i])
    }

    pub fn contains_product(&self, product_id: &str) -> bool {
        self.by_product.contains_key(product_id)
    }

    pub fn into_reviews(self) -> Vec<Review> {
        self.reviews
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairOrigin {
    LlmRewrite,
    DisAe,
    Manual,
}

/// Same content, opposite polarity: a rating-5 review and its rating-1 twin.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CounterfactualPair {
    pub positive: Review,
    pub negative: Review,
    pub origin: PairOrigin,
}

impl CounterfactualPair {
    pub fn new(positive: Review, negative: Review, origin: PairOrigin) -> Result<Self, CorpusError> {
        let pair = Self {
            positive,
            negative,
            origin,
        };
        pair.validate()?;
        Ok(pair)
    }

    pub fn validate(&self) -> Result<(), CorpusError> {
        self.positive.validate()?;
        self.negative.validate()?;
        if self.positive.rating != 5 || self.negative.rating != 1 {
            return Err(CorpusError::PairRating {
                positive: self.positive.rating,
                negative: self.negative.rating,
            });
        }
        if self.positive.product_id != self.negative.product_id {
            return Err(CorpusError::PairProductMismatch {
                positive: self.positive.product_id.clone(),
                negative: self.negative.product_id.clone(),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistributionStats {
    pub total: usize,
    pub positive_fraction: f64,
    /// Counts for ratings 1..=5 at indices 0..=4.
    pub histogram: [usize; 5],
}

pub fn compute_distribution(set: &ReviewSet) -> DistributionStats {
    let mut histogram = [0usize; 5];
    for r in set.reviews() {
        histogram[usize::from(r.rating) - 1] += 1;
    }
    let total = set.len();
    let positive = histogram[3] + histogram[4];
    let positive_fraction = if total == 0 {
        0.0
    } else {
        positive as f64 / total as f64
    };
    DistributionStats {
        total,
        positive_fraction,
        histogram,
    }
}

/// Rating-5 reviews in corpus order.
pub fn select_rewrite_sources(set: &ReviewSet) -> Vec<Review> {
    set.reviews()
        .iter()
        .filter(|r| r.rating == 5)
        .cloned()
        .collect()
}

/// Lowercased word-level split; every punctuation character is its own token.
pub fn split_words(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for ch in text.chars() {
        if ch.is_whitespace() {
            if !cur.is_empty() {
                out.push(core::mem::take(&mut cur));
            }
        } else if ch.is_ascii_punctuation() || (!ch.is_alphanumeric() && ch != '\'') {
            if !cur.is_empty() {
                out.push(core::mem::take(&mut cur));
            }
            out.push(ch.to_lowercase().collect());
        } else {
            cur.extend(ch.to_lowercase());
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

/// The whitespace-normalized form that detokenization reproduces.
pub fn canonicalize(text: &str) -> String {
    split_words(text).join(" ")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "VocabRepr", into = "VocabRepr")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: BTreeMap<String, TokenId>,
    pub min_freq: usize,
}

#[derive(Serialize, Deserialize)]
struct VocabRepr {
    tokens: Vec<String>,
    min_freq: usize,
}

impl From<VocabRepr> for Vocabulary {
    fn from(r: VocabRepr) -> Self {
        Self::from_tokens(r.tokens, r.min_freq)
    }
}

impl From<Vocabulary> for VocabRepr {
    fn from(v: Vocabulary) -> Self {
        Self {
            tokens: v.tokens,
            min_freq: v.min_freq,
        }
    }
}

impl Vocabulary {
    /// Specials first, then tokens by descending frequency, ties broken lexically.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>, min_freq: usize) -> Self {
        let min_freq = min_freq.max(1);
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for t in texts {
            for w in split_words(t) {
                *counts.entry(w).or_default() += 1;
            }
        }
        let mut kept: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(w, c)| *c >= min_freq && !SPECIAL_TOKENS.contains(&w.as_str()))
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let tokens = SPECIAL_TOKENS
            .iter()
            .map(|s| s.to_string())
            .chain(kept.into_iter().map(|(w, _)| w))
            .collect();
        Self::from_tokens(tokens, min_freq)
    }

    /// Rebuilds from a stored token list whose first four entries are the specials.
    pub fn from_tokens(tokens: Vec<String>, min_freq: usize) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Self {
            tokens,
            index,
            min_freq,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.len() <= SPECIAL_TOKENS.len()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> TokenId {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index
            .get(token)
            .is_some_and(|&i| i >= SPECIAL_TOKENS.len())
    }

    pub fn token(&self, id: TokenId) -> &str {
        self.tokens
            .get(id)
            .map(String::as_str)
            .unwrap_or(SPECIAL_TOKENS[UNK])
    }

    /// `[BOS, w1, .., wn, EOS]`.
    pub fn tokenize(&self, text: &str) -> Vec<TokenId> {
        let mut ids = Vec::new();
        ids.push(BOS);
        ids.extend(split_words(text).iter().map(|w| self.id(w)));
        ids.push(EOS);
        ids
    }

    /// Like [`tokenize`](Self::tokenize) but keeps at most `max_len` ids in total.
    pub fn tokenize_capped(&self, text: &str, max_len: usize) -> Vec<TokenId> {
        let mut ids = self.tokenize(text);
        if ids.len() > max_len && max_len >= 2 {
            ids.truncate(max_len - 1);
            ids.push(EOS);
        }
        ids
    }

    pub fn detokenize(&self, ids: &[TokenId]) -> String {
        let words: Vec<&str> = ids
            .iter()
            .filter(|&&i| i != BOS && i != EOS && i != PAD)
            .map(|&i| self.token(i))
            .collect();
        words.join(" ")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn review(id: &str, rating: i64) -> Review {
        Review::new(id, "p1", "some text", rating).unwrap()
    }

    #[test]
    fn distribution_counts_ratings_above_three() {
        let set = ReviewSet::new(vec![review("a", 5), review("b", 4), review("c", 1)]).unwrap();
        let stats = compute_distribution(&set);
        assert_eq!(stats.total, 3);
        assert!((stats.positive_fraction - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(stats.histogram, [1, 0, 0, 1, 1]);

        let ones = ReviewSet::new(vec![review("a", 1), review("b", 1)]).unwrap();
        assert_eq!(compute_distribution(&ones).positive_fraction, 0.0);
        assert_eq!(compute_distribution(&ReviewSet::default()).positive_fraction, 0.0);
    }

    #[test]
    fn rejects_bad_reviews() {
        assert!(matches!(
            Review::new("x", "p", "t", 7),
            Err(CorpusError::InvalidRating { rating: 7, .. })
        ));
        assert!(matches!(
            Review::new("x", "p", "   ", 3),
            Err(CorpusError::EmptyText { .. })
        ));
        assert!(matches!(
            ReviewSet::new(vec![review("a", 5), review("a", 4)]),
            Err(CorpusError::DuplicateReviewId(_))
        ));
    }

    #[test]
    fn rewrite_sources_are_rating_five_in_order() {
        let set = ReviewSet::new(vec![
            review("a", 5),
            review("b", 3),
            review("c", 5),
            review("d", 1),
        ])
        .unwrap();
        let ids: Vec<_> = select_rewrite_sources(&set)
            .into_iter()
            .map(|r| r.review_id)
            .collect();
        assert_eq!(ids, ["a", "c"]);
        let none = ReviewSet::new(vec![review("a", 3)]).unwrap();
        assert!(select_rewrite_sources(&none).is_empty());
    }

    #[test]
    fn vocab_cutoff_and_specials() {
        let v = Vocabulary::build(["a a b"], 2);
        assert!(v.contains("a"));
        assert!(!v.contains("b"));
        assert_eq!(v.id("b"), UNK);

        let all = Vocabulary::build(["a a b"], 1);
        assert!(all.contains("a") && all.contains("b"));

        let empty = Vocabulary::build(core::iter::empty(), 2);
        assert_eq!(empty.len(), 4);
        assert_eq!(empty.tokens(), SPECIAL_TOKENS);
    }

    #[test]
    fn tokenize_round_trip_and_unknowns() {
        let v = Vocabulary::build(["The food was GREAT, really great!"], 1);
        let text = "the food was great , really great !";
        let ids = v.tokenize(text);
        assert_eq!(ids.first(), Some(&BOS));
        assert_eq!(ids.last(), Some(&EOS));
        assert_eq!(v.detokenize(&ids), text);
        assert_eq!(v.detokenize(&v.tokenize("The  food was great,really great!")), canonicalize("the food was great , really great !"));

        let ids = v.tokenize("the pizza");
        assert_eq!(ids, vec![BOS, v.id("the"), UNK, EOS]);
        assert_eq!(v.tokenize(""), vec![BOS, EOS]);
    }

    #[test]
    fn capped_tokenization_keeps_eos() {
        let v = Vocabulary::build(["a b c d e"], 1);
        let ids = v.tokenize_capped("a b c d e", 4);
        assert_eq!(ids.len(), 4);
        assert_eq!(ids[3], EOS);
    }

    #[test]
    fn pair_invariants() {
        let pos = Review::new("a", "p1", "good", 5).unwrap();
        let neg = Review::new("b", "p1", "bad", 1).unwrap();
        assert!(CounterfactualPair::new(pos.clone(), neg.clone(), PairOrigin::Manual).is_ok());
        let other = Review::new("c", "p2", "bad", 1).unwrap();
        assert!(CounterfactualPair::new(pos.clone(), other, PairOrigin::Manual).is_err());
        let three = Review::new("d", "p1", "meh", 3).unwrap();
        assert!(CounterfactualPair::new(pos, three, PairOrigin::Manual).is_err());
    }
}
