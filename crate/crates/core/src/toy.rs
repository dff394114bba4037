//! A seeded template grammar of restaurant reviews with aligned polarity
//! lexicons, for desk-scale experiments and tests.
//!
//! Every positive sentence has a counterfactual twin that differs only in
//! its polarity words, so content (item, aspect) and sentiment are known
//! by construction.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;

use crate::corpus::{split_words, CounterfactualPair, PairOrigin, Review};

pub const ITEMS: [&str; 12] = [
    "pizza", "pasta", "burger", "soup", "salad", "steak", "sushi", "tacos", "curry", "noodles",
    "sandwich", "coffee",
];

pub const ASPECTS: [&str; 10] = [
    "service", "staff", "decor", "music", "patio", "menu", "waiter", "bar", "kitchen", "lighting",
];

/// `(positive, negative)` adjective antonyms.
pub const ADJECTIVES: [(&str, &str); 8] = [
    ("great", "terrible"),
    ("fresh", "stale"),
    ("friendly", "rude"),
    ("delicious", "bland"),
    ("clean", "dirty"),
    ("amazing", "awful"),
    ("excellent", "poor"),
    ("cozy", "cramped"),
];

pub const VERBS: [(&str, &str); 3] = [("loved", "hated"), ("enjoyed", "regretted"), ("recommend", "avoid")];

const TEMPLATES: [&str; 4] = [
    "the {item} was {a1} and the {aspect} was {a2} .",
    "we {v} the {item} , the {aspect} is {a1} .",
    "{a1} {item} and {a2} {aspect} .",
    "the {aspect} here is {a1} , the {item} is {a2} .",
];

pub fn positive_words() -> impl Iterator<Item = &'static str> {
    ADJECTIVES.iter().map(|p| p.0).chain(VERBS.iter().map(|p| p.0))
}

pub fn negative_words() -> impl Iterator<Item = &'static str> {
    ADJECTIVES.iter().map(|p| p.1).chain(VERBS.iter().map(|p| p.1))
}

pub fn is_negative_word(w: &str) -> bool {
    negative_words().any(|n| n == w)
}

pub fn is_positive_word(w: &str) -> bool {
    positive_words().any(|p| p == w)
}

/// Antonym of a polarity word, in either direction.
pub fn flip_word(w: &str) -> Option<&'static str> {
    ADJECTIVES
        .iter()
        .chain(VERBS.iter())
        .find_map(|&(p, n)| if p == w { Some(n) } else if n == w { Some(p) } else { None })
}

/// Sign of the net polarity-word count: +1, -1 or 0.
pub fn lexicon_polarity(text: &str) -> i32 {
    let mut score = 0i32;
    for w in split_words(text) {
        if is_positive_word(&w) {
            score += 1;
        } else if is_negative_word(&w) {
            score -= 1;
        }
    }
    score.signum()
}

/// One sampled sentence skeleton.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ToySentence {
    pub item: &'static str,
    pub aspect: &'static str,
    template: usize,
    a1: usize,
    a2: usize,
    verb: usize,
}

impl ToySentence {
    pub fn sample<R: Rng + ?Sized>(rng: &mut R) -> Self {
        Self {
            item: ITEMS[rng.gen_range(0..ITEMS.len())],
            aspect: ASPECTS[rng.gen_range(0..ASPECTS.len())],
            template: rng.gen_range(0..TEMPLATES.len()),
            a1: rng.gen_range(0..ADJECTIVES.len()),
            a2: rng.gen_range(0..ADJECTIVES.len()),
            verb: rng.gen_range(0..VERBS.len()),
        }
    }

    pub fn with_item<R: Rng + ?Sized>(rng: &mut R, item: &'static str) -> Self {
        Self {
            item,
            ..Self::sample(rng)
        }
    }

    pub fn render(&self, positive: bool) -> String {
        let pick = |(p, n): (&'static str, &'static str)| if positive { p } else { n };
        TEMPLATES[self.template]
            .replace("{item}", self.item)
            .replace("{aspect}", self.aspect)
            .replace("{a1}", pick(ADJECTIVES[self.a1]))
            .replace("{a2}", pick(ADJECTIVES[self.a2]))
            .replace("{v}", pick(VERBS[self.verb]))
    }
}

pub fn product_for_item(item: &str) -> String {
    format!("prod-{item}")
}

/// `n` counterfactual pairs; product ids follow the item slot.
pub fn toy_pairs<R: Rng + ?Sized>(rng: &mut R, n: usize, id_prefix: &str) -> Vec<CounterfactualPair> {
    (0..n)
        .map(|i| {
            let s = ToySentence::sample(rng);
            let product = product_for_item(s.item);
            let pos = Review {
                review_id: format!("{id_prefix}{i}p"),
                product_id: product.clone(),
                text: s.render(true),
                rating: 5,
            };
            let neg = Review {
                review_id: format!("{id_prefix}{i}n"),
                product_id: product,
                text: s.render(false),
                rating: 1,
            };
            CounterfactualPair {
                positive: pos,
                negative: neg,
                origin: PairOrigin::Manual,
            }
        })
        .collect()
}

/// `n` single reviews, positive with probability `positive_fraction`.
/// Positive reviews are rated 5 or 4, negative ones 1 or 2.
pub fn toy_reviews<R: Rng + ?Sized>(
    rng: &mut R,
    n: usize,
    positive_fraction: f64,
    id_prefix: &str,
) -> Vec<Review> {
    (0..n)
        .map(|i| {
            let s = ToySentence::sample(rng);
            let positive = rng.gen_bool(positive_fraction.clamp(0.0, 1.0));
            let rating = match (positive, rng.gen_bool(0.7)) {
                (true, true) => 5,
                (true, false) => 4,
                (false, true) => 1,
                (false, false) => 2,
            };
            Review {
                review_id: format!("{id_prefix}{i}"),
                product_id: product_for_item(s.item),
                text: s.render(positive),
                rating,
            }
        })
        .collect()
}

/// A product group of `n` same-polarity reviews about one item.
pub fn toy_group<R: Rng + ?Sized>(
    rng: &mut R,
    item: &'static str,
    n: usize,
    positive: bool,
    id_prefix: &str,
) -> Vec<Review> {
    (0..n)
        .map(|i| {
            let s = ToySentence::with_item(rng, item);
            Review {
                review_id: format!("{id_prefix}{i}"),
                product_id: format!("group-{id_prefix}"),
                text: s.render(positive),
                rating: if positive { 5 } else { 1 },
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn twins_differ_only_in_polarity_words() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for p in toy_pairs(&mut rng, 50, "t") {
            p.validate().unwrap();
            let a = split_words(&p.positive.text);
            let b = split_words(&p.negative.text);
            assert_eq!(a.len(), b.len());
            for (x, y) in a.iter().zip(&b) {
                if x != y {
                    assert_eq!(flip_word(x), Some(y.as_str()));
                }
            }
            assert_eq!(lexicon_polarity(&p.positive.text), 1);
            assert_eq!(lexicon_polarity(&p.negative.text), -1);
        }
    }

    #[test]
    fn biased_reviews_follow_fraction() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let reviews = toy_reviews(&mut rng, 2000, 0.8, "r");
        let pos = reviews.iter().filter(|r| r.rating > 3).count();
        assert!((1500..1700).contains(&pos));
        for r in &reviews {
            assert_eq!(lexicon_polarity(&r.text), if r.rating > 3 { 1 } else { -1 });
        }
    }
}
