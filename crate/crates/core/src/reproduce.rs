//! Synthesis of new negative reviews by pairing the content latent of a
//! product's positive review with the sentiment latent of a negative one,
//! followed by fluency and sentiment filtering.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{CounterfactualPair, PairOrigin, Review, ReviewSet};
use crate::judge::{SentimentJudge, Verdict};
use crate::lm::{compute_ppl, FluencyScorer, PplScore, MIN_SCORABLE_CHARS};
use crate::model::{DisAeModel, ModelError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParentPair {
    pub content_parent: Review,
    pub sentiment_parent: Review,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthesisCandidate {
    pub text: String,
    pub product_id: String,
    pub content_parent_id: String,
    pub sentiment_parent_id: String,
    /// `None` until scored, and for texts too short to score.
    pub ppl: Option<f64>,
    pub verdict: Verdict,
    pub kept: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FilterConfig {
    pub ppl_threshold: f64,
    pub min_chars: usize,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            ppl_threshold: 125.0,
            min_chars: MIN_SCORABLE_CHARS,
        }
    }
}

impl FilterConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.ppl_threshold > 0.0) {
            return Err(format!("ppl_threshold must be positive, got {}", self.ppl_threshold));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterAudit {
    pub generated: usize,
    pub kept: usize,
    pub dropped_fluency: usize,
    pub dropped_sentiment: usize,
}

impl FilterAudit {
    pub fn add(&mut self, o: &FilterAudit) {
        self.generated += o.generated;
        self.kept += o.kept;
        self.dropped_fluency += o.dropped_fluency;
        self.dropped_sentiment += o.dropped_sentiment;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropReason {
    Fluency,
    Sentiment,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ReproWarning {
    UnknownProduct { product_id: String },
    NoPositives { product_id: String },
    NoNegatives,
    QuotaUnmet { product_id: String, kept: usize, quota: usize },
}

impl fmt::Display for ReproWarning {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::UnknownProduct { product_id } => write!(f, "product {product_id} not in corpus"),
            Self::NoPositives { product_id } => {
                write!(f, "product {product_id} has no positive reviews to use as content parents")
            }
            Self::NoNegatives => write!(f, "corpus has no negative reviews to use as sentiment parents"),
            Self::QuotaUnmet {
                product_id,
                kept,
                quota,
            } => write!(f, "product {product_id}: kept {kept} of quota {quota} before parents ran out"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParentSelection {
    pub pairs: Vec<ParentPair>,
    pub warning: Option<ReproWarning>,
}

/// Crosses the product's positive reviews (rating at least
/// `min_content_rating`) with a seeded shuffle of all negative reviews in
/// the corpus. Pairs are ordered negative-major so consecutive pairs rotate
/// through the content parents.
pub fn select_parents(
    set: &ReviewSet,
    product_id: &str,
    limit: Option<usize>,
    min_content_rating: u8,
    seed: u64,
) -> ParentSelection {
    let empty = |w| ParentSelection {
        pairs: Vec::new(),
        warning: Some(w),
    };
    if !set.contains_product(product_id) {
        return empty(ReproWarning::UnknownProduct {
            product_id: product_id.into(),
        });
    }
    let positives: Vec<&Review> = set
        .product(product_id)
        .filter(|r| r.rating >= min_content_rating.max(4))
        .collect();
    if positives.is_empty() {
        return empty(ReproWarning::NoPositives {
            product_id: product_id.into(),
        });
    }
    let mut negatives: Vec<&Review> = set.reviews().iter().filter(|r| r.is_negative()).collect();
    if negatives.is_empty() {
        return empty(ReproWarning::NoNegatives);
    }
    negatives.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    let limit = limit.unwrap_or(usize::MAX);
    let mut pairs = Vec::new();
    'outer: for n in &negatives {
        for p in &positives {
            if pairs.len() >= limit {
                break 'outer;
            }
            pairs.push(ParentPair {
                content_parent: (*p).clone(),
                sentiment_parent: (*n).clone(),
            });
        }
    }
    ParentSelection { pairs, warning: None }
}

/// Decodes `[z~_e(sentiment parent) ; z_c(content parent)]` with the model's
/// beam width and length limit. The result is unscored.
pub fn synthesize(model: &DisAeModel, pair: &ParentPair) -> Result<SynthesisCandidate, ModelError> {
    let content = model.encode_text(&pair.content_parent.text)?.factors;
    let sentiment = model.encode_text(&pair.sentiment_parent.text)?.factors;
    let mut z = sentiment.z_tilde_e;
    z.extend_from_slice(&content.z_c);
    Ok(SynthesisCandidate {
        text: model.generate(&z)?,
        product_id: pair.content_parent.product_id.clone(),
        content_parent_id: pair.content_parent.review_id.clone(),
        sentiment_parent_id: pair.sentiment_parent.review_id.clone(),
        ppl: None,
        verdict: Verdict::Unscored,
        kept: false,
    })
}

/// Fills in whichever of perplexity and verdict is still missing.
pub fn score_candidate(
    c: &mut SynthesisCandidate,
    scorer: &dyn FluencyScorer,
    judge: &dyn SentimentJudge,
    cfg: &FilterConfig,
) {
    if c.ppl.is_none() {
        if let PplScore::Scored { ppl } = compute_ppl(scorer, &c.text, cfg.min_chars) {
            c.ppl = Some(ppl);
        }
    }
    if c.verdict == Verdict::Unscored {
        c.verdict = judge.judge(&c.text);
    }
}

/// Decision for a scored candidate; fluency is checked first.
pub fn decide(c: &SynthesisCandidate, cfg: &FilterConfig) -> Result<(), DropReason> {
    match c.ppl {
        Some(p) if p <= cfg.ppl_threshold => {}
        _ => return Err(DropReason::Fluency),
    }
    if c.verdict != Verdict::Negative {
        return Err(DropReason::Sentiment);
    }
    Ok(())
}

fn tally(audit: &mut FilterAudit, d: Result<(), DropReason>) {
    audit.generated += 1;
    match d {
        Ok(()) => audit.kept += 1,
        Err(DropReason::Fluency) => audit.dropped_fluency += 1,
        Err(DropReason::Sentiment) => audit.dropped_sentiment += 1,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterOutcome {
    pub retained: Vec<SynthesisCandidate>,
    pub audit: FilterAudit,
}

/// Scores unscored fields, then keeps candidates with
/// `ppl <= threshold` and a negative verdict, in input order.
pub fn filter(
    candidates: Vec<SynthesisCandidate>,
    scorer: &dyn FluencyScorer,
    judge: &dyn SentimentJudge,
    cfg: &FilterConfig,
) -> FilterOutcome {
    let mut audit = FilterAudit::default();
    let mut retained = Vec::new();
    for mut c in candidates {
        score_candidate(&mut c, scorer, judge, cfg);
        let d = decide(&c, cfg);
        tally(&mut audit, d);
        c.kept = d.is_ok();
        if c.kept {
            retained.push(c);
        }
    }
    FilterOutcome { retained, audit }
}

/// Runs synthesis over a batch of parent pairs. Implementations may work in
/// parallel but must return results in input order.
pub trait Synthesizer {
    fn synthesize_batch(
        &self,
        model: &DisAeModel,
        pairs: &[ParentPair],
    ) -> Vec<Result<SynthesisCandidate, ModelError>>;
}

pub struct SequentialSynthesizer;

impl Synthesizer for SequentialSynthesizer {
    fn synthesize_batch(
        &self,
        model: &DisAeModel,
        pairs: &[ParentPair],
    ) -> Vec<Result<SynthesisCandidate, ModelError>> {
        pairs.iter().map(|p| synthesize(model, p)).collect()
    }
}

/// Parent pairs handed to the synthesizer at once. Fixed so that output does
/// not depend on the degree of parallelism.
pub const SYNTH_BATCH: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReproduceConfig {
    pub per_product_quota: usize,
    /// Cap on parent pairs tried per product (`None`: all).
    pub max_parents: Option<usize>,
    pub filter: FilterConfig,
    pub seed: u64,
}

impl Default for ReproduceConfig {
    fn default() -> Self {
        Self {
            per_product_quota: 10,
            max_parents: Some(200),
            filter: FilterConfig::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProductAudit {
    pub product_id: String,
    #[serde(flatten)]
    pub audit: FilterAudit,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ReproduceOutput {
    pub pairs: Vec<CounterfactualPair>,
    pub audits: Vec<ProductAudit>,
    pub warnings: Vec<ReproWarning>,
}

fn product_seed(seed: u64, product_id: &str) -> u64 {
    // FNV-1a over the product id, mixed with the run seed.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in product_id.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100_0000_01b3);
    }
    h ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

/// For each product, synthesizes from its parent pairs until the quota of
/// kept candidates is met or parents run out. Content parents must be rated
/// 5 so that each output is a valid counterfactual pair.
pub fn reproduce(
    model: &DisAeModel,
    set: &ReviewSet,
    products: &[String],
    cfg: &ReproduceConfig,
    scorer: &dyn FluencyScorer,
    judge: &dyn SentimentJudge,
    synth: &dyn Synthesizer,
) -> Result<ReproduceOutput, ModelError> {
    let mut out = ReproduceOutput::default();
    for product in products {
        let mut audit = FilterAudit::default();
        let mut kept = 0;
        if cfg.per_product_quota > 0 {
            let sel = select_parents(set, product, cfg.max_parents, 5, product_seed(cfg.seed, product));
            out.warnings.extend(sel.warning);
            'batches: for batch in sel.pairs.chunks(SYNTH_BATCH) {
                for (parent, cand) in batch.iter().zip(synth.synthesize_batch(model, batch)) {
                    let mut c = cand?;
                    score_candidate(&mut c, scorer, judge, &cfg.filter);
                    let d = decide(&c, &cfg.filter);
                    tally(&mut audit, d);
                    if d.is_ok() {
                        kept += 1;
                        out.pairs.push(CounterfactualPair {
                            positive: parent.content_parent.clone(),
                            negative: Review {
                                review_id: format!("{}~{}", c.content_parent_id, c.sentiment_parent_id),
                                product_id: c.product_id,
                                text: c.text,
                                rating: 1,
                            },
                            origin: PairOrigin::DisAe,
                        });
                        if kept >= cfg.per_product_quota {
                            break 'batches;
                        }
                    }
                }
            }
            if kept < cfg.per_product_quota {
                out.warnings.push(ReproWarning::QuotaUnmet {
                    product_id: product.clone(),
                    kept,
                    quota: cfg.per_product_quota,
                });
            }
        }
        out.audits.push(ProductAudit {
            product_id: product.clone(),
            audit,
        });
    }
    Ok(out)
}
