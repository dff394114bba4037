//! Few-shot prompts for sentiment-flipping rewrites, the generation-service
//! interface, and greedy insertion-order optimization of demonstrations.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{split_words, CounterfactualPair, PairOrigin, Review};
use crate::judge::{SentimentJudge, Verdict};

pub const DEFAULT_INSTRUCTION: &str = "Your task is to generate a counterfactual that retains internal coherence and avoids unnecessary changes.";
pub const DEFAULT_TEMPERATURE: f64 = 0.2;
pub const DEFAULT_NUM_EXAMPLES: usize = 5;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Demonstration {
    pub source: String,
    pub counterfactual: String,
}

impl Demonstration {
    pub fn new(source: impl Into<String>, counterfactual: impl Into<String>) -> Self {
        Self {
            source: source.into(),
            counterfactual: counterfactual.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PromptState {
    pub instruction: String,
    pub examples: Vec<Demonstration>,
    pub temperature: f64,
}

impl Default for PromptState {
    fn default() -> Self {
        Self {
            instruction: DEFAULT_INSTRUCTION.into(),
            examples: Vec::new(),
            temperature: DEFAULT_TEMPERATURE,
        }
    }
}

impl PromptState {
    pub fn with_examples(examples: Vec<Demonstration>) -> Self {
        Self {
            examples,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), PromptError> {
        if !(0.0..=1.0).contains(&self.temperature) {
            return Err(PromptError::InvalidConfig(format!(
                "temperature must be in [0, 1], got {}",
                self.temperature
            )));
        }
        Ok(())
    }

    /// A copy with `demo` inserted before position `pos`.
    pub fn inserted(&self, pos: usize, demo: Demonstration) -> Self {
        let mut s = self.clone();
        s.examples.insert(pos, demo);
        s
    }
}

/// Instruction, then each demonstration as an Example/Counterfactual block,
/// then the query with an empty Counterfactual slot.
pub fn render_prompt(state: &PromptState, query: &str) -> String {
    let mut out = String::new();
    out.push_str(state.instruction.trim());
    out.push_str("\n\n");
    for d in &state.examples {
        out.push_str(&format!(
            "Example: {}\n\nCounterfactual: {}\n\n",
            d.source.trim(),
            d.counterfactual.trim()
        ));
    }
    out.push_str(&format!("Example: {}\n\nCounterfactual:", query.trim()));
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub temperature: f64,
    pub messages: Vec<ChatMessage>,
}

pub fn chat_request(state: &PromptState, model: &str, query: &str) -> ChatRequest {
    ChatRequest {
        model: model.into(),
        temperature: state.temperature,
        messages: vec![ChatMessage {
            role: "user".into(),
            content: render_prompt(state, query),
        }],
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ServiceError {
    pub message: String,
    pub retryable: bool,
}

impl ServiceError {
    pub fn retryable(message: impl Into<String>) -> Self {
        Self {
            message: message.into(),
            retryable: true,
        }
    }

    pub fn fatal(message: impl Into<String>) -> Self {
        Self {
            message: message.into(),
            retryable: false,
        }
    }
}

impl fmt::Display for ServiceError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

/// A chat-style text-generation backend.
pub trait GenerationService {
    fn complete(&self, request: &ChatRequest) -> Result<String, ServiceError>;

    /// Completes independent requests, returning results in input order.
    fn complete_batch(&self, requests: &[ChatRequest]) -> Vec<Result<String, ServiceError>> {
        requests.iter().map(|r| self.complete(r)).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum PromptError {
    InvalidConfig(String),
    NotRewriteSource { review_id: String, rating: u8 },
    Service { attempts: usize, error: ServiceError },
    EmptyCompletion { review_id: String },
    EmptyTestSet,
    Annotation { review_id: String, message: String },
    Corpus(crate::corpus::CorpusError),
}

impl fmt::Display for PromptError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::InvalidConfig(m) => write!(f, "invalid prompt config: {m}"),
            Self::NotRewriteSource { review_id, rating } => {
                write!(f, "review {review_id} has rating {rating}; only rating-5 reviews are rewritten")
            }
            Self::Service { attempts, error } => {
                write!(f, "generation service failed after {attempts} attempt(s): {error}")
            }
            Self::EmptyCompletion { review_id } => {
                write!(f, "generation service returned an empty rewrite for review {review_id}")
            }
            Self::EmptyTestSet => write!(f, "cannot score a prompt on an empty test set"),
            Self::Annotation { review_id, message } => {
                write!(f, "no annotation for review {review_id}: {message}")
            }
            Self::Corpus(e) => write!(f, "{e}"),
        }
    }
}

impl core::error::Error for PromptError {}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RewriteConfig {
    pub model: String,
    pub max_attempts: usize,
}

impl Default for RewriteConfig {
    fn default() -> Self {
        Self {
            model: "gpt-4o-mini".into(),
            max_attempts: 3,
        }
    }
}

fn retry(
    client: &dyn GenerationService,
    req: &ChatRequest,
    first: Result<String, ServiceError>,
    max_attempts: usize,
) -> Result<String, PromptError> {
    let mut attempts = 1;
    let mut result = first;
    loop {
        match result {
            Ok(s) => return Ok(s),
            Err(e) if !e.retryable || attempts >= max_attempts.max(1) => {
                return Err(PromptError::Service { attempts, error: e })
            }
            Err(_) => {
                attempts += 1;
                result = client.complete(req);
            }
        }
    }
}

/// Completes every request, retrying retryable failures individually.
fn complete_all(
    client: &dyn GenerationService,
    reqs: &[ChatRequest],
    max_attempts: usize,
) -> Result<Vec<String>, PromptError> {
    client
        .complete_batch(reqs)
        .into_iter()
        .zip(reqs)
        .map(|(r, req)| retry(client, req, r, max_attempts))
        .collect()
}

fn counterfactual_pair(source: &Review, completion: &str) -> Result<CounterfactualPair, PromptError> {
    let text = completion.trim();
    if text.is_empty() {
        return Err(PromptError::EmptyCompletion {
            review_id: source.review_id.clone(),
        });
    }
    let negative = Review {
        review_id: format!("{}-cf", source.review_id),
        product_id: source.product_id.clone(),
        text: text.into(),
        rating: 1,
    };
    CounterfactualPair::new(source.clone(), negative, PairOrigin::LlmRewrite).map_err(PromptError::Corpus)
}

fn check_source(source: &Review) -> Result<(), PromptError> {
    if source.rating != 5 {
        return Err(PromptError::NotRewriteSource {
            review_id: source.review_id.clone(),
            rating: source.rating,
        });
    }
    Ok(())
}

/// Rewrites a rating-5 review into its rating-1 counterfactual.
pub fn rewrite(
    client: &dyn GenerationService,
    state: &PromptState,
    source: &Review,
    cfg: &RewriteConfig,
) -> Result<CounterfactualPair, PromptError> {
    check_source(source)?;
    let req = chat_request(state, &cfg.model, &source.text);
    let first = client.complete(&req);
    let out = retry(client, &req, first, cfg.max_attempts)?;
    counterfactual_pair(source, &out)
}

/// Rewrites many sources through one batched service call. Per-item
/// failures are returned in place.
pub fn rewrite_all(
    client: &dyn GenerationService,
    state: &PromptState,
    sources: &[Review],
    cfg: &RewriteConfig,
) -> Vec<Result<CounterfactualPair, PromptError>> {
    let reqs: Vec<ChatRequest> = sources
        .iter()
        .map(|s| chat_request(state, &cfg.model, &s.text))
        .collect();
    client
        .complete_batch(&reqs)
        .into_iter()
        .zip(sources.iter().zip(&reqs))
        .map(|(r, (src, req))| {
            check_source(src)?;
            let out = retry(client, req, r, cfg.max_attempts)?;
            counterfactual_pair(src, &out)
        })
        .collect()
}

/// Judges whether a rewrite is an acceptable counterfactual of its source.
pub trait Evaluator {
    fn verdict(&self, source: &str, rewrite: &str) -> bool;
}

impl<F: Fn(&str, &str) -> bool> Evaluator for F {
    fn verdict(&self, source: &str, rewrite: &str) -> bool {
        self(source, rewrite)
    }
}

/// Token-level Levenshtein distance divided by the longer length.
pub fn normalized_edit_distance(a: &str, b: &str) -> f64 {
    let a = split_words(a);
    let b = split_words(b);
    let longest = a.len().max(b.len());
    if longest == 0 {
        return 0.0;
    }
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        core::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()] as f64 / longest as f64
}

pub const DEFAULT_MAX_EDIT: f64 = 0.6;

/// Accepts rewrites judged negative whose normalized edit distance to the
/// source is at most `max_edit`.
pub struct ReferenceEvaluator<J> {
    pub judge: J,
    pub max_edit: f64,
}

impl<J: SentimentJudge> Evaluator for ReferenceEvaluator<J> {
    fn verdict(&self, source: &str, rewrite: &str) -> bool {
        self.judge.judge(rewrite) == Verdict::Negative
            && normalized_edit_distance(source, rewrite) <= self.max_edit
    }
}

/// Per-item outcome of scoring a prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptScore {
    pub score: f64,
    pub verdicts: Vec<bool>,
}

/// Success rate of the prompt on `testset`. Empty completions count as failures.
pub fn score_prompt_detail(
    state: &PromptState,
    testset: &[Review],
    client: &dyn GenerationService,
    evaluator: &dyn Evaluator,
    cfg: &RewriteConfig,
) -> Result<PromptScore, PromptError> {
    if testset.is_empty() {
        return Err(PromptError::EmptyTestSet);
    }
    let reqs: Vec<ChatRequest> = testset
        .iter()
        .map(|r| chat_request(state, &cfg.model, &r.text))
        .collect();
    let outs = complete_all(client, &reqs, cfg.max_attempts)?;
    let verdicts: Vec<bool> = testset
        .iter()
        .zip(&outs)
        .map(|(src, out)| {
            let out = out.trim();
            !out.is_empty() && evaluator.verdict(&src.text, out)
        })
        .collect();
    let score = verdicts.iter().filter(|&&v| v).count() as f64 / verdicts.len() as f64;
    Ok(PromptScore { score, verdicts })
}

pub fn score_prompt(
    state: &PromptState,
    testset: &[Review],
    client: &dyn GenerationService,
    evaluator: &dyn Evaluator,
    cfg: &RewriteConfig,
) -> Result<f64, PromptError> {
    score_prompt_detail(state, testset, client, evaluator, cfg).map(|s| s.score)
}

/// Items for prompt optimization with their composition counts: `m` items
/// whose transformation is known to be problematic and `n` routine ones.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSet {
    pub items: Vec<Review>,
    pub m: usize,
    pub n: usize,
}

impl EvalSet {
    pub fn new(items: Vec<Review>, m: usize, n: usize) -> Result<Self, PromptError> {
        if items.len() != m + n {
            return Err(PromptError::InvalidConfig(format!(
                "evaluation set has {} items but m + n = {}",
                items.len(),
                m + n
            )));
        }
        Ok(Self { items, m, n })
    }
}

/// Supplies the reference counterfactual for a chosen item.
pub trait Annotator {
    fn annotate(&mut self, item: &Review) -> Result<String, String>;
}

impl<F: FnMut(&Review) -> Result<String, String>> Annotator for F {
    fn annotate(&mut self, item: &Review) -> Result<String, String> {
        self(item)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    /// Target success rate; stop once a step scores above it.
    pub delta: f64,
    /// Minimum improvement between consecutive steps.
    pub epsilon: f64,
    pub seed: u64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            delta: 0.8,
            epsilon: 0.1,
            seed: 0,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<(), PromptError> {
        for (name, v) in [("delta", self.delta), ("epsilon", self.epsilon)] {
            if !(v > 0.0 && v <= 1.0) {
                return Err(PromptError::InvalidConfig(format!("{name} must be in (0, 1], got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Target,
    Plateau,
    PoolExhausted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub t: usize,
    pub chosen: String,
    /// Score of each insertion position, front to back.
    pub position_scores: Vec<f64>,
    pub best_position: usize,
    pub score: f64,
    /// Review ids the candidates were scored on.
    pub tested: Vec<String>,
    pub pool_after: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizeOutcome {
    pub state: PromptState,
    pub iterations: Vec<IterationRecord>,
    pub stop: StopReason,
    /// Set when the loop ended because no candidates were left.
    pub warning: Option<String>,
}

/// Grows the demonstration list one annotated item at a time. Each step
/// tries every insertion position, keeps the best-scoring one (earliest on
/// ties), scores only on items not yet used as demonstrations, and refills
/// the candidate pool with the items the kept prompt still fails.
pub fn optimize_prompt(
    seed: &PromptState,
    evalset: &EvalSet,
    client: &dyn GenerationService,
    evaluator: &dyn Evaluator,
    annotator: &mut dyn Annotator,
    cfg: &OptimizerConfig,
    rewrite_cfg: &RewriteConfig,
) -> Result<OptimizeOutcome, PromptError> {
    cfg.validate()?;
    seed.validate()?;
    if evalset.items.len() < 2 {
        return Err(PromptError::InvalidConfig("evaluation set needs at least 2 items".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut state = seed.clone();
    let mut used: BTreeSet<usize> = (0..evalset.items.len())
        .filter(|&i| state.examples.iter().any(|d| d.source == evalset.items[i].text))
        .collect();
    let mut pool: Vec<usize> = (0..evalset.items.len()).filter(|i| !used.contains(i)).collect();
    let mut iterations = Vec::new();
    let mut prev: Option<f64> = None;

    let stop = loop {
        let remaining = evalset.items.len() - used.len();
        if pool.is_empty() || remaining < 2 {
            break StopReason::PoolExhausted;
        }
        let pick = pool[rng.gen_range(0..pool.len())];
        let item = &evalset.items[pick];
        let y = annotator
            .annotate(item)
            .map_err(|message| PromptError::Annotation {
                review_id: item.review_id.clone(),
                message,
            })?;
        used.insert(pick);
        let residue: Vec<usize> = (0..evalset.items.len()).filter(|i| !used.contains(i)).collect();
        let test: Vec<Review> = residue.iter().map(|&i| evalset.items[i].clone()).collect();
        let demo = Demonstration::new(item.text.clone(), y);

        let mut best: Option<(usize, PromptScore)> = None;
        let mut position_scores = Vec::with_capacity(state.examples.len() + 1);
        for pos in 0..=state.examples.len() {
            let cand = state.inserted(pos, demo.clone());
            let s = score_prompt_detail(&cand, &test, client, evaluator, rewrite_cfg)?;
            position_scores.push(s.score);
            if best.as_ref().is_none_or(|(_, b)| s.score > b.score) {
                best = Some((pos, s));
            }
        }
        let (best_pos, best_score) = best.expect("at least one insertion position");
        state = state.inserted(best_pos, demo);
        pool = residue
            .iter()
            .zip(&best_score.verdicts)
            .filter(|(_, &ok)| !ok)
            .map(|(&i, _)| i)
            .collect();
        iterations.push(IterationRecord {
            t: iterations.len() + 1,
            chosen: item.review_id.clone(),
            position_scores,
            best_position: best_pos,
            score: best_score.score,
            tested: test.iter().map(|r| r.review_id.clone()).collect(),
            pool_after: pool.iter().map(|&i| evalset.items[i].review_id.clone()).collect(),
        });
        if best_score.score > cfg.delta {
            break StopReason::Target;
        }
        if prev.is_some_and(|p| best_score.score - p < cfg.epsilon) {
            break StopReason::Plateau;
        }
        prev = Some(best_score.score);
    };
    let warning = (stop == StopReason::PoolExhausted)
        .then(|| String::from("candidate pool exhausted before the stopping rule fired"));
    Ok(OptimizeOutcome {
        state,
        iterations,
        stop,
        warning,
    })
}

#[cfg(test)]
mod tests;
