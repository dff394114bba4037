use super::*;
use alloc::string::ToString;
use core::cell::{Cell, RefCell};

const GREAT: &str = "Great place to eat. Food always tastes fresh. Frequently visit ray road location. Ice machine always seems to be working. Very sanitary to scoop ice with a clean scooper provided.";
const TERRIBLE: &str = "Terrible place to eat. Food always tastes stale. Rarely visit ray road location. Ice machine never seems to be working. Very unsanitary to scoop ice with a dirty scooper provided.";

fn review(id: &str, rating: u8, text: &str) -> Review {
    Review {
        review_id: id.into(),
        product_id: "p".into(),
        text: text.into(),
        rating,
    }
}

/// The query text of a rendered prompt.
fn query_of(req: &ChatRequest) -> &str {
    let c = &req.messages[0].content;
    let start = c.rfind("Example: ").unwrap() + "Example: ".len();
    let end = c.rfind("\n\nCounterfactual:").unwrap();
    &c[start..end]
}

struct Canned;

impl GenerationService for Canned {
    fn complete(&self, req: &ChatRequest) -> Result<String, ServiceError> {
        Ok(if query_of(req) == GREAT {
            format!("  {TERRIBLE}\n")
        } else {
            String::new()
        })
    }
}

#[test]
fn zero_examples_render_instruction_and_query() {
    let s = PromptState::default();
    assert_eq!(
        render_prompt(&s, "nice shoes"),
        format!("{DEFAULT_INSTRUCTION}\n\nExample: nice shoes\n\nCounterfactual:")
    );
}

#[test]
fn default_instruction_is_verbatim() {
    assert_eq!(
        PromptState::default().instruction,
        "Your task is to generate a counterfactual that retains internal coherence and avoids unnecessary changes."
    );
    assert_eq!(PromptState::default().temperature, 0.2);
}

#[test]
fn examples_render_in_order() {
    let s = PromptState::with_examples(vec![
        Demonstration::new("first src", "first cf"),
        Demonstration::new("second src", "second cf"),
    ]);
    let out = render_prompt(&s, "q");
    let a = out.find("Example: first src\n\nCounterfactual: first cf").unwrap();
    let b = out.find("Example: second src\n\nCounterfactual: second cf").unwrap();
    assert!(a < b);
    assert!(out.ends_with("Example: q\n\nCounterfactual:"));
}

#[test]
fn rewrite_produces_flipped_pair() {
    let src = review("r1", 5, GREAT);
    let pair = rewrite(&Canned, &PromptState::default(), &src, &RewriteConfig::default()).unwrap();
    assert_eq!(pair.positive, src);
    assert_eq!(pair.negative.text, TERRIBLE);
    assert_eq!(pair.negative.rating, 1);
    assert_eq!(pair.negative.product_id, "p");
    assert_eq!(pair.origin, PairOrigin::LlmRewrite);
    let again = rewrite(&Canned, &PromptState::default(), &src, &RewriteConfig::default()).unwrap();
    assert_eq!(pair, again);
}

#[test]
fn empty_completion_is_rejected() {
    let src = review("r2", 5, "something else");
    let err = rewrite(&Canned, &PromptState::default(), &src, &RewriteConfig::default()).unwrap_err();
    assert_eq!(err, PromptError::EmptyCompletion { review_id: "r2".into() });
}

#[test]
fn only_rating_five_is_rewritten() {
    let src = review("r3", 4, GREAT);
    assert!(matches!(
        rewrite(&Canned, &PromptState::default(), &src, &RewriteConfig::default()),
        Err(PromptError::NotRewriteSource { rating: 4, .. })
    ));
}

struct Flaky {
    failures: Cell<usize>,
    retryable: bool,
}

impl GenerationService for Flaky {
    fn complete(&self, _: &ChatRequest) -> Result<String, ServiceError> {
        if self.failures.get() > 0 {
            self.failures.set(self.failures.get() - 1);
            return Err(ServiceError {
                message: "busy".into(),
                retryable: self.retryable,
            });
        }
        Ok("bad".into())
    }
}

#[test]
fn retryable_failures_are_retried_then_reported() {
    let cfg = RewriteConfig {
        max_attempts: 3,
        ..RewriteConfig::default()
    };
    let src = review("r", 5, "good");
    let ok = Flaky {
        failures: Cell::new(2),
        retryable: true,
    };
    assert!(rewrite(&ok, &PromptState::default(), &src, &cfg).is_ok());
    let bad = Flaky {
        failures: Cell::new(5),
        retryable: true,
    };
    assert!(matches!(
        rewrite(&bad, &PromptState::default(), &src, &cfg),
        Err(PromptError::Service { attempts: 3, .. })
    ));
    let fatal = Flaky {
        failures: Cell::new(1),
        retryable: false,
    };
    assert!(matches!(
        rewrite(&fatal, &PromptState::default(), &src, &cfg),
        Err(PromptError::Service { attempts: 1, .. })
    ));
}

/// Returns the query text itself, so evaluators can key on it.
struct Echo;

impl GenerationService for Echo {
    fn complete(&self, req: &ChatRequest) -> Result<String, ServiceError> {
        Ok(query_of(req).to_string())
    }
}

fn items(n: usize) -> Vec<Review> {
    (0..n).map(|i| review(&format!("i{i}"), 5, &format!("item {i}"))).collect()
}

#[test]
fn score_bounds_and_mean() {
    let test = items(4);
    let cfg = RewriteConfig::default();
    let s = PromptState::default();
    assert_eq!(score_prompt(&s, &test, &Echo, &|_: &str, _: &str| true, &cfg).unwrap(), 1.0);
    assert_eq!(score_prompt(&s, &test, &Echo, &|_: &str, _: &str| false, &cfg).unwrap(), 0.0);
    let three = |src: &str, _: &str| src != "item 3";
    assert_eq!(score_prompt(&s, &test, &Echo, &three, &cfg).unwrap(), 0.75);
    assert_eq!(
        score_prompt(&s, &[], &Echo, &three, &cfg),
        Err(PromptError::EmptyTestSet)
    );
}

#[test]
fn empty_completions_score_zero() {
    let test = vec![review("a", 5, GREAT), review("b", 5, "other")];
    let s = score_prompt(
        &PromptState::default(),
        &test,
        &Canned,
        &|_: &str, _: &str| true,
        &RewriteConfig::default(),
    )
    .unwrap();
    assert_eq!(s, 0.5);
}

#[test]
fn edit_distance_normalization() {
    assert_eq!(normalized_edit_distance("", ""), 0.0);
    assert_eq!(normalized_edit_distance("a b c", "a b c"), 0.0);
    assert!((normalized_edit_distance("the food was great", "the food was awful") - 0.25).abs() < 1e-12);
    assert_eq!(normalized_edit_distance("a b", "c d e f"), 1.0);
}

#[test]
fn reference_evaluator_needs_negative_and_small_edit() {
    let judge = |t: &str| {
        if t.contains("awful") {
            Verdict::Negative
        } else {
            Verdict::NonNegative
        }
    };
    let ev = ReferenceEvaluator { judge, max_edit: DEFAULT_MAX_EDIT };
    assert!(ev.verdict("the food was great", "the food was awful"));
    assert!(!ev.verdict("the food was great", "the food was fine"));
    assert!(!ev.verdict("the food was great", "awful awful awful awful awful"));
}

/// Counts requests and records every query.
struct Recording {
    queries: RefCell<Vec<String>>,
}

impl GenerationService for Recording {
    fn complete(&self, req: &ChatRequest) -> Result<String, ServiceError> {
        let q = query_of(req).to_string();
        self.queries.borrow_mut().push(q.clone());
        Ok(q)
    }
}

fn annotate(r: &Review) -> Result<String, String> {
    Ok(format!("not {}", r.text))
}

#[test]
fn first_insertion_above_target_stops() {
    let eval = EvalSet::new(items(6), 4, 2).unwrap();
    let seed = PromptState::with_examples(vec![Demonstration::new("s1", "c1"), Demonstration::new("s2", "c2")]);
    let client = Recording {
        queries: RefCell::new(Vec::new()),
    };
    let out = optimize_prompt(
        &seed,
        &eval,
        &client,
        &|_: &str, _: &str| true,
        &mut annotate,
        &OptimizerConfig::default(),
        &RewriteConfig::default(),
    )
    .unwrap();
    assert_eq!(out.stop, StopReason::Target);
    assert_eq!(out.iterations.len(), 1);
    assert_eq!(out.state.examples.len(), 3);
    // three insertion positions, five held-out items each
    assert_eq!(out.iterations[0].position_scores.len(), 3);
    assert_eq!(client.queries.borrow().len(), 15);
    assert!(out.warning.is_none());
}

#[test]
fn ties_keep_the_earliest_position() {
    let eval = EvalSet::new(items(4), 2, 2).unwrap();
    let seed = PromptState::with_examples(vec![Demonstration::new("s1", "c1")]);
    let out = optimize_prompt(
        &seed,
        &eval,
        &Echo,
        &|_: &str, _: &str| true,
        &mut annotate,
        &OptimizerConfig::default(),
        &RewriteConfig::default(),
    )
    .unwrap();
    assert_eq!(out.iterations[0].best_position, 0);
    assert_eq!(out.state.examples[0].counterfactual, format!("not {}", out.state.examples[0].source));
}

#[test]
fn plateau_stops_and_pool_tracks_failures() {
    let eval = EvalSet::new(items(8), 6, 2).unwrap();
    // Items 0..4 always fail, so the score never changes much.
    let ev = |src: &str, _: &str| !matches!(src, "item 0" | "item 1" | "item 2" | "item 3" | "item 4");
    let out = optimize_prompt(
        &PromptState::default(),
        &eval,
        &Echo,
        &ev,
        &mut annotate,
        &OptimizerConfig::default(),
        &RewriteConfig::default(),
    )
    .unwrap();
    assert_eq!(out.stop, StopReason::Plateau);
    assert_eq!(out.iterations.len(), 2);
    for it in &out.iterations {
        for id in &it.pool_after {
            let n: usize = id[1..].parse().unwrap();
            assert!(n <= 4, "passing item {id} left in pool");
        }
    }
}

#[test]
fn pool_exhaustion_warns() {
    // Two items: after the first is annotated only one held-out item is
    // left, so no further step can run.
    let eval = EvalSet::new(items(2), 1, 1).unwrap();
    let cfg = OptimizerConfig {
        delta: 1.0,
        epsilon: 1e-9,
        seed: 4,
    };
    let out = optimize_prompt(
        &PromptState::default(),
        &eval,
        &Echo,
        &|_: &str, _: &str| false,
        &mut annotate,
        &cfg,
        &RewriteConfig::default(),
    )
    .unwrap();
    assert_eq!(out.iterations.len(), 1);
    assert_eq!(out.stop, StopReason::PoolExhausted);
    assert!(out.warning.is_some());
}

#[test]
fn evalset_composition_must_match() {
    assert!(EvalSet::new(items(3), 1, 1).is_err());
}

#[test]
fn bad_thresholds_rejected() {
    let eval = EvalSet::new(items(3), 2, 1).unwrap();
    let cfg = OptimizerConfig {
        delta: 0.0,
        ..OptimizerConfig::default()
    };
    assert!(matches!(
        optimize_prompt(
            &PromptState::default(),
            &eval,
            &Echo,
            &|_: &str, _: &str| true,
            &mut annotate,
            &cfg,
            &RewriteConfig::default()
        ),
        Err(PromptError::InvalidConfig(_))
    ));
}
