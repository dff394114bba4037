//! The pipeline stages. Each stage reads its inputs from files named in the
//! config and writes its outputs back to files, so stages can be re-run on
//! their own.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::time::Duration;

use cfaug_core::corpus::{compute_distribution, select_rewrite_sources, Review, ReviewSet, Vocabulary};
use cfaug_core::judge::{BowSentimentJudge, BowTrainConfig, LexiconLogisticJudge};
use cfaug_core::lm::TrigramLm;
use cfaug_core::metrics::{counterfactual_reconstruction_rouge, dif, sentiment_precision, summarize_mean, Polarity};
use cfaug_core::model::DisAeModel;
use cfaug_core::prompt::{
    optimize_prompt, rewrite_all, EvalSet, GenerationService, OptimizerConfig, PromptState, ReferenceEvaluator,
    RewriteConfig,
};
use cfaug_core::reproduce::{reproduce, ProductAudit, ReproWarning, ReproduceConfig};
use cfaug_core::train::{pair_samples, text_samples, train, TrainConfig, TrainEvent};
use clap::ValueEnum;
use log::{info, warn};
use serde::Serialize;

use crate::checkpoint;
use crate::config::PipelineConfig;
use crate::io;
use crate::runner::{RayonRunner, RayonSynthesizer};
use crate::service::{HttpService, MockService};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, ValueEnum)]
pub enum Stage {
    Stats,
    OptimizePrompt,
    Rewrite,
    Train,
    Reproduce,
    Evaluate,
}

impl Stage {
    pub const ALL: [Stage; 6] = [
        Stage::Stats,
        Stage::OptimizePrompt,
        Stage::Rewrite,
        Stage::Train,
        Stage::Reproduce,
        Stage::Evaluate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Stats => "stats",
            Stage::OptimizePrompt => "optimize-prompt",
            Stage::Rewrite => "rewrite",
            Stage::Train => "train",
            Stage::Reproduce => "reproduce",
            Stage::Evaluate => "evaluate",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    /// Bad input or a missing prerequisite; exit code 1.
    Validation,
    /// Failure while running; exit code 2.
    Runtime,
}

#[derive(Debug)]
pub struct StageError {
    pub stage: Stage,
    pub kind: ErrorKind,
    pub message: String,
}

impl fmt::Display for StageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.stage, self.message)
    }
}

impl std::error::Error for StageError {}

impl StageError {
    pub fn exit_code(&self) -> i32 {
        match self.kind {
            ErrorKind::Validation => 1,
            ErrorKind::Runtime => 2,
        }
    }
}

/// Which generation service the service-backed stages talk to.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ServiceChoice {
    Mock,
    Http,
}

pub struct Context {
    pub cfg: PipelineConfig,
    pub service: ServiceChoice,
}

type StageResult<T> = Result<T, StageError>;

struct Fail(Stage);

impl Fail {
    fn invalid(&self, m: impl fmt::Display) -> StageError {
        StageError {
            stage: self.0,
            kind: ErrorKind::Validation,
            message: m.to_string(),
        }
    }

    fn runtime(&self, m: impl fmt::Display) -> StageError {
        StageError {
            stage: self.0,
            kind: ErrorKind::Runtime,
            message: m.to_string(),
        }
    }

    /// Missing input files are prerequisites; anything else is a runtime
    /// failure.
    fn io(&self, e: io::IoError) -> StageError {
        match e {
            io::IoError::Missing(p) => self.invalid(format!("missing input {}", p.display())),
            io::IoError::Line { .. } | io::IoError::Invalid { .. } => self.invalid(e),
            io::IoError::Os { .. } => self.runtime(e),
        }
    }

    fn ckpt(&self, e: checkpoint::CheckpointError) -> StageError {
        match e {
            checkpoint::CheckpointError::Missing(p) => {
                self.invalid(format!("missing checkpoint {} (run the train stage first)", p.display()))
            }
            checkpoint::CheckpointError::Os { .. } => self.runtime(e),
            _ => self.invalid(e),
        }
    }
}

fn report_path(cfg: &PipelineConfig, name: &str) -> PathBuf {
    cfg.paths.reports.join(name)
}

fn rated(set: &ReviewSet) -> Vec<(&str, u8)> {
    set.reviews().iter().map(|r| (r.text.as_str(), r.rating)).collect()
}

impl Context {
    fn client(&self, f: &Fail) -> StageResult<Box<dyn GenerationService>> {
        match self.service {
            ServiceChoice::Mock => Ok(Box::new(MockService)),
            ServiceChoice::Http => {
                let p = &self.cfg.prompt;
                let endpoint = p.endpoint.as_deref().ok_or_else(|| {
                    f.invalid("no generation service: set prompt.endpoint, pass --service-endpoint, or use --mock-service")
                })?;
                let svc = HttpService::from_env(endpoint, p.concurrency, Duration::from_secs(p.timeout_secs))
                    .map_err(|e| f.invalid(e))?;
                Ok(Box::new(svc))
            }
        }
    }

    fn corpus(&self, f: &Fail) -> StageResult<ReviewSet> {
        io::load_reviews(&self.cfg.paths.corpus).map_err(|e| f.io(e))
    }

    fn rewrite_config(&self) -> RewriteConfig {
        RewriteConfig {
            model: self.cfg.prompt.model.clone(),
            max_attempts: self.cfg.prompt.max_attempts,
        }
    }

    /// The optimized prompt if one exists, else the seed prompt, else the
    /// bare instruction.
    fn current_prompt(&self, f: &Fail) -> StageResult<PromptState> {
        let paths = &self.cfg.paths;
        let mut state = if paths.prompt.exists() {
            io::load_prompt(&paths.prompt).map_err(|e| f.io(e))?
        } else {
            self.seed_prompt(f)?
        };
        state.temperature = self.cfg.prompt.temperature;
        Ok(state)
    }

    fn seed_prompt(&self, f: &Fail) -> StageResult<PromptState> {
        let mut state = match &self.cfg.paths.seed_prompt {
            Some(p) => io::load_prompt(p).map_err(|e| f.io(e))?,
            None => PromptState::default(),
        };
        state.temperature = self.cfg.prompt.temperature;
        if state.examples.len() != self.cfg.prompt.k && self.cfg.paths.seed_prompt.is_some() {
            warn!(
                "seed prompt has {} demonstrations, prompt.k is {}",
                state.examples.len(),
                self.cfg.prompt.k
            );
        }
        Ok(state)
    }

    pub fn run(&self, stage: Stage) -> StageResult<()> {
        info!("stage {stage}");
        match stage {
            Stage::Stats => self.stats(),
            Stage::OptimizePrompt => self.optimize(),
            Stage::Rewrite => self.rewrite(),
            Stage::Train => self.train(),
            Stage::Reproduce => self.reproduce(),
            Stage::Evaluate => self.evaluate(),
        }
    }

    /// Runs every stage from `from` onward, in order.
    pub fn pipeline(&self, from: Option<Stage>) -> StageResult<()> {
        let from = from.unwrap_or(Stage::Stats);
        for stage in Stage::ALL.into_iter().filter(|s| *s >= from) {
            self.run(stage)?;
        }
        Ok(())
    }

    fn stats(&self) -> StageResult<()> {
        let f = Fail(Stage::Stats);
        let set = self.corpus(&f)?;
        let stats = compute_distribution(&set);
        println!("reviews {}", stats.total);
        println!("positive_fraction {:.3}", stats.positive_fraction);
        println!("histogram {:?}", stats.histogram);
        io::write_json(&report_path(&self.cfg, "stats.json"), &stats).map_err(|e| f.io(e))
    }

    fn optimize(&self) -> StageResult<()> {
        let f = Fail(Stage::OptimizePrompt);
        let cfg = &self.cfg;
        let set = self.corpus(&f)?;
        let (m, n) = (cfg.prompt.m, cfg.prompt.n);
        let items: Vec<Review> = match &cfg.paths.evalset {
            Some(p) => io::load_reviews(p).map_err(|e| f.io(e))?.into_reviews(),
            None => select_rewrite_sources(&set).into_iter().take(m + n).collect(),
        };
        if items.len() != m + n {
            return Err(f.invalid(format!(
                "evaluation set needs m + n = {} items, found {}",
                m + n,
                items.len()
            )));
        }
        let evalset = EvalSet::new(items, m, n).map_err(|e| f.invalid(e))?;
        let annotations: BTreeMap<String, String> = match &cfg.paths.annotations {
            Some(p) => io::load_annotations(p)
                .map_err(|e| f.io(e))?
                .into_iter()
                .map(|a| (a.review_id, a.counterfactual))
                .collect(),
            None if self.service == ServiceChoice::Mock => BTreeMap::new(),
            None => return Err(f.invalid("paths.annotations is required unless --mock-service is set")),
        };
        let mock = self.service == ServiceChoice::Mock;
        let mut annotator = |r: &Review| -> Result<String, String> {
            match annotations.get(&r.review_id) {
                Some(a) => Ok(a.clone()),
                None if mock => Ok(MockService::flip(&r.text, &BTreeMap::new())),
                None => Err("not in the annotations file".into()),
            }
        };
        let judge = BowSentimentJudge::train(&rated(&set), &BowTrainConfig::default());
        let evaluator = ReferenceEvaluator {
            judge,
            max_edit: cfg.prompt.max_edit,
        };
        let client = self.client(&f)?;
        let opt = OptimizerConfig {
            delta: cfg.prompt.delta,
            epsilon: cfg.prompt.epsilon,
            seed: cfg.seed,
        };
        let out = optimize_prompt(
            &self.seed_prompt(&f)?,
            &evalset,
            client.as_ref(),
            &evaluator,
            &mut annotator,
            &opt,
            &self.rewrite_config(),
        )
        .map_err(|e| f.runtime(e))?;
        if let Some(w) = &out.warning {
            warn!("{w}");
        }
        info!(
            "prompt optimization stopped ({:?}) after {} iteration(s) with {} demonstrations",
            out.stop,
            out.iterations.len(),
            out.state.examples.len()
        );
        io::write_prompt(&cfg.paths.prompt, &out.state).map_err(|e| f.io(e))?;
        io::write_json(&report_path(cfg, "optimize.json"), &out).map_err(|e| f.io(e))
    }

    fn rewrite(&self) -> StageResult<()> {
        let f = Fail(Stage::Rewrite);
        let cfg = &self.cfg;
        let set = self.corpus(&f)?;
        let mut sources = select_rewrite_sources(&set);
        if let Some(cap) = cfg.corpus.max_rewrites {
            sources.truncate(cap);
        }
        if sources.is_empty() {
            return Err(f.invalid("corpus has no rating-5 reviews to rewrite"));
        }
        let state = self.current_prompt(&f)?;
        let client = self.client(&f)?;
        let results = rewrite_all(client.as_ref(), &state, &sources, &self.rewrite_config());
        let mut pairs = Vec::new();
        let mut failures = Vec::new();
        for (src, r) in sources.iter().zip(results) {
            match r {
                Ok(p) => pairs.push(p),
                Err(e) => {
                    warn!("rewrite of {} failed: {e}", src.review_id);
                    failures.push(RewriteFailure {
                        review_id: src.review_id.clone(),
                        error: e.to_string(),
                    });
                }
            }
        }
        if pairs.is_empty() {
            return Err(f.runtime(format!("all {} rewrites failed", sources.len())));
        }
        info!("wrote {} of {} pairs", pairs.len(), sources.len());
        io::write_pairs(&cfg.paths.pairs, &pairs).map_err(|e| f.io(e))?;
        let report = RewriteReport {
            requested: sources.len(),
            written: pairs.len(),
            failures,
        };
        io::write_json(&report_path(cfg, "rewrite.json"), &report).map_err(|e| f.io(e))
    }

    fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.cfg.seed,
            ..self.cfg.train.clone()
        }
    }

    fn train(&self) -> StageResult<()> {
        let f = Fail(Stage::Train);
        let cfg = &self.cfg;
        let set = self.corpus(&f)?;
        let pairs = io::load_pairs(&cfg.paths.pairs).map_err(|e| f.io(e))?;
        if pairs.is_empty() {
            return Err(f.invalid(format!("{} holds no pairs", cfg.paths.pairs.display())));
        }
        let texts = set
            .reviews()
            .iter()
            .map(|r| r.text.as_str())
            .chain(pairs.iter().flat_map(|p| [p.positive.text.as_str(), p.negative.text.as_str()]));
        let vocab = Vocabulary::build(texts, cfg.corpus.min_freq);
        let mut model = DisAeModel::new(cfg.model.clone(), vocab, cfg.seed).map_err(|e| f.invalid(e))?;
        let samples = pair_samples(&model, &pairs);
        info!(
            "training on {} pairs, vocabulary {}, {} parameters",
            samples.len(),
            model.vocab().len(),
            model.params().scalar_count()
        );
        let progress = report_path(cfg, "train_progress.jsonl");
        let log = fit(&mut model, &samples, &self.train_config(), cfg, &f)?;
        io::write_jsonl(&progress, &log).map_err(|e| f.io(e))?;
        checkpoint::save(&model, &cfg.paths.final_checkpoint()).map_err(|e| f.ckpt(e))
    }

    fn reproduce(&self) -> StageResult<()> {
        let f = Fail(Stage::Reproduce);
        let cfg = &self.cfg;
        let model = checkpoint::load(&cfg.paths.final_checkpoint()).map_err(|e| f.ckpt(e))?;
        let set = self.corpus(&f)?;
        let lm = TrigramLm::train(set.reviews().iter().map(|r| r.text.as_str()));
        let judge = BowSentimentJudge::train(&rated(&set), &BowTrainConfig::default());
        let mut products: Vec<String> = Vec::new();
        for p in set.product_ids() {
            if !products.iter().any(|q| q == p) {
                products.push(p.to_owned());
            }
        }
        let rcfg = ReproduceConfig {
            per_product_quota: cfg.reproduce.per_product_quota,
            max_parents: cfg.reproduce.max_parents,
            filter: cfg.filter,
            seed: cfg.seed,
        };
        let out = reproduce(
            &model,
            &set,
            &products,
            &rcfg,
            &lm,
            &judge,
            &RayonSynthesizer::new(cfg.workers),
        )
        .map_err(|e| f.runtime(e))?;
        for w in &out.warnings {
            warn!("{w}");
        }
        info!("kept {} reproduced pairs across {} products", out.pairs.len(), products.len());
        io::write_pairs(&cfg.paths.augmented, &out.pairs).map_err(|e| f.io(e))?;
        let mut total = cfaug_core::reproduce::FilterAudit::default();
        for a in &out.audits {
            total.add(&a.audit);
        }
        let report = ReproduceReport {
            total,
            products: out.audits,
            warnings: out.warnings,
        };
        io::write_json(&report_path(cfg, "reproduce_audit.json"), &report).map_err(|e| f.io(e))
    }

    fn evaluate(&self) -> StageResult<()> {
        let f = Fail(Stage::Evaluate);
        let cfg = &self.cfg;
        let model = checkpoint::load(&cfg.paths.final_checkpoint()).map_err(|e| f.ckpt(e))?;
        let eval_pairs_path = cfg.evaluate.pairs.as_ref().unwrap_or(&cfg.paths.pairs);
        let eval_pairs = io::load_pairs(eval_pairs_path).map_err(|e| f.io(e))?;
        let rouge = counterfactual_reconstruction_rouge(&model, &eval_pairs).map_err(|e| f.runtime(e))?;

        let set = self.corpus(&f)?;
        let augmented = io::load_pairs(&cfg.paths.augmented).map_err(|e| f.io(e))?;
        let groups = match &cfg.evaluate.groups {
            Some(p) => io::load_reviews(p).map_err(|e| f.io(e))?,
            None => set.clone(),
        };
        let (pos_groups, neg_groups) = polarity_groups(&groups);
        if pos_groups.is_empty() && neg_groups.is_empty() {
            return Err(f.invalid("no positive or negative review groups to summarize"));
        }
        let judge = LexiconLogisticJudge::train(&rated(&set), &BowTrainConfig::default(), cfg.evaluate.lexicon_margin);

        // Plain autoencoders serve as summarizers: one trained on the corpus
        // alone, one on the corpus plus the reproduced negatives.
        let base_texts: Vec<&str> = set.reviews().iter().map(|r| r.text.as_str()).collect();
        let mut aug_texts = base_texts.clone();
        aug_texts.extend(augmented.iter().map(|p| p.negative.text.as_str()));
        let vocab = Vocabulary::build(aug_texts.iter().copied(), cfg.corpus.min_freq);
        let mut tcfg = self.train_config();
        if let Some(e) = cfg.evaluate.summarizer_epochs {
            tcfg.epochs = e;
        }
        tcfg.checkpoint_every = 0;
        let summarizer = |texts: &[&str], path: PathBuf| -> StageResult<SummaryScores> {
            let mut m = DisAeModel::new(cfg.model.clone(), vocab.clone(), cfg.seed).map_err(|e| f.invalid(e))?;
            let samples = text_samples(&m, texts.iter().copied());
            fit(&mut m, &samples, &tcfg, cfg, &f)?;
            checkpoint::save(&m, &path).map_err(|e| f.ckpt(e))?;
            score_groups(&m, &pos_groups, &neg_groups, &judge).map_err(|e| f.runtime(e))
        };
        let base = summarizer(&base_texts, cfg.paths.base_checkpoint())?;
        let aug = summarizer(&aug_texts, cfg.paths.augmented_checkpoint())?;
        let pct = |x: f64| (x * 1e4).round() / 100.0;
        let block = |s: &SummaryScores| SummaryBlock {
            pos: RevSen {
                rev: pct(s.pos.0),
                sen: pct(s.pos.1),
            },
            neg: RevSen {
                rev: pct(s.neg.0),
                sen: pct(s.neg.1),
            },
        };
        let (b, a) = (block(&base), block(&aug));
        let report = EvaluationReport {
            reconstruction: RougeBlock {
                r1: pct(rouge.r1.f1),
                r2: pct(rouge.r2.f1),
                rl: pct(rouge.rl.f1),
                pairs: eval_pairs.len(),
            },
            dif: DifBlock {
                pos: round2(dif(b.pos.rev, b.pos.sen, a.pos.rev, a.pos.sen)),
                neg: round2(dif(b.neg.rev, b.neg.sen, a.neg.rev, a.neg.sen)),
            },
            base: b,
            augmented: a,
            groups: GroupCounts {
                pos: pos_groups.len(),
                neg: neg_groups.len(),
            },
        };
        info!(
            "RL {:.2}; Neg Rev {:.2} -> {:.2}; Neg Dif {:+.2}",
            report.reconstruction.rl, report.base.neg.rev, report.augmented.neg.rev, report.dif.neg
        );
        io::write_json(&report_path(cfg, "evaluation.json"), &report).map_err(|e| f.io(e))
    }
}

fn round2(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}

/// Trains with the worker pool, saving periodic checkpoints, and returns
/// the step log.
fn fit(
    model: &mut DisAeModel,
    samples: &[cfaug_core::train::Sample],
    tcfg: &TrainConfig,
    cfg: &PipelineConfig,
    f: &Fail,
) -> StageResult<Vec<cfaug_core::train::StepRecord>> {
    let runner = RayonRunner::new(cfg.workers);
    let every = tcfg.checkpoint_every;
    let dir = cfg.paths.checkpoints.clone();
    let mut observer = |ev: TrainEvent<'_>| -> Result<(), String> {
        match ev {
            TrainEvent::Step(r) => {
                if r.step % 50 == 0 {
                    info!("step {} total {:.4}", r.step, r.total);
                }
                Ok(())
            }
            TrainEvent::Checkpoint { step, model } if every > 0 && step % every == 0 => {
                checkpoint::save(model, &dir.join(format!("step-{step:06}.ckpt"))).map_err(|e| e.to_string())
            }
            TrainEvent::Checkpoint { .. } => Ok(()),
        }
    };
    let history = train(model, samples, tcfg, &runner, &mut observer).map_err(|e| f.runtime(e))?;
    Ok(history.steps)
}

type Groups = Vec<Vec<String>>;

/// Per product, the negative reviews form one Neg group and the positive
/// reviews one Pos group.
fn polarity_groups(set: &ReviewSet) -> (Groups, Groups) {
    let mut pos: BTreeMap<&str, Vec<String>> = BTreeMap::new();
    let mut neg: BTreeMap<&str, Vec<String>> = BTreeMap::new();
    for r in set.reviews() {
        if r.is_negative() {
            neg.entry(&r.product_id).or_default().push(r.text.clone());
        } else if r.is_positive() {
            pos.entry(&r.product_id).or_default().push(r.text.clone());
        }
    }
    (pos.into_values().collect(), neg.into_values().collect())
}

struct SummaryScores {
    pos: (f64, f64),
    neg: (f64, f64),
}

fn score_groups(
    model: &DisAeModel,
    pos: &Groups,
    neg: &Groups,
    judge: &LexiconLogisticJudge,
) -> Result<SummaryScores, cfaug_core::model::ModelError> {
    let summarize = |groups: &Groups| -> Result<Vec<String>, _> {
        groups.iter().map(|g| summarize_mean(model, g)).collect()
    };
    let p = sentiment_precision(&summarize(pos)?, judge, Polarity::Positive);
    let n = sentiment_precision(&summarize(neg)?, judge, Polarity::Negative);
    Ok(SummaryScores {
        pos: (p.review_level, p.sentence_level),
        neg: (n.review_level, n.sentence_level),
    })
}

#[derive(Serialize)]
struct RewriteFailure {
    review_id: String,
    error: String,
}

#[derive(Serialize)]
struct RewriteReport {
    requested: usize,
    written: usize,
    failures: Vec<RewriteFailure>,
}

#[derive(Serialize)]
struct ReproduceReport {
    total: cfaug_core::reproduce::FilterAudit,
    products: Vec<ProductAudit>,
    warnings: Vec<ReproWarning>,
}

#[derive(Debug, Serialize)]
pub struct RougeBlock {
    #[serde(rename = "R1")]
    pub r1: f64,
    #[serde(rename = "R2")]
    pub r2: f64,
    #[serde(rename = "RL")]
    pub rl: f64,
    pub pairs: usize,
}

#[derive(Debug, Serialize)]
pub struct RevSen {
    #[serde(rename = "Rev")]
    pub rev: f64,
    #[serde(rename = "Sen")]
    pub sen: f64,
}

#[derive(Debug, Serialize)]
pub struct SummaryBlock {
    #[serde(rename = "Pos")]
    pub pos: RevSen,
    #[serde(rename = "Neg")]
    pub neg: RevSen,
}

#[derive(Debug, Serialize)]
pub struct DifBlock {
    #[serde(rename = "Pos")]
    pub pos: f64,
    #[serde(rename = "Neg")]
    pub neg: f64,
}

#[derive(Debug, Serialize)]
pub struct GroupCounts {
    #[serde(rename = "Pos")]
    pub pos: usize,
    #[serde(rename = "Neg")]
    pub neg: usize,
}

/// Percentages throughout.
#[derive(Debug, Serialize)]
pub struct EvaluationReport {
    pub reconstruction: RougeBlock,
    pub base: SummaryBlock,
    pub augmented: SummaryBlock,
    #[serde(rename = "Dif")]
    pub dif: DifBlock,
    pub groups: GroupCounts,
}

/// Used by the CLI to check a resume point before running anything.
pub fn resume_prerequisites(cfg: &PipelineConfig, from: Stage) -> Result<(), StageError> {
    let need = |stage: Stage, p: &Path, what: &str| {
        if p.exists() {
            Ok(())
        } else {
            Err(StageError {
                stage,
                kind: ErrorKind::Validation,
                message: format!("cannot resume: missing {what} {}", p.display()),
            })
        }
    };
    if from > Stage::Rewrite {
        need(from, &cfg.paths.pairs, "pair file")?;
    }
    if from > Stage::Train {
        need(from, &cfg.paths.final_checkpoint(), "checkpoint")?;
    }
    if from > Stage::Reproduce {
        need(from, &cfg.paths.augmented, "augmented pair file")?;
    }
    Ok(())
}
