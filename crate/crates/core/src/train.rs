//! Adam with linear learning-rate decay and linearly annealed loss weights.

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Grads};
use crate::corpus::TokenId;
use crate::math;
use crate::model::{DisAeModel, LossBreakdown, LossWeights, ModelError, PairTokens};

/// Gradients are accumulated over fixed-size chunks of a batch and the chunk
/// sums added in order, so results do not depend on how chunks are scheduled.
pub const GRAD_CHUNK: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Explicit ramp length; `None` means `anneal_fraction` of all steps.
    pub anneal_steps: Option<usize>,
    pub anneal_fraction: f64,
    pub alpha_max: f64,
    pub beta_max: f64,
    pub gamma_max: f64,
    pub grad_clip: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Emit a checkpoint event every this many steps (0 disables).
    pub checkpoint_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 5e-4,
            batch_size: 32,
            epochs: 20,
            anneal_steps: None,
            anneal_fraction: 0.2,
            alpha_max: 5.0,
            beta_max: 1.0,
            gamma_max: 1.0,
            grad_clip: 5.0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            checkpoint_every: 0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.into()));
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1");
        }
        if self.alpha_max < 0.0 || self.beta_max < 0.0 || self.gamma_max < 0.0 {
            return bad("weight caps must be >= 0");
        }
        if self.anneal_steps == Some(0) {
            return bad("anneal_steps must be >= 1");
        }
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate must be > 0");
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self, n: usize) -> usize {
        n.div_ceil(self.batch_size)
    }

    pub fn total_steps(&self, n: usize) -> usize {
        self.steps_per_epoch(n) * self.epochs
    }

    pub fn resolved_anneal_steps(&self, total_steps: usize) -> usize {
        self.anneal_steps.unwrap_or_else(|| {
            (libm::round(self.anneal_fraction * total_steps as f64) as usize).max(1)
        })
    }

    pub fn weights_at(&self, step: usize, anneal_steps: usize) -> LossWeights {
        LossWeights {
            alpha: anneal_weight(step, self.alpha_max, anneal_steps),
            beta: anneal_weight(step, self.beta_max, anneal_steps),
            gamma: anneal_weight(step, self.gamma_max, anneal_steps),
        }
    }

    /// Linear decay from the initial rate to zero at `total_steps`.
    pub fn lr_at(&self, step: usize, total_steps: usize) -> f64 {
        if total_steps == 0 {
            return self.learning_rate;
        }
        self.learning_rate * (1.0 - step as f64 / total_steps as f64).max(0.0)
    }
}

/// `min(step / anneal_steps, 1) * cap`.
pub fn anneal_weight(step: usize, cap: f64, anneal_steps: usize) -> f64 {
    let ramp = (step as f64 / anneal_steps.max(1) as f64).min(1.0);
    ramp * cap
}

#[derive(Debug, Clone, PartialEq)]
pub enum TrainError {
    InvalidConfig(String),
    Model(ModelError),
    NonFinite { step: usize, term: &'static str },
    Observer(String),
}

impl fmt::Display for TrainError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::InvalidConfig(m) => write!(f, "invalid training config: {m}"),
            Self::Model(e) => write!(f, "{e}"),
            Self::NonFinite { step, term } => {
                write!(f, "non-finite loss at step {step} in term {term}")
            }
            Self::Observer(m) => write!(f, "training observer failed: {m}"),
        }
    }
}

impl core::error::Error for TrainError {}

impl From<ModelError> for TrainError {
    fn from(e: ModelError) -> Self {
        Self::Model(e)
    }
}

/// One optimizer step as emitted to progress logs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    #[serde(rename = "L_rec")]
    pub l_rec: f64,
    #[serde(rename = "L_e")]
    pub l_e: f64,
    #[serde(rename = "L_n")]
    pub l_n: f64,
    #[serde(rename = "L_r")]
    pub l_r: f64,
    #[serde(rename = "L_dis")]
    pub l_dis: f64,
    #[serde(rename = "L_cf")]
    pub l_cf: f64,
    pub total: f64,
}

impl StepRecord {
    fn new(step: usize, lr: f64, w: LossWeights, b: &LossBreakdown) -> Self {
        Self {
            step,
            lr,
            alpha: w.alpha,
            beta: w.beta,
            gamma: w.gamma,
            l_rec: b.rec,
            l_e: b.emotion,
            l_n: b.neutrality,
            l_r: b.label,
            l_dis: b.distance,
            l_cf: b.counterfactual,
            total: b.total,
        }
    }
}

pub enum TrainEvent<'a> {
    Step(&'a StepRecord),
    Checkpoint { step: usize, model: &'a DisAeModel },
}

/// One training example: a counterfactual pair, or a single text for
/// reconstruction-only (plain autoencoder) training.
#[derive(Debug, Clone, PartialEq)]
pub enum Sample {
    Pair(PairTokens),
    Text(Vec<TokenId>),
}

impl DisAeModel {
    /// Accumulates `scale * d(loss)/d(params)` for one sample.
    pub fn sample_gradients(
        &self,
        sample: &Sample,
        w: LossWeights,
        scale: f64,
        grads: &mut Grads,
    ) -> Result<LossBreakdown, ModelError> {
        match sample {
            Sample::Pair(p) => self.accumulate_gradients(p, w, scale, grads),
            Sample::Text(ids) => {
                let mut g = Graph::new(self.params());
                let f = self.factor_vars(&mut g, ids)?;
                let z = g.concat(&[f.z_tilde_e, f.enc.z_c]);
                let nll = self.nll_vars(&mut g, z, ids)?;
                let v = g.scalar(nll);
                g.backward_seeded(nll, alloc::vec![scale], grads);
                Ok(LossBreakdown {
                    rec: v,
                    total: v,
                    ..LossBreakdown::default()
                })
            }
        }
    }
}

/// Summed gradients and losses of one chunk, each sample scaled by `scale`.
pub fn chunk_gradients(
    model: &DisAeModel,
    chunk: &[&Sample],
    w: LossWeights,
    scale: f64,
) -> Result<(Grads, LossBreakdown), ModelError> {
    let mut grads = Grads::zeros(model.params());
    let mut loss = LossBreakdown::default();
    for s in chunk {
        let b = model.sample_gradients(s, w, scale, &mut grads)?;
        loss.add_assign(&b.scaled(scale));
    }
    Ok((grads, loss))
}

/// Computes batch-mean gradients. Implementations must split the batch with
/// [`GRAD_CHUNK`] and reduce chunk results in order.
pub trait GradientRunner {
    fn batch_gradients(
        &self,
        model: &DisAeModel,
        batch: &[&Sample],
        w: LossWeights,
    ) -> Result<(Grads, LossBreakdown), ModelError>;
}

/// Single-threaded runner.
#[derive(Debug, Clone, Copy, Default)]
pub struct SequentialRunner;

impl GradientRunner for SequentialRunner {
    fn batch_gradients(
        &self,
        model: &DisAeModel,
        batch: &[&Sample],
        w: LossWeights,
    ) -> Result<(Grads, LossBreakdown), ModelError> {
        let scale = 1.0 / batch.len() as f64;
        let parts = batch
            .chunks(GRAD_CHUNK)
            .map(|c| chunk_gradients(model, c, w, scale))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(reduce_chunks(model, parts))
    }
}

pub fn reduce_chunks(model: &DisAeModel, parts: Vec<(Grads, LossBreakdown)>) -> (Grads, LossBreakdown) {
    let mut grads = Grads::zeros(model.params());
    let mut loss = LossBreakdown::default();
    for (g, l) in &parts {
        grads.add_assign(g);
        loss.add_assign(l);
    }
    (grads, loss)
}

#[derive(Debug, Clone)]
pub struct Adam {
    m: Grads,
    v: Grads,
    t: u32,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl Adam {
    pub fn new(model: &DisAeModel, cfg: &TrainConfig) -> Self {
        Self {
            m: Grads::zeros(model.params()),
            v: Grads::zeros(model.params()),
            t: 0,
            beta1: cfg.adam_beta1,
            beta2: cfg.adam_beta2,
            eps: cfg.adam_eps,
        }
    }

    pub fn step(&mut self, model: &mut DisAeModel, grads: &Grads, lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - libm::pow(self.beta1, f64::from(self.t));
        let bc2 = 1.0 - libm::pow(self.beta2, f64::from(self.t));
        for (i, t) in model.params_mut().tensors_mut().iter_mut().enumerate() {
            let (m, v, g) = (&mut self.m.tensors[i], &mut self.v.tensors[i], &grads.tensors[i]);
            for k in 0..t.data.len() {
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g[k];
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g[k] * g[k];
                let mh = m[k] / bc1;
                let vh = v[k] / bc2;
                t.data[k] -= lr * mh / (math::sqrt(vh) + self.eps);
            }
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainHistory {
    pub steps: Vec<StepRecord>,
}

impl TrainHistory {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Mean total loss over `[from, to)`.
    pub fn mean_total(&self, from: usize, to: usize) -> f64 {
        let s = &self.steps[from..to];
        s.iter().map(|r| r.total).sum::<f64>() / s.len() as f64
    }
}

/// Optimizes the model on `samples`; deterministic given `cfg.seed`.
pub fn train(
    model: &mut DisAeModel,
    samples: &[Sample],
    cfg: &TrainConfig,
    runner: &dyn GradientRunner,
    observer: &mut dyn FnMut(TrainEvent<'_>) -> Result<(), String>,
) -> Result<TrainHistory, TrainError> {
    cfg.validate()?;
    let mut history = TrainHistory::default();
    if samples.is_empty() || cfg.epochs == 0 {
        return Ok(history);
    }
    let total_steps = cfg.total_steps(samples.len());
    let anneal_steps = cfg.resolved_anneal_steps(total_steps);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(model, cfg);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut step = 0usize;

    for _epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for idx in order.chunks(cfg.batch_size) {
            let batch: Vec<&Sample> = idx.iter().map(|&i| &samples[i]).collect();
            let w = cfg.weights_at(step, anneal_steps);
            let lr = cfg.lr_at(step, total_steps);
            let (mut grads, loss) = runner.batch_gradients(model, &batch, w)?;
            if let Some(term) = loss.non_finite_term() {
                return Err(TrainError::NonFinite { step, term });
            }
            let norm = grads.global_norm();
            if !norm.is_finite() {
                return Err(TrainError::NonFinite {
                    step,
                    term: "gradient",
                });
            }
            if cfg.grad_clip > 0.0 && norm > cfg.grad_clip {
                grads.scale(cfg.grad_clip / norm);
            }
            adam.step(model, &grads, lr);

            let record = StepRecord::new(step, lr, w, &loss);
            observer(TrainEvent::Step(&record)).map_err(TrainError::Observer)?;
            history.steps.push(record);
            step += 1;
            if cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 {
                observer(TrainEvent::Checkpoint { step, model }).map_err(TrainError::Observer)?;
            }
        }
    }
    observer(TrainEvent::Checkpoint { step, model }).map_err(TrainError::Observer)?;
    Ok(history)
}

/// Tokenizes pairs under the model vocabulary.
pub fn pair_samples<'a>(
    model: &DisAeModel,
    pairs: impl IntoIterator<Item = &'a crate::corpus::CounterfactualPair>,
) -> Vec<Sample> {
    pairs
        .into_iter()
        .map(|p| Sample::Pair(model.pair_tokens(&p.positive.text, &p.negative.text)))
        .collect()
}

pub fn text_samples<'a>(model: &DisAeModel, texts: impl IntoIterator<Item = &'a str>) -> Vec<Sample> {
    texts
        .into_iter()
        .map(|t| Sample::Text(model.tokenize(t)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Vocabulary;
    use crate::model::DisAeConfig;
    use alloc::vec;

    #[test]
    fn anneal_ramp() {
        assert_eq!(anneal_weight(0, 5.0, 100), 0.0);
        assert_eq!(anneal_weight(50, 5.0, 100), 2.5);
        assert_eq!(anneal_weight(100, 5.0, 100), 5.0);
        assert_eq!(anneal_weight(1000, 1.0, 100), 1.0);
        let mut prev = 0.0;
        for s in 0..300 {
            let w = anneal_weight(s, 1.0, 77);
            assert!(w >= prev && w <= 1.0);
            prev = w;
        }
    }

    #[test]
    fn lr_decays_linearly() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.lr_at(0, 100), 5e-4);
        assert!((cfg.lr_at(50, 100) - 2.5e-4).abs() < 1e-15);
        assert!(cfg.lr_at(99, 100) > 0.0);
    }

    fn setup() -> (DisAeModel, Vec<Sample>) {
        let vocab = Vocabulary::build(["good bad food staff was the"], 1);
        let cfg = DisAeConfig {
            embed_dim: 6,
            encoder_hidden: 6,
            attention_dim: 4,
            sentiment_dim: 3,
            content_dim: 5,
            decoder_hidden: 8,
            ..DisAeConfig::default()
        };
        let model = DisAeModel::new(cfg, vocab, 3).unwrap();
        let samples = vec![
            Sample::Pair(model.pair_tokens("the food was good", "the food was bad")),
            Sample::Pair(model.pair_tokens("the staff was good", "the staff was bad")),
            Sample::Text(model.tokenize("good food")),
        ];
        (model, samples)
    }

    #[test]
    fn zero_epochs_is_identity() {
        let (mut model, samples) = setup();
        let before = model.clone();
        let cfg = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        let h = train(&mut model, &samples, &cfg, &SequentialRunner, &mut |_| Ok(())).unwrap();
        assert!(h.is_empty());
        assert_eq!(model, before);
    }

    #[test]
    fn seeded_runs_are_identical_and_events_fire() {
        let cfg = TrainConfig {
            epochs: 4,
            batch_size: 2,
            learning_rate: 1e-2,
            checkpoint_every: 3,
            ..TrainConfig::default()
        };
        let (mut a, samples) = setup();
        let mut b = a.clone();
        let mut checkpoints = 0;
        let ha = train(&mut a, &samples, &cfg, &SequentialRunner, &mut |e| {
            if let TrainEvent::Checkpoint { .. } = e {
                checkpoints += 1;
            }
            Ok(())
        })
        .unwrap();
        let hb = train(&mut b, &samples, &cfg, &SequentialRunner, &mut |_| Ok(())).unwrap();
        assert_eq!(ha, hb);
        assert_eq!(a, b);
        assert_eq!(ha.len(), 8);
        // every 3 steps plus the final one
        assert_eq!(checkpoints, 3);
        assert_eq!(ha.steps[0].alpha, 0.0);
    }

    #[test]
    fn zero_caps_train_only_reconstruction() {
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 3,
            alpha_max: 0.0,
            beta_max: 0.0,
            gamma_max: 0.0,
            ..TrainConfig::default()
        };
        let (mut model, samples) = setup();
        let h = train(&mut model, &samples, &cfg, &SequentialRunner, &mut |_| Ok(())).unwrap();
        for r in &h.steps {
            assert_eq!(r.total, r.l_rec);
        }
        // Pair gradients at zero weights equal the two reconstruction gradients.
        let Sample::Pair(p) = &samples[0] else { unreachable!() };
        let mut pair_grads = Grads::zeros(model.params());
        model
            .sample_gradients(&samples[0], LossWeights::ZERO, 1.0, &mut pair_grads)
            .unwrap();
        let mut text_grads = Grads::zeros(model.params());
        for ids in [&p.positive, &p.negative] {
            model
                .sample_gradients(&Sample::Text(ids.clone()), LossWeights::ZERO, 1.0, &mut text_grads)
                .unwrap();
        }
        for (a, b) in pair_grads.tensors.iter().zip(&text_grads.tensors) {
            for (x, y) in a.iter().zip(b) {
                assert!((x - y).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn observer_errors_abort() {
        let (mut model, samples) = setup();
        let err = train(
            &mut model,
            &samples,
            &TrainConfig::default(),
            &SequentialRunner,
            &mut |_| Err("disk full".into()),
        )
        .unwrap_err();
        assert_eq!(err, TrainError::Observer("disk full".into()));
    }

    #[test]
    fn non_finite_loss_names_term() {
        let (mut model, samples) = setup();
        let id = model.params().id_of("dec.out.b").unwrap();
        model.params_mut().get_mut(id).data[0] = f64::NAN;
        let err = train(&mut model, &samples, &TrainConfig::default(), &SequentialRunner, &mut |_| Ok(()))
            .unwrap_err();
        assert!(matches!(err, TrainError::NonFinite { step: 0, term: "L_rec" }));
    }
}
