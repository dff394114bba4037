//! The disentangled autoencoder.
//!
//! A BiLSTM encoder produces token states; two additive attention-pooling
//! heads read a sentiment latent `z_e` and a content latent `z_c` from them.
//! A single classifier `C` scores `z_e`, the (adapted) `z_c` and every row of
//! a learnable label-embedding table. The sentiment latent that reaches the
//! decoder is the classifier-weighted mixture of label rows, concatenated
//! with `z_c`; an LSTM decoder conditioned on that vector (initial state and
//! every input step) reconstructs the text.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Grads, ParamId, ParamStore, Tensor, Var};
use crate::corpus::{TokenId, Vocabulary, BOS, EOS};
use crate::math;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DisAeConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub encoder_hidden: usize,
    pub attention_dim: usize,
    pub sentiment_dim: usize,
    pub content_dim: usize,
    pub decoder_hidden: usize,
    pub num_classes: usize,
    pub max_encode_len: usize,
    pub max_decode_len: usize,
    pub beam_width: usize,
    /// Floor applied to probabilities inside cross-entropy and KL terms.
    pub prob_floor: f64,
}

impl Default for DisAeConfig {
    fn default() -> Self {
        Self {
            vocab_size: 4,
            embed_dim: 256,
            encoder_hidden: 512,
            attention_dim: 128,
            sentiment_dim: 64,
            content_dim: 256,
            decoder_hidden: 512,
            num_classes: 5,
            max_encode_len: crate::corpus::DEFAULT_MAX_ENCODE_LEN,
            max_decode_len: 70,
            beam_width: 4,
            prob_floor: 1e-8,
        }
    }
}

impl DisAeConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let dims = [
            ("vocab_size", self.vocab_size),
            ("embed_dim", self.embed_dim),
            ("encoder_hidden", self.encoder_hidden),
            ("attention_dim", self.attention_dim),
            ("sentiment_dim", self.sentiment_dim),
            ("content_dim", self.content_dim),
            ("decoder_hidden", self.decoder_hidden),
            ("max_encode_len", self.max_encode_len),
            ("max_decode_len", self.max_decode_len),
            ("beam_width", self.beam_width),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(ModelError::InvalidConfig(format!("{name} must be >= 1")));
            }
        }
        if self.num_classes < 2 {
            return Err(ModelError::InvalidConfig("num_classes must be >= 2".into()));
        }
        if !(self.prob_floor > 0.0 && self.prob_floor < 1.0) {
            return Err(ModelError::InvalidConfig("prob_floor must lie in (0, 1)".into()));
        }
        Ok(())
    }

    pub fn latent_dim(&self) -> usize {
        self.sentiment_dim + self.content_dim
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ModelError {
    InvalidConfig(String),
    EmptyInput,
    InputTooLong { len: usize, max: usize },
    GoldTooLong { len: usize, max: usize },
    MalformedGold,
    DimensionMismatch { expected: usize, got: usize },
    ZeroNormLatent(&'static str),
    ParameterMismatch(String),
}

impl fmt::Display for ModelError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::InvalidConfig(m) => write!(f, "invalid model config: {m}"),
            Self::EmptyInput => write!(f, "cannot encode an empty token sequence"),
            Self::InputTooLong { len, max } => {
                write!(f, "input of {len} tokens exceeds encoder limit {max}")
            }
            Self::GoldTooLong { len, max } => {
                write!(f, "target of {len} tokens exceeds decoder limit {max}")
            }
            Self::MalformedGold => write!(f, "target must start with BOS and end with EOS"),
            Self::DimensionMismatch { expected, got } => {
                write!(f, "expected a vector of dim {expected}, got {got}")
            }
            Self::ZeroNormLatent(which) => {
                write!(f, "latent {which} has zero norm; cosine similarity undefined")
            }
            Self::ParameterMismatch(m) => write!(f, "parameter mismatch: {m}"),
        }
    }
}

impl core::error::Error for ModelError {}

/// Probabilities over the `M` sentiment classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SentimentDistribution(pub Vec<f64>);

impl SentimentDistribution {
    pub fn uniform(m: usize) -> Self {
        Self(vec![1.0 / m as f64; m])
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &p) in self.0.iter().enumerate() {
            if p > self.0[best] {
                best = i;
            }
        }
        best
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatentFactors {
    pub z_e: Vec<f64>,
    pub z_c: Vec<f64>,
    pub z_tilde_e: Vec<f64>,
    pub y_hat: SentimentDistribution,
}

impl LatentFactors {
    /// The decoder input `[z~_e ; z_c]`.
    pub fn joint(&self) -> Vec<f64> {
        let mut z = self.z_tilde_e.clone();
        z.extend_from_slice(&self.z_c);
        z
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderOutput {
    pub token_states: Vec<Vec<f64>>,
    /// Mean-pooled token states; diagnostic only.
    pub primitive_rep: Vec<f64>,
    pub sentiment_attention: Vec<f64>,
    pub content_attention: Vec<f64>,
    pub factors: LatentFactors,
}

/// Weights of the auxiliary terms in the total objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl LossWeights {
    pub const ZERO: Self = Self {
        alpha: 0.0,
        beta: 0.0,
        gamma: 0.0,
    };
}

/// Per-term values of the objective for one pair (or a batch mean).
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub rec: f64,
    pub emotion: f64,
    pub neutrality: f64,
    pub label: f64,
    pub distance: f64,
    pub counterfactual: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn add_assign(&mut self, o: &LossBreakdown) {
        self.rec += o.rec;
        self.emotion += o.emotion;
        self.neutrality += o.neutrality;
        self.label += o.label;
        self.distance += o.distance;
        self.counterfactual += o.counterfactual;
        self.total += o.total;
    }

    pub fn scaled(mut self, f: f64) -> Self {
        self.rec *= f;
        self.emotion *= f;
        self.neutrality *= f;
        self.label *= f;
        self.distance *= f;
        self.counterfactual *= f;
        self.total *= f;
        self
    }

    /// Name of the first non-finite term, if any.
    pub fn non_finite_term(&self) -> Option<&'static str> {
        [
            ("L_rec", self.rec),
            ("L_e", self.emotion),
            ("L_n", self.neutrality),
            ("L_r", self.label),
            ("L_dis", self.distance),
            ("L_cf", self.counterfactual),
            ("total", self.total),
        ]
        .into_iter()
        .find(|(_, v)| !v.is_finite())
        .map(|(n, _)| n)
    }
}

/// A tokenized counterfactual pair (`[BOS .. EOS]` on both sides).
#[derive(Debug, Clone, PartialEq)]
pub struct PairTokens {
    pub positive: Vec<TokenId>,
    pub negative: Vec<TokenId>,
}

/// Class index of a 1-5 rating among `m` classes (rating `r` maps to `r - 1` when `m = 5`).
pub fn rating_class(rating: u8, m: usize) -> usize {
    let r = f64::from(rating.clamp(1, 5)) - 1.0;
    libm::round(r * (m as f64 - 1.0) / 4.0) as usize
}

/// `sum_i y_hat[i] * table.row(i)`.
pub fn soft_replace(y_hat: &SentimentDistribution, table: &Tensor) -> Vec<f64> {
    let mut out = vec![0.0; table.cols];
    for (i, &p) in y_hat.0.iter().enumerate() {
        for (o, x) in out.iter_mut().zip(table.row(i)) {
            *o += p * x;
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Attention {
    w: ParamId,
    b: ParamId,
    v: ParamId,
}

#[derive(Debug, Clone, PartialEq)]
struct Layout {
    embedding: ParamId,
    enc_fwd_w: ParamId,
    enc_fwd_b: ParamId,
    enc_bwd_w: ParamId,
    enc_bwd_b: ParamId,
    attn_sent: Attention,
    attn_cont: Attention,
    proj_sent_w: ParamId,
    proj_sent_b: ParamId,
    proj_cont_w: ParamId,
    proj_cont_b: ParamId,
    adapter: Option<(ParamId, ParamId)>,
    clf_w: ParamId,
    clf_b: ParamId,
    labels: ParamId,
    dec_init_w: ParamId,
    dec_init_b: ParamId,
    dec_w: ParamId,
    dec_b: ParamId,
    out_w: ParamId,
    out_b: ParamId,
}

/// Parameter shapes in registration order.
fn parameter_shapes(c: &DisAeConfig) -> Vec<(String, usize, usize)> {
    let (e, h, a) = (c.embed_dim, c.encoder_hidden, c.attention_dim);
    let (de, dc, hd, m, v) = (
        c.sentiment_dim,
        c.content_dim,
        c.decoder_hidden,
        c.num_classes,
        c.vocab_size,
    );
    let mut shapes = vec![
        ("embedding".into(), v, e),
        ("enc.fwd.w".into(), 4 * h, e + h),
        ("enc.fwd.b".into(), 1, 4 * h),
        ("enc.bwd.w".into(), 4 * h, e + h),
        ("enc.bwd.b".into(), 1, 4 * h),
    ];
    for head in ["sent", "cont"] {
        shapes.push((format!("attn.{head}.w"), a, 2 * h));
        shapes.push((format!("attn.{head}.b"), 1, a));
        shapes.push((format!("attn.{head}.v"), 1, a));
    }
    shapes.push(("proj.sent.w".into(), de, 2 * h));
    shapes.push(("proj.sent.b".into(), 1, de));
    shapes.push(("proj.cont.w".into(), dc, 2 * h));
    shapes.push(("proj.cont.b".into(), 1, dc));
    if dc != de {
        shapes.push(("adapter.w".into(), de, dc));
        shapes.push(("adapter.b".into(), 1, de));
    }
    shapes.push(("clf.w".into(), m, de));
    shapes.push(("clf.b".into(), 1, m));
    shapes.push(("labels".into(), m, de));
    shapes.push(("dec.init.w".into(), hd, de + dc));
    shapes.push(("dec.init.b".into(), 1, hd));
    shapes.push(("dec.lstm.w".into(), 4 * hd, e + de + dc + hd));
    shapes.push(("dec.lstm.b".into(), 1, 4 * hd));
    shapes.push(("dec.out.w".into(), v, hd));
    shapes.push(("dec.out.b".into(), 1, v));
    shapes
}

impl Layout {
    fn resolve(store: &ParamStore, c: &DisAeConfig) -> Result<Self, ModelError> {
        let shapes = parameter_shapes(c);
        if store.len() != shapes.len() {
            return Err(ModelError::ParameterMismatch(format!(
                "expected {} tensors, found {}",
                shapes.len(),
                store.len()
            )));
        }
        for (name, rows, cols) in &shapes {
            let id = store
                .id_of(name)
                .ok_or_else(|| ModelError::ParameterMismatch(format!("missing {name}")))?;
            let t = store.get(id);
            if t.rows != *rows || t.cols != *cols || t.data.len() != rows * cols {
                return Err(ModelError::ParameterMismatch(format!(
                    "{name}: expected {rows}x{cols}, found {}x{}",
                    t.rows, t.cols
                )));
            }
        }
        let id = |n: &str| store.id_of(n).expect("checked above");
        let attn = |h: &str| Attention {
            w: id(&format!("attn.{h}.w")),
            b: id(&format!("attn.{h}.b")),
            v: id(&format!("attn.{h}.v")),
        };
        Ok(Self {
            embedding: id("embedding"),
            enc_fwd_w: id("enc.fwd.w"),
            enc_fwd_b: id("enc.fwd.b"),
            enc_bwd_w: id("enc.bwd.w"),
            enc_bwd_b: id("enc.bwd.b"),
            attn_sent: attn("sent"),
            attn_cont: attn("cont"),
            proj_sent_w: id("proj.sent.w"),
            proj_sent_b: id("proj.sent.b"),
            proj_cont_w: id("proj.cont.w"),
            proj_cont_b: id("proj.cont.b"),
            adapter: store
                .id_of("adapter.w")
                .map(|w| (w, id("adapter.b"))),
            clf_w: id("clf.w"),
            clf_b: id("clf.b"),
            labels: id("labels"),
            dec_init_w: id("dec.init.w"),
            dec_init_b: id("dec.init.b"),
            dec_w: id("dec.lstm.w"),
            dec_b: id("dec.lstm.b"),
            out_w: id("dec.out.w"),
            out_b: id("dec.out.b"),
        })
    }
}

/// Graph handles for one encoded text.
#[derive(Debug, Clone)]
pub struct EncodedVars {
    pub states: Vec<Var>,
    pub h: Var,
    pub attn_sent: Var,
    pub attn_cont: Var,
    pub z_e: Var,
    pub z_c: Var,
}

/// Graph handles for one text's latent factors.
#[derive(Debug, Clone)]
pub struct FactorVars {
    pub enc: EncodedVars,
    pub logits_e: Var,
    pub probs_e: Var,
    pub z_tilde_e: Var,
    pub logits_c: Var,
    pub probs_c: Var,
}

/// Per-term graph handles of the pair objective.
#[derive(Debug, Clone, Copy)]
pub struct PairLossVars {
    pub rec: Var,
    pub emotion: Var,
    pub neutrality: Var,
    pub label: Var,
    pub distance: Var,
    pub counterfactual: Var,
    pub total: Var,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DisAeModel {
    config: DisAeConfig,
    vocab: Vocabulary,
    params: ParamStore,
    layout: Layout,
}

impl DisAeModel {
    /// Fresh model with seeded uniform initialization (LSTM forget-gate bias 1).
    pub fn new(mut config: DisAeConfig, vocab: Vocabulary, seed: u64) -> Result<Self, ModelError> {
        config.vocab_size = vocab.len();
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        for (name, rows, cols) in parameter_shapes(&config) {
            let mut t = Tensor::zeros(rows, cols);
            let is_bias = name.ends_with(".b");
            if !is_bias {
                let bound = if name == "embedding" || name == "labels" {
                    0.5
                } else {
                    1.0 / math::sqrt(cols as f64)
                };
                for x in &mut t.data {
                    *x = rng.gen_range(-bound..bound);
                }
            }
            let hidden = match name.as_str() {
                "enc.fwd.b" | "enc.bwd.b" => Some(config.encoder_hidden),
                "dec.lstm.b" => Some(config.decoder_hidden),
                _ => None,
            };
            if let Some(hd) = hidden {
                for x in &mut t.data[hd..2 * hd] {
                    *x = 1.0;
                }
            }
            store.add(name, t);
        }
        let layout = Layout::resolve(&store, &config)?;
        Ok(Self {
            config,
            vocab,
            params: store,
            layout,
        })
    }

    /// Reassembles a model from stored parts, checking every tensor shape.
    pub fn from_parts(
        config: DisAeConfig,
        vocab: Vocabulary,
        params: ParamStore,
    ) -> Result<Self, ModelError> {
        config.validate()?;
        if config.vocab_size != vocab.len() {
            return Err(ModelError::ParameterMismatch(format!(
                "config vocab_size {} but vocabulary has {} tokens",
                config.vocab_size,
                vocab.len()
            )));
        }
        let layout = Layout::resolve(&params, &config)?;
        Ok(Self {
            config,
            vocab,
            params,
            layout,
        })
    }

    pub fn config(&self) -> &DisAeConfig {
        &self.config
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// The `M x d_e` label-embedding table.
    pub fn label_table(&self) -> &Tensor {
        self.params.get(self.layout.labels)
    }

    /// Tokenizes with BOS/EOS, respecting the encoder and decoder limits.
    pub fn tokenize(&self, text: &str) -> Vec<TokenId> {
        let cap = self
            .config
            .max_encode_len
            .min(self.config.max_decode_len + 1);
        self.vocab.tokenize_capped(text, cap)
    }

    pub fn pair_tokens(&self, positive: &str, negative: &str) -> PairTokens {
        PairTokens {
            positive: self.tokenize(positive),
            negative: self.tokenize(negative),
        }
    }

    fn lstm_step(
        g: &mut Graph<'_>,
        w: ParamId,
        b: ParamId,
        x: Var,
        h: Var,
        c: Var,
        hidden: usize,
    ) -> (Var, Var) {
        let xh = g.concat(&[x, h]);
        let gates = g.affine(w, Some(b), xh);
        let i = g.slice(gates, 0, hidden);
        let i = g.sigmoid(i);
        let f = g.slice(gates, hidden, hidden);
        let f = g.sigmoid(f);
        let u = g.slice(gates, 2 * hidden, hidden);
        let u = g.tanh(u);
        let o = g.slice(gates, 3 * hidden, hidden);
        let o = g.sigmoid(o);
        let fc = g.mul(f, c);
        let iu = g.mul(i, u);
        let c2 = g.add(fc, iu);
        let tc = g.tanh(c2);
        let h2 = g.mul(o, tc);
        (h2, c2)
    }

    fn attend(g: &mut Graph<'_>, head: Attention, states: &[Var]) -> (Var, Var) {
        let v = g.param(head.v);
        let scores: Vec<Var> = states
            .iter()
            .map(|&s| {
                let a = g.affine(head.w, Some(head.b), s);
                let a = g.tanh(a);
                g.dot(v, a)
            })
            .collect();
        let scores = g.stack(&scores);
        let weights = g.softmax(scores);
        let pooled = g.weighted_sum(weights, states);
        (weights, pooled)
    }

    pub fn encode_vars(&self, g: &mut Graph<'_>, ids: &[TokenId]) -> Result<EncodedVars, ModelError> {
        if ids.is_empty() {
            return Err(ModelError::EmptyInput);
        }
        if ids.len() > self.config.max_encode_len {
            return Err(ModelError::InputTooLong {
                len: ids.len(),
                max: self.config.max_encode_len,
            });
        }
        let l = &self.layout;
        let hidden = self.config.encoder_hidden;
        let embeds: Vec<Var> = ids
            .iter()
            .map(|&t| g.param_row(l.embedding, t.min(self.config.vocab_size - 1)))
            .collect();

        let zeros = g.input(vec![0.0; hidden]);
        let (mut h, mut c) = (zeros, zeros);
        let mut fwd = Vec::with_capacity(ids.len());
        for &x in &embeds {
            (h, c) = Self::lstm_step(g, l.enc_fwd_w, l.enc_fwd_b, x, h, c, hidden);
            fwd.push(h);
        }
        let (mut h, mut c) = (zeros, zeros);
        let mut bwd = vec![zeros; ids.len()];
        for (t, &x) in embeds.iter().enumerate().rev() {
            (h, c) = Self::lstm_step(g, l.enc_bwd_w, l.enc_bwd_b, x, h, c, hidden);
            bwd[t] = h;
        }
        let states: Vec<Var> = fwd
            .iter()
            .zip(&bwd)
            .map(|(&f, &b)| g.concat(&[f, b]))
            .collect();
        let h = g.mean(&states);
        let (attn_sent, pooled_sent) = Self::attend(g, l.attn_sent, &states);
        let (attn_cont, pooled_cont) = Self::attend(g, l.attn_cont, &states);
        let z_e = g.affine(l.proj_sent_w, Some(l.proj_sent_b), pooled_sent);
        let z_c = g.affine(l.proj_cont_w, Some(l.proj_cont_b), pooled_cont);
        Ok(EncodedVars {
            states,
            h,
            attn_sent,
            attn_cont,
            z_e,
            z_c,
        })
    }

    /// Classifier logits for a `d_e`-dimensional input.
    pub fn classify_vars(&self, g: &mut Graph<'_>, x: Var) -> Var {
        g.affine(self.layout.clf_w, Some(self.layout.clf_b), x)
    }

    /// Maps `z_c` into the classifier's input space.
    pub fn adapt_content(&self, g: &mut Graph<'_>, z_c: Var) -> Var {
        match self.layout.adapter {
            Some((w, b)) => g.affine(w, Some(b), z_c),
            None => z_c,
        }
    }

    pub fn soft_replace_vars(&self, g: &mut Graph<'_>, probs: Var) -> Var {
        let rows: Vec<Var> = (0..self.config.num_classes)
            .map(|i| g.param_row(self.layout.labels, i))
            .collect();
        g.weighted_sum(probs, &rows)
    }

    pub fn factor_vars(&self, g: &mut Graph<'_>, ids: &[TokenId]) -> Result<FactorVars, ModelError> {
        let enc = self.encode_vars(g, ids)?;
        let logits_e = self.classify_vars(g, enc.z_e);
        let probs_e = g.softmax(logits_e);
        let z_tilde_e = self.soft_replace_vars(g, probs_e);
        let zc_in = self.adapt_content(g, enc.z_c);
        let logits_c = self.classify_vars(g, zc_in);
        let probs_c = g.softmax(logits_c);
        Ok(FactorVars {
            enc,
            logits_e,
            probs_e,
            z_tilde_e,
            logits_c,
            probs_c,
        })
    }

    fn check_gold(&self, gold: &[TokenId]) -> Result<(), ModelError> {
        if gold.len() < 2 || gold[0] != BOS || gold[gold.len() - 1] != EOS {
            return Err(ModelError::MalformedGold);
        }
        if gold.len() - 1 > self.config.max_decode_len {
            return Err(ModelError::GoldTooLong {
                len: gold.len() - 1,
                max: self.config.max_decode_len,
            });
        }
        Ok(())
    }

    fn decoder_init(&self, g: &mut Graph<'_>, z: Var) -> (Var, Var) {
        let h0 = g.affine(self.layout.dec_init_w, Some(self.layout.dec_init_b), z);
        let h0 = g.tanh(h0);
        let c0 = g.input(vec![0.0; self.config.decoder_hidden]);
        (h0, c0)
    }

    /// One decoder step; returns the next state and the step's log-probabilities.
    fn decoder_step(&self, g: &mut Graph<'_>, z: Var, token: TokenId, h: Var, c: Var) -> (Var, Var, Var) {
        let l = &self.layout;
        let emb = g.param_row(l.embedding, token.min(self.config.vocab_size - 1));
        let x = g.concat(&[emb, z]);
        let (h, c) = Self::lstm_step(g, l.dec_w, l.dec_b, x, h, c, self.config.decoder_hidden);
        let logits = g.affine(l.out_w, Some(l.out_b), h);
        let logp = g.log_softmax(logits);
        (h, c, logp)
    }

    /// Summed negative log-likelihood of `gold[1..]` given `z` under teacher forcing.
    pub fn nll_vars(&self, g: &mut Graph<'_>, z: Var, gold: &[TokenId]) -> Result<Var, ModelError> {
        self.check_gold(gold)?;
        let (mut h, mut c) = self.decoder_init(g, z);
        let mut picks = Vec::with_capacity(gold.len() - 1);
        for t in 0..gold.len() - 1 {
            let (h2, c2, logp) = self.decoder_step(g, z, gold[t], h, c);
            (h, c) = (h2, c2);
            picks.push(g.pick(logp, gold[t + 1]));
        }
        let s = g.sum(&picks);
        Ok(g.scale(s, -1.0))
    }

    fn cross_entropy(&self, g: &mut Graph<'_>, logits: Var, class: usize) -> Var {
        let p = g.softmax(logits);
        let lp = g.ln_floor(p, self.config.prob_floor);
        let picked = g.pick(lp, class);
        g.scale(picked, -1.0)
    }

    /// `KL(U || softmax(logits))` with the probability floor.
    fn kl_uniform(&self, g: &mut Graph<'_>, probs: Var) -> Var {
        let m = self.config.num_classes as f64;
        let lp = g.ln_floor(probs, self.config.prob_floor);
        let s = g.sum_elems(lp);
        let s = g.scale(s, -1.0 / m);
        g.add_scalar(s, -math::ln(m))
    }

    fn check_nonzero(g: &Graph<'_>, v: Var, which: &'static str) -> Result<(), ModelError> {
        if math::norm(g.value(v)) == 0.0 {
            return Err(ModelError::ZeroNormLatent(which));
        }
        Ok(())
    }

    /// Records every term of the objective; terms with zero weight stay out of `total`.
    pub fn pair_loss_vars(
        &self,
        g: &mut Graph<'_>,
        pair: &PairTokens,
        w: LossWeights,
    ) -> Result<PairLossVars, ModelError> {
        let m = self.config.num_classes;
        let fp = self.factor_vars(g, &pair.positive)?;
        let fn_ = self.factor_vars(g, &pair.negative)?;

        let zp = g.concat(&[fp.z_tilde_e, fp.enc.z_c]);
        let zn = g.concat(&[fn_.z_tilde_e, fn_.enc.z_c]);
        let rec_p = self.nll_vars(g, zp, &pair.positive)?;
        let rec_n = self.nll_vars(g, zn, &pair.negative)?;
        let rec = g.add(rec_p, rec_n);

        let ce_p = self.cross_entropy(g, fp.logits_e, rating_class(5, m));
        let ce_n = self.cross_entropy(g, fn_.logits_e, rating_class(1, m));
        let emotion = g.add(ce_p, ce_n);

        let kl_p = self.kl_uniform(g, fp.probs_c);
        let kl_n = self.kl_uniform(g, fn_.probs_c);
        let neutrality = g.add(kl_p, kl_n);

        let mut label_terms = Vec::with_capacity(m);
        for i in 0..m {
            let row = g.param_row(self.layout.labels, i);
            let logits = self.classify_vars(g, row);
            label_terms.push(self.cross_entropy(g, logits, i));
        }
        let label = g.sum(&label_terms);

        for (v, which) in [
            (fp.enc.z_e, "z_e (positive)"),
            (fn_.enc.z_e, "z_e (negative)"),
            (fp.enc.z_c, "z_c (positive)"),
            (fn_.enc.z_c, "z_c (negative)"),
        ] {
            Self::check_nonzero(g, v, which)?;
        }
        let cos_e = g.cosine(fp.enc.z_e, fn_.enc.z_e);
        let cos_c = g.cosine(fp.enc.z_c, fn_.enc.z_c);
        let d = g.sub(cos_e, cos_c);
        let distance = g.add_scalar(d, 2.0);

        let zp_cf = g.concat(&[fp.z_tilde_e, fn_.enc.z_c]);
        let zn_cf = g.concat(&[fn_.z_tilde_e, fp.enc.z_c]);
        let cf_p = self.nll_vars(g, zp_cf, &pair.positive)?;
        let cf_n = self.nll_vars(g, zn_cf, &pair.negative)?;
        let counterfactual = g.add(cf_p, cf_n);

        let mut parts = vec![rec];
        if w.alpha != 0.0 {
            let emo = g.sum(&[emotion, neutrality, label]);
            parts.push(g.scale(emo, w.alpha));
        }
        if w.beta != 0.0 {
            parts.push(g.scale(distance, w.beta));
        }
        if w.gamma != 0.0 {
            parts.push(g.scale(counterfactual, w.gamma));
        }
        let total = g.sum(&parts);
        Ok(PairLossVars {
            rec,
            emotion,
            neutrality,
            label,
            distance,
            counterfactual,
            total,
        })
    }

    fn breakdown(g: &Graph<'_>, v: &PairLossVars) -> LossBreakdown {
        LossBreakdown {
            rec: g.scalar(v.rec),
            emotion: g.scalar(v.emotion),
            neutrality: g.scalar(v.neutrality),
            label: g.scalar(v.label),
            distance: g.scalar(v.distance),
            counterfactual: g.scalar(v.counterfactual),
            total: g.scalar(v.total),
        }
    }

    /// Total objective with its per-term breakdown.
    pub fn loss_total(&self, pair: &PairTokens, w: LossWeights) -> Result<LossBreakdown, ModelError> {
        let mut g = Graph::new(&self.params);
        let vars = self.pair_loss_vars(&mut g, pair, w)?;
        Ok(Self::breakdown(&g, &vars))
    }

    /// Accumulates `scale * d(total)/d(params)` into `grads`.
    pub fn accumulate_gradients(
        &self,
        pair: &PairTokens,
        w: LossWeights,
        scale: f64,
        grads: &mut Grads,
    ) -> Result<LossBreakdown, ModelError> {
        let mut g = Graph::new(&self.params);
        let vars = self.pair_loss_vars(&mut g, pair, w)?;
        let b = Self::breakdown(&g, &vars);
        g.backward_seeded(vars.total, vec![scale], grads);
        Ok(b)
    }

    pub fn loss_reconstruction(&self, pair: &PairTokens) -> Result<f64, ModelError> {
        Ok(self.loss_total(pair, LossWeights::ZERO)?.rec)
    }

    /// `L_e + L_r`.
    pub fn loss_emotion(&self, pair: &PairTokens) -> Result<f64, ModelError> {
        let b = self.loss_total(pair, LossWeights::ZERO)?;
        Ok(b.emotion + b.label)
    }

    pub fn loss_neutrality(&self, pair: &PairTokens) -> Result<f64, ModelError> {
        Ok(self.loss_total(pair, LossWeights::ZERO)?.neutrality)
    }

    pub fn loss_counterfactual(&self, pair: &PairTokens) -> Result<f64, ModelError> {
        Ok(self.loss_total(pair, LossWeights::ZERO)?.counterfactual)
    }

    /// Runs the encoder, classifier and soft replacement for one token sequence.
    pub fn encode(&self, ids: &[TokenId]) -> Result<EncoderOutput, ModelError> {
        let mut g = Graph::new(&self.params);
        let f = self.factor_vars(&mut g, ids)?;
        Ok(EncoderOutput {
            token_states: f.enc.states.iter().map(|&s| g.value(s).to_vec()).collect(),
            primitive_rep: g.value(f.enc.h).to_vec(),
            sentiment_attention: g.value(f.enc.attn_sent).to_vec(),
            content_attention: g.value(f.enc.attn_cont).to_vec(),
            factors: LatentFactors {
                z_e: g.value(f.enc.z_e).to_vec(),
                z_c: g.value(f.enc.z_c).to_vec(),
                z_tilde_e: g.value(f.z_tilde_e).to_vec(),
                y_hat: SentimentDistribution(g.value(f.probs_e).to_vec()),
            },
        })
    }

    pub fn encode_text(&self, text: &str) -> Result<EncoderOutput, ModelError> {
        self.encode(&self.tokenize(text))
    }

    /// Classifier distribution for a `d_e` vector.
    pub fn classify(&self, x: &[f64]) -> Result<SentimentDistribution, ModelError> {
        self.check_dim(x, self.config.sentiment_dim)?;
        let mut g = Graph::new(&self.params);
        let v = g.input(x.to_vec());
        let logits = self.classify_vars(&mut g, v);
        let p = g.softmax(logits);
        Ok(SentimentDistribution(g.value(p).to_vec()))
    }

    /// Classifier distribution for a `d_c` vector, passed through the adapter.
    pub fn classify_content(&self, z_c: &[f64]) -> Result<SentimentDistribution, ModelError> {
        self.check_dim(z_c, self.config.content_dim)?;
        let mut g = Graph::new(&self.params);
        let v = g.input(z_c.to_vec());
        let a = self.adapt_content(&mut g, v);
        let logits = self.classify_vars(&mut g, a);
        let p = g.softmax(logits);
        Ok(SentimentDistribution(g.value(p).to_vec()))
    }

    fn check_dim(&self, x: &[f64], expected: usize) -> Result<(), ModelError> {
        if x.len() != expected {
            return Err(ModelError::DimensionMismatch {
                expected,
                got: x.len(),
            });
        }
        Ok(())
    }

    /// Log-probability vectors for each teacher-forced step (`gold.len() - 1` rows).
    pub fn decode_teacher_forced(&self, z: &[f64], gold: &[TokenId]) -> Result<Vec<Vec<f64>>, ModelError> {
        self.check_dim(z, self.config.latent_dim())?;
        self.check_gold(gold)?;
        let mut g = Graph::new(&self.params);
        let zv = g.input(z.to_vec());
        let (mut h, mut c) = self.decoder_init(&mut g, zv);
        let mut out = Vec::with_capacity(gold.len() - 1);
        for &tok in &gold[..gold.len() - 1] {
            let (h2, c2, logp) = self.decoder_step(&mut g, zv, tok, h, c);
            (h, c) = (h2, c2);
            out.push(g.value(logp).to_vec());
        }
        Ok(out)
    }

    /// Stepwise argmax decoding (no BOS/EOS in the output).
    pub fn decode_greedy(&self, z: &[f64], max_len: usize) -> Result<Vec<TokenId>, ModelError> {
        self.check_dim(z, self.config.latent_dim())?;
        let mut g = Graph::new(&self.params);
        let zv = g.input(z.to_vec());
        let (mut h, mut c) = self.decoder_init(&mut g, zv);
        let mut tok = BOS;
        let mut out = Vec::new();
        for _ in 0..max_len {
            let (h2, c2, logp) = self.decoder_step(&mut g, zv, tok, h, c);
            (h, c) = (h2, c2);
            tok = math::argmax(g.value(logp));
            if tok == EOS {
                break;
            }
            out.push(tok);
        }
        Ok(out)
    }

    /// Length-normalized beam search; output excludes BOS/EOS and has at most `max_len` tokens.
    pub fn decode_beam(&self, z: &[f64], width: usize, max_len: usize) -> Result<Vec<TokenId>, ModelError> {
        self.check_dim(z, self.config.latent_dim())?;
        let width = width.max(1);
        let mut g = Graph::new(&self.params);
        let zv = g.input(z.to_vec());
        let (h0, c0) = self.decoder_init(&mut g, zv);

        struct Hyp {
            tokens: Vec<TokenId>,
            logp: f64,
            h: Var,
            c: Var,
        }
        let mut alive = vec![Hyp {
            tokens: Vec::new(),
            logp: 0.0,
            h: h0,
            c: c0,
        }];
        let mut finished: Vec<(Vec<TokenId>, f64)> = Vec::new();

        for step in 0..max_len {
            // (score, hyp index, token, h, c)
            let mut cands: Vec<(f64, usize, TokenId, Var, Var)> = Vec::new();
            for (hi, hyp) in alive.iter().enumerate() {
                let last = hyp.tokens.last().copied().unwrap_or(BOS);
                let (h, c, logp) = self.decoder_step(&mut g, zv, last, hyp.h, hyp.c);
                let lp = g.value(logp);
                for tok in top_k(lp, width) {
                    cands.push((hyp.logp + lp[tok], hi, tok, h, c));
                }
            }
            cands.sort_by(|a, b| {
                b.0.total_cmp(&a.0)
                    .then(a.1.cmp(&b.1))
                    .then(a.2.cmp(&b.2))
            });
            let mut next = Vec::with_capacity(width);
            for (score, hi, tok, h, c) in cands {
                if next.len() + finished.len() >= width {
                    break;
                }
                let mut tokens = alive[hi].tokens.clone();
                if tok == EOS {
                    let len = (tokens.len() + 1) as f64;
                    finished.push((tokens, score / len));
                } else {
                    tokens.push(tok);
                    next.push(Hyp {
                        tokens,
                        logp: score,
                        h,
                        c,
                    });
                }
            }
            alive = next;
            if alive.is_empty() || finished.len() >= width {
                break;
            }
            if step + 1 == max_len {
                for hyp in &alive {
                    finished.push((hyp.tokens.clone(), hyp.logp / hyp.tokens.len().max(1) as f64));
                }
            }
        }
        if finished.is_empty() {
            return Ok(alive.into_iter().next().map(|h| h.tokens).unwrap_or_default());
        }
        let mut best = 0;
        for (i, f) in finished.iter().enumerate() {
            if f.1 > finished[best].1 {
                best = i;
            }
        }
        Ok(finished.swap_remove(best).0)
    }

    /// Beam decode with the configured width and length, detokenized.
    pub fn generate(&self, z: &[f64]) -> Result<String, ModelError> {
        let ids = self.decode_beam(z, self.config.beam_width, self.config.max_decode_len)?;
        Ok(self.vocab.detokenize(&ids))
    }
}

/// `2 + cos(z_e^p, z_e^n) - cos(z_c^p, z_c^n)`.
pub fn loss_distance(p: &LatentFactors, n: &LatentFactors) -> Result<f64, ModelError> {
    for (v, which) in [
        (&p.z_e, "z_e (positive)"),
        (&n.z_e, "z_e (negative)"),
        (&p.z_c, "z_c (positive)"),
        (&n.z_c, "z_c (negative)"),
    ] {
        if math::norm(v) == 0.0 {
            return Err(ModelError::ZeroNormLatent(which));
        }
    }
    let cos = |a: &[f64], b: &[f64]| math::dot(a, b) / (math::norm(a) * math::norm(b));
    Ok(2.0 + cos(&p.z_e, &n.z_e) - cos(&p.z_c, &n.z_c))
}

/// Indices of the `k` largest entries, descending, ties to the lower index.
fn top_k(xs: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[b].total_cmp(&xs[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

#[cfg(test)]
mod tests;
