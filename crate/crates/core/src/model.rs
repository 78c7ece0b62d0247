//! Reorder-then-tag model with an identity monotonic alignment.
//!
//! The scorer produces a distribution over permutation trees of the input;
//! the semantic embeddings of the input are reordered by either the marginal
//! permutation matrix (soft) or a straight-through Gumbel sample (hard), and
//! a tagger predicts one output token per reordered position. At inference
//! both variants reorder with the MAP derivation. The identity baseline skips
//! reordering and tags the input with a bidirectional recurrent encoder.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::btg::{ChartLayout, RuleWeightChart};
use crate::error::{Error, Result};
use crate::grad::{finite_diff_check_with, FdReport, Gradients, ParamGroup, Stencil, Tape, Var, EXTRAPOLATED_STEP};
use crate::inference::{accumulate_spans, map_derivation_weighted, span_selections, GumbelNoise};
use crate::matrix::Matrix;
use crate::params::{Checkpoint, ParamStore};
use crate::perm::Permutation;
use crate::rnn::BiGru;
use crate::scoring::{score_rules, ScorerConfig, ScorerParams};
use crate::tasks::{ArithExample, VOCAB_SIZE};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaggerConfig {
    pub vocab: usize,
    #[serde(default = "default_embed")]
    pub embed_dim: usize,
    /// Hidden size per direction of a recurrent encoder over the (reordered)
    /// embeddings; `None` tags each position independently.
    #[serde(default)]
    pub encoder_hidden: Option<usize>,
}

fn default_embed() -> usize {
    32
}

impl TaggerConfig {
    pub fn new(vocab: usize) -> Self {
        Self { vocab, embed_dim: default_embed(), encoder_hidden: None }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct TaggerSlots {
    embed: usize,
    rnn: Option<BiGru>,
    w_out: usize,
    b_out: usize,
}

/// The "semantics" parameters: embeddings, optional encoder and output layer.
#[derive(Clone, Debug, PartialEq)]
pub struct TaggerParams {
    config: TaggerConfig,
    store: ParamStore,
    slots: TaggerSlots,
}

impl TaggerParams {
    pub fn init(config: TaggerConfig, rng: &mut impl Rng) -> Self {
        let mut store = ParamStore::new(ParamGroup::Tagger);
        let d = config.embed_dim;
        let embed = store.add_uniform("embed", config.vocab, d, 1, rng);
        let (rnn, out_dim) = match config.encoder_hidden {
            Some(h) => (Some(BiGru::init(&mut store, "rnn", d, h, rng)), 2 * h),
            None => (None, d),
        };
        let w_out = match config.encoder_hidden {
            // Copy start: logits are embedding dot products, so the argmax
            // of an unmixed row is its own token.
            None => {
                let e = store.get(embed).transpose();
                store.add("out.w", e)
            }
            Some(_) => store.add_uniform("out.w", out_dim, config.vocab, out_dim, rng),
        };
        let b_out = store.add_zeros("out.b", 1, config.vocab);
        Self { config, store, slots: TaggerSlots { embed, rnn, w_out, b_out } }
    }

    pub fn config(&self) -> &TaggerConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn embeddings(&self, tape: &mut Tape, p: &[Var], tokens: &[usize]) -> Var {
        tape.gather(p[self.slots.embed], tokens.to_vec())
    }

    /// `n × vocab` output logits from `n × d` (reordered) embeddings.
    fn logits(&self, tape: &mut Tape, p: &[Var], x: Var) -> Var {
        let feats = match &self.slots.rnn {
            Some(rnn) => {
                debug_assert_eq!(Some(rnn.hidden()), self.config.encoder_hidden);
                rnn.run_concat(tape, p, x)
            }
            None => x,
        };
        let out = tape.matmul(feats, p[self.slots.w_out]);
        tape.add_row(out, p[self.slots.b_out])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Soft,
    Hard,
    IdentityBaseline,
}

impl Variant {
    pub fn reorders(self) -> bool {
        self != Variant::IdentityBaseline
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub variant: Variant,
    #[serde(default = "d_epochs")]
    pub epochs: usize,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default = "d_lr")]
    pub learning_rate: f64,
    #[serde(default = "d_temperature")]
    pub temperature: f64,
    /// Number of initial steps subject to the lag strategy.
    #[serde(default = "d_lag_steps")]
    pub lag_steps: usize,
    /// Probability that a step within the lag window updates the scorer only.
    #[serde(default = "d_lag_prob")]
    pub lag_prob: f64,
    #[serde(default = "d_clip")]
    pub clip_norm: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "d_scorer")]
    pub scorer: ScorerConfig,
    #[serde(default = "d_tagger")]
    pub tagger: TaggerConfig,
    /// Training exact-match is measured on at most this many training examples.
    #[serde(default = "d_train_eval")]
    pub train_eval_limit: usize,
    /// Stop after the first epoch whose dev exact-match reaches this value.
    #[serde(default)]
    pub stop_at_dev_exact_match: Option<f64>,
}

fn d_epochs() -> usize {
    30
}
fn d_batch() -> usize {
    32
}
fn d_lr() -> f64 {
    1e-3
}
fn d_temperature() -> f64 {
    1.0
}
fn d_lag_steps() -> usize {
    1000
}
fn d_lag_prob() -> f64 {
    0.5
}
fn d_clip() -> f64 {
    5.0
}
fn d_scorer() -> ScorerConfig {
    ScorerConfig::new(VOCAB_SIZE)
}
fn d_tagger() -> TaggerConfig {
    TaggerConfig::new(VOCAB_SIZE)
}
fn d_train_eval() -> usize {
    1000
}

/// Encoder size the identity baseline's tagger gets by default.
pub const BASELINE_ENCODER_HIDDEN: usize = 64;

impl TrainConfig {
    /// Defaults for a variant over the arithmetic vocabulary. The identity
    /// baseline gets a bidirectional encoder in its tagger; the reordering
    /// variants tag each reordered position independently.
    pub fn new(variant: Variant) -> Self {
        let mut tagger = d_tagger();
        if variant == Variant::IdentityBaseline {
            tagger.encoder_hidden = Some(BASELINE_ENCODER_HIDDEN);
        }
        Self {
            variant,
            epochs: d_epochs(),
            batch_size: d_batch(),
            learning_rate: d_lr(),
            temperature: d_temperature(),
            lag_steps: d_lag_steps(),
            lag_prob: d_lag_prob(),
            clip_norm: d_clip(),
            seed: 0,
            scorer: d_scorer(),
            tagger,
            train_eval_limit: d_train_eval(),
            stop_at_dev_exact_match: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be at least 1");
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return bad("learning_rate must be finite and non-negative");
        }
        if !(self.temperature > 0.0) {
            return Err(Error::NonPositiveTemperature(self.temperature));
        }
        if !(0.0..=1.0).contains(&self.lag_prob) {
            return bad("lag_prob must lie in [0, 1]");
        }
        if !(self.clip_norm > 0.0) {
            return bad("clip_norm must be positive");
        }
        if self.scorer.vocab != self.tagger.vocab {
            return bad("scorer and tagger vocabularies differ");
        }
        let dims = [self.scorer.embed_dim, self.scorer.hidden, self.scorer.mlp_hidden, self.tagger.embed_dim];
        if dims.contains(&0) || self.tagger.encoder_hidden == Some(0) || self.tagger.vocab == 0 {
            return bad("layer sizes must be positive");
        }
        Ok(())
    }
}

// Independent RNG streams under one seed.
const STREAM_SCORER_INIT: u64 = 0;
const STREAM_TAGGER_INIT: u64 = 1;
const STREAM_SHUFFLE: u64 = 2;
const STREAM_NOISE: u64 = 3;
const STREAM_LAG: u64 = 4;

fn stream(seed: u64, s: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(s);
    rng
}

/// Scorer and tagger of one variant.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    variant: Variant,
    scorer: ScorerParams,
    tagger: TaggerParams,
}

/// How the embeddings are reordered before tagging.
#[derive(Clone, Copy, Debug)]
pub enum Reorder<'a> {
    /// Marginal permutation matrix.
    Marginal,
    /// One-hot Gumbel sample forward, relaxed backward.
    Hard { noise: &'a GumbelNoise, temperature: f64 },
    /// Relaxed Gumbel sample in both directions.
    Relaxed { noise: &'a GumbelNoise, temperature: f64 },
    /// A fixed `n × n` matrix.
    Fixed(&'a Matrix),
    Identity,
}

/// Rule scores feeding a reordering: from the scorer, or supplied directly.
#[derive(Clone, Copy, Debug)]
pub enum Scores<'a> {
    Scorer,
    Given(&'a RuleWeightChart),
}

/// Per-position output distributions and mean token cross-entropy.
#[derive(Clone, Debug, PartialEq)]
pub struct Forward {
    pub probs: Matrix,
    pub loss: f64,
}

struct Recorded {
    loss: Var,
    logits: Var,
}

fn softmax_rows(logits: &Matrix) -> Matrix {
    let mut p = logits.clone();
    for r in 0..p.rows() {
        let row = p.row_mut(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for x in row.iter_mut() {
            *x = (*x - max).exp();
            total += *x;
        }
        for x in row.iter_mut() {
            *x /= total;
        }
    }
    p
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = i;
        }
    }
    best
}

impl Model {
    pub fn init(config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let scorer = ScorerParams::init(config.scorer.clone(), &mut stream(config.seed, STREAM_SCORER_INIT));
        let tagger = TaggerParams::init(config.tagger.clone(), &mut stream(config.seed, STREAM_TAGGER_INIT));
        Ok(Self { variant: config.variant, scorer, tagger })
    }

    pub fn variant(&self) -> Variant {
        self.variant
    }

    pub fn scorer(&self) -> &ScorerParams {
        &self.scorer
    }

    pub fn tagger(&self) -> &TaggerParams {
        &self.tagger
    }

    pub fn scorer_mut(&mut self) -> &mut ScorerParams {
        &mut self.scorer
    }

    pub fn tagger_mut(&mut self) -> &mut TaggerParams {
        &mut self.tagger
    }

    /// Every parameter, scorer first, then tagger.
    pub fn flatten(&self) -> Vec<f64> {
        let mut v = self.scorer.store().flatten();
        v.extend(self.tagger.store().flatten());
        v
    }

    pub fn set_flat(&mut self, flat: &[f64]) {
        let cut = self.scorer.store().num_scalars();
        self.scorer.store_mut().set_flat(&flat[..cut]);
        self.tagger.store_mut().set_flat(&flat[cut..]);
    }

    /// Gradients laid out like [`Model::flatten`]; parameters not on the tape count as zero.
    pub fn flatten_gradients(&self, grads: &Gradients) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.flatten().len());
        for store in [self.scorer.store(), self.tagger.store()] {
            for (i, t) in store.tensors().iter().enumerate() {
                match grads.param(store.id(i)) {
                    Some(g) => out.extend_from_slice(g.as_slice()),
                    None => out.extend(std::iter::repeat_n(0.0, t.len())),
                }
            }
        }
        out
    }

    fn check_pair(&self, tokens: &[usize], gold: &[usize]) -> Result<()> {
        if tokens.len() != gold.len() {
            return Err(Error::LengthMismatch { input: tokens.len(), gold: gold.len() });
        }
        self.check_tokens(tokens)?;
        self.check_tokens(gold)
    }

    fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        let vocab = self.tagger.config.vocab;
        match tokens.iter().find(|&&t| t >= vocab) {
            Some(&id) => Err(Error::OutOfVocabulary { id, vocab }),
            None => Ok(()),
        }
    }

    fn record(&self, tape: &mut Tape, tokens: &[usize], gold: &[usize], reorder: Reorder, scores: Scores) -> Result<Recorded> {
        self.check_pair(tokens, gold)?;
        let n = tokens.len();
        let pt = self.tagger.store.bind(tape);
        let x = self.tagger.embeddings(tape, &pt, tokens);
        let reordered = match reorder {
            Reorder::Identity => x,
            Reorder::Fixed(m) => {
                if m.shape() != (n, n) {
                    return Err(Error::InvalidChart(format!("reordering matrix is {:?}, sentence has {n} tokens", m.shape())));
                }
                let m = tape.constant(m.clone());
                tape.matmul(m, x)
            }
            Reorder::Marginal | Reorder::Hard { .. } | Reorder::Relaxed { .. } => {
                let layout = ChartLayout::new(n);
                let logf = match scores {
                    Scores::Scorer => {
                        let ps = self.scorer.store().bind(tape);
                        self.scorer.record(tape, &ps, tokens)?
                    }
                    Scores::Given(w) => {
                        if w.n() != n {
                            return Err(Error::SpanMismatch { tree: n, chart: w.n() });
                        }
                        tape.constant(Matrix::from_vec(layout.num_rules(), 1, w.as_slice().to_vec()))
                    }
                };
                let logbeta = tape.inside(logf, &layout);
                let logg = tape.renormalize(logf, logbeta, &layout);
                let weights = match reorder {
                    Reorder::Marginal => tape.exp(logg),
                    Reorder::Hard { noise, temperature } | Reorder::Relaxed { noise, temperature } => {
                        if !(temperature > 0.0) {
                            return Err(Error::NonPositiveTemperature(temperature));
                        }
                        if noise.0.len() != layout.num_rules() {
                            return Err(Error::InvalidChart(format!(
                                "noise has {} entries, chart has {} rules",
                                noise.0.len(),
                                layout.num_rules()
                            )));
                        }
                        tape.span_select(logg, &noise.0, temperature, false, &layout)
                    }
                    _ => unreachable!(),
                };
                let mut m = tape.chart_accumulate(weights, &layout);
                if let Reorder::Hard { noise, temperature } = reorder {
                    // one-hot sample forward, gradient of the relaxed chart backward
                    let (_, hard) = span_selections(&layout, tape.value(logg).as_slice(), &noise.0, temperature);
                    let spans = accumulate_spans(&layout, &hard);
                    m = tape.straight_through(spans[layout.span_index(0, n)].clone(), m);
                }
                tape.matmul(m, x)
            }
        };
        let logits = self.tagger.logits(tape, &pt, reordered);
        let loss = tape.softmax_xent(logits, gold.to_vec());
        Ok(Recorded { loss, logits })
    }

    fn forward(&self, tokens: &[usize], gold: &[usize], reorder: Reorder, scores: Scores) -> Result<Forward> {
        let mut tape = Tape::new();
        let rec = self.record(&mut tape, tokens, gold, reorder, scores)?;
        Ok(Forward { probs: softmax_rows(tape.value(rec.logits)), loss: tape.scalar(rec.loss) })
    }

    /// Loss and gradients of every parameter reached by the chosen reordering.
    pub fn loss_and_gradients(&self, tokens: &[usize], gold: &[usize], reorder: Reorder) -> Result<(f64, Gradients)> {
        let mut tape = Tape::new();
        let rec = self.record(&mut tape, tokens, gold, reorder, Scores::Scorer)?;
        let grads = tape.backward(rec.loss, 1.0)?;
        Ok((tape.scalar(rec.loss), grads))
    }

    /// Loss through an arbitrary reordering, without gradients.
    pub fn forward_with(&self, tokens: &[usize], gold: &[usize], reorder: Reorder, scores: Scores) -> Result<Forward> {
        self.forward(tokens, gold, reorder, scores)
    }

    /// The variant's inference reordering: the MAP derivation of the scorer's
    /// chart, or the identity for the baseline.
    pub fn reordering(&self, tokens: &[usize]) -> Result<Permutation> {
        self.check_tokens(tokens)?;
        if !self.variant.reorders() || tokens.len() < 2 {
            return Ok(Permutation::identity(tokens.len()));
        }
        let w = score_rules(&self.scorer, tokens)?;
        let (tree, _) = map_derivation_weighted(&w);
        Ok(Permutation::from_tree(&tree))
    }

    /// Tagger logits on `tokens` already placed in output order.
    fn tag_logits(&self, ordered: &[usize]) -> Matrix {
        let mut tape = Tape::new();
        let pt = self.tagger.store.bind(&mut tape);
        let x = self.tagger.embeddings(&mut tape, &pt, ordered);
        let logits = self.tagger.logits(&mut tape, &pt, x);
        tape.value(logits).clone()
    }

    /// Predicted output sequence and the inference-path cross-entropy against `gold`.
    pub fn predict_with_loss(&self, tokens: &[usize], gold: &[usize]) -> Result<(Vec<usize>, f64)> {
        self.check_pair(tokens, gold)?;
        let logits = self.tag_logits(&self.reordering(tokens)?.apply(tokens));
        let probs = softmax_rows(&logits);
        let pred = (0..logits.rows()).map(|r| argmax(logits.row(r))).collect();
        let loss = gold.iter().enumerate().map(|(r, &t)| -probs[(r, t)].max(f64::MIN_POSITIVE).ln()).sum::<f64>()
            / gold.len().max(1) as f64;
        Ok((pred, loss))
    }

    pub fn save(&self, path: &Path, config: &TrainConfig) -> Result<()> {
        let meta = serde_json::json!({ "config": config });
        Checkpoint::from_stores(meta, &[("scorer", self.scorer.store()), ("tagger", self.tagger.store())]).save(path)
    }

    /// Loads a checkpoint together with the configuration it was trained with.
    pub fn load(path: &Path) -> Result<(Self, TrainConfig)> {
        let ck = Checkpoint::load(path)?;
        let config: TrainConfig = serde_json::from_value(
            ck.meta.get("config").cloned().ok_or_else(|| Error::Checkpoint("missing config".into()))?,
        )?;
        let mut model = Model::init(&config)?;
        ck.restore("scorer", model.scorer.store_mut())?;
        ck.restore("tagger", model.tagger.store_mut())?;
        Ok((model, config))
    }
}

/// Soft forward: embeddings reordered by the marginal permutation matrix.
pub fn forward_soft(model: &Model, tokens: &[usize], gold: &[usize]) -> Result<Forward> {
    model.forward(tokens, gold, Reorder::Marginal, Scores::Scorer)
}

/// Hard forward under fresh Gumbel noise.
pub fn forward_hard(model: &Model, tokens: &[usize], gold: &[usize], rng: &mut impl Rng, temperature: f64) -> Result<Forward> {
    let noise = GumbelNoise::draw(&ChartLayout::new(tokens.len()), rng);
    forward_hard_with_noise(model, tokens, gold, &noise, temperature)
}

pub fn forward_hard_with_noise(
    model: &Model,
    tokens: &[usize],
    gold: &[usize],
    noise: &GumbelNoise,
    temperature: f64,
) -> Result<Forward> {
    model.forward(tokens, gold, Reorder::Hard { noise, temperature }, Scores::Scorer)
}

pub fn predict(model: &Model, tokens: &[usize]) -> Result<Vec<usize>> {
    let ordered = model.reordering(tokens)?.apply(tokens);
    let logits = model.tag_logits(&ordered);
    Ok((0..logits.rows()).map(|r| argmax(logits.row(r))).collect())
}

/// Fraction of examples whose full prediction equals the gold sequence.
pub fn evaluate(model: &Model, data: &[ArithExample]) -> Result<f64> {
    Ok(evaluate_with_loss(model, data)?.1)
}

/// Mean inference-path cross-entropy and exact-match accuracy.
pub fn evaluate_with_loss(model: &Model, data: &[ArithExample]) -> Result<(f64, f64)> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let (mut loss, mut hits) = (0.0, 0usize);
    for ex in data {
        let (pred, l) = model.predict_with_loss(&ex.infix, &ex.postfix)?;
        loss += l;
        hits += usize::from(pred == ex.postfix);
    }
    Ok((loss / data.len() as f64, hits as f64 / data.len() as f64))
}

/// Small layer sizes for finite-difference checks of the whole pipeline.
pub fn gradcheck_config(variant: Variant, seed: u64) -> TrainConfig {
    let mut c = TrainConfig::new(variant);
    c.seed = seed;
    c.scorer.embed_dim = 4;
    c.scorer.hidden = 3;
    c.scorer.mlp_hidden = 5;
    c.tagger.embed_dim = 4;
    if c.tagger.encoder_hidden.is_some() {
        c.tagger.encoder_hidden = Some(3);
    }
    c
}

/// Finite-difference reports for the soft path and for the relaxed Gumbel
/// path (the backward the hard variant trains with) on one random model.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PipelineCheck {
    pub soft: FdReport,
    pub relaxed: FdReport,
}

impl PipelineCheck {
    pub fn max_rel_error(&self) -> f64 {
        self.soft.max_rel_error.max(self.relaxed.max_rel_error)
    }
}

/// Checks gradients of the loss with respect to every scorer and tagger
/// parameter, from scores through inside, renormalisation, reordering and the
/// tagger, on random tokens of length `n`.
pub fn pipeline_gradcheck(n: usize, seed: u64) -> Result<PipelineCheck> {
    let model = Model::init(&gradcheck_config(Variant::Soft, seed))?;
    let mut rng = stream(seed, STREAM_NOISE);
    let vocab = model.tagger.config.vocab;
    let tokens: Vec<usize> = (0..n).map(|_| rng.gen_range(0..vocab)).collect();
    let gold: Vec<usize> = (0..n).map(|_| rng.gen_range(0..vocab)).collect();
    let noise = GumbelNoise::draw(&ChartLayout::new(n), &mut rng);
    let check = |reorder: Reorder| -> Result<FdReport> {
        let (_, grads) = model.loss_and_gradients(&tokens, &gold, reorder)?;
        let analytic = model.flatten_gradients(&grads);
        let point = model.flatten();
        let mut probe = model.clone();
        let f = |x: &[f64]| {
            probe.set_flat(x);
            probe.forward_with(&tokens, &gold, reorder, Scores::Scorer).map(|f| f.loss).unwrap_or(f64::NAN)
        };
        finite_diff_check_with(f, &point, &analytic, EXTRAPOLATED_STEP, Stencil::FivePoint)
    };
    Ok(PipelineCheck {
        soft: check(Reorder::Marginal)?,
        relaxed: check(Reorder::Relaxed { noise: &noise, temperature: 0.7 })?,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub epoch: usize,
    pub split: String,
    pub loss: f64,
    pub exact_match: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the best dev exact-match, ties going to
    /// the lower dev loss.
    pub model: Model,
    pub history: Vec<MetricRecord>,
    pub best_epoch: usize,
    pub steps: usize,
}

struct Adam {
    lr: f64,
    t: i32,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl Adam {
    fn new(store: &ParamStore, lr: f64) -> Self {
        let zeros: Vec<Matrix> = store.tensors().iter().map(|t| Matrix::zeros(t.rows(), t.cols())).collect();
        Self { lr, t: 0, m: zeros.clone(), v: zeros }
    }

    fn step(&mut self, store: &mut ParamStore, grads: &[Matrix], scale: f64) {
        self.t += 1;
        let c1 = 1.0 - BETA1.powi(self.t);
        let c2 = 1.0 - BETA2.powi(self.t);
        for (i, g) in grads.iter().enumerate() {
            let (m, v) = (self.m[i].as_mut_slice(), self.v[i].as_mut_slice());
            let p = store.get_mut(i).as_mut_slice();
            for (((p, m), v), &g) in p.iter_mut().zip(m).zip(v).zip(g.as_slice()) {
                let g = g * scale;
                *m = BETA1 * *m + (1.0 - BETA1) * g;
                *v = BETA2 * *v + (1.0 - BETA2) * g * g;
                *p -= self.lr * (*m / c1) / ((*v / c2).sqrt() + ADAM_EPS);
            }
        }
    }
}

fn zero_grads(store: &ParamStore) -> Vec<Matrix> {
    store.tensors().iter().map(|t| Matrix::zeros(t.rows(), t.cols())).collect()
}

fn add_grads(acc: &mut [Matrix], store: &ParamStore, grads: &Gradients) {
    for (i, a) in acc.iter_mut().enumerate() {
        if let Some(g) = grads.param(store.id(i)) {
            a.add_assign(g);
        }
    }
}

fn sq_norm(gs: &[Matrix]) -> f64 {
    gs.iter().map(|g| g.dot(g)).sum()
}

pub fn train(config: &TrainConfig, train_set: &[ArithExample], dev: &[ArithExample]) -> Result<TrainOutcome> {
    train_with_callback(config, train_set, dev, |_| {})
}

/// Mini-batch Adam training. Each epoch emits a train and a dev record through
/// `on_metric`. Within the first `lag_steps` steps a step updates only the
/// scorer with probability `lag_prob`.
pub fn train_with_callback(
    config: &TrainConfig,
    train_set: &[ArithExample],
    dev: &[ArithExample],
    mut on_metric: impl FnMut(&MetricRecord),
) -> Result<TrainOutcome> {
    if train_set.is_empty() || dev.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut model = Model::init(config)?;
    for ex in train_set.iter().chain(dev) {
        model.check_pair(&ex.infix, &ex.postfix)?;
    }
    let mut shuffle_rng = stream(config.seed, STREAM_SHUFFLE);
    let mut noise_rng = stream(config.seed, STREAM_NOISE);
    let mut lag_rng = stream(config.seed, STREAM_LAG);
    let mut adam_scorer = Adam::new(model.scorer.store(), config.learning_rate);
    let mut adam_tagger = Adam::new(model.tagger.store(), config.learning_rate);
    let train_eval = &train_set[..train_set.len().min(config.train_eval_limit.max(1))];

    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut history = Vec::new();
    // (dev exact-match, dev loss, epoch, parameters)
    let mut best: Option<(f64, f64, usize, Model)> = None;
    let mut steps = 0usize;
    for epoch in 1..=config.epochs {
        rand::seq::SliceRandom::shuffle(&mut order[..], &mut shuffle_rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(config.batch_size) {
            let mut gs = zero_grads(model.scorer.store());
            let mut gt = zero_grads(model.tagger.store());
            for &idx in batch {
                let ex = &train_set[idx];
                let n = ex.infix.len();
                let noise;
                let reorder = match config.variant {
                    Variant::Soft => Reorder::Marginal,
                    Variant::Hard => {
                        noise = GumbelNoise::draw(&ChartLayout::new(n), &mut noise_rng);
                        Reorder::Hard { noise: &noise, temperature: config.temperature }
                    }
                    Variant::IdentityBaseline => Reorder::Identity,
                };
                let (loss, grads) = model.loss_and_gradients(&ex.infix, &ex.postfix, reorder)?;
                epoch_loss += loss;
                add_grads(&mut gs, model.scorer.store(), &grads);
                add_grads(&mut gt, model.tagger.store(), &grads);
            }
            let scorer_only = config.variant.reorders()
                && steps < config.lag_steps
                && lag_rng.gen::<f64>() < config.lag_prob;
            let inv_b = 1.0 / batch.len() as f64;
            let mut norm2 = sq_norm(&gs);
            if !scorer_only {
                norm2 += sq_norm(&gt);
            }
            let norm = norm2.sqrt() * inv_b;
            let clip = if norm > config.clip_norm { config.clip_norm / norm } else { 1.0 };
            if norm.is_nan() {
                return Err(Error::NonFinite { coord: steps, what: "gradient norm".into() });
            }
            if config.variant.reorders() {
                adam_scorer.step(model.scorer.store_mut(), &gs, inv_b * clip);
            }
            if !scorer_only {
                adam_tagger.step(model.tagger.store_mut(), &gt, inv_b * clip);
            }
            steps += 1;
        }

        let (_, train_em) = evaluate_with_loss(&model, train_eval)?;
        let train_rec = MetricRecord {
            epoch,
            split: "train".into(),
            loss: epoch_loss / train_set.len() as f64,
            exact_match: train_em,
        };
        let (dev_loss, dev_em) = evaluate_with_loss(&model, dev)?;
        let dev_rec = MetricRecord { epoch, split: "dev".into(), loss: dev_loss, exact_match: dev_em };
        on_metric(&train_rec);
        on_metric(&dev_rec);
        history.push(train_rec);
        history.push(dev_rec);
        if best.as_ref().map_or(true, |(em, loss, _, _)| dev_em > *em || (dev_em == *em && dev_loss < *loss)) {
            best = Some((dev_em, dev_loss, epoch, model.clone()));
        }
        if config.stop_at_dev_exact_match.is_some_and(|t| dev_em >= t) {
            break;
        }
    }
    let (_, _, best_epoch, model) = best.expect("at least one epoch ran");
    Ok(TrainOutcome { model, history, best_epoch, steps })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::perm::{tree_to_dense, PermTree};
    use crate::tasks::{gen_arith, tokenize};

    fn tiny(variant: Variant, seed: u64) -> TrainConfig {
        gradcheck_config(variant, seed)
    }

    #[test]
    fn config_json_defaults_and_validation() {
        let c: TrainConfig = serde_json::from_str(r#"{"variant":"identity-baseline"}"#).unwrap();
        assert_eq!(c.batch_size, 32);
        assert_eq!(c.lag_steps, 1000);
        assert_eq!(c.learning_rate, 1e-3);
        assert_eq!(serde_json::to_value(Variant::Hard).unwrap(), "hard");
        let mut bad = TrainConfig::new(Variant::Soft);
        bad.temperature = 0.0;
        assert!(bad.validate().is_err());
        bad = TrainConfig::new(Variant::Soft);
        bad.tagger.vocab = 3;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn parameter_groups_are_disjoint() {
        let m = Model::init(&TrainConfig::new(Variant::Soft)).unwrap();
        assert_eq!(m.scorer().store().group(), ParamGroup::Scorer);
        assert_eq!(m.tagger().store().group(), ParamGroup::Tagger);
        let (_, grads) = m.loss_and_gradients(&[1, 2, 3], &[3, 2, 1], Reorder::Marginal).unwrap();
        let groups: std::collections::BTreeSet<_> = grads.params().keys().map(|id| id.group).collect();
        assert_eq!(groups.len(), 2);
        // the tagger's embedding table is its own tensor
        assert_ne!(m.scorer().store().get(0).as_slice().as_ptr(), m.tagger().store().get(0).as_slice().as_ptr());
    }

    #[test]
    fn length_mismatch_and_vocab() {
        let m = Model::init(&tiny(Variant::Soft, 0)).unwrap();
        assert!(matches!(forward_soft(&m, &[1, 2], &[1]), Err(Error::LengthMismatch { .. })));
        assert!(matches!(forward_soft(&m, &[1, 99], &[1, 2]), Err(Error::OutOfVocabulary { .. })));
        assert!(matches!(predict(&m, &[99]), Err(Error::OutOfVocabulary { .. })));
    }

    #[test]
    fn uniform_two_token_marginal_mixes_rows() {
        let mut m = Model::init(&tiny(Variant::Soft, 1)).unwrap();
        // a zeroed scorer output layer makes every rule weight equal
        let s = m.scorer_mut().store_mut();
        let last = s.len();
        for idx in [last - 2, last - 1] {
            s.get_mut(idx).scale(0.0);
        }
        let f = forward_soft(&m, &[3, 7], &[3, 7]).unwrap();
        let r0 = f.probs.row(0).to_vec();
        let r1 = f.probs.row(1).to_vec();
        for (a, b) in r0.iter().zip(&r1) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn single_token_inputs() {
        let m = Model::init(&tiny(Variant::Hard, 2)).unwrap();
        let f = forward_soft(&m, &[5], &[5]).unwrap();
        assert!(f.loss.is_finite());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(forward_hard(&m, &[5], &[5], &mut rng, 1.0).unwrap().loss.is_finite());
        assert_eq!(predict(&m, &[5]).unwrap().len(), 1);
    }

    #[test]
    fn delta_pcfg_soft_equals_fixed_matrix() {
        let m = Model::init(&tiny(Variant::Soft, 3)).unwrap();
        let tree = PermTree::straight(
            PermTree::inverted(PermTree::Leaf(0), PermTree::Leaf(1)),
            PermTree::inverted(PermTree::Leaf(2), PermTree::straight(PermTree::Leaf(3), PermTree::Leaf(4))),
        );
        let rules = tree.rules();
        let w = RuleWeightChart::from_fn(5, |i, j, k, o| if rules.contains(&(i, j, k, o)) { 0.3 } else { f64::NEG_INFINITY });
        let tokens = [1, 10, 2, 12, 3];
        let gold = [10, 1, 3, 12, 2];
        let soft = m.forward_with(&tokens, &gold, Reorder::Marginal, Scores::Given(&w)).unwrap();
        let dense = tree_to_dense(&tree);
        let fixed = m.forward_with(&tokens, &gold, Reorder::Fixed(&dense), Scores::Scorer).unwrap();
        assert!((soft.loss - fixed.loss).abs() <= 1e-12, "{} vs {}", soft.loss, fixed.loss);
        let zero = GumbelNoise(vec![0.0; w.layout().num_rules()]);
        let hard = m.forward_with(&tokens, &gold, Reorder::Hard { noise: &zero, temperature: 1.0 }, Scores::Given(&w)).unwrap();
        assert!((hard.loss - fixed.loss).abs() <= 1e-12);
    }

    #[test]
    fn hard_forward_with_zero_noise_uses_greedy_derivation() {
        // on a peaked chart the greedy and MAP derivations agree
        let m = Model::init(&tiny(Variant::Hard, 4)).unwrap();
        let tokens = [14, 1, 10, 9, 15];
        let gold = tokens;
        let zero = GumbelNoise::zeros(&ChartLayout::new(5));
        let hard = forward_hard_with_noise(&m, &tokens, &gold, &zero, 0.5).unwrap();
        let chart = score_rules(m.scorer(), &tokens).unwrap();
        let g = crate::btg::wcfg_to_pcfg(&chart, &chart.inside());
        let (tree, _) = crate::inference::greedy_derivation(&g);
        let fixed = m.forward_with(&tokens, &gold, Reorder::Fixed(&tree_to_dense(&tree)), Scores::Scorer).unwrap();
        assert!((hard.loss - fixed.loss).abs() < 1e-12);
        // one-hot rows: each reordered row is an exact embedding row
        for r in 0..5 {
            let s: f64 = hard.probs.row(r).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        for (n, seed) in [(1, 0), (2, 1), (5, 2), (8, 3)] {
            let rep = pipeline_gradcheck(n, seed).unwrap();
            assert!(rep.max_rel_error() <= 1e-4, "n={n}: {rep:?}");
        }
    }

    #[test]
    fn baseline_gradients_match_finite_differences() {
        let m = Model::init(&tiny(Variant::IdentityBaseline, 7)).unwrap();
        let tokens = tokenize("( 1 + 2 )").unwrap();
        let gold = tokenize("( 1 2 + )").unwrap();
        let (_, grads) = m.loss_and_gradients(&tokens, &gold, Reorder::Identity).unwrap();
        let analytic = m.flatten_gradients(&grads);
        let mut probe = m.clone();
        let f = |x: &[f64]| {
            probe.set_flat(x);
            probe.forward_with(&tokens, &gold, Reorder::Identity, Scores::Scorer).unwrap().loss
        };
        let rep = finite_diff_check_with(f, &m.flatten(), &analytic, EXTRAPOLATED_STEP, Stencil::FivePoint).unwrap();
        assert!(rep.max_rel_error <= 1e-4, "{rep:?}");
    }

    #[test]
    fn identity_model_echoes_after_training_on_copies() {
        let data: Vec<ArithExample> = gen_arith(40, 1, 2, 0)
            .unwrap()
            .into_iter()
            .map(|e| ArithExample { postfix: e.infix.clone(), ..e })
            .collect();
        let mut c = tiny(Variant::IdentityBaseline, 0);
        c.tagger.encoder_hidden = None;
        c.learning_rate = 0.05;
        c.epochs = 20;
        c.batch_size = 8;
        let out = train(&c, &data, &data).unwrap();
        assert_eq!(evaluate(&out.model, &data).unwrap(), 1.0);
        assert_eq!(predict(&out.model, &data[0].infix).unwrap(), data[0].infix);
    }

    #[test]
    fn zero_learning_rate_leaves_parameters() {
        let data = gen_arith(10, 1, 1, 0).unwrap();
        let mut c = tiny(Variant::Soft, 9);
        c.learning_rate = 0.0;
        c.epochs = 2;
        let out = train(&c, &data, &data).unwrap();
        assert_eq!(out.model.flatten(), Model::init(&c).unwrap().flatten());
        assert_eq!(out.history.len(), 4);
        assert!(matches!(train(&c, &[], &data), Err(Error::EmptyDataset)));
    }

    #[test]
    fn training_is_seed_deterministic() {
        let data = gen_arith(24, 1, 2, 4).unwrap();
        let mut c = tiny(Variant::Hard, 11);
        c.epochs = 2;
        c.batch_size = 8;
        let a = train(&c, &data, &data).unwrap();
        let b = train(&c, &data, &data).unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(a.model, b.model);
    }

    #[test]
    fn checkpoint_roundtrip() {
        let c = tiny(Variant::Soft, 12);
        let m = Model::init(&c).unwrap();
        let dir = std::env::temp_dir().join(format!("btgperm-model-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("ck.json");
        m.save(&path, &c).unwrap();
        let (back, c2) = Model::load(&path).unwrap();
        assert_eq!(c2, c);
        assert_eq!(back, m);
        std::fs::remove_dir_all(dir).ok();
    }
}
