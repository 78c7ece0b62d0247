//! The rule scorer: token embeddings, a bidirectional GRU, boundary-difference
//! span embeddings and an MLP that emits a Straight and an Inverted log-weight
//! for every anchored rule.
//!
//! The MLP's first layer is split into a left-span and a right-span block so
//! that it can be applied once per span rather than once per rule:
//! `hidden(i, j, k) = tanh(W_l s(i, j) + W_r s(j, k) + b)`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::btg::{ChartLayout, RuleWeightChart};
use crate::error::{Error, Result};
use crate::grad::{ParamGroup, Tape, Var};
use crate::matrix::Matrix;
use crate::params::ParamStore;
use crate::rnn::BiGru;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScorerConfig {
    pub vocab: usize,
    #[serde(default = "default_embed")]
    pub embed_dim: usize,
    #[serde(default = "default_hidden")]
    pub hidden: usize,
    #[serde(default = "default_mlp")]
    pub mlp_hidden: usize,
}

fn default_embed() -> usize {
    32
}
fn default_hidden() -> usize {
    64
}
fn default_mlp() -> usize {
    64
}

impl ScorerConfig {
    pub fn new(vocab: usize) -> Self {
        Self { vocab, embed_dim: default_embed(), hidden: default_hidden(), mlp_hidden: default_mlp() }
    }

    /// Width of a span embedding.
    pub fn span_dim(&self) -> usize {
        2 * self.hidden
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Slots {
    embed: usize,
    rnn: BiGru,
    w_left: usize,
    w_right: usize,
    b_hidden: usize,
    w_out: usize,
    b_out: usize,
}

/// Parameters of the reordering side. Disjoint from the tagger's by construction.
#[derive(Clone, Debug, PartialEq)]
pub struct ScorerParams {
    config: ScorerConfig,
    store: ParamStore,
    slots: Slots,
}

/// Forward and backward GRU states of one sentence, each `n × h`.
#[derive(Clone, Debug, PartialEq)]
pub struct Encodings {
    pub forward: Matrix,
    pub backward: Matrix,
}

impl Encodings {
    pub fn len(&self) -> usize {
        self.forward.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `[f(k−1) − f(i−1) ∥ b(i) − b(k)]` with `f(−1) = b(n) = 0`.
    pub fn span_embedding(&self, i: usize, k: usize) -> Result<Vec<f64>> {
        let n = self.len();
        if i >= k || k > n {
            return Err(Error::DegenerateSpan { i, k });
        }
        let h = self.forward.cols();
        let zero = vec![0.0; h];
        let f_end = self.forward.row(k - 1);
        let f_start = if i == 0 { &zero[..] } else { self.forward.row(i - 1) };
        let b_start = self.backward.row(i);
        let b_end = if k == n { &zero[..] } else { self.backward.row(k) };
        let mut out = Vec::with_capacity(2 * h);
        out.extend(f_end.iter().zip(f_start).map(|(a, b)| a - b));
        out.extend(b_start.iter().zip(b_end).map(|(a, b)| a - b));
        Ok(out)
    }

    /// `n × 2h` matrix of `[forward ∥ backward]` rows.
    pub fn concatenated(&self) -> Matrix {
        let (n, h) = self.forward.shape();
        let mut m = Matrix::zeros(n, 2 * h);
        m.set_block(0, 0, &self.forward);
        m.set_block(0, h, &self.backward);
        m
    }
}

impl ScorerParams {
    pub fn init(config: ScorerConfig, rng: &mut impl Rng) -> Self {
        let mut store = ParamStore::new(ParamGroup::Scorer);
        let (d, h, m) = (config.embed_dim, config.hidden, config.mlp_hidden);
        let embed = store.add_uniform("embed", config.vocab, d, 1, rng);
        let rnn = BiGru::init(&mut store, "rnn", d, h, rng);
        let span = config.span_dim();
        let w_left = store.add_uniform("mlp.w_left", span, m, 2 * span, rng);
        let w_right = store.add_uniform("mlp.w_right", span, m, 2 * span, rng);
        let b_hidden = store.add_zeros("mlp.b_hidden", 1, m);
        let w_out = store.add_uniform("mlp.w_out", m, 2, m, rng);
        let b_out = store.add_zeros("mlp.b_out", 1, 2);
        let slots = Slots { embed, rnn, w_left, w_right, b_hidden, w_out, b_out };
        Self { config, store, slots }
    }

    pub fn config(&self) -> &ScorerConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        match tokens.iter().find(|&&t| t >= self.config.vocab) {
            Some(&id) => Err(Error::OutOfVocabulary { id, vocab: self.config.vocab }),
            None => Ok(()),
        }
    }

    /// Records the encoder and returns padded state matrices `F` and `B`,
    /// each `(n+1) × h`, with `F[t] = f(t−1)`, `F[0] = 0`, `B[t] = b(t)`, `B[n] = 0`.
    fn record_states(&self, tape: &mut Tape, p: &[Var], tokens: &[usize]) -> (Var, Var) {
        let h = self.config.hidden;
        let x = tape.gather(p[self.slots.embed], tokens.to_vec());
        let states = self.slots.rnn.run(tape, p, x);
        let zero = tape.constant(Matrix::zeros(1, h));
        let mut f = vec![zero];
        f.extend(states.forward);
        let mut b = states.backward;
        b.push(zero);
        (tape.stack_rows(f), tape.stack_rows(b))
    }

    /// Records the full scorer and returns the rule log-weights as a
    /// `num_rules × 1` column in chart storage order.
    pub fn record(&self, tape: &mut Tape, p: &[Var], tokens: &[usize]) -> Result<Var> {
        self.check_tokens(tokens)?;
        let n = tokens.len();
        let layout = ChartLayout::new(n);
        if n < 2 {
            return Ok(tape.constant(Matrix::zeros(0, 1)));
        }
        let (f, b) = self.record_states(tape, p, tokens);

        // span (i,k) embeds as Z[k] − Z[i] with Z = [F ∥ −B], so its first-layer
        // projection is a difference of per-boundary projections
        let zero = tape.constant(Matrix::zeros(n + 1, self.config.hidden));
        let neg_b = tape.sub(zero, b);
        let z = tape.concat_cols(vec![f, neg_b]);
        let zl = tape.matmul(z, p[self.slots.w_left]);
        let zr = tape.matmul(z, p[self.slots.w_right]);
        let q = tape.sub(zl, zr);
        let triples = layout.num_triples();
        let (mut is, mut js, mut ks) = (Vec::with_capacity(triples), Vec::with_capacity(triples), Vec::with_capacity(triples));
        for (i, k) in layout.binary_spans() {
            for j in i + 1..k {
                is.push(i);
                js.push(j);
                ks.push(k);
            }
        }
        // W_l(Z[j] − Z[i]) + W_r(Z[k] − Z[j]) = Q[j] − ZL[i] + ZR[k]
        let qj = tape.gather(q, js);
        let zli = tape.gather(zl, is);
        let zrk = tape.gather(zr, ks);
        let pre = tape.sub(qj, zli);
        let pre = tape.add(pre, zrk);
        let pre = tape.add_row(pre, p[self.slots.b_hidden]);
        let hidden = tape.tanh(pre);
        let out = tape.matmul(hidden, p[self.slots.w_out]);
        let out = tape.add_row(out, p[self.slots.b_out]);
        // triples × (S, I) row-major is exactly rule storage order
        Ok(tape.reshape(out, layout.num_rules(), 1))
    }
}

/// Position encodings of `tokens`.
pub fn encode(params: &ScorerParams, tokens: &[usize]) -> Result<Encodings> {
    params.check_tokens(tokens)?;
    let mut tape = Tape::new();
    let p = params.store.bind(&mut tape);
    let x = tape.gather(p[params.slots.embed], tokens.to_vec());
    let states = params.slots.rnn.run(&mut tape, &p, x);
    let f = tape.stack_rows(states.forward);
    let b = tape.stack_rows(states.backward);
    Ok(Encodings { forward: tape.value(f).clone(), backward: tape.value(b).clone() })
}

pub fn span_embedding(enc: &Encodings, i: usize, k: usize) -> Result<Vec<f64>> {
    enc.span_embedding(i, k)
}

/// Rule log-weights for every anchored rule of `tokens`.
pub fn score_rules(params: &ScorerParams, tokens: &[usize]) -> Result<RuleWeightChart> {
    let mut tape = Tape::new();
    let p = params.store.bind(&mut tape);
    let logf = params.record(&mut tape, &p, tokens)?;
    RuleWeightChart::from_flat(tokens.len(), tape.value(logf).as_slice().to_vec())
}
