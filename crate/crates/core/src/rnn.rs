//! Single-layer bidirectional GRU recorded on a tape.

use rand::Rng;

use crate::grad::{Tape, Var};
use crate::matrix::Matrix;
use crate::params::ParamStore;

/// Indices of one GRU direction's tensors inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct GruSlots {
    /// input projection, `d × 3h` (update, reset, candidate)
    wx: usize,
    bx: usize,
    /// recurrent update/reset weights, `h × 2h`
    uzr: usize,
    /// recurrent candidate weights, `h × h`
    uh: usize,
    hidden: usize,
}

impl GruSlots {
    pub(crate) fn init(store: &mut ParamStore, prefix: &str, input: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let wx = store.add_uniform(&format!("{prefix}.wx"), input, 3 * hidden, hidden, rng);
        let bx = store.add_zeros(&format!("{prefix}.bx"), 1, 3 * hidden);
        let uzr = store.add_uniform(&format!("{prefix}.uzr"), hidden, 2 * hidden, hidden, rng);
        let uh = store.add_uniform(&format!("{prefix}.uh"), hidden, hidden, hidden, rng);
        Self { wx, bx, uzr, uh, hidden }
    }

    /// Runs over the rows of `x` in the given order and returns the hidden
    /// state after each step, one `1×h` handle per input position (indexed by
    /// position, not by step).
    fn run(&self, tape: &mut Tape, p: &[Var], x: Var, reverse: bool) -> Vec<Var> {
        let h = self.hidden;
        let n = tape.value(x).rows();
        let proj = tape.matmul(x, p[self.wx]);
        let proj = tape.add_row(proj, p[self.bx]);
        let mut state = tape.constant(Matrix::zeros(1, h));
        let mut out = vec![state; n];
        let order: Vec<usize> = if reverse { (0..n).rev().collect() } else { (0..n).collect() };
        for t in order {
            let xt = tape.gather(proj, vec![t]);
            let xz = tape.slice_cols(xt, 0, h);
            let xr = tape.slice_cols(xt, h, h);
            let xc = tape.slice_cols(xt, 2 * h, h);
            let hzr = tape.matmul(state, p[self.uzr]);
            let hz = tape.slice_cols(hzr, 0, h);
            let hr = tape.slice_cols(hzr, h, h);
            let z = tape.add(xz, hz);
            let z = tape.sigmoid(z);
            let r = tape.add(xr, hr);
            let r = tape.sigmoid(r);
            let rh = tape.mul(r, state);
            let hc = tape.matmul(rh, p[self.uh]);
            let c = tape.add(xc, hc);
            let c = tape.tanh(c);
            let delta = tape.sub(c, state);
            let step = tape.mul(z, delta);
            state = tape.add(state, step);
            out[t] = state;
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct BiGru {
    pub(crate) forward: GruSlots,
    pub(crate) backward: GruSlots,
}

/// Per-position forward and backward hidden states, each `n × h`.
pub(crate) struct BiStates {
    pub(crate) forward: Vec<Var>,
    pub(crate) backward: Vec<Var>,
}

impl BiGru {
    pub(crate) fn init(store: &mut ParamStore, prefix: &str, input: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let forward = GruSlots::init(store, &format!("{prefix}.fwd"), input, hidden, rng);
        let backward = GruSlots::init(store, &format!("{prefix}.bwd"), input, hidden, rng);
        Self { forward, backward }
    }

    pub(crate) fn hidden(&self) -> usize {
        self.forward.hidden
    }

    pub(crate) fn run(&self, tape: &mut Tape, p: &[Var], x: Var) -> BiStates {
        BiStates { forward: self.forward.run(tape, p, x, false), backward: self.backward.run(tape, p, x, true) }
    }

    /// `n × 2h` matrix of `[forward_t ∥ backward_t]` rows.
    pub(crate) fn run_concat(&self, tape: &mut Tape, p: &[Var], x: Var) -> Var {
        let states = self.run(tape, p, x);
        let f = tape.stack_rows(states.forward);
        let b = tape.stack_rows(states.backward);
        tape.concat_cols(vec![f, b])
    }
}
