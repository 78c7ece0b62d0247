//! A Wengert tape over a small, fixed set of primitives.
//!
//! Each forward call records its output value and enough saved state to run
//! its adjoint rule. Besides the usual dense primitives the tape knows the
//! structured ones used by the reordering pipeline: the inside recursion, the
//! PCFG renormalisation, per-span tempered softmax selection and the
//! permutation-matrix chart accumulation.

use std::collections::BTreeMap;

use crate::btg::{log_sum_exp, ChartLayout};
use crate::error::{Error, Result};
use crate::inference::{accumulate_spans, accumulate_spans_backward, span_selections};
use crate::matrix::Matrix;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Which parameter set a tensor belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamGroup {
    Scorer,
    Tagger,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId {
    pub group: ParamGroup,
    pub index: usize,
}

enum Op {
    Const,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    Sum(Var),
    Gather(Var, Vec<usize>),
    StackRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    Reshape(Var),
    StraightThrough(Var),
    Inside { logf: Var, layout: ChartLayout },
    Renormalize { logf: Var, logbeta: Var, layout: ChartLayout },
    SpanSelect { logits: Var, layout: ChartLayout, relaxed: Vec<f64>, temperature: f64 },
    ChartAccumulate { weights: Var, layout: ChartLayout, spans: Vec<Matrix> },
    SoftmaxXent { logits: Var, targets: Vec<usize>, probs: Matrix },
}

struct Node {
    value: Matrix,
    op: Op,
}

/// Records a forward pass. One tape per forward; not shared across threads.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Tape::backward`].
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    params: BTreeMap<ParamId, Matrix>,
    vars: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn param(&self, id: ParamId) -> Option<&Matrix> {
        self.params.get(&id)
    }

    pub fn params(&self) -> &BTreeMap<ParamId, Matrix> {
        &self.params
    }

    pub fn into_params(self) -> BTreeMap<ParamId, Matrix> {
        self.params
    }

    /// Adjoint of an arbitrary recorded value, if anything flowed into it.
    pub fn var(&self, v: Var) -> Option<&Matrix> {
        self.vars.get(v.0).and_then(Option::as_ref)
    }
}

fn accumulate(slot: &mut Option<Matrix>, delta: Matrix) {
    match slot {
        Some(m) => m.add_assign(&delta),
        None => *slot = Some(delta),
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        assert_eq!(m.shape(), (1, 1), "not a scalar");
        m[(0, 0)]
    }

    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Const)
    }

    pub fn param(&mut self, id: ParamId, value: &Matrix) -> Var {
        self.push(value.clone(), Op::Param(id))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut v = self.value(a).clone();
        v.add_assign(self.value(b));
        self.push(v, Op::Add(a, b))
    }

    /// `a + 1·row`, broadcasting a `1×c` row over every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let r = self.value(row);
        assert_eq!(r.rows(), 1, "add_row expects a row vector");
        assert_eq!(r.cols(), self.value(a).cols(), "add_row width mismatch");
        let mut v = self.value(a).clone();
        let bias = r.as_slice().to_vec();
        for i in 0..v.rows() {
            for (x, b) in v.row_mut(i).iter_mut().zip(&bias) {
                *x += b;
            }
        }
        self.push(v, Op::AddRow(a, row))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.shape(), y.shape(), "sub shape mismatch");
        let v = Matrix::from_vec(x.rows(), x.cols(), x.as_slice().iter().zip(y.as_slice()).map(|(p, q)| p - q).collect());
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.shape(), y.shape(), "mul shape mismatch");
        let v = Matrix::from_vec(x.rows(), x.cols(), x.as_slice().iter().zip(y.as_slice()).map(|(p, q)| p * q).collect());
        self.push(v, Op::Mul(a, b))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        self.push(v, Op::Sigmoid(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::exp);
        self.push(v, Op::Exp(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Matrix::from_vec(1, 1, vec![self.value(a).sum()]);
        self.push(v, Op::Sum(a))
    }

    /// Rows `idx[0], idx[1], …` of `a`, stacked.
    pub fn gather(&mut self, a: Var, idx: Vec<usize>) -> Var {
        let src = self.value(a);
        let mut v = Matrix::zeros(idx.len(), src.cols());
        for (r, &i) in idx.iter().enumerate() {
            v.row_mut(r).copy_from_slice(src.row(i));
        }
        self.push(v, Op::Gather(a, idx))
    }

    pub fn stack_rows(&mut self, rows: Vec<Var>) -> Var {
        let cols = rows.first().map_or(0, |&r| self.value(r).cols());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for &r in &rows {
            let m = self.value(r);
            assert_eq!(m.shape(), (1, cols), "stack_rows expects equal-width row vectors");
            data.extend_from_slice(m.as_slice());
        }
        let v = Matrix::from_vec(rows.len(), cols, data);
        self.push(v, Op::StackRows(rows))
    }

    pub fn concat_cols(&mut self, parts: Vec<Var>) -> Var {
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut v = Matrix::zeros(rows, cols);
        let mut c0 = 0;
        for &p in &parts {
            let m = self.value(p);
            assert_eq!(m.rows(), rows, "concat_cols row mismatch");
            v.set_block(0, c0, m);
            c0 += m.cols();
        }
        self.push(v, Op::ConcatCols(parts))
    }

    /// Columns `start..start + len` of `a`.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let src = self.value(a);
        let mut v = Matrix::zeros(src.rows(), len);
        for r in 0..src.rows() {
            v.row_mut(r).copy_from_slice(&src.row(r)[start..start + len]);
        }
        self.push(v, Op::SliceCols(a, start))
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let v = self.value(a).clone().reshaped(rows, cols);
        self.push(v, Op::Reshape(a))
    }

    /// Records `forward` as the value while the adjoint passes to `a` unchanged.
    pub fn straight_through(&mut self, forward: Matrix, a: Var) -> Var {
        assert_eq!(forward.shape(), self.value(a).shape(), "straight_through: shape mismatch");
        self.push(forward, Op::StraightThrough(a))
    }

    /// Inside log-scores of every span (`num_spans × 1`) from rule log-weights
    /// (`num_rules × 1`), by log-sum-exp.
    pub fn inside(&mut self, logf: Var, layout: &ChartLayout) -> Var {
        let f = self.value(logf).as_slice();
        assert_eq!(f.len(), layout.num_rules(), "inside: rule count mismatch");
        let mut logbeta = vec![0.0; layout.num_spans()];
        let mut terms = Vec::new();
        for (i, k) in layout.binary_spans() {
            terms.clear();
            let base = layout.span_rules_start(i, k);
            for j in i + 1..k {
                let c = logbeta[layout.span_index(i, j)] + logbeta[layout.span_index(j, k)];
                let r = base + 2 * (j - i - 1);
                terms.push(f[r] + c);
                terms.push(f[r + 1] + c);
            }
            logbeta[layout.span_index(i, k)] = log_sum_exp(terms.iter().copied());
        }
        let v = Matrix::from_vec(layout.num_spans(), 1, logbeta);
        self.push(v, Op::Inside { logf, layout: layout.clone() })
    }

    /// `log G(R) = log f(R) + log β[left] + log β[right] − log β[parent]`.
    pub fn renormalize(&mut self, logf: Var, logbeta: Var, layout: &ChartLayout) -> Var {
        let (f, b) = (self.value(logf).as_slice(), self.value(logbeta).as_slice());
        let v: Vec<f64> = layout
            .rules()
            .zip(f)
            .map(|((i, j, k, _), &lf)| {
                let parent = b[layout.span_index(i, k)];
                if parent == f64::NEG_INFINITY {
                    return f64::NEG_INFINITY;
                }
                lf + b[layout.span_index(i, j)] + b[layout.span_index(j, k)] - parent
            })
            .collect();
        let v = Matrix::from_vec(layout.num_rules(), 1, v);
        self.push(v, Op::Renormalize { logf, logbeta, layout: layout.clone() })
    }

    /// Per-span selection weights from rule logits: the tempered softmax of
    /// `(logits + noise) / τ`. With `straight_through` the recorded value is
    /// the per-span argmax one-hot while the adjoint rule stays the softmax's.
    pub fn span_select(
        &mut self,
        logits: Var,
        noise: &[f64],
        temperature: f64,
        straight_through: bool,
        layout: &ChartLayout,
    ) -> Var {
        let (relaxed, hard) = span_selections(layout, self.value(logits).as_slice(), noise, temperature);
        let value = if straight_through { hard } else { relaxed.clone() };
        let v = Matrix::from_vec(layout.num_rules(), 1, value);
        self.push(v, Op::SpanSelect { logits, layout: layout.clone(), relaxed, temperature })
    }

    /// Root matrix of the chart accumulation `E[i][k] = Σ w(R)·(E[i][j] ⊕/⊖ E[j][k])`.
    pub fn chart_accumulate(&mut self, weights: Var, layout: &ChartLayout) -> Var {
        let n = layout.n();
        let spans = accumulate_spans(layout, self.value(weights).as_slice());
        let root = spans[layout.span_index(0, n)].clone();
        self.push(root, Op::ChartAccumulate { weights, layout: layout.clone(), spans })
    }

    /// Mean over rows of `−log softmax(logits[r])[targets[r]]`.
    pub fn softmax_xent(&mut self, logits: Var, targets: Vec<usize>) -> Var {
        let l = self.value(logits);
        assert_eq!(l.rows(), targets.len(), "one target per row");
        let mut probs = Matrix::zeros(l.rows(), l.cols());
        let mut loss = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            let row = l.row(r);
            let lse = log_sum_exp(row.iter().copied());
            for (p, &x) in probs.row_mut(r).iter_mut().zip(row) {
                *p = (x - lse).exp();
            }
            loss -= row[t] - lse;
        }
        let v = Matrix::from_vec(1, 1, vec![loss / targets.len().max(1) as f64]);
        self.push(v, Op::SoftmaxXent { logits, targets, probs })
    }

    /// Reverse sweep from `output`, seeded with `seed · 1`.
    pub fn backward(&self, output: Var, seed: f64) -> Result<Gradients> {
        if self.nodes.is_empty() {
            return Err(Error::EmptyTape);
        }
        let mut adj: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        let out = &self.nodes[output.0].value;
        adj[output.0] = Some(Matrix::filled(out.rows(), out.cols(), seed));
        let mut params = BTreeMap::new();

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if let Op::Param(id) = node.op {
                let g = adj[idx].clone().unwrap_or_else(|| Matrix::zeros(node.value.rows(), node.value.cols()));
                match params.get_mut(&id) {
                    None => {
                        params.insert(id, g);
                    }
                    Some(acc) => Matrix::add_assign(acc, &g),
                }
                continue;
            }
            let Some(d) = adj[idx].take() else { continue };
            self.propagate(idx, &d, &mut adj);
            adj[idx] = Some(d);
        }
        Ok(Gradients { params, vars: adj })
    }

    fn propagate(&self, idx: usize, d: &Matrix, adj: &mut [Option<Matrix>]) {
        let node = &self.nodes[idx];
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Const | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                accumulate(&mut adj[a.0], d.matmul_t(val(*b)));
                accumulate(&mut adj[b.0], val(*a).t_matmul(d));
            }
            Op::Add(a, b) => {
                accumulate(&mut adj[a.0], d.clone());
                accumulate(&mut adj[b.0], d.clone());
            }
            Op::AddRow(a, row) => {
                accumulate(&mut adj[a.0], d.clone());
                let sums = d.col_sums();
                accumulate(&mut adj[row.0], Matrix::from_vec(1, sums.len(), sums));
            }
            Op::Sub(a, b) => {
                accumulate(&mut adj[a.0], d.clone());
                accumulate(&mut adj[b.0], d.map(|x| -x));
            }
            Op::Mul(a, b) => {
                let (x, y) = (val(*a), val(*b));
                let dx = zip_map(d, y, |g, q| g * q);
                let dy = zip_map(d, x, |g, p| g * p);
                accumulate(&mut adj[a.0], dx);
                accumulate(&mut adj[b.0], dy);
            }
            Op::Tanh(a) => accumulate(&mut adj[a.0], zip_map(d, &node.value, |g, t| g * (1.0 - t * t))),
            Op::Sigmoid(a) => accumulate(&mut adj[a.0], zip_map(d, &node.value, |g, s| g * s * (1.0 - s))),
            Op::Exp(a) => accumulate(&mut adj[a.0], zip_map(d, &node.value, |g, e| if e == 0.0 { 0.0 } else { g * e })),
            Op::Sum(a) => {
                let x = val(*a);
                accumulate(&mut adj[a.0], Matrix::filled(x.rows(), x.cols(), d[(0, 0)]));
            }
            Op::Gather(a, rows) => {
                let src = val(*a);
                let mut g = Matrix::zeros(src.rows(), src.cols());
                for (r, &i) in rows.iter().enumerate() {
                    for (x, y) in g.row_mut(i).iter_mut().zip(d.row(r)) {
                        *x += y;
                    }
                }
                accumulate(&mut adj[a.0], g);
            }
            Op::StackRows(rows) => {
                for (r, v) in rows.iter().enumerate() {
                    accumulate(&mut adj[v.0], Matrix::from_vec(1, d.cols(), d.row(r).to_vec()));
                }
            }
            Op::ConcatCols(parts) => {
                let mut c0 = 0;
                for p in parts {
                    let (rows, cols) = val(*p).shape();
                    let mut g = Matrix::zeros(rows, cols);
                    d.add_window_to(0, c0, &mut g, 1.0);
                    accumulate(&mut adj[p.0], g);
                    c0 += cols;
                }
            }
            Op::SliceCols(a, start) => {
                let (rows, cols) = val(*a).shape();
                let mut g = Matrix::zeros(rows, cols);
                g.add_block(0, *start, d, 1.0);
                accumulate(&mut adj[a.0], g);
            }
            Op::Reshape(a) => {
                let (rows, cols) = val(*a).shape();
                accumulate(&mut adj[a.0], d.clone().reshaped(rows, cols));
            }
            Op::StraightThrough(a) => accumulate(&mut adj[a.0], d.clone()),
            Op::Inside { logf, layout } => {
                let f = val(*logf).as_slice();
                let b = node.value.as_slice();
                let mut db = d.as_slice().to_vec();
                let mut df = vec![0.0; f.len()];
                let spans: Vec<(usize, usize)> = layout.binary_spans().collect();
                for &(i, k) in spans.iter().rev() {
                    let s = layout.span_index(i, k);
                    let g = db[s];
                    if g == 0.0 || b[s] == f64::NEG_INFINITY {
                        continue;
                    }
                    let base = layout.span_rules_start(i, k);
                    for j in i + 1..k {
                        let (ls, rs) = (layout.span_index(i, j), layout.span_index(j, k));
                        for o in 0..2 {
                            let r = base + 2 * (j - i - 1) + o;
                            let post = (f[r] + b[ls] + b[rs] - b[s]).exp();
                            df[r] += g * post;
                            db[ls] += g * post;
                            db[rs] += g * post;
                        }
                    }
                }
                accumulate(&mut adj[logf.0], Matrix::from_vec(df.len(), 1, df));
            }
            Op::Renormalize { logf, logbeta, layout } => {
                let mut db = vec![0.0; layout.num_spans()];
                let mut df = d.clone();
                for (r, (i, j, k, _)) in layout.rules().enumerate() {
                    if node.value.as_slice()[r] == f64::NEG_INFINITY {
                        df.as_mut_slice()[r] = 0.0;
                        continue;
                    }
                    let g = d.as_slice()[r];
                    db[layout.span_index(i, j)] += g;
                    db[layout.span_index(j, k)] += g;
                    db[layout.span_index(i, k)] -= g;
                }
                accumulate(&mut adj[logf.0], df);
                accumulate(&mut adj[logbeta.0], Matrix::from_vec(db.len(), 1, db));
            }
            Op::SpanSelect { logits, layout, relaxed, temperature } => {
                let mut dl = vec![0.0; layout.num_rules()];
                for (i, k) in layout.binary_spans() {
                    let start = layout.span_rules_start(i, k);
                    let range = start..start + 2 * (k - i - 1);
                    let inner: f64 = range.clone().map(|r| d.as_slice()[r] * relaxed[r]).sum();
                    for r in range {
                        dl[r] = relaxed[r] * (d.as_slice()[r] - inner) / temperature;
                    }
                }
                accumulate(&mut adj[logits.0], Matrix::from_vec(dl.len(), 1, dl));
            }
            Op::ChartAccumulate { weights, layout, spans } => {
                let w = val(*weights).as_slice();
                let dw = accumulate_spans_backward(layout, w, spans, d);
                accumulate(&mut adj[weights.0], Matrix::from_vec(dw.len(), 1, dw));
            }
            Op::SoftmaxXent { logits, targets, probs } => {
                let scale = d[(0, 0)] / targets.len().max(1) as f64;
                let mut g = probs.clone();
                for (r, &t) in targets.iter().enumerate() {
                    g[(r, t)] -= 1.0;
                }
                g.scale(scale);
                accumulate(&mut adj[logits.0], g);
            }
        }
    }
}

fn zip_map(a: &Matrix, b: &Matrix, f: impl Fn(f64, f64) -> f64) -> Matrix {
    assert_eq!(a.shape(), b.shape());
    Matrix::from_vec(a.rows(), a.cols(), a.as_slice().iter().zip(b.as_slice()).map(|(&x, &y)| f(x, y)).collect())
}
