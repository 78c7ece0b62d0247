//! Anchored bracketing transduction grammar: rule weights, inside scores and
//! the conversion of a weighted grammar into a locally normalized one.
//!
//! Every chart over a sentence of length `n` shares one dense layout. Spans
//! `[i, k)` are ordered by width, then start. Binary rules `(i, j, k, o)` are
//! ordered by width, start, split point and orientation, so the rules of one
//! span occupy a contiguous block of `2 (k − i − 1)` entries and all charts
//! can be swept bottom-up by walking memory forwards.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::perm::{Orientation, PermTree};

/// Stable `log Σ exp(x)`. Returns `-∞` for an empty or all `-∞` input.
pub fn log_sum_exp(xs: impl IntoIterator<Item = f64> + Clone) -> f64 {
    let max = xs.clone().into_iter().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if max == f64::INFINITY {
        return f64::INFINITY;
    }
    max + xs.into_iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Index arithmetic shared by all charts over one sentence length.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ChartLayout {
    n: usize,
    // first span index of each width, indexed by width (entry 0 unused)
    width_offsets: Vec<usize>,
    // first rule index of each span, indexed by span index
    rule_offsets: Vec<usize>,
    num_rules: usize,
}

impl ChartLayout {
    pub fn new(n: usize) -> Self {
        let mut width_offsets = vec![0; n + 2];
        let mut acc = 0;
        for w in 1..=n {
            width_offsets[w] = acc;
            acc += n - w + 1;
        }
        width_offsets[n + 1] = acc;
        let mut rule_offsets = Vec::with_capacity(acc);
        let mut rules = 0;
        for w in 1..=n {
            for _ in 0..=n - w {
                rule_offsets.push(rules);
                rules += 2 * (w - 1);
            }
        }
        Self { n, width_offsets, rule_offsets, num_rules: rules }
    }

    #[inline]
    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn num_spans(&self) -> usize {
        self.rule_offsets.len()
    }

    #[inline]
    pub fn num_rules(&self) -> usize {
        self.num_rules
    }

    #[inline]
    pub fn span_index(&self, i: usize, k: usize) -> usize {
        debug_assert!(i < k && k <= self.n, "bad span [{i},{k}) for n={}", self.n);
        self.width_offsets[k - i] + i
    }

    /// Inverse of [`ChartLayout::span_index`].
    pub fn span_at(&self, s: usize) -> (usize, usize) {
        let w = (1..=self.n).rev().find(|&w| self.width_offsets[w] <= s).expect("span index in range");
        let i = s - self.width_offsets[w];
        (i, i + w)
    }

    /// Index of the first rule of span `[i, k)`; its rules follow as
    /// `(j = i+1, S), (j = i+1, I), (j = i+2, S), …`.
    #[inline]
    pub fn span_rules_start(&self, i: usize, k: usize) -> usize {
        self.rule_offsets[self.span_index(i, k)]
    }

    #[inline]
    pub fn rule_index(&self, i: usize, j: usize, k: usize, o: Orientation) -> usize {
        debug_assert!(i < j && j < k && k <= self.n, "bad rule ({i},{j},{k})");
        self.span_rules_start(i, k) + 2 * (j - i - 1) + o.index()
    }

    /// `(i, j, k, o)` of a rule index.
    pub fn rule_at(&self, r: usize) -> (usize, usize, usize, Orientation) {
        // width-1 spans own no rules and all sit before the first binary span,
        // so the last span starting at or before `r` is the owner
        let s = self.rule_offsets.partition_point(|&off| off <= r) - 1;
        let (i, k) = self.span_at(s);
        let local = r - self.rule_offsets[s];
        (i, i + 1 + local / 2, k, Orientation::from_index(local % 2))
    }

    /// Spans `[i, k)` with `k − i ≥ 2`, narrowest first.
    pub fn binary_spans(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (2..=self.n).flat_map(move |w| (0..=self.n - w).map(move |i| (i, i + w)))
    }

    /// All rules as `(i, j, k, o)` in storage order.
    pub fn rules(&self) -> impl Iterator<Item = (usize, usize, usize, Orientation)> + '_ {
        self.binary_spans().flat_map(|(i, k)| {
            (i + 1..k).flat_map(move |j| Orientation::BOTH.into_iter().map(move |o| (i, j, k, o)))
        })
    }

    /// Number of `(i, j, k)` triples, i.e. rules per orientation.
    pub fn num_triples(&self) -> usize {
        self.num_rules / 2
    }
}

/// Log-weights `log f(R)` of every anchored binary rule of one sentence.
/// Terminal rules carry weight 1 and are not stored.
#[derive(Clone, Debug, PartialEq)]
pub struct RuleWeightChart {
    layout: ChartLayout,
    logf: Vec<f64>,
}

impl RuleWeightChart {
    /// All weights equal to 1.
    pub fn uniform(n: usize) -> Self {
        let layout = ChartLayout::new(n);
        let logf = vec![0.0; layout.num_rules()];
        Self { layout, logf }
    }

    pub fn from_fn(n: usize, mut f: impl FnMut(usize, usize, usize, Orientation) -> f64) -> Self {
        let layout = ChartLayout::new(n);
        let logf = layout.rules().map(|(i, j, k, o)| f(i, j, k, o)).collect();
        Self { layout, logf }
    }

    /// Log-weights drawn uniformly from `[-scale, scale]`.
    pub fn random(n: usize, scale: f64, rng: &mut impl Rng) -> Self {
        Self::from_fn(n, |_, _, _, _| rng.gen_range(-scale..=scale))
    }

    /// Wraps a flat vector in storage order.
    pub fn from_flat(n: usize, logf: Vec<f64>) -> Result<Self> {
        let layout = ChartLayout::new(n);
        if logf.len() != layout.num_rules() {
            return Err(Error::InvalidChart(format!(
                "expected {} rule weights for n={n}, got {}",
                layout.num_rules(),
                logf.len()
            )));
        }
        Ok(Self { layout, logf })
    }

    #[inline]
    pub fn n(&self) -> usize {
        self.layout.n
    }

    #[inline]
    pub fn layout(&self) -> &ChartLayout {
        &self.layout
    }

    #[inline]
    pub fn logf(&self, i: usize, j: usize, k: usize, o: Orientation) -> f64 {
        self.logf[self.layout.rule_index(i, j, k, o)]
    }

    pub fn set_logf(&mut self, i: usize, j: usize, k: usize, o: Orientation, value: f64) {
        let r = self.layout.rule_index(i, j, k, o);
        self.logf[r] = value;
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.logf
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.logf
    }

    pub fn inside(&self) -> InsideChart {
        inside(self)
    }

    pub fn to_pcfg(&self) -> PcfgChart {
        wcfg_to_pcfg(self, &inside(self))
    }
}

#[derive(Serialize, Deserialize)]
struct RuleEntry {
    i: usize,
    j: usize,
    k: usize,
    o: Orientation,
    logf: f64,
}

#[derive(Serialize, Deserialize)]
struct RuleChartRepr {
    n: usize,
    #[serde(default)]
    rules: Vec<RuleEntry>,
}

impl Serialize for RuleWeightChart {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let rules = self
            .layout
            .rules()
            .zip(&self.logf)
            .map(|((i, j, k, o), &logf)| RuleEntry { i, j, k, o, logf })
            .collect();
        RuleChartRepr { n: self.n(), rules }.serialize(s)
    }
}

impl<'de> Deserialize<'de> for RuleWeightChart {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error as _;
        let repr = RuleChartRepr::deserialize(d)?;
        let mut chart = RuleWeightChart::uniform(repr.n);
        for r in repr.rules {
            if !(r.i < r.j && r.j < r.k && r.k <= repr.n) {
                return Err(D::Error::custom(format!(
                    "rule ({}, {}, {}) outside 0 <= i < j < k <= {}",
                    r.i, r.j, r.k, repr.n
                )));
            }
            if !r.logf.is_finite() {
                return Err(D::Error::custom("rule log-weights must be finite"));
            }
            chart.set_logf(r.i, r.j, r.k, r.o, r.logf);
        }
        Ok(chart)
    }
}

/// Inside log-scores `log β[i][k]`; `log β[0][n]` is the log partition function.
#[derive(Clone, Debug, PartialEq)]
pub struct InsideChart {
    layout: ChartLayout,
    logbeta: Vec<f64>,
}

impl InsideChart {
    #[inline]
    pub fn n(&self) -> usize {
        self.layout.n
    }

    #[inline]
    pub fn logbeta(&self, i: usize, k: usize) -> f64 {
        self.logbeta[self.layout.span_index(i, k)]
    }

    pub fn log_partition(&self) -> f64 {
        if self.n() == 0 {
            return 0.0;
        }
        self.logbeta(0, self.n())
    }

    /// Per-span values in span-index order.
    pub fn as_slice(&self) -> &[f64] {
        &self.logbeta
    }
}

pub fn inside(w: &RuleWeightChart) -> InsideChart {
    let layout = w.layout.clone();
    let mut logbeta = vec![0.0; layout.num_spans()];
    let mut terms = Vec::new();
    for (i, k) in layout.binary_spans() {
        terms.clear();
        let base = layout.span_rules_start(i, k);
        for j in i + 1..k {
            let children = logbeta[layout.span_index(i, j)] + logbeta[layout.span_index(j, k)];
            let r = base + 2 * (j - i - 1);
            terms.push(w.logf[r] + children);
            terms.push(w.logf[r + 1] + children);
        }
        logbeta[layout.span_index(i, k)] = log_sum_exp(terms.iter().copied());
    }
    InsideChart { layout, logbeta }
}

/// Locally normalized rule probabilities `G(R)`.
#[derive(Clone, Debug, PartialEq)]
pub struct PcfgChart {
    layout: ChartLayout,
    logg: Vec<f64>,
    g: Vec<f64>,
}

impl PcfgChart {
    /// Wraps log-probabilities in storage order. Each span's block must sum to 1.
    pub fn from_log_probs(n: usize, logg: Vec<f64>) -> Result<Self> {
        let layout = ChartLayout::new(n);
        if logg.len() != layout.num_rules() {
            return Err(Error::InvalidChart(format!(
                "expected {} rule probabilities for n={n}, got {}",
                layout.num_rules(),
                logg.len()
            )));
        }
        let g: Vec<f64> = logg.iter().map(|x| x.exp()).collect();
        for (i, k) in layout.binary_spans() {
            let start = layout.span_rules_start(i, k);
            let total: f64 = g[start..start + 2 * (k - i - 1)].iter().sum();
            if (total - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidChart(format!("span [{i},{k}) sums to {total}")));
            }
        }
        Ok(Self { layout, logg, g })
    }

    #[inline]
    pub fn n(&self) -> usize {
        self.layout.n
    }

    #[inline]
    pub fn layout(&self) -> &ChartLayout {
        &self.layout
    }

    #[inline]
    pub fn prob(&self, i: usize, j: usize, k: usize, o: Orientation) -> f64 {
        self.g[self.layout.rule_index(i, j, k, o)]
    }

    #[inline]
    pub fn log_prob(&self, i: usize, j: usize, k: usize, o: Orientation) -> f64 {
        self.logg[self.layout.rule_index(i, j, k, o)]
    }

    pub fn probs(&self) -> &[f64] {
        &self.g
    }

    pub fn log_probs(&self) -> &[f64] {
        &self.logg
    }

    /// The categorical over the rules of span `[i, k)`, in storage order.
    pub fn span_probs(&self, i: usize, k: usize) -> &[f64] {
        let start = self.layout.span_rules_start(i, k);
        &self.g[start..start + 2 * (k - i - 1)]
    }

    pub fn span_log_probs(&self, i: usize, k: usize) -> &[f64] {
        let start = self.layout.span_rules_start(i, k);
        &self.logg[start..start + 2 * (k - i - 1)]
    }
}

/// `G(R) = f(R) β[left] β[right] / β[parent]`, evaluated in log space.
pub fn wcfg_to_pcfg(w: &RuleWeightChart, b: &InsideChart) -> PcfgChart {
    let layout = w.layout.clone();
    let logg: Vec<f64> = layout
        .rules()
        .zip(&w.logf)
        .map(|((i, j, k, _), &logf)| {
            let parent = b.logbeta(i, k);
            if parent == f64::NEG_INFINITY {
                return f64::NEG_INFINITY;
            }
            logf + b.logbeta(i, j) + b.logbeta(j, k) - parent
        })
        .collect();
    let g = logg.iter().map(|x| x.exp()).collect();
    PcfgChart { layout, logg, g }
}

fn check_cover(t: &PermTree, n: usize) -> Result<()> {
    let (i, k) = t.validate()?;
    if i != 0 || k != n {
        return Err(Error::SpanMismatch { tree: k - i, chart: n });
    }
    Ok(())
}

/// `Σ log f(R)` over the internal nodes of `t`.
pub fn derivation_logweight(w: &RuleWeightChart, t: &PermTree) -> Result<f64> {
    check_cover(t, w.n())?;
    let mut total = 0.0;
    t.for_each_rule(&mut |i, j, k, o| total += w.logf(i, j, k, o));
    Ok(total)
}

/// `Π G(R)` over the internal nodes of `t`.
pub fn derivation_prob(g: &PcfgChart, t: &PermTree) -> Result<f64> {
    Ok(derivation_log_prob(g, t)?.exp())
}

pub fn derivation_log_prob(g: &PcfgChart, t: &PermTree) -> Result<f64> {
    check_cover(t, g.n())?;
    let mut total = 0.0;
    t.for_each_rule(&mut |i, j, k, o| total += g.log_prob(i, j, k, o));
    Ok(total)
}
