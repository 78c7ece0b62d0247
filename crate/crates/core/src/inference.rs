//! Chart inference over derivations: exact marginal permutation matrices,
//! MAP derivations, exact ancestral sampling and Gumbel perturb-and-MAP
//! sampling with a softmax relaxation.
//!
//! The marginal and the Gumbel sampler share one bottom-up accumulation:
//! every span `[i, k)` gets a matrix `E[i][k] = Σ_R ŵ(R) · (E[i][j] ⊕/⊖ E[j][k])`
//! where `ŵ` is either the rule probability (marginal), a one-hot choice
//! (hard sample) or a tempered softmax (relaxed sample). The accumulation is
//! O(n⁵) time and O(n⁴) memory.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::btg::{ChartLayout, PcfgChart, RuleWeightChart};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::perm::{tree_to_matrix, Orientation, PermMatrix, PermTree};

/// Lower clamp for Gumbel uniforms: `u ∈ (ε, 1 − ε)`.
pub const GUMBEL_EPS: f64 = 1e-10;

/// Default sampling temperature.
pub const DEFAULT_TEMPERATURE: f64 = 1.0;

/// Expected permutation matrix: a point of the Birkhoff polytope.
#[derive(Clone, Debug, PartialEq)]
pub struct ExpectedPerm(pub Matrix);

impl ExpectedPerm {
    pub fn n(&self) -> usize {
        self.0.rows()
    }

    pub fn matrix(&self) -> &Matrix {
        &self.0
    }

    /// Largest deviation of any row or column sum from 1.
    pub fn stochasticity_error(&self) -> f64 {
        self.0.row_sums().into_iter().chain(self.0.col_sums()).map(|s| (s - 1.0).abs()).fold(0.0, f64::max)
    }
}

#[derive(Serialize, Deserialize)]
struct ExpectedPermRepr {
    n: usize,
    rows: Vec<Vec<f64>>,
}

impl Serialize for ExpectedPerm {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        ExpectedPermRepr { n: self.n(), rows: self.0.to_rows() }.serialize(s)
    }
}

impl<'de> Deserialize<'de> for ExpectedPerm {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let repr = ExpectedPermRepr::deserialize(d)?;
        if repr.rows.len() != repr.n || repr.rows.iter().any(|r| r.len() != repr.n) {
            return Err(serde::de::Error::custom("rows must form an n×n matrix"));
        }
        Ok(ExpectedPerm(Matrix::from_rows(&repr.rows)))
    }
}

/// A Gumbel perturb-and-MAP sample with its relaxed counterpart.
#[derive(Clone, Debug)]
pub struct SampledPerm {
    pub hard: PermMatrix,
    pub relaxed: ExpectedPerm,
    pub tree: PermTree,
    pub temperature: f64,
}

/// Adds `weight · (left ⊕ right)` or `weight · (left ⊖ right)` into `target`.
#[inline]
pub(crate) fn add_composed(target: &mut Matrix, left: &Matrix, right: &Matrix, o: Orientation, weight: f64) {
    let (p, q) = (left.rows(), right.rows());
    match o {
        Orientation::Straight => {
            target.add_block(0, 0, left, weight);
            target.add_block(p, p, right, weight);
        }
        Orientation::Inverted => {
            target.add_block(0, p, right, weight);
            target.add_block(q, 0, left, weight);
        }
    }
}

/// Bottom-up accumulation of span matrices under per-rule weights given in
/// storage order. Returns one matrix per span, indexed by span index.
pub(crate) fn accumulate_spans(layout: &ChartLayout, weights: &[f64]) -> Vec<Matrix> {
    debug_assert_eq!(weights.len(), layout.num_rules());
    let mut spans: Vec<Matrix> = Vec::with_capacity(layout.num_spans());
    for _ in 0..layout.n() {
        spans.push(Matrix::identity(1));
    }
    for (i, k) in layout.binary_spans() {
        let mut e = Matrix::zeros(k - i, k - i);
        let base = layout.span_rules_start(i, k);
        for j in i + 1..k {
            let (left, right) = (&spans[layout.span_index(i, j)], &spans[layout.span_index(j, k)]);
            for o in Orientation::BOTH {
                let w = weights[base + 2 * (j - i - 1) + o.index()];
                if w != 0.0 {
                    add_composed(&mut e, left, right, o, w);
                }
            }
        }
        debug_assert_eq!(spans.len(), layout.span_index(i, k));
        spans.push(e);
    }
    spans
}

/// Reverse sweep of [`accumulate_spans`]: given the adjoint of the root
/// matrix, returns the adjoint of every rule weight.
pub(crate) fn accumulate_spans_backward(
    layout: &ChartLayout,
    weights: &[f64],
    spans: &[Matrix],
    d_root: &Matrix,
) -> Vec<f64> {
    let n = layout.n();
    let mut d_weights = vec![0.0; layout.num_rules()];
    if n < 2 {
        return d_weights;
    }
    let mut d_spans: Vec<Option<Matrix>> = vec![None; layout.num_spans()];
    d_spans[layout.span_index(0, n)] = Some(d_root.clone());
    let binary: Vec<(usize, usize)> = layout.binary_spans().collect();
    for &(i, k) in binary.iter().rev() {
        let Some(d_e) = d_spans[layout.span_index(i, k)].take() else { continue };
        let base = layout.span_rules_start(i, k);
        for j in i + 1..k {
            let (ls, rs) = (layout.span_index(i, j), layout.span_index(j, k));
            let (left, right) = (&spans[ls], &spans[rs]);
            let (p, q) = (j - i, k - j);
            let mut d_left = d_spans[ls].take().unwrap_or_else(|| Matrix::zeros(p, p));
            let mut d_right = d_spans[rs].take().unwrap_or_else(|| Matrix::zeros(q, q));
            for o in Orientation::BOTH {
                let r = base + 2 * (j - i - 1) + o.index();
                let ((lr, lc), (rr, rc)) = match o {
                    Orientation::Straight => ((0, 0), (p, p)),
                    Orientation::Inverted => ((q, 0), (0, p)),
                };
                d_weights[r] += d_e.block_dot(lr, lc, left) + d_e.block_dot(rr, rc, right);
                let w = weights[r];
                if w != 0.0 {
                    d_e.add_window_to(lr, lc, &mut d_left, w);
                    d_e.add_window_to(rr, rc, &mut d_right, w);
                }
            }
            d_spans[ls] = Some(d_left);
            d_spans[rs] = Some(d_right);
        }
    }
    d_weights
}

/// Exact expected permutation matrix `Σ_D p(D) M(D)`.
pub fn marginal(g: &PcfgChart) -> ExpectedPerm {
    let n = g.n();
    if n == 0 {
        return ExpectedPerm(Matrix::zeros(0, 0));
    }
    let mut spans = accumulate_spans(g.layout(), g.probs());
    ExpectedPerm(spans.swap_remove(g.layout().span_index(0, n)))
}

/// Like [`marginal`] but refuses sentences longer than `cap`.
pub fn marginal_capped(g: &PcfgChart, cap: usize) -> Result<ExpectedPerm> {
    if g.n() > cap {
        return Err(Error::MarginalCapExceeded { n: g.n(), cap });
    }
    Ok(marginal(g))
}

/// Viterbi over per-rule log-scores in storage order. Ties go to the smallest
/// split point, then Straight before Inverted.
pub(crate) fn viterbi(layout: &ChartLayout, scores: &[f64]) -> (PermTree, f64) {
    let n = layout.n();
    assert!(n >= 1, "empty sentence has no derivation");
    let mut best = vec![0.0; layout.num_spans()];
    let mut back: Vec<(usize, Orientation)> = vec![(0, Orientation::Straight); layout.num_spans()];
    for (i, k) in layout.binary_spans() {
        let base = layout.span_rules_start(i, k);
        let mut top = f64::NEG_INFINITY;
        let mut arg = (i + 1, Orientation::Straight);
        for j in i + 1..k {
            let children = best[layout.span_index(i, j)] + best[layout.span_index(j, k)];
            for o in Orientation::BOTH {
                let s = scores[base + 2 * (j - i - 1) + o.index()] + children;
                if s > top {
                    top = s;
                    arg = (j, o);
                }
            }
        }
        let s = layout.span_index(i, k);
        best[s] = top;
        back[s] = arg;
    }
    let tree = follow_choices(layout, 0, n, &|s| back[s]);
    (tree, best[layout.span_index(0, n)])
}

fn follow_choices(
    layout: &ChartLayout,
    i: usize,
    k: usize,
    choice: &dyn Fn(usize) -> (usize, Orientation),
) -> PermTree {
    if k - i == 1 {
        return PermTree::Leaf(i);
    }
    let (j, o) = choice(layout.span_index(i, k));
    PermTree::node(o, follow_choices(layout, i, j, choice), follow_choices(layout, j, k, choice))
}

/// Most probable derivation and its probability.
pub fn map_derivation(g: &PcfgChart) -> (PermTree, f64) {
    let (tree, logp) = viterbi(g.layout(), g.log_probs());
    (tree, logp.exp())
}

/// Derivation obtained by taking each span's most probable rule top-down.
///
/// This is what the sampler returns under zero noise. It coincides with
/// [`map_derivation`] when every span's best rule also leads to the best
/// subtrees (for instance on near-deterministic charts) but not in general,
/// because `G(R)` sums over the children's derivations instead of maximising.
pub fn greedy_derivation(g: &PcfgChart) -> (PermTree, f64) {
    assert!(g.n() >= 1, "empty sentence has no derivation");
    let layout = g.layout();
    let tree = follow_choices(layout, 0, g.n(), &|s| {
        let (i, k) = layout.span_at(s);
        let ps = g.span_log_probs(i, k);
        let (mut arg, mut top) = (0, f64::NEG_INFINITY);
        for (idx, &v) in ps.iter().enumerate() {
            if v > top {
                top = v;
                arg = idx;
            }
        }
        (i + 1 + arg / 2, Orientation::from_index(arg % 2))
    });
    let logp = crate::btg::derivation_log_prob(g, &tree).expect("tree covers the chart");
    (tree, logp.exp())
}

/// Highest-weight derivation of a weighted grammar and its log-weight. It is
/// also the MAP derivation of the converted PCFG since `Z` is shared.
pub fn map_derivation_weighted(w: &RuleWeightChart) -> (PermTree, f64) {
    viterbi(w.layout(), w.as_slice())
}

fn categorical(probs: &[f64], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (idx, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return idx;
        }
    }
    // rounding left u above the running total: take the last supported entry
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(probs.len() - 1)
}

/// Exact top-down sample from `p(D | x)`.
pub fn ancestral_sample(g: &PcfgChart, rng: &mut impl Rng) -> PermTree {
    fn go(g: &PcfgChart, i: usize, k: usize, rng: &mut impl Rng) -> PermTree {
        if k - i == 1 {
            return PermTree::Leaf(i);
        }
        let local = categorical(g.span_probs(i, k), rng);
        let (j, o) = (i + 1 + local / 2, Orientation::from_index(local % 2));
        let left = go(g, i, j, rng);
        let right = go(g, j, k, rng);
        PermTree::node(o, left, right)
    }
    assert!(g.n() >= 1, "empty sentence has no derivation");
    go(g, 0, g.n(), rng)
}

/// Independent Gumbel(0, 1) noise for every rule, in storage order.
#[derive(Clone, Debug, PartialEq)]
pub struct GumbelNoise(pub Vec<f64>);

impl GumbelNoise {
    pub fn draw(layout: &ChartLayout, rng: &mut impl Rng) -> Self {
        Self((0..layout.num_rules()).map(|_| standard_gumbel(rng)).collect())
    }

    /// No perturbation; sampling degenerates to MAP.
    pub fn zeros(layout: &ChartLayout) -> Self {
        Self(vec![0.0; layout.num_rules()])
    }
}

pub fn standard_gumbel(rng: &mut impl Rng) -> f64 {
    let u: f64 = rng.gen_range(GUMBEL_EPS..1.0 - GUMBEL_EPS);
    -(-u.ln()).ln()
}

/// Per-span tempered softmax of `(logits + noise) / τ` and the argmax one-hot.
/// Returns `(relaxed, hard)` weights in storage order.
pub(crate) fn span_selections(
    layout: &ChartLayout,
    logits: &[f64],
    noise: &[f64],
    temperature: f64,
) -> (Vec<f64>, Vec<f64>) {
    let mut relaxed = vec![0.0; layout.num_rules()];
    let mut hard = vec![0.0; layout.num_rules()];
    for (i, k) in layout.binary_spans() {
        let start = layout.span_rules_start(i, k);
        let range = start..start + 2 * (k - i - 1);
        let perturbed: Vec<f64> = range.clone().map(|r| (logits[r] + noise[r]) / temperature).collect();
        let (mut arg, mut top) = (0, f64::NEG_INFINITY);
        for (idx, &v) in perturbed.iter().enumerate() {
            if v > top {
                top = v;
                arg = idx;
            }
        }
        hard[start + arg] = 1.0;
        let total: f64 = perturbed.iter().map(|v| (v - top).exp()).sum();
        for (idx, v) in perturbed.iter().enumerate() {
            relaxed[start + idx] = (v - top).exp() / total;
        }
    }
    (relaxed, hard)
}

/// Gumbel perturb-and-MAP sample with fresh noise.
pub fn gumbel_sample(g: &PcfgChart, rng: &mut impl Rng, temperature: f64) -> Result<SampledPerm> {
    let noise = GumbelNoise::draw(g.layout(), rng);
    gumbel_sample_with_noise(g, &noise, temperature)
}

/// Gumbel sample under explicit noise (zero noise gives the MAP derivation).
pub fn gumbel_sample_with_noise(g: &PcfgChart, noise: &GumbelNoise, temperature: f64) -> Result<SampledPerm> {
    if !(temperature > 0.0) {
        return Err(Error::NonPositiveTemperature(temperature));
    }
    let layout = g.layout();
    let n = g.n();
    assert!(n >= 1, "empty sentence has no derivation");
    let (relaxed_w, hard_w) = span_selections(layout, g.log_probs(), &noise.0, temperature);
    let root = layout.span_index(0, n);
    let relaxed = accumulate_spans(layout, &relaxed_w).swap_remove(root);
    let hard_dense = accumulate_spans(layout, &hard_w).swap_remove(root);
    let tree = follow_choices(layout, 0, n, &|s| {
        let (i, k) = layout.span_at(s);
        let start = layout.span_rules_start(i, k);
        let local = (0..2 * (k - i - 1)).find(|&r| hard_w[start + r] == 1.0).expect("one rule selected per span");
        (i + 1 + local / 2, Orientation::from_index(local % 2))
    });
    let hard = PermMatrix::from_dense(&hard_dense).expect("one-hot accumulation yields a permutation");
    debug_assert_eq!(hard, tree_to_matrix(&tree));
    Ok(SampledPerm { hard, relaxed: ExpectedPerm(relaxed), tree, temperature })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::perm::PermTree::Leaf;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn two_token(straight: f64) -> PcfgChart {
        let mut w = RuleWeightChart::uniform(2);
        w.set_logf(0, 1, 2, Orientation::Straight, straight.ln());
        w.set_logf(0, 1, 2, Orientation::Inverted, (1.0 - straight).ln());
        w.to_pcfg()
    }

    #[test]
    fn marginal_two_tokens() {
        let e = marginal(&two_token(0.5));
        assert_eq!(e.0, Matrix::filled(2, 2, 0.5));
        let e = marginal(&two_token(0.75));
        assert!(e.0.max_abs_diff(&Matrix::from_rows(&[[0.75, 0.25], [0.25, 0.75]])) < 1e-15);
    }

    #[test]
    fn marginal_cap() {
        let g = RuleWeightChart::uniform(5).to_pcfg();
        assert!(matches!(marginal_capped(&g, 4), Err(Error::MarginalCapExceeded { n: 5, cap: 4 })));
        assert!(marginal_capped(&g, 5).is_ok());
    }

    #[test]
    fn map_two_tokens() {
        let (t, p) = map_derivation(&two_token(0.75));
        assert_eq!(t, PermTree::straight(Leaf(0), Leaf(1)));
        assert!((p - 0.75).abs() < 1e-15);
        let (t, _) = map_derivation(&two_token(0.5));
        assert_eq!(t, PermTree::straight(Leaf(0), Leaf(1)));
        let (t, _) = map_derivation(&two_token(0.2));
        assert_eq!(t, PermTree::inverted(Leaf(0), Leaf(1)));
    }

    #[test]
    fn degenerate_ancestral_sample() {
        let mut w = RuleWeightChart::uniform(2);
        w.set_logf(0, 1, 2, Orientation::Inverted, f64::NEG_INFINITY);
        let g = w.to_pcfg();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            assert_eq!(ancestral_sample(&g, &mut rng), PermTree::straight(Leaf(0), Leaf(1)));
        }
    }

    #[test]
    fn ancestral_sample_is_seeded() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let g = RuleWeightChart::random(7, 2.0, &mut rng).to_pcfg();
        let a = ancestral_sample(&g, &mut ChaCha8Rng::seed_from_u64(5));
        let b = ancestral_sample(&g, &mut ChaCha8Rng::seed_from_u64(5));
        assert_eq!(a, b);
    }

    #[test]
    fn zero_noise_gumbel_is_greedy() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for n in 1..=7 {
            let g = RuleWeightChart::random(n, 2.0, &mut rng).to_pcfg();
            let (greedy, _) = greedy_derivation(&g);
            for tau in [0.1, 1.0, 10.0] {
                let s = gumbel_sample_with_noise(&g, &GumbelNoise::zeros(g.layout()), tau).unwrap();
                assert_eq!(s.tree, greedy);
                assert_eq!(s.hard, tree_to_matrix(&greedy));
            }
        }
    }

    #[test]
    fn zero_noise_gumbel_is_map_on_peaked_charts() {
        let g = two_token(0.75);
        let s = gumbel_sample_with_noise(&g, &GumbelNoise::zeros(g.layout()), 1.0).unwrap();
        assert_eq!(s.tree, map_derivation(&g).0);

        // one derivation carries almost all the mass
        let target = PermTree::inverted(
            PermTree::straight(Leaf(0), Leaf(1)),
            PermTree::inverted(Leaf(2), PermTree::straight(Leaf(3), Leaf(4))),
        );
        let on_tree = target.rules();
        let w = RuleWeightChart::from_fn(5, |i, j, k, o| if on_tree.contains(&(i, j, k, o)) { 30.0 } else { 0.0 });
        let g = w.to_pcfg();
        let s = gumbel_sample_with_noise(&g, &GumbelNoise::zeros(g.layout()), 0.5).unwrap();
        assert_eq!(s.tree, target);
        assert_eq!(map_derivation(&g).0, target);
    }

    #[test]
    fn greedy_differs_from_map_in_general() {
        // root prefers splitting at 1 only through the summed mass of [1,3)
        let mut w = RuleWeightChart::uniform(3);
        w.set_logf(1, 2, 3, Orientation::Straight, 1.0f64.ln());
        w.set_logf(1, 2, 3, Orientation::Inverted, 1.0f64.ln());
        w.set_logf(0, 1, 2, Orientation::Straight, 1.9f64.ln());
        w.set_logf(0, 1, 2, Orientation::Inverted, 0.0001f64.ln());
        w.set_logf(0, 1, 3, Orientation::Straight, 1.0f64.ln());
        w.set_logf(0, 1, 3, Orientation::Inverted, 0.0001f64.ln());
        w.set_logf(0, 2, 3, Orientation::Straight, 1.0f64.ln());
        w.set_logf(0, 2, 3, Orientation::Inverted, 0.0001f64.ln());
        let g = w.to_pcfg();
        let (greedy, pg) = greedy_derivation(&g);
        let (map, pm) = map_derivation(&g);
        assert_eq!(greedy.rules()[0].1, 1);
        assert_eq!(map.rules()[0].1, 2);
        assert!(pm > pg);
    }

    #[test]
    fn gumbel_rejects_bad_temperature() {
        let g = two_token(0.5);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(gumbel_sample(&g, &mut rng, 0.0), Err(Error::NonPositiveTemperature(_))));
        assert!(gumbel_sample(&g, &mut rng, -1.0).is_err());
        assert!(gumbel_sample(&g, &mut rng, f64::NAN).is_err());
    }

    #[test]
    fn gumbel_never_selects_zero_probability_rules() {
        let mut w = RuleWeightChart::uniform(4);
        for (i, j, k, o) in w.layout().rules().collect::<Vec<_>>() {
            if o == Orientation::Inverted {
                w.set_logf(i, j, k, o, f64::NEG_INFINITY);
            }
        }
        let g = w.to_pcfg();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..500 {
            let s = gumbel_sample(&g, &mut rng, 1.0).unwrap();
            assert_eq!(s.hard.permutation().outputs(), &[0, 1, 2, 3]);
            assert!(s.tree.rules().iter().all(|r| r.3 == Orientation::Straight));
        }
    }

    #[test]
    fn low_temperature_relaxation_is_nearly_hard() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..50 {
            let g = RuleWeightChart::random(6, 2.0, &mut rng).to_pcfg();
            let noise = GumbelNoise::draw(g.layout(), &mut rng);
            let (relaxed, hard) = span_selections(g.layout(), g.log_probs(), &noise.0, 1e-4);
            for (i, k) in g.layout().binary_spans() {
                let start = g.layout().span_rules_start(i, k);
                let end = start + 2 * (k - i - 1);
                let top = relaxed[start..end].iter().copied().fold(0.0, f64::max);
                assert!(1.0 - top < 1e-3);
                let arg = (start..end).find(|&r| hard[r] == 1.0).unwrap();
                assert_eq!(relaxed[arg], top);
            }
        }
    }

    #[test]
    fn expected_perm_json() {
        let e = marginal(&two_token(0.5));
        assert_eq!(serde_json::to_string(&e).unwrap(), r#"{"n":2,"rows":[[0.5,0.5],[0.5,0.5]]}"#);
    }
}
