//! Permutation trees and the permutations they denote.
//!
//! Matrix convention: entry `(a, b) = 1` means output slot `a` holds input
//! token `b`, so `M · X` reorders the rows of `X`. Under that convention a
//! Straight node is the direct sum of its children and an Inverted node is
//! the skew sum, with the right child's segment emitted first.

use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Largest length `enumerate_trees` and `count_separable` will accept.
pub const MAX_ENUMERATION_LEN: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Orientation {
    #[serde(rename = "S")]
    Straight,
    #[serde(rename = "I")]
    Inverted,
}

impl Orientation {
    pub const BOTH: [Orientation; 2] = [Orientation::Straight, Orientation::Inverted];

    #[inline]
    pub fn index(self) -> usize {
        match self {
            Orientation::Straight => 0,
            Orientation::Inverted => 1,
        }
    }

    pub fn from_index(i: usize) -> Self {
        match i {
            0 => Orientation::Straight,
            1 => Orientation::Inverted,
            _ => panic!("orientation index {i} out of range"),
        }
    }
}

/// A binary permutation tree (a BTG derivation).
#[derive(Clone, PartialEq, Eq, Hash)]
pub enum PermTree {
    Leaf(usize),
    Node { orientation: Orientation, left: Box<PermTree>, right: Box<PermTree> },
}

impl PermTree {
    pub fn node(orientation: Orientation, left: PermTree, right: PermTree) -> Self {
        PermTree::Node { orientation, left: Box::new(left), right: Box::new(right) }
    }

    pub fn straight(left: PermTree, right: PermTree) -> Self {
        Self::node(Orientation::Straight, left, right)
    }

    pub fn inverted(left: PermTree, right: PermTree) -> Self {
        Self::node(Orientation::Inverted, left, right)
    }

    /// Half-open span `[start, end)` of input positions covered by the tree.
    ///
    /// Only meaningful for well-formed trees; see [`PermTree::validate`].
    pub fn span(&self) -> (usize, usize) {
        match self {
            PermTree::Leaf(i) => (*i, i + 1),
            PermTree::Node { left, right, .. } => (left.span().0, right.span().1),
        }
    }

    pub fn len(&self) -> usize {
        let (i, k) = self.span();
        k - i
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Checks that leaves read left to right are consecutive input indices.
    pub fn validate(&self) -> Result<(usize, usize)> {
        match self {
            PermTree::Leaf(i) => Ok((*i, i + 1)),
            PermTree::Node { left, right, .. } => {
                let (i, j) = left.validate()?;
                let (j2, k) = right.validate()?;
                if j != j2 {
                    return Err(Error::InvalidPermutation(format!(
                        "children cover [{i},{j}) and [{j2},{k}), which are not adjacent"
                    )));
                }
                Ok((i, k))
            }
        }
    }

    /// Visits every internal node as `(i, j, k, orientation)`: the node covers
    /// `[i, k)` and its children split at `j`.
    pub fn for_each_rule(&self, f: &mut impl FnMut(usize, usize, usize, Orientation)) {
        if let PermTree::Node { orientation, left, right } = self {
            let (i, j) = left.span();
            let k = right.span().1;
            f(i, j, k, *orientation);
            left.for_each_rule(f);
            right.for_each_rule(f);
        }
    }

    pub fn rules(&self) -> Vec<(usize, usize, usize, Orientation)> {
        let mut out = Vec::new();
        self.for_each_rule(&mut |i, j, k, o| out.push((i, j, k, o)));
        out
    }

    /// Output order by concatenation: Straight emits left then right,
    /// Inverted emits right then left.
    pub fn output_order(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.len());
        self.push_order(&mut out);
        out
    }

    fn push_order(&self, out: &mut Vec<usize>) {
        match self {
            PermTree::Leaf(i) => out.push(*i),
            PermTree::Node { orientation: Orientation::Straight, left, right } => {
                left.push_order(out);
                right.push_order(out);
            }
            PermTree::Node { orientation: Orientation::Inverted, left, right } => {
                right.push_order(out);
                left.push_order(out);
            }
        }
    }

    /// Shifts every leaf index by `-offset`, re-anchoring the tree at 0.
    pub fn rebased(&self, offset: usize) -> PermTree {
        match self {
            PermTree::Leaf(i) => PermTree::Leaf(i - offset),
            PermTree::Node { orientation, left, right } => {
                PermTree::node(*orientation, left.rebased(offset), right.rebased(offset))
            }
        }
    }
}

impl fmt::Debug for PermTree {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PermTree::Leaf(i) => write!(f, "{i}"),
            PermTree::Node { orientation, left, right } => {
                let tag = match orientation {
                    Orientation::Straight => "S",
                    Orientation::Inverted => "I",
                };
                write!(f, "{tag}({left:?} {right:?})")
            }
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum TreeRepr {
    Leaf { leaf: usize },
    Node { op: Orientation, l: Box<TreeRepr>, r: Box<TreeRepr> },
}

impl From<&PermTree> for TreeRepr {
    fn from(t: &PermTree) -> Self {
        match t {
            PermTree::Leaf(i) => TreeRepr::Leaf { leaf: *i },
            PermTree::Node { orientation, left, right } => TreeRepr::Node {
                op: *orientation,
                l: Box::new(left.as_ref().into()),
                r: Box::new(right.as_ref().into()),
            },
        }
    }
}

impl From<TreeRepr> for PermTree {
    fn from(t: TreeRepr) -> Self {
        match t {
            TreeRepr::Leaf { leaf } => PermTree::Leaf(leaf),
            TreeRepr::Node { op, l, r } => PermTree::node(op, (*l).into(), (*r).into()),
        }
    }
}

impl Serialize for PermTree {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        TreeRepr::from(self).serialize(s)
    }
}

impl<'de> Deserialize<'de> for PermTree {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let tree: PermTree = TreeRepr::deserialize(d)?.into();
        tree.validate().map_err(serde::de::Error::custom)?;
        Ok(tree)
    }
}

/// A bijection on `0..n`, stored as the input index held by each output slot.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Permutation(Vec<usize>);

impl Permutation {
    pub fn new(outputs: Vec<usize>) -> Result<Self> {
        let n = outputs.len();
        let mut seen = vec![false; n];
        for &b in &outputs {
            if b >= n || seen[b] {
                return Err(Error::InvalidPermutation(format!("{outputs:?} is not a bijection")));
            }
            seen[b] = true;
        }
        Ok(Self(outputs))
    }

    pub fn identity(n: usize) -> Self {
        Self((0..n).collect())
    }

    pub fn from_tree(tree: &PermTree) -> Self {
        let (start, _) = tree.span();
        Self(tree.output_order().into_iter().map(|i| i - start).collect())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn outputs(&self) -> &[usize] {
        &self.0
    }

    /// Reorders `items` so that output slot `a` holds `items[self[a]]`.
    pub fn apply<T: Clone>(&self, items: &[T]) -> Vec<T> {
        assert_eq!(items.len(), self.0.len());
        self.0.iter().map(|&b| items[b].clone()).collect()
    }

    pub fn to_matrix(&self) -> PermMatrix {
        PermMatrix { perm: self.clone() }
    }
}

/// A 0/1 permutation matrix, stored compactly by its row reading.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct PermMatrix {
    perm: Permutation,
}

impl PermMatrix {
    pub fn n(&self) -> usize {
        self.perm.len()
    }

    pub fn permutation(&self) -> &Permutation {
        &self.perm
    }

    pub fn dense(&self) -> Matrix {
        let n = self.n();
        let mut m = Matrix::zeros(n, n);
        for (a, &b) in self.perm.outputs().iter().enumerate() {
            m[(a, b)] = 1.0;
        }
        m
    }

    /// Recovers a permutation matrix from a dense 0/1 matrix.
    pub fn from_dense(m: &Matrix) -> Result<Self> {
        if m.rows() != m.cols() {
            return Err(Error::InvalidPermutation(format!("non-square {:?}", m.shape())));
        }
        let mut outputs = Vec::with_capacity(m.rows());
        for a in 0..m.rows() {
            let row = m.row(a);
            let ones: Vec<usize> = (0..row.len()).filter(|&b| row[b] == 1.0).collect();
            let zeros = row.iter().filter(|&&v| v == 0.0).count();
            if ones.len() != 1 || zeros + 1 != row.len() {
                return Err(Error::InvalidPermutation(format!("row {a} is not one-hot")));
            }
            outputs.push(ones[0]);
        }
        Ok(Self { perm: Permutation::new(outputs)? })
    }
}

#[derive(Serialize, Deserialize)]
struct PermMatrixRepr {
    n: usize,
    perm: Vec<usize>,
}

impl Serialize for PermMatrix {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        PermMatrixRepr { n: self.n(), perm: self.perm.0.clone() }.serialize(s)
    }
}

impl<'de> Deserialize<'de> for PermMatrix {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let repr = PermMatrixRepr::deserialize(d)?;
        if repr.perm.len() != repr.n {
            return Err(serde::de::Error::custom("perm length differs from n"));
        }
        let perm = Permutation::new(repr.perm).map_err(serde::de::Error::custom)?;
        Ok(Self { perm })
    }
}

/// `a ⊕ b`: `a` on the top-left block, `b` on the bottom-right block.
pub fn direct_sum(a: &Matrix, b: &Matrix) -> Matrix {
    assert_eq!(a.rows(), a.cols(), "direct_sum needs square blocks");
    assert_eq!(b.rows(), b.cols(), "direct_sum needs square blocks");
    let (p, q) = (a.rows(), b.rows());
    let mut out = Matrix::zeros(p + q, p + q);
    out.set_block(0, 0, a);
    out.set_block(p, p, b);
    out
}

/// `a ⊖ b`: the segment of `b` is emitted first.
///
/// With `a` of size p and `b` of size q, output slots `0..q` read input columns
/// `p..p+q` through `b`, and slots `q..q+p` read columns `0..p` through `a`:
///
/// ```text
/// [ 0  b ]
/// [ a  0 ]
/// ```
pub fn skew_sum(a: &Matrix, b: &Matrix) -> Matrix {
    assert_eq!(a.rows(), a.cols(), "skew_sum needs square blocks");
    assert_eq!(b.rows(), b.cols(), "skew_sum needs square blocks");
    let (p, q) = (a.rows(), b.rows());
    let mut out = Matrix::zeros(p + q, p + q);
    out.set_block(0, p, b);
    out.set_block(q, 0, a);
    out
}

/// Dense matrix of a tree by structural recursion over `⊕` / `⊖`.
pub fn tree_to_dense(tree: &PermTree) -> Matrix {
    match tree {
        PermTree::Leaf(_) => Matrix::identity(1),
        PermTree::Node { orientation, left, right } => {
            let (l, r) = (tree_to_dense(left), tree_to_dense(right));
            match orientation {
                Orientation::Straight => direct_sum(&l, &r),
                Orientation::Inverted => skew_sum(&l, &r),
            }
        }
    }
}

pub fn tree_to_matrix(tree: &PermTree) -> PermMatrix {
    PermMatrix::from_dense(&tree_to_dense(tree)).expect("⊕/⊖ of permutation matrices is a permutation matrix")
}

/// Finds a permutation tree for `p`, if one exists.
///
/// Chart DP over spans of output slots: a span is buildable iff its input
/// indices form a contiguous range and it splits into two buildable halves
/// whose ranges are adjacent.
pub fn separating_tree(p: &Permutation) -> Option<PermTree> {
    let v = p.outputs();
    let n = v.len();
    if n == 0 {
        return None;
    }
    // (min, max) of input indices in output span [a, b)
    let idx = |a: usize, b: usize| a * (n + 1) + b;
    let mut lo = vec![usize::MAX; (n + 1) * (n + 1)];
    let mut hi = vec![0usize; (n + 1) * (n + 1)];
    // split point and orientation of the first valid split found
    let mut choice: Vec<Option<(usize, Orientation)>> = vec![None; (n + 1) * (n + 1)];
    let mut ok = vec![false; (n + 1) * (n + 1)];
    for a in 0..n {
        lo[idx(a, a + 1)] = v[a];
        hi[idx(a, a + 1)] = v[a];
        ok[idx(a, a + 1)] = true;
    }
    for w in 2..=n {
        for a in 0..=n - w {
            let b = a + w;
            lo[idx(a, b)] = lo[idx(a, b - 1)].min(v[b - 1]);
            hi[idx(a, b)] = hi[idx(a, b - 1)].max(v[b - 1]);
            if hi[idx(a, b)] - lo[idx(a, b)] + 1 != w {
                continue;
            }
            for c in a + 1..b {
                if !(ok[idx(a, c)] && ok[idx(c, b)]) {
                    continue;
                }
                if hi[idx(a, c)] + 1 == lo[idx(c, b)] {
                    choice[idx(a, b)] = Some((c, Orientation::Straight));
                } else if hi[idx(c, b)] + 1 == lo[idx(a, c)] {
                    choice[idx(a, b)] = Some((c, Orientation::Inverted));
                } else {
                    continue;
                }
                ok[idx(a, b)] = true;
                break;
            }
        }
    }
    if !ok[idx(0, n)] {
        return None;
    }
    fn build(
        a: usize,
        b: usize,
        v: &[usize],
        choice: &[Option<(usize, Orientation)>],
        idx: &dyn Fn(usize, usize) -> usize,
    ) -> PermTree {
        if b - a == 1 {
            return PermTree::Leaf(v[a]);
        }
        let (c, o) = choice[idx(a, b)].expect("buildable span has a split");
        let first = build(a, c, v, choice, idx);
        let second = build(c, b, v, choice, idx);
        match o {
            Orientation::Straight => PermTree::straight(first, second),
            // the second output block holds the smaller input indices
            Orientation::Inverted => PermTree::inverted(second, first),
        }
    }
    Some(build(0, n, v, &choice, &idx))
}

pub fn is_separable(p: &Permutation) -> bool {
    separating_tree(p).is_some()
}

/// All permutation trees over `[0, n)`: Catalan(n−1)·2^(n−1) of them.
pub fn enumerate_trees(n: usize) -> Result<Vec<PermTree>> {
    if n > MAX_ENUMERATION_LEN {
        return Err(Error::LengthExceeded { n, max: MAX_ENUMERATION_LEN });
    }
    if n == 0 {
        return Ok(Vec::new());
    }
    Ok(trees_over(0, n))
}

fn trees_over(i: usize, k: usize) -> Vec<PermTree> {
    if k - i == 1 {
        return vec![PermTree::Leaf(i)];
    }
    let mut out = Vec::new();
    for j in i + 1..k {
        let lefts = trees_over(i, j);
        let rights = trees_over(j, k);
        for l in &lefts {
            for r in &rights {
                for o in Orientation::BOTH {
                    out.push(PermTree::node(o, l.clone(), r.clone()));
                }
            }
        }
    }
    out
}

/// Number of distinct permutations of length `n` reachable by some tree.
pub fn count_separable(n: usize) -> Result<usize> {
    let trees = enumerate_trees(n)?;
    let distinct: HashSet<Vec<usize>> = trees.iter().map(PermTree::output_order).collect();
    Ok(distinct.len())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> Matrix {
        Matrix::from_rows(rows)
    }

    /// The five-leaf example tree: ((0 ∧ 1) △ 2) ∧ (3 ∧ 4).
    fn hedgehog_tree() -> PermTree {
        use PermTree::Leaf;
        PermTree::straight(
            PermTree::inverted(PermTree::straight(Leaf(0), Leaf(1)), Leaf(2)),
            PermTree::straight(Leaf(3), Leaf(4)),
        )
    }

    #[test]
    fn direct_sum_examples() {
        let one = Matrix::identity(1);
        assert_eq!(direct_sum(&one, &one), Matrix::identity(2));
        let swap = m(&[&[0.0, 1.0], &[1.0, 0.0]]);
        assert_eq!(
            direct_sum(&swap, &one),
            m(&[&[0.0, 1.0, 0.0], &[1.0, 0.0, 0.0], &[0.0, 0.0, 1.0]])
        );
    }

    #[test]
    fn skew_sum_examples() {
        let one = Matrix::identity(1);
        assert_eq!(skew_sum(&one, &one), m(&[&[0.0, 1.0], &[1.0, 0.0]]));
        // I₂ ⊖ I₁ puts input 2 first, then inputs 0 and 1
        assert_eq!(
            skew_sum(&Matrix::identity(2), &one),
            m(&[&[0.0, 0.0, 1.0], &[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0]])
        );
    }

    #[test]
    fn sums_preserve_double_stochasticity() {
        let e = m(&[&[0.3, 0.7], &[0.7, 0.3]]);
        let f = m(&[&[0.2, 0.5, 0.3], &[0.5, 0.2, 0.3], &[0.3, 0.3, 0.4]]);
        for s in [direct_sum(&e, &f), skew_sum(&e, &f)] {
            for x in s.row_sums().into_iter().chain(s.col_sums()) {
                assert!((x - 1.0).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn hedgehog_example_reorders_sentence() {
        let tree = hedgehog_tree();
        let pm = tree_to_matrix(&tree);
        assert_eq!(pm.permutation().outputs(), &[2, 0, 1, 3, 4]);
        let words = ["the", "girl", "saw", "the", "hedgehog"];
        assert_eq!(pm.permutation().apply(&words).join(" "), "saw the girl the hedgehog");

        // M · X with X holding one-hot rows gives the same reordering
        let x = Matrix::identity(5);
        let reordered = pm.dense().matmul(&x);
        for (a, &b) in [2usize, 0, 1, 3, 4].iter().enumerate() {
            assert_eq!(reordered[(a, b)], 1.0);
        }
    }

    #[test]
    fn tree_to_matrix_small_cases() {
        assert_eq!(tree_to_dense(&PermTree::Leaf(0)), Matrix::identity(1));
        let swap = PermTree::inverted(PermTree::Leaf(0), PermTree::Leaf(1));
        assert_eq!(tree_to_dense(&swap), m(&[&[0.0, 1.0], &[1.0, 0.0]]));
    }

    #[test]
    fn separability_examples() {
        let p = |v: &[usize]| Permutation::new(v.to_vec()).unwrap();
        assert!(is_separable(&p(&[0, 1, 2, 3])));
        assert!(!is_separable(&p(&[1, 3, 0, 2])));
        assert!(!is_separable(&p(&[2, 0, 3, 1])));
        assert!(is_separable(&p(&[2, 0, 1, 3, 4])));
    }

    #[test]
    fn separating_tree_reproduces_permutation() {
        let p = Permutation::new(vec![2, 0, 1, 3, 4]).unwrap();
        let t = separating_tree(&p).unwrap();
        assert_eq!(Permutation::from_tree(&t), p);
    }

    #[test]
    fn enumeration_counts() {
        assert_eq!(enumerate_trees(1).unwrap().len(), 1);
        assert_eq!(enumerate_trees(2).unwrap().len(), 2);
        assert_eq!(enumerate_trees(4).unwrap().len(), 40);
        assert!(matches!(enumerate_trees(9), Err(Error::LengthExceeded { n: 9, .. })));
        let counts: Vec<usize> = (1..=6).map(|n| count_separable(n).unwrap()).collect();
        assert_eq!(counts, vec![1, 2, 6, 22, 90, 394]);
    }

    #[test]
    fn tree_json_shape() {
        let t = PermTree::inverted(PermTree::Leaf(0), PermTree::Leaf(1));
        let s = serde_json::to_string(&t).unwrap();
        assert_eq!(s, r#"{"op":"I","l":{"leaf":0},"r":{"leaf":1}}"#);
        let back: PermTree = serde_json::from_str(&s).unwrap();
        assert_eq!(back, t);
        assert!(serde_json::from_str::<PermTree>(r#"{"op":"S","l":{"leaf":0},"r":{"leaf":2}}"#).is_err());

        let pm = tree_to_matrix(&hedgehog_tree());
        assert_eq!(serde_json::to_string(&pm).unwrap(), r#"{"n":5,"perm":[2,0,1,3,4]}"#);
    }

    #[test]
    fn invalid_permutations_rejected() {
        assert!(Permutation::new(vec![0, 0]).is_err());
        assert!(Permutation::new(vec![0, 2]).is_err());
        assert!(PermMatrix::from_dense(&m(&[&[0.5, 0.5], &[0.5, 0.5]])).is_err());
    }
}
