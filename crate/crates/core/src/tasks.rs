//! Synthetic infix → postfix arithmetic data.
//!
//! Expressions follow `Expr → "(" Expr op Expr ")" | digit`. The target keeps
//! every bracket in place and moves each operator behind its right operand:
//! `T(d) = d`, `T("(" A op B ")") = "(" T(A) T(B) op ")"`. The target is thus
//! a separable reordering of the source.

use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::perm::PermTree;

/// Source and target alphabet, in id order.
pub const SYMBOLS: [&str; 16] = ["0", "1", "2", "3", "4", "5", "6", "7", "8", "9", "+", "-", "*", "/", "(", ")"];
pub const VOCAB_SIZE: usize = SYMBOLS.len();
pub const OPEN: usize = 14;
pub const CLOSE: usize = 15;
const OPS: [usize; 4] = [10, 11, 12, 13];

pub fn token_id(sym: &str) -> Result<usize> {
    let sym = if sym == "−" { "-" } else { sym };
    SYMBOLS.iter().position(|&s| s == sym).ok_or_else(|| Error::UnknownToken(sym.to_string()))
}

pub fn token_str(id: usize) -> &'static str {
    SYMBOLS[id]
}

/// Space-separated tokens to ids.
pub fn tokenize(text: &str) -> Result<Vec<usize>> {
    text.split_whitespace().map(token_id).collect()
}

/// Splits an unspaced expression such as `((1+9)*4)` into ids.
pub fn tokenize_compact(text: &str) -> Result<Vec<usize>> {
    text.chars().filter(|c| !c.is_whitespace()).map(|c| token_id(&c.to_string())).collect()
}

pub fn detokenize(ids: &[usize]) -> String {
    ids.iter().map(|&t| token_str(t)).collect::<Vec<_>>().join(" ")
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum Expr {
    Digit(usize),
    Bin { op: usize, left: Box<Expr>, right: Box<Expr> },
}

impl Expr {
    pub fn depth(&self) -> usize {
        match self {
            Expr::Digit(_) => 0,
            Expr::Bin { left, right, .. } => 1 + left.depth().max(right.depth()),
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Expr::Digit(_) => 1,
            Expr::Bin { left, right, .. } => 3 + left.len() + right.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn infix(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.len());
        self.push_infix(&mut out);
        out
    }

    fn push_infix(&self, out: &mut Vec<usize>) {
        match self {
            Expr::Digit(d) => out.push(*d),
            Expr::Bin { op, left, right } => {
                out.push(OPEN);
                left.push_infix(out);
                out.push(*op);
                right.push_infix(out);
                out.push(CLOSE);
            }
        }
    }

    pub fn postfix(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.len());
        self.push_postfix(&mut out);
        out
    }

    fn push_postfix(&self, out: &mut Vec<usize>) {
        match self {
            Expr::Digit(d) => out.push(*d),
            Expr::Bin { op, left, right } => {
                out.push(OPEN);
                left.push_postfix(out);
                right.push_postfix(out);
                out.push(*op);
                out.push(CLOSE);
            }
        }
    }

    /// A permutation tree over infix positions whose reordering yields the postfix:
    /// `S("(", S(A, S(I(op, B), ")")))`.
    pub fn canonical_tree(&self) -> PermTree {
        self.tree_at(0)
    }

    fn tree_at(&self, start: usize) -> PermTree {
        match self {
            Expr::Digit(_) => PermTree::Leaf(start),
            Expr::Bin { left, right, .. } => {
                let a = left.tree_at(start + 1);
                let op_pos = start + 1 + left.len();
                let b = right.tree_at(op_pos + 1);
                let close = op_pos + 1 + right.len();
                let op_b = PermTree::inverted(PermTree::Leaf(op_pos), b);
                PermTree::straight(
                    PermTree::Leaf(start),
                    PermTree::straight(a, PermTree::straight(op_b, PermTree::Leaf(close))),
                )
            }
        }
    }

    /// Parses a fully parenthesised infix token sequence.
    pub fn parse(tokens: &[usize]) -> Result<Expr> {
        fn go(t: &[usize], pos: &mut usize) -> Result<Expr> {
            let at = *pos;
            let err = |msg: &str| Error::Parse { line: 0, msg: format!("{msg} near token {at}") };
            let tok = *t.get(*pos).ok_or_else(|| err("unexpected end"))?;
            *pos += 1;
            if tok < 10 {
                return Ok(Expr::Digit(tok));
            }
            if tok != OPEN {
                return Err(err("expected digit or '('"));
            }
            let left = go(t, pos)?;
            let op = *t.get(*pos).ok_or_else(|| err("unexpected end"))?;
            if !OPS.contains(&op) {
                return Err(err("expected operator"));
            }
            *pos += 1;
            let right = go(t, pos)?;
            if t.get(*pos) != Some(&CLOSE) {
                return Err(err("expected ')'"));
            }
            *pos += 1;
            Ok(Expr::Bin { op, left: Box::new(left), right: Box::new(right) })
        }
        let mut pos = 0;
        let e = go(tokens, &mut pos)?;
        if pos != tokens.len() {
            return Err(Error::Parse { line: 0, msg: "trailing tokens".into() });
        }
        Ok(e)
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", detokenize(&self.infix()))
    }
}

/// Postfix transform of an infix token sequence.
pub fn infix_to_postfix(infix: &[usize]) -> Result<Vec<usize>> {
    Ok(Expr::parse(infix)?.postfix())
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ArithExample {
    pub infix: Vec<usize>,
    pub postfix: Vec<usize>,
    pub depth: usize,
}

impl ArithExample {
    pub fn from_expr(e: &Expr) -> Self {
        Self { infix: e.infix(), postfix: e.postfix(), depth: e.depth() }
    }
}

/// Expression sampler settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArithGrammar {
    /// Probability that a subtree off the deepest path expands into
    /// `( A op B )` rather than a digit, indexed by remaining depth budget
    /// (the last entry is reused for larger budgets).
    #[serde(default = "default_branch_probs")]
    pub branch_probs: Vec<f64>,
}

fn default_branch_probs() -> Vec<f64> {
    vec![0.0, 0.25, 0.2, 0.15]
}

impl Default for ArithGrammar {
    fn default() -> Self {
        Self { branch_probs: default_branch_probs() }
    }
}

impl ArithGrammar {
    fn branch_prob(&self, budget: usize) -> f64 {
        self.branch_probs.get(budget).or(self.branch_probs.last()).copied().unwrap_or(0.0)
    }

    /// An expression of depth exactly `depth`: one child (side chosen
    /// uniformly) carries the remaining depth, the other is sampled with
    /// depth at most the remaining budget.
    pub fn sample_exact(&self, depth: usize, rng: &mut impl Rng) -> Expr {
        if depth == 0 {
            return Expr::Digit(rng.gen_range(0..10));
        }
        let op = OPS[rng.gen_range(0..OPS.len())];
        let deep = self.sample_exact(depth - 1, rng);
        let other = self.sample_at_most(depth - 1, rng);
        let (left, right) = if rng.gen::<bool>() { (deep, other) } else { (other, deep) };
        Expr::Bin { op, left: Box::new(left), right: Box::new(right) }
    }

    fn sample_at_most(&self, budget: usize, rng: &mut impl Rng) -> Expr {
        if budget == 0 || rng.gen::<f64>() >= self.branch_prob(budget) {
            return Expr::Digit(rng.gen_range(0..10));
        }
        let op = OPS[rng.gen_range(0..OPS.len())];
        let left = self.sample_at_most(budget - 1, rng);
        let right = self.sample_at_most(budget - 1, rng);
        Expr::Bin { op, left: Box::new(left), right: Box::new(right) }
    }
}

/// Samples `count` expressions with depth in `[depth_min, depth_max]`.
pub fn gen_arith(count: usize, depth_min: usize, depth_max: usize, seed: u64) -> Result<Vec<ArithExample>> {
    gen_arith_with(&ArithGrammar::default(), count, depth_min, depth_max, &mut ChaCha8Rng::seed_from_u64(seed))
}

pub fn gen_arith_with(
    grammar: &ArithGrammar,
    count: usize,
    depth_min: usize,
    depth_max: usize,
    rng: &mut impl Rng,
) -> Result<Vec<ArithExample>> {
    if depth_min < 1 || depth_min > depth_max {
        return Err(Error::InfeasibleDepth { min: depth_min, max: depth_max });
    }
    if count == 0 {
        return Err(Error::InvalidConfig("count must be at least 1".into()));
    }
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let target = rng.gen_range(depth_min..=depth_max);
        let e = grammar.sample_exact(target, rng);
        // the construction lands on `target`; keep the band check as the contract
        if (depth_min..=depth_max).contains(&e.depth()) {
            out.push(ArithExample::from_expr(&e));
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitKind {
    Iid,
    Len,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub kind: SplitKind,
    pub train: usize,
    pub dev: usize,
    pub test: usize,
    pub seed: u64,
    #[serde(default)]
    pub grammar: ArithGrammar,
}

impl SplitSpec {
    /// Desk-scale sizes 5000 / 1000 / 1000.
    pub fn desk(kind: SplitKind, seed: u64) -> Self {
        Self { kind, train: 5000, dev: 1000, test: 1000, seed, grammar: ArithGrammar::default() }
    }
}

pub const IID_DEPTH: (usize, usize) = (1, 6);
pub const LEN_TEST_DEPTH: usize = 7;

#[derive(Clone, Debug, PartialEq)]
pub struct Splits {
    pub train: Vec<ArithExample>,
    pub dev: Vec<ArithExample>,
    pub test: Vec<ArithExample>,
}

/// Each set draws from its own ChaCha stream of the split seed; LEN shares
/// train and dev with IID and draws its depth-7 test set from a fourth stream.
pub fn make_splits(spec: &SplitSpec) -> Result<Splits> {
    let stream = |s: u64| {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(s);
        rng
    };
    let (lo, hi) = IID_DEPTH;
    let train = gen_arith_with(&spec.grammar, spec.train, lo, hi, &mut stream(0))?;
    let dev = gen_arith_with(&spec.grammar, spec.dev, lo, hi, &mut stream(1))?;
    let test = match spec.kind {
        SplitKind::Iid => gen_arith_with(&spec.grammar, spec.test, lo, hi, &mut stream(2))?,
        SplitKind::Len => gen_arith_with(&spec.grammar, spec.test, LEN_TEST_DEPTH, LEN_TEST_DEPTH, &mut stream(3))?,
    };
    Ok(Splits { train, dev, test })
}

/// One pair per line: infix tokens, TAB, postfix tokens.
pub fn write_tsv(w: &mut impl Write, examples: &[ArithExample]) -> Result<()> {
    for ex in examples {
        writeln!(w, "{}\t{}", detokenize(&ex.infix), detokenize(&ex.postfix))?;
    }
    Ok(())
}

pub fn write_tsv_file(path: &Path, examples: &[ArithExample]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_tsv(&mut f, examples)?;
    f.flush()?;
    Ok(())
}

/// Reads source/target token pairs. Depth is recomputed when the source
/// parses as an expression and left 0 otherwise.
pub fn read_tsv(r: impl BufRead) -> Result<Vec<ArithExample>> {
    let mut out = Vec::new();
    for (n, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let (src, tgt) = line
            .split_once('\t')
            .ok_or_else(|| Error::Parse { line: n + 1, msg: "missing TAB separator".into() })?;
        let wrap = |e: Error| Error::Parse { line: n + 1, msg: e.to_string() };
        let infix = tokenize(src).map_err(wrap)?;
        let postfix = tokenize(tgt).map_err(wrap)?;
        let depth = Expr::parse(&infix).map(|e| e.depth()).unwrap_or(0);
        out.push(ArithExample { infix, postfix, depth });
    }
    Ok(out)
}

pub fn read_tsv_file(path: &Path) -> Result<Vec<ArithExample>> {
    read_tsv(std::io::BufReader::new(std::fs::File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::perm::{separating_tree, Permutation};
    use std::collections::HashSet;

    #[test]
    fn table_example_roundtrips() {
        let infix = tokenize_compact("((1+9)*((7+8)/4))").unwrap();
        let postfix = tokenize_compact("((19+)((78+)4/)*)").unwrap();
        assert_eq!(infix.len(), 17);
        assert_eq!(postfix.len(), 17);
        assert_eq!(infix_to_postfix(&infix).unwrap(), postfix);
        let e = Expr::parse(&infix).unwrap();
        assert_eq!(e.depth(), 3);
        assert_eq!(e.infix(), infix);
    }

    #[test]
    fn depth_one_shape() {
        let ex = gen_arith(50, 1, 1, 3).unwrap();
        for e in ex {
            assert_eq!(e.infix.len(), 5);
            let (a, op, b) = (e.infix[1], e.infix[2], e.infix[3]);
            assert_eq!(e.infix, vec![OPEN, a, op, b, CLOSE]);
            assert_eq!(e.postfix, vec![OPEN, a, b, op, CLOSE]);
        }
    }

    #[test]
    fn canonical_tree_reorders_and_is_separable() {
        for ex in gen_arith(300, 1, 6, 8).unwrap() {
            let e = Expr::parse(&ex.infix).unwrap();
            let tree = e.canonical_tree();
            assert_eq!(tree.validate().unwrap(), (0, ex.infix.len()));
            let perm = Permutation::from_tree(&tree);
            assert_eq!(perm.apply(&ex.infix), ex.postfix);
            // independent route: the separability chart finds a tree for it too
            let found = separating_tree(&perm).expect("reordering is separable");
            assert_eq!(Permutation::from_tree(&found).apply(&ex.infix), ex.postfix);
        }
    }

    #[test]
    fn generation_contracts() {
        assert!(matches!(gen_arith(10, 0, 3, 1), Err(Error::InfeasibleDepth { .. })));
        assert!(matches!(gen_arith(10, 4, 3, 1), Err(Error::InfeasibleDepth { .. })));
        assert_eq!(gen_arith(20, 2, 5, 9).unwrap(), gen_arith(20, 2, 5, 9).unwrap());
        let sample = gen_arith(1000, 1, 6, 5).unwrap();
        let depths: HashSet<usize> = sample.iter().map(|e| e.depth).collect();
        assert_eq!(depths, (1..=6).collect());
        for e in &sample {
            let (mut a, mut b) = (e.infix.clone(), e.postfix.clone());
            a.sort();
            b.sort();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn splits() {
        let spec = SplitSpec { kind: SplitKind::Len, train: 30, dev: 10, test: 10, seed: 7, grammar: ArithGrammar::default() };
        let len = make_splits(&spec).unwrap();
        assert!(len.test.iter().all(|e| e.depth == 7));
        assert!(len.train.iter().chain(&len.dev).all(|e| (1..=6).contains(&e.depth)));
        let iid = make_splits(&SplitSpec { kind: SplitKind::Iid, ..spec }).unwrap();
        assert_eq!(iid.train, len.train);
        assert_eq!(iid.dev, len.dev);
        assert!(iid.test.iter().all(|e| (1..=6).contains(&e.depth)));
        assert_ne!(iid.train[..10], iid.dev[..]);
        let desk = SplitSpec::desk(SplitKind::Iid, 1);
        assert_eq!((desk.train, desk.dev, desk.test), (5000, 1000, 1000));
    }

    #[test]
    fn tsv_roundtrip() {
        let ex = gen_arith(5, 1, 3, 2).unwrap();
        let mut buf = Vec::new();
        write_tsv(&mut buf, &ex).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.lines().all(|l| l.split('\t').count() == 2));
        assert_eq!(read_tsv(&buf[..]).unwrap(), ex);
        assert!(read_tsv(&b"( 1 + 2 )"[..]).is_err());
        assert!(read_tsv(&b"( 1 + x )\t( 1 x + )"[..]).is_err());
    }
}
