//! Link-weight formulas: binary arithmetic trees over link bandwidth, delay,
//! utilization, the congestion threshold and constants.
//!
//! Trees are evaluated into integer routing weights and manipulated by the
//! grow initializer and by subtree crossover and mutation. The text form is a
//! fully parenthesized infix expression, e.g. `((threshold * 1.5) - util)`.

use std::fmt;

use rand::Rng;
use thiserror::Error;

/// Denominators smaller than this in magnitude make a division evaluate to 1.
pub const DIVISION_GUARD: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
}

impl BinOp {
    pub const ALL: [BinOp; 4] = [BinOp::Add, BinOp::Sub, BinOp::Mul, BinOp::Div];

    pub fn symbol(self) -> char {
        match self {
            BinOp::Add => '+',
            BinOp::Sub => '-',
            BinOp::Mul => '*',
            BinOp::Div => '/',
        }
    }

    fn apply(self, a: f64, b: f64) -> f64 {
        let v = match self {
            BinOp::Add => a + b,
            BinOp::Sub => a - b,
            BinOp::Mul => a * b,
            BinOp::Div => {
                if b.abs() < DIVISION_GUARD {
                    return 1.0;
                }
                a / b
            }
        };
        // Finite operands can only overflow to an infinity, never NaN.
        v.clamp(f64::MIN, f64::MAX)
    }
}

/// A link-weight formula.
#[derive(Debug, Clone, PartialEq)]
pub enum WeightExpr {
    Const(f64),
    /// Link bandwidth in Mbps.
    Bw,
    /// Link nominal delay in ms.
    Dl,
    /// Current link utilization.
    Util,
    /// Congestion threshold.
    Threshold,
    Bin(BinOp, Box<WeightExpr>, Box<WeightExpr>),
}

/// The link and network quantities a formula is evaluated against.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalContext {
    pub bw: f64,
    pub dl: f64,
    pub util: f64,
    pub threshold: f64,
}

/// Depth and constant range for generated trees.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExprLimits {
    pub max_depth: usize,
    pub const_min: f64,
    pub const_max: f64,
}

impl Default for ExprLimits {
    fn default() -> Self {
        Self {
            max_depth: 15,
            const_min: 0.0,
            const_max: 100.0,
        }
    }
}

impl WeightExpr {
    pub fn bin(op: BinOp, lhs: WeightExpr, rhs: WeightExpr) -> Self {
        WeightExpr::Bin(op, Box::new(lhs), Box::new(rhs))
    }

    pub fn is_leaf(&self) -> bool {
        !matches!(self, WeightExpr::Bin(..))
    }

    /// Number of levels; a lone leaf has depth 1.
    pub fn depth(&self) -> usize {
        match self {
            WeightExpr::Bin(_, l, r) => 1 + l.depth().max(r.depth()),
            _ => 1,
        }
    }

    pub fn size(&self) -> usize {
        match self {
            WeightExpr::Bin(_, l, r) => 1 + l.size() + r.size(),
            _ => 1,
        }
    }

    pub fn eval(&self, ctx: &EvalContext) -> f64 {
        match self {
            WeightExpr::Const(c) => *c,
            WeightExpr::Bw => ctx.bw,
            WeightExpr::Dl => ctx.dl,
            WeightExpr::Util => ctx.util,
            WeightExpr::Threshold => ctx.threshold,
            WeightExpr::Bin(op, l, r) => op.apply(l.eval(ctx), r.eval(ctx)),
        }
    }

    /// Evaluates straight to an integer routing weight.
    pub fn weight(&self, ctx: &EvalContext) -> u32 {
        to_weight(self.eval(ctx))
    }

    /// Subtree at pre-order position `index` together with its depth
    /// (root = 1).
    pub fn subtree(&self, index: usize) -> Option<(&WeightExpr, usize)> {
        fn walk<'a>(
            e: &'a WeightExpr,
            index: &mut usize,
            depth: usize,
        ) -> Option<(&'a WeightExpr, usize)> {
            if *index == 0 {
                return Some((e, depth));
            }
            *index -= 1;
            if let WeightExpr::Bin(_, l, r) = e {
                walk(l, index, depth + 1).or_else(|| walk(r, index, depth + 1))
            } else {
                None
            }
        }
        let mut i = index;
        walk(self, &mut i, 1)
    }

    /// Copy of `self` with the subtree at pre-order `index` replaced.
    pub fn replace_subtree(&self, index: usize, replacement: &WeightExpr) -> WeightExpr {
        fn walk(e: &WeightExpr, index: &mut usize, rep: &WeightExpr) -> WeightExpr {
            if *index == 0 {
                *index = usize::MAX;
                return rep.clone();
            }
            if *index == usize::MAX {
                return e.clone();
            }
            *index -= 1;
            match e {
                WeightExpr::Bin(op, l, r) => {
                    let l = walk(l, index, rep);
                    let r = walk(r, index, rep);
                    WeightExpr::bin(*op, l, r)
                }
                leaf => leaf.clone(),
            }
        }
        let mut i = index;
        walk(self, &mut i, replacement)
    }

    /// Parses the fully parenthesized text form.
    pub fn parse(text: &str) -> Result<WeightExpr, ParseError> {
        let mut p = Parser {
            src: text.as_bytes(),
            pos: 0,
        };
        let e = p.expr(0)?;
        p.skip_ws();
        if p.pos < p.src.len() {
            return Err(p.error("trailing input"));
        }
        Ok(e)
    }
}

impl fmt::Display for WeightExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            WeightExpr::Const(c) => write!(f, "{c}"),
            WeightExpr::Bw => f.write_str("bw"),
            WeightExpr::Dl => f.write_str("dl"),
            WeightExpr::Util => f.write_str("util"),
            WeightExpr::Threshold => f.write_str("threshold"),
            WeightExpr::Bin(op, l, r) => write!(f, "({l} {} {r})", op.symbol()),
        }
    }
}

/// Converts a formula value to a routing weight: `max(1, floor(|v|))`.
///
/// Values that sit within a relative 1e-9 of an integer are taken as that
/// integer, so `(1.5 * 0.8)^2 / (1.5 * 0.8 - 0.6)^2`, which evaluates to
/// 3.9999999999999982 in binary floating point, yields 4. Weights saturate at
/// `u32::MAX`.
pub fn to_weight(v: f64) -> u32 {
    let a = v.abs();
    let nearest = a.round();
    let snapped = if (a - nearest).abs() <= 1e-9 * nearest.max(1.0) {
        nearest
    } else {
        a.floor()
    };
    // `as` saturates for out-of-range floats.
    (snapped as u32).max(1)
}

const LEAF_KINDS: usize = 5;

fn random_leaf<R: Rng + ?Sized>(limits: &ExprLimits, rng: &mut R) -> WeightExpr {
    match rng.random_range(0..LEAF_KINDS) {
        0 => WeightExpr::Const(if limits.const_max > limits.const_min {
            rng.random_range(limits.const_min..=limits.const_max)
        } else {
            limits.const_min
        }),
        1 => WeightExpr::Bw,
        2 => WeightExpr::Dl,
        3 => WeightExpr::Util,
        _ => WeightExpr::Threshold,
    }
}

/// Grow initialization: every node below the depth limit draws uniformly from
/// the four operators and five leaf kinds; at the limit only leaves are drawn.
pub fn grow_random<R: Rng + ?Sized>(
    max_depth: usize,
    limits: &ExprLimits,
    rng: &mut R,
) -> WeightExpr {
    fn grow<R: Rng + ?Sized>(
        depth: usize,
        max_depth: usize,
        limits: &ExprLimits,
        rng: &mut R,
    ) -> WeightExpr {
        if depth >= max_depth {
            return random_leaf(limits, rng);
        }
        let pick = rng.random_range(0..BinOp::ALL.len() + LEAF_KINDS);
        if pick < BinOp::ALL.len() {
            let l = grow(depth + 1, max_depth, limits, rng);
            let r = grow(depth + 1, max_depth, limits, rng);
            WeightExpr::bin(BinOp::ALL[pick], l, r)
        } else {
            random_leaf(limits, rng)
        }
    }
    grow(1, max_depth.max(1), limits, rng)
}

/// One-point crossover: swaps a uniformly chosen subtree of `a` with one of
/// `b`. A child deeper than `limits.max_depth` is replaced by a copy of the
/// parent it was derived from.
pub fn crossover<R: Rng + ?Sized>(
    a: &WeightExpr,
    b: &WeightExpr,
    limits: &ExprLimits,
    rng: &mut R,
) -> (WeightExpr, WeightExpr) {
    let ia = rng.random_range(0..a.size());
    let ib = rng.random_range(0..b.size());
    let (sa, _) = a.subtree(ia).expect("index within size");
    let (sb, _) = b.subtree(ib).expect("index within size");
    let mut c1 = a.replace_subtree(ia, sb);
    let mut c2 = b.replace_subtree(ib, sa);
    if c1.depth() > limits.max_depth {
        c1 = a.clone();
    }
    if c2.depth() > limits.max_depth {
        c2 = b.clone();
    }
    (c1, c2)
}

/// One-point mutation: a uniformly chosen subtree is replaced by a fresh grow
/// tree small enough to keep the whole tree within `limits.max_depth`.
pub fn mutate<R: Rng + ?Sized>(expr: &WeightExpr, limits: &ExprLimits, rng: &mut R) -> WeightExpr {
    let idx = rng.random_range(0..expr.size());
    let (_, depth) = expr.subtree(idx).expect("index within size");
    let budget = (limits.max_depth + 1).saturating_sub(depth).max(1);
    let fresh = grow_random(budget, limits, rng);
    expr.replace_subtree(idx, &fresh)
}

/// Malformed formula text.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{message} at offset {offset}")]
pub struct ParseError {
    pub offset: usize,
    pub message: String,
}

// Deeper nesting than this is rejected before it can exhaust the stack.
const MAX_PARSE_NESTING: usize = 512;

struct Parser<'a> {
    src: &'a [u8],
    pos: usize,
}

impl Parser<'_> {
    fn error(&self, message: &str) -> ParseError {
        let message = if self.pos >= self.src.len() {
            "unexpected end of input".to_string()
        } else {
            message.to_string()
        };
        ParseError {
            offset: self.pos,
            message,
        }
    }

    fn skip_ws(&mut self) {
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn expr(&mut self, nesting: usize) -> Result<WeightExpr, ParseError> {
        if nesting > MAX_PARSE_NESTING {
            return Err(self.error("nesting too deep"));
        }
        self.skip_ws();
        match self.src.get(self.pos) {
            None => Err(self.error("expected expression")),
            Some(b'(') => {
                self.pos += 1;
                let lhs = self.expr(nesting + 1)?;
                self.skip_ws();
                let op = match self.src.get(self.pos) {
                    Some(b'+') => BinOp::Add,
                    Some(b'-') => BinOp::Sub,
                    Some(b'*') => BinOp::Mul,
                    Some(b'/') => BinOp::Div,
                    _ => return Err(self.error("expected operator")),
                };
                self.pos += 1;
                let rhs = self.expr(nesting + 1)?;
                self.skip_ws();
                if self.src.get(self.pos) != Some(&b')') {
                    return Err(self.error("expected `)`"));
                }
                self.pos += 1;
                Ok(WeightExpr::bin(op, lhs, rhs))
            }
            Some(c) if c.is_ascii_alphabetic() => {
                let start = self.pos;
                while self.pos < self.src.len() && self.src[self.pos].is_ascii_alphanumeric() {
                    self.pos += 1;
                }
                match &self.src[start..self.pos] {
                    b"bw" => Ok(WeightExpr::Bw),
                    b"dl" => Ok(WeightExpr::Dl),
                    b"util" => Ok(WeightExpr::Util),
                    b"threshold" => Ok(WeightExpr::Threshold),
                    _ => {
                        self.pos = start;
                        Err(self.error("unknown identifier"))
                    }
                }
            }
            Some(c) if c.is_ascii_digit() || *c == b'.' || *c == b'-' => self.number(),
            Some(_) => Err(self.error("unexpected character")),
        }
    }

    fn number(&mut self) -> Result<WeightExpr, ParseError> {
        let start = self.pos;
        if self.src[self.pos] == b'-' {
            self.pos += 1;
        }
        while let Some(&c) = self.src.get(self.pos) {
            let exp_sign =
                (c == b'-' || c == b'+') && matches!(self.src.get(self.pos - 1), Some(b'e' | b'E'));
            if c.is_ascii_digit() || c == b'.' || c == b'e' || c == b'E' || exp_sign {
                self.pos += 1;
            } else {
                break;
            }
        }
        let text = std::str::from_utf8(&self.src[start..self.pos]).expect("ascii");
        match text.parse::<f64>() {
            Ok(v) if v.is_finite() => Ok(WeightExpr::Const(v)),
            _ => {
                self.pos = start;
                Err(self.error("invalid number"))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use WeightExpr::*;

    /// (1.5 th)^2 / (1.5 th - u)^2 written with self-multiplication.
    fn congestion_formula() -> WeightExpr {
        let a = || WeightExpr::bin(BinOp::Mul, Const(1.5), Threshold);
        let d = || WeightExpr::bin(BinOp::Sub, a(), Util);
        WeightExpr::bin(
            BinOp::Div,
            WeightExpr::bin(BinOp::Mul, a(), a()),
            WeightExpr::bin(BinOp::Mul, d(), d()),
        )
    }

    fn ctx(util: f64) -> EvalContext {
        EvalContext {
            bw: 100.0,
            dl: 25.0,
            util,
            threshold: 0.8,
        }
    }

    #[test]
    fn congestion_formula_values() {
        let f = congestion_formula();
        let v = f.eval(&ctx(0.6));
        assert!((v - 4.0).abs() < 1e-9);
        assert_eq!(to_weight(v), 4);
        let v = f.eval(&ctx(0.3));
        assert!((v - 1.44 / 0.81).abs() < 1e-12);
        assert_eq!(to_weight(v), 1);
        assert_eq!(f.weight(&ctx(0.0)), 1);
    }

    #[test]
    fn protected_division() {
        let e = WeightExpr::bin(BinOp::Div, Util, Const(0.0));
        assert_eq!(e.eval(&ctx(0.7)), 1.0);
        let e = WeightExpr::bin(BinOp::Div, Bw, Const(5e-10));
        assert_eq!(e.eval(&ctx(0.7)), 1.0);
    }

    #[test]
    fn overflow_saturates() {
        let mut e = Const(100.0);
        for _ in 0..12 {
            e = WeightExpr::bin(BinOp::Mul, e.clone(), e);
        }
        let v = e.eval(&ctx(0.0));
        assert_eq!(v, f64::MAX);
        assert_eq!(to_weight(v), u32::MAX);
        let diff = WeightExpr::bin(BinOp::Sub, e.clone(), e);
        assert_eq!(diff.eval(&ctx(0.0)), 0.0);
    }

    #[test]
    fn to_weight_cases() {
        assert_eq!(to_weight(4.0), 4);
        assert_eq!(to_weight(1.777), 1);
        assert_eq!(to_weight(-2.6), 2);
        assert_eq!(to_weight(0.3), 1);
        assert_eq!(to_weight(0.0), 1);
        assert_eq!(to_weight(3.9999999999999982), 4);
        assert_eq!(to_weight(3.99), 3);
    }

    #[test]
    fn format_and_parse() {
        let f = congestion_formula();
        assert_eq!(
            f.to_string(),
            "(((1.5 * threshold) * (1.5 * threshold)) / (((1.5 * threshold) - util) * ((1.5 * threshold) - util)))"
        );
        assert_eq!(WeightExpr::parse(&f.to_string()).unwrap(), f);
        assert_eq!(WeightExpr::parse("util").unwrap(), Util);
        assert_eq!(
            WeightExpr::parse("  (bw/dl) ").unwrap().to_string(),
            "(bw / dl)"
        );
        assert_eq!(
            WeightExpr::parse("(1e-3 - -2)").unwrap().to_string(),
            "(0.001 - -2)"
        );

        let err = WeightExpr::parse("(1 +").unwrap_err();
        assert_eq!(err.offset, 4);
        let err = WeightExpr::parse("(1 + foo)").unwrap_err();
        assert_eq!(err.offset, 5);
        assert!(WeightExpr::parse("(1 + 2) 3").is_err());
        assert!(WeightExpr::parse("").is_err());
        assert!(WeightExpr::parse("(1 ^ 2)").is_err());
        let deep = "(".repeat(10_000);
        assert!(WeightExpr::parse(&deep).is_err());
    }

    #[test]
    fn grow_depth_one_is_leaf() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            assert!(grow_random(1, &ExprLimits::default(), &mut rng).is_leaf());
        }
    }

    #[test]
    fn grow_is_seed_deterministic() {
        let limits = ExprLimits::default();
        let a = grow_random(15, &limits, &mut ChaCha8Rng::seed_from_u64(42));
        let b = grow_random(15, &limits, &mut ChaCha8Rng::seed_from_u64(42));
        assert_eq!(a, b);
    }

    #[test]
    fn grow_respects_depth_and_constant_range() {
        let limits = ExprLimits::default();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        fn consts_in_range(e: &WeightExpr) -> bool {
            match e {
                Const(c) => (0.0..=100.0).contains(c),
                WeightExpr::Bin(_, l, r) => consts_in_range(l) && consts_in_range(r),
                _ => true,
            }
        }
        for _ in 0..10_000 {
            let e = grow_random(15, &limits, &mut rng);
            assert!(e.depth() <= 15);
            assert!(consts_in_range(&e));
        }
    }

    #[test]
    fn crossover_of_leaves_swaps() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (c1, c2) = crossover(&Util, &Bw, &ExprLimits::default(), &mut rng);
        assert_eq!((c1, c2), (Bw, Util));
    }

    #[test]
    fn crossover_repairs_depth_violations() {
        // A spine of depth 15 whose leaves are all deep; swapping any deep
        // subtree of `b` into a leaf of `a` at depth 15 must be repaired.
        let spine = |leaf: WeightExpr| {
            let mut e = leaf;
            for _ in 1..15 {
                e = WeightExpr::bin(BinOp::Add, e, Dl);
            }
            e
        };
        let a = spine(Util);
        let b = spine(Bw);
        let limits = ExprLimits::default();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut repaired = 0;
        for _ in 0..500 {
            let (c1, c2) = crossover(&a, &b, &limits, &mut rng);
            assert!(c1.depth() <= 15 && c2.depth() <= 15);
            if c1 == a {
                repaired += 1;
            }
        }
        assert!(repaired > 0);
    }

    #[test]
    fn crossover_and_mutation_are_seed_deterministic() {
        let limits = ExprLimits::default();
        let a = congestion_formula();
        let b = grow_random(8, &limits, &mut ChaCha8Rng::seed_from_u64(5));
        let x = crossover(&a, &b, &limits, &mut ChaCha8Rng::seed_from_u64(9));
        let y = crossover(&a, &b, &limits, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(x, y);
        let m1 = mutate(&a, &limits, &mut ChaCha8Rng::seed_from_u64(9));
        let m2 = mutate(&a, &limits, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(m1, m2);
    }

    #[test]
    fn mutating_a_leaf_yields_a_fresh_tree() {
        let limits = ExprLimits::default();
        let m = mutate(&Util, &limits, &mut ChaCha8Rng::seed_from_u64(2));
        let fresh = grow_random(15, &limits, &mut {
            let mut r = ChaCha8Rng::seed_from_u64(2);
            let _ = rand::Rng::random_range(&mut r, 0..1usize);
            r
        });
        assert_eq!(m, fresh);
    }

    #[test]
    fn subtree_indexing() {
        let f = WeightExpr::parse("((bw + dl) * util)").unwrap();
        assert_eq!(f.size(), 5);
        assert_eq!(f.subtree(1).unwrap().0.to_string(), "(bw + dl)");
        assert_eq!(f.subtree(2).unwrap(), (&Bw, 3));
        assert_eq!(f.subtree(4).unwrap(), (&Util, 2));
        assert!(f.subtree(5).is_none());
        assert_eq!(
            f.replace_subtree(1, &Threshold).to_string(),
            "(threshold * util)"
        );
    }

    fn arb_expr() -> impl Strategy<Value = WeightExpr> {
        let leaf = prop_oneof![
            (0.0f64..=100.0).prop_map(Const),
            Just(Bw),
            Just(Dl),
            Just(Util),
            Just(Threshold),
        ];
        leaf.prop_recursive(14, 256, 2, |inner| {
            (0..4usize, inner.clone(), inner)
                .prop_map(|(op, l, r)| WeightExpr::bin(BinOp::ALL[op], l, r))
        })
    }

    proptest! {
        #[test]
        fn parse_inverts_format(e in arb_expr()) {
            prop_assert_eq!(WeightExpr::parse(&e.to_string()).unwrap(), e);
        }

        #[test]
        fn eval_is_finite_and_weight_positive(
            e in arb_expr(),
            bw in 0.1f64..1e5,
            dl in 0.1f64..1e3,
            util in 0.0f64..3.0,
            threshold in 0.01f64..0.99,
        ) {
            let v = e.eval(&EvalContext { bw, dl, util, threshold });
            prop_assert!(v.is_finite());
            prop_assert!(to_weight(v) >= 1);
        }

        #[test]
        fn operators_keep_depth_bound(e in arb_expr(), f in arb_expr(), seed in 0u64..1000) {
            let limits = ExprLimits::default();
            prop_assume!(e.depth() <= 15 && f.depth() <= 15);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (c1, c2) = crossover(&e, &f, &limits, &mut rng);
            prop_assert!(c1.depth() <= 15 && c2.depth() <= 15);
            prop_assert!(mutate(&e, &limits, &mut rng).depth() <= 15);
        }

        #[test]
        fn to_weight_at_least_one(v in proptest::num::f64::NORMAL | proptest::num::f64::ZERO) {
            prop_assert!(to_weight(v) >= 1);
        }
    }
}
