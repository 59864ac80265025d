//! Arithmetic expressions: parsing, exact evaluation, and normalisation.
//!
//! Expressions are flat token sequences over numbers, the four binary
//! operators `+ − × ÷`, and round brackets. Parsing produces a binary tree,
//! evaluation runs in exact rational arithmetic (`BigRational`), and
//! [`normalize`] rewrites an expression into a canonical token sequence:
//! operands of commutative operators are ordered by where their numbers
//! first occur in the question, and brackets that exact arithmetic makes
//! redundant are dropped.

use num::bigint::BigInt;
use num::rational::BigRational;
use num::{One, Signed, Zero};
use std::fmt;
use thiserror::Error;

/// Maximum bracket-nesting depth accepted by the parser.
pub const MAX_DEPTH: usize = 64;

/// Canonical operator glyphs. The ASCII spellings `-`, `*` and `/` are
/// accepted on input and mapped onto these.
pub const OP_ADD: &str = "+";
pub const OP_SUB: &str = "\u{2212}"; // −
pub const OP_MUL: &str = "\u{00D7}"; // ×
pub const OP_DIV: &str = "\u{00F7}"; // ÷

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
}

impl BinOp {
    pub fn glyph(self) -> &'static str {
        match self {
            BinOp::Add => OP_ADD,
            BinOp::Sub => OP_SUB,
            BinOp::Mul => OP_MUL,
            BinOp::Div => OP_DIV,
        }
    }

    /// `+ −` bind at 1, `× ÷` at 2.
    pub fn precedence(self) -> u8 {
        match self {
            BinOp::Add | BinOp::Sub => 1,
            BinOp::Mul | BinOp::Div => 2,
        }
    }

    pub fn commutative(self) -> bool {
        matches!(self, BinOp::Add | BinOp::Mul)
    }

    /// Recognise an operator token, canonical or ASCII alias.
    pub fn from_token(tok: &str) -> Option<BinOp> {
        match tok {
            OP_ADD => Some(BinOp::Add),
            OP_SUB | "-" => Some(BinOp::Sub),
            OP_MUL | "*" => Some(BinOp::Mul),
            OP_DIV | "/" => Some(BinOp::Div),
            _ => None,
        }
    }
}

/// Expression tree. Number leaves keep the literal token they were parsed
/// from so that normalisation emits the exact source spelling.
#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Number { value: BigRational, token: String },
    Binary { op: BinOp, left: Box<Expr>, right: Box<Expr> },
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ParseError {
    #[error("empty expression")]
    Empty,
    #[error("unexpected token `{token}` at position {pos}")]
    UnexpectedToken { pos: usize, token: String },
    #[error("expression ends with a dangling operator")]
    DanglingOperator,
    #[error("unbalanced bracket at position {pos}")]
    UnbalancedBracket { pos: usize },
    #[error("invalid number `{token}` at position {pos}")]
    InvalidNumber { pos: usize, token: String },
    #[error("expression nesting exceeds depth {MAX_DEPTH}")]
    DepthExceeded,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EvalError {
    #[error("division by zero")]
    DivisionByZero,
}

/// Parse a single number token: a digit run, an optional fractional part,
/// and an optional trailing `%` which divides the value by 100.
pub fn parse_number_token(tok: &str) -> Option<BigRational> {
    let (body, percent) = match tok.strip_suffix('%') {
        Some(rest) => (rest, true),
        None => (tok, false),
    };
    if body.is_empty() {
        return None;
    }
    let (int_part, frac_part) = match body.split_once('.') {
        Some((i, f)) => (i, f),
        None => (body, ""),
    };
    if int_part.is_empty() || !int_part.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    if body.contains('.') && (frac_part.is_empty() || !frac_part.bytes().all(|b| b.is_ascii_digit())) {
        return None;
    }
    let digits: String = format!("{int_part}{frac_part}");
    let numer: BigInt = digits.parse().ok()?;
    let mut denom = BigInt::from(10u32).pow(frac_part.len() as u32);
    if percent {
        denom *= 100;
    }
    Some(BigRational::new(numer, denom))
}

/// Parse a rational written as an integer, a decimal, or `p/q`, with an
/// optional leading minus sign (ASCII or `−`). Used for answer fields.
pub fn parse_rational(s: &str) -> Option<BigRational> {
    let s = s.trim();
    let (neg, body) = match s.strip_prefix('-').or_else(|| s.strip_prefix('\u{2212}')) {
        Some(rest) => (true, rest),
        None => (false, s),
    };
    let value = if let Some((p, q)) = body.split_once('/') {
        let p: BigInt = p.trim().parse().ok()?;
        let q: BigInt = q.trim().parse().ok()?;
        if q.is_zero() {
            return None;
        }
        BigRational::new(p, q)
    } else {
        parse_number_token(body)?
    };
    Some(if neg { -value } else { value })
}

/// Canonical string form of a rational: `"5"` for integers, `"p/q"` otherwise.
pub fn rational_to_string(r: &BigRational) -> String {
    if r.denom().is_one() {
        r.numer().to_string()
    } else {
        format!("{}/{}", r.numer(), r.denom())
    }
}

struct Parser<'a> {
    toks: &'a [String],
    pos: usize,
}

impl<'a> Parser<'a> {
    fn peek(&self) -> Option<&'a str> {
        self.toks.get(self.pos).map(String::as_str)
    }

    fn parse_expr(&mut self, depth: usize) -> Result<Expr, ParseError> {
        let mut lhs = self.parse_term(depth)?;
        while let Some(op) = self.peek().and_then(BinOp::from_token) {
            if op.precedence() != 1 {
                break;
            }
            self.pos += 1;
            let rhs = self.parse_term(depth)?;
            lhs = Expr::Binary { op, left: Box::new(lhs), right: Box::new(rhs) };
        }
        Ok(lhs)
    }

    fn parse_term(&mut self, depth: usize) -> Result<Expr, ParseError> {
        let mut lhs = self.parse_atom(depth)?;
        while let Some(op) = self.peek().and_then(BinOp::from_token) {
            if op.precedence() != 2 {
                break;
            }
            self.pos += 1;
            let rhs = self.parse_atom(depth)?;
            lhs = Expr::Binary { op, left: Box::new(lhs), right: Box::new(rhs) };
        }
        Ok(lhs)
    }

    fn parse_atom(&mut self, depth: usize) -> Result<Expr, ParseError> {
        if depth >= MAX_DEPTH {
            return Err(ParseError::DepthExceeded);
        }
        let pos = self.pos;
        let tok = match self.peek() {
            Some(t) => t,
            None => return Err(ParseError::DanglingOperator),
        };
        if tok == "(" {
            self.pos += 1;
            let inner = self.parse_expr(depth + 1)?;
            match self.peek() {
                Some(")") => {
                    self.pos += 1;
                    Ok(inner)
                }
                Some(t) => Err(ParseError::UnexpectedToken { pos: self.pos, token: t.to_string() }),
                None => Err(ParseError::UnbalancedBracket { pos }),
            }
        } else if tok == ")" || BinOp::from_token(tok).is_some() {
            Err(ParseError::UnexpectedToken { pos, token: tok.to_string() })
        } else {
            match parse_number_token(tok) {
                Some(value) => {
                    self.pos += 1;
                    Ok(Expr::Number { value, token: tok.to_string() })
                }
                None => Err(ParseError::InvalidNumber { pos, token: tok.to_string() }),
            }
        }
    }
}

/// Parse an expression token sequence into a tree. Operators are
/// left-associative; `× ÷` bind tighter than `+ −`.
pub fn parse(tokens: &[String]) -> Result<Expr, ParseError> {
    if tokens.is_empty() {
        return Err(ParseError::Empty);
    }
    let mut p = Parser { toks: tokens, pos: 0 };
    let expr = p.parse_expr(0)?;
    match p.peek() {
        None => Ok(expr),
        Some(")") => Err(ParseError::UnbalancedBracket { pos: p.pos }),
        Some(t) => Err(ParseError::UnexpectedToken { pos: p.pos, token: t.to_string() }),
    }
}

/// Evaluate a tree exactly. The only failure mode is division by zero.
pub fn evaluate(expr: &Expr) -> Result<BigRational, EvalError> {
    match expr {
        Expr::Number { value, .. } => Ok(value.clone()),
        Expr::Binary { op, left, right } => {
            let l = evaluate(left)?;
            let r = evaluate(right)?;
            Ok(match op {
                BinOp::Add => l + r,
                BinOp::Sub => l - r,
                BinOp::Mul => l * r,
                BinOp::Div => {
                    if r.is_zero() {
                        return Err(EvalError::DivisionByZero);
                    }
                    l / r
                }
            })
        }
    }
}

fn emit(expr: &Expr, parent_prec: u8, right_of: Option<BinOp>, out: &mut Vec<String>) {
    match expr {
        Expr::Number { token, .. } => out.push(token.clone()),
        Expr::Binary { op, left, right } => {
            let prec = op.precedence();
            // Brackets are required when this node binds looser than its
            // parent, or when it sits right of `−` or `÷` at equal
            // precedence (dropping them would re-associate the chain and
            // change the value).
            let parens = prec < parent_prec
                || (prec == parent_prec && matches!(right_of, Some(BinOp::Sub) | Some(BinOp::Div)));
            if parens {
                out.push("(".to_string());
            }
            emit(left, prec, None, out);
            out.push(op.glyph().to_string());
            emit(right, prec, Some(*op), out);
            if parens {
                out.push(")".to_string());
            }
        }
    }
}

/// Serialise a tree to tokens with the minimal brackets that preserve its
/// value under exact arithmetic.
pub fn to_tokens(expr: &Expr) -> Vec<String> {
    let mut out = Vec::new();
    emit(expr, 0, None, &mut out);
    out
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&to_tokens(self).join(" "))
    }
}

/// Smallest index in `question` at which any number token of the subtree
/// occurs, or `u64::MAX` when none does.
fn min_occurrence(expr: &Expr, question: &[String]) -> u64 {
    match expr {
        Expr::Number { token, .. } => question
            .iter()
            .position(|q| q == token)
            .map(|i| i as u64)
            .unwrap_or(u64::MAX),
        Expr::Binary { left, right, .. } => {
            min_occurrence(left, question).min(min_occurrence(right, question))
        }
    }
}

fn sort_key(expr: &Expr, question: &[String]) -> (u64, String) {
    (min_occurrence(expr, question), to_tokens(expr).join(" "))
}

fn canon(expr: Expr, question: &[String]) -> Expr {
    match expr {
        Expr::Number { .. } => expr,
        Expr::Binary { op, left, right } => {
            let l = canon(*left, question);
            let r = canon(*right, question);
            if op.commutative() && sort_key(&r, question) < sort_key(&l, question) {
                Expr::Binary { op, left: Box::new(r), right: Box::new(l) }
            } else {
                Expr::Binary { op, left: Box::new(l), right: Box::new(r) }
            }
        }
    }
}

/// Normalise an expression against its question.
///
/// Operands of `+` and `×` are ordered by the first occurrence of their
/// numbers in the question (subtrees without question numbers sort last;
/// ties fall back to the emitted string), then the tree is serialised with
/// minimal brackets. Because dropping brackets re-associates chains, the
/// rewrite is applied to a fixed point: the result reparses and normalises
/// to itself, and evaluation is unchanged throughout.
pub fn normalize(expr: &Expr, question: &[String]) -> Vec<String> {
    let mut toks = to_tokens(&canon(expr.clone(), question));
    for _ in 0..MAX_DEPTH {
        let reparsed = parse(&toks).expect("normalised output must reparse");
        let next = to_tokens(&canon(reparsed, question));
        if next == toks {
            break;
        }
        toks = next;
    }
    toks
}

/// [`normalize`] starting from a token sequence.
pub fn normalize_tokens(tokens: &[String], question: &[String]) -> Result<Vec<String>, ParseError> {
    Ok(normalize(&parse(tokens)?, question))
}

/// Answer comparison: `|predicted − gold| ≤ tol · max(1, |gold|)`, computed
/// exactly with `tol` taken at its binary `f64` value.
pub fn answers_equal(predicted: &BigRational, gold: &BigRational, tol: f64) -> bool {
    let tol = match BigRational::from_float(tol) {
        Some(t) if !t.is_negative() => t,
        _ => return false,
    };
    let one = BigRational::one();
    let scale = if gold.abs() > one { gold.abs() } else { one };
    (predicted - gold).abs() <= tol * scale
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_string).collect()
    }

    fn rat(n: i64) -> BigRational {
        BigRational::from_integer(BigInt::from(n))
    }

    #[test]
    fn precedence_and_associativity() {
        let e = parse(&toks("2 + 3 × 4")).unwrap();
        assert_eq!(evaluate(&e).unwrap(), rat(14));
        let e = parse(&toks("10 − 3 − 4")).unwrap();
        assert_eq!(evaluate(&e).unwrap(), rat(3));
        let e = parse(&toks("24 ÷ 4 ÷ 2")).unwrap();
        assert_eq!(evaluate(&e).unwrap(), rat(3));
        let e = parse(&toks("( 2 + 3 ) × 4")).unwrap();
        assert_eq!(evaluate(&e).unwrap(), rat(20));
    }

    #[test]
    fn ascii_aliases_parse() {
        let e = parse(&toks("8 / 2 - 1 * 3")).unwrap();
        assert_eq!(evaluate(&e).unwrap(), rat(1));
    }

    #[test]
    fn worked_case_roof_area() {
        // Box 18 long, 10 wide, 2 high; paint all faces except the bottom.
        let e = parse(&toks("( 18 × 10 + 10 × 2 + 18 × 2 ) × 2 − 18 × 10")).unwrap();
        assert_eq!(evaluate(&e).unwrap(), rat(292));
    }

    #[test]
    fn worked_case_score_adjustment() {
        let e = parse(&toks("20 − ( 20 × 5 − 86 ) ÷ ( 5 + 2 )")).unwrap();
        assert_eq!(evaluate(&e).unwrap(), rat(18));
    }

    #[test]
    fn parse_errors() {
        assert_eq!(parse(&[]).unwrap_err(), ParseError::Empty);
        assert_eq!(parse(&toks("2 +")).unwrap_err(), ParseError::DanglingOperator);
        assert_eq!(
            parse(&toks("( 2 + 3")).unwrap_err(),
            ParseError::UnbalancedBracket { pos: 0 }
        );
        assert_eq!(
            parse(&toks("2 + 3 )")).unwrap_err(),
            ParseError::UnbalancedBracket { pos: 3 }
        );
        assert_eq!(
            parse(&toks("2 3")).unwrap_err(),
            ParseError::UnexpectedToken { pos: 1, token: "3".into() }
        );
        assert_eq!(
            parse(&toks("+ 2")).unwrap_err(),
            ParseError::UnexpectedToken { pos: 0, token: "+".into() }
        );
        assert_eq!(
            parse(&toks("2 + x")).unwrap_err(),
            ParseError::InvalidNumber { pos: 2, token: "x".into() }
        );
    }

    #[test]
    fn depth_limit() {
        let mut deep = String::new();
        for _ in 0..MAX_DEPTH + 1 {
            deep.push_str("( ");
        }
        deep.push('7');
        for _ in 0..MAX_DEPTH + 1 {
            deep.push_str(" )");
        }
        assert_eq!(parse(&toks(&deep)).unwrap_err(), ParseError::DepthExceeded);
        let mut ok = String::new();
        for _ in 0..MAX_DEPTH - 1 {
            ok.push_str("( ");
        }
        ok.push('7');
        for _ in 0..MAX_DEPTH - 1 {
            ok.push_str(" )");
        }
        assert_eq!(evaluate(&parse(&toks(&ok)).unwrap()).unwrap(), rat(7));
    }

    #[test]
    fn division_by_zero() {
        let e = parse(&toks("5 ÷ ( 3 − 3 )")).unwrap();
        assert_eq!(evaluate(&e).unwrap_err(), EvalError::DivisionByZero);
    }

    #[test]
    fn percent_and_decimal_tokens() {
        let e = parse(&toks("200 × 3.5%")).unwrap();
        assert_eq!(evaluate(&e).unwrap(), rat(7));
        assert_eq!(parse_number_token("3.5"), Some(BigRational::new(7.into(), 2.into())));
        assert_eq!(parse_number_token("3."), None);
        assert_eq!(parse_number_token(".5"), None);
        assert_eq!(parse_number_token("%"), None);
    }

    #[test]
    fn parse_rational_forms() {
        assert_eq!(parse_rational("7/2"), Some(BigRational::new(7.into(), 2.into())));
        assert_eq!(parse_rational("-3"), Some(rat(-3)));
        assert_eq!(parse_rational("3.25"), Some(BigRational::new(13.into(), 4.into())));
        assert_eq!(parse_rational("1/0"), None);
        assert_eq!(rational_to_string(&rat(5)), "5");
        assert_eq!(rational_to_string(&BigRational::new(7.into(), 2.into())), "7/2");
    }

    #[test]
    fn normalize_drops_redundant_brackets() {
        let q = toks("a b c");
        assert_eq!(normalize_tokens(&toks("( 3 + 5 )"), &q).unwrap(), toks("3 + 5"));
        assert_eq!(
            normalize_tokens(&toks("2 + ( 3 × 4 )"), &q).unwrap(),
            toks("2 + 3 × 4")
        );
        assert_eq!(
            normalize_tokens(&toks("2 + ( 3 − 4 )"), &q).unwrap(),
            toks("2 + 3 − 4")
        );
        assert_eq!(
            normalize_tokens(&toks("2 − ( 3 + 4 )"), &q).unwrap(),
            toks("2 − ( 3 + 4 )")
        );
        assert_eq!(
            normalize_tokens(&toks("2 × ( 3 ÷ 4 )"), &q).unwrap(),
            toks("2 × 3 ÷ 4")
        );
        assert_eq!(
            normalize_tokens(&toks("2 ÷ ( 3 × 4 )"), &q).unwrap(),
            toks("2 ÷ ( 3 × 4 )")
        );
    }

    #[test]
    fn normalize_orders_by_question_occurrence() {
        let q = toks("the yard is 18 wide and 10 long");
        assert_eq!(normalize_tokens(&toks("10 × 18"), &q).unwrap(), toks("18 × 10"));
        assert_eq!(normalize_tokens(&toks("18 × 10"), &q).unwrap(), toks("18 × 10"));
        // Subtrees without question numbers sort after those with them.
        assert_eq!(
            normalize_tokens(&toks("7 + 18"), &q).unwrap(),
            toks("18 + 7")
        );
        // Non-commutative operands stay put.
        assert_eq!(normalize_tokens(&toks("10 − 18"), &q).unwrap(), toks("10 − 18"));
    }

    #[test]
    fn normalize_reaches_fixed_point_on_reassociating_chain() {
        // (1 + 3) + (1 + 9) re-associates once brackets drop; the fixed
        // point settles the chain order.
        let q: Vec<String> = Vec::new();
        let once = normalize_tokens(&toks("( 1 + 3 ) + ( 1 + 9 )"), &q).unwrap();
        let twice = normalize_tokens(&once, &q).unwrap();
        assert_eq!(once, twice);
        let e = parse(&toks("( 1 + 3 ) + ( 1 + 9 )")).unwrap();
        let n = parse(&once).unwrap();
        assert_eq!(evaluate(&e), evaluate(&n));
    }

    #[test]
    fn answers_equal_tolerance() {
        let five = rat(5);
        let close = parse_rational("5.0004").unwrap();
        let off = parse_rational("5.01").unwrap();
        assert!(answers_equal(&close, &five, 1e-4));
        assert!(!answers_equal(&off, &five, 1e-4));
        assert!(answers_equal(&rat(0), &parse_rational("0.00005").unwrap(), 1e-4));
    }
}
