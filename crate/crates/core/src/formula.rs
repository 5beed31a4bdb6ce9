//! Mixed-model formula mini-language.
//!
//! Grammar:
//!
//! ```text
//! formula   := ident "~" rhs
//! rhs       := item ("+" item)*
//! item      := term_expr | "(" block_rhs "|" ident ")"
//! block_rhs := block_term ("+" block_term)*
//! block_term:= "0" | "1" | term_expr
//! term_expr := factor (("*" | ":") factor)*
//! ident     := [A-Za-z_][A-Za-z0-9_.]*
//! ```
//!
//! `:` binds tighter than `*`, as in R: `a*b:c` is `a + b:c + a:b:c`.
//! `a*b` expands to the main effects followed by the interaction. Inside a
//! random block the intercept is included unless `0 +` is written; a leading
//! `1 +` is accepted and redundant. The fixed intercept is always present.
//!
//! Nested grouping, `||` blocks and inline transformations are not supported;
//! pre-transform columns before modeling.

use crate::data::{ColumnKind, ColumnSchema};
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::fmt;
use thiserror::Error;

/// A product of distinct variables; `|vars| = 1` is a main effect, larger
/// sets are interactions. Two terms are equal when their variable sets are,
/// regardless of written order.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Term {
    vars: Vec<String>,
}

impl Term {
    pub fn new(vars: Vec<String>) -> Self {
        Term { vars }
    }

    pub fn vars(&self) -> &[String] {
        &self.vars
    }

    pub fn order(&self) -> usize {
        self.vars.len()
    }

    fn key(&self) -> BTreeSet<&str> {
        self.vars.iter().map(|s| s.as_str()).collect()
    }
}

impl PartialEq for Term {
    fn eq(&self, other: &Self) -> bool {
        self.key() == other.key()
    }
}

impl Eq for Term {}

impl fmt::Display for Term {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.vars.join(":"))
    }
}

/// One `(terms | group)` random-effects block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RandomBlock {
    pub group: String,
    pub intercept: bool,
    pub slopes: Vec<Term>,
}

/// Parsed and expanded model formula.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub response: String,
    pub fixed_terms: Vec<Term>,
    pub random_blocks: Vec<RandomBlock>,
    /// The fixed intercept is always present.
    pub intercept: bool,
}

impl ModelSpec {
    /// Every distinct variable referenced by fixed terms or random slopes,
    /// in first-appearance order. Grouping factors are not included.
    pub fn predictor_vars(&self) -> Vec<String> {
        let mut seen = Vec::new();
        let terms = self
            .fixed_terms
            .iter()
            .chain(self.random_blocks.iter().flat_map(|b| b.slopes.iter()));
        for t in terms {
            for v in t.vars() {
                if !seen.iter().any(|s| s == v) {
                    seen.push(v.clone());
                }
            }
        }
        seen
    }

    /// Render the spec back to formula text. Interactions print with `:`,
    /// so `parse(print(parse(f)))` equals `parse(f)`.
    pub fn to_formula(&self) -> String {
        let mut parts: Vec<String> = self.fixed_terms.iter().map(|t| t.to_string()).collect();
        if parts.is_empty() {
            parts.push("1".to_string());
        }
        for b in &self.random_blocks {
            let mut inner: Vec<String> = Vec::new();
            if b.intercept {
                inner.push("1".to_string());
            } else {
                inner.push("0".to_string());
            }
            inner.extend(b.slopes.iter().map(|t| t.to_string()));
            parts.push(format!("({} | {})", inner.join(" + "), b.group));
        }
        format!("{} ~ {}", self.response, parts.join(" + "))
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum FormulaError {
    #[error("formula: syntax error at byte {offset}: {message}")]
    Syntax { offset: usize, message: String },
    #[error("formula: variable `{var}` repeated within one term at byte {offset}")]
    RepeatedVariable { var: String, offset: usize },
    #[error("formula: duplicate term `{term}`")]
    DuplicateTerm { term: String },
    #[error("formula: duplicate slope term `{term}` in block `{group}`")]
    DuplicateSlope { term: String, group: String },
    #[error("formula: response `{name}` appears on the right-hand side")]
    ResponseOnRhs { name: String },
    #[error("formula: empty random block at byte {offset}")]
    EmptyRandomBlock { offset: usize },
    #[error("formula: unknown column `{name}`")]
    UnknownColumn { name: String },
    #[error("formula: column `{name}` has kind {kind}, not usable as {role}")]
    WrongKind {
        name: String,
        kind: String,
        role: String,
    },
    #[error("formula: response `{name}` is not binary ({detail})")]
    ResponseNotBinary { name: String, detail: String },
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Ident(String),
    Zero,
    One,
    Tilde,
    Plus,
    Star,
    Colon,
    Pipe,
    LParen,
    RParen,
    End,
}

struct Lexer<'a> {
    src: &'a str,
    pos: usize,
}

impl<'a> Lexer<'a> {
    fn new(src: &'a str) -> Self {
        Lexer { src, pos: 0 }
    }

    fn skip_ws(&mut self) {
        while let Some(c) = self.src[self.pos..].chars().next() {
            if c.is_whitespace() {
                self.pos += c.len_utf8();
            } else {
                break;
            }
        }
    }

    fn next(&mut self) -> Result<(Tok, usize), FormulaError> {
        self.skip_ws();
        let start = self.pos;
        let Some(c) = self.src[self.pos..].chars().next() else {
            return Ok((Tok::End, start));
        };
        let tok = match c {
            '~' => Tok::Tilde,
            '+' => Tok::Plus,
            '*' => Tok::Star,
            ':' => Tok::Colon,
            '|' => Tok::Pipe,
            '(' => Tok::LParen,
            ')' => Tok::RParen,
            '0' => Tok::Zero,
            '1' => Tok::One,
            c if c.is_ascii_alphabetic() || c == '_' => {
                let mut end = self.pos;
                for ch in self.src[self.pos..].chars() {
                    if ch.is_ascii_alphanumeric() || ch == '_' || ch == '.' {
                        end += ch.len_utf8();
                    } else {
                        break;
                    }
                }
                let ident = self.src[self.pos..end].to_string();
                self.pos = end;
                return Ok((Tok::Ident(ident), start));
            }
            other => {
                return Err(FormulaError::Syntax {
                    offset: start,
                    message: format!("unexpected character `{other}`"),
                })
            }
        };
        self.pos += c.len_utf8();
        Ok((tok, start))
    }
}

struct Parser<'a> {
    lexer: Lexer<'a>,
    tok: Tok,
    offset: usize,
}

impl<'a> Parser<'a> {
    fn new(src: &'a str) -> Result<Self, FormulaError> {
        let mut lexer = Lexer::new(src);
        let (tok, offset) = lexer.next()?;
        Ok(Parser { lexer, tok, offset })
    }

    fn bump(&mut self) -> Result<(), FormulaError> {
        let (tok, offset) = self.lexer.next()?;
        self.tok = tok;
        self.offset = offset;
        Ok(())
    }

    fn expect_ident(&mut self, what: &str) -> Result<String, FormulaError> {
        match std::mem::replace(&mut self.tok, Tok::End) {
            Tok::Ident(name) => {
                self.bump()?;
                Ok(name)
            }
            other => {
                self.tok = other;
                Err(self.unexpected(what))
            }
        }
    }

    fn unexpected(&self, what: &str) -> FormulaError {
        FormulaError::Syntax {
            offset: self.offset,
            message: format!("expected {what}"),
        }
    }

    /// Chain of factors joined by `*` and `:`. `:` groups adjacent factors
    /// into one interaction unit; `*` expands over units into all non-empty
    /// subsets, mains first, then by increasing interaction order.
    fn term_expr(&mut self) -> Result<Vec<Term>, FormulaError> {
        let mut units: Vec<Vec<(String, usize)>> = Vec::new();
        let first = self.factor()?;
        units.push(vec![first]);
        loop {
            match self.tok {
                Tok::Colon => {
                    self.bump()?;
                    let f = self.factor()?;
                    units.last_mut().unwrap().push(f);
                }
                Tok::Star => {
                    self.bump()?;
                    let f = self.factor()?;
                    units.push(vec![f]);
                }
                _ => break,
            }
        }
        // Reject a variable repeated within one combined term up front.
        for unit in &units {
            for (i, (v, _)) in unit.iter().enumerate() {
                if let Some((_, off)) = unit[i + 1..].iter().find(|(w, _)| w == v) {
                    return Err(FormulaError::RepeatedVariable {
                        var: v.clone(),
                        offset: *off,
                    });
                }
            }
        }
        let n = units.len();
        let mut terms = Vec::new();
        // Subsets of units ordered by size then by unit position.
        for size in 1..=n {
            for mask in 1u32..(1 << n) {
                if mask.count_ones() as usize != size {
                    continue;
                }
                let mut vars: Vec<(String, usize)> = Vec::new();
                for (i, unit) in units.iter().enumerate() {
                    if mask & (1 << i) != 0 {
                        vars.extend(unit.iter().cloned());
                    }
                }
                for (i, (v, _)) in vars.iter().enumerate() {
                    if let Some((_, off)) = vars[i + 1..].iter().find(|(w, _)| w == v) {
                        return Err(FormulaError::RepeatedVariable {
                            var: v.clone(),
                            offset: *off,
                        });
                    }
                }
                terms.push(Term::new(vars.into_iter().map(|(v, _)| v).collect()));
            }
        }
        Ok(terms)
    }

    fn factor(&mut self) -> Result<(String, usize), FormulaError> {
        let offset = self.offset;
        let name = self.expect_ident("a variable name")?;
        Ok((name, offset))
    }

    fn random_block(&mut self) -> Result<RandomBlock, FormulaError> {
        let open_offset = self.offset;
        self.bump()?; // consume '('
        let mut intercept = true;
        let mut slopes: Vec<Term> = Vec::new();
        loop {
            match &self.tok {
                Tok::Zero => {
                    intercept = false;
                    self.bump()?;
                }
                Tok::One => {
                    intercept = true;
                    self.bump()?;
                }
                Tok::Ident(_) => {
                    for term in self.term_expr()? {
                        slopes.push(term);
                    }
                }
                _ => return Err(self.unexpected("`0`, `1` or a variable name")),
            }
            match self.tok {
                Tok::Plus => self.bump()?,
                Tok::Pipe => break,
                _ => return Err(self.unexpected("`+` or `|`")),
            }
        }
        self.bump()?; // consume '|'
        let group = self.expect_ident("a grouping factor name")?;
        if self.tok != Tok::RParen {
            return Err(self.unexpected("`)`"));
        }
        self.bump()?;
        if !intercept && slopes.is_empty() {
            return Err(FormulaError::EmptyRandomBlock {
                offset: open_offset,
            });
        }
        for (i, t) in slopes.iter().enumerate() {
            if slopes[i + 1..].contains(t) {
                return Err(FormulaError::DuplicateSlope {
                    term: t.to_string(),
                    group,
                });
            }
        }
        Ok(RandomBlock {
            group,
            intercept,
            slopes,
        })
    }
}

/// Parse formula text into a validated, fully expanded [`ModelSpec`].
pub fn parse_formula(text: &str) -> Result<ModelSpec, FormulaError> {
    let mut p = Parser::new(text)?;
    let response = p.expect_ident("a response name")?;
    if p.tok != Tok::Tilde {
        return Err(p.unexpected("`~`"));
    }
    p.bump()?;

    let mut fixed_terms: Vec<Term> = Vec::new();
    let mut random_blocks: Vec<RandomBlock> = Vec::new();
    loop {
        match &p.tok {
            Tok::LParen => {
                let block = p.random_block()?;
                random_blocks.push(block);
            }
            Tok::One => {
                // explicit intercept; always present anyway
                p.bump()?;
            }
            Tok::Ident(_) => {
                for term in p.term_expr()? {
                    fixed_terms.push(term);
                }
            }
            _ => return Err(p.unexpected("a term or `(terms | group)` block")),
        }
        match p.tok {
            Tok::Plus => p.bump()?,
            Tok::End => break,
            _ => return Err(p.unexpected("`+` or end of formula")),
        }
    }

    for (i, t) in fixed_terms.iter().enumerate() {
        if fixed_terms[i + 1..].contains(t) {
            return Err(FormulaError::DuplicateTerm {
                term: t.to_string(),
            });
        }
    }
    let all_vars = fixed_terms
        .iter()
        .chain(random_blocks.iter().flat_map(|b| b.slopes.iter()))
        .flat_map(|t| t.vars().iter());
    for v in all_vars {
        if *v == response {
            return Err(FormulaError::ResponseOnRhs { name: response });
        }
    }
    for b in &random_blocks {
        if b.group == response {
            return Err(FormulaError::ResponseOnRhs { name: response });
        }
    }

    Ok(ModelSpec {
        response,
        fixed_terms,
        random_blocks,
        intercept: true,
    })
}

/// Check a parsed spec against a column schema: every referenced column must
/// exist with a compatible kind and the response must be binary.
pub fn validate_spec(spec: &ModelSpec, schema: &ColumnSchema) -> Result<(), FormulaError> {
    let resp = schema
        .get(&spec.response)
        .ok_or_else(|| FormulaError::UnknownColumn {
            name: spec.response.clone(),
        })?;
    match resp {
        ColumnKind::Response { levels } => {
            if let Some(levels) = levels {
                if levels.len() != 2 {
                    return Err(FormulaError::ResponseNotBinary {
                        name: spec.response.clone(),
                        detail: format!("{} declared levels", levels.len()),
                    });
                }
            }
        }
        other => {
            return Err(FormulaError::WrongKind {
                name: spec.response.clone(),
                kind: other.kind_name().to_string(),
                role: "response".to_string(),
            })
        }
    }

    for var in spec.predictor_vars() {
        let kind = schema
            .get(&var)
            .ok_or_else(|| FormulaError::UnknownColumn { name: var.clone() })?;
        if matches!(kind, ColumnKind::Response { .. }) {
            return Err(FormulaError::WrongKind {
                name: var,
                kind: "response".to_string(),
                role: "predictor".to_string(),
            });
        }
    }
    for b in &spec.random_blocks {
        let kind = schema
            .get(&b.group)
            .ok_or_else(|| FormulaError::UnknownColumn {
                name: b.group.clone(),
            })?;
        if !matches!(kind, ColumnKind::Factor { .. }) {
            return Err(FormulaError::WrongKind {
                name: b.group.clone(),
                kind: kind.kind_name().to_string(),
                role: "grouping factor".to_string(),
            });
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::schema_from_pairs;

    fn term(vars: &[&str]) -> Term {
        Term::new(vars.iter().map(|s| s.to_string()).collect())
    }

    #[test]
    fn expands_star_and_keeps_block() {
        let spec = parse_formula("y ~ a*b + (1 + a | subj)").unwrap();
        assert_eq!(spec.response, "y");
        assert_eq!(
            spec.fixed_terms,
            vec![term(&["a"]), term(&["b"]), term(&["a", "b"])]
        );
        assert_eq!(spec.random_blocks.len(), 1);
        let b = &spec.random_blocks[0];
        assert_eq!(b.group, "subj");
        assert!(b.intercept);
        assert_eq!(b.slopes, vec![term(&["a"])]);
    }

    #[test]
    fn parses_two_block_behavioral_design() {
        let spec =
            parse_formula("acc ~ order*cond + trial + (1 + cond | subj) + (1 + order | item)")
                .unwrap();
        assert_eq!(spec.fixed_terms.len(), 4);
        assert_eq!(
            spec.fixed_terms,
            vec![
                term(&["order"]),
                term(&["cond"]),
                term(&["order", "cond"]),
                term(&["trial"])
            ]
        );
        assert_eq!(spec.random_blocks.len(), 2);
        assert_eq!(spec.random_blocks[0].group, "subj");
        assert_eq!(spec.random_blocks[1].group, "item");
    }

    #[test]
    fn duplicate_term_is_an_error() {
        let err = parse_formula("y ~ a + a").unwrap_err();
        assert_eq!(
            err,
            FormulaError::DuplicateTerm {
                term: "a".to_string()
            }
        );
        // a:b and b:a are the same set
        let err = parse_formula("y ~ a:b + b:a").unwrap_err();
        assert!(matches!(err, FormulaError::DuplicateTerm { .. }));
    }

    #[test]
    fn self_interaction_is_rejected() {
        assert!(matches!(
            parse_formula("y ~ a:a"),
            Err(FormulaError::RepeatedVariable { .. })
        ));
        assert!(matches!(
            parse_formula("y ~ a*a"),
            Err(FormulaError::RepeatedVariable { .. })
        ));
    }

    #[test]
    fn response_on_rhs_is_an_error() {
        assert_eq!(
            parse_formula("y ~ a + y").unwrap_err(),
            FormulaError::ResponseOnRhs {
                name: "y".to_string()
            }
        );
    }

    #[test]
    fn empty_or_zero_block_is_an_error() {
        assert!(matches!(
            parse_formula("y ~ a + (0 | subj)"),
            Err(FormulaError::EmptyRandomBlock { .. })
        ));
    }

    #[test]
    fn syntax_error_reports_byte_offset() {
        let err = parse_formula("y ~ a + ").unwrap_err();
        assert_eq!(
            err,
            FormulaError::Syntax {
                offset: 8,
                message: "expected a term or `(terms | group)` block".to_string()
            }
        );
        let err = parse_formula("y ~ a ? b").unwrap_err();
        assert!(matches!(err, FormulaError::Syntax { offset: 6, .. }));
    }

    #[test]
    fn colon_binds_tighter_than_star() {
        let spec = parse_formula("y ~ a*b:c").unwrap();
        assert_eq!(
            spec.fixed_terms,
            vec![term(&["a"]), term(&["b", "c"]), term(&["a", "b", "c"])]
        );
    }

    #[test]
    fn zero_plus_drops_block_intercept() {
        let spec = parse_formula("y ~ a + (0 + a | g)").unwrap();
        assert!(!spec.random_blocks[0].intercept);
        let spec = parse_formula("y ~ a + (a | g)").unwrap();
        assert!(spec.random_blocks[0].intercept);
    }

    #[test]
    fn nway_star_yields_all_subsets() {
        let spec = parse_formula("y ~ a*b*c*d").unwrap();
        assert_eq!(spec.fixed_terms.len(), 15);
        // mains first
        assert_eq!(spec.fixed_terms[0], term(&["a"]));
        assert_eq!(spec.fixed_terms[3], term(&["d"]));
        assert_eq!(spec.fixed_terms[14], term(&["a", "b", "c", "d"]));
    }

    #[test]
    fn print_parse_roundtrip() {
        for f in [
            "y ~ a*b + (1 + a | subj)",
            "acc ~ order*cond + trial + (1 + cond | subj) + (1 + order | item)",
            "y ~ 1 + (1 | g)",
            "y ~ a + (0 + a | g)",
        ] {
            let spec = parse_formula(f).unwrap();
            let reparsed = parse_formula(&spec.to_formula()).unwrap();
            assert_eq!(spec, reparsed, "roundtrip failed for {f}");
        }
    }

    #[test]
    fn validates_against_schema() {
        let spec = parse_formula("y ~ a + x + (1 | g)").unwrap();
        let schema = schema_from_pairs(&[
            ("y", ColumnKind::Response { levels: None }),
            (
                "a",
                ColumnKind::Factor {
                    levels: vec!["l1".into(), "l2".into()],
                },
            ),
            ("x", ColumnKind::Covariate),
            (
                "g",
                ColumnKind::Factor {
                    levels: vec!["g1".into(), "g2".into()],
                },
            ),
        ]);
        validate_spec(&spec, &schema).unwrap();

        let bad = parse_formula("y ~ f0 + (1 | g)").unwrap();
        assert_eq!(
            validate_spec(&bad, &schema).unwrap_err(),
            FormulaError::UnknownColumn {
                name: "f0".to_string()
            }
        );
    }

    #[test]
    fn three_level_response_declaration_is_not_binary() {
        let spec = parse_formula("y ~ a").unwrap();
        let schema = schema_from_pairs(&[
            (
                "y",
                ColumnKind::Response {
                    levels: Some(vec!["a".into(), "b".into(), "c".into()]),
                },
            ),
            (
                "a",
                ColumnKind::Factor {
                    levels: vec!["l1".into(), "l2".into()],
                },
            ),
        ]);
        assert!(matches!(
            validate_spec(&spec, &schema),
            Err(FormulaError::ResponseNotBinary { .. })
        ));
    }

    #[test]
    fn perception_style_design_validates() {
        // Nine-column schema: binary factors, three covariates, response;
        // slopes distributed over subject and item blocks.
        let f = "stressed ~ primary*func + f0*intensity*duration + prevmark + instr \
                 + (1 + primary + func + f0 + intensity + f0:intensity | subject) \
                 + (1 + instr + prevmark | word)";
        let spec = parse_formula(f).unwrap();
        let mut cols = vec![
            ("stressed", ColumnKind::Response { levels: None }),
            ("f0", ColumnKind::Covariate),
            ("intensity", ColumnKind::Covariate),
            ("duration", ColumnKind::Covariate),
        ];
        for name in ["primary", "func", "prevmark", "instr", "subject", "word"] {
            cols.push((
                name,
                ColumnKind::Factor {
                    levels: vec!["yes".into(), "no".into()],
                },
            ));
        }
        let schema = schema_from_pairs(&cols);
        validate_spec(&spec, &schema).unwrap();
        assert_eq!(spec.random_blocks[0].slopes.len(), 5);
        assert_eq!(spec.random_blocks[1].slopes.len(), 2);
    }
}
