//! Model formulas of the form
//! `resp ~ term + ... + (1 | outer/inner)` where a term is a column name,
//! `factor(name)` or `1`.

use std::fmt;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Term {
    Column(String),
    Factor(String),
}

impl Term {
    pub fn column(&self) -> &str {
        match self {
            Term::Column(c) | Term::Factor(c) => c,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelFormula {
    pub response: String,
    /// Fixed-effect terms; the intercept is always included.
    pub fixed: Vec<Term>,
    /// Random-intercept grouping factors, outermost first.
    pub random: Vec<String>,
}

impl ModelFormula {
    /// Every column the model reads: response, fixed terms, grouping factors.
    pub fn variables(&self) -> Vec<String> {
        let mut out = vec![self.response.clone()];
        out.extend(self.fixed.iter().map(|t| t.column().to_string()));
        out.extend(self.random.iter().cloned());
        out.dedup();
        out
    }
}

impl fmt::Display for ModelFormula {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} ~ ", self.response)?;
        let mut parts: Vec<String> = self
            .fixed
            .iter()
            .map(|t| match t {
                Term::Column(c) => c.clone(),
                Term::Factor(c) => format!("factor({c})"),
            })
            .collect();
        if !self.random.is_empty() {
            parts.push(format!("(1 | {})", self.random.join("/")));
        }
        if parts.is_empty() {
            parts.push("1".into());
        }
        write!(f, "{}", parts.join(" + "))
    }
}

struct Parser<'a> {
    src: &'a str,
    pos: usize,
}

impl<'a> Parser<'a> {
    fn err<T>(&self, msg: impl Into<String>) -> Result<T> {
        Err(Error::ParseError {
            pos: self.pos,
            msg: msg.into(),
        })
    }

    fn skip_ws(&mut self) {
        while let Some(c) = self.src[self.pos..].chars().next() {
            if !c.is_whitespace() {
                break;
            }
            self.pos += c.len_utf8();
        }
    }

    fn peek(&mut self) -> Option<char> {
        self.skip_ws();
        self.src[self.pos..].chars().next()
    }

    fn eat(&mut self, c: char) -> bool {
        if self.peek() == Some(c) {
            self.pos += c.len_utf8();
            true
        } else {
            false
        }
    }

    fn expect(&mut self, c: char) -> Result<()> {
        if self.eat(c) {
            Ok(())
        } else {
            self.err(format!("expected `{c}`"))
        }
    }

    fn name(&mut self) -> Result<&'a str> {
        self.skip_ws();
        let start = self.pos;
        let rest = &self.src[start..];
        let len = rest
            .char_indices()
            .take_while(|&(i, c)| {
                c == '_' || c.is_ascii_alphabetic() || (i > 0 && (c.is_ascii_digit() || c == '.'))
            })
            .map(|(i, c)| i + c.len_utf8())
            .last()
            .unwrap_or(0);
        if len == 0 {
            return self.err("expected a name");
        }
        self.pos += len;
        Ok(&self.src[start..start + len])
    }

    fn random_part(&mut self) -> Result<Vec<String>> {
        // '(' already consumed.
        self.expect('1')?;
        self.expect('|')?;
        let mut groups = vec![self.name()?.to_string()];
        if self.eat('/') {
            groups.push(self.name()?.to_string());
        }
        self.expect(')')?;
        Ok(groups)
    }

    fn term(&mut self, fixed: &mut Vec<Term>) -> Result<Option<Vec<String>>> {
        match self.peek() {
            Some('(') => {
                self.pos += 1;
                Ok(Some(self.random_part()?))
            }
            Some('1') => {
                self.pos += 1;
                Ok(None)
            }
            _ => {
                let n = self.name()?;
                if n == "factor" && self.eat('(') {
                    let inner = self.name()?;
                    self.expect(')')?;
                    fixed.push(Term::Factor(inner.to_string()));
                } else {
                    fixed.push(Term::Column(n.to_string()));
                }
                Ok(None)
            }
        }
    }

    fn formula(&mut self) -> Result<ModelFormula> {
        let response = self.name()?.to_string();
        self.expect('~')?;
        let mut fixed = Vec::new();
        let mut random = Vec::new();
        loop {
            if !random.is_empty() {
                return self.err("the random-effects term must come last");
            }
            if let Some(g) = self.term(&mut fixed)? {
                random = g;
            }
            if !self.eat('+') {
                break;
            }
        }
        if self.peek().is_some() {
            return self.err("unexpected trailing input");
        }
        if fixed.iter().any(|t| t.column() == response) {
            return Err(Error::ParseError {
                pos: 0,
                msg: format!("response `{response}` also appears as a predictor"),
            });
        }
        Ok(ModelFormula {
            response,
            fixed,
            random,
        })
    }
}

pub fn parse_formula(text: &str) -> Result<ModelFormula> {
    Parser { src: text, pos: 0 }.formula()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn simple_random_intercept() {
        let f = parse_formula("y ~ x + (1|id)").unwrap();
        assert_eq!(f.response, "y");
        assert_eq!(f.fixed, vec![Term::Column("x".into())]);
        assert_eq!(f.random, vec!["id"]);
    }

    #[test]
    fn nested_grouping_and_factor() {
        let f = parse_formula("y ~ a + factor(s) + (1|school/id)").unwrap();
        assert_eq!(f.fixed, vec![Term::Column("a".into()), Term::Factor("s".into())]);
        assert_eq!(f.random, vec!["school", "id"]);
    }

    #[test]
    fn unclosed_group_reports_offset() {
        let text = "y ~ (1|id";
        match parse_formula(text) {
            Err(Error::ParseError { pos, .. }) => assert_eq!(pos, text.len()),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn whitespace_insensitive() {
        let a = parse_formula("numeracy_score~prev_dep+time+factor(ses)+(1|school/id)").unwrap();
        let b = parse_formula("  numeracy_score ~ prev_dep +  time + factor( ses ) + ( 1 | school / id ) ").unwrap();
        assert_eq!(a, b);
        assert_eq!(parse_formula(&a.to_string()).unwrap(), a);
    }

    #[test]
    fn intercept_only_forms() {
        assert!(parse_formula("y ~ 1").unwrap().fixed.is_empty());
        assert_eq!(parse_formula("y ~ (1 | g)").unwrap().random, vec!["g"]);
    }

    #[test]
    fn malformed_inputs() {
        for bad in ["~ x", "y x", "y ~", "y ~ x +", "y ~ (1|a) + x", "y ~ (2|a)", "y ~ x y", "y ~ y"] {
            assert!(matches!(parse_formula(bad), Err(Error::ParseError { .. })), "{bad}");
        }
    }
}
