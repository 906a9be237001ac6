use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Rooted binary tree of generator indices; `Node(f, g)` is `[f, g]`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum BracketWord {
    Leaf(usize),
    Node(Box<BracketWord>, Box<BracketWord>),
}

impl BracketWord {
    pub fn leaf(i: usize) -> Self {
        BracketWord::Leaf(i)
    }

    pub fn bracket(f: BracketWord, g: BracketWord) -> Self {
        BracketWord::Node(Box::new(f), Box::new(g))
    }

    /// Number of bracket applications.
    pub fn depth(&self) -> usize {
        match self {
            BracketWord::Leaf(_) => 0,
            BracketWord::Node(f, g) => 1 + f.depth() + g.depth(),
        }
    }

    /// Largest leaf index.
    pub fn max_index(&self) -> usize {
        match self {
            BracketWord::Leaf(i) => *i,
            BracketWord::Node(f, g) => f.max_index().max(g.max_index()),
        }
    }
}

impl fmt::Display for BracketWord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BracketWord::Leaf(i) => write!(f, "V{i}"),
            BracketWord::Node(a, b) => write!(f, "[{a},{b}]"),
        }
    }
}

impl FromStr for BracketWord {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s: String = s.chars().filter(|c| !c.is_whitespace()).collect();
        let (w, rest) = parse(&s)?;
        if !rest.is_empty() {
            return Err(Error::Parse(format!("trailing input in word: {rest}")));
        }
        Ok(w)
    }
}

fn parse(s: &str) -> Result<(BracketWord, &str)> {
    if let Some(rest) = s.strip_prefix('[') {
        let (a, rest) = parse(rest)?;
        let rest = rest.strip_prefix(',').ok_or_else(|| Error::Parse(format!("expected ',' in {s}")))?;
        let (b, rest) = parse(rest)?;
        let rest = rest.strip_prefix(']').ok_or_else(|| Error::Parse(format!("expected ']' in {s}")))?;
        Ok((BracketWord::bracket(a, b), rest))
    } else if let Some(rest) = s.strip_prefix('V') {
        let end = rest.find(|c: char| !c.is_ascii_digit()).unwrap_or(rest.len());
        let i: usize = rest[..end].parse().map_err(|_| Error::Parse(format!("bad index in {s}")))?;
        Ok((BracketWord::Leaf(i), &rest[end..]))
    } else {
        Err(Error::Parse(format!("unexpected input: {s}")))
    }
}

impl serde::Serialize for BracketWord {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}
