//! Argument token grammar: `{{ref:NODE/OUTPUT}}` and `{{param:KEY}}`.

use std::fmt;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Segment<'a> {
    Text(&'a str),
    Ref { node: &'a str, output: &'a str },
    Param(&'a str),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenError {
    pub offset: usize,
    pub fragment: String,
}

impl fmt::Display for TokenError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "malformed token `{}` at offset {}", self.fragment, self.offset)
    }
}

const REF_OPEN: &str = "{{ref:";
const PARAM_OPEN: &str = "{{param:";
const CLOSE: &str = "}}";

pub fn is_identifier(s: &str) -> bool {
    !s.is_empty()
        && s
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.'))
}

/// Splits `s` into text and token segments. Any `{{ref:` or `{{param:` that does
/// not form a well-formed token is an error; other braces are plain text.
pub fn parse(s: &str) -> Result<Vec<Segment<'_>>, TokenError> {
    let mut out = Vec::new();
    let mut rest = s;
    let mut base = 0;
    loop {
        let next = [REF_OPEN, PARAM_OPEN]
            .iter()
            .filter_map(|open| rest.find(open).map(|i| (i, *open)))
            .min_by_key(|(i, _)| *i);
        let Some((start, open)) = next else {
            if !rest.is_empty() {
                out.push(Segment::Text(rest));
            }
            return Ok(out);
        };
        if start > 0 {
            out.push(Segment::Text(&rest[..start]));
        }
        let body_start = start + open.len();
        let err = || TokenError {
            offset: base + start,
            fragment: rest[start..].chars().take(48).collect(),
        };
        let close = rest[body_start..].find(CLOSE).ok_or_else(err)? + body_start;
        let body = &rest[body_start..close];
        if open == REF_OPEN {
            let (node, output) = body.split_once('/').ok_or_else(err)?;
            if !is_identifier(node) || !is_identifier(output) {
                return Err(err());
            }
            out.push(Segment::Ref { node, output });
        } else {
            if !is_identifier(body) {
                return Err(err());
            }
            out.push(Segment::Param(body));
        }
        let consumed = close + CLOSE.len();
        base += consumed;
        rest = &rest[consumed..];
    }
}

pub fn ref_token(node: &str, output: &str) -> String {
    format!("{{{{ref:{node}/{output}}}}}")
}

pub fn param_token(key: &str) -> String {
    format!("{{{{param:{key}}}}}")
}

/// Reference tokens in `s`, ignoring malformed ones.
pub fn refs(s: &str) -> Vec<(&str, &str)> {
    parse(s)
        .map(|segs| {
            segs.into_iter()
                .filter_map(|seg| match seg {
                    Segment::Ref { node, output } => Some((node, output)),
                    _ => None,
                })
                .collect()
        })
        .unwrap_or_default()
}

/// Rebuilds a string, letting `f` rewrite each token segment.
pub fn rewrite<E>(
    s: &str,
    mut f: impl FnMut(&Segment<'_>) -> Result<Option<String>, E>,
) -> Result<String, RewriteError<E>> {
    let segs = parse(s).map_err(RewriteError::Token)?;
    let mut out = String::with_capacity(s.len());
    for seg in &segs {
        match f(seg).map_err(RewriteError::Inner)? {
            Some(text) => out.push_str(&text),
            None => out.push_str(&render(seg)),
        }
    }
    Ok(out)
}

#[derive(Debug)]
pub enum RewriteError<E> {
    Token(TokenError),
    Inner(E),
}

pub fn render(seg: &Segment<'_>) -> String {
    match seg {
        Segment::Text(t) => (*t).to_string(),
        Segment::Ref { node, output } => ref_token(node, output),
        Segment::Param(k) => param_token(k),
    }
}
