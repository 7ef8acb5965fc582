//! Whitespace-separated numeric text files with byte offsets in errors.

use std::str::FromStr;

use crate::error::{Error, Result};

/// One line of tokens, each paired with its absolute byte offset.
pub(crate) struct Line<'a> {
    pub offset: u64,
    pub tokens: Vec<(u64, &'a str)>,
}

/// Non-empty lines of `text`; `#` starts a comment.
pub(crate) fn lines(text: &str) -> Vec<Line<'_>> {
    let mut out = Vec::new();
    let mut offset = 0u64;
    for raw in text.split_inclusive('\n') {
        let body = raw.split('#').next().unwrap_or("");
        let mut tokens = Vec::new();
        let mut col = 0usize;
        for piece in body.split(|c: char| c.is_ascii_whitespace()) {
            if !piece.is_empty() {
                tokens.push((offset + col as u64, piece));
            }
            col += piece.len() + 1;
        }
        if !tokens.is_empty() {
            out.push(Line { offset, tokens });
        }
        offset += raw.len() as u64;
    }
    out
}

impl Line<'_> {
    /// Parses exactly `N` tokens.
    pub fn fields<T: FromStr, const N: usize>(&self, what: &'static str) -> Result<[T; N]> {
        if self.tokens.len() != N {
            return Err(Error::format(
                what,
                self.offset,
                format!("expected {N} fields, found {}", self.tokens.len()),
            ));
        }
        let mut v = Vec::with_capacity(N);
        for &(off, tok) in &self.tokens {
            v.push(
                tok.parse::<T>()
                    .map_err(|_| Error::format(what, off, format!("bad number {tok:?}")))?,
            );
        }
        Ok(v.try_into().unwrap_or_else(|_| unreachable!()))
    }
}
