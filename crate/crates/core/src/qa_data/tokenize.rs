use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use super::vocab::{Vocabulary, END, SEP, START};
use super::{RawExample, TokenizedExample};
use crate::error::{Result, SwepError};

/// A normalized token and its character range `[start, end)` in the source text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TextToken {
    pub text: String,
    pub start: usize,
    pub end: usize,
}

fn is_punct(c: char) -> bool {
    !c.is_alphanumeric() && !c.is_whitespace()
}

/// Splits on whitespace, splits punctuation characters into their own tokens,
/// and lowercases.
pub fn tokenize_text(text: &str) -> Vec<TextToken> {
    let mut out = Vec::new();
    let mut current: Option<(String, usize)> = None;
    let flush = |cur: &mut Option<(String, usize)>, end: usize, out: &mut Vec<TextToken>| {
        if let Some((s, start)) = cur.take() {
            out.push(TextToken {
                text: s.to_lowercase(),
                start,
                end,
            });
        }
    };
    for (i, c) in text.chars().enumerate() {
        if c.is_whitespace() {
            flush(&mut current, i, &mut out);
        } else if is_punct(c) {
            flush(&mut current, i, &mut out);
            out.push(TextToken {
                text: c.to_lowercase().collect(),
                start: i,
                end: i + 1,
            });
        } else {
            match &mut current {
                Some((s, _)) => s.push(c),
                None => current = Some((c.to_string(), i)),
            }
        }
    }
    let n = text.chars().count();
    flush(&mut current, n, &mut out);
    out
}

/// Joins token strings with single spaces.
pub fn detokenize(vocab: &Vocabulary, ids: &[usize]) -> String {
    ids.iter()
        .map(|&id| vocab.token(id).unwrap_or("[UNK]"))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Lays out `[START] question [SEP] context [END]` and maps the answer's
/// character span onto token positions.
pub fn tokenize_and_align(ex: &RawExample, vocab: &Vocabulary) -> Result<TokenizedExample> {
    let align_err = |message: String| SwepError::Alignment {
        id: ex.id.clone(),
        message,
    };
    let q = tokenize_text(&ex.question);
    let c = tokenize_text(&ex.context);
    if q.is_empty() {
        return Err(align_err("empty question".into()));
    }
    if c.is_empty() {
        return Err(align_err("empty context".into()));
    }

    let (ctx_start, ctx_end) = align_span(ex, &c).ok_or_else(|| {
        align_err(format!(
            "answer {:?} at char {} does not fall on token boundaries",
            ex.answer_text, ex.answer_char_start
        ))
    })?;

    let m = q.len();
    let l = c.len();
    let mut token_ids = Vec::with_capacity(l + m + 3);
    token_ids.push(START);
    token_ids.extend(q.iter().map(|t| vocab.id(&t.text)));
    token_ids.push(SEP);
    token_ids.extend(c.iter().map(|t| vocab.id(&t.text)));
    token_ids.push(END);

    Ok(TokenizedExample {
        id: ex.id.clone(),
        token_ids,
        question_len: m,
        context_len: l,
        span: (m + 2 + ctx_start, m + 2 + ctx_end),
        context_offsets: c.iter().map(|t| (t.start, t.end)).collect(),
    })
}

/// Inclusive context-token span of the answer.
///
/// The given character offset wins when its boundaries coincide with token
/// boundaries. Otherwise the first left-to-right match of the answer's token
/// sequence is used.
fn align_span(ex: &RawExample, ctx: &[TextToken]) -> Option<(usize, usize)> {
    let answer = ex.answer_text.trim_end();
    let lead = answer.chars().take_while(|c| c.is_whitespace()).count();
    let char_start = ex.answer_char_start + lead;
    let char_end = ex.answer_char_start + answer.chars().count();
    let s = ctx.iter().position(|t| t.start == char_start);
    let e = ctx.iter().position(|t| t.end == char_end);
    if let (Some(s), Some(e)) = (s, e) {
        if s <= e {
            return Some((s, e));
        }
    }
    let needle: Vec<String> = tokenize_text(answer).into_iter().map(|t| t.text).collect();
    if needle.is_empty() || needle.len() > ctx.len() {
        return None;
    }
    (0..=ctx.len() - needle.len())
        .find(|&i| ctx[i..i + needle.len()].iter().zip(&needle).all(|(t, n)| &t.text == n))
        .map(|i| (i, i + needle.len() - 1))
}

/// Writes one JSON record `{id, token_ids, M, L, span}` per line.
pub fn write_tokenized_cache(path: &Path, examples: &[TokenizedExample]) -> Result<()> {
    let file = File::create(path).map_err(|e| SwepError::io(path, e))?;
    let mut w = BufWriter::new(file);
    for ex in examples {
        let line = serde_json::to_string(ex).map_err(|e| SwepError::Parse {
            path: path.into(),
            message: e.to_string(),
        })?;
        writeln!(w, "{line}").map_err(|e| SwepError::io(path, e))?;
    }
    w.flush().map_err(|e| SwepError::io(path, e))
}

pub fn read_tokenized_cache(path: &Path) -> Result<Vec<TokenizedExample>> {
    let file = File::open(path).map_err(|e| SwepError::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| SwepError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let ex: TokenizedExample = serde_json::from_str(&line).map_err(|e| SwepError::Parse {
            path: path.into(),
            message: format!("line {}: {e}", n + 1),
        })?;
        out.push(ex);
    }
    Ok(out)
}
