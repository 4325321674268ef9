use ndarray::Array2;

use super::vocab::PAD;
use super::TokenizedExample;
use crate::error::{Result, SwepError};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RowInfo {
    pub id: String,
    pub len: usize,
    pub question_len: usize,
    pub context_len: usize,
}

/// Examples padded with `PAD` to the longest sequence in the batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub token_ids: Array2<usize>,
    /// `true` exactly on real tokens.
    pub padding_mask: Array2<bool>,
    pub spans: Vec<(usize, usize)>,
    pub rows: Vec<RowInfo>,
}

impl Batch {
    pub fn size(&self) -> usize {
        self.rows.len()
    }

    pub fn width(&self) -> usize {
        self.token_ids.ncols()
    }

    pub fn ids_row(&self, r: usize) -> Vec<usize> {
        self.token_ids.row(r).to_vec()
    }

    pub fn mask_row(&self, r: usize) -> Vec<bool> {
        self.padding_mask.row(r).to_vec()
    }

    /// Context positions of row `r`.
    pub fn context_range(&self, r: usize) -> std::ops::Range<usize> {
        let row = &self.rows[r];
        row.question_len + 2..row.question_len + 2 + row.context_len
    }

    /// Recovers the examples that went in (without character offsets).
    pub fn unbatch(&self) -> Vec<TokenizedExample> {
        self.rows
            .iter()
            .enumerate()
            .map(|(r, info)| TokenizedExample {
                id: info.id.clone(),
                token_ids: self.token_ids.row(r).iter().take(info.len).copied().collect(),
                question_len: info.question_len,
                context_len: info.context_len,
                span: self.spans[r],
                context_offsets: Vec::new(),
            })
            .collect()
    }
}

/// Splits `examples` in order into batches of at most `batch_size`.
pub fn batchify(examples: &[TokenizedExample], batch_size: usize) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(SwepError::Config("batch_size must be at least 1".into()));
    }
    if examples.is_empty() {
        return Err(SwepError::Empty("no examples to batch".into()));
    }
    Ok(examples.chunks(batch_size).map(pad_chunk).collect())
}

fn pad_chunk(chunk: &[TokenizedExample]) -> Batch {
    let width = chunk.iter().map(TokenizedExample::len).max().unwrap_or(0);
    let mut token_ids = Array2::from_elem((chunk.len(), width), PAD);
    let mut padding_mask = Array2::from_elem((chunk.len(), width), false);
    for (r, ex) in chunk.iter().enumerate() {
        for (c, &id) in ex.token_ids.iter().enumerate() {
            token_ids[[r, c]] = id;
            padding_mask[[r, c]] = true;
        }
    }
    Batch {
        token_ids,
        padding_mask,
        spans: chunk.iter().map(|e| e.span).collect(),
        rows: chunk
            .iter()
            .map(|e| RowInfo {
                id: e.id.clone(),
                len: e.len(),
                question_len: e.question_len,
                context_len: e.context_len,
            })
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ex(id: &str, q: usize, c: usize) -> TokenizedExample {
        let mut token_ids = vec![1];
        token_ids.extend((0..q).map(|i| 5 + i));
        token_ids.push(2);
        token_ids.extend((0..c).map(|i| 7 + i));
        token_ids.push(3);
        TokenizedExample {
            id: id.into(),
            token_ids,
            question_len: q,
            context_len: c,
            span: (q + 2, q + 2),
            context_offsets: vec![],
        }
    }

    #[test]
    fn pads_to_batch_width() {
        let batches = batchify(&[ex("a", 2, 3), ex("b", 2, 5)], 2).unwrap();
        assert_eq!(batches.len(), 1);
        let b = &batches[0];
        assert_eq!(b.width(), 10);
        assert_eq!(b.padding_mask.row(0).iter().filter(|m| !**m).count(), 2);
        assert_eq!(b.token_ids[[0, 9]], PAD);
    }

    #[test]
    fn batch_of_one_has_no_padding() {
        for b in batchify(&[ex("a", 2, 3), ex("b", 2, 5)], 1).unwrap() {
            assert!(b.padding_mask.iter().all(|&m| m));
        }
    }

    #[test]
    fn errors_on_empty_or_zero() {
        assert!(batchify(&[], 2).is_err());
        assert!(batchify(&[ex("a", 1, 1)], 0).is_err());
    }

    proptest! {
        #[test]
        fn batching_conserves_tokens_and_roundtrips(
            shapes in prop::collection::vec((1usize..5, 1usize..9), 1..12),
            bs in 1usize..6,
        ) {
            let exs: Vec<_> = shapes.iter().enumerate().map(|(i, &(q, c))| ex(&i.to_string(), q, c)).collect();
            let batches = batchify(&exs, bs).unwrap();
            let real: usize = batches.iter().map(|b| b.padding_mask.iter().filter(|&&m| m).count()).sum();
            prop_assert_eq!(real, exs.iter().map(TokenizedExample::len).sum::<usize>());
            let back: Vec<_> = batches.iter().flat_map(Batch::unbatch).collect();
            prop_assert_eq!(back, exs);
        }
    }
}
