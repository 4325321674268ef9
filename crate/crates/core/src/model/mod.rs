//! Span-extraction QA model: word embeddings, a pre-norm transformer encoder,
//! and an affine start/end head.

mod checkpoint;
mod params;

use std::ops::Range;

use ndarray::{ArrayView1, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{Checkpoint, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
pub use params::{Bound, ParamStore};

use crate::autograd::{Mat, Tape, Var};
use crate::error::{Result, SwepError};
use crate::qa_data::PAD;
use crate::rng::{normal, uniform, SwepRng};

pub const WORD_EMBEDDING: &str = "embed.word";
pub const POSITION_EMBEDDING: &str = "embed.pos";
pub const HEAD_W: &str = "head.w";
pub const HEAD_B: &str = "head.b";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositionalKind {
    Learned,
    Sinusoidal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub d: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ffn_width: usize,
    pub internal_dropout_p: f64,
    pub max_len: usize,
    pub positional: PositionalKind,
    #[serde(default = "default_ln_eps")]
    pub layer_norm_eps: f64,
    /// Standard deviation of the initial word and position embeddings.
    #[serde(default = "default_embed_std")]
    pub embed_init_std: f64,
}

fn default_ln_eps() -> f64 {
    1e-5
}

fn default_embed_std() -> f64 {
    0.5
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            d: 32,
            n_layers: 2,
            n_heads: 2,
            ffn_width: 64,
            internal_dropout_p: 0.0,
            max_len: 64,
            positional: PositionalKind::Learned,
            layer_norm_eps: default_ln_eps(),
            embed_init_std: default_embed_std(),
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.n_layers == 0 || self.n_heads == 0 || self.ffn_width == 0 || self.max_len == 0 {
            return Err(SwepError::Config("encoder sizes must all be at least 1".into()));
        }
        if !self.d.is_multiple_of(self.n_heads) {
            return Err(SwepError::Config(format!(
                "d = {} is not divisible by n_heads = {}",
                self.d, self.n_heads
            )));
        }
        if !(0.0..1.0).contains(&self.internal_dropout_p) {
            return Err(SwepError::Config("internal_dropout_p must be in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d / self.n_heads
    }
}

/// Inverted dropout applied inside the encoder in training mode.
pub struct Dropout<'a> {
    pub p: f64,
    pub rng: &'a mut SwepRng,
}

impl Dropout<'_> {
    fn apply(&mut self, tape: &mut Tape, x: Var) -> Var {
        if self.p <= 0.0 {
            return x;
        }
        let (r, c) = tape.shape(x);
        let keep = 1.0 - self.p;
        let mask = uniform(self.rng, r, c).mapv(|u| if u < keep { 1.0 / keep } else { 0.0 });
        tape.mul_const(x, mask)
    }
}

/// Word-embedding matrix, one row per vocabulary id (row `t` is `e_t`).
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable(pub Mat);

impl EmbeddingTable {
    /// Builds the table from a `d x |V|` matrix whose column `t` is `e_t`.
    pub fn from_columns(w: &Mat) -> Self {
        EmbeddingTable(w.t().to_owned())
    }

    pub fn embedding(&self, id: usize) -> ArrayView1<'_, f64> {
        self.0.row(id)
    }

    pub fn vocab_size(&self) -> usize {
        self.0.nrows()
    }

    pub fn dim(&self) -> usize {
        self.0.ncols()
    }
}

pub struct EncoderOutput {
    /// Final hidden states `h_1 .. h_T` (after the closing layer norm).
    pub hidden: Var,
    /// Residual stream after each block.
    pub layers: Vec<Var>,
}

/// Model layout: shapes and parameter naming for the encoder and span head.
#[derive(Debug, Clone, PartialEq)]
pub struct QaModel {
    pub config: EncoderConfig,
    pub vocab_size: usize,
}

fn lin_init(rng: &mut SwepRng, fan_in: usize, fan_out: usize, gain: f64) -> Mat {
    normal(rng, fan_in, fan_out, gain / (fan_in as f64).sqrt())
}

impl QaModel {
    pub fn new(config: EncoderConfig, vocab_size: usize) -> Result<Self> {
        config.validate()?;
        if vocab_size <= PAD + 1 {
            return Err(SwepError::Config("vocabulary too small".into()));
        }
        Ok(QaModel { config, vocab_size })
    }

    /// Adds freshly initialized encoder, embedding and head tensors to `store`.
    pub fn init_params(&self, store: &mut ParamStore, rng: &mut SwepRng) {
        let c = &self.config;
        let d = c.d;
        let mut word = normal(rng, self.vocab_size, d, c.embed_init_std);
        word.row_mut(PAD).fill(0.0);
        store.insert(WORD_EMBEDDING, word);
        if c.positional == PositionalKind::Learned {
            store.insert(POSITION_EMBEDDING, normal(rng, c.max_len, d, c.embed_init_std));
        }
        let out_gain = 1.0 / ((2 * c.n_layers) as f64).sqrt();
        for l in 0..c.n_layers {
            let p = |s: &str| format!("enc.{l}.{s}");
            store.insert(p("ln1.g"), Mat::ones((1, d)));
            store.insert(p("ln1.b"), Mat::zeros((1, d)));
            for w in ["q", "k", "v"] {
                store.insert(p(&format!("attn.w{w}")), lin_init(rng, d, d, 1.0));
                store.insert(p(&format!("attn.b{w}")), Mat::zeros((1, d)));
            }
            store.insert(p("attn.wo"), lin_init(rng, d, d, out_gain));
            store.insert(p("attn.bo"), Mat::zeros((1, d)));
            store.insert(p("ln2.g"), Mat::ones((1, d)));
            store.insert(p("ln2.b"), Mat::zeros((1, d)));
            store.insert(p("ffn.w1"), lin_init(rng, d, c.ffn_width, 1.0));
            store.insert(p("ffn.b1"), Mat::zeros((1, c.ffn_width)));
            store.insert(p("ffn.w2"), lin_init(rng, c.ffn_width, d, out_gain));
            store.insert(p("ffn.b2"), Mat::zeros((1, d)));
        }
        store.insert("enc.final_ln.g", Mat::ones((1, d)));
        store.insert("enc.final_ln.b", Mat::zeros((1, d)));
        store.insert(HEAD_W, lin_init(rng, d, 2, 1.0));
        store.insert(HEAD_B, Mat::zeros((1, 2)));
    }

    /// Rows `e_t` of the word-embedding table for `token_ids`.
    pub fn embed(&self, tape: &mut Tape, bound: &Bound, token_ids: &[usize]) -> Result<Var> {
        if let Some(&id) = token_ids.iter().find(|&&id| id >= self.vocab_size) {
            return Err(SwepError::TokenOutOfRange {
                id,
                vocab_size: self.vocab_size,
            });
        }
        Ok(tape.gather_rows(bound.var(WORD_EMBEDDING), token_ids))
    }

    fn positions(&self, tape: &mut Tape, bound: &Bound, len: usize) -> Var {
        match self.config.positional {
            PositionalKind::Learned => {
                let ids: Vec<usize> = (0..len).collect();
                tape.gather_rows(bound.var(POSITION_EMBEDDING), &ids)
            }
            PositionalKind::Sinusoidal => tape.constant(sinusoidal(len, self.config.d)),
        }
    }

    fn layer_norm(&self, tape: &mut Tape, bound: &Bound, x: Var, prefix: &str) -> Var {
        let n = tape.layer_norm(x, self.config.layer_norm_eps);
        let g = tape.mul_row(n, bound.var(&format!("{prefix}.g")));
        tape.add_row(g, bound.var(&format!("{prefix}.b")))
    }

    fn affine(tape: &mut Tape, bound: &Bound, x: Var, w: &str, b: &str) -> Var {
        let y = tape.matmul(x, bound.var(w));
        tape.add_row(y, bound.var(b))
    }

    fn attention(&self, tape: &mut Tape, bound: &Bound, x: Var, mask: &[bool], l: usize) -> Var {
        let p = |s: &str| format!("enc.{l}.attn.{s}");
        let q = Self::affine(tape, bound, x, &p("wq"), &p("bq"));
        let k = Self::affine(tape, bound, x, &p("wk"), &p("bk"));
        let v = Self::affine(tape, bound, x, &p("wv"), &p("bv"));
        let hd = self.config.head_dim();
        let scale = 1.0 / (hd as f64).sqrt();
        let heads: Vec<Var> = (0..self.config.n_heads)
            .map(|h| {
                let qh = tape.slice_cols(q, h * hd, hd);
                let kh = tape.slice_cols(k, h * hd, hd);
                let vh = tape.slice_cols(v, h * hd, hd);
                let scores = tape.matmul_nt(qh, kh);
                let scores = tape.scale(scores, scale);
                let weights = tape.softmax_rows_masked(scores, mask);
                tape.matmul(weights, vh)
            })
            .collect();
        let cat = if heads.len() == 1 {
            heads[0]
        } else {
            tape.concat_cols(&heads)
        };
        Self::affine(tape, bound, cat, &p("wo"), &p("bo"))
    }

    /// Runs the encoder over word embeddings (already perturbed, if at all).
    /// Position embeddings are added here.
    pub fn encode(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        word_emb: Var,
        padding_mask: &[bool],
        dropout: Option<&mut Dropout>,
    ) -> Result<Var> {
        Ok(self.encode_layers(tape, bound, word_emb, padding_mask, dropout)?.hidden)
    }

    /// Like [`QaModel::encode`], also returning the residual stream after
    /// every block.
    pub fn encode_layers(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        word_emb: Var,
        padding_mask: &[bool],
        mut dropout: Option<&mut Dropout>,
    ) -> Result<EncoderOutput> {
        let (len, width) = tape.shape(word_emb);
        if len > self.config.max_len {
            return Err(SwepError::SequenceTooLong {
                len,
                max_len: self.config.max_len,
            });
        }
        if width != self.config.d || padding_mask.len() != len {
            return Err(SwepError::Shape(format!(
                "embeddings {len}x{width}, mask {}, d {}",
                padding_mask.len(),
                self.config.d
            )));
        }
        if !padding_mask.iter().any(|&m| m) {
            return Err(SwepError::Shape("padding mask has no real tokens".into()));
        }
        if !tape.value(word_emb).iter().all(|v| v.is_finite()) {
            return Err(SwepError::NonFinite("encoder input embeddings".into()));
        }
        let pos = self.positions(tape, bound, len);
        let mut x = tape.add(word_emb, pos);
        let mut layers = Vec::with_capacity(self.config.n_layers);
        for l in 0..self.config.n_layers {
            let n1 = self.layer_norm(tape, bound, x, &format!("enc.{l}.ln1"));
            let mut a = self.attention(tape, bound, n1, padding_mask, l);
            if let Some(d) = dropout.as_deref_mut() {
                a = d.apply(tape, a);
            }
            x = tape.add(x, a);
            let n2 = self.layer_norm(tape, bound, x, &format!("enc.{l}.ln2"));
            let h = Self::affine(tape, bound, n2, &format!("enc.{l}.ffn.w1"), &format!("enc.{l}.ffn.b1"));
            let h = tape.gelu(h);
            let mut f = Self::affine(tape, bound, h, &format!("enc.{l}.ffn.w2"), &format!("enc.{l}.ffn.b2"));
            if let Some(d) = dropout.as_deref_mut() {
                f = d.apply(tape, f);
            }
            x = tape.add(x, f);
            layers.push(x);
        }
        let hidden = self.layer_norm(tape, bound, x, "enc.final_ln");
        Ok(EncoderOutput { hidden, layers })
    }

    /// Start and end logits as `T x 1` columns.
    pub fn span_logits(&self, tape: &mut Tape, bound: &Bound, hidden: Var) -> (Var, Var) {
        let logits = Self::affine(tape, bound, hidden, HEAD_W, HEAD_B);
        (tape.slice_cols(logits, 0, 1), tape.slice_cols(logits, 1, 1))
    }
}

/// `log p(start) + log p(end)` with padded positions excluded from both
/// softmax normalizers.
pub fn span_log_likelihood(
    tape: &mut Tape,
    start_logits: Var,
    end_logits: Var,
    span: (usize, usize),
    padding_mask: &[bool],
) -> Result<Var> {
    let (s, e) = span;
    let ok = |i: usize| i < padding_mask.len() && padding_mask[i];
    if !ok(s) || !ok(e) || s > e {
        return Err(SwepError::InvalidSpan { start: s, end: e });
    }
    let ls = tape.log_softmax_pick(start_logits, padding_mask, s);
    let le = tape.log_softmax_pick(end_logits, padding_mask, e);
    Ok(tape.add(ls, le))
}

/// Best `(start, end)` with `start <= end <= start + max_answer_len`, both in
/// `context` and unpadded, maximizing `start_logits[s] + end_logits[e]`.
/// Ties go to the smallest start, then the smallest end.
pub fn predict_span(
    start_logits: &[f64],
    end_logits: &[f64],
    padding_mask: &[bool],
    context: Range<usize>,
    max_answer_len: usize,
) -> Result<(usize, usize)> {
    let end_bound = context
        .end
        .min(padding_mask.len())
        .min(start_logits.len())
        .min(end_logits.len());
    let mut best: Option<((usize, usize), f64)> = None;
    for s in context.start..end_bound {
        if !padding_mask[s] {
            continue;
        }
        let last = (s + max_answer_len).min(end_bound - 1);
        for e in s..=last {
            if !padding_mask[e] {
                continue;
            }
            let score = start_logits[s] + end_logits[e];
            if best.is_none_or(|(_, b)| score > b) {
                best = Some(((s, e), score));
            }
        }
    }
    best.map(|(span, _)| span).ok_or(SwepError::InvalidSpan {
        start: context.start,
        end: context.end,
    })
}

/// Fixed sine/cosine position table, `len x d`.
pub fn sinusoidal(len: usize, d: usize) -> Mat {
    Mat::from_shape_fn((len, d), |(pos, i)| {
        let rate = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
        let a = pos as f64 * rate;
        if i % 2 == 0 {
            a.sin()
        } else {
            a.cos()
        }
    })
}

/// Softmax over the unpadded entries of a column; padded entries get 0.
pub fn masked_softmax(logits: &Mat, padding_mask: &[bool]) -> Vec<f64> {
    let col = logits.index_axis(Axis(1), 0);
    let max = col
        .iter()
        .zip(padding_mask)
        .filter(|(_, &m)| m)
        .fold(f64::NEG_INFINITY, |a, (&v, _)| a.max(v));
    let exps: Vec<f64> = col
        .iter()
        .zip(padding_mask)
        .map(|(&v, &m)| if m { (v - max).exp() } else { 0.0 })
        .collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Random draw of `Uniform(-a, a)` used by tests and tools that need quick
/// dense inputs.
pub fn uniform_matrix(rng: &mut impl Rng, rows: usize, cols: usize, a: f64) -> Mat {
    Mat::from_shape_simple_fn((rows, cols), || rng.random_range(-a..a))
}
