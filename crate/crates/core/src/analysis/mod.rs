//! Measurements of what the perturbation does to embeddings: back-projection
//! word-change ratios, per-token perturbation intensity and frequency-bucket
//! statistics, plus report files.

mod report;

#[cfg(test)]
mod tests;

use ndarray::ArrayView1;
use serde::{Deserialize, Serialize};

pub use report::{emit_report, read_report, render_report, SCHEMA_VERSION};

use crate::autograd::{Mat, Tape};
use crate::baselines::{dropout_mask, AugmenterKind, MaskKind};
use crate::error::{Result, SwepError};
use crate::model::{EmbeddingTable, ParamStore, QaModel};
use crate::noise::{draw_epsilon, sample_prior_noise, NoiseGenerator, NoiseSource, PriorConfig};
use crate::qa_data::{TokenizedExample, Vocabulary};
use crate::rng::{uniform, SwepRng};

/// Argmax of `W_e^T v` over vocabulary ids; ties go to the smallest id.
pub fn back_project(table: &EmbeddingTable, v: ArrayView1<f64>) -> usize {
    let mut best = 0;
    let mut best_score = f64::NEG_INFINITY;
    for (id, row) in table.0.rows().into_iter().enumerate() {
        let s = row.dot(&v);
        if s > best_score {
            best = id;
            best_score = s;
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChangeRatio {
    /// Share of tokens whose back-projection differs from the token itself.
    pub raw: f64,
    /// Share of tokens whose back-projection differs from the
    /// back-projection of the unperturbed embedding.
    pub corrected: f64,
}

/// Word-change ratio over unpadded positions. `perturbed` has one row per
/// position.
pub fn word_change_ratio(
    table: &EmbeddingTable,
    original_ids: &[usize],
    perturbed: &Mat,
    padding_mask: &[bool],
) -> Result<ChangeRatio> {
    if original_ids.len() != perturbed.nrows() || padding_mask.len() != perturbed.nrows() {
        return Err(SwepError::Shape(format!(
            "{} ids, {} perturbed rows, mask {}",
            original_ids.len(),
            perturbed.nrows(),
            padding_mask.len()
        )));
    }
    let (mut n, mut raw, mut corrected) = (0usize, 0usize, 0usize);
    for (t, &id) in original_ids.iter().enumerate() {
        if !padding_mask[t] {
            continue;
        }
        if id >= table.vocab_size() {
            return Err(SwepError::TokenOutOfRange {
                id,
                vocab_size: table.vocab_size(),
            });
        }
        n += 1;
        let moved = back_project(table, perturbed.row(t));
        raw += usize::from(moved != id);
        corrected += usize::from(moved != back_project(table, table.embedding(id)));
    }
    if n == 0 {
        return Err(SwepError::Empty("no unpadded positions".into()));
    }
    Ok(ChangeRatio {
        raw: raw as f64 / n as f64,
        corrected: corrected as f64 / n as f64,
    })
}

/// `(token, ||e_t - e~_t||_2)` for every unpadded position, in order.
pub fn perturbation_intensity(
    e: &Mat,
    perturbed: &Mat,
    tokens: &[usize],
    padding_mask: &[bool],
) -> Result<Vec<(usize, f64)>> {
    if e.dim() != perturbed.dim() || tokens.len() != e.nrows() || padding_mask.len() != e.nrows() {
        return Err(SwepError::Shape("intensity inputs disagree in shape".into()));
    }
    Ok((0..e.nrows())
        .filter(|&t| padding_mask[t])
        .map(|t| {
            let d = &e.row(t) - &perturbed.row(t);
            (tokens[t], d.dot(&d).sqrt())
        })
        .collect())
}

/// Noise drawn by a trained generator on one example.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseObservation {
    pub id: String,
    pub token_ids: Vec<usize>,
    pub embeddings: Mat,
    pub mu: Mat,
    pub sigma2: Mat,
    pub perturbed: Mat,
}

/// Runs the encoder and generator on each example and draws one perturbation.
pub fn observe_noise(
    model: &QaModel,
    generator: &NoiseGenerator,
    store: &ParamStore,
    examples: &[TokenizedExample],
    source: NoiseSource,
    additive: bool,
    rng: &mut SwepRng,
) -> Result<Vec<NoiseObservation>> {
    examples
        .iter()
        .map(|ex| {
            let mut tape = Tape::new();
            let bound = store.bind_frozen(&mut tape);
            let mask = ex.padding_mask();
            let e = model.embed(&mut tape, &bound, &ex.token_ids)?;
            let out = model.encode_layers(&mut tape, &bound, e, &mask, None)?;
            let h = match source {
                NoiseSource::Final => out.hidden,
                NoiseSource::Layer(l) => *out
                    .layers
                    .get(l)
                    .ok_or_else(|| SwepError::Config(format!("no encoder layer {l}")))?,
            };
            let params = generator.infer_noise_params(&mut tape, &bound, h, true)?;
            let (mu, sigma2) = params.values(&tape);
            let eps = draw_epsilon(rng, ex.len(), generator.d);
            let z = &mu + &(sigma2.mapv(f64::sqrt) * &eps);
            let emb = tape.value(e).clone();
            let perturbed = if additive { &emb + &z } else { &emb * &z };
            Ok(NoiseObservation {
                id: ex.id.clone(),
                token_ids: ex.token_ids.clone(),
                embeddings: emb,
                mu,
                sigma2,
                perturbed,
            })
        })
        .collect()
}

/// Applies a non-learned augmenter to `e` with fresh draws from `rng`.
pub fn perturb_with(kind: AugmenterKind, p: f64, alpha: f64, e: &Mat, rng: &mut SwepRng) -> Result<Mat> {
    let (t, d) = e.dim();
    Ok(match kind {
        AugmenterKind::GaussianDropout => e * &dropout_mask(MaskKind::Gaussian, p, &draw_epsilon(rng, t, d))?,
        AugmenterKind::BernoulliDropout => e * &dropout_mask(MaskKind::Bernoulli, p, &uniform(rng, t, d))?,
        AugmenterKind::WordDropout => {
            let u = uniform(rng, t, 1);
            let mut out = e.clone();
            for r in 0..t {
                if u[[r, 0]] < p {
                    out.row_mut(r).fill(0.0);
                }
            }
            out
        }
        AugmenterKind::PriorAug => {
            e * &sample_prior_noise(&PriorConfig::multiplicative(alpha), &draw_epsilon(rng, t, d))?
        }
        other => {
            return Err(SwepError::Config(format!("{other} has no stand-alone perturbation")));
        }
    })
}

/// Frequency-rank bucket `(lo, hi]` (ranks are 1-based).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankBucket {
    pub lo: usize,
    pub hi: usize,
}

/// `[1,100], (100,500], (500,5K], (5K,10K]`, plus `(10K, |V|]` when the
/// vocabulary is larger. Bounds are clipped to `n_ranked`, so buckets
/// past the vocabulary are empty.
pub fn rank_buckets(n_ranked: usize) -> Vec<RankBucket> {
    let mut edges = vec![0, 100, 500, 5_000, 10_000];
    if n_ranked > 10_000 {
        edges.push(n_ranked);
    }
    edges
        .windows(2)
        .map(|w| RankBucket {
            lo: w[0].min(n_ranked),
            hi: w[1].min(n_ranked),
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BucketStats {
    pub bucket: RankBucket,
    pub n_tokens: usize,
    /// Occurrences of bucket members in the observed sample.
    pub n_occurrences: usize,
    /// Mean distance from each member to its `k` nearest other embeddings.
    pub knn_l2: Option<f64>,
    /// Mean `||e - e~||_2` over occurrences.
    pub pre_post_l2: Option<f64>,
    /// Mean over occurrences of `(1/d) sum_i mu_i`.
    pub mean_mu: Option<f64>,
}

fn l2(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Mean distance from `id` to its `k` nearest neighbours among `pool`
/// (itself excluded), by exhaustive search.
pub fn knn_distance(table: &EmbeddingTable, id: usize, pool: &[usize], k: usize) -> Option<f64> {
    let mut d: Vec<f64> = pool
        .iter()
        .filter(|&&j| j != id)
        .map(|&j| l2(table.embedding(id), table.embedding(j)))
        .collect();
    if d.is_empty() || k == 0 {
        return None;
    }
    d.sort_by(f64::total_cmp);
    let k = k.min(d.len());
    Some(d[..k].iter().sum::<f64>() / k as f64)
}

fn mean(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

/// Per-bucket geometry and noise statistics. Empty buckets report `None`.
pub fn frequency_bucket_stats(
    table: &EmbeddingTable,
    vocab: &Vocabulary,
    observations: &[NoiseObservation],
    k: usize,
) -> Result<Vec<BucketStats>> {
    if k < 1 {
        return Err(SwepError::Config("k must be at least 1".into()));
    }
    if table.vocab_size() != vocab.len() {
        return Err(SwepError::Shape(format!(
            "table has {} rows, vocabulary {}",
            table.vocab_size(),
            vocab.len()
        )));
    }
    let ranked = vocab.ranked_ids();
    let mut bucket_of = vec![None; vocab.len()];
    let buckets = rank_buckets(ranked.len());
    for (b, bucket) in buckets.iter().enumerate() {
        for &id in &ranked[bucket.lo..bucket.hi] {
            bucket_of[id] = Some(b);
        }
    }
    let mut pre_post = vec![Vec::new(); buckets.len()];
    let mut mus = vec![Vec::new(); buckets.len()];
    for obs in observations {
        for (t, &id) in obs.token_ids.iter().enumerate() {
            if let Some(b) = bucket_of.get(id).copied().flatten() {
                pre_post[b].push(l2(obs.embeddings.row(t), obs.perturbed.row(t)));
                mus[b].push(obs.mu.row(t).mean().unwrap_or(0.0));
            }
        }
    }
    Ok(buckets
        .iter()
        .enumerate()
        .map(|(b, &bucket)| {
            let members = &ranked[bucket.lo..bucket.hi];
            let knn: Vec<f64> = members
                .iter()
                .filter_map(|&id| knn_distance(table, id, &ranked, k))
                .collect();
            BucketStats {
                bucket,
                n_tokens: members.len(),
                n_occurrences: pre_post[b].len(),
                knn_l2: mean(&knn),
                pre_post_l2: mean(&pre_post[b]),
                mean_mu: mean(&mus[b]),
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatioRecord {
    pub step: usize,
    pub raw_ratio: f64,
    pub corrected_ratio: f64,
    pub method: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntensityRecord {
    pub example_id: String,
    pub position: usize,
    pub token: String,
    pub l2: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub schema_version: u32,
    pub word_change_ratio_series: Vec<RatioRecord>,
    pub intensity_records: Vec<IntensityRecord>,
    pub bucket_stats: Vec<BucketStats>,
}

impl Default for AnalysisReport {
    fn default() -> Self {
        AnalysisReport {
            schema_version: SCHEMA_VERSION,
            word_change_ratio_series: Vec::new(),
            intensity_records: Vec::new(),
            bucket_stats: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisConfig {
    /// Examples analysed (the first `sample_size` of the dataset).
    pub sample_size: usize,
    /// Neighbours for the k-NN distance.
    pub k: usize,
    /// Augmenters whose change ratios are reported next to the learned noise.
    pub compare: Vec<AugmenterKind>,
    /// Dropout probability for the compared augmenters.
    pub p: f64,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        AnalysisConfig {
            sample_size: 100,
            k: 5,
            compare: vec![
                AugmenterKind::GaussianDropout,
                AugmenterKind::BernoulliDropout,
                AugmenterKind::WordDropout,
                AugmenterKind::PriorAug,
            ],
            p: 0.1,
        }
    }
}

impl AnalysisConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sample_size < 1 || self.k < 1 {
            return Err(SwepError::Config(
                "analysis sample_size and k must be at least 1".into(),
            ));
        }
        if !(self.p > 0.0 && self.p < 1.0) {
            return Err(SwepError::Config(format!(
                "analysis p must lie in (0, 1), got {}",
                self.p
            )));
        }
        if let Some(k) = self.compare.iter().find(|k| {
            matches!(
                k,
                AugmenterKind::Swep | AugmenterKind::None | AugmenterKind::Adversarial
            )
        }) {
            return Err(SwepError::Config(format!("{k} cannot be compared stand-alone")));
        }
        Ok(())
    }
}

/// Inputs of [`analyze`] describing the trained noise path.
pub struct NoisePath<'a> {
    pub generator: &'a NoiseGenerator,
    pub source: NoiseSource,
    pub additive: bool,
    pub alpha: f64,
}

/// Ratios, intensities and bucket statistics for one checkpoint at `step`.
/// Without a noise path only the compared augmenters' ratios are reported.
#[allow(clippy::too_many_arguments)]
pub fn analyze(
    model: &QaModel,
    store: &ParamStore,
    vocab: &Vocabulary,
    examples: &[TokenizedExample],
    noise: Option<NoisePath>,
    config: &AnalysisConfig,
    step: usize,
    rng: &mut SwepRng,
) -> Result<AnalysisReport> {
    config.validate()?;
    let sample = &examples[..config.sample_size.min(examples.len())];
    if sample.is_empty() {
        return Err(SwepError::Empty("analysis sample".into()));
    }
    let table = EmbeddingTable(
        store
            .get(crate::model::WORD_EMBEDDING)
            .ok_or_else(|| SwepError::Checkpoint("missing word embeddings".into()))?
            .clone(),
    );
    let mut report = AnalysisReport::default();
    let alpha = noise.as_ref().map_or(0.1, |n| n.alpha);

    let observations = match &noise {
        Some(n) => observe_noise(model, n.generator, store, sample, n.source, n.additive, rng)?,
        None => Vec::new(),
    };
    if !observations.is_empty() {
        report.word_change_ratio_series.push(ratio_record(
            &table,
            &observations,
            |o| Ok(o.perturbed.clone()),
            "swep",
            step,
        )?);
        for obs in &observations {
            let mask = vec![true; obs.token_ids.len()];
            for (position, (tok, l2)) in perturbation_intensity(&obs.embeddings, &obs.perturbed, &obs.token_ids, &mask)?
                .into_iter()
                .enumerate()
            {
                report.intensity_records.push(IntensityRecord {
                    example_id: obs.id.clone(),
                    position,
                    token: vocab.token(tok).unwrap_or("[UNK]").to_string(),
                    l2,
                });
            }
        }
        report.bucket_stats = frequency_bucket_stats(&table, vocab, &observations, config.k)?;
    }

    let plain: Vec<NoiseObservation> = sample
        .iter()
        .map(|ex| {
            let emb = Mat::from_shape_fn((ex.len(), table.dim()), |(t, c)| table.0[[ex.token_ids[t], c]]);
            NoiseObservation {
                id: ex.id.clone(),
                token_ids: ex.token_ids.clone(),
                mu: Mat::zeros((0, 0)),
                sigma2: Mat::zeros((0, 0)),
                perturbed: emb.clone(),
                embeddings: emb,
            }
        })
        .collect();
    for &kind in &config.compare {
        let rec = ratio_record(
            &table,
            &plain,
            |o| perturb_with(kind, config.p, alpha, &o.embeddings, rng),
            kind.as_str(),
            step,
        )?;
        report.word_change_ratio_series.push(rec);
    }
    Ok(report)
}

/// Token-weighted ratio over all observations.
fn ratio_record<F>(
    table: &EmbeddingTable,
    observations: &[NoiseObservation],
    mut perturb: F,
    method: &str,
    step: usize,
) -> Result<RatioRecord>
where
    F: FnMut(&NoiseObservation) -> Result<Mat>,
{
    let (mut n, mut raw, mut corrected) = (0.0, 0.0, 0.0);
    for obs in observations {
        let tokens = obs.token_ids.len() as f64;
        let r = word_change_ratio(table, &obs.token_ids, &perturb(obs)?, &vec![true; obs.token_ids.len()])?;
        n += tokens;
        raw += r.raw * tokens;
        corrected += r.corrected * tokens;
    }
    if n == 0.0 {
        return Err(SwepError::Empty("no tokens to project".into()));
    }
    Ok(RatioRecord {
        step,
        raw_ratio: raw / n,
        corrected_ratio: corrected / n,
        method: method.to_string(),
    })
}
