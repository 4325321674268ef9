//! Comparison augmenters acting at the word-embedding layer: Gaussian and
//! Bernoulli dropout masks, word dropout, prior noise, and iterative
//! adversarial perturbation.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autograd::{Mat, Tape, Var};
use crate::error::{Result, SwepError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmenterKind {
    GaussianDropout,
    BernoulliDropout,
    WordDropout,
    PriorAug,
    Adversarial,
    Swep,
    None,
}

impl AugmenterKind {
    pub const ALL: [AugmenterKind; 7] = [
        AugmenterKind::GaussianDropout,
        AugmenterKind::BernoulliDropout,
        AugmenterKind::WordDropout,
        AugmenterKind::PriorAug,
        AugmenterKind::Adversarial,
        AugmenterKind::Swep,
        AugmenterKind::None,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AugmenterKind::GaussianDropout => "gaussian_dropout",
            AugmenterKind::BernoulliDropout => "bernoulli_dropout",
            AugmenterKind::WordDropout => "word_dropout",
            AugmenterKind::PriorAug => "prior_aug",
            AugmenterKind::Adversarial => "adversarial",
            AugmenterKind::Swep => "swep",
            AugmenterKind::None => "none",
        }
    }
}

impl fmt::Display for AugmenterKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AugmenterKind {
    type Err = SwepError;

    fn from_str(s: &str) -> Result<Self> {
        AugmenterKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| SwepError::Config(format!("unknown augmenter kind {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmenterConfig {
    pub kind: AugmenterKind,
    /// Dropout probability for the dropout-style augmenters.
    pub p: f64,
    pub adv_steps: usize,
    /// Length of each normalized ascent step; defaults to `adv_radius / adv_steps`.
    pub adv_step_size: Option<f64>,
    /// L2 radius of the per-example perturbation ball.
    pub adv_radius: f64,
}

impl Default for AugmenterConfig {
    fn default() -> Self {
        AugmenterConfig {
            kind: AugmenterKind::Swep,
            p: 0.1,
            adv_steps: 5,
            adv_step_size: None,
            adv_radius: 1.0,
        }
    }
}

impl AugmenterConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.p) {
            return Err(SwepError::Config(format!("p must lie in [0, 1), got {}", self.p)));
        }
        if self.kind == AugmenterKind::GaussianDropout && self.p == 0.0 {
            return Err(SwepError::Config("gaussian dropout needs p > 0".into()));
        }
        if self.adv_steps < 1 {
            return Err(SwepError::Config("adv_steps must be at least 1".into()));
        }
        if !(self.adv_radius > 0.0) {
            return Err(SwepError::Config("adv_radius must be > 0".into()));
        }
        if let Some(s) = self.adv_step_size {
            if !(s > 0.0) {
                return Err(SwepError::Config("adv_step_size must be > 0".into()));
            }
        }
        Ok(())
    }

    pub fn step_size(&self) -> f64 {
        self.adv_step_size.unwrap_or(self.adv_radius / self.adv_steps as f64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskKind {
    Gaussian,
    Bernoulli,
}

/// Multiplicative dropout mask.
///
/// * Gaussian: `1 + sqrt((1 - p) / p) * eps`, with `draw` standard normal.
/// * Bernoulli: keep with probability `1 - p` (`draw < 1 - p`, `draw`
///   uniform on `[0, 1)`), survivors scaled by `1 / (1 - p)`.
pub fn dropout_mask(kind: MaskKind, p: f64, draw: &Mat) -> Result<Mat> {
    match kind {
        MaskKind::Gaussian => {
            if !(p > 0.0 && p < 1.0) {
                return Err(SwepError::Config(format!("gaussian dropout needs 0 < p < 1, got {p}")));
            }
            let std = ((1.0 - p) / p).sqrt();
            Ok(draw.mapv(|e| 1.0 + std * e))
        }
        MaskKind::Bernoulli => {
            if !(0.0..1.0).contains(&p) {
                return Err(SwepError::Config(format!(
                    "bernoulli dropout needs 0 <= p < 1, got {p}"
                )));
            }
            let keep = 1.0 - p;
            Ok(draw.mapv(|u| if u < keep { 1.0 / keep } else { 0.0 }))
        }
    }
}

/// `mask` with padded rows set to 1.
pub fn mask_padding(mut mask: Mat, padding_mask: &[bool]) -> Mat {
    for (r, &m) in padding_mask.iter().enumerate() {
        if !m {
            mask.row_mut(r).fill(1.0);
        }
    }
    mask
}

/// Multiplies unpadded embedding rows by a constant mask.
pub fn apply_mask(tape: &mut Tape, embeddings: Var, mask: Mat, padding_mask: &[bool]) -> Result<Var> {
    if tape.shape(embeddings) != mask.dim() || padding_mask.len() != mask.nrows() {
        return Err(SwepError::Shape(format!(
            "embeddings {:?}, mask {:?}, padding {}",
            tape.shape(embeddings),
            mask.dim(),
            padding_mask.len()
        )));
    }
    Ok(tape.mul_const(embeddings, mask_padding(mask, padding_mask)))
}

/// Zeroes whole unpadded token embeddings where `uniform_draw[t] < p`.
/// Survivors are not rescaled.
pub fn word_dropout(
    tape: &mut Tape,
    embeddings: Var,
    p: f64,
    uniform_draw: &[f64],
    padding_mask: &[bool],
) -> Result<Var> {
    if !(0.0..1.0).contains(&p) {
        return Err(SwepError::Config(format!("word dropout needs 0 <= p < 1, got {p}")));
    }
    let (t, d) = tape.shape(embeddings);
    if uniform_draw.len() != t || padding_mask.len() != t {
        return Err(SwepError::Shape(format!(
            "{t} tokens vs draw {} / mask {}",
            uniform_draw.len(),
            padding_mask.len()
        )));
    }
    let mask = Mat::from_shape_fn((t, d), |(r, _)| {
        if padding_mask[r] && uniform_draw[r] < p {
            0.0
        } else {
            1.0
        }
    });
    Ok(tape.mul_const(embeddings, mask))
}

fn l2(m: &Mat) -> f64 {
    m.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Iterative L2 ascent on the loss in embedding space.
///
/// Starting from `delta = 0`, each step moves `delta` by `step_size` along
/// the normalized loss gradient (unpadded rows only) and projects it back
/// onto the ball of radius `radius`. `loss_gradient` must return the gradient
/// of the negative log-likelihood of the gold span at the given embeddings.
pub fn adversarial_perturb<F>(
    embeddings: &Mat,
    mut loss_gradient: F,
    steps: usize,
    step_size: f64,
    radius: f64,
    padding_mask: &[bool],
) -> Result<Mat>
where
    F: FnMut(&Mat) -> Result<Mat>,
{
    if padding_mask.len() != embeddings.nrows() {
        return Err(SwepError::Shape("padding mask vs embeddings".into()));
    }
    let mut delta = Mat::zeros(embeddings.dim());
    for _ in 0..steps {
        let point = embeddings + &delta;
        let g = mask_rows(loss_gradient(&point)?, padding_mask);
        if g.dim() != embeddings.dim() {
            return Err(SwepError::Shape("gradient shape differs from embeddings".into()));
        }
        if !g.iter().all(|v| v.is_finite()) {
            return Err(SwepError::NonFinite("adversarial loss gradient".into()));
        }
        let norm = l2(&g);
        if norm == 0.0 {
            break;
        }
        delta.scaled_add(step_size / norm, &g);
        let dn = l2(&delta);
        if dn > radius {
            delta *= radius / dn;
        }
    }
    Ok(embeddings + &delta)
}

fn mask_rows(mut m: Mat, padding_mask: &[bool]) -> Mat {
    for (r, &keep) in padding_mask.iter().enumerate() {
        if !keep && r < m.nrows() {
            m.row_mut(r).fill(0.0);
        }
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{seeded, standard_normal, uniform};
    use rand::Rng;

    #[test]
    fn gaussian_mask_examples() {
        let m = dropout_mask(MaskKind::Gaussian, 0.1, &Mat::zeros((2, 3))).unwrap();
        assert_eq!(m, Mat::ones((2, 3)));
        let n = 200_000;
        let m = dropout_mask(MaskKind::Gaussian, 0.1, &standard_normal(&mut seeded(1), n, 1)).unwrap();
        let mean = m.sum() / n as f64;
        let var = m.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!((var - 9.0).abs() < 0.2, "var {var}");
        assert!(dropout_mask(MaskKind::Gaussian, 0.0, &Mat::zeros((1, 1))).is_err());
    }

    #[test]
    fn bernoulli_mask_zero_fraction() {
        let n = 100_000;
        let m = dropout_mask(MaskKind::Bernoulli, 0.1, &uniform(&mut seeded(2), n, 1)).unwrap();
        let zeros = m.iter().filter(|&&v| v == 0.0).count() as f64 / n as f64;
        assert!((zeros - 0.1).abs() <= 0.003, "zeros {zeros}");
        assert!(m.iter().all(|&v| v == 0.0 || v == 1.0 / 0.9));
        assert!(dropout_mask(MaskKind::Bernoulli, 1.0, &Mat::zeros((1, 1))).is_err());
        assert_eq!(
            dropout_mask(MaskKind::Bernoulli, 0.0, &Mat::from_elem((1, 2), 0.99)).unwrap(),
            Mat::ones((1, 2))
        );
    }

    #[test]
    fn masks_leave_padding_alone() {
        let mut tape = Tape::new();
        let e_val = standard_normal(&mut seeded(3), 4, 3);
        let e = tape.constant(e_val.clone());
        let out = apply_mask(&mut tape, e, Mat::zeros((4, 3)), &[true, true, false, false]).unwrap();
        assert!(tape.value(out).row(0).iter().all(|&v| v == 0.0));
        assert_eq!(tape.value(out).row(3), e_val.row(3));
        let out = word_dropout(&mut tape, e, 0.5, &[0.0; 4], &[true, false, true, false]).unwrap();
        assert_eq!(tape.value(out).row(1), e_val.row(1));
        assert!(tape.value(out).row(2).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn word_dropout_examples() {
        let mut rng = seeded(4);
        let e_val = standard_normal(&mut rng, 6, 3);
        let mut tape = Tape::new();
        let e = tape.constant(e_val.clone());
        let draw: Vec<f64> = (0..6).map(|_| rng.random()).collect();
        let same = word_dropout(&mut tape, e, 0.0, &draw, &[true; 6]).unwrap();
        assert_eq!(tape.value(same), &e_val);

        let draw = [0.05, 0.5, 0.01, 0.9, 0.3, 0.2];
        let out = word_dropout(&mut tape, e, 0.25, &draw, &[true; 6]).unwrap();
        for (t, &u) in draw.iter().enumerate() {
            if u < 0.25 {
                assert!(tape.value(out).row(t).iter().all(|&v| v == 0.0));
            } else {
                assert_eq!(tape.value(out).row(t), e_val.row(t));
            }
        }
        assert!(word_dropout(&mut tape, e, 1.0, &draw, &[true; 6]).is_err());
    }

    #[test]
    fn word_dropout_near_one_drops_almost_everything() {
        // P(Binomial(1000, 0.999) < 990) is about 1e-5, so 200 trials should all pass.
        let mut rng = seeded(5);
        let mut tape = Tape::new();
        let e = tape.constant(Mat::ones((1000, 2)));
        let mut ok = 0;
        for _ in 0..200 {
            let draw: Vec<f64> = (0..1000).map(|_| rng.random()).collect();
            let out = word_dropout(&mut tape, e, 0.999, &draw, &[true; 1000]).unwrap();
            let zeroed = tape.value(out).rows().into_iter().filter(|r| r[0] == 0.0).count();
            ok += usize::from(zeroed >= 990);
        }
        assert!(ok as f64 / 200.0 > 0.99);
    }

    #[test]
    fn zero_gradient_leaves_input() {
        let e = standard_normal(&mut seeded(6), 5, 4);
        let out = adversarial_perturb(&e, |x| Ok(Mat::zeros(x.dim())), 5, 0.2, 1.0, &[true; 5]).unwrap();
        assert_eq!(out, e);
    }

    #[test]
    fn perturbation_stays_in_the_ball() {
        let mut rng = seeded(7);
        for _ in 0..50 {
            let e = standard_normal(&mut rng, 6, 4);
            let target = standard_normal(&mut rng, 6, 4) * 10.0;
            let radius = rng.random_range(0.05..2.0);
            let out = adversarial_perturb(&e, |x| Ok(&target - x), 5, radius, radius, &[true; 6]).unwrap();
            assert!(l2(&(&out - &e)) <= radius * (1.0 + 1e-12));
        }
    }

    #[test]
    fn quadratic_loss_increases_each_step() {
        // loss(x) = -|x - c|^2 / 2 has its maximum at c, inside the ball;
        // gradient is c - x.
        let mut rng = seeded(8);
        let e = standard_normal(&mut rng, 3, 4);
        let c = &e + &(standard_normal(&mut rng, 3, 4) * 0.2);
        let loss = |x: &Mat| -0.5 * (x - &c).iter().map(|v| v * v).sum::<f64>();
        let radius = 2.0 * l2(&(&c - &e));
        let mut prev = loss(&e);
        for steps in 1..=5 {
            let out = adversarial_perturb(&e, |x| Ok(&c - x), steps, radius / 20.0, radius, &[true; 3]).unwrap();
            let l = loss(&out);
            assert!(l > prev, "step {steps}: {l} <= {prev}");
            prev = l;
        }
    }

    #[test]
    fn padded_rows_are_not_perturbed() {
        let e = standard_normal(&mut seeded(9), 4, 2);
        let out = adversarial_perturb(&e, |x| Ok(Mat::ones(x.dim())), 3, 0.5, 1.0, &[true, true, true, false]).unwrap();
        assert_eq!(out.row(3), e.row(3));
    }

    #[test]
    fn non_finite_gradient_aborts() {
        let e = Mat::zeros((2, 2));
        let r = adversarial_perturb(&e, |x| Ok(Mat::from_elem(x.dim(), f64::NAN)), 3, 0.5, 1.0, &[true; 2]);
        assert!(matches!(r, Err(SwepError::NonFinite(_))));
    }

    #[test]
    fn kind_strings_roundtrip() {
        for k in AugmenterKind::ALL {
            assert_eq!(k.as_str().parse::<AugmenterKind>().unwrap(), k);
            assert_eq!(serde_json::to_string(&k).unwrap(), format!("\"{k}\""));
        }
        assert!("ssmba".parse::<AugmenterKind>().is_err());
    }
}
