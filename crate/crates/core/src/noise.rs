//! The stochastic perturbation function `q(z | x)`.
//!
//! A two-layer network reads the encoder's hidden state `h_t` of every token
//! and emits the mean `mu_t` and variance `sigma2_t` of a diagonal Gaussian.
//! A draw `z_t = mu_t + sqrt(sigma2_t) * eps` multiplies the word embedding
//! `e_t` elementwise. The prior over `z_t` is `N(1, alpha I)`, so the expected
//! perturbation under the prior is the identity.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{softplus, Mat, Tape, Var};
use crate::error::{Result, SwepError};
use crate::model::{Bound, ParamStore};
use crate::rng::{normal, standard_normal, SwepRng};

pub const L1_W: &str = "noise.l1.w";
pub const L1_B: &str = "noise.l1.b";
pub const HEAD_W: &str = "noise.head.w";
pub const HEAD_B: &str = "noise.head.b";

/// Lower bound added to every variance.
pub const VARIANCE_FLOOR: f64 = 1e-6;

/// Gaussian prior `N(mean * 1, alpha I)` over the noise of one token.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorConfig {
    pub alpha: f64,
    /// 1 for multiplicative noise; 0 for the additive-noise ablation.
    #[serde(default = "one")]
    pub mean: f64,
}

fn one() -> f64 {
    1.0
}

impl PriorConfig {
    pub fn multiplicative(alpha: f64) -> Self {
        PriorConfig { alpha, mean: 1.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(SwepError::Config(format!(
                "prior alpha must be > 0, got {}",
                self.alpha
            )));
        }
        Ok(())
    }
}

impl Default for PriorConfig {
    fn default() -> Self {
        PriorConfig::multiplicative(0.1)
    }
}

/// Where the noise generator reads its input from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseSource {
    /// Final encoder output.
    Final,
    /// Residual stream after the given block.
    Layer(usize),
}

/// Per-token Gaussian parameters, each `T x d`, as tape nodes.
#[derive(Debug, Clone, Copy)]
pub struct NoiseParams {
    pub mu: Var,
    pub sigma2: Var,
}

impl NoiseParams {
    pub fn values(&self, tape: &Tape) -> (Mat, Mat) {
        (tape.value(self.mu).clone(), tape.value(self.sigma2).clone())
    }
}

/// Initial output of the generator before training: the head weights start
/// small and its biases put `mu` and `sigma2` at the given values.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseInit {
    pub mu: f64,
    pub sigma2: f64,
    pub head_weight_std: f64,
}

impl NoiseInit {
    /// Starts the generator at the prior.
    pub fn at_prior(prior: &PriorConfig) -> Self {
        NoiseInit {
            mu: prior.mean,
            sigma2: prior.alpha,
            head_weight_std: 0.01,
        }
    }
}

/// `Linear(d, d) -> ReLU -> Linear(d, 2d)`; the first `d` outputs are the raw
/// means and the last `d` the raw variances.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NoiseGenerator {
    pub d: usize,
}

/// Inverse of softplus, for initializing biases.
fn softplus_inv(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

impl NoiseGenerator {
    pub fn new(d: usize) -> Self {
        NoiseGenerator { d }
    }

    /// Number of scalars the generator adds: `3d^2 + 3d`.
    pub fn param_count(&self) -> usize {
        let d = self.d;
        (d * d + d) + (d * 2 * d + 2 * d)
    }

    pub fn init_params(&self, store: &mut ParamStore, rng: &mut SwepRng, init: NoiseInit) {
        let d = self.d;
        store.insert(L1_W, normal(rng, d, d, 1.0 / (d as f64).sqrt()));
        store.insert(L1_B, Mat::zeros((1, d)));
        store.insert(HEAD_W, normal(rng, d, 2 * d, init.head_weight_std));
        let sigma_bias = softplus_inv((init.sigma2 - VARIANCE_FLOOR).max(1e-12));
        let bias = Mat::from_shape_fn((1, 2 * d), |(_, c)| if c < d { init.mu } else { sigma_bias });
        store.insert(HEAD_B, bias);
    }

    /// `mu_t, sigma2_t = MLP(h_t)` with `sigma2 = softplus(raw) + 1e-6`.
    ///
    /// With `stop_gradient` the hidden states enter the generator as a
    /// constant, so nothing downstream of the noise reaches the encoder
    /// through this input.
    pub fn infer_noise_params(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        hidden: Var,
        stop_gradient: bool,
    ) -> Result<NoiseParams> {
        let (_, width) = tape.shape(hidden);
        if width != self.d {
            return Err(SwepError::Shape(format!(
                "hidden width {width} vs generator d {}",
                self.d
            )));
        }
        if !tape.value(hidden).iter().all(|v| v.is_finite()) {
            return Err(SwepError::NonFinite("noise generator input".into()));
        }
        let input = if stop_gradient { tape.detach(hidden) } else { hidden };
        let a = tape.matmul(input, bound.var(L1_W));
        let a = tape.add_row(a, bound.var(L1_B));
        let a = tape.relu(a);
        let raw = tape.matmul(a, bound.var(HEAD_W));
        let raw = tape.add_row(raw, bound.var(HEAD_B));
        let mu = tape.slice_cols(raw, 0, self.d);
        let raw_sigma = tape.slice_cols(raw, self.d, self.d);
        let sp = tape.softplus(raw_sigma);
        let sigma2 = tape.add_scalar(sp, VARIANCE_FLOOR);
        Ok(NoiseParams { mu, sigma2 })
    }
}

/// Reparameterized draw `z = mu + sqrt(sigma2) * eps`.
pub fn sample_noise(tape: &mut Tape, params: &NoiseParams, epsilon: &Mat) -> Result<Var> {
    if tape.shape(params.mu) != epsilon.dim() || tape.shape(params.sigma2) != epsilon.dim() {
        return Err(SwepError::Shape(format!(
            "noise parameters {:?} vs epsilon {:?}",
            tape.shape(params.mu),
            epsilon.dim()
        )));
    }
    let sigma = tape.sqrt(params.sigma2);
    let scaled = tape.mul_const(sigma, epsilon.clone());
    Ok(tape.add(params.mu, scaled))
}

/// Rows of `z` on unpadded positions; padded rows replaced by `fill`.
fn masked_noise(tape: &mut Tape, z: Var, padding_mask: &[bool], fill: f64) -> Result<Var> {
    let (t, d) = tape.shape(z);
    if padding_mask.len() != t {
        return Err(SwepError::Shape(format!(
            "mask length {} vs {t} rows",
            padding_mask.len()
        )));
    }
    if padding_mask.iter().all(|&m| m) {
        return Ok(z);
    }
    let keep = Mat::from_shape_fn((t, d), |(r, _)| if padding_mask[r] { 1.0 } else { 0.0 });
    let rest = Mat::from_shape_fn((t, d), |(r, _)| if padding_mask[r] { 0.0 } else { fill });
    let kept = tape.mul_const(z, keep);
    Ok(tape.add_const(kept, &rest))
}

/// `e~_t = e_t * z_t` on unpadded positions; padded rows pass through.
pub fn apply_noise(tape: &mut Tape, embeddings: Var, z: Var, padding_mask: &[bool]) -> Result<Var> {
    if tape.shape(embeddings) != tape.shape(z) {
        return Err(SwepError::Shape(format!(
            "embeddings {:?} vs noise {:?}",
            tape.shape(embeddings),
            tape.shape(z)
        )));
    }
    let z = masked_noise(tape, z, padding_mask, 1.0)?;
    Ok(tape.mul(embeddings, z))
}

/// `e~_t = e_t + z_t` on unpadded positions (additive-noise ablation).
pub fn apply_additive_noise(tape: &mut Tape, embeddings: Var, z: Var, padding_mask: &[bool]) -> Result<Var> {
    if tape.shape(embeddings) != tape.shape(z) {
        return Err(SwepError::Shape("embeddings vs noise".into()));
    }
    let z = masked_noise(tape, z, padding_mask, 0.0)?;
    Ok(tape.add(embeddings, z))
}

/// Prior draw `z = mean + sqrt(alpha) * eps`.
pub fn sample_prior_noise(prior: &PriorConfig, epsilon: &Mat) -> Result<Mat> {
    prior.validate()?;
    Ok(epsilon.mapv(|e| prior.mean + prior.alpha.sqrt() * e))
}

/// Standard-normal draw of shape `rows x d`.
pub fn draw_epsilon(rng: &mut impl Rng, rows: usize, d: usize) -> Mat {
    standard_normal(rng, rows, d)
}

/// Rewrites a prior draw `z~ ~ N(1, alpha)` into a draw from `N(mu, sigma^2)`:
/// `(sigma / sqrt(alpha)) z~ + (mu - sigma / sqrt(alpha))`. This is the
/// generator read as a per-token scaled and shifted Gaussian dropout mask.
pub fn from_prior_draw(mu: f64, sigma: f64, alpha: f64, prior_draw: f64) -> f64 {
    let k = sigma / alpha.sqrt();
    k * prior_draw + (mu - k)
}

/// Plain-value helper: `softplus(raw) + floor`.
pub fn variance_from_raw(raw: f64) -> f64 {
    softplus(raw) + VARIANCE_FLOOR
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{EncoderConfig, PositionalKind, QaModel};
    use crate::rng::seeded;

    fn bound_generator(d: usize, init: NoiseInit) -> (NoiseGenerator, ParamStore) {
        let gen = NoiseGenerator::new(d);
        let mut store = ParamStore::new();
        gen.init_params(&mut store, &mut seeded(1), init);
        (gen, store)
    }

    #[test]
    fn parameter_count_is_3d2_plus_3d() {
        for d in [4, 8, 32, 768] {
            let gen = NoiseGenerator::new(d);
            assert_eq!(gen.param_count(), 3 * d * d + 3 * d);
            if d <= 32 {
                let (_, store) = bound_generator(d, NoiseInit::at_prior(&PriorConfig::default()));
                assert_eq!(store.count("noise."), 3 * d * d + 3 * d);
            }
        }
    }

    #[test]
    fn zero_head_gives_bias_everywhere() {
        let d = 4;
        let (gen, mut store) = bound_generator(d, NoiseInit::at_prior(&PriorConfig::default()));
        store.insert(HEAD_W, Mat::zeros((d, 2 * d)));
        let bias = Mat::from_shape_fn((1, 2 * d), |(_, c)| c as f64 * 0.3 - 1.0);
        store.insert(HEAD_B, bias.clone());
        let mut tape = Tape::new();
        let b = store.bind(&mut tape);
        let h = tape.constant(normal(&mut seeded(2), 5, d, 1.0));
        let p = gen.infer_noise_params(&mut tape, &b, h, true).unwrap();
        let (mu, s2) = p.values(&tape);
        for t in 0..5 {
            for i in 0..d {
                assert_eq!(mu[[t, i]], bias[[0, i]]);
                assert_eq!(s2[[t, i]], softplus(bias[[0, d + i]]) + VARIANCE_FLOOR);
            }
        }
    }

    #[test]
    fn init_at_prior_starts_near_prior() {
        let prior = PriorConfig::default();
        let (gen, store) = bound_generator(8, NoiseInit::at_prior(&prior));
        let mut tape = Tape::new();
        let b = store.bind(&mut tape);
        let h = tape.constant(normal(&mut seeded(2), 5, 8, 1.0));
        let p = gen.infer_noise_params(&mut tape, &b, h, true).unwrap();
        let (mu, s2) = p.values(&tape);
        assert!(mu.iter().all(|&m| (m - 1.0).abs() < 0.2));
        assert!(s2.iter().all(|&s| (s - 0.1).abs() < 0.05));
    }

    #[test]
    fn non_finite_hidden_is_rejected() {
        let (gen, store) = bound_generator(4, NoiseInit::at_prior(&PriorConfig::default()));
        let mut tape = Tape::new();
        let b = store.bind(&mut tape);
        let mut m = Mat::zeros((2, 4));
        m[[1, 2]] = f64::NAN;
        let h = tape.constant(m);
        assert!(matches!(
            gen.infer_noise_params(&mut tape, &b, h, true),
            Err(SwepError::NonFinite(_))
        ));
    }

    fn encoder_grads_via_noise(stop_gradient: bool) -> f64 {
        let cfg = EncoderConfig {
            d: 8,
            n_layers: 2,
            n_heads: 2,
            ffn_width: 16,
            max_len: 10,
            positional: PositionalKind::Learned,
            ..EncoderConfig::default()
        };
        let model = QaModel::new(cfg, 12).unwrap();
        let gen = NoiseGenerator::new(8);
        let mut store = ParamStore::new();
        model.init_params(&mut store, &mut seeded(4));
        gen.init_params(
            &mut store,
            &mut seeded(5),
            NoiseInit {
                mu: 1.0,
                sigma2: 0.1,
                head_weight_std: 0.3,
            },
        );
        let ids = [1, 5, 6, 2, 7, 8, 9, 10, 11, 3];
        let mask = [true; 10];
        let mut tape = Tape::new();
        let b = store.bind(&mut tape);
        let e = model.embed(&mut tape, &b, &ids).unwrap();
        let h = model.encode(&mut tape, &b, e, &mask, None).unwrap();
        let p = gen.infer_noise_params(&mut tape, &b, h, stop_gradient).unwrap();
        let s = tape.sum(p.mu);
        let v = tape.sum(p.sigma2);
        let out = tape.add(s, v);
        let grads = b.collect(&tape, &tape.backward(out));
        grads
            .iter()
            .filter(|(n, _)| n.starts_with("enc.") || n.starts_with("embed."))
            .flat_map(|(_, g)| g.iter().copied())
            .fold(0.0, |a, g| a.max(g.abs()))
    }

    #[test]
    fn stop_gradient_severs_encoder_path() {
        assert_eq!(encoder_grads_via_noise(true), 0.0);
        assert!(encoder_grads_via_noise(false) > 1e-8);
    }

    #[test]
    fn zero_epsilon_recovers_mean() {
        let mut tape = Tape::new();
        let mu = tape.constant(normal(&mut seeded(3), 3, 4, 1.0));
        let sigma2 = tape.constant(Mat::from_elem((3, 4), 0.5));
        let z = sample_noise(&mut tape, &NoiseParams { mu, sigma2 }, &Mat::zeros((3, 4))).unwrap();
        assert_eq!(tape.value(z), tape.value(mu));
    }

    #[test]
    fn floored_variance_keeps_z_near_mean() {
        let mut tape = Tape::new();
        let mu = tape.constant(Mat::ones((2, 3)));
        let sigma2 = tape.constant(Mat::from_elem((2, 3), variance_from_raw(-1e3)));
        let eps = normal(&mut seeded(3), 2, 3, 1.0);
        let z = sample_noise(&mut tape, &NoiseParams { mu, sigma2 }, &eps).unwrap();
        for (zv, ev) in tape.value(z).iter().zip(eps.iter()) {
            assert!((zv - 1.0).abs() <= 1e-3 * ev.abs() + 1e-15);
        }
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut tape = Tape::new();
        let mu = tape.constant(Mat::ones((2, 3)));
        let sigma2 = tape.constant(Mat::ones((2, 3)));
        assert!(sample_noise(&mut tape, &NoiseParams { mu, sigma2 }, &Mat::zeros((3, 3))).is_err());
        let e = tape.constant(Mat::ones((2, 4)));
        assert!(apply_noise(&mut tape, e, mu, &[true, true]).is_err());
    }

    #[test]
    fn sample_moments_match() {
        let n = 100_000;
        let mut rng = seeded(17);
        let eps = draw_epsilon(&mut rng, n, 1);
        let mut tape = Tape::new();
        let mu = tape.constant(Mat::from_elem((n, 1), 1.2));
        let sigma2 = tape.constant(Mat::from_elem((n, 1), 0.09));
        let z = sample_noise(&mut tape, &NoiseParams { mu, sigma2 }, &eps).unwrap();
        let zs = tape.value(z);
        let mean = zs.sum() / n as f64;
        let var = zs.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!((mean - 1.2).abs() <= 0.003, "mean {mean}");
        assert!((var - 0.09).abs() <= 0.002, "var {var}");
    }

    #[test]
    fn apply_noise_examples() {
        let mut rng = seeded(8);
        let e_val = normal(&mut rng, 4, 3, 1.0);
        let z_val = normal(&mut rng, 4, 3, 1.0);
        let mut tape = Tape::new();
        let e = tape.constant(e_val.clone());
        let ones = tape.constant(Mat::ones((4, 3)));
        let same = apply_noise(&mut tape, e, ones, &[true; 4]).unwrap();
        assert_eq!(tape.value(same), &e_val);

        let twos = tape.constant(Mat::from_elem((4, 3), 2.0));
        let doubled = apply_noise(&mut tape, e, twos, &[true; 4]).unwrap();
        for t in 0..4 {
            let n0 = e_val.row(t).dot(&e_val.row(t)).sqrt();
            let r = tape.value(doubled).row(t).to_owned();
            assert!((r.dot(&r).sqrt() - 2.0 * n0).abs() < 1e-12);
        }

        let z = tape.constant(z_val.clone());
        let out = apply_noise(&mut tape, e, z, &[true; 4]).unwrap();
        for t in 0..4 {
            for i in 0..3 {
                assert_eq!(tape.value(out)[[t, i]], e_val[[t, i]] * z_val[[t, i]]);
            }
        }

        let masked = apply_noise(&mut tape, e, z, &[true, true, false, false]).unwrap();
        assert_eq!(tape.value(masked).row(2), e_val.row(2));
        assert_eq!(tape.value(masked).row(0), tape.value(out).row(0));
    }

    #[test]
    fn prior_noise_examples() {
        let prior = PriorConfig::default();
        assert_eq!(
            sample_prior_noise(&prior, &Mat::zeros((2, 3))).unwrap(),
            Mat::ones((2, 3))
        );
        let n = 100_000;
        let z = sample_prior_noise(&prior, &draw_epsilon(&mut seeded(4), n, 1)).unwrap();
        let mean = z.sum() / n as f64;
        let var = z.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!((var - 0.1).abs() <= 0.003, "var {var}");
        assert!(sample_prior_noise(&PriorConfig::multiplicative(0.0), &Mat::zeros((1, 1))).is_err());
    }

    #[test]
    fn prior_rewrite_identity_is_exact_for_the_sampling_formula() {
        let mut rng = seeded(12);
        for _ in 0..1000 {
            let mu: f64 = rng.random_range(-2.0..2.0);
            let sigma: f64 = rng.random_range(0.01..2.0);
            let alpha: f64 = rng.random_range(0.01..10.0);
            let eps: f64 = rng.random_range(-4.0..4.0);
            let prior_draw = 1.0 + alpha.sqrt() * eps;
            let lhs = from_prior_draw(mu, sigma, alpha, prior_draw);
            let rhs = mu + sigma * eps;
            assert!((lhs - rhs).abs() <= 1e-12 * (1.0 + rhs.abs()), "{lhs} vs {rhs}");
        }
    }

    #[test]
    fn prior_rewrite_identity_is_exact_in_rationals() {
        use num::{BigInt, BigRational};
        let q = |n: i64, d: i64| BigRational::new(BigInt::from(n), BigInt::from(d));
        let mut rng = seeded(13);
        for _ in 0..1000 {
            let mu = q(rng.random_range(-1000..1000), rng.random_range(1..97));
            let sigma = q(rng.random_range(1..1000), rng.random_range(1..97));
            // alpha = r^2 keeps sqrt(alpha) rational
            let r = q(rng.random_range(1..100), rng.random_range(1..31));
            let eps = q(rng.random_range(-5000..5000), rng.random_range(1..1013));
            let prior_draw = q(1, 1) + &r * &eps;
            let k = &sigma / &r;
            let lhs = &k * prior_draw + (&mu - &k);
            assert_eq!(lhs, &mu + &sigma * &eps);
        }
    }
}
