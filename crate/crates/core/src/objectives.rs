//! Training objectives: closed-form KL to the prior, the noise objective,
//! their convex combination with the clean likelihood, and the KL weight
//! schedule.

use serde::{Deserialize, Serialize};

use crate::autograd::{Mat, Tape, Var};
use crate::error::{Result, SwepError};
use crate::noise::{NoiseParams, PriorConfig};

/// Closed-form `KL(N(mu, sigma2) || N(m, alpha))` summed over unpadded tokens
/// and all dimensions:
///
/// `1/2 * sum[(sigma2 + (mu - m)^2) / alpha - 1 - ln(sigma2 / alpha)]`
pub fn kl_to_prior(tape: &mut Tape, params: &NoiseParams, prior: &PriorConfig, padding_mask: &[bool]) -> Result<Var> {
    prior.validate()?;
    let (t, d) = tape.shape(params.mu);
    if tape.shape(params.sigma2) != (t, d) || padding_mask.len() != t {
        return Err(SwepError::Shape(format!(
            "mu {:?}, sigma2 {:?}, mask {}",
            (t, d),
            tape.shape(params.sigma2),
            padding_mask.len()
        )));
    }
    if let Some(bad) = tape.value(params.sigma2).iter().find(|&&v| !(v > 0.0)) {
        return Err(SwepError::NonFinite(format!("variance {bad} is not positive")));
    }
    let alpha = prior.alpha;
    let centered = tape.add_scalar(params.mu, -prior.mean);
    let sq = tape.square(centered);
    let num = tape.add(params.sigma2, sq);
    let ratio = tape.scale(num, 1.0 / alpha);
    let rel = tape.scale(params.sigma2, 1.0 / alpha);
    let log_rel = tape.ln(rel);
    let diff = tape.sub(ratio, log_rel);
    let per = tape.add_scalar(diff, -1.0);
    let mask = Mat::from_shape_fn((t, d), |(r, _)| if padding_mask[r] { 0.5 } else { 0.0 });
    let masked = tape.mul_const(per, mask);
    Ok(tape.sum(masked))
}

/// [`kl_to_prior`] on plain matrices.
pub fn kl_to_prior_value(mu: &Mat, sigma2: &Mat, prior: &PriorConfig, padding_mask: &[bool]) -> Result<f64> {
    let mut tape = Tape::new();
    let params = NoiseParams {
        mu: tape.constant(mu.clone()),
        sigma2: tape.constant(sigma2.clone()),
    };
    let kl = kl_to_prior(&mut tape, &params, prior, padding_mask)?;
    Ok(tape.item(kl))
}

/// `L_noise = loglik_perturbed - beta * kl`. With `beta = 1` this is the ELBO.
pub fn noise_objective(loglik_perturbed: f64, kl: f64, beta: f64) -> f64 {
    loglik_perturbed - beta * kl
}

/// `lambda * L_MLE + (1 - lambda) * L_noise`, to be maximized.
pub fn combined_objective(l_mle: f64, l_noise: f64, lambda: f64) -> Result<f64> {
    check_lambda(lambda)?;
    Ok(lambda * l_mle + (1.0 - lambda) * l_noise)
}

pub fn check_lambda(lambda: f64) -> Result<()> {
    if !(lambda > 0.0 && lambda < 1.0) {
        return Err(SwepError::Config(format!("lambda must lie in (0, 1), got {lambda}")));
    }
    Ok(())
}

/// Tape form of [`noise_objective`].
pub fn noise_objective_var(tape: &mut Tape, loglik_perturbed: Var, kl: Var, beta: f64) -> Var {
    let weighted = tape.scale(kl, beta);
    tape.sub(loglik_perturbed, weighted)
}

/// Tape form of [`combined_objective`].
pub fn combined_objective_var(tape: &mut Tape, l_mle: Var, l_noise: Var, lambda: f64) -> Result<Var> {
    check_lambda(lambda)?;
    let a = tape.scale(l_mle, lambda);
    let b = tape.scale(l_noise, 1.0 - lambda);
    Ok(tape.add(a, b))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BetaKind {
    Constant,
    LinearAnneal,
}

/// KL weight as a function of (fractional) epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BetaSchedule {
    pub kind: BetaKind,
    pub beta0: f64,
    /// Epoch at which a linear anneal reaches zero.
    #[serde(default = "one")]
    pub zero_epoch: f64,
}

fn one() -> f64 {
    1.0
}

impl Default for BetaSchedule {
    fn default() -> Self {
        BetaSchedule::constant(1.0)
    }
}

impl BetaSchedule {
    pub fn constant(beta0: f64) -> Self {
        BetaSchedule {
            kind: BetaKind::Constant,
            beta0,
            zero_epoch: 1.0,
        }
    }

    pub fn linear(beta0: f64, zero_epoch: f64) -> Self {
        BetaSchedule {
            kind: BetaKind::LinearAnneal,
            beta0,
            zero_epoch,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta0 >= 0.0 && self.beta0.is_finite()) {
            return Err(SwepError::Config(format!("beta0 must be >= 0, got {}", self.beta0)));
        }
        if self.kind == BetaKind::LinearAnneal && !(self.zero_epoch > 0.0) {
            return Err(SwepError::Config(format!(
                "zero_epoch must be > 0 for a linear anneal, got {}",
                self.zero_epoch
            )));
        }
        Ok(())
    }

    pub fn beta_at(&self, epoch: f64) -> Result<f64> {
        self.validate()?;
        if !(epoch >= 0.0) {
            return Err(SwepError::Config(format!("epoch must be >= 0, got {epoch}")));
        }
        Ok(match self.kind {
            BetaKind::Constant => self.beta0,
            BetaKind::LinearAnneal => (self.beta0 * (1.0 - epoch / self.zero_epoch)).max(0.0),
        })
    }
}

/// Loss terms of one training step, logged as one JSON line.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub step: usize,
    /// Batch-mean clean log-likelihood.
    pub l_mle: f64,
    /// Batch-mean log-likelihood of the perturbed (or augmented) input.
    pub loglik_perturbed: f64,
    /// Batch-mean of the per-example KL sums.
    pub kl_total: f64,
    pub beta: f64,
    /// Weight of `l_mle` in `combined`; 1 when only the clean term is
    /// trained and 0 when only the noise term is.
    pub lambda: f64,
    /// The maximized objective; the optimizer minimizes its negation.
    pub combined: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        [
            self.l_mle,
            self.loglik_perturbed,
            self.kl_total,
            self.beta,
            self.lambda,
            self.combined,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}
