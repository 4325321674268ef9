use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::baselines::{AugmenterConfig, AugmenterKind};
use crate::error::{Result, SwepError};
use crate::noise::NoiseSource;
use crate::objectives::{check_lambda, BetaSchedule};

/// Which single aspect of training is switched off or replaced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Ablation {
    Full,
    AdditiveNoise,
    FixedMu,
    FixedSigma,
    DeterministicNoise,
    NoKl,
    NoMle,
    /// `baseline:<kind>`
    Baseline(AugmenterKind),
}

impl Ablation {
    pub const SWEP_VARIANTS: [Ablation; 7] = [
        Ablation::Full,
        Ablation::AdditiveNoise,
        Ablation::FixedMu,
        Ablation::FixedSigma,
        Ablation::DeterministicNoise,
        Ablation::NoKl,
        Ablation::NoMle,
    ];
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Ablation::Full => "full",
            Ablation::AdditiveNoise => "additive_noise",
            Ablation::FixedMu => "fixed_mu",
            Ablation::FixedSigma => "fixed_sigma",
            Ablation::DeterministicNoise => "deterministic_noise",
            Ablation::NoKl => "no_kl",
            Ablation::NoMle => "no_mle",
            Ablation::Baseline(k) => return write!(f, "baseline:{k}"),
        };
        f.write_str(s)
    }
}

impl FromStr for Ablation {
    type Err = SwepError;

    fn from_str(s: &str) -> Result<Self> {
        if let Some(kind) = s.strip_prefix("baseline:") {
            return Ok(Ablation::Baseline(kind.parse()?));
        }
        Ablation::SWEP_VARIANTS
            .into_iter()
            .find(|a| a.to_string() == s)
            .ok_or_else(|| SwepError::Config(format!("unknown ablation {s:?}")))
    }
}

impl TryFrom<String> for Ablation {
    type Error = SwepError;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Ablation> for String {
    fn from(a: Ablation) -> String {
        a.to_string()
    }
}

/// How the per-example KL sum is scaled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlNormalization {
    /// Summed over tokens and dimensions.
    Sum,
    /// Divided by the number of real tokens.
    TokenMean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SwepConfig {
    /// Prior variance.
    pub alpha: f64,
    pub beta: BetaSchedule,
    /// Weight of the clean likelihood.
    pub lambda: f64,
    /// Cut the encoder out of the generator's input gradient.
    pub stop_gradient: bool,
    pub kl_normalization: KlNormalization,
    pub noise_source: NoiseSource,
}

impl Default for SwepConfig {
    fn default() -> Self {
        SwepConfig {
            alpha: 0.1,
            beta: BetaSchedule::default(),
            lambda: 0.5,
            stop_gradient: true,
            kl_normalization: KlNormalization::Sum,
            noise_source: NoiseSource::Final,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// Global gradient-norm cap; 0 disables clipping.
    pub grad_clip: f64,
    pub ablation: Ablation,
    /// Dev evaluation period in steps; `None` evaluates after every epoch.
    pub eval_every: Option<usize>,
    pub max_answer_len: usize,
    /// Fraction of the training set kept, in `(0, 1]`.
    pub subsample: f64,
    /// Stop once train EM reaches this value (train EM is then measured
    /// after every epoch).
    pub target_train_em: Option<f64>,
    pub swep: SwepConfig,
    pub augmenter: AugmenterConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 200,
            batch_size: 16,
            learning_rate: 1e-3,
            weight_decay: 0.01,
            grad_clip: 1.0,
            ablation: Ablation::Full,
            eval_every: None,
            max_answer_len: 30,
            subsample: 1.0,
            target_train_em: None,
            swep: SwepConfig::default(),
            augmenter: AugmenterConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(SwepError::Config(m));
        if self.epochs < 1 {
            return bad("epochs must be at least 1".into());
        }
        if self.batch_size < 1 {
            return bad("batch_size must be at least 1".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be > 0, got {}", self.learning_rate));
        }
        if !(self.weight_decay >= 0.0) || !(self.grad_clip >= 0.0) {
            return bad("weight_decay and grad_clip must be >= 0".into());
        }
        if self.eval_every == Some(0) {
            return bad("eval_every must be at least 1".into());
        }
        if self.max_answer_len < 1 {
            return bad("max_answer_len must be at least 1".into());
        }
        if !(self.subsample > 0.0 && self.subsample <= 1.0) {
            return bad(format!("subsample must lie in (0, 1], got {}", self.subsample));
        }
        if let Some(t) = self.target_train_em {
            if !(0.0..=100.0).contains(&t) {
                return bad(format!("target_train_em must lie in [0, 100], got {t}"));
            }
        }
        if !(self.swep.alpha > 0.0 && self.swep.alpha.is_finite()) {
            return bad(format!("alpha must be > 0, got {}", self.swep.alpha));
        }
        self.swep.beta.validate()?;
        if self.ablation != Ablation::NoMle {
            check_lambda(self.swep.lambda)?;
        }
        self.augmenter.validate()?;
        match (self.ablation, self.augmenter.kind) {
            (_, AugmenterKind::Swep) => {}
            (Ablation::Baseline(k), kind) if k == kind => {}
            (a, kind) => {
                return bad(format!(
                    "augmenter.kind is {kind} but ablation is {a}; use ablation \"baseline:{kind}\""
                ))
            }
        }
        Ok(())
    }
}
