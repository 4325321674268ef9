//! Training: the clean and perturbed forwards of one step, ablation wiring,
//! the optimizer update, span evaluation and the epoch loop.

mod config;
mod run;


use std::collections::BTreeMap;

pub use config::{Ablation, KlNormalization, SwepConfig, TrainConfig};
pub use run::{read_log, run_training, subsample_indices, LogRecord, RunOutcome, RunSink};

use crate::autograd::{Mat, Tape, Var};
use crate::baselines::{
    adversarial_perturb, apply_mask, dropout_mask, mask_padding, word_dropout, AugmenterConfig, AugmenterKind, MaskKind,
};
use crate::error::{Result, SwepError};
use crate::metrics::{evaluate_predictions, EvalResult};
use crate::model::WORD_EMBEDDING;
use crate::model::{predict_span, span_log_likelihood, Bound, Dropout, ParamStore, QaModel};
use crate::noise::{
    apply_additive_noise, apply_noise, draw_epsilon, sample_noise, sample_prior_noise, NoiseGenerator, NoiseInit,
    NoiseParams, NoiseSource, PriorConfig,
};
use crate::objectives::{combined_objective_var, kl_to_prior, noise_objective_var, LossBreakdown};
use crate::optim::{clip_global_norm, AdamW, AdamWConfig};
use crate::qa_data::{tokenize_and_align, Batch, RawExample, TokenizedExample, Vocabulary, PAD};
use crate::rng::{component_rng, uniform, Component, SwepRng};

/// The SWEP path with one aspect rewired.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Full,
    /// `e + z` against a zero-mean prior.
    Additive,
    /// `mu` replaced by ones.
    FixedMu,
    /// `sigma2` replaced by ones.
    FixedSigma,
    /// `z = mu`, no sampling.
    Deterministic,
    /// KL computed for logging only.
    NoKl,
    /// Only the noise objective is trained.
    NoMle,
}

/// What a training step computes after the clean forward.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Swep(Variant),
    /// A non-SWEP augmenter in place of the noise path.
    Augment(AugmenterKind),
    /// Clean likelihood only.
    MleOnly,
}

impl Method {
    pub fn from_ablation(ablation: Ablation) -> Method {
        match ablation {
            Ablation::Full | Ablation::Baseline(AugmenterKind::Swep) => Method::Swep(Variant::Full),
            Ablation::AdditiveNoise => Method::Swep(Variant::Additive),
            Ablation::FixedMu => Method::Swep(Variant::FixedMu),
            Ablation::FixedSigma => Method::Swep(Variant::FixedSigma),
            Ablation::DeterministicNoise => Method::Swep(Variant::Deterministic),
            Ablation::NoKl => Method::Swep(Variant::NoKl),
            Ablation::NoMle => Method::Swep(Variant::NoMle),
            Ablation::Baseline(AugmenterKind::None) => Method::MleOnly,
            Ablation::Baseline(k) => Method::Augment(k),
        }
    }

    pub fn uses_generator(self) -> bool {
        matches!(self, Method::Swep(_))
    }

    /// Prior of the noise path: zero mean for additive noise, else one.
    pub fn prior(self, alpha: f64) -> PriorConfig {
        match self {
            Method::Swep(Variant::Additive) => PriorConfig { alpha, mean: 0.0 },
            _ => PriorConfig::multiplicative(alpha),
        }
    }

    fn needs_normal(self) -> bool {
        match self {
            Method::Swep(v) => v != Variant::Deterministic,
            Method::Augment(k) => matches!(k, AugmenterKind::GaussianDropout | AugmenterKind::PriorAug),
            Method::MleOnly => false,
        }
    }

    fn needs_uniform(self) -> bool {
        matches!(
            self,
            Method::Augment(AugmenterKind::BernoulliDropout | AugmenterKind::WordDropout)
        )
    }

    /// Random inputs for one `t x d` example.
    pub fn draw(self, rng: &mut SwepRng, t: usize, d: usize) -> ExampleDraws {
        ExampleDraws {
            normal: self.needs_normal().then(|| draw_epsilon(rng, t, d)),
            uniform: self.needs_uniform().then(|| uniform(rng, t, d)),
        }
    }
}

/// Externally drawn randomness for one example, so a step is a pure
/// function of parameters, batch and draws.
#[derive(Debug, Clone, PartialEq)]
pub struct ExampleDraws {
    pub normal: Option<Mat>,
    pub uniform: Option<Mat>,
}

/// Per-example terms. `combined` stays on the tape; the rest are values.
#[derive(Debug, Clone, Copy)]
pub struct ExampleTerms {
    pub combined: Var,
    pub l_mle: f64,
    pub loglik_perturbed: f64,
    pub kl: f64,
}

/// Everything needed to evaluate the training objective on one example.
pub struct Objective<'a> {
    pub model: &'a QaModel,
    pub generator: Option<NoiseGenerator>,
    /// Parameter values; read by the adversarial augmenter's inner gradient.
    pub store: &'a ParamStore,
    pub method: Method,
    pub swep: &'a SwepConfig,
    pub augmenter: &'a AugmenterConfig,
    pub beta: f64,
}

fn missing(what: &str) -> SwepError {
    SwepError::Config(format!("objective needs {what} but none was drawn"))
}

impl Objective<'_> {
    pub fn effective_beta(&self) -> f64 {
        match self.method {
            Method::Swep(Variant::NoKl) | Method::Augment(_) | Method::MleOnly => 0.0,
            Method::Swep(_) => self.beta,
        }
    }

    pub fn effective_lambda(&self) -> f64 {
        match self.method {
            Method::Swep(Variant::NoMle) => 0.0,
            Method::MleOnly => 1.0,
            _ => self.swep.lambda,
        }
    }

    fn log_likelihood(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        emb: Var,
        mask: &[bool],
        span: (usize, usize),
        dropout: Option<&mut SwepRng>,
    ) -> Result<Var> {
        let mut d = dropout.map(|rng| Dropout {
            p: self.model.config.internal_dropout_p,
            rng,
        });
        let h = self.model.encode(tape, bound, emb, mask, d.as_mut())?;
        let (s, e) = self.model.span_logits(tape, bound, h);
        span_log_likelihood(tape, s, e, span, mask)
    }

    /// Gradient of the gold-span negative log-likelihood with respect to the
    /// input embeddings, parameters frozen.
    fn embedding_gradient(&self, point: &Mat, mask: &[bool], span: (usize, usize)) -> Result<Mat> {
        let mut tape = Tape::new();
        let bound = self.store.bind_frozen(&mut tape);
        let x = tape.param(point.clone());
        let ll = self.log_likelihood(&mut tape, &bound, x, mask, span, None)?;
        let nll = tape.scale(ll, -1.0);
        Ok(tape.backward(nll).get_or_zeros(x, point.dim()))
    }

    /// Builds the objective of one example on `tape`.
    ///
    /// `frozen_noise_input` replaces the generator's input with a constant;
    /// finite-difference checks use it to hold the noise input fixed while
    /// encoder parameters move.
    #[allow(clippy::too_many_arguments)]
    pub fn example(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        ids: &[usize],
        mask: &[bool],
        span: (usize, usize),
        draws: &ExampleDraws,
        mut dropout: Option<&mut SwepRng>,
        frozen_noise_input: Option<&Mat>,
    ) -> Result<ExampleTerms> {
        let model = self.model;
        let e = model.embed(tape, bound, ids)?;
        let mut d = dropout.as_deref_mut().map(|rng| Dropout {
            p: model.config.internal_dropout_p,
            rng,
        });
        let clean = model.encode_layers(tape, bound, e, mask, d.as_mut())?;
        let (s, en) = model.span_logits(tape, bound, clean.hidden);
        let ll_clean = span_log_likelihood(tape, s, en, span, mask)?;
        let l_mle = tape.item(ll_clean);
        let lambda = self.swep.lambda;

        match self.method {
            Method::MleOnly => Ok(ExampleTerms {
                combined: ll_clean,
                l_mle,
                loglik_perturbed: l_mle,
                kl: 0.0,
            }),
            Method::Swep(variant) => {
                let generator = self
                    .generator
                    .ok_or_else(|| SwepError::Config("SWEP objective without a noise generator".into()))?;
                let source = match self.swep.noise_source {
                    NoiseSource::Final => clean.hidden,
                    NoiseSource::Layer(l) => *clean.layers.get(l).ok_or_else(|| {
                        SwepError::Config(format!(
                            "noise source layer {l} but the encoder has {}",
                            clean.layers.len()
                        ))
                    })?,
                };
                let input = match frozen_noise_input {
                    Some(h) => tape.constant(h.clone()),
                    None => source,
                };
                let generated = generator.infer_noise_params(tape, bound, input, self.swep.stop_gradient)?;
                let (t, dim) = tape.shape(generated.mu);
                let params = match variant {
                    Variant::FixedMu => NoiseParams {
                        mu: tape.constant(Mat::ones((t, dim))),
                        sigma2: generated.sigma2,
                    },
                    Variant::FixedSigma => NoiseParams {
                        mu: generated.mu,
                        sigma2: tape.constant(Mat::ones((t, dim))),
                    },
                    _ => generated,
                };
                let z = if variant == Variant::Deterministic {
                    params.mu
                } else {
                    let eps = draws.normal.as_ref().ok_or_else(|| missing("a normal draw"))?;
                    sample_noise(tape, &params, eps)?
                };
                let perturbed = if variant == Variant::Additive {
                    apply_additive_noise(tape, e, z, mask)?
                } else {
                    apply_noise(tape, e, z, mask)?
                };
                let ll_pert = self.log_likelihood(tape, bound, perturbed, mask, span, dropout)?;

                let prior = self.method.prior(self.swep.alpha);
                let kl_params = if variant == Variant::NoKl {
                    NoiseParams {
                        mu: tape.detach(params.mu),
                        sigma2: tape.detach(params.sigma2),
                    }
                } else {
                    params
                };
                let mut kl = kl_to_prior(tape, &kl_params, &prior, mask)?;
                if self.swep.kl_normalization == KlNormalization::TokenMean {
                    let n = mask.iter().filter(|&&m| m).count() as f64;
                    kl = tape.scale(kl, 1.0 / n);
                }
                let l_noise = noise_objective_var(tape, ll_pert, kl, self.effective_beta());
                let combined = if variant == Variant::NoMle {
                    l_noise
                } else {
                    combined_objective_var(tape, ll_clean, l_noise, lambda)?
                };
                Ok(ExampleTerms {
                    combined,
                    l_mle,
                    loglik_perturbed: tape.item(ll_pert),
                    kl: tape.item(kl),
                })
            }
            Method::Augment(kind) => {
                let a = self.augmenter;
                let perturbed = match kind {
                    AugmenterKind::GaussianDropout => {
                        let eps = draws.normal.as_ref().ok_or_else(|| missing("a normal draw"))?;
                        apply_mask(tape, e, dropout_mask(MaskKind::Gaussian, a.p, eps)?, mask)?
                    }
                    AugmenterKind::BernoulliDropout => {
                        let u = draws.uniform.as_ref().ok_or_else(|| missing("a uniform draw"))?;
                        apply_mask(tape, e, dropout_mask(MaskKind::Bernoulli, a.p, u)?, mask)?
                    }
                    AugmenterKind::WordDropout => {
                        let u = draws.uniform.as_ref().ok_or_else(|| missing("a uniform draw"))?;
                        let per_token: Vec<f64> = u.column(0).to_vec();
                        word_dropout(tape, e, a.p, &per_token, mask)?
                    }
                    AugmenterKind::PriorAug => {
                        let eps = draws.normal.as_ref().ok_or_else(|| missing("a normal draw"))?;
                        let z = sample_prior_noise(&PriorConfig::multiplicative(self.swep.alpha), eps)?;
                        tape.mul_const(e, mask_padding(z, mask))
                    }
                    AugmenterKind::Adversarial => {
                        let base = tape.value(e).clone();
                        let moved = adversarial_perturb(
                            &base,
                            |x| self.embedding_gradient(x, mask, span),
                            a.adv_steps,
                            a.step_size(),
                            a.adv_radius,
                            mask,
                        )?;
                        let delta = moved - &base;
                        tape.add_const(e, &delta)
                    }
                    AugmenterKind::Swep | AugmenterKind::None => {
                        return Err(SwepError::Config(format!("{kind} is not an augmenter baseline")));
                    }
                };
                let ll_aug = self.log_likelihood(tape, bound, perturbed, mask, span, dropout)?;
                let combined = combined_objective_var(tape, ll_clean, ll_aug, lambda)?;
                Ok(ExampleTerms {
                    combined,
                    l_mle,
                    loglik_perturbed: tape.item(ll_aug),
                    kl: 0.0,
                })
            }
        }
    }

    /// Batch mean of the per-example objectives, as a tape node, plus the
    /// logged breakdown (with `step` left at 0).
    pub fn batch(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        batch: &Batch,
        draws: &[ExampleDraws],
        mut dropout: Option<&mut SwepRng>,
        frozen_noise_inputs: Option<&[Mat]>,
    ) -> Result<(Var, LossBreakdown)> {
        let n = batch.size();
        if draws.len() != n || frozen_noise_inputs.is_some_and(|f| f.len() != n) {
            return Err(SwepError::Shape(format!("batch of {n} with {} draws", draws.len())));
        }
        let mut total: Option<Var> = None;
        let (mut l_mle, mut ll_pert, mut kl) = (0.0, 0.0, 0.0);
        for r in 0..n {
            let ids = batch.ids_row(r);
            let mask = batch.mask_row(r);
            let terms = self.example(
                tape,
                bound,
                &ids,
                &mask,
                batch.spans[r],
                &draws[r],
                dropout.as_deref_mut(),
                frozen_noise_inputs.map(|f| &f[r]),
            )?;
            total = Some(match total {
                Some(acc) => tape.add(acc, terms.combined),
                None => terms.combined,
            });
            l_mle += terms.l_mle;
            ll_pert += terms.loglik_perturbed;
            kl += terms.kl;
        }
        let total = total.ok_or_else(|| SwepError::Empty("batch".into()))?;
        let mean = tape.scale(total, 1.0 / n as f64);
        let nf = n as f64;
        let breakdown = LossBreakdown {
            step: 0,
            l_mle: l_mle / nf,
            loglik_perturbed: ll_pert / nf,
            kl_total: kl / nf,
            beta: self.effective_beta(),
            lambda: self.effective_lambda(),
            combined: tape.item(mean),
        };
        Ok((mean, breakdown))
    }
}

/// Model, optional noise generator, parameters and optimizer state.
pub struct Trainer {
    pub model: QaModel,
    pub generator: Option<NoiseGenerator>,
    pub store: ParamStore,
    pub config: TrainConfig,
    pub method: Method,
    optimizer: AdamW,
    noise_rng: SwepRng,
    dropout_rng: SwepRng,
    step: usize,
}

impl Trainer {
    /// Fresh parameters from the `Init` stream of `seed`.
    pub fn new(model: QaModel, config: TrainConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let method = Method::from_ablation(config.ablation);
        let mut store = ParamStore::new();
        let mut init_rng = component_rng(seed, Component::Init);
        model.init_params(&mut store, &mut init_rng);
        let generator = method.uses_generator().then(|| NoiseGenerator::new(model.config.d));
        if let Some(g) = generator {
            let prior = method.prior(config.swep.alpha);
            g.init_params(&mut store, &mut init_rng, NoiseInit::at_prior(&prior));
        }
        Self::with_params(model, store, config, seed)
    }

    /// Starts from existing parameters (the generator is used when its
    /// tensors are present and the method needs it).
    pub fn with_params(model: QaModel, store: ParamStore, config: TrainConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let method = Method::from_ablation(config.ablation);
        let generator = method.uses_generator().then(|| NoiseGenerator::new(model.config.d));
        if generator.is_some() && store.get(crate::noise::L1_W).is_none() {
            return Err(SwepError::Config("parameters lack the noise generator".into()));
        }
        let optimizer = AdamW::new(AdamWConfig {
            learning_rate: config.learning_rate,
            weight_decay: config.weight_decay,
            ..AdamWConfig::default()
        });
        Ok(Trainer {
            model,
            generator,
            store,
            method,
            optimizer,
            noise_rng: component_rng(seed, Component::Noise),
            dropout_rng: component_rng(seed, Component::Dropout),
            step: 0,
            config,
        })
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    pub fn objective(&self, beta: f64) -> Objective<'_> {
        Objective {
            model: &self.model,
            generator: self.generator,
            store: &self.store,
            method: self.method,
            swep: &self.config.swep,
            augmenter: &self.config.augmenter,
            beta,
        }
    }

    /// Fresh draws for every row of `batch`, one `T x d` set per example.
    pub fn draw(&mut self, batch: &Batch) -> Vec<ExampleDraws> {
        let d = self.model.config.d;
        (0..batch.size())
            .map(|_| self.method.draw(&mut self.noise_rng, batch.width(), d))
            .collect()
    }

    /// One update on `batch` at fractional epoch `progress`.
    pub fn train_step(&mut self, batch: &Batch, progress: f64, batch_index: usize) -> Result<LossBreakdown> {
        let beta = self.config.swep.beta.beta_at(progress)?;
        let draws = self.draw(batch);
        self.train_step_with(batch, &draws, beta, batch_index)
    }

    /// One update with given draws and KL weight.
    pub fn train_step_with(
        &mut self,
        batch: &Batch,
        draws: &[ExampleDraws],
        beta: f64,
        batch_index: usize,
    ) -> Result<LossBreakdown> {
        let mut tape = Tape::new();
        let bound = self.store.bind(&mut tape);
        let dropout = (self.model.config.internal_dropout_p > 0.0).then_some(&mut self.dropout_rng);
        let objective = Objective {
            model: &self.model,
            generator: self.generator,
            store: &self.store,
            method: self.method,
            swep: &self.config.swep,
            augmenter: &self.config.augmenter,
            beta,
        };
        let (mean, mut breakdown) = objective.batch(&mut tape, &bound, batch, draws, dropout, None)?;
        breakdown.step = self.step;
        if !breakdown.is_finite() {
            return Err(SwepError::NonFiniteLoss { batch: batch_index });
        }
        let loss = tape.scale(mean, -1.0);
        let grads = tape.backward(loss);
        let mut grads = bound.collect(&tape, &grads);
        if let Some(g) = grads.get_mut(WORD_EMBEDDING) {
            g.row_mut(PAD).fill(0.0);
        }
        if grads.values().any(|g| g.iter().any(|v| !v.is_finite())) {
            return Err(SwepError::NonFiniteLoss { batch: batch_index });
        }
        if self.config.grad_clip > 0.0 {
            clip_global_norm(&mut grads, self.config.grad_clip);
        }
        self.optimizer.update(&mut self.store, &grads)?;
        self.step += 1;
        Ok(breakdown)
    }

    /// Objective value on `batch` with given draws; no update, no dropout.
    pub fn objective_value(&self, batch: &Batch, draws: &[ExampleDraws], beta: f64) -> Result<f64> {
        let mut tape = Tape::new();
        let bound = self.store.bind_frozen(&mut tape);
        let (_, b) = self
            .objective(beta)
            .batch(&mut tape, &bound, batch, draws, None, None)?;
        Ok(b.combined)
    }

    /// Objective value and gradient for every parameter.
    ///
    /// `frozen_noise_inputs`, one per row, replace the generator's input.
    pub fn objective_gradients(
        &self,
        store: &ParamStore,
        batch: &Batch,
        draws: &[ExampleDraws],
        beta: f64,
        frozen_noise_inputs: Option<&[Mat]>,
    ) -> Result<(f64, BTreeMap<String, Mat>)> {
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let objective = Objective {
            store,
            ..self.objective(beta)
        };
        let (mean, b) = objective.batch(&mut tape, &bound, batch, draws, None, frozen_noise_inputs)?;
        let grads = tape.backward(mean);
        Ok((b.combined, bound.collect(&tape, &grads)))
    }

    /// The generator's input for each row of `batch` under `store`.
    pub fn noise_inputs(&self, store: &ParamStore, batch: &Batch) -> Result<Vec<Mat>> {
        (0..batch.size())
            .map(|r| {
                let mut tape = Tape::new();
                let bound = store.bind_frozen(&mut tape);
                let mask = batch.mask_row(r);
                let e = self.model.embed(&mut tape, &bound, &batch.ids_row(r))?;
                let out = self.model.encode_layers(&mut tape, &bound, e, &mask, None)?;
                let v = match self.config.swep.noise_source {
                    NoiseSource::Final => out.hidden,
                    NoiseSource::Layer(l) => *out
                        .layers
                        .get(l)
                        .ok_or_else(|| SwepError::Config(format!("no encoder layer {l}")))?,
                };
                Ok(tape.value(v).clone())
            })
            .collect()
    }
}

/// Raw examples together with their tokenized forms.
#[derive(Debug, Clone, PartialEq)]
pub struct QaSet {
    pub raw: Vec<RawExample>,
    pub tokenized: Vec<TokenizedExample>,
}

impl QaSet {
    pub fn build(raw: Vec<RawExample>, vocab: &Vocabulary) -> Result<Self> {
        let tokenized = raw
            .iter()
            .map(|ex| tokenize_and_align(ex, vocab))
            .collect::<Result<Vec<_>>>()?;
        Ok(QaSet { raw, tokenized })
    }

    pub fn len(&self) -> usize {
        self.raw.len()
    }

    pub fn is_empty(&self) -> bool {
        self.raw.is_empty()
    }

    /// The examples at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> QaSet {
        QaSet {
            raw: indices.iter().map(|&i| self.raw[i].clone()).collect(),
            tokenized: indices.iter().map(|&i| self.tokenized[i].clone()).collect(),
        }
    }
}

/// Best span of one example under frozen parameters.
pub fn predict(
    model: &QaModel,
    store: &ParamStore,
    ex: &TokenizedExample,
    max_answer_len: usize,
) -> Result<(usize, usize)> {
    let mut tape = Tape::new();
    let bound = store.bind_frozen(&mut tape);
    let mask = ex.padding_mask();
    let e = model.embed(&mut tape, &bound, &ex.token_ids)?;
    let h = model.encode(&mut tape, &bound, e, &mask, None)?;
    let (s, en) = model.span_logits(&mut tape, &bound, h);
    let s: Vec<f64> = tape.value(s).iter().copied().collect();
    let en: Vec<f64> = tape.value(en).iter().copied().collect();
    predict_span(&s, &en, &mask, ex.context_range(), max_answer_len)
}

/// Answer text for a predicted span: the original context characters when
/// offsets are known, else the tokens joined by spaces.
pub fn span_text(raw: &RawExample, ex: &TokenizedExample, span: (usize, usize), vocab: Option<&Vocabulary>) -> String {
    let c0 = ex.question_len + 2;
    let (s, e) = (span.0 - c0, span.1 - c0);
    if let (Some(&(start, _)), Some(&(_, end))) = (ex.context_offsets.get(s), ex.context_offsets.get(e)) {
        return raw.context.chars().skip(start).take(end - start).collect();
    }
    match vocab {
        Some(v) => crate::qa_data::detokenize(v, &ex.token_ids[span.0..=span.1]),
        None => String::new(),
    }
}

/// EM/F1 of the model's predictions on `set`, with internal dropout off.
pub fn evaluate_em_f1(model: &QaModel, store: &ParamStore, set: &QaSet, max_answer_len: usize) -> Result<EvalResult> {
    let pairs = set
        .raw
        .iter()
        .zip(&set.tokenized)
        .map(|(raw, ex)| {
            let span = predict(model, store, ex, max_answer_len)?;
            let golds: Vec<String> = raw.gold_answers().into_iter().map(String::from).collect();
            Ok((span_text(raw, ex, span, None), golds))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(evaluate_predictions(&pairs))
}
