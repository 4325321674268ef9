use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{evaluate_em_f1, QaSet, TrainConfig, Trainer};
use crate::error::{Result, SwepError};
use crate::metrics::EvalResult;
use crate::model::{Checkpoint, QaModel};
use crate::objectives::LossBreakdown;
use crate::qa_data::batchify;
use crate::rng::{component_rng, Component};

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogRecord {
    Step {
        epoch: usize,
        batch: usize,
        #[serde(flatten)]
        loss: LossBreakdown,
    },
    Eval {
        step: usize,
        epoch: usize,
        split: String,
        #[serde(flatten)]
        result: EvalResult,
    },
    EvalError {
        step: usize,
        epoch: usize,
        split: String,
        message: String,
    },
}

/// Where a run writes its log and checkpoints.
#[derive(Debug, Clone)]
pub struct RunSink {
    pub dir: PathBuf,
    pub vocab_hash: String,
}

pub struct RunOutcome {
    pub trainer: Trainer,
    pub records: Vec<LogRecord>,
    pub epochs_run: usize,
    /// Epoch count after which train EM first reached the target.
    pub target_reached_epoch: Option<usize>,
    pub last_train_eval: Option<EvalResult>,
    pub best_dev: Option<EvalResult>,
    pub train_examples_used: usize,
}

/// `ceil(n * fraction)` distinct indices from the `Subsample` stream, sorted.
pub fn subsample_indices(n: usize, fraction: f64, seed: u64) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(SwepError::Config(format!(
            "subsample must lie in (0, 1], got {fraction}"
        )));
    }
    let k = ((n as f64) * fraction).ceil() as usize;
    let k = k.min(n);
    if k == n {
        return Ok((0..n).collect());
    }
    let mut rng = component_rng(seed, Component::Subsample);
    let mut idx = rand::seq::index::sample(&mut rng, n, k).into_vec();
    idx.sort_unstable();
    Ok(idx)
}

struct Log {
    records: Vec<LogRecord>,
    file: Option<(PathBuf, BufWriter<File>)>,
}

impl Log {
    fn push(&mut self, rec: LogRecord) -> Result<()> {
        if let Some((path, w)) = &mut self.file {
            let line = serde_json::to_string(&rec).map_err(|e| SwepError::Checkpoint(e.to_string()))?;
            writeln!(w, "{line}").map_err(|e| SwepError::io(path.clone(), e))?;
        }
        self.records.push(rec);
        Ok(())
    }

    fn flush(&mut self) -> Result<()> {
        if let Some((path, w)) = &mut self.file {
            w.flush().map_err(|e| SwepError::io(path.clone(), e))?;
        }
        Ok(())
    }
}

fn save(trainer: &Trainer, sink: &RunSink, name: &str) -> Result<()> {
    let mut ck = Checkpoint::new(
        trainer.model.config.clone(),
        trainer.model.vocab_size,
        sink.vocab_hash.clone(),
        trainer.steps_taken(),
        &trainer.store,
    );
    let swep = &trainer.config.swep;
    ck.meta
        .insert("ablation".into(), trainer.config.ablation.to_string().into());
    ck.meta.insert("alpha".into(), swep.alpha.into());
    ck.meta.insert(
        "noise_source".into(),
        serde_json::to_value(swep.noise_source).map_err(|e| SwepError::Checkpoint(e.to_string()))?,
    );
    ck.save(&sink.dir.join(name))
}

/// Trains for `config.epochs` epochs (or until the train-EM target), logging
/// every step and evaluation. With a sink, writes `metrics.jsonl`,
/// `best.ckpt` (best dev F1, else best train F1, else last) and `last.ckpt`.
pub fn run_training(
    train: &QaSet,
    dev: Option<&QaSet>,
    model: QaModel,
    config: &TrainConfig,
    seed: u64,
    sink: Option<&RunSink>,
) -> Result<RunOutcome> {
    config.validate()?;
    if train.is_empty() {
        return Err(SwepError::Empty("training set".into()));
    }
    if dev.is_some_and(QaSet::is_empty) {
        return Err(SwepError::Empty("dev set".into()));
    }
    let used = subsample_indices(train.len(), config.subsample, seed)?;
    let train = train.select(&used);

    let file = match sink {
        Some(s) => {
            fs::create_dir_all(&s.dir).map_err(|e| SwepError::io(&s.dir, e))?;
            let path = s.dir.join("metrics.jsonl");
            let f = File::create(&path).map_err(|e| SwepError::io(&path, e))?;
            Some((path, BufWriter::new(f)))
        }
        None => None,
    };
    let mut log = Log {
        records: Vec::new(),
        file,
    };

    let mut trainer = Trainer::new(model, config.clone(), seed)?;
    let mut shuffle_rng = component_rng(seed, Component::Shuffle);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let n_batches = train.len().div_ceil(config.batch_size);

    let mut best_dev: Option<EvalResult> = None;
    let mut best_train_f1: Option<f64> = None;
    let mut wrote_best = false;
    let mut last_train_eval = None;
    let mut target_reached_epoch = None;
    let mut epochs_run = 0;

    let eval_dev = |trainer: &Trainer, epoch: usize, log: &mut Log, best: &mut Option<EvalResult>| -> Result<bool> {
        let Some(dev) = dev else { return Ok(false) };
        let step = trainer.steps_taken();
        match evaluate_em_f1(&trainer.model, &trainer.store, dev, config.max_answer_len) {
            Ok(r) => {
                log.push(LogRecord::Eval {
                    step,
                    epoch,
                    split: "dev".into(),
                    result: r,
                })?;
                let improved = best.is_none_or(|b| r.f1 > b.f1);
                if improved {
                    *best = Some(r);
                }
                Ok(improved)
            }
            Err(e) => {
                log::warn!("dev evaluation failed at step {step}: {e}");
                log.push(LogRecord::EvalError {
                    step,
                    epoch,
                    split: "dev".into(),
                    message: e.to_string(),
                })?;
                Ok(false)
            }
        }
    };

    for epoch in 0..config.epochs {
        order.shuffle(&mut shuffle_rng);
        let examples: Vec<_> = order.iter().map(|&i| train.tokenized[i].clone()).collect();
        let batches = batchify(&examples, config.batch_size)?;
        for (b, batch) in batches.iter().enumerate() {
            let progress = epoch as f64 + b as f64 / n_batches as f64;
            let loss = trainer.train_step(batch, progress, b)?;
            log.push(LogRecord::Step { epoch, batch: b, loss })?;
            if let Some(every) = config.eval_every {
                if trainer.steps_taken() % every == 0 && eval_dev(&trainer, epoch, &mut log, &mut best_dev)? {
                    if let Some(s) = sink {
                        save(&trainer, s, "best.ckpt")?;
                        wrote_best = true;
                    }
                }
            }
        }
        epochs_run = epoch + 1;
        if config.eval_every.is_none() && eval_dev(&trainer, epoch, &mut log, &mut best_dev)? {
            if let Some(s) = sink {
                save(&trainer, s, "best.ckpt")?;
                wrote_best = true;
            }
        }
        if let Some(target) = config.target_train_em {
            let r = evaluate_em_f1(&trainer.model, &trainer.store, &train, config.max_answer_len)?;
            log.push(LogRecord::Eval {
                step: trainer.steps_taken(),
                epoch,
                split: "train".into(),
                result: r,
            })?;
            last_train_eval = Some(r);
            if dev.is_none() && best_train_f1.is_none_or(|f| r.f1 > f) {
                best_train_f1 = Some(r.f1);
                if let Some(s) = sink {
                    save(&trainer, s, "best.ckpt")?;
                    wrote_best = true;
                }
            }
            if r.em >= target {
                target_reached_epoch = Some(epoch + 1);
                break;
            }
        }
    }
    log.flush()?;
    if let Some(s) = sink {
        save(&trainer, s, "last.ckpt")?;
        if !wrote_best {
            save(&trainer, s, "best.ckpt")?;
        }
    }
    Ok(RunOutcome {
        trainer,
        records: log.records,
        epochs_run,
        target_reached_epoch,
        last_train_eval,
        best_dev,
        train_examples_used: used.len(),
    })
}

/// Reads a metrics log written by [`run_training`].
pub fn read_log(path: &Path) -> Result<Vec<LogRecord>> {
    let text = fs::read_to_string(path).map_err(|e| SwepError::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            serde_json::from_str(l).map_err(|e| SwepError::Parse {
                path: path.to_path_buf(),
                message: e.to_string(),
            })
        })
        .collect()
}
