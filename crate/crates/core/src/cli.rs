//! Command-line entry point: `synth-data`, `train`, `eval`, `analyze`,
//! `report`.
//!
//! Exit status is 0 on success, 1 for invalid input (usage, configuration,
//! data, checkpoint/vocabulary mismatch) and 2 for failures while running.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde_json::json;

use crate::analysis::{analyze, emit_report, render_report, AnalysisReport, NoisePath};
use crate::config::{read_vocab, write_json, DataConfig, RunConfig};
use crate::error::SwepError;
use crate::model::{Checkpoint, QaModel};
use crate::noise::{NoiseGenerator, NoiseSource, L1_W};
use crate::qa_data::{load_squad_json, synthesize_toy_dataset, write_squad_json, ToyDatasetSpec};
use crate::rng::{component_rng, Component};
use crate::trainer::{evaluate_em_f1, run_training, Ablation, QaSet, RunSink};

pub const RUN_DIR_ENV: &str = "SWEP_RUN_DIR";

#[derive(Debug, Parser)]
#[command(
    name = "swep",
    version,
    about = "Learned stochastic word-embedding perturbation for extractive QA"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic dataset (SQuAD JSON plus vocabulary).
    SynthData {
        /// Config whose `data` section holds a synthetic spec.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        n_examples: Option<usize>,
        #[arg(long)]
        vocab_size: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a model and write checkpoints and a metrics log.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        run_dir: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        /// e.g. `full`, `no_kl`, `baseline:word_dropout`
        #[arg(long)]
        ablation: Option<String>,
    },
    /// Evaluate a checkpoint and print EM/F1 as JSON.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// SQuAD-format dataset.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long, default_value_t = 30)]
        max_answer_len: usize,
    },
    /// Measure the learned perturbation of one or more checkpoints.
    Analyze {
        /// Repeat to build a ratio series over training steps.
        #[arg(long, required = true)]
        checkpoint: Vec<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Config whose `analysis` section is used.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Render report.json in a directory to markdown, SVG and HTML.
    Report {
        #[arg(long)]
        dir: PathBuf,
    },
}

#[derive(Debug)]
struct Failure {
    code: i32,
    message: String,
}

fn invalid(e: impl std::fmt::Display) -> Failure {
    Failure {
        code: 1,
        message: e.to_string(),
    }
}

fn runtime(e: SwepError) -> Failure {
    let code = match e {
        SwepError::Config(_)
        | SwepError::Validation { .. }
        | SwepError::Alignment { .. }
        | SwepError::Parse { .. }
        | SwepError::Checkpoint(_) => 1,
        _ => 2,
    };
    Failure {
        code,
        message: e.to_string(),
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig, Failure> {
    match path {
        Some(p) if !p.is_file() => Err(invalid(format!("config file {} not found", p.display()))),
        Some(p) => RunConfig::from_file(p).map_err(invalid),
        None => Ok(RunConfig::default()),
    }
}

fn timestamped_dir() -> PathBuf {
    let root = std::env::var_os(RUN_DIR_ENV).map_or_else(|| PathBuf::from("runs"), PathBuf::from);
    let stamp = chrono::Local::now().format("%Y%m%d-%H%M%S").to_string();
    let mut dir = root.join(&stamp);
    let mut n = 1;
    while dir.exists() {
        dir = root.join(format!("{stamp}-{n}"));
        n += 1;
    }
    dir
}

fn load_raw(path: &Path) -> Result<Vec<crate::qa_data::RawExample>, Failure> {
    if !path.is_file() {
        return Err(invalid(format!("dataset {} not found", path.display())));
    }
    let loaded = load_squad_json(path).map_err(invalid)?;
    for e in &loaded.errors {
        log::warn!("{}: skipped {e}", path.display());
    }
    if loaded.examples.is_empty() {
        return Err(invalid(format!("no usable examples in {}", path.display())));
    }
    Ok(loaded.examples)
}

fn load_checkpoint(path: &Path, vocab_hash: &str) -> Result<(Checkpoint, QaModel), Failure> {
    if !path.is_file() {
        return Err(invalid(format!("checkpoint {} not found", path.display())));
    }
    let ck = Checkpoint::load(path).map_err(invalid)?;
    ck.check_vocab(vocab_hash).map_err(invalid)?;
    let model = QaModel::new(ck.encoder.clone(), ck.vocab_size).map_err(invalid)?;
    Ok((ck, model))
}

fn synth_data(
    config: Option<PathBuf>,
    out: PathBuf,
    n_examples: Option<usize>,
    vocab_size: Option<usize>,
    seed: Option<u64>,
) -> Result<(), Failure> {
    let cfg = load_config(config.as_deref())?;
    let mut spec = match cfg.data {
        DataConfig::Synthetic { spec, .. } => spec,
        DataConfig::Squad { .. } => ToyDatasetSpec::default(),
    };
    spec.n_examples = n_examples.unwrap_or(spec.n_examples);
    spec.vocab_size = vocab_size.unwrap_or(spec.vocab_size);
    spec.seed = seed.unwrap_or(spec.seed);
    spec.validate().map_err(invalid)?;
    let (raw, vocab) = synthesize_toy_dataset(&spec).map_err(runtime)?;
    std::fs::create_dir_all(&out).map_err(|e| runtime(SwepError::io(&out, e)))?;
    write_squad_json(&out.join("train.json"), &raw).map_err(runtime)?;
    write_json(&out.join("vocab.json"), &vocab).map_err(runtime)?;
    write_json(&out.join("spec.json"), &spec).map_err(runtime)?;
    println!(
        "{}",
        json!({"out": out, "n_examples": raw.len(), "vocab_size": vocab.len(), "vocab_hash": vocab.hash()})
    );
    Ok(())
}

fn train(
    config: Option<PathBuf>,
    seed: Option<u64>,
    run_dir: Option<PathBuf>,
    epochs: Option<usize>,
    ablation: Option<String>,
) -> Result<(), Failure> {
    let mut cfg = load_config(config.as_deref())?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(e) = epochs {
        cfg.train.epochs = e;
    }
    if let Some(a) = ablation {
        let a: Ablation = a.parse().map_err(invalid)?;
        cfg.train.ablation = a;
        if let Ablation::Baseline(kind) = a {
            cfg.train.augmenter.kind = kind;
        }
    }
    let dir = run_dir.or(cfg.run_dir.clone()).unwrap_or_else(timestamped_dir);
    cfg.run_dir = Some(dir.clone());
    cfg.validate().map_err(invalid)?;
    let data = cfg.load_data().map_err(invalid)?;
    let model = cfg.model(&data.vocab).map_err(invalid)?;

    std::fs::create_dir_all(&dir).map_err(|e| runtime(SwepError::io(&dir, e)))?;
    write_json(&dir.join("config.json"), &cfg).map_err(runtime)?;
    write_json(&dir.join("vocab.json"), &data.vocab).map_err(runtime)?;
    let sink = RunSink {
        dir: dir.clone(),
        vocab_hash: data.vocab.hash(),
    };
    let out =
        run_training(&data.train, data.dev.as_ref(), model, &cfg.train, cfg.seed, Some(&sink)).map_err(runtime)?;
    let train_eval = evaluate_em_f1(
        &out.trainer.model,
        &out.trainer.store,
        &data.train,
        cfg.train.max_answer_len,
    )
    .map_err(runtime)?;
    println!(
        "{}",
        json!({
            "run_dir": dir,
            "steps": out.trainer.steps_taken(),
            "epochs_run": out.epochs_run,
            "target_reached_epoch": out.target_reached_epoch,
            "train": train_eval,
            "best_dev": out.best_dev,
        })
    );
    Ok(())
}

fn eval(checkpoint: PathBuf, data: PathBuf, vocab: PathBuf, max_answer_len: usize) -> Result<(), Failure> {
    let vocab = read_vocab(&vocab).map_err(invalid)?;
    let (ck, model) = load_checkpoint(&checkpoint, &vocab.hash())?;
    let set = QaSet::build(load_raw(&data)?, &vocab).map_err(invalid)?;
    let store = ck.params().map_err(invalid)?;
    let r = evaluate_em_f1(&model, &store, &set, max_answer_len).map_err(runtime)?;
    println!("{}", serde_json::to_string(&r).map_err(|e| invalid(e.to_string()))?);
    Ok(())
}

fn analyze_cmd(
    checkpoints: Vec<PathBuf>,
    data: PathBuf,
    vocab: PathBuf,
    out: PathBuf,
    config: Option<PathBuf>,
    seed: Option<u64>,
) -> Result<(), Failure> {
    let cfg = load_config(config.as_deref())?;
    cfg.analysis.validate().map_err(invalid)?;
    let vocab = read_vocab(&vocab).map_err(invalid)?;
    let set = QaSet::build(load_raw(&data)?, &vocab).map_err(invalid)?;
    let mut rng = component_rng(seed.unwrap_or(cfg.seed), Component::Analysis);
    let mut combined = AnalysisReport::default();
    for path in &checkpoints {
        let (ck, model) = load_checkpoint(path, &vocab.hash())?;
        let store = ck.params().map_err(invalid)?;
        let generator = store.get(L1_W).map(|_| NoiseGenerator::new(model.config.d));
        let source: NoiseSource = ck
            .meta
            .get("noise_source")
            .map(|v| serde_json::from_value(v.clone()))
            .transpose()
            .map_err(|e| invalid(format!("{}: bad noise_source: {e}", path.display())))?
            .unwrap_or(NoiseSource::Final);
        let alpha = ck.meta.get("alpha").and_then(|v| v.as_f64()).unwrap_or(0.1);
        let additive = ck.meta.get("ablation").and_then(|v| v.as_str()) == Some("additive_noise");
        let noise = generator.as_ref().map(|g| NoisePath {
            generator: g,
            source,
            additive,
            alpha,
        });
        let report = analyze(
            &model,
            &store,
            &vocab,
            &set.tokenized,
            noise,
            &cfg.analysis,
            ck.step,
            &mut rng,
        )
        .map_err(runtime)?;
        combined
            .word_change_ratio_series
            .extend(report.word_change_ratio_series);
        combined.intensity_records = report.intensity_records;
        combined.bucket_stats = report.bucket_stats;
    }
    let files = emit_report(&combined, &out).map_err(runtime)?;
    println!("{}", json!({ "files": files }));
    Ok(())
}

fn dispatch(command: Command) -> Result<(), Failure> {
    match command {
        Command::SynthData {
            config,
            out,
            n_examples,
            vocab_size,
            seed,
        } => synth_data(config, out, n_examples, vocab_size, seed),
        Command::Train {
            config,
            seed,
            run_dir,
            epochs,
            ablation,
        } => train(config, seed, run_dir, epochs, ablation),
        Command::Eval {
            checkpoint,
            data,
            vocab,
            max_answer_len,
        } => eval(checkpoint, data, vocab, max_answer_len),
        Command::Analyze {
            checkpoint,
            data,
            vocab,
            out,
            config,
            seed,
        } => analyze_cmd(checkpoint, data, vocab, out, config, seed),
        Command::Report { dir } => {
            if !dir.join("report.json").is_file() {
                return Err(invalid(format!("no report.json in {}", dir.display())));
            }
            let files = render_report(&dir).map_err(runtime)?;
            println!("{}", json!({ "files": files }));
            Ok(())
        }
    }
}

/// Parses `argv` (program name first), runs the command and returns the
/// process exit status.
pub fn run_command<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(f) => {
            eprintln!("error: {}", f.message);
            f.code
        }
    }
}
