//! `logitdp`: pre-training, fine-tuning, evaluation and verification runs.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::json;

use logit_dp::evaluation::{confusion_and_metrics, evaluate_model, EvalReport};
use logit_dp::losses::LossFamily;
use logit_dp::model::EmbeddingModel;
use logit_dp::properties::run_all;
use logit_dp::sensitivity::{empirical_sensitivity, BoundMode, ProbeSpec};
use logit_dp::training::{finetune, head_accuracy, metrics_csv, pretrain, ClassifierHead, EvalPlan};
use logit_dp::Error;

use config::{labeled, RunConfig, RunFlags};

#[derive(Parser, Debug)]
#[command(name = "logitdp", version, about = "Logit-level DP training for similarity losses")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train an embedding model on positive pairs.
    Pretrain(RunFlags),
    /// Train a classifier head on a frozen encoder checkpoint.
    Finetune(RunFlags),
    /// k-NN evaluation of an encoder checkpoint.
    Evaluate(RunFlags),
    /// Compare analytic sensitivity with a brute-force maximum.
    VerifySensitivity(SweepFlags),
    /// Run the invariant suite.
    Properties(PropertyFlags),
}

#[derive(Args, Debug)]
struct SweepFlags {
    #[arg(long, default_value = "contrastive", value_parser = |s: &str| s.parse::<LossFamily>().map_err(|e| e.to_string()))]
    loss: LossFamily,
    #[arg(long, default_value_t = 2)]
    n_min: usize,
    #[arg(long, default_value_t = 12)]
    n_max: usize,
    #[arg(long, default_value_t = 500)]
    trials: usize,
    #[arg(long, default_value_t = 1.0)]
    clip_bound: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Weight the L term by n instead of n − 1.
    #[arg(long)]
    conservative: bool,
    /// Also write the table to `<out>/sensitivity.csv`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct PropertyFlags {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also write `<out>/properties.json`.
    #[arg(long)]
    out: Option<PathBuf>,
}

enum Failure {
    Err(Error),
    Violation(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Err(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Err(e.into())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::Err(e.into())
    }
}

type Outcome = Result<(), Failure>;

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Data(_) | Error::Format(_) | Error::Io(_) | Error::Json(_) => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match cli.command {
        Command::Pretrain(f) => f.resolve().map_err(Failure::from).and_then(|c| cmd_pretrain(&c)),
        Command::Finetune(f) => f.resolve().map_err(Failure::from).and_then(|c| cmd_finetune(&c)),
        Command::Evaluate(f) => f.resolve().map_err(Failure::from).and_then(|c| cmd_evaluate(&c)),
        Command::VerifySensitivity(f) => cmd_verify_sensitivity(&f),
        Command::Properties(f) => cmd_properties(&f),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Err(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
        Err(Failure::Violation(msg)) => {
            eprintln!("violation: {msg}");
            ExitCode::from(2)
        }
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Outcome {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

fn write_report(out: &Path, report: &EvalReport) -> Outcome {
    write_json(&out.join("eval.json"), report)?;
    std::fs::write(out.join("confusion.csv"), report.confusion_csv())?;
    Ok(())
}

fn cmd_pretrain(c: &RunConfig) -> Outcome {
    let trainer = c.trainer()?;
    let eval = c.eval_spec()?;
    let (train, test) = c.load_data()?;
    let spec = c.model_spec(train.dim())?;
    let model = EmbeddingModel::init(&spec, c.seed)?;
    let init_hash = model.params().content_hash();
    let sensitivity = trainer.sensitivity()?;
    let (tl, te) = (labeled(&train), labeled(&test));
    let plan = EvalPlan {
        train: &tl,
        test: &te,
        spec: eval,
    };
    let outcome = pretrain(model, &train, &trainer, Some(&plan))?;
    std::fs::create_dir_all(&c.out)?;
    std::fs::write(c.out.join("metrics.csv"), metrics_csv(&outcome.log))?;
    outcome.model.save(c.out.join("checkpoint.bin"))?;
    let (_, last) = outcome.evals.last().expect("final evaluation always runs");
    write_report(&c.out, last)?;
    let evals: Vec<_> = outcome
        .evals
        .iter()
        .map(|(s, r)| json!({"step": s, "accuracy": r.accuracy, "best_f_beta": r.best_f_beta}))
        .collect();
    let manifest = json!({
        "command": "pretrain",
        "config": c,
        "trainer": trainer,
        "sigma": trainer.privacy.sigma,
        "epsilon": trainer.privacy.epsilon,
        "sensitivity": sensitivity,
        "noise_std": trainer.privacy.sigma * sensitivity,
        "model": spec,
        "param_count": outcome.model.param_count(),
        "init_hash": init_hash,
        "final_hash": outcome.model.params().content_hash(),
        "train_pairs": train.len(),
        "test_pairs": test.len(),
        "evaluations": evals,
    });
    write_json(&c.out.join("manifest.json"), &manifest)?;
    println!(
        "pretrain: {} steps, final accuracy {:.4}, outputs in {}",
        trainer.steps,
        last.accuracy,
        c.out.display()
    );
    Ok(())
}

fn load_encoder(c: &RunConfig) -> Result<(EmbeddingModel, PathBuf), Failure> {
    let path = c
        .checkpoint
        .clone()
        .ok_or_else(|| Error::Config("--checkpoint is required".into()))?;
    if !path.is_file() {
        return Err(Error::Data(format!("checkpoint {} not found", path.display())).into());
    }
    Ok((EmbeddingModel::load(&path)?, path))
}

fn cmd_finetune(c: &RunConfig) -> Outcome {
    let (encoder, path) = load_encoder(c)?;
    let (train, test) = c.load_data()?;
    if train.dim() != encoder.input_dim() {
        return Err(Error::Config(format!(
            "checkpoint expects inputs of dim {}, data has {}",
            encoder.input_dim(),
            train.dim()
        ))
        .into());
    }
    let (tl, te) = (labeled(&train), labeled(&test));
    let before = encoder.params().content_hash();
    let head = ClassifierHead::new(encoder.embed_dim(), tl.num_classes(), c.seed)?;
    let (head, log) = finetune(&encoder, head, &tl, &c.finetune)?;
    let after = encoder.params().content_hash();
    let train_acc = head_accuracy(&encoder, &head, &tl)?;
    let pred = head.predict(&encoder.forward(te.features())?)?;
    let report = confusion_and_metrics(te.labels(), &pred, te.num_classes(), c.eval.beta)?;
    std::fs::create_dir_all(&c.out)?;
    let mut csv = String::from("step,loss\n");
    for r in &log {
        csv.push_str(&format!("{},{}\n", r.step, r.loss));
    }
    std::fs::write(c.out.join("metrics.csv"), csv)?;
    head.model().save(c.out.join("head.bin"))?;
    write_report(&c.out, &report)?;
    let manifest = json!({
        "command": "finetune",
        "config": c,
        "encoder_checkpoint": path,
        "encoder_hash_before": before,
        "encoder_hash_after": after,
        "encoder_unchanged": before == after,
        "head_hash": head.model().params().content_hash(),
        "train_accuracy": train_acc,
        "test_accuracy": report.accuracy,
    });
    write_json(&c.out.join("manifest.json"), &manifest)?;
    println!(
        "finetune: train accuracy {train_acc:.4}, test accuracy {:.4}",
        report.accuracy
    );
    Ok(())
}

fn cmd_evaluate(c: &RunConfig) -> Outcome {
    let (encoder, path) = load_encoder(c)?;
    let eval = c.eval_spec()?;
    let (train, test) = c.load_data()?;
    let (tl, te) = (labeled(&train), labeled(&test));
    let report = evaluate_model(&encoder, &tl, &te, &eval)?;
    std::fs::create_dir_all(&c.out)?;
    write_report(&c.out, &report)?;
    let manifest = json!({
        "command": "evaluate",
        "config": c,
        "checkpoint": path,
        "checkpoint_hash": encoder.params().content_hash(),
        "accuracy": report.accuracy,
    });
    write_json(&c.out.join("manifest.json"), &manifest)?;
    println!("evaluate: {}-NN accuracy {:.4}", eval.k, report.accuracy);
    Ok(())
}

fn cmd_verify_sensitivity(f: &SweepFlags) -> Outcome {
    if !(f.clip_bound > 0.0) || !f.clip_bound.is_finite() {
        return Err(Error::Config(format!("clip bound must be positive, got {}", f.clip_bound)).into());
    }
    if f.n_min < 2 || f.n_max < f.n_min {
        return Err(Error::Config(format!("invalid batch-size range {}..={}", f.n_min, f.n_max)).into());
    }
    let mode = if f.conservative {
        BoundMode::ConservativeNL
    } else {
        BoundMode::Tight
    };
    let probe = ProbeSpec::default();
    let mut table = String::from("n,analytic,empirical,margin\n");
    println!("{:>4} {:>12} {:>12} {:>12}", "n", "analytic", "empirical", "margin");
    let mut violations = Vec::new();
    for n in f.n_min..=f.n_max {
        let o = empirical_sensitivity(
            f.loss,
            n,
            f.clip_bound,
            f.trials,
            f.seed.wrapping_add(n as u64),
            &probe,
            mode,
        )?;
        println!(
            "{:>4} {:>12.6} {:>12.6} {:>12.6}",
            n,
            o.analytic,
            o.max_distance,
            o.margin()
        );
        table.push_str(&format!("{},{},{},{}\n", n, o.analytic, o.max_distance, o.margin()));
        if o.margin() < 0.0 {
            violations.push(n);
        }
    }
    if let Some(out) = &f.out {
        std::fs::create_dir_all(out)?;
        std::fs::write(out.join("sensitivity.csv"), &table)?;
    }
    if violations.is_empty() {
        Ok(())
    } else {
        Err(Failure::Violation(format!("bound exceeded at n = {violations:?}")))
    }
}

fn cmd_properties(f: &PropertyFlags) -> Outcome {
    let results = run_all(f.seed);
    for r in &results {
        println!(
            "[{}] {} trials={} max_violation={:e} tolerance={:e}",
            if r.passed { "PASS" } else { "FAIL" },
            r.name,
            r.trials,
            r.max_violation,
            r.tolerance
        );
    }
    if let Some(out) = &f.out {
        std::fs::create_dir_all(out)?;
        write_json(&out.join("properties.json"), &results)?;
    }
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed).map(|r| r.name.as_str()).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Violation(format!("failed: {}", failed.join(", "))))
    }
}
