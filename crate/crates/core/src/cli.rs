//! `sadda` command-line entry point.

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Parser, Subcommand};

use crate::config::{load_config, RunConfig};
use crate::data::checkpoint::{load_checkpoint, save_checkpoint};
use crate::data::export::embeddings_csv;
use crate::data::DomainDataset;
use crate::error::Error;
use crate::experiment::{build_datasets, train_on_target};
use crate::networks::ParameterSet;
use crate::pipeline::{adapt, compose_and_evaluate_par, encode_dataset, pretrain, AdaptInputs, Comparison};
use crate::report::{self, write_file, RunManifest};
use crate::tensor::gradcheck::op_checks;
use crate::tensor::OpKind;
use crate::verify::{run_suite, TOLERANCE};

#[derive(Parser, Debug)]
#[command(name = "sadda", version, about = "Adversarial domain adaptation experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Run configuration (`key = value` lines).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory; overrides `run.out`.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Overrides `run.seed`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Corrupt one op's backward pass (gradcheck only).
    #[arg(long, global = true, hide = true)]
    pub inject_fault: Option<String>,
    /// Trials per gradient check.
    #[arg(long, global = true, hide = true, default_value_t = 100)]
    pub trials: usize,
}

#[derive(Subcommand, Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    /// Train M_s and C_s on labeled source data.
    Pretrain,
    /// Adversarially train M_t and the discriminator.
    Adapt,
    /// Compare source-only, adapted and target-trained accuracy.
    Eval,
    /// Write encoder features of both domains as CSV.
    ExportEmbeddings,
    /// Finite-difference check of every differentiable op.
    Gradcheck,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Pretrain => "pretrain",
            Command::Adapt => "adapt",
            Command::Eval => "eval",
            Command::ExportEmbeddings => "export-embeddings",
            Command::Gradcheck => "gradcheck",
        }
    }
}

/// Outcome classes mapped onto the process exit code.
#[derive(Debug)]
pub enum Failure {
    Verification(String),
    Usage(String),
    Runtime(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Verification(_) => 1,
            Failure::Usage(_) => 2,
            Failure::Runtime(_) => 3,
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Numeric { .. } => Failure::Runtime(e.to_string()),
            // a failed write is not the user's input being wrong
            Error::Io { .. } => Failure::Runtime(e.to_string()),
            Error::Config(_) | Error::Idx(_) | Error::Checkpoint(_) | Error::Contract(_) => Failure::Usage(e.to_string()),
        }
    }
}

pub fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let msg = match &f {
                Failure::Verification(m) | Failure::Usage(m) | Failure::Runtime(m) => m,
            };
            eprintln!("sadda {}: {msg}", cli.command.name());
            ExitCode::from(f.code())
        }
    }
}

pub fn run(cli: &Cli) -> Result<(), Failure> {
    if cli.command == Command::Gradcheck {
        return gradcheck(cli);
    }
    if cli.inject_fault.is_some() {
        return Err(Failure::Usage("--inject-fault only applies to gradcheck".into()));
    }
    let Some(path) = &cli.config else {
        return Err(Failure::Usage(format!("{} needs --config <path>", cli.command.name())));
    };
    let mut cfg = load_config(path).map_err(Error::from)?;
    if let Some(seed) = cli.seed {
        cfg.train.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    cfg.train.validate()?;
    let threads = threads_from_env()?;
    let ctx = Context {
        cfg,
        config_path: path.clone(),
        threads,
        started: unix_now(),
    };
    std::fs::create_dir_all(&ctx.cfg.out_dir).map_err(|e| Error::io(&ctx.cfg.out_dir, e))?;
    let artifacts = match cli.command {
        Command::Pretrain => cmd_pretrain(&ctx)?,
        Command::Adapt => cmd_adapt(&ctx)?,
        Command::Eval => cmd_eval(&ctx)?,
        Command::ExportEmbeddings => cmd_export_embeddings(&ctx)?,
        Command::Gradcheck => unreachable!("handled above"),
    };
    let manifest = RunManifest {
        command: cli.command.name().to_string(),
        config_path: ctx.config_path.clone(),
        train: ctx.cfg.train.clone(),
        out_dir: ctx.cfg.out_dir.clone(),
        started: ctx.started,
        finished: unix_now(),
        artifacts,
    };
    manifest.write(&ctx.out(&format!("manifest_{}.txt", cli.command.name())))?;
    Ok(())
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

/// `SADDA_THREADS`, default 1.
fn threads_from_env() -> Result<usize, Failure> {
    match std::env::var("SADDA_THREADS") {
        Err(_) => Ok(1),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(Failure::Usage(format!("SADDA_THREADS must be a positive integer, got `{v}`"))),
        },
    }
}

struct Context {
    cfg: RunConfig,
    config_path: PathBuf,
    threads: usize,
    started: u64,
}

impl Context {
    fn out(&self, name: &str) -> PathBuf {
        self.cfg.out_dir.join(name)
    }

    fn checkpoint(&self, name: &str) -> Result<ParameterSet<f32>, Failure> {
        let path = self.out(name);
        if !path.exists() {
            return Err(Failure::Usage(format!(
                "missing checkpoint {} (run the earlier phase with the same --out first)",
                path.display()
            )));
        }
        Ok(load_checkpoint(&path)?)
    }
}

struct Writer<'a> {
    ctx: &'a Context,
    written: Vec<PathBuf>,
}

impl Writer<'_> {
    fn text(&mut self, name: &str, text: &str) -> Result<(), Error> {
        let path = self.ctx.out(name);
        write_file(&path, text)?;
        self.written.push(path);
        Ok(())
    }

    fn params(&mut self, name: &str, params: &ParameterSet<f32>) -> Result<(), Error> {
        let path = self.ctx.out(name);
        save_checkpoint(params, &path)?;
        self.written.push(path);
        Ok(())
    }
}

fn writer(ctx: &Context) -> Writer<'_> {
    Writer {
        ctx,
        written: Vec::new(),
    }
}

fn cmd_pretrain(ctx: &Context) -> Result<Vec<PathBuf>, Failure> {
    let data = build_datasets(&ctx.cfg)?;
    let (enc, cls, run) = pretrain(&data.source_train, &ctx.cfg.train)?;
    let mut w = writer(ctx);
    w.params("m_s.ckpt", &enc)?;
    w.params("c_s.ckpt", &cls)?;
    w.text("pretrain_metrics.csv", &report::pretrain_csv(&run.history))?;
    w.text("pretrain_loss.svg", &report::pretrain_svg(&run.history))?;
    let acc = compose_and_evaluate_par(&ctx.cfg.train.preset, &enc, &cls, &data.source_test, ctx.threads)?;
    println!("pretrain: {} epochs, source test accuracy {acc:.4}", run.history.len());
    Ok(w.written)
}

fn cmd_adapt(ctx: &Context) -> Result<Vec<PathBuf>, Failure> {
    let enc = ctx.checkpoint("m_s.ckpt")?;
    let cls = ctx.checkpoint("c_s.ckpt")?;
    let data = build_datasets(&ctx.cfg)?;
    let target = data.target_train.unlabeled();
    let inputs = AdaptInputs {
        source_encoder: &enc,
        source_classifier: &cls,
        source: &data.source_train,
        target: &target,
        target_eval: Some(&data.target_test),
    };
    let (m_t, disc, run) = adapt(&inputs, &ctx.cfg.train)?;
    let mut w = writer(ctx);
    w.params("m_t.ckpt", &m_t)?;
    w.params("d.ckpt", &disc)?;
    w.text("adapt_metrics.csv", &report::adapt_csv(&run.history))?;
    w.text("adapt_loss.svg", &report::adapt_svg(&run.history))?;
    let mut reason = format!("{}\n", run.stop_reason.as_str());
    if let Some(fault) = &run.fault {
        reason.push_str(fault);
        reason.push('\n');
    }
    w.text("stop_reason.txt", &reason)?;
    println!("adapt: {} epochs, stopped: {}", run.history.len(), run.stop_reason.as_str());
    Ok(w.written)
}

fn cmd_eval(ctx: &Context) -> Result<Vec<PathBuf>, Failure> {
    let m_s = ctx.checkpoint("m_s.ckpt")?;
    let c_s = ctx.checkpoint("c_s.ckpt")?;
    let m_t = ctx.checkpoint("m_t.ckpt")?;
    let data = build_datasets(&ctx.cfg)?;
    let preset = &ctx.cfg.train.preset;
    let test = &data.target_test;
    let cmp = Comparison {
        source_only: compose_and_evaluate_par(preset, &m_s, &c_s, test, ctx.threads)?,
        sadda: compose_and_evaluate_par(preset, &m_t, &c_s, test, ctx.threads)?,
        train_on_target: train_on_target(&data, &ctx.cfg.train, ctx.threads)?,
    };
    let mut w = writer(ctx);
    w.text("report.csv", &report::report_csv(&cmp))?;
    let txt = report::report_txt(&cmp, test.len());
    w.text("report.txt", &txt)?;
    print!("{txt}");
    Ok(w.written)
}

/// First `cap` rows of each label, in dataset order.
fn capped_rows(ds: &DomainDataset, cap: usize) -> Result<Vec<usize>, Error> {
    let labels = ds.labels()?;
    let mut taken = vec![0usize; labels.num_classes()];
    Ok(labels
        .classes()
        .iter()
        .enumerate()
        .filter(|&(_, &c)| {
            taken[c] += 1;
            taken[c] <= cap
        })
        .map(|(i, _)| i)
        .collect())
}

fn embeddings(ctx: &Context, enc: &ParameterSet<f32>, ds: &DomainDataset) -> Result<String, Error> {
    let rows = capped_rows(ds, ctx.cfg.export_per_label)?;
    let picked = ds.select(&rows)?;
    let features = encode_dataset(&ctx.cfg.train.preset, enc, &picked.inputs)?;
    embeddings_csv(&features, picked.labels()?.classes())
}

fn cmd_export_embeddings(ctx: &Context) -> Result<Vec<PathBuf>, Failure> {
    let m_s = ctx.checkpoint("m_s.ckpt")?;
    let m_t = ctx.checkpoint("m_t.ckpt")?;
    let data = build_datasets(&ctx.cfg)?;
    let mut w = writer(ctx);
    w.text("embeddings_source.csv", &embeddings(ctx, &m_s, &data.source_test)?)?;
    w.text("embeddings_target.csv", &embeddings(ctx, &m_t, &data.target_test)?)?;
    Ok(w.written)
}

fn fault_kind(name: &str) -> Result<OpKind, Failure> {
    let checks = op_checks();
    checks.iter().find(|c| c.name == name).map(|c| c.kind).ok_or_else(|| {
        let names: Vec<_> = checks.iter().map(|c| c.name).collect();
        Failure::Usage(format!("unknown op `{name}`; expected one of {}", names.join(", ")))
    })
}

fn gradcheck(cli: &Cli) -> Result<(), Failure> {
    let fault = cli.inject_fault.as_deref().map(fault_kind).transpose()?;
    if cli.trials == 0 {
        return Err(Failure::Usage("--trials must be at least 1".into()));
    }
    let seed = cli.seed.unwrap_or(crate::tensor::gradcheck::TrialSettings::default().seed);
    let outcomes = run_suite(cli.trials, seed, fault)?;
    for c in &outcomes {
        println!("{:<28} {:.3e}  {}", c.name, c.worst, if c.passed() { "ok" } else { "FAIL" });
    }
    let failed: Vec<String> = outcomes
        .iter()
        .filter(|c| !c.passed())
        .map(|c| format!("{} ({:.3e})", c.name, c.worst))
        .collect();
    if failed.is_empty() {
        println!("all {} checks below {TOLERANCE:e}", outcomes.len());
        Ok(())
    } else {
        Err(Failure::Verification(format!(
            "relative error at or above {TOLERANCE:e} in {}",
            failed.join(", ")
        )))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grammar_parses() {
        let cli = Cli::try_parse_from(["sadda", "adapt", "--config", "a.cfg", "--out", "o", "--seed", "4"]).unwrap();
        assert_eq!(cli.command, Command::Adapt);
        assert_eq!(cli.seed, Some(4));
        assert!(Cli::try_parse_from(["sadda", "train"]).is_err());
    }

    #[test]
    fn error_classes_map_to_codes() {
        assert_eq!(Failure::from(Error::numeric("log", "x")).code(), 3);
        assert_eq!(Failure::from(Error::contract("x")).code(), 2);
        assert_eq!(Failure::Verification(String::new()).code(), 1);
    }

    #[test]
    fn fault_names_resolve() {
        assert_eq!(fault_kind("conv2d").unwrap(), OpKind::Conv2d);
        assert!(matches!(fault_kind("nope"), Err(Failure::Usage(_))));
    }
}
