//! `stvqa`: generate synthetic datasets, train and evaluate the model
//! variants, check gradients and build ablation tables.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use stvqa::checkpoint::Checkpoint;
use stvqa::config::RunConfig;
use stvqa::eval::{ablation_report, evaluate_task, predict_all, task_metrics};
use stvqa::model::{Model, Task, Variant};
use stvqa::pipeline::{fit, gradcheck, load_dataset, task_samples};
use stvqa::qagen::MapEmbedding;
use stvqa::synth::{build_dataset, write_dataset};
use stvqa::train::{self, format_loss_curve};
use stvqa::{jsonl, pipeline};

/// Default output root when `--out` is not given.
const OUT_ENV: &str = "STVQA_OUT";

#[derive(Parser, Debug)]
#[command(name = "stvqa", version, about = "Spatio-temporal video QA laboratory")]
struct Cli {
    #[command(flatten)]
    common: Common,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// TOML run configuration.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Root seed; overrides `seed` in the config.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,

    /// Model variant: text, resnet, c3d, concat, spatial, temporal, spatial-temporal.
    #[arg(long, global = true, value_name = "NAME", value_parser = parse_variant)]
    variant: Option<Variant>,

    /// Task: count, action, transition, frameqa.
    #[arg(long, global = true, value_name = "NAME", value_parser = parse_task)]
    task: Option<Task>,

    /// Output directory; must not exist yet (or be empty). Defaults to
    /// `$STVQA_OUT/<command>-seed<N>`, with `runs` as the root.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,

    /// Config override, `dotted.key=value`; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand, Debug, Clone, Copy, PartialEq, Eq)]
enum Command {
    /// Write train/test manifests, feature blobs and the phrase corpus.
    Generate,
    /// Train one variant and write its checkpoint and loss curve.
    Train,
    /// Compare analytic and finite-difference gradients of every variant.
    Gradcheck,
    /// Evaluate a checkpoint on a dataset split.
    Eval,
    /// Train (or load) every variant/task/seed cell and tabulate the results.
    Report,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Generate => "generate",
            Command::Train => "train",
            Command::Gradcheck => "gradcheck",
            Command::Eval => "eval",
            Command::Report => "report",
        }
    }
}

fn parse_variant(s: &str) -> Result<Variant, String> {
    Variant::parse(s).map_err(|e| e.to_string())
}

fn parse_task(s: &str) -> Result<Task, String> {
    Task::parse(s).map_err(|e| e.to_string())
}

fn resolve_config(common: &Common) -> Result<RunConfig> {
    let mut overrides = common.set.clone();
    if let Some(seed) = common.seed {
        overrides.push(format!("seed={seed}"));
    }
    if let Some(v) = common.variant {
        overrides.push(format!("model.variant=\"{}\"", v.key()));
    }
    if let Some(t) = common.task {
        overrides.push(format!("task=\"{}\"", t.key()));
    }
    RunConfig::load(common.config.as_deref(), &overrides).context("invalid configuration")
}

/// Creates the output directory, refusing to reuse a non-empty one.
fn fresh_dir(common: &Common, command: Command, seed: u64) -> Result<PathBuf> {
    let dir = match &common.out {
        Some(d) => d.clone(),
        None => {
            let root = std::env::var_os(OUT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs"));
            root.join(format!("{}-seed{seed}", command.name()))
        }
    };
    if dir.exists() && fs::read_dir(&dir).with_context(|| format!("reading {}", dir.display()))?.next().is_some() {
        bail!("output directory {} is not empty; choose a fresh --out", dir.display());
    }
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: &Cli) -> Result<()> {
    let config = resolve_config(&cli.common)?;
    let out = fresh_dir(&cli.common, cli.command, config.seed)?;
    write(&out.join("config.toml"), &config.to_toml()?)?;
    match cli.command {
        Command::Generate => cmd_generate(&config, &out),
        Command::Train => cmd_train(&config, &out),
        Command::Gradcheck => cmd_gradcheck(&config, cli.common.variant, &out),
        Command::Eval => cmd_eval(&config, &out),
        Command::Report => cmd_report(&config, &out),
    }
}

fn cmd_generate(config: &RunConfig, out: &Path) -> Result<()> {
    let ds = build_dataset(&config.data, config.seed)?;
    write_dataset(&ds, out)?;
    for name in ["train.jsonl", "test.jsonl", "corpus.jsonl"] {
        println!("{}", out.join(name).display());
    }
    Ok(())
}

fn load_embeddings(config: &RunConfig) -> Result<Option<MapEmbedding>> {
    config
        .model
        .embeddings
        .as_deref()
        .map(|p| MapEmbedding::load(p).with_context(|| format!("loading embeddings {}", p.display())))
        .transpose()
}

fn cmd_train(config: &RunConfig, out: &Path) -> Result<()> {
    let started = Instant::now();
    let ds = load_dataset(config)?;
    let data = task_samples(&ds.train, config.task)?;
    let validation = task_samples(&ds.test, config.task)?;
    let (model, optimizer, log) = match &config.train.resume {
        Some(path) => {
            let ckpt = Checkpoint::load(path)?;
            if ckpt.meta.model.variant != config.model.variant {
                bail!(
                    "checkpoint {} holds variant {}, not {}",
                    path.display(),
                    ckpt.meta.model.variant,
                    config.model.variant
                );
            }
            let mut model = ckpt.model()?;
            let mut optimizer = ckpt.optimizer;
            let tc = config.train.train_config(config.train.steps);
            let log = train::train(&mut model, &mut optimizer, &data, &tc, config.seed, Some(&validation))?;
            (model, optimizer, log)
        }
        None => {
            let (tokens, answers) = ds.vocabularies();
            let mc = config.model_config(config.model.variant, tokens, answers);
            let embeddings = load_embeddings(config)?;
            let fitted = fit(mc, &config.train, &data, Some(&validation), config.seed, embeddings.as_ref())?;
            (fitted.model, fitted.optimizer, fitted.log)
        }
    };
    let ckpt = Checkpoint::capture(&model, &optimizer, config.seed, config.to_table()?);
    ckpt.save(&out.join("model.ckpt"))?;
    write(&out.join("loss.txt"), &format_loss_curve(&log.losses))?;
    if !log.validation.is_empty() {
        jsonl::write(&out.join("validation.jsonl"), &log.validation)?;
    }
    let last = log.losses.last().map(|l| l.1).unwrap_or(f64::NAN);
    println!(
        "{} trained to step {} (loss {last:.4}) in {:.1}s -> {}",
        model.config.variant,
        optimizer.step,
        started.elapsed().as_secs_f64(),
        out.join("model.ckpt").display()
    );
    Ok(())
}

fn cmd_gradcheck(config: &RunConfig, variant: Option<Variant>, out: &Path) -> Result<()> {
    let variants = match variant {
        Some(v) => vec![v],
        None if config.gradcheck.variants.is_empty() => Variant::ALL.to_vec(),
        None => config.gradcheck.variants.clone(),
    };
    let mut reports = Vec::new();
    for v in variants {
        let report = gradcheck(&config.gradcheck, v, config.seed)?;
        print!("{}", report.render());
        reports.push(report);
    }
    jsonl::write(&out.join("gradcheck.jsonl"), &reports)?;
    let failed: Vec<String> = reports
        .iter()
        .flat_map(|r| r.blocks.iter().filter(|b| !b.passed).map(move |b| format!("{}/{}", r.variant, b.field)))
        .collect();
    if !failed.is_empty() {
        bail!("gradient check failed for {}", failed.join(", "));
    }
    Ok(())
}

fn cmd_eval(config: &RunConfig, out: &Path) -> Result<()> {
    let path =
        config.eval.checkpoint.as_deref().context("eval needs eval.checkpoint (use --set eval.checkpoint=PATH)")?;
    let model = Checkpoint::load(path)?.model()?;
    let ds = load_dataset(config)?;
    let split = match config.eval.split.as_deref().unwrap_or("test") {
        "train" => &ds.train,
        "test" => &ds.test,
        other => bail!("unknown split `{other}`; expected train or test"),
    };
    let samples = task_samples(split, config.task)?;
    let records = predict_all(&model, &samples, config.eval.protocol)?;
    let metrics = task_metrics(&records)?;
    jsonl::write(&out.join("predictions.jsonl"), &records)?;
    jsonl::write(&out.join("metrics.jsonl"), &metrics)?;
    for m in &metrics {
        println!("{:<11} {:>8.3}  ({} items)", m.task.key(), m.value, m.items);
    }
    Ok(())
}

fn cmd_report(config: &RunConfig, out: &Path) -> Result<()> {
    let ds = load_dataset(config)?;
    let (tokens, answers) = ds.vocabularies();
    let tasks = match config.task {
        Some(t) => vec![t],
        None => config.report.tasks.clone(),
    };
    let saved = out.join("checkpoints");
    if config.report.checkpoints.is_none() {
        fs::create_dir_all(&saved).with_context(|| format!("creating {}", saved.display()))?;
    }
    let embeddings = load_embeddings(config)?;
    let report = ablation_report(&config.report.variants, &tasks, &config.report.seeds, |variant, task, seed| {
        let name = format!("{}-{}-{seed}.ckpt", variant.key(), task.key());
        let model: Model = match &config.report.checkpoints {
            Some(dir) => Checkpoint::load(&dir.join(&name))?.model()?,
            None => {
                let data = task_samples(&ds.train, Some(task))?;
                let mc = config.model_config(variant, tokens.clone(), answers.clone());
                let fitted = pipeline::fit(mc, &config.train, &data, None, seed, embeddings.as_ref())?;
                Checkpoint::capture(&fitted.model, &fitted.optimizer, seed, config.to_table()?)
                    .save(&saved.join(&name))?;
                fitted.model
            }
        };
        let test = task_samples(&ds.test, Some(task))?;
        let metric = evaluate_task(&model, &test, task, config.eval.protocol)?;
        eprintln!("{variant} {task} seed {seed}: {:.3}", metric.value);
        Ok((metric.value, metric.items))
    })?;
    let table = report.render_table();
    write(&out.join("table.txt"), &table)?;
    write(&out.join("report.jsonl"), &report.to_jsonl()?)?;
    print!("{table}");
    Ok(())
}
