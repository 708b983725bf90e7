//! `giftlab`: data generation, base pretraining, SFT-stage training, GRPO,
//! evaluation, consistency analysis, oracle checks and β sweeps.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use gift_core::analysis::consistency_report;
use gift_core::model::{load_checkpoint, save_checkpoint};
use gift_core::oracle::verification_suite;
use gift_core::pipeline::{
    evaluate, generate_data, pretrain_base_cached, rl_stage, run_pipeline, sft_stage, sweep_beta,
    validation_prompts, ExperimentConfig, JsonlWriter, SftMethod,
};
use gift_core::tasks::{self, DatasetSplits, DATASET_FILE};
use gift_core::PolicyModel;

#[derive(Parser)]
#[command(name = "giftlab", version, about = "Desk-scale GIFT post-training lab")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// JSON experiment config.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed (required when no config is given).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Config override `dotted.key=value`; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Replace existing artifacts in the output directory.
    #[arg(long, global = true)]
    overwrite: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum Method {
    Sft,
    Gift,
    Entropy,
    LabelSmoothing,
    Kd,
}

impl From<Method> for SftMethod {
    fn from(m: Method) -> Self {
        match m {
            Method::Sft => SftMethod::Sft,
            Method::Gift => SftMethod::Gift,
            Method::Entropy => SftMethod::Entropy,
            Method::LabelSmoothing => SftMethod::LabelSmoothing,
            Method::Kd => SftMethod::Kd,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the SFT/RL/validation splits into OUT/data.
    GenData,
    /// Pretrain the base model into OUT/checkpoints/base.
    PretrainBase,
    /// Train an SFT-stage checkpoint from the base into OUT/checkpoints/sft.
    TrainSft {
        #[arg(long, value_enum)]
        method: Option<Method>,
        /// The method's hyperparameter (β, ε, λ_h or α).
        #[arg(long)]
        param: Option<f64>,
        /// Base checkpoint directory (default OUT/checkpoints/base).
        #[arg(long)]
        base: Option<PathBuf>,
    },
    /// GRPO from an initial checkpoint into OUT/checkpoints/rl.
    TrainRl {
        /// Initial policy and KL reference (default OUT/checkpoints/sft).
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// pass@k and greedy accuracy of a checkpoint on the validation split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Consistency report between two checkpoints.
    Analyze {
        #[arg(long)]
        earlier: PathBuf,
        #[arg(long)]
        later: PathBuf,
    },
    /// Exact Gibbs-oracle checks; one JSON line per check.
    Oracle {
        #[arg(long, default_value_t = 20)]
        tasks: usize,
    },
    /// GIFT → RL → eval over a grid of β and seeds.
    SweepBeta {
        #[arg(long, value_delimiter = ',', required = true)]
        betas: Vec<f64>,
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
    },
    /// Full pipeline.
    Run,
}

fn load_config(g: &Global) -> Result<ExperimentConfig> {
    let mut cfg = match &g.config {
        Some(path) => {
            let text =
                fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            ExperimentConfig::from_json(&text)?
        }
        None => match g.seed {
            Some(seed) => ExperimentConfig::new(seed),
            None => bail!("a seed is required: pass --seed or a --config with a seed"),
        },
    };
    if let Some(seed) = g.seed {
        cfg.seed = seed;
    }
    cfg.output_dir = Some(g.out.clone());
    let cfg = cfg.with_overrides(&g.set)?;
    cfg.validate()?;
    Ok(cfg)
}

fn guard(path: &Path, overwrite: bool) -> Result<()> {
    if path.exists() {
        if !overwrite {
            bail!(
                "{} already exists; pass --overwrite to replace it",
                path.display()
            );
        }
        if path.is_dir() {
            fs::remove_dir_all(path)?;
        } else {
            fs::remove_file(path)?;
        }
    }
    Ok(())
}

/// Data from OUT/data when present, otherwise generated and written there.
fn load_or_generate_data(cfg: &ExperimentConfig, out: &Path) -> Result<DatasetSplits> {
    let dir = out.join("data");
    if dir.join(DATASET_FILE).exists() {
        let data = tasks::read_dataset(&dir)?;
        if data.spec != cfg.task || data.sizes != cfg.sizes || data.seed != cfg.data_seed() {
            bail!("{} was generated from a different config", dir.display());
        }
        return Ok(data);
    }
    let data = generate_data(cfg)?;
    tasks::write_dataset(&dir, &data)?;
    Ok(data)
}

fn load_model(dir: &Path) -> Result<PolicyModel> {
    Ok(load_checkpoint(dir)
        .with_context(|| format!("loading checkpoint {}", dir.display()))?
        .model)
}

fn save_model(
    out: &Path,
    name: &str,
    model: &PolicyModel,
    seed: u64,
    overwrite: bool,
) -> Result<PathBuf> {
    let dir = out.join("checkpoints").join(name);
    guard(&dir, overwrite)?;
    save_checkpoint(&dir, model, Some(tasks::vocabulary()), seed)?;
    Ok(dir)
}

fn write_report<T: Serialize>(out: &Path, name: &str, value: &T) -> Result<()> {
    let dir = out.join("reports");
    fs::create_dir_all(&dir)?;
    let text = serde_json::to_string_pretty(value)?;
    fs::write(dir.join(name), &text)?;
    println!("{text}");
    Ok(())
}

/// Runs `body` with a metric writer on OUT/metrics/<stage>.jsonl.
fn with_metrics<T>(
    out: &Path,
    stage: &str,
    overwrite: bool,
    body: impl FnOnce(
        &mut dyn FnMut(&gift_core::metrics::MetricsRecord) -> gift_core::Result<()>,
    ) -> gift_core::Result<T>,
) -> Result<T> {
    let path = out.join("metrics").join(format!("{stage}.jsonl"));
    guard(&path, overwrite)?;
    let mut writer = JsonlWriter::create(&path)?;
    let result = body(&mut |r| writer.write(r));
    writer.finish()?;
    Ok(result?)
}

fn checkpoint_name(path: &Path) -> String {
    path.file_name()
        .map_or_else(|| "model".into(), |n| n.to_string_lossy().into_owned())
}

fn execute(cli: Cli) -> Result<bool> {
    let g = &cli.global;
    let out = g.out.as_path();
    if let Command::Oracle { tasks } = cli.command {
        let seed = g.seed.unwrap_or(0);
        let checks = verification_suite(seed, tasks)?;
        for c in &checks {
            println!("{}", serde_json::to_string(c)?);
        }
        return Ok(checks.iter().all(|c| c.pass));
    }
    let mut cfg = load_config(g)?;
    match cli.command {
        Command::GenData => {
            let dir = out.join("data");
            guard(&dir, g.overwrite)?;
            let manifest = tasks::write_dataset(&dir, &generate_data(&cfg)?)?;
            println!("{}", serde_json::to_string_pretty(&manifest)?);
        }
        Command::PretrainBase => {
            let data = load_or_generate_data(&cfg, out)?;
            let base = with_metrics(out, "base", g.overwrite, |sink| {
                pretrain_base_cached(&cfg, &data, sink)
            })?;
            let dir = save_model(out, "base", &base, cfg.data_seed(), g.overwrite)?;
            println!("{}", dir.display());
        }
        Command::TrainSft {
            method,
            param,
            base,
        } => {
            if let Some(m) = method {
                cfg.sft = cfg.sft.clone().with_method(m.into(), param);
                cfg.validate()?;
            } else if param.is_some() {
                bail!("--param needs --method");
            }
            if cfg.sft.method == SftMethod::None {
                bail!("sft.method is none; nothing to train");
            }
            let data = load_or_generate_data(&cfg, out)?;
            let base = load_model(&base.unwrap_or_else(|| out.join("checkpoints/base")))?;
            let trained = with_metrics(out, "sft", g.overwrite, |sink| {
                sft_stage(&cfg, &base, &data, sink)
            })?
            .expect("method is not none");
            let dir = save_model(out, "sft", &trained.model, cfg.seed, g.overwrite)?;
            println!("{} (epoch {})", dir.display(), trained.selected_epoch);
        }
        Command::TrainRl { init } => {
            if cfg.rl.epochs == 0 {
                bail!("rl.epochs is 0; nothing to train");
            }
            let data = load_or_generate_data(&cfg, out)?;
            let init = load_model(&init.unwrap_or_else(|| out.join("checkpoints/sft")))?;
            let trained = with_metrics(out, "rl", g.overwrite, |sink| {
                rl_stage(&cfg, &init, &data, sink)
            })?
            .expect("rl epochs > 0");
            let dir = save_model(out, "rl", &trained.model, cfg.seed, g.overwrite)?;
            println!("{}", dir.display());
        }
        Command::Eval { checkpoint } => {
            let data = load_or_generate_data(&cfg, out)?;
            let model = load_model(&checkpoint)?;
            let name = checkpoint_name(&checkpoint);
            let report = evaluate(
                &model,
                &cfg.task,
                &validation_prompts(&data),
                &cfg.eval,
                cfg.seed,
                &name,
            )?;
            write_report(out, &format!("eval_{name}.json"), &report)?;
        }
        Command::Analyze { earlier, later } => {
            let data = load_or_generate_data(&cfg, out)?;
            let (a, b) = (load_model(&earlier)?, load_model(&later)?);
            let label = format!("{}→{}", checkpoint_name(&earlier), checkpoint_name(&later));
            let val = DatasetSplits::sequences(&data.validation);
            let report = consistency_report(
                &label,
                &a,
                &b,
                &val,
                cfg.eval.kl_direction,
                &cfg.eval.overlap_ks,
            )?;
            let file = format!(
                "consistency_{}_{}.json",
                checkpoint_name(&earlier),
                checkpoint_name(&later)
            );
            write_report(out, &file, &report)?;
        }
        Command::SweepBeta { betas, seeds } => {
            let seeds = if seeds.is_empty() {
                vec![cfg.seed]
            } else {
                seeds
            };
            let table = sweep_beta(&cfg, &betas, &seeds)?;
            let path = out.join("reports/sweep_beta.csv");
            guard(&path, g.overwrite)?;
            fs::create_dir_all(out.join("reports"))?;
            let csv = table.to_csv();
            fs::write(&path, &csv)?;
            print!("{csv}");
            return Ok(table.rows.iter().all(|r| r.status == "ok"));
        }
        Command::Run => {
            let manifest = run_pipeline(&cfg, out, g.overwrite)?;
            println!("{}", serde_json::to_string_pretty(&manifest)?);
        }
        Command::Oracle { .. } => unreachable!("handled above"),
    }
    Ok(true)
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
