use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use mmrec::dataset::synthetic::{planted, PlantedConfig};
use mmrec::dataset::{Dataset, DatasetOptions};
use mmrec::eval::ReportTable;
use mmrec::harness::online::{known_histories, online_update, read_events};
use mmrec::harness::{evaluate_checkpoint, fit, run_ablation, Checkpoint, EvalSplit, ExperimentConfig, Flags, Resources, Server};

/// Multimodal sequential recommender: data preparation, training,
/// evaluation, ablations, serving and online updates.
#[derive(Parser)]
#[command(name = "mmrec", version)]
struct Cli {
    /// Directory that relative dataset paths resolve against.
    #[arg(long, env = "MMREC_DATA_ROOT", global = true)]
    data_root: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ExperimentArgs {
    /// TOML experiment configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// `all`, `none`, or a comma-separated subset of
    /// fusion,retrieval,debias,explain,adaptive.
    #[arg(long)]
    flags: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Dataset directory; overrides the configuration.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Args)]
struct CheckpointArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset directory; defaults to the one recorded in the checkpoint.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Validate a dataset directory and print its summary, or write a
    /// planted synthetic dataset with `--synthetic`.
    Ingest {
        #[arg(long)]
        data: Option<PathBuf>,
        /// Write a planted-preference dataset to this directory.
        #[arg(long)]
        synthetic: Option<PathBuf>,
        #[arg(long, default_value_t = 200)]
        users: usize,
        #[arg(long, default_value_t = 500)]
        items: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Train a model and write a checkpoint.
    Train {
        #[command(flatten)]
        exp: ExperimentArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint with popularity and random baselines.
    Evaluate {
        #[command(flatten)]
        ck: CheckpointArgs,
        #[arg(long, default_value = "test", value_parser = ["test", "validation"])]
        split: String,
        /// Also write the report as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Train and evaluate the incremental feature ablation.
    Ablate {
        #[command(flatten)]
        exp: ExperimentArgs,
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Top-N recommendations with explanations, as JSON.
    Recommend {
        #[command(flatten)]
        ck: CheckpointArgs,
        #[arg(long)]
        user: String,
        #[arg(short, long, default_value_t = 10)]
        n: usize,
    },
    /// Explanation for one user-item pair, as JSON.
    Explain {
        #[command(flatten)]
        ck: CheckpointArgs,
        #[arg(long)]
        user: String,
        #[arg(long)]
        item: String,
    },
    /// Apply a JSON-lines feedback stream to a checkpoint.
    OnlineUpdate {
        #[command(flatten)]
        ck: CheckpointArgs,
        /// Lines of `{user, item, kind, value, timestamp}`.
        #[arg(long)]
        events: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print a saved JSON report as an aligned table.
    Report {
        input: PathBuf,
    },
}

fn resolve(root: Option<&Path>, p: &Path) -> PathBuf {
    match root {
        Some(r) if p.is_relative() => r.join(p),
        _ => p.to_path_buf(),
    }
}

fn dataset_options(cfg: &ExperimentConfig) -> DatasetOptions {
    DatasetOptions {
        train_fraction: cfg.data.train_fraction,
        n_groups: cfg.data.n_groups,
        vocabulary: None,
    }
}

fn load_data(root: Option<&Path>, dir: Option<&Path>, cfg: &ExperimentConfig) -> anyhow::Result<Dataset> {
    let Some(dir) = dir.or(cfg.data.dir.as_deref()) else {
        bail!(UsageError("no dataset: pass --data or set data.dir in the config".into()));
    };
    let dir = resolve(root, dir);
    Dataset::load(&dir, dataset_options(cfg)).with_context(|| format!("loading {}", dir.display()))
}

fn experiment(exp: &ExperimentArgs) -> anyhow::Result<ExperimentConfig> {
    let mut cfg = match &exp.config {
        Some(p) => ExperimentConfig::load(p).with_context(|| format!("reading {}", p.display()))?,
        None => ExperimentConfig::default(),
    };
    if let Some(f) = &exp.flags {
        cfg.flags = Flags::parse(f)?;
    }
    if let Some(s) = exp.seed {
        cfg.seed = s;
    }
    if let Some(e) = exp.epochs {
        cfg.train.epochs = e;
    }
    if let Some(d) = &exp.data {
        cfg.data.dir = Some(d.clone());
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_checkpoint(root: Option<&Path>, ck: &CheckpointArgs) -> anyhow::Result<(Checkpoint, Dataset)> {
    let c = Checkpoint::load(&ck.checkpoint).with_context(|| format!("reading {}", ck.checkpoint.display()))?;
    let data = load_data(root, ck.data.as_deref(), &c.config)?;
    c.check_dataset(&data)?;
    Ok((c, data))
}

fn print_json<T: serde::Serialize>(v: &T) -> anyhow::Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn write_report(table: &ReportTable, json: Option<&Path>) -> anyhow::Result<()> {
    print!("{}", table.to_text());
    if let Some(p) = json {
        std::fs::write(p, table.to_json()?).with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(())
}

#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn run(cli: Cli) -> anyhow::Result<()> {
    let root = cli.data_root.as_deref();
    match cli.command {
        Command::Ingest {
            data,
            synthetic,
            users,
            items,
            seed,
        } => {
            if let Some(out) = synthetic {
                let out = resolve(root, &out);
                let cfg = PlantedConfig {
                    n_users: users,
                    n_items: items,
                    seed,
                    ..Default::default()
                };
                planted(&cfg).write(&out).with_context(|| format!("writing {}", out.display()))?;
                log::info!("wrote planted dataset to {}", out.display());
            }
            let Some(dir) = data else {
                return Ok(());
            };
            let d = load_data(root, Some(&dir), &ExperimentConfig::default())?;
            let events_in = |f: &dyn Fn(usize) -> usize| (0..d.n_users()).map(f).sum::<usize>();
            print_json(&serde_json::json!({
                "users": d.n_users(),
                "items": d.n_items(),
                "interactions": d.events.len(),
                "categories": d.n_categories(),
                "groups": d.groups,
                "vocabulary": d.vocab.size(),
                "train": events_in(&|u| d.train_events(u).len()),
                "validation": events_in(&|u| d.validation_events(u).len()),
                "test": events_in(&|u| d.test_event(u).is_some() as usize),
                "fingerprint": d.fingerprint(),
            }))
        }
        Command::Train { exp, out } => {
            let cfg = experiment(&exp)?;
            let data = load_data(root, None, &cfg)?;
            let (trained, online) = fit(&data, &cfg)?;
            for e in &trained.log {
                println!("{}", serde_json::to_string(e)?);
            }
            if !online.is_empty() {
                log::info!("applied {} validation feedback events", online.len());
            }
            Checkpoint::new(&cfg, &data, trained.state).save(&out)?;
            if let Some(msg) = trained.diverged {
                return Err(mmrec::Error::Numerical(format!("{msg}; wrote the last good state to {}", out.display())).into());
            }
            Ok(())
        }
        Command::Evaluate { ck, split, json } => {
            let (c, data) = load_checkpoint(root, &ck)?;
            let split = if split == "validation" {
                EvalSplit::Validation
            } else {
                EvalSplit::Test
            };
            write_report(&evaluate_checkpoint(&c, &data, split)?, json.as_deref())
        }
        Command::Ablate { exp, json } => {
            let cfg = experiment(&exp)?;
            let data = load_data(root, None, &cfg)?;
            write_report(&run_ablation(&data, &cfg, EvalSplit::Test)?, json.as_deref())
        }
        Command::Recommend { ck, user, n } => {
            let (c, data) = load_checkpoint(root, &ck)?;
            let res = Resources::new(&data, &c.config)?;
            print_json(&Server::new(&c.state.model, &data, &res, &c.config)?.recommend(&user, n)?)
        }
        Command::Explain { ck, user, item } => {
            let (c, data) = load_checkpoint(root, &ck)?;
            let res = Resources::new(&data, &c.config)?;
            print_json(&Server::new(&c.state.model, &data, &res, &c.config)?.explain(&user, &item)?)
        }
        Command::OnlineUpdate { ck, events, out } => {
            let (mut c, data) = load_checkpoint(root, &ck)?;
            let events = read_events(&events).with_context(|| format!("reading {}", events.display()))?;
            let res = Resources::new(&data, &c.config)?;
            let mut histories = known_histories(&data, true);
            let logs = online_update(&mut c.state, &data, &res, &c.config, &mut histories, &events)?;
            for l in &logs {
                println!("{}", serde_json::to_string(l)?);
            }
            c.save(&out)?;
            Ok(())
        }
        Command::Report { input } => {
            let text = std::fs::read_to_string(&input).with_context(|| format!("reading {}", input.display()))?;
            print!("{}", ReportTable::from_json(&text)?.to_text());
            Ok(())
        }
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<UsageError>() {
            return 1;
        }
        if let Some(e) = cause.downcast_ref::<mmrec::Error>() {
            return match e {
                mmrec::Error::Numerical(_) | mmrec::Error::ZeroNorm => 3,
                mmrec::Error::InvalidArgument(_) | mmrec::Error::Shape(_) => 1,
                _ => 2,
            };
        }
        if cause.is::<std::io::Error>() || cause.is::<serde_json::Error>() {
            return 2;
        }
    }
    1
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return ExitCode::from(if usage { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
