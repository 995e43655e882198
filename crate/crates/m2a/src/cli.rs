//! Command definitions and their implementations.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use m2a_core::adapters::{param_count, CompositionMode, CountSchema, ViewSelection};
use m2a_core::data::Dataset;
use m2a_core::eval::evaluate;
use m2a_core::model::ModelState;
use m2a_core::training::LogEvent;
use serde::Serialize;
use serde_json::json;

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::config::RunConfig;
use crate::dataset::{load_dataset, save_dataset, save_schema};
use crate::error::CliError;
use crate::experiment::{self, Variant};
use crate::io::{write_json, write_jsonl};
use crate::report;

#[derive(Debug, Parser)]
#[command(name = "m2a", version, about = "Multi-attribute, multi-grained adapters on a toy transformer")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write synthetic train/dev/test splits and schema.json.
    Generate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Pretrain the base model on the language-model objective.
    Pretrain {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Output checkpoint file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Joint adapter training followed by module separation.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        base: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score a checkpoint under one composition strategy.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// fine, general, avg, rand or coarse.
        #[arg(long)]
        strategy: Option<String>,
        /// Split file name inside the data directory.
        #[arg(long, default_value = "test")]
        split: String,
        /// JSON report path; defaults to `eval_<strategy>.json` next to the checkpoint.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the ablation grid from one base and tabulate accuracy deltas.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        base: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Adapter parameter counts of both schemes for one injected layer.
    Params {
        #[command(flatten)]
        common: Common,
        /// Domains per attribute, e.g. `user=1631,item=1633`.
        #[arg(long)]
        domains: Option<String>,
        #[arg(long)]
        d_model: Option<usize>,
        #[arg(long)]
        rank: Option<usize>,
        /// Print JSON instead of a table.
        #[arg(long)]
        json: bool,
    },
}

/// Flags shared by every command. Each one, when given, overrides the
/// config file.
#[derive(Debug, Args, Default)]
pub struct Common {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub alpha: Option<f64>,
}

impl Common {
    fn load(&self) -> Result<RunConfig, CliError> {
        let mut c = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            c.seed = s;
        }
        if let Some(a) = self.alpha {
            c.train.alpha = a;
        }
        c.resolve()
    }
}

fn need(flag: Option<PathBuf>, fallback: &Option<PathBuf>, name: &str) -> Result<PathBuf, CliError> {
    flag.or_else(|| fallback.clone())
        .ok_or_else(|| CliError::Usage(format!("--{name} is required (flag or paths.{name} in the config)")))
}

fn dir_of(path: &Path) -> PathBuf {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

/// The splits a command reads from a data directory.
struct Splits {
    train: Dataset,
    dev: Dataset,
    unlabeled: Option<Dataset>,
}

fn load_splits(dir: &Path) -> Result<Splits, CliError> {
    let unlabeled_path = dir.join("unlabeled.jsonl");
    Ok(Splits {
        train: load_dataset(&dir.join("train.jsonl"))?,
        dev: load_dataset(&dir.join("dev.jsonl"))?,
        unlabeled: if unlabeled_path.exists() {
            Some(load_dataset(&unlabeled_path)?)
        } else {
            None
        },
    })
}

/// Uses the backbone stored with a checkpoint and checks the data agrees.
fn adopt_backbone(cfg: &mut RunConfig, model: &ModelState, data: &Dataset) -> Result<(), CliError> {
    cfg.backbone = model.config().clone();
    if data.num_classes != cfg.backbone.num_classes {
        return Err(CliError::config(format!(
            "data has {} classes, model has {}",
            data.num_classes, cfg.backbone.num_classes
        )));
    }
    if data.vocab_size > cfg.backbone.vocab_size {
        return Err(CliError::config("data vocabulary exceeds the model vocabulary"));
    }
    Ok(())
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Generate { common, out } => {
            let cfg = common.load()?;
            let out = need(out, &cfg.paths.data, "out")?;
            let s = experiment::synthetic_splits(&cfg)?;
            save_dataset(&s.train, &out.join("train.jsonl"))?;
            save_dataset(&s.dev, &out.join("dev.jsonl"))?;
            save_dataset(&s.test, &out.join("test.jsonl"))?;
            if !s.unlabeled.samples.is_empty() {
                save_dataset(&s.unlabeled, &out.join("unlabeled.jsonl"))?;
            }
            save_schema(&s.train, &out.join("schema.json"))?;
            cfg.echo(&out)?;
            println!(
                "{}",
                json!({"train": s.train.samples.len(), "dev": s.dev.samples.len(),
                       "test": s.test.samples.len(), "unlabeled": s.unlabeled.samples.len(), "out": out})
            );
        }
        Command::Pretrain { common, data, out } => {
            let cfg = common.load()?;
            let data = need(data, &cfg.paths.data, "data")?;
            let out = need(out, &cfg.paths.base, "out")?;
            let sp = load_splits(&data)?;
            let (model, rep) = experiment::pretrain(&cfg, &sp.train, sp.unlabeled.as_ref(), &sp.dev)?;
            save_checkpoint(&out, &model, &cfg)?;
            write_json(&out.with_extension("report.json"), &rep)?;
            cfg.echo(&dir_of(&out))?;
            println!(
                "{}",
                json!({"steps": rep.losses.len(), "held_out_before": rep.held_out_before,
                       "held_out_after": rep.held_out_after, "checkpoint": out})
            );
        }
        Command::Train {
            common,
            data,
            base,
            out,
        } => {
            let mut cfg = common.load()?;
            let data = need(data, &cfg.paths.data, "data")?;
            let base = need(base, &cfg.paths.base, "base")?;
            let out = need(out, &cfg.paths.checkpoint, "out")?;
            let sp = load_splits(&data)?;
            let (base_model, _) = load_checkpoint(&base)?;
            if base_model.bank().is_some() {
                return Err(CliError::checkpoint(&base, "expected a base checkpoint without adapters"));
            }
            adopt_backbone(&mut cfg, &base_model, &sp.train)?;
            let mut events: Vec<LogEvent> = Vec::new();
            let (model, outcome) = experiment::fit(
                &base_model,
                &cfg,
                cfg.train.clone(),
                &sp.train,
                sp.unlabeled.as_ref(),
                &sp.dev,
                &mut |e| events.push(e.clone()),
            )?;
            save_checkpoint(&out, &model, &cfg)?;
            write_jsonl(&out.with_extension("log.jsonl"), &events)?;
            write_json(&out.with_extension("outcome.json"), &outcome)?;
            cfg.echo(&dir_of(&out))?;
            println!(
                "{}",
                json!({"joint_epochs": outcome.joint_epochs, "best_fine_dev_acc": outcome.best_fine_dev_acc,
                       "steps": outcome.steps, "checkpoint": out})
            );
        }
        Command::Eval {
            common,
            data,
            checkpoint,
            strategy,
            split,
            out,
        } => {
            let cfg = common.load()?;
            let data = need(data, &cfg.paths.data, "data")?;
            let ckpt = need(checkpoint, &cfg.paths.checkpoint, "checkpoint")?;
            let (model, mut stored) = load_checkpoint(&ckpt)?;
            let mode = match strategy {
                Some(s) => CompositionMode::parse(&s)?,
                None => cfg.strategy,
            };
            let set = load_dataset(&data.join(format!("{split}.jsonl")))?;
            adopt_backbone(&mut stored, &model, &set)?;
            let views = match model.schema() {
                Some(schema) => {
                    if schema.attributes.iter().map(|a| &a.name).ne(set.schema.attributes.iter().map(|a| &a.name)) {
                        return Err(CliError::config("dataset attributes differ from the checkpoint's"));
                    }
                    ViewSelection::all(schema)
                }
                None => ViewSelection::all(&set.schema),
            };
            let r = evaluate(&model, &set, mode, &views, cfg.seed, cfg.train.eval_batch_size)?;
            let out = out.unwrap_or_else(|| dir_of(&ckpt).join(format!("eval_{}.json", mode.name())));
            write_json(&out, &r)?;
            let mut echo = stored;
            echo.seed = cfg.seed;
            echo.strategy = mode;
            echo.echo(&dir_of(&out))?;
            print!("{}", report::eval_table(&r));
        }
        Command::Ablate {
            common,
            data,
            base,
            out,
        } => {
            let mut cfg = common.load()?;
            let data = need(data, &cfg.paths.data, "data")?;
            let base = need(base, &cfg.paths.base, "base")?;
            let out = need(out, &cfg.paths.out, "out")?;
            let sp = load_splits(&data)?;
            let test = load_dataset(&data.join("test.jsonl"))?;
            let (base_model, _) = load_checkpoint(&base)?;
            adopt_backbone(&mut cfg, &base_model, &sp.train)?;
            let grid = Variant::grid(sp.train.schema.len());
            let rows = experiment::ablate(&base_model, &cfg, &grid, &sp.train, sp.unlabeled.as_ref(), &sp.dev, &test)?;
            write_json(&out.join("ablation.json"), &rows)?;
            cfg.echo(&out)?;
            print!("{}", report::ablation_table(&rows));
        }
        Command::Params {
            common,
            domains,
            d_model,
            rank,
            json,
        } => {
            let cfg = common.load()?;
            let doms: Vec<(String, usize)> = match domains {
                Some(s) => parse_domains(&s)?,
                None => cfg.synthetic.attributes.iter().map(|a| (a.name.clone(), a.num_domains)).collect(),
            };
            let d = d_model.unwrap_or(cfg.backbone.d_model);
            let r = rank.unwrap_or(cfg.bank.coarse_rank);
            let counts = ParamCounts::compute(&doms, d, r)?;
            if json {
                println!("{}", serde_json::to_string(&counts).expect("counts serialize"));
            } else {
                print!("{}", counts.table());
            }
        }
    }
    Ok(())
}

#[derive(Debug, Serialize)]
pub struct ParamCounts {
    pub domains: Vec<(String, usize)>,
    pub d_model: usize,
    pub rank: usize,
    pub non_decomposed: u64,
    pub decomposed: u64,
}

impl ParamCounts {
    pub fn compute(domains: &[(String, usize)], d: usize, r: usize) -> Result<Self, CliError> {
        let schema = |decomposed| CountSchema {
            domains: domains.iter().map(|(_, n)| *n).collect(),
            d_in: d,
            d_out: d,
            rank: r,
            decomposed,
        };
        Ok(ParamCounts {
            domains: domains.to_vec(),
            d_model: d,
            rank: r,
            non_decomposed: param_count(&schema(false))?,
            decomposed: param_count(&schema(true))?,
        })
    }

    fn table(&self) -> String {
        let doms: Vec<String> = self.domains.iter().map(|(n, k)| format!("{n}={k}")).collect();
        format!(
            "domains {}  d {}  r {}\n{:<15} {:>14}\n{:<15} {:>14}\n{:<15} {:>14}\n",
            doms.join(","),
            self.d_model,
            self.rank,
            "scheme",
            "params/layer",
            "non-decomposed",
            self.non_decomposed,
            "decomposed",
            self.decomposed
        )
    }
}

fn parse_domains(s: &str) -> Result<Vec<(String, usize)>, CliError> {
    s.split(',')
        .map(|part| {
            let (name, n) = part
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("expected name=count, got `{part}`")))?;
            let n: usize = n
                .trim()
                .parse()
                .map_err(|_| CliError::Usage(format!("bad domain count in `{part}`")))?;
            Ok((name.trim().to_string(), n))
        })
        .collect()
}
