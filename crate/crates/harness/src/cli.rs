//! Command line front end.

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use cstf_core::matching::{self, MatchListHeader, DEFAULT_TEMPERATURE};
use cstf_core::{ParamSet, Real};

use crate::config::{Interp, RunConfig};
use crate::error::{HarnessError, Result};
use crate::experiments::{self, Split, SWEEP_REFERENCE};
use crate::{gradsuite, matchtask, plot, report, train};

#[derive(Debug, Parser)]
#[command(name = "cstf", version, about = "Train and evaluate the CSTF encoder-decoder on synthetic scenes")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// JSON run configuration; missing fields take their defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// IoU threshold for a true positive (0.5 or 0.7).
    #[arg(long, global = true)]
    pub iou: Option<f64>,
    /// Precision-recall integration: 11pt or all.
    #[arg(long, global = true)]
    pub interp: Option<Interp>,
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Element width, 32 or 64.
    #[arg(long, global = true)]
    pub precision: Option<u32>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train on synthetic scenes; writes loss.csv, metrics.csv and params.json.
    Train,
    /// Evaluate a saved checkpoint on the test split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Train and evaluate the six fusion/embedding variants.
    Ablate {
        /// Also run sequential fusion (CSTF-CA-SCA).
        #[arg(long)]
        sequential: bool,
    },
    /// Train and evaluate one model per base patch size.
    Sweep {
        #[arg(long, value_delimiter = ',', default_values_t = SWEEP_REFERENCE.map(|r| r.0))]
        sizes: Vec<usize>,
    },
    /// Check every backward pass against central differences.
    Gradcheck {
        /// Number of random seeds per operation.
        #[arg(long, default_value_t = 5)]
        seeds: u64,
    },
    /// Overfit the matching loss on a block-permuted image pair.
    Match {
        /// Confidence threshold of the mutual nearest neighbours.
        #[arg(long, default_value_t = 0.2)]
        theta: f64,
        #[arg(long, default_value_t = DEFAULT_TEMPERATURE)]
        tau: f64,
    },
}

impl GlobalArgs {
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(i) = self.iou {
            cfg.metric.iou_threshold = i;
        }
        if let Some(i) = self.interp {
            cfg.metric.interpolation = i;
        }
        if let Some(o) = &self.out {
            cfg.output_dir = o.clone();
        }
        if let Some(p) = self.precision {
            cfg.precision = p;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let cfg = cli.global.resolve()?;
    match cli.command {
        Command::Train => by_precision(&cfg, TrainCmd),
        Command::Eval { checkpoint } => by_precision(&cfg, EvalCmd(&checkpoint)),
        Command::Ablate { sequential } => {
            let table = experiments::run_ablation(&cfg, sequential)?;
            emit_table(&cfg, "ablation", &table)?;
            let curves: Vec<(String, Vec<(f64, f64)>)> =
                table.rows.iter().map(|r| (r.variant.clone(), r.pr.clone())).collect();
            plot::pr_curves(&cfg.output_dir.join("pr_curves.svg"), &curves)
        }
        Command::Sweep { sizes } => {
            let table = experiments::patch_size_sweep(&cfg, &sizes)?;
            emit_table(&cfg, "patch size sweep", &table)?;
            let points: Vec<(f64, f64)> = table
                .rows
                .iter()
                .filter_map(|r| {
                    let p = r.variant.strip_prefix('P')?.split('-').next()?.parse::<f64>().ok()?;
                    Some((p, r.map))
                })
                .collect();
            plot::sweep_curve(&cfg.output_dir.join("sweep.svg"), &points)
        }
        Command::Gradcheck { seeds } => {
            let seeds: Vec<u64> = (1..=seeds.max(1)).collect();
            let suite = gradsuite::run_suite(&seeds)?;
            for c in &suite.cases {
                println!(
                    "{:<28} f{} seed {}  rel {:.2e}  (tol {:.0e})  {}",
                    c.case,
                    c.bits,
                    c.seed,
                    c.rel_error,
                    gradsuite::tolerance(c.bits),
                    if c.passed() { "ok" } else { "FAIL" }
                );
            }
            println!("{} checks in {:.1}s", suite.cases.len(), suite.seconds);
            if suite.passed() {
                Ok(())
            } else {
                Err(HarnessError::Contract("gradient check failed".into()))
            }
        }
        Command::Match { theta, tau } => by_precision(&cfg, MatchCmd { theta, tau }),
    }
}

/// A command body generic over the element type.
trait Generic {
    fn call<T: Real>(self, cfg: &RunConfig) -> Result<()>;
}

fn by_precision(cfg: &RunConfig, cmd: impl Generic) -> Result<()> {
    match cfg.precision {
        32 => cmd.call::<f32>(cfg),
        _ => cmd.call::<f64>(cfg),
    }
}

fn print_model_stats<T: Real>(cfg: &RunConfig, params: &ParamSet<T>) -> Result<()> {
    let fps = experiments::forward_fps(params, &cfg.model, 20)?;
    println!("parameters: {}", params.numel());
    println!(
        "forward: {fps:.1} images/s at {}×{}, {}-bit, one CPU thread (local measurement, not comparable with published GPU figures)",
        cfg.model.height, cfg.model.width, cfg.precision
    );
    Ok(())
}

fn variant_label(cfg: &RunConfig) -> String {
    format!("CSTF-{}-{}", cfg.model.fusion, cfg.model.patch.mode)
}

struct TrainCmd;

impl Generic for TrainCmd {
    fn call<T: Real>(self, cfg: &RunConfig) -> Result<()> {
        let split = Split::generate(cfg)?;
        let out = train::train::<T>(cfg, &split.train)?;
        println!("trained {} steps in {:.1}s, training loss {:.5}", out.steps(), out.seconds, out.final_loss);
        let dir = &cfg.output_dir;
        report::write(dir, "loss.csv", &report::loss_csv(&out.losses))?;
        out.params.save(&dir.join("params.json"))?;
        let eval = experiments::evaluate(&out.params, &cfg.model, &split.test, &cfg.metric)?;
        let table = single_row(cfg, &split, eval.map, eval.recall, out.final_loss);
        emit_table(cfg, "test split", &table)?;
        plot::pr_curves(&dir.join("pr_curve.svg"), &[(variant_label(cfg), eval.pr)])?;
        print_model_stats(cfg, &out.params)
    }
}

struct EvalCmd<'a>(&'a Path);

impl Generic for EvalCmd<'_> {
    fn call<T: Real>(self, cfg: &RunConfig) -> Result<()> {
        let params = ParamSet::<T>::load(self.0)?;
        let split = Split::generate(cfg)?;
        let eval = experiments::evaluate(&params, &cfg.model, &split.test, &cfg.metric)?;
        let table = single_row(cfg, &split, eval.map, eval.recall, f64::NAN);
        emit_table(cfg, "test split", &table)?;
        plot::pr_curves(&cfg.output_dir.join("pr_curve.svg"), &[(variant_label(cfg), eval.pr)])?;
        print_model_stats(cfg, &params)
    }
}

struct MatchCmd {
    theta: f64,
    tau: f64,
}

impl Generic for MatchCmd {
    fn call<T: Real>(self, cfg: &RunConfig) -> Result<()> {
        let pair = matchtask::gen_match_pair(cfg.seed, cfg.model.height, cfg.model.patch.grid)?;
        let out = matchtask::train_matching::<T>(&cfg.model, &cfg.match_optimizer, cfg.seed, &pair, self.theta, self.tau)?;
        let dir = &cfg.output_dir;
        std::fs::create_dir_all(dir)?;
        report::write(dir, "match_loss.csv", &report::loss_csv(&out.losses))?;
        let [rows, cols] = [out.confidence.shape()[0], out.confidence.shape()[1]];
        let header = MatchListHeader { rows, cols, threshold: self.theta, temperature: self.tau };
        matching::write_matches(BufWriter::new(File::create(dir.join("matches.txt"))?), &header, &out.matches)?;
        println!(
            "{} matches, {:.1}% of {} planted pairs recovered, final loss {:.4}",
            out.matches.len(),
            100.0 * out.recovered,
            pair.pairs.len(),
            out.losses.last().copied().unwrap_or(f64::NAN)
        );
        Ok(())
    }
}

fn single_row(cfg: &RunConfig, split: &Split, map: f64, recall: f64, final_loss: f64) -> experiments::ResultTable {
    experiments::ResultTable {
        split_hash: split.hash(),
        rows: vec![experiments::ResultRow {
            variant: variant_label(cfg),
            map,
            recall,
            reference: None,
            final_loss,
            pr: Vec::new(),
        }],
    }
}

fn emit_table(cfg: &RunConfig, title: &str, table: &experiments::ResultTable) -> Result<()> {
    print!("{}", report::render_table(title, table));
    let body = report::metrics_csv(table, cfg.metric.iou_threshold, cfg.metric.interpolation, cfg.seed);
    report::write(&cfg.output_dir, "metrics.csv", &body)
}
