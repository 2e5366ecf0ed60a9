use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use rotdg::eval::{EvalReport, DEFAULT_IOU};
use rotdg::losses::SecMetric;
use rotdg::runner::commands::{run_ablation, write_ablation_csv, AblationData, MATRICES, TARGETS};
use rotdg::runner::{cmd_eval, cmd_gen, cmd_plot, cmd_train, RunConfig};

#[derive(Parser)]
#[command(name = "rotdg", version, about = "Domain-generalized oriented detection at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the source and target domain datasets.
    Gen {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on the source domain; writes a checkpoint and a loss CSV.
    Train {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on a dataset or domain directory.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = DEFAULT_IOU)]
        iou: f64,
        /// Directory for eval.json.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the component, per-scale and distance-metric ablation matrices.
    Ablate {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = DEFAULT_IOU)]
        iou: f64,
        /// Comma-separated subset of component,scale,metric.
        #[arg(long, value_delimiter = ',')]
        matrices: Option<Vec<String>>,
    },
    /// Render a loss or ablation CSV as SVG charts.
    Plot {
        #[arg(long)]
        csv: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct RunArgs {
    /// JSON run configuration; defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run seed (for gen: the scene seed; for ablate: a single seed).
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    no_style: bool,
    #[arg(long)]
    no_hcl: bool,
    #[arg(long)]
    no_rac: bool,
    #[arg(long)]
    no_sec: bool,
    #[arg(long)]
    sec_metric: Option<SecMetric>,
    /// Blocks whose features are hallucinated, e.g. 1,2,3,4.
    #[arg(long, value_delimiter = ',')]
    style_blocks: Option<Vec<usize>>,
    /// Stop training after this many steps.
    #[arg(long)]
    max_steps: Option<usize>,
}

impl RunArgs {
    fn config(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        let t = &mut cfg.detector.toggles;
        t.style &= !self.no_style;
        t.hcl &= !self.no_hcl;
        t.rac &= !self.no_rac;
        t.sec &= !self.no_sec;
        if let Some(m) = self.sec_metric {
            cfg.detector.sec_metric = m;
        }
        if let Some(blocks) = &self.style_blocks {
            let mut on = [false; 4];
            for &b in blocks {
                if !(1..=4).contains(&b) {
                    bail!("--style-blocks entries must be 1..4, got {b}");
                }
                on[b - 1] = true;
            }
            cfg.detector.style_blocks = on;
        }
        if self.max_steps.is_some() {
            cfg.max_steps = self.max_steps;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{x:.4}"))
}

fn print_report(label: &str, r: &EvalReport) {
    println!("{label}: mAP@{} {} RMSD {}", r.iou, opt(r.map), opt(r.rmsd));
    for c in &r.per_class {
        println!("  class {}: AP {} gt {} tp {} fp {} fn {}", c.class, opt(c.ap), c.num_gt, c.tp, c.fp, c.fn_);
    }
}

fn ablate(mut cfg: RunConfig, data: &Path, out: &Path, iou: f64, matrices: Option<Vec<String>>, seed: Option<u64>) -> Result<()> {
    if let Some(s) = seed {
        cfg.ablation.seeds = vec![s];
    }
    let chosen: Vec<&str> = match &matrices {
        Some(list) => list
            .iter()
            .map(|m| {
                MATRICES
                    .iter()
                    .copied()
                    .find(|k| k == m)
                    .with_context(|| format!("unknown matrix {m:?} (expected one of {MATRICES:?})"))
            })
            .collect::<Result<_>>()?,
        None => MATRICES.to_vec(),
    };
    let loaded = AblationData::load(&cfg, data)?;
    let results = run_ablation(&cfg, &loaded, &chosen, iou)?;
    write_ablation_csv(out, &results)?;
    println!("{:<10} {:<14} {:<8} {:>10} {:>10}", "matrix", "row", "domain", "mAP", "RMSD");
    for m in &results.medians {
        if m.domain == TARGETS || m.domain == cfg.data.source {
            println!("{:<10} {:<14} {:<8} {:>10} {:>10}", m.matrix, m.row, m.domain, opt(m.map), opt(m.rmsd));
        }
    }
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Gen { run, out } => {
            let mut cfg = run.config()?;
            if let Some(s) = run.seed {
                cfg.data.seed = s;
            }
            for s in cmd_gen(&cfg, &out)? {
                println!("{}/{}: {} images, objects per class {:?}", s.domain, s.split, s.images, s.objects);
            }
        }
        Command::Train { run, data, out } => {
            let mut cfg = run.config()?;
            if let Some(s) = run.seed {
                cfg.seed = s;
            }
            let trained = cmd_train(&cfg, &data, &out)?;
            let last = trained.losses.last().context("no training steps were run")?;
            println!("trained {} steps, final loss {:.4}; checkpoint in {}", trained.checkpoint.step, last.loss.total, out.display());
        }
        Command::Eval { checkpoint, data, iou, out } => {
            let report = cmd_eval(&checkpoint, &data, iou, out.as_deref())?;
            print_report(&data.display().to_string(), &report);
        }
        Command::Ablate { run, data, out, iou, matrices } => {
            ablate(run.config()?, &data, &out, iou, matrices, run.seed)?;
        }
        Command::Plot { csv, out } => {
            for f in cmd_plot(&csv, &out)? {
                println!("wrote {}", f.display());
            }
        }
    }
    Ok(())
}
