//! `dape` command line.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::ablate::cmd_ablate;
use crate::bench::cmd_bench;
use crate::check::{run_check, CheckReport, Fault};
use crate::corpus::{gen_corpus, CorpusParams};
use crate::error::{HarnessError, Result};
use crate::runcfg::{ensure_dir, run_root, write_file, RunConfig};
use crate::scene::DensityMix;
use crate::training::cmd_train;

#[derive(Debug, Parser)]
#[command(name = "dape", version, about = "Synthetic image-text alignment experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render and featurize a synthetic corpus.
    Gen {
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// `sparse`, `mixed`, `dense`, `uniform` or three weights like `1,0,0`.
        #[arg(long, default_value = "uniform")]
        density: DensityMix,
        /// Model config whose input shapes the features should match.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Defaults to `<run root>/corpus-<params hash>`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the invariant suites.
    Check {
        #[arg(long)]
        suite: Option<String>,
        /// Swap in a broken kernel: flipped-threshold, wrong-order-topk, off-by-one-density.
        #[arg(long)]
        fault: Option<Fault>,
        /// JSON report path; defaults to `<run root>/check-report.json`.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Train one configuration.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Train every ablation variant of a configuration.
    Ablate {
        #[arg(long)]
        config: PathBuf,
    },
    /// Fine-alignment cost against the uniform baseline.
    Bench {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated dense fractions; defaults to the config's list.
        #[arg(long, value_delimiter = ',')]
        densities: Option<Vec<f64>>,
    },
}

fn print_check(r: &CheckReport) {
    for s in &r.suites {
        println!("{:<7} {:<12} {} ({:.2}s)", s.suite, s.module, if s.passed { "ok" } else { "FAILED" }, s.seconds);
        for i in s.invariants.iter().filter(|i| !i.passed) {
            println!("    {}/{}: {}", s.suite, i.name, i.detail.as_deref().unwrap_or(""));
        }
    }
    let total: usize = r.suites.iter().map(|s| s.invariants.len()).sum();
    println!("{} suites, {total} invariants, {} failed", r.suites.len(), r.failures().len());
}

fn write_report(r: &CheckReport, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        ensure_dir(dir)?;
    }
    write_file(path, serde_json::to_string_pretty(r).expect("report serializes") + "\n")
}

pub fn run(cli: Cli) -> Result<()> {
    let root = run_root();
    match cli.command {
        Command::Gen { n, seed, density, config, out } => {
            let model = match config {
                Some(p) => RunConfig::load(&p)?.model,
                None => Default::default(),
            };
            let params = CorpusParams::for_model(n, seed, density, &model);
            params.validate()?;
            let dir = out.unwrap_or_else(|| root.join(format!("corpus-{}", &params.hash()[..16])));
            let (c, dir) = gen_corpus(&params, &dir)?;
            println!("{} scenes ({} train, {} eval) in {}", c.len(), c.manifest.train.len(), c.manifest.eval.len(), dir.display());
        }
        Command::Check { suite, fault, report } => {
            let r = run_check(suite.as_deref(), fault)?;
            print_check(&r);
            let path = report.unwrap_or_else(|| root.join("check-report.json"));
            write_report(&r, &path)?;
            println!("report: {}", path.display());
            if !r.passed {
                return Err(HarnessError::Check(format!("failing invariants: {}", r.failures().join(", "))));
            }
        }
        Command::Train { config } => {
            let cfg = RunConfig::load(&config)?;
            println!("run {} ({} steps)", cfg.run_id(), cfg.train.steps);
            let (out, dir) = cmd_train(&cfg, &root, &mut |m| {
                println!("step {:>5}  loss {:.4}  eval {:.4}  R@1 {:.3}  R@5 {:.3}  tau {:.4}", m.step, m.loss, m.eval_loss, m.r1, m.r5, m.temperature)
            })?;
            println!("{:.2} steps/sec; outputs in {}", out.steps_per_sec(), dir.display());
        }
        Command::Ablate { config } => {
            let cfg = RunConfig::load(&config)?;
            println!("{:<7} {:>6} {:>6} {:>12} {:>12} {:>10}", "variant", "R@1", "R@5", "MACs/pair", "fine MACs", "steps/sec");
            let (_, dir) = cmd_ablate(&cfg, &root, &mut |r, sps| {
                println!("{:<7} {:>6.3} {:>6.3} {:>12.0} {:>12.0} {:>10.2}", r.variant, r.r1, r.r5, r.macs_total, r.macs_fine, sps)
            })?;
            println!("outputs in {}", dir.display());
        }
        Command::Bench { config, densities } => {
            let cfg = RunConfig::load(&config)?;
            let densities = densities.unwrap_or_else(|| cfg.bench.densities.clone());
            if let Some(d) = densities.iter().find(|d| !(0.0..=1.0).contains(*d)) {
                return Err(HarnessError::Usage(format!("density {d} outside [0, 1]")));
            }
            let (rows, dir) = cmd_bench(&cfg, &root, &densities)?;
            println!("{:<8} {:>12} {:>12} {:>8} {:>8}", "density", "cosines", "uniform", "ratio", "closed");
            for r in &rows {
                let closed = r.closed_form_ratio.map_or("-".to_string(), |c| format!("{c:.4}"));
                println!("{:<8} {:>12} {:>12} {:>8.4} {:>8}", r.density, r.nfa_cosines, r.uniform_cosines, r.ratio, closed);
            }
            println!("outputs in {}", dir.display());
        }
    }
    Ok(())
}
