use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use iaa_core::experiment::{self, report, round_steps, run_transfer, sweep, train_teacher, SweepAxis};
use iaa_core::{ExperimentConfig, TransferKind};

#[derive(Parser)]
#[command(name = "iaa", version, about = "Introspective action advising on a four-rooms gridworld")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train source-task teachers and keep the best seed.
    TrainTeacher(Common),
    /// Train students on the target task.
    Run(Common),
    /// Repeat `run` over values of one introspection setting.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// epsilon, decay or burn_in.
        #[arg(long)]
        axis: String,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
    },
    /// Summarise every run directory under --out.
    Report {
        #[arg(long, default_value = "runs")]
        out: PathBuf,
        /// Steps at which to tabulate mean returns.
        #[arg(long, value_delimiter = ',', default_values_t = [250_000u64, 500_000])]
        at: Vec<u64>,
    },
}

#[derive(Args, Clone)]
struct Common {
    /// JSON config; flags below override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    method: Option<String>,
    /// May be repeated.
    #[arg(long = "seed")]
    seeds: Vec<u64>,
    /// Rounded up to a whole number of batches.
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    decay: Option<f64>,
    #[arg(long = "burn-in")]
    burn_in: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    teacher: Option<PathBuf>,
}

impl Common {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p).with_context(|| format!("reading {}", p.display()))?,
            None => ExperimentConfig::default(),
        };
        if let Some(m) = &self.method {
            cfg.method = TransferKind::parse(m)?;
        }
        if !self.seeds.is_empty() {
            cfg.seeds = self.seeds.clone();
        }
        if let Some(s) = self.steps {
            let rounded = round_steps(s, cfg.ppo.batch_size);
            if rounded != s {
                log::info!("rounding --steps {s} up to {rounded}");
            }
            cfg.total_steps = rounded;
        }
        if let Some(e) = self.epsilon {
            cfg.iaa.epsilon = e;
        }
        if let Some(d) = self.decay {
            cfg.iaa.decay = d;
            cfg.decay = d;
        }
        if let Some(b) = self.burn_in {
            cfg.iaa.burn_in = b;
        }
        if let Some(o) = &self.out {
            cfg.output_dir = o.clone();
        }
        if let Some(t) = &self.teacher {
            cfg.teacher_checkpoint = Some(t.clone());
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn print_runs(runs: &[experiment::RunSummary]) {
    for r in runs {
        let ret = r.final_return().map_or("-".to_string(), |v| format!("{v:.3}"));
        println!(
            "{}\treturn {ret}\tadvice {}\t{:.0}s\t{}",
            r.run_id,
            r.advice_issued,
            r.wall_seconds,
            r.run_dir.display()
        );
    }
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::TrainTeacher(common) => {
            let mut cli = common;
            if cli.seeds.is_empty() && cli.config.is_none() {
                cli.seeds = vec![0, 1, 2, 3];
            }
            let cfg = cli.resolve()?;
            let sel = train_teacher(&cfg)?;
            for (seed, ret) in &sel.final_returns {
                println!("seed {seed}\treturn {}", ret.map_or("-".into(), |v| format!("{v:.3}")));
            }
            println!("teacher: seed {} -> {}", sel.best_seed, sel.teacher_dir.display());
            if let Some(w) = sel.warning {
                eprintln!("warning: {w}");
            }
        }
        Command::Run(common) => print_runs(&run_transfer(&common.resolve()?)?),
        Command::Sweep { common, axis, values } => {
            let cfg = common.resolve()?;
            for entry in sweep(&cfg, SweepAxis::parse(&axis)?, &values)? {
                println!("{axis} = {}", entry.value);
                print_runs(&entry.runs);
            }
        }
        Command::Report { out, at } => {
            let lines = report(&out, &at)?;
            if lines.is_empty() {
                bail!("no metrics.csv found under {}", out.display());
            }
            let fmt = |v: Option<f64>, pct: bool| match (v, pct) {
                (None, _) => "-".to_string(),
                (Some(x), true) => format!("{x:+.1}%"),
                (Some(x), false) => format!("{x:.3}"),
            };
            print!("{:<16}{:>6}", "method", "seeds");
            for s in &at {
                print!("{:>12}{:>10}", format!("@{s}"), "vs base");
            }
            println!();
            for l in lines {
                print!("{:<16}{:>6}", l.method, l.seeds);
                for (m, r) in l.means.iter().zip(&l.relative) {
                    print!("{:>12}{:>10}", fmt(*m, false), fmt(*r, true));
                }
                println!();
            }
        }
    }
    Ok(())
}
