use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use dkf::config::{ExperimentConfig, ModelConfig};
use dkf::harness::{self, FilterKind};

#[derive(Parser)]
#[command(name = "dkf", version, about = "Distributed Kalman filtering experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a model, write it with its decomposition report.
    Generate(Common),
    /// Decompose a model into sensor sub-systems.
    Decompose(Common),
    /// Monte Carlo filter run; writes `k,trace` per band width.
    Run {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        filter: Filter,
        /// Band widths, comma separated.
        #[arg(long, value_delimiter = ',')]
        l_values: Option<Vec<usize>>,
        /// Keep the per-message log (LIF).
        #[arg(long)]
        log: bool,
    },
    /// Contraction quotients of the iterate-collapse map.
    ExpContraction {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        bins: Option<usize>,
    },
    /// Error of the banded iteration against plain JOR.
    ExpErrorBound {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        iterations: Option<usize>,
    },
    /// Trace versus DICI iteration budget.
    ExpDiciSweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',')]
        budgets: Option<Vec<usize>>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Filter {
    Cif,
    Clbif,
    Lif,
}

#[derive(Args)]
struct Common {
    /// Experiment configuration (TOML).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Model configuration (TOML); replaces the one in the experiment config.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Run directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    k_max: Option<usize>,
    #[arg(long)]
    l: Option<usize>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    dici_tol: Option<f64>,
    #[arg(long)]
    consensus_tol: Option<f64>,
    /// Trailing steps averaged for steady-state values.
    #[arg(long)]
    steady_window: Option<usize>,
}

impl Common {
    fn load(&self) -> Result<(ExperimentConfig, PathBuf)> {
        let mut exp = match &self.config {
            Some(p) => ExperimentConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
            None => ExperimentConfig::default(),
        };
        if let Some(p) = &self.model {
            exp.model = ModelConfig::load(p).with_context(|| format!("loading {}", p.display()))?;
        }
        macro_rules! set {
            ($($f:ident),*) => { $( if let Some(v) = self.$f { exp.$f = v; } )* };
        }
        set!(seed, trials, k_max, l, gamma, n, dici_tol, consensus_tol, steady_window);
        exp.validate()?;
        let out = self
            .out
            .clone()
            .unwrap_or_else(|| PathBuf::from(&exp.output_dir).join(&exp.experiment));
        std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
        exp.save(&out.join("experiment.toml"))?;
        Ok((exp, out))
    }
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Generate(c) => {
            let (exp, out) = c.load()?;
            harness::cmd_generate(&exp, &out)?;
            println!("wrote model and decomposition to {}", out.display());
        }
        Command::Decompose(c) => {
            let (exp, out) = c.load()?;
            harness::cmd_decompose(&exp, &out)?;
            println!("wrote decomposition to {}", out.display());
        }
        Command::Run { common, filter, l_values, log } => {
            let (mut exp, out) = common.load()?;
            if let Some(ls) = l_values {
                exp.l_values = ls;
            }
            let kind = match filter {
                Filter::Cif => FilterKind::Cif,
                Filter::Clbif => FilterKind::Clbif,
                Filter::Lif => FilterKind::Lif,
            };
            for (l, v) in harness::cmd_run(&exp, kind, &out, log)? {
                println!("{} L={l} steady-state trace {v:.6}", kind.name());
            }
        }
        Command::ExpContraction { common, bins } => {
            let (mut exp, out) = common.load()?;
            if let Some(b) = bins {
                exp.bins = b;
            }
            let s = harness::cmd_exp_contraction(&exp, &out)?;
            println!("{} trials: max alpha {:.6}, min alpha {:.6}", s.trials, s.max, s.min);
        }
        Command::ExpErrorBound { common, iterations } => {
            let (mut exp, out) = common.load()?;
            if let Some(i) = iterations {
                exp.iterations = i;
            }
            let s = harness::cmd_exp_error_bound(&exp, &out)?;
            let min = s.min_diff.iter().copied().fold(f64::INFINITY, f64::min);
            println!("min difference over trials and iterations {min:e}");
        }
        Command::ExpDiciSweep { common, budgets } => {
            let (mut exp, out) = common.load()?;
            if let Some(b) = budgets {
                exp.budgets = b;
            }
            let r = harness::cmd_exp_dici_sweep(&exp, &out)?;
            let w = exp.steady_window;
            println!("riccati {:.4}", r.riccati_steady);
            println!("direct {:.4}", r.direct.steady_state(w));
            println!("converged {:.4}", r.converged.steady_state(w));
            println!("decoupled peak {:.4}", r.decoupled.peak());
            for (t, c) in &r.budgets {
                println!("t={t} {:.4}", c.steady_state(w));
            }
        }
    }
    Ok(())
}
