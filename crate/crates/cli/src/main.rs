//! `normclash`: volume geometry of ℓ2/ℓ∞ balls, adversarial training and the
//! norm-interaction experiments from the command line.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 data or file
//! error, 4 numerical failure.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use normclash_core::Error;

use crate::config::{Manifest, RunConfig};

#[derive(Parser, Debug)]
#[command(name = "normclash", version, about = "Geometry of l2/linf balls and multi-norm adversarial robustness")]
struct Cli {
    /// JSON run configuration; flags override its keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed (falls back to $NORMCLASH_SEED, then 0).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: physical cores). Results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Volume ratios, bounds and equal-volume radii.
    #[command(subcommand)]
    Geometry(GeometryCmd),
    /// Train one model and write a checkpoint plus a JSON-lines log.
    Train {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        budget: BudgetArgs,
        #[command(flatten)]
        training: TrainArgs,
        /// natural, at-linf, at-l2, mat-rand, mat-max, ni-gauss, ni-unif,
        /// rat-{linf,l2}-{gauss,unif}
        #[arg(long)]
        defense: Option<String>,
    },
    /// Attack a checkpoint on the test split and write per-sample results.
    Attack {
        #[command(flatten)]
        model: ModelArgs,
        /// pgd-linf, pgd-l2, eot-linf, eot-l2 or cw
        #[arg(long)]
        attack: Option<String>,
    },
    /// Accuracy of a checkpoint on the test split, clean or under attack.
    Eval {
        #[command(flatten)]
        model: ModelArgs,
        /// none, pgd-linf, pgd-l2, eot-linf, eot-l2 or cw
        #[arg(long)]
        attack: Option<String>,
    },
    /// Norm statistics, calotte sweep or defense x attack matrix.
    #[command(subcommand)]
    Experiment(ExperimentCmd),
    /// Re-run the command recorded in a manifest.json.
    Replay {
        manifest: PathBuf,
    },
}

#[derive(Subcommand, Debug)]
enum GeometryCmd {
    /// Bounds and Monte Carlo estimates over a list of dimensions.
    Table {
        /// Comma-separated dimensions.
        #[arg(long, value_delimiter = ',')]
        dims: Option<Vec<usize>>,
        /// Largest dimension that gets a Monte Carlo estimate.
        #[arg(long)]
        mc_max_dim: Option<usize>,
        #[arg(long)]
        samples: Option<u64>,
    },
    /// Monte Carlo estimate of the ℓ∞-ball fraction inside the ℓ2 ball.
    Mc {
        #[arg(long)]
        d: Option<usize>,
        #[arg(long)]
        samples: Option<u64>,
        /// ℓ2 radius relative to an ℓ∞ radius of 1 (default: equal volume).
        #[arg(long)]
        l2_radius: Option<f64>,
    },
    /// Equal-volume ℓ2 radius for a unit ℓ∞ ball.
    Radius {
        #[arg(long)]
        d: Option<usize>,
    },
}

#[derive(Subcommand, Debug)]
enum ExperimentCmd {
    /// ℓ2 and ℓ∞ norms of PGD perturbations against natural, AT-ℓ∞ and AT-ℓ2 models
    Norms(ExperimentArgs),
    /// Where C&W perturbations fall relative to the ℓ∞ ball and the calibrated ℓ2 ball
    Calotte {
        #[command(flatten)]
        common: ExperimentArgs,
        /// Number of ℓ2 radii in the sweep.
        #[arg(long)]
        sweep: Option<usize>,
        /// Test points attacked per model.
        #[arg(long)]
        cw_samples: Option<usize>,
    },
    /// Accuracy of every defense under every attack
    Matrix(ExperimentArgs),
}

#[derive(Args, Debug)]
struct DataArgs {
    /// Synthetic spec such as `features` or `blobs:d=100,margin=1.5`, or
    /// `idx:<train images>,<train labels>,<test images>,<test labels>`.
    #[arg(long)]
    data: Option<String>,
}

#[derive(Args, Debug)]
struct BudgetArgs {
    #[arg(long)]
    eps_inf: Option<f64>,
    /// Defaults to `eps_inf` times the equal-volume radius for the data dimension.
    #[arg(long)]
    eps_2: Option<f64>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    epochs: Option<usize>,
    /// Comma-separated hidden widths.
    #[arg(long, value_delimiter = ',')]
    hidden: Option<Vec<usize>>,
    #[arg(long)]
    lr: Option<f64>,
}

#[derive(Args, Debug)]
struct ModelArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    budget: BudgetArgs,
    /// Number of test samples (0 = all).
    #[arg(long)]
    samples: Option<usize>,
}

#[derive(Args, Debug)]
struct ExperimentArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    budget: BudgetArgs,
    #[command(flatten)]
    training: TrainArgs,
    /// Training seeds per cell.
    #[arg(long)]
    repeats: Option<usize>,
    /// Number of test samples attacked (0 = all).
    #[arg(long)]
    samples: Option<usize>,
    /// Restrict perturbation statistics to successful attacks.
    #[arg(long)]
    successes_only: bool,
}

impl DataArgs {
    fn apply(&self, c: &mut RunConfig) {
        if let Some(d) = &self.data {
            c.data = d.clone();
        }
    }
}

impl BudgetArgs {
    fn apply(&self, c: &mut RunConfig) {
        if let Some(e) = self.eps_inf {
            c.eps_inf = e;
        }
        if let Some(e) = self.eps_2 {
            c.eps_2 = Some(e);
        }
    }
}

impl TrainArgs {
    fn apply(&self, c: &mut RunConfig) {
        if let Some(e) = self.epochs {
            c.experiment.train.epochs = e;
        }
        if let Some(h) = &self.hidden {
            c.experiment.hidden = h.clone();
        }
        if let Some(lr) = self.lr {
            c.experiment.train.learning_rate = lr;
        }
    }
}

impl ModelArgs {
    fn apply(&self, c: &mut RunConfig) {
        if let Some(p) = &self.checkpoint {
            c.checkpoint = Some(p.clone());
        }
        self.data.apply(c);
        self.budget.apply(c);
        if let Some(n) = self.samples {
            c.experiment.eval_samples = n;
        }
    }
}

impl ExperimentArgs {
    fn apply(&self, c: &mut RunConfig) {
        self.data.apply(c);
        self.budget.apply(c);
        self.training.apply(c);
        if let Some(r) = self.repeats {
            c.experiment.repeats = r;
        }
        if let Some(n) = self.samples {
            c.experiment.eval_samples = n;
        }
        if self.successes_only {
            c.experiment.successes_only = true;
        }
    }
}

/// Maps library errors onto the exit-code taxonomy.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::InvalidArgument(_) => 2,
        Error::BadMagic { .. }
        | Error::Truncated { .. }
        | Error::CountMismatch { .. }
        | Error::Io { .. }
        | Error::Checkpoint(_)
        | Error::Json(_)
        | Error::Csv(_)
        | Error::ShapeMismatch { .. }
        | Error::LabelOutOfRange { .. } => 3,
        Error::Diverged { .. } | Error::NonFinite(_) | Error::Optimizer(_) | Error::Invariant(_) => 4,
    }
}

/// Resolves the command name and configuration from the parsed flags.
fn resolve(cli: &Cli) -> normclash_core::Result<(String, RunConfig)> {
    if let Command::Replay { manifest } = &cli.command {
        let m = Manifest::load(manifest)?;
        let mut cfg = m.config;
        if let Some(out) = &cli.out {
            cfg.out = out.clone();
        }
        return Ok((m.command, cfg));
    }
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = Some(s);
    }
    if let Some(out) = &cli.out {
        cfg.out = out.clone();
    }
    let name = match &cli.command {
        Command::Geometry(g) => match g {
            GeometryCmd::Table {
                dims,
                mc_max_dim,
                samples,
            } => {
                if let Some(d) = dims {
                    cfg.dims = d.clone();
                }
                if let Some(m) = mc_max_dim {
                    cfg.mc_max_dim = *m;
                }
                if let Some(n) = samples {
                    cfg.mc_samples = *n;
                }
                "geometry table"
            }
            GeometryCmd::Mc { d, samples, l2_radius } => {
                if let Some(d) = d {
                    cfg.d = *d;
                }
                if let Some(n) = samples {
                    cfg.mc_samples = *n;
                }
                if let Some(r) = l2_radius {
                    cfg.l2_radius = Some(*r);
                }
                "geometry mc"
            }
            GeometryCmd::Radius { d } => {
                if let Some(d) = d {
                    cfg.d = *d;
                }
                "geometry radius"
            }
        },
        Command::Train {
            data,
            budget,
            training,
            defense,
        } => {
            data.apply(&mut cfg);
            budget.apply(&mut cfg);
            training.apply(&mut cfg);
            if let Some(d) = defense {
                cfg.defense = d.clone();
            }
            "train"
        }
        Command::Attack { model, attack } | Command::Eval { model, attack } => {
            model.apply(&mut cfg);
            if let Some(a) = attack {
                cfg.attack = a.clone();
            }
            if matches!(cli.command, Command::Attack { .. }) {
                "attack"
            } else {
                "eval"
            }
        }
        Command::Experiment(e) => match e {
            ExperimentCmd::Norms(a) => {
                a.apply(&mut cfg);
                "experiment norms"
            }
            ExperimentCmd::Calotte {
                common,
                sweep,
                cw_samples,
            } => {
                common.apply(&mut cfg);
                if let Some(s) = sweep {
                    cfg.sweep = *s;
                }
                if let Some(n) = cw_samples {
                    cfg.experiment.cw_samples = *n;
                }
                "experiment calotte"
            }
            ExperimentCmd::Matrix(a) => {
                a.apply(&mut cfg);
                "experiment matrix"
            }
        },
        Command::Replay { .. } => unreachable!("handled above"),
    };
    cfg.resolve_seed()?;
    Ok((name.to_string(), cfg))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let threads = cli.threads.unwrap_or_else(num_cpus::get_physical).max(1);
    if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global() {
        eprintln!("error: cannot start the worker pool: {e}");
        return ExitCode::from(2);
    }
    let result = resolve(&cli).and_then(|(name, cfg)| commands::run(&name, cfg));
    match result {
        Ok(files) => {
            for f in files {
                eprintln!("wrote {}", f.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
