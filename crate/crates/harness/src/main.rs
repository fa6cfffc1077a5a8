use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use eulerheat_harness::run::{self, load_snapshots, SeparationCheck};
use eulerheat_harness::{builtin_names, Overrides, Scenario};

#[derive(Parser)]
#[command(
    name = "eulerheat",
    version,
    about = "Heat-flow loop ensembles, grid fields and relative-entropy certificates"
)]
struct Cli {
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Builtin scenario name or path to a TOML file.
    #[arg(long)]
    scenario: String,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    dt: Option<f64>,
    /// Loop samples per deposition.
    #[arg(long)]
    samples: Option<usize>,
    /// Restrict random trials to a single seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Keep every k-th snapshot (0: first and last only).
    #[arg(long)]
    snapshot_every: Option<usize>,
    /// Grid-solver regularization `nu` (default 0).
    #[arg(long)]
    viscosity: Option<f64>,
}

impl Common {
    fn scenario(&self, corrupt_b: Option<f64>) -> Result<Scenario> {
        let overrides = Overrides {
            n: self.n,
            dt: self.dt,
            samples: self.samples,
            seed: self.seed,
            corrupt_b_factor: corrupt_b,
            viscosity: self.viscosity,
            snapshot_every: self.snapshot_every,
        };
        Scenario::load(&self.scenario)?
            .resolve(&overrides)
            .with_context(|| format!("resolving scenario `{}`", self.scenario))
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Source {
    Loops,
    Pde,
}

#[derive(Subcommand)]
enum Command {
    /// Evolve a loop ensemble exactly and deposit it on the grid.
    EvolveLoops(Common),
    /// Run the explicit grid solver.
    RunPde {
        #[command(flatten)]
        common: Common,
        /// Start from this snapshot instead of the scenario's initial data.
        #[arg(long)]
        initial: Option<PathBuf>,
    },
    /// Certify a trajectory against the scenario's trial pairs.
    Certify {
        #[command(flatten)]
        common: Common,
        /// Trajectory to certify.
        #[arg(long, value_enum, default_value = "loops")]
        source: Source,
        /// Read the trajectory from snapshot files instead.
        #[arg(long, conflicts_with = "source")]
        snapshots: Option<PathBuf>,
        /// Multiply B by this factor at every t > 0 before certifying.
        #[arg(long)]
        corrupt_b: Option<f64>,
    },
    /// Check the per-loop entropy identity along a single loop.
    Identity(Common),
    /// Compare two CSV outputs of the same scenario.
    Compare { a: PathBuf, b: PathBuf },
    /// List builtin scenarios.
    Scenarios,
}

fn print_regime(sep: Option<&SeparationCheck>) {
    if let Some(sep) = sep {
        let label = if sep.exploratory {
            "exploratory (loops within 4 kernel widths)"
        } else {
            "smooth"
        };
        println!("regime {label}  min separation {:.3e}", sep.min_separation);
    }
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    if let Some(t) = cli.threads {
        rayon::ThreadPoolBuilder::new().num_threads(t).build_global()?;
    }
    match cli.command {
        Command::EvolveLoops(c) => {
            let s = c.scenario(None)?;
            let r = run::run_loops(&s, c.out.as_deref())?;
            let last = r.diagnostics.last().context("empty trajectory")?;
            println!("scenario {} ({})", s.name, r.scenario_hash);
            println!(
                "steps {}  final t {}  F {:e}  loop energy {:e}",
                r.trajectory.len() - 1,
                last.t,
                last.energy,
                last.loop_energy
            );
            let div = r.diagnostics.iter().map(|d| d.div_rel).fold(0.0, f64::max);
            println!("max relative div B {div:e}");
            print_regime(Some(&r.separation));
        }
        Command::RunPde { common: c, initial } => {
            let s = c.scenario(None)?;
            let initial = initial.as_deref().map(run::read_initial).transpose()?;
            let r = run::run_pde_from(&s, initial, c.out.as_deref())?;
            let last = r.diagnostics.last().context("empty trajectory")?;
            println!("scenario {} ({})  viscosity {}", s.name, r.scenario_hash, r.viscosity);
            println!(
                "steps {}  final t {}  max |b| {:e}",
                r.states.len() - 1,
                last.t,
                last.max_b
            );
            if let Some(e) = r.diagnostics.iter().filter_map(|d| d.b_error_vs_loops).reduce(f64::max) {
                println!("max |b - b_loops| on support {e:e}");
            }
            print_regime(r.separation.as_ref());
        }
        Command::Certify {
            common,
            source,
            snapshots,
            corrupt_b,
        } => {
            let s = common.scenario(corrupt_b)?;
            let traj = match (snapshots, source) {
                (Some(dir), _) => load_snapshots(&dir, &s.hash())?,
                (None, Source::Loops) => run::loop_trajectory(&s)?,
                (None, Source::Pde) => match run::run_pde(&s, None)?.trajectory {
                    Some(t) => t,
                    None => bail!("the grid run of `{}` evolves no density", s.name),
                },
            };
            let r = run::run_certify(&s, &traj, common.out.as_deref())?;
            for v in &r.verdicts {
                println!(
                    "{} seed {:?}: r0 {:.4e}  min margin {:+.3e}  tol {:.1e}  {}",
                    v.report.family,
                    v.report.seed,
                    v.r0.value,
                    v.report.min_margin(),
                    v.report.tol,
                    if v.report.pass { "PASS" } else { "FAIL" }
                );
            }
            print_regime(r.separation.as_ref());
            println!("verdict: {}", if r.pass { "PASS" } else { "FAIL" });
            if !r.pass {
                std::process::exit(2);
            }
        }
        Command::Identity(c) => {
            let s = c.scenario(None)?;
            let r = run::run_identity(&s, c.out.as_deref())?;
            println!("scenario {} ({})", s.name, r.scenario_hash);
            println!("max residual {:e}", r.max_residual());
            println!("max component residual {:e}", r.max_component_residual());
        }
        Command::Compare { a, b } => {
            let r = run::compare(&a, &b)?;
            println!(
                "scenario {}  rows {}  identical {}",
                r.scenario_hash, r.rows, r.identical
            );
            for (col, d) in &r.max_abs_diff {
                println!("{col:>24} {d:e}");
            }
        }
        Command::Scenarios => {
            for name in builtin_names() {
                println!("{name}");
            }
        }
    }
    Ok(())
}
