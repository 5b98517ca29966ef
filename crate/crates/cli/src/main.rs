use std::path::PathBuf;
use std::process::ExitCode;

use bilevel_fw::solvers::{Termination, Variant};
use bilevel_fw_cli::config::{self, parse_seeds, Overrides, RunConfig};
use bilevel_fw_cli::output::{write_compare, write_run};
use bilevel_fw_cli::runner::{execute, RunError, SeedRun};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "bilevel-fw", version, about = "Inexact Frank-Wolfe runs on bilevel and single-level problems")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one solver over a list of seeds.
    Run(RunArgs),
    /// Run FW, ASFW and PWFW on the same problem and seeds, one shared plot.
    Compare(RunArgs),
    /// Parse a config, fill defaults and print it.
    Validate {
        config: PathBuf,
        #[command(flatten)]
        flags: Flags,
    },
}

#[derive(Args)]
struct RunArgs {
    /// JSON run configuration; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    flags: Flags,
}

#[derive(Args, Default)]
struct Flags {
    /// toy, ssl, distill or custom_polytope.
    #[arg(long)]
    problem: Option<String>,
    /// fw, asfw or pwfw.
    #[arg(long)]
    solver: Option<String>,
    /// itd, aid, exact or perturbed.
    #[arg(long)]
    hypergrad: Option<String>,
    /// Inner iterations of ITD/AID.
    #[arg(long)]
    t: Option<u64>,
    /// Adjoint iterations of AID.
    #[arg(long)]
    k: Option<u64>,
    /// Derive inner iteration counts from σ and τ.
    #[arg(long)]
    auto_iters: bool,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    sigma: Option<f64>,
    /// Swap cap of the pairwise variant.
    #[arg(long = "R")]
    swap_cap: Option<u32>,
    #[arg(long)]
    max_iters: Option<u64>,
    /// `3`, `0..4` (inclusive) or `1,5,9`.
    #[arg(long, value_parser = seed_list)]
    seeds: Option<SeedList>,
    /// Worker threads.
    #[arg(long)]
    jobs: Option<usize>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// Record the gradient error against the contract on every call.
    #[arg(long)]
    audit: bool,
}

#[derive(Clone)]
struct SeedList(Vec<u64>);

fn seed_list(s: &str) -> Result<SeedList, String> {
    parse_seeds(s).map(SeedList)
}

impl Flags {
    fn overrides(self) -> Overrides {
        Overrides {
            problem: self.problem,
            solver: self.solver,
            hypergrad: self.hypergrad,
            t: self.t,
            k: self.k,
            auto_iters: self.auto_iters,
            tau: self.tau,
            sigma: self.sigma,
            swap_cap: self.swap_cap,
            max_iters: self.max_iters,
            seeds: self.seeds.map(|s| s.0),
            jobs: self.jobs,
            output_dir: self.output_dir,
            audit: self.audit,
        }
    }
}

fn report(runs: &[SeedRun]) {
    for r in runs {
        let rep = &r.report;
        let why = match rep.termination {
            Termination::GapBelowTau => "gap below tau",
            Termination::MaxIters => "iteration limit",
        };
        let bound = rep.theoretical_bound.map_or_else(|| "n/a".to_string(), |b| b.to_string());
        println!(
            "{} seed {}: {} after {} iterations, best gap {:.3e}, bound {}",
            r.variant.name(),
            r.seed,
            why,
            rep.n_iters,
            r.best_gap.last().map_or(f64::NAN, |g| g + 0.0),
            bound
        );
    }
}

fn load(path: Option<&std::path::Path>, flags: Flags) -> Result<RunConfig, ExitCode> {
    config::load(path, &flags.overrides()).map_err(|e| {
        eprintln!("error: {e}");
        ExitCode::from(2)
    })
}

fn fail(e: RunError) -> ExitCode {
    eprintln!("error: {e}");
    ExitCode::from(e.exit_code())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Validate { config, flags } => match load(Some(&config), flags) {
            Ok(cfg) => {
                println!("{}", cfg.to_pretty_json());
                ExitCode::SUCCESS
            }
            Err(code) => code,
        },
        Command::Run(args) => {
            let cfg = match load(args.config.as_deref(), args.flags) {
                Ok(c) => c,
                Err(code) => return code,
            };
            match execute(&cfg, &[cfg.solver]).and_then(|(_, grouped)| {
                report(&grouped[0]);
                write_run(&cfg, &grouped[0])
            }) {
                Ok(dir) => {
                    println!("wrote {}", dir.display());
                    ExitCode::SUCCESS
                }
                Err(e) => fail(e),
            }
        }
        Command::Compare(args) => {
            let cfg = match load(args.config.as_deref(), args.flags) {
                Ok(c) => c,
                Err(code) => return code,
            };
            let variants = [Variant::Fw, Variant::Asfw, Variant::Pwfw];
            match execute(&cfg, &variants).and_then(|(_, grouped)| {
                grouped.iter().for_each(|g| report(g));
                write_compare(&cfg, &grouped)
            }) {
                Ok(dir) => {
                    println!("wrote {}", dir.display());
                    ExitCode::SUCCESS
                }
                Err(e) => fail(e),
            }
        }
    }
}
