//! `hjlift`: runs reachability scenarios stage by stage or end to end.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use hjlift::pipeline::{
    exit_code, run_pipeline, run_stage, stage_compare, stage_rollout, Stage, StageError, Workspace, EXIT_OK,
    EXIT_VIOLATION,
};
use hjlift::scenario::{Scenario, BUNDLED};

#[derive(Parser)]
#[command(name = "hjlift", version, about = "Conservative reach and avoid sets through lifted linear games")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every stage into a fresh output directory.
    Pipeline(Common),
    /// Fit the lifted linear models.
    Fit(Common),
    /// Compute the backward feasible tube.
    Tube(Common),
    /// Bound the model error over the tube.
    Errbound(Common),
    /// Solve the lifted games on the query grid.
    Solve(Common),
    /// Solve the DP oracle.
    Dp(Common),
    /// Compare certified sets with the oracle.
    Compare(Common),
    /// Simulate the controller from certified points.
    Rollout(Common),
    /// Export zero-level contours.
    Contours(Common),
    /// List the bundled scenarios.
    Scenarios,
}

#[derive(Args)]
struct Common {
    /// Scenario file, or the name of a bundled scenario.
    #[arg(long)]
    scenario: String,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Overwrite existing artifacts.
    #[arg(long)]
    force: bool,
    /// Replaces the scenario seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; all cores when absent.
    #[arg(long)]
    threads: Option<usize>,
    /// Exit with code 4 unless the results are certified.
    #[arg(long)]
    strict: bool,
}

fn load(spec: &str) -> hjlift::Result<Scenario> {
    let p = Path::new(spec);
    if p.exists() || !BUNDLED.contains(&spec) {
        Scenario::load(p)
    } else {
        Scenario::bundled(spec)
    }
}

fn fail(e: &StageError) -> ExitCode {
    eprintln!("error: {e}");
    ExitCode::from(e.code() as u8)
}

fn run(stage: Option<Stage>, c: Common) -> ExitCode {
    let mut scn = match load(&c.scenario) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(exit_code(&e) as u8);
        }
    };
    if let Some(seed) = c.seed {
        scn.seed = seed;
    }
    if let Some(n) = c.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: thread pool: {e}");
            return ExitCode::from(2);
        }
    }
    let Some(stage) = stage else {
        return match run_pipeline(&scn, &c.out, c.force, c.strict) {
            Ok(s) => {
                for m in &s.containment.models {
                    for h in &m.horizons {
                        println!(
                            "{} h={}: certified {} / {}, violations {}",
                            m.model, h.horizon, h.counts.certified, h.counts.points, h.counts.violations
                        );
                    }
                }
                if let Some(r) = &s.rollout {
                    println!("rollouts: {} / {} succeeded", r.successes, r.trials.len());
                }
                if s.containment.ablation {
                    println!("ablation run: results are not certified");
                }
                ExitCode::from(s.exit_code as u8)
            }
            Err(e) => fail(&e),
        };
    };
    let ws = match Workspace::new(&c.out, c.force) {
        Ok(w) => w,
        Err(e) => return fail(&StageError { stage, error: e }),
    };
    let wrap = |error| StageError { stage, error };
    let code = match stage {
        Stage::Compare => match stage_compare(&scn, &ws) {
            Ok(r) => {
                println!("violations: {}", r.total_violations);
                if c.strict && !r.certified { EXIT_VIOLATION } else { EXIT_OK }
            }
            Err(e) => return fail(&wrap(e)),
        },
        Stage::Rollout => match stage_rollout(&scn, &ws) {
            Ok(Some(r)) => {
                println!("rollouts: {} / {} succeeded", r.successes, r.trials.len());
                if c.strict && r.success_rate < 1.0 { EXIT_VIOLATION } else { EXIT_OK }
            }
            Ok(None) => {
                println!("no certified points; nothing to simulate");
                EXIT_OK
            }
            Err(e) => return fail(&wrap(e)),
        },
        s => match run_stage(s, &scn, &ws) {
            Ok(()) => EXIT_OK,
            Err(e) => return fail(&e),
        },
    };
    ExitCode::from(code as u8)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (stage, common) = match cli.command {
        Command::Scenarios => {
            for name in BUNDLED {
                println!("{name}");
            }
            return ExitCode::SUCCESS;
        }
        Command::Pipeline(c) => (None, c),
        Command::Fit(c) => (Some(Stage::Fit), c),
        Command::Tube(c) => (Some(Stage::Tube), c),
        Command::Errbound(c) => (Some(Stage::Errbound), c),
        Command::Solve(c) => (Some(Stage::Solve), c),
        Command::Dp(c) => (Some(Stage::Dp), c),
        Command::Compare(c) => (Some(Stage::Compare), c),
        Command::Rollout(c) => (Some(Stage::Rollout), c),
        Command::Contours(c) => (Some(Stage::Contours), c),
    };
    run(stage, common)
}
