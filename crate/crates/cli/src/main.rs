use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use hitgeo_cli::config::{ExperimentConfig, RunSeeds};
use hitgeo_cli::error::{CliError, Result};
use hitgeo_cli::experiment::{
    dump_graphs, eval_run, load_latest, prepare_run, run_experiment, train_run, Timing,
};
use hitgeo_cli::report::{format_table, report_dir};
use hitgeo_cli::verify::{self, VerifyOptions};
use hitgeo_core::env::FiniteCmp;
use hitgeo_core::par::Exec;
use hitgeo_core::planner::PlannerKind;

#[derive(Parser)]
#[command(name = "hitgeo", version, about = "Hitting-time geometry experiments")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML experiment config; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run only this seed instead of the configured list.
    #[arg(long)]
    seed: Option<u64>,
    /// Output location (file or directory, depending on the command).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Restrict to one planner.
    #[arg(long, value_parser = parse_planner)]
    planner: Option<PlannerKind>,
    /// `section.key=value`, repeatable.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write the configured environment as JSON to --out.
    GenEnv(Common),
    /// Collect the dataset to --out (`.txt` selects the text layout).
    Collect(Common),
    /// Train every seed's run directory under --out.
    Train(Common),
    /// Dump planning graphs of a trained run as edge lists.
    Plan(Common),
    /// Evaluate trained runs and write eval.csv.
    Eval(Common),
    /// Run the exact-oracle verification suites.
    Verify(VerifyArgs),
    /// Aggregate seed_*/eval.csv under --out into report.csv.
    Report {
        #[arg(long)]
        out: PathBuf,
    },
    /// Full pipeline for every seed, then report.
    Run(Common),
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Random chains per suite.
    #[arg(long, default_value_t = 20)]
    chains: usize,
    #[arg(long, default_value_t = 50)]
    max_states: usize,
    #[arg(long, default_value_t = 10)]
    bound_trials: usize,
    #[arg(long, default_value_t = 100_000)]
    mc_episodes: usize,
    /// CSV destination; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_planner(s: &str) -> std::result::Result<PlannerKind, String> {
    PlannerKind::parse(s).ok_or_else(|| {
        let names: Vec<&str> = PlannerKind::ALL.iter().map(|p| p.name()).collect();
        format!("expected one of {}", names.join(", "))
    })
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::load(self.config.as_deref(), &self.overrides)?;
        if let Some(s) = self.seed {
            cfg.seeds = vec![s];
        }
        if let Some(p) = self.planner {
            cfg.planner.planners = vec![p];
        }
        Ok(cfg)
    }

    /// Config whose `out` is --out when given (directory commands).
    fn load_with_out(&self) -> Result<ExperimentConfig> {
        let mut cfg = self.load()?;
        if let Some(o) = &self.out {
            cfg.out = o.clone();
        }
        Ok(cfg)
    }

    fn out_file(&self) -> Result<&Path> {
        self.out
            .as_deref()
            .ok_or_else(|| CliError::Config("--out FILE is required".into()))
    }
}

fn env_for(cfg: &ExperimentConfig) -> Result<FiniteCmp> {
    cfg.env.build(RunSeeds::new(cfg.seeds[0]).env)
}

fn configure_threads() -> Result<()> {
    if let Ok(v) = std::env::var("HITGEO_THREADS") {
        let n: usize =
            v.parse().ok().filter(|&n| n >= 1).ok_or_else(|| {
                CliError::Config(format!("HITGEO_THREADS must be >= 1, got `{v}`"))
            })?;
        #[cfg(feature = "parallel")]
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(e.to_string()))?;
        #[cfg(not(feature = "parallel"))]
        let _ = n;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    configure_threads()?;
    let exec = Exec::Parallel;
    let mut stdout = io::stdout().lock();
    match cli.cmd {
        Cmd::GenEnv(c) => {
            let cfg = c.load()?;
            let env = env_for(&cfg)?;
            let mut text = serde_json::to_string_pretty(&env)?;
            text.push('\n');
            fs::write(c.out_file()?, text)?;
        }
        Cmd::Collect(c) => {
            let cfg = c.load()?;
            let env = env_for(&cfg)?;
            let data = cfg
                .dataset
                .collect(&env, RunSeeds::new(cfg.seeds[0]).collect)?;
            data.save(c.out_file()?)?;
            writeln!(
                stdout,
                "{} trajectories, {} transitions",
                data.trajectories.len(),
                data.n_transitions()
            )?;
        }
        Cmd::Train(c) => {
            let cfg = c.load_with_out()?;
            for &seed in &cfg.seeds {
                let (rd, ctx, _) = prepare_run(&cfg, seed)?;
                let mut timing = Timing::default();
                train_run(&rd, &ctx, &mut timing)?;
                writeln!(stdout, "seed {seed}: trained in {}", rd.dir.display())?;
            }
        }
        Cmd::Plan(c) => {
            let cfg = c.load_with_out()?;
            let kinds: Vec<PlannerKind> = match c.planner {
                Some(p) => vec![p],
                None => vec![PlannerKind::AsymGraph, PlannerKind::SymGraph],
            };
            for &seed in &cfg.seeds {
                let (rd, ctx, _) = prepare_run(&cfg, seed)?;
                let model = trained(&rd, &ctx)?;
                for &k in &kinds {
                    for p in dump_graphs(&cfg, k, &rd, &ctx, &model, exec)? {
                        writeln!(stdout, "{}", p.display())?;
                    }
                }
            }
        }
        Cmd::Eval(c) => {
            let cfg = c.load_with_out()?;
            for &seed in &cfg.seeds {
                let (rd, ctx, _) = prepare_run(&cfg, seed)?;
                let model = trained(&rd, &ctx)?;
                let mut timing = Timing::default();
                let s = eval_run(&cfg, &rd, &ctx, &model, seed, exec, &mut timing)?;
                for r in &s.rows {
                    writeln!(
                        stdout,
                        "seed {seed} {:<10} goal {:>4} success {:.3}",
                        r.planner.name(),
                        r.goal,
                        r.success_rate
                    )?;
                }
            }
        }
        Cmd::Verify(v) => {
            let opts = VerifyOptions {
                seed: v.seed,
                chains: v.chains,
                max_states: v.max_states,
                bound_trials: v.bound_trials,
                mc_episodes: v.mc_episodes,
                ..VerifyOptions::default()
            };
            let rows = verify::run_all(&opts, exec)?;
            match &v.out {
                Some(p) => verify::write_csv(&rows, fs::File::create(p)?)?,
                None => verify::write_csv(&rows, &mut stdout)?,
            }
            eprint!("{}", verify::summarize(&rows));
            let failed = rows.iter().filter(|r| !r.pass).count();
            if failed > 0 {
                return Err(CliError::Verification(format!(
                    "{failed} of {} checks",
                    rows.len()
                )));
            }
        }
        Cmd::Report { out } => {
            let agg = report_dir(&out)?;
            write!(stdout, "{}", format_table(&agg))?;
        }
        Cmd::Run(c) => {
            let cfg = c.load_with_out()?;
            let report = run_experiment(&cfg, exec)?;
            write!(stdout, "{}", format_table(&report.aggregate))?;
        }
    }
    Ok(())
}

fn trained(
    rd: &hitgeo_cli::experiment::RunDir,
    ctx: &hitgeo_cli::experiment::RunContext,
) -> Result<hitgeo_core::train::IelModel> {
    match load_latest(rd, ctx)? {
        Some(m) if m.completed == 3 => Ok(m),
        _ => Err(CliError::Config(format!(
            "{} has no fully trained model; run `train` first",
            rd.dir.display()
        ))),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
