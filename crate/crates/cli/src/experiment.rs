//! Full pipeline per seed: env, dataset, three training phases, evaluation.
//!
//! Run directory layout (`<out>/seed_<n>/`):
//!
//! ```text
//! config.toml            snapshot; different env/dataset/train refuses to resume
//! env.json               the generated environment
//! dataset.hgd            HITGEO-DS binary dataset
//! ckpt_<phase>.hgc       HITGEO-CKPT after each completed phase
//! losses_<phase>.csv     step, td_term, hit_term, nce, policy, wall_ms
//! eval.csv               planner, goal, episodes, successes, success_rate, mean_steps
//! summary.json           machine-readable run summary
//! timing.json            wall-clock per stage (not deterministic)
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use hitgeo_core::diffkit::{load_checkpoint, save_checkpoint};
use hitgeo_core::env::{Dataset, FiniteCmp};
use hitgeo_core::par::Exec;
use hitgeo_core::planner::{
    construct_graph, construct_undirected_graph, cost_matrix, dpp_greedy_coreset, evaluate,
    Coreset, EvalRow, EvalSpec, LatentTable, PlanGraph, PlannerKind,
};
use hitgeo_core::rng;
use hitgeo_core::train::{feature_matrix, train_phase, IelModel, Phase, StepLog, TrainConfig};

use crate::config::{ExperimentConfig, RunSeeds};
use crate::error::{CliError, Result};
use crate::report::{aggregate, write_aggregate, Aggregate};

pub const SUMMARY_VERSION: u32 = 1;

pub struct RunDir {
    pub dir: PathBuf,
}

impl RunDir {
    pub fn new(out: &Path, seed: u64) -> Self {
        Self {
            dir: out.join(format!("seed_{seed}")),
        }
    }

    pub fn config(&self) -> PathBuf {
        self.dir.join("config.toml")
    }
    pub fn env(&self) -> PathBuf {
        self.dir.join("env.json")
    }
    pub fn dataset(&self) -> PathBuf {
        self.dir.join("dataset.hgd")
    }
    pub fn checkpoint(&self, phase: Phase) -> PathBuf {
        self.dir.join(format!("ckpt_{}.hgc", phase.name()))
    }
    pub fn losses(&self, phase: Phase) -> PathBuf {
        self.dir.join(format!("losses_{}.csv", phase.name()))
    }
    pub fn eval_csv(&self) -> PathBuf {
        self.dir.join("eval.csv")
    }
    pub fn summary(&self) -> PathBuf {
        self.dir.join("summary.json")
    }
    pub fn timing(&self) -> PathBuf {
        self.dir.join("timing.json")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub format_version: u32,
    pub seed: u64,
    pub env_seed: u64,
    pub collect_seed: u64,
    pub train_seed: u64,
    pub eval_seed: u64,
    pub env_fingerprint: String,
    pub n_states: usize,
    pub dataset_transitions: usize,
    pub coreset: Vec<usize>,
    pub goals: Vec<usize>,
    pub rows: Vec<EvalRow>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    /// Phase name to milliseconds, only for phases trained in this call.
    pub phases_ms: BTreeMap<String, f64>,
    pub eval_ms: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentReport {
    pub runs: Vec<RunSummary>,
    pub aggregate: Vec<Aggregate>,
}

/// Everything a run needs besides training state.
pub struct RunContext {
    pub seeds: RunSeeds,
    pub env: FiniteCmp,
    pub data: Dataset,
    pub train: TrainConfig,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| CliError::Parse {
        path: path.display().to_string(),
        msg: e.to_string(),
    })
}

/// Sections that determine the trained model.
fn training_snapshot(cfg: &ExperimentConfig) -> String {
    #[derive(Serialize)]
    struct Part<'a> {
        env: &'a crate::config::EnvSpec,
        dataset: &'a crate::config::DatasetSpec,
        train: &'a TrainConfig,
    }
    toml::to_string(&Part {
        env: &cfg.env,
        dataset: &cfg.dataset,
        train: &cfg.train,
    })
    .expect("config serializes")
}

/// Create the run directory, snapshot the config and materialize env and
/// dataset (reusing a stored dataset when present).
///
/// A directory trained under different env, dataset or train sections is
/// refused. The returned flag is true when the stored snapshot matched the
/// whole config, so stored evaluation results are still valid.
pub fn prepare_run(cfg: &ExperimentConfig, seed: u64) -> Result<(RunDir, RunContext, bool)> {
    let rd = RunDir::new(&cfg.out, seed);
    fs::create_dir_all(&rd.dir)?;
    let snapshot = cfg.to_toml();
    let unchanged = match fs::read_to_string(rd.config()) {
        Ok(old) => {
            let old_cfg = ExperimentConfig::from_toml_str(&old, &[])?;
            if training_snapshot(&old_cfg) != training_snapshot(cfg) {
                return Err(CliError::Config(format!(
                    "{} holds a run trained under a different config",
                    rd.dir.display()
                )));
            }
            old == snapshot
        }
        Err(_) => false,
    };
    if !unchanged {
        fs::write(rd.config(), &snapshot)?;
    }
    let seeds = RunSeeds::new(seed);
    let env = cfg.env.build(seeds.env)?;
    write_json(&rd.env(), &env)?;
    let data = if rd.dataset().exists() {
        let d = Dataset::load(&rd.dataset())?;
        d.validate_against(&env)?;
        d
    } else {
        let d = cfg.dataset.collect(&env, seeds.collect)?;
        d.save(&rd.dataset())?;
        d
    };
    let train = TrainConfig {
        seed: seeds.train,
        ..cfg.train.clone()
    };
    Ok((
        rd,
        RunContext {
            seeds,
            env,
            data,
            train,
        },
        unchanged,
    ))
}

/// Latest completed phase checkpoint, if any.
pub fn load_latest(rd: &RunDir, ctx: &RunContext) -> Result<Option<IelModel>> {
    for phase in Phase::ALL.iter().rev() {
        let path = rd.checkpoint(*phase);
        if path.exists() {
            let features = feature_matrix(&ctx.env, ctx.train.features)?;
            let records = load_checkpoint(&path)?;
            return Ok(Some(IelModel::from_records(
                features,
                records,
                phase.index() + 1,
            )?));
        }
    }
    Ok(None)
}

fn write_losses(path: &Path, logs: &[StepLog]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["step", "td_term", "hit_term", "nce", "policy", "wall_ms"])?;
    let cell = |v: Option<f64>| v.map(|x| format!("{x:e}")).unwrap_or_default();
    for l in logs {
        w.write_record([
            l.step.to_string(),
            cell(l.td_term),
            cell(l.hit_term),
            cell(l.nce),
            cell(l.policy),
            format!("{:.3}", l.wall_ms),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Train the remaining phases, checkpointing after each.
pub fn train_run(rd: &RunDir, ctx: &RunContext, timing: &mut Timing) -> Result<IelModel> {
    let mut model = match load_latest(rd, ctx)? {
        Some(m) => m,
        None => {
            let features = feature_matrix(&ctx.env, ctx.train.features)?;
            IelModel::new(features, ctx.env.n_actions(), &ctx.train)?
        }
    };
    for phase in Phase::ALL.into_iter().skip(model.completed) {
        let t0 = Instant::now();
        let logs = train_phase(phase, &mut model, &ctx.data, &ctx.train)?;
        timing
            .phases_ms
            .insert(phase.name().into(), t0.elapsed().as_secs_f64() * 1e3);
        write_losses(&rd.losses(phase), &logs)?;
        save_checkpoint(&rd.checkpoint(phase), &model.records())?;
    }
    Ok(model)
}

/// DPP coreset over the embeddings of every state seen in the dataset.
pub fn build_coreset(
    cfg: &ExperimentConfig,
    table: &LatentTable,
    data: &Dataset,
) -> Result<Coreset> {
    let ids = data.distinct_states();
    let emb = table.phi.select_columns(ids.iter());
    Ok(dpp_greedy_coreset(
        &emb,
        &ids,
        cfg.planner.budget,
        cfg.planner.sigma,
    )?)
}

/// Configured goals, or `n_goals` distinct states from the eval stream.
pub fn eval_goals(cfg: &ExperimentConfig, n_states: usize, eval_seed: u64) -> Vec<usize> {
    if !cfg.eval.goals.is_empty() {
        return cfg.eval.goals.clone();
    }
    let mut r = rng::stream(eval_seed, "goals");
    let mut goals = sample(&mut r, n_states, cfg.eval.n_goals.min(n_states)).into_vec();
    goals.sort_unstable();
    goals
}

fn write_eval_csv(path: &Path, rows: &[EvalRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "planner",
        "goal",
        "episodes",
        "successes",
        "success_rate",
        "mean_steps",
    ])?;
    for r in rows {
        w.write_record([
            r.planner.name().to_string(),
            r.goal.to_string(),
            r.episodes.to_string(),
            r.successes.to_string(),
            format!("{}", r.success_rate),
            r.mean_steps.map(|m| format!("{m}")).unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Evaluate a trained model with the configured planners and write the
/// eval CSV and summary.
pub fn eval_run(
    cfg: &ExperimentConfig,
    rd: &RunDir,
    ctx: &RunContext,
    model: &IelModel,
    seed: u64,
    exec: Exec,
    timing: &mut Timing,
) -> Result<RunSummary> {
    let t0 = Instant::now();
    let table = LatentTable::from_model(model)?;
    let coreset = build_coreset(cfg, &table, &ctx.data)?;
    let goals = eval_goals(cfg, ctx.env.n_states(), ctx.seeds.eval);
    let spec = EvalSpec {
        goals: goals.clone(),
        episodes: cfg.eval.episodes,
        max_steps: cfg.eval.max_steps,
        k: cfg.planner.k,
        beta: cfg.planner.beta,
        rec_mid_depth: cfg.planner.rec_mid_depth,
        act_mode: cfg.eval.act_mode,
        seed: ctx.seeds.eval,
    };
    let report = evaluate(
        &ctx.env,
        model,
        &coreset,
        &cfg.planner.planners,
        &spec,
        exec,
    )?;
    timing.eval_ms = Some(t0.elapsed().as_secs_f64() * 1e3);
    write_eval_csv(&rd.eval_csv(), &report.rows)?;
    let summary = RunSummary {
        format_version: SUMMARY_VERSION,
        seed,
        env_seed: ctx.seeds.env,
        collect_seed: ctx.seeds.collect,
        train_seed: ctx.seeds.train,
        eval_seed: ctx.seeds.eval,
        env_fingerprint: format!("{:016x}", ctx.env.fingerprint()),
        n_states: ctx.env.n_states(),
        dataset_transitions: ctx.data.n_transitions(),
        coreset: coreset.members.clone(),
        goals,
        rows: report.rows,
    };
    write_json(&rd.summary(), &summary)?;
    Ok(summary)
}

/// One seed end to end. Completed phases and an existing evaluation are
/// reused, so an interrupted run resumes where it stopped. Evaluation reruns
/// when its outputs are missing or the planner/eval sections changed.
pub fn run_seed(cfg: &ExperimentConfig, seed: u64, exec: Exec) -> Result<RunSummary> {
    let (rd, ctx, unchanged) = prepare_run(cfg, seed)?;
    let mut timing = Timing::default();
    let model = train_run(&rd, &ctx, &mut timing)?;
    let summary = if unchanged && rd.eval_csv().exists() && rd.summary().exists() {
        read_json(&rd.summary())?
    } else {
        eval_run(cfg, &rd, &ctx, &model, seed, exec, &mut timing)?
    };
    write_json(&rd.timing(), &timing)?;
    Ok(summary)
}

/// Run every seed (in parallel when `exec` allows) and aggregate.
pub fn run_experiment(cfg: &ExperimentConfig, exec: Exec) -> Result<ExperimentReport> {
    cfg.validate()?;
    fs::create_dir_all(&cfg.out)?;
    let runs = exec
        .map_slice(&cfg.seeds, |&s| run_seed(cfg, s, exec))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let aggregate = aggregate(&runs);
    write_aggregate(&cfg.out, &aggregate)?;
    Ok(ExperimentReport { runs, aggregate })
}

/// Build the graph a graph planner would use for `goal`.
pub fn planning_graph(
    cfg: &ExperimentConfig,
    kind: PlannerKind,
    table: &LatentTable,
    coreset: &Coreset,
    goal: usize,
    exec: Exec,
) -> Result<PlanGraph> {
    match kind {
        PlannerKind::AsymGraph => {
            let c = cost_matrix(coreset, table, goal, cfg.planner.beta, exec);
            Ok(construct_graph(&c, cfg.planner.k)?)
        }
        PlannerKind::SymGraph => {
            let c = cost_matrix(coreset, table, goal, 0.0, exec);
            Ok(construct_undirected_graph(&c, cfg.planner.k)?)
        }
        other => Err(CliError::Config(format!(
            "planner {} builds no graph",
            other.name()
        ))),
    }
}

/// Dump `graph_<planner>_goal<g>.txt` edge lists for every eval goal.
pub fn dump_graphs(
    cfg: &ExperimentConfig,
    kind: PlannerKind,
    rd: &RunDir,
    ctx: &RunContext,
    model: &IelModel,
    exec: Exec,
) -> Result<Vec<PathBuf>> {
    let table = LatentTable::from_model(model)?;
    let coreset = build_coreset(cfg, &table, &ctx.data)?;
    let mut written = Vec::new();
    for goal in eval_goals(cfg, ctx.env.n_states(), ctx.seeds.eval) {
        let g = planning_graph(cfg, kind, &table, &coreset, goal, exec)?;
        let path = rd.dir.join(format!("graph_{}_goal{goal}.txt", kind.name()));
        let mut f = std::io::BufWriter::new(fs::File::create(&path)?);
        g.write_edge_list(&coreset.members, &mut f)?;
        written.push(path);
    }
    Ok(written)
}
