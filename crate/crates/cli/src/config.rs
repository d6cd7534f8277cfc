//! Experiment configuration: one TOML file, sections per stage.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use hitgeo_core::env::{
    make_one_way_gridworld, make_random_digraph_cmp, sample_goal_seeking_trajectories,
    sample_trajectories, Cell, Dataset, FiniteCmp, TabularPolicy,
};
use hitgeo_core::planner::PlannerKind;
use hitgeo_core::rng::derive_seed;
use hitgeo_core::train::{ActMode, TrainConfig};

use crate::error::{CliError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EnvSpec {
    Gridworld {
        width: usize,
        height: usize,
        /// `[[x, y], [x, y]]`: the move from the first cell to the second is
        /// allowed, the reverse is blocked.
        #[serde(default)]
        one_way: Vec<[[usize; 2]; 2]>,
        /// Passages blocked in both directions.
        #[serde(default)]
        walls: Vec<[[usize; 2]; 2]>,
        #[serde(default)]
        slip: f64,
    },
    Digraph {
        n_states: usize,
        n_actions: usize,
        out_degree: usize,
    },
}

impl Default for EnvSpec {
    fn default() -> Self {
        EnvSpec::Gridworld {
            width: 2,
            height: 1,
            one_way: vec![],
            walls: vec![],
            slip: 0.0,
        }
    }
}

impl EnvSpec {
    pub fn build(&self, seed: u64) -> Result<FiniteCmp> {
        let cell = |c: [usize; 2]| -> Cell { (c[0], c[1]) };
        Ok(match self {
            EnvSpec::Gridworld {
                width,
                height,
                one_way,
                walls,
                slip,
            } => {
                let mut edges: Vec<(Cell, Cell)> =
                    one_way.iter().map(|[a, b]| (cell(*a), cell(*b))).collect();
                for [a, b] in walls {
                    edges.push((cell(*a), cell(*b)));
                    edges.push((cell(*b), cell(*a)));
                }
                make_one_way_gridworld(*width, *height, &edges, *slip)?
            }
            EnvSpec::Digraph {
                n_states,
                n_actions,
                out_degree,
            } => make_random_digraph_cmp(*n_states, *n_actions, *out_degree, seed)?,
        })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Behavior {
    #[default]
    Uniform,
    GoalSeeking,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    pub trajectories: usize,
    /// Transitions per trajectory.
    pub length: usize,
    pub behavior: Behavior,
    /// Random-action probability of the goal-seeking behavior.
    pub epsilon: f64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            trajectories: 100,
            length: 50,
            behavior: Behavior::Uniform,
            epsilon: 0.3,
        }
    }
}

impl DatasetSpec {
    pub fn collect(&self, env: &FiniteCmp, seed: u64) -> Result<Dataset> {
        Ok(match self.behavior {
            Behavior::Uniform => {
                let pol = TabularPolicy::uniform(env.n_states(), env.n_actions());
                sample_trajectories(env, &pol, self.trajectories, self.length, seed)?
            }
            Behavior::GoalSeeking => sample_goal_seeking_trajectories(
                env,
                self.epsilon,
                self.trajectories,
                self.length,
                seed,
            )?,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlannerSpec {
    pub planners: Vec<PlannerKind>,
    pub k: usize,
    pub sigma: f64,
    pub beta: f64,
    pub budget: usize,
    pub rec_mid_depth: usize,
}

impl Default for PlannerSpec {
    fn default() -> Self {
        Self {
            planners: PlannerKind::ALL.to_vec(),
            k: 10,
            sigma: 20.0,
            beta: 0.1,
            budget: 256,
            rec_mid_depth: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Explicit goal states. When empty, `n_goals` distinct states (at most
    /// all of them) are drawn per run.
    pub goals: Vec<usize>,
    pub n_goals: usize,
    pub episodes: usize,
    pub max_steps: usize,
    pub act_mode: ActMode,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            goals: vec![],
            n_goals: 4,
            episodes: 50,
            max_steps: 100,
            act_mode: ActMode::Greedy,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// One run per seed. Each run derives its env, collect, train and eval
    /// streams from its seed; `train.seed` is replaced accordingly.
    pub seeds: Vec<u64>,
    pub out: PathBuf,
    pub env: EnvSpec,
    pub dataset: DatasetSpec,
    pub train: TrainConfig,
    pub planner: PlannerSpec,
    pub eval: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seeds: vec![0],
            out: PathBuf::from("runs"),
            env: EnvSpec::default(),
            dataset: DatasetSpec::default(),
            train: TrainConfig::default(),
            planner: PlannerSpec::default(),
            eval: EvalConfig::default(),
        }
    }
}

/// Seeds of the named substreams of one run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RunSeeds {
    pub env: u64,
    pub collect: u64,
    pub train: u64,
    pub eval: u64,
}

impl RunSeeds {
    pub fn new(seed: u64) -> Self {
        Self {
            env: derive_seed(seed, "env"),
            collect: derive_seed(seed, "collect"),
            train: derive_seed(seed, "train"),
            eval: derive_seed(seed, "eval"),
        }
    }
}

fn config_err(e: impl std::fmt::Display) -> CliError {
    CliError::Config(e.to_string())
}

/// Apply `key.path=value` to a TOML table. Values parse as TOML and fall
/// back to plain strings.
pub fn apply_override(table: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override `{spec}` is not key=value")))?;
    let value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::Config(format!("bad override key `{key}`")));
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| CliError::Config(format!("override `{key}`: `{p}` is not a section")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = toml::from_str(text).map_err(config_err)?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: Self = toml::Value::Table(table).try_into().map_err(config_err)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Load `path`, or defaults when `None`, then apply overrides.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p)
                .map_err(|e| CliError::Config(format!("cannot read {}: {e}", p.display())))?,
            None => String::new(),
        };
        Self::from_toml_str(&text, overrides)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Check every section. Builds the environment once to catch bad
    /// layouts and out-of-range goals before any work starts.
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(CliError::Config("seeds must not be empty".into()));
        }
        let mut seen = self.seeds.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != self.seeds.len() {
            return Err(CliError::Config("seeds must be distinct".into()));
        }
        self.train.validate().map_err(config_err)?;
        let d = &self.dataset;
        if d.trajectories == 0 {
            return Err(CliError::Config("dataset.trajectories must be >= 1".into()));
        }
        if d.length <= self.train.h_max {
            return Err(CliError::Config(format!(
                "dataset.length {} must exceed train.h_max {}",
                d.length, self.train.h_max
            )));
        }
        if !(0.0..=1.0).contains(&d.epsilon) {
            return Err(CliError::Config(
                "dataset.epsilon must lie in [0, 1]".into(),
            ));
        }
        let p = &self.planner;
        if p.planners.is_empty() {
            return Err(CliError::Config(
                "planner.planners must not be empty".into(),
            ));
        }
        if p.k < 1 {
            return Err(CliError::Config("planner.k must be >= 1".into()));
        }
        if p.budget < 2 {
            return Err(CliError::Config("planner.budget must be >= 2".into()));
        }
        if !(p.sigma > 0.0 && p.sigma.is_finite()) {
            return Err(CliError::Config("planner.sigma must be > 0".into()));
        }
        if !(p.beta >= 0.0 && p.beta.is_finite()) {
            return Err(CliError::Config("planner.beta must be >= 0".into()));
        }
        if p.rec_mid_depth < 1 {
            return Err(CliError::Config(
                "planner.rec_mid_depth must be >= 1".into(),
            ));
        }
        let e = &self.eval;
        if e.episodes == 0 {
            return Err(CliError::Config("eval.episodes must be >= 1".into()));
        }
        let env = self
            .env
            .build(0)
            .map_err(|err| CliError::Config(format!("env: {err}")))?;
        let n = env.n_states();
        if let Some(&g) = e.goals.iter().find(|&&g| g >= n) {
            return Err(CliError::Config(format!(
                "eval goal {g} out of range for {n} states"
            )));
        }
        if e.goals.is_empty() && e.n_goals == 0 {
            return Err(CliError::Config("eval.n_goals must be >= 1".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_is_defaults() {
        let cfg = ExperimentConfig::from_toml_str("", &[]).unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
        assert_eq!(cfg.train.gamma, 0.99);
        assert_eq!(cfg.planner.sigma, 20.0);
        assert_eq!(cfg.planner.budget, 256);
        assert_eq!(cfg.train.phase_steps, [200, 4800, 5000]);
    }

    #[test]
    fn unknown_keys_rejected() {
        for text in [
            "bogus = 1",
            "[train]\nlearning_rate = 0.1",
            "[eval]\nepisode = 3",
        ] {
            let e = ExperimentConfig::from_toml_str(text, &[]).unwrap_err();
            assert!(matches!(e, CliError::Config(_)), "{text}: {e}");
        }
    }

    #[test]
    fn overrides_reach_nested_keys() {
        let o = vec![
            "train.latent_dim=8".to_string(),
            "planner.planners=[\"direct\"]".to_string(),
            "out=somewhere".to_string(),
            "eval.act_mode=sample".to_string(),
        ];
        let cfg = ExperimentConfig::from_toml_str("", &o).unwrap();
        assert_eq!(cfg.train.latent_dim, 8);
        assert_eq!(cfg.planner.planners, vec![PlannerKind::Direct]);
        assert_eq!(cfg.out, PathBuf::from("somewhere"));
        assert_eq!(cfg.eval.act_mode, ActMode::Sample);
        assert!(ExperimentConfig::from_toml_str("", &["nokey".into()]).is_err());
        assert!(ExperimentConfig::from_toml_str("", &["train.nope=1".into()]).is_err());
    }

    #[test]
    fn snapshot_round_trips() {
        let text = r#"
            seeds = [3, 4]
            [env]
            kind = "gridworld"
            width = 3
            height = 3
            walls = [[[0, 0], [1, 0]]]
            one_way = [[[1, 1], [2, 1]]]
            slip = 0.1
            [train]
            latent_dim = 6
            lr = 1e-3
        "#;
        let cfg = ExperimentConfig::from_toml_str(text, &[]).unwrap();
        let back = ExperimentConfig::from_toml_str(&cfg.to_toml(), &[]).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn validation_catches_bad_values() {
        let bad = [
            "seeds = []",
            "seeds = [1, 1]",
            "[dataset]\nlength = 5",
            "[planner]\nbudget = 1",
            "[planner]\nsigma = 0.0",
            "[eval]\ngoals = [7]",
            "[env]\nkind = \"gridworld\"\nwidth = 1\nheight = 1",
            "[train]\ngamma = 1.5",
        ];
        for text in bad {
            assert!(
                ExperimentConfig::from_toml_str(text, &[]).is_err(),
                "{text}"
            );
        }
    }

    #[test]
    fn run_seeds_differ_by_stream() {
        let s = RunSeeds::new(5);
        assert_ne!(s.env, s.collect);
        assert_ne!(s.train, s.eval);
        assert_eq!(s, RunSeeds::new(5));
    }
}
