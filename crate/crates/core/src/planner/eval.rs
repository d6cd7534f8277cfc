use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{
    construct_graph, construct_undirected_graph, cost_matrix, rec_mid_plan, Coreset, GraphPlanner,
    LatentTable,
};
use crate::env::FiniteCmp;
use crate::par::Exec;
use crate::rng;
use crate::train::{normalize, ActMode, IelModel};
use crate::Result;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlannerKind {
    RecMid,
    SymGraph,
    AsymGraph,
    Direct,
}

impl PlannerKind {
    pub const ALL: [PlannerKind; 4] = [
        PlannerKind::RecMid,
        PlannerKind::SymGraph,
        PlannerKind::AsymGraph,
        PlannerKind::Direct,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PlannerKind::RecMid => "rec_mid",
            PlannerKind::SymGraph => "sym_graph",
            PlannerKind::AsymGraph => "asym_graph",
            PlannerKind::Direct => "direct",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|p| p.name() == s)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalSpec {
    pub goals: Vec<usize>,
    pub episodes: usize,
    pub max_steps: usize,
    pub k: usize,
    pub beta: f64,
    pub rec_mid_depth: usize,
    pub act_mode: ActMode,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub planner: PlannerKind,
    pub goal: usize,
    pub episodes: usize,
    pub successes: usize,
    pub success_rate: f64,
    /// Mean steps over successful episodes; `None` without successes.
    pub mean_steps: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
}

impl EvalReport {
    /// Success rate pooled over all goals of `planner`.
    pub fn success_rate(&self, planner: PlannerKind) -> Option<f64> {
        let (s, e) = self
            .rows
            .iter()
            .filter(|r| r.planner == planner)
            .fold((0, 0), |(s, e), r| (s + r.successes, e + r.episodes));
        (e > 0).then(|| s as f64 / e as f64)
    }
}

enum Steering<'a> {
    Direct,
    RecMid(&'a [usize], usize),
    Graph(GraphPlanner),
}

impl Steering<'_> {
    fn direction(&self, table: &LatentTable, x: usize, g: usize) -> Result<Vec<f64>> {
        let toward = |t: usize| -> Vec<f64> {
            let d: Vec<f64> = table
                .phi(t)
                .iter()
                .zip(table.phi(x))
                .map(|(a, b)| a - b)
                .collect();
            normalize(&d)
        };
        Ok(match self {
            Steering::Direct => toward(g),
            Steering::RecMid(pool, depth) => toward(rec_mid_plan(table, pool, x, g, *depth)?),
            Steering::Graph(p) => p.plan_step(table, x).1,
        })
    }
}

/// Roll out `model`'s policy steered by each planner. Episodes start at
/// uniformly random states and succeed on reaching the goal within
/// `max_steps` actions.
pub fn evaluate(
    env: &FiniteCmp,
    model: &IelModel,
    coreset: &Coreset,
    planners: &[PlannerKind],
    spec: &EvalSpec,
    exec: Exec,
) -> Result<EvalReport> {
    let table = LatentTable::from_model(model)?;
    let sym_graph = if planners.contains(&PlannerKind::SymGraph) {
        // beta = 0 ignores the goal, so one graph serves every goal
        let c = cost_matrix(
            coreset,
            &table,
            spec.goals.first().copied().unwrap_or(0),
            0.0,
            exec,
        );
        Some(construct_undirected_graph(&c, spec.k)?)
    } else {
        None
    };
    let mut rows = Vec::new();
    for &planner in planners {
        for &goal in &spec.goals {
            let steering = match planner {
                PlannerKind::Direct => Steering::Direct,
                PlannerKind::RecMid => Steering::RecMid(&coreset.members, spec.rec_mid_depth),
                PlannerKind::SymGraph => Steering::Graph(GraphPlanner::new(
                    &table,
                    coreset,
                    sym_graph.as_ref().expect("built above"),
                    goal,
                    0.0,
                )?),
                PlannerKind::AsymGraph => {
                    let c = cost_matrix(coreset, &table, goal, spec.beta, exec);
                    let g = construct_graph(&c, spec.k)?;
                    Steering::Graph(GraphPlanner::new(&table, coreset, &g, goal, spec.beta)?)
                }
            };
            let outcomes = exec.map_range(spec.episodes, |e| {
                let stream = format!("eval/{}/{goal}", planner.name());
                let mut r = rng::indexed_stream(spec.seed, &stream, e as u64);
                run_episode(env, model, &table, &steering, goal, spec, &mut r)
            });
            let mut successes = 0;
            let mut steps = 0usize;
            for o in outcomes {
                if let Some(t) = o? {
                    successes += 1;
                    steps += t;
                }
            }
            rows.push(EvalRow {
                planner,
                goal,
                episodes: spec.episodes,
                successes,
                success_rate: if spec.episodes > 0 {
                    successes as f64 / spec.episodes as f64
                } else {
                    0.0
                },
                mean_steps: (successes > 0).then(|| steps as f64 / successes as f64),
            });
        }
    }
    Ok(EvalReport { rows })
}

/// Steps to the goal, or `None` on timeout.
fn run_episode(
    env: &FiniteCmp,
    model: &IelModel,
    table: &LatentTable,
    steering: &Steering<'_>,
    goal: usize,
    spec: &EvalSpec,
    r: &mut rng::StreamRng,
) -> Result<Option<usize>> {
    let mut x = r.random_range(0..env.n_states());
    for t in 0..=spec.max_steps {
        if x == goal {
            return Ok(Some(t));
        }
        if t == spec.max_steps {
            break;
        }
        let z = steering.direction(table, x, goal)?;
        let a = model.act(x, &z, spec.act_mode, r)?;
        x = env.step(x, a, r);
    }
    Ok(None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::make_one_way_gridworld;
    use crate::planner::dpp_greedy_coreset;
    use crate::train::{feature_matrix, FeatureKind, TrainConfig};

    fn setup() -> (FiniteCmp, IelModel, Coreset) {
        let env = make_one_way_gridworld(3, 3, &[], 0.0).unwrap();
        let cfg = TrainConfig {
            latent_dim: 4,
            hidden: vec![8],
            ..TrainConfig::default()
        };
        let m = IelModel::new(feature_matrix(&env, FeatureKind::OneHot).unwrap(), 4, &cfg).unwrap();
        let emb = m.embed_all().unwrap();
        let ids: Vec<usize> = (0..9).collect();
        let cs = dpp_greedy_coreset(&emb, &ids, 5, 1.0).unwrap();
        (env, m, cs)
    }

    fn spec(max_steps: usize) -> EvalSpec {
        EvalSpec {
            goals: vec![0, 8],
            episodes: 40,
            max_steps,
            k: 2,
            beta: 0.1,
            rec_mid_depth: 2,
            act_mode: ActMode::Sample,
            seed: 3,
        }
    }

    #[test]
    fn zero_steps_succeeds_only_at_goal() {
        let (env, m, cs) = setup();
        let rep = evaluate(&env, &m, &cs, &PlannerKind::ALL, &spec(0), Exec::Sequential).unwrap();
        assert_eq!(rep.rows.len(), 8);
        for r in &rep.rows {
            assert!(r.successes < r.episodes);
            if r.successes > 0 {
                assert_eq!(r.mean_steps, Some(0.0));
            }
        }
        let rate = rep.success_rate(PlannerKind::Direct).unwrap();
        assert!(rate < 0.5);
    }

    #[test]
    fn deterministic_and_exec_independent() {
        let (env, m, cs) = setup();
        let a = evaluate(
            &env,
            &m,
            &cs,
            &PlannerKind::ALL,
            &spec(30),
            Exec::Sequential,
        )
        .unwrap();
        let b = evaluate(
            &env,
            &m,
            &cs,
            &PlannerKind::ALL,
            &spec(30),
            Exec::Sequential,
        )
        .unwrap();
        let c = evaluate(&env, &m, &cs, &PlannerKind::ALL, &spec(30), Exec::Parallel).unwrap();
        assert_eq!(a, b);
        assert_eq!(a, c);
    }

    #[test]
    fn planner_names_round_trip() {
        for p in PlannerKind::ALL {
            assert_eq!(PlannerKind::parse(p.name()), Some(p));
            let json = serde_json::to_string(&p).unwrap();
            assert_eq!(json, format!("\"{}\"", p.name()));
        }
        assert_eq!(PlannerKind::parse("dijkstra"), None);
    }
}
