use super::{shortest_paths, Coreset, LatentTable, PlanGraph, ShortestPaths};
use crate::train::normalize;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct PlanResult {
    /// State of the next coreset vertex on the path, if any.
    pub next_vertex: Option<usize>,
    /// Graph cost from the localized vertex to the goal vertex.
    pub path_cost: f64,
    pub localized_vertex: usize,
    pub goal_vertex: usize,
}

/// Shortest-path subgoal selection toward one goal over a built graph.
#[derive(Clone, Debug)]
pub struct GraphPlanner {
    members: Vec<usize>,
    goal: usize,
    beta: f64,
    v_goal: usize,
    paths: ShortestPaths,
}

impl GraphPlanner {
    /// Match the goal to its coreset vertex and root shortest paths there.
    pub fn new(
        table: &LatentTable,
        coreset: &Coreset,
        graph: &PlanGraph,
        goal: usize,
        beta: f64,
    ) -> Result<Self> {
        if graph.n() != coreset.len() || coreset.is_empty() {
            return Err(Error::ShapeMismatch(
                "graph does not match the coreset".into(),
            ));
        }
        let v_goal = argmin(coreset.len(), |i| {
            table.score(coreset.members[i], goal, goal, beta)
        });
        let paths = shortest_paths(graph, v_goal)?;
        Ok(Self {
            members: coreset.members.clone(),
            goal,
            beta,
            v_goal,
            paths,
        })
    }

    pub fn goal(&self) -> usize {
        self.goal
    }

    /// One planning step from state `x`: the result and the unit latent
    /// direction for the policy.
    pub fn plan_step(&self, table: &LatentTable, x: usize) -> (PlanResult, Vec<f64>) {
        let g = self.goal;
        let v_curr = argmin(self.members.len(), |i| {
            table.score(x, self.members[i], g, self.beta)
        });
        let v_next = self.paths.next_hop[v_curr];
        let target = match v_next {
            Some(v) if v_curr != self.v_goal => self.members[v],
            _ => g,
        };
        let diff: Vec<f64> = table
            .phi(target)
            .iter()
            .zip(table.phi(x))
            .map(|(t, s)| t - s)
            .collect();
        let result = PlanResult {
            next_vertex: v_next.map(|v| self.members[v]),
            path_cost: self.paths.dist[v_curr],
            localized_vertex: self.members[v_curr],
            goal_vertex: self.members[self.v_goal],
        };
        (result, normalize(&diff))
    }
}

/// Lowest index among minimal values.
fn argmin(n: usize, f: impl Fn(usize) -> f64) -> usize {
    let mut best = 0;
    let mut best_v = f(0);
    for i in 1..n {
        let v = f(i);
        if v < best_v {
            best = i;
            best_v = v;
        }
    }
    best
}

/// Recursive midpoint subgoal: the pool state minimizing the longer of the
/// two symmetric legs, refined toward `x` `depth` times. Recursion stops
/// early once the midpoint is `x` itself.
pub fn rec_mid_plan(
    table: &LatentTable,
    pool: &[usize],
    x: usize,
    g: usize,
    depth: usize,
) -> Result<usize> {
    if depth < 1 {
        return Err(Error::InvalidArgument("depth must be >= 1".into()));
    }
    if pool.is_empty() {
        return Err(Error::TooFewCandidates(0));
    }
    let mut target = g;
    for _ in 0..depth {
        let i = argmin(pool.len(), |i| {
            let m = pool[i];
            table
                .score(x, m, target, 0.0)
                .max(table.score(m, target, target, 0.0))
        });
        let m = pool[i];
        if m == x || table.score(x, m, target, 0.0) == 0.0 {
            break;
        }
        target = m;
    }
    Ok(target)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::par::Exec;
    use crate::planner::{construct_graph, cost_matrix};
    use nalgebra::DMatrix;

    fn line_table(points: &[f64]) -> LatentTable {
        let phi = DMatrix::from_row_slice(1, points.len(), points);
        LatentTable::new(phi.clone(), DMatrix::from_element(1, points.len(), 1.0)).unwrap()
    }

    fn coreset(table: &LatentTable, members: &[usize]) -> Coreset {
        Coreset {
            members: members.to_vec(),
            embeddings: table.phi.select_columns(members.iter()),
            kernel_sigma: 1.0,
        }
    }

    fn planner(table: &LatentTable, cs: &Coreset, goal: usize) -> GraphPlanner {
        let c = cost_matrix(cs, table, goal, 0.1, Exec::Sequential);
        let g = construct_graph(&c, 1).unwrap();
        GraphPlanner::new(table, cs, &g, goal, 0.1).unwrap()
    }

    #[test]
    fn at_goal_vertex_pursues_goal() {
        let t = line_table(&[0.0, 1.0, 2.0, 2.2]);
        let cs = coreset(&t, &[0, 1, 2]);
        let p = planner(&t, &cs, 3);
        let (r, z) = p.plan_step(&t, 2);
        assert_eq!(r.localized_vertex, 2);
        assert_eq!(r.goal_vertex, 2);
        assert!((z[0] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn two_vertex_chain_hops_to_goal() {
        let t = line_table(&[0.0, 1.0]);
        let cs = coreset(&t, &[0, 1]);
        let p = planner(&t, &cs, 1);
        let (r, z) = p.plan_step(&t, 0);
        assert_eq!(r.next_vertex, Some(1));
        assert!(r.path_cost.is_finite());
        assert!(z[0] > 0.99);
    }

    #[test]
    fn three_vertex_line_returns_middle() {
        let t = line_table(&[0.0, 1.0, 2.0]);
        let cs = coreset(&t, &[0, 1, 2]);
        let p = planner(&t, &cs, 2);
        let (r, _) = p.plan_step(&t, 0);
        assert_eq!(r.localized_vertex, 0);
        assert_eq!(r.next_vertex, Some(1));
        let (r, _) = p.plan_step(&t, 1);
        assert_eq!(r.next_vertex, Some(2));
    }

    #[test]
    fn rec_mid_cases() {
        let t = line_table(&[0.0, 1.0, 2.0]);
        assert_eq!(rec_mid_plan(&t, &[0, 1, 2], 0, 2, 1).unwrap(), 1);
        assert_eq!(rec_mid_plan(&t, &[0, 1, 2], 2, 2, 3).unwrap(), 2);
        // two-candidate pool: pick the smaller max leg
        let t = line_table(&[0.0, 0.3, 1.4, 2.0]);
        assert_eq!(rec_mid_plan(&t, &[1, 2], 0, 3, 1).unwrap(), 2);
        assert!(rec_mid_plan(&t, &[1, 2], 0, 3, 0).is_err());
    }

    #[test]
    fn deeper_recursion_moves_toward_start() {
        let pts: Vec<f64> = (0..9).map(|i| i as f64).collect();
        let t = line_table(&pts);
        let pool: Vec<usize> = (0..9).collect();
        assert_eq!(rec_mid_plan(&t, &pool, 0, 8, 1).unwrap(), 4);
        assert_eq!(rec_mid_plan(&t, &pool, 0, 8, 2).unwrap(), 2);
        assert_eq!(rec_mid_plan(&t, &pool, 0, 8, 3).unwrap(), 1);
        assert_eq!(rec_mid_plan(&t, &pool, 0, 8, 4).unwrap(), 1);
    }
}
