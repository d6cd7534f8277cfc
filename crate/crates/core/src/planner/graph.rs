use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::io::Write;

use nalgebra::DMatrix;

use super::{Coreset, LatentTable};
use crate::par::Exec;
use crate::{Error, Result};

/// Pairwise directed scores between coreset vertices for one goal.
#[derive(Clone, Debug, PartialEq)]
pub struct CostMatrix {
    pub c: DMatrix<f64>,
    pub goal: usize,
    pub beta: f64,
}

impl CostMatrix {
    pub fn n(&self) -> usize {
        self.c.nrows()
    }
}

/// `c[i][j] = d(x_i, x_j, g)`, rows computed independently.
pub fn cost_matrix(
    coreset: &Coreset,
    table: &LatentTable,
    goal: usize,
    beta: f64,
    exec: Exec,
) -> CostMatrix {
    let m = coreset.len();
    let rows = exec.map_range(m, |i| {
        (0..m)
            .map(|j| {
                if i == j {
                    0.0
                } else {
                    table.score(coreset.members[i], coreset.members[j], goal, beta)
                }
            })
            .collect::<Vec<f64>>()
    });
    CostMatrix {
        c: DMatrix::from_fn(m, m, |i, j| rows[i][j]),
        goal,
        beta,
    }
}

/// Sparse directed planning graph. `out[v]` lists `(w, cost)` sorted by `w`.
#[derive(Clone, Debug, PartialEq)]
pub struct PlanGraph {
    pub out: Vec<Vec<(usize, f64)>>,
    /// Spanning-tree edges `(u, v)` with `u < v`, present in both directions.
    pub mst_edges: Vec<(usize, usize)>,
    pub k: usize,
}

impl PlanGraph {
    pub fn n(&self) -> usize {
        self.out.len()
    }

    pub fn n_edges(&self) -> usize {
        self.out.iter().map(Vec::len).sum()
    }

    pub fn edge(&self, u: usize, v: usize) -> Option<f64> {
        self.out[u]
            .binary_search_by_key(&v, |e| e.0)
            .ok()
            .map(|i| self.out[u][i].1)
    }

    /// Edge-reversed adjacency, for shortest paths rooted at a goal.
    pub fn reversed(&self) -> Vec<Vec<(usize, f64)>> {
        let mut rev = vec![Vec::new(); self.n()];
        for (u, edges) in self.out.iter().enumerate() {
            for &(v, c) in edges {
                rev[v].push((u, c));
            }
        }
        rev
    }

    /// `src dst cost` lines, vertices named by `names`.
    pub fn write_edge_list<W: Write>(&self, names: &[usize], w: &mut W) -> Result<()> {
        writeln!(w, "# src dst cost")?;
        for (u, edges) in self.out.iter().enumerate() {
            for &(v, c) in edges {
                writeln!(w, "{} {} {:e}", names[u], names[v], c)?;
            }
        }
        Ok(())
    }

    fn from_edges(
        n: usize,
        mut edges: Vec<(usize, usize, f64)>,
        mst: Vec<(usize, usize)>,
        k: usize,
    ) -> Self {
        edges.sort_by_key(|e| (e.0, e.1));
        edges.dedup_by(|a, b| a.0 == b.0 && a.1 == b.1);
        let mut out = vec![Vec::new(); n];
        for (u, v, c) in edges {
            out[u].push((v, c));
        }
        Self {
            out,
            mst_edges: mst,
            k,
        }
    }
}

/// Prim's algorithm on a dense symmetric matrix; ties go to the lowest index.
fn prim(sym: &DMatrix<f64>) -> Vec<(usize, usize)> {
    let n = sym.nrows();
    let mut in_tree = vec![false; n];
    let mut best = vec![f64::INFINITY; n];
    let mut parent = vec![usize::MAX; n];
    let mut edges = Vec::with_capacity(n.saturating_sub(1));
    if n == 0 {
        return edges;
    }
    best[0] = 0.0;
    for _ in 0..n {
        let mut u = usize::MAX;
        for v in 0..n {
            if !in_tree[v] && (u == usize::MAX || best[v] < best[u]) {
                u = v;
            }
        }
        in_tree[u] = true;
        if parent[u] != usize::MAX {
            let p = parent[u];
            edges.push((p.min(u), p.max(u)));
        }
        for v in 0..n {
            if !in_tree[v] && sym[(u, v)] < best[v] {
                best[v] = sym[(u, v)];
                parent[v] = u;
            }
        }
    }
    edges.sort_unstable();
    edges
}

/// Per-row `k` nearest targets plus the spanning tree of `(c + c^T) / 2`
/// forced in both directions with the asymmetric costs.
pub fn construct_graph(cost: &CostMatrix, k: usize) -> Result<PlanGraph> {
    if k < 1 {
        return Err(Error::InvalidArgument("k must be >= 1".into()));
    }
    let c = &cost.c;
    let n = c.nrows();
    let sym = (c + c.transpose()) * 0.5;
    let mst = prim(&sym);
    let mut edges = Vec::new();
    for i in 0..n {
        let mut row: Vec<usize> = (0..n).filter(|&j| j != i).collect();
        row.sort_by(|&a, &b| c[(i, a)].total_cmp(&c[(i, b)]).then(a.cmp(&b)));
        for &j in row.iter().take(k) {
            edges.push((i, j, c[(i, j)]));
        }
    }
    for &(u, v) in &mst {
        edges.push((u, v, c[(u, v)]));
        edges.push((v, u, c[(v, u)]));
    }
    Ok(PlanGraph::from_edges(n, edges, mst, k))
}

/// The same construction on `(c + c^T) / 2`, giving a goal-agnostic graph
/// with symmetric costs.
pub fn construct_undirected_graph(cost: &CostMatrix, k: usize) -> Result<PlanGraph> {
    let sym = CostMatrix {
        c: (&cost.c + cost.c.transpose()) * 0.5,
        ..cost.clone()
    };
    let g = construct_graph(&sym, k)?;
    // symmetric closure: an edge kept in one direction is usable both ways
    let mut edges = Vec::new();
    for (u, es) in g.out.iter().enumerate() {
        for &(v, w) in es {
            edges.push((u, v, w));
            edges.push((v, u, w));
        }
    }
    Ok(PlanGraph::from_edges(g.n(), edges, g.mst_edges, k))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ShortestPaths {
    pub source: usize,
    /// Cost to reach the source along forward edges.
    pub dist: Vec<f64>,
    /// First hop from each vertex toward the source.
    pub next_hop: Vec<Option<usize>>,
}

#[derive(PartialEq)]
struct Entry(f64, usize);

impl Eq for Entry {}

impl Ord for Entry {
    fn cmp(&self, other: &Self) -> Ordering {
        // min-heap on (dist, vertex)
        other
            .0
            .total_cmp(&self.0)
            .then_with(|| other.1.cmp(&self.1))
    }
}

impl PartialOrd for Entry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Dijkstra from `source` on the reversed graph.
pub fn shortest_paths(graph: &PlanGraph, source: usize) -> Result<ShortestPaths> {
    let n = graph.n();
    if source >= n {
        return Err(Error::InvalidArgument(format!(
            "source {source} outside graph of {n}"
        )));
    }
    if graph
        .out
        .iter()
        .flatten()
        .any(|e| e.1.is_nan() || e.1 < 0.0)
    {
        return Err(Error::InvalidArgument(
            "edge costs must be nonnegative".into(),
        ));
    }
    let rev = graph.reversed();
    let mut dist = vec![f64::INFINITY; n];
    let mut next_hop = vec![None; n];
    let mut done = vec![false; n];
    let mut heap = BinaryHeap::new();
    dist[source] = 0.0;
    heap.push(Entry(0.0, source));
    while let Some(Entry(d, v)) = heap.pop() {
        if done[v] {
            continue;
        }
        done[v] = true;
        for &(u, c) in &rev[v] {
            let nd = d + c;
            if !done[u] && nd < dist[u] {
                dist[u] = nd;
                next_hop[u] = Some(v);
                heap.push(Entry(nd, u));
            }
        }
    }
    Ok(ShortestPaths {
        source,
        dist,
        next_hop,
    })
}
