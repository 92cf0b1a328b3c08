//! State-block orderings and fill prediction.

use std::collections::BTreeSet;

use super::sparse::SymbolicFactor;
use crate::model::{BlockId, Endpoint, EstimationProblem, OrderingStrategy, StateLayout};

fn block_of(e: &Endpoint) -> BlockId {
    match *e {
        Endpoint::RobotNode { robot, node } => BlockId::Node { robot, node },
        Endpoint::Body(b) => BlockId::Body(b),
    }
}

/// Six-block footprints of every factor: `(state block, part)` with part 0 = pose, 1 = strain.
fn footprints(problem: &EstimationProblem) -> Vec<Vec<(BlockId, usize)>> {
    let mut out = Vec::new();
    for (r, spec) in problem.topology.robots.iter().enumerate() {
        for k in 1..spec.node_count() {
            let a = BlockId::Node { robot: r, node: k - 1 };
            let b = BlockId::Node { robot: r, node: k };
            out.push(vec![(a, 0), (a, 1), (b, 0), (b, 1)]);
        }
    }
    for m in &problem.measurements.pose {
        out.push(vec![(block_of(&m.target), 0)]);
    }
    for m in &problem.measurements.fbg {
        out.push(vec![(BlockId::Node { robot: m.robot, node: m.node }, 1)]);
    }
    for c in &problem.topology.couplings {
        out.push(vec![(block_of(&c.a), 0), (block_of(&c.b), 0)]);
    }
    out
}

/// Symbolic factor of `problem` under a given state-block layout.
pub fn symbolic_for(problem: &EstimationProblem, layout: StateLayout) -> SymbolicFactor {
    let six = |b: &BlockId, part: usize| layout.offset(layout.index_of(b)) / 6 + part;
    let mut edges = Vec::new();
    for fp in footprints(problem) {
        for (i, (a, pa)) in fp.iter().enumerate() {
            for (b, pb) in &fp[..i] {
                edges.push((six(a, *pa), six(b, *pb)));
            }
        }
    }
    SymbolicFactor::new(layout, &edges)
}

/// State-block adjacency in the natural layout.
fn block_graph(problem: &EstimationProblem, layout: &StateLayout) -> Vec<BTreeSet<usize>> {
    let mut adj = vec![BTreeSet::new(); layout.len()];
    for fp in footprints(problem) {
        let idx: Vec<usize> = fp.iter().map(|(b, _)| layout.index_of(b)).collect();
        for &a in &idx {
            for &b in &idx {
                if a != b {
                    adj[a].insert(b);
                }
            }
        }
    }
    adj
}

/// Greedy minimum-degree elimination order on a graph; ties broken by lowest index.
pub fn minimum_degree_order(adj: &[BTreeSet<usize>]) -> Vec<usize> {
    let n = adj.len();
    let mut graph: Vec<BTreeSet<usize>> = adj.to_vec();
    let mut eliminated = vec![false; n];
    let mut order = Vec::with_capacity(n);
    for _ in 0..n {
        let v = (0..n)
            .filter(|&v| !eliminated[v])
            .min_by_key(|&v| (graph[v].len(), v))
            .expect("vertices remain");
        eliminated[v] = true;
        order.push(v);
        let nbrs: Vec<usize> = std::mem::take(&mut graph[v]).into_iter().collect();
        for &a in &nbrs {
            graph[a].remove(&v);
            for &b in &nbrs {
                if a != b {
                    graph[a].insert(b);
                }
            }
        }
    }
    order
}

/// Layout chosen by `strategy`. Minimum degree falls back to the sequential layout when it
/// would predict more fill.
pub fn order_blocks(problem: &EstimationProblem, strategy: OrderingStrategy) -> SymbolicFactor {
    let natural = problem.layout();
    let sequential = symbolic_for(problem, natural.clone());
    match strategy {
        OrderingStrategy::RobotsSequential => sequential,
        OrderingStrategy::MinimumDegree => {
            let perm = minimum_degree_order(&block_graph(problem, &natural));
            let candidate = symbolic_for(problem, natural.permuted(&perm));
            if candidate.fill_count() <= sequential.fill_count() {
                candidate
            } else {
                sequential
            }
        }
    }
}
