//! Non-learning references: dynamic nearest neighbor, exact oracles and a
//! uniformly random policy.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::instances::{edge_cost, tour_cost, valid_actions, DynamicInstance, ProblemKind, RolloutState, Solution};
use crate::rng::{stream_rng, streams};

/// Largest TSP the dynamic program accepts.
pub const DP_MAX_NODES: usize = 16;
pub const BRUTE_TSP_MAX_NODES: usize = 9;
pub const BRUTE_VRP_MAX_NODES: usize = 6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleResult {
    pub order: Vec<usize>,
    pub cost: f64,
    pub optimal: bool,
    pub nodes_expanded: u64,
}

impl OracleResult {
    pub fn to_solution(&self, inst: &DynamicInstance) -> Solution {
        Solution::evaluate(inst, self.order.clone(), None)
    }
}

fn require_tsp(inst: &DynamicInstance, what: &str) -> Result<()> {
    if inst.kind != ProblemKind::Tsp {
        return Err(Error::param(format!("{what} is defined for TSP instances only")));
    }
    Ok(())
}

/// Starts at node 0 and always moves to the unvisited node that is cheapest
/// to reach at the next time step.
pub fn nearest_neighbor_dynamic(inst: &DynamicInstance) -> Result<Solution> {
    require_tsp(inst, "nearest neighbor")?;
    let n = inst.n();
    let mut visited = vec![false; n];
    let mut order = vec![0];
    visited[0] = true;
    while order.len() < n {
        let t = order.len() - 1;
        let cur = order[t];
        let next = (0..n)
            .filter(|&j| !visited[j])
            .map(|j| (j, edge_cost(inst, cur, j, t)))
            .fold(None, |best: Option<(usize, f64)>, (j, c)| match best {
                Some((_, bc)) if bc <= c => best,
                _ => Some((j, c)),
            })
            .expect("an unvisited node remains")
            .0;
        visited[next] = true;
        order.push(next);
    }
    Ok(Solution::evaluate(inst, order, None))
}

/// Held-Karp over (visited set, last node). The node placed `k`-th is
/// visited at time `k`, so the state determines all future costs.
pub fn exact_dp_tsp_from(inst: &DynamicInstance, start: usize) -> Result<OracleResult> {
    require_tsp(inst, "the exact dynamic program")?;
    let n = inst.n();
    if n > DP_MAX_NODES {
        return Err(Error::Capacity(format!(
            "dynamic program supports at most {DP_MAX_NODES} nodes, got {n}"
        )));
    }
    inst.check_node(start)?;
    if n == 1 {
        return Ok(OracleResult {
            order: vec![start],
            cost: 0.0,
            optimal: true,
            nodes_expanded: 1,
        });
    }
    // Subsets range over the nodes other than `start`, relabelled 0..m.
    let others: Vec<usize> = (0..n).filter(|&i| i != start).collect();
    let m = others.len();
    let full = 1usize << m;
    let mut best = vec![f64::INFINITY; full * m];
    let mut parent = vec![u8::MAX; full * m];
    for (a, &node) in others.iter().enumerate() {
        best[(1 << a) * m + a] = edge_cost(inst, start, node, 0);
    }
    let mut expanded = 0u64;
    for set in 1..full {
        let t = set.count_ones() as usize;
        for last in (0..m).filter(|&a| set & (1 << a) != 0) {
            let here = best[set * m + last];
            if !here.is_finite() {
                continue;
            }
            expanded += 1;
            for next in (0..m).filter(|&b| set & (1 << b) == 0) {
                let c = here + edge_cost(inst, others[last], others[next], t);
                let idx = (set | (1 << next)) * m + next;
                if c < best[idx] {
                    best[idx] = c;
                    parent[idx] = last as u8;
                }
            }
        }
    }
    let done = full - 1;
    let (mut last, cost) = (0..m)
        .map(|a| (a, best[done * m + a] + edge_cost(inst, others[a], start, n - 1)))
        .fold((0, f64::INFINITY), |acc, x| if x.1 < acc.1 { x } else { acc });
    let mut rev = Vec::with_capacity(n);
    let mut set = done;
    loop {
        rev.push(others[last]);
        let p = parent[set * m + last];
        set &= !(1 << last);
        if p == u8::MAX {
            break;
        }
        last = p as usize;
    }
    rev.push(start);
    rev.reverse();
    Ok(OracleResult {
        order: rev,
        cost,
        optimal: true,
        nodes_expanded: expanded,
    })
}

/// Optimal tour starting at node 0.
pub fn exact_dp_tsp(inst: &DynamicInstance) -> Result<OracleResult> {
    exact_dp_tsp_from(inst, 0)
}

/// Optimal tour over every choice of start node.
pub fn exact_dp_tsp_any_start(inst: &DynamicInstance) -> Result<OracleResult> {
    let mut best: Option<OracleResult> = None;
    let mut expanded = 0;
    for s in 0..inst.n() {
        let r = exact_dp_tsp_from(inst, s)?;
        expanded += r.nodes_expanded;
        if best.as_ref().is_none_or(|b| r.cost < b.cost) {
            best = Some(r);
        }
    }
    let mut best = best.ok_or_else(|| Error::param("instance has no nodes"))?;
    best.nodes_expanded = expanded;
    Ok(best)
}

/// Exhaustive search. TSP: every tour starting at node 0 (`n <= 9`).
/// VRP: every feasible route of at most `max_depth` positions (`n <= 6`,
/// `max_depth <= 2n + 2`; defaults to `2n + 2`).
pub fn brute_force(inst: &DynamicInstance, max_depth: Option<usize>) -> Result<OracleResult> {
    let n = inst.n();
    match inst.kind {
        ProblemKind::Tsp => {
            if n > BRUTE_TSP_MAX_NODES {
                return Err(Error::Capacity(format!(
                    "TSP enumeration supports at most {BRUTE_TSP_MAX_NODES} nodes, got {n}"
                )));
            }
            let mut order: Vec<usize> = (0..n).collect();
            let mut best = (f64::INFINITY, order.clone());
            let mut count = 0;
            permute(&mut order, 1, &mut |o| {
                count += 1;
                let c = tour_cost(inst, o);
                if c < best.0 {
                    best = (c, o.to_vec());
                }
            });
            Ok(OracleResult {
                order: best.1,
                cost: best.0,
                optimal: true,
                nodes_expanded: count,
            })
        }
        ProblemKind::Vrp => {
            let bound = 2 * n + 2;
            let depth = max_depth.unwrap_or(bound);
            if n > BRUTE_VRP_MAX_NODES || depth > bound {
                return Err(Error::Capacity(format!(
                    "VRP enumeration supports n <= {BRUTE_VRP_MAX_NODES} and depth <= 2n+2, got n={n}, depth={depth}"
                )));
            }
            let mut search = VrpSearch {
                inst,
                depth,
                best: None,
                expanded: 0,
            };
            search.dfs(&mut RolloutState::initial(inst))?;
            let (cost, order) = search
                .best
                .ok_or_else(|| Error::Invariant(format!("no feasible route within {depth} positions")))?;
            Ok(OracleResult {
                order,
                cost,
                optimal: true,
                nodes_expanded: search.expanded,
            })
        }
    }
}

/// Exhaustive TSP search over every start node.
pub fn brute_force_any_start(inst: &DynamicInstance) -> Result<OracleResult> {
    require_tsp(inst, "start-free enumeration")?;
    let n = inst.n();
    if n > BRUTE_TSP_MAX_NODES {
        return Err(Error::Capacity(format!(
            "TSP enumeration supports at most {BRUTE_TSP_MAX_NODES} nodes, got {n}"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut best = (f64::INFINITY, order.clone());
    let mut count = 0;
    permute(&mut order, 0, &mut |o| {
        count += 1;
        let c = tour_cost(inst, o);
        if c < best.0 {
            best = (c, o.to_vec());
        }
    });
    Ok(OracleResult {
        order: best.1,
        cost: best.0,
        optimal: true,
        nodes_expanded: count,
    })
}

fn permute(items: &mut [usize], k: usize, visit: &mut dyn FnMut(&[usize])) {
    if k + 1 >= items.len() {
        visit(items);
        return;
    }
    for i in k..items.len() {
        items.swap(k, i);
        permute(items, k + 1, visit);
        items.swap(k, i);
    }
}

struct VrpSearch<'a> {
    inst: &'a DynamicInstance,
    depth: usize,
    best: Option<(f64, Vec<usize>)>,
    expanded: u64,
}

impl VrpSearch<'_> {
    fn dfs(&mut self, state: &mut RolloutState) -> Result<()> {
        self.expanded += 1;
        if state.is_complete(self.inst) {
            let c = tour_cost(self.inst, &state.order);
            if self.best.as_ref().is_none_or(|(b, _)| c < *b) {
                self.best = Some((c, state.order.clone()));
            }
            return Ok(());
        }
        if state.order.len() >= self.depth {
            return Ok(());
        }
        let mask = valid_actions(self.inst, state)?;
        for (node, ok) in mask.into_iter().enumerate() {
            if ok {
                let mut next = state.clone();
                next.push_unchecked(self.inst, node);
                self.dfs(&mut next)?;
            }
        }
        Ok(())
    }
}

/// Uniform choice among valid actions at every step.
pub fn random_policy(inst: &DynamicInstance, seed: u64) -> Result<Solution> {
    let mut rng = stream_rng(seed, streams::EVAL_SAMPLING, inst.seed);
    let mut state = RolloutState::initial(inst);
    let budget = 4 * inst.horizon();
    while !state.is_complete(inst) {
        if state.step() >= budget {
            return Err(Error::Runaway { budget });
        }
        let valid: Vec<usize> = valid_actions(inst, &state)?
            .into_iter()
            .enumerate()
            .filter_map(|(i, ok)| ok.then_some(i))
            .collect();
        let node = valid[rng.random_range(0..valid.len())];
        state.push_unchecked(inst, node);
    }
    Ok(Solution::evaluate(inst, state.order, None))
}
