//! Dynamic routing problem instances.
//!
//! An instance carries one coordinate slice per time step. Visiting the
//! `k`-th node of a route happens at time `k`, so the move from the node at
//! position `k` to the node at position `k + 1` is priced with the origin's
//! coordinates at time `k` and the destination's coordinates at `k + 1`.
//! Lookups past the horizon clamp to the last slice.

mod io;
mod state;

pub use io::{load_instances, read_instances, save_instances, write_instances, SCHEMA_VERSION};
pub use state::{valid_actions, RolloutState};

use std::fmt;

use ndarray::{Array2, Array3, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Coordinates per node per time step.
pub const COORD_DIM: usize = 2;

/// Largest customer demand produced by the VRP generator.
pub const MAX_DEMAND: u32 = 9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProblemKind {
    Tsp,
    Vrp,
}

impl fmt::Display for ProblemKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ProblemKind::Tsp => f.write_str("tsp"),
            ProblemKind::Vrp => f.write_str("vrp"),
        }
    }
}

impl std::str::FromStr for ProblemKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "tsp" => Ok(ProblemKind::Tsp),
            "vrp" => Ok(ProblemKind::Vrp),
            other => Err(Error::param(format!("unknown problem kind `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DynamicInstance {
    pub kind: ProblemKind,
    /// Coordinates indexed `[t, node, coord]`.
    pub features: Array3<f64>,
    /// Nodes whose coordinates never change (the VRP depot).
    pub static_nodes: Vec<usize>,
    /// Per-node demand; empty for TSP.
    pub demands: Vec<u32>,
    /// Vehicle capacity; zero for TSP.
    pub capacity: u32,
    pub seed: u64,
    pub delta_max: f64,
}

impl DynamicInstance {
    /// Builds an instance from explicit coordinates, checking the structural
    /// invariants.
    pub fn new(
        kind: ProblemKind,
        features: Array3<f64>,
        demands: Vec<u32>,
        capacity: u32,
    ) -> Result<Self> {
        let (horizon, n, d) = features.dim();
        if d != COORD_DIM {
            return Err(Error::shape(format!("expected {COORD_DIM} coordinates, got {d}")));
        }
        if n == 0 || horizon == 0 {
            return Err(Error::param("instance needs at least one node and one time step"));
        }
        let static_nodes = match kind {
            ProblemKind::Tsp => {
                if !demands.is_empty() {
                    return Err(Error::param("TSP instances carry no demands"));
                }
                Vec::new()
            }
            ProblemKind::Vrp => {
                if demands.len() != n {
                    return Err(Error::param(format!(
                        "expected {n} demands, got {}",
                        demands.len()
                    )));
                }
                if demands[0] != 0 {
                    return Err(Error::param("depot demand must be zero"));
                }
                if let Some(&d) = demands.iter().find(|&&d| d >= capacity) {
                    return Err(Error::param(format!(
                        "demand {d} is not below capacity {capacity}"
                    )));
                }
                vec![0]
            }
        };
        let inst = DynamicInstance {
            kind,
            features,
            static_nodes,
            demands,
            capacity,
            seed: 0,
            delta_max: 0.0,
        };
        inst.check_static_nodes()?;
        Ok(inst)
    }

    /// A TSP instance whose nodes never move.
    pub fn static_tsp(coords: &[[f64; 2]], horizon: usize) -> Result<Self> {
        let n = coords.len();
        let features = Array3::from_shape_fn((horizon, n, COORD_DIM), |(_, i, d)| coords[i][d]);
        Self::new(ProblemKind::Tsp, features, Vec::new(), 0)
    }

    pub fn n(&self) -> usize {
        self.features.dim().1
    }

    pub fn horizon(&self) -> usize {
        self.features.dim().0
    }

    pub fn is_static(&self, node: usize) -> bool {
        self.static_nodes.contains(&node)
    }

    /// Coordinates of all nodes at time `t`, clamped to the horizon.
    pub fn slice(&self, t: usize) -> ArrayView2<'_, f64> {
        self.features.index_axis(ndarray::Axis(0), t.min(self.horizon() - 1))
    }

    pub fn coord(&self, node: usize, t: usize) -> [f64; 2] {
        let t = t.min(self.horizon() - 1);
        [self.features[[t, node, 0]], self.features[[t, node, 1]]]
    }

    /// Model input rows for time `t`: coordinates, plus demand over
    /// capacity for VRP.
    pub fn input_dim(&self) -> usize {
        input_dim(self.kind)
    }

    pub fn model_inputs(&self, t: usize) -> Array2<f64> {
        let n = self.n();
        let dim = self.input_dim();
        let slice = self.slice(t);
        Array2::from_shape_fn((n, dim), |(i, d)| {
            if d < COORD_DIM {
                slice[[i, d]]
            } else {
                self.demands[i] as f64 / self.capacity as f64
            }
        })
    }

    fn check_static_nodes(&self) -> Result<()> {
        for &i in &self.static_nodes {
            if i >= self.n() {
                return Err(Error::param(format!("static node {i} out of range")));
            }
            let first = self.coord(i, 0);
            for t in 1..self.horizon() {
                if self.coord(i, t) != first {
                    return Err(Error::param(format!("static node {i} moves at time {t}")));
                }
            }
        }
        Ok(())
    }

    pub(crate) fn check_node(&self, node: usize) -> Result<()> {
        if node >= self.n() {
            Err(Error::param(format!("node {node} out of range for n={}", self.n())))
        } else {
            Ok(())
        }
    }
}

pub fn input_dim(kind: ProblemKind) -> usize {
    match kind {
        ProblemKind::Tsp => COORD_DIM,
        ProblemKind::Vrp => COORD_DIM + 1,
    }
}

/// Capacity convention for VRP instances of a given node count.
pub fn default_capacity(n: usize) -> u32 {
    match n {
        0..=10 => 20,
        11..=20 => 30,
        _ => 40,
    }
}

/// Horizon convention: one slice per visit plus the closing move for TSP,
/// twice the node count for VRP (depot returns lengthen routes).
pub fn default_horizon(kind: ProblemKind, n: usize) -> usize {
    match kind {
        ProblemKind::Tsp => n + 1,
        ProblemKind::Vrp => 2 * n,
    }
}

fn drift_coordinates(
    rng: &mut ChaCha8Rng,
    n: usize,
    horizon: usize,
    delta_max: f64,
    is_static: impl Fn(usize) -> bool,
) -> Array3<f64> {
    let mut features = Array3::<f64>::zeros((horizon, n, COORD_DIM));
    for i in 0..n {
        for d in 0..COORD_DIM {
            features[[0, i, d]] = rng.random::<f64>();
        }
    }
    for t in 1..horizon {
        for i in 0..n {
            for d in 0..COORD_DIM {
                let prev = features[[t - 1, i, d]];
                features[[t, i, d]] = if is_static(i) {
                    prev
                } else if delta_max > 0.0 {
                    (prev + rng.random_range(-delta_max..=delta_max)).clamp(0.0, 1.0)
                } else {
                    prev
                };
            }
        }
    }
    features
}

fn check_common(n: usize, delta_max: f64) -> Result<()> {
    if n < 2 {
        return Err(Error::param(format!("need at least 2 nodes, got {n}")));
    }
    if !(0.0..=1.0).contains(&delta_max) {
        return Err(Error::param(format!("delta_max must lie in [0, 1], got {delta_max}")));
    }
    Ok(())
}

/// Dynamic TSP: uniform initial coordinates, then a clamped uniform random
/// walk with per-step change at most `delta_max` in each coordinate.
pub fn generate_dynamic_tsp(
    n: usize,
    horizon: usize,
    delta_max: f64,
    seed: u64,
) -> Result<DynamicInstance> {
    check_common(n, delta_max)?;
    if horizon < n + 1 {
        return Err(Error::param(format!(
            "TSP horizon must be at least n+1={}, got {horizon}",
            n + 1
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let features = drift_coordinates(&mut rng, n, horizon, delta_max, |_| false);
    Ok(DynamicInstance {
        kind: ProblemKind::Tsp,
        features,
        static_nodes: Vec::new(),
        demands: Vec::new(),
        capacity: 0,
        seed,
        delta_max,
    })
}

/// Dynamic CVRP: node 0 is a fixed depot, customers drift as in TSP and
/// demand uniformly between 1 and 9 units.
pub fn generate_dynamic_vrp(
    n: usize,
    horizon: usize,
    delta_max: f64,
    capacity: u32,
    seed: u64,
) -> Result<DynamicInstance> {
    check_common(n, delta_max)?;
    if capacity <= MAX_DEMAND {
        return Err(Error::param(format!(
            "capacity must exceed the maximum demand {MAX_DEMAND}, got {capacity}"
        )));
    }
    if horizon < 2 * n {
        return Err(Error::param(format!(
            "VRP horizon must be at least 2n={}, got {horizon}",
            2 * n
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let features = drift_coordinates(&mut rng, n, horizon, delta_max, |i| i == 0);
    let mut demands = vec![0u32; n];
    for d in demands.iter_mut().skip(1) {
        *d = rng.random_range(1..=MAX_DEMAND);
    }
    Ok(DynamicInstance {
        kind: ProblemKind::Vrp,
        features,
        static_nodes: vec![0],
        demands,
        capacity,
        seed,
        delta_max,
    })
}

/// Cost of moving from `i` (at time `t`) to `j` (at time `t + 1`).
pub fn edge_cost(inst: &DynamicInstance, i: usize, j: usize, t: usize) -> f64 {
    let a = inst.coord(i, t);
    let b = inst.coord(j, t + 1);
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// Total route cost. TSP routes are closed: the move from the last node back
/// to the first is priced at the final step.
pub fn tour_cost(inst: &DynamicInstance, order: &[usize]) -> f64 {
    let mut cost: f64 = order
        .windows(2)
        .enumerate()
        .map(|(t, w)| edge_cost(inst, w[0], w[1], t))
        .sum();
    if inst.kind == ProblemKind::Tsp && order.len() > 1 {
        let last = order.len() - 1;
        cost += edge_cost(inst, order[last], order[0], last);
    }
    cost
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Violation {
    EmptyRoute,
    InvalidNode { position: usize, node: usize },
    RepeatedNode { node: usize },
    MissingNode { node: usize },
    CapacityExceeded { node: usize, position: usize },
    MissingDepotStart,
    MissingDepotEnd,
    ConsecutiveDepot { position: usize },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::EmptyRoute => write!(f, "empty route"),
            Violation::InvalidNode { position, node } => {
                write!(f, "invalid node {node} at position {position}")
            }
            Violation::RepeatedNode { node } => write!(f, "repeated node {node}"),
            Violation::MissingNode { node } => write!(f, "node {node} never visited"),
            Violation::CapacityExceeded { node, .. } => {
                write!(f, "capacity exceeded at node {node}")
            }
            Violation::MissingDepotStart => write!(f, "route does not start at the depot"),
            Violation::MissingDepotEnd => write!(f, "route does not end at the depot"),
            Violation::ConsecutiveDepot { position } => {
                write!(f, "consecutive depot visits at position {position}")
            }
        }
    }
}

/// Checks the problem constraints. Infeasibility is reported, not raised.
pub fn is_feasible(inst: &DynamicInstance, order: &[usize]) -> (bool, Vec<Violation>) {
    let mut violations = Vec::new();
    if order.is_empty() {
        violations.push(Violation::EmptyRoute);
        return (false, violations);
    }
    let n = inst.n();
    for (position, &node) in order.iter().enumerate() {
        if node >= n {
            violations.push(Violation::InvalidNode { position, node });
        }
    }
    if !violations.is_empty() {
        return (false, violations);
    }
    let mut seen = vec![0usize; n];
    match inst.kind {
        ProblemKind::Tsp => {
            for &node in order {
                seen[node] += 1;
                if seen[node] == 2 {
                    violations.push(Violation::RepeatedNode { node });
                }
            }
            for (node, &count) in seen.iter().enumerate() {
                if count == 0 {
                    violations.push(Violation::MissingNode { node });
                }
            }
        }
        ProblemKind::Vrp => {
            if order[0] != 0 {
                violations.push(Violation::MissingDepotStart);
            }
            let mut load = inst.capacity;
            for (position, &node) in order.iter().enumerate() {
                if node == 0 {
                    if position > 0 && order[position - 1] == 0 {
                        violations.push(Violation::ConsecutiveDepot { position });
                    }
                    load = inst.capacity;
                    continue;
                }
                seen[node] += 1;
                if seen[node] == 2 {
                    violations.push(Violation::RepeatedNode { node });
                }
                let demand = inst.demands[node];
                if demand > load {
                    violations.push(Violation::CapacityExceeded { node, position });
                    load = 0;
                } else {
                    load -= demand;
                }
            }
            for (node, &count) in seen.iter().enumerate().skip(1) {
                if count == 0 {
                    violations.push(Violation::MissingNode { node });
                }
            }
            if order.last() != Some(&0) {
                violations.push(Violation::MissingDepotEnd);
            }
        }
    }
    (violations.is_empty(), violations)
}

/// A route together with its evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Solution {
    pub order: Vec<usize>,
    pub cost: f64,
    pub feasible: bool,
    pub violations: Vec<Violation>,
    /// Cumulative policy log-likelihood when produced by a policy.
    pub log_prob: Option<f64>,
}

impl Solution {
    pub fn evaluate(inst: &DynamicInstance, order: Vec<usize>, log_prob: Option<f64>) -> Self {
        let cost = tour_cost(inst, &order);
        let (feasible, violations) = is_feasible(inst, &order);
        Solution {
            order,
            cost,
            feasible,
            violations,
            log_prob,
        }
    }
}


/// Parameters of an instance distribution.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemSpec {
    pub kind: ProblemKind,
    pub n: usize,
    /// Defaults to [`default_horizon`].
    #[serde(default)]
    pub horizon: Option<usize>,
    #[serde(default = "default_delta_max")]
    pub delta_max: f64,
    /// VRP only; defaults to [`default_capacity`].
    #[serde(default)]
    pub capacity: Option<u32>,
}

fn default_delta_max() -> f64 {
    0.1
}

impl ProblemSpec {
    pub fn new(kind: ProblemKind, n: usize) -> Self {
        ProblemSpec {
            kind,
            n,
            horizon: None,
            delta_max: default_delta_max(),
            capacity: None,
        }
    }

    pub fn horizon(&self) -> usize {
        self.horizon.unwrap_or_else(|| default_horizon(self.kind, self.n))
    }

    pub fn capacity(&self) -> u32 {
        self.capacity.unwrap_or_else(|| default_capacity(self.n))
    }

    pub fn generate(&self, seed: u64) -> Result<DynamicInstance> {
        match self.kind {
            ProblemKind::Tsp => generate_dynamic_tsp(self.n, self.horizon(), self.delta_max, seed),
            ProblemKind::Vrp => {
                generate_dynamic_vrp(self.n, self.horizon(), self.delta_max, self.capacity(), seed)
            }
        }
    }

    /// `count` instances seeded from `(seed, stream, first + i)`.
    pub fn generate_set(&self, seed: u64, stream: u64, first: u64, count: usize) -> Result<Vec<DynamicInstance>> {
        (0..count as u64)
            .map(|i| self.generate(crate::rng::derive_seed(seed, stream, first + i)))
            .collect()
    }
}
