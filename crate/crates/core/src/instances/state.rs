use crate::error::{Error, Result};

use super::{DynamicInstance, ProblemKind};

/// Partial route under construction.
///
/// VRP routes start at the depot, so the initial VRP state already holds
/// the depot at time 0 and the first decision is made at time 1.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RolloutState {
    pub order: Vec<usize>,
    pub visited: Vec<bool>,
    pub remaining_capacity: u32,
    pub remaining_demand: Vec<u32>,
}

impl RolloutState {
    pub fn initial(inst: &DynamicInstance) -> Self {
        let n = inst.n();
        match inst.kind {
            ProblemKind::Tsp => RolloutState {
                order: Vec::with_capacity(n),
                visited: vec![false; n],
                remaining_capacity: 0,
                remaining_demand: Vec::new(),
            },
            ProblemKind::Vrp => {
                let mut visited = vec![false; n];
                visited[0] = true;
                RolloutState {
                    order: vec![0],
                    visited,
                    remaining_capacity: inst.capacity,
                    remaining_demand: inst.demands.clone(),
                }
            }
        }
    }

    /// Time index of the next node to be placed.
    pub fn step(&self) -> usize {
        self.order.len()
    }

    pub fn current(&self) -> Option<usize> {
        self.order.last().copied()
    }

    pub fn first(&self) -> Option<usize> {
        self.order.first().copied()
    }

    pub fn is_complete(&self, inst: &DynamicInstance) -> bool {
        match inst.kind {
            ProblemKind::Tsp => self.order.len() == inst.n(),
            ProblemKind::Vrp => {
                self.current() == Some(0) && self.remaining_demand.iter().all(|&d| d == 0)
            }
        }
    }

    /// Appends `node`, which must be unmasked.
    pub fn apply(&mut self, inst: &DynamicInstance, node: usize) -> Result<()> {
        let mask = valid_actions(inst, self)?;
        if !mask.get(node).copied().unwrap_or(false) {
            return Err(Error::Invariant(format!(
                "node {node} is not a valid action at step {}",
                self.step()
            )));
        }
        self.push_unchecked(inst, node);
        Ok(())
    }

    pub(crate) fn push_unchecked(&mut self, inst: &DynamicInstance, node: usize) {
        self.order.push(node);
        self.visited[node] = true;
        if inst.kind == ProblemKind::Vrp {
            if node == 0 {
                self.remaining_capacity = inst.capacity;
            } else {
                let d = self.remaining_demand[node];
                self.remaining_capacity = self.remaining_capacity.saturating_sub(d);
                self.remaining_demand[node] = 0;
            }
        }
    }
}

/// Mask of nodes that may be chosen next (`true` = allowed).
///
/// TSP masks visited nodes. VRP masks served customers, customers whose
/// demand exceeds the remaining load, and the depot while the vehicle
/// stands on it (unless nothing else is possible).
pub fn valid_actions(inst: &DynamicInstance, state: &RolloutState) -> Result<Vec<bool>> {
    let n = inst.n();
    match inst.kind {
        ProblemKind::Tsp => {
            let mask: Vec<bool> = state.visited.iter().map(|&v| !v).collect();
            if !mask.iter().any(|&m| m) {
                return Err(Error::Invariant("every TSP node is already visited".into()));
            }
            Ok(mask)
        }
        ProblemKind::Vrp => {
            let mut mask = vec![false; n];
            for (i, slot) in mask.iter_mut().enumerate().skip(1) {
                let d = state.remaining_demand[i];
                *slot = d > 0 && d <= state.remaining_capacity;
            }
            let at_depot = state.current() == Some(0);
            let any_customer = mask.iter().any(|&m| m);
            mask[0] = !at_depot || !any_customer;
            if at_depot && !any_customer && state.remaining_demand.iter().any(|&d| d > 0) {
                return Err(Error::Invariant(
                    "no customer can be served from a full vehicle".into(),
                ));
            }
            Ok(mask)
        }
    }
}
