//! Every way of producing a route, behind one trait and selectable by name.
//!
//! Names are `greedy`, `beam:K`, `sample:M`, `rt`, `nn`, `dp`, `dp:0`,
//! `brute` and `random`.

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::baselines::{
    brute_force, exact_dp_tsp, exact_dp_tsp_any_start, nearest_neighbor_dynamic, random_policy,
};
use crate::error::{Error, Result};
use crate::instances::{DynamicInstance, Solution};
use crate::model::Model;
use crate::realtime::rt_rollout_batch;
use crate::training::{solve_all, EvalStrategy};

pub trait Solver: Send + Sync {
    /// Name as accepted by the registry.
    fn name(&self) -> String;

    fn solve(&self, inst: &DynamicInstance) -> Result<Solution>;

    fn solve_all(&self, instances: &[DynamicInstance]) -> Result<Vec<Solution>> {
        instances.iter().map(|i| self.solve(i)).collect()
    }
}

/// Shared inputs solvers may need.
#[derive(Clone, Default)]
pub struct SolverContext {
    pub model: Option<Arc<Model>>,
    pub rt_model: Option<Arc<Model>>,
    pub seed: u64,
}

type Factory = Box<dyn Fn(Option<&str>, &SolverContext) -> Result<Box<dyn Solver>> + Send + Sync>;

pub struct SolverRegistry {
    factories: BTreeMap<String, Factory>,
}

impl SolverRegistry {
    pub fn empty() -> Self {
        SolverRegistry {
            factories: BTreeMap::new(),
        }
    }

    pub fn register(
        &mut self,
        name: &str,
        factory: impl Fn(Option<&str>, &SolverContext) -> Result<Box<dyn Solver>> + Send + Sync + 'static,
    ) {
        self.factories.insert(name.to_string(), Box::new(factory));
    }

    pub fn names(&self) -> Vec<&str> {
        self.factories.keys().map(String::as_str).collect()
    }

    /// Builds a solver from `name` or `name:arg`.
    pub fn build(&self, spec: &str, ctx: &SolverContext) -> Result<Box<dyn Solver>> {
        let (name, arg) = match spec.split_once(':') {
            Some((n, a)) => (n, Some(a)),
            None => (spec, None),
        };
        let factory = self
            .factories
            .get(name)
            .ok_or_else(|| Error::UnknownSolver(spec.to_string()))?;
        factory(arg, ctx)
    }

    /// Parses a comma-separated list.
    pub fn build_list(&self, list: &str, ctx: &SolverContext) -> Result<Vec<Box<dyn Solver>>> {
        list.split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| self.build(s, ctx))
            .collect()
    }
}

impl Default for SolverRegistry {
    fn default() -> Self {
        let mut r = SolverRegistry::empty();
        r.register("greedy", |arg, ctx| {
            no_arg("greedy", arg)?;
            Ok(Box::new(PolicySolver::new(need_model(ctx, "greedy")?, EvalStrategy::Greedy, ctx.seed)))
        });
        r.register("beam", |arg, ctx| {
            let k = width("beam", arg)?;
            Ok(Box::new(PolicySolver::new(need_model(ctx, "beam")?, EvalStrategy::Beam(k), ctx.seed)))
        });
        r.register("sample", |arg, ctx| {
            let m = width("sample", arg)?;
            Ok(Box::new(PolicySolver::new(need_model(ctx, "sample")?, EvalStrategy::Sample(m), ctx.seed)))
        });
        r.register("rt", |arg, ctx| {
            no_arg("rt", arg)?;
            let model = ctx
                .rt_model
                .clone()
                .ok_or_else(|| Error::param("solver `rt` needs a real-time checkpoint"))?;
            Ok(Box::new(RealtimeSolver { model }))
        });
        r.register("nn", |arg, _| {
            no_arg("nn", arg)?;
            Ok(Box::new(FnSolver::new("nn", nearest_neighbor_dynamic)))
        });
        r.register("dp", |arg, _| match arg {
            None => Ok(Box::new(FnSolver::new("dp", |i| {
                Ok(exact_dp_tsp_any_start(i)?.to_solution(i))
            })) as Box<dyn Solver>),
            Some("0") => Ok(Box::new(FnSolver::new("dp:0", |i| Ok(exact_dp_tsp(i)?.to_solution(i))))),
            Some(a) => Err(Error::param(format!("solver `dp` accepts only `dp:0`, got `dp:{a}`"))),
        });
        r.register("brute", |arg, _| {
            no_arg("brute", arg)?;
            Ok(Box::new(FnSolver::new("brute", |i| Ok(brute_force(i, None)?.to_solution(i)))))
        });
        r.register("random", |arg, ctx| {
            no_arg("random", arg)?;
            let seed = ctx.seed;
            Ok(Box::new(FnSolver::new("random", move |i| random_policy(i, seed))))
        });
        r
    }
}

fn no_arg(name: &str, arg: Option<&str>) -> Result<()> {
    match arg {
        None => Ok(()),
        Some(a) => Err(Error::param(format!("solver `{name}` takes no argument, got `{a}`"))),
    }
}

fn width(name: &str, arg: Option<&str>) -> Result<usize> {
    arg.and_then(|a| a.parse::<usize>().ok())
        .filter(|&k| k > 0)
        .ok_or_else(|| Error::param(format!("solver `{name}` needs a positive width, as in `{name}:10`")))
}

fn need_model(ctx: &SolverContext, name: &str) -> Result<Arc<Model>> {
    ctx.model
        .clone()
        .ok_or_else(|| Error::param(format!("solver `{name}` needs a checkpoint")))
}

pub struct PolicySolver {
    model: Arc<Model>,
    strategy: EvalStrategy,
    seed: u64,
}

impl PolicySolver {
    pub fn new(model: Arc<Model>, strategy: EvalStrategy, seed: u64) -> Self {
        PolicySolver { model, strategy, seed }
    }
}

impl Solver for PolicySolver {
    fn name(&self) -> String {
        self.strategy.to_string()
    }

    fn solve(&self, inst: &DynamicInstance) -> Result<Solution> {
        Ok(self.solve_all(std::slice::from_ref(inst))?.remove(0))
    }

    fn solve_all(&self, instances: &[DynamicInstance]) -> Result<Vec<Solution>> {
        solve_all(&self.model, instances, self.strategy, self.seed)
    }
}

pub struct RealtimeSolver {
    model: Arc<Model>,
}

impl Solver for RealtimeSolver {
    fn name(&self) -> String {
        "rt".into()
    }

    fn solve(&self, inst: &DynamicInstance) -> Result<Solution> {
        Ok(self.solve_all(std::slice::from_ref(inst))?.remove(0))
    }

    fn solve_all(&self, instances: &[DynamicInstance]) -> Result<Vec<Solution>> {
        rt_rollout_batch(&self.model, instances)
    }
}

/// A solver backed by a plain function.
pub struct FnSolver<F> {
    name: String,
    f: F,
}

impl<F: Fn(&DynamicInstance) -> Result<Solution>> FnSolver<F> {
    pub fn new(name: &str, f: F) -> Self {
        FnSolver { name: name.to_string(), f }
    }
}

impl<F: Fn(&DynamicInstance) -> Result<Solution> + Send + Sync> Solver for FnSolver<F> {
    fn name(&self) -> String {
        self.name.clone()
    }

    fn solve(&self, inst: &DynamicInstance) -> Result<Solution> {
        (self.f)(inst)
    }
}
