use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::Arc;
use std::time::Instant;

use anyhow::{anyhow, bail, Context};
use dynroute::instances::{load_instances, save_instances};
use dynroute::instances::{ProblemKind, ProblemSpec};
use dynroute::plot::render_svg;
use dynroute::rng::streams;
use dynroute::solvers::{Solver, SolverContext, SolverRegistry};
use dynroute::training::load_checkpoint;
use dynroute::training::{summarize, train as run_training, RunManifest, TrainConfig};
use dynroute::{DynamicInstance, Solution};
use serde::{Deserialize, Serialize};
use toml::Table;

use crate::config::{absolute, existing, parse, resolve_table, Overrides};
use crate::{CompareArgs, EvalArgs, Failure, GenArgs, PlotArgs, TrainArgs, UsageExt};

type CmdResult = Result<(), Failure>;

fn source_revision() -> Option<String> {
    let out = Command::new("git")
        .args(["-C", env!("CARGO_MANIFEST_DIR"), "rev-parse", "HEAD"])
        .output()
        .ok()?;
    out.status
        .success()
        .then(|| String::from_utf8_lossy(&out.stdout).trim().to_string())
}

fn manifest(command: &str, config: &impl Serialize, seed: u64) -> anyhow::Result<RunManifest> {
    let mut m = RunManifest::new(command, serde_json::to_value(config)?, seed);
    m.source_revision = source_revision();
    Ok(m)
}

/// `file.ext` → `file.ext.manifest.json`.
fn manifest_beside(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}

fn write_jsonl<T: Serialize>(path: &Path, records: impl IntoIterator<Item = T>) -> anyhow::Result<()> {
    let mut w = BufWriter::new(fs::File::create(path).with_context(|| format!("creating {}", path.display()))?);
    for r in records {
        serde_json::to_writer(&mut w, &r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GenConfig {
    kind: ProblemKind,
    n: usize,
    #[serde(default)]
    horizon: Option<usize>,
    #[serde(default = "default_delta_max")]
    delta_max: f64,
    #[serde(default)]
    capacity: Option<u32>,
    count: usize,
    seed: u64,
    out: PathBuf,
}

fn default_delta_max() -> f64 {
    0.1
}

pub fn gen(a: &GenArgs) -> CmdResult {
    let mut o = Overrides::default();
    o.opt("kind", a.kind.clone())
        .count("n", a.n)
        .count("horizon", a.horizon)
        .opt("delta_max", a.delta_max)
        .opt("capacity", a.capacity.map(i64::from))
        .count("count", a.count)
        .opt("seed", a.seed.map(|s| s as i64))
        .path("out", &a.out)
        .sets(&a.common.sets)
        .usage()?;
    let table = resolve_table(a.common.config.as_deref(), &o, Some("seed")).usage()?;
    let mut cfg: GenConfig = parse(table).usage()?;
    cfg.out = absolute(&cfg.out).usage()?;
    let spec = ProblemSpec {
        kind: cfg.kind,
        n: cfg.n,
        horizon: cfg.horizon,
        delta_max: cfg.delta_max,
        capacity: cfg.capacity,
    };
    // Catch bad parameters before writing anything.
    spec.generate(cfg.seed).usage()?;
    let instances = spec.generate_set(cfg.seed, streams::GENERATE, 0, cfg.count)?;
    save_instances(&cfg.out, &instances)?;
    let mut m = manifest("gen", &cfg, cfg.seed)?;
    m.outputs.push(cfg.out.clone());
    m.save(&manifest_beside(&cfg.out))?;
    println!("wrote {} instances to {}", instances.len(), cfg.out.display());
    Ok(())
}

pub fn train(a: &TrainArgs, realtime: bool) -> CmdResult {
    let command = if realtime { "rt-train" } else { "train" };
    let mut o = Overrides::default();
    o.path("out_dir", &a.out_dir)
        .opt("problem.kind", a.kind.clone())
        .count("problem.n", a.n)
        .count("problem.horizon", a.horizon)
        .opt("problem.delta_max", a.delta_max)
        .opt("problem.capacity", a.capacity.map(i64::from))
        .opt("mode", a.mode.clone())
        .count("encoder.hidden_dim", a.hidden_dim)
        .count("encoder.num_layers", a.layers)
        .count("encoder.num_heads", a.heads)
        .count("epochs", a.epochs)
        .count("instances_per_epoch", a.instances_per_epoch)
        .count("batch_size", a.batch_size)
        .opt("learning_rate", a.learning_rate)
        .count("validation_size", a.validation_size)
        .opt("seed", a.seed.map(|s| s as i64))
        .path("init_checkpoint", &a.init_checkpoint)
        .flag("keep_checkpoints", a.keep_checkpoints)
        .sets(&a.common.sets)
        .usage()?;
    if realtime {
        o.opt("realtime", Some(true));
    }
    let mut table = resolve_table(a.common.config.as_deref(), &o, Some("seed")).usage()?;
    let out_dir = match table.remove("out_dir") {
        Some(toml::Value::String(s)) => absolute(Path::new(&s)).usage()?,
        Some(_) => return Err(Failure::Usage(anyhow!("out_dir must be a path"))),
        None => return Err(Failure::Usage(anyhow!("missing --out-dir"))),
    };
    let mut cfg: TrainConfig = parse(table).usage()?;
    if let Some(p) = &cfg.init_checkpoint {
        cfg.init_checkpoint = Some(existing(p).usage()?);
    }
    cfg.validate().usage()?;
    let outcome = run_training(&cfg, Some(&out_dir))?;
    // Record the resolved config including the output directory.
    let mut resolved = serde_json::to_value(&cfg)?;
    resolved["out_dir"] = serde_json::to_value(&out_dir)?;
    let mut m = outcome.manifest;
    m.config = resolved;
    m.source_revision = source_revision();
    m.outputs = vec![out_dir.join("metrics.jsonl"), out_dir.join("model.ckpt.json")];
    m.save(&out_dir.join("manifest.json"))?;
    let last = m.metrics.last().map_or(f64::NAN, |x| x.val_cost);
    println!(
        "{command}: {} epochs, validation cost {:.4} -> {last:.4}; model at {}",
        m.metrics.len(),
        m.initial_val_cost.unwrap_or(f64::NAN),
        out_dir.join("model.ckpt.json").display()
    );
    Ok(())
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EvalConfig {
    checkpoint: PathBuf,
    instances: PathBuf,
    #[serde(default = "default_strategy")]
    strategy: String,
    seed: u64,
    out_dir: PathBuf,
}

fn default_strategy() -> String {
    "greedy".into()
}

pub fn eval(a: &EvalArgs) -> CmdResult {
    let mut o = Overrides::default();
    o.path("checkpoint", &a.checkpoint)
        .path("instances", &a.instances)
        .opt("strategy", a.strategy.clone())
        .opt("seed", a.seed.map(|s| s as i64))
        .path("out_dir", &a.out_dir)
        .sets(&a.common.sets)
        .usage()?;
    let table = resolve_table(a.common.config.as_deref(), &o, Some("seed")).usage()?;
    let mut cfg: EvalConfig = parse(table).usage()?;
    cfg.checkpoint = existing(&cfg.checkpoint).usage()?;
    cfg.instances = existing(&cfg.instances).usage()?;
    cfg.out_dir = absolute(&cfg.out_dir).usage()?;
    let model = Arc::new(load_checkpoint(&cfg.checkpoint)?);
    let ctx = SolverContext {
        model: Some(model.clone()),
        rt_model: Some(model),
        seed: cfg.seed,
    };
    let solver = SolverRegistry::default().build(&cfg.strategy, &ctx).usage()?;
    let instances = load_instances(&cfg.instances)?;
    let start = Instant::now();
    let solutions = solver.solve_all(&instances)?;
    let summary = summarize(solver.name(), &solutions, start.elapsed().as_secs_f64())?;
    fs::create_dir_all(&cfg.out_dir)?;
    let summary_path = cfg.out_dir.join("summary.json");
    let solutions_path = cfg.out_dir.join("solutions.jsonl");
    fs::write(&summary_path, serde_json::to_vec_pretty(&summary)?)?;
    write_jsonl(&solutions_path, &solutions)?;
    let mut m = manifest("eval", &cfg, cfg.seed)?;
    m.outputs = vec![summary_path, solutions_path];
    m.save(&cfg.out_dir.join("manifest.json"))?;
    println!(
        "{}: mean cost {:.6} over {} instances, {} infeasible, {:.3}s",
        summary.strategy,
        summary.mean_cost,
        instances.len(),
        summary.infeasible,
        summary.wall_time_s
    );
    Ok(())
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CompareConfig {
    instances: PathBuf,
    solvers: String,
    #[serde(default)]
    checkpoint: Option<PathBuf>,
    #[serde(default)]
    rt_checkpoint: Option<PathBuf>,
    seed: u64,
    #[serde(default = "default_jobs")]
    jobs: usize,
    out_dir: PathBuf,
}

fn default_jobs() -> usize {
    1
}

#[derive(Serialize)]
struct CompareRecord {
    solver: String,
    mean_cost: f64,
    mean_gap_vs_dp: Option<f64>,
    infeasible: usize,
    wall_time_s: f64,
}

#[derive(Serialize)]
struct PairedCost<'a> {
    index: usize,
    instance_seed: u64,
    solver: &'a str,
    cost: f64,
    feasible: bool,
}

/// Solves in `jobs` contiguous chunks, keeping instance order.
fn solve_parallel(solver: &dyn Solver, instances: &[DynamicInstance], jobs: usize) -> anyhow::Result<Vec<Solution>> {
    if jobs <= 1 || instances.len() < 2 {
        return Ok(solver.solve_all(instances)?);
    }
    let size = instances.len().div_ceil(jobs);
    std::thread::scope(|scope| {
        let handles: Vec<_> = instances
            .chunks(size)
            .map(|chunk| scope.spawn(move || solver.solve_all(chunk)))
            .collect();
        let mut out = Vec::with_capacity(instances.len());
        for h in handles {
            out.extend(h.join().map_err(|_| anyhow!("solver thread panicked"))??);
        }
        Ok(out)
    })
}

const GAP_REFERENCES: [&str; 3] = ["dp", "dp:0", "brute"];

pub fn compare(a: &CompareArgs) -> CmdResult {
    let mut o = Overrides::default();
    o.path("instances", &a.instances)
        .opt("solvers", a.solvers.clone())
        .path("checkpoint", &a.checkpoint)
        .path("rt_checkpoint", &a.rt_checkpoint)
        .opt("seed", a.seed.map(|s| s as i64))
        .count("jobs", a.jobs)
        .path("out_dir", &a.out_dir)
        .sets(&a.common.sets)
        .usage()?;
    let table = resolve_table(a.common.config.as_deref(), &o, Some("seed")).usage()?;
    let mut cfg: CompareConfig = parse(table).usage()?;
    cfg.instances = existing(&cfg.instances).usage()?;
    for p in [&mut cfg.checkpoint, &mut cfg.rt_checkpoint].into_iter().flatten() {
        *p = existing(p).usage()?;
    }
    cfg.out_dir = absolute(&cfg.out_dir).usage()?;
    let load = |p: &Option<PathBuf>| -> anyhow::Result<Option<Arc<_>>> {
        Ok(match p {
            Some(p) => Some(Arc::new(load_checkpoint(p)?)),
            None => None,
        })
    };
    let ctx = SolverContext {
        model: load(&cfg.checkpoint)?,
        rt_model: load(&cfg.rt_checkpoint)?,
        seed: cfg.seed,
    };
    let solvers = SolverRegistry::default().build_list(&cfg.solvers, &ctx).usage()?;
    if solvers.is_empty() {
        return Err(Failure::Usage(anyhow!("no solvers given")));
    }
    let instances = load_instances(&cfg.instances)?;
    if instances.is_empty() {
        return Err(Failure::Runtime(anyhow!("{} holds no instances", cfg.instances.display())));
    }
    let mut results = Vec::new();
    for s in &solvers {
        let start = Instant::now();
        let sols = solve_parallel(s.as_ref(), &instances, cfg.jobs)
            .with_context(|| format!("solver {}", s.name()))?;
        results.push((s.name(), sols, start.elapsed().as_secs_f64()));
    }
    let reference: Option<Vec<f64>> = GAP_REFERENCES.iter().find_map(|r| {
        results
            .iter()
            .find(|(name, _, _)| name == r)
            .map(|(_, sols, _)| sols.iter().map(|s| s.cost).collect())
    });
    let records: Vec<CompareRecord> = results
        .iter()
        .map(|(name, sols, wall)| {
            let n = sols.len() as f64;
            CompareRecord {
                solver: name.clone(),
                mean_cost: sols.iter().map(|s| s.cost).sum::<f64>() / n,
                mean_gap_vs_dp: reference.as_ref().map(|r| {
                    sols.iter().zip(r).map(|(s, r)| (s.cost - r) / r).sum::<f64>() / n
                }),
                infeasible: sols.iter().filter(|s| !s.feasible).count(),
                wall_time_s: *wall,
            }
        })
        .collect();
    fs::create_dir_all(&cfg.out_dir)?;
    let records_path = cfg.out_dir.join("records.jsonl");
    let paired_path = cfg.out_dir.join("paired_costs.jsonl");
    let summary_path = cfg.out_dir.join("summary.txt");
    write_jsonl(&records_path, &records)?;
    let instances = &instances;
    write_jsonl(
        &paired_path,
        results.iter().flat_map(|(name, sols, _)| {
            sols.iter().enumerate().map(move |(i, s)| PairedCost {
                index: i,
                instance_seed: instances[i].seed,
                solver: name,
                cost: s.cost,
                feasible: s.feasible,
            })
        }),
    )?;
    let text = summary_table(&records, instances.len());
    fs::write(&summary_path, &text)?;
    let mut m = manifest("compare", &cfg, cfg.seed)?;
    m.outputs = vec![records_path, paired_path, summary_path];
    m.save(&cfg.out_dir.join("manifest.json"))?;
    print!("{text}");
    Ok(())
}

fn summary_table(records: &[CompareRecord], count: usize) -> String {
    let mut s = format!("{count} instances\n");
    writeln!(s, "{:<12} {:>12} {:>10} {:>10} {:>10}", "solver", "mean_cost", "gap", "infeasible", "time_s").unwrap();
    for r in records {
        let gap = r.mean_gap_vs_dp.map_or("-".to_string(), |g| format!("{:.2}%", 100.0 * g));
        writeln!(
            s,
            "{:<12} {:>12.6} {:>10} {:>10} {:>10.3}",
            r.solver, r.mean_cost, gap, r.infeasible, r.wall_time_s
        )
        .unwrap();
    }
    s
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PlotConfig {
    instance: PathBuf,
    #[serde(default)]
    index: usize,
    solution: PathBuf,
    #[serde(default)]
    solution_index: Option<usize>,
    out: PathBuf,
}

/// Reads record `index` of a solution file: a solution object or a bare
/// order array.
fn read_order(path: &Path, index: usize) -> anyhow::Result<Vec<usize>> {
    let file = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let line = BufReader::new(file)
        .lines()
        .filter(|l| l.as_ref().map_or(true, |l| !l.trim().is_empty()))
        .nth(index)
        .ok_or_else(|| anyhow!("{} has no record {index}", path.display()))??;
    let v: serde_json::Value =
        serde_json::from_str(&line).with_context(|| format!("record {index} of {}", path.display()))?;
    let order = match &v {
        serde_json::Value::Array(_) => v,
        serde_json::Value::Object(o) => o
            .get("order")
            .cloned()
            .ok_or_else(|| anyhow!("record {index} has no `order`"))?,
        _ => bail!("record {index} is neither an order nor a solution"),
    };
    Ok(serde_json::from_value(order)?)
}

pub fn plot(a: &PlotArgs) -> CmdResult {
    let mut o = Overrides::default();
    o.path("instance", &a.instance)
        .count("index", a.index)
        .path("solution", &a.solution)
        .count("solution_index", a.solution_index)
        .path("out", &a.out)
        .sets(&a.common.sets)
        .usage()?;
    let table: Table = resolve_table(a.common.config.as_deref(), &o, None).usage()?;
    let mut cfg: PlotConfig = parse(table).usage()?;
    cfg.instance = existing(&cfg.instance).usage()?;
    cfg.solution = existing(&cfg.solution).usage()?;
    cfg.out = absolute(&cfg.out).usage()?;
    let instances = load_instances(&cfg.instance)?;
    let inst = instances.get(cfg.index).ok_or_else(|| {
        anyhow!("{} has {} instances, no index {}", cfg.instance.display(), instances.len(), cfg.index)
    })?;
    let order = read_order(&cfg.solution, cfg.solution_index.unwrap_or(cfg.index))?;
    fs::write(&cfg.out, render_svg(inst, &order))?;
    let mut m = manifest("plot", &cfg, 0)?;
    m.outputs.push(cfg.out.clone());
    m.save(&manifest_beside(&cfg.out))?;
    println!("wrote {}", cfg.out.display());
    Ok(())
}
