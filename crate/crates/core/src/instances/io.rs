//! Newline-delimited instance files.
//!
//! One JSON object per line with a fixed key order. Floats are written with
//! 17 significant digits so every value reads back bit-for-bit.

use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array3;
use serde::Deserialize;

use super::{DynamicInstance, ProblemKind, COORD_DIM};
use crate::error::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    schema_version: u32,
    kind: ProblemKind,
    n: usize,
    horizon: usize,
    delta_max: f64,
    seed: u64,
    features: Vec<Vec<Vec<f64>>>,
    static_nodes: Vec<usize>,
    demands: Option<Vec<u32>>,
    capacity: Option<u32>,
}

pub(crate) fn fmt_f64(out: &mut String, v: f64) {
    write!(out, "{v:.16e}").expect("writing to a String cannot fail");
}

fn encode(inst: &DynamicInstance) -> String {
    let (horizon, n, _) = inst.features.dim();
    let mut s = String::with_capacity(64 + horizon * n * 50);
    write!(
        s,
        "{{\"schema_version\":{SCHEMA_VERSION},\"kind\":\"{}\",\"n\":{n},\"horizon\":{horizon},\"delta_max\":",
        inst.kind
    )
    .unwrap();
    fmt_f64(&mut s, inst.delta_max);
    write!(s, ",\"seed\":{},\"features\":[", inst.seed).unwrap();
    for t in 0..horizon {
        if t > 0 {
            s.push(',');
        }
        s.push('[');
        for i in 0..n {
            if i > 0 {
                s.push(',');
            }
            s.push('[');
            for d in 0..COORD_DIM {
                if d > 0 {
                    s.push(',');
                }
                fmt_f64(&mut s, inst.features[[t, i, d]]);
            }
            s.push(']');
        }
        s.push(']');
    }
    s.push_str("],\"static_nodes\":");
    s.push_str(&serde_json::to_string(&inst.static_nodes).unwrap());
    match inst.kind {
        ProblemKind::Tsp => s.push_str(",\"demands\":null,\"capacity\":null}"),
        ProblemKind::Vrp => {
            s.push_str(",\"demands\":");
            s.push_str(&serde_json::to_string(&inst.demands).unwrap());
            write!(s, ",\"capacity\":{}}}", inst.capacity).unwrap();
        }
    }
    s
}

fn decode(line: &str, record: usize) -> Result<DynamicInstance> {
    let err = |message: String| Error::Parse { record, message };
    let r: Record = serde_json::from_str(line).map_err(|e| err(e.to_string()))?;
    if r.schema_version != SCHEMA_VERSION {
        return Err(err(format!("unsupported schema_version {}", r.schema_version)));
    }
    if r.features.len() != r.horizon {
        return Err(err(format!(
            "features has {} time slices, horizon is {}",
            r.features.len(),
            r.horizon
        )));
    }
    let mut features = Array3::<f64>::zeros((r.horizon, r.n, COORD_DIM));
    for (t, slice) in r.features.iter().enumerate() {
        if slice.len() != r.n {
            return Err(err(format!("slice {t} has {} nodes, expected {}", slice.len(), r.n)));
        }
        for (i, xy) in slice.iter().enumerate() {
            if xy.len() != COORD_DIM {
                return Err(err(format!(
                    "feature arity {} at [{t}][{i}], expected {COORD_DIM}",
                    xy.len()
                )));
            }
            for (d, &v) in xy.iter().enumerate() {
                features[[t, i, d]] = v;
            }
        }
    }
    let (demands, capacity) = match r.kind {
        ProblemKind::Tsp => (Vec::new(), 0),
        ProblemKind::Vrp => (
            r.demands.ok_or_else(|| err("VRP record without demands".into()))?,
            r.capacity.ok_or_else(|| err("VRP record without capacity".into()))?,
        ),
    };
    let mut inst = DynamicInstance::new(r.kind, features, demands, capacity)
        .map_err(|e| err(e.to_string()))?;
    if inst.static_nodes != r.static_nodes {
        return Err(err(format!(
            "static_nodes {:?} inconsistent with kind {}",
            r.static_nodes, r.kind
        )));
    }
    inst.seed = r.seed;
    inst.delta_max = r.delta_max;
    Ok(inst)
}

pub fn write_instances<W: Write>(mut out: W, instances: &[DynamicInstance]) -> Result<()> {
    for inst in instances {
        out.write_all(encode(inst).as_bytes())?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_instances<R: Read>(input: R) -> Result<Vec<DynamicInstance>> {
    let mut instances = Vec::new();
    for line in BufReader::new(input).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        instances.push(decode(&line, instances.len())?);
    }
    Ok(instances)
}

pub fn save_instances(path: impl AsRef<Path>, instances: &[DynamicInstance]) -> Result<()> {
    write_instances(BufWriter::new(File::create(path)?), instances)
}

pub fn load_instances(path: impl AsRef<Path>) -> Result<Vec<DynamicInstance>> {
    read_instances(File::open(path)?)
}
