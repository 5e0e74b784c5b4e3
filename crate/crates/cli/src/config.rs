//! Config resolution: TOML file, then flag overrides, then `--set` pairs.

use std::hash::{BuildHasher, RandomState};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{anyhow, bail, Context};
use serde::de::DeserializeOwned;
use toml::{Table, Value};

/// Overrides collected from flags, keyed by dotted path.
#[derive(Default)]
pub struct Overrides(Vec<(String, Value)>);

impl Overrides {
    pub fn opt<V: Into<Value>>(&mut self, key: &str, v: Option<V>) -> &mut Self {
        if let Some(v) = v {
            self.0.push((key.to_string(), v.into()));
        }
        self
    }

    pub fn path(&mut self, key: &str, v: &Option<PathBuf>) -> &mut Self {
        self.opt(key, v.as_ref().map(|p| p.display().to_string()))
    }

    pub fn flag(&mut self, key: &str, on: bool) -> &mut Self {
        self.opt(key, on.then_some(true))
    }

    pub fn count(&mut self, key: &str, v: Option<usize>) -> &mut Self {
        self.opt(key, v.map(|v| v as i64))
    }

    /// `key.path=value`, where value is TOML, or a bare string.
    pub fn sets(&mut self, pairs: &[String]) -> anyhow::Result<&mut Self> {
        for pair in pairs {
            let (k, v) = pair
                .split_once('=')
                .ok_or_else(|| anyhow!("--set expects key=value, got `{pair}`"))?;
            let value = toml::from_str::<Table>(&format!("v = {v}"))
                .ok()
                .and_then(|mut t| t.remove("v"))
                .unwrap_or_else(|| Value::String(v.to_string()));
            self.0.push((k.trim().to_string(), value));
        }
        Ok(self)
    }
}

/// Reads a TOML config, or a JSON one. A run manifest works too: its
/// recorded config is used, so a run can be repeated from its manifest.
pub fn load_table(file: Option<&Path>) -> anyhow::Result<Table> {
    let Some(path) = file else {
        return Ok(Table::new());
    };
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    if path.extension().is_some_and(|e| e == "json") {
        let mut v: serde_json::Value =
            serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        if v.get("schema_version").is_some() {
            v = v["config"].take();
        }
        strip_nulls(&mut v);
        return match Value::try_from(v)? {
            Value::Table(t) => Ok(t),
            _ => bail!("config {} is not an object", path.display()),
        };
    }
    toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
}

fn strip_nulls(v: &mut serde_json::Value) {
    if let serde_json::Value::Object(map) = v {
        map.retain(|_, x| !x.is_null());
        map.values_mut().for_each(strip_nulls);
    }
}

pub fn set_path(table: &mut Table, key: &str, value: Value) -> anyhow::Result<()> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().unwrap();
    let mut cur = table;
    for p in parts {
        let entry = cur.entry(p).or_insert_with(|| Value::Table(Table::new()));
        cur = match entry {
            Value::Table(t) => t,
            _ => bail!("config key `{p}` is not a table"),
        };
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

/// Loads `file`, applies overrides, and fills in a drawn seed at
/// `seed_key` when none was given.
pub fn resolve_table(
    file: Option<&Path>,
    overrides: &Overrides,
    seed_key: Option<&str>,
) -> anyhow::Result<Table> {
    let mut table = load_table(file)?;
    for (k, v) in &overrides.0 {
        set_path(&mut table, k, v.clone())?;
    }
    if let Some(key) = seed_key {
        if !table.contains_key(key) {
            // TOML integers are signed; keep the drawn seed representable.
            let seed = entropy_seed() >> 1;
            table.insert(key.to_string(), Value::Integer(seed as i64));
            log::info!("drew seed {seed}");
        }
    }
    Ok(table)
}

pub fn parse<T: DeserializeOwned>(table: Table) -> anyhow::Result<T> {
    Value::Table(table).try_into().map_err(|e| anyhow!("invalid config: {e}"))
}

pub fn entropy_seed() -> u64 {
    let nanos = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_nanos());
    RandomState::new().hash_one(nanos)
}

/// Absolute form of `p` against the working directory.
pub fn absolute(p: &Path) -> anyhow::Result<PathBuf> {
    std::path::absolute(p).with_context(|| format!("resolving {}", p.display()))
}

pub fn existing(p: &Path) -> anyhow::Result<PathBuf> {
    let abs = absolute(p)?;
    if !abs.is_file() {
        bail!("no such file: {}", p.display());
    }
    Ok(abs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_reach_nested_keys() {
        let mut o = Overrides::default();
        o.opt("problem.n", Some(7i64));
        o.sets(&["encoder.hidden_dim=16".into(), "mode=sum".into()]).unwrap();
        let t = resolve_table(None, &o, Some("seed")).unwrap();
        assert_eq!(t["problem"]["n"].as_integer(), Some(7));
        assert_eq!(t["encoder"]["hidden_dim"].as_integer(), Some(16));
        assert_eq!(t["mode"].as_str(), Some("sum"));
        assert!(t["seed"].as_integer().unwrap() >= 0);
    }

    #[test]
    fn given_seed_is_kept() {
        let mut o = Overrides::default();
        o.opt("seed", Some(3i64));
        let t = resolve_table(None, &o, Some("seed")).unwrap();
        assert_eq!(t["seed"].as_integer(), Some(3));
    }
}
