//! Merges evaluation reports from several runs over the same world.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::eval::EvalReport;
use crate::jsonl;

use super::config::ExperimentConfig;
use super::run::CONFIG_FILE;

/// Merged table columns and whether lower is better.
pub const COLUMNS: [(&str, bool); 6] = [
    ("kl_to_expert", true),
    ("kl_seen", true),
    ("kl_unseen", true),
    ("heldout_nll", true),
    ("mean_len", false),
    ("success_rate", false),
];

/// Columns that take part in best-value marking. Mean length has no
/// preferred direction.
const RANKED: [&str; 5] = ["kl_to_expert", "kl_seen", "kl_unseen", "heldout_nll", "success_rate"];

#[derive(Clone, Debug, PartialEq)]
pub struct CompareRow {
    pub run: String,
    pub method: String,
    /// Values in [`COLUMNS`] order; `None` where the metric is undefined.
    pub values: Vec<Option<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CompareTable {
    pub rows: Vec<CompareRow>,
    /// For each ranked column, the indices of rows holding its best value.
    pub best: Vec<(String, Vec<usize>)>,
}

fn row(run: &str, r: &EvalReport) -> CompareRow {
    let finite = |v: f64| if v.is_finite() { Some(v) } else { None };
    CompareRow {
        run: run.to_string(),
        method: r.method.clone(),
        values: vec![
            finite(r.kl_to_expert),
            finite(r.seen.kl_to_expert),
            finite(r.unseen.kl_to_expert),
            finite(r.heldout_nll),
            finite(r.mean_response_length),
            r.task_success_rate,
        ],
    }
}

/// Keys at which two world specs differ, rendered `key: a != b`.
fn world_diff(a: &ExperimentConfig, b: &ExperimentConfig) -> Vec<String> {
    let to_map = |c: &ExperimentConfig| match toml::Value::try_from(&c.world) {
        Ok(toml::Value::Table(t)) => t,
        _ => toml::map::Map::new(),
    };
    let (ma, mb) = (to_map(a), to_map(b));
    let mut keys: Vec<&String> = ma.keys().chain(mb.keys()).collect();
    keys.sort();
    keys.dedup();
    let mut out: Vec<String> = keys
        .into_iter()
        .filter(|k| ma.get(*k) != mb.get(*k))
        .map(|k| {
            let show = |v: Option<&toml::Value>| v.map(|v| v.to_string()).unwrap_or_else(|| "<unset>".into());
            format!("world.{k}: {} != {}", show(ma.get(k)), show(mb.get(k)))
        })
        .collect();
    if a.world_seed() != b.world_seed() {
        out.push(format!("world_seed: {} != {}", a.world_seed(), b.world_seed()));
    }
    out
}

fn run_name(dir: &Path) -> String {
    dir.file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| dir.display().to_string())
}

/// Loads each run's config and evaluation report and merges them.
pub fn compare(dirs: &[PathBuf]) -> Result<CompareTable> {
    if dirs.len() < 2 {
        return Err(Error::Input("compare needs at least two run directories".into()));
    }
    let mut configs = Vec::with_capacity(dirs.len());
    let mut missing = Vec::new();
    for d in dirs {
        for f in [d.join(CONFIG_FILE), d.join("eval/report.jsonl")] {
            if !f.exists() {
                missing.push(f);
            }
        }
    }
    if !missing.is_empty() {
        return Err(Error::MissingArtifacts(missing));
    }
    for d in dirs {
        let path = d.join(CONFIG_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        configs.push(ExperimentConfig::from_toml(&text)?);
    }
    let mut diff = Vec::new();
    for (d, c) in dirs.iter().zip(&configs).skip(1) {
        for line in world_diff(&configs[0], c) {
            diff.push(format!("{} vs {}: {line}", run_name(&dirs[0]), run_name(d)));
        }
    }
    if !diff.is_empty() {
        return Err(Error::WorldMismatch(diff));
    }
    let mut rows = Vec::new();
    for d in dirs {
        let reports: Vec<EvalReport> = jsonl::read(&d.join("eval/report.jsonl"))?;
        rows.extend(reports.iter().map(|r| row(&run_name(d), r)));
    }
    let best = RANKED
        .iter()
        .map(|&name| {
            let (col, lower) = COLUMNS
                .iter()
                .enumerate()
                .find(|(_, c)| c.0 == name)
                .map(|(i, c)| (i, c.1))
                .expect("ranked column exists");
            let vals: Vec<(usize, f64)> = rows
                .iter()
                .enumerate()
                .filter_map(|(i, r)| r.values[col].map(|v| (i, v)))
                .collect();
            let target = vals
                .iter()
                .map(|v| v.1)
                .fold(None, |acc: Option<f64>, v| match acc {
                    None => Some(v),
                    Some(a) => Some(if lower { a.min(v) } else { a.max(v) }),
                });
            let idx = match target {
                Some(t) => vals.iter().filter(|v| v.1 == t).map(|v| v.0).collect(),
                None => vec![],
            };
            (name.to_string(), idx)
        })
        .collect();
    Ok(CompareTable { rows, best })
}

impl CompareTable {
    /// Columns a row holds the best value in.
    pub fn best_in(&self, row: usize) -> Vec<&str> {
        self.best
            .iter()
            .filter(|(_, rows)| rows.contains(&row))
            .map(|(c, _)| c.as_str())
            .collect()
    }

    /// One row per (run, method); `*` marks best values and `best_in` lists
    /// the columns a row wins.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("run,method");
        for (c, _) in COLUMNS {
            let _ = write!(s, ",{c}");
        }
        s.push_str(",best_in\n");
        for (i, r) in self.rows.iter().enumerate() {
            let wins = self.best_in(i);
            let _ = write!(s, "{},{}", r.run, r.method);
            for ((c, _), v) in COLUMNS.iter().zip(&r.values) {
                match v {
                    Some(v) => {
                        let mark = if wins.contains(c) { "*" } else { "" };
                        let _ = write!(s, ",{v:.6}{mark}");
                    }
                    None => s.push(','),
                }
            }
            let _ = writeln!(s, ",{}", wins.join(";"));
        }
        s
    }
}
