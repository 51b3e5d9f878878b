use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use hallu_core::metrics::spearman;
use serde::{Deserialize, Serialize};

use super::stage;
use crate::config::RunConfig;
use crate::error::{fail, Classify, CliResult, Kind};
use crate::output::{now_unix, run_digest, run_dir, Inputs};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Row {
    pub model_id: String,
    pub metrics: BTreeMap<String, f64>,
}

/// One row per model; hand-written files with published values use the same shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Leaderboard {
    pub rows: Vec<Row>,
}

#[derive(Deserialize)]
struct AnyReport {
    kind: String,
    model_id: Option<String>,
    #[serde(default)]
    metrics: BTreeMap<String, f64>,
}

pub fn report(config: &RunConfig, paths: &[PathBuf]) -> CliResult<()> {
    let mut inputs = Inputs::default();
    let mut merged: BTreeMap<String, BTreeMap<String, f64>> = BTreeMap::new();
    let mut sources: BTreeMap<(String, String), &Path> = BTreeMap::new();
    for (i, path) in paths.iter().enumerate() {
        inputs.file(&format!("report{i}"), path)?;
        let bytes = std::fs::read(path).input(format!("reading {}", path.display()))?;
        let r: AnyReport =
            serde_json::from_slice(&bytes).input(format!("parsing {}", path.display()))?;
        let model = r.model_id.ok_or_else(|| {
            fail(
                Kind::Input,
                format!("{}: {} report has no model id", path.display(), r.kind),
            )
        })?;
        if r.metrics.is_empty() {
            return Err(fail(
                Kind::Input,
                format!("{}: {} report carries no metrics", path.display(), r.kind),
            ));
        }
        for (name, value) in r.metrics {
            if let Some(prev) = sources.insert((model.clone(), name.clone()), path) {
                return Err(fail(
                    Kind::Input,
                    format!(
                        "{model} {name} is given by both {} and {}",
                        prev.display(),
                        path.display()
                    ),
                ));
            }
            merged.entry(model.clone()).or_default().insert(name, value);
        }
    }
    let board = Leaderboard {
        rows: merged
            .into_iter()
            .map(|(model_id, metrics)| Row { model_id, metrics })
            .collect(),
    };

    let digest = run_digest("report", &serde_json::Value::Null, &inputs);
    let Some(stage) = stage(run_dir(&config.output_dir, "report", &digest))? else {
        return Ok(());
    };
    let table = render(&board);
    stage.write_json(
        "leaderboard.json",
        &serde_json::json!({
            "kind": "leaderboard",
            "digest": digest,
            "created_unix": now_unix(),
            "inputs": inputs,
            "rows": board.rows,
        }),
    )?;
    stage.write("table.txt", &table)?;
    let dir = stage.commit()?;
    print!("{table}");
    println!("leaderboard written to {}", dir.display());
    Ok(())
}

fn render(board: &Leaderboard) -> String {
    let names: BTreeSet<&str> = board
        .rows
        .iter()
        .flat_map(|r| r.metrics.keys().map(String::as_str))
        .collect();
    let width = board
        .rows
        .iter()
        .map(|r| r.model_id.len())
        .max()
        .unwrap_or(5)
        .max(5);
    let mut out = format!("{:<width$}", "model");
    for n in &names {
        out.push_str(&format!(" {n:>10}"));
    }
    out.push('\n');
    for row in &board.rows {
        out.push_str(&format!("{:<width$}", row.model_id));
        for n in &names {
            let cell = match row.metrics.get(*n) {
                Some(v) if n.starts_with("chair_") => format!("{v:.4}"),
                Some(v) => format!("{v:.1}"),
                None => "-".to_string(),
            };
            out.push_str(&format!(" {cell:>10}"));
        }
        out.push('\n');
    }
    out
}

fn read_board(path: &Path) -> CliResult<Leaderboard> {
    let bytes = std::fs::read(path).input(format!("reading {}", path.display()))?;
    serde_json::from_slice(&bytes).input(format!(
        "{} is not a leaderboard (expected a `rows` list)",
        path.display()
    ))
}

pub fn correlate(a: &Path, b: &Path, pairs: &[String]) -> CliResult<()> {
    let (la, lb) = (read_board(a)?, read_board(b)?);
    for (result, line) in correlations(&la, &lb, pairs)? {
        match result {
            Ok(rho) => println!("{line} {rho:+.4}"),
            Err(reason) => println!("{line} undefined ({reason})"),
        }
    }
    Ok(())
}

type Correlation = (Result<f64, String>, String);

/// Spearman rho per metric pair over the models both leaderboards list.
pub fn correlations(
    a: &Leaderboard,
    b: &Leaderboard,
    pairs: &[String],
) -> CliResult<Vec<Correlation>> {
    let index = |l: &Leaderboard| -> CliResult<BTreeMap<String, BTreeMap<String, f64>>> {
        let mut map = BTreeMap::new();
        for r in &l.rows {
            if map.insert(r.model_id.clone(), r.metrics.clone()).is_some() {
                return Err(fail(
                    Kind::Input,
                    format!("model {} listed twice", r.model_id),
                ));
            }
        }
        Ok(map)
    };
    let (ia, ib) = (index(a)?, index(b)?);
    let only_a: Vec<_> = ia
        .keys()
        .filter(|m| !ib.contains_key(*m))
        .cloned()
        .collect();
    let only_b: Vec<_> = ib
        .keys()
        .filter(|m| !ia.contains_key(*m))
        .cloned()
        .collect();
    if !only_a.is_empty() || !only_b.is_empty() {
        return Err(fail(
            Kind::Input,
            format!("misaligned model sets: only in first {only_a:?}, only in second {only_b:?}"),
        ));
    }
    if ia.len() < 2 {
        return Err(fail(Kind::Input, "need at least two models to correlate"));
    }

    let pairs: Vec<(String, String)> = if pairs.is_empty() {
        let names_a: BTreeSet<&String> = ia.values().flat_map(|m| m.keys()).collect();
        let names_b: BTreeSet<&String> = ib.values().flat_map(|m| m.keys()).collect();
        let shared: Vec<_> = names_a
            .intersection(&names_b)
            .map(|n| ((*n).clone(), (*n).clone()))
            .collect();
        if shared.is_empty() {
            return Err(fail(
                Kind::Input,
                "no shared metric names; choose pairs with --metric A:B",
            ));
        }
        shared
    } else {
        pairs
            .iter()
            .map(|p| {
                p.split_once(':')
                    .map(|(x, y)| (x.to_string(), y.to_string()))
                    .ok_or_else(|| {
                        fail(
                            Kind::Config,
                            format!("--metric expects NAME_A:NAME_B, got {p:?}"),
                        )
                    })
            })
            .collect::<CliResult<_>>()?
    };

    let width = pairs
        .iter()
        .map(|(x, y)| x.len() + y.len() + 4)
        .max()
        .unwrap_or(0);
    let mut out = Vec::new();
    for (ma, mb) in pairs {
        let column =
            |idx: &BTreeMap<String, BTreeMap<String, f64>>, name: &str| -> CliResult<Vec<f64>> {
                idx.iter()
                    .map(|(model, m)| {
                        m.get(name).copied().ok_or_else(|| {
                            fail(Kind::Input, format!("model {model} has no {name}"))
                        })
                    })
                    .collect()
            };
        let (xs, ys) = (column(&ia, &ma)?, column(&ib, &mb)?);
        let label = if ma == mb {
            ma.clone()
        } else {
            format!("{ma} vs {mb}")
        };
        let rho = spearman(&xs, &ys).map_err(|e| e.to_string());
        out.push((rho, format!("{label:<width$} n={}", xs.len())));
    }
    Ok(out)
}
