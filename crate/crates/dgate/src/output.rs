//! CSV writers and the run manifest.

use std::fs;
use std::path::{Path, PathBuf};

use dgate_core::optim::TraceRecord;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::experiments::decay::DecayRun;
use crate::experiments::path::{AggregateRow, PathRecord};
use crate::experiments::toy::ToyTrajectory;

pub const MANIFEST: &str = "manifest.json";

/// Everything needed to rerun a command.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub version: String,
    pub config: serde_json::Value,
    pub seeds: Vec<u64>,
    /// Free-form notes such as the initialization scheme.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
    /// Written files, relative to the output directory.
    pub outputs: Vec<String>,
}

impl Manifest {
    pub fn new(command: &str, config: serde_json::Value, seeds: Vec<u64>) -> Self {
        Self {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            config,
            seeds,
            notes: Vec::new(),
            outputs: Vec::new(),
        }
    }
}

/// Creates `dir` if needed; fails if it already holds a manifest and `force` is off.
pub fn prepare_out_dir(dir: &Path, force: bool) -> Result<()> {
    let manifest = dir.join(MANIFEST);
    if manifest.exists() && !force {
        return Err(Error::ManifestExists(manifest));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

pub fn write_manifest(dir: &Path, manifest: &Manifest) -> Result<PathBuf> {
    let path = dir.join(MANIFEST);
    let mut text = serde_json::to_string_pretty(manifest).map_err(|source| Error::Json {
        path: path.clone(),
        source,
    })?;
    text.push('\n');
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(path)
        .map_err(|source| Error::Csv {
            path: path.to_path_buf(),
            source,
        })
}

fn write_rows<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<()> {
    let csv_err = |source| Error::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut w = writer(path)?;
    for row in rows {
        w.serialize(row).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Columns: t, loss_gated, loss_nonsmooth, misalignment, imbalance_max, active_groups.
pub fn write_trace_csv(path: &Path, trace: &[TraceRecord]) -> Result<()> {
    #[derive(Serialize)]
    struct Row {
        t: f64,
        loss_gated: f64,
        loss_nonsmooth: f64,
        misalignment: f64,
        imbalance_max: f64,
        active_groups: usize,
    }
    if trace.is_empty() {
        return write_header(path, &["t", "loss_gated", "loss_nonsmooth", "misalignment", "imbalance_max", "active_groups"]);
    }
    write_rows(
        path,
        trace.iter().map(|r| Row {
            t: r.t,
            loss_gated: r.loss_gated,
            loss_nonsmooth: r.loss_nonsmooth,
            misalignment: r.misalignment,
            imbalance_max: r.imbalance_max,
            active_groups: r.active_groups,
        }),
    )
}

fn write_header(path: &Path, header: &[&str]) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(header).map_err(|source| Error::Csv {
        path: path.to_path_buf(),
        source,
    })?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub const PATH_COLUMNS: [&str; 9] = [
    "lambda",
    "depth",
    "method",
    "train_objective",
    "test_rmse",
    "active_group_count",
    "support",
    "misalignment",
    "diverged",
];

/// One row per record; `support` is `;`-joined and `depth` is empty when
/// the method has none.
pub fn write_path_csv(path: &Path, records: &[PathRecord]) -> Result<()> {
    let csv_err = |source| Error::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut w = writer(path)?;
    w.write_record(PATH_COLUMNS).map_err(csv_err)?;
    for r in records {
        let support: Vec<String> = r.support.iter().map(|j| j.to_string()).collect();
        w.write_record([
            r.lambda.to_string(),
            r.depth.map(|d| d.to_string()).unwrap_or_default(),
            r.method.to_string(),
            r.train_objective.to_string(),
            r.test_rmse.to_string(),
            r.active_group_count.to_string(),
            support.join(";"),
            r.misalignment.to_string(),
            r.diverged.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_aggregate_csv(path: &Path, rows: &[AggregateRow]) -> Result<()> {
    write_rows(path, rows)
}

/// Fitted rates per `(D, lambda)` next to the theoretical `-4 lambda / D`.
pub fn write_slopes_csv(path: &Path, runs: &[DecayRun]) -> Result<()> {
    #[derive(Serialize)]
    struct Row {
        depth: usize,
        lambda: f64,
        slope_imax: Option<f64>,
        theory: f64,
        rel_err: Option<f64>,
        slope_gap: Option<f64>,
        imax_drift: f64,
        conserved: bool,
        within_tol: bool,
    }
    write_rows(
        path,
        runs.iter().map(|r| Row {
            depth: r.depth,
            lambda: r.lambda,
            slope_imax: r.slope_imax,
            theory: r.theory(),
            rel_err: r.rel_err(),
            slope_gap: r.slope_gap,
            imax_drift: r.imax_drift,
            conserved: r.conserved(),
            within_tol: r.within_tol(),
        }),
    )
}

pub fn decay_file_name(depth: usize, lambda: f64) -> String {
    format!("decay_{depth}_{lambda}.csv")
}

/// Columns: step, method, depth, lambda, w1, w2.
pub fn write_toy_csv(path: &Path, runs: &[ToyTrajectory]) -> Result<()> {
    #[derive(Serialize)]
    struct Row {
        step: usize,
        method: String,
        depth: usize,
        lambda: f64,
        w1: f64,
        w2: f64,
    }
    write_rows(
        path,
        runs.iter().flat_map(|run| {
            run.points.iter().enumerate().map(move |(step, w)| Row {
                step,
                method: run.method.to_string(),
                depth: run.depth,
                lambda: run.lambda,
                w1: w[0],
                w2: w[1],
            })
        }),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_guard() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("nested/run");
        prepare_out_dir(&out, false).unwrap();
        write_manifest(&out, &Manifest::new("toy", serde_json::json!({}), vec![0])).unwrap();
        assert!(matches!(prepare_out_dir(&out, false), Err(Error::ManifestExists(_))));
        prepare_out_dir(&out, true).unwrap();
        let back: Manifest = read_json(&out.join(MANIFEST)).unwrap();
        assert_eq!(back.command, "toy");
    }

    #[test]
    fn trace_csv_layout() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        let rec = TraceRecord {
            t: 0.5,
            loss_gated: 2.0,
            loss_nonsmooth: 1.5,
            misalignment: 0.25,
            imbalance_max: 1.0,
            active_groups: 3,
        };
        write_trace_csv(&path, &[rec]).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert_eq!(
            text,
            "t,loss_gated,loss_nonsmooth,misalignment,imbalance_max,active_groups\n0.5,2.0,1.5,0.25,1.0,3\n"
        );
        write_trace_csv(&path, &[]).unwrap();
        assert_eq!(fs::read_to_string(&path).unwrap().lines().count(), 1);
    }
}
