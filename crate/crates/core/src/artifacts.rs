//! CSV and JSON files written and read by the `wncs` tool.
//!
//! CSV files are plain tables. Each has a JSON companion wrapping the same
//! data in an [`Envelope`] that carries the schema version, the resolved run
//! configuration and its hash. Infinite numbers are written as `inf` in CSV
//! and as `null` in JSON.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::RunConfig;
use crate::grid::Grid;
use crate::kernel::StateSpace;
use crate::model::Action;
use crate::policy::ThresholdPolicy;
use crate::sim::{CostEstimate, TraceRow};
use crate::solver::ValueTable;

pub const ARTIFACT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ArtifactError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        source: serde_json::Error,
    },
    #[error("{path}: {source}")]
    Csv { path: PathBuf, source: csv::Error },
    #[error("{path}: expected a {expected} artifact with schema version {ARTIFACT_SCHEMA_VERSION}, found {found} version {version}")]
    Kind {
        path: PathBuf,
        expected: &'static str,
        found: String,
        version: u32,
    },
    #[error("{path}: {reason}")]
    Malformed { path: PathBuf, reason: String },
}

/// JSON wrapper shared by all artifacts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Envelope<T> {
    pub schema_version: u32,
    pub kind: String,
    pub config_hash: String,
    pub config: RunConfig,
    #[serde(flatten)]
    pub body: T,
}

impl<T> Envelope<T> {
    pub fn new(kind: &str, config: &RunConfig, body: T) -> Self {
        Envelope {
            schema_version: ARTIFACT_SCHEMA_VERSION,
            kind: kind.to_string(),
            config_hash: config.hash(),
            config: config.clone(),
            body,
        }
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), ArtifactError> {
    let io = |e| ArtifactError::Io {
        path: path.to_path_buf(),
        source: e,
    };
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    serde_json::to_writer_pretty(&mut w, value).map_err(|e| ArtifactError::Json {
        path: path.to_path_buf(),
        source: e,
    })?;
    w.write_all(b"\n").map_err(io)?;
    w.flush().map_err(io)
}

pub fn read_envelope<T: DeserializeOwned>(
    path: &Path,
    kind: &'static str,
) -> Result<Envelope<T>, ArtifactError> {
    let text = fs::read_to_string(path).map_err(|e| ArtifactError::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    let head: serde_json::Value = serde_json::from_str(&text).map_err(|e| ArtifactError::Json {
        path: path.to_path_buf(),
        source: e,
    })?;
    let found = head
        .get("kind")
        .and_then(|k| k.as_str())
        .unwrap_or("unknown")
        .to_string();
    let version = head
        .get("schema_version")
        .and_then(|v| v.as_u64())
        .unwrap_or(0) as u32;
    if found != kind || version != ARTIFACT_SCHEMA_VERSION {
        return Err(ArtifactError::Kind {
            path: path.to_path_buf(),
            expected: kind,
            found,
            version,
        });
    }
    serde_json::from_value(head).map_err(|e| ArtifactError::Json {
        path: path.to_path_buf(),
        source: e,
    })
}

/// Shortest round-trip form; `inf`/`-inf`/`nan` for non-finite values.
pub fn fmt_num(x: f64) -> String {
    if x.is_nan() {
        "nan".into()
    } else if x.is_infinite() {
        if x > 0.0 { "inf" } else { "-inf" }.into()
    } else {
        format!("{x:?}")
    }
}

fn fmt_opt(x: Option<f64>) -> String {
    fmt_num(x.unwrap_or(f64::INFINITY))
}

fn write_csv(
    path: &Path,
    header: &[&str],
    rows: impl IntoIterator<Item = Vec<String>>,
) -> Result<(), ArtifactError> {
    let err = |e| ArtifactError::Csv {
        path: path.to_path_buf(),
        source: e,
    };
    let mut w = csv::Writer::from_path(path).map_err(err)?;
    w.write_record(header).map_err(err)?;
    for row in rows {
        w.write_record(&row).map_err(err)?;
    }
    w.flush().map_err(|e| ArtifactError::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

/// Value table in a JSON-safe layout: inadmissible `Q` entries are `null`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueTableBody {
    pub grid: Grid,
    pub battery_cap: u32,
    pub iteration_count: usize,
    pub final_residual: Option<f64>,
    pub v: Vec<f64>,
    pub q: Vec<[Option<f64>; 3]>,
    pub policy: Vec<Action>,
}

impl ValueTableBody {
    pub fn from_table(t: &ValueTable) -> Self {
        let finite = |x: f64| x.is_finite().then_some(x);
        ValueTableBody {
            grid: t.grid.clone(),
            battery_cap: t.space.battery_cap,
            iteration_count: t.iteration_count,
            final_residual: finite(t.final_residual),
            v: t.v.clone(),
            q: t.q.iter().map(|q| q.map(finite)).collect(),
            policy: t.policy.clone(),
        }
    }

    pub fn into_table(self, path: &Path) -> Result<ValueTable, ArtifactError> {
        let space = StateSpace::new(&self.grid, self.battery_cap);
        let n = space.len();
        if self.v.len() != n || self.q.len() != n || self.policy.len() != n {
            return Err(ArtifactError::Malformed {
                path: path.to_path_buf(),
                reason: format!(
                    "expected {n} states, found v={}, q={}, policy={}",
                    self.v.len(),
                    self.q.len(),
                    self.policy.len()
                ),
            });
        }
        Ok(ValueTable {
            grid: self.grid,
            space,
            v: self.v,
            q: self
                .q
                .iter()
                .map(|q| q.map(|x| x.unwrap_or(f64::INFINITY)))
                .collect(),
            policy: self.policy,
            iteration_count: self.iteration_count,
            final_residual: self.final_residual.unwrap_or(f64::INFINITY),
        })
    }
}

pub const VALUE_TABLE_KIND: &str = "value_table";
pub const THRESHOLDS_KIND: &str = "thresholds";

/// Writes `<stem>.csv` and `<stem>.json`.
pub fn write_value_table(
    dir: &Path,
    stem: &str,
    table: &ValueTable,
    config: &RunConfig,
) -> Result<(), ArtifactError> {
    let space = table.space;
    let mut rows = Vec::with_capacity(space.len());
    for slice in space.slices() {
        for i in 0..space.n_x {
            let k = space.index(i, slice);
            let q = table.q[k];
            rows.push(vec![
                fmt_num(table.grid.x_nodes[i]),
                slice.tau.to_string(),
                slice.y.to_string(),
                slice.b.to_string(),
                fmt_num(table.v[k]),
                fmt_num(q[0]),
                fmt_num(q[1]),
                fmt_num(q[2]),
                table.policy[k].index().to_string(),
            ]);
        }
    }
    write_csv(
        &dir.join(format!("{stem}.csv")),
        &[
            "x",
            "tau",
            "y",
            "b",
            "V",
            "Q_idle",
            "Q_uplink",
            "Q_downlink",
            "action",
        ],
        rows,
    )?;
    write_json(
        &dir.join(format!("{stem}.json")),
        &Envelope::new(VALUE_TABLE_KIND, config, ValueTableBody::from_table(table)),
    )
}

pub fn read_value_table(path: &Path) -> Result<(Envelope<()>, ValueTable), ArtifactError> {
    let env: Envelope<ValueTableBody> = read_envelope(path, VALUE_TABLE_KIND)?;
    let Envelope {
        schema_version,
        kind,
        config_hash,
        config,
        body,
    } = env;
    let table = body.into_table(path)?;
    Ok((
        Envelope {
            schema_version,
            kind,
            config_hash,
            config,
            body: (),
        },
        table,
    ))
}

pub fn write_thresholds(
    dir: &Path,
    policy: &ThresholdPolicy,
    config: &RunConfig,
) -> Result<(), ArtifactError> {
    let rows = policy.thresholds.iter().map(|e| {
        vec![
            e.tau.to_string(),
            e.b.to_string(),
            fmt_opt(e.x_star),
            fmt_opt(e.refined_x_star),
        ]
    });
    write_csv(
        &dir.join("thresholds.csv"),
        &["tau", "b", "x_star", "refined_x_star"],
        rows,
    )?;
    write_json(
        &dir.join("thresholds.json"),
        &Envelope::new(THRESHOLDS_KIND, config, policy),
    )
}

/// Reads a threshold policy from `thresholds.json` or from the JSON companion
/// of a `thresholds.csv`.
pub fn read_thresholds(path: &Path) -> Result<Envelope<ThresholdPolicy>, ArtifactError> {
    let json = if path.extension().is_some_and(|e| e == "csv") {
        path.with_extension("json")
    } else {
        path.to_path_buf()
    };
    read_envelope(&json, THRESHOLDS_KIND)
}

pub const RESULTS_HEADER: [&str; 15] = [
    "policy",
    "mean",
    "se",
    "n_rollouts",
    "horizon",
    "seed",
    "truncation_bound",
    "frac_idle",
    "frac_uplink",
    "frac_downlink",
    "uplink_delivery_rate",
    "downlink_delivery_rate",
    "mean_age",
    "mean_battery",
    "min_battery",
];

pub fn results_rows(results: &[CostEstimate]) -> Vec<Vec<String>> {
    results
        .iter()
        .map(|r| {
            let d = &r.diagnostics;
            vec![
                r.policy.clone(),
                fmt_num(r.mean),
                fmt_num(r.se),
                r.n_rollouts.to_string(),
                r.horizon.to_string(),
                r.seed.to_string(),
                fmt_opt(r.truncation_bound),
                fmt_num(d.action_fractions[0]),
                fmt_num(d.action_fractions[1]),
                fmt_num(d.action_fractions[2]),
                fmt_num(d.uplink_delivery_rate),
                fmt_num(d.downlink_delivery_rate),
                fmt_num(d.mean_age),
                fmt_num(d.mean_battery),
                d.min_battery.to_string(),
            ]
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultsBody {
    pub results: Vec<CostEstimate>,
    /// `E[V(x0, 0, y0, b0)]` from the solved table the policy came from.
    pub optimal_value_reference: Option<f64>,
}

pub fn write_results(
    dir: &Path,
    body: &ResultsBody,
    config: &RunConfig,
) -> Result<(), ArtifactError> {
    write_csv(
        &dir.join("results.csv"),
        &RESULTS_HEADER,
        results_rows(&body.results),
    )?;
    write_json(
        &dir.join("results.json"),
        &Envelope::new("results", config, body),
    )
}

pub fn write_trace(
    dir: &Path,
    traces: &[(String, usize, Vec<TraceRow>)],
) -> Result<(), ArtifactError> {
    let rows = traces.iter().flat_map(|(policy, rollout, rows)| {
        rows.iter().map(move |r| {
            vec![
                policy.clone(),
                rollout.to_string(),
                r.t.to_string(),
                fmt_num(r.x),
                fmt_num(r.xhat),
                r.tau.to_string(),
                r.y.to_string(),
                r.b.to_string(),
                r.u.index().to_string(),
                u8::from(r.delivered).to_string(),
                fmt_num(r.cost),
            ]
        })
    });
    write_csv(
        &dir.join("trace.csv"),
        &[
            "policy",
            "rollout",
            "t",
            "x",
            "xhat",
            "tau",
            "y",
            "b",
            "u",
            "delivered",
            "cost",
        ],
        rows,
    )
}

/// One row of `sweep.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: f64,
    pub tau: u32,
    pub b: u32,
    pub x_star: Option<f64>,
    pub refined_x_star: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRun {
    pub value: f64,
    pub config_hash: String,
    pub converged: bool,
    pub iterations: usize,
    pub final_residual: Option<f64>,
    /// `false` when some downlink region was not an up-set.
    pub threshold_structure: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepBody {
    pub axis: String,
    pub runs: Vec<SweepRun>,
    pub rows: Vec<SweepRow>,
}

pub fn write_sweep(dir: &Path, body: &SweepBody, config: &RunConfig) -> Result<(), ArtifactError> {
    let rows = body.rows.iter().map(|r| {
        vec![
            body.axis.clone(),
            fmt_num(r.value),
            r.tau.to_string(),
            r.b.to_string(),
            fmt_opt(r.x_star),
            fmt_opt(r.refined_x_star),
        ]
    });
    write_csv(
        &dir.join("sweep.csv"),
        &["axis", "value", "tau", "b", "x_star", "refined_x_star"],
        rows,
    )?;
    write_json(
        &dir.join("sweep.json"),
        &Envelope::new("sweep", config, body),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Grid;
    use crate::kernel::build_kernel;
    use crate::model::ModelParams;
    use crate::solver::value_iteration;

    #[test]
    fn number_format() {
        assert_eq!(fmt_num(1.0), "1.0");
        assert_eq!(fmt_num(0.25), "0.25");
        assert_eq!(fmt_num(f64::INFINITY), "inf");
        assert_eq!(fmt_num(1e-300), "1e-300");
        assert_eq!(fmt_num(1234567.5), "1234567.5");
        for x in [0.1, 1.0 / 3.0, 2e-9, 14.480819202275828] {
            assert_eq!(fmt_num(x).parse::<f64>().unwrap(), x);
        }
    }

    #[test]
    fn value_table_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let k = build_kernel(&ModelParams::default(), &Grid::folded(5.0, 6, 3).unwrap()).unwrap();
        let (t, _) = value_iteration(&k, 1e-6, 500).unwrap();
        let cfg = RunConfig::default();
        write_value_table(dir.path(), "value_table", &t, &cfg).unwrap();
        let (env, back) = read_value_table(&dir.path().join("value_table.json")).unwrap();
        assert_eq!(back, t);
        assert_eq!(env.config_hash, cfg.hash());
        assert_eq!(env.kind, VALUE_TABLE_KIND);
        let csv = fs::read_to_string(dir.path().join("value_table.csv")).unwrap();
        assert_eq!(csv.lines().count(), t.space.len() + 1);
        assert!(csv.lines().nth(1).unwrap().starts_with("0.0,0,0,0,"));
        assert!(csv.contains(",inf,"));
        assert!(matches!(
            read_thresholds(&dir.path().join("value_table.json")),
            Err(ArtifactError::Kind { .. })
        ));
    }
}
