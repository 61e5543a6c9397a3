//! Experiment reports.
//!
//! A report is line-delimited JSON. Every record is one newline-terminated
//! line tagged by `"record"`:
//!
//! ```text
//! {"record":"header","schema":"fedsim-report","version":1,"mode":...,"config":{...}}
//! {"record":"profile",...}      zero or more
//! {"record":"round",...}        zero or more, ordered by (round, client_id)
//! {"record":"summary",...,"records":<profile + round count>}
//! ```
//!
//! The trailing summary carries the record count, so a file cut short is
//! always detected.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cloud::TrainConfig;
use crate::error::{Error, Result};
use crate::eval::RetrievalScores;
use crate::profiler::ProfileResult;

pub const REPORT_SCHEMA: &str = "fedsim-report";
pub const REPORT_VERSION: u32 = 1;

/// One client's record for one round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub round: usize,
    pub client_id: usize,
    pub epochs_consumed: usize,
    /// Clusters used as training labels this round.
    pub clusters_trained: usize,
    /// Clusters after this round's merges.
    pub cluster_count: usize,
    /// Cumulative average batch precision of the last epoch.
    pub mean_batch_precision: f64,
    pub max_batch_precision: f64,
    pub early_stopped: bool,
    pub clustering_exhausted: bool,
    /// EMA weight applied by the personalized update, when enabled.
    pub mu: Option<f64>,
    pub local: RetrievalScores,
    pub global: Option<RetrievalScores>,
}

impl RoundMetrics {
    fn validate(&self) -> std::result::Result<(), String> {
        let unit = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(format!("{name} = {v} outside [0, 1]"))
            }
        };
        let scores = |prefix: &str, s: &RetrievalScores| {
            unit(&format!("{prefix}.rank1"), s.rank1)?;
            unit(&format!("{prefix}.rank5"), s.rank5)?;
            unit(&format!("{prefix}.rank10"), s.rank10)?;
            unit(&format!("{prefix}.map"), s.map)
        };
        if self.epochs_consumed == 0 {
            return Err("epochs_consumed must be >= 1".into());
        }
        unit("mean_batch_precision", self.mean_batch_precision)?;
        unit("max_batch_precision", self.max_batch_precision)?;
        if let Some(mu) = self.mu {
            unit("mu", mu)?;
        }
        scores("local", &self.local)?;
        if let Some(g) = &self.global {
            scores("global", g)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunMode {
    Federated,
    Standalone,
}

/// Best-over-rounds scores of one client.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientBest {
    pub client_id: usize,
    pub local_rank1: f64,
    pub local_map: f64,
    pub global_rank1: Option<f64>,
    pub global_map: Option<f64>,
    /// Best rank-1 of either the local or the global model.
    pub rank1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportSummary {
    /// Sum of epochs consumed over all rounds and clients.
    pub training_epochs: usize,
    pub profiling_epochs: usize,
    /// Total computation in epochs: training plus profiling.
    pub computation_cost: usize,
    pub best: Vec<ClientBest>,
}

impl ReportSummary {
    pub fn from_records(rounds: &[RoundMetrics], profiles: &[ProfileResult]) -> Self {
        let training_epochs = rounds.iter().map(|m| m.epochs_consumed).sum();
        let profiling_epochs = profiles.iter().map(|p| p.epochs_spent).sum();
        let mut best: BTreeMap<usize, ClientBest> = BTreeMap::new();
        for m in rounds {
            let entry = best.entry(m.client_id).or_insert(ClientBest {
                client_id: m.client_id,
                local_rank1: 0.0,
                local_map: 0.0,
                global_rank1: None,
                global_map: None,
                rank1: 0.0,
            });
            entry.local_rank1 = entry.local_rank1.max(m.local.rank1);
            entry.local_map = entry.local_map.max(m.local.map);
            if let Some(g) = &m.global {
                entry.global_rank1 = Some(entry.global_rank1.map_or(g.rank1, |b| b.max(g.rank1)));
                entry.global_map = Some(entry.global_map.map_or(g.map, |b| b.max(g.map)));
            }
            entry.rank1 = entry.local_rank1.max(entry.global_rank1.unwrap_or(0.0));
        }
        ReportSummary {
            training_epochs,
            profiling_epochs,
            computation_cost: training_epochs + profiling_epochs,
            best: best.into_values().collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentReport {
    pub mode: RunMode,
    pub config: TrainConfig,
    pub profiles: Vec<ProfileResult>,
    pub rounds: Vec<RoundMetrics>,
    pub summary: ReportSummary,
}

impl ExperimentReport {
    pub fn new(mode: RunMode, config: TrainConfig, profiles: Vec<ProfileResult>, rounds: Vec<RoundMetrics>) -> Self {
        let summary = ReportSummary::from_records(&rounds, &profiles);
        ExperimentReport {
            mode,
            config,
            profiles,
            rounds,
            summary,
        }
    }

    pub fn best_for(&self, client_id: usize) -> Option<&ClientBest> {
        self.summary.best.iter().find(|b| b.client_id == client_id)
    }

    /// Checks metric ranges and that the summary matches the records.
    pub fn validate(&self) -> std::result::Result<(), String> {
        for m in &self.rounds {
            m.validate()
                .map_err(|e| format!("round {} client {}: {e}", m.round, m.client_id))?;
        }
        let expected = ReportSummary::from_records(&self.rounds, &self.profiles);
        if expected != self.summary {
            return Err("summary does not match the round and profile records".into());
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
enum Record {
    Header {
        schema: String,
        version: u32,
        mode: RunMode,
        config: TrainConfig,
    },
    Profile(ProfileResult),
    Round(RoundMetrics),
    Summary {
        #[serde(flatten)]
        summary: ReportSummary,
        records: usize,
    },
}

fn push_line(out: &mut String, record: &Record) {
    out.push_str(&serde_json::to_string(record).expect("report records serialize"));
    out.push('\n');
}

pub fn report_to_string(report: &ExperimentReport) -> String {
    let mut out = String::new();
    push_line(
        &mut out,
        &Record::Header {
            schema: REPORT_SCHEMA.into(),
            version: REPORT_VERSION,
            mode: report.mode,
            config: report.config.clone(),
        },
    );
    for p in &report.profiles {
        push_line(&mut out, &Record::Profile(p.clone()));
    }
    for m in &report.rounds {
        push_line(&mut out, &Record::Round(m.clone()));
    }
    push_line(
        &mut out,
        &Record::Summary {
            summary: report.summary.clone(),
            records: report.profiles.len() + report.rounds.len(),
        },
    );
    out
}

pub fn report_from_str(text: &str, origin: &str) -> Result<ExperimentReport> {
    let err = |line: usize, message: String| Error::Parse {
        path: origin.to_string(),
        line,
        message,
    };
    if !text.is_empty() && !text.ends_with('\n') {
        let last = text.lines().count();
        return Err(err(last, "record is not newline-terminated (truncated file?)".into()));
    }

    let mut header = None;
    let mut profiles = Vec::new();
    let mut rounds = Vec::new();
    let mut summary = None;
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if summary.is_some() {
            return Err(err(line_no, "record after the summary".into()));
        }
        let record: Record = serde_json::from_str(line).map_err(|e| err(line_no, e.to_string()))?;
        match (record, &header) {
            (
                Record::Header {
                    schema,
                    version,
                    mode,
                    config,
                },
                None,
            ) => {
                if schema != REPORT_SCHEMA || version != REPORT_VERSION {
                    return Err(err(line_no, format!("unsupported schema {schema:?} version {version}")));
                }
                header = Some((mode, config));
            }
            (Record::Header { .. }, Some(_)) => return Err(err(line_no, "duplicate header".into())),
            (_, None) => return Err(err(line_no, "first record must be the header".into())),
            (Record::Profile(p), Some(_)) => {
                if !rounds.is_empty() {
                    return Err(err(line_no, "profile record after round records".into()));
                }
                profiles.push(p);
            }
            (Record::Round(m), Some(_)) => rounds.push(m),
            (Record::Summary { summary: s, records }, Some(_)) => {
                if records != profiles.len() + rounds.len() {
                    return Err(err(
                        line_no,
                        format!(
                            "summary expects {records} records, found {}",
                            profiles.len() + rounds.len()
                        ),
                    ));
                }
                summary = Some(s);
            }
        }
    }
    let line_count = text.lines().count();
    let (mode, config) = header.ok_or_else(|| err(1, "missing header record".into()))?;
    let summary = summary.ok_or_else(|| err(line_count, "missing summary record (truncated file?)".into()))?;
    let report = ExperimentReport {
        mode,
        config,
        profiles,
        rounds,
        summary,
    };
    report.validate().map_err(|m| err(line_count, m))?;
    Ok(report)
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn save_report(path: &Path, report: &ExperimentReport) -> Result<()> {
    std::fs::write(path, report_to_string(report)).map_err(io_err(path))
}

pub fn load_report(path: &Path) -> Result<ExperimentReport> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    report_from_str(&text, &path.display().to_string())
}

#[derive(Serialize)]
struct CsvRow {
    round: usize,
    client_id: usize,
    epochs_consumed: usize,
    clusters_trained: usize,
    cluster_count: usize,
    mean_batch_precision: f64,
    max_batch_precision: f64,
    early_stopped: bool,
    clustering_exhausted: bool,
    mu: Option<f64>,
    local_rank1: f64,
    local_rank5: f64,
    local_rank10: f64,
    local_map: f64,
    global_rank1: Option<f64>,
    global_rank5: Option<f64>,
    global_rank10: Option<f64>,
    global_map: Option<f64>,
}

/// Flat per-round table for plotting.
pub fn write_metrics_csv(writer: impl Write, rounds: &[RoundMetrics]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let csv_err = |e: csv::Error| Error::Io {
        path: "metrics.csv".into(),
        source: std::io::Error::other(e),
    };
    for m in rounds {
        w.serialize(CsvRow {
            round: m.round,
            client_id: m.client_id,
            epochs_consumed: m.epochs_consumed,
            clusters_trained: m.clusters_trained,
            cluster_count: m.cluster_count,
            mean_batch_precision: m.mean_batch_precision,
            max_batch_precision: m.max_batch_precision,
            early_stopped: m.early_stopped,
            clustering_exhausted: m.clustering_exhausted,
            mu: m.mu,
            local_rank1: m.local.rank1,
            local_rank5: m.local.rank5,
            local_rank10: m.local.rank10,
            local_map: m.local.map,
            global_rank1: m.global.map(|g| g.rank1),
            global_rank5: m.global.map(|g| g.rank5),
            global_rank10: m.global.map(|g| g.rank10),
            global_map: m.global.map(|g| g.map),
        })
        .map_err(csv_err)?;
    }
    w.flush().map_err(|source| Error::Io {
        path: "metrics.csv".into(),
        source,
    })
}

/// Profile results keyed by client id.
pub fn profiles_to_string(profiles: &[ProfileResult]) -> String {
    let map: BTreeMap<String, &ProfileResult> = profiles.iter().map(|p| (p.client_id.to_string(), p)).collect();
    let mut s = serde_json::to_string_pretty(&map).expect("profiles serialize");
    s.push('\n');
    s
}

pub fn profiles_from_str(text: &str, origin: &str) -> Result<Vec<ProfileResult>> {
    let map: BTreeMap<String, ProfileResult> = serde_json::from_str(text).map_err(|e| Error::Parse {
        path: origin.to_string(),
        line: e.line(),
        message: e.to_string(),
    })?;
    let mut out: Vec<ProfileResult> = Vec::with_capacity(map.len());
    for (key, p) in map {
        if key != p.client_id.to_string() {
            return Err(Error::Parse {
                path: origin.to_string(),
                line: 0,
                message: format!("key {key:?} does not match client_id {}", p.client_id),
            });
        }
        out.push(p);
    }
    out.sort_by_key(|p| p.client_id);
    Ok(out)
}

pub fn save_profiles(path: &Path, profiles: &[ProfileResult]) -> Result<()> {
    std::fs::write(path, profiles_to_string(profiles)).map_err(io_err(path))
}

pub fn load_profiles(path: &Path) -> Result<Vec<ProfileResult>> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    profiles_from_str(&text, &path.display().to_string())
}
