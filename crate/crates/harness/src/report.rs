//! The master metrics report and its JSON/CSV renderings.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use phyprobe_core::bound::BoundReport;
use phyprobe_core::dynamics::{Histogram, ParamRanges, SplitRole};
use phyprobe_core::mechanics::{CkaReport, DriftReport, ErasureReport, LayerScan};
use phyprobe_core::probes::{LinearProbe, ProbeReport};
use phyprobe_core::symreg::{FrontEntry, LawValidation, ParetoFront};
use phyprobe_core::worldmodel::TrainLog;
use serde::{Deserialize, Serialize};

use crate::cache::write_atomic;
use crate::config::ExperimentConfig;
use crate::error::HarnessError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum StageStatus {
    Completed,
    Skipped { reason: String },
    Failed { error: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProvenanceInfo {
    /// Hash of `config` below.
    pub config_hash: String,
    pub code_version: String,
    /// Seed actually used (differs from the configured one outside
    /// deterministic mode).
    pub seed: u64,
    pub deterministic: bool,
    /// The run's configuration, output directory cleared.
    pub config: ExperimentConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSummary {
    pub name: String,
    pub role: SplitRole,
    pub trajectories: usize,
    pub ranges: ParamRanges,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataSection {
    pub splits: Vec<SplitSummary>,
    pub ood_sets: usize,
    pub ft_m2: Histogram,
    pub ssl_m2: Histogram,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SslSection {
    pub log: TrainLog,
    pub param_count: usize,
    pub checksum: String,
    pub epsilon_id: f64,
    pub epsilon_ood: Vec<(String, f64)>,
    pub epsilon_ood_mean: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeSection {
    pub target: String,
    pub block: String,
    pub scan: LayerScan,
    /// Zero-shot OOD reports of the frozen-model probes.
    pub reports: Vec<ProbeReport>,
    /// The same probes scored on their own training split.
    pub id_reports: Vec<ProbeReport>,
    /// Shrinkage used by the time-dependent probe.
    pub td_shrink: f64,
    pub phyip: LinearProbe,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneSection {
    pub target: String,
    pub logs: BTreeMap<String, TrainLog>,
    pub reports: Vec<ProbeReport>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProjectionSection {
    pub model: String,
    pub block: String,
    /// N × 2.
    pub coords: Vec<[f64; 2]>,
    pub explained: [f64; 2],
    pub degenerate: bool,
    /// Force magnitude of every projected window.
    pub color: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MechanicsSection {
    pub cka: CkaReport,
    pub drift: BTreeMap<String, DriftReport>,
    pub erasure: ErasureReport,
    pub projections: Vec<ProjectionSection>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResidualHistogram {
    pub source: String,
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
    pub mean: f64,
    pub std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SymregSection {
    pub front: ParetoFront,
    pub selected: FrontEntry,
    /// Log–log slope of the selected law in `r`.
    pub r_slope: Option<f64>,
    pub validation: LawValidation,
    pub residuals: Vec<ResidualHistogram>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundSection {
    /// Training log of each Δt's model, keyed `dt{value}`.
    pub logs: BTreeMap<String, TrainLog>,
    pub checkpoints: Vec<String>,
    pub report: BoundReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntegrityCheck {
    pub after_stage: String,
    pub params_checksum: String,
    /// SHA-256 of the stored checkpoint, when it lives in the cache.
    pub file_sha256: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntegritySection {
    pub checks: Vec<IntegrityCheck>,
    pub unchanged: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub secs: f64,
    pub cached: bool,
}

/// Everything that legitimately differs between identical runs.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub started_unix: f64,
    pub finished_unix: f64,
    pub stages: BTreeMap<String, StageTiming>,
    /// Wall times of the training runs.
    pub training: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub provenance: ProvenanceInfo,
    /// Status of every stage that was requested or required.
    pub stages: BTreeMap<String, StageStatus>,
    pub data: Option<DataSection>,
    pub ssl: Option<SslSection>,
    pub probes: Option<ProbeSection>,
    pub finetune: Option<FinetuneSection>,
    pub mechanics: Option<MechanicsSection>,
    pub symreg: Option<SymregSection>,
    pub bound: Option<BoundSection>,
    pub integrity: Option<IntegritySection>,
    pub timing: Timing,
}

impl MetricsReport {
    pub fn new(provenance: ProvenanceInfo) -> Self {
        Self {
            provenance,
            stages: BTreeMap::new(),
            data: None,
            ssl: None,
            probes: None,
            finetune: None,
            mechanics: None,
            symreg: None,
            bound: None,
            integrity: None,
            timing: Timing::default(),
        }
    }

    pub fn to_json(&self) -> Result<Vec<u8>, HarnessError> {
        let mut v = serde_json::to_vec_pretty(self)?;
        v.push(b'\n');
        Ok(v)
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self, HarnessError> {
        Ok(serde_json::from_slice(bytes)?)
    }

    /// JSON with the timing section blanked; equal for equal runs.
    pub fn canonical_bytes(&self) -> Result<Vec<u8>, HarnessError> {
        Self { timing: Timing::default(), ..self.clone() }.to_json()
    }

    /// Whether every recorded stage completed.
    pub fn succeeded(&self) -> bool {
        self.stages.values().all(|s| *s == StageStatus::Completed)
    }

    fn probe_report(&self, method: &str) -> Option<&ProbeReport> {
        let p = self.probes.iter().flat_map(|p| &p.reports);
        let f = self.finetune.iter().flat_map(|f| &f.reports);
        p.chain(f).find(|r| r.method.name() == method)
    }

    /// Mean OOD ρ of a method, if it was evaluated.
    pub fn method_rho(&self, method: &str) -> Option<f64> {
        self.probe_report(method).map(|r| r.rho_mean)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Format {
    Json,
    Csv,
}

impl FromStr for Format {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self, HarnessError> {
        match s {
            "json" => Ok(Format::Json),
            "csv" => Ok(Format::Csv),
            other => Err(HarnessError::Config(format!("unknown format {other}"))),
        }
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn csv_bytes(header: &[&str], rows: Vec<Vec<String>>) -> Result<Vec<u8>, HarnessError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let err = |e: csv::Error| HarnessError::Cache(format!("csv: {e}"));
    w.write_record(header).map_err(err)?;
    for r in rows {
        w.write_record(&r).map_err(err)?;
    }
    w.into_inner().map_err(|e| HarnessError::Cache(format!("csv: {e}")))
}

/// One row per (method, OOD set).
pub fn baseline_csv(report: &MetricsReport) -> Result<Option<Vec<u8>>, HarnessError> {
    let reports: Vec<&ProbeReport> = report
        .probes
        .iter()
        .flat_map(|p| &p.reports)
        .chain(report.finetune.iter().flat_map(|f| &f.reports))
        .collect();
    if reports.is_empty() {
        return Ok(None);
    }
    let rows = reports
        .iter()
        .flat_map(|r| {
            r.sets.iter().map(move |s| {
                vec![r.method.name().to_string(), s.set.clone(), s.samples.to_string(), s.rho.to_string(), opt(s.mape)]
            })
        })
        .collect();
    csv_bytes(&["method", "set", "samples", "rho", "mape"], rows).map(Some)
}

fn layer_scan_csv(scan: &LayerScan) -> Result<Vec<u8>, HarnessError> {
    let rows = scan
        .entries
        .iter()
        .map(|e| {
            vec![
                e.block.clone(),
                e.linear.rho_mean.to_string(),
                e.linear.rho_std.to_string(),
                opt(e.linear.mape_mean),
                opt(e.mlp.as_ref().map(|m| m.rho_mean)),
                opt(e.mlp.as_ref().map(|m| m.rho_std)),
                opt(e.mlp.as_ref().and_then(|m| m.mape_mean)),
            ]
        })
        .collect();
    csv_bytes(&["block", "linear_rho_mean", "linear_rho_std", "linear_mape_mean", "mlp_rho_mean", "mlp_rho_std", "mlp_mape_mean"], rows)
}

/// Rows are layers, columns the concept set.
pub fn erasure_csv(erasure: &ErasureReport, order: &[String]) -> Result<Vec<u8>, HarnessError> {
    let mut concepts: Vec<&String> = order.iter().filter(|c| erasure.mean_shift.contains_key(*c)).collect();
    concepts.extend(erasure.mean_shift.keys().filter(|c| !order.contains(c)));
    let mut header = vec!["layer"];
    header.extend(concepts.iter().map(|c| c.as_str()));
    let mut rows: Vec<Vec<String>> = erasure
        .layers
        .iter()
        .map(|l| std::iter::once(l.layer.clone()).chain(concepts.iter().map(|c| opt(l.shift.get(*c).copied().flatten()))).collect())
        .collect();
    rows.push(std::iter::once("mean".to_string()).chain(concepts.iter().map(|c| opt(erasure.mean_shift[*c]))).collect());
    csv_bytes(&header, rows)
}

fn mechanics_csvs(m: &MechanicsSection, order: &[String], out: &mut Vec<(String, Vec<u8>)>) -> Result<(), HarnessError> {
    let rows = m.cka.blocks.iter().map(|e| vec![e.block.clone(), e.cka.to_string()]).collect();
    out.push(("cka.csv".into(), csv_bytes(&["block", "cka"], rows)?));
    let mut rows = Vec::new();
    for (model, d) in &m.drift {
        for (kind, list) in [("layer", &d.layers), ("tensor", &d.tensors)] {
            for t in list {
                rows.push(vec![
                    model.clone(),
                    kind.to_string(),
                    t.name.clone(),
                    t.delta.to_string(),
                    t.change_norm.to_string(),
                    t.reference_norm.to_string(),
                ]);
            }
        }
    }
    out.push(("drift.csv".into(), csv_bytes(&["model", "kind", "name", "delta", "change_norm", "reference_norm"], rows)?));
    out.push(("erasure.csv".into(), erasure_csv(&m.erasure, order)?));
    let rows = m
        .projections
        .iter()
        .flat_map(|p| {
            p.coords.iter().zip(&p.color).map(move |(c, col)| {
                vec![p.model.clone(), p.block.clone(), c[0].to_string(), c[1].to_string(), col.to_string()]
            })
        })
        .collect();
    out.push(("projection.csv".into(), csv_bytes(&["model", "block", "x", "y", "force_magnitude"], rows)?));
    Ok(())
}

fn symreg_files(s: &SymregSection, out: &mut Vec<(String, Vec<u8>)>) -> Result<(), HarnessError> {
    let rows = s
        .front
        .entries
        .iter()
        .map(|e| vec![e.complexity.to_string(), e.mse.to_string(), opt(e.score), e.expression.clone()])
        .collect();
    out.push(("symreg_front.csv".into(), csv_bytes(&["complexity", "mse", "score", "expression"], rows)?));
    let rows = s
        .residuals
        .iter()
        .flat_map(|h| {
            h.counts.iter().enumerate().map(move |(i, c)| {
                vec![h.source.clone(), h.edges[i].to_string(), h.edges[i + 1].to_string(), c.to_string()]
            })
        })
        .collect();
    out.push(("residual_hist.csv".into(), csv_bytes(&["source", "lo", "hi", "count"], rows)?));
    let law = format!(
        "{}\nr_slope: {}\nood_rho_mean: {}\n",
        s.selected.expression,
        opt(s.r_slope),
        s.validation.rho_mean
    );
    out.push(("law.txt".into(), law.into_bytes()));
    Ok(())
}

fn bound_csv(b: &BoundSection) -> Result<Vec<u8>, HarnessError> {
    let rows = b
        .report
        .points
        .iter()
        .zip(&b.report.fit.terms)
        .map(|(p, t)| {
            vec![
                p.checkpoint.clone(),
                p.target.clone(),
                p.dt.to_string(),
                p.epsilon.to_string(),
                p.k_phi.to_string(),
                p.var_x.to_string(),
                p.probe_error.to_string(),
                t.bound.to_string(),
                t.slack.to_string(),
            ]
        })
        .collect();
    csv_bytes(&["checkpoint", "target", "dt", "epsilon", "k_phi", "var_x", "probe_error", "bound", "slack"], rows)
}

/// Every output file of the report, rendered in memory.
pub fn render(report: &MetricsReport, formats: &[Format]) -> Result<Vec<(String, Vec<u8>)>, HarnessError> {
    let mut out = Vec::new();
    if formats.contains(&Format::Json) {
        out.push(("report.json".to_string(), report.to_json()?));
    }
    if formats.contains(&Format::Csv) {
        if let Some(b) = baseline_csv(report)? {
            out.push(("baseline.csv".into(), b));
        }
        if let Some(p) = &report.probes {
            out.push(("layer_scan.csv".into(), layer_scan_csv(&p.scan)?));
        }
        if let Some(m) = &report.mechanics {
            mechanics_csvs(m, &report.provenance.config.analysis.concepts, &mut out)?;
        }
        if let Some(s) = &report.symreg {
            symreg_files(s, &mut out)?;
        }
        if let Some(b) = &report.bound {
            out.push(("bound_sweep.csv".into(), bound_csv(b)?));
        }
    }
    Ok(out)
}

/// Renders the report and writes each file atomically into `dir`. Nothing
/// is written unless every file rendered.
pub fn emit_report(report: &MetricsReport, dir: &Path, formats: &[Format]) -> Result<Vec<PathBuf>, HarnessError> {
    let files = render(report, formats)?;
    let mut written = Vec::with_capacity(files.len());
    for (name, bytes) in files {
        let path = dir.join(name);
        write_atomic(&path, &bytes)?;
        written.push(path);
    }
    Ok(written)
}
