//! The run report consumed by the dashboard, plus flat CSV exports.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::clustering::ElbowScan;
use crate::data::Space;
use crate::error::{Error, Result};
use crate::evaluation::{CalibrationResult, RiskCoverageCurve};
use crate::fusion::{CombinerMeta, FeatureSpec, ThresholdChoice};
use crate::link::{DecileGrouping, GroupTrend};
use crate::ood::DistanceDensity;
use crate::record::SceneRecord;

pub const SCHEMA_VERSION: u32 = 1;

/// JSON Schema of the report document.
pub const REPORT_SCHEMA: &str = include_str!("../schema/report.schema.json");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunInfo {
    pub seed: u64,
    pub config_digest: String,
    pub manifest_digest: String,
    pub dataset: String,
    pub generator: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CurvePopulation {
    /// Every evaluated scene.
    All,
    /// Held-out scenes of the combiner split.
    Eval,
}

impl CurvePopulation {
    pub fn as_str(self) -> &'static str {
        match self {
            CurvePopulation::All => "all",
            CurvePopulation::Eval => "eval",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveEntry {
    pub population: CurvePopulation,
    pub curve: RiskCoverageCurve,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub population: CurvePopulation,
    pub score_name: String,
    pub aurc: f64,
    pub risk_at_half: f64,
    pub auc_nrf1: f64,
    pub nrf1_at_half: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSummary {
    pub space: Space,
    pub k: usize,
    pub dim: usize,
    pub digest: String,
    pub wcss: f64,
    pub seed: u64,
    pub iterations_run: usize,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElbowEntry {
    pub space: Space,
    pub scan: ElbowScan,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpaceDensity {
    pub space: Space,
    pub reference: DistanceDensity,
    pub downstream: DistanceDensity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlagSummary {
    pub score_name: String,
    pub threshold: f64,
    pub threshold_source: String,
    pub kept: usize,
    pub discarded: usize,
    pub coverage: f64,
    pub full_mean_f1: f64,
    /// `None` when every scene was discarded.
    pub nonrejected_mean_f1: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CombinerSummary {
    pub name: String,
    pub features: FeatureSpec,
    pub dropped_features: Vec<String>,
    pub weights: Vec<f64>,
    pub bias: f64,
    pub meta: CombinerMeta,
    pub threshold: Option<ThresholdChoice>,
    pub train_scenes: usize,
    pub eval_scenes: usize,
    pub train_failures: usize,
    pub eval_failures: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub schema_version: u32,
    pub run: RunInfo,
    pub scenes: Vec<SceneRecord>,
    pub curves: Vec<CurveEntry>,
    pub summary: Vec<SummaryRow>,
    pub calibration: Vec<CalibrationResult>,
    pub densities: Vec<SpaceDensity>,
    pub elbow: Vec<ElbowEntry>,
    pub models: Vec<ModelSummary>,
    pub flag: Option<FlagSummary>,
    pub combiners: Vec<CombinerSummary>,
    pub groupings: Vec<DecileGrouping>,
    pub trends: Vec<GroupTrend>,
    pub warnings: Vec<String>,
}

impl Report {
    /// Pretty JSON with a trailing newline; struct fields serialize in
    /// declaration order and maps are ordered, so equal reports give equal
    /// bytes.
    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let r: Self = serde_json::from_str(text)?;
        if r.schema_version != SCHEMA_VERSION {
            return Err(Error::Schema(format!(
                "report schema version {} not supported",
                r.schema_version
            )));
        }
        Ok(r)
    }

    pub fn scene(&self, id: &str) -> Option<&SceneRecord> {
        self.scenes.iter().find(|s| s.scene_id == id)
    }

    /// Every scene id referenced by a curve or grouping must be a scene.
    pub fn check_integrity(&self) -> Result<()> {
        let ids: BTreeSet<&str> = self.scenes.iter().map(|s| s.scene_id.as_str()).collect();
        if ids.len() != self.scenes.len() {
            return Err(Error::Schema("duplicate scene ids in report".into()));
        }
        let curve_ids = self.curves.iter().flat_map(|c| c.curve.discard_order.iter());
        let group_ids = self
            .groupings
            .iter()
            .flat_map(|g| g.bins.iter().flat_map(|b| b.scene_ids.iter()));
        for (source_name, id) in curve_ids
            .map(|id| ("curves", id))
            .chain(group_ids.map(|id| ("groupings", id)))
        {
            if !ids.contains(id.as_str()) {
                return Err(Error::DanglingSceneId {
                    scene_id: id.clone(),
                    source_name: source_name.into(),
                });
            }
        }
        Ok(())
    }
}

fn csv_bytes(header: &[&str], rows: impl Iterator<Item = Vec<String>>) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let err = |e: csv::Error| Error::Csv {
        path: "<report>".into(),
        message: e.to_string(),
    };
    w.write_record(header).map_err(err)?;
    for row in rows {
        w.write_record(&row).map_err(err)?;
    }
    w.into_inner().map_err(|e| Error::Csv {
        path: "<report>".into(),
        message: e.to_string(),
    })
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// One row per scene with the named scores, F1, split and flag decision.
pub fn scores_csv(report: &Report, score_names: &[String]) -> Result<Vec<u8>> {
    let mut header = vec!["scene_id"];
    header.extend(score_names.iter().map(String::as_str));
    header.extend(["f1", "classifier_score", "split", "discard"]);
    csv_bytes(
        &header,
        report.scenes.iter().map(|s| {
            let mut row = vec![s.scene_id.clone()];
            row.extend(score_names.iter().map(|n| opt(s.feature(n))));
            row.push(opt(s.feature("f1")));
            row.push(opt(s.feature("classifier_score")));
            row.push(s.fusion.as_ref().map(|f| f.split.as_str().to_owned()).unwrap_or_default());
            row.push(s.discard.map(|d| if d { "discard" } else { "keep" }.to_owned()).unwrap_or_default());
            row
        }),
    )
}

pub fn curves_csv(report: &Report) -> Result<Vec<u8>> {
    csv_bytes(
        &["population", "score_name", "retained", "coverage", "risk", "nonrejected_f1"],
        report.curves.iter().flat_map(|c| {
            c.curve.points.iter().enumerate().map(move |(i, p)| {
                vec![
                    c.population.as_str().to_owned(),
                    c.curve.score_name.clone(),
                    (i + 1).to_string(),
                    p.coverage.to_string(),
                    p.risk.to_string(),
                    p.nonrejected_f1.to_string(),
                ]
            })
        }),
    )
}

pub fn summary_csv(report: &Report) -> Result<Vec<u8>> {
    csv_bytes(
        &["population", "score_name", "aurc", "risk_at_half", "auc_nrf1", "nrf1_at_half"],
        report.summary.iter().map(|r| {
            vec![
                r.population.as_str().to_owned(),
                r.score_name.clone(),
                r.aurc.to_string(),
                r.risk_at_half.to_string(),
                r.auc_nrf1.to_string(),
                r.nrf1_at_half.to_string(),
            ]
        }),
    )
}

pub fn deciles_csv(report: &Report) -> Result<Vec<u8>> {
    csv_bytes(
        &["attribute", "score_name", "bin", "lower", "upper", "size", "mean_score", "mean_f1"],
        report.groupings.iter().flat_map(|g| {
            g.bins.iter().enumerate().map(move |(i, b)| {
                vec![
                    g.attribute.clone(),
                    g.score_name.clone(),
                    i.to_string(),
                    b.lower.to_string(),
                    b.upper.to_string(),
                    b.scene_ids.len().to_string(),
                    opt(b.mean_score),
                    opt(b.mean_f1),
                ]
            })
        }),
    )
}
