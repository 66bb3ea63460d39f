//! Per-scene ledger of every score the pipeline computes.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::Space;
use crate::evaluation::{ConfusionCounts, SegMetrics};
use crate::ood::OodScore;
use crate::uncertainty::{PixelMetric, SceneUncertainty};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OodSummary {
    pub d_nearest: f64,
    pub normalized_distance: f64,
    pub ncdd: f64,
    pub nearest_index: usize,
    pub degenerate: bool,
}

impl From<&OodScore> for OodSummary {
    fn from(s: &OodScore) -> Self {
        Self {
            d_nearest: s.d_nearest,
            normalized_distance: s.normalized_distance(),
            ncdd: s.ncdd,
            nearest_index: s.nearest_index,
            degenerate: s.degenerate,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UncertaintySummary {
    pub roi_size: usize,
    pub empty_roi: bool,
    pub scores: BTreeMap<PixelMetric, Option<f64>>,
}

impl From<&SceneUncertainty> for UncertaintySummary {
    fn from(u: &SceneUncertainty) -> Self {
        Self {
            roi_size: u.roi.size(),
            empty_roi: u.roi.empty_roi,
            scores: u.scores.iter().map(|s| (s.metric, s.value)).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneEvaluation {
    pub confusion: ConfusionCounts,
    pub metrics: SegMetrics,
    /// F1 used for risk: the measured F1, or 1 when it is undefined.
    pub f1_for_risk: f64,
    pub f1_undefined: bool,
}

impl SceneEvaluation {
    pub fn new(confusion: ConfusionCounts, metrics: SegMetrics) -> Self {
        Self {
            confusion,
            f1_for_risk: metrics.f1.unwrap_or(1.0),
            f1_undefined: metrics.f1.is_none(),
            metrics,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Eval,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Eval => "eval",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionOutcome {
    pub split: Split,
    pub failure: bool,
    pub classifier_score: f64,
    /// Score of the combiner that also sees attribute columns.
    pub classifier_score_attributes: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneRecord {
    pub scene_id: String,
    pub ood: BTreeMap<Space, OodSummary>,
    pub uncertainty: Option<UncertaintySummary>,
    pub evaluation: Option<SceneEvaluation>,
    pub attributes: BTreeMap<String, Option<f64>>,
    pub fusion: Option<FusionOutcome>,
    /// Decision of the image-level uncertainty flag, when a threshold is set.
    pub discard: Option<bool>,
}

impl SceneRecord {
    pub fn new(scene_id: impl Into<String>) -> Self {
        Self {
            scene_id: scene_id.into(),
            ood: BTreeMap::new(),
            uncertainty: None,
            evaluation: None,
            attributes: BTreeMap::new(),
            fusion: None,
            discard: None,
        }
    }

    /// Looks up a named per-scene value.
    ///
    /// Names: `mean_probability`, `entropy`, `variance`, `mutual_information`,
    /// `{d_nearest,normalized_distance,ncdd}_{raw,embeddings}`,
    /// `classifier_score`, `classifier_score_attributes`, `f1`, or an
    /// attribute column. A leading `-` negates.
    pub fn feature(&self, name: &str) -> Option<f64> {
        if let Some(inner) = name.strip_prefix('-') {
            return self.feature(inner).map(|v| -v);
        }
        if let Ok(metric) = name.parse::<PixelMetric>() {
            return self.uncertainty.as_ref()?.scores.get(&metric).copied().flatten();
        }
        for space in Space::ALL {
            let suffix = space.score_suffix();
            let Some(stem) = name.strip_suffix(suffix).and_then(|s| s.strip_suffix('_')) else {
                continue;
            };
            let ood = self.ood.get(&space);
            return match stem {
                "d_nearest" => ood.map(|o| o.d_nearest),
                "normalized_distance" => ood.map(|o| o.normalized_distance),
                "ncdd" => ood.map(|o| o.ncdd),
                _ => self.attributes.get(name).copied().flatten(),
            };
        }
        match name {
            "classifier_score" => self.fusion.as_ref().map(|f| f.classifier_score),
            "classifier_score_attributes" => self.fusion.as_ref()?.classifier_score_attributes,
            "f1" => self.evaluation.as_ref().map(|e| e.f1_for_risk),
            _ => self.attributes.get(name).copied().flatten(),
        }
    }
}
