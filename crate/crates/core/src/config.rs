//! Pipeline configuration: one JSON document, every field defaulted.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{ThresholdObjective, DEFAULT_MAX_ITER as FUSION_MAX_ITER, DEFAULT_TOL as FUSION_TOL};
use crate::manifest::sha256_hex;
use crate::uncertainty::RoiSpec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClusteringConfig {
    /// Fixed number of clusters; the elbow choice is used when absent.
    pub k: Option<usize>,
    /// Candidates of the elbow scan; an empty list skips the scan.
    pub elbow_candidates: Vec<usize>,
    pub restarts: usize,
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for ClusteringConfig {
    fn default() -> Self {
        Self {
            k: Some(15),
            elbow_candidates: (2..=30).collect(),
            restarts: 4,
            max_iter: crate::clustering::DEFAULT_MAX_ITER,
            tol: crate::clustering::DEFAULT_TOL,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OodConfig {
    pub alpha: f64,
    /// Defaults to `k - 1`.
    pub beta: Option<f64>,
    pub density_bins: usize,
}

impl Default for OodConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: None,
            density_bins: 30,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UncertaintyConfig {
    pub roi: RoiSpec,
    /// `p_bar` threshold that turns the ensemble mean into a predicted mask.
    pub prediction_threshold: f64,
}

impl Default for UncertaintyConfig {
    fn default() -> Self {
        Self {
            roi: RoiSpec::default(),
            prediction_threshold: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationConfig {
    pub calibration_bins: usize,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        Self {
            calibration_bins: crate::evaluation::DEFAULT_BINS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiscardConfig {
    /// Risk-oriented score names; every one gets a risk-coverage curve.
    pub scores: Vec<String>,
    /// Score of the keep/discard flag.
    pub flag_score: String,
    /// Fixed flag threshold; otherwise chosen to hit `target_coverage`.
    pub threshold: Option<f64>,
    pub target_coverage: f64,
}

impl Default for DiscardConfig {
    fn default() -> Self {
        Self {
            scores: [
                "variance",
                "entropy",
                "mutual_information",
                "-mean_probability",
                "d_nearest_raw",
                "d_nearest_embeddings",
                "-ncdd_raw",
                "-ncdd_embeddings",
            ]
            .map(String::from)
            .to_vec(),
            flag_score: "variance".into(),
            threshold: None,
            target_coverage: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionConfig {
    pub features: Vec<String>,
    /// Attribute columns added for the second combiner; empty disables it.
    pub attribute_features: Vec<String>,
    pub failure_threshold: f64,
    pub train_fraction: f64,
    pub l2: f64,
    pub max_iter: usize,
    pub tol: f64,
    pub threshold_objective: ThresholdObjective,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            features: [
                "variance",
                "entropy",
                "mutual_information",
                "mean_probability",
                "d_nearest_raw",
                "d_nearest_embeddings",
                "ncdd_raw",
                "ncdd_embeddings",
            ]
            .map(String::from)
            .to_vec(),
            attribute_features: ["ele_mt_sav", "ria_ha_ssu", "pst_pc_sse"].map(String::from).to_vec(),
            failure_threshold: 0.5,
            train_fraction: 0.7,
            l2: 1e-2,
            max_iter: FUSION_MAX_ITER,
            tol: FUSION_TOL,
            threshold_objective: ThresholdObjective::MaxDetectionF1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LinkConfig {
    /// Attribute columns to group by; all table columns when empty.
    pub attributes: Vec<String>,
    pub scores: Vec<String>,
}

impl Default for LinkConfig {
    fn default() -> Self {
        Self {
            attributes: Vec::new(),
            scores: ["-ncdd_embeddings", "-ncdd_raw", "variance", "classifier_score"]
                .map(String::from)
                .to_vec(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    /// Worker threads; not part of the digest since results do not depend on it.
    pub threads: Option<usize>,
    pub clustering: ClusteringConfig,
    pub ood: OodConfig,
    pub uncertainty: UncertaintyConfig,
    pub evaluation: EvaluationConfig,
    pub discard: DiscardConfig,
    pub fusion: FusionConfig,
    pub link: LinkConfig,
}

impl PipelineConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let c = &self.clustering;
        if c.k.is_none() && c.elbow_candidates.is_empty() {
            return Err(Error::Config("either clustering.k or elbow candidates are required".into()));
        }
        if matches!(c.k, Some(k) if k < 2) {
            return Err(Error::Config("clustering.k must be >= 2".into()));
        }
        if !(self.ood.alpha > 0.0) || matches!(self.ood.beta, Some(b) if !(b > 0.0)) {
            return Err(Error::Config("NCDD weights must be positive".into()));
        }
        self.uncertainty.roi.validate()?;
        let t = self.uncertainty.prediction_threshold;
        if !(t > 0.0 && t < 1.0) {
            return Err(Error::Config(format!("prediction threshold must be in (0, 1), got {t}")));
        }
        if self.evaluation.calibration_bins == 0 {
            return Err(Error::Config("calibration bins must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.discard.target_coverage) {
            return Err(Error::Config("target coverage must be in [0, 1]".into()));
        }
        if matches!(self.discard.threshold, Some(t) if t.is_nan()) {
            return Err(Error::Config("flag threshold is NaN".into()));
        }
        let f = &self.fusion;
        if !(f.failure_threshold > 0.0 && f.failure_threshold < 1.0) {
            return Err(Error::Config("failure threshold must be in (0, 1)".into()));
        }
        if !(f.train_fraction > 0.0 && f.train_fraction < 1.0) {
            return Err(Error::Config("train fraction must be in (0, 1)".into()));
        }
        if !(f.l2 >= 0.0) {
            return Err(Error::Config("l2 must be >= 0".into()));
        }
        if matches!(self.threads, Some(0)) {
            return Err(Error::Config("threads must be >= 1".into()));
        }
        Ok(())
    }

    /// Canonical JSON of everything that can change results.
    pub fn canonical_json(&self) -> String {
        let mut c = self.clone();
        c.threads = None;
        serde_json::to_string(&c).expect("config serializes")
    }

    pub fn digest(&self) -> String {
        sha256_hex(self.canonical_json().as_bytes())
    }
}
