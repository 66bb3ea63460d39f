//! Ensemble uncertainty for binary segmentation.
//!
//! Per pixel, with member probabilities `p_1..p_M`:
//!
//! - mean probability `p_bar = (1/M) sum p_i`
//! - predictive entropy `H(p_bar)`, binary, in nats
//! - predictive variance `V = (1/M) sum (p_i - p_bar)^2`
//! - mutual information `I = H(p_bar) - (1/M) sum H(p_i)`, clamped at 0
//!
//! Image-level scores average one pixel metric over a region of interest,
//! by default the predicted-event area `p_bar >= 0.5`.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::PredictionStack;
use crate::error::{Error, Result};

/// Binary entropy in nats with `0 ln 0 = 0`.
pub fn binary_entropy(p: f64) -> f64 {
    let term = |q: f64| if q > 0.0 { -q * q.ln() } else { 0.0 };
    term(p) + term(1.0 - p)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PixelMetric {
    MeanProbability,
    Entropy,
    Variance,
    MutualInformation,
}

impl PixelMetric {
    pub const ALL: [PixelMetric; 4] = [
        PixelMetric::MeanProbability,
        PixelMetric::Entropy,
        PixelMetric::Variance,
        PixelMetric::MutualInformation,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PixelMetric::MeanProbability => "mean_probability",
            PixelMetric::Entropy => "entropy",
            PixelMetric::Variance => "variance",
            PixelMetric::MutualInformation => "mutual_information",
        }
    }

    /// Largest value the metric can take.
    pub fn upper_bound(self) -> f64 {
        match self {
            PixelMetric::MeanProbability => 1.0,
            PixelMetric::Variance => 0.25,
            PixelMetric::Entropy | PixelMetric::MutualInformation => std::f64::consts::LN_2,
        }
    }
}

impl fmt::Display for PixelMetric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PixelMetric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PixelMetric::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown pixel metric {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PixelMetrics {
    pub scene_id: String,
    pub height: usize,
    pub width: usize,
    pub mean_prob: Vec<f64>,
    pub entropy: Vec<f64>,
    pub variance: Vec<f64>,
    pub mutual_info: Vec<f64>,
    /// Largest amount by which mutual information went negative before
    /// clamping.
    pub max_clamped: f64,
}

impl PixelMetrics {
    pub fn map(&self, metric: PixelMetric) -> &[f64] {
        match metric {
            PixelMetric::MeanProbability => &self.mean_prob,
            PixelMetric::Entropy => &self.entropy,
            PixelMetric::Variance => &self.variance,
            PixelMetric::MutualInformation => &self.mutual_info,
        }
    }
}

struct PixelValues {
    mean: f64,
    entropy: f64,
    variance: f64,
    mi: f64,
    clamped: f64,
}

fn pixel_values(members: impl Iterator<Item = f64> + Clone, m: usize) -> PixelValues {
    let inv = 1.0 / m as f64;
    let first = members.clone().next().expect("at least one member");
    if members.clone().all(|p| p == first) {
        // exact agreement, so skip the rounding of the mean
        let entropy = binary_entropy(first);
        return PixelValues {
            mean: first,
            entropy,
            variance: 0.0,
            mi: 0.0,
            clamped: 0.0,
        };
    }
    let mean = members.clone().sum::<f64>() * inv;
    let variance = members.clone().map(|p| (p - mean) * (p - mean)).sum::<f64>() * inv;
    let entropy = binary_entropy(mean);
    let expected = members.map(binary_entropy).sum::<f64>() * inv;
    let raw = entropy - expected;
    PixelValues {
        mean,
        entropy,
        variance,
        mi: raw.max(0.0),
        clamped: (-raw).max(0.0),
    }
}

pub fn pixel_metrics(stack: &PredictionStack) -> Result<PixelMetrics> {
    let (m, n) = (stack.members(), stack.pixels());
    if m == 0 {
        return Err(Error::Empty("prediction stack has no members".into()));
    }
    let probs = stack.probs();
    let values: Vec<PixelValues> = (0..n)
        .into_par_iter()
        .map(|px| pixel_values((0..m).map(|i| probs[i * n + px]), m))
        .collect();
    let mut out = PixelMetrics {
        scene_id: stack.scene_id().to_owned(),
        height: stack.height(),
        width: stack.width(),
        mean_prob: Vec::with_capacity(n),
        entropy: Vec::with_capacity(n),
        variance: Vec::with_capacity(n),
        mutual_info: Vec::with_capacity(n),
        max_clamped: 0.0,
    };
    for v in values {
        out.mean_prob.push(v.mean);
        out.entropy.push(v.entropy);
        out.variance.push(v.variance);
        out.mutual_info.push(v.mi);
        out.max_clamped = out.max_clamped.max(v.clamped);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmptyRoiFallback {
    Abstain,
    /// The `ceil(q * H * W)` pixels with the highest mean probability.
    TopQuantile(f64),
    WholeImage,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoiSpec {
    pub threshold: f64,
    pub fallback: EmptyRoiFallback,
}

impl Default for RoiSpec {
    fn default() -> Self {
        Self {
            threshold: 0.5,
            fallback: EmptyRoiFallback::TopQuantile(0.01),
        }
    }
}

impl RoiSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::Config(format!(
                "ROI threshold must be in (0, 1), got {}",
                self.threshold
            )));
        }
        if let EmptyRoiFallback::TopQuantile(q) = self.fallback {
            if !(q > 0.0 && q <= 1.0) {
                return Err(Error::Config(format!("ROI quantile must be in (0, 1], got {q}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Roi {
    pub mask: Vec<bool>,
    /// No pixel reached the threshold; `mask` comes from the fallback.
    pub empty_roi: bool,
}

impl Roi {
    pub fn size(&self) -> usize {
        self.mask.iter().filter(|&&b| b).count()
    }
}

pub fn roi_mask(mean_prob: &[f64], spec: &RoiSpec) -> Result<Roi> {
    spec.validate()?;
    let mask: Vec<bool> = mean_prob.iter().map(|&p| p >= spec.threshold).collect();
    if mask.iter().any(|&b| b) {
        return Ok(Roi {
            mask,
            empty_roi: false,
        });
    }
    let n = mean_prob.len();
    let mask = match spec.fallback {
        EmptyRoiFallback::Abstain => mask,
        EmptyRoiFallback::WholeImage => vec![true; n],
        EmptyRoiFallback::TopQuantile(q) => {
            let take = ((q * n as f64).ceil() as usize).clamp(1, n.max(1));
            let mut order: Vec<usize> = (0..n).collect();
            // stable: equal probabilities keep row-major order
            order.sort_by(|&a, &b| mean_prob[b].total_cmp(&mean_prob[a]));
            let mut m = vec![false; n];
            for &i in order.iter().take(take) {
                m[i] = true;
            }
            m
        }
    };
    Ok(Roi {
        mask,
        empty_roi: true,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageScore {
    pub scene_id: String,
    pub metric: PixelMetric,
    /// `None` when the ROI was empty and the fallback abstained.
    pub value: Option<f64>,
    pub roi_size: usize,
    pub empty_roi: bool,
}

pub fn image_score(metrics: &PixelMetrics, roi: &Roi, metric: PixelMetric) -> Result<ImageScore> {
    let map = metrics.map(metric);
    if roi.mask.len() != map.len() {
        return Err(Error::ShapeMismatch(format!(
            "ROI has {} pixels, metric map has {}",
            roi.mask.len(),
            map.len()
        )));
    }
    let (sum, count) = map
        .iter()
        .zip(&roi.mask)
        .filter(|(_, &keep)| keep)
        .fold((0.0, 0usize), |(s, c), (v, _)| (s + v, c + 1));
    Ok(ImageScore {
        scene_id: metrics.scene_id.clone(),
        metric,
        value: (count > 0).then(|| sum / count as f64),
        roi_size: count,
        empty_roi: roi.empty_roi,
    })
}

/// Pixel maps, ROI and all four image-level scores for one scene.
#[derive(Debug, Clone)]
pub struct SceneUncertainty {
    pub metrics: PixelMetrics,
    pub roi: Roi,
    pub scores: Vec<ImageScore>,
}

impl SceneUncertainty {
    pub fn score(&self, metric: PixelMetric) -> Option<&ImageScore> {
        self.scores.iter().find(|s| s.metric == metric)
    }

    /// Predicted event mask `p_bar >= threshold`, independent of ROI fallback.
    pub fn predicted_mask(&self, threshold: f64) -> Vec<u8> {
        self.metrics
            .mean_prob
            .iter()
            .map(|&p| u8::from(p >= threshold))
            .collect()
    }
}

pub fn score_scene(stack: &PredictionStack, spec: &RoiSpec) -> Result<SceneUncertainty> {
    let metrics = pixel_metrics(stack)?;
    let roi = roi_mask(&metrics.mean_prob, spec)?;
    let scores = PixelMetric::ALL
        .into_iter()
        .map(|m| image_score(&metrics, &roi, m))
        .collect::<Result<Vec<_>>>()?;
    Ok(SceneUncertainty {
        metrics,
        roi,
        scores,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::LN_2;

    #[test]
    fn unanimous_certain_pixel() {
        let s = PredictionStack::new("a", 3, 1, 1, vec![1.0, 1.0, 1.0], None).unwrap();
        let m = pixel_metrics(&s).unwrap();
        assert_eq!(
            (m.mean_prob[0], m.entropy[0], m.variance[0], m.mutual_info[0]),
            (1.0, 0.0, 0.0, 0.0)
        );
    }

    #[test]
    fn identical_members_are_exactly_certain() {
        for p in [0.1, 0.3, 0.7, 0.123456789] {
            let s = PredictionStack::new("a", 5, 1, 1, vec![p; 5], None).unwrap();
            let m = pixel_metrics(&s).unwrap();
            assert_eq!((m.mean_prob[0], m.variance[0], m.mutual_info[0]), (p, 0.0, 0.0));
        }
    }

    #[test]
    fn split_ensemble_pixel() {
        let s = PredictionStack::new("a", 2, 1, 1, vec![0.0, 1.0], None).unwrap();
        let m = pixel_metrics(&s).unwrap();
        assert_eq!(m.mean_prob[0], 0.5);
        assert!((m.entropy[0] - LN_2).abs() < 1e-15);
        assert_eq!(m.variance[0], 0.25);
        assert!((m.mutual_info[0] - LN_2).abs() < 1e-15);
    }

    #[test]
    fn roi_full_and_fallbacks() {
        let spec = RoiSpec::default();
        let r = roi_mask(&[0.9; 12], &spec).unwrap();
        assert!(!r.empty_roi);
        assert_eq!(r.size(), 12);

        let r = roi_mask(&vec![0.1; 10_000], &spec).unwrap();
        assert!(r.empty_roi);
        assert_eq!(r.size(), 100);
        // equal values: the first 100 in row-major order
        assert!(r.mask[..100].iter().all(|&b| b));

        let abstain = RoiSpec {
            fallback: EmptyRoiFallback::Abstain,
            ..spec
        };
        let r = roi_mask(&[0.1; 4], &abstain).unwrap();
        assert_eq!(r.size(), 0);
        assert!(r.empty_roi);

        let whole = RoiSpec {
            fallback: EmptyRoiFallback::WholeImage,
            ..spec
        };
        assert_eq!(roi_mask(&[0.1; 4], &whole).unwrap().size(), 4);

        let bad = RoiSpec {
            threshold: 1.0,
            ..spec
        };
        assert!(roi_mask(&[0.1], &bad).is_err());
    }

    #[test]
    fn threshold_is_inclusive() {
        let r = roi_mask(&[0.5, 0.49], &RoiSpec::default()).unwrap();
        assert_eq!(r.mask, vec![true, false]);
    }

    fn uniform_metrics(v: f64, n: usize) -> PixelMetrics {
        PixelMetrics {
            scene_id: "x".into(),
            height: 1,
            width: n,
            mean_prob: vec![0.0; n],
            entropy: vec![0.0; n],
            variance: vec![v; n],
            mutual_info: vec![0.0; n],
            max_clamped: 0.0,
        }
    }

    #[test]
    fn image_score_basics() {
        let m = uniform_metrics(0.04, 6);
        let roi = Roi {
            mask: vec![true, false, true, true, false, false],
            empty_roi: false,
        };
        let s = image_score(&m, &roi, PixelMetric::Variance).unwrap();
        assert!((s.value.unwrap() - 0.04).abs() < 1e-15);
        assert_eq!(s.roi_size, 3);

        let mut m = uniform_metrics(0.0, 3);
        m.variance[1] = 0.17;
        let one = Roi {
            mask: vec![false, true, false],
            empty_roi: false,
        };
        assert_eq!(image_score(&m, &one, PixelMetric::Variance).unwrap().value, Some(0.17));

        let none = Roi {
            mask: vec![false; 3],
            empty_roi: true,
        };
        let s = image_score(&m, &none, PixelMetric::Variance).unwrap();
        assert_eq!(s.value, None);
        assert_eq!(s.roi_size, 0);
    }

    #[test]
    fn metric_names_roundtrip() {
        for m in PixelMetric::ALL {
            assert_eq!(m.as_str().parse::<PixelMetric>().unwrap(), m);
        }
        assert!("nope".parse::<PixelMetric>().is_err());
    }
}
