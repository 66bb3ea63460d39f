//! Score-ordered abstention: risk-coverage curves, AURC and thresholded flags.

use serde::{Deserialize, Serialize};

use super::segmentation::{seg_metrics, ConfusionCounts};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub coverage: f64,
    pub risk: f64,
    pub nonrejected_f1: f64,
}

/// Risk and retained F1 at every achievable coverage `m / N`, ascending.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskCoverageCurve {
    pub score_name: String,
    /// Scene ids in discard order: `discard_order[0]` is rejected first.
    pub discard_order: Vec<String>,
    pub points: Vec<CurvePoint>,
    pub aurc: f64,
    pub risk_at_half: f64,
    pub auc_nrf1: f64,
    pub nrf1_at_half: f64,
}

impl RiskCoverageCurve {
    pub fn summary(&self) -> SelectiveSummary {
        SelectiveSummary {
            score_name: self.score_name.clone(),
            aurc: self.aurc,
            risk_at_half: self.risk_at_half,
            auc_nrf1: self.auc_nrf1,
            nrf1_at_half: self.nrf1_at_half,
        }
    }

    /// Scenes retained at coverage `m / N`.
    pub fn retained(&self, m: usize) -> &[String] {
        &self.discard_order[self.discard_order.len() - m..]
    }
}

/// One row of the score comparison table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectiveSummary {
    pub score_name: String,
    pub aurc: f64,
    pub risk_at_half: f64,
    pub auc_nrf1: f64,
    pub nrf1_at_half: f64,
}

/// Scene indices sorted so that the first is discarded first: score
/// descending, absent scores before all others, ties by scene id.
fn discard_order(scene_ids: &[String], scores: &[Option<f64>]) -> Vec<usize> {
    let rank = |s: Option<f64>| s.unwrap_or(f64::INFINITY);
    let mut order: Vec<usize> = (0..scene_ids.len()).collect();
    order.sort_by(|&a, &b| {
        let (sa, sb) = (scores[a], scores[b]);
        match (sa.is_none(), sb.is_none()) {
            (true, false) => std::cmp::Ordering::Less,
            (false, true) => std::cmp::Ordering::Greater,
            _ => rank(sb).total_cmp(&rank(sa)),
        }
        .then_with(|| scene_ids[a].cmp(&scene_ids[b]))
    });
    order
}

/// Trapezoid over coverage `[1/N, 1]`, divided by its width. A single point
/// returns its value.
fn normalized_area(points: &[CurvePoint], value: impl Fn(&CurvePoint) -> f64) -> f64 {
    if points.len() == 1 {
        return value(&points[0]);
    }
    let area: f64 = points
        .windows(2)
        .map(|w| (w[1].coverage - w[0].coverage) * (value(&w[0]) + value(&w[1])) / 2.0)
        .sum();
    area / (points[points.len() - 1].coverage - points[0].coverage)
}

fn at_half(points: &[CurvePoint]) -> CurvePoint {
    *points
        .iter()
        .find(|p| p.coverage >= 0.5)
        .expect("full coverage point exists")
}

fn validate(scene_ids: &[String], n: usize, scores: &[Option<f64>]) -> Result<()> {
    if scene_ids.is_empty() {
        return Err(Error::Empty("discard curve needs at least one scene".into()));
    }
    if scene_ids.len() != n || scores.len() != n {
        return Err(Error::ShapeMismatch(format!(
            "{} scene ids, {} scores, {n} evaluations",
            scene_ids.len(),
            scores.len()
        )));
    }
    if scores.iter().flatten().any(|s| !s.is_finite()) {
        return Err(Error::InvalidInput("scores must be finite or absent".into()));
    }
    Ok(())
}

fn build_curve(
    score_name: &str,
    scene_ids: &[String],
    order: Vec<usize>,
    mut point_at: impl FnMut(&[usize]) -> (f64, f64),
) -> RiskCoverageCurve {
    let n = order.len();
    let points: Vec<CurvePoint> = (1..=n)
        .map(|m| {
            let (risk, nrf1) = point_at(&order[n - m..]);
            CurvePoint {
                coverage: m as f64 / n as f64,
                risk,
                nonrejected_f1: nrf1,
            }
        })
        .collect();
    let half = at_half(&points);
    RiskCoverageCurve {
        score_name: score_name.to_owned(),
        discard_order: order.iter().map(|&i| scene_ids[i].clone()).collect(),
        aurc: normalized_area(&points, |p| p.risk),
        risk_at_half: half.risk,
        auc_nrf1: normalized_area(&points, |p| p.nonrejected_f1),
        nrf1_at_half: half.nonrejected_f1,
        points,
    }
}

/// Per-scene (macro) risk-coverage curve with risk `1 - F1`.
///
/// Higher scores are discarded first. Undefined F1 values should be passed
/// as 1.0 (nothing to find and nothing predicted).
pub fn discard_curve(
    score_name: &str,
    scene_ids: &[String],
    scores: &[Option<f64>],
    f1: &[f64],
) -> Result<RiskCoverageCurve> {
    validate(scene_ids, f1.len(), scores)?;
    if f1.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::InvalidInput("per-scene F1 must lie in [0, 1]".into()));
    }
    let order = discard_order(scene_ids, scores);
    Ok(build_curve(score_name, scene_ids, order, |kept| {
        let m = kept.len() as f64;
        let mean_f1 = kept.iter().map(|&i| f1[i]).sum::<f64>() / m;
        let risk = kept.iter().map(|&i| 1.0 - f1[i]).sum::<f64>() / m;
        (risk, mean_f1)
    }))
}

/// Pooled-pixel (micro) variant: F1 of the summed confusion over retained
/// scenes. An undefined pooled F1 counts as 1.
pub fn discard_curve_micro(
    score_name: &str,
    scene_ids: &[String],
    scores: &[Option<f64>],
    confusions: &[ConfusionCounts],
) -> Result<RiskCoverageCurve> {
    validate(scene_ids, confusions.len(), scores)?;
    let order = discard_order(scene_ids, scores);
    Ok(build_curve(score_name, scene_ids, order, |kept| {
        let pooled = kept
            .iter()
            .fold(ConfusionCounts::default(), |acc, &i| acc + confusions[i]);
        let f1 = seg_metrics(&pooled).f1.unwrap_or(1.0);
        (1.0 - f1, f1)
    }))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Decision {
    Keep,
    Discard,
}

/// Discard iff `score > threshold`; absent scores are discarded.
pub fn flag_at_threshold(scores: &[Option<f64>], threshold: f64) -> Result<Vec<Decision>> {
    if threshold.is_nan() {
        return Err(Error::InvalidInput("threshold is NaN".into()));
    }
    Ok(scores
        .iter()
        .map(|s| match s {
            Some(v) if *v <= threshold => Decision::Keep,
            _ => Decision::Discard,
        })
        .collect())
}

/// Area under the ROC curve by the Mann-Whitney rank statistic: probability
/// a positive outscores a negative, ties counted half.
pub fn auroc(positive: &[f64], negative: &[f64]) -> Result<f64> {
    if positive.is_empty() || negative.is_empty() {
        return Err(Error::Empty("AUROC needs both classes".into()));
    }
    let mut all: Vec<(f64, bool)> = positive
        .iter()
        .map(|&v| (v, true))
        .chain(negative.iter().map(|&v| (v, false)))
        .collect();
    if all.iter().any(|(v, _)| v.is_nan()) {
        return Err(Error::InvalidInput("AUROC scores contain NaN".into()));
    }
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j + 1 < all.len() && all[j + 1].0 == all[i].0 {
            j += 1;
        }
        let mid_rank = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += all[i..=j].iter().filter(|(_, p)| *p).count() as f64 * mid_rank;
        i = j + 1;
    }
    let (np, nn) = (positive.len() as f64, negative.len() as f64);
    Ok((rank_sum - np * (np + 1.0) / 2.0) / (np * nn))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("s{i}")).collect()
    }

    #[test]
    fn perfect_scenes_zero_risk() {
        let scores = [Some(0.3), Some(0.9), Some(0.1), Some(0.5)];
        let c = discard_curve("x", &ids(4), &scores, &[1.0; 4]).unwrap();
        assert!(c.points.iter().all(|p| p.risk == 0.0));
        assert_eq!(c.aurc, 0.0);
        assert_eq!(c.auc_nrf1, 1.0);
    }

    #[test]
    fn coverages_ascend_and_full_point_matches_mean() {
        let f1 = [0.2, 0.9, 0.5, 0.4, 0.7];
        let scores = [Some(1.0); 5];
        let c = discard_curve("const", &ids(5), &scores, &f1).unwrap();
        assert!(c.points.windows(2).all(|w| w[0].coverage < w[1].coverage));
        assert_eq!(c.points.len(), 5);
        let mean: f64 = f1.iter().sum::<f64>() / 5.0;
        assert_eq!(c.points[4].risk, f1.iter().map(|v| 1.0 - v).sum::<f64>() / 5.0);
        assert!((c.points[4].nonrejected_f1 - mean).abs() < 1e-15);
        // constant scores fall back to scene id order
        assert_eq!(c.discard_order, ids(5));
    }

    #[test]
    fn absent_scores_go_first() {
        let scores = [Some(5.0), None, Some(9.0)];
        let c = discard_curve("x", &ids(3), &scores, &[0.5, 0.5, 0.5]).unwrap();
        assert_eq!(c.discard_order, vec!["s1", "s2", "s0"]);
    }

    #[test]
    fn half_reads_smallest_coverage_at_least_half() {
        let f1 = [0.0, 0.25, 0.5, 0.75, 1.0];
        let scores: Vec<Option<f64>> = f1.iter().map(|v| Some(1.0 - v)).collect();
        let c = discard_curve("oracle", &ids(5), &scores, &f1).unwrap();
        // coverage 3/5 keeps f1 {0.5, 0.75, 1.0}
        assert!((c.nrf1_at_half - 0.75).abs() < 1e-15);
        assert!((c.risk_at_half - 0.25).abs() < 1e-15);
    }

    #[test]
    fn single_scene_curve() {
        let c = discard_curve("x", &ids(1), &[Some(0.0)], &[0.6]).unwrap();
        assert!((c.aurc - 0.4).abs() < 1e-15);
        assert_eq!(c.points.len(), 1);
        assert!(discard_curve("x", &[], &[], &[]).is_err());
    }

    #[test]
    fn micro_curve_pools_counts() {
        let conf = [
            ConfusionCounts { tp: 10, fp: 0, tn: 0, fn_: 0 },
            ConfusionCounts { tp: 0, fp: 10, tn: 0, fn_: 10 },
        ];
        let c = discard_curve_micro("x", &ids(2), &[Some(0.0), Some(1.0)], &conf).unwrap();
        // full coverage: tp 10, fp 10, fn 10 -> f1 = 20 / 40
        assert!((c.points[1].nonrejected_f1 - 0.5).abs() < 1e-15);
        assert_eq!(c.points[0].risk, 0.0);
    }

    #[test]
    fn infinite_thresholds() {
        let s = [Some(1.0), Some(-3.0), None];
        assert_eq!(
            flag_at_threshold(&s, f64::INFINITY).unwrap(),
            vec![Decision::Keep, Decision::Keep, Decision::Discard]
        );
        assert!(flag_at_threshold(&s, f64::NEG_INFINITY)
            .unwrap()
            .iter()
            .all(|d| *d == Decision::Discard));
        assert!(flag_at_threshold(&s, f64::NAN).is_err());
    }

    #[test]
    fn auroc_basics() {
        assert_eq!(auroc(&[2.0, 3.0], &[0.0, 1.0]).unwrap(), 1.0);
        assert_eq!(auroc(&[0.0], &[1.0]).unwrap(), 0.0);
        assert_eq!(auroc(&[1.0, 1.0], &[1.0]).unwrap(), 0.5);
        assert!(auroc(&[], &[1.0]).is_err());
    }
}
