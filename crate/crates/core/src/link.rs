//! Rank-based decile grouping of scenes by an environmental attribute and the
//! linear trend between per-group mean score and mean F1.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::record::SceneRecord;

pub const GROUPS: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecileBin {
    /// Smallest and largest attribute value in the bin.
    pub lower: f64,
    pub upper: f64,
    pub scene_ids: Vec<String>,
    pub mean_score: Option<f64>,
    pub mean_f1: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecileGrouping {
    pub attribute: String,
    pub score_name: String,
    pub bins: Vec<DecileBin>,
    pub usable: usize,
    pub excluded_missing: usize,
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (mut sum, mut n) = (0.0, 0usize);
    for v in values {
        sum += v;
        n += 1;
    }
    (n > 0).then(|| sum / n as f64)
}

/// Ranks scenes by `attribute` (ties by scene id) and cuts the ranking into
/// ten contiguous bins whose sizes differ by at most one, larger bins first.
pub fn decile_group(records: &[SceneRecord], attribute: &str, score_name: &str) -> Result<DecileGrouping> {
    let mut usable: Vec<(f64, &SceneRecord)> = records
        .iter()
        .filter_map(|r| r.attributes.get(attribute).copied().flatten().filter(|v| v.is_finite()).map(|v| (v, r)))
        .collect();
    let excluded_missing = records.len() - usable.len();
    if usable.len() < GROUPS {
        return Err(Error::TooFewScenes {
            attribute: attribute.to_owned(),
            usable: usable.len(),
            required: GROUPS,
        });
    }
    usable.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.scene_id.cmp(&b.1.scene_id)));
    let n = usable.len();
    let (base, extra) = (n / GROUPS, n % GROUPS);
    let mut start = 0;
    let bins = (0..GROUPS)
        .map(|g| {
            let size = base + usize::from(g < extra);
            let members = &usable[start..start + size];
            start += size;
            DecileBin {
                lower: members[0].0,
                upper: members[size - 1].0,
                scene_ids: members.iter().map(|(_, r)| r.scene_id.clone()).collect(),
                mean_score: mean(members.iter().filter_map(|(_, r)| r.feature(score_name)).filter(|v| v.is_finite())),
                mean_f1: mean(members.iter().filter_map(|(_, r)| r.evaluation.as_ref().map(|e| e.f1_for_risk))),
            }
        })
        .collect();
    Ok(DecileGrouping {
        attribute: attribute.to_owned(),
        score_name: score_name.to_owned(),
        bins,
        usable: n,
        excluded_missing,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupTrend {
    pub attribute: String,
    pub score_name: String,
    pub n_groups: usize,
    /// `None` when either bin-mean series has zero variance.
    pub pearson_r: Option<f64>,
    pub slope: Option<f64>,
    pub intercept: Option<f64>,
    pub degenerate: bool,
}

/// Pearson correlation and least-squares fit of mean F1 on mean score over
/// the bins where both means are defined.
pub fn group_trend(grouping: &DecileGrouping) -> Result<GroupTrend> {
    let pairs: Vec<(f64, f64)> = grouping
        .bins
        .iter()
        .filter_map(|b| Some((b.mean_score?, b.mean_f1?)))
        .collect();
    if pairs.len() < 3 {
        return Err(Error::TooFewGroups(pairs.len()));
    }
    let n = pairs.len() as f64;
    let mx = pairs.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pairs.iter().map(|p| p.1).sum::<f64>() / n;
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    for &(x, y) in &pairs {
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
        sxy += (x - mx) * (y - my);
    }
    let pearson_r = (sxx > 0.0 && syy > 0.0).then(|| (sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0));
    let slope = (sxx > 0.0).then(|| sxy / sxx);
    Ok(GroupTrend {
        attribute: grouping.attribute.clone(),
        score_name: grouping.score_name.clone(),
        n_groups: pairs.len(),
        pearson_r,
        slope,
        intercept: slope.map(|s| my - s * mx),
        degenerate: pearson_r.is_none(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evaluation::{seg_metrics, ConfusionCounts};
    use crate::record::SceneEvaluation;

    fn scene(i: usize, attr: Option<f64>, score: f64, tp: u64, fp: u64) -> SceneRecord {
        let mut r = SceneRecord::new(format!("s{i:03}"));
        r.attributes.insert("attr".into(), attr);
        r.attributes.insert("score".into(), Some(score));
        let c = ConfusionCounts { tp, fp, tn: 0, fn_: 0 };
        r.evaluation = Some(SceneEvaluation::new(c, seg_metrics(&c)));
        r
    }

    #[test]
    fn index_attribute_pairs() {
        let recs: Vec<_> = (0..20).map(|i| scene(i, Some(i as f64), i as f64, 1, 0)).collect();
        let g = decile_group(&recs, "attr", "score").unwrap();
        for (b, bin) in g.bins.iter().enumerate() {
            assert_eq!(bin.scene_ids.len(), 2);
            assert_eq!(bin.mean_score, Some(2.0 * b as f64 + 0.5));
        }
    }

    #[test]
    fn ties_broken_by_id_and_missing_counted() {
        let mut recs: Vec<_> = (0..13).map(|i| scene(i, Some(1.0), 0.0, 1, 0)).collect();
        recs.push(scene(99, None, 0.0, 1, 0));
        recs.reverse();
        let g = decile_group(&recs, "attr", "score").unwrap();
        let sizes: Vec<usize> = g.bins.iter().map(|b| b.scene_ids.len()).collect();
        assert_eq!(sizes, vec![2, 2, 2, 1, 1, 1, 1, 1, 1, 1]);
        assert_eq!(g.bins[0].scene_ids, vec!["s000", "s001"]);
        assert_eq!((g.usable, g.excluded_missing), (13, 1));
        let few: Vec<_> = (0..9).map(|i| scene(i, Some(1.0), 0.0, 1, 0)).collect();
        assert!(matches!(decile_group(&few, "attr", "score"), Err(Error::TooFewScenes { .. })));
    }

    #[test]
    fn exact_linear_trend() {
        // f1 = tp / (tp + fp/2); choose fp so f1 falls linearly with score
        let recs: Vec<_> = (0..10).map(|i| scene(i, Some(i as f64), i as f64, 10 - i as u64, 2 * i as u64)).collect();
        let t = group_trend(&decile_group(&recs, "attr", "score").unwrap()).unwrap();
        assert!((t.pearson_r.unwrap() + 1.0).abs() < 1e-12);
        assert!((t.slope.unwrap() + 0.1).abs() < 1e-12);
        assert!((t.intercept.unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn constant_f1_is_degenerate() {
        let recs: Vec<_> = (0..10).map(|i| scene(i, Some(i as f64), i as f64, 1, 0)).collect();
        let t = group_trend(&decile_group(&recs, "attr", "score").unwrap()).unwrap();
        assert!(t.degenerate && t.pearson_r.is_none());
        assert_eq!(t.slope, Some(0.0));
    }
}
