//! Out-of-distribution signals from a fitted centroid model.
//!
//! For a sample `x` with Euclidean distances `d_i` to the `k` centroids, the
//! normalized distances are `d_hat_i = d_i / max_j d_j`. The nearest centroid
//! distance deficit is
//!
//! ```text
//! ncdd = alpha * sum_{i != nearest} d_hat_i - beta * d_hat_nearest
//! ```
//!
//! With `alpha = 1` and `beta = k - 1` it lies in `[0, k - 1]`: zero when the
//! sample is equally far from every centroid, `k - 1` when it sits on one
//! centroid and the others are all at the maximal distance.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::clustering::CentroidModel;
use crate::data::{FeatureMatrix, Space};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NcddParams {
    pub alpha: f64,
    pub beta: f64,
}

impl NcddParams {
    pub fn new(alpha: f64, beta: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha.is_finite()) || !(beta > 0.0 && beta.is_finite()) {
            return Err(Error::Config(format!(
                "NCDD weights must be positive and finite, got alpha={alpha} beta={beta}"
            )));
        }
        Ok(Self { alpha, beta })
    }

    /// `alpha = 1`, `beta = k - 1`.
    pub fn for_k(k: usize) -> Result<Self> {
        if k < 2 {
            return Err(Error::TooFewCentroids(k));
        }
        Self::new(1.0, (k - 1) as f64)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CentroidDistances {
    pub distances: Vec<f64>,
    pub normalized: Vec<f64>,
    pub nearest_index: usize,
    /// Every distance was zero, so normalization was impossible.
    pub degenerate: bool,
}

impl CentroidDistances {
    pub fn d_nearest(&self) -> f64 {
        self.distances[self.nearest_index]
    }

    pub fn normalized_nearest(&self) -> f64 {
        self.normalized[self.nearest_index]
    }
}

pub fn centroid_distances(model: &CentroidModel, x: &[f64]) -> Result<CentroidDistances> {
    if x.len() != model.dim() {
        return Err(Error::DimensionMismatch {
            expected: model.dim(),
            found: x.len(),
        });
    }
    if let Some(index) = x.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite { index });
    }
    let distances: Vec<f64> = (0..model.k())
        .map(|j| {
            model
                .centroid(j)
                .iter()
                .zip(x)
                .map(|(c, v)| (c - v) * (c - v))
                .sum::<f64>()
                .sqrt()
        })
        .collect();
    let mut nearest_index = 0;
    for (j, &d) in distances.iter().enumerate() {
        if d < distances[nearest_index] {
            nearest_index = j;
        }
    }
    let max = distances.iter().copied().fold(0.0f64, f64::max);
    let degenerate = max == 0.0;
    let normalized = if degenerate {
        vec![0.0; distances.len()]
    } else {
        distances.iter().map(|d| d / max).collect()
    };
    Ok(CentroidDistances {
        distances,
        normalized,
        nearest_index,
        degenerate,
    })
}

/// NCDD over normalized distances; the nearest centroid is the smallest entry
/// (first one on ties).
pub fn ncdd(normalized: &[f64], params: &NcddParams) -> Result<f64> {
    if normalized.len() < 2 {
        return Err(Error::TooFewCentroids(normalized.len()));
    }
    if let Some(bad) = normalized.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::InvalidInput(format!(
            "normalized distance {bad} is outside [0, 1]"
        )));
    }
    let mut nearest = 0;
    for (i, &d) in normalized.iter().enumerate() {
        if d < normalized[nearest] {
            nearest = i;
        }
    }
    let others: f64 = normalized
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != nearest)
        .map(|(_, d)| d)
        .sum();
    Ok(params.alpha * others - params.beta * normalized[nearest])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OodScore {
    pub scene_id: String,
    pub space: Space,
    pub d_nearest: f64,
    pub d_hat: Vec<f64>,
    pub ncdd: f64,
    pub nearest_index: usize,
    pub degenerate: bool,
}

impl OodScore {
    /// `d_hat` of the nearest centroid.
    pub fn normalized_distance(&self) -> f64 {
        self.d_hat[self.nearest_index]
    }
}

pub fn score_sample(model: &CentroidModel, id: &str, x: &[f64], params: &NcddParams) -> Result<OodScore> {
    let cd = centroid_distances(model, x)?;
    let value = ncdd(&cd.normalized, params)?;
    Ok(OodScore {
        scene_id: id.to_owned(),
        space: model.space(),
        d_nearest: cd.d_nearest(),
        ncdd: value,
        nearest_index: cd.nearest_index,
        degenerate: cd.degenerate,
        d_hat: cd.normalized,
    })
}

/// One score per sample, in the matrix's row order.
pub fn score_population(model: &CentroidModel, features: &FeatureMatrix, params: &NcddParams) -> Result<Vec<OodScore>> {
    if features.space() != model.space() {
        return Err(Error::SpaceMismatch {
            model: model.space().to_string(),
            features: features.space().to_string(),
        });
    }
    if features.dim() != model.dim() {
        return Err(Error::DimensionMismatch {
            expected: model.dim(),
            found: features.dim(),
        });
    }
    if model.k() < 2 {
        return Err(Error::TooFewCentroids(model.k()));
    }
    (0..features.len())
        .into_par_iter()
        .map(|i| score_sample(model, &features.sample_ids()[i], features.row(i), params))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DensityLabel {
    Reference,
    Downstream,
}

/// Histogram of nearest-centroid distances for one population.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistanceDensity {
    pub label: DensityLabel,
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

impl DistanceDensity {
    /// Counts normalized to a probability density over the bins.
    pub fn density(&self) -> Vec<f64> {
        let total: usize = self.counts.iter().sum();
        self.counts
            .iter()
            .zip(self.edges.windows(2))
            .map(|(&c, w)| c as f64 / (total as f64 * (w[1] - w[0])))
            .collect()
    }
}

/// Histograms of `d_nearest` for both populations over shared edges spanning
/// `[0, max d_nearest]`.
pub fn density_summary(
    reference: &[OodScore],
    downstream: &[OodScore],
    bins: usize,
) -> Result<(DistanceDensity, DistanceDensity)> {
    if reference.is_empty() || downstream.is_empty() {
        return Err(Error::Empty("density summary needs both populations".into()));
    }
    if bins < 2 {
        return Err(Error::InvalidInput(format!("need at least 2 bins, got {bins}")));
    }
    let max = reference
        .iter()
        .chain(downstream)
        .map(|s| s.d_nearest)
        .fold(0.0f64, f64::max);
    let upper = if max > 0.0 { max } else { 1.0 };
    let edges: Vec<f64> = (0..=bins).map(|i| upper * i as f64 / bins as f64).collect();
    let histogram = |scores: &[OodScore], label| {
        let mut counts = vec![0usize; bins];
        for s in scores {
            let b = ((s.d_nearest / upper) * bins as f64).floor() as usize;
            counts[b.min(bins - 1)] += 1;
        }
        DistanceDensity {
            label,
            edges: edges.clone(),
            counts,
        }
    };
    Ok((
        histogram(reference, DensityLabel::Reference),
        histogram(downstream, DensityLabel::Downstream),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clustering::FitMeta;

    fn model(centroids: Vec<f64>, k: usize, dim: usize) -> CentroidModel {
        CentroidModel::from_centroids(
            centroids,
            k,
            dim,
            Space::Embedding,
            FitMeta {
                seed: 0,
                iterations_run: 0,
                wcss: 0.0,
                feature_dim: dim,
                converged: true,
            },
        )
        .unwrap()
    }

    #[test]
    fn hand_evaluated_ncdd() {
        let p = NcddParams::new(1.0, 2.0).unwrap();
        let v = ncdd(&[0.2, 0.6, 1.0], &p).unwrap();
        assert!((v - 1.2).abs() < 1e-12);
    }

    #[test]
    fn ncdd_extremes_k15() {
        let p = NcddParams::for_k(15).unwrap();
        let mut d = vec![1.0; 15];
        d[3] = 0.0;
        assert_eq!(ncdd(&d, &p).unwrap(), 14.0);
        assert_eq!(ncdd(&[1.0; 15], &p).unwrap(), 0.0);
    }

    #[test]
    fn ncdd_needs_two() {
        assert!(matches!(NcddParams::for_k(1), Err(Error::TooFewCentroids(1))));
        let p = NcddParams::new(1.0, 1.0).unwrap();
        assert!(matches!(ncdd(&[0.5], &p), Err(Error::TooFewCentroids(1))));
        assert!(NcddParams::new(0.0, 1.0).is_err());
    }

    #[test]
    fn sample_on_centroid() {
        let mut cs = Vec::new();
        for j in 0..15 {
            cs.extend_from_slice(&[j as f64, (j * j) as f64]);
        }
        let m = model(cs, 15, 2);
        let cd = centroid_distances(&m, &[3.0, 9.0]).unwrap();
        assert_eq!(cd.nearest_index, 3);
        assert_eq!(cd.distances[3], 0.0);
        assert_eq!(cd.normalized.iter().copied().fold(0.0, f64::max), 1.0);
    }

    #[test]
    fn equidistant_sample() {
        let m = model(vec![1.0, 0.0, -1.0, 0.0, 0.0, 1.0, 0.0, -1.0], 4, 2);
        let cd = centroid_distances(&m, &[0.0, 0.0]).unwrap();
        assert_eq!(cd.normalized, vec![1.0; 4]);
        assert_eq!(cd.nearest_index, 0);
    }

    #[test]
    fn duplicate_centroids_degenerate() {
        let m = model(vec![2.0, 2.0, 2.0], 3, 1);
        let s = score_sample(&m, "a", &[2.0], &NcddParams::for_k(3).unwrap()).unwrap();
        assert!(s.degenerate);
        assert_eq!(s.ncdd, 0.0);
        assert_eq!(s.d_hat, vec![0.0; 3]);
    }

    #[test]
    fn population_order_and_errors() {
        let m = model(vec![0.0, 10.0, 20.0], 3, 1);
        let p = NcddParams::for_k(3).unwrap();
        let f = FeatureMatrix::new(
            vec!["c".into(), "a".into(), "b".into()],
            vec![19.0, 1.0, 11.0],
            1,
            Space::Embedding,
        )
        .unwrap();
        let s = score_population(&m, &f, &p).unwrap();
        let idx: Vec<usize> = s.iter().map(|s| s.nearest_index).collect();
        assert_eq!(idx, vec![2, 0, 1]);
        assert_eq!(s[0].scene_id, "c");

        let empty = FeatureMatrix::new(vec![], vec![], 1, Space::Embedding).unwrap();
        assert!(score_population(&m, &empty, &p).unwrap().is_empty());
        let raw = FeatureMatrix::new(vec!["a".into()], vec![1.0], 1, Space::Raw).unwrap();
        assert!(matches!(score_population(&m, &raw, &p), Err(Error::SpaceMismatch { .. })));
        assert!(matches!(
            centroid_distances(&m, &[f64::NAN]),
            Err(Error::NonFinite { .. })
        ));
    }

    fn fake(d: f64) -> OodScore {
        OodScore {
            scene_id: String::new(),
            space: Space::Raw,
            d_nearest: d,
            d_hat: vec![],
            ncdd: 0.0,
            nearest_index: 0,
            degenerate: false,
        }
    }

    #[test]
    fn density_identical_and_shifted() {
        let a: Vec<OodScore> = (0..50).map(|i| fake(i as f64 * 0.1)).collect();
        let (r, d) = density_summary(&a, &a, 10).unwrap();
        assert_eq!(r.counts, d.counts);
        assert_eq!(r.counts.iter().sum::<usize>(), 50);
        assert!(r.edges.windows(2).all(|w| w[0] < w[1]));

        let shifted: Vec<OodScore> = a.iter().map(|s| fake(s.d_nearest + 10.0)).collect();
        let (r, d) = density_summary(&a, &shifted, 10).unwrap();
        let last_ref = r.counts.iter().rposition(|&c| c > 0).unwrap();
        let first_down = d.counts.iter().position(|&c| c > 0).unwrap();
        assert!(first_down > last_ref);
        assert!(density_summary(&a, &[], 10).is_err());
        assert!(density_summary(&a, &a, 1).is_err());
    }
}
