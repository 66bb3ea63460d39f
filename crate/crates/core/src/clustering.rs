//! Reference-distribution centroids: seeded k-means++ / Lloyd, elbow-based
//! choice of k, and model files.
//!
//! All arithmetic runs on samples arranged in canonical order (sorted by
//! sample id), so results do not depend on the order rows were supplied in.
//! Assignment may run in parallel; every reduction is a sequential fold in
//! canonical order, which keeps fits bitwise reproducible across thread
//! counts.

use std::cmp::Ordering;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{FeatureMatrix, Space};
use crate::error::{Error, Result};
use crate::manifest::sha256_hex;
use crate::tensor::{self, Tensor, TensorData};

pub const DEFAULT_MAX_ITER: usize = 300;
pub const DEFAULT_TOL: f64 = 1e-6;
pub const MODEL_FORMAT: &str = "geotrust-centroids";
pub const MODEL_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitMeta {
    pub seed: u64,
    pub iterations_run: usize,
    /// Within-cluster sum of squared Euclidean distances.
    pub wcss: f64,
    pub feature_dim: usize,
    pub converged: bool,
}

/// Fitted centroids, `k x dim`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct CentroidModel {
    centroids: Vec<f64>,
    k: usize,
    dim: usize,
    space: Space,
    pub fit_meta: FitMeta,
}

impl CentroidModel {
    pub fn from_centroids(centroids: Vec<f64>, k: usize, dim: usize, space: Space, fit_meta: FitMeta) -> Result<Self> {
        if k == 0 || dim == 0 {
            return Err(Error::InvalidInput("centroid model needs k >= 1 and dim >= 1".into()));
        }
        if centroids.len() != k * dim {
            return Err(Error::ShapeMismatch(format!(
                "{k} centroids of dim {dim} need {} values, got {}",
                k * dim,
                centroids.len()
            )));
        }
        if let Some(index) = centroids.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        if !(fit_meta.wcss >= 0.0) {
            return Err(Error::InvalidInput("wcss must be >= 0".into()));
        }
        Ok(Self {
            centroids,
            k,
            dim,
            space,
            fit_meta,
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn space(&self) -> Space {
        self.space
    }

    pub fn centroids(&self) -> &[f64] {
        &self.centroids
    }

    pub fn centroid(&self, j: usize) -> &[f64] {
        &self.centroids[j * self.dim..(j + 1) * self.dim]
    }

    /// Index of the nearest centroid and its squared distance; ties go to the
    /// lowest index.
    pub fn nearest(&self, x: &[f64]) -> (usize, f64) {
        nearest_sq(x, &self.centroids, self.dim)
    }

    /// SHA-256 of the encoded centroid tensor.
    pub fn digest(&self) -> String {
        sha256_hex(&self.to_tensor().encode())
    }

    fn to_tensor(&self) -> Tensor {
        Tensor::from_f64(vec![self.k, self.dim], self.centroids.clone()).expect("validated dims")
    }
}

#[inline]
pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest_sq(x: &[f64], centroids: &[f64], dim: usize) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.chunks_exact(dim).enumerate() {
        let d = sq_dist(x, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

fn assign_all(data: &[f64], dim: usize, centroids: &[f64]) -> (Vec<usize>, Vec<f64>) {
    data.par_chunks(dim)
        .map(|x| nearest_sq(x, centroids, dim))
        .unzip()
}

fn count_distinct(data: &[f64], dim: usize) -> usize {
    let mut rows: Vec<&[f64]> = data.chunks_exact(dim).collect();
    let cmp = |a: &&[f64], b: &&[f64]| {
        a.iter()
            .zip(b.iter())
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| *o != Ordering::Equal)
            .unwrap_or(Ordering::Equal)
    };
    rows.sort_by(cmp);
    rows.dedup_by(|a, b| cmp(a, b) == Ordering::Equal);
    rows.len()
}

/// Samples copied into canonical (sample id) order.
fn canonical_data(features: &FeatureMatrix) -> Vec<f64> {
    let mut out = Vec::with_capacity(features.values().len());
    for i in features.canonical_order() {
        out.extend_from_slice(features.row(i));
    }
    out
}

fn kmeans_plus_plus(data: &[f64], dim: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n = data.len() / dim;
    let mut centroids = Vec::with_capacity(k * dim);
    let first = rng.random_range(0..n);
    centroids.extend_from_slice(&data[first * dim..(first + 1) * dim]);
    let mut d2: Vec<f64> = data
        .par_chunks(dim)
        .map(|x| sq_dist(x, &centroids[..dim]))
        .collect();
    for _ in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut chosen = None;
            let mut last_positive = 0;
            for (i, &w) in d2.iter().enumerate() {
                if w > 0.0 {
                    last_positive = i;
                    acc += w;
                    if acc > target {
                        chosen = Some(i);
                        break;
                    }
                }
            }
            chosen.unwrap_or(last_positive)
        } else {
            rng.random_range(0..n)
        };
        let c = data[pick * dim..(pick + 1) * dim].to_vec();
        d2.par_iter_mut()
            .zip(data.par_chunks(dim))
            .for_each(|(d, x)| *d = d.min(sq_dist(x, &c)));
        centroids.extend_from_slice(&c);
    }
    centroids
}

struct LloydOutcome {
    centroids: Vec<f64>,
    wcss: f64,
    iterations: usize,
    converged: bool,
    trace: Vec<f64>,
}

/// Moves a point into every empty cluster: the point farthest from its own
/// centroid, drawn from clusters that keep at least one member.
fn reseed_empty(labels: &mut [usize], d2: &mut [f64], k: usize) {
    let mut sizes = vec![0usize; k];
    for &l in labels.iter() {
        sizes[l] += 1;
    }
    for j in 0..k {
        if sizes[j] > 0 {
            continue;
        }
        let mut best: Option<(usize, f64)> = None;
        for (i, (&l, &d)) in labels.iter().zip(d2.iter()).enumerate() {
            if sizes[l] > 1 && best.is_none_or(|(_, bd)| d > bd) {
                best = Some((i, d));
            }
        }
        if let Some((i, _)) = best {
            sizes[labels[i]] -= 1;
            sizes[j] += 1;
            labels[i] = j;
            d2[i] = 0.0;
        }
    }
}

fn lloyd(data: &[f64], dim: usize, mut centroids: Vec<f64>, max_iter: usize, tol: f64) -> LloydOutcome {
    let k = centroids.len() / dim;
    let mut trace = Vec::new();
    let mut iterations = 0;
    let mut converged = false;
    while iterations < max_iter {
        let (mut labels, mut d2) = assign_all(data, dim, &centroids);
        reseed_empty(&mut labels, &mut d2, k);
        trace.push(d2.iter().sum());

        let mut sums = vec![0.0f64; k * dim];
        let mut counts = vec![0usize; k];
        for (x, &l) in data.chunks_exact(dim).zip(&labels) {
            counts[l] += 1;
            for (s, v) in sums[l * dim..(l + 1) * dim].iter_mut().zip(x) {
                *s += v;
            }
        }
        let mut shift = 0.0f64;
        for j in 0..k {
            let row = &mut sums[j * dim..(j + 1) * dim];
            if counts[j] == 0 {
                row.copy_from_slice(&centroids[j * dim..(j + 1) * dim]);
                continue;
            }
            let n = counts[j] as f64;
            row.iter_mut().for_each(|v| *v /= n);
            shift = shift.max(sq_dist(row, &centroids[j * dim..(j + 1) * dim]).sqrt());
        }
        centroids = sums;
        iterations += 1;
        if shift < tol {
            converged = true;
            break;
        }
    }
    let (_, d2) = assign_all(data, dim, &centroids);
    let wcss: f64 = d2.iter().sum();
    trace.push(wcss);
    LloydOutcome {
        centroids,
        wcss,
        iterations,
        converged,
        trace,
    }
}

fn validate_fit(features: &FeatureMatrix, k: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::InvalidInput("k must be >= 1".into()));
    }
    if features.len() < k {
        return Err(Error::TooFewSamples {
            n: features.len(),
            k,
        });
    }
    Ok(())
}

fn check_distinct(data: &[f64], dim: usize, k: usize) -> Result<()> {
    if k > 1 {
        let distinct = count_distinct(data, dim);
        if distinct < k {
            return Err(Error::TooFewDistinctPoints { distinct, k });
        }
    }
    Ok(())
}

fn into_model(features: &FeatureMatrix, k: usize, seed: u64, out: &LloydOutcome) -> Result<CentroidModel> {
    CentroidModel::from_centroids(
        out.centroids.clone(),
        k,
        features.dim(),
        features.space(),
        FitMeta {
            seed,
            iterations_run: out.iterations,
            wcss: out.wcss,
            feature_dim: features.dim(),
            converged: out.converged,
        },
    )
}

/// Fits k centroids with k-means++ seeding followed by Lloyd iterations.
///
/// Stops once no centroid moves by `tol` or more, or after `max_iter`
/// iterations. Deterministic in `(features, k, seed)`.
pub fn fit_kmeans(features: &FeatureMatrix, k: usize, seed: u64, max_iter: usize, tol: f64) -> Result<CentroidModel> {
    fit_kmeans_traced(features, k, seed, max_iter, tol).map(|(m, _)| m)
}

/// Like [`fit_kmeans`], also returning the WCSS observed after every
/// assignment step (last entry is the final WCSS).
pub fn fit_kmeans_traced(
    features: &FeatureMatrix,
    k: usize,
    seed: u64,
    max_iter: usize,
    tol: f64,
) -> Result<(CentroidModel, Vec<f64>)> {
    validate_fit(features, k)?;
    let dim = features.dim();
    let data = canonical_data(features);
    check_distinct(&data, dim, k)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let init = kmeans_plus_plus(&data, dim, k, &mut rng);
    let out = lloyd(&data, dim, init, max_iter, tol);
    let model = into_model(features, k, seed, &out)?;
    Ok((model, out.trace))
}

/// Best of `restarts` seeded fits by WCSS; restart `r` uses seed `seed + r`.
pub fn fit_kmeans_restarts(
    features: &FeatureMatrix,
    k: usize,
    seed: u64,
    restarts: usize,
    max_iter: usize,
    tol: f64,
) -> Result<CentroidModel> {
    let mut best: Option<CentroidModel> = None;
    for r in 0..restarts.max(1) {
        let m = fit_kmeans(features, k, seed.wrapping_add(r as u64), max_iter, tol)?;
        if best.as_ref().is_none_or(|b| m.fit_meta.wcss < b.fit_meta.wcss) {
            best = Some(m);
        }
    }
    Ok(best.expect("at least one restart"))
}

/// Nearest-centroid index per sample, in the matrix's row order.
pub fn assign(model: &CentroidModel, features: &FeatureMatrix) -> Result<Vec<usize>> {
    if features.dim() != model.dim() {
        return Err(Error::DimensionMismatch {
            expected: model.dim(),
            found: features.dim(),
        });
    }
    Ok(features
        .values()
        .par_chunks(model.dim())
        .map(|x| model.nearest(x).0)
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElbowScan {
    pub candidate_ks: Vec<usize>,
    pub wcss_per_k: Vec<f64>,
    pub chosen_k: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ElbowOptions {
    /// k-means++ restarts per candidate.
    pub restarts: usize,
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for ElbowOptions {
    fn default() -> Self {
        Self {
            restarts: 4,
            max_iter: DEFAULT_MAX_ITER,
            tol: DEFAULT_TOL,
        }
    }
}

/// Picks the candidate with the largest discrete second difference
/// `w[i-1] - 2 w[i] + w[i+1]` over interior positions; ties go to the smaller k.
pub fn elbow_from_profile(candidate_ks: &[usize], wcss: &[f64]) -> Result<usize> {
    if candidate_ks.len() < 3 {
        return Err(Error::TooFewCandidates(candidate_ks.len()));
    }
    if candidate_ks.len() != wcss.len() {
        return Err(Error::ShapeMismatch("one wcss value per candidate k".into()));
    }
    let mut best = (1, f64::NEG_INFINITY);
    for i in 1..candidate_ks.len() - 1 {
        let second = wcss[i - 1] - 2.0 * wcss[i] + wcss[i + 1];
        if second > best.1 {
            best = (i, second);
        }
    }
    Ok(candidate_ks[best.0])
}

/// Adds `extra` centroids one at a time, each at the sample farthest from the
/// current centroid set (lowest canonical index on ties).
fn grow_centroids(data: &[f64], dim: usize, mut centroids: Vec<f64>, extra: usize) -> Vec<f64> {
    for _ in 0..extra {
        let (_, d2) = assign_all(data, dim, &centroids);
        let mut far = (0, f64::NEG_INFINITY);
        for (i, &d) in d2.iter().enumerate() {
            if d > far.1 {
                far = (i, d);
            }
        }
        centroids.extend_from_slice(&data[far.0 * dim..(far.0 + 1) * dim]);
    }
    centroids
}

/// Fits every candidate k and chooses the elbow. Returns the models too so the
/// chosen one need not be refit.
///
/// Each candidate keeps the better of its k-means++ restarts and a warm start
/// grown from the previous candidate's centroids. The warm start begins at or
/// below the previous WCSS and Lloyd never increases it, so the WCSS profile
/// is nonincreasing in k.
pub fn elbow_scan(
    features: &FeatureMatrix,
    candidate_ks: &[usize],
    seed: u64,
    opts: &ElbowOptions,
) -> Result<(ElbowScan, Vec<CentroidModel>)> {
    if candidate_ks.len() < 3 {
        return Err(Error::TooFewCandidates(candidate_ks.len()));
    }
    if candidate_ks.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config("candidate ks must be strictly ascending".into()));
    }
    if candidate_ks[0] < 2 {
        return Err(Error::Config("candidate ks must all be >= 2".into()));
    }
    if candidate_ks[0] > features.len() {
        return Err(Error::TooFewSamples {
            n: features.len(),
            k: candidate_ks[0],
        });
    }
    let dim = features.dim();
    let data = canonical_data(features);
    let distinct = count_distinct(&data, dim);
    let feasible: Vec<usize> = candidate_ks.iter().copied().filter(|&k| k <= distinct).collect();
    if feasible.len() < 3 {
        return Err(Error::TooFewCandidates(feasible.len()));
    }

    let mut models: Vec<CentroidModel> = Vec::with_capacity(feasible.len());
    for (ci, &k) in feasible.iter().enumerate() {
        let mut best: Option<LloydOutcome> = None;
        let mut best_seed = seed;
        for r in 0..opts.restarts.max(1) {
            let s = seed.wrapping_add(r as u64);
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            let init = kmeans_plus_plus(&data, dim, k, &mut rng);
            let out = lloyd(&data, dim, init, opts.max_iter, opts.tol);
            if best.as_ref().is_none_or(|b| out.wcss < b.wcss) {
                best = Some(out);
                best_seed = s;
            }
        }
        if ci > 0 {
            let prev = &models[ci - 1];
            let init = grow_centroids(&data, dim, prev.centroids.clone(), k - prev.k);
            let out = lloyd(&data, dim, init, opts.max_iter, opts.tol);
            if out.wcss < best.as_ref().unwrap().wcss {
                best = Some(out);
                best_seed = prev.fit_meta.seed;
            }
        }
        models.push(into_model(features, k, best_seed, best.as_ref().unwrap())?);
    }
    let wcss: Vec<f64> = models.iter().map(|m| m.fit_meta.wcss).collect();
    let chosen_k = elbow_from_profile(&feasible, &wcss)?;
    Ok((
        ElbowScan {
            candidate_ks: feasible,
            wcss_per_k: wcss,
            chosen_k,
        },
        models,
    ))
}

pub fn select_k_elbow(features: &FeatureMatrix, candidate_ks: &[usize], seed: u64) -> Result<ElbowScan> {
    elbow_scan(features, candidate_ks, seed, &ElbowOptions::default()).map(|(s, _)| s)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ModelSidecar {
    format: String,
    version: u32,
    k: usize,
    dim: usize,
    space: Space,
    centroids_sha256: String,
    fit_meta: FitMeta,
}

/// `<base>.shrt` and `<base>.meta.json` for a model base path.
pub fn model_paths(base: impl AsRef<Path>) -> (PathBuf, PathBuf) {
    let base = base.as_ref();
    let name = base.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    (
        base.with_file_name(format!("{name}.shrt")),
        base.with_file_name(format!("{name}.meta.json")),
    )
}

pub fn save_model(model: &CentroidModel, base: impl AsRef<Path>) -> Result<()> {
    let (tensor_path, meta_path) = model_paths(base);
    let tensor = model.to_tensor();
    let bytes = tensor.encode();
    let sidecar = ModelSidecar {
        format: MODEL_FORMAT.into(),
        version: MODEL_VERSION,
        k: model.k,
        dim: model.dim,
        space: model.space,
        centroids_sha256: sha256_hex(&bytes),
        fit_meta: model.fit_meta.clone(),
    };
    tensor::write_atomic(&tensor_path, &bytes)?;
    let mut json = serde_json::to_string_pretty(&sidecar)?;
    json.push('\n');
    tensor::write_atomic(&meta_path, json.as_bytes())
}

pub fn load_model(base: impl AsRef<Path>) -> Result<CentroidModel> {
    let (tensor_path, meta_path) = model_paths(base);
    let meta_bytes = fs::read(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let sidecar: ModelSidecar = serde_json::from_slice(&meta_bytes)
        .map_err(|e| Error::CorruptedModel(format!("{}: {e}", meta_path.display())))?;
    if sidecar.format != MODEL_FORMAT {
        return Err(Error::CorruptedModel(format!("unexpected format {:?}", sidecar.format)));
    }
    if sidecar.version != MODEL_VERSION {
        return Err(Error::ModelVersion {
            found: sidecar.version,
            expected: MODEL_VERSION,
        });
    }
    let bytes = fs::read(&tensor_path).map_err(|e| Error::io(&tensor_path, e))?;
    let tensor = Tensor::decode(&bytes, true)?;
    let actual = sha256_hex(&bytes);
    if actual != sidecar.centroids_sha256 {
        return Err(Error::CorruptedModel(format!(
            "{} digest {actual} does not match sidecar",
            tensor_path.display()
        )));
    }
    if tensor.dims() != [sidecar.k, sidecar.dim] {
        return Err(Error::CorruptedModel(format!(
            "centroid dims {:?} disagree with sidecar {}x{}",
            tensor.dims(),
            sidecar.k,
            sidecar.dim
        )));
    }
    let centroids = match tensor.into_data() {
        TensorData::F64(v) => v,
        other => {
            return Err(Error::CorruptedModel(format!(
                "centroids stored as {}, expected f64",
                other.dtype().name()
            )))
        }
    };
    CentroidModel::from_centroids(centroids, sidecar.k, sidecar.dim, sidecar.space, sidecar.fit_meta)
}
