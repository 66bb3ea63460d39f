//! Learned failure score: an L2-regularized logistic regression over
//! standardized per-scene reliability features.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::record::{SceneRecord, Split};

pub const DEFAULT_MAX_ITER: usize = 5000;
pub const DEFAULT_TOL: f64 = 1e-6;

/// Ordered feature names with train-split standardization statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub names: Vec<String>,
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
    /// Missing values are replaced by the training mean instead of failing.
    #[serde(default)]
    pub impute: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpecFit {
    pub spec: FeatureSpec,
    /// Features removed because they were constant on the training split.
    pub dropped: Vec<String>,
}

fn collect_column(records: &[&SceneRecord], name: &str) -> Vec<Option<f64>> {
    records.iter().map(|r| r.feature(name).filter(|v| v.is_finite())).collect()
}

fn require_complete(records: &[&SceneRecord], name: &str, col: &[Option<f64>]) -> Result<()> {
    let missing: Vec<String> = records
        .iter()
        .zip(col)
        .filter(|(_, v)| v.is_none())
        .map(|(r, _)| r.scene_id.clone())
        .collect();
    if missing.is_empty() {
        Ok(())
    } else {
        Err(Error::MissingFeature {
            feature: name.to_owned(),
            scenes: missing,
        })
    }
}

impl FeatureSpec {
    /// Computes population mean and standard deviation of every feature over
    /// the training records, dropping zero-variance features. Without
    /// `impute`, any missing value is an error.
    pub fn fit(train: &[&SceneRecord], names: &[String]) -> Result<SpecFit> {
        Self::fit_with(train, names, false)
    }

    pub fn fit_with(train: &[&SceneRecord], names: &[String], impute: bool) -> Result<SpecFit> {
        if train.is_empty() {
            return Err(Error::Empty("no training records".into()));
        }
        for (i, n) in names.iter().enumerate() {
            if names[..i].contains(n) {
                return Err(Error::DuplicateId(n.clone()));
            }
        }
        let mut spec = FeatureSpec {
            names: Vec::new(),
            means: Vec::new(),
            stds: Vec::new(),
            impute,
        };
        let mut dropped = Vec::new();
        for name in names {
            let col = collect_column(train, name);
            if !impute {
                require_complete(train, name, &col)?;
            }
            let col: Vec<f64> = col.into_iter().flatten().collect();
            if col.is_empty() {
                dropped.push(name.clone());
                continue;
            }
            let n = col.len() as f64;
            let mean = col.iter().sum::<f64>() / n;
            let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let std = var.sqrt();
            if std > 0.0 && std.is_finite() {
                spec.names.push(name.clone());
                spec.means.push(mean);
                spec.stds.push(std);
            } else {
                dropped.push(name.clone());
            }
        }
        Ok(SpecFit { spec, dropped })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn standardize(&self, raw: &[f64]) -> Result<Vec<f64>> {
        if raw.len() != self.len() {
            return Err(Error::DimensionMismatch {
                expected: self.len(),
                found: raw.len(),
            });
        }
        Ok(raw
            .iter()
            .zip(self.means.iter().zip(&self.stds))
            .map(|(v, (m, s))| (v - m) / s)
            .collect())
    }

    pub fn raw_features(&self, record: &SceneRecord) -> Result<Vec<f64>> {
        self.names
            .iter()
            .zip(&self.means)
            .map(|(n, &mean)| match record.feature(n).filter(|v| v.is_finite()) {
                Some(v) => Ok(v),
                None if self.impute => Ok(mean),
                None => Err(Error::MissingFeature {
                    feature: n.clone(),
                    scenes: vec![record.scene_id.clone()],
                }),
            })
            .collect()
    }
}

/// Row-major standardized design matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignMatrix {
    pub scene_ids: Vec<String>,
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
}

impl DesignMatrix {
    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.cols..(i + 1) * self.cols]
    }
}

/// Standardizes `records` with statistics fitted on the training split.
pub fn build_features(records: &[&SceneRecord], spec: &FeatureSpec) -> Result<DesignMatrix> {
    let mut columns = Vec::with_capacity(spec.len());
    for name in &spec.names {
        let col = collect_column(records, name);
        if !spec.impute {
            require_complete(records, name, &col)?;
        }
        columns.push(col);
    }
    let (rows, cols) = (records.len(), spec.len());
    let mut values = Vec::with_capacity(rows * cols);
    for i in 0..rows {
        for (j, col) in columns.iter().enumerate() {
            let v = col[i].unwrap_or(spec.means[j]);
            values.push((v - spec.means[j]) / spec.stds[j]);
        }
    }
    Ok(DesignMatrix {
        scene_ids: records.iter().map(|r| r.scene_id.clone()).collect(),
        rows,
        cols,
        values,
    })
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^z)` without overflow.
fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub l2: f64,
    pub seed: u64,
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            l2: 1e-2,
            seed: 0,
            max_iter: DEFAULT_MAX_ITER,
            tol: DEFAULT_TOL,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogisticFit {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub iterations: usize,
    pub final_loss: f64,
    pub converged: bool,
    /// Objective after every accepted step, starting from the initial point.
    pub loss_trace: Vec<f64>,
}

struct Problem<'a> {
    x: &'a [f64],
    y: &'a [u8],
    d: usize,
    l2: f64,
}

impl Problem<'_> {
    fn loss(&self, w: &[f64], b: f64) -> f64 {
        let n = self.y.len() as f64;
        let data: f64 = self
            .x
            .chunks_exact(self.d)
            .zip(self.y)
            .map(|(row, &y)| {
                let z = b + row.iter().zip(w).map(|(a, c)| a * c).sum::<f64>();
                softplus(z) - f64::from(y) * z
            })
            .sum();
        data / n + 0.5 * self.l2 * w.iter().map(|v| v * v).sum::<f64>()
    }

    fn gradient(&self, w: &[f64], b: f64) -> (Vec<f64>, f64) {
        let n = self.y.len() as f64;
        let mut gw = vec![0.0; self.d];
        let mut gb = 0.0;
        for (row, &y) in self.x.chunks_exact(self.d).zip(self.y) {
            let z = b + row.iter().zip(w).map(|(a, c)| a * c).sum::<f64>();
            let r = sigmoid(z) - f64::from(y);
            gb += r;
            for (g, a) in gw.iter_mut().zip(row) {
                *g += r * a;
            }
        }
        for (g, wi) in gw.iter_mut().zip(w) {
            *g = *g / n + self.l2 * wi;
        }
        (gw, gb / n)
    }
}

/// Minimizes mean cross-entropy plus `l2 / 2 * |w|^2` (bias unpenalized) by
/// gradient descent with Armijo backtracking, from zero weights.
pub fn train_logistic(x: &[f64], dim: usize, y: &[u8], opts: &TrainOptions) -> Result<LogisticFit> {
    let n = y.len();
    if n < 2 {
        return Err(Error::InvalidInput("need at least 2 training rows".into()));
    }
    if x.len() != n * dim {
        return Err(Error::ShapeMismatch(format!(
            "{n} labels x {dim} features needs {} values, got {}",
            n * dim,
            x.len()
        )));
    }
    if let Some(index) = x.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite { index });
    }
    if y.iter().any(|&v| v > 1) {
        return Err(Error::InvalidInput("labels must be 0 or 1".into()));
    }
    let positives = y.iter().filter(|&&v| v == 1).count();
    if positives == 0 || positives == n {
        return Err(Error::SingleClass);
    }
    if !(opts.l2 >= 0.0) {
        return Err(Error::Config("l2 penalty must be >= 0".into()));
    }

    let problem = Problem { x, y, d: dim, l2: opts.l2 };
    let mut w = vec![0.0; dim];
    let mut b = 0.0;
    let mut loss = problem.loss(&w, b);
    let mut trace = vec![loss];
    let mut step = 1.0f64;
    let mut converged = false;
    let mut iterations = 0;
    while iterations < opts.max_iter {
        let (gw, gb) = problem.gradient(&w, b);
        let gmax = gw.iter().fold(gb.abs(), |m, g| m.max(g.abs()));
        if gmax < opts.tol {
            converged = true;
            break;
        }
        let gsq = gb * gb + gw.iter().map(|g| g * g).sum::<f64>();
        step = (step * 2.0).min(1e6);
        let accepted = loop {
            let cw: Vec<f64> = w.iter().zip(&gw).map(|(wi, g)| wi - step * g).collect();
            let cb = b - step * gb;
            let cl = problem.loss(&cw, cb);
            if cl <= loss - 1e-4 * step * gsq {
                break Some((cw, cb, cl));
            }
            step *= 0.5;
            if step < 1e-20 {
                break None;
            }
        };
        iterations += 1;
        match accepted {
            Some((cw, cb, cl)) => {
                w = cw;
                b = cb;
                loss = cl;
                trace.push(loss);
            }
            // no descent possible at machine precision
            None => break,
        }
    }
    Ok(LogisticFit {
        weights: w,
        bias: b,
        iterations,
        final_loss: loss,
        converged,
        loss_trace: trace,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CombinerMeta {
    pub l2: f64,
    pub iterations: usize,
    pub final_loss: f64,
    pub converged: bool,
    pub seed: u64,
    pub failure_threshold: f64,
}

/// Persisted logistic failure model, including the feature standardization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Combiner {
    pub features: FeatureSpec,
    pub weights: Vec<f64>,
    pub bias: f64,
    pub meta: CombinerMeta,
}

impl Combiner {
    /// Failure probability for an already standardized feature vector.
    pub fn score(&self, z: &[f64]) -> Result<f64> {
        if z.len() != self.weights.len() {
            return Err(Error::DimensionMismatch {
                expected: self.weights.len(),
                found: z.len(),
            });
        }
        Ok(sigmoid(
            self.bias + z.iter().zip(&self.weights).map(|(a, w)| a * w).sum::<f64>(),
        ))
    }

    pub fn score_record(&self, record: &SceneRecord) -> Result<f64> {
        let raw = self.features.raw_features(record)?;
        self.score(&self.features.standardize(&raw)?)
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

pub fn combiner_score(model: &Combiner, z: &[f64]) -> Result<f64> {
    model.score(z)
}

pub fn train_combiner(
    design: &DesignMatrix,
    labels: &[u8],
    spec: FeatureSpec,
    opts: &TrainOptions,
    failure_threshold: f64,
) -> Result<Combiner> {
    if design.rows != labels.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} design rows vs {} labels",
            design.rows,
            labels.len()
        )));
    }
    if design.cols != spec.len() {
        return Err(Error::DimensionMismatch {
            expected: spec.len(),
            found: design.cols,
        });
    }
    let fit = train_logistic(&design.values, design.cols, labels, opts)?;
    Ok(Combiner {
        features: spec,
        weights: fit.weights,
        bias: fit.bias,
        meta: CombinerMeta {
            l2: opts.l2,
            iterations: fit.iterations,
            final_loss: fit.final_loss,
            converged: fit.converged,
            seed: opts.seed,
            failure_threshold,
        },
    })
}

/// `1` where the scene's F1 falls below `threshold`.
pub fn failure_labels(records: &[&SceneRecord], threshold: f64) -> Result<Vec<u8>> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::Config(format!(
            "failure threshold must be in (0, 1), got {threshold}"
        )));
    }
    records
        .iter()
        .map(|r| {
            let e = r.evaluation.as_ref().ok_or_else(|| Error::MissingFeature {
                feature: "f1".into(),
                scenes: vec![r.scene_id.clone()],
            })?;
            Ok(u8::from(e.f1_for_risk < threshold))
        })
        .collect()
}

/// Seeded split stratified by label. Within each class, scenes are taken in
/// id order, shuffled, and the first `round(fraction * n_class)` go to train;
/// a class with at least two members always contributes to both splits.
pub fn stratified_split(scene_ids: &[String], labels: &[u8], train_fraction: f64, seed: u64) -> Result<Vec<Split>> {
    if scene_ids.len() != labels.len() {
        return Err(Error::ShapeMismatch("one label per scene".into()));
    }
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::Config(format!(
            "train fraction must be in (0, 1), got {train_fraction}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = vec![Split::Eval; labels.len()];
    for class in [0u8, 1u8] {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        idx.sort_by(|&a, &b| scene_ids[a].cmp(&scene_ids[b]));
        idx.shuffle(&mut rng);
        let n = idx.len();
        let mut take = (train_fraction * n as f64).round() as usize;
        if n >= 2 {
            take = take.clamp(1, n - 1);
        }
        for &i in idx.iter().take(take) {
            out[i] = Split::Train;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdObjective {
    /// F1 of detecting failures by `score > threshold`.
    MaxDetectionF1,
    /// Coverage (fraction kept) as close as possible to the target.
    Coverage(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdChoice {
    pub threshold: f64,
    pub objective_value: f64,
    pub coverage: f64,
    pub warning: Option<String>,
}

fn detection_f1(scores: &[f64], labels: &[u8], t: f64) -> f64 {
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for (&s, &y) in scores.iter().zip(labels) {
        match (s > t, y == 1) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
    }
    let den = 2 * tp + fp + fn_;
    if den == 0 {
        0.0
    } else {
        2.0 * tp as f64 / den as f64
    }
}

/// Scans midpoints between consecutive distinct scores and keeps the best by
/// `objective`; ties resolve to the higher coverage.
pub fn select_threshold(scores: &[f64], labels: &[u8], objective: ThresholdObjective) -> Result<ThresholdChoice> {
    if scores.len() != labels.len() {
        return Err(Error::ShapeMismatch("one label per score".into()));
    }
    if scores.len() < 2 {
        return Err(Error::InvalidInput("threshold selection needs at least 2 scores".into()));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::InvalidInput("scores must be finite".into()));
    }
    if objective == ThresholdObjective::MaxDetectionF1 && (!labels.contains(&0) || !labels.contains(&1)) {
        return Err(Error::SingleClass);
    }
    if let ThresholdObjective::Coverage(c) = objective {
        if !(0.0..=1.0).contains(&c) {
            return Err(Error::Config(format!("target coverage must be in [0, 1], got {c}")));
        }
    }
    let mut uniq = scores.to_vec();
    uniq.sort_by(f64::total_cmp);
    uniq.dedup();
    let (candidates, warning) = if uniq.len() == 1 {
        (uniq.clone(), Some("all scores are equal; threshold cannot separate scenes".to_owned()))
    } else {
        (uniq.windows(2).map(|w| w[0] + (w[1] - w[0]) / 2.0).collect(), None)
    };
    let n = scores.len() as f64;
    let mut best: Option<ThresholdChoice> = None;
    for t in candidates {
        let coverage = scores.iter().filter(|&&s| s <= t).count() as f64 / n;
        let value = match objective {
            ThresholdObjective::MaxDetectionF1 => detection_f1(scores, labels, t),
            ThresholdObjective::Coverage(c) => -(coverage - c).abs(),
        };
        // ascending scan: coverage never decreases, so >= prefers higher coverage
        if best.as_ref().is_none_or(|b| value >= b.objective_value) {
            best = Some(ThresholdChoice {
                threshold: t,
                objective_value: value,
                coverage,
                warning: warning.clone(),
            });
        }
    }
    Ok(best.expect("at least one candidate"))
}
