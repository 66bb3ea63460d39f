//! Stage runner. Every stage reads the dataset and earlier stage outputs from
//! the work directory and writes its own JSON output there, so stages can run
//! one at a time from the CLI or all at once.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::clustering::{elbow_scan, fit_kmeans_restarts, load_model, save_model, ElbowOptions};
use crate::config::PipelineConfig;
use crate::data::Space;
use crate::error::{Error, Result};
use crate::evaluation::{
    calibration, confusion, discard_curve, flag_at_threshold, seg_metrics, CalibrationMode, CalibrationResult,
    Decision,
};
use crate::fusion::{
    build_features, failure_labels, select_threshold, stratified_split, train_combiner, Combiner, FeatureSpec,
    ThresholdObjective, TrainOptions,
};
use crate::link::{decile_group, group_trend, DecileGrouping, GroupTrend};
use crate::manifest::{load_manifest, sha256_hex, Dataset};
use crate::ood::{density_summary, score_population, NcddParams, OodScore};
use crate::record::{FusionOutcome, OodSummary, SceneEvaluation, SceneRecord, Split, UncertaintySummary};
use crate::report::{
    curves_csv, deciles_csv, scores_csv, summary_csv, CombinerSummary, CurveEntry, CurvePopulation, ElbowEntry,
    FlagSummary, ModelSummary, Report, RunInfo, SpaceDensity, SummaryRow, REPORT_SCHEMA, SCHEMA_VERSION,
};
use crate::tensor::{read_tensor, write_atomic, write_tensor, Tensor};
use crate::uncertainty::{score_scene, PixelMetric};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    Fit,
    ScoreOod,
    ScoreUncertainty,
    Evaluate,
    Discard,
    Fuse,
    Link,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 8] = [
        Stage::Fit,
        Stage::ScoreOod,
        Stage::ScoreUncertainty,
        Stage::Evaluate,
        Stage::Discard,
        Stage::Fuse,
        Stage::Link,
        Stage::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Fit => "fit",
            Stage::ScoreOod => "score-ood",
            Stage::ScoreUncertainty => "score-uncertainty",
            Stage::Evaluate => "evaluate",
            Stage::Discard => "discard",
            Stage::Fuse => "fuse",
            Stage::Link => "link",
            Stage::Report => "report",
        }
    }
}

/// Layout of a work directory.
#[derive(Debug, Clone)]
pub struct WorkDir {
    root: PathBuf,
}

impl WorkDir {
    pub fn new(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        fs::create_dir_all(&root).map_err(|e| Error::io(&root, e))?;
        Ok(Self { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn stage_path(&self, stage: Stage) -> PathBuf {
        self.root.join("stages").join(format!("{}.json", stage.name()))
    }

    pub fn model_base(&self, space: Space) -> PathBuf {
        self.root.join("models").join(space.as_str())
    }

    pub fn map_path(&self, scene_id: &str) -> PathBuf {
        self.root.join("maps").join(format!("{}.shrt", file_stem(scene_id)))
    }

    pub fn report_path(&self) -> PathBuf {
        self.root.join("report.json")
    }

    fn write_json<T: Serialize>(&self, stage: Stage, value: &T) -> Result<()> {
        let path = self.stage_path(stage);
        ensure_parent(&path)?;
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        write_atomic(&path, text.as_bytes())
    }

    fn read_json<T: DeserializeOwned>(&self, stage: Stage) -> Result<T> {
        let path = self.stage_path(stage);
        if !path.is_file() {
            return Err(Error::MissingStage(format!(
                "{} (expected {})",
                stage.name(),
                path.display()
            )));
        }
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Per-pixel maps of a scene, `4 x H x W` in [`PixelMetric::ALL`] order.
    pub fn read_maps(&self, scene_id: &str) -> Result<Tensor> {
        read_tensor(self.map_path(scene_id))
    }
}

/// Scene ids are used as file names when they are plainly safe; others are
/// hashed.
fn file_stem(id: &str) -> String {
    let safe = !id.is_empty()
        && !id.starts_with('.')
        && id.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.'));
    if safe {
        id.to_owned()
    } else {
        format!("id-{}", &sha256_hex(id.as_bytes())[..32])
    }
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitOutput {
    pub models: Vec<ModelSummary>,
    pub elbow: Vec<ElbowEntry>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OodOutput {
    pub scores: Vec<OodScore>,
    pub densities: Vec<SpaceDensity>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyOutput {
    pub scenes: BTreeMap<String, UncertaintySummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationOutput {
    pub scenes: BTreeMap<String, SceneEvaluation>,
    pub calibration: Vec<CalibrationResult>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscardOutput {
    pub curves: Vec<CurveEntry>,
    pub flag: Option<FlagSummary>,
    pub decisions: BTreeMap<String, bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionOutput {
    pub combiners: Vec<CombinerSummary>,
    pub outcomes: BTreeMap<String, FusionOutcome>,
    pub curves: Vec<CurveEntry>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkOutput {
    pub groupings: Vec<DecileGrouping>,
    pub trends: Vec<GroupTrend>,
    pub warnings: Vec<String>,
}

pub const COMBINER_FLAGS: &str = "flags";
pub const COMBINER_ATTRIBUTES: &str = "flags_attributes";

pub struct Pipeline {
    cfg: PipelineConfig,
    manifest: PathBuf,
    work: WorkDir,
}

impl Pipeline {
    pub fn new(cfg: PipelineConfig, manifest: impl Into<PathBuf>, work_dir: impl Into<PathBuf>) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            manifest: manifest.into(),
            work: WorkDir::new(work_dir)?,
        })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.cfg
    }

    pub fn work_dir(&self) -> &WorkDir {
        &self.work
    }

    fn in_pool<T: Send>(&self, f: impl FnOnce() -> Result<T> + Send) -> Result<T> {
        match self.cfg.threads {
            None => f(),
            Some(n) => rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| Error::Config(format!("thread pool: {e}")))?
                .install(f),
        }
    }

    pub fn run_stage(&self, stage: Stage) -> Result<()> {
        self.in_pool(|| {
            let ds = load_manifest(&self.manifest)?;
            self.stage(stage, &ds)
        })
    }

    /// Runs every stage in order and returns the report.
    pub fn run_all(&self) -> Result<Report> {
        self.in_pool(|| {
            let ds = load_manifest(&self.manifest)?;
            for stage in Stage::ALL {
                self.stage(stage, &ds)?;
            }
            Report::from_json(
                &fs::read_to_string(self.work.report_path()).map_err(|e| Error::io(self.work.report_path(), e))?,
            )
        })
    }

    fn stage(&self, stage: Stage, ds: &Dataset) -> Result<()> {
        match stage {
            Stage::Fit => {
                let out = self.fit(ds)?;
                self.work.write_json(stage, &out)
            }
            Stage::ScoreOod => {
                let out = self.score_ood(ds)?;
                self.work.write_json(stage, &out)
            }
            Stage::ScoreUncertainty => {
                let out = self.score_uncertainty(ds)?;
                self.work.write_json(stage, &out)
            }
            Stage::Evaluate => {
                let out = self.evaluate(ds)?;
                self.work.write_json(stage, &out)
            }
            Stage::Discard => {
                let records = self.base_records(ds)?;
                let out = self.discard(&records)?;
                self.work.write_json(stage, &out)
            }
            Stage::Fuse => {
                let records = self.base_records(ds)?;
                let out = self.fuse(&records)?;
                self.work.write_json(stage, &out)
            }
            Stage::Link => {
                let mut records = self.base_records(ds)?;
                let fusion: FusionOutput = self.work.read_json(Stage::Fuse)?;
                apply_fusion(&mut records, &fusion);
                let columns = ds.attributes.as_ref().map(|t| t.columns().to_vec()).unwrap_or_default();
                let out = self.link(&records, &columns)?;
                self.work.write_json(stage, &out)
            }
            Stage::Report => self.report(ds),
        }
    }

    fn fit(&self, ds: &Dataset) -> Result<FitOutput> {
        let c = &self.cfg.clustering;
        let mut models = Vec::new();
        let mut elbow = Vec::new();
        let mut warnings = Vec::new();
        for (&space, reference) in &ds.reference {
            if !ds.downstream.contains_key(&space) {
                warnings.push(format!("{space}: reference features without downstream features; skipped"));
                continue;
            }
            let opts = ElbowOptions {
                restarts: c.restarts,
                max_iter: c.max_iter,
                tol: c.tol,
            };
            let mut scanned = Vec::new();
            if !c.elbow_candidates.is_empty() {
                let ks: Vec<usize> = c.elbow_candidates.iter().copied().filter(|&k| k <= reference.len()).collect();
                match elbow_scan(reference, &ks, self.cfg.seed, &opts) {
                    Ok((scan, fitted)) => {
                        elbow.push(ElbowEntry { space, scan });
                        scanned = fitted;
                    }
                    Err(e) if c.k.is_some() => warnings.push(format!("{space}: elbow scan skipped: {e}")),
                    Err(e) => return Err(e),
                }
            }
            let k = match c.k {
                Some(k) => k,
                None => elbow.last().expect("scan ran").scan.chosen_k,
            };
            let model = match scanned.into_iter().find(|m| m.k() == k) {
                Some(m) => m,
                None => fit_kmeans_restarts(reference, k, self.cfg.seed, c.restarts, c.max_iter, c.tol)?,
            };
            let base = self.work.model_base(space);
            ensure_parent(&base)?;
            save_model(&model, &base)?;
            models.push(ModelSummary {
                space,
                k: model.k(),
                dim: model.dim(),
                digest: model.digest(),
                wcss: model.fit_meta.wcss,
                seed: model.fit_meta.seed,
                iterations_run: model.fit_meta.iterations_run,
                converged: model.fit_meta.converged,
            });
        }
        if models.is_empty() {
            return Err(Error::Schema("no feature space has both reference and downstream features".into()));
        }
        Ok(FitOutput { models, elbow, warnings })
    }

    fn score_ood(&self, ds: &Dataset) -> Result<OodOutput> {
        let fit: FitOutput = self.work.read_json(Stage::Fit)?;
        let mut scores = Vec::new();
        let mut densities = Vec::new();
        for summary in &fit.models {
            let model = load_model(self.work.model_base(summary.space))?;
            if model.digest() != summary.digest {
                return Err(Error::CorruptedModel(format!(
                    "{} model changed since the fit stage",
                    summary.space
                )));
            }
            let beta = self.cfg.ood.beta.unwrap_or((model.k() - 1) as f64);
            let params = NcddParams::new(self.cfg.ood.alpha, beta)?;
            let down = score_population(&model, &ds.downstream[&summary.space], &params)?;
            let reference = score_population(&model, &ds.reference[&summary.space], &params)?;
            let (r, d) = density_summary(&reference, &down, self.cfg.ood.density_bins)?;
            densities.push(SpaceDensity {
                space: summary.space,
                reference: r,
                downstream: d,
            });
            scores.extend(down);
        }
        Ok(OodOutput { scores, densities })
    }

    fn score_uncertainty(&self, ds: &Dataset) -> Result<UncertaintyOutput> {
        let roi = self.cfg.uncertainty.roi;
        let results = ds
            .stacks
            .par_iter()
            .map(|stack| score_scene(stack, &roi))
            .collect::<Result<Vec<_>>>()?;
        let mut scenes = BTreeMap::new();
        for u in &results {
            let m = &u.metrics;
            let mut maps = Vec::with_capacity(4 * m.mean_prob.len());
            for metric in PixelMetric::ALL {
                maps.extend_from_slice(m.map(metric));
            }
            let path = self.work.map_path(&m.scene_id);
            ensure_parent(&path)?;
            write_tensor(&Tensor::from_f64(vec![4, m.height, m.width], maps)?, &path)?;
            scenes.insert(m.scene_id.clone(), UncertaintySummary::from(u));
        }
        Ok(UncertaintyOutput { scenes })
    }

    fn evaluate(&self, ds: &Dataset) -> Result<EvaluationOutput> {
        let threshold = self.cfg.uncertainty.prediction_threshold;
        let per_scene = ds
            .stacks
            .par_iter()
            .filter(|s| s.mask().is_some())
            .map(|stack| {
                let n = stack.pixels();
                let mut mean = vec![0.0; n];
                for m in 0..stack.members() {
                    for (acc, p) in mean.iter_mut().zip(stack.member(m)) {
                        *acc += p;
                    }
                }
                let members = stack.members() as f64;
                mean.iter_mut().for_each(|v| *v /= members);
                let pred: Vec<u8> = mean.iter().map(|&p| u8::from(p >= threshold)).collect();
                let truth = stack.mask().expect("filtered");
                let c = confusion(&pred, truth)?;
                Ok((stack.scene_id().to_owned(), SceneEvaluation::new(c, seg_metrics(&c)), mean))
            })
            .collect::<Result<Vec<_>>>()?;

        let mut warnings = Vec::new();
        let unevaluated = ds.stacks.len() - per_scene.len();
        if unevaluated > 0 {
            warnings.push(format!("{unevaluated} scenes have no truth mask and are not evaluated"));
        }
        let mut probs = Vec::new();
        let mut labels = Vec::new();
        let masks: BTreeMap<&str, &[u8]> = ds
            .stacks
            .iter()
            .filter_map(|s| Some((s.scene_id(), s.mask()?)))
            .collect();
        for (id, _, mean) in &per_scene {
            probs.extend_from_slice(mean);
            labels.extend_from_slice(masks[id.as_str()]);
        }
        let bins = self.cfg.evaluation.calibration_bins;
        let mut results = Vec::new();
        if probs.len() >= bins {
            for mode in [CalibrationMode::Ece, CalibrationMode::Ace] {
                results.push(calibration(&probs, &labels, mode, bins)?);
            }
        } else {
            warnings.push(format!("calibration skipped: {} pixels for {bins} bins", probs.len()));
        }
        Ok(EvaluationOutput {
            scenes: per_scene.into_iter().map(|(id, e, _)| (id, e)).collect(),
            calibration: results,
            warnings,
        })
    }

    /// Scene records with OOD, uncertainty, evaluation and attributes filled.
    pub fn base_records(&self, ds: &Dataset) -> Result<Vec<SceneRecord>> {
        let ood: OodOutput = self.work.read_json(Stage::ScoreOod)?;
        let unc: UncertaintyOutput = self.work.read_json(Stage::ScoreUncertainty)?;
        let eval: EvaluationOutput = self.work.read_json(Stage::Evaluate)?;
        let mut records = ds.scene_shells();
        let index: BTreeMap<String, usize> = records
            .iter()
            .enumerate()
            .map(|(i, r)| (r.scene_id.clone(), i))
            .collect();
        let lookup = |id: &str, source: &str| {
            index.get(id).copied().ok_or_else(|| Error::DanglingSceneId {
                scene_id: id.to_owned(),
                source_name: source.to_owned(),
            })
        };
        for s in &ood.scores {
            let i = lookup(&s.scene_id, "score-ood output")?;
            records[i].ood.insert(s.space, OodSummary::from(s));
        }
        for (id, u) in unc.scenes {
            let i = lookup(&id, "score-uncertainty output")?;
            records[i].uncertainty = Some(u);
        }
        for (id, e) in eval.scenes {
            let i = lookup(&id, "evaluate output")?;
            records[i].evaluation = Some(e);
        }
        Ok(records)
    }

    fn discard(&self, records: &[SceneRecord]) -> Result<DiscardOutput> {
        let evaluated: Vec<&SceneRecord> = records.iter().filter(|r| r.evaluation.is_some()).collect();
        if evaluated.is_empty() {
            return Err(Error::Empty("no evaluated scenes to discard from".into()));
        }
        let curves = curves_for(&evaluated, &self.cfg.discard.scores, CurvePopulation::All)?;

        let name = &self.cfg.discard.flag_score;
        let scores: Vec<Option<f64>> = records.iter().map(|r| r.feature(name)).collect();
        let defined: Vec<f64> = scores.iter().flatten().copied().collect();
        let (threshold, source) = match self.cfg.discard.threshold {
            Some(t) => (t, "fixed".to_owned()),
            None if defined.len() >= 2 => {
                let target = self.cfg.discard.target_coverage;
                let zeros = vec![0u8; defined.len()];
                let choice = select_threshold(&defined, &zeros, ThresholdObjective::Coverage(target))?;
                (choice.threshold, format!("target_coverage={target}"))
            }
            None => {
                return Ok(DiscardOutput {
                    curves,
                    flag: None,
                    decisions: BTreeMap::new(),
                })
            }
        };
        let decisions = flag_at_threshold(&scores, threshold)?;
        let kept: Vec<&SceneRecord> = records
            .iter()
            .zip(&decisions)
            .filter(|(_, d)| **d == Decision::Keep)
            .map(|(r, _)| r)
            .collect();
        let mean_f1 = |rs: &[&SceneRecord]| {
            let f: Vec<f64> = rs.iter().filter_map(|r| r.evaluation.as_ref()).map(|e| e.f1_for_risk).collect();
            (!f.is_empty()).then(|| f.iter().sum::<f64>() / f.len() as f64)
        };
        let flag = FlagSummary {
            score_name: name.clone(),
            threshold,
            threshold_source: source,
            kept: kept.len(),
            discarded: records.len() - kept.len(),
            coverage: kept.len() as f64 / records.len() as f64,
            full_mean_f1: mean_f1(&evaluated).expect("nonempty"),
            nonrejected_mean_f1: mean_f1(&kept),
        };
        Ok(DiscardOutput {
            curves,
            flag: Some(flag),
            decisions: records
                .iter()
                .zip(decisions)
                .map(|(r, d)| (r.scene_id.clone(), d == Decision::Discard))
                .collect(),
        })
    }

    fn fuse(&self, records: &[SceneRecord]) -> Result<FusionOutput> {
        let f = &self.cfg.fusion;
        let evaluated: Vec<&SceneRecord> = records.iter().filter(|r| r.evaluation.is_some()).collect();
        let mut out = FusionOutput {
            combiners: Vec::new(),
            outcomes: BTreeMap::new(),
            curves: Vec::new(),
            warnings: Vec::new(),
        };
        let labels = failure_labels(&evaluated, f.failure_threshold)?;
        let ids: Vec<String> = evaluated.iter().map(|r| r.scene_id.clone()).collect();
        if evaluated.len() < 4 || !labels.contains(&0) || !labels.contains(&1) {
            out.warnings.push(format!(
                "combiner not trained: {} evaluated scenes, {} failures",
                evaluated.len(),
                labels.iter().filter(|&&y| y == 1).count()
            ));
            return Ok(out);
        }
        let split = stratified_split(&ids, &labels, f.train_fraction, self.cfg.seed)?;
        let pick = |want: Split| -> (Vec<&SceneRecord>, Vec<u8>) {
            let idx: Vec<usize> = (0..split.len()).filter(|&i| split[i] == want).collect();
            (idx.iter().map(|&i| evaluated[i]).collect(), idx.iter().map(|&i| labels[i]).collect())
        };
        let (train, train_y) = pick(Split::Train);
        let (eval, eval_y) = pick(Split::Eval);
        let opts = TrainOptions {
            l2: f.l2,
            seed: self.cfg.seed,
            max_iter: f.max_iter,
            tol: f.tol,
        };

        let mut variants = vec![(COMBINER_FLAGS, f.features.clone(), false)];
        let attribute_columns: Vec<String> = f
            .attribute_features
            .iter()
            .filter(|a| evaluated.iter().any(|r| r.attributes.contains_key(*a)))
            .cloned()
            .collect();
        if !attribute_columns.is_empty() {
            let mut names = f.features.clone();
            names.extend(attribute_columns);
            variants.push((COMBINER_ATTRIBUTES, names, true));
        }

        let mut scored: Vec<(String, Vec<f64>)> = Vec::new();
        for (name, features, impute) in variants {
            let fit = FeatureSpec::fit_with(&train, &features, impute)?;
            let design = build_features(&train, &fit.spec)?;
            let model = train_combiner(&design, &train_y, fit.spec.clone(), &opts, f.failure_threshold)?;
            let scores = evaluated
                .iter()
                .map(|r| model.score_record(r))
                .collect::<Result<Vec<_>>>()?;
            let train_scores: Vec<f64> = (0..split.len())
                .filter(|&i| split[i] == Split::Train)
                .map(|i| scores[i])
                .collect();
            let threshold = match select_threshold(&train_scores, &train_y, f.threshold_objective) {
                Ok(t) => Some(t),
                Err(e) => {
                    out.warnings.push(format!("{name}: no threshold: {e}"));
                    None
                }
            };
            if let Some(w) = threshold.as_ref().and_then(|t| t.warning.clone()) {
                out.warnings.push(format!("{name}: {w}"));
            }
            if !fit.dropped.is_empty() {
                out.warnings.push(format!("{name}: constant features dropped: {}", fit.dropped.join(", ")));
            }
            write_atomic(
                &self.work.root().join(format!("combiner_{name}.json")),
                model.to_json()?.as_bytes(),
            )?;
            out.combiners.push(summarize(name, &model, fit.dropped, threshold, &train_y, &eval_y));
            scored.push((name.to_owned(), scores));
        }

        for (i, r) in evaluated.iter().enumerate() {
            out.outcomes.insert(
                r.scene_id.clone(),
                FusionOutcome {
                    split: split[i],
                    failure: labels[i] == 1,
                    classifier_score: scored[0].1[i],
                    classifier_score_attributes: scored.get(1).map(|s| s.1[i]),
                },
            );
        }

        let mut with_fusion: Vec<SceneRecord> = eval.iter().map(|r| (*r).clone()).collect();
        for r in &mut with_fusion {
            r.fusion = out.outcomes.get(&r.scene_id).cloned();
        }
        let refs: Vec<&SceneRecord> = with_fusion.iter().collect();
        let mut names = self.cfg.discard.scores.clone();
        names.push("classifier_score".into());
        if scored.len() > 1 {
            names.push("classifier_score_attributes".into());
        }
        out.curves = curves_for(&refs, &names, CurvePopulation::Eval)?;
        Ok(out)
    }

    fn link(&self, records: &[SceneRecord], table_columns: &[String]) -> Result<LinkOutput> {
        let attributes = if self.cfg.link.attributes.is_empty() {
            table_columns.to_vec()
        } else {
            self.cfg.link.attributes.clone()
        };
        let evaluated: Vec<SceneRecord> = records.iter().filter(|r| r.evaluation.is_some()).cloned().collect();
        let pairs: Vec<(&String, &String)> = attributes
            .iter()
            .flat_map(|a| self.cfg.link.scores.iter().map(move |s| (a, s)))
            .collect();
        let results: Vec<Result<(DecileGrouping, Option<GroupTrend>, Option<String>)>> = pairs
            .par_iter()
            .map(|(a, s)| {
                let g = decile_group(&evaluated, a, s)?;
                match group_trend(&g) {
                    Ok(t) => Ok((g, Some(t), None)),
                    Err(e @ Error::TooFewGroups(_)) => Ok((g, None, Some(format!("{a} / {s}: {e}")))),
                    Err(e) => Err(e),
                }
            })
            .collect();
        let mut out = LinkOutput {
            groupings: Vec::new(),
            trends: Vec::new(),
            warnings: Vec::new(),
        };
        for ((a, s), r) in pairs.iter().zip(results) {
            match r {
                Ok((g, t, w)) => {
                    out.groupings.push(g);
                    out.trends.extend(t);
                    out.warnings.extend(w);
                }
                Err(e @ Error::TooFewScenes { .. }) => out.warnings.push(format!("{a} / {s}: {e}")),
                Err(e) => return Err(e),
            }
        }
        Ok(out)
    }

    fn report(&self, ds: &Dataset) -> Result<()> {
        let fit: FitOutput = self.work.read_json(Stage::Fit)?;
        let ood: OodOutput = self.work.read_json(Stage::ScoreOod)?;
        let eval: EvaluationOutput = self.work.read_json(Stage::Evaluate)?;
        let discard: DiscardOutput = self.work.read_json(Stage::Discard)?;
        let fusion: FusionOutput = self.work.read_json(Stage::Fuse)?;
        let link: LinkOutput = self.work.read_json(Stage::Link)?;
        let mut records = self.base_records(ds)?;
        apply_fusion(&mut records, &fusion);
        for r in &mut records {
            r.discard = discard.decisions.get(&r.scene_id).copied();
        }
        let curves: Vec<CurveEntry> = discard.curves.into_iter().chain(fusion.curves).collect();
        let summary = curves
            .iter()
            .map(|c| SummaryRow {
                population: c.population,
                score_name: c.curve.score_name.clone(),
                aurc: c.curve.aurc,
                risk_at_half: c.curve.risk_at_half,
                auc_nrf1: c.curve.auc_nrf1,
                nrf1_at_half: c.curve.nrf1_at_half,
            })
            .collect();
        let warnings = fit
            .warnings
            .into_iter()
            .chain(eval.warnings)
            .chain(fusion.warnings)
            .chain(link.warnings)
            .collect();
        let report = Report {
            schema_version: SCHEMA_VERSION,
            run: RunInfo {
                seed: self.cfg.seed,
                config_digest: self.cfg.digest(),
                manifest_digest: ds.manifest_digest.clone(),
                dataset: ds.manifest.dataset.clone(),
                generator: format!("geotrust {}", env!("CARGO_PKG_VERSION")),
            },
            scenes: records,
            curves,
            summary,
            calibration: eval.calibration,
            densities: ood.densities,
            elbow: fit.elbow,
            models: fit.models,
            flag: discard.flag,
            combiners: fusion.combiners,
            groupings: link.groupings,
            trends: link.trends,
            warnings,
        };
        report.check_integrity()?;
        write_report_files(&report, &self.cfg.discard.scores, self.work.root())
    }
}

fn curves_for(records: &[&SceneRecord], names: &[String], population: CurvePopulation) -> Result<Vec<CurveEntry>> {
    let ids: Vec<String> = records.iter().map(|r| r.scene_id.clone()).collect();
    let f1: Vec<f64> = records
        .iter()
        .map(|r| r.evaluation.as_ref().map(|e| e.f1_for_risk).unwrap_or(1.0))
        .collect();
    names
        .iter()
        .map(|name| {
            let scores: Vec<Option<f64>> = records.iter().map(|r| r.feature(name)).collect();
            Ok(CurveEntry {
                population,
                curve: discard_curve(name, &ids, &scores, &f1)?,
            })
        })
        .collect()
}

fn apply_fusion(records: &mut [SceneRecord], fusion: &FusionOutput) {
    for r in records {
        r.fusion = fusion.outcomes.get(&r.scene_id).cloned();
    }
}

fn summarize(
    name: &str,
    model: &Combiner,
    dropped: Vec<String>,
    threshold: Option<crate::fusion::ThresholdChoice>,
    train_y: &[u8],
    eval_y: &[u8],
) -> CombinerSummary {
    let failures = |y: &[u8]| y.iter().filter(|&&v| v == 1).count();
    CombinerSummary {
        name: name.to_owned(),
        features: model.features.clone(),
        dropped_features: dropped,
        weights: model.weights.clone(),
        bias: model.bias,
        meta: model.meta.clone(),
        threshold,
        train_scenes: train_y.len(),
        eval_scenes: eval_y.len(),
        train_failures: failures(train_y),
        eval_failures: failures(eval_y),
    }
}

/// Writes `report.json`, its schema, and the CSV exports into `dir`.
pub fn write_report_files(report: &Report, score_names: &[String], dir: &Path) -> Result<()> {
    write_atomic(&dir.join("report.json"), report.to_json()?.as_bytes())?;
    write_atomic(&dir.join("report.schema.json"), REPORT_SCHEMA.as_bytes())?;
    write_atomic(&dir.join("scores.csv"), &scores_csv(report, score_names)?)?;
    write_atomic(&dir.join("curves.csv"), &curves_csv(report)?)?;
    write_atomic(&dir.join("summary.csv"), &summary_csv(report)?)?;
    write_atomic(&dir.join("deciles.csv"), &deciles_csv(report)?)?;
    Ok(())
}
