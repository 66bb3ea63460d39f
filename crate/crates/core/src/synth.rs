//! Deterministic synthetic datasets for tests and demos.
//!
//! Recipe, per scene `i`:
//! - OOD scenes draw a shift level `u_i ~ U(0.25, 1)`; in-distribution scenes
//!   have `u_i = 0`. Downstream features are mixture samples moved by
//!   `u_i * shift * sigma` along every coordinate.
//! - Difficulty `d_i = clamp(base + ood * u_i + noise * v_i, 0, 0.95)` with
//!   `v_i ~ U(0, 1)`.
//! - The truth mask is a disc. Member `m` predicts
//!   `sigmoid(4 (1 - d) (2t - 1) + g + e_m)` per pixel, where `g ~ N(0, (3d)^2)`
//!   is shared by all members and `e_m ~ N(0, (2d)^2)` is not. Harder scenes
//!   therefore get both lower F1 and larger member disagreement.
//! - Attributes track difficulty: elevation and pasture extent fall with it,
//!   river area grows with it (log-normal), each value missing at
//!   `missing_rate`.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{AttributeTable, FeatureMatrix, PredictionStack, Space};
use crate::error::{Error, Result};
use crate::manifest::{FeatureEntry, FileRef, Manifest, Population, SceneEntry, MANIFEST_VERSION};
use crate::tensor::{write_atomic, Tensor};

pub const ATTRIBUTES: [&str; 3] = ["ele_mt_sav", "ria_ha_ssu", "pst_pc_sse"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MixtureSpec {
    pub components: usize,
    pub dim: usize,
    pub sigma: f64,
    /// Distance of generated centers from the origin.
    pub radius: f64,
    /// Explicit centers; generated when absent.
    pub centers: Option<Vec<Vec<f64>>>,
}

impl Default for MixtureSpec {
    fn default() -> Self {
        Self {
            components: 15,
            dim: 8,
            sigma: 0.1,
            radius: 2.0,
            centers: None,
        }
    }
}

impl MixtureSpec {
    /// Centers of the mixture. Generated centers sit at `+radius * e_j` for the
    /// first `dim` components and `-radius * e_j` after that, so any two are at
    /// least `radius * sqrt(2)` apart.
    pub fn centers(&self) -> Result<Vec<Vec<f64>>> {
        if let Some(c) = &self.centers {
            if c.len() != self.components || c.iter().any(|r| r.len() != self.dim) {
                return Err(Error::Config(format!(
                    "expected {} centers of dimension {}",
                    self.components, self.dim
                )));
            }
            return Ok(c.clone());
        }
        if self.components > 2 * self.dim {
            return Err(Error::Config(format!(
                "cannot place {} axis centers in {} dimensions",
                self.components, self.dim
            )));
        }
        Ok((0..self.components)
            .map(|j| {
                let mut c = vec![0.0; self.dim];
                let (axis, sign) = if j < self.dim { (j, 1.0) } else { (j - self.dim, -1.0) };
                c[axis] = sign * self.radius;
                c
            })
            .collect())
    }

    fn validate(&self) -> Result<()> {
        if self.components == 0 || self.dim == 0 {
            return Err(Error::Config("mixture needs >= 1 component and dimension".into()));
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::Config(format!("sigma must be > 0, got {}", self.sigma)));
        }
        self.centers().map(|_| ())
    }
}

/// Draws `n` rows, component `i % components` for row `i`, each moved by
/// `shift * sigma` along every coordinate. Returns the rows and components.
pub fn sample_mixture(spec: &MixtureSpec, n: usize, shift: f64, rng: &mut ChaCha8Rng) -> Result<(Vec<f64>, Vec<usize>)> {
    spec.validate()?;
    let centers = spec.centers()?;
    let mut values = Vec::with_capacity(n * spec.dim);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % spec.components;
        labels.push(c);
        values.extend(sample_point(&centers[c], spec.sigma, shift, rng));
    }
    Ok((values, labels))
}

fn sample_point(center: &[f64], sigma: f64, shift: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let noise = Normal::new(0.0, 1.0).expect("unit normal");
    center
        .iter()
        .map(|&mu| mu + shift * sigma + sigma * noise.sample(rng))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DifficultyWeights {
    pub base: f64,
    pub ood: f64,
    pub noise: f64,
}

impl Default for DifficultyWeights {
    fn default() -> Self {
        Self {
            base: 0.05,
            ood: 0.6,
            noise: 0.3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub seed: u64,
    pub reference_samples: usize,
    pub raw: MixtureSpec,
    pub embedding: MixtureSpec,
    pub scenes: usize,
    pub ood_fraction: f64,
    /// Largest OOD displacement, in units of sigma per coordinate.
    pub shift: f64,
    pub members: usize,
    pub height: usize,
    pub width: usize,
    pub difficulty: DifficultyWeights,
    pub missing_rate: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            reference_samples: 600,
            raw: MixtureSpec::default(),
            embedding: MixtureSpec {
                dim: 16,
                ..MixtureSpec::default()
            },
            scenes: 100,
            ood_fraction: 0.4,
            shift: 5.0,
            members: 5,
            height: 32,
            width: 32,
            difficulty: DifficultyWeights::default(),
            missing_rate: 0.05,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        self.raw.validate()?;
        self.embedding.validate()?;
        let counts = [
            ("reference_samples", self.reference_samples),
            ("scenes", self.scenes),
            ("members", self.members),
            ("height", self.height),
            ("width", self.width),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be >= 1")));
        }
        if !(0.0..=1.0).contains(&self.ood_fraction) || !(0.0..1.0).contains(&self.missing_rate) {
            return Err(Error::Config("ood_fraction in [0, 1] and missing_rate in [0, 1) required".into()));
        }
        if !self.shift.is_finite() {
            return Err(Error::Config("shift must be finite".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthScene {
    pub scene_id: String,
    pub ood: bool,
    pub shift_level: f64,
    pub difficulty: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthData {
    pub config: SynthConfig,
    pub scenes: Vec<SynthScene>,
    pub reference: Vec<FeatureMatrix>,
    pub downstream: Vec<FeatureMatrix>,
    pub stacks: Vec<PredictionStack>,
    pub attributes: AttributeTable,
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

fn disc_mask(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Vec<u8> {
    let cy = rng.random_range(0.3..0.7) * h as f64;
    let cx = rng.random_range(0.3..0.7) * w as f64;
    let r = rng.random_range(0.15..0.3) * h.min(w) as f64;
    let mut mask = vec![0u8; h * w];
    for y in 0..h {
        for x in 0..w {
            let (dy, dx) = (y as f64 + 0.5 - cy, x as f64 + 0.5 - cx);
            mask[y * w + x] = u8::from(dy * dy + dx * dx <= r * r);
        }
    }
    // keep at least one positive pixel
    if !mask.contains(&1) {
        mask[(h / 2) * w + w / 2] = 1;
    }
    mask
}

fn simulate_stack(rng: &mut ChaCha8Rng, truth: &[u8], members: usize, d: f64) -> Vec<f64> {
    let n = truth.len();
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
    let shared: Vec<f64> = truth
        .iter()
        .map(|&t| 4.0 * (1.0 - d) * (2.0 * f64::from(t) - 1.0) + 3.0 * d * std_normal.sample(rng))
        .collect();
    let mut probs = Vec::with_capacity(members * n);
    for _ in 0..members {
        for s in &shared {
            let p = sigmoid(s + 2.0 * d * std_normal.sample(rng));
            // stored as f32 on disk; round here so memory and disk agree
            probs.push(f64::from(p as f32));
        }
    }
    probs
}

pub fn synth_generate(cfg: &SynthConfig) -> Result<SynthData> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let specs = [(Space::Raw, &cfg.raw), (Space::Embedding, &cfg.embedding)];

    let mut reference = Vec::new();
    for (space, spec) in specs {
        let (values, _) = sample_mixture(spec, cfg.reference_samples, 0.0, &mut rng)?;
        let ids = (0..cfg.reference_samples).map(|i| format!("ref_{}_{i:05}", space.as_str())).collect();
        reference.push(FeatureMatrix::new(ids, values, spec.dim, space)?);
    }

    let n_ood = (cfg.ood_fraction * cfg.scenes as f64).round() as usize;
    let mut scenes = Vec::with_capacity(cfg.scenes);
    for i in 0..cfg.scenes {
        let ood = i % cfg.scenes.max(1) < n_ood;
        let shift_level = if ood { rng.random_range(0.25..=1.0) } else { 0.0 };
        let v: f64 = rng.random();
        let w = &cfg.difficulty;
        let difficulty = (w.base + w.ood * shift_level + w.noise * v).clamp(0.0, 0.95);
        scenes.push(SynthScene {
            scene_id: format!("scene_{i:04}"),
            ood,
            shift_level,
            difficulty,
        });
    }

    let ids: Vec<String> = scenes.iter().map(|s| s.scene_id.clone()).collect();
    let mut downstream = Vec::new();
    for (space, spec) in specs {
        let centers = spec.centers()?;
        let mut values = Vec::with_capacity(cfg.scenes * spec.dim);
        for (i, s) in scenes.iter().enumerate() {
            let c = (i * 7) % spec.components;
            values.extend(sample_point(&centers[c], spec.sigma, s.shift_level * cfg.shift, &mut rng));
        }
        downstream.push(FeatureMatrix::new(ids.clone(), values, spec.dim, space)?);
    }

    let mut stacks = Vec::with_capacity(cfg.scenes);
    let mut attributes = AttributeTable::new(ATTRIBUTES.iter().map(|s| (*s).to_owned()).collect())?;
    let noise = Normal::new(0.0, 1.0).expect("unit normal");
    for s in &scenes {
        let truth = disc_mask(&mut rng, cfg.height, cfg.width);
        let probs = simulate_stack(&mut rng, &truth, cfg.members, s.difficulty);
        stacks.push(PredictionStack::new(
            s.scene_id.clone(),
            cfg.members,
            cfg.height,
            cfg.width,
            probs,
            Some(truth),
        )?);
        let d = s.difficulty;
        let raw_values = [
            800.0 - 600.0 * d + 40.0 * noise.sample(&mut rng),
            (2.0 + 3.0 * d + 0.4 * noise.sample(&mut rng)).exp(),
            (60.0 - 40.0 * d + 5.0 * noise.sample(&mut rng)).clamp(0.0, 100.0),
        ];
        let row = raw_values
            .iter()
            .map(|&v| {
                let missing = rng.random::<f64>() < cfg.missing_rate;
                (!missing).then_some(v)
            })
            .collect();
        attributes.insert(s.scene_id.clone(), row)?;
    }

    Ok(SynthData {
        config: cfg.clone(),
        scenes,
        reference,
        downstream,
        stacks,
        attributes,
    })
}

fn write_file(root: &Path, rel: &str, bytes: &[u8]) -> Result<FileRef> {
    let path = root.join(rel);
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    write_atomic(&path, bytes)?;
    FileRef::for_file(root, rel)
}

fn stack_tensor(stack: &PredictionStack) -> Result<Tensor> {
    let probs = stack.probs().iter().map(|&p| p as f32).collect();
    Tensor::from_f32(vec![stack.members(), stack.height(), stack.width()], probs)
}

/// Writes the dataset under `dir` and returns the manifest path.
pub fn write_dataset(data: &SynthData, dir: impl AsRef<Path>) -> Result<PathBuf> {
    let root = dir.as_ref();
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let mut features = Vec::new();
    for (population, matrices) in [
        (Population::Reference, &data.reference),
        (Population::Downstream, &data.downstream),
    ] {
        for m in matrices {
            let stem = format!(
                "features/{}_{}",
                match population {
                    Population::Reference => "reference",
                    Population::Downstream => "downstream",
                },
                m.space().as_str()
            );
            let tensor = write_file(root, &format!("{stem}.shrt"), &m.to_tensor().encode())?;
            let mut ids = m.sample_ids().join("\n");
            ids.push('\n');
            let ids = write_file(root, &format!("{stem}.ids"), ids.as_bytes())?;
            features.push(FeatureEntry {
                space: m.space(),
                population,
                tensor,
                ids,
            });
        }
    }
    let mut scenes = Vec::new();
    for stack in &data.stacks {
        let id = stack.scene_id();
        let stack_ref = write_file(root, &format!("stacks/{id}.shrt"), &stack_tensor(stack)?.encode())?;
        let mask = match stack.mask() {
            Some(m) => {
                let t = Tensor::from_u8(vec![stack.height(), stack.width()], m.to_vec())?;
                Some(write_file(root, &format!("masks/{id}.shrt"), &t.encode())?)
            }
            None => None,
        };
        scenes.push(SceneEntry {
            scene_id: id.to_owned(),
            stack: stack_ref,
            mask,
        });
    }
    let attributes = write_file(root, "attributes.csv", data.attributes.to_csv_string().as_bytes())?;
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        dataset: format!("synthetic-seed{}", data.config.seed),
        features,
        scenes,
        attributes: Some(attributes),
    };
    let path = root.join("manifest.json");
    write_atomic(&path, manifest.to_json().as_bytes())?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig {
            reference_samples: 60,
            scenes: 12,
            height: 8,
            width: 8,
            members: 3,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn same_seed_same_data() {
        assert_eq!(synth_generate(&small()).unwrap(), synth_generate(&small()).unwrap());
        let other = SynthConfig { seed: 8, ..small() };
        assert_ne!(synth_generate(&small()).unwrap().stacks, synth_generate(&other).unwrap().stacks);
    }

    #[test]
    fn axis_centers_are_separated() {
        let c = MixtureSpec::default().centers().unwrap();
        assert_eq!(c.len(), 15);
        for i in 0..c.len() {
            for j in 0..i {
                let d: f64 = c[i].iter().zip(&c[j]).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
                assert!(d >= 2.0);
            }
        }
        let bad = MixtureSpec {
            components: 17,
            ..MixtureSpec::default()
        };
        assert!(bad.centers().is_err());
    }

    #[test]
    fn invalid_configs() {
        assert!(synth_generate(&SynthConfig { scenes: 0, ..small() }).is_err());
        let mut c = small();
        c.raw.sigma = 0.0;
        assert!(synth_generate(&c).is_err());
    }

    #[test]
    fn ood_fraction_respected() {
        let d = synth_generate(&small()).unwrap();
        let n_ood = d.scenes.iter().filter(|s| s.ood).count();
        assert_eq!(n_ood, 5);
        assert!(d.scenes.iter().all(|s| s.ood == (s.shift_level > 0.0)));
    }
}
