//! Dataset manifests: a JSON index of every input file with its SHA-256.
//!
//! Paths are resolved relative to the directory holding the manifest.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{AttributeTable, FeatureMatrix, PredictionStack, Space};
use crate::error::{Error, Result};
use crate::record::SceneRecord;
use crate::tensor::Tensor;

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileRef {
    pub path: String,
    pub sha256: String,
}

impl FileRef {
    /// Hashes `root/rel` and returns a reference to it.
    pub fn for_file(root: &Path, rel: &str) -> Result<Self> {
        let bytes = fs::read(root.join(rel)).map_err(|e| Error::io(root.join(rel), e))?;
        Ok(Self {
            path: rel.to_owned(),
            sha256: sha256_hex(&bytes),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Population {
    /// Samples standing in for the pretraining distribution.
    Reference,
    /// Samples of the downstream task, one per scene.
    Downstream,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureEntry {
    pub space: Space,
    pub population: Population,
    /// 2-D SHRT tensor, one row per id.
    pub tensor: FileRef,
    /// UTF-8 text, one sample id per line.
    pub ids: FileRef,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneEntry {
    pub scene_id: String,
    /// M x H x W SHRT float tensor.
    pub stack: FileRef,
    /// H x W SHRT u8 tensor.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<FileRef>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    pub dataset: String,
    pub features: Vec<FeatureEntry>,
    pub scenes: Vec<SceneEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attributes: Option<FileRef>,
}

impl Manifest {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("manifest serializes");
        s.push('\n');
        s
    }
}

/// Everything a manifest points at, loaded and cross-checked.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: Manifest,
    pub root: PathBuf,
    /// Hex digest of the manifest file bytes.
    pub manifest_digest: String,
    pub reference: BTreeMap<Space, FeatureMatrix>,
    pub downstream: BTreeMap<Space, FeatureMatrix>,
    pub stacks: Vec<PredictionStack>,
    pub attributes: Option<AttributeTable>,
}

impl Dataset {
    pub fn scene_ids(&self) -> Vec<String> {
        self.stacks.iter().map(|s| s.scene_id().to_owned()).collect()
    }

    /// One empty record per scene, attributes filled in.
    pub fn scene_shells(&self) -> Vec<SceneRecord> {
        self.stacks
            .iter()
            .map(|s| {
                let mut r = SceneRecord::new(s.scene_id());
                if let Some(row) = self.attributes.as_ref().and_then(|t| t.row(s.scene_id())) {
                    r.attributes = row;
                } else if let Some(t) = &self.attributes {
                    r.attributes = t.columns().iter().map(|c| (c.clone(), None)).collect();
                }
                r
            })
            .collect()
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn read_verified(root: &Path, file: &FileRef) -> Result<Vec<u8>> {
    let path = root.join(&file.path);
    if !path.is_file() {
        return Err(Error::MissingFile(path));
    }
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let actual = sha256_hex(&bytes);
    if !actual.eq_ignore_ascii_case(&file.sha256) {
        return Err(Error::ChecksumMismatch {
            path,
            expected: file.sha256.clone(),
            actual,
        });
    }
    Ok(bytes)
}

fn parse_ids(bytes: &[u8], path: &str) -> Result<Vec<String>> {
    let text = std::str::from_utf8(bytes)
        .map_err(|_| Error::Schema(format!("id file {path} is not UTF-8")))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(str::to_owned)
        .collect())
}

/// Reads a manifest, verifies every checksum, and checks that scene ids agree
/// across stacks, downstream features and the attribute table.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
    let manifest: Manifest =
        serde_json::from_slice(&raw).map_err(|e| Error::Schema(format!("{}: {e}", path.display())))?;
    if manifest.version != MANIFEST_VERSION {
        return Err(Error::Schema(format!(
            "manifest version {} not supported",
            manifest.version
        )));
    }
    let root = path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));

    let mut stacks = Vec::with_capacity(manifest.scenes.len());
    let mut scene_set = BTreeSet::new();
    for entry in &manifest.scenes {
        if !scene_set.insert(entry.scene_id.clone()) {
            return Err(Error::DuplicateId(entry.scene_id.clone()));
        }
        let probs = Tensor::decode(&read_verified(&root, &entry.stack)?, true)?;
        let mask = match &entry.mask {
            Some(m) => Some(Tensor::decode(&read_verified(&root, m)?, true)?),
            None => None,
        };
        stacks.push(PredictionStack::from_tensors(
            entry.scene_id.clone(),
            &probs,
            mask.as_ref(),
        )?);
    }

    let mut reference = BTreeMap::new();
    let mut downstream = BTreeMap::new();
    for entry in &manifest.features {
        let tensor = Tensor::decode(&read_verified(&root, &entry.tensor)?, true)?;
        let ids = parse_ids(&read_verified(&root, &entry.ids)?, &entry.ids.path)?;
        let matrix = FeatureMatrix::from_tensor(ids, &tensor, entry.space)?;
        let target = match entry.population {
            Population::Reference => &mut reference,
            Population::Downstream => &mut downstream,
        };
        if target.insert(entry.space, matrix).is_some() {
            return Err(Error::Schema(format!(
                "duplicate {:?} feature entry for space {}",
                entry.population, entry.space
            )));
        }
    }

    for (space, matrix) in &downstream {
        let source_name = format!("downstream {space} features");
        for id in matrix.sample_ids() {
            if !scene_set.contains(id) {
                return Err(Error::DanglingSceneId {
                    scene_id: id.clone(),
                    source_name,
                });
            }
        }
        if matrix.len() != scene_set.len() {
            let have: BTreeSet<&String> = matrix.sample_ids().iter().collect();
            let missing = scene_set.iter().find(|s| !have.contains(s)).unwrap();
            return Err(Error::Schema(format!(
                "scene {missing:?} has no row in {source_name}"
            )));
        }
    }

    let attributes = match &manifest.attributes {
        Some(file) => {
            let bytes = read_verified(&root, file)?;
            let table = AttributeTable::from_csv_reader(bytes.as_slice(), &root.join(&file.path))?;
            if let Some(id) = table.scene_ids().find(|id| !scene_set.contains(*id)) {
                return Err(Error::DanglingSceneId {
                    scene_id: id.to_owned(),
                    source_name: file.path.clone(),
                });
            }
            Some(table)
        }
        None => None,
    };

    Ok(Dataset {
        manifest,
        root,
        manifest_digest: sha256_hex(&raw),
        reference,
        downstream,
        stacks,
        attributes,
    })
}
