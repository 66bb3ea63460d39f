//! In-memory representations of feature matrices, prediction stacks and
//! attribute tables.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tensor, TensorData};

/// Which representation a feature vector lives in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Space {
    Raw,
    Embedding,
}

impl Space {
    pub const ALL: [Space; 2] = [Space::Raw, Space::Embedding];

    pub fn as_str(self) -> &'static str {
        match self {
            Space::Raw => "raw",
            Space::Embedding => "embedding",
        }
    }

    /// Suffix used in score names, e.g. `ncdd_embeddings`.
    pub fn score_suffix(self) -> &'static str {
        match self {
            Space::Raw => "raw",
            Space::Embedding => "embeddings",
        }
    }
}

impl fmt::Display for Space {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Space {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "raw" => Ok(Space::Raw),
            "embedding" | "embeddings" => Ok(Space::Embedding),
            other => Err(Error::Config(format!("unknown space {other:?}"))),
        }
    }
}

/// N samples by D features, row-major, always finite.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    sample_ids: Vec<String>,
    values: Vec<f64>,
    dim: usize,
    space: Space,
}

impl FeatureMatrix {
    pub fn new(sample_ids: Vec<String>, values: Vec<f64>, dim: usize, space: Space) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidInput("feature dimension must be >= 1".into()));
        }
        if values.len() != sample_ids.len() * dim {
            return Err(Error::ShapeMismatch(format!(
                "{} ids x {dim} dims needs {} values, got {}",
                sample_ids.len(),
                sample_ids.len() * dim,
                values.len()
            )));
        }
        if let Some(index) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        let mut seen = BTreeSet::new();
        for id in &sample_ids {
            if !seen.insert(id.as_str()) {
                return Err(Error::DuplicateId(id.clone()));
            }
        }
        Ok(Self {
            sample_ids,
            values,
            dim,
            space,
        })
    }

    pub fn from_rows(sample_ids: Vec<String>, rows: &[Vec<f64>], space: Space) -> Result<Self> {
        let dim = rows.first().map_or(1, Vec::len);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::ShapeMismatch("ragged feature rows".into()));
        }
        Self::new(sample_ids, rows.concat(), dim, space)
    }

    /// Builds a matrix from a 2-D SHRT tensor and a parallel id list.
    pub fn from_tensor(sample_ids: Vec<String>, tensor: &Tensor, space: Space) -> Result<Self> {
        let dims = tensor.dims();
        if dims.len() != 2 {
            return Err(Error::ShapeMismatch(format!(
                "feature tensor must be 2-D, got dims {dims:?}"
            )));
        }
        if dims[0] != sample_ids.len() {
            return Err(Error::ShapeMismatch(format!(
                "feature tensor has {} rows but {} sample ids",
                dims[0],
                sample_ids.len()
            )));
        }
        if matches!(tensor.data(), TensorData::U8(_)) {
            return Err(Error::DtypeMismatch {
                expected: "f32 or f64",
                found: "u8",
            });
        }
        Self::new(sample_ids, tensor.to_f64_vec(), dims[1], space)
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_f64(vec![self.len(), self.dim], self.values.clone())
            .expect("feature matrix dims are validated at construction")
    }

    pub fn len(&self) -> usize {
        self.sample_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sample_ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn space(&self) -> Space {
        self.space
    }

    pub fn sample_ids(&self) -> &[String] {
        &self.sample_ids
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.values.chunks_exact(self.dim)
    }

    /// Row indices ordered by sample id.
    pub fn canonical_order(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.sort_by(|&a, &b| self.sample_ids[a].cmp(&self.sample_ids[b]));
        idx
    }

    pub fn select(&self, ids: &[String]) -> Result<Self> {
        let lookup: BTreeMap<&str, usize> = self
            .sample_ids
            .iter()
            .enumerate()
            .map(|(i, s)| (s.as_str(), i))
            .collect();
        let mut values = Vec::with_capacity(ids.len() * self.dim);
        for id in ids {
            let &i = lookup.get(id.as_str()).ok_or_else(|| Error::DanglingSceneId {
                scene_id: id.clone(),
                source_name: format!("{} feature matrix", self.space),
            })?;
            values.extend_from_slice(self.row(i));
        }
        Self::new(ids.to_vec(), values, self.dim, self.space)
    }
}

/// M ensemble probability maps for one scene, plus an optional truth mask.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionStack {
    scene_id: String,
    members: usize,
    height: usize,
    width: usize,
    probs: Vec<f64>,
    mask: Option<Vec<u8>>,
}

impl PredictionStack {
    pub fn new(
        scene_id: impl Into<String>,
        members: usize,
        height: usize,
        width: usize,
        probs: Vec<f64>,
        mask: Option<Vec<u8>>,
    ) -> Result<Self> {
        if members == 0 {
            return Err(Error::Empty("prediction stack has no members".into()));
        }
        if height == 0 || width == 0 {
            return Err(Error::InvalidDims(vec![members, height, width]));
        }
        if probs.len() != members * height * width {
            return Err(Error::ShapeMismatch(format!(
                "stack {members}x{height}x{width} needs {} values, got {}",
                members * height * width,
                probs.len()
            )));
        }
        if let Some((index, &value)) = probs
            .iter()
            .enumerate()
            .find(|(_, p)| !(0.0..=1.0).contains(*p))
        {
            return Err(Error::ProbabilityOutOfRange { index, value });
        }
        if let Some(m) = &mask {
            if m.len() != height * width {
                return Err(Error::ShapeMismatch(format!(
                    "mask has {} pixels, stack is {height}x{width}",
                    m.len()
                )));
            }
            if let Some(pos) = m.iter().position(|&v| v > 1) {
                return Err(Error::InvalidInput(format!(
                    "mask value {} at pixel {pos} is not binary",
                    m[pos]
                )));
            }
        }
        Ok(Self {
            scene_id: scene_id.into(),
            members,
            height,
            width,
            probs,
            mask,
        })
    }

    /// Builds a stack from an M x H x W float tensor and an optional H x W u8 mask.
    pub fn from_tensors(scene_id: impl Into<String>, probs: &Tensor, mask: Option<&Tensor>) -> Result<Self> {
        let dims = probs.dims();
        let (m, h, w) = match *dims {
            [m, h, w] => (m, h, w),
            [h, w] => (1, h, w),
            _ => {
                return Err(Error::ShapeMismatch(format!(
                    "prediction tensor must be M x H x W, got {dims:?}"
                )))
            }
        };
        if matches!(probs.data(), TensorData::U8(_)) {
            return Err(Error::DtypeMismatch {
                expected: "f32 or f64",
                found: "u8",
            });
        }
        let mask = match mask {
            None => None,
            Some(t) => {
                if t.dims() != [h, w] {
                    return Err(Error::ShapeMismatch(format!(
                        "mask dims {:?} do not match {h}x{w}",
                        t.dims()
                    )));
                }
                match t.data() {
                    TensorData::U8(v) => Some(v.clone()),
                    other => {
                        return Err(Error::DtypeMismatch {
                            expected: "u8",
                            found: other.dtype().name(),
                        })
                    }
                }
            }
        };
        Self::new(scene_id, m, h, w, probs.to_f64_vec(), mask)
    }

    pub fn scene_id(&self) -> &str {
        &self.scene_id
    }

    pub fn members(&self) -> usize {
        self.members
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    /// Probability map of one member, row-major H x W.
    pub fn member(&self, i: usize) -> &[f64] {
        let n = self.pixels();
        &self.probs[i * n..(i + 1) * n]
    }

    pub fn mask(&self) -> Option<&[u8]> {
        self.mask.as_deref()
    }
}

/// Per-scene environmental attributes; `None` marks a missing value.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AttributeTable {
    columns: Vec<String>,
    rows: BTreeMap<String, Vec<Option<f64>>>,
}

impl AttributeTable {
    pub fn new(columns: Vec<String>) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for c in &columns {
            if c.is_empty() {
                return Err(Error::Schema("attribute column names must be nonempty".into()));
            }
            if !seen.insert(c.as_str()) {
                return Err(Error::DuplicateId(c.clone()));
            }
        }
        Ok(Self {
            columns,
            rows: BTreeMap::new(),
        })
    }

    pub fn insert(&mut self, scene_id: impl Into<String>, values: Vec<Option<f64>>) -> Result<()> {
        let scene_id = scene_id.into();
        if values.len() != self.columns.len() {
            return Err(Error::ShapeMismatch(format!(
                "row {scene_id:?} has {} values for {} columns",
                values.len(),
                self.columns.len()
            )));
        }
        if values.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "row {scene_id:?} has a non-finite value"
            )));
        }
        if self.rows.contains_key(&scene_id) {
            return Err(Error::DuplicateId(scene_id));
        }
        self.rows.insert(scene_id, values);
        Ok(())
    }

    pub fn columns(&self) -> &[String] {
        &self.columns
    }

    pub fn scene_ids(&self) -> impl Iterator<Item = &str> {
        self.rows.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn get(&self, scene_id: &str, column: &str) -> Option<f64> {
        let c = self.columns.iter().position(|n| n == column)?;
        self.rows.get(scene_id)?.get(c).copied().flatten()
    }

    pub fn row(&self, scene_id: &str) -> Option<BTreeMap<String, Option<f64>>> {
        let values = self.rows.get(scene_id)?;
        Some(self.columns.iter().cloned().zip(values.iter().copied()).collect())
    }

    /// Parses CSV with a header row whose first column is the scene id.
    /// Empty cells are missing values.
    pub fn from_csv_reader<R: std::io::Read>(reader: R, origin: &Path) -> Result<Self> {
        let csv_err = |message: String| Error::Csv {
            path: origin.to_path_buf(),
            message,
        };
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
        let headers = rdr.headers().map_err(|e| csv_err(e.to_string()))?.clone();
        if headers.is_empty() {
            return Err(csv_err("missing header row".into()));
        }
        let columns: Vec<String> = headers.iter().skip(1).map(str::to_owned).collect();
        let mut table = Self::new(columns)?;
        for record in rdr.records() {
            let record = record.map_err(|e| csv_err(e.to_string()))?;
            let id = record.get(0).unwrap_or_default().to_owned();
            if id.is_empty() {
                return Err(csv_err("empty scene id".into()));
            }
            let mut values = Vec::with_capacity(table.columns.len());
            for (i, cell) in record.iter().skip(1).enumerate() {
                if cell.is_empty() {
                    values.push(None);
                } else {
                    let v: f64 = cell.parse().map_err(|_| {
                        csv_err(format!(
                            "scene {id:?} column {:?}: cannot parse {cell:?}",
                            table.columns[i]
                        ))
                    })?;
                    values.push(Some(v));
                }
            }
            table.insert(id, values)?;
        }
        Ok(table)
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv_reader(file, path)
    }

    pub fn to_csv_string(&self) -> String {
        let mut out = String::from("scene_id");
        for c in &self.columns {
            out.push(',');
            out.push_str(c);
        }
        out.push('\n');
        for (id, values) in &self.rows {
            out.push_str(id);
            for v in values {
                out.push(',');
                if let Some(v) = v {
                    out.push_str(&v.to_string());
                }
            }
            out.push('\n');
        }
        out
    }
}

/// Collapses a B x H x W chip to `[mean_1..mean_B, std_1..std_B]` with
/// population standard deviations.
pub fn reduce_bands(chip: &[f64], bands: usize, height: usize, width: usize) -> Result<Vec<f64>> {
    if bands == 0 || height == 0 || width == 0 {
        return Err(Error::InvalidDims(vec![bands, height, width]));
    }
    let n = height * width;
    if chip.len() != bands * n {
        return Err(Error::ShapeMismatch(format!(
            "chip {bands}x{height}x{width} needs {} values, got {}",
            bands * n,
            chip.len()
        )));
    }
    if let Some(index) = chip.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite { index });
    }
    let mut means = Vec::with_capacity(bands);
    let mut stds = Vec::with_capacity(bands);
    for band in chip.chunks_exact(n) {
        // Welford
        let (mut mean, mut m2) = (0.0f64, 0.0f64);
        for (i, &x) in band.iter().enumerate() {
            let delta = x - mean;
            mean += delta / (i + 1) as f64;
            m2 += delta * (x - mean);
        }
        means.push(mean);
        stds.push((m2.max(0.0) / n as f64).sqrt());
    }
    means.extend(stds);
    Ok(means)
}
