//! Expected (equal-width) and adaptive (equal-mass) calibration error.
//!
//! Both report `sum_m (|B_m| / n) |acc(B_m) - conf(B_m)|`, where `conf` is the
//! mean predicted probability in the bin and `acc` the fraction of positive
//! labels.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_BINS: usize = 15;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum CalibrationMode {
    Ece,
    Ace,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationBin {
    pub count: usize,
    /// `None` for an empty bin.
    pub confidence: Option<f64>,
    pub accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationResult {
    pub mode: CalibrationMode,
    pub bins: Vec<CalibrationBin>,
    pub n: usize,
    pub error: f64,
}

fn summarize(group: impl Iterator<Item = (f64, u8)>) -> CalibrationBin {
    let (mut count, mut conf, mut pos) = (0usize, 0.0f64, 0usize);
    for (p, y) in group {
        count += 1;
        conf += p;
        pos += usize::from(y);
    }
    if count == 0 {
        CalibrationBin {
            count,
            confidence: None,
            accuracy: None,
        }
    } else {
        CalibrationBin {
            count,
            confidence: Some(conf / count as f64),
            accuracy: Some(pos as f64 / count as f64),
        }
    }
}

pub fn calibration(probs: &[f64], labels: &[u8], mode: CalibrationMode, bins: usize) -> Result<CalibrationResult> {
    if probs.len() != labels.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} probabilities vs {} labels",
            probs.len(),
            labels.len()
        )));
    }
    if bins == 0 {
        return Err(Error::InvalidInput("bin count must be >= 1".into()));
    }
    let n = probs.len();
    if n < bins {
        return Err(Error::TooManyBins { n, bins });
    }
    if let Some((index, &value)) = probs.iter().enumerate().find(|(_, p)| !(0.0..=1.0).contains(*p)) {
        return Err(Error::ProbabilityOutOfRange { index, value });
    }
    if let Some(i) = labels.iter().position(|&y| y > 1) {
        return Err(Error::InvalidInput(format!("label at {i} is not binary")));
    }

    let result_bins: Vec<CalibrationBin> = match mode {
        CalibrationMode::Ece => {
            let mut members: Vec<Vec<(f64, u8)>> = vec![Vec::new(); bins];
            for (&p, &y) in probs.iter().zip(labels) {
                let b = ((p * bins as f64).floor() as usize).min(bins - 1);
                members[b].push((p, y));
            }
            members.into_iter().map(|g| summarize(g.into_iter())).collect()
        }
        CalibrationMode::Ace => {
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| probs[a].total_cmp(&probs[b]));
            let (base, extra) = (n / bins, n % bins);
            let mut start = 0;
            (0..bins)
                .map(|m| {
                    let size = base + usize::from(m < extra);
                    let group = order[start..start + size].iter().map(|&i| (probs[i], labels[i]));
                    start += size;
                    summarize(group)
                })
                .collect()
        }
    };
    let error = result_bins
        .iter()
        .filter_map(|b| Some(b.count as f64 * (b.accuracy? - b.confidence?).abs()))
        .sum::<f64>()
        / n as f64;
    Ok(CalibrationResult {
        mode,
        bins: result_bins,
        n,
        error,
    })
}
