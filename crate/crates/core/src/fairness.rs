//! Verification metrics across demographic groups.
//!
//! Two protocols are covered. The accuracy protocol scores each group at its
//! own best threshold and summarizes the per-group accuracies by mean and
//! sample standard deviation. The FPR protocol fixes one global threshold
//! from a target false positive rate over all impostors, measures each
//! group's FPR at that threshold and reports the normalized bias degree.
//! A pair is accepted when its similarity is `>=` the threshold.

use serde::{Deserialize, Serialize};

use crate::error::{PctError, Result};

/// One scored verification pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredPair {
    pub similarity: f64,
    pub genuine: bool,
}

/// Embedding pairs grouped by demographic group.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupedPairs {
    pub names: Vec<String>,
    pub groups: Vec<Vec<(Vec<f64>, Vec<f64>, bool)>>,
}

impl GroupedPairs {
    pub fn validate(&self) -> Result<()> {
        if self.names.len() != self.groups.len() {
            return Err(PctError::Contract(format!(
                "{} group names for {} groups",
                self.names.len(),
                self.groups.len()
            )));
        }
        let mut dim = None;
        for (name, pairs) in self.names.iter().zip(&self.groups) {
            if pairs.is_empty() {
                return Err(PctError::Protocol(format!("group {name} has no pairs")));
            }
            for (a, b, _) in pairs {
                let d = *dim.get_or_insert(a.len());
                if a.len() != d || b.len() != d {
                    return Err(PctError::shape("pair embeddings", &[a.len()], &[b.len()]));
                }
            }
        }
        Ok(())
    }

    pub fn scores(&self) -> Result<GroupedScores> {
        self.validate()?;
        let groups = self
            .groups
            .iter()
            .map(|pairs| {
                pairs
                    .iter()
                    .map(|(a, b, same)| {
                        Ok(ScoredPair {
                            similarity: cosine_similarity(a, b)?,
                            genuine: *same,
                        })
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(GroupedScores {
            names: self.names.clone(),
            groups,
        })
    }
}

/// Similarity-scored pairs grouped by demographic group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupedScores {
    pub names: Vec<String>,
    pub groups: Vec<Vec<ScoredPair>>,
}

impl GroupedScores {
    pub fn impostors(&self) -> Vec<Vec<f64>> {
        self.groups
            .iter()
            .map(|g| g.iter().filter(|p| !p.genuine).map(|p| p.similarity).collect())
            .collect()
    }
}

/// Per-group values with their summary statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupMetrics {
    pub values: Vec<f64>,
    pub ave: f64,
    pub std: f64,
    /// Normalized bias degree; only set for FPR-protocol metrics.
    pub bias_degree: Option<f64>,
}

impl GroupMetrics {
    pub fn from_values(values: Vec<f64>) -> Result<Self> {
        let (ave, std) = ave_std(&values)?;
        Ok(Self {
            values,
            ave,
            std,
            bias_degree: None,
        })
    }
}

/// Accuracy protocol outcome for all groups.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyProtocol {
    pub thresholds: Vec<f64>,
    pub metrics: GroupMetrics,
}

/// FPR protocol outcome at one global target rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FprProtocol {
    pub target_fpr: f64,
    pub threshold: f64,
    pub pooled_fpr: f64,
    pub metrics: GroupMetrics,
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(PctError::shape("cosine_similarity", &[a.len()], &[b.len()]));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(PctError::Numeric("cosine similarity of a zero vector".into()));
    }
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Mean and sample standard deviation (divisor `K-1`).
pub fn ave_std(values: &[f64]) -> Result<(f64, f64)> {
    let k = values.len();
    if k < 2 {
        return Err(PctError::Contract(format!("need at least 2 groups, got {k}")));
    }
    let mean = values.iter().sum::<f64>() / k as f64;
    let ss: f64 = values.iter().map(|v| (v - mean).powi(2)).sum();
    Ok((mean, (ss / (k - 1) as f64).sqrt()))
}

/// Smallest observed similarity `t` with at most `⌊target·N⌋` impostors
/// scoring `>= t`. The reference value is the impostor at index
/// `⌊target·N⌋` of the descending order: `t` is the next larger distinct
/// similarity, or just above the maximum when there is none. A target of 1
/// or more accepts everything and returns -1.
pub fn global_threshold(impostors: &[f64], target_fpr: f64) -> Result<f64> {
    if !(target_fpr > 0.0) {
        return Err(PctError::Contract(format!("target FPR must be positive, got {target_fpr}")));
    }
    if target_fpr >= 1.0 {
        return Ok(-1.0);
    }
    let n = impostors.len();
    let needed = (1.0 / target_fpr).ceil() as usize;
    if n < needed {
        return Err(PctError::Protocol(format!(
            "target FPR {target_fpr} needs at least {needed} impostor pairs, got {n}"
        )));
    }
    let mut sorted = impostors.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let k = (target_fpr * n as f64).floor() as usize;
    let reference = sorted[k];
    Ok(sorted[..k]
        .iter()
        .rev()
        .copied()
        .find(|&s| s > reference)
        .unwrap_or_else(|| next_up(sorted[0])))
}

fn next_up(x: f64) -> f64 {
    if x == 0.0 {
        return f64::from_bits(1);
    }
    let bits = x.to_bits();
    f64::from_bits(if x > 0.0 { bits + 1 } else { bits - 1 })
}

/// Fraction of each group's impostor similarities at or above `threshold`.
pub fn group_fpr(impostors: &[Vec<f64>], threshold: f64) -> Vec<f64> {
    impostors
        .iter()
        .map(|g| {
            if g.is_empty() {
                0.0
            } else {
                g.iter().filter(|&&s| s >= threshold).count() as f64 / g.len() as f64
            }
        })
        .collect()
}

/// `(1/K)·sqrt(Σ(F_k - μ)²) / target_fpr`.
pub fn bias_degree(group_fprs: &[f64], target_fpr: f64) -> Result<f64> {
    let k = group_fprs.len();
    if k < 2 {
        return Err(PctError::Contract(format!("need at least 2 groups, got {k}")));
    }
    if !(target_fpr > 0.0) {
        return Err(PctError::Contract(format!("target FPR must be positive, got {target_fpr}")));
    }
    // Shifted by the first rate so that equal rates give exactly zero.
    let dev: Vec<f64> = group_fprs.iter().map(|f| f - group_fprs[0]).collect();
    let mu = dev.iter().sum::<f64>() / k as f64;
    let ss: f64 = dev.iter().map(|d| (d - mu).powi(2)).sum();
    Ok(ss.sqrt() / k as f64 / target_fpr)
}

/// Best accuracy over thresholds placed below the minimum, at midpoints
/// between adjacent distinct similarities and above the maximum. Ties
/// resolve to the smallest threshold.
pub fn verification_accuracy(pairs: &[ScoredPair]) -> Result<(f64, f64)> {
    let genuine = pairs.iter().filter(|p| p.genuine).count();
    if genuine == 0 || genuine == pairs.len() {
        return Err(PctError::Protocol(
            "accuracy needs both genuine and impostor pairs".into(),
        ));
    }
    let mut sorted = pairs.to_vec();
    sorted.sort_by(|a, b| a.similarity.total_cmp(&b.similarity));
    let n = sorted.len();
    // Everything accepted: genuine pairs are correct.
    let mut correct = genuine;
    let mut best = (correct, sorted[0].similarity - 1.0);
    let mut i = 0;
    while i < n {
        let s = sorted[i].similarity;
        while i < n && sorted[i].similarity == s {
            if sorted[i].genuine {
                correct -= 1;
            } else {
                correct += 1;
            }
            i += 1;
        }
        let t = if i < n {
            0.5 * (s + sorted[i].similarity)
        } else {
            s + 1.0
        };
        if correct > best.0 {
            best = (correct, t);
        }
    }
    Ok((best.0 as f64 / n as f64, best.1))
}

/// ROC staircase from `(0,0)` to `(1,1)`, one point per distinct similarity
/// taken in decreasing order.
pub fn roc_points(pairs: &[ScoredPair]) -> Vec<(f64, f64)> {
    let pos = pairs.iter().filter(|p| p.genuine).count() as f64;
    let neg = pairs.len() as f64 - pos;
    let mut sorted = pairs.to_vec();
    sorted.sort_by(|a, b| b.similarity.total_cmp(&a.similarity));
    let mut points = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0.0, 0.0);
    let mut i = 0;
    while i < sorted.len() {
        let s = sorted[i].similarity;
        while i < sorted.len() && sorted[i].similarity == s {
            if sorted[i].genuine {
                tp += 1.0;
            } else {
                fp += 1.0;
            }
            i += 1;
        }
        let fpr = if neg > 0.0 { fp / neg } else { 0.0 };
        let tpr = if pos > 0.0 { tp / pos } else { 0.0 };
        points.push((fpr, tpr));
    }
    if points.last() != Some(&(1.0, 1.0)) {
        points.push((1.0, 1.0));
    }
    points
}

/// Trapezoidal area under an ROC staircase.
pub fn auc(points: &[(f64, f64)]) -> f64 {
    points
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) * 0.5)
        .sum()
}

/// Keeps the grid values backed by at least ten impostor events.
pub fn feasible_fpr_grid(grid: &[f64], n_impostor: usize) -> Vec<f64> {
    let floor = 10.0 / n_impostor as f64;
    grid.iter().copied().filter(|&f| f >= floor && f > 0.0).collect()
}

pub const DEFAULT_FPR_GRID: [f64; 5] = [1e-1, 1e-2, 1e-3, 1e-4, 1e-5];

pub fn accuracy_protocol(scores: &GroupedScores) -> Result<AccuracyProtocol> {
    let mut acc = Vec::with_capacity(scores.groups.len());
    let mut thresholds = Vec::with_capacity(scores.groups.len());
    for pairs in &scores.groups {
        let (a, t) = verification_accuracy(pairs)?;
        acc.push(a);
        thresholds.push(t);
    }
    Ok(AccuracyProtocol {
        thresholds,
        metrics: GroupMetrics::from_values(acc)?,
    })
}

pub fn fpr_protocol(scores: &GroupedScores, target_fpr: f64) -> Result<FprProtocol> {
    let impostors = scores.impostors();
    if impostors.iter().any(Vec::is_empty) {
        return Err(PctError::Protocol("every group needs impostor pairs".into()));
    }
    let pooled: Vec<f64> = impostors.iter().flatten().copied().collect();
    let threshold = global_threshold(&pooled, target_fpr)?;
    let fprs = group_fpr(&impostors, threshold);
    let pooled_fpr = pooled.iter().filter(|&&s| s >= threshold).count() as f64 / pooled.len() as f64;
    let mut metrics = GroupMetrics::from_values(fprs)?;
    metrics.bias_degree = Some(bias_degree(&metrics.values, target_fpr)?);
    Ok(FprProtocol {
        target_fpr,
        threshold,
        pooled_fpr,
        metrics,
    })
}

/// Rounds half up at `dp` decimals. Inputs that are exact decimals at
/// `dp + 1` places (such as the mean of 2-decimal percentages) round the
/// way decimal arithmetic would despite their binary representation.
pub fn round_half_up(x: f64, dp: i32) -> f64 {
    let scale = 10f64.powi(dp);
    let scaled = x * scale;
    (scaled + scaled.abs().max(1.0) * 1e-12).round() / scale
}

/// Published per-group verification accuracies (%) with the printed
/// summary columns, for African, Asian, Caucasian and Indian in that order.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PublishedRow {
    pub training_set: &'static str,
    pub setting: &'static str,
    pub method: &'static str,
    pub accuracies: [f64; 4],
    pub ave: f64,
    pub std: f64,
}

pub const PUBLISHED_GROUPS: [&str; 4] = ["African", "Asian", "Caucasian", "Indian"];

macro_rules! row {
    ($ts:expr, $set:expr, $m:expr, [$a:expr, $b:expr, $c:expr, $d:expr], $ave:expr, $std:expr) => {
        PublishedRow {
            training_set: $ts,
            setting: $set,
            method: $m,
            accuracies: [$a, $b, $c, $d],
            ave: $ave,
            std: $std,
        }
    };
}

const BAL: &str = "BUPT-Balancedface";
const GLO: &str = "BUPT-Globalface";

pub const PUBLISHED_RFW: [PublishedRow; 28] = [
    row!(BAL, "ResNet-34", "DebFace", [93.67, 94.33, 95.95, 94.78], 94.68, 0.83),
    row!(BAL, "ResNet-34", "PFE", [95.17, 94.27, 96.38, 94.60], 95.11, 0.93),
    row!(BAL, "ResNet-34 ArcFace", "Baseline", [93.98, 93.72, 96.18, 94.67], 94.64, 1.11),
    row!(BAL, "ResNet-34 ArcFace", "MTL", [94.82, 94.47, 96.60, 95.23], 95.28, 0.93),
    row!(BAL, "ResNet-34 ArcFace", "GAC", [94.12, 94.10, 96.02, 94.22], 94.62, 0.81),
    row!(BAL, "ResNet-34 ArcFace", "RL-RBN", [95.00, 94.82, 96.27, 94.68], 95.19, 0.93),
    row!(BAL, "ResNet-34 ArcFace", "PCT", [95.72, 94.98, 96.22, 95.33], 95.56, 0.53),
    row!(BAL, "ResNet-34 CosFace", "Baseline", [92.93, 92.98, 95.12, 93.93], 93.74, 1.03),
    row!(BAL, "ResNet-34 CosFace", "MTL", [95.20, 94.58, 96.82, 95.60], 95.55, 0.94),
    row!(BAL, "ResNet-34 CosFace", "RL-RBN", [95.27, 94.52, 95.47, 95.15], 95.10, 0.41),
    row!(BAL, "ResNet-34 CosFace", "PCT", [96.02, 94.87, 96.72, 96.02], 95.91, 0.77),
    row!(BAL, "ResNet-50 ArcFace", "MTL", [96.05, 95.25, 97.20, 96.05], 96.14, 0.80),
    row!(BAL, "ResNet-50 ArcFace", "PCT", [96.22, 95.73, 97.00, 96.38], 96.33, 0.52),
    row!(BAL, "ResNet-50 CosFace", "MTL", [95.82, 94.93, 96.73, 95.78], 95.82, 0.74),
    row!(BAL, "ResNet-50 CosFace", "GAC", [94.77, 94.87, 96.20, 94.98], 95.21, 0.58),
    row!(BAL, "ResNet-50 CosFace", "PCT", [95.83, 95.48, 96.90, 96.12], 96.08, 0.60),
    row!(GLO, "ResNet-34 ArcFace", "Baseline", [93.87, 94.55, 97.37, 95.86], 95.37, 1.53),
    row!(GLO, "ResNet-34 ArcFace", "MTL", [95.13, 95.92, 97.92, 96.05], 96.26, 1.18),
    row!(GLO, "ResNet-34 ArcFace", "RL-RBN", [94.87, 95.57, 97.08, 95.63], 95.79, 0.93),
    row!(GLO, "ResNet-34 ArcFace", "PCT", [95.87, 95.45, 97.68, 96.15], 96.29, 0.97),
    row!(GLO, "ResNet-34 CosFace", "Baseline", [92.17, 93.50, 96.63, 94.68], 94.25, 1.90),
    row!(GLO, "ResNet-34 CosFace", "MTL", [95.07, 95.53, 97.87, 96.52], 96.25, 1.24),
    row!(GLO, "ResNet-34 CosFace", "RL-RBN", [94.27, 94.58, 96.03, 95.15], 95.01, 0.77),
    row!(GLO, "ResNet-34 CosFace", "PCT", [96.43, 95.88, 97.97, 96.50], 96.70, 0.89),
    row!(GLO, "ResNet-50 ArcFace", "MTL", [96.30, 95.97, 98.03, 96.53], 96.71, 0.91),
    row!(GLO, "ResNet-50 ArcFace", "PCT", [96.58, 96.05, 98.15, 96.93], 96.93, 0.89),
    row!(GLO, "ResNet-50 CosFace", "MTL", [96.37, 96.43, 98.17, 96.95], 96.98, 0.83),
    row!(GLO, "ResNet-50 CosFace", "PCT", [96.62, 96.88, 98.15, 96.97], 97.16, 0.68),
];

/// Recomputed summary of one published row at 2-decimal rounding.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RowCheck {
    pub ave: f64,
    pub std: f64,
    pub matches: bool,
}

pub fn check_published_row(row: &PublishedRow) -> RowCheck {
    let (ave, std) = ave_std(&row.accuracies).expect("four groups");
    let (ave, std) = (round_half_up(ave, 2), round_half_up(std, 2));
    RowCheck {
        ave,
        std,
        matches: (ave - row.ave).abs() < 1e-9 && (std - row.std).abs() < 1e-9,
    }
}
