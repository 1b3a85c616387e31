//! Segmentation metrics and clustering agreement.

use serde::Serialize;

use crate::error::{Error, Result};

/// `counts[truth][pred]`.
pub fn confusion(pred: &[usize], truth: &[usize], class_count: usize) -> Result<Vec<Vec<u64>>> {
    if pred.len() != truth.len() {
        return Err(Error::invalid(format!(
            "{} predictions for {} ground-truth labels",
            pred.len(),
            truth.len()
        )));
    }
    let mut m = vec![vec![0u64; class_count]; class_count];
    for (&p, &t) in pred.iter().zip(truth) {
        if p >= class_count || t >= class_count {
            return Err(Error::invalid(format!(
                "label out of range for {class_count} classes (pred {p}, truth {t})"
            )));
        }
        m[t][p] += 1;
    }
    Ok(m)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IouReport {
    pub miou: f64,
    /// `None` for classes absent from both prediction and truth.
    pub per_class: Vec<Option<f64>>,
}

/// Per-class `TP / (TP + FP + FN)`; classes absent from both prediction and
/// truth are left out of the mean.
pub fn miou(pred: &[usize], truth: &[usize], class_count: usize) -> Result<IouReport> {
    let cm = confusion(pred, truth, class_count)?;
    let mut per_class = Vec::with_capacity(class_count);
    for (c, row) in cm.iter().enumerate() {
        let tp = row[c];
        let fn_: u64 = row.iter().sum::<u64>() - tp;
        let fp: u64 = (0..class_count).map(|t| cm[t][c]).sum::<u64>() - tp;
        let denom = tp + fp + fn_;
        per_class.push((denom > 0).then(|| tp as f64 / denom as f64));
    }
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    let miou = if present.is_empty() {
        0.0
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    };
    Ok(IouReport { miou, per_class })
}

/// Mean per-class recall over classes present in the truth.
pub fn macc(pred: &[usize], truth: &[usize], class_count: usize) -> Result<f64> {
    let cm = confusion(pred, truth, class_count)?;
    let recalls: Vec<f64> = (0..class_count)
        .filter_map(|c| {
            let total: u64 = cm[c].iter().sum();
            (total > 0).then(|| cm[c][c] as f64 / total as f64)
        })
        .collect();
    Ok(if recalls.is_empty() {
        0.0
    } else {
        recalls.iter().sum::<f64>() / recalls.len() as f64
    })
}

/// Adjusted Rand index between two labelings of the same points.
///
/// Returns 1.0 when both labelings are a single cluster (or there are fewer
/// than two points); agreement is then perfect but carries no information.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::invalid("labelings differ in length"));
    }
    let n = a.len();
    if n < 2 {
        return Ok(1.0);
    }
    let ka = a.iter().max().map_or(0, |m| m + 1);
    let kb = b.iter().max().map_or(0, |m| m + 1);
    let mut table = vec![0u64; ka * kb];
    for (&x, &y) in a.iter().zip(b) {
        table[x * kb + y] += 1;
    }
    let pairs = |c: u64| (c * c.saturating_sub(1)) as f64 / 2.0;
    let index: f64 = table.iter().map(|&c| pairs(c)).sum();
    let rows: f64 = (0..ka).map(|i| pairs(table[i * kb..(i + 1) * kb].iter().sum())).sum();
    let cols: f64 = (0..kb).map(|j| pairs((0..ka).map(|i| table[i * kb + j]).sum())).sum();
    let total = pairs(n as u64);
    let expected = rows * cols / total;
    let max = 0.5 * (rows + cols);
    if (max - expected).abs() < f64::EPSILON {
        // Both labelings are trivial (one cluster) or both are all-singletons.
        return Ok(if (index - expected).abs() < f64::EPSILON { 1.0 } else { 0.0 });
    }
    Ok((index - expected) / (max - expected))
}
