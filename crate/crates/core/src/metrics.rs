//! Segmentation quality: global and frequency-weighted IoU.

use crate::error::{Error, Result};
use crate::tensor::ClassMap;

/// `matrix[label][predicted]` pixel counts.
pub fn confusion_matrix(labels: &ClassMap, predicted: &ClassMap, n_classes: usize) -> Result<Vec<Vec<u64>>> {
    if !labels.same_shape(predicted) {
        return Err(Error::Shape(format!(
            "label map {}x{} vs prediction {}x{}",
            labels.height(),
            labels.width(),
            predicted.height(),
            predicted.width()
        )));
    }
    let mut m = vec![vec![0u64; n_classes]; n_classes];
    for (&l, &p) in labels.classes().iter().zip(predicted.classes()) {
        if l as usize >= n_classes || p as usize >= n_classes {
            return Err(Error::InvalidArgument(format!("class {} outside 0..{n_classes}", l.max(p))));
        }
        m[l as usize][p as usize] += 1;
    }
    Ok(m)
}

/// Per-class `(TP, TP + FP + FN)`.
fn tallies(m: &[Vec<u64>]) -> Vec<(u64, u64)> {
    (0..m.len())
        .map(|c| {
            let tp = m[c][c];
            let row: u64 = m[c].iter().sum();
            let col: u64 = m.iter().map(|r| r[c]).sum();
            (tp, row + col - tp)
        })
        .collect()
}

/// Pooled IoU over classes, in percent.
pub fn giou_from_confusion(m: &[Vec<u64>]) -> f64 {
    let (tp, union) = tallies(m).iter().fold((0, 0), |a, t| (a.0 + t.0, a.1 + t.1));
    if union == 0 { 100.0 } else { 100.0 * tp as f64 / union as f64 }
}

/// Label-frequency-weighted mean IoU, in percent. Classes absent from both
/// labels and predictions carry no weight.
pub fn wiou_from_confusion(m: &[Vec<u64>]) -> f64 {
    let total: u64 = m.iter().flatten().sum();
    if total == 0 {
        return 100.0;
    }
    let (mut num, mut den) = (0.0, 0.0);
    for (c, (tp, union)) in tallies(m).into_iter().enumerate() {
        if union == 0 {
            continue;
        }
        let freq = m[c].iter().sum::<u64>() as f64 / total as f64;
        num += freq * tp as f64 / union as f64;
        den += freq;
    }
    if den == 0.0 { 0.0 } else { 100.0 * num / den }
}

pub fn giou(labels: &ClassMap, predicted: &ClassMap, n_classes: usize) -> Result<f64> {
    Ok(giou_from_confusion(&confusion_matrix(labels, predicted, n_classes)?))
}

pub fn wiou(labels: &ClassMap, predicted: &ClassMap, n_classes: usize) -> Result<f64> {
    Ok(wiou_from_confusion(&confusion_matrix(labels, predicted, n_classes)?))
}

/// Confusion matrices summed over several label/prediction pairs.
pub fn pooled_confusion(pairs: &[(ClassMap, ClassMap)], n_classes: usize) -> Result<Vec<Vec<u64>>> {
    let mut acc = vec![vec![0u64; n_classes]; n_classes];
    for (l, p) in pairs {
        let m = confusion_matrix(l, p, n_classes)?;
        for (a, b) in acc.iter_mut().flatten().zip(m.iter().flatten()) {
            *a += b;
        }
    }
    Ok(acc)
}
