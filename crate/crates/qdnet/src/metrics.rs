//! Classification metrics: confusion counts and mean per-class accuracy
//! (average of per-class recalls, robust to class imbalance).

use crate::error::{QdError, Result};

/// confusion[true_class][predicted_class] = count.
pub fn confusion_counts(
    preds: &[usize],
    labels: &[usize],
    num_classes: usize,
) -> Result<Vec<Vec<usize>>> {
    if preds.len() != labels.len() {
        return Err(QdError::Config(format!(
            "{} predictions for {} labels",
            preds.len(),
            labels.len()
        )));
    }
    if preds.is_empty() {
        return Err(QdError::Config("empty prediction set".into()));
    }
    let mut m = vec![vec![0usize; num_classes]; num_classes];
    for (&p, &l) in preds.iter().zip(labels) {
        if p >= num_classes || l >= num_classes {
            return Err(QdError::Config(format!(
                "class index out of range: pred {p}, label {l}, {num_classes} classes"
            )));
        }
        m[l][p] += 1;
    }
    Ok(m)
}

/// Per-class recall; classes absent from the labels get None.
pub fn per_class_accuracy(
    preds: &[usize],
    labels: &[usize],
    num_classes: usize,
) -> Result<Vec<Option<f64>>> {
    let m = confusion_counts(preds, labels, num_classes)?;
    Ok(m
        .iter()
        .enumerate()
        .map(|(c, row)| {
            let total: usize = row.iter().sum();
            (total > 0).then(|| row[c] as f64 / total as f64)
        })
        .collect())
}

/// Mean of per-class recalls over the classes present in the labels.
pub fn mean_per_class_accuracy(
    preds: &[usize],
    labels: &[usize],
    num_classes: usize,
) -> Result<f64> {
    let per_class = per_class_accuracy(preds, labels, num_classes)?;
    let present: Vec<f64> = per_class.into_iter().flatten().collect();
    if present.is_empty() {
        return Err(QdError::Config("no class present in labels".into()));
    }
    Ok(present.iter().sum::<f64>() / present.len() as f64)
}
