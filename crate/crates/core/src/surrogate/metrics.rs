use crate::error::{invalid, Result};

/// Symmetric mean absolute percentage error in percent. A term where both
/// prediction and actual are zero contributes zero.
pub fn smape(pred: &[f64], actual: &[f64]) -> Result<f64> {
    if pred.len() != actual.len() || pred.is_empty() {
        return invalid(format!(
            "smape needs equal nonempty inputs, got {} and {}",
            pred.len(),
            actual.len()
        ));
    }
    let total: f64 = pred
        .iter()
        .zip(actual)
        .map(|(&p, &a)| {
            let d = (p.abs() + a.abs()) / 2.0;
            if d == 0.0 {
                0.0
            } else {
                (p - a).abs() / d
            }
        })
        .sum();
    Ok(100.0 * total / pred.len() as f64)
}

/// Unweighted mean of the per-class F1 over classes present in either vector.
pub fn macro_f1(pred: &[bool], actual: &[bool]) -> Result<f64> {
    if pred.len() != actual.len() || pred.is_empty() {
        return invalid(format!(
            "macro_f1 needs equal nonempty inputs, got {} and {}",
            pred.len(),
            actual.len()
        ));
    }
    let mut scores = Vec::with_capacity(2);
    for class in [false, true] {
        let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
        for (&p, &a) in pred.iter().zip(actual) {
            match (p == class, a == class) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                _ => {}
            }
        }
        if tp + fp + fn_ > 0 {
            scores.push(2.0 * tp as f64 / (2 * tp + fp + fn_) as f64);
        }
    }
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}
