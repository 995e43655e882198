use alloc::collections::BTreeSet;

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Metrics {
    pub accuracy: f64,
    /// Root mean squared distance between class indices.
    pub rmse: f64,
    /// Mean per-class F1 over classes that occur in the gold labels or the
    /// predictions; classes absent from both are not scored.
    pub macro_f1: f64,
}

pub fn metrics(gold: &[usize], pred: &[usize]) -> Result<Metrics> {
    if gold.len() != pred.len() {
        return Err(Error::InvalidData(alloc::format!(
            "{} gold labels but {} predictions",
            gold.len(),
            pred.len()
        )));
    }
    if gold.is_empty() {
        return Err(Error::InvalidData("metrics over an empty set".into()));
    }
    let n = gold.len() as f64;
    let correct = gold.iter().zip(pred).filter(|(g, p)| g == p).count();
    let sq: f64 = gold
        .iter()
        .zip(pred)
        .map(|(&g, &p)| {
            let d = g as f64 - p as f64;
            d * d
        })
        .sum();
    let classes: BTreeSet<usize> = gold.iter().chain(pred).copied().collect();
    let mut f1_sum = 0.0;
    for &c in &classes {
        let mut tp = 0usize;
        let mut fp = 0usize;
        let mut fn_ = 0usize;
        for (&g, &p) in gold.iter().zip(pred) {
            match (g == c, p == c) {
                (true, true) => tp += 1,
                (false, true) => fp += 1,
                (true, false) => fn_ += 1,
                _ => {}
            }
        }
        // F1 = 2tp / (2tp + fp + fn); the denominator is positive for every
        // class in the union.
        f1_sum += 2.0 * tp as f64 / (2 * tp + fp + fn_) as f64;
    }
    Ok(Metrics {
        accuracy: correct as f64 / n,
        rmse: libm::sqrt(sq / n),
        macro_f1: f1_sum / classes.len() as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_predictions() {
        let m = metrics(&[0, 1, 2, 2], &[0, 1, 2, 2]).unwrap();
        assert_eq!((m.accuracy, m.rmse, m.macro_f1), (1.0, 0.0, 1.0));
    }

    #[test]
    fn hand_worked_example() {
        let m = metrics(&[0, 0, 1, 1], &[0, 1, 1, 1]).unwrap();
        assert_eq!(m.accuracy, 0.75);
        assert_eq!(m.rmse, 0.5);
        // class 0: tp 1, fp 0, fn 1 → P 1, R 1/2, F1 2/3
        // class 1: tp 2, fp 1, fn 0 → P 2/3, R 1, F1 4/5
        assert!((m.macro_f1 - (2.0 / 3.0 + 0.8) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn single_class_and_errors() {
        let m = metrics(&[3, 3, 3], &[3, 3, 3]).unwrap();
        assert_eq!(m.macro_f1, 1.0);
        let m = metrics(&[0], &[1]).unwrap();
        assert_eq!((m.accuracy, m.rmse, m.macro_f1), (0.0, 1.0, 0.0));
        assert!(metrics(&[], &[]).is_err());
        assert!(metrics(&[1], &[1, 2]).is_err());
    }
}
