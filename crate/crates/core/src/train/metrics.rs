use crate::error::{dim_err, Error, Result};
use crate::tensor::Tensor;

fn check_pair(scores: &Tensor<f32>, targets: &Tensor<f32>) -> Result<(usize, usize)> {
    if scores.rank() != 2 || scores.shape() != targets.shape() {
        return Err(dim_err!(
            "scores {:?} and targets {:?} must both be [samples × classes]",
            scores.shape(),
            targets.shape()
        ));
    }
    Ok((scores.shape()[0], scores.shape()[1]))
}

/// Average precision of one ranking. `None` when there are no positives.
///
/// Samples are ranked by descending score; ties keep their input order.
pub fn average_precision(scores: &[f32], positives: &[bool]) -> Option<f64> {
    let total = positives.iter().filter(|&&p| p).count();
    if total == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if positives[i] {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    Some(sum / total as f64)
}

/// Mean over classes with at least one positive of the per-class average
/// precision. Targets above 0.5 count as positive.
pub fn mean_average_precision(scores: &Tensor<f32>, targets: &Tensor<f32>) -> Result<f64> {
    let (n, k) = check_pair(scores, targets)?;
    let mut aps = Vec::new();
    let mut column = vec![0.0f32; n];
    let mut positive = vec![false; n];
    for c in 0..k {
        for i in 0..n {
            column[i] = scores.data()[i * k + c];
            positive[i] = targets.data()[i * k + c] > 0.5;
        }
        aps.extend(average_precision(&column, &positive));
    }
    if aps.is_empty() {
        return Err(Error::UndefinedMetric(
            "no class has a positive sample".into(),
        ));
    }
    Ok(aps.iter().sum::<f64>() / aps.len() as f64)
}

/// Index of the largest score; the lowest index wins ties.
pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Top-1 accuracy against one class index per sample.
pub fn accuracy(scores: &Tensor<f32>, labels: &[usize]) -> Result<f64> {
    if scores.rank() != 2 || scores.shape()[0] != labels.len() {
        return Err(dim_err!(
            "{} labels for scores {:?}",
            labels.len(),
            scores.shape()
        ));
    }
    if labels.is_empty() {
        return Err(Error::UndefinedMetric("accuracy over zero samples".into()));
    }
    let hits = labels
        .iter()
        .enumerate()
        .filter(|&(i, &l)| argmax(scores.row(i)) == l)
        .count();
    Ok(hits as f64 / labels.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn col(v: &[f32]) -> Tensor<f32> {
        Tensor::from_vec(&[v.len(), 1], v.to_vec()).unwrap()
    }

    #[test]
    fn perfect_ranking_is_one() {
        let m = mean_average_precision(&col(&[0.9, 0.8, 0.1]), &col(&[1.0, 1.0, 0.0])).unwrap();
        assert_eq!(m, 1.0);
    }

    #[test]
    fn single_positive_ranked_second() {
        let m = mean_average_precision(&col(&[0.9, 0.8, 0.1]), &col(&[0.0, 1.0, 0.0])).unwrap();
        assert_eq!(m, 0.5);
    }

    #[test]
    fn classes_without_positives_are_skipped() {
        let s = Tensor::from_rows(&[&[0.9, 0.2][..], &[0.1, 0.3][..]]).unwrap();
        let t = Tensor::from_rows(&[&[1.0, 0.0][..], &[0.0, 0.0][..]]).unwrap();
        assert_eq!(mean_average_precision(&s, &t).unwrap(), 1.0);
        let none = Tensor::zeros(&[2, 2]);
        assert!(matches!(
            mean_average_precision(&s, &none),
            Err(Error::UndefinedMetric(_))
        ));
    }

    #[test]
    fn two_positives_first_and_third() {
        let m = mean_average_precision(&col(&[0.9, 0.8, 0.1]), &col(&[1.0, 0.0, 1.0])).unwrap();
        assert!((m - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn ties_keep_input_order() {
        assert_eq!(average_precision(&[0.5, 0.5], &[false, true]), Some(0.5));
        assert_eq!(average_precision(&[0.5, 0.5], &[true, false]), Some(1.0));
    }

    #[test]
    fn accuracy_counts_argmax_hits() {
        let s = Tensor::from_rows(&[&[0.1, 0.9][..], &[0.7, 0.3][..], &[0.5, 0.5][..]]).unwrap();
        assert!((accuracy(&s, &[1, 1, 0]).unwrap() - 2.0 / 3.0).abs() < 1e-12);
    }
}
