use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Mean softmax cross-entropy over the batch together with its logit gradient.
///
/// Rows are shifted by their maximum before exponentiation.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let &[batch, classes] = logits.shape() else {
        return Err(Error::dim("logits", format!("expected [batch × C], got {:?}", logits.shape())));
    };
    if batch == 0 {
        return Err(Error::Argument("empty batch".into()));
    }
    if labels.len() != batch {
        return Err(Error::dim(
            "labels",
            format!("{} labels for a batch of {batch}", labels.len()),
        ));
    }
    let scale = 1.0 / batch as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(batch * classes);
    for (i, &label) in labels.iter().enumerate() {
        if label >= classes {
            return Err(Error::Label {
                index: i,
                label,
                classes,
            });
        }
        let row = logits.row(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|&z| (z - max).exp()).sum();
        let log_sum = sum.ln();
        loss += log_sum - (row[label] - max);
        for (c, &z) in row.iter().enumerate() {
            let p = (z - max - log_sum).exp();
            let target = if c == label { 1.0 } else { 0.0 };
            grad.push((p - target) * scale);
        }
    }
    Ok((loss * scale, Tensor::new(vec![batch, classes], grad)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn uniform_logits_give_ln_c() {
        let logits = Tensor::zeros(vec![3, 10]);
        let (loss, _) = softmax_cross_entropy(&logits, &[0, 4, 9]).unwrap();
        assert!((loss - 10f64.ln()).abs() < 1e-12);
        assert_eq!(format!("{loss:.6}"), "2.302585");
    }

    #[test]
    fn saturated_correct_class() {
        let logits = Tensor::from_rows(&[vec![0.0, 1000.0, 0.0]]).unwrap();
        let (loss, grad) = softmax_cross_entropy(&logits, &[1]).unwrap();
        assert!(loss.abs() < 1e-12);
        assert!(grad.all_finite());
    }

    #[test]
    fn matches_direct_formula() {
        let rows = vec![vec![0.3, -1.2, 2.0], vec![1.5, 0.5, -0.7]];
        let labels = [2, 0];
        let logits = Tensor::from_rows(&rows).unwrap();
        let (loss, grad) = softmax_cross_entropy(&logits, &labels).unwrap();
        // Direct -log(e^{z_y} / Σ e^{z}) without stabilisation.
        let mut expected = 0.0;
        for (row, &y) in rows.iter().zip(&labels) {
            let denom: f64 = row.iter().map(|z| z.exp()).sum();
            expected += -(row[y].exp() / denom).ln();
        }
        expected /= 2.0;
        assert!((loss - expected).abs() < 1e-14);
        let denom0: f64 = rows[0].iter().map(|z| z.exp()).sum();
        assert!((grad.data()[0] - rows[0][0].exp() / denom0 / 2.0).abs() < 1e-15);
        assert!((grad.data()[2] - (rows[0][2].exp() / denom0 - 1.0) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn label_out_of_range() {
        let logits = Tensor::zeros(vec![2, 3]);
        match softmax_cross_entropy(&logits, &[0, 3]) {
            Err(Error::Label { index, label, classes }) => {
                assert_eq!((index, label, classes), (1, 3, 3));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    proptest! {
        #[test]
        fn loss_nonnegative_and_grad_rows_sum_to_zero(
            values in proptest::collection::vec(-50.0f64..50.0, 12),
            labels in proptest::collection::vec(0usize..4, 3),
        ) {
            let logits = Tensor::new(vec![3, 4], values).unwrap();
            let (loss, grad) = softmax_cross_entropy(&logits, &labels).unwrap();
            prop_assert!(loss >= 0.0);
            for r in 0..3 {
                let s: f64 = grad.row(r).iter().sum();
                prop_assert!(s.abs() < 1e-9);
            }
        }
    }
}
