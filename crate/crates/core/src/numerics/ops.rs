//! Tape-free primitives. The tape reuses these for its forward values.

use super::Tensor2;
use crate::error::{Error, Result};

/// `input · weights + bias`, bias broadcast over rows.
///
/// `weights` is `in_dim x out_dim`.
pub fn dense_forward(input: &Tensor2, weights: &Tensor2, bias: &[f64]) -> Result<Tensor2> {
    if input.cols() != weights.rows() {
        return Err(Error::shape(
            "dense_forward",
            format!("input with {} columns", weights.rows()),
            format!("{}x{}", input.rows(), input.cols()),
        ));
    }
    if bias.len() != weights.cols() {
        return Err(Error::shape("dense_forward bias", weights.cols(), bias.len()));
    }
    let (n, k, m) = (input.rows(), input.cols(), weights.cols());
    let mut out = Tensor2::zeros(n, m);
    let w = weights.data();
    for r in 0..n {
        let x = input.row(r);
        let o = out.row_mut(r);
        o.copy_from_slice(bias);
        for (i, &xi) in x.iter().enumerate().take(k) {
            if xi == 0.0 {
                continue;
            }
            let wr = &w[i * m..(i + 1) * m];
            for (oj, wj) in o.iter_mut().zip(wr) {
                *oj += xi * wj;
            }
        }
    }
    Ok(out)
}

pub fn relu(input: &Tensor2) -> Tensor2 {
    let mut out = input.clone();
    for v in out.data_mut() {
        if *v <= 0.0 {
            *v = 0.0;
        }
    }
    out
}

pub fn euclidean_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    Ok(a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt())
}

pub(crate) fn norm(a: &[f64]) -> f64 {
    a.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::DegenerateInput(
            "cosine similarity of a zero-norm vector".into(),
        ));
    }
    // rounding can push |cos| a hair past 1
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Row-wise softmax, stabilized by subtracting the row maximum.
pub fn softmax(logits: &Tensor2) -> Tensor2 {
    let mut out = logits.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    out
}

/// Mean over rows of `-log softmax(logits)[label]`.
pub fn softmax_cross_entropy(logits: &Tensor2, labels: &[usize]) -> Result<f64> {
    check_labels(logits, labels)?;
    let mut total = 0.0;
    for (r, &label) in labels.iter().enumerate() {
        let row = logits.row(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
        total += lse - row[label];
    }
    Ok(total / labels.len() as f64)
}

pub(crate) fn check_labels(logits: &Tensor2, labels: &[usize]) -> Result<()> {
    if labels.len() != logits.rows() {
        return Err(Error::LengthMismatch {
            left: logits.rows(),
            right: labels.len(),
        });
    }
    if labels.is_empty() {
        return Err(Error::Empty("cross-entropy over an empty batch".into()));
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= logits.cols()) {
        return Err(Error::LabelOutOfRange {
            label,
            classes: logits.cols(),
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn dense_identity_and_hand_product() {
        let x = Tensor2::from_rows(&[[1.0, 2.0]]).unwrap();
        let y = dense_forward(&x, &Tensor2::identity(2), &[0.0, 0.0]).unwrap();
        assert_eq!(y.data(), &[1.0, 2.0]);

        let x = Tensor2::identity(2);
        let w = Tensor2::from_rows(&[[2.0, 0.0], [0.0, 3.0]]).unwrap();
        let y = dense_forward(&x, &w, &[1.0, 1.0]).unwrap();
        assert_eq!(y, Tensor2::from_rows(&[[3.0, 1.0], [1.0, 4.0]]).unwrap());
    }

    #[test]
    fn dense_rejects_wrong_width() {
        let x = Tensor2::zeros(1, 3);
        let err = dense_forward(&x, &Tensor2::identity(2), &[0.0, 0.0]).unwrap_err();
        assert!(matches!(err, Error::Shape { .. }));
    }

    #[test]
    fn relu_cases() {
        let x = Tensor2::from_rows(&[[-1.0, 2.0]]).unwrap();
        assert_eq!(relu(&x).data(), &[0.0, 2.0]);
        let x = Tensor2::filled(2, 3, -0.5);
        assert!(relu(&x).data().iter().all(|&v| v == 0.0));
        assert_eq!(relu(&Tensor2::scalar(0.0)).data(), &[0.0]);
    }

    #[test]
    fn distances() {
        assert_eq!(euclidean_distance(&[1.5, -2.0], &[1.5, -2.0]).unwrap(), 0.0);
        assert_eq!(euclidean_distance(&[0.0, 0.0], &[3.0, 4.0]).unwrap(), 5.0);
        assert_eq!(euclidean_distance(&[1.0], &[4.0]).unwrap(), 3.0);
        assert!(euclidean_distance(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn cosines() {
        assert_abs_diff_eq!(cosine_similarity(&[0.3, 0.7], &[0.3, 0.7]).unwrap(), 1.0, epsilon = 1e-15);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert_abs_diff_eq!(cosine_similarity(&[1.0, 1.0], &[-1.0, -1.0]).unwrap(), -1.0, epsilon = 1e-15);
        assert!(matches!(
            cosine_similarity(&[0.0, 0.0], &[1.0, 0.0]),
            Err(Error::DegenerateInput(_))
        ));
    }

    #[test]
    fn cross_entropy_cases() {
        let uniform = Tensor2::filled(3, 4, 0.7);
        assert_abs_diff_eq!(
            softmax_cross_entropy(&uniform, &[0, 1, 3]).unwrap(),
            4f64.ln(),
            epsilon = 1e-12
        );

        let mut saturated = Tensor2::zeros(1, 3);
        saturated.set(0, 2, 1000.0);
        assert!(softmax_cross_entropy(&saturated, &[2]).unwrap() < 1e-12);

        let hand = Tensor2::from_rows(&[[1.0, 2.0]]).unwrap();
        let expected = -(1f64.exp() / (1f64.exp() + 2f64.exp())).ln();
        assert_abs_diff_eq!(softmax_cross_entropy(&hand, &[0]).unwrap(), expected, epsilon = 1e-12);
        assert_abs_diff_eq!(expected, 1.3133, epsilon = 1e-4);

        assert!(matches!(
            softmax_cross_entropy(&hand, &[2]),
            Err(Error::LabelOutOfRange { label: 2, classes: 2 })
        ));
    }
}
