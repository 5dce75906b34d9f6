//! Softmax, cross-entropy, and KL objectives over [B, C] tensors, plus the
//! logit-space seeds that start the reverse pass for each objective.

use crate::error::{Error, Result};
use crate::tensor::{Elem, Tensor};

/// Floor for log arguments, so saturated probabilities never produce -inf.
pub const LOG_CLAMP: Elem = 1e-12;

/// Loss selector for parameter and input gradients.
pub enum LossKind<'a> {
    /// Mean over the batch of -log p(label).
    CrossEntropy { labels: &'a [usize] },
    /// Sum over the batch of KL(teacher || model); teacher rows are constants.
    Kl { teacher_probs: &'a Tensor },
}

fn check_rows(t: &Tensor, what: &str) -> Result<()> {
    if t.shape().len() != 2 {
        return Err(Error::ShapeMismatch {
            layer: 0,
            detail: format!("{what} must be [batch, classes], got {:?}", t.shape()),
        });
    }
    Ok(())
}

/// Row-wise softmax with max subtraction; rows sum to 1 within 1e-12.
pub fn softmax(logits: &Tensor) -> Result<Tensor> {
    check_rows(logits, "logits")?;
    logits.check_finite("softmax input")?;
    let mut out = logits.clone();
    let c = out.shape()[1];
    for b in 0..out.batch() {
        let row = &mut out.example_mut(b)[..c];
        let max = row.iter().fold(Elem::NEG_INFINITY, |m, &v| m.max(v));
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    Ok(out)
}

/// Mean over the batch of -log p(label), log argument clamped at 1e-12.
pub fn loss_cross_entropy(probs: &Tensor, labels: &[usize]) -> Result<Elem> {
    check_rows(probs, "probs")?;
    let (b, c) = (probs.batch(), probs.shape()[1]);
    if labels.len() != b {
        return Err(Error::CountMismatch {
            images: b,
            labels: labels.len(),
        });
    }
    let mut total = 0.0;
    for (i, &label) in labels.iter().enumerate() {
        if label >= c {
            return Err(Error::LabelOutOfRange { label, classes: c });
        }
        total -= probs.example(i)[label].max(LOG_CLAMP).ln();
    }
    Ok(total / b as Elem)
}

/// Sum over the batch of sum_c t_c (log t_c - log s_c); terms with t_c = 0
/// contribute zero, student probabilities are clamped at 1e-12 inside logs.
pub fn loss_kl(teacher_probs: &Tensor, student_probs: &Tensor) -> Result<Elem> {
    check_rows(teacher_probs, "teacher probs")?;
    if teacher_probs.shape() != student_probs.shape() {
        return Err(Error::ShapeMismatch {
            layer: 0,
            detail: format!(
                "teacher {:?} vs student {:?}",
                teacher_probs.shape(),
                student_probs.shape()
            ),
        });
    }
    let mut total = 0.0;
    for (&t, &s) in teacher_probs.data().iter().zip(student_probs.data()) {
        if t > 0.0 {
            total += t * (t.max(LOG_CLAMP).ln() - s.max(LOG_CLAMP).ln());
        }
    }
    if !total.is_finite() {
        return Err(Error::non_finite("kl divergence"));
    }
    Ok(total)
}

/// In-place `probs[b][labels[b]] -= 1`, the softmax/cross-entropy identity.
pub fn subtract_one_hot(probs: &mut Tensor, labels: &[usize]) -> Result<()> {
    let (b, c) = (probs.batch(), probs.shape()[1]);
    if labels.len() != b {
        return Err(Error::CountMismatch {
            images: b,
            labels: labels.len(),
        });
    }
    for (i, &label) in labels.iter().enumerate() {
        if label >= c {
            return Err(Error::LabelOutOfRange { label, classes: c });
        }
        probs.example_mut(i)[label] -= 1.0;
    }
    Ok(())
}

/// Loss gradient in logit space. `batch_mean` scales cross-entropy rows by
/// 1/B (the batch objective); per-example gradients use `false`. The KL
/// objective is a batch sum, so its rows are never scaled.
pub fn dlogits(logits: &Tensor, loss: &LossKind, batch_mean: bool) -> Result<Tensor> {
    let mut d = softmax(logits)?;
    match loss {
        LossKind::CrossEntropy { labels } => {
            subtract_one_hot(&mut d, labels)?;
            if batch_mean {
                let inv = 1.0 / d.batch() as Elem;
                for v in d.data_mut() {
                    *v *= inv;
                }
            }
        }
        LossKind::Kl { teacher_probs } => {
            if teacher_probs.shape() != d.shape() {
                return Err(Error::ShapeMismatch {
                    layer: 0,
                    detail: format!(
                        "teacher probs {:?} vs logits {:?}",
                        teacher_probs.shape(),
                        d.shape()
                    ),
                });
            }
            for (v, &t) in d.data_mut().iter_mut().zip(teacher_probs.data()) {
                *v -= t;
            }
        }
    }
    Ok(d)
}

/// Index of the row maximum; the first (lowest) index wins ties.
pub fn argmax_row(row: &[Elem]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Argmax class per row of a [B, C] probability or logit tensor.
pub fn predict_classes(scores: &Tensor) -> Vec<usize> {
    (0..scores.batch())
        .map(|b| argmax_row(scores.example(b)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rows(shape: [usize; 2], data: &[Elem]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn softmax_uniform_on_equal_logits() {
        let p = softmax(&rows([1, 3], &[0.0, 0.0, 0.0])).unwrap();
        for &v in p.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_shift_invariance() {
        let (z, c) = (2.3, 0.7);
        let a = softmax(&rows([1, 3], &[z, z + c, z + 2.0 * c])).unwrap();
        let b = softmax(&rows([1, 3], &[0.0, c, 2.0 * c])).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-12);
    }

    #[test]
    fn softmax_extreme_logits_no_overflow() {
        let p = softmax(&rows([1, 2], &[1000.0, 0.0])).unwrap();
        assert!((p.data()[0] - 1.0).abs() < 1e-12);
        assert!(p.data()[1].abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_exact_cases() {
        let mut row = vec![0.0; 10];
        row[0] = 1.0;
        let p = rows([1, 10], &row);
        assert_eq!(loss_cross_entropy(&p, &[0]).unwrap(), 0.0);

        let uniform = rows([1, 10], &[0.1; 10]);
        let l = loss_cross_entropy(&uniform, &[4]).unwrap();
        assert!((l - (10.0 as Elem).ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_is_mean_of_rows() {
        let p = rows([2, 2], &[0.5, 0.5, 0.25, 0.75]);
        let l = loss_cross_entropy(&p, &[0, 1]).unwrap();
        let expect = (-(0.5 as Elem).ln() - (0.75 as Elem).ln()) / 2.0;
        assert!((l - expect).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_rejects_bad_label() {
        let p = rows([1, 2], &[0.5, 0.5]);
        assert!(matches!(
            loss_cross_entropy(&p, &[2]),
            Err(Error::LabelOutOfRange { .. })
        ));
    }

    #[test]
    fn kl_of_identical_rows_is_zero() {
        let p = rows([2, 2], &[0.3, 0.7, 0.9, 0.1]);
        assert_eq!(loss_kl(&p, &p).unwrap(), 0.0);
    }

    #[test]
    fn kl_hand_case_ln2() {
        let t = rows([1, 2], &[1.0, 0.0]);
        let s = rows([1, 2], &[0.5, 0.5]);
        let l = loss_kl(&t, &s).unwrap();
        assert!((l - (2.0 as Elem).ln()).abs() < 1e-12);
    }

    #[test]
    fn argmax_prefers_lowest_index() {
        assert_eq!(argmax_row(&[1.0, 1.0, 1.0]), 0);
        assert_eq!(argmax_row(&[0.0, 2.0, 2.0]), 1);
    }
}
