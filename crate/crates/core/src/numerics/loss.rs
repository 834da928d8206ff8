use super::{NumericsError, Tensor2};

/// Floor applied to probabilities before taking logs.
pub const PROBABILITY_FLOOR: f64 = 1e-12;

/// A loss value plus whether the probability floor had to be applied.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub clamped: bool,
}

/// Softmax of `logits / tau`, computed with max subtraction.
pub fn softmax_temp(logits: &[f64], tau: f64) -> Result<Vec<f64>, NumericsError> {
    if tau <= 0.0 || !tau.is_finite() {
        return Err(NumericsError::InvalidParameter(format!(
            "softmax temperature must be positive, got {tau}"
        )));
    }
    let mut out = logits.to_vec();
    softmax_in_place(&mut out, tau);
    Ok(out)
}

fn softmax_in_place(values: &mut [f64], tau: f64) {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in values.iter_mut() {
        *v = ((*v - max) / tau).exp();
        sum += *v;
    }
    for v in values.iter_mut() {
        *v /= sum;
    }
}

/// Row-wise [`softmax_temp`].
pub fn softmax_rows(logits: &Tensor2, tau: f64) -> Result<Tensor2, NumericsError> {
    if tau <= 0.0 || !tau.is_finite() {
        return Err(NumericsError::InvalidParameter(format!(
            "softmax temperature must be positive, got {tau}"
        )));
    }
    let mut out = logits.clone();
    for r in 0..out.rows() {
        softmax_in_place(out.row_mut(r), tau);
    }
    Ok(out)
}

/// `-ln pred[target]`, flooring the probability at [`PROBABILITY_FLOOR`].
pub fn cross_entropy(pred: &[f64], target: usize) -> Result<LossValue, NumericsError> {
    let p = *pred.get(target).ok_or_else(|| NumericsError::Shape {
        op: "cross_entropy",
        expected: format!("target index below {}", pred.len()),
        got: format!("{target}"),
    })?;
    let clamped = p < PROBABILITY_FLOOR;
    Ok(LossValue {
        value: if p.is_nan() {
            f64::NAN
        } else {
            -p.max(PROBABILITY_FLOOR).ln()
        },
        clamped,
    })
}

/// Gradient of [`cross_entropy`] with respect to the logits that produced
/// `pred` at temperature `tau`: `(pred - onehot) / tau`.
pub fn cross_entropy_logit_grad(pred: &[f64], target: usize, tau: f64) -> Vec<f64> {
    pred.iter()
        .enumerate()
        .map(|(i, &p)| (p - if i == target { 1.0 } else { 0.0 }) / tau)
        .collect()
}

/// `KL(student || teacher) = Σ s_i ln(s_i / t_i)` with `0 ln 0 = 0`.
pub fn kl_divergence(student: &[f64], teacher: &[f64]) -> Result<LossValue, NumericsError> {
    if student.len() != teacher.len() {
        return Err(NumericsError::Shape {
            op: "kl_divergence",
            expected: format!("teacher of length {}", student.len()),
            got: format!("{}", teacher.len()),
        });
    }
    let mut value = 0.0;
    let mut clamped = false;
    for (&s, &t) in student.iter().zip(teacher) {
        if s.is_nan() || t.is_nan() {
            value = f64::NAN;
            continue;
        }
        if s <= 0.0 {
            continue;
        }
        if t < PROBABILITY_FLOOR {
            clamped = true;
        }
        value += s * (s.ln() - t.max(PROBABILITY_FLOOR).ln());
    }
    Ok(LossValue {
        value: if value.is_nan() {
            value
        } else {
            value.max(0.0)
        },
        clamped,
    })
}

/// Gradient of [`kl_divergence`] with respect to the student logits at
/// temperature `tau`. The teacher is a constant: its gradient is zero.
pub fn kl_student_logit_grad(student: &[f64], teacher: &[f64], tau: f64) -> Vec<f64> {
    let log_ratio: Vec<f64> = student
        .iter()
        .zip(teacher)
        .map(|(&s, &t)| {
            if s <= 0.0 {
                0.0
            } else {
                s.ln() - t.max(PROBABILITY_FLOOR).ln()
            }
        })
        .collect();
    let kl: f64 = student.iter().zip(&log_ratio).map(|(s, l)| s * l).sum();
    student
        .iter()
        .zip(&log_ratio)
        .map(|(&s, &l)| s * (l - kl) / tau)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax_temp(&[1.0; 4], 1.0).unwrap(), vec![0.25; 4]);
        let p = softmax_temp(&[2.0, 0.0], 1.0).unwrap();
        assert!((p[0] - 0.880797).abs() < 1e-5);
        assert!((p[1] - 0.119203).abs() < 1e-5);
        for tau in [0.01, 0.5, 1.0, 10.0, 1e4] {
            let p = softmax_temp(&[3.0, 1.0, -2.0], tau).unwrap();
            assert_eq!(super::super::argmax(&p), 0);
        }
    }

    #[test]
    fn softmax_rejects_bad_tau() {
        assert!(softmax_temp(&[1.0], 0.0).is_err());
        assert!(softmax_temp(&[1.0], -1.0).is_err());
        assert!(softmax_temp(&[1.0], f64::NAN).is_err());
    }

    #[test]
    fn softmax_stable_for_large_logits() {
        let p = softmax_temp(&[1000.0, 999.0], 1.0).unwrap();
        assert!(p.iter().all(|v| v.is_finite()));
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_examples() {
        let l = cross_entropy(&[0.25; 4], 0).unwrap();
        assert!((l.value - 4f64.ln()).abs() < 1e-12);
        assert!(!l.clamped);
        assert_eq!(cross_entropy(&[0.0, 1.0], 1).unwrap().value, 0.0);
        let floored = cross_entropy(&[0.0, 1.0], 0).unwrap();
        assert!(floored.clamped);
        assert!((floored.value - (-PROBABILITY_FLOOR.ln())).abs() < 1e-9);
        assert!(cross_entropy(&[1.0], 3).is_err());
    }

    #[test]
    fn kl_examples() {
        let p = [0.2, 0.3, 0.5];
        assert_eq!(kl_divergence(&p, &p).unwrap().value, 0.0);
        let l = kl_divergence(&[1.0, 0.0], &[0.5, 0.5]).unwrap();
        assert!((l.value - 2f64.ln()).abs() < 1e-12);
        let clamped = kl_divergence(&[0.5, 0.5], &[1.0, 0.0]).unwrap();
        assert!(clamped.clamped);
        assert!(kl_divergence(&[1.0], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn kl_grad_vanishes_at_equality() {
        let p = [0.1, 0.6, 0.3];
        assert!(kl_student_logit_grad(&p, &p, 10.0)
            .iter()
            .all(|g| g.abs() < 1e-15));
    }
}
