//! Classification losses returning the mean loss and its gradient w.r.t. the
//! logits.

use super::Tensor;
use crate::error::{Error, Result};

fn rows(logits: &Tensor, what: &str) -> Result<(usize, usize)> {
    match *logits.shape() {
        [n, k] if n > 0 && k > 0 => Ok((n, k)),
        _ => Err(Error::dim(
            what,
            format!("expected non-empty N x K logits, got {:?}", logits.shape()),
        )),
    }
}

/// Row-wise softmax of `N x K` logits, computed in f64.
pub fn softmax(logits: &Tensor) -> Result<Vec<f64>> {
    let (n, k) = rows(logits, "softmax")?;
    let mut out = vec![0.0f64; n * k];
    for (row, dst) in logits.data().chunks(k).zip(out.chunks_mut(k)) {
        let m = row.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b));
        let mut s = 0.0;
        for (d, &v) in dst.iter_mut().zip(row) {
            *d = f64::from(v - m).exp();
            s += *d;
        }
        dst.iter_mut().for_each(|d| *d /= s);
    }
    Ok(out)
}

/// Cross-entropy against `target` probabilities; returns the batch mean and
/// `(softmax - target) / N`.
fn soft_xent(logits: &Tensor, target: &[f64], k: usize) -> Result<(f32, Tensor)> {
    let n = logits.shape()[0];
    let q = softmax(logits)?;
    let mut loss = 0.0f64;
    let mut grad = vec![0.0f32; n * k];
    for i in 0..n {
        let row = &logits.data()[i * k..][..k];
        let m = row.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b));
        let lse = f64::from(m)
            + row
                .iter()
                .map(|&v| f64::from(v - m).exp())
                .sum::<f64>()
                .ln();
        for j in 0..k {
            let p = target[i * k + j];
            if p > 0.0 {
                loss -= p * (f64::from(row[j]) - lse);
            }
            grad[i * k + j] = ((q[i * k + j] - p) / n as f64) as f32;
        }
    }
    Ok(((loss / n as f64) as f32, Tensor::new(vec![n, k], grad)?))
}

/// Mean softmax cross-entropy with uniform label smoothing `smoothing`.
pub fn softmax_xent(logits: &Tensor, labels: &[usize], smoothing: f32) -> Result<(f32, Tensor)> {
    let (n, k) = rows(logits, "softmax_xent")?;
    if labels.len() != n {
        return Err(Error::dim(
            "softmax_xent",
            format!("{} labels for {n} rows", labels.len()),
        ));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::Precondition(format!("label {bad} outside [0, {k})")));
    }
    let eps = f64::from(smoothing);
    let mut target = vec![eps / k as f64; n * k];
    for (i, &l) in labels.iter().enumerate() {
        target[i * k + l] += 1.0 - eps;
    }
    soft_xent(logits, &target, k)
}

/// Cross-entropy of the student's softmax against the teacher's softmax.
/// The teacher is a constant: only the student gradient is returned.
pub fn distill_loss(teacher: &Tensor, student: &Tensor) -> Result<(f32, Tensor)> {
    if teacher.shape() != student.shape() {
        return Err(Error::dim(
            "distill_loss",
            format!(
                "teacher {:?} vs student {:?}",
                teacher.shape(),
                student.shape()
            ),
        ));
    }
    let (_, k) = rows(student, "distill_loss")?;
    let target = softmax(teacher)?;
    soft_xent(student, &target, k)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_give_ln_k() {
        let logits = Tensor::zeros(&[3, 7]);
        let (l, _) = softmax_xent(&logits, &[0, 3, 6], 0.0).unwrap();
        assert!((f64::from(l) - 7f64.ln()).abs() < 1e-6);
    }

    #[test]
    fn large_margin_gives_zero_loss() {
        let logits = Tensor::from_fn(&[2, 4], |i| if i % 4 == 1 { 80.0 } else { 0.0 });
        let (l, _) = softmax_xent(&logits, &[1, 1], 0.0).unwrap();
        assert!(l.abs() < 1e-12);
    }

    #[test]
    fn distill_of_self_has_zero_grad() {
        let t = Tensor::from_fn(&[3, 5], |i| (i as f32 * 0.7).sin() * 3.0);
        let (l, g) = distill_loss(&t, &t).unwrap();
        assert!(g.data().iter().all(|&v| v.abs() < 1e-7));
        let p = softmax(&t).unwrap();
        let h: f64 = -p.iter().map(|&v| v * v.ln()).sum::<f64>() / 3.0;
        assert!((f64::from(l) - h).abs() < 1e-5);
    }

    #[test]
    fn distill_uniform_teacher_decomposes() {
        let teacher = Tensor::zeros(&[1, 4]);
        let student = Tensor::new(vec![1, 4], vec![0.3, -1.2, 2.0, 0.1]).unwrap();
        let (l, _) = distill_loss(&teacher, &student).unwrap();
        let q = softmax(&student).unwrap();
        let kl: f64 = q.iter().map(|&qi| 0.25 * (0.25 / qi).ln()).sum();
        assert!((f64::from(l) - (4f64.ln() + kl)).abs() < 1e-6);
        let (l0, _) = distill_loss(&teacher, &teacher).unwrap();
        assert!(l0 < l);
    }

    #[test]
    fn label_out_of_range_rejected() {
        assert!(softmax_xent(&Tensor::zeros(&[1, 3]), &[3], 0.0).is_err());
    }
}
