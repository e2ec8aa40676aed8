//! Cross-entropy and distillation losses over row-major logit batches.

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};

use crate::error::{invalid, Result};

/// Row-wise softmax.
pub fn softmax(logits: ArrayView2<'_, f64>) -> Array2<f64> {
    let mut out = logits.to_owned();
    for mut row in out.rows_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

/// Row-wise log-softmax.
pub fn log_softmax(logits: ArrayView2<'_, f64>) -> Array2<f64> {
    let mut out = logits.to_owned();
    for mut row in out.rows_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        row.mapv_inplace(|v| v - lse);
    }
    out
}

fn check_labels(logits: ArrayView2<'_, f64>, labels: &[usize]) -> Result<()> {
    if logits.nrows() != labels.len() {
        return invalid(format!(
            "{} logit rows but {} labels",
            logits.nrows(),
            labels.len()
        ));
    }
    if logits.nrows() == 0 {
        return invalid("empty batch");
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= logits.ncols()) {
        return invalid(format!("label {bad} out of range for {} classes", logits.ncols()));
    }
    Ok(())
}

/// Mean negative log-likelihood of the labels.
pub fn ce_loss(logits: ArrayView2<'_, f64>, labels: &[usize]) -> Result<f64> {
    check_labels(logits, labels)?;
    let logp = log_softmax(logits);
    let total: f64 = labels.iter().enumerate().map(|(n, &y)| -logp[[n, y]]).sum();
    Ok(total / labels.len() as f64)
}

/// Gradient of [`ce_loss`] with respect to the logits.
pub fn ce_grad(logits: ArrayView2<'_, f64>, labels: &[usize]) -> Result<Array2<f64>> {
    check_labels(logits, labels)?;
    let n = labels.len() as f64;
    let mut g = softmax(logits);
    for (i, &y) in labels.iter().enumerate() {
        g[[i, y]] -= 1.0;
    }
    g /= n;
    Ok(g)
}

fn check_pair(student: ArrayView2<'_, f64>, teacher: ArrayView2<'_, f64>, temperature: f64) -> Result<()> {
    if student.dim() != teacher.dim() {
        return invalid(format!(
            "student logits {:?} and teacher logits {:?} differ in shape",
            student.dim(),
            teacher.dim()
        ));
    }
    if student.nrows() == 0 {
        return invalid("empty batch");
    }
    if !(temperature > 0.0) {
        return invalid(format!("temperature must be positive, got {temperature}"));
    }
    Ok(())
}

/// KL(softmax(teacher / T) || softmax(student / T)), averaged over the batch.
pub fn kd_loss(student: ArrayView2<'_, f64>, teacher: ArrayView2<'_, f64>, temperature: f64) -> Result<f64> {
    check_pair(student, teacher, temperature)?;
    let logp = log_softmax((&teacher / temperature).view());
    let logq = log_softmax((&student / temperature).view());
    let total: f64 = logp
        .iter()
        .zip(logq.iter())
        .map(|(&lp, &lq)| if lp == f64::NEG_INFINITY { 0.0 } else { lp.exp() * (lp - lq) })
        .sum();
    Ok(total / student.nrows() as f64)
}

/// Gradient of [`kd_loss`] with respect to the student logits:
/// `(q - p) / (T * N)`.
pub fn kd_grad(student: ArrayView2<'_, f64>, teacher: ArrayView2<'_, f64>, temperature: f64) -> Result<Array2<f64>> {
    check_pair(student, teacher, temperature)?;
    let p = softmax((&teacher / temperature).view());
    let q = softmax((&student / temperature).view());
    Ok((q - p) / (temperature * student.nrows() as f64))
}

/// Cross-entropy `-sum p log q` of one distribution pair.
pub fn cross_entropy(p: ArrayView1<'_, f64>, q: ArrayView1<'_, f64>) -> f64 {
    p.iter()
        .zip(q.iter())
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &qi)| -pi * qi.ln())
        .sum()
}

/// Shannon entropy `-sum p log p`.
pub fn entropy(p: ArrayView1<'_, f64>) -> f64 {
    cross_entropy(p, p)
}

/// KL(p || q) of one distribution pair, by direct summation of p log(p/q).
pub fn kl_divergence(p: ArrayView1<'_, f64>, q: ArrayView1<'_, f64>) -> f64 {
    p.iter()
        .zip(q.iter())
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &qi)| pi * (pi / qi).ln())
        .sum()
}

/// Row sums, for checking softmax normalization.
pub fn row_sums(m: ArrayView2<'_, f64>) -> Vec<f64> {
    m.sum_axis(Axis(1)).to_vec()
}
