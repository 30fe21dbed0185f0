//! Small dense helpers shared by the numeric modules.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

/// Euclidean norm of every row.
pub fn row_norms(m: ArrayView2<'_, f64>) -> Array1<f64> {
    m.rows().into_iter().map(|r| r.dot(&r).sqrt()).collect()
}

pub fn norm(v: ArrayView1<'_, f64>) -> f64 {
    v.dot(&v).sqrt()
}

/// Cosine similarity; zero when either vector has zero norm.
pub fn cosine(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> f64 {
    let na = norm(a);
    let nb = norm(b);
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    a.dot(&b) / (na * nb)
}

/// Numerically stable softmax.
pub fn softmax(logits: ArrayView1<'_, f64>) -> Array1<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exp: Array1<f64> = logits.mapv(|z| (z - max).exp());
    let total = exp.sum();
    exp / total
}

/// Squared Frobenius norm.
pub fn sq_norm(m: ArrayView2<'_, f64>) -> f64 {
    m.iter().map(|x| x * x).sum()
}

/// Sum of squared deviations from the column means (total variance times n).
pub fn centered_sq_norm(m: ArrayView2<'_, f64>) -> f64 {
    match m.mean_axis(Axis(0)) {
        Some(mean) => m
            .rows()
            .into_iter()
            .map(|r| r.iter().zip(mean.iter()).map(|(x, mu)| (x - mu) * (x - mu)).sum::<f64>())
            .sum(),
        None => 0.0,
    }
}

/// Numerical rank by modified Gram-Schmidt on the rows.
pub fn row_rank(m: ArrayView2<'_, f64>, tol: f64) -> usize {
    let mut basis: Vec<Array1<f64>> = Vec::new();
    for row in m.rows() {
        let mut r = row.to_owned();
        for b in &basis {
            let proj = r.dot(b);
            r.scaled_add(-proj, b);
        }
        let n = norm(r.view());
        if n > tol {
            basis.push(r / n);
        }
    }
    basis.len()
}

pub fn all_finite(m: &Array2<f64>) -> bool {
    m.iter().all(|x| x.is_finite())
}
