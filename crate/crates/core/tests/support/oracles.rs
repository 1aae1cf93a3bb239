//! Direct quadratic reference implementations.

use cytoset::tensor::Tensor;

/// Squared distance accumulated feature by feature in f64.
pub fn dist(x: &Tensor, i: usize, j: usize) -> f64 {
    x.row(i)
        .iter()
        .zip(x.row(j))
        .map(|(&a, &b)| ((a - b) as f64).powi(2))
        .sum()
}

/// All pairs, sorted by (distance, index); self excluded.
pub fn brute_knn(x: &Tensor, k: usize) -> Vec<Vec<usize>> {
    (0..x.rows())
        .map(|i| {
            let mut c: Vec<(f64, usize)> = (0..x.rows()).filter(|&j| j != i).map(|j| (dist(x, i, j), j)).collect();
            c.sort_by(|a, b| a.partial_cmp(b).unwrap());
            c.into_iter().take(k).map(|(_, j)| j).collect()
        })
        .collect()
}

/// Greedy selection recomputing every min-distance from scratch; ties go to the lower index.
pub fn brute_fps(x: &Tensor, m: usize, first: usize) -> Vec<usize> {
    let mut picked = vec![first];
    while picked.len() < m.min(x.rows()) {
        let mut best = (f64::NEG_INFINITY, usize::MAX);
        for j in (0..x.rows()).filter(|j| !picked.contains(j)) {
            let d = picked.iter().map(|&p| dist(x, p, j)).fold(f64::INFINITY, f64::min);
            if d > best.0 {
                best = (d, j);
            }
        }
        picked.push(best.1);
    }
    picked
}

/// Weights `relu(q_i) . relu(k_j)`, normalized per query with a `1e-6` floor
/// on the denominator.
pub fn naive_relu_attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Tensor {
    let (n, m, dv) = (q.rows(), k.rows(), v.cols());
    let mut out = Tensor::zeros(n, dv);
    for i in 0..n {
        let w: Vec<f64> = (0..m)
            .map(|j| {
                q.row(i)
                    .iter()
                    .zip(k.row(j))
                    .map(|(&a, &b)| (a.max(0.0) as f64) * (b.max(0.0) as f64))
                    .sum()
            })
            .collect();
        let den = w.iter().sum::<f64>().max(1e-6);
        for c in 0..dv {
            let num: f64 = (0..m).map(|j| w[j] * v.get(j, c) as f64).sum();
            out.set(i, c, (num / den) as f32);
        }
    }
    out
}
