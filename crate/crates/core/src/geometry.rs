//! Exact k-nearest-neighbor graphs and farthest point sampling.
//!
//! Distances are squared Euclidean, accumulated in `f64` from `f32`
//! coordinate differences. Ties resolve toward the lower index.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Candidates scanned per pass; the distance buffer stays in L1.
const CANDIDATE_BLOCK: usize = 1024;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct KnnGraph {
    n_nodes: usize,
    k: usize,
    /// `neighbors[i * k..(i + 1) * k]` are the neighbors of node `i`, nearest first.
    neighbors: Vec<usize>,
}

impl KnnGraph {
    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[i * self.k..(i + 1) * self.k]
    }

    /// Directed `(src, dst)` pairs; `dst` is a neighbor of `src`.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.n_nodes).flat_map(move |i| self.neighbors(i).iter().map(move |&j| (i, j)))
    }

    pub fn n_edges(&self) -> usize {
        self.neighbors.len()
    }

    /// Writes one `src,dst` line per edge.
    pub fn write_edge_list(&self, w: &mut impl Write) -> std::io::Result<()> {
        for (s, d) in self.edges() {
            writeln!(w, "{s},{d}")?;
        }
        Ok(())
    }
}

#[inline]
pub fn squared_distance(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = (x - y) as f64;
            d * d
        })
        .sum()
}

/// Exact k-NN over all columns of `events`, excluding self-loops.
pub fn knn_graph(events: &Tensor, k: usize) -> Result<KnnGraph> {
    let n = events.rows();
    if k == 0 {
        return Err(Error::InvalidArgument("knn_graph: k must be at least 1".into()));
    }
    if n <= k {
        return Err(Error::InvalidArgument(format!("knn_graph: need more than k={k} events, got {n}")));
    }
    if !events.is_finite() {
        return Err(Error::NonFinite("knn_graph input".into()));
    }
    let f = events.cols();
    // Column-major copy so one query scans many candidates per feature.
    let mut cols = vec![0.0f32; f * n];
    for i in 0..n {
        for (c, &v) in events.row(i).iter().enumerate() {
            cols[c * n + i] = v;
        }
    }
    let mut neighbors = vec![0usize; n * k];
    let mut dist = vec![0.0f64; CANDIDATE_BLOCK];
    let mut best_d = vec![f64::INFINITY; k];
    let mut best_i = vec![usize::MAX; k];
    for q in 0..n {
        let xq = events.row(q);
        best_d.fill(f64::INFINITY);
        best_i.fill(usize::MAX);
        for start in (0..n).step_by(CANDIDATE_BLOCK) {
            let len = CANDIDATE_BLOCK.min(n - start);
            let dist = &mut dist[..len];
            dist.fill(0.0);
            // Same per-pair summation order as `squared_distance`.
            for (c, &v) in xq.iter().enumerate() {
                let col = &cols[c * n + start..c * n + start + len];
                for (d, &x) in dist.iter_mut().zip(col) {
                    let t = (v - x) as f64;
                    *d += t * t;
                }
            }
            for (o, &d) in dist.iter().enumerate() {
                let j = start + o;
                // Strict comparison keeps the earlier (lower) index on ties.
                if d < best_d[k - 1] && j != q {
                    let mut p = k - 1;
                    while p > 0 && best_d[p - 1] > d {
                        best_d[p] = best_d[p - 1];
                        best_i[p] = best_i[p - 1];
                        p -= 1;
                    }
                    best_d[p] = d;
                    best_i[p] = j;
                }
            }
        }
        neighbors[q * k..(q + 1) * k].copy_from_slice(&best_i);
    }
    Ok(KnnGraph { n_nodes: n, k, neighbors })
}

#[derive(Clone, Debug, PartialEq)]
pub struct FpsSelection {
    pub indices: Vec<usize>,
    pub ratio: f64,
}

/// Number of points FPS selects: `max(min_count, round(ratio * n))`, at most `n`.
pub fn fps_target(n: usize, ratio: f64, min_count: usize) -> usize {
    let m = (ratio * n as f64).round() as usize;
    m.max(min_count).min(n)
}

/// Farthest point sampling with the first pick drawn uniformly from `seed`.
pub fn fps_select(events: &Tensor, ratio: f64, min_count: usize, seed: u64) -> Result<FpsSelection> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::InvalidArgument(format!("fps ratio must be in (0, 1], got {ratio}")));
    }
    let n = events.rows();
    if n == 0 {
        return Err(Error::InvalidArgument("fps_select on an empty set".into()));
    }
    let first = ChaCha8Rng::seed_from_u64(seed).gen_range(0..n);
    let m = fps_target(n, ratio, min_count);
    Ok(FpsSelection {
        indices: fps_from(events, m, first),
        ratio,
    })
}

/// Greedy farthest point sampling of `m` rows starting at `first`.
///
/// Each step picks the row maximizing the minimum distance to the selected
/// set, tracked in a running array (O(n m)). `m` is clamped to the row count.
pub fn fps_from(events: &Tensor, m: usize, first: usize) -> Vec<usize> {
    let n = events.rows();
    let m = m.min(n);
    if m == 0 {
        return Vec::new();
    }
    assert!(first < n, "fps first pick {first} out of range for {n} rows");
    let mut min_d = vec![f64::INFINITY; n];
    let mut picked = Vec::with_capacity(m);
    let mut cur = first;
    loop {
        picked.push(cur);
        min_d[cur] = f64::NEG_INFINITY;
        if picked.len() == m {
            break;
        }
        let xc = events.row(cur);
        let mut best = usize::MAX;
        let mut best_d = f64::NEG_INFINITY;
        for (j, md) in min_d.iter_mut().enumerate() {
            if *md == f64::NEG_INFINITY {
                continue;
            }
            let d = squared_distance(events.row(j), xc);
            if d < *md {
                *md = d;
            }
            if *md > best_d {
                best_d = *md;
                best = j;
            }
        }
        cur = best;
    }
    picked
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line(xs: &[f32]) -> Tensor {
        Tensor::column(xs.to_vec())
    }

    #[test]
    fn colinear_k1() {
        let g = knn_graph(&line(&[0.0, 1.0, 3.0]), 1).unwrap();
        assert_eq!(g.edges().collect::<Vec<_>>(), vec![(0, 1), (1, 0), (2, 1)]);
    }

    #[test]
    fn duplicates_pick_each_other() {
        let g = knn_graph(&line(&[5.0, 5.0, 9.0]), 1).unwrap();
        assert_eq!(g.neighbors(0), &[1]);
        assert_eq!(g.neighbors(1), &[0]);
    }

    #[test]
    fn too_few_points() {
        assert!(knn_graph(&line(&[0.0, 1.0]), 2).is_err());
        assert!(knn_graph(&line(&[0.0, f32::NAN, 2.0]), 1).is_err());
    }

    #[test]
    fn edge_list_format() {
        let g = knn_graph(&line(&[0.0, 1.0, 3.0]), 1).unwrap();
        let mut out = Vec::new();
        g.write_edge_list(&mut out).unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), "0,1\n1,0\n2,1\n");
    }

    #[test]
    fn fps_hand_example() {
        assert_eq!(fps_from(&line(&[0.0, 1.0, 2.0, 10.0]), 2, 0), vec![0, 3]);
    }

    #[test]
    fn fps_full_ratio_is_permutation() {
        let x = line(&[3.0, 3.0, 1.0, 7.0, 2.0]);
        let sel = fps_select(&x, 1.0, 1, 9).unwrap();
        let mut s = sel.indices.clone();
        s.sort_unstable();
        assert_eq!(s, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn fps_target_clamps() {
        assert_eq!(fps_target(50_000, 0.0005, 16), 25);
        assert_eq!(fps_target(1000, 0.0005, 16), 16);
        assert_eq!(fps_target(5, 0.0005, 16), 5);
        assert_eq!(fps_target(300_000, 0.0005, 16), 150);
    }

    #[test]
    fn fps_rejects_bad_ratio() {
        assert!(fps_select(&line(&[0.0]), 0.0, 1, 0).is_err());
        assert!(fps_select(&line(&[0.0]), 1.5, 1, 0).is_err());
    }
}
