//! Simplified adaptive structure-aware pooling.
//!
//! Every node's 1-hop ego network is a candidate cluster. Members are
//! weighted by attention between the center and each member, clusters are
//! scored by a sigmoid-activated linear fitness, and the fittest clusters are
//! kept. Unpooling maps pooled rows back to events through the composed
//! soft assignments.

use std::collections::BTreeSet;
use std::sync::Arc;

use rand_chacha::ChaCha8Rng;

use super::{uniform_init, Linear, MessageGraph};
use crate::error::{Error, Result};
use crate::geometry::squared_distance;
use crate::tensor::{matmul, ParamGroup, ParamId, ParamStore, Session, Tensor, Var};

#[derive(Clone, Debug)]
pub struct AsapPool {
    pub w: ParamId,
    pub att_recv: ParamId,
    pub att_send: ParamId,
    pub fitness: Linear,
    pub slope: f32,
}

impl AsapPool {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, group: ParamGroup, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(AsapPool {
            w: store.register(format!("{name}.w"), uniform_init(d, d, d, rng), group)?,
            att_recv: store.register(format!("{name}.att_recv"), uniform_init(d, 1, d, rng), group)?,
            att_send: store.register(format!("{name}.att_send"), uniform_init(d, 1, d, rng), group)?,
            fitness: Linear::new(store, &format!("{name}.fitness"), d, 1, group, rng)?,
            slope: 0.2,
        })
    }
}

pub struct Pooled {
    /// `target x d` fitness-scaled cluster features.
    pub x: Var,
    /// Clusters sharing at least one member are connected.
    pub graph: MessageGraph,
    /// `n x target` membership weights of the kept clusters (no gradient).
    pub assignment: Tensor,
    /// Center node of each kept cluster.
    pub centers: Vec<usize>,
}

pub fn asap_pool(s: &mut Session, x: Var, graph: &MessageGraph, target: usize, p: &AsapPool) -> Result<Pooled> {
    let n = s.value(x).rows();
    if graph.n_nodes != n {
        return Err(Error::shape("asap_pool", format!("graph has {} nodes, features {n}", graph.n_nodes)));
    }
    if target == 0 || target >= n {
        return Err(Error::InvalidArgument(format!("asap_pool target {target} must be in [1, {n})")));
    }
    let g = graph.with_self_loops();

    // Member attention within each ego network.
    let w = s.param(p.w);
    let z = s.tape.matmul(x, w)?;
    let (ar, asd) = (s.param(p.att_recv), s.param(p.att_send));
    let sr = s.tape.matmul(z, ar)?;
    let ss = s.tape.matmul(z, asd)?;
    let er = s.tape.gather(sr, g.receivers.clone())?;
    let es = s.tape.gather(ss, g.senders.clone())?;
    let e = s.tape.add(er, es)?;
    let e = s.tape.leaky_relu(e, p.slope)?;
    let alpha = s.tape.segment_softmax(e, g.receivers.clone(), n)?;

    let members = s.tape.gather(x, g.senders.clone())?;
    let weighted = s.tape.mul(members, alpha)?;
    let clusters = s.tape.scatter_sum(weighted, g.receivers.clone(), n)?;
    let fit = p.fitness.forward(s, clusters)?;
    let fit = s.tape.sigmoid(fit)?;

    let scores = s.value(fit).data().to_vec();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let centers: Vec<usize> = order[..target].to_vec();
    let centers_arc = Arc::new(centers.clone());

    let kept = s.tape.gather(clusters, centers_arc.clone())?;
    let kept_fit = s.tape.gather(fit, centers_arc)?;
    let pooled = s.tape.mul(kept, kept_fit)?;

    let mut slot = vec![usize::MAX; n];
    for (c, &i) in centers.iter().enumerate() {
        slot[i] = c;
    }
    let a = s.value(alpha).data();
    let mut assignment = Tensor::zeros(n, target);
    let mut member_of: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (e, (&r, &m)) in g.receivers.iter().zip(g.senders.iter()).enumerate() {
        let c = slot[r];
        if c != usize::MAX {
            assignment.set(m, c, assignment.get(m, c) + a[e]);
            member_of[m].push(c);
        }
    }
    let mut pairs = BTreeSet::new();
    for cs in &member_of {
        for (i, &c1) in cs.iter().enumerate() {
            for &c2 in &cs[i + 1..] {
                if c1 != c2 {
                    pairs.insert((c1.min(c2), c1.max(c2)));
                }
            }
        }
    }
    let pairs: Vec<(usize, usize)> = pairs.into_iter().collect();
    Ok(Pooled {
        x: pooled,
        graph: MessageGraph::from_undirected(target, &pairs)?,
        assignment,
        centers,
    })
}

/// Composes the assignment chain and renormalizes its rows.
///
/// Rows with no membership take a one-hot row for the nearest final
/// cluster, measured between `events` and each cluster's weighted centroid.
pub fn unpool_matrix(assignments: &[Tensor], events: &Tensor) -> Result<Tensor> {
    let Some(first) = assignments.first() else {
        return Err(Error::InvalidArgument("asap_unpool needs at least one assignment".into()));
    };
    let mut m = first.clone();
    for a in &assignments[1..] {
        if m.cols() != a.rows() {
            return Err(Error::shape("asap_unpool", format!("chain {:?} x {:?}", m.shape(), a.shape())));
        }
        m = Tensor::from_vec(m.rows(), a.cols(), matmul(m.data(), a.data(), m.rows(), m.cols(), a.cols()));
    }
    let (n, c) = m.dims();
    if events.rows() != n {
        return Err(Error::shape("asap_unpool", format!("{} events for {n} assignment rows", events.rows())));
    }
    let f = events.cols();
    let mut centroid = vec![0.0f64; c * f];
    let mut mass = vec![0.0f64; c];
    for i in 0..n {
        for k in 0..c {
            let w = m.get(i, k) as f64;
            if w > 0.0 {
                mass[k] += w;
                for (acc, &x) in centroid[k * f..(k + 1) * f].iter_mut().zip(events.row(i)) {
                    *acc += w * x as f64;
                }
            }
        }
    }
    let centroids: Vec<Option<Vec<f32>>> = (0..c)
        .map(|k| {
            (mass[k] > 0.0).then(|| centroid[k * f..(k + 1) * f].iter().map(|v| (v / mass[k]) as f32).collect())
        })
        .collect();
    for i in 0..n {
        let row = m.row_mut(i);
        let total: f64 = row.iter().map(|&v| v as f64).sum();
        if total > 0.0 {
            row.iter_mut().for_each(|v| *v = (*v as f64 / total) as f32);
        } else {
            let x = events.row(i);
            let mut best = (f64::INFINITY, 0usize);
            for (k, cen) in centroids.iter().enumerate() {
                if let Some(cen) = cen {
                    let d = squared_distance(x, cen);
                    if d < best.0 {
                        best = (d, k);
                    }
                }
            }
            m.row_mut(i)[best.1] = 1.0;
        }
    }
    Ok(m)
}

/// Per-event rows from pooled rows: `unpool_matrix(assignments, events) @ pooled`.
pub fn asap_unpool(s: &mut Session, pooled: Var, assignments: &[Tensor], events: &Tensor) -> Result<Var> {
    let m = unpool_matrix(assignments, events)?;
    if m.cols() != s.value(pooled).rows() {
        return Err(Error::shape(
            "asap_unpool",
            format!("assignment has {} columns, pooled has {} rows", m.cols(), s.value(pooled).rows()),
        ));
    }
    let mv = s.input(m);
    s.tape.matmul(mv, pooled)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::{check_module, Cotangent};
    use rand::{Rng, SeedableRng};

    fn random(rows: usize, cols: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    fn pool_setup(seed: u64) -> (ParamStore, AsapPool) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = AsapPool::new(&mut store, "pool", 3, ParamGroup::Gat, &mut rng).unwrap();
        (store, p)
    }

    #[test]
    fn three_node_path_keeps_two_clusters() {
        let g = MessageGraph::from_undirected(3, &[(0, 1), (1, 2)]).unwrap();
        for seed in 0..5 {
            let (mut store, p) = pool_setup(seed);
            let mut s = Session::new(&mut store, false, 0);
            let x = s.input(random(3, 3, seed + 100));
            let out = asap_pool(&mut s, x, &g, 2, &p).unwrap();
            assert_eq!(s.value(out.x).shape(), [2, 3]);
            assert_eq!(out.assignment.shape(), [3, 2]);
            assert!(out.graph.n_edges() <= 2, "at most one undirected edge");
            assert!(out.assignment.data().iter().all(|&v| v >= 0.0));
            // Every ego network of a 3-path shares node 1 with every other.
            assert_eq!(out.graph.n_edges(), 2);
        }
    }

    #[test]
    fn target_out_of_range_is_an_error() {
        let g = MessageGraph::from_undirected(3, &[(0, 1)]).unwrap();
        let (mut store, p) = pool_setup(0);
        let mut s = Session::new(&mut store, false, 0);
        let x = s.input(random(3, 3, 1));
        assert!(asap_pool(&mut s, x, &g, 3, &p).is_err());
        assert!(asap_pool(&mut s, x, &g, 0, &p).is_err());
    }

    #[test]
    fn cluster_features_are_fitness_scaled_weighted_sums() {
        let g = MessageGraph::new(4, vec![0, 1, 2, 3], vec![1, 2, 3, 0]).unwrap();
        let (mut store, p) = pool_setup(3);
        let x = random(4, 3, 4);
        let mut s = Session::new(&mut store, false, 0);
        let xv = s.input(x.clone());
        let out = asap_pool(&mut s, xv, &g, 2, &p).unwrap();
        let pooled = s.value(out.x).clone();
        for (c, &center) in out.centers.iter().enumerate() {
            let mut cluster = [0.0f64; 3];
            for j in 0..4 {
                for f in 0..3 {
                    cluster[f] += out.assignment.get(j, c) as f64 * x.get(j, f) as f64;
                }
            }
            let fw = store_fitness(&mut s, &p, &cluster);
            for f in 0..3 {
                assert!((pooled.get(c, f) as f64 - cluster[f] * fw).abs() < 1e-5, "center {center}");
            }
        }
    }

    fn store_fitness(s: &mut Session, p: &AsapPool, cluster: &[f64; 3]) -> f64 {
        let w = s.store().get(p.fitness.w).data().to_vec();
        let b = s.store().get(p.fitness.b).data()[0] as f64;
        let z: f64 = cluster.iter().zip(&w).map(|(c, &w)| c * w as f64).sum::<f64>() + b;
        1.0 / (1.0 + (-z).exp())
    }

    #[test]
    fn unpool_one_hot_copies_cluster_rows() {
        let s1 = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        let events = random(3, 2, 0);
        let mut store = ParamStore::new();
        let mut s = Session::new(&mut store, false, 0);
        let logits = s.input(Tensor::from_rows(&[vec![2.0], vec![-3.0]]).unwrap());
        let out = asap_unpool(&mut s, logits, &[s1], &events).unwrap();
        assert_eq!(s.value(out).data(), &[2.0, -3.0, 2.0]);
    }

    #[test]
    fn unpool_identity_and_renormalized_rows() {
        let events = random(4, 2, 1);
        let m = unpool_matrix(&[Tensor::eye(4)], &events).unwrap();
        assert_eq!(m, Tensor::eye(4));
        let s1 = random(6, 4, 2).map(|v| v.abs());
        let s2 = random(4, 3, 3).map(|v| v.abs());
        let m = unpool_matrix(&[s1, s2], &random(6, 2, 4)).unwrap();
        assert_eq!(m.shape(), [6, 3]);
        for i in 0..6 {
            let sum: f64 = m.row(i).iter().map(|&v| v as f64).sum();
            assert!((sum - 1.0).abs() < 1e-6);
        }
        assert!(unpool_matrix(&[Tensor::eye(3), Tensor::eye(4)], &random(3, 2, 5)).is_err());
    }

    #[test]
    fn uncovered_events_take_nearest_centroid() {
        let s1 = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![0.0, 0.0], vec![0.0, 0.0]]).unwrap();
        let events = Tensor::from_rows(&[vec![0.0, 0.0], vec![10.0, 10.0], vec![9.0, 9.5], vec![-1.0, 0.5]]).unwrap();
        let m = unpool_matrix(&[s1], &events).unwrap();
        assert_eq!(m.row(2), &[0.0, 1.0]);
        assert_eq!(m.row(3), &[1.0, 0.0]);
    }

    #[test]
    fn pool_gradients_match_finite_differences() {
        let g = MessageGraph::from_undirected(5, &[(0, 1), (1, 2), (2, 3), (3, 4), (4, 0)]).unwrap();
        let (mut store, p) = pool_setup(11);
        let report = check_module(&mut store, &[random(5, 3, 12)], 1e-3, Cotangent::Random(2), false, |s, v| {
            Ok(asap_pool(s, v[0], &g, 3, &p)?.x)
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-2, "{report:?}");
    }
}
