use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use cytoset::geometry::{fps_from, fps_select, knn_graph};
use cytoset::tensor::Tensor;

mod support;

use support::oracles::{brute_fps, brute_knn, dist};

fn random_events(n: usize, f: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_vec(n, f, (0..n * f).map(|_| rng.gen_range(-3.0f32..3.0)).collect())
}

#[test]
fn knn_matches_brute_force_on_50_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for t in 0..50u64 {
        let k = if t % 2 == 0 { 3 } else { 10 };
        let n = rng.gen_range(k + 1..=500);
        let f = rng.gen_range(1..=15);
        let mut x = random_events(n, f, 100 + t);
        if t % 5 == 0 {
            // Coarse values force exact distance ties.
            x = x.map(|v| v.round());
        }
        let g = knn_graph(&x, k).unwrap();
        let want = brute_knn(&x, k);
        for i in 0..n {
            assert_eq!(g.neighbors(i), want[i].as_slice(), "instance {t}, node {i}");
        }
    }
}

#[test]
fn fps_matches_brute_force_on_50_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for t in 0..50u64 {
        let n = rng.gen_range(1..=200);
        let f = rng.gen_range(1..=15);
        let m = rng.gen_range(1..=n);
        let first = rng.gen_range(0..n);
        let mut x = random_events(n, f, 300 + t);
        if t % 5 == 0 {
            x = x.map(|v| v.round());
        }
        assert_eq!(fps_from(&x, m, first), brute_fps(&x, m, first), "instance {t}");
    }
}

#[test]
fn fps_select_uses_its_seed_for_the_first_pick() {
    let x = random_events(60, 4, 1);
    let a = fps_select(&x, 0.1, 2, 9).unwrap();
    assert_eq!(a, fps_select(&x, 0.1, 2, 9).unwrap());
    assert_eq!(a.indices.len(), 6);
    assert_eq!(a.indices, fps_from(&x, 6, a.indices[0]));
}

fn events_strategy() -> impl Strategy<Value = (Tensor, u64)> {
    (2usize..40, 1usize..6, any::<u64>()).prop_map(|(n, f, seed)| (random_events(n, f, seed), seed))
}

fn permutation(n: usize, seed: u64) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x9e37));
    p
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn knn_agrees_with_brute_force((x, _) in events_strategy(), k in 1usize..5) {
        prop_assume!(x.rows() > k);
        let g = knn_graph(&x, k).unwrap();
        let want = brute_knn(&x, k);
        for i in 0..x.rows() {
            prop_assert_eq!(g.neighbors(i), want[i].as_slice());
            prop_assert!(!g.neighbors(i).contains(&i));
        }
    }

    #[test]
    fn fps_pick_distances_never_increase((x, seed) in events_strategy()) {
        let first = (seed as usize) % x.rows();
        let picks = fps_from(&x, x.rows(), first);
        let mut sorted = picks.clone();
        sorted.sort_unstable();
        prop_assert_eq!(sorted, (0..x.rows()).collect::<Vec<_>>());
        // Min pairwise distance of the first m picks, for growing m.
        let mut min_pair = f64::INFINITY;
        for m in 1..picks.len() {
            let d = picks[..m].iter().map(|&p| dist(&x, p, picks[m])).fold(f64::INFINITY, f64::min);
            let next = min_pair.min(d);
            prop_assert!(next <= min_pair);
            // Greedy: the new pick is the farthest remaining point.
            for &j in &picks[m..] {
                let dj = picks[..m].iter().map(|&p| dist(&x, p, j)).fold(f64::INFINITY, f64::min);
                prop_assert!(dj <= d);
            }
            min_pair = next;
        }
    }

    #[test]
    fn permuting_rows_permutes_graph_and_selection((x, seed) in events_strategy(), k in 1usize..4) {
        prop_assume!(x.rows() > k);
        let n = x.rows();
        // perm[new] = old
        let perm = permutation(n, seed);
        let xp = x.select_rows(&perm);
        let mut inv = vec![0; n];
        for (new, &old) in perm.iter().enumerate() {
            inv[old] = new;
        }
        let g = knn_graph(&x, k).unwrap();
        let gp = knn_graph(&xp, k).unwrap();
        for new in 0..n {
            let mut a: Vec<usize> = gp.neighbors(new).iter().map(|&j| perm[j]).collect();
            let mut b = g.neighbors(perm[new]).to_vec();
            a.sort_unstable();
            b.sort_unstable();
            prop_assert_eq!(a, b);
        }
        let first = (seed as usize) % n;
        let m = 1 + (seed as usize / 7) % n;
        let s = fps_from(&x, m, first);
        let sp: Vec<usize> = fps_from(&xp, m, inv[first]).into_iter().map(|j| perm[j]).collect();
        prop_assert_eq!(s, sp);
    }
}
