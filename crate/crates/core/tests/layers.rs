use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use cytoset::geometry::knn_graph;
use cytoset::layers::{relu_linear_attention, AttentionKind, GnnKind, GnnLayer, Isab, Mab, MessageGraph};
use cytoset::tensor::{ParamStore, Session, Tape, Tensor, Var};

mod support;

use support::oracles::naive_relu_attention;

const TOL: f32 = 1e-5;

fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0f32..1.0)).collect())
}

fn eval_relu_attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Tensor {
    let mut tape = Tape::new();
    let (qv, kv, vv) = (tape.constant(q.clone()), tape.constant(k.clone()), tape.constant(v.clone()));
    let out = relu_linear_attention(&mut tape, qv, kv, vv).unwrap();
    tape.value(out).clone()
}

#[test]
fn relu_linear_attention_matches_quadratic_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for t in 0..50 {
        let n = rng.gen_range(1..=64);
        let m = rng.gen_range(1..=64);
        let (d, dv) = (rng.gen_range(1..=8), rng.gen_range(1..=8));
        let q = random(n, d, &mut rng);
        let mut k = random(m, d, &mut rng);
        let v = random(m, dv, &mut rng);
        if t % 10 == 0 {
            // Degenerate case: every key is non-positive, so all weights vanish.
            k = k.map(|x| -x.abs());
        }
        let got = eval_relu_attention(&q, &k, &v);
        let want = naive_relu_attention(&q, &k, &v);
        assert!(got.max_abs_diff(&want) <= TOL, "instance {t}: {}", got.max_abs_diff(&want));
        if t % 10 == 0 {
            assert!(got.data().iter().all(|&x| x == 0.0));
        }
    }
}

fn perm(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(rng);
    p
}

fn run(store: &mut ParamStore, inputs: &[Tensor], first: Option<usize>, f: impl Fn(&mut Session, &[Var]) -> Var) -> Tensor {
    let mut s = Session::new(store, false, 0);
    s.set_fps_first(first);
    let vars: Vec<Var> = inputs.iter().map(|t| s.input(t.clone())).collect();
    let y = f(&mut s, &vars);
    s.value(y).clone()
}

fn assert_permuted(out: &Tensor, out_p: &Tensor, p: &[usize]) -> Result<(), TestCaseError> {
    let diff = out.select_rows(p).max_abs_diff(out_p);
    prop_assert!(diff <= TOL, "max difference {diff}");
    Ok(())
}

fn kinds() -> impl Strategy<Value = AttentionKind> {
    prop_oneof![
        Just(AttentionKind::Softmax),
        Just(AttentionKind::ReluLinear),
        Just(AttentionKind::NoAttention)
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(20))]

    #[test]
    fn mab_is_equivariant_in_queries(seed in any::<u64>(), n in 1usize..24, m in 1usize..24, kind in kinds()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mab = Mab::new(&mut store, "mab", 8, 2, kind, &mut rng).unwrap();
        let (x, y) = (random(n, 8, &mut rng), random(m, 8, &mut rng));
        let p = perm(n, &mut rng);
        let py = perm(m, &mut rng);
        let out = run(&mut store, &[x.clone(), y.clone()], None, |s, v| mab.forward(s, v[0], v[1]).unwrap());
        // Permuting the keys as well must not matter.
        let out_p = run(&mut store, &[x.select_rows(&p), y.select_rows(&py)], None, |s, v| mab.forward(s, v[0], v[1]).unwrap());
        assert_permuted(&out, &out_p, &p)?;
    }

    #[test]
    fn learned_isab_is_equivariant(seed in any::<u64>(), n in 1usize..40, m in 1usize..6, kind in kinds()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let isab = Isab::learned(&mut store, "isab", 8, 4, m, kind, &mut rng).unwrap();
        let x = random(n, 8, &mut rng);
        let p = perm(n, &mut rng);
        let out = run(&mut store, std::slice::from_ref(&x), None, |s, v| isab.forward(s, v[0]).unwrap());
        let out_p = run(&mut store, &[x.select_rows(&p)], None, |s, v| isab.forward(s, v[0]).unwrap());
        assert_permuted(&out, &out_p, &p)?;
    }

    #[test]
    fn fps_isab_is_equivariant_when_the_first_pick_follows(seed in any::<u64>(), n in 2usize..40) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let isab = Isab::fps(&mut store, "isab", 8, 2, 0.2, 3, &mut rng).unwrap();
        let x = random(n, 8, &mut rng);
        let p = perm(n, &mut rng);
        let first = rng.gen_range(0..n);
        let first_p = p.iter().position(|&old| old == first).unwrap();
        let out = run(&mut store, std::slice::from_ref(&x), Some(first), |s, v| isab.forward(s, v[0]).unwrap());
        let out_p = run(&mut store, &[x.select_rows(&p)], Some(first_p), |s, v| isab.forward(s, v[0]).unwrap());
        assert_permuted(&out, &out_p, &p)?;
    }

    #[test]
    fn relu_linear_attention_is_equivariant(seed in any::<u64>(), n in 1usize..64, d in 1usize..9) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (q, k, v) = (random(n, d, &mut rng), random(n, d, &mut rng), random(n, d, &mut rng));
        let p = perm(n, &mut rng);
        let out = eval_relu_attention(&q, &k, &v);
        let out_p = eval_relu_attention(&q.select_rows(&p), &k.select_rows(&p), &v.select_rows(&p));
        assert_permuted(&out, &out_p, &p)?;
    }

    #[test]
    fn gnn_layers_are_equivariant(seed in any::<u64>(), n in 4usize..40, k in 1usize..4, which in 0usize..3) {
        let kind = [GnnKind::Gcn, GnnKind::Gat, GnnKind::Gin][which];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let layer = GnnLayer::new(&mut store, "gnn", kind, 6, 8, 0.2, &mut rng).unwrap();
        let x = random(n, 6, &mut rng);
        let p = perm(n, &mut rng);
        let xp = x.select_rows(&p);
        let g = MessageGraph::from_knn(&knn_graph(&x, k).unwrap());
        let gp = MessageGraph::from_knn(&knn_graph(&xp, k).unwrap());
        let out = run(&mut store, &[x], None, |s, v| layer.forward(s, v[0], &g).unwrap());
        let out_p = run(&mut store, &[xp], None, |s, v| layer.forward(s, v[0], &gp).unwrap());
        assert_permuted(&out, &out_p, &p)?;
    }
}
