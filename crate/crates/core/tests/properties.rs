use circuitforge::discovery::{extract_circuit, select_top_k, LogitDiffTable};
use circuitforge::eval::BootstrapResult;
use circuitforge::{Activation, BootstrapPlan, GeomMlp, LayerSpec, SplitMix64};
use proptest::prelude::*;

fn model(widths: Vec<usize>, seed: u64) -> GeomMlp {
    GeomMlp::init_uniform(LayerSpec::new(widths, 1.0).unwrap(), Activation::Silu, &mut SplitMix64::new(seed)).unwrap()
}

fn widths() -> impl Strategy<Value = Vec<usize>> {
    (1usize..7, prop::collection::vec(1usize..9, 1..4), 1usize..5).prop_map(|(i, h, o)| {
        let mut w = vec![i];
        w.extend(h);
        w.push(o);
        w
    })
}

fn keep_subsets(m: &GeomMlp, bits: &[u64]) -> Vec<Vec<usize>> {
    m.spec()
        .hidden_widths()
        .iter()
        .zip(bits)
        .map(|(&w, &b)| (0..w).filter(|i| b >> i & 1 == 1).collect())
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn growing_keep_sets_only_add_edges(w in widths(), seed in any::<u64>(), a in prop::collection::vec(any::<u64>(), 3), b in prop::collection::vec(any::<u64>(), 3)) {
        let m = model(w, seed);
        let small = keep_subsets(&m, &a.iter().zip(&b).map(|(x, y)| x & y).collect::<Vec<_>>());
        let large = keep_subsets(&m, &a);
        let cs = extract_circuit(&m, &small, 1, 0.0).unwrap();
        let cl = extract_circuit(&m, &large, 1, 0.0).unwrap();
        prop_assert!(cs.edges.iter().all(|e| cl.edges.binary_search(e).is_ok()));
        prop_assert!(cs.sparsity() >= cl.sparsity());
    }

    #[test]
    fn sparsity_monotone_in_epsilon(w in widths(), seed in any::<u64>(), e1 in 0.0f64..1.0, e2 in 0.0f64..1.0) {
        let m = model(w, seed);
        let all: Vec<Vec<usize>> = m.spec().hidden_widths().iter().map(|&n| (0..n).collect()).collect();
        let (lo, hi) = (e1.min(e2), e1.max(e2));
        let a = extract_circuit(&m, &all, 1, lo).unwrap();
        let b = extract_circuit(&m, &all, 1, hi).unwrap();
        prop_assert!(b.sparsity() >= a.sparsity());
        prop_assert!((0.0..=1.0).contains(&a.sparsity()));
    }

    #[test]
    fn sparsity_monotone_in_k(w in widths(), seed in any::<u64>(), k in 1usize..8) {
        let m = model(w, seed);
        let mut rng = SplitMix64::new(seed ^ 1);
        let table = LogitDiffTable {
            scores: m.spec().hidden_widths().iter().map(|&n| (0..n).map(|_| rng.below(4) as f64).collect()).collect(),
            n_pairs: 1,
        };
        let a = extract_circuit(&m, &select_top_k(&table, k), k, 1e-4).unwrap();
        let b = extract_circuit(&m, &select_top_k(&table, k + 1), k + 1, 1e-4).unwrap();
        prop_assert!(a.sparsity() >= b.sparsity());
    }

    #[test]
    fn top_k_picks_the_smallest_scores(scores in prop::collection::vec(0u8..5, 1..20), k in 1usize..25, rot in 0usize..20) {
        let layer: Vec<f64> = scores.iter().map(|&s| s as f64).collect();
        let pick = |l: &[f64]| -> Vec<f64> {
            let t = LogitDiffTable { scores: vec![l.to_vec()], n_pairs: 1 };
            let mut v: Vec<f64> = select_top_k(&t, k)[0].iter().map(|&i| l[i]).collect();
            v.sort_by(f64::total_cmp);
            v
        };
        let mut sorted = layer.clone();
        sorted.sort_by(f64::total_cmp);
        sorted.truncate(k);
        prop_assert_eq!(pick(&layer), sorted.clone());
        // Reordering neurons changes which indices win ties, never the
        // selected score multiset.
        let mut rotated = layer.clone();
        rotated.rotate_left(rot % layer.len());
        prop_assert_eq!(pick(&rotated), sorted);
        // Ties go to the lower index.
        let t = LogitDiffTable { scores: vec![layer.clone()], n_pairs: 1 };
        let sel = &select_top_k(&t, k)[0];
        for i in 0..layer.len() {
            for &j in sel {
                if !sel.contains(&i) {
                    prop_assert!(layer[j] < layer[i] || (layer[j] == layer[i] && j < i));
                }
            }
        }
    }

    #[test]
    fn bootstrap_draws_are_deterministic(n in 1usize..500, size in 2usize..300, seed in any::<u64>(), r in 0usize..10) {
        let plan = BootstrapPlan::new(10, size, seed).unwrap();
        let a = plan.draw(&[n, n + 3], r);
        prop_assert_eq!(&a, &plan.draw(&[n, n + 3], r));
        prop_assert!(a[0].iter().all(|&i| i < n) && a[1].iter().all(|&i| i < n + 3));
        prop_assert_eq!(a[0].len(), size);
    }

    #[test]
    fn percentile_ci_brackets_the_mean(values in prop::collection::vec(-1e6f64..1e6, 1..80)) {
        let b = BootstrapResult::from_values(&values, 2).unwrap();
        prop_assert!(b.ci_low <= b.mean && b.mean <= b.ci_high);
    }

    #[test]
    fn swaps_preserve_outputs(w in widths(), seed in any::<u64>(), a in 0usize..8, b in 0usize..8) {
        let mut m = model(w, seed);
        let x: Vec<f64> = { let mut r = SplitMix64::new(seed); (0..m.spec().widths[0]).map(|_| r.next_f64()).collect() };
        let before = m.forward(&x).unwrap();
        let layer = 1;
        let n = m.spec().widths[layer];
        m.swap_neurons(layer, a % n, b % n);
        let after = m.forward(&x).unwrap();
        for (p, q) in before.iter().zip(&after) {
            prop_assert!((p - q).abs() <= 1e-12);
        }
    }

    #[test]
    fn model_bytes_round_trip(w in widths(), seed in any::<u64>()) {
        let m = model(w, seed);
        let back = GeomMlp::from_bytes(&m.to_bytes()).unwrap();
        prop_assert_eq!(back.to_bytes(), m.to_bytes());
    }
}
