//! Greedy neuron swaps that lower the total connection cost.

use ndarray::linalg::general_mat_mul;
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::adam::Adam;
use super::loss::local_penalty_with;
use crate::model::GeomMlp;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SwapEvent {
    pub step: usize,
    pub layer: usize,
    pub neuron_a: usize,
    pub neuron_b: usize,
    pub cost_before: f64,
    pub cost_after: f64,
}

/// Minimum full-recomputation improvement for a swap to be committed.
pub const MIN_IMPROVEMENT: f64 = 1e-12;

/// Sum of incoming and outgoing absolute weights of each neuron in hidden
/// layer `layer`.
pub fn importance(model: &GeomMlp, layer: usize) -> Vec<f64> {
    let w_in = &model.weights()[layer - 1];
    let w_out = &model.weights()[layer];
    (0..model.spec().widths[layer])
        .map(|i| {
            w_in.row(i).iter().map(|v| v.abs()).sum::<f64>() + w_out.column(i).iter().map(|v| v.abs()).sum::<f64>()
        })
        .collect()
}

/// Number of swap candidates per layer of the given width.
pub fn candidates_per_layer(width: usize) -> usize {
    (width / 5).max(1)
}

/// `table[[i, p]]` = connection cost of the neuron now at index `i` if it sat
/// at position `p` of its layer (bias terms excluded; they do not depend on
/// position).
fn placement_costs(model: &GeomMlp, dists: &[Array2<f64>], layer: usize) -> Array2<f64> {
    let n = model.spec().widths[layer];
    let abs_in = model.weights()[layer - 1].mapv(f64::abs);
    let abs_out = model.weights()[layer].mapv(f64::abs);
    let mut table = Array2::zeros((n, n));
    // incoming: sum_j |w_in[i, j]| * d_in[p, j]
    general_mat_mul(1.0, &abs_in, &dists[layer - 1].t(), 0.0, &mut table);
    // outgoing: sum_k |w_out[k, i]| * d_out[k, p]
    general_mat_mul(1.0, &abs_out.t(), &dists[layer], 1.0, &mut table);
    table
}

/// One swap pass over every hidden layer. Candidates are the top
/// `width / 5` neurons by importance, visited in descending order (ties to the
/// lower index). For each, the exchange with every other neuron in the layer
/// is scored exactly and the best one is committed when a full recomputation
/// of the connection cost confirms a strict decrease. Optimizer moments are
/// permuted alongside the parameters.
pub fn swap_step(
    model: &mut GeomMlp,
    mut optimizer: Option<&mut Adam>,
    dists: &[Array2<f64>],
    step: usize,
) -> Vec<SwapEvent> {
    let mut events = Vec::new();
    let mut cost = local_penalty_with(model, dists);
    for layer in model.spec().hidden_layers() {
        let n = model.spec().widths[layer];
        let imp = importance(model, layer);
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| imp[b].total_cmp(&imp[a]).then(a.cmp(&b)));
        // Current index of each candidate; updated as swaps move them.
        let mut candidates: Vec<usize> = order[..candidates_per_layer(n)].to_vec();
        let mut table = placement_costs(model, dists, layer);

        for c in 0..candidates.len() {
            let a = candidates[c];
            let mut best: Option<(usize, f64)> = None;
            for b in 0..n {
                if b == a {
                    continue;
                }
                let delta = table[[a, b]] + table[[b, a]] - table[[a, a]] - table[[b, b]];
                if delta < 0.0 && best.map_or(true, |(_, d)| delta < d) {
                    best = Some((b, delta));
                }
            }
            let Some((b, _)) = best else { continue };

            model.swap_neurons(layer, a, b);
            let after = local_penalty_with(model, dists);
            if after < cost - MIN_IMPROVEMENT {
                if let Some(opt) = optimizer.as_deref_mut() {
                    opt.swap_neurons(layer, a, b);
                }
                swap_table_rows(&mut table, a, b);
                for idx in candidates.iter_mut() {
                    if *idx == a {
                        *idx = b;
                    } else if *idx == b {
                        *idx = a;
                    }
                }
                events.push(SwapEvent {
                    step,
                    layer,
                    neuron_a: a,
                    neuron_b: b,
                    cost_before: cost,
                    cost_after: after,
                });
                cost = after;
            } else {
                model.swap_neurons(layer, a, b);
            }
        }
    }
    events
}

fn swap_table_rows(t: &mut Array2<f64>, a: usize, b: usize) {
    crate::model::swap_rows(t, a, b);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Activation, LayerSpec};
    use crate::rng::SplitMix64;
    use crate::train::loss::connection_cost;
    use ndarray::array;

    #[test]
    fn already_optimal_model_is_untouched() {
        // Straight vertical wiring: neuron i only connects to neuron i above
        // and below, which is the shortest possible placement.
        let spec = LayerSpec::new(vec![3, 3, 3], 1.0).unwrap();
        let eye = array![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        let mut m = GeomMlp::from_parts(spec.clone(), Activation::Silu, vec![eye.clone(), eye], vec![array![0.1, 0.2, 0.3], array![0.0, 0.0, 0.0]]).unwrap();
        let before = m.clone();
        let events = swap_step(&mut m, None, &spec.distance_matrices(), 0);
        assert!(events.is_empty());
        assert_eq!(m, before);
    }

    #[test]
    fn crossed_pair_is_uncrossed() {
        // 2-2-2: hidden neuron 0 is wired to input/output 1 and vice versa.
        // Exchanging the two hidden neurons straightens both paths.
        let spec = LayerSpec::new(vec![2, 2, 2], 1.0).unwrap();
        let anti = array![[0.0, 1.0], [1.0, 0.0]];
        let mut m = GeomMlp::from_parts(spec.clone(), Activation::Silu, vec![anti.clone(), anti], vec![array![0.0, 0.0], array![0.0, 0.0]]).unwrap();
        let dists = spec.distance_matrices();
        let before_cost = connection_cost(&m);
        let events = swap_step(&mut m, None, &dists, 7);
        assert_eq!(events.len(), 1);
        let e = &events[0];
        assert_eq!((e.step, e.layer, e.neuron_a, e.neuron_b), (7, 1, 0, 1));
        // Oracle: before = 4 diagonal links of length sqrt(1 + .25), after = 4 vertical links of length 1.
        assert!((before_cost - 4.0 * 1.25f64.sqrt()).abs() < 1e-12);
        assert_eq!(e.cost_before, before_cost);
        assert!((e.cost_after - 4.0).abs() < 1e-12);
        assert_eq!(e.cost_after, connection_cost(&m));
    }

    /// Exhaustive oracle: for a single hidden layer, try every transposition
    /// and compare the best achievable cost with the greedy result.
    #[test]
    fn single_improving_transposition_matches_enumeration() {
        let spec = LayerSpec::new(vec![3, 5, 2], 1.0).unwrap();
        let mut rng = SplitMix64::new(12);
        let mut w0 = Array2::zeros((5, 3));
        let mut w1 = Array2::zeros((2, 5));
        // Only neuron 4 is connected; it belongs near the left edge.
        w0[[4, 0]] = 3.0 + rng.next_f64();
        w1[[0, 4]] = 2.0 + rng.next_f64();
        let m0 = GeomMlp::from_parts(spec.clone(), Activation::Silu, vec![w0, w1], vec![ndarray::Array1::zeros(5), ndarray::Array1::zeros(2)]).unwrap();
        let mut best = (connection_cost(&m0), usize::MAX, usize::MAX);
        for a in 0..5 {
            for b in a + 1..5 {
                let mut t = m0.clone();
                t.swap_neurons(1, a, b);
                let c = connection_cost(&t);
                if c < best.0 {
                    best = (c, a, b);
                }
            }
        }
        let mut m = m0.clone();
        let events = swap_step(&mut m, None, &spec.distance_matrices(), 0);
        assert_eq!(events.len(), 1);
        let e = &events[0];
        assert_eq!((e.neuron_a.min(e.neuron_b), e.neuron_a.max(e.neuron_b)), (best.1, best.2));
        assert!((e.cost_after - best.0).abs() < 1e-12);
    }

    #[test]
    fn random_model_swaps_preserve_function_and_reduce_cost() {
        let spec = LayerSpec::new(vec![12, 10, 10, 4], 1.0).unwrap();
        let mut rng = SplitMix64::new(21);
        let mut m = GeomMlp::init_uniform(spec.clone(), Activation::Silu, &mut rng).unwrap();
        let probes: Vec<Vec<f64>> = (0..20).map(|_| (0..12).map(|_| rng.next_f64()).collect()).collect();
        let before: Vec<Vec<f64>> = probes.iter().map(|x| m.forward(x).unwrap()).collect();
        let mut opt = Adam::new(&m, 1e-3);
        let events = swap_step(&mut m, Some(&mut opt), &spec.distance_matrices(), 3);
        assert!(!events.is_empty());
        for e in &events {
            assert!(e.cost_after <= e.cost_before - MIN_IMPROVEMENT);
        }
        for w in events.windows(2) {
            assert_eq!(w[0].cost_after, w[1].cost_before);
        }
        for (x, y0) in probes.iter().zip(&before) {
            let y1 = m.forward(x).unwrap();
            let diff = y0.iter().zip(&y1).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(diff <= 1e-9);
        }
    }
}
