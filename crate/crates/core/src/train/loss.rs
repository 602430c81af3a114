//! Objectives and their reverse-mode gradients.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, Axis};

use super::RegimeConfig;
use crate::data::ImageSample;
use crate::model::GeomMlp;

/// A row-major minibatch: one input per row.
#[derive(Debug, Clone)]
pub struct Batch {
    pub inputs: Array2<f64>,
    pub labels: Vec<u8>,
}

impl Batch {
    pub fn from_samples<'a, I>(samples: I) -> Self
    where
        I: IntoIterator<Item = &'a ImageSample>,
    {
        let samples: Vec<&ImageSample> = samples.into_iter().collect();
        let dim = samples.first().map_or(0, |s| s.pixels.len());
        let mut inputs = Array2::zeros((samples.len(), dim));
        for (mut row, s) in inputs.rows_mut().into_iter().zip(&samples) {
            row.assign(&ndarray::ArrayView1::from(&s.pixels[..]));
        }
        Self {
            inputs,
            labels: samples.iter().map(|s| s.label).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Overwrite this batch in place with the given samples (same size).
    pub(crate) fn fill<'a>(&mut self, samples: impl Iterator<Item = &'a ImageSample>) {
        for (i, s) in samples.enumerate() {
            self.inputs
                .row_mut(i)
                .assign(&ndarray::ArrayView1::from(&s.pixels[..]));
            self.labels[i] = s.label;
        }
    }
}

/// Per-parameter gradient blocks, shaped like the model.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
}

impl Gradients {
    pub fn zeros_like(model: &GeomMlp) -> Self {
        Self {
            weights: model.weights().iter().map(|w| Array2::zeros(w.dim())).collect(),
            biases: model.biases().iter().map(|b| Array1::zeros(b.len())).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.weights.iter().all(|w| w.iter().all(|v| v.is_finite()))
            && self.biases.iter().all(|b| b.iter().all(|v| v.is_finite()))
    }
}

/// Buffers reused by every batched pass of a given batch size.
#[derive(Debug)]
pub struct Workspace {
    /// Pre-activations per gap, `batch x widths[g+1]`.
    zs: Vec<Array2<f64>>,
    /// Post-activations per layer, `batch x widths[l]` (index 0 is the input).
    acts: Vec<Array2<f64>>,
    deltas: Vec<Array2<f64>>,
    pub grads: Gradients,
}

impl Workspace {
    pub fn new(model: &GeomMlp, batch_size: usize) -> Self {
        let w = &model.spec().widths;
        Self {
            zs: w[1..].iter().map(|&n| Array2::zeros((batch_size, n))).collect(),
            acts: w.iter().map(|&n| Array2::zeros((batch_size, n))).collect(),
            deltas: w[1..].iter().map(|&n| Array2::zeros((batch_size, n))).collect(),
            grads: Gradients::zeros_like(model),
        }
    }

    fn fits(&self, batch: &Batch) -> bool {
        self.acts[0].dim() == batch.inputs.dim()
    }

    /// Batched forward pass; fills `zs` and `acts` and returns the logits.
    fn forward(&mut self, model: &GeomMlp, batch: &Batch) -> &Array2<f64> {
        let act = model.activation();
        let n_gaps = model.weights().len();
        self.acts[0].assign(&batch.inputs);
        for g in 0..n_gaps {
            let z = &mut self.zs[g];
            let dim = z.dim();
            z.assign(&model.biases()[g].broadcast(dim).unwrap());
            general_mat_mul(1.0, &self.acts[g], &model.weights()[g].t(), 1.0, z);
            let out = &mut self.acts[g + 1];
            if g + 1 == n_gaps {
                out.assign(z);
            } else {
                ndarray::Zip::from(out).and(&*z).for_each(|a, &zv| *a = act.apply(zv));
            }
        }
        &self.acts[n_gaps]
    }
}

/// Mean cross-entropy of `softmax(logits)` and the gradient of that mean
/// with respect to the logits (written into `dlogits` when given).
fn cross_entropy(logits: &Array2<f64>, labels: &[u8], mut dlogits: Option<&mut Array2<f64>>) -> f64 {
    let n = labels.len() as f64;
    let mut total = 0.0;
    for (i, row) in logits.rows().into_iter().enumerate() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|&z| (z - max).exp()).sum();
        let lse = max + sum.ln();
        let y = labels[i] as usize;
        total += lse - row[y];
        if let Some(d) = dlogits.as_deref_mut() {
            for (k, &z) in row.iter().enumerate() {
                let p = (z - lse).exp();
                d[[i, k]] = (p - if k == y { 1.0 } else { 0.0 }) / n;
            }
        }
    }
    total / n
}

/// Mean cross-entropy of the model's softmax output against the labels.
pub fn prediction_loss(model: &GeomMlp, batch: &Batch) -> f64 {
    assert!(!batch.is_empty(), "prediction loss of an empty batch");
    let mut ws = Workspace::new(model, batch.len());
    let logits = ws.forward(model, batch).clone();
    cross_entropy(&logits, &batch.labels, None)
}

/// Fraction of rows whose argmax logit equals the label (first max wins).
pub fn batch_accuracy(model: &GeomMlp, batch: &Batch) -> f64 {
    let mut ws = Workspace::new(model, batch.len());
    let logits = ws.forward(model, batch);
    let correct = logits
        .rows()
        .into_iter()
        .zip(&batch.labels)
        .filter(|(row, &y)| argmax(row.iter().copied()) == y as usize)
        .count();
    correct as f64 / batch.len() as f64
}

pub(crate) fn argmax(values: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in values.enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

/// Sum of absolute weights and biases.
pub fn l1_penalty(model: &GeomMlp) -> f64 {
    let w: f64 = model.weights().iter().map(|w| w.iter().map(|v| v.abs()).sum::<f64>()).sum();
    let b: f64 = model.biases().iter().map(|b| b.iter().map(|v| v.abs()).sum::<f64>()).sum();
    w + b
}

/// Distance-weighted L1: every weight is scaled by the Euclidean length of
/// its connection and every bias by the layer spacing.
pub fn local_penalty(model: &GeomMlp) -> f64 {
    let dists = model.spec().distance_matrices();
    local_penalty_with(model, &dists)
}

pub(crate) fn local_penalty_with(model: &GeomMlp, dists: &[Array2<f64>]) -> f64 {
    let spacing = model.spec().layer_spacing;
    let mut total = 0.0;
    for (w, d) in model.weights().iter().zip(dists) {
        total += ndarray::Zip::from(w).and(d).fold(0.0, |acc, &wv, &dv| acc + dv * wv.abs());
    }
    for b in model.biases() {
        total += b.iter().map(|v| spacing * v.abs()).sum::<f64>();
    }
    total
}

/// Total connection cost: the quantity neuron swaps reduce.
pub fn connection_cost(model: &GeomMlp) -> f64 {
    local_penalty(model)
}

/// Unweighted penalty selected by the regime (0 for vanilla).
pub fn regime_penalty(model: &GeomMlp, cfg: &RegimeConfig) -> f64 {
    if !cfg.regime.penalized() {
        0.0
    } else if cfg.regime.distance_weighted() {
        local_penalty(model)
    } else {
        l1_penalty(model)
    }
}

pub fn total_loss(model: &GeomMlp, batch: &Batch, cfg: &RegimeConfig) -> f64 {
    let pred = prediction_loss(model, batch);
    if !cfg.regime.penalized() {
        return pred;
    }
    pred + cfg.effective_lambda() * regime_penalty(model, cfg)
}

#[inline]
fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Loss and gradient of `total_loss` by a reverse sweep over the layers.
/// Returns `(prediction_loss, lambda * penalty)`; gradients land in
/// `ws.grads`. `dists` are required for distance-weighted regimes.
pub fn loss_and_gradient(
    model: &GeomMlp,
    batch: &Batch,
    cfg: &RegimeConfig,
    dists: Option<&[Array2<f64>]>,
    ws: &mut Workspace,
) -> (f64, f64) {
    if !ws.fits(batch) {
        *ws = Workspace::new(model, batch.len());
    }
    let act = model.activation();
    let n_gaps = model.weights().len();
    ws.forward(model, batch);

    let pred = {
        let (acts, deltas) = (&ws.acts, &mut ws.deltas);
        cross_entropy(&acts[n_gaps], &batch.labels, Some(&mut deltas[n_gaps - 1]))
    };

    for g in (0..n_gaps).rev() {
        general_mat_mul(1.0, &ws.deltas[g].t(), &ws.acts[g], 0.0, &mut ws.grads.weights[g]);
        ws.grads.biases[g] = ws.deltas[g].sum_axis(Axis(0));
        if g > 0 {
            let (below, above) = ws.deltas.split_at_mut(g);
            let d_prev = &mut below[g - 1];
            general_mat_mul(1.0, &above[0], &model.weights()[g], 0.0, d_prev);
            ndarray::Zip::from(d_prev)
                .and(&ws.zs[g - 1])
                .for_each(|d, &z| *d *= act.derivative(z));
        }
    }

    let lambda = cfg.effective_lambda();
    if !cfg.regime.penalized() || lambda == 0.0 {
        return (pred, 0.0);
    }
    let penalty = if cfg.regime.distance_weighted() {
        let dists = dists.expect("distance matrices required for a local regime");
        let spacing = model.spec().layer_spacing;
        for g in 0..n_gaps {
            ndarray::Zip::from(&mut ws.grads.weights[g])
                .and(&model.weights()[g])
                .and(&dists[g])
                .for_each(|gw, &w, &d| *gw += lambda * d * sign(w));
            ndarray::Zip::from(&mut ws.grads.biases[g])
                .and(&model.biases()[g])
                .for_each(|gb, &b| *gb += lambda * spacing * sign(b));
        }
        local_penalty_with(model, dists)
    } else {
        for g in 0..n_gaps {
            ndarray::Zip::from(&mut ws.grads.weights[g])
                .and(&model.weights()[g])
                .for_each(|gw, &w| *gw += lambda * sign(w));
            ndarray::Zip::from(&mut ws.grads.biases[g])
                .and(&model.biases()[g])
                .for_each(|gb, &b| *gb += lambda * sign(b));
        }
        l1_penalty(model)
    };
    (pred, lambda * penalty)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Activation, LayerSpec};
    use crate::rng::SplitMix64;
    use crate::train::Regime;
    use ndarray::array;

    fn sample(pixels: Vec<f64>, label: u8) -> ImageSample {
        ImageSample { pixels, label }
    }

    #[test]
    fn zero_model_loss_is_ln_classes() {
        let m = GeomMlp::zeros(LayerSpec::default(), Activation::Silu).unwrap();
        let b = Batch::from_samples(&[sample(vec![0.3; 784], 4), sample(vec![0.9; 784], 7)]);
        assert!((prediction_loss(&m, &b) - 10f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn large_margin_loss_vanishes() {
        // 1-1-2 ReLU model: logits = (0, 100 * relu(x)).
        let spec = LayerSpec::new(vec![1, 1, 2], 1.0).unwrap();
        let m = GeomMlp::from_parts(spec, Activation::Relu, vec![array![[1.0]], array![[0.0], [100.0]]], vec![array![0.0], array![0.0, 0.0]]).unwrap();
        let b = Batch::from_samples(&[sample(vec![1.0], 1)]);
        assert!(prediction_loss(&m, &b) < 1e-40);
    }

    #[test]
    fn three_sample_toy_matches_hand_value() {
        // 2-1-3 ReLU: h = relu(x0 + x1), logits = (h, 2h, -h) + (0, -1, 0.5)
        let spec = LayerSpec::new(vec![2, 1, 3], 1.0).unwrap();
        let m = GeomMlp::from_parts(
            spec,
            Activation::Relu,
            vec![array![[1.0, 1.0]], array![[1.0], [2.0], [-1.0]]],
            vec![array![0.0], array![0.0, -1.0, 0.5]],
        )
        .unwrap();
        let b = Batch::from_samples(&[sample(vec![0.0, 0.0], 0), sample(vec![0.5, 0.5], 1), sample(vec![1.0, 1.0], 2)]);
        // h = 0, 1, 2 -> logits (0,-1,.5), (1,1,-.5), (2,3,-1.5)
        let ce = |z: [f64; 3], y: usize| -> f64 { z.iter().map(|v| v.exp()).sum::<f64>().ln() - z[y] };
        let hand = (ce([0.0, -1.0, 0.5], 0) + ce([1.0, 1.0, -0.5], 1) + ce([2.0, 3.0, -1.5], 2)) / 3.0;
        assert!((hand - 2.241_465_668_135_822).abs() < 1e-12, "hand value {hand}");
        assert!((prediction_loss(&m, &b) - hand).abs() < 1e-12);
    }

    #[test]
    fn penalty_definitions() {
        let spec = LayerSpec::new(vec![1, 1, 1], 1.0).unwrap();
        let m = GeomMlp::from_parts(spec.clone(), Activation::Silu, vec![array![[-2.0]], array![[0.0]]], vec![array![0.0], array![0.0]]).unwrap();
        assert_eq!(l1_penalty(&m), 2.0);
        let z = GeomMlp::zeros(LayerSpec::default(), Activation::Silu).unwrap();
        assert_eq!(l1_penalty(&z), 0.0);
        assert_eq!(local_penalty(&z), 0.0);
        assert_eq!(connection_cost(&z), 0.0);

        // Single connection of length 1.25: layer 0 width 1 (x = .5), layer 1
        // width 2 neuron 1 (x = .75), spacing sqrt(1.25^2 - .25^2).
        let spacing = (1.25f64 * 1.25 - 0.0625).sqrt();
        let spec = LayerSpec::new(vec![1, 2, 1], spacing).unwrap();
        let m = GeomMlp::from_parts(
            spec,
            Activation::Silu,
            vec![array![[0.0], [2.0]], array![[0.0, 0.0]]],
            vec![array![0.0, 0.0], array![0.0]],
        )
        .unwrap();
        assert!((local_penalty(&m) - 2.5).abs() < 1e-12);
    }

    #[test]
    fn vanilla_total_is_prediction_loss_exactly() {
        let mut rng = SplitMix64::new(4);
        let m = GeomMlp::init_uniform(LayerSpec::new(vec![4, 3, 2], 1.0).unwrap(), Activation::Silu, &mut rng).unwrap();
        let b = Batch::from_samples(&[sample(vec![0.1, 0.2, 0.3, 0.4], 1), sample(vec![0.9, 0.0, 0.5, 0.4], 0)]);
        let pred = prediction_loss(&m, &b);
        for regime in Regime::ALL {
            let cfg = RegimeConfig { regime, lambda: 0.0, ..RegimeConfig::default() };
            assert_eq!(total_loss(&m, &b, &cfg), pred);
        }
        let vanilla = RegimeConfig { regime: Regime::Vanilla, lambda: 5.0, ..RegimeConfig::default() };
        assert_eq!(total_loss(&m, &b, &vanilla), pred);
        let bimt = RegimeConfig { regime: Regime::Bimt, ..RegimeConfig::default() };
        assert_eq!(total_loss(&m, &b, &bimt), pred + 1e-3 * local_penalty(&m));
    }

    #[test]
    fn zero_gradient_at_stationary_toy() {
        // Zero weights, two samples with opposite labels and identical inputs:
        // logits are equal and the mean softmax error is zero.
        let spec = LayerSpec::new(vec![1, 1, 2], 1.0).unwrap();
        let m = GeomMlp::zeros(spec, Activation::Silu).unwrap();
        let b = Batch::from_samples(&[sample(vec![0.5], 0), sample(vec![0.5], 1)]);
        let cfg = RegimeConfig { regime: Regime::L1, lambda: 0.0, ..RegimeConfig::default() };
        let mut ws = Workspace::new(&m, 2);
        loss_and_gradient(&m, &b, &cfg, None, &mut ws);
        assert!(ws.grads.weights.iter().all(|w| w.iter().all(|&v| v == 0.0)));
        assert!(ws.grads.biases.iter().all(|w| w.iter().all(|&v| v == 0.0)));
    }
}
