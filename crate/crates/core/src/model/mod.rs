//! Feed-forward network whose neurons sit on a fixed 2-D grid.
//!
//! Neuron `i` of layer `l` (width `n`) lives at `((i + 0.5) / n, l * spacing)`.
//! Swaps exchange the parameters attached to two neurons, so index and grid
//! position always coincide and the coordinates never move.
//!
//! Single-sample passes (`forward`, `forward_traced`, `forward_patched`,
//! `forward_masked`) share one arithmetic path: each pre-activation is the
//! left-to-right sum of `w[k][i] * x[i]` followed by `+ b[k]`. Patching and
//! tracing are therefore bit-consistent with the plain pass.

mod io;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SplitMix64;

pub use io::{MODEL_MAGIC, MODEL_VERSION};

pub const MNIST_INPUT: usize = 784;
pub const MNIST_CLASSES: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub widths: Vec<usize>,
    pub layer_spacing: f64,
}

impl Default for LayerSpec {
    fn default() -> Self {
        Self {
            widths: vec![MNIST_INPUT, 100, 100, MNIST_CLASSES],
            layer_spacing: 1.0,
        }
    }
}

impl LayerSpec {
    pub fn new(widths: Vec<usize>, layer_spacing: f64) -> Result<Self> {
        let spec = Self {
            widths,
            layer_spacing,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.len() < 3 {
            return Err(Error::Config(format!(
                "need at least one hidden layer, got widths {:?}",
                self.widths
            )));
        }
        if self.widths.iter().any(|&w| w == 0) {
            return Err(Error::Config(format!("zero width in {:?}", self.widths)));
        }
        if !(self.layer_spacing.is_finite() && self.layer_spacing > 0.0) {
            return Err(Error::Config(format!(
                "layer spacing must be positive, got {}",
                self.layer_spacing
            )));
        }
        Ok(())
    }

    /// Widths as required for the MNIST task: 784 inputs, 10 outputs.
    pub fn validate_mnist(&self) -> Result<()> {
        self.validate()?;
        if self.widths[0] != MNIST_INPUT || *self.widths.last().unwrap() != MNIST_CLASSES {
            return Err(Error::Config(format!(
                "MNIST widths must start at {MNIST_INPUT} and end at {MNIST_CLASSES}, got {:?}",
                self.widths
            )));
        }
        Ok(())
    }

    /// Number of weight matrices.
    pub fn n_gaps(&self) -> usize {
        self.widths.len() - 1
    }

    /// Hidden layer indices `1..=L-1`.
    pub fn hidden_layers(&self) -> std::ops::Range<usize> {
        1..self.widths.len() - 1
    }

    pub fn hidden_widths(&self) -> &[usize] {
        &self.widths[1..self.widths.len() - 1]
    }

    /// Total number of possible edges (dense weight entries).
    pub fn total_edges(&self) -> usize {
        self.widths.windows(2).map(|w| w[0] * w[1]).sum()
    }

    pub fn parameter_count(&self) -> usize {
        self.total_edges() + self.widths[1..].iter().sum::<usize>()
    }

    pub fn coord(&self, layer: usize, neuron: usize) -> NeuronCoord {
        NeuronCoord {
            x: (neuron as f64 + 0.5) / self.widths[layer] as f64,
            y: layer as f64 * self.layer_spacing,
        }
    }

    pub fn grid(&self) -> Vec<Vec<NeuronCoord>> {
        self.widths
            .iter()
            .enumerate()
            .map(|(l, &w)| (0..w).map(|i| self.coord(l, i)).collect())
            .collect()
    }

    /// Euclidean distance matrices, one per gap, shaped like the weights
    /// (`widths[l+1] x widths[l]`).
    pub fn distance_matrices(&self) -> Vec<Array2<f64>> {
        (0..self.n_gaps())
            .map(|g| {
                Array2::from_shape_fn((self.widths[g + 1], self.widths[g]), |(to, from)| {
                    self.coord(g + 1, to).distance(&self.coord(g, from))
                })
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NeuronCoord {
    pub x: f64,
    pub y: f64,
}

impl NeuronCoord {
    pub fn distance(&self, other: &NeuronCoord) -> f64 {
        let dx = self.x - other.x;
        let dy = self.y - other.y;
        (dx * dx + dy * dy).sqrt()
    }
}

/// Hidden-layer nonlinearity. The output layer is always linear.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Silu,
    Relu,
    Tanh,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Silu => x / (1.0 + (-x).exp()),
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative with respect to the pre-activation.
    #[inline]
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Silu => {
                let s = 1.0 / (1.0 + (-x).exp());
                s * (1.0 + x * (1.0 - s))
            }
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
        }
    }

    pub(crate) fn tag(self) -> u32 {
        match self {
            Activation::Silu => 0,
            Activation::Relu => 1,
            Activation::Tanh => 2,
        }
    }

    pub(crate) fn from_tag(tag: u32) -> Option<Self> {
        match tag {
            0 => Some(Activation::Silu),
            1 => Some(Activation::Relu),
            2 => Some(Activation::Tanh),
            _ => None,
        }
    }
}

impl std::fmt::Display for Activation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Activation::Silu => "silu",
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
        })
    }
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "silu" => Ok(Activation::Silu),
            "relu" => Ok(Activation::Relu),
            "tanh" => Ok(Activation::Tanh),
            other => Err(Error::Config(format!("unknown activation {other:?}"))),
        }
    }
}

/// Post-activation values of one pass: `layers[0]` is the input and
/// `layers[L]` the raw logits.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationTrace {
    pub layers: Vec<Vec<f64>>,
}

impl ActivationTrace {
    pub fn logits(&self) -> &[f64] {
        self.layers.last().expect("trace is never empty")
    }

    pub fn get(&self, site: PatchSite) -> f64 {
        self.layers[site.layer][site.neuron]
    }
}

/// A hidden neuron addressed by trace layer index (`1..=L-1`) and position.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PatchSite {
    pub layer: usize,
    pub neuron: usize,
}

/// Keep-masks for the hidden layers; `masks[j]` belongs to trace layer `j + 1`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HiddenMasks(pub Vec<Vec<bool>>);

impl HiddenMasks {
    pub fn all(spec: &LayerSpec, keep: bool) -> Self {
        HiddenMasks(spec.hidden_widths().iter().map(|&w| vec![keep; w]).collect())
    }

    /// Masks keeping exactly the listed neurons of each hidden layer.
    pub fn from_keep_lists(spec: &LayerSpec, keep: &[Vec<usize>]) -> Result<Self> {
        let widths = spec.hidden_widths();
        if keep.len() != widths.len() {
            return Err(Error::Index(format!(
                "{} keep lists for {} hidden layers",
                keep.len(),
                widths.len()
            )));
        }
        let mut masks = Vec::with_capacity(widths.len());
        for (list, &w) in keep.iter().zip(widths) {
            let mut m = vec![false; w];
            for &i in list {
                *m.get_mut(i)
                    .ok_or_else(|| Error::Index(format!("neuron {i} out of range for width {w}")))? = true;
            }
            masks.push(m);
        }
        Ok(HiddenMasks(masks))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeomMlp {
    spec: LayerSpec,
    activation: Activation,
    /// `weights[g]` maps layer `g` to layer `g + 1`, shape `widths[g+1] x widths[g]`.
    pub(crate) weights: Vec<Array2<f64>>,
    pub(crate) biases: Vec<Array1<f64>>,
    coords: Vec<Vec<NeuronCoord>>,
}

impl GeomMlp {
    pub fn zeros(spec: LayerSpec, activation: Activation) -> Result<Self> {
        spec.validate()?;
        let weights = spec
            .widths
            .windows(2)
            .map(|w| Array2::zeros((w[1], w[0])))
            .collect();
        let biases = spec.widths[1..].iter().map(|&w| Array1::zeros(w)).collect();
        let coords = spec.grid();
        Ok(Self {
            spec,
            activation,
            weights,
            biases,
            coords,
        })
    }

    /// Uniform `(-1/sqrt(fan_in), 1/sqrt(fan_in))` initialisation for weights
    /// and biases, drawn from `rng` gap by gap (weights row-major, then bias).
    pub fn init_uniform(spec: LayerSpec, activation: Activation, rng: &mut SplitMix64) -> Result<Self> {
        let mut m = Self::zeros(spec, activation)?;
        for g in 0..m.spec.n_gaps() {
            let bound = 1.0 / (m.spec.widths[g] as f64).sqrt();
            for w in m.weights[g].iter_mut() {
                *w = rng.uniform(-bound, bound);
            }
            for b in m.biases[g].iter_mut() {
                *b = rng.uniform(-bound, bound);
            }
        }
        Ok(m)
    }

    pub fn from_parts(
        spec: LayerSpec,
        activation: Activation,
        weights: Vec<Array2<f64>>,
        biases: Vec<Array1<f64>>,
    ) -> Result<Self> {
        let mut m = Self::zeros(spec, activation)?;
        if weights.len() != m.weights.len() || biases.len() != m.biases.len() {
            return Err(Error::Index("parameter block count does not match spec".into()));
        }
        for (g, (w, b)) in weights.into_iter().zip(biases).enumerate() {
            if w.dim() != m.weights[g].dim() || b.len() != m.biases[g].len() {
                return Err(Error::Index(format!(
                    "gap {g}: got {:?}/{}, expected {:?}/{}",
                    w.dim(),
                    b.len(),
                    m.weights[g].dim(),
                    m.biases[g].len()
                )));
            }
            m.weights[g] = w.as_standard_layout().into_owned();
            m.biases[g] = b;
        }
        Ok(m)
    }

    pub fn spec(&self) -> &LayerSpec {
        &self.spec
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn weights(&self) -> &[Array2<f64>] {
        &self.weights
    }

    pub fn biases(&self) -> &[Array1<f64>] {
        &self.biases
    }

    pub fn coords(&self) -> &[Vec<NeuronCoord>] {
        &self.coords
    }

    pub fn weights_mut(&mut self) -> &mut [Array2<f64>] {
        &mut self.weights
    }

    pub fn biases_mut(&mut self) -> &mut [Array1<f64>] {
        &mut self.biases
    }

    fn n_gaps(&self) -> usize {
        self.weights.len()
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.spec.widths[0] {
            return Err(Error::Index(format!(
                "input has {} values, model expects {}",
                x.len(),
                self.spec.widths[0]
            )));
        }
        if let Some(i) = x.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteInput(format!("input[{i}] = {}", x[i])));
        }
        Ok(())
    }

    pub fn check_site(&self, site: PatchSite) -> Result<()> {
        if !self.spec.hidden_layers().contains(&site.layer) {
            return Err(Error::Index(format!(
                "layer {} is not a hidden layer (valid: {:?})",
                site.layer,
                self.spec.hidden_layers()
            )));
        }
        if site.neuron >= self.spec.widths[site.layer] {
            return Err(Error::Index(format!(
                "neuron {} out of range for layer {} of width {}",
                site.neuron, site.layer, self.spec.widths[site.layer]
            )));
        }
        Ok(())
    }

    /// All hidden neurons in layer-major order.
    pub fn patch_sites(&self) -> Vec<PatchSite> {
        self.spec
            .hidden_layers()
            .flat_map(|layer| (0..self.spec.widths[layer]).map(move |neuron| PatchSite { layer, neuron }))
            .collect()
    }

    /// Apply gap `g` to `input`, writing post-activations into `out`.
    #[inline]
    pub(crate) fn apply_gap(&self, g: usize, input: &[f64], out: &mut Vec<f64>) {
        let w = &self.weights[g];
        let b = &self.biases[g];
        let last = g + 1 == self.n_gaps();
        let cols = w.ncols();
        let flat = w.as_slice().expect("weights are kept in standard layout");
        out.clear();
        out.extend(flat.chunks_exact(cols).zip(b.iter()).map(|(row, &bias)| {
            let mut acc = 0.0;
            for (wi, xi) in row.iter().zip(input) {
                acc += wi * xi;
            }
            let z = acc + bias;
            if last {
                z
            } else {
                self.activation.apply(z)
            }
        }));
    }

    /// Run gaps `from..L` starting at post-activation `h` of layer `from`.
    pub(crate) fn propagate_from(&self, from: usize, mut h: Vec<f64>) -> Vec<f64> {
        let mut next = Vec::new();
        for g in from..self.n_gaps() {
            self.apply_gap(g, &h, &mut next);
            std::mem::swap(&mut h, &mut next);
        }
        h
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        Ok(self.propagate_from(0, x.to_vec()))
    }

    pub fn forward_traced(&self, x: &[f64]) -> Result<ActivationTrace> {
        self.check_input(x)?;
        Ok(self.trace_unchecked(x))
    }

    pub(crate) fn trace_unchecked(&self, x: &[f64]) -> ActivationTrace {
        let mut layers = Vec::with_capacity(self.n_gaps() + 1);
        layers.push(x.to_vec());
        for g in 0..self.n_gaps() {
            let mut out = Vec::with_capacity(self.spec.widths[g + 1]);
            self.apply_gap(g, &layers[g], &mut out);
            layers.push(out);
        }
        ActivationTrace { layers }
    }

    fn check_trace(&self, trace: &ActivationTrace) -> Result<()> {
        let ok = trace.layers.len() == self.spec.widths.len()
            && trace.layers.iter().zip(&self.spec.widths).all(|(h, &w)| h.len() == w);
        if ok {
            Ok(())
        } else {
            Err(Error::Index("activation trace does not match model shape".into()))
        }
    }

    /// Corrupted pass with the activation at `site` overwritten by its clean
    /// value; the patched layer then propagates as normal.
    pub fn forward_patched(&self, x_corr: &[f64], clean: &ActivationTrace, site: PatchSite) -> Result<Vec<f64>> {
        self.check_input(x_corr)?;
        self.check_site(site)?;
        self.check_trace(clean)?;
        let mut h = x_corr.to_vec();
        let mut next = Vec::new();
        for g in 0..self.n_gaps() {
            self.apply_gap(g, &h, &mut next);
            std::mem::swap(&mut h, &mut next);
            if g + 1 == site.layer {
                h[site.neuron] = clean.get(site);
            }
        }
        Ok(h)
    }

    /// Same result as [`forward_patched`](Self::forward_patched) but resumes
    /// from an existing corrupted trace instead of recomputing the layers
    /// below the site.
    pub(crate) fn patched_from_trace(&self, corr: &ActivationTrace, clean: &ActivationTrace, site: PatchSite) -> Vec<f64> {
        let mut h = corr.layers[site.layer].clone();
        h[site.neuron] = clean.get(site);
        self.propagate_from(site.layer, h)
    }

    /// Pass with every hidden post-activation outside `keep` zeroed before it
    /// propagates.
    pub fn forward_masked(&self, x: &[f64], keep: &HiddenMasks) -> Result<Vec<f64>> {
        self.check_input(x)?;
        self.check_masks(keep)?;
        let mut h = x.to_vec();
        let mut next = Vec::new();
        for g in 0..self.n_gaps() {
            self.apply_gap(g, &h, &mut next);
            std::mem::swap(&mut h, &mut next);
            if let Some(mask) = keep.0.get(g) {
                if g + 1 < self.n_gaps() {
                    for (v, &k) in h.iter_mut().zip(mask) {
                        if !k {
                            *v = 0.0;
                        }
                    }
                }
            }
        }
        Ok(h)
    }

    pub fn check_masks(&self, keep: &HiddenMasks) -> Result<()> {
        let widths = self.spec.hidden_widths();
        if keep.0.len() != widths.len() || keep.0.iter().zip(widths).any(|(m, &w)| m.len() != w) {
            return Err(Error::Index(format!(
                "mask shape {:?} does not match hidden widths {:?}",
                keep.0.iter().map(Vec::len).collect::<Vec<_>>(),
                widths
            )));
        }
        Ok(())
    }

    /// Weight entries with `|w| > epsilon`, over all gaps.
    pub fn nonzero_edge_count(&self, epsilon: f64) -> usize {
        self.weights
            .iter()
            .map(|w| w.iter().filter(|v| v.abs() > epsilon).count())
            .sum()
    }

    /// Exchange hidden neurons `a` and `b` of trace layer `layer`: incoming
    /// rows, bias entries and outgoing columns swap places. The network
    /// function is unchanged up to summation order.
    pub fn swap_neurons(&mut self, layer: usize, a: usize, b: usize) {
        debug_assert!(self.spec.hidden_layers().contains(&layer));
        if a == b {
            return;
        }
        swap_rows(&mut self.weights[layer - 1], a, b);
        self.biases[layer - 1].swap(a, b);
        swap_cols(&mut self.weights[layer], a, b);
    }
}

pub(crate) fn swap_rows(m: &mut Array2<f64>, a: usize, b: usize) {
    let cols = m.ncols();
    let flat = m.as_slice_mut().expect("standard layout");
    for c in 0..cols {
        flat.swap(a * cols + c, b * cols + c);
    }
}

pub(crate) fn swap_cols(m: &mut Array2<f64>, a: usize, b: usize) {
    for mut row in m.rows_mut() {
        row.swap(a, b);
    }
}
