//! The five training regimes: vanilla, L1, L1 + local, L1 + swap and BIMT
//! (L1 + local + swap).

pub mod adam;
pub mod loss;
pub mod swap;

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::alloc::{peak_rss_bytes, PeakScope};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{Activation, GeomMlp, LayerSpec};
use crate::rng::SplitMix64;

pub use adam::Adam;
pub use loss::{
    batch_accuracy, connection_cost, l1_penalty, local_penalty, loss_and_gradient, prediction_loss, total_loss,
    Batch, Gradients, Workspace,
};
pub use swap::{swap_step, SwapEvent};

pub const INIT_STREAM: &str = "init";
pub const TRAIN_STREAM: &str = "train";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Regime {
    Vanilla,
    L1,
    L1Local,
    L1Swap,
    Bimt,
}

impl Regime {
    pub const ALL: [Regime; 5] = [Regime::Vanilla, Regime::L1, Regime::L1Local, Regime::L1Swap, Regime::Bimt];

    pub fn penalized(self) -> bool {
        self != Regime::Vanilla
    }

    pub fn distance_weighted(self) -> bool {
        matches!(self, Regime::L1Local | Regime::Bimt)
    }

    pub fn swaps(self) -> bool {
        matches!(self, Regime::L1Swap | Regime::Bimt)
    }

    pub fn name(self) -> &'static str {
        match self {
            Regime::Vanilla => "vanilla",
            Regime::L1 => "l1",
            Regime::L1Local => "l1-local",
            Regime::L1Swap => "l1-swap",
            Regime::Bimt => "bimt",
        }
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.to_ascii_lowercase().replace(['_', '+'], "-");
        Ok(match norm.as_str() {
            "vanilla" | "dense" | "fullydense" | "fully-dense" => Regime::Vanilla,
            "l1" | "l1-only" => Regime::L1,
            "l1-local" | "local" => Regime::L1Local,
            "l1-swap" | "swap" => Regime::L1Swap,
            "bimt" | "l1-local-swap" => Regime::Bimt,
            _ => return Err(Error::Config(format!("unknown regime {s:?}"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegimeConfig {
    pub regime: Regime,
    pub lambda: f64,
    pub swap_interval: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub spec: LayerSpec,
    pub activation: Activation,
    /// Loss-curve sampling period in steps.
    pub log_interval: usize,
}

impl Default for RegimeConfig {
    fn default() -> Self {
        Self {
            regime: Regime::Bimt,
            lambda: 1e-3,
            swap_interval: 200,
            steps: 20_000,
            batch_size: 100,
            learning_rate: 1e-3,
            seed: 0,
            spec: LayerSpec::default(),
            activation: Activation::Silu,
            log_interval: 100,
        }
    }
}

impl RegimeConfig {
    pub fn for_regime(regime: Regime) -> Self {
        Self {
            regime,
            ..Self::default()
        }
    }

    /// Penalty strength actually applied (0 for vanilla).
    pub fn effective_lambda(&self) -> f64 {
        if self.regime.penalized() {
            self.lambda
        } else {
            0.0
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(Error::Config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if self.swap_interval == 0 || self.batch_size == 0 || self.log_interval == 0 {
            return Err(Error::Config("swap_interval, batch_size and log_interval must be positive".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossPoint {
    pub step: usize,
    pub prediction_loss: f64,
    pub penalty_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub wall_time_s: f64,
    pub peak_alloc_bytes: u64,
    pub final_test_accuracy: f64,
    pub loss_curve: Vec<LossPoint>,
    pub swap_log: Vec<SwapEvent>,
    pub model_file_bytes: u64,
    /// Process-wide resident-set high-water mark after training, if known.
    pub peak_rss_bytes: Option<u64>,
}

/// Deterministic minibatch order: a fresh shuffle of the training indices per
/// epoch, drawn from the `train` stream.
struct BatchSampler {
    rng: SplitMix64,
    order: Vec<usize>,
    cursor: usize,
}

impl BatchSampler {
    fn new(n: usize, seed: u64) -> Self {
        let mut s = Self {
            rng: SplitMix64::stream(seed, TRAIN_STREAM, 0),
            order: (0..n).collect(),
            cursor: n,
        };
        s.reshuffle();
        s
    }

    fn reshuffle(&mut self) {
        self.rng.shuffle(&mut self.order);
        self.cursor = 0;
    }

    fn next(&mut self, batch_size: usize, out: &mut Vec<usize>) {
        out.clear();
        while out.len() < batch_size {
            if self.cursor == self.order.len() {
                self.reshuffle();
            }
            out.push(self.order[self.cursor]);
            self.cursor += 1;
        }
    }
}

/// Model initialisation shared by every regime for a given seed.
pub fn initial_model(cfg: &RegimeConfig) -> Result<GeomMlp> {
    let mut rng = SplitMix64::stream(cfg.seed, INIT_STREAM, 0);
    GeomMlp::init_uniform(cfg.spec.clone(), cfg.activation, &mut rng)
}

/// Accuracy of the model over a whole dataset, evaluated in chunks.
pub fn dataset_accuracy(model: &GeomMlp, ds: &Dataset) -> f64 {
    let mut correct = 0.0;
    for chunk in ds.samples().chunks(1000) {
        let b = Batch::from_samples(chunk);
        correct += batch_accuracy(model, &b) * chunk.len() as f64;
    }
    correct / ds.len() as f64
}

pub struct Trainer {
    pub cfg: RegimeConfig,
    pub model: GeomMlp,
    optimizer: Adam,
    workspace: Workspace,
    dists: Option<Vec<ndarray::Array2<f64>>>,
    step: usize,
}

impl Trainer {
    pub fn new(cfg: RegimeConfig) -> Result<Self> {
        cfg.validate()?;
        let model = initial_model(&cfg)?;
        let optimizer = Adam::new(&model, cfg.learning_rate);
        let workspace = Workspace::new(&model, cfg.batch_size);
        let dists = (cfg.regime.distance_weighted() || cfg.regime.swaps()).then(|| cfg.spec.distance_matrices());
        Ok(Self {
            cfg,
            model,
            optimizer,
            workspace,
            dists,
            step: 0,
        })
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    /// One Adam step on `total_loss`; returns `(prediction_loss, penalty_loss)`.
    pub fn gradient_step(&mut self, batch: &Batch) -> Result<(f64, f64)> {
        let (pred, pen) = loss_and_gradient(&self.model, batch, &self.cfg, self.dists.as_deref(), &mut self.workspace);
        if !pred.is_finite() || !self.workspace.grads.all_finite() {
            return Err(Error::Numeric {
                step: self.step,
                what: format!("non-finite loss or gradient (prediction loss {pred})"),
            });
        }
        self.optimizer.step(&mut self.model, &self.workspace.grads);
        self.step += 1;
        Ok((pred, pen))
    }

    /// Swap pass, when the regime swaps and the step count is on the interval.
    pub fn maybe_swap(&mut self) -> Vec<SwapEvent> {
        if !self.cfg.regime.swaps() || self.step == 0 || self.step % self.cfg.swap_interval != 0 {
            return Vec::new();
        }
        let dists = self.dists.as_deref().expect("swap regimes keep distance matrices");
        swap_step(&mut self.model, Some(&mut self.optimizer), dists, self.step)
    }
}

/// Train one regime from scratch. Wall time covers the optimisation loop;
/// `peak_alloc_bytes` is the allocation high-water mark of this thread above
/// its level on entry (0 unless the tracking allocator is installed).
pub fn train(cfg: &RegimeConfig, train_set: &Dataset, test_set: &Dataset) -> Result<(GeomMlp, TrainReport)> {
    if train_set.input_dim() != cfg.spec.widths[0] {
        return Err(Error::Config(format!(
            "dataset inputs have {} values, spec expects {}",
            train_set.input_dim(),
            cfg.spec.widths[0]
        )));
    }
    let scope = PeakScope::start();
    let started = Instant::now();

    let mut trainer = Trainer::new(cfg.clone())?;
    let mut sampler = BatchSampler::new(train_set.len(), cfg.seed);
    let mut indices = Vec::with_capacity(cfg.batch_size);
    let mut batch = Batch {
        inputs: ndarray::Array2::zeros((cfg.batch_size, cfg.spec.widths[0])),
        labels: vec![0; cfg.batch_size],
    };
    let mut loss_curve = Vec::with_capacity(cfg.steps / cfg.log_interval + 2);
    let mut swap_log = Vec::new();
    let samples = train_set.samples();

    for _ in 0..cfg.steps {
        sampler.next(cfg.batch_size, &mut indices);
        batch.fill(indices.iter().map(|&i| &samples[i]));
        let (pred, pen) = trainer.gradient_step(&batch)?;
        let step = trainer.step_count();
        if step == 1 || step % cfg.log_interval == 0 || step == cfg.steps {
            loss_curve.push(LossPoint {
                step,
                prediction_loss: pred,
                penalty_loss: pen,
            });
        }
        swap_log.extend(trainer.maybe_swap());
    }

    let wall_time_s = started.elapsed().as_secs_f64();
    let peak_alloc_bytes = scope.peak_bytes();
    let model = trainer.model;
    let report = TrainReport {
        wall_time_s,
        peak_alloc_bytes,
        final_test_accuracy: dataset_accuracy(&model, test_set),
        loss_curve,
        swap_log,
        model_file_bytes: model.to_bytes().len() as u64,
        peak_rss_bytes: peak_rss_bytes(),
    };
    Ok((model, report))
}
