//! Geometric MLP training under five regularisation regimes and automated
//! circuit discovery by recursive activation patching.
//!
//! Modules follow the pipeline: [`data`] loads MNIST and draws bootstrap
//! resamples, [`model`] is the network with grid-embedded neurons,
//! [`train`] implements the regimes, [`discovery`] scores and selects
//! circuits, [`eval`] aggregates metrics with confidence intervals and
//! [`dot`] renders circuits.

pub mod alloc;
pub mod data;
pub mod discovery;
pub mod dot;
pub mod error;
pub mod eval;
pub mod model;
pub mod rng;
pub mod stats;
pub mod train;

pub use data::{bootstrap_resample, build_pair_set, load_idx, load_mnist, BootstrapPlan, Dataset, ImageSample, SplitTag, TaskPairSet};
pub use discovery::{discover, discover_pairs, extract_circuit, score_all, score_site, select_top_k, Circuit, DiscoveryReport, LogitDiffTable};
pub use error::{Error, Result};
pub use eval::{build_table2, circuit_accuracy, circuit_logit_difference, BootstrapResult, ComputeRow, MetricRow};
pub use model::{Activation, ActivationTrace, GeomMlp, HiddenMasks, LayerSpec, NeuronCoord, PatchSite};
pub use rng::SplitMix64;
pub use train::{train, Regime, RegimeConfig, SwapEvent, TrainReport};
