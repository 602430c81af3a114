//! Recursive activation patching.
//!
//! For each clean/corrupted pair, every hidden activation of the corrupted
//! run is overwritten in turn with its clean value and the patched logits are
//! compared with the clean logits by L2 distance. Sites are averaged over all
//! pairs and the `k` lowest-scoring neurons of each hidden layer form the
//! circuit.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{BootstrapPlan, TaskPairSet};
use crate::error::{Error, Result};
use crate::model::{ActivationTrace, GeomMlp, HiddenMasks, PatchSite};
use crate::stats;

/// L2 distance between two logit vectors, summed left to right.
pub fn logit_distance(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        let d = x - y;
        acc += d * d;
    }
    acc.sqrt()
}

/// Mean patching score of every hidden neuron; `scores[j]` is trace layer
/// `j + 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogitDiffTable {
    pub scores: Vec<Vec<f64>>,
    pub n_pairs: usize,
}

impl LogitDiffTable {
    pub fn get(&self, site: PatchSite) -> f64 {
        self.scores[site.layer - 1][site.neuron]
    }
}

/// Forward-pass bookkeeping of a scoring run.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PassCounts {
    /// Reference passes: one traced pass per pair, carrying the clean and the
    /// corrupted input through the network together.
    pub reference: usize,
    /// Patched passes actually executed.
    pub patched: usize,
    /// Sites scored without a pass because the clean and corrupted
    /// activations were bitwise equal (the patch would be a no-op).
    pub shortcut: usize,
}

impl PassCounts {
    pub fn total(&self) -> usize {
        self.reference + self.patched
    }

    fn add(self, o: PassCounts) -> PassCounts {
        PassCounts {
            reference: self.reference + o.reference,
            patched: self.patched + o.patched,
            shortcut: self.shortcut + o.shortcut,
        }
    }
}

/// Patching score of one site for one pair: distance between the patched
/// corrupted logits and the clean logits.
pub fn score_site(model: &GeomMlp, x_clean: &[f64], x_corr: &[f64], site: PatchSite) -> Result<f64> {
    let clean = model.forward_traced(x_clean)?;
    let patched = model.forward_patched(x_corr, &clean, site)?;
    Ok(logit_distance(&patched, clean.logits()))
}

/// Clean and corrupted traces computed in one pass over the layers.
fn trace_pair(model: &GeomMlp, x_clean: &[f64], x_corr: &[f64]) -> (ActivationTrace, ActivationTrace) {
    let n = model.spec().widths.len();
    let mut clean = Vec::with_capacity(n);
    let mut corr = Vec::with_capacity(n);
    clean.push(x_clean.to_vec());
    corr.push(x_corr.to_vec());
    for g in 0..n - 1 {
        let mut a = Vec::new();
        let mut b = Vec::new();
        model.apply_gap(g, &clean[g], &mut a);
        model.apply_gap(g, &corr[g], &mut b);
        clean.push(a);
        corr.push(b);
    }
    (ActivationTrace { layers: clean }, ActivationTrace { layers: corr })
}

/// All site scores for one pair, in [`GeomMlp::patch_sites`] order.
fn score_pair(model: &GeomMlp, sites: &[PatchSite], x_clean: &[f64], x_corr: &[f64]) -> (Vec<f64>, PassCounts) {
    let (clean, corr) = trace_pair(model, x_clean, x_corr);
    let baseline = logit_distance(corr.logits(), clean.logits());
    let mut counts = PassCounts {
        reference: 1,
        ..PassCounts::default()
    };
    let scores = sites
        .iter()
        .map(|&site| {
            if clean.get(site).to_bits() == corr.get(site).to_bits() {
                counts.shortcut += 1;
                baseline
            } else {
                counts.patched += 1;
                logit_distance(&model.patched_from_trace(&corr, &clean, site), clean.logits())
            }
        })
        .collect();
    (scores, counts)
}

fn check_pairs(model: &GeomMlp, pairs: &[(&[f64], &[f64])]) -> Result<()> {
    if pairs.is_empty() {
        return Err(Error::EmptyDataset("no clean/corrupted pairs to score".into()));
    }
    let dim = model.spec().widths[0];
    for (i, (c, k)) in pairs.iter().enumerate() {
        if c.len() != dim || k.len() != dim {
            return Err(Error::Index(format!("pair {i} has inputs of length {}/{}, expected {dim}", c.len(), k.len())));
        }
        if c.iter().chain(k.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteInput(format!("pair {i}")));
        }
    }
    Ok(())
}

/// Average site scores over `pairs`. Pairs are scored in parallel on the
/// ambient rayon pool; the per-site mean uses [`stats::mean`] over pairs in
/// input order, so the table does not depend on the worker count.
pub fn score_all_counted(model: &GeomMlp, pairs: &[(&[f64], &[f64])]) -> Result<(LogitDiffTable, PassCounts)> {
    check_pairs(model, pairs)?;
    let sites = model.patch_sites();
    let per_pair: Vec<(Vec<f64>, PassCounts)> = pairs
        .par_iter()
        .map(|(c, k)| score_pair(model, &sites, c, k))
        .collect();
    let counts = per_pair.iter().fold(PassCounts::default(), |a, (_, c)| a.add(*c));

    let hidden = model.spec().hidden_widths();
    let mut scores: Vec<Vec<f64>> = hidden.iter().map(|&w| Vec::with_capacity(w)).collect();
    let mut column = Vec::with_capacity(pairs.len());
    for (s, site) in sites.iter().enumerate() {
        column.clear();
        column.extend(per_pair.iter().map(|(v, _)| v[s]));
        scores[site.layer - 1].push(stats::mean(&column));
    }
    Ok((
        LogitDiffTable {
            scores,
            n_pairs: pairs.len(),
        },
        counts,
    ))
}

pub fn score_all(model: &GeomMlp, pairs: &[(&[f64], &[f64])]) -> Result<LogitDiffTable> {
    score_all_counted(model, pairs).map(|(t, _)| t)
}

/// Per hidden layer, the `k` neurons with the smallest mean score (ties to
/// the lower index), sorted ascending.
pub fn select_top_k(table: &LogitDiffTable, k: usize) -> Vec<Vec<usize>> {
    assert!(k >= 1, "k must be at least 1");
    table
        .scores
        .iter()
        .map(|layer| {
            let mut idx: Vec<usize> = (0..layer.len()).collect();
            idx.sort_by(|&a, &b| layer[a].total_cmp(&layer[b]).then(a.cmp(&b)));
            idx.truncate(k);
            idx.sort_unstable();
            idx
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Circuit {
    pub keep: Vec<Vec<usize>>,
    pub k_per_layer: usize,
    pub edge_epsilon: f64,
    /// `(gap, from_neuron, to_neuron)`, sorted lexicographically.
    pub edges: Vec<(usize, usize, usize)>,
    /// Weight of each edge, parallel to `edges`.
    pub edge_weights: Vec<f64>,
    pub widths: Vec<usize>,
    pub layer_spacing: f64,
    pub source_model_id: String,
}

impl Circuit {
    pub fn masks(&self) -> HiddenMasks {
        HiddenMasks(
            self.keep
                .iter()
                .zip(&self.widths[1..self.widths.len() - 1])
                .map(|(list, &w)| {
                    let mut m = vec![false; w];
                    for &i in list {
                        m[i] = true;
                    }
                    m
                })
                .collect(),
        )
    }

    pub fn total_possible_edges(&self) -> usize {
        self.widths.windows(2).map(|w| w[0] * w[1]).sum()
    }

    /// `1 - |edges| / total_possible_edges`.
    pub fn sparsity(&self) -> f64 {
        1.0 - self.edges.len() as f64 / self.total_possible_edges() as f64
    }

    /// Structural checks used when a circuit is read back from disk.
    pub fn validate(&self) -> Result<()> {
        if self.widths.len() < 3 || self.keep.len() != self.widths.len() - 2 {
            return Err(Error::Format("circuit keep lists do not match widths".into()));
        }
        if self.edges.len() != self.edge_weights.len() {
            return Err(Error::Format("edges and edge_weights differ in length".into()));
        }
        for (j, list) in self.keep.iter().enumerate() {
            if list.iter().any(|&i| i >= self.widths[j + 1]) || list.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::Format(format!("keep list {j} is out of range or unsorted")));
            }
        }
        let n_gaps = self.widths.len() - 1;
        for &(g, from, to) in &self.edges {
            if g >= n_gaps || from >= self.widths[g] || to >= self.widths[g + 1] {
                return Err(Error::Format(format!("edge ({g}, {from}, {to}) out of range")));
            }
        }
        Ok(())
    }
}

/// Identifier of a model's exact parameters (CRC-32 of its file encoding).
pub fn model_id(model: &GeomMlp) -> String {
    format!("crc32:{:08x}", crc32fast::hash(&model.to_bytes()))
}

/// Circuit induced by `keep`: every weight with `|w| > edge_epsilon` whose
/// endpoints are both kept. Input and output neurons are always kept.
pub fn extract_circuit(model: &GeomMlp, keep: &[Vec<usize>], k: usize, edge_epsilon: f64) -> Result<Circuit> {
    let spec = model.spec();
    let masks = HiddenMasks::from_keep_lists(spec, keep)?;
    let n_gaps = spec.n_gaps();
    let layer_keep = |layer: usize| -> Vec<usize> {
        if layer == 0 || layer == n_gaps {
            (0..spec.widths[layer]).collect()
        } else {
            (0..spec.widths[layer]).filter(|&i| masks.0[layer - 1][i]).collect()
        }
    };
    let mut edges = Vec::new();
    let mut edge_weights = Vec::new();
    for g in 0..n_gaps {
        let w = &model.weights()[g];
        let tos = layer_keep(g + 1);
        for from in layer_keep(g) {
            for &to in &tos {
                let v = w[[to, from]];
                if v.abs() > edge_epsilon {
                    edges.push((g, from, to));
                    edge_weights.push(v);
                }
            }
        }
    }
    let mut keep_sorted: Vec<Vec<usize>> = keep.to_vec();
    for l in &mut keep_sorted {
        l.sort_unstable();
        l.dedup();
    }
    Ok(Circuit {
        keep: keep_sorted,
        k_per_layer: k,
        edge_epsilon,
        edges,
        edge_weights,
        widths: spec.widths.clone(),
        layer_spacing: spec.layer_spacing,
        source_model_id: model_id(model),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscoveryReport {
    pub discovery_time_s: f64,
    pub circuit_sparsity: f64,
    pub table: LogitDiffTable,
    pub circuit: Circuit,
    pub passes: PassCounts,
}

/// Score, select and extract on explicit `(clean, corrupted)` pairs. The
/// reported time spans scoring through extraction.
pub fn discover_pairs(model: &GeomMlp, pairs: &[(&[f64], &[f64])], k: usize, edge_epsilon: f64) -> Result<DiscoveryReport> {
    if k == 0 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    if !(edge_epsilon >= 0.0) {
        return Err(Error::Config(format!("edge epsilon must be >= 0, got {edge_epsilon}")));
    }
    let started = Instant::now();
    let (table, passes) = score_all_counted(model, pairs)?;
    let keep = select_top_k(&table, k);
    let circuit = extract_circuit(model, &keep, k, edge_epsilon)?;
    let discovery_time_s = started.elapsed().as_secs_f64();
    Ok(DiscoveryReport {
        discovery_time_s,
        circuit_sparsity: circuit.sparsity(),
        table,
        circuit,
        passes,
    })
}

/// Discovery on bootstrap resample `resample_index` of a task's pools.
pub fn discover(
    model: &GeomMlp,
    pair_set: &TaskPairSet,
    plan: &BootstrapPlan,
    resample_index: usize,
    k: usize,
    edge_epsilon: f64,
) -> Result<DiscoveryReport> {
    plan.validate()?;
    if resample_index >= plan.n_resamples {
        return Err(Error::Index(format!(
            "resample {resample_index} out of range ({} resamples)",
            plan.n_resamples
        )));
    }
    let pairs = pair_set.resample_pairs(plan, resample_index);
    discover_pairs(model, &pairs, k, edge_epsilon)
}
