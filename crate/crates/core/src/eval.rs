//! Circuit metrics, bootstrap aggregation and the comparison table.

use std::hint::black_box;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{BootstrapPlan, TaskPairSet};
use crate::discovery::{discover_pairs, logit_distance};
use crate::error::{Error, Result};
use crate::model::{GeomMlp, HiddenMasks};
use crate::stats;
use crate::train::loss::argmax;
use crate::train::{Regime, TrainReport};

/// Forward passes run and discarded before timing.
pub const WARMUP_PASSES: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BootstrapResult {
    pub mean: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub n_resamples: usize,
    pub sample_size: usize,
}

impl BootstrapResult {
    /// Mean and 2.5/97.5 percentile interval of per-resample values. The
    /// interval is widened to contain the mean if interpolation leaves it
    /// just outside (possible only for very skewed, tiny resample counts).
    pub fn from_values(values: &[f64], sample_size: usize) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Config("bootstrap needs at least one resample".into()));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::Numeric {
                step: 0,
                what: format!("non-finite bootstrap value {v}"),
            });
        }
        let mean = stats::mean(values);
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        let ci_low = stats::percentile_sorted(&sorted, 0.025).min(mean);
        let ci_high = stats::percentile_sorted(&sorted, 0.975).max(mean);
        Ok(Self {
            mean,
            ci_low,
            ci_high,
            n_resamples: values.len(),
            sample_size,
        })
    }

    pub fn width(&self) -> f64 {
        self.ci_high - self.ci_low
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub task_name: String,
    pub regime: Regime,
    pub logit_difference: BootstrapResult,
    pub discovery_time_s: BootstrapResult,
    pub circuit_sparsity: BootstrapResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComputeRow {
    pub regime: Regime,
    pub training_time_s: f64,
    pub peak_alloc_bytes: u64,
    pub model_file_bytes: u64,
    pub inference_time_per_sample_s: BootstrapResult,
}

/// Mean L2 distance between full-model and masked-model logits.
pub fn circuit_logit_difference(model: &GeomMlp, keep: &HiddenMasks, samples: &[&[f64]]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::EmptyDataset("no samples for logit difference".into()));
    }
    model.check_masks(keep)?;
    let per: Vec<f64> = samples
        .par_iter()
        .map(|x| Ok(logit_distance(&model.forward(x)?, &model.forward_masked(x, keep)?)))
        .collect::<Result<_>>()?;
    Ok(stats::mean(&per))
}

/// Fraction of samples whose masked-model argmax equals the label.
pub fn circuit_accuracy(model: &GeomMlp, keep: &HiddenMasks, samples: &[(&[f64], u8)]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::EmptyDataset("no samples for circuit accuracy".into()));
    }
    model.check_masks(keep)?;
    let mut correct = 0usize;
    for (x, label) in samples {
        if argmax(model.forward_masked(x, keep)?.into_iter()) == *label as usize {
            correct += 1;
        }
    }
    Ok(correct as f64 / samples.len() as f64)
}

/// Evaluate `metric_fn(resample_index, indices_per_pool)` on every resample
/// of `plan` and aggregate.
pub fn bootstrap_metric<F>(mut metric_fn: F, pool_sizes: &[usize], plan: &BootstrapPlan) -> Result<BootstrapResult>
where
    F: FnMut(usize, &[Vec<usize>]) -> Result<f64>,
{
    plan.validate()?;
    if pool_sizes.iter().any(|&n| n == 0) {
        return Err(Error::EmptyDataset("empty bootstrap pool".into()));
    }
    let values = (0..plan.n_resamples)
        .map(|r| metric_fn(r, &plan.draw(pool_sizes, r)))
        .collect::<Result<Vec<f64>>>()?;
    BootstrapResult::from_values(&values, plan.sample_size)
}

/// Seconds per single-sample forward pass, one measurement per resample.
/// Runs on the calling thread.
pub fn inference_timing(model: &GeomMlp, samples: &[&[f64]], plan: &BootstrapPlan) -> Result<BootstrapResult> {
    if samples.is_empty() {
        return Err(Error::EmptyDataset("no samples for inference timing".into()));
    }
    for i in 0..WARMUP_PASSES {
        black_box(model.forward(samples[i % samples.len()])?);
    }
    bootstrap_metric(
        |_, idx| {
            let idx = &idx[0];
            let started = Instant::now();
            for &i in idx {
                black_box(model.forward(black_box(samples[i]))?);
            }
            Ok(started.elapsed().as_secs_f64() / idx.len() as f64)
        },
        &[samples.len()],
        plan,
    )
}

pub fn compute_row(
    regime: Regime,
    report: &TrainReport,
    model: &GeomMlp,
    samples: &[&[f64]],
    plan: &BootstrapPlan,
) -> Result<ComputeRow> {
    Ok(ComputeRow {
        regime,
        training_time_s: report.wall_time_s,
        peak_alloc_bytes: report.peak_alloc_bytes,
        model_file_bytes: report.model_file_bytes,
        inference_time_per_sample_s: inference_timing(model, samples, plan)?,
    })
}

/// Discovery on every resample of every `(task, regime)` combination. Rows
/// are ordered task-major in the given orders. Within a resample, the same
/// drawn pairs feed discovery and the logit difference (evaluated on the
/// union of the drawn clean and corrupted samples).
pub fn build_table2(
    models: &[(Regime, &GeomMlp)],
    tasks: &[&TaskPairSet],
    plan: &BootstrapPlan,
    k: usize,
    edge_epsilon: f64,
) -> Result<Vec<MetricRow>> {
    plan.validate()?;
    let Some((_, first)) = models.first() else {
        return Err(Error::Config("no models to evaluate".into()));
    };
    for (regime, m) in models {
        if m.spec() != first.spec() {
            return Err(Error::Config(format!("model for regime {regime} has a different layer spec")));
        }
    }
    let mut rows = Vec::with_capacity(models.len() * tasks.len());
    for task in tasks {
        for &(regime, model) in models {
            let mut ld = Vec::with_capacity(plan.n_resamples);
            let mut time = Vec::with_capacity(plan.n_resamples);
            let mut sparsity = Vec::with_capacity(plan.n_resamples);
            for r in 0..plan.n_resamples {
                let pairs = task.resample_pairs(plan, r);
                let report = discover_pairs(model, &pairs, k, edge_epsilon)?;
                let union: Vec<&[f64]> = pairs.iter().map(|p| p.0).chain(pairs.iter().map(|p| p.1)).collect();
                ld.push(circuit_logit_difference(model, &report.circuit.masks(), &union)?);
                time.push(report.discovery_time_s);
                sparsity.push(report.circuit_sparsity);
            }
            log::info!(
                "{} / {}: logit diff {:.4}, sparsity {:.4}",
                task.task_name,
                regime,
                stats::mean(&ld),
                stats::mean(&sparsity)
            );
            rows.push(MetricRow {
                task_name: task.task_name.clone(),
                regime,
                logit_difference: BootstrapResult::from_values(&ld, plan.sample_size)?,
                discovery_time_s: BootstrapResult::from_values(&time, plan.sample_size)?,
                circuit_sparsity: BootstrapResult::from_values(&sparsity, plan.sample_size)?,
            });
        }
    }
    Ok(rows)
}

pub const TABLE2_COLUMNS: [&str; 11] = [
    "task",
    "regime",
    "logit_diff_mean",
    "logit_diff_ci_low",
    "logit_diff_ci_high",
    "discovery_time_mean",
    "discovery_time_ci_low",
    "discovery_time_ci_high",
    "sparsity_mean",
    "sparsity_ci_low",
    "sparsity_ci_high",
];

pub fn table2_csv(rows: &[MetricRow]) -> String {
    let mut out = TABLE2_COLUMNS.join(",");
    out.push('\n');
    for r in rows {
        let mut fields = vec![r.task_name.clone(), r.regime.to_string()];
        for b in [&r.logit_difference, &r.discovery_time_s, &r.circuit_sparsity] {
            fields.extend([b.mean, b.ci_low, b.ci_high].map(|v| v.to_string()));
        }
        out.push_str(&fields.join(","));
        out.push('\n');
    }
    out
}

/// One scatter point: circuit sparsity against another metric.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlotPoint {
    pub task: String,
    pub regime: Regime,
    pub sparsity: f64,
    pub value: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

/// `(sparsity vs logit difference, sparsity vs discovery time)` points.
pub fn plot_points(rows: &[MetricRow]) -> (Vec<PlotPoint>, Vec<PlotPoint>) {
    let point = |r: &MetricRow, b: &BootstrapResult| PlotPoint {
        task: r.task_name.clone(),
        regime: r.regime,
        sparsity: r.circuit_sparsity.mean,
        value: b.mean,
        ci_low: b.ci_low,
        ci_high: b.ci_high,
    };
    (
        rows.iter().map(|r| point(r, &r.logit_difference)).collect(),
        rows.iter().map(|r| point(r, &r.discovery_time_s)).collect(),
    )
}

/// Inputs of a pair set's pools paired with their labels.
pub fn labeled_pool(task: &TaskPairSet) -> Vec<(&[f64], u8)> {
    task.clean_pool
        .iter()
        .chain(&task.corrupted_pool)
        .map(|s| (s.pixels.as_slice(), s.label))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::discovery::extract_circuit;
    use crate::model::{Activation, LayerSpec};
    use crate::rng::SplitMix64;

    fn toy() -> GeomMlp {
        GeomMlp::init_uniform(LayerSpec::new(vec![6, 5, 4, 3], 1.0).unwrap(), Activation::Silu, &mut SplitMix64::new(9)).unwrap()
    }

    fn inputs(n: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = SplitMix64::new(seed);
        (0..n).map(|_| (0..6).map(|_| rng.next_f64()).collect()).collect()
    }

    #[test]
    fn identity_circuit_has_zero_difference() {
        let m = toy();
        let xs = inputs(10, 1);
        let refs: Vec<&[f64]> = xs.iter().map(|v| v.as_slice()).collect();
        let all = HiddenMasks::all(m.spec(), true);
        assert_eq!(circuit_logit_difference(&m, &all, &refs).unwrap(), 0.0);
    }

    #[test]
    fn random_mask_matches_two_pass_oracle() {
        let m = toy();
        let xs = inputs(7, 2);
        let refs: Vec<&[f64]> = xs.iter().map(|v| v.as_slice()).collect();
        let c = extract_circuit(&m, &[vec![0, 3], vec![2]], 2, 0.0).unwrap();
        let masks = c.masks();
        // Oracle: recompute the masked pass by hand, zeroing dropped neurons.
        let oracle_masked = |x: &[f64]| -> Vec<f64> {
            let mut h = x.to_vec();
            for g in 0..3 {
                let w = &m.weights()[g];
                let b = &m.biases()[g];
                let mut out: Vec<f64> = (0..w.nrows())
                    .map(|i| {
                        let mut s = 0.0;
                        for j in 0..w.ncols() {
                            s += w[[i, j]] * h[j];
                        }
                        s + b[i]
                    })
                    .collect();
                if g < 2 {
                    for (i, v) in out.iter_mut().enumerate() {
                        *v = if masks.0[g][i] { Activation::Silu.apply(*v) } else { 0.0 };
                    }
                }
                h = out;
            }
            h
        };
        let mut total = 0.0;
        for x in &refs {
            total += logit_distance(&m.forward(x).unwrap(), &oracle_masked(x));
        }
        let got = circuit_logit_difference(&m, &masks, &refs).unwrap();
        assert!((got - total / 7.0).abs() <= 1e-12 * total.max(1.0));
        assert!(got > 0.0);
    }

    #[test]
    fn accuracy_definition() {
        let m = toy();
        let x = inputs(1, 3).remove(0);
        let all = HiddenMasks::all(m.spec(), true);
        let pred = argmax(m.forward(&x).unwrap().into_iter()) as u8;
        assert_eq!(circuit_accuracy(&m, &all, &[(&x, pred)]).unwrap(), 1.0);
        assert_eq!(circuit_accuracy(&m, &all, &[(&x, (pred + 1) % 3)]).unwrap(), 0.0);
    }

    #[test]
    fn constant_metric_collapses() {
        let plan = BootstrapPlan::new(20, 10, 1).unwrap();
        let b = bootstrap_metric(|_, _| Ok(0.75), &[5], &plan).unwrap();
        assert_eq!((b.ci_low, b.mean, b.ci_high), (0.75, 0.75, 0.75));
        assert_eq!((b.n_resamples, b.sample_size), (20, 10));
    }

    #[test]
    fn bootstrap_mean_tracks_pool_mean() {
        let pool: Vec<f64> = (0..200).map(|i| ((i * 37) % 101) as f64).collect();
        let mu = stats::mean(&pool);
        let var = pool.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / pool.len() as f64;
        let plan = BootstrapPlan::new(50, 100, 4).unwrap();
        let b = bootstrap_metric(
            |_, idx| Ok(stats::mean(&idx[0].iter().map(|&i| pool[i]).collect::<Vec<_>>())),
            &[pool.len()],
            &plan,
        )
        .unwrap();
        let se = (var / (100.0 * 50.0)).sqrt();
        assert!((b.mean - mu).abs() <= 3.0 * se, "{} vs {mu}", b.mean);
        assert!(b.ci_low <= b.mean && b.mean <= b.ci_high);
    }

    #[test]
    fn skewed_values_are_bracketed() {
        let b = BootstrapResult::from_values(&[0.0, 0.0, 100.0], 2).unwrap();
        assert!(b.ci_low <= b.mean && b.mean <= b.ci_high);
        let b = BootstrapResult::from_values(&[1.0], 2).unwrap();
        assert_eq!((b.ci_low, b.ci_high), (1.0, 1.0));
    }

    #[test]
    fn timing_is_positive() {
        let m = toy();
        let xs = inputs(20, 5);
        let refs: Vec<&[f64]> = xs.iter().map(|v| v.as_slice()).collect();
        let b = inference_timing(&m, &refs, &BootstrapPlan::new(3, 50, 0).unwrap()).unwrap();
        assert!(b.mean > 0.0 && b.ci_low > 0.0);
    }

    #[test]
    fn csv_header_is_exact() {
        let header = table2_csv(&[]);
        assert_eq!(
            header.trim_end(),
            "task,regime,logit_diff_mean,logit_diff_ci_low,logit_diff_ci_high,discovery_time_mean,discovery_time_ci_low,discovery_time_ci_high,sparsity_mean,sparsity_ci_low,sparsity_ci_high"
        );
    }

    #[test]
    fn mismatched_specs_are_rejected() {
        let a = toy();
        let b = GeomMlp::zeros(LayerSpec::new(vec![6, 4, 4, 3], 1.0).unwrap(), Activation::Silu).unwrap();
        let task = TaskPairSet {
            task_name: "t".into(),
            clean_digit: 1,
            corrupted_digit: 2,
            clean_pool: vec![crate::data::ImageSample::new(vec![0.0; 6], 1).unwrap()],
            corrupted_pool: vec![crate::data::ImageSample::new(vec![1.0; 6], 2).unwrap()],
        };
        let plan = BootstrapPlan::new(2, 4, 0).unwrap();
        let err = build_table2(&[(Regime::Vanilla, &a), (Regime::L1, &b)], &[&task], &plan, 2, 1e-4).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        let rows = build_table2(&[(Regime::Vanilla, &a), (Regime::L1, &a)], &[&task], &plan, 2, 1e-4).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].logit_difference, rows[1].logit_difference);
    }
}
