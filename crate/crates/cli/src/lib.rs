//! The `circuitforge` command line: training, discovery, benchmark tables
//! and circuit rendering.

pub mod manifest;

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use circuitforge::data::find_mnist_file;
use circuitforge::discovery::{discover, model_id, Circuit, DiscoveryReport, PassCounts};
use circuitforge::dot::{render_dot, LARGE_EDGE_COUNT};
use circuitforge::eval::{build_table2, compute_row, plot_points, table2_csv, ComputeRow, MetricRow, PlotPoint};
use circuitforge::train::connection_cost;
use circuitforge::{
    build_pair_set, load_mnist, train, Activation, BootstrapPlan, Dataset, GeomMlp, LayerSpec, Regime, RegimeConfig,
    SplitTag, TaskPairSet, TrainReport,
};

use manifest::{read_json, write_atomic, write_json, ManifestBuilder, SCHEMA_VERSION};

#[derive(Debug, Parser)]
#[command(name = "circuitforge", version, about = "Train geometric MLPs and discover circuits by activation patching")]
pub struct Cli {
    /// Worker threads for discovery and evaluation (default: all cores).
    #[arg(long, global = true, value_parser = clap::value_parser!(u32).range(1..))]
    pub workers: Option<u32>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one regime or all five from a shared seed.
    Train(TrainArgs),
    /// Discover a circuit for one task on one bootstrap resample.
    Discover(DiscoverArgs),
    /// Build the comparison table and compute costs for trained models.
    Bench(BenchArgs),
    /// Write a circuit as a Graphviz DOT file.
    Render(RenderArgs),
    /// Print a summary of a model file.
    Describe(DescribeArgs),
    /// Extract scatter-plot point files from a table.
    PlotData(PlotDataArgs),
    /// Validate the MNIST files.
    CheckData(DataArgs),
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct DataArgs {
    /// Directory holding the four MNIST IDX files (optionally gzipped).
    #[arg(long, env = "CIRCUITFORGE_DATA_DIR")]
    pub data_dir: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    /// Clean 8, corrupted 3.
    Circle,
    /// Clean 4, corrupted 9.
    Line,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::Circle => "circle",
            Task::Line => "line",
        }
    }

    /// `(clean, corrupted)` digits.
    pub fn digits(self) -> (u8, u8) {
        match self {
            Task::Circle => (8, 3),
            Task::Line => (4, 9),
        }
    }

    pub fn pair_set(self, test: &Dataset) -> Result<TaskPairSet> {
        let (c, k) = self.digits();
        Ok(build_pair_set(test, c, k, self.name())?)
    }
}

/// Regimes selected on the command line, in the order given.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RegimeList(pub Vec<Regime>);

fn parse_regimes(s: &str) -> std::result::Result<RegimeList, String> {
    if s.eq_ignore_ascii_case("all") {
        return Ok(RegimeList(Regime::ALL.to_vec()));
    }
    let mut out = Vec::new();
    for part in s.split(',') {
        let r: Regime = part.trim().parse().map_err(|e: circuitforge::Error| e.to_string())?;
        if !out.contains(&r) {
            out.push(r);
        }
    }
    Ok(RegimeList(out))
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, default_value = "runs")]
    pub out_dir: PathBuf,
    /// Model file path when training a single regime.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Report path when training a single regime.
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// `all` or a comma-separated list of vanilla, l1, l1-local, l1-swap, bimt.
    #[arg(long, default_value = "all", value_parser = parse_regimes)]
    pub regime: RegimeList,
    #[arg(long, default_value_t = 20_000)]
    pub steps: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1e-3)]
    pub lambda: f64,
    #[arg(long, default_value_t = 200)]
    pub swap_interval: usize,
    #[arg(long, default_value_t = 100)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub learning_rate: f64,
    /// Hidden layer widths.
    #[arg(long, value_delimiter = ',', default_value = "100,100")]
    pub hidden: Vec<usize>,
    #[arg(long, default_value_t = 1.0)]
    pub layer_spacing: f64,
    #[arg(long, default_value = "silu")]
    pub activation: Activation,
    #[arg(long, default_value_t = 100)]
    pub log_interval: usize,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct PlanArgs {
    #[arg(long, default_value_t = 10)]
    pub k: usize,
    /// Minimum |w| for an edge to belong to a circuit.
    #[arg(long, default_value_t = 1e-4)]
    pub epsilon: f64,
    #[arg(long, default_value_t = 50)]
    pub resamples: usize,
    #[arg(long, default_value_t = 500)]
    pub sample_size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

impl PlanArgs {
    fn plan(&self) -> Result<BootstrapPlan> {
        Ok(BootstrapPlan::new(self.resamples, self.sample_size, self.seed)?)
    }
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct DiscoverArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, value_enum, default_value = "circle")]
    pub task: Task,
    /// Overrides the task's clean digit.
    #[arg(long, value_parser = clap::value_parser!(u8).range(0..=9))]
    pub clean: Option<u8>,
    /// Overrides the task's corrupted digit.
    #[arg(long, value_parser = clap::value_parser!(u8).range(0..=9))]
    pub corrupted: Option<u8>,
    #[command(flatten)]
    pub plan: PlanArgs,
    #[arg(long, default_value_t = 0)]
    pub resample_index: usize,
    #[arg(long, visible_alias = "report")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct BenchArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Directory with `<regime>.gmlp` and `<regime>.train.json` files.
    #[arg(long)]
    pub models_dir: PathBuf,
    /// Defaults to the models directory.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    #[arg(long, value_enum, value_delimiter = ',', default_value = "circle,line")]
    pub tasks: Vec<Task>,
    #[arg(long, default_value = "all", value_parser = parse_regimes)]
    pub regimes: RegimeList,
    #[command(flatten)]
    pub plan: PlanArgs,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct RenderArgs {
    #[arg(long)]
    pub circuit: PathBuf,
    #[arg(long, visible_alias = "dot")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct DescribeArgs {
    #[arg(long)]
    pub model: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct PlotDataArgs {
    #[arg(long)]
    pub table: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainOutput {
    pub schema_version: u32,
    pub regime: Regime,
    pub config: RegimeConfig,
    pub report: TrainReport,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DiscoverOutput {
    pub schema_version: u32,
    pub task: Task,
    pub clean_digit: u8,
    pub corrupted_digit: u8,
    pub model_id: String,
    pub resample_index: usize,
    pub plan: BootstrapPlan,
    pub discovery_time_s: f64,
    pub circuit_sparsity: f64,
    pub passes: PassCounts,
    pub scores: Vec<Vec<f64>>,
    pub circuit: Circuit,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Table2 {
    pub schema_version: u32,
    pub k: usize,
    pub edge_epsilon: f64,
    pub plan: BootstrapPlan,
    pub rows: Vec<MetricRow>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ComputeTable {
    pub schema_version: u32,
    pub rows: Vec<ComputeRow>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PlotFile {
    pub schema_version: u32,
    pub x: String,
    pub y: String,
    pub points: Vec<PlotPoint>,
}

pub fn model_path(dir: &Path, regime: Regime) -> PathBuf {
    dir.join(format!("{}.gmlp", regime.name()))
}

pub fn report_path(dir: &Path, regime: Regime) -> PathBuf {
    dir.join(format!("{}.train.json", regime.name()))
}

fn mnist_inputs(dir: &Path, splits: &[SplitTag]) -> Vec<PathBuf> {
    splits
        .iter()
        .flat_map(|&s| ["images", "labels"].map(|k| find_mnist_file(dir, s, k)))
        .filter_map(|p| p.ok())
        .collect()
}

fn load_split(dir: &Path, split: SplitTag) -> Result<Dataset> {
    load_mnist(dir, split).with_context(|| format!("loading MNIST {split:?} split from {}", dir.display()))
}

fn load_model(path: &Path) -> Result<GeomMlp> {
    GeomMlp::load(path).with_context(|| format!("loading model {}", path.display()))
}

pub fn cmd_train(args: &TrainArgs) -> Result<()> {
    let mut widths = vec![circuitforge::model::MNIST_INPUT];
    widths.extend(&args.hidden);
    widths.push(circuitforge::model::MNIST_CLASSES);
    let spec = LayerSpec::new(widths, args.layer_spacing)?;
    let base = RegimeConfig {
        regime: Regime::Vanilla,
        lambda: args.lambda,
        swap_interval: args.swap_interval,
        steps: args.steps,
        batch_size: args.batch_size,
        learning_rate: args.learning_rate,
        seed: args.seed,
        spec,
        activation: args.activation,
        log_interval: args.log_interval,
    };
    base.validate()?;
    if (args.out.is_some() || args.report.is_some()) && args.regime.0.len() != 1 {
        bail!("--out and --report need exactly one --regime");
    }

    let train_set = load_split(&args.data.data_dir, SplitTag::Train)?;
    let test_set = load_split(&args.data.data_dir, SplitTag::Test)?;
    let manifest_dir = match &args.out {
        Some(p) => p.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new(".")).to_path_buf(),
        None => args.out_dir.clone(),
    };
    fs::create_dir_all(&manifest_dir).with_context(|| format!("creating {}", manifest_dir.display()))?;
    let mut manifest = ManifestBuilder::start("train", args, serde_json::json!({ "seed": args.seed }))?;
    for p in mnist_inputs(&args.data.data_dir, &[SplitTag::Train, SplitTag::Test]) {
        manifest.input(p);
    }

    for &regime in &args.regime.0 {
        let cfg = RegimeConfig { regime, ..base.clone() };
        log::info!("training {regime} for {} steps", cfg.steps);
        let (model, report) = train(&cfg, &train_set, &test_set).with_context(|| format!("training {regime}"))?;
        log::info!(
            "{regime}: {:.1}s, test accuracy {:.4}, {} swaps",
            report.wall_time_s,
            report.final_test_accuracy,
            report.swap_log.len()
        );
        let mp = args.out.clone().unwrap_or_else(|| model_path(&args.out_dir, regime));
        let rp = args.report.clone().unwrap_or_else(|| report_path(&args.out_dir, regime));
        for p in [&mp, &rp] {
            if let Some(parent) = p.parent().filter(|p| !p.as_os_str().is_empty()) {
                fs::create_dir_all(parent)?;
            }
        }
        model.save(&mp)?;
        write_json(
            &rp,
            &TrainOutput {
                schema_version: SCHEMA_VERSION,
                regime,
                config: cfg,
                report,
            },
        )?;
        manifest.output(mp);
        manifest.output(rp);
    }
    manifest.finish(&manifest_dir)?;
    Ok(())
}

pub fn cmd_discover(args: &DiscoverArgs) -> Result<()> {
    let plan = args.plan.plan()?;
    let model = load_model(&args.model)?;
    let test = load_split(&args.data.data_dir, SplitTag::Test)?;
    let (c, k) = args.task.digits();
    let pairs = build_pair_set(&test, args.clean.unwrap_or(c), args.corrupted.unwrap_or(k), args.task.name())?;
    let report: DiscoveryReport = discover(&model, &pairs, &plan, args.resample_index, args.plan.k, args.plan.epsilon)?;
    log::info!(
        "{}: {} edges, sparsity {:.4}, {:.3}s",
        args.task.name(),
        report.circuit.edges.len(),
        report.circuit_sparsity,
        report.discovery_time_s
    );
    let out = DiscoverOutput {
        schema_version: SCHEMA_VERSION,
        task: args.task,
        clean_digit: pairs.clean_digit,
        corrupted_digit: pairs.corrupted_digit,
        model_id: model_id(&model),
        resample_index: args.resample_index,
        plan,
        discovery_time_s: report.discovery_time_s,
        circuit_sparsity: report.circuit_sparsity,
        passes: report.passes,
        scores: report.table.scores,
        circuit: report.circuit,
    };
    if let Some(parent) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    write_json(&args.out, &out)?;
    let mut manifest = ManifestBuilder::start("discover", args, serde_json::json!({ "bootstrap": plan.seed }))?;
    manifest.input(&args.model);
    for p in mnist_inputs(&args.data.data_dir, &[SplitTag::Test]) {
        manifest.input(p);
    }
    manifest.output(&args.out);
    manifest.finish(args.out.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new(".")))?;
    Ok(())
}

fn write_plot_files(dir: &Path, rows: &[MetricRow]) -> Result<[PathBuf; 2]> {
    let (ld, time) = plot_points(rows);
    let a = dir.join("plot_sparsity_logit_diff.json");
    let b = dir.join("plot_sparsity_discovery_time.json");
    write_json(
        &a,
        &PlotFile {
            schema_version: SCHEMA_VERSION,
            x: "circuit_sparsity".into(),
            y: "logit_difference".into(),
            points: ld,
        },
    )?;
    write_json(
        &b,
        &PlotFile {
            schema_version: SCHEMA_VERSION,
            x: "circuit_sparsity".into(),
            y: "discovery_time_s".into(),
            points: time,
        },
    )?;
    Ok([a, b])
}

pub fn cmd_bench(args: &BenchArgs) -> Result<()> {
    let plan = args.plan.plan()?;
    let out_dir = args.out_dir.clone().unwrap_or_else(|| args.models_dir.clone());
    let mut manifest = ManifestBuilder::start("bench", args, serde_json::json!({ "bootstrap": plan.seed }))?;

    let mut models = Vec::new();
    let mut reports = Vec::new();
    for &regime in &args.regimes.0 {
        let mp = model_path(&args.models_dir, regime);
        if !mp.exists() {
            bail!("missing model for regime {regime}: {}", mp.display());
        }
        let rp = report_path(&args.models_dir, regime);
        let report: TrainOutput = read_json(&rp)?;
        models.push((regime, load_model(&mp)?));
        reports.push(report.report);
        manifest.input(mp);
        manifest.input(rp);
    }
    let test = load_split(&args.data.data_dir, SplitTag::Test)?;
    for p in mnist_inputs(&args.data.data_dir, &[SplitTag::Test]) {
        manifest.input(p);
    }
    let tasks = args.tasks.iter().map(|t| t.pair_set(&test)).collect::<Result<Vec<_>>>()?;
    let task_refs: Vec<&TaskPairSet> = tasks.iter().collect();
    let model_refs: Vec<(Regime, &GeomMlp)> = models.iter().map(|(r, m)| (*r, m)).collect();

    let rows = build_table2(&model_refs, &task_refs, &plan, args.plan.k, args.plan.epsilon)?;

    let samples: Vec<&[f64]> = test.samples().iter().map(|s| s.pixels.as_slice()).collect();
    let compute = models
        .iter()
        .zip(&reports)
        .map(|((regime, m), rep)| Ok(compute_row(*regime, rep, m, &samples, &plan)?))
        .collect::<Result<Vec<_>>>()?;

    fs::create_dir_all(&out_dir)?;
    let table_json = out_dir.join("table2.json");
    write_json(
        &table_json,
        &Table2 {
            schema_version: SCHEMA_VERSION,
            k: args.plan.k,
            edge_epsilon: args.plan.epsilon,
            plan,
            rows: rows.clone(),
        },
    )?;
    let table_csv = out_dir.join("table2.csv");
    write_atomic(&table_csv, table2_csv(&rows).as_bytes())?;
    let compute_json = out_dir.join("compute.json");
    write_json(
        &compute_json,
        &ComputeTable {
            schema_version: SCHEMA_VERSION,
            rows: compute,
        },
    )?;
    for p in [table_json, table_csv, compute_json].into_iter().chain(write_plot_files(&out_dir, &rows)?) {
        manifest.output(p);
    }
    manifest.finish(&out_dir)?;
    Ok(())
}

/// Circuit from either a `discover` output or a bare circuit object.
pub fn read_circuit(path: &Path) -> Result<Circuit> {
    let value: serde_json::Value = read_json(path)?;
    let inner = value.get("circuit").cloned().unwrap_or(value);
    let circuit: Circuit = serde_json::from_value(inner).with_context(|| format!("{} is not a circuit file", path.display()))?;
    circuit.validate()?;
    Ok(circuit)
}

pub fn cmd_render(args: &RenderArgs) -> Result<()> {
    let circuit = read_circuit(&args.circuit)?;
    if circuit.edges.len() > LARGE_EDGE_COUNT {
        log::warn!(
            "circuit has {} edges; the DOT file will be large and slow to lay out",
            circuit.edges.len()
        );
    }
    write_atomic(&args.out, render_dot(&circuit).as_bytes())?;
    log::info!("wrote {} ({} edges)", args.out.display(), circuit.edges.len());
    Ok(())
}

pub fn cmd_describe(args: &DescribeArgs) -> Result<()> {
    let model = load_model(&args.model)?;
    let spec = model.spec();
    let summary = serde_json::json!({
        "schema_version": SCHEMA_VERSION,
        "model_id": model_id(&model),
        "widths": spec.widths,
        "layer_spacing": spec.layer_spacing,
        "activation": model.activation().to_string(),
        "parameters": spec.parameter_count(),
        "edges": spec.total_edges(),
        "edges_above_1e-4": model.nonzero_edge_count(1e-4),
        "connection_cost": connection_cost(&model),
    });
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(())
}

pub fn cmd_plot_data(args: &PlotDataArgs) -> Result<()> {
    let table: Table2 = read_json(&args.table)?;
    fs::create_dir_all(&args.out_dir)?;
    write_plot_files(&args.out_dir, &table.rows)?;
    Ok(())
}

pub fn cmd_check_data(args: &DataArgs) -> Result<()> {
    let mut report = serde_json::Map::new();
    for split in [SplitTag::Train, SplitTag::Test] {
        let ds = load_split(&args.data_dir, split)?;
        report.insert(
            format!("{split:?}").to_lowercase(),
            serde_json::json!({ "samples": ds.len(), "label_counts": ds.label_counts() }),
        );
        if split == SplitTag::Test {
            for task in [Task::Circle, Task::Line] {
                let p = task.pair_set(&ds)?;
                report.insert(
                    task.name().into(),
                    serde_json::json!({ "clean": p.clean_pool.len(), "corrupted": p.corrupted_pool.len() }),
                );
            }
        }
    }
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

pub fn run(cli: &Cli) -> Result<()> {
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cli.workers {
        pool = pool.num_threads(n as usize);
    }
    let pool = pool.build().context("starting worker pool")?;
    pool.install(|| match &cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Discover(a) => cmd_discover(a),
        Command::Bench(a) => cmd_bench(a),
        Command::Render(a) => cmd_render(a),
        Command::Describe(a) => cmd_describe(a),
        Command::PlotData(a) => cmd_plot_data(a),
        Command::CheckData(a) => cmd_check_data(a),
    })
}

/// Parse, run and map the outcome to an exit code: 0 success, 1 runtime
/// failure, 2 usage error.
pub fn main_with_args<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).try_init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
