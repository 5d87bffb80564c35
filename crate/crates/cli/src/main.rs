//! `autodstsg` command line.
//!
//! An experiment lives in one run directory. `search` creates it (under
//! `$AUTODSTSG_RUNS`, default `runs/`, with a timestamped name unless
//! `--run-dir` is given) and `train`, `eval` and `predict` read from and add
//! to it. Every verb merges its resolved configuration into `config.json`.
//!
//! Usage errors exit with 2. Runtime failures print one line
//! `error class=<class> msg=<message>` to stderr and exit with 1.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use autodstsg::metagraph::{
    self, build_temporal_graph, read_temporal_cache, series_content_hash, write_temporal_cache, DtwConfig,
    MetaGraphs, TemporalSidecar, EDGES_FILE,
};
use autodstsg::model::{build_model, load_model, save_model, GssSharing, ModelConfig, ModelState};
use autodstsg::pipeline::{load_dataset, write_dataset, PreparedData, Split, WindowSpec};
use autodstsg::structure::{report_structures, SubChoice};
use autodstsg::synth::{synthesize_planted, PlantedConfig};
use autodstsg::trainer::{
    baseline_predictions, compute_metrics, evaluate_metrics, history_csv, predict_split, search_structures,
    train_final, Baseline, SearchConfig, TrainConfig, DEFAULT_MAPE_THRESHOLD,
};
use autodstsg::{parallel, Error, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

const RUNS_ENV: &str = "AUTODSTSG_RUNS";
const CONFIG_FILE: &str = "config.json";
const GRAPHS_DIR: &str = "graphs";
const METRICS_FILE: &str = "metrics.json";
const BASELINES_FILE: &str = "baselines.json";
const HISTORY_FILE: &str = "history.csv";
const SEARCH_HISTORY_FILE: &str = "search_history.csv";
const SEARCH_LOG_FILE: &str = "search_log.json";
const STRUCTURE_REPORT_FILE: &str = "structure_report.json";
const PREDICTIONS_DIR: &str = "predictions";
const GROUND_TRUTH_FILE: &str = "ground_truth.json";

#[derive(Parser)]
#[command(name = "autodstsg", version, about = "Searched spatio-temporal synchronous graph forecasting")]
struct Cli {
    /// Worker threads for DTW, batched evaluation and kernels.
    #[arg(long, global = true, env = "AUTODSTSG_WORKERS")]
    workers: Option<usize>,
    #[command(subcommand)]
    verb: Verb,
}

#[derive(Subcommand)]
enum Verb {
    /// Generate a planted-structure dataset.
    Synth(SynthArgs),
    /// Compute and cache the DTW temporal graph of a dataset.
    BuildGraphs(GraphArgs),
    /// Search block structures and start a run directory.
    Search(SearchArgs),
    /// Train the finalised network of a run.
    Train(TrainArgs),
    /// Test-split metrics for a run.
    Eval(EvalArgs),
    /// Write a prediction dump for a run.
    Predict(PredictArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum PlantedSub {
    #[value(name = "SG", alias = "sg")]
    Sg,
    #[value(name = "TG", alias = "tg")]
    Tg,
    #[value(name = "TC", alias = "tc")]
    Tc,
}

impl From<PlantedSub> for SubChoice {
    fn from(p: PlantedSub) -> Self {
        match p {
            PlantedSub::Sg => SubChoice::Sg,
            PlantedSub::Tg => SubChoice::Tg,
            PlantedSub::Tc => SubChoice::Tc,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Sharing {
    PerBlock,
    PerLayer,
}

impl From<Sharing> for GssSharing {
    fn from(s: Sharing) -> Self {
        match s {
            Sharing::PerBlock => GssSharing::PerBlock,
            Sharing::PerLayer => GssSharing::PerLayer,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Valid,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Valid => Split::Valid,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 24)]
    nodes: usize,
    #[arg(long, default_value_t = 2000)]
    steps: usize,
    #[arg(long, value_enum, default_value = "SG")]
    planted_sub: PlantedSub,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    clusters: Option<usize>,
    #[arg(long)]
    rho: Option<f64>,
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    observation_noise: Option<f64>,
    #[arg(long)]
    seasonal_amplitude: Option<f64>,
    /// Dataset directory; defaults to `data/` inside a fresh run directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct DtwArgs {
    /// Fraction of node pairs kept as temporal edges.
    #[arg(long, default_value_t = 0.01)]
    sparsity: f64,
    /// Sakoe-Chiba half-width; unconstrained when absent.
    #[arg(long)]
    band_radius: Option<usize>,
    /// Use only the first N training steps of each series.
    #[arg(long)]
    length_cap: Option<usize>,
}

impl DtwArgs {
    fn config(&self) -> DtwConfig {
        DtwConfig {
            band_radius: self.band_radius,
            series_length_cap: self.length_cap,
        }
    }
}

#[derive(Args)]
struct DataArgs {
    /// Dataset directory (meta.json, flow.f32, edges.csv).
    #[arg(long)]
    data: PathBuf,
    /// Train, validation and test fractions.
    #[arg(long, value_delimiter = ',', num_args = 3, default_values_t = [0.6, 0.2, 0.2])]
    split: Vec<f64>,
    #[arg(long, default_value_t = 12)]
    history: usize,
    #[arg(long, default_value_t = 12)]
    horizon: usize,
}

#[derive(Args)]
struct GraphArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    dtw: DtwArgs,
    /// Cache directory; defaults to the dataset directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SearchArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    dtw: DtwArgs,
    #[arg(long)]
    run_dir: Option<PathBuf>,
    #[arg(long, default_value_t = 40)]
    hidden: usize,
    #[arg(long, default_value_t = 2)]
    hops: usize,
    #[arg(long, value_delimiter = ',', default_values_t = [1, 2, 4, 4])]
    dilations: Vec<usize>,
    #[arg(long, value_enum, default_value = "per-block")]
    gss_sharing: Sharing,
    #[arg(long, default_value_t = 60)]
    epochs: usize,
    #[arg(long, default_value_t = 15)]
    patience: usize,
    #[arg(long, default_value_t = 1e-3)]
    weight_lr: f64,
    #[arg(long, default_value_t = 1e-3)]
    arch_lr: f64,
    #[arg(long, default_value_t = 64)]
    batch_size: usize,
    #[arg(long)]
    max_batches: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Save the freshly initialised model without searching.
    #[arg(long)]
    init_only: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    run_dir: PathBuf,
    #[arg(long, default_value_t = 200)]
    epochs: usize,
    #[arg(long, default_value_t = 30)]
    patience: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 64)]
    batch_size: usize,
    #[arg(long)]
    max_batches: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Reinitialise weights instead of warm-starting from search.
    #[arg(long)]
    reinit: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    run_dir: PathBuf,
    #[arg(long, default_value_t = 64)]
    batch_size: usize,
    /// Entries with targets below this are left out of MAPE.
    #[arg(long, default_value_t = DEFAULT_MAPE_THRESHOLD)]
    mape_threshold: f64,
    /// Also score last-observation and historical-average baselines.
    #[arg(long)]
    baselines: bool,
    /// Season length for the historical-average baseline.
    #[arg(long, default_value_t = 288)]
    period: usize,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    run_dir: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
    #[arg(long, default_value_t = 64)]
    batch_size: usize,
    /// Dump directory; defaults to `predictions/<split>` in the run.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn fresh_run_dir(verb: &str) -> PathBuf {
    let root = std::env::var_os(RUNS_ENV).map_or_else(|| PathBuf::from("runs"), PathBuf::from);
    let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%S%.3fZ");
    root.join(format!("{verb}-{stamp}"))
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

fn read_config(run: &Path) -> Result<Value> {
    let path = run.join(CONFIG_FILE);
    if !path.exists() {
        return Err(Error::NotFound(path));
    }
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

/// Merge `section` into the run's `config.json` under `verb`.
fn record_config(run: &Path, verb: &str, section: Value) -> Result<()> {
    let mut cfg = match read_config(run) {
        Ok(v) => v,
        Err(Error::NotFound(_)) => json!({ "version": env!("CARGO_PKG_VERSION") }),
        Err(e) => return Err(e),
    };
    cfg[verb] = section;
    write_json(&run.join(CONFIG_FILE), &cfg)
}

fn prepare(data: &Path, split: &[f64], window: WindowSpec) -> Result<PreparedData> {
    let ds = load_dataset(data)?;
    PreparedData::new(ds, (split[0], split[1], split[2]), window)
}

fn absolute(p: &Path) -> Result<PathBuf> {
    fs::canonicalize(p).map_err(|_| Error::NotFound(p.to_path_buf()))
}

/// Temporal graph from a matching cache in `dir` (when given), else computed
/// and cached in `cache` (when given).
fn temporal_graph(
    data: &PreparedData,
    dir: Option<&Path>,
    dtw: &DtwArgs,
    cache: Option<&Path>,
) -> Result<(MetaGraphs, TemporalSidecar)> {
    let n = data.dataset.n_nodes();
    let series = data.training_series(dtw.length_cap);
    let hash = series_content_hash(&series);
    if let Some(Ok((a_tg, sidecar))) = dir.map(|d| read_temporal_cache(d, n)) {
        let reusable = sidecar.series_hash == hash
            && (sidecar.source == "planted"
                || (sidecar.sparsity_target == Some(dtw.sparsity) && sidecar.band_radius == dtw.band_radius));
        if reusable {
            let mut meta = MetaGraphs::new(data.dataset.spatial.clone(), a_tg)?;
            meta.epsilon = sidecar.epsilon;
            meta.sparsity_target = sidecar.sparsity_target;
            return Ok((meta, sidecar));
        }
    }
    let tg = build_temporal_graph(&series, dtw.sparsity, &dtw.config())?;
    let sidecar = TemporalSidecar {
        epsilon: Some(tg.epsilon),
        sparsity_target: Some(tg.sparsity_target),
        band_radius: dtw.band_radius,
        series_hash: hash,
        source: "dtw".into(),
    };
    if let Some(c) = cache {
        fs::create_dir_all(c)?;
        write_temporal_cache(c, &tg.a_tg, &sidecar)?;
    }
    let mut meta = MetaGraphs::new(data.dataset.spatial.clone(), tg.a_tg)?;
    meta.epsilon = Some(tg.epsilon);
    meta.sparsity_target = Some(tg.sparsity_target);
    Ok((meta, sidecar))
}

/// Everything a later verb needs to reload a run.
struct Run {
    dir: PathBuf,
    data: PreparedData,
    meta: MetaGraphs,
    model: ModelState,
}

fn open_run(dir: &Path) -> Result<Run> {
    let cfg = read_config(dir)?;
    let search = &cfg["search"];
    let missing = || Error::Config(format!("{} has no search section", dir.join(CONFIG_FILE).display()));
    let data_dir = search["data"].as_str().ok_or_else(missing)?;
    let split: Vec<f64> = serde_json::from_value(search["split"].clone())?;
    let window: WindowSpec = serde_json::from_value(search["window"].clone())?;
    let data = prepare(Path::new(data_dir), &split, window)?;
    let graphs = dir.join(GRAPHS_DIR);
    let n = data.dataset.n_nodes();
    let a_sg = metagraph::read_edges_csv(&graphs.join(EDGES_FILE), n)?;
    let (a_tg, sidecar) = read_temporal_cache(&graphs, n)?;
    let mut meta = MetaGraphs::new(a_sg, a_tg)?;
    meta.epsilon = sidecar.epsilon;
    meta.sparsity_target = sidecar.sparsity_target;
    let model = load_model(dir, &meta)?;
    Ok(Run {
        dir: dir.to_path_buf(),
        data,
        meta,
        model,
    })
}

fn synth(args: &SynthArgs) -> Result<PathBuf> {
    let mut cfg = PlantedConfig::new(args.nodes, args.steps, args.planted_sub.into(), args.seed);
    if let Some(v) = args.clusters {
        cfg.clusters = v;
    }
    if let Some(v) = args.rho {
        cfg.rho = v;
    }
    if let Some(v) = args.noise {
        cfg.noise = v;
    }
    if let Some(v) = args.observation_noise {
        cfg.observation_noise = v;
    }
    if let Some(v) = args.seasonal_amplitude {
        cfg.seasonal_amplitude = v;
    }
    let out = args.out.clone().unwrap_or_else(|| fresh_run_dir("synth").join("data"));
    let planted = synthesize_planted(&cfg)?;
    write_dataset(&out, &planted.dataset)?;
    // Hash what readers will see: the f32 values on disk.
    let data = PreparedData::standard(load_dataset(&out)?)?;
    let sidecar = TemporalSidecar {
        epsilon: None,
        sparsity_target: None,
        band_radius: None,
        series_hash: series_content_hash(&data.training_series(None)),
        source: "planted".into(),
    };
    write_temporal_cache(&out, &planted.meta.a_tg, &sidecar)?;
    write_json(
        &out.join(GROUND_TRUTH_FILE),
        &json!({ "planted_sub": planted.ground_truth, "clusters": planted.clusters, "config": cfg }),
    )?;
    Ok(out)
}

fn build_graphs(args: &GraphArgs) -> Result<PathBuf> {
    let d = &args.data;
    let data = prepare(&d.data, &d.split, WindowSpec { history: d.history, horizon: d.horizon })?;
    let out = args.out.clone().unwrap_or_else(|| d.data.clone());
    let (meta, sidecar) = temporal_graph(&data, None, &args.dtw, None)?;
    fs::create_dir_all(&out)?;
    write_temporal_cache(&out, &meta.a_tg, &sidecar)?;
    fs::write(out.join(EDGES_FILE), metagraph::edges_csv(&meta.a_sg))?;
    eprintln!(
        "temporal graph: {} edges, epsilon {:?}, source {}",
        metagraph::count_nonzero(&meta.a_tg) / 2,
        sidecar.epsilon,
        sidecar.source
    );
    Ok(out)
}

fn search(args: &SearchArgs) -> Result<PathBuf> {
    let d = &args.data;
    let window = WindowSpec {
        history: d.history,
        horizon: d.horizon,
    };
    let data_dir = absolute(&d.data)?;
    let data = prepare(&data_dir, &d.split, window)?;
    let run = args.run_dir.clone().unwrap_or_else(|| fresh_run_dir("search"));
    let graphs = run.join(GRAPHS_DIR);
    let (meta, sidecar) = temporal_graph(&data, Some(&data_dir), &args.dtw, Some(&data_dir))?;
    fs::create_dir_all(&graphs)?;
    fs::write(graphs.join(EDGES_FILE), metagraph::edges_csv(&meta.a_sg))?;
    write_temporal_cache(&graphs, &meta.a_tg, &sidecar)?;

    let mut model_cfg = ModelConfig::for_data(&data);
    model_cfg.hidden_dim = args.hidden;
    model_cfg.hop_count = args.hops;
    model_cfg.dilations = args.dilations.clone();
    model_cfg.gss_sharing = args.gss_sharing.into();
    let search_cfg = SearchConfig {
        epochs: args.epochs,
        patience: args.patience,
        weight_lr: args.weight_lr,
        arch_lr: args.arch_lr,
        batch_size: args.batch_size,
        seed: args.seed,
        max_batches_per_epoch: args.max_batches,
    };
    if !args.init_only {
        search_cfg.validate()?;
    }
    record_config(
        &run,
        "search",
        json!({
            "data": data_dir.to_string_lossy(),
            "split": d.split,
            "window": window,
            "dtw": args.dtw.config(),
            "sparsity_target": args.dtw.sparsity,
            "temporal_graph": sidecar,
            "model": model_cfg,
            "search": search_cfg,
            "model_seed": args.seed,
            "init_only": args.init_only,
        }),
    )?;
    let mut model = build_model(&model_cfg, &meta, args.seed)?;
    if !args.init_only {
        let outcome = search_structures(&mut model, &data, &search_cfg)?;
        fs::write(run.join(SEARCH_HISTORY_FILE), history_csv(&outcome.history))?;
        write_json(&run.join(SEARCH_LOG_FILE), &outcome.log)?;
        write_json(&run.join(STRUCTURE_REPORT_FILE), &report_structures(&outcome.structure))?;
        eprintln!(
            "search: best epoch {} valid L1 {:.4}",
            outcome.best_epoch, outcome.best_valid_loss
        );
    }
    save_model(&model, &run)?;
    Ok(run)
}

fn train(args: &TrainArgs) -> Result<PathBuf> {
    let Run { dir, data, mut model, .. } = open_run(&args.run_dir)?;
    if model.structure.is_none() {
        return Err(Error::State(format!(
            "{} holds no finalised structure; run search without --init-only first",
            dir.display()
        )));
    }
    let cfg = TrainConfig {
        epochs: args.epochs,
        patience: args.patience,
        lr: args.lr,
        batch_size: args.batch_size,
        seed: args.seed,
        reinit_weights: args.reinit,
        max_batches_per_epoch: args.max_batches,
    };
    cfg.validate()?;
    record_config(&dir, "train", serde_json::to_value(&cfg)?)?;
    let outcome = train_final(&mut model, &data, &cfg)?;
    fs::write(dir.join(HISTORY_FILE), history_csv(&outcome.history))?;
    save_model(&model, &dir)?;
    eprintln!(
        "train: best epoch {} valid MAE {:.4}",
        outcome.best_epoch, outcome.best_valid_mae
    );
    Ok(dir)
}

fn eval(args: &EvalArgs) -> Result<PathBuf> {
    let run = open_run(&args.run_dir)?;
    record_config(
        &run.dir,
        "eval",
        json!({
            "batch_size": args.batch_size,
            "mape_threshold": args.mape_threshold,
            "baselines": args.baselines,
            "period": args.period,
        }),
    )?;
    let (report, _) = evaluate_metrics(&run.model, &run.data, args.batch_size, args.mape_threshold)?;
    write_json(&run.dir.join(METRICS_FILE), &report)?;
    if args.baselines {
        let last = baseline_predictions(&run.data, Split::Test, Baseline::LastObservation)?;
        let ha = baseline_predictions(&run.data, Split::Test, Baseline::HistoricalAverage { period: args.period })?;
        write_json(
            &run.dir.join(BASELINES_FILE),
            &json!({
                "last_observation": compute_metrics(&last, args.mape_threshold)?,
                "historical_average": compute_metrics(&ha, args.mape_threshold)?,
            }),
        )?;
    }
    eprintln!(
        "eval: MAE {:.4} RMSE {:.4} MAPE {:.2}% over {} windows ({} nodes, epsilon {:?})",
        report.mae,
        report.rmse,
        report.mape_percent,
        report.windows,
        run.meta.n_nodes,
        run.meta.epsilon
    );
    Ok(run.dir)
}

fn predict(args: &PredictArgs) -> Result<PathBuf> {
    let run = open_run(&args.run_dir)?;
    let split: Split = args.split.into();
    let name = serde_json::to_value(split)?.as_str().unwrap_or("test").to_string();
    let out = args.out.clone().unwrap_or_else(|| run.dir.join(PREDICTIONS_DIR).join(&name));
    record_config(
        &run.dir,
        "predict",
        json!({ "split": split, "batch_size": args.batch_size, "out": out.to_string_lossy() }),
    )?;
    predict_split(&run.model, &run.data, split, args.batch_size)?.write(&out)?;
    Ok(out)
}

fn dispatch(cli: &Cli) -> Result<PathBuf> {
    match &cli.verb {
        Verb::Synth(a) => synth(a),
        Verb::BuildGraphs(a) => build_graphs(a),
        Verb::Search(a) => search(a),
        Verb::Train(a) => train(a),
        Verb::Eval(a) => eval(a),
        Verb::Predict(a) => predict(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(w) = cli.workers {
        if w == 0 {
            eprintln!("error class=config msg=--workers must be positive");
            return ExitCode::from(1);
        }
        parallel::set_workers(w);
    }
    match dispatch(&cli) {
        Ok(path) => {
            println!("{}", path.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            let msg = e.to_string().replace(['\n', '\r'], " ");
            eprintln!("error class={} msg={msg}", e.class());
            ExitCode::from(1)
        }
    }
}
