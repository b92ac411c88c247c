//! The subcommands. Each takes its parsed arguments and returns a short
//! summary for the terminal; artifacts go to disk.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, ensure, Context, Result};
use rayon::prelude::*;
use serde::Serialize;
use shapcast::aggregate::{dependence_points, feature_importance, local_explanation_csv};
use shapcast::baselines::{evaluate, fit_linear, metrics_csv, persistence, MetricReport};
use shapcast::explainers::{custom_masker_explainer, permutation_explainer, BackgroundData, SamplerConfig};
use shapcast::model::{Checkpoint, ModelParams};
use shapcast::schema::{six_month_boundaries, ForecastExample, GroupMask, Standardizer};
use shapcast::shapley::{explain, Explanation};
use shapcast::synthgen::{ground_truth_explanation, DatasetSpec, GenOptions, GroundTruthConfig, Split};
use shapcast::training::{resume, train, Flavor, StopReason, TrainState};

use crate::config::{fingerprint_of, Mode, RunConfig};
use crate::dataset::{write_series, Dataset, SeriesMeta, SCHEMA_FILE, SERIES_FILE, SERIES_META};
use crate::ingest;
use crate::output::{json_with_fingerprint, Manifest};

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum FlavorArg {
    /// Trained on random feature-group coalitions; explainable exactly.
    Shapformer,
    /// Trained on complete inputs only.
    Transformer,
}

impl From<FlavorArg> for Flavor {
    fn from(f: FlavorArg) -> Self {
        match f {
            FlavorArg::Shapformer => Flavor::Masked,
            FlavorArg::Transformer => Flavor::Unmasked,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum SplitProtocol {
    /// Last six months test, the six before validation, the rest training.
    SixMonth,
    /// Every window goes to the training split.
    None,
}

#[derive(Clone, Debug, clap::Args, Serialize)]
pub struct SynthGenArgs {
    #[arg(long)]
    pub train: usize,
    #[arg(long)]
    pub val: usize,
    #[arg(long)]
    pub test: usize,
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
    /// Write ground-truth explanations of the test split, averaging each
    /// coalition over this many resamples.
    #[arg(long, value_name = "RESAMPLES")]
    pub ground_truth: Option<usize>,
    /// Generate without pattern, walk and target noise.
    #[arg(long)]
    pub zero_noise: bool,
}

pub fn synth_gen(args: &SynthGenArgs) -> Result<String> {
    let mut spec = DatasetSpec::new(args.train, args.val, args.test, args.seed)?;
    spec.options = GenOptions {
        zero_noise: args.zero_noise,
    };
    let ds = Dataset {
        schema: spec.schema(),
        train: spec.examples(Split::Train),
        val: spec.examples(Split::Val),
        test: spec.examples(Split::Test),
    };
    ds.write(&args.out)?;
    let fp = fingerprint_of(args);
    let mut manifest = Manifest::new("synth-gen", &fp, &args.out);
    for name in [SCHEMA_FILE, "train.csv", "val.csv", "test.csv", "examples.csv"] {
        manifest.record(&args.out.join(name))?;
    }
    if let Some(resamples) = args.ground_truth {
        let config = GroundTruthConfig {
            resamples,
            seed: args.seed,
            ..GroundTruthConfig::default()
        };
        let mut lines = String::new();
        for i in 0..spec.size(Split::Test) {
            let (ex, latents) = spec.example(Split::Test, i);
            let mut e = ground_truth_explanation(ex.id, &latents, &config)?;
            // Wall time would make the file differ between identical runs.
            e.elapsed_ms = 0.0;
            lines.push_str(&serde_json::to_string(&json_with_fingerprint(&e, &fp)?)?);
            lines.push('\n');
        }
        manifest.write(&args.out.join("ground_truth.jsonl"), lines.as_bytes())?;
    }
    manifest.finish()?;
    Ok(format!(
        "wrote {} train, {} val, {} test examples to {}",
        args.train,
        args.val,
        args.test,
        args.out.display()
    ))
}

#[derive(Clone, Debug, clap::Args, Serialize)]
pub struct IngestArgs {
    /// CSV with `utc_timestamp` and `load_MW`.
    #[arg(long)]
    pub load: PathBuf,
    /// CSV with `utc_timestamp`, `temperature_C` and `precipitation_mm`.
    #[arg(long)]
    pub weather: PathBuf,
    /// One ISO date per line.
    #[arg(long)]
    pub holidays: PathBuf,
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitProtocol::SixMonth)]
    pub split: SplitProtocol,
    /// Keep every n-th window.
    #[arg(long, default_value_t = 1)]
    pub stride: usize,
}

pub fn ingest(args: &IngestArgs) -> Result<String> {
    let table = ingest::ingest(&args.load, &args.weather, &args.holidays)?;
    let schema = shapcast::schema::FeatureSchema::real();
    let boundaries = match args.split {
        SplitProtocol::SixMonth => six_month_boundaries(&table.timestamps)?.to_vec(),
        SplitProtocol::None => Vec::new(),
    };
    let meta = SeriesMeta {
        boundaries,
        stride: args.stride,
    };
    let ds = Dataset::from_series(&table, &schema, &meta)?;
    ensure!(
        !ds.train.is_empty(),
        "{} joined rows do not fill one {}-hour training window",
        table.len(),
        schema.window()
    );
    write_series(&args.out, &table, &schema, &meta)?;
    let mut manifest = Manifest::new("ingest", &fingerprint_of(args), &args.out);
    for name in [SCHEMA_FILE, SERIES_FILE, SERIES_META] {
        manifest.record(&args.out.join(name))?;
    }
    manifest.finish()?;
    Ok(format!(
        "{} hourly rows -> {} train, {} val, {} test windows",
        table.len(),
        ds.train.len(),
        ds.val.len(),
        ds.test.len()
    ))
}

#[derive(Clone, Debug, clap::Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long, value_enum, default_value_t = FlavorArg::Shapformer)]
    pub flavor: FlavorArg,
    /// Continue from the training state saved in the output directory.
    #[arg(long)]
    pub resume: bool,
}

fn load_dataset(cfg: &RunConfig) -> Result<Dataset> {
    let ds = Dataset::load(&cfg.paths.data)?;
    ensure!(
        ds.schema == cfg.schema(),
        "dataset in {} does not match the configured {:?} schema",
        cfg.paths.data.display(),
        cfg.schema
    );
    Ok(ds)
}

fn scaled(std: &Standardizer, examples: &[ForecastExample]) -> Vec<ForecastExample> {
    examples.iter().map(|e| std.apply(e)).collect()
}

fn flavor_name(f: Flavor) -> &'static str {
    match f {
        Flavor::Masked => "masked",
        Flavor::Unmasked => "unmasked",
    }
}

pub fn train_cmd(args: &TrainArgs) -> Result<String> {
    let cfg = RunConfig::load(&args.config)?;
    let seed = cfg.seed()?;
    let fp = cfg.fingerprint();
    let ds = load_dataset(&cfg)?;
    ensure!(
        !ds.train.is_empty() && !ds.val.is_empty(),
        "training needs train and val examples"
    );
    let standardizer = Standardizer::fit(&ds.train, &ds.schema)?;
    let (train_set, val_set) = (scaled(&standardizer, &ds.train), scaled(&standardizer, &ds.val));
    let template = ModelParams::init(&cfg.model, &ds.schema, seed)?;
    let flavor: Flavor = args.flavor.into();
    let state_path = cfg.paths.output.join("train_state.json");
    let outcome = if args.resume {
        let state = TrainState::load(&state_path).with_context(|| format!("loading {}", state_path.display()))?;
        resume(&train_set, &val_set, &template, state, &cfg.train, flavor)?
    } else {
        train(&train_set, &val_set, &template, &cfg.train, flavor)?
    };

    let mut manifest = Manifest::new("train", &fp, &cfg.paths.output);
    let log = shapcast::training::EpochLog::to_json_lines(&outcome.log)?;
    manifest.write(&cfg.paths.output.join("train_log.jsonl"), log.as_bytes())?;
    outcome.state.save(&state_path)?;
    manifest.record(&state_path)?;
    if let StopReason::Diverged { epoch } = outcome.stop {
        manifest.finish()?;
        return Err(shapcast::Error::Diverged { epoch }.into());
    }
    let mut ck = Checkpoint::new(&outcome.params, &standardizer);
    ck.metadata.insert("flavor".into(), flavor_name(flavor).into());
    ck.metadata.insert("config_fingerprint".into(), fp.clone());
    ck.save(&cfg.paths.checkpoint)?;
    manifest.record(&cfg.paths.checkpoint)?;
    manifest.finish()?;
    let best = outcome.log.iter().map(|e| e.val_loss).fold(f64::INFINITY, f64::min);
    Ok(format!(
        "{} epochs, best validation loss {best:.6}, stop: {:?}; checkpoint {}",
        outcome.log.len(),
        outcome.stop,
        cfg.paths.checkpoint.display()
    ))
}

struct Session {
    cfg: RunConfig,
    fingerprint: String,
    checkpoint: Checkpoint,
    params: ModelParams,
    dataset: Dataset,
}

impl Session {
    fn open(config: &Path, checkpoint: Option<&Path>) -> Result<Self> {
        let cfg = RunConfig::load(config)?;
        let path = checkpoint
            .map(Path::to_path_buf)
            .unwrap_or_else(|| cfg.paths.checkpoint.clone());
        let ck = Checkpoint::load(&path).with_context(|| format!("loading checkpoint {}", path.display()))?;
        let params = ck.params()?;
        let dataset = load_dataset(&cfg)?;
        ensure!(ck.schema == dataset.schema, "checkpoint and dataset schemas differ");
        Ok(Self {
            fingerprint: cfg.fingerprint(),
            cfg,
            checkpoint: ck,
            params,
            dataset,
        })
    }

    fn masked(&self) -> bool {
        self.checkpoint.metadata.get("flavor").map(String::as_str) == Some("masked")
    }

    fn background(&self) -> Result<BackgroundData> {
        let train = scaled(&self.checkpoint.standardizer, &self.dataset.train);
        Ok(BackgroundData::reservoir(
            &self.dataset.schema,
            &train,
            self.cfg.explain.background,
            self.cfg.seed()?,
        )?)
    }

    /// Explanation of one raw example, returned in load units.
    fn explain(
        &self,
        mode: Mode,
        example: &ForecastExample,
        sampler: &SamplerConfig,
        background: Option<&BackgroundData>,
    ) -> Result<Explanation> {
        let ex = self.checkpoint.standardizer.apply(example);
        let e = match mode {
            Mode::Exact => {
                ensure!(
                    self.masked(),
                    "exact explanations need a checkpoint trained with --flavor shapformer"
                );
                let structure = self.cfg.explain.structure.build(&self.dataset.schema);
                explain(&ex, &self.params, &structure)?
            }
            Mode::Permutation => {
                permutation_explainer(&ex, &self.params, sampler, background.context("no background data")?)?
            }
            Mode::CustomMasker => {
                custom_masker_explainer(&ex, &self.params, sampler, background.context("no background data")?)?
            }
        };
        Ok(e.to_units(&self.checkpoint.standardizer.target))
    }

    fn sampler(&self, k: Option<usize>, samples: Option<usize>, deadline: Option<f64>) -> Result<SamplerConfig> {
        let mut s = self.cfg.sampler.clone();
        s.seed = self.cfg.seed()?;
        if let Some(k) = k {
            s.permutations = k;
        }
        if let Some(n) = samples {
            s.samples = n;
        }
        if deadline.is_some() {
            s.deadline_secs = deadline;
        }
        s.validate()?;
        Ok(s)
    }
}

#[derive(Clone, Debug, clap::Args)]
pub struct ExplainArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides `paths.checkpoint`.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub example_id: u64,
    /// Overrides `explain.mode`.
    #[arg(long, value_enum)]
    pub mode: Option<Mode>,
    /// Permutations for the sampling explainers.
    #[arg(long = "k")]
    pub k: Option<usize>,
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long)]
    pub deadline_secs: Option<f64>,
    /// Defaults to `<output>/explanation_<id>_<mode>.json`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn explain_cmd(args: &ExplainArgs) -> Result<String> {
    let session = Session::open(&args.config, args.checkpoint.as_deref())?;
    let mode = args.mode.unwrap_or(session.cfg.explain.mode);
    let example = session
        .dataset
        .find(args.example_id)
        .with_context(|| format!("no example with id {}", args.example_id))?;
    let sampler = session.sampler(args.k, args.samples, args.deadline_secs)?;
    let background = match mode {
        Mode::Exact => None,
        _ => Some(session.background()?),
    };
    let e = session.explain(mode, example, &sampler, background.as_ref())?;
    let out_dir = session.cfg.paths.output.clone();
    let path = args
        .out
        .clone()
        .unwrap_or_else(|| out_dir.join(format!("explanation_{}_{}.json", args.example_id, mode.name())));
    let mut manifest = Manifest::new("explain", &session.fingerprint, &out_dir);
    manifest.write_json(&path, &e)?;
    manifest.finish()?;
    Ok(format!(
        "{} explanation of example {}: {:.1} ms, {} coalitions, {} model calls -> {}",
        mode.name(),
        args.example_id,
        e.elapsed_ms,
        e.mask_count,
        e.model_calls,
        path.display()
    ))
}

#[derive(Clone, Debug, clap::Args)]
pub struct GlobalExplainArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    pub split: SplitArg,
    /// Explain the first N examples of the split.
    #[arg(long, default_value_t = 50)]
    pub limit: usize,
    #[arg(long, value_enum)]
    pub mode: Option<Mode>,
    #[arg(long = "k")]
    pub k: Option<usize>,
    #[arg(long)]
    pub samples: Option<usize>,
    /// Per-step CSVs for the first N explained examples.
    #[arg(long, default_value_t = 1)]
    pub local: usize,
    /// Defaults to `paths.output`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn global_explain(args: &GlobalExplainArgs) -> Result<String> {
    let session = Session::open(&args.config, args.checkpoint.as_deref())?;
    let mode = args.mode.unwrap_or(session.cfg.explain.mode);
    let examples: Vec<ForecastExample> = session
        .dataset
        .split(args.split.into())
        .iter()
        .take(args.limit)
        .cloned()
        .collect();
    ensure!(!examples.is_empty(), "the selected split has no examples");
    let sampler = session.sampler(args.k, args.samples, None)?;
    let background = match mode {
        Mode::Exact => None,
        _ => Some(session.background()?),
    };
    let explanations = examples
        .iter()
        .map(|ex| session.explain(mode, ex, &sampler, background.as_ref()))
        .collect::<Result<Vec<_>>>()?;

    let dir = args.out.clone().unwrap_or_else(|| session.cfg.paths.output.clone());
    let mut manifest = Manifest::new("global-explain", &session.fingerprint, &dir);
    let mut lines = String::new();
    for e in &explanations {
        lines.push_str(&serde_json::to_string(&json_with_fingerprint(
            e,
            &session.fingerprint,
        )?)?);
        lines.push('\n');
    }
    manifest.write(&dir.join("explanations.jsonl"), lines.as_bytes())?;
    let importance = feature_importance(&explanations)?;
    manifest.write(&dir.join("importance.csv"), importance.to_csv().as_bytes())?;
    for label in &importance.labels {
        let plot = dependence_points(
            &explanations,
            &examples,
            &session.dataset.schema,
            label,
            session.cfg.explain.step,
        )?;
        manifest.write(&dir.join(format!("dependence_{label}.csv")), plot.to_csv().as_bytes())?;
    }
    for (e, ex) in explanations.iter().zip(&examples).take(args.local) {
        let csv = local_explanation_csv(e, Some(&ex.future_target))?;
        manifest.write(&dir.join(format!("local_explanation_{}.csv", ex.id)), csv.as_bytes())?;
    }
    manifest.finish()?;
    let mut summary = format!("{} {} explanations; importance (%):", explanations.len(), mode.name());
    for (l, p) in importance.labels.iter().zip(&importance.percent) {
        let _ = write!(summary, " {l}={p:.1}");
    }
    Ok(summary)
}

#[derive(Clone, Debug, clap::Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    pub split: SplitArg,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Metrics of the checkpoint, the persistence forecast and a linear model
/// on one split, in that order.
pub fn evaluate_split(
    params: &ModelParams,
    standardizer: &Standardizer,
    train_set: &[ForecastExample],
    examples: &[ForecastExample],
) -> Result<Vec<MetricReport>> {
    ensure!(!examples.is_empty(), "nothing to evaluate");
    let schema = params.schema();
    let eval_set = scaled(standardizer, examples);
    let targets: Vec<Vec<f64>> = eval_set.iter().map(|e| e.future_target.clone()).collect();
    let full = GroupMask::full(schema.n_groups());
    let model = eval_set
        .par_iter()
        .map(|e| params.forward_pruned(e, full))
        .collect::<shapcast::Result<Vec<_>>>()?;
    let persist = eval_set.iter().map(persistence).collect::<shapcast::Result<Vec<_>>>()?;
    let linear_model = fit_linear(&scaled(standardizer, train_set), schema)?;
    let linear: Vec<Vec<f64>> = eval_set.iter().map(|e| linear_model.predict(e)).collect();
    [model, persist, linear]
        .iter()
        .map(|p| Ok(evaluate(p, &targets, standardizer)?))
        .collect()
}

pub fn eval_cmd(args: &EvalArgs) -> Result<String> {
    let session = Session::open(&args.config, args.checkpoint.as_deref())?;
    let examples = session.dataset.split(args.split.into());
    let reports = evaluate_split(
        &session.params,
        &session.checkpoint.standardizer,
        &session.dataset.train,
        examples,
    )?;
    let name = if session.masked() { "shapformer" } else { "transformer" };
    let rows: Vec<(String, MetricReport)> = [name, "persistence", "linear"]
        .iter()
        .map(|s| s.to_string())
        .zip(reports)
        .collect();
    let dir = args.out.clone().unwrap_or_else(|| session.cfg.paths.output.clone());
    let mut manifest = Manifest::new("eval", &session.fingerprint, &dir);
    let csv = metrics_csv(&rows);
    manifest.write(&dir.join("metrics.csv"), csv.as_bytes())?;
    let map: std::collections::BTreeMap<&str, &MetricReport> = rows.iter().map(|(n, r)| (n.as_str(), r)).collect();
    manifest.write_json(&dir.join("metrics.json"), &map)?;
    manifest.finish()?;
    Ok(csv)
}

#[derive(Clone, Debug, clap::Args)]
pub struct BenchmarkArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Defaults to the first test example.
    #[arg(long)]
    pub example_id: Option<u64>,
    #[arg(long, default_value_t = 3)]
    pub repetitions: usize,
    #[arg(long = "k")]
    pub k: Option<usize>,
    #[arg(long)]
    pub samples: Option<usize>,
    /// Wall-time budget per sampling explanation; exceeding it records a
    /// lower bound.
    #[arg(long, default_value_t = 600.0)]
    pub deadline_secs: f64,
    /// Defaults to `<output>/benchmark.csv`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchmarkRow {
    pub mode: String,
    /// Median wall time over the repetitions.
    pub seconds: f64,
    pub model_calls: u64,
    pub mask_count: u64,
    /// The explanation hit the deadline; `seconds` is a lower bound.
    pub lower_bound: bool,
}

pub fn benchmark(args: &BenchmarkArgs) -> Result<String> {
    ensure!(args.repetitions >= 1, "need at least one repetition");
    let session = Session::open(&args.config, args.checkpoint.as_deref())?;
    let example = match args.example_id {
        Some(id) => session
            .dataset
            .find(id)
            .with_context(|| format!("no example with id {id}"))?,
        None => session.dataset.test.first().context("the test split is empty")?,
    };
    let sampler = session.sampler(args.k, args.samples, Some(args.deadline_secs))?;
    let background = session.background()?;
    let mut modes = vec![Mode::CustomMasker, Mode::Permutation];
    if session.masked() {
        modes.insert(0, Mode::Exact);
    }
    let mut rows = Vec::new();
    for mode in modes {
        let mut times = Vec::new();
        let mut row = BenchmarkRow {
            mode: mode.name().into(),
            seconds: 0.0,
            model_calls: 0,
            mask_count: 0,
            lower_bound: false,
        };
        for _ in 0..args.repetitions {
            let start = Instant::now();
            match session.explain(mode, example, &sampler, Some(&background)) {
                Ok(e) => {
                    times.push(start.elapsed().as_secs_f64());
                    row.model_calls = e.model_calls;
                    row.mask_count = e.mask_count;
                }
                Err(err) => match err.downcast_ref::<shapcast::Error>() {
                    Some(shapcast::Error::DeadlineExceeded { calls }) => {
                        times = vec![start.elapsed().as_secs_f64()];
                        row.model_calls = *calls;
                        row.lower_bound = true;
                        break;
                    }
                    _ => return Err(err),
                },
            }
        }
        times.sort_by(f64::total_cmp);
        row.seconds = times[times.len() / 2];
        rows.push(row);
    }

    let exact = rows.iter().find(|r| r.mode == "exact").map(|r| r.seconds);
    let mut csv = String::from("mode,seconds,model_calls,mask_count,lower_bound,ratio_to_exact\n");
    for r in &rows {
        let ratio = exact.map(|x| (r.seconds / x).to_string()).unwrap_or_default();
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{}",
            r.mode, r.seconds, r.model_calls, r.mask_count, r.lower_bound, ratio
        );
    }
    let dir = session.cfg.paths.output.clone();
    let path = args.out.clone().unwrap_or_else(|| dir.join("benchmark.csv"));
    let mut manifest = Manifest::new("benchmark", &session.fingerprint, &dir);
    manifest.write(&path, csv.as_bytes())?;
    manifest.finish()?;
    if rows.is_empty() {
        bail!("no explainer was benchmarked");
    }
    Ok(csv)
}
