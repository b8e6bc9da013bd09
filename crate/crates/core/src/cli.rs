//! Command-line interface.
//!
//! Every command accepts `--seed` and `--out`, writes JSON artifacts under
//! `--out`, and prints a short text summary. Failures exit nonzero with a
//! JSON error record on stderr.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::ablation::{self, ComparisonTable};
use crate::data::{
    class_split, generate_dataset, load_dataset, load_manifest, read_rgb_png, save_dataset, write_rgb_png, Manifest, Sample,
    SceneConfig,
};
use crate::error::{Error, Result};
use crate::gradcheck::{pipeline_suite, primitive_suite, CheckResult};
use crate::inference::{general_inference, GeneralInferenceConfig, PanopticLabelMap, SemanticLabelMap, Task, VOID};
use crate::metrics::{query_class_stats, MetricReport, PanopticEvaluator, QueryClassStat, SemanticEvaluator};
use crate::model::{checkpoint, image_to_chw, predict, HeadKind, Params};
use crate::train::{self, TrainConfig};

/// Environment variable capping the number of worker threads.
pub const THREADS_ENV: &str = "MASKFORM_THREADS";

/// Gradient checks pass below this max relative error.
pub const GRAD_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Parser)]
#[command(name = "maskform", version, about = "Mask classification for semantic and panoptic segmentation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Random seed; for training commands it overrides the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

impl Common {
    fn out(&self) -> Result<&Path> {
        self.out.as_deref().ok_or_else(|| Error::Input("--out is required for this command".into()))
    }
}

/// Where training settings come from.
#[derive(Debug, Clone, Args)]
pub struct ConfigArgs {
    /// Flat `key = value` config file; defaults to the toy preset for the
    /// dataset's class count.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides applied after the file, e.g. `--set total_iters=200`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Clone, Args)]
pub struct DataArgs {
    /// Training dataset directory.
    #[arg(long)]
    pub data: PathBuf,
    /// Evaluation dataset directory; otherwise `eval_holdout` images are
    /// taken from the end of the training set.
    #[arg(long)]
    pub eval_data: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset.
    GenData {
        #[arg(long)]
        classes: usize,
        #[arg(long)]
        count: usize,
        #[arg(long, num_args = 2, value_names = ["H", "W"], default_values_t = [32, 32])]
        size: Vec<usize>,
        /// Inclusive range of shapes per image.
        #[arg(long, num_args = 2, value_names = ["MIN", "MAX"], default_values_t = [1, 4])]
        shapes: Vec<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Train a model.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        common: Common,
    },
    /// mIoU and PQ^St of predicted semantic maps against ground truth.
    EvalSemantic {
        #[command(flatten)]
        source: PredSource,
        #[command(flatten)]
        common: Common,
    },
    /// PQ, SQ and RQ of predicted panoptic maps against ground truth.
    EvalPanoptic {
        #[command(flatten)]
        source: PredSource,
        #[command(flatten)]
        common: Common,
    },
    /// Run a checkpoint on one image and write label and mask PNGs.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long, value_enum, default_value_t = InferTask::Semantic)]
        task: InferTask,
        #[command(flatten)]
        common: Common,
    },
    /// Fixed versus bipartite matching with N = K.
    AblateMatching {
        #[command(flatten)]
        config: ConfigArgs,
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        common: Common,
    },
    /// Mask classification with several query counts.
    AblateQueries {
        #[arg(long, value_delimiter = ',', default_values_t = ablation::QUERY_SWEEP)]
        queries: Vec<usize>,
        #[command(flatten)]
        config: ConfigArgs,
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        common: Common,
    },
    /// Semantic versus general inference on a trained checkpoint.
    AblateInference {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Confidence threshold of general inference.
        #[arg(long, default_value_t = GeneralInferenceConfig::semantic().conf_threshold)]
        conf_threshold: f64,
        #[command(flatten)]
        common: Common,
    },
    /// One decoder layer, six layers, and six without self-attention.
    AblateDecoderDepth {
        #[command(flatten)]
        config: ConfigArgs,
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        common: Common,
    },
    /// Distinct classes predicted by each query over a dataset.
    QueryStats {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Finite-difference checks of every primitive and the full losses.
    GradCheck {
        /// Perturbed coordinates per parameter tensor in the full-loss checks.
        #[arg(long, default_value_t = 1_000_000)]
        coords: usize,
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum InferTask {
    Semantic,
    Panoptic,
}

/// Predictions come either from another dataset directory or from a model.
#[derive(Debug, Clone, Args)]
pub struct PredSource {
    /// Ground-truth dataset directory.
    #[arg(long)]
    pub gt: PathBuf,
    /// Dataset directory whose label maps are the predictions.
    #[arg(long, conflicts_with = "checkpoint", required_unless_present = "checkpoint")]
    pub pred: Option<PathBuf>,
    /// Checkpoint to run on the ground-truth images.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

/// Machine-readable failure record written to stderr.
#[derive(Debug, Serialize)]
pub struct ErrorRecord {
    pub error: ErrorBody,
}

#[derive(Debug, Serialize)]
pub struct ErrorBody {
    pub kind: String,
    pub message: String,
}

/// Parses `argv` (including the program name), runs the command and
/// returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            report_error("usage", &e.to_string());
            return 2;
        }
    };
    if let Err(e) = configure_threads() {
        report_error(e.kind(), &e.to_string());
        return 1;
    }
    match execute(cli.command) {
        Ok(text) => {
            print!("{text}");
            0
        }
        Err(e) => {
            report_error(e.kind(), &e.to_string());
            1
        }
    }
}

fn report_error(kind: &str, message: &str) {
    let record = ErrorRecord { error: ErrorBody { kind: kind.to_string(), message: message.trim_end().to_string() } };
    eprintln!("{}", serde_json::to_string(&record).expect("error record serializes"));
}

fn configure_threads() -> Result<()> {
    let Ok(v) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = v.trim().parse().map_err(|_| Error::Config(format!("{THREADS_ENV}={v:?} is not a positive integer")))?;
    if n == 0 {
        return Err(Error::Config(format!("{THREADS_ENV} must be positive")));
    }
    // a pool may already exist when run() is called twice in one process
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

/// Runs a parsed command and returns its text summary.
pub fn execute(command: Command) -> Result<String> {
    match command {
        Command::GenData { classes, count, size, shapes, common } => gen_data(classes, count, &size, &shapes, &common),
        Command::Train { config, data, common } => train_cmd(&config, &data, &common),
        Command::EvalSemantic { source, common } => eval_semantic(&source, &common),
        Command::EvalPanoptic { source, common } => eval_panoptic(&source, &common),
        Command::Infer { checkpoint, image, task, common } => infer(&checkpoint, &image, task, &common),
        Command::AblateMatching { config, data, common } => {
            ablate(&config, &data, &common, "matching", ablation::matching_variants)
        }
        Command::AblateQueries { queries, config, data, common } => {
            ablate(&config, &data, &common, "queries", |c| ablation::query_variants(c, &queries))
        }
        Command::AblateDecoderDepth { config, data, common } => {
            ablate(&config, &data, &common, "decoder depth", ablation::decoder_depth_variants)
        }
        Command::AblateInference { checkpoint, data, conf_threshold, common } => {
            ablate_inference(&checkpoint, &data, conf_threshold, &common)
        }
        Command::QueryStats { checkpoint, data, common } => query_stats(&checkpoint, &data, &common),
        Command::GradCheck { coords, common } => grad_check(coords, &common),
    }
}

fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join(name);
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    std::fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

fn write_text(dir: &Path, name: &str, text: &str) -> Result<()> {
    let path = dir.join(name);
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

fn gen_data(classes: usize, count: usize, size: &[usize], shapes: &[usize], common: &Common) -> Result<String> {
    let cfg = SceneConfig {
        num_classes: classes,
        shapes_per_image: (shapes[0], shapes[1]),
        image_size: (size[0], size[1]),
        seed: common.seed.unwrap_or(0),
    };
    let samples = generate_dataset(&cfg, count)?;
    let out = common.out()?;
    let manifest = save_dataset(&samples, classes, Some(&cfg), out)?;
    Ok(format!(
        "wrote {} samples ({} classes, {}×{}) to {}\nmanifest checksum {}\n",
        manifest.count,
        manifest.num_classes,
        manifest.height,
        manifest.width,
        out.display(),
        manifest.checksum
    ))
}

/// Builds the training config from the preset or file plus overrides.
pub fn resolve_config(args: &ConfigArgs, manifest: &Manifest, seed: Option<u64>) -> Result<TrainConfig> {
    let num_classes = manifest.num_classes;
    let mut cfg = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            TrainConfig::from_text(&text)?
        }
        None => {
            let mut c = TrainConfig::toy(num_classes);
            c.model.image_size = (manifest.height, manifest.width);
            c.augmentation.crop = c.model.image_size;
            c
        }
    };
    for kv in &args.overrides {
        let (k, v) = kv.split_once('=').ok_or_else(|| Error::Config(format!("override {kv:?} is not KEY=VALUE")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if cfg.model.num_classes != num_classes {
        return Err(Error::Config(format!(
            "config has model.num_classes = {} but the dataset has {num_classes} classes",
            cfg.model.num_classes
        )));
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Training and evaluation samples plus the class count.
pub fn load_split(args: &DataArgs, holdout: usize) -> Result<(usize, Vec<Sample>, Vec<Sample>)> {
    let (manifest, mut samples) = load_dataset(&args.data)?;
    let eval = match &args.eval_data {
        Some(dir) => {
            let (m, e) = load_dataset(dir)?;
            if m.num_classes != manifest.num_classes {
                return Err(Error::Input(format!(
                    "evaluation set has {} classes, training set {}",
                    m.num_classes, manifest.num_classes
                )));
            }
            e
        }
        None if holdout == 0 => Vec::new(),
        None => {
            if holdout >= samples.len() {
                return Err(Error::Input(format!("eval_holdout {holdout} leaves no training images out of {}", samples.len())));
            }
            samples.split_off(samples.len() - holdout)
        }
    };
    Ok((manifest.num_classes, samples, eval))
}

fn prepare(config: &ConfigArgs, data: &DataArgs, common: &Common) -> Result<(TrainConfig, Vec<Sample>, Vec<Sample>)> {
    let manifest = load_manifest(&data.data)?;
    let cfg = resolve_config(config, &manifest, common.seed)?;
    let (_, train, eval) = load_split(data, cfg.eval_holdout)?;
    Ok((cfg, train, eval))
}

#[derive(Debug, Serialize)]
struct TrainSummary {
    iterations: usize,
    final_loss: Option<f64>,
    final_eval: Option<train::EvalSummary>,
    /// File name of the final checkpoint inside the output directory.
    checkpoint: Option<String>,
    param_checksum: String,
}

fn train_cmd(config: &ConfigArgs, data: &DataArgs, common: &Common) -> Result<String> {
    let out = common.out()?;
    let (cfg, train_set, eval_set) = prepare(config, data, common)?;
    let o = train::train_loop(&cfg, &train_set, &eval_set, Some(out))?;
    let summary = TrainSummary {
        iterations: o.log.len(),
        final_loss: o.log.last().map(|r| r.loss),
        final_eval: o.final_eval,
        checkpoint: o.checkpoints.last().and_then(|p| p.file_name()).map(|n| n.to_string_lossy().into_owned()),
        param_checksum: o.params.checksum(),
    };
    write_json(out, "summary.json", &summary)?;
    let mut text = format!("trained {} iterations, final loss {:.4}\n", summary.iterations, summary.final_loss.unwrap_or(f64::NAN));
    if let Some(e) = summary.final_eval {
        text.push_str(&format!(
            "eval on {} images: miou {}  pq_st {}\n",
            e.images,
            fmt_opt(e.miou),
            fmt_opt(e.pq_st)
        ));
    }
    Ok(text)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{x:.4}"))
}

/// A checkpoint's parameters and the config echoed into it.
pub fn load_model(path: &Path) -> Result<(TrainConfig, Params)> {
    let ck = checkpoint::load(path)?;
    let cfg = TrainConfig::from_text(&ck.config_echo)?;
    Ok((cfg, ck.params))
}

fn report_text(title: &str, r: &MetricReport) -> String {
    let mut t = ComparisonTable::new(title, &["miou", "pq", "sq", "rq", "pq_things", "pq_stuff"]);
    t.push("all", vec![r.miou, r.pq, r.sq, r.rq, r.pq_things, r.pq_stuff]).expect("six columns");
    t.to_text()
}

fn eval_semantic(source: &PredSource, common: &Common) -> Result<String> {
    let (manifest, gt) = load_dataset(&source.gt)?;
    let k = manifest.num_classes;
    let preds: Vec<SemanticLabelMap> = match (&source.pred, &source.checkpoint) {
        (Some(dir), _) => paired(&gt, dir)?.iter().map(Sample::semantic_map).collect(),
        (None, Some(ck)) => {
            let (cfg, params) = load_model(ck)?;
            check_classes(&cfg, k)?;
            gt.iter().map(|s| train::predict_semantic(&params, &cfg.model, s)).collect::<Result<_>>()?
        }
        (None, None) => return Err(Error::Input("either --pred or --checkpoint is required".into())),
    };
    let mut e = SemanticEvaluator::new(k);
    for (p, s) in preds.iter().zip(&gt) {
        e.add(p, &s.semantic_map())?;
    }
    let report = e.report();
    write_json(common.out()?, "metrics.json", &report)?;
    Ok(report_text("semantic evaluation", &report))
}

fn eval_panoptic(source: &PredSource, common: &Common) -> Result<String> {
    let (manifest, gt) = load_dataset(&source.gt)?;
    let k = manifest.num_classes;
    let preds: Vec<PanopticLabelMap> = match (&source.pred, &source.checkpoint) {
        (Some(dir), _) => paired(&gt, dir)?.iter().map(Sample::panoptic_map).collect(),
        (None, Some(ck)) => {
            let (cfg, params) = load_model(ck)?;
            check_classes(&cfg, k)?;
            let general = GeneralInferenceConfig { task: Task::Panoptic, ..cfg.inference };
            gt.iter()
                .map(|s| {
                    let z = predict(&params, &cfg.model, &image_to_chw(&s.image, s.height, s.width)?)?;
                    Ok(general_inference(&z, &general).map)
                })
                .collect::<Result<_>>()?
        }
        (None, None) => return Err(Error::Input("either --pred or --checkpoint is required".into())),
    };
    let mut e = PanopticEvaluator::new(k, class_split(k));
    for (p, s) in preds.iter().zip(&gt) {
        e.add(p, &s.panoptic_map())?;
    }
    let report = e.report();
    write_json(common.out()?, "metrics.json", &report)?;
    Ok(report_text("panoptic evaluation", &report))
}

fn check_classes(cfg: &TrainConfig, k: usize) -> Result<()> {
    if cfg.model.num_classes != k {
        return Err(Error::Input(format!("checkpoint predicts {} classes, dataset has {k}", cfg.model.num_classes)));
    }
    Ok(())
}

fn paired(gt: &[Sample], dir: &Path) -> Result<Vec<Sample>> {
    let (_, pred) = load_dataset(dir)?;
    if pred.len() != gt.len() {
        return Err(Error::Input(format!("{} predictions for {} ground-truth samples", pred.len(), gt.len())));
    }
    Ok(pred)
}

/// Display color of a class or segment label; VOID is black.
pub fn label_color(label: u32) -> [f32; 3] {
    if label == VOID {
        return [0.0; 3];
    }
    let hue = (f64::from(label) * 0.618_033_988_75).fract();
    let sector = hue * 6.0;
    let f = (sector.fract()) as f32;
    let (v, p, q, t) = (0.9f32, 0.25f32, 0.9 - 0.65 * f, 0.25 + 0.65 * f);
    match sector as u32 % 6 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

fn colorize(labels: &[u32]) -> Vec<f32> {
    labels.iter().flat_map(|&l| label_color(l)).collect()
}

#[derive(Debug, Serialize)]
struct InferSegment {
    id: u32,
    class: u32,
    area: usize,
    queries: Vec<usize>,
}

#[derive(Debug, Serialize)]
struct InferOutput {
    task: &'static str,
    height: usize,
    width: usize,
    segments: Vec<InferSegment>,
    mask_files: Vec<String>,
}

fn infer(checkpoint_path: &Path, image_path: &Path, task: InferTask, common: &Common) -> Result<String> {
    let out = common.out()?;
    let (cfg, params) = load_model(checkpoint_path)?;
    let (h, w, pixels) = read_rgb_png(image_path)?;
    if (h, w) != cfg.model.image_size {
        return Err(Error::Input(format!(
            "{} is {h}×{w}, the model expects {}×{}",
            image_path.display(),
            cfg.model.image_size.0,
            cfg.model.image_size.1
        )));
    }
    if cfg.model.head != HeadKind::MaskClassification {
        return Err(Error::Config(format!("infer needs a mask_classification checkpoint, got {}", cfg.model.head.as_str())));
    }
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let z = predict(&params, &cfg.model, &image_to_chw(&pixels, h, w)?)?;
    let general = GeneralInferenceConfig {
        task: match task {
            InferTask::Semantic => Task::Semantic,
            InferTask::Panoptic => Task::Panoptic,
        },
        ..cfg.inference
    };
    let result = general_inference(&z, &general);
    let map = &result.map;
    let labels: Vec<u32> = match task {
        InferTask::Semantic => crate::inference::semantic_inference(&z).labels,
        InferTask::Panoptic => map.segment_ids.clone(),
    };
    write_rgb_png(&out.join("labels.png"), w, h, &colorize(&labels))?;

    let mut mask_files = Vec::new();
    for i in 0..z.num_queries() {
        let p = z.probs(i);
        let (best, conf) = p.iter().enumerate().fold((0, f64::MIN), |acc, (c, &v)| if v > acc.1 { (c, v) } else { acc });
        if best == z.num_classes() || conf <= general.conf_threshold {
            continue;
        }
        let name = format!("query_{i:03}.png");
        let gray: Vec<f32> = z.mask(i).iter().flat_map(|&m| [m as f32; 3]).collect();
        write_rgb_png(&out.join(&name), w, h, &gray)?;
        mask_files.push(name);
    }
    let segments: Vec<InferSegment> = map
        .segments
        .iter()
        .zip(&result.segment_queries)
        .map(|(s, q)| InferSegment { id: s.id, class: s.class, area: s.area, queries: q.clone() })
        .collect();
    let n_segments = segments.len();
    let record = InferOutput {
        task: match task {
            InferTask::Semantic => "semantic",
            InferTask::Panoptic => "panoptic",
        },
        height: h,
        width: w,
        segments,
        mask_files,
    };
    write_json(out, "segments.json", &record)?;
    Ok(format!(
        "{} segments, {} query masks written to {}\n",
        n_segments,
        record.mask_files.len(),
        out.display()
    ))
}

fn ablate(
    config: &ConfigArgs,
    data: &DataArgs,
    common: &Common,
    name: &str,
    variants: impl Fn(&TrainConfig) -> Vec<(String, TrainConfig)>,
) -> Result<String> {
    let out = common.out()?;
    let (cfg, train_set, eval_set) = prepare(config, data, common)?;
    let runs = variants(&cfg);
    for (label, c) in &runs {
        c.validate().map_err(|e| Error::Config(format!("{label}: {e}")))?;
    }
    let (table, _) = ablation::run_variants(name, &runs, &train_set, &eval_set, Some(out))?;
    emit_table(out, &table)
}

fn emit_table(out: &Path, table: &ComparisonTable) -> Result<String> {
    write_json(out, "table.json", table)?;
    let text = table.to_text();
    write_text(out, "table.txt", &text)?;
    Ok(text)
}

fn ablate_inference(checkpoint_path: &Path, data: &Path, conf_threshold: f64, common: &Common) -> Result<String> {
    let out = common.out()?;
    let (cfg, params) = load_model(checkpoint_path)?;
    let (manifest, samples) = load_dataset(data)?;
    check_classes(&cfg, manifest.num_classes)?;
    let general = GeneralInferenceConfig { conf_threshold, ..GeneralInferenceConfig::semantic() };
    let table = ablation::inference_table(&params, &cfg.model, &samples, &general)?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    emit_table(out, &table)
}

fn query_stats(checkpoint_path: &Path, data: &Path, common: &Common) -> Result<String> {
    let out = common.out()?;
    let (cfg, params) = load_model(checkpoint_path)?;
    let (manifest, samples) = load_dataset(data)?;
    check_classes(&cfg, manifest.num_classes)?;
    if cfg.model.head != HeadKind::MaskClassification {
        return Err(Error::Config(format!("query-stats needs a mask_classification checkpoint, got {}", cfg.model.head.as_str())));
    }
    let preds = samples
        .iter()
        .map(|s| predict(&params, &cfg.model, &image_to_chw(&s.image, s.height, s.width)?))
        .collect::<Result<Vec<_>>>()?;
    let general = GeneralInferenceConfig { task: Task::Semantic, ..cfg.inference };
    let stats: Vec<QueryClassStat> = query_class_stats(&preds, &general);
    write_json(out, "query_stats.json", &stats)?;
    let mut text = String::from("query  classes\n");
    for s in stats.iter().filter(|s| s.count > 0) {
        text.push_str(&format!("{:>5}  {:>7}\n", s.query, s.count));
    }
    Ok(text)
}

#[derive(Debug, Serialize)]
struct GradCheckReport {
    tolerance: f64,
    passed: bool,
    primitives: Vec<CheckResult>,
    pipeline: Vec<CheckResult>,
}

fn grad_check(coords: usize, common: &Common) -> Result<String> {
    let seed = common.seed.unwrap_or(0);
    let primitives = primitive_suite(seed, 1e-5)?;
    let pipeline = pipeline_suite(seed, 1e-6, coords)?;
    let passed = primitives.iter().chain(&pipeline).all(|r| r.max_rel_error < GRAD_TOLERANCE);
    let report = GradCheckReport { tolerance: GRAD_TOLERANCE, passed, primitives, pipeline };
    if let Some(out) = &common.out {
        write_json(out, "grad_check.json", &report)?;
    }
    let mut text = String::new();
    for (suite, rows) in [("primitives", &report.primitives), ("pipeline", &report.pipeline)] {
        let worst = rows.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
        text.push_str(&format!("{suite}: {} checks, max relative error {worst:.3e}\n", rows.len()));
        for r in rows.iter() {
            text.push_str(&format!("  {:<22} {:.3e}\n", r.name, r.max_rel_error));
        }
    }
    if !passed {
        return Err(Error::Internal(format!("gradient check above tolerance {GRAD_TOLERANCE}\n{text}")));
    }
    text.push_str("all checks passed\n");
    Ok(text)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(args: &[&str]) -> std::result::Result<Cli, clap::Error> {
        Cli::try_parse_from(std::iter::once("maskform").chain(args.iter().copied()))
    }

    #[test]
    fn every_command_accepts_seed_and_out() {
        let cases: [&[&str]; 11] = [
            &["gen-data", "--classes", "4", "--count", "2"],
            &["train", "--data", "d"],
            &["eval-semantic", "--gt", "g", "--pred", "p"],
            &["eval-panoptic", "--gt", "g", "--checkpoint", "c"],
            &["infer", "--checkpoint", "c", "--image", "i.png"],
            &["ablate-matching", "--data", "d"],
            &["ablate-queries", "--data", "d"],
            &["ablate-inference", "--checkpoint", "c", "--data", "d"],
            &["ablate-decoder-depth", "--data", "d"],
            &["query-stats", "--checkpoint", "c", "--data", "d"],
            &["grad-check"],
        ];
        for case in cases {
            let mut args = case.to_vec();
            args.extend(["--seed", "3", "--out", "o"]);
            parse(&args).unwrap_or_else(|e| panic!("{case:?}: {e}"));
        }
    }

    #[test]
    fn unknown_flags_are_rejected() {
        assert!(parse(&["grad-check", "--bogus"]).is_err());
        assert!(parse(&["eval-semantic", "--gt", "g"]).is_err());
        assert!(parse(&["eval-semantic", "--gt", "g", "--pred", "p", "--checkpoint", "c"]).is_err());
        assert_eq!(run(["maskform", "nope"]), 2);
    }

    #[test]
    fn query_sweep_parses_lists() {
        let cli = parse(&["ablate-queries", "--data", "d", "--queries", "4,8"]).unwrap();
        match cli.command {
            Command::AblateQueries { queries, .. } => assert_eq!(queries, [4, 8]),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn label_colors_are_distinct() {
        let colors: Vec<[f32; 3]> = (1..=64).map(label_color).collect();
        for i in 0..colors.len() {
            for j in 0..i {
                assert_ne!(colors[i], colors[j]);
            }
        }
        assert_eq!(label_color(VOID), [0.0; 3]);
    }
}
