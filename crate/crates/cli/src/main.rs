use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use fusionseg::cloud::{self, CloudFormat, LabeledCloud};
use fusionseg::config::ProjectConfig;
use fusionseg::datagen::{self, DatasetManifest};
use fusionseg::eval::{self, ConfusionMatrix, MetricsReport};
use fusionseg::nn::Checkpoint;
use fusionseg::stream::{self, FrameResult, OutputMode, ReaderSource, SyntheticStream};
use fusionseg::train::{self, FreezeSpec, RunDir, TrainSetup};
use fusionseg::{pipeline, Error, SemanticClass};

#[derive(Parser)]
#[command(name = "fusionseg", version, about = "Point-cloud semantic segmentation toolkit")]
struct Cli {
    /// TOML project configuration; every section is optional.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configuration seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Format of reports written to standard output.
    #[arg(long, global = true, value_enum, default_value_t = ReportFormat::Text)]
    report: ReportFormat,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ReportFormat {
    Json,
    Text,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a labeled scene dataset, or a synthetic sensor stream.
    Gen(GenArgs),
    /// Train a model from scratch on a dataset directory.
    Train(TrainArgs),
    /// Fine-tune a checkpoint with most layers frozen.
    Finetune(FinetuneArgs),
    /// Report accuracy and IoU metrics of a checkpoint.
    Eval(EvalArgs),
    /// Label every point of one cloud file.
    Segment(SegmentArgs),
    /// Segment a dual-sensor frame stream with static caching.
    Stream(StreamArgs),
    /// Summarize checkpoints, datasets, configurations or cloud files.
    Info(InfoArgs),
}

#[derive(Args)]
struct GenArgs {
    /// Output directory.
    #[arg(long)]
    output: PathBuf,
    /// Number of scenes; defaults to the configuration.
    #[arg(long)]
    scenes: Option<usize>,
    /// Domain profile, `sim` or `real`; defaults to the configuration.
    #[arg(long)]
    profile: Option<String>,
    /// Write an N-frame synthetic stream directory instead of a dataset.
    #[arg(long, value_name = "N")]
    stream_frames: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory written by `gen`.
    #[arg(long)]
    data: PathBuf,
    /// Run directory for checkpoints and history.
    #[arg(long)]
    output: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Args)]
struct FinetuneArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Target-domain dataset directory.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    output: PathBuf,
    /// Use only the first N scenes of the dataset.
    #[arg(long)]
    samples: Option<usize>,
    /// Trainable groups: `head.last2` or a comma-separated list.
    #[arg(long)]
    freeze: Option<String>,
    /// Dataset used to pick the best epoch.
    #[arg(long)]
    eval_data: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset directory or a single labeled cloud file.
    #[arg(long)]
    data: PathBuf,
    /// 7 scores the named classes; 8 adds Unlabeled.
    #[arg(long, default_value_t = 7, value_parser = clap::value_parser!(u8).range(7..=8))]
    classes: u8,
    /// Label every point with chunked inference instead of scoring the
    /// training-style preprocessed clouds.
    #[arg(long)]
    full: bool,
}

#[derive(Args)]
struct SegmentArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// PCSB or PCST file.
    #[arg(long)]
    input: PathBuf,
    /// Labeled PCSB output.
    #[arg(long)]
    output: PathBuf,
    /// Voxel-downsample the input first.
    #[arg(long)]
    voxel_size: Option<f64>,
    /// Print per-class counts of the result.
    #[arg(long)]
    summary: bool,
}

#[derive(Args)]
struct StreamArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Directory of `frame_<idx>_<sensor>.pcsb` files; framed PCSB on
    /// standard input when absent.
    #[arg(long)]
    frames: Option<PathBuf>,
    #[arg(long)]
    voxel_size: Option<f64>,
    #[arg(long)]
    warmup: Option<usize>,
    /// Directory for labeled per-frame clouds.
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long, value_enum)]
    output_mode: Option<OutputModeArg>,
    /// File for per-frame records instead of standard output.
    #[arg(long)]
    report_file: Option<PathBuf>,
    /// Do not wait for a second sensor.
    #[arg(long)]
    single_sensor: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum OutputModeArg {
    Full,
    DynamicOnly,
}

#[derive(Args)]
struct InfoArgs {
    /// Checkpoint, dataset directory, TOML configuration or cloud file.
    paths: Vec<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

type CliResult<T = ()> = Result<T, Error>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion) => e.exit(),
        Err(e) => {
            let text = e.to_string();
            let line = text.lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ");
            eprintln!("error[usage]: {line}");
            return ExitCode::from(2);
        }
    };
    if let Err(e) = stream::configure_threads() {
        return fail(&e);
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(&e),
    }
}

fn fail(e: &Error) -> ExitCode {
    let message = e.to_string().replace('\n', " ");
    eprintln!("error[{}]: {message}", e.kind());
    match e {
        Error::Validation(_) | Error::Config(_) | Error::Parameter(_) | Error::EmptyInput(_) => ExitCode::from(2),
        _ => ExitCode::from(1),
    }
}

fn run(cli: Cli) -> CliResult {
    let mut config = match &cli.config {
        Some(path) => ProjectConfig::load(path)?,
        None => ProjectConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    match cli.command {
        Command::Gen(a) => gen(&config, a),
        Command::Train(a) => train_cmd(&config, a),
        Command::Finetune(a) => finetune_cmd(&config, a),
        Command::Eval(a) => eval_cmd(&config, a, cli.report),
        Command::Segment(a) => segment_cmd(&config, a, cli.report),
        Command::Stream(a) => stream_cmd(&config, a, cli.report),
        Command::Info(a) => info(a, cli.report),
    }
}

fn gen(config: &ProjectConfig, a: GenArgs) -> CliResult {
    if let Some(frames) = a.stream_frames {
        if frames == 0 {
            return Err(Error::Validation("--stream-frames must be positive".into()));
        }
        let synthetic = SyntheticStream {
            frames,
            scene: datagen::SceneSpec { seed: config.seed, ..SyntheticStream::default().scene },
            ..SyntheticStream::default()
        };
        synthetic.save(&a.output)?;
        println!("wrote {frames} frames from 2 sensors to {}", a.output.display());
        return Ok(());
    }
    let scenes = a.scenes.unwrap_or(config.dataset.scenes);
    if scenes == 0 {
        return Err(Error::Validation("--scenes must be positive".into()));
    }
    let profile_name = a.profile.unwrap_or_else(|| config.dataset.profile.clone());
    let profile = config.profile(&profile_name)?;
    let data = datagen::make_dataset(scenes, profile, &config.scene, config.seed)?;
    let manifest = DatasetManifest {
        seed: config.seed,
        profile_name,
        profile,
        base: config.scene.clone(),
        scenes: Vec::new(),
    };
    let manifest = datagen::save_dataset(&a.output, &data, manifest)?;
    let points: usize = manifest.scenes.iter().map(|s| s.points).sum();
    println!("wrote {scenes} scenes ({points} points) to {}", a.output.display());
    Ok(())
}

fn train_cmd(config: &ProjectConfig, a: TrainArgs) -> CliResult {
    let (_, scenes) = datagen::load_dataset(&a.data)?;
    let (train_set, eval_set) = train::split_dataset(&scenes, config.dataset.train_fraction, config.seed)?;
    let mut tc = config.train.clone();
    tc.seed = config.seed;
    if let Some(e) = a.epochs {
        tc.epochs = e;
    }
    let run = RunDir::create(&a.output)?;
    let mut recorded = config.clone();
    recorded.train = tc.clone();
    run.write_config(&recorded)?;
    let setup = TrainSetup { preprocess: config.preprocess.clone(), init: None, run_dir: Some(&run) };
    let out = train::train(&tc, &config.model, &train_set, &eval_set, &setup)?;
    print_history(&out.history);
    println!("checkpoints in {}", run.root.display());
    Ok(())
}

fn finetune_cmd(config: &ProjectConfig, a: FinetuneArgs) -> CliResult {
    let checkpoint = Checkpoint::load(&a.checkpoint)?;
    let (_, mut target) = datagen::load_dataset(&a.data)?;
    if let Some(n) = a.samples {
        if n == 0 || n > target.len() {
            return Err(Error::Validation(format!("--samples must lie in 1..={}", target.len())));
        }
        target.truncate(n);
    }
    let eval_set = match &a.eval_data {
        Some(dir) => datagen::load_dataset(dir)?.1,
        None => Vec::new(),
    };
    let freeze = FreezeSpec::parse(a.freeze.as_deref().unwrap_or(&config.finetune.freeze), &checkpoint.config);
    let mut tc = config.finetune.train.clone();
    tc.seed = config.seed;
    if let Some(e) = a.epochs {
        tc.epochs = e;
    }
    let run = RunDir::create(&a.output)?;
    run.write_config(config)?;
    let out = train::finetune(&checkpoint, &target, &freeze, &tc, &eval_set, &config.preprocess, Some(&run))?;
    print_history(&out.history);
    println!("checkpoints in {}", run.root.display());
    Ok(())
}

fn print_history(history: &train::TrainHistory) {
    for e in &history.epochs {
        let oa = e.eval_oa.map_or("-".into(), |v| format!("{v:.4}"));
        println!("epoch {:>3}  train loss {:.4}  eval OA {oa}  lr {:.2e}", e.epoch, e.train_loss, e.lr);
    }
}

/// Labeled clouds from a dataset directory or a single file.
fn load_labeled(path: &Path) -> CliResult<Vec<LabeledCloud>> {
    let clouds = if path.is_dir() {
        datagen::load_dataset(path)?.1
    } else {
        vec![cloud::load_cloud(path)?]
    };
    if clouds.iter().any(|c| !c.has_labels()) {
        return Err(Error::Precondition(format!("{} holds unlabeled clouds", path.display())));
    }
    Ok(clouds)
}

fn eval_cmd(config: &ProjectConfig, a: EvalArgs, format: ReportFormat) -> CliResult {
    let checkpoint = Checkpoint::load(&a.checkpoint)?;
    let model = &checkpoint.config;
    let clouds = load_labeled(&a.data)?;
    let matrix = if a.full {
        let mut total = ConfusionMatrix::zeros(model.num_classes);
        for c in &clouds {
            let seg = pipeline::segment(c, &checkpoint.params, model, config.preprocess.budget, config.seed)?;
            total.merge(&eval::confusion(&seg.labels, &c.label_ids().unwrap(), model.num_classes)?)?;
        }
        total
    } else {
        let inputs = pipeline::prepare_eval(&clouds, &config.preprocess, config.seed)?;
        pipeline::evaluate_prepared(&inputs, &checkpoint.params, model)?
    };
    let include = if a.classes == 8 { eval::all_classes() } else { eval::named_classes() };
    if include.iter().any(|&c| c >= model.num_classes) {
        return Err(Error::Config(format!("--classes {} needs a model with 8 outputs", a.classes)));
    }
    let report = MetricsReport::from_matrix(&matrix, &include)?;
    match format {
        ReportFormat::Json => println!("{}", report.to_json()),
        ReportFormat::Text => print!("{}", report.to_text()),
    }
    Ok(())
}

fn class_counts_json(cloud: &LabeledCloud) -> serde_json::Value {
    let counts = cloud.class_counts();
    let map: serde_json::Map<String, serde_json::Value> = SemanticClass::ALL
        .iter()
        .map(|c| (c.name().to_string(), counts[c.id() as usize].into()))
        .collect();
    serde_json::Value::Object(map)
}

fn segment_cmd(config: &ProjectConfig, a: SegmentArgs, format: ReportFormat) -> CliResult {
    let checkpoint = Checkpoint::load(&a.checkpoint)?;
    let mut input = cloud::load_cloud(&a.input)?;
    if let Some(v) = a.voxel_size {
        input = cloud::voxel_downsample(&input, v)?;
    }
    let seg = pipeline::segment(&input, &checkpoint.params, &checkpoint.config, config.preprocess.budget, config.seed)?;
    let labels = seg.labels.iter().map(|&l| SemanticClass::from_id(l).expect("valid class id")).collect();
    let labeled = input.without_labels().with_labels(labels)?;
    cloud::save_cloud(&labeled, &a.output, CloudFormat::Binary)?;
    if a.summary {
        match format {
            ReportFormat::Json => {
                let v = serde_json::json!({
                    "points": labeled.len(),
                    "chunks": seg.chunks,
                    "per_class_counts": class_counts_json(&labeled),
                });
                println!("{v}");
            }
            ReportFormat::Text => {
                println!("points {} in {} chunks", labeled.len(), seg.chunks);
                let counts = labeled.class_counts();
                for c in SemanticClass::ALL {
                    println!("  {:<13} {}", c.name(), counts[c.id() as usize]);
                }
            }
        }
    }
    Ok(())
}

fn stream_cmd(config: &ProjectConfig, a: StreamArgs, format: ReportFormat) -> CliResult {
    let mut sc = config.stream.clone();
    sc.seed = config.seed;
    if let Some(v) = a.voxel_size {
        sc.voxel_size = v;
    }
    if let Some(w) = a.warmup {
        sc.warmup_frames = w;
    }
    if let Some(p) = a.checkpoint {
        sc.checkpoint = Some(p);
    }
    if let Some(p) = a.report_file {
        sc.report = Some(p);
    }
    if let Some(m) = a.output_mode {
        sc.output = match m {
            OutputModeArg::Full => OutputMode::Full,
            OutputModeArg::DynamicOnly => OutputMode::DynamicOnly,
        };
    }
    sc.single_sensor |= a.single_sensor;
    sc.validate()?;
    let path = sc
        .checkpoint
        .clone()
        .ok_or_else(|| Error::Config("stream needs --checkpoint or stream.checkpoint".into()))?;
    let checkpoint = Checkpoint::load(&path)?;
    if let Some(dir) = &a.output {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut out: Box<dyn Write> = match &sc.report {
        Some(p) => Box::new(BufWriter::new(fs::File::create(p).map_err(|e| Error::io(p, e))?)),
        None => Box::new(io::stdout().lock()),
    };
    let mode = sc.output;
    let sink = |r: FrameResult| -> CliResult {
        match format {
            ReportFormat::Json => stream::write_report_line(&mut out, &r.report)?,
            ReportFormat::Text => {
                let rep = &r.report;
                writeln!(
                    out,
                    "frame {:>5}  points {:>6}  inferred {:>6}  cache hits {:>5.1}%  {:>8.1} ms{}",
                    rep.frame_index,
                    rep.points,
                    rep.inference_points,
                    100.0 * rep.cache_hit_fraction,
                    rep.latency_ms.total,
                    if rep.warnings.is_empty() { String::new() } else { format!("  [{}]", rep.warnings.join("; ")) }
                )
                .map_err(|e| Error::io("<report>", e))?;
            }
        }
        if let Some(dir) = &a.output {
            let file = dir.join(format!("frame_{}_labels.pcsb", r.report.frame_index));
            cloud::save_cloud(&r.output_cloud(mode), file, CloudFormat::Binary)?;
        }
        Ok(())
    };
    let summary = match &a.frames {
        Some(dir) => stream::run_stream(&sc, checkpoint, stream::directory_source(dir, 0.1)?.into_iter().map(Ok), sink)?,
        None => stream::run_stream(&sc, checkpoint, ReaderSource::new(io::stdin().lock()), sink)?,
    };
    log::info!(
        "{} frames, {} points, {} sent to the network",
        summary.frames,
        summary.points,
        summary.inference_points
    );
    Ok(())
}

fn info(a: InfoArgs, format: ReportFormat) -> CliResult {
    let mut paths = a.paths;
    paths.extend(a.checkpoint);
    if paths.is_empty() {
        return Err(Error::Validation("info needs at least one path".into()));
    }
    for path in &paths {
        let value = describe(path)?;
        match format {
            ReportFormat::Json => println!("{value}"),
            ReportFormat::Text => {
                println!("{}", path.display());
                if let serde_json::Value::Object(map) = &value {
                    for (k, v) in map {
                        println!("  {k}: {v}");
                    }
                }
            }
        }
    }
    Ok(())
}

fn describe(path: &Path) -> CliResult<serde_json::Value> {
    if path.is_dir() {
        let m = datagen::load_manifest(path)?;
        return Ok(serde_json::json!({
            "kind": "dataset",
            "scenes": m.scenes.len(),
            "points": m.scenes.iter().map(|s| s.points).sum::<usize>(),
            "profile": m.profile_name,
            "seed": m.seed,
        }));
    }
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.starts_with(b"FSCK") {
        let c = Checkpoint::from_bytes(&bytes)?;
        let frozen = c.params.iter().filter(|(_, p)| p.frozen).count();
        return Ok(serde_json::json!({
            "kind": "checkpoint",
            "parameters": c.parameter_count(),
            "tensors": c.params.len(),
            "frozen_tensors": frozen,
            "config": c.config,
        }));
    }
    if bytes.starts_with(b"PCSB") || path.extension().is_some_and(|e| e == "pcst") {
        let c = cloud::load_cloud(path)?;
        return Ok(serde_json::json!({
            "kind": "cloud",
            "points": c.len(),
            "labeled": c.has_labels(),
            "per_class_counts": class_counts_json(&c),
        }));
    }
    let c = ProjectConfig::load(path)?;
    Ok(serde_json::json!({ "kind": "config", "config": c }))
}
