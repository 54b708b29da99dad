//! Operator CLI: prepare, train, eval, predict, gradcheck.
//!
//! Exit codes: 0 success, 1 partial or data-level failure, 2 usage or
//! configuration error, 3 numerical failure during training.

mod config;

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use fundusnet::data::{
    augment, build_binary_corpus, conform_channels, decode_image, entry_name, load_sample,
    parse_labels, read_manifest, resize_bilinear, split, write_archive, write_manifest,
    ArchiveReader, DatasetSplit, Label, SampleRef,
};
use fundusnet::gradcheck::{run_suite, SuiteConfig};
use fundusnet::metrics::{evaluate, EvalReport, MetricValue};
use fundusnet::model::{load_checkpoint, Model};
use fundusnet::tensor::Shape;
use fundusnet::train::{evaluate_source, fit, ArchiveSource, BatchSource, ManifestSource};
use fundusnet::{Error, Result};

use config::RunConfig;

#[derive(Parser)]
#[command(
    name = "fundusnet",
    version,
    about = "Train and evaluate a from-scratch CNN-LSTM cataract classifier on fundus images"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build the balanced, augmented, group-aware split and write a manifest
    Prepare(PrepareArgs),
    /// Train from a manifest; writes checkpoint, epoch log, and config echo
    Train(TrainArgs),
    /// Evaluate a checkpoint on a manifest partition
    Eval(EvalArgs),
    /// Classify individual images with a checkpoint
    Predict(PredictArgs),
    /// Run the finite-difference gradient verification suite
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct PrepareArgs {
    /// ODIR-style label CSV
    #[arg(long)]
    csv: PathBuf,
    /// Directory of fundus images referenced by the CSV
    #[arg(long)]
    images: PathBuf,
    /// Output directory for manifest and config echo
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Train fraction of the split
    #[arg(long)]
    ratio: Option<f64>,
    /// Also materialize every sample into a tensor cache archive
    #[arg(long)]
    cache: bool,
}

#[derive(Args)]
struct TrainArgs {
    /// Config file (flat key=value or flat JSON object)
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    images: Option<PathBuf>,
    /// Tensor cache archive written by `prepare --cache`
    #[arg(long)]
    archive: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    checkpoint_cadence: Option<usize>,
    /// Continue training from an existing checkpoint (epoch numbering resumes)
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    input_height: Option<usize>,
    #[arg(long)]
    input_width: Option<usize>,
    #[arg(long)]
    input_channels: Option<usize>,
    /// Three comma-separated filter counts, e.g. 32,64,128
    #[arg(long)]
    conv_filters: Option<String>,
    #[arg(long)]
    dense_units: Option<usize>,
    #[arg(long)]
    lstm_units: Option<usize>,
    #[arg(long)]
    seq_len: Option<usize>,
    #[arg(long)]
    dropout_rate: Option<f64>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// Which partition to evaluate
    #[arg(long, value_parser = ["train", "test"])]
    partition: String,
    #[arg(long)]
    images: Option<PathBuf>,
    #[arg(long)]
    archive: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Decision threshold
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
    /// Images to classify
    #[arg(required = true)]
    images: Vec<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 5)]
    seeds_per_layer: usize,
    /// Test hook: scale one family's analytic gradients so the harness must
    /// report a failure
    #[arg(long, hide = true)]
    sabotage: Option<String>,
}

fn main() {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Prepare(args) => cmd_prepare(args),
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Predict(args) => cmd_predict(args),
        Command::Gradcheck(args) => cmd_gradcheck(args),
    };
    match outcome {
        Ok(code) => std::process::exit(code),
        Err(err) => {
            eprintln!("error: {err}");
            std::process::exit(exit_code_for(&err));
        }
    }
}

fn exit_code_for(err: &Error) -> i32 {
    match err {
        Error::NonFiniteLoss { .. } | Error::NanGradient { .. } => 3,
        Error::Corpus { .. }
        | Error::Split { .. }
        | Error::ManifestIntegrity { .. }
        | Error::ImageDecode { .. }
        | Error::CheckpointIntegrity
        | Error::RocUndefined { .. }
        | Error::Csv(_) => 1,
        _ => 2,
    }
}

fn require_exists(path: &Path) -> Result<()> {
    if !path.exists() {
        return Err(Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "no such file or directory"),
        ));
    }
    Ok(())
}

fn ensure_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn cmd_prepare(args: PrepareArgs) -> Result<i32> {
    require_exists(&args.csv)?;
    require_exists(&args.images)?;

    let mut cfg = RunConfig {
        csv: Some(args.csv.clone()),
        images: Some(args.images.clone()),
        ..RunConfig::default()
    };
    if let Some(out) = args.out {
        cfg.out_dir = out;
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(ratio) = args.ratio {
        cfg.ratio = ratio;
    }
    ensure_dir(&cfg.out_dir)?;

    let parsed = parse_labels(&args.csv)?;
    println!(
        "labels: {} rows parsed, {} skipped",
        parsed.records.len(),
        parsed.skipped.len()
    );
    for skip in &parsed.skipped {
        eprintln!("  skipped line {}: {}", skip.line, skip.reason);
    }

    let corpus = build_binary_corpus(&parsed.records, &args.images, cfg.seed)?;
    if !corpus.missing.is_empty() {
        eprintln!("  {} referenced image file(s) missing", corpus.missing.len());
        for file in &corpus.missing {
            eprintln!("    missing: {file}");
        }
    }
    let per_class = corpus.refs.len() / 2;
    println!(
        "eyes: {} cataract / {} normal available; balanced corpus {} ({per_class} per class)",
        corpus.cataract_total,
        corpus.normal_total,
        corpus.refs.len(),
    );

    let augmented = augment(&corpus.refs);
    println!("augmented: {} samples", augmented.len());

    let dataset = split(&augmented, cfg.ratio, cfg.seed)?;
    println!(
        "split: {} train / {} test (checksum {:08x})",
        dataset.train.len(),
        dataset.test.len(),
        dataset.checksum
    );

    let manifest_path = cfg.out_dir.join("manifest.tsv");
    write_manifest(&dataset, &manifest_path)?;
    cfg.manifest = Some(manifest_path.clone());
    println!("manifest: {}", manifest_path.display());

    if args.cache {
        let archive_path = cfg.out_dir.join("cache.fnta");
        let (h, w, c) = (cfg.input_height, cfg.input_width, cfg.input_channels);
        let refs: Vec<SampleRef> = dataset
            .train
            .iter()
            .chain(dataset.test.iter())
            .cloned()
            .collect();
        let images_dir = args.images.clone();
        write_archive(
            &archive_path,
            h,
            w,
            c,
            refs.iter().map(|r| {
                let sample = load_sample(&images_dir, r, h, w, c)?;
                Ok((entry_name(r), sample.image))
            }),
        )?;
        cfg.archive = Some(archive_path.clone());
        println!("cache: {}", archive_path.display());
    }

    cfg.echo(&cfg.out_dir.clone())?;
    Ok(0)
}

fn resolve_train_config(args: &TrainArgs) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &args.config {
        require_exists(path)?;
        cfg.apply_file(path)?;
    }
    if let Some(v) = &args.manifest {
        cfg.manifest = Some(v.clone());
    }
    if let Some(v) = &args.images {
        cfg.images = Some(v.clone());
    }
    if let Some(v) = &args.archive {
        cfg.archive = Some(v.clone());
    }
    if let Some(v) = &args.out {
        cfg.out_dir = v.clone();
    }
    if let Some(v) = args.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = args.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = args.learning_rate {
        cfg.learning_rate = v;
    }
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    if let Some(v) = args.checkpoint_cadence {
        cfg.checkpoint_cadence = v;
    }
    if let Some(v) = args.input_height {
        cfg.input_height = v;
    }
    if let Some(v) = args.input_width {
        cfg.input_width = v;
    }
    if let Some(v) = args.input_channels {
        cfg.input_channels = v;
    }
    if let Some(v) = &args.conv_filters {
        cfg.set("conv_filters", v)?;
    }
    if let Some(v) = args.dense_units {
        cfg.dense_units = v;
    }
    if let Some(v) = args.lstm_units {
        cfg.lstm_units = v;
    }
    if let Some(v) = args.seq_len {
        cfg.seq_len = v;
    }
    if let Some(v) = args.dropout_rate {
        cfg.dropout_rate = v;
    }
    Ok(cfg)
}

/// Build batch sources for the two partitions, preferring the tensor cache
/// when configured.
fn build_sources(
    cfg: &RunConfig,
    dataset: &DatasetSplit,
    h: usize,
    w: usize,
    c: usize,
) -> Result<(Box<dyn BatchSource>, Box<dyn BatchSource>)> {
    if let Some(archive) = &cfg.archive {
        require_exists(archive)?;
        let train = ArchiveSource::new(
            ArchiveReader::open(archive)?,
            dataset.train.clone(),
            h,
            w,
            c,
        )?;
        let test = ArchiveSource::new(
            ArchiveReader::open(archive)?,
            dataset.test.clone(),
            h,
            w,
            c,
        )?;
        return Ok((Box::new(train), Box::new(test)));
    }
    let images = cfg.images.as_ref().ok_or_else(|| Error::Config {
        key: "images".into(),
        reason: "an images directory (or an archive) is required".into(),
    })?;
    require_exists(images)?;
    Ok((
        Box::new(ManifestSource::new(images, dataset.train.clone(), h, w, c)),
        Box::new(ManifestSource::new(images, dataset.test.clone(), h, w, c)),
    ))
}

fn cmd_train(args: TrainArgs) -> Result<i32> {
    let cfg = resolve_train_config(&args)?;
    let manifest_path = cfg.manifest.clone().ok_or_else(|| Error::Config {
        key: "manifest".into(),
        reason: "a manifest is required; run `fundusnet prepare` first".into(),
    })?;
    require_exists(&manifest_path)?;
    let dataset = read_manifest(&manifest_path)?;
    ensure_dir(&cfg.out_dir)?;

    let descriptor = cfg.descriptor();
    descriptor.validate()?;
    let (mut model, start_epoch) = match &args.resume {
        Some(ckpt) => {
            require_exists(ckpt)?;
            let (model, meta) = load_checkpoint(ckpt)?;
            if model.descriptor != descriptor {
                return Err(Error::Construction {
                    reason: "resume checkpoint descriptor differs from the configured architecture"
                        .into(),
                });
            }
            println!("resuming from {} at epoch {}", ckpt.display(), meta.epoch);
            (model, meta.epoch as usize)
        }
        None => (Model::build(&descriptor, cfg.seed)?, 0),
    };

    let (train_src, test_src) = build_sources(
        &cfg,
        &dataset,
        descriptor.input_height,
        descriptor.input_width,
        descriptor.input_channels,
    )?;

    let train_cfg = cfg.train_config(&cfg.out_dir, start_epoch);
    cfg.echo(&cfg.out_dir)?;
    let records = fit(&mut model, train_src.as_ref(), test_src.as_ref(), &train_cfg)?;
    for r in &records {
        println!(
            "epoch {:>4}  train_loss {:.6}  train_acc {:.4}  test_acc {:.4}  ({:.2}s)",
            r.epoch, r.train_loss, r.train_acc, r.test_acc, r.wall_seconds
        );
    }
    println!(
        "checkpoint: {}",
        train_cfg
            .checkpoint_path
            .as_ref()
            .expect("set by train_config")
            .display()
    );
    Ok(0)
}

fn metric_text(v: &MetricValue) -> String {
    match v {
        MetricValue::Defined(x) => format!("{x:.4}"),
        MetricValue::Undefined { undefined } => format!("undefined ({undefined} = 0)"),
    }
}

fn write_eval_outputs(report: &EvalReport, out_dir: &Path) -> Result<()> {
    ensure_dir(out_dir)?;
    let json_path = out_dir.join("report.json");
    let json = serde_json::to_string_pretty(report).map_err(|e| Error::Config {
        key: "<report>".into(),
        reason: e.to_string(),
    })?;
    std::fs::write(&json_path, json + "\n").map_err(|e| Error::io(&json_path, e))?;

    let roc_path = out_dir.join("roc.csv");
    let mut csv = String::from("threshold,fpr,tpr\n");
    for p in &report.roc_points {
        csv.push_str(&format!("{},{},{}\n", p.threshold, p.fpr, p.tpr));
    }
    std::fs::write(&roc_path, csv).map_err(|e| Error::io(&roc_path, e))?;
    println!("report: {}", json_path.display());
    println!("roc: {}", roc_path.display());
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<i32> {
    require_exists(&args.checkpoint)?;
    require_exists(&args.manifest)?;
    let (model, _meta) = load_checkpoint(&args.checkpoint)?;
    let dataset = read_manifest(&args.manifest)?;
    let refs = match args.partition.as_str() {
        "train" => dataset.train.clone(),
        _ => dataset.test.clone(),
    };
    if refs.is_empty() {
        return Err(Error::Corpus {
            reason: format!("partition {} is empty", args.partition),
        });
    }

    let cfg = RunConfig {
        images: args.images.clone(),
        archive: args.archive.clone(),
        ..RunConfig::default()
    };
    let d = &model.descriptor;
    let slice = DatasetSplit {
        train: refs,
        test: Vec::new(),
        seed: dataset.seed,
        checksum: dataset.checksum,
    };
    let (source, _) = build_sources(&cfg, &slice, d.input_height, d.input_width, d.input_channels)?;

    let batch = args.batch_size.unwrap_or(8);
    let threshold = args.threshold.unwrap_or(0.5);
    let (truth, scores) = evaluate_source(&model, source.as_ref(), batch)?;
    let report = evaluate(&truth, &scores, threshold)?;

    println!(
        "confusion: tp {} fp {} tn {} fn {}",
        report.confusion.tp, report.confusion.fp, report.confusion.tn, report.confusion.fn_
    );
    println!("accuracy:    {}", metric_text(&report.metrics.accuracy));
    println!("precision:   {}", metric_text(&report.metrics.precision));
    println!("recall:      {}", metric_text(&report.metrics.recall));
    println!("sensitivity: {}", metric_text(&report.metrics.sensitivity));
    println!("specificity: {}", metric_text(&report.metrics.specificity));
    println!("f1:          {}", metric_text(&report.metrics.f1));
    println!("auc:         {:.4}", report.auc);

    let out_dir = args.out.unwrap_or_else(|| {
        args.checkpoint
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from("."))
    });
    write_eval_outputs(&report, &out_dir)?;
    Ok(0)
}

fn cmd_predict(args: PredictArgs) -> Result<i32> {
    require_exists(&args.checkpoint)?;
    let (model, _) = load_checkpoint(&args.checkpoint)?;

    let mut failures = 0usize;
    for path in &args.images {
        match predict_one(&model, path) {
            Ok(p) => {
                let label = if p >= args.threshold {
                    Label::Cataract
                } else {
                    Label::Normal
                };
                println!("{}\t{:.4}\t{}", path.display(), p, label.as_str());
            }
            Err(err) => {
                failures += 1;
                eprintln!("{}: {err}", path.display());
            }
        }
    }
    Ok(if failures > 0 { 1 } else { 0 })
}

fn predict_one(model: &Model, path: &Path) -> Result<f64> {
    let d = &model.descriptor;
    let decoded = decode_image(path)?;
    let resized = resize_bilinear(&decoded, d.input_height, d.input_width)?;
    let mut conformed = conform_channels(&resized, d.input_channels)?;
    for v in conformed.data_mut() {
        *v = v.clamp(0.0, 1.0);
    }
    let batch = conformed.reshape(Shape::new([
        1,
        d.input_height,
        d.input_width,
        d.input_channels,
    ])?)?;
    Ok(model.infer(&batch)?.data()[0])
}

fn cmd_gradcheck(args: GradcheckArgs) -> Result<i32> {
    let reports = run_suite(&SuiteConfig {
        seed: args.seed,
        seeds_per_layer: args.seeds_per_layer,
        sabotage: args.sabotage,
    })?;
    println!("{:<18} {:>12} {:>10}  result", "layer", "max rel err", "tolerance");
    let mut all_passed = true;
    for r in &reports {
        let status = if r.passed() { "pass" } else { "FAIL" };
        all_passed &= r.passed();
        println!(
            "{:<18} {:>12.3e} {:>10.0e}  {status}",
            r.name, r.max_rel_err, r.tolerance
        );
    }
    Ok(if all_passed { 0 } else { 1 })
}
