//! `cade` command-line interface: phantom generation, preprocessing,
//! training, inference, FROC evaluation, bootstrap comparison and k-fold
//! cross-testing, wired end to end over the shared experiment config.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use cade::config::ExperimentConfig;
use cade::detector::{load_checkpoint, RetinaNet3d};
use cade::error::{Error, Result};
use cade::evaluation::{
    bootstrap_compare, cpm, curve_confidence_band, evaluate_run, froc, FrocCurve, MetricTag,
};
use cade::geometry::BoundingBox3D;
use cade::pipeline::{
    crossval, detect_studies, ensure_fresh_dir, fresh_run_dir, preprocess_corpus,
};
use cade::records::{CaseManifest, CorpusIndex};

#[derive(Parser)]
#[command(
    name = "cade",
    about = "Computer-aided detection of breast lesions in ultrafast 4D DCE-MRI",
    long_about = "Synthetic phantom generation, dynamic-series preprocessing, 3D one-stage \
                  detector training, inference and FROC/CPM evaluation with bootstrap \
                  statistics.\n\nThe environment variable CADE_NUM_WORKERS caps the number of \
                  threads used for study-level data work (phantom I/O, preprocessing)."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthetic phantom corpora.
    Phantom {
        #[command(subcommand)]
        command: PhantomCommand,
    },
    /// Preprocess one raw series or a whole corpus into model-ready tensors.
    Preprocess(PreprocessArgs),
    /// Train the detector on a preprocessed corpus.
    Train(TrainArgs),
    /// Run a trained detector; detections come out in original coordinates.
    Detect(DetectArgs),
    /// FROC/CPM evaluation of a detections file against annotations.
    Evaluate(EvaluateArgs),
    /// Bootstrap comparison of two runs (p-value on the CPM difference).
    Compare(CompareArgs),
    /// Patient-level k-fold cross-testing: train/detect/evaluate per fold.
    Crossval(CrossvalArgs),
    /// Render a curve JSON file as an SVG plot.
    Plot(PlotArgs),
}

#[derive(Subcommand)]
enum PhantomCommand {
    /// Generate a deterministic phantom corpus.
    Generate(PhantomGenerateArgs),
}

#[derive(Args)]
struct ConfigArg {
    /// Experiment config file (.json or .toml); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
}

impl ConfigArg {
    fn load(&self) -> Result<ExperimentConfig> {
        match &self.config {
            Some(path) => ExperimentConfig::load(path),
            None => Ok(ExperimentConfig::default()),
        }
    }
}

#[derive(Args)]
struct PhantomGenerateArgs {
    /// Number of studies.
    #[arg(long)]
    n: usize,
    /// Generation seed (mandatory: corpora must be reproducible).
    #[arg(long)]
    seed: u64,
    /// Output corpus directory (must be empty or absent).
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    config: ConfigArg,
}

#[derive(Args)]
struct PreprocessArgs {
    /// Raw series tensor (base path of the .f32/.json pair).
    #[arg(long = "in", conflicts_with = "corpus")]
    input: Option<PathBuf>,
    /// Aortic ROI JSON `{"min": [z,y,x], "max": [z,y,x]}` (single-series mode).
    #[arg(long, requires = "input")]
    aorta_roi: Option<PathBuf>,
    /// Corpus directory (corpus mode preprocesses every study).
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Output directory (must be empty or absent).
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    config: ConfigArg,
}

#[derive(Args)]
struct TrainArgs {
    /// Preprocessed corpus directory.
    #[arg(long)]
    corpus: PathBuf,
    /// Training seed (mandatory).
    #[arg(long)]
    seed: u64,
    /// Hold out this fold (of --folds) as validation instead of training on
    /// everything.
    #[arg(long, requires = "folds")]
    fold: Option<usize>,
    #[arg(long)]
    folds: Option<usize>,
    /// Output directory; a fresh run-NNNN subdirectory is created.
    #[arg(long)]
    out: PathBuf,
    /// Override config epochs.
    #[arg(long)]
    epochs: Option<usize>,
    /// Train without benign annotations (hard-example ablation).
    #[arg(long)]
    exclude_benign: bool,
    #[command(flatten)]
    config: ConfigArg,
}

#[derive(Args)]
struct DetectArgs {
    /// Trained checkpoint file.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Preprocessed corpus directory.
    #[arg(long)]
    corpus: PathBuf,
    /// Output directory; a fresh run-NNNN subdirectory is created.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    config: ConfigArg,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Detections JSON-lines file.
    #[arg(long)]
    dets: PathBuf,
    /// Annotations JSON-lines file.
    #[arg(long)]
    annotations: PathBuf,
    /// Case manifest (study -> breast ids). Defaults to `cases.json` next to
    /// the annotations file.
    #[arg(long)]
    cases: Option<PathBuf>,
    /// detection-rate | sensitivity | benign-detection-rate
    #[arg(long, default_value = "detection-rate")]
    metric: String,
    /// Output directory; a fresh run-NNNN subdirectory is created.
    #[arg(long)]
    out: PathBuf,
    /// Bootstrap resamples for the confidence band (0 disables).
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    config: ConfigArg,
}

#[derive(Args)]
struct CompareArgs {
    /// Run directory A (detections.jsonl + annotations.jsonl + cases.json).
    #[arg(long)]
    run_a: PathBuf,
    /// Run directory B over the same cases.
    #[arg(long)]
    run_b: PathBuf,
    #[arg(long, default_value = "sensitivity")]
    metric: String,
    /// Bootstrap resamples.
    #[arg(long, default_value_t = 1000)]
    samples: usize,
    /// Resampling seed (mandatory).
    #[arg(long)]
    seed: u64,
    /// Write the JSON result here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    config: ConfigArg,
}

#[derive(Args)]
struct CrossvalArgs {
    /// Preprocessed corpus directory.
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, default_value_t = 10)]
    folds: usize,
    /// Fold/seed base (mandatory).
    #[arg(long)]
    seed: u64,
    /// Output directory; a fresh run-NNNN subdirectory is created.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    config: ConfigArg,
}

#[derive(Args)]
struct PlotArgs {
    /// Curve JSON produced by `evaluate` or `crossval`.
    #[arg(long)]
    curve: PathBuf,
    /// SVG output path.
    #[arg(long)]
    out: PathBuf,
}

fn parse_metric(name: &str) -> Result<MetricTag> {
    match name {
        "detection-rate" => Ok(MetricTag::DetectionRate),
        "sensitivity" => Ok(MetricTag::Sensitivity),
        "benign-detection-rate" => Ok(MetricTag::BenignDetectionRate),
        other => Err(Error::Config(format!(
            "metric: '{other}' is not one of detection-rate | sensitivity | benign-detection-rate"
        ))),
    }
}

fn run_log(dir: &Path, lines: &[String]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(dir.join("run.log"))?);
    for line in lines {
        writeln!(f, "{line}")?;
    }
    Ok(())
}

fn main() {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => {}
        Err(err) => {
            let payload = serde_json::json!({
                "error": err.to_string(),
                "exit_code": err.exit_code(),
            });
            eprintln!("{payload}");
            std::process::exit(err.exit_code());
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Phantom { command: PhantomCommand::Generate(args) } => phantom_generate(args),
        Command::Preprocess(args) => preprocess(args),
        Command::Train(args) => train(args),
        Command::Detect(args) => detect(args),
        Command::Evaluate(args) => evaluate(args),
        Command::Compare(args) => compare(args),
        Command::Crossval(args) => run_crossval(args),
        Command::Plot(args) => plot(args),
    }
}

fn phantom_generate(args: PhantomGenerateArgs) -> Result<()> {
    let config = args.config.load()?;
    ensure_fresh_dir(&args.out)?;
    let index = cade::phantom::generate_corpus(args.n, &config.phantom, args.seed, &args.out)?;
    config.save_resolved(&args.out)?;
    println!(
        "generated {} studies ({} lesions) in {}",
        index.studies.len(),
        index.all_annotations().len(),
        args.out.display()
    );
    Ok(())
}

fn preprocess(args: PreprocessArgs) -> Result<()> {
    let config = args.config.load()?;
    match (&args.input, &args.corpus) {
        (Some(series_path), None) => {
            let roi_path = args.aorta_roi.as_ref().ok_or_else(|| {
                Error::Config("preprocess: --aorta-roi is required with --in".into())
            })?;
            ensure_fresh_dir(&args.out)?;
            let series = cade::volume::read_series(series_path)?;
            let roi: BoundingBox3D =
                serde_json::from_reader(std::io::BufReader::new(std::fs::File::open(roi_path)?))?;
            let result = cade::preprocessing::preprocess_study(&series, &roi, &config.preprocess)?;
            cade::preprocessing::write_breast_tensor(
                &args.out.join("left"),
                &result.left,
                &result.left_meta,
            )?;
            cade::preprocessing::write_breast_tensor(
                &args.out.join("right"),
                &result.right,
                &result.right_meta,
            )?;
            config.save_resolved(&args.out)?;
            println!(
                "preprocessed series (reference time-point {}) into {}",
                result.reference_timepoint,
                args.out.display()
            );
            Ok(())
        }
        (None, Some(corpus_dir)) => {
            ensure_fresh_dir(&args.out)?;
            let index = preprocess_corpus(corpus_dir, &args.out, &config.preprocess)?;
            config.save_resolved(&args.out)?;
            println!("preprocessed {} studies into {}", index.studies.len(), args.out.display());
            Ok(())
        }
        _ => Err(Error::Config(
            "preprocess: pass either --in <series> --aorta-roi <json> or --corpus <dir>".into(),
        )),
    }
}

fn train(args: TrainArgs) -> Result<()> {
    let mut config = args.config.load()?;
    config.train.seed = args.seed;
    if let Some(epochs) = args.epochs {
        config.train.epochs = epochs;
    }
    if args.exclude_benign {
        config.train.include_benign = false;
    }
    let run_dir = fresh_run_dir(&args.out)?;
    config.save_resolved(&run_dir)?;

    let index = CorpusIndex::load(&args.corpus)?;
    let (train_set, val_set): (Vec<_>, Vec<_>) = match (args.fold, args.folds) {
        (Some(fold), Some(folds)) => {
            let assignment = cade::training::make_folds(&index.studies, folds, args.seed)?;
            if fold >= folds {
                return Err(Error::Config(format!("train.fold: {fold} >= folds {folds}")));
            }
            let val: Vec<_> =
                assignment[fold].iter().map(|&si| index.studies[si].clone()).collect();
            let train: Vec<_> = index
                .studies
                .iter()
                .enumerate()
                .filter(|(si, _)| !assignment[fold].contains(si))
                .map(|(_, s)| s.clone())
                .collect();
            (train, val)
        }
        _ => (index.studies.clone(), Vec::new()),
    };

    let mut net_cfg = config.network.clone();
    net_cfg.seed = args.seed;
    let mut net = RetinaNet3d::<f32>::new(net_cfg)?;
    let report = cade::training::fit(
        &mut net,
        &train_set,
        (!val_set.is_empty()).then_some(&val_set),
        &args.corpus,
        &config.train,
        &config.loss,
        cade::training::FitOptions { out_dir: &run_dir, on_epoch: None },
    )?;
    run_log(
        &run_dir,
        &[
            format!("trained on {} studies for {} steps", train_set.len(), report.steps),
            format!("checkpoint: {}", report.checkpoint.display()),
        ],
    )?;
    println!(
        "trained {} steps over {} epochs; checkpoint at {}",
        report.steps,
        report.epochs.len(),
        report.checkpoint.display()
    );
    Ok(())
}

fn detect(args: DetectArgs) -> Result<()> {
    let config = args.config.load()?;
    let run_dir = fresh_run_dir(&args.out)?;
    config.save_resolved(&run_dir)?;
    let index = CorpusIndex::load(&args.corpus)?;
    let mut net = load_checkpoint::<f32>(&args.checkpoint)?;
    let dets = detect_studies(&mut net, &index.studies, &args.corpus, &config.detect)?;
    cade::records::write_detections(&run_dir.join("detections.jsonl"), &dets)?;
    // Ship the evaluation inputs alongside so the run directory is
    // self-contained for `evaluate` and `compare`.
    cade::records::write_annotations(
        &run_dir.join("annotations.jsonl"),
        &index.all_annotations(),
    )?;
    CaseManifest::from_studies(&index.studies).save(&run_dir.join("cases.json"))?;
    run_log(&run_dir, &[format!("{} detections over {} studies", dets.len(), index.studies.len())])?;
    println!("{} detections written to {}", dets.len(), run_dir.display());
    Ok(())
}

fn write_curve_files(
    dir: &Path,
    curve: &FrocCurve,
    band: Option<&[(f64, f64)]>,
) -> Result<()> {
    serde_json::to_writer_pretty(
        std::io::BufWriter::new(std::fs::File::create(dir.join("curve.json"))?),
        curve,
    )?;
    let mut csv = std::io::BufWriter::new(std::fs::File::create(dir.join("curve.csv"))?);
    writeln!(csv, "fp_per_normal_breast,value,ci_low,ci_high")?;
    for (i, p) in curve.points.iter().enumerate() {
        let (lo, hi) = band.map_or((p.value, p.value), |b| b[i]);
        writeln!(csv, "{},{},{},{}", p.fp_per_normal_breast, p.value, lo, hi)?;
    }
    Ok(())
}

fn evaluate(args: EvaluateArgs) -> Result<()> {
    let config = args.config.load()?;
    let metric = parse_metric(&args.metric)?;
    let run_dir = fresh_run_dir(&args.out)?;
    config.save_resolved(&run_dir)?;

    let dets = cade::records::read_detections(&args.dets)?;
    let anns = cade::records::read_annotations(&args.annotations)?;
    let cases_path = args
        .cases
        .clone()
        .unwrap_or_else(|| args.annotations.with_file_name("cases.json"));
    let universe = CaseManifest::load(&cases_path)?;

    let run = evaluate_run(&dets, &anns, &universe, &config.matching)?;
    let curve = froc(&run, metric)?;
    let samples = args.samples.unwrap_or(config.evaluation.samples);
    let band = if samples > 0 {
        let fps: Vec<f64> = curve.points.iter().map(|p| p.fp_per_normal_breast).collect();
        Some(curve_confidence_band(
            &run,
            metric,
            &fps,
            samples,
            config.evaluation.confidence_level,
            args.seed,
        )?)
    } else {
        None
    };
    write_curve_files(&run_dir, &curve, band.as_deref())?;

    // Copy inputs so the run directory is usable by `compare`.
    cade::records::write_detections(&run_dir.join("detections.jsonl"), &dets)?;
    cade::records::write_annotations(&run_dir.join("annotations.jsonl"), &anns)?;
    universe.save(&run_dir.join("cases.json"))?;

    let summary = serde_json::json!({
        "metric": metric.to_string(),
        "cpm": cpm(&curve),
        "points": curve.points.len(),
        "lesions": anns.len(),
        "normal_breasts": run.total_normal_breasts(),
    });
    serde_json::to_writer_pretty(
        std::io::BufWriter::new(std::fs::File::create(run_dir.join("summary.json"))?),
        &summary,
    )?;
    run_log(&run_dir, &[format!("evaluate {metric}: cpm {}", cpm(&curve))])?;
    println!("{summary}");
    Ok(())
}

fn compare(args: CompareArgs) -> Result<()> {
    let config = args.config.load()?;
    let metric = parse_metric(&args.metric)?;
    let (dets_a, anns_a, cases_a) = cade::pipeline::load_run_inputs(&args.run_a)?;
    let (dets_b, anns_b, cases_b) = cade::pipeline::load_run_inputs(&args.run_b)?;
    let run_a = evaluate_run(&dets_a, &anns_a, &cases_a, &config.matching)?;
    let run_b = evaluate_run(&dets_b, &anns_b, &cases_b, &config.matching)?;
    let cpm_a = cpm(&froc(&run_a, metric)?);
    let cpm_b = cpm(&froc(&run_b, metric)?);
    let p = bootstrap_compare(&run_a, &run_b, metric, args.samples, args.seed)?;
    let result = serde_json::json!({
        "metric": metric.to_string(),
        "cpm_a": cpm_a,
        "cpm_b": cpm_b,
        "p": p,
        "samples": args.samples,
        "seed": args.seed,
        "significant": p <= 0.05,
    });
    match &args.out {
        Some(path) => {
            if let Some(dir) = path.parent() {
                std::fs::create_dir_all(dir)?;
            }
            serde_json::to_writer_pretty(
                std::io::BufWriter::new(std::fs::File::create(path)?),
                &result,
            )?;
        }
        None => println!("{result}"),
    }
    Ok(())
}

fn run_crossval(args: CrossvalArgs) -> Result<()> {
    let config = args.config.load()?;
    let run_dir = fresh_run_dir(&args.out)?;
    config.save_resolved(&run_dir)?;
    let index = CorpusIndex::load(&args.corpus)?;
    let summary = crossval(
        &index,
        &args.corpus,
        args.folds,
        args.seed,
        &config.network,
        &config.train,
        &config.loss,
        &config.detect,
        &config.matching,
        &run_dir,
    )?;
    run_log(
        &run_dir,
        &[format!(
            "crossval {} folds: pooled {}/{} lesions matched",
            args.folds, summary.pooled_matched_lesions, summary.pooled_total_lesions
        )],
    )?;
    println!(
        "{}",
        serde_json::json!({
            "folds": args.folds,
            "pooled_matched_lesions": summary.pooled_matched_lesions,
            "pooled_total_lesions": summary.pooled_total_lesions,
            "pooled_cpm_detection_rate": summary.pooled_cpm_detection_rate,
            "out": run_dir.display().to_string(),
        })
    );
    Ok(())
}

fn plot(args: PlotArgs) -> Result<()> {
    let curve: FrocCurve =
        serde_json::from_reader(std::io::BufReader::new(std::fs::File::open(&args.curve)?))?;
    let svg = render_curve_svg(&curve);
    if let Some(dir) = args.out.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(&args.out, svg)?;
    println!("plot written to {}", args.out.display());
    Ok(())
}

/// Minimal standalone SVG: metric value against FP/normal breast.
fn render_curve_svg(curve: &FrocCurve) -> String {
    let (w, h, ml, mb) = (640.0, 420.0, 60.0, 50.0);
    let max_fp = curve
        .points
        .iter()
        .map(|p| p.fp_per_normal_breast)
        .fold(1.0f64, f64::max);
    let x = |fp: f64| ml + (w - ml - 20.0) * (fp / max_fp);
    let y = |v: f64| (h - mb) - (h - mb - 20.0) * v;
    let mut path = String::new();
    for (i, p) in curve.points.iter().enumerate() {
        let cmd = if i == 0 { 'M' } else { 'L' };
        path.push_str(&format!("{cmd}{:.2},{:.2} ", x(p.fp_per_normal_breast), y(p.value)));
    }
    let mut ticks = String::new();
    for t in 0..=4 {
        let v = t as f64 / 4.0;
        ticks.push_str(&format!(
            "<line x1='{ml}' y1='{0:.1}' x2='{1}' y2='{0:.1}' stroke='#ddd'/>\
             <text x='8' y='{0:.1}' font-size='12'>{v:.2}</text>",
            y(v),
            w - 20.0
        ));
    }
    format!(
        "<svg xmlns='http://www.w3.org/2000/svg' width='{w}' height='{h}'>\
         <rect width='100%' height='100%' fill='white'/>{ticks}\
         <path d='{path}' fill='none' stroke='#c0392b' stroke-width='2'/>\
         <line x1='{ml}' y1='{0}' x2='{1}' y2='{0}' stroke='black'/>\
         <line x1='{ml}' y1='20' x2='{ml}' y2='{0}' stroke='black'/>\
         <text x='{2}' y='{3}' font-size='13'>false positives per normal breast</text>\
         <text x='14' y='16' font-size='13'>{4}</text></svg>",
        h - mb,
        w - 20.0,
        w / 2.0 - 90.0,
        h - 12.0,
        curve.metric
    )
}
