use std::collections::HashMap;
use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use serde::Serialize;
use serde_json::json;

use dermpipe::config::{PipelineConfig, TtaMode};
use dermpipe::dataset::{
    assemble_training_set, class_counts, read_meta_csv, split_folds, ClassWeights, FoldAssignment, FoldWarning,
    Manifest, Source,
};
use dermpipe::ensemble::{ensemble_average, search_optimal_subset, ConfigurationSet, Scoring, Target};
use dermpipe::error::IoContext;
use dermpipe::fsutil::write_atomic;
use dermpipe::head::{predict_views, read_checkpoint, train_head, write_checkpoint, FeatureStore};
use dermpipe::image::RgbImage;
use dermpipe::meta::{encode_meta_with, MetaVector};
use dermpipe::metrics::{self, read_truth_path};
use dermpipe::par::{self, Execution};
use dermpipe::predictions::PredictionMatrix;
use dermpipe::preprocess::{crop_report_row, preprocess_tree, CROP_REPORT_HEADER};
use dermpipe::synth::{generate_synthetic, SynthSizes};
use dermpipe::tta::{self, crop_schedule_rr_with, crop_schedule_ss, SCHEDULE_HEADER};
use dermpipe::{Error, Label, Result, NUM_CLASSES};

use crate::{Cli, Command, Global};

#[derive(Debug, Args)]
pub struct PreprocessArgs {
    /// Directory of PNG/JPEG images (searched recursively).
    #[arg(long)]
    input: PathBuf,
    /// Output directory; mirrors the input tree as PNGs.
    #[arg(long)]
    output: PathBuf,
    /// Crop report CSV (default: OUTPUT/crop_report.csv).
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long)]
    threshold: Option<f64>,
    /// Minkowski norm order for color constancy.
    #[arg(long)]
    p: Option<f64>,
    /// Longest side after resizing.
    #[arg(long)]
    target: Option<usize>,
    #[arg(long)]
    inset: Option<f64>,
    #[arg(long)]
    ratio_threshold: Option<f64>,
}

#[derive(Debug, Args)]
pub struct ManifestArgs {
    /// Labelled manifest CSV.
    #[arg(long)]
    manifest: PathBuf,
    /// Extra training-only manifest (rows are marked external).
    #[arg(long)]
    external: Option<PathBuf>,
}

impl ManifestArgs {
    fn load(&self) -> Result<Manifest> {
        let main = Manifest::read_path(&self.manifest, Source::Main)?;
        match &self.external {
            Some(p) => Ok(main.merged_with_external(Manifest::read_path(p, Source::External)?)?),
            None => Ok(main),
        }
    }
}

#[derive(Debug, Args)]
pub struct SplitFoldsArgs {
    #[command(flatten)]
    manifest: ManifestArgs,
    /// Output CSV `image,fold`.
    #[arg(long)]
    out: PathBuf,
    /// Number of folds.
    #[arg(long)]
    m: Option<usize>,
}

#[derive(Debug, Args)]
pub struct WeightsArgs {
    #[command(flatten)]
    manifest: ManifestArgs,
    /// Class-weight exponent.
    #[arg(long)]
    k: Option<f64>,
    /// Count only the training rows of `--fold` under this fold assignment.
    #[arg(long, requires = "fold")]
    folds: Option<PathBuf>,
    #[arg(long, requires = "folds")]
    fold: Option<usize>,
    /// Output CSV `class,weight`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainHeadArgs {
    #[command(flatten)]
    manifest: ManifestArgs,
    /// Training feature file.
    #[arg(long)]
    features: PathBuf,
    #[arg(long)]
    folds: PathBuf,
    /// Output directory (`fold{j}/best.ckpt`, `last.ckpt`, `history.csv`).
    #[arg(long)]
    out: PathBuf,
    /// Train only this fold.
    #[arg(long)]
    fold: Option<usize>,
    /// Class weights CSV; computed per fold from training counts otherwise.
    #[arg(long)]
    weights: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    eval_every: Option<usize>,
    /// Keep the meta-data layers at their initialization.
    #[arg(long)]
    freeze_meta: bool,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Checkpoint {
    Best,
    Last,
}

impl Checkpoint {
    fn file(self) -> &'static str {
        match self {
            Checkpoint::Best => "best.ckpt",
            Checkpoint::Last => "last.ckpt",
        }
    }
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[command(flatten)]
    manifest: ManifestArgs,
    #[arg(long)]
    folds: PathBuf,
    /// Output directory of `train-head`.
    #[arg(long)]
    models: PathBuf,
    /// Feature file whose replicates are the TTA views.
    #[arg(long)]
    features: PathBuf,
    /// TTA mode: ss (36 views), rr (16 views) or none.
    #[arg(long)]
    tta: Option<TtaMode>,
    #[arg(long, value_enum, default_value = "best")]
    checkpoint: Checkpoint,
    /// Output directory (`val_fold{j}.csv`, `test_fold{j}.csv`).
    #[arg(long)]
    out: PathBuf,
    /// Test-set meta data (`image` plus optional meta columns).
    #[arg(long)]
    test_meta: Option<PathBuf>,
    /// Test-set features (default: `--features`).
    #[arg(long, requires = "test_meta")]
    test_features: Option<PathBuf>,
    /// Preprocessed images; writes the view schedule to OUT/views.csv.
    #[arg(long)]
    images: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EnsembleSearchArgs {
    /// Configuration directories (each with `val_fold{j}.csv`).
    #[arg(long, num_args = 1..)]
    pool: Vec<PathBuf>,
    /// Ground truth: a manifest, `image,label`, or one-hot class columns.
    #[arg(long)]
    truth: PathBuf,
    /// Search report (JSON).
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    guard: Option<usize>,
    /// pooled | per-fold-mean
    #[arg(long)]
    scoring: Option<Scoring>,
    /// Include every subset's score in the report.
    #[arg(long)]
    per_subset_scores: bool,
    /// Write the chosen ensemble's pooled validation predictions.
    #[arg(long)]
    val_out: Option<PathBuf>,
    /// Write the chosen ensemble's test predictions.
    #[arg(long)]
    test_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Prediction CSV.
    #[arg(long)]
    pred: PathBuf,
    /// Ground truth: a manifest, `image,label`, or one-hot class columns.
    #[arg(long)]
    truth: PathBuf,
    /// Per-class report CSV.
    #[arg(long)]
    out: Option<PathBuf>,
    /// JSON summary file.
    #[arg(long)]
    summary: Option<PathBuf>,
    /// Sensitivity floor for AUC-S.
    #[arg(long, default_value_t = metrics::AUC_S_FLOOR)]
    floor: f64,
    /// Also report the unnormalized AUC-S area.
    #[arg(long)]
    auc_s_raw: bool,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 200)]
    images: usize,
    #[arg(long, default_value_t = 9)]
    classes: usize,
    #[arg(long, default_value_t = 0)]
    test_images: usize,
    #[arg(long, default_value_t = 16)]
    feature_dim: usize,
    #[arg(long, default_value_t = 4)]
    train_replicates: usize,
    #[arg(long, default_value_t = 6.0)]
    separation: f64,
    #[arg(long, default_value_t = 0.1)]
    missing_rate: f64,
    #[arg(long, default_value_t = 96)]
    max_width: usize,
}

pub fn run(cli: &Cli) -> Result<()> {
    let mut cfg = PipelineConfig::resolve(cli.global.config.as_deref())?;
    if let Some(s) = cli.global.seed {
        cfg.folds.seed = s;
        cfg.head.train.seed = s;
    }
    let exec = match cli.global.jobs {
        Some(1) => Execution::Sequential,
        _ => Execution::Parallel,
    };
    let g = &cli.global;
    par::with_jobs(cli.global.jobs, || match &cli.command {
        Command::Preprocess(a) => preprocess(g, cfg, a, exec),
        Command::SplitFolds(a) => split(g, cfg, a),
        Command::Weights(a) => weights(g, cfg, a),
        Command::TrainHead(a) => train(g, cfg, a, exec),
        Command::Predict(a) => predict(g, cfg, a, exec),
        Command::EnsembleSearch(a) => ensemble(g, cfg, a, exec),
        Command::Evaluate(a) => evaluate(g, a),
        Command::Synth(a) => synth(g, a),
    })
}

fn emit(g: &Global, value: serde_json::Value) {
    if g.json {
        println!("{value}");
    }
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    write_atomic(path, bytes).at(path)
}

fn invalid(msg: impl Into<String>) -> Error {
    Error::Invalid(msg.into())
}

fn preprocess(g: &Global, mut cfg: PipelineConfig, a: &PreprocessArgs, exec: Execution) -> Result<()> {
    let p = &mut cfg.preprocess;
    p.threshold = a.threshold.unwrap_or(p.threshold);
    p.p = a.p.unwrap_or(p.p);
    p.target = a.target.unwrap_or(p.target);
    p.inset = a.inset.unwrap_or(p.inset);
    p.ratio_threshold = a.ratio_threshold.unwrap_or(p.ratio_threshold);
    if !a.input.is_dir() {
        return Err(Error::io(&a.input, std::io::Error::new(std::io::ErrorKind::NotFound, "input directory not found")));
    }
    let entries = preprocess_tree(&a.input, &a.output, &cfg.preprocess, exec)?;
    let mut report = String::from(CROP_REPORT_HEADER);
    report.push('\n');
    for e in &entries {
        report.push_str(&crop_report_row(&e.image, &e.report));
        report.push('\n');
    }
    let report_path = a.report.clone().unwrap_or_else(|| a.output.join("crop_report.csv"));
    write(&report_path, report.as_bytes())?;
    let cropped = entries.iter().filter(|e| e.report.cropped).count();
    let degenerate = entries.iter().filter(|e| e.report.warn_degenerate).count();
    let zero_channel = entries.iter().filter(|e| e.report.warn_zero_channel).count();
    log::info!("preprocessed {} images ({cropped} cropped)", entries.len());
    emit(
        g,
        json!({"images": entries.len(), "cropped": cropped, "degenerate": degenerate, "zero_channel": zero_channel}),
    );
    Ok(())
}

fn split(g: &Global, cfg: PipelineConfig, a: &SplitFoldsArgs) -> Result<()> {
    let manifest = a.manifest.load()?;
    let m = a.m.unwrap_or(cfg.folds.m);
    let split = split_folds(&manifest, m, cfg.folds.seed)?;
    write(&a.out, &split.assignment.to_csv_bytes()?)?;
    let sizes: Vec<usize> = (0..m).map(|f| split.assignment.images_in(f).len()).collect();
    let warnings: Vec<String> = split
        .warnings
        .iter()
        .map(|w| match w {
            FoldWarning::TooFewLesions { label, lesions } => format!("{label}: {lesions} lesion groups"),
        })
        .collect();
    log::info!("assigned {} images to {m} folds: {sizes:?}", split.assignment.len());
    emit(g, json!({"images": split.assignment.len(), "fold_sizes": sizes, "warnings": warnings}));
    Ok(())
}

fn weights(g: &Global, cfg: PipelineConfig, a: &WeightsArgs) -> Result<()> {
    let manifest = a.manifest.load()?;
    let k = a.k.unwrap_or(cfg.loss.k);
    let counts = match (&a.folds, a.fold) {
        (Some(path), Some(fold)) => {
            let assignment = FoldAssignment::read_path(path, None)?;
            let (train, _) = assemble_training_set(&assignment, &manifest, fold)?;
            class_counts(train.iter().copied())
        }
        _ => class_counts(manifest.rows()),
    };
    let w = ClassWeights::from_counts(&counts, k)?;
    write(&a.out, &w.to_csv_bytes()?)?;
    let entries: serde_json::Map<String, serde_json::Value> =
        w.entries().map(|(l, v)| (l.code().to_string(), json!(v))).collect();
    emit(g, json!({"k": k, "counts": counts, "weights": entries}));
    Ok(())
}

#[derive(Serialize)]
struct FoldSummary {
    fold: usize,
    train_images: usize,
    val_images: usize,
    best_epoch: usize,
    best_val_mean_sensitivity: Option<f64>,
}

fn train(g: &Global, mut cfg: PipelineConfig, a: &TrainHeadArgs, exec: Execution) -> Result<()> {
    let t = &mut cfg.head.train;
    t.epochs = a.epochs.unwrap_or(t.epochs);
    t.learning_rate = a.learning_rate.unwrap_or(t.learning_rate);
    t.batch_size = a.batch_size.unwrap_or(t.batch_size);
    t.eval_every = a.eval_every.unwrap_or(t.eval_every);
    t.freeze_meta |= a.freeze_meta;
    cfg.validate()?;
    let manifest = a.manifest.load()?;
    let assignment = FoldAssignment::read_path(&a.folds, None)?;
    let store = read_features(&a.features)?;
    let dims = cfg.head.dims(store.dim())?;
    let fixed_weights = match &a.weights {
        Some(p) => {
            let f = std::fs::File::open(p).at(p)?;
            Some(ClassWeights::read_csv(f, &p.display().to_string())?)
        }
        None => None,
    };
    let folds: Vec<usize> = match a.fold {
        Some(f) if f >= assignment.num_folds() => {
            return Err(invalid(format!("fold {f} out of range for {} folds", assignment.num_folds())))
        }
        Some(f) => vec![f],
        None => (0..assignment.num_folds()).collect(),
    };
    let results = par::map_slice(exec, &folds, |&fold| -> Result<FoldSummary> {
        let (train_rows, val_rows) = assemble_training_set(&assignment, &manifest, fold)?;
        let w = match &fixed_weights {
            Some(w) => w.clone(),
            None => ClassWeights::from_rows(train_rows.iter().copied(), cfg.loss.k)?,
        };
        let mut fold_cfg = cfg.head.train.clone();
        fold_cfg.seed = fold_cfg.seed.wrapping_add(fold as u64);
        let outcome = train_head(&store, &train_rows, &val_rows, &w, dims, &fold_cfg)?;
        let dir = a.out.join(format!("fold{fold}"));
        write(&dir.join("best.ckpt"), &write_checkpoint(&outcome.best))?;
        write(&dir.join("last.ckpt"), &write_checkpoint(&outcome.last))?;
        write(&dir.join("history.csv"), outcome.history_csv().as_bytes())?;
        log::info!(
            "fold {fold}: best epoch {} (val S {:?}), {} train / {} val images",
            outcome.best_epoch,
            outcome.best_score,
            train_rows.len(),
            val_rows.len()
        );
        Ok(FoldSummary {
            fold,
            train_images: train_rows.len(),
            val_images: val_rows.len(),
            best_epoch: outcome.best_epoch,
            best_val_mean_sensitivity: outcome.best_score,
        })
    });
    let summaries = results.into_iter().collect::<Result<Vec<_>>>()?;
    write(&a.out.join("train_config.toml"), cfg.to_toml().as_bytes())?;
    let summary = json!({ "folds": summaries });
    write(&a.out.join("train_summary.json"), format!("{summary:#}\n").as_bytes())?;
    emit(g, summary);
    Ok(())
}

fn read_features(path: &Path) -> Result<FeatureStore> {
    let f = std::fs::File::open(path).at(path)?;
    Ok(FeatureStore::read_from(std::io::BufReader::new(f))?)
}

fn check_views(store: &FeatureStore, mode: TtaMode, path: &Path) -> Result<()> {
    match mode.views() {
        Some(v) if v != store.replicates() => Err(invalid(format!(
            "{}: {} views per image, but TTA mode {} needs {v}",
            path.display(),
            store.replicates(),
            mode.code()
        ))),
        _ => Ok(()),
    }
}

fn write_schedule(dir: &Path, cfg: &PipelineConfig, mode: TtaMode, out: &Path) -> Result<()> {
    if mode == TtaMode::None {
        log::warn!("no view schedule for TTA mode none");
        return Ok(());
    }
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .at(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
        .collect();
    files.sort();
    let mut s = String::from(SCHEDULE_HEADER);
    s.push('\n');
    for path in files {
        let img = RgbImage::load(&path)?;
        let id = path.file_stem().map(|x| x.to_string_lossy().into_owned()).unwrap_or_default();
        let specs: Vec<tta::CropSpec> = match mode {
            TtaMode::Ss => crop_schedule_ss(img.dims(), cfg.tta.crop)?.to_vec(),
            _ => crop_schedule_rr_with(img.dims(), cfg.tta.input, cfg.tta.scales)?.to_vec(),
        };
        for (v, spec) in specs.iter().enumerate() {
            s.push_str(&tta::schedule_row(&id, v, spec));
            s.push('\n');
        }
    }
    write(&out.join("views.csv"), s.as_bytes())
}

fn predict(g: &Global, cfg: PipelineConfig, a: &PredictArgs, exec: Execution) -> Result<()> {
    let mode = a.tta.unwrap_or(cfg.tta.mode);
    let manifest = a.manifest.load()?;
    let assignment = FoldAssignment::read_path(&a.folds, None)?;
    let store = read_features(&a.features)?;
    check_views(&store, mode, &a.features)?;
    let test = match &a.test_meta {
        Some(meta_path) => {
            let f = std::fs::File::open(meta_path).at(meta_path)?;
            let meta = read_meta_csv(f, &meta_path.display().to_string())?;
            let test_store = match &a.test_features {
                Some(p) => {
                    let s = read_features(p)?;
                    check_views(&s, mode, p)?;
                    Some(s)
                }
                None => None,
            };
            Some((meta, test_store))
        }
        None => None,
    };
    if let Some(dir) = &a.images {
        write_schedule(dir, &cfg, mode, &a.out)?;
    }
    let encoding = cfg.head.train.age_encoding;
    let folds: Vec<usize> = (0..assignment.num_folds()).collect();
    let results = par::map_slice(exec, &folds, |&fold| -> Result<usize> {
        let ckpt = a.models.join(format!("fold{fold}")).join(a.checkpoint.file());
        let params = read_checkpoint(&std::fs::read(&ckpt).at(&ckpt)?)?;
        let (_, val_rows) = assemble_training_set(&assignment, &manifest, fold)?;
        let items: Vec<(&str, MetaVector)> = val_rows
            .iter()
            .map(|r| (r.image.as_str(), encode_meta_with(&r.meta, encoding)))
            .collect();
        let probs = predict_views(&params, &store, &items)?;
        let ids = val_rows.iter().map(|r| r.image.clone()).collect();
        let m = PredictionMatrix::new(ids, probs)?;
        write(&a.out.join(format!("val_fold{fold}.csv")), &m.to_csv_bytes()?)?;
        if let Some((meta, test_store)) = &test {
            let items: Vec<(&str, MetaVector)> =
                meta.iter().map(|(id, rec)| (id.as_str(), encode_meta_with(rec, encoding))).collect();
            let probs = predict_views(&params, test_store.as_ref().unwrap_or(&store), &items)?;
            let ids = meta.iter().map(|(id, _)| id.clone()).collect();
            let m = PredictionMatrix::new(ids, probs)?;
            write(&a.out.join(format!("test_fold{fold}.csv")), &m.to_csv_bytes()?)?;
        }
        Ok(val_rows.len())
    });
    let counts = results.into_iter().collect::<Result<Vec<_>>>()?;
    log::info!(
        "predicted {} validation images ({}, {} views)",
        counts.iter().sum::<usize>(),
        mode.code(),
        store.replicates()
    );
    emit(g, json!({"val_images": counts, "views": store.replicates(), "test": test.is_some()}));
    Ok(())
}

fn ensemble(g: &Global, cfg: PipelineConfig, a: &EnsembleSearchArgs, exec: Execution) -> Result<()> {
    let pool = if a.pool.is_empty() { cfg.ensemble.pool.clone() } else { a.pool.clone() };
    if pool.is_empty() {
        return Err(invalid("no configurations given (--pool or [ensemble] pool)"));
    }
    let set = ConfigurationSet::load_dirs(&pool)?;
    let truth = read_truth_path(&a.truth)?;
    let guard = a.guard.unwrap_or(cfg.ensemble.guard);
    let scoring = a.scoring.unwrap_or(cfg.ensemble.scoring);
    let report = search_optimal_subset(&set, &truth, guard, scoring, a.per_subset_scores, exec)?;
    let value = serde_json::to_value(&report).expect("report serializes");
    write(&a.out, format!("{value:#}\n").as_bytes())?;
    log::info!("best subset {:?}: S* = {:.6}", report.subset, report.s_star);
    if let Some(p) = &a.val_out {
        let m = ensemble_average(&report.indices, &set, Target::Validation)?;
        write(p, &m.to_csv_bytes()?)?;
    }
    if let Some(p) = &a.test_out {
        let m = ensemble_average(&report.indices, &set, Target::Test)?;
        write(p, &m.to_csv_bytes()?)?;
    }
    emit(g, value);
    Ok(())
}

fn evaluate(g: &Global, a: &EvaluateArgs) -> Result<()> {
    let preds = PredictionMatrix::read_path(&a.pred)?;
    let truth: HashMap<String, Label> = read_truth_path(&a.truth)?;
    let (summary, reports) = metrics::evaluate(&preds, &truth, a.floor, a.auc_s_raw)?;
    if let Some(p) = &a.out {
        write(p, metrics::report_csv(&reports, a.auc_s_raw).as_bytes())?;
    }
    let value = serde_json::to_value(&summary).expect("summary serializes");
    if let Some(p) = &a.summary {
        write(p, format!("{value:#}\n").as_bytes())?;
    }
    log::info!(
        "mean sensitivity S = {:.6} over {} images ({} of {} classes present)",
        summary.s,
        summary.images,
        summary.classes_present,
        NUM_CLASSES - 1
    );
    emit(g, value);
    Ok(())
}

fn synth(g: &Global, a: &SynthArgs) -> Result<()> {
    let sizes = SynthSizes {
        images: a.images,
        classes: a.classes,
        test_images: a.test_images,
        feature_dim: a.feature_dim,
        train_replicates: a.train_replicates,
        separation: a.separation,
        missing_rate: a.missing_rate,
        max_width: a.max_width,
    };
    let seed = g.seed.unwrap_or(0);
    let corpus = generate_synthetic(seed, &sizes)?;
    corpus.write(&a.out)?;
    log::info!("wrote {} images to {}", corpus.images.len(), a.out.display());
    emit(
        g,
        json!({"images": corpus.images.len(), "test_images": corpus.test_truth.len(), "seed": seed}),
    );
    Ok(())
}
