use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use coca_core::actp::{assign_prototypes, Label, TextualPrototypeSet};
use coca_core::adapt::{infer_all, run_adaptation, sweep_k, zero_shot_all, Prediction, RunLog};
use coca_core::classifier::{train_source, HeadCheckpoint, SourceTrainConfig};
use coca_core::clustering::{select_k, KCandidateSet, KMethod};
use coca_core::data_io::{
    gen_synthetic, labeled_from_store, read_predictions, toy_encoder, with_comment, write_predictions, DatasetManifest,
    FeatureStore, GroundTruth, PredictionRow,
};
use coca_core::metrics::{evaluate_with_bins, EvalReport};
use coca_core::mieci::{ExternalMaskedFeatures, FrozenEncoder};
use coca_core::Error;

use crate::config::Point;
use crate::error::CliError;
use crate::table::Table;

pub const SOURCE_FILE: &str = "source.feat";
pub const TARGET_FILE: &str = "target.feat";
pub const TEXT_FILE: &str = "text.feat";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const TRUTH_FILE: &str = "target_truth.csv";
pub const ADAPTED_HEAD_FILE: &str = "adapted_head.bin";
pub const RUN_LOG_FILE: &str = "run_log.csv";
pub const PREDICTIONS_FILE: &str = "predictions.csv";
pub const EVAL_JSON_FILE: &str = "eval.json";
pub const EVAL_CSV_FILE: &str = "eval.csv";
pub const HISTOGRAM_FILE: &str = "uncertainty_hist.csv";

/// `path` with a sweep suffix appended to its stem.
pub fn suffixed(path: &Path, suffix: &str) -> PathBuf {
    if suffix.is_empty() {
        return path.to_path_buf();
    }
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let name = match path.extension() {
        Some(ext) => format!("{stem}_{suffix}.{}", ext.to_string_lossy()),
        None => format!("{stem}_{suffix}"),
    };
    path.with_file_name(name)
}

fn read_store(path: &Path) -> Result<FeatureStore, CliError> {
    FeatureStore::read(path).map_err(|e| CliError::from(e).context(path.display()))
}

fn create_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path).map_err(|e| CliError::from(e).context(path.display()))
}

fn sha_prefix(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))[..16].to_owned()
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "N/A".to_owned(), |x| format!("{x:.6}"))
}

fn header(point: &Point, command: &str) -> String {
    let mut s = format!("# {}\n", point.config.provenance(command));
    if !point.label.is_empty() {
        let _ = writeln!(s, "# sweep {}", point.label);
    }
    s
}

fn textual_for(text: &FeatureStore, names: Vec<String>) -> Result<TextualPrototypeSet, CliError> {
    if names.len() != text.rows() {
        return Err(Error::ClassCountMismatch(format!(
            "{} class names but {} text features",
            names.len(),
            text.rows()
        ))
        .into());
    }
    Ok(TextualPrototypeSet::new(&text.to_matrix()?, names)?)
}

pub struct GenSynthArgs {
    pub out: PathBuf,
}

pub fn gen_synth(point: &Point, args: &GenSynthArgs, csv: bool) -> Result<String, CliError> {
    let cfg = &point.config;
    let prov = cfg.provenance("gen-synth");
    let mut bench = gen_synthetic(&cfg.synth)?;
    bench.manifest.provenance = Some(prov.clone());
    let out = suffixed(&args.out, &point.suffix);
    create_dir(&out)?;
    bench.source.write(out.join(SOURCE_FILE))?;
    bench.target.write(out.join(TARGET_FILE))?;
    bench.text.write(out.join(TEXT_FILE))?;
    bench.manifest.write(out.join(MANIFEST_FILE))?;
    bench.truth.write(out.join(TRUTH_FILE), Some(&prov))?;

    let private = bench.truth.rows.iter().filter(|(_, t)| t.is_none()).count();
    let m = &bench.manifest;
    let mut t = Table::new([
        "regime",
        "source_classes",
        "target_classes",
        "common_classes",
        "source_rows",
        "target_rows",
        "target_private_rows",
        "dim",
        "out",
    ]);
    t.push([
        m.regime.to_string(),
        m.source_classes.len().to_string(),
        m.target_classes.len().to_string(),
        m.common_classes.len().to_string(),
        bench.source.rows().to_string(),
        bench.target.rows().to_string(),
        private.to_string(),
        bench.target.dim().to_string(),
        out.display().to_string(),
    ]);
    Ok(header(point, "gen-synth") + &t.render(csv)?)
}

pub struct TrainSourceArgs {
    pub source: PathBuf,
    pub text: PathBuf,
    pub manifest: Option<PathBuf>,
    pub out: PathBuf,
}

/// Path of the validation curve written next to a head checkpoint.
pub fn curve_path(head: &Path) -> PathBuf {
    head.with_extension("curve.csv")
}

pub fn train_source_cmd(point: &Point, args: &TrainSourceArgs, csv: bool) -> Result<String, CliError> {
    let cfg = &point.config;
    let source = read_store(&args.source)?;
    let text = read_store(&args.text)?;
    let names = match &args.manifest {
        Some(p) => DatasetManifest::read(p)
            .map_err(|e| CliError::from(e).context(p.display()))?
            .source_class_names(),
        None => (0..text.rows()).map(|i| format!("class_{i:02}")).collect(),
    };
    let textual = textual_for(&text, names)?;
    let labeled = labeled_from_store(&source)?;
    let (train, val) = labeled.holdout_per_class(cfg.synth.val_shots_per_class);
    let config = SourceTrainConfig {
        kind: cfg.model,
        schedule: cfg.schedule.clone(),
        batch_size: cfg.source_batch_size,
        seed: cfg.seed,
    };
    let outcome = train_source(&train, &val, &textual, &config)?;

    let prov = cfg.provenance("train-source");
    let out = suffixed(&args.out, &point.suffix);
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    let ckpt = HeadCheckpoint {
        head: outcome.head.clone(),
        class_names: textual.class_names().to_vec(),
    };
    let bytes = ckpt.to_bytes()?;
    fs::write(&out, &bytes)?;

    let mut curve = csv::Writer::from_writer(Vec::new());
    curve.write_record(["iter", "lr", "train_loss", "val_accuracy", "val_loss"])?;
    for p in &outcome.curve {
        curve.write_record([
            p.iter.to_string(),
            format!("{:e}", p.lr),
            format!("{:.9}", p.train_loss),
            format!("{:.9}", p.val_accuracy),
            format!("{:.9}", p.val_loss),
        ])?;
    }
    let body = curve.into_inner().map_err(|e| CliError::from(e.into_error()))?;
    fs::write(curve_path(&out), with_comment(Some(&prov), body))?;

    let mut t = Table::new([
        "model",
        "classes",
        "batch_size",
        "image_rows",
        "text_rows",
        "iterations",
        "best_iter",
        "best_val_accuracy",
        "stopped_early",
        "checkpoint_sha256",
    ]);
    t.push([
        cfg.model.to_string(),
        textual.len().to_string(),
        outcome.batch_size.to_string(),
        outcome.image_rows_per_batch.to_string(),
        outcome.text_rows_per_batch.to_string(),
        outcome.iterations_run.to_string(),
        outcome.best_iter.to_string(),
        format!("{:.6}", outcome.best_val_accuracy),
        outcome.stopped_early.to_string(),
        sha_prefix(&bytes),
    ]);
    Ok(header(point, "train-source") + &t.render(csv)?)
}

pub struct SelectKArgs {
    pub target: PathBuf,
    pub cs: usize,
}

pub fn select_k_cmd(point: &Point, args: &SelectKArgs, csv: bool) -> Result<String, CliError> {
    let cfg = &point.config;
    if args.cs == 0 {
        return Err(CliError::config("--cs must be at least 1"));
    }
    let features = read_store(&args.target)?.to_matrix()?;
    let method = cfg.adapt.k_method;
    let candidates = KCandidateSet::from_source_classes(args.cs);
    let sel = select_k(&features, &candidates, method, cfg.seed)?;
    let order = order_text(method);
    let mut t = Table::new(["method", "order", "k", "score", "selected"]);
    for s in &sel.scores {
        t.push([
            method.to_string(),
            order.to_owned(),
            s.k.to_string(),
            fmt_opt(s.score),
            (s.k == sel.k).to_string(),
        ]);
    }
    let mut out = header(point, "select-k") + &t.render(csv)?;
    if !csv {
        let pick = if method.lower_is_better() { "argmin" } else { "argmax" };
        let _ = writeln!(
            out,
            "candidates {:?}; chosen K = {} ({method}, {order}, {pick})",
            candidates.candidates, sel.k
        );
    }
    Ok(out)
}

fn order_text(method: KMethod) -> &'static str {
    if method.lower_is_better() {
        "lower is better"
    } else {
        "higher is better"
    }
}

pub struct AdaptArgs {
    pub target: PathBuf,
    pub head: PathBuf,
    pub text: PathBuf,
    pub manifest: Option<PathBuf>,
    pub out: PathBuf,
}

fn encoder_for(target: &FeatureStore, manifest: Option<&DatasetManifest>, needed: bool) -> Result<FrozenEncoder, CliError> {
    if target.masked().is_some() {
        return Ok(target.masked_encoder()?);
    }
    if let Some(spec) = manifest.and_then(|m| m.toy_encoder.as_ref()) {
        return Ok(toy_encoder(spec)?);
    }
    if needed {
        return Err(CliError::config(
            "mask loss needs masked target features: ingest them into the target store, \
             pass --manifest with a toy_encoder entry, or use --no-mieci",
        ));
    }
    Ok(FrozenEncoder::External(ExternalMaskedFeatures::default()))
}

fn k_scores(log: &RunLog) -> String {
    log.selection
        .scores
        .iter()
        .map(|s| format!("{}:{}", s.k, fmt_opt(s.score)))
        .collect::<Vec<_>>()
        .join(";")
}

fn run_log_csv(prov: &str, log: &RunLog, mode: &str) -> Result<Vec<u8>, CliError> {
    let summary = format!(
        "{prov}\nmode={mode} k={} k_method={} k_scores={} sweep_kmeans_calls={} post_sweep_kmeans_calls={} \
         canonical_clusterings={} pseudo_unknown={} pseudo_known={}",
        log.k(),
        log.selection.method,
        k_scores(log),
        log.sweep_kmeans_calls,
        log.post_sweep_kmeans_calls,
        log.canonical_clusterings,
        log.unknown_pseudo_labels(),
        log.pseudo_labels.len() - log.unknown_pseudo_labels(),
    );
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["epoch", "image_loss", "text_loss", "mask_loss", "total_loss", "lr"])?;
    let cell = |v: Option<f64>| v.map_or_else(String::new, |x| format!("{x:.9}"));
    for e in &log.epochs {
        w.write_record([
            e.epoch.to_string(),
            cell(e.image_loss),
            cell(e.text_loss),
            cell(e.mask_loss),
            format!("{:.9}", e.total()),
            format!("{:e}", e.lr),
        ])?;
    }
    let body = w.into_inner().map_err(|e| CliError::from(e.into_error()))?;
    Ok(with_comment(Some(&summary), body))
}

pub fn adapt_cmd(point: &Point, args: &AdaptArgs, csv: bool) -> Result<String, CliError> {
    let cfg = &point.config;
    let target_store = read_store(&args.target)?;
    let text = read_store(&args.text)?;
    let ckpt = HeadCheckpoint::read(&args.head).map_err(|e| CliError::from(e).context(args.head.display()))?;
    let manifest = match &args.manifest {
        Some(p) => Some(DatasetManifest::read(p).map_err(|e| CliError::from(e).context(p.display()))?),
        None => None,
    };
    if let Some(m) = &manifest {
        if m.source_class_count() != ckpt.head.classes() {
            return Err(Error::ClassCountMismatch(format!(
                "manifest lists {} source classes, head has {}",
                m.source_class_count(),
                ckpt.head.classes()
            ))
            .into());
        }
    }
    if text.rows() != ckpt.head.classes() {
        return Err(Error::ClassCountMismatch(format!(
            "head has {} classes, text store has {} features",
            ckpt.head.classes(),
            text.rows()
        ))
        .into());
    }
    let textual = textual_for(&text, ckpt.class_names.clone())?;
    let target = target_store.to_matrix()?;
    let mode = if cfg.zero_shot {
        "zero_shot"
    } else if cfg.adapt.losses.mask {
        "coca"
    } else {
        "without_mieci"
    };

    let out = suffixed(&args.out, &point.suffix);
    let prov = cfg.provenance("adapt");
    let (log, predictions): (RunLog, Vec<Prediction>) = if cfg.zero_shot {
        if target.dim() != textual.dim() {
            return Err(Error::DimensionMismatch {
                expected: textual.dim(),
                got: target.dim(),
            }
            .into());
        }
        let (selection, calls) = sweep_k(&target, textual.len(), &cfg.adapt)?;
        let assignment = assign_prototypes(&textual, &selection.model)?;
        let pseudo_labels = coca_core::actp::pseudo_label_all(&target, &textual, &assignment);
        let predictions = zero_shot_all(&target, &textual, &assignment);
        let log = RunLog {
            selection,
            sweep_kmeans_calls: calls,
            post_sweep_kmeans_calls: 0,
            canonical_clusterings: 1,
            assignment,
            pseudo_labels,
            epochs: Vec::new(),
            trajectory: None,
        };
        create_dir(&out)?;
        (log, predictions)
    } else {
        let encoder = encoder_for(&target_store, manifest.as_ref(), cfg.adapt.losses.mask)?;
        let outcome = run_adaptation(&target, &encoder, &textual, &ckpt.head, &cfg.adapt)?;
        let predictions = infer_all(&target, &outcome.student, cfg.adapt.tau)?;
        create_dir(&out)?;
        HeadCheckpoint {
            head: outcome.student,
            class_names: ckpt.class_names.clone(),
        }
        .write(out.join(ADAPTED_HEAD_FILE))?;
        (outcome.log, predictions)
    };

    fs::write(out.join(RUN_LOG_FILE), run_log_csv(&prov, &log, mode)?)?;
    let rows = PredictionRow::from_predictions(&predictions);
    write_predictions(out.join(PREDICTIONS_FILE), &rows, Some(&prov))?;

    let predicted_unknown = predictions.iter().filter(|p| p.label.is_unknown()).count();
    let mut t = Table::new([
        "mode",
        "k",
        "k_method",
        "sweep_kmeans_calls",
        "post_sweep_kmeans_calls",
        "canonical_clusterings",
        "pseudo_unknown",
        "predicted_unknown",
        "samples",
        "epochs",
        "final_loss",
        "tau",
        "mask_ratio",
    ]);
    t.push([
        mode.to_owned(),
        log.k().to_string(),
        log.selection.method.to_string(),
        log.sweep_kmeans_calls.to_string(),
        log.post_sweep_kmeans_calls.to_string(),
        log.canonical_clusterings.to_string(),
        log.unknown_pseudo_labels().to_string(),
        predicted_unknown.to_string(),
        predictions.len().to_string(),
        log.epochs.len().to_string(),
        fmt_opt(log.epochs.last().map(|e| e.total())),
        cfg.adapt.tau.to_string(),
        if mode == "coca" {
            cfg.adapt.mask_ratio.to_string()
        } else {
            "N/A".to_owned()
        },
    ]);
    Ok(header(point, "adapt") + &t.render(csv)?)
}

pub struct EvalArgs {
    pub pred: PathBuf,
    pub truth: PathBuf,
    pub manifest: PathBuf,
    pub out: Option<PathBuf>,
}

#[derive(Serialize)]
struct EvalJson<'a> {
    provenance: String,
    #[serde(flatten)]
    report: &'a EvalReport,
}

fn pct(v: Option<f64>) -> String {
    v.map_or_else(|| "N/A".to_owned(), |x| format!("{:.4}", 100.0 * x))
}

pub fn eval_cmd(point: &Point, args: &EvalArgs, csv: bool) -> Result<String, CliError> {
    let cfg = &point.config;
    let preds = read_predictions(&args.pred).map_err(|e| CliError::from(e).context(args.pred.display()))?;
    let truth = GroundTruth::read(&args.truth).map_err(|e| CliError::from(e).context(args.truth.display()))?;
    let manifest = DatasetManifest::read(&args.manifest).map_err(|e| CliError::from(e).context(args.manifest.display()))?;
    let cs = manifest.source_class_count();
    if let Some(p) = preds.iter().find(|p| matches!(p.label, Label::Class(c) if c >= cs)) {
        return Err(Error::ClassCountMismatch(format!(
            "sample {} predicted as class {} of {cs} source classes",
            p.sample_id, p.label
        ))
        .into());
    }
    let report = evaluate_with_bins(&preds, &truth, &manifest, cfg.hist_bins)?;

    let prov = cfg.provenance("eval");
    let dir = match &args.out {
        Some(d) => suffixed(d, &point.suffix),
        None => args.pred.parent().map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from(".")),
    };
    let tag = |name: &str| {
        if args.out.is_none() {
            suffixed(Path::new(name), &point.suffix)
        } else {
            PathBuf::from(name)
        }
    };
    create_dir(&dir)?;
    let json = serde_json::to_string_pretty(&EvalJson {
        provenance: prov.clone(),
        report: &report,
    })?;
    fs::write(dir.join(tag(EVAL_JSON_FILE)), json + "\n")?;
    let body = format!("{}\n{}\n", EvalReport::CSV_HEADER, report.csv_row());
    fs::write(dir.join(tag(EVAL_CSV_FILE)), with_comment(Some(&prov), body.into_bytes()))?;
    fs::write(
        dir.join(tag(HISTOGRAM_FILE)),
        with_comment(Some(&prov), report.uncertainty_histogram.to_csv().into_bytes()),
    )?;

    let mut t = Table::new(["os_star", "unk", "os", "hos", "n_common", "n_private"]);
    t.push([
        pct(Some(report.os_star)),
        pct(report.unk),
        pct(Some(report.os)),
        pct(report.hos),
        report.n_common.to_string(),
        report.n_private.to_string(),
    ]);
    let mut out = header(point, "eval") + &t.render(csv)?;
    if !csv && !report.per_class.is_empty() {
        let mut pc = Table::new(["class", "accuracy"]);
        for (name, acc) in &report.per_class {
            pc.push([name.clone(), pct(Some(*acc))]);
        }
        out.push('\n');
        out.push_str(&pc.to_aligned());
    }
    Ok(out)
}
