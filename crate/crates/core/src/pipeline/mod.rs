//! End-to-end commands. Each command reads its inputs from the run
//! directory (or the paths given in [`RunConfig`]), writes its outputs under
//! `out/` and leaves its inputs untouched. Outputs are a pure function of the
//! inputs, the configuration and the seed.

mod artifacts;
mod config;

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use crate::datamodel::{
    exclusion_filter, load_manifest, save_manifest, DatasetManifest, ExclusionReason, KneeRecord, RecordKey,
};
use crate::evalstats::{
    assemble_oof, bootstrap_ci, curve_svg, delong_test, pr_curve, roc_auc, stratified_group_kfold, subgroup_report,
    write_curve_csv, write_metrics_csv, write_oof_csv, CurveKind, Estimate, FoldAssignment, FoldModel, Metric,
    MetricsRow, ScoredSet,
};
use crate::gbm::{
    clinical_features, fit_fusion_model, fit_reference_model, fusion_features, treeshap, GbmModel, ReferenceFit,
    Variant, FUSION_FEATURES,
};
use crate::imaging::{crop_resize, load_png, orient_box_left, preprocess, save_png, STANDARD_SPACING_MM};
use crate::neuralnet::{self, ArchDescriptor, TrainConfig};
use crate::roi::{self, iou, select_roi, RoiBox, RoiDetection, ScorerTraining, WindowDetector};
use crate::synth::{generate_cohort, generate_phantom, image_file_name};
use crate::{rng, Error, Result};

pub use artifacts::{read_folds, read_scores, read_status, update_run_meta, ScoreEntry};
pub use config::{RoiSource, RunConfig};

/// Order of sections in `run_meta.txt`.
pub const COMMANDS: [&str; 7] = ["synth", "preprocess", "roi", "train", "reference", "fuse", "evaluate"];

/// Models known to `evaluate`, as (file slug, display name).
pub const MODELS: [(&str, &str); 5] = [
    ("cnn", "CNN"),
    ("model1", "Model 1"),
    ("model2", "Model 2"),
    ("model3", "Model 3"),
    ("fusion", "Fusion"),
];

fn require(path: &Path, command: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::MissingArtifact {
            path: path.to_path_buf(),
            command: format!("pfoa {command}"),
        })
    }
}

fn make_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn key_file(key: &RecordKey) -> String {
    image_file_name(&key.subject_id, key.side, key.visit)
}

fn oof_path(cfg: &RunConfig, slug: &str) -> PathBuf {
    cfg.path(&format!("oof_{slug}.csv"))
}

fn input_manifest(cfg: &RunConfig) -> Result<DatasetManifest> {
    let path = cfg.manifest_path();
    require(&path, "synth")?;
    load_manifest(&path)
}

fn included_manifest(cfg: &RunConfig) -> Result<DatasetManifest> {
    let path = cfg.path("included.csv");
    require(&path, "roi")?;
    load_manifest(&path)
}

fn finish(cfg: &RunConfig, command: &str, mut lines: Vec<String>) -> Result<Vec<String>> {
    lines.insert(0, format!("seed={}", cfg.seed));
    update_run_meta(&cfg.path("run_meta.txt"), command, &lines, &cfg.echo())?;
    Ok(lines)
}

/// Generates a synthetic cohort: `manifest.csv`, 16-bit phantoms under
/// `images/` and the patella boxes in the preprocessed frame as
/// `annotations.csv`.
pub fn cmd_synth(cfg: &RunConfig) -> Result<Vec<String>> {
    cfg.validate()?;
    let scfg = cfg.synth_config();
    let manifest = generate_cohort(&scfg)?;
    let images = cfg.out.join("images");
    make_dir(&images)?;
    let mut annotations = BTreeMap::new();
    for r in &manifest.records {
        let phantom = generate_phantom(r, &scfg)?;
        let name = r.image_path.as_deref().expect("synthetic records carry an image path");
        save_png(&phantom.image, &images.join(name))?;
        let scale = phantom.image.spacing() / STANDARD_SPACING_MM;
        let oriented = orient_box_left(phantom.truth, phantom.image.width(), r.side);
        annotations.insert(r.key(), oriented.scaled(scale));
    }
    save_manifest(&manifest, &cfg.path("manifest.csv"))?;
    roi::save_annotations(&annotations, &cfg.path("annotations.csv"))?;
    let positives = manifest.records.iter().filter(|r| r.pfoa == Some(true)).count();
    finish(
        cfg,
        "synth",
        vec![
            format!("subjects={}", manifest.subjects().len()),
            format!("knees={}", manifest.len()),
            format!("pfoa_knees={positives}"),
        ],
    )
}

/// Normalises, resamples and orients every available radiograph into
/// `preprocessed/`, recording the outcome per knee in `preprocess.csv`.
pub fn cmd_preprocess(cfg: &RunConfig) -> Result<Vec<String>> {
    cfg.validate()?;
    let manifest = input_manifest(cfg)?;
    let src = cfg.images_dir();
    let dst = cfg.path("preprocessed");
    make_dir(&dst)?;
    let mut status = BTreeMap::new();
    for r in &manifest.records {
        let s = match &r.image_path {
            None => "no_image",
            Some(p) if !src.join(p).is_file() => "missing_file",
            Some(p) => {
                let img = load_png(&src.join(p), Some(manifest.spacing_mm))?;
                let (out, degenerate) = preprocess(&img, r.side, STANDARD_SPACING_MM)?;
                save_png(&out, &dst.join(key_file(&r.key())))?;
                if degenerate {
                    log::warn!("{}: constant intensity, normalised to zeros", r.key());
                    "degenerate"
                } else {
                    "ok"
                }
            }
        };
        status.insert(r.key(), s.to_string());
    }
    artifacts::write_status(&status, &cfg.path("preprocess.csv"))?;
    let count = |s: &str| status.values().filter(|v| *v == s).count();
    finish(
        cfg,
        "preprocess",
        vec![
            format!("processed={}", count("ok") + count("degenerate")),
            format!("degenerate={}", count("degenerate")),
            format!("no_image={}", count("no_image")),
            format!("missing_file={}", count("missing_file")),
        ],
    )
}

fn usable(status: &str) -> bool {
    status == "ok" || status == "degenerate"
}

/// Trains the stand-in detector on annotated images, gates every knee's
/// detection at `roi_threshold`, applies the exclusion rules and writes
/// the included manifest and the ROI crops. With `roi_source` set to
/// `annotations` or `rescue`, manual boxes replace or back up the detector.
pub fn cmd_roi(cfg: &RunConfig) -> Result<Vec<String>> {
    cfg.validate()?;
    let manifest = input_manifest(cfg)?;
    let status_path = cfg.path("preprocess.csv");
    require(&status_path, "preprocess")?;
    let status = read_status(&status_path)?;
    let pre = cfg.path("preprocessed");
    let load = |key: &RecordKey| load_png(&pre.join(key_file(key)), None);
    let available: Vec<&KneeRecord> = manifest
        .records
        .iter()
        .filter(|r| status.get(&r.key()).is_some_and(|s| usable(s)))
        .collect();

    let ann_path = cfg.path("annotations.csv");
    require(&ann_path, "synth")?;
    let annotations: BTreeMap<RecordKey, RoiBox> = roi::load_annotations(&ann_path)?
        .into_iter()
        .map(|(k, d)| (k, d.bbox))
        .collect();
    let use_detector = cfg.roi_source != RoiSource::Annotations;
    let train_keys: BTreeSet<RecordKey> = if use_detector {
        available
            .iter()
            .map(|r| r.key())
            .filter(|k| annotations.contains_key(k))
            .take(cfg.roi_train_images)
            .collect()
    } else {
        BTreeSet::new()
    };
    let detector = if use_detector {
        if train_keys.is_empty() {
            return Err(Error::validation(
                "no annotated preprocessed images to train the ROI detector",
            ));
        }
        let train_images: Vec<(crate::imaging::Image, RoiBox)> = train_keys
            .iter()
            .map(|k| Ok((load(k)?, annotations[k])))
            .collect::<Result<_>>()?;
        let samples: Vec<_> = train_images.iter().map(|(img, b)| (img, *b)).collect();
        let mut setup = ScorerTraining::new(cfg.roi_window, rng::derive(cfg.seed, "roi-detector"));
        setup.train.epochs = cfg.roi_epochs;
        let detector = roi::train_window_detector(&samples, &setup)?;
        let models = cfg.path("models");
        make_dir(&models)?;
        detector.save(&models.join("roi_detector.json"))?;
        Some(detector)
    } else {
        None
    };

    let crops = cfg.path("crops");
    make_dir(&crops)?;
    let mut rows = Vec::with_capacity(available.len());
    let mut gated = BTreeMap::new();
    let (mut held_out, mut held_out_hits, mut misses, mut rescued) = (0usize, 0usize, 0usize, 0usize);
    for r in &available {
        let key = r.key();
        let img = load(&key)?;
        let manual = annotations
            .get(&key)
            .map(|&bbox| RoiDetection { bbox, confidence: 1.0 });
        let detections = match &detector {
            Some(d) => d.detect(&img)?,
            None => manual.into_iter().collect(),
        };
        let mut chosen = select_roi(&detections, cfg.roi_threshold);
        if chosen.is_none() {
            misses += 1;
            if cfg.roi_source == RoiSource::Rescue && manual.is_some() {
                chosen = manual;
                rescued += 1;
            }
        }
        if let (Some(truth), Some(_), false) = (annotations.get(&key), &detector, train_keys.contains(&key)) {
            held_out += 1;
            let b = select_roi(&detections, cfg.roi_threshold)
                .or_else(|| detections.first().copied())
                .map(|d| d.bbox);
            if b.is_some_and(|b| iou(&b, truth) >= 0.5) {
                held_out_hits += 1;
            }
        }
        if let Some(d) = chosen {
            save_png(&crop_resize(&img, d.bbox)?, &crops.join(key_file(&key)))?;
            gated.insert(key.clone(), d);
        }
        rows.push((key, chosen.or_else(|| detections.first().copied()), chosen.is_some()));
    }
    artifacts::write_detections(&rows, &cfg.path("detections.csv"))?;

    let records = manifest
        .records
        .iter()
        .map(|r| {
            let mut r = r.clone();
            if !status.get(&r.key()).is_some_and(|s| usable(s)) {
                r.image_path = None;
            }
            r
        })
        .collect();
    let working = DatasetManifest::new(records, manifest.provenance.clone(), manifest.spacing_mm)?;
    let (kept, counts) = exclusion_filter(&working, &gated);
    save_manifest(&kept, &cfg.path("included.csv"))?;
    artifacts::write_exclusions(&counts, kept.len(), &cfg.path("exclusions.csv"))?;

    let miss_rate = if available.is_empty() {
        0.0
    } else {
        misses as f64 / available.len() as f64
    };
    let iou_rate = if held_out == 0 {
        f64::NAN
    } else {
        held_out_hits as f64 / held_out as f64
    };
    let mut lines = vec![
        format!("threshold={}", cfg.roi_threshold),
        format!("source={}", cfg.roi_source.code()),
        format!("detector_training_images={}", train_keys.len()),
        format!("images={}", available.len()),
        format!("gate_misses={misses}"),
        format!("gate_miss_rate={miss_rate:.6}"),
        format!("rescued_by_annotation={rescued}"),
        format!("held_out_annotated={held_out}"),
        format!("held_out_iou50_rate={iou_rate:.6}"),
    ];
    for reason in ExclusionReason::ALL {
        lines.push(format!("excluded[{}]={}", reason.describe(), counts.get(reason)));
    }
    lines.push(format!("included={}", kept.len()));
    write_text(&cfg.path("roi_report.txt"), &(lines.join("\n") + "\n"))?;
    finish(cfg, "roi", lines)
}

/// Subject-wise stratified folds over the included knees, written to
/// `folds.csv`.
fn folds_for(cfg: &RunConfig, included: &DatasetManifest) -> Result<FoldAssignment> {
    let folds = stratified_group_kfold(included, cfg.k, rng::derive(cfg.seed, "outer-cv"))?;
    artifacts::write_folds(&folds, &cfg.path("folds.csv"))?;
    Ok(folds)
}

fn fold_vector(folds: &FoldAssignment, manifest: &DatasetManifest) -> Result<Vec<usize>> {
    manifest.records.iter().map(|r| folds.fold_of(&r.subject_id)).collect()
}

fn training_subjects(manifest: &DatasetManifest, fold_ids: &[usize], f: usize) -> BTreeSet<String> {
    manifest
        .records
        .iter()
        .zip(fold_ids)
        .filter(|(_, &g)| g != f)
        .map(|(r, _)| r.subject_id.clone())
        .collect()
}

fn oof_from_maps(
    maps: Vec<(usize, BTreeSet<String>, BTreeMap<RecordKey, f64>)>,
    folds: &FoldAssignment,
    manifest: &DatasetManifest,
) -> Result<ScoredSet> {
    let models: Vec<FoldModel<'_>> = maps
        .into_iter()
        .map(|(fold, training_subjects, scores)| FoldModel {
            fold,
            training_subjects,
            score: Box::new(move |r: &KneeRecord| {
                scores
                    .get(&r.key())
                    .copied()
                    .ok_or_else(|| Error::validation(format!("fold {fold} model did not score {}", r.key())))
            }),
        })
        .collect();
    assemble_oof(&models, folds, manifest)
}

/// Trains one CNN per fold on the ROI crops and writes the out-of-fold
/// probabilities to `oof_cnn.csv`.
pub fn cmd_train(cfg: &RunConfig) -> Result<Vec<String>> {
    cfg.validate()?;
    let included = included_manifest(cfg)?;
    let folds = folds_for(cfg, &included)?;
    let fold_ids = fold_vector(&folds, &included)?;
    let crops = cfg.path("crops");
    let inputs: Vec<Vec<f64>> = included
        .records
        .iter()
        .map(|r| {
            let path = crops.join(key_file(&r.key()));
            require(&path, "roi")?;
            Ok(load_png(&path, None)?.to_unit_f64())
        })
        .collect::<Result<_>>()?;
    let labels: Vec<u8> = included
        .records
        .iter()
        .map(|r| u8::from(r.pfoa == Some(true)))
        .collect();
    let arch = ArchDescriptor::default().with_widths(&cfg.cnn_widths, cfg.cnn_fc);
    let models = cfg.path("models");
    make_dir(&models)?;

    let mut maps = Vec::with_capacity(cfg.k);
    let mut log_rows = Vec::new();
    for f in 0..cfg.k {
        let train_idx: Vec<usize> = (0..included.len()).filter(|&i| fold_ids[i] != f).collect();
        let val_idx: Vec<usize> = (0..included.len()).filter(|&i| fold_ids[i] == f).collect();
        let x: Vec<&[f64]> = train_idx.iter().map(|&i| inputs[i].as_slice()).collect();
        let y: Vec<u8> = train_idx.iter().map(|&i| labels[i]).collect();
        let tc = TrainConfig {
            batch_size: cfg.batch_size,
            lr0: cfg.lr0,
            lr_step: cfg.lr_step,
            epochs: cfg.epochs,
            dropout_p: cfg.dropout,
            seed: rng::derive(cfg.seed, &format!("cnn-fold-{f}")),
            ..TrainConfig::default()
        };
        log::info!("fold {f}: training CNN on {} knees", x.len());
        let outcome = neuralnet::train(&x, &y, &arch, &tc)?;
        outcome.model.save(&models.join(format!("cnn_fold{f}.json")))?;
        for (e, (loss, lr)) in outcome.epoch_loss.iter().zip(&outcome.epoch_lr).enumerate() {
            log_rows.push((f, e, *lr, *loss));
        }
        let vx: Vec<&[f64]> = val_idx.iter().map(|&i| inputs[i].as_slice()).collect();
        let probs = outcome.model.predict_many(&vx, 64)?;
        let scores = val_idx.iter().map(|&i| included.records[i].key()).zip(probs).collect();
        maps.push((f, training_subjects(&included, &fold_ids, f), scores));
    }
    let set = oof_from_maps(maps, &folds, &included)?;
    write_oof_csv(&set, &oof_path(cfg, "cnn"))?;
    artifacts::write_train_log(&log_rows, &cfg.path("train_log.csv"))?;
    finish(
        cfg,
        "train",
        vec![
            format!("knees={}", set.len()),
            format!("oof_auc={:.6}", crate::evalstats::auc_of(&set.scores, &set.labels)?),
        ],
    )
}

struct CrossFit {
    set: ScoredSet,
    importance: Vec<(String, f64)>,
    tuning: Vec<artifacts::TuningRow>,
}

/// Fits one tuned GBM per fold, scores the held-out knees and averages
/// |SHAP| over them, with each fold model's covers taken from its own
/// training rows.
fn cross_fit(
    cfg: &RunConfig,
    included: &DatasetManifest,
    folds: &FoldAssignment,
    slug: &str,
    fit: impl Fn(&DatasetManifest, u64) -> Result<ReferenceFit>,
    features: impl Fn(&KneeRecord) -> Result<Vec<f64>>,
) -> Result<CrossFit> {
    let fold_ids = fold_vector(folds, included)?;
    let models = cfg.path("models");
    make_dir(&models)?;
    let mut maps = Vec::with_capacity(cfg.k);
    let mut tuning = Vec::new();
    let mut abs_sum: Vec<f64> = Vec::new();
    let mut names: Vec<String> = Vec::new();
    let mut n_rows = 0usize;
    for f in 0..cfg.k {
        let train = included.filtered(|r| folds.fold_of(&r.subject_id).is_ok_and(|g| g != f));
        log::info!("{slug} fold {f}: tuning on {} knees", train.len());
        let fitted = fit(&train, rng::derive(cfg.seed, &format!("{slug}-fold-{f}")))?;
        let mut model: GbmModel = fitted.model;
        model.recompute_covers(&fitted.rows)?;
        model.save(&models.join(format!("gbm_{slug}_fold{f}.json")))?;
        for (t, trial) in fitted.tuning.trials.iter().enumerate() {
            tuning.push(artifacts::TuningRow {
                fold: f,
                trial: t,
                params: trial.params.clone(),
                inner_auc: trial.inner_auc,
                chosen: trial.params == fitted.tuning.best,
            });
        }
        if names.is_empty() {
            names = model.features.clone();
            abs_sum = vec![0.0; names.len()];
        }
        let mut scores = BTreeMap::new();
        for (r, _) in included.records.iter().zip(&fold_ids).filter(|(_, &g)| g == f) {
            let row = features(r)?;
            scores.insert(r.key(), model.predict_proba(&row)?);
            let shap = treeshap(&model, &row)?;
            for (s, v) in abs_sum.iter_mut().zip(&shap.values) {
                *s += v.abs();
            }
            n_rows += 1;
        }
        maps.push((f, training_subjects(included, &fold_ids, f), scores));
    }
    let set = oof_from_maps(maps, folds, included)?;
    let mut importance: Vec<(usize, f64)> = abs_sum.iter().map(|s| s / n_rows.max(1) as f64).enumerate().collect();
    importance.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    Ok(CrossFit {
        set,
        importance: importance.into_iter().map(|(i, v)| (names[i].clone(), v)).collect(),
        tuning,
    })
}

fn write_cross_fit(cfg: &RunConfig, slug: &str, cf: &CrossFit) -> Result<()> {
    write_oof_csv(&cf.set, &oof_path(cfg, slug))?;
    artifacts::write_importance(&cf.importance, &cfg.path(&format!("shap_{slug}.csv")))?;
    artifacts::write_tuning(&cf.tuning, &cfg.path(&format!("tuning_{slug}.csv")))
}

/// Cross-fits the clinical reference models (one variant, or all three).
pub fn cmd_reference(cfg: &RunConfig) -> Result<Vec<String>> {
    cfg.validate()?;
    let included = included_manifest(cfg)?;
    let folds = folds_for(cfg, &included)?;
    let variants = cfg.variant.map_or(Variant::ALL.to_vec(), |v| vec![v]);
    let mut lines = Vec::new();
    for v in variants {
        let slug = format!("model{}", v.index());
        let cf = cross_fit(
            cfg,
            &included,
            &folds,
            &slug,
            |train, seed| fit_reference_model(train, v, cfg.budget, cfg.inner_folds, seed),
            |r| Ok(clinical_features(r, v)),
        )?;
        write_cross_fit(cfg, &slug, &cf)?;
        lines.push(format!(
            "{slug}_oof_auc={:.6}",
            crate::evalstats::auc_of(&cf.set.scores, &cf.set.labels)?
        ));
        if let Some((name, _)) = cf.importance.first() {
            lines.push(format!("{slug}_top_feature={name}"));
        }
    }
    finish(cfg, "reference", lines)
}

/// Builds a scored set over `manifest` from an OOF score file.
fn load_scored(cfg: &RunConfig, slug: &str, manifest: &DatasetManifest, command: &str) -> Result<ScoredSet> {
    let path = oof_path(cfg, slug);
    require(&path, command)?;
    let scores = read_scores(&path)?;
    let mut set = ScoredSet::default();
    for r in &manifest.records {
        let e = scores.get(&r.key()).ok_or_else(|| {
            Error::validation(format!(
                "{} has no score for {}; rerun `pfoa {command}` after `pfoa roi`",
                path.display(),
                r.key()
            ))
        })?;
        set.push(r, e.score, e.fold)?;
    }
    if scores.len() != set.len() {
        return Err(Error::validation(format!(
            "{} scores knees that are not in included.csv; rerun `pfoa {command}`",
            path.display()
        )));
    }
    Ok(set)
}

fn estimate(set: &ScoredSet, n_boot: usize, seed: u64) -> Result<Estimate> {
    let value = crate::evalstats::auc_of(&set.scores, &set.labels)?;
    let (lo, hi) = bootstrap_ci(&set.scores, &set.labels, Metric::Auc, n_boot, seed)?;
    Ok(Estimate { value, lo, hi })
}

/// Stacks the CNN's out-of-fold probability with the clinical features and
/// cross-fits a GBM on them, reporting the fused AUC against the CNN's
/// bootstrap interval.
pub fn cmd_fuse(cfg: &RunConfig) -> Result<Vec<String>> {
    cfg.validate()?;
    let included = included_manifest(cfg)?;
    let folds = folds_for(cfg, &included)?;
    let cnn = load_scored(cfg, "cnn", &included, "train")?;
    let cnn_by_key: BTreeMap<RecordKey, f64> = cnn.keys.iter().cloned().zip(cnn.scores.iter().copied()).collect();
    let cf = cross_fit(
        cfg,
        &included,
        &folds,
        "fusion",
        |train, seed| fit_fusion_model(train, &cnn, &folds, cfg.budget, cfg.inner_folds, seed),
        |r| Ok(fusion_features(r, cnn_by_key[&r.key()])),
    )?;
    write_cross_fit(cfg, "fusion", &cf)?;

    let cnn_est = estimate(&cnn, cfg.bootstrap, rng::derive(cfg.seed, "bootstrap/cnn"))?;
    let fused_est = estimate(&cf.set, cfg.bootstrap, rng::derive(cfg.seed, "bootstrap/fusion"))?;
    let d = delong_test(&cf.set.scores, &cnn.scores, &cnn.labels)?;
    let within = fused_est.value >= cnn_est.lo && fused_est.value <= cnn_est.hi;
    let lines = vec![
        format!("features={}", FUSION_FEATURES.join("+")),
        format!("cnn_auc={:.6}", cnn_est.value),
        format!("cnn_auc_lo={:.6}", cnn_est.lo),
        format!("cnn_auc_hi={:.6}", cnn_est.hi),
        format!("fusion_auc={:.6}", fused_est.value),
        format!("fusion_auc_lo={:.6}", fused_est.lo),
        format!("fusion_auc_hi={:.6}", fused_est.hi),
        format!("delong_z={:.6}", d.z),
        format!("delong_p={:.6e}", d.p_value),
        format!("fusion_within_cnn_ci={within}"),
    ];
    artifacts::write_key_values(&lines, &cfg.path("fusion_report.csv"))?;
    finish(cfg, "fuse", lines)
}

fn format_estimate(e: Option<Estimate>) -> String {
    e.map_or("NA".into(), |e| format!("{:.3} [{:.3}-{:.3}]", e.value, e.lo, e.hi))
}

/// Metrics, curves, subgroup table, DeLong comparisons and SHAP rankings
/// for every model whose out-of-fold scores exist.
pub fn cmd_evaluate(cfg: &RunConfig) -> Result<Vec<String>> {
    cfg.validate()?;
    let included = included_manifest(cfg)?;
    let present: Vec<(&str, &str)> = MODELS
        .iter()
        .copied()
        .filter(|(slug, _)| oof_path(cfg, slug).exists())
        .collect();
    if present.is_empty() {
        require(&oof_path(cfg, "cnn"), "train")?;
    }
    let producer = |slug: &str| match slug {
        "cnn" => "train",
        "fusion" => "fuse",
        _ => "reference",
    };
    let sets: Vec<ScoredSet> = present
        .iter()
        .map(|(slug, _)| load_scored(cfg, slug, &included, producer(slug)))
        .collect::<Result<_>>()?;

    artifacts::write_wide_scores(&present, &sets, &cfg.path("oof_scores.csv"))?;

    let mut metric_rows = Vec::new();
    let mut subgroup_rows = Vec::new();
    let mut roc_curves = Vec::new();
    let mut pr_curves = Vec::new();
    for ((slug, name), set) in present.iter().zip(&sets) {
        let rows = subgroup_report(set, cfg.bootstrap, rng::derive(cfg.seed, &format!("bootstrap/{slug}")))?;
        metric_rows.extend(rows.iter().map(|r| MetricsRow::from_subgroup(name, r)));
        subgroup_rows.push(rows);

        let roc = roc_auc(&set.scores, &set.labels)?;
        let pr = pr_curve(&set.scores, &set.labels)?;
        let ap = crate::evalstats::ap_of(&set.scores, &set.labels)?;
        write_curve_csv(&roc.points, ["fpr", "tpr"], &cfg.path(&format!("roc_{slug}.csv")))?;
        write_curve_csv(&pr, ["recall", "precision"], &cfg.path(&format!("pr_{slug}.csv")))?;
        let roc_label = format!("{name} (AUC {:.3})", roc.auc);
        let pr_label = format!("{name} (AP {ap:.3})");
        write_text(
            &cfg.path(&format!("roc_{slug}.svg")),
            &curve_svg(
                &format!("ROC: {name}"),
                CurveKind::Roc,
                &[(roc_label.clone(), roc.points.clone())],
            ),
        )?;
        write_text(
            &cfg.path(&format!("pr_{slug}.svg")),
            &curve_svg(
                &format!("Precision-recall: {name}"),
                CurveKind::Pr,
                &[(pr_label.clone(), pr.clone())],
            ),
        )?;
        roc_curves.push((roc_label, roc.points));
        pr_curves.push((pr_label, pr));
    }
    if present.len() > 1 {
        write_text(&cfg.path("roc_all.svg"), &curve_svg("ROC", CurveKind::Roc, &roc_curves))?;
        write_text(
            &cfg.path("pr_all.svg"),
            &curve_svg("Precision-recall", CurveKind::Pr, &pr_curves),
        )?;
    }
    write_metrics_csv(&metric_rows, &cfg.path("metrics.csv"))?;

    let mut table = Vec::new();
    if let Some(first) = subgroup_rows.first() {
        for (i, r) in first.iter().enumerate() {
            let mut cells = vec![r.family.clone(), r.group.clone(), r.n.to_string(), r.n_pos.to_string()];
            for rows in &subgroup_rows {
                cells.push(format_estimate(rows[i].auc));
                cells.push(format_estimate(rows[i].ap));
            }
            table.push(cells);
        }
    }
    artifacts::write_subgroups(&present, &table, &cfg.path("subgroups.csv"))?;

    let mut comparisons = Vec::new();
    let mut lines = Vec::new();
    if let Some(base) = present
        .iter()
        .position(|(slug, _)| *slug == "cnn")
        .or((!present.is_empty()).then_some(0))
    {
        for (j, (_, name)) in present.iter().enumerate() {
            if j == base {
                continue;
            }
            let d = delong_test(&sets[base].scores, &sets[j].scores, &sets[base].labels)?;
            lines.push(format!(
                "{} vs {name}: AUC {:.3} vs {:.3}, DeLong p={:.3e}",
                present[base].1, d.auc_a, d.auc_b, d.p_value
            ));
            comparisons.push((present[base].1.to_string(), name.to_string(), d));
        }
    }
    artifacts::write_comparisons(&comparisons, &cfg.path("comparisons.csv"))?;

    let mut shap = Vec::new();
    for (slug, name) in MODELS.iter().skip(1) {
        let path = cfg.path(&format!("shap_{slug}.csv"));
        if path.exists() {
            for (feature, value) in artifacts::read_importance(&path)? {
                shap.push((name.to_string(), feature, value));
            }
        }
    }
    artifacts::write_shap(&shap, &cfg.path("shap.csv"))?;

    for (row, (_, name)) in subgroup_rows.iter().zip(&present) {
        lines.insert(
            0,
            format!(
                "{name}: AUC {}, AP {}",
                format_estimate(row[0].auc),
                format_estimate(row[0].ap)
            ),
        );
    }
    lines.sort();
    finish(cfg, "evaluate", lines)
}

/// Runs every command in order.
pub fn run_all(cfg: &RunConfig) -> Result<Vec<String>> {
    let mut lines = Vec::new();
    for step in [
        cmd_synth,
        cmd_preprocess,
        cmd_roi,
        cmd_train,
        cmd_reference,
        cmd_fuse,
        cmd_evaluate,
    ] {
        lines.extend(step(cfg)?);
    }
    Ok(lines)
}

/// Loads a saved per-fold CNN.
pub fn load_cnn(cfg: &RunConfig, fold: usize) -> Result<neuralnet::CnnModel> {
    let path = cfg.path("models").join(format!("cnn_fold{fold}.json"));
    require(&path, "train")?;
    neuralnet::CnnModel::load(&path)
}

/// Loads the trained ROI detector.
pub fn load_detector(cfg: &RunConfig) -> Result<WindowDetector> {
    let path = cfg.path("models").join("roi_detector.json");
    require(&path, "roi")?;
    WindowDetector::load(&path)
}

/// Detections written by `roi`, keyed by knee.
pub fn load_detections(cfg: &RunConfig) -> Result<BTreeMap<RecordKey, (Option<RoiDetection>, bool)>> {
    let path = cfg.path("detections.csv");
    require(&path, "roi")?;
    artifacts::read_detections(&path)
}
