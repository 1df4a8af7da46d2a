use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use super::metrics::{ap_of, auc_of, bootstrap_ci, Metric};
use super::{FoldAssignment, ScoredSet};
use crate::datamodel::{DatasetManifest, KneeRecord};
use crate::imaging::percentile_of_sorted;
use crate::rng;
use crate::{Error, Result};

/// A model trained on every fold except `fold`.
pub struct FoldModel<'a> {
    pub fold: usize,
    pub training_subjects: BTreeSet<String>,
    pub score: Box<dyn Fn(&KneeRecord) -> Result<f64> + 'a>,
}

/// Scores each knee once, with the model that held out the knee's fold.
pub fn assemble_oof(models: &[FoldModel<'_>], folds: &FoldAssignment, manifest: &DatasetManifest) -> Result<ScoredSet> {
    let mut set = ScoredSet::default();
    for r in &manifest.records {
        let f = folds.fold_of(&r.subject_id)?;
        let model = models
            .iter()
            .find(|m| m.fold == f)
            .ok_or_else(|| Error::validation(format!("no model for fold {f}")))?;
        if model.training_subjects.contains(&r.subject_id) {
            return Err(Error::Leakage(format!(
                "the fold {f} model was trained on subject {}",
                r.subject_id
            )));
        }
        set.push(r, (model.score)(r)?, f)?;
    }
    Ok(set)
}

pub const KL_GROUPS: [(&str, &[u8]); 3] = [("No TF OA", &[0, 1]), ("Early TF OA", &[2]), ("Severe TF OA", &[3, 4])];
pub const PAIN_GROUPS: [&str; 3] = ["Low pain", "Moderate pain", "High pain"];

/// 25th and 75th percentiles of WOMAC pain over every knee that has one.
pub fn pain_cutpoints(set: &ScoredSet) -> Option<(f64, f64)> {
    let mut pain: Vec<f64> = set.pain.iter().flatten().copied().collect();
    if pain.is_empty() {
        return None;
    }
    pain.sort_by(f64::total_cmp);
    Some((percentile_of_sorted(&pain, 25.0), percentile_of_sorted(&pain, 75.0)))
}

/// Point estimate with its 95% interval.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Estimate {
    pub value: f64,
    pub lo: f64,
    pub hi: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubgroupRow {
    pub family: String,
    pub group: String,
    pub n: usize,
    pub n_pos: usize,
    /// `None` when the group lacks one of the classes.
    pub auc: Option<Estimate>,
    pub ap: Option<Estimate>,
}

fn estimate(set: &ScoredSet, metric: Metric, n_boot: usize, seed: u64) -> Result<Estimate> {
    let value = match metric {
        Metric::Auc => auc_of(&set.scores, &set.labels)?,
        Metric::Ap => ap_of(&set.scores, &set.labels)?,
    };
    let (lo, hi) = bootstrap_ci(&set.scores, &set.labels, metric, n_boot, seed)?;
    Ok(Estimate { value, lo, hi })
}

fn row(family: &str, group: &str, set: &ScoredSet, n_boot: usize, seed: u64) -> Result<SubgroupRow> {
    let n_pos = set.n_pos();
    let computable = n_pos > 0 && n_pos < set.len();
    let seed = rng::derive(seed, group);
    let (auc, ap) = if computable {
        (
            Some(estimate(set, Metric::Auc, n_boot, seed)?),
            Some(estimate(set, Metric::Ap, n_boot, rng::derive(seed, "ap"))?),
        )
    } else {
        (None, None)
    };
    Ok(SubgroupRow {
        family: family.into(),
        group: group.into(),
        n: set.len(),
        n_pos,
        auc,
        ap,
    })
}

/// Overall, KL-stratified and pain-stratified AUC/AP with bootstrap CIs.
/// Knees lacking a KL grade or pain score are reported in an extra
/// "unknown" group so each family still covers the whole set.
pub fn subgroup_report(set: &ScoredSet, n_boot: usize, seed: u64) -> Result<Vec<SubgroupRow>> {
    set.validate()?;
    let mut rows = vec![row("All", "All", set, n_boot, seed)?];

    for (name, grades) in KL_GROUPS {
        let sub = set.select(|i| set.kl[i].is_some_and(|k| grades.contains(&k)));
        rows.push(row("KL", name, &sub, n_boot, seed)?);
    }
    if set.kl.iter().any(Option::is_none) {
        rows.push(row(
            "KL",
            "KL unknown",
            &set.select(|i| set.kl[i].is_none()),
            n_boot,
            seed,
        )?);
    }

    if let Some((p25, p75)) = pain_cutpoints(set) {
        let band = |v: f64| -> usize {
            if v <= p25 {
                0
            } else if v <= p75 {
                1
            } else {
                2
            }
        };
        for (b, name) in PAIN_GROUPS.iter().enumerate() {
            let sub = set.select(|i| set.pain[i].is_some_and(|v| band(v) == b));
            rows.push(row("WOMAC pain", name, &sub, n_boot, seed)?);
        }
    }
    if set.pain.iter().any(Option::is_none) {
        rows.push(row(
            "WOMAC pain",
            "Pain unknown",
            &set.select(|i| set.pain[i].is_none()),
            n_boot,
            seed,
        )?);
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub model: String,
    pub group: String,
    pub auc: Option<Estimate>,
    pub ap: Option<Estimate>,
    pub n: usize,
    pub n_pos: usize,
}

impl MetricsRow {
    pub fn from_subgroup(model: &str, r: &SubgroupRow) -> Self {
        MetricsRow {
            model: model.into(),
            group: r.group.clone(),
            auc: r.auc,
            ap: r.ap,
            n: r.n,
            n_pos: r.n_pos,
        }
    }
}

fn fmt_estimate(e: Option<Estimate>) -> [String; 3] {
    match e {
        Some(e) => [e.value, e.lo, e.hi].map(|v| format!("{v:.6}")),
        None => ["NA", "NA", "NA"].map(String::from),
    }
}

pub fn write_metrics_csv(rows: &[MetricsRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "model", "group", "AUC", "AUC_lo", "AUC_hi", "AP", "AP_lo", "AP_hi", "n", "n_pos",
    ])?;
    for r in rows {
        let mut rec = vec![r.model.clone(), r.group.clone()];
        rec.extend(fmt_estimate(r.auc));
        rec.extend(fmt_estimate(r.ap));
        rec.push(r.n.to_string());
        rec.push(r.n_pos.to_string());
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_curve_csv(points: &[(f64, f64)], columns: [&str; 2], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(columns)?;
    for (x, y) in points {
        w.write_record([format!("{x:.6}"), format!("{y:.6}")])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Out-of-fold scores, sorted by record key.
pub fn write_oof_csv(set: &ScoredSet, path: &Path) -> Result<()> {
    let set = set.sorted();
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["subject_id", "side", "visit", "fold", "label", "score"])?;
    for i in 0..set.len() {
        let k = &set.keys[i];
        w.write_record([
            k.subject_id.clone(),
            k.side.code().to_string(),
            k.visit.code().to_string(),
            set.folds[i].to_string(),
            set.labels[i].to_string(),
            format!("{:.9}", set.scores[i]),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CurveKind {
    Roc,
    Pr,
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

/// Line plot of one or more curves on the unit square.
pub fn curve_svg(title: &str, kind: CurveKind, curves: &[(String, Vec<(f64, f64)>)]) -> String {
    const SIZE: f64 = 360.0;
    const PAD: f64 = 50.0;
    let px = |x: f64| PAD + x * SIZE;
    let py = |y: f64| PAD + (1.0 - y) * SIZE;
    let (xl, yl) = match kind {
        CurveKind::Roc => ("False positive rate", "True positive rate"),
        CurveKind::Pr => ("Recall", "Precision"),
    };
    let total = SIZE + 2.0 * PAD;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{total}" height="{h}" font-family="sans-serif" font-size="12">"#,
        h = total + 20.0 * curves.len() as f64
    );
    let _ = writeln!(
        s,
        r#"<text x="{}" y="25" text-anchor="middle" font-size="14">{}</text>"#,
        total / 2.0,
        escape(title)
    );
    let _ = writeln!(
        s,
        r#"<rect x="{PAD}" y="{PAD}" width="{SIZE}" height="{SIZE}" fill="none" stroke="black"/>"#
    );
    for t in [0.0, 0.25, 0.5, 0.75, 1.0] {
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="middle">{t}</text>"#,
            px(t),
            py(0.0) + 16.0
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="end">{t}</text>"#,
            px(0.0) - 6.0,
            py(t) + 4.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">{xl}</text>"#,
        total / 2.0,
        py(0.0) + 34.0
    );
    let _ = writeln!(
        s,
        r#"<text x="14" y="{}" text-anchor="middle" transform="rotate(-90 14 {})">{yl}</text>"#,
        total / 2.0,
        total / 2.0
    );
    if kind == CurveKind::Roc {
        let _ = writeln!(
            s,
            r##"<line x1="{}" y1="{}" x2="{}" y2="{}" stroke="#999" stroke-dasharray="4 4"/>"##,
            px(0.0),
            py(0.0),
            px(1.0),
            py(1.0)
        );
    }
    for (i, (label, pts)) in curves.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let mut path = String::new();
        let start = match kind {
            CurveKind::Pr => pts.first().map(|&(_, p)| (0.0, p)),
            CurveKind::Roc => None,
        };
        for (x, y) in start.iter().chain(pts) {
            let _ = write!(path, "{:.2},{:.2} ", px(*x), py(*y));
        }
        let _ = writeln!(
            s,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#,
            path.trim_end()
        );
        let ly = total + 20.0 * i as f64;
        let _ = writeln!(
            s,
            r#"<line x1="{PAD}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/><text x="{}" y="{}">{}</text>"#,
            PAD + 20.0,
            PAD + 26.0,
            ly + 4.0,
            escape(label)
        );
    }
    s.push_str("</svg>\n");
    s
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
