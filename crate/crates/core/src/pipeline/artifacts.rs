//! Readers and writers for the small CSV and text files exchanged between
//! commands.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::datamodel::{ExclusionCounts, ExclusionReason, RecordKey};
use crate::evalstats::{DelongResult, FoldAssignment, ScoredSet};
use crate::gbm::GbmParams;
use crate::roi::{RoiBox, RoiDetection};
use crate::{Error, Result};

const KEY_COLUMNS: [&str; 3] = ["subject_id", "side", "visit"];

fn key_cells(k: &RecordKey) -> [String; 3] {
    [
        k.subject_id.clone(),
        k.side.code().to_string(),
        k.visit.code().to_string(),
    ]
}

fn flush<W: std::io::Write>(mut w: csv::Writer<W>, path: &Path) -> Result<()> {
    w.flush().map_err(|e| Error::io(path, e))
}

/// Opens `path` and checks its header against `expected`.
struct Table {
    path: std::path::PathBuf,
    reader: csv::Reader<fs::File>,
}

impl Table {
    fn open(path: &Path, expected: &[&str]) -> Result<Self> {
        let mut reader = csv::Reader::from_path(path)?;
        let header: Vec<String> = reader.headers()?.iter().map(String::from).collect();
        if header != expected {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                row: 1,
                column: "header".into(),
                message: format!("expected {}", expected.join(",")),
            });
        }
        Ok(Table {
            path: path.to_path_buf(),
            reader,
        })
    }

    /// Visits each data row with its 1-based file row number.
    fn rows(mut self, mut visit: impl FnMut(Row<'_>) -> Result<()>) -> Result<()> {
        let header: Vec<String> = self.reader.headers()?.iter().map(String::from).collect();
        for (i, rec) in self.reader.records().enumerate() {
            let rec = rec?;
            visit(Row {
                path: &self.path,
                header: &header,
                number: i + 2,
                rec: &rec,
            })?;
        }
        Ok(())
    }
}

struct Row<'a> {
    path: &'a Path,
    header: &'a [String],
    number: usize,
    rec: &'a csv::StringRecord,
}

impl Row<'_> {
    fn err(&self, col: usize, message: impl Into<String>) -> Error {
        Error::Parse {
            path: self.path.to_path_buf(),
            row: self.number,
            column: self.header.get(col).cloned().unwrap_or_default(),
            message: message.into(),
        }
    }

    fn str(&self, col: usize) -> &str {
        self.rec.get(col).unwrap_or("")
    }

    fn parse<T: FromStr>(&self, col: usize) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        self.str(col).parse().map_err(|e: T::Err| self.err(col, e.to_string()))
    }

    fn key(&self) -> Result<RecordKey> {
        Ok(RecordKey {
            subject_id: self.str(0).to_string(),
            side: self.parse(1)?,
            visit: self.parse(2)?,
        })
    }
}

pub(super) fn write_status(status: &BTreeMap<RecordKey, String>, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(KEY_COLUMNS.iter().chain(&["status"]))?;
    for (k, s) in status {
        w.write_record(key_cells(k).iter().chain([s]))?;
    }
    flush(w, path)
}

/// Per-knee preprocessing outcome from `preprocess.csv`.
pub fn read_status(path: &Path) -> Result<BTreeMap<RecordKey, String>> {
    let mut out = BTreeMap::new();
    Table::open(path, &["subject_id", "side", "visit", "status"])?.rows(|row| {
        out.insert(row.key()?, row.str(3).to_string());
        Ok(())
    })?;
    Ok(out)
}

const DETECTION_HEADER: [&str; 9] = [
    "subject_id",
    "side",
    "visit",
    "x",
    "y",
    "w",
    "h",
    "confidence",
    "passed",
];

pub(super) fn write_detections(rows: &[(RecordKey, Option<RoiDetection>, bool)], path: &Path) -> Result<()> {
    let mut sorted: Vec<_> = rows.iter().collect();
    sorted.sort_by(|a, b| a.0.cmp(&b.0));
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(DETECTION_HEADER)?;
    for (k, d, passed) in sorted {
        let mut rec = key_cells(k).to_vec();
        match d {
            Some(d) => rec.extend([
                d.bbox.x.to_string(),
                d.bbox.y.to_string(),
                d.bbox.w.to_string(),
                d.bbox.h.to_string(),
                format!("{:.6}", d.confidence),
            ]),
            None => rec.extend(std::iter::repeat_n(String::new(), 5)),
        }
        rec.push(u8::from(*passed).to_string());
        w.write_record(&rec)?;
    }
    flush(w, path)
}

/// Best detection per knee (if any) and whether it passed the gate.
pub(super) fn read_detections(path: &Path) -> Result<BTreeMap<RecordKey, (Option<RoiDetection>, bool)>> {
    let mut out = BTreeMap::new();
    Table::open(path, &DETECTION_HEADER)?.rows(|row| {
        let det = if row.str(3).is_empty() {
            None
        } else {
            Some(RoiDetection {
                bbox: RoiBox::new(row.parse(3)?, row.parse(4)?, row.parse(5)?, row.parse(6)?),
                confidence: row.parse(7)?,
            })
        };
        let passed = match row.str(8) {
            "1" => true,
            "0" => false,
            other => return Err(row.err(8, format!("expected 0 or 1, got {other:?}"))),
        };
        out.insert(row.key()?, (det, passed));
        Ok(())
    })?;
    Ok(out)
}

pub(super) fn write_exclusions(counts: &ExclusionCounts, included: usize, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["reason", "knees"])?;
    for reason in ExclusionReason::ALL {
        w.write_record([reason.describe().to_string(), counts.get(reason).to_string()])?;
    }
    w.write_record(["included".to_string(), included.to_string()])?;
    flush(w, path)
}

pub(super) fn write_folds(folds: &FoldAssignment, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["subject_id", "fold"])?;
    for (s, f) in &folds.folds {
        w.write_record([s.clone(), f.to_string()])?;
    }
    flush(w, path)
}

/// Subject-to-fold map from `folds.csv`.
pub fn read_folds(path: &Path) -> Result<BTreeMap<String, usize>> {
    let mut out = BTreeMap::new();
    Table::open(path, &["subject_id", "fold"])?.rows(|row| {
        out.insert(row.str(0).to_string(), row.parse(1)?);
        Ok(())
    })?;
    Ok(out)
}

pub(super) fn write_train_log(rows: &[(usize, usize, f64, f64)], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["fold", "epoch", "lr", "loss"])?;
    for (f, e, lr, loss) in rows {
        w.write_record([f.to_string(), e.to_string(), format!("{lr:e}"), format!("{loss:.6}")])?;
    }
    flush(w, path)
}

pub(super) struct TuningRow {
    pub fold: usize,
    pub trial: usize,
    pub params: GbmParams,
    pub inner_auc: f64,
    pub chosen: bool,
}

pub(super) fn write_tuning(rows: &[TuningRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "fold",
        "trial",
        "learning_rate",
        "num_rounds",
        "max_leaves",
        "min_samples_leaf",
        "feature_fraction",
        "bagging_fraction",
        "l2_leaf_regularization",
        "inner_auc",
        "chosen",
    ])?;
    for r in rows {
        let p = &r.params;
        w.write_record([
            r.fold.to_string(),
            r.trial.to_string(),
            p.learning_rate.to_string(),
            p.num_rounds.to_string(),
            p.max_leaves.to_string(),
            p.min_samples_leaf.to_string(),
            p.feature_fraction.to_string(),
            p.bagging_fraction.to_string(),
            p.l2_leaf_regularization.to_string(),
            format!("{:.6}", r.inner_auc),
            u8::from(r.chosen).to_string(),
        ])?;
    }
    flush(w, path)
}

pub(super) fn write_importance(ranked: &[(String, f64)], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["rank", "feature", "mean_abs_shap"])?;
    for (i, (f, v)) in ranked.iter().enumerate() {
        w.write_record([(i + 1).to_string(), f.clone(), format!("{v:.9}")])?;
    }
    flush(w, path)
}

pub(super) fn read_importance(path: &Path) -> Result<Vec<(String, f64)>> {
    let mut out = Vec::new();
    Table::open(path, &["rank", "feature", "mean_abs_shap"])?.rows(|row| {
        out.push((row.str(1).to_string(), row.parse(2)?));
        Ok(())
    })?;
    Ok(out)
}

pub(super) fn write_shap(rows: &[(String, String, f64)], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["model", "rank", "feature", "mean_abs_shap"])?;
    let mut rank = 0;
    let mut last_model = "";
    for (m, f, v) in rows {
        if m != last_model {
            rank = 0;
            last_model = m;
        }
        rank += 1;
        w.write_record([m.clone(), rank.to_string(), f.clone(), format!("{v:.9}")])?;
    }
    flush(w, path)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoreEntry {
    pub fold: usize,
    pub label: u8,
    pub score: f64,
}

/// Out-of-fold scores written by `train`, `reference` or `fuse`.
pub fn read_scores(path: &Path) -> Result<BTreeMap<RecordKey, ScoreEntry>> {
    let mut out = BTreeMap::new();
    Table::open(path, &["subject_id", "side", "visit", "fold", "label", "score"])?.rows(|row| {
        let e = ScoreEntry {
            fold: row.parse(3)?,
            label: row.parse(4)?,
            score: row.parse(5)?,
        };
        if out.insert(row.key()?, e).is_some() {
            return Err(row.err(0, "duplicate knee"));
        }
        Ok(())
    })?;
    Ok(out)
}

pub(super) fn write_key_values(lines: &[String], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["quantity", "value"])?;
    for l in lines {
        let (k, v) = l.split_once('=').unwrap_or((l, ""));
        w.write_record([k, v])?;
    }
    flush(w, path)
}

/// All models' scores side by side, one row per knee in key order.
pub(super) fn write_wide_scores(models: &[(&str, &str)], sets: &[ScoredSet], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header: Vec<String> = ["subject_id", "side", "visit", "fold", "label", "kl", "womac_pain"]
        .map(String::from)
        .to_vec();
    header.extend(models.iter().map(|(slug, _)| slug.to_string()));
    w.write_record(&header)?;
    let sorted: Vec<ScoredSet> = sets.iter().map(ScoredSet::sorted).collect();
    if let Some(first) = sorted.first() {
        for i in 0..first.len() {
            let mut rec = key_cells(&first.keys[i]).to_vec();
            rec.push(first.folds[i].to_string());
            rec.push(first.labels[i].to_string());
            rec.push(first.kl[i].map_or(String::new(), |k| k.to_string()));
            rec.push(first.pain[i].map_or(String::new(), |p| p.to_string()));
            rec.extend(sorted.iter().map(|s| format!("{:.9}", s.scores[i])));
            w.write_record(&rec)?;
        }
    }
    flush(w, path)
}

pub(super) fn write_subgroups(models: &[(&str, &str)], table: &[Vec<String>], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header: Vec<String> = ["family", "group", "n", "n_pos"].map(String::from).to_vec();
    for (_, name) in models {
        header.push(format!("{name} AUC"));
        header.push(format!("{name} AP"));
    }
    w.write_record(&header)?;
    for row in table {
        w.write_record(row)?;
    }
    flush(w, path)
}

pub(super) fn write_comparisons(rows: &[(String, String, DelongResult)], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "model_a",
        "model_b",
        "auc_a",
        "auc_b",
        "auc_diff",
        "z",
        "p_value",
        "degenerate",
    ])?;
    for (a, b, d) in rows {
        w.write_record([
            a.clone(),
            b.clone(),
            format!("{:.6}", d.auc_a),
            format!("{:.6}", d.auc_b),
            format!("{:.6}", d.auc_a - d.auc_b),
            format!("{:.6}", d.z),
            format!("{:.6e}", d.p_value),
            u8::from(d.degenerate).to_string(),
        ])?;
    }
    flush(w, path)
}

/// Replaces the `[command]` section of `run_meta.txt`, keeping the others in
/// pipeline order.
pub fn update_run_meta(path: &Path, command: &str, summary: &[String], echo: &[String]) -> Result<()> {
    let mut sections: BTreeMap<usize, String> = BTreeMap::new();
    let rank = |name: &str| {
        super::COMMANDS
            .iter()
            .position(|c| *c == name)
            .unwrap_or(super::COMMANDS.len())
    };
    if let Ok(text) = fs::read_to_string(path) {
        let mut current: Option<(String, String)> = None;
        for line in text.lines() {
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                if let Some((n, body)) = current.take() {
                    sections.insert(rank(&n), body);
                }
                current = Some((name.to_string(), format!("{line}\n")));
            } else if let Some((_, body)) = current.as_mut() {
                body.push_str(line);
                body.push('\n');
            }
        }
        if let Some((n, body)) = current {
            sections.insert(rank(&n), body);
        }
    }
    let mut body = format!("[{command}]\n");
    body.push_str(&format!("version={}\n", env!("CARGO_PKG_VERSION")));
    for l in summary {
        body.push_str(l);
        body.push('\n');
    }
    for l in echo {
        body.push_str("config.");
        body.push_str(l);
        body.push('\n');
    }
    body.push('\n');
    sections.insert(rank(command), body);
    let text: String = sections.into_values().collect();
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::{Side, Visit};

    fn key(s: &str, side: Side) -> RecordKey {
        RecordKey {
            subject_id: s.into(),
            side,
            visit: Visit::Baseline,
        }
    }

    #[test]
    fn detections_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        let d = RoiDetection {
            bbox: RoiBox::new(-3, 7, 64, 64),
            confidence: 0.93125,
        };
        let rows = vec![
            (key("S2", Side::Right), None, false),
            (key("S1", Side::Left), Some(d), true),
        ];
        write_detections(&rows, &path).unwrap();
        let back = read_detections(&path).unwrap();
        assert_eq!(back[&key("S1", Side::Left)], (Some(d), true));
        assert_eq!(back[&key("S2", Side::Right)], (None, false));
    }

    #[test]
    fn score_file_errors_name_row_and_column() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.csv");
        fs::write(
            &path,
            "subject_id,side,visit,fold,label,score\nS1,L,baseline,0,1,0.5\nS2,X,baseline,0,1,0.5\n",
        )
        .unwrap();
        match read_scores(&path) {
            Err(Error::Parse { row, column, .. }) => assert_eq!((row, column.as_str()), (3, "side")),
            other => panic!("{other:?}"),
        }
        fs::write(&path, "subject_id,side,score\n").unwrap();
        assert!(matches!(read_scores(&path), Err(Error::Parse { row: 1, .. })));
    }

    #[test]
    fn run_meta_sections_are_replaced_in_order() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run_meta.txt");
        update_run_meta(&path, "train", &["a=1".into()], &["seed=0".into()]).unwrap();
        update_run_meta(&path, "synth", &["b=2".into()], &[]).unwrap();
        update_run_meta(&path, "train", &["a=3".into()], &["seed=0".into()]).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        let synth = text.find("[synth]").unwrap();
        let train = text.find("[train]").unwrap();
        assert!(synth < train);
        assert!(text.contains("a=3") && !text.contains("a=1"));
        assert_eq!(text.matches("[train]").count(), 1);
        let once = text.clone();
        update_run_meta(&path, "train", &["a=3".into()], &["seed=0".into()]).unwrap();
        assert_eq!(fs::read_to_string(&path).unwrap(), once);
    }
}
