//! Cross-validation, discrimination metrics and reporting.
//!
//! Folds are assigned per subject so that no subject contributes knees to
//! both sides of a split. Metrics operate on [`ScoredSet`]s of out-of-fold
//! predictions.

mod folds;
mod metrics;
mod report;

use crate::datamodel::{DatasetManifest, KneeRecord, RecordKey};
use crate::{Error, Result};

pub use folds::{group_kfold_ids, stratified_group_kfold, FoldAssignment};
pub use metrics::{
    ap_of, auc_of, average_precision, bootstrap_ci, bootstrap_distribution, delong_test, percentile_ci, pr_curve,
    roc_auc, DelongResult, Metric, Roc,
};
pub use report::{
    assemble_oof, curve_svg, pain_cutpoints, subgroup_report, write_curve_csv, write_metrics_csv, write_oof_csv,
    CurveKind, Estimate, FoldModel, MetricsRow, SubgroupRow, KL_GROUPS, PAIN_GROUPS,
};

/// Scored knees with their labels and subgroup keys, as parallel arrays.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ScoredSet {
    pub scores: Vec<f64>,
    pub labels: Vec<u8>,
    pub keys: Vec<RecordKey>,
    /// Fold whose held-out model produced each score.
    pub folds: Vec<usize>,
    pub kl: Vec<Option<u8>>,
    pub pain: Vec<Option<f64>>,
}

impl ScoredSet {
    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn n_pos(&self) -> usize {
        self.labels.iter().filter(|&&y| y == 1).count()
    }

    pub fn push(&mut self, record: &KneeRecord, score: f64, fold: usize) -> Result<()> {
        let label = record
            .pfoa
            .ok_or_else(|| Error::validation(format!("{} has no PFOA label", record.key())))?;
        self.scores.push(score);
        self.labels.push(u8::from(label));
        self.keys.push(record.key());
        self.folds.push(fold);
        self.kl.push(record.standard_kl());
        self.pain.push(record.womac_pain);
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.scores.len();
        let lens = [
            self.labels.len(),
            self.keys.len(),
            self.folds.len(),
            self.kl.len(),
            self.pain.len(),
        ];
        if lens.iter().any(|&l| l != n) {
            return Err(Error::Shape(format!(
                "scored set columns differ in length: {n} vs {lens:?}"
            )));
        }
        if self.labels.iter().any(|&y| y > 1) {
            return Err(Error::validation("labels must be 0 or 1"));
        }
        if self.scores.iter().any(|s| !s.is_finite()) {
            return Err(Error::Metric("non-finite score".into()));
        }
        Ok(())
    }

    /// Rows whose index satisfies `keep`, in order.
    pub fn select(&self, keep: impl Fn(usize) -> bool) -> ScoredSet {
        let mut out = ScoredSet::default();
        for i in (0..self.len()).filter(|&i| keep(i)) {
            out.scores.push(self.scores[i]);
            out.labels.push(self.labels[i]);
            out.keys.push(self.keys[i].clone());
            out.folds.push(self.folds[i]);
            out.kl.push(self.kl[i]);
            out.pain.push(self.pain[i]);
        }
        out
    }

    /// Scores aligned to `keys`, or an error if a key is missing.
    pub fn scores_for(&self, keys: &[RecordKey]) -> Result<Vec<f64>> {
        let index: std::collections::BTreeMap<&RecordKey, usize> =
            self.keys.iter().enumerate().map(|(i, k)| (k, i)).collect();
        keys.iter()
            .map(|k| {
                index
                    .get(k)
                    .map(|&i| self.scores[i])
                    .ok_or_else(|| Error::validation(format!("no score for {k}")))
            })
            .collect()
    }

    /// Orders rows by record key.
    pub fn sorted(&self) -> ScoredSet {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.sort_by(|&a, &b| self.keys[a].cmp(&self.keys[b]));
        let mut out = ScoredSet::default();
        for i in idx {
            out.scores.push(self.scores[i]);
            out.labels.push(self.labels[i]);
            out.keys.push(self.keys[i].clone());
            out.folds.push(self.folds[i]);
            out.kl.push(self.kl[i]);
            out.pain.push(self.pain[i]);
        }
        out
    }

    pub fn from_manifest(manifest: &DatasetManifest, scores: &[f64], folds: &[usize]) -> Result<ScoredSet> {
        if scores.len() != manifest.len() || folds.len() != manifest.len() {
            return Err(Error::Shape("scores and folds must align with the manifest".into()));
        }
        let mut out = ScoredSet::default();
        for ((r, &s), &f) in manifest.records.iter().zip(scores).zip(folds) {
            out.push(r, s, f)?;
        }
        Ok(out)
    }
}
