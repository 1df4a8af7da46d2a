use std::collections::BTreeMap;

use super::{fit_gbm, tune, GbmModel, TuneResult};
use crate::datamodel::{DatasetManifest, KneeRecord, RecordKey};
use crate::evalstats::{FoldAssignment, ScoredSet};
use crate::{Error, Result};

/// Clinical feature sets of the three reference models.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Variant {
    /// Age, sex, BMI.
    Demographic = 1,
    /// Adds the total WOMAC score.
    WithWomac = 2,
    /// Adds the KL grade.
    WithKl = 3,
}

pub const CLINICAL_FEATURES: [&str; 5] = ["age", "sex", "bmi", "womac_total", "kl_grade"];
pub const FUSION_FEATURES: [&str; 6] = ["cnn_prob", "age", "sex", "bmi", "womac_total", "kl_grade"];

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Demographic, Variant::WithWomac, Variant::WithKl];

    pub fn index(self) -> u8 {
        self as u8
    }

    pub fn feature_names(self) -> Vec<String> {
        CLINICAL_FEATURES[..2 + self as usize]
            .iter()
            .map(|s| s.to_string())
            .collect()
    }
}

impl TryFrom<u8> for Variant {
    type Error = Error;

    fn try_from(v: u8) -> Result<Self> {
        match v {
            1 => Ok(Variant::Demographic),
            2 => Ok(Variant::WithWomac),
            3 => Ok(Variant::WithKl),
            _ => Err(Error::validation(format!(
                "reference variant must be 1, 2 or 3, got {v}"
            ))),
        }
    }
}

fn all_clinical(r: &KneeRecord) -> [f64; 5] {
    [
        r.age,
        r.sex.as_feature(),
        r.bmi.unwrap_or(f64::NAN),
        r.womac_total.unwrap_or(f64::NAN),
        r.standard_kl().map_or(f64::NAN, f64::from),
    ]
}

/// Feature row of `variant` for one knee; missing values are `NaN`.
pub fn clinical_features(r: &KneeRecord, variant: Variant) -> Vec<f64> {
    all_clinical(r)[..2 + variant as usize].to_vec()
}

pub fn fusion_features(r: &KneeRecord, cnn_prob: f64) -> Vec<f64> {
    let mut row = vec![cnn_prob];
    row.extend(all_clinical(r));
    row
}

#[derive(Debug, Clone)]
pub struct ReferenceFit {
    pub model: GbmModel,
    pub tuning: TuneResult,
    /// Training rows, kept as the SHAP background.
    pub rows: Vec<Vec<f64>>,
}

fn labels_and_groups(manifest: &DatasetManifest) -> Result<(Vec<u8>, Vec<String>)> {
    manifest
        .records
        .iter()
        .map(|r| {
            r.pfoa
                .map(|y| (u8::from(y), r.subject_id.clone()))
                .ok_or_else(|| Error::validation(format!("{} has no PFOA label", r.key())))
        })
        .collect::<Result<Vec<_>>>()
        .map(|v| v.into_iter().unzip())
}

fn fit_tuned(
    rows: Vec<Vec<f64>>,
    manifest: &DatasetManifest,
    names: Vec<String>,
    budget: usize,
    inner_folds: usize,
    seed: u64,
) -> Result<ReferenceFit> {
    let (labels, groups) = labels_and_groups(manifest)?;
    let tuning = tune(&rows, &labels, &groups, &names, budget, inner_folds, seed)?;
    let model = fit_gbm(&rows, &labels, &names, &tuning.best)?;
    Ok(ReferenceFit { model, tuning, rows })
}

/// Tunes and fits a reference model on the knees of `manifest`.
pub fn fit_reference_model(
    manifest: &DatasetManifest,
    variant: Variant,
    budget: usize,
    inner_folds: usize,
    seed: u64,
) -> Result<ReferenceFit> {
    let rows = manifest.records.iter().map(|r| clinical_features(r, variant)).collect();
    fit_tuned(rows, manifest, variant.feature_names(), budget, inner_folds, seed)
}

/// Tunes and fits the CNN-plus-clinical model. Every CNN probability must
/// come from the model that held out the knee's subject under `folds`.
pub fn fit_fusion_model(
    manifest: &DatasetManifest,
    cnn: &ScoredSet,
    folds: &FoldAssignment,
    budget: usize,
    inner_folds: usize,
    seed: u64,
) -> Result<ReferenceFit> {
    let index: BTreeMap<&RecordKey, usize> = cnn.keys.iter().enumerate().map(|(i, k)| (k, i)).collect();
    let mut rows = Vec::with_capacity(manifest.len());
    for r in &manifest.records {
        let key = r.key();
        let &i = index
            .get(&key)
            .ok_or_else(|| Error::validation(format!("no CNN probability for {key}")))?;
        let expected = folds.fold_of(&r.subject_id)?;
        if cnn.folds[i] != expected {
            return Err(Error::Leakage(format!(
                "CNN probability for {key} came from the fold {} model, but the subject is in fold {expected}",
                cnn.folds[i]
            )));
        }
        rows.push(fusion_features(r, cnn.scores[i]));
    }
    let names = FUSION_FEATURES.iter().map(|s| s.to_string()).collect();
    fit_tuned(rows, manifest, names, budget, inner_folds, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::{Sex, Side, Visit};
    use crate::evalstats::{auc_of, stratified_group_kfold};
    use crate::rng;
    use rand::Rng;

    fn cohort(n: usize, seed: u64) -> DatasetManifest {
        let mut r = rng::seeded(seed);
        let mut recs = Vec::new();
        for i in 0..n {
            let kl = r.random_range(0..=4);
            let y = r.random::<f64>() < 0.05 + 0.2 * kl as f64;
            recs.push(KneeRecord {
                subject_id: format!("S{i:03}"),
                side: Side::Left,
                visit: Visit::Baseline,
                age: 50.0 + 30.0 * r.random::<f64>(),
                sex: if r.random::<bool>() { Sex::Female } else { Sex::Male },
                bmi: (r.random::<f64>() > 0.05).then(|| 25.0 + 10.0 * r.random::<f64>()),
                womac_total: Some(90.0 * r.random::<f64>()),
                womac_pain: Some(20.0 * r.random::<f64>()),
                kl_grade: Some(kl),
                pf_grades: None,
                pfoa: Some(y),
                image_path: None,
            });
        }
        DatasetManifest::new(recs, "test", 0.2).unwrap()
    }

    #[test]
    fn variant_schemas() {
        assert_eq!(Variant::Demographic.feature_names(), ["age", "sex", "bmi"]);
        assert_eq!(Variant::WithKl.feature_names().len(), 5);
        assert!(Variant::try_from(4).is_err());
        assert!(Variant::try_from(0).is_err());
        assert_eq!(Variant::try_from(2).unwrap(), Variant::WithWomac);
    }

    #[test]
    fn variant_one_never_reads_womac_or_kl() {
        let m = cohort(120, 1);
        let fit = fit_reference_model(&m, Variant::Demographic, 1, 3, 1).unwrap();
        assert_eq!(fit.model.features, ["age", "sex", "bmi"]);
        assert!(fit.model.used_features().iter().all(|&f| f < 3));
        let mut altered = m.records[0].clone();
        altered.womac_total = Some(0.0);
        altered.kl_grade = Some(4);
        let a = fit
            .model
            .predict_proba(&clinical_features(&m.records[0], Variant::Demographic))
            .unwrap();
        let b = fit
            .model
            .predict_proba(&clinical_features(&altered, Variant::Demographic))
            .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn kl_signal_is_picked_up() {
        let m = cohort(300, 2);
        let v1 = fit_reference_model(&m, Variant::Demographic, 2, 3, 4).unwrap();
        let v3 = fit_reference_model(&m, Variant::WithKl, 2, 3, 4).unwrap();
        assert!(v3.tuning.best_auc >= v1.tuning.best_auc);
    }

    fn oof_like(m: &DatasetManifest, folds: &FoldAssignment, score: impl Fn(&KneeRecord) -> f64) -> ScoredSet {
        let mut set = ScoredSet::default();
        for r in &m.records {
            set.push(r, score(r), folds.fold_of(&r.subject_id).unwrap()).unwrap();
        }
        set
    }

    #[test]
    fn fusion_with_oracle_probability() {
        let m = cohort(150, 3);
        let folds = stratified_group_kfold(&m, 5, 1).unwrap();
        let cnn = oof_like(&m, &folds, |r| if r.pfoa == Some(true) { 0.9 } else { 0.1 });
        let fit = fit_fusion_model(&m, &cnn, &folds, 1, 3, 2).unwrap();
        assert_eq!(fit.model.features.len(), 6);
        let p = fit.model.predict_proba_batch(&fit.rows).unwrap();
        let y: Vec<u8> = m.records.iter().map(|r| u8::from(r.pfoa == Some(true))).collect();
        assert_eq!(auc_of(&p, &y).unwrap(), 1.0);
    }

    #[test]
    fn fusion_detects_in_fold_probabilities() {
        let m = cohort(60, 4);
        let folds = stratified_group_kfold(&m, 5, 1).unwrap();
        let mut cnn = oof_like(&m, &folds, |_| 0.5);
        cnn.folds[7] = (cnn.folds[7] + 1) % 5;
        assert!(matches!(
            fit_fusion_model(&m, &cnn, &folds, 1, 3, 2),
            Err(Error::Leakage(_))
        ));
        let partial = cnn.select(|i| i > 0);
        assert!(fit_fusion_model(&m, &partial, &folds, 1, 3, 2).is_err());
    }
}
