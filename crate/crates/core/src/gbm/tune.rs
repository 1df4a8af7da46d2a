use rand::seq::IndexedRandom;

use super::{fit_gbm, GbmParams, Growth};
use crate::evalstats::{auc_of, group_kfold_ids};
use crate::rng;
use crate::{Error, Result};

pub const LEARNING_RATES: [f64; 4] = [0.01, 0.03, 0.05, 0.1];
pub const NUM_ROUNDS: [usize; 3] = [50, 100, 200];
pub const MAX_LEAVES: [usize; 4] = [4, 8, 16, 31];
pub const MIN_SAMPLES_LEAF: [usize; 4] = [5, 10, 20, 40];
pub const FEATURE_FRACTIONS: [f64; 3] = [0.6, 0.8, 1.0];
pub const BAGGING_FRACTIONS: [f64; 3] = [0.6, 0.8, 1.0];
pub const L2_REGULARIZATION: [f64; 4] = [0.1, 1.0, 5.0, 10.0];

/// Candidate `index` of the random search. Candidates do not depend on the
/// budget, so a larger budget only appends to the list.
pub fn sample_params(seed: u64, index: usize) -> GbmParams {
    let mut r = rng::stream(rng::derive(seed, "gbm-search"), index as u64);
    let pick = |r: &mut rng::Rng, xs: &[f64]| *xs.choose(r).expect("grid is non-empty");
    let pick_n = |r: &mut rng::Rng, xs: &[usize]| *xs.choose(r).expect("grid is non-empty");
    GbmParams {
        learning_rate: pick(&mut r, &LEARNING_RATES),
        num_rounds: pick_n(&mut r, &NUM_ROUNDS),
        max_leaves: pick_n(&mut r, &MAX_LEAVES),
        min_samples_leaf: pick_n(&mut r, &MIN_SAMPLES_LEAF),
        feature_fraction: pick(&mut r, &FEATURE_FRACTIONS),
        bagging_fraction: pick(&mut r, &BAGGING_FRACTIONS),
        l2_leaf_regularization: pick(&mut r, &L2_REGULARIZATION),
        growth: Growth::LeafWise,
        seed,
    }
}

/// Subject-grouped inner folds used to score candidates.
pub fn inner_fold_ids(groups: &[String], labels: &[u8], inner_folds: usize, seed: u64) -> Result<Vec<usize>> {
    group_kfold_ids(groups, labels, inner_folds, rng::derive(seed, "inner-cv"))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trial {
    pub params: GbmParams,
    pub inner_auc: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TuneResult {
    pub best: GbmParams,
    pub best_auc: f64,
    pub trials: Vec<Trial>,
}

/// Pooled out-of-fold AUC of `params` over the inner folds.
fn inner_auc(
    rows: &[Vec<f64>],
    labels: &[u8],
    features: &[String],
    ids: &[usize],
    k: usize,
    params: &GbmParams,
) -> Result<f64> {
    let mut oof = vec![0.0; rows.len()];
    for f in 0..k {
        let (mut tr_x, mut tr_y) = (Vec::new(), Vec::new());
        for i in (0..rows.len()).filter(|&i| ids[i] != f) {
            tr_x.push(rows[i].clone());
            tr_y.push(labels[i]);
        }
        let single_class = tr_y.iter().all(|&y| y == tr_y[0]);
        let model = if single_class {
            None
        } else {
            Some(fit_gbm(&tr_x, &tr_y, features, params)?)
        };
        for i in (0..rows.len()).filter(|&i| ids[i] == f) {
            oof[i] = match &model {
                Some(m) => m.predict_raw(&rows[i])?,
                None => 0.0,
            };
        }
    }
    auc_of(&oof, labels)
}

/// Random search over the grid above; the best inner-CV AUC wins and ties
/// keep the earlier candidate.
pub fn tune(
    rows: &[Vec<f64>],
    labels: &[u8],
    groups: &[String],
    features: &[String],
    budget: usize,
    inner_folds: usize,
    seed: u64,
) -> Result<TuneResult> {
    if budget == 0 {
        return Err(Error::validation("search budget must be at least 1"));
    }
    if groups.len() != rows.len() || labels.len() != rows.len() {
        return Err(Error::Shape("rows, labels and groups must align".into()));
    }
    let ids = inner_fold_ids(groups, labels, inner_folds, seed)?;
    let mut trials: Vec<Trial> = Vec::with_capacity(budget);
    for i in 0..budget {
        let params = sample_params(seed, i);
        let auc = inner_auc(rows, labels, features, &ids, inner_folds, &params)?;
        log::debug!("trial {i}: inner AUC {auc:.4} with {params:?}");
        trials.push(Trial { params, inner_auc: auc });
    }
    let best = trials
        .iter()
        .fold(&trials[0], |b, t| if t.inner_auc > b.inner_auc { t } else { b });
    Ok(TuneResult {
        best: best.params.clone(),
        best_auc: best.inner_auc,
        trials,
    })
}
