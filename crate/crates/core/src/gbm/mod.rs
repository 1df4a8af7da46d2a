//! Gradient-boosted decision trees for the clinical reference models.
//!
//! Logistic-loss boosting with second-order leaf values, leaf-wise growth
//! and per-split learned default directions for missing values (`NaN`).
//! Attributions come from exact path-dependent TreeSHAP over the node covers
//! recorded during training.

mod fit;
mod reference;
mod shap;
mod tune;

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub use fit::{fit_gbm, Growth};
pub use reference::{
    clinical_features, fit_fusion_model, fit_reference_model, fusion_features, ReferenceFit, Variant,
    CLINICAL_FEATURES, FUSION_FEATURES,
};
pub use shap::{expected_value, shap_importance, tree_expectation, treeshap, FeatureImportance, ShapValues};
pub use tune::{inner_fold_ids, sample_params, tune, Trial, TuneResult};

pub const MODEL_FORMAT: &str = "pfoa-gbm";
pub const MODEL_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Node {
    Split {
        feature: usize,
        /// Present values `< threshold` go left.
        threshold: f64,
        default_left: bool,
        left: usize,
        right: usize,
        cover: f64,
    },
    Leaf {
        value: f64,
        cover: f64,
    },
}

impl Node {
    pub fn cover(&self) -> f64 {
        match self {
            Node::Split { cover, .. } | Node::Leaf { cover, .. } => *cover,
        }
    }

    fn set_cover(&mut self, c: f64) {
        match self {
            Node::Split { cover, .. } | Node::Leaf { cover, .. } => *cover = c,
        }
    }
}

/// Binary tree stored as a node arena; node 0 is the root.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub nodes: Vec<Node>,
}

impl Tree {
    pub fn leaf(value: f64, cover: f64) -> Self {
        Tree {
            nodes: vec![Node::Leaf { value, cover }],
        }
    }

    /// Child taken by `row` at a split node.
    pub(crate) fn route(row: &[f64], feature: usize, threshold: f64, default_left: bool) -> bool {
        let v = row[feature];
        if v.is_nan() {
            default_left
        } else {
            v < threshold
        }
    }

    pub fn leaf_index(&self, row: &[f64]) -> usize {
        let mut i = 0;
        loop {
            match &self.nodes[i] {
                Node::Leaf { .. } => return i,
                Node::Split {
                    feature,
                    threshold,
                    default_left,
                    left,
                    right,
                    ..
                } => {
                    i = if Tree::route(row, *feature, *threshold, *default_left) {
                        *left
                    } else {
                        *right
                    }
                }
            }
        }
    }

    pub fn predict(&self, row: &[f64]) -> f64 {
        match &self.nodes[self.leaf_index(row)] {
            Node::Leaf { value, .. } => *value,
            Node::Split { .. } => unreachable!("leaf_index returns leaves"),
        }
    }

    pub fn split_features(&self) -> impl Iterator<Item = usize> + '_ {
        self.nodes.iter().filter_map(|n| match n {
            Node::Split { feature, .. } => Some(*feature),
            Node::Leaf { .. } => None,
        })
    }

    pub fn num_leaves(&self) -> usize {
        self.nodes.iter().filter(|n| matches!(n, Node::Leaf { .. })).count()
    }

    pub fn depth(&self) -> usize {
        fn go(t: &Tree, i: usize) -> usize {
            match &t.nodes[i] {
                Node::Leaf { .. } => 0,
                Node::Split { left, right, .. } => 1 + go(t, *left).max(go(t, *right)),
            }
        }
        go(self, 0)
    }

    fn validate(&self, n_features: usize) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(Error::Model("tree without nodes".into()));
        }
        for n in &self.nodes {
            match n {
                Node::Leaf { value, .. } if !value.is_finite() => {
                    return Err(Error::Model("non-finite leaf value".into()))
                }
                Node::Split {
                    feature, left, right, ..
                } if *feature >= n_features || *left >= self.nodes.len() || *right >= self.nodes.len() => {
                    return Err(Error::Model("split references a missing feature or node".into()))
                }
                _ => {}
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GbmParams {
    pub num_rounds: usize,
    pub learning_rate: f64,
    pub max_leaves: usize,
    pub min_samples_leaf: usize,
    pub feature_fraction: f64,
    pub bagging_fraction: f64,
    pub l2_leaf_regularization: f64,
    pub growth: Growth,
    pub seed: u64,
}

impl Default for GbmParams {
    fn default() -> Self {
        GbmParams {
            num_rounds: 100,
            learning_rate: 0.05,
            max_leaves: 15,
            min_samples_leaf: 20,
            feature_fraction: 1.0,
            bagging_fraction: 1.0,
            l2_leaf_regularization: 1.0,
            growth: Growth::LeafWise,
            seed: 0,
        }
    }
}

impl GbmParams {
    pub fn validate(&self) -> Result<()> {
        let frac = |f: f64| f > 0.0 && f <= 1.0;
        if self.num_rounds == 0
            || !(self.learning_rate > 0.0)
            || self.max_leaves < 2
            || self.min_samples_leaf == 0
            || !(self.l2_leaf_regularization > 0.0)
        {
            return Err(Error::validation(format!("GBM parameters must be positive: {self:?}")));
        }
        if !frac(self.feature_fraction) || !frac(self.bagging_fraction) {
            return Err(Error::validation("feature/bagging fractions must be in (0, 1]"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GbmModel {
    /// Log-odds added to every prediction.
    pub base_score: f64,
    pub learning_rate: f64,
    pub trees: Vec<Tree>,
    /// Feature names; rows are ordered the same way. Missing values are `NaN`.
    pub features: Vec<String>,
}

pub fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

impl GbmModel {
    fn check_row(&self, row: &[f64]) -> Result<()> {
        if row.len() != self.features.len() {
            return Err(Error::Shape(format!(
                "row has {} features, model schema has {} ({})",
                row.len(),
                self.features.len(),
                self.features.join(",")
            )));
        }
        Ok(())
    }

    /// Raw log-odds score.
    pub fn predict_raw(&self, row: &[f64]) -> Result<f64> {
        self.check_row(row)?;
        Ok(self.base_score + self.learning_rate * self.trees.iter().map(|t| t.predict(row)).sum::<f64>())
    }

    pub fn predict_proba(&self, row: &[f64]) -> Result<f64> {
        self.predict_raw(row).map(sigmoid)
    }

    pub fn predict_proba_batch(&self, rows: &[Vec<f64>]) -> Result<Vec<f64>> {
        rows.iter().map(|r| self.predict_proba(r)).collect()
    }

    /// Indices of every feature used by at least one split.
    pub fn used_features(&self) -> Vec<usize> {
        let mut f: Vec<usize> = self.trees.iter().flat_map(Tree::split_features).collect();
        f.sort_unstable();
        f.dedup();
        f
    }

    pub fn validate(&self) -> Result<()> {
        if !self.base_score.is_finite() || !self.learning_rate.is_finite() {
            return Err(Error::Model("non-finite base score or learning rate".into()));
        }
        for t in &self.trees {
            t.validate(self.features.len())?;
        }
        Ok(())
    }

    /// Replaces every node cover with the number of `background` rows that
    /// reach it, so attributions are taken relative to that data.
    pub fn recompute_covers(&mut self, background: &[Vec<f64>]) -> Result<()> {
        for row in background {
            self.check_row(row)?;
        }
        for tree in &mut self.trees {
            let mut counts = vec![0.0; tree.nodes.len()];
            for row in background {
                let mut i = 0;
                loop {
                    counts[i] += 1.0;
                    match &tree.nodes[i] {
                        Node::Leaf { .. } => break,
                        Node::Split {
                            feature,
                            threshold,
                            default_left,
                            left,
                            right,
                            ..
                        } => {
                            i = if Tree::route(row, *feature, *threshold, *default_left) {
                                *left
                            } else {
                                *right
                            }
                        }
                    }
                }
            }
            for (n, c) in tree.nodes.iter_mut().zip(counts) {
                n.set_cover(c);
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = GbmFile {
            format: MODEL_FORMAT.into(),
            version: MODEL_VERSION,
            model: self.clone(),
        };
        fs::write(path, serde_json::to_string_pretty(&file)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: GbmFile = serde_json::from_str(&text)?;
        if file.format != MODEL_FORMAT || file.version != MODEL_VERSION {
            return Err(Error::Model(format!(
                "{}: container {} v{} is not {MODEL_FORMAT} v{MODEL_VERSION}",
                path.display(),
                file.format,
                file.version
            )));
        }
        file.model.validate()?;
        Ok(file.model)
    }
}

#[derive(Serialize, Deserialize)]
struct GbmFile {
    format: String,
    version: u32,
    model: GbmModel,
}
