use rand::seq::index;
use serde::{Deserialize, Serialize};

use super::{logit, GbmModel, GbmParams, Node, Tree};
use crate::rng;
use crate::{Error, Result};

/// Order in which open leaves are split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Growth {
    /// Always split the leaf with the largest gain.
    LeafWise,
    /// Split shallower leaves first.
    DepthWise,
}

const MIN_GAIN: f64 = 1e-12;

struct SplitChoice {
    feature: usize,
    threshold: f64,
    default_left: bool,
    gain: f64,
    left: Vec<usize>,
    right: Vec<usize>,
}

struct Open {
    node: usize,
    depth: usize,
    rows: Vec<usize>,
    split: Option<SplitChoice>,
}

struct Grower<'a> {
    rows: &'a [Vec<f64>],
    grad: &'a [f64],
    hess: &'a [f64],
    features: &'a [usize],
    params: &'a GbmParams,
}

impl Grower<'_> {
    fn sums(&self, idx: &[usize]) -> (f64, f64) {
        idx.iter()
            .fold((0.0, 0.0), |(g, h), &i| (g + self.grad[i], h + self.hess[i]))
    }

    fn score(&self, g: f64, h: f64) -> f64 {
        g * g / (h + self.params.l2_leaf_regularization)
    }

    fn leaf_value(&self, idx: &[usize]) -> f64 {
        let (g, h) = self.sums(idx);
        -g / (h + self.params.l2_leaf_regularization)
    }

    fn best_split(&self, idx: &[usize]) -> Option<SplitChoice> {
        let min_leaf = self.params.min_samples_leaf;
        if idx.len() < 2 * min_leaf {
            return None;
        }
        let (g_all, h_all) = self.sums(idx);
        let parent = self.score(g_all, h_all);
        let mut best: Option<(usize, f64, bool, f64)> = None;

        for &f in self.features {
            let mut present: Vec<(f64, usize)> = Vec::with_capacity(idx.len());
            let (mut g_miss, mut h_miss, mut n_miss) = (0.0, 0.0, 0usize);
            for &i in idx {
                let v = self.rows[i][f];
                if v.is_nan() {
                    g_miss += self.grad[i];
                    h_miss += self.hess[i];
                    n_miss += 1;
                } else {
                    present.push((v, i));
                }
            }
            if present.len() < 2 {
                continue;
            }
            present.sort_by(|a, b| a.0.total_cmp(&b.0));

            let (mut g_left, mut h_left) = (0.0, 0.0);
            for k in 0..present.len() - 1 {
                let (v, i) = present[k];
                g_left += self.grad[i];
                h_left += self.hess[i];
                let next = present[k + 1].0;
                if !(v < next) {
                    continue;
                }
                let n_left = k + 1;
                let n_right = present.len() - n_left;
                for default_left in [true, false] {
                    let (gl, hl, nl) = if default_left {
                        (g_left + g_miss, h_left + h_miss, n_left + n_miss)
                    } else {
                        (g_left, h_left, n_left)
                    };
                    let nr = n_left + n_right + n_miss - nl;
                    if nl < min_leaf || nr < min_leaf {
                        continue;
                    }
                    let gain = self.score(gl, hl) + self.score(g_all - gl, h_all - hl) - parent;
                    if gain > MIN_GAIN && best.is_none_or(|b| gain > b.3) {
                        let mut threshold = 0.5 * (v + next);
                        if threshold <= v {
                            threshold = next;
                        }
                        let default_left = if n_miss == 0 { n_left >= n_right } else { default_left };
                        best = Some((f, threshold, default_left, gain));
                    }
                }
            }
        }

        best.map(|(feature, threshold, default_left, gain)| {
            let (left, right): (Vec<usize>, Vec<usize>) = idx
                .iter()
                .partition(|&&i| Tree::route(&self.rows[i], feature, threshold, default_left));
            SplitChoice {
                feature,
                threshold,
                default_left,
                gain,
                left,
                right,
            }
        })
    }

    fn grow(&self, bag: Vec<usize>) -> Tree {
        let mut nodes = vec![Node::Leaf {
            value: 0.0,
            cover: bag.len() as f64,
        }];
        let split = self.best_split(&bag);
        let mut open = vec![Open {
            node: 0,
            depth: 0,
            rows: bag,
            split,
        }];
        let mut leaves = 1;
        while leaves < self.params.max_leaves {
            let pick = open
                .iter()
                .enumerate()
                .filter_map(|(k, o)| o.split.as_ref().map(|s| (k, o.depth, o.node, s.gain)))
                .min_by(|a, b| {
                    let depth = match self.params.growth {
                        Growth::LeafWise => std::cmp::Ordering::Equal,
                        Growth::DepthWise => a.1.cmp(&b.1),
                    };
                    depth.then(b.3.total_cmp(&a.3)).then(a.2.cmp(&b.2))
                });
            let Some((k, ..)) = pick else { break };
            let o = open.swap_remove(k);
            let s = o.split.expect("picked candidates have a split");
            let (l, r) = (nodes.len(), nodes.len() + 1);
            for side in [&s.left, &s.right] {
                nodes.push(Node::Leaf {
                    value: 0.0,
                    cover: side.len() as f64,
                });
            }
            nodes[o.node] = Node::Split {
                feature: s.feature,
                threshold: s.threshold,
                default_left: s.default_left,
                left: l,
                right: r,
                cover: o.rows.len() as f64,
            };
            for (node, rows) in [(l, s.left), (r, s.right)] {
                let split = self.best_split(&rows);
                open.push(Open {
                    node,
                    depth: o.depth + 1,
                    rows,
                    split,
                });
            }
            leaves += 1;
        }
        for o in open {
            nodes[o.node] = Node::Leaf {
                value: self.leaf_value(&o.rows),
                cover: o.rows.len() as f64,
            };
        }
        Tree { nodes }
    }
}

/// Fits a boosted ensemble for binary `labels` (0/1). Missing feature
/// values are `NaN`. The same inputs and `params.seed` give the same model.
pub fn fit_gbm(rows: &[Vec<f64>], labels: &[u8], features: &[String], params: &GbmParams) -> Result<GbmModel> {
    params.validate()?;
    let n = rows.len();
    if n == 0 {
        return Err(Error::validation("cannot fit on an empty dataset"));
    }
    if labels.len() != n {
        return Err(Error::Shape(format!("{n} rows, {} labels", labels.len())));
    }
    if features.is_empty() {
        return Err(Error::validation("at least one feature is required"));
    }
    if let Some(r) = rows.iter().position(|r| r.len() != features.len()) {
        return Err(Error::Shape(format!(
            "row {r} has {} values, schema has {}",
            rows[r].len(),
            features.len()
        )));
    }
    if labels.iter().any(|&y| y > 1) {
        return Err(Error::validation("labels must be 0 or 1"));
    }
    let n_pos = labels.iter().filter(|&&y| y == 1).count();
    if n_pos == 0 || n_pos == n {
        return Err(Error::validation("training labels contain a single class"));
    }

    let base_score = logit(n_pos as f64 / n as f64);
    let nf = features.len();
    let n_bag = ((params.bagging_fraction * n as f64).round() as usize).clamp(1, n);
    let n_feat = ((params.feature_fraction * nf as f64).ceil() as usize).clamp(1, nf);
    let bag_seed = rng::derive(params.seed, "gbm-bagging");
    let feat_seed = rng::derive(params.seed, "gbm-features");

    let mut raw = vec![base_score; n];
    let mut grad = vec![0.0; n];
    let mut hess = vec![0.0; n];
    let mut trees = Vec::with_capacity(params.num_rounds);
    for round in 0..params.num_rounds {
        for i in 0..n {
            let p = super::sigmoid(raw[i]);
            grad[i] = p - f64::from(labels[i]);
            hess[i] = p * (1.0 - p);
        }
        let bag = subset(n, n_bag, bag_seed, round);
        let feats = subset(nf, n_feat, feat_seed, round);
        let tree = Grower {
            rows,
            grad: &grad,
            hess: &hess,
            features: &feats,
            params,
        }
        .grow(bag);
        for (r, row) in raw.iter_mut().zip(rows) {
            *r += params.learning_rate * tree.predict(row);
        }
        trees.push(tree);
    }
    Ok(GbmModel {
        base_score,
        learning_rate: params.learning_rate,
        trees,
        features: features.to_vec(),
    })
}

fn subset(n: usize, k: usize, seed: u64, round: usize) -> Vec<usize> {
    if k >= n {
        return (0..n).collect();
    }
    let mut v = index::sample(&mut rng::stream(seed, round as u64), n, k).into_vec();
    v.sort_unstable();
    v
}
