use serde::Serialize;

use super::{GbmModel, Node, Tree};
use crate::{Error, Result};

/// Per-feature attributions for one row, in log-odds units.
/// `base_value + values.sum()` equals the model's raw score.
#[derive(Debug, Clone, PartialEq)]
pub struct ShapValues {
    pub base_value: f64,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FeatureImportance {
    pub feature: String,
    pub mean_abs_shap: f64,
}

/// Fractions of the parent cover sent to each child.
fn fractions(tree: &Tree, node: usize) -> (f64, f64) {
    let Node::Split { left, right, .. } = tree.nodes[node] else {
        return (1.0, 1.0);
    };
    let (cl, cr) = (tree.nodes[left].cover(), tree.nodes[right].cover());
    if cl + cr > 0.0 {
        (cl / (cl + cr), cr / (cl + cr))
    } else {
        (0.5, 0.5)
    }
}

/// Cover-weighted mean leaf value of a tree.
pub fn tree_expectation(tree: &Tree) -> f64 {
    fn go(t: &Tree, i: usize) -> f64 {
        match &t.nodes[i] {
            Node::Leaf { value, .. } => *value,
            Node::Split { left, right, .. } => {
                let (fl, fr) = fractions(t, i);
                fl * go(t, *left) + fr * go(t, *right)
            }
        }
    }
    go(tree, 0)
}

/// Expected raw score under the distribution described by the covers.
pub fn expected_value(model: &GbmModel) -> f64 {
    model.base_score + model.learning_rate * model.trees.iter().map(tree_expectation).sum::<f64>()
}

#[derive(Debug, Clone, Copy)]
struct PathElement {
    feature: Option<usize>,
    zero_fraction: f64,
    one_fraction: f64,
    pweight: f64,
}

fn extend_path(path: &mut Vec<PathElement>, depth: usize, zero: f64, one: f64, feature: Option<usize>) {
    path.truncate(depth);
    path.push(PathElement {
        feature,
        zero_fraction: zero,
        one_fraction: one,
        pweight: if depth == 0 { 1.0 } else { 0.0 },
    });
    let d = depth as f64;
    for i in (0..depth).rev() {
        let fi = i as f64;
        path[i + 1].pweight += one * path[i].pweight * (fi + 1.0) / (d + 1.0);
        path[i].pweight = zero * path[i].pweight * (d - fi) / (d + 1.0);
    }
}

fn unwind_path(path: &mut [PathElement], depth: usize, index: usize) {
    let one = path[index].one_fraction;
    let zero = path[index].zero_fraction;
    let d = depth as f64;
    let mut next_one = path[depth].pweight;
    for i in (0..depth).rev() {
        let fi = i as f64;
        if one != 0.0 {
            let tmp = path[i].pweight;
            path[i].pweight = next_one * (d + 1.0) / ((fi + 1.0) * one);
            next_one = tmp - path[i].pweight * zero * (d - fi) / (d + 1.0);
        } else {
            path[i].pweight = path[i].pweight * (d + 1.0) / (zero * (d - fi));
        }
    }
    for i in index..depth {
        path[i].feature = path[i + 1].feature;
        path[i].zero_fraction = path[i + 1].zero_fraction;
        path[i].one_fraction = path[i + 1].one_fraction;
    }
}

fn unwound_path_sum(path: &[PathElement], depth: usize, index: usize) -> f64 {
    let one = path[index].one_fraction;
    let zero = path[index].zero_fraction;
    let d = depth as f64;
    let mut next_one = path[depth].pweight;
    let mut total = 0.0;
    for i in (0..depth).rev() {
        let fi = i as f64;
        if one != 0.0 {
            let tmp = next_one * (d + 1.0) / ((fi + 1.0) * one);
            total += tmp;
            next_one = path[i].pweight - tmp * zero * (d - fi) / (d + 1.0);
        } else if zero != 0.0 {
            total += path[i].pweight / zero / ((d - fi) / (d + 1.0));
        }
    }
    total
}

struct Walk<'a> {
    tree: &'a Tree,
    row: &'a [f64],
    phi: &'a mut [f64],
    scale: f64,
}

impl Walk<'_> {
    fn recurse(
        &mut self,
        node: usize,
        parent: &[PathElement],
        depth: usize,
        zero: f64,
        one: f64,
        feature: Option<usize>,
    ) {
        let mut path = parent.to_vec();
        extend_path(&mut path, depth, zero, one, feature);
        let mut depth = depth;
        match self.tree.nodes[node] {
            Node::Leaf { value, .. } => {
                for i in 1..=depth {
                    let w = unwound_path_sum(&path, depth, i);
                    let el = path[i];
                    let f = el.feature.expect("only the root element has no feature");
                    self.phi[f] += w * (el.one_fraction - el.zero_fraction) * value * self.scale;
                }
            }
            Node::Split {
                feature: f,
                threshold,
                default_left,
                left,
                right,
                ..
            } => {
                let (fl, fr) = fractions(self.tree, node);
                let goes_left = Tree::route(self.row, f, threshold, default_left);
                let (hot, cold, hot_frac, cold_frac) = if goes_left {
                    (left, right, fl, fr)
                } else {
                    (right, left, fr, fl)
                };
                let (mut in_zero, mut in_one) = (1.0, 1.0);
                if let Some(k) = (1..=depth).find(|&k| path[k].feature == Some(f)) {
                    in_zero = path[k].zero_fraction;
                    in_one = path[k].one_fraction;
                    unwind_path(&mut path, depth, k);
                    depth -= 1;
                }
                self.recurse(hot, &path, depth + 1, hot_frac * in_zero, in_one, Some(f));
                self.recurse(cold, &path, depth + 1, cold_frac * in_zero, 0.0, Some(f));
            }
        }
    }
}

/// Exact path-dependent TreeSHAP attributions for one row.
pub fn treeshap(model: &GbmModel, row: &[f64]) -> Result<ShapValues> {
    if row.len() != model.features.len() {
        return Err(Error::Shape(format!(
            "row has {} features, model schema has {}",
            row.len(),
            model.features.len()
        )));
    }
    let mut phi = vec![0.0; row.len()];
    for tree in &model.trees {
        let mut walk = Walk {
            tree,
            row,
            phi: &mut phi,
            scale: model.learning_rate,
        };
        walk.recurse(0, &[], 0, 1.0, 1.0, None);
    }
    Ok(ShapValues {
        base_value: expected_value(model),
        values: phi,
    })
}

/// Mean absolute attribution per feature over `rows`, largest first.
pub fn shap_importance(model: &GbmModel, rows: &[Vec<f64>]) -> Result<Vec<FeatureImportance>> {
    if rows.is_empty() {
        return Err(Error::validation("SHAP importance needs at least one row"));
    }
    let mut acc = vec![0.0; model.features.len()];
    for row in rows {
        for (a, v) in acc.iter_mut().zip(treeshap(model, row)?.values) {
            *a += v.abs();
        }
    }
    let mut out: Vec<(usize, FeatureImportance)> = acc
        .into_iter()
        .enumerate()
        .map(|(i, a)| {
            (
                i,
                FeatureImportance {
                    feature: model.features[i].clone(),
                    mean_abs_shap: a / rows.len() as f64,
                },
            )
        })
        .collect();
    out.sort_by(|a, b| b.1.mean_abs_shap.total_cmp(&a.1.mean_abs_shap).then(a.0.cmp(&b.0)));
    Ok(out.into_iter().map(|(_, f)| f).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gbm::{fit_gbm, GbmParams};
    use crate::rng;
    use proptest::prelude::*;
    use rand::Rng;

    /// Tree-conditional expectation with the features in `known` fixed to `row`.
    fn conditional(tree: &Tree, i: usize, row: &[f64], known: u32) -> f64 {
        match tree.nodes[i] {
            Node::Leaf { value, .. } => value,
            Node::Split {
                feature,
                threshold,
                default_left,
                left,
                right,
                ..
            } => {
                if known & (1 << feature) != 0 {
                    let next = if Tree::route(row, feature, threshold, default_left) {
                        left
                    } else {
                        right
                    };
                    conditional(tree, next, row, known)
                } else {
                    let (cl, cr) = (tree.nodes[left].cover(), tree.nodes[right].cover());
                    (cl * conditional(tree, left, row, known) + cr * conditional(tree, right, row, known)) / (cl + cr)
                }
            }
        }
    }

    fn brute_force(model: &GbmModel, row: &[f64]) -> Vec<f64> {
        let m = row.len();
        let value = |s: u32| -> f64 {
            model.base_score + model.learning_rate * model.trees.iter().map(|t| conditional(t, 0, row, s)).sum::<f64>()
        };
        let fact = |k: usize| -> f64 { (1..=k).map(|x| x as f64).product() };
        (0..m)
            .map(|i| {
                let mut phi = 0.0;
                for s in 0u32..(1 << m) {
                    if s & (1 << i) != 0 {
                        continue;
                    }
                    let k = s.count_ones() as usize;
                    let w = fact(k) * fact(m - k - 1) / fact(m);
                    phi += w * (value(s | (1 << i)) - value(s));
                }
                phi
            })
            .collect()
    }

    fn random_problem(seed: u64, n: usize, m: usize) -> (Vec<Vec<f64>>, Vec<u8>) {
        let mut r = rng::seeded(seed);
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                (0..m)
                    .map(|_| {
                        if r.random::<f64>() < 0.1 {
                            f64::NAN
                        } else {
                            (r.random::<f64>() * 5.0).floor()
                        }
                    })
                    .collect()
            })
            .collect();
        let labels: Vec<u8> = rows
            .iter()
            .map(|x| u8::from(x[0].max(0.0) + x[1].max(0.0) * x[2 % m].max(0.0) + r.random::<f64>() * 4.0 > 7.0))
            .collect();
        (rows, labels)
    }

    fn params(seed: u64) -> GbmParams {
        GbmParams {
            num_rounds: 6,
            learning_rate: 0.2,
            max_leaves: 8,
            min_samples_leaf: 3,
            feature_fraction: 0.8,
            bagging_fraction: 0.8,
            seed,
            ..GbmParams::default()
        }
    }

    #[test]
    fn single_split_attribution() {
        let tree = crate::gbm::tests::stump(0, 1.5, true, -1.0, 2.0);
        let model = GbmModel {
            base_score: 0.0,
            learning_rate: 1.0,
            trees: vec![tree],
            features: vec!["a".into(), "b".into()],
        };
        // E = 0.4 * -1 + 0.6 * 2 = 0.8
        let s = treeshap(&model, &[0.0, 7.0]).unwrap();
        assert!((s.base_value - 0.8).abs() < 1e-15);
        assert!((s.values[0] - (-1.8)).abs() < 1e-15);
        assert_eq!(s.values[1], 0.0);
    }

    #[test]
    fn single_leaf_tree_has_no_attribution() {
        let model = GbmModel {
            base_score: 0.0,
            learning_rate: 1.0,
            trees: vec![Tree::leaf(0.7, 5.0)],
            features: vec!["a".into(), "b".into()],
        };
        let s = treeshap(&model, &[1.0, f64::NAN]).unwrap();
        assert_eq!(s.values, [0.0, 0.0]);
        assert_eq!(s.base_value, 0.7);
    }

    #[test]
    fn importance_matches_direct_average_and_ignores_row_order() {
        let (rows, labels) = random_problem(11, 160, 3);
        let names: Vec<String> = (0..3).map(|i| format!("f{i}")).collect();
        let model = fit_gbm(&rows, &labels, &names, &params(5)).unwrap();
        let imp = shap_importance(&model, &rows).unwrap();
        for fi in &imp {
            let j = names.iter().position(|n| *n == fi.feature).unwrap();
            let direct = rows
                .iter()
                .map(|r| treeshap(&model, r).unwrap().values[j].abs())
                .sum::<f64>()
                / rows.len() as f64;
            assert!((direct - fi.mean_abs_shap).abs() < 1e-12);
        }
        let mut reversed = rows.clone();
        reversed.reverse();
        let order: Vec<String> = shap_importance(&model, &reversed)
            .unwrap()
            .into_iter()
            .map(|f| f.feature)
            .collect();
        assert_eq!(order, imp.iter().map(|f| f.feature.clone()).collect::<Vec<_>>());
    }

    #[test]
    fn single_informative_feature_ranks_first() {
        let rows: Vec<Vec<f64>> = (0..60).map(|i| vec![7.0, (i % 2) as f64]).collect();
        let labels: Vec<u8> = (0..60).map(|i| (i % 2) as u8).collect();
        let model = fit_gbm(&rows, &labels, &["const".into(), "signal".into()], &params(1)).unwrap();
        assert_eq!(shap_importance(&model, &rows).unwrap()[0].feature, "signal");
    }

    #[test]
    fn repeated_feature_on_path() {
        let (rows, labels) = random_problem(7, 200, 2);
        let model = fit_gbm(
            &rows,
            &labels,
            &["a".into(), "b".into()],
            &GbmParams {
                max_leaves: 16,
                min_samples_leaf: 2,
                ..params(1)
            },
        )
        .unwrap();
        for row in rows.iter().take(20) {
            let fast = treeshap(&model, row).unwrap().values;
            let slow = brute_force(&model, row);
            for (a, b) in fast.iter().zip(&slow) {
                assert!((a - b).abs() < 1e-9, "{fast:?} vs {slow:?}");
            }
        }
    }

    #[test]
    fn unused_feature_gets_zero() {
        let (mut rows, labels) = random_problem(8, 150, 3);
        for r in &mut rows {
            r.push(3.0);
        }
        let names: Vec<String> = (0..4).map(|i| format!("f{i}")).collect();
        let model = fit_gbm(&rows, &labels, &names, &params(2)).unwrap();
        assert!(!model.used_features().contains(&3));
        for row in rows.iter().take(10) {
            assert_eq!(treeshap(&model, row).unwrap().values[3], 0.0);
        }
    }

    #[test]
    fn importance_is_sorted() {
        let (rows, labels) = random_problem(9, 200, 4);
        let names: Vec<String> = (0..4).map(|i| format!("f{i}")).collect();
        let model = fit_gbm(&rows, &labels, &names, &params(3)).unwrap();
        let imp = shap_importance(&model, &rows).unwrap();
        assert_eq!(imp.len(), 4);
        assert!(imp.windows(2).all(|w| w[0].mean_abs_shap >= w[1].mean_abs_shap));
        assert!(shap_importance(&model, &[]).is_err());
    }

    #[test]
    fn background_covers() {
        let (rows, labels) = random_problem(10, 120, 3);
        let names: Vec<String> = (0..3).map(|i| format!("f{i}")).collect();
        let mut model = fit_gbm(&rows, &labels, &names, &params(4)).unwrap();
        model.recompute_covers(&rows).unwrap();
        let mean_raw = rows.iter().map(|r| model.predict_raw(r).unwrap()).sum::<f64>() / rows.len() as f64;
        assert!((expected_value(&model) - mean_raw).abs() < 1e-9);
        assert_eq!(model.trees[0].nodes[0].cover(), 120.0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn matches_coalition_enumeration(seed in 0u64..10_000, m in 2usize..5) {
            let (rows, labels) = random_problem(seed, 120, m);
            prop_assume!(labels.iter().any(|&y| y == 1) && labels.iter().any(|&y| y == 0));
            let names: Vec<String> = (0..m).map(|i| format!("f{i}")).collect();
            let model = fit_gbm(&rows, &labels, &names, &params(seed)).unwrap();
            for row in rows.iter().take(6) {
                let s = treeshap(&model, row).unwrap();
                let slow = brute_force(&model, row);
                for (a, b) in s.values.iter().zip(&slow) {
                    prop_assert!((a - b).abs() < 1e-9);
                }
                let total = s.base_value + s.values.iter().sum::<f64>();
                prop_assert!((total - model.predict_raw(row).unwrap()).abs() < 1e-9);
            }
        }
    }
}
