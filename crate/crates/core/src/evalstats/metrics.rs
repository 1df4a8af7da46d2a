use rand::Rng;
use statrs::function::erf::erfc;

use crate::imaging::percentile_of_sorted;
use crate::rng;
use crate::{Error, Result};

fn check(scores: &[f64], labels: &[u8]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} scores, {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Metric("non-finite score".into()));
    }
    let pos = labels.iter().filter(|&&y| y == 1).count();
    Ok((pos, labels.len() - pos))
}

/// Ranks (1-based) with ties sharing their mean rank.
fn midranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Indices sorted by descending score, grouped into blocks of equal score.
fn tie_blocks(scores: &[f64]) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut blocks: Vec<Vec<usize>> = Vec::new();
    for i in idx {
        match blocks.last_mut() {
            Some(b) if scores[b[0]] == scores[i] => b.push(i),
            _ => blocks.push(vec![i]),
        }
    }
    blocks
}

/// Mann-Whitney AUC; tied positive/negative pairs count one half.
pub fn auc_of(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let (p, n) = check(scores, labels)?;
    if p == 0 || n == 0 {
        return Err(Error::Metric("AUC needs both classes".into()));
    }
    let ranks = midranks(scores);
    let rank_sum: f64 = ranks.iter().zip(labels).filter(|(_, &y)| y == 1).map(|(r, _)| r).sum();
    let (p, n) = (p as f64, n as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Roc {
    pub auc: f64,
    /// `(false positive rate, true positive rate)` from `(0, 0)` to `(1, 1)`.
    pub points: Vec<(f64, f64)>,
}

pub fn roc_auc(scores: &[f64], labels: &[u8]) -> Result<Roc> {
    let auc = auc_of(scores, labels)?;
    let (p, n) = check(scores, labels)?;
    let mut points = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    for block in tie_blocks(scores) {
        for &i in &block {
            if labels[i] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
        }
        points.push((fp as f64 / n as f64, tp as f64 / p as f64));
    }
    Ok(Roc { auc, points })
}

/// Non-interpolated average precision; tied scores form one threshold.
pub fn ap_of(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let (p, _) = check(scores, labels)?;
    if p == 0 {
        return Err(Error::Metric("average precision needs a positive".into()));
    }
    let (mut tp, mut seen, mut last_recall, mut ap) = (0usize, 0usize, 0.0, 0.0);
    for block in tie_blocks(scores) {
        seen += block.len();
        tp += block.iter().filter(|&&i| labels[i] == 1).count();
        let recall = tp as f64 / p as f64;
        ap += (recall - last_recall) * (tp as f64 / seen as f64);
        last_recall = recall;
    }
    Ok(ap)
}

pub fn average_precision(scores: &[f64], labels: &[u8]) -> Result<f64> {
    ap_of(scores, labels)
}

/// `(recall, precision)` per threshold block, highest threshold first.
pub fn pr_curve(scores: &[f64], labels: &[u8]) -> Result<Vec<(f64, f64)>> {
    let (p, _) = check(scores, labels)?;
    if p == 0 {
        return Err(Error::Metric("precision-recall needs a positive".into()));
    }
    let (mut tp, mut seen) = (0usize, 0usize);
    Ok(tie_blocks(scores)
        .into_iter()
        .map(|block| {
            seen += block.len();
            tp += block.iter().filter(|&&i| labels[i] == 1).count();
            (tp as f64 / p as f64, tp as f64 / seen as f64)
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    Auc,
    Ap,
}

impl Metric {
    pub fn compute(self, scores: &[f64], labels: &[u8]) -> Result<f64> {
        match self {
            Metric::Auc => auc_of(scores, labels),
            Metric::Ap => ap_of(scores, labels),
        }
    }
}

/// Sorted metric values over `n` stratified resamples: positives and
/// negatives are each drawn with replacement, keeping the class counts.
/// Resample `i` draws from its own stream of `seed`.
pub fn bootstrap_distribution(scores: &[f64], labels: &[u8], metric: Metric, n: usize, seed: u64) -> Result<Vec<f64>> {
    metric.compute(scores, labels)?;
    let pos: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == 1).collect();
    let neg: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] != 1).collect();
    let mut s = Vec::with_capacity(labels.len());
    let mut y = Vec::with_capacity(labels.len());
    let mut out = Vec::with_capacity(n);
    for it in 0..n {
        let mut r = rng::stream(seed, it as u64);
        s.clear();
        y.clear();
        for (class, label) in [(&pos, 1u8), (&neg, 0u8)] {
            for _ in 0..class.len() {
                s.push(scores[class[r.random_range(0..class.len())]]);
                y.push(label);
            }
        }
        out.push(metric.compute(&s, &y)?);
    }
    out.sort_by(f64::total_cmp);
    Ok(out)
}

/// Central `level` interval of a sorted sample, linearly interpolated.
pub fn percentile_ci(sorted: &[f64], level: f64) -> Result<(f64, f64)> {
    if sorted.is_empty() {
        return Err(Error::Metric("empty bootstrap distribution".into()));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::validation("confidence level must be in (0, 1)"));
    }
    let tail = (1.0 - level) / 2.0;
    Ok((
        percentile_of_sorted(sorted, 100.0 * tail),
        percentile_of_sorted(sorted, 100.0 * (1.0 - tail)),
    ))
}

/// 95% percentile interval from `n` stratified bootstrap resamples.
pub fn bootstrap_ci(scores: &[f64], labels: &[u8], metric: Metric, n: usize, seed: u64) -> Result<(f64, f64)> {
    percentile_ci(&bootstrap_distribution(scores, labels, metric, n, seed)?, 0.95)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DelongResult {
    pub auc_a: f64,
    pub auc_b: f64,
    pub z: f64,
    pub p_value: f64,
    pub variance: f64,
    /// Zero variance with a nonzero difference; `z` is infinite and `p` is 0.
    pub degenerate: bool,
}

/// Structural components of one score vector: per-positive and
/// per-negative placement values.
fn placements(pos: &[f64], neg: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let (m, n) = (pos.len(), neg.len());
    let all: Vec<f64> = pos.iter().chain(neg).copied().collect();
    let tz = midranks(&all);
    let tx = midranks(pos);
    let ty = midranks(neg);
    let v10 = (0..m).map(|i| (tz[i] - tx[i]) / n as f64).collect();
    let v01 = (0..n).map(|j| 1.0 - (tz[m + j] - ty[j]) / m as f64).collect();
    (v10, v01)
}

fn cov(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>() / (n - 1.0)
}

/// DeLong's paired test of two correlated AUCs on the same knees.
pub fn delong_test(scores_a: &[f64], scores_b: &[f64], labels: &[u8]) -> Result<DelongResult> {
    if scores_a.len() != scores_b.len() {
        return Err(Error::Shape("score vectors differ in length".into()));
    }
    let (m, n) = check(scores_a, labels)?;
    check(scores_b, labels)?;
    if m < 2 || n < 2 {
        return Err(Error::Metric("DeLong's test needs two knees of each class".into()));
    }
    let split = |s: &[f64]| -> (Vec<f64>, Vec<f64>) {
        let pos = s.iter().zip(labels).filter(|(_, &y)| y == 1).map(|(v, _)| *v).collect();
        let neg = s.iter().zip(labels).filter(|(_, &y)| y != 1).map(|(v, _)| *v).collect();
        (pos, neg)
    };
    let (pa, na) = split(scores_a);
    let (pb, nb) = split(scores_b);
    let (a10, a01) = placements(&pa, &na);
    let (b10, b01) = placements(&pb, &nb);
    let auc_a = a10.iter().sum::<f64>() / m as f64;
    let auc_b = b10.iter().sum::<f64>() / m as f64;
    let s10 = cov(&a10, &a10) + cov(&b10, &b10) - 2.0 * cov(&a10, &b10);
    let s01 = cov(&a01, &a01) + cov(&b01, &b01) - 2.0 * cov(&a01, &b01);
    let variance = (s10 / m as f64 + s01 / n as f64).max(0.0);
    let diff = auc_a - auc_b;
    let (z, p_value, degenerate) = if variance > 0.0 {
        let z = diff / variance.sqrt();
        (z, erfc(z.abs() / std::f64::consts::SQRT_2), false)
    } else if diff == 0.0 {
        (0.0, 1.0, false)
    } else {
        (diff.signum() * f64::INFINITY, 0.0, true)
    };
    Ok(DelongResult {
        auc_a,
        auc_b,
        z,
        p_value,
        variance,
        degenerate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn pair_count_auc(s: &[f64], y: &[u8]) -> f64 {
        let (mut num, mut den) = (0.0, 0.0);
        for i in 0..s.len() {
            for j in 0..s.len() {
                if y[i] == 1 && y[j] == 0 {
                    den += 1.0;
                    num += if s[i] > s[j] {
                        1.0
                    } else if s[i] == s[j] {
                        0.5
                    } else {
                        0.0
                    };
                }
            }
        }
        num / den
    }

    /// Average precision by enumerating every distinct threshold.
    fn threshold_ap(s: &[f64], y: &[u8]) -> f64 {
        let mut th: Vec<f64> = s.to_vec();
        th.sort_by(|a, b| b.total_cmp(a));
        th.dedup();
        let p = y.iter().filter(|&&v| v == 1).count() as f64;
        let mut last_r = 0.0;
        let mut ap = 0.0;
        for t in th {
            let sel: Vec<usize> = (0..s.len()).filter(|&i| s[i] >= t).collect();
            let tp = sel.iter().filter(|&&i| y[i] == 1).count() as f64;
            let r = tp / p;
            ap += (r - last_r) * tp / sel.len() as f64;
            last_r = r;
        }
        ap
    }

    #[test]
    fn auc_examples() {
        assert_eq!(auc_of(&[0.9, 0.8, 0.3, 0.2], &[1, 1, 0, 0]).unwrap(), 1.0);
        assert_eq!(auc_of(&[0.5; 6], &[1, 0, 1, 0, 0, 0]).unwrap(), 0.5);
        let s = [0.9, 0.6, 0.4, 0.3];
        let y = [1, 0, 1, 0];
        assert_eq!(auc_of(&s, &y).unwrap(), pair_count_auc(&s, &y));
        assert_eq!(auc_of(&s, &y).unwrap(), 0.75);
        assert!(auc_of(&[0.1, 0.2], &[1, 1]).is_err());
    }

    #[test]
    fn roc_points_span_unit_square() {
        let r = roc_auc(&[0.9, 0.6, 0.6, 0.3], &[1, 0, 1, 0]).unwrap();
        assert_eq!(r.points.first(), Some(&(0.0, 0.0)));
        assert_eq!(r.points.last(), Some(&(1.0, 1.0)));
        let trapezoid: f64 = r
            .points
            .windows(2)
            .map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0)
            .sum();
        assert!((trapezoid - r.auc).abs() < 1e-15);
    }

    #[test]
    fn ap_examples() {
        assert_eq!(ap_of(&[0.9, 0.8, 0.3, 0.2], &[1, 1, 0, 0]).unwrap(), 1.0);
        assert_eq!(ap_of(&[0.3; 5], &[1, 0, 1, 0, 0]).unwrap(), 2.0 / 5.0);
        let ap = ap_of(&[0.4, 0.3, 0.2, 0.1], &[1, 0, 1, 0]).unwrap();
        assert!((ap - 5.0 / 6.0).abs() < 1e-15);
        assert!(ap_of(&[0.1, 0.2], &[0, 0]).is_err());
    }

    #[test]
    fn pr_curve_ends_at_full_recall() {
        let c = pr_curve(&[0.4, 0.3, 0.2, 0.1], &[1, 0, 1, 0]).unwrap();
        assert_eq!(c.last().unwrap().0, 1.0);
        assert_eq!(c[0], (0.5, 1.0));
    }

    #[test]
    fn bootstrap_of_perfect_classifier() {
        let s = [0.9, 0.8, 0.7, 0.2, 0.1];
        let y = [1, 1, 1, 0, 0];
        assert_eq!(bootstrap_ci(&s, &y, Metric::Auc, 500, 1).unwrap(), (1.0, 1.0));
        assert_eq!(bootstrap_ci(&s, &y, Metric::Ap, 500, 1).unwrap(), (1.0, 1.0));
    }

    #[test]
    fn bootstrap_matches_enumeration() {
        // 2 positives, 2 negatives: 16 equally likely stratified resamples
        let s = [0.8, 0.3, 0.5, 0.1];
        let y = [1, 1, 0, 0];
        let pos = [0.8, 0.3];
        let neg = [0.5, 0.1];
        let mut exact = Vec::new();
        for a in 0..2 {
            for b in 0..2 {
                for c in 0..2 {
                    for d in 0..2 {
                        let ss = [pos[a], pos[b], neg[c], neg[d]];
                        exact.push(auc_of(&ss, &[1, 1, 0, 0]).unwrap());
                    }
                }
            }
        }
        exact.sort_by(f64::total_cmp);
        // percentiles of the discrete distribution: P(X <= x) crossings
        let quantile = |p: f64| -> f64 {
            let k = ((p * 16.0).ceil() as usize).clamp(1, 16);
            exact[k - 1]
        };
        let dist = bootstrap_distribution(&s, &y, Metric::Auc, 2000, 9).unwrap();
        let (lo, hi) = percentile_ci(&dist, 0.95).unwrap();
        assert!((lo - quantile(0.025)).abs() <= 0.02, "{lo}");
        assert!((hi - quantile(0.975)).abs() <= 0.02, "{hi}");
        // and the empirical frequencies match the enumeration
        for v in [0.0, 0.25, 0.5, 0.75, 1.0] {
            let f_exact = exact.iter().filter(|&&x| x == v).count() as f64 / 16.0;
            let f_mc = dist.iter().filter(|&&x| x == v).count() as f64 / 2000.0;
            assert!((f_exact - f_mc).abs() < 0.03, "{v}: {f_exact} vs {f_mc}");
        }
    }

    #[test]
    fn ci_nesting_and_determinism() {
        let mut r = rng::seeded(5);
        let y: Vec<u8> = (0..80).map(|i| u8::from(i % 3 == 0)).collect();
        let s: Vec<f64> = y.iter().map(|&v| v as f64 * 0.7 + r.random::<f64>()).collect();
        let dist = bootstrap_distribution(&s, &y, Metric::Auc, 400, 3).unwrap();
        let (l95, h95) = percentile_ci(&dist, 0.95).unwrap();
        let (l90, h90) = percentile_ci(&dist, 0.90).unwrap();
        assert!(l95 <= l90 && h90 <= h95);
        let point = auc_of(&s, &y).unwrap();
        assert!(l95 <= point && point <= h95);
        assert_eq!(dist, bootstrap_distribution(&s, &y, Metric::Auc, 400, 3).unwrap());
    }

    #[test]
    fn delong_identical_and_extreme() {
        let s = [0.9, 0.2, 0.7, 0.4, 0.6, 0.1];
        let y = [1, 0, 1, 0, 1, 0];
        let d = delong_test(&s, &s, &y).unwrap();
        assert_eq!((d.z, d.p_value), (0.0, 1.0));

        let y: Vec<u8> = (0..40).map(|i| u8::from(i < 20)).collect();
        let a: Vec<f64> = y.iter().map(|&v| v as f64).collect();
        let b: Vec<f64> = y.iter().map(|&v| 1.0 - v as f64).collect();
        let d = delong_test(&a, &b, &y).unwrap();
        assert!(d.p_value < 1e-6);
        assert!(d.degenerate);

        let mut r = rng::seeded(1);
        let a2: Vec<f64> = a.iter().map(|v| v + r.random::<f64>() * 1.5).collect();
        let b2: Vec<f64> = b.iter().map(|v| v + r.random::<f64>() * 1.5).collect();
        let d = delong_test(&a2, &b2, &y).unwrap();
        assert!(!d.degenerate && d.p_value < 1e-6);
    }

    #[test]
    fn delong_variance_agrees_with_bootstrap() {
        let mut r = rng::seeded(77);
        let n = 200;
        let y: Vec<u8> = (0..n).map(|i| u8::from(i % 4 == 0)).collect();
        let latent: Vec<f64> = y.iter().map(|&v| v as f64 + r.random::<f64>() * 1.5).collect();
        let a: Vec<f64> = latent.iter().map(|l| l + r.random::<f64>() * 0.8).collect();
        let b: Vec<f64> = latent.iter().map(|l| l + r.random::<f64>() * 1.6).collect();
        let d = delong_test(&a, &b, &y).unwrap();

        let pos: Vec<usize> = (0..n).filter(|&i| y[i] == 1).collect();
        let neg: Vec<usize> = (0..n).filter(|&i| y[i] == 0).collect();
        let iters = 2000;
        let mut diffs = Vec::with_capacity(iters);
        for it in 0..iters {
            let mut g = rng::stream(123, it as u64);
            let mut idx: Vec<usize> = pos.iter().map(|_| pos[g.random_range(0..pos.len())]).collect();
            idx.extend(neg.iter().map(|_| neg[g.random_range(0..neg.len())]));
            let yy: Vec<u8> = idx.iter().map(|&i| y[i]).collect();
            let aa: Vec<f64> = idx.iter().map(|&i| a[i]).collect();
            let bb: Vec<f64> = idx.iter().map(|&i| b[i]).collect();
            diffs.push(auc_of(&aa, &yy).unwrap() - auc_of(&bb, &yy).unwrap());
        }
        let mean = diffs.iter().sum::<f64>() / iters as f64;
        let var = diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (iters - 1) as f64;
        assert!(
            (d.variance / var - 1.0).abs() < 0.25,
            "delong {} bootstrap {var}",
            d.variance
        );
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn auc_matches_pair_count(s in prop::collection::vec(0u8..8, 4..40), seed in 0u64..100) {
            let mut r = rng::seeded(seed);
            let y: Vec<u8> = s.iter().map(|_| u8::from(r.random::<bool>())).collect();
            prop_assume!(y.contains(&0) && y.contains(&1));
            let s: Vec<f64> = s.iter().map(|&v| v as f64).collect();
            prop_assert!((auc_of(&s, &y).unwrap() - pair_count_auc(&s, &y)).abs() < 1e-12);
            prop_assert!((ap_of(&s, &y).unwrap() - threshold_ap(&s, &y)).abs() < 1e-12);
            // strictly increasing transform
            let t: Vec<f64> = s.iter().map(|v| (v * 0.7).exp() - 3.0).collect();
            prop_assert_eq!(auc_of(&s, &y).unwrap(), auc_of(&t, &y).unwrap());
        }

        #[test]
        fn reversed_ranking_complements(seed in 0u64..1000, n in 4usize..50) {
            let mut r = rng::seeded(seed);
            let y: Vec<u8> = (0..n).map(|_| u8::from(r.random::<bool>())).collect();
            prop_assume!(y.contains(&0) && y.contains(&1));
            let s: Vec<f64> = (0..n).map(|_| r.random::<f64>()).collect();
            let neg: Vec<f64> = s.iter().map(|v| -v).collect();
            prop_assert!((auc_of(&s, &y).unwrap() + auc_of(&neg, &y).unwrap() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn constant_scores_ap_is_prevalence(y in prop::collection::vec(0u8..2, 1..60)) {
            prop_assume!(y.contains(&1));
            let s = vec![0.25; y.len()];
            let prev = y.iter().filter(|&&v| v == 1).count() as f64 / y.len() as f64;
            prop_assert_eq!(ap_of(&s, &y).unwrap(), prev);
        }

        #[test]
        fn delong_is_symmetric(seed in 0u64..1000, n in 6usize..60) {
            let mut r = rng::seeded(seed);
            let y: Vec<u8> = (0..n).map(|i| u8::from(i % 2 == 0)).collect();
            let a: Vec<f64> = y.iter().map(|&v| v as f64 * 0.5 + r.random::<f64>()).collect();
            let b: Vec<f64> = (0..n).map(|_| r.random::<f64>()).collect();
            let ab = delong_test(&a, &b, &y).unwrap();
            let ba = delong_test(&b, &a, &y).unwrap();
            prop_assert_eq!(ab.z, -ba.z);
            prop_assert_eq!(ab.p_value, ba.p_value);
        }
    }
}
