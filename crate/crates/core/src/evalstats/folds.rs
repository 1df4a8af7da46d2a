use std::collections::BTreeMap;

use rand::seq::SliceRandom;

use crate::datamodel::DatasetManifest;
use crate::rng;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldAssignment {
    pub k: usize,
    pub folds: BTreeMap<String, usize>,
}

impl FoldAssignment {
    pub fn fold_of(&self, subject: &str) -> Result<usize> {
        self.folds
            .get(subject)
            .copied()
            .ok_or_else(|| Error::validation(format!("subject {subject} has no fold")))
    }

    pub fn subjects_in(&self, fold: usize) -> Vec<&str> {
        self.folds
            .iter()
            .filter(|(_, &f)| f == fold)
            .map(|(s, _)| s.as_str())
            .collect()
    }
}

/// Assigns every group to one of `k` folds, balancing positive and negative
/// row counts. Returns one fold per row. Groups are visited in a seeded
/// random order, largest first, and each goes to the fold where it adds the
/// least imbalance; ties prefer the fold with fewer rows, then the lower
/// index. The result does not depend on row order.
pub fn group_kfold_ids(groups: &[String], labels: &[u8], k: usize, seed: u64) -> Result<Vec<usize>> {
    if groups.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} groups, {} labels",
            groups.len(),
            labels.len()
        )));
    }
    if k < 2 {
        return Err(Error::validation("k must be at least 2"));
    }
    let mut counts: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
    for (g, &y) in groups.iter().zip(labels) {
        let c = counts.entry(g.as_str()).or_default();
        if y == 1 {
            c.0 += 1;
        } else {
            c.1 += 1;
        }
    }
    if counts.len() < k {
        return Err(Error::validation(format!(
            "{} subjects cannot fill {k} folds",
            counts.len()
        )));
    }
    let mut order: Vec<(&str, (usize, usize))> = counts.into_iter().collect();
    order.shuffle(&mut rng::seeded(rng::derive(seed, "group-kfold")));
    order.sort_by_key(|(_, (p, n))| std::cmp::Reverse(p + n));

    let mut pos = vec![0usize; k];
    let mut neg = vec![0usize; k];
    let mut assigned: BTreeMap<&str, usize> = BTreeMap::new();
    for (g, (p, n)) in order {
        let f = (0..k)
            .min_by_key(|&f| (p * pos[f] + n * neg[f], pos[f] + neg[f], f))
            .expect("k >= 2");
        pos[f] += p;
        neg[f] += n;
        assigned.insert(g, f);
    }
    Ok(groups.iter().map(|g| assigned[g.as_str()]).collect())
}

/// Subject-wise stratified k-fold split of a labelled manifest.
pub fn stratified_group_kfold(manifest: &DatasetManifest, k: usize, seed: u64) -> Result<FoldAssignment> {
    let mut groups = Vec::with_capacity(manifest.len());
    let mut labels = Vec::with_capacity(manifest.len());
    for r in &manifest.records {
        let y = r
            .pfoa
            .ok_or_else(|| Error::validation(format!("{} has no PFOA label", r.key())))?;
        groups.push(r.subject_id.clone());
        labels.push(u8::from(y));
    }
    let ids = group_kfold_ids(&groups, &labels, k, seed)?;
    Ok(FoldAssignment {
        k,
        folds: groups.into_iter().zip(ids).collect(),
    })
}
