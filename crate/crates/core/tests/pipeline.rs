use std::collections::BTreeSet;

use pfoa_core::datamodel::{load_manifest, pfoa_label};
use pfoa_core::pipeline::{self, read_folds, read_scores, RunConfig};

#[test]
fn every_model_scores_each_included_knee_once_from_its_held_out_fold() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig {
        out: dir.path().to_path_buf(),
        subjects: 40,
        k: 3,
        seed: 21,
        epochs: 2,
        budget: 2,
        bootstrap: 50,
        roi_train_images: 20,
        cnn_widths: vec![2, 4, 4],
        cnn_fc: 8,
        lr0: 0.01,
        ..RunConfig::default()
    };
    pipeline::run_all(&cfg).unwrap();

    let included = load_manifest(&dir.path().join("included.csv")).unwrap();
    let keys: BTreeSet<_> = included.records.iter().map(|r| r.key()).collect();
    let folds = read_folds(&dir.path().join("folds.csv")).unwrap();
    for r in &included.records {
        if let Some(g) = &r.pf_grades {
            assert_eq!(r.pfoa, Some(pfoa_label(g).unwrap()));
        }
    }

    for (slug, _) in pipeline::MODELS {
        let scores = read_scores(&dir.path().join(format!("oof_{slug}.csv"))).unwrap();
        assert_eq!(scores.keys().cloned().collect::<BTreeSet<_>>(), keys, "{slug}");
        for (key, e) in &scores {
            assert_eq!(folds[&key.subject_id], e.fold, "{slug} {key}");
            assert!((0.0..=1.0).contains(&e.score), "{slug} {key} {}", e.score);
            let record = included.records.iter().find(|r| &r.key() == key).unwrap();
            assert_eq!(record.pfoa, Some(e.label == 1));
        }
    }

    let metrics = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    for (_, name) in pipeline::MODELS {
        assert!(
            metrics.lines().any(|l| l.starts_with(&format!("{name},All,"))),
            "{name}"
        );
    }
}
