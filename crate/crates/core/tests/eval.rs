mod common;

use common::PUBLISHED_CSV;
use flea_core::corpus::EmotionLabel::{self, *};
use flea_core::eval::{
    aggregate_folds, compute_metrics, load_metrics, published_reference, render_report, save_metrics, CellKey,
    CellOutcome, FoldRecord, Pooling, ResultsGrid, Score,
};
use proptest::prelude::*;

const ALL: [EmotionLabel; 4] = [Happy, Sad, Neutral, Angry];

#[test]
fn hand_counted_metrics() {
    let m = compute_metrics(&[Happy, Happy, Happy, Sad], &[Happy, Happy, Sad, Sad]).unwrap();
    assert_eq!(m.ua, (2.0 / 3.0 + 1.0) / 2.0);
    assert!((m.ua - 5.0 / 6.0).abs() < 1e-15);
    assert_eq!(m.wa, 0.75);
    assert_eq!(m.confusion[0], [2, 1, 0, 0]);
    assert_eq!(m.recalls()[2], None);
}

#[test]
fn perfect_and_constant_predictors() {
    let truth: Vec<EmotionLabel> = ALL.iter().cycle().take(12).copied().collect();
    let m = compute_metrics(&truth, &truth).unwrap();
    assert_eq!((m.ua, m.wa), (1.0, 1.0));
    assert_eq!(compute_metrics(&truth, &[Angry; 12]).unwrap().ua, 0.25);
    assert!(compute_metrics(&truth, &truth[..11]).is_err());
}

#[test]
fn ua_ignores_class_sizes_when_recalls_match() {
    // Both sets have recalls (1/2, 3/4, 1, 0) but very different class sizes.
    let build = |scale: usize| {
        let mut t = Vec::new();
        let mut p = Vec::new();
        for (class, (hit, n)) in ALL.iter().zip([(1, 2), (3, 4), (1, 1), (0, 1)]) {
            for i in 0..n * scale {
                t.push(*class);
                p.push(if i < hit * scale { *class } else { wrong(*class) });
            }
        }
        compute_metrics(&t, &p).unwrap()
    };
    let (a, b) = (build(1), build(7));
    let expected = (0.5 + 0.75 + 1.0 + 0.0) / 4.0;
    assert!((a.ua - expected).abs() < 1e-12);
    assert!((a.ua - b.ua).abs() < 1e-12);
}

/// Some class other than `c`.
fn wrong(c: EmotionLabel) -> EmotionLabel {
    *ALL.iter().find(|&&x| x != c).unwrap()
}

#[test]
fn fold_aggregation() {
    let m = |ua_hits: u64| {
        let mut confusion = [[0u64; 4]; 4];
        confusion[0][0] = ua_hits;
        confusion[0][1] = 10 - ua_hits;
        flea_core::eval::Metrics::from_confusion(confusion).unwrap()
    };
    let agg = aggregate_folds(&[m(7), m(8), m(9), m(6), m(10)]).unwrap();
    assert!((agg.ua_mean - 0.80).abs() < 1e-12);
    assert_eq!(agg.per_fold.len(), 5);
    let same = aggregate_folds(&[m(7), m(7), m(7), m(7), m(7)]).unwrap();
    assert!((same.ua_mean - 0.7).abs() < 1e-15 && (same.wa_mean - 0.7).abs() < 1e-15);
    assert!(aggregate_folds(&[m(7), m(7), m(7), m(7)]).is_err());
}

#[test]
fn metrics_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("metrics.jsonl");
    let recs: Vec<FoldRecord> = (0..5)
        .map(|f| FoldRecord::new(f, &compute_metrics(&[Happy, Sad, Sad], &[Happy, Sad, ALL[f % 4]]).unwrap()))
        .collect();
    save_metrics(&recs, &path).unwrap();
    assert_eq!(load_metrics(&path).unwrap(), recs);
}

#[test]
fn full_grid_has_eighteen_cells() {
    let mut grid = ResultsGrid::default();
    for layer in [1, 2, 3] {
        for k in [4, 8, 16] {
            for pooling in Pooling::ALL {
                grid.insert(
                    CellKey {
                        tap_layer: layer,
                        num_clusters: k,
                        pooling,
                    },
                    CellOutcome::Done(Score { ua: 0.5, wa: Some(0.5) }),
                );
            }
        }
    }
    assert_eq!(grid.cells.len(), 18);
    let report = render_report(&grid);
    assert_eq!(report.csv.lines().count(), 1 + 9);
    assert_eq!(report.text.lines().count(), 2 + 9);
    assert!(report.text.lines().nth(2).unwrap().contains("50.0/50.0"));
}

#[test]
fn empty_grid_is_headers_only() {
    let report = render_report(&ResultsGrid::default());
    assert_eq!(report.csv.lines().count(), 1);
    assert_eq!(report.text.lines().count(), 2);
}

#[test]
fn failed_and_missing_cells_are_never_filled_in() {
    let mut grid = ResultsGrid::default();
    let key = |pooling| CellKey {
        tap_layer: 2,
        num_clusters: 4,
        pooling,
    };
    grid.insert(key(Pooling::Attention), CellOutcome::Failed { error: "boom".into() });
    let report = render_report(&grid);
    assert_eq!(report.csv.lines().nth(1).unwrap(), "2,4,,,,");
    assert!(report.text.contains("failed"));
}

#[test]
fn published_reference_matches_the_transcribed_table() {
    let report = render_report(&published_reference());
    assert_eq!(report.csv, PUBLISHED_CSV);
    let best = published_reference()
        .get(&CellKey {
            tap_layer: 9,
            num_clusters: 50,
            pooling: Pooling::Attention,
        })
        .cloned();
    assert_eq!(best, Some(CellOutcome::Done(Score { ua: 0.757, wa: Some(0.747) })));
}

fn label() -> impl Strategy<Value = EmotionLabel> {
    (0usize..4).prop_map(|i| ALL[i])
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn metrics_ignore_sample_order(pairs in prop::collection::vec((label(), label()), 1..60), seed in any::<u64>()) {
        use rand::{seq::SliceRandom, SeedableRng};
        let mut shuffled = pairs.clone();
        shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
        let split = |v: &[(EmotionLabel, EmotionLabel)]| -> (Vec<_>, Vec<_>) { v.iter().copied().unzip() };
        let (t, p) = split(&pairs);
        let (ts, ps) = split(&shuffled);
        let a = compute_metrics(&t, &p).unwrap();
        prop_assert_eq!(&a, &compute_metrics(&ts, &ps).unwrap());
        let correct = t.iter().zip(&p).filter(|(x, y)| x == y).count();
        prop_assert_eq!(a.wa, correct as f64 / t.len() as f64);
        prop_assert!((0.0..=1.0).contains(&a.ua));
    }
}
