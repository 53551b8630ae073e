use std::collections::BTreeMap;

use proptest::prelude::*;

use super::*;

fn s(v: &[&str]) -> Vec<String> {
    v.iter().map(|x| x.to_string()).collect()
}

#[test]
fn perfect_classification() {
    let labels = s(&["A", "B", "C"]);
    let g = s(&["A", "B", "C", "A"]);
    assert_eq!(classify_score(&g, &g, &labels).unwrap(), (1.0, 1.0));
}

#[test]
fn binary_confusion_by_hand() {
    let labels = s(&["0", "1"]);
    let (acc, f1) = classify_score(&s(&["1", "1", "0", "0"]), &s(&["1", "0", "1", "0"]), &labels).unwrap();
    assert_eq!(acc, 0.5);
    assert!((f1 - 0.5).abs() < 1e-15);
}

#[test]
fn absent_label_scores_zero_f1() {
    let labels = s(&["A", "B", "C"]);
    let g = s(&["A", "B"]);
    let (acc, f1) = classify_score(&g, &g, &labels).unwrap();
    assert_eq!(acc, 1.0);
    assert!((f1 - 2.0 / 3.0).abs() < 1e-15);
}

#[test]
fn invalid_predictions_are_misses() {
    let labels = s(&["A", "B"]);
    let (acc, f1) = classify_score(&s(&["?", "zz"]), &s(&["A", "B"]), &labels).unwrap();
    assert_eq!((acc, f1), (0.0, 0.0));
    // one correct A, one invalid for gold A: F1(A) = 2/(2+0+1)
    let (acc, f1) = classify_score(&s(&["A", "x"]), &s(&["A", "A"]), &labels).unwrap();
    assert_eq!(acc, 0.5);
    assert!((f1 - (2.0 / 3.0) / 2.0).abs() < 1e-15);
}

#[test]
fn length_mismatch_rejected() {
    let labels = s(&["A"]);
    assert!(classify_score(&s(&["A"]), &s(&["A", "A"]), &labels).is_err());
    assert!(ordinal_score(&s(&["1"]), &s(&[])).is_err());
    assert!(rouge_corpus(&s(&["a"]), &s(&[])).is_err());
}

#[test]
fn ordinal_by_hand() {
    let (mae, rmse) = ordinal_score(&s(&["1", "5"]), &s(&["2", "3"])).unwrap();
    assert_eq!(mae, 1.5);
    assert!((rmse - 2.5f64.sqrt()).abs() < 1e-15);
    assert_eq!(ordinal_score(&s(&["4", "2"]), &s(&["4", "2"])).unwrap(), (0.0, 0.0));
}

#[test]
fn unparsable_rating_is_midpoint() {
    let (mae, _) = ordinal_score(&s(&["banana", "9"]), &s(&["5", "1"])).unwrap();
    assert_eq!(mae, 2.0);
}

#[test]
fn rouge_examples() {
    assert_eq!(rouge("the Cat sat", "the cat sat"), (1.0, 1.0));
    let (r1, rl) = rouge("a b c", "a b d");
    assert!((r1 - 2.0 / 3.0).abs() < 1e-15);
    assert!((rl - 2.0 / 3.0).abs() < 1e-15);
    assert_eq!(rouge("", "a"), (0.0, 0.0));
    assert_eq!(rouge("a", "  "), (0.0, 0.0));
    assert_eq!(rouge("", ""), (1.0, 1.0));
}

#[test]
fn rouge_clips_and_orders() {
    // unigram overlap is clipped at reference counts
    let (r1, _) = rouge("a a a", "a b");
    let p = 1.0 / 3.0;
    let r = 0.5;
    assert!((r1 - 2.0 * p * r / (p + r)).abs() < 1e-15);
    // word order matters only for the LCS term
    let (r1, rl) = rouge("c b a", "a b c");
    assert_eq!(r1, 1.0);
    assert!((rl - 1.0 / 3.0).abs() < 1e-15);
}

#[test]
fn rouge_monotone_under_deletion() {
    let corpus = [
        ("alpha beta gamma delta", "alpha gamma delta epsilon"),
        ("x y z x y", "x y q"),
        ("x y z", "x y x q"),
        ("one two three", "three two one"),
        ("abc def ghi jkl", "def jkl mno"),
    ];
    for (cand, reference) in corpus {
        let toks: Vec<&str> = cand.split_whitespace().collect();
        let refs: Vec<&str> = reference.split_whitespace().collect();
        let base = rouge(cand, reference);
        for i in 0..toks.len() {
            // only tokens whose every copy is matched under clipping
            let in_cand = toks.iter().filter(|t| **t == toks[i]).count();
            let in_ref = refs.iter().filter(|t| **t == toks[i]).count();
            if in_ref == 0 || in_cand > in_ref {
                continue;
            }
            let mut shorter = toks.clone();
            shorter.remove(i);
            let after = rouge(&shorter.join(" "), reference);
            assert!(after.0 <= base.0 + 1e-15, "{cand} minus {}", toks[i]);
        }
    }
}

#[test]
fn aggregation_examples() {
    let cls = RawMetrics::Classification {
        accuracy: 0.428,
        f1: 0.305,
    };
    assert!((aggregate_task(TaskKind::Classification, &cls).unwrap() - 0.3665).abs() < 1e-12);
    let ord = RawMetrics::Ordinal {
        mae: 0.339,
        rmse: 0.697,
    };
    assert!((aggregate_task(TaskKind::Ordinal, &ord).unwrap() - 0.482).abs() < 1e-12);
    let perfect = RawMetrics::Ordinal { mae: 0.0, rmse: 0.0 };
    assert_eq!(aggregate_task(TaskKind::Ordinal, &perfect).unwrap(), 1.0);
    assert!(aggregate_task(TaskKind::Generation, &ord).is_err());
    let bad = RawMetrics::Ordinal { mae: 2.0, rmse: 2.5 };
    assert!(aggregate_task(TaskKind::Ordinal, &bad).unwrap() < 0.0);
}

#[test]
fn overall_average_examples() {
    let avg = overall_average(&[0.497, 0.3665, 0.482, 0.130, 0.390, 0.401]).unwrap();
    assert!((avg - 0.378).abs() < 0.0015);
    assert_eq!(overall_average(&[0.25]).unwrap(), 0.25);
    assert!(overall_average(&[]).is_err());
}

#[test]
fn printed_metric_tables_reproduce_averages() {
    let tables = PrintedTables::load().unwrap();
    let mut rows = 0;
    for t in &tables.metric_tables {
        for (method, got, printed) in t.averages_from_metrics().unwrap() {
            assert!((got - printed).abs() <= 0.0015, "{method}: {got} vs {printed}");
            rows += 1;
        }
    }
    assert_eq!(rows, 8);
}

#[test]
fn printed_score_tables_reproduce_averages() {
    let tables = PrintedTables::load().unwrap();
    let mut rows = 0;
    for t in &tables.score_tables {
        for (method, got, printed) in t.averages_from_scores().unwrap() {
            assert!((got - printed).abs() <= 0.0015, "{method}: {got} vs {printed}");
            rows += 1;
        }
    }
    assert!(rows >= 2);
}

#[test]
fn adaptability_examples() {
    assert_eq!(adaptability(0.25, 0.5).unwrap(), 0.5);
    assert_eq!(adaptability(0.7, 0.5).unwrap(), 1.4);
    assert!(adaptability(0.3, 0.0).is_err());
    assert!(adaptability(0.3, -0.1).is_err());
    assert!(adaptability(0.3, f64::NAN).is_err());
    let same = AdaptabilityResult::new("t", "t", 0.37, 0.37).unwrap();
    assert_eq!(same.ratio, 1.0);
}

fn timing(train: f64) -> BTreeMap<String, f64> {
    BTreeMap::from([("train".to_string(), train)])
}

#[test]
fn cost_table_normalizes_to_max() {
    let table = cost_report(&[
        CostEntry::adam("ours", 4608, timing(2.0)),
        CostEntry::adam("full", 8192, timing(4.0)),
    ])
    .unwrap();
    let full = table.row("full").unwrap();
    let ours = table.row("ours").unwrap();
    assert_eq!(full.composite, 1.0);
    assert_eq!(ours.trainable as f64 / full.trainable as f64, 0.5625);
    assert_eq!(ours.optimizer_state, 2 * 4608);
    assert!((ours.memory_norm - 0.5625).abs() < 1e-15);
    assert!((ours.composite - 0.5 * (0.5625 + 0.5)).abs() < 1e-15);
}

#[test]
fn cost_table_zero_time() {
    let table = cost_report(&[CostEntry::adam("a", 10, timing(0.0))]).unwrap();
    assert_eq!(table.rows[0].time_norm, 0.0);
    assert_eq!(table.rows[0].trainable, 10);
    assert!(cost_report(&[]).is_err());
    assert!(cost_report(&[CostEntry::adam("a", 1, timing(f64::NAN))]).is_err());
}

#[test]
fn report_recomputes() {
    let r = MetricReport::new(
        "x",
        vec![
            (
                "c".into(),
                RawMetrics::Classification {
                    accuracy: 0.5,
                    f1: 0.25,
                },
            ),
            ("o".into(), RawMetrics::Ordinal { mae: 1.0, rmse: 1.5 }),
        ],
    )
    .unwrap();
    assert_eq!(r.average, (0.375 + -0.25) / 2.0);
    r.verify().unwrap();
    let mut tampered = r.clone();
    tampered.tasks[0].score = 0.9;
    assert!(tampered.verify().is_err());
    let json = serde_json::to_string(&r).unwrap();
    let back: MetricReport = serde_json::from_str(&json).unwrap();
    assert_eq!(back, r);
    assert!(r.to_table().contains("average"));
}

fn label() -> impl Strategy<Value = String> {
    prop::sample::select(vec!["A", "B", "C", "bad"]).prop_map(str::to_string)
}

proptest! {
    #[test]
    fn classify_in_unit_range(pairs in prop::collection::vec((label(), 0usize..3), 1..40)) {
        let labels = s(&["A", "B", "C"]);
        let preds: Vec<String> = pairs.iter().map(|p| p.0.clone()).collect();
        let golds: Vec<String> = pairs.iter().map(|p| labels[p.1].clone()).collect();
        let (acc, f1) = classify_score(&preds, &golds, &labels).unwrap();
        prop_assert!((0.0..=1.0).contains(&acc));
        prop_assert!((0.0..=1.0).contains(&f1));
    }

    #[test]
    fn rmse_dominates_mae(pairs in prop::collection::vec((0i64..7, 1i64..6), 1..40)) {
        let preds: Vec<String> = pairs.iter().map(|p| p.0.to_string()).collect();
        let golds: Vec<String> = pairs.iter().map(|p| p.1.to_string()).collect();
        let (mae, rmse) = ordinal_score(&preds, &golds).unwrap();
        prop_assert!(mae >= 0.0);
        prop_assert!(rmse + 1e-12 >= mae);
    }

    #[test]
    fn rouge_bounded_and_self_one(a in "[a-d ]{0,24}", b in "[a-d ]{0,24}") {
        let (r1, rl) = rouge(&a, &b);
        prop_assert!((0.0..=1.0).contains(&r1));
        prop_assert!((0.0..=1.0).contains(&rl));
        prop_assert!(rl <= r1 + 1e-12);
        prop_assert_eq!(rouge(&a, &a), (1.0, 1.0));
    }

    #[test]
    fn self_adaptability_is_one(v in 1e-6f64..10.0) {
        prop_assert_eq!(AdaptabilityResult::new("s", "s", v, v).unwrap().ratio, 1.0);
    }
}
