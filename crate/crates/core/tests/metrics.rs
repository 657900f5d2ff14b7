mod common;

use std::collections::BTreeSet;

use common::oracles::{check_metrics, metric_instance, metric_suite, MetricInstance};
use common::{reference_metrics, rng};
use mhan_core::eval::{evaluate_scores, held_out_auc, EvalConfig, NdcgAggregation};
use mhan_core::training::EdgeSplit;
use ndarray::array;

#[test]
fn metrics_match_reference_on_random_instances() {
    metric_suite(300, 11).unwrap();
}

#[test]
fn hand_worked_instance() {
    // problem 0: held-out evidence 2 ranks second behind evidence 1
    // (training evidence 0 is excluded); problem 1: held-out 0 ranks first.
    let scores = array![[0.9, 0.8, 0.7, 0.1], [0.6, 0.5, 0.4, 0.3]];
    let inst = MetricInstance {
        scores,
        split: EdgeSplit {
            train: vec![(0, 0), (1, 3)],
            test: vec![(0, 2), (1, 0)],
        },
        k: 1,
    };
    let r = reference_metrics(&inst.scores, &inst.split.train, &inst.split.test, 1);
    assert_eq!(r.hr, 0.5);
    assert_eq!(r.ndcg_mean, 0.5);
    check_metrics(&inst).unwrap();
    let r2 = reference_metrics(&inst.scores, &inst.split.train, &inst.split.test, 2);
    assert_eq!(r2.hr, 1.0);
    assert!((r2.ndcg_mean - (1.0 / 3f64.log2() + 1.0) / 2.0).abs() < 1e-15);
    check_metrics(&MetricInstance { k: 2, ..inst }).unwrap();
}

#[test]
fn report_uses_requested_cutoffs_and_aggregation() {
    let mut r = rng(5);
    for _ in 0..20 {
        let inst = metric_instance(&mut r);
        for ndcg in [NdcgAggregation::PerQueryMean, NdcgAggregation::Global] {
            let cfg = EvalConfig {
                ks: vec![1, 4, 10],
                ndcg,
                exclude_train: true,
            };
            let report = evaluate_scores(&inst.scores, &inst.split, &cfg).unwrap();
            assert_eq!(report.gt, inst.split.test.len());
            let problems: BTreeSet<usize> = inst.split.test.iter().map(|&(p, _)| p).collect();
            assert_eq!(report.queries, problems.len());
            for k in [1, 4, 10] {
                let want = reference_metrics(&inst.scores, &inst.split.train, &inst.split.test, k);
                assert_eq!(report.metrics.hr[&k], want.hr);
                let nd = match ndcg {
                    NdcgAggregation::PerQueryMean => want.ndcg_mean,
                    NdcgAggregation::Global => want.ndcg_global,
                };
                assert!((report.metrics.ndcg[&k] - nd).abs() < 1e-9);
            }
        }
    }
}

#[test]
fn auc_matches_pairwise_count() {
    let mut r = rng(9);
    for _ in 0..50 {
        let inst = metric_instance(&mut r);
        let known = inst.split.all_by_problem();
        let mut total = 0.0;
        let mut counted = 0;
        for &(p, e) in &inst.split.test {
            let negs: Vec<usize> = (0..inst.scores.ncols()).filter(|x| !known[&p].contains(x)).collect();
            if negs.is_empty() {
                continue;
            }
            let mut wins = 0.0;
            for &n in &negs {
                let (a, b) = (inst.scores[[p, e]], inst.scores[[p, n]]);
                wins += if a > b { 1.0 } else if a == b { 0.5 } else { 0.0 };
            }
            total += wins / negs.len() as f64;
            counted += 1;
        }
        match held_out_auc(&inst.scores, &inst.split) {
            Ok(auc) => assert!((auc - total / counted as f64).abs() < 1e-12),
            Err(_) => assert_eq!(counted, 0),
        }
    }
}
