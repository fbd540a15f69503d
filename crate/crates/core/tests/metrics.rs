mod common;

use common::{check_metric_oracles, micro_cases, oracle_bleu1, oracle_cider, oracle_rouge_l};
use proptest::prelude::*;
use stlr::evalsuite;

#[test]
fn overlap_metrics_and_ratios_match_oracles() {
    check_metric_oracles().assert();
}

#[test]
fn toy_corpus_cider_matches_hand_tf_idf() {
    let refs: Vec<String> = ["a b c", "a b d", "c d e", "b c d e", "e"].iter().map(|s| s.to_string()).collect();
    let hyps: Vec<String> = ["a b", "a b d", "c e", "b c d", "a"].iter().map(|s| s.to_string()).collect();
    let got = evalsuite::cider(&hyps, &refs).unwrap();
    assert!((got - oracle_cider(&hyps, &refs)).abs() < 1e-9);
    assert_eq!(evalsuite::cider(&refs, &refs).unwrap(), 10.0);
}

#[test]
fn aggregate_ratios_ignore_order() {
    let m = [0.8, 0.3, 0.5, 0.9, 0.1];
    let b = [0.2, 0.7, 0.5, 0.4, 0.6];
    let perm = [3, 0, 4, 2, 1];
    let pm: Vec<f64> = perm.iter().map(|&i| m[i]).collect();
    let pb: Vec<f64> = perm.iter().map(|&i| b[i]).collect();
    assert_eq!(evalsuite::better_ratio(&m, &b).unwrap(), evalsuite::better_ratio(&pm, &pb).unwrap());
    assert_eq!(evalsuite::ris_from_scores(&m, 0.5).unwrap(), evalsuite::ris_from_scores(&pm, 0.5).unwrap());
}

#[test]
fn more_micro_cases() {
    for (h, r) in micro_cases(99, 200) {
        assert!((evalsuite::bleu1(&h, &r).unwrap() - oracle_bleu1(&h, &r)).abs() < 1e-9, "{h:?} {r:?}");
        assert!((evalsuite::rouge_l(&h, &r).unwrap() - oracle_rouge_l(&h, &r)).abs() < 1e-9, "{h:?} {r:?}");
        assert!((evalsuite::cider(&h, &r).unwrap() - oracle_cider(&h, &r)).abs() < 1e-9, "{h:?} {r:?}");
    }
}

proptest! {
    #[test]
    fn scores_stay_in_range(seed in 0u64..500) {
        for (h, r) in micro_cases(seed, 3) {
            let b = evalsuite::bleu1(&h, &r).unwrap();
            let l = evalsuite::rouge_l(&h, &r).unwrap();
            let c = evalsuite::cider(&h, &r).unwrap();
            prop_assert!((0.0..=1.0 + 1e-12).contains(&b));
            prop_assert!((0.0..=1.0 + 1e-12).contains(&l));
            prop_assert!((0.0..=10.0 + 1e-9).contains(&c));
        }
    }

    #[test]
    fn quadrants_partition(flags in prop::collection::vec((any::<bool>(), any::<bool>()), 1..40)) {
        let (s, v): (Vec<bool>, Vec<bool>) = flags.iter().copied().unzip();
        let q = evalsuite::quadrants(&s, &v).unwrap();
        prop_assert_eq!(q.total(), flags.len());
        prop_assert_eq!(q.tt + q.tf, s.iter().filter(|x| **x).count());
    }
}
