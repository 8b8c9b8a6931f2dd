use std::collections::BTreeMap;

use proptest::prelude::*;

use auditlens_core::eval::{metrics, Averaging, ConfusionCounts};
use auditlens_core::gateway::{parse_verdict, Dialect};
use auditlens_core::jet::promptly_bucket;
use auditlens_core::ledger::Amount;
use auditlens_core::prompt::render;
use auditlens_core::stats::nearest_rank_index;

fn counts() -> impl Strategy<Value = ConfusionCounts> {
    (0u64..5000, 0u64..5000, 0u64..5000, 0u64..5000).prop_map(|(a, b, c, d)| ConfusionCounts::new(a, b, c, d))
}

proptest! {
    #[test]
    fn metrics_ignore_scale(c in counts(), k in 1u64..50) {
        let scaled = ConfusionCounts::new(c.tp * k, c.fp * k, c.fn_ * k, c.tn * k);
        for avg in [Averaging::PositiveClass, Averaging::Macro] {
            let (a, b) = (metrics(&c, avg), metrics(&scaled, avg));
            prop_assert!((a.precision - b.precision).abs() < 1e-12);
            prop_assert!((a.recall - b.recall).abs() < 1e-12);
            prop_assert!((a.f1 - b.f1).abs() < 1e-12);
        }
    }

    #[test]
    fn f1_lies_between_precision_and_recall(c in counts()) {
        let m = metrics(&c, Averaging::PositiveClass);
        prop_assert!(m.f1 >= m.precision.min(m.recall) - 1e-12);
        prop_assert!(m.f1 <= m.precision.max(m.recall) + 1e-12);
        for v in [m.precision, m.recall, m.f1] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn parser_never_panics(raw in ".{0,200}", repair in any::<bool>()) {
        for dialect in [Dialect::Vanilla, Dialect::Synthetic] {
            if let Ok(v) = parse_verdict(&raw, dialect, repair) {
                prop_assert!(v.anomaly <= 1);
                prop_assert!(v.confidence.is_none_or(|c| (0.0..=1.0).contains(&c)));
            }
        }
    }

    #[test]
    fn parser_survives_json_like_noise(
        key in prop::sample::select(vec!["anomaly", "confidence", "explanation", "x"]),
        value in prop::sample::select(vec!["0", "1", "2", "-1", "true", "null", "\"1\"", "[]", "{}", "0.5", "1e9"]),
        prefix in "[ a-z{}\\[\\]\"]{0,12}",
        suffix in "[ a-z{}\\[\\]\"<|>]{0,12}",
    ) {
        let raw = format!("{prefix}{{\"{key}\": {value}}}{suffix}");
        for dialect in [Dialect::Vanilla, Dialect::Synthetic] {
            let _ = parse_verdict(&raw, dialect, true);
            let _ = parse_verdict(&raw, dialect, false);
        }
    }

    #[test]
    fn promptly_is_monotone(a in -400i64..400, b in -400i64..400) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(promptly_bucket(lo) <= promptly_bucket(hi));
    }

    #[test]
    fn amounts_round_trip_through_text(cents in 0i64..=1_000_000_000_000) {
        let a = Amount::from_cents(cents).unwrap();
        let back: Amount = a.to_string().parse().unwrap();
        prop_assert_eq!(back, a);
    }

    #[test]
    fn quantile_index_is_monotone(n in 1usize..5000, p in 0u32..=10_000, q in 0u32..=10_000) {
        let (lo, hi) = if p <= q { (p, q) } else { (q, p) };
        prop_assert!(nearest_rank_index(n, lo) <= nearest_rank_index(n, hi));
        prop_assert!(nearest_rank_index(n, hi) < n);
    }

    #[test]
    fn rendered_values_are_never_rescanned(value in "[{}a-z_]{0,30}") {
        let values = BTreeMap::from([("user_id".to_string(), value.clone())]);
        prop_assert_eq!(render("id={user_id}", &values).unwrap(), format!("id={value}"));
    }
}
