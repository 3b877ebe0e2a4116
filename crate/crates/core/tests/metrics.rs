mod common;

use std::collections::BTreeMap;

use proptest::prelude::*;

use common::{checks, oracle};
use mgsd_core::features::Label;
use mgsd_core::objectives::{condition_breakdown, eer, eer_from_scores, linear_cka, Matrix, ScoreRecord};
use mgsd_core::Error;

#[test]
fn eer_agrees_with_brute_force_on_tied_sets() {
    let e = checks::eer(1000, 10);
    assert!(e <= 1e-12, "max err {e:e}");
}

#[test]
fn worked_example_is_one_third() {
    let r = eer_from_scores(&[0.9, 0.8, 0.3], &[0.7, 0.2, 0.1]).unwrap();
    assert_eq!(r.eer, 1.0 / 3.0);
    assert_eq!(oracle::brute_force_eer(&[0.9, 0.8, 0.3], &[0.7, 0.2, 0.1]), 1.0 / 3.0);
}

#[test]
fn cka_invariances_hold() {
    let e = checks::cka_invariances(100, 11);
    assert!(e <= 1e-9, "max violation {e:e}");
}

#[test]
fn constant_input_is_degenerate() {
    let c = Matrix::new(5, 2, vec![3.0; 10]).unwrap();
    let y = Matrix::new(5, 1, vec![1.0, 2.0, 0.0, 4.0, 1.0]).unwrap();
    assert!(matches!(linear_cka(&c, &y), Err(Error::Degenerate(_))));
    assert!(matches!(linear_cka(&y, &c), Err(Error::Degenerate(_))));
}

fn record(i: usize, llr: f64, label: Label, cond: &str) -> ScoreRecord {
    ScoreRecord {
        utt_id: format!("u{i}"),
        llr,
        label,
        conditions: BTreeMap::from([("c".to_string(), cond.to_string())]),
    }
}

proptest! {
    #[test]
    fn eer_is_invariant_to_increasing_maps(
        bona in prop::collection::vec(-5i32..5, 1..40),
        spoof in prop::collection::vec(-5i32..5, 1..40),
        a in 0.1f64..10.0,
        b in -3.0f64..3.0,
    ) {
        let f = |v: &i32| a * (*v as f64) + b;
        let base = eer_from_scores(&bona.iter().map(|v| *v as f64).collect::<Vec<_>>(), &spoof.iter().map(|v| *v as f64).collect::<Vec<_>>()).unwrap();
        let mapped = eer_from_scores(&bona.iter().map(f).collect::<Vec<_>>(), &spoof.iter().map(f).collect::<Vec<_>>()).unwrap();
        prop_assert!((base.eer - mapped.eer).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&base.eer));
    }

    #[test]
    fn separated_classes_give_zero_and_reversed_give_one(
        bona in prop::collection::vec(1.0f64..2.0, 1..30),
        spoof in prop::collection::vec(-2.0f64..0.0, 1..30),
    ) {
        prop_assert_eq!(eer_from_scores(&bona, &spoof).unwrap().eer, 0.0);
        prop_assert_eq!(eer_from_scores(&spoof, &bona).unwrap().eer, 1.0);
    }

    #[test]
    fn cka_lies_in_unit_interval(
        m in 3usize..12,
        p in 1usize..5,
        seed in any::<u64>(),
    ) {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let s = Matrix::new(m, p, common::normal_vec(&mut rng, m * p)).unwrap();
        let y = Matrix::new(m, p, common::normal_vec(&mut rng, m * p)).unwrap();
        let v = linear_cka(&s, &y).unwrap();
        prop_assert!((-1e-12..=1.0 + 1e-12).contains(&v));
    }

    #[test]
    fn single_condition_breakdown_equals_pooled(
        scores in prop::collection::vec((-3.0f64..3.0, any::<bool>()), 2..40),
    ) {
        let mut recs: Vec<ScoreRecord> = scores
            .iter()
            .enumerate()
            .map(|(i, &(s, b))| record(i, s, if b { Label::Bonafide } else { Label::Spoof }, "x"))
            .collect();
        recs[0].label = Label::Bonafide;
        recs[1].label = Label::Spoof;
        let pooled = eer(&recs).unwrap();
        let bd = condition_breakdown(&recs, &["c"]).unwrap();
        prop_assert_eq!(bd.cells.len(), 1);
        prop_assert_eq!(bd.cells.values().next().unwrap().eer.unwrap(), pooled);
    }
}
