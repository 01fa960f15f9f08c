mod common;

use common::*;
use hbrnorm::combat::{combat_apply, combat_fit};
use hbrnorm::data::Dataset;
use proptest::prelude::*;

fn design() -> Vec<String> {
    vec!["age".to_string()]
}

fn norm(ds: &Dataset) -> f64 {
    ds.responses().iter().map(|v| v * v).sum::<f64>().sqrt()
}

#[test]
fn single_batch_leaves_data_untouched() {
    let ds = linear_sites(&[40], &[1.0], &[2.0], 0.5, 1);
    let model = combat_fit(&ds, &design()).unwrap();
    assert!(model.is_identity());
    let out = combat_apply(&model, &ds).unwrap();
    let bits = |d: &Dataset| {
        d.responses()
            .iter()
            .map(|v| v.to_bits())
            .collect::<Vec<_>>()
    };
    assert_eq!(bits(&out), bits(&ds));
    assert_eq!(out, ds);
}

#[test]
fn harmonizing_twice_is_nearly_a_no_op() {
    let ds = linear_sites(&[60, 80, 50, 70], &[1.0, 2.0, 0.3, 1.4], &[2.0; 4], 0.5, 2);
    let once = combat_apply(&combat_fit(&ds, &design()).unwrap(), &ds).unwrap();
    let twice = combat_apply(&combat_fit(&once, &design()).unwrap(), &once).unwrap();
    let diff = (once.responses() - twice.responses())
        .iter()
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    assert!(
        diff / norm(&once) < 1e-3,
        "relative change {}",
        diff / norm(&once)
    );
}

#[test]
fn design_coefficient_is_preserved() {
    // Age is independent of site here, so the pooled slope is unbiased before and after.
    let ds = linear_sites(&[200, 200, 200], &[0.0, 3.0, -2.0], &[2.0; 3], 1.0, 3);
    let (_, before) = ols(&ds.covariates().column(0).to_vec(), &ds.response_column(0));
    let out = combat_apply(&combat_fit(&ds, &design()).unwrap(), &ds).unwrap();
    let (_, after) = ols(
        &out.covariates().column(0).to_vec(),
        &out.response_column(0),
    );
    assert!(
        ((after - before) / before).abs() < 0.05,
        "slope {before} -> {after}"
    );
    assert!((after - 2.0).abs() < 0.1, "slope {after}");
}

#[test]
fn batch_means_and_spreads_are_aligned() {
    let ds = linear_sites(&[300, 300], &[0.0, 1.0], &[0.5, 0.5], 0.5, 4);
    let out = combat_apply(&combat_fit(&ds, &design()).unwrap(), &ds).unwrap();
    let x = out.covariates().column(0).to_vec();
    let (a, b) = ols(&x, &out.response_column(0));
    let resid: Vec<f64> = out
        .response_column(0)
        .iter()
        .zip(&x)
        .map(|(y, x)| y - a - b * x)
        .collect();
    let (r0, r1) = resid.split_at(300);
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let sd = |v: &[f64]| {
        let m = mean(v);
        (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
    };
    assert!((mean(r0) - mean(r1)).abs() < 0.05);
    assert!((sd(r0) / sd(r1) - 1.0).abs() < 0.05);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]
    #[test]
    fn adjusted_scales_stay_positive(
        shifts in prop::collection::vec(-3.0f64..3.0, 3..6),
        sd in 0.05f64..3.0,
        rows in 3usize..25,
        seed in 0u64..1000,
    ) {
        let m = shifts.len();
        let ds = linear_sites(&vec![rows; m], &shifts, &vec![1.0; m], sd, seed);
        let model = combat_fit(&ds, &design()).unwrap();
        for u in &model.units {
            prop_assert!(u.delta_star.iter().all(|d| *d > 0.0 && d.is_finite()), "{:?}", u.delta_star);
            prop_assert!(u.gamma_star.iter().all(|g| g.is_finite()));
        }
        let out = combat_apply(&model, &ds).unwrap();
        prop_assert!(out.responses().iter().all(|v| v.is_finite()));
    }
}
