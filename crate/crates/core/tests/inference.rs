mod common;

use common::*;
use hbrnorm::archive::{
    load_combat, load_model, model_from_bytes, model_to_bytes, save_combat, save_model,
};
use hbrnorm::combat::combat_fit;
use hbrnorm::inference::diagnostics::{ess_bulk, split_r_hat};
use hbrnorm::inference::{sample_nuts, Gaussian, LogDensity, SamplerConfig, StandardNormal};
use hbrnorm::models::{fit, ModelSpec, NoiseForm, Strategy};
use hbrnorm::{Draws, Draws32};

#[test]
fn standard_normal_reference_values() {
    let d = StandardNormal::new(3);
    let mut g = vec![1.0; 3];
    let lp = LogDensity::<f64>::logp_and_grad(&d, &[0.0; 3], &mut g).unwrap();
    assert!((lp + 1.5 * (2.0 * std::f64::consts::PI).ln()).abs() < 1e-12);
    assert_eq!(g, vec![0.0; 3]);
    LogDensity::<f64>::logp_and_grad(&d, &[1.0, 0.0, 0.0], &mut g).unwrap();
    assert_eq!(g[0], -1.0);
}

#[test]
fn standard_normal_moments() {
    let cfg = SamplerConfig::default().with_chains(4).with_seed(2);
    let draws: Draws = sample_nuts(&StandardNormal::new(1), &cfg).unwrap();
    let xs: Vec<f64> = draws.iter().map(|d| d[0]).collect();
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let sd = (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    let ess = ess_bulk(&draws.coordinate_chains(0));
    assert!(m.abs() < 3.0 / ess.sqrt(), "mean {m}, ess {ess}");
    assert!((0.9..=1.1).contains(&sd), "sd {sd}");
}

#[test]
fn correlated_gaussian_mixes() {
    let cfg = SamplerConfig::default().with_chains(4).with_seed(3);
    let draws: Draws = sample_nuts(&Gaussian::correlated_2d(0.9), &cfg).unwrap();
    for j in 0..2 {
        let r = split_r_hat(&draws.coordinate_chains(j));
        assert!(r < 1.01, "coordinate {j}: R-hat {r}");
    }
}

#[test]
fn fixed_seed_reproduces_draws_in_both_precisions() {
    let cfg = SamplerConfig::default().with_budget(200, 200).with_seed(8);
    let a: Draws = sample_nuts(&Gaussian::correlated_2d(0.5), &cfg).unwrap();
    let b: Draws = sample_nuts(&Gaussian::correlated_2d(0.5), &cfg).unwrap();
    assert_eq!(a.values, b.values);
    let c: Draws32 = sample_nuts(&Gaussian::correlated_2d(0.5), &cfg).unwrap();
    let d: Draws32 = sample_nuts(&Gaussian::correlated_2d(0.5), &cfg).unwrap();
    assert_eq!(c.values, d.values);
}

#[test]
fn saved_model_predicts_bit_identically() {
    let ds = linear_sites(&[30, 30, 30], &[1.0, 1.4, 0.7], &[2.0, 1.9, 2.1], 0.5, 4);
    let spec = ModelSpec::new(Strategy::NoPooling).with_noise(NoiseForm::Heteroscedastic(2));
    let model = fit(&spec, &ds, &sampler(400, 400, 4)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.hbr");
    save_model(&model, &path).unwrap();
    let back = load_model(&path).unwrap();
    assert_eq!(back, model);
    let bits = |p: &hbrnorm::models::Prediction| {
        p.mean
            .iter()
            .chain(&p.sd)
            .map(|v| v.to_bits())
            .collect::<Vec<_>>()
    };
    assert_eq!(
        bits(&back.predict_dataset(&ds).unwrap()),
        bits(&model.predict_dataset(&ds).unwrap())
    );
    assert_eq!(
        model_to_bytes(&back).unwrap(),
        std::fs::read(&path).unwrap()
    );

    let bytes = std::fs::read(&path).unwrap();
    assert!(model_from_bytes(&bytes[..bytes.len() - 8]).is_err());
}

#[test]
fn combat_model_round_trips() {
    let ds = linear_sites(&[30, 30], &[1.0, 1.4], &[2.0, 2.0], 0.5, 5);
    let model = combat_fit(&ds, &["age".to_string()]).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("combat.hbr");
    save_combat(&model, &path).unwrap();
    assert_eq!(load_combat(&path).unwrap(), model);
    assert!(load_model(&path).is_err());
}
