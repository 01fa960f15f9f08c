mod common;

use common::sampler;
use hbrnorm::models::{fit, ModelSpec, Strategy};
use hbrnorm::synth::{generate, GenConfig, Hyper};

#[test]
fn residual_moments_match_the_generator() {
    let cfg = GenConfig {
        sites: 5,
        rows_per_site: vec![400],
        units: 3,
        ..GenConfig::default()
    };
    let (ds, truth) = generate(&cfg, 12).unwrap();
    for b in 0..cfg.sites {
        let rows: Vec<usize> = (0..ds.n_rows())
            .filter(|&r| truth.row_batch[r] == b)
            .collect();
        let n = rows.len() as f64;
        for u in 0..cfg.units {
            let sd = truth.noise_sd(b, u, 0.0);
            let z: Vec<f64> = rows
                .iter()
                .map(|&r| {
                    let x = ds.covariates()[[r, 0]];
                    (ds.responses()[[r, u]] - truth.mean(b, u, x)) / sd
                })
                .collect();
            let m = z.iter().sum::<f64>() / n;
            let s = (z.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
            assert!(m.abs() < 4.0 / n.sqrt(), "batch {b} unit {u}: mean {m}");
            assert!(
                (s - 1.0).abs() < 4.0 / n.sqrt(),
                "batch {b} unit {u}: sd {s}"
            );
        }
    }
}

#[test]
fn confounded_sites_bias_pooled_slope_but_not_hbr() {
    let cfg = GenConfig {
        sites: 4,
        rows_per_site: vec![80],
        units: 1,
        confound: 1.0,
        intercept: Hyper::new(3.0, 0.5),
        slope: Hyper::new(-0.01, 0.002),
        ..GenConfig::default()
    };
    let (ds, truth) = generate(&cfg, 3).unwrap();
    let x = ds.covariates().column(0).to_vec();
    let (_, pooled_slope) = common::ols(&x, &ds.response_column(0));
    let true_mean = (0..4).map(|b| truth.slope[[b, 0]]).sum::<f64>() / 4.0;
    assert!(
        (pooled_slope - true_mean).abs() > 0.005,
        "pooled {pooled_slope} vs {true_mean}"
    );

    let model = fit(&ModelSpec::new(Strategy::Hbr), &ds, &sampler(1000, 1000, 3)).unwrap();
    let st = model.structure();
    for (label, b) in truth.batch_labels.iter().zip(0..) {
        let g = st.group_of_batch(model.batches.get(label).unwrap());
        let mut theta = vec![0.0; st.n_groups * st.k_mu];
        let mut nu = vec![0.0; st.n_groups * st.k_sigma];
        let slopes: Vec<f64> = model.draws[0]
            .iter()
            .map(|d| {
                st.decode(d, &mut theta, &mut nu);
                model
                    .raw_linear(0, &theta[g * st.k_mu..(g + 1) * st.k_mu])
                    .unwrap()[1]
            })
            .collect();
        let m = slopes.iter().sum::<f64>() / slopes.len() as f64;
        let sd = (slopes.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (slopes.len() - 1) as f64)
            .sqrt();
        let t = truth.slope[[b, 0]];
        assert!((m - t).abs() < 3.0 * sd, "site {label}: {m} ± {sd} vs {t}");
    }
}
