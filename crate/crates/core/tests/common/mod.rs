#![allow(dead_code)]

use hbrnorm::data::{BatchLabel, Dataset, Group};
use hbrnorm::inference::SamplerConfig;
use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

/// One covariate `age`, responses `r0…`, a single `site` batch dimension.
pub fn dataset(x: &[f64], ys: &[Vec<f64>], sites: &[String]) -> Dataset {
    let n = x.len();
    let responses = Array2::from_shape_fn((n, ys.len()), |(r, u)| ys[u][r]);
    Dataset::new(
        vec!["age".into()],
        (0..ys.len()).map(|u| format!("r{u}")).collect(),
        vec!["site".into()],
        Array2::from_shape_vec((n, 1), x.to_vec()).unwrap(),
        responses,
        sites.iter().map(|s| BatchLabel(vec![s.clone()])).collect(),
        (0..n).map(|i| format!("s{i}")).collect(),
        vec![Group::Healthy; n],
    )
    .unwrap()
}

/// `y = a_b + s_b·x + N(0, sd²)` for each site `b`, `x ~ U(0, 10)`.
pub fn linear_sites(
    rows: &[usize],
    intercepts: &[f64],
    slopes: &[f64],
    sd: f64,
    seed: u64,
) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ux = Uniform::new(0.0, 10.0).unwrap();
    let noise = Normal::new(0.0, sd).unwrap();
    let (mut x, mut y, mut sites) = (Vec::new(), Vec::new(), Vec::new());
    for (b, &n) in rows.iter().enumerate() {
        for _ in 0..n {
            let xi = ux.sample(&mut rng);
            x.push(xi);
            y.push(intercepts[b] + slopes[b] * xi + noise.sample(&mut rng));
            sites.push(format!("site{b}"));
        }
    }
    dataset(&x, &[y], &sites)
}

pub fn ols(x: &[f64], y: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    let slope = sxy / sxx;
    (my - slope * mx, slope)
}

pub fn sampler(warmup: usize, draws: usize, seed: u64) -> SamplerConfig {
    SamplerConfig::default()
        .with_budget(warmup, draws)
        .with_seed(seed)
}

pub fn labels(site: &str, n: usize) -> Vec<BatchLabel> {
    vec![BatchLabel(vec![site.to_string()]); n]
}
