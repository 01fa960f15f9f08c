use std::collections::{BTreeMap, BTreeSet};

use hbrnorm::data::{ingest_csv, ingest_reader, split, write_csv, Group, Schema, Standardizer};
use hbrnorm::synth::{generate, GenConfig, PatientSpec};
use proptest::prelude::*;

fn small(seed: u64, gender: bool) -> hbrnorm::data::Dataset {
    let cfg = GenConfig {
        sites: 3,
        rows_per_site: vec![17, 25, 40],
        units: 3,
        gender,
        ..GenConfig::default()
    };
    generate(&cfg, seed).unwrap().0
}

#[test]
fn csv_round_trip_preserves_values() {
    let ds = small(4, true);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("data.csv");
    write_csv(&ds, std::fs::File::create(&path).unwrap()).unwrap();
    let back = ingest_csv(&path, &Schema::for_dataset(&ds)).unwrap();
    assert_eq!(back.dropped, 0);
    let back = back.dataset;
    assert_eq!(back.subject_ids(), ds.subject_ids());
    assert_eq!(back.batch_labels(), ds.batch_labels());
    assert_eq!(back.groups(), ds.groups());
    let close = |a: f64, b: f64| (a - b).abs() <= 1e-12 * a.abs().max(1.0);
    assert!(back
        .covariates()
        .iter()
        .zip(ds.covariates())
        .all(|(a, b)| close(*a, *b)));
    assert!(back
        .responses()
        .iter()
        .zip(ds.responses())
        .all(|(a, b)| close(*a, *b)));
}

#[test]
fn batch_index_is_the_label_cross_product() {
    let csv = "id,age,site,gender,y\n\
               a,20,S1,F,1\nb,21,S1,M,2\nc,22,S2,F,3\nd,23,S2,M,4\ne,24,S1,F,5\nf,25,S2,M,6\n";
    let schema =
        Schema::parse("subject=id\ncovariates=age\nresponses=y\nbatches=site,gender").unwrap();
    let ds = ingest_reader(csv.as_bytes(), &schema).unwrap().dataset;

    // Oracle: distinct (site, gender) pairs read straight off the text.
    let mut pairs = BTreeSet::new();
    for line in csv.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        pairs.insert((f[2], f[3]));
    }
    let index = ds.batch_index();
    assert_eq!(index.len(), pairs.len());
    assert_eq!(index.len(), 4);
    assert_eq!(index.counts().iter().sum::<usize>(), ds.n_rows());
}

#[test]
fn split_sizes_follow_the_fraction() {
    let cfg = GenConfig {
        sites: 1,
        rows_per_site: vec![100],
        units: 1,
        ..GenConfig::default()
    };
    let ds = generate(&cfg, 1).unwrap().0;
    let (train, test) = split(&ds, 0.8, 9, false).unwrap();
    assert_eq!((train.n_rows(), test.n_rows()), (80, 20));

    let cfg = GenConfig {
        sites: 2,
        rows_per_site: vec![100],
        units: 2,
        patients: Some(PatientSpec {
            per_site: 20,
            diagnosis: "sz".into(),
            affected_units: vec![0],
            effect: 1.5,
        }),
        ..GenConfig::default()
    };
    let ds = generate(&cfg, 2).unwrap().0;
    let (train, test) = split(&ds, 0.5, 3, true).unwrap();
    assert!(train.groups().iter().all(Group::is_healthy));
    assert_eq!(train.n_rows(), 100);
    assert_eq!(test.rows_where(|g| g.is_healthy()).len(), 100);
    assert_eq!(test.rows_where(|g| !g.is_healthy()).len(), 40);

    let again = split(&ds, 0.5, 3, true).unwrap();
    assert_eq!(again.0, train);
    assert_eq!(again.1, test);
}

#[test]
fn constant_covariate_is_rejected() {
    let csv = "id,age,site,y\na,30,S,1\nb,30,S,2\nc,30,S,3\n";
    let schema = Schema::parse("subject=id\ncovariates=age\nresponses=y\nbatches=site").unwrap();
    let ds = ingest_reader(csv.as_bytes(), &schema).unwrap().dataset;
    assert!(Standardizer::fit(&ds).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn split_is_stratified(seed in 0u64..10_000, fraction in 0.1f64..0.9) {
        let ds = small(seed, false);
        let (train, _) = split(&ds, fraction, seed, false).unwrap();
        let count = |d: &hbrnorm::data::Dataset| {
            let mut m = BTreeMap::new();
            for l in d.batch_labels() {
                *m.entry(l.clone()).or_insert(0usize) += 1;
            }
            m
        };
        let (all, tr) = (count(&ds), count(&train));
        for (label, n) in all {
            let got = tr[&label] as f64;
            prop_assert!(got >= 2.0);
            prop_assert!((got - fraction * n as f64).abs() <= 1.0, "{label}: {got} of {n}");
        }
    }

    #[test]
    fn standardizer_inverts(seed in 0u64..10_000) {
        let ds = small(seed, false);
        let st = Standardizer::fit(&ds).unwrap();
        let back = st.inverse_covariates(&st.transform_covariates(ds.covariates()));
        for (a, b) in back.iter().zip(ds.covariates()) {
            prop_assert!((a - b).abs() <= 1e-10 * b.abs());
        }
        for u in 0..ds.n_units() {
            for &y in ds.response_column(u).iter().take(10) {
                let z = st.unstandardize_response(u, st.standardize_response(u, y));
                prop_assert!((z - y).abs() <= 1e-10 * y.abs().max(1.0));
            }
        }
    }
}
