//! Wide per-row output tables.

use hbrnorm::data::Dataset;
use hbrnorm::models::{DeviationReport, Prediction};

fn header(units: &[String], suffixes: &[&str]) -> Vec<String> {
    let mut h = vec!["subject_id".to_string()];
    for u in units {
        h.extend(suffixes.iter().map(|s| format!("{u}_{s}")));
    }
    h
}

fn render(
    header: Vec<String>,
    ds: &Dataset,
    cells: impl Fn(usize, usize) -> Vec<f64>,
    units: usize,
) -> Vec<u8> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(&header).expect("in-memory write");
    for r in 0..ds.n_rows() {
        let mut row = vec![ds.subject_ids()[r].clone()];
        for u in 0..units {
            row.extend(cells(r, u).iter().map(f64::to_string));
        }
        w.write_record(&row).expect("in-memory write");
    }
    w.into_inner().expect("in-memory flush")
}

/// `subject_id,<unit>_mean,<unit>_sd,…`
pub fn prediction(ds: &Dataset, p: &Prediction) -> Vec<u8> {
    let h = header(&p.unit_names, &["mean", "sd"]);
    render(
        h,
        ds,
        |r, u| vec![p.mean[[r, u]], p.sd[[r, u]]],
        p.unit_names.len(),
    )
}

/// `subject_id,<unit>_mean,<unit>_sd,<unit>_z,<unit>_p,…`
pub fn deviations(ds: &Dataset, d: &DeviationReport) -> Vec<u8> {
    let h = header(&d.unit_names, &["mean", "sd", "z", "p"]);
    render(
        h,
        ds,
        |r, u| vec![d.mean[[r, u]], d.sd[[r, u]], d.z[[r, u]], d.p[[r, u]]],
        d.unit_names.len(),
    )
}
