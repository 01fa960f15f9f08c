//! Batched covariate/response tables, batch indexing, standardization and
//! stratified splitting.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("schema error: {0}")]
    Schema(String),
    #[error("column `{0}` not found in csv header")]
    MissingColumn(String),
    #[error("no usable rows after dropping {dropped} incomplete rows")]
    NoUsableRows { dropped: usize },
    #[error("column `{0}` is constant and cannot be standardized")]
    ConstantColumn(String),
    #[error(
        "batch `{batch}` has {healthy} eligible rows; at least 2 are needed for a stratified split"
    )]
    Stratification { batch: String, healthy: usize },
    #[error("split fraction {0} must lie strictly between 0 and 1")]
    InvalidFraction(f64),
    #[error("unknown batch `{0}`")]
    UnknownBatch(String),
    #[error("invalid group tag `{0}` (expected `healthy` or `patient:<diagnosis>`)")]
    BadGroup(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
}

/// Clinical group of a row.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Group {
    Healthy,
    Patient(String),
}

impl Group {
    pub fn is_healthy(&self) -> bool {
        matches!(self, Group::Healthy)
    }

    pub fn diagnosis(&self) -> Option<&str> {
        match self {
            Group::Healthy => None,
            Group::Patient(d) => Some(d),
        }
    }
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Group::Healthy => f.write_str("healthy"),
            Group::Patient(d) => write!(f, "patient:{d}"),
        }
    }
}

impl std::str::FromStr for Group {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let t = s.trim();
        if t.eq_ignore_ascii_case("healthy") {
            return Ok(Group::Healthy);
        }
        match t.split_once(':') {
            Some((tag, dx)) if tag.eq_ignore_ascii_case("patient") && !dx.trim().is_empty() => {
                Ok(Group::Patient(dx.trim().to_string()))
            }
            _ => Err(DataError::BadGroup(s.to_string())),
        }
    }
}

/// Composite batch label: one value per declared batch dimension.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct BatchLabel(pub Vec<String>);

impl fmt::Display for BatchLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0.join("|"))
    }
}

/// Dense index over the cross-product labels present in a dataset.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(from = "BatchIndexParts", into = "BatchIndexParts")]
pub struct BatchIndex {
    labels: Vec<BatchLabel>,
    counts: Vec<usize>,
    lookup: HashMap<BatchLabel, usize>,
}

#[derive(Clone, Serialize, Deserialize)]
struct BatchIndexParts {
    labels: Vec<BatchLabel>,
    counts: Vec<usize>,
}

impl From<BatchIndexParts> for BatchIndex {
    fn from(p: BatchIndexParts) -> Self {
        let mut idx = BatchIndex {
            labels: p.labels,
            counts: p.counts,
            lookup: HashMap::new(),
        };
        idx.rebuild_lookup();
        idx
    }
}

impl From<BatchIndex> for BatchIndexParts {
    fn from(b: BatchIndex) -> Self {
        BatchIndexParts {
            labels: b.labels,
            counts: b.counts,
        }
    }
}

impl PartialEq for BatchIndex {
    fn eq(&self, other: &Self) -> bool {
        self.labels == other.labels && self.counts == other.counts
    }
}

impl BatchIndex {
    /// Labels are ordered lexicographically so the index does not depend on
    /// row order.
    pub fn from_labels(labels: &[BatchLabel]) -> Self {
        let mut tally: BTreeMap<&BatchLabel, usize> = BTreeMap::new();
        for l in labels {
            *tally.entry(l).or_default() += 1;
        }
        let (labels, counts): (Vec<BatchLabel>, Vec<usize>) =
            tally.into_iter().map(|(l, c)| (l.clone(), c)).unzip();
        let mut idx = BatchIndex {
            labels,
            counts,
            lookup: HashMap::new(),
        };
        idx.rebuild_lookup();
        idx
    }

    fn rebuild_lookup(&mut self) {
        self.lookup = self
            .labels
            .iter()
            .cloned()
            .enumerate()
            .map(|(i, l)| (l, i))
            .collect();
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[BatchLabel] {
        &self.labels
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn get(&self, label: &BatchLabel) -> Option<usize> {
        self.lookup.get(label).copied()
    }

    pub fn assign(&self, labels: &[BatchLabel]) -> Result<Vec<usize>, DataError> {
        labels
            .iter()
            .map(|l| {
                self.get(l)
                    .ok_or_else(|| DataError::UnknownBatch(l.to_string()))
            })
            .collect()
    }
}

/// Batched data: `n` rows of `p` covariates, `u` response units, batch labels,
/// subject ids and group tags.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    covariate_names: Vec<String>,
    response_names: Vec<String>,
    batch_names: Vec<String>,
    covariates: Array2<f64>,
    responses: Array2<f64>,
    batch_labels: Vec<BatchLabel>,
    subject_ids: Vec<String>,
    groups: Vec<Group>,
}

impl Dataset {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        covariate_names: Vec<String>,
        response_names: Vec<String>,
        batch_names: Vec<String>,
        covariates: Array2<f64>,
        responses: Array2<f64>,
        batch_labels: Vec<BatchLabel>,
        subject_ids: Vec<String>,
        groups: Vec<Group>,
    ) -> Result<Self, DataError> {
        let n = covariates.nrows();
        if responses.nrows() != n
            || batch_labels.len() != n
            || subject_ids.len() != n
            || groups.len() != n
        {
            return Err(DataError::Shape(format!(
                "row counts differ: covariates {n}, responses {}, batches {}, subjects {}, groups {}",
                responses.nrows(),
                batch_labels.len(),
                subject_ids.len(),
                groups.len()
            )));
        }
        if covariates.ncols() != covariate_names.len() || responses.ncols() != response_names.len()
        {
            return Err(DataError::Shape(
                "column names do not match matrix widths".into(),
            ));
        }
        if let Some(bad) = batch_labels.iter().find(|l| l.0.len() != batch_names.len()) {
            return Err(DataError::Shape(format!(
                "batch label `{bad}` has wrong arity"
            )));
        }
        if covariates
            .iter()
            .chain(responses.iter())
            .any(|v| !v.is_finite())
        {
            return Err(DataError::Shape("non-finite covariate or response".into()));
        }
        Ok(Dataset {
            covariate_names,
            response_names,
            batch_names,
            covariates,
            responses,
            batch_labels,
            subject_ids,
            groups,
        })
    }

    pub fn n_rows(&self) -> usize {
        self.covariates.nrows()
    }
    pub fn n_covariates(&self) -> usize {
        self.covariates.ncols()
    }
    pub fn n_units(&self) -> usize {
        self.responses.ncols()
    }
    pub fn covariate_names(&self) -> &[String] {
        &self.covariate_names
    }
    pub fn response_names(&self) -> &[String] {
        &self.response_names
    }
    pub fn batch_names(&self) -> &[String] {
        &self.batch_names
    }
    pub fn covariates(&self) -> &Array2<f64> {
        &self.covariates
    }
    pub fn responses(&self) -> &Array2<f64> {
        &self.responses
    }
    pub fn batch_labels(&self) -> &[BatchLabel] {
        &self.batch_labels
    }
    pub fn subject_ids(&self) -> &[String] {
        &self.subject_ids
    }
    pub fn groups(&self) -> &[Group] {
        &self.groups
    }

    pub fn batch_index(&self) -> BatchIndex {
        BatchIndex::from_labels(&self.batch_labels)
    }

    pub fn response_column(&self, unit: usize) -> Vec<f64> {
        self.responses.column(unit).to_vec()
    }

    /// Rows at `rows`, in that order.
    pub fn subset(&self, rows: &[usize]) -> Dataset {
        Dataset {
            covariate_names: self.covariate_names.clone(),
            response_names: self.response_names.clone(),
            batch_names: self.batch_names.clone(),
            covariates: self.covariates.select(Axis(0), rows),
            responses: self.responses.select(Axis(0), rows),
            batch_labels: rows.iter().map(|&r| self.batch_labels[r].clone()).collect(),
            subject_ids: rows.iter().map(|&r| self.subject_ids[r].clone()).collect(),
            groups: rows.iter().map(|&r| self.groups[r].clone()).collect(),
        }
    }

    /// Keep only the response units at `units`.
    pub fn select_units(&self, units: &[usize]) -> Dataset {
        let mut out = self.clone();
        out.responses = self.responses.select(Axis(1), units);
        out.response_names = units
            .iter()
            .map(|&u| self.response_names[u].clone())
            .collect();
        out
    }

    /// Copy with responses replaced (same shape).
    pub fn with_responses(&self, responses: Array2<f64>) -> Result<Dataset, DataError> {
        if responses.dim() != self.responses.dim() {
            return Err(DataError::Shape(
                "replacement responses have a different shape".into(),
            ));
        }
        let mut out = self.clone();
        out.responses = responses;
        Ok(out)
    }

    /// Concatenate rows of two datasets with identical column layout.
    pub fn concat(&self, other: &Dataset) -> Result<Dataset, DataError> {
        if self.covariate_names != other.covariate_names
            || self.response_names != other.response_names
            || self.batch_names != other.batch_names
        {
            return Err(DataError::Shape(
                "cannot concatenate datasets with different columns".into(),
            ));
        }
        let covariates =
            ndarray::concatenate(Axis(0), &[self.covariates.view(), other.covariates.view()])
                .map_err(|e| DataError::Shape(e.to_string()))?;
        let responses =
            ndarray::concatenate(Axis(0), &[self.responses.view(), other.responses.view()])
                .map_err(|e| DataError::Shape(e.to_string()))?;
        Ok(Dataset {
            covariate_names: self.covariate_names.clone(),
            response_names: self.response_names.clone(),
            batch_names: self.batch_names.clone(),
            covariates,
            responses,
            batch_labels: self
                .batch_labels
                .iter()
                .chain(&other.batch_labels)
                .cloned()
                .collect(),
            subject_ids: self
                .subject_ids
                .iter()
                .chain(&other.subject_ids)
                .cloned()
                .collect(),
            groups: self.groups.iter().chain(&other.groups).cloned().collect(),
        })
    }

    /// Row indices whose group satisfies `pred`.
    pub fn rows_where(&self, pred: impl Fn(&Group) -> bool) -> Vec<usize> {
        (0..self.n_rows())
            .filter(|&r| pred(&self.groups[r]))
            .collect()
    }
}

/// Column roles for CSV ingestion.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schema {
    pub subject: String,
    pub covariates: Vec<String>,
    /// Response columns; an entry ending in `*` selects every header with that
    /// prefix, in header order.
    pub responses: Vec<String>,
    pub batches: Vec<String>,
    pub group: Option<String>,
}

impl Schema {
    /// Parse a `key=value` schema file. Keys: `subject`, `covariates`,
    /// `responses`, `batches`, `group`; list values are comma separated and
    /// `#` starts a comment.
    pub fn parse(text: &str) -> Result<Schema, DataError> {
        let mut kv: HashMap<String, String> = HashMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                DataError::Schema(format!("line {}: expected key=value", lineno + 1))
            })?;
            kv.insert(k.trim().to_ascii_lowercase(), v.trim().to_string());
        }
        let list = |key: &str| -> Vec<String> {
            kv.get(key)
                .map(|v| {
                    v.split(',')
                        .map(|s| s.trim().to_string())
                        .filter(|s| !s.is_empty())
                        .collect()
                })
                .unwrap_or_default()
        };
        let schema = Schema {
            subject: kv.get("subject").cloned().unwrap_or_default(),
            covariates: list("covariates"),
            responses: list("responses"),
            batches: list("batches"),
            group: kv.get("group").cloned().filter(|g| !g.is_empty()),
        };
        for key in kv.keys() {
            if !["subject", "covariates", "responses", "batches", "group"].contains(&key.as_str()) {
                return Err(DataError::Schema(format!("unknown key `{key}`")));
            }
        }
        schema.validate()?;
        Ok(schema)
    }

    pub fn from_file(path: &Path) -> Result<Schema, DataError> {
        Schema::parse(&std::fs::read_to_string(path)?)
    }

    pub fn to_config(&self) -> String {
        let mut s = format!(
            "subject={}\ncovariates={}\nresponses={}\nbatches={}\n",
            self.subject,
            self.covariates.join(","),
            self.responses.join(","),
            self.batches.join(",")
        );
        if let Some(g) = &self.group {
            s.push_str(&format!("group={g}\n"));
        }
        s
    }

    /// Schema matching the layout produced by [`write_csv`].
    pub fn for_dataset(ds: &Dataset) -> Schema {
        Schema {
            subject: "subject_id".into(),
            covariates: ds.covariate_names.clone(),
            responses: ds.response_names.clone(),
            batches: ds.batch_names.clone(),
            group: Some("group".into()),
        }
    }

    /// Same roles without responses, for prediction inputs.
    pub fn without_responses(&self) -> Schema {
        Schema {
            responses: Vec::new(),
            ..self.clone()
        }
    }

    fn validate(&self) -> Result<(), DataError> {
        if self.subject.is_empty() {
            return Err(DataError::Schema("missing `subject` column".into()));
        }
        if self.covariates.is_empty() {
            return Err(DataError::Schema(
                "at least one covariate column is required".into(),
            ));
        }
        if self.batches.is_empty() {
            return Err(DataError::Schema(
                "at least one batch column is required".into(),
            ));
        }
        Ok(())
    }
}

/// Result of ingestion: the dataset and how many rows were dropped.
#[derive(Debug)]
pub struct Ingested {
    pub dataset: Dataset,
    pub dropped: usize,
}

pub fn ingest_csv(path: &Path, schema: &Schema) -> Result<Ingested, DataError> {
    let file = std::fs::File::open(path)?;
    ingest_reader(file, schema)
}

/// Ingest from any reader. Rows with an empty or non-finite covariate or
/// response, an empty batch value, or an empty group are dropped.
pub fn ingest_reader<R: Read>(reader: R, schema: &Schema) -> Result<Ingested, DataError> {
    schema.validate()?;
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    let pos = |name: &str| -> Result<usize, DataError> {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| DataError::MissingColumn(name.to_string()))
    };

    let subject_col = pos(&schema.subject)?;
    let cov_cols = schema
        .covariates
        .iter()
        .map(|c| pos(c))
        .collect::<Result<Vec<_>, _>>()?;
    let batch_cols = schema
        .batches
        .iter()
        .map(|c| pos(c))
        .collect::<Result<Vec<_>, _>>()?;
    let group_col = schema.group.as_deref().map(pos).transpose()?;
    let mut resp_cols = Vec::new();
    for pat in &schema.responses {
        if let Some(prefix) = pat.strip_suffix('*') {
            let reserved: BTreeSet<usize> = cov_cols
                .iter()
                .chain(&batch_cols)
                .copied()
                .chain([subject_col])
                .chain(group_col)
                .collect();
            let hits: Vec<usize> = header
                .iter()
                .enumerate()
                .filter(|(i, h)| h.starts_with(prefix) && !reserved.contains(i))
                .map(|(i, _)| i)
                .collect();
            if hits.is_empty() {
                return Err(DataError::MissingColumn(pat.clone()));
            }
            resp_cols.extend(hits);
        } else {
            resp_cols.push(pos(pat)?);
        }
    }

    let parse_num = |s: &str| -> Option<f64> { s.parse::<f64>().ok().filter(|v| v.is_finite()) };

    let mut cov = Vec::new();
    let mut resp = Vec::new();
    let mut labels = Vec::new();
    let mut subjects = Vec::new();
    let mut groups = Vec::new();
    let mut dropped = 0usize;
    for rec in rdr.records() {
        let rec = rec?;
        let field = |i: usize| rec.get(i).unwrap_or("");
        let covs: Option<Vec<f64>> = cov_cols.iter().map(|&c| parse_num(field(c))).collect();
        let resps: Option<Vec<f64>> = resp_cols.iter().map(|&c| parse_num(field(c))).collect();
        let batch: Vec<String> = batch_cols.iter().map(|&c| field(c).to_string()).collect();
        let group = match group_col {
            Some(c) if field(c).is_empty() => None,
            Some(c) => Some(field(c).parse::<Group>()?),
            None => Some(Group::Healthy),
        };
        match (covs, resps, group) {
            (Some(c), Some(r), Some(g)) if batch.iter().all(|b| !b.is_empty()) => {
                cov.extend(c);
                resp.extend(r);
                labels.push(BatchLabel(batch));
                subjects.push(field(subject_col).to_string());
                groups.push(g);
            }
            _ => dropped += 1,
        }
    }
    let n = subjects.len();
    if n == 0 {
        return Err(DataError::NoUsableRows { dropped });
    }
    let dataset = Dataset::new(
        schema.covariates.clone(),
        resp_cols.iter().map(|&c| header[c].clone()).collect(),
        schema.batches.clone(),
        Array2::from_shape_vec((n, cov_cols.len()), cov).expect("row-major covariates"),
        Array2::from_shape_vec((n, resp_cols.len()), resp).expect("row-major responses"),
        labels,
        subjects,
        groups,
    )?;
    Ok(Ingested { dataset, dropped })
}

/// Write in the layout described by [`Schema::for_dataset`]. Floats use the
/// shortest representation that parses back to the same value.
pub fn write_csv<W: Write>(ds: &Dataset, writer: W) -> Result<(), DataError> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["subject_id".to_string()];
    header.extend(ds.covariate_names.iter().cloned());
    header.extend(ds.batch_names.iter().cloned());
    header.push("group".into());
    header.extend(ds.response_names.iter().cloned());
    w.write_record(&header)?;
    for r in 0..ds.n_rows() {
        let mut row = vec![ds.subject_ids[r].clone()];
        row.extend(ds.covariates.row(r).iter().map(|v| v.to_string()));
        row.extend(ds.batch_labels[r].0.iter().cloned());
        row.push(ds.groups[r].to_string());
        row.extend(ds.responses.row(r).iter().map(|v| v.to_string()));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Per-covariate z-scoring constants plus per-unit training response moments.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub covariate_mean: Vec<f64>,
    pub covariate_sd: Vec<f64>,
    pub response_mean: Vec<f64>,
    /// Population variance (1/n) of each training response unit.
    pub response_var: Vec<f64>,
}

impl Standardizer {
    pub fn fit(ds: &Dataset) -> Result<Standardizer, DataError> {
        let mut covariate_mean = Vec::new();
        let mut covariate_sd = Vec::new();
        for (j, col) in ds.covariates.columns().into_iter().enumerate() {
            let (m, v) = moments(col.iter().copied());
            if !(v > 0.0) {
                return Err(DataError::ConstantColumn(ds.covariate_names[j].clone()));
            }
            covariate_mean.push(m);
            covariate_sd.push(v.sqrt());
        }
        let mut response_mean = Vec::new();
        let mut response_var = Vec::new();
        for (j, col) in ds.responses.columns().into_iter().enumerate() {
            let (m, v) = moments(col.iter().copied());
            if !(v > 0.0) {
                return Err(DataError::ConstantColumn(ds.response_names[j].clone()));
            }
            response_mean.push(m);
            response_var.push(v);
        }
        Ok(Standardizer {
            covariate_mean,
            covariate_sd,
            response_mean,
            response_var,
        })
    }

    pub fn response_sd(&self, unit: usize) -> f64 {
        self.response_var[unit].sqrt()
    }

    pub fn transform_covariates(&self, x: &Array2<f64>) -> Array2<f64> {
        let mut out = x.clone();
        for (j, mut col) in out.columns_mut().into_iter().enumerate() {
            let (m, s) = (self.covariate_mean[j], self.covariate_sd[j]);
            col.mapv_inplace(|v| (v - m) / s);
        }
        out
    }

    pub fn inverse_covariates(&self, z: &Array2<f64>) -> Array2<f64> {
        let mut out = z.clone();
        for (j, mut col) in out.columns_mut().into_iter().enumerate() {
            let (m, s) = (self.covariate_mean[j], self.covariate_sd[j]);
            col.mapv_inplace(|v| v * s + m);
        }
        out
    }

    pub fn standardize_response(&self, unit: usize, y: f64) -> f64 {
        (y - self.response_mean[unit]) / self.response_sd(unit)
    }

    pub fn unstandardize_response(&self, unit: usize, z: f64) -> f64 {
        z * self.response_sd(unit) + self.response_mean[unit]
    }

    /// Restrict the response moments to the listed units.
    pub fn select_units(&self, units: &[usize]) -> Standardizer {
        Standardizer {
            covariate_mean: self.covariate_mean.clone(),
            covariate_sd: self.covariate_sd.clone(),
            response_mean: units.iter().map(|&u| self.response_mean[u]).collect(),
            response_var: units.iter().map(|&u| self.response_var[u]).collect(),
        }
    }
}

fn moments(it: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = it.clone().count() as f64;
    let m = it.clone().sum::<f64>() / n;
    let v = it.map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    (m, v)
}

/// Stratified random split. Within each batch the eligible rows (healthy rows
/// when `healthy_only_train`, otherwise all rows) are shuffled and
/// `round(fraction · n_b)` of them, clamped to `[2, n_b]`, go to training.
/// Everything else, including all patients under `healthy_only_train`, goes to
/// the test set. Both outputs keep the original row order.
pub fn split(
    ds: &Dataset,
    fraction: f64,
    seed: u64,
    healthy_only_train: bool,
) -> Result<(Dataset, Dataset), DataError> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(DataError::InvalidFraction(fraction));
    }
    let index = ds.batch_index();
    let batch_of = index.assign(&ds.batch_labels)?;
    let mut per_batch: Vec<Vec<usize>> = vec![Vec::new(); index.len()];
    for r in 0..ds.n_rows() {
        if !healthy_only_train || ds.groups[r].is_healthy() {
            per_batch[batch_of[r]].push(r);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut in_train = vec![false; ds.n_rows()];
    for (b, rows) in per_batch.iter_mut().enumerate() {
        if rows.len() < 2 {
            return Err(DataError::Stratification {
                batch: index.labels()[b].to_string(),
                healthy: rows.len(),
            });
        }
        rows.shuffle(&mut rng);
        let take = ((fraction * rows.len() as f64).round() as usize).clamp(2, rows.len());
        for &r in &rows[..take] {
            in_train[r] = true;
        }
    }
    let train: Vec<usize> = (0..ds.n_rows()).filter(|&r| in_train[r]).collect();
    let test: Vec<usize> = (0..ds.n_rows()).filter(|&r| !in_train[r]).collect();
    Ok((ds.subset(&train), ds.subset(&test)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn toy(n: usize, batches: &[&str]) -> Dataset {
        let cov = Array2::from_shape_fn((n, 1), |(i, _)| i as f64);
        let resp = Array2::from_shape_fn((n, 2), |(i, j)| (i * (j + 1)) as f64 * 0.5 + 1.0);
        Dataset::new(
            vec!["age".into()],
            vec!["r1".into(), "r2".into()],
            vec!["site".into()],
            cov,
            resp,
            (0..n)
                .map(|i| BatchLabel(vec![batches[i % batches.len()].to_string()]))
                .collect(),
            (0..n).map(|i| format!("s{i}")).collect(),
            vec![Group::Healthy; n],
        )
        .unwrap()
    }

    #[test]
    fn drops_row_with_empty_response() {
        let csv = "id,age,site,r1\n\
                   a,10,A,1.0\nb,11,A,\nc,12,B,3.0\nd,13,B,4.5\ne,14,A,2.0\nf,15,B,2.5\n";
        let schema =
            Schema::parse("subject=id\ncovariates=age\nresponses=r1\nbatches=site").unwrap();
        let ing = ingest_reader(csv.as_bytes(), &schema).unwrap();
        assert_eq!(ing.dataset.n_rows(), 5);
        assert_eq!(ing.dropped, 1);
    }

    #[test]
    fn covariate_column_passes_through_bit_for_bit() {
        let ages = ["8.125", "97.0000000001", "33.3", "1e1", "0.1"];
        let mut csv = String::from("id,age,site,r\n");
        for (i, a) in ages.iter().enumerate() {
            csv.push_str(&format!("s{i},{a},X,{i}.5\n"));
        }
        let schema =
            Schema::parse("subject=id\ncovariates=age\nresponses=r\nbatches=site").unwrap();
        let ds = ingest_reader(csv.as_bytes(), &schema).unwrap().dataset;
        for (i, a) in ages.iter().enumerate() {
            assert_eq!(
                ds.covariates()[[i, 0]].to_bits(),
                a.parse::<f64>().unwrap().to_bits()
            );
        }
    }

    #[test]
    fn composite_batch_index_matches_cross_product() {
        let mut csv = String::from("id,age,site,sex,r\n");
        let mut expected = BTreeSet::new();
        let mut i = 0;
        for site in ["S1", "S2"] {
            for sex in ["F", "M"] {
                for _ in 0..3 {
                    csv.push_str(&format!("p{i},{},{site},{sex},{}\n", 20 + i, i));
                    i += 1;
                }
                expected.insert((site, sex));
            }
        }
        let schema =
            Schema::parse("subject=id\ncovariates=age\nresponses=r\nbatches=site,sex").unwrap();
        let ds = ingest_reader(csv.as_bytes(), &schema).unwrap().dataset;
        let idx = ds.batch_index();
        assert_eq!(idx.len(), expected.len());
        assert_eq!(idx.len(), 4);
        assert_eq!(idx.counts().iter().sum::<usize>(), ds.n_rows());
    }

    #[test]
    fn schema_errors() {
        assert!(matches!(
            Schema::parse("covariates=age\nbatches=s"),
            Err(DataError::Schema(_))
        ));
        let schema =
            Schema::parse("subject=id\ncovariates=age\nresponses=r\nbatches=site").unwrap();
        let err = ingest_reader("id,age,r\na,1,2\n".as_bytes(), &schema).unwrap_err();
        assert!(matches!(err, DataError::MissingColumn(c) if c == "site"));
        let err = ingest_reader("id,age,site,r\na,1,X,\n".as_bytes(), &schema).unwrap_err();
        assert!(matches!(err, DataError::NoUsableRows { dropped: 1 }));
    }

    #[test]
    fn response_prefix_pattern() {
        let csv = "id,age,site,roi_a,roi_b,other\nx,1,A,1,2,3\n";
        let schema =
            Schema::parse("subject=id\ncovariates=age\nresponses=roi_*\nbatches=site").unwrap();
        let ds = ingest_reader(csv.as_bytes(), &schema).unwrap().dataset;
        assert_eq!(
            ds.response_names(),
            &["roi_a".to_string(), "roi_b".to_string()]
        );
    }

    #[test]
    fn group_parsing() {
        assert_eq!("healthy".parse::<Group>().unwrap(), Group::Healthy);
        assert_eq!(
            "patient:SZ".parse::<Group>().unwrap(),
            Group::Patient("SZ".into())
        );
        assert!("sick".parse::<Group>().is_err());
    }

    #[test]
    fn split_sizes_and_determinism() {
        let ds = toy(100, &["A"]);
        let (tr, te) = split(&ds, 0.8, 7, true).unwrap();
        assert_eq!((tr.n_rows(), te.n_rows()), (80, 20));
        let (tr2, _) = split(&ds, 0.8, 7, true).unwrap();
        assert_eq!(tr.subject_ids(), tr2.subject_ids());
        let (tr3, _) = split(&ds, 0.8, 8, true).unwrap();
        assert_ne!(tr.subject_ids(), tr3.subject_ids());
    }

    #[test]
    fn patients_always_in_test() {
        let mut ds = toy(40, &["A", "B"]);
        for r in (0..40).step_by(5) {
            ds.groups[r] = Group::Patient("SZ".into());
        }
        let (tr, te) = split(&ds, 0.5, 1, true).unwrap();
        assert!(tr.groups().iter().all(Group::is_healthy));
        assert_eq!(te.groups().iter().filter(|g| !g.is_healthy()).count(), 8);
        assert_eq!(tr.n_rows(), 16);
    }

    #[test]
    fn split_rejects_thin_batch() {
        let ds = toy(5, &["A", "A", "A", "A", "B"]);
        assert!(matches!(
            split(&ds, 0.8, 0, true),
            Err(DataError::Stratification { .. })
        ));
        assert!(matches!(
            split(&ds, 1.0, 0, true),
            Err(DataError::InvalidFraction(_))
        ));
    }

    #[test]
    fn standardizer_round_trip_and_constant_rejection() {
        let ds = toy(30, &["A"]);
        let st = Standardizer::fit(&ds).unwrap();
        let z = st.transform_covariates(ds.covariates());
        let back = st.inverse_covariates(&z);
        for (a, b) in back.iter().zip(ds.covariates().iter()) {
            assert!((a - b).abs() <= 1e-10 * b.abs().max(1.0));
        }
        let constant = Dataset::new(
            vec!["age".into()],
            vec!["r".into()],
            vec!["site".into()],
            array![[1.0], [1.0]],
            array![[1.0], [2.0]],
            vec![BatchLabel(vec!["A".into()]); 2],
            vec!["a".into(), "b".into()],
            vec![Group::Healthy; 2],
        )
        .unwrap();
        assert!(
            matches!(Standardizer::fit(&constant), Err(DataError::ConstantColumn(c)) if c == "age")
        );
    }
}
