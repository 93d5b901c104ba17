//! Labeled tabular datasets: CSV I/O, z-score standardization, stratified
//! splitting and a seeded long-tail synthetic generator.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::Read;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seed::rng_from_seed;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("empty file: no header row")]
    Empty,
    #[error("csv error at line {line}: {message}")]
    Csv { line: u64, message: String },
    #[error("missing header: label column `{0}` not found")]
    MissingLabelColumn(String),
    #[error("duplicate header `{0}`")]
    DuplicateHeader(String),
    #[error("empty header name in column {0}")]
    EmptyHeader(usize),
    #[error("non-numeric cell `{value}` at line {line}, column `{column}`")]
    NonNumeric {
        line: u64,
        column: String,
        value: String,
    },
    #[error("label `{label}` at line {line} is not in the declared class order")]
    UnknownLabel { line: u64, label: String },
    #[error("invalid dataset: {0}")]
    Invalid(String),
    #[error("dataset is already standardized")]
    AlreadyStandardized,
    #[error("standardization has {got} entries, dataset has {expected} features")]
    StatsLength { expected: usize, got: usize },
    #[error("class `{class}` has {count} sample(s); stratified split needs at least 2")]
    ClassTooSmall { class: String, count: usize },
    #[error("test fraction {0} outside (0, 1)")]
    BadFraction(f64),
    #[error("invalid synthetic config: {0}")]
    BadSyntheticConfig(String),
    #[error("config parse error: {0}")]
    ConfigParse(String),
}

pub type Result<T, E = DataError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub features: Vec<f64>,
    pub label: usize,
}

/// Per-feature standardization statistics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub mean: f64,
    pub stddev: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    samples: Vec<Sample>,
    feature_names: Vec<String>,
    class_names: Vec<String>,
    standardization: Option<Vec<FeatureStats>>,
}

impl Dataset {
    /// Builds a dataset, checking shape and label invariants.
    pub fn new(
        samples: Vec<Sample>,
        feature_names: Vec<String>,
        class_names: Vec<String>,
    ) -> Result<Self> {
        if samples.is_empty() {
            return Err(DataError::Invalid(
                "dataset needs at least one sample".into(),
            ));
        }
        if class_names.len() < 2 {
            return Err(DataError::Invalid(format!(
                "dataset needs at least 2 classes, got {}",
                class_names.len()
            )));
        }
        let d = feature_names.len();
        if d == 0 {
            return Err(DataError::Invalid(
                "dataset needs at least one feature".into(),
            ));
        }
        for (i, s) in samples.iter().enumerate() {
            if s.features.len() != d {
                return Err(DataError::Invalid(format!(
                    "sample {i} has {} features, expected {d}",
                    s.features.len()
                )));
            }
            if s.label >= class_names.len() {
                return Err(DataError::Invalid(format!(
                    "sample {i} has label {} outside [0, {})",
                    s.label,
                    class_names.len()
                )));
            }
        }
        Ok(Self {
            samples,
            feature_names,
            class_names,
            standardization: None,
        })
    }

    /// Same schema, different rows. Standardization record is kept.
    pub fn with_samples(&self, samples: Vec<Sample>) -> Result<Self> {
        let mut out = Self::new(
            samples,
            self.feature_names.clone(),
            self.class_names.clone(),
        )?;
        out.standardization = self.standardization.clone();
        Ok(out)
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn standardization(&self) -> Option<&[FeatureStats]> {
        self.standardization.as_deref()
    }

    pub fn n(&self) -> usize {
        self.samples.len()
    }

    pub fn d(&self) -> usize {
        self.feature_names.len()
    }

    pub fn m(&self) -> usize {
        self.class_names.len()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label).collect()
    }

    pub fn feature_rows(&self) -> Vec<Vec<f64>> {
        self.samples.iter().map(|s| s.features.clone()).collect()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.m()];
        for s in &self.samples {
            counts[s.label] += 1;
        }
        counts
    }

    /// Serializes as CSV with the label written as its class name in the last column.
    pub fn to_csv_string(&self, label_column: &str) -> String {
        let mut out = String::new();
        for name in &self.feature_names {
            out.push_str(&csv_field(name));
            out.push(',');
        }
        out.push_str(&csv_field(label_column));
        out.push('\n');
        for s in &self.samples {
            for v in &s.features {
                // `Display` for f64 is the shortest representation that round-trips.
                out.push_str(&v.to_string());
                out.push(',');
            }
            out.push_str(&csv_field(&self.class_names[s.label]));
            out.push('\n');
        }
        out
    }

    pub fn write_csv(&self, path: impl AsRef<Path>, label_column: &str) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_csv_string(label_column)).map_err(|source| DataError::Io {
            path: path.display().to_string(),
            source,
        })
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n', '\r']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Parses CSV bytes into a dataset.
///
/// Labels map to class indices in first-appearance order unless
/// `class_order` is given, in which case that order fixes the indices.
pub fn parse_csv(
    bytes: &[u8],
    label_column: &str,
    class_order: Option<&[String]>,
) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(false)
        .from_reader(bytes);
    let mut records = reader.records();
    let header = match records.next() {
        None => return Err(DataError::Empty),
        Some(r) => r.map_err(csv_err)?,
    };
    let header: Vec<String> = header.iter().map(|h| h.trim().to_string()).collect();
    if header.len() == 1 && header[0].is_empty() {
        return Err(DataError::Empty);
    }
    let mut seen = HashSet::new();
    for (i, h) in header.iter().enumerate() {
        if h.is_empty() {
            return Err(DataError::EmptyHeader(i));
        }
        if !seen.insert(h.as_str()) {
            return Err(DataError::DuplicateHeader(h.clone()));
        }
    }
    let label_idx = header
        .iter()
        .position(|h| h == label_column)
        .ok_or_else(|| DataError::MissingLabelColumn(label_column.to_string()))?;
    let feature_names: Vec<String> = header
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != label_idx)
        .map(|(_, h)| h.clone())
        .collect();

    let mut class_names: Vec<String> = class_order.map(<[String]>::to_vec).unwrap_or_default();
    let mut class_index: BTreeMap<String, usize> = class_names
        .iter()
        .enumerate()
        .map(|(i, c)| (c.clone(), i))
        .collect();
    if class_index.len() != class_names.len() {
        return Err(DataError::Invalid("class order contains duplicates".into()));
    }

    let mut samples = Vec::new();
    for record in records {
        let record = record.map_err(csv_err)?;
        let line = record.position().map_or(0, |p| p.line());
        let mut features = Vec::with_capacity(feature_names.len());
        let mut label = None;
        for (i, cell) in record.iter().enumerate() {
            if i == label_idx {
                let name = cell.trim();
                let idx = match class_index.get(name) {
                    Some(&idx) => idx,
                    None if class_order.is_some() => {
                        return Err(DataError::UnknownLabel {
                            line,
                            label: name.to_string(),
                        })
                    }
                    None => {
                        class_names.push(name.to_string());
                        class_index.insert(name.to_string(), class_names.len() - 1);
                        class_names.len() - 1
                    }
                };
                label = Some(idx);
            } else {
                let v: f64 = cell
                    .trim()
                    .parse()
                    .ok()
                    .filter(|v: &f64| v.is_finite())
                    .ok_or_else(|| DataError::NonNumeric {
                        line,
                        column: header[i].clone(),
                        value: cell.to_string(),
                    })?;
                features.push(v);
            }
        }
        let label = label.ok_or_else(|| DataError::Csv {
            line,
            message: "row has no label cell".into(),
        })?;
        samples.push(Sample { features, label });
    }
    Dataset::new(samples, feature_names, class_names)
}

fn csv_err(e: csv::Error) -> DataError {
    let line = e.position().map_or(0, |p| p.line());
    DataError::Csv {
        line,
        message: e.to_string(),
    }
}

pub fn load_csv(path: impl AsRef<Path>, label_column: &str) -> Result<Dataset> {
    load_csv_with_order(path, label_column, None)
}

pub fn load_csv_with_order(
    path: impl AsRef<Path>,
    label_column: &str,
    class_order: Option<&[String]>,
) -> Result<Dataset> {
    let path = path.as_ref();
    let io_err = |source| DataError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(io_err)?;
    parse_csv(&bytes, label_column, class_order)
}

/// Population mean and standard deviation of every feature.
///
/// Constant features get stddev 1 so that they map to 0.
pub fn fit_standardization(data: &Dataset) -> Vec<FeatureStats> {
    let n = data.n() as f64;
    (0..data.d())
        .map(|j| {
            let mean = data.samples.iter().map(|s| s.features[j]).sum::<f64>() / n;
            let var = data
                .samples
                .iter()
                .map(|s| (s.features[j] - mean).powi(2))
                .sum::<f64>()
                / n;
            let stddev = var.sqrt();
            if stddev > 0.0 && stddev.is_finite() {
                FeatureStats { mean, stddev }
            } else {
                FeatureStats { mean, stddev: 1.0 }
            }
        })
        .collect()
}

/// Z-scores every feature using the dataset's own statistics.
pub fn standardize(data: &Dataset) -> Result<Dataset> {
    if data.standardization.is_some() {
        return Err(DataError::AlreadyStandardized);
    }
    let stats = fit_standardization(data);
    apply_standardization(data, &stats)
}

/// Transforms with externally fitted statistics, e.g. test rows with train statistics.
pub fn apply_standardization(data: &Dataset, stats: &[FeatureStats]) -> Result<Dataset> {
    if stats.len() != data.d() {
        return Err(DataError::StatsLength {
            expected: data.d(),
            got: stats.len(),
        });
    }
    if let Some(bad) = stats.iter().position(|s| !(s.stddev > 0.0)) {
        return Err(DataError::Invalid(format!(
            "feature {bad} has non-positive stddev"
        )));
    }
    let samples = data
        .samples
        .iter()
        .map(|s| Sample {
            features: s
                .features
                .iter()
                .zip(stats)
                .map(|(x, st)| {
                    let z = (x - st.mean) / st.stddev;
                    // constant features would otherwise leave -0.0 / rounding residue
                    if z == 0.0 {
                        0.0
                    } else {
                        z
                    }
                })
                .collect(),
            label: s.label,
        })
        .collect();
    let mut out = data.with_samples(samples)?;
    out.standardization = Some(stats.to_vec());
    Ok(out)
}

/// Splits per class: `max(1, floor(count * test_fraction))` rows of each class
/// go to test, chosen by a seeded shuffle. Both halves keep dataset order.
pub fn stratified_split(
    data: &Dataset,
    test_fraction: f64,
    seed: u64,
) -> Result<(Dataset, Dataset)> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(DataError::BadFraction(test_fraction));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); data.m()];
    for (i, s) in data.samples.iter().enumerate() {
        by_class[s.label].push(i);
    }
    for (c, rows) in by_class.iter().enumerate() {
        if rows.len() == 1 {
            return Err(DataError::ClassTooSmall {
                class: data.class_names[c].clone(),
                count: rows.len(),
            });
        }
    }
    let mut rng = rng_from_seed(seed);
    let mut is_test = vec![false; data.n()];
    for rows in by_class.iter_mut() {
        if rows.is_empty() {
            continue;
        }
        rows.shuffle(&mut rng);
        let take = ((rows.len() as f64 * test_fraction).floor() as usize).max(1);
        for &i in rows.iter().take(take) {
            is_test[i] = true;
        }
    }
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (s, &t) in data.samples.iter().zip(&is_test) {
        if t {
            test.push(s.clone());
        } else {
            train.push(s.clone());
        }
    }
    Ok((data.with_samples(train)?, data.with_samples(test)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticConfig {
    pub n: usize,
    pub d: usize,
    pub m: usize,
    pub imbalance_exponent: f64,
    pub class_separation: f64,
    pub noise_scale: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n: 1000,
            d: 39,
            m: 9,
            imbalance_exponent: 1.2,
            class_separation: 3.0,
            noise_scale: 1.0,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        toml::from_str(s).map_err(|e| DataError::ConfigParse(e.to_string()))
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| DataError::ConfigParse(e.to_string()))
    }

    /// Reads a `.json` file as JSON and anything else as TOML.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| DataError::Io {
            path: path.display().to_string(),
            source,
        })?;
        if path.extension().is_some_and(|e| e == "json") {
            Self::from_json_str(&text)
        } else {
            Self::from_toml_str(&text)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(DataError::BadSyntheticConfig(m.to_string()));
        if self.m < 2 {
            return bad("m must be at least 2");
        }
        if self.d == 0 {
            return bad("d must be at least 1");
        }
        if self.n < self.m {
            return bad("n < m: cannot give every class a sample");
        }
        if !(self.imbalance_exponent >= 0.0 && self.imbalance_exponent.is_finite()) {
            return bad("imbalance_exponent must be finite and >= 0");
        }
        if !(self.class_separation > 0.0 && self.class_separation.is_finite()) {
            return bad("class_separation must be finite and > 0");
        }
        if !(self.noise_scale > 0.0 && self.noise_scale.is_finite()) {
            return bad("noise_scale must be finite and > 0");
        }
        Ok(())
    }

    /// Normalized Zipf-like prior, `prior(j) ∝ (j+1)^-imbalance_exponent`.
    pub fn class_priors(&self) -> Vec<f64> {
        let raw: Vec<f64> = (0..self.m)
            .map(|j| ((j + 1) as f64).powf(-self.imbalance_exponent))
            .collect();
        let total: f64 = raw.iter().sum();
        raw.into_iter().map(|p| p / total).collect()
    }

    /// Rounded class counts summing to `n`; the largest-prior class absorbs
    /// the rounding remainder and every class keeps at least one sample.
    pub fn class_counts(&self) -> Vec<usize> {
        let priors = self.class_priors();
        let mut counts: Vec<usize> = priors
            .iter()
            .map(|p| ((self.n as f64 * p).round() as usize).max(1))
            .collect();
        // class 0 always has the largest (or tied-largest) prior
        let rest: usize = counts[1..].iter().sum();
        counts[0] = self.n.saturating_sub(rest).max(1);
        // pathological exponents can push the rest above n; trim from the tail
        let mut j = self.m - 1;
        while counts.iter().sum::<usize>() > self.n && j > 0 {
            if counts[j] > 1 {
                counts[j] -= 1;
            } else {
                j -= 1;
            }
        }
        counts
    }
}

/// Draws a seeded long-tail Gaussian-cluster dataset.
pub fn generate_synthetic(config: &SyntheticConfig) -> Result<Dataset> {
    config.validate()?;
    let mut rng = rng_from_seed(config.seed);
    let means: Vec<Vec<f64>> = (0..config.m)
        .map(|_| {
            let mut v: Vec<f64> = (0..config.d)
                .map(|_| rng.sample::<f64, _>(StandardNormal))
                .collect();
            let norm = v
                .iter()
                .map(|x| x * x)
                .sum::<f64>()
                .sqrt()
                .max(f64::MIN_POSITIVE);
            v.iter_mut()
                .for_each(|x| *x *= config.class_separation / norm);
            v
        })
        .collect();
    let counts = config.class_counts();
    let mut samples = Vec::with_capacity(config.n);
    for (label, (&count, mean)) in counts.iter().zip(&means).enumerate() {
        for _ in 0..count {
            let features = mean
                .iter()
                .map(|mu| mu + config.noise_scale * rng.sample::<f64, _>(StandardNormal))
                .collect();
            samples.push(Sample { features, label });
        }
    }
    samples.shuffle(&mut rng);
    let feature_names = (0..config.d).map(|j| format!("f{j}")).collect();
    let class_names = (0..config.m).map(|j| format!("c{j}")).collect();
    Dataset::new(samples, feature_names, class_names)
}
