//! Heartbeat record ingestion, standardization, stratified sampling and batching.
//!
//! Records are 188 comma-separated numbers: 187 amplitude samples followed by
//! an integral label. Labels follow the preprocessed-dataset convention
//! 0→N, 1→S, 2→V, 3→F, 4→Q.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const BEAT_LEN: usize = 187;
pub const RECORD_LEN: usize = BEAT_LEN + 1;
pub const NUM_CLASSES: usize = 5;
pub const CLASS_NAMES: [&str; NUM_CLASSES] = ["N", "S", "V", "F", "Q"];

/// Substituted for the standard deviation of (near-)constant columns.
pub const STD_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Tensor,
    labels: Vec<usize>,
    source: String,
    norm_id: Option<String>,
}

impl Dataset {
    pub fn new(features: Tensor, labels: Vec<usize>, source: impl Into<String>) -> Result<Self> {
        if features.rank() != 2 || features.shape()[0] != labels.len() {
            return Err(Error::dim("dataset", features.shape(), &[labels.len()]));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= NUM_CLASSES) {
            return Err(Error::Contract(format!("label {bad} outside 0..{NUM_CLASSES}")));
        }
        Ok(Self {
            features,
            labels,
            source: source.into(),
            norm_id: None,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn width(&self) -> usize {
        self.features.shape()[1]
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    /// Identifier of the statistics this dataset was normalized with, if any.
    pub fn norm_id(&self) -> Option<&str> {
        self.norm_id.as_deref()
    }

    /// Stable identifier used to tag fitted statistics.
    pub fn id(&self) -> String {
        format!("{}#{}", self.source, self.len())
    }

    pub fn class_counts(&self) -> [usize; NUM_CLASSES] {
        let mut counts = [0; NUM_CLASSES];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// Rows at `indices`, in that order.
    pub fn select(&self, indices: &[usize], source: impl Into<String>) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::InsufficientData("selection is empty".into()));
        }
        let w = self.width();
        let mut data = Vec::with_capacity(indices.len() * w);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(self.features.row(i));
            labels.push(self.labels[i]);
        }
        Ok(Self {
            features: Tensor::new(vec![indices.len(), w], data)?,
            labels,
            source: source.into(),
            norm_id: self.norm_id.clone(),
        })
    }

    /// Writes the dataset in the 188-column record format.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        for (i, &l) in self.labels.iter().enumerate() {
            for v in self.features.row(i) {
                write!(out, "{v},")?;
            }
            writeln!(out, "{l}")?;
        }
        out.flush()?;
        Ok(())
    }
}

fn parse_field(path: &Path, row: usize, col: usize, s: &str) -> Result<f64> {
    let v: f64 = s.trim().parse().map_err(|_| Error::Data {
        path: path.to_path_buf(),
        row,
        msg: format!("field {} is not numeric: '{s}'", col + 1),
    })?;
    if !v.is_finite() {
        return Err(Error::Data {
            path: path.to_path_buf(),
            row,
            msg: format!("field {} is not finite", col + 1),
        });
    }
    Ok(v)
}

fn parse_label(path: &Path, row: usize, v: f64) -> Result<usize> {
    let r = v.round();
    if !(0.0..NUM_CLASSES as f64).contains(&r) {
        return Err(Error::Data {
            path: path.to_path_buf(),
            row,
            msg: format!("label {v} outside 0..{}", NUM_CLASSES - 1),
        });
    }
    Ok(r as usize)
}

fn reader(path: &Path) -> Result<csv::Reader<std::fs::File>> {
    let file = std::fs::File::open(path)?;
    Ok(csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(file))
}

fn csv_error(path: &Path, row: usize, e: csv::Error) -> Error {
    Error::Data {
        path: path.to_path_buf(),
        row,
        msg: e.to_string(),
    }
}

/// Loads a labeled record file. Row numbers in errors are 1-based.
pub fn load_csv(path: &Path) -> Result<Dataset> {
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for (i, rec) in reader(path)?.records().enumerate() {
        let row = i + 1;
        let rec = rec.map_err(|e| csv_error(path, row, e))?;
        if rec.len() != RECORD_LEN {
            return Err(Error::Data {
                path: path.to_path_buf(),
                row,
                msg: format!("expected {RECORD_LEN} fields, found {}", rec.len()),
            });
        }
        for (col, field) in rec.iter().take(BEAT_LEN).enumerate() {
            data.push(parse_field(path, row, col, field)?);
        }
        let raw = parse_field(path, row, BEAT_LEN, &rec[BEAT_LEN])?;
        labels.push(parse_label(path, row, raw)?);
    }
    if labels.is_empty() {
        return Err(Error::InsufficientData(format!("{} has no rows", path.display())));
    }
    let features = Tensor::new(vec![labels.len(), BEAT_LEN], data)?;
    Dataset::new(features, labels, path.display().to_string())
}

/// Loads rows of 187 samples, optionally followed by a label.
///
/// Returns the features and, when every row carries one, the labels.
pub fn load_unlabeled_csv(path: &Path) -> Result<(Tensor, Option<Vec<usize>>)> {
    let mut data = Vec::new();
    let mut labels = Vec::new();
    let mut all_labeled = true;
    let mut rows = 0;
    for (i, rec) in reader(path)?.records().enumerate() {
        let row = i + 1;
        let rec = rec.map_err(|e| csv_error(path, row, e))?;
        if rec.len() != BEAT_LEN && rec.len() != RECORD_LEN {
            return Err(Error::Data {
                path: path.to_path_buf(),
                row,
                msg: format!("expected {BEAT_LEN} or {RECORD_LEN} fields, found {}", rec.len()),
            });
        }
        for (col, field) in rec.iter().take(BEAT_LEN).enumerate() {
            data.push(parse_field(path, row, col, field)?);
        }
        if rec.len() == RECORD_LEN {
            let raw = parse_field(path, row, BEAT_LEN, &rec[BEAT_LEN])?;
            labels.push(parse_label(path, row, raw)?);
        } else {
            all_labeled = false;
        }
        rows += 1;
    }
    if rows == 0 {
        return Err(Error::InsufficientData(format!("{} has no rows", path.display())));
    }
    let features = Tensor::new(vec![rows, BEAT_LEN], data)?;
    Ok((features, all_labeled.then_some(labels)))
}

/// Per-feature mean and population standard deviation.
#[derive(Debug, Clone, PartialEq)]
pub struct NormStats {
    pub mean: Tensor,
    pub std: Tensor,
    pub fitted_on: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Normalization {
    /// Column-wise standardization with statistics fitted on the training split.
    PerFeature,
    /// Each record standardized by its own mean and deviation.
    PerSample,
}

impl Normalization {
    pub fn as_str(self) -> &'static str {
        match self {
            Normalization::PerFeature => "per_feature",
            Normalization::PerSample => "per_sample",
        }
    }
}

impl std::str::FromStr for Normalization {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "per_feature" => Ok(Normalization::PerFeature),
            "per_sample" => Ok(Normalization::PerSample),
            other => Err(format!("unknown normalization '{other}'")),
        }
    }
}

pub fn fit_normalizer(train: &Dataset) -> Result<NormStats> {
    let n = train.len();
    if n < 2 {
        return Err(Error::InsufficientData(format!(
            "need at least 2 rows to fit normalization, got {n}"
        )));
    }
    let w = train.width();
    let mut mean = vec![0.0; w];
    for i in 0..n {
        for (m, v) in mean.iter_mut().zip(train.features.row(i)) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut var = vec![0.0; w];
    for i in 0..n {
        for ((s, v), m) in var.iter_mut().zip(train.features.row(i)).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    let std: Vec<f64> = var
        .into_iter()
        .map(|s| (s / n as f64).sqrt().max(STD_FLOOR))
        .collect();
    Ok(NormStats {
        mean: Tensor::vector(mean),
        std: Tensor::vector(std),
        fitted_on: train.id(),
    })
}

impl NormStats {
    /// Column-wise `(x - mean) / std` on a `[N, width]` matrix.
    pub fn apply(&self, features: &Tensor) -> Result<Tensor> {
        let w = features.last_dim();
        if features.rank() != 2 || self.mean.numel() != w || self.std.numel() != w {
            return Err(Error::dim("apply_normalizer", features.shape(), self.mean.shape()));
        }
        let (mean, std) = (self.mean.data(), self.std.data());
        let data = features
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| (x - mean[i % w]) / std[i % w])
            .collect();
        Tensor::new(features.shape().to_vec(), data)
    }
}

pub fn apply_normalizer(ds: &Dataset, stats: &NormStats) -> Result<Dataset> {
    Ok(Dataset {
        features: stats.apply(&ds.features)?,
        labels: ds.labels.clone(),
        source: ds.source.clone(),
        norm_id: Some(stats.fitted_on.clone()),
    })
}

/// Standardizes every row of a `[N, width]` matrix by its own statistics.
pub fn standardize_rows(features: &Tensor) -> Tensor {
    let w = features.last_dim();
    let mut data = features.data().to_vec();
    for row in data.chunks_exact_mut(w) {
        let mean = row.iter().sum::<f64>() / w as f64;
        let std = (row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / w as f64)
            .sqrt()
            .max(STD_FLOOR);
        row.iter_mut().for_each(|v| *v = (*v - mean) / std);
    }
    Tensor::new(features.shape().to_vec(), data).unwrap()
}

pub fn normalize_per_sample(ds: &Dataset) -> Dataset {
    Dataset {
        features: standardize_rows(&ds.features),
        labels: ds.labels.clone(),
        source: ds.source.clone(),
        norm_id: Some("per_sample".into()),
    }
}

/// Largest-remainder allocation of `n` draws across classes in proportion to
/// `counts`, with at least one draw for every present class.
pub fn stratified_allocation(counts: &[usize], n: usize) -> Vec<usize> {
    let total: usize = counts.iter().sum();
    let mut alloc: Vec<usize> = counts.iter().map(|&c| n * c / total).collect();
    let remainder: Vec<usize> = counts.iter().map(|&c| n * c % total).collect();
    let mut order: Vec<usize> = (0..counts.len()).collect();
    order.sort_by(|&a, &b| remainder[b].cmp(&remainder[a]).then(a.cmp(&b)));
    let short = n - alloc.iter().sum::<usize>();
    for &c in order.iter().take(short) {
        alloc[c] += 1;
    }
    for c in 0..counts.len() {
        if counts[c] > 0 && alloc[c] == 0 {
            // Take the draw from the class furthest above its exact quota.
            let donor = (0..counts.len())
                .filter(|&d| alloc[d] > 1)
                .max_by_key(|&d| (alloc[d] * total) as i128 - (n * counts[d]) as i128)
                .expect("n >= number of present classes");
            alloc[donor] -= 1;
            alloc[c] = 1;
        }
    }
    alloc
}

/// Splits `ds` into a stratified sample of `n` rows and the remainder.
///
/// Both parts keep the original row order. The remainder is `None` when
/// `n == ds.len()`.
pub fn stratified_split(ds: &Dataset, n: usize, seed: u64) -> Result<(Dataset, Option<Dataset>)> {
    let present = ds.class_counts().iter().filter(|&&c| c > 0).count();
    if n < NUM_CLASSES.min(ds.len()) || n < present || n > ds.len() {
        return Err(Error::config(format!(
            "subset size {n} must be within {}..={}",
            NUM_CLASSES.max(present).min(ds.len()),
            ds.len()
        )));
    }
    let counts = ds.class_counts();
    let alloc = stratified_allocation(&counts, n);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = vec![false; ds.len()];
    for (class, &take) in alloc.iter().enumerate() {
        let mut idx: Vec<usize> = (0..ds.len()).filter(|&i| ds.labels[i] == class).collect();
        idx.shuffle(&mut rng);
        for &i in &idx[..take] {
            chosen[i] = true;
        }
    }
    let picked: Vec<usize> = (0..ds.len()).filter(|&i| chosen[i]).collect();
    let rest: Vec<usize> = (0..ds.len()).filter(|&i| !chosen[i]).collect();
    let sample = ds.select(&picked, format!("{}[n={n},seed={seed}]", ds.source))?;
    let remainder = if rest.is_empty() {
        None
    } else {
        Some(ds.select(&rest, format!("{}[rest n={n},seed={seed}]", ds.source))?)
    };
    Ok((sample, remainder))
}

pub fn stratified_subset(ds: &Dataset, n: usize, seed: u64) -> Result<Dataset> {
    Ok(stratified_split(ds, n, seed)?.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub features: Tensor,
    pub labels: Vec<usize>,
}

/// Covers every row exactly once; the last batch may be short.
pub fn batches(ds: &Dataset, batch_size: usize, shuffle: bool, seed: u64) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(Error::config("batch_size must be >= 1"));
    }
    let mut order: Vec<usize> = (0..ds.len()).collect();
    if shuffle {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    let w = ds.width();
    order
        .chunks(batch_size)
        .map(|idx| {
            let mut data = Vec::with_capacity(idx.len() * w);
            for &i in idx {
                data.extend_from_slice(ds.features.row(i));
            }
            Ok(Batch {
                features: Tensor::new(vec![idx.len(), w], data)?,
                labels: idx.iter().map(|&i| ds.labels[i]).collect(),
            })
        })
        .collect()
}
