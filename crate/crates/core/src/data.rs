//! Datasets: synthetic two-moons and sine tasks, IDX (MNIST-style) and CSV
//! loaders, and a seeded train/test split with train-only normalization.

use std::f64::consts::PI;
use std::path::Path;

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::net::{Batch, BatchTargets};

/// IDX element type code for unsigned bytes.
pub const IDX_UBYTE: u8 = 0x08;
/// Images kept from an MNIST training file.
pub const MNIST_TRAIN_SUBSET: usize = 5000;
/// Images kept from an MNIST test file.
pub const MNIST_TEST_SUBSET: usize = 1000;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("bad IDX magic {bytes:02x?} at byte offset {offset}")]
    BadMagic { bytes: [u8; 4], offset: usize },
    #[error("truncated IDX file: need {needed} bytes at offset {offset}, have {available}")]
    Truncated {
        offset: usize,
        needed: usize,
        available: usize,
    },
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error("csv schema: {0}")]
    Schema(String),
    #[error("csv line {line}, column {column}: cannot parse {value:?}")]
    Parse {
        line: u64,
        column: String,
        value: String,
    },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("non-finite value at row {row}")]
    NonFinite { row: usize },
}

/// Labels of a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Targets {
    Classes { labels: Vec<usize>, classes: usize },
    Values(Vec<f64>),
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Classes { labels, .. } => labels.len(),
            Targets::Values(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn classes(&self) -> Option<usize> {
        match self {
            Targets::Classes { classes, .. } => Some(*classes),
            Targets::Values(_) => None,
        }
    }

    fn select(&self, idx: &[usize]) -> Targets {
        match self {
            Targets::Classes { labels, classes } => Targets::Classes {
                labels: idx.iter().map(|&i| labels[i]).collect(),
                classes: *classes,
            },
            Targets::Values(v) => Targets::Values(idx.iter().map(|&i| v[i]).collect()),
        }
    }
}

/// Row-major examples: `features` is `[n × in_dim]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Array2<f64>,
    pub targets: Targets,
}

/// Per-feature affine map fitted on training data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainTest {
    pub train: Dataset,
    pub test: Dataset,
    pub norm: Normalization,
}

impl Dataset {
    pub fn new(features: Array2<f64>, targets: Targets) -> Result<Self, DataError> {
        if features.nrows() != targets.len() {
            return Err(DataError::DimMismatch(format!(
                "{} feature rows vs {} targets",
                features.nrows(),
                targets.len()
            )));
        }
        for (row, r) in features.rows().into_iter().enumerate() {
            if r.iter().any(|v| !v.is_finite()) {
                return Err(DataError::NonFinite { row });
            }
        }
        match &targets {
            Targets::Classes { labels, classes } => {
                if let Some(&bad) = labels.iter().find(|&&l| l >= *classes) {
                    return Err(DataError::InvalidArgument(format!(
                        "label {bad} out of range for {classes} classes"
                    )));
                }
            }
            Targets::Values(v) => {
                if let Some(row) = v.iter().position(|x| !x.is_finite()) {
                    return Err(DataError::NonFinite { row });
                }
            }
        }
        Ok(Self { features, targets })
    }

    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn in_dim(&self) -> usize {
        self.features.ncols()
    }

    /// Output width of a model for this dataset.
    pub fn out_dim(&self) -> usize {
        self.targets.classes().unwrap_or(1)
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            features: self.features.select(Axis(0), idx),
            targets: self.targets.select(idx),
        }
    }

    /// Column-layout minibatch of the given rows.
    pub fn batch(&self, idx: &[usize]) -> Batch {
        let x = self.features.select(Axis(0), idx).reversed_axes();
        let targets = match &self.targets {
            Targets::Classes { labels, .. } => {
                BatchTargets::Classes(idx.iter().map(|&i| labels[i]).collect())
            }
            Targets::Values(v) => BatchTargets::Values(idx.iter().map(|&i| v[i]).collect()),
        };
        Batch {
            x: x.as_standard_layout().to_owned(),
            targets,
        }
    }

    /// The whole dataset as one batch.
    pub fn full_batch(&self) -> Batch {
        let idx: Vec<usize> = (0..self.len()).collect();
        self.batch(&idx)
    }

    /// Seeded shuffle into disjoint train/test parts; features are
    /// standardized with train statistics only.
    pub fn split(&self, test_fraction: f64, seed: u64) -> Result<TrainTest, DataError> {
        if !(0.0..1.0).contains(&test_fraction) {
            return Err(DataError::InvalidArgument(format!(
                "test fraction {test_fraction} outside [0, 1)"
            )));
        }
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n_test = (test_fraction * self.len() as f64).round() as usize;
        if n_test == 0 || n_test >= self.len() {
            return Err(DataError::InvalidArgument(format!(
                "split of {} rows leaves an empty part",
                self.len()
            )));
        }
        let (test_idx, train_idx) = idx.split_at(n_test);
        Ok(Self::normalized(
            self.subset(train_idx),
            self.subset(test_idx),
        ))
    }

    /// Standardize a given train/test pair with train statistics.
    pub fn normalized(mut train: Dataset, mut test: Dataset) -> TrainTest {
        let norm = Normalization::fit(&train.features);
        norm.apply(&mut train.features);
        norm.apply(&mut test.features);
        TrainTest { train, test, norm }
    }
}

impl Normalization {
    /// Column means and population standard deviations; constant columns
    /// keep unit scale.
    pub fn fit(features: &Array2<f64>) -> Self {
        let mean: Array1<f64> = features
            .mean_axis(Axis(0))
            .unwrap_or_else(|| Array1::zeros(features.ncols()));
        let std = features
            .std_axis(Axis(0), 0.0)
            .mapv(|s| if s > 1e-12 { s } else { 1.0 });
        Self {
            mean: mean.to_vec(),
            std: std.to_vec(),
        }
    }

    pub fn apply(&self, features: &mut Array2<f64>) {
        for mut row in features.rows_mut() {
            for ((v, m), s) in row.iter_mut().zip(&self.mean).zip(&self.std) {
                *v = (*v - m) / s;
            }
        }
    }
}

/// Two interleaving half circles. The first `n/2` rows are the upper moon
/// (label 0, centered at the origin), the rest the lower moon (label 1,
/// centered at (1, 0.5)); both have unit radius before noise.
pub fn gen_two_moons(n: usize, noise: f64, seed: u64) -> Result<Dataset, DataError> {
    if n < 2 {
        return Err(DataError::InvalidArgument(format!(
            "two moons needs n >= 2, got {n}"
        )));
    }
    if noise.is_nan() || noise < 0.0 {
        return Err(DataError::InvalidArgument(format!(
            "noise must be >= 0, got {noise}"
        )));
    }
    let n_upper = n / 2;
    let n_lower = n - n_upper;
    let angle = |i: usize, m: usize| {
        if m > 1 {
            PI * i as f64 / (m - 1) as f64
        } else {
            0.0
        }
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut features = Array2::zeros((n, 2));
    let mut labels = Vec::with_capacity(n);
    for i in 0..n_upper {
        let t = angle(i, n_upper);
        features[(i, 0)] = t.cos();
        features[(i, 1)] = t.sin();
        labels.push(0);
    }
    for i in 0..n_lower {
        let t = angle(i, n_lower);
        features[(n_upper + i, 0)] = 1.0 - t.cos();
        features[(n_upper + i, 1)] = 0.5 - t.sin();
        labels.push(1);
    }
    if noise > 0.0 {
        features.mapv_inplace(|v| v + noise * rng.sample::<f64, _>(StandardNormal));
    }
    Dataset::new(features, Targets::Classes { labels, classes: 2 })
}

/// `y = sin(x) + noise·ε` with `x ~ U(−π, π)`.
pub fn gen_sine(n: usize, noise: f64, seed: u64) -> Result<Dataset, DataError> {
    if n == 0 || noise.is_nan() || noise < 0.0 {
        return Err(DataError::InvalidArgument(format!(
            "sine needs n > 0 and noise >= 0, got {n}, {noise}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let xs: Vec<f64> = (0..n).map(|_| rng.random_range(-PI..PI)).collect();
    let ys: Vec<f64> = xs
        .iter()
        .map(|x| x.sin() + noise * rng.sample::<f64, _>(StandardNormal))
        .collect();
    Dataset::new(
        Array2::from_shape_vec((n, 1), xs).expect("n x 1"),
        Targets::Values(ys),
    )
}

/// Decoded IDX array of unsigned bytes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxArray {
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

fn take(bytes: &[u8], offset: usize, needed: usize) -> Result<&[u8], DataError> {
    bytes
        .get(offset..offset + needed)
        .ok_or(DataError::Truncated {
            offset,
            needed,
            available: bytes.len().saturating_sub(offset),
        })
}

/// Parse an IDX buffer: magic `00 00 08 ndims`, `ndims` big-endian `u32`
/// sizes, then the row-major bytes.
pub fn read_idx(bytes: &[u8]) -> Result<IdxArray, DataError> {
    let head = take(bytes, 0, 4)?;
    if head[0] != 0 || head[1] != 0 || head[2] != IDX_UBYTE || head[3] == 0 {
        return Err(DataError::BadMagic {
            bytes: [head[0], head[1], head[2], head[3]],
            offset: 0,
        });
    }
    let ndims = head[3] as usize;
    let mut dims = Vec::with_capacity(ndims);
    for k in 0..ndims {
        let b = take(bytes, 4 + 4 * k, 4)?;
        dims.push(u32::from_be_bytes([b[0], b[1], b[2], b[3]]) as usize);
    }
    let offset = 4 + 4 * ndims;
    let count = dims.iter().product();
    let data = take(bytes, offset, count)?.to_vec();
    Ok(IdxArray { dims, data })
}

pub fn read_idx_file(path: &Path) -> Result<IdxArray, DataError> {
    let bytes = std::fs::read(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    read_idx(&bytes)
}

/// Images (`ndims ≥ 2`) and labels (`ndims = 1`) as a classification
/// dataset, pixels scaled to `[0, 1]`, keeping at most `limit` examples.
pub fn idx_dataset(
    images: &IdxArray,
    labels: &IdxArray,
    limit: Option<usize>,
) -> Result<Dataset, DataError> {
    if images.dims.len() < 2 {
        return Err(DataError::DimMismatch(format!(
            "image file has {} dims",
            images.dims.len()
        )));
    }
    if labels.dims.len() != 1 {
        return Err(DataError::DimMismatch(format!(
            "label file has {} dims",
            labels.dims.len()
        )));
    }
    if images.dims[0] != labels.dims[0] {
        return Err(DataError::DimMismatch(format!(
            "{} images vs {} labels",
            images.dims[0], labels.dims[0]
        )));
    }
    let n = limit.map_or(images.dims[0], |l| l.min(images.dims[0]));
    let pixels: usize = images.dims[1..].iter().product();
    let features = Array2::from_shape_vec(
        (n, pixels),
        images.data[..n * pixels]
            .iter()
            .map(|&b| b as f64 / 255.0)
            .collect(),
    )
    .expect("sized above");
    let labels: Vec<usize> = labels.data[..n].iter().map(|&b| b as usize).collect();
    let classes = labels.iter().max().map_or(1, |m| m + 1).max(2);
    Dataset::new(features, Targets::Classes { labels, classes })
}

pub fn load_idx(images: &Path, labels: &Path) -> Result<Dataset, DataError> {
    idx_dataset(&read_idx_file(images)?, &read_idx_file(labels)?, None)
}

/// MNIST subset from the four standard files in `dir`: the first 5000
/// training and first 1000 test images, all with 10 classes.
pub fn load_mnist_subset(dir: &Path) -> Result<TrainTest, DataError> {
    let load = |img: &str, lab: &str, limit| -> Result<Dataset, DataError> {
        let mut ds = idx_dataset(
            &read_idx_file(&dir.join(img))?,
            &read_idx_file(&dir.join(lab))?,
            Some(limit),
        )?;
        if let Targets::Classes { classes, .. } = &mut ds.targets {
            *classes = 10;
        }
        Dataset::new(ds.features, ds.targets)
    };
    let train = load(
        "train-images-idx3-ubyte",
        "train-labels-idx1-ubyte",
        MNIST_TRAIN_SUBSET,
    )?;
    let test = load(
        "t10k-images-idx3-ubyte",
        "t10k-labels-idx1-ubyte",
        MNIST_TEST_SUBSET,
    )?;
    Ok(Dataset::normalized(train, test))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Classification,
    Regression,
}

/// Which header column holds the target, and how to read it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CsvSchema {
    pub label_column: String,
    pub task: Task,
}

/// Numeric CSV with a header row. Every non-label column is a feature.
/// Classification labels must be nonnegative integers.
pub fn load_csv(path: &Path, schema: &CsvSchema) -> Result<Dataset, DataError> {
    let file = std::fs::File::open(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    read_csv(file, schema)
}

pub fn read_csv<R: std::io::Read>(reader: R, schema: &CsvSchema) -> Result<Dataset, DataError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let header = rdr.headers()?.clone();
    let label_at = header
        .iter()
        .position(|h| h == schema.label_column)
        .ok_or_else(|| {
            DataError::Schema(format!(
                "no column named {:?} in header",
                schema.label_column
            ))
        })?;
    let mut feats = Vec::new();
    let mut raw_labels = Vec::new();
    let mut rows = 0;
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != header.len() {
            return Err(DataError::Schema(format!(
                "line {line} has {} cells, header has {}",
                rec.len(),
                header.len()
            )));
        }
        for (j, cell) in rec.iter().enumerate() {
            let v: f64 = cell.parse().map_err(|_| DataError::Parse {
                line,
                column: header[j].to_string(),
                value: cell.to_string(),
            })?;
            if j == label_at {
                raw_labels.push((v, line, cell.to_string()));
            } else {
                feats.push(v);
            }
        }
        rows += 1;
    }
    if rows == 0 {
        return Err(DataError::InvalidArgument("csv has no data rows".into()));
    }
    let features = Array2::from_shape_vec((rows, header.len() - 1), feats).expect("rectangular");
    let targets = match schema.task {
        Task::Regression => Targets::Values(raw_labels.into_iter().map(|(v, _, _)| v).collect()),
        Task::Classification => {
            let mut labels = Vec::with_capacity(rows);
            for (v, line, cell) in raw_labels {
                if v < 0.0 || v.fract() != 0.0 {
                    return Err(DataError::Parse {
                        line,
                        column: schema.label_column.clone(),
                        value: cell,
                    });
                }
                labels.push(v as usize);
            }
            let classes = labels.iter().max().map_or(1, |m| m + 1).max(2);
            Targets::Classes { labels, classes }
        }
    };
    Dataset::new(features, targets)
}
