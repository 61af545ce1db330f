//! Dataset loading (CSV regression tables, IDX image sets), z-score
//! normalization, minibatching and client sharding.

use std::fs::File;
use std::io::{BufReader, Read};
use std::ops::Range;
use std::path::Path;

use flate2::read::GzDecoder;
use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Labels {
    /// `I × N_L` targets.
    Regression(Array2<f64>),
    /// Class index in `0..n_classes` per sample (digit `k` is class `k`).
    Classification {
        classes: Vec<usize>,
        n_classes: usize,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// `I × N_0`.
    pub features: Array2<f64>,
    pub labels: Labels,
    pub split: Split,
}

impl Dataset {
    pub fn new(features: Array2<f64>, labels: Labels, split: Split) -> Result<Self> {
        let rows = match &labels {
            Labels::Regression(y) => y.nrows(),
            Labels::Classification { classes, n_classes } => {
                if let Some(c) = classes.iter().find(|&&c| c >= *n_classes) {
                    return Err(Error::Shape(format!(
                        "class {c} outside {n_classes} classes"
                    )));
                }
                classes.len()
            }
        };
        if rows != features.nrows() {
            return Err(Error::Shape(format!(
                "{} feature rows but {rows} labels",
                features.nrows()
            )));
        }
        Ok(Self {
            features,
            labels,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn n_features(&self) -> usize {
        self.features.ncols()
    }

    /// `N_L`: target columns or class count.
    pub fn n_outputs(&self) -> usize {
        match &self.labels {
            Labels::Regression(y) => y.ncols(),
            Labels::Classification { n_classes, .. } => *n_classes,
        }
    }

    pub fn is_classification(&self) -> bool {
        matches!(self.labels, Labels::Classification { .. })
    }

    /// Rows `idx` as an `N_0 × B` block.
    pub fn inputs_t(&self, idx: &[usize]) -> Array2<f64> {
        self.features.select(Axis(0), idx).reversed_axes()
    }

    /// Regression targets of rows `idx` as `N_L × B`.
    pub fn targets_t(&self, idx: &[usize]) -> Option<Array2<f64>> {
        match &self.labels {
            Labels::Regression(y) => Some(y.select(Axis(0), idx).reversed_axes()),
            Labels::Classification { .. } => None,
        }
    }

    pub fn classes(&self, idx: &[usize]) -> Option<Vec<usize>> {
        match &self.labels {
            Labels::Classification { classes, .. } => {
                Some(idx.iter().map(|&i| classes[i]).collect())
            }
            Labels::Regression(_) => None,
        }
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        let labels = match &self.labels {
            Labels::Regression(y) => Labels::Regression(y.select(Axis(0), idx)),
            Labels::Classification { classes, n_classes } => Labels::Classification {
                classes: idx.iter().map(|&i| classes[i]).collect(),
                n_classes: *n_classes,
            },
        };
        Dataset {
            features: self.features.select(Axis(0), idx),
            labels,
            split: self.split,
        }
    }
}

/// Comma-separated table with a header row; the last column is the target.
pub fn load_regression_csv(path: &Path, split: Split) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let width = reader.headers().map_err(|e| csv_error(path, e))?.len();
    if width < 2 {
        return Err(Error::Format {
            path: path.to_path_buf(),
            msg: "need at least one feature and a target".into(),
        });
    }
    let mut feats = Vec::new();
    let mut targets = Vec::new();
    for (row, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        let line = row + 1;
        if rec.len() != width {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                row: line,
                msg: format!("expected {width} fields, found {}", rec.len()),
            });
        }
        for (col, cell) in rec.iter().enumerate() {
            let x: f64 = cell.trim().parse().map_err(|_| Error::Parse {
                path: path.to_path_buf(),
                row: line,
                msg: format!("column {col}: not a number: {cell:?}"),
            })?;
            if col + 1 == width {
                targets.push(x);
            } else {
                feats.push(x);
            }
        }
    }
    let n = targets.len();
    if n == 0 {
        return Err(Error::Empty("csv rows"));
    }
    let features =
        Array2::from_shape_vec((n, width - 1), feats).map_err(|e| Error::Shape(e.to_string()))?;
    let y = Array2::from_shape_vec((n, 1), targets).map_err(|e| Error::Shape(e.to_string()))?;
    Dataset::new(features, Labels::Regression(y), split)
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    let row = e.position().map(|p| p.line() as usize).unwrap_or(0);
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        kind => Error::Parse {
            path: path.to_path_buf(),
            row,
            msg: format!("{kind:?}"),
        },
    }
}

const IDX_IMAGES: u32 = 0x0000_0803;
const IDX_LABELS: u32 = 0x0000_0801;

/// Whole file contents, transparently gunzipped.
fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let mut raw = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut raw)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..]).read_to_end(&mut out)?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_be_bytes([bytes[at], bytes[at + 1], bytes[at + 2], bytes[at + 3]])
}

fn idx_header(path: &Path, bytes: &[u8], magic: u32, dims: usize) -> Result<Vec<usize>> {
    let bad = |msg: String| Error::Format {
        path: path.to_path_buf(),
        msg,
    };
    let header = 4 + 4 * dims;
    if bytes.len() < header {
        return Err(bad("truncated IDX header".into()));
    }
    let found = be_u32(bytes, 0);
    if found != magic {
        return Err(bad(format!("magic {found:#010x}, expected {magic:#010x}")));
    }
    let shape: Vec<usize> = (0..dims)
        .map(|d| be_u32(bytes, 4 + 4 * d) as usize)
        .collect();
    let expected = header + shape.iter().product::<usize>();
    if bytes.len() != expected {
        return Err(bad(format!(
            "{} bytes for shape {shape:?}, expected {expected}",
            bytes.len()
        )));
    }
    Ok(shape)
}

/// IDX image/label pair (optionally gzip-compressed). Pixels are scaled to
/// `[0, 1]` by dividing by 255; labels `0..=9` become classes `0..10`.
pub fn load_idx(images: &Path, labels: &Path, split: Split) -> Result<Dataset> {
    let img = read_maybe_gz(images)?;
    let lab = read_maybe_gz(labels)?;
    let shape = idx_header(images, &img, IDX_IMAGES, 3)?;
    let lshape = idx_header(labels, &lab, IDX_LABELS, 1)?;
    if shape[0] != lshape[0] {
        return Err(Error::Format {
            path: labels.to_path_buf(),
            msg: format!("{} labels for {} images", lshape[0], shape[0]),
        });
    }
    let (n, pixels) = (shape[0], shape[1] * shape[2]);
    let features = Array2::from_shape_vec(
        (n, pixels),
        img[16..].iter().map(|&b| b as f64 / 255.0).collect(),
    )
    .map_err(|e| Error::Shape(e.to_string()))?;
    let classes: Vec<usize> = lab[8..].iter().map(|&b| b as usize).collect();
    if let Some(c) = classes.iter().find(|&&c| c > 9) {
        return Err(Error::Format {
            path: labels.to_path_buf(),
            msg: format!("label {c} is not a digit"),
        });
    }
    Dataset::new(
        features,
        Labels::Classification {
            classes,
            n_classes: 10,
        },
        split,
    )
}

/// Writes an uncompressed IDX pair (used for fixtures).
pub fn write_idx(
    images: &Path,
    labels: &Path,
    pixels: &[Vec<u8>],
    rows: usize,
    cols: usize,
    digits: &[u8],
) -> Result<()> {
    let mut img = Vec::with_capacity(16 + pixels.len() * rows * cols);
    for v in [IDX_IMAGES, pixels.len() as u32, rows as u32, cols as u32] {
        img.extend_from_slice(&v.to_be_bytes());
    }
    for p in pixels {
        if p.len() != rows * cols {
            return Err(Error::Shape(format!(
                "image of {} pixels, expected {}",
                p.len(),
                rows * cols
            )));
        }
        img.extend_from_slice(p);
    }
    let mut lab = Vec::with_capacity(8 + digits.len());
    for v in [IDX_LABELS, digits.len() as u32] {
        lab.extend_from_slice(&v.to_be_bytes());
    }
    lab.extend_from_slice(digits);
    std::fs::write(images, img)?;
    std::fs::write(labels, lab)?;
    Ok(())
}

/// Per-column affine map `x ↦ (x - shift)/scale`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Affine {
    pub shift: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Affine {
    fn fit(x: ArrayView2<f64>) -> Self {
        let n = x.nrows().max(1) as f64;
        let shift: Vec<f64> = x
            .mean_axis(Axis(0))
            .map(|m| m.to_vec())
            .unwrap_or_else(|| vec![0.0; x.ncols()]);
        let scale = (0..x.ncols())
            .map(|j| {
                let var = x
                    .column(j)
                    .iter()
                    .map(|v| (v - shift[j]).powi(2))
                    .sum::<f64>()
                    / n;
                let sd = var.sqrt();
                if sd > 1e-12 * (1.0 + shift[j].abs()) {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Self { shift, scale }
    }

    fn identity(n: usize) -> Self {
        Self {
            shift: vec![0.0; n],
            scale: vec![1.0; n],
        }
    }

    pub fn apply(&self, x: &mut Array2<f64>) {
        for (j, mut col) in x.axis_iter_mut(Axis(1)).enumerate() {
            let (s, c) = (self.shift[j], self.scale[j]);
            col.mapv_inplace(|v| (v - s) / c);
        }
    }

    pub fn invert(&self, x: &mut Array2<f64>) {
        for (j, mut col) in x.axis_iter_mut(Axis(1)).enumerate() {
            let (s, c) = (self.shift[j], self.scale[j]);
            col.mapv_inplace(|v| v * c + s);
        }
    }
}

/// Z-scoring fitted on a training split. Classification features are
/// already scaled and pass through unchanged.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub features: Affine,
    pub targets: Option<Affine>,
}

impl Normalizer {
    pub fn fit(train: &Dataset) -> Self {
        match &train.labels {
            Labels::Regression(y) => Self {
                features: Affine::fit(train.features.view()),
                targets: Some(Affine::fit(y.view())),
            },
            Labels::Classification { .. } => Self {
                features: Affine::identity(train.n_features()),
                targets: None,
            },
        }
    }

    pub fn apply(&self, d: &Dataset) -> Dataset {
        let mut out = d.clone();
        self.features.apply(&mut out.features);
        if let (Some(t), Labels::Regression(y)) = (&self.targets, &mut out.labels) {
            t.apply(y);
        }
        out
    }

    pub fn invert(&self, d: &Dataset) -> Dataset {
        let mut out = d.clone();
        self.features.invert(&mut out.features);
        if let (Some(t), Labels::Regression(y)) = (&self.targets, &mut out.labels) {
            t.invert(y);
        }
        out
    }
}

/// `0..n` shuffled by `seed`.
pub fn shuffled_order(n: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    order
}

/// Contiguous batch ranges of `batch_size`; the last may be short.
pub fn batch_ranges(n: usize, batch_size: usize) -> Result<Vec<Range<usize>>> {
    if batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    Ok((0..n)
        .step_by(batch_size)
        .map(|s| s..(s + batch_size).min(n))
        .collect())
}

/// Splits `order` into `k` contiguous shards whose sizes differ by at most
/// one.
pub fn partition_clients(order: &[usize], k: usize) -> Result<Vec<Vec<usize>>> {
    if k == 0 || k > order.len() {
        return Err(Error::Config(format!(
            "cannot split {} samples across {k} clients",
            order.len()
        )));
    }
    let (base, extra) = (order.len() / k, order.len() % k);
    let mut shards = Vec::with_capacity(k);
    let mut start = 0;
    for c in 0..k {
        let len = base + usize::from(c < extra);
        shards.push(order[start..start + len].to_vec());
        start += len;
    }
    Ok(shards)
}

/// Per-row class argmax.
pub fn argmax_rows(scores: ArrayView2<f64>) -> Vec<usize> {
    scores
        .rows()
        .into_iter()
        .map(|r| {
            r.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (k, &v)| {
                    if v > best.1 {
                        (k, v)
                    } else {
                        best
                    }
                })
                .0
        })
        .collect()
}

/// Column means of `x`.
pub fn column_means(x: ArrayView2<f64>) -> Array1<f64> {
    x.mean_axis(Axis(0))
        .unwrap_or_else(|| Array1::zeros(x.ncols()))
}
