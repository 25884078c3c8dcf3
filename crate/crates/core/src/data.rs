//! Dataset ingestion, synthetic generation, label-noise injection, and
//! disjoint teacher sharding.
//!
//! All feature matrices are `[N x d]` with entries scaled into `[0, 1]`.
//! Every example carries a stable u64 id so that the cleansing pass can move
//! rows between the labeled and unlabeled pools without losing identity.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::Read;
use std::path::Path;

use ndarray::{Array2, Axis};

use crate::error::{Error, Result};
use crate::rng::Rng;

/// Labeled examples: features in [0,1], class labels in [0, K).
#[derive(Debug, Clone)]
pub struct LabeledSet {
    pub features: Array2<f64>,
    pub labels: Vec<usize>,
    pub ids: Vec<u64>,
    pub n_classes: usize,
}

/// Unlabeled examples.
#[derive(Debug, Clone)]
pub struct UnlabeledSet {
    pub features: Array2<f64>,
    pub ids: Vec<u64>,
}

/// Ground-truth record of which labels were corrupted, and what they were.
#[derive(Debug, Clone, Default)]
pub struct NoiseMask {
    /// id -> original clean label, for every corrupted example.
    pub corrupted: BTreeMap<u64, usize>,
}

impl NoiseMask {
    pub fn is_corrupted(&self, id: u64) -> bool {
        self.corrupted.contains_key(&id)
    }

    pub fn len(&self) -> usize {
        self.corrupted.len()
    }

    pub fn is_empty(&self) -> bool {
        self.corrupted.is_empty()
    }
}

/// Disjoint teacher shards.
#[derive(Debug, Clone)]
pub struct Partition {
    pub shards: Vec<LabeledSet>,
}

impl LabeledSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    fn check(&self) -> Result<()> {
        if self.features.nrows() != self.labels.len() || self.labels.len() != self.ids.len() {
            return Err(Error::InvalidArgument("N, labels, ids length mismatch".into()));
        }
        if self.labels.iter().any(|&y| y >= self.n_classes) {
            return Err(Error::InvalidArgument("label out of range".into()));
        }
        let unique: BTreeSet<_> = self.ids.iter().collect();
        if unique.len() != self.ids.len() {
            return Err(Error::InvalidArgument("duplicate ids".into()));
        }
        Ok(())
    }

    /// Row subset by positional indices, preserving ids.
    pub fn subset(&self, rows: &[usize]) -> LabeledSet {
        LabeledSet {
            features: self.features.select(Axis(0), rows),
            labels: rows.iter().map(|&i| self.labels[i]).collect(),
            ids: rows.iter().map(|&i| self.ids[i]).collect(),
            n_classes: self.n_classes,
        }
    }

    /// Drops labels, keeping features and ids.
    pub fn to_unlabeled(&self) -> UnlabeledSet {
        UnlabeledSet {
            features: self.features.clone(),
            ids: self.ids.clone(),
        }
    }
}

impl UnlabeledSet {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn subset(&self, rows: &[usize]) -> UnlabeledSet {
        UnlabeledSet {
            features: self.features.select(Axis(0), rows),
            ids: rows.iter().map(|&i| self.ids[i]).collect(),
        }
    }
}

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn read_be_u32(buf: &[u8], off: usize, what: &str) -> Result<u32> {
    let bytes: [u8; 4] = buf
        .get(off..off + 4)
        .ok_or_else(|| Error::Parse(format!("truncated {what} header")))?
        .try_into()
        .unwrap();
    Ok(u32::from_be_bytes(bytes))
}

/// Loads an IDX image/label file pair (big-endian, the MNIST family layout).
///
/// Pixels are scaled by 1/255 into [0,1]; images are flattened row-major.
/// At most `max_n` records are kept.
pub fn load_idx(images_path: &Path, labels_path: &Path, max_n: usize) -> Result<LabeledSet> {
    let mut img_buf = Vec::new();
    File::open(images_path)?.read_to_end(&mut img_buf)?;
    let mut lbl_buf = Vec::new();
    File::open(labels_path)?.read_to_end(&mut lbl_buf)?;

    if read_be_u32(&img_buf, 0, "image")? != IDX_IMAGES_MAGIC {
        return Err(Error::Parse("bad magic in image file (want 0x00000803)".into()));
    }
    if read_be_u32(&lbl_buf, 0, "label")? != IDX_LABELS_MAGIC {
        return Err(Error::Parse("bad magic in label file (want 0x00000801)".into()));
    }
    let n_img = read_be_u32(&img_buf, 4, "image")? as usize;
    let rows = read_be_u32(&img_buf, 8, "image")? as usize;
    let cols = read_be_u32(&img_buf, 12, "image")? as usize;
    let n_lbl = read_be_u32(&lbl_buf, 4, "label")? as usize;
    if n_img != n_lbl {
        return Err(Error::Parse(format!(
            "image count {n_img} != label count {n_lbl}"
        )));
    }
    let d = rows * cols;
    let n = n_img.min(max_n);
    if img_buf.len() < 16 + n * d {
        return Err(Error::Parse("truncated image payload".into()));
    }
    if lbl_buf.len() < 8 + n {
        return Err(Error::Parse("truncated label payload".into()));
    }

    let mut features = Array2::zeros((n, d));
    for i in 0..n {
        for j in 0..d {
            features[[i, j]] = f64::from(img_buf[16 + i * d + j]) / 255.0;
        }
    }
    let labels: Vec<usize> = lbl_buf[8..8 + n].iter().map(|&b| b as usize).collect();
    let n_classes = labels.iter().max().map_or(0, |&m| m + 1).max(2);
    let set = LabeledSet {
        features,
        labels,
        ids: (0..n as u64).collect(),
        n_classes,
    };
    set.check()?;
    Ok(set)
}

/// Loads a rectangular numeric CSV with a header row.
///
/// The `label_column` (by header name) may hold arbitrary strings; labels are
/// densely re-indexed 0..K-1 in first-appearance order. Feature columns are
/// min-max scaled per column into [0,1]; a constant column scales to zero.
pub fn load_csv(path: &Path, label_column: &str) -> Result<LabeledSet> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_path(path)
        .map_err(|e| Error::Parse(e.to_string()))?;
    let headers = reader
        .headers()
        .map_err(|e| Error::Parse(e.to_string()))?
        .clone();
    let label_idx = headers
        .iter()
        .position(|h| h == label_column)
        .ok_or_else(|| Error::Parse(format!("label column '{label_column}' not in header")))?;
    let width = headers.len();

    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut raw_labels: Vec<String> = Vec::new();
    for (row_no, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::Parse(format!("row {}: {e}", row_no + 2)))?;
        if record.len() != width {
            return Err(Error::Parse(format!(
                "row {}: expected {width} fields, got {}",
                row_no + 2,
                record.len()
            )));
        }
        let mut feats = Vec::with_capacity(width - 1);
        for (i, field) in record.iter().enumerate() {
            if i == label_idx {
                raw_labels.push(field.to_owned());
            } else {
                let v: f64 = field.trim().parse().map_err(|_| {
                    Error::Parse(format!("row {}: non-numeric cell '{field}'", row_no + 2))
                })?;
                feats.push(v);
            }
        }
        rows.push(feats);
    }
    if rows.is_empty() {
        return Err(Error::Parse("csv has no data rows".into()));
    }

    // dense label re-indexing in first-appearance order
    let mut index: BTreeMap<&str, usize> = BTreeMap::new();
    let mut order: Vec<usize> = Vec::with_capacity(raw_labels.len());
    let mut next = 0usize;
    for l in &raw_labels {
        let k = *index.entry(l.as_str()).or_insert_with(|| {
            let k = next;
            next += 1;
            k
        });
        order.push(k);
    }

    let d = width - 1;
    let n = rows.len();
    let mut features = Array2::zeros((n, d));
    for (i, row) in rows.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            features[[i, j]] = v;
        }
    }
    // per-column min-max into [0,1]; constant columns become all-zero
    for j in 0..d {
        let col = features.column(j);
        let lo = col.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let range = hi - lo;
        let mut col = features.column_mut(j);
        if range > 0.0 {
            col.mapv_inplace(|v| (v - lo) / range);
        } else {
            col.fill(0.0);
        }
    }

    let set = LabeledSet {
        features,
        labels: order,
        ids: (0..n as u64).collect(),
        n_classes: next.max(2),
    };
    set.check()?;
    Ok(set)
}

/// Deterministic Gaussian class blobs.
///
/// Class means sit on a ring of radius 0.35 around (0.5, 0.5) in the first
/// two dimensions; any extra dimensions are centered at 0.5. Features are
/// clipped to [0,1].
pub fn synth_clusters(
    k: usize,
    n_per_class: usize,
    dim: usize,
    spread: f64,
    seed: u64,
) -> Result<LabeledSet> {
    if k < 2 {
        return Err(Error::InvalidArgument("need k >= 2".into()));
    }
    if dim < 2 {
        return Err(Error::InvalidArgument("need dim >= 2".into()));
    }
    let mut rng = Rng::new(seed);
    let n = k * n_per_class;
    let mut features = Array2::zeros((n, dim));
    let mut labels = Vec::with_capacity(n);
    for c in 0..k {
        let theta = 2.0 * std::f64::consts::PI * c as f64 / k as f64;
        let mut mean = vec![0.5; dim];
        mean[0] += 0.35 * theta.cos();
        mean[1] += 0.35 * theta.sin();
        for i in 0..n_per_class {
            let row = c * n_per_class + i;
            for (j, &m) in mean.iter().enumerate() {
                features[[row, j]] = (m + spread * rng.gaussian()).clamp(0.0, 1.0);
            }
            labels.push(c);
        }
    }
    let set = LabeledSet {
        features,
        labels,
        ids: (0..n as u64).collect(),
        n_classes: k,
    };
    set.check()?;
    Ok(set)
}

/// Flips exactly `floor(rate * N)` uniformly chosen labels to a uniformly
/// chosen *different* class; the mask records the ground truth.
pub fn inject_label_noise(set: &LabeledSet, rate: f64, seed: u64) -> Result<(LabeledSet, NoiseMask)> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::InvalidArgument("rate must be in [0, 1)".into()));
    }
    let mut noisy = set.clone();
    let mut mask = NoiseMask::default();
    let n_corrupt = (rate * set.len() as f64).floor() as usize;
    if n_corrupt == 0 {
        return Ok((noisy, mask));
    }
    let mut rng = Rng::new(seed);
    let mut rows: Vec<usize> = (0..set.len()).collect();
    rng.shuffle(&mut rows);
    for &row in rows.iter().take(n_corrupt) {
        let orig = set.labels[row];
        // uniform over the K-1 other classes
        let mut new = rng.below(set.n_classes - 1);
        if new >= orig {
            new += 1;
        }
        noisy.labels[row] = new;
        mask.corrupted.insert(set.ids[row], orig);
    }
    Ok((noisy, mask))
}

/// Random shuffle then equal split into `n_teachers` disjoint shards; the
/// remainder is distributed one-per-shard from the front.
pub fn partition_disjoint(set: &LabeledSet, n_teachers: usize, seed: u64) -> Result<Partition> {
    if n_teachers == 0 || n_teachers > set.len() {
        return Err(Error::InvalidArgument(format!(
            "n_teachers {n_teachers} out of range for {} examples",
            set.len()
        )));
    }
    let mut rng = Rng::new(seed);
    let mut rows: Vec<usize> = (0..set.len()).collect();
    rng.shuffle(&mut rows);
    let base = set.len() / n_teachers;
    let rem = set.len() % n_teachers;
    let mut shards = Vec::with_capacity(n_teachers);
    let mut cursor = 0;
    for t in 0..n_teachers {
        let size = base + usize::from(t < rem);
        shards.push(set.subset(&rows[cursor..cursor + size]));
        cursor += size;
    }
    Ok(Partition { shards })
}
