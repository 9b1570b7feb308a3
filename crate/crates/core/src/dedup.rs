//! Near-or-exact duplicate detection over image feature vectors, and offline
//! tuning of the distance threshold by Matthews correlation.

use std::collections::{HashMap, HashSet};
use std::fs::{File, OpenOptions};
use std::io::{self, BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::classifiers::ConfusionMatrix;
use crate::model::DuplicateVerdict;

pub const DEFAULT_DIM: usize = 2048;
pub const DEFAULT_THRESHOLD: f64 = 7.1;

pub const INDEX_MAGIC: &[u8; 4] = b"SSFI";
pub const INDEX_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DedupError {
    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("feature vector contains a non-finite value at position {0}")]
    NonFinite(usize),
    #[error("id `{0}` is already indexed")]
    DuplicateId(String),
    #[error("invalid threshold {0}: must be a non-negative number")]
    InvalidThreshold(f64),
    #[error("no precomputed features for `{0}`")]
    MissingFeatures(String),
    #[error("feature index {path}: {reason}")]
    BadIndexFile { path: PathBuf, reason: String },
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

/// Fixed-dimension image embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub owner_id: String,
    values: Vec<f32>,
}

impl FeatureVector {
    pub fn new(owner_id: impl Into<String>, values: Vec<f32>) -> Result<Self, DedupError> {
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(DedupError::NonFinite(pos));
        }
        Ok(FeatureVector { owner_id: owner_id.into(), values })
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }
}

const LANES: usize = 8;
// Partial sums are checked against the abandon bound every this many dims.
const CHECK_EVERY: usize = 16;

#[inline]
fn reduce(acc: &[f64; LANES]) -> f64 {
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]))
}

/// Squared distance with early abandoning. Returns `None` as soon as a partial
/// sum exceeds `bound`; otherwise the full squared distance, bit-identical to
/// [`squared_distance`] since lanes only grow and float addition is monotone.
#[inline]
fn squared_distance_bounded(a: &[f32], b: &[f32], bound: f64) -> Option<f64> {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; LANES];
    let mut ca = a.chunks_exact(CHECK_EVERY);
    let mut cb = b.chunks_exact(CHECK_EVERY);
    for (x, y) in (&mut ca).zip(&mut cb) {
        let x: &[f32; CHECK_EVERY] = x.try_into().expect("block");
        let y: &[f32; CHECK_EVERY] = y.try_into().expect("block");
        for h in (0..CHECK_EVERY).step_by(LANES) {
            for k in 0..LANES {
                let d = x[h + k] as f64 - y[h + k] as f64;
                acc[k] += d * d;
            }
        }
        if reduce(&acc) > bound {
            return None;
        }
    }
    for (i, (x, y)) in ca.remainder().iter().zip(cb.remainder()).enumerate() {
        let d = *x as f64 - *y as f64;
        acc[i % LANES] += d * d;
    }
    let total = reduce(&acc);
    if total > bound {
        None
    } else {
        Some(total)
    }
}

fn squared_distance(a: &[f32], b: &[f32]) -> f64 {
    squared_distance_bounded(a, b, f64::INFINITY).expect("unbounded")
}

/// Euclidean (L2) distance.
pub fn l2_distance(a: &FeatureVector, b: &FeatureVector) -> Result<f64, DedupError> {
    if a.dim() != b.dim() {
        return Err(DedupError::DimensionMismatch { left: a.dim(), right: b.dim() });
    }
    Ok(squared_distance(&a.values, &b.values).sqrt())
}

/// Nearest-neighbour search surface of the duplicate filter.
pub trait VectorIndex: Send {
    fn dim(&self) -> usize;
    fn len(&self) -> usize;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
    fn insert(&mut self, id: &str, fv: &FeatureVector) -> Result<(), DedupError>;
    /// Nearest entry with distance `<= max_distance`, earliest-inserted on ties.
    fn nearest_within(&self, fv: &FeatureVector, max_distance: f64) -> Result<Option<(String, f64)>, DedupError>;
}

/// Linear-scan index over contiguous `f32` rows, optionally mirrored to an
/// append-only file.
///
/// File layout: magic `SSFI`, version u32 LE, dim u32 LE, then records of
/// (id length u32 LE, UTF-8 id bytes, dim × f32 LE).
pub struct FeatureIndex {
    dim: usize,
    ids: Vec<String>,
    id_set: HashSet<String>,
    data: Vec<f32>,
    log: Option<BufWriter<File>>,
    path: Option<PathBuf>,
}

impl std::fmt::Debug for FeatureIndex {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FeatureIndex")
            .field("dim", &self.dim)
            .field("len", &self.ids.len())
            .field("path", &self.path)
            .finish()
    }
}

impl FeatureIndex {
    pub fn new(dim: usize) -> Self {
        FeatureIndex { dim, ids: Vec::new(), id_set: HashSet::new(), data: Vec::new(), log: None, path: None }
    }

    /// Opens (or creates) a persisted index. A torn final record is dropped.
    pub fn open(path: impl AsRef<Path>, dim: usize) -> Result<Self, DedupError> {
        let path = path.as_ref().to_path_buf();
        let bad = |reason: String| DedupError::BadIndexFile { path: path.clone(), reason };
        let mut file = OpenOptions::new().read(true).write(true).create(true).truncate(false).open(&path)?;
        let len = file.metadata()?.len();
        let mut index = FeatureIndex::new(dim);

        if len == 0 {
            let mut header = Vec::with_capacity(12);
            header.extend_from_slice(INDEX_MAGIC);
            header.extend_from_slice(&INDEX_VERSION.to_le_bytes());
            header.extend_from_slice(&(dim as u32).to_le_bytes());
            file.write_all(&header)?;
        } else {
            let mut reader = BufReader::new(&mut file);
            let mut header = [0u8; 12];
            reader.read_exact(&mut header).map_err(|_| bad("short header".into()))?;
            if &header[..4] != INDEX_MAGIC {
                return Err(bad("bad magic".into()));
            }
            let version = u32::from_le_bytes(header[4..8].try_into().unwrap());
            if version != INDEX_VERSION {
                return Err(bad(format!("unsupported version {version}")));
            }
            let file_dim = u32::from_le_bytes(header[8..12].try_into().unwrap()) as usize;
            if file_dim != dim {
                return Err(DedupError::DimensionMismatch { left: file_dim, right: dim });
            }
            let mut pos = 12u64;
            let row_bytes = 4 * dim as u64;
            let mut row = vec![0u8; row_bytes as usize];
            loop {
                if pos + 4 > len {
                    break;
                }
                let mut id_len = [0u8; 4];
                reader.read_exact(&mut id_len)?;
                let id_len = u32::from_le_bytes(id_len) as u64;
                if pos + 4 + id_len + row_bytes > len {
                    break;
                }
                let mut id = vec![0u8; id_len as usize];
                reader.read_exact(&mut id)?;
                reader.read_exact(&mut row)?;
                let id = String::from_utf8(id).map_err(|_| bad(format!("non-UTF-8 id at offset {pos}")))?;
                let values = row.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
                index.push_row(id, values)?;
                pos += 4 + id_len + row_bytes;
            }
            drop(reader);
            if pos < len {
                log::warn!("{}: dropping torn tail at offset {pos}", path.display());
                file.set_len(pos)?;
            }
        }
        file.seek(SeekFrom::End(0))?;
        index.log = Some(BufWriter::new(file));
        index.path = Some(path);
        Ok(index)
    }

    fn push_row(&mut self, id: String, values: Vec<f32>) -> Result<(), DedupError> {
        if self.id_set.contains(&id) {
            return Err(DedupError::DuplicateId(id));
        }
        self.id_set.insert(id.clone());
        self.ids.push(id);
        self.data.extend_from_slice(&values);
        Ok(())
    }

    fn check_dim(&self, fv: &FeatureVector) -> Result<(), DedupError> {
        if fv.dim() != self.dim {
            return Err(DedupError::DimensionMismatch { left: self.dim, right: fv.dim() });
        }
        Ok(())
    }

    pub fn contains(&self, id: &str) -> bool {
        self.id_set.contains(id)
    }

    /// Flushes buffered appends to the backing file.
    pub fn flush(&mut self) -> Result<(), DedupError> {
        if let Some(log) = self.log.as_mut() {
            log.flush()?;
        }
        Ok(())
    }

    /// Linear scan for the nearest row. Ties keep the earliest-inserted row.
    pub fn nearest(&self, fv: &FeatureVector) -> Result<Option<(String, f64)>, DedupError> {
        self.nearest_within(fv, f64::INFINITY)
    }
}

impl VectorIndex for FeatureIndex {
    fn dim(&self) -> usize {
        self.dim
    }

    fn len(&self) -> usize {
        self.ids.len()
    }

    fn insert(&mut self, id: &str, fv: &FeatureVector) -> Result<(), DedupError> {
        self.check_dim(fv)?;
        if self.id_set.contains(id) {
            return Err(DedupError::DuplicateId(id.to_string()));
        }
        if let Some(log) = self.log.as_mut() {
            log.write_all(&(id.len() as u32).to_le_bytes())?;
            log.write_all(id.as_bytes())?;
            for v in fv.values() {
                log.write_all(&v.to_le_bytes())?;
            }
        }
        self.push_row(id.to_string(), fv.values.clone())
    }

    fn nearest_within(&self, fv: &FeatureVector, max_distance: f64) -> Result<Option<(String, f64)>, DedupError> {
        self.check_dim(fv)?;
        if max_distance.is_nan() || max_distance < 0.0 {
            return Err(DedupError::InvalidThreshold(max_distance));
        }
        if self.dim == 0 {
            return Ok(self.ids.first().map(|id| (id.clone(), 0.0)));
        }
        let limit = max_distance * max_distance;
        let mut best: Option<(usize, f64)> = None;
        for (row, values) in self.data.chunks_exact(self.dim).enumerate() {
            let bound = best.map_or(limit, |(_, b)| b);
            if let Some(sq) = squared_distance_bounded(&fv.values, values, bound) {
                // Strictly closer rows replace; equal rows keep the earlier one.
                if best.is_none_or(|(_, b)| sq < b) {
                    best = Some((row, sq));
                }
            }
        }
        Ok(best.map(|(row, sq)| (self.ids[row].clone(), sq.sqrt())))
    }
}

impl Drop for FeatureIndex {
    fn drop(&mut self) {
        let _ = self.flush();
    }
}

/// Duplicate verdict for `fv` against `index` under the closed threshold
/// `distance <= threshold`. Does not insert.
pub fn find_duplicate<I: VectorIndex + ?Sized>(
    index: &I,
    fv: &FeatureVector,
    threshold: f64,
) -> Result<DuplicateVerdict, DedupError> {
    if threshold.is_nan() || threshold < 0.0 {
        return Err(DedupError::InvalidThreshold(threshold));
    }
    Ok(match index.nearest_within(fv, threshold)? {
        Some((id, distance)) => DuplicateVerdict::duplicate_of(id, distance),
        None => DuplicateVerdict::unique(None),
    })
}

pub fn insert_feature<I: VectorIndex + ?Sized>(index: &mut I, id: &str, fv: &FeatureVector) -> Result<(), DedupError> {
    index.insert(id, fv)
}

/// Checks `fv` and inserts it when it is not a duplicate, as the serving-time
/// filter does.
pub fn filter_and_insert<I: VectorIndex + ?Sized>(
    index: &mut I,
    id: &str,
    fv: &FeatureVector,
    threshold: f64,
) -> Result<DuplicateVerdict, DedupError> {
    let verdict = find_duplicate(index, fv, threshold)?;
    if !verdict.is_duplicate {
        index.insert(id, fv)?;
    }
    Ok(verdict)
}

/// Turns image bytes into a feature vector.
pub trait FeatureExtractor: Send + Sync {
    fn dim(&self) -> usize;
    fn extract(&self, id: &str, bytes: &[u8]) -> Result<FeatureVector, DedupError>;
}

/// Deterministic stand-in for a CNN embedding: a digest of the bytes seeds a
/// Gaussian vector. Identical bytes give identical vectors; unrelated inputs
/// land at an expected distance of [`StubExtractor::SPREAD`].
#[derive(Debug, Clone)]
pub struct StubExtractor {
    dim: usize,
    seed: u64,
}

impl StubExtractor {
    pub const SPREAD: f64 = 16.0;

    pub fn new(dim: usize, seed: u64) -> Self {
        StubExtractor { dim, seed }
    }

    pub fn vector_for_seed(&self, id: &str, seed: u64) -> FeatureVector {
        let sigma = Self::SPREAD / (2.0 * self.dim.max(1) as f64).sqrt();
        let normal = Normal::new(0.0, sigma).expect("positive sigma");
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ self.seed);
        let values = (0..self.dim).map(|_| normal.sample(&mut rng) as f32).collect();
        FeatureVector { owner_id: id.to_string(), values }
    }
}

pub fn bytes_digest64(bytes: &[u8]) -> u64 {
    let digest = Sha256::digest(bytes);
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

impl FeatureExtractor for StubExtractor {
    fn dim(&self) -> usize {
        self.dim
    }

    fn extract(&self, id: &str, bytes: &[u8]) -> Result<FeatureVector, DedupError> {
        Ok(self.vector_for_seed(id, bytes_digest64(bytes)))
    }
}

/// Looks up externally computed embeddings from a CSV sidecar with rows
/// `key,v0,v1,...`; the key is the image id.
#[derive(Debug, Clone)]
pub struct PrecomputedExtractor {
    dim: usize,
    vectors: HashMap<String, Vec<f32>>,
}

impl PrecomputedExtractor {
    pub fn from_map(dim: usize, vectors: HashMap<String, Vec<f32>>) -> Result<Self, DedupError> {
        for v in vectors.values() {
            if v.len() != dim {
                return Err(DedupError::DimensionMismatch { left: dim, right: v.len() });
            }
        }
        Ok(PrecomputedExtractor { dim, vectors })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, DedupError> {
        let mut reader = csv::ReaderBuilder::new().has_headers(false).flexible(true).from_path(path)?;
        let mut vectors = HashMap::new();
        let mut dim = None;
        for record in reader.records() {
            let record = record?;
            let mut fields = record.iter();
            let Some(key) = fields.next() else { continue };
            let values: Vec<f32> = fields
                .map(|f| f.trim().parse::<f32>())
                .collect::<Result<_, _>>()
                .map_err(|e| DedupError::Io(io::Error::new(io::ErrorKind::InvalidData, format!("row `{key}`: {e}"))))?;
            match dim {
                None => dim = Some(values.len()),
                Some(d) if d != values.len() => {
                    return Err(DedupError::DimensionMismatch { left: d, right: values.len() })
                }
                _ => {}
            }
            vectors.insert(key.to_string(), values);
        }
        Self::from_map(dim.unwrap_or(0), vectors)
    }
}

impl FeatureExtractor for PrecomputedExtractor {
    fn dim(&self) -> usize {
        self.dim
    }

    fn extract(&self, id: &str, _bytes: &[u8]) -> Result<FeatureVector, DedupError> {
        let values = self.vectors.get(id).ok_or_else(|| DedupError::MissingFeatures(id.to_string()))?;
        FeatureVector::new(id, values.clone())
    }
}

/// Matthews correlation coefficient. Any zero marginal yields 0.
pub fn mcc(cm: &ConfusionMatrix) -> f64 {
    let (tp, fp, fn_, tn) = (cm.tp as f64, cm.fp as f64, cm.fn_ as f64, cm.tn as f64);
    let denom = (tp + fp) * (tp + fn_) * (tn + fp) * (tn + fn_);
    if denom == 0.0 {
        return 0.0;
    }
    (tp * tn - fp * fn_) / denom.sqrt()
}

/// A distance with its ground-truth duplicate label.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabeledPair {
    pub distance: f64,
    pub is_duplicate: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ThresholdTuneResult {
    pub best_threshold: f64,
    pub best_mcc: f64,
    pub curve: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThresholdGrid {
    pub min: f64,
    pub max: f64,
    pub step: f64,
}

impl Default for ThresholdGrid {
    fn default() -> Self {
        ThresholdGrid { min: 0.0, max: 12.0, step: 0.1 }
    }
}

impl ThresholdGrid {
    /// Grid points `min + k * step` for `k = 0..=round((max - min) / step)`.
    pub fn points(&self) -> Vec<f64> {
        if self.step <= 0.0 || self.step.is_nan() || self.max < self.min {
            return vec![self.min];
        }
        let n = ((self.max - self.min) / self.step).round() as usize;
        (0..=n).map(|k| self.min + k as f64 * self.step).collect()
    }
}

/// Grid search for the duplicate threshold maximizing MCC, predicting a pair
/// duplicate iff `distance <= t`. Ties go to the smallest threshold.
pub fn tune_threshold(pairs: &[LabeledPair], grid: ThresholdGrid) -> ThresholdTuneResult {
    let mut sorted: Vec<LabeledPair> = pairs.to_vec();
    sorted.sort_by(|a, b| a.distance.total_cmp(&b.distance));
    let positives = sorted.iter().filter(|p| p.is_duplicate).count() as u64;
    let negatives = sorted.len() as u64 - positives;

    let mut curve = Vec::new();
    let (mut tp, mut fp) = (0u64, 0u64);
    let mut cursor = 0;
    let mut best: Option<(f64, f64)> = None;
    for t in grid.points() {
        while cursor < sorted.len() && sorted[cursor].distance <= t {
            if sorted[cursor].is_duplicate {
                tp += 1;
            } else {
                fp += 1;
            }
            cursor += 1;
        }
        let cm = ConfusionMatrix { tp, fp, fn_: positives - tp, tn: negatives - fp };
        let score = mcc(&cm);
        curve.push((t, score));
        if best.is_none_or(|(_, b)| score > b) {
            best = Some((t, score));
        }
    }
    let (best_threshold, best_mcc) = best.expect("grid has at least one point");
    ThresholdTuneResult { best_threshold, best_mcc, curve }
}

/// Reads a `distance,is_duplicate` CSV (header optional). Labels accept
/// `1/0`, `true/false`, `yes/no`.
pub fn read_labeled_pairs(path: impl AsRef<Path>) -> Result<Vec<LabeledPair>, DedupError> {
    let mut reader = csv::ReaderBuilder::new().has_headers(false).trim(csv::Trim::All).from_path(path)?;
    let mut pairs = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record?;
        let (Some(d), Some(label)) = (record.get(0), record.get(1)) else { continue };
        let Ok(distance) = d.parse::<f64>() else {
            if line == 0 {
                continue; // header row
            }
            return Err(DedupError::Io(io::Error::new(
                io::ErrorKind::InvalidData,
                format!("line {}: bad distance `{d}`", line + 1),
            )));
        };
        let is_duplicate = match label.to_ascii_lowercase().as_str() {
            "1" | "true" | "yes" | "duplicate" => true,
            "0" | "false" | "no" | "non-duplicate" | "not-duplicate" => false,
            other => {
                return Err(DedupError::Io(io::Error::new(
                    io::ErrorKind::InvalidData,
                    format!("line {}: bad label `{other}`", line + 1),
                )))
            }
        };
        if !distance.is_finite() || distance < 0.0 {
            return Err(DedupError::InvalidThreshold(distance));
        }
        pairs.push(LabeledPair { distance, is_duplicate });
    }
    Ok(pairs)
}
