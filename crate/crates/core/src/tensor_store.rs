// SPDX-License-Identifier: MIT OR Apache-2.0

//! The `AXT1` container and masked batch streaming.
//!
//! Layout of one record (all integers little-endian):
//!
//! ```text
//! "AXT1" | u32 version=1 | u32 dtype (0 = f32) | u64 rows | u32 cols
//!        | u64 metadata length | metadata (UTF-8 JSON object)
//!        | rows*cols f32 payload, row-major
//! ```
//!
//! An activation shard is one record plus two sidecars next to it:
//! `<stem>.ids` (one u32 token id per row) and `<stem>.mask` (one byte per
//! row, 1 = special token). A bundle (stitch, SAE weights, planted world) is
//! several matrix records written back to back; bundle-wide attributes live
//! in the first record's metadata.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::{linalg, rng, Error, Mat, Result};

pub const MAGIC: &[u8; 4] = b"AXT1";
pub const VERSION: u32 = 1;
/// Fixed header size before the metadata bytes.
pub const HEADER_LEN: usize = 4 + 4 + 4 + 8 + 4 + 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum DType {
    #[default]
    F32,
}

impl DType {
    pub fn code(self) -> u32 {
        match self {
            Self::F32 => 0,
        }
    }

    pub fn from_code(code: u32) -> Result<Self> {
        match code {
            0 => Ok(Self::F32),
            other => Err(Error::Dtype(other)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShardMeta {
    pub model_name: String,
    pub layer: u32,
    pub context_len: u32,
    pub source_corpus: String,
    #[serde(skip)]
    pub dtype: DType,
}

impl Default for ShardMeta {
    fn default() -> Self {
        Self {
            model_name: String::new(),
            layer: 0,
            context_len: 1,
            source_corpus: String::new(),
            dtype: DType::F32,
        }
    }
}

impl ShardMeta {
    pub fn new(model_name: impl Into<String>, layer: u32) -> Self {
        Self {
            model_name: model_name.into(),
            layer,
            ..Self::default()
        }
    }

    fn validate(&self) -> Result<()> {
        if self.context_len == 0 {
            return Err(Error::Validation("context_len must be positive".into()));
        }
        Ok(())
    }
}

/// Per-token residual-stream activations of one model at one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationShard {
    pub d_model: usize,
    /// Row-major `n_tokens × d_model`.
    pub data: Vec<f32>,
    pub token_ids: Vec<u32>,
    pub special_mask: Vec<bool>,
    pub meta: ShardMeta,
}

impl ActivationShard {
    pub fn new(
        d_model: usize,
        data: Vec<f32>,
        token_ids: Vec<u32>,
        special_mask: Vec<bool>,
        meta: ShardMeta,
    ) -> Result<Self> {
        let shard = Self {
            d_model,
            data,
            token_ids,
            special_mask,
            meta,
        };
        shard.validate()?;
        Ok(shard)
    }

    /// Build a shard from an `f64` matrix, with zero token ids and no
    /// special tokens.
    pub fn from_mat(m: &Mat, meta: ShardMeta) -> Result<Self> {
        let n = m.nrows();
        Self::new(
            m.ncols(),
            linalg::to_row_major_f32(m),
            vec![0; n],
            vec![false; n],
            meta,
        )
    }

    pub fn n_tokens(&self) -> usize {
        self.token_ids.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 {
            return Err(Error::Validation("d_model must be positive".into()));
        }
        let n = self.token_ids.len();
        if self.special_mask.len() != n || self.data.len() != n * self.d_model {
            return Err(Error::Validation(format!(
                "inconsistent shard: {} ids, {} mask entries, {} values for d_model {}",
                n,
                self.special_mask.len(),
                self.data.len(),
                self.d_model
            )));
        }
        if let Some(i) = self.data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Validation(format!(
                "non-finite activation at row {}, col {}",
                i / self.d_model,
                i % self.d_model
            )));
        }
        self.meta.validate()
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.d_model..(r + 1) * self.d_model]
    }

    pub fn to_mat(&self) -> Mat {
        linalg::from_row_major_f32(self.n_tokens(), self.d_model, &self.data)
    }

    /// Gather selected rows into an `f64` matrix.
    pub fn gather(&self, rows: &[usize]) -> Mat {
        Mat::from_fn(rows.len(), self.d_model, |i, c| {
            f64::from(self.data[rows[i] * self.d_model + c])
        })
    }

    /// Rows `[start, end)` as a new shard sharing metadata.
    pub fn slice(&self, start: usize, end: usize) -> Self {
        Self {
            d_model: self.d_model,
            data: self.data[start * self.d_model..end * self.d_model].to_vec(),
            token_ids: self.token_ids[start..end].to_vec(),
            special_mask: self.special_mask[start..end].to_vec(),
            meta: self.meta.clone(),
        }
    }
}

/// A labeled weight matrix (unembedding, stitch maps, SAE weights, ...).
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix {
    pub rows: usize,
    pub cols: usize,
    /// Row-major.
    pub values: Vec<f32>,
    pub label: String,
    /// Extra metadata keys written next to `label`.
    pub attrs: BTreeMap<String, Value>,
}

impl DenseMatrix {
    pub fn from_mat(m: &Mat, label: impl Into<String>) -> Self {
        Self {
            rows: m.nrows(),
            cols: m.ncols(),
            values: linalg::to_row_major_f32(m),
            label: label.into(),
            attrs: BTreeMap::new(),
        }
    }

    /// A vector stored as a `1 × n` matrix.
    pub fn from_vector(v: &crate::Vector, label: impl Into<String>) -> Self {
        Self {
            rows: 1,
            cols: v.len(),
            values: v.iter().map(|&x| x as f32).collect(),
            label: label.into(),
            attrs: BTreeMap::new(),
        }
    }

    pub fn with_attr(mut self, key: &str, value: impl Into<Value>) -> Self {
        self.attrs.insert(key.to_string(), value.into());
        self
    }

    pub fn to_mat(&self) -> Mat {
        linalg::from_row_major_f32(self.rows, self.cols, &self.values)
    }

    pub fn to_vector(&self) -> crate::Vector {
        crate::Vector::from_iterator(self.values.len(), self.values.iter().map(|&v| f64::from(v)))
    }

    pub fn validate(&self) -> Result<()> {
        if self.rows == 0 || self.cols == 0 {
            return Err(Error::Validation(format!(
                "matrix '{}' has an empty dimension",
                self.label
            )));
        }
        if self.values.len() != self.rows * self.cols {
            return Err(Error::Validation(format!(
                "matrix '{}': {} values for {}x{}",
                self.label,
                self.values.len(),
                self.rows,
                self.cols
            )));
        }
        if self.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation(format!(
                "matrix '{}' has non-finite values",
                self.label
            )));
        }
        Ok(())
    }

    fn meta_json(&self) -> Vec<u8> {
        let mut obj = serde_json::Map::new();
        for (k, v) in &self.attrs {
            obj.insert(k.clone(), v.clone());
        }
        obj.insert("label".into(), Value::String(self.label.clone()));
        serde_json::to_vec(&Value::Object(obj)).expect("json map serializes")
    }
}

// ---------------------------------------------------------------------------
// Record encoding
// ---------------------------------------------------------------------------

fn encode_record(out: &mut Vec<u8>, rows: u64, cols: u32, meta: &[u8], payload: &[f32]) {
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&DType::F32.code().to_le_bytes());
    out.extend_from_slice(&rows.to_le_bytes());
    out.extend_from_slice(&cols.to_le_bytes());
    out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
    out.extend_from_slice(meta);
    out.reserve(payload.len() * 4);
    for v in payload {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct RawRecord {
    rows: usize,
    cols: usize,
    meta: serde_json::Map<String, Value>,
    payload: Vec<f32>,
}

fn take<'a>(buf: &mut &'a [u8], n: usize) -> Result<&'a [u8]> {
    if buf.len() < n {
        return Err(Error::Truncated {
            expected: n as u64,
            found: buf.len() as u64,
        });
    }
    let (head, rest) = buf.split_at(n);
    *buf = rest;
    Ok(head)
}

fn u32_le(b: &[u8]) -> u32 {
    u32::from_le_bytes(b.try_into().expect("4 bytes"))
}

fn u64_le(b: &[u8]) -> u64 {
    u64::from_le_bytes(b.try_into().expect("8 bytes"))
}

fn decode_record(buf: &mut &[u8]) -> Result<RawRecord> {
    let magic = take(buf, 4)?;
    if magic != MAGIC {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected \"AXT1\"",
            String::from_utf8_lossy(magic)
        )));
    }
    let version = u32_le(take(buf, 4)?);
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    DType::from_code(u32_le(take(buf, 4)?))?;
    let rows = u64_le(take(buf, 8)?);
    let cols = u64::from(u32_le(take(buf, 4)?));
    let meta_len = u64_le(take(buf, 8)?);
    let meta_bytes = take(buf, usize::try_from(meta_len).map_err(|_| Error::Format("metadata too large".into()))?)?;
    let meta: Value = serde_json::from_slice(meta_bytes)
        .map_err(|e| Error::Format(format!("metadata is not valid JSON: {e}")))?;
    let Value::Object(meta) = meta else {
        return Err(Error::Format("metadata must be a JSON object".into()));
    };
    let n_values = rows
        .checked_mul(cols)
        .ok_or_else(|| Error::Format("declared size overflows".into()))?;
    let expected = n_values * 4;
    if (buf.len() as u64) < expected {
        return Err(Error::Truncated {
            expected,
            found: buf.len() as u64,
        });
    }
    let bytes = take(buf, expected as usize)?;
    let payload: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    if let Some(i) = payload.iter().position(|v| !v.is_finite()) {
        return Err(Error::Validation(format!("non-finite payload value at index {i}")));
    }
    Ok(RawRecord {
        rows: rows as usize,
        cols: cols as usize,
        meta,
        payload,
    })
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    let mut f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut buf = Vec::new();
    f.read_to_end(&mut buf).map_err(|e| Error::io(path, e))?;
    Ok(buf)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))?;
    f.flush().map_err(|e| Error::io(path, e))
}

pub fn ids_path(path: &Path) -> PathBuf {
    path.with_extension("ids")
}

pub fn mask_path(path: &Path) -> PathBuf {
    path.with_extension("mask")
}

// ---------------------------------------------------------------------------
// Shards
// ---------------------------------------------------------------------------

/// Encode the main record of a shard (sidecars excluded).
pub fn encode_shard(shard: &ActivationShard) -> Result<Vec<u8>> {
    shard.validate()?;
    let mut meta = serde_json::to_value(&shard.meta).expect("meta serializes");
    if let Value::Object(m) = &mut meta {
        m.insert("label".into(), Value::String("activations".into()));
    }
    let meta = serde_json::to_vec(&meta).expect("json serializes");
    let mut out = Vec::with_capacity(HEADER_LEN + meta.len() + shard.data.len() * 4);
    encode_record(&mut out, shard.n_tokens() as u64, shard.d_model as u32, &meta, &shard.data);
    Ok(out)
}

pub fn write_shard(shard: &ActivationShard, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let main = encode_shard(shard)?;
    let ids: Vec<u8> = shard.token_ids.iter().flat_map(|t| t.to_le_bytes()).collect();
    let mask: Vec<u8> = shard.special_mask.iter().map(|&b| u8::from(b)).collect();
    write_file(path, &main)?;
    write_file(&ids_path(path), &ids)?;
    write_file(&mask_path(path), &mask)
}

pub fn read_shard(path: impl AsRef<Path>) -> Result<ActivationShard> {
    let path = path.as_ref();
    let bytes = read_file(path)?;
    let mut buf = bytes.as_slice();
    let rec = decode_record(&mut buf)?;
    if !buf.is_empty() {
        return Err(Error::Format(format!("{} trailing bytes after payload", buf.len())));
    }
    let meta: ShardMeta = serde_json::from_value(Value::Object(rec.meta))
        .map_err(|e| Error::Format(format!("shard metadata: {e}")))?;
    let n = rec.rows;

    let ids_bytes = read_file(&ids_path(path))?;
    if ids_bytes.len() != n * 4 {
        return Err(Error::Format(format!(
            "ids sidecar has {} bytes, expected {}",
            ids_bytes.len(),
            n * 4
        )));
    }
    let token_ids = ids_bytes.chunks_exact(4).map(u32_le).collect();
    let mask_bytes = read_file(&mask_path(path))?;
    if mask_bytes.len() != n {
        return Err(Error::Format(format!(
            "mask sidecar has {} bytes, expected {n}",
            mask_bytes.len()
        )));
    }
    let special_mask = mask_bytes
        .iter()
        .map(|&b| match b {
            0 => Ok(false),
            1 => Ok(true),
            other => Err(Error::Format(format!("mask byte {other} is not 0/1"))),
        })
        .collect::<Result<Vec<_>>>()?;
    ActivationShard::new(rec.cols, rec.payload, token_ids, special_mask, meta)
}

// ---------------------------------------------------------------------------
// Matrices and bundles
// ---------------------------------------------------------------------------

fn matrix_from_record(rec: RawRecord) -> Result<DenseMatrix> {
    let mut attrs: BTreeMap<String, Value> = rec.meta.into_iter().collect();
    let label = match attrs.remove("label") {
        Some(Value::String(s)) => s,
        Some(_) => return Err(Error::Format("label must be a string".into())),
        None => String::new(),
    };
    let m = DenseMatrix {
        rows: rec.rows,
        cols: rec.cols,
        values: rec.payload,
        label,
        attrs,
    };
    m.validate()?;
    Ok(m)
}

pub fn encode_bundle(mats: &[DenseMatrix]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for m in mats {
        m.validate()?;
        encode_record(&mut out, m.rows as u64, m.cols as u32, &m.meta_json(), &m.values);
    }
    Ok(out)
}

pub fn write_matrix(m: &DenseMatrix, path: impl AsRef<Path>) -> Result<()> {
    write_bundle(std::slice::from_ref(m), path)
}

pub fn read_matrix(path: impl AsRef<Path>) -> Result<DenseMatrix> {
    let mut all = read_bundle(path)?;
    if all.len() != 1 {
        return Err(Error::Format(format!("expected one matrix record, found {}", all.len())));
    }
    Ok(all.remove(0))
}

pub fn write_bundle(mats: &[DenseMatrix], path: impl AsRef<Path>) -> Result<()> {
    write_file(path.as_ref(), &encode_bundle(mats)?)
}

pub fn read_bundle(path: impl AsRef<Path>) -> Result<Vec<DenseMatrix>> {
    let bytes = read_file(path.as_ref())?;
    decode_bundle(&bytes)
}

pub fn decode_bundle(bytes: &[u8]) -> Result<Vec<DenseMatrix>> {
    let mut buf = bytes;
    let mut out = Vec::new();
    while !buf.is_empty() {
        out.push(matrix_from_record(decode_record(&mut buf)?)?);
    }
    if out.is_empty() {
        return Err(Error::Format("empty container".into()));
    }
    Ok(out)
}

/// Look up a record by label.
pub fn find<'a>(mats: &'a [DenseMatrix], label: &str) -> Result<&'a DenseMatrix> {
    mats.iter()
        .find(|m| m.label == label)
        .ok_or_else(|| Error::Format(format!("bundle has no '{label}' record")))
}

// ---------------------------------------------------------------------------
// Streaming
// ---------------------------------------------------------------------------

/// Where a streamed row came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct RowRef {
    pub shard: usize,
    pub row: usize,
}

#[derive(Debug, Clone)]
pub struct Batch {
    pub data: Mat,
    pub rows: Vec<RowRef>,
}

fn check_shards(shards: &[ActivationShard]) -> Result<usize> {
    let d = shards
        .first()
        .map(|s| s.d_model)
        .ok_or_else(|| Error::InvalidArgument("no shards to stream".into()))?;
    if let Some(s) = shards.iter().find(|s| s.d_model != d) {
        return Err(Error::shape(format!(
            "d_model mismatch across shards: {d} vs {}",
            s.d_model
        )));
    }
    Ok(d)
}

/// The shuffled row order of one epoch.
fn epoch_order(
    row_counts: &[usize],
    is_special: impl Fn(usize, usize) -> bool,
    drop_special: bool,
    seed: u64,
    epoch: u64,
) -> Vec<RowRef> {
    let mut order: Vec<RowRef> = row_counts
        .iter()
        .enumerate()
        .flat_map(|(shard, &n)| (0..n).map(move |row| RowRef { shard, row }))
        .filter(|r| !(drop_special && is_special(r.shard, r.row)))
        .collect();
    let mut rng = rng::seeded(rng::indexed(seed, epoch));
    order.shuffle(&mut rng);
    order
}

fn gather(shards: &[ActivationShard], d: usize, rows: &[RowRef]) -> Mat {
    Mat::from_fn(rows.len(), d, |i, c| {
        let r = rows[i];
        f64::from(shards[r.shard].data[r.row * d + c])
    })
}

/// Iterator over the batches of one epoch.
pub struct BatchStream<'a> {
    shards: &'a [ActivationShard],
    d: usize,
    order: Vec<RowRef>,
    pos: usize,
    batch_tokens: usize,
}

impl BatchStream<'_> {
    /// Number of rows this epoch will emit.
    pub fn len_rows(&self) -> usize {
        self.order.len()
    }
}

impl Iterator for BatchStream<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_tokens).min(self.order.len());
        let rows = self.order[self.pos..end].to_vec();
        self.pos = end;
        Some(Batch {
            data: gather(self.shards, self.d, &rows),
            rows,
        })
    }
}

/// Stream epoch 0 of the shards in shuffled batches.
pub fn stream_batches(
    shards: &[ActivationShard],
    batch_tokens: usize,
    drop_special: bool,
    seed: u64,
) -> Result<BatchStream<'_>> {
    stream_epoch(shards, batch_tokens, drop_special, seed, 0)
}

/// Stream a given epoch; each epoch draws its own permutation from `seed`.
pub fn stream_epoch(
    shards: &[ActivationShard],
    batch_tokens: usize,
    drop_special: bool,
    seed: u64,
    epoch: u64,
) -> Result<BatchStream<'_>> {
    if batch_tokens == 0 {
        return Err(Error::InvalidArgument("batch_tokens must be at least 1".into()));
    }
    let d = check_shards(shards)?;
    let counts: Vec<usize> = shards.iter().map(ActivationShard::n_tokens).collect();
    let order = epoch_order(
        &counts,
        |s, r| shards[s].special_mask[r],
        drop_special,
        seed,
        epoch,
    );
    Ok(BatchStream {
        shards,
        d,
        order,
        pos: 0,
        batch_tokens,
    })
}

/// Row-aligned batches drawn from two models' shards over the same tokens.
#[derive(Debug, Clone)]
pub struct PairedBatch {
    pub a: Mat,
    pub b: Mat,
    pub rows: Vec<RowRef>,
}

pub struct PairedStream<'a> {
    a: &'a [ActivationShard],
    b: &'a [ActivationShard],
    d_a: usize,
    d_b: usize,
    order: Vec<RowRef>,
    pos: usize,
    batch_tokens: usize,
}

impl PairedStream<'_> {
    /// Number of rows this epoch will emit.
    pub fn len_rows(&self) -> usize {
        self.order.len()
    }
}

impl Iterator for PairedStream<'_> {
    type Item = PairedBatch;

    fn next(&mut self) -> Option<PairedBatch> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_tokens).min(self.order.len());
        let rows = self.order[self.pos..end].to_vec();
        self.pos = end;
        Some(PairedBatch {
            a: gather(self.a, self.d_a, &rows),
            b: gather(self.b, self.d_b, &rows),
            rows,
        })
    }
}

/// Paired epoch stream. A token is dropped when it is special in either
/// model.
pub fn stream_paired_epoch<'a>(
    a: &'a [ActivationShard],
    b: &'a [ActivationShard],
    batch_tokens: usize,
    drop_special: bool,
    seed: u64,
    epoch: u64,
) -> Result<PairedStream<'a>> {
    if batch_tokens == 0 {
        return Err(Error::InvalidArgument("batch_tokens must be at least 1".into()));
    }
    let d_a = check_shards(a)?;
    let d_b = check_shards(b)?;
    if a.len() != b.len() || a.iter().zip(b).any(|(x, y)| x.n_tokens() != y.n_tokens()) {
        return Err(Error::shape("paired shards are not row-aligned"));
    }
    let counts: Vec<usize> = a.iter().map(ActivationShard::n_tokens).collect();
    let order = epoch_order(
        &counts,
        |s, r| a[s].special_mask[r] || b[s].special_mask[r],
        drop_special,
        seed,
        epoch,
    );
    Ok(PairedStream {
        a,
        b,
        d_a,
        d_b,
        order,
        pos: 0,
        batch_tokens,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn zeros_shard(rows: usize, cols: usize) -> ActivationShard {
        ActivationShard::new(
            cols,
            vec![0.0; rows * cols],
            vec![0; rows],
            vec![false; rows],
            ShardMeta::new("toy", 0),
        )
        .unwrap()
    }

    #[test]
    fn zero_shard_layout() {
        let shard = zeros_shard(2, 3);
        let bytes = encode_shard(&shard).unwrap();
        assert_eq!(&bytes[..4], b"AXT1");
        let meta_len = u64::from_le_bytes(bytes[24..32].try_into().unwrap()) as usize;
        assert_eq!(bytes.len(), HEADER_LEN + meta_len + 24);
        assert_eq!(u64::from_le_bytes(bytes[12..20].try_into().unwrap()), 2);
        assert_eq!(u32::from_le_bytes(bytes[20..24].try_into().unwrap()), 3);
    }

    #[test]
    fn nan_is_rejected_on_write() {
        let mut shard = zeros_shard(2, 3);
        shard.data[4] = f32::NAN;
        assert!(matches!(encode_shard(&shard), Err(Error::Validation(_))));
    }

    #[test]
    fn bad_magic_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.axt");
        write_shard(&zeros_shard(2, 3), &p).unwrap();
        let good = fs::read(&p).unwrap();

        let mut bad = good.clone();
        bad[..4].copy_from_slice(b"XXXX");
        fs::write(&p, &bad).unwrap();
        assert!(matches!(read_shard(&p), Err(Error::Format(_))));

        fs::write(&p, &good[..good.len() - 1]).unwrap();
        assert!(matches!(read_shard(&p), Err(Error::Truncated { .. })));

        let mut dt = good.clone();
        dt[8..12].copy_from_slice(&5u32.to_le_bytes());
        fs::write(&p, &dt).unwrap();
        assert!(matches!(read_shard(&p), Err(Error::Dtype(5))));

        let mut nan = good;
        let n = nan.len();
        nan[n - 4..].copy_from_slice(&f32::NAN.to_le_bytes());
        fs::write(&p, &nan).unwrap();
        assert!(matches!(read_shard(&p), Err(Error::Validation(_))));
    }

    #[test]
    fn special_rows_dropped_and_batch_sizes() {
        let mut shard = zeros_shard(10, 2);
        for r in [1, 4, 8] {
            shard.special_mask[r] = true;
        }
        let sizes: Vec<usize> = stream_batches(std::slice::from_ref(&shard), 4, true, 11)
            .unwrap()
            .map(|b| b.rows.len())
            .collect();
        assert_eq!(sizes, vec![4, 3]);
    }

    #[test]
    fn d_model_mismatch() {
        let shards = [zeros_shard(2, 3), zeros_shard(2, 4)];
        assert!(matches!(stream_batches(&shards, 2, false, 0), Err(Error::Shape(_))));
    }

    #[test]
    fn bundle_round_trip_keeps_attrs() {
        let m = Mat::from_fn(2, 3, |r, c| (r * 3 + c) as f64 * 0.5);
        let a = DenseMatrix::from_mat(&m, "P_up").with_attr("alpha", 1.0);
        let b = DenseMatrix::from_vector(&crate::Vector::from_vec(vec![1.0, 2.0]), "b_down");
        let bytes = encode_bundle(&[a.clone(), b.clone()]).unwrap();
        let back = decode_bundle(&bytes).unwrap();
        assert_eq!(back, vec![a, b]);
    }
}
