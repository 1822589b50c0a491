//! Expert bundles, low-rank adapters and their on-disk formats.
//!
//! Bundle files (`.fmw`):
//!
//! ```text
//! "FMW1" | u32 version=1 | u32 len, name
//! u32 matrix count
//! per matrix: u32 len, target name | u64 rows | u64 cols | u8 dtype (0 = f64) | rows*cols f64
//! ```
//!
//! Adapter files (`.fma`):
//!
//! ```text
//! "FMA1" | u32 version=1 | u32 len, name | u32 len, base name
//! u32 entry count
//! per entry: u32 len, target name | u64 rank | B matrix record | A matrix record
//! ```
//!
//! where a matrix record is `u64 rows | u64 cols | u8 dtype | payload`. All
//! integers and floats are little-endian; payloads are row-major.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::linalg::{LinalgError, Matrix};

pub const BUNDLE_MAGIC: [u8; 4] = *b"FMW1";
pub const ADAPTER_MAGIC: [u8; 4] = *b"FMA1";
pub const FORMAT_VERSION: u32 = 1;
pub const DTYPE_F64: u8 = 0;

#[derive(Debug, Error)]
pub enum WeightsError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic {found:?}, expected {expected:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),
    #[error("file truncated: needed {needed} bytes at offset {offset}, {available} available")]
    Truncated {
        offset: usize,
        needed: usize,
        available: usize,
    },
    #[error("{0} trailing bytes after payload")]
    TrailingBytes(usize),
    #[error("unknown dtype tag {0}")]
    UnknownDtype(u8),
    #[error("invalid UTF-8 in name")]
    InvalidUtf8,
    #[error("non-finite value in target '{target}' at ({row}, {col})")]
    NonFinite { target: String, row: usize, col: usize },
    #[error("invariant violated: {0}")]
    Invariant(String),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

pub type Result<T> = std::result::Result<T, WeightsError>;

/// One named weight matrix inside a bundle.
#[derive(Debug, Clone, PartialEq)]
pub struct Target {
    pub name: String,
    pub matrix: Matrix,
}

/// A full-size expert: an ordered list of uniquely named matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertBundle {
    name: String,
    targets: Vec<Target>,
}

impl ExpertBundle {
    pub fn new(name: impl Into<String>, targets: Vec<(String, Matrix)>) -> Result<Self> {
        let mut seen = HashSet::new();
        for (t, _) in &targets {
            if !seen.insert(t.as_str()) {
                return Err(WeightsError::Invariant(format!("duplicate target name '{t}'")));
            }
        }
        Ok(Self {
            name: name.into(),
            targets: targets
                .into_iter()
                .map(|(name, matrix)| Target { name, matrix })
                .collect(),
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    pub fn targets(&self) -> &[Target] {
        &self.targets
    }

    pub fn target_names(&self) -> Vec<&str> {
        self.targets.iter().map(|t| t.name.as_str()).collect()
    }

    pub fn get(&self, target: &str) -> Option<&Matrix> {
        self.targets.iter().find(|t| t.name == target).map(|t| &t.matrix)
    }

    pub fn dims_signature(&self) -> Vec<(usize, usize)> {
        self.targets.iter().map(|t| t.matrix.shape()).collect()
    }

    /// Same target names in the same order with the same shapes.
    pub fn is_composable_with(&self, other: &ExpertBundle) -> bool {
        self.first_incompatibility(other).is_none()
    }

    /// Name of the first target whose name or shape differs, if any.
    pub fn first_incompatibility(&self, other: &ExpertBundle) -> Option<String> {
        for (i, (a, b)) in self.targets.iter().zip(&other.targets).enumerate() {
            if a.name != b.name || a.matrix.shape() != b.matrix.shape() {
                return Some(format!(
                    "target #{i}: '{}' {:?} vs '{}' {:?}",
                    a.name,
                    a.matrix.shape(),
                    b.name,
                    b.matrix.shape()
                ));
            }
        }
        if self.targets.len() != other.targets.len() {
            return Some(format!(
                "target count {} vs {}",
                self.targets.len(),
                other.targets.len()
            ));
        }
        None
    }
}

/// Low-rank factors `B (d_out x r)` and `A (r x d_in)` for one target.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterEntry {
    pub target: String,
    pub rank: usize,
    pub b: Matrix,
    pub a: Matrix,
}

impl AdapterEntry {
    pub fn new(target: impl Into<String>, b: Matrix, a: Matrix) -> Result<Self> {
        let target = target.into();
        let rank = b.cols();
        if a.rows() != rank {
            return Err(WeightsError::Invariant(format!(
                "target '{target}': B has {} columns but A has {} rows",
                b.cols(),
                a.rows()
            )));
        }
        let max = b.rows().min(a.cols());
        if rank > max {
            return Err(WeightsError::Invariant(format!(
                "target '{target}': rank {rank} exceeds min(d_out, d_in) = {max}"
            )));
        }
        Ok(Self { target, rank, b, a })
    }

    /// `(d_out, d_in)` of the adapted matrix.
    pub fn target_shape(&self) -> (usize, usize) {
        (self.b.rows(), self.a.cols())
    }

    /// Dense `B · A`.
    pub fn product(&self) -> Matrix {
        self.b.matmul(&self.a).expect("B.cols == A.rows by construction")
    }
}

/// Low-rank expert anchored to a named full-size base bundle.
#[derive(Debug, Clone, PartialEq)]
pub struct LowRankAdapter {
    name: String,
    base_name: String,
    entries: Vec<AdapterEntry>,
}

impl LowRankAdapter {
    pub fn new(name: impl Into<String>, base_name: impl Into<String>, entries: Vec<AdapterEntry>) -> Result<Self> {
        let mut seen = HashSet::new();
        for e in &entries {
            if !seen.insert(e.target.as_str()) {
                return Err(WeightsError::Invariant(format!(
                    "duplicate adapter target '{}'",
                    e.target
                )));
            }
        }
        Ok(Self {
            name: name.into(),
            base_name: base_name.into(),
            entries,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn base_name(&self) -> &str {
        &self.base_name
    }

    pub fn entries(&self) -> &[AdapterEntry] {
        &self.entries
    }

    pub fn entry(&self, target: &str) -> Option<&AdapterEntry> {
        self.entries.iter().find(|e| e.target == target)
    }
}

// ---------------------------------------------------------------------------
// Encoding

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(buf: &mut Vec<u8>, v: u64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_str(buf: &mut Vec<u8>, s: &str) -> Result<()> {
    let len =
        u32::try_from(s.len()).map_err(|_| WeightsError::Invariant(format!("name too long ({} bytes)", s.len())))?;
    put_u32(buf, len);
    buf.extend_from_slice(s.as_bytes());
    Ok(())
}

fn put_matrix(buf: &mut Vec<u8>, target: &str, m: &Matrix) -> Result<()> {
    if let Some(idx) = m.data().iter().position(|x| !x.is_finite()) {
        return Err(WeightsError::NonFinite {
            target: target.to_string(),
            row: idx / m.cols(),
            col: idx % m.cols(),
        });
    }
    put_u64(buf, m.rows() as u64);
    put_u64(buf, m.cols() as u64);
    buf.push(DTYPE_F64);
    buf.reserve(m.data().len() * 8);
    for x in m.data() {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    Ok(())
}

fn count_u32(n: usize, what: &str) -> Result<u32> {
    u32::try_from(n).map_err(|_| WeightsError::Invariant(format!("too many {what} ({n})")))
}

pub fn encode_bundle(b: &ExpertBundle) -> Result<Vec<u8>> {
    if b.targets.is_empty() {
        return Err(WeightsError::Invariant(format!("bundle '{}' has no matrices", b.name)));
    }
    let mut buf = Vec::new();
    buf.extend_from_slice(&BUNDLE_MAGIC);
    put_u32(&mut buf, FORMAT_VERSION);
    put_str(&mut buf, &b.name)?;
    put_u32(&mut buf, count_u32(b.targets.len(), "matrices")?);
    for t in &b.targets {
        put_str(&mut buf, &t.name)?;
        put_matrix(&mut buf, &t.name, &t.matrix)?;
    }
    Ok(buf)
}

pub fn encode_adapter(a: &LowRankAdapter) -> Result<Vec<u8>> {
    if a.entries.is_empty() {
        return Err(WeightsError::Invariant(format!("adapter '{}' has no entries", a.name)));
    }
    let mut buf = Vec::new();
    buf.extend_from_slice(&ADAPTER_MAGIC);
    put_u32(&mut buf, FORMAT_VERSION);
    put_str(&mut buf, &a.name)?;
    put_str(&mut buf, &a.base_name)?;
    put_u32(&mut buf, count_u32(a.entries.len(), "entries")?);
    for e in &a.entries {
        put_str(&mut buf, &e.target)?;
        put_u64(&mut buf, e.rank as u64);
        put_matrix(&mut buf, &e.target, &e.b)?;
        put_matrix(&mut buf, &e.target, &e.a)?;
    }
    Ok(buf)
}

// ---------------------------------------------------------------------------
// Decoding

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let available = self.buf.len() - self.pos;
        if n > available {
            return Err(WeightsError::Truncated {
                offset: self.pos,
                needed: n,
                available,
            });
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        let bytes = self.take(len)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| WeightsError::InvalidUtf8)
    }

    fn header(&mut self, magic: [u8; 4]) -> Result<()> {
        let found: [u8; 4] = self.take(4)?.try_into().unwrap();
        if found != magic {
            return Err(WeightsError::BadMagic { expected: magic, found });
        }
        let version = self.u32()?;
        if version != FORMAT_VERSION {
            return Err(WeightsError::UnsupportedVersion(version));
        }
        Ok(())
    }

    fn matrix(&mut self, target: &str) -> Result<Matrix> {
        let rows = self.dim()?;
        let cols = self.dim()?;
        let dtype = self.u8()?;
        if dtype != DTYPE_F64 {
            return Err(WeightsError::UnknownDtype(dtype));
        }
        if rows == 0 || cols == 0 {
            return Err(WeightsError::Invariant(format!(
                "target '{target}' has empty shape {rows}x{cols}"
            )));
        }
        let n = rows
            .checked_mul(cols)
            .and_then(|n| n.checked_mul(8))
            .ok_or_else(|| WeightsError::Invariant(format!("target '{target}' too large")))?;
        let bytes = self.take(n)?;
        let data: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if let Some(idx) = data.iter().position(|x| !x.is_finite()) {
            return Err(WeightsError::NonFinite {
                target: target.to_string(),
                row: idx / cols,
                col: idx % cols,
            });
        }
        Ok(Matrix::new(rows, cols, data)?)
    }

    fn dim(&mut self) -> Result<usize> {
        let v = self.u64()?;
        usize::try_from(v).map_err(|_| WeightsError::Invariant(format!("dimension {v} too large")))
    }

    fn finish(&self) -> Result<()> {
        match self.buf.len() - self.pos {
            0 => Ok(()),
            n => Err(WeightsError::TrailingBytes(n)),
        }
    }
}

pub fn decode_bundle(bytes: &[u8]) -> Result<ExpertBundle> {
    let mut r = Reader::new(bytes);
    r.header(BUNDLE_MAGIC)?;
    let name = r.string()?;
    let count = r.u32()? as usize;
    if count == 0 {
        return Err(WeightsError::Invariant(format!("bundle '{name}' has no matrices")));
    }
    let mut targets = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let target = r.string()?;
        let m = r.matrix(&target)?;
        targets.push((target, m));
    }
    r.finish()?;
    ExpertBundle::new(name, targets)
}

pub fn decode_adapter(bytes: &[u8]) -> Result<LowRankAdapter> {
    let mut r = Reader::new(bytes);
    r.header(ADAPTER_MAGIC)?;
    let name = r.string()?;
    let base_name = r.string()?;
    let count = r.u32()? as usize;
    if count == 0 {
        return Err(WeightsError::Invariant(format!("adapter '{name}' has no entries")));
    }
    let mut entries = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let target = r.string()?;
        let rank = r.dim()?;
        let b = r.matrix(&target)?;
        let a = r.matrix(&target)?;
        if b.cols() != rank {
            return Err(WeightsError::Invariant(format!(
                "target '{target}': declared rank {rank} but B has {} columns",
                b.cols()
            )));
        }
        entries.push(AdapterEntry::new(target, b, a)?);
    }
    r.finish()?;
    LowRankAdapter::new(name, base_name, entries)
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> WeightsError + '_ {
    move |source| WeightsError::Io {
        path: path.display().to_string(),
        source,
    }
}

pub fn save_bundle(b: &ExpertBundle, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_bundle(b)?;
    fs::write(path, bytes).map_err(io_err(path))
}

pub fn load_bundle(path: impl AsRef<Path>) -> Result<ExpertBundle> {
    let path = path.as_ref();
    decode_bundle(&fs::read(path).map_err(io_err(path))?)
}

pub fn save_adapter(a: &LowRankAdapter, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_adapter(a)?;
    fs::write(path, bytes).map_err(io_err(path))
}

pub fn load_adapter(path: impl AsRef<Path>) -> Result<LowRankAdapter> {
    let path = path.as_ref();
    decode_adapter(&fs::read(path).map_err(io_err(path))?)
}
