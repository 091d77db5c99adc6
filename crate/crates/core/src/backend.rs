//! Embedding sources: the `OTS1` binary file format and a seeded Gaussian
//! generator.
//!
//! # File layout
//!
//! All integers little-endian.
//!
//! | field         | type                          |
//! |---------------|-------------------------------|
//! | magic         | `b"OTS1"`                     |
//! | version       | u16 = 1                       |
//! | dim           | u32 (>= 1)                    |
//! | record count  | u64                           |
//! | backbone tag  | u16 length + UTF-8 bytes      |
//! | split tag     | u16 length + UTF-8 bytes      |
//! | records       | count x (u64 id, u32 label, dim x f32) |
//!
//! Nothing may follow the last record.

use std::collections::HashSet;
use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embedding::Embedding;
use crate::error::{Error, Result};
use crate::protocol::LabeledEmbedding;

pub const MAGIC: &[u8; 4] = b"OTS1";
pub const VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingDataset {
    dim: usize,
    backbone_tag: String,
    split_tag: String,
    records: Vec<LabeledEmbedding>,
}

impl EmbeddingDataset {
    pub fn new(
        dim: usize,
        backbone_tag: impl Into<String>,
        split_tag: impl Into<String>,
        records: Vec<LabeledEmbedding>,
    ) -> Result<Self> {
        if dim == 0 || dim > u32::MAX as usize {
            return Err(Error::Validation(format!("invalid dim {dim}")));
        }
        let (backbone_tag, split_tag) = (backbone_tag.into(), split_tag.into());
        for tag in [&backbone_tag, &split_tag] {
            if tag.len() > u16::MAX as usize {
                return Err(Error::Validation("tag longer than 65535 bytes".into()));
            }
        }
        let mut ids = HashSet::with_capacity(records.len());
        for r in &records {
            r.embedding.check_dim(dim)?;
            if !ids.insert(r.example_id) {
                return Err(Error::Validation(format!(
                    "duplicate example id {}",
                    r.example_id
                )));
            }
        }
        Ok(EmbeddingDataset {
            dim,
            backbone_tag,
            split_tag,
            records,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn backbone_tag(&self) -> &str {
        &self.backbone_tag
    }

    pub fn split_tag(&self) -> &str {
        &self.split_tag
    }

    pub fn records(&self) -> &[LabeledEmbedding] {
        &self.records
    }

    pub fn into_records(self) -> Vec<LabeledEmbedding> {
        self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.dim as u32).to_le_bytes())?;
        w.write_all(&(self.records.len() as u64).to_le_bytes())?;
        for tag in [&self.backbone_tag, &self.split_tag] {
            w.write_all(&(tag.len() as u16).to_le_bytes())?;
            w.write_all(tag.as_bytes())?;
        }
        let mut buf = Vec::with_capacity(12 + self.dim * 4);
        for r in &self.records {
            buf.clear();
            buf.extend_from_slice(&r.example_id.to_le_bytes());
            buf.extend_from_slice(&r.label.to_le_bytes());
            for v in r.embedding.values() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        w.flush()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out)
            .expect("writing to a Vec cannot fail");
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        read_from(bytes)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Header {
    pub dim: usize,
    pub count: u64,
    pub backbone_tag: String,
    pub split_tag: String,
}

/// Streams records out of an `OTS1` source one at a time.
pub struct RecordReader<R> {
    inner: R,
    header: Header,
    remaining: u64,
    records_read: u64,
    buf: Vec<u8>,
}

fn eof_as_format(e: io::Error, what: &str) -> Error {
    if e.kind() == io::ErrorKind::UnexpectedEof {
        Error::Format(format!("truncated {what}"))
    } else {
        Error::Format(format!("reading {what}: {e}"))
    }
}

fn read_array<R: Read, const N: usize>(r: &mut R, what: &str) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b).map_err(|e| eof_as_format(e, what))?;
    Ok(b)
}

fn read_tag<R: Read>(r: &mut R, what: &str) -> Result<String> {
    let len = u16::from_le_bytes(read_array(r, what)?) as usize;
    let mut bytes = vec![0u8; len];
    r.read_exact(&mut bytes)
        .map_err(|e| eof_as_format(e, what))?;
    String::from_utf8(bytes).map_err(|_| Error::Format(format!("{what} is not UTF-8")))
}

impl<R: Read> RecordReader<R> {
    pub fn new(mut inner: R) -> Result<Self> {
        let magic: [u8; 4] = read_array(&mut inner, "magic")?;
        if &magic != MAGIC {
            return Err(Error::Format(format!("bad magic {magic:?}")));
        }
        let version = u16::from_le_bytes(read_array(&mut inner, "version")?);
        if version != VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let dim = u32::from_le_bytes(read_array(&mut inner, "dim")?) as usize;
        if dim == 0 {
            return Err(Error::Format("header dim is zero".into()));
        }
        let count = u64::from_le_bytes(read_array(&mut inner, "record count")?);
        let backbone_tag = read_tag(&mut inner, "backbone tag")?;
        let split_tag = read_tag(&mut inner, "split tag")?;
        Ok(RecordReader {
            inner,
            header: Header {
                dim,
                count,
                backbone_tag,
                split_tag,
            },
            remaining: count,
            records_read: 0,
            buf: vec![0u8; 12 + dim * 4],
        })
    }

    pub fn header(&self) -> &Header {
        &self.header
    }

    pub fn records_read(&self) -> u64 {
        self.records_read
    }

    fn next_record(&mut self) -> Result<LabeledEmbedding> {
        let at = self.records_read;
        self.inner
            .read_exact(&mut self.buf)
            .map_err(|e| eof_as_format(e, &format!("record {at}")))?;
        let example_id = u64::from_le_bytes(self.buf[0..8].try_into().unwrap());
        let label = u32::from_le_bytes(self.buf[8..12].try_into().unwrap());
        let values: Vec<f32> = self.buf[12..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let embedding = Embedding::new(values)
            .map_err(|e| Error::Validation(format!("record {at} (example {example_id}): {e}")))?;
        self.remaining -= 1;
        self.records_read += 1;
        Ok(LabeledEmbedding::new(example_id, label, embedding))
    }

    /// Fails unless the source is exhausted.
    pub fn finish(mut self) -> Result<R> {
        if self.remaining != 0 {
            return Err(Error::Format(format!(
                "{} records left unread",
                self.remaining
            )));
        }
        let mut probe = [0u8; 1];
        match self.inner.read(&mut probe) {
            Ok(0) => Ok(self.inner),
            Ok(_) => Err(Error::Format("trailing bytes after last record".into())),
            Err(e) => Err(Error::Format(format!("reading trailer: {e}"))),
        }
    }
}

impl<R: Read> Iterator for RecordReader<R> {
    type Item = Result<LabeledEmbedding>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.remaining == 0 {
            return None;
        }
        let r = self.next_record();
        if r.is_err() {
            self.remaining = 0;
        }
        Some(r)
    }
}

/// Counts bytes pulled from the wrapped reader.
pub struct CountingReader<R> {
    inner: R,
    bytes: u64,
}

impl<R> CountingReader<R> {
    pub fn new(inner: R) -> Self {
        CountingReader { inner, bytes: 0 }
    }

    pub fn bytes_read(&self) -> u64 {
        self.bytes
    }
}

impl<R: Read> Read for CountingReader<R> {
    fn read(&mut self, buf: &mut [u8]) -> io::Result<usize> {
        let n = self.inner.read(buf)?;
        self.bytes += n as u64;
        Ok(n)
    }
}

/// Reads a full dataset, validating every record.
pub fn read_from<R: Read>(source: R) -> Result<EmbeddingDataset> {
    let mut reader = RecordReader::new(source)?;
    let header = reader.header().clone();
    // the count is untrusted; don't preallocate from it blindly
    let mut records = Vec::with_capacity(header.count.min(1 << 16) as usize);
    for r in &mut reader {
        records.push(r?);
    }
    reader.finish()?;
    EmbeddingDataset::new(header.dim, header.backbone_tag, header.split_tag, records)
}

pub fn read_embeddings(path: impl AsRef<Path>) -> Result<EmbeddingDataset> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_from(BufReader::new(file)).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        Error::Validation(m) => Error::Validation(format!("{}: {m}", path.display())),
        other => other,
    })
}

pub fn write_embeddings(dataset: &EmbeddingDataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    dataset
        .write_to(BufWriter::new(file))
        .map_err(|e| Error::io(path, e))
}

/// Which sample stream of a synthetic dataset to draw.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SynthSplit {
    Train,
    Test,
}

impl SynthSplit {
    fn stream(self) -> u64 {
        match self {
            SynthSplit::Train => 1,
            SynthSplit::Test => 2,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            SynthSplit::Train => "train",
            SynthSplit::Test => "test",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthParams {
    pub classes: u32,
    pub per_class: u32,
    pub dim: usize,
    /// Pairwise center distance, in units of the per-axis noise sigma (1.0).
    pub separation: f64,
    pub seed: u64,
    pub split: SynthSplit,
}

pub const SYNTH_BACKBONE_TAG: &str = "synthetic-gaussian";

/// Isotropic Gaussian classes with pairwise center distance exactly
/// `separation` (noise sigma is 1).
///
/// Generator, so other implementations can reproduce the bytes:
///
/// * Two `ChaCha8Rng` instances (rand_chacha 0.3) seeded with
///   `seed_from_u64(seed)`: the center stream stays on ChaCha stream 0, the
///   sample stream switches to `set_stream(1)` for train, `2` for test.
/// * A uniform `u` in `[0, 1)` is `(next_u64() >> 11) * 2^-53`.
/// * Shared offset `o_j = 2u - 1` for each of the `dim` axes (center stream).
///   Center of class `c` is `o + (separation / sqrt 2) * e_c`, so `classes`
///   must not exceed `dim`.
/// * Records are emitted round-robin: for `i` in `0..per_class`, for `c` in
///   `0..classes`, example id `i * classes + c`, label `c`. Each coordinate is
///   `center + sqrt(-2 ln(1 - u1)) * cos(2 pi u2)` with `u1`, `u2` drawn in
///   that order from the sample stream, computed in f64 and rounded to f32.
pub fn synth_gaussian(params: &SynthParams) -> Result<EmbeddingDataset> {
    let SynthParams {
        classes,
        per_class,
        dim,
        separation,
        seed,
        split,
    } = *params;
    if classes < 2 {
        return Err(Error::Validation("need at least 2 classes".into()));
    }
    if per_class < 1 {
        return Err(Error::Validation(
            "need at least 1 example per class".into(),
        ));
    }
    if !(separation.is_finite() && separation > 0.0) {
        return Err(Error::Validation(format!(
            "separation must be > 0, got {separation}"
        )));
    }
    if dim < classes as usize {
        return Err(Error::Validation(format!(
            "dim {dim} cannot hold {classes} equidistant class centers"
        )));
    }

    let mut centers_rng = ChaCha8Rng::seed_from_u64(seed);
    let offset: Vec<f64> = (0..dim)
        .map(|_| 2.0 * unit_f64(&mut centers_rng) - 1.0)
        .collect();
    let radius = separation / std::f64::consts::SQRT_2;
    let centers: Vec<Vec<f64>> = (0..classes as usize)
        .map(|c| {
            let mut v = offset.clone();
            v[c] += radius;
            v
        })
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(split.stream());
    let mut records = Vec::with_capacity(classes as usize * per_class as usize);
    for i in 0..per_class as u64 {
        for c in 0..classes {
            let values: Vec<f32> = centers[c as usize]
                .iter()
                .map(|&m| (m + std_normal(&mut rng)) as f32)
                .collect();
            let id = i * u64::from(classes) + u64::from(c);
            records.push(LabeledEmbedding::new(id, c, Embedding::new(values)?));
        }
    }
    EmbeddingDataset::new(dim, SYNTH_BACKBONE_TAG, split.as_str(), records)
}

fn unit_f64(rng: &mut impl RngCore) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

fn std_normal(rng: &mut impl RngCore) -> f64 {
    let u1 = unit_f64(rng);
    let u2 = unit_f64(rng);
    (-2.0 * (1.0 - u1).ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}
