//! The prototype memory bank.
//!
//! Each class keeps a running `f64` sum and a count; the served prototype is
//! the mean rounded to `f32`. Nothing else is stored, so the footprint of a
//! bank is exactly `dim * 4` bytes per class.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::embedding::{unit_normalize, Embedding};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct ClassPrototype {
    class_id: u32,
    sum: Vec<f64>,
    count: u64,
    mean: Embedding,
}

impl ClassPrototype {
    fn from_sum(class_id: u32, sum: Vec<f64>, count: u64) -> Self {
        let n = count as f64;
        let mean = sum.iter().map(|&s| (s / n) as f32).collect();
        ClassPrototype {
            class_id,
            sum,
            count,
            // finite inputs and count >= 1 keep the mean finite
            mean: Embedding::new(mean).expect("mean of finite features is finite"),
        }
    }

    pub fn class_id(&self) -> u32 {
        self.class_id
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn sum(&self) -> &[f64] {
        &self.sum
    }

    pub fn mean(&self) -> &Embedding {
        &self.mean
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BankOptions {
    /// Reject a class that was already observed in an earlier group.
    pub strict_nc: bool,
    /// Unit-normalize each feature before it enters the running sum.
    pub normalize_features: bool,
}

impl Default for BankOptions {
    fn default() -> Self {
        BankOptions {
            strict_nc: true,
            normalize_features: false,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MemoryBank {
    prototypes: BTreeMap<u32, ClassPrototype>,
    dim: Option<usize>,
    options: BankOptions,
}

impl MemoryBank {
    pub fn new(options: BankOptions) -> Self {
        MemoryBank {
            prototypes: BTreeMap::new(),
            dim: None,
            options,
        }
    }

    pub fn options(&self) -> BankOptions {
        self.options
    }

    pub fn dim(&self) -> Option<usize> {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.prototypes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prototypes.is_empty()
    }

    pub fn contains(&self, class_id: u32) -> bool {
        self.prototypes.contains_key(&class_id)
    }

    pub fn get(&self, class_id: u32) -> Option<&ClassPrototype> {
        self.prototypes.get(&class_id)
    }

    /// Prototypes in ascending class id order.
    pub fn prototypes(&self) -> impl ExactSizeIterator<Item = &ClassPrototype> {
        self.prototypes.values()
    }

    pub fn class_ids(&self) -> Vec<u32> {
        self.prototypes.keys().copied().collect()
    }

    /// Number of features accumulated across all classes.
    pub fn total_count(&self) -> u64 {
        self.prototypes.values().map(|p| p.count).sum()
    }

    /// Folds one class group into the bank.
    ///
    /// The group is checked in full before anything is accumulated, so a
    /// failed call leaves the bank unchanged.
    pub fn observe_class_group<'a, I>(&mut self, class_id: u32, features: I) -> Result<()>
    where
        I: IntoIterator<Item = &'a Embedding>,
    {
        let features: Vec<&Embedding> = features.into_iter().collect();
        let first = features.first().ok_or(Error::EmptyGroup(class_id))?;
        let dim = self.dim.unwrap_or(first.dim());
        for f in &features {
            f.check_dim(dim)?;
        }
        if self.options.strict_nc && self.prototypes.contains_key(&class_id) {
            return Err(Error::Protocol(format!(
                "class {class_id} was already observed in an earlier group"
            )));
        }
        let normalized: Vec<Embedding>;
        let features: Vec<&Embedding> = if self.options.normalize_features {
            normalized = features
                .iter()
                .map(|f| unit_normalize(f))
                .collect::<Result<_>>()?;
            normalized.iter().collect()
        } else {
            features
        };

        let (mut sum, mut count) = match self.prototypes.remove(&class_id) {
            Some(p) => (p.sum, p.count),
            None => (vec![0.0; dim], 0),
        };
        for f in features {
            for (s, &v) in sum.iter_mut().zip(f.values()) {
                *s += f64::from(v);
            }
            count += 1;
        }
        self.dim = Some(dim);
        self.prototypes
            .insert(class_id, ClassPrototype::from_sum(class_id, sum, count));
        Ok(())
    }

    pub fn memory(&self) -> MemoryFootprint {
        MemoryFootprint::new(self.dim.unwrap_or(0), self.len())
    }

    pub fn memory_bytes(&self) -> u64 {
        self.memory().total_bytes
    }

    pub fn snapshot(&self) -> Result<Vec<u8>> {
        let dim = match self.dim {
            Some(d) if !self.is_empty() => d,
            _ => return Err(Error::Validation("cannot snapshot an empty bank".into())),
        };
        let mut out = Vec::with_capacity(SNAPSHOT_HEADER_LEN + self.len() * (12 + dim * 4));
        out.extend_from_slice(SNAPSHOT_MAGIC);
        out.extend_from_slice(&SNAPSHOT_VERSION.to_le_bytes());
        out.extend_from_slice(&(dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.len() as u32).to_le_bytes());
        for p in self.prototypes.values() {
            out.extend_from_slice(&p.class_id.to_le_bytes());
            out.extend_from_slice(&p.count.to_le_bytes());
            for v in p.mean.values() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    /// Restores a bank from [`MemoryBank::snapshot`] bytes.
    ///
    /// Counts and `f32` means come back bit-exactly. The running sums are
    /// rebuilt as `mean * count`, so further observations on a restored bank
    /// are accurate only to `f32` precision of the stored mean.
    pub fn restore(bytes: &[u8], options: BankOptions) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        if r.take(4)? != SNAPSHOT_MAGIC {
            return Err(Error::Format("bad bank magic".into()));
        }
        let version = r.u16()?;
        if version != SNAPSHOT_VERSION {
            return Err(Error::Format(format!("unsupported bank version {version}")));
        }
        let dim = r.u32()? as usize;
        if dim == 0 {
            return Err(Error::Format("bank dim is zero".into()));
        }
        let n = r.u32()? as usize;
        let expected_len = n
            .checked_mul(12 + dim * 4)
            .and_then(|body| body.checked_add(SNAPSHOT_HEADER_LEN));
        if expected_len != Some(bytes.len()) {
            return Err(Error::Format(format!(
                "bank payload is {} bytes, header implies {}",
                bytes.len(),
                expected_len.map_or_else(|| "overflow".to_string(), |l| l.to_string())
            )));
        }
        let mut prototypes = BTreeMap::new();
        for _ in 0..n {
            let class_id = r.u32()?;
            let count = r.u64()?;
            if count == 0 {
                return Err(Error::Format(format!("class {class_id} has zero count")));
            }
            let mut mean = Vec::with_capacity(dim);
            for _ in 0..dim {
                mean.push(r.f32()?);
            }
            let mean = Embedding::new(mean)
                .map_err(|e| Error::Format(format!("class {class_id}: {e}")))?;
            let n = count as f64;
            let sum = mean.values().iter().map(|&v| f64::from(v) * n).collect();
            let p = ClassPrototype {
                class_id,
                sum,
                count,
                mean,
            };
            if prototypes.insert(class_id, p).is_some() {
                return Err(Error::Format(format!("class {class_id} appears twice")));
            }
        }
        Ok(MemoryBank {
            prototypes,
            dim: Some(dim),
            options,
        })
    }
}

pub const SNAPSHOT_MAGIC: &[u8; 4] = b"OTSB";
pub const SNAPSHOT_VERSION: u16 = 1;
const SNAPSHOT_HEADER_LEN: usize = 4 + 2 + 4 + 4;

/// Storage cost of `dim`-dimensional `f32` prototypes.
pub fn per_class_bytes(dim: usize) -> u64 {
    dim as u64 * 4
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemoryFootprint {
    pub dim: usize,
    pub classes: usize,
    pub per_class_bytes: u64,
    pub total_bytes: u64,
    pub per_class_kib: f64,
    pub total_kib: f64,
}

impl MemoryFootprint {
    pub fn new(dim: usize, classes: usize) -> Self {
        let per_class = per_class_bytes(dim);
        let total = per_class * classes as u64;
        MemoryFootprint {
            dim,
            classes,
            per_class_bytes: per_class,
            total_bytes: total,
            per_class_kib: per_class as f64 / 1024.0,
            total_kib: total as f64 / 1024.0,
        }
    }
}

pub(crate) struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        ByteReader { buf, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Format(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    pub(crate) fn u16(&mut self) -> Result<u16> {
        self.array().map(u16::from_le_bytes)
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        self.array().map(u32::from_le_bytes)
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        self.array().map(u64::from_le_bytes)
    }

    pub(crate) fn f32(&mut self) -> Result<f32> {
        self.array().map(f32::from_le_bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn e(v: &[f32]) -> Embedding {
        Embedding::new(v.to_vec()).unwrap()
    }

    #[test]
    fn two_point_and_singleton_means() {
        let mut bank = MemoryBank::default();
        bank.observe_class_group(7, &[e(&[1.0, 2.0]), e(&[3.0, 4.0])])
            .unwrap();
        let p = bank.get(7).unwrap();
        assert_eq!(p.mean().values(), &[2.0, 3.0]);
        assert_eq!(p.count(), 2);

        let mut bank = MemoryBank::default();
        bank.observe_class_group(7, &[e(&[5.0, 5.0])]).unwrap();
        assert_eq!(bank.get(7).unwrap().mean().values(), &[5.0, 5.0]);
    }

    #[test]
    fn observe_errors_leave_bank_untouched() {
        let mut bank = MemoryBank::default();
        assert!(matches!(
            bank.observe_class_group(1, std::iter::empty()),
            Err(Error::EmptyGroup(1))
        ));
        bank.observe_class_group(1, &[e(&[1.0, 1.0])]).unwrap();
        let before = bank.clone();
        assert!(matches!(
            bank.observe_class_group(1, &[e(&[2.0, 2.0])]),
            Err(Error::Protocol(_))
        ));
        assert!(matches!(
            bank.observe_class_group(2, &[e(&[2.0, 2.0]), e(&[1.0])]),
            Err(Error::Dimension {
                expected: 2,
                actual: 1
            })
        ));
        assert_eq!(bank, before);
    }

    #[test]
    fn lenient_mode_merges_reappearing_class() {
        let mut bank = MemoryBank::new(BankOptions {
            strict_nc: false,
            ..BankOptions::default()
        });
        bank.observe_class_group(4, &[e(&[0.0])]).unwrap();
        bank.observe_class_group(4, &[e(&[3.0]), e(&[6.0])])
            .unwrap();
        let p = bank.get(4).unwrap();
        assert_eq!(p.count(), 3);
        assert_eq!(p.mean().values(), &[3.0]);
        assert_eq!(bank.len(), 1);
    }

    #[test]
    fn normalized_features_are_averaged() {
        let mut bank = MemoryBank::new(BankOptions {
            normalize_features: true,
            ..BankOptions::default()
        });
        bank.observe_class_group(0, &[e(&[10.0, 0.0]), e(&[0.0, 0.5])])
            .unwrap();
        assert_eq!(bank.get(0).unwrap().mean().values(), &[0.5, 0.5]);
        assert!(matches!(
            bank.observe_class_group(1, &[e(&[0.0, 0.0])]),
            Err(Error::DegenerateVector(_))
        ));
    }

    #[test]
    fn other_prototypes_unchanged() {
        let mut bank = MemoryBank::default();
        bank.observe_class_group(0, &[e(&[1.0])]).unwrap();
        let p0 = bank.get(0).unwrap().clone();
        bank.observe_class_group(1, &[e(&[9.0])]).unwrap();
        assert_eq!(bank.get(0).unwrap(), &p0);
    }

    #[test]
    fn table_memory_column() {
        // (feature dim, KiB per class) for the four dims in the benchmark table
        for (dim, kib) in [(192, 0.75), (512, 2.0), (768, 3.0), (2048, 8.0)] {
            assert_eq!(MemoryFootprint::new(dim, 1).per_class_kib, kib);
        }
        assert_eq!(per_class_bytes(768), 3072);
        assert_eq!(per_class_bytes(192), 768);
        let m = MemoryFootprint::new(768, 10);
        assert_eq!(m.total_bytes, 30720);
        assert_eq!(m.total_kib, 30.0);
    }

    #[test]
    fn memory_counts_prototypes_only() {
        let mut bank = MemoryBank::default();
        assert_eq!(bank.memory_bytes(), 0);
        for c in 0..3 {
            bank.observe_class_group(c, &[e(&[1.0; 16]), e(&[2.0; 16])])
                .unwrap();
        }
        assert_eq!(bank.memory_bytes(), 16 * 4 * 3);
    }

    fn random_bank(seed: u64, classes: u32, dim: usize) -> MemoryBank {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut bank = MemoryBank::default();
        for c in 0..classes {
            let feats: Vec<Embedding> = (0..rng.gen_range(1..5))
                .map(|_| {
                    Embedding::new((0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
                })
                .collect();
            bank.observe_class_group(c * 3 + 1, &feats).unwrap();
        }
        bank
    }

    #[test]
    fn snapshot_round_trip_is_bit_exact() {
        let bank = random_bank(1, 3, 5);
        let bytes = bank.snapshot().unwrap();
        assert_eq!(bytes.len(), 14 + 3 * (12 + 20));
        let restored = MemoryBank::restore(&bytes, BankOptions::default()).unwrap();
        assert_eq!(restored.class_ids(), bank.class_ids());
        for (a, b) in bank.prototypes().zip(restored.prototypes()) {
            assert_eq!(a.count(), b.count());
            let bits = |p: &ClassPrototype| {
                p.mean()
                    .values()
                    .iter()
                    .map(|v| v.to_bits())
                    .collect::<Vec<_>>()
            };
            assert_eq!(bits(a), bits(b));
        }
        assert_eq!(restored.snapshot().unwrap(), bytes);
    }

    #[test]
    fn snapshot_layout() {
        let mut bank = MemoryBank::default();
        bank.observe_class_group(2, &[e(&[1.0, -2.0])]).unwrap();
        let bytes = bank.snapshot().unwrap();
        let mut expected = b"OTSB".to_vec();
        expected.extend([1, 0]);
        expected.extend([2, 0, 0, 0]);
        expected.extend([1, 0, 0, 0]);
        expected.extend([2, 0, 0, 0]);
        expected.extend([1, 0, 0, 0, 0, 0, 0, 0]);
        expected.extend(1.0f32.to_le_bytes());
        expected.extend((-2.0f32).to_le_bytes());
        assert_eq!(bytes, expected);
    }

    #[test]
    fn snapshot_is_deterministic() {
        let bank = random_bank(9, 4, 8);
        assert_eq!(bank.snapshot().unwrap(), bank.snapshot().unwrap());
    }

    #[test]
    fn corrupt_snapshots_rejected() {
        assert!(MemoryBank::default().snapshot().is_err());
        let bytes = random_bank(2, 3, 4).snapshot().unwrap();
        for cut in [0, 3, 10, bytes.len() - 1] {
            assert!(matches!(
                MemoryBank::restore(&bytes[..cut], BankOptions::default()),
                Err(Error::Format(_))
            ));
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            MemoryBank::restore(&bad, BankOptions::default()),
            Err(Error::Format(_))
        ));
        let mut bad = bytes.clone();
        bad[4] = 2;
        assert!(matches!(
            MemoryBank::restore(&bad, BankOptions::default()),
            Err(Error::Format(_))
        ));
        let mut long = bytes.clone();
        long.push(0);
        assert!(matches!(
            MemoryBank::restore(&long, BankOptions::default()),
            Err(Error::Format(_))
        ));
        let mut nan = bytes;
        let at = nan.len() - 4;
        nan[at..].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(
            MemoryBank::restore(&nan, BankOptions::default()),
            Err(Error::Format(_))
        ));
    }

    proptest! {
        #[test]
        fn chunking_does_not_change_the_prototype(
            rows in prop::collection::vec(prop::collection::vec(-1e3f32..1e3, 6), 1..200),
            cuts in prop::collection::vec(0usize..200, 0..10),
        ) {
            let feats: Vec<Embedding> = rows.into_iter().map(|r| Embedding::new(r).unwrap()).collect();
            let lenient = BankOptions { strict_nc: false, ..BankOptions::default() };

            let mut whole = MemoryBank::new(lenient);
            whole.observe_class_group(0, &feats).unwrap();

            let mut bounds: Vec<usize> = cuts.into_iter().map(|c| c % feats.len()).collect();
            bounds.push(0);
            bounds.push(feats.len());
            bounds.sort_unstable();
            bounds.dedup();
            let mut chunked = MemoryBank::new(lenient);
            for w in bounds.windows(2) {
                chunked.observe_class_group(0, &feats[w[0]..w[1]]).unwrap();
            }
            prop_assert_eq!(whole, chunked);
        }
    }
}
