//! Ordered embedding stores and their binary container.
//!
//! File layout (little-endian): magic `WFEB`, `u32` version (1), `u32` dim,
//! `u64` record count, then per record `u32` id length, UTF-8 id bytes and
//! `dim` × `f32`. A JSON sidecar `<file>.json` records `{path, dim, count, kind}`
//! plus any producer-specific fields.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::math;
use crate::tiling::PatchGrid;

pub const MAGIC: [u8; 4] = *b"WFEB";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 20;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("bad magic bytes {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported container version {0}")]
    VersionMismatch(u32),
    #[error("file truncated while reading {0}")]
    Truncated(&'static str),
    #[error("record {0} has a zero-norm vector")]
    ZeroNormVector(String),
    #[error("record {0} has non-finite entries")]
    NonFinite(String),
    #[error("record {id} has dimension {actual}, store dimension is {expected}")]
    DimensionMismatch { id: String, expected: usize, actual: usize },
    #[error("duplicate id {0}")]
    DuplicateId(String),
    #[error("record id is not valid UTF-8")]
    BadId,
    #[error("no embedding for child patch {0}")]
    MissingChildEmbedding(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StoreKind {
    HighRes,
    LowResRaw,
    LowResDistilled,
    Report,
    Text,
    Fused,
    Checkpoint,
    /// Read without a sidecar.
    Unspecified,
}

/// Insertion-ordered map from id to a finite, nonzero `f32` vector.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingStore {
    kind: StoreKind,
    dim: usize,
    records: IndexMap<String, Vec<f32>>,
}

impl EmbeddingStore {
    pub fn new(kind: StoreKind, dim: usize) -> Self {
        Self { kind, dim, records: IndexMap::new() }
    }

    pub fn kind(&self) -> StoreKind {
        self.kind
    }

    pub fn with_kind(mut self, kind: StoreKind) -> Self {
        self.kind = kind;
        self
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Adds a record, enforcing dimension, finiteness, nonzero norm and id
    /// uniqueness.
    pub fn insert(&mut self, id: impl Into<String>, vector: Vec<f32>) -> Result<(), StoreError> {
        let id = id.into();
        validate_vector(&id, &vector, self.dim)?;
        if self.records.contains_key(&id) {
            return Err(StoreError::DuplicateId(id));
        }
        self.records.insert(id, vector);
        Ok(())
    }

    pub fn insert_f64(&mut self, id: impl Into<String>, vector: &[f64]) -> Result<(), StoreError> {
        self.insert(id, math::to_f32(vector))
    }

    pub fn get(&self, id: &str) -> Option<&[f32]> {
        self.records.get(id).map(Vec::as_slice)
    }

    pub fn get_f64(&self, id: &str) -> Option<Vec<f64>> {
        self.get(id).map(math::to_f64)
    }

    pub fn contains(&self, id: &str) -> bool {
        self.records.contains_key(id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[f32])> {
        self.records.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.records.keys().map(String::as_str)
    }

    /// Records whose id satisfies `keep`, in the original order.
    pub fn filtered(&self, mut keep: impl FnMut(&str) -> bool) -> Self {
        Self {
            kind: self.kind,
            dim: self.dim,
            records: self.records.iter().filter(|(k, _)| keep(k)).map(|(k, v)| (k.clone(), v.clone())).collect(),
        }
    }

    /// Appends all records of `other`, which must share the dimension.
    pub fn extend_from(&mut self, other: &EmbeddingStore) -> Result<(), StoreError> {
        for (id, v) in other.iter() {
            self.insert(id, v.to_vec())?;
        }
        Ok(())
    }
}

fn validate_vector(id: &str, vector: &[f32], dim: usize) -> Result<(), StoreError> {
    if vector.len() != dim {
        return Err(StoreError::DimensionMismatch { id: id.to_string(), expected: dim, actual: vector.len() });
    }
    if vector.iter().any(|x| !x.is_finite()) {
        return Err(StoreError::NonFinite(id.to_string()));
    }
    if vector.iter().all(|&x| x == 0.0) {
        return Err(StoreError::ZeroNormVector(id.to_string()));
    }
    Ok(())
}

/// Serialises `(id, vector)` pairs into the container format. No norm check:
/// checkpoints legitimately hold zero rows.
pub fn encode_records<'a, I>(dim: usize, count: usize, records: I) -> Vec<u8>
where
    I: IntoIterator<Item = (&'a str, &'a [f32])>,
{
    let mut out = Vec::with_capacity(HEADER_LEN + count * (8 + 4 * dim));
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(dim as u32).to_le_bytes());
    out.extend_from_slice(&(count as u64).to_le_bytes());
    for (id, vector) in records {
        debug_assert_eq!(vector.len(), dim);
        out.extend_from_slice(&(id.len() as u32).to_le_bytes());
        out.extend_from_slice(id.as_bytes());
        for x in vector {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

/// Raw decoded container: dimension plus records in file order.
pub type RawRecords = (usize, Vec<(String, Vec<f32>)>);

pub fn decode_records(mut reader: impl Read) -> Result<RawRecords, StoreError> {
    let mut magic = [0u8; 4];
    read_exact(&mut reader, &mut magic, "magic")?;
    if magic != MAGIC {
        return Err(StoreError::BadMagic(magic));
    }
    let version = read_u32(&mut reader, "version")?;
    if version != VERSION {
        return Err(StoreError::VersionMismatch(version));
    }
    let dim = read_u32(&mut reader, "dim")? as usize;
    let mut count_bytes = [0u8; 8];
    read_exact(&mut reader, &mut count_bytes, "count")?;
    let count = u64::from_le_bytes(count_bytes) as usize;

    let mut records = Vec::with_capacity(count.min(1 << 20));
    let mut float_bytes = vec![0u8; dim * 4];
    for _ in 0..count {
        let id_len = read_u32(&mut reader, "id length")? as usize;
        let mut id = vec![0u8; id_len];
        read_exact(&mut reader, &mut id, "id")?;
        let id = String::from_utf8(id).map_err(|_| StoreError::BadId)?;
        read_exact(&mut reader, &mut float_bytes, "vector")?;
        let vector = float_bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        records.push((id, vector));
    }
    Ok((dim, records))
}

fn read_exact(reader: &mut impl Read, buf: &mut [u8], what: &'static str) -> Result<(), StoreError> {
    reader.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => StoreError::Truncated(what),
        _ => StoreError::Io(e),
    })
}

fn read_u32(reader: &mut impl Read, what: &'static str) -> Result<u32, StoreError> {
    let mut b = [0u8; 4];
    read_exact(reader, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

/// JSON sidecar written next to every container file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub path: String,
    pub dim: usize,
    pub count: usize,
    pub kind: StoreKind,
    #[serde(flatten)]
    pub extra: serde_json::Map<String, serde_json::Value>,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut name = path.as_os_str().to_owned();
    name.push(".json");
    PathBuf::from(name)
}

/// Writes the container and its sidecar; returns the container's byte count.
pub fn write_store(store: &EmbeddingStore, path: &Path) -> Result<u64, StoreError> {
    write_store_with(store, path, serde_json::Map::new())
}

pub fn write_store_with(
    store: &EmbeddingStore,
    path: &Path,
    extra: serde_json::Map<String, serde_json::Value>,
) -> Result<u64, StoreError> {
    let bytes = encode_records(store.dim, store.len(), store.iter());
    std::fs::File::create(path)?.write_all(&bytes)?;
    let sidecar = Sidecar {
        path: path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default(),
        dim: store.dim,
        count: store.len(),
        kind: store.kind,
        extra,
    };
    std::fs::write(sidecar_path(path), serde_json::to_vec_pretty(&sidecar)?)?;
    Ok(bytes.len() as u64)
}

pub fn read_sidecar(path: &Path) -> Result<Option<Sidecar>, StoreError> {
    let side = sidecar_path(path);
    if !side.exists() {
        return Ok(None);
    }
    Ok(Some(serde_json::from_slice(&std::fs::read(side)?)?))
}

/// Reads a container, validating every record; the kind comes from the
/// sidecar when one exists.
pub fn read_store(path: &Path) -> Result<EmbeddingStore, StoreError> {
    let file = std::io::BufReader::new(std::fs::File::open(path)?);
    let (dim, records) = decode_records(file)?;
    let kind = read_sidecar(path)?.map_or(StoreKind::Unspecified, |s| s.kind);
    let mut store = EmbeddingStore::new(kind, dim);
    for (id, vector) in records {
        store.insert(id, vector)?;
    }
    Ok(store)
}

/// Mean of a coarse patch's high-resolution children: the distillation target.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalTarget {
    pub parent_id: String,
    pub vector: Vec<f64>,
}

/// One target per coarse patch that has children, in grid order.
pub fn global_targets(high: &EmbeddingStore, grid: &PatchGrid) -> Result<Vec<GlobalTarget>, StoreError> {
    let mut targets = Vec::new();
    for parent in grid.parents() {
        let mut children = Vec::new();
        for id in grid.child_ids(&parent.key()) {
            let v = high.get_f64(&id).ok_or(StoreError::MissingChildEmbedding(id))?;
            children.push(v);
        }
        targets.push(GlobalTarget {
            parent_id: parent.id(),
            vector: math::mean_of(children.iter().map(Vec::as_slice), high.dim()),
        });
    }
    Ok(targets)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;
    use crate::tiling::{patch_id, Scale};
    use proptest::prelude::*;

    #[test]
    fn empty_store_is_header_only() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.wfeb");
        let n = write_store(&EmbeddingStore::new(StoreKind::Text, 4), &path).unwrap();
        assert_eq!(n, 20);
        assert_eq!(std::fs::metadata(&path).unwrap().len(), 20);
        let back = read_store(&path).unwrap();
        assert_eq!((back.dim(), back.len(), back.kind()), (4, 0, StoreKind::Text));
    }

    #[test]
    fn single_record_layout() {
        let mut store = EmbeddingStore::new(StoreKind::HighRes, 2);
        store.insert("a", vec![1.0, 2.0]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("one.wfeb");
        assert_eq!(write_store(&store, &path).unwrap(), 33);
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[..4], b"WFEB");
        assert_eq!(&bytes[20..25], &[1, 0, 0, 0, b'a']);
        assert_eq!(&bytes[25..29], &1.0f32.to_le_bytes());
        let side: Sidecar = serde_json::from_slice(&std::fs::read(sidecar_path(&path)).unwrap()).unwrap();
        assert_eq!((side.path.as_str(), side.dim, side.count, side.kind), ("one.wfeb", 2, 1, StoreKind::HighRes));
        assert_eq!(read_store(&path).unwrap(), store);
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let good = encode_records(2, 1, [("a", &[1.0f32, 2.0][..])]);
        let mut bad_magic = good.clone();
        bad_magic[0] = b'X';
        assert!(matches!(decode_records(&bad_magic[..]), Err(StoreError::BadMagic(_))));
        let mut bad_version = good.clone();
        bad_version[4] = 2;
        assert!(matches!(decode_records(&bad_version[..]), Err(StoreError::VersionMismatch(2))));
        assert!(matches!(decode_records(&good[..30]), Err(StoreError::Truncated("vector"))));
        assert!(matches!(decode_records(&good[..10]), Err(StoreError::Truncated("dim"))));

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("zero.wfeb");
        std::fs::write(&path, encode_records(2, 1, [("z", &[0.0f32, 0.0][..])])).unwrap();
        assert!(matches!(read_store(&path), Err(StoreError::ZeroNormVector(id)) if id == "z"));
    }

    #[test]
    fn insert_enforces_invariants() {
        let mut store = EmbeddingStore::new(StoreKind::Report, 2);
        assert!(matches!(store.insert("a", vec![1.0]), Err(StoreError::DimensionMismatch { .. })));
        assert!(matches!(store.insert("a", vec![f32::NAN, 1.0]), Err(StoreError::NonFinite(_))));
        assert!(matches!(store.insert("a", vec![0.0, 0.0]), Err(StoreError::ZeroNormVector(_))));
        store.insert("a", vec![0.0, 1.0]).unwrap();
        assert!(matches!(store.insert("a", vec![1.0, 1.0]), Err(StoreError::DuplicateId(_))));
    }

    fn store_for(grid: &PatchGrid, rng: &mut SplitMix64) -> EmbeddingStore {
        let mut high = EmbeddingStore::new(StoreKind::HighRes, 3);
        for id in grid.fine_ids() {
            let v: Vec<f32> = rng.gaussian_vec(3).into_iter().map(|x| x as f32).collect();
            high.insert(id, v).unwrap();
        }
        high
    }

    #[test]
    fn global_target_examples() {
        let grid = PatchGrid::full("s", 1, 1, 4, 1);
        let mut high = EmbeddingStore::new(StoreKind::HighRes, 2);
        high.insert(patch_id("s", Scale::Fine, 0, 0), vec![3.0, 4.0]).unwrap();
        let t = global_targets(&high, &grid).unwrap();
        assert_eq!(t[0].vector, vec![3.0, 4.0]);
        assert_eq!(t[0].parent_id, "s:coarse:0:0");

        let mut grid2 = PatchGrid::full("s", 1, 1, 4, 2);
        grid2.children.insert("0_0".into(), vec!["0_0".into(), "0_1".into()]);
        let mut high2 = EmbeddingStore::new(StoreKind::HighRes, 2);
        high2.insert("s:fine:0:0", vec![1.0, 0.0]).unwrap();
        high2.insert("s:fine:0:1", vec![0.0, 1.0]).unwrap();
        assert_eq!(global_targets(&high2, &grid2).unwrap()[0].vector, vec![0.5, 0.5]);

        high2 = high2.filtered(|id| id != "s:fine:0:1");
        assert!(matches!(global_targets(&high2, &grid2), Err(StoreError::MissingChildEmbedding(_))));
    }

    #[test]
    fn global_targets_match_naive_sum_and_are_linear() {
        let grid = PatchGrid::full("s", 2, 3, 4, 4);
        let mut rng = SplitMix64::new(5);
        let high = store_for(&grid, &mut rng);
        let targets = global_targets(&high, &grid).unwrap();
        assert_eq!(targets.len(), 6);
        for (parent, target) in grid.coarse.iter().zip(&targets) {
            let mut sum = [0.0f64; 3];
            let ids = grid.child_ids(&parent.key());
            assert_eq!(ids.len(), 16);
            for id in &ids {
                for (s, x) in sum.iter_mut().zip(high.get(id).unwrap()) {
                    *s += f64::from(*x);
                }
            }
            for (s, t) in sum.iter().zip(&target.vector) {
                assert!((s / 16.0 - t).abs() < 1e-6);
            }
        }

        let mut scaled = EmbeddingStore::new(StoreKind::HighRes, 3);
        for (id, v) in high.iter() {
            scaled.insert(id, v.iter().map(|x| x * 2.0).collect()).unwrap();
        }
        for (a, b) in targets.iter().zip(global_targets(&scaled, &grid).unwrap()) {
            for (x, y) in a.vector.iter().zip(&b.vector) {
                assert!((2.0 * x - y).abs() < 1e-9);
            }
        }
    }

    fn arb_store() -> impl Strategy<Value = EmbeddingStore> {
        (1usize..6).prop_flat_map(|dim| {
            proptest::collection::vec(
                ("[a-z0-9:_]{1,12}", proptest::collection::vec(-1e6f32..1e6f32, dim)),
                0..12,
            )
            .prop_map(move |recs| {
                let mut store = EmbeddingStore::new(StoreKind::LowResRaw, dim);
                for (id, mut v) in recs {
                    if v.iter().all(|&x| x == 0.0) {
                        v[0] = 1.0;
                    }
                    let _ = store.insert(id, v);
                }
                store
            })
        })
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(store in arb_store()) {
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("s.wfeb");
            write_store(&store, &path).unwrap();
            let back = read_store(&path).unwrap();
            prop_assert_eq!(back.ids().collect::<Vec<_>>(), store.ids().collect::<Vec<_>>());
            for ((_, a), (_, b)) in back.iter().zip(store.iter()) {
                prop_assert_eq!(
                    a.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
                    b.iter().map(|x| x.to_bits()).collect::<Vec<_>>()
                );
            }
            prop_assert_eq!(back, store);
        }
    }
}
