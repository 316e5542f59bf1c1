//! Core data types, the feature-matrix file format, and dataset bookkeeping.
//!
//! Feature files are a small binary format: magic `HDML`, a u16 format
//! version, u32 row and column counts, then row-major little-endian f32
//! payload. On-disk precision is 32-bit; everything in memory is f64.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;

use crate::error::{Error, Result};

pub const FEATURE_MAGIC: [u8; 4] = *b"HDML";
pub const FEATURE_VERSION: u16 = 1;

/// Dense per-instance feature matrix: one row per instance.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    data: Array2<f64>,
}

impl FeatureMatrix {
    pub fn new(data: Array2<f64>) -> Result<Self> {
        if data.nrows() == 0 || data.ncols() == 0 {
            return Err(Error::shape(
                "FeatureMatrix",
                "at least 1x1",
                format!("{}x{}", data.nrows(), data.ncols()),
            ));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::non_finite("FeatureMatrix"));
        }
        Ok(FeatureMatrix { data })
    }

    pub fn rows(&self) -> usize {
        self.data.nrows()
    }

    pub fn cols(&self) -> usize {
        self.data.ncols()
    }

    pub fn array(&self) -> &Array2<f64> {
        &self.data
    }

    pub fn into_array(self) -> Array2<f64> {
        self.data
    }
}

/// One sample: paired high/low-resolution instance features plus the bag label.
#[derive(Debug, Clone)]
pub struct BagPair {
    pub id: String,
    pub hi_features: FeatureMatrix,
    pub lo_features: FeatureMatrix,
    pub label: u8,
    /// Ground-truth per-instance relevance; present only for synthetic bags.
    pub truth_relevance: Option<Vec<bool>>,
}

impl BagPair {
    pub fn new(
        id: String,
        hi_features: FeatureMatrix,
        lo_features: FeatureMatrix,
        label: u8,
        truth_relevance: Option<Vec<bool>>,
    ) -> Result<Self> {
        if hi_features.rows() != lo_features.rows() {
            return Err(Error::shape(
                format!("BagPair {id}: hi/lo instance counts"),
                hi_features.rows().to_string(),
                lo_features.rows().to_string(),
            ));
        }
        if label > 1 {
            return Err(Error::InvalidConfig(format!(
                "bag {id}: label must be 0 or 1, got {label}"
            )));
        }
        if let Some(rel) = &truth_relevance {
            if rel.len() != hi_features.rows() {
                return Err(Error::shape(
                    format!("BagPair {id}: relevance length"),
                    hi_features.rows().to_string(),
                    rel.len().to_string(),
                ));
            }
        }
        Ok(BagPair {
            id,
            hi_features,
            lo_features,
            label,
            truth_relevance,
        })
    }

    pub fn n_instances(&self) -> usize {
        self.hi_features.rows()
    }
}

/// Per-instance, per-branch binary relevance decisions.
///
/// `hard` entries are exactly `1.0` where the corresponding `soft` value
/// exceeded the binarization threshold at construction, else `0.0`.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskMatrix {
    pub hard: Array2<f64>,
    pub soft: Array2<f64>,
}

impl MaskMatrix {
    /// Binarize soft scores with a strict `> threshold` rule.
    pub fn from_soft(soft: Array2<f64>, threshold: f64) -> Self {
        let hard = soft.mapv(|s| if s > threshold { 1.0 } else { 0.0 });
        MaskMatrix { hard, soft }
    }

    pub fn n_instances(&self) -> usize {
        self.hard.nrows()
    }

    /// Fraction of instances kept by either branch.
    pub fn union_retention(&self) -> f64 {
        let kept = self
            .hard
            .rows()
            .into_iter()
            .filter(|r| r.iter().any(|&v| v > 0.0))
            .count();
        kept as f64 / self.hard.nrows() as f64
    }

    /// Indices of instances kept by either branch.
    pub fn union_kept_indices(&self) -> Vec<usize> {
        self.hard
            .rows()
            .into_iter()
            .enumerate()
            .filter(|(_, r)| r.iter().any(|&v| v > 0.0))
            .map(|(i, _)| i)
            .collect()
    }
}

/// Train/valid/test id lists for one Monte Carlo fold.
#[derive(Debug, Clone)]
pub struct SplitSpec {
    pub fold_index: usize,
    pub train_ids: Vec<String>,
    pub valid_ids: Vec<String>,
    pub test_ids: Vec<String>,
}

impl SplitSpec {
    /// Check partition disjointness and that every id resolves to a stored bag.
    pub fn validate(&self, bags: &[BagPair]) -> Result<()> {
        let known: BTreeSet<&str> = bags.iter().map(|b| b.id.as_str()).collect();
        let mut seen = BTreeSet::new();
        for id in self
            .train_ids
            .iter()
            .chain(&self.valid_ids)
            .chain(&self.test_ids)
        {
            if !seen.insert(id.as_str()) {
                return Err(Error::InvalidConfig(format!(
                    "split fold {}: id {id} appears in two partitions",
                    self.fold_index
                )));
            }
            if !known.contains(id.as_str()) {
                return Err(Error::InvalidConfig(format!(
                    "split fold {}: id {id} does not resolve to a stored bag",
                    self.fold_index
                )));
            }
        }
        Ok(())
    }
}

/// Write a feature matrix in the portable binary format.
pub fn write_feature_file(m: &FeatureMatrix, path: &Path) -> Result<()> {
    // FeatureMatrix construction already rejects non-finite values, but the
    // file contract re-checks since f32 narrowing can overflow to infinity.
    for &v in m.array().iter() {
        if !(v as f32).is_finite() {
            return Err(Error::non_finite(format!("write {}", path.display())));
        }
    }
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&FEATURE_MAGIC)?;
    w.write_all(&FEATURE_VERSION.to_le_bytes())?;
    w.write_all(&(m.rows() as u32).to_le_bytes())?;
    w.write_all(&(m.cols() as u32).to_le_bytes())?;
    for &v in m.array().iter() {
        w.write_all(&(v as f32).to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

/// Read a feature matrix written by [`write_feature_file`].
pub fn read_feature_file(path: &Path) -> Result<FeatureMatrix> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    read_exact_or_truncated(&mut r, &mut magic, path, 4)?;
    if magic != FEATURE_MAGIC {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            found: magic,
        });
    }
    let mut buf2 = [0u8; 2];
    read_exact_or_truncated(&mut r, &mut buf2, path, 2)?;
    let version = u16::from_le_bytes(buf2);
    if version != FEATURE_VERSION {
        return Err(Error::VersionMismatch {
            path: path.to_path_buf(),
            found: version,
            expected: FEATURE_VERSION,
        });
    }
    let mut buf4 = [0u8; 4];
    read_exact_or_truncated(&mut r, &mut buf4, path, 4)?;
    let rows = u32::from_le_bytes(buf4) as usize;
    read_exact_or_truncated(&mut r, &mut buf4, path, 4)?;
    let cols = u32::from_le_bytes(buf4) as usize;

    let expected = rows * cols * 4;
    let mut payload = Vec::with_capacity(expected);
    r.read_to_end(&mut payload)?;
    if payload.len() != expected {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            expected,
            got: payload.len(),
        });
    }
    let mut data = Array2::zeros((rows, cols));
    for (i, chunk) in payload.chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(chunk.try_into().unwrap()) as f64;
        if !v.is_finite() {
            return Err(Error::non_finite(format!("read {}", path.display())));
        }
        data[(i / cols, i % cols)] = v;
    }
    FeatureMatrix::new(data)
}

fn read_exact_or_truncated(r: &mut impl Read, buf: &mut [u8], path: &Path, want: usize) -> Result<()> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::Truncated {
                path: path.to_path_buf(),
                expected: want,
                got: 0,
            }
        } else {
            Error::Io(e)
        }
    })
}

/// One manifest row: where a bag's files live, relative to the manifest.
#[derive(Debug, Clone)]
pub struct ManifestEntry {
    pub id: String,
    pub label: u8,
    pub hi_path: String,
    pub lo_path: String,
    pub relevance_path: Option<String>,
}

const MANIFEST_HEADER: &str = "id\tlabel\thi\tlo\trelevance";

/// Write the bag manifest as a tab-separated table.
pub fn write_manifest(entries: &[ManifestEntry], path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "{MANIFEST_HEADER}")?;
    for e in entries {
        writeln!(
            w,
            "{}\t{}\t{}\t{}\t{}",
            e.id,
            e.label,
            e.hi_path,
            e.lo_path,
            e.relevance_path.as_deref().unwrap_or("-")
        )?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == MANIFEST_HEADER => {}
        other => {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                message: format!("unexpected header {other:?}"),
            })
        }
    }
    let mut entries = Vec::new();
    for (lineno, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 5 {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                message: format!("line {}: expected 5 fields, got {}", lineno + 2, fields.len()),
            });
        }
        let label: u8 = fields[1].parse().map_err(|_| Error::Parse {
            path: path.to_path_buf(),
            message: format!("line {}: bad label {:?}", lineno + 2, fields[1]),
        })?;
        entries.push(ManifestEntry {
            id: fields[0].to_string(),
            label,
            hi_path: fields[2].to_string(),
            lo_path: fields[3].to_string(),
            relevance_path: (fields[4] != "-").then(|| fields[4].to_string()),
        });
    }
    Ok(entries)
}

/// Load all bags referenced by a manifest file.
pub fn load_dataset(manifest_path: &Path) -> Result<Vec<BagPair>> {
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let entries = read_manifest(manifest_path)?;
    let mut bags = Vec::with_capacity(entries.len());
    for e in entries {
        let hi = read_feature_file(&base.join(&e.hi_path))?;
        let lo = read_feature_file(&base.join(&e.lo_path))?;
        let relevance = match &e.relevance_path {
            Some(p) => Some(read_relevance_file(&base.join(p))?),
            None => None,
        };
        bags.push(BagPair::new(e.id, hi, lo, e.label, relevance)?);
    }
    Ok(bags)
}

pub fn read_relevance_file(path: &Path) -> Result<Vec<bool>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| match l.trim() {
            "0" => Ok(false),
            "1" => Ok(true),
            other => Err(Error::Parse {
                path: path.to_path_buf(),
                message: format!("bad relevance flag {other:?}"),
            }),
        })
        .collect()
}

pub fn write_relevance_file(relevance: &[bool], path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for &r in relevance {
        writeln!(w, "{}", r as u8)?;
    }
    w.flush()?;
    Ok(())
}

/// Save a whole dataset under `dir`: manifest plus feature/relevance files.
pub fn save_dataset(bags: &[BagPair], dir: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(dir.join("features"))?;
    let any_relevance = bags.iter().any(|b| b.truth_relevance.is_some());
    if any_relevance {
        std::fs::create_dir_all(dir.join("relevance"))?;
    }
    let mut entries = Vec::with_capacity(bags.len());
    for bag in bags {
        let hi_path = format!("features/{}_hi.hdml", bag.id);
        let lo_path = format!("features/{}_lo.hdml", bag.id);
        write_feature_file(&bag.hi_features, &dir.join(&hi_path))?;
        write_feature_file(&bag.lo_features, &dir.join(&lo_path))?;
        let relevance_path = match &bag.truth_relevance {
            Some(rel) => {
                let p = format!("relevance/{}.txt", bag.id);
                write_relevance_file(rel, &dir.join(&p))?;
                Some(p)
            }
            None => None,
        };
        entries.push(ManifestEntry {
            id: bag.id.clone(),
            label: bag.label,
            hi_path,
            lo_path,
            relevance_path,
        });
    }
    let manifest = dir.join("manifest.tsv");
    write_manifest(&entries, &manifest)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;
    use tempfile::tempdir;

    #[test]
    fn smallest_matrix_writes_header_plus_four_bytes() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("one.hdml");
        let m = FeatureMatrix::new(array![[0.0]]).unwrap();
        write_feature_file(&m, &path).unwrap();
        assert_eq!(std::fs::metadata(&path).unwrap().len(), 14 + 4);
    }

    #[test]
    fn header_declares_shape_and_payload_matches() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("m.hdml");
        let m = FeatureMatrix::new(array![[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]).unwrap();
        write_feature_file(&m, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[0..4], b"HDML");
        assert_eq!(u16::from_le_bytes([bytes[4], bytes[5]]), 1);
        assert_eq!(u32::from_le_bytes(bytes[6..10].try_into().unwrap()), 2);
        assert_eq!(u32::from_le_bytes(bytes[10..14].try_into().unwrap()), 3);
        assert_eq!(bytes.len(), 14 + 24);
    }

    #[test]
    fn roundtrip_of_random_matrix_reproduces_bytes_exactly() {
        let dir = tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        // values that are exactly representable in f32
        let m = FeatureMatrix::new(Array2::from_shape_fn((100, 512), |_| {
            rng.random_range(-10.0f32..10.0) as f64
        }))
        .unwrap();
        let p1 = dir.path().join("a.hdml");
        let p2 = dir.path().join("b.hdml");
        write_feature_file(&m, &p1).unwrap();
        let back = read_feature_file(&p1).unwrap();
        write_feature_file(&back, &p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
        assert_eq!(m, back);
    }

    #[test]
    fn bad_magic_is_reported() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("bad.hdml");
        std::fs::write(&path, b"XXXX\x01\x00\x01\x00\x00\x00\x01\x00\x00\x00\x00\x00\x00\x00").unwrap();
        match read_feature_file(&path) {
            Err(Error::BadMagic { found, .. }) => assert_eq!(&found, b"XXXX"),
            other => panic!("expected BadMagic, got {other:?}"),
        }
    }

    #[test]
    fn version_mismatch_is_reported() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("v9.hdml");
        let mut bytes = b"HDML".to_vec();
        bytes.extend(9u16.to_le_bytes());
        bytes.extend(1u32.to_le_bytes());
        bytes.extend(1u32.to_le_bytes());
        bytes.extend(0f32.to_le_bytes());
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(
            read_feature_file(&path),
            Err(Error::VersionMismatch { found: 9, .. })
        ));
    }

    #[test]
    fn truncated_payload_is_reported() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("t.hdml");
        let m = FeatureMatrix::new(array![[1.0, 2.0], [3.0, 4.0]]).unwrap();
        write_feature_file(&m, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 5]).unwrap();
        assert!(matches!(read_feature_file(&path), Err(Error::Truncated { .. })));
    }

    #[test]
    fn non_finite_values_refuse_to_write() {
        // construction rejects non-finite outright
        assert!(matches!(
            FeatureMatrix::new(array![[f64::NAN]]),
            Err(Error::NonFinite { .. })
        ));
        // f32 overflow is caught at write time
        let dir = tempdir().unwrap();
        let m = FeatureMatrix::new(array![[1e300]]).unwrap();
        assert!(matches!(
            write_feature_file(&m, &dir.path().join("inf.hdml")),
            Err(Error::NonFinite { .. })
        ));
    }

    #[test]
    fn bag_pair_rejects_mismatched_row_counts() {
        let hi = FeatureMatrix::new(Array2::zeros((4, 8))).unwrap();
        let lo = FeatureMatrix::new(Array2::zeros((3, 2))).unwrap();
        assert!(matches!(
            BagPair::new("b".into(), hi, lo, 0, None),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn mask_matrix_threshold_is_strict() {
        let soft = array![[0.5, 0.7], [0.3, 0.5]];
        let m = MaskMatrix::from_soft(soft, 0.5);
        assert_eq!(m.hard, array![[0.0, 1.0], [0.0, 0.0]]);
        assert_eq!(m.union_retention(), 0.5);
    }

    #[test]
    fn split_validation_catches_overlap_and_unknown_ids() {
        let mk = |id: &str| {
            BagPair::new(
                id.into(),
                FeatureMatrix::new(Array2::zeros((2, 2))).unwrap(),
                FeatureMatrix::new(Array2::zeros((2, 2))).unwrap(),
                0,
                None,
            )
            .unwrap()
        };
        let bags = vec![mk("a"), mk("b"), mk("c")];
        let ok = SplitSpec {
            fold_index: 0,
            train_ids: vec!["a".into()],
            valid_ids: vec!["b".into()],
            test_ids: vec!["c".into()],
        };
        assert!(ok.validate(&bags).is_ok());

        let dup = SplitSpec {
            fold_index: 0,
            train_ids: vec!["a".into(), "b".into()],
            valid_ids: vec!["b".into()],
            test_ids: vec![],
        };
        assert!(dup.validate(&bags).is_err());

        let unknown = SplitSpec {
            fold_index: 0,
            train_ids: vec!["z".into()],
            valid_ids: vec![],
            test_ids: vec![],
        };
        assert!(unknown.validate(&bags).is_err());
    }

    #[test]
    fn dataset_roundtrip_through_manifest() {
        let dir = tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut bags = Vec::new();
        for i in 0..3 {
            let n = 4 + i;
            let hi =
                FeatureMatrix::new(Array2::from_shape_fn((n, 6), |_| rng.random_range(-1.0f32..1.0) as f64))
                    .unwrap();
            let lo =
                FeatureMatrix::new(Array2::from_shape_fn((n, 3), |_| rng.random_range(-1.0f32..1.0) as f64))
                    .unwrap();
            let rel = (0..n).map(|j| j % 2 == 0).collect();
            bags.push(BagPair::new(format!("bag{i:03}"), hi, lo, (i % 2) as u8, Some(rel)).unwrap());
        }
        let manifest = save_dataset(&bags, dir.path()).unwrap();
        let loaded = load_dataset(&manifest).unwrap();
        assert_eq!(loaded.len(), 3);
        for (a, b) in bags.iter().zip(&loaded) {
            assert_eq!(a.id, b.id);
            assert_eq!(a.label, b.label);
            assert_eq!(a.hi_features, b.hi_features);
            assert_eq!(a.lo_features, b.lo_features);
            assert_eq!(a.truth_relevance, b.truth_relevance);
        }
    }

    proptest! {
        #[test]
        fn feature_file_roundtrip_is_identity(
            rows in 1usize..12,
            cols in 1usize..12,
            seed in 0u64..1000,
        ) {
            let dir = tempdir().unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = FeatureMatrix::new(Array2::from_shape_fn((rows, cols), |_| {
                rng.random_range(-1e6f32..1e6) as f64
            })).unwrap();
            let path = dir.path().join("rt.hdml");
            write_feature_file(&m, &path).unwrap();
            let back = read_feature_file(&path).unwrap();
            prop_assert_eq!(m, back);
        }
    }
}
