//! On-disk contract with the embedding extractor.
//!
//! * Embedding files are `.npy` version 1.0 arrays restricted to little-endian
//!   `float32`, C order, with a one- or two-dimensional shape.
//! * `manifest.csv` has the header `clip_id,podcast_id,label,source_tag,path`,
//!   one row per clip and source; paths are relative to the manifest.
//! * `folds.csv` has the header `fold_id,subset,podcast_id`.
//! * The expected-counts file has the header `fold,subset,R,P,B,I,F,total`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::label::{Label, LABELS, NUM_CLASSES};
use crate::numerics::{Matrix, SeededRng};

pub const NPY_MAGIC: [u8; 6] = *b"\x93NUMPY";
pub const ECAPA_DIM: usize = 192;
pub const W2V2_DIM: usize = 768;
pub const W2V2_LAYERS: u8 = 13;

/// Which extractor output an embedding file holds.
///
/// `w2v2.L1` is the local encoder output, `w2v2.L2` to `w2v2.L13` are the
/// twelve transformer layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SourceTag {
    Ecapa,
    W2v2(u8),
}

impl SourceTag {
    /// Frame-level sources are statistically pooled; utterance-level ones pass through.
    pub fn is_frame_level(self) -> bool {
        matches!(self, SourceTag::W2v2(_))
    }

    pub fn expected_dim(self) -> usize {
        match self {
            SourceTag::Ecapa => ECAPA_DIM,
            SourceTag::W2v2(_) => W2V2_DIM,
        }
    }

    /// Checks the shape an extractor must emit for this source.
    pub fn check_shape(self, m: &Matrix) -> Result<()> {
        let (rows, cols) = m.shape();
        let ok = match self {
            SourceTag::Ecapa => rows == 1 && cols == ECAPA_DIM,
            SourceTag::W2v2(_) => rows >= 1 && cols == W2V2_DIM,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::ShapeMismatch(format!(
                "source {} expects {} but file holds ({}, {})",
                self,
                match self {
                    SourceTag::Ecapa => "(1, 192)".to_string(),
                    SourceTag::W2v2(_) => "(T, 768)".to_string(),
                },
                rows,
                cols
            )))
        }
    }
}

impl fmt::Display for SourceTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SourceTag::Ecapa => f.write_str("ecapa"),
            SourceTag::W2v2(l) => write!(f, "w2v2.L{}", l),
        }
    }
}

impl FromStr for SourceTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s == "ecapa" {
            return Ok(SourceTag::Ecapa);
        }
        let layer = s
            .strip_prefix("w2v2.L")
            .and_then(|l| l.parse::<u8>().ok())
            .filter(|l| (1..=W2V2_LAYERS).contains(l));
        layer
            .map(SourceTag::W2v2)
            .ok_or_else(|| Error::UnknownSourceTag(s.to_string()))
    }
}

impl Serialize for SourceTag {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for SourceTag {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

// ---------------------------------------------------------------------------
// npy

/// Reads a float32 `.npy` file into an `f64` matrix. One-dimensional arrays
/// become a single row.
pub fn read_embedding(path: impl AsRef<Path>) -> Result<Matrix> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = BufReader::new(file);
    let (rows, cols, values) = read_npy_f32(&mut reader, path)?;
    Matrix::new(rows, cols, values.into_iter().map(f64::from).collect())
}

/// Writes a matrix as a float32 `.npy` file. Values are narrowed to `f32`.
pub fn write_embedding(path: impl AsRef<Path>, m: &Matrix) -> Result<()> {
    let path = path.as_ref();
    let values: Vec<f32> = m.data().iter().map(|&v| v as f32).collect();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_npy_f32(&mut w, m.rows(), m.cols(), &values).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_npy_f32<W: Write>(w: &mut W, rows: usize, cols: usize, values: &[f32]) -> std::io::Result<()> {
    assert_eq!(values.len(), rows * cols, "payload does not match shape");
    let mut dict = format!(
        "{{'descr': '<f4', 'fortran_order': False, 'shape': ({}, {}), }}",
        rows, cols
    );
    // magic + version + u16 length + dict + '\n' padded to a multiple of 64
    let unpadded = NPY_MAGIC.len() + 2 + 2 + dict.len() + 1;
    let pad = (64 - unpadded % 64) % 64;
    dict.extend(std::iter::repeat_n(' ', pad));
    dict.push('\n');
    w.write_all(&NPY_MAGIC)?;
    w.write_all(&[1, 0])?;
    w.write_all(&(dict.len() as u16).to_le_bytes())?;
    w.write_all(dict.as_bytes())?;
    for v in values {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

/// Parses a version 1.0 float32 `.npy` stream. `path` is only used in errors.
pub fn read_npy_f32<R: Read>(r: &mut R, path: &Path) -> Result<(usize, usize, Vec<f32>)> {
    let io = |e| Error::io(path, e);
    let mut magic = [0u8; 6];
    r.read_exact(&mut magic).map_err(|_| Error::BadMagic(path.into()))?;
    if magic != NPY_MAGIC {
        return Err(Error::BadMagic(path.into()));
    }
    let mut version = [0u8; 2];
    r.read_exact(&mut version).map_err(io)?;
    if version != [1, 0] {
        return Err(Error::BadHeader {
            path: path.into(),
            reason: format!("format version {}.{} (only 1.0 is supported)", version[0], version[1]),
        });
    }
    let mut len = [0u8; 2];
    r.read_exact(&mut len).map_err(io)?;
    let mut header = vec![0u8; u16::from_le_bytes(len) as usize];
    r.read_exact(&mut header).map_err(io)?;
    let header = String::from_utf8(header).map_err(|_| Error::BadHeader {
        path: path.into(),
        reason: "header is not ASCII".into(),
    })?;
    let dict = HeaderDict::parse(&header).map_err(|reason| Error::BadHeader {
        path: path.into(),
        reason,
    })?;
    if dict.descr != "<f4" {
        return Err(Error::UnsupportedDtype {
            path: path.into(),
            dtype: dict.descr,
        });
    }
    if dict.fortran_order {
        return Err(Error::BadHeader {
            path: path.into(),
            reason: "Fortran order is not supported".into(),
        });
    }
    let (rows, cols) = match dict.shape.as_slice() {
        [d] => (1, *d),
        [t, d] => (*t, *d),
        other => {
            return Err(Error::BadHeader {
                path: path.into(),
                reason: format!("expected a 1-d or 2-d shape, got {:?}", other),
            })
        }
    };
    let mut payload = Vec::new();
    r.read_to_end(&mut payload).map_err(io)?;
    let expected = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| Error::ShapeMismatch(format!("{}: declared shape overflows", path.display())))?;
    if payload.len() != expected {
        return Err(Error::ShapeMismatch(format!(
            "{}: shape ({}, {}) needs {} payload bytes, found {}",
            path.display(),
            rows,
            cols,
            expected,
            payload.len()
        )));
    }
    let values: Vec<f32> = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinitePayload(path.into()));
    }
    Ok((rows, cols, values))
}

struct HeaderDict {
    descr: String,
    fortran_order: bool,
    shape: Vec<usize>,
}

impl HeaderDict {
    fn parse(header: &str) -> std::result::Result<Self, String> {
        let value_after = |key: &str| -> std::result::Result<&str, String> {
            let at = header
                .find(&format!("'{}'", key))
                .ok_or_else(|| format!("missing key '{}'", key))?;
            let rest = &header[at + key.len() + 2..];
            let colon = rest.find(':').ok_or_else(|| format!("no value for '{}'", key))?;
            Ok(rest[colon + 1..].trim_start())
        };

        let descr = value_after("descr")?;
        let quote = descr.chars().next().filter(|c| *c == '\'' || *c == '"');
        let descr = match quote {
            Some(q) => {
                let end = descr[1..].find(q).ok_or("unterminated descr")?;
                descr[1..1 + end].to_string()
            }
            None => return Err("descr is not a string".into()),
        };

        let fo = value_after("fortran_order")?;
        let fortran_order = if fo.starts_with("False") {
            false
        } else if fo.starts_with("True") {
            true
        } else {
            return Err("fortran_order is not a boolean".into());
        };

        let shape = value_after("shape")?;
        if !shape.starts_with('(') {
            return Err("shape is not a tuple".into());
        }
        let end = shape.find(')').ok_or("unterminated shape")?;
        let shape = shape[1..end]
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| s.parse::<usize>().map_err(|_| format!("bad shape entry {:?}", s)))
            .collect::<std::result::Result<Vec<_>, _>>()?;

        Ok(HeaderDict {
            descr,
            fortran_order,
            shape,
        })
    }
}

// ---------------------------------------------------------------------------
// manifest

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClipRecord {
    pub clip_id: String,
    pub podcast_id: String,
    pub label: Label,
    /// Absolute (or manifest-resolved) embedding file per source.
    pub embedding_paths: BTreeMap<SourceTag, PathBuf>,
}

impl ClipRecord {
    pub fn embedding_path(&self, tag: SourceTag) -> Result<&Path> {
        self.embedding_paths
            .get(&tag)
            .map(PathBuf::as_path)
            .ok_or_else(|| Error::MissingEmbedding {
                clip_id: self.clip_id.clone(),
                tag: tag.to_string(),
            })
    }
}

/// Validated clip list, sorted by clip id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Manifest {
    records: Vec<ClipRecord>,
}

#[derive(Debug, Deserialize)]
struct ManifestRow {
    clip_id: String,
    podcast_id: String,
    label: String,
    #[serde(default)]
    source_tag: String,
    #[serde(default)]
    path: String,
}

const MANIFEST_COLUMNS: [&str; 5] = ["clip_id", "podcast_id", "label", "source_tag", "path"];

impl Manifest {
    /// Validates records: unique clip ids and no clip listed twice.
    pub fn from_records(mut records: Vec<ClipRecord>) -> Result<Self> {
        records.sort_by(|a, b| a.clip_id.cmp(&b.clip_id));
        for w in records.windows(2) {
            if w[0].clip_id == w[1].clip_id {
                return Err(Error::DuplicateClipId(w[0].clip_id.clone()));
            }
        }
        Ok(Manifest { records })
    }

    pub fn records(&self) -> &[ClipRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn podcasts(&self) -> BTreeSet<&str> {
        self.records.iter().map(|r| r.podcast_id.as_str()).collect()
    }

    pub fn get(&self, clip_id: &str) -> Option<&ClipRecord> {
        self.records
            .binary_search_by(|r| r.clip_id.as_str().cmp(clip_id))
            .ok()
            .map(|i| &self.records[i])
    }

    /// Indices of the clips whose podcast is in `podcasts`, in manifest order.
    pub fn indices_for(&self, podcasts: &BTreeSet<String>) -> Vec<usize> {
        self.records
            .iter()
            .enumerate()
            .filter(|(_, r)| podcasts.contains(&r.podcast_id))
            .map(|(i, _)| i)
            .collect()
    }

    pub fn class_counts(&self, indices: &[usize]) -> [u64; NUM_CLASSES] {
        let mut counts = [0u64; NUM_CLASSES];
        for &i in indices {
            counts[self.records[i].label.index()] += 1;
        }
        counts
    }
}

/// Loads and validates `manifest.csv`. Rows for the same clip are merged.
///
/// A clip listed twice for the same source, or with conflicting podcast or
/// label, is a [`Error::DuplicateClipId`].
pub fn load_manifest(path: impl AsRef<Path>) -> Result<Manifest> {
    let path = path.as_ref();
    let root = path.parent().unwrap_or_else(|| Path::new(""));
    let mut reader = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let headers = reader.headers().map_err(|e| csv_error(path, e))?.clone();
    for col in MANIFEST_COLUMNS {
        if !headers.iter().any(|h| h.trim() == col) {
            return Err(Error::MissingColumn {
                path: path.into(),
                column: col.into(),
            });
        }
    }

    let mut clips: BTreeMap<String, ClipRecord> = BTreeMap::new();
    for row in reader.deserialize::<ManifestRow>() {
        let row = row.map_err(|e| csv_error(path, e))?;
        let label: Label = row.label.parse()?;
        let tag = match row.source_tag.trim() {
            "" => None,
            t => Some(t.parse::<SourceTag>()?),
        };
        let entry = clips
            .entry(row.clip_id.clone())
            .or_insert_with(|| ClipRecord {
                clip_id: row.clip_id.clone(),
                podcast_id: row.podcast_id.clone(),
                label,
                embedding_paths: BTreeMap::new(),
            });
        if entry.podcast_id != row.podcast_id || entry.label != label {
            return Err(Error::DuplicateClipId(row.clip_id));
        }
        if let Some(tag) = tag {
            let p = root.join(row.path.trim());
            if entry.embedding_paths.insert(tag, p).is_some() {
                return Err(Error::DuplicateClipId(row.clip_id));
            }
        }
    }
    Manifest::from_records(clips.into_values().collect())
}

/// Writes a manifest with paths relative to `root` where possible.
pub fn write_manifest(path: impl AsRef<Path>, manifest: &Manifest) -> Result<()> {
    let path = path.as_ref();
    let root = path.parent().unwrap_or_else(|| Path::new(""));
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    w.write_record(MANIFEST_COLUMNS).map_err(|e| csv_error(path, e))?;
    for r in manifest.records() {
        if r.embedding_paths.is_empty() {
            w.write_record([&r.clip_id, &r.podcast_id, r.label.code(), "", ""])
                .map_err(|e| csv_error(path, e))?;
        }
        for (tag, p) in &r.embedding_paths {
            let rel = p.strip_prefix(root).unwrap_or(p);
            w.write_record([
                r.clip_id.as_str(),
                r.podcast_id.as_str(),
                r.label.code(),
                &tag.to_string(),
                &rel.to_string_lossy(),
            ])
            .map_err(|e| csv_error(path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub(crate) fn csv_error(path: &Path, e: csv::Error) -> Error {
    if let csv::ErrorKind::Io(_) = e.kind() {
        if let csv::ErrorKind::Io(io) = e.into_kind() {
            return Error::io(path, io);
        }
        unreachable!()
    }
    Error::Csv {
        path: path.into(),
        reason: e.to_string(),
    }
}

// ---------------------------------------------------------------------------
// folds

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Subset {
    Train,
    Val,
    Test,
}

pub const SUBSETS: [Subset; 3] = [Subset::Train, Subset::Val, Subset::Test];

impl Subset {
    pub fn as_str(self) -> &'static str {
        match self {
            Subset::Train => "train",
            Subset::Val => "val",
            Subset::Test => "test",
        }
    }
}

impl FromStr for Subset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "train" => Ok(Subset::Train),
            "val" | "validation" => Ok(Subset::Val),
            "test" => Ok(Subset::Test),
            other => Err(Error::InvalidFolds(format!("unknown subset {:?}", other))),
        }
    }
}

impl fmt::Display for Subset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Podcast-level train/val/test assignment for one fold.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FoldDefinition {
    pub fold_id: u32,
    pub train: BTreeSet<String>,
    pub val: BTreeSet<String>,
    pub test: BTreeSet<String>,
}

impl FoldDefinition {
    pub fn subset(&self, s: Subset) -> &BTreeSet<String> {
        match s {
            Subset::Train => &self.train,
            Subset::Val => &self.val,
            Subset::Test => &self.test,
        }
    }

    fn subset_mut(&mut self, s: Subset) -> &mut BTreeSet<String> {
        match s {
            Subset::Train => &mut self.train,
            Subset::Val => &mut self.val,
            Subset::Test => &mut self.test,
        }
    }

    /// Podcasts that appear in more than one subset, with the subsets they appear in.
    pub fn overlaps(&self) -> Vec<(String, Vec<Subset>)> {
        let mut seen: BTreeMap<&str, Vec<Subset>> = BTreeMap::new();
        for s in SUBSETS {
            for p in self.subset(s) {
                seen.entry(p).or_default().push(s);
            }
        }
        seen.into_iter()
            .filter(|(_, v)| v.len() > 1)
            .map(|(p, v)| (p.to_string(), v))
            .collect()
    }

    pub fn is_disjoint(&self) -> bool {
        self.overlaps().is_empty()
    }
}

/// All folds of a protocol, ordered by fold id.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FoldProtocol {
    pub folds: Vec<FoldDefinition>,
}

impl FoldProtocol {
    pub fn fold(&self, id: u32) -> Option<&FoldDefinition> {
        self.folds.iter().find(|f| f.fold_id == id)
    }
}

#[derive(Debug, Deserialize)]
struct FoldRow {
    fold_id: u32,
    subset: String,
    podcast_id: String,
}

pub fn load_folds(path: impl AsRef<Path>) -> Result<FoldProtocol> {
    let path = path.as_ref();
    let mut reader = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let headers = reader.headers().map_err(|e| csv_error(path, e))?.clone();
    for col in ["fold_id", "subset", "podcast_id"] {
        if !headers.iter().any(|h| h.trim() == col) {
            return Err(Error::MissingColumn {
                path: path.into(),
                column: col.into(),
            });
        }
    }
    let mut folds: BTreeMap<u32, FoldDefinition> = BTreeMap::new();
    for row in reader.deserialize::<FoldRow>() {
        let row = row.map_err(|e| csv_error(path, e))?;
        if row.fold_id == 0 {
            return Err(Error::InvalidFolds("fold ids start at 1".into()));
        }
        let subset: Subset = row.subset.parse()?;
        folds
            .entry(row.fold_id)
            .or_insert_with(|| FoldDefinition {
                fold_id: row.fold_id,
                ..Default::default()
            })
            .subset_mut(subset)
            .insert(row.podcast_id.trim().to_string());
    }
    Ok(FoldProtocol {
        folds: folds.into_values().collect(),
    })
}

pub fn write_folds(path: impl AsRef<Path>, protocol: &FoldProtocol) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    w.write_record(["fold_id", "subset", "podcast_id"])
        .map_err(|e| csv_error(path, e))?;
    for f in &protocol.folds {
        for s in SUBSETS {
            for p in f.subset(s) {
                w.write_record([&f.fold_id.to_string(), s.as_str(), p])
                    .map_err(|e| csv_error(path, e))?;
            }
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Podcast-level k-fold protocol built from a manifest.
#[derive(Debug, Clone, Copy)]
pub struct FoldGeneration {
    pub folds: u32,
    pub seed: u64,
}

impl Default for FoldGeneration {
    fn default() -> Self {
        FoldGeneration { folds: 10, seed: 0 }
    }
}

/// Shuffles the podcasts once and cuts them into `k` near-equal groups.
/// Fold `f` tests on group `f`, validates on the next group and trains on the
/// rest, so every podcast is tested exactly once.
pub fn generate_folds(manifest: &Manifest, cfg: &FoldGeneration) -> Result<FoldProtocol> {
    let mut podcasts: Vec<String> = manifest.podcasts().into_iter().map(String::from).collect();
    let n = podcasts.len();
    let k = cfg.folds as usize;
    if k < 3 {
        return Err(Error::Config(format!("need at least 3 folds, got {}", k)));
    }
    if n < k {
        return Err(Error::InvalidFolds(format!("{} podcasts cannot fill {} folds", n, k)));
    }
    SeededRng::new(cfg.seed).shuffle(&mut podcasts);
    let group_of = |i: usize| i * k / n;
    let mut folds = Vec::with_capacity(k);
    for g in 0..k {
        let mut f = FoldDefinition {
            fold_id: g as u32 + 1,
            ..Default::default()
        };
        for (i, p) in podcasts.iter().enumerate() {
            let s = match group_of(i) {
                x if x == g => Subset::Test,
                x if x == (g + 1) % k => Subset::Val,
                _ => Subset::Train,
            };
            f.subset_mut(s).insert(p.clone());
        }
        folds.push(f);
    }
    Ok(FoldProtocol { folds })
}

// ---------------------------------------------------------------------------
// split verification

/// Per-class clip counts of one subset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub counts: [u64; NUM_CLASSES],
    pub total: u64,
}

impl ClassCounts {
    pub fn from_counts(counts: [u64; NUM_CLASSES]) -> Self {
        ClassCounts {
            counts,
            total: counts.iter().sum(),
        }
    }
}

/// Expected counts for every (fold, subset).
#[derive(Debug, Clone, Default)]
pub struct ExpectedCounts {
    pub entries: BTreeMap<(u32, Subset), ClassCounts>,
}

/// Expected counts for one fold.
pub type SplitCounts = BTreeMap<Subset, ClassCounts>;

impl ExpectedCounts {
    pub fn for_fold(&self, fold_id: u32) -> SplitCounts {
        self.entries
            .iter()
            .filter(|((f, _), _)| *f == fold_id)
            .map(|((_, s), c)| (*s, *c))
            .collect()
    }

    pub fn folds(&self) -> BTreeSet<u32> {
        self.entries.keys().map(|(f, _)| *f).collect()
    }
}

pub fn load_expected_counts(path: impl AsRef<Path>) -> Result<ExpectedCounts> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_expected_counts(&text, path)
}

pub fn parse_expected_counts(text: &str, path: &Path) -> Result<ExpectedCounts> {
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    let headers = reader.headers().map_err(|e| csv_error(path, e))?.clone();
    let col = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::MissingColumn {
                path: path.into(),
                column: name.into(),
            })
    };
    let fold_col = col("fold")?;
    let subset_col = col("subset")?;
    let class_cols: Vec<usize> = LABELS
        .iter()
        .map(|l| col(l.code()))
        .collect::<Result<_>>()?;
    let total_col = col("total")?;

    let bad = |reason: String| Error::Csv {
        path: path.into(),
        reason,
    };
    let num = |rec: &csv::StringRecord, i: usize| -> Result<u64> {
        rec.get(i)
            .and_then(|v| v.trim().parse().ok())
            .ok_or_else(|| bad(format!("non-numeric field in {:?}", rec)))
    };

    let mut out = ExpectedCounts::default();
    for rec in reader.records() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        let fold = num(&rec, fold_col)? as u32;
        let subset: Subset = rec.get(subset_col).unwrap_or("").parse()?;
        let mut counts = [0u64; NUM_CLASSES];
        for (c, &i) in counts.iter_mut().zip(&class_cols) {
            *c = num(&rec, i)?;
        }
        let total = num(&rec, total_col)?;
        out.entries.insert((fold, subset), ClassCounts { counts, total });
    }
    Ok(out)
}

/// Outcome for one subset of one fold.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SubsetCheck {
    pub subset: Subset,
    pub observed: ClassCounts,
    pub expected: Option<ClassCounts>,
}

impl SubsetCheck {
    pub fn total_matches(&self) -> bool {
        self.expected.is_some_and(|e| e.total == self.observed.total)
    }

    pub fn classes_match(&self) -> bool {
        self.expected.is_some_and(|e| e.counts == self.observed.counts)
    }

    /// Per-class `(label, observed, expected)` where they differ.
    pub fn deviations(&self) -> Vec<(Label, u64, u64)> {
        match self.expected {
            None => Vec::new(),
            Some(e) => LABELS
                .iter()
                .filter(|l| e.counts[l.index()] != self.observed.counts[l.index()])
                .map(|&l| (l, self.observed.counts[l.index()], e.counts[l.index()]))
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct VerificationReport {
    pub fold_id: u32,
    pub subsets: Vec<SubsetCheck>,
    /// Podcasts assigned to more than one subset.
    pub overlaps: Vec<(String, Vec<Subset>)>,
    /// Manifest podcasts missing from every subset of the fold.
    pub unassigned: Vec<String>,
    /// Fold podcasts absent from the manifest.
    pub unknown: Vec<String>,
}

impl VerificationReport {
    pub fn disjoint(&self) -> bool {
        self.overlaps.is_empty()
    }

    pub fn counts_match(&self) -> bool {
        self.subsets.iter().all(|s| s.total_matches() && s.classes_match())
    }

    pub fn passed(&self) -> bool {
        self.disjoint() && self.unassigned.is_empty() && self.counts_match()
    }

    /// One `PASS`/`FAIL` line per check.
    pub fn lines(&self) -> Vec<String> {
        let mut out = Vec::new();
        let mark = |ok: bool| if ok { "PASS" } else { "FAIL" };
        for s in &self.subsets {
            let counts: String = LABELS
                .iter()
                .map(|l| format!(" {}={}", l, s.observed.counts[l.index()]))
                .collect();
            match s.expected {
                Some(e) => {
                    let mut line = format!(
                        "{} fold={} subset={} total={} expected={}{}",
                        mark(s.total_matches() && s.classes_match()),
                        self.fold_id,
                        s.subset,
                        s.observed.total,
                        e.total,
                        counts
                    );
                    for (l, obs, exp) in s.deviations() {
                        line.push_str(&format!(" deviation:{}={}/{}", l, obs, exp));
                    }
                    out.push(line);
                }
                None => out.push(format!(
                    "INFO fold={} subset={} total={} expected=none{}",
                    self.fold_id, s.subset, s.observed.total, counts
                )),
            }
        }
        out.push(format!(
            "{} fold={} podcast-disjoint overlaps={}",
            mark(self.disjoint()),
            self.fold_id,
            self.overlaps.len()
        ));
        for (p, subsets) in &self.overlaps {
            let names: Vec<&str> = subsets.iter().map(|s| s.as_str()).collect();
            out.push(format!("FAIL fold={} overlap podcast={} subsets={}", self.fold_id, p, names.join("+")));
        }
        out.push(format!(
            "{} fold={} coverage unassigned={} unknown={}",
            mark(self.unassigned.is_empty()),
            self.fold_id,
            self.unassigned.len(),
            self.unknown.len()
        ));
        out
    }
}

/// Counts clips per class in each subset of `fold` and compares with `expected`.
/// Mismatches are recorded in the report, never raised.
pub fn verify_split(manifest: &Manifest, fold: &FoldDefinition, expected: &SplitCounts) -> VerificationReport {
    let subsets = SUBSETS
        .iter()
        .map(|&s| {
            let idx = manifest.indices_for(fold.subset(s));
            SubsetCheck {
                subset: s,
                observed: ClassCounts::from_counts(manifest.class_counts(&idx)),
                expected: expected.get(&s).copied(),
            }
        })
        .collect();

    let assigned: BTreeSet<&str> = SUBSETS
        .iter()
        .flat_map(|&s| fold.subset(s).iter().map(String::as_str))
        .collect();
    let podcasts = manifest.podcasts();
    let unassigned = podcasts
        .iter()
        .filter(|p| !assigned.contains(*p))
        .map(|p| p.to_string())
        .collect();
    let unknown = assigned
        .iter()
        .filter(|p| !podcasts.contains(*p))
        .map(|p| p.to_string())
        .collect();

    VerificationReport {
        fold_id: fold.fold_id,
        subsets,
        overlaps: fold.overlaps(),
        unassigned,
        unknown,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Cursor;

    fn npy_bytes(rows: usize, cols: usize, values: &[f32]) -> Vec<u8> {
        let mut buf = Vec::new();
        write_npy_f32(&mut buf, rows, cols, values).unwrap();
        buf
    }

    #[test]
    fn header_is_64_byte_aligned() {
        let buf = npy_bytes(3, 768, &vec![0.5; 3 * 768]);
        let header_len = u16::from_le_bytes([buf[8], buf[9]]) as usize;
        assert_eq!((10 + header_len) % 64, 0);
        assert_eq!(buf[10 + header_len - 1], b'\n');
        assert_eq!(buf.len(), 10 + header_len + 3 * 768 * 4);
    }

    #[test]
    fn speaker_embedding_shape() {
        let values: Vec<f32> = (0..192).map(|i| i as f32 * 0.25).collect();
        let buf = npy_bytes(1, 192, &values);
        let (r, c, v) = read_npy_f32(&mut Cursor::new(buf), Path::new("x.npy")).unwrap();
        assert_eq!((r, c), (1, 192));
        assert_eq!(v, values);
    }

    #[test]
    fn short_payload_is_a_shape_mismatch() {
        let mut buf = npy_bytes(1, 768, &vec![1.0; 768]);
        // declare (3, 768) without touching the payload
        let header_len = u16::from_le_bytes([buf[8], buf[9]]) as usize;
        let header = std::str::from_utf8(&buf[10..10 + header_len]).unwrap().replace("(1, 768)", "(3, 768)");
        buf[10..10 + header_len].copy_from_slice(header.as_bytes());
        let err = read_npy_f32(&mut Cursor::new(buf), Path::new("x.npy")).unwrap_err();
        assert!(matches!(err, Error::ShapeMismatch(_)), "{err}");
    }

    #[test]
    fn bad_magic_and_dtype() {
        let mut buf = npy_bytes(1, 2, &[1.0, 2.0]);
        buf[1] = b'X';
        assert!(matches!(
            read_npy_f32(&mut Cursor::new(buf), Path::new("x")),
            Err(Error::BadMagic(_))
        ));

        let mut buf = npy_bytes(1, 2, &[1.0, 2.0]);
        let pos = buf.windows(3).position(|w| w == b"<f4").unwrap();
        buf[pos..pos + 3].copy_from_slice(b"<f8");
        assert!(matches!(
            read_npy_f32(&mut Cursor::new(buf), Path::new("x")),
            Err(Error::UnsupportedDtype { .. })
        ));
    }

    #[test]
    fn non_finite_payload_rejected() {
        let buf = npy_bytes(1, 3, &[1.0, f32::NAN, 2.0]);
        assert!(matches!(
            read_npy_f32(&mut Cursor::new(buf), Path::new("x")),
            Err(Error::NonFinitePayload(_))
        ));
    }

    #[test]
    fn one_dimensional_shape_is_a_row() {
        let mut buf = npy_bytes(1, 4, &[1.0, 2.0, 3.0, 4.0]);
        let header_len = u16::from_le_bytes([buf[8], buf[9]]) as usize;
        let header = std::str::from_utf8(&buf[10..10 + header_len])
            .unwrap()
            .replace("(1, 4)", "(4,)  ");
        buf[10..10 + header_len].copy_from_slice(header.as_bytes());
        let (r, c, _) = read_npy_f32(&mut Cursor::new(buf), Path::new("x")).unwrap();
        assert_eq!((r, c), (1, 4));
    }

    #[test]
    fn source_tags() {
        assert_eq!("ecapa".parse::<SourceTag>().unwrap(), SourceTag::Ecapa);
        assert_eq!("w2v2.L11".parse::<SourceTag>().unwrap(), SourceTag::W2v2(11));
        for bad in ["w2v2.L0", "w2v2.L14", "wav2vec", "w2v2.11"] {
            assert!(bad.parse::<SourceTag>().is_err(), "{bad}");
        }
        assert_eq!(SourceTag::W2v2(7).to_string(), "w2v2.L7");
        assert!(SourceTag::Ecapa.check_shape(&Matrix::zeros(1, 192)).is_ok());
        assert!(SourceTag::Ecapa.check_shape(&Matrix::zeros(2, 192)).is_err());
        assert!(SourceTag::W2v2(1).check_shape(&Matrix::zeros(149, 768)).is_ok());
        assert!(SourceTag::W2v2(1).check_shape(&Matrix::zeros(149, 767)).is_err());
    }

    fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
        let p = dir.join(name);
        std::fs::write(&p, text).unwrap();
        p
    }

    #[test]
    fn manifest_merges_sources_and_resolves_paths() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            "manifest.csv",
            "clip_id,podcast_id,label,source_tag,path\n\
             c1,pod1,F,ecapa,emb/c1.ecapa.npy\n\
             c1,pod1,F,w2v2.L11,emb/c1.L11.npy\n\
             c2,pod2,R,ecapa,emb/c2.ecapa.npy\n",
        );
        let m = load_manifest(&p).unwrap();
        assert_eq!(m.len(), 2);
        let c1 = m.get("c1").unwrap();
        assert_eq!(c1.label, Label::Fluent);
        assert_eq!(c1.embedding_paths.len(), 2);
        assert_eq!(
            c1.embedding_path(SourceTag::W2v2(11)).unwrap(),
            dir.path().join("emb/c1.L11.npy")
        );
        assert!(matches!(
            m.get("c2").unwrap().embedding_path(SourceTag::W2v2(11)),
            Err(Error::MissingEmbedding { .. })
        ));
    }

    #[test]
    fn manifest_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            "a.csv",
            "clip_id,podcast_id,label,source_tag,path\nc1,p,NoSpeech,ecapa,x.npy\n",
        );
        assert!(matches!(load_manifest(&p), Err(Error::UnknownLabel(_))));

        let p = write(
            dir.path(),
            "b.csv",
            "clip_id,podcast_id,label,source_tag,path\nc1,p,F,ecapa,x.npy\nc1,p,F,ecapa,y.npy\n",
        );
        assert!(matches!(load_manifest(&p), Err(Error::DuplicateClipId(_))));

        let p = write(
            dir.path(),
            "c.csv",
            "clip_id,podcast_id,label,source_tag,path\nc1,p,F,ecapa,x.npy\nc1,q,F,w2v2.L1,y.npy\n",
        );
        assert!(matches!(load_manifest(&p), Err(Error::DuplicateClipId(_))));

        let p = write(dir.path(), "d.csv", "clip_id,label,source_tag,path\nc1,F,ecapa,x.npy\n");
        assert!(matches!(load_manifest(&p), Err(Error::MissingColumn { .. })));
    }

    #[test]
    fn manifest_load_is_order_independent() {
        let dir = tempfile::tempdir().unwrap();
        let rows = [
            "c3,p2,B,ecapa,c3.npy",
            "c1,p1,F,ecapa,c1.npy",
            "c2,p1,I,ecapa,c2.npy",
            "c1,p1,F,w2v2.L1,c1b.npy",
        ];
        let head = "clip_id,podcast_id,label,source_tag,path\n";
        let a = write(dir.path(), "a.csv", &format!("{}{}\n", head, rows.join("\n")));
        let mut rev = rows;
        rev.reverse();
        let b = write(dir.path(), "b.csv", &format!("{}{}\n", head, rev.join("\n")));
        assert_eq!(load_manifest(a).unwrap(), load_manifest(b).unwrap());
    }

    fn small_manifest() -> Manifest {
        let rec = |id: &str, pod: &str, l: Label| ClipRecord {
            clip_id: id.into(),
            podcast_id: pod.into(),
            label: l,
            embedding_paths: BTreeMap::new(),
        };
        Manifest::from_records(vec![
            rec("a", "p1", Label::Fluent),
            rec("b", "p1", Label::Repetition),
            rec("c", "p2", Label::Block),
            rec("d", "p3", Label::Fluent),
            rec("e", "p4", Label::Interjection),
        ])
        .unwrap()
    }

    fn set(items: &[&str]) -> BTreeSet<String> {
        items.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn verify_split_counts_and_overlap() {
        let m = small_manifest();
        let fold = FoldDefinition {
            fold_id: 1,
            train: set(&["p1", "p2"]),
            val: set(&["p3"]),
            test: set(&["p4", "p1"]),
        };
        let mut expected = SplitCounts::new();
        expected.insert(Subset::Train, ClassCounts::from_counts([1, 0, 1, 0, 1]));
        let r = verify_split(&m, &fold, &expected);
        assert!(!r.disjoint());
        assert_eq!(r.overlaps, vec![("p1".to_string(), vec![Subset::Train, Subset::Test])]);
        assert!(r.subsets[0].total_matches() && r.subsets[0].classes_match());
        assert_eq!(r.subsets[2].observed.counts, [1, 0, 0, 1, 1]);
        assert!(!r.passed());
        assert!(r.lines().iter().any(|l| l.starts_with("FAIL fold=1 overlap podcast=p1")));
    }

    #[test]
    fn verify_split_coverage() {
        let m = small_manifest();
        let fold = FoldDefinition {
            fold_id: 2,
            train: set(&["p1", "p2"]),
            val: set(&["p3"]),
            test: set(&["p9"]),
        };
        let r = verify_split(&m, &fold, &SplitCounts::new());
        assert!(r.disjoint());
        assert_eq!(r.unassigned, vec!["p4".to_string()]);
        assert_eq!(r.unknown, vec!["p9".to_string()]);
    }

    #[test]
    fn generated_folds_are_disjoint_and_cover() {
        let m = small_manifest();
        let cfg = FoldGeneration { folds: 4, seed: 3 };
        let p = generate_folds(&m, &cfg).unwrap();
        assert_eq!(p.folds.len(), 4);
        let mut tested = BTreeSet::new();
        for f in &p.folds {
            assert!(f.is_disjoint());
            let r = verify_split(&m, f, &SplitCounts::new());
            assert!(r.unassigned.is_empty() && r.unknown.is_empty());
            assert!(!f.train.is_empty() && !f.val.is_empty() && !f.test.is_empty());
            tested.extend(f.test.iter().cloned());
        }
        assert_eq!(tested.len(), 4);
        assert_eq!(generate_folds(&m, &cfg).unwrap(), p);
        assert!(matches!(
            generate_folds(&m, &FoldGeneration::default()),
            Err(Error::InvalidFolds(_))
        ));
    }

    #[test]
    fn folds_round_trip_through_csv() {
        let dir = tempfile::tempdir().unwrap();
        let p = generate_folds(&small_manifest(), &FoldGeneration { folds: 3, seed: 0 }).unwrap();
        let path = dir.path().join("folds.csv");
        write_folds(&path, &p).unwrap();
        assert_eq!(load_folds(&path).unwrap(), p);
    }

    #[test]
    fn shipped_table_parses() {
        let text = include_str!("../../../data/sep28k_table1.csv");
        let e = parse_expected_counts(text, Path::new("table1")).unwrap();
        assert_eq!(e.entries.len(), 30);
        let f1 = e.for_fold(1);
        assert_eq!(f1[&Subset::Train].counts, [2681, 1384, 1726, 3181, 9950]);
        assert_eq!(f1[&Subset::Train].total, 18922);
        assert_eq!(f1[&Subset::Val].total, 2805);
        assert_eq!(f1[&Subset::Test].total, 1846);
        for c in e.entries.values() {
            assert_eq!(c.counts.iter().sum::<u64>(), c.total);
        }
    }
}
