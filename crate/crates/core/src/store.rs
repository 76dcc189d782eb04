//! Interchange format for tagging-model outputs.
//!
//! A record file carries one image's backbone feature grid together with the
//! tags the tagging head emitted for it, their confidences and their attention
//! maps (at grid resolution). Layout, all little-endian:
//!
//! ```text
//! "TGRC" | version u32 | h u32 | w u32 | d u32 | label_id i32
//! features  h*w*d f32 (row-major cells, d contiguous per cell)
//! tag_count u32
//! per tag:  tag_id u32 | confidence f32 | attention h*w f32 (row-major)
//! ```
//!
//! The record id is not stored in the file; it is the file stem.

use std::collections::{BTreeSet, HashSet};
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::{Array2, Array3};
use thiserror::Error;

pub const RECORD_MAGIC: &[u8; 4] = b"TGRC";
pub const RECORD_VERSION: u32 = 1;
const HEADER_LEN: usize = 24;

/// Label sentinel for OOD or unlabeled records.
pub const NO_LABEL: i32 = -1;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic {found:?}, expected \"TGRC\"")]
    BadMagic { found: [u8; 4] },
    #[error("unsupported record version {0}")]
    UnsupportedVersion(u32),
    #[error("truncated record: needed {needed} bytes, file has {available}")]
    Truncated { needed: usize, available: usize },
    #[error("{0} trailing bytes after record payload")]
    TrailingBytes(usize),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("invalid record: {0}")]
    Invalid(String),
    #[error("manifest line {line}: {message}")]
    Manifest { line: usize, message: String },
}

impl StoreError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        StoreError::Io { path: path.to_path_buf(), source }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TagAnnotation {
    pub tag_id: u32,
    pub confidence: f32,
    /// Raw attention at grid resolution, shape `(h, w)`.
    pub attention: Array2<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRecord {
    pub id: String,
    /// Feature grid, shape `(h, w, d)`.
    pub features: Array3<f32>,
    pub tags: Vec<TagAnnotation>,
    pub label_id: i32,
}

impl FeatureRecord {
    pub fn grid(&self) -> (usize, usize) {
        let (h, w, _) = self.features.dim();
        (h, w)
    }

    pub fn feature_dim(&self) -> usize {
        self.features.dim().2
    }

    pub fn tag(&self, tag_id: u32) -> Option<&TagAnnotation> {
        self.tags.iter().find(|t| t.tag_id == tag_id)
    }

    /// Exact on-disk size of this record.
    pub fn encoded_len(&self) -> usize {
        let (h, w, d) = self.features.dim();
        record_file_len(h, w, d, self.tags.len())
    }

    /// Checks every invariant that does not depend on the vocabulary.
    pub fn validate(&self) -> Result<(), StoreError> {
        let (h, w, d) = self.features.dim();
        if h == 0 || w == 0 || d == 0 {
            return Err(StoreError::Invalid(format!("empty grid {h}x{w}x{d}")));
        }
        if self.label_id < NO_LABEL {
            return Err(StoreError::Invalid(format!("label_id {} below -1", self.label_id)));
        }
        if self.features.iter().any(|v| !v.is_finite()) {
            return Err(StoreError::NonFinite("features".into()));
        }
        let mut seen = HashSet::new();
        for tag in &self.tags {
            if !seen.insert(tag.tag_id) {
                return Err(StoreError::Invalid(format!("duplicate tag_id {}", tag.tag_id)));
            }
            if !tag.confidence.is_finite() {
                return Err(StoreError::NonFinite(format!("confidence of tag {}", tag.tag_id)));
            }
            if !(0.0..=1.0).contains(&tag.confidence) {
                return Err(StoreError::Invalid(format!(
                    "confidence {} of tag {} outside [0,1]",
                    tag.confidence, tag.tag_id
                )));
            }
            if tag.attention.dim() != (h, w) {
                return Err(StoreError::Invalid(format!(
                    "attention of tag {} has shape {:?}, grid is {h}x{w}",
                    tag.tag_id,
                    tag.attention.dim()
                )));
            }
            if tag.attention.iter().any(|v| !v.is_finite()) {
                return Err(StoreError::NonFinite(format!("attention of tag {}", tag.tag_id)));
            }
        }
        Ok(())
    }
}

/// `24 + 4·h·w·d + 4 + tag_count·(8 + 4·h·w)`.
pub fn record_file_len(h: usize, w: usize, d: usize, tag_count: usize) -> usize {
    HEADER_LEN + 4 * h * w * d + 4 + tag_count * (8 + 4 * h * w)
}

pub fn encode_record(record: &FeatureRecord) -> Result<Vec<u8>, StoreError> {
    record.validate()?;
    let (h, w, d) = record.features.dim();
    let mut buf = Vec::with_capacity(record.encoded_len());
    buf.extend_from_slice(RECORD_MAGIC);
    for v in [RECORD_VERSION, h as u32, w as u32, d as u32] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf.extend_from_slice(&record.label_id.to_le_bytes());
    // `iter` walks in logical row-major order regardless of memory layout.
    for v in record.features.iter() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf.extend_from_slice(&(record.tags.len() as u32).to_le_bytes());
    for tag in &record.tags {
        buf.extend_from_slice(&tag.tag_id.to_le_bytes());
        buf.extend_from_slice(&tag.confidence.to_le_bytes());
        for v in tag.attention.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    debug_assert_eq!(buf.len(), record.encoded_len());
    Ok(buf)
}

pub fn write_record(record: &FeatureRecord, path: &Path) -> Result<(), StoreError> {
    let bytes = encode_record(record)?;
    let mut file = fs::File::create(path).map_err(|e| StoreError::io(path, e))?;
    file.write_all(&bytes).map_err(|e| StoreError::io(path, e))
}

/// Little-endian cursor that reports truncation against the whole buffer.
struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], StoreError> {
        let end = self.pos + n;
        if end > self.buf.len() {
            return Err(StoreError::Truncated { needed: end, available: self.buf.len() });
        }
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32, StoreError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn i32(&mut self) -> Result<i32, StoreError> {
        Ok(i32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>, StoreError> {
        let bytes = self.take(4 * n)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

pub fn decode_record(id: &str, bytes: &[u8]) -> Result<FeatureRecord, StoreError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let magic: [u8; 4] = r.take(4)?.try_into().unwrap();
    if &magic != RECORD_MAGIC {
        return Err(StoreError::BadMagic { found: magic });
    }
    let version = r.u32()?;
    if version != RECORD_VERSION {
        return Err(StoreError::UnsupportedVersion(version));
    }
    let h = r.u32()? as usize;
    let w = r.u32()? as usize;
    let d = r.u32()? as usize;
    let label_id = r.i32()?;
    if h == 0 || w == 0 || d == 0 {
        return Err(StoreError::Invalid(format!("empty grid {h}x{w}x{d}")));
    }
    let features = Array3::from_shape_vec((h, w, d), r.f32s(h * w * d)?)
        .expect("length matches shape");
    let tag_count = r.u32()? as usize;
    let mut tags = Vec::with_capacity(tag_count.min(1024));
    for _ in 0..tag_count {
        let tag_id = r.u32()?;
        let confidence = f32::from_bits(r.u32()?);
        let attention =
            Array2::from_shape_vec((h, w), r.f32s(h * w)?).expect("length matches shape");
        tags.push(TagAnnotation { tag_id, confidence, attention });
    }
    if r.pos != bytes.len() {
        return Err(StoreError::TrailingBytes(bytes.len() - r.pos));
    }
    let record = FeatureRecord { id: id.to_string(), features, tags, label_id };
    record.validate()?;
    Ok(record)
}

/// Reads a record; its id is the file stem.
pub fn read_record(path: &Path) -> Result<FeatureRecord, StoreError> {
    let bytes = fs::read(path).map_err(|e| StoreError::io(path, e))?;
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    decode_record(&id, &bytes)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    TestInd,
    TestOod,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::TestInd, Split::TestOod];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::TestInd => "test_ind",
            Split::TestOod => "test_ood",
        }
    }

    pub fn is_ind(self) -> bool {
        !matches!(self, Split::TestOod)
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "test_ind" => Ok(Split::TestInd),
            "test_ood" => Ok(Split::TestOod),
            other => Err(format!("unknown split {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub id: String,
    pub split: Split,
    pub label_id: i32,
    /// Relative to the store root.
    pub path: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Manifest {
    pub vocab_size: u32,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn parse(text: &str) -> Result<Manifest, StoreError> {
        let err = |line: usize, message: String| StoreError::Manifest { line, message };
        let mut lines = text.lines().enumerate();
        let vocab_size = match lines.next() {
            Some((_, first)) => first
                .trim()
                .strip_prefix("#vocab_size=")
                .ok_or_else(|| err(1, "first line must be #vocab_size=<M>".into()))?
                .parse::<u32>()
                .map_err(|e| err(1, format!("vocab_size: {e}")))?,
            None => return Err(err(1, "empty manifest".into())),
        };
        if vocab_size == 0 {
            return Err(err(1, "vocab_size must be positive".into()));
        }
        let mut entries = Vec::new();
        for (idx, line) in lines {
            let lineno = idx + 1;
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 4 {
                return Err(err(lineno, format!("expected 4 tab-separated fields, got {}", fields.len())));
            }
            let split = fields[1].parse::<Split>().map_err(|m| err(lineno, m))?;
            let label_id = fields[2]
                .parse::<i32>()
                .map_err(|e| err(lineno, format!("label_id: {e}")))?;
            entries.push(ManifestEntry {
                id: fields[0].to_string(),
                split,
                label_id,
                path: PathBuf::from(fields[3]),
            });
        }
        Ok(Manifest { vocab_size, entries })
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("#vocab_size={}\n", self.vocab_size);
        for e in &self.entries {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\n",
                e.id,
                e.split,
                e.label_id,
                e.path.display()
            ));
        }
        out
    }

    pub fn load(path: &Path) -> Result<Manifest, StoreError> {
        let text = fs::read_to_string(path).map_err(|e| StoreError::io(path, e))?;
        Manifest::parse(&text)
    }

    pub fn save(&self, path: &Path) -> Result<(), StoreError> {
        fs::write(path, self.to_text()).map_err(|e| StoreError::io(path, e))
    }
}

/// Conventional manifest location inside a store root.
pub const MANIFEST_FILE: &str = "manifest.tsv";
pub const VOCAB_FILE: &str = "vocab.tsv";

/// A store root directory plus its parsed manifest.
#[derive(Debug, Clone)]
pub struct Store {
    pub root: PathBuf,
    pub manifest: Manifest,
}

impl Store {
    pub fn open(root: &Path) -> Result<Store, StoreError> {
        let manifest = Manifest::load(&root.join(MANIFEST_FILE))?;
        Ok(Store { root: root.to_path_buf(), manifest })
    }

    pub fn read(&self, entry: &ManifestEntry) -> Result<FeatureRecord, StoreError> {
        let mut record = read_record(&self.root.join(&entry.path))?;
        record.id = entry.id.clone();
        Ok(record)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EntryCheck {
    pub id: String,
    pub failures: Vec<String>,
}

impl EntryCheck {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ValidationReport {
    pub entries: Vec<EntryCheck>,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(EntryCheck::passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &EntryCheck> {
        self.entries.iter().filter(|e| !e.passed())
    }
}

/// Checks every manifest entry against its record file. Never fails; problems
/// become report entries.
pub fn validate_store(manifest: &Manifest, root: &Path) -> ValidationReport {
    let mut seen = BTreeSet::new();
    let mut entries = Vec::with_capacity(manifest.entries.len());
    for entry in &manifest.entries {
        let mut failures = Vec::new();
        if !seen.insert(entry.id.as_str()) {
            failures.push(format!("duplicate id {}", entry.id));
        }
        match entry.split {
            Split::TestOod if entry.label_id != NO_LABEL => {
                failures.push(format!("test_ood entry has label_id {}", entry.label_id))
            }
            Split::Train if entry.label_id < 0 => {
                failures.push("train entry without a label".to_string())
            }
            _ if entry.label_id < NO_LABEL => {
                failures.push(format!("label_id {} below -1", entry.label_id))
            }
            _ => {}
        }
        let path = root.join(&entry.path);
        if !path.exists() {
            failures.push(format!("missing file {}", path.display()));
        } else {
            match read_record(&path) {
                Err(e) => failures.push(e.to_string()),
                Ok(record) => {
                    if record.label_id != entry.label_id {
                        failures.push(format!(
                            "record label_id {} differs from manifest {}",
                            record.label_id, entry.label_id
                        ));
                    }
                    for tag in &record.tags {
                        if tag.tag_id >= manifest.vocab_size {
                            failures.push(format!(
                                "tag_id {} outside vocabulary of {}",
                                tag.tag_id, manifest.vocab_size
                            ));
                        }
                    }
                }
            }
        }
        entries.push(EntryCheck { id: entry.id.clone(), failures });
    }
    ValidationReport { entries }
}

/// Tag-name vocabulary: `<tag_id>\t<tag string>` per line.
pub fn write_tag_names(names: &[(u32, String)], path: &Path) -> Result<(), StoreError> {
    let mut out = String::new();
    for (id, name) in names {
        out.push_str(&format!("{id}\t{name}\n"));
    }
    fs::write(path, out).map_err(|e| StoreError::io(path, e))
}

pub fn read_tag_names(path: &Path) -> Result<Vec<(u32, String)>, StoreError> {
    let text = fs::read_to_string(path).map_err(|e| StoreError::io(path, e))?;
    let mut names = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (id, name) = line.split_once('\t').ok_or_else(|| StoreError::Manifest {
            line: idx + 1,
            message: "expected <tag_id>\\t<tag>".into(),
        })?;
        let id = id.parse::<u32>().map_err(|e| StoreError::Manifest {
            line: idx + 1,
            message: format!("tag_id: {e}"),
        })?;
        names.push((id, name.to_string()));
    }
    Ok(names)
}
