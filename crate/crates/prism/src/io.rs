//! Versioned, self-describing persistence: `.psd` datasets and `.pck`
//! model checkpoints.
//!
//! Datasets are line-delimited JSON for inspectability — a header object on
//! the first line (magic, format version, dimension, provenance), then one
//! sample object per line. Checkpoints keep their weights binary so a
//! save/load round trip is bit-exact: a 4-byte magic, a little-endian `u32`
//! format version, a JSON header (architecture, training provenance,
//! dataset fingerprint, timestamp, time range, smoothness bound), then the
//! flat weight vector as little-endian 64-bit floats.
//!
//! All writes go through a temp file in the target directory followed by a
//! rename, so a crash never leaves a half-written artifact at the final
//! path. Fingerprints hash IEEE-754 bit patterns, never decimal renderings,
//! so they are stable across platforms.

use crate::field::{ShapeSample, TrainConfig};
use crate::inverse::InverseTrainConfig;
use crate::network::{NetArch, Params};
use crate::starman::{Split, StarmanConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fmt;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;
use thiserror::Error;

/// Current dataset format version.
pub const DATASET_VERSION: u32 = 1;
/// Magic string opening every dataset header.
pub const DATASET_MAGIC: &str = "PSD";
/// Current checkpoint format version.
pub const CHECKPOINT_VERSION: u32 = 1;
/// Magic bytes opening every checkpoint.
pub const CHECKPOINT_MAGIC: [u8; 4] = *b"PCK\0";

/// Upper bound on a checkpoint's JSON header, to reject absurd inputs
/// before allocating.
const MAX_HEADER_BYTES: u64 = 16 << 20;
/// Upper bound on a checkpoint's weight count (the default nets use ~10⁵).
const MAX_WEIGHTS: u64 = 1 << 27;

/// Structurally broken file: bad magic, truncation, or unparseable bytes.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub struct FormatError {
    /// What was wrong.
    pub detail: String,
    /// 1-based line for text formats, `None` for binary offsets.
    pub line: Option<usize>,
}

impl fmt::Display for FormatError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.line {
            Some(line) => write!(f, "malformed file at line {line}: {}", self.detail),
            None => write!(f, "malformed file: {}", self.detail),
        }
    }
}

/// Well-formed bytes whose content violates the schema: missing fields,
/// wrong types, or inconsistent dimensions.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub struct SchemaError {
    /// What was wrong.
    pub detail: String,
    /// 1-based line for text formats.
    pub line: Option<usize>,
}

impl fmt::Display for SchemaError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.line {
            Some(line) => write!(f, "schema violation at line {line}: {}", self.detail),
            None => write!(f, "schema violation: {}", self.detail),
        }
    }
}

/// The file's format version is not one this build reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("format version {found} is not supported (this build reads version {supported})")]
pub struct VersionError {
    /// Version found in the file.
    pub found: u32,
    /// Version this build supports.
    pub supported: u32,
}

/// Everything that can go wrong reading or writing an artifact.
#[derive(Debug, Error)]
pub enum IoError {
    /// Underlying filesystem failure.
    #[error("I/O failure: {0}")]
    Io(#[from] std::io::Error),
    /// Structurally broken file.
    #[error(transparent)]
    Format(#[from] FormatError),
    /// Schema violation in well-formed content.
    #[error(transparent)]
    Schema(#[from] SchemaError),
    /// Unsupported format version.
    #[error(transparent)]
    Version(#[from] VersionError),
}

/// Map a serde error to schema (valid JSON, wrong shape) or format
/// (broken JSON) with a line number.
fn classify_json(err: serde_json::Error, line: usize) -> IoError {
    use serde_json::error::Category;
    match err.classify() {
        Category::Data => SchemaError { detail: err.to_string(), line: Some(line) }.into(),
        _ => FormatError { detail: err.to_string(), line: Some(line) }.into(),
    }
}

/// Timestamp for reproducible artifacts: `SOURCE_DATE_EPOCH` when set
/// (the packaging convention for deterministic builds), otherwise 0.
/// Wall-clock time would break bit-identical reruns.
pub fn reproducible_timestamp() -> u64 {
    std::env::var("SOURCE_DATE_EPOCH")
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or(0)
}

/// Write `bytes` to `path` atomically: temp file in the same directory,
/// then rename.
pub(crate) fn atomic_write(path: &Path, bytes: &[u8]) -> Result<(), IoError> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.flush()?;
    // Temp files are created owner-only; artifacts should be plain files.
    #[cfg(unix)]
    {
        use std::os::unix::fs::PermissionsExt;
        tmp.as_file().set_permissions(std::fs::Permissions::from_mode(0o644))?;
    }
    tmp.persist(path).map_err(|e| IoError::Io(e.error))?;
    Ok(())
}

// ── datasets ────────────────────────────────────────────────────────────────

/// Where a dataset came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum Provenance {
    /// Synthetic star-shape data; the config plus seed regenerate the body
    /// exactly.
    Starman {
        /// Generator configuration.
        config: StarmanConfig,
        /// Which split this file holds.
        split: Split,
    },
    /// Anything else; free-form description.
    External {
        /// Human-readable origin.
        description: String,
    },
}

/// First line of a `.psd` file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    /// Always [`DATASET_MAGIC`].
    pub magic: String,
    /// Always [`DATASET_VERSION`] for files this build writes.
    pub format_version: u32,
    /// Spatial dimension of every record.
    pub d: usize,
    /// Unit of the time axis (synthetic data uses a normalized unit span).
    pub time_unit: String,
    /// Generation seed for synthetic data.
    pub seed: Option<u64>,
    /// Origin of the records.
    pub provenance: Provenance,
}

impl DatasetHeader {
    /// Header for a synthetic star-shape split.
    pub fn starman(config: &StarmanConfig, split: Split, seed: u64) -> Self {
        DatasetHeader {
            magic: DATASET_MAGIC.to_string(),
            format_version: DATASET_VERSION,
            d: 2,
            time_unit: "normalized".to_string(),
            seed: Some(seed),
            provenance: Provenance::Starman { config: config.clone(), split },
        }
    }
}

/// A parsed dataset: provenance header plus the sample records.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// The file's header line.
    pub header: DatasetHeader,
    /// Body records, in file order.
    pub samples: Vec<ShapeSample>,
}

/// Serialize a dataset to its on-disk bytes: header line, then one JSON
/// record per line.
pub fn dataset_to_vec(header: &DatasetHeader, samples: &[ShapeSample]) -> Vec<u8> {
    let mut buf = Vec::with_capacity(64 + samples.len() * 160);
    serde_json::to_writer(&mut buf, header).expect("header serialization cannot fail");
    buf.push(b'\n');
    for s in samples {
        serde_json::to_writer(&mut buf, s).expect("sample serialization cannot fail");
        buf.push(b'\n');
    }
    buf
}

/// Write a dataset atomically: header line, then one JSON record per line.
pub fn write_dataset(path: &Path, header: &DatasetHeader, samples: &[ShapeSample]) -> Result<(), IoError> {
    atomic_write(path, &dataset_to_vec(header, samples))
}

/// Read and validate a dataset: magic and version checked, every record
/// parsed, and every record's dimensions checked against the header.
/// Line numbers in errors are 1-based and count the header line.
pub fn read_dataset(path: &Path) -> Result<Dataset, IoError> {
    let file = std::fs::File::open(path)?;
    read_dataset_from(BufReader::new(file))
}

/// [`read_dataset`] over any buffered reader (in-memory bytes included).
pub fn read_dataset_from<R: BufRead>(reader: R) -> Result<Dataset, IoError> {
    let mut lines = reader.lines();
    let header_line = lines
        .next()
        .ok_or_else(|| FormatError { detail: "empty file, expected a header line".into(), line: Some(1) })??;
    let header: DatasetHeader =
        serde_json::from_str(&header_line).map_err(|e| classify_json(e, 1))?;
    if header.magic != DATASET_MAGIC {
        return Err(FormatError {
            detail: format!("bad magic {:?}, expected {DATASET_MAGIC:?}", header.magic),
            line: Some(1),
        }
        .into());
    }
    if header.format_version != DATASET_VERSION {
        return Err(VersionError { found: header.format_version, supported: DATASET_VERSION }.into());
    }

    let mut samples = Vec::new();
    for (idx, line) in lines.enumerate() {
        let line_no = idx + 2;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let sample: ShapeSample =
            serde_json::from_str(&line).map_err(|e| classify_json(e, line_no))?;
        if sample.p.len() != header.d || sample.d.len() != header.d {
            return Err(SchemaError {
                detail: format!(
                    "record has {}-dimensional point and {}-dimensional displacement in a {}-dimensional file",
                    sample.p.len(),
                    sample.d.len(),
                    header.d
                ),
                line: Some(line_no),
            }
            .into());
        }
        samples.push(sample);
    }
    Ok(Dataset { header, samples })
}

/// Content fingerprint of a sample set: SHA-256 over the IEEE-754 bit
/// patterns (and integer fields) of every record, in order. Stable across
/// platforms because no float ever passes through a decimal rendering.
pub fn dataset_fingerprint(samples: &[ShapeSample]) -> String {
    let mut h = Sha256::new();
    let push_f64s = |h: &mut Sha256, xs: &[f64]| {
        h.update((xs.len() as u64).to_le_bytes());
        for x in xs {
            h.update(x.to_bits().to_le_bytes());
        }
    };
    for s in samples {
        h.update(s.subject_id.to_le_bytes());
        h.update(s.t.to_bits().to_le_bytes());
        push_f64s(&mut h, &s.p);
        push_f64s(&mut h, &s.d);
        match s.tau_gt {
            Some(tau) => {
                h.update([1u8]);
                h.update(tau.to_bits().to_le_bytes());
            }
            None => h.update([0u8]),
        }
        match s.limb {
            Some(l) => h.update([1u8, l]),
            None => h.update([0u8, 0u8]),
        }
    }
    hex(&h.finalize())
}

/// SHA-256 of a file's raw bytes, hex-encoded.
pub fn file_sha256(path: &Path) -> Result<String, IoError> {
    let mut file = std::fs::File::open(path)?;
    let mut h = Sha256::new();
    let mut buf = [0u8; 64 * 1024];
    loop {
        let n = file.read(&mut buf)?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(hex(&h.finalize()))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

// ── checkpoints ─────────────────────────────────────────────────────────────

/// Which training loop produced a checkpoint, with its full configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TrainProvenance {
    /// The displacement-field loop.
    Field {
        /// Its configuration.
        config: TrainConfig,
    },
    /// The inverse-encoder loop.
    Inverse {
        /// Its configuration.
        config: InverseTrainConfig,
    },
}

/// JSON header of a `.pck` file (everything but the weights).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CheckpointHeader {
    arch: NetArch,
    train_config: TrainProvenance,
    dataset_fingerprint: String,
    created_at: u64,
    t_range: (f64, f64),
    lipschitz_mu_t: Option<f64>,
}

impl CheckpointHeader {
    /// Semantic checks beyond what serde enforces. (Non-finite floats
    /// cannot arrive through JSON: there is no literal for them, and
    /// oversized number literals are parse errors.)
    fn validate(&self) -> Result<(), String> {
        if !(self.t_range.0 < self.t_range.1) {
            return Err(format!(
                "time range ({}, {}) is empty or reversed",
                self.t_range.0, self.t_range.1
            ));
        }
        Ok(())
    }
}

/// A trained model with its provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    /// Architecture and weights.
    pub params: Params,
    /// Which loop trained it, and how.
    pub train_config: TrainProvenance,
    /// Fingerprint of the training dataset ([`dataset_fingerprint`]).
    pub dataset_fingerprint: String,
    /// Creation time (see [`reproducible_timestamp`]).
    pub created_at: u64,
    /// Time range the model was trained over; estimates are clipped to it
    /// and predictions outside it are flagged as extrapolation.
    pub t_range: (f64, f64),
    /// Empirically measured bound on `‖∂mu/∂t‖` (field models only).
    pub lipschitz_mu_t: Option<f64>,
}

/// Serialize a checkpoint to its on-disk bytes: magic, version, JSON
/// header, then the raw little-endian weight block.
pub fn checkpoint_to_vec(ckpt: &Checkpoint) -> Vec<u8> {
    let header = CheckpointHeader {
        arch: ckpt.params.arch,
        train_config: ckpt.train_config.clone(),
        dataset_fingerprint: ckpt.dataset_fingerprint.clone(),
        created_at: ckpt.created_at,
        t_range: ckpt.t_range,
        lipschitz_mu_t: ckpt.lipschitz_mu_t,
    };
    let header_json = serde_json::to_vec(&header).expect("header serialization cannot fail");
    let mut buf = Vec::with_capacity(24 + header_json.len() + 8 * ckpt.params.w.len());
    let out = &mut buf;
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_json);
    out.extend_from_slice(&(ckpt.params.w.len() as u64).to_le_bytes());
    for w in &ckpt.params.w {
        out.extend_from_slice(&w.to_bits().to_le_bytes());
    }
    buf
}

/// Write a checkpoint atomically.
pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<(), IoError> {
    atomic_write(path, &checkpoint_to_vec(ckpt))
}

/// Read a fixed-size block, reporting truncation as a format error rather
/// than a bare I/O failure.
fn read_exact_or_format(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<(), IoError> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            IoError::from(FormatError { detail: format!("truncated file while reading {what}"), line: None })
        } else {
            IoError::Io(e)
        }
    })
}

/// Deserialize and validate a checkpoint. Weights are restored bit-exactly;
/// the declared weight count must match the declared architecture, and the
/// file must end exactly after the weight block.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, IoError> {
    let file = std::fs::File::open(path)?;
    load_checkpoint_from(BufReader::new(file))
}

/// [`load_checkpoint`] over any reader (in-memory bytes included).
pub fn load_checkpoint_from<R: Read>(mut r: R) -> Result<Checkpoint, IoError> {
    let mut magic = [0u8; 4];
    read_exact_or_format(&mut r, &mut magic, "the magic bytes")?;
    if magic != CHECKPOINT_MAGIC {
        return Err(FormatError { detail: format!("bad magic {magic:?}"), line: None }.into());
    }
    let mut version = [0u8; 4];
    read_exact_or_format(&mut r, &mut version, "the format version")?;
    let version = u32::from_le_bytes(version);
    if version != CHECKPOINT_VERSION {
        return Err(VersionError { found: version, supported: CHECKPOINT_VERSION }.into());
    }

    let mut len = [0u8; 8];
    read_exact_or_format(&mut r, &mut len, "the header length")?;
    let header_len = u64::from_le_bytes(len);
    if header_len > MAX_HEADER_BYTES {
        return Err(FormatError {
            detail: format!("header claims {header_len} bytes, over the {MAX_HEADER_BYTES}-byte cap"),
            line: None,
        }
        .into());
    }
    let mut header_json = vec![0u8; header_len as usize];
    read_exact_or_format(&mut r, &mut header_json, "the header")?;
    let header: CheckpointHeader = serde_json::from_slice(&header_json).map_err(|e| {
        use serde_json::error::Category;
        match e.classify() {
            Category::Data => IoError::from(SchemaError { detail: e.to_string(), line: None }),
            _ => IoError::from(FormatError { detail: e.to_string(), line: None }),
        }
    })?;

    if let Err(detail) = header.arch.validate() {
        return Err(SchemaError { detail, line: None }.into());
    }
    if let Err(detail) = header.validate() {
        return Err(SchemaError { detail, line: None }.into());
    }

    read_exact_or_format(&mut r, &mut len, "the weight count")?;
    let n = u64::from_le_bytes(len);
    if n > MAX_WEIGHTS {
        return Err(FormatError {
            detail: format!("weight count {n} is over the {MAX_WEIGHTS} cap"),
            line: None,
        }
        .into());
    }
    let expected = header.arch.n_weights() as u64;
    if n != expected {
        return Err(SchemaError {
            detail: format!("weight count {n} does not match the declared architecture's {expected}"),
            line: None,
        }
        .into());
    }
    // Grow as bytes actually arrive rather than trusting the declared
    // count with one huge up-front allocation.
    let mut w = Vec::with_capacity((n as usize).min(1 << 20));
    let mut chunk = [0u8; 8];
    for _ in 0..n {
        read_exact_or_format(&mut r, &mut chunk, "the weight block")?;
        w.push(f64::from_bits(u64::from_le_bytes(chunk)));
    }
    // Strict end: trailing bytes mean the file is not what it claims.
    let mut probe = [0u8; 1];
    match r.read(&mut probe)? {
        0 => {}
        _ => {
            return Err(FormatError { detail: "trailing data after the weight block".into(), line: None }.into())
        }
    }

    Ok(Checkpoint {
        params: Params { arch: header.arch, w },
        train_config: header.train_config,
        dataset_fingerprint: header.dataset_fingerprint,
        created_at: header.created_at,
        t_range: header.t_range,
        lipschitz_mu_t: header.lipschitz_mu_t,
    })
}

// ── tests ────────────────────────────────────────────────────────────────
