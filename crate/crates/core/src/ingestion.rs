//! Catalog construction from chunk filenames, embedding sidecar I/O and
//! synthetic pools.
//!
//! Chunk files are named `<node_id>_<YYYYMMDD>T<HHMMSS>Z.wav`; the timestamp is
//! the UTC start of the chunk.
//!
//! The binary sidecar is little-endian:
//!
//! ```text
//! magic       [u8; 4]  = b"ALEM"
//! version     u32      = 1
//! dim         u32      (> 0)
//! count       u64
//! class_count u32      (> 0)
//! count × {
//!     name_len u32, name [u8; name_len] (UTF-8 chunk filename)
//!     vector   [f32; dim]
//!     top1     u32      (< class_count)
//!     prob     f32      (in [0, 1])
//! }
//! ```

use std::io::{self, BufRead, Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use chrono::{Duration, NaiveDateTime, TimeZone, Utc};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::domain::{
    AudioId, AudioRecord, ClassId, DomainError, EmbeddingRecord, NodeId, Timestamp,
    DEFAULT_CHUNK_SECONDS,
};

pub const SIDECAR_MAGIC: [u8; 4] = *b"ALEM";
pub const SIDECAR_VERSION: u32 = 1;

const MAX_NAME_LEN: usize = 4096;
const TIMESTAMP_FORMAT: &str = "%Y%m%dT%H%M%S";

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("malformed chunk filename {0:?}")]
    MalformedFilename(String),
    #[error("bad sidecar magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported sidecar version {0}")]
    UnsupportedVersion(u32),
    #[error("invalid sidecar header: {0}")]
    InvalidHeader(&'static str),
    #[error("sidecar stream truncated")]
    TruncatedStream,
    #[error("record {index}: dimension {found}, expected {expected}")]
    DimensionMismatch {
        index: usize,
        found: usize,
        expected: usize,
    },
    #[error("record {index}: top-1 probability {prob} outside [0, 1]")]
    ProbOutOfRange { index: usize, prob: f32 },
    #[error("record {index}: class {class} not below class count {class_count}")]
    ClassOutOfRange {
        index: usize,
        class: u32,
        class_count: u32,
    },
    #[error("record {0}: filename is not valid UTF-8 or too long")]
    BadName(usize),
    #[error("manifest line {line}: {msg}")]
    Manifest { line: usize, msg: String },
    #[error(transparent)]
    Domain(#[from] DomainError),
    #[error(transparent)]
    Io(io::Error),
}

impl From<io::Error> for IngestError {
    fn from(e: io::Error) -> Self {
        if e.kind() == io::ErrorKind::UnexpectedEof {
            IngestError::TruncatedStream
        } else {
            IngestError::Io(e)
        }
    }
}

pub fn format_chunk_filename(node: &NodeId, at: Timestamp) -> String {
    format!("{}_{}Z.wav", node, at.format(TIMESTAMP_FORMAT))
}

pub fn parse_chunk_filename(filename: &str) -> Result<(NodeId, Timestamp), IngestError> {
    let bad = || IngestError::MalformedFilename(filename.to_owned());
    let stem = filename.strip_suffix("Z.wav").ok_or_else(bad)?;
    let (node, stamp) = stem.rsplit_once('_').ok_or_else(bad)?;
    if node.is_empty() || node.chars().any(|c| c.is_whitespace() || c == '/') {
        return Err(bad());
    }
    let b = stamp.as_bytes();
    let shape_ok = b.len() == 15
        && b[8] == b'T'
        && b[..8].iter().chain(&b[9..]).all(u8::is_ascii_digit)
        && &stamp[13..] < "60";
    if !shape_ok {
        return Err(bad());
    }
    let naive = NaiveDateTime::parse_from_str(stamp, TIMESTAMP_FORMAT).map_err(|_| bad())?;
    Ok((NodeId::from(node), Utc.from_utc_datetime(&naive)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SidecarHeader {
    pub magic: [u8; 4],
    pub version: u32,
    pub dim: u32,
    pub record_count: u64,
    pub class_count: u32,
}

impl SidecarHeader {
    pub fn new(dim: u32, record_count: u64, class_count: u32) -> Self {
        Self {
            magic: SIDECAR_MAGIC,
            version: SIDECAR_VERSION,
            dim,
            record_count,
            class_count,
        }
    }

    fn validate(&self) -> Result<(), IngestError> {
        if self.magic != SIDECAR_MAGIC {
            return Err(IngestError::BadMagic(self.magic));
        }
        if self.version != SIDECAR_VERSION {
            return Err(IngestError::UnsupportedVersion(self.version));
        }
        if self.dim == 0 {
            return Err(IngestError::InvalidHeader("dimension must be positive"));
        }
        if self.class_count == 0 {
            return Err(IngestError::InvalidHeader("class count must be positive"));
        }
        Ok(())
    }

    pub fn read<R: Read>(r: &mut R) -> Result<Self, IngestError> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if magic != SIDECAR_MAGIC {
            return Err(IngestError::BadMagic(magic));
        }
        let h = Self {
            magic,
            version: r.read_u32::<LittleEndian>()?,
            dim: r.read_u32::<LittleEndian>()?,
            record_count: r.read_u64::<LittleEndian>()?,
            class_count: r.read_u32::<LittleEndian>()?,
        };
        h.validate()?;
        Ok(h)
    }

    pub fn write<W: Write>(&self, w: &mut W) -> io::Result<()> {
        w.write_all(&self.magic)?;
        w.write_u32::<LittleEndian>(self.version)?;
        w.write_u32::<LittleEndian>(self.dim)?;
        w.write_u64::<LittleEndian>(self.record_count)?;
        w.write_u32::<LittleEndian>(self.class_count)
    }
}

fn check_record(
    index: usize,
    rec: &EmbeddingRecord,
    dim: usize,
    class_count: u32,
) -> Result<(), IngestError> {
    if rec.vector.len() != dim {
        return Err(IngestError::DimensionMismatch {
            index,
            found: rec.vector.len(),
            expected: dim,
        });
    }
    if !(0.0..=1.0).contains(&rec.top1_prob) {
        return Err(IngestError::ProbOutOfRange {
            index,
            prob: rec.top1_prob,
        });
    }
    if rec.top1_class.0 >= class_count {
        return Err(IngestError::ClassOutOfRange {
            index,
            class: rec.top1_class.0,
            class_count,
        });
    }
    Ok(())
}

/// Reads a whole sidecar stream.
pub fn load_sidecar<R: Read>(mut r: R) -> Result<(SidecarHeader, Vec<EmbeddingRecord>), IngestError> {
    let header = SidecarHeader::read(&mut r)?;
    let dim = header.dim as usize;
    // Cap the pre-allocation; the count is untrusted.
    let mut out = Vec::with_capacity(header.record_count.min(1 << 16) as usize);
    for index in 0..header.record_count as usize {
        let len = r.read_u32::<LittleEndian>()? as usize;
        if len > MAX_NAME_LEN {
            return Err(IngestError::BadName(index));
        }
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| IngestError::BadName(index))?;
        let mut vector = vec![0f32; dim];
        r.read_f32_into::<LittleEndian>(&mut vector)?;
        let top1_class = ClassId(r.read_u32::<LittleEndian>()?);
        let top1_prob = r.read_f32::<LittleEndian>()?;
        let rec = EmbeddingRecord {
            audio_id: AudioId(name),
            vector,
            top1_class,
            top1_prob,
        };
        check_record(index, &rec, dim, header.class_count)?;
        out.push(rec);
    }
    Ok((header, out))
}

/// Writes records under a header declaring `dim` and `class_count`; every
/// record is checked against both before anything is written.
pub fn write_sidecar<W: Write>(
    mut w: W,
    records: &[EmbeddingRecord],
    dim: u32,
    class_count: u32,
) -> Result<(), IngestError> {
    let header = SidecarHeader::new(dim, records.len() as u64, class_count);
    header.validate()?;
    for (i, rec) in records.iter().enumerate() {
        check_record(i, rec, dim as usize, class_count)?;
    }
    header.write(&mut w)?;
    for rec in records {
        let name = rec.audio_id.as_str().as_bytes();
        w.write_u32::<LittleEndian>(name.len() as u32)?;
        w.write_all(name)?;
        for &v in &rec.vector {
            w.write_f32::<LittleEndian>(v)?;
        }
        w.write_u32::<LittleEndian>(rec.top1_class.0)?;
        w.write_f32::<LittleEndian>(rec.top1_prob)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads the text manifest variant: one `filename,class_id,prob,v1,...,vd`
/// record per line. Blank lines are ignored.
pub fn load_manifest<R: BufRead>(r: R) -> Result<Vec<EmbeddingRecord>, IngestError> {
    let mut out: Vec<EmbeddingRecord> = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let err = |msg: &str| IngestError::Manifest {
            line: lineno,
            msg: msg.to_owned(),
        };
        let mut fields = line.split(',');
        let name = fields.next().filter(|s| !s.is_empty()).ok_or_else(|| err("missing filename"))?;
        let class: u32 = fields
            .next()
            .and_then(|s| s.trim().parse().ok())
            .ok_or_else(|| err("bad class id"))?;
        let prob: f32 = fields
            .next()
            .and_then(|s| s.trim().parse().ok())
            .ok_or_else(|| err("bad probability"))?;
        let vector = fields
            .map(|s| s.trim().parse::<f32>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|_| err("bad vector component"))?;
        if vector.is_empty() {
            return Err(err("empty vector"));
        }
        let rec = EmbeddingRecord::new(AudioId::from(name), vector, ClassId(class), prob)?;
        if let Some(first) = out.first() {
            if first.vector.len() != rec.vector.len() {
                return Err(IngestError::DimensionMismatch {
                    index: out.len(),
                    found: rec.vector.len(),
                    expected: first.vector.len(),
                });
            }
        }
        out.push(rec);
    }
    Ok(out)
}

pub fn write_manifest<W: Write>(mut w: W, records: &[EmbeddingRecord]) -> io::Result<()> {
    for rec in records {
        write!(w, "{},{},{}", rec.audio_id, rec.top1_class, rec.top1_prob)?;
        for v in &rec.vector {
            write!(w, ",{v}")?;
        }
        writeln!(w)?;
    }
    w.flush()
}

/// Metadata applied to audios whose only source of truth is the filename.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioDefaults {
    pub duration: f64,
    pub sampling_rate: u32,
    pub bits_per_sample: u16,
    pub channels: u16,
    pub path_id: i64,
}

impl Default for AudioDefaults {
    fn default() -> Self {
        Self {
            duration: DEFAULT_CHUNK_SECONDS,
            sampling_rate: 32_000,
            bits_per_sample: 16,
            channels: 1,
            path_id: 1,
        }
    }
}

pub fn audio_from_filename(filename: &str, defaults: &AudioDefaults) -> Result<AudioRecord, IngestError> {
    let (node_id, recorded_at) = parse_chunk_filename(filename)?;
    Ok(AudioRecord {
        audio_id: AudioId::from(filename),
        filename: filename.to_owned(),
        node_id,
        recorded_at,
        duration: defaults.duration,
        sampling_rate: defaults.sampling_rate,
        bits_per_sample: defaults.bits_per_sample,
        channels: defaults.channels,
        path_id: defaults.path_id,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub per_class: usize,
    pub dim: usize,
    pub spread: f64,
    pub seed: u64,
    pub node: NodeId,
    pub start: Timestamp,
}

impl SyntheticSpec {
    pub fn new(classes: usize, per_class: usize, dim: usize, spread: f64, seed: u64) -> Self {
        Self {
            classes,
            per_class,
            dim,
            spread,
            seed,
            node: NodeId::from("sim00"),
            start: Utc.with_ymd_and_hms(2024, 1, 8, 0, 0, 0).unwrap(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticPool {
    pub records: Vec<EmbeddingRecord>,
    pub true_labels: Vec<ClassId>,
    pub centers: Vec<Vec<f64>>,
}

/// Isotropic Gaussian clusters, one per class, with unit-variance centers.
///
/// Record `i` belongs to class `i mod K` and is named as a chunk recorded
/// `10·i` seconds after `spec.start`.
pub fn generate_synthetic(spec: &SyntheticSpec) -> SyntheticPool {
    assert!(spec.classes >= 1 && spec.per_class >= 1 && spec.dim >= 2);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let centers: Vec<Vec<f64>> = (0..spec.classes)
        .map(|_| (0..spec.dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
        .collect();
    let n = spec.classes * spec.per_class;
    let mut records = Vec::with_capacity(n);
    let mut true_labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % spec.classes;
        let x: Vec<f32> = centers[label]
            .iter()
            .map(|&c| (c + spec.spread * rng.sample::<f64, _>(StandardNormal)) as f32)
            .collect();
        let dists: Vec<f64> = centers
            .iter()
            .map(|c| {
                c.iter()
                    .zip(&x)
                    .map(|(a, &b)| (a - f64::from(b)).powi(2))
                    .sum::<f64>()
                    .sqrt()
            })
            .collect();
        let (top, dmin) = dists
            .iter()
            .copied()
            .enumerate()
            .fold((0, f64::INFINITY), |best, (j, d)| if d < best.1 { (j, d) } else { best });
        let z: f64 = dists.iter().map(|d| (dmin - d).exp()).sum();
        let at = spec.start + Duration::seconds(10 * i as i64);
        records.push(EmbeddingRecord {
            audio_id: AudioId(format_chunk_filename(&spec.node, at)),
            vector: x,
            top1_class: ClassId(top as u32),
            top1_prob: (1.0 / z) as f32,
        });
        true_labels.push(ClassId(label as u32));
    }
    SyntheticPool {
        records,
        true_labels,
        centers,
    }
}

/// Shorthand for [`generate_synthetic`] on the default node and start time.
pub fn generate_synthetic_pool(
    classes: usize,
    per_class: usize,
    dim: usize,
    spread: f64,
    seed: u64,
) -> (Vec<EmbeddingRecord>, Vec<ClassId>) {
    let pool = generate_synthetic(&SyntheticSpec::new(classes, per_class, dim, spread, seed));
    (pool.records, pool.true_labels)
}
