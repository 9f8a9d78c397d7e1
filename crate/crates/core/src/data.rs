//! Embedding files, label manifests and the synthetic dataset generator.
//!
//! Embedding file layout (little-endian):
//!
//! ```text
//! "HAFE"        4 bytes magic
//! version       u32 (currently 1)
//! rows          u32
//! cols          u32
//! id_len        u16, then id_len bytes of UTF-8 id
//! values        rows x cols f32, row-major
//! ```
//!
//! Values are widened to `f64` on load and narrowed to `f32` on save.

use std::collections::HashSet;
use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::tensor::FrameMatrix;

pub const EMBEDDING_MAGIC: &[u8; 4] = b"HAFE";
pub const EMBEDDING_VERSION: u32 = 1;
pub const EMBEDDING_DIM: usize = 1024;
/// Frame rate of the upstream embedding extractor, 3200 frames = 64 s.
pub const FRAME_RATE_HZ: f64 = 50.0;
pub const MANIFEST_FILE: &str = "manifest.csv";
pub const EMBEDDING_EXT: &str = "hafe";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingRecord {
    pub id: String,
    pub features: FrameMatrix,
    /// 0 = healthy control, 1 = AD.
    pub label: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub records: Vec<EmbeddingRecord>,
    pub split: Split,
}

impl Dataset {
    pub fn new(records: Vec<EmbeddingRecord>, split: Split) -> Result<Self> {
        let mut ids = HashSet::new();
        for r in &records {
            if r.id.is_empty() {
                return Err(Error::Argument("record id must be non-empty".into()));
            }
            if !ids.insert(r.id.as_str()) {
                return Err(Error::Argument(format!("duplicate record id `{}`", r.id)));
            }
            if split == Split::Train && r.label.is_none() {
                return Err(Error::Argument(format!(
                    "training record `{}` has no label",
                    r.id
                )));
            }
        }
        Ok(Self { records, split })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Pads or truncates every record to `target_len` frames.
    pub fn fixed_length(mut self, target_len: usize) -> Self {
        for r in &mut self.records {
            r.features = pad_or_truncate(&r.features, target_len);
        }
        self
    }
}

fn format_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

fn corrupt(path: &Path, reason: impl Into<String>) -> Error {
    Error::Corruption {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

pub fn encode_embedding(record: &EmbeddingRecord) -> Result<Vec<u8>> {
    let f = &record.features;
    if record.id.len() > u16::MAX as usize {
        return Err(Error::Argument(format!("id `{}` is too long", record.id)));
    }
    let mut out = Vec::with_capacity(18 + record.id.len() + f.len() * 4);
    out.extend_from_slice(EMBEDDING_MAGIC);
    out.extend_from_slice(&EMBEDDING_VERSION.to_le_bytes());
    out.extend_from_slice(&(f.rows() as u32).to_le_bytes());
    out.extend_from_slice(&(f.cols() as u32).to_le_bytes());
    out.extend_from_slice(&(record.id.len() as u16).to_le_bytes());
    out.extend_from_slice(record.id.as_bytes());
    for &v in f.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(out)
}

/// Parses an embedding file image. `path` only labels errors.
pub fn decode_embedding(bytes: &[u8], path: &Path, expected_cols: usize) -> Result<EmbeddingRecord> {
    let header = |n: usize, what: &str| -> Result<&[u8]> {
        bytes
            .get(..n)
            .ok_or_else(|| corrupt(path, format!("truncated header while reading {what}")))
    };
    if header(4, "magic")? != EMBEDDING_MAGIC {
        return Err(format_err(
            path,
            format!(
                "bad magic {:?}, expected \"HAFE\"",
                String::from_utf8_lossy(&bytes[..4])
            ),
        ));
    }
    let u32_at = |at: usize, what: &str| -> Result<u32> {
        let h = header(at + 4, what)?;
        Ok(u32::from_le_bytes(h[at..at + 4].try_into().unwrap()))
    };
    let version = u32_at(4, "version")?;
    if version != EMBEDDING_VERSION {
        return Err(format_err(path, format!("unsupported version {version}")));
    }
    let rows = u32_at(8, "rows")? as usize;
    let cols = u32_at(12, "cols")? as usize;
    let h = header(18, "id length")?;
    let id_len = u16::from_le_bytes([h[16], h[17]]) as usize;
    let id_bytes = header(18 + id_len, "id")?;
    let id = std::str::from_utf8(&id_bytes[18..])
        .map_err(|_| format_err(path, "id is not valid UTF-8"))?
        .to_string();
    if rows == 0 || cols == 0 {
        return Err(format_err(path, format!("empty matrix [{rows}x{cols}]")));
    }
    if id.is_empty() {
        return Err(format_err(path, "empty record id"));
    }
    if cols != expected_cols {
        return Err(Error::Dimension {
            path: path.to_path_buf(),
            expected: expected_cols,
            found: cols,
        });
    }
    let payload = &bytes[18 + id_len..];
    let need = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| corrupt(path, format!("implausible size [{rows}x{cols}]")))?;
    if payload.len() < need {
        return Err(corrupt(
            path,
            format!("payload has {} bytes, expected {need}", payload.len()),
        ));
    }
    if payload.len() > need {
        return Err(corrupt(path, format!("{} trailing bytes", payload.len() - need)));
    }
    let mut values = Vec::with_capacity(rows * cols);
    for c in payload.chunks_exact(4) {
        let v = f32::from_le_bytes(c.try_into().unwrap());
        if !v.is_finite() {
            return Err(corrupt(path, "non-finite feature value"));
        }
        values.push(v as f64);
    }
    Ok(EmbeddingRecord {
        id,
        features: FrameMatrix::from_vec(rows, cols, values)?,
        label: None,
    })
}

pub fn save_embedding(record: &EmbeddingRecord, path: &Path) -> Result<()> {
    std::fs::write(path, encode_embedding(record)?).map_err(|e| Error::io(path, e))
}

pub fn load_embedding(path: &Path, expected_cols: usize) -> Result<EmbeddingRecord> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_embedding(&bytes, path, expected_cols)
}

/// Keeps the first `target_len` frames, or appends zero frames.
pub fn pad_or_truncate(x: &FrameMatrix, target_len: usize) -> FrameMatrix {
    assert!(target_len >= 1);
    if x.rows() == target_len {
        return x.clone();
    }
    let mut out = FrameMatrix::zeros(target_len, x.cols());
    let keep = x.rows().min(target_len);
    out.data_mut()[..keep * x.cols()].copy_from_slice(&x.data()[..keep * x.cols()]);
    out
}

/// Parses `id,label` lines.
pub fn parse_manifest(text: &str, path: &Path) -> Result<Vec<(String, usize)>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (id, label) = line
            .split_once(',')
            .ok_or_else(|| format_err(path, format!("line {}: expected `id,label`", i + 1)))?;
        let label = label
            .trim()
            .parse()
            .map_err(|_| format_err(path, format!("line {}: bad label `{label}`", i + 1)))?;
        out.push((id.trim().to_string(), label));
    }
    Ok(out)
}

pub fn write_manifest(entries: &[(String, usize)]) -> String {
    entries.iter().map(|(id, l)| format!("{id},{l}\n")).collect()
}

/// Loads `manifest.csv` and one `<id>.hafe` per entry from `dir`.
pub fn load_dataset_dir(dir: &Path, split: Split, expected_cols: usize) -> Result<Dataset> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let entries = parse_manifest(&text, &manifest_path)?;
    let mut records = Vec::with_capacity(entries.len());
    for (id, label) in entries {
        let path = embedding_path(dir, &id);
        let mut rec = load_embedding(&path, expected_cols)?;
        if rec.id != id {
            return Err(format_err(&path, format!("file id `{}` does not match manifest id `{id}`", rec.id)));
        }
        rec.label = Some(label);
        records.push(rec);
    }
    Dataset::new(records, split)
}

pub fn embedding_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(format!("{id}.{EMBEDDING_EXT}"))
}

/// Writes the manifest and every record of `ds` into `dir`.
pub fn save_dataset_dir(ds: &Dataset, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(ds.len());
    for r in &ds.records {
        save_embedding(r, &embedding_path(dir, &r.id))?;
        entries.push((r.id.clone(), r.label.unwrap_or(0)));
    }
    let path = dir.join(MANIFEST_FILE);
    std::fs::write(&path, write_manifest(&entries)).map_err(|e| Error::io(&path, e))
}

/// Parameters of the synthetic generator.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SynthSpec {
    pub n_per_class: usize,
    pub seed: u64,
    /// Cue amplitude in (0, 1].
    pub difficulty: f64,
    pub input_dim: usize,
    /// Generate at most this many frames per record. Rows are drawn from
    /// independent counter streams, so capping equals generating the full
    /// record and truncating.
    pub max_frames: Option<usize>,
}

impl SynthSpec {
    pub fn new(n_per_class: usize, seed: u64, difficulty: f64) -> Self {
        Self {
            n_per_class,
            seed,
            difficulty,
            input_dim: EMBEDDING_DIM,
            max_frames: None,
        }
    }
}

pub const SYNTH_MIN_FRAMES: usize = 800;
pub const SYNTH_MAX_FRAMES: usize = 3200;
pub const CUE_PERIOD: f64 = 400.0;
pub const CUE_CHANNELS: usize = 32;
/// Key of the stream that picks the cue channels; shared by every seed so
/// independently generated splits carry the same cue.
const CUE_CHANNEL_KEY: u64 = 0x4841_4646_4355_4531;
const META_STREAM: u64 = 0xFFFF_FFFF;

/// Channels carrying the class-1 drift for a given input width.
pub fn cue_channels(input_dim: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(CUE_CHANNEL_KEY);
    let mut ch = sample(&mut rng, input_dim, CUE_CHANNELS.min(input_dim)).into_vec();
    ch.sort_unstable();
    ch
}

/// Labeled noise sequences; class 1 adds a slow sinusoid of amplitude
/// `difficulty` and period [`CUE_PERIOD`] frames (random phase per record)
/// on the [`cue_channels`].
pub fn synthesize_dataset(spec: &SynthSpec) -> Result<Dataset> {
    if spec.n_per_class == 0 {
        return Err(Error::Argument("n_per_class must be at least 1".into()));
    }
    if !(spec.difficulty > 0.0 && spec.difficulty <= 1.0) {
        return Err(Error::Argument(format!(
            "difficulty must lie in (0, 1], got {}",
            spec.difficulty
        )));
    }
    if spec.input_dim == 0 {
        return Err(Error::Argument("input_dim must be at least 1".into()));
    }
    let cue = cue_channels(spec.input_dim);
    let mut records = Vec::with_capacity(2 * spec.n_per_class);
    for i in 0..2 * spec.n_per_class {
        let label = i % 2;
        let record_stream = (i as u64) << 32;
        let mut meta = ChaCha8Rng::seed_from_u64(spec.seed);
        meta.set_stream(record_stream | META_STREAM);
        let raw_len = meta.gen_range(SYNTH_MIN_FRAMES..=SYNTH_MAX_FRAMES);
        let phase = meta.gen_range(0.0..2.0 * PI);
        let frames = spec.max_frames.map_or(raw_len, |m| raw_len.min(m.max(1)));

        let mut features = FrameMatrix::zeros(frames, spec.input_dim);
        for t in 0..frames {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(record_stream | t as u64);
            let row = features.row_mut(t);
            for v in row.iter_mut() {
                *v = rng.sample(StandardNormal);
            }
            if label == 1 {
                let drift = spec.difficulty * (2.0 * PI * t as f64 / CUE_PERIOD + phase).sin();
                for &c in &cue {
                    row[c] += drift;
                }
            }
        }
        records.push(EmbeddingRecord {
            id: format!("synth-{}-{i:05}", spec.seed),
            features,
            label: Some(label),
        });
    }
    Dataset::new(records, Split::Train)
}

/// Energy of the cue-channel mean at the cue period, normalized so that a
/// pure sinusoid of amplitude `a` scores about `a^2`.
pub fn cue_band_energy(features: &FrameMatrix, cue: &[usize]) -> f64 {
    let n = features.rows();
    let (mut s, mut c) = (0.0, 0.0);
    for t in 0..n {
        let row = features.row(t);
        let m = cue.iter().map(|&ch| row[ch]).sum::<f64>() / cue.len() as f64;
        let w = 2.0 * PI * t as f64 / CUE_PERIOD;
        s += m * w.sin();
        c += m * w.cos();
    }
    4.0 * (s * s + c * c) / (n as f64 * n as f64)
}

/// The generator's own decision rule: class 1 when the band energy exceeds
/// half the squared cue amplitude.
pub fn cue_oracle_predict(features: &FrameMatrix, difficulty: f64) -> usize {
    let cue = cue_channels(features.cols());
    usize::from(cue_band_energy(features, &cue) > 0.5 * difficulty * difficulty)
}
