//! Evaluation kit: rate/distortion metrics, recording ingestion and block
//! segmentation, and checkpoint persistence.

use crate::config::ModelConfig;
use crate::decoder::DecoderParams;
use crate::encoder::{EncoderParams, Frame};
use crate::error::{CheckpointError, CodecError, Result};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::Path;

/// Rate and distortion figures for one recording.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsRecord {
    /// Compression ratio raw_bytes / compressed_bytes.
    pub cr: f64,
    /// Percent root-mean-square difference.
    pub prd: f64,
    /// Mean-normalized variant of PRD.
    pub prdn: f64,
    /// Quality score CR / PRD; infinite when the reconstruction is exact.
    pub qs: f64,
    pub raw_bytes: u64,
    pub compressed_bytes: u64,
}

impl MetricsRecord {
    pub fn csv_header() -> &'static str {
        "recording,cr,prd,prdn,qs,raw_bytes,compressed_bytes"
    }

    pub fn csv_row(&self, id: &str) -> String {
        let mut row = String::new();
        let _ = write!(
            row,
            "{id},{},{},{},{},{},{}",
            self.cr, self.prd, self.prdn, self.qs, self.raw_bytes, self.compressed_bytes
        );
        row
    }
}

/// Arithmetic means of per-recording metrics, the reduction used for summary
/// tables. Pooled metrics over concatenated signals are a different quantity;
/// use [`compute_metrics`] on the pooled data for those.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsAverages {
    pub cr: f64,
    pub prd: f64,
    pub prdn: f64,
    pub qs: f64,
}

pub fn average_metrics(records: &[MetricsRecord]) -> Option<MetricsAverages> {
    if records.is_empty() {
        return None;
    }
    let n = records.len() as f64;
    Some(MetricsAverages {
        cr: records.iter().map(|r| r.cr).sum::<f64>() / n,
        prd: records.iter().map(|r| r.prd).sum::<f64>() / n,
        prdn: records.iter().map(|r| r.prdn).sum::<f64>() / n,
        qs: records.iter().map(|r| r.qs).sum::<f64>() / n,
    })
}

/// A multi-channel signal: equal-length named channels at a fixed rate.
#[derive(Debug, Clone, PartialEq)]
pub struct Recording {
    pub channel_names: Vec<String>,
    pub channels: Vec<Vec<f64>>,
    pub sample_rate: f64,
}

impl Recording {
    pub fn new(
        channel_names: Vec<String>,
        channels: Vec<Vec<f64>>,
        sample_rate: f64,
    ) -> Result<Self> {
        let rec = Recording {
            channel_names,
            channels,
            sample_rate,
        };
        rec.validate()?;
        Ok(rec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.channel_names.len() != self.channels.len() {
            return Err(CodecError::Ingestion(format!(
                "{} channel names for {} channels",
                self.channel_names.len(),
                self.channels.len()
            )));
        }
        let len = self.samples();
        for (name, ch) in self.channel_names.iter().zip(&self.channels) {
            if ch.len() != len {
                return Err(CodecError::Ingestion(format!(
                    "channel `{name}` has {} samples, expected {len}",
                    ch.len()
                )));
            }
            if ch.iter().any(|v| !v.is_finite()) {
                return Err(CodecError::Ingestion(format!(
                    "channel `{name}` contains a non-finite value"
                )));
            }
        }
        Ok(())
    }

    pub fn channel_count(&self) -> usize {
        self.channels.len()
    }

    pub fn samples(&self) -> usize {
        self.channels.first().map_or(0, Vec::len)
    }

    /// Total sample count across channels.
    pub fn total_samples(&self) -> usize {
        self.channel_count() * self.samples()
    }
}

/// Standardize each channel to zero mean and unit variance. Off by default in
/// every pipeline; exposed for experimentation.
pub fn standardize_recording(rec: &Recording) -> Recording {
    let channels = rec
        .channels
        .iter()
        .map(|ch| {
            if ch.is_empty() {
                return ch.clone();
            }
            let n = ch.len() as f64;
            let mean = ch.iter().sum::<f64>() / n;
            let var = ch.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let sd = var.sqrt();
            if sd == 0.0 {
                ch.iter().map(|v| v - mean).collect()
            } else {
                ch.iter().map(|v| (v - mean) / sd).collect()
            }
        })
        .collect();
    Recording {
        channel_names: rec.channel_names.clone(),
        channels,
        sample_rate: rec.sample_rate,
    }
}

/// Pooled rate/distortion metrics: sums run over all channels and samples of
/// the recording pair.
pub fn compute_metrics(
    original: &Recording,
    reconstructed: &Recording,
    raw_bytes: u64,
    compressed_bytes: u64,
) -> Result<MetricsRecord> {
    if original.channel_count() != reconstructed.channel_count()
        || original.samples() != reconstructed.samples()
    {
        return Err(CodecError::InvalidInput(format!(
            "original is {}x{} but reconstruction is {}x{}",
            original.channel_count(),
            original.samples(),
            reconstructed.channel_count(),
            reconstructed.samples()
        )));
    }
    if compressed_bytes == 0 {
        return Err(CodecError::InvalidInput(
            "compressed byte count must be positive".into(),
        ));
    }
    let total = original.total_samples();
    if total == 0 {
        return Err(CodecError::InvalidInput("empty recording".into()));
    }

    let mut err_sq = 0.0;
    let mut orig_sq = 0.0;
    let mut orig_sum = 0.0;
    for (o_ch, r_ch) in original.channels.iter().zip(&reconstructed.channels) {
        for (o, r) in o_ch.iter().zip(r_ch) {
            err_sq += (o - r) * (o - r);
            orig_sq += o * o;
            orig_sum += o;
        }
    }
    if orig_sq == 0.0 {
        return Err(CodecError::InvalidInput(
            "degenerate signal: original is identically zero, PRD undefined".into(),
        ));
    }
    let mean = orig_sum / total as f64;
    let mut centered_sq = 0.0;
    for o_ch in &original.channels {
        for o in o_ch {
            centered_sq += (o - mean) * (o - mean);
        }
    }
    if centered_sq == 0.0 {
        return Err(CodecError::InvalidInput(
            "degenerate signal: original has zero variance, PRDN undefined".into(),
        ));
    }

    let prd = 100.0 * (err_sq / orig_sq).sqrt();
    let prdn = 100.0 * (err_sq / centered_sq).sqrt();
    let cr = raw_bytes as f64 / compressed_bytes as f64;
    let qs = if prd > 0.0 { cr / prd } else { f64::INFINITY };
    Ok(MetricsRecord {
        cr,
        prd,
        prdn,
        qs,
        raw_bytes,
        compressed_bytes,
    })
}

/// Supported on-disk recording formats.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RecordingFormat {
    /// Text file with a channel-name header row; one sample per row.
    Csv,
    /// Raw little-endian binary described by a JSON sidecar manifest at
    /// `<path>.manifest`.
    Binary,
}

impl RecordingFormat {
    /// Infer the format from a file extension; binary unless `.csv`.
    pub fn from_path(path: &Path) -> RecordingFormat {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("csv") => RecordingFormat::Csv,
            _ => RecordingFormat::Binary,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct BinaryManifest {
    channels: usize,
    samples: usize,
    dtype: String,
    sample_rate: f64,
    #[serde(default)]
    channel_names: Vec<String>,
}

fn manifest_path(path: &Path) -> std::path::PathBuf {
    let mut os = path.as_os_str().to_os_string();
    os.push(".manifest");
    os.into()
}

pub fn load_recording(path: &Path, format: RecordingFormat) -> Result<Recording> {
    match format {
        RecordingFormat::Csv => load_recording_csv(path),
        RecordingFormat::Binary => load_recording_binary(path),
    }
}

fn load_recording_csv(path: &Path) -> Result<Recording> {
    let text = fs::read_to_string(path)
        .map_err(|e| CodecError::Ingestion(format!("{}: {e}", path.display())))?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| CodecError::Ingestion(format!("{}: empty file", path.display())))?;
    let names: Vec<String> = header.split(',').map(|s| s.trim().to_string()).collect();
    if names.is_empty() || names.iter().any(String::is_empty) {
        return Err(CodecError::Ingestion(format!(
            "{}: malformed channel-name header",
            path.display()
        )));
    }
    let mut channels: Vec<Vec<f64>> = vec![Vec::new(); names.len()];
    for (lineno, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != names.len() {
            return Err(CodecError::Ingestion(format!(
                "{}:{}: {} cells, expected {}",
                path.display(),
                lineno + 2,
                cells.len(),
                names.len()
            )));
        }
        for (ch, cell) in channels.iter_mut().zip(&cells) {
            let value: f64 = cell.trim().parse().map_err(|_| {
                CodecError::Ingestion(format!(
                    "{}:{}: cannot parse `{}` as a number",
                    path.display(),
                    lineno + 2,
                    cell.trim()
                ))
            })?;
            if !value.is_finite() {
                return Err(CodecError::Ingestion(format!(
                    "{}:{}: non-finite value",
                    path.display(),
                    lineno + 2
                )));
            }
            ch.push(value);
        }
    }
    Recording::new(names, channels, 0.0)
}

fn load_recording_binary(path: &Path) -> Result<Recording> {
    let mpath = manifest_path(path);
    let mtext = fs::read_to_string(&mpath)
        .map_err(|e| CodecError::Ingestion(format!("{}: {e}", mpath.display())))?;
    let manifest: BinaryManifest = serde_json::from_str(&mtext)
        .map_err(|e| CodecError::Ingestion(format!("{}: {e}", mpath.display())))?;
    let elem = match manifest.dtype.as_str() {
        "f32" => 4,
        "f64" => 8,
        other => {
            return Err(CodecError::Ingestion(format!(
                "{}: unsupported dtype `{other}`",
                mpath.display()
            )))
        }
    };
    let bytes =
        fs::read(path).map_err(|e| CodecError::Ingestion(format!("{}: {e}", path.display())))?;
    let expected = manifest.channels * manifest.samples * elem;
    if bytes.len() != expected {
        return Err(CodecError::Ingestion(format!(
            "{}: {} bytes on disk, manifest requires {expected}",
            path.display(),
            bytes.len()
        )));
    }
    let mut channels = vec![Vec::with_capacity(manifest.samples); manifest.channels];
    // row-major: one row per sample, one column per channel
    for s in 0..manifest.samples {
        for (c, ch) in channels.iter_mut().enumerate() {
            let off = (s * manifest.channels + c) * elem;
            let v = if elem == 4 {
                f32::from_le_bytes(bytes[off..off + 4].try_into().expect("4 bytes")) as f64
            } else {
                f64::from_le_bytes(bytes[off..off + 8].try_into().expect("8 bytes"))
            };
            if !v.is_finite() {
                return Err(CodecError::Ingestion(format!(
                    "{}: non-finite value at sample {s}, channel {c}",
                    path.display()
                )));
            }
            ch.push(v);
        }
    }
    let names = if manifest.channel_names.len() == manifest.channels {
        manifest.channel_names
    } else {
        (0..manifest.channels).map(|i| format!("ch{i}")).collect()
    };
    Recording::new(names, channels, manifest.sample_rate)
}

pub fn save_recording(path: &Path, rec: &Recording, format: RecordingFormat) -> Result<()> {
    match format {
        RecordingFormat::Csv => save_recording_csv(path, rec),
        RecordingFormat::Binary => save_recording_binary(path, rec),
    }
}

fn save_recording_csv(path: &Path, rec: &Recording) -> Result<()> {
    let mut out = String::new();
    out.push_str(&rec.channel_names.join(","));
    out.push('\n');
    for s in 0..rec.samples() {
        for (c, ch) in rec.channels.iter().enumerate() {
            if c > 0 {
                out.push(',');
            }
            let _ = write!(out, "{}", ch[s]);
        }
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

fn save_recording_binary(path: &Path, rec: &Recording) -> Result<()> {
    let manifest = BinaryManifest {
        channels: rec.channel_count(),
        samples: rec.samples(),
        dtype: "f64".into(),
        sample_rate: rec.sample_rate,
        channel_names: rec.channel_names.clone(),
    };
    let mtext = serde_json::to_string_pretty(&manifest)
        .map_err(|e| CodecError::Ingestion(e.to_string()))?;
    fs::write(manifest_path(path), mtext)?;
    let mut bytes = Vec::with_capacity(rec.total_samples() * 8);
    for s in 0..rec.samples() {
        for ch in &rec.channels {
            bytes.extend_from_slice(&ch[s].to_le_bytes());
        }
    }
    fs::write(path, bytes)?;
    Ok(())
}

/// Split a recording into non-overlapping C x L frames aligned across
/// channels. A trailing remainder shorter than one block is dropped.
pub fn segment_frames(rec: &Recording, block_len: usize) -> Result<Vec<Frame>> {
    if block_len == 0 {
        return Err(CodecError::InvalidInput(
            "block length must be at least 1".into(),
        ));
    }
    rec.validate()?;
    let whole = rec.samples() / block_len;
    let mut frames = Vec::with_capacity(whole);
    for k in 0..whole {
        let mut frame = Frame::new(rec.channel_count(), block_len);
        for (c, ch) in rec.channels.iter().enumerate() {
            frame
                .row_mut(c)
                .copy_from_slice(&ch[k * block_len..(k + 1) * block_len]);
        }
        frames.push(frame);
    }
    Ok(frames)
}

/// Concatenate frames back into a recording; the inverse of
/// [`segment_frames`] up to the dropped remainder.
pub fn reassemble_frames(
    frames: &[Frame],
    channel_names: Option<Vec<String>>,
    sample_rate: f64,
) -> Result<Recording> {
    let channels = frames.first().map_or(0, Frame::channels);
    let block_len = frames.first().map_or(0, Frame::block_len);
    let mut data = vec![Vec::with_capacity(frames.len() * block_len); channels];
    for frame in frames {
        if frame.channels() != channels || frame.block_len() != block_len {
            return Err(CodecError::InvalidInput(
                "frames disagree on shape during reassembly".into(),
            ));
        }
        for (c, ch) in data.iter_mut().enumerate() {
            ch.extend_from_slice(frame.row(c));
        }
    }
    let names = channel_names.unwrap_or_else(|| (0..channels).map(|i| format!("ch{i}")).collect());
    Recording::new(names, data, sample_rate)
}

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"AVCK";
pub const CHECKPOINT_VERSION: u8 = 1;
const CHECKPOINT_MANIFEST_FORMAT: u32 = 1;

/// Trained parameters plus the hyperparameters they were trained with.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub lambda: f64,
    pub epsilon: f64,
    pub rho: f64,
    pub tau: i8,
    pub omega: f64,
    pub encoder: EncoderParams,
    pub decoder: DecoderParams,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestHyper {
    channels: usize,
    block_len: usize,
    subbands: usize,
    heads: usize,
    lambda: f64,
    epsilon: f64,
    rho: f64,
    tau: i8,
    omega: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestTensor {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointManifest {
    format: u32,
    hyper: ManifestHyper,
    tensors: Vec<ManifestTensor>,
}

impl Checkpoint {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.encoder
            .validate(&self.model)
            .map_err(|e| CheckpointError::ArchitectureMismatch(e.to_string()))?;
        self.decoder
            .validate(&self.model)
            .map_err(|e| CheckpointError::ArchitectureMismatch(e.to_string()))?;
        Ok(())
    }

    /// Require the stored architecture to match an expected one.
    pub fn ensure_matches(&self, expected: &ModelConfig) -> Result<()> {
        if self.model != *expected {
            return Err(CheckpointError::ArchitectureMismatch(format!(
                "checkpoint is {:?}, session expects {:?}",
                self.model, expected
            ))
            .into());
        }
        Ok(())
    }

    /// Serialize as a container: magic, version, JSON manifest, then raw
    /// little-endian f64 tensor data in manifest order.
    pub fn save(&self, path: &Path) -> Result<()> {
        self.validate()?;
        let mut tensors: Vec<(&'static str, &Tensor)> = self.encoder.named_tensors();
        tensors.extend(self.decoder.named_tensors());
        let manifest = CheckpointManifest {
            format: CHECKPOINT_MANIFEST_FORMAT,
            hyper: ManifestHyper {
                channels: self.model.channels,
                block_len: self.model.block_len,
                subbands: self.model.subbands,
                heads: self.model.heads,
                lambda: self.lambda,
                epsilon: self.epsilon,
                rho: self.rho,
                tau: self.tau,
                omega: self.omega,
            },
            tensors: tensors
                .iter()
                .map(|(name, t)| ManifestTensor {
                    name: (*name).to_string(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
        };
        let mjson =
            serde_json::to_vec(&manifest).map_err(|e| CheckpointError::Manifest(e.to_string()))?;

        let mut file = fs::File::create(path)?;
        file.write_all(&CHECKPOINT_MAGIC)?;
        file.write_all(&[CHECKPOINT_VERSION])?;
        file.write_all(&(mjson.len() as u32).to_le_bytes())?;
        file.write_all(&mjson)?;
        for (_, t) in tensors {
            for v in t.data() {
                file.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        if bytes.len() < 9 {
            return Err(CheckpointError::Truncated {
                expected: 9,
                actual: bytes.len(),
            }
            .into());
        }
        if bytes[0..4] != CHECKPOINT_MAGIC {
            return Err(CheckpointError::BadMagic.into());
        }
        if bytes[4] != CHECKPOINT_VERSION {
            return Err(CheckpointError::BadVersion(bytes[4]).into());
        }
        let mlen = u32::from_le_bytes([bytes[5], bytes[6], bytes[7], bytes[8]]) as usize;
        let body = 9 + mlen;
        if bytes.len() < body {
            return Err(CheckpointError::Truncated {
                expected: body,
                actual: bytes.len(),
            }
            .into());
        }
        let manifest: CheckpointManifest = serde_json::from_slice(&bytes[9..body])
            .map_err(|e| CheckpointError::Manifest(e.to_string()))?;
        if manifest.format != CHECKPOINT_MANIFEST_FORMAT {
            return Err(CheckpointError::Manifest(format!(
                "unsupported manifest format {}",
                manifest.format
            ))
            .into());
        }

        let declared: usize = manifest
            .tensors
            .iter()
            .map(|t| t.shape.iter().product::<usize>() * 8)
            .sum();
        if bytes.len() != body + declared {
            return Err(CheckpointError::Truncated {
                expected: body + declared,
                actual: bytes.len(),
            }
            .into());
        }

        let mut offset = body;
        let mut read_tensor = |entry: &ManifestTensor| -> Tensor {
            let count: usize = entry.shape.iter().product();
            let mut data = Vec::with_capacity(count);
            for _ in 0..count {
                data.push(f64::from_le_bytes(
                    bytes[offset..offset + 8].try_into().expect("8 bytes"),
                ));
                offset += 8;
            }
            Tensor::from_vec(&entry.shape, data).expect("shape matches count")
        };

        let mut by_name = std::collections::BTreeMap::new();
        for entry in &manifest.tensors {
            let t = read_tensor(entry);
            if by_name.insert(entry.name.clone(), t).is_some() {
                return Err(
                    CheckpointError::Manifest(format!("duplicate tensor `{}`", entry.name)).into(),
                );
            }
        }
        let mut take = |name: &str| -> Result<Tensor> {
            by_name
                .remove(name)
                .ok_or_else(|| CheckpointError::Manifest(format!("missing tensor `{name}`")).into())
        };

        let model = ModelConfig::new(
            manifest.hyper.channels,
            manifest.hyper.block_len,
            manifest.hyper.subbands,
            manifest.hyper.heads,
        )?;
        let encoder = EncoderParams {
            lin_w: take("enc.lin_w")?,
            lin_b: take("enc.lin_b")?,
            thresholds: take("enc.thresholds")?,
            scales: take("enc.scales")?,
            fuse_w: take("enc.fuse_w")?,
        };
        let decoder = DecoderParams {
            fb_f: take("dec.fb_f")?,
            fb_g: take("dec.fb_g")?,
            mha: crate::diffnet::MhaParams {
                wq: take("dec.mha.wq")?,
                wk: take("dec.mha.wk")?,
                wv: take("dec.mha.wv")?,
                bq: take("dec.mha.bq")?,
                bk: take("dec.mha.bk")?,
                bv: take("dec.mha.bv")?,
                wo: take("dec.mha.wo")?,
            },
            post_w: take("dec.post_w")?,
            post_b: take("dec.post_b")?,
            dec_t: take("dec.dec_t")?,
            out_w: take("dec.out_w")?,
            out_b: take("dec.out_b")?,
        };
        if let Some(extra) = by_name.keys().next() {
            return Err(CheckpointError::Manifest(format!("unknown tensor `{extra}`")).into());
        }

        let ckpt = Checkpoint {
            model,
            lambda: manifest.hyper.lambda,
            epsilon: manifest.hyper.epsilon,
            rho: manifest.hyper.rho,
            tau: manifest.hyper.tau,
            omega: manifest.hyper.omega,
            encoder,
            decoder,
        };
        ckpt.encoder
            .validate(&ckpt.model)
            .map_err(|e| CheckpointError::ArchitectureMismatch(e.to_string()))?;
        ckpt.decoder
            .validate(&ckpt.model)
            .map_err(|e| CheckpointError::ArchitectureMismatch(e.to_string()))?;
        Ok(ckpt)
    }
}
