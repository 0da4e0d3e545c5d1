//! Binary containers for datasets and trained weights.
//!
//! Dataset file (all integers little-endian):
//!
//! ```text
//! "SATV" | version u16 | record count u32 | sample rate f64
//!        | samples per symbol u32 (0 = unknown) | first message id u64
//! record: transmitter id u32 | flags u8 | sample count u32
//!         | sample count x (I f32, Q f32)
//! ```
//!
//! Model file:
//!
//! ```text
//! "SATM" | version u16 | header length u32 | header (TOML, UTF-8)
//!        | blob count u32 | blob: length u32 | length x f32
//!        | config hash length u32 | config hash (UTF-8)
//! ```
//!
//! Decoding rejects truncated input and trailing bytes, so a successful
//! decode followed by an encode reproduces the input exactly.

use std::fs;
use std::path::Path;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::Message;
use crate::fingerprint::{EmbedderArch, EmbedderModel, FingerprintError};
use crate::grad::{GradError, Tensor};
use crate::signal::{IqWaveform, SignalError};
use crate::spoofing::{GanLog, GanModel, Generator, GeneratorArch, SpoofError};

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("bad magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported format version {0}")]
    Version(u16),
    #[error("file truncated at byte {0}")]
    Truncated(usize),
    #[error("{0} unexpected trailing bytes")]
    Trailing(usize),
    #[error("text field is not UTF-8")]
    Utf8,
    #[error("header: {0}")]
    Header(String),
    #[error("architecture mismatch: {0}")]
    Architecture(String),
    #[error("records disagree: {0}")]
    Inconsistent(String),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error(transparent)]
    Signal(#[from] SignalError),
    #[error(transparent)]
    Fingerprint(#[from] FingerprintError),
    #[error(transparent)]
    Grad(#[from] GradError),
}

pub type Result<T> = std::result::Result<T, FormatError>;

pub const DATASET_MAGIC: [u8; 4] = *b"SATV";
pub const MODEL_MAGIC: [u8; 4] = *b"SATM";
pub const FORMAT_VERSION: u16 = 1;

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        match end {
            Some(end) => {
                let s = &self.buf[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(FormatError::Truncated(self.buf.len())),
        }
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.array()?))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array()?))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = self.take(n.checked_mul(4).ok_or(FormatError::Truncated(self.buf.len()))?)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("chunk of 4")))
            .collect())
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| FormatError::Utf8)
    }

    fn magic(&mut self, want: [u8; 4]) -> Result<()> {
        let m = self.array::<4>()?;
        if m != want {
            return Err(FormatError::BadMagic(m));
        }
        let v = self.u16()?;
        if v != FORMAT_VERSION {
            return Err(FormatError::Version(v));
        }
        Ok(())
    }

    fn finish(self) -> Result<()> {
        match self.buf.len() - self.pos {
            0 => Ok(()),
            n => Err(FormatError::Trailing(n)),
        }
    }
}

fn put_string(out: &mut Vec<u8>, s: &str) {
    out.extend((s.len() as u32).to_le_bytes());
    out.extend(s.as_bytes());
}

fn put_f32s(out: &mut Vec<u8>, v: &[f32]) {
    for x in v {
        out.extend(x.to_le_bytes());
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let wrap = |source| FormatError::Io {
        path: path.display().to_string(),
        source,
    };
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(wrap)?;
    }
    fs::write(path, bytes).map_err(wrap)
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|source| FormatError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Messages with consecutive ids starting at `first_id`, sharing one sample
/// rate.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetFile {
    pub sample_rate_hz: f64,
    pub samples_per_symbol: u32,
    pub first_id: u64,
    pub messages: Vec<Message>,
}

impl DatasetFile {
    /// Store `messages`; ids must be consecutive and sample rates equal.
    pub fn from_messages(messages: &[Message]) -> Result<Self> {
        let first = messages
            .first()
            .ok_or_else(|| FormatError::Inconsistent("no records".into()))?;
        let rate = first.waveform.sample_rate_hz();
        for (k, m) in messages.iter().enumerate() {
            if m.id != first.id + k as u64 {
                return Err(FormatError::Inconsistent(format!("id {} at position {k}", m.id)));
            }
            if m.waveform.sample_rate_hz() != rate {
                return Err(FormatError::Inconsistent("mixed sample rates".into()));
            }
        }
        Ok(Self {
            sample_rate_hz: rate,
            samples_per_symbol: first.waveform.samples_per_symbol().unwrap_or(0) as u32,
            first_id: first.id,
            messages: messages.to_vec(),
        })
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend(DATASET_MAGIC);
        out.extend(FORMAT_VERSION.to_le_bytes());
        out.extend((self.messages.len() as u32).to_le_bytes());
        out.extend(self.sample_rate_hz.to_le_bytes());
        out.extend(self.samples_per_symbol.to_le_bytes());
        out.extend(self.first_id.to_le_bytes());
        for m in &self.messages {
            out.extend(m.transmitter_id.to_le_bytes());
            out.push(m.flags);
            out.extend((m.waveform.len() as u32).to_le_bytes());
            for s in m.waveform.samples() {
                out.extend((s.re as f32).to_le_bytes());
                out.extend((s.im as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.magic(DATASET_MAGIC)?;
        let count = r.u32()?;
        let sample_rate_hz = r.f64()?;
        let samples_per_symbol = r.u32()?;
        let first_id = r.u64()?;
        let mut messages = Vec::new();
        for k in 0..count as u64 {
            let transmitter_id = r.u32()?;
            let flags = r.u8()?;
            let n = r.u32()? as usize;
            let iq = r.f32s(2 * n)?;
            let samples = iq
                .chunks_exact(2)
                .map(|c| Complex64::new(c[0] as f64, c[1] as f64))
                .collect();
            let mut waveform = IqWaveform::new(samples, sample_rate_hz)?;
            if samples_per_symbol > 0 {
                waveform = waveform.with_symbol_rate(sample_rate_hz / samples_per_symbol as f64)?;
            }
            messages.push(Message {
                id: first_id + k,
                transmitter_id,
                flags,
                waveform,
            });
        }
        r.finish()?;
        Ok(Self {
            sample_rate_hz,
            samples_per_symbol,
            first_id,
            messages,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.encode())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&read_file(path)?)
    }
}

/// Architecture header plus raw weight blobs.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelFile {
    pub header: String,
    pub blobs: Vec<Vec<f32>>,
    pub config_hash: String,
}

impl ModelFile {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend(MODEL_MAGIC);
        out.extend(FORMAT_VERSION.to_le_bytes());
        put_string(&mut out, &self.header);
        out.extend((self.blobs.len() as u32).to_le_bytes());
        for b in &self.blobs {
            out.extend((b.len() as u32).to_le_bytes());
            put_f32s(&mut out, b);
        }
        put_string(&mut out, &self.config_hash);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.magic(MODEL_MAGIC)?;
        let header = r.string()?;
        let n = r.u32()?;
        let mut blobs = Vec::new();
        for _ in 0..n {
            let len = r.u32()? as usize;
            blobs.push(r.f32s(len)?);
        }
        let config_hash = r.string()?;
        r.finish()?;
        Ok(Self {
            header,
            blobs,
            config_hash,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.encode())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&read_file(path)?)
    }

    /// Parse the header as `T`.
    pub fn header_as<T: for<'de> Deserialize<'de>>(&self) -> Result<T> {
        toml::from_str(&self.header).map_err(|e| FormatError::Header(e.to_string()))
    }
}

/// Header of an embedder weight file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbedderHeader {
    pub kind: String,
    pub version: String,
    pub arch: EmbedderArch,
}

pub const EMBEDDER_KIND: &str = "embedder";

pub fn header_text<T: Serialize>(h: &T) -> Result<String> {
    toml::to_string(h).map_err(|e| FormatError::Header(e.to_string()))
}

/// Flatten tensors into blobs.
pub fn blobs_of(params: &[Tensor<f32>]) -> Vec<Vec<f32>> {
    params.iter().map(|p| p.values().to_vec()).collect()
}

/// Rebuild tensors of the given shapes from blobs.
pub fn tensors_from(blobs: &[Vec<f32>], shapes: &[Vec<usize>]) -> Result<Vec<Tensor<f32>>> {
    if blobs.len() != shapes.len() {
        return Err(FormatError::Architecture(format!(
            "{} weight blobs for {} parameters",
            blobs.len(),
            shapes.len()
        )));
    }
    blobs
        .iter()
        .zip(shapes)
        .map(|(b, s)| {
            let want: usize = s.iter().product();
            if b.len() != want {
                return Err(FormatError::Architecture(format!("blob of {} values for shape {s:?}", b.len())));
            }
            Ok(Tensor::new(s.clone(), b.clone())?)
        })
        .collect()
}

pub fn embedder_to_file(model: &EmbedderModel, config_hash: &str) -> Result<ModelFile> {
    let header = EmbedderHeader {
        kind: EMBEDDER_KIND.into(),
        version: model.version().into(),
        arch: model.arch().clone(),
    };
    Ok(ModelFile {
        header: header_text(&header)?,
        blobs: blobs_of(model.params()),
        config_hash: config_hash.into(),
    })
}

/// Rebuild an embedder, checking the stored architecture against
/// `expected` when given.
pub fn embedder_from_file(file: &ModelFile, expected: Option<&EmbedderArch>) -> Result<EmbedderModel> {
    let h: EmbedderHeader = file.header_as()?;
    if h.kind != EMBEDDER_KIND {
        return Err(FormatError::Architecture(format!("expected an embedder, found {:?}", h.kind)));
    }
    if let Some(want) = expected {
        if *want != h.arch {
            return Err(FormatError::Architecture(format!("file has {:?}, expected {want:?}", h.arch)));
        }
    }
    let params = tensors_from(&file.blobs, &h.arch.param_shapes())?;
    Ok(EmbedderModel::from_parts(h.arch, params, h.version)?)
}

/// Header of a GAN weight file; generator blobs come first.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GanHeader {
    pub kind: String,
    pub generator: GeneratorArch,
    pub discriminator: EmbedderArch,
    pub discriminator_version: String,
    pub transmitter_id: u32,
    pub train_ids: Vec<u64>,
    pub log: GanLog,
}

pub const GAN_KIND: &str = "gan";

pub fn gan_to_file(gan: &GanModel, config_hash: &str) -> Result<ModelFile> {
    let header = GanHeader {
        kind: GAN_KIND.into(),
        generator: gan.generator.arch().clone(),
        discriminator: gan.discriminator.arch().clone(),
        discriminator_version: gan.discriminator.version().into(),
        transmitter_id: gan.transmitter_id,
        train_ids: gan.train_ids.clone(),
        log: gan.log.clone(),
    };
    let mut blobs = blobs_of(gan.generator.params());
    blobs.extend(blobs_of(gan.discriminator.params()));
    Ok(ModelFile {
        header: header_text(&header)?,
        blobs,
        config_hash: config_hash.into(),
    })
}

pub fn gan_from_file(file: &ModelFile) -> Result<GanModel> {
    let h: GanHeader = file.header_as()?;
    if h.kind != GAN_KIND {
        return Err(FormatError::Architecture(format!("expected a gan, found {:?}", h.kind)));
    }
    let g_shapes = h.generator.param_shapes();
    if file.blobs.len() < g_shapes.len() {
        return Err(FormatError::Architecture("too few weight blobs".into()));
    }
    let (g_blobs, d_blobs) = file.blobs.split_at(g_shapes.len());
    let generator = Generator::from_parts(h.generator, tensors_from(g_blobs, &g_shapes)?)
        .map_err(|e: SpoofError| FormatError::Architecture(e.to_string()))?;
    let d_params = tensors_from(d_blobs, &h.discriminator.param_shapes())?;
    let discriminator = EmbedderModel::from_parts(h.discriminator, d_params, h.discriminator_version)?;
    Ok(GanModel {
        generator,
        discriminator,
        transmitter_id: h.transmitter_id,
        train_ids: h.train_ids,
        log: h.log,
    })
}
