//! TCP request/reply service exposing the loop to external programs.
//!
//! Frame: `u32 magic | u32 sample_count | sample_count * (f32 I, f32 Q)`, all
//! little-endian. A reply uses the same framing. A malformed request gets an
//! error frame (`u32 ERROR_MAGIC | u32 byte_len | utf-8 message`) and the
//! connection is closed. Each connection owns its own seed stream, advanced
//! once per request.

use std::io::{self, BufReader, BufWriter, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::thread;

use num_complex::Complex64;
use thiserror::Error;

use super::{loopback, ChannelConfig, LoopError, LoopSeed, TransmitterProfile};
use crate::signal::IqWaveform;

pub const FRAME_MAGIC: u32 = 0x5046_4c52;
pub const ERROR_MAGIC: u32 = 0x5246_4c45;
/// Largest accepted frame, in complex samples.
pub const MAX_SAMPLES: u32 = 1 << 20;

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("i/o: {0}")]
    Io(#[from] io::Error),
    #[error("bad frame magic {0:#010x}")]
    BadMagic(u32),
    #[error("frame of {0} samples exceeds the {MAX_SAMPLES}-sample limit")]
    FrameTooLarge(u32),
    #[error("empty frame")]
    EmptyFrame,
    #[error("server reported: {0}")]
    Remote(String),
    #[error(transparent)]
    Loop(#[from] LoopError),
}

/// What the service applies to every frame.
#[derive(Clone, Debug)]
pub struct ServiceConfig {
    pub profile: TransmitterProfile,
    pub channel: ChannelConfig,
    pub seed: u64,
    pub sample_rate_hz: f64,
}

pub struct LoopServer {
    listener: TcpListener,
    config: Arc<ServiceConfig>,
    connections: AtomicU64,
}

fn read_u32(r: &mut impl Read) -> io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn write_frame(w: &mut impl Write, samples: &[Complex64]) -> io::Result<()> {
    let mut buf = Vec::with_capacity(8 + samples.len() * 8);
    buf.extend_from_slice(&FRAME_MAGIC.to_le_bytes());
    buf.extend_from_slice(&(samples.len() as u32).to_le_bytes());
    for s in samples {
        buf.extend_from_slice(&(s.re as f32).to_le_bytes());
        buf.extend_from_slice(&(s.im as f32).to_le_bytes());
    }
    w.write_all(&buf)?;
    w.flush()
}

fn write_error(w: &mut impl Write, msg: &str) -> io::Result<()> {
    w.write_all(&ERROR_MAGIC.to_le_bytes())?;
    w.write_all(&(msg.len() as u32).to_le_bytes())?;
    w.write_all(msg.as_bytes())?;
    w.flush()
}

/// Read one frame; `Ok(None)` on a clean end of stream before a header.
fn read_frame(r: &mut impl Read) -> Result<Option<Vec<Complex64>>, ServiceError> {
    let mut head = [0u8; 4];
    match r.read_exact(&mut head) {
        Ok(()) => {}
        Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e.into()),
    }
    let magic = u32::from_le_bytes(head);
    let count = read_u32(r)?;
    if magic == ERROR_MAGIC {
        let mut msg = vec![0u8; count.min(1 << 16) as usize];
        r.read_exact(&mut msg)?;
        return Err(ServiceError::Remote(String::from_utf8_lossy(&msg).into_owned()));
    }
    if magic != FRAME_MAGIC {
        return Err(ServiceError::BadMagic(magic));
    }
    if count > MAX_SAMPLES {
        return Err(ServiceError::FrameTooLarge(count));
    }
    if count == 0 {
        return Err(ServiceError::EmptyFrame);
    }
    let mut payload = vec![0u8; count as usize * 8];
    r.read_exact(&mut payload)?;
    Ok(Some(
        payload
            .chunks_exact(8)
            .map(|c| {
                let i = f32::from_le_bytes(c[..4].try_into().expect("4 bytes"));
                let q = f32::from_le_bytes(c[4..].try_into().expect("4 bytes"));
                Complex64::new(i as f64, q as f64)
            })
            .collect(),
    ))
}

impl LoopServer {
    pub fn bind(addr: impl ToSocketAddrs, config: ServiceConfig) -> Result<Self, ServiceError> {
        config.channel.validate()?;
        Ok(Self {
            listener: TcpListener::bind(addr)?,
            config: Arc::new(config),
            connections: AtomicU64::new(0),
        })
    }

    pub fn local_addr(&self) -> io::Result<SocketAddr> {
        self.listener.local_addr()
    }

    /// Accept connections forever, one thread each.
    pub fn serve(&self) -> io::Result<()> {
        for stream in self.listener.incoming() {
            let stream = stream?;
            let index = self.connections.fetch_add(1, Ordering::Relaxed);
            let config = Arc::clone(&self.config);
            thread::spawn(move || {
                if let Err(e) = handle_connection(stream, &config, index) {
                    log::warn!("connection {index}: {e}");
                }
            });
        }
        Ok(())
    }
}

fn handle_connection(stream: TcpStream, config: &ServiceConfig, index: u64) -> Result<(), ServiceError> {
    let mut reader = BufReader::new(stream.try_clone()?);
    let mut writer = BufWriter::new(stream);
    let mut seed = LoopSeed::new(config.seed ^ index.wrapping_mul(0xa076_1d64_78bd_642f), 0);
    loop {
        let samples = match read_frame(&mut reader) {
            Ok(Some(s)) => s,
            Ok(None) => return Ok(()),
            Err(e) => {
                let _ = write_error(&mut writer, &e.to_string());
                return Err(e);
            }
        };
        let reply = IqWaveform::new(samples, config.sample_rate_hz)
            .map_err(LoopError::from)
            .and_then(|w| loopback(&w, &config.profile, &config.channel, seed));
        match reply {
            Ok(y) => write_frame(&mut writer, y.samples())?,
            Err(e) => {
                let _ = write_error(&mut writer, &e.to_string());
                return Err(e.into());
            }
        }
        seed = seed.next();
    }
}

/// Blocking client for [`LoopServer`].
pub struct LoopClient {
    reader: BufReader<TcpStream>,
    writer: BufWriter<TcpStream>,
}

impl LoopClient {
    pub fn connect(addr: impl ToSocketAddrs) -> Result<Self, ServiceError> {
        let stream = TcpStream::connect(addr)?;
        stream.set_nodelay(true)?;
        Ok(Self {
            reader: BufReader::new(stream.try_clone()?),
            writer: BufWriter::new(stream),
        })
    }

    /// Send one waveform and wait for its looped version.
    pub fn roundtrip(&mut self, w: &IqWaveform) -> Result<IqWaveform, ServiceError> {
        write_frame(&mut self.writer, w.samples())?;
        let samples = read_frame(&mut self.reader)?
            .ok_or_else(|| ServiceError::Io(io::Error::new(io::ErrorKind::UnexpectedEof, "connection closed")))?;
        Ok(w.with_samples(samples).map_err(LoopError::from)?)
    }

    /// Send raw bytes; for protocol tests.
    pub fn send_raw(&mut self, bytes: &[u8]) -> Result<(), ServiceError> {
        self.writer.write_all(bytes)?;
        self.writer.flush()?;
        Ok(())
    }

    /// Read the next frame, surfacing an error frame as [`ServiceError::Remote`].
    pub fn recv(&mut self) -> Result<Option<Vec<Complex64>>, ServiceError> {
        read_frame(&mut self.reader)
    }
}
