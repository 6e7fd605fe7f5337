//! Append-only metadata journal shared by all services.
//!
//! Frame layout: `u32 BE payload length | payload | u32 BE CRC32(payload)`.
//! The payload is a self-describing JSON [`Record`]. Replay stops at the first
//! short or corrupt frame and the file is truncated back to the last good
//! frame, so a torn tail from a crash mid-append is discarded.

use std::fs::{File, OpenOptions};
use std::io::{self, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::image_store::StoreEvent;
use crate::isolation::PoolEvent;
use crate::netboot::NetbootEvent;
use crate::orchestrator::OrchestratorEvent;
use crate::target_gateway::GatewayEvent;

const LEN_SIZE: usize = 4;
const CRC_SIZE: usize = 4;
/// Records above this size are rejected on replay as corrupt.
pub const MAX_RECORD_SIZE: usize = 64 << 20;

#[derive(Debug, Error)]
pub enum JournalError {
    #[error("journal i/o: {0}")]
    Io(#[from] io::Error),
    #[error("journal record encoding: {0}")]
    Encode(#[from] serde_json::Error),
    #[error("journal halted by injected crash")]
    Crashed,
}

/// One committed state change, tagged by the owning service.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "svc", content = "ev", rename_all = "snake_case")]
pub enum Record {
    Store(StoreEvent),
    Gateway(GatewayEvent),
    Netboot(NetbootEvent),
    Pool(PoolEvent),
    Orchestrator(OrchestratorEvent),
}

/// How an injected crash leaves the journal tail.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CrashMode {
    /// The failing append writes nothing.
    Clean,
    /// The failing append leaves half a frame behind.
    Torn,
}

enum Backend {
    File { file: File, path: PathBuf, fsync: bool },
    Memory(Vec<u8>),
}

struct Inner {
    backend: Backend,
    commits: u64,
    crash_at: Option<(u64, CrashMode)>,
    crashed: bool,
}

pub struct Journal {
    inner: Mutex<Inner>,
}

pub fn encode_frame(payload: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(LEN_SIZE + payload.len() + CRC_SIZE);
    out.extend_from_slice(&(payload.len() as u32).to_be_bytes());
    out.extend_from_slice(payload);
    out.extend_from_slice(&crc32fast::hash(payload).to_be_bytes());
    out
}

/// Splits `bytes` into valid frame payloads. Returns the payloads and the
/// length of the valid prefix.
pub fn decode_frames(bytes: &[u8]) -> (Vec<&[u8]>, usize) {
    let mut frames = Vec::new();
    let mut pos = 0;
    while bytes.len() - pos >= LEN_SIZE + CRC_SIZE {
        let len = u32::from_be_bytes(bytes[pos..pos + LEN_SIZE].try_into().unwrap()) as usize;
        if len > MAX_RECORD_SIZE || bytes.len() - pos - LEN_SIZE - CRC_SIZE < len {
            break;
        }
        let payload = &bytes[pos + LEN_SIZE..pos + LEN_SIZE + len];
        let crc_at = pos + LEN_SIZE + len;
        let crc = u32::from_be_bytes(bytes[crc_at..crc_at + CRC_SIZE].try_into().unwrap());
        if crc != crc32fast::hash(payload) {
            break;
        }
        frames.push(payload);
        pos = crc_at + CRC_SIZE;
    }
    (frames, pos)
}

fn decode_records(bytes: &[u8]) -> (Vec<Record>, usize) {
    let (frames, _) = decode_frames(bytes);
    let mut records = Vec::with_capacity(frames.len());
    let mut consumed = 0;
    for frame in frames {
        // A frame with a valid CRC but an unknown shape ends replay like a torn one.
        let Ok(r) = serde_json::from_slice::<Record>(frame) else {
            break;
        };
        records.push(r);
        consumed += LEN_SIZE + frame.len() + CRC_SIZE;
    }
    (records, consumed)
}

impl Journal {
    /// Opens (creating if needed) the journal at `path` and returns the
    /// committed records in order.
    pub fn open(path: &Path, fsync: bool) -> Result<(Self, Vec<Record>), JournalError> {
        let mut file = OpenOptions::new()
            .read(true)
            .write(true)
            .create(true)
            .truncate(false)
            .open(path)?;
        let mut bytes = Vec::new();
        file.read_to_end(&mut bytes)?;
        let (records, valid) = decode_records(&bytes);
        if valid < bytes.len() {
            file.set_len(valid as u64)?;
            file.sync_all()?;
        }
        file.seek(SeekFrom::End(0))?;
        let journal = Self::with_backend(
            Backend::File {
                file,
                path: path.to_path_buf(),
                fsync,
            },
            records.len() as u64,
        );
        Ok((journal, records))
    }

    pub fn in_memory() -> Self {
        Self::with_backend(Backend::Memory(Vec::new()), 0)
    }

    /// Rebuilds a memory journal from raw bytes (e.g. a prior [`Journal::raw_bytes`]).
    pub fn from_memory(bytes: Vec<u8>) -> (Self, Vec<Record>) {
        let (records, valid) = decode_records(&bytes);
        let mut bytes = bytes;
        bytes.truncate(valid);
        let n = records.len() as u64;
        (Self::with_backend(Backend::Memory(bytes), n), records)
    }

    fn with_backend(backend: Backend, commits: u64) -> Self {
        Self {
            inner: Mutex::new(Inner {
                backend,
                commits,
                crash_at: None,
                crashed: false,
            }),
        }
    }

    pub fn path(&self) -> Option<PathBuf> {
        match &self.inner.lock().backend {
            Backend::File { path, .. } => Some(path.clone()),
            Backend::Memory(_) => None,
        }
    }

    /// Commits one record. Returns its sequence number (1-based).
    pub fn append(&self, record: &Record) -> Result<u64, JournalError> {
        let payload = serde_json::to_vec(record)?;
        let frame = encode_frame(&payload);
        let mut inner = self.inner.lock();
        if inner.crashed {
            return Err(JournalError::Crashed);
        }
        if let Some((at, mode)) = inner.crash_at {
            if inner.commits >= at {
                inner.crashed = true;
                if mode == CrashMode::Torn {
                    let half = &frame[..frame.len() / 2];
                    let _ = inner.backend.write(half);
                }
                return Err(JournalError::Crashed);
            }
        }
        inner.backend.write(&frame)?;
        inner.commits += 1;
        Ok(inner.commits)
    }

    /// Total committed records, including those replayed at open.
    pub fn commits(&self) -> u64 {
        self.inner.lock().commits
    }

    /// Arms a simulated crash: the append that would make commit number
    /// `at + 1` fails and every later append fails too.
    pub fn crash_at(&self, at: u64, mode: CrashMode) {
        self.inner.lock().crash_at = Some((at, mode));
    }

    pub fn disarm(&self) {
        let mut inner = self.inner.lock();
        inner.crash_at = None;
    }

    pub fn is_crashed(&self) -> bool {
        self.inner.lock().crashed
    }

    /// Raw journal bytes (memory backend) or file contents.
    pub fn raw_bytes(&self) -> io::Result<Vec<u8>> {
        let inner = self.inner.lock();
        match &inner.backend {
            Backend::Memory(b) => Ok(b.clone()),
            Backend::File { path, .. } => std::fs::read(path),
        }
    }
}

impl Backend {
    fn write(&mut self, bytes: &[u8]) -> io::Result<()> {
        match self {
            Backend::Memory(buf) => {
                buf.extend_from_slice(bytes);
                Ok(())
            }
            Backend::File { file, fsync, .. } => {
                file.write_all(bytes)?;
                if *fsync {
                    file.sync_data()?;
                }
                Ok(())
            }
        }
    }
}
