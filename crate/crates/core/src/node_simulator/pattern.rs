//! Block access patterns and their text fixture format:
//!
//! ```text
//! # comment
//! R <offset> <len>
//! W <offset> <len> <hex-seed>
//! ```
//!
//! Write payloads are generated from the seed, so a pattern file is enough
//! to replay a trace byte for byte.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const PAGE: u64 = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Op {
    Read,
    Write { seed: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Access {
    pub offset: u64,
    pub len: u64,
    pub op: Op,
}

impl Access {
    pub fn read(offset: u64, len: u64) -> Self {
        Self {
            offset,
            len,
            op: Op::Read,
        }
    }

    pub fn write(offset: u64, len: u64, seed: u64) -> Self {
        Self {
            offset,
            len,
            op: Op::Write { seed },
        }
    }

    pub fn payload(&self) -> Option<Vec<u8>> {
        match self.op {
            Op::Read => None,
            Op::Write { seed } => Some(payload(seed, self.len as usize)),
        }
    }
}

/// Deterministic write payload for `seed`.
pub fn payload(seed: u64, len: usize) -> Vec<u8> {
    let mut buf = vec![0u8; len];
    ChaCha8Rng::seed_from_u64(seed).fill_bytes(&mut buf);
    buf
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AccessPattern {
    pub name: String,
    pub entries: Vec<Access>,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PatternError {
    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("entry {index} at {offset}+{len} exceeds image size {size}")]
    OutOfBounds {
        index: usize,
        offset: u64,
        len: u64,
        size: u64,
    },
}

impl AccessPattern {
    pub fn new(name: impl Into<String>, entries: Vec<Access>) -> Self {
        Self {
            name: name.into(),
            entries,
        }
    }

    pub fn parse(name: &str, text: &str) -> Result<Self, PatternError> {
        let mut entries = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let err = |msg: &str| PatternError::Syntax {
                line,
                msg: msg.to_string(),
            };
            let fields: Vec<&str> = content.split_whitespace().collect();
            let num = |s: &str| s.parse::<u64>().map_err(|_| err(&format!("bad number {s:?}")));
            match fields.as_slice() {
                ["R", off, len] => entries.push(Access::read(num(off)?, num(len)?)),
                ["W", off, len, seed] => {
                    let seed = u64::from_str_radix(seed.trim_start_matches("0x"), 16)
                        .map_err(|_| err(&format!("bad hex seed {seed:?}")))?;
                    entries.push(Access::write(num(off)?, num(len)?, seed));
                }
                _ => return Err(err(&format!("unrecognized entry {content:?}"))),
            }
        }
        Ok(Self::new(name, entries))
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("# {}\n", self.name);
        for a in &self.entries {
            match a.op {
                Op::Read => writeln!(s, "R {} {}", a.offset, a.len),
                Op::Write { seed } => writeln!(s, "W {} {} {seed:016x}", a.offset, a.len),
            }
            .expect("string write");
        }
        s
    }

    pub fn check_bounds(&self, size: u64) -> Result<(), PatternError> {
        for (index, a) in self.entries.iter().enumerate() {
            if a.offset.checked_add(a.len).is_none_or(|end| end > size) {
                return Err(PatternError::OutOfBounds {
                    index,
                    offset: a.offset,
                    len: a.len,
                    size,
                });
            }
        }
        Ok(())
    }

    /// Pages touched by any entry.
    pub fn unique_pages(&self) -> BTreeSet<u64> {
        let mut pages = BTreeSet::new();
        for a in self.entries.iter().filter(|a| a.len > 0) {
            pages.extend(a.offset / PAGE..=(a.offset + a.len - 1) / PAGE);
        }
        pages
    }

    pub fn read_bytes(&self) -> u64 {
        self.entries.iter().filter(|a| a.op == Op::Read).map(|a| a.len).sum()
    }

    pub fn write_bytes(&self) -> u64 {
        self.entries.iter().filter(|a| a.op != Op::Read).map(|a| a.len).sum()
    }
}

pub const OS_BOOT_CHUNK: u64 = 64 * 1024;
pub const OS_BOOT_SCATTERED: usize = 50;

/// Synthetic OS boot: a contiguous prefix of 2% of the image read in 64 KiB
/// chunks, then 50 scattered single-page reads beyond it.
pub fn os_boot(image_size: u64, seed: u64) -> AccessPattern {
    let prefix = (image_size / 50) / PAGE * PAGE;
    let mut entries = Vec::new();
    let mut off = 0;
    while off < prefix {
        let n = OS_BOOT_CHUNK.min(prefix - off);
        entries.push(Access::read(off, n));
        off += n;
    }
    let first = prefix / PAGE;
    let pages = image_size / PAGE;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = BTreeSet::new();
    while picked.len() < OS_BOOT_SCATTERED.min((pages - first) as usize) {
        picked.insert(rng.random_range(first..pages));
    }
    // Boot order is not sorted.
    let mut scattered: Vec<u64> = picked.into_iter().collect();
    for i in (1..scattered.len()).rev() {
        scattered.swap(i, rng.random_range(0..=i));
    }
    entries.extend(scattered.into_iter().map(|p| Access::read(p * PAGE, PAGE)));
    AccessPattern::new("os-boot", entries)
}

/// Application job: reads a working set of `pages` pages starting at
/// `base`, twice over, in a seeded order.
pub fn read_heavy(base: u64, pages: u64, seed: u64) -> AccessPattern {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<u64> = (0..pages).collect();
    let mut entries = Vec::new();
    for _ in 0..2 {
        for i in (1..order.len()).rev() {
            order.swap(i, rng.random_range(0..=i));
        }
        entries.extend(order.iter().map(|p| Access::read(base + p * PAGE, PAGE)));
    }
    AccessPattern::new("read-heavy", entries)
}

/// Log writer: appends `records` page-sized records starting at `base`.
pub fn log_append(base: u64, records: u64, seed: u64) -> AccessPattern {
    let entries = (0..records)
        .map(|i| Access::write(base + i * PAGE, PAGE, seed.wrapping_add(i)))
        .collect();
    AccessPattern::new("log-append", entries)
}

/// Read-heavy job interleaved with log appends, the shape of a
/// data-generation-and-sort job that logs as it goes.
pub fn mixed_job(read_base: u64, read_pages: u64, log_base: u64, log_records: u64, seed: u64) -> AccessPattern {
    let reads = read_heavy(read_base, read_pages, seed).entries;
    let writes = log_append(log_base, log_records, seed).entries;
    let every = (reads.len() / writes.len().max(1)).max(1);
    let mut entries = Vec::with_capacity(reads.len() + writes.len());
    let mut w = writes.into_iter();
    for (i, r) in reads.into_iter().enumerate() {
        entries.push(r);
        if (i + 1) % every == 0 {
            entries.extend(w.next());
        }
    }
    entries.extend(w);
    AccessPattern::new("job", entries)
}
