//! Simulated bare-metal nodes. A node runs the whole boot protocol against
//! the netboot service and the target gateway (pointer, stage-1 chainload,
//! stage-2 script, target login) and then replays block access patterns
//! through a write-through LRU page cache.
//!
//! Time is charged from a [`DelayProfile`], never measured.

pub mod pattern;

use std::num::NonZeroUsize;
use std::sync::Arc;

use lru::LruCache;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use pattern::{Access, AccessPattern, Op, PatternError, PAGE};

use crate::clock::DelayProfile;
use crate::isolation::{IsolationError, IsolationService};
use crate::netboot::{self, BootDescriptor, BootScript, NetbootService};
use crate::target_gateway::wire::Status;
use crate::target_gateway::{Session, SessionError, TargetGateway, TargetName, TrafficCounters};
use crate::types::{MacAddress, NodeId};

/// Bytes read at login (partition table and filesystem superblocks).
pub const METADATA_PROBE: u64 = 64 * 1024;
pub const DEFAULT_CACHE_PAGES: usize = 65536;

pub const OS_BOOT_FIXTURE: &str = include_str!("../../fixtures/os-boot-64m.pattern");
pub const READ_HEAVY_FIXTURE: &str = include_str!("../../fixtures/read-heavy.pattern");
pub const LOG_APPEND_FIXTURE: &str = include_str!("../../fixtures/log-append.pattern");

/// The shipped boot pattern for a 64 MiB image.
pub fn default_os_boot() -> AccessPattern {
    AccessPattern::parse("os-boot", OS_BOOT_FIXTURE).expect("os-boot fixture parses")
}

pub fn default_read_heavy() -> AccessPattern {
    AccessPattern::parse("read-heavy", READ_HEAVY_FIXTURE).expect("read-heavy fixture parses")
}

pub fn default_log_append() -> AccessPattern {
    AccessPattern::parse("log-append", LOG_APPEND_FIXTURE).expect("log-append fixture parses")
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error("no boot config for {0}")]
    NoConfig(MacAddress),
    #[error("access denied by target")]
    AccessDenied,
    #[error("target gone")]
    TargetGone,
    #[error("node not booted")]
    NotBooted,
    #[error("boot protocol: {0}")]
    Protocol(String),
    #[error(transparent)]
    Pattern(#[from] PatternError),
    #[error("target i/o: {0}")]
    Io(SessionError),
    #[error("isolation: {0}")]
    Isolation(#[from] IsolationError),
}

impl From<SessionError> for SimError {
    fn from(e: SessionError) -> Self {
        match e.status {
            Status::AccessDenied => SimError::AccessDenied,
            Status::TargetGone => SimError::TargetGone,
            _ => SimError::Io(e),
        }
    }
}

pub type Result<T, E = SimError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimNodeConfig {
    pub node: NodeId,
    pub mac: MacAddress,
    pub firmware_delay_us: u64,
    /// Page cache capacity in 4 KiB pages; 0 disables caching.
    pub cache_pages: usize,
}

impl SimNodeConfig {
    pub fn new(node: NodeId, mac: MacAddress, profile: &DelayProfile) -> Self {
        Self {
            node,
            mac,
            firmware_delay_us: profile.firmware_us,
            cache_pages: DEFAULT_CACHE_PAGES,
        }
    }
}

/// Services a node talks to, plus the delay model.
#[derive(Clone)]
pub struct BootEnv {
    pub netboot: Arc<NetbootService>,
    pub gateway: Arc<TargetGateway>,
    pub isolation: Arc<IsolationService>,
    pub profile: DelayProfile,
    /// Nodes sharing the storage link during this boot.
    pub link_sharers: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Phase {
    pub name: String,
    pub us: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BootReport {
    pub node: NodeId,
    pub target: TargetName,
    /// Bytes fetched from the gateway, including the login probe.
    pub bytes_read: u64,
    pub bytes_written: u64,
    pub metadata_bytes: u64,
    pub unique_blocks_touched: u64,
    pub requests: u64,
    pub wall_time_us: u64,
    pub phases: Vec<Phase>,
}

impl BootReport {
    pub fn to_canonical_json(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
struct IoStats {
    bytes_read: u64,
    bytes_written: u64,
    requests: u64,
}

struct Attached {
    session: Session,
    capacity: u64,
}

pub struct SimNode {
    config: SimNodeConfig,
    cache: Option<LruCache<u64, Box<[u8]>>>,
    attached: Option<Attached>,
    halted: bool,
    booted_once: bool,
}

impl SimNode {
    pub fn new(config: SimNodeConfig) -> Self {
        let cache = NonZeroUsize::new(config.cache_pages).map(LruCache::new);
        Self {
            config,
            cache,
            attached: None,
            halted: false,
            booted_once: false,
        }
    }

    pub fn config(&self) -> &SimNodeConfig {
        &self.config
    }

    pub fn is_booted(&self) -> bool {
        self.attached.is_some() && !self.halted
    }

    pub fn cached_pages(&self) -> usize {
        self.cache.as_ref().map_or(0, |c| c.len())
    }

    /// Drops the page cache, as a cold power cycle would.
    pub fn drop_cache(&mut self) {
        if let Some(c) = &mut self.cache {
            c.clear();
        }
    }

    /// Boots the node and replays `pattern` as its boot-time I/O. The page
    /// cache survives across calls, so a second boot of the same node runs
    /// warm.
    pub fn power_on(&mut self, env: &BootEnv, pattern: &AccessPattern) -> Result<BootReport> {
        let p = &env.profile;
        self.halted = false;
        self.attached = None;
        let mut phases = Vec::new();
        phases.push(Phase {
            name: "firmware".into(),
            us: self.config.firmware_delay_us,
        });

        let mac = self.config.mac;
        let artifacts = env.netboot.lookup_boot(&mac).ok_or(SimError::NoConfig(mac))?;
        let stage1 = tftp(env, &netboot::stage1_path(&mac))?;
        phases.push(Phase {
            name: "pxe".into(),
            us: 2 * p.request_latency_us + p.transfer_us(stage1.len() as u64, 1),
        });

        let stage1 = String::from_utf8_lossy(&stage1).into_owned();
        let script_path = netboot::parse_stage1_chain(&stage1)
            .ok_or_else(|| SimError::Protocol("stage-1 config has no chain directive".into()))?;
        let script = tftp(env, &script_path)?;
        let descriptor = tftp(env, &netboot::descriptor_path(&mac))?;
        phases.push(Phase {
            name: "chainload".into(),
            us: 2 * p.request_latency_us + p.transfer_us((script.len() + descriptor.len()) as u64, 1),
        });

        let (initiator, _gateway, target) = BootScript::parse(&String::from_utf8_lossy(&script))
            .ok_or_else(|| SimError::Protocol("malformed boot script".into()))?;
        let descriptor: BootDescriptor =
            serde_json::from_slice(&descriptor).map_err(|e| SimError::Protocol(format!("descriptor: {e}")))?;
        if descriptor.target != target || descriptor.initiator_name != initiator {
            return Err(SimError::Protocol("descriptor disagrees with boot script".into()));
        }
        debug_assert_eq!(artifacts.descriptor.target, target);

        let capacity = env
            .gateway
            .target_capacity(&self.config.node, &target)
            .map_err(|e| SessionError {
                status: e.status(),
                message: e.to_string(),
            })?;
        pattern.check_bounds(capacity)?;
        let session = Session::new(env.gateway.clone(), self.config.node.clone(), target.clone());
        let probe = METADATA_PROBE.min(capacity);
        session.read(0, probe as u32)?;
        phases.push(Phase {
            name: "connect".into(),
            us: 2 * p.request_latency_us + p.transfer_us(probe, env.link_sharers),
        });
        self.attached = Some(Attached { session, capacity });
        self.booted_once = true;

        let io = self.replay(pattern)?;
        phases.push(Phase {
            name: "boot_io".into(),
            us: io.requests * p.request_latency_us + p.transfer_us(io.bytes_read + io.bytes_written, env.link_sharers),
        });
        phases.push(Phase {
            name: "os_boot".into(),
            us: p.os_boot_us,
        });

        Ok(BootReport {
            node: self.config.node.clone(),
            target,
            bytes_read: io.bytes_read + probe,
            bytes_written: io.bytes_written,
            metadata_bytes: probe,
            unique_blocks_touched: pattern.unique_pages().len() as u64,
            requests: io.requests + 1,
            wall_time_us: phases.iter().map(|ph| ph.us).sum(),
            phases,
        })
    }

    fn attached(&self) -> Result<&Attached> {
        match &self.attached {
            Some(a) if !self.halted => Ok(a),
            _ => Err(SimError::NotBooted),
        }
    }

    /// Replays `trace` `repetitions` times and returns the gateway counter
    /// delta of each repetition.
    pub fn run_workload(
        &mut self,
        env: &BootEnv,
        trace: &AccessPattern,
        repetitions: usize,
    ) -> Result<Vec<TrafficCounters>> {
        let target = self.attached()?.session.target().clone();
        trace.check_bounds(self.attached()?.capacity)?;
        let counters = |g: &TargetGateway| g.get_traffic(&target).map_err(|_| SimError::TargetGone);
        let mut out = Vec::with_capacity(repetitions);
        for _ in 0..repetitions {
            let before = counters(&env.gateway)?;
            self.replay(trace)?;
            out.push(counters(&env.gateway)? - before);
        }
        Ok(out)
    }

    fn replay(&mut self, pattern: &AccessPattern) -> Result<IoStats> {
        let mut stats = IoStats::default();
        for a in &pattern.entries {
            match a.op {
                Op::Read => {
                    self.read_into(a.offset, a.len, &mut stats)?;
                }
                Op::Write { seed } => {
                    let data = pattern::payload(seed, a.len as usize);
                    self.write_through(a.offset, &data, &mut stats)?;
                }
            }
        }
        Ok(stats)
    }

    pub fn read(&mut self, offset: u64, len: u64) -> Result<Vec<u8>> {
        self.read_into(offset, len, &mut IoStats::default())
    }

    pub fn write(&mut self, offset: u64, data: &[u8]) -> Result<()> {
        self.write_through(offset, data, &mut IoStats::default())
    }

    /// Reads through the page cache. Runs of missing pages are fetched
    /// with one request each.
    fn read_into(&mut self, offset: u64, len: u64, stats: &mut IoStats) -> Result<Vec<u8>> {
        if len == 0 {
            return Ok(Vec::new());
        }
        let capacity = self.attached()?.capacity;
        let first = offset / PAGE;
        let last = (offset + len - 1) / PAGE;
        let mut pages: Vec<Option<Box<[u8]>>> = (first..=last)
            .map(|p| self.cache.as_mut().and_then(|c| c.get(&p).cloned()))
            .collect();
        let mut i = 0;
        while i < pages.len() {
            if pages[i].is_some() {
                i += 1;
                continue;
            }
            let run_start = i;
            while i < pages.len() && pages[i].is_none() {
                i += 1;
            }
            let start = (first + run_start as u64) * PAGE;
            let end = ((first + i as u64) * PAGE).min(capacity);
            let data = self.attached()?.session.read(start, (end - start) as u32)?;
            stats.bytes_read += data.len() as u64;
            stats.requests += 1;
            for (k, chunk) in data.chunks(PAGE as usize).enumerate() {
                let mut page = vec![0u8; PAGE as usize];
                page[..chunk.len()].copy_from_slice(chunk);
                let page = page.into_boxed_slice();
                let idx = first + (run_start + k) as u64;
                if let Some(c) = &mut self.cache {
                    c.put(idx, page.clone());
                }
                pages[run_start + k] = Some(page);
            }
        }
        let mut out = Vec::with_capacity(len as usize);
        let mut pos = offset;
        for (k, page) in pages.iter().enumerate() {
            let page_start = (first + k as u64) * PAGE;
            let from = (pos - page_start) as usize;
            let to = ((offset + len).min(page_start + PAGE) - page_start) as usize;
            out.extend_from_slice(&page.as_ref().expect("filled")[from..to]);
            pos = page_start + to as u64;
        }
        Ok(out)
    }

    /// Writes go to the gateway every time. Cached pages are updated in
    /// place and whole-page writes are cached.
    fn write_through(&mut self, offset: u64, data: &[u8], stats: &mut IoStats) -> Result<()> {
        if data.is_empty() {
            return Ok(());
        }
        self.attached()?.session.write(offset, data)?;
        stats.bytes_written += data.len() as u64;
        stats.requests += 1;
        let Some(cache) = &mut self.cache else {
            return Ok(());
        };
        let end = offset + data.len() as u64;
        for p in offset / PAGE..=(end - 1) / PAGE {
            let ps = p * PAGE;
            let from = offset.max(ps);
            let to = end.min(ps + PAGE);
            let src = &data[(from - offset) as usize..(to - offset) as usize];
            if let Some(page) = cache.get_mut(&p) {
                page[(from - ps) as usize..(to - ps) as usize].copy_from_slice(src);
            } else if from == ps && to == ps + PAGE {
                cache.put(p, src.to_vec().into_boxed_slice());
            }
        }
        Ok(())
    }

    /// Halts the node and reports it failed. Repeating is harmless.
    pub fn inject_failure(&mut self, env: &BootEnv) -> Result<()> {
        if !self.booted_once {
            return Err(SimError::NotBooted);
        }
        self.halted = true;
        self.attached = None;
        env.isolation.mark_failed(&self.config.node)?;
        Ok(())
    }
}

fn tftp(env: &BootEnv, path: &str) -> Result<Vec<u8>> {
    env.netboot
        .tftp_get(path)
        .map_err(|e| SimError::Protocol(format!("tftp {path}: {e}")))
}
