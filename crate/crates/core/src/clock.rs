//! Simulated time. Experiments charge durations from a [`DelayProfile`]
//! instead of measuring wall clocks, so runs are deterministic.

use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

/// Durations are in microseconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DelayProfile {
    /// Power-on to PXE (firmware initialization).
    pub firmware_us: u64,
    /// Kernel and userspace start after the root disk is attached.
    pub os_boot_us: u64,
    /// Installing the OS onto a local disk (diskful baseline).
    pub os_install_us: u64,
    /// Installing the application framework on top of a bare OS.
    pub framework_install_us: u64,
    /// Orchestration cost of each provision step, in step order
    /// (allocate, clone, export, configure, attach).
    pub step_us: [u64; 5],
    /// Cost of one journal commit; commits are totally ordered.
    pub commit_us: u64,
    /// Round trip of one block or TFTP request.
    pub request_latency_us: u64,
    /// Storage network bandwidth, shared by concurrently booting nodes.
    pub link_bytes_per_sec: u64,
    /// Concurrent orchestration workers.
    pub workers: usize,
}

impl Default for DelayProfile {
    fn default() -> Self {
        Self {
            firmware_us: 180_000_000,
            os_boot_us: 110_000_000,
            os_install_us: 420_000_000,
            framework_install_us: 600_000_000,
            step_us: [150_000, 300_000, 450_000, 200_000, 400_000],
            commit_us: 5_000,
            request_latency_us: 200,
            link_bytes_per_sec: 125_000_000,
            workers: 8,
        }
    }
}

impl DelayProfile {
    pub fn orchestration_us(&self) -> u64 {
        self.step_us.iter().sum()
    }

    /// Time to move `bytes` over a link shared by `sharers` streams.
    pub fn transfer_us(&self, bytes: u64, sharers: u64) -> u64 {
        let bw = self.link_bytes_per_sec.max(1) as u128;
        (bytes as u128 * sharers.max(1) as u128 * 1_000_000 / bw) as u64
    }
}

/// Monotonic simulated clock.
#[derive(Debug, Default)]
pub struct VirtualClock {
    now_us: AtomicU64,
}

impl VirtualClock {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn now_us(&self) -> u64 {
        self.now_us.load(Ordering::SeqCst)
    }

    pub fn advance(&self, us: u64) -> u64 {
        self.now_us.fetch_add(us, Ordering::SeqCst) + us
    }
}

pub fn us_to_ms(us: u64) -> f64 {
    us as f64 / 1000.0
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn transfer_scales_with_sharers() {
        let p = DelayProfile {
            link_bytes_per_sec: 1_000_000,
            ..DelayProfile::default()
        };
        assert_eq!(p.transfer_us(1_000_000, 1), 1_000_000);
        assert_eq!(p.transfer_us(1_000_000, 4), 4_000_000);
        assert_eq!(p.transfer_us(0, 4), 0);
    }

    #[test]
    fn clock_advances() {
        let c = VirtualClock::new();
        assert_eq!(c.advance(5), 5);
        assert_eq!(c.advance(7), 12);
        assert_eq!(c.now_us(), 12);
    }
}
