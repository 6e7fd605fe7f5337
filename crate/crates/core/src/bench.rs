//! Desk-scale experiments on the virtual clock. Every scenario runs the
//! real services and simulated nodes; only durations come from the
//! [`DelayProfile`]. Output is CSV with fixed headers, identical for
//! identical `(spec, seed)`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;
use std::sync::Arc;

use parking_lot::Mutex;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::{us_to_ms, DelayProfile};
use crate::image_store::StoreConfig;
use crate::isolation::IsolationError;
use crate::node_simulator::{pattern, AccessPattern, BootEnv, BootReport, SimError, SimNode, SimNodeConfig};
use crate::orchestrator::{OrchestratorConfig, OrchestratorError, ProvisionRecord, ProvisionRequest};
use crate::system::{System, SystemConfig, SystemError};
use crate::target_gateway::TrafficCounters;
use crate::types::{ImageId, MacAddress, NodeId, TenantId};

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("environment has {0} live provisions")]
    DirtyEnvironment(usize),
    #[error("invalid parameter: {0}")]
    InvalidParam(String),
    #[error("unknown scenario {0:?}")]
    UnknownScenario(String),
    #[error(transparent)]
    Orchestrator(#[from] OrchestratorError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    System(#[from] SystemError),
    #[error(transparent)]
    Isolation(#[from] IsolationError),
    #[error("storage: {0}")]
    Store(#[from] crate::image_store::StoreError),
}

pub type Result<T, E = BenchError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    ProvisionSingle,
    ProvisionScaling,
    ReprovisionVsFresh,
    TrafficCurves,
}

impl Scenario {
    pub const ALL: [Scenario; 4] = [
        Scenario::ProvisionSingle,
        Scenario::ProvisionScaling,
        Scenario::ReprovisionVsFresh,
        Scenario::TrafficCurves,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Scenario::ProvisionSingle => "provision_single",
            Scenario::ProvisionScaling => "provision_scaling",
            Scenario::ReprovisionVsFresh => "reprovision_vs_fresh",
            Scenario::TrafficCurves => "traffic_curves",
        }
    }

    pub fn header(self) -> &'static str {
        match self {
            Scenario::ProvisionSingle => "system,phase,ms",
            Scenario::ProvisionScaling => "n,total_ms,overhead_ms",
            Scenario::ReprovisionVsFresh => "path,total_ms,speedup_vs_diskful",
            Scenario::TrafficCurves => "rep,read_bytes,write_bytes,cum_read_bytes,cum_write_bytes",
        }
    }

    fn allowed_params(self) -> &'static [&'static str] {
        match self {
            Scenario::ProvisionSingle => &["image_mib"],
            Scenario::ProvisionScaling => &["image_mib", "max_n"],
            Scenario::ReprovisionVsFresh => &["image_mib"],
            Scenario::TrafficCurves => &["image_mib", "reps"],
        }
    }
}

impl FromStr for Scenario {
    type Err = BenchError;
    fn from_str(s: &str) -> Result<Self> {
        Scenario::ALL
            .into_iter()
            .find(|sc| sc.as_str() == s)
            .ok_or_else(|| BenchError::UnknownScenario(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BenchSpec {
    pub scenario: Scenario,
    #[serde(default)]
    pub params: BTreeMap<String, String>,
    #[serde(default)]
    pub seed: u64,
}

impl BenchSpec {
    pub fn new(scenario: Scenario) -> Self {
        Self {
            scenario,
            params: BTreeMap::new(),
            seed: 0,
        }
    }

    pub fn param(mut self, k: &str, v: impl ToString) -> Self {
        self.params.insert(k.to_string(), v.to_string());
        self
    }

    pub fn seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    fn int(&self, key: &str, default: u64, min: u64, max: u64) -> Result<u64> {
        let Some(raw) = self.params.get(key) else {
            return Ok(default);
        };
        let v: u64 = raw
            .parse()
            .map_err(|_| BenchError::InvalidParam(format!("{key}={raw:?} is not an integer")))?;
        if !(min..=max).contains(&v) {
            return Err(BenchError::InvalidParam(format!("{key}={v} outside {min}..={max}")));
        }
        Ok(v)
    }

    pub fn validate(&self) -> Result<()> {
        let allowed = self.scenario.allowed_params();
        if let Some(k) = self.params.keys().find(|k| !allowed.contains(&k.as_str())) {
            return Err(BenchError::InvalidParam(format!(
                "{k} is not a {} parameter",
                self.scenario.as_str()
            )));
        }
        self.image_size()?;
        self.int("max_n", 24, 1, 64)?;
        self.int("reps", 5, 1, 100)?;
        Ok(())
    }

    fn image_size(&self) -> Result<u64> {
        Ok(self.int("image_mib", 64, 8, 1024)? << 20)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchReport {
    pub csv: String,
    pub summary: String,
}

/// Deterministic golden image content.
pub fn golden_bytes(size: u64, seed: u64) -> Vec<u8> {
    let mut buf = vec![0u8; size as usize];
    ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15).fill_bytes(&mut buf);
    buf
}

pub fn lab_mac(i: u64) -> MacAddress {
    let b = i.to_be_bytes();
    MacAddress::new([0x52, 0x54, 0x00, b[5], b[6], b[7]])
}

#[derive(Debug, Clone)]
pub struct LabConfig {
    pub nodes: usize,
    pub image_size: u64,
    pub seed: u64,
    pub profile: DelayProfile,
    pub store: StoreConfig,
}

impl Default for LabConfig {
    fn default() -> Self {
        Self {
            nodes: 4,
            image_size: 64 << 20,
            seed: 0,
            profile: DelayProfile::default(),
            store: StoreConfig::default(),
        }
    }
}

/// A memory-backed installation with a registered pool, one tenant, one
/// golden image and a simulated machine per node.
pub struct Lab {
    pub sys: Arc<System>,
    pub profile: DelayProfile,
    pub tenant: TenantId,
    pub golden: ImageId,
    pub image_size: u64,
    pub seed: u64,
    sims: Mutex<BTreeMap<NodeId, Arc<Mutex<SimNode>>>>,
}

impl Lab {
    pub fn new(config: LabConfig) -> Result<Self> {
        let sys = System::open(SystemConfig {
            store: config.store.clone(),
            orchestrator: OrchestratorConfig {
                workers: config.profile.workers,
            },
            ..SystemConfig::in_memory()
        })?;
        Self::on(Arc::new(sys), config)
    }

    /// Builds a lab on an existing system, which must have no live
    /// provisions.
    pub fn on(sys: Arc<System>, config: LabConfig) -> Result<Self> {
        let live = sys.orchestrator.all_records().len();
        if live > 0 {
            return Err(BenchError::DirtyEnvironment(live));
        }
        let tenant = TenantId::new("bench").expect("valid tenant");
        let have = sys.isolation.list().len() as u64;
        for i in have..config.nodes as u64 {
            sys.isolation.register_node(lab_mac(i + 1))?;
        }
        let name = format!("golden-{:x}", config.seed);
        let golden = match sys.store.find_by_name(&tenant, &name) {
            Some(id) => id,
            None => {
                let data = golden_bytes(config.image_size, config.seed);
                sys.store.import_image(&tenant, &name, &mut data.as_slice())?
            }
        };
        let lab = Self {
            sys,
            profile: config.profile,
            tenant,
            golden,
            image_size: config.image_size,
            seed: config.seed,
            sims: Mutex::new(BTreeMap::new()),
        };
        for n in lab.sys.isolation.list() {
            lab.sims.lock().insert(
                n.id.clone(),
                Arc::new(Mutex::new(SimNode::new(SimNodeConfig::new(n.id, n.mac, &lab.profile)))),
            );
        }
        Ok(lab)
    }

    pub fn env(&self, link_sharers: u64) -> BootEnv {
        BootEnv {
            netboot: self.sys.netboot.clone(),
            gateway: self.sys.gateway.clone(),
            isolation: self.sys.isolation.clone(),
            profile: self.profile.clone(),
            link_sharers,
        }
    }

    pub fn sim(&self, node: &NodeId) -> Arc<Mutex<SimNode>> {
        self.sims.lock()[node].clone()
    }

    pub fn boot_pattern(&self) -> AccessPattern {
        pattern::os_boot(self.image_size, self.seed ^ 0x5eed)
    }

    pub fn provision(&self, image: &ImageId) -> Result<ProvisionRecord> {
        Ok(self.sys.orchestrator.provision(&ProvisionRequest {
            tenant: self.tenant.clone(),
            node: None,
            image: image.clone(),
            idempotency_key: None,
        })?)
    }

    /// Powers the node on with the default boot pattern.
    pub fn boot(&self, node: &NodeId, link_sharers: u64) -> Result<BootReport> {
        let report = self
            .sim(node)
            .lock()
            .power_on(&self.env(link_sharers), &self.boot_pattern())?;
        self.sys.orchestrator.mark_booted(node)?;
        Ok(report)
    }

    /// Orchestration time for `provisions` provisions that together made
    /// `commits` journal commits: step costs run on `workers` lanes,
    /// commits are serialized.
    pub fn orchestration_us(&self, provisions: u64, commits: u64, steps: &[usize]) -> u64 {
        let per: u64 = steps.iter().map(|&i| self.profile.step_us[i]).sum();
        let lanes = self.profile.workers.max(1) as u64;
        provisions.div_ceil(lanes) * per + commits * self.profile.commit_us
    }
}

const ALL_STEPS: [usize; 5] = [0, 1, 2, 3, 4];
/// Recovery re-exports an existing clone: no clone step.
const RECOVER_STEPS: [usize; 4] = [0, 2, 3, 4];

pub fn run(spec: &BenchSpec) -> Result<BenchReport> {
    spec.validate()?;
    match spec.scenario {
        Scenario::ProvisionSingle => provision_single(spec),
        Scenario::ProvisionScaling => provision_scaling(spec),
        Scenario::ReprovisionVsFresh => reprovision_vs_fresh(spec),
        Scenario::TrafficCurves => traffic_curves(spec),
    }
}

fn lab_for(spec: &BenchSpec, nodes: usize) -> Result<Lab> {
    Lab::new(LabConfig {
        nodes,
        image_size: spec.image_size()?,
        seed: spec.seed,
        ..LabConfig::default()
    })
}

fn ms(us: u64) -> String {
    format!("{:.3}", us_to_ms(us))
}

/// Time for a node to become usable with a local-disk installer:
/// firmware, PXE into the installer, install, firmware again, boot.
fn diskful_phases(p: &DelayProfile, with_framework: bool) -> Vec<(&'static str, u64)> {
    let mut v = vec![
        ("firmware", p.firmware_us),
        ("pxe_installer", 2 * p.request_latency_us),
        ("os_install", p.os_install_us),
    ];
    if with_framework {
        v.push(("framework_install", p.framework_install_us));
    }
    v.push(("reboot_firmware", p.firmware_us));
    v.push(("os_boot", p.os_boot_us));
    v
}

fn provision_single(spec: &BenchSpec) -> Result<BenchReport> {
    let lab = lab_for(spec, 1)?;
    let before = lab.sys.journal.commits();
    let rec = lab.provision(&lab.golden.clone())?;
    let commits = lab.sys.journal.commits() - before;
    let report = lab.boot(&rec.node, 1)?;

    let mut csv = String::new();
    writeln!(csv, "{}", spec.scenario.header()).unwrap();
    let orch = lab.orchestration_us(1, commits, &ALL_STEPS);
    let mut m2_total = orch;
    writeln!(csv, "m2,orchestration,{}", ms(orch)).unwrap();
    for ph in &report.phases {
        writeln!(csv, "m2,{},{}", ph.name, ms(ph.us)).unwrap();
        m2_total += ph.us;
    }
    writeln!(csv, "m2,total,{}", ms(m2_total)).unwrap();
    let diskful = diskful_phases(&lab.profile, false);
    let disk_total: u64 = diskful.iter().map(|(_, us)| us).sum();
    for (name, us) in &diskful {
        writeln!(csv, "diskful,{name},{}", ms(*us)).unwrap();
    }
    writeln!(csv, "diskful,total,{}", ms(disk_total)).unwrap();
    let summary = format!(
        "provision_single: m2 {} ms, diskful {} ms ({:.2}x)",
        ms(m2_total),
        ms(disk_total),
        disk_total as f64 / m2_total as f64
    );
    Ok(BenchReport { csv, summary })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ScalingRow {
    pub n: u64,
    pub total_us: u64,
    pub overhead_us: u64,
}

/// Provisions and boots `n` nodes concurrently on a fresh lab.
pub fn scaling_point(spec: &BenchSpec, n: usize) -> Result<ScalingRow> {
    let lab = lab_for(spec, n)?;
    let before = lab.sys.journal.commits();
    let golden = lab.golden.clone();
    let records: Vec<ProvisionRecord> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..n).map(|_| s.spawn(|| lab.provision(&golden))).collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("provision thread"))
            .collect::<Result<_>>()
    })?;
    let commits = lab.sys.journal.commits() - before;
    let reports: Vec<BootReport> = std::thread::scope(|s| {
        let handles: Vec<_> = records
            .iter()
            .map(|r| {
                let lab = &lab;
                s.spawn(move || lab.boot(&r.node, n as u64))
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("boot thread"))
            .collect::<Result<_>>()
    })?;
    let overhead_us = lab.orchestration_us(n as u64, commits, &ALL_STEPS);
    let boot_us = reports.iter().map(|r| r.wall_time_us).max().unwrap_or(0);
    Ok(ScalingRow {
        n: n as u64,
        total_us: overhead_us + boot_us,
        overhead_us,
    })
}

fn provision_scaling(spec: &BenchSpec) -> Result<BenchReport> {
    let max_n = spec.int("max_n", 24, 1, 64)? as usize;
    let mut csv = String::new();
    writeln!(csv, "{}", spec.scenario.header()).unwrap();
    let mut rows = Vec::new();
    for n in 1..=max_n {
        let row = scaling_point(spec, n)?;
        writeln!(csv, "{},{},{}", row.n, ms(row.total_us), ms(row.overhead_us)).unwrap();
        rows.push(row);
    }
    let (first, last) = (rows[0], rows[rows.len() - 1]);
    let summary = format!(
        "provision_scaling: n={} takes {} ms more than n=1 ({} ms); overhead {} -> {} ms",
        last.n,
        ms(last.total_us - first.total_us),
        ms(first.total_us),
        ms(first.overhead_us),
        ms(last.overhead_us)
    );
    Ok(BenchReport { csv, summary })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReprovisionResult {
    /// `(path, total µs)` for each path, in CSV order.
    pub paths: Vec<(String, u64)>,
    /// Image data blocks copied by the recovery itself.
    pub recovery_blocks_copied: u64,
}

impl ReprovisionResult {
    pub fn total(&self, path: &str) -> u64 {
        self.paths.iter().find(|(p, _)| p == path).map(|(_, t)| *t).unwrap_or(0)
    }
}

/// A framework node is built, checkpointed and lost; compares bringing a
/// replacement up four ways.
pub fn reprovision_paths(spec: &BenchSpec) -> Result<ReprovisionResult> {
    let lab = lab_for(spec, 3)?;
    let p = lab.profile.clone();
    let orch = &lab.sys.orchestrator;

    // m2 fresh: provision, boot, install the framework onto the remote disk.
    let c0 = lab.sys.journal.commits();
    let a = lab.provision(&lab.golden.clone())?;
    let fresh_commits = lab.sys.journal.commits() - c0;
    let boot_a = lab.boot(&a.node, 1)?;
    let install = pattern::log_append(lab.image_size / 2, 64, spec.seed);
    lab.sim(&a.node).lock().run_workload(&lab.env(1), &install, 1)?;
    let m2_fresh = lab.orchestration_us(1, fresh_commits, &ALL_STEPS) + boot_a.wall_time_us + p.framework_install_us;

    // m2 from snapshot: checkpoint the installed node, provision another from it.
    let snap = orch.snapshot(&lab.tenant, &a.node, "framework")?;
    let c1 = lab.sys.journal.commits();
    let b = lab.provision(&snap)?;
    let snap_commits = lab.sys.journal.commits() - c1;
    let boot_b = lab.boot(&b.node, 1)?;
    let m2_snapshot = lab.orchestration_us(1, snap_commits, &ALL_STEPS) + boot_b.wall_time_us;
    orch.deprovision(&lab.tenant, &b.node, false)?;

    // m2 reprovision: node a dies, its disk moves to a replacement.
    lab.sim(&a.node).lock().inject_failure(&lab.env(1))?;
    let stats = lab.sys.store.stats();
    let c2 = lab.sys.journal.commits();
    let c = orch.recover(&lab.tenant, &a.node, None)?;
    let recover_commits = lab.sys.journal.commits() - c2;
    let copied = (lab.sys.store.stats() - stats).blocks_copied;
    let boot_c = lab.boot(&c.node, 1)?;
    let m2_reprovision = lab.orchestration_us(1, recover_commits, &RECOVER_STEPS) + boot_c.wall_time_us;

    let diskful: u64 = diskful_phases(&p, true).iter().map(|(_, us)| us).sum();
    Ok(ReprovisionResult {
        paths: vec![
            ("diskful_fresh".into(), diskful),
            ("m2_fresh".into(), m2_fresh),
            ("m2_from_snapshot".into(), m2_snapshot),
            ("m2_reprovision".into(), m2_reprovision),
        ],
        recovery_blocks_copied: copied,
    })
}

fn reprovision_vs_fresh(spec: &BenchSpec) -> Result<BenchReport> {
    let r = reprovision_paths(spec)?;
    let diskful = r.total("diskful_fresh");
    let mut csv = String::new();
    writeln!(csv, "{}", spec.scenario.header()).unwrap();
    for (path, us) in &r.paths {
        writeln!(csv, "{path},{},{:.3}", ms(*us), diskful as f64 / *us as f64).unwrap();
    }
    let summary = format!(
        "reprovision_vs_fresh: diskful/reprovision = {:.2}x",
        diskful as f64 / r.total("m2_reprovision") as f64
    );
    Ok(BenchReport { csv, summary })
}

/// Boots one node and runs the job trace `reps` times; returns the
/// per-repetition gateway deltas.
pub fn traffic_deltas(spec: &BenchSpec, trace: &AccessPattern, reps: usize) -> Result<Vec<TrafficCounters>> {
    let lab = lab_for(spec, 1)?;
    let rec = lab.provision(&lab.golden.clone())?;
    lab.boot(&rec.node, 1)?;
    let deltas = lab.sim(&rec.node).lock().run_workload(&lab.env(1), trace, reps)?;
    Ok(deltas)
}

pub fn default_job(image_size: u64, seed: u64) -> AccessPattern {
    pattern::mixed_job(image_size / 2, 256, image_size * 3 / 4, 64, seed)
}

fn traffic_curves(spec: &BenchSpec) -> Result<BenchReport> {
    let reps = spec.int("reps", 5, 1, 100)? as usize;
    let job = default_job(spec.image_size()?, spec.seed);
    let deltas = traffic_deltas(spec, &job, reps)?;
    let mut csv = String::new();
    writeln!(csv, "{}", spec.scenario.header()).unwrap();
    let (mut cr, mut cw) = (0, 0);
    for (i, d) in deltas.iter().enumerate() {
        cr += d.bytes_read;
        cw += d.bytes_written;
        writeln!(csv, "{},{},{},{cr},{cw}", i + 1, d.bytes_read, d.bytes_written).unwrap();
    }
    let summary = format!(
        "traffic_curves: {reps} reps, first-rep read {} B, last-rep read {} B, write {} B/rep",
        deltas[0].bytes_read,
        deltas[reps - 1].bytes_read,
        deltas[reps - 1].bytes_written
    );
    Ok(BenchReport { csv, summary })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spec_validation() {
        assert!(BenchSpec::new(Scenario::ProvisionScaling)
            .param("max_n", 0)
            .validate()
            .is_err());
        assert!(BenchSpec::new(Scenario::ProvisionScaling)
            .param("reps", 3)
            .validate()
            .is_err());
        assert!(BenchSpec::new(Scenario::TrafficCurves)
            .param("reps", "x")
            .validate()
            .is_err());
        assert!(BenchSpec::new(Scenario::TrafficCurves)
            .param("reps", 3)
            .validate()
            .is_ok());
        assert!("nope".parse::<Scenario>().is_err());
        assert_eq!("traffic_curves".parse::<Scenario>().unwrap(), Scenario::TrafficCurves);
    }

    #[test]
    fn dirty_environment_refused() {
        let lab = Lab::new(LabConfig {
            nodes: 1,
            image_size: 8 << 20,
            ..LabConfig::default()
        })
        .unwrap();
        lab.provision(&lab.golden.clone()).unwrap();
        let err = Lab::on(lab.sys.clone(), LabConfig::default()).err().unwrap();
        assert!(matches!(err, BenchError::DirtyEnvironment(1)));
    }

    #[test]
    fn orchestration_lanes() {
        let lab = Lab::new(LabConfig {
            nodes: 0,
            image_size: 8 << 20,
            ..LabConfig::default()
        })
        .unwrap();
        let per = lab.profile.orchestration_us();
        assert_eq!(lab.orchestration_us(1, 0, &ALL_STEPS), per);
        assert_eq!(lab.orchestration_us(8, 0, &ALL_STEPS), per);
        assert_eq!(lab.orchestration_us(9, 0, &ALL_STEPS), 2 * per);
    }
}
