//! Provisioning state machine. Owns the node → image mapping and sequences
//! the storage, gateway, netboot and isolation services for provision,
//! deprovision, snapshot and recovery.
//!
//! Every mapping change is a journal commit. Provisions that fail part way
//! are compensated in reverse step order; after a crash,
//! [`Orchestrator::recover_pending`] rolls half-done provisions back and
//! half-done deprovisions and snapshots forward.

mod recovery;
mod state;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::Arc;

use parking_lot::{ArcMutexGuard, Condvar, Mutex, RawMutex, RwLock};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use recovery::{RecoveryReport, SweepReport};
pub use state::{ProvisionState, Step};

use crate::image_store::{ImageKind, ImageStore, StoreError};
use crate::isolation::{Health, IsolationError, IsolationService, NodeRecord, PoolState};
use crate::journal::{Journal, JournalError, Record};
use crate::netboot::{NetbootError, NetbootService};
use crate::target_gateway::{GatewayError, TargetGateway, TargetMode, TargetName, TrafficCounters};
use crate::types::{now_millis, ImageId, NodeId, TenantId};

/// Name prefixes the orchestrator reserves for images it manages.
pub const CLONE_PREFIX: &str = "prov-";
pub const KEPT_PREFIX: &str = "kept-";

pub fn is_reserved_name(name: &str) -> bool {
    name.starts_with(CLONE_PREFIX) || name.starts_with(KEPT_PREFIX)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ProvisionMode {
    Fresh,
    /// Re-export of the disk of record `replaces` to a new node.
    Recover {
        replaces: u64,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProvisionRecord {
    pub id: u64,
    pub node: NodeId,
    pub tenant: TenantId,
    /// The node's writable disk. Unset until the clone step commits.
    pub clone_image: Option<ImageId>,
    pub source_image: ImageId,
    pub target: Option<TargetName>,
    pub state: ProvisionState,
    pub created_at: u64,
    /// Name of the current writable clone; changes with each snapshot.
    pub clone_name: String,
    pub generation: u32,
    pub keep_image: bool,
    pub mode: ProvisionMode,
    pub idempotency_key: Option<String>,
    pub pending_snapshot: Option<String>,
}

impl ProvisionRecord {
    pub fn kept_name(&self) -> String {
        format!("{KEPT_PREFIX}{}", self.id)
    }
}

fn clone_name(id: u64, generation: u32) -> String {
    if generation == 0 {
        format!("{CLONE_PREFIX}{id}")
    } else {
        format!("{CLONE_PREFIX}{id}.{generation}")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failing_step: Option<Step>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Outcome {
    Provisioned { record: ProvisionRecord },
    Deprovisioned { node: NodeId },
    Failed { error: ErrorBody },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum OrchestratorEvent {
    Begun {
        record: ProvisionRecord,
    },
    Transition {
        id: u64,
        to: ProvisionState,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        clone_image: Option<ImageId>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        target: Option<TargetName>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        keep_image: Option<bool>,
    },
    SnapshotBegun {
        id: u64,
        name: String,
    },
    SnapshotDone {
        id: u64,
        clone_image: ImageId,
        generation: u32,
    },
    Removed {
        id: u64,
    },
    Outcome {
        tenant: TenantId,
        key: String,
        outcome: Outcome,
    },
}

/// What a failed provision did and undid.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RollbackReport {
    pub node: NodeId,
    pub failing_step: Step,
    pub cause: String,
    /// Problems hit while compensating; empty when teardown was complete.
    pub compensation_errors: Vec<String>,
}

#[derive(Debug, Error)]
pub enum OrchestratorError {
    #[error("not found: {0}")]
    NotFound(String),
    #[error("access denied")]
    AccessDenied,
    #[error("no free healthy node")]
    PoolExhausted,
    #[error("node {0} is busy")]
    NodeBusy(NodeId),
    #[error("node {0} has not failed")]
    NodeNotFailed(NodeId),
    #[error("name {0:?} already in use")]
    DuplicateName(String),
    #[error("invalid name {0:?}")]
    InvalidName(String),
    #[error("image {0} backs a live node")]
    ImageBusy(ImageId),
    #[error("node {node} is {state}")]
    InvalidState { node: NodeId, state: ProvisionState },
    #[error("provision failed at {} step: {}", .0.failing_step, .0.cause)]
    Rollback(Box<RollbackReport>),
    #[error("{}", .0.message)]
    Replayed(ErrorBody),
    #[error("storage: {0}")]
    Store(StoreError),
    #[error("gateway: {0}")]
    Gateway(GatewayError),
    #[error("netboot: {0}")]
    Netboot(#[from] NetbootError),
    #[error("isolation: {0}")]
    Isolation(IsolationError),
    #[error(transparent)]
    Journal(#[from] JournalError),
    #[error("journal replay: {0}")]
    Corrupt(String),
}

impl From<StoreError> for OrchestratorError {
    fn from(e: StoreError) -> Self {
        match e {
            StoreError::NotFound(id) => Self::NotFound(id.to_string()),
            StoreError::AccessDenied { .. } => Self::AccessDenied,
            StoreError::DuplicateName(n) => Self::DuplicateName(n),
            StoreError::InvalidName(n) => Self::InvalidName(n),
            StoreError::Journal(j) => Self::Journal(j),
            other => Self::Store(other),
        }
    }
}

impl From<GatewayError> for OrchestratorError {
    fn from(e: GatewayError) -> Self {
        match e {
            GatewayError::NotFound(t) | GatewayError::TargetGone(t) => Self::NotFound(t.to_string()),
            GatewayError::AccessDenied => Self::AccessDenied,
            GatewayError::Journal(j) => Self::Journal(j),
            other => Self::Gateway(other),
        }
    }
}

impl From<IsolationError> for OrchestratorError {
    fn from(e: IsolationError) -> Self {
        match e {
            IsolationError::NotFound(n) => Self::NotFound(n.to_string()),
            IsolationError::PoolExhausted => Self::PoolExhausted,
            IsolationError::NodeBusy(n) | IsolationError::NodeFailed(n) => Self::NodeBusy(n),
            IsolationError::WrongTenant { .. } => Self::AccessDenied,
            IsolationError::Journal(j) => Self::Journal(j),
            other => Self::Isolation(other),
        }
    }
}

impl OrchestratorError {
    pub fn code(&self) -> &str {
        match self {
            Self::NotFound(_) => "not_found",
            Self::AccessDenied => "access_denied",
            Self::PoolExhausted => "pool_exhausted",
            Self::NodeBusy(_) => "node_busy",
            Self::NodeNotFailed(_) => "node_not_failed",
            Self::DuplicateName(_) => "duplicate_name",
            Self::InvalidName(_) => "invalid_name",
            Self::ImageBusy(_) => "image_busy",
            Self::InvalidState { .. } => "invalid_state",
            Self::Rollback(_) => "rollback",
            Self::Replayed(b) => &b.code,
            Self::Store(_) => "storage_error",
            Self::Gateway(_) => "gateway_error",
            Self::Netboot(_) => "netboot_error",
            Self::Isolation(_) => "isolation_error",
            Self::Journal(_) | Self::Corrupt(_) => "internal",
        }
    }

    pub fn failing_step(&self) -> Option<Step> {
        match self {
            Self::Rollback(r) => Some(r.failing_step),
            Self::Replayed(b) => b.failing_step,
            _ => None,
        }
    }

    pub fn body(&self) -> ErrorBody {
        ErrorBody {
            code: self.code().to_string(),
            message: self.to_string(),
            failing_step: self.failing_step(),
        }
    }
}

pub type Result<T, E = OrchestratorError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProvisionRequest {
    pub tenant: TenantId,
    #[serde(default)]
    pub node: Option<NodeId>,
    pub image: ImageId,
    #[serde(default)]
    pub idempotency_key: Option<String>,
}

#[derive(Debug, Clone)]
pub struct OrchestratorConfig {
    /// Mutating operations allowed to run at once.
    pub workers: usize,
}

impl Default for OrchestratorConfig {
    fn default() -> Self {
        Self { workers: 8 }
    }
}

/// One observed state change, for state-graph checks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TransitionEntry {
    pub id: u64,
    pub node: NodeId,
    pub from: Option<ProvisionState>,
    pub to: ProvisionState,
}

/// Decides whether `step` fails for `node`. Installed by tests.
pub type FaultHook = Arc<dyn Fn(Step, &NodeId) -> bool + Send + Sync>;

#[derive(Default)]
struct Faults {
    once: HashMap<Step, u32>,
    hook: Option<FaultHook>,
}

#[derive(Default)]
struct Mapping {
    records: BTreeMap<u64, ProvisionRecord>,
    by_node: HashMap<NodeId, u64>,
    outcomes: HashMap<(TenantId, String), Outcome>,
    next_id: u64,
}

impl Mapping {
    fn apply(&mut self, ev: &OrchestratorEvent) -> Result<Option<TransitionEntry>> {
        let corrupt = |m: String| OrchestratorError::Corrupt(m);
        Ok(match ev {
            OrchestratorEvent::Begun { record } => {
                if let Some(other) = self.by_node.get(&record.node) {
                    return Err(corrupt(format!(
                        "node {} already mapped by record {other}",
                        record.node
                    )));
                }
                self.next_id = self.next_id.max(record.id + 1);
                self.by_node.insert(record.node.clone(), record.id);
                self.records.insert(record.id, record.clone());
                Some(TransitionEntry {
                    id: record.id,
                    node: record.node.clone(),
                    from: None,
                    to: record.state,
                })
            }
            OrchestratorEvent::Transition {
                id,
                to,
                clone_image,
                target,
                keep_image,
            } => {
                let r = self
                    .records
                    .get_mut(id)
                    .ok_or_else(|| corrupt(format!("transition of unknown record {id}")))?;
                if !r.state.can_transition(*to) {
                    return Err(corrupt(format!("record {id}: illegal {} -> {to}", r.state)));
                }
                let from = r.state;
                r.state = *to;
                if let Some(c) = clone_image {
                    r.clone_image = Some(c.clone());
                }
                if let Some(t) = target {
                    r.target = Some(t.clone());
                }
                if let Some(k) = keep_image {
                    r.keep_image = *k;
                }
                Some(TransitionEntry {
                    id: *id,
                    node: r.node.clone(),
                    from: Some(from),
                    to: *to,
                })
            }
            OrchestratorEvent::SnapshotBegun { id, name } => {
                let r = self
                    .records
                    .get_mut(id)
                    .ok_or_else(|| corrupt(format!("snapshot of unknown record {id}")))?;
                r.pending_snapshot = Some(name.clone());
                None
            }
            OrchestratorEvent::SnapshotDone {
                id,
                clone_image,
                generation,
            } => {
                let r = self
                    .records
                    .get_mut(id)
                    .ok_or_else(|| corrupt(format!("snapshot of unknown record {id}")))?;
                r.pending_snapshot = None;
                r.clone_image = Some(clone_image.clone());
                r.generation = *generation;
                r.clone_name = clone_name(r.id, *generation);
                None
            }
            OrchestratorEvent::Removed { id } => {
                let r = self
                    .records
                    .remove(id)
                    .ok_or_else(|| corrupt(format!("removal of unknown record {id}")))?;
                if !r.state.removable() {
                    return Err(corrupt(format!("record {id} removed while {}", r.state)));
                }
                self.by_node.remove(&r.node);
                None
            }
            OrchestratorEvent::Outcome { tenant, key, outcome } => {
                self.outcomes.insert((tenant.clone(), key.clone()), outcome.clone());
                None
            }
        })
    }

    fn live_for(&self, tenant: &TenantId, node: &NodeId) -> Result<ProvisionRecord> {
        let rec = self
            .by_node
            .get(node)
            .and_then(|id| self.records.get(id))
            .ok_or_else(|| OrchestratorError::NotFound(format!("no provision on {node}")))?;
        if &rec.tenant != tenant {
            return Err(OrchestratorError::AccessDenied);
        }
        Ok(rec.clone())
    }
}

/// Counting semaphore bounding concurrent mutating operations.
struct Workers {
    free: Mutex<usize>,
    cv: Condvar,
}

struct Permit<'a>(&'a Workers);

impl Workers {
    fn new(n: usize) -> Self {
        Self {
            free: Mutex::new(n.max(1)),
            cv: Condvar::new(),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut free = self.free.lock();
        while *free == 0 {
            self.cv.wait(&mut free);
        }
        *free -= 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.free.lock() += 1;
        self.0.cv.notify_one();
    }
}

type LockMap<K> = Mutex<HashMap<K, Arc<Mutex<()>>>>;
type Guard = ArcMutexGuard<RawMutex, ()>;

fn lock_for<K: std::hash::Hash + Eq + Clone>(map: &LockMap<K>, key: &K) -> Guard {
    let m = map.lock().entry(key.clone()).or_default().clone();
    m.lock_arc()
}

pub struct Orchestrator {
    journal: Arc<Journal>,
    store: Arc<ImageStore>,
    isolation: Arc<IsolationService>,
    gateway: Arc<TargetGateway>,
    netboot: Arc<NetbootService>,
    mapping: RwLock<Mapping>,
    node_locks: LockMap<NodeId>,
    key_locks: LockMap<(TenantId, String)>,
    alloc: Mutex<()>,
    workers: Workers,
    faults: Mutex<Faults>,
    log: Mutex<Vec<TransitionEntry>>,
}

impl Orchestrator {
    pub fn new(
        config: OrchestratorConfig,
        journal: Arc<Journal>,
        store: Arc<ImageStore>,
        isolation: Arc<IsolationService>,
        gateway: Arc<TargetGateway>,
        netboot: Arc<NetbootService>,
    ) -> Self {
        Self {
            journal,
            store,
            isolation,
            gateway,
            netboot,
            mapping: RwLock::new(Mapping {
                next_id: 1,
                ..Mapping::default()
            }),
            node_locks: Mutex::new(HashMap::new()),
            key_locks: Mutex::new(HashMap::new()),
            alloc: Mutex::new(()),
            workers: Workers::new(config.workers),
            faults: Mutex::new(Faults::default()),
            log: Mutex::new(Vec::new()),
        }
    }

    fn commit(&self, ev: OrchestratorEvent) -> Result<()> {
        let mut m = self.mapping.write();
        if let OrchestratorEvent::Transition { id, to, .. } = &ev {
            let from = m.records.get(id).map(|r| r.state);
            if let Some(f) = from.filter(|f| !f.can_transition(*to)) {
                return Err(OrchestratorError::Corrupt(format!(
                    "record {id}: illegal transition {f} -> {to}"
                )));
            }
        }
        self.journal.append(&Record::Orchestrator(ev.clone()))?;
        if let Some(entry) = m.apply(&ev).expect("validated event applies") {
            self.log.lock().push(entry);
        }
        Ok(())
    }

    fn transition(
        &self,
        id: u64,
        to: ProvisionState,
        clone_image: Option<ImageId>,
        target: Option<TargetName>,
    ) -> Result<ProvisionRecord> {
        self.commit(OrchestratorEvent::Transition {
            id,
            to,
            clone_image,
            target,
            keep_image: None,
        })?;
        Ok(self.mapping.read().records[&id].clone())
    }

    pub(crate) fn replay(&self, ev: &OrchestratorEvent) -> Result<()> {
        self.mapping.write().apply(ev).map(|_| ())
    }

    /// Makes `step` fail the next `times` times it runs.
    pub fn fail_next(&self, step: Step, times: u32) {
        *self.faults.lock().once.entry(step).or_default() += times;
    }

    pub fn set_fault_hook(&self, hook: Option<FaultHook>) {
        self.faults.lock().hook = hook;
    }

    fn check_fault(&self, step: Step, node: &NodeId) -> std::result::Result<(), String> {
        let mut f = self.faults.lock();
        if let Some(n) = f.once.get_mut(&step) {
            if *n > 0 {
                *n -= 1;
                return Err(format!("injected {step} failure"));
            }
        }
        if f.hook.as_ref().is_some_and(|h| h(step, node)) {
            return Err(format!("injected {step} failure"));
        }
        Ok(())
    }

    /// Every state change applied in this process, in commit order.
    pub fn transition_log(&self) -> Vec<TransitionEntry> {
        self.log.lock().clone()
    }

    // ---- provision ----

    pub fn provision(&self, req: &ProvisionRequest) -> Result<ProvisionRecord> {
        let _permit = self.workers.acquire();
        let _key = req
            .idempotency_key
            .as_ref()
            .map(|k| lock_for(&self.key_locks, &(req.tenant.clone(), k.clone())));
        if let Some(key) = &req.idempotency_key {
            if let Some(prev) = self.previous_provision(&req.tenant, key) {
                return prev;
            }
        }
        let result = self.provision_inner(req);
        if let Some(key) = &req.idempotency_key {
            let outcome = match &result {
                Ok(record) => Some(Outcome::Provisioned { record: record.clone() }),
                Err(e @ OrchestratorError::Rollback(_)) => Some(Outcome::Failed { error: e.body() }),
                Err(_) => None,
            };
            if let Some(outcome) = outcome {
                self.commit(OrchestratorEvent::Outcome {
                    tenant: req.tenant.clone(),
                    key: key.clone(),
                    outcome,
                })?;
            }
        }
        result
    }

    fn previous_provision(&self, tenant: &TenantId, key: &str) -> Option<Result<ProvisionRecord>> {
        let m = self.mapping.read();
        match m.outcomes.get(&(tenant.clone(), key.to_string())) {
            Some(Outcome::Provisioned { record }) => {
                let current = m.records.get(&record.id).cloned();
                return Some(Ok(current.unwrap_or_else(|| record.clone())));
            }
            Some(Outcome::Failed { error }) => return Some(Err(OrchestratorError::Replayed(error.clone()))),
            Some(Outcome::Deprovisioned { .. }) | None => {}
        }
        // Completed before the outcome commit landed.
        m.records
            .values()
            .find(|r| &r.tenant == tenant && r.idempotency_key.as_deref() == Some(key) && r.state.is_steady())
            .cloned()
            .map(Ok)
    }

    fn check_source(&self, tenant: &TenantId, image: &ImageId) -> Result<()> {
        let rec = self.store.get_for(tenant, image)?;
        if rec.name.starts_with(CLONE_PREFIX) {
            return Err(OrchestratorError::ImageBusy(image.clone()));
        }
        Ok(())
    }

    fn provision_inner(&self, req: &ProvisionRequest) -> Result<ProvisionRecord> {
        self.check_source(&req.tenant, &req.image)?;
        let (rec, _node_guard) = {
            let _alloc = self.alloc.lock();
            let node = self.isolation.candidate(req.node.as_ref())?;
            let guard = lock_for(&self.node_locks, &node);
            let id = self.mapping.read().next_id;
            let record = ProvisionRecord {
                id,
                node,
                tenant: req.tenant.clone(),
                clone_image: None,
                source_image: req.image.clone(),
                target: None,
                state: ProvisionState::Allocating,
                created_at: now_millis(),
                clone_name: clone_name(id, 0),
                generation: 0,
                keep_image: false,
                mode: ProvisionMode::Fresh,
                idempotency_key: req.idempotency_key.clone(),
                pending_snapshot: None,
            };
            self.commit(OrchestratorEvent::Begun { record: record.clone() })?;
            let rec = self.run_step(record, Step::Allocate)?;
            (rec, guard)
        };
        let mut rec = rec;
        for step in [Step::Clone, Step::Export, Step::Configure, Step::Attach] {
            rec = self.run_step(rec, step)?;
        }
        Ok(rec)
    }

    /// Runs one step and commits its transition, compensating on failure.
    fn run_step(&self, rec: ProvisionRecord, step: Step) -> Result<ProvisionRecord> {
        match self.do_step(&rec, step) {
            Ok(next) => Ok(next),
            Err(cause) => {
                let current = self.mapping.read().records.get(&rec.id).cloned().unwrap_or(rec);
                let compensation_errors = self.roll_back(&current).err().map(|e| vec![e]).unwrap_or_default();
                Err(OrchestratorError::Rollback(Box::new(RollbackReport {
                    node: current.node,
                    failing_step: step,
                    cause,
                    compensation_errors,
                })))
            }
        }
    }

    fn do_step(&self, rec: &ProvisionRecord, step: Step) -> std::result::Result<ProvisionRecord, String> {
        self.check_fault(step, &rec.node)?;
        let s = |e: &dyn std::fmt::Display| e.to_string();
        let r = match step {
            Step::Allocate => {
                self.isolation
                    .allocate_node(&rec.tenant, Some(&rec.node))
                    .map_err(|e| s(&e))?;
                let next = match rec.mode {
                    ProvisionMode::Fresh => ProvisionState::Cloning,
                    ProvisionMode::Recover { .. } => ProvisionState::Exporting,
                };
                self.transition(rec.id, next, None, None)
            }
            Step::Clone => {
                let clone = self
                    .store
                    .linked_clone(&rec.tenant, &rec.source_image, &rec.clone_name)
                    .map_err(|e| s(&e))?;
                self.transition(rec.id, ProvisionState::Exporting, Some(clone), None)
            }
            Step::Export => {
                let clone = rec.clone_image.as_ref().ok_or("no clone to export")?;
                let target = self
                    .gateway
                    .create_target(
                        &rec.tenant,
                        clone,
                        TargetMode::ReadWrite,
                        BTreeSet::from([rec.node.clone()]),
                    )
                    .map_err(|e| s(&e))?;
                self.transition(rec.id, ProvisionState::Configuring, None, Some(target))
            }
            Step::Configure => {
                let target = rec.target.as_ref().ok_or("no target to configure")?;
                let mac = self.isolation.get(&rec.node).map_err(|e| s(&e))?.mac;
                self.netboot
                    .install_boot_config(&rec.node, mac, target)
                    .map_err(|e| s(&e))?;
                self.transition(rec.id, ProvisionState::Attaching, None, None)
            }
            Step::Attach => {
                self.isolation
                    .attach_network(&rec.node, &rec.tenant)
                    .map_err(|e| s(&e))?;
                self.transition(rec.id, ProvisionState::Ready, None, None)
            }
        };
        r.map_err(|e| s(&e))
    }

    /// Reverse-order teardown of whatever an unfinished provision built,
    /// then `rolled_back` and removal. Safe to repeat.
    fn roll_back(&self, rec: &ProvisionRecord) -> std::result::Result<(), String> {
        let mut errors = Vec::new();
        let mut note = |r: std::result::Result<(), String>| {
            if let Err(e) = r {
                errors.push(e);
            }
        };
        let owns_node = self.node_owned_by(rec);
        if owns_node {
            note(self.isolation.detach_network(&rec.node).map_err(|e| e.to_string()));
            note(self.netboot.remove_boot_config(&rec.node).map_err(|e| e.to_string()));
        }
        let clone = rec
            .clone_image
            .clone()
            .or_else(|| self.store.find_by_name(&rec.tenant, &rec.clone_name));
        if let Some(clone) = &clone {
            let name = rec
                .target
                .clone()
                .unwrap_or_else(|| self.gateway.name_for(&rec.tenant, clone));
            if let Ok(t) = self.gateway.get_target(&name) {
                if t.image == *clone && t.allowed_initiators.contains(&rec.node) {
                    note(
                        self.gateway
                            .delete_target(&rec.tenant, &name)
                            .map_err(|e| e.to_string()),
                    );
                }
            }
            note(self.dispose_clone(rec, clone).map_err(|e| e.to_string()));
        }
        if owns_node {
            note(self.isolation.free_node(&rec.node).map_err(|e| e.to_string()));
        }
        if !errors.is_empty() {
            return Err(errors.join("; "));
        }
        let state = self.mapping.read().records.get(&rec.id).map(|r| r.state);
        let res = (|| -> Result<()> {
            if state.is_some_and(|s| s != ProvisionState::RolledBack) {
                self.transition(rec.id, ProvisionState::RolledBack, None, None)?;
            }
            if state.is_some() {
                self.commit(OrchestratorEvent::Removed { id: rec.id })?;
            }
            Ok(())
        })();
        res.map_err(|e| e.to_string())
    }

    /// True when `rec` is the record holding its node's allocation.
    fn node_owned_by(&self, rec: &ProvisionRecord) -> bool {
        let Ok(node) = self.isolation.get(&rec.node) else {
            return false;
        };
        let mapped = self.mapping.read().by_node.get(&rec.node) == Some(&rec.id);
        mapped && node.owner.as_ref() == Some(&rec.tenant)
    }

    /// Disposes of an abandoned clone. A fresh clone is deleted; a recovered
    /// disk is the tenant's data and is kept under a `kept-` name.
    fn dispose_clone(&self, rec: &ProvisionRecord, clone: &ImageId) -> Result<()> {
        let Some(img) = self.store.get(clone) else {
            return Ok(());
        };
        let referenced = self
            .mapping
            .read()
            .records
            .values()
            .any(|r| r.id != rec.id && r.clone_image.as_ref() == Some(clone));
        if referenced {
            return Ok(());
        }
        match rec.mode {
            ProvisionMode::Fresh if !rec.keep_image => {
                if img.kind == ImageKind::Clone && img.child_count == 0 {
                    self.store.delete_image(&rec.tenant, clone)?;
                }
            }
            _ => {
                if img.name.starts_with(CLONE_PREFIX) {
                    self.store.rename_image(&rec.tenant, clone, &rec.kept_name())?;
                }
            }
        }
        Ok(())
    }

    // ---- deprovision ----

    pub fn deprovision(&self, tenant: &TenantId, node: &NodeId, keep_image: bool) -> Result<()> {
        self.deprovision_keyed(tenant, node, keep_image, None)
    }

    pub fn deprovision_keyed(
        &self,
        tenant: &TenantId,
        node: &NodeId,
        keep_image: bool,
        key: Option<&str>,
    ) -> Result<()> {
        let _permit = self.workers.acquire();
        let _key = key.map(|k| lock_for(&self.key_locks, &(tenant.clone(), k.to_string())));
        if let Some(k) = key {
            let m = self.mapping.read();
            if let Some(Outcome::Deprovisioned { node: n }) = m.outcomes.get(&(tenant.clone(), k.to_string())) {
                if n == node {
                    return Ok(());
                }
            }
        }
        let _guard = lock_for(&self.node_locks, node);
        let rec = self.mapping.read().live_for(tenant, node)?;
        if !rec.state.is_steady() {
            return Err(OrchestratorError::InvalidState {
                node: node.clone(),
                state: rec.state,
            });
        }
        self.commit(OrchestratorEvent::Transition {
            id: rec.id,
            to: ProvisionState::Deprovisioning,
            clone_image: None,
            target: None,
            keep_image: Some(keep_image),
        })?;
        let rec = self.mapping.read().records[&rec.id].clone();
        self.finish_deprovision(&rec)?;
        if let Some(k) = key {
            self.commit(OrchestratorEvent::Outcome {
                tenant: tenant.clone(),
                key: k.to_string(),
                outcome: Outcome::Deprovisioned { node: node.clone() },
            })?;
        }
        Ok(())
    }

    /// Teardown for a record in `deprovisioning`. Idempotent, so recovery
    /// can roll it forward from any cut point.
    fn finish_deprovision(&self, rec: &ProvisionRecord) -> Result<()> {
        if let Some(snapshot) = &rec.pending_snapshot {
            self.settle_snapshot(rec, snapshot)?;
        }
        let rec = self.mapping.read().records[&rec.id].clone();
        let owns_node = self.node_owned_by(&rec);
        if owns_node {
            self.isolation.detach_network(&rec.node)?;
            self.netboot.remove_boot_config(&rec.node)?;
        }
        if let Some(t) = &rec.target {
            if self.gateway.get_target(t).is_ok() {
                self.gateway.delete_target(&rec.tenant, t)?;
            }
        }
        let shared = rec.clone_image.as_ref().is_some_and(|c| {
            self.mapping
                .read()
                .records
                .values()
                .any(|r| r.id != rec.id && r.clone_image.as_ref() == Some(c))
        });
        if let Some(clone) = rec.clone_image.as_ref().filter(|_| !shared) {
            if let Some(img) = self.store.get(clone) {
                if rec.keep_image {
                    if img.name != rec.kept_name() {
                        self.store.rename_image(&rec.tenant, clone, &rec.kept_name())?;
                    }
                } else if img.child_count == 0 {
                    self.store.delete_image(&rec.tenant, clone)?;
                } else {
                    // Another image was cloned from this disk; keep it.
                    self.store.rename_image(&rec.tenant, clone, &rec.kept_name())?;
                }
            }
        }
        if owns_node {
            self.isolation.free_node(&rec.node)?;
        }
        self.commit(OrchestratorEvent::Removed { id: rec.id })
    }

    // ---- snapshot ----

    /// Checkpoints the node's disk as image `name`. The node continues on a
    /// fresh linked clone of the snapshot behind the same target.
    pub fn snapshot(&self, tenant: &TenantId, node: &NodeId, name: &str) -> Result<ImageId> {
        let _permit = self.workers.acquire();
        let _guard = lock_for(&self.node_locks, node);
        let rec = self.mapping.read().live_for(tenant, node)?;
        if is_reserved_name(name) {
            return Err(OrchestratorError::InvalidName(name.to_string()));
        }
        if !rec.state.is_steady() {
            return Err(OrchestratorError::InvalidState {
                node: node.clone(),
                state: rec.state,
            });
        }
        if self.store.find_by_name(tenant, name).is_some() {
            return Err(OrchestratorError::DuplicateName(name.to_string()));
        }
        let snapshot = rec.clone_image.clone().expect("steady record has a clone");
        self.commit(OrchestratorEvent::SnapshotBegun {
            id: rec.id,
            name: name.to_string(),
        })?;
        self.settle_snapshot(&rec, name)?;
        Ok(snapshot)
    }

    /// Drives a begun snapshot to completion: flatten the current clone into
    /// the named snapshot, clone it, and rebind the target. Each stage is
    /// skipped if already done.
    fn settle_snapshot(&self, rec: &ProvisionRecord, name: &str) -> Result<()> {
        let current = rec.clone_image.clone().expect("snapshot of record without clone");
        let generation = rec.generation + 1;
        let next_name = clone_name(rec.id, generation);
        let advance = |bound: &ImageId| -> std::result::Result<ImageId, StoreError> {
            if *bound != current {
                return Ok(bound.clone());
            }
            let img = self
                .store
                .get(&current)
                .ok_or_else(|| StoreError::NotFound(current.clone()))?;
            if img.kind == ImageKind::Clone {
                self.store.flatten_as(&current, Some(name))?;
            }
            match self.store.find_by_name(&rec.tenant, &next_name) {
                Some(existing) => Ok(existing),
                None => self.store.linked_clone(&rec.tenant, &current, &next_name),
            }
        };
        let next = match &rec.target {
            Some(t) if self.gateway.get_target(t).is_ok() => self
                .gateway
                .rebind_with(t, |bound| advance(bound).map_err(GatewayError::from))?,
            _ => advance(&current)?,
        };
        self.commit(OrchestratorEvent::SnapshotDone {
            id: rec.id,
            clone_image: next,
            generation,
        })
    }

    // ---- failure and recovery ----

    /// Operator signal that `node` is dead.
    pub fn mark_failed(&self, node: &NodeId) -> Result<()> {
        let _guard = lock_for(&self.node_locks, node);
        self.isolation.mark_failed(node)?;
        let rec = self.record_for_node(node);
        if let Some(rec) = rec {
            if matches!(rec.state, ProvisionState::Ready | ProvisionState::Booted) {
                self.transition(rec.id, ProvisionState::FailedNode, None, None)?;
            }
        }
        Ok(())
    }

    /// Records that the node booted from its target.
    pub fn mark_booted(&self, node: &NodeId) -> Result<()> {
        let _guard = lock_for(&self.node_locks, node);
        let rec = self.record_for_node(node);
        match rec {
            Some(r) if r.state == ProvisionState::Ready => {
                self.transition(r.id, ProvisionState::Booted, None, None)?;
                Ok(())
            }
            Some(_) => Ok(()),
            None => Err(OrchestratorError::NotFound(format!("no provision on {node}"))),
        }
    }

    /// Moves the failed node's disk to another node. No image data is
    /// copied: the same clone is exported again.
    pub fn recover(&self, tenant: &TenantId, failed: &NodeId, new_node: Option<&NodeId>) -> Result<ProvisionRecord> {
        let _permit = self.workers.acquire();
        let _failed_guard = lock_for(&self.node_locks, failed);
        let old = self.mapping.read().live_for(tenant, failed)?;
        if self.isolation.get(failed)?.health != Health::Failed {
            return Err(OrchestratorError::NodeNotFailed(failed.clone()));
        }
        if !old.state.is_steady() {
            return Err(OrchestratorError::InvalidState {
                node: failed.clone(),
                state: old.state,
            });
        }
        if let Some(snapshot) = &old.pending_snapshot {
            self.settle_snapshot(&old, snapshot)?;
        }
        if old.state != ProvisionState::FailedNode {
            self.transition(old.id, ProvisionState::FailedNode, None, None)?;
        }
        let old = self.mapping.read().records[&old.id].clone();
        let (rec, _guard) = {
            let _alloc = self.alloc.lock();
            let node = self.isolation.candidate(new_node)?;
            let guard = lock_for(&self.node_locks, &node);
            let id = self.mapping.read().next_id;
            let record = ProvisionRecord {
                id,
                node,
                tenant: tenant.clone(),
                clone_image: old.clone_image.clone(),
                source_image: old.source_image.clone(),
                target: None,
                state: ProvisionState::Allocating,
                created_at: now_millis(),
                clone_name: old.clone_name.clone(),
                generation: old.generation,
                keep_image: false,
                mode: ProvisionMode::Recover { replaces: old.id },
                idempotency_key: None,
                pending_snapshot: None,
            };
            self.commit(OrchestratorEvent::Begun { record: record.clone() })?;
            self.retire_failed(&old)?;
            let rec = self.run_step(record, Step::Allocate)?;
            (rec, guard)
        };
        let mut rec = rec;
        for step in [Step::Export, Step::Configure, Step::Attach] {
            rec = self.run_step(rec, step)?;
        }
        Ok(rec)
    }

    /// Tears down the failed node's side of a recovery and drops its record.
    fn retire_failed(&self, old: &ProvisionRecord) -> Result<()> {
        if self.isolation.get(&old.node)?.owner.as_ref() == Some(&old.tenant) {
            self.isolation.detach_network(&old.node)?;
            self.netboot.remove_boot_config(&old.node)?;
        }
        if let Some(t) = &old.target {
            if self.gateway.get_target(t).is_ok() {
                self.gateway.delete_target(&old.tenant, t)?;
            }
        }
        if self.isolation.get(&old.node)?.owner.as_ref() == Some(&old.tenant) {
            self.isolation.free_node(&old.node)?;
        }
        if self.mapping.read().records.get(&old.id).map(|r| r.state) == Some(ProvisionState::FailedNode) {
            self.transition(old.id, ProvisionState::Deprovisioning, None, None)?;
        }
        if self.mapping.read().records.contains_key(&old.id) {
            self.commit(OrchestratorEvent::Removed { id: old.id })?;
        }
        Ok(())
    }

    // ---- queries ----

    /// Nodes allocated to `tenant`.
    pub fn list_nodes(&self, tenant: &TenantId) -> Vec<NodeRecord> {
        self.isolation
            .list()
            .into_iter()
            .filter(|n| n.owner.as_ref() == Some(tenant))
            .collect()
    }

    /// Free healthy nodes. Carries no tenant information.
    pub fn free_nodes(&self) -> Vec<NodeId> {
        self.isolation
            .list()
            .into_iter()
            .filter(|n| n.pool_state == PoolState::Free && n.health == Health::Ok)
            .map(|n| n.id)
            .collect()
    }

    pub fn list_provisions(&self, tenant: &TenantId) -> Vec<ProvisionRecord> {
        self.mapping
            .read()
            .records
            .values()
            .filter(|r| &r.tenant == tenant)
            .cloned()
            .collect()
    }

    pub fn all_records(&self) -> Vec<ProvisionRecord> {
        self.mapping.read().records.values().cloned().collect()
    }

    pub fn get_record(&self, tenant: &TenantId, node: &NodeId) -> Result<ProvisionRecord> {
        self.mapping.read().live_for(tenant, node)
    }

    pub fn record_for_node(&self, node: &NodeId) -> Option<ProvisionRecord> {
        let m = self.mapping.read();
        m.by_node.get(node).and_then(|id| m.records.get(id)).cloned()
    }

    pub fn get_traffic(&self, tenant: &TenantId, node: &NodeId) -> Result<TrafficCounters> {
        let rec = self.get_record(tenant, node)?;
        let target = rec
            .target
            .ok_or_else(|| OrchestratorError::NotFound(format!("no target for {node}")))?;
        Ok(self.gateway.get_traffic(&target)?)
    }

    pub fn store(&self) -> &Arc<ImageStore> {
        &self.store
    }

    pub fn gateway(&self) -> &Arc<TargetGateway> {
        &self.gateway
    }

    pub fn isolation(&self) -> &Arc<IsolationService> {
        &self.isolation
    }

    pub fn netboot(&self) -> &Arc<NetbootService> {
        &self.netboot
    }
}
