//! Block target gateway: exports images as named targets, authorizes
//! initiators against the allowed set and their current tenant network
//! attachment, and counts all traffic it serves.

mod name;
pub mod wire;

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use name::{TargetName, TargetNameParts, DEFAULT_IQN_AUTHORITY, DEFAULT_IQN_DATE};
use wire::{Request, Response, Status};

use crate::image_store::{ImageStore, StoreError};
use crate::isolation::IsolationService;
use crate::journal::{Journal, JournalError, Record};
use crate::types::{ImageId, NodeId, TenantId};

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("target {0} not found")]
    NotFound(TargetName),
    #[error("image {0} not found")]
    ImageNotFound(ImageId),
    #[error("target {0} has been deleted")]
    TargetGone(TargetName),
    #[error("access denied")]
    AccessDenied,
    #[error("image {0} already has a read-write export")]
    AlreadyExported(ImageId),
    #[error("target {0} is read-only")]
    ReadOnlyTarget(TargetName),
    #[error("range {offset}+{len} outside image of {size} bytes")]
    OutOfBounds { offset: u64, len: u64, size: u64 },
    #[error(transparent)]
    Store(StoreError),
    #[error(transparent)]
    Journal(#[from] JournalError),
}

impl From<StoreError> for GatewayError {
    fn from(e: StoreError) -> Self {
        match e {
            StoreError::NotFound(id) => GatewayError::ImageNotFound(id),
            StoreError::AccessDenied { .. } => GatewayError::AccessDenied,
            StoreError::OutOfBounds { offset, len, size } => GatewayError::OutOfBounds { offset, len, size },
            StoreError::Journal(j) => GatewayError::Journal(j),
            other => GatewayError::Store(other),
        }
    }
}

impl GatewayError {
    pub fn status(&self) -> Status {
        match self {
            GatewayError::NotFound(_) | GatewayError::ImageNotFound(_) => Status::NotFound,
            GatewayError::TargetGone(_) => Status::TargetGone,
            GatewayError::AccessDenied => Status::AccessDenied,
            GatewayError::ReadOnlyTarget(_) => Status::ReadOnlyTarget,
            GatewayError::OutOfBounds { .. } => Status::OutOfBounds,
            _ => Status::Internal,
        }
    }
}

pub type Result<T, E = GatewayError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GatewayConfig {
    pub iqn_date: String,
    pub authority: String,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        Self {
            iqn_date: DEFAULT_IQN_DATE.into(),
            authority: DEFAULT_IQN_AUTHORITY.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetMode {
    ReadWrite,
    ReadOnly,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrafficCounters {
    pub bytes_read: u64,
    pub bytes_written: u64,
    pub read_ops: u64,
    pub write_ops: u64,
}

impl std::ops::Sub for TrafficCounters {
    type Output = TrafficCounters;
    fn sub(self, o: Self) -> Self {
        TrafficCounters {
            bytes_read: self.bytes_read - o.bytes_read,
            bytes_written: self.bytes_written - o.bytes_written,
            read_ops: self.read_ops - o.read_ops,
            write_ops: self.write_ops - o.write_ops,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TargetRecord {
    pub name: TargetName,
    pub image: ImageId,
    pub tenant: TenantId,
    pub mode: TargetMode,
    pub counters: TrafficCounters,
    pub allowed_initiators: BTreeSet<NodeId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum GatewayEvent {
    Created {
        name: TargetName,
        image: ImageId,
        tenant: TenantId,
        mode: TargetMode,
        allowed_initiators: BTreeSet<NodeId>,
    },
    Rebound {
        name: TargetName,
        image: ImageId,
    },
    Deleted {
        name: TargetName,
    },
}

#[derive(Debug, Default)]
struct Counters {
    bytes_read: AtomicU64,
    bytes_written: AtomicU64,
    read_ops: AtomicU64,
    write_ops: AtomicU64,
}

#[derive(Debug)]
struct Target {
    name: TargetName,
    tenant: TenantId,
    mode: TargetMode,
    allowed: BTreeSet<NodeId>,
    counters: Counters,
    /// Bound image. Reads share the lock; writes and rebinds are exclusive,
    /// which serializes writes to one target in arrival order.
    image: RwLock<ImageId>,
}

impl Target {
    fn snapshot(&self) -> TrafficCounters {
        TrafficCounters {
            bytes_read: self.counters.bytes_read.load(Ordering::SeqCst),
            bytes_written: self.counters.bytes_written.load(Ordering::SeqCst),
            read_ops: self.counters.read_ops.load(Ordering::SeqCst),
            write_ops: self.counters.write_ops.load(Ordering::SeqCst),
        }
    }

    fn record(&self) -> TargetRecord {
        TargetRecord {
            name: self.name.clone(),
            image: self.image.read().clone(),
            tenant: self.tenant.clone(),
            mode: self.mode,
            counters: self.snapshot(),
            allowed_initiators: self.allowed.clone(),
        }
    }
}

pub struct TargetGateway {
    config: GatewayConfig,
    journal: Arc<Journal>,
    store: Arc<ImageStore>,
    isolation: Arc<IsolationService>,
    targets: RwLock<BTreeMap<TargetName, Arc<Target>>>,
    tombstones: Mutex<HashSet<TargetName>>,
    ro_seq: AtomicU64,
}

impl TargetGateway {
    pub fn new(
        config: GatewayConfig,
        journal: Arc<Journal>,
        store: Arc<ImageStore>,
        isolation: Arc<IsolationService>,
    ) -> Self {
        Self {
            config,
            journal,
            store,
            isolation,
            targets: RwLock::new(BTreeMap::new()),
            tombstones: Mutex::new(HashSet::new()),
            ro_seq: AtomicU64::new(1),
        }
    }

    pub fn config(&self) -> &GatewayConfig {
        &self.config
    }

    fn lookup(&self, name: &TargetName) -> Result<Arc<Target>> {
        if let Some(t) = self.targets.read().get(name) {
            return Ok(t.clone());
        }
        if self.tombstones.lock().contains(name) {
            Err(GatewayError::TargetGone(name.clone()))
        } else {
            Err(GatewayError::NotFound(name.clone()))
        }
    }

    /// The read-write target name `image` gets when exported by `tenant`.
    pub fn name_for(&self, tenant: &TenantId, image: &ImageId) -> TargetName {
        TargetName::build(&self.config.iqn_date, &self.config.authority, tenant, image, None)
    }

    pub fn create_target(
        &self,
        tenant: &TenantId,
        image: &ImageId,
        mode: TargetMode,
        allowed_initiators: BTreeSet<NodeId>,
    ) -> Result<TargetName> {
        self.store.get_for(tenant, image)?;
        let mut targets = self.targets.write();
        let name = match mode {
            TargetMode::ReadWrite => {
                let exported = targets
                    .values()
                    .any(|t| t.mode == TargetMode::ReadWrite && *t.image.read() == *image);
                let name = self.name_for(tenant, image);
                // a rebound target keeps the name of the image it first exported
                if exported || targets.contains_key(&name) {
                    return Err(GatewayError::AlreadyExported(image.clone()));
                }
                name
            }
            TargetMode::ReadOnly => {
                let n = self.ro_seq.fetch_add(1, Ordering::SeqCst);
                TargetName::build(&self.config.iqn_date, &self.config.authority, tenant, image, Some(n))
            }
        };
        self.store.acquire_export(image)?;
        let ev = GatewayEvent::Created {
            name: name.clone(),
            image: image.clone(),
            tenant: tenant.clone(),
            mode,
            allowed_initiators: allowed_initiators.clone(),
        };
        if let Err(e) = self.journal.append(&Record::Gateway(ev)) {
            self.store.release_export(image);
            return Err(e.into());
        }
        self.insert(
            name.clone(),
            image.clone(),
            tenant.clone(),
            mode,
            allowed_initiators,
            &mut targets,
        );
        Ok(name)
    }

    fn insert(
        &self,
        name: TargetName,
        image: ImageId,
        tenant: TenantId,
        mode: TargetMode,
        allowed: BTreeSet<NodeId>,
        targets: &mut BTreeMap<TargetName, Arc<Target>>,
    ) {
        if let Some(n) = name.parts().read_only {
            self.ro_seq.fetch_max(n + 1, Ordering::SeqCst);
        }
        self.tombstones.lock().remove(&name);
        targets.insert(
            name.clone(),
            Arc::new(Target {
                name,
                tenant,
                mode,
                allowed,
                counters: Counters::default(),
                image: RwLock::new(image),
            }),
        );
    }

    pub fn delete_target(&self, tenant: &TenantId, name: &TargetName) -> Result<()> {
        let mut targets = self.targets.write();
        let t = targets.get(name).ok_or_else(|| GatewayError::NotFound(name.clone()))?;
        if &t.tenant != tenant {
            return Err(GatewayError::AccessDenied);
        }
        self.journal
            .append(&Record::Gateway(GatewayEvent::Deleted { name: name.clone() }))?;
        let t = targets.remove(name).expect("present");
        self.store.release_export(&t.image.read());
        self.tombstones.lock().insert(name.clone());
        Ok(())
    }

    fn authorize(&self, initiator: &NodeId, t: &Target) -> Result<()> {
        if !t.allowed.contains(initiator) {
            return Err(GatewayError::AccessDenied);
        }
        match self.isolation.attached_network(initiator) {
            Some(net) if net == t.tenant => Ok(()),
            _ => Err(GatewayError::AccessDenied),
        }
    }

    pub fn target_read(&self, initiator: &NodeId, name: &TargetName, offset: u64, len: u64) -> Result<Vec<u8>> {
        let t = self.lookup(name)?;
        self.authorize(initiator, &t)?;
        let image = t.image.read();
        let data = self.store.read_range(&image, offset, len)?;
        t.counters.bytes_read.fetch_add(len, Ordering::SeqCst);
        t.counters.read_ops.fetch_add(1, Ordering::SeqCst);
        Ok(data)
    }

    pub fn target_write(&self, initiator: &NodeId, name: &TargetName, offset: u64, data: &[u8]) -> Result<()> {
        let t = self.lookup(name)?;
        self.authorize(initiator, &t)?;
        if t.mode == TargetMode::ReadOnly {
            return Err(GatewayError::ReadOnlyTarget(name.clone()));
        }
        let image = t.image.write();
        self.store.write_range(&image, offset, data)?;
        t.counters.bytes_written.fetch_add(data.len() as u64, Ordering::SeqCst);
        t.counters.write_ops.fetch_add(1, Ordering::SeqCst);
        Ok(())
    }

    /// Swaps the image behind a read-write target. `swap` runs with target
    /// I/O quiesced and returns the new image to bind.
    pub fn rebind_with<F>(&self, name: &TargetName, swap: F) -> Result<ImageId>
    where
        F: FnOnce(&ImageId) -> Result<ImageId>,
    {
        let t = self.lookup(name)?;
        let mut image = t.image.write();
        let new = swap(&image)?;
        if new == *image {
            return Ok(new);
        }
        self.store.acquire_export(&new)?;
        let ev = GatewayEvent::Rebound {
            name: name.clone(),
            image: new.clone(),
        };
        if let Err(e) = self.journal.append(&Record::Gateway(ev)) {
            self.store.release_export(&new);
            return Err(e.into());
        }
        self.store.release_export(&image);
        *image = new.clone();
        Ok(new)
    }

    /// Size of the exported disk, as an authorized initiator sees it.
    pub fn target_capacity(&self, initiator: &NodeId, name: &TargetName) -> Result<u64> {
        let t = self.lookup(name)?;
        self.authorize(initiator, &t)?;
        let image = t.image.read();
        let rec = self
            .store
            .get(&image)
            .ok_or_else(|| GatewayError::ImageNotFound(image.clone()))?;
        Ok(rec.virtual_size)
    }

    pub fn get_traffic(&self, name: &TargetName) -> Result<TrafficCounters> {
        let t = self.targets.read().get(name).cloned();
        t.map(|t| t.snapshot())
            .ok_or_else(|| GatewayError::NotFound(name.clone()))
    }

    pub fn get_target(&self, name: &TargetName) -> Result<TargetRecord> {
        let t = self.targets.read().get(name).cloned();
        t.map(|t| t.record())
            .ok_or_else(|| GatewayError::NotFound(name.clone()))
    }

    pub fn list_targets(&self) -> Vec<TargetRecord> {
        self.targets.read().values().map(|t| t.record()).collect()
    }

    /// Live targets bound to `image`.
    pub fn targets_for_image(&self, image: &ImageId) -> Vec<TargetName> {
        self.targets
            .read()
            .values()
            .filter(|t| *t.image.read() == *image)
            .map(|t| t.name.clone())
            .collect()
    }

    /// Handles one framed request from `initiator` and returns the framed
    /// response.
    pub fn serve_frame(&self, initiator: &NodeId, frame: &[u8]) -> Vec<u8> {
        let resp = match wire::decode_request(frame) {
            Err(e) => Response {
                status: Status::BadRequest,
                payload: e.to_string().into_bytes(),
            },
            Ok(req) => self.serve(initiator, req),
        };
        wire::encode_response(&resp)
    }

    fn serve(&self, initiator: &NodeId, req: Request) -> Response {
        let result = match req {
            Request::Read { target, offset, len } => target
                .parse::<TargetName>()
                .map_err(|_| GatewayError::NotFound(TargetName::unchecked(target)))
                .and_then(|name| self.target_read(initiator, &name, offset, len as u64)),
            Request::Write { target, offset, data } => target
                .parse::<TargetName>()
                .map_err(|_| GatewayError::NotFound(TargetName::unchecked(target)))
                .and_then(|name| self.target_write(initiator, &name, offset, &data).map(|_| Vec::new())),
        };
        match result {
            Ok(payload) => Response {
                status: Status::Ok,
                payload,
            },
            Err(e) => Response {
                status: e.status(),
                payload: e.to_string().into_bytes(),
            },
        }
    }

    pub(crate) fn replay(&self, ev: &GatewayEvent) -> Result<()> {
        let mut targets = self.targets.write();
        match ev {
            GatewayEvent::Created {
                name,
                image,
                tenant,
                mode,
                allowed_initiators,
            } => {
                self.store.acquire_export(image)?;
                self.insert(
                    name.clone(),
                    image.clone(),
                    tenant.clone(),
                    *mode,
                    allowed_initiators.clone(),
                    &mut targets,
                );
            }
            GatewayEvent::Rebound { name, image } => {
                let t = targets.get(name).ok_or_else(|| GatewayError::NotFound(name.clone()))?;
                self.store.acquire_export(image)?;
                let mut bound = t.image.write();
                self.store.release_export(&bound);
                *bound = image.clone();
            }
            GatewayEvent::Deleted { name } => {
                let t = targets
                    .remove(name)
                    .ok_or_else(|| GatewayError::NotFound(name.clone()))?;
                self.store.release_export(&t.image.read());
                self.tombstones.lock().insert(name.clone());
            }
        }
        Ok(())
    }
}

/// Initiator-side handle that talks to the gateway only through encoded
/// frames.
pub struct Session {
    gateway: Arc<TargetGateway>,
    initiator: NodeId,
    target: TargetName,
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("{status:?}: {message}")]
pub struct SessionError {
    pub status: Status,
    pub message: String,
}

impl Session {
    pub fn new(gateway: Arc<TargetGateway>, initiator: NodeId, target: TargetName) -> Self {
        Self {
            gateway,
            initiator,
            target,
        }
    }

    pub fn target(&self) -> &TargetName {
        &self.target
    }

    fn roundtrip(&self, req: &Request) -> std::result::Result<Vec<u8>, SessionError> {
        let frame = wire::encode_request(req).map_err(|e| SessionError {
            status: Status::BadRequest,
            message: e.to_string(),
        })?;
        let reply = self.gateway.serve_frame(&self.initiator, &frame);
        let resp = wire::decode_response(&reply).map_err(|e| SessionError {
            status: Status::Internal,
            message: e.to_string(),
        })?;
        if resp.status == Status::Ok {
            Ok(resp.payload)
        } else {
            Err(SessionError {
                status: resp.status,
                message: String::from_utf8_lossy(&resp.payload).into_owned(),
            })
        }
    }

    pub fn read(&self, offset: u64, len: u32) -> std::result::Result<Vec<u8>, SessionError> {
        self.roundtrip(&Request::Read {
            target: self.target.to_string(),
            offset,
            len,
        })
    }

    pub fn write(&self, offset: u64, data: &[u8]) -> std::result::Result<(), SessionError> {
        self.roundtrip(&Request::Write {
            target: self.target.to_string(),
            offset,
            data: data.to_vec(),
        })
        .map(|_| ())
    }
}
