//! Node pool and tenant network membership. Allocation and attachment are
//! the multi-tenancy boundary the gateway consults on every I/O.

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use parking_lot::RwLock;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::journal::{Journal, JournalError, Record};
use crate::types::{MacAddress, NodeId, TenantId};

#[derive(Debug, Error)]
pub enum IsolationError {
    #[error("node {0} not found")]
    NotFound(NodeId),
    #[error("mac {0} already registered")]
    DuplicateMac(MacAddress),
    #[error("node {0} is already allocated")]
    NodeBusy(NodeId),
    #[error("node {0} is marked failed")]
    NodeFailed(NodeId),
    #[error("no free healthy node in the pool")]
    PoolExhausted,
    #[error("node {0} is not allocated")]
    NotAllocated(NodeId),
    #[error("node {node} is allocated to another tenant")]
    WrongTenant { node: NodeId },
    #[error(transparent)]
    Journal(#[from] JournalError),
}

pub type Result<T, E = IsolationError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolState {
    Free,
    Allocated,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Health {
    Ok,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeRecord {
    pub id: NodeId,
    pub mac: MacAddress,
    pub pool_state: PoolState,
    /// Tenant holding the allocation.
    pub owner: Option<TenantId>,
    pub attached_network: Option<TenantId>,
    pub health: Health,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum PoolEvent {
    Registered { node: NodeId, mac: MacAddress },
    Allocated { node: NodeId, tenant: TenantId },
    Freed { node: NodeId },
    Attached { node: NodeId, tenant: TenantId },
    Detached { node: NodeId },
    Health { node: NodeId, health: Health },
}

#[derive(Debug, Default)]
struct Pool {
    nodes: BTreeMap<NodeId, NodeRecord>,
    by_mac: HashMap<MacAddress, NodeId>,
    next_seq: u64,
}

impl Pool {
    fn node(&self, id: &NodeId) -> Result<&NodeRecord> {
        self.nodes.get(id).ok_or_else(|| IsolationError::NotFound(id.clone()))
    }

    fn apply(&mut self, ev: &PoolEvent) -> Result<()> {
        match ev {
            PoolEvent::Registered { node, mac } => {
                self.next_seq = self.next_seq.max(node_seq(node) + 1);
                self.by_mac.insert(*mac, node.clone());
                self.nodes.insert(
                    node.clone(),
                    NodeRecord {
                        id: node.clone(),
                        mac: *mac,
                        pool_state: PoolState::Free,
                        owner: None,
                        attached_network: None,
                        health: Health::Ok,
                    },
                );
            }
            PoolEvent::Allocated { node, tenant } => {
                let n = self.node_mut(node)?;
                n.pool_state = PoolState::Allocated;
                n.owner = Some(tenant.clone());
            }
            PoolEvent::Freed { node } => {
                let n = self.node_mut(node)?;
                n.pool_state = PoolState::Free;
                n.owner = None;
                n.attached_network = None;
            }
            PoolEvent::Attached { node, tenant } => {
                self.node_mut(node)?.attached_network = Some(tenant.clone());
            }
            PoolEvent::Detached { node } => {
                self.node_mut(node)?.attached_network = None;
            }
            PoolEvent::Health { node, health } => {
                self.node_mut(node)?.health = *health;
            }
        }
        Ok(())
    }

    fn node_mut(&mut self, id: &NodeId) -> Result<&mut NodeRecord> {
        self.nodes
            .get_mut(id)
            .ok_or_else(|| IsolationError::NotFound(id.clone()))
    }
}

fn node_seq(node: &NodeId) -> u64 {
    node.as_str()
        .strip_prefix("node-")
        .and_then(|s| s.parse().ok())
        .unwrap_or(0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolCounts {
    pub registered: usize,
    pub free: usize,
    pub allocated: usize,
}

pub struct IsolationService {
    journal: Arc<Journal>,
    pool: RwLock<Pool>,
}

impl IsolationService {
    pub fn new(journal: Arc<Journal>) -> Self {
        Self {
            journal,
            pool: RwLock::new(Pool {
                next_seq: 1,
                ..Pool::default()
            }),
        }
    }

    fn commit(&self, pool: &mut Pool, ev: PoolEvent) -> Result<()> {
        self.journal.append(&Record::Pool(ev.clone()))?;
        pool.apply(&ev)
    }

    pub fn register_node(&self, mac: MacAddress) -> Result<NodeId> {
        let mut pool = self.pool.write();
        if pool.by_mac.contains_key(&mac) {
            return Err(IsolationError::DuplicateMac(mac));
        }
        let node = NodeId::from_seq(pool.next_seq);
        self.commit(
            &mut pool,
            PoolEvent::Registered {
                node: node.clone(),
                mac,
            },
        )?;
        Ok(node)
    }

    fn pick(pool: &Pool, node: Option<&NodeId>) -> Result<NodeId> {
        match node {
            Some(id) => {
                let n = pool.node(id)?;
                if n.pool_state == PoolState::Allocated {
                    Err(IsolationError::NodeBusy(id.clone()))
                } else if n.health == Health::Failed {
                    Err(IsolationError::NodeFailed(id.clone()))
                } else {
                    Ok(id.clone())
                }
            }
            None => pool
                .nodes
                .values()
                .find(|n| n.pool_state == PoolState::Free && n.health == Health::Ok)
                .map(|n| n.id.clone())
                .ok_or(IsolationError::PoolExhausted),
        }
    }

    /// The node `allocate_node` would hand out right now, without allocating.
    pub fn candidate(&self, node: Option<&NodeId>) -> Result<NodeId> {
        Self::pick(&self.pool.read(), node)
    }

    /// Allocates the requested node, or the lowest-numbered free healthy node.
    pub fn allocate_node(&self, tenant: &TenantId, node: Option<&NodeId>) -> Result<NodeId> {
        let mut pool = self.pool.write();
        let id = Self::pick(&pool, node)?;
        self.commit(
            &mut pool,
            PoolEvent::Allocated {
                node: id.clone(),
                tenant: tenant.clone(),
            },
        )?;
        Ok(id)
    }

    /// Returns an allocated node to the pool, detaching it first.
    pub fn free_node(&self, node: &NodeId) -> Result<()> {
        let mut pool = self.pool.write();
        let n = pool.node(node)?;
        if n.pool_state == PoolState::Free {
            return Ok(());
        }
        if n.attached_network.is_some() {
            self.commit(&mut pool, PoolEvent::Detached { node: node.clone() })?;
        }
        self.commit(&mut pool, PoolEvent::Freed { node: node.clone() })
    }

    pub fn attach_network(&self, node: &NodeId, tenant: &TenantId) -> Result<()> {
        let mut pool = self.pool.write();
        let n = pool.node(node)?;
        match &n.owner {
            None => return Err(IsolationError::NotAllocated(node.clone())),
            Some(owner) if owner != tenant => return Err(IsolationError::WrongTenant { node: node.clone() }),
            _ => {}
        }
        if n.attached_network.as_ref() == Some(tenant) {
            return Ok(());
        }
        self.commit(
            &mut pool,
            PoolEvent::Attached {
                node: node.clone(),
                tenant: tenant.clone(),
            },
        )
    }

    pub fn detach_network(&self, node: &NodeId) -> Result<()> {
        let mut pool = self.pool.write();
        if pool.node(node)?.attached_network.is_none() {
            return Ok(());
        }
        self.commit(&mut pool, PoolEvent::Detached { node: node.clone() })
    }

    pub fn mark_failed(&self, node: &NodeId) -> Result<()> {
        self.set_health(node, Health::Failed)
    }

    pub fn repair(&self, node: &NodeId) -> Result<()> {
        self.set_health(node, Health::Ok)
    }

    fn set_health(&self, node: &NodeId, health: Health) -> Result<()> {
        let mut pool = self.pool.write();
        if pool.node(node)?.health == health {
            return Ok(());
        }
        self.commit(
            &mut pool,
            PoolEvent::Health {
                node: node.clone(),
                health,
            },
        )
    }

    pub fn attached_network(&self, node: &NodeId) -> Option<TenantId> {
        self.pool
            .read()
            .nodes
            .get(node)
            .and_then(|n| n.attached_network.clone())
    }

    pub fn get(&self, node: &NodeId) -> Result<NodeRecord> {
        self.pool.read().node(node).cloned()
    }

    pub fn by_mac(&self, mac: &MacAddress) -> Option<NodeId> {
        self.pool.read().by_mac.get(mac).cloned()
    }

    pub fn list(&self) -> Vec<NodeRecord> {
        self.pool.read().nodes.values().cloned().collect()
    }

    pub fn counts(&self) -> PoolCounts {
        let pool = self.pool.read();
        let allocated = pool
            .nodes
            .values()
            .filter(|n| n.pool_state == PoolState::Allocated)
            .count();
        PoolCounts {
            registered: pool.nodes.len(),
            free: pool.nodes.len() - allocated,
            allocated,
        }
    }

    pub(crate) fn replay(&self, ev: &PoolEvent) -> Result<()> {
        self.pool.write().apply(ev)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn svc() -> IsolationService {
        IsolationService::new(Arc::new(Journal::in_memory()))
    }

    fn mac(i: u8) -> MacAddress {
        MacAddress::new([0x52, 0x54, 0, 0, 0, i])
    }

    fn t(s: &str) -> TenantId {
        TenantId::new(s).unwrap()
    }

    #[test]
    fn register_24_all_free() {
        let s = svc();
        for i in 0..24 {
            s.register_node(mac(i)).unwrap();
        }
        assert_eq!(
            s.counts(),
            PoolCounts {
                registered: 24,
                free: 24,
                allocated: 0
            }
        );
    }

    #[test]
    fn duplicate_mac() {
        let s = svc();
        s.register_node(mac(1)).unwrap();
        assert!(matches!(s.register_node(mac(1)), Err(IsolationError::DuplicateMac(_))));
    }

    #[test]
    fn exhaustion_and_busy() {
        let s = svc();
        let nodes: Vec<_> = (0..3).map(|i| s.register_node(mac(i)).unwrap()).collect();
        for _ in 0..3 {
            s.allocate_node(&t("a"), None).unwrap();
        }
        assert!(matches!(
            s.allocate_node(&t("a"), None),
            Err(IsolationError::PoolExhausted)
        ));
        assert!(matches!(
            s.allocate_node(&t("b"), Some(&nodes[1])),
            Err(IsolationError::NodeBusy(_))
        ));
    }

    #[test]
    fn allocate_free_conserves_counts() {
        let s = svc();
        for i in 0..4 {
            s.register_node(mac(i)).unwrap();
        }
        let before = s.counts();
        let n = s.allocate_node(&t("a"), None).unwrap();
        assert_eq!(s.counts().free, 3);
        s.attach_network(&n, &t("a")).unwrap();
        s.free_node(&n).unwrap();
        assert_eq!(s.counts(), before);
        assert_eq!(s.get(&n).unwrap().attached_network, None);
    }

    #[test]
    fn attach_wrong_tenant_and_unallocated() {
        let s = svc();
        let n = s.register_node(mac(1)).unwrap();
        assert!(matches!(
            s.attach_network(&n, &t("a")),
            Err(IsolationError::NotAllocated(_))
        ));
        s.allocate_node(&t("a"), Some(&n)).unwrap();
        assert!(matches!(
            s.attach_network(&n, &t("b")),
            Err(IsolationError::WrongTenant { .. })
        ));
        s.attach_network(&n, &t("a")).unwrap();
        assert_eq!(s.attached_network(&n), Some(t("a")));
    }

    #[test]
    fn detach_is_idempotent() {
        let s = svc();
        let n = s.register_node(mac(1)).unwrap();
        s.allocate_node(&t("a"), Some(&n)).unwrap();
        s.attach_network(&n, &t("a")).unwrap();
        s.detach_network(&n).unwrap();
        s.detach_network(&n).unwrap();
        assert_eq!(s.attached_network(&n), None);
    }

    #[test]
    fn failed_nodes_are_skipped_until_repaired() {
        let s = svc();
        let a = s.register_node(mac(1)).unwrap();
        let b = s.register_node(mac(2)).unwrap();
        s.mark_failed(&a).unwrap();
        s.mark_failed(&a).unwrap();
        assert_eq!(s.allocate_node(&t("x"), None).unwrap(), b);
        assert!(matches!(
            s.allocate_node(&t("x"), None),
            Err(IsolationError::PoolExhausted)
        ));
        assert!(matches!(
            s.allocate_node(&t("x"), Some(&a)),
            Err(IsolationError::NodeFailed(_))
        ));
        s.repair(&a).unwrap();
        assert_eq!(s.allocate_node(&t("x"), None).unwrap(), a);
    }

    #[test]
    fn failed_node_attachment_stays_queryable() {
        let s = svc();
        let n = s.register_node(mac(1)).unwrap();
        s.allocate_node(&t("a"), Some(&n)).unwrap();
        s.attach_network(&n, &t("a")).unwrap();
        s.mark_failed(&n).unwrap();
        let rec = s.get(&n).unwrap();
        assert_eq!(rec.health, Health::Failed);
        assert_eq!(rec.attached_network, Some(t("a")));
    }

    #[test]
    fn concurrent_allocation_is_linearizable() {
        let s = Arc::new(svc());
        for i in 0..50 {
            s.register_node(MacAddress::new([2, 0, 0, 0, 0, i])).unwrap();
        }
        let handles: Vec<_> = (0..100)
            .map(|i| {
                let s = s.clone();
                std::thread::spawn(move || s.allocate_node(&t(&format!("t{}", i % 7)), None).ok())
            })
            .collect();
        let got: Vec<NodeId> = handles.into_iter().filter_map(|h| h.join().unwrap()).collect();
        assert_eq!(got.len(), 50);
        let unique: std::collections::BTreeSet<_> = got.iter().collect();
        assert_eq!(unique.len(), 50);
        assert_eq!(s.counts().free, 0);
    }

    #[test]
    fn replay_rebuilds_state() {
        let j = Arc::new(Journal::in_memory());
        let s = IsolationService::new(j.clone());
        let n = s.register_node(mac(1)).unwrap();
        s.allocate_node(&t("a"), Some(&n)).unwrap();
        s.attach_network(&n, &t("a")).unwrap();
        s.mark_failed(&n).unwrap();
        let (j2, records) = Journal::from_memory(j.raw_bytes().unwrap());
        let s2 = IsolationService::new(Arc::new(j2));
        for r in records {
            if let Record::Pool(ev) = r {
                s2.replay(&ev).unwrap();
            }
        }
        assert_eq!(s2.list(), s.list());
        assert_eq!(s2.register_node(mac(2)).unwrap(), NodeId::from_seq(2));
    }
}
