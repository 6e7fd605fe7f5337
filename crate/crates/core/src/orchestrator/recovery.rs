use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::Serialize;

use super::{Orchestrator, OrchestratorError, ProvisionMode, ProvisionState, Result, CLONE_PREFIX};
use crate::image_store::ImageKind;
use crate::isolation::PoolState;
use crate::netboot::{self, BootScript};
use crate::types::ImageId;

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct RecoveryReport {
    pub rolled_back: Vec<u64>,
    pub rolled_forward: Vec<u64>,
    pub snapshots_settled: Vec<u64>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct SweepReport {
    pub violations: Vec<String>,
}

impl SweepReport {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }
}

impl Orchestrator {
    /// Brings every record to a steady state after a restart: provisions in
    /// flight are rolled back, deprovisions and snapshots rolled forward.
    pub fn recover_pending(&self) -> Result<RecoveryReport> {
        let mut report = RecoveryReport::default();
        let ids: Vec<u64> = self.mapping.read().records.keys().copied().collect();
        for id in ids {
            let Some(rec) = self.mapping.read().records.get(&id).cloned() else {
                continue;
            };
            if let Some(name) = &rec.pending_snapshot {
                self.settle_snapshot(&rec, name)?;
                report.snapshots_settled.push(id);
            }
            let rec = self.mapping.read().records[&id].clone();
            match rec.state {
                ProvisionState::Deprovisioning => {
                    self.finish_deprovision(&rec)?;
                    report.rolled_forward.push(id);
                }
                s if s.is_provisioning() || s == ProvisionState::RolledBack => {
                    if let ProvisionMode::Recover { replaces } = rec.mode {
                        let old = self.mapping.read().records.get(&replaces).cloned();
                        if let Some(old) = old {
                            self.retire_failed(&old)?;
                        }
                    }
                    self.roll_back(&rec).map_err(OrchestratorError::Corrupt)?;
                    report.rolled_back.push(id);
                }
                _ => {}
            }
        }
        Ok(report)
    }

    /// Global consistency check across all five services. Expects no
    /// operation in flight.
    pub fn sweep(&self) -> SweepReport {
        let mut v = Vec::new();
        let records = self.all_records();
        let targets = self.gateway.list_targets();
        let images = self.store.all_images();
        let nodes = self.isolation.list();

        let image_by_id: HashMap<&ImageId, _> = images.iter().map(|i| (&i.id, i)).collect();
        let node_by_id: HashMap<_, _> = nodes.iter().map(|n| (&n.id, n)).collect();
        let target_by_name: BTreeMap<_, _> = targets.iter().map(|t| (&t.name, t)).collect();

        for r in &records {
            let who = format!("record {} ({})", r.id, r.node);
            if !r.state.is_steady() {
                v.push(format!("{who} left in {}", r.state));
            }
            if r.pending_snapshot.is_some() {
                v.push(format!("{who} has an unsettled snapshot"));
            }
            match r.clone_image.as_ref().and_then(|c| image_by_id.get(c)) {
                None => v.push(format!("{who} clone missing")),
                Some(img) => {
                    if img.kind != ImageKind::Clone || img.tenant != r.tenant {
                        v.push(format!("{who} clone {} is not a tenant clone", img.id));
                    }
                }
            }
            match r.target.as_ref().and_then(|t| target_by_name.get(t)) {
                None => v.push(format!("{who} target missing")),
                Some(t) => {
                    if Some(&t.image) != r.clone_image.as_ref() {
                        v.push(format!("{who} target {} bound to {}", t.name, t.image));
                    }
                    if t.allowed_initiators != BTreeSet::from([r.node.clone()]) {
                        v.push(format!("{who} target {} admits {:?}", t.name, t.allowed_initiators));
                    }
                }
            }
            match node_by_id.get(&r.node) {
                None => v.push(format!("{who} node unknown")),
                Some(n) => {
                    if n.pool_state != PoolState::Allocated || n.owner.as_ref() != Some(&r.tenant) {
                        v.push(format!("{who} node not allocated to {}", r.tenant));
                    }
                    let attached = n.attached_network.as_ref() == Some(&r.tenant);
                    if matches!(r.state, ProvisionState::Ready | ProvisionState::Booted) && !attached {
                        v.push(format!("{who} not attached"));
                    }
                }
            }
            match self.netboot.config_for_node(&r.node) {
                None => v.push(format!("{who} has no boot config")),
                Some(a) => {
                    let chained = BootScript::parse(&a.script.render()).map(|(_, _, t)| t);
                    if chained.as_ref() != r.target.as_ref() || Some(&a.descriptor.target) != r.target.as_ref() {
                        v.push(format!("{who} boot config names another target"));
                    }
                }
            }
        }

        let record_targets: BTreeSet<_> = records.iter().filter_map(|r| r.target.as_ref()).collect();
        for t in &targets {
            if !record_targets.contains(&t.name) {
                v.push(format!("orphan target {}", t.name));
            }
        }

        let record_nodes: BTreeSet<_> = records.iter().map(|r| &r.node).collect();
        for node in self.netboot.configured_nodes() {
            if !record_nodes.contains(&node) {
                v.push(format!("orphan boot config for {node}"));
            }
        }
        if let Some(root) = &self.netboot.config().root {
            match netboot::scan_artifacts(root) {
                Ok(files) if files.len() != 3 * self.netboot.configured_nodes().len() => {
                    v.push(format!(
                        "{} artifact files on disk for {} configs",
                        files.len(),
                        self.netboot.configured_nodes().len()
                    ));
                }
                Err(e) => v.push(format!("artifact scan failed: {e}")),
                _ => {}
            }
        }

        for n in &nodes {
            if n.pool_state == PoolState::Allocated && !record_nodes.contains(&n.id) {
                v.push(format!("orphan allocation of {}", n.id));
            }
            if n.pool_state == PoolState::Free && (n.owner.is_some() || n.attached_network.is_some()) {
                v.push(format!("free node {} still owned or attached", n.id));
            }
            if let Some(net) = &n.attached_network {
                if n.owner.as_ref() != Some(net) {
                    v.push(format!("node {} attached to foreign network {net}", n.id));
                }
            }
        }
        let counts = self.isolation.counts();
        if counts.free + counts.allocated != counts.registered {
            v.push(format!("pool conservation broken: {counts:?}"));
        }
        if counts.allocated != records.len() {
            v.push(format!(
                "{} allocated nodes for {} records",
                counts.allocated,
                records.len()
            ));
        }

        let record_clones: BTreeSet<_> = records.iter().filter_map(|r| r.clone_image.as_ref()).collect();
        let mut bound: HashMap<&ImageId, u32> = HashMap::new();
        for t in &targets {
            *bound.entry(&t.image).or_default() += 1;
        }
        for img in &images {
            if img.name.starts_with(CLONE_PREFIX) && !record_clones.contains(&img.id) {
                v.push(format!("orphan clone {} ({})", img.id, img.name));
            }
            let exports = self.store.export_count(&img.id);
            if exports != bound.get(&img.id).copied().unwrap_or(0) {
                v.push(format!(
                    "image {} export count {exports} disagrees with targets",
                    img.id
                ));
            }
        }
        if let Err(e) = self.store.check_refcounts() {
            v.push(e);
        }

        SweepReport { violations: v }
    }
}
