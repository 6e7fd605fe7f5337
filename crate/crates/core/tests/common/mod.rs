#![allow(dead_code)]

pub mod cow;
pub mod crash;
pub mod golden;
pub mod matrix;
pub mod schedule;

use std::collections::BTreeSet;
use std::path::Path;

use metalforge::image_store::StoreConfig;
use metalforge::orchestrator::{ProvisionRequest, ProvisionState};
use metalforge::{ImageId, MacAddress, NodeId, System, SystemConfig, TenantId};

pub const BS: u64 = 4096;

pub fn tenant(s: &str) -> TenantId {
    TenantId::new(s).unwrap()
}

pub fn mac(i: u8) -> MacAddress {
    MacAddress::new([0x52, 0x54, 0, 0, 0, i])
}

pub fn config(root: Option<&Path>) -> SystemConfig {
    SystemConfig {
        root: root.map(Path::to_path_buf),
        store: StoreConfig {
            block_size: BS,
            ..StoreConfig::default()
        },
        ..SystemConfig::default()
    }
}

/// Deterministic non-zero golden content.
pub fn golden_data(len: usize, salt: u8) -> Vec<u8> {
    (0..len).map(|i| ((i * 31 + salt as usize) % 251) as u8 + 1).collect()
}

pub struct Rig {
    pub sys: System,
    pub nodes: Vec<NodeId>,
}

impl Rig {
    pub fn new(nodes: u8, root: Option<&Path>) -> Self {
        let sys = System::open(config(root)).unwrap();
        let nodes = (1..=nodes)
            .map(|i| sys.isolation.register_node(mac(i)).unwrap())
            .collect();
        Self { sys, nodes }
    }

    pub fn golden(&self, t: &TenantId, name: &str, blocks: usize) -> ImageId {
        let data = golden_data(blocks * BS as usize, name.len() as u8);
        self.sys.store.import_image(t, name, &mut data.as_slice()).unwrap()
    }

    pub fn req(&self, t: &TenantId, image: &ImageId) -> ProvisionRequest {
        ProvisionRequest {
            tenant: t.clone(),
            node: None,
            image: image.clone(),
            idempotency_key: None,
        }
    }

    pub fn assert_clean(&self) {
        let report = self.sys.orchestrator.sweep();
        assert!(report.is_clean(), "{:#?}", report.violations);
    }
}

/// Everything observable about the services' state, for zero-change checks.
pub fn fingerprint(sys: &System) -> String {
    let images: Vec<_> = sys
        .store
        .all_images()
        .into_iter()
        .map(|i| (i.id, i.name, i.child_count, i.shared_with))
        .collect();
    let targets: Vec<_> = sys
        .gateway
        .list_targets()
        .into_iter()
        .map(|t| (t.name, t.image, t.counters))
        .collect();
    format!(
        "{:?}|{:?}|{:?}|{:?}|{:?}|{}",
        images,
        targets,
        sys.isolation.list(),
        sys.orchestrator.all_records(),
        sys.netboot.configured_nodes(),
        sys.journal.commits()
    )
}

/// True if `node` has no trace of any provision.
pub fn node_is_clean(sys: &System, node: &NodeId) -> bool {
    let n = sys.isolation.get(node).unwrap();
    n.owner.is_none()
        && sys.isolation.attached_network(node).is_none()
        && sys.netboot.config_for_node(node).is_none()
        && sys.orchestrator.record_for_node(node).is_none()
}

pub fn live_states(sys: &System) -> BTreeSet<ProvisionState> {
    sys.orchestrator.all_records().iter().map(|r| r.state).collect()
}
