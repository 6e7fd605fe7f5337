//! Per-node network boot artifacts.
//!
//! A booting node's DHCP request yields a [`BootPointer`] (next-server and a
//! pxelinux loader). pxelinux reads `pxelinux.cfg/01-<mac>`, which chainloads
//! iPXE with a command line that fetches `ipxe/<mac>.ipxe`. That script sets
//! the initiator name and `sanboot`s the block target. The [`BootDescriptor`]
//! (`ibft/<mac>.json`) is the boot firmware table handed to the OS.
//!
//! All artifacts live in an in-memory file tree served by [`NetbootService::tftp_get`]
//! and are mirrored under the config root when one is set.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use parking_lot::RwLock;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::journal::{Journal, JournalError, Record};
use crate::target_gateway::{TargetGateway, TargetName};
use crate::types::{MacAddress, NodeId};

pub const STAGE1_DIR: &str = "pxelinux.cfg";
pub const STAGE2_DIR: &str = "ipxe";
pub const DESCRIPTOR_DIR: &str = "ibft";

#[derive(Debug, Error)]
pub enum NetbootError {
    #[error("boot config already installed for {0}")]
    ConfigExists(String),
    #[error("target {0} not found")]
    TargetNotFound(TargetName),
    #[error("no such file {0:?}")]
    NoSuchFile(String),
    #[error("netboot i/o: {0}")]
    Io(#[from] io::Error),
    #[error(transparent)]
    Journal(#[from] JournalError),
}

pub type Result<T, E = NetbootError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NetbootConfig {
    /// Directory mirrored with the artifact tree; `None` keeps it in memory.
    pub root: Option<PathBuf>,
    /// TFTP server handed out as DHCP next-server.
    pub tftp_server: String,
    /// Address of the block target gateway.
    pub gateway_addr: String,
    /// DHCP boot filename (stage-1 loader).
    pub loader: String,
    /// iPXE image pxelinux chainloads.
    pub chain_image: String,
    /// Prefix for initiator names; the node id is appended.
    pub initiator_prefix: String,
}

impl Default for NetbootConfig {
    fn default() -> Self {
        Self {
            root: None,
            tftp_server: "10.0.0.1".into(),
            gateway_addr: "10.0.0.2".into(),
            loader: "pxelinux.0".into(),
            chain_image: "ipxe.lkrn".into(),
            initiator_prefix: "iqn.2017-06.org.metalforge:initiator".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BootPointer {
    pub mac: MacAddress,
    pub next_server: String,
    pub filename: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BootScript {
    pub mac: MacAddress,
    pub lines: Vec<String>,
}

impl BootScript {
    pub fn render(&self) -> String {
        let mut s = String::new();
        for l in &self.lines {
            s.push_str(l);
            s.push('\n');
        }
        s
    }

    /// Parses a stage-2 script into `(initiator name, gateway address, target)`.
    pub fn parse(text: &str) -> Option<(String, String, TargetName)> {
        let mut lines = text.lines();
        if lines.next()? != "#!ipxe" {
            return None;
        }
        let initiator = lines.next()?.strip_prefix("set initiator-iqn ")?.to_string();
        let uri = lines.next()?.strip_prefix("sanboot iscsi:")?;
        let (gateway, target) = uri.split_once("::::")?;
        Some((initiator, gateway.to_string(), target.parse().ok()?))
    }
}

/// Field order is alphabetical so the serialized JSON has sorted keys.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BootDescriptor {
    pub gateway_addr: String,
    pub initiator_name: String,
    pub lun: u8,
    pub target: TargetName,
}

impl BootDescriptor {
    pub fn to_canonical_json(&self) -> String {
        serde_json::to_string(self).expect("descriptor serializes")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BootArtifacts {
    pub node: NodeId,
    pub pointer: BootPointer,
    pub script: BootScript,
    pub descriptor: BootDescriptor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum NetbootEvent {
    Installed {
        node: NodeId,
        mac: MacAddress,
        target: TargetName,
    },
    Removed {
        node: NodeId,
    },
}

pub fn stage1_path(mac: &MacAddress) -> String {
    format!("{STAGE1_DIR}/01-{}", mac.dashed())
}

pub fn stage2_path(mac: &MacAddress) -> String {
    format!("{STAGE2_DIR}/{mac}.ipxe")
}

pub fn descriptor_path(mac: &MacAddress) -> String {
    format!("{DESCRIPTOR_DIR}/{mac}.json")
}

impl NetbootConfig {
    /// Builds the artifacts for `(node, mac, target)`. Pure function of its
    /// inputs and the config.
    pub fn generate(&self, node: &NodeId, mac: MacAddress, target: &TargetName) -> BootArtifacts {
        let initiator_name = format!("{}:{}", self.initiator_prefix, node);
        BootArtifacts {
            node: node.clone(),
            pointer: BootPointer {
                mac,
                next_server: self.tftp_server.clone(),
                filename: self.loader.clone(),
            },
            script: BootScript {
                mac,
                lines: vec![
                    "#!ipxe".to_string(),
                    format!("set initiator-iqn {initiator_name}"),
                    format!("sanboot iscsi:{}::::{target}", self.gateway_addr),
                ],
            },
            descriptor: BootDescriptor {
                gateway_addr: self.gateway_addr.clone(),
                initiator_name,
                lun: 0,
                target: target.clone(),
            },
        }
    }

    /// pxelinux config that chainloads iPXE and points it at the stage-2 script.
    pub fn render_stage1(&self, a: &BootArtifacts) -> String {
        format!(
            "DEFAULT ipxe\nLABEL ipxe\n  KERNEL {}\n  APPEND dhcp && chain tftp://{}/{}\n",
            self.chain_image,
            a.pointer.next_server,
            stage2_path(&a.pointer.mac)
        )
    }

    /// The three files for one node, keyed by path relative to the root.
    pub fn files(&self, a: &BootArtifacts) -> Vec<(String, Vec<u8>)> {
        let mac = &a.pointer.mac;
        vec![
            (stage1_path(mac), self.render_stage1(a).into_bytes()),
            (stage2_path(mac), a.script.render().into_bytes()),
            (descriptor_path(mac), a.descriptor.to_canonical_json().into_bytes()),
        ]
    }
}

/// Extracts the chained stage-2 path from a stage-1 file.
pub fn parse_stage1_chain(text: &str) -> Option<String> {
    let rest = text
        .lines()
        .find_map(|l| l.trim().strip_prefix("APPEND dhcp && chain tftp://"))?;
    let (_server, path) = rest.split_once('/')?;
    Some(path.to_string())
}

#[derive(Default)]
struct State {
    by_node: BTreeMap<NodeId, BootArtifacts>,
    by_mac: HashMap<MacAddress, NodeId>,
    files: BTreeMap<String, Vec<u8>>,
}

pub struct NetbootService {
    config: NetbootConfig,
    journal: Arc<Journal>,
    gateway: Arc<TargetGateway>,
    state: RwLock<State>,
}

impl NetbootService {
    pub fn new(config: NetbootConfig, journal: Arc<Journal>, gateway: Arc<TargetGateway>) -> Result<Self> {
        if let Some(root) = &config.root {
            for d in [STAGE1_DIR, STAGE2_DIR, DESCRIPTOR_DIR] {
                fs::create_dir_all(root.join(d))?;
            }
        }
        Ok(Self {
            config,
            journal,
            gateway,
            state: RwLock::new(State::default()),
        })
    }

    pub fn config(&self) -> &NetbootConfig {
        &self.config
    }

    pub fn install_boot_config(&self, node: &NodeId, mac: MacAddress, target: &TargetName) -> Result<BootDescriptor> {
        let mut st = self.state.write();
        if st.by_mac.contains_key(&mac) {
            return Err(NetbootError::ConfigExists(mac.to_string()));
        }
        if st.by_node.contains_key(node) {
            return Err(NetbootError::ConfigExists(node.to_string()));
        }
        if self.gateway.get_target(target).is_err() {
            return Err(NetbootError::TargetNotFound(target.clone()));
        }
        let artifacts = self.config.generate(node, mac, target);
        self.write_files(&artifacts)?;
        self.journal.append(&Record::Netboot(NetbootEvent::Installed {
            node: node.clone(),
            mac,
            target: target.clone(),
        }))?;
        let descriptor = artifacts.descriptor.clone();
        Self::insert(&self.config, &mut st, artifacts);
        Ok(descriptor)
    }

    fn insert(config: &NetbootConfig, st: &mut State, artifacts: BootArtifacts) {
        for (path, bytes) in config.files(&artifacts) {
            st.files.insert(path, bytes);
        }
        st.by_mac.insert(artifacts.pointer.mac, artifacts.node.clone());
        st.by_node.insert(artifacts.node.clone(), artifacts);
    }

    fn write_files(&self, a: &BootArtifacts) -> io::Result<()> {
        let Some(root) = &self.config.root else {
            return Ok(());
        };
        for (path, bytes) in self.config.files(a) {
            write_atomic(&root.join(path), &bytes)?;
        }
        Ok(())
    }

    fn remove_files(&self, mac: &MacAddress) -> io::Result<()> {
        let Some(root) = &self.config.root else {
            return Ok(());
        };
        for path in [stage1_path(mac), stage2_path(mac), descriptor_path(mac)] {
            match fs::remove_file(root.join(path)) {
                Err(e) if e.kind() != io::ErrorKind::NotFound => return Err(e),
                _ => {}
            }
        }
        Ok(())
    }

    /// Removes every artifact for `node`. Absent config is success.
    pub fn remove_boot_config(&self, node: &NodeId) -> Result<()> {
        let mut st = self.state.write();
        let Some(mac) = st.by_node.get(node).map(|a| a.pointer.mac) else {
            return Ok(());
        };
        self.journal
            .append(&Record::Netboot(NetbootEvent::Removed { node: node.clone() }))?;
        Self::remove(&mut st, node);
        drop(st);
        self.remove_files(&mac)?;
        Ok(())
    }

    fn remove(st: &mut State, node: &NodeId) {
        if let Some(a) = st.by_node.remove(node) {
            let mac = a.pointer.mac;
            st.by_mac.remove(&mac);
            for path in [stage1_path(&mac), stage2_path(&mac), descriptor_path(&mac)] {
                st.files.remove(&path);
            }
        }
    }

    /// What a node presenting `mac` gets. A spoofed MAC gets the artifacts
    /// of whichever node owns it.
    pub fn lookup_boot(&self, mac: &MacAddress) -> Option<BootArtifacts> {
        let st = self.state.read();
        let node = st.by_mac.get(mac)?;
        st.by_node.get(node).cloned()
    }

    pub fn config_for_node(&self, node: &NodeId) -> Option<BootArtifacts> {
        self.state.read().by_node.get(node).cloned()
    }

    pub fn tftp_get(&self, path: &str) -> Result<Vec<u8>> {
        self.state
            .read()
            .files
            .get(path.trim_start_matches('/'))
            .cloned()
            .ok_or_else(|| NetbootError::NoSuchFile(path.to_string()))
    }

    pub fn configured_nodes(&self) -> Vec<NodeId> {
        self.state.read().by_node.keys().cloned().collect()
    }

    pub(crate) fn replay(&self, ev: &NetbootEvent) {
        let mut st = self.state.write();
        match ev {
            NetbootEvent::Installed { node, mac, target } => {
                let a = self.config.generate(node, *mac, target);
                Self::insert(&self.config, &mut st, a);
            }
            NetbootEvent::Removed { node } => Self::remove(&mut st, node),
        }
    }

    /// Makes the on-disk tree match the replayed state exactly.
    pub(crate) fn finish_replay(&self) -> Result<()> {
        let Some(root) = &self.config.root else {
            return Ok(());
        };
        let st = self.state.read();
        for path in scan_artifacts(root)? {
            if !st.files.contains_key(&path) {
                fs::remove_file(root.join(&path))?;
            }
        }
        for (path, bytes) in &st.files {
            let p = root.join(path);
            if fs::read(&p).ok().as_deref() != Some(bytes.as_slice()) {
                write_atomic(&p, bytes)?;
            }
        }
        Ok(())
    }
}

/// Relative paths of every artifact file under `root`.
pub fn scan_artifacts(root: &Path) -> io::Result<Vec<String>> {
    let mut out = Vec::new();
    for d in [STAGE1_DIR, STAGE2_DIR, DESCRIPTOR_DIR] {
        let dir = root.join(d);
        if !dir.exists() {
            continue;
        }
        for entry in fs::read_dir(dir)? {
            let entry = entry?;
            if entry.file_type()?.is_file() {
                if let Some(name) = entry.file_name().to_str() {
                    if !name.starts_with('.') {
                        out.push(format!("{d}/{name}"));
                    }
                }
            }
        }
    }
    out.sort();
    Ok(out)
}

fn write_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let tmp = path.with_file_name(format!(
        ".{}.tmp",
        path.file_name().and_then(|n| n.to_str()).unwrap_or("artifact")
    ));
    fs::write(&tmp, bytes)?;
    fs::rename(tmp, path)
}
