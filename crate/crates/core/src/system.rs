//! Wires the five services to one journal and restores them from it.
//!
//! On-disk layout under the persistence root:
//!
//! ```text
//! journal.log        all committed state changes
//! store/blocks/      one sparse file per image layer
//! netboot/           pxelinux.cfg/, ipxe/, ibft/
//! ```

use std::path::{Path, PathBuf};
use std::sync::Arc;

use thiserror::Error;

use crate::image_store::{ImageStore, StoreConfig, StoreError};
use crate::isolation::IsolationService;
use crate::journal::{Journal, JournalError, Record};
use crate::netboot::{NetbootConfig, NetbootError, NetbootService};
use crate::orchestrator::{Orchestrator, OrchestratorConfig, OrchestratorError, RecoveryReport};
use crate::target_gateway::{GatewayConfig, TargetGateway};

pub const ROOT_ENV: &str = "METALFORGE_ROOT";
pub const JOURNAL_FILE: &str = "journal.log";

#[derive(Debug, Error)]
pub enum SystemError {
    #[error("journal: {0}")]
    Journal(#[from] JournalError),
    #[error("record {index} does not replay: {msg}")]
    Replay { index: usize, msg: String },
    #[error("storage: {0}")]
    Store(#[from] StoreError),
    #[error("netboot: {0}")]
    Netboot(#[from] NetbootError),
    #[error("recovery: {0}")]
    Recovery(#[from] OrchestratorError),
}

#[derive(Debug, Clone, Default)]
pub struct SystemConfig {
    /// Persistence root; `None` runs entirely in memory.
    pub root: Option<PathBuf>,
    pub store: StoreConfig,
    pub gateway: GatewayConfig,
    pub netboot: NetbootConfig,
    pub orchestrator: OrchestratorConfig,
    pub fsync: bool,
}

impl SystemConfig {
    pub fn at(root: impl Into<PathBuf>) -> Self {
        Self {
            root: Some(root.into()),
            ..Self::default()
        }
    }

    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Root from `METALFORGE_ROOT`, if set.
    pub fn from_env() -> Self {
        match std::env::var_os(ROOT_ENV) {
            Some(r) if !r.is_empty() => Self::at(r),
            _ => Self::in_memory(),
        }
    }
}

pub struct System {
    pub journal: Arc<Journal>,
    pub store: Arc<ImageStore>,
    pub isolation: Arc<IsolationService>,
    pub gateway: Arc<TargetGateway>,
    pub netboot: Arc<NetbootService>,
    pub orchestrator: Arc<Orchestrator>,
    recovery: RecoveryReport,
}

impl System {
    /// Opens the system at the configured root, replays the journal and
    /// settles anything a crash left half done.
    pub fn open(config: SystemConfig) -> Result<Self, SystemError> {
        let (journal, records) = match &config.root {
            Some(root) => {
                std::fs::create_dir_all(root).map_err(JournalError::from)?;
                Journal::open(&root.join(JOURNAL_FILE), config.fsync)?
            }
            None => (Journal::in_memory(), Vec::new()),
        };
        Self::assemble(config, Arc::new(journal), records)
    }

    /// Restores a memory-only system from raw journal bytes. Only works
    /// while no image holds written data.
    pub fn from_journal_bytes(config: SystemConfig, bytes: Vec<u8>) -> Result<Self, SystemError> {
        let (journal, records) = Journal::from_memory(bytes);
        Self::assemble(SystemConfig { root: None, ..config }, Arc::new(journal), records)
    }

    fn assemble(config: SystemConfig, journal: Arc<Journal>, records: Vec<Record>) -> Result<Self, SystemError> {
        let root = config.root.as_deref();
        let store = Arc::new(ImageStore::new(
            StoreConfig {
                root: root.map(|r| r.join("store")),
                ..config.store
            },
            journal.clone(),
        )?);
        let isolation = Arc::new(IsolationService::new(journal.clone()));
        let gateway = Arc::new(TargetGateway::new(
            config.gateway,
            journal.clone(),
            store.clone(),
            isolation.clone(),
        ));
        let netboot = Arc::new(NetbootService::new(
            NetbootConfig {
                root: root.map(|r| r.join("netboot")),
                ..config.netboot
            },
            journal.clone(),
            gateway.clone(),
        )?);
        let orchestrator = Arc::new(Orchestrator::new(
            config.orchestrator,
            journal.clone(),
            store.clone(),
            isolation.clone(),
            gateway.clone(),
            netboot.clone(),
        ));
        let mut sys = Self {
            journal,
            store,
            isolation,
            gateway,
            netboot,
            orchestrator,
            recovery: RecoveryReport::default(),
        };
        for (index, rec) in records.iter().enumerate() {
            sys.apply(rec).map_err(|msg| SystemError::Replay { index, msg })?;
        }
        sys.store.finish_replay()?;
        sys.netboot.finish_replay()?;
        sys.recovery = sys.orchestrator.recover_pending()?;
        Ok(sys)
    }

    fn apply(&self, rec: &Record) -> Result<(), String> {
        match rec {
            Record::Store(ev) => self.store.replay(ev).map_err(|e| e.to_string()),
            Record::Gateway(ev) => self.gateway.replay(ev).map_err(|e| e.to_string()),
            Record::Netboot(ev) => {
                self.netboot.replay(ev);
                Ok(())
            }
            Record::Pool(ev) => self.isolation.replay(ev).map_err(|e| e.to_string()),
            Record::Orchestrator(ev) => self.orchestrator.replay(ev).map_err(|e| e.to_string()),
        }
    }

    /// What restart recovery did when this system was opened.
    pub fn recovery_report(&self) -> &RecoveryReport {
        &self.recovery
    }

    pub fn root(&self) -> Option<&Path> {
        self.store.config().root.as_deref().and_then(Path::parent)
    }
}
