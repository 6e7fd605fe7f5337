//! Diskless bare-metal provisioning.
//!
//! Nodes boot over the network from copy-on-write clones of golden images.
//! The crate has one module per service:
//!
//! * [`image_store`]: layered copy-on-write images (clone, flatten, deep copy)
//! * [`target_gateway`]: network block targets with per-tenant access control
//! * [`netboot`]: per-node PXE/iPXE boot artifacts
//! * [`isolation`]: node pool and tenant network membership
//! * [`orchestrator`]: provision, deprovision, snapshot and recovery
//!
//! plus a [`node_simulator`] that boots simulated nodes against them, the
//! [`api`] request layer and the [`bench`] harness. All durable state goes
//! through one [`journal`]; [`system::System`] assembles and restores it.

pub mod api;
pub mod bench;
pub mod clock;
pub mod image_store;
pub mod isolation;
pub mod journal;
pub mod netboot;
pub mod node_simulator;
pub mod orchestrator;
pub mod system;
pub mod target_gateway;
pub mod types;

pub use system::{System, SystemConfig};
pub use types::{ImageId, MacAddress, NodeId, TenantId};
