use std::fmt;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProvisionState {
    Allocating,
    Cloning,
    Exporting,
    Configuring,
    Attaching,
    Ready,
    Booted,
    Deprovisioning,
    FailedNode,
    RolledBack,
}

impl ProvisionState {
    pub const ALL: [ProvisionState; 10] = [
        Self::Allocating,
        Self::Cloning,
        Self::Exporting,
        Self::Configuring,
        Self::Attaching,
        Self::Ready,
        Self::Booted,
        Self::Deprovisioning,
        Self::FailedNode,
        Self::RolledBack,
    ];

    /// The declared state graph.
    pub fn can_transition(self, to: ProvisionState) -> bool {
        use ProvisionState::*;
        matches!(
            (self, to),
            (Allocating, Cloning | Exporting | RolledBack)
                | (Cloning, Exporting | RolledBack)
                | (Exporting, Configuring | RolledBack)
                | (Configuring, Attaching | RolledBack)
                | (Attaching, Ready | RolledBack)
                | (Ready, Booted | Deprovisioning | FailedNode)
                | (Booted, Deprovisioning | FailedNode)
                | (FailedNode, Deprovisioning)
        )
    }

    /// A record may be removed from the mapping only from these states.
    pub fn removable(self) -> bool {
        matches!(self, Self::RolledBack | Self::Deprovisioning)
    }

    /// States a record rests in between API calls.
    pub fn is_steady(self) -> bool {
        matches!(self, Self::Ready | Self::Booted | Self::FailedNode)
    }

    /// States of a provision still in flight.
    pub fn is_provisioning(self) -> bool {
        matches!(
            self,
            Self::Allocating | Self::Cloning | Self::Exporting | Self::Configuring | Self::Attaching
        )
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Allocating => "allocating",
            Self::Cloning => "cloning",
            Self::Exporting => "exporting",
            Self::Configuring => "configuring",
            Self::Attaching => "attaching",
            Self::Ready => "ready",
            Self::Booted => "booted",
            Self::Deprovisioning => "deprovisioning",
            Self::FailedNode => "failed_node",
            Self::RolledBack => "rolled_back",
        }
    }
}

impl fmt::Display for ProvisionState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Provision steps, in execution order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Step {
    Allocate,
    Clone,
    Export,
    Configure,
    Attach,
}

impl Step {
    pub const ALL: [Step; 5] = [Step::Allocate, Step::Clone, Step::Export, Step::Configure, Step::Attach];

    pub fn as_str(self) -> &'static str {
        match self {
            Step::Allocate => "allocate",
            Step::Clone => "clone",
            Step::Export => "export",
            Step::Configure => "configure",
            Step::Attach => "attach",
        }
    }
}

impl fmt::Display for Step {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}
