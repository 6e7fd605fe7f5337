use std::fmt;

use serde::{Deserialize, Serialize};

use crate::types::{ImageId, TenantId};

pub const DEFAULT_IQN_DATE: &str = "2017-06";
pub const DEFAULT_IQN_AUTHORITY: &str = "org.metalforge";

/// IQN-style target name:
/// `iqn.<yyyy-mm>.<authority>:<tenant>:<image-id>` for the read-write
/// export, with a `:ro<n>` suffix for read-only exports.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TargetName(String);

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TargetNameParts {
    pub date: String,
    pub authority: String,
    pub tenant: TenantId,
    pub image: ImageId,
    pub read_only: Option<u64>,
}

impl TargetName {
    pub fn build(date: &str, authority: &str, tenant: &TenantId, image: &ImageId, read_only: Option<u64>) -> Self {
        let mut s = format!("iqn.{date}.{authority}:{tenant}:{image}");
        if let Some(n) = read_only {
            s.push_str(&format!(":ro{n}"));
        }
        Self(s)
    }

    pub fn parse(s: &str) -> Option<TargetNameParts> {
        let rest = s.strip_prefix("iqn.")?;
        let mut fields = rest.split(':');
        let head = fields.next()?;
        let tenant = TenantId::new(fields.next()?).ok()?;
        let image = fields.next()?;
        if image.is_empty() {
            return None;
        }
        let read_only = match fields.next() {
            None => None,
            Some(ro) => Some(ro.strip_prefix("ro")?.parse().ok()?),
        };
        if fields.next().is_some() {
            return None;
        }
        // head is "<yyyy-mm>.<authority>"
        let (date, authority) = head.split_once('.')?;
        let (y, m) = date.split_once('-')?;
        if y.len() != 4
            || m.len() != 2
            || !y.chars().chain(m.chars()).all(|c| c.is_ascii_digit())
            || authority.is_empty()
        {
            return None;
        }
        Some(TargetNameParts {
            date: date.to_string(),
            authority: authority.to_string(),
            tenant,
            image: ImageId::from(image),
            read_only,
        })
    }

    /// Wraps a string that failed to parse, for error reporting.
    pub(crate) fn unchecked(s: String) -> Self {
        Self(s)
    }

    pub fn parts(&self) -> TargetNameParts {
        Self::parse(&self.0).expect("well-formed target name")
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl std::str::FromStr for TargetName {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::parse(s)
            .map(|_| Self(s.to_string()))
            .ok_or_else(|| format!("malformed target name {s:?}"))
    }
}

impl fmt::Display for TargetName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}
