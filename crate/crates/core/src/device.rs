use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;

/// Where a tensor's bytes live: ordinary host memory or one of the
/// virtual asynchronous devices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Device {
    Host,
    Virt(usize),
}

impl Device {
    pub fn is_host(self) -> bool {
        matches!(self, Device::Host)
    }

    pub fn virt_index(self) -> Option<usize> {
        match self {
            Device::Host => None,
            Device::Virt(i) => Some(i),
        }
    }
}

impl Default for Device {
    fn default() -> Self {
        Device::Host
    }
}

impl fmt::Display for Device {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Device::Host => f.write_str("host"),
            Device::Virt(i) => write!(f, "virt:{i}"),
        }
    }
}

impl FromStr for Device {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let lower = s.trim().to_ascii_lowercase();
        if lower == "host" || lower == "cpu" {
            return Ok(Device::Host);
        }
        if let Some(idx) = lower.strip_prefix("virt:") {
            return idx
                .parse()
                .map(Device::Virt)
                .map_err(|_| Error::InvalidDevice(s.to_string()));
        }
        Err(Error::InvalidDevice(s.to_string()))
    }
}
