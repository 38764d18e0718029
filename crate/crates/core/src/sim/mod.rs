//! Abstract machine for MPK-based in-process isolation.
//!
//! PKRU values follow a set-bit-grants convention throughout: bit `2i`
//! grants read access to domain `i` and bit `2i+1` grants write access.
//! Hardware uses the opposite polarity (access-disable and write-disable
//! bits); [`to_hardware_pkru`] and [`from_hardware_pkru`] translate.
//!
//! Domain 0 holds the untrusted component U and its memory MU. Domains
//! `1..n` hold trusted components; in the two-component setup domain 1 is
//! MT.

mod machine;
pub mod sample;
mod scenario;
mod sweep;

use std::fmt;

use thiserror::Error;

pub use machine::{
    pool_base, Component, Event, EventKind, InterceptMode, Machine, Page, PageState, Perms, ProcessStatus, SimConfig, SimImage,
    SimSegment, SimError, SimThread, ThreadStatus, Violation, ALLOC_SYSCALL, SIGNAL_PKRU, SYS_EXIT, SYS_EXIT_GROUP, SYS_MMAP,
    SYS_MPROTECT, SYS_PKEY_MPROTECT, SYS_RT_SIGRETURN, SYS_WRITE,
};
pub use scenario::{Action, Expectation, Scenario, ScenarioError, ScenarioOutcome};
pub use sweep::{attack_sweep, default_presets, executable_offsets, FindingKind, Preset, SweepFinding, SweepReport, ATTACK_BUDGET};

pub const MAX_DOMAINS: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum PkAccess {
    Read,
    Write,
}

/// Whether `pkru` grants `access` on `domain`.
pub fn pkru_allows(pkru: u32, domain: u8, access: PkAccess) -> bool {
    assert!((domain as usize) < MAX_DOMAINS, "domain {domain} out of range");
    let bit = 2 * domain as u32 + matches!(access, PkAccess::Write) as u32;
    pkru >> bit & 1 == 1
}

/// PKRU granting exactly the listed accesses.
pub fn pkru_grant(grants: &[(u8, PkAccess)]) -> u32 {
    grants.iter().fold(0, |v, (d, a)| v | 1 << (2 * *d as u32 + matches!(a, PkAccess::Write) as u32))
}

/// Hardware encoding: AD/WD bits set to deny.
pub fn to_hardware_pkru(pkru: u32) -> u32 {
    let mut hw = 0;
    for d in 0..MAX_DOMAINS as u8 {
        let r = pkru_allows(pkru, d, PkAccess::Read);
        let w = pkru_allows(pkru, d, PkAccess::Write);
        if !r {
            hw |= 1 << (2 * d);
        }
        if !(r && w) {
            hw |= 1 << (2 * d + 1);
        }
    }
    hw
}

/// Inverse of [`to_hardware_pkru`]. A write grant without read cannot be
/// expressed in hardware and does not survive the round trip.
pub fn from_hardware_pkru(hw: u32) -> u32 {
    let mut pkru = 0;
    for d in 0..MAX_DOMAINS as u32 {
        let ad = hw >> (2 * d) & 1 == 1;
        let wd = hw >> (2 * d + 1) & 1 == 1;
        if !ad {
            pkru |= 1 << (2 * d);
            if !wd {
                pkru |= 1 << (2 * d + 1);
            }
        }
    }
    pkru
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum IsolationMode {
    Full,
    /// Every component may read every domain; only writes are isolated.
    IntegrityOnly,
}

impl fmt::Display for IsolationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            IsolationMode::Full => "full",
            IsolationMode::IntegrityOnly => "integrity",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ConfigError {
    #[error("{0} components do not fit in {MAX_DOMAINS} domains")]
    TooManyComponents(usize),
    #[error("trust relation names component {0}, which does not exist")]
    UnknownComponent(usize),
    #[error("trust relation is not transitive: {a} trusts {b} and {b} trusts {c}, but {a} does not trust {c}")]
    NotTransitive { a: usize, b: usize, c: usize },
}

/// Components and who may access whose memory. Component `c` owns domain
/// `c`; `(a, b)` in `trust` means `a` trusts `b`, so `b` may access `a`'s
/// memory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DomainConfig {
    pub components: usize,
    pub trust: Vec<(usize, usize)>,
    pub mode: IsolationMode,
}

impl DomainConfig {
    /// U and one trusted component, with U trusting T.
    pub fn two_component(mode: IsolationMode) -> Self {
        DomainConfig { components: 2, trust: vec![(0, 1)], mode }
    }

    /// U trusts every other component; the others trust nobody.
    pub fn star(components: usize, mode: IsolationMode) -> Self {
        DomainConfig { components, trust: (1..components).map(|c| (0, c)).collect(), mode }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.components == 0 || self.components > MAX_DOMAINS {
            return Err(ConfigError::TooManyComponents(self.components));
        }
        for &(a, b) in &self.trust {
            if a >= self.components || b >= self.components {
                return Err(ConfigError::UnknownComponent(a.max(b)));
            }
        }
        for &(a, b) in &self.trust {
            for &(b2, c) in &self.trust {
                if b == b2 && a != c && !self.trusts(a, c) {
                    return Err(ConfigError::NotTransitive { a, b, c });
                }
            }
        }
        Ok(())
    }

    pub fn trusts(&self, a: usize, b: usize) -> bool {
        a == b || self.trust.contains(&(a, b))
    }

    /// PKRU while component `c` runs: its own domain plus every domain
    /// whose owner trusts it, and read access everywhere in
    /// integrity-only mode.
    pub fn allow(&self, c: usize) -> u32 {
        let mut v = 0;
        for d in 0..self.components {
            if self.trusts(d, c) {
                v |= pkru_grant(&[(d as u8, PkAccess::Read), (d as u8, PkAccess::Write)]);
            } else if self.mode == IsolationMode::IntegrityOnly {
                v |= pkru_grant(&[(d as u8, PkAccess::Read)]);
            }
        }
        v
    }

    /// PKRU while U runs.
    pub fn disallow(&self) -> u32 {
        self.allow(0)
    }

    /// Whether an access to domain `d` counts as isolated memory being
    /// touched, i.e. U itself could not perform it.
    pub fn is_protected(&self, d: u8, access: PkAccess) -> bool {
        !pkru_allows(self.disallow(), d, access)
    }
}
