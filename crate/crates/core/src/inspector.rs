//! Classifies WRPKRU/XRSTOR occurrences as safe or unsafe.
//!
//! A WRPKRU is safe when it is immediately followed by a trusted entry
//! point (directly, or via a direct CALL/JMP), or by a registered check
//! template that terminates unless PKRU was set to the disallow value.
//! An XRSTOR is safe when followed by a guard that terminates if eax bit 9
//! is set.

use std::collections::BTreeSet;
use std::fmt;
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::bytescan::{self, Occurrence, OccurrenceKind, ScanError, PAGE_SIZE};
use crate::x86::{decode, Form, Mnemonic, Operand};

/// PKRU granting read and write on domains 0 and 1 (bit 2i read, bit 2i+1 write).
pub const PKRU_ALLOW: u32 = 0x0000_000F;
/// PKRU granting read and write on domain 0 only.
pub const PKRU_DISALLOW: u32 = 0x0000_0003;
/// Domain 0 read/write plus read-only domain 1.
pub const PKRU_DISALLOW_INTEGRITY: u32 = 0x0000_0007;

pub const EXIT_SYSCALL: u32 = 60;

/// `mov eax, 60; syscall`
pub const EXIT_STUB: [u8; 7] = [0xB8, 0x3C, 0x00, 0x00, 0x00, 0x0F, 0x05];

/// `cmp eax, disallow; je +7; <exit stub>`
pub fn safe_b_template(disallow: u32) -> Vec<u8> {
    let mut v = vec![0x3D];
    v.extend_from_slice(&disallow.to_le_bytes());
    v.extend_from_slice(&[0x74, EXIT_STUB.len() as u8]);
    v.extend_from_slice(&EXIT_STUB);
    v
}

/// `bt eax, 9; jnc +7; <exit stub>`
pub fn xrstor_guard() -> Vec<u8> {
    let mut v = vec![0x0F, 0xBA, 0xE0, 0x09, 0x73, EXIT_STUB.len() as u8];
    v.extend_from_slice(&EXIT_STUB);
    v
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EntryListError {
    #[error("line {line}: bad address {text:?}")]
    BadAddress { line: usize, text: String },
}

/// Designated entry points of the trusted component.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct EntryPointSet {
    addrs: BTreeSet<u64>,
}

pub const DEFAULT_ENTRY_MARKER: &str = "erim_entry";

impl EntryPointSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, addr: u64) -> bool {
        self.addrs.insert(addr)
    }

    pub fn remove(&mut self, addr: u64) -> bool {
        self.addrs.remove(&addr)
    }

    pub fn contains(&self, addr: u64) -> bool {
        self.addrs.contains(&addr)
    }

    pub fn len(&self) -> usize {
        self.addrs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.addrs.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = u64> + '_ {
        self.addrs.iter().copied()
    }

    pub fn extend(&mut self, other: &EntryPointSet) {
        self.addrs.extend(other.iter());
    }

    /// Symbols whose name contains `marker`.
    pub fn from_symbols<'a, I>(symbols: I, marker: &str) -> Self
    where
        I: IntoIterator<Item = (&'a str, u64)>,
    {
        let addrs = symbols.into_iter().filter(|(name, _)| name.contains(marker)).map(|(_, a)| a).collect();
        EntryPointSet { addrs }
    }

    /// One hexadecimal address per line (optional `0x`), `#` starts a comment.
    pub fn parse_list(text: &str) -> Result<Self, EntryListError> {
        let mut set = EntryPointSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let digits = line.strip_prefix("0x").or_else(|| line.strip_prefix("0X")).unwrap_or(line);
            let addr = u64::from_str_radix(digits, 16)
                .map_err(|_| EntryListError::BadAddress { line: n + 1, text: line.to_string() })?;
            set.insert(addr);
        }
        Ok(set)
    }
}

impl FromIterator<u64> for EntryPointSet {
    fn from_iter<T: IntoIterator<Item = u64>>(iter: T) -> Self {
        EntryPointSet { addrs: iter.into_iter().collect() }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Template {
    pub name: String,
    pub bytes: Vec<u8>,
}

/// Byte templates accepted after WRPKRU and XRSTOR.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TemplateSet {
    pub wrpkru: Vec<Template>,
    pub xrstor: Vec<Template>,
}

impl Default for TemplateSet {
    fn default() -> Self {
        TemplateSet::canonical(PKRU_DISALLOW)
    }
}

impl TemplateSet {
    pub fn canonical(disallow: u32) -> Self {
        TemplateSet {
            wrpkru: vec![Template { name: "cmp-je-exit".into(), bytes: safe_b_template(disallow) }],
            xrstor: vec![Template { name: "bt-jnc-exit".into(), bytes: xrstor_guard() }],
        }
    }

    pub fn register_wrpkru(&mut self, name: &str, bytes: Vec<u8>) {
        self.wrpkru.push(Template { name: name.into(), bytes });
    }

    pub fn register_xrstor(&mut self, name: &str, bytes: Vec<u8>) {
        self.xrstor.push(Template { name: name.into(), bytes });
    }

    fn for_kind(&self, kind: OccurrenceKind) -> &[Template] {
        match kind {
            OccurrenceKind::Wrpkru => &self.wrpkru,
            OccurrenceKind::Xrstor => &self.xrstor,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SafetyClass {
    SafeA,
    SafeB,
    SafeXrstor,
    Unsafe,
    NonExecutableData,
}

impl SafetyClass {
    pub fn is_safe(self) -> bool {
        self != SafetyClass::Unsafe
    }

    pub fn name(self) -> &'static str {
        match self {
            SafetyClass::SafeA => "safe-a",
            SafetyClass::SafeB => "safe-b",
            SafetyClass::SafeXrstor => "safe-xrstor",
            SafetyClass::Unsafe => "unsafe",
            SafetyClass::NonExecutableData => "non-executable-data",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Evidence {
    /// Falls through into this entry point.
    EntryFallthrough { entry: u64 },
    /// A direct CALL/JMP at `at` targets this entry point.
    EntryTransfer { at: u64, entry: u64 },
    Template { name: String, start: u64, end: u64 },
    DataOnly,
    Truncated,
    NoGuard,
}

impl fmt::Display for Evidence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Evidence::EntryFallthrough { entry } => write!(f, "falls into entry {entry:#x}"),
            Evidence::EntryTransfer { at, entry } => write!(f, "transfer at {at:#x} to entry {entry:#x}"),
            Evidence::Template { name, start, end } => write!(f, "template {name} at {start:#x}..{end:#x}"),
            Evidence::DataOnly => write!(f, "not executable"),
            Evidence::Truncated => write!(f, "region ends before a guard"),
            Evidence::NoGuard => write!(f, "no entry point or guard follows"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SafetyVerdict {
    pub occurrence: Occurrence,
    pub class: SafetyClass,
    pub evidence: Evidence,
}

fn direct_transfer_target(code: &[u8], base: u64, at: u64) -> Option<u64> {
    let off = (at - base) as usize;
    let d = decode(&code[off..], 0).ok()?;
    let direct = matches!(d.mnemonic, Mnemonic::Call | Mnemonic::Jmp)
        && matches!(d.form, Form::Rel8 | Form::Rel32)
        && matches!(d.operands[0], Operand::Rel(_));
    if direct {
        d.branch_target(at, d.len)
    } else {
        None
    }
}

/// Classifies one occurrence inside `code`, which is executable and mapped at `base`.
pub fn classify(
    code: &[u8],
    base: u64,
    occ: &Occurrence,
    entries: &EntryPointSet,
    templates: &TemplateSet,
) -> SafetyVerdict {
    let verdict = |class, evidence| SafetyVerdict { occurrence: *occ, class, evidence };
    let end = base + code.len() as u64;
    let next = occ.end();
    if occ.offset < base || next > end {
        return verdict(SafetyClass::Unsafe, Evidence::Truncated);
    }
    if next == end {
        return verdict(SafetyClass::Unsafe, Evidence::Truncated);
    }
    if occ.kind == OccurrenceKind::Wrpkru {
        if entries.contains(next) {
            return verdict(SafetyClass::SafeA, Evidence::EntryFallthrough { entry: next });
        }
        if let Some(t) = direct_transfer_target(code, base, next) {
            if entries.contains(t) {
                return verdict(SafetyClass::SafeA, Evidence::EntryTransfer { at: next, entry: t });
            }
        }
    }
    // an XRSTOR's guard follows its memory operand, whose length the
    // ModRM byte of the pattern already fixes
    let next = match occ.kind {
        OccurrenceKind::Wrpkru => next,
        OccurrenceKind::Xrstor => match decode(&code[(occ.offset - base) as usize..], 0) {
            Ok(d) if d.mnemonic == Mnemonic::Xrstor => occ.offset + d.len as u64,
            _ => return verdict(SafetyClass::Unsafe, Evidence::Truncated),
        },
    };
    let rest = &code[(next - base) as usize..];
    for t in templates.for_kind(occ.kind) {
        if rest.starts_with(&t.bytes) {
            let class = match occ.kind {
                OccurrenceKind::Wrpkru => SafetyClass::SafeB,
                OccurrenceKind::Xrstor => SafetyClass::SafeXrstor,
            };
            let ev = Evidence::Template { name: t.name.clone(), start: next, end: next + t.bytes.len() as u64 };
            return verdict(class, ev);
        }
    }
    let longest = templates.for_kind(occ.kind).iter().map(|t| t.bytes.len()).max().unwrap_or(0);
    let truncated = rest.len() < longest
        && templates.for_kind(occ.kind).iter().any(|t| t.bytes.starts_with(rest));
    verdict(SafetyClass::Unsafe, if truncated { Evidence::Truncated } else { Evidence::NoGuard })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InspectionReport {
    pub verdicts: Vec<SafetyVerdict>,
    pub pass: bool,
    pub pages_scanned: usize,
    pub duration: Duration,
}

impl InspectionReport {
    fn build(verdicts: Vec<SafetyVerdict>, pages_scanned: usize, start: Instant) -> Self {
        let pass = verdicts.iter().all(|v| v.class.is_safe());
        InspectionReport { verdicts, pass, pages_scanned, duration: start.elapsed() }
    }

    pub fn unsafe_verdicts(&self) -> impl Iterator<Item = &SafetyVerdict> {
        self.verdicts.iter().filter(|v| v.class == SafetyClass::Unsafe)
    }
}

/// Inspects a flat region that is executable in its entirety.
pub fn inspect_code(code: &[u8], base: u64, entries: &EntryPointSet, templates: &TemplateSet) -> InspectionReport {
    let start = Instant::now();
    let verdicts = bytescan::scan(code, base).iter().map(|o| classify(code, base, o, entries, templates)).collect();
    let pages = code.len().div_ceil(PAGE_SIZE);
    InspectionReport::build(verdicts, pages, start)
}

/// Inspects 4 KiB pages. Runs of adjacent executable pages are treated as
/// contiguous code. Occurrences that are not entirely inside executable
/// pages are reported as [`SafetyClass::NonExecutableData`].
pub fn inspect_region<F>(
    pages: &[(u64, &[u8])],
    executable: F,
    entries: &EntryPointSet,
    templates: &TemplateSet,
) -> Result<InspectionReport, ScanError>
where
    F: Fn(u64) -> bool,
{
    let start = Instant::now();
    // validates page sizes
    let all = bytescan::scan_pages(pages, |_| true)?;
    let mut sorted: Vec<(u64, &[u8])> = pages.to_vec();
    sorted.sort_by_key(|(i, _)| *i);
    sorted.dedup_by_key(|(i, _)| *i);

    // contiguous executable runs: (base address, bytes)
    let mut runs: Vec<(u64, Vec<u8>)> = Vec::new();
    for (idx, bytes) in &sorted {
        if !executable(*idx) {
            continue;
        }
        let addr = idx * PAGE_SIZE as u64;
        match runs.last_mut() {
            Some((b, v)) if *b + v.len() as u64 == addr => v.extend_from_slice(bytes),
            _ => runs.push((addr, bytes.to_vec())),
        }
    }

    let mut verdicts = Vec::with_capacity(all.len());
    for occ in all {
        let run = runs.iter().find(|(b, v)| occ.offset >= *b && occ.end() <= *b + v.len() as u64);
        let v = match run {
            Some((b, code)) => classify(code, *b, &occ, entries, templates),
            None => SafetyVerdict { occurrence: occ, class: SafetyClass::NonExecutableData, evidence: Evidence::DataOnly },
        };
        verdicts.push(v);
    }
    Ok(InspectionReport::build(verdicts, sorted.len(), start))
}
