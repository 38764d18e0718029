//! Lazy rewriting of pages whose code cannot be disassembled up front.
//!
//! The executable copy of the page starts out as all trap bytes while the
//! original content is kept in a non-executable reserve. Each trap taken
//! at a new address disassembles the reserve from there, rewrites what it
//! found, and publishes a fresh copy of the page.

use std::collections::BTreeSet;
use std::ops::Range;

use super::{rewrite_all, LayoutMode, Listing, Policy, RewriteError};
use crate::bytescan::{self, PAGE_SIZE};
use crate::inspector::{inspect_code, EntryPointSet};
use crate::x86::{decode, DecodeError};

pub const TRAP_BYTE: u8 = 0xCC;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RuntimeRewriteOutcome {
    /// A fresh copy holding `decoded` was swapped in.
    Swapped { decoded: Range<u64>, plans: usize },
    /// The reserve held no pattern; the original bytes were swapped in.
    Verbatim,
    /// This entry was handled before; nothing was disassembled.
    AlreadyDone,
    /// The trap byte is part of code that was already copied: a real INT3.
    GenuineTrap,
}

#[derive(Debug, Clone)]
pub struct RuntimePageState {
    pub page_addr: u64,
    /// Original content. Never executable.
    pub reserve: Vec<u8>,
    /// Content currently mapped executable.
    pub current: Vec<u8>,
    pub entries_done: BTreeSet<u64>,
    /// Byte ranges of `current` holding copied (and rewritten) code.
    pub occupied: Vec<Range<u64>>,
    pub tramp_base: u64,
    pub tramp: Vec<u8>,
    /// Number of times `runtime_rewrite` disassembled something.
    pub disassemblies: usize,
}

impl RuntimePageState {
    pub fn new(page_addr: u64, reserve: Vec<u8>, tramp_base: u64) -> Self {
        assert_eq!(reserve.len(), PAGE_SIZE);
        RuntimePageState {
            page_addr,
            reserve,
            current: vec![TRAP_BYTE; PAGE_SIZE],
            entries_done: BTreeSet::new(),
            occupied: Vec::new(),
            tramp_base,
            tramp: Vec::new(),
            disassemblies: 0,
        }
    }

    pub fn end(&self) -> u64 {
        self.page_addr + PAGE_SIZE as u64
    }

    fn occupied_at(&self, addr: u64) -> Option<&Range<u64>> {
        self.occupied.iter().find(|r| r.contains(&addr))
    }

    /// Handles a trap at `entry`.
    pub fn runtime_rewrite(
        &mut self,
        entry: u64,
        entries: &EntryPointSet,
        policy: &Policy,
    ) -> Result<RuntimeRewriteOutcome, RewriteError> {
        if self.entries_done.contains(&entry) {
            return Ok(RuntimeRewriteOutcome::AlreadyDone);
        }
        if self.occupied_at(entry).is_some() {
            return Ok(RuntimeRewriteOutcome::GenuineTrap);
        }
        if !(self.page_addr..self.end()).contains(&entry) {
            return Err(RewriteError::Layout(format!("{entry:#x} is outside page {:#x}", self.page_addr)));
        }
        self.disassemblies += 1;
        if self.occupied.is_empty() && bytescan::is_clean(&self.reserve) {
            self.current = self.reserve.clone();
            self.occupied.push(self.page_addr..self.end());
            self.entries_done.insert(entry);
            return Ok(RuntimeRewriteOutcome::Verbatim);
        }

        // linear sweep until a block end, the page end or copied code
        let mut at = entry;
        while at < self.end() && self.occupied_at(at).is_none() {
            let off = (at - self.page_addr) as usize;
            let limit = self
                .occupied
                .iter()
                .map(|r| r.start)
                .filter(|s| *s > at)
                .min()
                .unwrap_or(self.end());
            let window = &self.reserve[off..(limit - self.page_addr) as usize];
            match decode(window, 0) {
                Ok(d) => {
                    at += d.len as u64;
                    if d.ends_block() {
                        break;
                    }
                }
                Err(DecodeError::NotInSubset { .. }) | Err(DecodeError::Truncated { .. }) => break,
            }
        }
        if at == entry {
            return Err(RewriteError::NotInSubset { offset: entry });
        }
        let region = entry..at;
        let s = (entry - self.page_addr) as usize;
        let e = (at - self.page_addr) as usize;

        let cursor = self.tramp_base + self.tramp.len() as u64;
        let local = Policy { layout: LayoutMode::PreserveLayout { trampoline_base: cursor }, ..policy.clone() };
        let out = rewrite_all(&self.reserve[s..e], entry, entries, &local)?;
        debug_assert!(Listing::decode(&out.code, entry).is_ok());

        let mut fresh = self.current.clone();
        fresh[s..e].copy_from_slice(&out.code);
        let mut tramp = self.tramp.clone();
        if let Some((_, t)) = &out.trampoline {
            tramp.extend_from_slice(t);
        }
        let page_ok = inspect_code(&fresh, self.page_addr, entries, &policy.templates).pass;
        let tramp_ok = inspect_code(&tramp, self.tramp_base, entries, &policy.templates).pass;
        if !page_ok || !tramp_ok {
            return Err(RewriteError::NoApplicableRule {
                offset: entry,
                reason: "rewritten block forms a pattern with neighbouring code".into(),
            });
        }
        // publication point: the whole page is replaced at once
        self.current = fresh;
        self.tramp = tramp;
        self.occupied.push(region.clone());
        self.entries_done.insert(entry);
        Ok(RuntimeRewriteOutcome::Swapped { decoded: region, plans: out.plans.len() })
    }
}
