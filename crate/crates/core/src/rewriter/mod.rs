//! Removes unsafe WRPKRU/XRSTOR byte patterns from x86-64 code.
//!
//! Each unsafe occurrence is located within the decoded instruction
//! stream, assigned one of the seven rewrite rules (or a NOP insertion
//! when it spans two instructions), and the resulting plans are laid out
//! either by reassembling the whole region or, when addresses must stay
//! fixed, by patching in place and diverting to trampolines.

mod apply;
pub mod emit;
mod gate;
mod overlap;
mod plan;
pub mod runtime;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::ops::Range;

use thiserror::Error;

use crate::bytescan::{self, Occurrence};
use crate::inspector::{inspect_code, EntryPointSet, Evidence, InspectionReport, SafetyClass, TemplateSet};
use crate::x86::{decode_all, DecodeError, DecodedInstr, Form, Operand, Reg};

pub use apply::{apply, Applied};
pub use emit::{Emit, Item, Target};
pub use gate::{emit_call_gate, GateKind};
pub use overlap::{locate_overlap, FieldOverlap, OverlapClass};
pub use plan::{plan_rewrite, split_immediate, RewritePlan, SpillMode};
pub use runtime::{RuntimePageState, RuntimeRewriteOutcome, TRAP_BYTE};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RewriteError {
    #[error("cannot disassemble at {offset:#x}")]
    NotInSubset { offset: u64 },
    #[error("no applicable rule at {offset:#x}: {reason}")]
    NoApplicableRule { offset: u64, reason: String },
    #[error("branch at {at:#x} cannot reach its target")]
    RelocationOverflow { at: u64 },
    #[error("branch target {target:?} is not an instruction boundary")]
    UnresolvedTarget { target: Target },
    #[error("{remaining} unsafe occurrences left after {iterations} iterations")]
    NoFixpoint { remaining: usize, iterations: usize },
    #[error("layout: {0}")]
    Layout(String),
}

impl From<DecodeError> for RewriteError {
    fn from(e: DecodeError) -> Self {
        match e {
            DecodeError::NotInSubset { offset, .. } | DecodeError::Truncated { offset } => {
                RewriteError::NotInSubset { offset: offset as u64 }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Rule {
    R1,
    R2,
    R3,
    R4,
    R5,
    R6,
    R7,
    NopInsertion,
}

impl Rule {
    pub fn name(self) -> &'static str {
        match self {
            Rule::R1 => "rule-1",
            Rule::R2 => "rule-2",
            Rule::R3 => "rule-3",
            Rule::R4 => "rule-4",
            Rule::R5 => "rule-5",
            Rule::R6 => "rule-6",
            Rule::R7 => "rule-7",
            Rule::NopInsertion => "nop-insertion",
        }
    }
}

impl fmt::Display for Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayoutMode {
    /// Instructions may move; branches and RIP-relative operands are re-displaced.
    Reassemble,
    /// Every original instruction keeps its address. Grown sequences go
    /// to trampolines starting at `trampoline_base`.
    PreserveLayout { trampoline_base: u64 },
}

#[derive(Debug, Clone)]
pub struct Policy {
    /// Permit splitting ADD/SUB immediates even though CF/OF may differ.
    pub allow_flag_clobber: bool,
    /// Registers the caller guarantees dead at every rewrite site. Only
    /// these are used as scratch without a push/pop spill.
    pub dead_regs: Vec<Reg>,
    /// Guards appended by rule 1 are the first template of each kind.
    pub templates: TemplateSet,
    pub layout: LayoutMode,
    pub max_iterations: usize,
}

impl Default for Policy {
    fn default() -> Self {
        Policy {
            allow_flag_clobber: false,
            dead_regs: Vec::new(),
            templates: TemplateSet::default(),
            layout: LayoutMode::Reassemble,
            max_iterations: 16,
        }
    }
}

/// Linear-sweep disassembly of a code region.
#[derive(Debug, Clone)]
pub struct Listing {
    pub base: u64,
    pub code: Vec<u8>,
    pub instrs: Vec<(u64, DecodedInstr)>,
}

impl Listing {
    pub fn decode(code: &[u8], base: u64) -> Result<Listing, RewriteError> {
        let instrs = decode_all(code).map_err(|e| match RewriteError::from(e) {
            RewriteError::NotInSubset { offset } => RewriteError::NotInSubset { offset: base + offset },
            other => other,
        })?;
        let instrs = instrs.into_iter().map(|(off, d)| (base + off as u64, d)).collect();
        Ok(Listing { base, code: code.to_vec(), instrs })
    }

    pub fn end(&self) -> u64 {
        self.base + self.code.len() as u64
    }

    pub fn contains(&self, addr: u64) -> bool {
        addr >= self.base && addr < self.end()
    }

    /// Index of the instruction covering `addr`.
    pub fn index_of(&self, addr: u64) -> Option<usize> {
        let k = self.instrs.partition_point(|(a, _)| *a <= addr);
        let k = k.checked_sub(1)?;
        let (a, d) = &self.instrs[k];
        (addr < a + d.len as u64).then_some(k)
    }

    pub fn addr(&self, k: usize) -> u64 {
        self.instrs[k].0
    }

    pub fn range(&self, k: usize) -> Range<u64> {
        let (a, d) = &self.instrs[k];
        *a..a + d.len as u64
    }

    /// Re-emits instruction `k` so it keeps its meaning wherever it lands.
    pub fn identity(&self, k: usize) -> Emit {
        let (addr, d) = &self.instrs[k];
        let is_rel = matches!(d.form, Form::Rel8 | Form::Rel32) && matches!(d.operands.first(), Some(Operand::Rel(_)));
        if is_rel {
            let t = d.branch_target(*addr, d.len).expect("relative branch");
            Emit::Branch { instr: d.instr.clone(), target: Target::Orig(t) }
        } else if let Some(t) = d.rip_target(*addr, d.len) {
            Emit::RipMem { instr: d.instr.clone(), target: t }
        } else {
            Emit::Instr(d.instr.clone())
        }
    }

    /// Direct branch targets inside the region.
    pub fn branch_targets(&self) -> BTreeSet<u64> {
        self.instrs
            .iter()
            .filter(|(_, d)| matches!(d.form, Form::Rel8 | Form::Rel32))
            .filter_map(|(a, d)| d.branch_target(*a, d.len))
            .filter(|t| self.contains(*t))
            .collect()
    }
}

/// Result of a complete rewrite.
#[derive(Debug, Clone)]
pub struct Rewritten {
    pub base: u64,
    pub code: Vec<u8>,
    /// Appended trampoline region (layout-preserving mode only).
    pub trampoline: Option<(u64, Vec<u8>)>,
    /// Entry points translated to their new addresses.
    pub entries: EntryPointSet,
    /// Original instruction address to final address, for instructions
    /// that still exist.
    pub relocations: BTreeMap<u64, u64>,
    pub histogram: BTreeMap<Rule, usize>,
    pub plans: Vec<RewritePlan>,
    pub iterations: usize,
    /// Some plan split an ADD/SUB immediate under the flag-clobber policy.
    pub flags_clobbered: bool,
}

impl Rewritten {
    pub fn trampoline_count(&self) -> usize {
        self.plans.iter().filter(|p| p.trampolined).count()
    }

    pub fn unchanged(&self) -> bool {
        self.plans.is_empty()
    }
}

/// Inspects the main region and the trampoline region.
pub fn inspect_output(
    code: &[u8],
    base: u64,
    trampoline: Option<(u64, &[u8])>,
    entries: &EntryPointSet,
    templates: &TemplateSet,
) -> InspectionReport {
    let mut r = inspect_code(code, base, entries, templates);
    if let Some((tb, t)) = trampoline {
        let tr = inspect_code(t, tb, entries, templates);
        r.verdicts.extend(tr.verdicts);
        r.pass &= tr.pass;
        r.pages_scanned += tr.pages_scanned;
    }
    r
}

/// Byte ranges that must not be split or moved apart: each safe
/// occurrence together with the guard template that makes it safe.
pub fn protected_ranges(report: &InspectionReport) -> Vec<Range<u64>> {
    report
        .verdicts
        .iter()
        .filter_map(|v| match (&v.class, &v.evidence) {
            (SafetyClass::SafeB | SafetyClass::SafeXrstor, Evidence::Template { end, .. }) => {
                Some(v.occurrence.offset..*end)
            }
            _ => None,
        })
        .collect()
}

/// Scan, classify, plan and apply until the region inspects clean.
pub fn rewrite_all(code: &[u8], base: u64, entries: &EntryPointSet, policy: &Policy) -> Result<Rewritten, RewriteError> {
    let mut out = Rewritten {
        base,
        code: code.to_vec(),
        trampoline: match policy.layout {
            LayoutMode::PreserveLayout { trampoline_base } => Some((trampoline_base, Vec::new())),
            LayoutMode::Reassemble => None,
        },
        entries: entries.clone(),
        relocations: BTreeMap::new(),
        histogram: BTreeMap::new(),
        plans: Vec::new(),
        iterations: 0,
        flags_clobbered: false,
    };
    let mut first_listing: Option<Listing> = None;

    for iter in 0..policy.max_iterations {
        let tramp = out.trampoline.as_ref().map(|(b, t)| (*b, t.as_slice()));
        let report = inspect_output(&out.code, base, tramp, &out.entries, &policy.templates);
        if report.pass {
            out.iterations = iter;
            if let Some(l) = first_listing {
                out.relocations = l.instrs.iter().map(|(a, _)| (*a, out.relocations.get(a).copied().unwrap_or(*a))).collect();
            }
            return Ok(out);
        }
        let tramp_end = out.trampoline.as_ref().map(|(b, t)| b + t.len() as u64);
        let unsafe_occ: Vec<Occurrence> = report
            .unsafe_verdicts()
            .map(|v| v.occurrence)
            .filter(|o| o.offset >= base && o.end() <= base + out.code.len() as u64)
            .collect();
        if unsafe_occ.is_empty() {
            return Err(RewriteError::Layout(format!(
                "trampoline region ending at {:#x} contains an unguarded pattern",
                tramp_end.unwrap_or(0)
            )));
        }

        let listing = Listing::decode(&out.code, base)?;
        if first_listing.is_none() {
            first_listing = Some(listing.clone());
            out.relocations = listing.instrs.iter().map(|(a, _)| (*a, *a)).collect();
        }
        let mut plans: Vec<RewritePlan> = Vec::new();
        for occ in &unsafe_occ {
            let ov = locate_overlap(&listing, occ)?;
            if plans.iter().any(|p| p.range.start < ov.range.end && ov.range.start < p.range.end) {
                continue;
            }
            plans.push(plan_rewrite(&listing, occ, &ov, policy)?);
        }

        let protected = protected_ranges(&report);
        let tramp_cursor = tramp_end.unwrap_or(0);
        let applied = apply(&listing, &plans, policy, &out.entries, &protected, tramp_cursor)?;

        for p in &applied.plans {
            *out.histogram.entry(p.rule).or_default() += 1;
            out.flags_clobbered |= p.flags_clobbered;
        }
        out.plans.extend(applied.plans);
        out.code = applied.code;
        if let (Some((_, t)), Some(extra)) = (out.trampoline.as_mut(), applied.trampoline) {
            t.extend(extra);
        }
        let remap = |a: u64| applied.anchors.get(&a).copied().unwrap_or(a);
        out.entries = out.entries.iter().map(remap).collect();
        for v in out.relocations.values_mut() {
            *v = remap(*v);
        }
    }
    let tramp = out.trampoline.as_ref().map(|(b, t)| (*b, t.as_slice()));
    let report = inspect_output(&out.code, base, tramp, &out.entries, &policy.templates);
    if report.pass {
        out.iterations = policy.max_iterations;
        return Ok(out);
    }
    Err(RewriteError::NoFixpoint { remaining: report.unsafe_verdicts().count(), iterations: policy.max_iterations })
}

/// True when `bytes` contains no pattern, also checking `ctx` bytes on each side.
pub(crate) fn clean_in_context(before: &[u8], bytes: &[u8], after: &[u8]) -> bool {
    let mut v = before.to_vec();
    v.extend_from_slice(bytes);
    v.extend_from_slice(after);
    bytescan::is_clean(&v)
}
