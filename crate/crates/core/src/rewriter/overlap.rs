use std::ops::Range;

use super::{Listing, RewriteError};
use crate::bytescan::Occurrence;
use crate::x86::{FieldKind, Mnemonic};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum OverlapClass {
    OpcodeExact,
    ModRm,
    Displacement,
    Immediate,
    CrossInstruction,
}

impl OverlapClass {
    pub fn name(self) -> &'static str {
        match self {
            OverlapClass::OpcodeExact => "opcode",
            OverlapClass::ModRm => "modrm",
            OverlapClass::Displacement => "displacement",
            OverlapClass::Immediate => "immediate",
            OverlapClass::CrossInstruction => "cross-instruction",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FieldOverlap {
    pub class: OverlapClass,
    /// Indices of the covered instructions in the listing.
    pub instrs: Range<usize>,
    /// Byte range of the covered instructions.
    pub range: Range<u64>,
    /// Fields touched by the pattern, with the address of their instruction.
    pub fields: Vec<(u64, FieldKind)>,
}

/// Finds which instruction fields the three pattern bytes fall into.
pub fn locate_overlap(listing: &Listing, occ: &Occurrence) -> Result<FieldOverlap, RewriteError> {
    let first = listing.index_of(occ.offset).ok_or(RewriteError::NotInSubset { offset: occ.offset })?;
    let last = listing.index_of(occ.end() - 1).ok_or(RewriteError::NotInSubset { offset: occ.end() - 1 })?;
    let range = listing.addr(first)..listing.range(last).end;

    let mut fields = Vec::new();
    for k in first..=last {
        let (addr, d) = &listing.instrs[k];
        for (kind, r) in d.extents.fields() {
            let (s, e) = (addr + r.start as u64, addr + r.end as u64);
            if s < occ.end() && occ.offset < e {
                fields.push((*addr, kind));
            }
        }
    }
    let instrs = first..last + 1;
    if first != last {
        return Ok(FieldOverlap { class: OverlapClass::CrossInstruction, instrs, range, fields });
    }

    let (addr, d) = &listing.instrs[first];
    let has = |k: FieldKind| fields.iter().any(|(_, f)| *f == k);
    let class = if matches!(d.mnemonic, Mnemonic::Wrpkru | Mnemonic::Xrstor)
        && occ.offset == addr + d.extents.opcode_start as u64
    {
        OverlapClass::OpcodeExact
    } else if has(FieldKind::ModRm) {
        OverlapClass::ModRm
    } else if has(FieldKind::Disp) {
        OverlapClass::Displacement
    } else if has(FieldKind::Imm) {
        OverlapClass::Immediate
    } else {
        // three bytes inside one instruction always reach a non-SIB field
        debug_assert!(!fields.iter().all(|(_, f)| *f == FieldKind::Sib));
        return Err(RewriteError::NoApplicableRule {
            offset: occ.offset,
            reason: format!("pattern only overlaps {:?}", fields.iter().map(|f| f.1).collect::<Vec<_>>()),
        });
    };
    Ok(FieldOverlap { class, instrs, range, fields })
}
