use std::ops::Range;

use super::{clean_in_context, Emit, FieldOverlap, Listing, OverlapClass, Policy, RewriteError, Rule, Target};
use crate::bytescan::{Occurrence, OccurrenceKind};
use crate::x86::{AluOp, Base, DecodedInstr, Form, Instr, Mem, Mnemonic, OpSize, Operand, Reg};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SpillMode {
    /// No scratch register involved.
    None,
    /// Scratch register declared dead by the policy.
    Free,
    /// Scratch register saved and restored around the sequence.
    PushPop,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RewritePlan {
    pub rule: Rule,
    pub class: OverlapClass,
    pub occurrence: u64,
    /// Original instructions replaced by `replacement`.
    pub range: Range<u64>,
    pub instrs: Range<usize>,
    pub replacement: Vec<Emit>,
    /// Out-of-line code; `Target::Label(i)` refers to `stubs[i]`.
    pub stubs: Vec<Vec<Emit>>,
    pub scratch: Option<Reg>,
    pub spill: SpillMode,
    pub flags_clobbered: bool,
    /// Set by `apply` when the replacement was placed in a trampoline.
    pub trampolined: bool,
}

const SPILL_ORDER: [Reg; 14] = [
    Reg::Rax,
    Reg::Rcx,
    Reg::Rdx,
    Reg::Rbx,
    Reg::Rsi,
    Reg::Rdi,
    Reg::R8,
    Reg::R9,
    Reg::R10,
    Reg::R11,
    Reg::R12,
    Reg::R13,
    Reg::R14,
    Reg::R15,
];

struct Candidate {
    rule: Rule,
    seq: Vec<Emit>,
    stubs: Vec<Vec<Emit>>,
    scratch: Option<Reg>,
    spill: SpillMode,
    flags_clobbered: bool,
}

impl Candidate {
    fn simple(rule: Rule, seq: Vec<Instr>) -> Self {
        Candidate {
            rule,
            seq: seq.into_iter().map(Emit::Instr).collect(),
            stubs: vec![],
            scratch: None,
            spill: SpillMode::None,
            flags_clobbered: false,
        }
    }

    fn with_scratch(rule: Rule, seq: Vec<Instr>, s: Reg, spill: SpillMode) -> Self {
        let seq = if spill == SpillMode::PushPop {
            let mut v = vec![Instr::push(s)];
            v.extend(seq);
            v.push(Instr::pop(s));
            v
        } else {
            seq
        };
        Candidate { scratch: Some(s), spill, ..Candidate::simple(rule, seq) }
    }

    /// Encoded bytes when the sequence is position independent.
    fn bytes(&self) -> Option<Vec<u8>> {
        let mut out = Vec::new();
        for e in &self.seq {
            match e {
                Emit::Instr(i) => out.extend(i.encode().ok()?),
                Emit::Bytes(b) => out.extend_from_slice(b),
                _ => return None,
            }
        }
        Some(out)
    }

    fn encodable(&self) -> bool {
        self.seq.iter().all(|e| match e {
            Emit::Instr(i) | Emit::Branch { instr: i, .. } | Emit::RipMem { instr: i, .. } => i.encode().is_ok(),
            Emit::Bytes(_) => true,
        })
    }
}

fn free_regs(d: &DecodedInstr, policy: &Policy) -> Vec<Reg> {
    let used = d.regs_used();
    policy
        .dead_regs
        .iter()
        .copied()
        .filter(|r| !matches!(r, Reg::Rsp | Reg::Rbp) && !used.contains(r))
        .collect()
}

fn spill_regs(d: &DecodedInstr, policy: &Policy) -> Vec<Reg> {
    let used = d.regs_used();
    SPILL_ORDER.iter().copied().filter(|r| !used.contains(r) && !policy.dead_regs.contains(r)).collect()
}

/// Loads `value` into `s` without touching flags and without repeating
/// the original immediate bytes: the upper part first, then a 16-bit patch.
fn materialize(s: Reg, value: u64) -> Vec<Instr> {
    let lo = value as u16;
    if value <= u32::MAX as u64 {
        vec![Instr::mov_ri32(s, value as u32 & 0xFFFF_0000), Instr::mov_ri16(s, lo)]
    } else {
        let hi = (value & !0xFFFF) as i64;
        vec![Instr::mov_mi(OpSize::Qword, Operand::Reg(s), hi), Instr::mov_ri16(s, lo)]
    }
}

/// Value of a sign-extended imm32 at the operation size.
fn imm_value(imm: i64, size: OpSize) -> u64 {
    match size {
        OpSize::Qword => imm as u64,
        _ => imm as u64 & size.mask(),
    }
}

fn rsp_adjusted(mem: &Mem, spill: SpillMode) -> Mem {
    let mut m = *mem;
    if spill == SpillMode::PushPop && m.base == Base::Reg(Reg::Rsp) {
        m.disp = m.disp.wrapping_add(8);
        m.canonicalize();
    }
    m
}

fn with_mem(i: &Instr, m: Mem) -> Instr {
    let mut n = i.clone();
    *n.mem_operand_mut().expect("memory operand") = m;
    Instr::new(n.mnemonic, n.size, n.form, n.operands)
}

fn reads_rsp_explicitly(i: &Instr) -> bool {
    i.operands.iter().any(|o| matches!(o, Operand::Reg(Reg::Rsp)))
}

fn spill_allowed(i: &Instr) -> bool {
    !reads_rsp_explicitly(i) && !matches!(i.mnemonic, Mnemonic::Call | Mnemonic::Jmp | Mnemonic::Ret)
}

/// Rule 2 / 3: address through a copy of the base register.
fn rebase_candidates(d: &DecodedInstr, policy: &Policy) -> Vec<Candidate> {
    let Some(mem) = d.mem_operand().copied() else { return vec![] };
    let Base::Reg(base) = mem.base else { return vec![] };
    let mut out = Vec::new();
    let mut build = |s: Reg, spill: SpillMode, rule: Rule| {
        let mut m = rsp_adjusted(&mem, spill);
        m.base = Base::Reg(s);
        m.canonicalize();
        let seq = vec![Instr::mov_rr(OpSize::Qword, s, base), with_mem(d, m)];
        out.push(Candidate::with_scratch(rule, seq, s, spill));
    };
    for s in free_regs(d, policy) {
        build(s, SpillMode::Free, Rule::R2);
    }
    if spill_allowed(d) {
        for s in spill_regs(d, policy) {
            build(s, SpillMode::PushPop, Rule::R3);
        }
    }
    out
}

/// Rule 4: move the displacement into a register.
fn displacement_candidates(d: &DecodedInstr, policy: &Policy) -> Vec<Candidate> {
    let Some(mem) = d.mem_operand().copied() else { return vec![] };
    let sets_all_flags = matches!(d.mnemonic, Mnemonic::Alu(_));
    let mut out = Vec::new();
    let mut build = |s: Reg, spill: SpillMode| {
        let m0 = rsp_adjusted(&mem, spill);
        let mut seq = materialize(s, m0.disp as i64 as u64);
        let m = match (m0.base, m0.index) {
            (Base::Reg(b), None) => Mem::base_index(b, s, 1, 0),
            (Base::None, None) => Mem::base_disp(s, 0),
            (Base::None, Some(ix)) => Mem::base_index(s, ix, m0.scale, 0),
            (Base::Reg(b), Some(ix)) => {
                // the instruction rewrites every flag, so the add is invisible
                if !sets_all_flags {
                    return;
                }
                seq.push(Instr::alu_mr(AluOp::Add, OpSize::Qword, Operand::Reg(s), b));
                Mem::base_index(s, ix, m0.scale, 0)
            }
            (Base::Rip, _) => return,
        };
        seq.push(with_mem(d, m));
        out.push(Candidate::with_scratch(Rule::R4, seq, s, spill));
    };
    for s in free_regs(d, policy) {
        build(s, SpillMode::Free);
    }
    if spill_allowed(d) {
        for s in spill_regs(d, policy) {
            build(s, SpillMode::PushPop);
        }
    }
    out
}

/// Rule 5: direct branches go through a stub, RIP-relative operands are
/// re-displaced by executing them from elsewhere.
fn relocation_candidate(listing: &Listing, k: usize) -> Option<Candidate> {
    let (addr, d) = &listing.instrs[k];
    let next = addr + d.len as u64;
    let jmp_stub = Instr::jmp_rel32(0);
    let is_rel = matches!(d.form, Form::Rel32) && d.rel().is_some();
    let (seq, stub) = if is_rel {
        let t = d.branch_target(*addr, d.len)?;
        let seq = vec![Emit::Branch { instr: d.instr.clone(), target: Target::Label(0) }];
        (seq, vec![Emit::Branch { instr: jmp_stub.clone(), target: Target::Orig(t) }])
    } else if let Some(t) = d.rip_target(*addr, d.len) {
        let mem = Mem::rip(0);
        match d.mnemonic {
            // the call stays at the site so the return address is unchanged
            Mnemonic::Call => (
                vec![Emit::Instr(Instr::nop()), Emit::Branch { instr: Instr::call_rel32(0), target: Target::Label(0) }],
                vec![Emit::RipMem { instr: Instr::jmp_rm(Operand::Mem(mem)), target: t }],
            ),
            Mnemonic::Jmp => (
                vec![Emit::Branch { instr: jmp_stub.clone(), target: Target::Label(0) }],
                vec![Emit::RipMem { instr: Instr::jmp_rm(Operand::Mem(mem)), target: t }],
            ),
            _ => (
                vec![Emit::Branch { instr: jmp_stub.clone(), target: Target::Label(0) }],
                vec![
                    Emit::RipMem { instr: d.instr.clone(), target: t },
                    Emit::Branch { instr: jmp_stub, target: Target::Orig(next) },
                ],
            ),
        }
    } else {
        return None;
    };
    Some(Candidate {
        rule: Rule::R5,
        seq,
        stubs: vec![stub],
        scratch: None,
        spill: SpillMode::None,
        flags_clobbered: false,
    })
}

/// Pairs `(a, b)` with `op(op(x, a), b) == op(x, imm)`, changing the
/// pattern's leading 0x0F at byte `i`.
fn split_pairs(op: AluOp, imm: i32, i: u32) -> Vec<(i32, i32)> {
    let sh = |v: u32| (v << (8 * i)) as i32;
    match op {
        AluOp::Add | AluOp::Sub => {
            vec![(imm.wrapping_sub(sh(1)), sh(1)), (imm.wrapping_sub(sh(2)), sh(2))]
        }
        AluOp::Xor => vec![(imm ^ sh(1), sh(1)), (imm ^ sh(0x10), sh(0x10))],
        AluOp::Or => vec![(imm & !sh(1), sh(1)), (imm & !sh(2), sh(2))],
        AluOp::And => vec![(imm | sh(0x10), imm | sh(0x20)), (imm | sh(0x40), imm | sh(0x80))],
        AluOp::Cmp => vec![],
    }
}

/// The associative split used by rule 7.
pub fn split_immediate(op: AluOp, imm: i32, byte: u32) -> Option<(i32, i32)> {
    split_pairs(op, imm, byte).into_iter().next()
}

fn alu_imm_like(d: &Instr, op: AluOp, imm: i32) -> Instr {
    match d.form {
        Form::AccImm => Instr::alu_acc(op, d.size, imm),
        _ => Instr::alu_mi(op, d.size, d.operands[0], imm),
    }
}

fn immediate_candidates(listing: &Listing, k: usize, occ: &Occurrence, policy: &Policy) -> Vec<Candidate> {
    let (addr, d) = &listing.instrs[k];
    let Some(imm) = d.imm() else { return vec![] };
    let imm_start = addr + d.extents.imm.as_ref().map(|r| r.start as u64).unwrap_or(0);
    let byte = occ.offset.saturating_sub(imm_start) as u32;
    let mut out = Vec::new();
    match d.mnemonic {
        Mnemonic::Mov => {
            let dst = d.operands[0];
            let value = match (d.form, d.size) {
                (Form::OpRegImm, OpSize::Dword) => imm as u32 as u64,
                _ => imm_value(imm, d.size),
            };
            let lo = value as u16;
            let seq = match dst {
                Operand::Reg(r) => materialize(r, value),
                Operand::Mem(_) => {
                    let hi = match d.size {
                        OpSize::Qword => (value & !0xFFFF) as i64,
                        _ => (value & 0xFFFF_0000) as i64,
                    };
                    vec![Instr::mov_mi(d.size, dst, hi), Instr::mov_mi(OpSize::Word, dst, lo as i64)]
                }
                _ => vec![],
            };
            if !seq.is_empty() {
                out.push(Candidate::simple(Rule::R7, seq));
            }
        }
        Mnemonic::Alu(op) => {
            let dst = if d.form == Form::AccImm { Operand::Reg(Reg::Rax) } else { d.operands[0] };
            let value = imm_value(imm, d.size);
            let rule6 = |s: Reg, spill: SpillMode| {
                let mut seq = materialize(s, value);
                let dst = match dst {
                    Operand::Mem(m) => Operand::Mem(rsp_adjusted(&m, spill)),
                    other => other,
                };
                seq.push(Instr::alu_mr(op, d.size, dst, s));
                Candidate::with_scratch(Rule::R6, seq, s, spill)
            };
            for s in free_regs(d, policy) {
                out.push(rule6(s, SpillMode::Free));
            }
            let flag_exact = matches!(op, AluOp::Xor | AluOp::Or | AluOp::And);
            if flag_exact || (policy.allow_flag_clobber && matches!(op, AluOp::Add | AluOp::Sub)) {
                for (a, b) in split_pairs(op, imm as i32, byte) {
                    let mut c = Candidate::simple(Rule::R7, vec![alu_imm_like(d, op, a), alu_imm_like(d, op, b)]);
                    c.flags_clobbered = !flag_exact;
                    out.push(c);
                }
            }
            if spill_allowed(d) {
                for s in spill_regs(d, policy) {
                    out.push(rule6(s, SpillMode::PushPop));
                }
            }
        }
        _ => {}
    }
    out
}

/// Chooses a rule for one unsafe occurrence.
pub fn plan_rewrite(
    listing: &Listing,
    occ: &Occurrence,
    overlap: &FieldOverlap,
    policy: &Policy,
) -> Result<RewritePlan, RewriteError> {
    let k = overlap.instrs.start;
    let (addr, d) = &listing.instrs[k];
    let no_rule = |reason: &str| RewriteError::NoApplicableRule { offset: occ.offset, reason: reason.to_string() };

    let candidates: Vec<Candidate> = match overlap.class {
        OverlapClass::OpcodeExact => {
            let guard = match occ.kind {
                OccurrenceKind::Wrpkru => policy.templates.wrpkru.first(),
                OccurrenceKind::Xrstor => policy.templates.xrstor.first(),
            }
            .ok_or_else(|| no_rule("no guard template registered"))?;
            vec![Candidate {
                seq: vec![listing.identity(k), Emit::Bytes(guard.bytes.clone())],
                ..Candidate::simple(Rule::R1, vec![])
            }]
        }
        OverlapClass::CrossInstruction => vec![Candidate {
            seq: vec![listing.identity(k), Emit::Instr(Instr::nop())],
            ..Candidate::simple(Rule::NopInsertion, vec![])
        }],
        OverlapClass::ModRm => rebase_candidates(d, policy),
        OverlapClass::Displacement => {
            let mut v: Vec<Candidate> = relocation_candidate(listing, k).into_iter().collect();
            if v.is_empty() {
                v = displacement_candidates(d, policy);
            }
            v
        }
        OverlapClass::Immediate => immediate_candidates(listing, k, occ, policy),
    };

    let range = listing.range(k);
    let before_start = range.start.saturating_sub(2).max(listing.base);
    let before = &listing.code[(before_start - listing.base) as usize..(range.start - listing.base) as usize];
    let after_end = (range.end + 2).min(listing.end());
    let after = &listing.code[(range.end - listing.base) as usize..(after_end - listing.base) as usize];
    // prefer candidates that are clean together with their neighbours
    let mut fallback = None;
    let mut chosen = None;
    for c in candidates.into_iter().filter(|c| c.encodable()) {
        match c.bytes() {
            Some(b)
                if !matches!(c.rule, Rule::R1 | Rule::NopInsertion) && !clean_in_context(before, &b, after) =>
            {
                if fallback.is_none() && crate::bytescan::is_clean(&b) {
                    fallback = Some(c);
                }
            }
            _ => {
                chosen = Some(c);
                break;
            }
        }
    }
    let c = chosen.or(fallback).ok_or_else(|| {
        no_rule(&format!("{} overlap in `{}` at {:#x}", overlap.class.name(), d.instr, addr))
    })?;
    Ok(RewritePlan {
        rule: c.rule,
        class: overlap.class,
        occurrence: occ.offset,
        range,
        instrs: k..k + 1,
        replacement: c.seq,
        stubs: c.stubs,
        scratch: c.scratch,
        spill: c.spill,
        flags_clobbered: c.flags_clobbered,
        trampolined: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bytescan::scan;
    use crate::rewriter::locate_overlap;

    fn hex(s: &str) -> Vec<u8> {
        s.split_whitespace().map(|b| u8::from_str_radix(b, 16).unwrap()).collect()
    }

    fn plan(code: &[u8], policy: &Policy) -> RewritePlan {
        let l = Listing::decode(code, 0x1000).unwrap();
        let occ = scan(code, 0x1000)[0];
        let ov = locate_overlap(&l, &occ).unwrap();
        plan_rewrite(&l, &occ, &ov, policy).unwrap()
    }

    #[test]
    fn split_matches_schematic_example() {
        assert_eq!(split_immediate(AluOp::Add, 0x0F01EF00, 3), Some((0x0E01EF00, 0x01000000)));
        for op in [AluOp::Add, AluOp::Sub, AluOp::Xor, AluOp::Or, AluOp::And] {
            for (a, b) in split_pairs(op, 0x00EF010F, 0) {
                let x = 0x1234_5678u32;
                let f = |x: u32, v: i32| match op {
                    AluOp::Add => x.wrapping_add(v as u32),
                    AluOp::Sub => x.wrapping_sub(v as u32),
                    AluOp::Xor => x ^ v as u32,
                    AluOp::Or => x | v as u32,
                    AluOp::And => x & v as u32,
                    AluOp::Cmp => unreachable!(),
                };
                assert_eq!(f(f(x, a), b), f(x, 0x00EF010F), "{op:?}");
            }
        }
    }

    #[test]
    fn rule_selection_by_class() {
        let def = Policy::default();
        let dead = Policy { dead_regs: vec![Reg::R11], ..Policy::default() };
        let clobber = Policy { allow_flag_clobber: true, ..Policy::default() };

        assert_eq!(plan(&hex("0f 01 ef"), &def).rule, Rule::R1);
        assert_eq!(plan(&hex("b0 0f 01 ef"), &def).rule, Rule::NopInsertion);
        let p = plan(&hex("81 0f 01 ef 34 12"), &dead);
        assert_eq!((p.rule, p.scratch, p.spill), (Rule::R2, Some(Reg::R11), SpillMode::Free));
        assert_eq!(plan(&hex("81 0f 01 ef 34 12"), &def).rule, Rule::R3);
        assert_eq!(plan(&hex("89 87 0f 01 ef 00"), &dead).rule, Rule::R4);
        assert_eq!(plan(&hex("e9 0f 01 ef 00"), &def).rule, Rule::R5);
        assert_eq!(plan(&hex("8b 05 0f 01 ef 00"), &def).rule, Rule::R5);
        assert_eq!(plan(&hex("05 0f 01 ef 00"), &dead).rule, Rule::R6);
        let p = plan(&hex("05 0f 01 ef 00"), &clobber);
        assert_eq!((p.rule, p.flags_clobbered), (Rule::R7, true));
        let p = plan(&hex("35 0f 01 ef 00"), &def);
        assert_eq!((p.rule, p.flags_clobbered), (Rule::R7, false));
        assert_eq!(plan(&hex("b8 0f 01 ef 00"), &def).rule, Rule::R7);
        let p = plan(&hex("05 0f 01 ef 00"), &def);
        assert_eq!((p.rule, p.spill), (Rule::R6, SpillMode::PushPop));
    }

    #[test]
    fn materialize_is_clean_and_exact() {
        for v in [0x00EF010Fu64, 0xEF010F00, 0xFFFF_FFFF_EF01_0F00, 0x0F01EF00, 0] {
            let seq = materialize(Reg::Rbx, v);
            let bytes: Vec<u8> = seq.iter().flat_map(|i| i.encode().unwrap()).collect();
            assert!(crate::bytescan::is_clean(&bytes[..bytes.len() - 1]), "{v:#x}");
            let mut mem = crate::x86::FlatMemory::with_code(0, &bytes);
            let mut st = crate::x86::MachineState::new(0);
            st.set_reg(Reg::Rbx, 0x5555_5555_5555_5555);
            while st.rip < bytes.len() as u64 {
                crate::x86::step(&mut st, &mut mem);
            }
            assert_eq!(st.reg(Reg::Rbx), v);
        }
    }
}
