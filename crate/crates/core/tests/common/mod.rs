//! Program generator and differential runner shared by the rewriter tests
//! and the acceptance suite.
#![allow(dead_code)]

pub mod fixtures;
pub mod scenarios;

use std::collections::BTreeMap;

use pkguard::bytescan;
use pkguard::inspector::EntryPointSet;
use pkguard::rewriter::{rewrite_all, LayoutMode, OverlapClass, Policy, RewriteError, Rewritten};
use pkguard::x86::{
    step, AluOp, Env, Fault, Flags, Instr, MachineState, Mem, OpSize, Operand, Reg, StepOutcome, SyscallAction,
};
use rand::seq::SliceRandom;
use rand::Rng;

pub const BASE: u64 = 0x40_1000;
pub const TRAMP_BASE: u64 = 0x48_0000;
const STACK_TOP: u64 = 0x7fff_0000_0000;
/// Bytes below the initial stack pointer ignored by the comparison.
const RED_ZONE: u64 = 512;
const STEP_LIMIT: usize = 20_000;

const POOL: [Reg; 11] =
    [Reg::Rax, Reg::Rcx, Reg::Rdx, Reg::Rbx, Reg::Rbp, Reg::Rsi, Reg::Rdi, Reg::R8, Reg::R9, Reg::R10, Reg::R12];
const OPS: [AluOp; 6] = [AluOp::Add, AluOp::Or, AluOp::And, AluOp::Sub, AluOp::Xor, AluOp::Cmp];

pub fn hex(s: &str) -> Vec<u8> {
    s.split_whitespace().map(|b| u8::from_str_radix(b, 16).unwrap()).collect()
}

fn enc(i: Instr) -> Vec<u8> {
    i.encode().unwrap()
}

// ---------------------------------------------------------------------------
// lazily materialised memory

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Data memory where every byte exists: unwritten bytes are a hash of
/// the seed and the address. Code lives in separate fetch-only regions.
pub struct LazyMem {
    pub seed: u64,
    pub code: Vec<(u64, Vec<u8>)>,
    pub written: BTreeMap<u64, u8>,
    pub syscalls: Vec<(u64, [u64; 3])>,
}

impl LazyMem {
    pub fn new(seed: u64, code: Vec<(u64, Vec<u8>)>) -> Self {
        LazyMem { seed, code, written: BTreeMap::new(), syscalls: Vec::new() }
    }

    fn byte(&self, addr: u64) -> u8 {
        self.written.get(&addr).copied().unwrap_or_else(|| splitmix(self.seed ^ addr) as u8)
    }
}

impl Env for LazyMem {
    fn fetch(&mut self, _s: &MachineState, addr: u64, buf: &mut [u8]) -> Result<usize, Fault> {
        for (b, c) in &self.code {
            if addr >= *b && addr < b + c.len() as u64 {
                let off = (addr - b) as usize;
                let n = buf.len().min(c.len() - off);
                buf[..n].copy_from_slice(&c[off..off + n]);
                return Ok(n);
            }
        }
        Err(Fault::Denied { addr, access: pkguard::x86::Access::Exec })
    }

    fn load(&mut self, _s: &MachineState, addr: u64, size: usize) -> Result<u64, Fault> {
        Ok((0..size as u64).fold(0, |v, k| v | (self.byte(addr.wrapping_add(k)) as u64) << (8 * k)))
    }

    fn store(&mut self, _s: &MachineState, addr: u64, size: usize, value: u64) -> Result<(), Fault> {
        for k in 0..size as u64 {
            self.written.insert(addr.wrapping_add(k), (value >> (8 * k)) as u8);
        }
        Ok(())
    }

    fn syscall(&mut self, state: &mut MachineState) -> SyscallAction {
        let nr = state.reg(Reg::Rax);
        self.syscalls.push((nr, [state.reg(Reg::Rdi), state.reg(Reg::Rsi), state.reg(Reg::Rdx)]));
        if nr == 60 {
            SyscallAction::Exit(state.reg(Reg::Rdi) as i64)
        } else {
            state.set_reg(Reg::Rax, 0);
            SyscallAction::Continue
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum End {
    Exit(i64),
    Fault(Fault),
    StepLimit,
}

pub struct Run {
    pub state: MachineState,
    pub end: End,
    pub mem: LazyMem,
}

pub fn run(code: Vec<(u64, Vec<u8>)>, entry: u64, init: &MachineState, seed: u64) -> Run {
    let mut mem = LazyMem::new(seed, code);
    let mut state = init.clone();
    state.rip = entry;
    for _ in 0..STEP_LIMIT {
        match step(&mut state, &mut mem) {
            StepOutcome::Continue => {}
            StepOutcome::Exit(c) => return Run { state, end: End::Exit(c), mem },
            StepOutcome::Fault(f) => return Run { state, end: End::Fault(f), mem },
        }
    }
    Run { state, end: End::StepLimit, mem }
}

pub fn random_state<R: Rng>(rng: &mut R) -> MachineState {
    let mut s = MachineState::new(0);
    for r in Reg::ALL {
        s.set_reg(r, rng.gen());
    }
    s.set_reg(Reg::Rsp, STACK_TOP - 8 * rng.gen_range(0..4096u64));
    s.flags = Flags { cf: rng.gen(), zf: rng.gen(), sf: rng.gen(), of: rng.gen() };
    s.pkru = rng.gen();
    s
}

fn map_fault(f: &Fault, map: &dyn Fn(u64) -> u64) -> Fault {
    match f.clone() {
        Fault::Undecodable { addr } => Fault::Undecodable { addr: map(addr) },
        Fault::Unmapped { addr } => Fault::Unmapped { addr },
        Fault::Denied { addr, access } => Fault::Denied { addr: map(addr), access },
        Fault::WrpkruOperands { addr } => Fault::WrpkruOperands { addr: map(addr) },
        Fault::Breakpoint { addr } => Fault::Breakpoint { addr: map(addr) },
    }
}

/// Runs the original and the rewritten code from the same state and
/// reports the first architectural difference. Dead registers and the
/// area just below the initial stack pointer are not compared; flags are
/// skipped only when the rewrite declared them clobbered.
pub fn differential(original: &[u8], out: &Rewritten, policy: &Policy, init: &MachineState, seed: u64) -> Result<(), String> {
    let a = run(vec![(BASE, original.to_vec())], BASE, init, seed);
    let mut regions = vec![(out.base, out.code.clone())];
    if let Some((tb, t)) = &out.trampoline {
        regions.push((*tb, t.clone()));
    }
    let entry = out.relocations.get(&BASE).copied().unwrap_or(BASE);
    let b = run(regions, entry, init, seed);

    let map = |x: u64| out.relocations.get(&x).copied().unwrap_or(x);
    let end_a = match &a.end {
        End::Fault(f) => End::Fault(map_fault(f, &map)),
        e => e.clone(),
    };
    if end_a != b.end {
        return Err(format!("termination differs: {:?} vs {:?}", a.end, b.end));
    }
    if let End::Exit(_) = a.end {
    } else if map(a.state.rip) != b.state.rip {
        return Err(format!("rip differs: {:#x} vs {:#x}", a.state.rip, b.state.rip));
    }
    for r in Reg::ALL {
        if policy.dead_regs.contains(&r) {
            continue;
        }
        if a.state.reg(r) != b.state.reg(r) {
            return Err(format!("{r:?} differs: {:#x} vs {:#x}", a.state.reg(r), b.state.reg(r)));
        }
    }
    if !out.flags_clobbered && a.state.flags != b.state.flags {
        return Err(format!("flags differ: {:?} vs {:?}", a.state.flags, b.state.flags));
    }
    if a.state.pkru != b.state.pkru {
        return Err(format!("pkru differs: {:#x} vs {:#x}", a.state.pkru, b.state.pkru));
    }
    let sp = init.reg(Reg::Rsp);
    let visible = |m: &BTreeMap<u64, u8>| -> BTreeMap<u64, u8> {
        m.iter().filter(|(k, _)| !(sp - RED_ZONE..sp).contains(*k)).map(|(k, v)| (*k, *v)).collect()
    };
    if visible(&a.mem.written) != visible(&b.mem.written) {
        return Err("memory differs".into());
    }
    if a.mem.syscalls != b.mem.syscalls {
        return Err(format!("syscalls differ: {:?} vs {:?}", a.mem.syscalls, b.mem.syscalls));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// program generator

#[derive(Debug, Clone)]
enum Piece {
    Bytes(Vec<u8>),
    /// Short conditional jump forward to the start of another piece.
    Jcc { cc: u8, to: usize },
}

fn filler<R: Rng>(rng: &mut R) -> Vec<u8> {
    let r = *POOL.choose(rng).unwrap();
    let r2 = *POOL.choose(rng).unwrap();
    let op = *OPS.choose(rng).unwrap();
    let size = if rng.gen() { OpSize::Dword } else { OpSize::Qword };
    let slot = Mem::base_disp(Reg::Rsp, 8 * rng.gen_range(0..8));
    enc(match rng.gen_range(0..8) {
        0 => Instr::mov_ri32(r, rng.gen()),
        1 => Instr::alu_mr(op, size, Operand::Reg(r), r2),
        2 => Instr::alu_mi(op, size, Operand::Reg(r), rng.gen()),
        3 => Instr::alu_mi8(op, size, Operand::Reg(r), rng.gen()),
        4 => Instr::mov_store(OpSize::Qword, slot, r),
        5 => Instr::mov_load(OpSize::Qword, r, slot),
        6 => Instr::bt_imm(size, Operand::Reg(r), rng.gen_range(0..32)),
        _ => Instr::mov_rr(size, r, r2),
    })
}

fn r32<R: Rng>(rng: &mut R) -> u8 {
    rng.gen()
}

/// Four immediate or displacement bytes holding one pattern.
fn pattern_dword<R: Rng>(rng: &mut R) -> Vec<u8> {
    let pat: &[u8] = match rng.gen_range(0..4) {
        0 | 1 => &[0x0F, 0x01, 0xEF],
        2 => &[0x0F, 0xAE, 0x2F],
        _ => &[0x0F, 0xAE, 0xA9],
    };
    let x = r32(rng) & 0x7F;
    if rng.gen() {
        [pat, &[x]].concat()
    } else {
        [&[x], pat].concat()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SiteKind {
    Wrpkru,
    Xrstor,
    Cross,
    ModRm,
    DispMem,
    DispIndexed,
    DispBranch,
    RipRelative,
    ImmAlu,
    ImmMov,
}

pub const SITE_KINDS: [SiteKind; 10] = [
    SiteKind::Wrpkru,
    SiteKind::Xrstor,
    SiteKind::Cross,
    SiteKind::ModRm,
    SiteKind::DispMem,
    SiteKind::DispIndexed,
    SiteKind::DispBranch,
    SiteKind::RipRelative,
    SiteKind::ImmAlu,
    SiteKind::ImmMov,
];

impl SiteKind {
    pub fn class(self) -> OverlapClass {
        match self {
            SiteKind::Wrpkru | SiteKind::Xrstor => OverlapClass::OpcodeExact,
            SiteKind::Cross => OverlapClass::CrossInstruction,
            SiteKind::ModRm => OverlapClass::ModRm,
            SiteKind::DispMem | SiteKind::DispIndexed | SiteKind::DispBranch | SiteKind::RipRelative => {
                OverlapClass::Displacement
            }
            SiteKind::ImmAlu | SiteKind::ImmMov => OverlapClass::Immediate,
        }
    }
}

/// Pieces of one site. Every pattern of the final program lies inside it.
fn site<R: Rng>(rng: &mut R, kind: SiteKind) -> Vec<Vec<u8>> {
    // flag-setting instruction so guards' flag effects stay invisible
    let reflag = enc(Instr::alu_mi(AluOp::Cmp, OpSize::Dword, Operand::Reg(Reg::Rbx), rng.gen()));
    let rex = |rng: &mut R| *[None, Some(0x48u8), Some(0x41), Some(0x49)].choose(rng).unwrap();
    let with_rex = |p: Option<u8>, rest: Vec<u8>| match p {
        Some(p) => [vec![p], rest].concat(),
        None => rest,
    };
    match kind {
        SiteKind::Wrpkru => vec![
            hex("31 c9"),
            hex("31 d2"),
            enc(Instr::mov_ri32(Reg::Rax, 3)),
            hex("0f 01 ef"),
            reflag,
        ],
        SiteKind::Xrstor => {
            let base = *POOL.choose(rng).unwrap();
            let m = Mem::base_disp(base, rng.gen_range(-64..64));
            vec![enc(Instr::alu_acc(AluOp::And, OpSize::Dword, !0x200)), enc(Instr::xrstor(m)), reflag]
        }
        SiteKind::Cross => match rng.gen_range(0..4) {
            0 => vec![hex("b0 0f"), hex("01 ef")],
            1 => vec![[hex("b9"), vec![r32(rng), r32(rng), r32(rng), 0x0F]].concat(), hex("01 ef")],
            2 => vec![hex("8b 0f"), hex("01 ef")],
            _ => vec![[hex("b8 00 00"), hex("0f ae")].concat(), hex("2b c1")],
        },
        SiteKind::ModRm => {
            let tail: Vec<u8> = if rng.gen() { vec![0x01, 0xEF] } else { vec![0xAE, 0x2F] };
            vec![with_rex(rex(rng), [vec![0x81, 0x0F], tail, vec![r32(rng), r32(rng) & 0x7F]].concat())]
        }
        SiteKind::DispMem => {
            let op = *[0x89u8, 0x8B, 0x01, 0x03, 0x31, 0x3B, 0x21].choose(rng).unwrap();
            let modrm = 0x80 | (*[0u8, 1, 2, 3, 6, 7].choose(rng).unwrap() << 3) | *[0u8, 1, 2, 3, 6, 7].choose(rng).unwrap();
            vec![with_rex(rex(rng), [vec![op, modrm], pattern_dword(rng)].concat())]
        }
        SiteKind::DispIndexed => {
            let op = *[0x01u8, 0x03, 0x29, 0x2B, 0x31, 0x33].choose(rng).unwrap();
            let reg = *[0u8, 1, 2, 3, 5, 7].choose(rng).unwrap() << 3;
            let sib = (rng.gen_range(0..4u8) << 6) | (6 << 3) | 7;
            vec![[vec![op, 0x84 | reg, sib], pattern_dword(rng)].concat()]
        }
        SiteKind::DispBranch => {
            let head = match rng.gen_range(0..3) {
                0 => hex("e9"),
                1 => vec![0x0F, 0x80 | *[0u8, 1, 2, 3, 4, 5, 6, 7, 8, 9, 12, 13, 14, 15].choose(rng).unwrap()],
                _ => hex("e8"),
            };
            vec![[head, pattern_dword(rng)].concat()]
        }
        SiteKind::RipRelative => {
            let head = match rng.gen_range(0..5) {
                0 => hex("8b 05"),
                1 => hex("48 89 1d"),
                2 => hex("03 0d"),
                3 => hex("ff 15"),
                _ => hex("ff 25"),
            };
            vec![[head, pattern_dword(rng)].concat()]
        }
        SiteKind::ImmAlu => {
            let head = match rng.gen_range(0..4) {
                0 => vec![[0x05u8, 0x0D, 0x25, 0x2D, 0x35, 0x3D][rng.gen_range(0..6)]],
                1 => vec![0x48, [0x05u8, 0x0D, 0x25, 0x2D, 0x35, 0x3D][rng.gen_range(0..6)]],
                2 => vec![0x81, 0xC0 | (*[0u8, 1, 4, 5, 6, 7].choose(rng).unwrap() << 3) | *[1u8, 2, 3, 6, 7].choose(rng).unwrap()],
                _ => vec![0x49, 0x81, 0xC0 | (*[0u8, 1, 4, 5, 6, 7].choose(rng).unwrap() << 3) | rng.gen_range(0..3u8)],
            };
            vec![[head, pattern_dword(rng)].concat()]
        }
        SiteKind::ImmMov => {
            let head = match rng.gen_range(0..3) {
                0 => vec![0xB8 | *[0u8, 1, 2, 3, 6, 7].choose(rng).unwrap()],
                1 => vec![0x48, 0xC7, 0xC0 | rng.gen_range(0..4u8)],
                _ => vec![0xC7, 0x44, 0x24, 8 * rng.gen_range(0..8u8)],
            };
            vec![[head, pattern_dword(rng)].concat()]
        }
    }
}

#[derive(Debug, Clone)]
pub struct Case {
    pub code: Vec<u8>,
    pub site: SiteKind,
    pub site_range: std::ops::Range<u64>,
    pub policy: Policy,
}

fn layout(pieces: &[Piece]) -> Option<Vec<u8>> {
    let mut offs = Vec::with_capacity(pieces.len() + 1);
    let mut at = 0usize;
    for p in pieces {
        offs.push(at);
        at += match p {
            Piece::Bytes(b) => b.len(),
            Piece::Jcc { .. } => 2,
        };
    }
    offs.push(at);
    let mut out = Vec::with_capacity(at);
    for (k, p) in pieces.iter().enumerate() {
        match p {
            Piece::Bytes(b) => out.extend_from_slice(b),
            Piece::Jcc { cc, to } => {
                let rel = offs[*to] as i64 - (offs[k] + 2) as i64;
                out.extend([0x70 | cc, i8::try_from(rel).ok()? as u8]);
            }
        }
    }
    Some(out)
}

pub fn random_policy<R: Rng>(rng: &mut R) -> Policy {
    Policy {
        allow_flag_clobber: rng.gen_bool(0.3),
        dead_regs: if rng.gen() { vec![Reg::R11] } else { vec![] },
        layout: if rng.gen_bool(0.25) {
            LayoutMode::PreserveLayout { trampoline_base: TRAMP_BASE }
        } else {
            LayoutMode::Reassemble
        },
        ..Policy::default()
    }
}

/// Filler, one site, more filler and an exit. Forward short branches hop
/// over parts of the program, some across the site.
pub fn gen_case<R: Rng>(rng: &mut R, kind: SiteKind, policy: Policy) -> Case {
    loop {
        let before = rng.gen_range(0..6);
        let after = rng.gen_range(1..6);
        let mut pieces: Vec<Piece> = (0..before).map(|_| Piece::Bytes(filler(rng))).collect();
        let site_first = pieces.len();
        pieces.extend(site(rng, kind).into_iter().map(Piece::Bytes));
        let site_last = pieces.len();
        pieces.extend((0..after).map(|_| Piece::Bytes(filler(rng))));
        pieces.push(Piece::Bytes(hex("b8 3c 00 00 00 0f 05")));

        // branch targets: filler boundaries and the site start
        let n = pieces.len();
        let targets: Vec<usize> = (0..n).filter(|k| *k <= site_first || *k >= site_last).collect();
        if rng.gen_bool(0.6) {
            let from = rng.gen_range(0..n - 1);
            if from > site_first && from < site_last {
                continue;
            }
            let later: Vec<usize> = targets.iter().copied().filter(|t| *t > from + 1).collect();
            if let Some(&to) = later.choose(rng) {
                let cc = *[0u8, 1, 2, 3, 4, 5, 6, 7, 8, 9, 12, 13, 14, 15].choose(rng).unwrap();
                pieces.insert(from, Piece::Jcc { cc, to });
                // shift indices at or after the insertion point
                for p in pieces.iter_mut() {
                    if let Piece::Jcc { to: t, .. } = p {
                        if *t > from {
                            *t += 1;
                        }
                    }
                }
            }
        }
        let Some(code) = layout(&pieces) else { continue };
        let occ = bytescan::scan(&code, BASE);
        if occ.len() != 1 {
            continue;
        }
        let o = occ[0];
        return Case { code, site: kind, site_range: o.offset..o.end(), policy };
    }
}

/// Rewrites a case with an empty entry set.
pub fn rewrite_case(case: &Case) -> Result<Rewritten, RewriteError> {
    rewrite_all(&case.code, BASE, &EntryPointSet::new(), &case.policy)
}
