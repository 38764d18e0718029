//! Random simulator scenarios, emitted in the scenario text format so a
//! failing seed can be replayed with `pkguard sim`.

use std::fmt::Write;

use pkguard::rewriter::{emit_call_gate, GateKind};
use pkguard::sim::{pool_base, DomainConfig, IsolationMode, ALLOC_SYSCALL, SYS_EXIT, SYS_MMAP, SYS_MPROTECT, SYS_RT_SIGRETURN, SYS_WRITE};
use pkguard::x86::{Instr, Mem, OpSize, Operand, Reg};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const U_CODE: u64 = 0x40_0000;
pub const U_DATA: u64 = 0x48_0000;
pub const T_CODE: u64 = 0x50_0000;
const T_STRIDE: u64 = 0x1_0000;
const GETPID: u32 = 39;

// mov eax, 42; ret
const CLEAN_JIT: [u8; 6] = [0xB8, 0x2A, 0, 0, 0, 0xC3];
// xor ecx; xor edx; mov eax, 3; wrpkru; mov eax, 42; ret
const BARE_JIT: [u8; 18] = [0x31, 0xC9, 0x31, 0xD2, 0xB8, 3, 0, 0, 0, 0x0F, 0x01, 0xEF, 0xB8, 0x2A, 0, 0, 0, 0xC3];

struct Asm {
    base: u64,
    bytes: Vec<u8>,
}

impl Asm {
    fn new(base: u64) -> Self {
        Asm { base, bytes: Vec::new() }
    }

    fn here(&self) -> u64 {
        self.base + self.bytes.len() as u64
    }

    fn i(&mut self, i: Instr) {
        self.bytes.extend(i.encode().unwrap());
    }

    fn call(&mut self, target: u64) {
        let rel = target as i64 - (self.here() + 5) as i64;
        self.i(Instr::call_rel32(rel as i32));
    }

    fn syscall(&mut self, nr: u64, args: &[u64]) {
        self.i(Instr::mov_ri32(Reg::Rax, nr as u32));
        for (r, v) in [Reg::Rdi, Reg::Rsi, Reg::Rdx].iter().zip(args) {
            self.i(Instr::mov_ri32(*r, *v as u32));
        }
        self.i(Instr::syscall());
    }

    fn store(&mut self, addr: u64) {
        self.i(Instr::mov_ri32(Reg::Rbx, addr as u32));
        self.i(Instr::mov_store(OpSize::Qword, Mem::base_disp(Reg::Rbx, 0), Reg::Rax));
    }

    fn load(&mut self, addr: u64) {
        self.i(Instr::mov_ri32(Reg::Rbx, addr as u32));
        self.i(Instr::mov_load(OpSize::Qword, Reg::Rcx, Mem::base_disp(Reg::Rbx, 0)));
    }

    /// Maps a page, writes `payload` with word stores, makes it R|X and calls it.
    fn jit(&mut self, payload: &[u8]) {
        self.syscall(SYS_MMAP, &[0, 4096, 3]);
        self.i(Instr::mov_rr(OpSize::Qword, Reg::Rbx, Reg::Rax));
        for (k, w) in payload.chunks(2).enumerate() {
            let dst = Operand::Mem(Mem::base_disp(Reg::Rbx, 2 * k as i32));
            let imm = u16::from_le_bytes([w[0], *w.get(1).unwrap_or(&0)]);
            self.i(Instr::mov_mi(OpSize::Word, dst, imm as i64));
        }
        self.i(Instr::mov_ri32(Reg::Rax, SYS_MPROTECT as u32));
        self.i(Instr::mov_rr(OpSize::Qword, Reg::Rdi, Reg::Rbx));
        self.i(Instr::mov_ri32(Reg::Rsi, 4096));
        self.i(Instr::mov_ri32(Reg::Rdx, 5));
        self.i(Instr::syscall());
        self.i(Instr::call_rm(Operand::Reg(Reg::Rbx)));
    }

    fn hex(&self) -> String {
        self.bytes.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// What one random scenario contains, for coverage accounting.
#[derive(Debug, Default, Clone, Copy)]
pub struct Shape {
    pub threads: usize,
    pub signals: usize,
    pub jit: bool,
    pub integrity: bool,
    pub components: usize,
    pub on_demand: bool,
}

struct Gen<'a> {
    rng: &'a mut ChaCha8Rng,
    components: usize,
    jit: bool,
}

impl Gen<'_> {
    fn pool(&mut self) -> u64 {
        let c = self.rng.gen_range(1..self.components);
        pool_base(c) + 8 * self.rng.gen_range(0..16)
    }

    fn u_ops(&mut self, a: &mut Asm, gates: &[u64], n: usize) {
        for _ in 0..n {
            match self.rng.gen_range(0..10) {
                0..=3 => {
                    a.i(Instr::mov_ri32(Reg::Rdi, self.rng.gen_range(1..100)));
                    a.call(*gates.choose(self.rng).unwrap());
                }
                4 => a.store(U_DATA + 8 * self.rng.gen_range(0..64)),
                5 => a.syscall(SYS_WRITE, &[1, U_DATA, 8]),
                6 => a.syscall(GETPID as u64, &[]),
                7 => a.syscall(SYS_MMAP, &[0, 4096, 5]),
                8 => a.syscall(SYS_MPROTECT, &[U_DATA, 4096, 5]),
                _ => a.syscall(ALLOC_SYSCALL, &[64]),
            }
        }
    }

    fn t_body(&mut self, a: &mut Asm, own: usize) {
        for _ in 0..self.rng.gen_range(1..5) {
            match self.rng.gen_range(0..8) {
                0..=2 => a.store(pool_base(own) + 8 * self.rng.gen_range(0..16)),
                3 => a.load(pool_base(own)),
                4 => {
                    let p = self.pool();
                    a.load(p);
                }
                5 => a.syscall(ALLOC_SYSCALL, &[32]),
                _ if self.rng.gen_bool(0.5) => {
                    self.jit = true;
                    let payload: &[u8] = if self.rng.gen() { &CLEAN_JIT } else { &BARE_JIT };
                    a.jit(payload);
                }
                _ => a.syscall(SYS_WRITE, &[1, U_DATA, 4]),
            }
        }
    }
}

/// A seeded random scenario and its shape.
pub fn random_scenario(seed: u64) -> (String, Shape) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let components = if rng.gen_bool(0.35) { rng.gen_range(3..=4) } else { 2 };
    let mode = if rng.gen_bool(0.3) { IsolationMode::IntegrityOnly } else { IsolationMode::Full };
    let mut domains = DomainConfig::star(components, mode);
    if components > 2 && rng.gen() {
        // the last component also trusts component 1
        domains.trust.push((components - 1, 1));
    }
    domains.validate().unwrap();
    let on_demand = rng.gen();

    let mut text = String::new();
    writeln!(text, "seed {seed}").unwrap();
    writeln!(text, "mode {}", if mode == IsolationMode::Full { "full" } else { "integrity" }).unwrap();
    writeln!(text, "intercept {}", if on_demand { "on-demand" } else { "eager" }).unwrap();
    writeln!(text, "rewrite-on-fault {}", if rng.gen() { "on" } else { "off" }).unwrap();
    writeln!(text, "continue-on-fault on").unwrap();
    writeln!(text, "domains {components}").unwrap();
    for (a, b) in &domains.trust {
        writeln!(text, "trust {a} {b}").unwrap();
    }
    if rng.gen() {
        writeln!(text, "deny-untrusted {GETPID}").unwrap();
    }

    let mut g = Gen { rng: &mut rng, components, jit: false };
    let disallow = domains.disallow();
    let mut gates = Vec::new();
    let mut code_ranges = Vec::new();
    for c in 1..components {
        let mut a = Asm::new(T_CODE + (c as u64 - 1) * T_STRIDE);
        a.bytes.extend(emit_call_gate(GateKind::Enter, domains.allow(c), disallow));
        let entry = a.here();
        g.t_body(&mut a, c);
        a.bytes.extend(emit_call_gate(GateKind::Exit, domains.allow(c), disallow));
        a.i(Instr::ret());
        writeln!(text, "code {c} {:#x} {}", a.base, a.hex()).unwrap();
        writeln!(text, "entry {c} {entry:#x}").unwrap();
        gates.push(a.base);
        code_ranges.push(a.base..a.here());
    }

    let mut u = Asm::new(U_CODE);
    let n = g.rng.gen_range(1..8);
    g.u_ops(&mut u, &gates, n);
    if g.rng.gen_bool(0.2) {
        let p = g.pool();
        u.load(p);
    }
    u.syscall(SYS_EXIT, &[0]);
    let worker = u.here();
    let n = g.rng.gen_range(1..5);
    g.u_ops(&mut u, &gates, n);
    u.syscall(SYS_EXIT, &[0]);
    let handler = u.here();
    u.store(U_DATA + 0x200);
    if g.rng.gen_bool(0.3) {
        let p = g.pool();
        u.load(p);
    }
    u.syscall(SYS_RT_SIGRETURN, &[]);
    code_ranges.push(U_CODE..u.here());
    writeln!(text, "code 0 {U_CODE:#x} {}", u.hex()).unwrap();
    writeln!(text, "zero 0 {U_DATA:#x} rw 4096").unwrap();
    writeln!(text, "main 0 {U_CODE:#x}").unwrap();

    let mut shape = Shape { components, integrity: mode == IsolationMode::IntegrityOnly, on_demand, ..Shape::default() };
    for _ in 0..g.rng.gen_range(0..4) {
        let start = match g.rng.gen_range(0..4) {
            0 | 1 => worker,
            2 => *gates.choose(g.rng).unwrap(),
            // an arbitrary byte of any code segment
            _ => {
                let r = code_ranges.choose(g.rng).unwrap().clone();
                g.rng.gen_range(r)
            }
        };
        writeln!(text, "thread {start:#x}").unwrap();
        shape.threads += 1;
    }
    for _ in 0..g.rng.gen_range(0..4) {
        let step = g.rng.gen_range(0..200);
        let tid = g.rng.gen_range(0..=shape.threads);
        writeln!(text, "signal {step} {tid} {handler:#x}").unwrap();
        shape.signals += 1;
    }
    writeln!(text, "run 20000").unwrap();
    shape.jit = g.jit;
    (text, shape)
}
