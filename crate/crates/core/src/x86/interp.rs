//! Single-step interpreter for the subset.
//!
//! Memory, instruction fetch, control transfers and syscalls go through an
//! [`Env`], which sees every access before it is committed and may veto it.

use std::collections::BTreeMap;

use super::{decode, AluOp, Base, Cond, Form, Instr, Mem, Mnemonic, OpSize, Operand, Reg, Reg8, MAX_INSN_LEN};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash)]
pub struct Flags {
    pub cf: bool,
    pub zf: bool,
    pub sf: bool,
    pub of: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct MachineState {
    pub regs: [u64; 16],
    pub rip: u64,
    pub flags: Flags,
    pub pkru: u32,
}

impl MachineState {
    pub fn new(rip: u64) -> Self {
        MachineState { regs: [0; 16], rip, flags: Flags::default(), pkru: 0 }
    }

    pub fn reg(&self, r: Reg) -> u64 {
        self.regs[r as usize]
    }

    pub fn set_reg(&mut self, r: Reg, v: u64) {
        self.regs[r as usize] = v;
    }

    pub fn eax(&self) -> u32 {
        self.regs[0] as u32
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Access {
    Read,
    Write,
    Exec,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Fault {
    Undecodable { addr: u64 },
    Unmapped { addr: u64 },
    /// An env hook refused the access (PKRU, page permissions, policy).
    Denied { addr: u64, access: Access },
    /// WRPKRU with non-zero ecx or edx.
    WrpkruOperands { addr: u64 },
    Breakpoint { addr: u64 },
}

impl std::fmt::Display for Fault {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Fault::Undecodable { addr } => write!(f, "undecodable instruction at {addr:#x}"),
            Fault::Unmapped { addr } => write!(f, "unmapped address {addr:#x}"),
            Fault::Denied { addr, access } => write!(f, "{access:?} access to {addr:#x} denied"),
            Fault::WrpkruOperands { addr } => write!(f, "wrpkru at {addr:#x} with non-zero ecx or edx"),
            Fault::Breakpoint { addr } => write!(f, "breakpoint at {addr:#x}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum StepOutcome {
    Continue,
    Exit(i64),
    Fault(Fault),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SyscallAction {
    Continue,
    Exit(i64),
    Fault(Fault),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TransferKind {
    Jump,
    Branch,
    Call,
    Return,
}

/// Hooks through which the interpreter reaches the outside world.
pub trait Env {
    /// Copies up to `buf.len()` executable bytes starting at `addr` and
    /// returns how many were available.
    fn fetch(&mut self, state: &MachineState, addr: u64, buf: &mut [u8]) -> Result<usize, Fault>;
    fn load(&mut self, state: &MachineState, addr: u64, size: usize) -> Result<u64, Fault>;
    fn store(&mut self, state: &MachineState, addr: u64, size: usize, value: u64) -> Result<(), Fault>;
    /// Called before a taken control transfer commits.
    fn transfer(&mut self, _state: &MachineState, _from: u64, _to: u64, _kind: TransferKind) -> Result<(), Fault> {
        Ok(())
    }
    /// `state.rip` already points past the SYSCALL.
    fn syscall(&mut self, state: &mut MachineState) -> SyscallAction;
}

fn cond_holds(c: Cond, f: Flags) -> bool {
    match c {
        Cond::O => f.of,
        Cond::No => !f.of,
        Cond::B => f.cf,
        Cond::Ae => !f.cf,
        Cond::E => f.zf,
        Cond::Ne => !f.zf,
        Cond::Be => f.cf || f.zf,
        Cond::A => !f.cf && !f.zf,
        Cond::S => f.sf,
        Cond::Ns => !f.sf,
        Cond::L => f.sf != f.of,
        Cond::Ge => f.sf == f.of,
        Cond::Le => f.zf || f.sf != f.of,
        Cond::G => !f.zf && f.sf == f.of,
    }
}

pub fn effective_address(state: &MachineState, m: &Mem, next_rip: u64) -> u64 {
    let base = match m.base {
        Base::Reg(r) => state.reg(r),
        Base::Rip => next_rip,
        Base::None => 0,
    };
    let index = m.index.map(|r| state.reg(r).wrapping_mul(m.scale as u64)).unwrap_or(0);
    base.wrapping_add(index).wrapping_add(m.disp as i64 as u64)
}

/// Result and flags of an ALU operation at the given width.
pub fn alu(op: AluOp, size: OpSize, a: u64, b: u64) -> (u64, Flags) {
    let mask = size.mask();
    let sign = 1u64 << (size.bits() - 1);
    let (a, b) = (a & mask, b & mask);
    let (res, cf, of) = match op {
        AluOp::Add => {
            let r = a.wrapping_add(b) & mask;
            let cf = if size == OpSize::Qword { a.checked_add(b).is_none() } else { a + b > mask };
            (r, cf, (a ^ r) & (b ^ r) & sign != 0)
        }
        AluOp::Sub | AluOp::Cmp => {
            let r = a.wrapping_sub(b) & mask;
            (r, a < b, (a ^ b) & (a ^ r) & sign != 0)
        }
        AluOp::And => (a & b, false, false),
        AluOp::Or => (a | b, false, false),
        AluOp::Xor => (a ^ b, false, false),
    };
    (res, Flags { cf, of, zf: res == 0, sf: res & sign != 0 })
}

struct Exec<'a, E: Env> {
    state: &'a mut MachineState,
    env: &'a mut E,
    next: u64,
}

impl<'a, E: Env> Exec<'a, E> {
    fn read(&mut self, op: &Operand, size: OpSize) -> Result<u64, Fault> {
        Ok(match op {
            Operand::Reg(r) => self.state.reg(*r) & size.mask(),
            Operand::Reg8(Reg8::Low(r)) => self.state.reg(*r) & 0xFF,
            Operand::Reg8(Reg8::High(r)) => (self.state.reg(*r) >> 8) & 0xFF,
            Operand::Imm(v) => *v as u64 & size.mask(),
            Operand::Rel(v) => *v as i64 as u64,
            Operand::Mem(m) => {
                let addr = effective_address(self.state, m, self.next);
                self.env.load(self.state, addr, size.bytes())? & size.mask()
            }
        })
    }

    fn write(&mut self, op: &Operand, size: OpSize, v: u64) -> Result<(), Fault> {
        match op {
            Operand::Reg(r) => {
                let old = self.state.reg(*r);
                let new = match size {
                    OpSize::Qword => v,
                    OpSize::Dword => v & 0xFFFF_FFFF,
                    s => (old & !s.mask()) | (v & s.mask()),
                };
                self.state.set_reg(*r, new);
            }
            Operand::Reg8(Reg8::Low(r)) => {
                let old = self.state.reg(*r);
                self.state.set_reg(*r, (old & !0xFF) | (v & 0xFF));
            }
            Operand::Reg8(Reg8::High(r)) => {
                let old = self.state.reg(*r);
                self.state.set_reg(*r, (old & !0xFF00) | ((v & 0xFF) << 8));
            }
            Operand::Mem(m) => {
                let addr = effective_address(self.state, m, self.next);
                self.env.store(self.state, addr, size.bytes(), v & size.mask())?;
            }
            Operand::Imm(_) | Operand::Rel(_) => unreachable!("write to immediate"),
        }
        Ok(())
    }

    fn push(&mut self, v: u64) -> Result<(), Fault> {
        let sp = self.state.reg(Reg::Rsp).wrapping_sub(8);
        self.env.store(self.state, sp, 8, v)?;
        self.state.set_reg(Reg::Rsp, sp);
        Ok(())
    }

    fn jump(&mut self, to: u64, kind: TransferKind) -> Result<(), Fault> {
        self.env.transfer(self.state, self.state.rip, to, kind)?;
        self.next = to;
        Ok(())
    }

    fn run(&mut self, i: &Instr) -> Result<Option<i64>, Fault> {
        let pc = self.state.rip;
        match i.mnemonic {
            Mnemonic::Nop => {}
            Mnemonic::Int3 => return Err(Fault::Breakpoint { addr: pc }),
            Mnemonic::Mov => {
                let v = self.read(&i.operands[1], i.size)?;
                // C7 with REX.W sign-extends its imm32
                let v = if i.form == Form::RmImm && i.size == OpSize::Qword { i.operands[1].imm_value() } else { v };
                self.write(&i.operands[0], i.size, v)?;
            }
            Mnemonic::Alu(op) => {
                let a = self.read(&i.operands[0], i.size)?;
                let b = match i.operands[1] {
                    Operand::Imm(v) => v as u64 & i.size.mask(),
                    ref o => self.read(o, i.size)?,
                };
                let (r, f) = alu(op, i.size, a, b);
                if op != AluOp::Cmp {
                    self.write(&i.operands[0], i.size, r)?;
                }
                self.state.flags = f;
            }
            Mnemonic::Bt => {
                let bits = i.size.bits() as u64;
                let (val, bit) = match (&i.operands[0], &i.operands[1]) {
                    (dst, Operand::Imm(v)) => (self.read(dst, i.size)?, (*v as u64) % bits),
                    (Operand::Mem(m), Operand::Reg(r)) => {
                        // bit string addressing: offset may leave the operand
                        let off = match i.size {
                            OpSize::Qword => self.state.reg(*r) as i64,
                            _ => self.state.reg(*r) as u32 as i32 as i64,
                        };
                        let words = off.div_euclid(bits as i64);
                        let addr = effective_address(self.state, m, self.next)
                            .wrapping_add((words * i.size.bytes() as i64) as u64);
                        let v = self.env.load(self.state, addr, i.size.bytes())?;
                        (v, off.rem_euclid(bits as i64) as u64)
                    }
                    (dst, src) => {
                        let b = self.read(src, i.size)? % bits;
                        (self.read(dst, i.size)?, b)
                    }
                };
                self.state.flags.cf = (val >> bit) & 1 == 1;
            }
            Mnemonic::Push => {
                let v = self.read(&i.operands[0], OpSize::Qword)?;
                self.push(v)?;
            }
            Mnemonic::Pop => {
                let sp = self.state.reg(Reg::Rsp);
                let v = self.env.load(self.state, sp, 8)?;
                self.state.set_reg(Reg::Rsp, sp.wrapping_add(8));
                self.write(&i.operands[0], OpSize::Qword, v)?;
            }
            Mnemonic::Jmp => {
                let to = match &i.operands[0] {
                    Operand::Rel(r) => self.next.wrapping_add(*r as i64 as u64),
                    o => self.read(o, OpSize::Qword)?,
                };
                self.jump(to, TransferKind::Jump)?;
            }
            Mnemonic::Jcc(c) => {
                if cond_holds(c, self.state.flags) {
                    let to = self.next.wrapping_add(i.rel().unwrap_or(0) as i64 as u64);
                    self.jump(to, TransferKind::Branch)?;
                }
            }
            Mnemonic::Call => {
                let to = match &i.operands[0] {
                    Operand::Rel(r) => self.next.wrapping_add(*r as i64 as u64),
                    o => self.read(o, OpSize::Qword)?,
                };
                let ret = self.next;
                self.env.transfer(self.state, pc, to, TransferKind::Call)?;
                self.push(ret)?;
                self.next = to;
            }
            Mnemonic::Ret => {
                let sp = self.state.reg(Reg::Rsp);
                let to = self.env.load(self.state, sp, 8)?;
                self.env.transfer(self.state, pc, to, TransferKind::Return)?;
                self.state.set_reg(Reg::Rsp, sp.wrapping_add(8));
                self.next = to;
            }
            Mnemonic::Syscall => {
                self.state.rip = self.next;
                match self.env.syscall(self.state) {
                    SyscallAction::Continue => {
                        self.next = self.state.rip;
                    }
                    SyscallAction::Exit(code) => return Ok(Some(code)),
                    SyscallAction::Fault(f) => {
                        self.state.rip = pc;
                        return Err(f);
                    }
                }
            }
            Mnemonic::Wrpkru => {
                let ecx = self.state.reg(Reg::Rcx) as u32;
                let edx = self.state.reg(Reg::Rdx) as u32;
                if ecx != 0 || edx != 0 {
                    return Err(Fault::WrpkruOperands { addr: pc });
                }
                self.state.pkru = self.state.eax();
            }
            Mnemonic::Xrstor => {
                // only the PKRU component is modeled; it is requested by eax bit 9
                if self.state.eax() & (1 << 9) != 0 {
                    let m = *i.mem_operand().expect("xrstor has a memory operand");
                    let addr = effective_address(self.state, &m, self.next);
                    let v = self.env.load(self.state, addr, 4)?;
                    self.state.pkru = v as u32;
                }
            }
        }
        Ok(None)
    }
}

impl Operand {
    fn imm_value(&self) -> u64 {
        match self {
            Operand::Imm(v) => *v as u64,
            _ => 0,
        }
    }
}

/// Executes one instruction. On a fault the architectural state is left
/// as it was before the instruction.
pub fn step<E: Env>(state: &mut MachineState, env: &mut E) -> StepOutcome {
    let pc = state.rip;
    let mut buf = [0u8; MAX_INSN_LEN];
    let n = match env.fetch(state, pc, &mut buf) {
        Ok(0) => return StepOutcome::Fault(Fault::Unmapped { addr: pc }),
        Ok(n) => n,
        Err(f) => return StepOutcome::Fault(f),
    };
    let d = match decode(&buf[..n], 0) {
        Ok(d) => d,
        Err(super::DecodeError::Truncated { .. }) if n < MAX_INSN_LEN => {
            return StepOutcome::Fault(Fault::Denied { addr: pc + n as u64, access: Access::Exec })
        }
        Err(_) => return StepOutcome::Fault(Fault::Undecodable { addr: pc }),
    };
    let snapshot = state.clone();
    let mut ex = Exec { next: pc + d.len as u64, state, env };
    match ex.run(&d.instr) {
        Ok(Some(code)) => StepOutcome::Exit(code),
        Ok(None) => {
            let next = ex.next;
            ex.state.rip = next;
            StepOutcome::Continue
        }
        Err(f) => {
            *state = snapshot;
            StepOutcome::Fault(f)
        }
    }
}

/// Flat sparse memory with no permission model. Useful for differential
/// runs and unit tests. Syscalls: `exit` (60) stops, `write` (1) appends
/// to `output`, everything else is recorded and returns 0.
#[derive(Debug, Clone, Default)]
pub struct FlatMemory {
    pub bytes: BTreeMap<u64, u8>,
    /// Fetchable range.
    pub code: std::ops::Range<u64>,
    pub output: Vec<u8>,
    pub syscalls: Vec<(u64, [u64; 3])>,
}

impl FlatMemory {
    pub fn with_code(base: u64, code: &[u8]) -> Self {
        let mut m = FlatMemory { code: base..base + code.len() as u64, ..Default::default() };
        m.write_bytes(base, code);
        m
    }

    pub fn write_bytes(&mut self, addr: u64, data: &[u8]) {
        for (k, b) in data.iter().enumerate() {
            self.bytes.insert(addr + k as u64, *b);
        }
    }

    pub fn read_bytes(&self, addr: u64, len: usize) -> Option<Vec<u8>> {
        (0..len as u64).map(|k| self.bytes.get(&(addr + k)).copied()).collect()
    }
}

impl Env for FlatMemory {
    fn fetch(&mut self, _state: &MachineState, addr: u64, buf: &mut [u8]) -> Result<usize, Fault> {
        if !self.code.contains(&addr) {
            return Err(Fault::Denied { addr, access: Access::Exec });
        }
        let avail = ((self.code.end - addr) as usize).min(buf.len());
        for (k, slot) in buf.iter_mut().take(avail).enumerate() {
            *slot = self.bytes[&(addr + k as u64)];
        }
        Ok(avail)
    }

    fn load(&mut self, _state: &MachineState, addr: u64, size: usize) -> Result<u64, Fault> {
        let mut v = 0u64;
        for k in 0..size as u64 {
            let b = *self.bytes.get(&addr.wrapping_add(k)).ok_or(Fault::Unmapped { addr: addr.wrapping_add(k) })?;
            v |= (b as u64) << (8 * k);
        }
        Ok(v)
    }

    fn store(&mut self, _state: &MachineState, addr: u64, size: usize, value: u64) -> Result<(), Fault> {
        for k in 0..size as u64 {
            let a = addr.wrapping_add(k);
            if !self.bytes.contains_key(&a) {
                return Err(Fault::Unmapped { addr: a });
            }
        }
        for k in 0..size as u64 {
            self.bytes.insert(addr.wrapping_add(k), (value >> (8 * k)) as u8);
        }
        Ok(())
    }

    fn syscall(&mut self, state: &mut MachineState) -> SyscallAction {
        let nr = state.reg(Reg::Rax);
        let args = [state.reg(Reg::Rdi), state.reg(Reg::Rsi), state.reg(Reg::Rdx)];
        self.syscalls.push((nr, args));
        match nr {
            60 => SyscallAction::Exit(args[0] as i64),
            1 => match self.read_bytes(args[1], args[2] as usize) {
                Some(data) => {
                    self.output.extend_from_slice(&data);
                    state.set_reg(Reg::Rax, args[2]);
                    SyscallAction::Continue
                }
                None => SyscallAction::Fault(Fault::Unmapped { addr: args[1] }),
            },
            _ => {
                state.set_reg(Reg::Rax, 0);
                SyscallAction::Continue
            }
        }
    }
}
