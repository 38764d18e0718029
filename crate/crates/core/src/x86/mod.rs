//! A small x86-64 subset: enough to express call gates, inspection guards,
//! every rewrite output and the simulator's test programs.
//!
//! Supported instructions: MOV/ADD/OR/AND/SUB/XOR/CMP/BT in register,
//! immediate and memory forms, PUSH/POP, JMP/Jcc (rel8, rel32), CALL rel32,
//! CALL/JMP through a register or memory, RET, NOP, INT3, SYSCALL, WRPKRU
//! and the memory forms of XRSTOR. Everything else decodes to
//! [`DecodeError::NotInSubset`].
//!
//! 32-bit operations zero-extend into the full 64-bit register. 8- and
//! 16-bit moves (`B0+r`, `66 B8+r`, `66 C7`) leave the upper bits alone.

mod decode;
mod encode;
pub mod interp;

use std::fmt;
use std::ops::Range;

pub use decode::{decode, decode_all, DecodeError};
pub use encode::{encode, EncodeError};
pub use interp::{step, Access, Env, Fault, FlatMemory, Flags, MachineState, StepOutcome, SyscallAction, TransferKind};

#[cfg(test)]
mod tests;

/// Longest instruction the subset can produce.
pub const MAX_INSN_LEN: usize = 15;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(u8)]
pub enum Reg {
    Rax = 0,
    Rcx,
    Rdx,
    Rbx,
    Rsp,
    Rbp,
    Rsi,
    Rdi,
    R8,
    R9,
    R10,
    R11,
    R12,
    R13,
    R14,
    R15,
}

impl Reg {
    pub const ALL: [Reg; 16] = [
        Reg::Rax,
        Reg::Rcx,
        Reg::Rdx,
        Reg::Rbx,
        Reg::Rsp,
        Reg::Rbp,
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

    pub fn from_num(n: u8) -> Reg {
        Reg::ALL[(n & 0xF) as usize]
    }

    pub fn num(self) -> u8 {
        self as u8
    }

    pub(crate) fn low3(self) -> u8 {
        self as u8 & 7
    }

    pub(crate) fn ext(self) -> u8 {
        (self as u8 >> 3) & 1
    }

    pub fn name(self, size: OpSize) -> &'static str {
        const Q: [&str; 16] = [
            "rax", "rcx", "rdx", "rbx", "rsp", "rbp", "rsi", "rdi", "r8", "r9", "r10", "r11", "r12", "r13", "r14", "r15",
        ];
        const D: [&str; 16] = [
            "eax", "ecx", "edx", "ebx", "esp", "ebp", "esi", "edi", "r8d", "r9d", "r10d", "r11d", "r12d", "r13d", "r14d",
            "r15d",
        ];
        const W: [&str; 16] = [
            "ax", "cx", "dx", "bx", "sp", "bp", "si", "di", "r8w", "r9w", "r10w", "r11w", "r12w", "r13w", "r14w", "r15w",
        ];
        const B: [&str; 16] = [
            "al", "cl", "dl", "bl", "spl", "bpl", "sil", "dil", "r8b", "r9b", "r10b", "r11b", "r12b", "r13b", "r14b",
            "r15b",
        ];
        let i = self as usize;
        match size {
            OpSize::Byte => B[i],
            OpSize::Word => W[i],
            OpSize::Dword => D[i],
            OpSize::Qword => Q[i],
        }
    }
}

/// Byte register. `High` is only reachable for rax..rbx without a REX prefix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Reg8 {
    Low(Reg),
    High(Reg),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum OpSize {
    Byte,
    Word,
    Dword,
    Qword,
}

impl OpSize {
    pub fn bytes(self) -> usize {
        match self {
            OpSize::Byte => 1,
            OpSize::Word => 2,
            OpSize::Dword => 4,
            OpSize::Qword => 8,
        }
    }

    pub fn bits(self) -> u32 {
        self.bytes() as u32 * 8
    }

    pub fn mask(self) -> u64 {
        match self {
            OpSize::Qword => u64::MAX,
            s => (1u64 << s.bits()) - 1,
        }
    }
}

/// Condition codes. Parity conditions are outside the subset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Cond {
    O,
    No,
    B,
    Ae,
    E,
    Ne,
    Be,
    A,
    S,
    Ns,
    L,
    Ge,
    Le,
    G,
}

impl Cond {
    pub fn code(self) -> u8 {
        match self {
            Cond::O => 0x0,
            Cond::No => 0x1,
            Cond::B => 0x2,
            Cond::Ae => 0x3,
            Cond::E => 0x4,
            Cond::Ne => 0x5,
            Cond::Be => 0x6,
            Cond::A => 0x7,
            Cond::S => 0x8,
            Cond::Ns => 0x9,
            Cond::L => 0xC,
            Cond::Ge => 0xD,
            Cond::Le => 0xE,
            Cond::G => 0xF,
        }
    }

    pub fn from_code(c: u8) -> Option<Cond> {
        Some(match c {
            0x0 => Cond::O,
            0x1 => Cond::No,
            0x2 => Cond::B,
            0x3 => Cond::Ae,
            0x4 => Cond::E,
            0x5 => Cond::Ne,
            0x6 => Cond::Be,
            0x7 => Cond::A,
            0x8 => Cond::S,
            0x9 => Cond::Ns,
            0xC => Cond::L,
            0xD => Cond::Ge,
            0xE => Cond::Le,
            0xF => Cond::G,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Cond::O => "o",
            Cond::No => "no",
            Cond::B => "c",
            Cond::Ae => "nc",
            Cond::E => "e",
            Cond::Ne => "ne",
            Cond::Be => "be",
            Cond::A => "a",
            Cond::S => "s",
            Cond::Ns => "ns",
            Cond::L => "l",
            Cond::Ge => "ge",
            Cond::Le => "le",
            Cond::G => "g",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AluOp {
    Add,
    Or,
    And,
    Sub,
    Xor,
    Cmp,
}

impl AluOp {
    /// The `/n` extension and the `n*8` opcode row.
    pub fn ext(self) -> u8 {
        match self {
            AluOp::Add => 0,
            AluOp::Or => 1,
            AluOp::And => 4,
            AluOp::Sub => 5,
            AluOp::Xor => 6,
            AluOp::Cmp => 7,
        }
    }

    pub fn from_ext(n: u8) -> Option<AluOp> {
        Some(match n {
            0 => AluOp::Add,
            1 => AluOp::Or,
            4 => AluOp::And,
            5 => AluOp::Sub,
            6 => AluOp::Xor,
            7 => AluOp::Cmp,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Mnemonic {
    Mov,
    Alu(AluOp),
    Bt,
    Push,
    Pop,
    Jmp,
    Jcc(Cond),
    Call,
    Ret,
    Nop,
    Int3,
    Syscall,
    Wrpkru,
    Xrstor,
}

impl Mnemonic {
    pub fn name(self) -> String {
        match self {
            Mnemonic::Mov => "mov".into(),
            Mnemonic::Alu(op) => format!("{op:?}").to_lowercase(),
            Mnemonic::Bt => "bt".into(),
            Mnemonic::Push => "push".into(),
            Mnemonic::Pop => "pop".into(),
            Mnemonic::Jmp => "jmp".into(),
            Mnemonic::Jcc(c) => format!("j{}", c.name()),
            Mnemonic::Call => "call".into(),
            Mnemonic::Ret => "ret".into(),
            Mnemonic::Nop => "nop".into(),
            Mnemonic::Int3 => "int3".into(),
            Mnemonic::Syscall => "syscall".into(),
            Mnemonic::Wrpkru => "wrpkru".into(),
            Mnemonic::Xrstor => "xrstor".into(),
        }
    }

    pub fn is_branch(self) -> bool {
        matches!(self, Mnemonic::Jmp | Mnemonic::Jcc(_) | Mnemonic::Call)
    }
}

/// Opcode shape, which together with the operands fixes the encoding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Form {
    /// No explicit operands.
    Bare,
    /// `op r/m, reg` (ModRM.rm is the destination).
    Mr,
    /// `op reg, r/m`.
    Rm,
    /// Short accumulator form, `05 id` and friends.
    AccImm,
    /// `81 /n id`, `C7 /0 id` (iw under 0x66).
    RmImm,
    /// `83 /n ib`, `0F BA /4 ib`.
    RmImm8,
    /// Register in the low opcode bits: `50+r`, `58+r`.
    OpReg,
    /// Register in the opcode plus immediate: `B0+r ib`, `B8+r id`, `66 B8+r iw`.
    OpRegImm,
    Rel8,
    Rel32,
    /// ModRM operand only: `FF /2`, `FF /4`, `0F AE /5`.
    RmOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Base {
    Reg(Reg),
    Rip,
    /// SIB with base=101 and mod=00: absolute disp32 (plus index).
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DispSize {
    None,
    D8,
    D32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Mem {
    pub base: Base,
    pub index: Option<Reg>,
    /// 1, 2, 4 or 8. Kept even without an index so odd SIB bytes round-trip.
    pub scale: u8,
    pub disp: i32,
    pub disp_size: DispSize,
    /// A SIB byte is present in the encoding.
    pub sib: bool,
}

impl Mem {
    /// `[base + disp]` with the shortest legal encoding.
    pub fn base_disp(base: Reg, disp: i32) -> Mem {
        let mut m = Mem { base: Base::Reg(base), index: None, scale: 1, disp, disp_size: DispSize::D32, sib: false };
        m.canonicalize();
        m
    }

    pub fn base_index(base: Reg, index: Reg, scale: u8, disp: i32) -> Mem {
        let mut m = Mem { base: Base::Reg(base), index: Some(index), scale, disp, disp_size: DispSize::D32, sib: true };
        m.canonicalize();
        m
    }

    pub fn rip(disp: i32) -> Mem {
        Mem { base: Base::Rip, index: None, scale: 1, disp, disp_size: DispSize::D32, sib: false }
    }

    /// Picks the shortest displacement and only uses SIB when required.
    pub fn canonicalize(&mut self) {
        match self.base {
            Base::Rip => {
                self.disp_size = DispSize::D32;
                self.sib = false;
                self.index = None;
            }
            Base::None => {
                self.disp_size = DispSize::D32;
                self.sib = true;
            }
            Base::Reg(b) => {
                self.sib = self.index.is_some() || b.low3() == 4;
                self.disp_size = if self.disp == 0 && b.low3() != 5 {
                    DispSize::None
                } else if i8::try_from(self.disp).is_ok() {
                    DispSize::D8
                } else {
                    DispSize::D32
                };
            }
        }
        if self.index.is_none() {
            self.scale = 1;
        }
    }

    pub fn uses(&self) -> impl Iterator<Item = Reg> {
        let base = match self.base {
            Base::Reg(r) => Some(r),
            _ => None,
        };
        base.into_iter().chain(self.index)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Operand {
    Reg(Reg),
    Reg8(Reg8),
    /// Sign-extended to the operation size (or zero-extended for byte/word moves).
    Imm(i64),
    Mem(Mem),
    /// Branch displacement relative to the end of the instruction.
    Rel(i32),
}

impl Operand {
    pub fn mem(&self) -> Option<&Mem> {
        match self {
            Operand::Mem(m) => Some(m),
            _ => None,
        }
    }
}

/// An instruction in the subset, operands in Intel order (destination first).
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Instr {
    pub mnemonic: Mnemonic,
    pub size: OpSize,
    pub form: Form,
    pub operands: Vec<Operand>,
    /// Exact REX byte. `None` means no prefix.
    pub rex: Option<u8>,
    pub opsize_prefix: bool,
}

/// Byte ranges of each field inside one encoded instruction. Prefixes are
/// counted as part of the opcode field.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct FieldExtents {
    pub opcode: Range<usize>,
    pub modrm: Option<Range<usize>>,
    pub sib: Option<Range<usize>>,
    /// Memory displacement, or the branch displacement of a relative jump.
    pub disp: Option<Range<usize>>,
    pub imm: Option<Range<usize>>,
    /// Where the opcode proper starts (after prefixes).
    pub opcode_start: usize,
}

impl FieldExtents {
    pub fn fields(&self) -> impl Iterator<Item = (FieldKind, Range<usize>)> + '_ {
        std::iter::once((FieldKind::Opcode, self.opcode.clone()))
            .chain(self.modrm.clone().map(|r| (FieldKind::ModRm, r)))
            .chain(self.sib.clone().map(|r| (FieldKind::Sib, r)))
            .chain(self.disp.clone().map(|r| (FieldKind::Disp, r)))
            .chain(self.imm.clone().map(|r| (FieldKind::Imm, r)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FieldKind {
    Opcode,
    ModRm,
    Sib,
    Disp,
    Imm,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DecodedInstr {
    pub instr: Instr,
    pub len: usize,
    pub extents: FieldExtents,
}

impl std::ops::Deref for DecodedInstr {
    type Target = Instr;
    fn deref(&self) -> &Instr {
        &self.instr
    }
}

impl Instr {
    /// Builds an instruction and attaches the minimal REX prefix it needs.
    pub fn new(mnemonic: Mnemonic, size: OpSize, form: Form, operands: Vec<Operand>) -> Instr {
        let mut i = Instr { mnemonic, size, form, operands, rex: None, opsize_prefix: size == OpSize::Word };
        i.rex = encode::minimal_rex(&i);
        i
    }

    pub fn bare(m: Mnemonic) -> Instr {
        Instr::new(m, OpSize::Qword, Form::Bare, vec![])
    }

    pub fn nop() -> Instr {
        Instr::bare(Mnemonic::Nop)
    }

    pub fn wrpkru() -> Instr {
        Instr::bare(Mnemonic::Wrpkru)
    }

    pub fn syscall() -> Instr {
        Instr::bare(Mnemonic::Syscall)
    }

    pub fn ret() -> Instr {
        Instr::bare(Mnemonic::Ret)
    }

    pub fn int3() -> Instr {
        Instr::bare(Mnemonic::Int3)
    }

    pub fn push(r: Reg) -> Instr {
        Instr::new(Mnemonic::Push, OpSize::Qword, Form::OpReg, vec![Operand::Reg(r)])
    }

    pub fn pop(r: Reg) -> Instr {
        Instr::new(Mnemonic::Pop, OpSize::Qword, Form::OpReg, vec![Operand::Reg(r)])
    }

    /// `mov dst, src` between registers (`89 /r`).
    pub fn mov_rr(size: OpSize, dst: Reg, src: Reg) -> Instr {
        Instr::new(Mnemonic::Mov, size, Form::Mr, vec![Operand::Reg(dst), Operand::Reg(src)])
    }

    /// `mov r32, imm32` (`B8+r`).
    pub fn mov_ri32(dst: Reg, imm: u32) -> Instr {
        Instr::new(Mnemonic::Mov, OpSize::Dword, Form::OpRegImm, vec![Operand::Reg(dst), Operand::Imm(imm as i64)])
    }

    /// `mov r16, imm16` (`66 B8+r`).
    pub fn mov_ri16(dst: Reg, imm: u16) -> Instr {
        Instr::new(Mnemonic::Mov, OpSize::Word, Form::OpRegImm, vec![Operand::Reg(dst), Operand::Imm(imm as i64)])
    }

    pub fn mov_ri8(dst: Reg8, imm: u8) -> Instr {
        Instr::new(Mnemonic::Mov, OpSize::Byte, Form::OpRegImm, vec![Operand::Reg8(dst), Operand::Imm(imm as i64)])
    }

    /// `mov r/m, imm` through `C7 /0` (sign-extended imm32, or imm16 for words).
    pub fn mov_mi(size: OpSize, dst: Operand, imm: i64) -> Instr {
        Instr::new(Mnemonic::Mov, size, Form::RmImm, vec![dst, Operand::Imm(imm)])
    }

    pub fn mov_load(size: OpSize, dst: Reg, src: Mem) -> Instr {
        Instr::new(Mnemonic::Mov, size, Form::Rm, vec![Operand::Reg(dst), Operand::Mem(src)])
    }

    pub fn mov_store(size: OpSize, dst: Mem, src: Reg) -> Instr {
        Instr::new(Mnemonic::Mov, size, Form::Mr, vec![Operand::Mem(dst), Operand::Reg(src)])
    }

    /// `op r/m, reg` (`01 /r` family).
    pub fn alu_mr(op: AluOp, size: OpSize, dst: Operand, src: Reg) -> Instr {
        Instr::new(Mnemonic::Alu(op), size, Form::Mr, vec![dst, Operand::Reg(src)])
    }

    pub fn alu_rm(op: AluOp, size: OpSize, dst: Reg, src: Operand) -> Instr {
        Instr::new(Mnemonic::Alu(op), size, Form::Rm, vec![Operand::Reg(dst), src])
    }

    /// `op r/m, imm32` (`81 /n id`).
    pub fn alu_mi(op: AluOp, size: OpSize, dst: Operand, imm: i32) -> Instr {
        Instr::new(Mnemonic::Alu(op), size, Form::RmImm, vec![dst, Operand::Imm(imm as i64)])
    }

    /// `op r/m, imm8` (`83 /n ib`).
    pub fn alu_mi8(op: AluOp, size: OpSize, dst: Operand, imm: i8) -> Instr {
        Instr::new(Mnemonic::Alu(op), size, Form::RmImm8, vec![dst, Operand::Imm(imm as i64)])
    }

    /// `op eax, imm32` short form (`05 id` family).
    pub fn alu_acc(op: AluOp, size: OpSize, imm: i32) -> Instr {
        Instr::new(Mnemonic::Alu(op), size, Form::AccImm, vec![Operand::Reg(Reg::Rax), Operand::Imm(imm as i64)])
    }

    pub fn bt_imm(size: OpSize, dst: Operand, bit: u8) -> Instr {
        Instr::new(Mnemonic::Bt, size, Form::RmImm8, vec![dst, Operand::Imm(bit as i64)])
    }

    pub fn bt_reg(size: OpSize, dst: Operand, bit: Reg) -> Instr {
        Instr::new(Mnemonic::Bt, size, Form::Mr, vec![dst, Operand::Reg(bit)])
    }

    pub fn jmp_rel8(rel: i8) -> Instr {
        Instr::new(Mnemonic::Jmp, OpSize::Qword, Form::Rel8, vec![Operand::Rel(rel as i32)])
    }

    pub fn jmp_rel32(rel: i32) -> Instr {
        Instr::new(Mnemonic::Jmp, OpSize::Qword, Form::Rel32, vec![Operand::Rel(rel)])
    }

    pub fn jcc_rel8(c: Cond, rel: i8) -> Instr {
        Instr::new(Mnemonic::Jcc(c), OpSize::Qword, Form::Rel8, vec![Operand::Rel(rel as i32)])
    }

    pub fn jcc_rel32(c: Cond, rel: i32) -> Instr {
        Instr::new(Mnemonic::Jcc(c), OpSize::Qword, Form::Rel32, vec![Operand::Rel(rel)])
    }

    pub fn call_rel32(rel: i32) -> Instr {
        Instr::new(Mnemonic::Call, OpSize::Qword, Form::Rel32, vec![Operand::Rel(rel)])
    }

    pub fn call_rm(target: Operand) -> Instr {
        Instr::new(Mnemonic::Call, OpSize::Qword, Form::RmOnly, vec![target])
    }

    pub fn jmp_rm(target: Operand) -> Instr {
        Instr::new(Mnemonic::Jmp, OpSize::Qword, Form::RmOnly, vec![target])
    }

    pub fn xrstor(area: Mem) -> Instr {
        Instr::new(Mnemonic::Xrstor, OpSize::Qword, Form::RmOnly, vec![Operand::Mem(area)])
    }

    pub fn encode(&self) -> Result<Vec<u8>, EncodeError> {
        encode(self)
    }

    /// Encoded length; the subset's lengths never depend on operand values
    /// beyond the chosen form.
    pub fn len(&self) -> usize {
        encode(self).map(|b| b.len()).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn mem_operand(&self) -> Option<&Mem> {
        self.operands.iter().find_map(Operand::mem)
    }

    pub fn mem_operand_mut(&mut self) -> Option<&mut Mem> {
        self.operands.iter_mut().find_map(|o| match o {
            Operand::Mem(m) => Some(m),
            _ => None,
        })
    }

    pub fn imm(&self) -> Option<i64> {
        self.operands.iter().find_map(|o| match o {
            Operand::Imm(v) => Some(*v),
            _ => None,
        })
    }

    pub fn set_imm(&mut self, value: i64) {
        for o in &mut self.operands {
            if let Operand::Imm(v) = o {
                *v = value;
            }
        }
    }

    pub fn rel(&self) -> Option<i32> {
        self.operands.iter().find_map(|o| match o {
            Operand::Rel(v) => Some(*v),
            _ => None,
        })
    }

    pub fn set_rel(&mut self, value: i32) {
        for o in &mut self.operands {
            if let Operand::Rel(v) = o {
                *v = value;
            }
        }
    }

    /// Target of a relative branch located at `addr`.
    pub fn branch_target(&self, addr: u64, len: usize) -> Option<u64> {
        self.rel().map(|r| (addr + len as u64).wrapping_add(r as i64 as u64))
    }

    /// Absolute address referenced through a RIP-relative operand.
    pub fn rip_target(&self, addr: u64, len: usize) -> Option<u64> {
        self.mem_operand()
            .filter(|m| m.base == Base::Rip)
            .map(|m| (addr + len as u64).wrapping_add(m.disp as i64 as u64))
    }

    pub fn is_rip_relative(&self) -> bool {
        self.mem_operand().is_some_and(|m| m.base == Base::Rip)
    }

    /// Stops linear fall-through.
    pub fn ends_block(&self) -> bool {
        matches!(self.mnemonic, Mnemonic::Jmp | Mnemonic::Ret)
    }

    /// Every general register the instruction reads or writes, explicit or
    /// implicit.
    pub fn regs_used(&self) -> Vec<Reg> {
        let mut v = Vec::new();
        for op in &self.operands {
            match op {
                Operand::Reg(r) => v.push(*r),
                Operand::Reg8(Reg8::Low(r)) | Operand::Reg8(Reg8::High(r)) => v.push(*r),
                Operand::Mem(m) => v.extend(m.uses()),
                _ => {}
            }
        }
        match self.mnemonic {
            Mnemonic::Push | Mnemonic::Pop | Mnemonic::Call | Mnemonic::Ret => v.push(Reg::Rsp),
            Mnemonic::Syscall => v.extend([Reg::Rax, Reg::Rdi, Reg::Rsi, Reg::Rdx, Reg::R10, Reg::Rcx, Reg::R11]),
            Mnemonic::Wrpkru => v.extend([Reg::Rax, Reg::Rcx, Reg::Rdx]),
            Mnemonic::Xrstor => v.extend([Reg::Rax, Reg::Rdx]),
            _ => {}
        }
        v.sort();
        v.dedup();
        v
    }
}

fn fmt_mem(f: &mut fmt::Formatter<'_>, m: &Mem) -> fmt::Result {
    write!(f, "[")?;
    let mut first = true;
    match m.base {
        Base::Reg(r) => {
            write!(f, "{}", r.name(OpSize::Qword))?;
            first = false;
        }
        Base::Rip => {
            write!(f, "rip")?;
            first = false;
        }
        Base::None => {}
    }
    if let Some(i) = m.index {
        if !first {
            write!(f, " + ")?;
        }
        write!(f, "{}*{}", i.name(OpSize::Qword), m.scale)?;
        first = false;
    }
    if m.disp != 0 || first {
        if first {
            write!(f, "{:#x}", m.disp)?;
        } else if m.disp < 0 {
            write!(f, " - {:#x}", -(m.disp as i64))?;
        } else {
            write!(f, " + {:#x}", m.disp)?;
        }
    }
    write!(f, "]")
}

impl fmt::Display for Instr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.mnemonic.name())?;
        for (i, op) in self.operands.iter().enumerate() {
            write!(f, "{}", if i == 0 { " " } else { ", " })?;
            match op {
                Operand::Reg(r) => write!(f, "{}", r.name(self.size))?,
                Operand::Reg8(Reg8::Low(r)) => write!(f, "{}", r.name(OpSize::Byte))?,
                Operand::Reg8(Reg8::High(r)) => write!(f, "{}h", &r.name(OpSize::Word)[..1])?,
                Operand::Imm(v) => write!(f, "{v:#x}")?,
                Operand::Rel(v) => write!(f, "rel {v:+}")?,
                Operand::Mem(m) => fmt_mem(f, m)?,
            }
        }
        Ok(())
    }
}
