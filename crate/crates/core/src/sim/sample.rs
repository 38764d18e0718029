//! A small two-component program protected with the call gate, used by
//! tests, the attack sweep and the CLI.

use super::machine::{pool_base, Perms, SimImage, SimSegment, SYS_EXIT, SYS_WRITE};
use crate::inspector::{PKRU_ALLOW, PKRU_DISALLOW};
use crate::rewriter::{emit_call_gate, GateKind};
use crate::x86::{AluOp, Base, DispSize, Instr, Mem, OpSize, Operand, Reg};

pub const U_CODE: u64 = 0x40_0000;
pub const U_DATA: u64 = 0x40_1000;
pub const T_CODE: u64 = 0x50_0000;
/// Offset in U data that receives the value returned by T.
pub const RESULT_OFFSET: u64 = 0x10;
/// Offset in U data of the save area passed to XRSTOR.
pub const XSAVE_OFFSET: u64 = 0x100;
pub const MESSAGE: &[u8] = b"ok\n";

/// Addresses of interesting points inside [`protected_image`].
#[derive(Debug, Clone)]
pub struct Sample {
    pub image: SimImage,
    /// Enter gate; U calls here.
    pub gate: u64,
    /// Registered entry right after the enter-gate WRPKRU.
    pub entry: u64,
    /// WRPKRU of the exit gate.
    pub exit_wrpkru: u64,
    /// SYSCALL of the exit stub following the exit gate.
    pub exit_stub_syscall: u64,
    /// U function doing XRSTOR behind its guard.
    pub xrstor_fn: u64,
    /// MT counter updated by T.
    pub counter: u64,
}

fn abs(addr: u64) -> Mem {
    Mem { base: Base::None, index: None, scale: 1, disp: addr as i32, disp_size: DispSize::D32, sib: true }
}

fn enc(code: &mut Vec<u8>, instrs: &[Instr]) {
    for i in instrs {
        code.extend(i.encode().expect("sample instruction"));
    }
}

/// Builds the sample. U's main passes 5 to T, which adds it to a counter
/// in MT and returns the sum. U then stores the sum, restores state with a
/// guarded XRSTOR, writes `ok\n` and exits with status 0.
pub fn protected_image() -> Sample {
    let counter = pool_base(1);

    let mut t = emit_call_gate(GateKind::Enter, PKRU_ALLOW, PKRU_DISALLOW);
    let entry = T_CODE + t.len() as u64;
    enc(
        &mut t,
        &[
            Instr::mov_load(OpSize::Qword, Reg::Rax, abs(counter)),
            Instr::alu_mr(AluOp::Add, OpSize::Qword, Operand::Reg(Reg::Rax), Reg::Rdi),
            Instr::mov_store(OpSize::Qword, abs(counter), Reg::Rax),
            Instr::mov_rr(OpSize::Qword, Reg::Rsi, Reg::Rax),
        ],
    );
    let exit_gate = emit_call_gate(GateKind::Exit, PKRU_ALLOW, PKRU_DISALLOW);
    let exit_wrpkru = T_CODE + t.len() as u64 + 9;
    let exit_stub_syscall = T_CODE + (t.len() + exit_gate.len()) as u64 - 2;
    t.extend(exit_gate);
    enc(&mut t, &[Instr::mov_rr(OpSize::Qword, Reg::Rax, Reg::Rsi), Instr::ret()]);

    let mut u = Vec::new();
    enc(&mut u, &[Instr::mov_ri32(Reg::Rdi, 5)]);
    let rel = T_CODE as i64 - (U_CODE + u.len() as u64 + 5) as i64;
    enc(&mut u, &[Instr::call_rel32(rel as i32)]);
    enc(
        &mut u,
        &[
            Instr::mov_store(OpSize::Qword, abs(U_DATA + RESULT_OFFSET), Reg::Rax),
            Instr::mov_ri32(Reg::Rdi, (U_DATA + XSAVE_OFFSET) as u32),
        ],
    );
    let call_at = u.len();
    u.extend([0; 5]);
    enc(
        &mut u,
        &[
            Instr::mov_ri32(Reg::Rax, SYS_WRITE as u32),
            Instr::mov_ri32(Reg::Rdi, 1),
            Instr::mov_ri32(Reg::Rsi, U_DATA as u32),
            Instr::mov_ri32(Reg::Rdx, MESSAGE.len() as u32),
            Instr::syscall(),
            Instr::mov_ri32(Reg::Rax, SYS_EXIT as u32),
            Instr::alu_mr(AluOp::Xor, OpSize::Dword, Operand::Reg(Reg::Rdi), Reg::Rdi),
            Instr::syscall(),
        ],
    );
    // xrstor_fn: restore with only the x87 component requested
    let xrstor_off = u.len();
    enc(
        &mut u,
        &[
            Instr::mov_ri32(Reg::Rax, 1),
            Instr::alu_mr(AluOp::Xor, OpSize::Dword, Operand::Reg(Reg::Rdx), Reg::Rdx),
            Instr::xrstor(Mem::base_disp(Reg::Rdi, 0)),
        ],
    );
    u.extend(emit_call_gate(GateKind::XrstorGuard, PKRU_ALLOW, PKRU_DISALLOW));
    enc(&mut u, &[Instr::ret()]);
    let rel = xrstor_off as i64 - (call_at + 5) as i64;
    u[call_at..call_at + 5].copy_from_slice(&Instr::call_rel32(rel as i32).encode().expect("call"));

    let mut data = vec![0u8; 0x200];
    data[..MESSAGE.len()].copy_from_slice(MESSAGE);

    let image = SimImage {
        segments: vec![
            SimSegment { addr: U_CODE, bytes: u, perms: Perms::RX, component: 0 },
            SimSegment { addr: U_DATA, bytes: data, perms: Perms::RW, component: 0 },
            SimSegment { addr: T_CODE, bytes: t, perms: Perms::RX, component: 1 },
        ],
        entries: vec![(1, entry)],
        main: (0, U_CODE),
    };
    Sample {
        image,
        gate: T_CODE,
        entry,
        exit_wrpkru,
        exit_stub_syscall,
        xrstor_fn: U_CODE + xrstor_off as u64,
        counter,
    }
}
