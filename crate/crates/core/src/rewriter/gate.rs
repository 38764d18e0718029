use crate::bytescan::WRPKRU_BYTES;
use crate::inspector::{safe_b_template, xrstor_guard};
use crate::x86::{AluOp, Instr, OpSize, Operand, Reg};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GateKind {
    Enter,
    Exit,
    XrstorGuard,
}

fn switch_to(value: u32) -> Vec<u8> {
    let mut v = Vec::new();
    for i in [
        Instr::alu_mr(AluOp::Xor, OpSize::Dword, Operand::Reg(Reg::Rcx), Reg::Rcx),
        Instr::alu_mr(AluOp::Xor, OpSize::Dword, Operand::Reg(Reg::Rdx), Reg::Rdx),
        Instr::mov_ri32(Reg::Rax, value),
    ] {
        v.extend(i.encode().expect("gate instruction"));
    }
    v.extend_from_slice(&WRPKRU_BYTES);
    v
}

/// Call gate halves and the XRSTOR guard.
///
/// The enter gate is only safe once the address right after it is a
/// registered entry point. The exit gate checks that PKRU really holds
/// `disallow` and exits otherwise.
pub fn emit_call_gate(kind: GateKind, allow: u32, disallow: u32) -> Vec<u8> {
    match kind {
        GateKind::Enter => switch_to(allow),
        GateKind::Exit => {
            let mut v = switch_to(disallow);
            v.extend(safe_b_template(disallow));
            v
        }
        GateKind::XrstorGuard => xrstor_guard(),
    }
}
