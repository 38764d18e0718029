use thiserror::Error;

use super::{Base, DispSize, Form, Instr, Mem, Mnemonic, OpSize, Operand, Reg, Reg8};

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum EncodeError {
    #[error("operand out of range for {0}")]
    OperandRange(String),
    #[error("operand combination not encodable: {0}")]
    Shape(String),
}

fn shape(i: &Instr) -> EncodeError {
    EncodeError::Shape(format!("{:?} {:?} {:?}", i.mnemonic, i.form, i.operands))
}

fn range(i: &Instr) -> EncodeError {
    EncodeError::OperandRange(i.to_string())
}

/// What a ModRM-bearing instruction puts in each field.
struct Layout<'a> {
    opcode: Vec<u8>,
    modrm: Option<(u8, &'a Operand)>,
    opreg: Option<u8>,
    imm: Option<(i64, usize)>,
    rel: Option<(i32, usize)>,
    /// REX.W must match `size == Qword`.
    w_matters: bool,
}

fn reg_num(op: &Operand) -> Option<u8> {
    match op {
        Operand::Reg(r) => Some(r.num()),
        Operand::Reg8(Reg8::Low(r)) => Some(r.num()),
        Operand::Reg8(Reg8::High(r)) => Some(r.num() + 4),
        _ => None,
    }
}

fn layout(i: &Instr) -> Result<Layout<'_>, EncodeError> {
    let ops = &i.operands;
    let mut l = Layout { opcode: vec![], modrm: None, opreg: None, imm: None, rel: None, w_matters: false };
    let is_rm = |o: &Operand| matches!(o, Operand::Reg(_) | Operand::Mem(_));
    let alu_size = |s: OpSize| matches!(s, OpSize::Dword | OpSize::Qword);
    match (i.mnemonic, i.form) {
        (Mnemonic::Nop, Form::Bare) => l.opcode = vec![0x90],
        (Mnemonic::Ret, Form::Bare) => l.opcode = vec![0xC3],
        (Mnemonic::Int3, Form::Bare) => l.opcode = vec![0xCC],
        (Mnemonic::Syscall, Form::Bare) => l.opcode = vec![0x0F, 0x05],
        (Mnemonic::Wrpkru, Form::Bare) => l.opcode = vec![0x0F, 0x01, 0xEF],
        (Mnemonic::Alu(op), form) => {
            if !alu_size(i.size) || ops.len() != 2 {
                return Err(shape(i));
            }
            l.w_matters = true;
            let row = op.ext() << 3;
            match (form, &ops[0], &ops[1]) {
                (Form::Mr, d, Operand::Reg(s)) if is_rm(d) => {
                    l.opcode = vec![row | 1];
                    l.modrm = Some((s.num(), d));
                }
                (Form::Rm, Operand::Reg(d), s) if is_rm(s) => {
                    l.opcode = vec![row | 3];
                    l.modrm = Some((d.num(), s));
                }
                (Form::AccImm, Operand::Reg(Reg::Rax), Operand::Imm(v)) => {
                    l.opcode = vec![row | 5];
                    l.imm = Some((*v, 4));
                }
                (Form::RmImm, d, Operand::Imm(v)) if is_rm(d) => {
                    l.opcode = vec![0x81];
                    l.modrm = Some((op.ext(), d));
                    l.imm = Some((*v, 4));
                }
                (Form::RmImm8, d, Operand::Imm(v)) if is_rm(d) => {
                    l.opcode = vec![0x83];
                    l.modrm = Some((op.ext(), d));
                    l.imm = Some((*v, 1));
                }
                _ => return Err(shape(i)),
            }
        }
        (Mnemonic::Mov, form) => {
            if ops.len() != 2 {
                return Err(shape(i));
            }
            match (form, &ops[0], &ops[1]) {
                (Form::Mr, d, Operand::Reg(s)) if is_rm(d) && alu_size(i.size) => {
                    l.w_matters = true;
                    l.opcode = vec![0x89];
                    l.modrm = Some((s.num(), d));
                }
                (Form::Rm, Operand::Reg(d), s) if is_rm(s) && alu_size(i.size) => {
                    l.w_matters = true;
                    l.opcode = vec![0x8B];
                    l.modrm = Some((d.num(), s));
                }
                (Form::OpRegImm, Operand::Reg8(r), Operand::Imm(v)) if i.size == OpSize::Byte => {
                    let n = reg_num(&Operand::Reg8(*r)).unwrap();
                    l.opcode = vec![0xB0 | (n & 7)];
                    l.opreg = Some(n);
                    l.imm = Some((*v, 1));
                }
                (Form::OpRegImm, Operand::Reg(r), Operand::Imm(v)) if i.size == OpSize::Dword => {
                    l.opcode = vec![0xB8 | r.low3()];
                    l.opreg = Some(r.num());
                    l.imm = Some((*v, 4));
                }
                (Form::OpRegImm, Operand::Reg(r), Operand::Imm(v)) if i.size == OpSize::Word => {
                    l.opcode = vec![0xB8 | r.low3()];
                    l.opreg = Some(r.num());
                    l.imm = Some((*v, 2));
                }
                (Form::RmImm, d, Operand::Imm(v)) if is_rm(d) && i.size != OpSize::Byte => {
                    l.w_matters = i.size != OpSize::Word;
                    l.opcode = vec![0xC7];
                    l.modrm = Some((0, d));
                    l.imm = Some((*v, if i.size == OpSize::Word { 2 } else { 4 }));
                }
                _ => return Err(shape(i)),
            }
        }
        (Mnemonic::Bt, form) => {
            if !alu_size(i.size) || ops.len() != 2 {
                return Err(shape(i));
            }
            l.w_matters = true;
            match (form, &ops[0], &ops[1]) {
                (Form::Mr, d, Operand::Reg(s)) if is_rm(d) => {
                    l.opcode = vec![0x0F, 0xA3];
                    l.modrm = Some((s.num(), d));
                }
                (Form::RmImm8, d, Operand::Imm(v)) if is_rm(d) => {
                    l.opcode = vec![0x0F, 0xBA];
                    l.modrm = Some((4, d));
                    l.imm = Some((*v, 1));
                }
                _ => return Err(shape(i)),
            }
        }
        (Mnemonic::Push | Mnemonic::Pop, Form::OpReg) => match ops.as_slice() {
            [Operand::Reg(r)] => {
                let base = if i.mnemonic == Mnemonic::Push { 0x50 } else { 0x58 };
                l.opcode = vec![base | r.low3()];
                l.opreg = Some(r.num());
            }
            _ => return Err(shape(i)),
        },
        (Mnemonic::Jmp | Mnemonic::Jcc(_) | Mnemonic::Call, Form::Rel8 | Form::Rel32) => {
            let rel = match ops.as_slice() {
                [Operand::Rel(r)] => *r,
                _ => return Err(shape(i)),
            };
            let short = i.form == Form::Rel8;
            l.opcode = match (i.mnemonic, short) {
                (Mnemonic::Jmp, true) => vec![0xEB],
                (Mnemonic::Jmp, false) => vec![0xE9],
                (Mnemonic::Call, false) => vec![0xE8],
                (Mnemonic::Jcc(c), true) => vec![0x70 | c.code()],
                (Mnemonic::Jcc(c), false) => vec![0x0F, 0x80 | c.code()],
                _ => return Err(shape(i)),
            };
            l.rel = Some((rel, if short { 1 } else { 4 }));
        }
        (Mnemonic::Call | Mnemonic::Jmp, Form::RmOnly) => match ops.as_slice() {
            [t] if is_rm(t) => {
                l.opcode = vec![0xFF];
                l.modrm = Some((if i.mnemonic == Mnemonic::Call { 2 } else { 4 }, t));
            }
            _ => return Err(shape(i)),
        },
        (Mnemonic::Xrstor, Form::RmOnly) => match ops.as_slice() {
            [t @ Operand::Mem(_)] => {
                l.opcode = vec![0x0F, 0xAE];
                l.modrm = Some((5, t));
            }
            _ => return Err(shape(i)),
        },
        _ => return Err(shape(i)),
    }
    Ok(l)
}

/// (required bits, meaningful mask, needs a REX byte at all)
fn rex_requirements(i: &Instr, l: &Layout) -> (u8, u8, bool, bool) {
    let mut req = 0u8;
    let mut mask = 0u8;
    let mut force = false;
    let mut forbid = false;
    if l.w_matters {
        mask |= 8;
        if i.size == OpSize::Qword {
            req |= 8;
        }
    }
    if let Some((reg_field, rm)) = l.modrm {
        // reg field carries a register only for /r forms
        if matches!(i.form, Form::Mr | Form::Rm) {
            mask |= 4;
            req |= ((reg_field >> 3) & 1) << 2;
        }
        match rm {
            Operand::Reg(r) => {
                mask |= 1;
                req |= r.ext();
            }
            Operand::Mem(m) => {
                if let Base::Reg(b) = m.base {
                    mask |= 1;
                    req |= b.ext();
                }
                if m.sib {
                    mask |= 2;
                    if let Some(x) = m.index {
                        req |= x.ext() << 1;
                    }
                }
            }
            _ => {}
        }
    }
    if let Some(n) = l.opreg {
        if let [Operand::Reg8(r8), ..] = i.operands.as_slice() {
            match r8 {
                Reg8::Low(r) => {
                    mask |= 1;
                    req |= r.ext();
                    if (4..8).contains(&r.num()) {
                        force = true;
                    }
                }
                Reg8::High(_) => forbid = true,
            }
        } else {
            mask |= 1;
            req |= (n >> 3) & 1;
        }
    }
    (req, mask, force || req != 0, forbid)
}

pub(crate) fn minimal_rex(i: &Instr) -> Option<u8> {
    let l = layout(i).ok()?;
    let (req, _, needed, _) = rex_requirements(i, &l);
    needed.then_some(0x40 | req)
}

fn encode_mem(out: &mut Vec<u8>, reg_field: u8, m: &Mem, i: &Instr) -> Result<(), EncodeError> {
    let reg3 = (reg_field & 7) << 3;
    if !matches!(m.scale, 1 | 2 | 4 | 8) || m.index == Some(Reg::Rsp) {
        return Err(range(i));
    }
    match m.base {
        Base::Rip => {
            if m.sib || m.index.is_some() || m.disp_size != DispSize::D32 {
                return Err(shape(i));
            }
            out.push(reg3 | 0b101);
            out.extend_from_slice(&m.disp.to_le_bytes());
            return Ok(());
        }
        Base::None => {
            if !m.sib || m.disp_size != DispSize::D32 {
                return Err(shape(i));
            }
        }
        Base::Reg(b) => {
            if !m.sib && (m.index.is_some() || b.low3() == 4) {
                return Err(shape(i));
            }
            if m.disp_size == DispSize::None && (b.low3() == 5 || m.disp != 0) {
                return Err(range(i));
            }
        }
    }
    let md = match (m.base, m.disp_size) {
        (Base::None, _) => 0,
        (_, DispSize::None) => 0,
        (_, DispSize::D8) => 1,
        (_, DispSize::D32) => 2,
    };
    if m.disp_size == DispSize::D8 && i8::try_from(m.disp).is_err() {
        return Err(range(i));
    }
    if m.sib {
        out.push((md << 6) | reg3 | 0b100);
        let scale_bits = m.scale.trailing_zeros() as u8;
        let idx = m.index.map(|r| r.low3()).unwrap_or(4);
        let base = match m.base {
            Base::Reg(b) => b.low3(),
            _ => 5,
        };
        out.push((scale_bits << 6) | (idx << 3) | base);
    } else {
        let Base::Reg(b) = m.base else { unreachable!() };
        out.push((md << 6) | reg3 | b.low3());
    }
    match m.disp_size {
        DispSize::None => {}
        DispSize::D8 => out.push(m.disp as i8 as u8),
        DispSize::D32 => out.extend_from_slice(&m.disp.to_le_bytes()),
    }
    Ok(())
}

fn imm_fits(v: i64, n: usize, sign_extended: bool) -> bool {
    let bits = n as u32 * 8;
    let lo_s = -(1i64 << (bits - 1));
    let hi_u = (1i64 << bits) - 1;
    if sign_extended {
        v >= lo_s && v <= hi_u
    } else {
        v >= 0 && v <= hi_u
    }
}

/// Encodes one instruction, honoring its recorded REX byte exactly.
pub fn encode(i: &Instr) -> Result<Vec<u8>, EncodeError> {
    let l = layout(i)?;
    let (req, mask, needed, forbid) = rex_requirements(i, &l);
    let mut out = Vec::with_capacity(8);

    if i.opsize_prefix != (i.size == OpSize::Word) {
        return Err(shape(i));
    }
    if i.opsize_prefix {
        out.push(0x66);
    }
    match i.rex {
        Some(b) => {
            if b & 0xF0 != 0x40 || forbid || (b & mask) != req {
                return Err(shape(i));
            }
            // only these opcodes accept a REX prefix in the subset
            if l.modrm.is_none() && l.opreg.is_none() && !l.w_matters {
                return Err(shape(i));
            }
            out.push(b);
        }
        None => {
            if needed {
                return Err(shape(i));
            }
        }
    }
    out.extend_from_slice(&l.opcode);
    if let Some((reg_field, rm)) = l.modrm {
        match rm {
            Operand::Reg(r) => out.push(0xC0 | ((reg_field & 7) << 3) | r.low3()),
            Operand::Mem(m) => encode_mem(&mut out, reg_field, m, i)?,
            _ => return Err(shape(i)),
        }
    }
    if let Some((v, n)) = l.imm {
        // B8+r and byte/word forms take unsigned immediates; the rest are sign-extended
        let signed = !matches!(i.form, Form::OpRegImm) && i.size != OpSize::Word;
        let ok = match n {
            4 if i.form == Form::OpRegImm => imm_fits(v, 4, false),
            4 => v >= i32::MIN as i64 && v <= i32::MAX as i64 || (i.size == OpSize::Dword && imm_fits(v, 4, false)),
            1 if i.mnemonic == Mnemonic::Bt || i.size == OpSize::Byte => imm_fits(v, 1, true),
            _ => imm_fits(v, n, signed),
        };
        if !ok {
            return Err(range(i));
        }
        out.extend_from_slice(&(v as u64).to_le_bytes()[..n]);
    }
    if let Some((r, n)) = l.rel {
        if n == 1 {
            let b = i8::try_from(r).map_err(|_| range(i))?;
            out.push(b as u8);
        } else {
            out.extend_from_slice(&r.to_le_bytes());
        }
    }
    Ok(out)
}
