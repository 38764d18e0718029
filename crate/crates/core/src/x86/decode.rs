use thiserror::Error;

use super::{
    AluOp, Base, Cond, DecodedInstr, DispSize, FieldExtents, Form, Instr, Mem, Mnemonic, OpSize, Operand, Reg, Reg8,
};

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum DecodeError {
    /// `offset` is the first byte that could not be decoded, relative to
    /// the start of the input slice.
    #[error("byte {byte:#04x} at offset {offset:#x} is outside the supported subset")]
    NotInSubset { offset: usize, byte: u8 },
    #[error("instruction at offset {offset:#x} runs past the end of the input")]
    Truncated { offset: usize },
}

struct Cursor<'a> {
    bytes: &'a [u8],
    start: usize,
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn peek(&self) -> Result<u8, DecodeError> {
        self.bytes.get(self.pos).copied().ok_or(DecodeError::Truncated { offset: self.start })
    }

    fn byte(&mut self) -> Result<u8, DecodeError> {
        let b = self.peek()?;
        self.pos += 1;
        Ok(b)
    }

    fn take<const N: usize>(&mut self) -> Result<[u8; N], DecodeError> {
        let end = self.pos + N;
        let slice = self.bytes.get(self.pos..end).ok_or(DecodeError::Truncated { offset: self.start })?;
        self.pos = end;
        Ok(slice.try_into().unwrap())
    }

    fn bad_at(&self, pos: usize) -> DecodeError {
        DecodeError::NotInSubset { offset: pos, byte: self.bytes[pos] }
    }

    fn rel(&self) -> usize {
        self.pos - self.start
    }
}

#[derive(Clone, Copy, Default)]
struct Rex {
    w: bool,
    r: u8,
    x: u8,
    b: u8,
    present: bool,
}

struct ModRm {
    reg: u8,
    rm: Operand,
}

fn decode_modrm(c: &mut Cursor, rex: Rex, ext: &mut FieldExtents, rm_is_byte: bool) -> Result<ModRm, DecodeError> {
    let at = c.rel();
    let m = c.byte()?;
    ext.modrm = Some(at..at + 1);
    let md = m >> 6;
    let reg = ((m >> 3) & 7) | (rex.r << 3);
    let rm = m & 7;
    if md == 3 {
        let r = Reg::from_num(rm | (rex.b << 3));
        let op = if rm_is_byte { Operand::Reg8(Reg8::Low(r)) } else { Operand::Reg(r) };
        return Ok(ModRm { reg, rm: op });
    }
    let mut mem = Mem { base: Base::Rip, index: None, scale: 1, disp: 0, disp_size: DispSize::None, sib: false };
    let mut disp_size = match md {
        0 => DispSize::None,
        1 => DispSize::D8,
        _ => DispSize::D32,
    };
    if rm == 4 {
        let at = c.rel();
        let s = c.byte()?;
        ext.sib = Some(at..at + 1);
        mem.sib = true;
        mem.scale = 1 << (s >> 6);
        let idx = ((s >> 3) & 7) | (rex.x << 3);
        mem.index = if idx == 4 { None } else { Some(Reg::from_num(idx)) };
        if s & 7 == 5 && md == 0 {
            mem.base = Base::None;
            disp_size = DispSize::D32;
        } else {
            mem.base = Base::Reg(Reg::from_num((s & 7) | (rex.b << 3)));
        }
    } else if rm == 5 && md == 0 {
        mem.base = Base::Rip;
        disp_size = DispSize::D32;
    } else {
        mem.base = Base::Reg(Reg::from_num(rm | (rex.b << 3)));
    }
    mem.disp_size = disp_size;
    let at = c.rel();
    match disp_size {
        DispSize::None => {}
        DispSize::D8 => {
            mem.disp = c.byte()? as i8 as i32;
            ext.disp = Some(at..at + 1);
        }
        DispSize::D32 => {
            mem.disp = i32::from_le_bytes(c.take::<4>()?);
            ext.disp = Some(at..at + 4);
        }
    }
    Ok(ModRm { reg, rm: Operand::Mem(mem) })
}

fn imm8(c: &mut Cursor, ext: &mut FieldExtents) -> Result<i64, DecodeError> {
    let at = c.rel();
    let v = c.byte()? as i8 as i64;
    ext.imm = Some(at..at + 1);
    Ok(v)
}

fn imm16(c: &mut Cursor, ext: &mut FieldExtents) -> Result<i64, DecodeError> {
    let at = c.rel();
    let v = u16::from_le_bytes(c.take::<2>()?) as i64;
    ext.imm = Some(at..at + 2);
    Ok(v)
}

fn imm32(c: &mut Cursor, ext: &mut FieldExtents) -> Result<i64, DecodeError> {
    let at = c.rel();
    let v = i32::from_le_bytes(c.take::<4>()?) as i64;
    ext.imm = Some(at..at + 4);
    Ok(v)
}

fn rel8(c: &mut Cursor, ext: &mut FieldExtents) -> Result<i32, DecodeError> {
    let at = c.rel();
    let v = c.byte()? as i8 as i32;
    ext.disp = Some(at..at + 1);
    Ok(v)
}

fn rel32(c: &mut Cursor, ext: &mut FieldExtents) -> Result<i32, DecodeError> {
    let at = c.rel();
    let v = i32::from_le_bytes(c.take::<4>()?);
    ext.disp = Some(at..at + 4);
    Ok(v)
}

/// Decodes the instruction starting at `bytes[at]`.
pub fn decode(bytes: &[u8], at: usize) -> Result<DecodedInstr, DecodeError> {
    if at >= bytes.len() {
        return Err(DecodeError::Truncated { offset: at });
    }
    let mut c = Cursor { bytes, start: at, pos: at };
    let mut ext = FieldExtents::default();

    let mut opsize = false;
    if c.peek()? == 0x66 {
        opsize = true;
        c.pos += 1;
    }
    let mut rex = Rex::default();
    let mut rex_byte = None;
    let b = c.peek()?;
    if (0x40..=0x4F).contains(&b) {
        rex = Rex { w: b & 8 != 0, r: (b >> 2) & 1, x: (b >> 1) & 1, b: b & 1, present: true };
        rex_byte = Some(b);
        c.pos += 1;
    }
    let prefix_end = c.pos;
    let op_pos = c.pos;
    let op = c.byte()?;

    let size = if rex.w { OpSize::Qword } else { OpSize::Dword };
    // prefix legality checks shared by most opcodes
    let no_prefixes = |c: &Cursor| -> Result<(), DecodeError> {
        if opsize || rex.present {
            Err(c.bad_at(at))
        } else {
            Ok(())
        }
    };
    let no_opsize = |c: &Cursor| -> Result<(), DecodeError> {
        if opsize {
            Err(c.bad_at(at))
        } else {
            Ok(())
        }
    };

    let (mnemonic, size, form, operands) = match op {
        0x00..=0x3F if op & 7 == 1 || op & 7 == 3 || op & 7 == 5 => {
            let alu = AluOp::from_ext(op >> 3).ok_or_else(|| c.bad_at(op_pos))?;
            no_opsize(&c)?;
            ext.opcode = 0..c.rel();
            match op & 7 {
                1 => {
                    let m = decode_modrm(&mut c, rex, &mut ext, false)?;
                    (Mnemonic::Alu(alu), size, Form::Mr, vec![m.rm, Operand::Reg(Reg::from_num(m.reg))])
                }
                3 => {
                    let m = decode_modrm(&mut c, rex, &mut ext, false)?;
                    (Mnemonic::Alu(alu), size, Form::Rm, vec![Operand::Reg(Reg::from_num(m.reg)), m.rm])
                }
                _ => {
                    let v = imm32(&mut c, &mut ext)?;
                    (Mnemonic::Alu(alu), size, Form::AccImm, vec![Operand::Reg(Reg::Rax), Operand::Imm(v)])
                }
            }
        }
        0x50..=0x5F => {
            no_opsize(&c)?;
            ext.opcode = 0..c.rel();
            let r = Reg::from_num((op & 7) | (rex.b << 3));
            let m = if op < 0x58 { Mnemonic::Push } else { Mnemonic::Pop };
            (m, OpSize::Qword, Form::OpReg, vec![Operand::Reg(r)])
        }
        0x70..=0x7F => {
            no_prefixes(&c)?;
            let cond = Cond::from_code(op & 0xF).ok_or_else(|| c.bad_at(op_pos))?;
            ext.opcode = 0..c.rel();
            let r = rel8(&mut c, &mut ext)?;
            (Mnemonic::Jcc(cond), OpSize::Qword, Form::Rel8, vec![Operand::Rel(r)])
        }
        0x81 | 0x83 => {
            no_opsize(&c)?;
            ext.opcode = 0..c.rel();
            let modrm_pos = c.pos;
            let m = decode_modrm(&mut c, rex, &mut ext, false)?;
            let alu = AluOp::from_ext(m.reg & 7).ok_or_else(|| c.bad_at(modrm_pos))?;
            let (form, v) =
                if op == 0x81 { (Form::RmImm, imm32(&mut c, &mut ext)?) } else { (Form::RmImm8, imm8(&mut c, &mut ext)?) };
            (Mnemonic::Alu(alu), size, form, vec![m.rm, Operand::Imm(v)])
        }
        0x89 | 0x8B => {
            no_opsize(&c)?;
            ext.opcode = 0..c.rel();
            let m = decode_modrm(&mut c, rex, &mut ext, false)?;
            let reg = Operand::Reg(Reg::from_num(m.reg));
            if op == 0x89 {
                (Mnemonic::Mov, size, Form::Mr, vec![m.rm, reg])
            } else {
                (Mnemonic::Mov, size, Form::Rm, vec![reg, m.rm])
            }
        }
        0x90 => {
            no_prefixes(&c)?;
            ext.opcode = 0..c.rel();
            (Mnemonic::Nop, OpSize::Qword, Form::Bare, vec![])
        }
        0xB0..=0xB7 => {
            no_opsize(&c)?;
            ext.opcode = 0..c.rel();
            let n = op & 7;
            let r8 = if rex.present {
                Reg8::Low(Reg::from_num(n | (rex.b << 3)))
            } else if n < 4 {
                Reg8::Low(Reg::from_num(n))
            } else {
                Reg8::High(Reg::from_num(n - 4))
            };
            let at_imm = c.rel();
            let v = c.byte()? as i64;
            ext.imm = Some(at_imm..at_imm + 1);
            (Mnemonic::Mov, OpSize::Byte, Form::OpRegImm, vec![Operand::Reg8(r8), Operand::Imm(v)])
        }
        0xB8..=0xBF => {
            if rex.w {
                return Err(c.bad_at(at));
            }
            ext.opcode = 0..c.rel();
            let r = Reg::from_num((op & 7) | (rex.b << 3));
            if opsize {
                let v = imm16(&mut c, &mut ext)?;
                (Mnemonic::Mov, OpSize::Word, Form::OpRegImm, vec![Operand::Reg(r), Operand::Imm(v)])
            } else {
                let v = imm32(&mut c, &mut ext)? as u32 as i64;
                (Mnemonic::Mov, OpSize::Dword, Form::OpRegImm, vec![Operand::Reg(r), Operand::Imm(v)])
            }
        }
        0xC3 => {
            no_prefixes(&c)?;
            ext.opcode = 0..c.rel();
            (Mnemonic::Ret, OpSize::Qword, Form::Bare, vec![])
        }
        0xC7 => {
            if opsize && rex.w {
                return Err(c.bad_at(at));
            }
            ext.opcode = 0..c.rel();
            let modrm_pos = c.pos;
            let m = decode_modrm(&mut c, rex, &mut ext, false)?;
            if m.reg & 7 != 0 {
                return Err(c.bad_at(modrm_pos));
            }
            if opsize {
                let v = imm16(&mut c, &mut ext)?;
                (Mnemonic::Mov, OpSize::Word, Form::RmImm, vec![m.rm, Operand::Imm(v)])
            } else {
                let v = imm32(&mut c, &mut ext)?;
                (Mnemonic::Mov, size, Form::RmImm, vec![m.rm, Operand::Imm(v)])
            }
        }
        0xCC => {
            no_prefixes(&c)?;
            ext.opcode = 0..c.rel();
            (Mnemonic::Int3, OpSize::Qword, Form::Bare, vec![])
        }
        0xE8 | 0xE9 => {
            no_prefixes(&c)?;
            ext.opcode = 0..c.rel();
            let r = rel32(&mut c, &mut ext)?;
            let m = if op == 0xE8 { Mnemonic::Call } else { Mnemonic::Jmp };
            (m, OpSize::Qword, Form::Rel32, vec![Operand::Rel(r)])
        }
        0xEB => {
            no_prefixes(&c)?;
            ext.opcode = 0..c.rel();
            let r = rel8(&mut c, &mut ext)?;
            (Mnemonic::Jmp, OpSize::Qword, Form::Rel8, vec![Operand::Rel(r)])
        }
        0xFF => {
            no_opsize(&c)?;
            ext.opcode = 0..c.rel();
            let modrm_pos = c.pos;
            let m = decode_modrm(&mut c, rex, &mut ext, false)?;
            let mn = match m.reg & 7 {
                2 => Mnemonic::Call,
                4 => Mnemonic::Jmp,
                _ => return Err(c.bad_at(modrm_pos)),
            };
            (mn, OpSize::Qword, Form::RmOnly, vec![m.rm])
        }
        0x0F => {
            let op2_pos = c.pos;
            let op2 = c.byte()?;
            match op2 {
                0x01 => {
                    no_prefixes(&c)?;
                    let p = c.pos;
                    if c.byte()? != 0xEF {
                        return Err(c.bad_at(p));
                    }
                    ext.opcode = 0..c.rel();
                    (Mnemonic::Wrpkru, OpSize::Qword, Form::Bare, vec![])
                }
                0x05 => {
                    no_prefixes(&c)?;
                    ext.opcode = 0..c.rel();
                    (Mnemonic::Syscall, OpSize::Qword, Form::Bare, vec![])
                }
                0x80..=0x8F => {
                    no_prefixes(&c)?;
                    let cond = Cond::from_code(op2 & 0xF).ok_or_else(|| c.bad_at(op2_pos))?;
                    ext.opcode = 0..c.rel();
                    let r = rel32(&mut c, &mut ext)?;
                    (Mnemonic::Jcc(cond), OpSize::Qword, Form::Rel32, vec![Operand::Rel(r)])
                }
                0xA3 => {
                    no_opsize(&c)?;
                    ext.opcode = 0..c.rel();
                    let m = decode_modrm(&mut c, rex, &mut ext, false)?;
                    (Mnemonic::Bt, size, Form::Mr, vec![m.rm, Operand::Reg(Reg::from_num(m.reg))])
                }
                0xBA => {
                    no_opsize(&c)?;
                    ext.opcode = 0..c.rel();
                    let modrm_pos = c.pos;
                    let m = decode_modrm(&mut c, rex, &mut ext, false)?;
                    if m.reg & 7 != 4 {
                        return Err(c.bad_at(modrm_pos));
                    }
                    let at_imm = c.rel();
                    let v = c.byte()? as i64;
                    ext.imm = Some(at_imm..at_imm + 1);
                    (Mnemonic::Bt, size, Form::RmImm8, vec![m.rm, Operand::Imm(v)])
                }
                0xAE => {
                    no_opsize(&c)?;
                    ext.opcode = 0..c.rel();
                    let modrm_pos = c.pos;
                    let m = decode_modrm(&mut c, rex, &mut ext, false)?;
                    if m.reg & 7 != 5 || !matches!(m.rm, Operand::Mem(_)) {
                        return Err(c.bad_at(modrm_pos));
                    }
                    (Mnemonic::Xrstor, OpSize::Qword, Form::RmOnly, vec![m.rm])
                }
                _ => return Err(c.bad_at(op2_pos)),
            }
        }
        _ => return Err(c.bad_at(op_pos)),
    };

    ext.opcode_start = prefix_end - at;
    let extents = ext;
    let len = c.rel();
    let instr = Instr { mnemonic, size, form, operands, rex: rex_byte, opsize_prefix: opsize };
    Ok(DecodedInstr { instr, len, extents })
}

/// Linear sweep over `bytes`. Stops at the first undecodable byte.
pub fn decode_all(bytes: &[u8]) -> Result<Vec<(usize, DecodedInstr)>, DecodeError> {
    let mut out = Vec::new();
    let mut at = 0;
    while at < bytes.len() {
        let d = decode(bytes, at)?;
        let len = d.len;
        out.push((at, d));
        at += len;
    }
    Ok(out)
}
