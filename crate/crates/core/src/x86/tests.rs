use super::*;
use proptest::prelude::*;

fn hex(s: &str) -> Vec<u8> {
    s.split_whitespace().map(|b| u8::from_str_radix(b, 16).unwrap()).collect()
}

fn m(r: Reg, d: i32) -> Operand {
    Operand::Mem(Mem::base_disp(r, d))
}

// Reference bytes produced by GNU as (intel syntax).
fn reference_table() -> Vec<(Instr, &'static str)> {
    use AluOp::*;
    use OpSize::*;
    use Reg::*;
    vec![
        (Instr::wrpkru(), "0f 01 ef"),
        (Instr::alu_acc(Add, Dword, 0x00EF010F), "05 0f 01 ef 00"),
        (Instr::alu_mi(Add, Dword, Operand::Reg(Rbx), 0x01000000), "81 c3 00 00 00 01"),
        (Instr::alu_mi(Add, Qword, Operand::Reg(Rbx), 0x0F01EF00), "48 81 c3 00 ef 01 0f"),
        (Instr::alu_mi(Or, Dword, m(Rdi, 0), 0x12345678), "81 0f 78 56 34 12"),
        (Instr::mov_store(Dword, Mem::base_disp(Rdi, 0x0F01EF00), Rax), "89 87 00 ef 01 0f"),
        (Instr::mov_load(Qword, R10, Mem::rip(0x100)), "4c 8b 15 00 01 00 00"),
        (Instr::mov_ri32(Rax, 60), "b8 3c 00 00 00"),
        (Instr::mov_ri16(Rax, 0x1234), "66 b8 34 12"),
        (Instr::mov_ri8(Reg8::High(Rax), 0x12), "b4 12"),
        (Instr::mov_ri8(Reg8::Low(R9), 0x12), "41 b1 12"),
        (Instr::mov_mi(Qword, m(Rsp, 8), 0x7f), "48 c7 44 24 08 7f 00 00 00"),
        (
            Instr::mov_mi(Word, Operand::Mem(Mem::base_index(Rax, R12, 4, 0x10)), 0x55),
            "66 42 c7 44 a0 10 55 00",
        ),
        (Instr::bt_imm(Dword, Operand::Reg(Rax), 9), "0f ba e0 09"),
        (Instr::bt_reg(Dword, m(Rdx, 0), Rcx), "0f a3 0a"),
        (Instr::xrstor(Mem::base_disp(Rdi, 0)), "0f ae 2f"),
        (Instr::xrstor(Mem::base_disp(R13, 0x10)), "41 0f ae 6d 10"),
        (Instr::call_rm(Operand::Mem(Mem::rip(0x200))), "ff 15 00 02 00 00"),
        (Instr::jmp_rm(m(Rax, 0)), "ff 20"),
        (Instr::jmp_rm(Operand::Reg(R11)), "41 ff e3"),
        (Instr::push(R15), "41 57"),
        (Instr::pop(Rbx), "5b"),
        (Instr::alu_mi8(Cmp, Dword, Operand::Reg(Rax), 3), "83 f8 03"),
        (Instr::alu_mr(Xor, Dword, Operand::Reg(Rcx), Rcx), "31 c9"),
        (Instr::alu_mi8(Sub, Qword, Operand::Reg(R12), 8), "49 83 ec 08"),
        (Instr::alu_rm(And, Qword, Rax, m(Rbp, -8)), "48 23 45 f8"),
        (Instr::syscall(), "0f 05"),
        (Instr::int3(), "cc"),
        (Instr::ret(), "c3"),
    ]
}

#[test]
fn encodings_match_reference_assembler() {
    for (i, expect) in reference_table() {
        let bytes = i.encode().unwrap_or_else(|e| panic!("{i}: {e}"));
        assert_eq!(bytes, hex(expect), "{i}");
        let d = decode(&bytes, 0).unwrap();
        assert_eq!(d.len, bytes.len(), "{i}");
        assert_eq!(d.instr, i, "{i}");
    }
}

#[test]
fn field_extents() {
    let d = decode(&hex("0f 01 ef"), 0).unwrap();
    assert_eq!(d.mnemonic, Mnemonic::Wrpkru);
    assert_eq!(d.extents.opcode, 0..3);
    assert!(d.extents.modrm.is_none());

    let d = decode(&hex("90"), 0).unwrap();
    assert_eq!((d.mnemonic, d.len), (Mnemonic::Nop, 1));

    let d = decode(&hex("05 0f 01 ef 00"), 0).unwrap();
    assert_eq!(d.mnemonic, Mnemonic::Alu(AluOp::Add));
    assert_eq!(d.imm(), Some(0x00EF010F));
    assert_eq!(d.extents.imm, Some(1..5));

    let d = decode(&hex("66 42 c7 44 a0 10 55 00"), 0).unwrap();
    assert_eq!(d.extents.opcode, 0..3);
    assert_eq!(d.extents.opcode_start, 2);
    assert_eq!(d.extents.modrm, Some(3..4));
    assert_eq!(d.extents.sib, Some(4..5));
    assert_eq!(d.extents.disp, Some(5..6));
    assert_eq!(d.extents.imm, Some(6..8));

    let d = decode(&hex("e9 00 00 00 00"), 0).unwrap();
    assert_eq!(d.extents.disp, Some(1..5));
}

#[test]
fn decode_at_offset_reports_absolute_offsets() {
    let bytes = hex("90 90 0f 0b");
    assert_eq!(decode(&bytes, 2), Err(DecodeError::NotInSubset { offset: 3, byte: 0x0B }));
    assert_eq!(decode(&bytes, 1).unwrap().len, 1);
}

#[test]
fn rejects_outside_subset() {
    for s in ["0f 0b", "f3 90", "0f ae f0", "0f ae e8", "48 b8 00 00 00 00 00 00 00 00", "7a 00", "c7 c8 00 00 00 00"] {
        assert!(decode(&hex(s), 0).is_err(), "{s}");
    }
    assert!(matches!(decode(&hex("81 c3 00"), 0), Err(DecodeError::Truncated { .. })));
    assert!(matches!(decode(&hex("0f 01"), 0), Err(DecodeError::Truncated { .. })));
}

#[test]
fn reg8_high_needs_no_rex() {
    assert!(Instr::mov_ri8(Reg8::Low(Reg::Rsi), 1).encode().unwrap().starts_with(&[0x40]));
    assert!(encode(&Instr { rex: Some(0x40), ..Instr::mov_ri8(Reg8::High(Reg::Rax), 1) }).is_err());
}

pub(crate) fn subset_bytes() -> impl Strategy<Value = Vec<u8>> {
    let opcode = prop_oneof![
        Just(vec![0x0F, 0x01, 0xEF]),
        Just(vec![0x0F, 0x05]),
        Just(vec![0x0F, 0xAE]),
        Just(vec![0x0F, 0xBA]),
        Just(vec![0x0F, 0xA3]),
        (0x80u8..0x90).prop_map(|b| vec![0x0F, b]),
        prop::sample::select(vec![
            0x01u8, 0x03, 0x05, 0x09, 0x0B, 0x0D, 0x21, 0x23, 0x25, 0x29, 0x2B, 0x2D, 0x31, 0x33, 0x35, 0x39,
            0x3B, 0x3D, 0x50, 0x55, 0x5B, 0x70, 0x74, 0x7F, 0x81, 0x83, 0x89, 0x8B, 0x90, 0xB0, 0xB4, 0xB8,
            0xBF, 0xC3, 0xC7, 0xCC, 0xE8, 0xE9, 0xEB, 0xFF,
        ])
        .prop_map(|b| vec![b]),
    ];
    let prefix = prop_oneof![
        4 => Just(vec![]),
        1 => Just(vec![0x66]),
        2 => (0x40u8..0x50).prop_map(|r| vec![r]),
        1 => (0x40u8..0x50).prop_map(|r| vec![0x66, r]),
    ];
    (prefix, opcode, prop::collection::vec(any::<u8>(), 12)).prop_map(|(mut p, o, tail)| {
        p.extend(o);
        p.extend(tail);
        p
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(4000))]

    #[test]
    fn decode_encode_is_identity(bytes in subset_bytes()) {
        if let Ok(d) = decode(&bytes, 0) {
            let enc = d.instr.encode().map_err(|e| TestCaseError::fail(format!("{} {:02x?}: {e}", d.instr, &bytes[..d.len])))?;
            prop_assert_eq!(&enc[..], &bytes[..d.len]);
            prop_assert!(d.len <= MAX_INSN_LEN);
            // extents tile the instruction
            let mut covered = vec![false; d.len];
            for (_, r) in d.extents.fields() {
                for k in r {
                    prop_assert!(!covered[k]);
                    covered[k] = true;
                }
            }
            prop_assert!(covered.iter().all(|c| *c));
        }
    }

    #[test]
    fn encode_decode_is_identity(bytes in subset_bytes(), rel in any::<i32>()) {
        if let Ok(d) = decode(&bytes, 0) {
            let mut i = d.instr.clone();
            if i.rel().is_some() && matches!(i.form, Form::Rel32) {
                i.set_rel(rel);
            }
            let enc = i.encode().unwrap();
            let back = decode(&enc, 0).unwrap();
            prop_assert_eq!(back.instr, i);
            prop_assert_eq!(back.len, enc.len());
        }
    }

    #[test]
    fn decode_never_panics(bytes in prop::collection::vec(any::<u8>(), 0..20)) {
        let _ = decode(&bytes, 0);
        let _ = decode_all(&bytes);
    }
}
