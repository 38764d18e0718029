//! Cross-checks instruction boundaries and mnemonics against GNU objdump.
//! Skipped when objdump is not installed.

use std::process::Command;

use pkguard::x86::{decode, Mnemonic};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const OPCODES: &[&[u8]] = &[
    &[0x0F, 0x01, 0xEF], &[0x0F, 0x05], &[0x0F, 0xAE], &[0x0F, 0xBA], &[0x0F, 0xA3], &[0x0F, 0x84],
    &[0x01], &[0x03], &[0x05], &[0x09], &[0x21], &[0x2B], &[0x31], &[0x39], &[0x3D], &[0x53], &[0x5D],
    &[0x74], &[0x81], &[0x83], &[0x89], &[0x8B], &[0x90], &[0xB3], &[0xB6], &[0xB9], &[0xC3], &[0xC7],
    &[0xCC], &[0xE8], &[0xE9], &[0xEB], &[0xFF],
];

fn random_stream(rng: &mut ChaCha8Rng, count: usize) -> Vec<(Vec<u8>, Mnemonic)> {
    let mut out = Vec::new();
    while out.len() < count {
        let mut cand = Vec::new();
        match rng.gen_range(0..6) {
            0 => cand.push(0x66),
            1 => cand.push(rng.gen_range(0x40..0x50)),
            _ => {}
        }
        cand.extend_from_slice(OPCODES[rng.gen_range(0..OPCODES.len())]);
        cand.extend((0..12).map(|_| rng.gen::<u8>()));
        if let Ok(d) = decode(&cand, 0) {
            cand.truncate(d.len);
            out.push((cand, d.mnemonic));
        }
    }
    out
}

fn objdump(bytes: &[u8]) -> Option<Vec<(usize, String)>> {
    let path = std::env::temp_dir().join(format!("pkguard-objdump-{}.bin", std::process::id()));
    std::fs::write(&path, bytes).ok()?;
    let out = Command::new("objdump")
        .args(["-D", "-b", "binary", "-m", "i386:x86-64", "-M", "intel", "--insn-width=16"])
        .arg(&path)
        .output()
        .ok()?;
    let _ = std::fs::remove_file(&path);
    if !out.status.success() {
        return None;
    }
    let text = String::from_utf8_lossy(&out.stdout).into_owned();
    let mut v = Vec::new();
    for line in text.lines() {
        let parts: Vec<&str> = line.split('\t').collect();
        if parts.len() < 3 || !parts[0].trim_end().ends_with(':') {
            continue;
        }
        let off = usize::from_str_radix(parts[0].trim().trim_end_matches(':'), 16).ok()?;
        let mnem = parts[2]
            .split_whitespace()
            .find(|w| !w.starts_with("rex") && *w != "data16")
            .unwrap_or("")
            .to_string();
        v.push((off, mnem));
    }
    Some(v)
}

fn same_mnemonic(ours: Mnemonic, theirs: &str) -> bool {
    match ours {
        Mnemonic::Jcc(_) => theirs.starts_with('j') && theirs != "jmp",
        Mnemonic::Nop => theirs == "nop",
        Mnemonic::Int3 => theirs == "int3",
        Mnemonic::Xrstor => theirs == "xrstor" || theirs == "xrstor64",
        m => theirs == m.name().as_str(),
    }
}

#[test]
fn boundaries_and_mnemonics_agree_with_objdump() {
    if Command::new("objdump").arg("--version").output().is_err() {
        eprintln!("objdump not available, skipping");
        return;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    for _round in 0..10 {
        let stream = random_stream(&mut rng, 400);
        let bytes: Vec<u8> = stream.iter().flat_map(|(b, _)| b.clone()).collect();
        let theirs = objdump(&bytes).expect("objdump output");
        let mut at = 0;
        let ours: Vec<(usize, Mnemonic)> = stream
            .iter()
            .map(|(b, m)| {
                let r = (at, *m);
                at += b.len();
                r
            })
            .collect();
        assert_eq!(ours.len(), theirs.len(), "instruction count");
        for ((o_off, o_m), (t_off, t_m)) in ours.iter().zip(&theirs) {
            assert_eq!(o_off, t_off, "boundary");
            assert!(same_mnemonic(*o_m, t_m), "at {o_off:#x}: {} vs {t_m} ({:02x?})", o_m.name(), &bytes[*o_off..(*o_off + 8).min(bytes.len())]);
        }
    }
}
