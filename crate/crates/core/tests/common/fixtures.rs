//! The hand-written programs under `fixtures/`, rewritten and run in the
//! simulator before and after.

use std::collections::BTreeSet;
use std::path::PathBuf;

use pkguard::elfio::{load, load_file, LoadMode};
use pkguard::inspector::{EntryPointSet, TemplateSet};
use pkguard::rewriter::{LayoutMode, Policy, Rule};
use pkguard::sim::{Machine, ProcessStatus, SimConfig, SimImage};
use pkguard::x86::Reg;

pub const FIXTURES: [&str; 2] = ["rules_a", "rules_b"];

pub fn path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures").join(name)
}

/// `rules_a` is rewritten with r11 dead, `rules_b` with the default policy.
pub fn policy(name: &str, trampoline_base: u64) -> Policy {
    Policy {
        dead_regs: if name == "rules_a" { vec![Reg::R11] } else { Vec::new() },
        templates: TemplateSet::canonical(0x3),
        layout: LayoutMode::PreserveLayout { trampoline_base },
        ..Policy::default()
    }
}

#[derive(Debug, PartialEq, Eq)]
pub struct Run {
    pub status: ProcessStatus,
    pub output: Vec<u8>,
    pub syscalls: Vec<(u64, [u64; 4], i64)>,
}

/// Runs an ELF file; the original needs inspection bypassed to load.
pub fn run(bytes: &[u8], bypass_inspection: bool) -> Result<Run, String> {
    let img = load(bytes, LoadMode::Elf).map_err(|e| e.to_string())?;
    let cfg = SimConfig { bypass_inspection, ..SimConfig::default() };
    let mut m = Machine::init_lifecycle(&SimImage::from_loaded(&img), cfg).map_err(|e| e.to_string())?;
    m.run(100_000);
    if !m.violations.is_empty() {
        return Err(format!("violations: {:?}", m.violations));
    }
    Ok(Run {
        status: m.status.clone(),
        output: m.output.clone(),
        syscalls: m.syscall_log.iter().map(|(_, nr, a, r)| (*nr, *a, *r)).collect(),
    })
}

/// Rewrites fixture `name`, checks both versions behave identically and
/// returns the rules applied.
pub fn check(name: &str) -> Result<BTreeSet<Rule>, String> {
    let img = load_file(&path(name), LoadMode::Elf).map_err(|e| e.to_string())?;
    if img.inspect(&EntryPointSet::new(), &TemplateSet::canonical(0x3)).pass {
        return Err(format!("{name} already inspects clean"));
    }
    let out = img.rewrite(&EntryPointSet::new(), &policy(name, img.default_trampoline_base())).map_err(|e| e.to_string())?;
    let before = run(&img.bytes, true)?;
    let after = run(&out.bytes, false)?;
    if before.status != ProcessStatus::Exited(0) || before.output.is_empty() {
        return Err(format!("{name}: original ended {:?} with {} output bytes", before.status, before.output.len()));
    }
    if before != after {
        return Err(format!("{name}: runs differ\nbefore {before:?}\nafter  {after:?}"));
    }
    Ok(out.histogram.keys().copied().collect())
}
