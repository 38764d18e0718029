//! Attacker-controlled execution from every executable byte.

use std::fmt;
use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::machine::{pool_base, Machine, ProcessStatus, ThreadStatus, Violation};
use crate::bytescan::WRPKRU_BYTES;
use crate::inspector::{safe_b_template, PKRU_ALLOW};
use crate::x86::{MachineState, Reg, StepOutcome};

/// Steps per start offset before a run counts as "no violation (budget)".
pub const ATTACK_BUDGET: u64 = 100_000;

/// Initial registers of an attack run. `rip` and `pkru` are overwritten.
#[derive(Debug, Clone)]
pub struct Preset {
    pub name: String,
    pub state: MachineState,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FindingKind {
    Violation(Violation),
    /// WRPKRU loaded a value other than DISALLOW in front of a guard, yet
    /// the run did not end at the guard's exit stub.
    GuardBypassed { wrpkru: u64, eax: u32 },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SweepFinding {
    pub start: u64,
    pub preset: String,
    pub kind: FindingKind,
}

impl fmt::Display for SweepFinding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "start={:#x} preset={} ", self.start, self.preset)?;
        match &self.kind {
            FindingKind::Violation(v) => write!(f, "{v}"),
            FindingKind::GuardBypassed { wrpkru, eax } => {
                write!(f, "wrpkru at {wrpkru:#x} loaded {eax:#x} and the exit stub did not run")
            }
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SweepReport {
    pub offsets: usize,
    pub runs: usize,
    pub budget: u64,
    /// Runs stopped by the step budget.
    pub budget_exhausted: usize,
    /// Runs that executed a guarded WRPKRU with a value other than DISALLOW.
    pub guarded_runs: usize,
    /// Of those, runs that ended at the exit stub.
    pub guarded_exits: usize,
    pub findings: Vec<SweepFinding>,
}

impl SweepReport {
    pub fn is_clean(&self) -> bool {
        self.findings.is_empty()
    }
}

impl fmt::Display for SweepReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "offsets={} runs={} budget={} budget_exhausted={} guarded_runs={} guarded_exits={} findings={}",
            self.offsets,
            self.runs,
            self.budget,
            self.budget_exhausted,
            self.guarded_runs,
            self.guarded_exits,
            self.findings.len()
        )?;
        for x in &self.findings {
            writeln!(f, "{x}")?;
        }
        Ok(())
    }
}

/// Register presets: random values with a valid stack, and crafted
/// WRPKRU operands (ecx = edx = 0) with interesting eax values.
pub fn default_presets(seed: u64, stack: Range<u64>) -> Vec<Preset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sp = ((stack.start + stack.end) / 2) & !0xF;
    let random = |rng: &mut ChaCha8Rng| {
        let mut st = MachineState::new(0);
        for r in Reg::ALL {
            st.set_reg(r, rng.gen());
        }
        st.set_reg(Reg::Rsp, sp);
        st
    };
    let mut out = Vec::new();
    for k in 0..3 {
        out.push(Preset { name: format!("random{k}"), state: random(&mut rng) });
    }
    for eax in [0u32, PKRU_ALLOW, 0xFFFF_FFFF, 0x203, 0x20F] {
        let mut st = random(&mut rng);
        st.set_reg(Reg::Rax, eax as u64);
        st.set_reg(Reg::Rcx, 0);
        st.set_reg(Reg::Rdx, 0);
        out.push(Preset { name: format!("eax={eax:#x}"), state: st });
    }
    // every pointer register aims at trusted memory
    let mut st = random(&mut rng);
    for r in Reg::ALL {
        if r != Reg::Rsp {
            st.set_reg(r, pool_base(1) + 0x40);
        }
    }
    st.set_reg(Reg::Rcx, 0);
    st.set_reg(Reg::Rdx, 0);
    out.push(Preset { name: "mt-pointers".into(), state: st });
    out
}

/// Start addresses of every byte of executable pages within `region`.
pub fn executable_offsets(machine: &Machine, region: Range<u64>) -> Vec<u64> {
    region
        .filter(|a| machine.pages.get(&(a / crate::bytescan::PAGE_SIZE as u64)).is_some_and(|p| p.perms.x))
        .collect()
}

/// Runs `machine` from every executable byte of `region` with each preset
/// and PKRU = DISALLOW, and records protected accesses from outside
/// trusted code, grants without entry and guards that fail to terminate.
pub fn attack_sweep(machine: &Machine, region: Range<u64>, presets: &[Preset], budget: u64) -> SweepReport {
    let starts = executable_offsets(machine, region);
    let mut base = machine.clone();
    base.threads.clear();
    base.signals.clear();
    base.trace.clear();
    base.violations.clear();
    base.config.continue_on_fault = false;
    base.config.tracing = false;
    let disallow = base.config.domains.disallow();
    let guard = safe_b_template(disallow);
    let mut report = SweepReport { offsets: starts.len(), budget, ..SweepReport::default() };

    for &start in &starts {
        for p in presets {
            let mut m = base.clone();
            let tid = m.spawn_thread(start, Some(disallow));
            let mut st = p.state.clone();
            st.rip = start;
            st.pkru = disallow;
            m.threads[tid].state = st;
            report.runs += 1;

            let mut guarded: Option<(u64, u32)> = None;
            let mut steps = 0;
            while m.status == ProcessStatus::Running && m.threads[tid].status == ThreadStatus::Runnable {
                if steps == budget {
                    report.budget_exhausted += 1;
                    break;
                }
                let pc = m.threads[tid].state.rip;
                let eax = m.threads[tid].state.eax();
                let before = guarded.is_none()
                    && eax != disallow
                    && m.peek(pc, 3) == WRPKRU_BYTES
                    && m.peek(pc + 3, guard.len()) == guard;
                let outcome = m.step_thread(tid);
                steps += 1;
                if before && outcome == StepOutcome::Continue && m.threads[tid].state.pkru == eax {
                    guarded = Some((pc, eax));
                }
            }
            for v in &m.violations {
                if matches!(v, Violation::ProtectedAccessOutsideTrusted { .. } | Violation::GrantWithoutEntry { .. }) {
                    let kind = FindingKind::Violation(v.clone());
                    report.findings.push(SweepFinding { start, preset: p.name.clone(), kind });
                }
            }
            if let Some((wrpkru, eax)) = guarded {
                report.guarded_runs += 1;
                let stub = wrpkru + 3 + guard.len() as u64 - 2;
                let exited = matches!(m.status, ProcessStatus::Exited(_)) && m.last_syscall_pc == Some(stub);
                if exited {
                    report.guarded_exits += 1;
                } else {
                    let kind = FindingKind::GuardBypassed { wrpkru, eax };
                    report.findings.push(SweepFinding { start, preset: p.name.clone(), kind });
                }
            }
        }
    }
    report
}
