use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::ops::Range;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use super::{pkru_allows, ConfigError, DomainConfig, IsolationMode, PkAccess};
use crate::bytescan::PAGE_SIZE;
use crate::inspector::{inspect_region, EntryPointSet, TemplateSet};
use crate::rewriter::{Policy, RuntimePageState, RuntimeRewriteOutcome, TRAP_BYTE};
use crate::x86::{decode, step, Access, DecodedInstr, Env, Fault, MachineState, Mnemonic, Reg, StepOutcome, SyscallAction};

pub const SYS_WRITE: u64 = 1;
pub const SYS_MMAP: u64 = 9;
pub const SYS_MPROTECT: u64 = 10;
pub const SYS_RT_SIGRETURN: u64 = 15;
pub const SYS_EXIT: u64 = 60;
pub const SYS_EXIT_GROUP: u64 = 231;
pub const SYS_PKEY_MPROTECT: u64 = 329;
/// Allocator hook: `rdi` = size; returns an address in the pool of the
/// most privileged domain the caller can write.
pub const ALLOC_SYSCALL: u64 = 1000;
/// PKRU installed before a signal handler runs: domain 0 only.
pub const SIGNAL_PKRU: u32 = 0x3;

const PROT_READ: u64 = 1;
const PROT_WRITE: u64 = 2;
const PROT_EXEC: u64 = 4;

const EPERM: i64 = 1;
const ENOMEM: i64 = 12;
const EACCES: i64 = 13;
const EFAULT: i64 = 14;
const EINVAL: i64 = 22;

const PAGE: u64 = PAGE_SIZE as u64;
const POOL_BASE: u64 = 0x2000_0000;
const POOL_STRIDE: u64 = 0x100_0000;
const MMAP_BASE: u64 = 0x3000_0000;
const TRAMP_BASE: u64 = 0x6000_0000;
const TRAMP_STRIDE: u64 = 0x10_0000;
const STACK_TOP: u64 = 0x7ff0_0000_0000;
const STACK_STRIDE: u64 = 0x10_0000;
const STACK_SIZE: u64 = 0x4000;
/// Bytes skipped below the interrupted stack pointer on signal delivery.
const SIGNAL_GAP: u64 = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct Perms {
    pub r: bool,
    pub w: bool,
    pub x: bool,
}

impl Perms {
    pub const R: Perms = Perms { r: true, w: false, x: false };
    pub const RW: Perms = Perms { r: true, w: true, x: false };
    pub const RX: Perms = Perms { r: true, w: false, x: true };

    pub fn from_prot(prot: u64) -> Perms {
        Perms { r: prot & PROT_READ != 0, w: prot & PROT_WRITE != 0, x: prot & PROT_EXEC != 0 }
    }

    pub fn parse(s: &str) -> Option<Perms> {
        let mut p = Perms::default();
        for c in s.chars() {
            match c {
                'r' => p.r = true,
                'w' => p.w = true,
                'x' => p.x = true,
                '-' => {}
                _ => return None,
            }
        }
        Some(p)
    }
}

impl fmt::Display for Perms {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let c = |b: bool, ch: char| if b { ch } else { '-' };
        write!(f, "{}{}{}", c(self.r, 'r'), c(self.w, 'w'), c(self.x, 'x'))
    }
}

#[derive(Debug, Clone)]
pub enum PageState {
    Normal,
    /// Mapped read-only until the first execution passes inspection.
    Pending,
    /// Executable copy is trap-filled; code is copied in on first use.
    Trap(Box<RuntimePageState>),
}

#[derive(Debug, Clone)]
pub struct Page {
    pub domain: u8,
    pub perms: Perms,
    /// Shared between clones until written.
    pub data: Arc<Vec<u8>>,
    pub state: PageState,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InterceptMode {
    /// Inspect when execute permission is requested.
    Eager,
    /// Map read-only and inspect on the first execution fault.
    OnDemand,
}

#[derive(Debug, Clone, Default)]
pub struct Component {
    pub code: Vec<Range<u64>>,
    pub entries: EntryPointSet,
}

#[derive(Debug, Clone)]
pub struct SimSegment {
    pub addr: u64,
    pub bytes: Vec<u8>,
    pub perms: Perms,
    /// Owning component; its domain tags the pages.
    pub component: usize,
}

#[derive(Debug, Clone, Default)]
pub struct SimImage {
    pub segments: Vec<SimSegment>,
    /// (component, address) pairs.
    pub entries: Vec<(usize, u64)>,
    /// Component and address where the main thread starts.
    pub main: (usize, u64),
}

impl SimImage {
    /// Every loadable segment of `image` in component 0, starting at the ELF entry.
    pub fn from_loaded(image: &crate::elfio::LoadedImage) -> SimImage {
        let segments = image
            .segments
            .iter()
            .map(|s| {
                let mut bytes = s.data.clone();
                bytes.resize(s.memsz.max(s.data.len() as u64) as usize, 0);
                SimSegment { addr: s.vaddr, bytes, perms: s.perms, component: 0 }
            })
            .collect();
        SimImage { segments, entries: Vec::new(), main: (0, image.entry) }
    }
}

#[derive(Debug, Clone)]
pub struct SimConfig {
    pub domains: DomainConfig,
    pub intercept: InterceptMode,
    /// Pages failing inspection at first execution are rewritten at
    /// runtime instead of terminating the process.
    pub rewrite_on_fault: bool,
    /// Syscalls refused to U (privilege separation filter).
    pub deny_untrusted: BTreeSet<u64>,
    /// PKRU of spawned threads; `None` means the domain config's disallow value.
    pub new_thread_pkru: Option<u32>,
    pub pool_size: u64,
    pub seed: u64,
    /// The scheduler switches threads with probability 1/n after each step.
    pub yield_one_in: u32,
    /// Record faults and kill only the faulting thread.
    pub continue_on_fault: bool,
    /// Flag T code running on a stack outside the thread's trusted stack.
    pub check_private_stacks: bool,
    /// Guard templates; `None` means the canonical ones for the config.
    pub templates: Option<TemplateSet>,
    pub rewrite_policy: Policy,
    /// Skip inspection of the image at startup and at first execution.
    /// Only meant for checking that the monitors notice unsafe code.
    pub bypass_inspection: bool,
    /// Record one event per instruction and memory access.
    pub tracing: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            domains: DomainConfig::two_component(IsolationMode::Full),
            intercept: InterceptMode::Eager,
            rewrite_on_fault: false,
            deny_untrusted: BTreeSet::new(),
            new_thread_pkru: None,
            pool_size: 0x1_0000,
            seed: 0,
            yield_one_in: 4,
            continue_on_fault: false,
            check_private_stacks: false,
            templates: None,
            rewrite_policy: Policy::default(),
            bypass_inspection: false,
            tracing: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ThreadStatus {
    Runnable,
    Exited(i64),
    Faulted(Fault),
}

#[derive(Debug, Clone)]
pub struct SimThread {
    pub id: usize,
    pub state: MachineState,
    pub status: ThreadStatus,
    /// Interrupted contexts, innermost last.
    pub signal_frames: Vec<MachineState>,
    pub stack: Range<u64>,
    pub trusted_stack: Option<Range<u64>>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ProcessStatus {
    Running,
    Exited(i64),
    Terminated(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    /// Isolated memory accessed while the program counter is outside the
    /// code of every component allowed to access it.
    ProtectedAccessOutsideTrusted { pc: u64, addr: u64, domain: u8, access: PkAccess },
    /// PKRU started granting isolated access and the next instruction is
    /// neither an entry point nor a guard.
    GrantWithoutEntry { pc: u64, next: u64, pkru: u32 },
    WriteAndExec { page: u64 },
    PendingExecuted { pc: u64 },
    SignalResetFailed { thread: usize, pkru: u32 },
    InterceptBypassed { nr: u64, pkru: u32 },
    CrossThreadPkru { thread: usize, other: usize },
    UntrustedStack { thread: usize, pc: u64, rsp: u64 },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::ProtectedAccessOutsideTrusted { pc, addr, domain, access } => {
                write!(f, "protected {access:?} of {addr:#x} (domain {domain}) from pc {pc:#x}")
            }
            Violation::GrantWithoutEntry { pc, next, pkru } => {
                write!(f, "pkru {pkru:#x} granted at {pc:#x} without transfer to an entry (next {next:#x})")
            }
            Violation::WriteAndExec { page } => write!(f, "page {page:#x} writable and executable"),
            Violation::PendingExecuted { pc } => write!(f, "uninspected code executed at {pc:#x}"),
            Violation::SignalResetFailed { thread, pkru } => {
                write!(f, "thread {thread} entered a signal handler with pkru {pkru:#x}")
            }
            Violation::InterceptBypassed { nr, pkru } => write!(f, "syscall {nr} mapped code with pkru {pkru:#x}"),
            Violation::CrossThreadPkru { thread, other } => {
                write!(f, "a step of thread {thread} changed the pkru of thread {other}")
            }
            Violation::UntrustedStack { thread, pc, rsp } => {
                write!(f, "thread {thread} runs trusted code at {pc:#x} on stack {rsp:#x}")
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EventKind {
    Step { instr: String },
    Load { addr: u64, size: usize, domain: u8 },
    Store { addr: u64, size: usize, domain: u8 },
    Syscall { nr: u64, args: [u64; 4], ret: i64 },
    InterceptDenied { nr: u64 },
    Inspected { page: u64, pass: bool },
    RuntimeRewrite { page: u64, entry: u64, outcome: String },
    PkruChange { from: u32, to: u32 },
    Signal { handler: u64 },
    SigReturn,
    Fault(Fault),
    ThreadExit { code: i64 },
    Terminated { reason: String },
    Violation(Violation),
}

impl fmt::Display for EventKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EventKind::Step { instr } => write!(f, "step instr=\"{instr}\""),
            EventKind::Load { addr, size, domain } => write!(f, "load addr={addr:#x} size={size} domain={domain}"),
            EventKind::Store { addr, size, domain } => write!(f, "store addr={addr:#x} size={size} domain={domain}"),
            EventKind::Syscall { nr, args, ret } => write!(
                f,
                "syscall nr={nr} args={:#x},{:#x},{:#x},{:#x} ret={ret}",
                args[0], args[1], args[2], args[3]
            ),
            EventKind::InterceptDenied { nr } => write!(f, "intercept-denied nr={nr}"),
            EventKind::Inspected { page, pass } => write!(f, "inspected page={page:#x} pass={pass}"),
            EventKind::RuntimeRewrite { page, entry, outcome } => {
                write!(f, "runtime-rewrite page={page:#x} entry={entry:#x} outcome={outcome}")
            }
            EventKind::PkruChange { from, to } => write!(f, "pkru from={from:#x} to={to:#x}"),
            EventKind::Signal { handler } => write!(f, "signal handler={handler:#x}"),
            EventKind::SigReturn => f.write_str("sigreturn"),
            EventKind::Fault(x) => write!(f, "fault \"{x}\""),
            EventKind::ThreadExit { code } => write!(f, "thread-exit code={code}"),
            EventKind::Terminated { reason } => write!(f, "terminated reason=\"{reason}\""),
            EventKind::Violation(v) => write!(f, "violation \"{v}\""),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Event {
    pub step: u64,
    pub thread: usize,
    pub pc: u64,
    pub pkru: u32,
    pub kind: EventKind,
}

impl fmt::Display for Event {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "step={} thread={} pc={:#x} pkru={:#x} event={}", self.step, self.thread, self.pc, self.pkru, self.kind)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SimError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("segment at {0:#x} is writable and executable")]
    WritableCode(u64),
    #[error("segment at {0:#x} overlaps another segment")]
    Overlap(u64),
    #[error("component {0} does not exist")]
    UnknownComponent(usize),
    #[error("startup inspection failed: unsafe occurrence at {0:#x}")]
    InspectionFailed(u64),
    #[error("pool of component {0} exhausted")]
    OutOfPool(usize),
}

#[derive(Debug, Clone)]
pub struct Machine {
    pub config: SimConfig,
    pub pages: BTreeMap<u64, Page>,
    pub components: Vec<Component>,
    pub threads: Vec<SimThread>,
    pub current: usize,
    pub steps: u64,
    pub trace: Vec<Event>,
    pub violations: Vec<Violation>,
    pub output: Vec<u8>,
    pub status: ProcessStatus,
    /// (thread, nr, args, return value) for every syscall.
    pub syscall_log: Vec<(usize, u64, [u64; 4], i64)>,
    /// Address of the most recent SYSCALL instruction.
    pub last_syscall_pc: Option<u64>,
    /// Scheduled signals: (step, thread, handler).
    pub signals: Vec<(u64, usize, u64)>,
    pub templates: TemplateSet,
    rng: ChaCha8Rng,
    pool_next: Vec<u64>,
    mmap_next: u64,
    tramp_next: u64,
}

/// Start of the heap pool of component `c`.
pub fn pool_base(c: usize) -> u64 {
    POOL_BASE + c as u64 * POOL_STRIDE
}

fn page_of(addr: u64) -> u64 {
    addr / PAGE
}

impl Machine {
    pub fn new(config: SimConfig) -> Result<Machine, SimError> {
        config.domains.validate()?;
        let n = config.domains.components;
        let templates = config.templates.clone().unwrap_or_else(|| TemplateSet::canonical(config.domains.disallow()));
        let mut m = Machine {
            pages: BTreeMap::new(),
            components: vec![Component::default(); n],
            threads: Vec::new(),
            current: 0,
            steps: 0,
            trace: Vec::new(),
            violations: Vec::new(),
            output: Vec::new(),
            status: ProcessStatus::Running,
            syscall_log: Vec::new(),
            last_syscall_pc: None,
            signals: Vec::new(),
            templates,
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            pool_next: (0..n).map(pool_base).collect(),
            mmap_next: MMAP_BASE,
            tramp_next: TRAMP_BASE,
            config,
        };
        for c in 0..n {
            m.map(pool_base(c), m.config.pool_size, c as u8, Perms::RW);
        }
        Ok(m)
    }

    /// Creates domains and pools, maps the image, inspects its code (eager
    /// mode) or marks it pending (on-demand mode) and starts the main thread.
    pub fn init_lifecycle(image: &SimImage, config: SimConfig) -> Result<Machine, SimError> {
        let mut m = Machine::new(config)?;
        let n = m.components.len();
        for seg in &image.segments {
            if seg.component >= n {
                return Err(SimError::UnknownComponent(seg.component));
            }
            if seg.perms.w && seg.perms.x {
                return Err(SimError::WritableCode(seg.addr));
            }
            let first = page_of(seg.addr);
            let last = page_of(seg.addr + seg.bytes.len().max(1) as u64 - 1);
            if (first..=last).any(|p| m.pages.contains_key(&p)) {
                return Err(SimError::Overlap(seg.addr));
            }
            let perms = match (seg.perms.x, m.config.intercept) {
                (true, InterceptMode::OnDemand) if !m.config.bypass_inspection => Perms::R,
                _ => seg.perms,
            };
            m.map(first * PAGE, (last + 1 - first) * PAGE, seg.component as u8, perms);
            m.write_raw(seg.addr, &seg.bytes);
            if seg.perms.x {
                m.components[seg.component].code.push(seg.addr..seg.addr + seg.bytes.len() as u64);
                if m.config.intercept == InterceptMode::OnDemand && !m.config.bypass_inspection {
                    for p in first..=last {
                        m.pages.get_mut(&p).unwrap().state = PageState::Pending;
                    }
                }
            }
        }
        for &(c, addr) in &image.entries {
            if c >= n {
                return Err(SimError::UnknownComponent(c));
            }
            m.components[c].entries.insert(addr);
        }
        if m.config.intercept == InterceptMode::Eager && !m.config.bypass_inspection {
            let exec: Vec<u64> = m.pages.iter().filter(|(_, p)| p.perms.x).map(|(i, _)| *i).collect();
            let report = m.inspect_pages(&exec);
            let bad = report.unsafe_verdicts().next().map(|v| v.occurrence.offset);
            if let Some(at) = bad {
                return Err(SimError::InspectionFailed(at));
            }
        }
        let (c, main) = image.main;
        if c >= n {
            return Err(SimError::UnknownComponent(c));
        }
        let pkru = if c == 0 { m.config.domains.disallow() } else { m.config.domains.allow(c) };
        m.spawn_thread(main, Some(pkru));
        Ok(m)
    }

    /// Every registered entry point.
    pub fn entries(&self) -> EntryPointSet {
        let mut all = EntryPointSet::new();
        for c in &self.components {
            all.extend(&c.entries);
        }
        all
    }

    /// Maps zeroed pages covering `addr..addr+len`, or retags existing ones.
    pub fn map(&mut self, addr: u64, len: u64, domain: u8, perms: Perms) {
        if len == 0 {
            return;
        }
        for p in page_of(addr)..=page_of(addr + len - 1) {
            let page = self.pages.entry(p).or_insert_with(|| Page {
                domain,
                perms,
                data: Arc::new(vec![0; PAGE_SIZE]),
                state: PageState::Normal,
            });
            page.domain = domain;
            page.perms = perms;
        }
    }

    /// Writes bytes ignoring permissions; pages must exist.
    pub fn write_raw(&mut self, addr: u64, bytes: &[u8]) {
        for (k, b) in bytes.iter().enumerate() {
            let a = addr + k as u64;
            let page = self.pages.get_mut(&page_of(a)).expect("write_raw to unmapped page");
            Arc::make_mut(&mut page.data)[(a % PAGE) as usize] = *b;
        }
    }

    /// Reads bytes ignoring permissions; stops at the first unmapped page.
    pub fn peek(&self, addr: u64, len: usize) -> Vec<u8> {
        let mut out = Vec::with_capacity(len);
        for k in 0..len as u64 {
            let a = addr.wrapping_add(k);
            match self.pages.get(&page_of(a)) {
                Some(p) => out.push(p.data[(a % PAGE) as usize]),
                None => break,
            }
        }
        out
    }

    pub fn peek_instr(&self, addr: u64) -> Option<DecodedInstr> {
        decode(&self.peek(addr, crate::x86::MAX_INSN_LEN), 0).ok()
    }

    /// True when a guard template starts at `addr`.
    pub fn guard_at(&self, addr: u64) -> bool {
        let t = &self.templates;
        t.wrpkru.iter().chain(t.xrstor.iter()).any(|g| self.peek(addr, g.bytes.len()) == g.bytes)
    }

    pub fn spawn_thread(&mut self, rip: u64, pkru: Option<u32>) -> usize {
        let id = self.threads.len();
        let top = STACK_TOP - id as u64 * STACK_STRIDE;
        self.map(top - STACK_SIZE, STACK_SIZE, 0, Perms::RW);
        let mut state = MachineState::new(rip);
        state.set_reg(Reg::Rsp, top - 64);
        state.pkru = pkru.or(self.config.new_thread_pkru).unwrap_or_else(|| self.config.domains.disallow());
        self.threads.push(SimThread {
            id,
            state,
            status: ThreadStatus::Runnable,
            signal_frames: Vec::new(),
            stack: top - STACK_SIZE..top,
            trusted_stack: None,
        });
        id
    }

    fn event(&mut self, tid: usize, pc: u64, pkru: u32, kind: EventKind) {
        self.trace.push(Event { step: self.steps, thread: tid, pc, pkru, kind });
    }

    fn violation(&mut self, tid: usize, pc: u64, pkru: u32, v: Violation) {
        self.event(tid, pc, pkru, EventKind::Violation(v.clone()));
        self.violations.push(v);
    }

    /// Component whose code contains `pc`.
    pub fn component_at(&self, pc: u64) -> Option<usize> {
        self.components.iter().position(|c| c.code.iter().any(|r| r.contains(&pc)))
    }

    fn pc_may_access(&self, pc: u64, domain: u8, access: PkAccess) -> bool {
        match self.component_at(pc) {
            Some(c) => pkru_allows(self.config.domains.allow(c), domain, access),
            None => false,
        }
    }

    /// Whether a caller with this PKRU counts as trusted for interception.
    pub fn caller_trusted(&self, pkru: u32) -> bool {
        (1..self.components.len()).any(|d| pkru_allows(pkru, d as u8, PkAccess::Write))
    }

    /// Inspects `pages` as if executable, together with their executable
    /// neighbours.
    fn inspect_pages(&self, pages: &[u64]) -> crate::inspector::InspectionReport {
        let mut set: BTreeSet<u64> = pages.iter().copied().collect();
        for p in pages {
            for n in [p.wrapping_sub(1), p + 1] {
                if self.pages.get(&n).is_some_and(|pg| pg.perms.x) {
                    set.insert(n);
                }
            }
        }
        let view: Vec<(u64, &[u8])> = set.iter().map(|i| (*i, self.pages[i].data.as_slice())).collect();
        let cand: BTreeSet<u64> = pages.iter().copied().collect();
        let exec = |i: u64| cand.contains(&i) || self.pages.get(&i).is_some_and(|p| p.perms.x);
        inspect_region(&view, exec, &self.entries(), &self.templates).expect("pages are page-sized")
    }

    /// Handles execution of a pending page: inspect, then grant execute or
    /// divert to runtime rewriting or terminate.
    pub fn on_exec_fault(&mut self, tid: usize, idx: u64, pc: u64, pkru: u32) -> bool {
        let pass = self.config.bypass_inspection || self.inspect_pages(&[idx]).pass;
        self.event(tid, pc, pkru, EventKind::Inspected { page: idx * PAGE, pass });
        let page = self.pages.get_mut(&idx).unwrap();
        if pass {
            page.perms = Perms::RX;
            page.state = PageState::Normal;
            return true;
        }
        if self.config.rewrite_on_fault {
            let tramp = self.tramp_next;
            self.tramp_next += TRAMP_STRIDE;
            let page = self.pages.get_mut(&idx).unwrap();
            let st = RuntimePageState::new(idx * PAGE, page.data.to_vec(), tramp);
            page.data = Arc::new(st.current.clone());
            page.perms = Perms::RX;
            page.state = PageState::Trap(Box::new(st));
            return true;
        }
        self.terminate(tid, pc, pkru, format!("unsafe occurrence on page {:#x}", idx * PAGE));
        false
    }

    fn terminate(&mut self, tid: usize, pc: u64, pkru: u32, reason: String) {
        self.event(tid, pc, pkru, EventKind::Terminated { reason: reason.clone() });
        if self.status == ProcessStatus::Running {
            self.status = ProcessStatus::Terminated(reason);
        }
    }

    /// Copies reserve code for `entry` into the executable copy of a trap page.
    fn trap_entry(&mut self, tid: usize, idx: u64, entry: u64, pkru: u32) -> bool {
        let entries = self.entries();
        let policy = self.config.rewrite_policy.clone();
        let page = self.pages.get_mut(&idx).unwrap();
        let PageState::Trap(st) = &mut page.state else { return true };
        let result = st.runtime_rewrite(entry, &entries, &policy);
        let (current, tramp_base, tramp) = (st.current.clone(), st.tramp_base, st.tramp.clone());
        page.data = Arc::new(current);
        let domain = page.domain;
        let outcome = match &result {
            Ok(RuntimeRewriteOutcome::Swapped { plans, .. }) => format!("swapped plans={plans}"),
            Ok(o) => format!("{o:?}").to_lowercase(),
            Err(e) => e.to_string(),
        };
        self.event(tid, entry, pkru, EventKind::RuntimeRewrite { page: idx * PAGE, entry, outcome });
        match result {
            Ok(RuntimeRewriteOutcome::GenuineTrap) | Ok(RuntimeRewriteOutcome::AlreadyDone) => true,
            Ok(_) => {
                if !tramp.is_empty() {
                    self.map(tramp_base, tramp.len() as u64, domain, Perms::RX);
                    for p in page_of(tramp_base)..=page_of(tramp_base + tramp.len() as u64 - 1) {
                        let pg = self.pages.get_mut(&p).unwrap();
                        if pg.data.iter().all(|b| *b == 0) {
                            Arc::make_mut(&mut pg.data).fill(TRAP_BYTE);
                        }
                    }
                    self.write_raw(tramp_base, &tramp);
                    if let Some(c) = self.component_at(idx * PAGE) {
                        let r = tramp_base..tramp_base + tramp.len() as u64;
                        self.components[c].code.retain(|x| x.start != tramp_base);
                        self.components[c].code.push(r);
                    }
                }
                true
            }
            Err(_) => {
                self.terminate(tid, entry, pkru, format!("runtime rewrite failed at {entry:#x}"));
                false
            }
        }
    }

    pub fn deliver_signal(&mut self, tid: usize, handler: u64) {
        if self.threads[tid].status != ThreadStatus::Runnable {
            return;
        }
        let t = &mut self.threads[tid];
        t.signal_frames.push(t.state.clone());
        let sp = (t.state.reg(Reg::Rsp) - SIGNAL_GAP) & !0xF;
        t.state.set_reg(Reg::Rsp, sp);
        t.state.rip = handler;
        t.state.pkru = SIGNAL_PKRU;
        let pkru = t.state.pkru;
        self.event(tid, handler, pkru, EventKind::Signal { handler });
        if self.config.domains.mode == IsolationMode::Full {
            let leaks = (1..self.components.len()).any(|d| pkru_allows(pkru, d as u8, PkAccess::Read));
            if leaks {
                self.violation(tid, handler, pkru, Violation::SignalResetFailed { thread: tid, pkru });
            }
        }
    }

    /// Serves an allocation from the pool of the most privileged domain
    /// `pkru` can write.
    pub fn domain_alloc(&mut self, pkru: u32, size: u64) -> Result<u64, SimError> {
        let c = (0..self.components.len())
            .rev()
            .find(|c| pkru_allows(pkru, *c as u8, PkAccess::Write))
            .ok_or(SimError::OutOfPool(0))?;
        let end = pool_base(c) + self.config.pool_size;
        let at = self.pool_next[c];
        let next = (at + size.max(1) + 15) & !15;
        if next > end {
            return Err(SimError::OutOfPool(c));
        }
        self.pool_next[c] = next;
        Ok(at)
    }

    fn check_dep(&mut self, tid: usize, pc: u64, pkru: u32, pages: &[u64]) {
        for p in pages {
            let bad = self.pages.get(p).is_some_and(|pg| {
                (pg.perms.w && pg.perms.x) || (matches!(pg.state, PageState::Pending) && pg.perms.x)
            });
            if bad {
                self.violation(tid, pc, pkru, Violation::WriteAndExec { page: p * PAGE });
            }
        }
    }

    /// Grants execute permission on behalf of a trusted caller.
    fn enable_exec(&mut self, tid: usize, pc: u64, pkru: u32, nr: u64, pages: &[u64]) -> i64 {
        if !self.caller_trusted(pkru) {
            self.violation(tid, pc, pkru, Violation::InterceptBypassed { nr, pkru });
        }
        match self.config.intercept {
            InterceptMode::Eager => {
                let pass = self.config.bypass_inspection || self.inspect_pages(pages).pass;
                for p in pages {
                    self.event(tid, pc, pkru, EventKind::Inspected { page: p * PAGE, pass });
                }
                if !pass {
                    return -EACCES;
                }
                for p in pages {
                    let pg = self.pages.get_mut(p).unwrap();
                    pg.perms = Perms { r: true, w: false, x: true };
                    pg.state = PageState::Normal;
                }
            }
            InterceptMode::OnDemand => {
                for p in pages {
                    let pg = self.pages.get_mut(p).unwrap();
                    pg.perms = Perms::R;
                    pg.state = PageState::Pending;
                }
            }
        }
        0
    }

    fn sys_mmap(&mut self, tid: usize, pc: u64, pkru: u32, args: [u64; 4]) -> i64 {
        let (addr, len, prot) = (args[0], args[1], args[2]);
        if len == 0 || addr % PAGE != 0 {
            return -EINVAL;
        }
        if prot & PROT_WRITE != 0 && prot & PROT_EXEC != 0 {
            return -EACCES;
        }
        let trusted = self.caller_trusted(pkru);
        if prot & PROT_EXEC != 0 && !trusted {
            self.event(tid, pc, pkru, EventKind::InterceptDenied { nr: SYS_MMAP });
            return -EPERM;
        }
        let npages = len.div_ceil(PAGE);
        let base = if addr == 0 {
            let a = self.mmap_next;
            self.mmap_next += (npages + 1) * PAGE;
            a
        } else {
            addr
        };
        let idx: Vec<u64> = (page_of(base)..page_of(base) + npages).collect();
        if idx.iter().any(|p| self.pages.contains_key(p)) {
            return -EINVAL;
        }
        self.map(base, npages * PAGE, 0, Perms::from_prot(prot & !PROT_EXEC));
        if prot & PROT_EXEC != 0 {
            let r = self.enable_exec(tid, pc, pkru, SYS_MMAP, &idx);
            if r < 0 {
                for p in &idx {
                    self.pages.remove(p);
                }
                return r;
            }
        }
        self.check_dep(tid, pc, pkru, &idx);
        base as i64
    }

    fn sys_mprotect(&mut self, tid: usize, pc: u64, pkru: u32, nr: u64, args: [u64; 4], pkey: Option<u64>) -> i64 {
        let (addr, len, prot) = (args[0], args[1], args[2]);
        if len == 0 || addr % PAGE != 0 {
            return -EINVAL;
        }
        let idx: Vec<u64> = (page_of(addr)..page_of(addr + len - 1) + 1).collect();
        if idx.iter().any(|p| !self.pages.contains_key(p)) {
            return -ENOMEM;
        }
        if pkey.is_some_and(|k| k >= self.components.len() as u64) {
            return -EINVAL;
        }
        if prot & PROT_WRITE != 0 && prot & PROT_EXEC != 0 {
            return -EACCES;
        }
        let trusted = self.caller_trusted(pkru);
        let touches_trusted = idx.iter().any(|p| self.pages[p].domain != 0) || pkey.is_some_and(|k| k != 0);
        if !trusted && (touches_trusted || prot & PROT_EXEC != 0) {
            self.event(tid, pc, pkru, EventKind::InterceptDenied { nr });
            return -EPERM;
        }
        for p in &idx {
            let pg = self.pages.get_mut(p).unwrap();
            if let PageState::Trap(st) = &pg.state {
                pg.data = Arc::new(st.reserve.clone());
            }
            pg.state = PageState::Normal;
            pg.perms = Perms::from_prot(prot & !PROT_EXEC);
            if let Some(k) = pkey {
                pg.domain = k as u8;
            }
        }
        if prot & PROT_EXEC != 0 {
            let r = self.enable_exec(tid, pc, pkru, nr, &idx);
            if r < 0 {
                return r;
            }
        }
        self.check_dep(tid, pc, pkru, &idx);
        0
    }

    fn handle_syscall(&mut self, tid: usize, state: &mut MachineState) -> SyscallAction {
        let nr = state.reg(Reg::Rax);
        let args = [state.reg(Reg::Rdi), state.reg(Reg::Rsi), state.reg(Reg::Rdx), state.reg(Reg::R10)];
        let pc = state.rip - 2;
        let pkru = state.pkru;
        self.last_syscall_pc = Some(pc);
        let log = |m: &mut Machine, ret: i64| {
            m.syscall_log.push((tid, nr, args, ret));
            m.event(tid, pc, pkru, EventKind::Syscall { nr, args, ret });
        };
        if self.config.deny_untrusted.contains(&nr) && !self.caller_trusted(pkru) {
            self.event(tid, pc, pkru, EventKind::InterceptDenied { nr });
            log(self, -EPERM);
            state.set_reg(Reg::Rax, -EPERM as u64);
            return SyscallAction::Continue;
        }
        let ret = match nr {
            SYS_EXIT | SYS_EXIT_GROUP => {
                let code = args[0] as i64;
                log(self, 0);
                self.threads[tid].status = ThreadStatus::Exited(code);
                self.event(tid, pc, pkru, EventKind::ThreadExit { code });
                let others = self.threads.iter().any(|t| t.status == ThreadStatus::Runnable && t.id != tid);
                if (nr == SYS_EXIT_GROUP || !others) && self.status == ProcessStatus::Running {
                    self.status = ProcessStatus::Exited(code);
                }
                return SyscallAction::Exit(code);
            }
            SYS_WRITE => {
                let mut buf = Vec::with_capacity(args[2] as usize);
                let mut ok = true;
                for k in 0..args[2] {
                    match self.read_checked(tid, pc, state, args[1].wrapping_add(k), 1) {
                        Ok(v) => buf.push(v as u8),
                        Err(_) => {
                            ok = false;
                            break;
                        }
                    }
                }
                if ok {
                    self.output.extend_from_slice(&buf);
                    args[2] as i64
                } else {
                    -EFAULT
                }
            }
            SYS_MMAP => self.sys_mmap(tid, pc, pkru, args),
            SYS_MPROTECT => self.sys_mprotect(tid, pc, pkru, nr, args, None),
            SYS_PKEY_MPROTECT => self.sys_mprotect(tid, pc, pkru, nr, args, Some(args[3])),
            SYS_RT_SIGRETURN => match self.threads[tid].signal_frames.pop() {
                Some(frame) => {
                    log(self, 0);
                    *state = frame;
                    self.event(tid, pc, pkru, EventKind::SigReturn);
                    return SyscallAction::Continue;
                }
                None => -EINVAL,
            },
            ALLOC_SYSCALL => match self.domain_alloc(pkru, args[0]) {
                Ok(a) => a as i64,
                Err(_) => -ENOMEM,
            },
            _ => 0,
        };
        log(self, ret);
        state.set_reg(Reg::Rax, ret as u64);
        SyscallAction::Continue
    }

    /// Permission-checked read used by the interpreter and by syscalls.
    fn read_checked(&mut self, tid: usize, pc: u64, state: &MachineState, addr: u64, size: usize) -> Result<u64, Fault> {
        self.check_access(tid, pc, state, addr, size, PkAccess::Read)?;
        let bytes = self.peek(addr, size);
        Ok(bytes.iter().rev().fold(0, |v, b| v << 8 | *b as u64))
    }

    fn check_access(
        &mut self,
        tid: usize,
        pc: u64,
        state: &MachineState,
        addr: u64,
        size: usize,
        access: PkAccess,
    ) -> Result<(), Fault> {
        let fault_kind = match access {
            PkAccess::Read => Access::Read,
            PkAccess::Write => Access::Write,
        };
        let mut domains = Vec::new();
        for k in 0..size as u64 {
            let a = addr.wrapping_add(k);
            let Some(pg) = self.pages.get(&page_of(a)) else { return Err(Fault::Unmapped { addr: a }) };
            let perm = match access {
                PkAccess::Read => pg.perms.r,
                PkAccess::Write => pg.perms.w,
            };
            if !perm || !pkru_allows(state.pkru, pg.domain, access) {
                return Err(Fault::Denied { addr: a, access: fault_kind });
            }
            if !domains.contains(&pg.domain) {
                domains.push(pg.domain);
            }
        }
        for d in domains {
            if self.config.tracing {
                let kind = match access {
                    PkAccess::Read => EventKind::Load { addr, size, domain: d },
                    PkAccess::Write => EventKind::Store { addr, size, domain: d },
                };
                self.event(tid, pc, state.pkru, kind);
            }
            if self.config.domains.is_protected(d, access) && !self.pc_may_access(pc, d, access) {
                let v = Violation::ProtectedAccessOutsideTrusted { pc, addr, domain: d, access };
                self.violation(tid, pc, state.pkru, v);
            }
        }
        Ok(())
    }

    /// Makes the page holding `addr` executable if inspection allows.
    fn prepare_exec(&mut self, tid: usize, state: &MachineState, addr: u64, first: bool) -> Result<(), Fault> {
        let idx = page_of(addr);
        let denied = Fault::Denied { addr, access: Access::Exec };
        let Some(pg) = self.pages.get(&idx) else { return Err(Fault::Unmapped { addr }) };
        if matches!(pg.state, PageState::Pending) && !self.on_exec_fault(tid, idx, addr, state.pkru) {
            return Err(denied);
        }
        let pg = &self.pages[&idx];
        if !pg.perms.x {
            return Err(denied);
        }
        if let PageState::Trap(st) = &pg.state {
            let fresh = pg.data[(addr % PAGE) as usize] == TRAP_BYTE && !st.occupied.iter().any(|r| r.contains(&addr));
            if first && fresh && !self.trap_entry(tid, idx, addr, state.pkru) {
                return Err(denied);
            }
        }
        Ok(())
    }

    /// Runs one instruction of thread `tid`, then the invariant monitors.
    pub fn step_thread(&mut self, tid: usize) -> StepOutcome {
        let due: Vec<u64> = self
            .signals
            .iter()
            .filter(|(at, t, _)| *t == tid && *at <= self.steps)
            .map(|(_, _, h)| *h)
            .collect();
        self.signals.retain(|(at, t, _)| !(*t == tid && *at <= self.steps));
        for h in due {
            self.deliver_signal(tid, h);
        }
        let others: Vec<u32> = self.threads.iter().map(|t| t.state.pkru).collect();
        let mut state = std::mem::replace(&mut self.threads[tid].state, MachineState::new(0));
        let pc = state.rip;
        let before = state.pkru;
        let instr = if self.config.tracing { self.peek_instr(pc).map(|d| d.instr.to_string()) } else { None };

        let outcome = step(&mut state, &mut StepEnv { m: self, tid, pc });
        let after = state.pkru;
        let next = state.rip;
        let rsp = state.reg(Reg::Rsp);
        self.threads[tid].state = state;

        if let Some(instr) = instr {
            self.event(tid, pc, after, EventKind::Step { instr });
        }
        if !matches!(outcome, StepOutcome::Fault(_)) {
            if let Some(pg) = self.pages.get(&page_of(pc)) {
                let uninspected = match &pg.state {
                    PageState::Pending => true,
                    PageState::Trap(st) => !st.occupied.iter().any(|r| r.contains(&pc)),
                    PageState::Normal => !pg.perms.x,
                };
                if uninspected {
                    self.violation(tid, pc, after, Violation::PendingExecuted { pc });
                }
            }
        }
        if before != after {
            self.event(tid, pc, after, EventKind::PkruChange { from: before, to: after });
            let dc = &self.config.domains;
            let granted = (1..dc.components as u8).any(|d| {
                [PkAccess::Read, PkAccess::Write].into_iter().any(|a| {
                    dc.is_protected(d, a) && !pkru_allows(before, d, a) && pkru_allows(after, d, a)
                })
            });
            // sigreturn restoring a kernel-held frame is not a user grant
            let by_user = self
                .peek_instr(pc)
                .is_some_and(|d| matches!(d.instr.mnemonic, Mnemonic::Wrpkru | Mnemonic::Xrstor));
            if granted && by_user && !self.entries().contains(next) && !self.guard_at(next) {
                self.violation(tid, pc, after, Violation::GrantWithoutEntry { pc, next, pkru: after });
            }
        }
        for (other, pk) in others.iter().enumerate() {
            if other != tid && self.threads[other].state.pkru != *pk {
                self.violation(tid, pc, after, Violation::CrossThreadPkru { thread: tid, other });
            }
        }
        if self.config.check_private_stacks {
            if let Some(ts) = self.threads[tid].trusted_stack.clone() {
                if self.component_at(pc).is_some_and(|c| c > 0) && !ts.contains(&rsp) {
                    self.violation(tid, pc, after, Violation::UntrustedStack { thread: tid, pc, rsp });
                }
            }
        }
        if let StepOutcome::Fault(f) = &outcome {
            self.event(tid, pc, after, EventKind::Fault(f.clone()));
            self.threads[tid].status = ThreadStatus::Faulted(f.clone());
            if !self.config.continue_on_fault {
                self.terminate(tid, pc, after, f.to_string());
            } else if self.threads.iter().all(|t| t.status != ThreadStatus::Runnable) {
                self.terminate(tid, pc, after, "all threads faulted".into());
            }
        }
        self.steps += 1;
        outcome
    }

    fn runnable(&self) -> Vec<usize> {
        self.threads.iter().filter(|t| t.status == ThreadStatus::Runnable).map(|t| t.id).collect()
    }

    /// Runs the seeded scheduler for at most `max_steps` instructions.
    pub fn run(&mut self, max_steps: u64) -> ProcessStatus {
        let limit = self.steps + max_steps;
        while self.status == ProcessStatus::Running && self.steps < limit {
            let ready = self.runnable();
            if ready.is_empty() {
                let code = self.threads.iter().rev().find_map(|t| match t.status {
                    ThreadStatus::Exited(c) => Some(c),
                    _ => None,
                });
                self.status = ProcessStatus::Exited(code.unwrap_or(0));
                break;
            }
            let switch = !ready.contains(&self.current) || self.rng.gen_ratio(1, self.config.yield_one_in.max(1));
            if switch {
                let pos = ready.iter().position(|t| *t > self.current).unwrap_or(0);
                self.current = ready[pos];
            }
            self.step_thread(self.current);
        }
        self.status.clone()
    }

    /// Trace as line-delimited records.
    pub fn trace_text(&self) -> String {
        self.trace.iter().map(|e| format!("{e}\n")).collect()
    }
}

struct StepEnv<'a> {
    m: &'a mut Machine,
    tid: usize,
    pc: u64,
}

impl Env for StepEnv<'_> {
    fn fetch(&mut self, state: &MachineState, addr: u64, buf: &mut [u8]) -> Result<usize, Fault> {
        let mut n = 0;
        while n < buf.len() {
            let a = addr + n as u64;
            if let Err(f) = self.m.prepare_exec(self.tid, state, a, n == 0) {
                if n == 0 {
                    return Err(f);
                }
                break;
            }
            let off = (a % PAGE) as usize;
            let take = (PAGE_SIZE - off).min(buf.len() - n);
            buf[n..n + take].copy_from_slice(&self.m.pages[&page_of(a)].data[off..off + take]);
            n += take;
        }
        Ok(n)
    }

    fn load(&mut self, state: &MachineState, addr: u64, size: usize) -> Result<u64, Fault> {
        self.m.read_checked(self.tid, self.pc, state, addr, size)
    }

    fn store(&mut self, state: &MachineState, addr: u64, size: usize, value: u64) -> Result<(), Fault> {
        self.m.check_access(self.tid, self.pc, state, addr, size, PkAccess::Write)?;
        let bytes: Vec<u8> = (0..size).map(|k| (value >> (8 * k)) as u8).collect();
        self.m.write_raw(addr, &bytes);
        Ok(())
    }

    fn syscall(&mut self, state: &mut MachineState) -> SyscallAction {
        self.m.handle_syscall(self.tid, state)
    }
}
