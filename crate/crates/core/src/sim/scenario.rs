//! Line-oriented scenario files.
//!
//! ```text
//! # configuration
//! seed 7
//! mode full                 # or: integrity
//! intercept eager           # or: on-demand
//! domains 2
//! trust 0 1                 # component 0 trusts component 1
//! rewrite-on-fault on
//! deny-untrusted 41 42
//! new-thread-pkru 0x3
//! continue-on-fault on
//! inspect off              # only for checking the monitors
//! # image
//! sample                    # the built-in protected program
//! code 0 0x700000 31c0c3    # component, address, hex bytes (r-x)
//! data 0 0x701000 rw 0000   # component, address, perms, hex bytes
//! zero 1 0x702000 rw 4096   # component, address, perms, length
//! entry 1 0x500000
//! main 0 0x400000
//! # actions, in order
//! thread 0x700000 0x3       # spawn; PKRU defaults to the new-thread value
//! signal 10 0 0x700010      # at step 10 deliver to thread 0
//! jump 0 0x700000           # redirect thread 0
//! poke 0x701000 90          # host write, ignores permissions
//! run 1000
//! # checks, evaluated after all actions
//! expect exit 0
//! expect terminated
//! expect faulted 0
//! expect output "ok\n"
//! expect mem 0x701000 2a00
//! expect pkru 0 0x3
//! expect reg 0 rax 0x2a
//! expect violation
//! sweep                     # attack every executable byte of the image
//! sweep 0x500000 0x500100 1000
//! ```

use std::fmt;
use std::ops::Range;

use thiserror::Error;

use super::machine::{InterceptMode, Machine, Perms, ProcessStatus, SimConfig, SimError, SimImage, SimSegment, ThreadStatus};
use super::sweep::{attack_sweep, default_presets, SweepReport, ATTACK_BUDGET};
use super::{sample, DomainConfig, IsolationMode};
use crate::x86::{OpSize, Reg};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("line {line}: {msg}")]
pub struct ScenarioError {
    pub line: usize,
    pub msg: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Action {
    Run(u64),
    Spawn { rip: u64, pkru: Option<u32> },
    /// Deliver at the given global step.
    Signal { step: u64, thread: usize, handler: u64 },
    Jump { thread: usize, rip: u64 },
    Poke { addr: u64, bytes: Vec<u8> },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Expectation {
    Exit(i64),
    Terminated,
    Faulted(usize),
    Output(Vec<u8>),
    Mem { addr: u64, bytes: Vec<u8> },
    Pkru { thread: usize, value: u32 },
    Reg { thread: usize, reg: Reg, value: u64 },
    /// At least one invariant violation is recorded.
    Violation,
}

#[derive(Debug, Clone, Default)]
pub struct Scenario {
    pub config: SimConfig,
    pub image: SimImage,
    pub actions: Vec<Action>,
    /// Expectations with their line numbers.
    pub expectations: Vec<(usize, Expectation)>,
    /// `None` covers every executable page of the image.
    pub sweeps: Vec<(Option<Range<u64>>, u64)>,
}

#[derive(Debug)]
pub struct ScenarioOutcome {
    pub machine: Machine,
    pub failures: Vec<String>,
    pub sweep: Option<SweepReport>,
}

impl ScenarioOutcome {
    pub fn passed(&self) -> bool {
        self.failures.is_empty() && self.sweep.as_ref().is_none_or(|s| s.is_clean())
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Action::Run(n) => write!(f, "run {n}"),
            Action::Spawn { rip, pkru: Some(p) } => write!(f, "thread {rip:#x} {p:#x}"),
            Action::Spawn { rip, pkru: None } => write!(f, "thread {rip:#x}"),
            Action::Signal { step, thread, handler } => write!(f, "signal {step} {thread} {handler:#x}"),
            Action::Jump { thread, rip } => write!(f, "jump {thread} {rip:#x}"),
            Action::Poke { addr, bytes } => write!(f, "poke {addr:#x} {}", hex(bytes)),
        }
    }
}

fn hex(b: &[u8]) -> String {
    b.iter().map(|x| format!("{x:02x}")).collect()
}

fn err(line: usize, msg: impl Into<String>) -> ScenarioError {
    ScenarioError { line, msg: msg.into() }
}

fn num(line: usize, s: &str) -> Result<u64, ScenarioError> {
    let r = match s.strip_prefix("0x") {
        Some(h) => u64::from_str_radix(&h.replace('_', ""), 16),
        None => s.replace('_', "").parse(),
    };
    r.map_err(|_| err(line, format!("bad number `{s}`")))
}

fn signed(line: usize, s: &str) -> Result<i64, ScenarioError> {
    match s.strip_prefix('-') {
        Some(rest) => Ok(-(num(line, rest)? as i64)),
        None => Ok(num(line, s)? as i64),
    }
}

fn bytes(line: usize, toks: &[&str]) -> Result<Vec<u8>, ScenarioError> {
    let s: String = toks.concat();
    if !s.len().is_multiple_of(2) {
        return Err(err(line, "odd number of hex digits"));
    }
    (0..s.len())
        .step_by(2)
        .map(|i| u8::from_str_radix(&s[i..i + 2], 16).map_err(|_| err(line, format!("bad hex `{}`", &s[i..i + 2]))))
        .collect()
}

fn on_off(line: usize, s: &str) -> Result<bool, ScenarioError> {
    match s {
        "on" | "true" | "yes" => Ok(true),
        "off" | "false" | "no" => Ok(false),
        _ => Err(err(line, format!("expected on/off, got `{s}`"))),
    }
}

fn quoted(line: usize, rest: &str) -> Result<Vec<u8>, ScenarioError> {
    let inner = rest
        .trim()
        .strip_prefix('"')
        .and_then(|r| r.strip_suffix('"'))
        .ok_or_else(|| err(line, "expected a quoted string"))?;
    let mut out = Vec::new();
    let mut chars = inner.chars();
    while let Some(c) = chars.next() {
        if c != '\\' {
            let mut buf = [0; 4];
            out.extend_from_slice(c.encode_utf8(&mut buf).as_bytes());
            continue;
        }
        match chars.next() {
            Some('n') => out.push(b'\n'),
            Some('t') => out.push(b'\t'),
            Some('0') => out.push(0),
            Some('\\') => out.push(b'\\'),
            Some('"') => out.push(b'"'),
            other => return Err(err(line, format!("bad escape {other:?}"))),
        }
    }
    Ok(out)
}

fn reg(line: usize, s: &str) -> Result<Reg, ScenarioError> {
    Reg::ALL.into_iter().find(|r| r.name(OpSize::Qword) == s).ok_or_else(|| err(line, format!("unknown register `{s}`")))
}

fn want(line: usize, toks: &[&str], n: usize) -> Result<(), ScenarioError> {
    if toks.len() < n {
        return Err(err(line, format!("`{}` needs {} argument(s)", toks[0], n - 1)));
    }
    Ok(())
}

impl Scenario {
    pub fn parse(text: &str) -> Result<Scenario, ScenarioError> {
        let mut sc = Scenario::default();
        let mut domains = 2;
        let mut trust: Option<Vec<(usize, usize)>> = None;
        let mut mode = IsolationMode::Full;
        for (k, raw) in text.lines().enumerate() {
            let line = k + 1;
            let content = match raw.find('#') {
                Some(i) if !raw[..i].contains('"') => &raw[..i],
                _ => raw,
            };
            let toks: Vec<&str> = content.split_whitespace().collect();
            let Some(&head) = toks.first() else { continue };
            let arity = |n| want(line, &toks, n);
            match head {
                "seed" => {
                    arity(2)?;
                    sc.config.seed = num(line, toks[1])?;
                }
                "mode" => {
                    arity(2)?;
                    mode = match toks[1] {
                        "full" => IsolationMode::Full,
                        "integrity" => IsolationMode::IntegrityOnly,
                        m => return Err(err(line, format!("unknown mode `{m}`"))),
                    };
                }
                "intercept" => {
                    arity(2)?;
                    sc.config.intercept = match toks[1] {
                        "eager" => InterceptMode::Eager,
                        "on-demand" => InterceptMode::OnDemand,
                        m => return Err(err(line, format!("unknown interception `{m}`"))),
                    };
                }
                "domains" => {
                    arity(2)?;
                    domains = num(line, toks[1])? as usize;
                }
                "trust" => {
                    arity(3)?;
                    let pair = (num(line, toks[1])? as usize, num(line, toks[2])? as usize);
                    trust.get_or_insert_with(Vec::new).push(pair);
                }
                "rewrite-on-fault" => {
                    arity(2)?;
                    sc.config.rewrite_on_fault = on_off(line, toks[1])?;
                }
                "inspect" => {
                    arity(2)?;
                    sc.config.bypass_inspection = !on_off(line, toks[1])?;
                }
                "continue-on-fault" => {
                    arity(2)?;
                    sc.config.continue_on_fault = on_off(line, toks[1])?;
                }
                "deny-untrusted" => {
                    for t in &toks[1..] {
                        sc.config.deny_untrusted.insert(num(line, t)?);
                    }
                }
                "new-thread-pkru" => {
                    arity(2)?;
                    sc.config.new_thread_pkru = Some(num(line, toks[1])? as u32);
                }
                "sample" => {
                    let s = sample::protected_image();
                    sc.image.segments.extend(s.image.segments);
                    sc.image.entries.extend(s.image.entries);
                    sc.image.main = s.image.main;
                }
                "code" => {
                    arity(4)?;
                    let seg = SimSegment {
                        component: num(line, toks[1])? as usize,
                        addr: num(line, toks[2])?,
                        bytes: bytes(line, &toks[3..])?,
                        perms: Perms::RX,
                    };
                    sc.image.segments.push(seg);
                }
                "data" | "zero" => {
                    arity(5)?;
                    let perms = Perms::parse(toks[3]).ok_or_else(|| err(line, format!("bad permissions `{}`", toks[3])))?;
                    let content = if head == "data" {
                        bytes(line, &toks[4..])?
                    } else {
                        vec![0; num(line, toks[4])? as usize]
                    };
                    let seg = SimSegment {
                        component: num(line, toks[1])? as usize,
                        addr: num(line, toks[2])?,
                        bytes: content,
                        perms,
                    };
                    sc.image.segments.push(seg);
                }
                "entry" => {
                    arity(3)?;
                    sc.image.entries.push((num(line, toks[1])? as usize, num(line, toks[2])?));
                }
                "main" => {
                    arity(3)?;
                    sc.image.main = (num(line, toks[1])? as usize, num(line, toks[2])?);
                }
                "thread" => {
                    arity(2)?;
                    let pkru = toks.get(2).map(|t| num(line, t)).transpose()?.map(|v| v as u32);
                    sc.actions.push(Action::Spawn { rip: num(line, toks[1])?, pkru });
                }
                "signal" => {
                    arity(4)?;
                    sc.actions.push(Action::Signal {
                        step: num(line, toks[1])?,
                        thread: num(line, toks[2])? as usize,
                        handler: num(line, toks[3])?,
                    });
                }
                "jump" => {
                    arity(3)?;
                    sc.actions.push(Action::Jump { thread: num(line, toks[1])? as usize, rip: num(line, toks[2])? });
                }
                "poke" => {
                    arity(3)?;
                    sc.actions.push(Action::Poke { addr: num(line, toks[1])?, bytes: bytes(line, &toks[2..])? });
                }
                "run" => {
                    arity(2)?;
                    sc.actions.push(Action::Run(num(line, toks[1])?));
                }
                "expect" => {
                    arity(2)?;
                    let e = match toks[1] {
                        "exit" => {
                            arity(3)?;
                            Expectation::Exit(signed(line, toks[2])?)
                        }
                        "terminated" => Expectation::Terminated,
                        "faulted" => {
                            arity(3)?;
                            Expectation::Faulted(num(line, toks[2])? as usize)
                        }
                        "output" => {
                            let at = content.find("output").unwrap() + "output".len();
                            Expectation::Output(quoted(line, &content[at..])?)
                        }
                        "mem" => {
                            arity(4)?;
                            Expectation::Mem { addr: num(line, toks[2])?, bytes: bytes(line, &toks[3..])? }
                        }
                        "pkru" => {
                            arity(4)?;
                            Expectation::Pkru { thread: num(line, toks[2])? as usize, value: num(line, toks[3])? as u32 }
                        }
                        "reg" => {
                            arity(5)?;
                            Expectation::Reg {
                                thread: num(line, toks[2])? as usize,
                                reg: reg(line, toks[3])?,
                                value: num(line, toks[4])?,
                            }
                        }
                        "violation" => Expectation::Violation,
                        other => return Err(err(line, format!("unknown expectation `{other}`"))),
                    };
                    sc.expectations.push((line, e));
                }
                "sweep" => {
                    let range = match toks.len() {
                        1 => None,
                        3 | 4 => Some(num(line, toks[1])?..num(line, toks[2])?),
                        _ => return Err(err(line, "usage: sweep [START END [BUDGET]]")),
                    };
                    let budget = toks.get(3).map(|t| num(line, t)).transpose()?.unwrap_or(ATTACK_BUDGET);
                    sc.sweeps.push((range, budget));
                }
                other => return Err(err(line, format!("unknown directive `{other}`"))),
            }
        }
        let trust = trust.unwrap_or_else(|| DomainConfig::star(domains, mode).trust);
        sc.config.domains = DomainConfig { components: domains, trust, mode };
        sc.config.domains.validate().map_err(|e| err(0, e.to_string()))?;
        if sc.image.segments.is_empty() {
            return Err(err(0, "scenario maps no code"));
        }
        Ok(sc)
    }

    /// Builds the machine, performs the actions, checks expectations and
    /// runs the requested sweeps from the initial state.
    pub fn run(&self) -> Result<ScenarioOutcome, SimError> {
        let mut m = Machine::init_lifecycle(&self.image, self.config.clone())?;
        let initial = (!self.sweeps.is_empty()).then(|| m.clone());
        for a in &self.actions {
            match a {
                Action::Run(n) => {
                    m.run(*n);
                }
                Action::Spawn { rip, pkru } => {
                    m.spawn_thread(*rip, *pkru);
                }
                Action::Signal { step, thread, handler } => m.signals.push((*step, *thread, *handler)),
                Action::Jump { thread, rip } => {
                    if let Some(t) = m.threads.get_mut(*thread) {
                        t.state.rip = *rip;
                    }
                }
                Action::Poke { addr, bytes } => {
                    let mapped = (0..bytes.len() as u64).all(|k| m.pages.contains_key(&((addr + k) / 4096)));
                    if mapped {
                        m.write_raw(*addr, bytes);
                    }
                }
            }
        }
        let mut failures = Vec::new();
        let wants_violation = self.expectations.iter().any(|(_, e)| *e == Expectation::Violation);
        if !wants_violation {
            if let Some(first) = m.trace.iter().find(|e| matches!(e.kind, super::EventKind::Violation(_))) {
                failures.push(format!("invariant violated: {first}"));
            }
        }
        for (line, e) in &self.expectations {
            if let Some(msg) = check(&m, e) {
                failures.push(format!("line {line}: {msg}"));
            }
        }
        let sweep = initial.map(|init| {
            let mut total = SweepReport::default();
            let stack = init.threads.first().map(|t| t.stack.clone()).unwrap_or(0..0);
            let presets = default_presets(self.config.seed, stack);
            for (range, budget) in &self.sweeps {
                let ranges: Vec<Range<u64>> = match range {
                    Some(r) => vec![r.clone()],
                    None => self.image.segments.iter().filter(|s| s.perms.x).map(|s| {
                        let start = s.addr & !0xFFF;
                        start..(s.addr + s.bytes.len() as u64 + 0xFFF) & !0xFFF
                    }).collect(),
                };
                for r in ranges {
                    let rep = attack_sweep(&init, r, &presets, *budget);
                    total.offsets += rep.offsets;
                    total.runs += rep.runs;
                    total.budget = *budget;
                    total.budget_exhausted += rep.budget_exhausted;
                    total.guarded_runs += rep.guarded_runs;
                    total.guarded_exits += rep.guarded_exits;
                    total.findings.extend(rep.findings);
                }
            }
            total
        });
        Ok(ScenarioOutcome { machine: m, failures, sweep })
    }
}

fn check(m: &Machine, e: &Expectation) -> Option<String> {
    match e {
        Expectation::Exit(code) => {
            (m.status != ProcessStatus::Exited(*code)).then(|| format!("expected exit {code}, process is {:?}", m.status))
        }
        Expectation::Terminated => (!matches!(m.status, ProcessStatus::Terminated(_)))
            .then(|| format!("expected termination, process is {:?}", m.status)),
        Expectation::Faulted(t) => match m.threads.get(*t).map(|t| &t.status) {
            Some(ThreadStatus::Faulted(_)) => None,
            s => Some(format!("expected thread {t} to fault, status {s:?}")),
        },
        Expectation::Output(want) => (m.output != *want)
            .then(|| format!("expected output {:?}, got {:?}", String::from_utf8_lossy(want), String::from_utf8_lossy(&m.output))),
        Expectation::Mem { addr, bytes } => {
            let got = m.peek(*addr, bytes.len());
            (got != *bytes).then(|| format!("memory at {addr:#x} is {}, expected {}", hex(&got), hex(bytes)))
        }
        Expectation::Pkru { thread, value } => match m.threads.get(*thread) {
            Some(t) if t.state.pkru == *value => None,
            t => Some(format!("thread {thread} pkru {:?}, expected {value:#x}", t.map(|t| t.state.pkru))),
        },
        Expectation::Reg { thread, reg, value } => match m.threads.get(*thread) {
            Some(t) if t.state.reg(*reg) == *value => None,
            t => Some(format!("thread {thread} {} is {:#x?}, expected {value:#x}", reg.name(OpSize::Qword), t.map(|t| t.state.reg(*reg)))),
        },
        Expectation::Violation => m.violations.is_empty().then(|| "expected an invariant violation".to_string()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sample_scenario_passes() {
        let sc = Scenario::parse(
            "sample\nrun 10000\nexpect exit 0\nexpect output \"ok\\n\"\nexpect mem 0x21000000 05\nexpect pkru 0 0x3\nsweep 0x500000 0x500060 500\n",
        )
        .unwrap();
        let out = sc.run().unwrap();
        assert!(out.passed(), "{:?} {:?}", out.failures, out.sweep);
        assert_eq!(out.sweep.unwrap().offsets, 0x60);
    }

    #[test]
    fn failed_expectation_names_its_line() {
        let sc = Scenario::parse("sample\nrun 10000\n\nexpect exit 3\n").unwrap();
        let out = sc.run().unwrap();
        assert!(!out.passed());
        assert!(out.failures[0].starts_with("line 4:"), "{:?}", out.failures);
    }

    #[test]
    fn violation_is_a_failure_unless_expected() {
        // bare WRPKRU granting MT, with inspection off
        let text = "code 0 0x700000 31c9 31d2 b80f000000 0f01ef 90 c3\nmain 0 0x700000\nrun 10\n";
        let sc = Scenario::parse(text).unwrap();
        let mut cfg = sc.clone();
        cfg.config.bypass_inspection = true;
        let out = cfg.run().unwrap();
        assert!(out.failures[0].contains("event=violation"), "{:?}", out.failures);
        assert!(matches!(sc.run(), Err(SimError::InspectionFailed(0x700009))));
    }

    #[test]
    fn syntax_errors_carry_line_numbers() {
        let e = Scenario::parse("sample\n\nfrobnicate 1\n").unwrap_err();
        assert_eq!(e.line, 3);
        assert_eq!(Scenario::parse("sample\nrun\n").unwrap_err().line, 2);
        assert_eq!(Scenario::parse("code 0 0x1000 0f0\n").unwrap_err().line, 1);
        assert_eq!(Scenario::parse("sample\nexpect reg 0 rzz 1\n").unwrap_err().line, 2);
        assert!(Scenario::parse("domains 3\ntrust 0 1\ntrust 1 2\nsample\n").is_err());
    }

    #[test]
    fn directives_parse() {
        let sc = Scenario::parse(
            "seed 7\nmode integrity\nintercept on-demand\ndomains 3\nrewrite-on-fault on\ndeny-untrusted 41 42\n\
             new-thread-pkru 0x3\ncontinue-on-fault on\nsample\nzero 2 0x702000 rw 16\ndata 0 0x703000 r-- 2a\n\
             thread 0x500000\nsignal 10 0 0x400000\njump 0 0x400000\npoke 0x401000 90\nrun 5\n\
             expect terminated\nexpect faulted 1\nexpect reg 0 rax 0x2a\nexpect violation\nsweep\n",
        )
        .unwrap();
        assert_eq!(sc.config.seed, 7);
        assert_eq!(sc.config.domains, DomainConfig::star(3, IsolationMode::IntegrityOnly));
        assert_eq!(sc.config.deny_untrusted.len(), 2);
        assert_eq!(sc.actions.len(), 5);
        assert_eq!(sc.expectations.len(), 4);
        assert_eq!(sc.sweeps, vec![(None, ATTACK_BUDGET)]);
        assert_eq!(sc.image.segments.last().unwrap().perms, Perms::R);
        assert_eq!(sc.actions[1].to_string(), "signal 10 0 0x400000");
    }
}
