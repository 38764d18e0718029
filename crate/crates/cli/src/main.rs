mod report;

use std::io::Write;
use std::ops::Range;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use pkguard::bytescan;
use pkguard::elfio::{self, ImageRewriteError, LoadMode, LoadedImage};
use pkguard::inspector::{EntryPointSet, SafetyClass, TemplateSet, DEFAULT_ENTRY_MARKER};
use pkguard::rewriter::{emit_call_gate, GateKind, LayoutMode, Policy, RewriteError};
use pkguard::sim::{ProcessStatus, Scenario, SimError, ATTACK_BUDGET};
use pkguard::x86::{OpSize, Reg};

use report::{Input, OccurrenceEntry, Report, RewriteSummary, SimReport, SweepSummary};

/// Scan, inspect and rewrite x86-64 binaries for WRPKRU/XRSTOR
/// occurrences, and run isolation scenarios in a simulator.
#[derive(Parser)]
#[command(name = "pkguard", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum OnData {
    Ignore,
    Warn,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum GateMode {
    Enter,
    Exit,
    XrstorGuard,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Layout {
    Reassemble,
    Preserve,
}

#[derive(clap::Args)]
struct ImageArgs {
    input: PathBuf,
    /// Treat the input as one executable segment at address 0.
    #[arg(long)]
    raw: bool,
    /// File with one hexadecimal entry address per line.
    #[arg(long)]
    entries: Option<PathBuf>,
    /// Symbols whose name contains this string are entry points.
    #[arg(long, default_value = DEFAULT_ENTRY_MARKER)]
    entry_marker: String,
    /// PKRU value the SafeB guard compares against.
    #[arg(long, value_parser = parse_hex, default_value = "0x3")]
    disallow: u32,
}

#[derive(Subcommand)]
enum Cmd {
    /// List every WRPKRU and XRSTOR byte pattern.
    Scan {
        input: PathBuf,
        #[arg(long)]
        raw: bool,
    },
    /// Classify occurrences in executable segments; exit 1 if any is unsafe.
    Inspect {
        #[command(flatten)]
        image: ImageArgs,
        /// What to do with occurrences outside executable segments.
        #[arg(long, value_enum, default_value = "warn")]
        on_data: OnData,
        /// File of `START END` hexadecimal ranges treated as data islands.
        #[arg(long)]
        exempt: Option<PathBuf>,
    },
    /// Rewrite unsafe occurrences and verify the result.
    Rewrite {
        #[command(flatten)]
        image: ImageArgs,
        output: PathBuf,
        /// Allow ADD/SUB immediate splits that may change CF/OF.
        #[arg(long)]
        allow_flag_clobber: bool,
        /// Register known dead at every rewrite site (repeatable).
        #[arg(long = "dead-reg", value_parser = parse_reg)]
        dead_regs: Vec<Reg>,
        /// Defaults to `preserve` for ELF and `reassemble` for raw input.
        #[arg(long, value_enum)]
        layout: Option<Layout>,
        /// Address of the appended trampoline region.
        #[arg(long, value_parser = parse_hex64)]
        trampoline_base: Option<u64>,
    },
    /// Emit a call-gate half or the XRSTOR guard.
    Gate {
        #[arg(long, value_enum)]
        mode: GateMode,
        #[arg(long, value_parser = parse_hex, default_value = "0xf")]
        allow: u32,
        #[arg(long, value_parser = parse_hex, default_value = "0x3")]
        disallow: u32,
        /// Print hexadecimal text instead of raw bytes.
        #[arg(long)]
        hex: bool,
    },
    /// Run a simulator scenario.
    Sim {
        scenario: PathBuf,
        #[arg(long, env = "ERIM_FORGE_SEED")]
        seed: Option<u64>,
        /// Write the event trace here, one record per line.
        #[arg(long)]
        trace: Option<PathBuf>,
        /// Also attack every executable byte of the image.
        #[arg(long)]
        sweep: bool,
        /// Steps per attack run.
        #[arg(long, default_value_t = ATTACK_BUDGET)]
        budget: u64,
    },
}

enum Failure {
    Finding(String),
    Usage(String),
    Limitation(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Finding(_) => 1,
            Failure::Usage(_) => 2,
            Failure::Limitation(_) => 3,
        }
    }
}

fn parse_hex(s: &str) -> Result<u32, String> {
    parse_hex64(s).and_then(|v| u32::try_from(v).map_err(|_| format!("{s} does not fit in 32 bits")))
}

fn parse_hex64(s: &str) -> Result<u64, String> {
    let d = s.strip_prefix("0x").or_else(|| s.strip_prefix("0X")).unwrap_or(s);
    u64::from_str_radix(d, 16).map_err(|_| format!("`{s}` is not a hexadecimal number"))
}

fn parse_reg(s: &str) -> Result<Reg, String> {
    Reg::ALL.into_iter().find(|r| r.name(OpSize::Qword) == s).ok_or_else(|| format!("unknown register `{s}`"))
}

fn read(path: &Path) -> Result<Vec<u8>, Failure> {
    std::fs::read(path).map_err(|e| Failure::Usage(format!("cannot read {}: {e}", path.display())))
}

fn write(path: &Path, bytes: &[u8]) -> Result<(), Failure> {
    std::fs::write(path, bytes).map_err(|e| Failure::Usage(format!("cannot write {}: {e}", path.display())))
}

fn load(bytes: &[u8], raw: bool) -> Result<LoadedImage, Failure> {
    let mode = if raw { LoadMode::Raw } else { LoadMode::Elf };
    elfio::load(bytes, mode).map_err(|e| Failure::Usage(e.to_string()))
}

fn entries(args: &ImageArgs, img: &LoadedImage) -> Result<EntryPointSet, Failure> {
    let mut set = img.entries(&args.entry_marker);
    if let Some(p) = &args.entries {
        let text = String::from_utf8_lossy(&read(p)?).into_owned();
        let listed = EntryPointSet::parse_list(&text).map_err(|e| Failure::Usage(format!("{}: {e}", p.display())))?;
        set.extend(&listed);
    }
    Ok(set)
}

fn exempt_ranges(path: &Path) -> Result<Vec<Range<u64>>, Failure> {
    let text = String::from_utf8_lossy(&read(path)?).into_owned();
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let bad = || Failure::Usage(format!("{}:{}: expected `START END`", path.display(), n + 1));
        let mut it = line.split_whitespace().map(parse_hex64);
        match (it.next(), it.next(), it.next()) {
            (Some(Ok(a)), Some(Ok(b)), None) if a <= b => out.push(a..b),
            _ => return Err(bad()),
        }
    }
    Ok(out)
}

fn print_json<T: serde::Serialize>(v: &T) {
    let mut s = serde_json::to_string_pretty(v).expect("report serializes");
    s.push('\n');
    std::io::stdout().write_all(s.as_bytes()).expect("stdout");
}

fn cmd_scan(input: &Path, raw: bool) -> Result<(), Failure> {
    let bytes = read(input)?;
    let img = load(&bytes, raw)?;
    let mut report = Report::new("scan", Input::new(input, &bytes));
    for s in &img.segments {
        report.occurrences.extend(bytescan::scan(&s.data, s.vaddr).iter().map(OccurrenceEntry::bare));
    }
    report.occurrences.sort_by_key(|o| u64::from_str_radix(&o.offset[2..], 16).unwrap_or(0));
    print_json(&report);
    Ok(())
}

fn cmd_inspect(args: &ImageArgs, on_data: OnData, exempt: Option<&Path>) -> Result<(), Failure> {
    let bytes = read(&args.input)?;
    let img = load(&bytes, args.raw)?;
    let entries = entries(args, &img)?;
    let templates = TemplateSet::canonical(args.disallow);
    let exempt = exempt.map(exempt_ranges).transpose()?.unwrap_or_default();
    let r = img.inspect_exempting(&entries, &templates, &exempt);
    let mut report = Report::new("inspect", Input::new(&args.input, &bytes));
    for v in &r.verdicts {
        if v.class == SafetyClass::NonExecutableData {
            if on_data == OnData::Ignore {
                continue;
            }
            eprintln!("warning: {} pattern in data at {:#x}", v.occurrence.kind.name(), v.occurrence.offset);
        }
        report.occurrences.push(OccurrenceEntry::judged(v));
    }
    report.pass = r.pass;
    print_json(&report);
    if r.pass {
        return Ok(());
    }
    let bad: Vec<String> = r.unsafe_verdicts().map(|v| format!("{:#x}", v.occurrence.offset)).collect();
    Err(Failure::Finding(format!("unsafe occurrences at {}", bad.join(", "))))
}

struct RewriteOpts<'a> {
    output: &'a Path,
    allow_flag_clobber: bool,
    dead_regs: Vec<Reg>,
    layout: Option<Layout>,
    trampoline_base: Option<u64>,
}

fn cmd_rewrite(args: &ImageArgs, o: RewriteOpts) -> Result<(), Failure> {
    let bytes = read(&args.input)?;
    let img = load(&bytes, args.raw)?;
    let entries = entries(args, &img)?;
    let templates = TemplateSet::canonical(args.disallow);
    let before = img.inspect(&entries, &templates);

    let layout = o.layout.unwrap_or(if img.raw { Layout::Reassemble } else { Layout::Preserve });
    let policy = Policy {
        allow_flag_clobber: o.allow_flag_clobber,
        dead_regs: o.dead_regs.clone(),
        templates,
        layout: match layout {
            Layout::Reassemble => LayoutMode::Reassemble,
            Layout::Preserve => {
                LayoutMode::PreserveLayout { trampoline_base: o.trampoline_base.unwrap_or(img.default_trampoline_base()) }
            }
        },
        ..Policy::default()
    };
    let out = img.rewrite(&entries, &policy).map_err(|e| match e {
        ImageRewriteError::Rewrite { source: source @ RewriteError::NotInSubset { .. }, .. } => {
            Failure::Limitation(source.to_string())
        }
        e => Failure::Limitation(e.to_string()),
    })?;
    let summary = RewriteSummary {
        rules: out.histogram.iter().map(|(r, n)| (r.to_string(), *n)).collect(),
        trampolines: out.trampolines,
        iterations: out.iterations,
        flags_clobbered: out.flags_clobbered,
    };
    let result = out.bytes;
    write(o.output, &result)?;
    let mut report = Report::new("rewrite", Input::new(&args.input, &bytes));
    report.occurrences = before.verdicts.iter().map(OccurrenceEntry::judged).collect();
    report.rewrite = Some(summary);
    report.output = Some(Input::new(o.output, &result));
    report.pass = true;
    print_json(&report);
    Ok(())
}

fn cmd_gate(mode: GateMode, allow: u32, disallow: u32, hex: bool) -> Result<(), Failure> {
    let kind = match mode {
        GateMode::Enter => GateKind::Enter,
        GateMode::Exit => GateKind::Exit,
        GateMode::XrstorGuard => GateKind::XrstorGuard,
    };
    let bytes = emit_call_gate(kind, allow, disallow);
    let mut stdout = std::io::stdout();
    if hex {
        writeln!(stdout, "{}", hex::encode(&bytes)).expect("stdout");
    } else {
        stdout.write_all(&bytes).expect("stdout");
    }
    Ok(())
}

fn cmd_sim(path: &Path, seed: Option<u64>, trace: Option<&Path>, sweep: bool, budget: u64) -> Result<(), Failure> {
    let bytes = read(path)?;
    let text = String::from_utf8_lossy(&bytes);
    let mut sc = Scenario::parse(&text).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
    if let Some(s) = seed {
        sc.config.seed = s;
    }
    if sweep && sc.sweeps.is_empty() {
        sc.sweeps.push((None, budget));
    }
    sc.config.tracing = trace.is_some();
    let out = sc.run().map_err(|e| match e {
        SimError::InspectionFailed(_) => Failure::Finding(format!("startup aborted: {e}")),
        e => Failure::Usage(format!("{}: {e}", path.display())),
    })?;
    if let Some(t) = trace {
        write(t, out.machine.trace_text().as_bytes())?;
    }
    let m = &out.machine;
    let status = match &m.status {
        ProcessStatus::Running => "running".to_string(),
        ProcessStatus::Exited(c) => format!("exited {c}"),
        ProcessStatus::Terminated(r) => format!("terminated: {r}"),
    };
    let report = SimReport {
        tool: env!("CARGO_BIN_NAME"),
        version: env!("CARGO_PKG_VERSION"),
        command: "sim",
        input: Input::new(path, &bytes),
        seed: sc.config.seed,
        status,
        steps: m.steps,
        output: String::from_utf8_lossy(&m.output).into_owned(),
        syscalls: m.syscall_log.len(),
        violations: m.violations.iter().map(|v| v.to_string()).collect(),
        failures: out.failures.clone(),
        sweep: out.sweep.as_ref().map(|s| SweepSummary {
            offsets: s.offsets,
            runs: s.runs,
            budget: s.budget,
            budget_exhausted: s.budget_exhausted,
            guarded_runs: s.guarded_runs,
            guarded_exits: s.guarded_exits,
            findings: s.findings.iter().map(|f| f.to_string()).collect(),
        }),
        pass: out.passed(),
    };
    print_json(&report);
    if out.passed() {
        return Ok(());
    }
    let first = out
        .failures
        .first()
        .cloned()
        .or_else(|| out.sweep.as_ref().and_then(|s| s.findings.first()).map(|f| format!("attack sweep: {f}")))
        .unwrap_or_default();
    Err(Failure::Finding(first))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.cmd {
        Cmd::Scan { input, raw } => cmd_scan(input, *raw),
        Cmd::Inspect { image, on_data, exempt } => cmd_inspect(image, *on_data, exempt.as_deref()),
        Cmd::Rewrite { image, output, allow_flag_clobber, dead_regs, layout, trampoline_base } => cmd_rewrite(
            image,
            RewriteOpts {
                output,
                allow_flag_clobber: *allow_flag_clobber,
                dead_regs: dead_regs.clone(),
                layout: *layout,
                trampoline_base: *trampoline_base,
            },
        ),
        Cmd::Gate { mode, allow, disallow, hex } => cmd_gate(*mode, *allow, *disallow, *hex),
        Cmd::Sim { scenario, seed, trace, sweep, budget } => cmd_sim(scenario, *seed, trace.as_deref(), *sweep, *budget),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let msg = match &f {
                Failure::Finding(m) | Failure::Usage(m) | Failure::Limitation(m) => m,
            };
            eprintln!("pkguard: {msg}");
            ExitCode::from(f.code())
        }
    }
}
