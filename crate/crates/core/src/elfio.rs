//! ELF64 little-endian images and raw byte images.
//!
//! Only program headers decide what is executable. Section headers are
//! read for symbols when present and may be missing entirely.

use std::collections::BTreeMap;
use std::ops::Range;
use std::path::Path;

use thiserror::Error;

use crate::bytescan::PAGE_SIZE;
use crate::inspector::{inspect_region, EntryPointSet, Evidence, InspectionReport, SafetyClass, TemplateSet};
use crate::rewriter::{inspect_output, rewrite_all, LayoutMode, Policy, RewriteError, Rule};
use crate::sim::Perms;

const EHDR_SIZE: usize = 64;
const PHDR_SIZE: usize = 56;
const SHDR_SIZE: usize = 64;
const SYM_SIZE: usize = 24;
const PT_LOAD: u32 = 1;
const PF_X: u32 = 1;
const PF_W: u32 = 2;
const PF_R: u32 = 4;
const SHT_SYMTAB: u32 = 2;
const SHT_STRTAB: u32 = 3;
const SHT_DYNSYM: u32 = 11;
const ET_EXEC: u16 = 2;
const EM_X86_64: u16 = 62;
const PAGE: u64 = PAGE_SIZE as u64;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ElfError {
    #[error("cannot read {path}: {msg}")]
    Io { path: String, msg: String },
    #[error("file too short for an ELF header")]
    TooShort,
    #[error("not an ELF file (bad magic)")]
    BadMagic,
    #[error("32-bit ELF is not supported")]
    Class32,
    #[error("unknown ELF class {0}")]
    BadClass(u8),
    #[error("big-endian ELF is not supported")]
    BigEndian,
    #[error("unknown ELF data encoding {0}")]
    BadEncoding(u8),
    #[error("malformed ELF: {0}")]
    Malformed(String),
    #[error("segment at {0:#x} is writable and executable")]
    WritableExec(u64),
    #[error("segments at {0:#x} and {1:#x} overlap")]
    Overlap(u64, u64),
    #[error("no executable segment at {0:#x} with the same size")]
    LayoutOverflow(u64),
    #[error("a raw image cannot carry a trampoline region")]
    RawTrampoline,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segment {
    pub file_range: Range<u64>,
    pub vaddr: u64,
    pub memsz: u64,
    pub perms: Perms,
    pub data: Vec<u8>,
}

impl Segment {
    pub fn vrange(&self) -> Range<u64> {
        self.vaddr..self.vaddr + self.memsz
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Symbol {
    pub name: String,
    pub addr: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LoadedImage {
    pub segments: Vec<Segment>,
    pub symbols: Vec<Symbol>,
    pub entry: u64,
    pub raw: bool,
    /// The file as read.
    pub bytes: Vec<u8>,
}

/// A rewritten image file and what the rewriter did to it.
#[derive(Debug, Clone)]
pub struct ImageRewrite {
    pub bytes: Vec<u8>,
    pub entries: EntryPointSet,
    pub histogram: BTreeMap<Rule, usize>,
    pub trampolines: usize,
    pub iterations: usize,
    pub flags_clobbered: bool,
}

#[derive(Debug, Error)]
pub enum ImageRewriteError {
    #[error("segment {segment:#x}: {source}")]
    Rewrite { segment: u64, source: RewriteError },
    #[error("segment {0:#x} is not clean after rewriting")]
    NotClean(u64),
    #[error(transparent)]
    Elf(#[from] ElfError),
    #[error("rewritten output does not pass inspection")]
    Reinspect,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LoadMode {
    Elf,
    Raw,
}

fn u16_at(b: &[u8], off: usize) -> Result<u16, ElfError> {
    b.get(off..off + 2)
        .map(|s| u16::from_le_bytes(s.try_into().unwrap()))
        .ok_or_else(|| ElfError::Malformed(format!("read past end at {off:#x}")))
}

fn u32_at(b: &[u8], off: usize) -> Result<u32, ElfError> {
    b.get(off..off + 4)
        .map(|s| u32::from_le_bytes(s.try_into().unwrap()))
        .ok_or_else(|| ElfError::Malformed(format!("read past end at {off:#x}")))
}

fn u64_at(b: &[u8], off: usize) -> Result<u64, ElfError> {
    b.get(off..off + 8)
        .map(|s| u64::from_le_bytes(s.try_into().unwrap()))
        .ok_or_else(|| ElfError::Malformed(format!("read past end at {off:#x}")))
}

fn slice(b: &[u8], off: u64, len: u64, what: &str) -> Result<Vec<u8>, ElfError> {
    let end = off.checked_add(len).filter(|e| *e <= b.len() as u64);
    match end {
        Some(e) => Ok(b[off as usize..e as usize].to_vec()),
        None => Err(ElfError::Malformed(format!("{what} at {off:#x}+{len:#x} lies outside the file"))),
    }
}

pub fn load_file(path: &Path, mode: LoadMode) -> Result<LoadedImage, ElfError> {
    let bytes = std::fs::read(path).map_err(|e| ElfError::Io { path: path.display().to_string(), msg: e.to_string() })?;
    load(&bytes, mode)
}

pub fn load(bytes: &[u8], mode: LoadMode) -> Result<LoadedImage, ElfError> {
    match mode {
        LoadMode::Raw => Ok(LoadedImage {
            segments: vec![Segment {
                file_range: 0..bytes.len() as u64,
                vaddr: 0,
                memsz: bytes.len() as u64,
                perms: Perms::RX,
                data: bytes.to_vec(),
            }],
            symbols: Vec::new(),
            entry: 0,
            raw: true,
            bytes: bytes.to_vec(),
        }),
        LoadMode::Elf => parse_elf(bytes),
    }
}

fn parse_elf(b: &[u8]) -> Result<LoadedImage, ElfError> {
    if b.len() < 16 {
        return Err(ElfError::TooShort);
    }
    if b[..4] != [0x7F, b'E', b'L', b'F'] {
        return Err(ElfError::BadMagic);
    }
    match b[4] {
        2 => {}
        1 => return Err(ElfError::Class32),
        c => return Err(ElfError::BadClass(c)),
    }
    match b[5] {
        1 => {}
        2 => return Err(ElfError::BigEndian),
        d => return Err(ElfError::BadEncoding(d)),
    }
    if b.len() < EHDR_SIZE {
        return Err(ElfError::TooShort);
    }
    let entry = u64_at(b, 0x18)?;
    let phoff = u64_at(b, 0x20)? as usize;
    let shoff = u64_at(b, 0x28)? as usize;
    let phentsize = u16_at(b, 0x36)? as usize;
    let phnum = u16_at(b, 0x38)? as usize;
    let shentsize = u16_at(b, 0x3A)? as usize;
    let shnum = u16_at(b, 0x3C)? as usize;
    if phnum == 0 {
        return Err(ElfError::Malformed("no program headers".into()));
    }
    if phentsize != PHDR_SIZE {
        return Err(ElfError::Malformed(format!("program header size {phentsize}")));
    }

    let mut segments = Vec::new();
    for k in 0..phnum {
        let h = phoff + k * PHDR_SIZE;
        if u32_at(b, h)? != PT_LOAD {
            continue;
        }
        let flags = u32_at(b, h + 4)?;
        let offset = u64_at(b, h + 8)?;
        let vaddr = u64_at(b, h + 16)?;
        let filesz = u64_at(b, h + 32)?;
        let memsz = u64_at(b, h + 40)?;
        if filesz > memsz {
            return Err(ElfError::Malformed(format!("segment at {vaddr:#x} has filesz > memsz")));
        }
        let perms = Perms { r: flags & PF_R != 0, w: flags & PF_W != 0, x: flags & PF_X != 0 };
        if perms.w && perms.x {
            return Err(ElfError::WritableExec(vaddr));
        }
        let data = slice(b, offset, filesz, "segment")?;
        segments.push(Segment { file_range: offset..offset + filesz, vaddr, memsz, perms, data });
    }
    let mut sorted: Vec<&Segment> = segments.iter().collect();
    sorted.sort_by_key(|s| s.vaddr);
    for w in sorted.windows(2) {
        if w[0].vrange().end > w[1].vaddr {
            return Err(ElfError::Overlap(w[0].vaddr, w[1].vaddr));
        }
    }

    let mut symbols = Vec::new();
    if shoff != 0 && shnum != 0 {
        if shentsize != SHDR_SIZE {
            return Err(ElfError::Malformed(format!("section header size {shentsize}")));
        }
        let sh = |k: usize| shoff + k * SHDR_SIZE;
        for k in 0..shnum {
            let ty = u32_at(b, sh(k) + 4)?;
            if ty != SHT_SYMTAB && ty != SHT_DYNSYM {
                continue;
            }
            let off = u64_at(b, sh(k) + 24)?;
            let size = u64_at(b, sh(k) + 32)?;
            let link = u32_at(b, sh(k) + 40)? as usize;
            if link >= shnum {
                return Err(ElfError::Malformed(format!("symbol table links to section {link}")));
            }
            let stroff = u64_at(b, sh(link) + 24)?;
            let strsize = u64_at(b, sh(link) + 32)?;
            let table = slice(b, off, size, "symbol table")?;
            let strtab = slice(b, stroff, strsize, "string table")?;
            for sym in table.chunks_exact(SYM_SIZE) {
                let name_off = u32::from_le_bytes(sym[..4].try_into().unwrap()) as usize;
                let addr = u64::from_le_bytes(sym[8..16].try_into().unwrap());
                if name_off == 0 || name_off >= strtab.len() {
                    continue;
                }
                let end = strtab[name_off..].iter().position(|c| *c == 0).map_or(strtab.len(), |p| name_off + p);
                let name = String::from_utf8_lossy(&strtab[name_off..end]).into_owned();
                symbols.push(Symbol { name, addr });
            }
        }
    }
    Ok(LoadedImage { segments, symbols, entry, raw: false, bytes: b.to_vec() })
}

impl LoadedImage {
    pub fn executable_ranges(&self) -> Vec<Range<u64>> {
        self.segments.iter().filter(|s| s.perms.x).map(|s| s.vrange()).collect()
    }

    /// Entry points named by symbols containing `marker`.
    pub fn entries(&self, marker: &str) -> EntryPointSet {
        EntryPointSet::from_symbols(self.symbols.iter().map(|s| (s.name.as_str(), s.addr)), marker)
    }

    /// The memory image as 4 KiB pages with an executable flag each.
    pub fn pages(&self) -> Vec<(u64, Vec<u8>, bool)> {
        let mut pages: std::collections::BTreeMap<u64, (Vec<u8>, bool)> = Default::default();
        for s in &self.segments {
            if s.memsz == 0 {
                continue;
            }
            for p in s.vaddr / PAGE..=(s.vaddr + s.memsz - 1) / PAGE {
                let e = pages.entry(p).or_insert_with(|| (vec![0; PAGE_SIZE], false));
                e.1 |= s.perms.x;
            }
            for (k, byte) in s.data.iter().enumerate() {
                let a = s.vaddr + k as u64;
                pages.get_mut(&(a / PAGE)).unwrap().0[(a % PAGE) as usize] = *byte;
            }
        }
        pages.into_iter().map(|(p, (d, x))| (p, d, x)).collect()
    }

    pub fn inspect(&self, entries: &EntryPointSet, templates: &TemplateSet) -> InspectionReport {
        let pages = self.pages();
        let view: Vec<(u64, &[u8])> = pages.iter().map(|(p, d, _)| (*p, d.as_slice())).collect();
        let exec: std::collections::BTreeSet<u64> = pages.iter().filter(|p| p.2).map(|p| p.0).collect();
        inspect_region(&view, |p| exec.contains(&p), entries, templates).expect("pages are page-sized")
    }

    /// Like [`LoadedImage::inspect`], but occurrences starting inside an
    /// `exempt` range (constant-data islands in code, listed by hand) are
    /// reported as data.
    pub fn inspect_exempting(&self, entries: &EntryPointSet, templates: &TemplateSet, exempt: &[Range<u64>]) -> InspectionReport {
        let mut r = self.inspect(entries, templates);
        for v in &mut r.verdicts {
            if !v.class.is_safe() && exempt.iter().any(|e| e.contains(&v.occurrence.offset)) {
                v.class = SafetyClass::NonExecutableData;
                v.evidence = Evidence::DataOnly;
            }
        }
        r.pass = r.verdicts.iter().all(|v| v.class.is_safe());
        r
    }

    /// Replaces executable segment contents in place and appends
    /// `trampoline` as a new read+execute segment.
    /// Rewrites every executable segment and stores the result. With
    /// [`LayoutMode::PreserveLayout`] the segments share one trampoline
    /// region starting at its `trampoline_base`. The output is reloaded
    /// and must pass inspection.
    pub fn rewrite(&self, entries: &EntryPointSet, policy: &Policy) -> Result<ImageRewrite, ImageRewriteError> {
        let mut tramp: Vec<u8> = Vec::new();
        let mut tramp_end = 0;
        let mut rewritten = Vec::new();
        let mut out = ImageRewrite {
            bytes: Vec::new(),
            entries: entries.clone(),
            histogram: BTreeMap::new(),
            trampolines: 0,
            iterations: 0,
            flags_clobbered: false,
        };
        for seg in self.segments.iter().filter(|s| s.perms.x) {
            let mut p = policy.clone();
            if let LayoutMode::PreserveLayout { trampoline_base } = policy.layout {
                p.layout = LayoutMode::PreserveLayout { trampoline_base: trampoline_base + tramp.len() as u64 };
            }
            let r = rewrite_all(&seg.data, seg.vaddr, entries, &p)
                .map_err(|source| ImageRewriteError::Rewrite { segment: seg.vaddr, source })?;
            if r.unchanged() {
                continue;
            }
            let t = r.trampoline.as_ref().map(|(b, t)| (*b, t.as_slice()));
            if !inspect_output(&r.code, seg.vaddr, t, &r.entries, &policy.templates).pass {
                return Err(ImageRewriteError::NotClean(seg.vaddr));
            }
            if let Some((_, t)) = &r.trampoline {
                tramp.extend_from_slice(t);
                tramp_end = tramp.len();
                tramp.resize(tramp.len().next_multiple_of(16), 0xCC);
            }
            for (rule, n) in &r.histogram {
                *out.histogram.entry(*rule).or_default() += n;
            }
            out.trampolines += r.trampoline_count();
            out.iterations = out.iterations.max(r.iterations);
            out.flags_clobbered |= r.flags_clobbered;
            out.entries.extend(&r.entries);
            rewritten.push((seg.vaddr, r.code));
        }
        tramp.truncate(tramp_end);
        let trampoline = match policy.layout {
            LayoutMode::PreserveLayout { trampoline_base } if !tramp.is_empty() => Some((trampoline_base, tramp.as_slice())),
            _ => None,
        };
        out.bytes = self.store_rewritten(&rewritten, trampoline)?;
        let mode = if self.raw { LoadMode::Raw } else { LoadMode::Elf };
        if !load(&out.bytes, mode)?.inspect(&out.entries, &policy.templates).pass {
            return Err(ImageRewriteError::Reinspect);
        }
        Ok(out)
    }

    /// Default trampoline address: one page past the highest segment.
    pub fn default_trampoline_base(&self) -> u64 {
        let end = self.segments.iter().map(|s| s.vaddr + s.memsz).max().unwrap_or(0);
        end.next_multiple_of(PAGE_SIZE as u64) + PAGE_SIZE as u64
    }

    pub fn store_rewritten(&self, rewritten: &[(u64, Vec<u8>)], trampoline: Option<(u64, &[u8])>) -> Result<Vec<u8>, ElfError> {
        let trampoline = trampoline.filter(|(_, t)| !t.is_empty());
        if self.raw {
            if trampoline.is_some() {
                return Err(ElfError::RawTrampoline);
            }
            return match rewritten {
                [] => Ok(self.bytes.clone()),
                [(0, code)] => Ok(code.clone()),
                [(a, _), ..] => Err(ElfError::LayoutOverflow(*a)),
            };
        }
        let mut out = self.bytes.clone();
        for (vaddr, code) in rewritten {
            let seg = self
                .segments
                .iter()
                .find(|s| s.perms.x && s.vaddr == *vaddr && s.data.len() == code.len())
                .ok_or(ElfError::LayoutOverflow(*vaddr))?;
            out[seg.file_range.start as usize..seg.file_range.end as usize].copy_from_slice(code);
        }
        let Some((tbase, tramp)) = trampoline else { return Ok(out) };
        let tlen = tramp.len() as u64;
        for s in &self.segments {
            let r = s.vrange();
            if tbase < r.end.next_multiple_of(PAGE) && r.start / PAGE * PAGE < tbase + tlen {
                return Err(ElfError::Overlap(s.vaddr, tbase));
            }
        }
        // trampoline bytes, congruent to their address modulo the page size
        let mut off = out.len() as u64;
        off += (tbase % PAGE + PAGE - off % PAGE) % PAGE;
        out.resize(off as usize, 0);
        out.extend_from_slice(tramp);

        // program header table moves to the end with one more entry
        let phoff = u64_at(&out, 0x20)? as usize;
        let phnum = u16_at(&out, 0x38)? as usize;
        let old = out[phoff..phoff + phnum * PHDR_SIZE].to_vec();
        let new_off = out.len().next_multiple_of(8);
        out.resize(new_off, 0);
        out.extend_from_slice(&old);
        let mut ph = Vec::with_capacity(PHDR_SIZE);
        ph.extend(PT_LOAD.to_le_bytes());
        ph.extend((PF_R | PF_X).to_le_bytes());
        ph.extend(off.to_le_bytes());
        ph.extend(tbase.to_le_bytes());
        ph.extend(tbase.to_le_bytes());
        ph.extend(tlen.to_le_bytes());
        ph.extend(tlen.to_le_bytes());
        ph.extend(PAGE.to_le_bytes());
        out.extend(ph);
        out[0x20..0x28].copy_from_slice(&(new_off as u64).to_le_bytes());
        let n = u16::try_from(phnum + 1).map_err(|_| ElfError::Malformed("too many program headers".into()))?;
        out[0x38..0x3A].copy_from_slice(&n.to_le_bytes());
        Ok(out)
    }
}

/// A loadable segment for [`build_elf`].
#[derive(Debug, Clone)]
pub struct ElfSegment {
    pub vaddr: u64,
    pub perms: Perms,
    pub data: Vec<u8>,
}

/// Writes a minimal static x86-64 executable: one PT_LOAD per segment,
/// plus `.symtab`/`.strtab` when symbols are given.
pub fn build_elf(segments: &[ElfSegment], entry: u64, symbols: &[(&str, u64)]) -> Vec<u8> {
    let mut out = vec![0u8; EHDR_SIZE + segments.len() * PHDR_SIZE];
    let mut phdrs = Vec::new();
    for s in segments {
        let mut off = out.len() as u64;
        off += (s.vaddr % PAGE + PAGE - off % PAGE) % PAGE;
        out.resize(off as usize, 0);
        out.extend_from_slice(&s.data);
        let flags = (s.perms.r as u32 * PF_R) | (s.perms.w as u32 * PF_W) | (s.perms.x as u32 * PF_X);
        let len = s.data.len() as u64;
        for v in [PT_LOAD as u64 | (flags as u64) << 32, off, s.vaddr, s.vaddr, len, len, PAGE] {
            phdrs.extend(v.to_le_bytes());
        }
    }
    out[EHDR_SIZE..EHDR_SIZE + phdrs.len()].copy_from_slice(&phdrs);

    let (mut shoff, mut shnum, mut shstrndx) = (0u64, 0u16, 0u16);
    if !symbols.is_empty() {
        let mut strtab = vec![0u8];
        let mut symtab = vec![0u8; SYM_SIZE];
        for (name, addr) in symbols {
            let name_off = strtab.len() as u32;
            strtab.extend(name.as_bytes());
            strtab.push(0);
            symtab.extend(name_off.to_le_bytes());
            // global function, defined in section 1's stand-in
            symtab.extend([0x12, 0]);
            symtab.extend(1u16.to_le_bytes());
            symtab.extend(addr.to_le_bytes());
            symtab.extend(0u64.to_le_bytes());
        }
        let shstr = b"\0.symtab\0.strtab\0.shstrtab\0".to_vec();
        let sym_off = out.len().next_multiple_of(8) as u64;
        out.resize(sym_off as usize, 0);
        out.extend(&symtab);
        let str_off = out.len() as u64;
        out.extend(&strtab);
        let shstr_off = out.len() as u64;
        out.extend(&shstr);
        shoff = out.len().next_multiple_of(8) as u64;
        out.resize(shoff as usize, 0);
        let sh = |name: u32, ty: u32, off: u64, size: u64, link: u32, entsize: u64| {
            let mut v = Vec::with_capacity(SHDR_SIZE);
            v.extend(name.to_le_bytes());
            v.extend(ty.to_le_bytes());
            v.extend(0u64.to_le_bytes());
            v.extend(0u64.to_le_bytes());
            v.extend(off.to_le_bytes());
            v.extend(size.to_le_bytes());
            v.extend(link.to_le_bytes());
            v.extend(1u32.to_le_bytes());
            v.extend(8u64.to_le_bytes());
            v.extend(entsize.to_le_bytes());
            v
        };
        out.extend(vec![0u8; SHDR_SIZE]);
        out.extend(sh(1, SHT_SYMTAB, sym_off, symtab.len() as u64, 2, SYM_SIZE as u64));
        out.extend(sh(9, SHT_STRTAB, str_off, strtab.len() as u64, 0, 0));
        out.extend(sh(17, SHT_STRTAB, shstr_off, shstr.len() as u64, 0, 0));
        shnum = 4;
        shstrndx = 3;
    }

    let h = &mut out[..EHDR_SIZE];
    h[..4].copy_from_slice(b"\x7fELF");
    h[4] = 2;
    h[5] = 1;
    h[6] = 1;
    h[0x10..0x12].copy_from_slice(&ET_EXEC.to_le_bytes());
    h[0x12..0x14].copy_from_slice(&EM_X86_64.to_le_bytes());
    h[0x14..0x18].copy_from_slice(&1u32.to_le_bytes());
    h[0x18..0x20].copy_from_slice(&entry.to_le_bytes());
    h[0x20..0x28].copy_from_slice(&(EHDR_SIZE as u64).to_le_bytes());
    h[0x28..0x30].copy_from_slice(&shoff.to_le_bytes());
    h[0x34..0x36].copy_from_slice(&(EHDR_SIZE as u16).to_le_bytes());
    h[0x36..0x38].copy_from_slice(&(PHDR_SIZE as u16).to_le_bytes());
    h[0x38..0x3A].copy_from_slice(&(segments.len() as u16).to_le_bytes());
    h[0x3A..0x3C].copy_from_slice(&(SHDR_SIZE as u16).to_le_bytes());
    h[0x3C..0x3E].copy_from_slice(&shnum.to_le_bytes());
    h[0x3E..0x40].copy_from_slice(&shstrndx.to_le_bytes());
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bytescan::scan;

    const BASE: u64 = 0x40_1000;

    fn text(code: &[u8]) -> ElfSegment {
        ElfSegment { vaddr: BASE, perms: Perms::RX, data: code.to_vec() }
    }

    #[test]
    fn raw_image_is_one_executable_segment() {
        let img = load(&[0x0F, 0x01, 0xEF], LoadMode::Raw).unwrap();
        assert_eq!(img.segments.len(), 1);
        assert_eq!(img.executable_ranges(), vec![0..3]);
        assert_eq!(scan(&img.segments[0].data, 0).len(), 1);
    }

    #[test]
    fn built_elf_loads_back() {
        let data = ElfSegment { vaddr: 0x60_0000, perms: Perms::RW, data: vec![1, 2, 3] };
        let bytes = build_elf(&[text(&[0x90, 0xC3]), data], BASE, &[("erim_entry_a", BASE + 1), ("main", BASE)]);
        let img = load(&bytes, LoadMode::Elf).unwrap();
        assert_eq!(img.entry, BASE);
        assert_eq!(img.executable_ranges(), vec![BASE..BASE + 2]);
        assert_eq!(img.segments[1].data, [1, 2, 3]);
        assert_eq!(img.symbols.len(), 2);
        let entries = img.entries(crate::inspector::DEFAULT_ENTRY_MARKER);
        assert_eq!(entries.iter().collect::<Vec<_>>(), vec![BASE + 1]);
    }

    #[test]
    fn bad_headers_are_rejected() {
        let good = build_elf(&[text(&[0xC3])], BASE, &[]);
        let mut b = good.clone();
        b[4] = 1;
        assert_eq!(load(&b, LoadMode::Elf), Err(ElfError::Class32));
        let mut b = good.clone();
        b[5] = 2;
        assert_eq!(load(&b, LoadMode::Elf), Err(ElfError::BigEndian));
        let mut b = good.clone();
        b[0] = 0;
        assert_eq!(load(&b, LoadMode::Elf), Err(ElfError::BadMagic));
        assert_eq!(load(&good[..10], LoadMode::Elf), Err(ElfError::TooShort));
        assert!(matches!(load(&good[..0x60], LoadMode::Elf), Err(ElfError::Malformed(_))));
    }

    #[test]
    fn writable_code_is_rejected() {
        let wx = ElfSegment { vaddr: BASE, perms: Perms { r: true, w: true, x: true }, data: vec![0xC3] };
        assert_eq!(load(&build_elf(&[wx], BASE, &[]), LoadMode::Elf), Err(ElfError::WritableExec(BASE)));
    }

    #[test]
    fn overlapping_segments_are_rejected() {
        let a = text(&[0x90; 32]);
        let b = ElfSegment { vaddr: BASE + 16, perms: Perms::R, data: vec![0; 32] };
        assert_eq!(load(&build_elf(&[a, b], BASE, &[]), LoadMode::Elf), Err(ElfError::Overlap(BASE, BASE + 16)));
    }

    #[test]
    fn no_op_store_is_identical() {
        let bytes = build_elf(&[text(&[0x90, 0xC3])], BASE, &[("x", BASE)]);
        let img = load(&bytes, LoadMode::Elf).unwrap();
        assert_eq!(img.store_rewritten(&[], None).unwrap(), bytes);
        let again = load(&img.store_rewritten(&[], None).unwrap(), LoadMode::Elf).unwrap();
        assert_eq!(again, img);
    }

    #[test]
    fn in_place_store_keeps_size() {
        let bytes = build_elf(&[text(&[0x90, 0xC3])], BASE, &[]);
        let img = load(&bytes, LoadMode::Elf).unwrap();
        let out = img.store_rewritten(&[(BASE, vec![0xCC, 0xC3])], None).unwrap();
        assert_eq!(out.len(), bytes.len());
        assert_eq!(load(&out, LoadMode::Elf).unwrap().segments[0].data, [0xCC, 0xC3]);
        assert_eq!(img.store_rewritten(&[(BASE, vec![0xC3])], None), Err(ElfError::LayoutOverflow(BASE)));
    }

    #[test]
    fn trampoline_becomes_one_new_segment() {
        let bytes = build_elf(&[text(&[0x90, 0xC3])], BASE, &[("erim_entry", BASE)]);
        let img = load(&bytes, LoadMode::Elf).unwrap();
        let tramp = [0x90, 0x90, 0xC3];
        let out = img.store_rewritten(&[], Some((0x48_0010, &tramp))).unwrap();
        let back = load(&out, LoadMode::Elf).unwrap();
        assert_eq!(back.segments.len(), 2);
        let t = &back.segments[1];
        assert_eq!((t.vaddr, t.perms, t.data.as_slice()), (0x48_0010, Perms::RX, &tramp[..]));
        assert_eq!(t.file_range.start % PAGE, 0x10);
        assert_eq!(back.symbols, img.symbols);
        assert!(back.inspect(&back.entries("erim_entry"), &TemplateSet::default()).pass);
        assert_eq!(img.store_rewritten(&[], Some((BASE, &tramp))), Err(ElfError::Overlap(BASE, BASE)));
    }

    #[test]
    fn data_segment_occurrence_is_not_unsafe() {
        let data = ElfSegment { vaddr: 0x60_0000, perms: Perms::R, data: vec![0x0F, 0x01, 0xEF, 0] };
        let img = load(&build_elf(&[text(&[0xC3]), data], BASE, &[]), LoadMode::Elf).unwrap();
        let r = img.inspect(&EntryPointSet::new(), &TemplateSet::default());
        assert!(r.pass);
        assert_eq!(r.verdicts.len(), 1);
    }

    #[test]
    fn exemption_list_is_opt_in() {
        let img = load(&build_elf(&[text(&[0xC3, 0x0F, 0x01, 0xEF, 0])], BASE, &[]), LoadMode::Elf).unwrap();
        let (e, t) = (EntryPointSet::new(), TemplateSet::default());
        assert!(!img.inspect(&e, &t).pass);
        assert!(!img.inspect_exempting(&e, &t, &[]).pass);
        assert!(img.inspect_exempting(&e, &t, &[BASE + 1..BASE + 4]).pass);
    }

    #[test]
    fn toolchain_built_elf_loads() {
        let dir = std::env::temp_dir().join(format!("pkguard-elf-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let src = dir.join("t.s");
        std::fs::write(
            &src,
            ".globl _start\n.globl erim_entry_t\n.text\n_start:\n xor %ecx,%ecx\n xor %edx,%edx\n mov $0xf,%eax\n wrpkru\nerim_entry_t:\n mov $60,%eax\n syscall\n.data\n.quad 1\n",
        )
        .unwrap();
        let obj = dir.join("t.o");
        let exe = dir.join("t");
        let built = std::process::Command::new("as").arg("-o").arg(&obj).arg(&src).status().is_ok_and(|s| s.success())
            && std::process::Command::new("ld").arg("-o").arg(&exe).arg(&obj).status().is_ok_and(|s| s.success());
        if !built {
            eprintln!("as/ld not available; skipping");
            return;
        }
        let img = load_file(&exe, LoadMode::Elf).unwrap();
        let x = img.executable_ranges();
        assert_eq!(x.len(), 1);
        assert_eq!(x[0].end - x[0].start, 19);
        let start = img.symbols.iter().find(|s| s.name == "_start").unwrap().addr;
        assert_eq!(img.entry, start);
        let entries = img.entries("erim_entry");
        assert_eq!(entries.iter().collect::<Vec<_>>(), vec![start + 12]);
        assert!(img.inspect(&entries, &TemplateSet::default()).pass);
        assert!(!img.inspect(&EntryPointSet::new(), &TemplateSet::default()).pass);
        std::fs::remove_dir_all(&dir).ok();
    }
}
