//! Symbolic instruction streams and their assembly into bytes.

use std::collections::HashMap;

use super::RewriteError;
use crate::x86::{Form, Instr, Mnemonic};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Target {
    /// An address in the original code. Resolves to wherever that
    /// instruction ended up, or to itself when nothing moved it.
    Orig(u64),
    /// A label local to the rewrite output (stubs, trampoline chunks).
    Label(u32),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Emit {
    /// Position independent instruction.
    Instr(Instr),
    /// Direct branch whose displacement is filled in at layout.
    Branch { instr: Instr, target: Target },
    /// RIP-relative memory operand that must keep pointing at `target`.
    RipMem { instr: Instr, target: u64 },
    Bytes(Vec<u8>),
}

impl Emit {
    pub fn relabel(&mut self, offset: u32) {
        if let Emit::Branch { target: Target::Label(l), .. } = self {
            *l += offset;
        }
    }

    pub fn is_call(&self) -> bool {
        match self {
            Emit::Instr(i) | Emit::Branch { instr: i, .. } | Emit::RipMem { instr: i, .. } => i.mnemonic == Mnemonic::Call,
            Emit::Bytes(_) => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Item {
    Anchor(Target),
    Emit(Emit),
    /// INT3 filler, never executed.
    Pad(usize),
}

#[derive(Debug, Clone)]
pub struct Assembled {
    pub bytes: Vec<u8>,
    pub anchors: HashMap<Target, u64>,
}

fn widen(i: &Instr) -> Instr {
    match i.mnemonic {
        Mnemonic::Jmp => Instr::jmp_rel32(0),
        Mnemonic::Jcc(c) => Instr::jcc_rel32(c, 0),
        _ => i.clone(),
    }
}

fn item_len(item: &Item, wide: bool) -> usize {
    match item {
        Item::Anchor(_) => 0,
        Item::Pad(n) => *n,
        Item::Emit(Emit::Bytes(b)) => b.len(),
        Item::Emit(Emit::Instr(i)) | Item::Emit(Emit::RipMem { instr: i, .. }) => i.len(),
        Item::Emit(Emit::Branch { instr, .. }) => {
            if wide {
                widen(instr).len()
            } else {
                instr.len()
            }
        }
    }
}

/// Lays out `items` at `base`. Targets not anchored in the stream are
/// looked up through `external`. Short branches that cannot reach are
/// widened until the layout is stable.
pub fn assemble<F>(items: &[Item], base: u64, external: F) -> Result<Assembled, RewriteError>
where
    F: Fn(&Target) -> Option<u64>,
{
    let mut wide = vec![false; items.len()];
    let mut anchors = HashMap::new();
    let mut addrs = vec![0u64; items.len()];
    let resolve = |t: &Target, anchors: &HashMap<Target, u64>| -> Result<u64, RewriteError> {
        anchors.get(t).copied().or_else(|| external(t)).ok_or(RewriteError::UnresolvedTarget { target: *t })
    };
    for _ in 0..=items.len() {
        anchors.clear();
        let mut at = base;
        for (k, item) in items.iter().enumerate() {
            addrs[k] = at;
            if let Item::Anchor(t) = item {
                anchors.entry(*t).or_insert(at);
            }
            at += item_len(item, wide[k]) as u64;
        }
        let mut changed = false;
        for (k, item) in items.iter().enumerate() {
            if let Item::Emit(Emit::Branch { instr, target }) = item {
                if wide[k] || instr.form != Form::Rel8 {
                    continue;
                }
                let to = resolve(target, &anchors)?;
                let rel = to.wrapping_sub(addrs[k] + instr.len() as u64) as i64;
                if i8::try_from(rel).is_err() {
                    wide[k] = true;
                    changed = true;
                }
            }
        }
        if !changed {
            break;
        }
    }

    let mut bytes = Vec::new();
    for (k, item) in items.iter().enumerate() {
        let at = addrs[k];
        match item {
            Item::Anchor(_) => {}
            Item::Pad(n) => bytes.extend(std::iter::repeat_n(0xCC, *n)),
            Item::Emit(Emit::Bytes(b)) => bytes.extend_from_slice(b),
            Item::Emit(Emit::Instr(i)) => bytes.extend(i.encode().map_err(|e| RewriteError::Layout(e.to_string()))?),
            Item::Emit(Emit::Branch { instr, target }) => {
                let mut i = if wide[k] { widen(instr) } else { instr.clone() };
                let to = resolve(target, &anchors)?;
                let rel = to.wrapping_sub(at + i.len() as u64) as i64;
                let rel = i32::try_from(rel).map_err(|_| RewriteError::RelocationOverflow { at })?;
                if i.form == Form::Rel8 && i8::try_from(rel).is_err() {
                    return Err(RewriteError::RelocationOverflow { at });
                }
                i.set_rel(rel);
                bytes.extend(i.encode().map_err(|e| RewriteError::Layout(e.to_string()))?);
            }
            Item::Emit(Emit::RipMem { instr, target }) => {
                let mut i = instr.clone();
                let rel = target.wrapping_sub(at + i.len() as u64) as i64;
                let rel = i32::try_from(rel).map_err(|_| RewriteError::RelocationOverflow { at })?;
                if let Some(m) = i.mem_operand_mut() {
                    m.disp = rel;
                }
                bytes.extend(i.encode().map_err(|e| RewriteError::Layout(e.to_string()))?);
            }
        }
    }
    Ok(Assembled { bytes, anchors })
}
