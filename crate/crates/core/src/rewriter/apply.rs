use std::collections::{BTreeSet, HashMap};
use std::ops::Range;

use super::emit::{assemble, Emit, Item, Target};
use super::{LayoutMode, Listing, Policy, RewriteError, RewritePlan};
use crate::bytescan;
use crate::inspector::{inspect_code, EntryPointSet};
use crate::x86::Instr;

/// Candidate filler sizes tried in front of each out-of-line chunk. The
/// coarse steps move a rel32 far enough to change its second byte.
fn pad_sizes() -> impl Iterator<Item = usize> {
    (0..16).chain((16..=512).step_by(16))
}
const JMP_REL32_LEN: usize = 5;

#[derive(Debug, Clone, Default)]
pub struct Applied {
    pub code: Vec<u8>,
    /// Bytes to append to the trampoline region.
    pub trampoline: Option<Vec<u8>>,
    /// Original instruction address to new address (reassembly only).
    pub anchors: HashMap<u64, u64>,
    pub plans: Vec<RewritePlan>,
}

fn relabeled(seq: &[Emit], offset: u32) -> Vec<Emit> {
    seq.iter()
        .cloned()
        .map(|mut e| {
            e.relabel(offset);
            e
        })
        .collect()
}

/// Applies non-overlapping plans. `tramp_cursor` is where new trampoline
/// code starts in layout-preserving mode.
pub fn apply(
    listing: &Listing,
    plans: &[RewritePlan],
    policy: &Policy,
    entries: &EntryPointSet,
    protected: &[Range<u64>],
    tramp_cursor: u64,
) -> Result<Applied, RewriteError> {
    let mut plans = plans.to_vec();
    plans.sort_by_key(|p| p.range.start);
    for w in plans.windows(2) {
        if w[0].range.end > w[1].range.start {
            return Err(RewriteError::Layout(format!("overlapping plans at {:#x}", w[1].range.start)));
        }
    }
    if plans.is_empty() {
        return Ok(Applied { code: listing.code.clone(), ..Applied::default() });
    }
    match policy.layout {
        LayoutMode::Reassemble => reassemble(listing, plans),
        LayoutMode::PreserveLayout { .. } => preserve(listing, plans, policy, entries, protected, tramp_cursor),
    }
}

fn pattern_count(bytes: &[u8]) -> usize {
    bytescan::scan(bytes, 0).len()
}

fn reassemble(listing: &Listing, plans: Vec<RewritePlan>) -> Result<Applied, RewriteError> {
    let by_start: HashMap<usize, usize> = plans.iter().enumerate().map(|(i, p)| (p.instrs.start, i)).collect();
    let mut items = Vec::new();
    let mut stubs: Vec<(u32, Vec<Emit>)> = Vec::new();
    let mut next_label = 0u32;
    let mut k = 0;
    while k < listing.instrs.len() {
        items.push(Item::Anchor(Target::Orig(listing.addr(k))));
        if let Some(&pi) = by_start.get(&k) {
            let p = &plans[pi];
            items.extend(relabeled(&p.replacement, next_label).into_iter().map(Item::Emit));
            for (i, s) in p.stubs.iter().enumerate() {
                stubs.push((next_label + i as u32, relabeled(s, next_label)));
            }
            next_label += p.stubs.len() as u32;
            k = p.instrs.end;
        } else {
            items.push(Item::Emit(listing.identity(k)));
            k += 1;
        }
    }
    items.push(Item::Anchor(Target::Orig(listing.end())));

    let (base, end) = (listing.base, listing.end());
    let external = |t: &Target| match t {
        Target::Orig(a) if *a < base || *a > end => Some(*a),
        _ => None,
    };
    // stubs go after the code, each behind a tunable filler
    let mut pads = vec![0usize; stubs.len()];
    let build = |pads: &[usize]| {
        let mut all = items.clone();
        for ((label, seq), pad) in stubs.iter().zip(pads) {
            all.push(Item::Pad(*pad));
            all.push(Item::Anchor(Target::Label(*label)));
            all.extend(seq.iter().cloned().map(Item::Emit));
        }
        all
    };
    for i in 0..stubs.len() {
        let mut best: Option<(usize, usize)> = None;
        for p in pad_sizes() {
            pads[i] = p;
            let a = assemble(&build(&pads), base, external)?;
            let n = pattern_count(&a.bytes);
            if best.is_none_or(|(_, bn)| n < bn) {
                best = Some((p, n));
            }
            if n == 0 {
                break;
            }
        }
        pads[i] = best.map(|b| b.0).unwrap_or(0);
    }
    let a = assemble(&build(&pads), base, external)?;
    let anchors = a
        .anchors
        .iter()
        .filter_map(|(t, addr)| match t {
            Target::Orig(o) => Some((*o, *addr)),
            Target::Label(_) => None,
        })
        .collect();
    Ok(Applied { code: a.bytes, trampoline: None, anchors, plans })
}

struct PreserveCtx<'a> {
    listing: &'a Listing,
    protected: &'a [Range<u64>],
    targets: BTreeSet<u64>,
    /// Instruction index ranges already moved this round.
    taken: Vec<Range<usize>>,
}

impl PreserveCtx<'_> {
    fn is_target(&self, k: usize) -> bool {
        self.targets.contains(&self.listing.addr(k))
    }

    fn is_taken(&self, k: usize) -> bool {
        self.taken.iter().any(|r| r.contains(&k))
    }

    fn bytes_len(&self, r: &Range<usize>) -> usize {
        (self.listing.range(r.end - 1).end - self.listing.addr(r.start)) as usize
    }

    /// Grows `r` until it can hold a JMP rel32, without making a known
    /// branch target interior and without splitting a guarded sequence.
    fn group(&self, mut r: Range<usize>) -> Option<Range<usize>> {
        let n = self.listing.instrs.len();
        loop {
            let mut changed = false;
            let span = self.listing.addr(r.start)..self.listing.range(r.end - 1).end;
            for p in self.protected {
                if p.start < span.end && span.start < p.end {
                    let s = self.listing.index_of(p.start)?;
                    let e = self.listing.index_of(p.end - 1)? + 1;
                    if s < r.start || e > r.end {
                        r = r.start.min(s)..r.end.max(e);
                        changed = true;
                    }
                }
            }
            if !changed && self.bytes_len(&r) >= JMP_REL32_LEN {
                break;
            }
            if !changed {
                if r.end < n && !self.is_target(r.end) && !self.is_taken(r.end) {
                    r.end += 1;
                } else if r.start > 0 && !self.is_target(r.start) && !self.is_taken(r.start - 1) {
                    r.start -= 1;
                } else {
                    return None;
                }
            }
        }
        let interior_ok = (r.start + 1..r.end).all(|k| !self.is_target(k));
        let free = (r.start..r.end).all(|k| !self.is_taken(k));
        (interior_ok && free).then_some(r)
    }

    /// Items reproducing instructions `r` with `plans` substituted.
    fn chunk_items(&self, r: &Range<usize>, plans: &[RewritePlan], label_base: &mut u32) -> Vec<Item> {
        let mut items = Vec::new();
        let mut stub_items = Vec::new();
        let mut k = r.start;
        while k < r.end {
            let addr = self.listing.addr(k);
            if let Some(p) = plans.iter().find(|p| p.instrs.start == k) {
                items.extend(relabeled(&p.replacement, *label_base).into_iter().map(Item::Emit));
                for (i, s) in p.stubs.iter().enumerate() {
                    stub_items.push(Item::Anchor(Target::Label(*label_base + i as u32)));
                    stub_items.extend(relabeled(s, *label_base).into_iter().map(Item::Emit));
                }
                *label_base += p.stubs.len() as u32;
                k = p.instrs.end;
                continue;
            }
            // guard templates are copied verbatim so they still match
            if let Some(g) = self.protected.iter().find(|g| g.start < addr && addr < g.end) {
                let e = self.listing.index_of(g.end - 1).map(|i| i + 1).unwrap_or(k + 1).min(r.end);
                let end_addr = self.listing.range(e - 1).end;
                let off = (addr - self.listing.base) as usize;
                let bytes = self.listing.code[off..off + (end_addr - addr) as usize].to_vec();
                items.push(Item::Emit(Emit::Bytes(bytes)));
                k = e;
                continue;
            }
            items.push(Item::Emit(self.listing.identity(k)));
            k += 1;
        }
        let back = self.listing.range(r.end - 1).end;
        items.push(Item::Emit(Emit::Branch { instr: Instr::jmp_rel32(0), target: Target::Orig(back) }));
        items.extend(stub_items);
        items
    }
}

fn orig_external(t: &Target) -> Option<u64> {
    match t {
        Target::Orig(a) => Some(*a),
        Target::Label(_) => None,
    }
}

/// No pattern in `out` touches `site`.
fn site_clean(out: &[u8], base: u64, site: &Range<u64>) -> bool {
    let s = (site.start - base) as usize;
    let e = (site.end - base) as usize;
    let lo = s.saturating_sub(2);
    let hi = (e + 2).min(out.len());
    bytescan::scan(&out[lo..hi], base + lo as u64).iter().all(|o| o.end() <= site.start || o.offset >= site.end)
}

fn preserve(
    listing: &Listing,
    mut plans: Vec<RewritePlan>,
    policy: &Policy,
    entries: &EntryPointSet,
    protected: &[Range<u64>],
    tramp_cursor: u64,
) -> Result<Applied, RewriteError> {
    let mut targets = listing.branch_targets();
    targets.extend(entries.iter().filter(|e| listing.contains(*e)));
    let mut ctx = PreserveCtx { listing, protected, targets, taken: Vec::new() };
    let mut out = listing.code.clone();
    let mut tramp: Vec<u8> = Vec::new();
    let base = listing.base;
    let mut done = vec![false; plans.len()];

    for pi in 0..plans.len() {
        if done[pi] {
            continue;
        }
        let plan = plans[pi].clone();
        let site = plan.range.clone();
        let cursor = tramp_cursor + tramp.len() as u64;

        // in place, with any stubs in the trampoline region
        let mut placed = false;
        if !ctx.is_taken(plan.instrs.start) {
            for pad in pad_sizes() {
                let mut stub_items = vec![Item::Pad(pad)];
                for (i, s) in plan.stubs.iter().enumerate() {
                    stub_items.push(Item::Anchor(Target::Label(i as u32)));
                    stub_items.extend(s.iter().cloned().map(Item::Emit));
                }
                let stubs = assemble(&stub_items, cursor, orig_external)?;
                let labels = stubs.anchors.clone();
                let ext = |t: &Target| labels.get(t).copied().or_else(|| orig_external(t));
                let items: Vec<Item> = plan.replacement.iter().cloned().map(Item::Emit).collect();
                let rep = assemble(&items, site.start, ext)?;
                let room = (site.end - site.start) as usize;
                if rep.bytes.len() > room {
                    break;
                }
                let mut trial = out.clone();
                let s = (site.start - base) as usize;
                trial[s..s + rep.bytes.len()].copy_from_slice(&rep.bytes);
                trial[s + rep.bytes.len()..s + room].fill(0x90);
                let stub_bytes = if plan.stubs.is_empty() { Vec::new() } else { stubs.bytes };
                let stubs_ok = stub_bytes.is_empty() || inspect_code(&stub_bytes, cursor, entries, &policy.templates).pass;
                if site_clean(&trial, base, &site) && stubs_ok {
                    out = trial;
                    tramp.extend(stub_bytes);
                    placed = true;
                    break;
                }
                if plan.stubs.is_empty() {
                    break;
                }
            }
        }
        if placed {
            ctx.taken.push(plan.instrs.clone());
            done[pi] = true;
            continue;
        }

        // move a group of instructions into the trampoline region
        let group = ctx.group(plan.instrs.clone()).ok_or_else(|| RewriteError::NoApplicableRule {
            offset: plan.occurrence,
            reason: "no relocatable instruction group around the site".into(),
        })?;
        let members: Vec<RewritePlan> = plans
            .iter()
            .enumerate()
            .filter(|(i, p)| !done[*i] && group.start <= p.instrs.start && p.instrs.end <= group.end)
            .map(|(_, p)| p.clone())
            .collect();
        let g_range = listing.addr(group.start)..listing.range(group.end - 1).end;
        let mut chosen = None;
        for pad in pad_sizes() {
            let mut label_base = 0;
            let mut items = vec![Item::Pad(pad), Item::Anchor(Target::Label(u32::MAX))];
            items.extend(ctx.chunk_items(&group, &members, &mut label_base));
            let chunk = assemble(&items, cursor, orig_external)?;
            let start = chunk.anchors[&Target::Label(u32::MAX)];
            let jmp = Instr::jmp_rel32((start as i64 - (g_range.start as i64 + JMP_REL32_LEN as i64)) as i32);
            let jmp = jmp.encode().map_err(|e| RewriteError::Layout(e.to_string()))?;
            let mut trial = out.clone();
            let s = (g_range.start - base) as usize;
            let e = (g_range.end - base) as usize;
            trial[s..s + JMP_REL32_LEN].copy_from_slice(&jmp);
            trial[s + JMP_REL32_LEN..e].fill(0xCC);
            let body = &chunk.bytes[pad..];
            if site_clean(&trial, base, &g_range) && inspect_code(body, start, entries, &policy.templates).pass {
                chosen = Some((trial, chunk.bytes));
                break;
            }
        }
        let (trial, bytes) = chosen.ok_or_else(|| RewriteError::NoApplicableRule {
            offset: plan.occurrence,
            reason: "trampoline chunk not clean".into(),
        })?;
        out = trial;
        tramp.extend(bytes);
        for (i, p) in plans.iter_mut().enumerate() {
            if !done[i] && group.start <= p.instrs.start && p.instrs.end <= group.end {
                p.trampolined = true;
                done[i] = true;
            }
        }
        ctx.taken.push(group);
    }
    Ok(Applied { code: out, trampoline: Some(tramp), anchors: HashMap::new(), plans })
}
