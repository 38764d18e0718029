//! Alignment-free search for WRPKRU and XRSTOR byte patterns.
//!
//! Matching is purely byte based. Every start offset is considered, so
//! overlapping and mid-instruction occurrences are all reported.

use thiserror::Error;

pub const PAGE_SIZE: usize = 4096;

/// Encoded length of both patterns.
pub const PATTERN_LEN: usize = 3;

pub const WRPKRU_BYTES: [u8; 3] = [0x0F, 0x01, 0xEF];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum OccurrenceKind {
    Wrpkru,
    Xrstor,
}

impl OccurrenceKind {
    pub fn name(self) -> &'static str {
        match self {
            OccurrenceKind::Wrpkru => "WRPKRU",
            OccurrenceKind::Xrstor => "XRSTOR",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Occurrence {
    pub offset: u64,
    pub kind: OccurrenceKind,
    /// The three bytes straddle a 4 KiB page boundary.
    pub page_span: bool,
}

impl Occurrence {
    pub const fn len(&self) -> usize {
        PATTERN_LEN
    }

    pub fn end(&self) -> u64 {
        self.offset + PATTERN_LEN as u64
    }

    pub fn contains(&self, addr: u64) -> bool {
        addr >= self.offset && addr < self.end()
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ScanError {
    #[error("page {index} has {len} bytes, expected {PAGE_SIZE}")]
    BadPageSize { index: u64, len: usize },
}

/// `0F AE` followed by a ModRM byte selecting `/5` with a memory operand.
#[inline]
pub fn is_xrstor_modrm(b: u8) -> bool {
    matches!(b >> 4, 0x2 | 0x6 | 0xA) && (b & 0x0F) >= 0x8
}

/// Classifies a three byte window.
#[inline]
pub fn match_window(b0: u8, b1: u8, b2: u8) -> Option<OccurrenceKind> {
    if b0 != 0x0F {
        return None;
    }
    match b1 {
        0x01 if b2 == 0xEF => Some(OccurrenceKind::Wrpkru),
        0xAE if is_xrstor_modrm(b2) => Some(OccurrenceKind::Xrstor),
        _ => None,
    }
}

fn spans_page(offset: u64) -> bool {
    let first = offset / PAGE_SIZE as u64;
    let last = (offset + PATTERN_LEN as u64 - 1) / PAGE_SIZE as u64;
    first != last
}

/// Reports every pattern start in `buffer`, with offsets relative to `base`.
pub fn scan(buffer: &[u8], base: u64) -> Vec<Occurrence> {
    let mut out = Vec::new();
    if buffer.len() < PATTERN_LEN {
        return out;
    }
    // memchr-style skip on the mandatory leading 0x0F
    let limit = buffer.len() - PATTERN_LEN + 1;
    let mut i = 0;
    while i < limit {
        match buffer[i..limit].iter().position(|&b| b == 0x0F) {
            None => break,
            Some(p) => i += p,
        }
        if let Some(kind) = match_window(buffer[i], buffer[i + 1], buffer[i + 2]) {
            let offset = base + i as u64;
            out.push(Occurrence { offset, kind, page_span: spans_page(offset) });
        }
        i += 1;
    }
    out
}

/// Returns true when `bytes` contains no pattern at all.
pub fn is_clean(bytes: &[u8]) -> bool {
    bytes.windows(3).all(|w| match_window(w[0], w[1], w[2]).is_none())
}

/// Scans a set of 4 KiB pages, including occurrences straddling two
/// adjacent executable pages. Pages need not be sorted.
pub fn scan_pages<F>(pages: &[(u64, &[u8])], executable: F) -> Result<Vec<Occurrence>, ScanError>
where
    F: Fn(u64) -> bool,
{
    for (index, bytes) in pages {
        if bytes.len() != PAGE_SIZE {
            return Err(ScanError::BadPageSize { index: *index, len: bytes.len() });
        }
    }
    let mut sorted: Vec<(u64, &[u8])> = pages.iter().map(|(i, b)| (*i, *b)).collect();
    sorted.sort_by_key(|(i, _)| *i);
    sorted.dedup_by_key(|(i, _)| *i);

    let mut out = Vec::new();
    for (pos, (index, bytes)) in sorted.iter().enumerate() {
        if !executable(*index) {
            continue;
        }
        let base = index * PAGE_SIZE as u64;
        out.extend(scan(bytes, base));

        // windows starting in the last two bytes of this page
        let next = sorted.get(pos + 1).filter(|(n, _)| *n == index + 1 && executable(*n));
        if let Some((_, next_bytes)) = next {
            let mut seam = [0u8; 4];
            seam[..2].copy_from_slice(&bytes[PAGE_SIZE - 2..]);
            seam[2..].copy_from_slice(&next_bytes[..2]);
            out.extend(scan(&seam, base + PAGE_SIZE as u64 - 2).into_iter().filter(|o| o.page_span));
        }
    }
    out.sort();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(buf: &[u8], base: u64) -> Vec<(u64, OccurrenceKind)> {
        let mut v = Vec::new();
        for i in 0..buf.len().saturating_sub(2) {
            let w = &buf[i..i + 3];
            let kind = if w == [0x0F, 0x01, 0xEF] {
                Some(OccurrenceKind::Wrpkru)
            } else if w[0] == 0x0F
                && w[1] == 0xAE
                && [0x2, 0x6, 0xA].contains(&(w[2] >> 4))
                && (8..=0xF).contains(&(w[2] & 0xF))
            {
                Some(OccurrenceKind::Xrstor)
            } else {
                None
            };
            if let Some(k) = kind {
                v.push((base + i as u64, k));
            }
        }
        v
    }

    fn kinds(v: &[Occurrence]) -> Vec<(u64, OccurrenceKind)> {
        v.iter().map(|o| (o.offset, o.kind)).collect()
    }

    #[test]
    fn single_patterns() {
        assert_eq!(kinds(&scan(&[0x0F, 0x01, 0xEF], 0)), vec![(0, OccurrenceKind::Wrpkru)]);
        assert!(scan(&[], 0).is_empty());
        assert_eq!(kinds(&scan(&[0x0F, 0xAE, 0x6A], 0)), vec![(0, OccurrenceKind::Xrstor)]);
        assert!(scan(&[0x0F, 0xAE, 0xE8], 0).is_empty());
        assert_eq!(kinds(&scan(&[0x0F, 0x0F, 0x01, 0xEF], 0)), vec![(1, OccurrenceKind::Wrpkru)]);
    }

    #[test]
    fn xrstor_modrm_table() {
        for b in 0..=255u8 {
            let expect = [0x2, 0x6, 0xA].contains(&(b >> 4)) && (b & 0xF) >= 8;
            assert_eq!(is_xrstor_modrm(b), expect, "{b:#x}");
        }
    }

    #[test]
    fn base_offset_and_page_span() {
        let occ = scan(&[0x0F, 0x01, 0xEF], 4094);
        assert_eq!(occ.len(), 1);
        assert_eq!(occ[0].offset, 4094);
        assert!(occ[0].page_span);
        assert!(!scan(&[0x0F, 0x01, 0xEF], 4093)[0].page_span);
    }

    #[test]
    fn straddling_pages() {
        let mut a = vec![0u8; PAGE_SIZE];
        let mut b = vec![0u8; PAGE_SIZE];
        a[PAGE_SIZE - 2] = 0x0F;
        a[PAGE_SIZE - 1] = 0x01;
        b[0] = 0xEF;
        let pages = [(5u64, a.as_slice()), (6u64, b.as_slice())];
        let occ = scan_pages(&pages, |_| true).unwrap();
        assert_eq!(occ.len(), 1);
        assert_eq!(occ[0].offset, 6 * 4096 - 2);
        assert!(occ[0].page_span);

        assert!(scan_pages(&pages, |p| p == 5).unwrap().is_empty());

        let mut concat = a.clone();
        concat.extend_from_slice(&b);
        assert_eq!(kinds(&occ), naive(&concat, 5 * 4096));
    }

    #[test]
    fn disjoint_pages() {
        let mut a = vec![0u8; PAGE_SIZE];
        a[10..13].copy_from_slice(&WRPKRU_BYTES);
        let b = a.clone();
        let occ = scan_pages(&[(0, &a[..]), (9, &b[..])], |_| true).unwrap();
        assert_eq!(kinds(&occ), vec![(10, OccurrenceKind::Wrpkru), (9 * 4096 + 10, OccurrenceKind::Wrpkru)]);
    }

    #[test]
    fn bad_page_size() {
        let a = [0u8; 100];
        assert_eq!(
            scan_pages(&[(3, &a[..])], |_| true),
            Err(ScanError::BadPageSize { index: 3, len: 100 })
        );
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn pattern_heavy() -> impl Strategy<Value = Vec<u8>> {
            prop::collection::vec(
                prop_oneof![
                    Just(0x0Fu8),
                    Just(0x01),
                    Just(0xEF),
                    Just(0xAE),
                    0x28u8..0x30,
                    0x68u8..0x70,
                    0xA8u8..0xB0,
                    any::<u8>()
                ],
                0..2048,
            )
        }

        proptest! {
            #[test]
            fn matches_naive(buf in pattern_heavy(), base in 0u64..1 << 40) {
                prop_assert_eq!(kinds(&scan(&buf, base)), naive(&buf, base));
            }

            #[test]
            fn concatenation(pages in prop::collection::vec(prop::collection::vec(
                prop_oneof![Just(0x0Fu8), Just(0x01), Just(0xEF), Just(0xAE), Just(0x2B), any::<u8>()],
                PAGE_SIZE..=PAGE_SIZE), 1..4), first in 0u64..100) {
                let list: Vec<(u64, &[u8])> =
                    pages.iter().enumerate().map(|(i, p)| (first + i as u64, p.as_slice())).collect();
                let concat: Vec<u8> = pages.concat();
                let got = scan_pages(&list, |_| true).unwrap();
                prop_assert_eq!(got, scan(&concat, first * PAGE_SIZE as u64));
            }

            #[test]
            fn split_inside_occurrence(split in 1usize..3, which in 0usize..2) {
                let pat: [u8; 3] = if which == 0 { WRPKRU_BYTES } else { [0x0F, 0xAE, 0x2F] };
                let mut a = vec![0x90u8; PAGE_SIZE];
                let mut b = vec![0x90u8; PAGE_SIZE];
                // `split` pattern bytes land on the first page
                let start = PAGE_SIZE - split;
                for (k, byte) in pat.iter().enumerate() {
                    let at = start + k;
                    if at < PAGE_SIZE { a[at] = *byte } else { b[at - PAGE_SIZE] = *byte }
                }
                let got = scan_pages(&[(0, &a[..]), (1, &b[..])], |_| true).unwrap();
                prop_assert_eq!(got.len(), 1);
                prop_assert_eq!(got[0].offset, start as u64);
            }
        }
    }
}
