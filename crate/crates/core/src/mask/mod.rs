//! Attention-mask compilation from bound layouts.
//!
//! Axis convention: a cell is addressed `(i, j)` where `i` indexes the x
//! (column) axis and `j` the y (row) axis, and the flat index of a cell is
//! `p * i + j`. A cross mask bit `(i, j, n)` permits cell `(i, j)` to attend
//! to caption token `n`; a self mask bit `(q, k)` permits flat cell `q` to
//! attend to flat cell `k`.

mod codec;
pub mod oracle;

use std::collections::BTreeMap;
use std::ops::Range;

use bitvec::prelude::*;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::layout::BBox;
use crate::tokens::BoundLayout;

pub use codec::{decode_mask, encode_mask, read_mask, write_mask, AnyMask, CodecError, AXIS_X_FIRST, MAGIC};
pub use oracle::{cross_mask_oracle, self_mask_oracle};

pub type Bits = BitVec<u8, Lsb0>;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MaskError {
    #[error("resolution must be at least 1")]
    InvalidResolution,
    #[error("bound layout has no tokens")]
    NoTokens,
    #[error("token span [{start}, {end}) for '{phrase}' exceeds token count {token_count}")]
    SpanOutOfRange {
        phrase: String,
        start: usize,
        end: usize,
        token_count: usize,
    },
}

/// Cell ranges covered by a box at one resolution, half-open on both axes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CellRange {
    pub x: Range<usize>,
    pub y: Range<usize>,
}

impl CellRange {
    pub fn contains(&self, i: usize, j: usize) -> bool {
        self.x.contains(&i) && self.y.contains(&j)
    }
}

fn axis_range(lo: f64, hi: f64, p: usize) -> Range<usize> {
    let pf = p as f64;
    let start = ((pf * lo).floor().max(0.0) as usize).min(p);
    let end = ((pf * hi).floor().max(0.0) as usize).min(p);
    if end > start {
        start..end
    } else {
        // thinner than one cell: keep a single cell rather than dropping the object
        let s = start.min(p - 1);
        s..s + 1
    }
}

/// `[floor(p*x1), floor(p*x2)) x [floor(p*y1), floor(p*y2))`, with empty
/// ranges widened to one cell.
pub fn rasterize_box(bbox: &BBox, p: usize) -> CellRange {
    assert!(p >= 1, "resolution must be at least 1");
    CellRange {
        x: axis_range(bbox.x1(), bbox.x2(), p),
        y: axis_range(bbox.y1(), bbox.y2(), p),
    }
}

/// Binary `p x p x N` cross-attention mask.
#[derive(Debug, Clone)]
pub struct CrossMask {
    p: usize,
    n: usize,
    bits: Bits,
    fallback_cells: usize,
}

impl PartialEq for CrossMask {
    fn eq(&self, other: &Self) -> bool {
        self.p == other.p && self.n == other.n && self.bits == other.bits
    }
}

impl CrossMask {
    pub fn zeros(p: usize, n: usize) -> Self {
        Self {
            p,
            n,
            bits: bitvec![u8, Lsb0; 0; p * p * n],
            fallback_cells: 0,
        }
    }

    pub fn ones(p: usize, n: usize) -> Self {
        Self {
            p,
            n,
            bits: bitvec![u8, Lsb0; 1; p * p * n],
            fallback_cells: 0,
        }
    }

    pub(crate) fn from_bits(p: usize, n: usize, bits: Bits) -> Self {
        debug_assert_eq!(bits.len(), p * p * n);
        Self {
            p,
            n,
            bits,
            fallback_cells: 0,
        }
    }

    pub fn resolution(&self) -> usize {
        self.p
    }

    pub fn token_count(&self) -> usize {
        self.n
    }

    pub fn bits(&self) -> &Bits {
        &self.bits
    }

    /// Cells whose every token was masked and which were reset to all ones.
    pub fn fallback_cells(&self) -> usize {
        self.fallback_cells
    }

    fn offset(&self, i: usize, j: usize, t: usize) -> usize {
        (i * self.p + j) * self.n + t
    }

    pub fn get(&self, i: usize, j: usize, t: usize) -> bool {
        self.bits[self.offset(i, j, t)]
    }

    pub fn set(&mut self, i: usize, j: usize, t: usize, v: bool) {
        let o = self.offset(i, j, t);
        self.bits.set(o, v);
    }

    /// Token permissions of the cell with flat index `p * i + j`.
    pub fn cell(&self, flat: usize) -> &BitSlice<u8, Lsb0> {
        &self.bits[flat * self.n..(flat + 1) * self.n]
    }

    /// Mirror along the x axis (`i -> p - 1 - i`).
    pub fn reversed_columns(&self) -> Self {
        let mut out = Self::zeros(self.p, self.n);
        for i in 0..self.p {
            for j in 0..self.p {
                for t in 0..self.n {
                    out.set(self.p - 1 - i, j, t, self.get(i, j, t));
                }
            }
        }
        out
    }

    pub fn count_ones(&self) -> usize {
        self.bits.count_ones()
    }
}

/// Binary `p^2 x p^2` self-attention mask (row = query cell, column = key cell).
#[derive(Debug, Clone, PartialEq)]
pub struct SelfMask {
    p: usize,
    bits: Bits,
}

impl SelfMask {
    pub fn ones(p: usize) -> Self {
        let cells = p * p;
        Self {
            p,
            bits: bitvec![u8, Lsb0; 1; cells * cells],
        }
    }

    pub fn zeros(p: usize) -> Self {
        let cells = p * p;
        Self {
            p,
            bits: bitvec![u8, Lsb0; 0; cells * cells],
        }
    }

    pub fn set(&mut self, q: usize, k: usize, v: bool) {
        let cells = self.cells();
        assert!(q < cells && k < cells, "self mask index out of range");
        self.bits.set(q * cells + k, v);
    }

    pub(crate) fn from_bits(p: usize, bits: Bits) -> Self {
        debug_assert_eq!(bits.len(), p.pow(4));
        Self { p, bits }
    }

    pub fn resolution(&self) -> usize {
        self.p
    }

    pub fn cells(&self) -> usize {
        self.p * self.p
    }

    pub fn bits(&self) -> &Bits {
        &self.bits
    }

    pub fn get(&self, q: usize, k: usize) -> bool {
        self.bits[q * self.cells() + k]
    }

    pub fn row(&self, q: usize) -> &BitSlice<u8, Lsb0> {
        let c = self.cells();
        &self.bits[q * c..(q + 1) * c]
    }

    fn row_mut(&mut self, q: usize) -> &mut BitSlice<u8, Lsb0> {
        let c = self.cells();
        &mut self.bits[q * c..(q + 1) * c]
    }
}

fn check_bound(bound: &BoundLayout, p: usize) -> Result<(), MaskError> {
    if p == 0 {
        return Err(MaskError::InvalidResolution);
    }
    let token_count = bound.token_count();
    if token_count == 0 {
        return Err(MaskError::NoTokens);
    }
    for b in &bound.bindings {
        if b.span.start >= b.span.end || b.span.end > token_count {
            return Err(MaskError::SpanOutOfRange {
                phrase: b.phrase.clone(),
                start: b.span.start,
                end: b.span.end,
                token_count,
            });
        }
    }
    Ok(())
}

pub fn compile_cross_mask(bound: &BoundLayout, p: usize) -> Result<CrossMask, MaskError> {
    check_bound(bound, p)?;
    let n = bound.token_count();
    let mut mask = CrossMask::zeros(p, n);

    for (span, bbox) in bound.instances() {
        let cells = rasterize_box(&bbox, p);
        for i in cells.x.clone() {
            for j in cells.y.clone() {
                let base = mask.offset(i, j, 0);
                mask.bits[base + span.start..base + span.end].fill(true);
            }
        }
    }

    let object_tokens = bound.object_token_mask();
    for flat in 0..p * p {
        for (t, &is_object) in object_tokens.iter().enumerate() {
            if !is_object {
                mask.bits.set(flat * n + t, true);
            }
        }
    }

    for flat in 0..p * p {
        let cell = &mut mask.bits[flat * n..(flat + 1) * n];
        if cell.not_any() {
            cell.fill(true);
            mask.fallback_cells += 1;
        }
    }
    if mask.fallback_cells > 0 {
        log::warn!(
            "cross mask at p={p}: {} cells had no permitted token; reset to all ones",
            mask.fallback_cells
        );
    }
    Ok(mask)
}

/// Flat cell indices `p * i + j` covered by each object instance.
pub fn object_index_sets(bound: &BoundLayout, p: usize) -> Vec<Bits> {
    bound
        .instances()
        .map(|(_, bbox)| {
            let cells = rasterize_box(&bbox, p);
            let mut set = bitvec![u8, Lsb0; 0; p * p];
            for i in cells.x.clone() {
                for j in cells.y.clone() {
                    set.set(p * i + j, true);
                }
            }
            set
        })
        .collect()
}

/// Build one mask per object and fold them row by row.
///
/// Each object mask permits `I_k x I_k` and leaves rows outside `I_k` all
/// ones. The fold keeps the accumulator's rows outside the new object, ORs
/// rows claimed by both, and takes the object's row where only the object
/// claims it. A row counts as claimed by the accumulator once any folded
/// object contains that cell.
pub fn compile_self_mask(bound: &BoundLayout, p: usize) -> Result<SelfMask, MaskError> {
    check_bound(bound, p)?;
    let cells = p * p;
    let index_sets = object_index_sets(bound, p);
    let Some((first, rest)) = index_sets.split_first() else {
        return Ok(SelfMask::ones(p));
    };

    // an object's own mask has row `members` for each member cell and all ones elsewhere
    let mut acc = SelfMask::ones(p);
    for q in first.iter_ones() {
        acc.row_mut(q).copy_from_bitslice(first);
    }
    let mut acc_rows = first.clone();
    for members in rest {
        for q in members.iter_ones() {
            if acc_rows[q] {
                *acc.row_mut(q) |= members.as_bitslice();
            } else {
                acc.row_mut(q).copy_from_bitslice(members);
            }
        }
        acc_rows |= members.as_bitslice();
    }
    debug_assert_eq!(acc.bits.len(), cells * cells);
    Ok(acc)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ResolutionSchedule {
    pub cross: Vec<usize>,
    pub self_attn: Vec<usize>,
}

impl Default for ResolutionSchedule {
    fn default() -> Self {
        Self {
            cross: vec![64, 32, 16, 8],
            self_attn: vec![16, 8],
        }
    }
}

#[derive(Debug, Clone)]
pub struct MaskPyramid {
    pub cross: BTreeMap<usize, CrossMask>,
    pub self_attn: BTreeMap<usize, SelfMask>,
    pub schedule: ResolutionSchedule,
}

/// Compile every scheduled resolution directly from the normalized boxes.
pub fn compile_pyramid(bound: &BoundLayout, schedule: &ResolutionSchedule) -> Result<MaskPyramid, MaskError> {
    let cross = schedule
        .cross
        .par_iter()
        .map(|&p| compile_cross_mask(bound, p).map(|m| (p, m)))
        .collect::<Result<BTreeMap<_, _>, _>>()?;
    let self_attn = schedule
        .self_attn
        .par_iter()
        .map(|&p| compile_self_mask(bound, p).map(|m| (p, m)))
        .collect::<Result<BTreeMap<_, _>, _>>()?;
    Ok(MaskPyramid {
        cross,
        self_attn,
        schedule: schedule.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layout::{CanvasSpec, Layout, ObjectEntry};
    use crate::tokens::{Binding, TokenSeq, TokenSpan, Token};

    fn bx(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    /// Bound layout over `n` dummy tokens with explicit spans.
    pub(crate) fn synthetic(n: usize, objects: Vec<(TokenSpan, Vec<BBox>)>) -> BoundLayout {
        let entries: Vec<_> = objects
            .iter()
            .enumerate()
            .map(|(k, (_, boxes))| ObjectEntry::visual(format!("o{k}"), boxes.clone()))
            .collect();
        let bindings = objects
            .iter()
            .enumerate()
            .map(|(k, (span, _))| Binding {
                entry_index: k,
                phrase: format!("o{k}"),
                span: *span,
            })
            .collect();
        BoundLayout {
            layout: Layout::new(CanvasSpec::default(), "", entries),
            tokens: TokenSeq {
                tokens: (0..n)
                    .map(|t| Token {
                        text: format!("t{t}"),
                        span: (t, t + 1),
                    })
                    .collect(),
                tokenizer_id: "synthetic".into(),
            },
            bindings,
        }
    }

    #[test]
    fn rasterize_examples() {
        let r = rasterize_box(&bx(0.25, 0.0, 0.5, 0.5), 64);
        assert_eq!((r.x, r.y), (16..32, 0..32));
        for p in [1, 3, 8, 64] {
            let r = rasterize_box(&bx(0.0, 0.0, 1.0, 1.0), p);
            assert_eq!((r.x, r.y), (0..p, 0..p));
        }
        let r = rasterize_box(&bx(0.10, 0.10, 0.11, 0.90), 8);
        assert_eq!((r.x, r.y), (0..1, 0..7));
    }

    #[test]
    fn thin_box_at_right_edge_stays_in_grid() {
        let r = rasterize_box(&bx(0.999, 0.0, 1.0, 1.0), 4);
        assert_eq!(r.x, 3..4);
    }

    #[test]
    fn cross_mask_single_object() {
        let span = TokenSpan { start: 0, end: 3 };
        let bound = synthetic(5, vec![(span, vec![bx(0.0, 0.0, 0.5, 0.5)])]);
        let m = compile_cross_mask(&bound, 4).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                for t in 0..3 {
                    assert_eq!(m.get(i, j, t), i < 2 && j < 2, "cell ({i},{j}) token {t}");
                }
                assert!(m.get(i, j, 3) && m.get(i, j, 4));
            }
        }
        assert_eq!(m.fallback_cells(), 0);
    }

    #[test]
    fn cross_mask_without_objects_is_all_ones() {
        let bound = synthetic(4, vec![]);
        assert_eq!(compile_cross_mask(&bound, 8).unwrap(), CrossMask::ones(8, 4));
    }

    #[test]
    fn overlapping_boxes_permit_both_spans() {
        let a = TokenSpan { start: 0, end: 2 };
        let b = TokenSpan { start: 3, end: 5 };
        let bound = synthetic(
            6,
            vec![(a, vec![bx(0.0, 0.0, 0.75, 0.75)]), (b, vec![bx(0.25, 0.25, 1.0, 1.0)])],
        );
        let m = compile_cross_mask(&bound, 4).unwrap();
        // (1,1) and (2,2) lie in both boxes
        for (i, j) in [(1, 1), (2, 2), (1, 2)] {
            assert!((0..6).all(|t| m.get(i, j, t)));
        }
        assert!(m.get(0, 0, 0) && !m.get(0, 0, 3));
        assert!(!m.get(3, 3, 0) && m.get(3, 3, 4));
        assert_eq!(m, cross_mask_oracle(&bound, 4).unwrap());
    }

    #[test]
    fn all_object_tokens_trigger_fallback() {
        let span = TokenSpan { start: 0, end: 1 };
        let bound = synthetic(1, vec![(span, vec![bx(0.0, 0.0, 0.5, 0.5)])]);
        let m = compile_cross_mask(&bound, 2).unwrap();
        assert_eq!(m.fallback_cells(), 3);
        assert_eq!(m, CrossMask::ones(2, 1));
        let full = synthetic(1, vec![(span, vec![bx(0.0, 0.0, 1.0, 1.0)])]);
        assert_eq!(compile_cross_mask(&full, 4).unwrap(), CrossMask::ones(4, 1));
    }

    #[test]
    fn span_out_of_range_is_rejected() {
        let bound = synthetic(2, vec![(TokenSpan { start: 1, end: 3 }, vec![bx(0.0, 0.0, 0.5, 0.5)])]);
        assert!(matches!(compile_cross_mask(&bound, 4), Err(MaskError::SpanOutOfRange { .. })));
        assert_eq!(compile_cross_mask(&synthetic(0, vec![]), 4), Err(MaskError::NoTokens));
        assert_eq!(compile_cross_mask(&synthetic(1, vec![]), 0), Err(MaskError::InvalidResolution));
    }

    #[test]
    fn self_mask_trivial_cases() {
        let span = TokenSpan { start: 0, end: 1 };
        let full = synthetic(2, vec![(span, vec![bx(0.0, 0.0, 1.0, 1.0)])]);
        assert_eq!(compile_self_mask(&full, 4).unwrap(), SelfMask::ones(4));
        assert_eq!(compile_self_mask(&synthetic(2, vec![]), 4).unwrap(), SelfMask::ones(4));
    }

    #[test]
    fn self_mask_two_disjoint_cells() {
        // p=2: I_1 = {0} is cell (0,0), I_2 = {3} is cell (1,1)
        let span = TokenSpan { start: 0, end: 1 };
        let bound = synthetic(
            2,
            vec![(span, vec![bx(0.0, 0.0, 0.5, 0.5)]), (span, vec![bx(0.5, 0.5, 1.0, 1.0)])],
        );
        let sm = compile_self_mask(&bound, 2).unwrap();
        let rows: Vec<Vec<bool>> = (0..4).map(|q| sm.row(q).iter().map(|b| *b).collect()).collect();
        assert_eq!(rows[0], [true, false, false, false]);
        assert_eq!(rows[3], [false, false, false, true]);
        assert_eq!(rows[1], [true; 4]);
        assert_eq!(rows[2], [true; 4]);
        assert_eq!(sm, self_mask_oracle(&bound, 2).unwrap());
    }

    #[test]
    fn self_mask_with_full_canvas_object_matches_rules() {
        // a small object plus one covering every cell: every row is claimed by
        // the full object, so every row must be all ones
        let span = TokenSpan { start: 0, end: 1 };
        for order in [[0, 1], [1, 0]] {
            let boxes = [bx(0.0, 0.0, 0.5, 0.5), bx(0.0, 0.0, 1.0, 1.0)];
            let bound = synthetic(
                1,
                order.iter().map(|&k| (span, vec![boxes[k]])).collect(),
            );
            let sm = compile_self_mask(&bound, 2).unwrap();
            assert_eq!(sm, SelfMask::ones(2));
            assert_eq!(sm, self_mask_oracle(&bound, 2).unwrap());
        }
    }

    /// Reading "non-trivial" as "row differs from all ones" disagrees with the
    /// declarative rules once an object covers the whole grid; membership is
    /// the reading that matches them.
    #[test]
    fn row_inequality_reading_diverges_on_full_canvas_objects() {
        let p = 2;
        let small: Bits = bitvec![u8, Lsb0; 1, 0, 0, 0];
        let full: Bits = bitvec![u8, Lsb0; 1; 4];
        let row_of = |members: &Bits, q: usize| -> Bits {
            if members[q] { members.clone() } else { bitvec![u8, Lsb0; 1; 4] }
        };
        // fold small then full, deciding non-triviality by row content
        let mut acc: Vec<Bits> = (0..p * p).map(|q| row_of(&small, q)).collect();
        for (q, row) in acc.iter_mut().enumerate() {
            let cur = row_of(&full, q);
            let cur_nontrivial = !cur.all();
            let acc_nontrivial = !row.all();
            if cur_nontrivial && acc_nontrivial {
                *row |= cur.as_bitslice();
            } else if cur_nontrivial {
                *row = cur;
            }
        }
        assert_eq!(acc[0], bitvec![u8, Lsb0; 1, 0, 0, 0]);
        let span = TokenSpan { start: 0, end: 1 };
        let bound = synthetic(
            1,
            vec![(span, vec![bx(0.0, 0.0, 0.5, 0.5)]), (span, vec![bx(0.0, 0.0, 1.0, 1.0)])],
        );
        assert!(compile_self_mask(&bound, p).unwrap().row(0).all());
    }

    #[test]
    fn self_mask_overlap_rules() {
        let span = TokenSpan { start: 0, end: 1 };
        // A covers columns 0..2, B covers columns 1..3 of a 4x4 grid
        let bound = synthetic(
            1,
            vec![(span, vec![bx(0.0, 0.0, 0.5, 1.0)]), (span, vec![bx(0.25, 0.0, 0.75, 1.0)])],
        );
        let sm = compile_self_mask(&bound, 4).unwrap();
        let flat = |i: usize, j: usize| 4 * i + j;
        assert!(!sm.get(flat(0, 0), flat(2, 0)), "A-only query, B-only key");
        assert!(sm.get(flat(1, 0), flat(2, 3)), "query in A and B, key in B");
        assert!(sm.row(flat(3, 0)).all(), "outside every object");
    }

    #[test]
    fn pyramid_default_schedule() {
        let span = TokenSpan { start: 0, end: 1 };
        let bound = synthetic(3, vec![(span, vec![bx(0.0, 0.0, 0.5, 0.5)])]);
        let pyr = compile_pyramid(&bound, &ResolutionSchedule::default()).unwrap();
        assert_eq!(pyr.cross.keys().copied().collect::<Vec<_>>(), [8, 16, 32, 64]);
        assert_eq!(pyr.self_attn.keys().copied().collect::<Vec<_>>(), [8, 16]);
        let m8 = &pyr.cross[&8];
        assert!(m8.get(3, 3, 0) && !m8.get(4, 0, 0) && !m8.get(0, 4, 0));

        let small = ResolutionSchedule {
            cross: vec![4],
            self_attn: vec![],
        };
        let pyr = compile_pyramid(&bound, &small).unwrap();
        assert_eq!(pyr.cross.len(), 1);
        assert!(pyr.self_attn.is_empty());
        let m4 = &pyr.cross[&4];
        assert!(m4.get(1, 1, 0) && !m4.get(2, 1, 0));
    }
}
