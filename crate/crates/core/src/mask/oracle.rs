//! Brute-force mask construction straight from the attention rules.
//!
//! Nothing here shares code with the compiler beyond the mask containers;
//! cell membership is re-derived from the floor rule per cell.

use bitvec::prelude::*;

use super::{check_bound, Bits, CrossMask, MaskError, SelfMask};
use crate::layout::BBox;
use crate::tokens::BoundLayout;

fn axis_contains(lo: f64, hi: f64, p: usize, cell: usize) -> bool {
    let first = (p as f64 * lo).floor() as usize;
    let past = (p as f64 * hi).floor() as usize;
    if first < past {
        first <= cell && cell < past
    } else {
        cell == first.min(p - 1)
    }
}

fn cell_in_box(b: &BBox, p: usize, i: usize, j: usize) -> bool {
    axis_contains(b.x1(), b.x2(), p, i) && axis_contains(b.y1(), b.y2(), p, j)
}

/// Per `(i, j, n)`: a token bound to an object is permitted only inside that
/// object's boxes; a token bound to no object is permitted everywhere.
pub fn cross_mask_oracle(bound: &BoundLayout, p: usize) -> Result<CrossMask, MaskError> {
    check_bound(bound, p)?;
    let n = bound.token_count();
    let instances: Vec<_> = bound.instances().collect();
    let mut bits = Bits::with_capacity(p * p * n);
    for i in 0..p {
        for j in 0..p {
            let mut cell = bitvec![u8, Lsb0; 0; n];
            for t in 0..n {
                let owners: Vec<_> = instances.iter().filter(|(span, _)| span.contains(t)).collect();
                let allowed = if owners.is_empty() {
                    true
                } else {
                    owners.iter().any(|(_, b)| cell_in_box(b, p, i, j))
                };
                cell.set(t, allowed);
            }
            if cell.not_any() {
                cell.fill(true);
            }
            bits.extend_from_bitslice(&cell);
        }
    }
    Ok(CrossMask::from_bits(p, n, bits))
}

/// Per `(q, k)`: a query inside some object sees keys sharing at least one
/// object with it; a query outside every object sees everything.
pub fn self_mask_oracle(bound: &BoundLayout, p: usize) -> Result<SelfMask, MaskError> {
    check_bound(bound, p)?;
    let cells = p * p;
    let boxes: Vec<BBox> = bound.instances().map(|(_, b)| b).collect();
    let member: Vec<Vec<bool>> = (0..cells)
        .map(|flat| boxes.iter().map(|b| cell_in_box(b, p, flat / p, flat % p)).collect())
        .collect();
    let mut bits = Bits::with_capacity(cells * cells);
    for q in 0..cells {
        let in_any = member[q].iter().any(|&m| m);
        for key in 0..cells {
            let shared = member[q].iter().zip(&member[key]).any(|(&a, &b)| a && b);
            bits.push(!in_any || shared);
        }
    }
    Ok(SelfMask::from_bits(p, bits))
}
