//! Cell orderings over the (time x entity) grid and the per-location binary
//! kernel masks compiled from them.
//!
//! A locally masked convolution multiplies its kernel by a location-specific
//! binary mask so that every output cell only reads cells that come earlier
//! in a chosen ordering. The first layer of a stack uses exclusive masks (no
//! self-connection), subsequent layers inclusive ones.

use crate::error::{Error, Result};

/// Scan pattern over the (time, entity) grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum OrderingKind {
    /// Visit frames t = 0..U-1; entities left-to-right on even t,
    /// right-to-left on odd t.
    TimeMajorSCurve,
    /// Visit entities n = 0..N-1; time forward on even n, backward on odd n.
    EntityMajorSCurve,
}

/// A bijection from grid cells to visit indices in [0, U*N).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Ordering {
    pub time_steps: usize,
    pub entities: usize,
    /// rank[t * entities + n] = visit index of cell (t, n).
    rank: Vec<usize>,
}

impl Ordering {
    pub fn rank(&self, t: usize, n: usize) -> usize {
        self.rank[t * self.entities + n]
    }

    pub fn cells(&self) -> usize {
        self.time_steps * self.entities
    }
}

pub fn generate_ordering(kind: OrderingKind, time_steps: usize, entities: usize) -> Ordering {
    assert!(
        time_steps >= 1 && entities >= 1,
        "grid must be at least 1x1"
    );
    let mut rank = vec![0usize; time_steps * entities];
    let mut next = 0usize;
    match kind {
        OrderingKind::TimeMajorSCurve => {
            for t in 0..time_steps {
                let cols: Vec<usize> = if t % 2 == 0 {
                    (0..entities).collect()
                } else {
                    (0..entities).rev().collect()
                };
                for n in cols {
                    rank[t * entities + n] = next;
                    next += 1;
                }
            }
        }
        OrderingKind::EntityMajorSCurve => {
            for n in 0..entities {
                let rows: Vec<usize> = if n % 2 == 0 {
                    (0..time_steps).collect()
                } else {
                    (0..time_steps).rev().collect()
                };
                for t in rows {
                    rank[t * entities + n] = next;
                    next += 1;
                }
            }
        }
    }
    Ordering {
        time_steps,
        entities,
        rank,
    }
}

/// Per-output-cell binary kernel masks for one (ordering, kernel, dilation,
/// mode) combination. Immutable after construction and shareable.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LocalMaskSet {
    pub kernel: usize,
    pub dilation: usize,
    pub time_steps: usize,
    pub entities: usize,
    pub inclusive: bool,
    /// masks[cell] is a kernel*kernel row-major 0/1 matrix; cell = t*N + n.
    pub(crate) masks: Vec<Vec<u8>>,
}

impl LocalMaskSet {
    pub fn mask(&self, t: usize, n: usize) -> &[u8] {
        &self.masks[t * self.entities + n]
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.time_steps, self.entities)
    }
}

/// Compile an ordering into kernel masks.
///
/// A mask entry is 1 iff the (dilated) offset lands inside the grid and the
/// reached cell has strictly lower rank (exclusive) or lower-or-equal rank
/// (inclusive) than the output cell.
pub fn build_mask_set(
    ordering: &Ordering,
    kernel: usize,
    dilation: usize,
    inclusive: bool,
) -> Result<LocalMaskSet> {
    if kernel.is_multiple_of(2) {
        return Err(Error::InvalidArgument(format!(
            "mask kernel must be odd, got {kernel}"
        )));
    }
    if dilation == 0 {
        return Err(Error::InvalidArgument("dilation must be >= 1".into()));
    }
    let (u, n) = (ordering.time_steps, ordering.entities);
    let r = (kernel / 2) as isize;
    let d = dilation as isize;
    let mut masks = Vec::with_capacity(u * n);
    for t in 0..u {
        for e in 0..n {
            let own = ordering.rank(t, e);
            let mut m = vec![0u8; kernel * kernel];
            for dy in -r..=r {
                for dx in -r..=r {
                    let tt = t as isize + d * dy;
                    let ee = e as isize + d * dx;
                    if tt < 0 || tt >= u as isize || ee < 0 || ee >= n as isize {
                        continue;
                    }
                    let other = ordering.rank(tt as usize, ee as usize);
                    let visible = if inclusive { other <= own } else { other < own };
                    if visible {
                        m[((dy + r) * kernel as isize + (dx + r)) as usize] = 1;
                    }
                }
            }
            masks.push(m);
        }
    }
    Ok(LocalMaskSet {
        kernel,
        dilation,
        time_steps: u,
        entities: n,
        inclusive,
        masks,
    })
}
