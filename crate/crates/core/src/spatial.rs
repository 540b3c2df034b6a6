//! Uniform-grid spatial hash for fixed-radius neighbor queries.

use alloc::collections::BTreeMap;
use alloc::vec::Vec;

use crate::math::{dist2, floor, Vec3};

type Cell = (i64, i64, i64);

pub(crate) struct Grid<'a> {
    points: &'a [Vec3],
    cell: f64,
    cells: BTreeMap<Cell, Vec<usize>>,
}

impl<'a> Grid<'a> {
    /// `cell` should be at least the query radius so that a query only has to
    /// visit the 27 surrounding cells.
    pub(crate) fn new(points: &'a [Vec3], cell: f64) -> Self {
        let mut cells: BTreeMap<Cell, Vec<usize>> = BTreeMap::new();
        for (i, p) in points.iter().enumerate() {
            cells.entry(key(*p, cell)).or_default().push(i);
        }
        Self {
            points,
            cell,
            cells,
        }
    }

    /// Indices within `radius` (inclusive) of `q`, in ascending order.
    pub(crate) fn within(&self, q: Vec3, radius: f64, out: &mut Vec<usize>) {
        out.clear();
        let r2 = radius * radius;
        let (cx, cy, cz) = key(q, self.cell);
        for dx in -1..=1 {
            for dy in -1..=1 {
                for dz in -1..=1 {
                    if let Some(bucket) = self.cells.get(&(cx + dx, cy + dy, cz + dz)) {
                        out.extend(
                            bucket
                                .iter()
                                .copied()
                                .filter(|&j| dist2(self.points[j], q) <= r2),
                        );
                    }
                }
            }
        }
        out.sort_unstable();
    }

    /// Nearest point within `radius`, ties by lower index.
    pub(crate) fn nearest_within(&self, q: Vec3, radius: f64) -> Option<(usize, f64)> {
        let r2 = radius * radius;
        let (cx, cy, cz) = key(q, self.cell);
        let mut best: Option<(usize, f64)> = None;
        for dx in -1..=1 {
            for dy in -1..=1 {
                for dz in -1..=1 {
                    let Some(bucket) = self.cells.get(&(cx + dx, cy + dy, cz + dz)) else {
                        continue;
                    };
                    for &j in bucket {
                        let d = dist2(self.points[j], q);
                        if d > r2 {
                            continue;
                        }
                        best = match best {
                            Some((bj, bd)) if bd < d || (bd == d && bj < j) => Some((bj, bd)),
                            _ => Some((j, d)),
                        };
                    }
                }
            }
        }
        best
    }
}

fn key(p: Vec3, cell: f64) -> Cell {
    (
        floor(p[0] / cell) as i64,
        floor(p[1] / cell) as i64,
        floor(p[2] / cell) as i64,
    )
}
