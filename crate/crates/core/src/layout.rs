//! Region layouts: which prompt conditions which part of the frame.
//!
//! A layout is a set of rectangles in normalized [0,1] coordinates, each
//! pointing at a prompt slot, plus an optional background slot for
//! uncovered cells. Rasterization converts the rectangles to a per-cell
//! slot map at any feature resolution. Rect edges are snapped with
//! `ceil(edge * cells)`, which partitions cells without gaps and makes
//! earlier strips absorb the remainder when the split is uneven (three
//! strips across width 8 become 3, 3, 2 cells wide). Edges within 1e-4
//! of a cell boundary count as on it, so the f32 representation of
//! ratios like 1/6 cannot shift an edge by a whole cell. Overlaps
//! resolve by unique priority, higher value winning.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Region {
    /// x0, y0, x1, y1 in normalized coordinates, half-open.
    pub rect: [f32; 4],
    /// Index into the prompt list supplied alongside the layout.
    pub slot: usize,
    /// Higher value wins where regions overlap; must be unique.
    pub priority: i32,
}

impl Region {
    pub fn area(&self) -> f32 {
        (self.rect[2] - self.rect[0]).max(0.0) * (self.rect[3] - self.rect[1]).max(0.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionLayout {
    pub regions: Vec<Region>,
    /// Prompt slot for cells no region covers; absent means full coverage
    /// is required and gaps are an error at rasterization time.
    pub background_slot: Option<usize>,
}

impl RegionLayout {
    pub fn validate(&self) -> Result<()> {
        if self.regions.is_empty() && self.background_slot.is_none() {
            return Err(Error::Layout("layout has no regions and no background".into()));
        }
        let mut prios: Vec<i32> = self.regions.iter().map(|r| r.priority).collect();
        prios.sort_unstable();
        prios.dedup();
        if prios.len() != self.regions.len() {
            return Err(Error::Layout("region priorities must be unique".into()));
        }
        for (i, r) in self.regions.iter().enumerate() {
            let [x0, y0, x1, y1] = r.rect;
            let in_range = (0.0..=1.0).contains(&x0)
                && (0.0..=1.0).contains(&y0)
                && x1 <= 1.0
                && y1 <= 1.0;
            if !in_range || x1 <= x0 || y1 <= y0 {
                return Err(Error::Layout(format!(
                    "region {i} rect {:?} is empty or out of [0,1]",
                    r.rect
                )));
            }
        }
        Ok(())
    }

    /// `n` equal vertical strips, slot i covering the i-th strip from the
    /// left. Always fully covers the frame.
    pub fn uniform(n: usize) -> Result<RegionLayout> {
        if !(1..=8).contains(&n) {
            return Err(Error::Layout(format!("strip count {n} outside 1..=8")));
        }
        let regions = (0..n)
            .map(|i| Region {
                rect: [i as f32 / n as f32, 0.0, (i + 1) as f32 / n as f32, 1.0],
                slot: i,
                priority: i as i32,
            })
            .collect();
        Ok(RegionLayout {
            regions,
            background_slot: None,
        })
    }

    /// `n` subject strips confined to a central horizontal band, with the
    /// rest of the frame conditioned on slot `n` (the background prompt).
    pub fn banded(n: usize) -> Result<RegionLayout> {
        if !(1..=8).contains(&n) {
            return Err(Error::Layout(format!("strip count {n} outside 1..=8")));
        }
        let regions = (0..n)
            .map(|i| Region {
                rect: [i as f32 / n as f32, 0.2, (i + 1) as f32 / n as f32, 0.8],
                slot: i,
                priority: i as i32,
            })
            .collect();
        Ok(RegionLayout {
            regions,
            background_slot: Some(n),
        })
    }

    /// `n` subjects in the cells of a 2x2 grid (left-to-right, top to
    /// bottom). With n < 4 the leftover cells route to a background slot.
    /// Gives each subject a taller region than `uniform` can once n > 2.
    pub fn quad(n: usize) -> Result<RegionLayout> {
        if !(1..=4).contains(&n) {
            return Err(Error::Layout(format!("quad subject count {n} outside 1..=4")));
        }
        let cells = [
            [0.0, 0.0, 0.5, 0.5],
            [0.5, 0.0, 1.0, 0.5],
            [0.0, 0.5, 0.5, 1.0],
            [0.5, 0.5, 1.0, 1.0],
        ];
        let regions = (0..n)
            .map(|i| Region {
                rect: cells[i],
                slot: i,
                priority: i as i32,
            })
            .collect();
        Ok(RegionLayout {
            regions,
            background_slot: if n < 4 { Some(n) } else { None },
        })
    }

    /// Number of prompt slots this layout references (max slot + 1).
    pub fn slot_count(&self) -> usize {
        let region_max = self.regions.iter().map(|r| r.slot + 1).max().unwrap_or(0);
        let bg = self.background_slot.map(|s| s + 1).unwrap_or(0);
        region_max.max(bg)
    }

    /// Per-cell prompt slots at resolution h x w, row-major.
    pub fn rasterize(&self, h: usize, w: usize) -> Result<Vec<usize>> {
        self.validate()?;
        if h == 0 || w == 0 {
            return Err(Error::Layout(format!("resolution {h}x{w} is empty")));
        }
        // Products within 1e-4 of a whole cell count as exactly on the
        // boundary; stored edges are f32 ratios (1/6 rounds up), and a
        // bare ceil would otherwise shift the edge a full cell and can
        // leave a slot with no cells at all.
        let snap = |edge: f32, cells: usize| -> usize {
            let p = edge as f64 * cells as f64;
            let near = p.round();
            let snapped = if (p - near).abs() < 1e-4 { near } else { p.ceil() };
            (snapped as usize).min(cells)
        };
        let mut best: Vec<Option<(i32, usize)>> = vec![None; h * w];
        for r in &self.regions {
            let (cx0, cx1) = (snap(r.rect[0], w), snap(r.rect[2], w));
            let (cy0, cy1) = (snap(r.rect[1], h), snap(r.rect[3], h));
            for y in cy0..cy1 {
                for x in cx0..cx1 {
                    let cell = &mut best[y * w + x];
                    if cell.map_or(true, |(p, _)| r.priority > p) {
                        *cell = Some((r.priority, r.slot));
                    }
                }
            }
        }
        let mut map = Vec::with_capacity(h * w);
        for (i, cell) in best.into_iter().enumerate() {
            match (cell, self.background_slot) {
                (Some((_, slot)), _) => map.push(slot),
                (None, Some(bg)) => map.push(bg),
                (None, None) => {
                    return Err(Error::Layout(format!(
                        "cell ({}, {}) is covered by no region and the layout has no background slot",
                        i / w,
                        i % w
                    )))
                }
            }
        }
        Ok(map)
    }

    /// Assign priorities automatically: smaller-area regions win, ties
    /// broken by list order (earlier wins). Used when layouts come from
    /// config files without explicit priorities.
    pub fn with_auto_priorities(mut self) -> RegionLayout {
        let mut order: Vec<usize> = (0..self.regions.len()).collect();
        order.sort_by(|&a, &b| {
            self.regions[a]
                .area()
                .partial_cmp(&self.regions[b].area())
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.cmp(&b))
        });
        // First in `order` = smallest area = highest priority value.
        let n = order.len() as i32;
        for (rank, idx) in order.into_iter().enumerate() {
            self.regions[idx].priority = n - 1 - rank as i32;
        }
        self
    }

    pub fn from_json(s: &str) -> Result<RegionLayout> {
        let layout: RegionLayout = serde_json::from_str(s)?;
        layout.validate()?;
        Ok(layout)
    }
}
