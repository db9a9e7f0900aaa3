//! Window partitioning of a patch grid, with optional cyclic shift.
//!
//! The grid is padded on the bottom/right up to multiples of the window size
//! `N`. A shifted partition moves window boundaries by `⌊N/2⌋` in both axes
//! by cyclically rolling the padded grid, so a node at padded coordinate `y`
//! sits at `(y − s) mod H_pad` in the window frame. Nodes whose rows (or
//! columns) wrapped around form separate regions that must not interact.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WindowPartition {
    rows: usize,
    cols: usize,
    size: usize,
    shift: usize,
    shifted: bool,
    padded_rows: usize,
    padded_cols: usize,
    /// `windows · N²` entries: the real node (row-major index) in each slot.
    slots: Vec<Option<usize>>,
    /// Wrap region of each slot: bit 0 = column wrapped, bit 1 = row wrapped.
    regions: Vec<u8>,
    node_window: Vec<usize>,
    node_slot: Vec<usize>,
}

/// Splits an `rows × cols` grid into `N × N` windows. `shift` moves the
/// window boundaries by `(⌊N/2⌋, ⌊N/2⌋)`.
pub fn partition_windows(rows: usize, cols: usize, size: usize, shift: bool) -> Result<WindowPartition> {
    if size == 0 || rows == 0 || cols == 0 {
        return Err(Error::Contract(format!("partition: grid {rows}×{cols} and window {size} must be positive")));
    }
    let padded_rows = rows.div_ceil(size) * size;
    let padded_cols = cols.div_ceil(size) * size;
    let s = if shift { size / 2 } else { 0 };
    let windows_x = padded_cols / size;
    let window_count = (padded_rows / size) * windows_x;
    let mut slots = vec![None; window_count * size * size];
    let mut regions = vec![0u8; slots.len()];
    let mut node_window = vec![0; rows * cols];
    let mut node_slot = vec![0; rows * cols];
    for y in 0..padded_rows {
        let wy = (y + padded_rows - s) % padded_rows;
        for x in 0..padded_cols {
            let wx = (x + padded_cols - s) % padded_cols;
            let window = (wy / size) * windows_x + wx / size;
            let slot = (wy % size) * size + wx % size;
            let flat = window * size * size + slot;
            regions[flat] = (u8::from(y < s) << 1) | u8::from(x < s);
            if y < rows && x < cols {
                let node = y * cols + x;
                slots[flat] = Some(node);
                node_window[node] = window;
                node_slot[node] = slot;
            }
        }
    }
    Ok(WindowPartition {
        rows,
        cols,
        size,
        shift: s,
        shifted: shift,
        padded_rows,
        padded_cols,
        slots,
        regions,
        node_window,
        node_slot,
    })
}

impl WindowPartition {
    pub fn grid(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn window_size(&self) -> usize {
        self.size
    }

    /// Shift offsets `(s_y, s_x)`.
    pub fn shift(&self) -> (usize, usize) {
        (self.shift, self.shift)
    }

    pub fn is_shifted(&self) -> bool {
        self.shifted
    }

    pub fn padded_grid(&self) -> (usize, usize) {
        (self.padded_rows, self.padded_cols)
    }

    /// Number of windows `k`.
    pub fn window_count(&self) -> usize {
        self.slots.len() / (self.size * self.size)
    }

    /// Slots per window, `N²`.
    pub fn slots_per_window(&self) -> usize {
        self.size * self.size
    }

    /// Node occupying each slot of window `w`; `None` for padding.
    pub fn window_slots(&self, w: usize) -> &[Option<usize>] {
        let n2 = self.slots_per_window();
        &self.slots[w * n2..(w + 1) * n2]
    }

    pub fn window_regions(&self, w: usize) -> &[u8] {
        let n2 = self.slots_per_window();
        &self.regions[w * n2..(w + 1) * n2]
    }

    /// `(window, slot)` of real node `(y, x)`.
    pub fn locate(&self, y: usize, x: usize) -> (usize, usize) {
        let node = y * self.cols + x;
        (self.node_window[node], self.node_slot[node])
    }

    /// Validity over the padded grid (unshifted frame), row-major.
    pub fn validity(&self) -> Vec<bool> {
        (0..self.padded_rows)
            .flat_map(|y| (0..self.padded_cols).map(move |x| y < self.rows && x < self.cols))
            .collect()
    }

    pub fn padded_cell_count(&self) -> usize {
        self.padded_rows * self.padded_cols - self.rows * self.cols
    }

    /// Whether two real nodes may exchange messages: same window and same
    /// wrap region.
    pub fn connected(&self, a: (usize, usize), b: (usize, usize)) -> bool {
        let (wa, sa) = self.locate(a.0, a.1);
        let (wb, sb) = self.locate(b.0, b.1);
        wa == wb && self.window_regions(wa)[sa] == self.window_regions(wb)[sb]
    }

    /// Row-major `N²×N²` attention mask for window `w`. Entry `(a, b)` is true
    /// when slot `b` is a real node in the same wrap region as slot `a`. A
    /// padding row attends only to itself so that every row stays well posed;
    /// such rows are discarded by callers.
    pub fn pair_mask(&self, w: usize) -> Vec<bool> {
        let n2 = self.slots_per_window();
        let slots = self.window_slots(w);
        let regions = self.window_regions(w);
        let mut mask = vec![false; n2 * n2];
        for a in 0..n2 {
            for b in 0..n2 {
                mask[a * n2 + b] = match slots[a] {
                    Some(_) => slots[b].is_some() && regions[a] == regions[b],
                    None => a == b,
                };
            }
        }
        mask
    }
}

/// Attention masks for every window of a shifted partition, separating
/// cyclically wrapped nodes from the rest and excluding padding.
pub fn shifted_mask(partition: &WindowPartition) -> Result<Vec<Vec<bool>>> {
    if !partition.is_shifted() {
        return Err(Error::Contract("shifted_mask: the partition was built without shift".into()));
    }
    Ok((0..partition.window_count()).map(|w| partition.pair_mask(w)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_tiling() {
        let p = partition_windows(4, 4, 2, false).unwrap();
        assert_eq!(p.window_count(), 4);
        assert_eq!(p.padded_cell_count(), 0);
        for w in 0..4 {
            assert_eq!(p.window_slots(w).iter().flatten().count(), 4);
        }
    }

    #[test]
    fn padded_grid() {
        let p = partition_windows(5, 5, 2, false).unwrap();
        assert_eq!(p.padded_grid(), (6, 6));
        assert_eq!(p.window_count(), 9);
        assert_eq!(p.padded_cell_count(), 11);
        assert_eq!(p.validity().iter().filter(|v| !**v).count(), 11);
    }

    #[test]
    fn shift_joins_separated_neighbours() {
        let plain = partition_windows(4, 4, 2, false).unwrap();
        let shifted = partition_windows(4, 4, 2, true).unwrap();
        assert_eq!(shifted.shift(), (1, 1));
        assert!(!plain.connected((0, 1), (0, 2)));
        assert!(shifted.connected((0, 1), (0, 2)));
    }

    #[test]
    fn every_node_has_exactly_one_slot() {
        for &(r, c, n, s) in &[(5, 7, 3, true), (6, 6, 4, false), (9, 4, 2, true)] {
            let p = partition_windows(r, c, n, s).unwrap();
            let mut seen = vec![0; r * c];
            for w in 0..p.window_count() {
                for node in p.window_slots(w).iter().flatten() {
                    seen[*node] += 1;
                }
            }
            assert!(seen.iter().all(|&k| k == 1));
        }
    }

    #[test]
    fn corner_window_of_shifted_grid_separates_wrapped_nodes() {
        let p = partition_windows(4, 4, 2, true).unwrap();
        let masks = shifted_mask(&p).unwrap();
        // The last window (bottom-right in the rolled frame) holds original
        // nodes (3,3), (3,0), (0,3), (0,0): four different regions.
        let last = p.window_count() - 1;
        let nodes: Vec<usize> = p.window_slots(last).iter().flatten().copied().collect();
        assert_eq!(nodes, vec![15, 12, 3, 0]);
        let m = &masks[last];
        for a in 0..4 {
            for b in 0..4 {
                assert_eq!(m[a * 4 + b], a == b);
            }
        }
        // An interior window is fully connected.
        let first = &masks[0];
        assert!(first.iter().all(|&v| v));
    }

    #[test]
    fn shifted_mask_requires_shift() {
        let p = partition_windows(4, 4, 2, false).unwrap();
        assert!(matches!(shifted_mask(&p), Err(Error::Contract(_))));
    }
}
