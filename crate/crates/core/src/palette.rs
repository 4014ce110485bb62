//! Location-aware palette: an `L x L` grid of class codes laid over the
//! canvas. Each mask takes the code of the cell holding its centroid, or of
//! the nearest free cell when that one is already taken.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::label::LabelMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LapMode {
    None,
    Random,
    Different,
    Similar,
}

impl LapMode {
    pub const ALL: [LapMode; 4] = [LapMode::None, LapMode::Different, LapMode::Random, LapMode::Similar];

    pub fn name(self) -> &'static str {
        match self {
            LapMode::None => "none",
            LapMode::Random => "random",
            LapMode::Different => "different",
            LapMode::Similar => "similar",
        }
    }
}

/// Binary-reflected gray code.
pub fn gray(i: u32) -> u32 {
    i ^ (i >> 1)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PaletteGrid {
    side: usize,
    mode: LapMode,
    /// Row-major codes, a permutation of `0..side*side`.
    codes: Vec<u32>,
}

fn grid_side(n_bits: u32) -> Result<usize> {
    if n_bits == 0 || !n_bits.is_multiple_of(2) || n_bits > crate::bitcodec::MAX_BITS {
        return Err(Error::Unsupported(format!(
            "a square palette needs an even bit count in 2..=8, got {n_bits}"
        )));
    }
    Ok(1usize << (n_bits / 2))
}

impl PaletteGrid {
    pub fn build(mode: LapMode, n_bits: u32, seed: u64) -> Result<Option<Self>> {
        Ok(match mode {
            LapMode::None => None,
            LapMode::Similar => Some(Self::similar(n_bits)?),
            LapMode::Random => Some(Self::random(n_bits, seed)?),
            LapMode::Different => Some(Self::different(n_bits)?),
        })
    }

    /// Two-dimensional gray code: the row index and the column index are
    /// gray-coded into the high and low halves of the code, so every pair of
    /// 4-neighbours differs in exactly one bit.
    pub fn similar(n_bits: u32) -> Result<Self> {
        let side = grid_side(n_bits)?;
        let half = n_bits / 2;
        let codes = (0..side * side)
            .map(|i| (gray((i / side) as u32) << half) | gray((i % side) as u32))
            .collect();
        Ok(Self { side, mode: LapMode::Similar, codes })
    }

    pub fn random(n_bits: u32, seed: u64) -> Result<Self> {
        let side = grid_side(n_bits)?;
        let mut codes: Vec<u32> = (0..(side * side) as u32).collect();
        codes.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        Ok(Self { side, mode: LapMode::Random, codes })
    }

    /// Greedy row-major fill: each cell takes the unused code with the largest
    /// summed Hamming distance to its already filled 4-neighbours, smallest
    /// code on ties.
    pub fn different(n_bits: u32) -> Result<Self> {
        let side = grid_side(n_bits)?;
        let n = side * side;
        let mut codes = vec![0u32; n];
        let mut used = vec![false; n];
        for cell in 0..n {
            let (r, c) = (cell / side, cell % side);
            let neighbours: Vec<u32> = [(r > 0).then(|| codes[cell - side]), (c > 0).then(|| codes[cell - 1])]
                .into_iter()
                .flatten()
                .collect();
            let mut best: Option<(u32, u32)> = None;
            for code in (0..n as u32).filter(|&code| !used[code as usize]) {
                let score: u32 = neighbours.iter().map(|&nb| (nb ^ code).count_ones()).sum();
                if best.is_none_or(|(_, s)| score > s) {
                    best = Some((code, score));
                }
            }
            let (code, _) = best.expect("grid has a free code for every cell");
            codes[cell] = code;
            used[code as usize] = true;
        }
        Ok(Self { side, mode: LapMode::Different, codes })
    }

    pub fn from_codes(side: usize, mode: LapMode, codes: Vec<u32>) -> Result<Self> {
        let n = side * side;
        let mut seen = vec![false; n];
        if codes.len() != n || codes.iter().any(|&c| (c as usize) >= n || core::mem::replace(&mut seen[c as usize], true)) {
            return Err(Error::InvalidArgument(format!("codes are not a permutation of 0..{n}")));
        }
        Ok(Self { side, mode, codes })
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn mode(&self) -> LapMode {
        self.mode
    }

    pub fn codes(&self) -> &[u32] {
        &self.codes
    }

    pub fn code(&self, row: usize, col: usize) -> u32 {
        self.codes[row * self.side + col]
    }

    /// Iterator over `(code_a, code_b)` for every 4-neighbour pair.
    pub fn adjacent_pairs(&self) -> impl Iterator<Item = (u32, u32)> + '_ {
        let s = self.side;
        (0..s * s).flat_map(move |i| {
            let (r, c) = (i / s, i % s);
            let right = (c + 1 < s).then(|| (self.codes[i], self.codes[i + 1]));
            let down = (r + 1 < s).then(|| (self.codes[i], self.codes[i + s]));
            right.into_iter().chain(down)
        })
    }

    pub fn mean_adjacent_hamming(&self) -> f64 {
        let (sum, count) =
            self.adjacent_pairs().fold((0u32, 0u32), |(s, n), (a, b)| (s + (a ^ b).count_ones(), n + 1));
        f64::from(sum) / f64::from(count)
    }
}

/// A nonempty set of pixels, stored as `(row, col)` coordinates.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pixels: Vec<(usize, usize)>,
}

impl Mask {
    pub fn new(pixels: Vec<(usize, usize)>) -> Result<Self> {
        if pixels.is_empty() {
            return Err(Error::Empty("mask"));
        }
        Ok(Self { pixels })
    }

    pub fn pixels(&self) -> &[(usize, usize)] {
        &self.pixels
    }

    pub fn area(&self) -> usize {
        self.pixels.len()
    }

    pub fn centroid(&self) -> (f64, f64) {
        centroid(&self.pixels).expect("masks are nonempty")
    }
}

pub fn centroid(pixels: &[(usize, usize)]) -> Result<(f64, f64)> {
    if pixels.is_empty() {
        return Err(Error::Empty("mask"));
    }
    let (sr, sc) = pixels.iter().fold((0.0, 0.0), |(r, c), &(pr, pc)| (r + pr as f64, c + pc as f64));
    let n = pixels.len() as f64;
    Ok((sr / n, sc / n))
}

/// Pairwise disjoint masks over an `height x width` canvas.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskSet {
    height: usize,
    width: usize,
    masks: Vec<Mask>,
}

impl MaskSet {
    pub fn new(height: usize, width: usize, masks: Vec<Mask>) -> Result<Self> {
        let mut owner = vec![false; height * width];
        for m in &masks {
            for &(r, c) in m.pixels() {
                if r >= height || c >= width {
                    return Err(Error::InvalidArgument(format!("pixel ({r}, {c}) outside {height}x{width}")));
                }
                if core::mem::replace(&mut owner[r * width + c], true) {
                    return Err(Error::InvalidArgument(format!("masks overlap at ({r}, {c})")));
                }
            }
        }
        Ok(Self { height, width, masks })
    }

    /// One mask per distinct label, in ascending label order.
    pub fn from_labelmap(map: &LabelMap) -> (Vec<u32>, Self) {
        let ids = map.labels();
        let mut masks: Vec<Vec<(usize, usize)>> = vec![Vec::new(); ids.len()];
        for r in 0..map.height() {
            for c in 0..map.width() {
                let slot = ids.binary_search(&map.get(r, c)).expect("label listed");
                masks[slot].push((r, c));
            }
        }
        let masks = masks.into_iter().map(|pixels| Mask { pixels }).collect();
        (ids, Self { height: map.height(), width: map.width(), masks })
    }

    pub fn masks(&self) -> &[Mask] {
        &self.masks
    }

    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }

    /// Order in which masks claim palette cells: larger area first, then
    /// centroid row-major, then first pixel row-major.
    pub fn processing_order(&self) -> Vec<usize> {
        let keys: Vec<_> = self
            .masks
            .iter()
            .map(|m| {
                let first = m.pixels.iter().map(|&(r, c)| r * self.width + c).min().unwrap_or(0);
                (m.area(), m.centroid(), first)
            })
            .collect();
        let mut order: Vec<usize> = (0..self.masks.len()).collect();
        order.sort_by(|&a, &b| {
            let (ka, kb) = (&keys[a], &keys[b]);
            kb.0.cmp(&ka.0)
                .then(ka.1 .0.total_cmp(&kb.1 .0))
                .then(ka.1 .1.total_cmp(&kb.1 .1))
                .then(ka.2.cmp(&kb.2))
        });
        order
    }
}

/// Class assignment for masks: a palette grid, or sequential indices when
/// no grid is used.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Palette {
    n_classes: u32,
    grid: Option<PaletteGrid>,
}

impl Palette {
    pub fn new(mode: LapMode, n_classes: u32, seed: u64) -> Result<Self> {
        if !n_classes.is_power_of_two() {
            return Err(Error::Unsupported(format!("palette needs a power of two classes, got {n_classes}")));
        }
        let grid = PaletteGrid::build(mode, n_classes.trailing_zeros(), seed)?;
        Ok(Self { n_classes, grid })
    }

    pub fn with_grid(grid: PaletteGrid) -> Self {
        Self { n_classes: grid.codes.len() as u32, grid: Some(grid) }
    }

    pub fn mode(&self) -> LapMode {
        self.grid.as_ref().map_or(LapMode::None, |g| g.mode)
    }

    pub fn grid(&self) -> Option<&PaletteGrid> {
        self.grid.as_ref()
    }

    pub fn capacity(&self) -> usize {
        self.n_classes as usize
    }

    /// Class index for every mask, in the order of `masks`.
    pub fn assign(&self, masks: &MaskSet) -> Result<Vec<u32>> {
        if masks.len() > self.capacity() {
            return Err(Error::Capacity(masks.len(), self.capacity()));
        }
        let order = masks.processing_order();
        let mut out = vec![0u32; masks.len()];
        let Some(grid) = &self.grid else {
            for (rank, &m) in order.iter().enumerate() {
                out[m] = rank as u32;
            }
            return Ok(out);
        };
        let side = grid.side;
        let cell_h = masks.height as f64 / side as f64;
        let cell_w = masks.width as f64 / side as f64;
        let mut taken = vec![false; side * side];
        for &m in &order {
            let (cy, cx) = masks.masks[m].centroid();
            let row = (((cy + 0.5) / cell_h) as usize).min(side - 1);
            let col = (((cx + 0.5) / cell_w) as usize).min(side - 1);
            let cell = nearest_free(&taken, side, row, col);
            taken[cell] = true;
            out[m] = grid.codes[cell];
        }
        Ok(out)
    }

    /// Relabels an entity map so every entity carries its palette class.
    pub fn remap(&self, entities: &LabelMap) -> Result<LabelMap> {
        let (ids, masks) = MaskSet::from_labelmap(entities);
        let classes = self.assign(&masks)?;
        let data = entities
            .as_slice()
            .iter()
            .map(|id| classes[ids.binary_search(id).expect("label listed")])
            .collect();
        LabelMap::new(entities.height(), entities.width(), data)
    }
}

/// Free cell closest to `(row, col)` by Euclidean distance between cell
/// centres, row-major on ties. The caller guarantees a free cell exists.
fn nearest_free(taken: &[bool], side: usize, row: usize, col: usize) -> usize {
    let own = row * side + col;
    if !taken[own] {
        return own;
    }
    let mut best = (usize::MAX, usize::MAX);
    for cell in (0..side * side).filter(|&c| !taken[c]) {
        let dr = (cell / side).abs_diff(row);
        let dc = (cell % side).abs_diff(col);
        let d2 = dr * dr + dc * dc;
        if d2 < best.0 {
            best = (d2, cell);
        }
    }
    best.1
}
