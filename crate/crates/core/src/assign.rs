//! Centre-region positive assignment over the three prediction levels.

use crate::boxes::{center, BoxXyxy};
use crate::error::{Error, Result};

/// Ground-truth box in input pixels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GtBox {
    pub bbox: BoxXyxy,
    pub class: usize,
}

impl GtBox {
    pub fn new(bbox: BoxXyxy) -> Self {
        GtBox { bbox, class: 0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LevelGrid {
    pub rows: usize,
    pub cols: usize,
    pub stride: usize,
}

/// Flat per-image cell indexing: levels in order, row-major within each.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CellLayout {
    pub levels: Vec<LevelGrid>,
    offsets: Vec<usize>,
    cells: usize,
}

impl CellLayout {
    pub fn new(levels: Vec<LevelGrid>) -> Self {
        let mut offsets = Vec::with_capacity(levels.len());
        let mut cells = 0;
        for l in &levels {
            offsets.push(cells);
            cells += l.rows * l.cols;
        }
        CellLayout { levels, offsets, cells }
    }

    /// Layout of an `h × w` input for the given level strides.
    pub fn for_input(h: usize, w: usize, strides: &[usize]) -> Self {
        Self::new(
            strides
                .iter()
                .map(|&s| LevelGrid {
                    rows: h / s,
                    cols: w / s,
                    stride: s,
                })
                .collect(),
        )
    }

    pub fn cells_per_image(&self) -> usize {
        self.cells
    }

    pub fn offset(&self, level: usize) -> usize {
        self.offsets[level]
    }

    pub fn index(&self, level: usize, row: usize, col: usize) -> usize {
        self.offsets[level] + row * self.levels[level].cols + col
    }

    /// `(level, row, col)` of a per-image cell index.
    pub fn locate(&self, cell: usize) -> (usize, usize, usize) {
        let level = self.offsets.partition_point(|&o| o <= cell) - 1;
        let local = cell - self.offsets[level];
        let cols = self.levels[level].cols;
        (level, local / cols, local % cols)
    }

    /// Cell centre in input pixels.
    pub fn cell_center(&self, cell: usize) -> (f64, f64) {
        let (l, r, c) = self.locate(cell);
        let s = self.levels[l].stride as f64;
        ((c as f64 + 0.5) * s, (r as f64 + 0.5) * s)
    }
}

/// Positive cells of a batch and the ground truth each one regresses to.
#[derive(Clone, Debug, PartialEq)]
pub struct Assignment {
    pub layout: CellLayout,
    pub batch: usize,
    /// `[batch · cells]`, index of the owning ground truth within its image.
    pub owner: Vec<Option<usize>>,
    pub gts: Vec<Vec<GtBox>>,
}

impl Assignment {
    pub fn is_positive(&self, image: usize, cell: usize) -> bool {
        self.owner[image * self.layout.cells_per_image() + cell].is_some()
    }

    pub fn positive_mask(&self) -> Vec<bool> {
        self.owner.iter().map(Option::is_some).collect()
    }

    /// Positive cell count of each image.
    pub fn positives_per_image(&self) -> Vec<usize> {
        self.owner
            .chunks(self.layout.cells_per_image().max(1))
            .map(|c| c.iter().filter(|o| o.is_some()).count())
            .take(self.batch)
            .collect()
    }

    pub fn total_positives(&self) -> usize {
        self.owner.iter().filter(|o| o.is_some()).count()
    }

    /// Target box of a positive cell.
    pub fn target(&self, image: usize, cell: usize) -> Option<&GtBox> {
        self.owner[image * self.layout.cells_per_image() + cell].map(|g| &self.gts[image][g])
    }
}

/// For every ground truth and every level, the 3×3 block of cells around
/// the cell containing the box centre is positive (clipped at the map
/// border). A cell claimed by several boxes goes to the box whose centre is
/// nearest to the cell centre, the lower index winning ties.
pub fn assign_positives(gts: &[Vec<GtBox>], layout: &CellLayout, width: usize, height: usize) -> Result<Assignment> {
    let n = layout.cells_per_image();
    let mut owner = vec![None; gts.len() * n];
    for (img, boxes) in gts.iter().enumerate() {
        let mut best = vec![f64::INFINITY; n];
        for (gi, gt) in boxes.iter().enumerate() {
            let b = gt.bbox;
            if !b.iter().all(|v| v.is_finite()) || b[0] >= b[2] || b[1] >= b[3] {
                return Err(Error::invalid("assign_positives", format!("image {img}: degenerate box {b:?}")));
            }
            let (cx, cy) = center(&b);
            if cx < 0.0 || cy < 0.0 || cx >= width as f64 || cy >= height as f64 {
                return Err(Error::invalid(
                    "assign_positives",
                    format!("image {img}: box centre ({cx}, {cy}) outside the {width}x{height} input"),
                ));
            }
            for (l, grid) in layout.levels.iter().enumerate() {
                if grid.rows == 0 || grid.cols == 0 {
                    continue;
                }
                let s = grid.stride as f64;
                let ci = ((cy / s) as usize).min(grid.rows - 1);
                let cj = ((cx / s) as usize).min(grid.cols - 1);
                for r in ci.saturating_sub(1)..=(ci + 1).min(grid.rows - 1) {
                    for c in cj.saturating_sub(1)..=(cj + 1).min(grid.cols - 1) {
                        let cell = layout.index(l, r, c);
                        let (px, py) = ((c as f64 + 0.5) * s, (r as f64 + 0.5) * s);
                        let d = (px - cx).powi(2) + (py - cy).powi(2);
                        if d < best[cell] {
                            best[cell] = d;
                            owner[img * n + cell] = Some(gi);
                        }
                    }
                }
            }
        }
    }
    Ok(Assignment {
        layout: layout.clone(),
        batch: gts.len(),
        owner,
        gts: gts.to_vec(),
    })
}
