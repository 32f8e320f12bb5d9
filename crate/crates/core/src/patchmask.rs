//! Bounding boxes on the vision transformer's patch grid.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::scene::EntityBox;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchGrid {
    pub image_size: usize,
    pub patch_size: usize,
    pub rows: usize,
    pub cols: usize,
}

impl PatchGrid {
    pub fn new(image_size: usize, patch_size: usize) -> Result<Self> {
        if patch_size == 0 || image_size == 0 || image_size % patch_size != 0 {
            return Err(Error::Config(format!(
                "image size {image_size} not divisible by patch size {patch_size}"
            )));
        }
        let n = image_size / patch_size;
        Ok(Self {
            image_size,
            patch_size,
            rows: n,
            cols: n,
        })
    }

    pub fn n_patches(&self) -> usize {
        self.rows * self.cols
    }
}

/// Attention visibility over `[CLS] + patches`. Slot 0 (the vision `[CLS]`)
/// is always visible.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct PatchMask {
    allowed: Vec<bool>,
    rows: usize,
    cols: usize,
}

impl PatchMask {
    pub fn full(grid: &PatchGrid) -> Self {
        Self {
            allowed: vec![true; 1 + grid.n_patches()],
            rows: grid.rows,
            cols: grid.cols,
        }
    }

    /// Mask from per-patch flags (row-major, without the `[CLS]` slot).
    pub fn from_patches(grid: &PatchGrid, patches: &[bool]) -> Result<Self> {
        if patches.len() != grid.n_patches() {
            return Err(Error::Shape(format!(
                "{} patch flags for a {}×{} grid",
                patches.len(),
                grid.rows,
                grid.cols
            )));
        }
        if !patches.iter().any(|&p| p) {
            return Err(Error::Empty("patch mask allows no patch"));
        }
        let mut allowed = Vec::with_capacity(patches.len() + 1);
        allowed.push(true);
        allowed.extend_from_slice(patches);
        Ok(Self {
            allowed,
            rows: grid.rows,
            cols: grid.cols,
        })
    }

    /// Visibility per token slot, `[CLS]` first.
    pub fn slots(&self) -> &[bool] {
        &self.allowed
    }

    pub fn is_allowed(&self, row: usize, col: usize) -> bool {
        self.allowed[1 + row * self.cols + col]
    }

    /// Token slots (including `[CLS]` at 0) that may be attended to.
    pub fn allowed_slots(&self) -> Vec<usize> {
        self.allowed
            .iter()
            .enumerate()
            .filter_map(|(i, &a)| a.then_some(i))
            .collect()
    }

    pub fn count_patches(&self) -> usize {
        self.allowed[1..].iter().filter(|&&a| a).count()
    }

    pub fn is_full(&self) -> bool {
        self.allowed.iter().all(|&a| a)
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    /// ASCII rendering, `#` for allowed patches.
    pub fn render(&self) -> String {
        let mut s = String::with_capacity((self.cols + 1) * self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                s.push(if self.is_allowed(r, c) { '#' } else { '.' });
            }
            s.push('\n');
        }
        s
    }
}

/// Patches whose pixel rectangle overlaps `bbox` with positive area.
pub fn patches_for_bbox(grid: &PatchGrid, bbox: &EntityBox) -> Result<PatchMask> {
    let size = grid.image_size as f32;
    let inside = 0.0 <= bbox.xmin
        && bbox.xmin < bbox.xmax
        && bbox.xmax <= size
        && 0.0 <= bbox.ymin
        && bbox.ymin < bbox.ymax
        && bbox.ymax <= size;
    if !inside {
        return Err(Error::BoxOutsideImage(format!(
            "[{}, {}, {}, {}] on a {}px image",
            bbox.xmin, bbox.ymin, bbox.xmax, bbox.ymax, grid.image_size
        )));
    }
    let p = grid.patch_size as f32;
    let mut flags = vec![false; grid.n_patches()];
    for r in 0..grid.rows {
        let (y0, y1) = (r as f32 * p, (r + 1) as f32 * p);
        if !(bbox.ymin < y1 && y0 < bbox.ymax) {
            continue;
        }
        for c in 0..grid.cols {
            let (x0, x1) = (c as f32 * p, (c + 1) as f32 * p);
            if bbox.xmin < x1 && x0 < bbox.xmax {
                flags[r * grid.cols + c] = true;
            }
        }
    }
    PatchMask::from_patches(grid, &flags)
}

/// Element-wise OR.
pub fn union_mask(masks: &[PatchMask]) -> Result<PatchMask> {
    let first = masks.first().ok_or(Error::Empty("no masks to union"))?;
    let mut out = first.clone();
    for m in &masks[1..] {
        if m.dims() != first.dims() {
            return Err(Error::Shape(format!(
                "mask grids {:?} and {:?} differ",
                first.dims(),
                m.dims()
            )));
        }
        for (o, &a) in out.allowed.iter_mut().zip(&m.allowed) {
            *o |= a;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn grid() -> PatchGrid {
        PatchGrid::new(64, 8).unwrap()
    }

    fn allowed_cells(m: &PatchMask) -> Vec<(usize, usize)> {
        let (rows, cols) = m.dims();
        (0..rows)
            .flat_map(|r| (0..cols).map(move |c| (r, c)))
            .filter(|&(r, c)| m.is_allowed(r, c))
            .collect()
    }

    #[test]
    fn whole_image_allows_everything() {
        let m = patches_for_bbox(&grid(), &EntityBox::new("x", 0.0, 0.0, 64.0, 64.0)).unwrap();
        assert!(m.is_full());
    }

    #[test]
    fn aligned_box_is_one_patch() {
        let m = patches_for_bbox(&grid(), &EntityBox::new("x", 0.0, 0.0, 8.0, 8.0)).unwrap();
        assert_eq!(allowed_cells(&m), vec![(0, 0)]);
        assert!(m.slots()[0]);
    }

    #[test]
    fn straddling_box_takes_four_patches() {
        let m = patches_for_bbox(&grid(), &EntityBox::new("x", 4.0, 4.0, 12.0, 12.0)).unwrap();
        assert_eq!(allowed_cells(&m), vec![(0, 0), (0, 1), (1, 0), (1, 1)]);
    }

    #[test]
    fn box_outside_image_is_rejected() {
        assert!(patches_for_bbox(&grid(), &EntityBox::new("x", 60.0, 0.0, 70.0, 8.0)).is_err());
    }

    #[test]
    fn grid_must_divide() {
        assert!(PatchGrid::new(64, 7).is_err());
    }

    #[test]
    fn unions() {
        let g = grid();
        let a = patches_for_bbox(&g, &EntityBox::new("a", 0.0, 0.0, 8.0, 8.0)).unwrap();
        let b = patches_for_bbox(&g, &EntityBox::new("b", 56.0, 56.0, 64.0, 64.0)).unwrap();
        assert_eq!(union_mask(&[a.clone()]).unwrap(), a);
        assert_eq!(union_mask(&[a.clone(), b]).unwrap().count_patches(), 2);
        let full = PatchMask::full(&g);
        assert_eq!(union_mask(&[a.clone(), full.clone()]).unwrap(), full);
        let other = PatchMask::full(&PatchGrid::new(64, 16).unwrap());
        assert!(union_mask(&[a, other]).is_err());
        assert!(union_mask(&[]).is_err());
    }

    #[test]
    fn aligned_partition_covers_the_grid() {
        let g = grid();
        let masks: Vec<_> = (0..4)
            .map(|q| {
                let (x, y) = ((q % 2) as f32 * 32.0, (q / 2) as f32 * 32.0);
                patches_for_bbox(&g, &EntityBox::new("q", x, y, x + 32.0, y + 32.0)).unwrap()
            })
            .collect();
        assert!(union_mask(&masks).unwrap().is_full());
    }

    fn boxes() -> impl Strategy<Value = (f32, f32, f32, f32)> {
        (0u32..63, 0u32..63, 1u32..64, 1u32..64).prop_map(|(x, y, w, h)| {
            let x1 = (x + w).min(64);
            let y1 = (y + h).min(64);
            (x as f32, y as f32, x1.max(x + 1) as f32, y1.max(y + 1) as f32)
        })
    }

    proptest! {
        #[test]
        fn enlarging_never_removes_patches((x0, y0, x1, y1) in boxes(), grow in 0u32..16) {
            let g = grid();
            let small = patches_for_bbox(&g, &EntityBox::new("s", x0, y0, x1, y1)).unwrap();
            let gf = grow as f32;
            let big = EntityBox::new("b", (x0 - gf).max(0.0), (y0 - gf).max(0.0), (x1 + gf).min(64.0), (y1 + gf).min(64.0));
            let big = patches_for_bbox(&g, &big).unwrap();
            for (s, b) in small.slots().iter().zip(big.slots()) {
                prop_assert!(!s || *b);
            }
        }

        #[test]
        fn every_box_pixel_is_covered((x0, y0, x1, y1) in boxes()) {
            let g = grid();
            let m = patches_for_bbox(&g, &EntityBox::new("s", x0, y0, x1, y1)).unwrap();
            for y in (y0 as usize)..(y1 as usize) {
                for x in (x0 as usize)..(x1 as usize) {
                    prop_assert!(m.is_allowed(y / 8, x / 8));
                }
            }
        }
    }
}
