//! Patch-wise mixing: the image grid is split into cells and each cell
//! independently takes the target patch with probability `ratio`, otherwise
//! the stylized source patch. Labels are mixed by the identical mask.

use crate::error::{IdmError, Result};
use crate::seeds::{self, stream};
use crate::styletx::StylizedSample;
use crate::tensor::{Image, LabelMap};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// A grid_h x grid_w partition of the image plane.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchGrid {
    pub grid_h: usize,
    pub grid_w: usize,
}

impl PatchGrid {
    pub fn new(grid_h: usize, grid_w: usize) -> Result<Self> {
        if grid_h < 1 || grid_w < 1 {
            return Err(IdmError::Config("grid dims must be >= 1".into()));
        }
        Ok(PatchGrid { grid_h, grid_w })
    }

    pub fn cells(&self) -> usize {
        self.grid_h * self.grid_w
    }

    /// Pixel bounds of cell (gy, gx); the last row/column absorbs any
    /// remainder when the image is not divisible by the grid.
    pub fn cell_bounds(&self, h: usize, w: usize, gy: usize, gx: usize) -> (usize, usize, usize, usize) {
        let cell_h = h / self.grid_h;
        let cell_w = w / self.grid_w;
        let y0 = gy * cell_h;
        let x0 = gx * cell_w;
        let y1 = if gy + 1 == self.grid_h { h } else { y0 + cell_h };
        let x1 = if gx + 1 == self.grid_w { w } else { x0 + cell_w };
        (y0, y1, x0, x1)
    }
}

/// Per-cell provenance: `true` means the cell came from the target.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MixMask {
    pub grid: PatchGrid,
    pub take_target: Vec<bool>,
}

impl MixMask {
    #[inline]
    pub fn cell(&self, gy: usize, gx: usize) -> bool {
        self.take_target[gy * self.grid.grid_w + gx]
    }

    pub fn target_fraction(&self) -> f64 {
        let taken = self.take_target.iter().filter(|&&t| t).count();
        taken as f64 / self.take_target.len() as f64
    }
}

/// A mixed training image with its mixed label and recorded mask.
#[derive(Debug, Clone)]
pub struct MixedSample {
    pub image: Image,
    pub label: LabelMap,
    pub mask: MixMask,
    pub source_id: String,
}

/// Factor `cells` into the grid whose aspect ratio grid_h/grid_w best
/// matches height/width; ties prefer the larger grid_h.
pub fn choose_grid(height: usize, width: usize, cells: usize) -> Result<PatchGrid> {
    if cells < 1 {
        return Err(IdmError::Config("patch count must be >= 1".into()));
    }
    let target = height as f64 / width as f64;
    let mut best: Option<(f64, usize, usize)> = None;
    for gh in 1..=cells {
        if cells % gh != 0 {
            continue;
        }
        let gw = cells / gh;
        let diff = (gh as f64 / gw as f64 - target).abs();
        let better = match best {
            None => true,
            Some((bd, bh, _)) => diff < bd || (diff == bd && gh > bh),
        };
        if better {
            best = Some((diff, gh, gw));
        }
    }
    let (_, gh, gw) = best.expect("cells >= 1 always factors");
    PatchGrid::new(gh, gw)
}

/// Sample a Bernoulli mask and compose image and label from the two parents.
pub fn patch_mix(
    source: &StylizedSample,
    target: &Image,
    target_pseudo: &LabelMap,
    grid: PatchGrid,
    ratio: f64,
    seed: u64,
) -> Result<MixedSample> {
    if source.image.h != target.h || source.image.w != target.w || source.image.ch != target.ch {
        return Err(IdmError::Contract(format!(
            "patch_mix size mismatch: source {}x{}x{} vs target {}x{}x{}",
            source.image.ch, source.image.h, source.image.w, target.ch, target.h, target.w
        )));
    }
    if target_pseudo.h != target.h || target_pseudo.w != target.w {
        return Err(IdmError::Contract(
            "patch_mix: pseudo label does not match target size".into(),
        ));
    }
    if !(0.0..=1.0).contains(&ratio) {
        return Err(IdmError::Config(format!("mix ratio {ratio} outside [0, 1]")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(seed, stream::MIX, 0));
    let take_target: Vec<bool> = (0..grid.cells()).map(|_| rng.gen_bool(ratio)).collect();
    let mask = MixMask { grid, take_target };
    Ok(apply_mask(source, target, target_pseudo, &mask))
}

/// Compose the parents under an explicit mask (also the provenance oracle:
/// re-applying a recorded mask must reproduce the mixed sample bit-exactly).
pub fn apply_mask(
    source: &StylizedSample,
    target: &Image,
    target_pseudo: &LabelMap,
    mask: &MixMask,
) -> MixedSample {
    let (h, w) = (target.h, target.w);
    let mut image = source.image.clone();
    let mut label = source.source_label.clone();
    for gy in 0..mask.grid.grid_h {
        for gx in 0..mask.grid.grid_w {
            if !mask.cell(gy, gx) {
                continue;
            }
            let (y0, y1, x0, x1) = mask.grid.cell_bounds(h, w, gy, gx);
            for c in 0..image.ch {
                for y in y0..y1 {
                    image.row_mut(c, y)[x0..x1].copy_from_slice(&target.row(c, y)[x0..x1]);
                }
            }
            for y in y0..y1 {
                let dst = &mut label.as_mut_slice()[y * w..(y + 1) * w];
                let src = &target_pseudo.as_slice()[y * w..(y + 1) * w];
                dst[x0..x1].copy_from_slice(&src[x0..x1]);
            }
        }
    }
    MixedSample {
        image,
        label,
        mask: mask.clone(),
        source_id: source.source_id.clone(),
    }
}
