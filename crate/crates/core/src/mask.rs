//! Sliding-mask families that cover every placement of a bounded adversarial
//! patch.
//!
//! A `W_adv × H_adv` pixel rectangle placed anywhere on a grid of `P × P`
//! patches touches at most `(⌈W_adv/P⌉ + 1) × (⌈H_adv/P⌉ + 1)` cells. Sliding a
//! mask of that extent over the grid with stride 1 therefore guarantees that
//! some mask hides every tainted cell, whatever the placement.

use serde::ser::SerializeStruct;
use serde::{Deserialize, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::vit::{AttentionBias, ModelConfig};

/// Pixel dimensions of the image and the patch size of the backbone.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageGeometry {
    pub width: usize,
    pub height: usize,
    pub patch_size: usize,
}

impl ImageGeometry {
    pub fn new(width: usize, height: usize, patch_size: usize) -> Result<Self> {
        if patch_size == 0 || width == 0 || height == 0 {
            return Err(Error::InvalidConfig("image and patch extents must be positive".into()));
        }
        if !width.is_multiple_of(patch_size) || !height.is_multiple_of(patch_size) {
            return Err(Error::InvalidConfig(format!(
                "image {width}x{height} is not a multiple of patch size {patch_size}"
            )));
        }
        Ok(Self {
            width,
            height,
            patch_size,
        })
    }

    pub fn square(size: usize, patch_size: usize) -> Result<Self> {
        Self::new(size, size, patch_size)
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.width / self.patch_size, self.height / self.patch_size)
    }
}

impl From<&ModelConfig> for ImageGeometry {
    fn from(c: &ModelConfig) -> Self {
        Self {
            width: c.image_width,
            height: c.image_height,
            patch_size: c.patch_size,
        }
    }
}

/// Upper bound on the adversarial patch the defender plans against.
///
/// Non-rectangular patches are handled by passing their bounding rectangle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdversaryGeometry {
    pub width: usize,
    pub height: usize,
}

impl AdversaryGeometry {
    pub fn new(width: usize, height: usize) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidGeometry(format!(
                "adversary must be at least 1x1 pixels, got {width}x{height}"
            )));
        }
        Ok(Self { width, height })
    }

    pub fn square(size: usize) -> Result<Self> {
        Self::new(size, size)
    }
}

/// Axis-aligned pixel rectangle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PixelRect {
    pub x: usize,
    pub y: usize,
    pub width: usize,
    pub height: usize,
}

/// Inclusive rectangle of patch-grid cells.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellRect {
    pub col0: usize,
    pub row0: usize,
    pub col1: usize,
    pub row1: usize,
}

impl CellRect {
    pub fn contains(&self, other: &CellRect) -> bool {
        self.col0 <= other.col0
            && self.row0 <= other.row0
            && self.col1 >= other.col1
            && self.row1 >= other.row1
    }

    pub fn count(&self) -> usize {
        (self.col1 - self.col0 + 1) * (self.row1 - self.row0 + 1)
    }

    /// `(col, row)` cells, row-major.
    pub fn cells(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (self.row0..=self.row1).flat_map(move |r| (self.col0..=self.col1).map(move |c| (c, r)))
    }
}

/// One mask: `extent` cells wide and tall, top-left at `origin` (col, row).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskSpec {
    pub origin: (usize, usize),
    pub extent: (usize, usize),
}

impl MaskSpec {
    pub fn cells(&self) -> CellRect {
        CellRect {
            col0: self.origin.0,
            row0: self.origin.1,
            col1: self.origin.0 + self.extent.0 - 1,
            row1: self.origin.1 + self.extent.1 - 1,
        }
    }

    pub fn fits(&self, grid: (usize, usize)) -> bool {
        self.extent.0 >= 1
            && self.extent.1 >= 1
            && self.origin.0 + self.extent.0 <= grid.0
            && self.origin.1 + self.extent.1 <= grid.1
    }
}

/// Ordered mask family for one (image, adversary) geometry.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskPlan {
    grid: (usize, usize),
    extent: (usize, usize),
    masks: Vec<MaskSpec>,
}

impl MaskPlan {
    /// Every stride-1 position of an `extent` mask on `grid`, row-major by
    /// origin.
    pub fn sliding(grid: (usize, usize), extent: (usize, usize)) -> Result<Self> {
        if extent.0 == 0 || extent.1 == 0 || extent.0 > grid.0 || extent.1 > grid.1 {
            return Err(Error::Uncertifiable(format!(
                "mask extent {}x{} does not fit the {}x{} patch grid",
                extent.0, extent.1, grid.0, grid.1
            )));
        }
        let masks = (0..=grid.1 - extent.1)
            .flat_map(|row| {
                (0..=grid.0 - extent.0).map(move |col| MaskSpec {
                    origin: (col, row),
                    extent,
                })
            })
            .collect();
        Ok(Self {
            grid,
            extent,
            masks,
        })
    }

    pub fn grid(&self) -> (usize, usize) {
        self.grid
    }

    pub fn extent(&self) -> (usize, usize) {
        self.extent
    }

    pub fn masks(&self) -> &[MaskSpec] {
        &self.masks
    }

    pub fn k(&self) -> usize {
        self.masks.len()
    }

    /// The plan with mask `index` dropped.
    pub fn without(&self, index: usize) -> Self {
        let mut masks = self.masks.clone();
        masks.remove(index);
        Self {
            masks,
            ..self.clone()
        }
    }

    /// The plan with its masks in the order given by `order`.
    pub fn reordered(&self, order: &[usize]) -> Self {
        Self {
            masks: order.iter().map(|&i| self.masks[i]).collect(),
            ..self.clone()
        }
    }

    /// False when a mask would hide every patch, leaving masked passes
    /// nothing to look at.
    pub fn is_runnable(&self) -> bool {
        self.extent != self.grid
    }

    /// Attention biases for every mask, in plan order.
    pub fn biases(&self) -> Result<Vec<AttentionBias>> {
        if !self.is_runnable() {
            return Err(Error::Uncertifiable(format!(
                "a {}x{} mask hides the whole {}x{} grid",
                self.extent.0, self.extent.1, self.grid.0, self.grid.1
            )));
        }
        self.masks.iter().map(|m| mask_to_bias(m, self.grid)).collect()
    }
}

impl Serialize for MaskPlan {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        let origins: Vec<[usize; 2]> = self.masks.iter().map(|m| [m.origin.0, m.origin.1]).collect();
        let mut s = serializer.serialize_struct("MaskPlan", 4)?;
        s.serialize_field("grid", &[self.grid.0, self.grid.1])?;
        s.serialize_field("extent", &[self.extent.0, self.extent.1])?;
        s.serialize_field("k", &self.k())?;
        s.serialize_field("origins", &origins)?;
        s.end()
    }
}

/// Mask extent `(N_W, N_H)` in cells needed to hide any placement of `adv`.
pub fn required_extent(adv: AdversaryGeometry, patch_size: usize) -> (usize, usize) {
    (
        adv.width.div_ceil(patch_size) + 1,
        adv.height.div_ceil(patch_size) + 1,
    )
}

/// The stride-1 covering plan for `adv` on `geometry`.
///
/// Fails as uncertifiable when the adversary exceeds the image or the
/// required mask does not fit the grid. A mask that exactly fills the grid is
/// a valid covering plan but cannot be run (see [`MaskPlan::is_runnable`]).
pub fn build_plan(geometry: impl Into<ImageGeometry>, adv: AdversaryGeometry) -> Result<MaskPlan> {
    let geometry = geometry.into();
    if adv.width > geometry.width || adv.height > geometry.height {
        return Err(Error::Uncertifiable(format!(
            "adversary {}x{} exceeds the {}x{} image",
            adv.width, adv.height, geometry.width, geometry.height
        )));
    }
    let grid = geometry.grid();
    MaskPlan::sliding(grid, required_extent(adv, geometry.patch_size))
}

/// Attention bias that hides exactly the cells of `mask`.
pub fn mask_to_bias(mask: &MaskSpec, grid: (usize, usize)) -> Result<AttentionBias> {
    if !mask.fits(grid) {
        return Err(Error::InvalidMask(format!(
            "mask {mask:?} does not fit the {}x{} grid",
            grid.0, grid.1
        )));
    }
    let mut allowed = vec![true; 1 + grid.0 * grid.1];
    for (col, row) in mask.cells().cells() {
        allowed[1 + row * grid.0 + col] = false;
    }
    AttentionBias::new(allowed)
}

/// Grid cells intersected by a pixel rectangle.
pub fn tainted_cells(placement: PixelRect, geometry: ImageGeometry) -> Result<CellRect> {
    if placement.width == 0
        || placement.height == 0
        || placement.x + placement.width > geometry.width
        || placement.y + placement.height > geometry.height
    {
        return Err(Error::OutOfBounds(format!(
            "{placement:?} on a {}x{} image",
            geometry.width, geometry.height
        )));
    }
    let p = geometry.patch_size;
    Ok(CellRect {
        col0: placement.x / p,
        row0: placement.y / p,
        col1: (placement.x + placement.width - 1) / p,
        row1: (placement.y + placement.height - 1) / p,
    })
}

/// Outcome of an exhaustive coverage check.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Coverage {
    Complete { placements: usize },
    Uncovered { placement: PixelRect, tainted: CellRect },
}

impl Coverage {
    pub fn is_complete(&self) -> bool {
        matches!(self, Coverage::Complete { .. })
    }
}

/// Brute-force check that every pixel placement of `adv` has all its tainted
/// cells inside at least one mask of `plan`.
///
/// Works from the plan's explicit mask list, so it also catches plans that
/// were built by hand or mutated.
pub fn verify_coverage(
    geometry: impl Into<ImageGeometry>,
    adv: AdversaryGeometry,
    plan: &MaskPlan,
) -> Coverage {
    let geometry = geometry.into();
    if adv.width > geometry.width || adv.height > geometry.height {
        return Coverage::Complete { placements: 0 };
    }
    let masks: Vec<CellRect> = plan.masks().iter().map(MaskSpec::cells).collect();
    let mut placements = 0;
    for y in 0..=geometry.height - adv.height {
        for x in 0..=geometry.width - adv.width {
            let placement = PixelRect {
                x,
                y,
                width: adv.width,
                height: adv.height,
            };
            let tainted = tainted_cells(placement, geometry).expect("placement is in bounds");
            if !masks.iter().any(|m| m.contains(&tainted)) {
                return Coverage::Uncovered { placement, tainted };
            }
            placements += 1;
        }
    }
    Coverage::Complete { placements }
}
