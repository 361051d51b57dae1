//! Box and patch geometry.
//!
//! The overlap mask of a box against the patch grid comes in two routes:
//! a per-patch rectangle intersection ([`overlap_areas_oracle`]) and a
//! factored row/column form ([`overlap_areas_factored`]) that builds the
//! same mask from one vector of column fractions and one of row fractions.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{lit, Scalar};

pub const NUM_JOINTS: usize = 17;

/// Axis-aligned box in pixel corner coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox<T> {
    pub x1: T,
    pub y1: T,
    pub x2: T,
    pub y2: T,
}

impl<T: Scalar> BBox<T> {
    pub fn new(x1: T, y1: T, x2: T, y2: T) -> Self {
        Self { x1, y1, x2, y2 }
    }

    /// Builds a box from `[x1, y1, x2, y2]`, swapping inverted corners.
    pub fn from_corners([a, b, c, d]: [T; 4]) -> Self {
        Self::new(a.min(c), b.min(d), a.max(c), b.max(d))
    }

    pub fn corners(&self) -> [T; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    pub fn width(&self) -> T {
        (self.x2 - self.x1).max(T::zero())
    }

    pub fn height(&self) -> T {
        (self.y2 - self.y1).max(T::zero())
    }

    pub fn area(&self) -> T {
        self.width() * self.height()
    }

    pub fn center(&self) -> (T, T) {
        let half = lit::<T>(0.5);
        ((self.x1 + self.x2) * half, (self.y1 + self.y2) * half)
    }

    pub fn is_valid(&self) -> bool {
        self.x1 <= self.x2 && self.y1 <= self.y2
    }

    /// Clamps every corner into `[0, width] × [0, height]`.
    pub fn clip(&self, width: T, height: T) -> Self {
        let cx = |v: T| v.max(T::zero()).min(width);
        let cy = |v: T| v.max(T::zero()).min(height);
        Self::new(cx(self.x1), cy(self.y1), cx(self.x2), cy(self.y2))
    }

    pub fn intersection(&self, other: &Self) -> T {
        let w = self.x2.min(other.x2) - self.x1.max(other.x1);
        let h = self.y2.min(other.y2) - self.y1.max(other.y1);
        w.max(T::zero()) * h.max(T::zero())
    }

    /// Smallest box containing both.
    pub fn union_box(&self, other: &Self) -> Self {
        Self::new(
            self.x1.min(other.x1),
            self.y1.min(other.y1),
            self.x2.max(other.x2),
            self.y2.max(other.y2),
        )
    }

    pub fn scale(&self, sx: T, sy: T) -> Self {
        Self::new(self.x1 * sx, self.y1 * sy, self.x2 * sx, self.y2 * sy)
    }

    pub fn cast<U: Scalar>(&self) -> BBox<U> {
        BBox::new(
            U::narrow(self.x1.widen()),
            U::narrow(self.y1.widen()),
            U::narrow(self.x2.widen()),
            U::narrow(self.y2.widen()),
        )
    }

    fn degenerate_error(&self) -> Error {
        Error::DegenerateBox {
            x1: self.x1.widen(),
            y1: self.y1.widen(),
            x2: self.x2.widen(),
            y2: self.y2.widen(),
        }
    }
}

/// Intersection over union. Two zero-area boxes give 0.
pub fn iou<T: Scalar>(a: &BBox<T>, b: &BBox<T>) -> T {
    let inter = a.intersection(b);
    let union = a.area() + b.area() - inter;
    if union <= T::zero() {
        T::zero()
    } else {
        inter / union
    }
}

/// Square patch grid over an image of `width·patch_size × height·patch_size` pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PatchGrid {
    pub patch_size: usize,
    /// Patches per row.
    pub width: usize,
    /// Patch rows.
    pub height: usize,
}

impl PatchGrid {
    pub fn new(patch_size: usize, width: usize, height: usize) -> Result<Self> {
        if patch_size == 0 || width == 0 || height == 0 {
            return Err(Error::Config(format!(
                "patch grid {width}x{height} with patch size {patch_size}"
            )));
        }
        Ok(Self {
            patch_size,
            width,
            height,
        })
    }

    pub fn square(patch_size: usize, side: usize) -> Result<Self> {
        Self::new(patch_size, side, side)
    }

    pub fn num_patches(&self) -> usize {
        self.width * self.height
    }

    pub fn image_width(&self) -> usize {
        self.width * self.patch_size
    }

    pub fn image_height(&self) -> usize {
        self.height * self.patch_size
    }
}

/// Per-region attention mask over `[CLS, patch_1, …, patch_L]`.
///
/// Slot 0 is the CLS token and always 1. Slot `1 + r·W + c` holds the
/// fraction of patch `(r, c)` covered by the region.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionMask<T> {
    values: Vec<T>,
}

impl<T: Scalar> RegionMask<T> {
    pub fn from_values(values: Vec<T>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Dimension("region mask needs a CLS slot".into()));
        }
        if values
            .iter()
            .any(|v| !(*v >= T::zero() && *v <= T::one()))
        {
            return Err(Error::Dimension("region mask entries must lie in [0, 1]".into()));
        }
        Ok(Self { values })
    }

    /// Mask that lets the CLS token see every patch.
    pub fn full(num_patches: usize) -> Self {
        Self {
            values: vec![T::one(); num_patches + 1],
        }
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn patches(&self) -> &[T] {
        &self.values[1..]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// True when no patch overlaps the region.
    pub fn is_degenerate(&self) -> bool {
        self.patches().iter().all(|v| *v == T::zero())
    }

    /// `ln S`, with exact negative infinity for uncovered patches.
    pub fn log_bias(&self) -> Vec<T> {
        self.values
            .iter()
            .map(|&v| if v == T::zero() { T::neg_infinity() } else { v.ln() })
            .collect()
    }

    /// Largest elementwise difference; infinite if the lengths differ.
    pub fn max_diff(&self, other: &Self) -> f64 {
        if self.len() != other.len() {
            return f64::INFINITY;
        }
        crate::numerics::max_abs_diff(&self.values, &other.values)
    }

    pub fn cast<U: Scalar>(&self) -> RegionMask<U> {
        RegionMask {
            values: self.values.iter().map(|v| U::narrow(v.widen())).collect(),
        }
    }
}

fn clipped_for_grid<T: Scalar>(b: &BBox<T>, grid: &PatchGrid) -> Result<BBox<T>> {
    let clipped = b.clip(
        lit(grid.image_width() as f64),
        lit(grid.image_height() as f64),
    );
    if clipped.width() <= T::zero() || clipped.height() <= T::zero() {
        return Err(b.degenerate_error());
    }
    Ok(clipped)
}

/// Reference route: intersect the box with every patch rectangle.
pub fn overlap_areas_oracle<T: Scalar>(b: &BBox<T>, grid: &PatchGrid) -> Result<RegionMask<T>> {
    let b = clipped_for_grid(b, grid)?;
    let p = lit::<T>(grid.patch_size as f64);
    let patch_area = p * p;
    let mut values = Vec::with_capacity(grid.num_patches() + 1);
    values.push(T::one());
    for r in 0..grid.height {
        for c in 0..grid.width {
            let x0 = lit::<T>(c as f64) * p;
            let y0 = lit::<T>(r as f64) * p;
            let patch = BBox::new(x0, y0, x0 + p, y0 + p);
            values.push(patch.intersection(&b) / patch_area);
        }
    }
    Ok(RegionMask { values })
}

/// Coverage fractions of the patches spanned along one axis, in patch
/// units. Returns the first spanned index and one fraction per patch.
fn axis_fractions<T: Scalar>(lo: T, hi: T) -> (usize, Vec<T>) {
    let first = lo.floor();
    let end = hi.ceil();
    let start = first.to_usize().unwrap_or(0);
    let span = (end - first).to_usize().unwrap_or(0).max(1);
    if span == 1 {
        return (start, vec![hi - lo]);
    }
    let lead = T::one() - (lo - first);
    let tail = T::one() - (end - hi);
    let mut fr = Vec::with_capacity(span);
    fr.push(lead);
    fr.extend(std::iter::repeat_n(T::one(), span - 2));
    fr.push(tail);
    (start, fr)
}

/// Factored route: the covered area of patch `(r, c)` is the product of
/// the covered fraction of column `c` and of row `r`.
pub fn overlap_areas_factored<T: Scalar>(b: &BBox<T>, grid: &PatchGrid) -> Result<RegionMask<T>> {
    let b = clipped_for_grid(b, grid)?;
    let p = lit::<T>(grid.patch_size as f64);
    let (col0, cols) = axis_fractions(b.x1 / p, b.x2 / p);
    let (row0, rows) = axis_fractions(b.y1 / p, b.y2 / p);
    Ok(scatter(grid, col0, &cols, row0, &rows))
}

fn scatter<T: Scalar>(
    grid: &PatchGrid,
    col0: usize,
    cols: &[T],
    row0: usize,
    rows: &[T],
) -> RegionMask<T> {
    let mut values = vec![T::zero(); grid.num_patches() + 1];
    values[0] = T::one();
    for (dr, &fr) in rows.iter().enumerate() {
        let base = 1 + (row0 + dr) * grid.width + col0;
        for (dc, &fc) in cols.iter().enumerate() {
            values[base + dc] = fc * fr;
        }
    }
    RegionMask { values }
}

/// Deliberately broken factored route for fault-injection checks: the
/// trailing column fraction is taken from the bottom row edge and the
/// trailing row fraction from the right column edge.
#[doc(hidden)]
pub fn overlap_areas_factored_faulty<T: Scalar>(
    b: &BBox<T>,
    grid: &PatchGrid,
) -> Result<RegionMask<T>> {
    let b = clipped_for_grid(b, grid)?;
    let p = lit::<T>(grid.patch_size as f64);
    let (col0, mut cols) = axis_fractions(b.x1 / p, b.x2 / p);
    let (row0, mut rows) = axis_fractions(b.y1 / p, b.y2 / p);
    if cols.len() > 1 && rows.len() > 1 {
        let (lc, lr) = (cols.len() - 1, rows.len() - 1);
        std::mem::swap(&mut cols[lc], &mut rows[lr]);
    }
    Ok(scatter(grid, col0, &cols, row0, &rows))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QuantizeMode {
    /// Partially covered patches are fully attended.
    AttendAll,
    /// Partially covered patches are masked out.
    MaskAll,
}

/// Whole-patch mask: every patch is either in (1) or out (0).
pub fn quantized_mask<T: Scalar>(
    b: &BBox<T>,
    grid: &PatchGrid,
    mode: QuantizeMode,
) -> Result<RegionMask<T>> {
    let exact = overlap_areas_oracle(b, grid)?;
    let partial = match mode {
        QuantizeMode::AttendAll => T::one(),
        QuantizeMode::MaskAll => T::zero(),
    };
    let mut values = exact.values;
    for v in values.iter_mut().skip(1) {
        if *v >= T::one() {
            *v = T::one();
        } else if *v > T::zero() {
            *v = partial;
        }
    }
    Ok(RegionMask { values })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Keypoint<T> {
    pub x: T,
    pub y: T,
    pub confidence: T,
}

/// The 17 body keypoints of one human.
#[derive(Debug, Clone, PartialEq)]
pub struct JointSet<T> {
    keypoints: [Keypoint<T>; NUM_JOINTS],
}

impl<T: Scalar> JointSet<T> {
    pub fn new(keypoints: Vec<Keypoint<T>>) -> Result<Self> {
        let n = keypoints.len();
        let keypoints: [Keypoint<T>; NUM_JOINTS] = keypoints
            .try_into()
            .map_err(|_| Error::Dimension(format!("expected {NUM_JOINTS} keypoints, got {n}")))?;
        if keypoints
            .iter()
            .any(|k| !(k.confidence >= T::zero() && k.confidence <= T::one()))
        {
            return Err(Error::Parse("keypoint confidence outside [0, 1]".into()));
        }
        Ok(Self { keypoints })
    }

    /// All joints at one point with one confidence.
    pub fn uniform(x: T, y: T, confidence: T) -> Self {
        Self {
            keypoints: [Keypoint { x, y, confidence }; NUM_JOINTS],
        }
    }

    pub fn keypoints(&self) -> &[Keypoint<T>; NUM_JOINTS] {
        &self.keypoints
    }

    /// Overall pose score: mean keypoint confidence.
    pub fn pose_score(&self) -> T {
        let s: f64 = self.keypoints.iter().map(|k| k.confidence.widen()).sum();
        T::narrow(s / NUM_JOINTS as f64)
    }

    pub fn scale(&self, sx: T, sy: T) -> Self {
        let mut keypoints = self.keypoints;
        for k in keypoints.iter_mut() {
            k.x = k.x * sx;
            k.y = k.y * sy;
        }
        Self { keypoints }
    }
}

/// Fraction of the human box height used as the side of a joint box.
pub const JOINT_BOX_SCALE: f64 = 0.3;

/// Square box around a joint, sized from the human box height and clipped
/// to the image.
pub fn joint_region_box<T: Scalar>(
    joint: &Keypoint<T>,
    human: &BBox<T>,
    image_width: T,
    image_height: T,
) -> BBox<T> {
    let half = human.height() * lit(JOINT_BOX_SCALE * 0.5);
    let cx = joint.x.max(T::zero()).min(image_width);
    let cy = joint.y.max(T::zero()).min(image_height);
    BBox::new(cx - half, cy - half, cx + half, cy + half).clip(image_width, image_height)
}
