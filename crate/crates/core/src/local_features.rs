//! Per-joint appearance features pooled from the final-layer patch map.

use crate::error::{dim_err, Result};
use crate::geometry::{joint_region_box, BBox, JointSet, PatchGrid, NUM_JOINTS};
use crate::numerics::{bilinear_accumulate, MlpSpec, Tensor};
use crate::scalar::{lit, Scalar};

/// Output bins per side for joint pooling.
pub const JOINT_POOL_BINS: usize = 3;
/// Bilinear sample points per bin side.
pub const SAMPLES_PER_BIN: usize = 2;

#[derive(Debug, Clone, PartialEq)]
pub struct RoiPooled<T> {
    /// `[R × R × C]`.
    pub features: Tensor<T>,
    /// Set when the box had zero area; `features` is then all zero.
    pub degenerate: bool,
}

/// ROIAlign over an `[H × W × C]` patch map.
///
/// `roi` is in pixels. Patch token `(r, c)` is taken to sit at the centre
/// of its patch, i.e. pixel `x` maps to map column `x / p − 0.5`.
pub fn roi_align<T: Scalar>(
    map: &Tensor<T>,
    roi: &BBox<T>,
    bins: usize,
    grid: &PatchGrid,
) -> Result<RoiPooled<T>> {
    let c = match *map.shape() {
        [h, w, c] if h == grid.height && w == grid.width => c,
        _ => {
            return dim_err(format!(
                "patch map {:?} vs grid {}x{}",
                map.shape(),
                grid.height,
                grid.width
            ))
        }
    };
    if bins == 0 {
        return dim_err("ROIAlign needs at least one bin");
    }
    if roi.area() <= T::zero() {
        return Ok(RoiPooled {
            features: Tensor::zeros(vec![bins, bins, c]),
            degenerate: true,
        });
    }
    let p = grid.patch_size as f64;
    let to_map = |v: T| v.widen() / p - 0.5;
    let (u1, v1) = (to_map(roi.x1), to_map(roi.y1));
    let bw = (to_map(roi.x2) - u1) / bins as f64;
    let bh = (to_map(roi.y2) - v1) / bins as f64;
    let s = SAMPLES_PER_BIN as f64;
    let weight = 1.0 / (s * s);
    let mut data = Vec::with_capacity(bins * bins * c);
    let mut acc = vec![0.0; c];
    for by in 0..bins {
        for bx in 0..bins {
            acc.iter_mut().for_each(|a| *a = 0.0);
            for sy in 0..SAMPLES_PER_BIN {
                let y = v1 + (by as f64 + (sy as f64 + 0.5) / s) * bh;
                for sx in 0..SAMPLES_PER_BIN {
                    let x = u1 + (bx as f64 + (sx as f64 + 0.5) / s) * bw;
                    bilinear_accumulate(map, x, y, weight, &mut acc)?;
                }
            }
            data.extend(acc.iter().map(|&a| T::narrow(a)));
        }
    }
    Ok(RoiPooled {
        features: Tensor::new(vec![bins, bins, c], data)?,
        degenerate: false,
    })
}

/// The 17 local vectors of one human, in keypoint index order.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalFeatureSet<T> {
    features: Vec<Vec<T>>,
}

impl<T: Scalar> LocalFeatureSet<T> {
    pub fn new(features: Vec<Vec<T>>) -> Result<Self> {
        if features.len() != NUM_JOINTS {
            return dim_err(format!(
                "expected {NUM_JOINTS} local features, got {}",
                features.len()
            ));
        }
        let d = features[0].len();
        if features.iter().any(|f| f.len() != d) {
            return dim_err("local features differ in width");
        }
        Ok(Self { features })
    }

    pub fn features(&self) -> &[Vec<T>] {
        &self.features
    }

    pub fn dim(&self) -> usize {
        self.features[0].len()
    }
}

/// Pools a box around every joint and projects the pooled vector to the
/// node width. Joints whose box is empty after clipping get a zero vector.
pub fn extract_joint_locals<T: Scalar>(
    patch_map: &Tensor<T>,
    human: &BBox<T>,
    joints: &JointSet<T>,
    grid: &PatchGrid,
    projector: &MlpSpec<T>,
) -> Result<LocalFeatureSet<T>> {
    let c = patch_map.cols();
    if projector.input_width() != c {
        return dim_err(format!(
            "projector takes {} but the patch map has {c} channels",
            projector.input_width()
        ));
    }
    let (iw, ih) = (
        lit::<T>(grid.image_width() as f64),
        lit::<T>(grid.image_height() as f64),
    );
    let cells = (JOINT_POOL_BINS * JOINT_POOL_BINS) as f64;
    let features = joints
        .keypoints()
        .iter()
        .map(|k| {
            let roi = joint_region_box(k, human, iw, ih);
            let pooled = roi_align(patch_map, &roi, JOINT_POOL_BINS, grid)?;
            if pooled.degenerate {
                return Ok(vec![T::zero(); projector.output_width()]);
            }
            let mut mean = vec![0.0; c];
            for cell in 0..JOINT_POOL_BINS * JOINT_POOL_BINS {
                for (m, v) in mean.iter_mut().zip(pooled.features.row(cell)) {
                    *m += v.widen();
                }
            }
            let mean: Vec<T> = mean.iter().map(|m| T::narrow(m / cells)).collect();
            projector.forward_row(&mean)
        })
        .collect::<Result<Vec<_>>>()?;
    LocalFeatureSet::new(features)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Keypoint;
    use crate::numerics::Linear;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn grid(side: usize) -> PatchGrid {
        PatchGrid::square(16, side).unwrap()
    }

    #[test]
    fn constant_map_pools_to_constant() {
        let map = Tensor::filled(vec![4, 4, 3], 0.7f64);
        let out = roi_align(&map, &BBox::new(3.0, 7.0, 51.0, 40.0), 3, &grid(4)).unwrap();
        assert!(!out.degenerate);
        assert!(out.features.data().iter().all(|v| (v - 0.7).abs() < 1e-12));
    }

    #[test]
    fn single_cell_map_returns_that_cell() {
        let map = Tensor::new(vec![1, 1, 2], vec![2.0f64, -1.0]).unwrap();
        let out = roi_align(&map, &BBox::new(0.0, 0.0, 16.0, 16.0), 1, &grid(1)).unwrap();
        assert_eq!(out.features.data(), &[2.0, -1.0]);
    }

    #[test]
    fn zero_area_box_is_flagged() {
        let map = Tensor::filled(vec![2, 2, 1], 1.0f32);
        let out = roi_align(&map, &BBox::new(5.0, 5.0, 5.0, 9.0), 3, &grid(2)).unwrap();
        assert!(out.degenerate);
        assert!(out.features.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn matches_explicit_corner_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..50 {
            let map: Tensor<f64> = Tensor::random_normal(vec![5, 5, 2], 0.3, &mut rng);
            let x1 = rng.gen_range(0.0..50.0);
            let y1 = rng.gen_range(0.0..50.0);
            let roi = BBox::new(x1, y1, x1 + rng.gen_range(6.0..30.0), y1 + rng.gen_range(6.0..30.0));
            let got = roi_align(&map, &roi, 3, &grid(5)).unwrap();
            // 2x2 samples per bin, explicit 4-corner interpolation
            let sample = |x: f64, y: f64, ch: usize| {
                let x = x.clamp(0.0, 4.0);
                let y = y.clamp(0.0, 4.0);
                let (x0, y0) = (x.floor() as usize, y.floor() as usize);
                let (x1, y1) = ((x0 + 1).min(4), (y0 + 1).min(4));
                let (fx, fy) = (x - x0 as f64, y - y0 as f64);
                let v = |r: usize, c: usize| map.data()[(r * 5 + c) * 2 + ch];
                v(y0, x0) * (1.0 - fx) * (1.0 - fy)
                    + v(y0, x1) * fx * (1.0 - fy)
                    + v(y1, x0) * (1.0 - fx) * fy
                    + v(y1, x1) * fx * fy
            };
            let (u1, v1) = (roi.x1 / 16.0 - 0.5, roi.y1 / 16.0 - 0.5);
            let bw = (roi.x2 - roi.x1) / 16.0 / 3.0;
            let bh = (roi.y2 - roi.y1) / 16.0 / 3.0;
            for by in 0..3 {
                for bx in 0..3 {
                    for ch in 0..2 {
                        let mut s = 0.0;
                        for i in 0..2 {
                            for j in 0..2 {
                                let x = u1 + (bx as f64 + (j as f64 + 0.5) / 2.0) * bw;
                                let y = v1 + (by as f64 + (i as f64 + 0.5) / 2.0) * bh;
                                s += sample(x, y, ch);
                            }
                        }
                        let want = s / 4.0;
                        let g = got.features.data()[(by * 3 + bx) * 2 + ch];
                        assert!((g - want).abs() < 1e-12, "{g} vs {want}");
                    }
                }
            }
        }
    }

    fn joints_at(x: f64, y: f64) -> JointSet<f64> {
        JointSet::uniform(x, y, 1.0)
    }

    #[test]
    fn zero_map_gives_projector_bias() {
        let map = Tensor::zeros(vec![4, 4, 8]);
        let mut proj = Linear::<f64>::zeros(8, 5);
        proj.bias = Tensor::from_vec(vec![0.1, 0.2, 0.3, 0.4, 0.5]);
        let proj = MlpSpec::new(vec![proj]).unwrap();
        let human = BBox::new(10.0, 5.0, 40.0, 60.0);
        let set = extract_joint_locals(&map, &human, &joints_at(20.0, 30.0), &grid(4), &proj).unwrap();
        assert_eq!(set.features().len(), 17);
        for f in set.features() {
            assert_eq!(f, proj.layers()[0].bias.data());
        }
    }

    #[test]
    fn joint_location_matters_on_two_tone_map() {
        // left half dark, right half bright
        let mut map = Tensor::zeros(vec![4, 4, 1]);
        for r in 0..4 {
            for c in 2..4 {
                map.data_mut()[r * 4 + c] = 1.0;
            }
        }
        let proj = MlpSpec::new(vec![Linear::<f64>::identity(1)]).unwrap();
        let human = BBox::new(0.0, 0.0, 64.0, 40.0);
        let mut kps = vec![Keypoint { x: 8.0, y: 30.0, confidence: 1.0 }; 17];
        kps[5] = Keypoint { x: 56.0, y: 30.0, confidence: 1.0 };
        kps[6] = kps[5];
        let set = extract_joint_locals(&map, &human, &JointSet::new(kps).unwrap(), &grid(4), &proj)
            .unwrap();
        let f = set.features();
        assert!(f[5][0] > f[0][0]);
        assert_eq!(f[5], f[6]);
        assert_eq!(f[0], f[1]);
    }

    #[test]
    fn flat_human_box_gives_zero_vectors() {
        let map = Tensor::filled(vec![4, 4, 2], 1.0f64);
        let mut lin = Linear::zeros(2, 3);
        lin.bias = Tensor::from_vec(vec![1.0, 1.0, 1.0]);
        let proj = MlpSpec::new(vec![lin]).unwrap();
        let human = BBox::new(0.0, 20.0, 30.0, 20.0);
        let set = extract_joint_locals(&map, &human, &joints_at(10.0, 20.0), &grid(4), &proj).unwrap();
        assert!(set.features().iter().all(|f| f == &vec![0.0; 3]));
    }

    proptest! {
        #[test]
        fn translation_by_whole_cells(
            seed in 0u64..1000,
            shift in 1usize..3,
            x1 in 20.0f64..40.0, y1 in 20.0f64..40.0, w in 4.0f64..20.0, h in 4.0f64..20.0,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let base: Tensor<f64> = Tensor::random_normal(vec![8, 8, 2], 1.0, &mut rng);
            let mut shifted = Tensor::zeros(vec![8, 8, 2]);
            for r in 0..8 {
                for c in 0..8 {
                    let (sr, sc) = ((r + 8 - shift) % 8, (c + 8 - shift) % 8);
                    for ch in 0..2 {
                        shifted.data_mut()[(r * 8 + c) * 2 + ch] = base.data()[(sr * 8 + sc) * 2 + ch];
                    }
                }
            }
            let g = grid(8);
            let roi = BBox::new(x1, y1, x1 + w, y1 + h);
            let d = 16.0 * shift as f64;
            let moved = BBox::new(x1 + d, y1 + d, x1 + w + d, y1 + h + d);
            let a = roi_align(&base, &roi, 3, &g).unwrap();
            let b = roi_align(&shifted, &moved, 3, &g).unwrap();
            prop_assert!(a.features.max_abs_diff(&b.features).unwrap() < 1e-9);
        }

        #[test]
        fn continuous_in_box_coordinates(
            seed in 0u64..1000,
            x1 in 0.0f64..60.0, y1 in 0.0f64..60.0, w in 2.0f64..40.0, h in 2.0f64..40.0,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let map: Tensor<f32> = Tensor::random_normal(vec![6, 6, 4], 1.0, &mut rng);
            let g = grid(6);
            let a = roi_align(&map, &BBox::new(x1 as f32, y1 as f32, (x1 + w) as f32, (y1 + h) as f32), 3, &g).unwrap();
            let e = 1e-4;
            let b = roi_align(&map, &BBox::new((x1 + e) as f32, (y1 - e) as f32, (x1 + w + e) as f32, (y1 + h) as f32), 3, &g).unwrap();
            prop_assert!(a.features.max_abs_diff(&b.features).unwrap() < 1e-2);
        }
    }
}
