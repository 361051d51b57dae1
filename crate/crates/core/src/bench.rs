//! Timing sweep of the region-conditioned final layer against a full
//! per-region recomputation.
//!
//! Runs on a single worker so the numbers reflect algorithmic cost.
//! Each cell first checks that both routes agree, then reports median
//! wall-clock times:
//!
//! * `naive`: one complete final layer per region,
//! * `region`: the per-region stage given the shared projections,
//! * `total`: shared projections, all tokens, and the per-region stage.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{naive_region_feature, EncoderLayer, SharedFinalLayer};
use crate::error::{Error, Result};
use crate::geometry::{overlap_areas_factored, BBox, PatchGrid, RegionMask};
use crate::numerics::{max_abs_diff, Tensor};

pub const EQUIVALENCE_TOLERANCE: f64 = 1e-5;
const BENCH_IMAGE: usize = 672;
/// A timed batch repeats the work until it lasts at least this long.
const MIN_BATCH_SECS: f64 = 2e-3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub patch_counts: Vec<usize>,
    pub region_counts: Vec<usize>,
    pub repetitions: usize,
    pub dim: usize,
    pub heads: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            patch_counts: vec![441, 1764],
            region_counts: vec![1, 8, 16],
            repetitions: 5,
            dim: 32,
            heads: 2,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchCell {
    pub patches: usize,
    pub regions: usize,
    pub naive_secs: f64,
    pub region_secs: f64,
    pub total_secs: f64,
    /// `region_secs / naive_secs`.
    pub ratio: f64,
    pub max_diff: f64,
    pub equivalent: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub config: BenchConfig,
    pub cells: Vec<BenchCell>,
}

impl BenchReport {
    pub fn cell(&self, patches: usize, regions: usize) -> Option<&BenchCell> {
        self.cells
            .iter()
            .find(|c| c.patches == patches && c.regions == regions)
    }

    pub fn all_equivalent(&self) -> bool {
        self.cells.iter().all(|c| c.equivalent)
    }

    pub fn to_table(&self) -> String {
        let mut s = format!(
            "{:>6} {:>4} {:>12} {:>12} {:>12} {:>10} {:>10} {}\n",
            "L", "M", "naive_s", "region_s", "total_s", "ratio", "max_diff", "equal"
        );
        for c in &self.cells {
            s.push_str(&format!(
                "{:>6} {:>4} {:>12.6} {:>12.6} {:>12.6} {:>10.5} {:>10.2e} {}\n",
                c.patches, c.regions, c.naive_secs, c.region_secs, c.total_secs, c.ratio, c.max_diff, c.equivalent
            ));
        }
        s
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Median seconds per call over `reps` batches.
pub fn median_secs(reps: usize, mut f: impl FnMut()) -> f64 {
    let start = Instant::now();
    f();
    let once = start.elapsed().as_secs_f64().max(1e-9);
    let iters = ((MIN_BATCH_SECS / once).ceil() as usize).max(1);
    let samples = (0..reps.max(1))
        .map(|_| {
            let t = Instant::now();
            for _ in 0..iters {
                f();
            }
            t.elapsed().as_secs_f64() / iters as f64
        })
        .collect();
    median(samples)
}

fn grid_for(patches: usize) -> Result<PatchGrid> {
    let side = (patches as f64).sqrt().round() as usize;
    if side * side != patches {
        return Err(Error::Config(format!("{patches} patches is not a square grid")));
    }
    let patch = if BENCH_IMAGE.is_multiple_of(side) { BENCH_IMAGE / side } else { 16 };
    PatchGrid::square(patch, side)
}

fn random_masks(grid: &PatchGrid, count: usize, rng: &mut ChaCha8Rng) -> Result<Vec<RegionMask<f32>>> {
    let size = grid.image_width() as f64;
    (0..count)
        .map(|_| {
            let x = rng.gen_range(0.0..size * 0.8);
            let y = rng.gen_range(0.0..size * 0.8);
            let w = rng.gen_range(size * 0.05..size * 0.2);
            let h = rng.gen_range(size * 0.05..size * 0.2);
            let b = BBox::new(x, y, (x + w).min(size), (y + h).min(size));
            Ok(overlap_areas_factored(&b, grid)?.cast())
        })
        .collect()
}

fn bench_cell(
    input: &Tensor<f32>,
    layer: &EncoderLayer<f32>,
    masks: &[RegionMask<f32>],
    cfg: &BenchConfig,
) -> Result<BenchCell> {
    let shared = SharedFinalLayer::new(input, layer, cfg.heads)?;
    let fast = shared
        .region_features(masks)
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let mut max_diff = 0.0f64;
    for (m, f) in masks.iter().zip(&fast) {
        let slow = naive_region_feature(input, m, layer, cfg.heads)?;
        max_diff = max_diff.max(max_abs_diff(f, &slow));
    }
    let equivalent = max_diff < EQUIVALENCE_TOLERANCE;

    let naive_secs = median_secs(cfg.repetitions, || {
        for m in masks {
            std::hint::black_box(naive_region_feature(input, m, layer, cfg.heads).ok());
        }
    });
    let region_secs = median_secs(cfg.repetitions, || {
        std::hint::black_box(shared.region_features(masks));
    });
    let total_secs = median_secs(cfg.repetitions, || {
        let s = SharedFinalLayer::new(input, layer, cfg.heads).expect("checked above");
        std::hint::black_box(s.unmasked_tokens().ok());
        std::hint::black_box(s.region_features(masks));
    });
    Ok(BenchCell {
        patches: masks[0].patches().len(),
        regions: masks.len(),
        naive_secs,
        region_secs,
        total_secs,
        ratio: region_secs / naive_secs,
        max_diff,
        equivalent,
    })
}

pub fn bench_moa(cfg: &BenchConfig) -> Result<BenchReport> {
    if cfg.dim == 0 || cfg.heads == 0 || !cfg.dim.is_multiple_of(cfg.heads) {
        return Err(Error::Config(format!("width {} with {} heads", cfg.dim, cfg.heads)));
    }
    if cfg.region_counts.contains(&0) {
        return Err(Error::Config("region counts must be positive".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .map_err(|e| Error::Config(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut cells = Vec::new();
    for &patches in &cfg.patch_counts {
        let grid = grid_for(patches)?;
        let layer = EncoderLayer::<f32>::random(cfg.dim, 2 * cfg.dim, &mut rng);
        let input = Tensor::<f32>::random_normal(vec![patches + 1, cfg.dim], 1.0, &mut rng);
        let max_m = cfg.region_counts.iter().copied().max().unwrap_or(0);
        let masks = random_masks(&grid, max_m, &mut rng)?;
        for &m in &cfg.region_counts {
            cells.push(pool.install(|| bench_cell(&input, &layer, &masks[..m], cfg))?);
        }
    }
    Ok(BenchReport {
        config: cfg.clone(),
        cells,
    })
}
