//! Invariant suite shared by the `selftest` command and the acceptance
//! target. Each check returns its worst observed error next to the bound.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::backbone::{naive_region_feature, EncoderLayer, SharedFinalLayer, ViTConfig, Vit, VitParams};
use crate::demo;
use crate::error::Result;
use crate::evaluation::{evaluate_map, fixtures};
use crate::formats::{parse_ppm, to_canonical_json};
use crate::geometry::{
    overlap_areas_factored, overlap_areas_factored_faulty, overlap_areas_oracle, quantized_mask, BBox,
    JointSet, Keypoint, PatchGrid, QuantizeMode, RegionMask,
};
use crate::hoi_head::{compose_final_score, focal_loss};
use crate::local_features::LocalFeatureSet;
use crate::numerics::{max_abs_diff, MlpSpec, Tensor};
use crate::pipeline::{infer, InferOptions};
use crate::pose_graph::{human_local_feature, joint_attention, spatial_pair_features};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckOutcome {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl CheckOutcome {
    fn new(name: &str, passed: bool, detail: String) -> Self {
        Self {
            name: name.into(),
            passed,
            detail,
        }
    }

    pub fn line(&self) -> String {
        format!("{} {}: {}", if self.passed { "PASS" } else { "FAIL" }, self.name, self.detail)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GeometryRoute {
    Factored,
    /// Known-bad variant used to confirm the sweep can fail.
    Faulty,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeometrySweep {
    pub max_diff: f64,
    pub max_area_error: f64,
}

/// Random boxes (partly outside the image) on random grids; compares the
/// factored masks with the per-patch oracle and checks area conservation.
pub fn geometry_sweep(cases: usize, seed: u64, route: GeometryRoute) -> Result<GeometrySweep> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = GeometrySweep {
        max_diff: 0.0,
        max_area_error: 0.0,
    };
    for _ in 0..cases {
        let patch = if rng.gen_bool(0.5) { 16 } else { 32 };
        let grid = PatchGrid::new(patch, rng.gen_range(1..=42), rng.gen_range(1..=42))?;
        let (w, h) = (grid.image_width() as f64, grid.image_height() as f64);
        let b = loop {
            let x1 = rng.gen_range(-0.1 * w..w);
            let y1 = rng.gen_range(-0.1 * h..h);
            let b = BBox::new(x1, y1, x1 + rng.gen_range(0.5..w), y1 + rng.gen_range(0.5..h));
            if b.clip(w, h).area() > 0.0 {
                break b;
            }
        };
        let oracle = overlap_areas_oracle(&b, &grid)?;
        let got = match route {
            GeometryRoute::Factored => overlap_areas_factored(&b, &grid)?,
            GeometryRoute::Faulty => overlap_areas_factored_faulty(&b, &grid)?,
        };
        out.max_diff = out.max_diff.max(got.max_diff(&oracle));
        let p2 = (patch * patch) as f64;
        let covered: f64 = got.patches().iter().map(|s| s * p2).sum();
        out.max_area_error = out.max_area_error.max((covered - b.clip(w, h).area()).abs());
    }
    Ok(out)
}

fn tiny_vit_config() -> ViTConfig {
    ViTConfig {
        patch_size: 16,
        image_size: 64,
        embed_dim: 32,
        num_heads: 2,
        num_layers: 2,
        mlp_ratio: 2,
    }
}

fn random_box(rng: &mut ChaCha8Rng, size: f64) -> BBox<f64> {
    let x = rng.gen_range(0.0..size - 2.0);
    let y = rng.gen_range(0.0..size - 2.0);
    BBox::new(x, y, rng.gen_range(x + 1.0..size), rng.gen_range(y + 1.0..size))
}

/// Efficient vs per-region full recomputation on a 4×4-patch ViT
/// (L = 16, C = 32, two heads) with up to 16 random boxes per image.
pub fn moa_equivalence(cases: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = tiny_vit_config();
    let mut params = VitParams::<f32>::random(&cfg, &mut rng);
    // larger weights than the init scheme so the bias actually matters
    params.layers = (0..cfg.num_layers)
        .map(|_| {
            let mut l = EncoderLayer::random(32, 64, &mut rng);
            l.qkv.weight = Tensor::random_normal(vec![32, 96], 0.3, &mut rng);
            l
        })
        .collect();
    let vit = Vit::new(cfg, params)?;
    let grid = cfg.grid();
    let last = vit.params().layers.last().expect("two layers");
    let mut worst = 0.0f64;
    for _ in 0..cases {
        let image = Tensor::<f32>::random_normal(vec![64, 64, 3], 1.0, &mut rng);
        let x = vit.penultimate(&image)?;
        let m = rng.gen_range(1..=16);
        let masks = (0..m)
            .map(|_| Ok(overlap_areas_factored(&random_box(&mut rng, 64.0), &grid)?.cast()))
            .collect::<Result<Vec<RegionMask<f32>>>>()?;
        let shared = SharedFinalLayer::new(&x, last, cfg.num_heads)?;
        for (mask, fast) in masks.iter().zip(shared.region_features(&masks)) {
            let slow = naive_region_feature(&x, mask, last, cfg.num_heads)?;
            worst = worst.max(max_abs_diff(&fast?, &slow));
        }
    }
    Ok(worst)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantizationContrast {
    /// Every patch-aligned fixture matched bit for bit.
    pub aligned_identical: bool,
    /// Largest feature difference on the non-aligned fixture.
    pub unaligned_diff: f64,
}

pub fn quantization_contrast(seed: u64) -> Result<QuantizationContrast> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let grid = PatchGrid::square(16, 4)?;
    let mut layer = EncoderLayer::<f32>::random(32, 64, &mut rng);
    layer.qkv.weight = Tensor::random_normal(vec![32, 96], 0.3, &mut rng);
    layer.proj.weight = Tensor::random_normal(vec![32, 32], 0.3, &mut rng);
    let x = Tensor::<f32>::random_normal(vec![17, 32], 1.0, &mut rng);
    let shared = SharedFinalLayer::new(&x, &layer, 2)?;
    let feature = |b: &BBox<f64>, quant: Option<QuantizeMode>| -> Result<Vec<f32>> {
        let m: RegionMask<f32> = match quant {
            None => overlap_areas_factored(b, &grid)?.cast(),
            Some(mode) => quantized_mask(b, &grid, mode)?.cast(),
        };
        shared.region_feature(&m)
    };
    let aligned = [
        BBox::new(0.0, 0.0, 64.0, 64.0),
        BBox::new(16.0, 16.0, 48.0, 32.0),
        BBox::new(0.0, 32.0, 16.0, 64.0),
        BBox::new(32.0, 0.0, 64.0, 48.0),
    ];
    let mut aligned_identical = true;
    for b in &aligned {
        let exact = feature(b, None)?;
        for mode in [QuantizeMode::AttendAll, QuantizeMode::MaskAll] {
            aligned_identical &= feature(b, Some(mode))? == exact;
        }
    }
    let unaligned = BBox::new(10.0, 6.0, 41.0, 37.0);
    let exact = feature(&unaligned, None)?;
    let quant = feature(&unaligned, Some(QuantizeMode::AttendAll))?;
    Ok(QuantizationContrast {
        aligned_identical,
        unaligned_diff: max_abs_diff(&exact, &quant),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttentionCheck {
    pub max_sum_error: f64,
    pub zero_score_uniform: bool,
}

fn random_joints(rng: &mut ChaCha8Rng, size: f32, zero_conf: bool) -> JointSet<f32> {
    let kps = (0..17)
        .map(|_| Keypoint {
            x: rng.gen_range(0.0..size),
            y: rng.gen_range(0.0..size),
            confidence: if zero_conf { 0.0 } else { rng.gen_range(0.0..1.0) },
        })
        .collect();
    JointSet::new(kps).expect("17 joints")
}

/// α over random pairs and random query/key MLPs; also checks that a zero
/// pose score gives exactly 1/17 everywhere.
pub fn joint_attention_check(pairs: usize, seed: u64) -> Result<AttentionCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = AttentionCheck {
        max_sum_error: 0.0,
        zero_score_uniform: true,
    };
    let uniform = (1.0f64 / 17.0) as f32;
    for i in 0..pairs {
        let q = MlpSpec::<f32>::random(&[18, 16, 16], 1.0, &mut rng);
        let k = MlpSpec::<f32>::random(&[6, 16, 16], 1.0, &mut rng);
        let h = random_box(&mut rng, 640.0).cast::<f32>();
        let o = random_box(&mut rng, 640.0).cast::<f32>();
        let sp = spatial_pair_features(&h, &o, 640.0, 640.0);
        let zero = i % 10 == 0;
        let joints = random_joints(&mut rng, 640.0, zero);
        let a = joint_attention(&sp, &joints, &o, 640.0, 640.0, &q, &k)?;
        let sum: f64 = a.iter().map(|v| *v as f64).sum();
        out.max_sum_error = out.max_sum_error.max((sum - 1.0).abs());
        if zero {
            out.zero_score_uniform &= a.iter().all(|v| *v == uniform);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SelfLoopCheck {
    pub one_hot_exact: bool,
    pub inside_envelope: bool,
}

pub fn self_loop_check(trials: usize, seed: u64) -> Result<SelfLoopCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = SelfLoopCheck {
        one_hot_exact: true,
        inside_envelope: true,
    };
    for _ in 0..trials {
        let dim = rng.gen_range(1..24);
        let locals = LocalFeatureSet::new(
            (0..17)
                .map(|_| Tensor::<f32>::random_normal(vec![dim], 2.0, &mut rng).into_data())
                .collect(),
        )?;
        let j = rng.gen_range(0..17);
        let mut onehot = vec![0.0f32; 17];
        onehot[j] = 1.0;
        out.one_hot_exact &= human_local_feature(&onehot, &locals)? == locals.features()[j];

        let logits: Vec<f64> = (0..17).map(|_| rng.gen_range(-4.0..4.0)).collect();
        let z: f64 = logits.iter().map(|l| l.exp()).sum();
        let alpha: Vec<f32> = logits.iter().map(|l| (l.exp() / z) as f32).collect();
        let x = human_local_feature(&alpha, &locals)?;
        for (d, v) in x.iter().enumerate() {
            let col = locals.features().iter().map(|f| f[d]);
            let lo = col.clone().fold(f32::INFINITY, f32::min);
            let hi = col.fold(f32::NEG_INFINITY, f32::max);
            out.inside_envelope &= lo <= *v && *v <= hi;
        }
    }
    Ok(out)
}

/// Largest relative gap between the analytic focal gradient and a
/// central difference (h = 1e-5) on a 10 × 2 × 5 × 10 grid of
/// (ŷ, y, α, γ).
pub fn focal_gradient_check() -> f64 {
    let h = 1e-5;
    let mut worst = 0.0f64;
    for i in 0..10 {
        let p = 0.05 + 0.1 * i as f64;
        for y in [false, true] {
            for alpha in [0.1, 0.25, 0.5, 0.75, 0.9] {
                for gamma in [0.0, 0.2, 0.5, 0.8, 1.0, 1.5, 2.0, 2.5, 3.0, 5.0] {
                    let (_, g) = focal_loss(p, y, alpha, gamma);
                    let fd = (focal_loss(p + h, y, alpha, gamma).0 - focal_loss(p - h, y, alpha, gamma).0) / (2.0 * h);
                    worst = worst.max((g - fd).abs() / fd.abs());
                }
            }
        }
    }
    worst
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CompositionCheck {
    pub identity_at_full_confidence: bool,
    pub monotone: bool,
}

pub fn score_composition_check(tuples: usize, seed: u64) -> CompositionCheck {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = CompositionCheck {
        identity_at_full_confidence: true,
        monotone: true,
    };
    for _ in 0..tuples {
        let (sh, so, sv): (f64, f64, f64) = (rng.gen(), rng.gen(), rng.gen());
        let l = rng.gen_range(0.1..5.0);
        let d: f64 = rng.gen_range(0.0..0.5);
        for lambda in [1.0, 2.8] {
            out.identity_at_full_confidence &= compose_final_score(1.0, 1.0, sv, lambda) == sv;
        }
        let base = compose_final_score(sh, so, sv, l);
        out.monotone &= (0.0..=1.0).contains(&base)
            && compose_final_score((sh + d).min(1.0), so, sv, l) >= base
            && compose_final_score(sh, (so + d).min(1.0), sv, l) >= base
            && compose_final_score(sh, so, (sv + d).min(1.0), l) >= base
            && compose_final_score(sh, so, sv, l + d) <= base;
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MapCheck {
    pub perfect: f64,
    pub crafted: f64,
}

pub fn map_check() -> Result<MapCheck> {
    let gt = fixtures::crafted_gt();
    let mut perfect = gt.clone();
    for (i, t) in perfect.images[0].triplets.iter_mut().enumerate() {
        t.score = Some(0.9 - 0.1 * i as f32);
    }
    Ok(MapCheck {
        perfect: evaluate_map(&perfect, &gt, 0.5)?.map,
        crafted: evaluate_map(&fixtures::crafted_predictions(), &gt, 0.5)?.map,
    })
}

/// Canonical prediction JSON for the demo fixture on a pool of `threads`.
pub fn demo_predictions(threads: usize) -> Result<String> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| crate::error::Error::Config(e.to_string()))?;
    pool.install(|| {
        let model = demo::model::<f32>()?;
        let image = parse_ppm(&demo::image_ppm())?;
        let preds = infer(&model, &image, &demo::detections(), &demo::poses(), &InferOptions::default())?;
        to_canonical_json(&preds)
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SelftestOptions {
    pub seed: u64,
    pub inject_fault: bool,
}

/// Runs every check at a size that finishes in a few seconds.
pub fn run_selftest(opts: SelftestOptions) -> Result<Vec<CheckOutcome>> {
    let s = opts.seed;
    let mut out = Vec::new();
    let route = if opts.inject_fault {
        GeometryRoute::Faulty
    } else {
        GeometryRoute::Factored
    };
    let g = geometry_sweep(2000, s, route)?;
    out.push(CheckOutcome::new(
        "geometry oracle sweep",
        g.max_diff < 1e-6,
        format!("max |factored - oracle| = {:.3e} (bound 1e-6)", g.max_diff),
    ));
    out.push(CheckOutcome::new(
        "area conservation",
        g.max_area_error < 1e-3,
        format!("max area error = {:.3e} px^2 (bound 1e-3)", g.max_area_error),
    ));
    let d = moa_equivalence(40, s)?;
    out.push(CheckOutcome::new(
        "MOA efficient vs naive",
        d < 1e-5,
        format!("max diff = {d:.3e} (bound 1e-5)"),
    ));
    let q = quantization_contrast(s)?;
    out.push(CheckOutcome::new(
        "quantization contrast",
        q.aligned_identical && q.unaligned_diff >= 1e-3,
        format!("aligned identical = {}, unaligned diff = {:.3e}", q.aligned_identical, q.unaligned_diff),
    ));
    let a = joint_attention_check(300, s)?;
    out.push(CheckOutcome::new(
        "joint attention normalization",
        a.max_sum_error < 1e-6 && a.zero_score_uniform,
        format!("max |sum - 1| = {:.3e}, zero score uniform = {}", a.max_sum_error, a.zero_score_uniform),
    ));
    let l = self_loop_check(300, s)?;
    out.push(CheckOutcome::new(
        "self-loop selection",
        l.one_hot_exact && l.inside_envelope,
        format!("one-hot exact = {}, convex envelope = {}", l.one_hot_exact, l.inside_envelope),
    ));
    let f = focal_gradient_check();
    out.push(CheckOutcome::new(
        "focal gradient",
        f < 1e-5,
        format!("max relative error = {f:.3e} (bound 1e-5)"),
    ));
    let c = score_composition_check(1000, s);
    out.push(CheckOutcome::new(
        "score composition",
        c.identity_at_full_confidence && c.monotone,
        format!("identity = {}, monotone = {}", c.identity_at_full_confidence, c.monotone),
    ));
    let m = map_check()?;
    out.push(CheckOutcome::new(
        "mAP oracle",
        (m.perfect - 1.0).abs() < 1e-9 && (m.crafted - fixtures::CRAFTED_MAP).abs() < 1e-6,
        format!("perfect = {:.9}, crafted = {:.9} (expected {})", m.perfect, m.crafted, fixtures::CRAFTED_MAP),
    ));
    let one = demo_predictions(1)?;
    let four = demo_predictions(4)?;
    out.push(CheckOutcome::new(
        "inference determinism",
        one == four,
        format!("1-thread and 4-thread outputs identical = {}", one == four),
    ));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clean_suite_passes() {
        let r = run_selftest(SelftestOptions { seed: 1, inject_fault: false }).unwrap();
        for c in &r {
            assert!(c.passed, "{}", c.line());
        }
    }

    #[test]
    fn injected_fault_is_caught() {
        let g = geometry_sweep(300, 2, GeometryRoute::Faulty).unwrap();
        assert!(g.max_diff > 1e-3);
    }
}
