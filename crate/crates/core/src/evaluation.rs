//! HOI mAP at a box-IoU threshold.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::formats::{TripletFile, TripletRecord};
use crate::geometry::{iou, BBox};

pub const DEFAULT_IOU_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryAp {
    pub object_class: usize,
    pub verb: usize,
    pub ap: f64,
    pub num_gt: usize,
    pub num_predictions: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapReport {
    pub iou_threshold: f64,
    pub map: f64,
    pub categories: Vec<CategoryAp>,
}

fn bbox(b: &[f32; 4]) -> BBox<f64> {
    BBox::from_corners(b.map(f64::from))
}

/// Smaller of the human and object IoUs.
pub fn pair_overlap(a: &TripletRecord, b: &TripletRecord) -> f64 {
    iou(&bbox(&a.human), &bbox(&b.human)).min(iou(&bbox(&a.object), &bbox(&b.object)))
}

/// All-points interpolated AP from ranked true/false-positive flags.
pub fn average_precision(tp: &[bool], num_gt: usize) -> f64 {
    if num_gt == 0 {
        return 0.0;
    }
    let mut precision = Vec::with_capacity(tp.len());
    let mut recall = Vec::with_capacity(tp.len());
    let mut hits = 0usize;
    for (i, &t) in tp.iter().enumerate() {
        hits += t as usize;
        precision.push(hits as f64 / (i + 1) as f64);
        recall.push(hits as f64 / num_gt as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev = 0.0;
    for (p, r) in precision.iter().zip(&recall) {
        ap += (r - prev) * p;
        prev = *r;
    }
    ap
}

type Category = (usize, usize);

/// Per-category AP and their mean over categories with ground truth.
///
/// Predictions are ranked by score; equal scores keep file order (image
/// order, then triplet order). Each prediction takes the unmatched
/// ground truth of the same image and category with the largest
/// [`pair_overlap`] at or above the threshold, earlier ground truth
/// winning ties.
pub fn evaluate_map(predictions: &TripletFile, ground_truth: &TripletFile, iou_threshold: f64) -> Result<MapReport> {
    let mut gt: BTreeMap<Category, Vec<(usize, &TripletRecord)>> = BTreeMap::new();
    for (img, entry) in ground_truth.images.iter().enumerate() {
        for t in &entry.triplets {
            gt.entry((t.object_class, t.verb)).or_default().push((img, t));
        }
    }
    if gt.is_empty() {
        return Err(Error::Config("ground truth contains no triplets".into()));
    }
    let image_index: BTreeMap<&str, usize> = ground_truth
        .images
        .iter()
        .enumerate()
        .map(|(i, e)| (e.image_id.as_str(), i))
        .collect();
    let mut preds: BTreeMap<Category, Vec<(Option<usize>, &TripletRecord)>> = BTreeMap::new();
    for entry in &predictions.images {
        let img = image_index.get(entry.image_id.as_str()).copied();
        for t in &entry.triplets {
            preds.entry((t.object_class, t.verb)).or_default().push((img, t));
        }
    }

    let mut categories = Vec::with_capacity(gt.len());
    for (&(object_class, verb), truths) in &gt {
        let mut ranked: Vec<&(Option<usize>, &TripletRecord)> =
            preds.get(&(object_class, verb)).map_or(Vec::new(), |v| v.iter().collect());
        ranked.sort_by(|a, b| {
            let (sa, sb) = (a.1.score.unwrap_or(0.0), b.1.score.unwrap_or(0.0));
            sb.total_cmp(&sa)
        });
        let mut matched = vec![false; truths.len()];
        let tp: Vec<bool> = ranked
            .iter()
            .map(|(img, p)| {
                let mut best: Option<(usize, f64)> = None;
                for (g, (gimg, truth)) in truths.iter().enumerate() {
                    if matched[g] || Some(*gimg) != *img {
                        continue;
                    }
                    let o = pair_overlap(p, truth);
                    if o >= iou_threshold && best.is_none_or(|(_, b)| o > b) {
                        best = Some((g, o));
                    }
                }
                best.map(|(g, _)| matched[g] = true).is_some()
            })
            .collect();
        categories.push(CategoryAp {
            object_class,
            verb,
            ap: average_precision(&tp, truths.len()),
            num_gt: truths.len(),
            num_predictions: ranked.len(),
        });
    }
    let map = categories.iter().map(|c| c.ap).sum::<f64>() / categories.len() as f64;
    Ok(MapReport {
        iou_threshold,
        map,
        categories,
    })
}

#[doc(hidden)]
pub mod fixtures {
    use crate::formats::{ImageTriplets, TripletFile, TripletRecord};

    fn rec(h: [f32; 4], o: [f32; 4], obj: usize, verb: usize, score: Option<f32>) -> TripletRecord {
        TripletRecord { human: h, object: o, object_class: obj, verb, score }
    }

    fn file(t: Vec<TripletRecord>) -> TripletFile {
        TripletFile { images: vec![ImageTriplets { image_id: "a".into(), triplets: t }] }
    }

    /// Three ground-truth triplets in two categories.
    pub fn crafted_gt() -> TripletFile {
        file(vec![
            rec([0.0, 0.0, 10.0, 10.0], [20.0, 20.0, 30.0, 30.0], 1, 0, None),
            rec([40.0, 0.0, 50.0, 10.0], [60.0, 0.0, 70.0, 10.0], 1, 0, None),
            rec([0.0, 0.0, 10.0, 10.0], [0.0, 20.0, 10.0, 30.0], 2, 3, None),
        ])
    }

    /// Six predictions: a hit, a duplicate, a miss, a hit, a weak-human
    /// miss, a hit. Category (1, 0) has AP 0.75, category (2, 3) 0.5.
    pub fn crafted_predictions() -> TripletFile {
        file(vec![
            rec([0.0, 0.0, 10.0, 10.0], [20.0, 20.0, 30.0, 30.0], 1, 0, Some(0.9)),
            rec([1.0, 0.0, 10.0, 10.0], [20.0, 20.0, 30.0, 30.0], 1, 0, Some(0.8)),
            rec([80.0, 80.0, 90.0, 90.0], [20.0, 20.0, 30.0, 30.0], 1, 0, Some(0.7)),
            rec([40.0, 1.0, 50.0, 10.0], [60.0, 0.0, 70.0, 11.0], 1, 0, Some(0.6)),
            rec([6.0, 0.0, 16.0, 10.0], [0.0, 20.0, 10.0, 30.0], 2, 3, Some(0.5)),
            rec([0.0, 0.0, 10.0, 10.0], [0.0, 20.0, 10.0, 30.0], 2, 3, Some(0.4)),
        ])
    }

    pub const CRAFTED_MAP: f64 = 0.625;
}

#[cfg(test)]
mod tests {
    use super::fixtures::*;
    use super::*;
    use crate::formats::ImageTriplets;
    use proptest::prelude::*;

    fn with_scores(f: &TripletFile) -> TripletFile {
        let mut f = f.clone();
        for (i, t) in f.images.iter_mut().flat_map(|e| e.triplets.iter_mut()).enumerate() {
            t.score = Some(1.0 - i as f32 * 0.01);
        }
        f
    }

    /// Brute-force reference: for each prediction in rank order, scan
    /// every ground truth; AP as the sum over recall steps of the best
    /// precision at any rank reaching that recall.
    fn oracle(preds: &TripletFile, gt: &TripletFile) -> f64 {
        let mut cats: Vec<(usize, usize)> = gt.images[0].triplets.iter().map(|t| (t.object_class, t.verb)).collect();
        cats.sort();
        cats.dedup();
        let mut total = 0.0;
        for &cat in &cats {
            let truths: Vec<&TripletRecord> =
                gt.images[0].triplets.iter().filter(|t| (t.object_class, t.verb) == cat).collect();
            let mut ps: Vec<(usize, &TripletRecord)> = preds.images[0]
                .triplets
                .iter()
                .enumerate()
                .filter(|(_, t)| (t.object_class, t.verb) == cat)
                .collect();
            ps.sort_by(|a, b| b.1.score.partial_cmp(&a.1.score).unwrap().then(a.0.cmp(&b.0)));
            let mut used = vec![false; truths.len()];
            let mut flags = vec![];
            for (_, p) in &ps {
                let mut pick = None;
                let mut best = -1.0;
                for g in 0..truths.len() {
                    let hi = iou(&bbox(&p.human), &bbox(&truths[g].human));
                    let oi = iou(&bbox(&p.object), &bbox(&truths[g].object));
                    let m = if hi < oi { hi } else { oi };
                    if !used[g] && m >= 0.5 && m > best {
                        best = m;
                        pick = Some(g);
                    }
                }
                if let Some(g) = pick {
                    used[g] = true;
                }
                flags.push(pick.is_some());
            }
            let n = truths.len() as f64;
            let stats: Vec<(f64, f64)> = (0..flags.len())
                .map(|k| {
                    let hits = flags[..=k].iter().filter(|f| **f).count() as f64;
                    (hits / n, hits / (k + 1) as f64)
                })
                .collect();
            let mut ap = 0.0;
            let mut prev = 0.0;
            let mut levels: Vec<f64> = stats.iter().map(|s| s.0).collect();
            levels.dedup();
            for r in levels {
                let p = stats.iter().filter(|s| s.0 >= r).map(|s| s.1).fold(0.0, f64::max);
                ap += (r - prev) * p;
                prev = r;
            }
            total += ap;
        }
        total / cats.len() as f64
    }

    #[test]
    fn perfect_predictions_score_one() {
        let gt = crafted_gt();
        let r = evaluate_map(&with_scores(&gt), &gt, 0.5).unwrap();
        assert!((r.map - 1.0).abs() < 1e-12);
    }

    #[test]
    fn disjoint_predictions_score_zero() {
        let gt = crafted_gt();
        let mut p = with_scores(&gt);
        for t in p.images[0].triplets.iter_mut() {
            t.human = [200.0, 200.0, 210.0, 210.0];
        }
        assert_eq!(evaluate_map(&p, &gt, 0.5).unwrap().map, 0.0);
        assert_eq!(evaluate_map(&TripletFile::default(), &gt, 0.5).unwrap().map, 0.0);
    }

    #[test]
    fn crafted_case_matches_hand_value_and_oracle() {
        let r = evaluate_map(&crafted_predictions(), &crafted_gt(), 0.5).unwrap();
        assert!((r.map - CRAFTED_MAP).abs() < 1e-12);
        assert!((r.categories[0].ap - 0.75).abs() < 1e-12);
        assert!((r.categories[1].ap - 0.5).abs() < 1e-12);
        assert!((oracle(&crafted_predictions(), &crafted_gt()) - r.map).abs() < 1e-12);
    }

    #[test]
    fn empty_ground_truth_is_an_error() {
        let gt = TripletFile { images: vec![ImageTriplets { image_id: "a".into(), triplets: vec![] }] };
        assert!(matches!(evaluate_map(&crafted_predictions(), &gt, 0.5), Err(Error::Config(_))));
    }

    #[test]
    fn predictions_for_unknown_images_are_false_positives() {
        let mut p = with_scores(&crafted_gt());
        p.images[0].image_id = "b".into();
        assert_eq!(evaluate_map(&p, &crafted_gt(), 0.5).unwrap().map, 0.0);
    }

    #[test]
    fn ap_examples() {
        assert_eq!(average_precision(&[], 3), 0.0);
        assert_eq!(average_precision(&[true, true], 2), 1.0);
        assert!((average_precision(&[false, true], 1) - 0.5).abs() < 1e-15);
        assert!((average_precision(&[true, false, true], 2) - (0.5 + 0.5 * 2.0 / 3.0)).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn file_order_does_not_matter_for_distinct_scores(seed in 0u64..1000) {
            use rand::{seq::SliceRandom, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let base = crafted_predictions();
            let mut shuffled = base.clone();
            shuffled.images[0].triplets.shuffle(&mut rng);
            let a = evaluate_map(&base, &crafted_gt(), 0.5).unwrap();
            let b = evaluate_map(&shuffled, &crafted_gt(), 0.5).unwrap();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn random_cases_match_oracle(
            boxes in prop::collection::vec((0.0f32..40.0, 0.0f32..40.0, 0usize..2, 0.0f32..1.0), 1..10),
            truths in prop::collection::vec((0.0f32..40.0, 0.0f32..40.0, 0usize..2), 1..5),
        ) {
            let rec = |x: f32, y: f32, c: usize, s: Option<f32>| TripletRecord {
                human: [x, y, x + 12.0, y + 12.0],
                object: [y, x, y + 10.0, x + 10.0],
                object_class: c,
                verb: 0,
                score: s,
            };
            let gt = TripletFile { images: vec![ImageTriplets {
                image_id: "a".into(),
                triplets: truths.iter().map(|&(x, y, c)| rec(x, y, c, None)).collect(),
            }]};
            let preds = TripletFile { images: vec![ImageTriplets {
                image_id: "a".into(),
                triplets: boxes.iter().map(|&(x, y, c, s)| rec(x, y, c, Some(s))).collect(),
            }]};
            let got = evaluate_map(&preds, &gt, 0.5).unwrap().map;
            prop_assert!((got - oracle(&preds, &gt)).abs() < 1e-9);
            prop_assert!((0.0..=1.0).contains(&got));
        }
    }
}
