//! End-to-end inference for one image.

use rayon::prelude::*;

use crate::error::Result;
use crate::formats::{
    resize_square, DetectionFile, ImageTriplets, PoseFile, RgbImage, TripletFile, TripletRecord,
    HUMAN_CLASS,
};
use crate::geometry::{overlap_areas_factored, BBox, JointSet};
use crate::hoi_head::{all_pair_scores, emit_triplets, nms, Detection, EmitParams, VerbMask};
use crate::local_features::extract_joint_locals;
use crate::model::Model;
use crate::pose_graph::{run_graph, GraphInputs, HumanInput, ObjectInput};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct InferOptions {
    pub lambda: f64,
    pub nms_iou: f64,
    pub score_thresh: f64,
    /// Triplets with a final score below this are not written.
    pub output_thresh: f64,
    pub verb_mask: Option<VerbMask>,
}

impl Default for InferOptions {
    fn default() -> Self {
        Self {
            lambda: 2.8,
            nms_iou: 0.5,
            score_thresh: 0.05,
            output_thresh: 0.0,
            verb_mask: None,
        }
    }
}

/// Candidate edges: every human against every other kept detection.
/// Humans also appear on the object side.
pub fn candidate_pairs(classes: &[usize]) -> (Vec<usize>, Vec<(usize, usize)>) {
    let humans: Vec<usize> = (0..classes.len()).filter(|&i| classes[i] == HUMAN_CLASS).collect();
    let pairs = humans
        .iter()
        .enumerate()
        .flat_map(|(hi, &h)| {
            (0..classes.len())
                .filter(move |&o| o != h)
                .map(move |o| (hi, o))
        })
        .collect();
    (humans, pairs)
}

/// Runs NMS, the MOA backbone, joint local features, the pose graph and
/// triplet emission. Output boxes are in original image coordinates.
pub fn infer_image<T: Scalar>(
    model: &Model<T>,
    image: &RgbImage<T>,
    detections: &DetectionFile,
    poses: &PoseFile,
    opts: &InferOptions,
) -> Result<ImageTriplets> {
    let empty = ImageTriplets {
        image_id: detections.image_id.clone(),
        triplets: Vec::new(),
    };
    let all: Vec<Detection<f64>> = detections.detections();
    let kept: Vec<usize> = nms(&all, opts.nms_iou, opts.score_thresh)
        .into_iter()
        .filter(|&i| all[i].bbox.area() > 0.0)
        .collect();
    if kept.is_empty() {
        return Ok(empty);
    }

    let cfg = model.config();
    let side = cfg.vit.image_size;
    let grid = cfg.vit.grid();
    let sx = side as f64 / detections.width as f64;
    let sy = side as f64 / detections.height as f64;
    let resized: Vec<BBox<f64>> = kept.iter().map(|&i| all[i].bbox.scale(sx, sy)).collect();
    let masks = resized
        .iter()
        .map(|b| overlap_areas_factored(b, &grid).map(|m| m.cast::<T>()))
        .collect::<Result<Vec<_>>>()?;
    let pixels = resize_square(image, side);
    let backbone = model.vit.forward(&pixels, &masks)?;
    let region = backbone
        .cls_per_region
        .into_iter()
        .collect::<Result<Vec<Vec<T>>>>()?;

    let classes: Vec<usize> = kept.iter().map(|&i| all[i].class_id).collect();
    let (human_ids, pairs) = candidate_pairs(&classes);
    if human_ids.is_empty() || pairs.is_empty() {
        return Ok(empty);
    }
    let humans = human_ids
        .par_iter()
        .map(|&k| {
            let bbox: BBox<T> = resized[k].cast();
            let joints = match poses.joints_for::<T>(kept[k]) {
                Some(j) => j?.scale(T::narrow(sx), T::narrow(sy)),
                None => {
                    let (cx, cy) = bbox.center();
                    JointSet::uniform(cx, cy, T::zero())
                }
            };
            let locals = extract_joint_locals(
                &backbone.patch_map,
                &bbox,
                &joints,
                &grid,
                &model.graph.local_projector,
            )?;
            Ok(HumanInput {
                region_feature: region[k].clone(),
                bbox,
                joints,
                locals,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let objects = (0..kept.len())
        .map(|k| ObjectInput {
            region_feature: region[k].clone(),
            bbox: resized[k].cast(),
        })
        .collect();
    let s = T::narrow(side as f64);
    let inputs = GraphInputs {
        humans,
        objects,
        pairs,
        image_width: s,
        image_height: s,
    };
    let state = run_graph(&inputs, &model.graph)?;
    let scores = all_pair_scores(&state, &model.classifier)?;

    let original = |k: usize| Detection {
        bbox: all[kept[k]].bbox.cast::<T>(),
        class_id: all[kept[k]].class_id,
        score: T::narrow(all[kept[k]].score),
    };
    let human_dets: Vec<_> = human_ids.iter().map(|&k| original(k)).collect();
    let object_dets: Vec<_> = (0..kept.len()).map(original).collect();
    let params = EmitParams {
        lambda: opts.lambda,
        threshold: opts.output_thresh,
        mask: opts.verb_mask.as_ref(),
    };
    let triplets = emit_triplets(&state, &scores, &human_dets, &object_dets, &params)?;
    Ok(ImageTriplets {
        image_id: detections.image_id.clone(),
        triplets: triplets.iter().map(TripletRecord::from_triplet).collect(),
    })
}

pub fn infer<T: Scalar>(
    model: &Model<T>,
    image: &RgbImage<T>,
    detections: &DetectionFile,
    poses: &PoseFile,
    opts: &InferOptions,
) -> Result<TripletFile> {
    Ok(TripletFile {
        images: vec![infer_image(model, image, detections, poses, opts)?],
    })
}
