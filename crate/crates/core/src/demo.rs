//! Small deterministic fixture: one person, one object, seeded weights.

use crate::backbone::INIT_STD;
use crate::error::Result;
use crate::formats::{encode_ppm, DetectionFile, DetectionRecord, PoseFile, PoseRecord};
use crate::model::{Model, ModelConfig};
use crate::scalar::Scalar;

pub const SEED: u64 = 2023;
pub const WIDTH: usize = 80;
pub const HEIGHT: usize = 60;

pub fn image_ppm() -> Vec<u8> {
    let mut rgb = Vec::with_capacity(WIDTH * HEIGHT * 3);
    for y in 0..HEIGHT {
        for x in 0..WIDTH {
            rgb.push(((x * 3 + y) % 256) as u8);
            rgb.push(((y * 4) % 256) as u8);
            rgb.push((((x ^ y) * 5) % 256) as u8);
        }
    }
    encode_ppm(WIDTH, HEIGHT, &rgb)
}

pub fn detections() -> DetectionFile {
    DetectionFile {
        image_id: "demo".into(),
        width: WIDTH as u32,
        height: HEIGHT as u32,
        detections: vec![
            DetectionRecord { bbox: [8.0, 4.5, 34.0, 58.0], class: 0, score: 0.92 },
            DetectionRecord { bbox: [30.5, 28.0, 61.0, 47.25], class: 41, score: 0.81 },
        ],
    }
}

pub fn poses() -> PoseFile {
    // rough upright skeleton inside the person box
    let pts: [(f32, f32); 17] = [
        (21.0, 9.0), (22.5, 8.0), (19.5, 8.0), (24.0, 9.0), (18.0, 9.0),
        (26.0, 16.0), (16.0, 16.0), (29.0, 24.0), (13.0, 24.0), (32.0, 30.0),
        (11.0, 31.0), (24.5, 33.0), (17.5, 33.0), (25.0, 44.0), (17.0, 44.0),
        (25.5, 55.0), (16.5, 55.0),
    ];
    PoseFile {
        image_id: "demo".into(),
        poses: vec![PoseRecord {
            detection: 0,
            keypoints: pts
                .iter()
                .enumerate()
                .map(|(k, &(x, y))| [x, y, 0.5 + (k % 5) as f32 * 0.1])
                .collect(),
        }],
    }
}

/// Weight std used by the demo model. Larger than the training init so
/// that verb scores differ visibly between verbs and pairs.
pub const WEIGHT_STD: f64 = 0.2;

pub fn model<T: Scalar>() -> Result<Model<T>> {
    let mut m = Model::random(ModelConfig::tiny(), SEED)?;
    let factor = T::narrow(WEIGHT_STD / INIT_STD);
    for (name, t) in m.named_params_mut() {
        if name.ends_with(".weight") || name.ends_with("cls_token") || name.ends_with("pos_embed") {
            t.data_mut().iter_mut().for_each(|v| *v = *v * factor);
        }
    }
    Ok(m)
}
