//! Detection, pose and triplet files (JSON) and the PPM image reader.
//!
//! JSON files are written pretty-printed with a trailing newline; values
//! are `f32`, so parsing a canonical file and writing it back reproduces
//! it byte for byte.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{BBox, JointSet, Keypoint, NUM_JOINTS};
use crate::hoi_head::{Detection, HoiTriplet};
use crate::numerics::Tensor;
use crate::scalar::Scalar;

pub const HUMAN_CLASS: usize = 0;

fn config_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

fn check_box(b: &[f32; 4], what: &str) -> Result<()> {
    if b.iter().all(|v| v.is_finite()) && b[2] >= b[0] && b[3] >= b[1] {
        Ok(())
    } else {
        Err(config_err(format!("{what}: invalid box {b:?}")))
    }
}

fn check_unit(v: f32, what: &str) -> Result<()> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(config_err(format!("{what}: {v} outside [0, 1]")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    #[serde(rename = "box")]
    pub bbox: [f32; 4],
    pub class: usize,
    pub score: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionFile {
    pub image_id: String,
    pub width: u32,
    pub height: u32,
    pub detections: Vec<DetectionRecord>,
}

impl DetectionFile {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(config_err("image size must be positive"));
        }
        for (i, d) in self.detections.iter().enumerate() {
            check_box(&d.bbox, &format!("detection {i}"))?;
            check_unit(d.score, &format!("detection {i} score"))?;
        }
        Ok(())
    }

    /// Detections with boxes clipped to the image.
    pub fn detections<T: Scalar>(&self) -> Vec<Detection<T>> {
        let (w, h) = (T::narrow(self.width as f64), T::narrow(self.height as f64));
        self.detections
            .iter()
            .map(|d| Detection {
                bbox: BBox::from_corners(d.bbox.map(|v| T::narrow(v as f64))).clip(w, h),
                class_id: d.class,
                score: T::narrow(d.score as f64),
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseRecord {
    /// Index into the detection file's list.
    pub detection: usize,
    /// 17 × `[x, y, confidence]`.
    pub keypoints: Vec<[f32; 3]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseFile {
    pub image_id: String,
    pub poses: Vec<PoseRecord>,
}

impl PoseFile {
    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::BTreeSet::new();
        for p in &self.poses {
            if p.keypoints.len() != NUM_JOINTS {
                return Err(config_err(format!(
                    "pose for detection {} has {} keypoints, expected {NUM_JOINTS}",
                    p.detection,
                    p.keypoints.len()
                )));
            }
            if !seen.insert(p.detection) {
                return Err(config_err(format!("two poses for detection {}", p.detection)));
            }
            for k in &p.keypoints {
                if !(k[0].is_finite() && k[1].is_finite()) {
                    return Err(config_err("non-finite keypoint"));
                }
                check_unit(k[2], "keypoint confidence")?;
            }
        }
        Ok(())
    }

    pub fn joints_for<T: Scalar>(&self, detection: usize) -> Option<Result<JointSet<T>>> {
        self.poses.iter().find(|p| p.detection == detection).map(|p| {
            JointSet::new(
                p.keypoints
                    .iter()
                    .map(|k| Keypoint {
                        x: T::narrow(k[0] as f64),
                        y: T::narrow(k[1] as f64),
                        confidence: T::narrow(k[2] as f64),
                    })
                    .collect(),
            )
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TripletRecord {
    pub human: [f32; 4],
    pub object: [f32; 4],
    pub object_class: usize,
    pub verb: usize,
    /// Present in prediction files, absent in ground truth.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f32>,
}

impl TripletRecord {
    pub fn from_triplet<T: Scalar>(t: &HoiTriplet<T>) -> Self {
        let f = |v: T| v.to_f32().unwrap_or(f32::NAN);
        Self {
            human: t.human.corners().map(f),
            object: t.object.corners().map(f),
            object_class: t.object_class,
            verb: t.verb,
            score: Some(f(t.score)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageTriplets {
    pub image_id: String,
    pub triplets: Vec<TripletRecord>,
}

/// Prediction and ground-truth files share this layout.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TripletFile {
    pub images: Vec<ImageTriplets>,
}

impl TripletFile {
    pub fn validate(&self, need_scores: bool) -> Result<()> {
        for img in &self.images {
            for (i, t) in img.triplets.iter().enumerate() {
                let what = format!("image {} triplet {i}", img.image_id);
                check_box(&t.human, &what)?;
                check_box(&t.object, &what)?;
                match t.score {
                    Some(s) => check_unit(s, &what)?,
                    None if need_scores => return Err(config_err(format!("{what}: missing score"))),
                    None => {}
                }
            }
        }
        Ok(())
    }
}

pub fn to_canonical_json<S: Serialize>(value: &S) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}

pub fn from_json<S: DeserializeOwned>(text: &str) -> Result<S> {
    Ok(serde_json::from_str(text)?)
}

pub fn read_json<S: DeserializeOwned>(path: &Path) -> Result<S> {
    let text = std::fs::read_to_string(path)?;
    from_json(&text)
}

pub fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    std::fs::write(path, to_canonical_json(value)?)?;
    Ok(())
}

pub fn read_detections(path: &Path) -> Result<DetectionFile> {
    let f: DetectionFile = read_json(path)?;
    f.validate()?;
    Ok(f)
}

pub fn read_poses(path: &Path) -> Result<PoseFile> {
    let f: PoseFile = read_json(path)?;
    f.validate()?;
    Ok(f)
}

/// RGB image, `[height × width × 3]` with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage<T> {
    pub width: usize,
    pub height: usize,
    pub pixels: Tensor<T>,
}

fn ppm_token(bytes: &[u8], pos: &mut usize) -> Result<usize> {
    loop {
        match bytes.get(*pos) {
            Some(b'#') => {
                while bytes.get(*pos).is_some_and(|b| *b != b'\n') {
                    *pos += 1;
                }
            }
            Some(b) if b.is_ascii_whitespace() => *pos += 1,
            Some(_) => break,
            None => return Err(Error::Parse("truncated PPM header".into())),
        }
    }
    let start = *pos;
    while bytes.get(*pos).is_some_and(u8::is_ascii_digit) {
        *pos += 1;
    }
    std::str::from_utf8(&bytes[start..*pos])
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::Parse("bad number in PPM header".into()))
}

/// Binary PPM (`P6`) with 8-bit samples.
pub fn parse_ppm<T: Scalar>(bytes: &[u8]) -> Result<RgbImage<T>> {
    if bytes.len() < 2 || &bytes[..2] != b"P6" {
        return Err(Error::Parse("not a binary PPM (P6) image".into()));
    }
    let mut pos = 2;
    let width = ppm_token(bytes, &mut pos)?;
    let height = ppm_token(bytes, &mut pos)?;
    let maxval = ppm_token(bytes, &mut pos)?;
    if width == 0 || height == 0 || maxval == 0 || maxval > 255 {
        return Err(Error::Parse(format!("unsupported PPM {width}x{height} maxval {maxval}")));
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(Error::Parse("missing separator after PPM header".into()));
    }
    pos += 1;
    let n = width * height * 3;
    let payload = bytes
        .get(pos..pos + n)
        .ok_or_else(|| Error::Parse("truncated PPM payload".into()))?;
    let scale = maxval as f64;
    let data = payload.iter().map(|b| T::narrow(*b as f64 / scale)).collect();
    Ok(RgbImage {
        width,
        height,
        pixels: Tensor::new(vec![height, width, 3], data)?,
    })
}

pub fn encode_ppm(width: usize, height: usize, rgb: &[u8]) -> Vec<u8> {
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(rgb);
    out
}

pub fn read_ppm<T: Scalar>(path: &Path) -> Result<RgbImage<T>> {
    parse_ppm(&std::fs::read(path)?)
}

/// Bilinear resize with half-pixel centres to `side × side`.
pub fn resize_square<T: Scalar>(img: &RgbImage<T>, side: usize) -> Tensor<T> {
    let (w, h) = (img.width, img.height);
    let src = img.pixels.data();
    let mut out = Vec::with_capacity(side * side * 3);
    let axis = |i: usize, from: usize| {
        let u = ((i as f64 + 0.5) * from as f64 / side as f64 - 0.5).clamp(0.0, (from - 1) as f64);
        let lo = u.floor() as usize;
        (lo, (lo + 1).min(from - 1), u - lo as f64)
    };
    for r in 0..side {
        let (y0, y1, fy) = axis(r, h);
        for c in 0..side {
            let (x0, x1, fx) = axis(c, w);
            for ch in 0..3 {
                let v = |y: usize, x: usize| src[(y * w + x) * 3 + ch].widen();
                let top = v(y0, x0) * (1.0 - fx) + v(y0, x1) * fx;
                let bottom = v(y1, x0) * (1.0 - fx) + v(y1, x1) * fx;
                out.push(T::narrow(top * (1.0 - fy) + bottom * fy));
            }
        }
    }
    Tensor::new(vec![side, side, 3], out).expect("sized above")
}
