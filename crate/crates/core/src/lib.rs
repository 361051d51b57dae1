//! ViPLO human-object interaction detection: a ViT backbone with
//! overlap-area region masks, pose-conditioned joint features, a
//! bipartite human-object graph and the scoring head, plus file formats,
//! evaluation and benchmarking.
//!
//! Everything numeric is generic over [`Scalar`]; the aliases below fix
//! the model to `f32` and exact geometry to `f64`.

pub mod backbone;
pub mod bench;
pub mod demo;
pub mod error;
pub mod evaluation;
pub mod formats;
pub mod geometry;
pub mod hoi_head;
pub mod local_features;
pub mod model;
pub mod numerics;
pub mod pipeline;
pub mod pose_graph;
pub mod scalar;
pub mod selftest;
pub mod weights;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor32 = numerics::Tensor<f32>;
pub type Tensor64 = numerics::Tensor<f64>;
pub type BBox32 = geometry::BBox<f32>;
pub type BBox64 = geometry::BBox<f64>;
pub type RegionMask32 = geometry::RegionMask<f32>;
pub type RegionMask64 = geometry::RegionMask<f64>;
pub type JointSet32 = geometry::JointSet<f32>;
pub type Detection32 = hoi_head::Detection<f32>;
pub type HoiTriplet32 = hoi_head::HoiTriplet<f32>;
pub type GraphState32 = pose_graph::GraphState<f32>;
pub type Model32 = model::Model<f32>;
pub type Model64 = model::Model<f64>;
