//! Bipartite human–object graph conditioned on human pose.
//!
//! Every (human, object) pair carries an edge encoding built from box
//! geometry, a 17-way joint attention derived from the pose, and the
//! attention-weighted human local feature. Message passing then updates
//! humans from objects *and* their own local features (the self-loop),
//! and objects from humans.

use rand::Rng;
use rayon::prelude::*;

use crate::error::{dim_err, Result};
use crate::geometry::{iou, BBox, JointSet, NUM_JOINTS};
use crate::local_features::LocalFeatureSet;
use crate::numerics::{gelu_f64, layer_norm_row, softmax_in_place, Linear, MlpSpec, Tensor};
use crate::scalar::Scalar;

pub const SPATIAL_DIM: usize = 18;
pub const JOINT_FEATURE_DIM: usize = 6;
const NORM_EPS: f64 = 1e-5;
const SPATIAL_CLIP: f64 = 2.0;
const TINY: f64 = 1e-8;

/// Hand-crafted geometry of a human/object box pair, in image-normalized
/// units and clipped to `[-2, 2]`.
///
/// Layout: human centre (2), human size (2), object centre (2), object
/// size (2), centre offset object − human (2), centre distance, IoU,
/// human area, object area, area ratio object/human, union-box size (2),
/// log aspect-ratio difference object − human.
pub fn spatial_pair_features<T: Scalar>(
    human: &BBox<T>,
    object: &BBox<T>,
    image_width: T,
    image_height: T,
) -> Vec<T> {
    let (w, h) = (image_width.widen().max(TINY), image_height.widen().max(TINY));
    let b = |v: &BBox<T>| {
        let (cx, cy) = v.center();
        (cx.widen(), cy.widen(), v.width().widen(), v.height().widen())
    };
    let (hx, hy, hw, hh) = b(human);
    let (ox, oy, ow, oh) = b(object);
    let (dx, dy) = ((ox - hx) / w, (oy - hy) / h);
    let h_area = hw * hh / (w * h);
    let o_area = ow * oh / (w * h);
    let union = human.union_box(object);
    let aspect = |bw: f64, bh: f64| (bw.max(TINY) / bh.max(TINY)).ln();
    let raw = [
        hx / w,
        hy / h,
        hw / w,
        hh / h,
        ox / w,
        oy / h,
        ow / w,
        oh / h,
        dx,
        dy,
        (dx * dx + dy * dy).sqrt(),
        iou(human, object).widen(),
        h_area,
        o_area,
        o_area / h_area.max(TINY),
        union.width().widen() / w,
        union.height().widen() / h,
        aspect(ow, oh) - aspect(hw, hh),
    ];
    raw.iter()
        .map(|v| T::narrow(v.clamp(-SPATIAL_CLIP, SPATIAL_CLIP)))
        .collect()
}

/// Raw per-joint features for one pair: joint position normalized by the
/// image size (2), unit direction from the joint to the object centre (2),
/// that distance over the image diagonal, and the joint confidence.
pub fn joint_pair_features<T: Scalar>(
    joints: &JointSet<T>,
    object: &BBox<T>,
    image_width: T,
    image_height: T,
) -> Vec<[T; JOINT_FEATURE_DIM]> {
    let (w, h) = (image_width.widen().max(TINY), image_height.widen().max(TINY));
    let diag = (w * w + h * h).sqrt();
    let (ox, oy) = object.center();
    let (ox, oy) = (ox.widen(), oy.widen());
    joints
        .keypoints()
        .iter()
        .map(|k| {
            let (jx, jy) = (k.x.widen(), k.y.widen());
            let (vx, vy) = (ox - jx, oy - jy);
            let dist = (vx * vx + vy * vy).sqrt();
            let (ux, uy) = if dist > 0.0 {
                (vx / dist, vy / dist)
            } else {
                (0.0, 0.0)
            };
            [
                jx / w,
                jy / h,
                ux,
                uy,
                dist / diag,
                k.confidence.widen(),
            ]
            .map(T::narrow)
        })
        .collect()
}

/// Joint attention of one pair: `softmax((Q̂ · K̂_k) · s)` over the 17
/// joints, with `Q̂` embedding the pair geometry, `K̂_k` embedding joint
/// `k`'s raw features and `s` the pose score.
pub fn joint_attention<T: Scalar>(
    spatial: &[T],
    joints: &JointSet<T>,
    object: &BBox<T>,
    image_width: T,
    image_height: T,
    query_mlp: &MlpSpec<T>,
    key_mlp: &MlpSpec<T>,
) -> Result<Vec<T>> {
    let q = query_mlp.forward_row(spatial)?;
    let s = joints.pose_score().widen();
    let mut logits = joint_pair_features(joints, object, image_width, image_height)
        .iter()
        .map(|raw| {
            let k = key_mlp.forward_row(raw)?;
            if k.len() != q.len() {
                return dim_err(format!("query width {} vs key width {}", q.len(), k.len()));
            }
            let dot: f64 = q.iter().zip(&k).map(|(a, b)| a.widen() * b.widen()).sum();
            Ok(dot * s)
        })
        .collect::<Result<Vec<f64>>>()?;
    softmax_in_place(&mut logits)?;
    Ok(logits.into_iter().map(T::narrow).collect())
}

/// Attention-weighted sum of the 17 local vectors. Weights are
/// renormalized to sum to one, so the result is a convex combination.
pub fn human_local_feature<T: Scalar>(alpha: &[T], locals: &LocalFeatureSet<T>) -> Result<Vec<T>> {
    if alpha.len() != NUM_JOINTS {
        return dim_err(format!("{} attention weights for {NUM_JOINTS} joints", alpha.len()));
    }
    let total: f64 = alpha.iter().map(|a| a.widen()).sum();
    let mut acc = vec![0.0; locals.dim()];
    for (a, f) in alpha.iter().zip(locals.features()) {
        let w = a.widen() / total;
        if w == 0.0 {
            continue;
        }
        for (s, v) in acc.iter_mut().zip(f) {
            *s += w * v.widen();
        }
    }
    Ok(acc.into_iter().map(T::narrow).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct MbfBranch<T> {
    pub appearance: Linear<T>,
    pub edge: Linear<T>,
}

/// Multi-branch fusion: each branch projects the appearance and edge
/// vectors to a shared width, multiplies them and applies GELU; branch
/// outputs are concatenated and projected.
#[derive(Debug, Clone, PartialEq)]
pub struct Mbf<T> {
    pub branches: Vec<MbfBranch<T>>,
    pub output: Linear<T>,
}

impl<T: Scalar> Mbf<T> {
    pub fn new(branches: Vec<MbfBranch<T>>, output: Linear<T>) -> Result<Self> {
        let Some(first) = branches.first() else {
            return dim_err("MBF needs at least one branch");
        };
        let sub = first.appearance.fan_out();
        let (a_in, e_in) = (first.appearance.fan_in(), first.edge.fan_in());
        if branches.iter().any(|b| {
            b.appearance.fan_out() != sub
                || b.edge.fan_out() != sub
                || b.appearance.fan_in() != a_in
                || b.edge.fan_in() != e_in
        }) || output.fan_in() != sub * branches.len()
        {
            return dim_err("MBF branch widths disagree");
        }
        Ok(Self { branches, output })
    }

    #[allow(clippy::too_many_arguments)]
    pub fn random<R: Rng + ?Sized>(
        appearance_dim: usize,
        edge_dim: usize,
        branches: usize,
        branch_dim: usize,
        out_dim: usize,
        std: f64,
        rng: &mut R,
    ) -> Self {
        Self {
            branches: (0..branches)
                .map(|_| MbfBranch {
                    appearance: Linear::random(appearance_dim, branch_dim, std, rng),
                    edge: Linear::random(edge_dim, branch_dim, std, rng),
                })
                .collect(),
            output: Linear::random(branch_dim * branches, out_dim, std, rng),
        }
    }

    pub fn appearance_dim(&self) -> usize {
        self.branches[0].appearance.fan_in()
    }

    pub fn edge_dim(&self) -> usize {
        self.branches[0].edge.fan_in()
    }

    pub fn output_dim(&self) -> usize {
        self.output.fan_out()
    }

    pub fn fuse(&self, appearance: &[T], edge: &[T]) -> Result<Vec<T>> {
        let sub = self.branches[0].appearance.fan_out();
        let mut a = vec![0.0; sub];
        let mut e = vec![0.0; sub];
        let mut hidden = Vec::with_capacity(sub * self.branches.len());
        for b in &self.branches {
            b.appearance.forward_row_f64(appearance, &mut a)?;
            b.edge.forward_row_f64(edge, &mut e)?;
            hidden.extend(a.iter().zip(&e).map(|(x, y)| T::narrow(gelu_f64(x * y))));
        }
        self.output.forward_row(&hidden)
    }
}

pub fn mbf_fuse<T: Scalar>(appearance: &[T], edge: &[T], mbf: &Mbf<T>) -> Result<Vec<T>> {
    mbf.fuse(appearance, edge)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct GraphConfig {
    pub node_dim: usize,
    pub edge_dim: usize,
    /// Width of the joint-attention query and key embeddings.
    pub attn_dim: usize,
    pub mbf_branches: usize,
    pub steps: usize,
}

impl GraphConfig {
    pub fn branch_dim(&self) -> usize {
        (self.node_dim / self.mbf_branches).max(1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormParams<T> {
    pub gain: Tensor<T>,
    pub shift: Tensor<T>,
}

impl<T: Scalar> LayerNormParams<T> {
    pub fn identity(dim: usize) -> Self {
        Self {
            gain: Tensor::filled(vec![dim], T::one()),
            shift: Tensor::zeros(vec![dim]),
        }
    }

    fn apply(&self, x: &[T]) -> Vec<T> {
        layer_norm_row(x, self.gain.data(), self.shift.data(), NORM_EPS)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GraphParams<T> {
    /// Region feature → node encoding (two layers).
    pub node_encoder: MlpSpec<T>,
    /// Spatial pair feature → edge encoding (three layers).
    pub edge_encoder: MlpSpec<T>,
    pub query_mlp: MlpSpec<T>,
    pub key_mlp: MlpSpec<T>,
    /// Pooled patch vector → node width (one layer).
    pub local_projector: MlpSpec<T>,
    /// Object → human message; appearance is `local ⊕ object`.
    pub object_to_human: Mbf<T>,
    /// Human → object message.
    pub human_to_object: Mbf<T>,
    pub human_norm: LayerNormParams<T>,
    pub object_norm: LayerNormParams<T>,
    pub steps: usize,
}

impl<T: Scalar> GraphParams<T> {
    pub fn random<R: Rng + ?Sized>(
        feature_dim: usize,
        cfg: &GraphConfig,
        std: f64,
        rng: &mut R,
    ) -> Self {
        let (n, e, a) = (cfg.node_dim, cfg.edge_dim, cfg.attn_dim);
        Self {
            node_encoder: MlpSpec::random(&[feature_dim, n, n], std, rng),
            edge_encoder: MlpSpec::random(&[SPATIAL_DIM, e, e, e], std, rng),
            query_mlp: MlpSpec::random(&[SPATIAL_DIM, a, a], std, rng),
            key_mlp: MlpSpec::random(&[JOINT_FEATURE_DIM, a, a], std, rng),
            local_projector: MlpSpec::random(&[feature_dim, n], std, rng),
            object_to_human: Mbf::random(2 * n, e, cfg.mbf_branches, cfg.branch_dim(), n, std, rng),
            human_to_object: Mbf::random(n, e, cfg.mbf_branches, cfg.branch_dim(), n, std, rng),
            human_norm: LayerNormParams::identity(n),
            object_norm: LayerNormParams::identity(n),
            steps: cfg.steps,
        }
    }
}

pub fn init_node_encodings<T: Scalar>(
    region_features: &[Vec<T>],
    encoder: &MlpSpec<T>,
) -> Result<Vec<Vec<T>>> {
    region_features
        .iter()
        .map(|f| encoder.forward_row(f))
        .collect()
}

pub fn init_edge_encoding<T: Scalar>(spatial: &[T], encoder: &MlpSpec<T>) -> Result<Vec<T>> {
    if spatial.len() != SPATIAL_DIM {
        return dim_err(format!("spatial feature width {}", spatial.len()));
    }
    encoder.forward_row(spatial)
}

#[derive(Debug, Clone, PartialEq)]
pub struct HumanInput<T> {
    pub region_feature: Vec<T>,
    pub bbox: BBox<T>,
    pub joints: JointSet<T>,
    pub locals: LocalFeatureSet<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectInput<T> {
    pub region_feature: Vec<T>,
    pub bbox: BBox<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GraphInputs<T> {
    pub humans: Vec<HumanInput<T>>,
    pub objects: Vec<ObjectInput<T>>,
    /// `(human index, object index)` candidate edges.
    pub pairs: Vec<(usize, usize)>,
    pub image_width: T,
    pub image_height: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairState<T> {
    pub human: usize,
    pub object: usize,
    pub spatial: Vec<T>,
    pub edge: Vec<T>,
    pub alpha: Vec<T>,
    pub local: Vec<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GraphState<T> {
    pub humans: Vec<Vec<T>>,
    pub objects: Vec<Vec<T>>,
    pub pairs: Vec<PairState<T>>,
    pub step: usize,
}

impl<T: Scalar> GraphState<T> {
    pub fn empty() -> Self {
        Self {
            humans: Vec::new(),
            objects: Vec::new(),
            pairs: Vec::new(),
            step: 0,
        }
    }
}

/// Mean of `messages[k]` over the pairs incident to each node, added to
/// the node and layer-normalized. Nodes without pairs are left alone.
fn aggregate<T: Scalar>(
    nodes: &[Vec<T>],
    incident: impl Fn(usize) -> usize,
    messages: &[Vec<T>],
    norm: &LayerNormParams<T>,
) -> Vec<Vec<T>> {
    let dim = nodes.first().map_or(0, Vec::len);
    let mut sums = vec![vec![0.0f64; dim]; nodes.len()];
    let mut counts = vec![0usize; nodes.len()];
    for (k, m) in messages.iter().enumerate() {
        let node = incident(k);
        counts[node] += 1;
        for (s, v) in sums[node].iter_mut().zip(m) {
            *s += v.widen();
        }
    }
    nodes
        .iter()
        .zip(sums.iter().zip(&counts))
        .map(|(x, (s, &n))| {
            if n == 0 {
                return x.clone();
            }
            let updated: Vec<T> = x
                .iter()
                .zip(s)
                .map(|(a, b)| T::narrow(a.widen() + b / n as f64))
                .collect();
            norm.apply(&updated)
        })
        .collect()
}

pub fn message_passing_step<T: Scalar>(
    state: &GraphState<T>,
    params: &GraphParams<T>,
) -> Result<GraphState<T>> {
    let messages: Vec<(Vec<T>, Vec<T>)> = state
        .pairs
        .par_iter()
        .map(|p| {
            let mut appearance = p.local.clone();
            appearance.extend_from_slice(&state.objects[p.object]);
            let to_human = params.object_to_human.fuse(&appearance, &p.edge)?;
            let to_object = params.human_to_object.fuse(&state.humans[p.human], &p.edge)?;
            Ok((to_human, to_object))
        })
        .collect::<Result<_>>()?;
    let (to_humans, to_objects): (Vec<_>, Vec<_>) = messages.into_iter().unzip();
    Ok(GraphState {
        humans: aggregate(&state.humans, |k| state.pairs[k].human, &to_humans, &params.human_norm),
        objects: aggregate(
            &state.objects,
            |k| state.pairs[k].object,
            &to_objects,
            &params.object_norm,
        ),
        pairs: state.pairs.clone(),
        step: state.step + 1,
    })
}

/// Builds node and edge encodings, joint attention and human local
/// features once, then runs `params.steps` rounds of message passing.
pub fn run_graph<T: Scalar>(inputs: &GraphInputs<T>, params: &GraphParams<T>) -> Result<GraphState<T>> {
    if inputs.humans.is_empty() || inputs.objects.is_empty() {
        return Ok(GraphState::empty());
    }
    for &(h, o) in &inputs.pairs {
        if h >= inputs.humans.len() || o >= inputs.objects.len() {
            return dim_err(format!("pair ({h}, {o}) out of range"));
        }
    }
    let human_feats: Vec<Vec<T>> = inputs.humans.iter().map(|h| h.region_feature.clone()).collect();
    let object_feats: Vec<Vec<T>> = inputs.objects.iter().map(|o| o.region_feature.clone()).collect();
    let (iw, ih) = (inputs.image_width, inputs.image_height);
    let pairs = inputs
        .pairs
        .par_iter()
        .map(|&(hi, oi)| {
            let human = &inputs.humans[hi];
            let object = &inputs.objects[oi];
            let spatial = spatial_pair_features(&human.bbox, &object.bbox, iw, ih);
            let edge = init_edge_encoding(&spatial, &params.edge_encoder)?;
            let alpha = joint_attention(
                &spatial,
                &human.joints,
                &object.bbox,
                iw,
                ih,
                &params.query_mlp,
                &params.key_mlp,
            )?;
            let local = human_local_feature(&alpha, &human.locals)?;
            Ok(PairState {
                human: hi,
                object: oi,
                spatial,
                edge,
                alpha,
                local,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut state = GraphState {
        humans: init_node_encodings(&human_feats, &params.node_encoder)?,
        objects: init_node_encodings(&object_feats, &params.node_encoder)?,
        pairs,
        step: 0,
    };
    for _ in 0..params.steps {
        state = message_passing_step(&state, params)?;
    }
    Ok(state)
}
