//! Minimal pre-norm ViT encoder whose final layer extracts one CLS
//! feature per region through overlap-area attention masking.
//!
//! Only the final layer is region-aware. Its query/key/value projections
//! are computed once; each region then re-runs just the CLS attention row
//! with `ln S` added to the logits, which costs `O(L·C + C²)` per region
//! instead of a full `O(L²·C)` layer.

use rand::Rng;
use rayon::prelude::*;

use crate::error::{dim_err, Error, Result};
use crate::geometry::{PatchGrid, RegionMask};
use crate::numerics::{
    bilinear_accumulate, gelu, layer_norm, layer_norm_row, softmax_in_place, Linear, Tensor,
};
use crate::scalar::Scalar;

pub const LAYER_NORM_EPS: f64 = 1e-5;
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ViTConfig {
    pub patch_size: usize,
    pub image_size: usize,
    pub embed_dim: usize,
    pub num_heads: usize,
    pub num_layers: usize,
    pub mlp_ratio: usize,
}

impl ViTConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !matches!(self.patch_size, 16 | 32) {
            return fail(format!("patch size {} (expected 16 or 32)", self.patch_size));
        }
        if self.image_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return fail(format!(
                "image size {} not divisible by patch size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.num_heads == 0 || self.embed_dim == 0 || !self.embed_dim.is_multiple_of(self.num_heads) {
            return fail(format!(
                "embed dim {} not divisible by {} heads",
                self.embed_dim, self.num_heads
            ));
        }
        if self.num_layers == 0 || self.mlp_ratio == 0 {
            return fail("need at least one layer and a positive MLP ratio".into());
        }
        Ok(())
    }

    pub fn grid_side(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn grid(&self) -> PatchGrid {
        PatchGrid {
            patch_size: self.patch_size,
            width: self.grid_side(),
            height: self.grid_side(),
        }
    }

    pub fn num_patches(&self) -> usize {
        self.grid_side() * self.grid_side()
    }

    /// Patches plus the CLS token.
    pub fn seq_len(&self) -> usize {
        self.num_patches() + 1
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    pub fn mlp_hidden(&self) -> usize {
        self.embed_dim * self.mlp_ratio
    }

    pub fn patch_input_dim(&self) -> usize {
        self.patch_size * self.patch_size * 3
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderLayer<T> {
    pub ln1_gain: Tensor<T>,
    pub ln1_shift: Tensor<T>,
    /// `[C × 3C]`, output columns ordered query | key | value.
    pub qkv: Linear<T>,
    pub proj: Linear<T>,
    pub ln2_gain: Tensor<T>,
    pub ln2_shift: Tensor<T>,
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
}

impl<T: Scalar> EncoderLayer<T> {
    pub fn random<R: Rng + ?Sized>(dim: usize, hidden: usize, rng: &mut R) -> Self {
        Self {
            ln1_gain: Tensor::filled(vec![dim], T::one()),
            ln1_shift: Tensor::zeros(vec![dim]),
            qkv: Linear::random(dim, 3 * dim, INIT_STD, rng),
            proj: Linear::random(dim, dim, INIT_STD, rng),
            ln2_gain: Tensor::filled(vec![dim], T::one()),
            ln2_shift: Tensor::zeros(vec![dim]),
            fc1: Linear::random(dim, hidden, INIT_STD, rng),
            fc2: Linear::random(hidden, dim, INIT_STD, rng),
        }
    }

    pub fn dim(&self) -> usize {
        self.ln1_gain.len()
    }

    fn check(&self, dim: usize, hidden: usize) -> Result<()> {
        let ok = self.ln1_gain.shape() == [dim]
            && self.ln1_shift.shape() == [dim]
            && self.ln2_gain.shape() == [dim]
            && self.ln2_shift.shape() == [dim]
            && (self.qkv.fan_in(), self.qkv.fan_out()) == (dim, 3 * dim)
            && (self.proj.fan_in(), self.proj.fan_out()) == (dim, dim)
            && (self.fc1.fan_in(), self.fc1.fan_out()) == (dim, hidden)
            && (self.fc2.fan_in(), self.fc2.fan_out()) == (hidden, dim);
        if ok {
            Ok(())
        } else {
            dim_err(format!("encoder layer shapes do not match width {dim}/{hidden}"))
        }
    }

    fn pre_attention(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let h = layer_norm(x, &self.ln1_gain, &self.ln1_shift, LAYER_NORM_EPS)?;
        self.qkv.forward(&h)
    }

    /// Output projection, residual, then the MLP sublayer, for one token.
    fn finish_row(&self, x: &[T], attn: &[T]) -> Result<Vec<T>> {
        let projected = self.proj.forward_row(attn)?;
        let mid: Vec<T> = x
            .iter()
            .zip(&projected)
            .map(|(a, b)| T::narrow(a.widen() + b.widen()))
            .collect();
        let h = layer_norm_row(
            &mid,
            self.ln2_gain.data(),
            self.ln2_shift.data(),
            LAYER_NORM_EPS,
        );
        let mut hidden = self.fc1.forward_row(&h)?;
        hidden.iter_mut().for_each(|v| *v = gelu(*v));
        let out = self.fc2.forward_row(&hidden)?;
        Ok(mid
            .iter()
            .zip(&out)
            .map(|(a, b)| T::narrow(a.widen() + b.widen()))
            .collect())
    }
}

/// Multi-head attention output for query token `row`, all heads
/// concatenated. `bias_row` is added to every head's scaled logits.
fn attend_row<T: Scalar>(
    qkv: &Tensor<T>,
    row: usize,
    num_heads: usize,
    bias_row: Option<&[T]>,
) -> Result<Vec<T>> {
    let n = qkv.rows();
    let dim = qkv.cols() / 3;
    let dh = dim / num_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    if let Some(b) = bias_row {
        if b.len() != n {
            return dim_err(format!("attention bias row {} vs sequence {n}", b.len()));
        }
    }
    let q_all = qkv.row(row);
    let mut scores = vec![0.0f64; n];
    let mut out = vec![0.0f64; dim];
    for h in 0..num_heads {
        let q = &q_all[h * dh..(h + 1) * dh];
        for (j, s) in scores.iter_mut().enumerate() {
            let k = &qkv.row(j)[dim + h * dh..dim + (h + 1) * dh];
            let dot: f64 = q.iter().zip(k).map(|(a, b)| a.widen() * b.widen()).sum();
            *s = dot * scale + bias_row.map_or(0.0, |b| b[j].widen());
        }
        softmax_in_place(&mut scores).map_err(|_| Error::DegenerateRow { row })?;
        let acc = &mut out[h * dh..(h + 1) * dh];
        for (j, &w) in scores.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            let v = &qkv.row(j)[2 * dim + h * dh..2 * dim + (h + 1) * dh];
            for (a, b) in acc.iter_mut().zip(v) {
                *a += w * b.widen();
            }
        }
    }
    Ok(out.into_iter().map(T::narrow).collect())
}

/// One pre-norm transformer block: `x + MHSA(LN(x), bias)` followed by
/// `+ MLP(LN(·))`. `bias`, when given, is `[(L+1) × (L+1)]` and shared by
/// all heads.
pub fn encoder_layer<T: Scalar>(
    x: &Tensor<T>,
    layer: &EncoderLayer<T>,
    num_heads: usize,
    bias: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    let n = x.rows();
    if x.shape().len() != 2 || x.cols() != layer.dim() {
        return dim_err(format!(
            "encoder input {:?} vs layer width {}",
            x.shape(),
            layer.dim()
        ));
    }
    if num_heads == 0 || !layer.dim().is_multiple_of(num_heads) {
        return Err(Error::Config(format!(
            "{num_heads} heads for width {}",
            layer.dim()
        )));
    }
    if let Some(b) = bias {
        if b.shape() != [n, n] {
            return dim_err(format!("attention bias {:?} for sequence {n}", b.shape()));
        }
    }
    let qkv = layer.pre_attention(x)?;
    let rows: Vec<Vec<T>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let attn = attend_row(&qkv, i, num_heads, bias.map(|b| b.row(i)))?;
            layer.finish_row(x.row(i), &attn)
        })
        .collect::<Result<_>>()?;
    Tensor::from_rows(&rows)
}

/// Final-layer state shared by every region: the input tokens and their
/// query/key/value projections.
pub struct SharedFinalLayer<'a, T> {
    input: &'a Tensor<T>,
    layer: &'a EncoderLayer<T>,
    num_heads: usize,
    qkv: Tensor<T>,
}

impl<'a, T: Scalar> SharedFinalLayer<'a, T> {
    pub fn new(input: &'a Tensor<T>, layer: &'a EncoderLayer<T>, num_heads: usize) -> Result<Self> {
        if input.shape().len() != 2 || input.cols() != layer.dim() || input.rows() < 2 {
            return dim_err(format!(
                "final layer input {:?} vs width {}",
                input.shape(),
                layer.dim()
            ));
        }
        if num_heads == 0 || !layer.dim().is_multiple_of(num_heads) {
            return Err(Error::Config(format!(
                "{num_heads} heads for width {}",
                layer.dim()
            )));
        }
        Ok(Self {
            input,
            layer,
            num_heads,
            qkv: layer.pre_attention(input)?,
        })
    }

    /// Ordinary (unmasked) final-layer outputs for every token.
    pub fn unmasked_tokens(&self) -> Result<Tensor<T>> {
        let rows: Vec<Vec<T>> = (0..self.input.rows())
            .into_par_iter()
            .map(|i| {
                let attn = attend_row(&self.qkv, i, self.num_heads, None)?;
                self.layer.finish_row(self.input.row(i), &attn)
            })
            .collect::<Result<_>>()?;
        Tensor::from_rows(&rows)
    }

    /// CLS output of the final layer with the region's `ln S` added to the
    /// CLS attention logits.
    pub fn region_feature(&self, mask: &RegionMask<T>) -> Result<Vec<T>> {
        if mask.len() != self.input.rows() {
            return dim_err(format!(
                "region mask length {} vs sequence {}",
                mask.len(),
                self.input.rows()
            ));
        }
        if mask.is_degenerate() {
            return Err(Error::DegenerateMask);
        }
        let bias = mask.log_bias();
        let attn = attend_row(&self.qkv, 0, self.num_heads, Some(&bias))?;
        self.layer.finish_row(self.input.row(0), &attn)
    }

    pub fn region_features(&self, masks: &[RegionMask<T>]) -> Vec<Result<Vec<T>>> {
        masks
            .par_iter()
            .map(|m| self.region_feature(m))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackboneOutput<T> {
    /// One feature per input region; degenerate masks yield an error in
    /// their own slot only.
    pub cls_per_region: Vec<Result<Vec<T>>>,
    /// Final-layer patch tokens, `[H × W × C]`.
    pub patch_map: Tensor<T>,
    pub penultimate_cls: Vec<T>,
}

/// Region-conditioned final layer.
pub fn moa_final_layer<T: Scalar>(
    penultimate: &Tensor<T>,
    masks: &[RegionMask<T>],
    layer: &EncoderLayer<T>,
    num_heads: usize,
    grid: &PatchGrid,
) -> Result<BackboneOutput<T>> {
    if masks.is_empty() {
        return dim_err("at least one region is required");
    }
    let shared = SharedFinalLayer::new(penultimate, layer, num_heads)?;
    let tokens = shared.unmasked_tokens()?;
    Ok(BackboneOutput {
        cls_per_region: shared.region_features(masks),
        patch_map: unflatten(&tokens, grid)?,
        penultimate_cls: penultimate.row(0).to_vec(),
    })
}

/// Reference route: a complete final layer per region with the full
/// `(L+1)×(L+1)` bias whose first row is `ln S` and other rows zero.
pub fn naive_region_feature<T: Scalar>(
    penultimate: &Tensor<T>,
    mask: &RegionMask<T>,
    layer: &EncoderLayer<T>,
    num_heads: usize,
) -> Result<Vec<T>> {
    let n = penultimate.rows();
    if mask.len() != n {
        return dim_err(format!("region mask length {} vs sequence {n}", mask.len()));
    }
    if mask.is_degenerate() {
        return Err(Error::DegenerateMask);
    }
    let mut bias = Tensor::zeros(vec![n, n]);
    bias.row_mut(0).copy_from_slice(&mask.log_bias());
    let out = encoder_layer(penultimate, layer, num_heads, Some(&bias))?;
    Ok(out.row(0).to_vec())
}

/// Drops the CLS row and lays the patch tokens out as `[H × W × C]`.
pub fn unflatten<T: Scalar>(tokens: &Tensor<T>, grid: &PatchGrid) -> Result<Tensor<T>> {
    let l = grid.num_patches();
    if tokens.shape().len() != 2 || tokens.rows() != l + 1 {
        return dim_err(format!(
            "{:?} tokens for a {}x{} grid",
            tokens.shape(),
            grid.height,
            grid.width
        ));
    }
    let c = tokens.cols();
    Tensor::new(vec![grid.height, grid.width, c], tokens.data()[c..].to_vec())
}

/// Inverse of [`unflatten`] without the CLS row: `[H·W × C]`.
pub fn flatten<T: Scalar>(map: &Tensor<T>) -> Result<Tensor<T>> {
    match *map.shape() {
        [h, w, c] => map.clone().reshape(vec![h * w, c]),
        _ => dim_err("flatten expects an HxWxC map"),
    }
}

/// Resizes a square grid of position embeddings (CLS row kept as is).
/// Bilinear with corners aligned.
pub fn interpolate_pos_embed<T: Scalar>(
    pos: &Tensor<T>,
    from_side: usize,
    to_side: usize,
) -> Result<Tensor<T>> {
    if pos.shape().len() != 2 || pos.rows() != from_side * from_side + 1 || to_side == 0 {
        return dim_err(format!(
            "position embedding {:?} is not a {from_side}x{from_side} grid plus CLS",
            pos.shape()
        ));
    }
    if from_side == to_side {
        return Ok(pos.clone());
    }
    let c = pos.cols();
    let grid = Tensor::new(vec![from_side, from_side, c], pos.data()[c..].to_vec())?;
    let step = |i: usize| {
        if to_side == 1 {
            (from_side as f64 - 1.0) / 2.0
        } else {
            i as f64 * (from_side as f64 - 1.0) / (to_side as f64 - 1.0)
        }
    };
    let mut data = pos.row(0).to_vec();
    let mut acc = vec![0.0; c];
    for r in 0..to_side {
        for col in 0..to_side {
            acc.iter_mut().for_each(|v| *v = 0.0);
            bilinear_accumulate(&grid, step(col), step(r), 1.0, &mut acc)?;
            data.extend(acc.iter().map(|&v| T::narrow(v)));
        }
    }
    Tensor::new(vec![to_side * to_side + 1, c], data)
}

#[derive(Debug, Clone, PartialEq)]
pub struct VitParams<T> {
    /// `[p²·3 × C]`, patch pixels flattened row, column, channel.
    pub patch_proj: Linear<T>,
    pub cls_token: Tensor<T>,
    pub pos_embed: Tensor<T>,
    pub layers: Vec<EncoderLayer<T>>,
}

impl<T: Scalar> VitParams<T> {
    pub fn random<R: Rng + ?Sized>(cfg: &ViTConfig, rng: &mut R) -> Self {
        let c = cfg.embed_dim;
        Self {
            patch_proj: Linear::random(cfg.patch_input_dim(), c, INIT_STD, rng),
            cls_token: Tensor::random_normal(vec![c], INIT_STD, rng),
            pos_embed: Tensor::random_normal(vec![cfg.seq_len(), c], INIT_STD, rng),
            layers: (0..cfg.num_layers)
                .map(|_| EncoderLayer::random(c, cfg.mlp_hidden(), rng))
                .collect(),
        }
    }

    pub fn check(&self, cfg: &ViTConfig) -> Result<()> {
        let c = cfg.embed_dim;
        if (self.patch_proj.fan_in(), self.patch_proj.fan_out()) != (cfg.patch_input_dim(), c)
            || self.cls_token.shape() != [c]
            || self.pos_embed.shape() != [cfg.seq_len(), c]
            || self.layers.len() != cfg.num_layers
        {
            return dim_err("ViT parameters do not match the configuration");
        }
        self.layers
            .iter()
            .try_for_each(|l| l.check(c, cfg.mlp_hidden()))
    }
}

/// Patch projection, CLS prepend and position embeddings.
pub fn patch_embed<T: Scalar>(
    image: &Tensor<T>,
    cfg: &ViTConfig,
    params: &VitParams<T>,
) -> Result<Tensor<T>> {
    let s = cfg.image_size;
    if image.shape() != [s, s, 3] {
        return dim_err(format!(
            "image {:?}, expected [{s}, {s}, 3]",
            image.shape()
        ));
    }
    let p = cfg.patch_size;
    let side = cfg.grid_side();
    let c = cfg.embed_dim;
    let pos = &params.pos_embed;
    let mut rows = Vec::with_capacity(cfg.seq_len());
    rows.push(
        params
            .cls_token
            .data()
            .iter()
            .zip(pos.row(0))
            .map(|(a, b)| T::narrow(a.widen() + b.widen()))
            .collect::<Vec<T>>(),
    );
    let mut pixels = Vec::with_capacity(cfg.patch_input_dim());
    let mut acc = vec![0.0; c];
    for r in 0..side {
        for col in 0..side {
            pixels.clear();
            for py in 0..p {
                let start = ((r * p + py) * s + col * p) * 3;
                pixels.extend_from_slice(&image.data()[start..start + p * 3]);
            }
            params.patch_proj.forward_row_f64(&pixels, &mut acc)?;
            let pr = pos.row(1 + r * side + col);
            rows.push(
                acc.iter()
                    .zip(pr)
                    .map(|(a, b)| T::narrow(a + b.widen()))
                    .collect(),
            );
        }
    }
    Tensor::from_rows(&rows)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Vit<T> {
    config: ViTConfig,
    params: VitParams<T>,
}

impl<T: Scalar> Vit<T> {
    pub fn new(config: ViTConfig, params: VitParams<T>) -> Result<Self> {
        config.validate()?;
        params.check(&config)?;
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &ViTConfig {
        &self.config
    }

    pub fn params(&self) -> &VitParams<T> {
        &self.params
    }

    pub(crate) fn params_mut(&mut self) -> &mut VitParams<T> {
        &mut self.params
    }

    /// Token sequence entering the final layer.
    pub fn penultimate(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        let mut x = patch_embed(image, &self.config, &self.params)?;
        let (_, body) = self
            .params
            .layers
            .split_last()
            .expect("validated non-empty");
        for layer in body {
            x = encoder_layer(&x, layer, self.config.num_heads, None)?;
        }
        Ok(x)
    }

    pub fn forward(&self, image: &Tensor<T>, masks: &[RegionMask<T>]) -> Result<BackboneOutput<T>> {
        let x = self.penultimate(image)?;
        let last = self.params.layers.last().expect("validated non-empty");
        moa_final_layer(&x, masks, last, self.config.num_heads, &self.config.grid())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{overlap_areas_factored, BBox};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> ViTConfig {
        ViTConfig {
            patch_size: 16,
            image_size: 64,
            embed_dim: 32,
            num_heads: 2,
            num_layers: 2,
            mlp_ratio: 4,
        }
    }

    fn random_layer(rng: &mut ChaCha8Rng, std: f64) -> EncoderLayer<f32> {
        let mut l = EncoderLayer::random(32, 128, rng);
        l.qkv = Linear::random(32, 96, std, rng);
        l.proj = Linear::random(32, 32, std, rng);
        l.fc1 = Linear::random(32, 128, std, rng);
        l.fc2 = Linear::random(128, 32, std, rng);
        l
    }

    #[test]
    fn config_sequence_lengths() {
        let mut c = ViTConfig { image_size: 672, patch_size: 32, ..tiny() };
        assert_eq!(c.seq_len(), 442);
        c.patch_size = 16;
        assert_eq!(c.seq_len(), 1765);
        c.patch_size = 8;
        assert!(c.validate().is_err());
        let odd = ViTConfig { embed_dim: 30, num_heads: 4, ..tiny() };
        assert!(odd.validate().is_err());
    }

    #[test]
    fn zero_image_and_projection_gives_position_rows() {
        let cfg = tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut params = VitParams::<f32>::random(&cfg, &mut rng);
        params.patch_proj = Linear::zeros(cfg.patch_input_dim(), 32);
        let image = Tensor::zeros(vec![64, 64, 3]);
        let x = patch_embed(&image, &cfg, &params).unwrap();
        assert_eq!(x.shape(), &[17, 32]);
        for i in 1..17 {
            assert_eq!(x.row(i), params.pos_embed.row(i));
        }
        let want: Vec<f32> = params
            .cls_token
            .data()
            .iter()
            .zip(params.pos_embed.row(0))
            .map(|(a, b)| a + b)
            .collect();
        assert_eq!(x.row(0), &want[..]);
        assert!(patch_embed(&Tensor::zeros(vec![32, 32, 3]), &cfg, &params).is_err());
    }

    #[test]
    fn patch_embed_reads_patches_row_major() {
        let cfg = tiny();
        let mut params = VitParams::<f64>::random(&cfg, &mut ChaCha8Rng::seed_from_u64(2));
        params.pos_embed = Tensor::zeros(vec![17, 32]);
        // projection sums channel 0 of the patch into output 0
        let mut w = Tensor::zeros(vec![cfg.patch_input_dim(), 32]);
        for i in (0..cfg.patch_input_dim()).step_by(3) {
            w.data_mut()[i * 32] = 1.0;
        }
        params.patch_proj = Linear::new(w, Tensor::zeros(vec![32])).unwrap();
        let mut image = Tensor::zeros(vec![64, 64, 3]);
        // light up patch (row 1, col 2)
        for y in 16..32 {
            for x in 32..48 {
                image.data_mut()[(y * 64 + x) * 3] = 1.0;
            }
        }
        let x = patch_embed(&image, &cfg, &params).unwrap();
        for i in 1..17 {
            let want = if i == 1 + 4 + 2 { 256.0 } else { 0.0 };
            assert_eq!(x.row(i)[0], want);
        }
    }

    #[test]
    fn pos_embed_interpolation() {
        let pos = Tensor::new(vec![5, 1], vec![9.0f64, 0.0, 1.0, 2.0, 3.0]).unwrap();
        let up = interpolate_pos_embed(&pos, 2, 3).unwrap();
        assert_eq!(up.rows(), 10);
        assert_eq!(up.row(0), &[9.0]);
        assert!((up.row(1 + 4)[0] - 1.5).abs() < 1e-12);
        assert_eq!(up.row(1)[0], 0.0);
        assert_eq!(up.row(9)[0], 3.0);
        assert_eq!(interpolate_pos_embed(&pos, 2, 2).unwrap(), pos);
        let flat = Tensor::filled(vec![5, 3], 0.25f64);
        let big = interpolate_pos_embed(&flat, 2, 5).unwrap();
        assert!(big.data().iter().all(|v| (*v - 0.25).abs() < 1e-15));
        assert!(interpolate_pos_embed(&pos, 3, 4).is_err());
    }

    #[test]
    fn zero_sublayers_are_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut layer = EncoderLayer::<f32>::random(32, 128, &mut rng);
        layer.proj = Linear::zeros(32, 32);
        layer.fc2 = Linear::zeros(128, 32);
        let x: Tensor<f32> = Tensor::random_normal(vec![17, 32], 1.0, &mut rng);
        assert_eq!(encoder_layer(&x, &layer, 2, None).unwrap(), x);
    }

    #[test]
    fn diagonal_bias_gives_self_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut layer = random_layer(&mut rng, 0.3);
        layer.fc2 = Linear::zeros(128, 32);
        // value = identity of normalized input, projection identity
        let mut qkv = layer.qkv.clone();
        for i in 0..32 {
            for j in 0..32 {
                qkv.weight.data_mut()[i * 96 + 64 + j] = if i == j { 1.0 } else { 0.0 };
            }
        }
        layer.qkv = qkv;
        layer.proj = Linear::identity(32);
        let x: Tensor<f32> = Tensor::random_normal(vec![5, 32], 1.0, &mut rng);
        let mut bias = Tensor::filled(vec![5, 5], f32::NEG_INFINITY);
        for i in 0..5 {
            bias.data_mut()[i * 5 + i] = 0.0;
        }
        let out = encoder_layer(&x, &layer, 2, Some(&bias)).unwrap();
        let ln = layer_norm(&x, &layer.ln1_gain, &layer.ln1_shift, LAYER_NORM_EPS).unwrap();
        for i in 0..5 {
            for d in 0..32 {
                let want = x.row(i)[d] + ln.row(i)[d];
                assert!((out.row(i)[d] - want).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn encoder_layer_matches_per_head_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let layer = random_layer(&mut rng, 0.2);
        let x: Tensor<f32> = Tensor::random_normal(vec![6, 32], 1.0, &mut rng);
        let got = encoder_layer(&x, &layer, 2, None).unwrap();

        // straightforward f64 reference
        let w = |t: &Tensor<f32>| t.data().iter().map(|v| *v as f64).collect::<Vec<_>>();
        let lin = |l: &Linear<f32>, v: &[f64]| {
            let (wi, wo) = (l.fan_in(), l.fan_out());
            let (ww, bb) = (w(&l.weight), w(&l.bias));
            (0..wo)
                .map(|j| bb[j] + (0..wi).map(|i| v[i] * ww[i * wo + j]).sum::<f64>())
                .collect::<Vec<f64>>()
        };
        let ln = |v: &[f64]| {
            let m = v.iter().sum::<f64>() / v.len() as f64;
            let var = v.iter().map(|a| (a - m).powi(2)).sum::<f64>() / v.len() as f64;
            v.iter().map(|a| (a - m) / (var + 1e-5).sqrt()).collect::<Vec<_>>()
        };
        let xs: Vec<Vec<f64>> = (0..6).map(|i| x.row(i).iter().map(|v| *v as f64).collect()).collect();
        let qkv: Vec<Vec<f64>> = xs.iter().map(|r| lin(&layer.qkv, &ln(r))).collect();
        for i in 0..6 {
            let mut attn = vec![0.0; 32];
            for h in 0..2 {
                let logits: Vec<f64> = (0..6)
                    .map(|j| (0..16).map(|d| qkv[i][h * 16 + d] * qkv[j][32 + h * 16 + d]).sum::<f64>() / 4.0)
                    .collect();
                let m = logits.iter().cloned().fold(f64::MIN, f64::max);
                let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
                let z: f64 = e.iter().sum();
                for j in 0..6 {
                    for d in 0..16 {
                        attn[h * 16 + d] += e[j] / z * qkv[j][64 + h * 16 + d];
                    }
                }
            }
            let mid: Vec<f64> = xs[i].iter().zip(lin(&layer.proj, &attn)).map(|(a, b)| a + b).collect();
            let hid: Vec<f64> = lin(&layer.fc1, &ln(&mid))
                .into_iter()
                .map(crate::numerics::gelu_f64)
                .collect();
            let out: Vec<f64> = mid.iter().zip(lin(&layer.fc2, &hid)).map(|(a, b)| a + b).collect();
            for d in 0..32 {
                assert!((got.row(i)[d] as f64 - out[d]).abs() < 1e-5, "row {i} dim {d}");
            }
        }
    }

    #[test]
    fn efficient_regions_match_naive_recompute() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let layer = random_layer(&mut rng, 0.3);
        let x: Tensor<f32> = Tensor::random_normal(vec![17, 32], 1.0, &mut rng);
        let grid = PatchGrid::square(16, 4).unwrap();
        let masks: Vec<RegionMask<f32>> = [
            BBox::new(3.0, 5.0, 40.0, 61.0),
            BBox::new(16.0, 16.0, 32.0, 48.0),
            BBox::new(50.0, 2.5, 63.5, 9.0),
        ]
        .iter()
        .map(|b| overlap_areas_factored(b, &grid).unwrap().cast())
        .collect();
        let out = moa_final_layer(&x, &masks, &layer, 2, &grid).unwrap();
        for (m, f) in masks.iter().zip(&out.cls_per_region) {
            let naive = naive_region_feature(&x, m, &layer, 2).unwrap();
            assert!(crate::numerics::max_abs_diff(f.as_ref().unwrap(), &naive) < 1e-5);
        }
        assert_eq!(out.patch_map.shape(), &[4, 4, 32]);
        assert_eq!(out.penultimate_cls, x.row(0));
    }

    #[test]
    fn full_mask_reproduces_unmasked_cls() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let layer = random_layer(&mut rng, 0.3);
        let x: Tensor<f32> = Tensor::random_normal(vec![17, 32], 1.0, &mut rng);
        let grid = PatchGrid::square(16, 4).unwrap();
        let full = RegionMask::full(16);
        let out = moa_final_layer(&x, &[full.clone(), full], &layer, 2, &grid).unwrap();
        let plain = encoder_layer(&x, &layer, 2, None).unwrap();
        let a = out.cls_per_region[0].as_ref().unwrap();
        assert_eq!(&a[..], plain.row(0));
        assert_eq!(out.cls_per_region[0], out.cls_per_region[1]);
        assert_eq!(flatten(&out.patch_map).unwrap().data(), &plain.data()[32..]);
    }

    #[test]
    fn degenerate_mask_only_fails_its_own_region() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let layer = random_layer(&mut rng, 0.3);
        let x: Tensor<f32> = Tensor::random_normal(vec![17, 32], 1.0, &mut rng);
        let grid = PatchGrid::square(16, 4).unwrap();
        let mut empty = vec![0.0f32; 17];
        empty[0] = 1.0;
        let masks = [RegionMask::full(16), RegionMask::from_values(empty).unwrap()];
        let out = moa_final_layer(&x, &masks, &layer, 2, &grid).unwrap();
        assert!(out.cls_per_region[0].is_ok());
        assert_eq!(out.cls_per_region[1], Err(Error::DegenerateMask));
        assert!(moa_final_layer(&x, &[], &layer, 2, &grid).is_err());
    }

    #[test]
    fn unflatten_layout() {
        let grid = PatchGrid::square(16, 2).unwrap();
        let tokens = Tensor::new(vec![5, 1], vec![-1.0f32, 1.0, 2.0, 3.0, 4.0]).unwrap();
        let m = unflatten(&tokens, &grid).unwrap();
        assert_eq!(m.shape(), &[2, 2, 1]);
        assert_eq!(m.data(), &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(flatten(&m).unwrap().data(), &tokens.data()[1..]);

        let wide = PatchGrid::new(16, 3, 2).unwrap();
        let t = Tensor::new(vec![7, 1], (0..7).map(|v| v as f32).collect()).unwrap();
        let m = unflatten(&t, &wide).unwrap();
        assert_eq!(m.shape(), &[2, 3, 1]);
        assert_eq!(m.data()[3], 4.0); // row 1, col 0
        assert!(unflatten(&tokens, &wide).is_err());
    }
}
