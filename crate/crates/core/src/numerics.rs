//! Dense row-major tensors and the handful of kernels the model needs.
//!
//! Everything here is a pure function of its inputs. Reductions accumulate
//! in `f64` regardless of the storage type.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{dim_err, Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return dim_err(format!(
                "shape {:?} needs {} elements, got {}",
                shape,
                expected,
                data.len()
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        Self::filled(shape, T::zero())
    }

    pub fn filled(shape: Vec<usize>, value: T) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![value; n],
        }
    }

    pub fn from_vec(data: Vec<T>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    /// Builds a 2-D tensor from equally sized rows.
    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return dim_err("ragged rows");
        }
        let data = rows.iter().flatten().copied().collect();
        Self::new(vec![rows.len(), cols], data)
    }

    /// Samples every element from N(0, std²).
    pub fn random_normal<R: Rng + ?Sized>(shape: Vec<usize>, std: f64, rng: &mut R) -> Self {
        let n: usize = shape.iter().product();
        let normal = Normal::new(0.0, std).expect("std must be finite and non-negative");
        let data = (0..n).map(|_| T::narrow(normal.sample(rng))).collect();
        Self { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Extent of the last axis (1 for a scalar-shaped tensor).
    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    /// Number of rows when viewed as `[..] x cols`.
    pub fn rows(&self) -> usize {
        match self.cols() {
            0 => 0,
            c => self.data.len() / c,
        }
    }

    pub fn row(&self, i: usize) -> &[T] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        Self::new(shape, self.data)
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::narrow(v.widen())).collect(),
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor<T>) -> Option<f64> {
        if self.shape != other.shape {
            return None;
        }
        Some(max_abs_diff(&self.data, &other.data))
    }
}

pub fn max_abs_diff<T: Scalar>(a: &[T], b: &[T]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x.widen() - y.widen()).abs())
        .fold(0.0, f64::max)
}

/// `a[m×k] · b[k×n]`.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.shape.len() != 2 || b.shape.len() != 2 {
        return dim_err(format!(
            "matmul needs rank-2 operands, got {:?} and {:?}",
            a.shape, b.shape
        ));
    }
    let (m, k) = (a.shape[0], a.shape[1]);
    let (k2, n) = (b.shape[0], b.shape[1]);
    if k != k2 {
        return dim_err(format!("matmul inner dims {k} vs {k2}"));
    }
    let mut out = Vec::with_capacity(m * n);
    let mut acc = vec![0.0f64; n];
    for i in 0..m {
        row_times_matrix(&a.data[i * k..(i + 1) * k], &b.data, n, &mut acc);
        out.extend(acc.iter().map(|&v| T::narrow(v)));
    }
    Ok(Tensor {
        shape: vec![m, n],
        data: out,
    })
}

/// acc = x · W, with W row-major [x.len() × n].
#[inline]
fn row_times_matrix<T: Scalar>(x: &[T], w: &[T], n: usize, acc: &mut [f64]) {
    acc.iter_mut().for_each(|v| *v = 0.0);
    for (kk, &xv) in x.iter().enumerate() {
        let xv = xv.widen();
        if xv == 0.0 {
            continue;
        }
        let wr = &w[kk * n..(kk + 1) * n];
        for (a, &wv) in acc.iter_mut().zip(wr) {
            *a += xv * wv.widen();
        }
    }
}

/// Softmax of `logits + bias` along the last axis.
///
/// Negative-infinity bias entries come out as exact zeros. A row whose
/// every entry is negative infinity is an error rather than NaN.
pub fn masked_softmax<T: Scalar>(logits: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    if logits.shape != bias.shape {
        return dim_err(format!(
            "logits {:?} vs bias {:?}",
            logits.shape, bias.shape
        ));
    }
    let n = logits.cols();
    let mut out = Vec::with_capacity(logits.len());
    let mut buf = vec![0.0f64; n];
    for r in 0..logits.rows() {
        for ((b, &l), &m) in buf.iter_mut().zip(logits.row(r)).zip(bias.row(r)) {
            *b = l.widen() + m.widen();
        }
        softmax_in_place(&mut buf).map_err(|_| Error::DegenerateRow { row: r })?;
        out.extend(buf.iter().map(|&v| T::narrow(v)));
    }
    Tensor::new(logits.shape.clone(), out)
}

/// Plain softmax along the last axis.
pub fn softmax<T: Scalar>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    masked_softmax(logits, &Tensor::zeros(logits.shape.clone()))
}

/// Softmax over an `f64` row. Fails only when no entry is finite.
pub(crate) fn softmax_in_place(row: &mut [f64]) -> Result<()> {
    let max = row
        .iter()
        .copied()
        .filter(|v| *v > f64::NEG_INFINITY)
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(Error::DegenerateRow { row: 0 });
    }
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = if *v == f64::NEG_INFINITY {
            0.0
        } else {
            (*v - max).exp()
        };
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
    Ok(())
}

pub fn layer_norm<T: Scalar>(
    x: &Tensor<T>,
    gain: &Tensor<T>,
    shift: &Tensor<T>,
    eps: f64,
) -> Result<Tensor<T>> {
    let d = x.cols();
    if gain.len() != d || shift.len() != d {
        return dim_err(format!(
            "layer_norm width {d}, gain {}, shift {}",
            gain.len(),
            shift.len()
        ));
    }
    let mut out = Vec::with_capacity(x.len());
    for r in 0..x.rows() {
        out.extend(layer_norm_row(x.row(r), gain.data(), shift.data(), eps));
    }
    Tensor::new(x.shape.clone(), out)
}

pub(crate) fn layer_norm_row<T: Scalar>(x: &[T], gain: &[T], shift: &[T], eps: f64) -> Vec<T> {
    let n = x.len() as f64;
    let mean = x.iter().map(|v| v.widen()).sum::<f64>() / n;
    let var = x.iter().map(|v| (v.widen() - mean).powi(2)).sum::<f64>() / n;
    let inv = 1.0 / (var + eps).sqrt();
    x.iter()
        .zip(gain)
        .zip(shift)
        .map(|((&v, &g), &b)| T::narrow((v.widen() - mean) * inv * g.widen() + b.widen()))
        .collect()
}

/// GELU, tanh approximation.
#[inline]
pub fn gelu<T: Scalar>(x: T) -> T {
    T::narrow(gelu_f64(x.widen()))
}

#[inline]
pub(crate) fn gelu_f64(x: f64) -> f64 {
    const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + 0.044_715 * x * x * x)).tanh())
}

#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    T::narrow(1.0 / (1.0 + (-x.widen()).exp()))
}

/// Bilinear interpolation of a `[H × W × C]` map at column `x`, row `y`.
/// Coordinates are clamped to `[0, W-1] × [0, H-1]`.
pub fn bilinear_sample<T: Scalar>(map: &Tensor<T>, x: f64, y: f64) -> Result<Vec<T>> {
    let mut acc = vec![0.0; map.cols()];
    bilinear_accumulate(map, x, y, 1.0, &mut acc)?;
    Ok(acc.into_iter().map(T::narrow).collect())
}

/// acc += weight * sample(x, y).
pub(crate) fn bilinear_accumulate<T: Scalar>(
    map: &Tensor<T>,
    x: f64,
    y: f64,
    weight: f64,
    acc: &mut [f64],
) -> Result<()> {
    let [h, w, c] = match map.shape() {
        &[h, w, c] if h > 0 && w > 0 => [h, w, c],
        s => return dim_err(format!("bilinear_sample needs a non-empty HxWxC map, got {s:?}")),
    };
    if acc.len() != c {
        return dim_err("accumulator width");
    }
    let x = x.clamp(0.0, (w - 1) as f64);
    let y = y.clamp(0.0, (h - 1) as f64);
    let x0 = x.floor() as usize;
    let y0 = y.floor() as usize;
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let fx = x - x0 as f64;
    let fy = y - y0 as f64;
    let corners = [
        (y0, x0, (1.0 - fy) * (1.0 - fx)),
        (y0, x1, (1.0 - fy) * fx),
        (y1, x0, fy * (1.0 - fx)),
        (y1, x1, fy * fx),
    ];
    let data = map.data();
    for (yy, xx, cw) in corners {
        if cw == 0.0 {
            continue;
        }
        let base = (yy * w + xx) * c;
        for (a, v) in acc.iter_mut().zip(&data[base..base + c]) {
            *a += weight * cw * v.widen();
        }
    }
    Ok(())
}

/// Affine map `x · W + b` with `W` stored `[in × out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> Linear<T> {
    pub fn new(weight: Tensor<T>, bias: Tensor<T>) -> Result<Self> {
        if weight.shape().len() != 2 || bias.shape() != [weight.shape()[1]] {
            return dim_err(format!(
                "linear weight {:?} with bias {:?}",
                weight.shape(),
                bias.shape()
            ));
        }
        Ok(Self { weight, bias })
    }

    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: Tensor::zeros(vec![fan_in, fan_out]),
            bias: Tensor::zeros(vec![fan_out]),
        }
    }

    pub fn identity(width: usize) -> Self {
        let mut weight = Tensor::zeros(vec![width, width]);
        for i in 0..width {
            weight.data_mut()[i * width + i] = T::one();
        }
        Self {
            weight,
            bias: Tensor::zeros(vec![width]),
        }
    }

    pub fn random<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, std: f64, rng: &mut R) -> Self {
        Self {
            weight: Tensor::random_normal(vec![fan_in, fan_out], std, rng),
            bias: Tensor::zeros(vec![fan_out]),
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn fan_out(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn forward_row(&self, x: &[T]) -> Result<Vec<T>> {
        let mut acc = vec![0.0; self.fan_out()];
        self.forward_row_f64(x, &mut acc)?;
        Ok(acc.into_iter().map(T::narrow).collect())
    }

    pub(crate) fn forward_row_f64(&self, x: &[T], acc: &mut [f64]) -> Result<()> {
        if x.len() != self.fan_in() {
            return dim_err(format!(
                "linear expects width {}, got {}",
                self.fan_in(),
                x.len()
            ));
        }
        row_times_matrix(x, self.weight.data(), self.fan_out(), acc);
        for (a, b) in acc.iter_mut().zip(self.bias.data()) {
            *a += b.widen();
        }
        Ok(())
    }

    /// Applies the map to every row of `x` (last axis must equal `fan_in`).
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut out = Vec::with_capacity(x.rows() * self.fan_out());
        for r in 0..x.rows() {
            out.extend(self.forward_row(x.row(r))?);
        }
        let mut shape = x.shape().to_vec();
        match shape.last_mut() {
            Some(last) => *last = self.fan_out(),
            None => shape.push(self.fan_out()),
        }
        Tensor::new(shape, out)
    }
}

/// Stack of affine layers with GELU between hidden layers and identity
/// on the output.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpSpec<T> {
    layers: Vec<Linear<T>>,
}

impl<T: Scalar> MlpSpec<T> {
    pub fn new(layers: Vec<Linear<T>>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Config("MLP needs at least one layer".into()));
        }
        for pair in layers.windows(2) {
            if pair[0].fan_out() != pair[1].fan_in() {
                return dim_err(format!(
                    "MLP layer widths {} -> {} do not chain",
                    pair[0].fan_out(),
                    pair[1].fan_in()
                ));
            }
        }
        Ok(Self { layers })
    }

    pub fn zeros(widths: &[usize]) -> Self {
        Self {
            layers: widths.windows(2).map(|w| Linear::zeros(w[0], w[1])).collect(),
        }
    }

    pub fn random<R: Rng + ?Sized>(widths: &[usize], std: f64, rng: &mut R) -> Self {
        Self {
            layers: widths
                .windows(2)
                .map(|w| Linear::random(w[0], w[1], std, rng))
                .collect(),
        }
    }

    pub fn layers(&self) -> &[Linear<T>] {
        &self.layers
    }

    pub(crate) fn layers_mut(&mut self) -> &mut [Linear<T>] {
        &mut self.layers
    }

    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.layers[0].fan_in()];
        w.extend(self.layers.iter().map(Linear::fan_out));
        w
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].fan_in()
    }

    pub fn output_width(&self) -> usize {
        self.layers[self.layers.len() - 1].fan_out()
    }

    pub fn forward_row(&self, x: &[T]) -> Result<Vec<T>> {
        let last = self.layers.len() - 1;
        let mut h = x.to_vec();
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward_row(&h)?;
            if i < last {
                h.iter_mut().for_each(|v| *v = gelu(*v));
            }
        }
        Ok(h)
    }
}

pub fn mlp_forward<T: Scalar>(spec: &MlpSpec<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    if x.cols() != spec.input_width() {
        return dim_err(format!(
            "MLP input width {} vs tensor width {}",
            spec.input_width(),
            x.cols()
        ));
    }
    let mut out = Vec::with_capacity(x.rows() * spec.output_width());
    for r in 0..x.rows() {
        out.extend(spec.forward_row(x.row(r))?);
    }
    let mut shape = x.shape().to_vec();
    *shape.last_mut().expect("non-scalar input") = spec.output_width();
    Tensor::new(shape, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t2(rows: &[&[f64]]) -> Tensor<f64> {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let a = t2(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let eye = t2(&[&[1.0, 0.0], &[0.0, 1.0]]);
        assert_eq!(matmul(&eye, &a).unwrap(), a);
        let col = t2(&[&[0.0], &[1.0]]);
        assert_eq!(matmul(&a, &col).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a: Tensor<f32> = Tensor::random_normal(vec![8, 8], 1.0, &mut rng);
        let b: Tensor<f32> = Tensor::random_normal(vec![8, 8], 1.0, &mut rng);
        let got = matmul(&a, &b).unwrap();
        for i in 0..8 {
            for j in 0..8 {
                let mut s = 0.0f64;
                for k in 0..8 {
                    s += a.data()[i * 8 + k] as f64 * b.data()[k * 8 + j] as f64;
                }
                assert!((got.data()[i * 8 + j] as f64 - s).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn matmul_rejects_mismatch() {
        let a = Tensor::<f32>::zeros(vec![2, 3]);
        assert!(matches!(matmul(&a, &a), Err(Error::Dimension(_))));
    }

    #[test]
    fn softmax_uniform_and_masked() {
        let z = Tensor::from_vec(vec![0.0f64; 3]);
        let s = masked_softmax(&z, &z).unwrap();
        for v in s.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
        let l = Tensor::from_vec(vec![5.0f64, 5.0]);
        let b = Tensor::from_vec(vec![0.0, f64::NEG_INFINITY]);
        assert_eq!(masked_softmax(&l, &b).unwrap().data(), &[1.0, 0.0]);
    }

    #[test]
    fn softmax_log_half_bias_matches_direct_exponentiation() {
        let l = Tensor::from_vec(vec![1.0f32, 2.0, 3.0]);
        let b = Tensor::from_vec(vec![0.5f32.ln(), 0.0, 0.0]);
        let got = masked_softmax(&l, &b).unwrap();
        let e = [0.5 * 1f64.exp(), 2f64.exp(), 3f64.exp()];
        let z: f64 = e.iter().sum();
        for (g, w) in got.data().iter().zip(e) {
            assert!((*g as f64 - w / z).abs() < 1e-6);
        }
    }

    #[test]
    fn softmax_all_masked_row_is_an_error() {
        let l = Tensor::from_rows(&[vec![1.0f64, 2.0], vec![0.0, 0.0]]).unwrap();
        let b = Tensor::from_rows(&[
            vec![0.0, 0.0],
            vec![f64::NEG_INFINITY, f64::NEG_INFINITY],
        ])
        .unwrap();
        assert_eq!(masked_softmax(&l, &b), Err(Error::DegenerateRow { row: 1 }));
    }

    #[test]
    fn layer_norm_cases() {
        let x = Tensor::from_vec(vec![3.0f64; 4]);
        let g = Tensor::filled(vec![4], 1.0);
        let z = Tensor::zeros(vec![4]);
        assert!(layer_norm(&x, &g, &z, 1e-5).unwrap().data().iter().all(|v| *v == 0.0));

        let shift = Tensor::from_vec(vec![1.0, -2.0, 0.5, 7.0]);
        let y = Tensor::from_vec(vec![0.3, -1.0, 2.0, 5.0]);
        let out = layer_norm(&y, &Tensor::zeros(vec![4]), &shift, 1e-5).unwrap();
        assert_eq!(out.data(), shift.data());

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x: Tensor<f32> = Tensor::random_normal(vec![1, 16], 2.0, &mut rng);
        let gain: Tensor<f32> = Tensor::random_normal(vec![16], 1.0, &mut rng);
        let shift: Tensor<f32> = Tensor::random_normal(vec![16], 1.0, &mut rng);
        let got = layer_norm(&x, &gain, &shift, 1e-5).unwrap();
        let xs: Vec<f64> = x.data().iter().map(|v| *v as f64).collect();
        let mean = xs.iter().sum::<f64>() / 16.0;
        let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 16.0;
        for i in 0..16 {
            let want = (xs[i] - mean) / (var + 1e-5).sqrt() * gain.data()[i] as f64
                + shift.data()[i] as f64;
            assert!((got.data()[i] as f64 - want).abs() < 1e-6);
        }
    }

    #[test]
    fn bilinear_cases() {
        let map = Tensor::new(vec![1, 2, 1], vec![0.0f64, 1.0]).unwrap();
        assert_eq!(bilinear_sample(&map, 0.5, 0.0).unwrap(), vec![0.5]);
        assert_eq!(bilinear_sample(&map, 1.0, 0.0).unwrap(), vec![1.0]);
        // clamped outside the map
        assert_eq!(bilinear_sample(&map, 9.0, -3.0).unwrap(), vec![1.0]);

        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let map: Tensor<f64> = Tensor::random_normal(vec![4, 4, 2], 1.0, &mut rng);
        let (x, y) = (1.37, 2.81);
        let got = bilinear_sample(&map, x, y).unwrap();
        let at = |r: usize, c: usize, ch: usize| map.data()[(r * 4 + c) * 2 + ch];
        for ch in 0..2 {
            let want = at(2, 1, ch) * 0.63 * 0.19
                + at(2, 2, ch) * 0.37 * 0.19
                + at(3, 1, ch) * 0.63 * 0.81
                + at(3, 2, ch) * 0.37 * 0.81;
            assert!((got[ch] - want).abs() < 1e-6);
        }
    }

    #[test]
    fn mlp_cases() {
        let zero = MlpSpec::<f32>::zeros(&[3, 5, 2]);
        let x = Tensor::from_rows(&[vec![1.0f32, -2.0, 3.0]]).unwrap();
        assert!(mlp_forward(&zero, &x).unwrap().data().iter().all(|v| *v == 0.0));

        let ident = MlpSpec::new(vec![Linear::<f32>::identity(3)]).unwrap();
        assert_eq!(mlp_forward(&ident, &x).unwrap(), x);

        assert!(mlp_forward(&zero, &Tensor::zeros(vec![1, 4])).is_err());
        assert!(MlpSpec::new(vec![Linear::<f32>::zeros(3, 4), Linear::zeros(5, 2)]).is_err());
    }

    #[test]
    fn mlp_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let spec = MlpSpec::<f32>::random(&[4, 6, 3], 0.7, &mut rng);
        let x: Tensor<f32> = Tensor::random_normal(vec![2, 4], 1.0, &mut rng);
        let got = mlp_forward(&spec, &x).unwrap();
        let l = spec.layers();
        for r in 0..2 {
            let mut hidden = [0.0f64; 6];
            for j in 0..6 {
                let mut s = l[0].bias.data()[j] as f64;
                for i in 0..4 {
                    s += x.data()[r * 4 + i] as f64 * l[0].weight.data()[i * 6 + j] as f64;
                }
                let s = s as f32 as f64;
                hidden[j] = 0.5 * s * (1.0 + ((2.0 / std::f64::consts::PI).sqrt()
                    * (s + 0.044715 * s.powi(3))).tanh());
            }
            for j in 0..3 {
                let mut s = l[1].bias.data()[j] as f64;
                for i in 0..6 {
                    s += hidden[i] as f32 as f64 * l[1].weight.data()[i * 3 + j] as f64;
                }
                assert!((got.data()[r * 3 + j] as f64 - s).abs() < 1e-6);
            }
        }
    }

    proptest! {
        #[test]
        fn softmax_rows_are_distributions_and_shift_invariant(
            logits in prop::collection::vec(-20.0f64..20.0, 1..12),
            shift in -50.0f64..50.0,
        ) {
            let n = logits.len();
            let l = Tensor::from_vec(logits.clone());
            let z = Tensor::zeros(vec![n]);
            let a = masked_softmax(&l, &z).unwrap();
            let s: f64 = a.data().iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-6);
            prop_assert!(a.data().iter().all(|v| *v >= 0.0));
            let shifted = Tensor::from_vec(logits.iter().map(|v| v + shift).collect());
            let b = masked_softmax(&shifted, &z).unwrap();
            prop_assert!(a.max_abs_diff(&b).unwrap() < 1e-6);
            // purity
            prop_assert_eq!(a, masked_softmax(&l, &z).unwrap());
        }

        #[test]
        fn bilinear_is_linear_along_cell_edges(
            v00 in -5.0f64..5.0, v01 in -5.0f64..5.0, v10 in -5.0f64..5.0, v11 in -5.0f64..5.0,
            t in 0.0f64..1.0,
        ) {
            let map = Tensor::new(vec![2, 2, 1], vec![v00, v01, v10, v11]).unwrap();
            prop_assert_eq!(bilinear_sample(&map, 0.0, 0.0).unwrap()[0], v00);
            prop_assert_eq!(bilinear_sample(&map, 1.0, 1.0).unwrap()[0], v11);
            let top = bilinear_sample(&map, t, 0.0).unwrap()[0];
            prop_assert!((top - (v00 + t * (v01 - v00))).abs() < 1e-12);
            let left = bilinear_sample(&map, 0.0, t).unwrap()[0];
            prop_assert!((left - (v00 + t * (v10 - v00))).abs() < 1e-12);
        }
    }
}
