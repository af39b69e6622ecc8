//! Binarization primitives for the training path.
//!
//! `sign(0) = +1` everywhere, including zero padding, so the float simulation
//! here and the packed kernels in [`crate::bitkernel`] agree bit for bit.

use crate::bitkernel::PackedBitTensor;
use crate::numcore::conv::{accumulate_row_grads, cols_grad, rows_times_cols};
use crate::numcore::{col2im, im2col, ConvGeometry, LayerGrads, Scalar, Tensor};
use crate::{Error, Result};

/// Lower clamp applied to every scaling factor.
pub const ALPHA_FLOOR: f64 = 1e-8;

#[inline]
pub fn sign<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one()
    } else {
        -T::one()
    }
}

/// Elementwise sign with `sign(0) = +1`.
pub fn sign_binarize<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(sign)
}

/// Channel-wise absolute mean `‖w‖₁ / M`.
pub fn cam_scale<T: Scalar>(channel: &[T]) -> Result<T> {
    if channel.is_empty() {
        return Err(Error::dim("cam_scale", "empty channel"));
    }
    let l1: T = channel.iter().map(|v| v.abs()).sum();
    Ok(l1 / T::from_usize_lossy(channel.len()))
}

/// Binary conv layer state: latent weights, learned scales `α`, balanced
/// parameters `γ`, and the last two sign snapshots of the latent weights.
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryLayer<T: Scalar = f32> {
    /// `[C_out, C_in, K, K]`.
    pub latent_weight: Tensor<T>,
    pub alpha: Vec<T>,
    pub gamma: Vec<T>,
    pub prev_sign: PackedBitTensor,
    pub prev_prev_sign: PackedBitTensor,
}

impl<T: Scalar> BinaryLayer<T> {
    /// Initialises `α` to the clamped CAM of each channel and `γ` to `gamma_init`.
    pub fn new(latent_weight: Tensor<T>, gamma_init: T) -> Result<Self> {
        latent_weight.expect_rank(4, "BinaryLayer::new")?;
        let c_out = latent_weight.shape()[0];
        let m = latent_weight.len() / c_out;
        let floor = T::from_f64_lossy(ALPHA_FLOOR);
        let alpha = latent_weight
            .data()
            .chunks_exact(m)
            .map(|ch| cam_scale(ch).map(|a| a.max(floor)))
            .collect::<Result<Vec<_>>>()?;
        let signs = Self::pack_signs(&latent_weight);
        Ok(Self {
            latent_weight,
            alpha,
            gamma: vec![gamma_init; c_out],
            prev_prev_sign: signs.clone(),
            prev_sign: signs,
        })
    }

    fn pack_signs(w: &Tensor<T>) -> PackedBitTensor {
        let c_out = w.shape()[0];
        let m = w.len() / c_out;
        PackedBitTensor::from_slice(vec![c_out, m], m, w.data())
    }

    /// Current latent-weight signs packed as `[C_out, M]`.
    pub fn current_signs(&self) -> PackedBitTensor {
        Self::pack_signs(&self.latent_weight)
    }

    /// Forget oscillation history (both snapshots set to the current signs).
    pub fn reset_sign_history(&mut self) {
        self.prev_sign = self.current_signs();
        self.prev_prev_sign = self.prev_sign.clone();
    }

    pub fn c_out(&self) -> usize {
        self.latent_weight.shape()[0]
    }

    pub fn c_in(&self) -> usize {
        self.latent_weight.shape()[1]
    }

    pub fn kernel(&self) -> usize {
        self.latent_weight.shape()[2]
    }

    /// `M = C_in·K·K`.
    pub fn fan_in(&self) -> usize {
        self.latent_weight.len() / self.c_out()
    }

    pub fn channel(&self, i: usize) -> &[T] {
        &self.latent_weight.data()[i * self.fan_in()..(i + 1) * self.fan_in()]
    }

    pub fn channel_mut(&mut self, i: usize) -> &mut [T] {
        let m = self.fan_in();
        &mut self.latent_weight.data_mut()[i * m..(i + 1) * m]
    }

    pub fn weight_signs(&self) -> Tensor<T> {
        sign_binarize(&self.latent_weight)
    }

    pub fn check_invariants(&self) -> Result<()> {
        if self.alpha.len() != self.c_out() || self.gamma.len() != self.c_out() {
            return Err(Error::dim("BinaryLayer", "alpha/gamma length != C_out"));
        }
        if let Some(a) = self.alpha.iter().find(|a| a.is_nan() || **a <= T::zero()) {
            return Err(Error::Domain {
                op: "BinaryLayer",
                detail: format!("alpha {a} is not positive"),
            });
        }
        Ok(())
    }
}

/// Per-sample intermediates kept for the backward pass.
#[derive(Debug, Clone)]
pub struct BinaryConvCache<T: Scalar = f32> {
    pub geometry: ConvGeometry,
    /// `[P, M]` sign patches of the input (padding taps are +1).
    pub sign_cols: Vec<T>,
    /// Pre-binarization input, for the activation STE gate.
    pub input: Tensor<T>,
}

fn binary_geometry<T: Scalar>(
    input: &Tensor<T>,
    layer: &BinaryLayer<T>,
    stride: usize,
    padding: usize,
) -> Result<ConvGeometry> {
    crate::numcore::conv::conv_geometry(input, &layer.latent_weight, stride, padding)
}

/// `α ∘ conv(sign(w), sign(a))` for one `[C_in,H,W]` sample, computed in float.
/// The ±1 products are summed first and scaled by `α_i` once per output.
pub fn binary_conv_forward<T: Scalar>(
    input: &Tensor<T>,
    layer: &BinaryLayer<T>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let w_signs = layer.weight_signs();
    binary_conv_forward_with_signs(input, layer, &w_signs, stride, padding).map(|(out, _)| out)
}

/// Forward pass reusing precomputed weight signs; also returns the cache.
pub fn binary_conv_forward_with_signs<T: Scalar>(
    input: &Tensor<T>,
    layer: &BinaryLayer<T>,
    w_signs: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<(Tensor<T>, BinaryConvCache<T>)> {
    let g = binary_geometry(input, layer, stride, padding)?;
    let m = g.fan_in();
    let sign_input: Vec<T> = input.data().iter().map(|&v| sign(v)).collect();
    let sign_cols = im2col(&sign_input, &g, T::one());
    let mut out = rows_times_cols(w_signs.data(), &sign_cols, m);
    let p = g.positions();
    for (co, chunk) in out.chunks_exact_mut(p).enumerate() {
        let a = layer.alpha[co];
        for v in chunk {
            *v = a * *v;
        }
    }
    let out = Tensor::new(vec![layer.c_out(), g.out_h, g.out_w], out)?;
    Ok((
        out,
        BinaryConvCache {
            geometry: g,
            sign_cols,
            input: input.clone(),
        },
    ))
}

/// Backward pass of [`binary_conv_forward`] for one sample.
///
/// Returns `d_weight = ∂L/∂ŵ` (with `ŵ = α ∘ sign(w)`), the task gradient of
/// `α`, and the input gradient after the clip-STE gate.
pub fn binary_conv_backward<T: Scalar>(
    cache: &BinaryConvCache<T>,
    layer: &BinaryLayer<T>,
    w_signs: &Tensor<T>,
    d_output: &Tensor<T>,
) -> Result<LayerGrads<T>> {
    let g = &cache.geometry;
    let c_out = layer.c_out();
    d_output.expect_shape(&[c_out, g.out_h, g.out_w], "binary_conv_backward")?;
    let m = g.fan_in();
    let mut d_what = vec![T::zero(); c_out * m];
    accumulate_row_grads(d_output.data(), &cache.sign_cols, m, &mut d_what);
    let d_alpha: Vec<T> = (0..c_out)
        .map(|i| {
            let mut acc = T::zero();
            for (&gw, &b) in d_what[i * m..(i + 1) * m].iter().zip(&w_signs.data()[i * m..]) {
                acc = acc + gw * b;
            }
            acc
        })
        .collect();
    let mut scaled = w_signs.data().to_vec();
    for (co, row) in scaled.chunks_exact_mut(m).enumerate() {
        for v in row {
            *v = layer.alpha[co] * *v;
        }
    }
    let d_cols = cols_grad(d_output.data(), &scaled, m, g.positions());
    let d_sign_input = Tensor::new(cache.input.shape().to_vec(), col2im(&d_cols, g))?;
    Ok(LayerGrads {
        d_weight: Tensor::new(layer.latent_weight.shape().to_vec(), d_what)?,
        d_input: activation_ste_backward(&d_sign_input, &cache.input)?,
        d_alpha: Some(d_alpha),
    })
}

/// Straight-through weight gradient `α_i · upstream ⊛ 1_{|w|≤1}` for one channel.
pub fn ste_weight_grad<T: Scalar>(upstream: &[T], alpha: T, latent: &[T]) -> Vec<T> {
    debug_assert_eq!(upstream.len(), latent.len());
    upstream
        .iter()
        .zip(latent)
        .map(|(&g, &w)| if w.abs() <= T::one() { alpha * g } else { T::zero() })
        .collect()
}

/// Clip-STE for activation binarization: passes `upstream` where `|a| ≤ 1`.
pub fn activation_ste_backward<T: Scalar>(upstream: &Tensor<T>, pre_activation: &Tensor<T>) -> Result<Tensor<T>> {
    upstream.expect_shape(pre_activation.shape(), "activation_ste_backward")?;
    let data = upstream
        .data()
        .iter()
        .zip(pre_activation.data())
        .map(|(&g, &a)| if a.abs() <= T::one() { g } else { T::zero() })
        .collect();
    Tensor::new(upstream.shape().to_vec(), data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn layer(shape: &[usize], w: Vec<f64>) -> BinaryLayer<f64> {
        BinaryLayer::new(Tensor::new(shape.to_vec(), w).unwrap(), 1e-4).unwrap()
    }

    #[test]
    fn sign_zero_is_plus_one() {
        let s = sign_binarize(&Tensor::from_vec(vec![0.3f64, -0.2, 0.0]));
        assert_eq!(s.data(), &[1.0, -1.0, 1.0]);
        let neg = sign_binarize(&Tensor::from_vec(vec![-0.1f64, -3.0]));
        assert_eq!(neg.data(), &[-1.0, -1.0]);
        assert_eq!(sign_binarize(&s), s);
    }

    #[test]
    fn cam_examples() {
        assert_eq!(cam_scale(&[0.5f64, -1.5, 1.0, -1.0]).unwrap(), 1.0);
        assert_eq!(cam_scale(&[0.0f64; 3]).unwrap(), 0.0);
        assert_eq!(cam_scale(&[0.3f64, -0.3, 0.3]).unwrap(), 0.3);
        assert!(cam_scale::<f64>(&[]).is_err());
    }

    #[test]
    fn zero_channel_alpha_is_clamped() {
        let l = layer(&[1, 1, 1, 1], vec![0.0]);
        assert_eq!(l.alpha, vec![ALPHA_FLOOR]);
        l.check_invariants().unwrap();
    }

    #[test]
    fn scalar_binary_conv() {
        let l = layer(&[1, 1, 1, 1], vec![0.7]);
        assert_eq!(l.alpha, vec![0.7]);
        let y = binary_conv_forward(&Tensor::new(vec![1, 1, 1], vec![2.0]).unwrap(), &l, 1, 0).unwrap();
        assert_eq!(y.data(), &[0.7]);
    }

    #[test]
    fn negated_input_flips_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w: Vec<f64> = (0..2 * 3 * 9).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let l = layer(&[2, 3, 3, 3], w);
        // strictly nonzero inputs so sign(-x) = -sign(x); no padding
        let x: Vec<f64> = (0..3 * 5 * 5)
            .map(|_| rng.gen_range(0.1..1.0) * if rng.gen() { 1.0 } else { -1.0 })
            .collect();
        let x = Tensor::new(vec![3, 5, 5], x).unwrap();
        let y = binary_conv_forward(&x, &l, 1, 0).unwrap();
        let y_neg = binary_conv_forward(&x.map(|v| -v), &l, 1, 0).unwrap();
        for (a, b) in y.data().iter().zip(y_neg.data()) {
            assert_eq!(*a, -*b);
        }
    }

    #[test]
    fn ste_examples() {
        assert_eq!(ste_weight_grad(&[0.1f64, -0.4], 2.0, &[0.5, 1.2]), vec![0.2, 0.0]);
        assert_eq!(ste_weight_grad(&[0.3f64, 0.1], 1.0, &[1.5, -2.0]), vec![0.0, 0.0]);
        assert_eq!(ste_weight_grad(&[0.3f64, -0.1], 1.0, &[0.5, -0.9]), vec![0.3, -0.1]);
    }

    #[test]
    fn activation_ste_examples() {
        let up = Tensor::from_vec(vec![1.0f64, 1.0, 1.0]);
        let a = Tensor::from_vec(vec![0.5f64, 1.5, -1.0]);
        assert_eq!(activation_ste_backward(&up, &a).unwrap().data(), &[1.0, 0.0, 1.0]);
    }

    #[test]
    fn output_levels_have_reduction_parity() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let w: Vec<f64> = (0..3 * 2 * 9).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let l = layer(&[3, 2, 3, 3], w);
        let x: Vec<f64> = (0..2 * 4 * 4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let y = binary_conv_forward(&Tensor::new(vec![2, 4, 4], x).unwrap(), &l, 1, 1).unwrap();
        let m = 18.0;
        for (co, ch) in y.data().chunks(16).enumerate() {
            for v in ch {
                let s = v / l.alpha[co];
                let r = s.round();
                assert!((s - r).abs() < 1e-9 && r.abs() <= m);
                assert_eq!((r as i64 - 18).rem_euclid(2), 0);
            }
        }
    }

    proptest! {
        #[test]
        fn cam_is_scale_equivariant(
            v in proptest::collection::vec(-3.0f64..3.0, 1..50),
            c in -4.0f64..4.0,
        ) {
            let scaled: Vec<f64> = v.iter().map(|x| c * x).collect();
            let lhs = cam_scale(&scaled).unwrap();
            let rhs = c.abs() * cam_scale(&v).unwrap();
            prop_assert!((lhs - rhs).abs() <= 1e-12 * (1.0 + rhs.abs()));
        }

        #[test]
        fn ste_is_linear(
            data in proptest::collection::vec((-2.0f64..2.0, -1.0f64..1.0, -1.0f64..1.0), 1..40),
            a1 in 0.01f64..2.0,
            a2 in 0.01f64..2.0,
        ) {
            let w: Vec<f64> = data.iter().map(|d| d.0).collect();
            let u: Vec<f64> = data.iter().map(|d| d.1).collect();
            let v: Vec<f64> = data.iter().map(|d| d.2).collect();
            let sum: Vec<f64> = u.iter().zip(&v).map(|(x, y)| x + y).collect();
            let lhs = ste_weight_grad(&sum, a1, &w);
            let gu = ste_weight_grad(&u, a1, &w);
            let gv = ste_weight_grad(&v, a1, &w);
            for i in 0..w.len() {
                prop_assert!((lhs[i] - gu[i] - gv[i]).abs() < 1e-12);
            }
            let g_sum_alpha = ste_weight_grad(&u, a1 + a2, &w);
            let g2 = ste_weight_grad(&u, a2, &w);
            for i in 0..w.len() {
                prop_assert!((g_sum_alpha[i] - gu[i] - g2[i]).abs() < 1e-12);
            }
        }
    }
}
