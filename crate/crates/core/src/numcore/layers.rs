use serde::{Deserialize, Serialize};

use super::conv::{axpy, dot};
use super::{Scalar, Tensor};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct LinearGrads<T: Scalar = f32> {
    pub d_weight: Tensor<T>,
    pub d_bias: Vec<T>,
    pub d_input: Tensor<T>,
}

fn linear_dims<T: Scalar>(input: &Tensor<T>, weight: &Tensor<T>) -> Result<(usize, usize, usize)> {
    input.expect_rank(2, "linear")?;
    weight.expect_rank(2, "linear")?;
    let (batch, n_in) = (input.shape()[0], input.shape()[1]);
    let n_out = weight.shape()[0];
    if weight.shape()[1] != n_in {
        return Err(Error::dim(
            "linear",
            format!("weight in-features {} != input features {n_in}", weight.shape()[1]),
        ));
    }
    Ok((batch, n_in, n_out))
}

/// `y[b] = W · x[b] + bias` for `x: [B, in]`, `W: [out, in]`.
pub fn linear_forward<T: Scalar>(input: &Tensor<T>, weight: &Tensor<T>, bias: &[T]) -> Result<Tensor<T>> {
    let (batch, n_in, n_out) = linear_dims(input, weight)?;
    if bias.len() != n_out {
        return Err(Error::dim("linear", format!("bias length {} != {n_out}", bias.len())));
    }
    let mut out = Vec::with_capacity(batch * n_out);
    for b in 0..batch {
        let x = input.outer(b);
        for (row, &b) in weight.data().chunks_exact(n_in).zip(bias) {
            out.push(dot(row, x) + b);
        }
    }
    Tensor::new(vec![batch, n_out], out)
}

pub fn linear_backward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    d_output: &Tensor<T>,
) -> Result<LinearGrads<T>> {
    let (batch, n_in, n_out) = linear_dims(input, weight)?;
    d_output.expect_shape(&[batch, n_out], "linear_backward")?;
    let mut d_weight = vec![T::zero(); n_out * n_in];
    let mut d_bias = vec![T::zero(); n_out];
    let mut d_input = vec![T::zero(); batch * n_in];
    for b in 0..batch {
        let x = input.outer(b);
        let dy = d_output.outer(b);
        let dx = &mut d_input[b * n_in..][..n_in];
        for o in 0..n_out {
            let g = dy[o];
            d_bias[o] = d_bias[o] + g;
            axpy(g, x, &mut d_weight[o * n_in..][..n_in]);
            axpy(g, &weight.data()[o * n_in..][..n_in], dx);
        }
    }
    Ok(LinearGrads {
        d_weight: Tensor::new(weight.shape().to_vec(), d_weight)?,
        d_bias,
        d_input: Tensor::new(input.shape().to_vec(), d_input)?,
    })
}

/// Clip to `[-1, 1]`.
pub fn hardtanh_forward<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let one = T::one();
    x.map(|v| v.max(-one).min(one))
}

/// Passes `d_output` where `|x| ≤ 1`, zero elsewhere.
pub fn hardtanh_backward<T: Scalar>(x: &Tensor<T>, d_output: &Tensor<T>) -> Result<Tensor<T>> {
    d_output.expect_shape(x.shape(), "hardtanh_backward")?;
    let data = x
        .data()
        .iter()
        .zip(d_output.data())
        .map(|(&v, &g)| if v.abs() <= T::one() { g } else { T::zero() })
        .collect();
    Tensor::new(x.shape().to_vec(), data)
}

/// Mean softmax cross-entropy for one sample; returns the loss and `∂loss/∂logits`.
pub fn softmax_xent<T: Scalar>(logits: &[T], label: usize) -> Result<(T, Vec<T>)> {
    if label >= logits.len() {
        return Err(Error::Index {
            op: "softmax_xent",
            index: label,
            bound: logits.len(),
        });
    }
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: T = exps.iter().copied().sum();
    let loss = sum.ln() + max - logits[label];
    let mut grad: Vec<T> = exps.iter().map(|&e| e / sum).collect();
    grad[label] = grad[label] - T::one();
    Ok((loss, grad))
}

/// Per-channel affine parameters and running statistics of a batch-norm layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchNormParams<T: Scalar = f32> {
    pub weight: Vec<T>,
    pub bias: Vec<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub eps: T,
    pub momentum: T,
}

impl<T: Scalar> BatchNormParams<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            weight: vec![T::one(); channels],
            bias: vec![T::zero(); channels],
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            eps: T::from_f64_lossy(1e-5),
            momentum: T::from_f64_lossy(0.1),
        }
    }

    pub fn channels(&self) -> usize {
        self.weight.len()
    }

    /// Exponential moving update of the running statistics from a training batch.
    /// The running variance uses the unbiased batch estimate.
    pub fn update_running_stats(&mut self, cache: &BatchNormCache<T>) {
        if !cache.training {
            return;
        }
        let n = T::from_usize_lossy(cache.count);
        let unbias = if cache.count > 1 { n / (n - T::one()) } else { T::one() };
        let m = self.momentum;
        for c in 0..self.channels() {
            self.running_mean[c] = (T::one() - m) * self.running_mean[c] + m * cache.mean[c];
            self.running_var[c] = (T::one() - m) * self.running_var[c] + m * cache.var[c] * unbias;
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormCache<T: Scalar = f32> {
    pub training: bool,
    pub x_hat: Tensor<T>,
    pub mean: Vec<T>,
    pub var: Vec<T>,
    pub inv_std: Vec<T>,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormGrads<T: Scalar = f32> {
    pub d_weight: Vec<T>,
    pub d_bias: Vec<T>,
    pub d_input: Tensor<T>,
}

fn bn_dims<T: Scalar>(x: &Tensor<T>, channels: usize) -> Result<(usize, usize)> {
    if x.shape().len() < 2 || x.shape()[1] != channels {
        return Err(Error::dim(
            "batchnorm",
            format!("expected [B, {channels}, ...], got {:?}", x.shape()),
        ));
    }
    let spatial = x.shape()[2..].iter().product();
    Ok((x.shape()[0], spatial))
}

/// Normalises over batch and spatial axes per channel (axis 1). In training
/// mode batch statistics are used (biased variance); otherwise running stats.
pub fn batchnorm_forward<T: Scalar>(
    x: &Tensor<T>,
    params: &BatchNormParams<T>,
    training: bool,
) -> Result<(Tensor<T>, BatchNormCache<T>)> {
    let channels = params.channels();
    let (batch, spatial) = bn_dims(x, channels)?;
    let count = batch * spatial;
    let (mean, var) = if training {
        let n = T::from_usize_lossy(count);
        let mut mean = vec![T::zero(); channels];
        let mut var = vec![T::zero(); channels];
        for c in 0..channels {
            let mut s = T::zero();
            for b in 0..batch {
                for &v in &x.data()[(b * channels + c) * spatial..][..spatial] {
                    s = s + v;
                }
            }
            let mu = s / n;
            let mut sq = T::zero();
            for b in 0..batch {
                for &v in &x.data()[(b * channels + c) * spatial..][..spatial] {
                    sq = sq + (v - mu) * (v - mu);
                }
            }
            mean[c] = mu;
            var[c] = sq / n;
        }
        (mean, var)
    } else {
        (params.running_mean.clone(), params.running_var.clone())
    };
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + params.eps).sqrt()).collect();
    let mut x_hat = vec![T::zero(); x.len()];
    let mut y = vec![T::zero(); x.len()];
    for b in 0..batch {
        for c in 0..channels {
            let base = (b * channels + c) * spatial;
            for i in base..base + spatial {
                let h = (x.data()[i] - mean[c]) * inv_std[c];
                x_hat[i] = h;
                y[i] = params.weight[c] * h + params.bias[c];
            }
        }
    }
    Ok((
        Tensor::new(x.shape().to_vec(), y)?,
        BatchNormCache {
            training,
            x_hat: Tensor::new(x.shape().to_vec(), x_hat)?,
            mean,
            var,
            inv_std,
            count,
        },
    ))
}

pub fn batchnorm_backward<T: Scalar>(
    cache: &BatchNormCache<T>,
    params: &BatchNormParams<T>,
    d_output: &Tensor<T>,
) -> Result<BatchNormGrads<T>> {
    let channels = params.channels();
    d_output.expect_shape(cache.x_hat.shape(), "batchnorm_backward")?;
    let (batch, spatial) = bn_dims(d_output, channels)?;
    let n = T::from_usize_lossy(cache.count);
    let mut d_weight = vec![T::zero(); channels];
    let mut d_bias = vec![T::zero(); channels];
    for b in 0..batch {
        for c in 0..channels {
            let base = (b * channels + c) * spatial;
            for i in base..base + spatial {
                let g = d_output.data()[i];
                d_bias[c] = d_bias[c] + g;
                d_weight[c] = d_weight[c] + g * cache.x_hat.data()[i];
            }
        }
    }
    let mut d_input = vec![T::zero(); d_output.len()];
    for b in 0..batch {
        for c in 0..channels {
            let base = (b * channels + c) * spatial;
            let k = params.weight[c] * cache.inv_std[c];
            let span = base..base + spatial;
            for ((d, &g), &xh) in d_input[span.clone()]
                .iter_mut()
                .zip(&d_output.data()[span.clone()])
                .zip(&cache.x_hat.data()[span])
            {
                *d = if cache.training {
                    k / n * (n * g - d_bias[c] - xh * d_weight[c])
                } else {
                    k * g
                };
            }
        }
    }
    Ok(BatchNormGrads {
        d_weight,
        d_bias,
        d_input: Tensor::new(d_output.shape().to_vec(), d_input)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_give_ln2() {
        let (loss, grad) = softmax_xent(&[0.0f64, 0.0], 0).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(grad, vec![-0.5, 0.5]);
    }

    #[test]
    fn label_out_of_range() {
        assert!(matches!(
            softmax_xent(&[0.0f64, 1.0], 2),
            Err(Error::Index { index: 2, bound: 2, .. })
        ));
    }

    #[test]
    fn softmax_xent_is_stable_for_large_logits() {
        let (loss, _) = softmax_xent(&[1000.0f64, 0.0], 0).unwrap();
        assert!(loss.is_finite() && loss < 1e-300 + 1e-12);
    }

    #[test]
    fn hardtanh_clips_and_gates() {
        let x = Tensor::<f64>::from_vec(vec![1.5, -0.3, -2.0, 1.0]);
        assert_eq!(hardtanh_forward(&x).data(), &[1.0, -0.3, -1.0, 1.0]);
        let d = hardtanh_backward(&x, &Tensor::full(&[4], 1.0)).unwrap();
        assert_eq!(d.data(), &[0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn identity_linear() {
        let x = Tensor::<f64>::new(vec![2, 3], vec![1.0, -2.0, 3.0, 0.5, 0.0, -1.0]).unwrap();
        let mut eye = Tensor::<f64>::zeros(&[3, 3]);
        for i in 0..3 {
            eye.data_mut()[i * 3 + i] = 1.0;
        }
        let y = linear_forward(&x, &eye, &[0.0; 3]).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn batchnorm_train_output_is_standardised() {
        let x = Tensor::<f64>::new(vec![4, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let p = BatchNormParams::new(1);
        let (y, cache) = batchnorm_forward(&x, &p, true).unwrap();
        let mean: f64 = y.data().iter().sum::<f64>() / 4.0;
        let var: f64 = y.data().iter().map(|v| v * v).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.25 / (1.25 + 1e-5)).abs() < 1e-9);
        assert_eq!(cache.mean, vec![2.5]);
    }

    #[test]
    fn batchnorm_running_stats_and_eval() {
        let x = Tensor::<f64>::new(vec![4, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let mut p = BatchNormParams::new(1);
        let (_, cache) = batchnorm_forward(&x, &p, true).unwrap();
        p.update_running_stats(&cache);
        assert!((p.running_mean[0] - 0.25).abs() < 1e-12);
        // unbiased var of {1,2,3,4} is 5/3
        assert!((p.running_var[0] - (0.9 + 0.1 * 5.0 / 3.0)).abs() < 1e-12);
        let (y, _) = batchnorm_forward(&x, &p, false).unwrap();
        let expected = (1.0 - 0.25) / (p.running_var[0] + 1e-5).sqrt();
        assert!((y.data()[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn batchnorm_rejects_wrong_channels() {
        let x = Tensor::<f64>::zeros(&[2, 3, 2, 2]);
        assert!(batchnorm_forward(&x, &BatchNormParams::new(2), true).is_err());
    }
}
