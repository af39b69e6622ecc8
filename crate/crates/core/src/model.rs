//! Sequential layer stack used for training and inference.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::binarize::{binary_conv_backward, binary_conv_forward_with_signs, BinaryConvCache, BinaryLayer};
use crate::bitkernel::{binary_conv_packed, PackedBinaryConv};
use crate::numcore::conv::{accumulate_row_grads, cols_grad, rows_times_cols};
use crate::numcore::{
    batchnorm_backward, batchnorm_forward, col2im, hardtanh_backward, hardtanh_forward, im2col, linear_backward,
    linear_forward, BatchNormCache, BatchNormParams, ConvGeometry, Tensor,
};
use crate::{Error, Result};

/// Real-valued convolution without bias (a batch norm always follows).
#[derive(Debug, Clone, PartialEq)]
pub struct RealConv {
    pub weight: Tensor,
    pub stride: usize,
    pub padding: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BinaryConv {
    pub layer: BinaryLayer,
    pub stride: usize,
    pub padding: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    /// `[out, in]`.
    pub weight: Tensor,
    pub bias: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Conv(RealConv),
    BinaryConv(BinaryConv),
    BatchNorm(BatchNormParams),
    Hardtanh,
    Flatten,
    Linear(Linear),
}

impl Layer {
    pub fn kind_name(&self) -> &'static str {
        match self {
            Layer::Conv(_) => "conv",
            Layer::BinaryConv(_) => "binary_conv",
            Layer::BatchNorm(_) => "batchnorm",
            Layer::Hardtanh => "hardtanh",
            Layer::Flatten => "flatten",
            Layer::Linear(_) => "linear",
        }
    }

    /// Per-sample output shape for a per-sample input shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let conv_out = |w: &Tensor, stride, padding| -> Result<Vec<usize>> {
            let s = w.shape();
            if input.len() != 3 || input[0] != s[1] {
                return Err(Error::dim(
                    "model",
                    format!("conv expects [{}, H, W], got {input:?}", s[1]),
                ));
            }
            let g = ConvGeometry::new(input[0], input[1], input[2], s[2], stride, padding)?;
            Ok(vec![s[0], g.out_h, g.out_w])
        };
        match self {
            Layer::Conv(c) => conv_out(&c.weight, c.stride, c.padding),
            Layer::BinaryConv(b) => conv_out(&b.layer.latent_weight, b.stride, b.padding),
            Layer::BatchNorm(bn) => {
                if input.first() != Some(&bn.channels()) {
                    return Err(Error::dim(
                        "model",
                        format!("batchnorm over {} channels got {input:?}", bn.channels()),
                    ));
                }
                Ok(input.to_vec())
            }
            Layer::Hardtanh => Ok(input.to_vec()),
            Layer::Flatten => Ok(vec![input.iter().product()]),
            Layer::Linear(l) => {
                if input != [l.weight.shape()[1]] {
                    return Err(Error::dim(
                        "model",
                        format!("linear expects [{}], got {input:?}", l.weight.shape()[1]),
                    ));
                }
                Ok(vec![l.weight.shape()[0]])
            }
        }
    }
}

/// Shape of the default desk-scale CNN: real stem conv, two binary conv
/// blocks (conv, batch norm, hardtanh), real linear classifier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSpec {
    pub widths: [usize; 3],
    pub strides: [usize; 3],
    /// When false the two middle convs are real-valued (float reference model).
    pub binary: bool,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            widths: [16, 32, 32],
            strides: [2, 2, 2],
            binary: true,
        }
    }
}

/// Which kernels run binary convs at inference time.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InferencePath {
    Float,
    Packed,
}

/// Gradient of one layer's parameters, summed over the batch.
#[derive(Debug, Clone, PartialEq)]
pub enum ParamGrad {
    None,
    Conv {
        d_weight: Vec<f32>,
    },
    /// `d_what` is `∂L/∂ŵ`; `d_alpha` the task part of the scale gradient.
    Binary {
        d_what: Vec<f32>,
        d_alpha: Vec<f32>,
    },
    BatchNorm {
        d_weight: Vec<f32>,
        d_bias: Vec<f32>,
    },
    Linear {
        d_weight: Vec<f32>,
        d_bias: Vec<f32>,
    },
}

enum Trace {
    Conv {
        geometry: ConvGeometry,
        cols: Vec<Vec<f32>>,
    },
    Binary {
        w_signs: Tensor,
        caches: Vec<BinaryConvCache<f32>>,
    },
    BatchNorm(BatchNormCache<f32>),
    Hardtanh(Tensor),
    Flatten(Vec<usize>),
    Linear(Tensor),
}

/// Intermediates recorded by [`Model::forward_train`].
pub struct ForwardTrace {
    traces: Vec<Trace>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    input_shape: Vec<usize>,
    num_classes: usize,
    layers: Vec<Layer>,
}

fn normal_tensor(shape: &[usize], std: f64, rng: &mut impl Rng) -> Tensor {
    let dist = Normal::new(0.0, std).expect("valid std");
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| dist.sample(rng) as f32).collect()).expect("shape matches")
}

fn sample(batch: &Tensor, b: usize, shape: &[usize]) -> Tensor {
    Tensor::new(shape.to_vec(), batch.outer(b).to_vec()).expect("per-sample shape")
}

fn stack(samples: Vec<Tensor>) -> Result<Tensor> {
    let mut shape = vec![samples.len()];
    shape.extend_from_slice(samples[0].shape());
    let data = samples.into_iter().flat_map(Tensor::into_data).collect();
    Tensor::new(shape, data)
}

impl Model {
    pub fn new(input_shape: Vec<usize>, num_classes: usize, layers: Vec<Layer>) -> Result<Self> {
        let model = Self {
            input_shape,
            num_classes,
            layers,
        };
        let out = model
            .layers
            .iter()
            .try_fold(model.input_shape.clone(), |s, l| l.output_shape(&s))?;
        if out != [num_classes] {
            return Err(Error::dim("model", format!("final output {out:?} != [{num_classes}]")));
        }
        Ok(model)
    }

    /// Builds the desk-scale CNN with He-normal initialisation. Binary
    /// layers start with `α = CAM(w)` and `γ = gamma_init`.
    pub fn desk_cnn(
        input_shape: [usize; 3],
        num_classes: usize,
        spec: &ModelSpec,
        gamma_init: f32,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let [w0, w1, w2] = spec.widths;
        let [s0, s1, s2] = spec.strides;
        let he = |fan_in: usize| (2.0 / fan_in as f64).sqrt();
        let mut layers = Vec::new();
        let mut shape = input_shape.to_vec();
        let push = |layer: Layer, layers: &mut Vec<Layer>, shape: &mut Vec<usize>| -> Result<()> {
            *shape = layer.output_shape(shape)?;
            layers.push(layer);
            Ok(())
        };
        let c_in = input_shape[0];
        push(
            Layer::Conv(RealConv {
                weight: normal_tensor(&[w0, c_in, 3, 3], he(c_in * 9), rng),
                stride: s0,
                padding: 1,
            }),
            &mut layers,
            &mut shape,
        )?;
        push(Layer::BatchNorm(BatchNormParams::new(w0)), &mut layers, &mut shape)?;
        push(Layer::Hardtanh, &mut layers, &mut shape)?;
        for (c_prev, c_next, stride) in [(w0, w1, s1), (w1, w2, s2)] {
            let weight = normal_tensor(&[c_next, c_prev, 3, 3], he(c_prev * 9), rng);
            let layer = if spec.binary {
                Layer::BinaryConv(BinaryConv {
                    layer: BinaryLayer::new(weight, gamma_init)?,
                    stride,
                    padding: 1,
                })
            } else {
                Layer::Conv(RealConv {
                    weight,
                    stride,
                    padding: 1,
                })
            };
            push(layer, &mut layers, &mut shape)?;
            push(Layer::BatchNorm(BatchNormParams::new(c_next)), &mut layers, &mut shape)?;
            push(Layer::Hardtanh, &mut layers, &mut shape)?;
        }
        push(Layer::Flatten, &mut layers, &mut shape)?;
        let features = shape[0];
        push(
            Layer::Linear(Linear {
                weight: normal_tensor(&[num_classes, features], (1.0 / features as f64).sqrt(), rng),
                bias: vec![0.0; num_classes],
            }),
            &mut layers,
            &mut shape,
        )?;
        Self::new(input_shape.to_vec(), num_classes, layers)
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    /// Binary conv layers in network order.
    pub fn binary_layers(&self) -> impl Iterator<Item = &BinaryConv> {
        self.layers.iter().filter_map(|l| match l {
            Layer::BinaryConv(b) => Some(b),
            _ => None,
        })
    }

    pub fn binary_layer_count(&self) -> usize {
        self.binary_layers().count()
    }

    fn check_batch(&self, x: &Tensor) -> Result<usize> {
        if x.shape().len() != self.input_shape.len() + 1 || x.shape()[1..] != self.input_shape[..] {
            return Err(Error::dim(
                "model",
                format!("batch {:?} does not match input {:?}", x.shape(), self.input_shape),
            ));
        }
        Ok(x.shape()[0])
    }

    /// Training-mode forward over a `[B, C, H, W]` batch. Batch norm uses
    /// batch statistics and updates its running averages.
    pub fn forward_train(&mut self, x: &Tensor) -> Result<(Tensor, ForwardTrace)> {
        let batch = self.check_batch(x)?;
        let mut act = x.clone();
        let mut traces = Vec::with_capacity(self.layers.len());
        for layer in &mut self.layers {
            let per_sample: Vec<usize> = act.shape()[1..].to_vec();
            let (next, trace) = match layer {
                Layer::Conv(c) => {
                    let g = ConvGeometry::new(
                        per_sample[0],
                        per_sample[1],
                        per_sample[2],
                        c.weight.shape()[2],
                        c.stride,
                        c.padding,
                    )?;
                    let mut outs = Vec::with_capacity(batch);
                    let mut cols_all = Vec::with_capacity(batch);
                    for b in 0..batch {
                        let cols = im2col(act.outer(b), &g, 0.0);
                        let out = rows_times_cols(c.weight.data(), &cols, g.fan_in());
                        outs.push(Tensor::new(vec![c.weight.shape()[0], g.out_h, g.out_w], out)?);
                        cols_all.push(cols);
                    }
                    (
                        stack(outs)?,
                        Trace::Conv {
                            geometry: g,
                            cols: cols_all,
                        },
                    )
                }
                Layer::BinaryConv(bc) => {
                    let w_signs = bc.layer.weight_signs();
                    let mut outs = Vec::with_capacity(batch);
                    let mut caches = Vec::with_capacity(batch);
                    for b in 0..batch {
                        let (out, cache) = binary_conv_forward_with_signs(
                            &sample(&act, b, &per_sample),
                            &bc.layer,
                            &w_signs,
                            bc.stride,
                            bc.padding,
                        )?;
                        outs.push(out);
                        caches.push(cache);
                    }
                    (stack(outs)?, Trace::Binary { w_signs, caches })
                }
                Layer::BatchNorm(bn) => {
                    let (y, cache) = batchnorm_forward(&act, bn, true)?;
                    bn.update_running_stats(&cache);
                    (y, Trace::BatchNorm(cache))
                }
                Layer::Hardtanh => (hardtanh_forward(&act), Trace::Hardtanh(act)),
                Layer::Flatten => {
                    let shape = act.shape().to_vec();
                    let flat = act.reshape(&[batch, per_sample.iter().product()])?;
                    (flat, Trace::Flatten(shape))
                }
                Layer::Linear(l) => (linear_forward(&act, &l.weight, &l.bias)?, Trace::Linear(act)),
            };
            traces.push(trace);
            act = next;
        }
        Ok((act, ForwardTrace { traces }))
    }

    /// Backward pass from `∂loss/∂logits`; returns one entry per layer.
    pub fn backward(&self, trace: &ForwardTrace, d_logits: &Tensor) -> Result<Vec<ParamGrad>> {
        let batch = d_logits.shape()[0];
        let mut grads = vec![ParamGrad::None; self.layers.len()];
        let mut d = d_logits.clone();
        for (idx, (layer, tr)) in self.layers.iter().zip(&trace.traces).enumerate().rev() {
            let need_input_grad = idx > 0;
            match (layer, tr) {
                (Layer::Linear(l), Trace::Linear(input)) => {
                    let g = linear_backward(input, &l.weight, &d)?;
                    grads[idx] = ParamGrad::Linear {
                        d_weight: g.d_weight.into_data(),
                        d_bias: g.d_bias,
                    };
                    d = g.d_input;
                }
                (Layer::Flatten, Trace::Flatten(shape)) => d = d.reshape(shape)?,
                (Layer::Hardtanh, Trace::Hardtanh(input)) => d = hardtanh_backward(input, &d)?,
                (Layer::BatchNorm(bn), Trace::BatchNorm(cache)) => {
                    let g = batchnorm_backward(cache, bn, &d)?;
                    grads[idx] = ParamGrad::BatchNorm {
                        d_weight: g.d_weight,
                        d_bias: g.d_bias,
                    };
                    d = g.d_input;
                }
                (Layer::BinaryConv(bc), Trace::Binary { w_signs, caches }) => {
                    let out_shape = d.shape()[1..].to_vec();
                    let mut d_what = vec![0.0f32; bc.layer.latent_weight.len()];
                    let mut d_alpha = vec![0.0f32; bc.layer.c_out()];
                    let mut d_inputs = Vec::with_capacity(batch);
                    for (b, cache) in caches.iter().enumerate() {
                        let g = binary_conv_backward(cache, &bc.layer, w_signs, &sample(&d, b, &out_shape))?;
                        for (acc, v) in d_what.iter_mut().zip(g.d_weight.data()) {
                            *acc += v;
                        }
                        for (acc, v) in d_alpha.iter_mut().zip(g.d_alpha.as_deref().unwrap_or(&[])) {
                            *acc += v;
                        }
                        d_inputs.push(g.d_input);
                    }
                    grads[idx] = ParamGrad::Binary { d_what, d_alpha };
                    d = stack(d_inputs)?;
                }
                (Layer::Conv(c), Trace::Conv { geometry, cols }) => {
                    let m = geometry.fan_in();
                    let positions = geometry.positions();
                    let mut d_weight = vec![0.0f32; c.weight.len()];
                    let mut d_inputs = Vec::with_capacity(batch);
                    for (b, sample_cols) in cols.iter().enumerate() {
                        let dy = d.outer(b);
                        accumulate_row_grads(dy, sample_cols, m, &mut d_weight);
                        if need_input_grad {
                            let d_cols = cols_grad(dy, c.weight.data(), m, positions);
                            d_inputs.push(Tensor::new(
                                vec![geometry.c_in, geometry.height, geometry.width],
                                col2im(&d_cols, geometry),
                            )?);
                        }
                    }
                    grads[idx] = ParamGrad::Conv { d_weight };
                    if need_input_grad {
                        d = stack(d_inputs)?;
                    }
                }
                _ => unreachable!("trace recorded by forward_train matches layer order"),
            }
        }
        Ok(grads)
    }

    /// Pre-packs binary conv weights for the XNOR/popcount path.
    pub fn packed_kernels(&self) -> Vec<Option<PackedBinaryConv>> {
        self.layers
            .iter()
            .map(|l| match l {
                Layer::BinaryConv(b) => Some(PackedBinaryConv::from_layer(&b.layer, b.stride, b.padding)),
                _ => None,
            })
            .collect()
    }

    /// Inference-mode forward (running batch-norm statistics).
    pub fn forward_eval(&self, x: &Tensor, path: InferencePath) -> Result<Tensor> {
        let packed = match path {
            InferencePath::Packed => Some(self.packed_kernels()),
            InferencePath::Float => None,
        };
        self.forward_eval_with(x, packed.as_deref())
    }

    pub fn forward_eval_with(&self, x: &Tensor, packed: Option<&[Option<PackedBinaryConv>]>) -> Result<Tensor> {
        let batch = self.check_batch(x)?;
        let mut act = x.clone();
        for (idx, layer) in self.layers.iter().enumerate() {
            let per_sample: Vec<usize> = act.shape()[1..].to_vec();
            act = match layer {
                Layer::Conv(c) => {
                    let outs = (0..batch)
                        .map(|b| {
                            crate::numcore::conv2d_forward(
                                &sample(&act, b, &per_sample),
                                &c.weight,
                                c.stride,
                                c.padding,
                            )
                        })
                        .collect::<Result<Vec<_>>>()?;
                    stack(outs)?
                }
                Layer::BinaryConv(bc) => {
                    let outs = match packed.and_then(|p| p[idx].as_ref()) {
                        Some(kernel) => (0..batch)
                            .map(|b| binary_conv_packed(&sample(&act, b, &per_sample), kernel))
                            .collect::<Result<Vec<_>>>()?,
                        None => {
                            let w_signs = bc.layer.weight_signs();
                            (0..batch)
                                .map(|b| {
                                    binary_conv_forward_with_signs(
                                        &sample(&act, b, &per_sample),
                                        &bc.layer,
                                        &w_signs,
                                        bc.stride,
                                        bc.padding,
                                    )
                                    .map(|(out, _)| out)
                                })
                                .collect::<Result<Vec<_>>>()?
                        }
                    };
                    stack(outs)?
                }
                Layer::BatchNorm(bn) => batchnorm_forward(&act, bn, false)?.0,
                Layer::Hardtanh => hardtanh_forward(&act),
                Layer::Flatten => act.reshape(&[batch, per_sample.iter().product()])?,
                Layer::Linear(l) => linear_forward(&act, &l.weight, &l.bias)?,
            };
        }
        Ok(act)
    }

    /// First layer (by name) holding a non-finite parameter.
    pub fn first_non_finite_layer(&self) -> Option<String> {
        self.layers.iter().enumerate().find_map(|(i, l)| {
            let finite = match l {
                Layer::Conv(c) => c.weight.is_finite(),
                Layer::BinaryConv(b) => {
                    b.layer.latent_weight.is_finite() && b.layer.alpha.iter().all(|v| v.is_finite())
                }
                Layer::BatchNorm(bn) => [&bn.weight, &bn.bias, &bn.running_mean, &bn.running_var]
                    .iter()
                    .all(|v| v.iter().all(|x| x.is_finite())),
                Layer::Linear(l) => l.weight.is_finite() && l.bias.iter().all(|v| v.is_finite()),
                Layer::Hardtanh | Layer::Flatten => true,
            };
            (!finite).then(|| format!("{}#{i}", l.kind_name()))
        })
    }
}
