//! Bit-packed inference backend.
//!
//! Signs are packed 64 per `u64` along the innermost (reduction) axis. Bit 1
//! encodes +1 and bit 0 encodes −1. Each row owns `ceil(len/64)` words; unused
//! high bits of the last word are set to 1 and masked out of every reduction.
//!
//! A ±1 dot product of length `M` is `2·popcount(XNOR(a, b)) − M`. The packed
//! convolution accumulates that integer and multiplies by the channel scale
//! once, which is exactly what the float simulation path computes.

use std::hint::black_box;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::model::{Layer, Model};
use crate::numcore::{im2col, ConvGeometry, Scalar, Tensor};
use crate::{Error, Result};

const WORD_BITS: usize = 64;

fn words_for(len: usize) -> usize {
    len.div_ceil(WORD_BITS)
}

/// Mask of valid bits in the final word of a row of length `len`.
fn tail_mask(len: usize) -> u64 {
    match len % WORD_BITS {
        0 => u64::MAX,
        r => (1u64 << r) - 1,
    }
}

/// Packed {−1,+1} tensor. Rows run along the last logical axis.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PackedBitTensor {
    logical_shape: Vec<usize>,
    row_len: usize,
    words: Vec<u64>,
}

/// Borrowed view of one packed row.
#[derive(Debug, Clone, Copy)]
pub struct PackedRow<'a> {
    pub words: &'a [u64],
    pub len: usize,
}

impl PackedBitTensor {
    /// Packs a tensor whose elements are exactly −1 or +1.
    pub fn pack<T: Scalar>(signs: &Tensor<T>) -> Result<Self> {
        if let Some(i) = signs.data().iter().position(|&v| v != T::one() && v != -T::one()) {
            return Err(Error::Domain {
                op: "pack",
                detail: format!("element {i} is {} (expected ±1)", signs.data()[i]),
            });
        }
        Ok(Self::from_signs_of(signs))
    }

    /// Packs `sign(x)` elementwise, with `sign(0) = +1`.
    pub fn from_signs_of<T: Scalar>(x: &Tensor<T>) -> Self {
        let row_len = *x.shape().last().expect("tensor has rank >= 1");
        Self::from_slice(x.shape().to_vec(), row_len, x.data())
    }

    pub(crate) fn from_slice<T: Scalar>(shape: Vec<usize>, row_len: usize, data: &[T]) -> Self {
        let n_rows = data.len() / row_len;
        let wpr = words_for(row_len);
        let mut words = vec![u64::MAX; n_rows * wpr];
        for (r, row) in data.chunks_exact(row_len).enumerate() {
            for (j, &v) in row.iter().enumerate() {
                if v < T::zero() {
                    words[r * wpr + j / WORD_BITS] &= !(1u64 << (j % WORD_BITS));
                }
            }
        }
        Self {
            logical_shape: shape,
            row_len,
            words,
        }
    }

    /// Reassembles a packed tensor from raw words. Padding bits are forced to 1.
    pub fn from_words(logical_shape: Vec<usize>, mut words: Vec<u64>) -> Result<Self> {
        let row_len = *logical_shape
            .last()
            .ok_or_else(|| Error::dim("PackedBitTensor", "empty shape"))?;
        let n: usize = logical_shape.iter().product();
        if row_len == 0 || n == 0 {
            return Err(Error::dim("PackedBitTensor", "zero extent"));
        }
        let wpr = words_for(row_len);
        if words.len() != (n / row_len) * wpr {
            return Err(Error::dim(
                "PackedBitTensor",
                format!(
                    "shape {logical_shape:?} needs {} words, got {}",
                    (n / row_len) * wpr,
                    words.len()
                ),
            ));
        }
        let mask = tail_mask(row_len);
        for r in 0..n / row_len {
            words[r * wpr + wpr - 1] |= !mask;
        }
        Ok(Self {
            logical_shape,
            row_len,
            words,
        })
    }

    pub fn unpack<T: Scalar>(&self) -> Tensor<T> {
        let mut data = Vec::with_capacity(self.rows() * self.row_len);
        for r in 0..self.rows() {
            let row = self.row(r);
            for j in 0..self.row_len {
                let bit = row.words[j / WORD_BITS] >> (j % WORD_BITS) & 1;
                data.push(if bit == 1 { T::one() } else { -T::one() });
            }
        }
        Tensor::new(self.logical_shape.clone(), data).expect("shape preserved")
    }

    pub fn logical_shape(&self) -> &[usize] {
        &self.logical_shape
    }

    pub fn row_len(&self) -> usize {
        self.row_len
    }

    pub fn words_per_row(&self) -> usize {
        words_for(self.row_len)
    }

    pub fn rows(&self) -> usize {
        self.words.len() / self.words_per_row()
    }

    pub fn words(&self) -> &[u64] {
        &self.words
    }

    pub fn row(&self, r: usize) -> PackedRow<'_> {
        let wpr = self.words_per_row();
        PackedRow {
            words: &self.words[r * wpr..(r + 1) * wpr],
            len: self.row_len,
        }
    }

    fn check_same_layout(&self, other: &Self, op: &'static str) -> Result<()> {
        if self.logical_shape != other.logical_shape {
            return Err(Error::dim(
                op,
                format!("{:?} vs {:?}", self.logical_shape, other.logical_shape),
            ));
        }
        Ok(())
    }

    /// Per-row count of positions whose sign differs between `self` and `other`.
    pub fn flips_per_row(&self, other: &Self) -> Result<Vec<u64>> {
        self.check_same_layout(other, "flips_per_row")?;
        let wpr = self.words_per_row();
        Ok(self
            .words
            .chunks_exact(wpr)
            .zip(other.words.chunks_exact(wpr))
            .map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x ^ y).count_ones() as u64).sum())
            .collect())
    }

    /// Per-row count of positions that flipped on both steps `older→self` and `self→newer`.
    pub fn sequential_flips_per_row(&self, older: &Self, newer: &Self) -> Result<Vec<u64>> {
        self.check_same_layout(older, "sequential_flips_per_row")?;
        self.check_same_layout(newer, "sequential_flips_per_row")?;
        let wpr = self.words_per_row();
        Ok((0..self.rows())
            .map(|r| {
                let span = r * wpr..(r + 1) * wpr;
                self.words[span.clone()]
                    .iter()
                    .zip(&older.words[span.clone()])
                    .zip(&newer.words[span])
                    .map(|((m, o), n)| ((o ^ m) & (m ^ n)).count_ones() as u64)
                    .sum()
            })
            .collect())
    }
}

/// `Σ a_j·b_j` over the ±1 values of two packed rows.
pub fn xnor_popcount_dot(a: PackedRow<'_>, b: PackedRow<'_>) -> Result<i64> {
    if a.len != b.len || a.words.len() != b.words.len() {
        return Err(Error::dim(
            "xnor_popcount_dot",
            format!("lengths {} vs {}", a.len, b.len),
        ));
    }
    Ok(dot_unchecked(a.words, b.words, a.len))
}

#[inline]
fn dot_unchecked(a: &[u64], b: &[u64], len: usize) -> i64 {
    let last = a.len() - 1;
    let mut matches = 0u32;
    for i in 0..last {
        matches += (!(a[i] ^ b[i])).count_ones();
    }
    matches += (!(a[last] ^ b[last]) & tail_mask(len)).count_ones();
    2 * matches as i64 - len as i64
}

/// Binary convolution with pre-packed weights, ready for inference.
#[derive(Debug, Clone, PartialEq)]
pub struct PackedBinaryConv<T: Scalar = f32> {
    pub c_out: usize,
    pub c_in: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    /// `[C_out, C_in·K·K]` weight signs.
    pub weights: PackedBitTensor,
    pub alpha: Vec<T>,
}

const PACKED_CONV_HEADER: usize = 5 * 4;

impl<T: Scalar> PackedBinaryConv<T> {
    pub fn from_layer(layer: &crate::binarize::BinaryLayer<T>, stride: usize, padding: usize) -> Self {
        let s = layer.latent_weight.shape();
        let m = layer.fan_in();
        Self {
            c_out: s[0],
            c_in: s[1],
            kernel: s[2],
            stride,
            padding,
            weights: PackedBitTensor::from_slice(vec![s[0], m], m, layer.latent_weight.data()),
            alpha: layer.alpha.clone(),
        }
    }

    pub fn fan_in(&self) -> usize {
        self.c_in * self.kernel * self.kernel
    }

    /// Size of [`to_bytes`](Self::to_bytes): header, packed words, f32 scales.
    pub fn serialized_len(c_out: usize, fan_in: usize) -> usize {
        PACKED_CONV_HEADER + c_out * words_for(fan_in) * 8 + c_out * 4
    }

    /// Little-endian layout: `c_out, c_in, k, stride, padding` as u32, then
    /// words row-major over `(C_out, word)`, then α as f32.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(Self::serialized_len(self.c_out, self.fan_in()));
        for v in [self.c_out, self.c_in, self.kernel, self.stride, self.padding] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        for w in self.weights.words() {
            out.extend_from_slice(&w.to_le_bytes());
        }
        for a in &self.alpha {
            out.extend_from_slice(&(a.to_f64_lossy() as f32).to_le_bytes());
        }
        out
    }
}

/// Serialized size of a real-valued conv with the same header convention.
pub fn float_conv_serialized_len(c_out: usize, fan_in: usize) -> usize {
    PACKED_CONV_HEADER + c_out * fan_in * 4
}

/// `α_i · (XNOR/popcount conv)` of one `[C,H,W]` sample. The input is
/// binarized with `sign(0) = +1`; padded taps are +1.
pub fn binary_conv_packed<T: Scalar>(input: &Tensor<T>, conv: &PackedBinaryConv<T>) -> Result<Tensor<T>> {
    input.expect_rank(3, "binary_conv_packed")?;
    if input.shape()[0] != conv.c_in {
        return Err(Error::dim(
            "binary_conv_packed",
            format!("input channels {} != layer C_in {}", input.shape()[0], conv.c_in),
        ));
    }
    let g = ConvGeometry::new(
        conv.c_in,
        input.shape()[1],
        input.shape()[2],
        conv.kernel,
        conv.stride,
        conv.padding,
    )?;
    let m = g.fan_in();
    let cols = im2col(input.data(), &g, T::one());
    let packed_cols = PackedBitTensor::from_slice(vec![g.positions(), m], m, &cols);
    let mut out = Vec::with_capacity(conv.c_out * g.positions());
    for co in 0..conv.c_out {
        let w = conv.weights.row(co);
        for p in 0..g.positions() {
            let s = dot_unchecked(w.words, packed_cols.row(p).words, m);
            out.push(conv.alpha[co] * T::from_f64_lossy(s as f64));
        }
    }
    Tensor::new(vec![conv.c_out, g.out_h, g.out_w], out)
}

/// Per-layer accounting entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerOps {
    pub name: String,
    pub bops: u64,
    pub flops: u64,
    pub bytes_binary: u64,
    pub bytes_float: u64,
}

/// Operation and memory accounting. A binary multiply-accumulate counts as
/// 2 BOPs and a real one as 2 FLOPs; `total_ops = bops/64 + flops`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpsReport {
    pub layers: Vec<LayerOps>,
    pub bops: u64,
    pub flops: u64,
    pub total_ops: f64,
    pub model_bytes_binary: u64,
    pub model_bytes_float: u64,
}

impl OpsReport {
    pub fn compression_ratio(&self) -> f64 {
        self.model_bytes_float as f64 / self.model_bytes_binary as f64
    }

    fn from_layers(layers: Vec<LayerOps>) -> Self {
        let bops = layers.iter().map(|l| l.bops).sum::<u64>();
        let flops = layers.iter().map(|l| l.flops).sum::<u64>();
        Self {
            bops,
            flops,
            total_ops: bops as f64 / 64.0 + flops as f64,
            model_bytes_binary: layers.iter().map(|l| l.bytes_binary).sum(),
            model_bytes_float: layers.iter().map(|l| l.bytes_float).sum(),
            layers,
        }
    }
}

/// Ops and bytes of a single binary conv on a `h×w` input.
pub fn binary_conv_ops(
    c_out: usize,
    c_in: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    height: usize,
    width: usize,
) -> Result<LayerOps> {
    let g = ConvGeometry::new(c_in, height, width, kernel, stride, padding)?;
    let outputs = (c_out * g.positions()) as u64;
    Ok(LayerOps {
        name: format!("binary_conv {c_out}x{c_in}x{kernel}x{kernel}"),
        bops: 2 * outputs * g.fan_in() as u64,
        flops: outputs,
        bytes_binary: PackedBinaryConv::<f32>::serialized_len(c_out, g.fan_in()) as u64,
        bytes_float: float_conv_serialized_len(c_out, g.fan_in()) as u64,
    })
}

/// Exact per-layer BOP/FLOP counts and storage for a constructed model.
///
/// Batch norm is counted as 2 FLOPs per element (folded scale and shift);
/// hardtanh and flatten are free. Real layers cost the same in both byte
/// columns; binary convs are charged their packed serialized size.
pub fn count_ops(model: &Model) -> Result<OpsReport> {
    let mut shape = model.input_shape().to_vec();
    let mut layers = Vec::new();
    for layer in model.layers() {
        let out_shape = layer.output_shape(&shape)?;
        let out_elems: u64 = out_shape.iter().product::<usize>() as u64;
        let entry = match layer {
            Layer::BinaryConv(b) => {
                let s = b.layer.latent_weight.shape();
                binary_conv_ops(s[0], s[1], s[2], b.stride, b.padding, shape[1], shape[2])?
            }
            Layer::Conv(c) => {
                let s = c.weight.shape();
                let fan_in = s[1] * s[2] * s[3];
                let bytes = float_conv_serialized_len(s[0], fan_in) as u64;
                LayerOps {
                    name: format!("conv {}x{}x{}x{}", s[0], s[1], s[2], s[3]),
                    bops: 0,
                    flops: 2 * out_elems * fan_in as u64,
                    bytes_binary: bytes,
                    bytes_float: bytes,
                }
            }
            Layer::Linear(l) => {
                let s = l.weight.shape();
                let bytes = (8 + 4 * (s[0] * s[1] + s[0])) as u64;
                LayerOps {
                    name: format!("linear {}x{}", s[0], s[1]),
                    bops: 0,
                    flops: 2 * (s[0] * s[1]) as u64 + s[0] as u64,
                    bytes_binary: bytes,
                    bytes_float: bytes,
                }
            }
            Layer::BatchNorm(bn) => {
                let bytes = (4 + 16 * bn.channels()) as u64;
                LayerOps {
                    name: format!("batchnorm {}", bn.channels()),
                    bops: 0,
                    flops: 2 * out_elems,
                    bytes_binary: bytes,
                    bytes_float: bytes,
                }
            }
            Layer::Hardtanh | Layer::Flatten => LayerOps {
                name: layer.kind_name().to_string(),
                bops: 0,
                flops: 0,
                bytes_binary: 0,
                bytes_float: 0,
            },
        };
        layers.push(entry);
        shape = out_shape;
    }
    Ok(OpsReport::from_layers(layers))
}

/// Timing of packed versus float ±1 dot products of length `m`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DotBench {
    pub m: usize,
    pub packed_ns: f64,
    pub float_ns: f64,
    pub speedup: f64,
}

/// Median-of-`repetitions` wall time per dot product for both paths over the
/// same data. Both results are checked for equality before timing.
pub fn bench_dot(m: usize, repetitions: usize) -> Result<DotBench> {
    use rand::{Rng, SeedableRng};
    if m == 0 {
        return Err(Error::dim("bench_dot", "M must be positive"));
    }
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(m as u64);
    let a: Vec<f32> = (0..m).map(|_| if rng.gen::<bool>() { 1.0 } else { -1.0 }).collect();
    let b: Vec<f32> = (0..m).map(|_| if rng.gen::<bool>() { 1.0 } else { -1.0 }).collect();
    let pa = PackedBitTensor::from_slice(vec![m], m, &a);
    let pb = PackedBitTensor::from_slice(vec![m], m, &b);

    let float_dot = |x: &[f32], y: &[f32]| -> f32 {
        let mut acc = 0.0f32;
        for (p, q) in x.iter().zip(y) {
            acc += p * q;
        }
        acc
    };
    let packed = xnor_popcount_dot(pa.row(0), pb.row(0))?;
    let float = float_dot(&a, &b);
    if packed as f32 != float {
        return Err(Error::Domain {
            op: "bench_dot",
            detail: format!("packed {packed} != float {float}"),
        });
    }

    // Enough inner calls that one sample spans roughly 64k element-ops.
    let inner = (65_536 / m).max(1);
    let time = |f: &dyn Fn() -> f64| -> f64 {
        let mut samples: Vec<f64> = (0..repetitions.max(1) + 2)
            .map(|_| {
                let start = Instant::now();
                let mut sink = 0.0;
                for _ in 0..inner {
                    sink += f();
                }
                black_box(sink);
                start.elapsed().as_nanos() as f64 / inner as f64
            })
            .skip(2) // warmup
            .collect();
        samples.sort_by(|x, y| x.total_cmp(y));
        samples[samples.len() / 2]
    };
    let packed_ns = time(&|| dot_unchecked(black_box(pa.row(0).words), black_box(pb.row(0).words), m) as f64);
    let float_ns = time(&|| float_dot(black_box(&a), black_box(&b)) as f64);
    Ok(DotBench {
        m,
        packed_ns,
        float_ns,
        speedup: float_ns / packed_ns.max(f64::MIN_POSITIVE),
    })
}
