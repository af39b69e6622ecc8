//! Central-difference checks of every hand-written backward pass, in f64.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rebnn::binarize::{binary_conv_backward, binary_conv_forward_with_signs, ste_weight_grad, BinaryLayer};
use rebnn::numcore::{
    batchnorm_backward, batchnorm_forward, conv2d_backward, conv2d_forward, hardtanh_backward, hardtanh_forward,
    linear_backward, linear_forward, softmax_xent, BatchNormParams, Tensor,
};
use rebnn::rebnn::{alpha_grad, reconstruction_loss, reconstruction_weight_grad, resilient_grad};

const H: f64 = 1e-6;
const TOL: f64 = 1e-6;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| r.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

/// Central difference of `f` along every coordinate of `x`.
fn numeric_grad(x: &Tensor<f64>, mut f: impl FnMut(&Tensor<f64>) -> f64) -> Vec<f64> {
    (0..x.len())
        .map(|i| {
            let mut p = x.clone();
            p.data_mut()[i] += H;
            let mut m = x.clone();
            m.data_mut()[i] -= H;
            (f(&p) - f(&m)) / (2.0 * H)
        })
        .collect()
}

fn assert_close(analytic: &[f64], numeric: &[f64], what: &str) {
    assert_eq!(analytic.len(), numeric.len(), "{what}: length");
    for (i, (a, n)) in analytic.iter().zip(numeric).enumerate() {
        let scale = 1.0f64.max(a.abs()).max(n.abs());
        assert!((a - n).abs() <= TOL * scale, "{what}[{i}]: analytic {a} vs numeric {n}");
    }
}

#[test]
fn conv2d_gradients_match_finite_differences() {
    let mut r = rng(1);
    for (stride, pad) in [(1, 1), (2, 1), (1, 0)] {
        let x = random(&[2, 4, 4], &mut r);
        let w = random(&[2, 2, 3, 3], &mut r);
        let out = conv2d_forward(&x, &w, stride, pad).unwrap();
        let probe = random(out.shape(), &mut r);
        let g = conv2d_backward(&x, &w, &probe, stride, pad).unwrap();
        let nw = numeric_grad(&w, |w| dot(&conv2d_forward(&x, w, stride, pad).unwrap(), &probe));
        let nx = numeric_grad(&x, |x| dot(&conv2d_forward(x, &w, stride, pad).unwrap(), &probe));
        assert_close(g.d_weight.data(), &nw, "conv d_weight");
        assert_close(g.d_input.data(), &nx, "conv d_input");
    }
}

#[test]
fn linear_gradients_match_finite_differences() {
    let mut r = rng(2);
    let x = random(&[3, 5], &mut r);
    let w = random(&[4, 5], &mut r);
    let b: Vec<f64> = (0..4).map(|_| r.gen_range(-1.0..1.0)).collect();
    let probe = random(&[3, 4], &mut r);
    let g = linear_backward(&x, &w, &probe).unwrap();
    let nw = numeric_grad(&w, |w| dot(&linear_forward(&x, w, &b).unwrap(), &probe));
    let nx = numeric_grad(&x, |x| dot(&linear_forward(x, &w, &b).unwrap(), &probe));
    let bt = Tensor::new(vec![4], b.clone()).unwrap();
    let nb = numeric_grad(&bt, |bt| dot(&linear_forward(&x, &w, bt.data()).unwrap(), &probe));
    assert_close(g.d_weight.data(), &nw, "linear d_weight");
    assert_close(g.d_input.data(), &nx, "linear d_input");
    assert_close(&g.d_bias, &nb, "linear d_bias");
}

#[test]
fn batchnorm_gradients_match_finite_differences() {
    let mut r = rng(3);
    let x = random(&[4, 3, 2, 2], &mut r);
    let mut params = BatchNormParams::<f64>::new(3);
    params.weight = vec![0.7, 1.3, -0.4];
    params.bias = vec![0.1, -0.2, 0.3];
    let probe = random(x.shape(), &mut r);
    let (_, cache) = batchnorm_forward(&x, &params, true).unwrap();
    let g = batchnorm_backward(&cache, &params, &probe).unwrap();
    let loss = |x: &Tensor<f64>, p: &BatchNormParams<f64>| dot(&batchnorm_forward(x, p, true).unwrap().0, &probe);
    assert_close(g.d_input.data(), &numeric_grad(&x, |x| loss(x, &params)), "bn d_input");
    let gw = Tensor::new(vec![3], params.weight.clone()).unwrap();
    let nw = numeric_grad(&gw, |t| {
        let mut p = params.clone();
        p.weight = t.data().to_vec();
        loss(&x, &p)
    });
    assert_close(&g.d_weight, &nw, "bn d_weight");
    let gb = Tensor::new(vec![3], params.bias.clone()).unwrap();
    let nb = numeric_grad(&gb, |t| {
        let mut p = params.clone();
        p.bias = t.data().to_vec();
        loss(&x, &p)
    });
    assert_close(&g.d_bias, &nb, "bn d_bias");
}

#[test]
fn softmax_cross_entropy_gradient_matches_finite_differences() {
    let mut r = rng(4);
    let z = random(&[6], &mut r);
    for label in [0, 3, 5] {
        let (_, g) = softmax_xent(z.data(), label).unwrap();
        let n = numeric_grad(&z, |z| softmax_xent(z.data(), label).unwrap().0);
        assert_close(&g, &n, "softmax");
    }
}

#[test]
fn hardtanh_gradient_matches_away_from_kinks() {
    let x = Tensor::new(vec![6], vec![-1.7, -0.9, -0.2, 0.3, 0.95, 2.4]).unwrap();
    let probe = Tensor::new(vec![6], vec![0.5, -1.0, 2.0, 0.25, -0.75, 1.5]).unwrap();
    let g = hardtanh_backward(&x, &probe).unwrap();
    let n = numeric_grad(&x, |x| dot(&hardtanh_forward(x), &probe));
    assert_close(g.data(), &n, "hardtanh");
}

fn away_from_zero(t: &mut Tensor<f64>) {
    for v in t.data_mut() {
        if v.abs() < 0.05 {
            *v = 0.3_f64.copysign(*v);
        }
    }
}

/// With signs fixed, the binary conv is a real conv of `sign(x)` with
/// `α ∘ sign(w)`, so `∂L/∂ŵ` and `∂L/∂α` have exact finite differences.
#[test]
fn binary_conv_scaled_weight_and_alpha_gradients() {
    let mut r = rng(5);
    let mut w = random(&[3, 2, 3, 3], &mut r);
    away_from_zero(&mut w);
    let layer = BinaryLayer::new(w, 1e-4).unwrap();
    let x = random(&[2, 5, 5], &mut r);
    let sx = x.map(|v| if v >= 0.0 { 1.0 } else { -1.0 });
    let w_signs = layer.weight_signs();
    let (out, cache) = binary_conv_forward_with_signs(&x, &layer, &w_signs, 1, 0).unwrap();
    let probe = random(out.shape(), &mut r);
    let g = binary_conv_backward(&cache, &layer, &w_signs, &probe).unwrap();

    let m = layer.fan_in();
    let mut w_hat = w_signs.clone();
    for (i, row) in w_hat.data_mut().chunks_exact_mut(m).enumerate() {
        row.iter_mut().for_each(|v| *v *= layer.alpha[i]);
    }
    assert_close(
        conv2d_forward(&sx, &w_hat, 1, 0).unwrap().data(),
        out.data(),
        "binary forward",
    );
    let n_what = numeric_grad(&w_hat, |wh| dot(&conv2d_forward(&sx, wh, 1, 0).unwrap(), &probe));
    assert_close(g.d_weight.data(), &n_what, "binary d_what");

    let alpha = Tensor::new(vec![layer.c_out()], layer.alpha.clone()).unwrap();
    let n_alpha = numeric_grad(&alpha, |a| {
        let mut l = layer.clone();
        l.alpha = a.data().to_vec();
        dot(
            &binary_conv_forward_with_signs(&x, &l, &w_signs, 1, 0).unwrap().0,
            &probe,
        )
    });
    assert_close(g.d_alpha.as_deref().unwrap(), &n_alpha, "binary d_alpha");
}

fn recon_layer(seed: u64) -> BinaryLayer<f64> {
    let mut r = rng(seed);
    let mut w = random(&[3, 2, 2, 2], &mut r);
    away_from_zero(&mut w);
    let mut l = BinaryLayer::new(w, 0.0).unwrap();
    l.gamma = vec![0.3, 1.1, 0.05];
    l.alpha = vec![0.4, 0.6, 0.9];
    l
}

#[test]
fn reconstruction_loss_weight_gradient_with_fixed_signs() {
    let layer = recon_layer(6);
    let w = layer.latent_weight.clone();
    let n = numeric_grad(&w, |w| {
        let mut l = layer.clone();
        l.latent_weight = w.clone();
        reconstruction_loss(&l)
    });
    let analytic: Vec<f64> = (0..layer.c_out())
        .flat_map(|i| reconstruction_weight_grad(&layer, i))
        .collect();
    assert_close(&analytic, &n, "L_R d_w");
}

#[test]
fn reconstruction_loss_alpha_gradient_has_negative_sign() {
    let layer = recon_layer(7);
    let alpha = Tensor::new(vec![3], layer.alpha.clone()).unwrap();
    let n = numeric_grad(&alpha, |a| {
        let mut l = layer.clone();
        l.alpha = a.data().to_vec();
        reconstruction_loss(&l)
    });
    let analytic: Vec<f64> = (0..3).map(|i| alpha_grad(&layer, i, 0.0)).collect();
    assert_close(&analytic, &n, "L_R d_alpha");
}

#[test]
fn resilient_gradient_is_ste_plus_reconstruction_term() {
    let layer = recon_layer(8);
    let mut r = rng(9);
    let m = layer.fan_in();
    for i in 0..layer.c_out() {
        let u: Vec<f64> = (0..m).map(|_| r.gen_range(-1.0..1.0)).collect();
        let res = resilient_grad(&u, &layer, i);
        let ste = ste_weight_grad(&u, layer.alpha[i], layer.channel(i));
        let rec = reconstruction_weight_grad(&layer, i);
        let sum: Vec<f64> = ste.iter().zip(&rec).map(|(a, b)| a + b).collect();
        assert_close(&res, &sum, "resilient");
    }
}
