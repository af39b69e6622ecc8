use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{
    alpha_grad, detect_oscillation, gamma_update, lr_at, reconstruction_loss, resilient_grad, sgd_step, sgd_update,
    BinaryMomentum, GammaMode, OscillationRecord, TrainConfig,
};
use crate::binarize::ste_weight_grad;
use crate::data::Dataset;
use crate::model::{InferencePath, Layer, Model, ParamGrad};
use crate::numcore::{softmax_xent, Tensor};
use crate::telemetry::{snapshot_histogram, EpochAccumulator, EpochRecord, IterationRecord, LayerInfo, TelemetrySink};
use crate::{Error, Result};

enum Velocity {
    None,
    Real(Vec<Vec<f32>>),
    Binary(BinaryMomentum),
}

/// Single-threaded minibatch trainer. Given the same model, config and
/// data, two runs produce bit-identical parameters and telemetry.
pub struct Trainer {
    model: Model,
    config: TrainConfig,
    velocity: Vec<Velocity>,
    step: usize,
    total_steps: usize,
    shuffle_rng: ChaCha8Rng,
    histogram_every: usize,
}

impl Trainer {
    /// `train_len` fixes the number of steps per epoch for the schedule.
    pub fn new(mut model: Model, config: TrainConfig, train_len: usize) -> Result<Self> {
        if config.batch_size == 0 || config.epochs == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if train_len == 0 {
            return Err(Error::MissingDataset("training split is empty".into()));
        }
        let gamma = config.initial_gamma() as f32;
        let velocity = model
            .layers_mut()
            .iter_mut()
            .map(|l| match l {
                Layer::Conv(c) => Velocity::Real(vec![vec![0.0; c.weight.len()]]),
                Layer::BinaryConv(b) => {
                    b.layer.gamma.iter_mut().for_each(|g| *g = gamma);
                    b.layer.reset_sign_history();
                    Velocity::Binary(BinaryMomentum::zeros(&b.layer))
                }
                Layer::BatchNorm(bn) => Velocity::Real(vec![vec![0.0; bn.channels()]; 2]),
                Layer::Linear(l) => Velocity::Real(vec![vec![0.0; l.weight.len()], vec![0.0; l.bias.len()]]),
                Layer::Hardtanh | Layer::Flatten => Velocity::None,
            })
            .collect();
        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed);
        shuffle_rng.set_stream(1);
        Ok(Self {
            model,
            total_steps: config.epochs * train_len.div_ceil(config.batch_size),
            config,
            velocity,
            step: 0,
            shuffle_rng,
            histogram_every: 1,
        })
    }

    /// Snapshot latent-weight histograms every `n` epochs (0 disables).
    pub fn with_histogram_every(mut self, n: usize) -> Self {
        self.histogram_every = n;
        self
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn into_model(self) -> Model {
        self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn layer_infos(&self) -> Vec<LayerInfo> {
        self.model
            .binary_layers()
            .enumerate()
            .map(|(i, b)| LayerInfo {
                layer: i,
                name: format!("binary_conv{i}"),
                weight_count: b.layer.latent_weight.len(),
            })
            .collect()
    }

    fn non_finite(&self, iteration: usize) -> Error {
        Error::NonFinite {
            layer: self.model.first_non_finite_layer().unwrap_or_else(|| "loss".into()),
            iteration,
        }
    }

    /// One optimisation step on a batch.
    pub fn train_batch(
        &mut self,
        x: &Tensor,
        labels: &[usize],
        epoch: usize,
        iteration: usize,
    ) -> Result<IterationRecord> {
        let batch = labels.len();
        let (logits, trace) = self.model.forward_train(x)?;
        let classes = logits.shape()[1];
        let scale = 1.0 / batch as f32;
        let mut task_loss = 0.0f64;
        let mut d_logits = Vec::with_capacity(batch * classes);
        for (b, &label) in labels.iter().enumerate() {
            let (loss, grad) = softmax_xent(logits.outer(b), label)?;
            task_loss += loss as f64;
            d_logits.extend(grad.into_iter().map(|g| g * scale));
        }
        task_loss /= batch as f64;
        let mode = self.config.gamma_mode;
        let recon_loss: f64 = if mode == GammaMode::Off {
            0.0
        } else {
            self.model
                .binary_layers()
                .map(|b| reconstruction_loss(&b.layer) as f64)
                .sum()
        };
        if !(task_loss.is_finite() && recon_loss.is_finite()) {
            return Err(self.non_finite(iteration));
        }
        let grads = self
            .model
            .backward(&trace, &Tensor::new(vec![batch, classes], d_logits)?)?;
        drop(trace);

        let lr = lr_at(self.config.schedule, self.config.eta, self.step, self.total_steps);
        let (mu, wd) = (self.config.momentum as f32, self.config.weight_decay as f32);
        let bounds = self.config.gamma_bounds();
        let mut oscillation = Vec::new();
        for ((layer, grad), vel) in self.model.layers_mut().iter_mut().zip(&grads).zip(&mut self.velocity) {
            match (layer, grad, vel) {
                (Layer::Conv(c), ParamGrad::Conv { d_weight }, Velocity::Real(v)) => {
                    sgd_update(c.weight.data_mut(), d_weight, &mut v[0], lr as f32, mu, wd);
                }
                (Layer::BatchNorm(bn), ParamGrad::BatchNorm { d_weight, d_bias }, Velocity::Real(v)) => {
                    sgd_update(&mut bn.weight, d_weight, &mut v[0], lr as f32, mu, wd);
                    sgd_update(&mut bn.bias, d_bias, &mut v[1], lr as f32, mu, wd);
                }
                (Layer::Linear(l), ParamGrad::Linear { d_weight, d_bias }, Velocity::Real(v)) => {
                    sgd_update(l.weight.data_mut(), d_weight, &mut v[0], lr as f32, mu, wd);
                    sgd_update(&mut l.bias, d_bias, &mut v[1], lr as f32, mu, wd);
                }
                (Layer::BinaryConv(bc), ParamGrad::Binary { d_what, d_alpha }, Velocity::Binary(state)) => {
                    let layer = &mut bc.layer;
                    let m = layer.fan_in();
                    let max_grad: Vec<f32> = d_what
                        .chunks_exact(m)
                        .map(|ch| ch.iter().fold(0.0f32, |a, g| a.max(g.abs())))
                        .collect();
                    let mut weight_grad = Vec::with_capacity(d_what.len());
                    let mut a_grad = Vec::with_capacity(layer.c_out());
                    for (i, upstream) in d_what.chunks_exact(m).enumerate() {
                        if mode == GammaMode::Off {
                            weight_grad.extend(ste_weight_grad(upstream, layer.alpha[i], layer.channel(i)));
                            a_grad.push(d_alpha[i]);
                        } else {
                            weight_grad.extend(resilient_grad(upstream, layer, i));
                            a_grad.push(alpha_grad(layer, i, d_alpha[i]));
                        }
                    }
                    sgd_step(layer, &weight_grad, &a_grad, state, &self.config, lr);

                    let curr = layer.current_signs();
                    let counts = detect_oscillation(&layer.prev_prev_sign, &layer.prev_sign, &curr)?;
                    match mode {
                        GammaMode::Adaptive => {
                            for (i, g) in layer.gamma.iter_mut().enumerate() {
                                *g = gamma_update(layer.prev_sign.row(i), curr.row(i), max_grad[i], bounds)?;
                            }
                        }
                        GammaMode::MaxGradOnly => {
                            for (g, &mg) in layer.gamma.iter_mut().zip(&max_grad) {
                                *g = super::clamp_gamma(mg, bounds);
                            }
                        }
                        GammaMode::Constant(_) | GammaMode::Off => {}
                    }
                    layer.prev_prev_sign = std::mem::replace(&mut layer.prev_sign, curr);
                    oscillation.push(OscillationRecord::new(
                        oscillation.len(),
                        iteration,
                        &counts,
                        max_grad.iter().map(|&g| g as f64).collect(),
                    ));
                }
                (Layer::Hardtanh | Layer::Flatten, ParamGrad::None, _) => {}
                (Layer::Conv(_), ParamGrad::None, _) => {}
                _ => unreachable!("gradient kinds follow layer kinds"),
            }
        }
        if self.model.first_non_finite_layer().is_some() {
            return Err(self.non_finite(iteration));
        }
        self.step += 1;
        Ok(IterationRecord {
            epoch,
            iteration,
            task_loss,
            reconstruction_loss: recon_loss,
            lr,
            oscillation,
        })
    }

    /// One pass over `data` in a seeded shuffled order. Iteration numbers
    /// are global across epochs.
    pub fn train_epoch(&mut self, data: &Dataset, epoch: usize, sink: &mut dyn TelemetrySink) -> Result<EpochRecord> {
        if data.is_empty() {
            return Err(Error::MissingDataset("training split is empty".into()));
        }
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut self.shuffle_rng);
        let mut acc = EpochAccumulator::new(self.model.binary_layer_count());
        for chunk in order.chunks(self.config.batch_size) {
            let (x, y) = data.batch(chunk)?;
            let record = self.train_batch(&x, &y, epoch, self.step)?;
            acc.add(&record, chunk.len());
            sink.record_iteration(record);
        }
        if self.histogram_every > 0 && (epoch + 1).is_multiple_of(self.histogram_every) {
            for (i, b) in self.model.binary_layers().enumerate() {
                sink.record_histogram(snapshot_histogram(&b.layer, i, epoch));
            }
        }
        Ok(acc.finish(epoch, self.model.binary_layers().map(|b| &b.layer)))
    }

    /// Runs every configured epoch. When `eval` is given, accuracy on it is
    /// attached to the final epoch record.
    pub fn fit(
        &mut self,
        train: &Dataset,
        eval: Option<&Dataset>,
        sink: &mut dyn TelemetrySink,
    ) -> Result<Vec<EpochRecord>> {
        let mut epochs = Vec::with_capacity(self.config.epochs);
        for epoch in 0..self.config.epochs {
            let mut record = self.train_epoch(train, epoch, sink)?;
            if epoch + 1 == self.config.epochs {
                if let Some(ds) = eval {
                    record.eval_accuracy = Some(evaluate(&self.model, ds, InferencePath::Packed, 256)?);
                }
            }
            sink.record_epoch(record.clone());
            epochs.push(record);
        }
        Ok(epochs)
    }
}

/// Top-1 accuracy of `model` on `data` using inference-mode batch norm.
pub fn evaluate(model: &Model, data: &Dataset, path: InferencePath, batch_size: usize) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::MissingDataset("evaluation split is empty".into()));
    }
    let packed = match path {
        InferencePath::Packed => Some(model.packed_kernels()),
        InferencePath::Float => None,
    };
    let mut correct = 0usize;
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let (x, y) = data.batch(chunk)?;
        let logits = model.forward_eval_with(&x, packed.as_deref())?;
        for (b, &label) in y.iter().enumerate() {
            let row = logits.outer(b);
            let pred = row
                .iter()
                .enumerate()
                .fold(0, |best, (k, &v)| if v > row[best] { k } else { best });
            correct += (pred == label) as usize;
        }
    }
    Ok(correct as f64 / data.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic;
    use crate::model::ModelSpec;
    use crate::telemetry::{NullSink, RunLog};

    fn small_model(seed: u64) -> Model {
        let spec = ModelSpec {
            widths: [4, 8, 8],
            strides: [1, 2, 2],
            binary: true,
        };
        Model::desk_cnn([1, 8, 8], 4, &spec, 1e-4, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    fn config(mode: GammaMode) -> TrainConfig {
        TrainConfig {
            epochs: 2,
            batch_size: 16,
            gamma_mode: mode,
            seed: 3,
            ..TrainConfig::default()
        }
    }

    fn run(mode: GammaMode) -> (Model, RunLog) {
        let data = synthetic(64, [1, 8, 8], 4, 9).unwrap();
        let mut t = Trainer::new(small_model(5), config(mode), data.len()).unwrap();
        let mut log = RunLog::new("t", serde_json::Value::Null, t.layer_infos());
        t.fit(&data, None, &mut log).unwrap();
        (t.into_model(), log)
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let (m1, l1) = run(GammaMode::Adaptive);
        let (m2, l2) = run(GammaMode::Adaptive);
        assert_eq!(m1, m2);
        assert_eq!(l1.iterations, l2.iterations);
        assert_eq!(l1.epochs, l2.epochs);
    }

    #[test]
    fn constant_zero_gamma_replays_plain_ste() {
        let (m_off, l_off) = run(GammaMode::Off);
        let (m_zero, l_zero) = run(GammaMode::Constant(0.0));
        assert_eq!(m_off, m_zero);
        assert_eq!(l_off.iterations, l_zero.iterations);
    }

    #[test]
    fn zero_learning_rate_keeps_weights_and_counts_no_flips() {
        let data = synthetic(32, [1, 8, 8], 4, 1).unwrap();
        let model = small_model(2);
        let before: Vec<_> = model.binary_layers().map(|b| b.layer.latent_weight.clone()).collect();
        let cfg = TrainConfig {
            eta: 0.0,
            ..config(GammaMode::Adaptive)
        };
        let mut t = Trainer::new(model, cfg, data.len()).unwrap();
        let mut log = RunLog::new("t", serde_json::Value::Null, vec![]);
        t.fit(&data, None, &mut log).unwrap();
        let after: Vec<_> = t
            .model()
            .binary_layers()
            .map(|b| b.layer.latent_weight.clone())
            .collect();
        assert_eq!(before, after);
        assert!(log
            .iterations
            .iter()
            .flat_map(|r| &r.oscillation)
            .all(|o| o.flip_count == 0));
    }

    #[test]
    fn adaptive_gamma_stays_in_bounds() {
        let (m, _) = run(GammaMode::Adaptive);
        for b in m.binary_layers() {
            assert!(b.layer.gamma.iter().all(|g| (1e-5f32..=2e-4f32).contains(g)));
        }
    }

    #[test]
    fn iterations_are_strictly_increasing() {
        let (_, log) = run(GammaMode::Adaptive);
        assert_eq!(log.iterations.len(), 2 * 4);
        assert!(log.iterations.windows(2).all(|w| w[0].iteration < w[1].iteration));
        for r in &log.iterations {
            for o in &r.oscillation {
                assert!(o.sequential_count <= o.flip_count);
            }
        }
    }

    #[test]
    fn diverging_run_reports_non_finite() {
        let data = synthetic(32, [1, 8, 8], 4, 1).unwrap();
        let cfg = TrainConfig {
            eta: 1e30,
            schedule: super::super::Schedule::Constant,
            ..config(GammaMode::Adaptive)
        };
        let mut t = Trainer::new(small_model(2), cfg, data.len()).unwrap();
        match t.fit(&data, None, &mut NullSink) {
            Err(Error::NonFinite { .. }) => {}
            other => panic!("expected NonFinite, got {other:?}"),
        }
    }

    #[test]
    fn float_and_packed_accuracy_agree() {
        let (m, _) = run(GammaMode::Adaptive);
        let data = synthetic(64, [1, 8, 8], 4, 9).unwrap();
        let a = evaluate(&m, &data, InferencePath::Float, 16).unwrap();
        let b = evaluate(&m, &data, InferencePath::Packed, 7).unwrap();
        assert_eq!(a, b);
    }
}
