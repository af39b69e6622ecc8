use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Command, ExperimentConfig};
use crate::bitkernel::{bench_dot, binary_conv_ops, count_ops, float_conv_serialized_len, PackedBinaryConv};
use crate::checkpoint;
use crate::data::{Dataset, DatasetSpec, Split};
use crate::model::{InferencePath, Model, ModelSpec};
use crate::rebnn::{evaluate, GammaMode, Trainer};
use crate::telemetry::{export_csv, export_json, EpochRecord, HistogramRecord, IterationRecord, RunLog, TelemetrySink};
use crate::{Error, Result};

pub const CHECKPOINT_FILE: &str = "model.rbnn";
pub const CSV_FILE: &str = "telemetry.csv";
pub const JSON_FILE: &str = "telemetry.json";

/// Result of one training run.
pub struct TrainOutcome {
    pub model: Model,
    pub log: RunLog,
    pub accuracy: f64,
}

/// Forwards to a [`RunLog`] and prints one line per epoch.
struct Progress<'a> {
    log: &'a mut RunLog,
    out: &'a mut dyn Write,
}

impl TelemetrySink for Progress<'_> {
    fn record_iteration(&mut self, record: IterationRecord) {
        self.log.record_iteration(record);
    }

    fn record_epoch(&mut self, r: EpochRecord) {
        let seq: u64 = r.layers.iter().map(|l| l.sequential_count).sum();
        let n: u64 = r.layers.iter().map(|l| l.weight_count).sum::<u64>().max(1);
        let _ = write!(
            self.out,
            "epoch {:>3}  loss {:.4}  recon {:.3e}  seq-osc {:.3e}",
            r.epoch,
            r.train_loss,
            r.reconstruction_loss,
            seq as f64 / n as f64
        );
        if let Some(a) = r.eval_accuracy {
            let _ = write!(self.out, "  acc {:.2}%", 100.0 * a);
        }
        let _ = writeln!(self.out);
        self.log.record_epoch(r);
    }

    fn record_histogram(&mut self, record: HistogramRecord) {
        self.log.record_histogram(record);
    }
}

fn load_data(spec: &DatasetSpec, seed: u64) -> Result<Dataset> {
    spec.load(seed)
}

/// Trains `cfg` end to end. When `output_dir` is given the checkpoint and
/// telemetry files are written there.
pub fn run_training(cfg: &ExperimentConfig, output_dir: Option<&Path>, out: &mut dyn Write) -> Result<TrainOutcome> {
    cfg.train.validate()?;
    let train = load_data(&cfg.dataset, cfg.train.seed)?;
    let eval = cfg
        .eval_dataset
        .as_ref()
        .map(|s| load_data(s, cfg.train.seed))
        .transpose()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    let model = Model::desk_cnn(
        train.sample_shape(),
        train.classes(),
        &cfg.model,
        cfg.train.initial_gamma() as f32,
        &mut rng,
    )?;
    let mut trainer = Trainer::new(model, cfg.train.clone(), train.len())?.with_histogram_every(cfg.histogram_every);
    let created = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_millis())
        .unwrap_or(0);
    let mut log = RunLog::new(format!("{}-{created}", cfg.name), cfg.to_value(), trainer.layer_infos());
    let epochs = trainer.fit(
        &train,
        Some(eval.as_ref().unwrap_or(&train)),
        &mut Progress { log: &mut log, out },
    )?;
    let accuracy = epochs.last().and_then(|e| e.eval_accuracy).unwrap_or(0.0);
    let model = trainer.into_model();
    if let Some(dir) = output_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(format!("create {}", dir.display()), e))?;
        checkpoint::save(&dir.join(CHECKPOINT_FILE), &model, &cfg.to_value(), true)?;
        export_csv(&log, &dir.join(CSV_FILE))?;
        export_json(&log, &dir.join(JSON_FILE))?;
        let _ = writeln!(out, "wrote {}", dir.display());
    }
    Ok(TrainOutcome { model, log, accuracy })
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub mode: GammaMode,
    pub final_loss: f64,
    pub accuracy: f64,
    /// Sequential oscillation ratio pooled over all layers and iterations.
    pub mean_sequential_ratio: f64,
}

/// Trains once per configured γ mode with identical seeds.
pub fn run_ablation(
    cfg: &ExperimentConfig,
    output_dir: Option<&Path>,
    out: &mut dyn Write,
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for &mode in &cfg.ablation_modes {
        let mut run_cfg = cfg.clone();
        run_cfg.train.gamma_mode = mode;
        run_cfg.name = format!("{}-{}", cfg.name, mode.label());
        let _ = writeln!(out, "== gamma mode {}", mode.label());
        let dir = output_dir.map(|d| d.join(mode.label()));
        let outcome = run_training(&run_cfg, dir.as_deref(), out)?;
        let seq: u64 = outcome
            .log
            .epochs
            .iter()
            .flat_map(|e| &e.layers)
            .map(|l| l.sequential_count)
            .sum();
        let n: u64 = outcome
            .log
            .epochs
            .iter()
            .flat_map(|e| &e.layers)
            .map(|l| l.weight_count)
            .sum();
        rows.push(AblationRow {
            mode,
            final_loss: outcome.log.epochs.last().map_or(f64::NAN, |e| e.train_loss),
            accuracy: outcome.accuracy,
            mean_sequential_ratio: if n == 0 { 0.0 } else { seq as f64 / n as f64 },
        });
    }
    let _ = writeln!(
        out,
        "{:<16} {:>12} {:>10} {:>14}",
        "mode", "final_loss", "accuracy", "mean_seq_osc"
    );
    for r in &rows {
        let _ = writeln!(
            out,
            "{:<16} {:>12.5} {:>9.2}% {:>14.4e}",
            r.mode.label(),
            r.final_loss,
            100.0 * r.accuracy,
            r.mean_sequential_ratio
        );
    }
    if let Some(dir) = output_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(format!("create {}", dir.display()), e))?;
        let mut csv = String::from("mode,final_loss,accuracy,mean_sequential_ratio\n");
        for r in &rows {
            csv.push_str(&format!(
                "{},{},{},{}\n",
                r.mode.label(),
                r.final_loss,
                r.accuracy,
                r.mean_sequential_ratio
            ));
        }
        let p = dir.join("ablation.csv");
        fs::write(&p, csv).map_err(|e| Error::io(format!("write {}", p.display()), e))?;
    }
    Ok(rows)
}

#[allow(clippy::too_many_arguments)]
fn run_eval(ckpt: &Path, spec: DatasetSpec, float_path: bool, check_paths: bool, out: &mut dyn Write) -> Result<()> {
    let ck = checkpoint::load(ckpt)?;
    let seed = ck.config.pointer("/train/seed").and_then(|v| v.as_u64()).unwrap_or(0);
    let data = spec.load(seed)?;
    if data.sample_shape().as_slice() != ck.model.input_shape() {
        return Err(Error::dim(
            "eval",
            format!(
                "dataset samples {:?} vs model input {:?}",
                data.sample_shape(),
                ck.model.input_shape()
            ),
        ));
    }
    if check_paths {
        let idx: Vec<usize> = (0..data.len()).collect();
        for chunk in idx.chunks(256) {
            let (x, _) = data.batch(chunk)?;
            let a = ck.model.forward_eval(&x, InferencePath::Float)?;
            let b = ck.model.forward_eval(&x, InferencePath::Packed)?;
            if a.data().iter().zip(b.data()).any(|(p, q)| p.to_bits() != q.to_bits()) {
                return Err(Error::Domain {
                    op: "eval",
                    detail: "float and packed logits differ".into(),
                });
            }
        }
        let _ = writeln!(
            out,
            "paths: float and packed logits identical on {} samples",
            data.len()
        );
    }
    let path = if float_path {
        InferencePath::Float
    } else {
        InferencePath::Packed
    };
    let acc = evaluate(&ck.model, &data, path, 256)?;
    let _ = writeln!(out, "accuracy {:.4} ({} samples, {:?} path)", acc, data.len(), path);
    Ok(())
}

fn run_bench(sizes: &[usize], reps: usize, out: &mut dyn Write) -> Result<()> {
    let model = Model::desk_cnn(
        [1, 28, 28],
        10,
        &ModelSpec::default(),
        1e-4,
        &mut ChaCha8Rng::seed_from_u64(0),
    )?;
    let report = count_ops(&model)?;
    let _ = writeln!(
        out,
        "{:<28} {:>12} {:>10} {:>10} {:>10}",
        "layer", "BOPs", "FLOPs", "bytes", "bytes_f32"
    );
    for l in &report.layers {
        let _ = writeln!(
            out,
            "{:<28} {:>12} {:>10} {:>10} {:>10}",
            l.name, l.bops, l.flops, l.bytes_binary, l.bytes_float
        );
    }
    let _ = writeln!(
        out,
        "total: {} BOPs, {} FLOPs, OPs = BOPs/64 + FLOPs = {:.0}; model {} B vs {} B float ({:.2}x)",
        report.bops,
        report.flops,
        report.total_ops,
        report.model_bytes_binary,
        report.model_bytes_float,
        report.compression_ratio()
    );
    let big = binary_conv_ops(256, 256, 3, 1, 1, 14, 14)?;
    let _ = writeln!(
        out,
        "256x256x3x3 conv: {} B packed vs {} B float ({:.2}x)",
        PackedBinaryConv::<f32>::serialized_len(256, 256 * 9),
        float_conv_serialized_len(256, 256 * 9),
        big.bytes_float as f64 / big.bytes_binary as f64
    );
    for &m in sizes {
        let b = bench_dot(m, reps)?;
        let _ = writeln!(
            out,
            "dot M={:<7} packed {:>9.1} ns  float {:>9.1} ns  speedup {:.1}x",
            b.m, b.packed_ns, b.float_ns, b.speedup
        );
    }
    Ok(())
}

fn out_dir(cfg: &ExperimentConfig, over: Option<PathBuf>) -> PathBuf {
    over.unwrap_or_else(|| cfg.output_dir.join(&cfg.name))
}

pub(super) fn dispatch(cmd: Command, out: &mut dyn Write) -> Result<()> {
    match cmd {
        Command::Train { config, output } => {
            let cfg = ExperimentConfig::load(&config)?;
            let dir = out_dir(&cfg, output);
            let outcome = run_training(&cfg, Some(&dir), out)?;
            let _ = writeln!(out, "final accuracy {:.4}", outcome.accuracy);
            Ok(())
        }
        Command::Eval {
            checkpoint,
            dataset,
            path,
            test_split,
            subset,
            float_path,
            check_paths,
        } => {
            let spec = DatasetSpec {
                name: dataset.into(),
                path,
                split: if test_split { Split::Test } else { Split::Train },
                subset_size: subset,
                normalization: None,
            };
            run_eval(&checkpoint, spec, float_path, check_paths, out)
        }
        Command::AblateGamma { config, output } => {
            let cfg = ExperimentConfig::load(&config)?;
            let dir = out_dir(&cfg, output);
            run_ablation(&cfg, Some(&dir), out).map(|_| ())
        }
        Command::Bench { sizes, reps } => run_bench(&sizes, reps, out),
    }
}
