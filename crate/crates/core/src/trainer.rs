//! Epoch loop: per-case masks, stochastic forward, backward, momentum step
//! and max-norm projection; mean-network evaluation; metrics logging.
//!
//! A run draws from three independent streams derived from the seed: one
//! for initialization, one for the minibatch order and one for dropout
//! masks. Switching dropout off therefore leaves the minibatch order
//! unchanged.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use crate::checkpoint::{checkpoint_save, Checkpoint};
use crate::config::TrainConfig;
use crate::data::{load_idx, minibatch_iter, standardize, LabeledDataset};
use crate::dropout::{sample_case_masks, to_mean_network, DropoutSpec};
use crate::error::{Error, Result};
use crate::layers::softmax_xent;
use crate::network::{network_backward, network_forward, Mode, Network, NetworkSpec, ParamRole};
use crate::optimizer::{lr_at, momentum_at, sgd_update, unit_sq_norms, OptimizerState};
use crate::rng::RandomSource;
use crate::tensor::Tensor;

pub const METRICS_HEADER: &str = "epoch,lr,momentum,train_xent,train_err,test_err,wallclock_s";

/// Slack allowed when checking the max-norm bound at epoch boundaries.
pub const MAX_NORM_SLACK: f64 = 1e-9;

const EVAL_CHUNK: usize = 1000;

/// One line of the metrics log. `epoch` is the 0-based index whose learning
/// rate and momentum were used; `train_err` is measured on the stochastic
/// nets seen during the epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub epoch: usize,
    pub lr: f64,
    pub momentum: f64,
    pub train_xent: f64,
    pub train_err: f64,
    /// Mean-network test error, on evaluation epochs only.
    pub test_err: Option<f64>,
    pub wallclock_s: f64,
}

impl MetricsRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{:.3}",
            self.epoch,
            self.lr,
            self.momentum,
            self.train_xent,
            self.train_err,
            self.test_err.map(|e| e.to_string()).unwrap_or_default(),
            self.wallclock_s
        )
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = j;
        }
    }
    best
}

/// Number of rows of `scores` whose argmax differs from the label.
pub fn count_errors(scores: &Tensor, labels: &[usize]) -> usize {
    labels
        .iter()
        .enumerate()
        .filter(|&(i, &y)| argmax(scores.row(i)) != y)
        .count()
}

/// Mean-network classification error on `ds`: `(errors, fraction)`.
pub fn evaluate(net: &Network, spec: &DropoutSpec, ds: &LabeledDataset) -> Result<(usize, f64)> {
    let mean = to_mean_network(net, spec)?;
    evaluate_plain(&mean, ds)
}

/// Classification error of `net` itself, without any weight scaling.
pub fn evaluate_plain(net: &Network, ds: &LabeledDataset) -> Result<(usize, f64)> {
    let mut errors = 0;
    let idx: Vec<usize> = (0..ds.len()).collect();
    for chunk in idx.chunks(EVAL_CHUNK) {
        let (x, y) = ds.gather(chunk);
        let out = net.predict(&x)?;
        errors += count_errors(&out, &y);
    }
    Ok((errors, errors as f64 / ds.len() as f64))
}

fn stream_seed(seed: u64, stream: u64) -> u64 {
    seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Live training state.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub config: TrainConfig,
    pub spec: NetworkSpec,
    pub network: Network,
    pub optimizer: OptimizerState,
    shuffle_rng: RandomSource,
    mask_rng: RandomSource,
    started: Instant,
}

impl Trainer {
    /// Fresh network for data of the given shape. A convolutional front is
    /// initialized with the first (up to) 100 training cases as its probe.
    pub fn new(config: &TrainConfig, train: &LabeledDataset) -> Result<Self> {
        config.validate()?;
        let spec = config.net.network_spec(train.dim())?;
        check_classes(&spec, train)?;
        let mut init_rng = RandomSource::new(stream_seed(config.seed, 0));
        let probe = spec.conv.as_ref().map(|_| {
            let idx: Vec<usize> = (0..train.len().min(100)).collect();
            train.gather(&idx).0
        });
        let network = Network::init(&spec, &config.init, probe.as_ref(), &mut init_rng)?;
        let optimizer = OptimizerState::zeros_like(&network.params());
        Ok(Trainer {
            config: config.clone(),
            spec,
            network,
            optimizer,
            shuffle_rng: RandomSource::new(stream_seed(config.seed, 1)),
            mask_rng: RandomSource::new(stream_seed(config.seed, 2)),
            started: Instant::now(),
        })
    }

    /// Continues from a checkpoint written by [`Trainer::checkpoint`].
    pub fn resume(config: &TrainConfig, ckpt: Checkpoint) -> Result<Self> {
        config.validate()?;
        let spec = ckpt.network.spec();
        let wanted = config.net.network_spec(spec.input_dim)?;
        if wanted != spec {
            return Err(Error::Config(format!(
                "checkpoint holds a {spec} network but the config describes {wanted}"
            )));
        }
        let [shuffle, mask] = ckpt.rngs[..] else {
            return Err(Error::Checkpoint(format!(
                "expected 2 generator states, found {}",
                ckpt.rngs.len()
            )));
        };
        Ok(Trainer {
            config: config.clone(),
            spec,
            network: ckpt.network,
            optimizer: ckpt.optimizer,
            shuffle_rng: RandomSource::from_state(shuffle),
            mask_rng: RandomSource::from_state(mask),
            started: Instant::now(),
        })
    }

    /// Number of completed epochs.
    pub fn epoch(&self) -> usize {
        self.optimizer.epoch
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            network: self.network.clone(),
            dropout: self.config.dropout.clone(),
            optimizer: self.optimizer.clone(),
            rngs: vec![self.shuffle_rng.state(), self.mask_rng.state()],
        }
    }

    /// One pass over `train`. Test error is measured when `test` is given.
    pub fn run_epoch(&mut self, train: &LabeledDataset, test: Option<&LabeledDataset>) -> Result<MetricsRow> {
        check_classes(&self.spec, train)?;
        let cfg = self.config.clone();
        let t = self.optimizer.epoch;
        let lr = lr_at(&cfg.optimizer, t);
        let momentum = momentum_at(&cfg.optimizer, t);
        let use_masks = !cfg.dropout.is_disabled();
        let mut xent_sum = 0.0;
        let mut errors = 0usize;
        let batches = minibatch_iter(train, cfg.optimizer.batch_size, &mut self.shuffle_rng)?;
        for (b, idx) in batches.enumerate() {
            let (x, y) = train.gather(&idx);
            let masks = if use_masks {
                Some(sample_case_masks(&mut self.mask_rng, &cfg.dropout, &self.spec, idx.len())?)
            } else {
                None
            };
            let mode = masks.as_ref().map_or(Mode::Deterministic, Mode::Stochastic);
            let (_, trace) = network_forward(&self.network, &x, mode)?;
            let (loss, grad) = softmax_xent(trace.logits(), &y)?;
            if !loss.is_finite() {
                return Err(divergence(&self.network, t, b, lr, momentum, loss));
            }
            xent_sum += loss * idx.len() as f64;
            errors += count_errors(trace.logits(), &y);
            let grads = network_backward(&self.network, &trace, &grad)?;
            let grads = grads.tensors();
            sgd_update(&mut self.network.params_mut(), &mut self.optimizer, &grads, &cfg.optimizer, t)
                .map_err(|e| match e {
                    Error::Numeric(m) => Error::Numeric(format!("epoch {t}, minibatch {b}: {m}")),
                    other => other,
                })?;
        }
        self.check_max_norm()?;
        self.optimizer.epoch += 1;
        let test_err = match test {
            Some(ds) => Some(evaluate(&self.network, &cfg.dropout, ds)?.1),
            None => None,
        };
        let n = train.len() as f64;
        Ok(MetricsRow {
            epoch: t,
            lr,
            momentum,
            train_xent: xent_sum / n,
            train_err: errors as f64 / n,
            test_err,
            wallclock_s: if cfg.wallclock {
                self.started.elapsed().as_secs_f64()
            } else {
                0.0
            },
        })
    }

    fn check_max_norm(&mut self) -> Result<()> {
        let Some(l) = self.config.optimizer.max_sq_norm else {
            return Ok(());
        };
        let constrain_output = self.config.optimizer.constrain_output;
        for (i, slot) in self.network.params_mut().iter().enumerate() {
            if let ParamRole::Weights { layout, hidden } = slot.role {
                if !hidden && !constrain_output {
                    continue;
                }
                let worst = unit_sq_norms(slot.value, layout).into_iter().fold(0.0, f64::max);
                if worst > l + MAX_NORM_SLACK {
                    return Err(Error::Consistency(format!(
                        "parameter {i}: squared unit norm {worst} exceeds bound {l}"
                    )));
                }
            }
        }
        Ok(())
    }
}

fn check_classes(spec: &NetworkSpec, ds: &LabeledDataset) -> Result<()> {
    if spec.outputs() < ds.class_count {
        return Err(Error::Config(format!(
            "output layer has {} units but the data has {} classes",
            spec.outputs(),
            ds.class_count
        )));
    }
    Ok(())
}

fn divergence(net: &Network, epoch: usize, batch: usize, lr: f64, momentum: f64, loss: f64) -> Error {
    let largest: Vec<String> = net
        .params()
        .iter()
        .map(|p| format!("{:.3e}", p.data().iter().fold(0.0f64, |m, v| m.max(v.abs()))))
        .collect();
    Error::Numeric(format!(
        "training diverged: loss {loss} at epoch {epoch}, minibatch {batch} (lr {lr}, momentum {momentum}); \
         largest |parameter| per tensor [{}]",
        largest.join(", ")
    ))
}

/// Result of [`train`].
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub network: Network,
    pub optimizer: OptimizerState,
    pub metrics: Vec<MetricsRow>,
}

/// Appends metrics rows to a CSV file, writing the header to a new file.
pub struct MetricsWriter {
    out: BufWriter<File>,
}

impl MetricsWriter {
    pub fn open(path: &Path) -> Result<Self> {
        create_parent(path)?;
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        let fresh = file.metadata()?.len() == 0;
        let mut out = BufWriter::new(file);
        if fresh {
            writeln!(out, "{METRICS_HEADER}")?;
        }
        Ok(MetricsWriter { out })
    }

    pub fn write(&mut self, row: &MetricsRow) -> Result<()> {
        writeln!(self.out, "{}", row.to_csv())?;
        self.out.flush()?;
        Ok(())
    }
}

pub(crate) fn create_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => Ok(std::fs::create_dir_all(dir)?),
        _ => Ok(()),
    }
}

/// Trains a fresh network for `config.epochs` epochs.
pub fn train(config: &TrainConfig, train: &LabeledDataset, test: Option<&LabeledDataset>) -> Result<TrainOutcome> {
    run(Trainer::new(config, train)?, train, test)
}

/// Runs `trainer` until it has completed `config.epochs` epochs, logging
/// and checkpointing as configured.
pub fn run(mut trainer: Trainer, train: &LabeledDataset, test: Option<&LabeledDataset>) -> Result<TrainOutcome> {
    let cfg = trainer.config.clone();
    let mut writer = cfg.output.metrics.as_deref().map(MetricsWriter::open).transpose()?;
    let mut metrics = Vec::new();
    while trainer.epoch() < cfg.epochs {
        let done = trainer.epoch() + 1;
        let eval = done.is_multiple_of(cfg.eval_every) || done == cfg.epochs;
        let row = trainer.run_epoch(train, if eval { test } else { None })?;
        if let Some(w) = &mut writer {
            w.write(&row)?;
        }
        metrics.push(row);
        if let (Some(path), Some(every)) = (&cfg.output.checkpoint, cfg.output.checkpoint_every) {
            if done.is_multiple_of(every) && done != cfg.epochs {
                checkpoint_save(&trainer.checkpoint(), path)?;
            }
        }
    }
    if let Some(path) = &cfg.output.checkpoint {
        checkpoint_save(&trainer.checkpoint(), path)?;
    }
    Ok(TrainOutcome {
        network: trainer.network,
        optimizer: trainer.optimizer,
        metrics,
    })
}

/// Loads the configured training and (optional) test sets, applying case
/// limits and standardization.
pub fn load_datasets(config: &TrainConfig) -> Result<(LabeledDataset, Option<LabeledDataset>)> {
    let d = &config.data;
    let (Some(ti), Some(tl)) = (&d.train_images, &d.train_labels) else {
        return Err(Error::Config("data.train_images and data.train_labels are required".into()));
    };
    let mut train = load_idx(ti, tl)?;
    if let Some(n) = d.train_limit {
        train = train.take(n)?;
    }
    let mut test = match (&d.test_images, &d.test_labels) {
        (Some(i), Some(l)) => Some(load_idx(i, l)?),
        (None, None) => None,
        _ => return Err(Error::Config("data.test_images and data.test_labels go together".into())),
    };
    if let (Some(ds), Some(n)) = (&mut test, d.test_limit) {
        *ds = ds.take(n)?;
    }
    if d.standardize {
        let others: Vec<&LabeledDataset> = test.iter().collect();
        let (t, rest, _) = standardize(&train, &others)?;
        train = t;
        test = rest.into_iter().next();
    }
    if let Some(ds) = &mut test {
        ds.class_count = ds.class_count.max(train.class_count);
        train.class_count = ds.class_count;
    }
    Ok((train, test))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{parse_entries, TrainConfig};
    use crate::data::FeatureLayout;
    use crate::layers::{Activation, DenseLayer};

    /// Two Gaussian blobs per class in 6 dimensions.
    fn blobs(n: usize, seed: u64) -> LabeledDataset {
        let mut rng = RandomSource::new(seed);
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for i in 0..n {
            let y = i % 3;
            for j in 0..6 {
                let centre = if j % 3 == y { 1.5 } else { 0.0 };
                data.push(centre + 0.7 * rng.standard_normal());
            }
            labels.push(y);
        }
        LabeledDataset::new(Tensor::from_vec(&[n, 6], data).unwrap(), labels, 3, FeatureLayout::Flat).unwrap()
    }

    fn small_config(extra: &str) -> TrainConfig {
        let base = "seed = 5\nepochs = 6\nnet.layers = 12,3\noptimizer.eps0 = 1.0\n\
                    optimizer.batch_size = 10\nmetrics.wallclock = false\n";
        TrainConfig::from_sources(base, &parse_entries(extra).unwrap()).unwrap()
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax(&[0.2, 0.5, 0.5]), 1);
        assert_eq!(argmax(&[1.0, 1.0]), 0);
        assert_eq!(argmax(&[-3.0, -1.0, -2.0]), 1);
    }

    #[test]
    fn hand_counted_errors() {
        let scores = Tensor::from_rows(&[vec![2.0, 1.0, 0.0], vec![0.0, 0.0, -1.0], vec![0.1, 0.3, 0.2]]);
        assert_eq!(count_errors(&scores, &[0, 1, 1]), 1);
        assert_eq!(count_errors(&scores, &[0, 0, 1]), 0);
        assert_eq!(count_errors(&scores, &[2, 2, 2]), 3);
    }

    #[test]
    fn evaluate_with_known_logits() {
        // Identity weights: the logits are the inputs themselves.
        let layer = DenseLayer::new(
            Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]),
            Tensor::zeros(&[2]),
            Activation::Softmax,
        )
        .unwrap();
        let net = Network {
            conv: None,
            layers: vec![layer],
        };
        let x = Tensor::from_rows(&[vec![3.0, 1.0], vec![0.0, 2.0], vec![5.0, 5.0]]);
        let ds = LabeledDataset::new(x.clone(), vec![0, 1, 0], 2, FeatureLayout::Flat).unwrap();
        assert_eq!(evaluate(&net, &DropoutSpec::disabled(0), &ds).unwrap(), (0, 0.0));
        let ds = LabeledDataset::new(x, vec![1, 1, 1], 2, FeatureLayout::Flat).unwrap();
        assert_eq!(evaluate(&net, &DropoutSpec::disabled(0), &ds).unwrap(), (2, 2.0 / 3.0));
        assert_eq!(110.0 / 10000.0, 0.011);
    }

    #[test]
    fn logged_schedule_values() {
        let cfg = small_config("optimizer.decay_f = 0.998");
        let ds = blobs(30, 1);
        let out = train(&TrainConfig { epochs: 2, ..cfg.clone() }, &ds, None).unwrap();
        assert_eq!(out.metrics[0].lr, 1.0);
        assert_eq!(out.metrics[0].momentum, 0.5);
        assert_eq!(out.metrics[1].lr, 0.998);
        assert_eq!(out.metrics[1].momentum, 0.50098);
        let paper = TrainConfig::paper().optimizer;
        assert_eq!(lr_at(&paper, 0), 10.0);
        assert!((lr_at(&paper, 500) - 3.6751).abs() < 1e-4);
        assert_eq!(momentum_at(&paper, 500), 0.99);
    }

    #[test]
    fn learns_separable_blobs() {
        let train_ds = blobs(300, 2);
        let test_ds = blobs(150, 3);
        let out = train(&small_config("epochs = 20"), &train_ds, Some(&test_ds)).unwrap();
        let last = out.metrics.last().unwrap();
        assert!(last.test_err.unwrap() < 0.15, "{last:?}");
        assert!(last.train_xent < out.metrics[0].train_xent);
    }

    #[test]
    fn runs_are_bitwise_reproducible() {
        let ds = blobs(60, 4);
        let a = train(&small_config(""), &ds, Some(&ds)).unwrap();
        let b = train(&small_config(""), &ds, Some(&ds)).unwrap();
        assert_eq!(a.network, b.network);
        assert_eq!(a.metrics, b.metrics);
    }

    #[test]
    fn retain_one_equals_mask_free_training() {
        let ds = blobs(60, 6);
        let cfg = small_config("dropout.input_retain = 1\ndropout.hidden_retain = 1");
        let out = train(&cfg, &ds, None).unwrap();
        // Same loop by hand, feeding explicit all-ones masks.
        let mut tr = Trainer::new(&cfg, &ds).unwrap();
        let mut shuffle = RandomSource::new(stream_seed(cfg.seed, 1));
        let mut mask_rng = RandomSource::new(99);
        for t in 0..cfg.epochs {
            let mut xent = 0.0;
            for idx in minibatch_iter(&ds, cfg.optimizer.batch_size, &mut shuffle).unwrap() {
                let (x, y) = ds.gather(&idx);
                let masks = sample_case_masks(&mut mask_rng, &cfg.dropout, &tr.spec, idx.len()).unwrap();
                let (_, trace) = network_forward(&tr.network, &x, Mode::Stochastic(&masks)).unwrap();
                let (loss, grad) = softmax_xent(trace.logits(), &y).unwrap();
                xent += loss * idx.len() as f64;
                let g = network_backward(&tr.network, &trace, &grad).unwrap();
                sgd_update(&mut tr.network.params_mut(), &mut tr.optimizer, &g.tensors(), &cfg.optimizer, t)
                    .unwrap();
            }
            assert!((xent / ds.len() as f64 - out.metrics[t].train_xent).abs() <= 1e-12);
        }
        assert_eq!(tr.network, out.network);
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let ds = blobs(50, 7);
        let full = train(&small_config("epochs = 10"), &ds, Some(&ds)).unwrap();
        let half = small_config("epochs = 5");
        let mut tr = Trainer::new(&half, &ds).unwrap();
        let mut first = Vec::new();
        for _ in 0..5 {
            first.push(tr.run_epoch(&ds, None).unwrap());
        }
        let bytes = crate::checkpoint::encode(&tr.checkpoint());
        let ckpt = crate::checkpoint::decode(&bytes).unwrap();
        let resumed = Trainer::resume(&small_config("epochs = 10"), ckpt).unwrap();
        let rest = run(resumed, &ds, Some(&ds)).unwrap();
        assert_eq!(rest.network, full.network);
        assert_eq!(rest.optimizer, full.optimizer);
        assert_eq!(rest.metrics[..], full.metrics[5..]);
        for (a, b) in first.iter().zip(&full.metrics) {
            assert_eq!(a.train_xent, b.train_xent);
        }
    }

    #[test]
    fn max_norm_holds_at_epoch_boundaries() {
        let ds = blobs(60, 8);
        let cfg = small_config("optimizer.eps0 = 50\noptimizer.max_sq_norm = 0.5");
        let mut tr = Trainer::new(&cfg, &ds).unwrap();
        for _ in 0..4 {
            tr.run_epoch(&ds, None).unwrap();
            let w = &tr.network.layers[0].weights;
            let worst = unit_sq_norms(w, crate::network::UnitLayout::Columns)
                .into_iter()
                .fold(0.0, f64::max);
            assert!(worst <= 0.5 + MAX_NORM_SLACK);
        }
    }

    #[test]
    fn divergence_aborts_with_diagnostics() {
        let ds = blobs(40, 9);
        let cfg = small_config("optimizer.eps0 = 1e300\noptimizer.max_sq_norm = none\ndropout.hidden_retain = 1");
        let err = train(&cfg, &ds, None).unwrap_err();
        let msg = err.to_string();
        assert!(matches!(err, Error::Numeric(_)), "{msg}");
        assert!(msg.contains("epoch 0"), "{msg}");
    }

    #[test]
    fn metrics_file_is_append_only_csv() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        let ds = blobs(30, 10);
        let mut cfg = small_config("epochs = 2\neval_every = 2");
        cfg.output.metrics = Some(path.clone());
        train(&cfg, &ds, Some(&ds)).unwrap();
        train(&cfg, &ds, Some(&ds)).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], METRICS_HEADER);
        assert_eq!(lines.len(), 5);
        assert_eq!(lines[1].split(',').nth(5), Some(""));
        assert_eq!(lines[1], lines[3]);
        assert_eq!(lines[2], lines[4]);
        assert!(lines[2].ends_with(",0.000"));
    }

    #[test]
    fn class_count_must_fit_output_layer() {
        let ds = blobs(30, 11);
        let cfg = small_config("net.layers = 4,2");
        assert!(matches!(Trainer::new(&cfg, &ds), Err(Error::Config(_))));
    }
}
