//! Executable checks of the averaging identities and of backpropagation.
//!
//! Each check draws random networks from a seeded stream, compares the
//! quantity under test with an exhaustive or finite-difference reference,
//! and reports the worst observed discrepancy against a fixed threshold.

use std::fmt::Write as _;
use std::time::Instant;

use crate::convnet::{LrnSpec, PoolKind, PoolSpec, Stage, StageSpec};
use crate::dropout::{
    enumerate_subnet_distributions, enumerate_subnet_outputs, geometric_mean_distribution, to_mean_network,
    DropoutSpec, Population,
};
use crate::error::{Error, Result};
use crate::layers::{log_sum_exp, softmax_xent, Activation, DenseLayer};
use crate::network::{network_backward, network_forward, ConvFrontSpec, InitConfig, LayerSpec, Masks, Mode, Network, NetworkSpec};
use crate::rng::RandomSource;
use crate::tensor::Tensor;

/// Bound on the deviation between the mean net and the geometric mean.
pub const EQUIVALENCE_TOL: f64 = 1e-9;
/// Largest hidden layer used by the equivalence check.
pub const MAX_EQUIVALENCE_UNITS: usize = 12;
/// Agreement required between quantities that are equal in exact
/// arithmetic but computed along different paths.
pub const ROUNDING_TOL: f64 = 1e-12;
/// Distributions closer than this count as identical.
pub const IDENTICAL_TOL: f64 = 1e-12;
/// Finite-difference step.
pub const FD_STEP: f64 = 1e-6;
/// Probe points with a rectifier input or a max-pool runner-up this close to
/// a kink are redrawn.
pub const KINK_MARGIN: f64 = 1e-4;
/// Gradients smaller than this are compared absolutely rather than
/// relatively.
pub const GRAD_FLOOR: f64 = 1e-4;
pub const DENSE_GRAD_TOL: f64 = 1e-5;
pub const CONV_GRAD_TOL: f64 = 1e-4;

/// Outcome of one check. `passed` is true exactly when `observed` is within
/// `threshold` (strictly below for deviations, at most for counts).
#[derive(Debug, Clone, PartialEq)]
pub struct CheckReport {
    pub name: String,
    pub passed: bool,
    pub observed: f64,
    pub threshold: f64,
    pub trials: usize,
    pub runtime_s: f64,
}

impl CheckReport {
    pub const CSV_HEADER: &'static str = "check,status,observed,threshold,trials,runtime_s";

    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{:e},{:e},{},{:.3}",
            self.name,
            if self.passed { "pass" } else { "fail" },
            self.observed,
            self.threshold,
            self.trials,
            self.runtime_s
        )
    }
}

/// CSV document with a header line and one row per report.
pub fn reports_csv(reports: &[CheckReport]) -> String {
    let mut out = String::from(CheckReport::CSV_HEADER);
    out.push('\n');
    for r in reports {
        let _ = writeln!(out, "{}", r.to_csv());
    }
    out
}

fn random_activation(rng: &mut RandomSource) -> Activation {
    [Activation::Relu, Activation::Logistic, Activation::Linear][rng.below(3)]
}

/// Dense net `d → n → k` with N(0, sd²) weights and biases.
fn random_single_hidden(
    rng: &mut RandomSource,
    d: usize,
    n: usize,
    k: usize,
    hidden: Activation,
    output: Activation,
    sd: f64,
) -> Result<Network> {
    let mut layers = Vec::with_capacity(2);
    for (n_in, n_out, act) in [(d, n, hidden), (n, k, output)] {
        layers.push(DenseLayer::new(
            rng.gauss_sample(0.0, sd, &[n_in, n_out])?,
            rng.gauss_sample(0.0, sd, &[n_out])?,
            act,
        )?);
    }
    Ok(Network { conv: None, layers })
}

fn random_input(rng: &mut RandomSource, d: usize) -> Vec<f64> {
    (0..d).map(|_| rng.standard_normal()).collect()
}

fn half_dropout() -> DropoutSpec {
    DropoutSpec {
        input_retain: 1.0,
        hidden_retain: vec![0.5],
    }
}

/// Largest entrywise gap between the mean network's softmax output and the
/// renormalized geometric mean of all `2^N` subnetwork outputs.
pub fn geometric_deviation(net: &Network, x: &[f64]) -> Result<f64> {
    let mean = to_mean_network(net, &half_dropout())?;
    let input = Tensor::from_vec(&[1, x.len()], x.to_vec())?;
    let p_mean = mean.predict(&input)?;
    let geo = geometric_mean_distribution(&enumerate_subnet_distributions(net, x)?)?;
    Ok(p_mean
        .data()
        .iter()
        .zip(&geo)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max))
}

/// Mean-net vs geometric-mean deviation over `trials` random nets with
/// 1 to `n_max` hidden units (the last trial always uses `n_max`).
pub fn check_geometric_equivalence(trials: usize, n_max: usize, seed: u64) -> Result<CheckReport> {
    if n_max == 0 || n_max > MAX_EQUIVALENCE_UNITS {
        return Err(Error::arg(format!(
            "hidden layer size must be in 1..={MAX_EQUIVALENCE_UNITS}, got {n_max}"
        )));
    }
    let start = Instant::now();
    let mut rng = RandomSource::new(seed);
    let mut worst = 0.0f64;
    for t in 0..trials {
        let n = if t + 1 == trials { n_max } else { 1 + rng.below(n_max) };
        let d = 1 + rng.below(6);
        let k = 2 + rng.below(4);
        let hidden = random_activation(&mut rng);
        let net = random_single_hidden(&mut rng, d, n, k, hidden, Activation::Softmax, 1.0)?;
        let x = random_input(&mut rng, d);
        worst = worst.max(geometric_deviation(&net, &x)?);
    }
    Ok(CheckReport {
        name: "geometric-equivalence".into(),
        passed: worst < EQUIVALENCE_TOL,
        observed: worst,
        threshold: EQUIVALENCE_TOL,
        trials,
        runtime_s: start.elapsed().as_secs_f64(),
    })
}

/// Comparison of the mean network's log probability of a label with the
/// average subnetwork log probability.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogProbComparison {
    pub mean_net: f64,
    pub subnet_average: f64,
    /// `−ln Z`, where `Z` normalizes the unnormalized geometric mean;
    /// computed without cancellation, so it is never negative and is
    /// positive whenever the subnet distributions differ.
    pub jensen_gap: f64,
    /// Largest gap between any subnet distribution and the first one.
    pub spread: f64,
}

impl LogProbComparison {
    pub fn margin(&self) -> f64 {
        self.mean_net - self.subnet_average
    }
}

pub fn compare_log_prob(net: &Network, x: &[f64], label: usize) -> Result<LogProbComparison> {
    let dists = enumerate_subnet_distributions(net, x)?;
    let k = dists[0].len();
    if label >= k {
        return Err(Error::arg(format!("label {label} out of range for {k} classes")));
    }
    let count = dists.len() as f64;
    let mean_logs: Vec<f64> = (0..k)
        .map(|j| dists.iter().map(|p| p[j].ln()).sum::<f64>() / count)
        .collect();
    // 1 − Z = Σ_k G_k · mean_S (e^u − 1 − u) with u = ln p_S(k) − mean log,
    // G_k = exp(mean log): every term is nonnegative.
    let one_minus_z: f64 = (0..k)
        .map(|j| {
            let excess = dists
                .iter()
                .map(|p| {
                    let u = p[j].ln() - mean_logs[j];
                    u.exp_m1() - u
                })
                .sum::<f64>()
                / count;
            mean_logs[j].exp() * excess.max(0.0)
        })
        .sum();
    let spread = dists
        .iter()
        .flat_map(|p| p.iter().zip(&dists[0]).map(|(a, b)| (a - b).abs()))
        .fold(0.0, f64::max);
    let mean = to_mean_network(net, &half_dropout())?;
    let input = Tensor::from_vec(&[1, x.len()], x.to_vec())?;
    let (_, trace) = network_forward(&mean, &input, Mode::Deterministic)?;
    let logits = trace.logits().row(0);
    Ok(LogProbComparison {
        mean_net: logits[label] - log_sum_exp(logits),
        subnet_average: mean_logs[label],
        jensen_gap: -(-one_minus_z).ln_1p(),
        spread,
    })
}

/// Counts trials where the mean net's log probability of the correct label
/// falls below the average subnet log probability, or where the gap between
/// them fails to be positive although the subnet distributions differ.
///
/// The two log probabilities are O(1) numbers computed along different
/// paths, so their direct difference carries rounding noise of order 1e-16.
/// Positivity is therefore judged on the cancellation-free Jensen gap,
/// which must agree with the direct difference to [`ROUNDING_TOL`].
pub fn check_logprob_superiority(trials: usize, seed: u64) -> Result<CheckReport> {
    let start = Instant::now();
    let mut rng = RandomSource::new(seed);
    let mut violations = 0usize;
    for _ in 0..trials {
        let n = 1 + rng.below(6);
        let d = 1 + rng.below(6);
        let k = 2 + rng.below(4);
        let hidden = random_activation(&mut rng);
        let net = random_single_hidden(&mut rng, d, n, k, hidden, Activation::Softmax, 1.0)?;
        let x = random_input(&mut rng, d);
        let c = compare_log_prob(&net, &x, rng.below(k))?;
        let strict_needed = c.spread > IDENTICAL_TOL;
        let consistent = (c.margin() - c.jensen_gap).abs() <= ROUNDING_TOL;
        if !consistent || c.margin() < -ROUNDING_TOL || (strict_needed && c.jensen_gap <= 0.0) {
            violations += 1;
        }
    }
    Ok(CheckReport {
        name: "logprob-superiority".into(),
        passed: violations == 0,
        observed: violations as f64,
        threshold: 0.0,
        trials,
        runtime_s: start.elapsed().as_secs_f64(),
    })
}

/// Squared error of the mean network and the average squared error of all
/// subnetworks for one input and target.
pub fn compare_squared_error(net: &Network, x: &[f64], target: &[f64]) -> Result<(f64, f64)> {
    if net.output_layer().activation != Activation::Linear {
        return Err(Error::Applicability("squared-error comparison needs a linear output layer".into()));
    }
    let se = |o: &[f64]| -> f64 { o.iter().zip(target).map(|(a, b)| (a - b) * (a - b)).sum() };
    let outs = enumerate_subnet_outputs(net, x, Population::Hidden)?;
    if outs[0].len() != target.len() {
        return Err(Error::shape("target width differs from the output layer"));
    }
    let avg = outs.iter().map(|o| se(o)).sum::<f64>() / outs.len() as f64;
    let mean = to_mean_network(net, &half_dropout())?;
    let out = mean.predict(&Tensor::from_vec(&[1, x.len()], x.to_vec())?)?;
    Ok((se(out.data()), avg))
}

/// Counts trials where the mean network's squared error exceeds the average
/// subnetwork squared error by more than rounding (relative 1e-12).
pub fn check_regression_superiority(trials: usize, seed: u64) -> Result<CheckReport> {
    let start = Instant::now();
    let mut rng = RandomSource::new(seed);
    let mut violations = 0usize;
    for _ in 0..trials {
        let n = 1 + rng.below(8);
        let d = 1 + rng.below(6);
        let k = 1 + rng.below(3);
        let hidden = random_activation(&mut rng);
        let net = random_single_hidden(&mut rng, d, n, k, hidden, Activation::Linear, 1.0)?;
        let x = random_input(&mut rng, d);
        let target = random_input(&mut rng, k);
        let (mean_se, avg_se) = compare_squared_error(&net, &x, &target)?;
        if mean_se > avg_se * (1.0 + 1e-12) {
            violations += 1;
        }
    }
    Ok(CheckReport {
        name: "regression-superiority".into(),
        passed: violations == 0,
        observed: violations as f64,
        threshold: 0.0,
        trials,
        runtime_s: start.elapsed().as_secs_f64(),
    })
}

// ---------------------------------------------------------------------------
// Gradient checks

/// Objective differentiated by [`gradient_check`].
#[derive(Debug, Clone, PartialEq)]
pub enum Loss {
    /// Mean softmax cross-entropy against class labels.
    SoftmaxXent(Vec<usize>),
    /// `½ · Σ (output − target)² / batch` for a linear output layer.
    SquaredError(Tensor),
}

fn loss_and_grad(net: &Network, x: &Tensor, masks: &Masks, loss: &Loss) -> Result<(f64, Tensor)> {
    let (out, trace) = network_forward(net, x, Mode::Stochastic(masks))?;
    let (value, grad) = match loss {
        Loss::SoftmaxXent(labels) => softmax_xent(trace.logits(), labels)?,
        Loss::SquaredError(target) => {
            if !out.same_shape(target) {
                return Err(Error::shape("target shape differs from the output"));
            }
            let batch = out.rows() as f64;
            let mut g = out.clone();
            g.axpy(-1.0, target)?;
            let v = g.data().iter().map(|d| d * d).sum::<f64>() / (2.0 * batch);
            g.scale(1.0 / batch);
            (v, g)
        }
    };
    let flat: Vec<f64> = network_backward(net, &trace, &grad)?
        .tensors()
        .iter()
        .flat_map(|t| t.data().iter().copied())
        .collect();
    let len = flat.len();
    Ok((value, Tensor::from_vec(&[len], flat)?))
}

fn loss_only(net: &Network, x: &Tensor, masks: &Masks, loss: &Loss) -> Result<f64> {
    let (out, trace) = network_forward(net, x, Mode::Stochastic(masks))?;
    Ok(match loss {
        Loss::SoftmaxXent(labels) => softmax_xent(trace.logits(), labels)?.0,
        Loss::SquaredError(target) => {
            let batch = out.rows() as f64;
            out.data()
                .iter()
                .zip(target.data())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                / (2.0 * batch)
        }
    })
}

/// Whether the probe point sits within [`KINK_MARGIN`] of a rectifier kink
/// or a max-pool tie.
pub fn near_kink(net: &Network, x: &Tensor, masks: &Masks) -> Result<bool> {
    let (_, trace) = network_forward(net, x, Mode::Stochastic(masks))?;
    for (layer, z) in net.layers.iter().zip(&trace.zs) {
        if layer.activation == Activation::Relu && z.data().iter().any(|v| v.abs() < KINK_MARGIN) {
            return Ok(true);
        }
    }
    if let (Some(stack), Some(ct)) = (&net.conv, &trace.conv) {
        for (stage, input) in stack.stages.iter().zip(&ct.inputs) {
            match stage {
                Stage::Relu if input.data().iter().any(|v| v.abs() < KINK_MARGIN) => return Ok(true),
                Stage::Pool(p) if p.kind == PoolKind::Max && pool_has_near_tie(input, p) => return Ok(true),
                _ => {}
            }
        }
    }
    Ok(false)
}

fn pool_has_near_tie(x: &Tensor, p: &PoolSpec) -> bool {
    let s = x.shape();
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    let oh = (h - p.window) / p.stride + 1;
    let ow = (w - p.window) / p.stride + 1;
    let d = x.data();
    for plane in 0..b * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut vals: Vec<f64> = (0..p.window)
                    .flat_map(|dy| (0..p.window).map(move |dx| (dy, dx)))
                    .map(|(dy, dx)| d[base + (oy * p.stride + dy) * w + ox * p.stride + dx])
                    .collect();
                vals.sort_by(|a, b| b.total_cmp(a));
                // Exact zeros from a rectifier stay exact zeros under a small
                // perturbation, so a tie between them is harmless.
                let rectified_tie = vals.len() > 1 && vals[0] == 0.0 && vals[1] == 0.0;
                if vals.len() > 1 && vals[0] - vals[1] < KINK_MARGIN && !rectified_tie {
                    return true;
                }
            }
        }
    }
    false
}

/// Worst relative error between analytic gradients and central differences
/// with step [`FD_STEP`] over every parameter. Gradients below
/// [`GRAD_FLOOR`] in magnitude are compared on an absolute scale.
pub fn gradient_check(net: &Network, x: &Tensor, masks: &Masks, loss: &Loss) -> Result<f64> {
    let (_, analytic) = loss_and_grad(net, x, masks, loss)?;
    let mut probe = net.clone();
    let mut worst = 0.0f64;
    let mut flat = 0;
    let n_tensors = probe.params().len();
    for ti in 0..n_tensors {
        let len = probe.params()[ti].len();
        for e in 0..len {
            let orig = probe.params()[ti].data()[e];
            probe.params_mut()[ti].value.data_mut()[e] = orig + FD_STEP;
            let up = loss_only(&probe, x, masks, loss)?;
            probe.params_mut()[ti].value.data_mut()[e] = orig - FD_STEP;
            let down = loss_only(&probe, x, masks, loss)?;
            probe.params_mut()[ti].value.data_mut()[e] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            let a = analytic.data()[flat];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(GRAD_FLOOR);
            worst = worst.max(rel);
            flat += 1;
        }
    }
    Ok(worst)
}

fn random_masks(rng: &mut RandomSource, spec: &NetworkSpec, batch: usize) -> Result<Masks> {
    let input = rng.bernoulli_mask(0.8, &[batch, spec.input_dim])?;
    let hidden = spec.layers[..spec.layers.len() - 1]
        .iter()
        .map(|l| rng.bernoulli_mask(0.5, &[batch, l.units]).map(Some))
        .collect::<Result<_>>()?;
    Ok(Masks {
        input: Some(input),
        hidden,
    })
}

/// Draws an input far enough from every kink; gives up after 50 attempts.
fn probe_point(rng: &mut RandomSource, net: &Network, batch: usize) -> Result<(Tensor, Masks)> {
    let spec = net.spec();
    for _ in 0..50 {
        let x = rng.gauss_sample(0.0, 1.0, &[batch, spec.input_dim])?;
        let masks = random_masks(rng, &spec, batch)?;
        if !near_kink(net, &x, &masks)? {
            return Ok((x, masks));
        }
    }
    Err(Error::Numeric("no probe point away from rectifier kinks".into()))
}

fn random_dense_spec(rng: &mut RandomSource) -> NetworkSpec {
    let depth = 1 + rng.below(3);
    let input_dim = 2 + rng.below(5);
    let mut layers: Vec<LayerSpec> = (0..depth)
        .map(|_| LayerSpec {
            units: 2 + rng.below(5),
            activation: random_activation(rng),
        })
        .collect();
    layers.push(LayerSpec {
        units: 2 + rng.below(3),
        activation: Activation::Softmax,
    });
    NetworkSpec {
        input_dim,
        conv: None,
        layers,
    }
}

/// Conv, optional locally-connected, rectifier, pooling and LRN stages on
/// 4-channel 8×8 images.
fn random_conv_spec(rng: &mut RandomSource) -> NetworkSpec {
    let mut stages = vec![StageSpec::Conv {
        banks: 2 + rng.below(3),
        fh: 2 + rng.below(2),
        fw: 2 + rng.below(2),
        stride: 1,
    }];
    if rng.below(3) == 0 {
        stages.push(StageSpec::Local {
            banks: 2 + rng.below(2),
            fh: 2,
            fw: 2,
            stride: 1,
        });
    }
    stages.push(StageSpec::Relu);
    let kind = if rng.below(2) == 0 { PoolKind::Max } else { PoolKind::Average };
    stages.push(StageSpec::Pool(PoolSpec {
        kind,
        window: 2 + rng.below(2),
        stride: 1 + rng.below(2),
    }));
    stages.push(StageSpec::Lrn(LrnSpec {
        width: [1, 3, 5][rng.below(3)],
        alpha: rng.uniform_range(0.01, 0.5),
        beta: 0.75,
    }));
    let mut layers = Vec::new();
    if rng.below(2) == 0 {
        layers.push(LayerSpec {
            units: 3 + rng.below(3),
            activation: random_activation(rng),
        });
    }
    layers.push(LayerSpec {
        units: 2 + rng.below(3),
        activation: Activation::Softmax,
    });
    NetworkSpec {
        input_dim: 4 * 8 * 8,
        conv: Some(ConvFrontSpec {
            input_shape: [4, 8, 8],
            stages,
        }),
        layers,
    }
}

fn sample_net(rng: &mut RandomSource, spec: &NetworkSpec, sd: f64) -> Result<Network> {
    let init = InitConfig {
        weight_sd: sd,
        hidden_bias: 0.1,
        output_bias: 0.0,
        conv_bias: 0.1,
    };
    let mut net = Network::init(spec, &init, None, rng)?;
    for slot in net.params_mut() {
        for v in slot.value.data_mut() {
            *v += 0.1 * rng.standard_normal();
        }
    }
    Ok(net)
}

/// Finite-difference checks over `arch_samples` random dense nets and as
/// many random convolutional stacks. Returns one report per family.
pub fn check_gradients(arch_samples: usize, seed: u64) -> Result<Vec<CheckReport>> {
    let mut rng = RandomSource::new(seed);
    let mut reports = Vec::with_capacity(2);
    for conv in [false, true] {
        let start = Instant::now();
        let mut worst = 0.0f64;
        for _ in 0..arch_samples {
            let (spec, sd, batch) = if conv {
                (random_conv_spec(&mut rng), 0.3, 1)
            } else {
                (random_dense_spec(&mut rng), 0.8, 3)
            };
            let net = sample_net(&mut rng, &spec, sd)?;
            let (x, masks) = probe_point(&mut rng, &net, batch)?;
            let labels = (0..batch).map(|_| rng.below(spec.outputs())).collect();
            worst = worst.max(gradient_check(&net, &x, &masks, &Loss::SoftmaxXent(labels))?);
        }
        let threshold = if conv { CONV_GRAD_TOL } else { DENSE_GRAD_TOL };
        reports.push(CheckReport {
            name: if conv { "gradients-conv" } else { "gradients-dense" }.into(),
            passed: worst <= threshold,
            observed: worst,
            threshold,
            trials: arch_samples,
            runtime_s: start.elapsed().as_secs_f64(),
        });
    }
    Ok(reports)
}
