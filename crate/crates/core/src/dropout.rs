//! Dropout masks, mean-network construction and exhaustive subnetwork
//! enumeration.
//!
//! The mean network scales every weight matrix whose inputs come from a
//! dropped population by that population's retain probability. For a net
//! with one hidden layer and a softmax head, its output equals the
//! renormalized geometric mean of the outputs of all `2^N` subnetworks,
//! each weighted by the probability `r^|S| (1 - r)^(N - |S|)` of its mask;
//! at `r = 0.5` the weights are uniform.

use crate::convnet::Stage;
use crate::error::{Error, Result};
use crate::layers::{log_sum_exp, Activation};
use crate::network::{network_forward, Masks, Mode, Network, NetworkSpec};
use crate::rng::RandomSource;
use crate::tensor::Tensor;

/// Largest population that [`enumerate_subnet_outputs`] will enumerate.
pub const MAX_ENUMERATED_UNITS: usize = 20;

/// Retain probabilities for the input and each hidden layer.
#[derive(Debug, Clone, PartialEq)]
pub struct DropoutSpec {
    pub input_retain: f64,
    pub hidden_retain: Vec<f64>,
}

impl DropoutSpec {
    /// 20% input dropout and 50% hidden dropout.
    pub fn standard(hidden_layers: usize) -> Self {
        Self::uniform(0.8, 0.5, hidden_layers)
    }

    pub fn uniform(input_retain: f64, hidden_retain: f64, hidden_layers: usize) -> Self {
        DropoutSpec {
            input_retain,
            hidden_retain: vec![hidden_retain; hidden_layers],
        }
    }

    /// Every unit always retained.
    pub fn disabled(hidden_layers: usize) -> Self {
        Self::uniform(1.0, 1.0, hidden_layers)
    }

    pub fn is_disabled(&self) -> bool {
        self.input_retain == 1.0 && self.hidden_retain.iter().all(|&r| r == 1.0)
    }

    pub fn validate(&self) -> Result<()> {
        for &r in std::iter::once(&self.input_retain).chain(&self.hidden_retain) {
            if !(r > 0.0 && r <= 1.0) {
                return Err(Error::Config(format!(
                    "retain probability {r} outside (0, 1]"
                )));
            }
        }
        Ok(())
    }

    fn check_covers(&self, hidden_layers: usize) -> Result<()> {
        self.validate()?;
        if self.hidden_retain.len() != hidden_layers {
            return Err(Error::Config(format!(
                "dropout spec lists {} hidden retain probabilities for {} hidden layers",
                self.hidden_retain.len(),
                hidden_layers
            )));
        }
        Ok(())
    }
}

/// Independent Bernoulli masks for every case of a minibatch.
pub fn sample_case_masks(
    rng: &mut RandomSource,
    spec: &DropoutSpec,
    net_spec: &NetworkSpec,
    batch: usize,
) -> Result<Masks> {
    let hidden = net_spec.hidden_layers();
    spec.check_covers(hidden)?;
    let input = rng.bernoulli_mask(spec.input_retain, &[batch, net_spec.input_dim])?;
    let mut masks = Vec::with_capacity(hidden);
    for (l, &r) in spec.hidden_retain.iter().enumerate() {
        masks.push(Some(rng.bernoulli_mask(r, &[batch, net_spec.layers[l].units])?));
    }
    Ok(Masks {
        input: Some(input),
        hidden: masks,
    })
}

/// Copy of `net` for deterministic inference: each weight matrix fed by a
/// dropped population is multiplied by that population's retain
/// probability. Biases are unchanged.
pub fn to_mean_network(net: &Network, spec: &DropoutSpec) -> Result<Network> {
    spec.check_covers(net.layers.len() - 1)?;
    let mut mean = net.clone();
    let mut input_scaled = false;
    if let Some(stack) = &mut mean.conv {
        for stage in &mut stack.stages {
            match stage {
                Stage::Conv(l) => {
                    l.filters.scale(spec.input_retain);
                    input_scaled = true;
                }
                Stage::Local(l) => {
                    l.filters.scale(spec.input_retain);
                    input_scaled = true;
                }
                _ => {}
            }
            if input_scaled {
                break;
            }
        }
    } else {
        mean.layers[0].weights.scale(spec.input_retain);
    }
    for (l, &r) in spec.hidden_retain.iter().enumerate() {
        mean.layers[l + 1].weights.scale(r);
    }
    Ok(mean)
}

/// Which population of units to enumerate masks over.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Population {
    Input,
    Hidden,
}

/// Binary mask for subset index `s` over `n` units: unit `j` is kept iff bit
/// `j` of `s` is set.
pub fn subset_mask(s: usize, n: usize) -> Vec<f64> {
    (0..n).map(|j| ((s >> j) & 1) as f64).collect()
}

/// Probability of each subset (binary counting order) when every unit is
/// kept independently with probability `retain`.
pub fn subset_weights(n: usize, retain: f64) -> Vec<f64> {
    (0..1usize << n)
        .map(|s| {
            let kept = s.count_ones() as i32;
            retain.powi(kept) * (1.0 - retain).powi(n as i32 - kept)
        })
        .collect()
}

/// Output row of every subnetwork of a single-hidden-layer dense net for one
/// input, in binary counting order over the chosen population. Other
/// populations are left intact.
pub fn enumerate_subnet_outputs(net: &Network, x: &[f64], population: Population) -> Result<Vec<Vec<f64>>> {
    if net.layers.len() != 2 || net.conv.is_some() {
        return Err(Error::Applicability(format!(
            "enumeration needs a dense net with exactly one hidden layer, got {} hidden layers",
            net.layers.len().saturating_sub(1)
        )));
    }
    let n = match population {
        Population::Input => net.input_dim(),
        Population::Hidden => net.layers[0].n_out(),
    };
    if n > MAX_ENUMERATED_UNITS {
        return Err(Error::Capacity(format!(
            "{n} units would need 2^{n} subnetworks; at most {MAX_ENUMERATED_UNITS} are enumerated"
        )));
    }
    if x.len() != net.input_dim() {
        return Err(Error::shape(format!(
            "input has {} values, network expects {}",
            x.len(),
            net.input_dim()
        )));
    }
    let count = 1usize << n;
    let mut rows = Vec::with_capacity(count * x.len());
    for _ in 0..count {
        rows.extend_from_slice(x);
    }
    let batch = Tensor::from_vec(&[count, x.len()], rows)?;
    let mut mask_data = Vec::with_capacity(count * n);
    for s in 0..count {
        mask_data.extend(subset_mask(s, n));
    }
    let mask = Tensor::from_vec(&[count, n], mask_data)?;
    let masks = match population {
        Population::Input => Masks {
            input: Some(mask),
            hidden: vec![None],
        },
        Population::Hidden => Masks {
            input: None,
            hidden: vec![Some(mask)],
        },
    };
    let (out, _) = network_forward(net, &batch, Mode::Stochastic(&masks))?;
    Ok((0..count).map(|s| out.row(s).to_vec()).collect())
}

/// Softmax distribution of each of the `2^N` hidden-unit subnetworks.
pub fn enumerate_subnet_distributions(net: &Network, x: &[f64]) -> Result<Vec<Vec<f64>>> {
    if net.output_layer().activation != Activation::Softmax {
        return Err(Error::Applicability("distributions need a softmax output layer".into()));
    }
    enumerate_subnet_outputs(net, x, Population::Hidden)
}

/// Entrywise geometric mean of probability rows, renormalized to sum to one.
pub fn geometric_mean_distribution(dists: &[Vec<f64>]) -> Result<Vec<f64>> {
    let w = vec![1.0 / dists.len().max(1) as f64; dists.len()];
    weighted_geometric_mean_distribution(dists, &w)
}

/// `normalize(Π_s p_s^{w_s})`, computed in log space. Weights must be
/// nonnegative and sum to one.
pub fn weighted_geometric_mean_distribution(dists: &[Vec<f64>], weights: &[f64]) -> Result<Vec<f64>> {
    let Some(first) = dists.first() else {
        return Err(Error::arg("no distributions to average"));
    };
    if weights.len() != dists.len() {
        return Err(Error::arg("one weight per distribution is required"));
    }
    if weights.iter().any(|&w| !(w >= 0.0)) || (weights.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::arg("weights must be nonnegative and sum to one"));
    }
    let k = first.len();
    let mut log_mean = vec![0.0; k];
    for (row, &w) in dists.iter().zip(weights) {
        if row.len() != k {
            return Err(Error::shape("distributions have different lengths"));
        }
        if let Some(bad) = row.iter().find(|&&p| !(p > 0.0)) {
            return Err(Error::Domain(format!(
                "probability {bad} is not strictly positive; its logarithm is undefined"
            )));
        }
        let total: f64 = row.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Domain(format!("row sums to {total}, not 1")));
        }
        for (acc, p) in log_mean.iter_mut().zip(row) {
            *acc += w * p.ln();
        }
    }
    let lse = log_sum_exp(&log_mean);
    Ok(log_mean.iter().map(|v| (v - lse).exp()).collect())
}
