//! Network descriptions, realized networks, and the masked forward and
//! backward passes used for dropout training.

use std::fmt;

use crate::convnet::{convnet_backward, ConvStack, ConvTrace, Stage, StageGrads, StageSpec};
use crate::error::{Error, Result};
use crate::layers::{check_binary, dense_forward, Activation, DenseLayer};
use crate::rng::RandomSource;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerSpec {
    pub units: usize,
    pub activation: Activation,
}

/// Optional convolutional front-end applied to `[C, H, W]` images before the
/// fully connected layers.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvFrontSpec {
    pub input_shape: [usize; 3],
    pub stages: Vec<StageSpec>,
}

/// Layer-by-layer architecture.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkSpec {
    pub input_dim: usize,
    pub conv: Option<ConvFrontSpec>,
    /// Fully connected layers; the last one is the output layer.
    pub layers: Vec<LayerSpec>,
}

impl NetworkSpec {
    /// Plain fully connected net, e.g. `dense(&[784, 800, 800, 10], Relu, Softmax)`.
    pub fn dense(sizes: &[usize], hidden: Activation, output: Activation) -> Self {
        let n = sizes.len();
        let layers = sizes[1..]
            .iter()
            .enumerate()
            .map(|(i, &units)| LayerSpec {
                units,
                activation: if i + 2 == n { output } else { hidden },
            })
            .collect();
        NetworkSpec {
            input_dim: sizes[0],
            conv: None,
            layers,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let Some(last) = self.layers.last() else {
            return Err(Error::Config("network needs at least one layer".into()));
        };
        if self.input_dim == 0 || self.layers.iter().any(|l| l.units == 0) {
            return Err(Error::Config("layer sizes must be positive".into()));
        }
        if !matches!(last.activation, Activation::Softmax | Activation::Linear) {
            return Err(Error::Config(
                "output layer must be softmax (classification) or linear (regression)".into(),
            ));
        }
        if self.layers[..self.layers.len() - 1]
            .iter()
            .any(|l| l.activation == Activation::Softmax)
        {
            return Err(Error::Config("softmax is only allowed on the output layer".into()));
        }
        if let Some(conv) = &self.conv {
            let [c, h, w] = conv.input_shape;
            if c * h * w != self.input_dim {
                return Err(Error::Config(format!(
                    "image shape {c}x{h}x{w} does not match input size {}",
                    self.input_dim
                )));
            }
        }
        Ok(())
    }

    pub fn hidden_layers(&self) -> usize {
        self.layers.len() - 1
    }

    pub fn outputs(&self) -> usize {
        self.layers.last().map_or(0, |l| l.units)
    }

    /// Key/value lines describing the architecture (used by checkpoints).
    pub fn to_descriptor(&self) -> String {
        let mut out = format!("input = {}\n", self.input_dim);
        if let Some(conv) = &self.conv {
            let [c, h, w] = conv.input_shape;
            let stages: Vec<String> = conv.stages.iter().map(|s| s.to_string()).collect();
            out.push_str(&format!("image = {c}x{h}x{w}\nconv = {}\n", stages.join(";")));
        }
        let layers: Vec<String> = self
            .layers
            .iter()
            .map(|l| format!("{}:{}", l.units, l.activation))
            .collect();
        out.push_str(&format!("layers = {}\n", layers.join(",")));
        out
    }

    pub fn from_descriptor(text: &str) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(format!("bad network descriptor: {m}"));
        let mut input = None;
        let mut image = None;
        let mut stages = None;
        let mut layers = None;
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line.split_once('=').ok_or_else(|| bad(line))?;
            let v = v.trim();
            match k.trim() {
                "input" => input = Some(v.parse::<usize>().map_err(|_| bad(line))?),
                "image" => image = Some(parse_image_shape(v).map_err(|_| bad(line))?),
                "conv" => {
                    stages = Some(
                        v.split(';')
                            .filter(|s| !s.trim().is_empty())
                            .map(str::parse)
                            .collect::<Result<Vec<StageSpec>>>()?,
                    )
                }
                "layers" => {
                    let parsed = v
                        .split(',')
                        .map(|item| {
                            let (u, a) = item.split_once(':').ok_or_else(|| bad(item))?;
                            Ok(LayerSpec {
                                units: u.trim().parse().map_err(|_| bad(item))?,
                                activation: a.parse()?,
                            })
                        })
                        .collect::<Result<Vec<_>>>()?;
                    layers = Some(parsed);
                }
                _ => return Err(bad(line)),
            }
        }
        let conv = match (image, stages) {
            (Some(input_shape), Some(stages)) => Some(ConvFrontSpec { input_shape, stages }),
            (None, None) => None,
            _ => return Err(bad("image and conv must appear together")),
        };
        let spec = NetworkSpec {
            input_dim: input.ok_or_else(|| bad("missing input"))?,
            conv,
            layers: layers.ok_or_else(|| bad("missing layers"))?,
        };
        spec.validate()?;
        Ok(spec)
    }
}

impl fmt::Display for NetworkSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.input_dim)?;
        if let Some(conv) = &self.conv {
            for s in &conv.stages {
                write!(f, "-[{s}]")?;
            }
        }
        for l in &self.layers {
            write!(f, "-{}", l.units)?;
        }
        Ok(())
    }
}

/// Parses `CxHxW`.
pub fn parse_image_shape(s: &str) -> Result<[usize; 3]> {
    let parts: Vec<usize> = s
        .split('x')
        .map(|p| p.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::Config(format!("bad image shape '{s}'")))?;
    match parts[..] {
        [c, h, w] if c > 0 && h > 0 && w > 0 => Ok([c, h, w]),
        _ => Err(Error::Config(format!("bad image shape '{s}'"))),
    }
}

/// Initialization constants.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InitConfig {
    /// Standard deviation of the zero-mean normal weight draws.
    pub weight_sd: f64,
    pub hidden_bias: f64,
    pub output_bias: f64,
    /// Bias of convolutional and locally-connected banks.
    pub conv_bias: f64,
}

impl Default for InitConfig {
    fn default() -> Self {
        InitConfig {
            weight_sd: 0.01,
            hidden_bias: 0.0,
            output_bias: 0.0,
            conv_bias: 1.0,
        }
    }
}

/// How the entries of a weight tensor group into per-unit incoming vectors.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnitLayout {
    /// `[n_in, n_out]` matrix; unit `j` owns column `j`.
    Columns,
    /// Consecutive chunks of the given length, one per unit.
    Chunks(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamRole {
    Bias,
    /// Incoming weights. `hidden` is false only for the output layer.
    Weights { layout: UnitLayout, hidden: bool },
}

/// Mutable view of one parameter tensor.
pub struct ParamSlot<'a> {
    pub value: &'a mut Tensor,
    pub role: ParamRole,
}

/// Realized parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub conv: Option<ConvStack>,
    pub layers: Vec<DenseLayer>,
}

impl Network {
    /// Draws weights from N(0, weight_sd²). A conv front-end uses the
    /// variance-doubling rule of [`ConvStack::build`] on `probe` when given.
    pub fn init(
        spec: &NetworkSpec,
        init: &InitConfig,
        probe: Option<&Tensor>,
        rng: &mut RandomSource,
    ) -> Result<Self> {
        spec.validate()?;
        let conv = match &spec.conv {
            Some(front) => Some(ConvStack::build(
                front.input_shape,
                &front.stages,
                init.weight_sd,
                init.conv_bias,
                probe,
                rng,
            )?),
            None => None,
        };
        let mut n_in = match &conv {
            Some(stack) => stack.output_len()?,
            None => spec.input_dim,
        };
        let mut layers = Vec::with_capacity(spec.layers.len());
        for (i, l) in spec.layers.iter().enumerate() {
            let w = rng.gauss_sample(0.0, init.weight_sd, &[n_in, l.units])?;
            let bias = if i + 1 == spec.layers.len() {
                init.output_bias
            } else {
                init.hidden_bias
            };
            layers.push(DenseLayer::new(w, Tensor::filled(&[l.units], bias), l.activation)?);
            n_in = l.units;
        }
        Ok(Network { conv, layers })
    }

    pub fn spec(&self) -> NetworkSpec {
        let conv = self.conv.as_ref().map(|s| ConvFrontSpec {
            input_shape: s.input_shape,
            stages: s.stages.iter().map(Stage::spec).collect(),
        });
        let input_dim = match &conv {
            Some(c) => c.input_shape.iter().product(),
            None => self.layers[0].n_in(),
        };
        NetworkSpec {
            input_dim,
            conv,
            layers: self
                .layers
                .iter()
                .map(|l| LayerSpec {
                    units: l.n_out(),
                    activation: l.activation,
                })
                .collect(),
        }
    }

    pub fn input_dim(&self) -> usize {
        match &self.conv {
            Some(c) => c.input_shape.iter().product(),
            None => self.layers[0].n_in(),
        }
    }

    pub fn hidden_sizes(&self) -> Vec<usize> {
        self.layers[..self.layers.len() - 1]
            .iter()
            .map(DenseLayer::n_out)
            .collect()
    }

    pub fn output_layer(&self) -> &DenseLayer {
        self.layers.last().expect("network has an output layer")
    }

    /// Every parameter tensor in a fixed order: conv stages (filters, then
    /// biases) followed by dense layers (weights, then biases).
    pub fn params_mut(&mut self) -> Vec<ParamSlot<'_>> {
        let mut slots = Vec::new();
        if let Some(stack) = &mut self.conv {
            for stage in &mut stack.stages {
                match stage {
                    Stage::Conv(l) => {
                        let (_, c, fh, fw) = l.dims();
                        slots.push(ParamSlot {
                            value: &mut l.filters,
                            role: ParamRole::Weights {
                                layout: UnitLayout::Chunks(c * fh * fw),
                                hidden: true,
                            },
                        });
                        slots.push(ParamSlot {
                            value: &mut l.biases,
                            role: ParamRole::Bias,
                        });
                    }
                    Stage::Local(l) => {
                        let (_, _, _, c, fh, fw) = l.dims();
                        slots.push(ParamSlot {
                            value: &mut l.filters,
                            role: ParamRole::Weights {
                                layout: UnitLayout::Chunks(c * fh * fw),
                                hidden: true,
                            },
                        });
                        slots.push(ParamSlot {
                            value: &mut l.biases,
                            role: ParamRole::Bias,
                        });
                    }
                    _ => {}
                }
            }
        }
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter_mut().enumerate() {
            slots.push(ParamSlot {
                value: &mut layer.weights,
                role: ParamRole::Weights {
                    layout: UnitLayout::Columns,
                    hidden: i != last,
                },
            });
            slots.push(ParamSlot {
                value: &mut layer.biases,
                role: ParamRole::Bias,
            });
        }
        slots
    }

    /// Parameter tensors in [`Network::params_mut`] order.
    pub fn params(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        if let Some(stack) = &self.conv {
            for stage in &stack.stages {
                match stage {
                    Stage::Conv(l) => out.extend([&l.filters, &l.biases]),
                    Stage::Local(l) => out.extend([&l.filters, &l.biases]),
                    _ => {}
                }
            }
        }
        for layer in &self.layers {
            out.extend([&layer.weights, &layer.biases]);
        }
        out
    }

    /// Forward pass without dropout.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        Ok(network_forward(self, x, Mode::Deterministic)?.0)
    }
}

/// Per-case dropout masks for one minibatch. `hidden[l]` applies to the
/// output of hidden layer `l`; `None` entries leave a population intact.
#[derive(Debug, Clone, PartialEq)]
pub struct Masks {
    pub input: Option<Tensor>,
    pub hidden: Vec<Option<Tensor>>,
}

impl Masks {
    pub fn none(hidden_layers: usize) -> Self {
        Masks {
            input: None,
            hidden: vec![None; hidden_layers],
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub enum Mode<'a> {
    /// Full network, no masks.
    Deterministic,
    /// Dropout network induced by the given masks.
    Stochastic(&'a Masks),
}

/// Values recorded by [`network_forward`] for backpropagation.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub conv: Option<ConvTrace>,
    /// `acts[0]` is the (masked) input of the first dense layer and
    /// `acts[l + 1]` the (masked) output of dense layer `l`.
    pub acts: Vec<Tensor>,
    /// Pre-activations of every dense layer.
    pub zs: Vec<Tensor>,
    pub input_mask: Option<Tensor>,
    pub hidden_masks: Vec<Option<Tensor>>,
}

impl ForwardTrace {
    pub fn output(&self) -> &Tensor {
        self.acts.last().expect("trace has an output")
    }

    pub fn logits(&self) -> &Tensor {
        self.zs.last().expect("trace has an output")
    }
}

/// Chained forward pass. Returns the output activations (probabilities for a
/// softmax head) and the trace.
pub fn network_forward(net: &Network, x: &Tensor, mode: Mode<'_>) -> Result<(Tensor, ForwardTrace)> {
    let (batch, dim) = x.dims2()?;
    if dim != net.input_dim() {
        return Err(Error::shape(format!(
            "network expects {} inputs, got {}",
            net.input_dim(),
            dim
        )));
    }
    let hidden = net.layers.len() - 1;
    let masks = match mode {
        Mode::Deterministic => Masks::none(hidden),
        Mode::Stochastic(m) => {
            if m.hidden.len() != hidden {
                return Err(Error::shape(format!(
                    "{} hidden masks for {} hidden layers",
                    m.hidden.len(),
                    hidden
                )));
            }
            m.clone()
        }
    };
    let mut input = x.clone();
    if let Some(mask) = &masks.input {
        if mask.shape() != x.shape() {
            return Err(Error::shape(format!(
                "input mask {:?} does not match input {:?}",
                mask.shape(),
                x.shape()
            )));
        }
        check_binary(mask)?;
        input.mul_assign(mask)?;
    }
    let (first, conv_trace) = match &net.conv {
        Some(stack) => {
            let (flat, trace) = stack.forward(&input)?;
            (flat, Some(trace))
        }
        None => (input, None),
    };
    let mut acts = Vec::with_capacity(net.layers.len() + 1);
    let mut zs = Vec::with_capacity(net.layers.len());
    acts.push(first);
    for (l, layer) in net.layers.iter().enumerate() {
        let mask = if l < hidden { masks.hidden[l].as_ref() } else { None };
        if let Some(m) = mask {
            if m.rows() != batch {
                return Err(Error::shape("hidden mask batch size mismatch"));
            }
        }
        let (z, a) = dense_forward(layer, &acts[l], mask)?;
        zs.push(z);
        acts.push(a);
    }
    let out = acts.last().cloned().expect("at least one layer");
    Ok((
        out,
        ForwardTrace {
            conv: conv_trace,
            acts,
            zs,
            input_mask: masks.input,
            hidden_masks: masks.hidden,
        },
    ))
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseGrads {
    pub weights: Tensor,
    pub biases: Tensor,
}

/// Parameter gradients in [`Network::params_mut`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub conv: Vec<StageGrads>,
    pub dense: Vec<DenseGrads>,
}

impl Gradients {
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for g in &self.conv {
            if let (Some(f), Some(b)) = (&g.filters, &g.biases) {
                out.extend([f, b]);
            }
        }
        for g in &self.dense {
            out.extend([&g.weights, &g.biases]);
        }
        out
    }
}

/// Exact gradients of the (masked) network. `grad_output` is the gradient of
/// the loss with respect to the output layer's pre-activations (for a
/// softmax head, the logits gradient returned by
/// [`crate::layers::softmax_xent`]).
pub fn network_backward(net: &Network, trace: &ForwardTrace, grad_output: &Tensor) -> Result<Gradients> {
    let n = net.layers.len();
    if trace.zs.len() != n || trace.acts.len() != n + 1 || trace.conv.is_some() != net.conv.is_some() {
        return Err(Error::Consistency("trace was produced by a different network".into()));
    }
    if grad_output.shape() != trace.zs[n - 1].shape() {
        return Err(Error::Consistency(format!(
            "output gradient {:?} does not match output {:?}",
            grad_output.shape(),
            trace.zs[n - 1].shape()
        )));
    }
    let mut dense = Vec::with_capacity(n);
    let mut dz = grad_output.clone();
    for l in (0..n).rev() {
        let layer = &net.layers[l];
        let input = &trace.acts[l];
        if input.cols() != layer.n_in() || trace.zs[l].cols() != layer.n_out() {
            return Err(Error::Consistency(format!("trace layer {l} has the wrong width")));
        }
        let weights = input.matmul_tn(&dz)?;
        let biases = dz.sum_rows()?;
        dense.push(DenseGrads { weights, biases });
        let need_input_grad = l > 0 || net.conv.is_some();
        if !need_input_grad {
            break;
        }
        let mut da = dz.matmul_nt(&layer.weights)?;
        if l > 0 {
            let below = &net.layers[l - 1];
            if let Some(mask) = &trace.hidden_masks[l - 1] {
                da.mul_assign(mask)?;
            }
            let z = trace.zs[l - 1].data();
            let a = trace.acts[l].data();
            for (i, g) in da.data_mut().iter_mut().enumerate() {
                if *g != 0.0 {
                    *g *= below.activation.derivative(z[i], a[i]);
                }
            }
        }
        dz = da;
    }
    dense.reverse();
    let conv = match (&net.conv, &trace.conv) {
        (Some(stack), Some(ct)) => convnet_backward(stack, ct, &dz)?.1,
        _ => Vec::new(),
    };
    Ok(Gradients { conv, dense })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::softmax_xent;

    fn small_net(seed: u64, sizes: &[usize], hidden: Activation) -> Network {
        let mut rng = RandomSource::new(seed);
        let spec = NetworkSpec::dense(sizes, hidden, Activation::Softmax);
        let init = InitConfig {
            weight_sd: 0.7,
            hidden_bias: 0.1,
            ..InitConfig::default()
        };
        Network::init(&spec, &init, None, &mut rng).unwrap()
    }

    #[test]
    fn spec_validation() {
        let mut spec = NetworkSpec::dense(&[4, 3, 2], Activation::Relu, Activation::Softmax);
        assert!(spec.validate().is_ok());
        spec.layers[0].activation = Activation::Softmax;
        assert!(spec.validate().is_err());
        let relu_out = NetworkSpec::dense(&[4, 3, 2], Activation::Relu, Activation::Relu);
        assert!(relu_out.validate().is_err());
    }

    #[test]
    fn descriptor_round_trip() {
        let mut spec = NetworkSpec::dense(&[64, 5, 3], Activation::Logistic, Activation::Linear);
        assert_eq!(NetworkSpec::from_descriptor(&spec.to_descriptor()).unwrap(), spec);
        spec.conv = Some(ConvFrontSpec {
            input_shape: [1, 8, 8],
            stages: vec!["conv:4x3x3/1".parse().unwrap(), StageSpec::Relu],
        });
        assert_eq!(NetworkSpec::from_descriptor(&spec.to_descriptor()).unwrap(), spec);
    }

    #[test]
    fn all_ones_masks_match_deterministic() {
        let net = small_net(1, &[5, 4, 4, 3], Activation::Relu);
        let x = RandomSource::new(2).gauss_sample(0.0, 1.0, &[6, 5]).unwrap();
        let masks = Masks {
            input: Some(Tensor::filled(&[6, 5], 1.0)),
            hidden: vec![Some(Tensor::filled(&[6, 4], 1.0)); 2],
        };
        let (p1, _) = network_forward(&net, &x, Mode::Stochastic(&masks)).unwrap();
        let (p2, _) = network_forward(&net, &x, Mode::Deterministic).unwrap();
        assert_eq!(p1, p2);
        for i in 0..6 {
            let s: f64 = p2.row(i).iter().sum();
            assert!((s - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn dropped_unit_incoming_weights_do_not_matter() {
        let net = small_net(3, &[5, 4, 3], Activation::Relu);
        let x = RandomSource::new(4).gauss_sample(0.0, 1.0, &[3, 5]).unwrap();
        let mut mask = Tensor::filled(&[3, 4], 1.0);
        for i in 0..3 {
            mask.row_mut(i)[2] = 0.0;
        }
        let masks = Masks {
            input: None,
            hidden: vec![Some(mask)],
        };
        let (before, _) = network_forward(&net, &x, Mode::Stochastic(&masks)).unwrap();
        let mut perturbed = net.clone();
        let mut rng = RandomSource::new(5);
        for r in 0..5 {
            perturbed.layers[0].weights.data_mut()[r * 4 + 2] += rng.uniform_range(-10.0, 10.0);
        }
        perturbed.layers[0].biases.data_mut()[2] = 42.0;
        let (after, _) = network_forward(&perturbed, &x, Mode::Stochastic(&masks)).unwrap();
        assert_eq!(before, after);
    }

    #[test]
    fn zero_output_gradient_gives_zero_gradients() {
        let net = small_net(6, &[4, 3, 2], Activation::Logistic);
        let x = RandomSource::new(7).gauss_sample(0.0, 1.0, &[2, 4]).unwrap();
        let (_, trace) = network_forward(&net, &x, Mode::Deterministic).unwrap();
        let grads = network_backward(&net, &trace, &Tensor::zeros(&[2, 2])).unwrap();
        for t in grads.tensors() {
            assert!(t.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn masked_unit_gets_zero_incoming_gradient() {
        let net = small_net(8, &[6, 4, 3], Activation::Relu);
        let x = RandomSource::new(9).gauss_sample(0.0, 1.0, &[1, 6]).unwrap();
        let masks = Masks {
            input: None,
            hidden: vec![Some(Tensor::from_rows(&[vec![1.0, 0.0, 1.0, 1.0]]))],
        };
        let (_, trace) = network_forward(&net, &x, Mode::Stochastic(&masks)).unwrap();
        let (_, g) = softmax_xent(trace.logits(), &[2]).unwrap();
        let grads = network_backward(&net, &trace, &g).unwrap();
        let gw = &grads.dense[0].weights;
        for r in 0..6 {
            assert_eq!(gw.data()[r * 4 + 1], 0.0);
        }
        assert_eq!(grads.dense[0].biases.data()[1], 0.0);
        // Outgoing weights of the dropped unit also receive nothing.
        assert!(grads.dense[1].weights.row(1).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mismatched_trace_is_rejected() {
        let net = small_net(10, &[4, 3, 2], Activation::Relu);
        let other = small_net(10, &[4, 3, 3, 2], Activation::Relu);
        let x = Tensor::zeros(&[1, 4]);
        let (_, trace) = network_forward(&other, &x, Mode::Deterministic).unwrap();
        assert!(matches!(
            network_backward(&net, &trace, &Tensor::zeros(&[1, 2])),
            Err(Error::Consistency(_))
        ));
    }

    /// Forward pass of a copy of `net` with the masked hidden units removed.
    fn reduced_forward(net: &Network, x: &Tensor, keep: &[Vec<bool>]) -> Tensor {
        let mut layers = net.layers.clone();
        for (l, kept) in keep.iter().enumerate() {
            let cols: Vec<usize> = (0..kept.len()).filter(|&j| kept[j]).collect();
            let w = layers[l].weights.clone();
            let n_in = layers[l].n_in();
            let mut nw = Vec::new();
            for r in 0..n_in {
                for &c in &cols {
                    nw.push(w.data()[r * kept.len() + c]);
                }
            }
            let nb: Vec<f64> = cols.iter().map(|&c| net.layers[l].biases.data()[c]).collect();
            layers[l].weights = Tensor::from_vec(&[n_in, cols.len()], nw).unwrap();
            layers[l].biases = Tensor::from_vec(&[cols.len()], nb).unwrap();
            let next = layers[l + 1].weights.clone();
            let rows: Vec<f64> = cols.iter().flat_map(|&c| next.row(c).to_vec()).collect();
            layers[l + 1].weights = Tensor::from_vec(&[cols.len(), next.cols()], rows).unwrap();
        }
        let reduced = Network { conv: None, layers };
        reduced.predict(x).unwrap()
    }

    #[test]
    fn masked_forward_equals_reduced_network() {
        let net = small_net(11, &[5, 6, 5, 3], Activation::Relu);
        let mut rng = RandomSource::new(12);
        for _ in 0..20 {
            let x = rng.gauss_sample(0.0, 1.0, &[1, 5]).unwrap();
            let mut keep: Vec<Vec<bool>> = Vec::new();
            let mut masks = Masks::none(2);
            for (l, &n) in [6usize, 5].iter().enumerate() {
                let mut k: Vec<bool> = (0..n).map(|_| rng.uniform() < 0.5).collect();
                k[0] = true;
                masks.hidden[l] = Some(
                    Tensor::from_vec(&[1, n], k.iter().map(|&b| b as u8 as f64).collect()).unwrap(),
                );
                keep.push(k);
            }
            let (masked, _) = network_forward(&net, &x, Mode::Stochastic(&masks)).unwrap();
            let reduced = reduced_forward(&net, &x, &keep);
            assert!(masked.max_abs_diff(&reduced) <= 1e-12);
        }
    }
}
