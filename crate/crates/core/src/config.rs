//! Flat `key = value` training configuration.
//!
//! Lines are `dotted.key = value`; `#` starts a comment. Every key can be
//! overridden by a `--key=value` command-line flag, and unknown keys are
//! rejected. `preset` is applied before all other keys regardless of where
//! it appears.

use std::collections::BTreeMap;
use std::path::PathBuf;

use crate::convnet::StageSpec;
use crate::dropout::DropoutSpec;
use crate::error::{Error, Result};
use crate::layers::Activation;
use crate::network::{parse_image_shape, ConvFrontSpec, InitConfig, LayerSpec, NetworkSpec};
use crate::optimizer::OptimizerConfig;

/// Architecture as configured; the input width comes from the data unless
/// given explicitly.
#[derive(Debug, Clone, PartialEq)]
pub struct ArchConfig {
    pub input: Option<usize>,
    /// Hidden layer sizes followed by the output size.
    pub layers: Vec<usize>,
    pub hidden_activation: Activation,
    pub output_activation: Activation,
    pub image: Option<[usize; 3]>,
    pub conv: Vec<StageSpec>,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            input: None,
            layers: vec![800, 800, 10],
            hidden_activation: Activation::Relu,
            output_activation: Activation::Softmax,
            image: None,
            conv: Vec::new(),
        }
    }
}

impl ArchConfig {
    pub fn hidden_layers(&self) -> usize {
        self.layers.len().saturating_sub(1)
    }

    /// Network description for data with `data_dim` features per case.
    pub fn network_spec(&self, data_dim: usize) -> Result<NetworkSpec> {
        let input_dim = self.input.unwrap_or(data_dim);
        if input_dim != data_dim {
            return Err(Error::Config(format!(
                "net.input = {input_dim} but the data has {data_dim} features"
            )));
        }
        let n = self.layers.len();
        let layers = self
            .layers
            .iter()
            .enumerate()
            .map(|(i, &units)| LayerSpec {
                units,
                activation: if i + 1 == n {
                    self.output_activation
                } else {
                    self.hidden_activation
                },
            })
            .collect();
        let conv = match (self.image, self.conv.is_empty()) {
            (Some(input_shape), false) => Some(ConvFrontSpec {
                input_shape,
                stages: self.conv.clone(),
            }),
            (None, true) => None,
            (Some(_), true) => return Err(Error::Config("net.image given without net.conv".into())),
            (None, false) => return Err(Error::Config("net.conv needs net.image".into())),
        };
        if let Some(c) = &conv {
            let pixels: usize = c.input_shape.iter().product();
            if pixels != input_dim {
                return Err(Error::Config(format!(
                    "net.image has {pixels} values but cases have {input_dim} features"
                )));
            }
        }
        let spec = NetworkSpec {
            input_dim,
            conv,
            layers,
        };
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DataConfig {
    pub train_images: Option<PathBuf>,
    pub train_labels: Option<PathBuf>,
    pub test_images: Option<PathBuf>,
    pub test_labels: Option<PathBuf>,
    /// Keep only the first `n` training cases.
    pub train_limit: Option<usize>,
    pub test_limit: Option<usize>,
    /// Standardize features with training-set statistics.
    pub standardize: bool,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct OutputConfig {
    /// Metrics CSV, appended to.
    pub metrics: Option<PathBuf>,
    /// Checkpoint written after the final epoch (and every `checkpoint_every`).
    pub checkpoint: Option<PathBuf>,
    pub checkpoint_every: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,
    pub epochs: usize,
    /// Test error is measured every this many epochs and after the last.
    pub eval_every: usize,
    pub net: ArchConfig,
    pub init: InitConfig,
    pub dropout: DropoutSpec,
    pub optimizer: OptimizerConfig,
    pub data: DataConfig,
    pub output: OutputConfig,
    /// Record elapsed seconds in the metrics; when false the column is 0 so
    /// that logs of identical runs compare equal byte for byte.
    pub wallclock: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let net = ArchConfig::default();
        let hidden = net.hidden_layers();
        TrainConfig {
            seed: 1,
            epochs: 3000,
            eval_every: 1,
            net,
            init: InitConfig::default(),
            dropout: DropoutSpec::standard(hidden),
            optimizer: OptimizerConfig::default(),
            data: DataConfig::default(),
            output: OutputConfig::default(),
            wallclock: true,
        }
    }
}

/// Every recognized key.
pub const KEYS: &[&str] = &[
    "preset",
    "seed",
    "epochs",
    "eval_every",
    "net.input",
    "net.layers",
    "net.hidden_activation",
    "net.output",
    "net.image",
    "net.conv",
    "init.weight_sd",
    "init.hidden_bias",
    "init.output_bias",
    "init.conv_bias",
    "dropout.input_retain",
    "dropout.hidden_retain",
    "optimizer.eps0",
    "optimizer.decay_f",
    "optimizer.p_i",
    "optimizer.p_f",
    "optimizer.ramp_epochs",
    "optimizer.max_sq_norm",
    "optimizer.batch_size",
    "optimizer.constrain_output",
    "data.train_images",
    "data.train_labels",
    "data.test_images",
    "data.test_labels",
    "data.train_limit",
    "data.test_limit",
    "data.standardize",
    "output.metrics",
    "output.checkpoint",
    "output.checkpoint_every",
    "metrics.wallclock",
];

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse '{v}'")))
}

fn boolean(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true or false, got '{v}'"))),
    }
}

fn optional<T: std::str::FromStr>(key: &str, v: &str) -> Result<Option<T>> {
    if v == "none" {
        Ok(None)
    } else {
        num(key, v).map(Some)
    }
}

fn list<T: std::str::FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',').map(|p| num(key, p.trim())).collect()
}

/// Ordered `key → value` pairs of one config source.
pub type Entries = Vec<(String, String)>;

/// Parses config text into key/value pairs, rejecting unknown keys and
/// duplicates.
pub fn parse_entries(text: &str) -> Result<Entries> {
    let mut seen = BTreeMap::new();
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected 'key = value'", i + 1)))?;
        let (k, v) = (k.trim().to_string(), v.trim().to_string());
        check_key(&k)?;
        if seen.insert(k.clone(), i + 1).is_some() {
            return Err(Error::Config(format!("line {}: duplicate key '{k}'", i + 1)));
        }
        out.push((k, v));
    }
    Ok(out)
}

/// Parses `--key=value` flags.
pub fn parse_overrides<S: AsRef<str>>(flags: &[S]) -> Result<Entries> {
    flags
        .iter()
        .map(|f| {
            let f = f.as_ref();
            let body = f.strip_prefix("--").unwrap_or(f);
            let (k, v) = body
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override '{f}' is not --key=value")))?;
            check_key(k)?;
            Ok((k.to_string(), v.to_string()))
        })
        .collect()
}

fn check_key(k: &str) -> Result<()> {
    if KEYS.contains(&k) {
        Ok(())
    } else {
        Err(Error::Config(format!("unknown key '{k}'")))
    }
}

impl TrainConfig {
    /// The recipe of the large MNIST experiments: 784-800-800-10 ReLU net,
    /// 20% input and 50% hidden dropout, max-norm 15, decaying learning
    /// rate and ramped momentum.
    pub fn paper() -> Self {
        Self::default()
    }

    /// Constant small learning rate and no norm constraint, for adjusting
    /// an already trained net.
    pub fn finetune() -> Self {
        TrainConfig {
            optimizer: OptimizerConfig::finetune(),
            ..Self::default()
        }
    }

    /// Builds a config from file text plus overrides (overrides win).
    pub fn from_sources(text: &str, overrides: &Entries) -> Result<Self> {
        let mut entries = parse_entries(text)?;
        entries.extend(overrides.iter().cloned());
        Self::from_entries(&entries)
    }

    pub fn from_entries(entries: &Entries) -> Result<Self> {
        let preset = entries
            .iter()
            .rev()
            .find(|(k, _)| k == "preset")
            .map(|(_, v)| v.as_str());
        let mut cfg = match preset {
            None | Some("paper") => Self::paper(),
            Some("finetune") => Self::finetune(),
            Some(other) => return Err(Error::Config(format!("unknown preset '{other}'"))),
        };
        let mut hidden_retain: Option<Vec<f64>> = None;
        for (k, v) in entries {
            let v = v.as_str();
            let k = k.as_str();
            match k {
                "preset" => {}
                "seed" => cfg.seed = num(k, v)?,
                "epochs" => cfg.epochs = num(k, v)?,
                "eval_every" => cfg.eval_every = num(k, v)?,
                "net.input" => cfg.net.input = optional(k, v)?,
                "net.layers" => cfg.net.layers = list(k, v)?,
                "net.hidden_activation" => cfg.net.hidden_activation = v.parse()?,
                "net.output" => cfg.net.output_activation = v.parse()?,
                "net.image" => {
                    cfg.net.image = if v == "none" {
                        None
                    } else {
                        Some(parse_image_shape(v)?)
                    }
                }
                "net.conv" => {
                    cfg.net.conv = v
                        .split(';')
                        .map(str::trim)
                        .filter(|s| !s.is_empty() && *s != "none")
                        .map(str::parse)
                        .collect::<Result<_>>()?
                }
                "init.weight_sd" => cfg.init.weight_sd = num(k, v)?,
                "init.hidden_bias" => cfg.init.hidden_bias = num(k, v)?,
                "init.output_bias" => cfg.init.output_bias = num(k, v)?,
                "init.conv_bias" => cfg.init.conv_bias = num(k, v)?,
                "dropout.input_retain" => cfg.dropout.input_retain = num(k, v)?,
                "dropout.hidden_retain" => hidden_retain = Some(list(k, v)?),
                "optimizer.eps0" => cfg.optimizer.eps0 = num(k, v)?,
                "optimizer.decay_f" => cfg.optimizer.decay_f = num(k, v)?,
                "optimizer.p_i" => cfg.optimizer.p_i = num(k, v)?,
                "optimizer.p_f" => cfg.optimizer.p_f = num(k, v)?,
                "optimizer.ramp_epochs" => cfg.optimizer.ramp_epochs = num(k, v)?,
                "optimizer.max_sq_norm" => cfg.optimizer.max_sq_norm = optional(k, v)?,
                "optimizer.batch_size" => cfg.optimizer.batch_size = num(k, v)?,
                "optimizer.constrain_output" => cfg.optimizer.constrain_output = boolean(k, v)?,
                "data.train_images" => cfg.data.train_images = Some(v.into()),
                "data.train_labels" => cfg.data.train_labels = Some(v.into()),
                "data.test_images" => cfg.data.test_images = Some(v.into()),
                "data.test_labels" => cfg.data.test_labels = Some(v.into()),
                "data.train_limit" => cfg.data.train_limit = optional(k, v)?,
                "data.test_limit" => cfg.data.test_limit = optional(k, v)?,
                "data.standardize" => cfg.data.standardize = boolean(k, v)?,
                "output.metrics" => cfg.output.metrics = Some(v.into()),
                "output.checkpoint" => cfg.output.checkpoint = Some(v.into()),
                "output.checkpoint_every" => cfg.output.checkpoint_every = optional(k, v)?,
                "metrics.wallclock" => cfg.wallclock = boolean(k, v)?,
                _ => return Err(Error::Config(format!("unknown key '{k}'"))),
            }
        }
        let hidden = cfg.net.hidden_layers();
        cfg.dropout.hidden_retain = match hidden_retain {
            Some(r) if r.len() == 1 => vec![r[0]; hidden],
            Some(r) => r,
            None => {
                let r = cfg.dropout.hidden_retain.first().copied().unwrap_or(0.5);
                vec![r; hidden]
            }
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.eval_every == 0 {
            return Err(Error::Config("eval_every must be at least 1".into()));
        }
        if self.net.layers.is_empty() || self.net.layers.contains(&0) {
            return Err(Error::Config("net.layers must list positive sizes".into()));
        }
        if self.net.output_activation != Activation::Softmax {
            return Err(Error::Config("training uses a softmax output layer".into()));
        }
        if self.net.hidden_activation == Activation::Softmax {
            return Err(Error::Config("softmax is not a hidden activation".into()));
        }
        if !(self.init.weight_sd >= 0.0 && self.init.weight_sd.is_finite()) {
            return Err(Error::Config("init.weight_sd must be finite and nonnegative".into()));
        }
        self.dropout.validate()?;
        if self.dropout.hidden_retain.len() != self.net.hidden_layers() {
            return Err(Error::Config(format!(
                "dropout.hidden_retain lists {} values for {} hidden layers",
                self.dropout.hidden_retain.len(),
                self.net.hidden_layers()
            )));
        }
        self.optimizer
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }

    /// Canonical `key = value` rendering; parses back to an equal config.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut put = |k: &str, v: String| out.push_str(&format!("{k} = {v}\n"));
        let opt = |v: Option<String>| v.unwrap_or_else(|| "none".into());
        let join = |v: &[f64]| v.iter().map(f64::to_string).collect::<Vec<_>>().join(",");
        put("seed", self.seed.to_string());
        put("epochs", self.epochs.to_string());
        put("eval_every", self.eval_every.to_string());
        put("net.input", opt(self.net.input.map(|v| v.to_string())));
        put(
            "net.layers",
            self.net.layers.iter().map(usize::to_string).collect::<Vec<_>>().join(","),
        );
        put("net.hidden_activation", self.net.hidden_activation.to_string());
        put("net.output", self.net.output_activation.to_string());
        put(
            "net.image",
            opt(self.net.image.map(|[c, h, w]| format!("{c}x{h}x{w}"))),
        );
        let conv: Vec<String> = self.net.conv.iter().map(ToString::to_string).collect();
        put("net.conv", if conv.is_empty() { "none".into() } else { conv.join(";") });
        put("init.weight_sd", self.init.weight_sd.to_string());
        put("init.hidden_bias", self.init.hidden_bias.to_string());
        put("init.output_bias", self.init.output_bias.to_string());
        put("init.conv_bias", self.init.conv_bias.to_string());
        put("dropout.input_retain", self.dropout.input_retain.to_string());
        put("dropout.hidden_retain", join(&self.dropout.hidden_retain));
        let o = &self.optimizer;
        put("optimizer.eps0", o.eps0.to_string());
        put("optimizer.decay_f", o.decay_f.to_string());
        put("optimizer.p_i", o.p_i.to_string());
        put("optimizer.p_f", o.p_f.to_string());
        put("optimizer.ramp_epochs", o.ramp_epochs.to_string());
        put("optimizer.max_sq_norm", opt(o.max_sq_norm.map(|v| v.to_string())));
        put("optimizer.batch_size", o.batch_size.to_string());
        put("optimizer.constrain_output", o.constrain_output.to_string());
        let path = |p: &Option<PathBuf>, k: &str, put: &mut dyn FnMut(&str, String)| {
            if let Some(p) = p {
                put(k, p.display().to_string());
            }
        };
        path(&self.data.train_images, "data.train_images", &mut put);
        path(&self.data.train_labels, "data.train_labels", &mut put);
        path(&self.data.test_images, "data.test_images", &mut put);
        path(&self.data.test_labels, "data.test_labels", &mut put);
        put("data.train_limit", opt(self.data.train_limit.map(|v| v.to_string())));
        put("data.test_limit", opt(self.data.test_limit.map(|v| v.to_string())));
        put("data.standardize", self.data.standardize.to_string());
        path(&self.output.metrics, "output.metrics", &mut put);
        path(&self.output.checkpoint, "output.checkpoint", &mut put);
        put(
            "output.checkpoint_every",
            opt(self.output.checkpoint_every.map(|v| v.to_string())),
        );
        put("metrics.wallclock", self.wallclock.to_string());
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_the_mnist_recipe() {
        let c = TrainConfig::from_sources("", &vec![]).unwrap();
        assert_eq!(c.net.layers, vec![800, 800, 10]);
        assert_eq!(c.dropout.input_retain, 0.8);
        assert_eq!(c.dropout.hidden_retain, vec![0.5, 0.5]);
        assert_eq!(c.optimizer.eps0, 10.0);
        assert_eq!(c.optimizer.max_sq_norm, Some(15.0));
        assert_eq!(c.optimizer.batch_size, 100);
        assert_eq!(c.epochs, 3000);
    }

    #[test]
    fn keys_comments_and_overrides() {
        let text = "# tiny\nseed = 7\nnet.layers = 32, 10  # two layers\noptimizer.eps0 = 1.0\n";
        let over = parse_overrides(&["--optimizer.eps0=0.5", "--dropout.hidden_retain=1"]).unwrap();
        let c = TrainConfig::from_sources(text, &over).unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.net.layers, vec![32, 10]);
        assert_eq!(c.optimizer.eps0, 0.5);
        assert_eq!(c.dropout.hidden_retain, vec![1.0]);
    }

    #[test]
    fn unknown_and_malformed_entries_are_config_errors() {
        for text in ["optimizer.epsilon = 1", "seed 3", "seed = x", "seed = 1\nseed = 2", "net.output = relu"] {
            assert!(matches!(TrainConfig::from_sources(text, &vec![]), Err(Error::Config(_))), "{text}");
        }
        assert!(matches!(parse_overrides(&["--nope=1"]), Err(Error::Config(_))));
        assert!(matches!(parse_overrides(&["--seed"]), Err(Error::Config(_))));
    }

    #[test]
    fn finetune_preset_applies_first() {
        let c = TrainConfig::from_sources("optimizer.eps0 = 0.1\npreset = finetune\n", &vec![]).unwrap();
        assert_eq!(c.optimizer.eps0, 0.1);
        assert_eq!(c.optimizer.max_sq_norm, None);
        assert_eq!(c.optimizer.decay_f, 1.0);
    }

    #[test]
    fn text_round_trip() {
        let text = "seed = 3\nnet.layers = 16,4\nnet.image = 1x4x4\nnet.conv = conv:2x3x3/1;relu;pool:max:2/1\n\
                    data.train_images = a.idx\ndata.train_limit = 50\noptimizer.max_sq_norm = none\n";
        let c = TrainConfig::from_sources(text, &vec![]).unwrap();
        let again = TrainConfig::from_sources(&c.to_text(), &vec![]).unwrap();
        assert_eq!(again, c);
    }

    #[test]
    fn network_spec_checks_data_width() {
        let c = TrainConfig::from_sources("net.layers = 5,3", &vec![]).unwrap();
        let spec = c.net.network_spec(4).unwrap();
        assert_eq!(spec.input_dim, 4);
        assert_eq!(spec.layers[0].activation, Activation::Relu);
        assert_eq!(spec.layers[1].activation, Activation::Softmax);
        let c = TrainConfig::from_sources("net.layers = 5,3\nnet.input = 9", &vec![]).unwrap();
        assert!(matches!(c.net.network_spec(4), Err(Error::Config(_))));
        let c = TrainConfig::from_sources("net.layers = 5,3\nnet.image = 1x2x3", &vec![]).unwrap();
        assert!(matches!(c.net.network_spec(6), Err(Error::Config(_))));
    }
}
