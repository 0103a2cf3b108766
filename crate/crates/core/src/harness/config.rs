//! Experiment configuration: declarative `key = value` files with CLI-style
//! overrides layered on top.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::nn::{Activation, Architecture, ConvStem};
use crate::protocol::{Protocol, WireMode};

/// Which transport an experiment runs over.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TransportKind {
    Memory,
    Loopback,
}

/// Where training data comes from.
#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    /// Gaussian blob classification with near-orthogonal class centers.
    Synthetic {
        n: usize,
        dims: usize,
        classes: usize,
        sep: f64,
        /// Defaults to the experiment seed when not given.
        seed: Option<u64>,
    },
    /// IDX-format image and label files (the classic digit-dataset layout).
    Idx { images: PathBuf, labels: PathBuf },
    /// CSV with a header; the `label` column holds the class, every other
    /// column is a feature.
    Csv { path: PathBuf },
}

/// All knobs of one experiment.
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub arch: Architecture,
    pub n_clients: u32,
    pub sparsity: f64,
    pub saliency_batches: u32,
    pub batch_size: usize,
    pub epochs: u32,
    pub lr: f64,
    pub seed: u64,
    pub protocol: Protocol,
    pub transport: TransportKind,
    pub wire: WireMode,
    pub data: DataSource,
    pub out: PathBuf,
    pub compare: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            arch: Architecture::mlp(&[20, 64, 4]).expect("default arch is valid"),
            n_clients: 5,
            sparsity: 0.9,
            saliency_batches: 10,
            batch_size: 32,
            epochs: 20,
            lr: 0.1,
            seed: 1,
            protocol: Protocol::Salient,
            transport: TransportKind::Memory,
            wire: WireMode::Full,
            data: DataSource::Synthetic {
                n: 1000,
                dims: 20,
                classes: 4,
                sep: 3.0,
                seed: None,
            },
            out: PathBuf::from("metrics.csv"),
            compare: false,
        }
    }
}

impl ExperimentConfig {
    /// Loads a flat `key = value` config file over the defaults. Lines
    /// starting with `#` and blank lines are ignored; unknown keys error.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = ExperimentConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("{}:{}: expected key = value", path.display(), lineno + 1))
            })?;
            cfg.set(key.trim(), value.trim())
                .map_err(|e| Error::Config(format!("{}:{}: {e}", path.display(), lineno + 1)))?;
        }
        Ok(cfg)
    }

    /// Applies one `key = value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| Error::Config(format!("bad value {value:?} for {key}")))
        }
        match key {
            "arch" => self.arch = parse_arch(value)?,
            "clients" | "n_clients" => self.n_clients = num(key, value)?,
            "sparsity" => self.sparsity = num(key, value)?,
            "saliency_batches" => self.saliency_batches = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "epochs" => self.epochs = num(key, value)?,
            "lr" => self.lr = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "protocol" => self.protocol = parse_protocol(value)?,
            "transport" => self.transport = parse_transport(value)?,
            "wire" => self.wire = parse_wire(value)?,
            "data" => self.data = parse_data_source(value)?,
            "out" => self.out = PathBuf::from(value),
            "compare" => {
                self.compare = match value {
                    "true" | "1" | "yes" => true,
                    "false" | "0" | "no" => false,
                    _ => return Err(Error::Config(format!("bad value {value:?} for compare"))),
                }
            }
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.arch
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        if self.n_clients == 0 {
            return Err(Error::Config("clients must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.sparsity) {
            return Err(Error::Config(format!(
                "sparsity {} outside [0, 1)",
                self.sparsity
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.saliency_batches == 0 {
            return Err(Error::Config("saliency_batches must be >= 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr {} must be positive", self.lr)));
        }
        if let DataSource::Synthetic {
            n,
            dims,
            classes,
            sep,
            ..
        } = &self.data
        {
            if *n == 0 || *dims == 0 || *classes == 0 {
                return Err(Error::Config("synthetic n/dims/classes must be >= 1".into()));
            }
            if !(*sep >= 0.0) {
                return Err(Error::Config(format!("synthetic sep {sep} must be >= 0")));
            }
        }
        Ok(())
    }

    /// The data source with the synthetic seed defaulted to the experiment
    /// seed.
    pub fn resolved_data(&self) -> DataSource {
        match &self.data {
            DataSource::Synthetic {
                n,
                dims,
                classes,
                sep,
                seed,
            } => DataSource::Synthetic {
                n: *n,
                dims: *dims,
                classes: *classes,
                sep: *sep,
                seed: Some(seed.unwrap_or(self.seed)),
            },
            other => other.clone(),
        }
    }
}

pub fn parse_protocol(value: &str) -> Result<Protocol> {
    match value {
        "salient" => Ok(Protocol::Salient),
        "fedavg" => Ok(Protocol::FedAvg),
        _ => Err(Error::Config(format!(
            "protocol must be salient or fedavg, got {value:?}"
        ))),
    }
}

pub fn parse_transport(value: &str) -> Result<TransportKind> {
    match value {
        "memory" => Ok(TransportKind::Memory),
        "loopback" => Ok(TransportKind::Loopback),
        _ => Err(Error::Config(format!(
            "transport must be memory or loopback, got {value:?}"
        ))),
    }
}

pub fn parse_wire(value: &str) -> Result<WireMode> {
    match value {
        "full" => Ok(WireMode::Full),
        "values-only" => Ok(WireMode::ValuesOnly),
        _ => Err(Error::Config(format!(
            "wire must be full or values-only, got {value:?}"
        ))),
    }
}

/// Architecture grammar:
/// `mlp:IN-H1[-H2..]-OUT` where hidden dims may carry an `r` (relu, default)
/// or `i` (identity) suffix, or `conv:HxWxC,kK,fF+mlp:H1[-H2..]-OUT` where
/// the conv stem feeds the dense chain and the MLP input dim is implied.
pub fn parse_arch(value: &str) -> Result<Architecture> {
    fn parse_hidden(tok: &str) -> Result<(usize, Activation)> {
        let (digits, act) = match tok.as_bytes().last() {
            Some(b'r') => (&tok[..tok.len() - 1], Activation::Relu),
            Some(b'i') => (&tok[..tok.len() - 1], Activation::Identity),
            _ => (tok, Activation::Relu),
        };
        let dim = digits
            .parse()
            .map_err(|_| Error::Config(format!("bad layer dim {tok:?}")))?;
        Ok((dim, act))
    }

    if let Some(rest) = value.strip_prefix("mlp:") {
        let toks: Vec<&str> = rest.split('-').collect();
        if toks.len() < 2 {
            return Err(Error::Config("mlp arch needs at least input-output".into()));
        }
        let input_dim = toks[0]
            .parse()
            .map_err(|_| Error::Config(format!("bad input dim {:?}", toks[0])))?;
        let classes = toks[toks.len() - 1]
            .parse()
            .map_err(|_| Error::Config(format!("bad class count {:?}", toks[toks.len() - 1])))?;
        let mut hidden = Vec::new();
        let mut acts = Vec::new();
        for tok in &toks[1..toks.len() - 1] {
            let (dim, act) = parse_hidden(tok)?;
            hidden.push(dim);
            acts.push(act);
        }
        let arch = Architecture {
            conv: None,
            input_dim,
            hidden,
            hidden_activations: acts,
            classes,
        };
        arch.validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(arch)
    } else if let Some(rest) = value.strip_prefix("conv:") {
        let (conv_part, mlp_part) = rest
            .split_once('+')
            .ok_or_else(|| Error::Config("conv arch needs +mlp:... tail".into()))?;
        let mlp_part = mlp_part
            .strip_prefix("mlp:")
            .ok_or_else(|| Error::Config("conv arch tail must start with mlp:".into()))?;
        let fields: Vec<&str> = conv_part.split(',').collect();
        if fields.len() != 3 {
            return Err(Error::Config(
                "conv stem must be HxWxC,kK,fF (e.g. conv:8x8x1,k3,f4)".into(),
            ));
        }
        let dims: Vec<&str> = fields[0].split('x').collect();
        if dims.len() != 3 {
            return Err(Error::Config("conv input must be HxWxC".into()));
        }
        let parse_dim = |s: &str| -> Result<usize> {
            s.parse()
                .map_err(|_| Error::Config(format!("bad conv dim {s:?}")))
        };
        let stem = ConvStem {
            in_h: parse_dim(dims[0])?,
            in_w: parse_dim(dims[1])?,
            in_c: parse_dim(dims[2])?,
            kernel: parse_dim(
                fields[1]
                    .strip_prefix('k')
                    .ok_or_else(|| Error::Config("conv kernel must be kK".into()))?,
            )?,
            filters: parse_dim(
                fields[2]
                    .strip_prefix('f')
                    .ok_or_else(|| Error::Config("conv filters must be fF".into()))?,
            )?,
        };
        let toks: Vec<&str> = mlp_part.split('-').collect();
        let classes = toks[toks.len() - 1]
            .parse()
            .map_err(|_| Error::Config(format!("bad class count {:?}", toks[toks.len() - 1])))?;
        let mut hidden = Vec::new();
        let mut acts = Vec::new();
        for tok in &toks[..toks.len() - 1] {
            let (dim, act) = parse_hidden(tok)?;
            hidden.push(dim);
            acts.push(act);
        }
        let mut arch =
            Architecture::with_conv(stem, hidden, classes).map_err(|e| Error::Config(e.to_string()))?;
        arch.hidden_activations = acts;
        arch.validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(arch)
    } else {
        Err(Error::Config(format!(
            "arch must start with mlp: or conv:, got {value:?}"
        )))
    }
}

/// Data source grammar: `synthetic:n=..,dims=..,classes=..,sep=..,seed=..`
/// (all fields optional), `idx:images_path,labels_path`, or `csv:path`.
pub fn parse_data_source(value: &str) -> Result<DataSource> {
    if let Some(rest) = value.strip_prefix("synthetic") {
        let mut out = match ExperimentConfig::default().data {
            DataSource::Synthetic {
                n,
                dims,
                classes,
                sep,
                seed,
            } => (n, dims, classes, sep, seed),
            _ => unreachable!(),
        };
        let rest = rest.strip_prefix(':').unwrap_or(rest);
        if !rest.is_empty() {
            for field in rest.split(',') {
                let (k, v) = field
                    .split_once('=')
                    .ok_or_else(|| Error::Config(format!("bad synthetic field {field:?}")))?;
                let bad = || Error::Config(format!("bad synthetic value {v:?} for {k}"));
                match k.trim() {
                    "n" => out.0 = v.parse().map_err(|_| bad())?,
                    "dims" => out.1 = v.parse().map_err(|_| bad())?,
                    "classes" => out.2 = v.parse().map_err(|_| bad())?,
                    "sep" => out.3 = v.parse().map_err(|_| bad())?,
                    "seed" => out.4 = Some(v.parse().map_err(|_| bad())?),
                    _ => return Err(Error::Config(format!("unknown synthetic field {k:?}"))),
                }
            }
        }
        Ok(DataSource::Synthetic {
            n: out.0,
            dims: out.1,
            classes: out.2,
            sep: out.3,
            seed: out.4,
        })
    } else if let Some(rest) = value.strip_prefix("idx:") {
        let (images, labels) = rest
            .split_once(',')
            .ok_or_else(|| Error::Config("idx source needs images_path,labels_path".into()))?;
        Ok(DataSource::Idx {
            images: PathBuf::from(images.trim()),
            labels: PathBuf::from(labels.trim()),
        })
    } else if let Some(path) = value.strip_prefix("csv:") {
        Ok(DataSource::Csv {
            path: PathBuf::from(path.trim()),
        })
    } else {
        Err(Error::Config(format!(
            "data source must start with synthetic, idx: or csv:, got {value:?}"
        )))
    }
}
