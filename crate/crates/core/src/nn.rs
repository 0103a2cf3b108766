//! Dense feed-forward network with an optional convolutional stem.
//!
//! Parameters live in a single flat `f32` vector described by a shape
//! manifest; forward and backward passes run in `f64` and round results to
//! `f32` at the API boundary. Everything here is a pure function of its
//! inputs, so repeated calls are bit-identical and safe to run concurrently.

use std::sync::Arc;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::util::sha256;

/// Per-layer nonlinearity.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Identity => x,
        }
    }

    fn derivative(self, pre: f64) -> f64 {
        match self {
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

/// Single 2-D convolution placed in front of the MLP: valid padding,
/// stride 1, ReLU, output flattened channel-major into the first dense layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvStem {
    pub in_h: usize,
    pub in_w: usize,
    pub in_c: usize,
    pub kernel: usize,
    pub filters: usize,
}

impl ConvStem {
    pub fn out_h(&self) -> usize {
        self.in_h - self.kernel + 1
    }

    pub fn out_w(&self) -> usize {
        self.in_w - self.kernel + 1
    }

    /// Flattened input dimension (channel-major `c × h × w` layout).
    pub fn in_dim(&self) -> usize {
        self.in_c * self.in_h * self.in_w
    }

    /// Flattened output dimension fed to the first dense layer.
    pub fn out_dim(&self) -> usize {
        self.filters * self.out_h() * self.out_w()
    }
}

/// Network shape: optional conv stem, dense hidden layers, softmax
/// cross-entropy head over `classes` logits.
#[derive(Debug, Clone, PartialEq)]
pub struct Architecture {
    pub conv: Option<ConvStem>,
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub hidden_activations: Vec<Activation>,
    pub classes: usize,
}

impl Architecture {
    /// All-ReLU MLP from a dim chain `[input, hidden.., classes]`.
    pub fn mlp(dims: &[usize]) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::InvalidArchitecture(
                "dim chain needs at least input and output".into(),
            ));
        }
        let hidden = dims[1..dims.len() - 1].to_vec();
        let arch = Architecture {
            conv: None,
            input_dim: dims[0],
            hidden_activations: vec![Activation::Relu; hidden.len()],
            hidden,
            classes: dims[dims.len() - 1],
        };
        arch.validate()?;
        Ok(arch)
    }

    /// Conv stem followed by dense hidden layers and a `classes`-way head.
    pub fn with_conv(stem: ConvStem, hidden: Vec<usize>, classes: usize) -> Result<Self> {
        let arch = Architecture {
            input_dim: stem.in_dim(),
            conv: Some(stem),
            hidden_activations: vec![Activation::Relu; hidden.len()],
            hidden,
            classes,
        };
        arch.validate()?;
        Ok(arch)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.classes == 0 {
            return Err(Error::InvalidArchitecture(
                "input and output dims must be >= 1".into(),
            ));
        }
        if self.hidden.iter().any(|&h| h == 0) {
            return Err(Error::InvalidArchitecture("hidden dims must be >= 1".into()));
        }
        if self.hidden.len() != self.hidden_activations.len() {
            return Err(Error::InvalidArchitecture(
                "one activation per hidden layer".into(),
            ));
        }
        if let Some(stem) = &self.conv {
            if stem.in_h == 0 || stem.in_w == 0 || stem.in_c == 0 || stem.filters == 0 {
                return Err(Error::InvalidArchitecture("conv dims must be >= 1".into()));
            }
            if stem.kernel == 0 || stem.kernel > stem.in_h.min(stem.in_w) {
                return Err(Error::InvalidArchitecture(
                    "conv kernel must fit inside the input".into(),
                ));
            }
            if stem.in_dim() != self.input_dim {
                return Err(Error::InvalidArchitecture(format!(
                    "conv stem consumes {} inputs but input_dim is {}",
                    stem.in_dim(),
                    self.input_dim
                )));
            }
        }
        Ok(())
    }

    /// Dense layer dim chain, after the conv stem if present.
    pub fn layer_dims(&self) -> Vec<usize> {
        let first = match &self.conv {
            Some(stem) => stem.out_dim(),
            None => self.input_dim,
        };
        let mut dims = Vec::with_capacity(self.hidden.len() + 2);
        dims.push(first);
        dims.extend_from_slice(&self.hidden);
        dims.push(self.classes);
        dims
    }

    /// Canonical tensor layout: conv stem first, then dense layers in order,
    /// weights before biases. Weight tensors are maskable, biases are not.
    pub fn manifest(&self) -> Manifest {
        let mut tensors = Vec::new();
        let mut offset = 0usize;
        let mut push = |name: String, shape: Vec<usize>, maskable: bool, offset: &mut usize| {
            let len: usize = shape.iter().product();
            tensors.push(TensorInfo {
                name,
                shape,
                offset: *offset,
                maskable,
            });
            *offset += len;
        };
        if let Some(stem) = &self.conv {
            push(
                "conv.weight".into(),
                vec![stem.filters, stem.in_c, stem.kernel, stem.kernel],
                true,
                &mut offset,
            );
            push("conv.bias".into(), vec![stem.filters], false, &mut offset);
        }
        let dims = self.layer_dims();
        for l in 0..dims.len() - 1 {
            push(
                format!("fc{l}.weight"),
                vec![dims[l], dims[l + 1]],
                true,
                &mut offset,
            );
            push(format!("fc{l}.bias"), vec![dims[l + 1]], false, &mut offset);
        }
        Manifest::new(tensors).expect("canonical manifest is contiguous")
    }

    pub fn param_count(&self) -> usize {
        self.manifest().total_params()
    }
}

/// One named tensor inside the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorInfo {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub maskable: bool,
}

impl TensorInfo {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Ordered tensor layout of a flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Manifest {
    tensors: Vec<TensorInfo>,
    total: usize,
    maskable_count: usize,
}

impl Manifest {
    /// Builds a manifest, checking that tensor extents are contiguous and
    /// non-overlapping.
    pub fn new(tensors: Vec<TensorInfo>) -> Result<Self> {
        let mut expected = 0usize;
        let mut maskable_count = 0usize;
        for t in &tensors {
            if t.offset != expected {
                return Err(Error::InvalidArchitecture(format!(
                    "tensor {} at offset {} expected {}",
                    t.name, t.offset, expected
                )));
            }
            expected += t.len();
            if t.maskable {
                maskable_count += t.len();
            }
        }
        Ok(Manifest {
            tensors,
            total: expected,
            maskable_count,
        })
    }

    pub fn tensors(&self) -> &[TensorInfo] {
        &self.tensors
    }

    pub fn total_params(&self) -> usize {
        self.total
    }

    pub fn maskable_count(&self) -> usize {
        self.maskable_count
    }

    /// Whether the parameter at flat index `idx` belongs to a maskable tensor.
    pub fn is_maskable(&self, idx: usize) -> bool {
        debug_assert!(idx < self.total);
        let pos = self.tensors.partition_point(|t| t.offset <= idx);
        pos > 0 && self.tensors[pos - 1].maskable
    }

    /// Per-index maskable flags.
    pub fn maskable_flags(&self) -> Vec<bool> {
        let mut flags = vec![false; self.total];
        for t in &self.tensors {
            if t.maskable {
                flags[t.offset..t.offset + t.len()].fill(true);
            }
        }
        flags
    }
}

/// Flat model parameters plus their manifest.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    values: Vec<f32>,
    manifest: Arc<Manifest>,
}

impl ParamVector {
    pub fn new(values: Vec<f32>, manifest: Arc<Manifest>) -> Result<Self> {
        if values.len() != manifest.total_params() {
            return Err(Error::LengthMismatch {
                expected: manifest.total_params(),
                got: values.len(),
            });
        }
        Ok(ParamVector { values, manifest })
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f32] {
        &mut self.values
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn manifest_arc(&self) -> Arc<Manifest> {
        Arc::clone(&self.manifest)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// View of one tensor by name.
    pub fn tensor(&self, name: &str) -> Option<&[f32]> {
        let t = self.manifest.tensors().iter().find(|t| t.name == name)?;
        Some(&self.values[t.offset..t.offset + t.len()])
    }

    /// SHA-256 over the little-endian `f32` image of the values.
    pub fn content_hash(&self) -> [u8; 32] {
        let mut bytes = Vec::with_capacity(self.values.len() * 4);
        for v in &self.values {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        sha256(&bytes)
    }
}

/// One labeled minibatch, inputs row-major `rows × input_dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    inputs: Vec<f32>,
    labels: Vec<u32>,
    input_dim: usize,
}

impl Batch {
    pub fn new(inputs: Vec<f32>, labels: Vec<u32>, input_dim: usize) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::DimensionMismatch("batch must have >= 1 row".into()));
        }
        if inputs.len() != labels.len() * input_dim {
            return Err(Error::DimensionMismatch(format!(
                "{} inputs for {} rows of dim {}",
                inputs.len(),
                labels.len(),
                input_dim
            )));
        }
        Ok(Batch {
            inputs,
            labels,
            input_dim,
        })
    }

    pub fn rows(&self) -> usize {
        self.labels.len()
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn inputs(&self) -> &[f32] {
        &self.inputs
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.inputs[i * self.input_dim..(i + 1) * self.input_dim]
    }

    /// Gathers rows by index into a new batch.
    pub fn select(&self, rows: &[usize]) -> Result<Batch> {
        let mut inputs = Vec::with_capacity(rows.len() * self.input_dim);
        let mut labels = Vec::with_capacity(rows.len());
        for &r in rows {
            if r >= self.rows() {
                return Err(Error::DimensionMismatch(format!(
                    "row {} out of {}",
                    r,
                    self.rows()
                )));
            }
            inputs.extend_from_slice(self.row(r));
            labels.push(self.labels[r]);
        }
        Batch::new(inputs, labels, self.input_dim)
    }
}

/// Dense gradient, aligned index-for-index with a [`ParamVector`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradVector {
    values: Vec<f32>,
}

impl GradVector {
    pub fn from_values(values: Vec<f32>) -> Self {
        GradVector { values }
    }

    pub fn zeros(len: usize) -> Self {
        GradVector {
            values: vec![0.0; len],
        }
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Deterministic initialization: He-style fan-in scaled uniform weights
/// drawn in manifest order from a ChaCha stream, biases zero.
pub fn init_model(arch: &Architecture, seed: u64) -> Result<ParamVector> {
    arch.validate()?;
    let manifest = Arc::new(arch.manifest());
    let mut values = vec![0.0f32; manifest.total_params()];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for t in manifest.tensors() {
        if t.shape.len() < 2 {
            continue; // bias, stays zero
        }
        // fc weights are [in, out]; conv weights are [filters, c, k, k]
        let fan_in: usize = if t.shape.len() == 2 {
            t.shape[0]
        } else {
            t.shape[1..].iter().product()
        };
        let bound = (6.0 / fan_in as f64).sqrt();
        for v in &mut values[t.offset..t.offset + t.len()] {
            *v = rng.random_range(-bound..bound) as f32;
        }
    }
    ParamVector::new(values, manifest)
}

struct ForwardTrace {
    /// Raw inputs in f64 (needed for conv weight grads).
    inputs: Vec<f64>,
    /// Conv pre-activations, `rows × filters·oh·ow`.
    conv_pre: Vec<f64>,
    /// Input activations of each dense layer, `layer -> rows × dims[l]`.
    layer_inputs: Vec<Vec<f64>>,
    /// Pre-activations of each dense layer, `layer -> rows × dims[l+1]`.
    pre_acts: Vec<Vec<f64>>,
}

fn check_shapes(params: &ParamVector, arch: &Architecture, batch: &Batch) -> Result<()> {
    arch.validate()?;
    if batch.input_dim() != arch.input_dim {
        return Err(Error::DimensionMismatch(format!(
            "batch input dim {} vs architecture {}",
            batch.input_dim(),
            arch.input_dim
        )));
    }
    if params.len() != arch.param_count() {
        return Err(Error::LengthMismatch {
            expected: arch.param_count(),
            got: params.len(),
        });
    }
    if let Some(&bad) = batch.labels().iter().find(|&&y| y as usize >= arch.classes) {
        return Err(Error::DimensionMismatch(format!(
            "label {} out of {} classes",
            bad, arch.classes
        )));
    }
    Ok(())
}

fn run_forward(params: &ParamVector, arch: &Architecture, batch: &Batch) -> Result<ForwardTrace> {
    check_shapes(params, arch, batch)?;
    let rows = batch.rows();
    let p = params.values();
    let inputs: Vec<f64> = batch.inputs().iter().map(|&x| x as f64).collect();

    let mut conv_pre = Vec::new();
    let mut cur: Vec<f64>;
    if let Some(stem) = &arch.conv {
        let (oh, ow, k) = (stem.out_h(), stem.out_w(), stem.kernel);
        let w_off = 0usize;
        let b_off = stem.filters * stem.in_c * k * k;
        conv_pre = vec![0.0f64; rows * stem.out_dim()];
        for r in 0..rows {
            let x = &inputs[r * arch.input_dim..(r + 1) * arch.input_dim];
            for f in 0..stem.filters {
                for i in 0..oh {
                    for j in 0..ow {
                        let mut acc = p[b_off + f] as f64;
                        for c in 0..stem.in_c {
                            for pp in 0..k {
                                for q in 0..k {
                                    let wv = p[w_off + ((f * stem.in_c + c) * k + pp) * k + q];
                                    let xv = x[(c * stem.in_h + i + pp) * stem.in_w + j + q];
                                    acc += wv as f64 * xv;
                                }
                            }
                        }
                        conv_pre[r * stem.out_dim() + (f * oh + i) * ow + j] = acc;
                    }
                }
            }
        }
        cur = conv_pre.iter().map(|&z| z.max(0.0)).collect();
    } else {
        cur = inputs.clone();
    }

    let dims = arch.layer_dims();
    let n_layers = dims.len() - 1;
    let fc_base = arch.conv.map_or(0, |s| s.filters * s.in_c * s.kernel * s.kernel + s.filters);
    let mut layer_inputs = Vec::with_capacity(n_layers);
    let mut pre_acts = Vec::with_capacity(n_layers);
    let mut off = fc_base;
    for l in 0..n_layers {
        let (n_in, n_out) = (dims[l], dims[l + 1]);
        let w = &p[off..off + n_in * n_out];
        let b = &p[off + n_in * n_out..off + n_in * n_out + n_out];
        off += n_in * n_out + n_out;
        let mut z = vec![0.0f64; rows * n_out];
        for r in 0..rows {
            let xr = &cur[r * n_in..(r + 1) * n_in];
            let zr = &mut z[r * n_out..(r + 1) * n_out];
            for o in 0..n_out {
                zr[o] = b[o] as f64;
            }
            for (i, &xi) in xr.iter().enumerate() {
                if xi == 0.0 {
                    continue;
                }
                let wrow = &w[i * n_out..(i + 1) * n_out];
                for o in 0..n_out {
                    zr[o] += xi * wrow[o] as f64;
                }
            }
        }
        layer_inputs.push(std::mem::take(&mut cur));
        if l < n_layers - 1 {
            let act = arch.hidden_activations[l];
            cur = z.iter().map(|&v| act.apply(v)).collect();
        }
        pre_acts.push(z);
    }

    let logits = pre_acts.last().expect("at least one layer");
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("activations"));
    }
    Ok(ForwardTrace {
        inputs,
        conv_pre,
        layer_inputs,
        pre_acts,
    })
}

fn loss_and_accuracy(trace: &ForwardTrace, batch: &Batch, classes: usize) -> Result<(f64, f64)> {
    let logits = trace.pre_acts.last().expect("at least one layer");
    let rows = batch.rows();
    let mut loss = 0.0f64;
    let mut correct = 0usize;
    for r in 0..rows {
        let z = &logits[r * classes..(r + 1) * classes];
        let y = batch.labels()[r] as usize;
        let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = z.iter().map(|&v| (v - m).exp()).sum();
        loss += m + sum.ln() - z[y];
        let argmax = z
            .iter()
            .enumerate()
            .fold((0usize, f64::NEG_INFINITY), |best, (i, &v)| {
                if v > best.1 {
                    (i, v)
                } else {
                    best
                }
            })
            .0;
        if argmax == y {
            correct += 1;
        }
    }
    loss /= rows as f64;
    if !loss.is_finite() {
        return Err(Error::NonFinite("loss"));
    }
    Ok((loss, correct as f64 / rows as f64))
}

/// Mean softmax cross-entropy and argmax accuracy over the batch.
pub fn forward_loss(params: &ParamVector, arch: &Architecture, batch: &Batch) -> Result<(f64, f64)> {
    let trace = run_forward(params, arch, batch)?;
    loss_and_accuracy(&trace, batch, arch.classes)
}

/// Exact gradient of the batch-mean loss for every parameter, plus the loss
/// and accuracy of the same forward pass.
pub fn forward_backward(
    params: &ParamVector,
    arch: &Architecture,
    batch: &Batch,
) -> Result<(f64, f64, GradVector)> {
    let trace = run_forward(params, arch, batch)?;
    let (loss, acc) = loss_and_accuracy(&trace, batch, arch.classes)?;
    let rows = batch.rows();
    let classes = arch.classes;
    let p = params.values();
    let mut grad = vec![0.0f64; params.len()];

    // d loss / d logits = (softmax - onehot) / rows
    let logits = trace.pre_acts.last().expect("at least one layer");
    let mut dz = vec![0.0f64; rows * classes];
    for r in 0..rows {
        let z = &logits[r * classes..(r + 1) * classes];
        let y = batch.labels()[r] as usize;
        let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = z.iter().map(|&v| (v - m).exp()).collect();
        let sum: f64 = exps.iter().sum();
        for c in 0..classes {
            dz[r * classes + c] = (exps[c] / sum - if c == y { 1.0 } else { 0.0 }) / rows as f64;
        }
    }

    let dims = arch.layer_dims();
    let n_layers = dims.len() - 1;
    let fc_base = arch.conv.map_or(0, |s| s.filters * s.in_c * s.kernel * s.kernel + s.filters);
    let mut offsets = Vec::with_capacity(n_layers);
    let mut off = fc_base;
    for l in 0..n_layers {
        offsets.push(off);
        off += dims[l] * dims[l + 1] + dims[l + 1];
    }

    let mut d_input = Vec::new(); // gradient w.r.t. the conv stem output
    for l in (0..n_layers).rev() {
        let (n_in, n_out) = (dims[l], dims[l + 1]);
        let w_off = offsets[l];
        let a = &trace.layer_inputs[l];
        // dW[i, o] = sum_r a[r, i] * dz[r, o]; db[o] = sum_r dz[r, o]
        for r in 0..rows {
            let ar = &a[r * n_in..(r + 1) * n_in];
            let dzr = &dz[r * n_out..(r + 1) * n_out];
            for (i, &ai) in ar.iter().enumerate() {
                if ai == 0.0 {
                    continue;
                }
                let gw = &mut grad[w_off + i * n_out..w_off + (i + 1) * n_out];
                for o in 0..n_out {
                    gw[o] += ai * dzr[o];
                }
            }
            let gb = &mut grad[w_off + n_in * n_out..w_off + n_in * n_out + n_out];
            for o in 0..n_out {
                gb[o] += dzr[o];
            }
        }
        let backprop_input = l > 0 || arch.conv.is_some();
        if backprop_input {
            let mut da = vec![0.0f64; rows * n_in];
            let w = &p[w_off..w_off + n_in * n_out];
            for r in 0..rows {
                let dzr = &dz[r * n_out..(r + 1) * n_out];
                let dar = &mut da[r * n_in..(r + 1) * n_in];
                for i in 0..n_in {
                    let wrow = &w[i * n_out..(i + 1) * n_out];
                    let mut acc = 0.0f64;
                    for o in 0..n_out {
                        acc += wrow[o] as f64 * dzr[o];
                    }
                    dar[i] = acc;
                }
            }
            if l > 0 {
                let act = arch.hidden_activations[l - 1];
                let pre = &trace.pre_acts[l - 1];
                dz = da
                    .iter()
                    .zip(pre.iter())
                    .map(|(&g, &z)| g * act.derivative(z))
                    .collect();
            } else {
                d_input = da;
            }
        }
    }

    if let Some(stem) = &arch.conv {
        let (oh, ow, k) = (stem.out_h(), stem.out_w(), stem.kernel);
        let w_off = 0usize;
        let b_off = stem.filters * stem.in_c * k * k;
        for r in 0..rows {
            let x = &trace.inputs[r * arch.input_dim..(r + 1) * arch.input_dim];
            for f in 0..stem.filters {
                for i in 0..oh {
                    for j in 0..ow {
                        let idx = r * stem.out_dim() + (f * oh + i) * ow + j;
                        let d_pre = d_input[idx]
                            * Activation::Relu.derivative(trace.conv_pre[idx]);
                        if d_pre == 0.0 {
                            continue;
                        }
                        grad[b_off + f] += d_pre;
                        for c in 0..stem.in_c {
                            for pp in 0..k {
                                for q in 0..k {
                                    grad[w_off + ((f * stem.in_c + c) * k + pp) * k + q] +=
                                        d_pre * x[(c * stem.in_h + i + pp) * stem.in_w + j + q];
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    let mut out = Vec::with_capacity(grad.len());
    for g in grad {
        let g32 = g as f32;
        if !g32.is_finite() {
            return Err(Error::NonFinite("gradient"));
        }
        out.push(g32);
    }
    Ok((loss, acc, GradVector::from_values(out)))
}

/// Exact gradient of the batch-mean loss w.r.t. every parameter.
pub fn backward(params: &ParamVector, arch: &Architecture, batch: &Batch) -> Result<GradVector> {
    forward_backward(params, arch, batch).map(|(_, _, g)| g)
}

/// One SGD step: `θ̂ = θ − lr·g`, elementwise.
pub fn apply_update(params: &ParamVector, grad: &GradVector, lr: f64) -> Result<ParamVector> {
    if grad.len() != params.len() {
        return Err(Error::LengthMismatch {
            expected: params.len(),
            got: grad.len(),
        });
    }
    let values = params
        .values()
        .iter()
        .zip(grad.values())
        .map(|(&t, &g)| (t as f64 - lr * g as f64) as f32)
        .collect();
    ParamVector::new(values, params.manifest_arc())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_batch(arch: &Architecture, seed: u64, rows: usize) -> Batch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs = (0..rows * arch.input_dim)
            .map(|_| rng.random_range(-1.0f32..1.0))
            .collect();
        let labels = (0..rows)
            .map(|_| rng.random_range(0..arch.classes as u32))
            .collect();
        Batch::new(inputs, labels, arch.input_dim).unwrap()
    }

    #[test]
    fn init_is_deterministic_and_biases_zero() {
        let arch = Architecture::mlp(&[2, 3, 2]).unwrap();
        let a = init_model(&arch, 7).unwrap();
        let b = init_model(&arch, 7).unwrap();
        assert_eq!(a.values(), b.values());
        assert_ne!(a.values(), init_model(&arch, 8).unwrap().values());
        for t in a.manifest().tensors() {
            if !t.maskable {
                assert!(a.values()[t.offset..t.offset + t.len()].iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn param_count_matches_hand_count() {
        let arch = Architecture::mlp(&[4, 8, 3]).unwrap();
        assert_eq!(arch.param_count(), 4 * 8 + 8 + 8 * 3 + 3);
        assert_eq!(init_model(&arch, 1).unwrap().len(), 67);
    }

    #[test]
    fn conv_param_count() {
        let stem = ConvStem {
            in_h: 6,
            in_w: 6,
            in_c: 1,
            kernel: 3,
            filters: 2,
        };
        let arch = Architecture::with_conv(stem, vec![5], 3).unwrap();
        // conv: 2*1*3*3 + 2; fc0: (2*4*4)*5 + 5; fc1: 5*3 + 3
        assert_eq!(arch.param_count(), 18 + 2 + 32 * 5 + 5 + 15 + 3);
    }

    #[test]
    fn zero_params_give_uniform_loss() {
        let arch = Architecture::mlp(&[3, 4]).unwrap();
        let params = ParamVector::new(vec![0.0; arch.param_count()], Arc::new(arch.manifest())).unwrap();
        let batch = tiny_batch(&arch, 3, 5);
        let (loss, acc) = forward_loss(&params, &arch, &batch).unwrap();
        assert!((loss - (4.0f64).ln()).abs() < 1e-12);
        assert!((0.0..=1.0).contains(&acc));
    }

    #[test]
    fn hand_computed_single_layer_loss() {
        // 1-layer net, W=[[0.5,-0.25],[0.1,0.3]] (in x out), b=[0.05,-0.05],
        // batch x1=[1,2] y1=0, x2=[-0.5,0.25] y2=1. Expected value computed
        // with an independent numpy script from the f32-rounded inputs.
        let arch = Architecture::mlp(&[2, 2]).unwrap();
        let values = vec![0.5, -0.25, 0.1, 0.3, 0.05, -0.05];
        let params = ParamVector::new(values, Arc::new(arch.manifest())).unwrap();
        let batch = Batch::new(vec![1.0, 2.0, -0.5, 0.25], vec![0, 1], 2).unwrap();
        let (loss, acc) = forward_loss(&params, &arch, &batch).unwrap();
        assert!((loss - 0.51852077852467915).abs() < 1e-12, "loss {loss}");
        assert_eq!(acc, 1.0);
    }

    #[test]
    fn gradient_matches_finite_differences_mlp() {
        let arch = Architecture::mlp(&[3, 5, 4, 2]).unwrap();
        let params = init_model(&arch, 11).unwrap();
        let batch = tiny_batch(&arch, 5, 4);
        assert_grad_close(&params, &arch, &batch);
    }

    #[test]
    fn gradient_matches_finite_differences_conv() {
        let stem = ConvStem {
            in_h: 5,
            in_w: 5,
            in_c: 2,
            kernel: 3,
            filters: 2,
        };
        let arch = Architecture::with_conv(stem, vec![4], 3).unwrap();
        let params = init_model(&arch, 13).unwrap();
        let batch = tiny_batch(&arch, 17, 3);
        assert_grad_close(&params, &arch, &batch);
    }

    pub(crate) fn assert_grad_close(params: &ParamVector, arch: &Architecture, batch: &Batch) {
        let grad = backward(params, arch, batch).unwrap();
        for j in 0..params.len() {
            let fd = central_difference(params, arch, batch, j, 1e-4);
            let g = grad.values()[j] as f64;
            let tol = (1e-3 * fd.abs()).max(1e-6);
            assert!(
                (g - fd).abs() <= tol,
                "coord {j}: analytic {g} vs fd {fd}"
            );
        }
    }

    pub(crate) fn central_difference(
        params: &ParamVector,
        arch: &Architecture,
        batch: &Batch,
        j: usize,
        eps: f64,
    ) -> f64 {
        let mut plus = params.clone();
        let mut minus = params.clone();
        plus.values_mut()[j] = (params.values()[j] as f64 + eps) as f32;
        minus.values_mut()[j] = (params.values()[j] as f64 - eps) as f32;
        let (lp, _) = forward_loss(&plus, arch, batch).unwrap();
        let (lm, _) = forward_loss(&minus, arch, batch).unwrap();
        let delta = plus.values()[j] as f64 - minus.values()[j] as f64;
        (lp - lm) / delta
    }

    #[test]
    fn duplicated_batch_gradient_is_identical() {
        let arch = Architecture::mlp(&[4, 6, 3]).unwrap();
        let params = init_model(&arch, 2).unwrap();
        let batch = tiny_batch(&arch, 9, 3);
        let doubled = {
            let mut inputs = batch.inputs().to_vec();
            inputs.extend_from_slice(batch.inputs());
            let mut labels = batch.labels().to_vec();
            labels.extend_from_slice(batch.labels());
            Batch::new(inputs, labels, 4).unwrap()
        };
        let g1 = backward(&params, &arch, &batch).unwrap();
        let g2 = backward(&params, &arch, &doubled).unwrap();
        assert_eq!(g1.values(), g2.values());
    }

    #[test]
    fn zero_input_kills_first_layer_weight_grads() {
        let arch = Architecture::mlp(&[4, 3, 2]).unwrap();
        let params = init_model(&arch, 5).unwrap();
        let batch = Batch::new(vec![0.0; 8], vec![0, 1], 4).unwrap();
        let grad = backward(&params, &arch, &batch).unwrap();
        let m = params.manifest();
        let w0 = m.tensors().iter().find(|t| t.name == "fc0.weight").unwrap();
        assert!(grad.values()[w0.offset..w0.offset + w0.len()]
            .iter()
            .all(|&g| g == 0.0));

        // In a 1-layer net the output biases still receive gradient.
        let arch1 = Architecture::mlp(&[4, 2]).unwrap();
        let params1 = init_model(&arch1, 5).unwrap();
        let batch = Batch::new(vec![0.0; 8], vec![0, 0], 4).unwrap();
        let grad1 = backward(&params1, &arch1, &batch).unwrap();
        let m1 = params1.manifest();
        let w = m1.tensors().iter().find(|t| t.name == "fc0.weight").unwrap();
        assert!(grad1.values()[w.offset..w.offset + w.len()]
            .iter()
            .all(|&g| g == 0.0));
        let b = m1.tensors().iter().find(|t| t.name == "fc0.bias").unwrap();
        assert!(grad1.values()[b.offset..b.offset + b.len()]
            .iter()
            .any(|&g| g != 0.0));
    }

    #[test]
    fn apply_update_arithmetic() {
        let arch = Architecture::mlp(&[1, 2]).unwrap();
        let manifest = Arc::new(arch.manifest());
        let params = ParamVector::new(vec![1.0, 2.0, 0.0, 0.0], Arc::clone(&manifest)).unwrap();
        let grad = GradVector::from_values(vec![1.0, 0.0, 0.0, 0.0]);
        let updated = apply_update(&params, &grad, 0.5).unwrap();
        assert_eq!(updated.values(), &[0.5, 2.0, 0.0, 0.0]);
        // zero gradient leaves params bit-identical
        let same = apply_update(&params, &GradVector::zeros(4), 0.3).unwrap();
        assert_eq!(same.values(), params.values());
        // dyadic values: two steps at lr equal one step at 2*lr
        let twice = apply_update(&apply_update(&params, &grad, 0.25).unwrap(), &grad, 0.25).unwrap();
        let once = apply_update(&params, &grad, 0.5).unwrap();
        assert_eq!(twice.values(), once.values());
    }

    #[test]
    fn apply_update_rejects_length_mismatch() {
        let arch = Architecture::mlp(&[1, 2]).unwrap();
        let params = init_model(&arch, 0).unwrap();
        let grad = GradVector::zeros(3);
        assert!(matches!(
            apply_update(&params, &grad, 0.1),
            Err(Error::LengthMismatch { .. })
        ));
    }

    #[test]
    fn manifest_views_roundtrip_flat_vector() {
        let stem = ConvStem {
            in_h: 4,
            in_w: 4,
            in_c: 1,
            kernel: 2,
            filters: 3,
        };
        let arch = Architecture::with_conv(stem, vec![6], 2).unwrap();
        let params = init_model(&arch, 21).unwrap();
        let mut rebuilt = vec![0.0f32; params.len()];
        for t in params.manifest().tensors() {
            let view = params.tensor(&t.name).unwrap();
            rebuilt[t.offset..t.offset + t.len()].copy_from_slice(view);
        }
        assert_eq!(rebuilt, params.values());
    }

    #[test]
    fn invalid_architectures_are_rejected() {
        assert!(Architecture::mlp(&[4]).is_err());
        assert!(Architecture::mlp(&[0, 3]).is_err());
        assert!(Architecture::mlp(&[4, 0, 3]).is_err());
        let stem = ConvStem {
            in_h: 3,
            in_w: 3,
            in_c: 1,
            kernel: 5,
            filters: 2,
        };
        assert!(Architecture::with_conv(stem, vec![4], 2).is_err());
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let arch = Architecture::mlp(&[4, 3]).unwrap();
        let params = init_model(&arch, 1).unwrap();
        let batch = Batch::new(vec![0.0; 6], vec![0, 1], 3).unwrap();
        assert!(matches!(
            forward_loss(&params, &arch, &batch),
            Err(Error::DimensionMismatch(_))
        ));
        let bad_label = Batch::new(vec![0.0; 8], vec![0, 3], 4).unwrap();
        assert!(forward_loss(&params, &arch, &bad_label).is_err());
    }
}
