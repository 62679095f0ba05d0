//! Small configurable convolutional classifier with exact hand-written
//! backpropagation.
//!
//! The network is a sequence of conv/relu/maxpool layers followed by a
//! global-average-pool head and a linear map to class logits. It is the sole
//! producer of [`ActivationRecord`]s: for any named conv layer it returns the
//! post-ReLU activation together with the exact gradient of a chosen class
//! logit with respect to that activation.
//!
//! Training is plain SGD on softmax cross-entropy, single-threaded and fully
//! deterministic for a given seed. A trained network is immutable; `forward`
//! and `capture` can run concurrently across patches.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{self, Tensor};

/// One layer of the feature stack.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerSpec {
    /// 2-D convolution, stride 1, zero padding `kernel / 2`.
    Conv {
        name: String,
        out_channels: usize,
        kernel: usize,
    },
    Relu,
    MaxPool { k: usize, stride: usize },
}

impl LayerSpec {
    fn encode(&self) -> String {
        match self {
            LayerSpec::Conv {
                name,
                out_channels,
                kernel,
            } => format!("conv:{name}:{out_channels}:{kernel}"),
            LayerSpec::Relu => "relu".to_string(),
            LayerSpec::MaxPool { k, stride } => format!("maxpool:{k}:{stride}"),
        }
    }

    fn decode(text: &str) -> Result<LayerSpec> {
        let parts: Vec<&str> = text.split(':').collect();
        let int = |s: &str| {
            s.parse::<usize>()
                .map_err(|_| Error::Config(format!("bad integer '{s}' in layer spec '{text}'")))
        };
        match parts.as_slice() {
            ["conv", name, channels, kernel] => Ok(LayerSpec::Conv {
                name: name.to_string(),
                out_channels: int(channels)?,
                kernel: int(kernel)?,
            }),
            ["relu"] => Ok(LayerSpec::Relu),
            ["maxpool", k, stride] => Ok(LayerSpec::MaxPool {
                k: int(k)?,
                stride: int(stride)?,
            }),
            _ => Err(Error::Config(format!("unrecognized layer spec '{text}'"))),
        }
    }
}

/// Encodes a layer stack as `conv:name:channels:k;relu;maxpool:k:stride;...`.
pub fn encode_layers(layers: &[LayerSpec]) -> String {
    layers
        .iter()
        .map(LayerSpec::encode)
        .collect::<Vec<_>>()
        .join(";")
}

/// Parses the textual layer-stack encoding used by config files and
/// checkpoints.
pub fn parse_layers(text: &str) -> Result<Vec<LayerSpec>> {
    text.split(';')
        .filter(|s| !s.trim().is_empty())
        .map(|s| LayerSpec::decode(s.trim()))
        .collect()
}

/// Network architecture plus the seed that determines initialization and
/// shuffle order.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkConfig {
    /// Patches are resized to this square side before entering the network.
    pub input_side: usize,
    pub in_channels: usize,
    pub layers: Vec<LayerSpec>,
    pub num_classes: usize,
    pub seed: u64,
}

impl NetworkConfig {
    /// Three conv blocks; fine for desk-scale patches.
    pub fn with_default_layers(num_classes: usize, seed: u64) -> Self {
        NetworkConfig {
            input_side: 32,
            in_channels: 3,
            layers: vec![
                LayerSpec::Conv {
                    name: "conv1".into(),
                    out_channels: 8,
                    kernel: 3,
                },
                LayerSpec::Relu,
                LayerSpec::MaxPool { k: 2, stride: 2 },
                LayerSpec::Conv {
                    name: "conv2".into(),
                    out_channels: 16,
                    kernel: 3,
                },
                LayerSpec::Relu,
                LayerSpec::MaxPool { k: 2, stride: 2 },
                LayerSpec::Conv {
                    name: "conv3".into(),
                    out_channels: 32,
                    kernel: 3,
                },
                LayerSpec::Relu,
            ],
            num_classes,
            seed,
        }
    }

    /// Conv layer names in layer order.
    pub fn conv_names(&self) -> Vec<&str> {
        self.layers
            .iter()
            .filter_map(|l| match l {
                LayerSpec::Conv { name, .. } => Some(name.as_str()),
                _ => None,
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config("num_classes must be >= 2".into()));
        }
        if self.input_side == 0 || self.in_channels == 0 {
            return Err(Error::Config("input_side and in_channels must be >= 1".into()));
        }
        let conv_names = self.conv_names();
        if conv_names.len() < 2 {
            return Err(Error::Config(
                "at least two conv layers are required".into(),
            ));
        }
        let mut seen = std::collections::HashSet::new();
        for name in &conv_names {
            if name.is_empty() || !name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') {
                return Err(Error::Config(format!(
                    "conv layer name '{name}' must be non-empty [A-Za-z0-9_]"
                )));
            }
            if !seen.insert(*name) {
                return Err(Error::Config(format!("duplicate conv layer name '{name}'")));
            }
        }
        // activations are captured post-ReLU, so each conv must be followed by one
        for (i, layer) in self.layers.iter().enumerate() {
            if matches!(layer, LayerSpec::Conv { .. })
                && !matches!(self.layers.get(i + 1), Some(LayerSpec::Relu))
            {
                return Err(Error::Config(format!(
                    "conv layer at position {i} must be immediately followed by relu"
                )));
            }
        }
        // dry-run the shape plan
        self.shape_plan()?;
        Ok(())
    }

    /// (channels, side) after each layer; errors if any layer underflows.
    fn shape_plan(&self) -> Result<Vec<(usize, usize)>> {
        let mut c = self.in_channels;
        let mut side = self.input_side;
        let mut plan = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            match layer {
                LayerSpec::Conv {
                    out_channels,
                    kernel,
                    name,
                } => {
                    if *kernel == 0 || *out_channels == 0 {
                        return Err(Error::Config(format!(
                            "conv '{name}': kernel and channels must be >= 1"
                        )));
                    }
                    if *kernel > side + 2 * (kernel / 2) {
                        return Err(Error::Config(format!(
                            "conv '{name}': kernel {kernel} exceeds padded input {side}"
                        )));
                    }
                    side = side + 2 * (kernel / 2) - kernel + 1;
                    c = *out_channels;
                }
                LayerSpec::Relu => {}
                LayerSpec::MaxPool { k, stride } => {
                    if *k == 0 || *stride == 0 || *k > side {
                        return Err(Error::Config(format!(
                            "maxpool {k}x{k}/{stride} does not fit side {side}"
                        )));
                    }
                    side = (side - k) / stride + 1;
                }
            }
            plan.push((c, side));
        }
        Ok(plan)
    }
}

/// Pre-softmax logit for one class.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassScore {
    pub class_id: usize,
    pub score: f64,
}

/// Post-ReLU activation of one conv layer paired with the exact gradient of
/// the target-class logit with respect to it.
#[derive(Debug, Clone)]
pub struct ActivationRecord {
    pub proposal_index: usize,
    pub layer_name: String,
    /// [K, H, W], values >= 0 (captured after the layer's ReLU).
    pub activation: Tensor,
    /// [K, H, W], same dims as `activation`.
    pub gradient: Tensor,
    pub target_class: usize,
}

#[derive(Debug, Clone, PartialEq)]
struct ConvParams {
    kernels: Tensor, // [C_out, C_in, k, k]
    bias: Tensor,    // [C_out]
}

/// Immutable trained classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedNetwork {
    config: NetworkConfig,
    conv_params: Vec<ConvParams>,
    head_weight: Tensor, // [num_classes, K_last]
    head_bias: Tensor,   // [num_classes]
}

/// Loss/accuracy summary of a training run.
#[derive(Debug, Clone, Copy)]
pub struct TrainStats {
    pub initial_loss: f64,
    pub final_loss: f64,
    pub final_accuracy: f64,
}

struct Trace {
    /// Output tensor of each layer, in layer order.
    outputs: Vec<Tensor>,
    /// Argmax routing for each maxpool layer.
    argmaxes: Vec<Option<Vec<usize>>>,
    gap: Tensor,
    logits: Vec<f64>,
}

impl TrainedNetwork {
    /// Seed-deterministic initialization (He-style normal for conv kernels,
    /// scaled normal for the head, zero biases).
    pub fn initialize(config: &NetworkConfig) -> Result<TrainedNetwork> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut conv_params = Vec::new();
        let mut in_c = config.in_channels;
        let mut last_channels = in_c;
        for layer in &config.layers {
            if let LayerSpec::Conv {
                out_channels,
                kernel,
                ..
            } = layer
            {
                let fan_in = (in_c * kernel * kernel) as f64;
                let dist = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("valid stddev");
                let n = out_channels * in_c * kernel * kernel;
                let data: Vec<f64> = (0..n).map(|_| dist.sample(&mut rng)).collect();
                conv_params.push(ConvParams {
                    kernels: Tensor::new(vec![*out_channels, in_c, *kernel, *kernel], data)?,
                    bias: Tensor::zeros(&[*out_channels])?,
                });
                in_c = *out_channels;
                last_channels = in_c;
            }
        }
        let fan_in = last_channels as f64;
        let dist = Normal::new(0.0, (1.0 / fan_in).sqrt()).expect("valid stddev");
        let head_data: Vec<f64> = (0..config.num_classes * last_channels)
            .map(|_| dist.sample(&mut rng))
            .collect();
        Ok(TrainedNetwork {
            config: config.clone(),
            conv_params: Vec::from(conv_params),
            head_weight: Tensor::new(vec![config.num_classes, last_channels], head_data)?,
            head_bias: Tensor::zeros(&[config.num_classes])?,
        })
    }

    /// Builds a network from explicit parameters (hand-built nets in tests,
    /// checkpoint loading). Validates shapes against the config.
    pub fn from_parts(
        config: NetworkConfig,
        conv_kernels_and_biases: Vec<(Tensor, Tensor)>,
        head_weight: Tensor,
        head_bias: Tensor,
    ) -> Result<TrainedNetwork> {
        config.validate()?;
        let template = TrainedNetwork::initialize(&config)?;
        if conv_kernels_and_biases.len() != template.conv_params.len() {
            return Err(Error::Shape(format!(
                "expected {} conv parameter pairs, got {}",
                template.conv_params.len(),
                conv_kernels_and_biases.len()
            )));
        }
        let mut conv_params = Vec::new();
        for (i, (kernels, bias)) in conv_kernels_and_biases.into_iter().enumerate() {
            if kernels.dims() != template.conv_params[i].kernels.dims()
                || bias.dims() != template.conv_params[i].bias.dims()
            {
                return Err(Error::Shape(format!(
                    "conv parameter {i} has dims {:?}/{:?}, expected {:?}/{:?}",
                    kernels.dims(),
                    bias.dims(),
                    template.conv_params[i].kernels.dims(),
                    template.conv_params[i].bias.dims()
                )));
            }
            conv_params.push(ConvParams { kernels, bias });
        }
        if head_weight.dims() != template.head_weight.dims()
            || head_bias.dims() != template.head_bias.dims()
        {
            return Err(Error::Shape("head parameter dims mismatch".into()));
        }
        Ok(TrainedNetwork {
            config,
            conv_params,
            head_weight,
            head_bias,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn head_weight(&self) -> &Tensor {
        &self.head_weight
    }

    /// Parameter tensors with stable names, checkpoint order.
    pub fn named_parameters(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        let names = self.config.conv_names();
        for (i, p) in self.conv_params.iter().enumerate() {
            out.push((format!("{}.kernels", names[i]), &p.kernels));
            out.push((format!("{}.bias", names[i]), &p.bias));
        }
        out.push(("head.weight".to_string(), &self.head_weight));
        out.push(("head.bias".to_string(), &self.head_bias));
        out
    }

    fn check_patch(&self, patch: &Tensor) -> Result<()> {
        let want = [
            self.config.in_channels,
            self.config.input_side,
            self.config.input_side,
        ];
        if patch.dims() != want {
            return Err(Error::Shape(format!(
                "patch dims {:?} do not match network input {:?}",
                patch.dims(),
                want
            )));
        }
        Ok(())
    }

    fn run_forward(&self, patch: &Tensor) -> Result<Trace> {
        self.check_patch(patch)?;
        let mut outputs: Vec<Tensor> = Vec::with_capacity(self.config.layers.len());
        let mut argmaxes: Vec<Option<Vec<usize>>> = Vec::with_capacity(self.config.layers.len());
        let mut conv_idx = 0;
        for layer in &self.config.layers {
            let input = outputs.last().unwrap_or(patch);
            match layer {
                LayerSpec::Conv { kernel, .. } => {
                    let p = &self.conv_params[conv_idx];
                    conv_idx += 1;
                    outputs.push(tensor::conv2d(input, &p.kernels, &p.bias, 1, kernel / 2)?);
                    argmaxes.push(None);
                }
                LayerSpec::Relu => {
                    outputs.push(tensor::relu(input));
                    argmaxes.push(None);
                }
                LayerSpec::MaxPool { k, stride } => {
                    let (out, argmax) = tensor::maxpool2d(input, *k, *stride)?;
                    outputs.push(out);
                    argmaxes.push(Some(argmax));
                }
            }
        }
        let features = outputs.last().unwrap_or(patch);
        let gap = tensor::global_average_pool(features)?;
        let k_last = gap.len();
        let mut logits = vec![0.0; self.config.num_classes];
        for (c, logit) in logits.iter_mut().enumerate() {
            let mut acc = self.head_bias.data()[c];
            for k in 0..k_last {
                acc += self.head_weight.data()[c * k_last + k] * gap.data()[k];
            }
            *logit = acc;
        }
        Ok(Trace {
            outputs,
            argmaxes,
            gap,
            logits,
        })
    }

    /// One logit per class, deterministic.
    pub fn forward(&self, patch: &Tensor) -> Result<Vec<ClassScore>> {
        let trace = self.run_forward(patch)?;
        Ok(trace
            .logits
            .iter()
            .enumerate()
            .map(|(class_id, &score)| ClassScore { class_id, score })
            .collect())
    }

    fn capture_point(&self, layer_name: &str) -> Result<usize> {
        for (i, layer) in self.config.layers.iter().enumerate() {
            if let LayerSpec::Conv { name, .. } = layer {
                if name == layer_name {
                    // validate() guarantees layers[i + 1] is the ReLU
                    return Ok(i + 1);
                }
            }
        }
        Err(Error::Config(format!(
            "unknown conv layer '{layer_name}' (have: {})",
            self.config.conv_names().join(", ")
        )))
    }

    /// Post-ReLU activation of `layer_name` plus the exact gradient of the
    /// `target_class` logit with respect to it, parameters held fixed.
    pub fn capture(
        &self,
        patch: &Tensor,
        target_class: usize,
        layer_name: &str,
    ) -> Result<ActivationRecord> {
        if target_class >= self.config.num_classes {
            return Err(Error::Data(format!(
                "target class {target_class} out of range (num_classes {})",
                self.config.num_classes
            )));
        }
        let point = self.capture_point(layer_name)?;
        let trace = self.run_forward(patch)?;
        let gradient = self.backprop_to_activation(&trace, target_class, point, patch)?;
        Ok(ActivationRecord {
            proposal_index: 0,
            layer_name: layer_name.to_string(),
            activation: trace.outputs[point].clone(),
            gradient,
            target_class,
        })
    }

    /// Re-runs the network from the post-ReLU activation of `layer_name`
    /// onward and returns the logits. This is the resume path used to verify
    /// captured gradients against finite differences.
    pub fn forward_from_activation(&self, layer_name: &str, activation: &Tensor) -> Result<Vec<f64>> {
        let point = self.capture_point(layer_name)?;
        let mut current = activation.clone();
        let mut conv_idx = self
            .config
            .layers
            .iter()
            .take(point + 1)
            .filter(|l| matches!(l, LayerSpec::Conv { .. }))
            .count();
        for layer in &self.config.layers[point + 1..] {
            current = match layer {
                LayerSpec::Conv { kernel, .. } => {
                    let p = &self.conv_params[conv_idx];
                    conv_idx += 1;
                    tensor::conv2d(&current, &p.kernels, &p.bias, 1, kernel / 2)?
                }
                LayerSpec::Relu => tensor::relu(&current),
                LayerSpec::MaxPool { k, stride } => tensor::maxpool2d(&current, *k, *stride)?.0,
            };
        }
        let gap = tensor::global_average_pool(&current)?;
        let k_last = gap.len();
        let mut logits = vec![0.0; self.config.num_classes];
        for (c, logit) in logits.iter_mut().enumerate() {
            let mut acc = self.head_bias.data()[c];
            for k in 0..k_last {
                acc += self.head_weight.data()[c * k_last + k] * gap.data()[k];
            }
            *logit = acc;
        }
        Ok(logits)
    }

    /// Gradient of logits[target] w.r.t. the output of layer `point`.
    fn backprop_to_activation(
        &self,
        trace: &Trace,
        target: usize,
        point: usize,
        patch: &Tensor,
    ) -> Result<Tensor> {
        // d logit / d gap = head weight row; GAP spreads it uniformly.
        let features = trace.outputs.last().unwrap_or(patch);
        let (k_ch, h, w) = (
            features.dims()[0],
            features.dims()[1],
            features.dims()[2],
        );
        let k_last = trace.gap.len();
        let plane = (h * w) as f64;
        let mut grad = Tensor::zeros(&[k_ch, h, w])?;
        for k in 0..k_ch {
            let g = self.head_weight.data()[target * k_last + k] / plane;
            for y in 0..h {
                for x in 0..w {
                    let idx = grad.idx3(k, y, x);
                    grad.data_mut()[idx] = g;
                }
            }
        }
        // walk layers backward down to (exclusive) the capture point
        let mut conv_idx = self.conv_params.len();
        for li in (0..self.config.layers.len()).rev() {
            if let LayerSpec::Conv { .. } = self.config.layers[li] {
                conv_idx -= 1;
            }
            if li <= point {
                break;
            }
            let layer_input = if li == 0 {
                patch
            } else {
                &trace.outputs[li - 1]
            };
            grad = match &self.config.layers[li] {
                LayerSpec::Relu => {
                    let out = &trace.outputs[li];
                    let mut g = grad;
                    for (gv, &ov) in g.data_mut().iter_mut().zip(out.data()) {
                        if ov <= 0.0 {
                            *gv = 0.0;
                        }
                    }
                    g
                }
                LayerSpec::MaxPool { .. } => {
                    let argmax = trace.argmaxes[li].as_ref().expect("pool argmax recorded");
                    let mut g_in = Tensor::zeros(layer_input.dims())?;
                    for (o, &src) in argmax.iter().enumerate() {
                        g_in.data_mut()[src] += grad.data()[o];
                    }
                    g_in
                }
                LayerSpec::Conv { kernel, .. } => {
                    let p = &self.conv_params[conv_idx];
                    conv_backward_input(&grad, &p.kernels, layer_input.dims(), 1, kernel / 2)?
                }
            };
        }
        Ok(grad)
    }
}

/// Gradient w.r.t. the conv input given the gradient w.r.t. its output.
fn conv_backward_input(
    g_out: &Tensor,
    kernels: &Tensor,
    input_dims: &[usize],
    stride: usize,
    pad: usize,
) -> Result<Tensor> {
    let (c_in, h, w) = (input_dims[0], input_dims[1], input_dims[2]);
    let (c_out, _, kh, kw) = (
        kernels.dims()[0],
        kernels.dims()[1],
        kernels.dims()[2],
        kernels.dims()[3],
    );
    let (out_h, out_w) = (g_out.dims()[1], g_out.dims()[2]);
    let mut g_in = Tensor::zeros(&[c_in, h, w])?;
    for co in 0..c_out {
        for oy in 0..out_h {
            for ox in 0..out_w {
                let g = g_out.data()[(co * out_h + oy) * out_w + ox];
                if g == 0.0 {
                    continue;
                }
                for ci in 0..c_in {
                    for ky in 0..kh {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..kw {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let kv = kernels.data()[((co * c_in + ci) * kh + ky) * kw + kx];
                            g_in.data_mut()[(ci * h + iy as usize) * w + ix as usize] += g * kv;
                        }
                    }
                }
            }
        }
    }
    Ok(g_in)
}

/// Accumulates parameter gradients for one conv layer.
fn conv_backward_params(
    g_out: &Tensor,
    input: &Tensor,
    d_kernels: &mut Tensor,
    d_bias: &mut Tensor,
    stride: usize,
    pad: usize,
) {
    let (c_in, h, w) = (input.dims()[0], input.dims()[1], input.dims()[2]);
    let (c_out, out_h, out_w) = (g_out.dims()[0], g_out.dims()[1], g_out.dims()[2]);
    let (kh, kw) = (d_kernels.dims()[2], d_kernels.dims()[3]);
    for co in 0..c_out {
        for oy in 0..out_h {
            for ox in 0..out_w {
                let g = g_out.data()[(co * out_h + oy) * out_w + ox];
                if g == 0.0 {
                    continue;
                }
                d_bias.data_mut()[co] += g;
                for ci in 0..c_in {
                    for ky in 0..kh {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..kw {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let iv = input.data()[(ci * h + iy as usize) * w + ix as usize];
                            d_kernels.data_mut()[((co * c_in + ci) * kh + ky) * kw + kx] +=
                                g * iv;
                        }
                    }
                }
            }
        }
    }
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - m).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Trains the classifier with per-sample SGD on softmax cross-entropy.
/// Deterministic for a given seed: initialization and the per-epoch shuffle
/// order both derive from `config.seed`. Zero epochs returns the
/// initialization unchanged.
pub fn train(
    config: &NetworkConfig,
    samples: &[(Tensor, usize)],
    epochs: usize,
    lr: f64,
) -> Result<(TrainedNetwork, TrainStats)> {
    if samples.is_empty() {
        return Err(Error::Data("training sample list is empty".into()));
    }
    for (patch, class_id) in samples {
        if *class_id >= config.num_classes {
            return Err(Error::Data(format!(
                "sample class_id {class_id} out of range (num_classes {})",
                config.num_classes
            )));
        }
        let want = [config.in_channels, config.input_side, config.input_side];
        if patch.dims() != want {
            return Err(Error::Shape(format!(
                "training patch dims {:?} do not match network input {:?}",
                patch.dims(),
                want
            )));
        }
    }
    let mut net = TrainedNetwork::initialize(config)?;
    // continue the init stream so shuffle order is also seed-determined
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0x5u64));
    let initial_loss = mean_loss(&net, samples)?;

    let mut order: Vec<usize> = (0..samples.len()).collect();
    for _ in 0..epochs {
        order.shuffle(&mut rng);
        for &i in &order {
            let (patch, label) = &samples[i];
            sgd_step(&mut net, patch, *label, lr)?;
        }
    }
    let final_loss = mean_loss(&net, samples)?;
    let final_accuracy = accuracy(&net, samples)?;
    Ok((
        net,
        TrainStats {
            initial_loss,
            final_loss,
            final_accuracy,
        },
    ))
}

/// Mean softmax cross-entropy over a sample set.
pub fn mean_loss(net: &TrainedNetwork, samples: &[(Tensor, usize)]) -> Result<f64> {
    let mut total = 0.0;
    for (patch, label) in samples {
        let trace = net.run_forward(patch)?;
        let probs = softmax(&trace.logits);
        total += -(probs[*label].max(1e-300)).ln();
    }
    Ok(total / samples.len() as f64)
}

/// Fraction of samples whose argmax logit matches the label.
pub fn accuracy(net: &TrainedNetwork, samples: &[(Tensor, usize)]) -> Result<f64> {
    let mut correct = 0usize;
    for (patch, label) in samples {
        let trace = net.run_forward(patch)?;
        let pred = trace
            .logits
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite logits"))
            .map(|(i, _)| i)
            .unwrap_or(0);
        if pred == *label {
            correct += 1;
        }
    }
    Ok(correct as f64 / samples.len() as f64)
}

/// One SGD step: full backprop of the cross-entropy loss for one sample.
fn sgd_step(net: &mut TrainedNetwork, patch: &Tensor, label: usize, lr: f64) -> Result<()> {
    let trace = net.run_forward(patch)?;
    let probs = softmax(&trace.logits);
    // d loss / d logit = softmax - onehot
    let mut d_logits = probs;
    d_logits[label] -= 1.0;

    let features = trace.outputs.last().unwrap_or(patch);
    let (k_ch, h, w) = (
        features.dims()[0],
        features.dims()[1],
        features.dims()[2],
    );
    let k_last = trace.gap.len();
    let plane = (h * w) as f64;

    // head gradients and gradient w.r.t. gap
    let mut d_head_w = Tensor::zeros(&[net.config.num_classes, k_last])?;
    let mut d_head_b = Tensor::zeros(&[net.config.num_classes])?;
    let mut d_gap = vec![0.0; k_last];
    for c in 0..net.config.num_classes {
        d_head_b.data_mut()[c] = d_logits[c];
        for k in 0..k_last {
            d_head_w.data_mut()[c * k_last + k] = d_logits[c] * trace.gap.data()[k];
            d_gap[k] += d_logits[c] * net.head_weight.data()[c * k_last + k];
        }
    }
    // spread through GAP
    let mut grad = Tensor::zeros(&[k_ch, h, w])?;
    for k in 0..k_ch {
        let g = d_gap[k] / plane;
        for i in 0..h * w {
            grad.data_mut()[k * h * w + i] = g;
        }
    }

    // backward through the stack, accumulating conv parameter gradients
    let mut d_convs: Vec<(Tensor, Tensor)> = net
        .conv_params
        .iter()
        .map(|p| {
            (
                Tensor::zeros(p.kernels.dims()).expect("valid dims"),
                Tensor::zeros(p.bias.dims()).expect("valid dims"),
            )
        })
        .collect();
    let mut conv_idx = net.conv_params.len();
    for li in (0..net.config.layers.len()).rev() {
        let layer_input = if li == 0 {
            patch
        } else {
            &trace.outputs[li - 1]
        };
        match &net.config.layers[li] {
            LayerSpec::Relu => {
                let out = &trace.outputs[li];
                for (gv, &ov) in grad.data_mut().iter_mut().zip(out.data()) {
                    if ov <= 0.0 {
                        *gv = 0.0;
                    }
                }
            }
            LayerSpec::MaxPool { .. } => {
                let argmax = trace.argmaxes[li].as_ref().expect("pool argmax recorded");
                let mut g_in = Tensor::zeros(layer_input.dims())?;
                for (o, &src) in argmax.iter().enumerate() {
                    g_in.data_mut()[src] += grad.data()[o];
                }
                grad = g_in;
            }
            LayerSpec::Conv { kernel, .. } => {
                conv_idx -= 1;
                let (d_k, d_b) = &mut d_convs[conv_idx];
                conv_backward_params(&grad, layer_input, d_k, d_b, 1, kernel / 2);
                if li > 0 {
                    grad = conv_backward_input(
                        &grad,
                        &net.conv_params[conv_idx].kernels,
                        layer_input.dims(),
                        1,
                        kernel / 2,
                    )?;
                }
            }
        }
    }

    // SGD update
    for (p, (d_k, d_b)) in net.conv_params.iter_mut().zip(&d_convs) {
        for (pv, gv) in p.kernels.data_mut().iter_mut().zip(d_k.data()) {
            *pv -= lr * gv;
        }
        for (pv, gv) in p.bias.data_mut().iter_mut().zip(d_b.data()) {
            *pv -= lr * gv;
        }
    }
    for (pv, gv) in net.head_weight.data_mut().iter_mut().zip(d_head_w.data()) {
        *pv -= lr * gv;
    }
    for (pv, gv) in net.head_bias.data_mut().iter_mut().zip(d_head_b.data()) {
        *pv -= lr * gv;
    }
    Ok(())
}

const CHECKPOINT_MAGIC: &str = "clickbox-checkpoint-v1";

/// Writes a checkpoint: plain-text key=value manifest, blank line, then one
/// TNSR container per parameter in `named_parameters` order. Bit-exact.
pub fn save_checkpoint(net: &TrainedNetwork, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = std::io::BufWriter::new(file);
    let named = net.named_parameters();
    let mut header = String::new();
    header.push_str(CHECKPOINT_MAGIC);
    header.push('\n');
    header.push_str(&format!("num_classes={}\n", net.config.num_classes));
    header.push_str(&format!("input_side={}\n", net.config.input_side));
    header.push_str(&format!("in_channels={}\n", net.config.in_channels));
    header.push_str(&format!("seed={}\n", net.config.seed));
    header.push_str(&format!("layers={}\n", encode_layers(&net.config.layers)));
    header.push_str(&format!(
        "params={}\n",
        named
            .iter()
            .map(|(n, _)| n.as_str())
            .collect::<Vec<_>>()
            .join(",")
    ));
    header.push('\n');
    out.write_all(header.as_bytes())
        .map_err(|e| Error::io(path, e))?;
    for (_, t) in &named {
        tensor::write_tnsr(t, &mut out).map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

/// Reads a checkpoint written by [`save_checkpoint`].
pub fn load_checkpoint(path: &Path) -> Result<TrainedNetwork> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let split = bytes
        .windows(2)
        .position(|w| w == b"\n\n")
        .ok_or_else(|| Error::Data(format!("{}: missing checkpoint header", path.display())))?;
    let header = std::str::from_utf8(&bytes[..split])
        .map_err(|_| Error::Data(format!("{}: header is not UTF-8", path.display())))?;
    let mut lines = header.lines();
    if lines.next() != Some(CHECKPOINT_MAGIC) {
        return Err(Error::Data(format!(
            "{}: not a clickbox checkpoint",
            path.display()
        )));
    }
    let mut fields = std::collections::HashMap::new();
    for line in lines {
        if let Some((k, v)) = line.split_once('=') {
            fields.insert(k.to_string(), v.to_string());
        }
    }
    let get = |key: &str| {
        fields
            .get(key)
            .ok_or_else(|| Error::Data(format!("{}: missing field '{key}'", path.display())))
    };
    let parse_usize = |key: &str| -> Result<usize> {
        get(key)?
            .parse()
            .map_err(|_| Error::Data(format!("{}: bad integer in '{key}'", path.display())))
    };
    let config = NetworkConfig {
        input_side: parse_usize("input_side")?,
        in_channels: parse_usize("in_channels")?,
        layers: parse_layers(get("layers")?)?,
        num_classes: parse_usize("num_classes")?,
        seed: get("seed")?
            .parse()
            .map_err(|_| Error::Data(format!("{}: bad seed", path.display())))?,
    };
    let param_names: Vec<&str> = get("params")?.split(',').collect();
    let mut cursor = std::io::Cursor::new(&bytes[split + 2..]);
    let mut tensors = Vec::new();
    for _ in &param_names {
        tensors.push(tensor::read_tnsr(&mut cursor)?);
    }
    let conv_count = config.conv_names().len();
    if param_names.len() != conv_count * 2 + 2 {
        return Err(Error::Data(format!(
            "{}: expected {} parameters, got {}",
            path.display(),
            conv_count * 2 + 2,
            param_names.len()
        )));
    }
    let head_bias = tensors.pop().expect("head bias present");
    let head_weight = tensors.pop().expect("head weight present");
    let mut pairs = Vec::new();
    let mut iter = tensors.into_iter();
    while let (Some(k), Some(b)) = (iter.next(), iter.next()) {
        pairs.push((k, b));
    }
    TrainedNetwork::from_parts(config, pairs, head_weight, head_bias)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn small_config(seed: u64) -> NetworkConfig {
        NetworkConfig {
            input_side: 8,
            in_channels: 2,
            layers: vec![
                LayerSpec::Conv {
                    name: "conv1".into(),
                    out_channels: 3,
                    kernel: 3,
                },
                LayerSpec::Relu,
                LayerSpec::MaxPool { k: 2, stride: 2 },
                LayerSpec::Conv {
                    name: "conv2".into(),
                    out_channels: 4,
                    kernel: 3,
                },
                LayerSpec::Relu,
            ],
            num_classes: 3,
            seed,
        }
    }

    fn random_patch(rng: &mut ChaCha8Rng, config: &NetworkConfig) -> Tensor {
        let n = config.in_channels * config.input_side * config.input_side;
        Tensor::new(
            vec![config.in_channels, config.input_side, config.input_side],
            (0..n).map(|_| rng.random_range(0.0..1.0)).collect(),
        )
        .unwrap()
    }

    fn param_bits(net: &TrainedNetwork) -> Vec<u64> {
        net.named_parameters()
            .iter()
            .flat_map(|(_, t)| t.data().iter().map(|v| v.to_bits()))
            .collect()
    }

    #[test]
    fn config_validation_rules() {
        let mut cfg = small_config(1);
        assert!(cfg.validate().is_ok());

        cfg.layers.retain(|l| !matches!(l, LayerSpec::Conv { name, .. } if name == "conv2"));
        assert!(cfg.validate().is_err(), "single conv layer must be rejected");

        let mut dup = small_config(1);
        if let LayerSpec::Conv { name, .. } = &mut dup.layers[3] {
            *name = "conv1".into();
        }
        assert!(dup.validate().is_err(), "duplicate names must be rejected");

        let mut no_relu = small_config(1);
        no_relu.layers.remove(1);
        assert!(no_relu.validate().is_err(), "conv without relu rejected");
    }

    #[test]
    fn forward_shape_and_zero_head() {
        let cfg = small_config(2);
        let net = TrainedNetwork::initialize(&cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let patch = random_patch(&mut rng, &cfg);
        let scores = net.forward(&patch).unwrap();
        assert_eq!(scores.len(), cfg.num_classes);

        // all-zero head weights and biases -> all logits zero
        let zero_head = TrainedNetwork::from_parts(
            cfg.clone(),
            net.conv_params
                .iter()
                .map(|p| (p.kernels.clone(), p.bias.clone()))
                .collect(),
            Tensor::zeros(net.head_weight.dims()).unwrap(),
            Tensor::zeros(net.head_bias.dims()).unwrap(),
        )
        .unwrap();
        for s in zero_head.forward(&patch).unwrap() {
            assert_eq!(s.score, 0.0);
        }
    }

    #[test]
    fn forward_matches_hand_computation() {
        // 1-channel 2x2 patch, conv1 = 1x1 kernel [2.0] bias 0.5, relu,
        // conv2 = 1x1 kernel [1.0] bias 0 (identity), relu, GAP, linear head.
        let cfg = NetworkConfig {
            input_side: 2,
            in_channels: 1,
            layers: vec![
                LayerSpec::Conv {
                    name: "conv1".into(),
                    out_channels: 1,
                    kernel: 1,
                },
                LayerSpec::Relu,
                LayerSpec::Conv {
                    name: "conv2".into(),
                    out_channels: 1,
                    kernel: 1,
                },
                LayerSpec::Relu,
            ],
            num_classes: 2,
            seed: 0,
        };
        let net = TrainedNetwork::from_parts(
            cfg,
            vec![
                (
                    Tensor::new(vec![1, 1, 1, 1], vec![2.0]).unwrap(),
                    Tensor::new(vec![1], vec![0.5]).unwrap(),
                ),
                (
                    Tensor::new(vec![1, 1, 1, 1], vec![1.0]).unwrap(),
                    Tensor::zeros(&[1]).unwrap(),
                ),
            ],
            Tensor::new(vec![2, 1], vec![3.0, -1.0]).unwrap(),
            Tensor::new(vec![2], vec![0.25, 0.75]).unwrap(),
        )
        .unwrap();
        // patch [1, -1; 0.5, 2] -> conv1: [2.5, -1.5; 1.5, 4.5] -> relu:
        // [2.5, 0, 1.5, 4.5] -> conv2 identity -> GAP = 8.5/4 = 2.125
        // logits: [3*2.125 + 0.25, -1*2.125 + 0.75] = [6.625, -1.375]
        let patch = Tensor::new(vec![1, 2, 2], vec![1.0, -1.0, 0.5, 2.0]).unwrap();
        let scores = net.forward(&patch).unwrap();
        assert!((scores[0].score - 6.625).abs() < 1e-10);
        assert!((scores[1].score - (-1.375)).abs() < 1e-10);
    }

    #[test]
    fn capture_gradient_matches_finite_differences() {
        let cfg = small_config(31);
        let net = TrainedNetwork::initialize(&cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let patch = random_patch(&mut rng, &cfg);
        let h = 1e-5;
        for layer in ["conv1", "conv2"] {
            let rec = net.capture(&patch, 1, layer).unwrap();
            assert_eq!(rec.activation.dims(), rec.gradient.dims());
            assert!(rec.activation.min_value() >= 0.0);
            for _ in 0..40 {
                let i = rng.random_range(0..rec.activation.len());
                let mut plus = rec.activation.clone();
                plus.data_mut()[i] += h;
                let mut minus = rec.activation.clone();
                minus.data_mut()[i] -= h;
                let lp = net.forward_from_activation(layer, &plus).unwrap()[1];
                let lm = net.forward_from_activation(layer, &minus).unwrap()[1];
                let fd = (lp - lm) / (2.0 * h);
                let got = rec.gradient.data()[i];
                let denom = fd.abs().max(got.abs()).max(1e-8);
                assert!(
                    (fd - got).abs() / denom <= 1e-6,
                    "{layer}[{i}]: fd {fd} vs backprop {got}"
                );
            }
        }
    }

    #[test]
    fn capture_zero_head_row_gives_zero_gradient() {
        let cfg = small_config(33);
        let base = TrainedNetwork::initialize(&cfg).unwrap();
        let mut head = base.head_weight.clone();
        let k_last = head.dims()[1];
        for k in 0..k_last {
            head.data_mut()[2 * k_last + k] = 0.0;
        }
        let mut bias = base.head_bias.clone();
        bias.data_mut()[2] = 0.0;
        let net = TrainedNetwork::from_parts(
            cfg.clone(),
            base.conv_params
                .iter()
                .map(|p| (p.kernels.clone(), p.bias.clone()))
                .collect(),
            head,
            bias,
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(34);
        let patch = random_patch(&mut rng, &cfg);
        let rec = net.capture(&patch, 2, "conv1").unwrap();
        assert!(rec.gradient.data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn capture_at_last_layer_is_uniform_head_row_over_plane() {
        let cfg = small_config(35);
        let net = TrainedNetwork::initialize(&cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(36);
        let patch = random_patch(&mut rng, &cfg);
        let rec = net.capture(&patch, 0, "conv2").unwrap();
        let (k_ch, h, w) = (
            rec.gradient.dims()[0],
            rec.gradient.dims()[1],
            rec.gradient.dims()[2],
        );
        let k_last = net.head_weight.dims()[1];
        for k in 0..k_ch {
            let want = net.head_weight.data()[k_last * 0 + k] / (h * w) as f64;
            for y in 0..h {
                for x in 0..w {
                    assert_eq!(rec.gradient.get3(k, y, x), want);
                }
            }
        }
    }

    #[test]
    fn capture_is_read_only_and_rejects_unknown_layer() {
        let cfg = small_config(37);
        let net = TrainedNetwork::initialize(&cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(38);
        let patch = random_patch(&mut rng, &cfg);
        let before = param_bits(&net);
        net.capture(&patch, 0, "conv1").unwrap();
        net.capture(&patch, 2, "conv2").unwrap();
        assert_eq!(before, param_bits(&net));
        assert!(net.capture(&patch, 0, "conv9").is_err());
        assert!(net.capture(&patch, 99, "conv1").is_err());
    }

    #[test]
    fn head_permutation_permutes_logits() {
        let cfg = small_config(39);
        let net = TrainedNetwork::initialize(&cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        let patch = random_patch(&mut rng, &cfg);
        let base: Vec<f64> = net.forward(&patch).unwrap().iter().map(|s| s.score).collect();

        // swap class rows 0 and 2
        let k_last = net.head_weight.dims()[1];
        let mut w = net.head_weight.clone();
        let mut b = net.head_bias.clone();
        for k in 0..k_last {
            w.data_mut().swap(k, 2 * k_last + k);
        }
        b.data_mut().swap(0, 2);
        let permuted = TrainedNetwork::from_parts(
            cfg,
            net.conv_params
                .iter()
                .map(|p| (p.kernels.clone(), p.bias.clone()))
                .collect(),
            w,
            b,
        )
        .unwrap();
        let got: Vec<f64> = permuted
            .forward(&patch)
            .unwrap()
            .iter()
            .map(|s| s.score)
            .collect();
        assert_eq!(got[0], base[2]);
        assert_eq!(got[2], base[0]);
        assert_eq!(got[1], base[1]);
    }

    #[test]
    fn training_zero_epochs_equals_init_and_same_seed_is_bit_identical() {
        let cfg = small_config(44);
        let mut rng = ChaCha8Rng::seed_from_u64(45);
        let samples: Vec<(Tensor, usize)> = (0..6)
            .map(|i| (random_patch(&mut rng, &cfg), i % 3))
            .collect();
        let (zero, _) = train(&cfg, &samples, 0, 0.05).unwrap();
        assert_eq!(param_bits(&zero), param_bits(&TrainedNetwork::initialize(&cfg).unwrap()));

        let (a, _) = train(&cfg, &samples, 3, 0.05).unwrap();
        let (b, _) = train(&cfg, &samples, 3, 0.05).unwrap();
        assert_eq!(param_bits(&a), param_bits(&b));
    }

    #[test]
    fn training_separable_patches_reaches_high_accuracy() {
        let cfg = NetworkConfig {
            input_side: 8,
            in_channels: 2,
            num_classes: 2,
            ..small_config(46)
        };
        let mut samples = Vec::new();
        for i in 0..10 {
            let v = 0.2 + 0.02 * (i as f64);
            samples.push((Tensor::filled(&[2, 8, 8], v).unwrap(), 0));
            samples.push((Tensor::filled(&[2, 8, 8], v + 0.5).unwrap(), 1));
        }
        let (net, stats) = train(&cfg, &samples, 20, 0.1).unwrap();
        assert!(stats.final_loss <= stats.initial_loss);
        assert!(
            stats.final_accuracy >= 0.95,
            "accuracy {} too low",
            stats.final_accuracy
        );
        assert!(accuracy(&net, &samples).unwrap() >= 0.95);
    }

    #[test]
    fn training_rejects_bad_inputs() {
        let cfg = small_config(47);
        assert!(train(&cfg, &[], 1, 0.1).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(48);
        let bad_class = vec![(random_patch(&mut rng, &cfg), 99usize)];
        assert!(train(&cfg, &bad_class, 1, 0.1).is_err());
        let bad_shape = vec![(Tensor::zeros(&[1, 4, 4]).unwrap(), 0usize)];
        assert!(train(&cfg, &bad_shape, 1, 0.1).is_err());
    }

    #[test]
    fn checkpoint_roundtrip_is_bit_exact() {
        let cfg = small_config(49);
        let mut rng = ChaCha8Rng::seed_from_u64(50);
        let samples: Vec<(Tensor, usize)> = (0..4)
            .map(|i| (random_patch(&mut rng, &cfg), i % 3))
            .collect();
        let (net, _) = train(&cfg, &samples, 2, 0.05).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&net, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back.config(), net.config());
        assert_eq!(param_bits(&back), param_bits(&net));

        // loaded network behaves identically
        let patch = random_patch(&mut rng, &cfg);
        let a: Vec<f64> = net.forward(&patch).unwrap().iter().map(|s| s.score).collect();
        let b: Vec<f64> = back.forward(&patch).unwrap().iter().map(|s| s.score).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn checkpoint_rejects_corrupt_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        std::fs::write(&path, b"not a checkpoint").unwrap();
        assert!(load_checkpoint(&path).is_err());
    }
}
