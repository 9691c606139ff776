//! Layer-stack networks with reverse-mode differentiation.
//!
//! A [`Network`] is a trunk of catalog layers. Its output is exposed through
//! two heads that share every parameter:
//!
//! * the regression head, which is the trunk output itself (a density map
//!   for `[C, H, W]` trunks, a scalar for `[1]` trunks), and
//! * the ranking head, which sum-pools the trunk output to one value per
//!   image.
//!
//! [`Network::forward`] records the activations needed by exactly one
//! subsequent [`Network::backward`] call; a second backward without a fresh
//! forward is rejected.

mod layers;

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::{Result, Tensor, TensorError};
use layers::ConvGeom;

/// One entry of the fixed layer catalog.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerSpec {
    /// Zero-padded stride-1 convolution with an odd square kernel.
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
    },
    /// Non-overlapping `size`×`size` max pooling.
    MaxPool2d { size: usize },
    Relu,
    /// Fully connected layer over the flattened per-image input.
    Dense { inputs: usize, outputs: usize },
    /// Sum over every non-batch dimension.
    GlobalSumPool,
    /// Mean over every non-batch dimension.
    GlobalMeanPool,
}

impl LayerSpec {
    pub fn name(&self) -> &'static str {
        match self {
            LayerSpec::Conv2d { .. } => "conv",
            LayerSpec::MaxPool2d { .. } => "maxpool",
            LayerSpec::Relu => "relu",
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::GlobalSumPool => "sumpool",
            LayerSpec::GlobalMeanPool => "meanpool",
        }
    }

    fn output_shape(&self, index: usize, input: &[usize]) -> Result<Vec<usize>> {
        let fail = |reason: String| TensorError::Layer {
            index,
            layer: self.name().to_string(),
            reason,
        };
        match *self {
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
            } => {
                if input.len() != 3 || input[0] != in_channels {
                    return Err(fail(format!(
                        "expected input [{in_channels}, H, W], found {input:?}"
                    )));
                }
                if kernel % 2 == 0 || out_channels == 0 {
                    return Err(fail(format!("kernel {kernel} must be odd, outputs > 0")));
                }
                Ok(vec![out_channels, input[1], input[2]])
            }
            LayerSpec::MaxPool2d { size } => {
                if input.len() != 3 || size == 0 || input[1] % size != 0 || input[2] % size != 0
                {
                    return Err(fail(format!(
                        "pool size {size} does not tile input {input:?}"
                    )));
                }
                Ok(vec![input[0], input[1] / size, input[2] / size])
            }
            LayerSpec::Relu => Ok(input.to_vec()),
            LayerSpec::Dense { inputs, outputs } => {
                let n: usize = input.iter().product();
                if n != inputs || outputs == 0 {
                    return Err(fail(format!(
                        "expected {inputs} input features, found {n} from {input:?}"
                    )));
                }
                Ok(vec![outputs])
            }
            LayerSpec::GlobalSumPool | LayerSpec::GlobalMeanPool => Ok(vec![1]),
        }
    }
}

impl fmt::Display for LayerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
            } => write!(f, "conv{kernel}x{kernel}:{in_channels}->{out_channels}"),
            LayerSpec::MaxPool2d { size } => write!(f, "maxpool{size}"),
            LayerSpec::Dense { inputs, outputs } => write!(f, "dense:{inputs}->{outputs}"),
            other => f.write_str(other.name()),
        }
    }
}

/// A named trainable tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub weight_decay: bool,
}

/// Ordered set of uniquely named parameters.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Parameters {
    items: Vec<Parameter>,
}

impl Parameters {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, value: Tensor, weight_decay: bool) -> Result<usize> {
        let name = name.into();
        if self.items.iter().any(|p| p.name == name) {
            return Err(TensorError::DuplicateParameter(name));
        }
        self.items.push(Parameter {
            name,
            value,
            weight_decay,
        });
        Ok(self.items.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.items.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.items.iter_mut()
    }

    pub fn get(&self, name: &str) -> Option<&Parameter> {
        self.items.iter().find(|p| p.name == name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Parameter> {
        self.items.iter_mut().find(|p| p.name == name)
    }

    pub fn by_index(&self, index: usize) -> &Parameter {
        &self.items[index]
    }

    pub fn by_index_mut(&mut self, index: usize) -> &mut Parameter {
        &mut self.items[index]
    }

    /// Total number of scalar values across all parameters.
    pub fn numel(&self) -> usize {
        self.items.iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        self.items.iter_mut().for_each(|p| p.value.zero_grad());
    }

    pub fn clear_grad(&mut self) {
        self.items.iter_mut().for_each(|p| p.value.clear_grad());
    }

    /// Flattened copy of every gradient in parameter order (zeros where absent).
    pub fn flat_grad(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.numel());
        for p in &self.items {
            match p.value.grad() {
                Some(g) => out.extend_from_slice(g),
                None => out.extend(std::iter::repeat_n(0.0, p.value.len())),
            }
        }
        out
    }

    pub fn flat_values(&self) -> Vec<f64> {
        self.items
            .iter()
            .flat_map(|p| p.value.data().iter().copied())
            .collect()
    }

    /// Replaces parameter values from a flat buffer in parameter order.
    pub fn set_flat_values(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.numel() {
            return Err(TensorError::DataLength {
                shape: vec![self.numel()],
                expected: self.numel(),
                actual: values.len(),
            });
        }
        let mut off = 0;
        for p in &mut self.items {
            let n = p.value.len();
            p.value.data_mut().copy_from_slice(&values[off..off + n]);
            off += n;
        }
        Ok(())
    }
}

/// Architecture description: per-image input shape plus the layer stack.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetworkSpec {
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerSpec>,
}

impl NetworkSpec {
    pub fn new(input_shape: Vec<usize>, layers: Vec<LayerSpec>) -> Self {
        Self {
            input_shape,
            layers,
        }
    }

    /// Per-image shapes after each layer; `shapes[0]` is the input shape.
    pub fn shapes(&self) -> Result<Vec<Vec<usize>>> {
        if self.input_shape.is_empty() || self.input_shape.iter().any(|&d| d == 0) {
            return Err(TensorError::ZeroDimension(self.input_shape.clone()));
        }
        let mut shapes = vec![self.input_shape.clone()];
        for (index, layer) in self.layers.iter().enumerate() {
            let next = layer.output_shape(index, shapes.last().unwrap())?;
            shapes.push(next);
        }
        Ok(shapes)
    }

    pub fn output_shape(&self) -> Result<Vec<usize>> {
        Ok(self.shapes()?.pop().unwrap())
    }

    /// Compact textual form, e.g. `1x64x64|maxpool2|conv3x3:1->8|relu`.
    pub fn describe(&self) -> String {
        let dims: Vec<String> = self.input_shape.iter().map(|d| d.to_string()).collect();
        let mut parts = vec![dims.join("x")];
        parts.extend(self.layers.iter().map(|l| l.to_string()));
        parts.join("|")
    }

    /// Parses the form produced by [`NetworkSpec::describe`].
    pub fn parse(text: &str) -> std::result::Result<Self, String> {
        let mut parts = text.split('|').map(str::trim);
        let dims = parts.next().ok_or("empty network description")?;
        let input_shape = dims
            .split('x')
            .map(|d| d.parse::<usize>().map_err(|e| format!("bad input dim `{d}`: {e}")))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let mut layers = Vec::new();
        for part in parts {
            layers.push(parse_layer(part)?);
        }
        Ok(Self::new(input_shape, layers))
    }
}

fn parse_layer(text: &str) -> std::result::Result<LayerSpec, String> {
    let num = |s: &str| s.parse::<usize>().map_err(|e| format!("bad number in `{text}`: {e}"));
    let io = |s: &str| -> std::result::Result<(usize, usize), String> {
        let (a, b) = s.split_once("->").ok_or(format!("expected `a->b` in `{text}`"))?;
        Ok((num(a)?, num(b)?))
    };
    match text {
        "relu" => return Ok(LayerSpec::Relu),
        "sumpool" => return Ok(LayerSpec::GlobalSumPool),
        "meanpool" => return Ok(LayerSpec::GlobalMeanPool),
        _ => {}
    }
    if let Some(rest) = text.strip_prefix("maxpool") {
        return Ok(LayerSpec::MaxPool2d { size: num(rest)? });
    }
    if let Some(rest) = text.strip_prefix("dense:") {
        let (inputs, outputs) = io(rest)?;
        return Ok(LayerSpec::Dense { inputs, outputs });
    }
    if let Some(rest) = text.strip_prefix("conv") {
        let (k, chans) = rest.split_once(':').ok_or(format!("bad conv `{text}`"))?;
        let (kx, ky) = k.split_once('x').ok_or(format!("bad kernel in `{text}`"))?;
        if kx != ky {
            return Err(format!("non-square kernel in `{text}`"));
        }
        let (in_channels, out_channels) = io(chans)?;
        return Ok(LayerSpec::Conv2d {
            in_channels,
            out_channels,
            kernel: num(kx)?,
        });
    }
    Err(format!("unknown layer `{text}`"))
}

/// Outputs of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadOutputs {
    /// Trunk output, `[batch, ..output_shape]`.
    pub regression: Tensor,
    /// Sum-pool of the trunk output, one value per image.
    pub ranking: Vec<f64>,
}

#[derive(Debug, Clone)]
enum Cache {
    None,
    Input(Tensor),
    Argmax(Vec<usize>),
}

#[derive(Debug, Clone)]
struct ForwardRecord {
    batch: usize,
    caches: Vec<Cache>,
}

/// Layer stack plus its parameters. See the module docs for the head layout.
#[derive(Debug, Clone)]
pub struct Network {
    spec: NetworkSpec,
    shapes: Vec<Vec<usize>>,
    /// `(weight, bias)` parameter indices per layer.
    param_slots: Vec<Option<(usize, usize)>>,
    params: Parameters,
    record: Option<ForwardRecord>,
    forward_passes: u64,
}

impl Network {
    /// Builds a network with He-normal weights and zero biases drawn from `seed`.
    pub fn new(spec: NetworkSpec, seed: u64) -> Result<Self> {
        let shapes = spec.shapes()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Parameters::new();
        let mut param_slots = Vec::with_capacity(spec.layers.len());
        for (index, layer) in spec.layers.iter().enumerate() {
            let slot = match *layer {
                LayerSpec::Conv2d {
                    in_channels,
                    out_channels,
                    kernel,
                } => {
                    let fan_in = in_channels * kernel * kernel;
                    let w = he_normal(&mut rng, fan_in, out_channels * fan_in);
                    let w = Tensor::new(vec![out_channels, in_channels, kernel, kernel], w)?;
                    let b = Tensor::zeros(vec![out_channels])?;
                    let wi = params.push(format!("{index}.conv.weight"), w, true)?;
                    let bi = params.push(format!("{index}.conv.bias"), b, false)?;
                    Some((wi, bi))
                }
                LayerSpec::Dense { inputs, outputs } => {
                    let w = he_normal(&mut rng, inputs, inputs * outputs);
                    let w = Tensor::new(vec![outputs, inputs], w)?;
                    let b = Tensor::zeros(vec![outputs])?;
                    let wi = params.push(format!("{index}.dense.weight"), w, true)?;
                    let bi = params.push(format!("{index}.dense.bias"), b, false)?;
                    Some((wi, bi))
                }
                _ => None,
            };
            param_slots.push(slot);
        }
        Ok(Self {
            spec,
            shapes,
            param_slots,
            params,
            record: None,
            forward_passes: 0,
        })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.shapes[0]
    }

    pub fn output_shape(&self) -> &[usize] {
        self.shapes.last().unwrap()
    }

    pub fn params(&self) -> &Parameters {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Parameters {
        &mut self.params
    }

    /// Number of images pushed through the network since construction
    /// (or the last [`Network::reset_pass_counter`]).
    pub fn forward_passes(&self) -> u64 {
        self.forward_passes
    }

    pub fn reset_pass_counter(&mut self) {
        self.forward_passes = 0;
    }

    fn check_input(&self, batch: &Tensor) -> Result<()> {
        if batch.rank() < 2 || batch.shape()[1..] != self.shapes[0][..] {
            let layer = self
                .spec
                .layers
                .first()
                .map(|l| l.name().to_string())
                .unwrap_or_else(|| "input".into());
            return Err(TensorError::Layer {
                index: 0,
                layer,
                reason: format!(
                    "input shape {:?} does not match [batch, {:?}]",
                    batch.shape(),
                    self.shapes[0]
                ),
            });
        }
        Ok(())
    }

    /// Forward pass that records activations for one [`Network::backward`].
    pub fn forward(&mut self, batch: &Tensor) -> Result<HeadOutputs> {
        self.check_input(batch)?;
        let (out, caches) = self.run(batch, true)?;
        self.forward_passes += batch.batch_size() as u64;
        self.record = Some(ForwardRecord {
            batch: batch.batch_size(),
            caches,
        });
        Ok(out)
    }

    /// Forward pass without recording; does not touch the pass counter.
    pub fn predict(&self, batch: &Tensor) -> Result<HeadOutputs> {
        self.check_input(batch)?;
        Ok(self.run(batch, false)?.0)
    }

    fn run(&self, batch: &Tensor, record: bool) -> Result<(HeadOutputs, Vec<Cache>)> {
        let n = batch.batch_size();
        let mut caches = Vec::with_capacity(if record { self.spec.layers.len() } else { 0 });
        let mut x = batch.clone();
        x.clear_grad();
        for (index, layer) in self.spec.layers.iter().enumerate() {
            let in_shape = &self.shapes[index];
            let out_shape = &self.shapes[index + 1];
            let mut shape = vec![n];
            shape.extend_from_slice(out_shape);
            let mut y = Tensor::zeros(shape)?;
            let mut cache = Cache::None;
            match *layer {
                LayerSpec::Conv2d {
                    in_channels,
                    out_channels,
                    kernel,
                } => {
                    let (wi, bi) = self.param_slots[index].unwrap();
                    let geom = ConvGeom {
                        batch: n,
                        in_ch: in_channels,
                        out_ch: out_channels,
                        height: in_shape[1],
                        width: in_shape[2],
                        kernel,
                    };
                    layers::conv_forward(
                        geom,
                        x.data(),
                        self.params.by_index(wi).value.data(),
                        self.params.by_index(bi).value.data(),
                        y.data_mut(),
                    );
                    if record {
                        cache = Cache::Input(x);
                    }
                }
                LayerSpec::MaxPool2d { size } => {
                    let mut argmax = vec![0usize; y.len()];
                    layers::maxpool_forward(
                        n * in_shape[0],
                        in_shape[1],
                        in_shape[2],
                        size,
                        x.data(),
                        y.data_mut(),
                        &mut argmax,
                    );
                    if record {
                        cache = Cache::Argmax(argmax);
                    }
                }
                LayerSpec::Relu => {
                    for (o, i) in y.data_mut().iter_mut().zip(x.data()) {
                        *o = i.max(0.0);
                    }
                    if record {
                        cache = Cache::Input(x);
                    }
                }
                LayerSpec::Dense { inputs, outputs } => {
                    let (wi, bi) = self.param_slots[index].unwrap();
                    layers::dense_forward(
                        n,
                        inputs,
                        outputs,
                        x.data(),
                        self.params.by_index(wi).value.data(),
                        self.params.by_index(bi).value.data(),
                        y.data_mut(),
                    );
                    if record {
                        cache = Cache::Input(x);
                    }
                }
                LayerSpec::GlobalSumPool | LayerSpec::GlobalMeanPool => {
                    let scale = if matches!(layer, LayerSpec::GlobalMeanPool) {
                        1.0 / x.item_len() as f64
                    } else {
                        1.0
                    };
                    for b in 0..n {
                        y.data_mut()[b] = x.item(b).iter().sum::<f64>() * scale;
                    }
                }
            }
            caches.push(cache);
            x = y;
        }
        let ranking = (0..n).map(|b| x.item(b).iter().sum::<f64>()).collect();
        Ok((
            HeadOutputs {
                regression: x,
                ranking,
            },
            caches,
        ))
    }

    /// Backpropagates upstream gradients of both heads into the parameter
    /// gradients, accumulating onto whatever is already stored there.
    ///
    /// Every parameter ends up with a gradient buffer, even if untouched.
    pub fn backward(
        &mut self,
        grad_regression: Option<&Tensor>,
        grad_ranking: Option<&[f64]>,
    ) -> Result<()> {
        self.backward_impl(grad_regression, grad_ranking, false)
            .map(|_| ())
    }

    /// As [`Network::backward`], also returning the gradient with respect to
    /// the input batch.
    pub fn backward_with_input_grad(
        &mut self,
        grad_regression: Option<&Tensor>,
        grad_ranking: Option<&[f64]>,
    ) -> Result<Tensor> {
        Ok(self
            .backward_impl(grad_regression, grad_ranking, true)?
            .expect("input gradient requested"))
    }

    fn backward_impl(
        &mut self,
        grad_regression: Option<&Tensor>,
        grad_ranking: Option<&[f64]>,
        want_input_grad: bool,
    ) -> Result<Option<Tensor>> {
        let record = self.record.take().ok_or(TensorError::MissingForward)?;
        let n = record.batch;
        let mut out_shape = vec![n];
        out_shape.extend_from_slice(self.output_shape());
        let mut grad = Tensor::zeros(out_shape.clone())?;
        if let Some(g) = grad_regression {
            if g.shape() != out_shape.as_slice() {
                return Err(TensorError::ShapeMismatch {
                    expected: out_shape,
                    found: g.shape().to_vec(),
                });
            }
            grad.data_mut().copy_from_slice(g.data());
        }
        if let Some(g) = grad_ranking {
            if g.len() != n {
                return Err(TensorError::ShapeMismatch {
                    expected: vec![n],
                    found: vec![g.len()],
                });
            }
            let item = grad.item_len();
            for (b, gb) in g.iter().enumerate() {
                for v in &mut grad.data_mut()[b * item..(b + 1) * item] {
                    *v += gb;
                }
            }
        }
        for p in self.params.iter_mut() {
            p.value.grad_mut();
        }

        let mut caches = record.caches;
        for index in (0..self.spec.layers.len()).rev() {
            let need_input_grad = index > 0 || want_input_grad;
            let in_shape = &self.shapes[index];
            let mut shape = vec![n];
            shape.extend_from_slice(in_shape);
            let mut gin = Tensor::zeros(shape)?;
            let cache = std::mem::replace(&mut caches[index], Cache::None);
            match (self.spec.layers[index], cache) {
                (
                    LayerSpec::Conv2d {
                        in_channels,
                        out_channels,
                        kernel,
                    },
                    Cache::Input(input),
                ) => {
                    let (wi, bi) = self.param_slots[index].unwrap();
                    let geom = ConvGeom {
                        batch: n,
                        in_ch: in_channels,
                        out_ch: out_channels,
                        height: in_shape[1],
                        width: in_shape[2],
                        kernel,
                    };
                    let mut gw = self.params.by_index_mut(wi).value.take_grad().unwrap();
                    let mut gb = self.params.by_index_mut(bi).value.take_grad().unwrap();
                    layers::conv_backward(
                        geom,
                        input.data(),
                        self.params.by_index(wi).value.data(),
                        grad.data(),
                        &mut gw,
                        &mut gb,
                        need_input_grad.then_some(gin.data_mut()),
                    );
                    self.params.by_index_mut(wi).value.put_grad(gw);
                    self.params.by_index_mut(bi).value.put_grad(gb);
                }
                (LayerSpec::MaxPool2d { .. }, Cache::Argmax(argmax)) => {
                    let gd = gin.data_mut();
                    for (o, &src) in argmax.iter().enumerate() {
                        gd[src] += grad.data()[o];
                    }
                }
                (LayerSpec::Relu, Cache::Input(input)) => {
                    for ((gi, go), x) in gin.data_mut().iter_mut().zip(grad.data()).zip(input.data()) {
                        *gi = if *x > 0.0 { *go } else { 0.0 };
                    }
                }
                (LayerSpec::Dense { inputs, outputs }, Cache::Input(input)) => {
                    let (wi, bi) = self.param_slots[index].unwrap();
                    let mut gw = self.params.by_index_mut(wi).value.take_grad().unwrap();
                    let mut gb = self.params.by_index_mut(bi).value.take_grad().unwrap();
                    layers::dense_backward(
                        n,
                        inputs,
                        outputs,
                        input.data(),
                        self.params.by_index(wi).value.data(),
                        grad.data(),
                        &mut gw,
                        &mut gb,
                        need_input_grad.then_some(gin.data_mut()),
                    );
                    self.params.by_index_mut(wi).value.put_grad(gw);
                    self.params.by_index_mut(bi).value.put_grad(gb);
                }
                (layer @ (LayerSpec::GlobalSumPool | LayerSpec::GlobalMeanPool), _) => {
                    let item = gin.item_len();
                    let scale = if matches!(layer, LayerSpec::GlobalMeanPool) {
                        1.0 / item as f64
                    } else {
                        1.0
                    };
                    for b in 0..n {
                        let g = grad.data()[b] * scale;
                        gin.data_mut()[b * item..(b + 1) * item]
                            .iter_mut()
                            .for_each(|v| *v = g);
                    }
                }
                (layer, _) => {
                    return Err(TensorError::Layer {
                        index,
                        layer: layer.name().to_string(),
                        reason: "forward record is inconsistent".into(),
                    })
                }
            }
            grad = gin;
        }
        Ok(want_input_grad.then_some(grad))
    }
}

fn he_normal(rng: &mut ChaCha8Rng, fan_in: usize, count: usize) -> Vec<f64> {
    let std = (2.0 / fan_in as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("positive std");
    (0..count).map(|_| normal.sample(rng)).collect()
}
