//! Declarative feed-forward models: layer specs, deterministic initialization,
//! pivot resolution and the JSON + FBPT on-disk format.

use std::collections::HashSet;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::tensor::{self, Activation, Tensor};

pub const MODEL_FORMAT_VERSION: u32 = 1;

/// Name that addresses the model input as a pivot.
pub const INPUT_PIVOT: &str = "input";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "hyperparams", rename_all = "kebab-case")]
pub enum LayerKind {
    Conv2d { out_channels: usize, kernel: usize, stride: usize, pad: usize },
    Dense { units: usize },
    Relu,
    /// Final linear layer; its outputs are logits read through a sigmoid and split into heads.
    SigmoidHead { units: usize },
    Flatten,
    Maxpool { size: usize },
}

impl LayerKind {
    pub fn label(&self) -> &'static str {
        match self {
            LayerKind::Conv2d { .. } => "conv2d",
            LayerKind::Dense { .. } => "dense",
            LayerKind::Relu => "relu",
            LayerKind::SigmoidHead { .. } => "sigmoid-head",
            LayerKind::Flatten => "flatten",
            LayerKind::Maxpool { .. } => "maxpool",
        }
    }

    pub fn is_nonlinearity(&self) -> bool {
        matches!(self, LayerKind::Relu)
    }

    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        match *self {
            LayerKind::Conv2d { out_channels, kernel, stride, pad } => {
                if input.len() != 3 {
                    return shape_err(format!("conv2d expects [C,H,W], got {input:?}"));
                }
                if out_channels == 0 || kernel == 0 {
                    return shape_err("conv2d needs positive channels and kernel");
                }
                let oh = tensor::conv_out_extent(input[1], kernel, stride, pad)?;
                let ow = tensor::conv_out_extent(input[2], kernel, stride, pad)?;
                Ok(vec![out_channels, oh, ow])
            }
            LayerKind::Dense { units } | LayerKind::SigmoidHead { units } => {
                if input.len() != 1 {
                    return shape_err(format!("{} expects a flat input, got {input:?}", self.label()));
                }
                if units == 0 {
                    return shape_err("dense layer needs at least one unit");
                }
                Ok(vec![units])
            }
            LayerKind::Relu => Ok(input.to_vec()),
            LayerKind::Flatten => Ok(vec![input.iter().product()]),
            LayerKind::Maxpool { size } => {
                if input.len() != 3 || size == 0 || input[1] % size != 0 || input[2] % size != 0 {
                    return shape_err(format!("maxpool {size} does not tile {input:?}"));
                }
                Ok(vec![input[0], input[1] / size, input[2] / size])
            }
        }
    }

    /// Weight and bias shapes, plus `(fan_in, fan_out)` for initialization.
    fn param_shapes(&self, input: &[usize]) -> Option<(Vec<usize>, Vec<usize>, usize, usize)> {
        match *self {
            LayerKind::Conv2d { out_channels, kernel, .. } => {
                let area = kernel * kernel;
                Some((
                    vec![out_channels, input[0], kernel, kernel],
                    vec![out_channels],
                    input[0] * area,
                    out_channels * area,
                ))
            }
            LayerKind::Dense { units } | LayerKind::SigmoidHead { units } => {
                Some((vec![units, input[0]], vec![units], input[0], units))
            }
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    #[serde(flatten)]
    pub kind: LayerKind,
}

impl LayerSpec {
    pub fn new(name: impl Into<String>, kind: LayerKind) -> Self {
        LayerSpec { name: name.into(), kind }
    }
}

/// Half-open range `[start, end)` of output indices belonging to one task.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Head {
    pub name: String,
    pub start: usize,
    pub end: usize,
}

impl Head {
    pub fn indices(&self) -> std::ops::Range<usize> {
        self.start..self.end
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerSpec>,
    #[serde(default)]
    pub heads: Vec<Head>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Params {
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    spec: LayerSpec,
    input_shape: Vec<usize>,
    output_shape: Vec<usize>,
    params: Option<Params>,
}

impl Layer {
    pub fn name(&self) -> &str {
        &self.spec.name
    }

    pub fn kind(&self) -> &LayerKind {
        &self.spec.kind
    }

    pub fn spec(&self) -> &LayerSpec {
        &self.spec
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn output_shape(&self) -> &[usize] {
        &self.output_shape
    }

    pub fn params(&self) -> Option<&Params> {
        self.params.as_ref()
    }

    pub fn params_mut(&mut self) -> Option<&mut Params> {
        self.params.as_mut()
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        if x.shape() != self.input_shape.as_slice() {
            return shape_err(format!(
                "layer `{}` expects input {:?}, got {:?}",
                self.name(),
                self.input_shape,
                x.shape()
            ));
        }
        match self.spec.kind {
            LayerKind::Conv2d { stride, pad, .. } => {
                let p = self.params.as_ref().expect("conv2d has params");
                let mut y = tensor::conv2d(x, &p.weight, stride, pad)?;
                let plane = y.shape()[1] * y.shape()[2];
                for (c, &b) in p.bias.data().iter().enumerate() {
                    for v in &mut y.data_mut()[c * plane..(c + 1) * plane] {
                        *v += b;
                    }
                }
                Ok(y)
            }
            LayerKind::Dense { units } | LayerKind::SigmoidHead { units } => {
                let p = self.params.as_ref().expect("dense has params");
                let column = x.clone().reshape(vec![x.len(), 1])?;
                let y = tensor::matmul(&p.weight, &column)?.reshape(vec![units])?;
                y.add(&p.bias)
            }
            LayerKind::Relu => Ok(tensor::activation(x, Activation::Relu)),
            LayerKind::Flatten => x.clone().reshape(self.output_shape.clone()),
            LayerKind::Maxpool { size } => tensor::max_pool2d(x, size),
        }
    }

    /// Vector-Jacobian product at input `x`. Parameter gradients are accumulated
    /// into `param_grads` when given; the input gradient only when `want_input`.
    pub fn backward(
        &self,
        x: &Tensor,
        grad_out: &Tensor,
        want_input: bool,
        param_grads: Option<&mut Params>,
    ) -> Result<Option<Tensor>> {
        if grad_out.shape() != self.output_shape.as_slice() {
            return shape_err(format!(
                "layer `{}` output gradient has shape {:?}, expected {:?}",
                self.name(),
                grad_out.shape(),
                self.output_shape
            ));
        }
        match self.spec.kind {
            LayerKind::Conv2d { stride, pad, .. } => {
                let p = self.params.as_ref().expect("conv2d has params");
                let (gin, gk) =
                    tensor::conv2d_backward(x, &p.weight, grad_out, stride, pad, want_input, param_grads.is_some())?;
                if let (Some(acc), Some(gk)) = (param_grads, gk) {
                    acc.weight.add_assign(&gk)?;
                    let plane = grad_out.shape()[1] * grad_out.shape()[2];
                    for (c, b) in acc.bias.data_mut().iter_mut().enumerate() {
                        *b += grad_out.data()[c * plane..(c + 1) * plane].iter().fold(0.0, |s, v| s + v);
                    }
                }
                Ok(gin)
            }
            LayerKind::Dense { .. } | LayerKind::SigmoidHead { .. } => {
                let p = self.params.as_ref().expect("dense has params");
                let (units, fan_in) = (p.weight.shape()[0], p.weight.shape()[1]);
                let w = p.weight.data();
                let g = grad_out.data();
                if let Some(acc) = param_grads {
                    let gw = acc.weight.data_mut();
                    for o in 0..units {
                        let go = g[o];
                        for (slot, &xi) in gw[o * fan_in..(o + 1) * fan_in].iter_mut().zip(x.data()) {
                            *slot += go * xi;
                        }
                    }
                    acc.bias.add_assign(grad_out)?;
                }
                if !want_input {
                    return Ok(None);
                }
                let mut gin = vec![0.0; fan_in];
                for o in 0..units {
                    let go = g[o];
                    for (slot, &wv) in gin.iter_mut().zip(&w[o * fan_in..(o + 1) * fan_in]) {
                        *slot += go * wv;
                    }
                }
                Ok(Some(Tensor::from_parts(vec![fan_in], gin)))
            }
            _ if !want_input => Ok(None),
            LayerKind::Relu => Ok(Some(tensor::activation_backward(x, grad_out, Activation::Relu)?)),
            LayerKind::Flatten => Ok(Some(grad_out.clone().reshape(self.input_shape.clone())?)),
            LayerKind::Maxpool { size } => Ok(Some(tensor::max_pool2d_backward(x, size, grad_out)?)),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    input_shape: Vec<usize>,
    layers: Vec<Layer>,
    heads: Vec<Head>,
}

impl Model {
    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn heads(&self) -> &[Head] {
        &self.heads
    }

    pub fn head(&self, name: &str) -> Option<&Head> {
        self.heads.iter().find(|h| h.name == name)
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or_else(|| self.input_shape.iter().product(), |l| l.output_shape.iter().product())
    }

    pub fn architecture(&self) -> Architecture {
        Architecture {
            input_shape: self.input_shape.clone(),
            layers: self.layers.iter().map(|l| l.spec.clone()).collect(),
            heads: self.heads.clone(),
        }
    }

    /// Stage index of a named layer output: 0 is the input, `i + 1` the output of layer `i`.
    pub fn stage_of(&self, name: &str) -> Result<usize> {
        if name == INPUT_PIVOT {
            return Ok(0);
        }
        self.layers
            .iter()
            .position(|l| l.name() == name)
            .map(|i| i + 1)
            .ok_or_else(|| Error::UnknownLayer(name.to_string()))
    }

    pub fn stage_name(&self, stage: usize) -> &str {
        if stage == 0 {
            INPUT_PIVOT
        } else {
            self.layers[stage - 1].name()
        }
    }

    pub fn stage_shape(&self, stage: usize) -> &[usize] {
        if stage == 0 {
            &self.input_shape
        } else {
            &self.layers[stage - 1].output_shape
        }
    }

    /// Layer names usable as pivots, front to back, including the input.
    pub fn pivot_names(&self) -> Vec<String> {
        std::iter::once(INPUT_PIVOT.to_string())
            .chain(self.layers.iter().map(|l| l.name().to_string()))
            .collect()
    }

    /// Plain forward pass without recording a tape.
    pub fn predict(&self, input: &Tensor) -> Result<Tensor> {
        if input.shape() != self.input_shape.as_slice() {
            return shape_err(format!("model expects input {:?}, got {:?}", self.input_shape, input.shape()));
        }
        let mut x = input.clone();
        for layer in &self.layers {
            x = layer.forward(&x)?;
        }
        Ok(x)
    }

    /// Zeroed parameter buffers shaped like this model's parameters.
    pub fn zero_grads(&self) -> Vec<Option<Params>> {
        self.layers
            .iter()
            .map(|l| {
                l.params.as_ref().map(|p| Params {
                    weight: Tensor::zeros(p.weight.shape()),
                    bias: Tensor::zeros(p.bias.shape()),
                })
            })
            .collect()
    }

    /// FNV-1a over every parameter bit pattern.
    pub fn param_checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for p in self.layers.iter().filter_map(|l| l.params.as_ref()) {
            for v in p.weight.data().iter().chain(p.bias.data()) {
                for b in v.to_bits().to_le_bytes() {
                    h ^= b as u64;
                    h = h.wrapping_mul(0x0100_0000_01b3);
                }
            }
        }
        h
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().filter_map(|l| l.params.as_ref()).map(|p| p.weight.len() + p.bias.len()).sum()
    }
}

/// Resolves shapes for `arch` and initializes parameters uniformly in
/// `[-s, s]`, `s = sqrt(6 / (fan_in + fan_out))`, biases zero.
pub fn build_model(arch: &Architecture, seed: u64) -> Result<Model> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layers = resolve_layers(arch)?;
    for layer in &mut layers {
        if let Some((wshape, bshape, fan_in, fan_out)) = layer.spec.kind.param_shapes(&layer.input_shape) {
            let bound = init_bound(fan_in, fan_out);
            let n: usize = wshape.iter().product();
            let w = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
            layer.params = Some(Params { weight: Tensor::new(wshape, w)?, bias: Tensor::zeros(&bshape) });
        }
    }
    assemble(arch, layers)
}

pub fn init_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

fn resolve_layers(arch: &Architecture) -> Result<Vec<Layer>> {
    if arch.input_shape.is_empty() || arch.input_shape.contains(&0) {
        return shape_err(format!("invalid input shape {:?}", arch.input_shape));
    }
    let mut seen = HashSet::from([INPUT_PIVOT.to_string()]);
    let mut shape = arch.input_shape.clone();
    let mut prev = INPUT_PIVOT.to_string();
    let mut layers = Vec::with_capacity(arch.layers.len());
    for spec in &arch.layers {
        if !seen.insert(spec.name.clone()) {
            return Err(Error::DuplicateLayer(spec.name.clone()));
        }
        let out = spec.kind.output_shape(&shape).map_err(|e| {
            Error::Shape(format!("`{prev}` -> `{}` ({}) does not compose: {e}", spec.name, spec.kind.label()))
        })?;
        layers.push(Layer { spec: spec.clone(), input_shape: shape, output_shape: out.clone(), params: None });
        shape = out;
        prev = spec.name.clone();
    }
    Ok(layers)
}

fn assemble(arch: &Architecture, layers: Vec<Layer>) -> Result<Model> {
    let mut model = Model { input_shape: arch.input_shape.clone(), layers, heads: arch.heads.clone() };
    let out_dim = model.output_dim();
    if model.heads.is_empty() {
        model.heads.push(Head { name: "out".into(), start: 0, end: out_dim });
    }
    let mut ranges: Vec<&Head> = model.heads.iter().collect();
    ranges.sort_by_key(|h| h.start);
    let mut cursor = 0;
    for h in ranges {
        if h.start != cursor || h.end <= h.start {
            return shape_err(format!("head `{}` [{}, {}) leaves a gap or overlaps", h.name, h.start, h.end));
        }
        cursor = h.end;
    }
    if cursor != out_dim {
        return shape_err(format!("heads cover {cursor} outputs but the model produces {out_dim}"));
    }
    Ok(model)
}

/// Pivot layers sorted front to back.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PivotSet {
    names: Vec<String>,
    stages: Vec<usize>,
}

impl PivotSet {
    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn stages(&self) -> &[usize] {
        &self.stages
    }

    pub fn len(&self) -> usize {
        self.stages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stages.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, usize)> {
        self.names.iter().map(String::as_str).zip(self.stages.iter().copied())
    }

    /// `+`-joined names, as used in reports.
    pub fn label(&self) -> String {
        self.names.join("+")
    }

    /// Builds a pivot set that keeps the caller's order, failing if it is not topological.
    pub fn ordered<S: AsRef<str>>(model: &Model, names: &[S]) -> Result<Self> {
        let set = pivot_set(model, names)?;
        for pair in names.windows(2) {
            let (a, b) = (model.stage_of(pair[0].as_ref())?, model.stage_of(pair[1].as_ref())?);
            if a >= b {
                return Err(Error::PivotOrder { before: pair[1].as_ref().to_string(), after: pair[0].as_ref().to_string() });
            }
        }
        Ok(set)
    }
}

/// Resolves layer names and returns them in topological order, duplicates removed.
pub fn pivot_set<S: AsRef<str>>(model: &Model, names: &[S]) -> Result<PivotSet> {
    let mut stages = names.iter().map(|n| model.stage_of(n.as_ref())).collect::<Result<Vec<_>>>()?;
    stages.sort_unstable();
    stages.dedup();
    let names = stages.iter().map(|&s| model.stage_name(s).to_string()).collect();
    Ok(PivotSet { names, stages })
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    version: u32,
    input_shape: Vec<usize>,
    layers: Vec<LayerSpec>,
    heads: Vec<Head>,
    weights_file: String,
}

fn weights_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".weights");
    path.with_file_name(name)
}

/// Writes `path` (JSON) and a sibling `<file>.weights` holding FBPT tensors in layer order.
pub fn save_model(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let weights = weights_path(path);
    let file = ModelFile {
        version: MODEL_FORMAT_VERSION,
        input_shape: model.input_shape.clone(),
        layers: model.layers.iter().map(|l| l.spec.clone()).collect(),
        heads: model.heads.clone(),
        weights_file: weights.file_name().expect("weights file name").to_string_lossy().into_owned(),
    };
    fs::write(path, serde_json::to_string_pretty(&file)?)?;
    let mut w = BufWriter::new(File::create(&weights)?);
    for p in model.layers.iter().filter_map(|l| l.params.as_ref()) {
        p.weight.write_to(&mut w)?;
        p.bias.write_to(&mut w)?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<Model> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    let file: ModelFile = serde_json::from_str(&text).map_err(|e| Error::Corrupt(format!("{}: {e}", path.display())))?;
    if file.version != MODEL_FORMAT_VERSION {
        return Err(Error::Version { found: file.version, expected: MODEL_FORMAT_VERSION });
    }
    let arch = Architecture { input_shape: file.input_shape, layers: file.layers, heads: file.heads };
    let mut layers = resolve_layers(&arch)?;
    let weights = path.with_file_name(&file.weights_file);
    let mut r = BufReader::new(File::open(&weights)?);
    for layer in &mut layers {
        if let Some((wshape, bshape, _, _)) = layer.spec.kind.param_shapes(&layer.input_shape) {
            let mut next = |expected: &[usize], what: &str| -> Result<Tensor> {
                let t = Tensor::read_from(&mut r)?
                    .ok_or_else(|| Error::Corrupt(format!("missing {what} for layer `{}`", layer.spec.name)))?;
                if t.shape() != expected {
                    return shape_err(format!(
                        "{what} of layer `{}` has shape {:?}, expected {expected:?}",
                        layer.spec.name,
                        t.shape()
                    ));
                }
                Ok(t)
            };
            let weight = next(&wshape, "weight")?;
            let bias = next(&bshape, "bias")?;
            layer.params = Some(Params { weight, bias });
        }
    }
    if Tensor::read_from(&mut r)?.is_some() {
        return Err(Error::Corrupt("trailing tensors in weights file".into()));
    }
    assemble(&arch, layers)
}

/// The desk-scale reference network: two conv/relu/pool blocks, a hidden dense
/// layer and a sigmoid head layer with `outputs` units.
pub fn reference_architecture(input_shape: Vec<usize>, outputs: usize, heads: Vec<Head>) -> Architecture {
    let units = outputs;
    Architecture {
        input_shape,
        layers: vec![
            LayerSpec::new("conv1", LayerKind::Conv2d { out_channels: 8, kernel: 3, stride: 1, pad: 1 }),
            LayerSpec::new("relu1", LayerKind::Relu),
            LayerSpec::new("pool1", LayerKind::Maxpool { size: 2 }),
            LayerSpec::new("conv2", LayerKind::Conv2d { out_channels: 16, kernel: 3, stride: 1, pad: 1 }),
            LayerSpec::new("relu2", LayerKind::Relu),
            LayerSpec::new("pool2", LayerKind::Maxpool { size: 2 }),
            LayerSpec::new("flatten", LayerKind::Flatten),
            LayerSpec::new("fc", LayerKind::Dense { units: 64 }),
            LayerSpec::new("fc_relu", LayerKind::Relu),
            LayerSpec::new("head", LayerKind::SigmoidHead { units }),
        ],
        heads,
    }
}
