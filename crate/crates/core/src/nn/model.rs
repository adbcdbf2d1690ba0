//! The shared-trunk, two-head classifier.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::nn::layers::{maxpool_backward, maxpool_forward, relu_backward, relu_forward, ConvLayer, DenseLayer};
use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor};

/// Declarative description of one trunk layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerSpec {
    Conv {
        filters: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    Relu,
    MaxPool {
        window: usize,
        stride: usize,
    },
    Flatten,
    Dense {
        outputs: usize,
    },
}

/// Knobs for the standard conv/pool stack feeding two classifier heads.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ArchConfig {
    pub input_h: usize,
    pub input_w: usize,
    /// One `conv(3x3, pad 1) → ReLU → maxpool(2,2)` block per entry.
    pub conv_filters: Vec<usize>,
    pub kernel: usize,
    pub hidden: usize,
    pub base_classes: usize,
    pub exp_classes: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            input_h: 64,
            input_w: 64,
            conv_filters: vec![32, 64],
            kernel: 3,
            hidden: 128,
            base_classes: 8,
            exp_classes: 10,
        }
    }
}

impl ArchConfig {
    /// The default layout scaled down to a 16×16 input and a few thousand parameters.
    pub fn tiny() -> Self {
        ArchConfig {
            input_h: 16,
            input_w: 16,
            conv_filters: vec![4, 8],
            hidden: 16,
            ..Self::default()
        }
    }

    pub fn trunk(&self) -> Vec<LayerSpec> {
        let mut specs = Vec::new();
        for &filters in &self.conv_filters {
            specs.push(LayerSpec::Conv {
                filters,
                kernel: self.kernel,
                stride: 1,
                padding: self.kernel / 2,
            });
            specs.push(LayerSpec::Relu);
            specs.push(LayerSpec::MaxPool { window: 2, stride: 2 });
        }
        specs.push(LayerSpec::Flatten);
        specs.push(LayerSpec::Dense { outputs: self.hidden });
        specs.push(LayerSpec::Relu);
        specs
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Layer<T: Scalar = f32> {
    Conv(ConvLayer<T>),
    Relu,
    MaxPool { window: usize, stride: usize },
    Flatten,
    Dense(DenseLayer<T>),
}

impl<T: Scalar> Layer<T> {
    fn kind(&self) -> &'static str {
        match self {
            Layer::Conv(_) => "conv",
            Layer::Relu => "relu",
            Layer::MaxPool { .. } => "maxpool",
            Layer::Flatten => "flatten",
            Layer::Dense(_) => "dense",
        }
    }

    fn spec(&self) -> LayerSpec {
        match self {
            Layer::Conv(c) => LayerSpec::Conv {
                filters: c.filters(),
                kernel: c.weights.shape()[2],
                stride: c.stride,
                padding: c.padding,
            },
            Layer::Relu => LayerSpec::Relu,
            Layer::MaxPool { window, stride } => LayerSpec::MaxPool {
                window: *window,
                stride: *stride,
            },
            Layer::Flatten => LayerSpec::Flatten,
            Layer::Dense(d) => LayerSpec::Dense { outputs: d.outputs() },
        }
    }
}

/// Per-layer state recorded by the forward pass for reverse-mode use.
#[derive(Clone, Debug)]
enum Cache<T: Scalar> {
    Input(Tensor<T>),
    Pool { input_shape: Vec<usize>, argmax: Vec<usize> },
    Flatten { input_shape: Vec<usize> },
}

/// Everything `backward` needs from a forward call.
#[derive(Clone, Debug)]
pub struct ForwardTrace<T: Scalar = f32> {
    batch: usize,
    single: bool,
    caches: Vec<Cache<T>>,
    features: Tensor<T>,
}

/// ReLU on/off states and pooling winners; fixed pattern ⇒ the network is
/// smooth in its parameters.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ActivationPattern {
    relu: Vec<bool>,
    pool: Vec<usize>,
}

impl<T: Scalar> ForwardTrace<T> {
    pub fn batch_size(&self) -> usize {
        self.batch
    }

    /// Output of the trunk, input to both heads.
    pub fn features(&self) -> &Tensor<T> {
        &self.features
    }

    pub fn activation_pattern(&self, model: &MultiOutputModel<T>) -> ActivationPattern {
        let mut relu = Vec::new();
        let mut pool = Vec::new();
        for (layer, cache) in model.trunk.iter().zip(&self.caches) {
            match (layer, cache) {
                (Layer::Relu, Cache::Input(x)) => relu.extend(x.data().iter().map(|&v| v > T::zero())),
                (_, Cache::Pool { argmax, .. }) => pool.extend_from_slice(argmax),
                _ => {}
            }
        }
        ActivationPattern { relu, pool }
    }
}

/// Logits for a batch plus the trace for the backward pass.
#[derive(Clone, Debug)]
pub struct BatchForward<T: Scalar = f32> {
    /// `[B, N_base]`
    pub base_logits: Tensor<T>,
    /// `[B, N_exp]`
    pub exp_logits: Tensor<T>,
    pub trace: ForwardTrace<T>,
}

/// One gradient tensor per model parameter, in [`MultiOutputModel::params`] order.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients<T: Scalar = f32> {
    pub tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn zeros_like(model: &MultiOutputModel<T>) -> Self {
        Gradients {
            tensors: model
                .params()
                .iter()
                .map(|p| Tensor::zeros(p.shape()).expect("parameter shapes are valid"))
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Gradients<T>) -> Result<()> {
        if self.tensors.len() != other.tensors.len() {
            return Err(Error::shape("gradients", "tree length mismatch"));
        }
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            a.add_assign(b)?;
        }
        Ok(())
    }

    pub fn scale(&mut self, factor: T) {
        self.tensors.iter_mut().for_each(|t| t.scale(factor));
    }

    pub fn max_abs(&self) -> T {
        self.tensors
            .iter()
            .flat_map(|t| t.data().iter())
            .fold(T::zero(), |m, &v| m.max(v.abs()))
    }
}

/// Shared convolutional trunk feeding a base head and an exponent head.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiOutputModel<T: Scalar = f32> {
    input_shape: [usize; 3],
    trunk: Vec<Layer<T>>,
    base_head: DenseLayer<T>,
    exp_head: DenseLayer<T>,
}

fn layer_error(index: usize, kind: &str, err: Error) -> Error {
    match err {
        Error::ShapeMismatch { context, detail } => Error::ShapeMismatch {
            context: format!("trunk layer {index} ({kind})"),
            detail: format!("{context}: {detail}"),
        },
        other => other,
    }
}

impl<T: Scalar> MultiOutputModel<T> {
    /// Builds the layer stack, validating every shape transition. Parameters
    /// are drawn from `rng` in definition order, or zero when `rng` is `None`.
    pub fn build(
        input_shape: [usize; 3],
        trunk: &[LayerSpec],
        base_classes: usize,
        exp_classes: usize,
        mut rng: Option<&mut Rng>,
    ) -> Result<Self> {
        if input_shape.contains(&0) || base_classes == 0 || exp_classes == 0 {
            return Err(Error::InvalidArgument(format!(
                "input {input_shape:?}, heads {base_classes}/{exp_classes}"
            )));
        }
        let mut shape = input_shape.to_vec();
        let mut layers = Vec::with_capacity(trunk.len());
        for (i, spec) in trunk.iter().enumerate() {
            let (layer, next) = match *spec {
                LayerSpec::Conv {
                    filters,
                    kernel,
                    stride,
                    padding,
                } => {
                    if shape.len() != 3 || filters == 0 {
                        return Err(layer_error(i, "conv", Error::shape("conv", format!("input {shape:?}"))));
                    }
                    let conv = match rng.as_deref_mut() {
                        Some(r) => ConvLayer::init(filters, shape[0], kernel, stride, padding, r),
                        None => ConvLayer::zeros(filters, shape[0], kernel, stride, padding),
                    }
                    .map_err(|e| layer_error(i, "conv", e))?;
                    let g = crate::conv::conv_geometry(&shape, &conv.weights, &conv.bias, stride, padding)
                        .map_err(|e| layer_error(i, "conv", e))?;
                    (Layer::Conv(conv), vec![filters, g.out_h, g.out_w])
                }
                LayerSpec::Relu => (Layer::Relu, shape.clone()),
                LayerSpec::MaxPool { window, stride } => {
                    let n = shape.len();
                    if n < 2 || window == 0 || stride == 0 || shape[n - 2] < window || shape[n - 1] < window {
                        return Err(layer_error(
                            i,
                            "maxpool",
                            Error::shape("maxpool", format!("window {window} on {shape:?}")),
                        ));
                    }
                    let mut next = shape.clone();
                    next[n - 2] = (shape[n - 2] - window) / stride + 1;
                    next[n - 1] = (shape[n - 1] - window) / stride + 1;
                    (Layer::MaxPool { window, stride }, next)
                }
                LayerSpec::Flatten => (Layer::Flatten, vec![shape.iter().product()]),
                LayerSpec::Dense { outputs } => {
                    if shape.len() != 1 || outputs == 0 {
                        return Err(layer_error(i, "dense", Error::shape("dense", format!("input {shape:?}"))));
                    }
                    let dense = match rng.as_deref_mut() {
                        Some(r) => DenseLayer::init(shape[0], outputs, r)?,
                        None => DenseLayer::zeros(shape[0], outputs)?,
                    };
                    (Layer::Dense(dense), vec![outputs])
                }
            };
            layers.push(layer);
            shape = next;
        }
        if shape.len() != 1 {
            return Err(Error::shape("heads", format!("trunk output {shape:?} is not flat")));
        }
        let width = shape[0];
        let (base_head, exp_head) = match rng {
            Some(r) => (
                DenseLayer::init(width, base_classes, r)?,
                DenseLayer::init(width, exp_classes, r)?,
            ),
            None => (
                DenseLayer::zeros(width, base_classes)?,
                DenseLayer::zeros(width, exp_classes)?,
            ),
        };
        Ok(MultiOutputModel {
            input_shape,
            trunk: layers,
            base_head,
            exp_head,
        })
    }

    /// Seeded fan-in uniform initialisation of `arch`.
    pub fn new(arch: &ArchConfig, seed: u64) -> Result<Self> {
        let mut rng = Rng::new(seed);
        Self::build(
            [1, arch.input_h, arch.input_w],
            &arch.trunk(),
            arch.base_classes,
            arch.exp_classes,
            Some(&mut rng),
        )
    }

    pub fn zeros(arch: &ArchConfig) -> Result<Self> {
        Self::build(
            [1, arch.input_h, arch.input_w],
            &arch.trunk(),
            arch.base_classes,
            arch.exp_classes,
            None,
        )
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.input_shape
    }

    pub fn base_classes(&self) -> usize {
        self.base_head.outputs()
    }

    pub fn exp_classes(&self) -> usize {
        self.exp_head.outputs()
    }

    pub fn trunk(&self) -> &[Layer<T>] {
        &self.trunk
    }

    pub fn base_head(&self) -> &DenseLayer<T> {
        &self.base_head
    }

    pub fn exp_head(&self) -> &DenseLayer<T> {
        &self.exp_head
    }

    pub fn layer_specs(&self) -> Vec<LayerSpec> {
        self.trunk.iter().map(Layer::spec).collect()
    }

    /// Activation shape after each trunk layer, starting with the input.
    pub fn shape_chain(&self) -> Vec<Vec<usize>> {
        let mut shapes = vec![self.input_shape.to_vec()];
        let mut cur = self.input_shape.to_vec();
        for layer in &self.trunk {
            cur = match layer {
                Layer::Conv(c) => {
                    let g = crate::conv::conv_geometry(&cur, &c.weights, &c.bias, c.stride, c.padding)
                        .expect("validated at build");
                    vec![c.filters(), g.out_h, g.out_w]
                }
                Layer::Relu => cur,
                Layer::MaxPool { window, stride } => {
                    let n = cur.len();
                    let mut next = cur.clone();
                    next[n - 2] = (cur[n - 2] - window) / stride + 1;
                    next[n - 1] = (cur[n - 1] - window) / stride + 1;
                    next
                }
                Layer::Flatten => vec![cur.iter().product()],
                Layer::Dense(d) => vec![d.outputs()],
            };
            shapes.push(cur.clone());
        }
        shapes
    }

    /// Text form of the architecture, sufficient to rebuild the model.
    pub fn descriptor(&self) -> String {
        let [c, h, w] = self.input_shape;
        let mut s = format!("input {c} {h} {w}\n");
        for spec in self.layer_specs() {
            let _ = match spec {
                LayerSpec::Conv {
                    filters,
                    kernel,
                    stride,
                    padding,
                } => writeln!(s, "conv {filters} {kernel} {stride} {padding}"),
                LayerSpec::Relu => writeln!(s, "relu"),
                LayerSpec::MaxPool { window, stride } => writeln!(s, "maxpool {window} {stride}"),
                LayerSpec::Flatten => writeln!(s, "flatten"),
                LayerSpec::Dense { outputs } => writeln!(s, "dense {outputs}"),
            };
        }
        let _ = writeln!(s, "head base {}", self.base_classes());
        let _ = writeln!(s, "head exponent {}", self.exp_classes());
        s
    }

    /// Zero-initialised model from [`descriptor`](Self::descriptor) text.
    pub fn from_descriptor(text: &str) -> Result<Self> {
        let bad = |line: &str| Error::Malformed(format!("architecture line {line:?}"));
        let mut input = None;
        let mut specs = Vec::new();
        let (mut base, mut exp) = (None, None);
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            let mut words = line.split_whitespace();
            let kind = words.next().ok_or_else(|| bad(line))?;
            let rest: Vec<&str> = words.collect();
            let nums = || -> Result<Vec<usize>> {
                rest.iter().map(|w| w.parse::<usize>().map_err(|_| bad(line))).collect()
            };
            match (kind, rest.len()) {
                ("input", 3) => {
                    let n = nums()?;
                    input = Some([n[0], n[1], n[2]]);
                }
                ("conv", 4) => {
                    let n = nums()?;
                    specs.push(LayerSpec::Conv {
                        filters: n[0],
                        kernel: n[1],
                        stride: n[2],
                        padding: n[3],
                    });
                }
                ("relu", 0) => specs.push(LayerSpec::Relu),
                ("maxpool", 2) => {
                    let n = nums()?;
                    specs.push(LayerSpec::MaxPool {
                        window: n[0],
                        stride: n[1],
                    });
                }
                ("flatten", 0) => specs.push(LayerSpec::Flatten),
                ("dense", 1) => specs.push(LayerSpec::Dense { outputs: nums()?[0] }),
                ("head", 2) => {
                    let n: usize = rest[1].parse().map_err(|_| bad(line))?;
                    match rest[0] {
                        "base" => base = Some(n),
                        "exponent" => exp = Some(n),
                        _ => return Err(bad(line)),
                    }
                }
                _ => return Err(bad(line)),
            }
        }
        match (input, base, exp) {
            (Some(input), Some(base), Some(exp)) => Self::build(input, &specs, base, exp, None),
            _ => Err(Error::Malformed("architecture lacks input or head lines".into())),
        }
    }

    /// Parameter tensors in definition order: trunk layers, base head, exponent head.
    pub fn params(&self) -> Vec<&Tensor<T>> {
        let mut out = Vec::new();
        for layer in &self.trunk {
            match layer {
                Layer::Conv(c) => out.extend([&c.weights, &c.bias]),
                Layer::Dense(d) => out.extend([&d.weights, &d.bias]),
                _ => {}
            }
        }
        out.extend([&self.base_head.weights, &self.base_head.bias]);
        out.extend([&self.exp_head.weights, &self.exp_head.bias]);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = Vec::new();
        for layer in &mut self.trunk {
            match layer {
                Layer::Conv(c) => out.extend([&mut c.weights, &mut c.bias]),
                Layer::Dense(d) => out.extend([&mut d.weights, &mut d.bias]),
                _ => {}
            }
        }
        out.extend([&mut self.base_head.weights, &mut self.base_head.bias]);
        out.extend([&mut self.exp_head.weights, &mut self.exp_head.bias]);
        out
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (i, layer) in self.trunk.iter().enumerate() {
            if matches!(layer, Layer::Conv(_) | Layer::Dense(_)) {
                out.push(format!("trunk.{i}.{}.weight", layer.kind()));
                out.push(format!("trunk.{i}.{}.bias", layer.kind()));
            }
        }
        out.extend(["base_head.weight", "base_head.bias", "exp_head.weight", "exp_head.bias"].map(String::from));
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    /// Same architecture and values in another precision.
    pub fn cast<U: Scalar>(&self) -> MultiOutputModel<U> {
        let trunk = self
            .trunk
            .iter()
            .map(|layer| match layer {
                Layer::Conv(c) => Layer::Conv(ConvLayer {
                    weights: c.weights.cast(),
                    bias: c.bias.cast(),
                    stride: c.stride,
                    padding: c.padding,
                }),
                Layer::Relu => Layer::Relu,
                Layer::MaxPool { window, stride } => Layer::MaxPool {
                    window: *window,
                    stride: *stride,
                },
                Layer::Flatten => Layer::Flatten,
                Layer::Dense(d) => Layer::Dense(DenseLayer {
                    weights: d.weights.cast(),
                    bias: d.bias.cast(),
                }),
            })
            .collect();
        let head = |d: &DenseLayer<T>| DenseLayer {
            weights: d.weights.cast(),
            bias: d.bias.cast(),
        };
        MultiOutputModel {
            input_shape: self.input_shape,
            trunk,
            base_head: head(&self.base_head),
            exp_head: head(&self.exp_head),
        }
    }

    /// Overwrites every parameter with the matching tensor from `values`.
    pub fn set_params(&mut self, values: &[Tensor<T>]) -> Result<()> {
        let mut params = self.params_mut();
        if params.len() != values.len() {
            return Err(Error::ArchitectureMismatch(format!(
                "{} tensors for {} parameters",
                values.len(),
                params.len()
            )));
        }
        for (i, (p, v)) in params.iter_mut().zip(values).enumerate() {
            if p.shape() != v.shape() {
                return Err(Error::ArchitectureMismatch(format!(
                    "parameter {i}: expected {:?}, found {:?}",
                    p.shape(),
                    v.shape()
                )));
            }
            **p = v.clone();
        }
        Ok(())
    }

    fn run_trunk(&self, mut x: Tensor<T>, batch: usize) -> Result<(Tensor<T>, Vec<Cache<T>>)> {
        let mut caches = Vec::with_capacity(self.trunk.len());
        for (i, layer) in self.trunk.iter().enumerate() {
            let err = |e| layer_error(i, layer.kind(), e);
            let (next, cache) = match layer {
                Layer::Conv(c) => (c.forward(&x).map_err(err)?, Cache::Input(x)),
                Layer::Relu => (relu_forward(&x), Cache::Input(x)),
                Layer::MaxPool { window, stride } => {
                    let (y, argmax) = maxpool_forward(&x, *window, *stride).map_err(err)?;
                    (
                        y,
                        Cache::Pool {
                            input_shape: x.shape().to_vec(),
                            argmax,
                        },
                    )
                }
                Layer::Flatten => {
                    let input_shape = x.shape().to_vec();
                    let width = x.len() / batch;
                    (x.reshape(&[batch, width])?, Cache::Flatten { input_shape })
                }
                Layer::Dense(d) => (d.forward(&x).map_err(err)?, Cache::Input(x)),
            };
            caches.push(cache);
            x = next;
        }
        if x.rank() != 2 || x.shape()[0] != batch {
            return Err(Error::shape("heads", format!("trunk output {:?}", x.shape())));
        }
        Ok((x, caches))
    }

    /// Batched forward pass over images shaped like [`input_shape`](Self::input_shape).
    pub fn forward_batch(&self, images: &[&Tensor<T>]) -> Result<BatchForward<T>> {
        if images.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let per = self.input_shape.iter().product::<usize>();
        let mut data = Vec::with_capacity(per * images.len());
        for (i, img) in images.iter().enumerate() {
            if img.shape() != self.input_shape {
                return Err(Error::shape(
                    "model input",
                    format!("image {i} has shape {:?}, expected {:?}", img.shape(), self.input_shape),
                ));
            }
            data.extend_from_slice(img.data());
        }
        let batch = images.len();
        let [c, h, w] = self.input_shape;
        let x = Tensor::from_vec(&[batch, c, h, w], data)?;
        let (features, caches) = self.run_trunk(x, batch)?;
        let base_logits = self.base_head.forward(&features)?;
        let exp_logits = self.exp_head.forward(&features)?;
        Ok(BatchForward {
            base_logits,
            exp_logits,
            trace: ForwardTrace {
                batch,
                single: false,
                caches,
                features,
            },
        })
    }

    /// Forward pass for one `[1, H, W]` image.
    pub fn forward(&self, image: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>, ForwardTrace<T>)> {
        let out = self.forward_batch(&[image])?;
        let mut trace = out.trace;
        trace.single = true;
        let nb = self.base_classes();
        let ne = self.exp_classes();
        Ok((out.base_logits.reshape(&[nb])?, out.exp_logits.reshape(&[ne])?, trace))
    }

    /// Argmax class of each head for one image.
    pub fn predict(&self, image: &Tensor<T>) -> Result<(usize, usize)> {
        let (b, e, _) = self.forward(image)?;
        Ok((argmax(b.data()), argmax(e.data())))
    }

    /// Reverse pass. Head gradients are computed separately, summed where the
    /// heads meet the trunk, then propagated through the trunk in reverse.
    pub fn backward(
        &self,
        trace: &ForwardTrace<T>,
        grad_base_logits: &Tensor<T>,
        grad_exp_logits: &Tensor<T>,
    ) -> Result<Gradients<T>> {
        if trace.caches.len() != self.trunk.len() {
            return Err(Error::shape("backward", "trace does not belong to this model"));
        }
        let (nb, ne, b) = (self.base_classes(), self.exp_classes(), trace.batch);
        let expect = |n: usize| if trace.single { vec![n] } else { vec![b, n] };
        if grad_base_logits.shape() != expect(nb) || grad_exp_logits.shape() != expect(ne) {
            return Err(Error::shape(
                "backward",
                format!(
                    "logit gradients {:?}/{:?} for batch {b}",
                    grad_base_logits.shape(),
                    grad_exp_logits.shape()
                ),
            ));
        }
        let gb = grad_base_logits.clone().reshape(&[b, nb])?;
        let ge = grad_exp_logits.clone().reshape(&[b, ne])?;
        let base = self.base_head.backward(&gb, &trace.features)?;
        let exp = self.exp_head.backward(&ge, &trace.features)?;
        let mut upstream = base.input;
        upstream.add_assign(&exp.input)?;

        let mut trunk_grads: Vec<[Tensor<T>; 2]> = Vec::new();
        for (i, (layer, cache)) in self.trunk.iter().zip(&trace.caches).enumerate().rev() {
            let err = |e| layer_error(i, layer.kind(), e);
            upstream = match (layer, cache) {
                (Layer::Conv(c), Cache::Input(x)) => {
                    let g = c.backward_with(&upstream, x, i > 0).map_err(err)?;
                    trunk_grads.push([g.weights, g.bias]);
                    match g.input {
                        Some(gi) => gi,
                        None => break,
                    }
                }
                (Layer::Relu, Cache::Input(x)) => relu_backward(&upstream, x).map_err(err)?,
                (Layer::MaxPool { .. }, Cache::Pool { input_shape, argmax }) => {
                    maxpool_backward(&upstream, argmax, input_shape).map_err(err)?
                }
                (Layer::Flatten, Cache::Flatten { input_shape }) => upstream.reshape(input_shape)?,
                (Layer::Dense(d), Cache::Input(x)) => {
                    let g = d.backward(&upstream, x).map_err(err)?;
                    trunk_grads.push([g.weights, g.bias]);
                    g.input
                }
                _ => return Err(Error::shape("backward", format!("trace entry {i} does not match layer"))),
            };
        }
        let mut tensors = Vec::new();
        for [w, bias] in trunk_grads.into_iter().rev() {
            tensors.push(w);
            tensors.push(bias);
        }
        tensors.extend([base.weights, base.bias, exp.weights, exp.bias]);
        Ok(Gradients { tensors })
    }
}

/// Index of the largest value; first one on ties.
pub fn argmax<T: Scalar>(values: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optim::{combined_loss, softmax_ce_grad, HeadWeights};

    fn random_image(shape: [usize; 3], seed: u64) -> Tensor<f32> {
        let mut rng = Rng::new(seed);
        let n = shape.iter().product();
        Tensor::from_vec(&shape, (0..n).map(|_| rng.uniform(0.0, 1.0) as f32).collect()).unwrap()
    }

    #[test]
    fn default_shape_chain() {
        let model = MultiOutputModel::<f32>::zeros(&ArchConfig::default()).unwrap();
        let chain = model.shape_chain();
        let expected: Vec<Vec<usize>> = vec![
            vec![1, 64, 64],
            vec![32, 64, 64],
            vec![32, 64, 64],
            vec![32, 32, 32],
            vec![64, 32, 32],
            vec![64, 32, 32],
            vec![64, 16, 16],
            vec![16384],
            vec![128],
            vec![128],
        ];
        assert_eq!(chain, expected);
        assert_eq!(model.base_classes(), 8);
        assert_eq!(model.exp_classes(), 10);
    }

    #[test]
    fn forward_shapes_and_determinism() {
        let model = MultiOutputModel::<f32>::new(&ArchConfig::default(), 7).unwrap();
        let img = random_image([1, 64, 64], 1);
        let (b1, e1, _) = model.forward(&img).unwrap();
        assert_eq!(b1.shape(), &[8]);
        assert_eq!(e1.shape(), &[10]);
        let again = MultiOutputModel::<f32>::new(&ArchConfig::default(), 7).unwrap();
        let (b2, e2, _) = again.forward(&img).unwrap();
        assert_eq!(b1.data(), b2.data());
        assert_eq!(e1.data(), e2.data());
    }

    #[test]
    fn zero_image_zero_heads_give_zero_logits() {
        let mut model = MultiOutputModel::<f32>::new(&ArchConfig::tiny(), 3).unwrap();
        let n = model.params().len();
        for p in model.params_mut().into_iter().skip(n - 4) {
            p.fill(0.0);
        }
        let img = Tensor::zeros(&[1, 16, 16]).unwrap();
        let (b, e, _) = model.forward(&img).unwrap();
        assert!(b.data().iter().chain(e.data()).all(|&v| v == 0.0));
    }

    #[test]
    fn wrong_input_names_the_problem() {
        let model = MultiOutputModel::<f32>::zeros(&ArchConfig::tiny()).unwrap();
        let err = model.forward(&Tensor::zeros(&[1, 8, 8]).unwrap()).unwrap_err();
        assert!(err.to_string().contains("model input"), "{err}");
    }

    #[test]
    fn descriptor_round_trip() {
        let model = MultiOutputModel::<f32>::new(&ArchConfig::default(), 1).unwrap();
        let rebuilt = MultiOutputModel::<f32>::from_descriptor(&model.descriptor()).unwrap();
        assert_eq!(rebuilt.descriptor(), model.descriptor());
        assert_eq!(rebuilt.param_count(), model.param_count());
        assert!(MultiOutputModel::<f32>::from_descriptor("input 1 8 8\nbogus 3\n").is_err());
    }

    #[test]
    fn zero_upstream_zero_gradients() {
        let model = MultiOutputModel::<f32>::new(&ArchConfig::tiny(), 5).unwrap();
        let (_, _, trace) = model.forward(&random_image([1, 16, 16], 2)).unwrap();
        let g = model
            .backward(&trace, &Tensor::zeros(&[8]).unwrap(), &Tensor::zeros(&[10]).unwrap())
            .unwrap();
        assert_eq!(g.tensors.len(), model.params().len());
        assert_eq!(g.max_abs(), 0.0);
    }

    #[test]
    fn trunk_gradient_is_additive_over_heads() {
        let model = MultiOutputModel::<f64>::new(&ArchConfig::tiny(), 6).unwrap();
        let img = random_image([1, 16, 16], 3).cast::<f64>();
        let (bl, el, trace) = model.forward(&img).unwrap();
        let g1 = softmax_ce_grad(&bl, 2).unwrap();
        let g2 = softmax_ce_grad(&el, 7).unwrap();
        let z1 = Tensor::zeros(&[8]).unwrap();
        let z2 = Tensor::zeros(&[10]).unwrap();
        let both = model.backward(&trace, &g1, &g2).unwrap();
        let mut sum = model.backward(&trace, &g1, &z2).unwrap();
        sum.add_assign(&model.backward(&trace, &z1, &g2).unwrap()).unwrap();
        for (a, b) in both.tensors.iter().zip(&sum.tensors) {
            assert!(a.max_abs_diff(b).unwrap() < 1e-6);
        }
        // base-only upstream leaves the exponent head untouched
        let base_only = model.backward(&trace, &g1, &z2).unwrap();
        let n = base_only.tensors.len();
        assert!(base_only.tensors[n - 2..].iter().all(|t| t.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn batch_gradient_equals_sum_of_single_gradients() {
        let model = MultiOutputModel::<f64>::new(&ArchConfig::tiny(), 9).unwrap();
        let imgs: Vec<Tensor<f64>> = (0..3).map(|s| random_image([1, 16, 16], 10 + s).cast()).collect();
        let refs: Vec<&Tensor<f64>> = imgs.iter().collect();
        let out = model.forward_batch(&refs).unwrap();
        let gb = Tensor::new(&[3, 8], 0.1).unwrap();
        let ge = Tensor::new(&[3, 10], -0.2).unwrap();
        let batched = model.backward(&out.trace, &gb, &ge).unwrap();

        let mut total = Gradients::zeros_like(&model);
        for img in &imgs {
            let (_, _, trace) = model.forward(img).unwrap();
            let g = model
                .backward(&trace, &Tensor::new(&[8], 0.1).unwrap(), &Tensor::new(&[10], -0.2).unwrap())
                .unwrap();
            total.add_assign(&g).unwrap();
        }
        for (a, b) in batched.tensors.iter().zip(&total.tensors) {
            assert!(a.max_abs_diff(b).unwrap() < 1e-10);
        }
    }

    #[test]
    fn loss_decreases_along_negative_gradient() {
        let mut model = MultiOutputModel::<f64>::new(&ArchConfig::tiny(), 12).unwrap();
        let img = random_image([1, 16, 16], 4).cast::<f64>();
        let loss = |m: &MultiOutputModel<f64>| {
            let (b, e, _) = m.forward(&img).unwrap();
            combined_loss(&b, &e, 1, 2, HeadWeights::default()).unwrap().total
        };
        let before = loss(&model);
        let (b, e, trace) = model.forward(&img).unwrap();
        let g = model
            .backward(&trace, &softmax_ce_grad(&b, 1).unwrap(), &softmax_ce_grad(&e, 2).unwrap())
            .unwrap();
        for (p, g) in model.params_mut().into_iter().zip(&g.tensors) {
            for (v, d) in p.data_mut().iter_mut().zip(g.data()) {
                *v -= 1e-3 * d;
            }
        }
        assert!(loss(&model) < before);
    }
}
