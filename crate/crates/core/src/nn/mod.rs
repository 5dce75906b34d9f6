//! Network description, validation, and parameter initialization.
//!
//! Layers are the minimum the benchmark architectures need: valid (unpadded)
//! convolution, non-overlapping max pooling, dense, relu, flatten. Forward
//! and reverse passes live in [`forward`] and [`backward`]; both are pure
//! functions of `(params, input)` so they can run concurrently on shared
//! read-only parameters.

mod backward;
mod forward;
mod gemm;
mod params;

pub use backward::{backward_full, backward_input_only};
pub use forward::{activation_margin, forward, forward_trace, ForwardTrace};
pub use params::ParamVector;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{self, LossKind};
use crate::rng::SplitMix64;
use crate::tensor::{Elem, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerSpec {
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
    },
    MaxPool2d {
        kernel: usize,
    },
    Dense {
        input: usize,
        output: usize,
    },
    Relu,
    Flatten,
}

/// Activation shape between layers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ActShape {
    Chw(usize, usize, usize),
    Flat(usize),
}

impl ActShape {
    pub fn volume(&self) -> usize {
        match *self {
            ActShape::Chw(c, h, w) => c * h * w,
            ActShape::Flat(n) => n,
        }
    }
}

/// Declarative layer list plus input geometry and class count.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkSpec {
    /// Input shape as (channels, height, width).
    pub input: (usize, usize, usize),
    /// Number of output classes.
    pub classes: usize,
    pub layers: Vec<LayerSpec>,
}

/// Valid-convolution / valid-pool output size: floor((in - k) / s) + 1.
fn slide_out(input: usize, kernel: usize, stride: usize) -> Option<usize> {
    if kernel == 0 || stride == 0 || input < kernel {
        None
    } else {
        Some((input - kernel) / stride + 1)
    }
}

impl NetworkSpec {
    /// 28x28 grayscale benchmark architecture:
    /// Conv(10, k4, s1) - MaxPool(2) - Conv(20, k4, s1) - MaxPool(2) - FC(80) - FC(10).
    pub fn mnist() -> Self {
        NetworkSpec {
            input: (1, 28, 28),
            classes: 10,
            layers: vec![
                LayerSpec::Conv2d {
                    in_channels: 1,
                    out_channels: 10,
                    kernel: 4,
                    stride: 1,
                },
                LayerSpec::Relu,
                LayerSpec::MaxPool2d { kernel: 2 },
                LayerSpec::Conv2d {
                    in_channels: 10,
                    out_channels: 20,
                    kernel: 4,
                    stride: 1,
                },
                LayerSpec::Relu,
                LayerSpec::MaxPool2d { kernel: 2 },
                LayerSpec::Flatten,
                LayerSpec::Dense {
                    input: 320,
                    output: 80,
                },
                LayerSpec::Relu,
                LayerSpec::Dense {
                    input: 80,
                    output: 10,
                },
            ],
        }
    }

    /// 32x32 RGB benchmark architecture:
    /// Conv(16, k5) - MaxPool(2) - Conv(32, k5) - MaxPool(2) - FC(200) - FC(50) - FC(10).
    pub fn cifar10() -> Self {
        NetworkSpec {
            input: (3, 32, 32),
            classes: 10,
            layers: vec![
                LayerSpec::Conv2d {
                    in_channels: 3,
                    out_channels: 16,
                    kernel: 5,
                    stride: 1,
                },
                LayerSpec::Relu,
                LayerSpec::MaxPool2d { kernel: 2 },
                LayerSpec::Conv2d {
                    in_channels: 16,
                    out_channels: 32,
                    kernel: 5,
                    stride: 1,
                },
                LayerSpec::Relu,
                LayerSpec::MaxPool2d { kernel: 2 },
                LayerSpec::Flatten,
                LayerSpec::Dense {
                    input: 800,
                    output: 200,
                },
                LayerSpec::Relu,
                LayerSpec::Dense {
                    input: 200,
                    output: 50,
                },
                LayerSpec::Relu,
                LayerSpec::Dense {
                    input: 50,
                    output: 10,
                },
            ],
        }
    }

    /// Same stack pattern as [`NetworkSpec::mnist`] shrunk to a 12x12 input,
    /// small enough for finite-difference gradient checks.
    pub fn mnist_reduced() -> Self {
        NetworkSpec {
            input: (1, 12, 12),
            classes: 10,
            layers: vec![
                LayerSpec::Conv2d {
                    in_channels: 1,
                    out_channels: 10,
                    kernel: 4,
                    stride: 1,
                },
                LayerSpec::Relu,
                LayerSpec::MaxPool2d { kernel: 2 },
                LayerSpec::Conv2d {
                    in_channels: 10,
                    out_channels: 20,
                    kernel: 2,
                    stride: 1,
                },
                LayerSpec::Relu,
                LayerSpec::MaxPool2d { kernel: 2 },
                LayerSpec::Flatten,
                LayerSpec::Dense {
                    input: 20,
                    output: 80,
                },
                LayerSpec::Relu,
                LayerSpec::Dense {
                    input: 80,
                    output: 10,
                },
            ],
        }
    }

    /// Same stack pattern as [`NetworkSpec::cifar10`] shrunk to an 8x8 input.
    pub fn cifar10_reduced() -> Self {
        NetworkSpec {
            input: (3, 8, 8),
            classes: 10,
            layers: vec![
                LayerSpec::Conv2d {
                    in_channels: 3,
                    out_channels: 16,
                    kernel: 3,
                    stride: 1,
                },
                LayerSpec::Relu,
                LayerSpec::MaxPool2d { kernel: 2 },
                LayerSpec::Conv2d {
                    in_channels: 16,
                    out_channels: 32,
                    kernel: 2,
                    stride: 1,
                },
                LayerSpec::Relu,
                LayerSpec::MaxPool2d { kernel: 2 },
                LayerSpec::Flatten,
                LayerSpec::Dense {
                    input: 32,
                    output: 32,
                },
                LayerSpec::Relu,
                LayerSpec::Dense {
                    input: 32,
                    output: 16,
                },
                LayerSpec::Relu,
                LayerSpec::Dense {
                    input: 16,
                    output: 10,
                },
            ],
        }
    }

    /// Two-layer MLP over a flat input, for synthetic tasks and oracles.
    pub fn mlp(input_dim: usize, hidden: usize, classes: usize) -> Self {
        NetworkSpec {
            input: (1, 1, input_dim),
            classes,
            layers: vec![
                LayerSpec::Flatten,
                LayerSpec::Dense {
                    input: input_dim,
                    output: hidden,
                },
                LayerSpec::Relu,
                LayerSpec::Dense {
                    input: hidden,
                    output: classes,
                },
            ],
        }
    }

    /// Per-boundary activation shapes; index 0 is the input, index i+1 the
    /// output of layer i. Errors with the offending layer index if shapes do
    /// not compose or the final layer does not yield `classes` logits.
    pub fn shapes(&self) -> Result<Vec<ActShape>> {
        let (c, h, w) = self.input;
        if c == 0 || h == 0 || w == 0 || self.classes == 0 {
            return Err(Error::ShapeMismatch {
                layer: 0,
                detail: format!("degenerate input {:?} / classes {}", self.input, self.classes),
            });
        }
        let mut shapes = vec![ActShape::Chw(c, h, w)];
        for (i, layer) in self.layers.iter().enumerate() {
            let cur = *shapes.last().unwrap();
            let next = match (*layer, cur) {
                (
                    LayerSpec::Conv2d {
                        in_channels,
                        out_channels,
                        kernel,
                        stride,
                    },
                    ActShape::Chw(c, h, w),
                ) => {
                    if in_channels != c {
                        return Err(Error::ShapeMismatch {
                            layer: i,
                            detail: format!("conv expects {in_channels} channels, input has {c}"),
                        });
                    }
                    let oh = slide_out(h, kernel, stride);
                    let ow = slide_out(w, kernel, stride);
                    match (oh, ow) {
                        (Some(oh), Some(ow)) if out_channels > 0 => {
                            ActShape::Chw(out_channels, oh, ow)
                        }
                        _ => {
                            return Err(Error::ShapeMismatch {
                                layer: i,
                                detail: format!(
                                    "conv kernel {kernel} stride {stride} does not fit {h}x{w}"
                                ),
                            })
                        }
                    }
                }
                (LayerSpec::MaxPool2d { kernel }, ActShape::Chw(c, h, w)) => {
                    match (slide_out(h, kernel, kernel), slide_out(w, kernel, kernel)) {
                        (Some(oh), Some(ow)) => ActShape::Chw(c, oh, ow),
                        _ => {
                            return Err(Error::ShapeMismatch {
                                layer: i,
                                detail: format!("pool kernel {kernel} does not fit {h}x{w}"),
                            })
                        }
                    }
                }
                (LayerSpec::Dense { input, output }, ActShape::Flat(n)) => {
                    if input != n || output == 0 {
                        return Err(Error::ShapeMismatch {
                            layer: i,
                            detail: format!("dense expects {input} inputs, got {n}"),
                        });
                    }
                    ActShape::Flat(output)
                }
                (LayerSpec::Relu, s) => s,
                (LayerSpec::Flatten, ActShape::Chw(c, h, w)) => ActShape::Flat(c * h * w),
                (LayerSpec::Flatten, ActShape::Flat(n)) => ActShape::Flat(n),
                (l, s) => {
                    return Err(Error::ShapeMismatch {
                        layer: i,
                        detail: format!("layer {l:?} cannot follow activation shape {s:?}"),
                    })
                }
            };
            shapes.push(next);
        }
        if *shapes.last().unwrap() != ActShape::Flat(self.classes) {
            return Err(Error::ShapeMismatch {
                layer: self.layers.len().saturating_sub(1),
                detail: format!(
                    "network ends in {:?}, expected {} logits",
                    shapes.last().unwrap(),
                    self.classes
                ),
            });
        }
        Ok(shapes)
    }

    /// Stable content hash of the spec, embedded in checkpoint headers.
    pub fn content_hash(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut feed = |x: u64| {
            for b in x.to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01B3);
            }
        };
        feed(self.input.0 as u64);
        feed(self.input.1 as u64);
        feed(self.input.2 as u64);
        feed(self.classes as u64);
        for layer in &self.layers {
            match *layer {
                LayerSpec::Conv2d {
                    in_channels,
                    out_channels,
                    kernel,
                    stride,
                } => {
                    feed(1);
                    feed(in_channels as u64);
                    feed(out_channels as u64);
                    feed(kernel as u64);
                    feed(stride as u64);
                }
                LayerSpec::MaxPool2d { kernel } => {
                    feed(2);
                    feed(kernel as u64);
                }
                LayerSpec::Dense { input, output } => {
                    feed(3);
                    feed(input as u64);
                    feed(output as u64);
                }
                LayerSpec::Relu => feed(4),
                LayerSpec::Flatten => feed(5),
            }
        }
        h
    }
}

/// Weight/bias extent of one layer inside the flat parameter vector.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ParamSlot {
    pub offset: usize,
    pub weights: usize,
    pub biases: usize,
}

impl ParamSlot {
    pub fn weight_range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.weights
    }

    pub fn bias_range(&self) -> std::ops::Range<usize> {
        self.offset + self.weights..self.offset + self.weights + self.biases
    }
}

/// A validated spec with precomputed shapes and parameter layout.
#[derive(Clone, Debug)]
pub struct Network {
    spec: NetworkSpec,
    shapes: Vec<ActShape>,
    slots: Vec<ParamSlot>,
    param_count: usize,
}

impl Network {
    pub fn new(spec: NetworkSpec) -> Result<Self> {
        let shapes = spec.shapes()?;
        let mut slots = Vec::with_capacity(spec.layers.len());
        let mut offset = 0;
        for layer in &spec.layers {
            let (weights, biases) = match *layer {
                LayerSpec::Conv2d {
                    in_channels,
                    out_channels,
                    kernel,
                    ..
                } => (out_channels * in_channels * kernel * kernel, out_channels),
                LayerSpec::Dense { input, output } => (input * output, output),
                _ => (0, 0),
            };
            slots.push(ParamSlot {
                offset,
                weights,
                biases,
            });
            offset += weights + biases;
        }
        Ok(Network {
            spec,
            shapes,
            slots,
            param_count: offset,
        })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn param_count(&self) -> usize {
        self.param_count
    }

    pub fn classes(&self) -> usize {
        self.spec.classes
    }

    pub fn spec_hash(&self) -> u64 {
        self.spec.content_hash()
    }

    pub(crate) fn shapes(&self) -> &[ActShape] {
        &self.shapes
    }

    pub(crate) fn slots(&self) -> &[ParamSlot] {
        &self.slots
    }

    /// Batch shape expected by forward: [B, C, H, W].
    pub fn check_batch(&self, batch: &Tensor) -> Result<()> {
        let (c, h, w) = self.spec.input;
        let ok = batch.shape().len() == 4
            && batch.shape()[1] == c
            && batch.shape()[2] == h
            && batch.shape()[3] == w
            && batch.batch() > 0;
        if !ok {
            return Err(Error::ShapeMismatch {
                layer: 0,
                detail: format!(
                    "batch shape {:?} does not match input ({c}, {h}, {w})",
                    batch.shape()
                ),
            });
        }
        Ok(())
    }

    pub fn check_params(&self, params: &ParamVector) -> Result<()> {
        if params.len() != self.param_count {
            return Err(Error::ShapeMismatch {
                layer: 0,
                detail: format!(
                    "parameter vector length {} does not match network ({})",
                    params.len(),
                    self.param_count
                ),
            });
        }
        Ok(())
    }

    /// Gradient of the scalar loss with respect to every parameter, canonical
    /// order. Cross-entropy is averaged over the batch; KL is summed.
    pub fn grad_params(
        &self,
        params: &ParamVector,
        batch: &Tensor,
        loss: &LossKind,
    ) -> Result<ParamVector> {
        let trace = forward_trace(self, params, batch)?;
        let dlogits = losses::dlogits(trace.logits(), loss, true)?;
        let (grads, _) = backward_full(self, params, &trace, &dlogits)?;
        Ok(grads)
    }

    /// Per-example gradient of the loss with respect to the input pixels,
    /// unscaled by batch size so results do not depend on batching.
    pub fn grad_input(
        &self,
        params: &ParamVector,
        batch: &Tensor,
        loss: &LossKind,
    ) -> Result<Tensor> {
        let trace = forward_trace(self, params, batch)?;
        let dlogits = losses::dlogits(trace.logits(), loss, false)?;
        backward_input_only(self, params, &trace, &dlogits)
    }

    /// Sum over the batch of the log-likelihood gradient, i.e. the negated
    /// gradient of the summed cross-entropy. This is the likelihood term of
    /// the posterior-sampling update.
    pub fn batch_loglik_grad(
        &self,
        params: &ParamVector,
        batch: &Tensor,
        labels: &[usize],
    ) -> Result<ParamVector> {
        let trace = forward_trace(self, params, batch)?;
        let probs = losses::softmax(trace.logits())?;
        let mut dlogits = probs;
        losses::subtract_one_hot(&mut dlogits, labels)?;
        // d(sum CE)/dz = probs - onehot; log-lik gradient is its negation.
        for v in dlogits.data_mut() {
            *v = -*v;
        }
        let (grads, _) = backward_full(self, params, &trace, &dlogits)?;
        Ok(grads)
    }
}

/// Validate `spec` and draw initial parameters: per-layer uniform in
/// +-sqrt(6 / (fan_in + fan_out)), biases zero, each layer's draw keyed by
/// `(init_seed, layer index)` so layouts are stable under spec edits.
pub fn build_network(spec: NetworkSpec, init_seed: u64) -> Result<(Network, ParamVector)> {
    let network = Network::new(spec)?;
    let mut params = ParamVector::zeros(network.param_count());
    for (i, layer) in network.spec.layers.iter().enumerate() {
        let slot = network.slots[i];
        if slot.weights == 0 {
            continue;
        }
        let (fan_in, fan_out) = match *layer {
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                ..
            } => (in_channels * kernel * kernel, out_channels * kernel * kernel),
            LayerSpec::Dense { input, output } => (input, output),
            _ => unreachable!(),
        };
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let mut rng = SplitMix64::derive_indexed(init_seed, "init", i as u64);
        for v in &mut params.as_mut_slice()[slot.weight_range()] {
            *v = rng.uniform(-bound, bound) as Elem;
        }
        // biases stay zero
    }
    Ok((network, params))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mnist_preset_shapes() {
        let spec = NetworkSpec::mnist();
        let shapes = spec.shapes().unwrap();
        assert_eq!(shapes[0], ActShape::Chw(1, 28, 28));
        assert_eq!(shapes[1], ActShape::Chw(10, 25, 25));
        assert_eq!(shapes[3], ActShape::Chw(10, 12, 12));
        assert_eq!(shapes[4], ActShape::Chw(20, 9, 9));
        assert_eq!(shapes[6], ActShape::Chw(20, 4, 4));
        assert_eq!(shapes[7], ActShape::Flat(320));
        assert_eq!(*shapes.last().unwrap(), ActShape::Flat(10));
    }

    #[test]
    fn cifar10_preset_shapes() {
        let spec = NetworkSpec::cifar10();
        let shapes = spec.shapes().unwrap();
        assert_eq!(shapes[1], ActShape::Chw(16, 28, 28));
        assert_eq!(shapes[3], ActShape::Chw(16, 14, 14));
        assert_eq!(shapes[4], ActShape::Chw(32, 10, 10));
        assert_eq!(shapes[6], ActShape::Chw(32, 5, 5));
        assert_eq!(shapes[7], ActShape::Flat(800));
        assert_eq!(*shapes.last().unwrap(), ActShape::Flat(10));
    }

    #[test]
    fn dense_param_count() {
        // Dense(2,2): 4 weights + 2 biases.
        let spec = NetworkSpec {
            input: (1, 1, 2),
            classes: 2,
            layers: vec![
                LayerSpec::Flatten,
                LayerSpec::Dense {
                    input: 2,
                    output: 2,
                },
            ],
        };
        let (net, params) = build_network(spec, 123).unwrap();
        assert_eq!(net.param_count(), 6);
        assert_eq!(params.len(), 6);
    }

    #[test]
    fn composition_failure_reports_layer() {
        let spec = NetworkSpec {
            input: (1, 8, 8),
            classes: 10,
            layers: vec![
                LayerSpec::Conv2d {
                    in_channels: 1,
                    out_channels: 4,
                    kernel: 4,
                    stride: 1,
                },
                LayerSpec::MaxPool2d { kernel: 2 },
                // 2x2 remains; a 4-wide kernel cannot fit.
                LayerSpec::Conv2d {
                    in_channels: 4,
                    out_channels: 8,
                    kernel: 4,
                    stride: 1,
                },
            ],
        };
        match spec.shapes() {
            Err(Error::ShapeMismatch { layer, .. }) => assert_eq!(layer, 2),
            other => panic!("expected shape mismatch, got {other:?}"),
        }
    }

    #[test]
    fn init_is_seeded_and_layer_keyed() {
        let (_, a) = build_network(NetworkSpec::mnist(), 7).unwrap();
        let (_, b) = build_network(NetworkSpec::mnist(), 7).unwrap();
        let (_, c) = build_network(NetworkSpec::mnist(), 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn mnist_param_count() {
        let (net, _) = build_network(NetworkSpec::mnist(), 0).unwrap();
        // conv1 10*1*16+10, conv2 20*10*16+20, fc 320*80+80, fc 80*10+10
        assert_eq!(net.param_count(), 170 + 3220 + 25680 + 810);
    }

    #[test]
    fn spec_hash_distinguishes_variants() {
        let a = NetworkSpec::mnist().content_hash();
        let b = NetworkSpec::cifar10().content_hash();
        let mut spec = NetworkSpec::mnist();
        spec.layers.pop();
        assert_ne!(a, b);
        assert_ne!(a, spec.content_hash());
    }
}
