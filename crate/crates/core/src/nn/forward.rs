//! Forward pass, with or without recording the per-layer activations
//! needed by the reverse pass.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{Elem, Tensor};

use super::{ActShape, LayerSpec, Network, ParamVector};

/// Examples per parallel work unit. Fixed so that chunk boundaries, and with
/// them every floating-point reduction order, do not depend on thread count.
pub(crate) const CHUNK: usize = 8;

/// Activations recorded by [`forward_trace`]: `activations[i]` is the input
/// of layer `i`, the last entry is the logits. Max-pool layers additionally
/// record, per output element, the flat within-example index of the selected
/// input (first index in row-major order on ties).
pub struct ForwardTrace {
    pub(crate) activations: Vec<Tensor>,
    pub(crate) pool_argmax: Vec<Option<Vec<u32>>>,
}

impl ForwardTrace {
    pub fn logits(&self) -> &Tensor {
        self.activations.last().unwrap()
    }
}

/// Deterministic logits for a batch; inputs are never mutated.
pub fn forward(network: &Network, params: &ParamVector, batch: &Tensor) -> Result<Tensor> {
    network.check_batch(batch)?;
    network.check_params(params)?;
    batch.check_finite("forward input")?;
    let mut cur = batch.clone();
    for (i, layer) in network.spec().layers.iter().enumerate() {
        let (next, _) = apply_layer(network, params, i, layer, &cur)?;
        check_layer_finite(&next, i)?;
        cur = next;
    }
    Ok(cur)
}

/// Forward pass keeping every layer boundary for the reverse pass.
pub fn forward_trace(
    network: &Network,
    params: &ParamVector,
    batch: &Tensor,
) -> Result<ForwardTrace> {
    network.check_batch(batch)?;
    network.check_params(params)?;
    batch.check_finite("forward input")?;
    let mut activations = Vec::with_capacity(network.spec().layers.len() + 1);
    let mut pool_argmax = Vec::with_capacity(network.spec().layers.len());
    activations.push(batch.clone());
    for (i, layer) in network.spec().layers.iter().enumerate() {
        let (next, argmax) = apply_layer(network, params, i, layer, activations.last().unwrap())?;
        check_layer_finite(&next, i)?;
        activations.push(next);
        pool_argmax.push(argmax);
    }
    Ok(ForwardTrace {
        activations,
        pool_argmax,
    })
}

/// Distance of the forward pass from the nearest piecewise-linear kink:
/// the smallest |pre-relu activation| and the smallest max-pool winner vs.
/// runner-up gap. Finite-difference gradient checks are only trustworthy at
/// points whose margin comfortably exceeds the probe step.
pub fn activation_margin(
    network: &Network,
    params: &ParamVector,
    batch: &Tensor,
) -> Result<Elem> {
    let trace = forward_trace(network, params, batch)?;
    let mut margin = Elem::INFINITY;
    for (i, layer) in network.spec().layers.iter().enumerate() {
        match *layer {
            LayerSpec::Relu => {
                for &v in trace.activations[i].data() {
                    margin = margin.min(v.abs());
                }
            }
            LayerSpec::MaxPool2d { kernel } => {
                let input = &trace.activations[i];
                let ActShape::Chw(c, h, w) = network.shapes()[i] else {
                    unreachable!()
                };
                let (oh, ow) = ((h - kernel) / kernel + 1, (w - kernel) / kernel + 1);
                for b in 0..input.batch() {
                    let x = input.example(b);
                    for ci in 0..c {
                        let plane = &x[ci * h * w..(ci + 1) * h * w];
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let mut best = Elem::NEG_INFINITY;
                                let mut second = Elem::NEG_INFINITY;
                                for dy in 0..kernel {
                                    for dx in 0..kernel {
                                        let v = plane[(oy * kernel + dy) * w + ox * kernel + dx];
                                        if v > best {
                                            second = best;
                                            best = v;
                                        } else if v > second {
                                            second = v;
                                        }
                                    }
                                }
                                // A window tied at exactly zero is a stable
                                // relu plateau, already guarded by the relu
                                // margin; only competitive ties matter here.
                                if second.is_finite() && !(best == 0.0 && second == 0.0) {
                                    margin = margin.min(best - second);
                                }
                            }
                        }
                    }
                }
            }
            _ => {}
        }
    }
    Ok(margin)
}

fn check_layer_finite(t: &Tensor, layer: usize) -> Result<()> {
    if t.all_finite() {
        Ok(())
    } else {
        Err(Error::non_finite(format!("activation of layer {layer}")))
    }
}

fn apply_layer(
    network: &Network,
    params: &ParamVector,
    index: usize,
    layer: &LayerSpec,
    input: &Tensor,
) -> Result<(Tensor, Option<Vec<u32>>)> {
    let slot = network.slots()[index];
    let out_shape = network.shapes()[index + 1];
    let batch = input.batch();
    match *layer {
        LayerSpec::Conv2d {
            in_channels,
            out_channels,
            kernel,
            stride,
        } => {
            let ActShape::Chw(_, oh, ow) = out_shape else {
                unreachable!()
            };
            let w = &params.as_slice()[slot.weight_range()];
            let b = &params.as_slice()[slot.bias_range()];
            let out = conv_forward(
                input,
                w,
                b,
                ConvDims {
                    in_channels,
                    out_channels,
                    kernel,
                    stride,
                    oh,
                    ow,
                },
            );
            Ok((out, None))
        }
        LayerSpec::MaxPool2d { kernel } => {
            let ActShape::Chw(c, oh, ow) = out_shape else {
                unreachable!()
            };
            let (out, argmax) = pool_forward(input, kernel, c, oh, ow);
            Ok((out, Some(argmax)))
        }
        LayerSpec::Dense { input: nin, output } => {
            let w = &params.as_slice()[slot.weight_range()];
            let b = &params.as_slice()[slot.bias_range()];
            Ok((dense_forward(input, w, b, nin, output), None))
        }
        LayerSpec::Relu => {
            let mut out = input.clone();
            for v in out.data_mut() {
                if !(*v > 0.0) {
                    *v = 0.0;
                }
            }
            Ok((out, None))
        }
        LayerSpec::Flatten => {
            let out = input
                .clone()
                .reshape(vec![batch, out_shape.volume()])
                .expect("flatten preserves volume");
            Ok((out, None))
        }
    }
}

#[derive(Clone, Copy)]
pub(crate) struct ConvDims {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvDims {
    /// Rows of the unrolled patch matrix: in_channels * kernel * kernel.
    pub fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    /// Columns of the unrolled patch matrix: one per output position.
    pub fn out_positions(&self) -> usize {
        self.oh * self.ow
    }
}

/// Unroll one example's input into patch columns: row (c, dy, dx),
/// column (oy, ox).
pub(crate) fn im2col(x: &[Elem], h: usize, w: usize, d: ConvDims, cols: &mut [Elem]) {
    let l = d.out_positions();
    debug_assert_eq!(cols.len(), d.patch_len() * l);
    debug_assert_eq!(x.len(), d.in_channels * h * w);
    let mut row = 0;
    for c in 0..d.in_channels {
        let plane = &x[c * h * w..(c + 1) * h * w];
        for dy in 0..d.kernel {
            for dx in 0..d.kernel {
                let dst = &mut cols[row * l..(row + 1) * l];
                for oy in 0..d.oh {
                    let src_row = &plane[(oy * d.stride + dy) * w..];
                    let dst_row = &mut dst[oy * d.ow..(oy + 1) * d.ow];
                    if d.stride == 1 {
                        dst_row.copy_from_slice(&src_row[dx..dx + d.ow]);
                    } else {
                        for (ox, out) in dst_row.iter_mut().enumerate() {
                            *out = src_row[ox * d.stride + dx];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Scatter-add patch columns back onto one example's input gradient.
pub(crate) fn col2im(cols: &[Elem], h: usize, w: usize, d: ConvDims, dx_out: &mut [Elem]) {
    let l = d.out_positions();
    let mut row = 0;
    for c in 0..d.in_channels {
        let plane = &mut dx_out[c * h * w..(c + 1) * h * w];
        for dy in 0..d.kernel {
            for dx in 0..d.kernel {
                let src = &cols[row * l..(row + 1) * l];
                for oy in 0..d.oh {
                    let dst_row = &mut plane[(oy * d.stride + dy) * w..];
                    let src_row = &src[oy * d.ow..(oy + 1) * d.ow];
                    for (ox, v) in src_row.iter().enumerate() {
                        dst_row[ox * d.stride + dx] += *v;
                    }
                }
                row += 1;
            }
        }
    }
}

fn conv_forward(input: &Tensor, w: &[Elem], bias: &[Elem], d: ConvDims) -> Tensor {
    let (h, wd) = (input.shape()[2], input.shape()[3]);
    let batch = input.batch();
    let l = d.out_positions();
    let kk = d.patch_len();
    let mut out = Tensor::zeros(&[batch, d.out_channels, d.oh, d.ow]);
    let out_example = d.out_channels * l;
    out.data_mut()
        .par_chunks_mut(out_example * CHUNK)
        .enumerate()
        .for_each(|(chunk, out_chunk)| {
            let mut cols = vec![0.0; kk * l];
            for (e, out_e) in out_chunk.chunks_mut(out_example).enumerate() {
                let example = chunk * CHUNK + e;
                im2col(input.example(example), h, wd, d, &mut cols);
                super::gemm::gemm(d.out_channels, kk, l, w, &cols, out_e);
                for (o, &bv) in bias.iter().enumerate() {
                    for v in &mut out_e[o * l..(o + 1) * l] {
                        *v += bv;
                    }
                }
            }
        });
    out
}

fn pool_forward(input: &Tensor, kernel: usize, c: usize, oh: usize, ow: usize) -> (Tensor, Vec<u32>) {
    let (h, w) = (input.shape()[2], input.shape()[3]);
    let batch = input.batch();
    let out_example = c * oh * ow;
    let mut out = Tensor::zeros(&[batch, c, oh, ow]);
    let mut argmax = vec![0u32; batch * out_example];
    out.data_mut()
        .par_chunks_mut(out_example * CHUNK)
        .zip(argmax.par_chunks_mut(out_example * CHUNK))
        .enumerate()
        .for_each(|(chunk, (out_chunk, arg_chunk))| {
            for (e, (out_e, arg_e)) in out_chunk
                .chunks_mut(out_example)
                .zip(arg_chunk.chunks_mut(out_example))
                .enumerate()
            {
                let x = input.example(chunk * CHUNK + e);
                let mut j = 0;
                for ci in 0..c {
                    let plane = &x[ci * h * w..(ci + 1) * h * w];
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut best = Elem::NEG_INFINITY;
                            let mut best_idx = 0usize;
                            for dy in 0..kernel {
                                let iy = oy * kernel + dy;
                                for dx in 0..kernel {
                                    let ix = ox * kernel + dx;
                                    let v = plane[iy * w + ix];
                                    // strict > keeps the first (row-major lowest) maximum
                                    if v > best {
                                        best = v;
                                        best_idx = ci * h * w + iy * w + ix;
                                    }
                                }
                            }
                            out_e[j] = best;
                            arg_e[j] = best_idx as u32;
                            j += 1;
                        }
                    }
                }
            }
        });
    (out, argmax)
}

fn dense_forward(input: &Tensor, w: &[Elem], bias: &[Elem], nin: usize, nout: usize) -> Tensor {
    let batch = input.batch();
    let mut out = Tensor::zeros(&[batch, nout]);
    // Y[b, j] = sum_l X[b, l] * W[j, l] + bias[j]
    super::gemm::gemm_strided(
        batch,
        nin,
        nout,
        1.0,
        input.data(),
        nin as isize,
        1,
        w,
        1,
        nin as isize,
        0.0,
        out.data_mut(),
        nout as isize,
        1,
    );
    for b in 0..batch {
        for (v, &bv) in out.example_mut(b).iter_mut().zip(bias.iter()) {
            *v += bv;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{build_network, LayerSpec, NetworkSpec};

    fn dense_1_1() -> NetworkSpec {
        NetworkSpec {
            input: (1, 1, 1),
            classes: 1,
            layers: vec![
                LayerSpec::Flatten,
                LayerSpec::Dense {
                    input: 1,
                    output: 1,
                },
            ],
        }
    }

    #[test]
    fn affine_single_unit() {
        let (net, mut params) = build_network(dense_1_1(), 0).unwrap();
        params.as_mut_slice()[0] = 2.0; // weight
        params.as_mut_slice()[1] = 1.0; // bias
        let x = Tensor::new(vec![1, 1, 1, 1], vec![3.0]).unwrap();
        let y = forward(&net, &params, &x).unwrap();
        assert_eq!(y.data(), &[7.0]);
    }

    #[test]
    fn zero_params_give_zero_logits() {
        let (net, _) = build_network(NetworkSpec::mnist(), 0).unwrap();
        let params = ParamVector::zeros(net.param_count());
        let x = Tensor::zeros(&[2, 1, 28, 28]);
        let y = forward(&net, &params, &x).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
        assert_eq!(y.shape(), &[2, 10]);
    }

    #[test]
    fn mnist_preset_output_shape() {
        let (net, params) = build_network(NetworkSpec::mnist(), 3).unwrap();
        let x = Tensor::zeros(&[4, 1, 28, 28]);
        let y = forward(&net, &params, &x).unwrap();
        assert_eq!(y.shape(), &[4, 10]);
    }

    #[test]
    fn forward_is_pure_and_repeatable() {
        let (net, params) = build_network(NetworkSpec::mlp(6, 5, 3), 9).unwrap();
        let mut rng = crate::rng::SplitMix64::new(4);
        let data: Vec<Elem> = (0..12).map(|_| rng.uniform(0.0, 1.0) as Elem).collect();
        let x = Tensor::new(vec![2, 1, 1, 6], data).unwrap();
        let a = forward(&net, &params, &x).unwrap();
        let b = forward(&net, &params, &x).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn conv_matches_hand_computation() {
        // 1 channel 3x3 input, single 2x2 kernel, stride 1.
        let spec = NetworkSpec {
            input: (1, 3, 3),
            classes: 4,
            layers: vec![
                LayerSpec::Conv2d {
                    in_channels: 1,
                    out_channels: 1,
                    kernel: 2,
                    stride: 1,
                },
                LayerSpec::Flatten,
            ],
        };
        let (net, mut params) = build_network(spec, 0).unwrap();
        params.as_mut_slice()[..4].copy_from_slice(&[1.0, 2.0, 3.0, 4.0]);
        params.as_mut_slice()[4] = 0.5;
        let x = Tensor::new(
            vec![1, 1, 3, 3],
            vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0],
        )
        .unwrap();
        let y = forward(&net, &params, &x).unwrap();
        // window at (0,0): 1*1+2*2+3*4+4*5 = 37, plus bias
        assert_eq!(y.data(), &[37.5, 47.5, 67.5, 77.5]);
    }

    #[test]
    fn pool_takes_first_max_on_ties() {
        let spec = NetworkSpec {
            input: (1, 2, 2),
            classes: 1,
            layers: vec![LayerSpec::MaxPool2d { kernel: 2 }, LayerSpec::Flatten],
        };
        let (net, params) = build_network(spec, 0).unwrap();
        let x = Tensor::new(vec![1, 1, 2, 2], vec![5.0, 5.0, 5.0, 5.0]).unwrap();
        let trace = forward_trace(&net, &params, &x).unwrap();
        assert_eq!(trace.logits().data(), &[5.0]);
        assert_eq!(trace.pool_argmax[0].as_ref().unwrap(), &[0u32]);
    }

    #[test]
    fn non_finite_activation_is_reported() {
        let (net, mut params) = build_network(dense_1_1(), 0).unwrap();
        params.as_mut_slice()[0] = Elem::MAX;
        let x = Tensor::new(vec![2, 1, 1, 1], vec![Elem::MAX, 1.0]).unwrap();
        assert!(matches!(
            forward(&net, &params, &x),
            Err(crate::error::Error::NonFiniteValue { .. })
        ));
    }
}
