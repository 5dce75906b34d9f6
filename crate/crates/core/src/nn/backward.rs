//! Reverse-mode gradients: exact derivatives of the recorded forward pass.
//!
//! Reduction order is fixed (fixed-size example chunks, reduced in chunk
//! order), so results are bitwise reproducible regardless of thread count.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{Elem, Tensor};

use super::forward::{col2im, im2col, ConvDims, ForwardTrace, CHUNK};
use super::{gemm, ActShape, LayerSpec, Network, ParamVector};

/// Gradients of the scalar loss seeded by `dlogits` with respect to all
/// parameters (canonical order) and to the input batch.
pub fn backward_full(
    network: &Network,
    params: &ParamVector,
    trace: &ForwardTrace,
    dlogits: &Tensor,
) -> Result<(ParamVector, Tensor)> {
    let mut grads = ParamVector::zeros(network.param_count());
    let dinput = walk(network, params, trace, dlogits, Some(&mut grads))?;
    if !grads.all_finite() {
        return Err(Error::non_finite("parameter gradient"));
    }
    Ok((grads, dinput))
}

/// Input gradient only; skips patch unrolling and weight-gradient work.
pub fn backward_input_only(
    network: &Network,
    params: &ParamVector,
    trace: &ForwardTrace,
    dlogits: &Tensor,
) -> Result<Tensor> {
    walk(network, params, trace, dlogits, None)
}

fn walk(
    network: &Network,
    params: &ParamVector,
    trace: &ForwardTrace,
    dlogits: &Tensor,
    mut grads: Option<&mut ParamVector>,
) -> Result<Tensor> {
    dlogits.check_finite("loss gradient")?;
    if dlogits.shape() != trace.logits().shape() {
        return Err(Error::ShapeMismatch {
            layer: network.spec().layers.len(),
            detail: format!(
                "dlogits shape {:?} vs logits {:?}",
                dlogits.shape(),
                trace.logits().shape()
            ),
        });
    }
    let mut dcur = dlogits.clone();
    for (i, layer) in network.spec().layers.iter().enumerate().rev() {
        let input = &trace.activations[i];
        let slot = network.slots()[i];
        dcur = match *layer {
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
            } => {
                let ActShape::Chw(_, oh, ow) = network.shapes()[i + 1] else {
                    unreachable!()
                };
                let d = ConvDims {
                    in_channels,
                    out_channels,
                    kernel,
                    stride,
                    oh,
                    ow,
                };
                let w = &params.as_slice()[slot.weight_range()];
                let (dx, dw_db) = conv_backward(input, &dcur, w, d, grads.is_some());
                if let Some(g) = grads.as_deref_mut() {
                    let (dw, db) = dw_db.unwrap();
                    g.as_mut_slice()[slot.weight_range()].copy_from_slice(&dw);
                    g.as_mut_slice()[slot.bias_range()].copy_from_slice(&db);
                }
                dx
            }
            LayerSpec::MaxPool2d { .. } => {
                let argmax = trace.pool_argmax[i].as_ref().expect("pool trace");
                pool_backward(input, &dcur, argmax)
            }
            LayerSpec::Dense { input: nin, output } => {
                let w = &params.as_slice()[slot.weight_range()];
                let (dx, dw_db) = dense_backward(input, &dcur, w, nin, output, grads.is_some());
                if let Some(g) = grads.as_deref_mut() {
                    let (dw, db) = dw_db.unwrap();
                    g.as_mut_slice()[slot.weight_range()].copy_from_slice(&dw);
                    g.as_mut_slice()[slot.bias_range()].copy_from_slice(&db);
                }
                dx
            }
            LayerSpec::Relu => {
                let mut dx = dcur;
                for (dv, &xv) in dx.data_mut().iter_mut().zip(input.data()) {
                    if !(xv > 0.0) {
                        *dv = 0.0;
                    }
                }
                dx
            }
            LayerSpec::Flatten => dcur
                .reshape(input.shape().to_vec())
                .expect("flatten backward preserves volume"),
        };
    }
    dcur.check_finite("input gradient")?;
    Ok(dcur)
}

#[allow(clippy::type_complexity)]
fn conv_backward(
    input: &Tensor,
    dy: &Tensor,
    w: &[Elem],
    d: ConvDims,
    want_params: bool,
) -> (Tensor, Option<(Vec<Elem>, Vec<Elem>)>) {
    let (h, wd) = (input.shape()[2], input.shape()[3]);
    let batch = input.batch();
    let l = d.out_positions();
    let kk = d.patch_len();
    let in_example = input.example_len();
    let out_example = d.out_channels * l;
    let mut dx = Tensor::zeros(input.shape());

    // Per-chunk weight/bias accumulators, reduced in chunk order below.
    let chunk_results: Vec<Option<(Vec<Elem>, Vec<Elem>)>> = dx
        .data_mut()
        .par_chunks_mut(in_example * CHUNK)
        .zip(dy.data().par_chunks(out_example * CHUNK))
        .enumerate()
        .map(|(chunk, (dx_chunk, dy_chunk))| {
            let mut dcols = vec![0.0; kk * l];
            let mut cols = if want_params {
                vec![0.0; kk * l]
            } else {
                Vec::new()
            };
            let mut acc = if want_params {
                Some((vec![0.0; d.out_channels * kk], vec![0.0; d.out_channels]))
            } else {
                None
            };
            for (e, (dx_e, dy_e)) in dx_chunk
                .chunks_mut(in_example)
                .zip(dy_chunk.chunks(out_example))
                .enumerate()
            {
                let example = chunk * CHUNK + e;
                // dcols = W^T (kk x out_c) * dY (out_c x l)
                gemm::gemm_strided(
                    kk,
                    d.out_channels,
                    l,
                    1.0,
                    w,
                    1,
                    kk as isize,
                    dy_e,
                    l as isize,
                    1,
                    0.0,
                    &mut dcols,
                    l as isize,
                    1,
                );
                col2im(&dcols, h, wd, d, dx_e);
                if let Some((dw, db)) = acc.as_mut() {
                    im2col(input.example(example), h, wd, d, &mut cols);
                    // dW += dY (out_c x l) * cols^T (l x kk)
                    gemm::gemm_strided(
                        d.out_channels,
                        l,
                        kk,
                        1.0,
                        dy_e,
                        l as isize,
                        1,
                        &cols,
                        1,
                        l as isize,
                        1.0,
                        dw,
                        kk as isize,
                        1,
                    );
                    for (o, dbo) in db.iter_mut().enumerate() {
                        *dbo += dy_e[o * l..(o + 1) * l].iter().sum::<Elem>();
                    }
                }
            }
            acc
        })
        .collect();

    if !want_params {
        return (dx, None);
    }
    let mut dw = vec![0.0; d.out_channels * kk];
    let mut db = vec![0.0; d.out_channels];
    for acc in chunk_results.into_iter().flatten() {
        for (a, b) in dw.iter_mut().zip(&acc.0) {
            *a += b;
        }
        for (a, b) in db.iter_mut().zip(&acc.1) {
            *a += b;
        }
    }
    let _ = batch;
    (dx, Some((dw, db)))
}

fn pool_backward(input: &Tensor, dy: &Tensor, argmax: &[u32]) -> Tensor {
    let in_example = input.example_len();
    let out_example = dy.example_len();
    let mut dx = Tensor::zeros(input.shape());
    dx.data_mut()
        .par_chunks_mut(in_example * CHUNK)
        .zip(dy.data().par_chunks(out_example * CHUNK))
        .zip(argmax.par_chunks(out_example * CHUNK))
        .for_each(|((dx_chunk, dy_chunk), arg_chunk)| {
            for ((dx_e, dy_e), arg_e) in dx_chunk
                .chunks_mut(in_example)
                .zip(dy_chunk.chunks(out_example))
                .zip(arg_chunk.chunks(out_example))
            {
                for (&g, &idx) in dy_e.iter().zip(arg_e) {
                    dx_e[idx as usize] += g;
                }
            }
        });
    dx
}

#[allow(clippy::type_complexity)]
fn dense_backward(
    input: &Tensor,
    dy: &Tensor,
    w: &[Elem],
    nin: usize,
    nout: usize,
    want_params: bool,
) -> (Tensor, Option<(Vec<Elem>, Vec<Elem>)>) {
    let batch = input.batch();
    let mut dx = Tensor::zeros(&[batch, nin]);
    // dX (B x in) = dY (B x out) * W (out x in)
    gemm::gemm_strided(
        batch,
        nout,
        nin,
        1.0,
        dy.data(),
        nout as isize,
        1,
        w,
        nin as isize,
        1,
        0.0,
        dx.data_mut(),
        nin as isize,
        1,
    );
    if !want_params {
        return (dx, None);
    }
    let mut dw = vec![0.0; nout * nin];
    // dW (out x in) = dY^T (out x B) * X (B x in)
    gemm::gemm_strided(
        nout,
        batch,
        nin,
        1.0,
        dy.data(),
        1,
        nout as isize,
        input.data(),
        nin as isize,
        1,
        0.0,
        &mut dw,
        nin as isize,
        1,
    );
    let mut db = vec![0.0; nout];
    for b in 0..batch {
        for (dbj, &g) in db.iter_mut().zip(dy.example(b)) {
            *dbj += g;
        }
    }
    (dx, Some((dw, db)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{build_network, forward_trace, LayerSpec, NetworkSpec};

    /// d/dw of (w*x + b) seeded with dlogits = 1 is x; d/dx is w.
    #[test]
    fn single_affine_unit_gradients() {
        let spec = NetworkSpec {
            input: (1, 1, 1),
            classes: 1,
            layers: vec![
                LayerSpec::Flatten,
                LayerSpec::Dense {
                    input: 1,
                    output: 1,
                },
            ],
        };
        let (net, mut params) = build_network(spec, 0).unwrap();
        params.as_mut_slice()[0] = 2.0;
        params.as_mut_slice()[1] = 1.0;
        let x = Tensor::new(vec![1, 1, 1, 1], vec![3.0]).unwrap();
        let trace = forward_trace(&net, &params, &x).unwrap();
        let dlogits = Tensor::new(vec![1, 1], vec![1.0]).unwrap();
        let (grads, dx) = backward_full(&net, &params, &trace, &dlogits).unwrap();
        assert_eq!(grads.as_slice(), &[3.0, 1.0]);
        assert_eq!(dx.data(), &[2.0]);
    }

    #[test]
    fn pool_routes_gradient_to_first_max() {
        let spec = NetworkSpec {
            input: (1, 2, 2),
            classes: 1,
            layers: vec![LayerSpec::MaxPool2d { kernel: 2 }, LayerSpec::Flatten],
        };
        let (net, params) = build_network(spec, 0).unwrap();
        let x = Tensor::new(vec![1, 1, 2, 2], vec![7.0, 7.0, 7.0, 7.0]).unwrap();
        let trace = forward_trace(&net, &params, &x).unwrap();
        let dlogits = Tensor::new(vec![1, 1], vec![1.0]).unwrap();
        let (_, dx) = backward_full(&net, &params, &trace, &dlogits).unwrap();
        assert_eq!(dx.data(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn input_only_matches_full_backward_input() {
        let (net, params) = build_network(NetworkSpec::mlp(4, 6, 3), 5).unwrap();
        let mut rng = crate::rng::SplitMix64::new(2);
        let x = Tensor::new(
            vec![3, 1, 1, 4],
            (0..12).map(|_| rng.uniform(0.0, 1.0) as Elem).collect(),
        )
        .unwrap();
        let trace = forward_trace(&net, &params, &x).unwrap();
        let dlogits = Tensor::new(
            vec![3, 3],
            (0..9).map(|_| rng.uniform(-1.0, 1.0) as Elem).collect(),
        )
        .unwrap();
        let (_, dx_full) = backward_full(&net, &params, &trace, &dlogits).unwrap();
        let dx_only = backward_input_only(&net, &params, &trace, &dlogits).unwrap();
        assert_eq!(dx_full, dx_only);
    }
}
