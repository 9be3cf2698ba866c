//! Reverse-mode differentiation over a recorded trace.

use std::collections::{BTreeMap, HashSet};

use crate::nn::forward::{geom, layer_at, ActivationTrace, StepOp};
use crate::nn::model::{LayerKind, NetworkModel};
use crate::nn::ops;
use crate::tensor::{Real, Tensor};

/// Weight-name → gradient map.
pub type Gradients<T> = BTreeMap<String, Tensor<T>>;

fn accumulate<T: Real>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) {
    match slot {
        Some(acc) => acc.add_assign(&g),
        None => *slot = Some(g),
    }
}

fn add_param<T: Real>(grads: &mut Gradients<T>, name: String, g: Tensor<T>) {
    match grads.get_mut(&name) {
        Some(acc) => acc.add_assign(&g),
        None => {
            grads.insert(name, g);
        }
    }
}

/// Propagates `seeds` (value id → dL/dvalue) back through every step of the
/// trace. Parameters of layers listed in `frozen` receive no gradient entry.
/// Re-weighting steps treat their weight as a constant.
pub fn backward_trace<T: Real>(
    model: &NetworkModel<T>,
    trace: &ActivationTrace<T>,
    seeds: Vec<(usize, Tensor<T>)>,
    frozen: &HashSet<String>,
) -> Gradients<T> {
    let mut grads: Vec<Option<Tensor<T>>> = vec![None; trace.values.len()];
    for (id, g) in seeds {
        accumulate(&mut grads[id], g);
    }
    let mut params = Gradients::new();
    for step in trace.steps.iter().rev() {
        let Some(g) = grads[step.output].take() else {
            continue;
        };
        let x_id = step.inputs[0];
        let x = &trace.values[x_id];
        match &step.op {
            StepOp::Reweight(w) => {
                accumulate(&mut grads[x_id], g.zip_map(w, |a, b| a * b));
            }
            StepOp::Layer { section, index } => {
                let layer = layer_at(model, *section, *index);
                let train = !frozen.contains(&layer.name);
                match layer.kind {
                    LayerKind::Conv3x3 | LayerKind::Conv1x1 | LayerKind::TransposedConv2x2 => {
                        let w = &model.weights[&format!("{}.w", layer.name)];
                        if train {
                            let (gw, gb) = ops::linear_backward_params(geom(layer.kind), x, &g, w.dims());
                            add_param(&mut params, format!("{}.w", layer.name), gw);
                            add_param(
                                &mut params,
                                format!("{}.b", layer.name),
                                Tensor::new(vec![gb.len()], gb).unwrap(),
                            );
                        }
                        let gx = ops::linear_backward_data(geom(layer.kind), &g, w, x.dims());
                        accumulate(&mut grads[x_id], gx);
                    }
                    LayerKind::Batchnorm => {
                        let cache = step.bn.as_ref().expect("batch norm cache");
                        let gamma = model.weights[&format!("{}.gamma", layer.name)].data();
                        let c = gamma.len();
                        let (gx, dgamma, dbeta) = match &cache.batch {
                            Some(stats) => ops::batchnorm_train_backward(&g, &stats.xhat, gamma, &stats.inv_std),
                            None => {
                                let zero = vec![T::zero(); c];
                                let gx = ops::channel_affine(&g, &cache.scale, &zero);
                                // xhat = (y - beta) / gamma is ill-defined for gamma = 0; use x directly.
                                let mean = model.weights[&format!("{}.mean", layer.name)].data();
                                let var = model.weights[&format!("{}.var", layer.name)].data();
                                let eps = T::from_f64_lossy(crate::nn::model::BN_EPS);
                                let inv: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
                                let shift: Vec<T> = mean.iter().zip(&inv).map(|(&m, &s)| -m * s).collect();
                                let xhat = ops::channel_affine(x, &inv, &shift);
                                let n = g.dims()[0];
                                let mut dgamma = vec![T::zero(); c];
                                let mut dbeta = vec![T::zero(); c];
                                for ci in 0..c {
                                    for ni in 0..n {
                                        for (&gv, &xv) in g.plane(ni, ci).iter().zip(xhat.plane(ni, ci)) {
                                            dgamma[ci] = dgamma[ci] + gv * xv;
                                            dbeta[ci] = dbeta[ci] + gv;
                                        }
                                    }
                                }
                                (gx, dgamma, dbeta)
                            }
                        };
                        if train {
                            add_param(&mut params, format!("{}.gamma", layer.name), Tensor::new(vec![c], dgamma).unwrap());
                            add_param(&mut params, format!("{}.beta", layer.name), Tensor::new(vec![c], dbeta).unwrap());
                        }
                        accumulate(&mut grads[x_id], gx);
                    }
                    LayerKind::Relu => accumulate(&mut grads[x_id], ops::relu_backward(x, &g)),
                    LayerKind::Maxpool2x2 => accumulate(&mut grads[x_id], ops::maxpool2_route(x, &g)),
                    LayerKind::ConcatSkip => {
                        let (ga, gb) = ops::split_channels(&g, layer.in_channels);
                        accumulate(&mut grads[x_id], ga);
                        accumulate(&mut grads[step.inputs[1]], gb);
                    }
                    LayerKind::SoftmaxChannel => {
                        let p = &trace.values[step.output];
                        accumulate(&mut grads[x_id], ops::softmax_channel_backward(p, &g));
                    }
                }
            }
        }
    }
    params
}
