//! Layer-wise relevance propagation with the α1 (z⁺) rule.
//!
//! Linear layers redistribute relevance in proportion to positive
//! contributions `(x_i w_ij)⁺`; biases never enter the denominator. Batch norm
//! is canonized: its per-channel affine map is folded into the preceding
//! convolution, after which the batch-norm layer itself is transparent.

use std::collections::{BTreeSet, HashMap};
use std::ops::Deref;

use crate::error::{Error, Result};
use crate::nn::forward::{geom, layer_at, logits_layer, ActivationTrace, StepOp};
use crate::nn::model::{Head, LayerKind, LayerSpec, NetworkModel, Section};
use crate::nn::ops::{self, LinearGeom};
use crate::tensor::{Real, Tensor};

/// Denominator stabiliser.
pub const LRP_EPSILON: f64 = 1e-9;

/// Signed relevance scores with the dims of the activation they explain.
#[derive(Debug, Clone, PartialEq)]
pub struct RelevanceTensor<T = f32>(pub Tensor<T>);

impl<T: Real> RelevanceTensor<T> {
    pub fn into_tensor(self) -> Tensor<T> {
        self.0
    }

    pub fn total(&self) -> f64 {
        self.0.sum_f64()
    }
}

impl<T> Deref for RelevanceTensor<T> {
    type Target = Tensor<T>;

    fn deref(&self) -> &Tensor<T> {
        &self.0
    }
}

/// Output pixels whose class score seeds the explanation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OutputTarget {
    pub head: Head,
    pub pixels: BTreeSet<(usize, usize)>,
    pub class_index: usize,
}

impl OutputTarget {
    /// Positive cell-center class at the given pixels.
    pub fn cc_positive(pixels: impl IntoIterator<Item = (usize, usize)>) -> Self {
        Self {
            head: Head::Cc,
            pixels: pixels.into_iter().collect(),
            class_index: 1,
        }
    }
}

/// Relevance at the head's pre-softmax layer: `max(0, score)` of the target
/// class at target pixels, zero elsewhere.
pub fn init_relevance<T: Real>(
    model: &NetworkModel<T>,
    trace: &ActivationTrace<T>,
    target: &OutputTarget,
) -> Result<RelevanceTensor<T>> {
    if target.pixels.is_empty() {
        return Err(Error::EmptyTarget);
    }
    let name = logits_layer(model, target.head);
    let logits = trace
        .output(name)
        .ok_or_else(|| Error::UnknownLayer(name.to_string()))?;
    let (_, c, h, w) = logits.nchw().expect("4-D logits");
    if target.class_index >= c {
        return Err(Error::invalid(format!(
            "class index {} out of range for {c} classes",
            target.class_index
        )));
    }
    let mut r = Tensor::zeros(logits.dims());
    for &(y, x) in &target.pixels {
        if y >= h || x >= w {
            return Err(Error::invalid(format!(
                "target pixel ({y}, {x}) outside {h}x{w}"
            )));
        }
        let s = logits.at4(0, target.class_index, y, x);
        r.set4(0, target.class_index, y, x, s.max(T::zero()));
    }
    Ok(RelevanceTensor(r))
}

/// α1 rule for a linear map with weights `w` (bias excluded).
pub fn lrp_alpha1_linear<T: Real>(
    g: LinearGeom,
    x: &Tensor<T>,
    w: &Tensor<T>,
    relevance_out: &Tensor<T>,
) -> Tensor<T> {
    alpha1_linear(g, x, w, relevance_out, &mut PropagationStats::default())
}

fn alpha1_linear<T: Real>(
    g: LinearGeom,
    x: &Tensor<T>,
    w: &Tensor<T>,
    relevance_out: &Tensor<T>,
    stats: &mut PropagationStats,
) -> Tensor<T> {
    let zero = T::zero();
    let eps = T::from_f64_lossy(LRP_EPSILON);
    let x_pos = x.map(|v| v.max(zero));
    let w_pos = w.map(|v| v.max(zero));
    let has_neg = x.data().iter().any(|&v| v < zero);
    let (x_neg, w_neg) = if has_neg {
        (Some(x.map(|v| v.min(zero))), Some(w.map(|v| v.min(zero))))
    } else {
        (None, None)
    };
    let mut denom = ops::linear_forward(g, &x_pos, &w_pos, None);
    if let (Some(xn), Some(wn)) = (&x_neg, &w_neg) {
        denom.add_assign(&ops::linear_forward(g, xn, wn, None));
    }
    for (&r, &d) in relevance_out.data().iter().zip(denom.data()) {
        if r != zero {
            let (r, d) = (r.to_f64().unwrap(), d.to_f64().unwrap());
            stats.absorbed += r * LRP_EPSILON / (d + LRP_EPSILON);
            if d <= 0.0 {
                stats.dead_outputs += 1;
            }
        }
    }
    let ratio = relevance_out.zip_map(&denom, |r, d| if r == zero { zero } else { r / (d + eps) });
    let mut out = ops::linear_backward_data(g, &ratio, &w_pos, x.dims()).zip_map(&x_pos, |c, xv| c * xv);
    if let (Some(xn), Some(wn)) = (&x_neg, &w_neg) {
        let neg = ops::linear_backward_data(g, &ratio, wn, x.dims()).zip_map(xn, |c, xv| c * xv);
        out.add_assign(&neg);
    }
    out
}

/// Bookkeeping of relevance that leaves the propagation.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct PropagationStats {
    /// Relevance taken up by the stabiliser: `Σ_j R_j ε / (D_j + ε)`. For an
    /// output without positive contributors (`D_j = 0`) this is all of `R_j`.
    pub absorbed: f64,
    /// Outputs carrying relevance but lacking any positive contributor.
    pub dead_outputs: usize,
}

/// Relevance redistributed onto a layer's inputs.
#[derive(Debug, Clone)]
pub struct LayerRelevance<T> {
    pub input: Tensor<T>,
    /// Share routed to the skip source of a concat layer.
    pub skip: Option<Tensor<T>>,
}

/// Propagates relevance through one layer. `bn_scale` is the per-channel
/// scale of a batch norm that directly follows a linear layer; it is folded
/// into the weights. Batch norm and ReLU pass relevance through unchanged.
pub fn lrp_alpha1_layer<T: Real>(
    layer: &LayerSpec,
    input_activation: &Tensor<T>,
    relevance_out: &Tensor<T>,
    model: &NetworkModel<T>,
    bn_scale: Option<&[T]>,
) -> Result<LayerRelevance<T>> {
    layer_rule(layer, input_activation, relevance_out, model, bn_scale, &mut PropagationStats::default())
}

fn layer_rule<T: Real>(
    layer: &LayerSpec,
    input_activation: &Tensor<T>,
    relevance_out: &Tensor<T>,
    model: &NetworkModel<T>,
    bn_scale: Option<&[T]>,
    stats: &mut PropagationStats,
) -> Result<LayerRelevance<T>> {
    let input = match layer.kind {
        LayerKind::Conv3x3 | LayerKind::Conv1x1 | LayerKind::TransposedConv2x2 => {
            let w = model.weight(&format!("{}.w", layer.name))?;
            let folded;
            let w = match bn_scale {
                Some(scale) => {
                    let per_out = w.len() / w.dims()[0];
                    folded = Tensor::from_fn(w.dims(), |i| w.data()[i] * scale[i / per_out]);
                    &folded
                }
                None => w,
            };
            alpha1_linear(geom(layer.kind), input_activation, w, relevance_out, stats)
        }
        LayerKind::Batchnorm | LayerKind::Relu => relevance_out.clone(),
        LayerKind::Maxpool2x2 => ops::maxpool2_route(input_activation, relevance_out),
        LayerKind::ConcatSkip => {
            let (a, b) = ops::split_channels(relevance_out, layer.in_channels);
            return Ok(LayerRelevance {
                input: a,
                skip: Some(b),
            });
        }
        LayerKind::SoftmaxChannel => {
            return Err(Error::invalid(format!(
                "`{}`: relevance starts at the pre-softmax scores",
                layer.name
            )))
        }
    };
    if input.dims() != input_activation.dims() {
        return Err(Error::shape(&layer.name, "relevance dims differ from activation"));
    }
    Ok(LayerRelevance { input, skip: None })
}

fn add_into<T: Real>(slot: &mut Option<Tensor<T>>, t: Tensor<T>) {
    match slot {
        Some(acc) => acc.add_assign(&t),
        None => *slot = Some(t),
    }
}

/// Propagates `init` (relevance at the target head's logits) back through
/// the primary forward steps of `trace`. Returns relevance at `stop_layer`'s
/// output, or at the full input image when `stop_layer` is `None`.
pub fn propagate<T: Real>(
    model: &NetworkModel<T>,
    trace: &ActivationTrace<T>,
    head: Head,
    init: &RelevanceTensor<T>,
    stop_layer: Option<&str>,
) -> Result<RelevanceTensor<T>> {
    propagate_with_stats(model, trace, head, init, stop_layer).map(|(r, _)| r)
}

/// [`propagate`] that also reports relevance absorbed along the way, so that
/// `total(init) == total(result) + absorbed` up to rounding.
pub fn propagate_with_stats<T: Real>(
    model: &NetworkModel<T>,
    trace: &ActivationTrace<T>,
    head: Head,
    init: &RelevanceTensor<T>,
    stop_layer: Option<&str>,
) -> Result<(RelevanceTensor<T>, PropagationStats)> {
    let logits = logits_layer(model, head);
    let start = trace
        .step_index(logits)
        .ok_or_else(|| Error::UnknownLayer(logits.to_string()))?;
    let stop = match stop_layer {
        None => None,
        Some(name) => {
            let resolved = model.resolve_layer(name)?;
            let (section, _) = model.layer(&resolved).expect("resolved layer exists");
            if section != Section::Trunk && section != head.section() {
                return Err(Error::invalid(format!(
                    "stop layer `{resolved}` is not on the path of the {head:?} head"
                )));
            }
            let idx = trace
                .step_index(&resolved)
                .ok_or_else(|| Error::UnknownLayer(resolved.clone()))?;
            if idx > start {
                return Err(Error::invalid(format!(
                    "stop layer `{resolved}` comes after the head's scores"
                )));
            }
            Some(idx)
        }
    };
    if init.dims() != trace.values[trace.steps[start].output].dims() {
        return Err(Error::shape(logits, "initial relevance dims differ from logits"));
    }

    // Conv output value id -> scale of the batch norm consuming it.
    let mut folded: HashMap<usize, &[T]> = HashMap::new();
    for step in &trace.steps[..=start] {
        if let (StepOp::Layer { section, index }, Some(bn)) = (&step.op, &step.bn) {
            if layer_at(model, *section, *index).kind == LayerKind::Batchnorm {
                folded.insert(step.inputs[0], bn.scale.as_slice());
            }
        }
    }

    let mut acc: Vec<Option<Tensor<T>>> = vec![None; trace.values.len()];
    acc[trace.steps[start].output] = Some(init.0.clone());
    let mut stats = PropagationStats::default();
    let lower = stop.map_or(0, |s| s + 1);
    for si in (lower..=start).rev() {
        let step = &trace.steps[si];
        let StepOp::Layer { section, index } = step.op else {
            continue;
        };
        let Some(r) = acc[step.output].take() else {
            continue;
        };
        let layer = layer_at(model, section, index);
        let x = &trace.values[step.inputs[0]];
        let bn_scale = folded.get(&step.output).copied();
        let out = layer_rule(layer, x, &r, model, bn_scale, &mut stats)?;
        add_into(&mut acc[step.inputs[0]], out.input);
        if let Some(skip) = out.skip {
            add_into(&mut acc[step.inputs[1]], skip);
        }
    }
    let target_value = match stop {
        Some(s) => trace.steps[s].output,
        None => 0,
    };
    let dims = trace.values[target_value].dims().to_vec();
    Ok((
        RelevanceTensor(acc[target_value].take().unwrap_or_else(|| Tensor::zeros(&dims))),
        stats,
    ))
}

/// Explains `target` down to `stop_layer` (feature relevance, same dims as
/// that layer's activation) or, without a stop layer, to the input image as
/// an `H×W` heatmap with channel relevances summed per pixel.
pub fn explain<T: Real>(
    model: &NetworkModel<T>,
    trace: &ActivationTrace<T>,
    target: &OutputTarget,
    stop_layer: Option<&str>,
) -> Result<RelevanceTensor<T>> {
    let init = init_relevance(model, trace, target)?;
    let r = propagate(model, trace, target.head, &init, stop_layer)?;
    match stop_layer {
        Some(_) => Ok(r),
        None => Ok(RelevanceTensor(channel_sum(&r.0))),
    }
}

/// Sums a `1×C×H×W` tensor over channels into `H×W`.
pub fn channel_sum<T: Real>(t: &Tensor<T>) -> Tensor<T> {
    let (_, c, h, w) = t.nchw().expect("4-D tensor");
    let mut out = Tensor::zeros(&[h, w]);
    for ci in 0..c {
        for (o, &v) in out.data_mut().iter_mut().zip(t.plane(0, ci)) {
            *o = *o + v;
        }
    }
    out
}
