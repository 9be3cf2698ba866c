//! Forward execution with activation tracing.
//!
//! A forward pass is recorded as a list of steps over a value table. Value 0
//! is the input image. Re-running part of the network with a re-weighted
//! feature map appends further steps to the same trace, so one reverse sweep
//! differentiates the combined computation.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::nn::model::{Head, LayerKind, LayerSpec, NetworkModel, Section, BN_EPS};
use crate::nn::ops::{self, LinearGeom};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch norm uses stored running statistics.
    Inference,
    /// Batch norm uses batch statistics.
    Training,
}

/// Batch-norm state captured during a forward step.
#[derive(Debug, Clone)]
pub struct BnCache<T> {
    /// Effective per-channel affine map actually applied.
    pub scale: Vec<T>,
    pub shift: Vec<T>,
    pub batch: Option<BatchStats<T>>,
}

#[derive(Debug, Clone)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    pub inv_std: Vec<T>,
    pub xhat: Tensor<T>,
}

#[derive(Debug, Clone)]
pub enum StepOp<T> {
    Layer { section: Section, index: usize },
    /// Element-wise product with a constant weight tensor.
    Reweight(Tensor<T>),
}

#[derive(Debug, Clone)]
pub struct Step<T> {
    pub op: StepOp<T>,
    pub inputs: Vec<usize>,
    pub output: usize,
    pub bn: Option<BnCache<T>>,
}

/// Per-layer activations of one forward pass, keyed by layer name.
#[derive(Debug, Clone)]
pub struct ActivationTrace<T = f32> {
    pub mode: Mode,
    pub values: Vec<Tensor<T>>,
    pub steps: Vec<Step<T>>,
    names: HashMap<String, usize>,
}

impl<T: Real> ActivationTrace<T> {
    pub fn image(&self) -> &Tensor<T> {
        &self.values[0]
    }

    /// Index of the primary-forward step executing `name`.
    pub fn step_index(&self, name: &str) -> Option<usize> {
        self.names.get(name).copied()
    }

    pub fn output(&self, name: &str) -> Option<&Tensor<T>> {
        self.step_index(name).map(|i| &self.values[self.steps[i].output])
    }

    pub fn input(&self, name: &str) -> Option<&Tensor<T>> {
        self.step_index(name)
            .map(|i| &self.values[self.steps[i].inputs[0]])
    }

    pub fn layer_names(&self) -> impl Iterator<Item = &str> {
        self.names.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    fn push_value(&mut self, t: Tensor<T>) -> usize {
        self.values.push(t);
        self.values.len() - 1
    }
}

/// Result of a full forward pass.
#[derive(Debug, Clone)]
pub struct ForwardOutput<T = f32> {
    pub y_seg: Tensor<T>,
    pub y_cc: Tensor<T>,
    pub trace: ActivationTrace<T>,
}

pub(crate) fn layer_at<T: Real>(model: &NetworkModel<T>, section: Section, index: usize) -> &LayerSpec {
    match section {
        Section::Trunk => &model.trunk[index],
        Section::SegHead => &model.seg_head[index],
        Section::CcHead => &model.cc_head[index],
    }
}

pub(crate) fn geom(kind: LayerKind) -> LinearGeom {
    match kind {
        LayerKind::Conv3x3 => LinearGeom::Conv(3),
        LayerKind::Conv1x1 => LinearGeom::Conv(1),
        LayerKind::TransposedConv2x2 => LinearGeom::Up2,
        other => unreachable!("{other:?} is not linear"),
    }
}

fn check_channels(layer: &LayerSpec, x: &Tensor<impl Real>) -> Result<()> {
    match x.nchw() {
        Some((_, c, _, _)) if c == layer.in_channels => Ok(()),
        Some((_, c, _, _)) => Err(Error::shape(
            &layer.name,
            format!("expected {} input channels, got {c}", layer.in_channels),
        )),
        None => Err(Error::shape(
            &layer.name,
            format!("expected a 4-D NCHW tensor, got dims {:?}", x.dims()),
        )),
    }
}

fn eval_layer<T: Real>(
    layer: &LayerSpec,
    x: &Tensor<T>,
    skip: Option<&Tensor<T>>,
    model: &NetworkModel<T>,
    mode: Mode,
) -> Result<(Tensor<T>, Option<BnCache<T>>)> {
    check_channels(layer, x)?;
    let (_, _, h, w) = x.nchw().unwrap();
    let out = match layer.kind {
        LayerKind::Conv3x3 | LayerKind::Conv1x1 | LayerKind::TransposedConv2x2 => {
            let wt = model.weight(&format!("{}.w", layer.name))?;
            let b = model.weight(&format!("{}.b", layer.name))?;
            ops::linear_forward(geom(layer.kind), x, wt, Some(b.data()))
        }
        LayerKind::Batchnorm => {
            let gamma = model.weight(&format!("{}.gamma", layer.name))?.data();
            let beta = model.weight(&format!("{}.beta", layer.name))?.data();
            let eps = T::from_f64_lossy(BN_EPS);
            let cache = match mode {
                Mode::Inference => {
                    let mean = model.weight(&format!("{}.mean", layer.name))?.data();
                    let var = model.weight(&format!("{}.var", layer.name))?.data();
                    let scale: Vec<T> = gamma
                        .iter()
                        .zip(var)
                        .map(|(&g, &v)| g / (v + eps).sqrt())
                        .collect();
                    let shift = beta
                        .iter()
                        .zip(mean)
                        .zip(&scale)
                        .map(|((&b, &m), &s)| b - m * s)
                        .collect();
                    BnCache { scale, shift, batch: None }
                }
                Mode::Training => {
                    let (mean, var) = ops::channel_stats(x);
                    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
                    let neg_mean_scaled: Vec<T> =
                        mean.iter().zip(&inv_std).map(|(&m, &s)| -m * s).collect();
                    let xhat = ops::channel_affine(x, &inv_std, &neg_mean_scaled);
                    let scale: Vec<T> = gamma.iter().zip(&inv_std).map(|(&g, &s)| g * s).collect();
                    let shift = beta
                        .iter()
                        .zip(&mean)
                        .zip(&scale)
                        .map(|((&b, &m), &s)| b - m * s)
                        .collect();
                    BnCache {
                        scale,
                        shift,
                        batch: Some(BatchStats { mean, var, inv_std, xhat }),
                    }
                }
            };
            let y = match &cache.batch {
                // gamma * xhat + beta, matching the gradient path exactly.
                Some(stats) => ops::channel_affine(&stats.xhat, gamma, beta),
                None => ops::channel_affine(x, &cache.scale, &cache.shift),
            };
            return Ok((y, Some(cache)));
        }
        LayerKind::Relu => ops::relu(x),
        LayerKind::Maxpool2x2 => {
            if h % 2 != 0 || w % 2 != 0 {
                return Err(Error::shape(
                    &layer.name,
                    format!("2x2 pooling needs even spatial dims, got {h}x{w}"),
                ));
            }
            ops::maxpool2(x)
        }
        LayerKind::ConcatSkip => {
            let s = skip.ok_or_else(|| Error::shape(&layer.name, "missing skip input"))?;
            let (sn, sc, sh, sw) = s
                .nchw()
                .ok_or_else(|| Error::shape(&layer.name, "skip input is not 4-D"))?;
            if sn != x.dims()[0] || sh != h || sw != w || layer.in_channels + sc != layer.out_channels {
                return Err(Error::shape(
                    &layer.name,
                    format!("cannot concatenate {:?} with skip {:?}", x.dims(), s.dims()),
                ));
            }
            ops::concat(x, s)
        }
        LayerKind::SoftmaxChannel => ops::softmax_channel(x),
    };
    Ok((out, None))
}

/// Applies a single layer in inference mode. `skip` is required for concat layers.
pub fn apply_layer<T: Real>(
    layer: &LayerSpec,
    input: &Tensor<T>,
    skip: Option<&Tensor<T>>,
    model: &NetworkModel<T>,
) -> Result<Tensor<T>> {
    eval_layer(layer, input, skip, model, Mode::Inference).map(|(t, _)| t)
}

struct Runner<'a, T: Real> {
    model: &'a NetworkModel<T>,
    trace: ActivationTrace<T>,
    /// Current value id of each layer's output (by name).
    current: HashMap<String, usize>,
}

impl<'a, T: Real> Runner<'a, T> {
    fn run(&mut self, section: Section, index: usize, input: usize, record: bool) -> Result<usize> {
        let layer = layer_at(self.model, section, index);
        let mut inputs = vec![input];
        let skip = match &layer.skip_source {
            Some(src) if layer.kind == LayerKind::ConcatSkip => {
                let id = *self
                    .current
                    .get(src)
                    .ok_or_else(|| Error::UnknownLayer(src.clone()))?;
                inputs.push(id);
                Some(&self.trace.values[id])
            }
            _ => None,
        };
        let (out, bn) = eval_layer(
            layer,
            &self.trace.values[input],
            skip,
            self.model,
            self.trace.mode,
        )?;
        let out_id = self.trace.push_value(out);
        self.trace.steps.push(Step {
            op: StepOp::Layer { section, index },
            inputs,
            output: out_id,
            bn,
        });
        if record {
            self.trace
                .names
                .insert(layer.name.clone(), self.trace.steps.len() - 1);
        }
        self.current.insert(layer.name.clone(), out_id);
        Ok(out_id)
    }
}

fn check_input<T: Real>(model: &NetworkModel<T>, image: &Tensor<T>) -> Result<()> {
    let (_, c, h, w) = image.nchw().ok_or_else(|| {
        Error::shape("input", format!("expected 1x{}xHxW, got {:?}", model.in_channels, image.dims()))
    })?;
    if c != model.in_channels {
        return Err(Error::shape(
            "input",
            format!("expected {} channels, got {c}", model.in_channels),
        ));
    }
    let m = model.size_multiple();
    if h % m != 0 || w % m != 0 {
        return Err(Error::InputSize {
            height: h,
            width: w,
            multiple: m,
        });
    }
    Ok(())
}

/// Runs the full two-head network and records every layer.
pub fn forward<T: Real>(model: &NetworkModel<T>, image: &Tensor<T>, mode: Mode) -> Result<ForwardOutput<T>> {
    check_input(model, image)?;
    let mut runner = Runner {
        model,
        trace: ActivationTrace {
            mode,
            values: vec![image.clone()],
            steps: Vec::new(),
            names: HashMap::new(),
        },
        current: HashMap::new(),
    };
    let mut cur = 0;
    for i in 0..model.trunk.len() {
        cur = runner.run(Section::Trunk, i, cur, true)?;
    }
    let trunk_out = cur;
    let mut heads = [0usize; 2];
    for (slot, section, len) in [
        (0, Section::SegHead, model.seg_head.len()),
        (1, Section::CcHead, model.cc_head.len()),
    ] {
        let mut cur = trunk_out;
        for i in 0..len {
            cur = runner.run(section, i, cur, true)?;
        }
        heads[slot] = cur;
    }
    let trace = runner.trace;
    Ok(ForwardOutput {
        y_seg: trace.values[heads[0]].clone(),
        y_cc: trace.values[heads[1]].clone(),
        trace,
    })
}

/// Name of the pre-softmax layer of a head.
pub fn logits_layer<T: Real>(model: &NetworkModel<T>, head: Head) -> &str {
    let list = match head {
        Head::Seg => &model.seg_head,
        Head::Cc => &model.cc_head,
    };
    &list[list.len() - 2].name
}

/// Replaces the output of trunk layer `layer` by `weight ⊙ output` and
/// re-executes every later trunk layer plus the cc head. The new steps are
/// appended to `trace`; returns the value id of the re-computed cc probabilities.
pub fn rerun_cc_reweighted<T: Real>(
    model: &NetworkModel<T>,
    trace: &mut ActivationTrace<T>,
    layer: &str,
    weight: Tensor<T>,
) -> Result<usize> {
    let step_idx = trace
        .step_index(layer)
        .ok_or_else(|| Error::UnknownLayer(layer.to_string()))?;
    let trunk_pos = model
        .trunk
        .iter()
        .position(|l| l.name == layer)
        .ok_or_else(|| Error::invalid(format!("`{layer}` is not a trunk layer")))?;
    let src = trace.steps[step_idx].output;
    if weight.dims() != trace.values[src].dims() {
        return Err(Error::shape(
            layer,
            format!("re-weighting dims {:?} differ from activation {:?}", weight.dims(), trace.values[src].dims()),
        ));
    }
    let mut current = HashMap::new();
    for l in &model.trunk[..=trunk_pos] {
        let i = trace.names[&l.name];
        current.insert(l.name.clone(), trace.steps[i].output);
    }
    let reweighted = trace.values[src].zip_map(&weight, |f, w| f * w);
    let mode = trace.mode;
    let mut runner = Runner {
        model,
        trace: std::mem::replace(
            trace,
            ActivationTrace {
                mode,
                values: Vec::new(),
                steps: Vec::new(),
                names: HashMap::new(),
            },
        ),
        current,
    };
    let rid = runner.trace.push_value(reweighted);
    runner.trace.steps.push(Step {
        op: StepOp::Reweight(weight),
        inputs: vec![src],
        output: rid,
        bn: None,
    });
    runner.current.insert(layer.to_string(), rid);
    let mut cur = rid;
    let result = (|| {
        for i in trunk_pos + 1..model.trunk.len() {
            cur = runner.run(Section::Trunk, i, cur, false)?;
        }
        for i in 0..model.cc_head.len() {
            cur = runner.run(Section::CcHead, i, cur, false)?;
        }
        Ok(cur)
    })();
    *trace = runner.trace;
    result
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::model::WeightInit;

    fn image(h: usize, w: usize) -> Tensor<f32> {
        Tensor::from_fn(&[1, 3, h, w], |i| ((i * 37) % 101) as f32 / 100.0)
    }

    #[test]
    fn rejects_indivisible_input() {
        let m = NetworkModel::<f32>::unet(2, 4, WeightInit::Zero);
        let err = forward(&m, &image(10, 16), Mode::Inference).unwrap_err();
        assert!(matches!(err, Error::InputSize { multiple: 4, .. }));
    }

    #[test]
    fn zero_model_is_uniform() {
        let m = NetworkModel::<f32>::unet(2, 4, WeightInit::Zero);
        let out = forward(&m, &image(8, 8), Mode::Inference).unwrap();
        assert!(out.y_seg.data().iter().all(|&v| v == 0.5));
        assert!(out.y_cc.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn trace_covers_every_layer() {
        let m = NetworkModel::<f32>::unet(2, 4, WeightInit::He { seed: 5 });
        let out = forward(&m, &image(16, 16), Mode::Inference).unwrap();
        assert_eq!(out.trace.len(), m.layers().count());
        assert_eq!(out.trace.output("bottleneck.relu2").unwrap().dims(), &[1, 16, 4, 4]);
        assert_eq!(out.trace.output("enc1.relu2").unwrap().dims(), &[1, 4, 16, 16]);
    }

    #[test]
    fn channel_mismatch_names_layer() {
        let m = NetworkModel::<f32>::unet(1, 2, WeightInit::Zero);
        let x = Tensor::<f32>::zeros(&[1, 5, 4, 4]);
        match apply_layer(&m.trunk[0], &x, None, &m) {
            Err(Error::Shape { layer, .. }) => assert_eq!(layer, "enc1.conv1"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unit_reweight_reproduces_cc_output() {
        let m = NetworkModel::<f64>::unet(2, 4, WeightInit::Random { seed: 9, zero_bias: false });
        let x = image(8, 8).cast::<f64>();
        let mut out = forward(&m, &x, Mode::Inference).unwrap();
        let dims = out.trace.output("enc1.relu2").unwrap().dims().to_vec();
        let id = rerun_cc_reweighted(&m, &mut out.trace, "enc1.relu2", Tensor::full(&dims, 1.0)).unwrap();
        assert_eq!(out.trace.values[id], out.y_cc);
    }
}
