//! Masked cross-entropy, the feature re-weighting loss and reverse-mode
//! gradients of the total objective.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::{LabelMap, CELL, IGNORE};
use crate::lrp::{explain, OutputTarget, RelevanceTensor};
use crate::nn::{backward_trace, forward, rerun_cc_reweighted, ActivationTrace, Gradients, Mode, NetworkModel};
use crate::tensor::{Real, Tensor};

pub const PROB_CLAMP: f64 = 1e-7;
/// CC probability at or above which a pixel seeds the FRW explanation.
pub const FRW_TARGET_CONFIDENCE: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha_v: f64,
    pub alpha_c: f64,
    pub alpha_p: f64,
    pub alpha_frw: f64,
}

impl LossWeights {
    /// `α_V = α_C = 50`; `α_P = 200` alone, or `α_P = α_FRW = 100` with FRW.
    pub fn defaults(frw_enabled: bool) -> Self {
        let (alpha_p, alpha_frw) = if frw_enabled { (100.0, 100.0) } else { (200.0, 0.0) };
        Self {
            alpha_v: 50.0,
            alpha_c: 50.0,
            alpha_p,
            alpha_frw,
        }
    }

    pub fn zero() -> Self {
        Self {
            alpha_v: 0.0,
            alpha_c: 0.0,
            alpha_p: 0.0,
            alpha_frw: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for v in [self.alpha_v, self.alpha_c, self.alpha_p, self.alpha_frw] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("loss weight {v} must be a non-negative number")));
            }
        }
        Ok(())
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        Self::defaults(false)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct FrwConfig {
    /// Trunk layer or block alias (`enc1`, `enc3`, `bottleneck`, ...).
    pub layer: String,
    pub enabled: bool,
}

impl Default for FrwConfig {
    fn default() -> Self {
        Self {
            layer: "enc1".into(),
            enabled: false,
        }
    }
}

/// GT_V, GT_C and GT_P for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingLabels {
    pub voronoi: LabelMap,
    pub cluster: LabelMap,
    pub point: LabelMap,
}

impl TrainingLabels {
    pub fn dims(&self) -> (usize, usize) {
        self.point.dims()
    }

    fn check(&self, h: usize, w: usize) -> Result<()> {
        for (name, m) in [("voronoi", &self.voronoi), ("cluster", &self.cluster), ("point", &self.point)] {
            if m.dims() != (h, w) {
                return Err(Error::invalid(format!(
                    "{name} labels are {:?}, network output is {h}x{w}",
                    m.dims()
                )));
            }
        }
        Ok(())
    }
}

fn check_pred<T: Real>(pred: &Tensor<T>, label: &LabelMap) -> Result<(usize, usize)> {
    match pred.nchw() {
        Some((1, 2, h, w)) if (h, w) == label.dims() => Ok((h, w)),
        _ => Err(Error::invalid(format!(
            "prediction {:?} does not match a 1x2x{}x{} label map",
            pred.dims(),
            label.height(),
            label.width()
        ))),
    }
}

fn class_of(code: u8) -> Option<usize> {
    match code {
        IGNORE => None,
        CELL => Some(1),
        _ => Some(0),
    }
}

/// Mean of `-ln p(class)` over non-ignore pixels, probabilities clamped at
/// `1e-7`. Zero when every pixel is ignored.
pub fn masked_cross_entropy<T: Real>(pred: &Tensor<T>, label: &LabelMap) -> Result<T> {
    let (h, w) = check_pred(pred, label)?;
    let clamp = T::from_f64_lossy(PROB_CLAMP);
    let mut sum = T::zero();
    let mut n = 0usize;
    for (i, &code) in label.data().iter().enumerate() {
        if let Some(c) = class_of(code) {
            let p = pred.data()[c * h * w + i];
            sum = sum - p.max(clamp).ln();
            n += 1;
        }
    }
    Ok(if n == 0 { T::zero() } else { sum / T::from_usize(n).unwrap() })
}

/// `d CE / d pred`, zero on clamped entries.
pub fn masked_cross_entropy_grad<T: Real>(pred: &Tensor<T>, label: &LabelMap) -> Result<Tensor<T>> {
    let (h, w) = check_pred(pred, label)?;
    let clamp = T::from_f64_lossy(PROB_CLAMP);
    let n = label.data().iter().filter(|&&c| c != IGNORE).count();
    let mut g = Tensor::zeros(pred.dims());
    if n == 0 {
        return Ok(g);
    }
    let inv_n = T::one() / T::from_usize(n).unwrap();
    for (i, &code) in label.data().iter().enumerate() {
        if let Some(c) = class_of(code) {
            let p = pred.data()[c * h * w + i];
            if p > clamp {
                g.data_mut()[c * h * w + i] = -inv_n / p;
            }
        }
    }
    Ok(g)
}

/// `w = R / max|R| + 1`, or all ones when `R ≡ 0`.
pub fn frw_weight<T: Real>(relevance: &Tensor<T>) -> Tensor<T> {
    let m = relevance.max_abs();
    if m == T::zero() {
        return Tensor::full(relevance.dims(), T::one());
    }
    relevance.map(|r| r / m + T::one())
}

/// Re-weights a feature map by its relevance.
pub fn frw_reweight<T: Real>(features: &Tensor<T>, relevance: &RelevanceTensor<T>) -> Result<Tensor<T>> {
    if features.dims() != relevance.dims() {
        return Err(Error::invalid(format!(
            "features {:?} and relevance {:?} differ in shape",
            features.dims(),
            relevance.dims()
        )));
    }
    Ok(features.zip_map(&frw_weight(relevance), |f, w| f * w))
}

/// Pixels explained for FRW: confident CC predictions, else GT_P cells.
pub fn frw_target<T: Real>(y_cc: &Tensor<T>, gt_p: &LabelMap) -> OutputTarget {
    let (_, _, h, w) = y_cc.nchw().expect("cc output is 4-D");
    let thr = T::from_f64_lossy(FRW_TARGET_CONFIDENCE);
    let pos = y_cc.plane(0, 1);
    let mut pixels: Vec<(usize, usize)> = (0..h * w).filter(|&i| pos[i] >= thr).map(|i| (i / w, i % w)).collect();
    if pixels.is_empty() {
        pixels = (0..h * w)
            .filter(|&i| gt_p.data().get(i) == Some(&CELL))
            .map(|i| (i / w, i % w))
            .collect();
    }
    OutputTarget::cc_positive(pixels)
}

/// FRW weight at `layer` for a recorded forward pass. All ones when the
/// target is empty.
pub fn frw_weight_for_trace<T: Real>(
    model: &NetworkModel<T>,
    trace: &ActivationTrace<T>,
    y_cc: &Tensor<T>,
    gt_p: &LabelMap,
    layer: &str,
) -> Result<Tensor<T>> {
    let target = frw_target(y_cc, gt_p);
    let dims = trace
        .output(layer)
        .ok_or_else(|| Error::UnknownLayer(layer.to_string()))?
        .dims()
        .to_vec();
    if target.pixels.is_empty() {
        return Ok(Tensor::full(&dims, T::one()));
    }
    let r = explain(model, trace, &target, Some(layer))?;
    Ok(frw_weight(&r))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub ce_voronoi: f64,
    pub ce_cluster: f64,
    pub ce_point: f64,
    /// Cross-entropy of the re-weighted CC output; 0 when FRW is off.
    pub frw: f64,
    pub loss_seg: f64,
    pub loss_cc: f64,
}

/// A forward pass with everything needed to differentiate the losses.
pub struct LossPass<T: Real> {
    pub terms: LossTerms,
    pub trace: ActivationTrace<T>,
    pub seg_id: usize,
    pub cc_id: usize,
    /// Value id of the re-weighted CC output and the weight used.
    pub frw: Option<(usize, Tensor<T>)>,
}

fn value_id<T: Real>(trace: &ActivationTrace<T>, layer: &str) -> usize {
    trace.steps[trace.step_index(layer).expect("layer recorded")].output
}

/// Runs the network, the optional FRW branch and all cross-entropies.
/// `frw_weight` overrides the relevance-derived weight (used to hold it fixed).
pub fn loss_pass<T: Real>(
    model: &NetworkModel<T>,
    image: &Tensor<T>,
    labels: &TrainingLabels,
    weights: &LossWeights,
    cfg: &FrwConfig,
    mode: Mode,
    frw_weight: Option<Tensor<T>>,
) -> Result<LossPass<T>> {
    let out = forward(model, image, mode)?;
    let (_, _, h, w) = out.y_seg.nchw().expect("4-D");
    labels.check(h, w)?;
    let ce_v = masked_cross_entropy(&out.y_seg, &labels.voronoi)?;
    let ce_c = masked_cross_entropy(&out.y_seg, &labels.cluster)?;
    let ce_p = masked_cross_entropy(&out.y_cc, &labels.point)?;
    let mut trace = out.trace;
    let seg_id = value_id(&trace, &model.seg_head.last().unwrap().name);
    let cc_id = value_id(&trace, &model.cc_head.last().unwrap().name);
    let mut frw = None;
    let mut frw_ce = T::zero();
    if cfg.enabled {
        let layer = model.resolve_layer(&cfg.layer)?;
        if !model.trunk.iter().any(|l| l.name == layer) {
            return Err(Error::invalid(format!("FRW layer `{}` is not in the trunk", cfg.layer)));
        }
        let wgt = match frw_weight {
            Some(wgt) => wgt,
            None => frw_weight_for_trace(model, &trace, &out.y_cc, &labels.point, &layer)?,
        };
        let id = rerun_cc_reweighted(model, &mut trace, &layer, wgt.clone())?;
        frw_ce = masked_cross_entropy(&trace.values[id], &labels.point)?;
        frw = Some((id, wgt));
    }
    let f = |v: T| v.to_f64().unwrap_or(f64::NAN);
    let (ce_voronoi, ce_cluster, ce_point, frw_v) = (f(ce_v), f(ce_c), f(ce_p), f(frw_ce));
    let a = |x: f64| T::from_f64_lossy(x);
    let loss_seg = a(weights.alpha_v) * ce_v + a(weights.alpha_c) * ce_c;
    let loss_cc = if cfg.enabled {
        a(weights.alpha_p) * ce_p + a(weights.alpha_frw) * frw_ce
    } else {
        a(weights.alpha_p) * ce_p
    };
    Ok(LossPass {
        terms: LossTerms {
            ce_voronoi,
            ce_cluster,
            ce_point,
            frw: frw_v,
            loss_seg: f(loss_seg),
            loss_cc: f(loss_cc),
        },
        trace,
        seg_id,
        cc_id,
        frw,
    })
}

/// The FRW loss alone: explain, re-weight at `cfg.layer`, re-run, CE to GT_P.
pub fn frw_loss<T: Real>(
    model: &NetworkModel<T>,
    image: &Tensor<T>,
    gt_p: &LabelMap,
    cfg: &FrwConfig,
    mode: Mode,
) -> Result<T> {
    if !cfg.enabled {
        return Err(Error::invalid("frw_loss called with FRW disabled"));
    }
    let out = forward(model, image, mode)?;
    let layer = model.resolve_layer(&cfg.layer)?;
    let mut trace = out.trace;
    let wgt = frw_weight_for_trace(model, &trace, &out.y_cc, gt_p, &layer)?;
    let id = rerun_cc_reweighted(model, &mut trace, &layer, wgt)?;
    masked_cross_entropy(&trace.values[id], gt_p)
}

/// `(loss_seg, loss_cc)`.
pub fn total_losses<T: Real>(
    model: &NetworkModel<T>,
    image: &Tensor<T>,
    labels: &TrainingLabels,
    weights: &LossWeights,
    cfg: &FrwConfig,
    mode: Mode,
) -> Result<(f64, f64)> {
    let p = loss_pass(model, image, labels, weights, cfg, mode, None)?;
    Ok((p.terms.loss_seg, p.terms.loss_cc))
}

/// Names of the weight arrays updated by training: every linear `w`/`b` and
/// BN `gamma`/`beta` of layers not in `frozen`. Running statistics are not
/// trainable.
pub fn trainable_weights<T: Real>(model: &NetworkModel<T>, frozen: &HashSet<String>) -> Vec<String> {
    model
        .weights
        .keys()
        .filter(|k| {
            let (layer, suffix) = k.rsplit_once('.').unwrap_or((k.as_str(), ""));
            matches!(suffix, "w" | "b" | "gamma" | "beta") && !frozen.contains(layer)
        })
        .cloned()
        .collect()
}

/// Gradients of `loss_seg + loss_cc` for a finished [`LossPass`]. The FRW
/// weight is a constant. Every trainable array gets an entry.
pub fn gradients_of<T: Real>(
    model: &NetworkModel<T>,
    pass: &LossPass<T>,
    labels: &TrainingLabels,
    weights: &LossWeights,
    frozen: &HashSet<String>,
) -> Result<Gradients<T>> {
    let a = |x: f64| T::from_f64_lossy(x);
    let y_seg = &pass.trace.values[pass.seg_id];
    let y_cc = &pass.trace.values[pass.cc_id];
    let gv = masked_cross_entropy_grad(y_seg, &labels.voronoi)?;
    let gc = masked_cross_entropy_grad(y_seg, &labels.cluster)?;
    let seg_seed = gv.zip_map(&gc, |v, c| a(weights.alpha_v) * v + a(weights.alpha_c) * c);
    let cc_seed = masked_cross_entropy_grad(y_cc, &labels.point)?.map(|g| a(weights.alpha_p) * g);
    let mut seeds = vec![(pass.seg_id, seg_seed), (pass.cc_id, cc_seed)];
    if let Some((id, _)) = &pass.frw {
        let g = masked_cross_entropy_grad(&pass.trace.values[*id], &labels.point)?;
        seeds.push((*id, g.map(|v| a(weights.alpha_frw) * v)));
    }
    let mut grads = backward_trace(model, &pass.trace, seeds, frozen);
    grads.retain(|k, _| !k.ends_with(".mean") && !k.ends_with(".var"));
    for name in trainable_weights(model, frozen) {
        grads
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(model.weights[&name].dims()));
    }
    Ok(grads)
}

/// Training-mode losses and their gradients for one image.
pub fn backward<T: Real>(
    model: &NetworkModel<T>,
    image: &Tensor<T>,
    labels: &TrainingLabels,
    weights: &LossWeights,
    cfg: &FrwConfig,
    frozen: &HashSet<String>,
) -> Result<(LossPass<T>, Gradients<T>)> {
    let pass = loss_pass(model, image, labels, weights, cfg, Mode::Training, None)?;
    let grads = gradients_of(model, &pass, labels, weights, frozen)?;
    Ok((pass, grads))
}
