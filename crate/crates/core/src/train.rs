//! Desk-scale trainer: Adam, one image per step, flip/rot90/crop
//! augmentation and optional model selection by validation pixel F1.

use std::collections::{BTreeMap, HashSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::{LabelMap, IGNORE};
use crate::losses::{backward, FrwConfig, LossWeights, TrainingLabels};
use crate::metrics::pixel_metrics;
use crate::nn::{forward, Gradients, LayerKind, Mode, NetworkModel};
use crate::nn::model::BN_MOMENTUM;
use crate::postprocess::binarize;
use crate::raster::{crop_tensor, Grid, Mask, RgbImage};
use crate::tensor::{Real, Tensor};


#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub name: String,
    pub image: RgbImage,
    pub labels: TrainingLabels,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValidationSample {
    pub image: RgbImage,
    pub foreground: Mask,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Square crop side; `None` trains on whole (padded) images.
    pub patch_size: Option<usize>,
    pub augment: bool,
    pub seed: u64,
    pub weights: LossWeights,
    pub frw: FrwConfig,
    /// Layer names excluded from updates.
    pub frozen: Vec<String>,
    pub validate_every: usize,
    pub seg_threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            patch_size: None,
            augment: true,
            seed: 0,
            weights: LossWeights::default(),
            frw: FrwConfig::default(),
            frozen: Vec::new(),
            validate_every: 10,
            seg_threshold: 0.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss_seg: f64,
    pub loss_cc: f64,
    /// Unweighted cross-entropy of the re-weighted CC output.
    pub loss_frw: f64,
}

pub fn loss_log_csv(log: &[EpochLog]) -> String {
    let mut s = String::from("epoch,loss_seg,loss_cc,loss_frw\n");
    for e in log {
        s += &format!("{},{},{},{}\n", e.epoch, e.loss_seg, e.loss_cc, e.loss_frw);
    }
    s
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T: Real> {
    pub model: NetworkModel<T>,
    pub log: Vec<EpochLog>,
    /// Epoch and mean validation F1 of the returned model, when validating.
    pub selected: Option<(usize, f64)>,
}

struct Adam<T> {
    t: i32,
    moments: BTreeMap<String, (Vec<T>, Vec<T>)>,
}

impl<T: Real> Adam<T> {
    fn step(&mut self, model: &mut NetworkModel<T>, grads: &Gradients<T>, cfg: &TrainConfig) {
        self.t += 1;
        let c = |x: f64| T::from_f64_lossy(x);
        let (b1, b2) = (c(cfg.beta1), c(cfg.beta2));
        let bc1 = T::one() - b1.powi(self.t);
        let bc2 = T::one() - b2.powi(self.t);
        let (lr, eps) = (c(cfg.lr), c(cfg.adam_eps));
        for (name, g) in grads {
            let w = model.weights.get_mut(name).expect("gradient of a known weight");
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (vec![T::zero(); g.len()], vec![T::zero(); g.len()]));
            for (((wi, &gi), mi), vi) in w.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + (T::one() - b1) * gi;
                *vi = b2 * *vi + (T::one() - b2) * gi * gi;
                let mh = *mi / bc1;
                let vh = *vi / bc2;
                *wi = *wi - lr * mh / (vh.sqrt() + eps);
            }
        }
    }
}

/// Same random flips, rotation and crop for an image and its label maps.
fn augment(
    rng: &mut ChaCha8Rng,
    image: &RgbImage,
    labels: &TrainingLabels,
    cfg: &TrainConfig,
) -> (Grid<[f32; 3]>, [LabelMap; 3]) {
    let mut img = image.to_grid();
    let mut maps = [labels.voronoi.clone(), labels.cluster.clone(), labels.point.clone()];
    if cfg.augment {
        let flip_h = rng.random::<bool>();
        let flip_v = rng.random::<bool>();
        let rot = rng.random_range(0..4);
        if flip_h {
            img = img.flip_horizontal();
            maps = maps.map(|m| m.flip_horizontal());
        }
        if flip_v {
            img = img.flip_vertical();
            maps = maps.map(|m| m.flip_vertical());
        }
        for _ in 0..rot {
            img = img.rot90();
            maps = maps.map(|m| m.rot90());
        }
    }
    if let Some(p) = cfg.patch_size {
        let (h, w) = img.dims();
        let (ph, pw) = (p.min(h), p.min(w));
        let y0 = rng.random_range(0..=h - ph);
        let x0 = rng.random_range(0..=w - pw);
        img = img.crop(y0, x0, ph, pw);
        maps = maps.map(|m| m.crop(y0, x0, ph, pw));
    }
    (img, maps)
}

/// Reflect-pads the image and pads labels with ignore up to a multiple of `m`.
fn pad_sample(img: &Grid<[f32; 3]>, maps: [LabelMap; 3], m: usize) -> (RgbImage, TrainingLabels) {
    let image = RgbImage::from_grid(img).pad_reflect_to_multiple(m);
    let (h, w) = (image.height(), image.width());
    let [voronoi, cluster, point] = maps.map(|l| l.pad_to(h, w, IGNORE));
    (image, TrainingLabels { voronoi, cluster, point })
}

fn update_running_stats<T: Real>(model: &mut NetworkModel<T>, trace: &crate::nn::ActivationTrace<T>) {
    let momentum = T::from_f64_lossy(BN_MOMENTUM);
    let names: Vec<String> = model
        .layers()
        .filter(|(_, l)| l.kind == LayerKind::Batchnorm)
        .map(|(_, l)| l.name.clone())
        .collect();
    for name in names {
        let Some(i) = trace.step_index(&name) else { continue };
        let Some(stats) = trace.steps[i].bn.as_ref().and_then(|c| c.batch.as_ref()) else {
            continue;
        };
        let (_, _, h, w) = stats.xhat.nchw().expect("4-D");
        let n = (h * w) as f64;
        let unbias = T::from_f64_lossy(if n > 1.0 { n / (n - 1.0) } else { 1.0 });
        let mean = model.weights.get_mut(&format!("{name}.mean")).unwrap();
        for (r, &b) in mean.data_mut().iter_mut().zip(&stats.mean) {
            *r = (T::one() - momentum) * *r + momentum * b;
        }
        let var = model.weights.get_mut(&format!("{name}.var")).unwrap();
        for (r, &b) in var.data_mut().iter_mut().zip(&stats.var) {
            *r = (T::one() - momentum) * *r + momentum * b * unbias;
        }
    }
}

/// Cell probability of the segmentation head, cropped back to the image.
pub fn predict_seg<T: Real>(model: &NetworkModel<T>, image: &RgbImage) -> Result<Grid<f32>> {
    let padded = image.pad_reflect_to_multiple(model.size_multiple());
    let out = forward(model, &padded.to_tensor::<T>(), Mode::Inference)?;
    let (h, w) = (image.height(), image.width());
    let seg = crop_tensor(&out.y_seg, h, w);
    Grid::from_vec(h, w, seg.plane(0, 1).iter().map(|v| v.to_f32().unwrap_or(0.0)).collect())
}

fn validation_f1<T: Real>(model: &NetworkModel<T>, val: &[ValidationSample], threshold: f64) -> Result<f64> {
    let mut sum = 0.0;
    for v in val {
        let prob = predict_seg(model, &v.image)?;
        sum += pixel_metrics(&binarize(&prob, threshold), &v.foreground)?.1;
    }
    Ok(sum / val.len() as f64)
}

/// Trains `model` in place of a copy. Deterministic for a given seed.
pub fn train<T: Real>(
    model: &NetworkModel<T>,
    data: &[Sample],
    val: &[ValidationSample],
    cfg: &TrainConfig,
) -> Result<TrainOutcome<T>> {
    if data.is_empty() {
        return Err(Error::EmptyDataset("training set is empty".into()));
    }
    cfg.weights.validate()?;
    if let Some(p) = cfg.patch_size {
        if p == 0 || p % model.size_multiple() != 0 {
            return Err(Error::invalid(format!(
                "patch size {p} must be a positive multiple of {}",
                model.size_multiple()
            )));
        }
    }
    if cfg.frw.enabled {
        let layer = model.resolve_layer(&cfg.frw.layer)?;
        if !model.trunk.iter().any(|l| l.name == layer) {
            return Err(Error::invalid(format!("FRW layer `{}` is not in the trunk", cfg.frw.layer)));
        }
    }
    let frozen: HashSet<String> = cfg.frozen.iter().cloned().collect();
    let mut model = model.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam { t: 0, moments: BTreeMap::new() };
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, f64, NetworkModel<T>)> = None;
    let mut order: Vec<usize> = (0..data.len()).collect();

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let (mut seg, mut cc, mut frw) = (0.0, 0.0, 0.0);
        for &i in &order {
            let s = &data[i];
            let (img, maps) = augment(&mut rng, &s.image, &s.labels, cfg);
            let (image, labels) = pad_sample(&img, maps, model.size_multiple());
            let x: Tensor<T> = image.to_tensor();
            let (pass, grads) = backward(&model, &x, &labels, &cfg.weights, &cfg.frw, &frozen)?;
            update_running_stats(&mut model, &pass.trace);
            adam.step(&mut model, &grads, cfg);
            seg += pass.terms.loss_seg;
            cc += pass.terms.loss_cc;
            frw += pass.terms.frw;
        }
        let n = data.len() as f64;
        log.push(EpochLog {
            epoch,
            loss_seg: seg / n,
            loss_cc: cc / n,
            loss_frw: frw / n,
        });
        let due = cfg.validate_every > 0 && (epoch % cfg.validate_every == 0 || epoch == cfg.epochs);
        if !val.is_empty() && due {
            let f1 = validation_f1(&model, val, cfg.seg_threshold)?;
            if best.as_ref().is_none_or(|b| f1 > b.1) {
                best = Some((epoch, f1, model.clone()));
            }
        }
    }
    Ok(match best {
        Some((epoch, f1, m)) => TrainOutcome {
            model: m,
            log,
            selected: Some((epoch, f1)),
        },
        None => TrainOutcome {
            model,
            log,
            selected: None,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::labels::{enlarged_point_labels, voronoi_labels, PointAnnotation};
    use crate::nn::WeightInit;

    fn tiny_sample() -> Sample {
        let img = RgbImage::new(
            12,
            12,
            (0..144)
                .flat_map(|i: i32| {
                    let (dy, dx) = (i / 12 - 5, i % 12 - 5);
                    if dy * dy + dx * dx < 6 { [0.3, 0.2, 0.6] } else { [0.9, 0.8, 0.85] }
                })
                .collect(),
        )
        .unwrap();
        let p = PointAnnotation::new(vec![(5, 5)], 12, 12).unwrap();
        let point = enlarged_point_labels(&p);
        Sample {
            name: "t".into(),
            image: img,
            labels: TrainingLabels { voronoi: voronoi_labels(&p), cluster: point.clone(), point },
        }
    }

    #[test]
    fn zero_epochs_leave_the_model_unchanged() {
        let m = NetworkModel::<f32>::unet(1, 2, WeightInit::He { seed: 1 });
        let cfg = TrainConfig { epochs: 0, ..Default::default() };
        let out = train(&m, &[tiny_sample()], &[], &cfg).unwrap();
        assert_eq!(out.model, m);
        assert!(out.log.is_empty());
    }

    #[test]
    fn empty_dataset_is_an_error() {
        let m = NetworkModel::<f32>::unet(1, 2, WeightInit::He { seed: 1 });
        assert!(matches!(train(&m, &[], &[], &TrainConfig::default()), Err(Error::EmptyDataset(_))));
    }

    #[test]
    fn same_seed_gives_identical_logs() {
        let m = NetworkModel::<f32>::unet(1, 2, WeightInit::He { seed: 1 });
        let cfg = TrainConfig {
            epochs: 3,
            patch_size: Some(8),
            frw: FrwConfig { layer: "enc1".into(), enabled: true },
            weights: LossWeights::defaults(true),
            ..Default::default()
        };
        let a = train(&m, &[tiny_sample()], &[], &cfg).unwrap();
        let b = train(&m, &[tiny_sample()], &[], &cfg).unwrap();
        assert_eq!(loss_log_csv(&a.log), loss_log_csv(&b.log));
        assert_eq!(a.model, b.model);
        assert_ne!(a.model, m);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut m = NetworkModel::<f64>::unet(1, 2, WeightInit::Zero);
        let mut g = Gradients::new();
        g.insert("seg.out.b".to_string(), Tensor::new(vec![2], vec![3.0, -0.5]).unwrap());
        let mut adam = Adam { t: 0, moments: BTreeMap::new() };
        adam.step(&mut m, &g, &TrainConfig::default());
        let b = m.weights["seg.out.b"].data();
        assert!((b[0] + 1e-3).abs() < 1e-9 && (b[1] - 1e-3).abs() < 1e-9);
    }
}
