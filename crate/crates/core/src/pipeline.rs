//! End-to-end orchestration: labels, training, inference, post-processing
//! and evaluation over an on-disk dataset.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{self, DatasetItem};
use crate::error::{Error, Result};
use crate::labels::{cluster_labels, enlarged_point_labels, voronoi_labels, ClusterConfig, PointAnnotation};
use crate::losses::{FrwConfig, LossWeights, TrainingLabels};
use crate::metrics::{evaluate, ImageScores, MetricsReport};
use crate::nn::{forward, load_model, save_model, ActivationTrace, Mode, NetworkModel, WeightInit};
use crate::postprocess::{
    binarize, condense_cc, expand_cc, foreground, morph_cleanup, split_instances, CandidateOutcome, CcBlobs,
    Expansion, InstanceMap, PostprocessConfig,
};
use crate::raster::{crop_tensor, Grid, RgbImage};
use crate::train::{loss_log_csv, train, Sample, TrainConfig, TrainOutcome, ValidationSample};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PipelineMode {
    /// Cleanup only.
    Base,
    Split,
    #[default]
    SplitExpand,
}

impl std::str::FromStr for PipelineMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "base" => Ok(Self::Base),
            "split" => Ok(Self::Split),
            "split_expand" => Ok(Self::SplitExpand),
            other => Err(Error::invalid(format!(
                "mode `{other}` is not one of base, split, split_expand"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub dataset: PathBuf,
    pub model_dir: PathBuf,
    pub output_dir: PathBuf,
    pub mode: PipelineMode,
    pub seed: u64,
    pub epochs: usize,
    pub patch_size: Option<usize>,
    pub depth: usize,
    pub base_width: usize,
    /// `None` picks the documented defaults for the FRW setting.
    pub loss_weights: Option<LossWeights>,
    pub frw: FrwConfig,
    pub postprocess: PostprocessConfig,
    pub cluster: ClusterConfig,
    pub folds: usize,
    /// Cross-validation fold; `None` uses every image for each stage.
    pub fold: Option<usize>,
    pub validate_every: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            dataset: PathBuf::from("data"),
            model_dir: PathBuf::from("model"),
            output_dir: PathBuf::from("out"),
            mode: PipelineMode::default(),
            seed: 0,
            epochs: 200,
            patch_size: None,
            depth: 4,
            base_width: 32,
            loss_weights: None,
            frw: FrwConfig::default(),
            postprocess: PostprocessConfig::default(),
            cluster: ClusterConfig::default(),
            folds: 10,
            fold: None,
            validate_every: 10,
        }
    }
}

impl PipelineConfig {
    pub fn loss_weights(&self) -> LossWeights {
        self.loss_weights.unwrap_or_else(|| LossWeights::defaults(self.frw.enabled))
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            patch_size: self.patch_size,
            seed: self.seed,
            weights: self.loss_weights(),
            frw: self.frw.clone(),
            validate_every: self.validate_every,
            seg_threshold: self.postprocess.seg_threshold,
            ..TrainConfig::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSplit {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Seeded shuffle cut into `k` chunks (sizes differ by at most one); fold `f`
/// tests on chunk `f`, validates on chunk `f + 1 mod k`, trains on the rest.
pub fn kfold_split(n: usize, k: usize, fold: usize, seed: u64) -> Result<FoldSplit> {
    if k < 2 {
        return Err(Error::invalid(format!("k = {k}: need at least 2 folds")));
    }
    if k > n {
        return Err(Error::invalid(format!("k = {k} exceeds the dataset size {n}")));
    }
    if fold >= k {
        return Err(Error::invalid(format!("fold {fold} out of range for k = {k}")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut chunks = Vec::with_capacity(k);
    let mut start = 0;
    for c in 0..k {
        let len = n / k + usize::from(c < n % k);
        let mut chunk = idx[start..start + len].to_vec();
        chunk.sort_unstable();
        chunks.push(chunk);
        start += len;
    }
    let val_fold = (fold + 1) % k;
    let mut train: Vec<usize> = (0..k)
        .filter(|&c| c != fold && c != val_fold)
        .flat_map(|c| chunks[c].iter().copied())
        .collect();
    train.sort_unstable();
    Ok(FoldSplit {
        train,
        val: chunks[val_fold].clone(),
        test: chunks[fold].clone(),
    })
}

/// GT_V, GT_C and GT_P for one annotated image.
pub fn make_labels(image: &RgbImage, points: &PointAnnotation, cluster: &ClusterConfig) -> Result<TrainingLabels> {
    Ok(TrainingLabels {
        voronoi: voronoi_labels(points),
        cluster: cluster_labels(image, points, cluster)?,
        point: enlarged_point_labels(points),
    })
}

pub fn load_training_samples(items: &[DatasetItem], cluster: &ClusterConfig) -> Result<Vec<Sample>> {
    items
        .par_iter()
        .map(|item| {
            let image = dataset::read_rgb_png(&item.image)?;
            let points = dataset::read_points(item, image.height(), image.width())?;
            let labels = make_labels(&image, &points, cluster)?;
            Ok(Sample {
                name: item.name.clone(),
                image,
                labels,
            })
        })
        .collect()
}

fn load_validation(items: &[DatasetItem]) -> Result<Vec<ValidationSample>> {
    items
        .iter()
        .filter_map(|item| item.mask.as_ref().map(|m| (item, m)))
        .map(|(item, mask)| {
            Ok(ValidationSample {
                image: dataset::read_rgb_png(&item.image)?,
                foreground: foreground(&dataset::read_instance_png(mask)?),
            })
        })
        .collect()
}

fn select(items: &[DatasetItem], idx: &[usize]) -> Vec<DatasetItem> {
    idx.iter().map(|&i| items[i].clone()).collect()
}

/// Training and test portions of the dataset for the configured fold.
pub fn partition(items: &[DatasetItem], cfg: &PipelineConfig) -> Result<(Vec<DatasetItem>, Vec<DatasetItem>, Vec<DatasetItem>)> {
    match cfg.fold {
        None => Ok((items.to_vec(), Vec::new(), items.to_vec())),
        Some(f) => {
            let s = kfold_split(items.len(), cfg.folds, f, cfg.seed)?;
            Ok((select(items, &s.train), select(items, &s.val), select(items, &s.test)))
        }
    }
}

/// Trains a freshly initialised model on the configured split and saves it
/// with its loss log to `model_dir`.
pub fn train_on_dataset(cfg: &PipelineConfig) -> Result<TrainOutcome<f32>> {
    let items = dataset::scan_dataset(&cfg.dataset)?;
    if items.is_empty() {
        return Err(Error::EmptyDataset(format!("{} has no images", cfg.dataset.display())));
    }
    let (train_items, val_items, _) = partition(&items, cfg)?;
    let samples = load_training_samples(&train_items, &cfg.cluster)?;
    let val = load_validation(&val_items)?;
    let model = NetworkModel::<f32>::unet(cfg.depth, cfg.base_width, WeightInit::He { seed: cfg.seed });
    let outcome = train(&model, &samples, &val, &cfg.train_config())?;
    save_model(&outcome.model, &cfg.model_dir)?;
    fs::write(cfg.model_dir.join("loss_log.csv"), loss_log_csv(&outcome.log))?;
    Ok(outcome)
}

/// Cropped head probabilities (`1×2×H×W`) plus the trace of the padded
/// forward pass.
pub struct Inference {
    pub seg_probs: crate::Tensor<f32>,
    pub cc_probs: crate::Tensor<f32>,
    pub seg: Grid<f32>,
    pub cc: Grid<f32>,
    pub trace: ActivationTrace<f32>,
}

/// Positive-class plane of a `1×2×H×W` probability tensor.
pub fn positive_plane(t: &crate::Tensor<f32>) -> Result<Grid<f32>> {
    match t.nchw() {
        Some((1, 2, h, w)) => Grid::from_vec(h, w, t.plane(0, 1).to_vec()),
        _ => Err(Error::invalid(format!("expected 1x2xHxW probabilities, got {:?}", t.dims()))),
    }
}

pub fn infer(model: &NetworkModel<f32>, image: &RgbImage) -> Result<Inference> {
    let padded = image.pad_reflect_to_multiple(model.size_multiple());
    let out = forward(model, &padded.to_tensor(), Mode::Inference)?;
    let (h, w) = (image.height(), image.width());
    let seg_probs = crop_tensor(&out.y_seg, h, w);
    let cc_probs = crop_tensor(&out.y_cc, h, w);
    Ok(Inference {
        seg: positive_plane(&seg_probs)?,
        cc: positive_plane(&cc_probs)?,
        seg_probs,
        cc_probs,
        trace: out.trace,
    })
}

pub struct PostResult {
    pub base: InstanceMap,
    pub instances: InstanceMap,
    pub blobs: CcBlobs,
    pub expansion: Option<Expansion>,
}

/// Seg binarisation, cleanup and (per mode) splitting and expansion.
/// Expansion needs the model and the trace of the pass that produced `cc`.
pub fn postprocess_maps(
    explainer: Option<(&NetworkModel<f32>, &ActivationTrace<f32>)>,
    seg: &Grid<f32>,
    cc: &Grid<f32>,
    mode: PipelineMode,
    cfg: &PostprocessConfig,
) -> Result<PostResult> {
    cfg.validate()?;
    if seg.dims() != cc.dims() {
        return Err(Error::invalid(format!("seg map {:?} and cc map {:?} differ", seg.dims(), cc.dims())));
    }
    let base = morph_cleanup(&binarize(seg, cfg.seg_threshold), cfg.min_object_size);
    let blobs = condense_cc(cc, cfg);
    let (instances, expansion) = match mode {
        PipelineMode::Base => (base.clone(), None),
        PipelineMode::Split => (split_instances(&base, &blobs.points), None),
        PipelineMode::SplitExpand => {
            let (model, trace) = explainer
                .ok_or_else(|| Error::invalid("split_expand mode needs a model to explain CC blobs"))?;
            let split = split_instances(&base, &blobs.points);
            let e = expand_cc(&split, &blobs, model, trace, cfg)?;
            (e.instances.clone(), Some(e))
        }
    };
    Ok(PostResult {
        base,
        instances,
        blobs,
        expansion,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ImageSummary {
    pub name: String,
    pub instances: u32,
    pub cc_points: usize,
    pub expanded: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PipelineReport {
    pub mode: PipelineMode,
    pub images: Vec<ImageSummary>,
    pub metrics: Option<MetricsReport>,
}

pub const INSTANCES_DIR: &str = "instances";
pub const OVERLAYS_DIR: &str = "overlays";
pub const HEATMAPS_DIR: &str = "heatmaps";
pub const REPORT_FILE: &str = "report.json";

/// Post-processes the test portion with an existing model, writes instance
/// maps, overlays, heatmaps of expanded cells and `report.json`.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<PipelineReport> {
    let model: NetworkModel<f32> = load_model(&cfg.model_dir)?;
    let items = dataset::scan_dataset(&cfg.dataset)?;
    let (_, _, test) = if items.is_empty() {
        (Vec::new(), Vec::new(), Vec::new())
    } else {
        partition(&items, cfg)?
    };
    if test.is_empty() {
        return Err(Error::EmptyDataset(format!("no test images under {}", cfg.dataset.display())));
    }
    let out = &cfg.output_dir;
    for d in [INSTANCES_DIR, OVERLAYS_DIR, HEATMAPS_DIR] {
        fs::create_dir_all(out.join(d))?;
    }
    let results = test
        .par_iter()
        .map(|item| process_item(&model, item, cfg, out))
        .collect::<Result<Vec<_>>>()?;
    let images: Vec<ImageSummary> = results.iter().map(|r| r.0.clone()).collect();
    let scored: Vec<ImageScores> = results.into_iter().filter_map(|r| r.1).collect();
    let metrics = if scored.is_empty() {
        None
    } else {
        Some(MetricsReport::from_images(scored)?)
    };
    let report = PipelineReport {
        mode: cfg.mode,
        images,
        metrics,
    };
    let json = match &report.metrics {
        Some(m) => serde_json::to_vec_pretty(m)?,
        None => serde_json::to_vec_pretty(&report)?,
    };
    fs::write(out.join(REPORT_FILE), json)?;
    Ok(report)
}

fn process_item(
    model: &NetworkModel<f32>,
    item: &DatasetItem,
    cfg: &PipelineConfig,
    out: &Path,
) -> Result<(ImageSummary, Option<ImageScores>)> {
    let image = dataset::read_rgb_png(&item.image)?;
    let inf = infer(model, &image)?;
    let post = postprocess_maps(Some((model, &inf.trace)), &inf.seg, &inf.cc, cfg.mode, &cfg.postprocess)?;
    dataset::write_instance_png(out.join(INSTANCES_DIR).join(format!("{}.png", item.name)), &post.instances)?;
    let overlay = dataset::render_overlay(&image, &post.instances, &post.blobs.points);
    dataset::write_rgb_png(out.join(OVERLAYS_DIR).join(format!("{}.png", item.name)), &overlay)?;
    let mut expanded = 0;
    if let Some(e) = &post.expansion {
        for r in &e.records {
            if let CandidateOutcome::Added { id, .. } = r.outcome {
                expanded += 1;
                let p = out.join(HEATMAPS_DIR).join(format!("{}_cell{id}.png", item.name));
                dataset::write_heatmap_png(p, &r.heatmap)?;
            }
        }
    }
    let scores = match &item.mask {
        Some(m) => {
            let gt = dataset::read_instance_png(m)?;
            if gt.dims() != post.instances.dims() {
                return Err(Error::Format {
                    path: m.clone(),
                    detail: format!("mask is {:?}, image is {:?}", gt.dims(), post.instances.dims()),
                });
            }
            Some(ImageScores {
                name: item.name.clone(),
                scores: evaluate(&gt, &post.instances)?,
            })
        }
        None => None,
    };
    let summary = ImageSummary {
        name: item.name.clone(),
        instances: crate::postprocess::instance_count(&post.instances),
        cc_points: post.blobs.points.len(),
        expanded,
    };
    Ok((summary, scores))
}
