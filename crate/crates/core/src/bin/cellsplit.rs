use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use cellsplit::dataset::{self, IMAGES_DIR};
use cellsplit::labels::ClusterConfig;
use cellsplit::lrp::{explain, OutputTarget};
use cellsplit::metrics::{evaluate, ImageScores, MetricsReport};
use cellsplit::nn::{load_model, read_setn, write_setn, NetworkModel};
use cellsplit::pipeline::{
    self, infer, kfold_split, make_labels, positive_plane, postprocess_maps, PipelineConfig, PipelineMode,
};
use cellsplit::postprocess::CandidateOutcome;
use cellsplit::raster::Grid;
use cellsplit::synth::{generate_synthetic, SyntheticSpec};
use cellsplit::{Error, Result};

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;

#[derive(Parser, Debug)]
#[command(name = "cellsplit", version, about = "Cell instance segmentation from dot annotations")]
struct Cli {
    /// JSON configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset (images, points, masks).
    Synth(SynthArgs),
    /// Write Voronoi, cluster and point label maps for a dataset.
    Labels(LabelsArgs),
    /// Train a model from point annotations.
    Train(TrainArgs),
    /// Write cropped head probabilities as `<name>_seg.setn` / `<name>_cc.setn`.
    Infer(InferArgs),
    /// Turn stored probabilities into instance maps.
    Post(PostArgs),
    /// Input heatmap for cell-centre pixels of one image.
    Explain(ExplainArgs),
    /// Score predicted instance maps against ground truth.
    Eval(EvalArgs),
    /// Train (unless skipped), post-process the test images and evaluate.
    Pipeline(PipelineArgs),
    /// Print the k-fold train/val/test indices.
    Splits(SplitsArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    count: Option<usize>,
    #[arg(long)]
    height: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    clump_fraction: Option<f64>,
    #[arg(long)]
    small_fraction: Option<f64>,
    #[arg(long)]
    noise: Option<f64>,
}

#[derive(Args, Debug)]
struct LabelsArgs {
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Clone)]
struct ModelArgs {
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    model_dir: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainOpts {
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    patch_size: Option<usize>,
    #[arg(long)]
    fold: Option<usize>,
    #[arg(long)]
    depth: Option<usize>,
    #[arg(long)]
    base_width: Option<usize>,
    /// Enable the feature re-weighting loss.
    #[arg(long)]
    frw: bool,
    #[arg(long)]
    frw_layer: Option<String>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    paths: ModelArgs,
    #[command(flatten)]
    opts: TrainOpts,
}

#[derive(Args, Debug)]
struct InferArgs {
    #[command(flatten)]
    paths: ModelArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct PostArgs {
    #[command(flatten)]
    paths: ModelArgs,
    /// Directory with `*_seg.setn` and `*_cc.setn`.
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    mode: Option<PipelineMode>,
}

#[derive(Args, Debug)]
struct ExplainArgs {
    #[arg(long)]
    model_dir: Option<PathBuf>,
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Explain only the blob containing this pixel (`row,col`).
    #[arg(long, value_parser = parse_pixel)]
    pixel: Option<(usize, usize)>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    /// Report path (default `<pred>/report.json`).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct PipelineArgs {
    #[command(flatten)]
    paths: ModelArgs,
    #[command(flatten)]
    opts: TrainOpts,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    mode: Option<PipelineMode>,
    /// Reuse the model already in the model directory.
    #[arg(long)]
    skip_train: bool,
}

#[derive(Args, Debug)]
struct SplitsArgs {
    /// Dataset size; taken from `--dataset` when omitted.
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    k: usize,
    /// One fold; all folds when omitted.
    #[arg(long)]
    fold: Option<usize>,
}

fn parse_pixel(s: &str) -> std::result::Result<(usize, usize), String> {
    let (r, c) = s.split_once(',').ok_or("expected row,col")?;
    Ok((
        r.trim().parse().map_err(|e| format!("row: {e}"))?,
        c.trim().parse().map_err(|e| format!("col: {e}"))?,
    ))
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(default)]
struct FileConfig {
    #[serde(flatten)]
    pipeline: PipelineConfig,
    synth: SyntheticSpec,
}

fn load_config(cli: &Cli) -> Result<FileConfig> {
    let mut cfg = match &cli.config {
        Some(p) => serde_json::from_slice(&fs::read(p)?)?,
        None => FileConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.pipeline.seed = s;
        cfg.pipeline.cluster.seed = s;
        cfg.synth.seed = s;
    }
    Ok(cfg)
}

fn apply_paths(cfg: &mut PipelineConfig, p: &ModelArgs) {
    if let Some(d) = &p.dataset {
        cfg.dataset = d.clone();
    }
    if let Some(d) = &p.model_dir {
        cfg.model_dir = d.clone();
    }
}

fn apply_train(cfg: &mut PipelineConfig, o: &TrainOpts) {
    cfg.epochs = o.epochs.unwrap_or(cfg.epochs);
    cfg.patch_size = o.patch_size.or(cfg.patch_size);
    cfg.fold = o.fold.or(cfg.fold);
    cfg.depth = o.depth.unwrap_or(cfg.depth);
    cfg.base_width = o.base_width.unwrap_or(cfg.base_width);
    if o.frw {
        cfg.frw.enabled = true;
    }
    if let Some(l) = &o.frw_layer {
        cfg.frw.layer = l.clone();
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, serde_json::to_vec_pretty(value)?)?;
    Ok(())
}

fn run(cli: Cli, file: FileConfig) -> Result<()> {
    let mut cfg = file.pipeline;
    match cli.command {
        Command::Synth(a) => {
            let mut spec = file.synth;
            spec.image_count = a.count.unwrap_or(spec.image_count);
            spec.height = a.height.unwrap_or(spec.height);
            spec.width = a.width.unwrap_or(spec.width);
            spec.clump_fraction = a.clump_fraction.unwrap_or(spec.clump_fraction);
            spec.small_fraction = a.small_fraction.unwrap_or(spec.small_fraction);
            spec.noise = a.noise.unwrap_or(spec.noise);
            let data = generate_synthetic(&spec)?;
            dataset::write_synthetic(&a.out, &data)?;
            eprintln!("wrote {} images to {}", data.len(), a.out.display());
        }
        Command::Labels(a) => {
            if let Some(d) = a.dataset {
                cfg.dataset = d;
            }
            labels_command(&cfg.dataset, &a.out, &cfg.cluster)?;
        }
        Command::Train(a) => {
            apply_paths(&mut cfg, &a.paths);
            apply_train(&mut cfg, &a.opts);
            let outcome = pipeline::train_on_dataset(&cfg)?;
            if let Some((epoch, f1)) = outcome.selected {
                eprintln!("selected epoch {epoch} (validation F1 {f1:.4})");
            }
            eprintln!("model saved to {}", cfg.model_dir.display());
        }
        Command::Infer(a) => {
            apply_paths(&mut cfg, &a.paths);
            let model: NetworkModel<f32> = load_model(&cfg.model_dir)?;
            let items = dataset::scan_dataset(&cfg.dataset)?;
            fs::create_dir_all(&a.out)?;
            items.par_iter().try_for_each(|item| -> Result<()> {
                let inf = infer(&model, &dataset::read_rgb_png(&item.image)?)?;
                write_setn(a.out.join(format!("{}_seg.setn", item.name)), &inf.seg_probs)?;
                write_setn(a.out.join(format!("{}_cc.setn", item.name)), &inf.cc_probs)
            })?;
            eprintln!("wrote {} prediction pairs to {}", items.len(), a.out.display());
        }
        Command::Post(a) => {
            apply_paths(&mut cfg, &a.paths);
            if let Some(m) = a.mode {
                cfg.mode = m;
            }
            post_command(&cfg, &a.pred, &a.out)?;
        }
        Command::Explain(a) => {
            if let Some(d) = a.model_dir {
                cfg.model_dir = d;
            }
            explain_command(&cfg, &a.image, &a.out, a.pixel)?;
        }
        Command::Eval(a) => {
            let out = a.out.unwrap_or_else(|| a.pred.join(pipeline::REPORT_FILE));
            let report = eval_command(&a.pred, &a.gt)?;
            write_json(&out, &report)?;
            println!("{}", serde_json::to_string_pretty(&report.mean)?);
        }
        Command::Pipeline(a) => {
            apply_paths(&mut cfg, &a.paths);
            apply_train(&mut cfg, &a.opts);
            if let Some(o) = a.out {
                cfg.output_dir = o;
            }
            if let Some(m) = a.mode {
                cfg.mode = m;
            }
            if !a.skip_train {
                pipeline::train_on_dataset(&cfg)?;
            }
            let report = pipeline::run_pipeline(&cfg)?;
            match &report.metrics {
                Some(m) => println!("{}", serde_json::to_string_pretty(&m.mean)?),
                None => eprintln!("no ground-truth masks; wrote instance maps only"),
            }
        }
        Command::Splits(a) => {
            let n = match (a.n, &a.dataset) {
                (Some(n), _) => n,
                (None, Some(d)) => dataset::scan_dataset(d)?.len(),
                (None, None) => dataset::scan_dataset(&cfg.dataset)?.len(),
            };
            let folds: Vec<usize> = match a.fold {
                Some(f) => vec![f],
                None => (0..a.k).collect(),
            };
            let splits = folds
                .into_iter()
                .map(|f| kfold_split(n, a.k, f, cfg.seed))
                .collect::<Result<Vec<_>>>()?;
            println!("{}", serde_json::to_string_pretty(&splits)?);
        }
    }
    Ok(())
}

fn labels_command(root: &Path, out: &Path, cluster: &ClusterConfig) -> Result<()> {
    let items = dataset::scan_dataset(root)?;
    fs::create_dir_all(out)?;
    items.par_iter().try_for_each(|item| -> Result<()> {
        let image = dataset::read_rgb_png(&item.image)?;
        let points = dataset::read_points(item, image.height(), image.width())?;
        let l = make_labels(&image, &points, cluster)?;
        dataset::write_label_png(out.join(format!("{}_voronoi.png", item.name)), &l.voronoi)?;
        dataset::write_label_png(out.join(format!("{}_cluster.png", item.name)), &l.cluster)?;
        dataset::write_label_png(out.join(format!("{}_point.png", item.name)), &l.point)
    })?;
    eprintln!("labelled {} images into {}", items.len(), out.display());
    Ok(())
}

fn post_command(cfg: &PipelineConfig, pred: &Path, out: &Path) -> Result<()> {
    let mut names = Vec::new();
    for entry in fs::read_dir(pred)? {
        let path = entry?.path();
        let file = path.file_name().and_then(|f| f.to_str()).unwrap_or_default();
        if let Some(stem) = file.strip_suffix("_seg.setn") {
            names.push(stem.to_string());
        }
    }
    names.sort();
    if names.is_empty() {
        return Err(Error::EmptyDataset(format!("no *_seg.setn files in {}", pred.display())));
    }
    let model: Option<NetworkModel<f32>> = match cfg.mode {
        PipelineMode::SplitExpand => Some(load_model(&cfg.model_dir)?),
        _ => None,
    };
    for d in [pipeline::INSTANCES_DIR, pipeline::HEATMAPS_DIR] {
        fs::create_dir_all(out.join(d))?;
    }
    names.par_iter().try_for_each(|name| -> Result<()> {
        let seg = positive_plane(&read_setn(pred.join(format!("{name}_seg.setn")))?)?;
        let cc = positive_plane(&read_setn(pred.join(format!("{name}_cc.setn")))?)?;
        let post = match &model {
            Some(m) => {
                // the trace for LRP comes from re-running the image
                let image = dataset::read_rgb_png(cfg.dataset.join(IMAGES_DIR).join(format!("{name}.png")))?;
                if (image.height(), image.width()) != seg.dims() {
                    return Err(Error::invalid(format!(
                        "{name}: image is {}x{}, predictions are {:?}",
                        image.height(),
                        image.width(),
                        seg.dims()
                    )));
                }
                let inf = infer(m, &image)?;
                postprocess_maps(Some((m, &inf.trace)), &seg, &cc, cfg.mode, &cfg.postprocess)?
            }
            None => postprocess_maps(None, &seg, &cc, cfg.mode, &cfg.postprocess)?,
        };
        dataset::write_instance_png(out.join(pipeline::INSTANCES_DIR).join(format!("{name}.png")), &post.instances)?;
        if let Some(e) = &post.expansion {
            for r in &e.records {
                if let CandidateOutcome::Added { id, .. } = r.outcome {
                    let p = out.join(pipeline::HEATMAPS_DIR).join(format!("{name}_cell{id}.png"));
                    dataset::write_heatmap_png(p, &r.heatmap)?;
                }
            }
        }
        Ok(())
    })?;
    eprintln!("post-processed {} images into {}", names.len(), out.display());
    Ok(())
}

fn explain_command(cfg: &PipelineConfig, image: &Path, out: &Path, pixel: Option<(usize, usize)>) -> Result<()> {
    let model: NetworkModel<f32> = load_model(&cfg.model_dir)?;
    let img = dataset::read_rgb_png(image)?;
    let inf = infer(&model, &img)?;
    let blobs = cellsplit::postprocess::condense_cc(&inf.cc, &cfg.postprocess);
    let pixels: BTreeSet<(usize, usize)> = match pixel {
        Some((r, c)) => {
            if r >= img.height() || c >= img.width() {
                return Err(Error::invalid(format!("pixel ({r},{c}) outside {}x{}", img.height(), img.width())));
            }
            match blobs.map.get(r, c) {
                0 => [(r, c)].into(),
                id => blobs.blob_pixels(id),
            }
        }
        None => (1..=blobs.points.len() as u32).flat_map(|id| blobs.blob_pixels(id)).collect(),
    };
    if pixels.is_empty() {
        return Err(Error::EmptyTarget);
    }
    let heat = explain(&model, &inf.trace, &OutputTarget::cc_positive(pixels), None)?.into_tensor();
    let tw = heat.dims()[1];
    let grid = Grid::from_fn(img.height(), img.width(), |y, x| heat.data()[y * tw + x]);
    if let Some(dir) = out.parent() {
        fs::create_dir_all(dir)?;
    }
    dataset::write_heatmap_png(out, &grid)
}

fn eval_command(pred: &Path, gt: &Path) -> Result<MetricsReport> {
    let mut pairs = Vec::new();
    for entry in fs::read_dir(gt)? {
        let path = entry?.path();
        if path.extension().and_then(|e| e.to_str()) != Some("png") {
            continue;
        }
        let name = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
        let p = pred.join(format!("{name}.png"));
        if !p.is_file() {
            return Err(Error::Format {
                path: p,
                detail: format!("no prediction for ground truth `{name}`"),
            });
        }
        pairs.push((name, path, p));
    }
    let scores = pairs
        .par_iter()
        .map(|(name, g, p)| {
            Ok(ImageScores {
                name: name.clone(),
                scores: evaluate(&dataset::read_instance_png(g)?, &dataset::read_instance_png(p)?)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    MetricsReport::from_images(scores)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_USAGE) } else { ExitCode::SUCCESS };
        }
    };
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_USAGE);
        }
    }
    // an unreadable config is a usage error; everything after is data/model
    let file = match load_config(&cli) {
        Ok(f) => f,
        Err(e) => {
            eprintln!("error: config: {e}");
            return ExitCode::from(EXIT_USAGE);
        }
    };
    match run(cli, file) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_DATA)
        }
    }
}
