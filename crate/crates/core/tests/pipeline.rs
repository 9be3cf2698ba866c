//! End-to-end runs over a small synthetic dataset on disk.

use std::fs;
use std::path::Path;
use std::sync::OnceLock;

use cellsplit::dataset::{read_instance_png, write_instance_png, write_synthetic, IMAGES_DIR, MASKS_DIR};
use cellsplit::pipeline::{run_pipeline, train_on_dataset, PipelineConfig, PipelineMode, INSTANCES_DIR, REPORT_FILE};
use cellsplit::postprocess::{instance_pixels, InstanceMap};
use cellsplit::raster::Grid;
use cellsplit::synth::{generate_synthetic, SyntheticSpec};
use cellsplit::Error;
use tempfile::TempDir;

struct Fixture {
    root: TempDir,
    cfg: PipelineConfig,
}

fn config(root: &Path) -> PipelineConfig {
    PipelineConfig {
        dataset: root.join("data"),
        model_dir: root.join("model"),
        output_dir: root.join("out"),
        epochs: 40,
        depth: 2,
        base_width: 8,
        seed: 5,
        ..Default::default()
    }
}

/// Dataset plus a model trained once for every test in this file.
fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let root = tempfile::tempdir().unwrap();
        let spec = SyntheticSpec {
            image_count: 6,
            height: 48,
            width: 48,
            cells: (3, 6),
            clump_fraction: 0.4,
            seed: 11,
            ..Default::default()
        };
        write_synthetic(root.path().join("data"), &generate_synthetic(&spec).unwrap()).unwrap();
        let cfg = config(root.path());
        let outcome = train_on_dataset(&cfg).unwrap();
        assert_eq!(outcome.log.len(), cfg.epochs);
        Fixture { root, cfg }
    })
}

fn run(mode: PipelineMode, out: &str) -> (PipelineConfig, Vec<InstanceMap>) {
    let f = fixture();
    let cfg = PipelineConfig {
        mode,
        output_dir: f.root.path().join(out),
        ..f.cfg.clone()
    };
    let report = run_pipeline(&cfg).unwrap();
    assert_eq!(report.images.len(), 6);
    assert!(report.metrics.is_some());
    let maps = report
        .images
        .iter()
        .map(|s| read_instance_png(cfg.output_dir.join(INSTANCES_DIR).join(format!("{}.png", s.name))).unwrap())
        .collect();
    (cfg, maps)
}

#[test]
fn modes_refine_each_other() {
    let (_, base) = run(PipelineMode::Base, "base");
    let (_, split) = run(PipelineMode::Split, "split");
    let (_, full) = run(PipelineMode::SplitExpand, "full");
    let mut found = 0;
    for ((b, s), e) in base.iter().zip(&split).zip(&full) {
        // split repartitions the same foreground
        for (bv, sv) in b.data().iter().zip(s.data()) {
            assert_eq!(*bv == 0, *sv == 0);
        }
        for pixels in instance_pixels(s).values() {
            let parents: std::collections::BTreeSet<u32> = pixels.iter().map(|&(y, x)| b.get(y, x)).collect();
            assert_eq!(parents.len(), 1);
        }
        // expansion leaves the split instances alone and only adds
        for (sv, ev) in s.data().iter().zip(e.data()) {
            if *sv != 0 {
                assert_eq!(sv, ev);
            }
        }
        found += instance_pixels(b).len();
    }
    assert!(found > 0, "the trained model found no cells at all");
}

#[test]
fn runs_are_reproducible() {
    let (a, _) = run(PipelineMode::SplitExpand, "again_a");
    let (b, _) = run(PipelineMode::SplitExpand, "again_b");
    for sub in [INSTANCES_DIR, "overlays"] {
        let mut names: Vec<_> = fs::read_dir(a.output_dir.join(sub)).unwrap().map(|e| e.unwrap().file_name()).collect();
        names.sort();
        for n in names {
            assert_eq!(
                fs::read(a.output_dir.join(sub).join(&n)).unwrap(),
                fs::read(b.output_dir.join(sub).join(&n)).unwrap(),
                "{sub}/{n:?}"
            );
        }
    }
    assert_eq!(
        fs::read(a.output_dir.join(REPORT_FILE)).unwrap(),
        fs::read(b.output_dir.join(REPORT_FILE)).unwrap()
    );
}

#[test]
fn training_is_reproducible() {
    let f = fixture();
    let cfg = PipelineConfig {
        model_dir: f.root.path().join("model_again"),
        ..f.cfg.clone()
    };
    train_on_dataset(&cfg).unwrap();
    for file in ["weights.bin", "topology.json", "loss_log.csv"] {
        assert_eq!(
            fs::read(f.cfg.model_dir.join(file)).unwrap(),
            fs::read(cfg.model_dir.join(file)).unwrap(),
            "{file}"
        );
    }
}

#[test]
fn empty_dataset_is_rejected() {
    let f = fixture();
    let root = tempfile::tempdir().unwrap();
    fs::create_dir_all(root.path().join(IMAGES_DIR)).unwrap();
    let cfg = PipelineConfig {
        dataset: root.path().to_path_buf(),
        output_dir: root.path().join("out"),
        ..f.cfg.clone()
    };
    assert!(matches!(run_pipeline(&cfg), Err(Error::EmptyDataset(_))));
    assert!(matches!(train_on_dataset(&cfg), Err(Error::EmptyDataset(_))));
}

#[test]
fn mismatched_mask_is_a_format_error() {
    let f = fixture();
    let root = tempfile::tempdir().unwrap();
    let data = root.path().join("data");
    for sub in [IMAGES_DIR, "points", MASKS_DIR] {
        fs::create_dir_all(data.join(sub)).unwrap();
        for e in fs::read_dir(f.cfg.dataset.join(sub)).unwrap() {
            let e = e.unwrap();
            fs::copy(e.path(), data.join(sub).join(e.file_name())).unwrap();
        }
    }
    let victim = fs::read_dir(data.join(MASKS_DIR)).unwrap().next().unwrap().unwrap().path();
    write_instance_png(&victim, &Grid::filled(8, 8, 0u32)).unwrap();
    let cfg = PipelineConfig {
        dataset: data,
        output_dir: root.path().join("out"),
        ..f.cfg.clone()
    };
    match run_pipeline(&cfg) {
        Err(Error::Format { path, .. }) => assert_eq!(path, victim),
        other => panic!("expected a format error, got {other:?}"),
    }
}

#[test]
fn missing_model_names_the_path() {
    let f = fixture();
    let cfg = PipelineConfig {
        model_dir: f.root.path().join("no_model_here"),
        ..f.cfg.clone()
    };
    let err = run_pipeline(&cfg).unwrap_err();
    assert!(err.to_string().contains("no_model_here"), "{err}");
}
