//! On-disk dataset layout and PNG conversions.
//!
//! A dataset root holds `images/*.png` (8-bit RGB), `points/*.csv` and
//! optionally `masks/*.png` (16-bit instance IDs). Files pair up by stem.

use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, ImageBuffer, Luma, RgbImage as PngRgb};

use crate::error::{Error, Result};
use crate::labels::{LabelMap, PointAnnotation};
use crate::postprocess::{CcPoint, InstanceMap};
use crate::raster::{Grid, RgbImage};

pub const IMAGES_DIR: &str = "images";
pub const POINTS_DIR: &str = "points";
pub const MASKS_DIR: &str = "masks";

pub fn read_rgb_png(path: impl AsRef<Path>) -> Result<RgbImage> {
    let img = open_image(path.as_ref())?.to_rgb8();
    let (w, h) = img.dimensions();
    RgbImage::new(
        h as usize,
        w as usize,
        img.into_raw().into_iter().map(|v| v as f32 / 255.0).collect(),
    )
}

fn open_image(path: &Path) -> Result<image::DynamicImage> {
    let bytes = crate::error::read_file(path)?;
    Ok(image::load_from_memory(&bytes)?)
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn write_rgb_png(path: impl AsRef<Path>, img: &RgbImage) -> Result<()> {
    let buf: PngRgb = ImageBuffer::from_raw(
        img.width() as u32,
        img.height() as u32,
        img.data().iter().map(|&v| to_u8(v)).collect(),
    )
    .expect("buffer size matches");
    buf.save(path.as_ref())?;
    Ok(())
}

/// Instance IDs from a 16-bit (or 8-bit) grayscale PNG.
pub fn read_instance_png(path: impl AsRef<Path>) -> Result<InstanceMap> {
    let img = open_image(path.as_ref())?.to_luma16();
    let (w, h) = img.dimensions();
    Grid::from_vec(h as usize, w as usize, img.into_raw().into_iter().map(u32::from).collect())
}

pub fn write_instance_png(path: impl AsRef<Path>, map: &InstanceMap) -> Result<()> {
    let path = path.as_ref();
    let mut data = Vec::with_capacity(map.data().len());
    for &v in map.data() {
        data.push(u16::try_from(v).map_err(|_| Error::Format {
            path: path.to_path_buf(),
            detail: format!("instance id {v} does not fit in 16 bits"),
        })?);
    }
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_raw(map.width() as u32, map.height() as u32, data).expect("buffer size matches");
    buf.save(path)?;
    Ok(())
}

pub fn write_label_png(path: impl AsRef<Path>, map: &LabelMap) -> Result<()> {
    let buf: GrayImage =
        ImageBuffer::from_raw(map.width() as u32, map.height() as u32, map.data().to_vec()).expect("buffer size matches");
    buf.save(path.as_ref())?;
    Ok(())
}

pub fn read_label_png(path: impl AsRef<Path>) -> Result<LabelMap> {
    let img = open_image(path.as_ref())?.to_luma8();
    let (w, h) = img.dimensions();
    let map = Grid::from_vec(h as usize, w as usize, img.into_raw())?;
    crate::labels::validate_label_map(&map)?;
    Ok(map)
}

/// Max-normalised 8-bit rendering; negative values map to 0.
pub fn write_heatmap_png(path: impl AsRef<Path>, heat: &Grid<f32>) -> Result<()> {
    let max = heat.data().iter().cloned().fold(0.0f32, f32::max);
    let data = heat
        .data()
        .iter()
        .map(|&v| if max > 0.0 { to_u8(v / max) } else { 0 })
        .collect();
    let buf: GrayImage = ImageBuffer::from_raw(heat.width() as u32, heat.height() as u32, data).expect("buffer size matches");
    buf.save(path.as_ref())?;
    Ok(())
}

fn instance_colour(id: u32) -> [u8; 3] {
    // golden-ratio hue walk, fixed saturation and value
    let hue = (id as f64 * 0.618_033_988_75).fract() * 6.0;
    let f = hue.fract();
    let (p, q, t) = (0.25, 1.0 - 0.75 * f, 0.25 + 0.75 * f);
    let (r, g, b) = match hue as u32 {
        0 => (1.0, t, p),
        1 => (q, 1.0, p),
        2 => (p, 1.0, t),
        3 => (p, q, 1.0),
        4 => (t, p, 1.0),
        _ => (1.0, p, q),
    };
    [r, g, b].map(|v: f64| (v * 255.0) as u8)
}

/// Image with instances tinted in per-instance colours, boundaries drawn
/// solid and CC points marked black.
pub fn render_overlay(image: &RgbImage, instances: &InstanceMap, points: &[CcPoint]) -> RgbImage {
    let mut out = image.clone();
    for y in 0..instances.height() {
        for x in 0..instances.width() {
            let id = instances.get(y, x);
            if id == 0 {
                continue;
            }
            let c = instance_colour(id).map(|v| v as f32 / 255.0);
            let edge = instances
                .neighbors(y, x, crate::raster::Connectivity::Four)
                .any(|(ny, nx)| instances.get(ny, nx) != id);
            let p = image.pixel(y, x);
            let mixed = if edge {
                c
            } else {
                [0, 1, 2].map(|i| 0.5 * p[i] + 0.5 * c[i])
            };
            out.set_pixel(y, x, mixed);
        }
    }
    for p in points {
        out.set_pixel(p.row, p.col, [0.0; 3]);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetItem {
    pub name: String,
    pub image: PathBuf,
    pub points: Option<PathBuf>,
    pub mask: Option<PathBuf>,
}

/// Images sorted by name, each with its optional points and mask files.
pub fn scan_dataset(root: impl AsRef<Path>) -> Result<Vec<DatasetItem>> {
    let root = root.as_ref();
    let dir = root.join(IMAGES_DIR);
    if !dir.is_dir() {
        return Err(Error::Format {
            path: dir,
            detail: "dataset has no images directory".into(),
        });
    }
    let mut items = Vec::new();
    for entry in fs::read_dir(&dir)? {
        let path = entry?.path();
        if path.extension().and_then(|e| e.to_str()) != Some("png") {
            continue;
        }
        let name = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
        let points = root.join(POINTS_DIR).join(format!("{name}.csv"));
        let mask = root.join(MASKS_DIR).join(format!("{name}.png"));
        items.push(DatasetItem {
            name,
            image: path,
            points: points.is_file().then_some(points),
            mask: mask.is_file().then_some(mask),
        });
    }
    items.sort_by(|a, b| a.name.cmp(&b.name));
    Ok(items)
}

pub fn read_points(item: &DatasetItem, height: usize, width: usize) -> Result<PointAnnotation> {
    let path = item.points.as_ref().ok_or_else(|| Error::Format {
        path: item.image.clone(),
        detail: format!("no points file for `{}`", item.name),
    })?;
    PointAnnotation::read_csv(path, height, width)
}

/// Writes a generated dataset in the on-disk layout.
pub fn write_synthetic(root: impl AsRef<Path>, data: &[crate::synth::SyntheticImage]) -> Result<()> {
    let root = root.as_ref();
    for d in [IMAGES_DIR, POINTS_DIR, MASKS_DIR] {
        fs::create_dir_all(root.join(d))?;
    }
    for s in data {
        write_rgb_png(root.join(IMAGES_DIR).join(format!("{}.png", s.name)), &s.image)?;
        s.points.write_csv(root.join(POINTS_DIR).join(format!("{}.csv", s.name)))?;
        write_instance_png(root.join(MASKS_DIR).join(format!("{}.png", s.name)), &s.instances)?;
    }
    Ok(())
}
