//! C ABI over the cellsplit engine.
//!
//! Every fallible call returns a [`CsStatus`]; on failure the message is
//! available from [`cs_last_error_message`] on the same thread. Images are
//! row-major `H×W×3` floats in `[0, 1]`; maps are row-major `H×W`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use cellsplit::metrics::evaluate;
use cellsplit::nn::{load_model, NetworkModel};
use cellsplit::pipeline::{infer, postprocess_maps, PipelineMode};
use cellsplit::postprocess::{instance_count, PostprocessConfig};
use cellsplit::raster::{Grid, RgbImage};
use cellsplit::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CsStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    /// Malformed file contents (PNG, JSON, SETN).
    Format = 4,
    /// Model topology or weights unusable.
    Model = 5,
    /// Tensor or image dimensions do not fit.
    Shape = 6,
    /// Data-dependent failure such as an empty target.
    Data = 7,
    Panic = 8,
}

/// Values accepted by the `mode` argument of [`cs_postprocess`].
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CsMode {
    Base = 0,
    Split = 1,
    SplitExpand = 2,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CsPostprocessConfig {
    pub cc_confidence: f64,
    pub heatmap_threshold: f64,
    pub overlap_threshold: f64,
    pub min_object_size: usize,
    pub seg_threshold: f64,
}

impl From<CsPostprocessConfig> for PostprocessConfig {
    fn from(c: CsPostprocessConfig) -> Self {
        Self {
            cc_confidence: c.cc_confidence,
            heatmap_threshold: c.heatmap_threshold,
            overlap_threshold: c.overlap_threshold,
            min_object_size: c.min_object_size,
            seg_threshold: c.seg_threshold,
        }
    }
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct CsScores {
    pub acc: f64,
    pub pixel_f1: f64,
    pub dice_obj: f64,
    pub aji: f64,
}

/// Loaded network; create with [`cs_model_load`], release with [`cs_model_free`].
pub struct CsModel {
    inner: NetworkModel<f32>,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> CsStatus {
    match e {
        Error::Io(_) => CsStatus::Io,
        Error::Format { .. } | Error::Json(_) | Error::Image(_) => CsStatus::Format,
        Error::BadMagic { .. }
        | Error::UnsupportedVersion(_)
        | Error::UnsupportedDtype(_)
        | Error::MissingWeight(_)
        | Error::TruncatedWeights(_)
        | Error::Topology(_)
        | Error::UnknownLayer(_) => CsStatus::Model,
        Error::Shape { .. } | Error::InputSize { .. } | Error::TensorLength { .. } | Error::WeightDims { .. } => {
            CsStatus::Shape
        }
        Error::InvalidArgument(_) => CsStatus::InvalidArgument,
        _ => CsStatus::Data,
    }
}

enum Failure {
    Null(&'static str),
    Invalid(String),
    Engine(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Engine(e)
    }
}

/// Runs `f`, recording any failure (including a panic) as the last error.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> CsStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => CsStatus::Ok,
        Ok(Err(Failure::Null(what))) => {
            set_error(format!("{what} is null"));
            CsStatus::NullPointer
        }
        Ok(Err(Failure::Invalid(msg))) => {
            set_error(msg);
            CsStatus::InvalidArgument
        }
        Ok(Err(Failure::Engine(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Err(_) => {
            set_error("internal panic".into());
            CsStatus::Panic
        }
    }
}

fn non_null<T>(p: *const T, what: &'static str) -> Result<*const T, Failure> {
    if p.is_null() {
        Err(Failure::Null(what))
    } else {
        Ok(p)
    }
}

fn pixel_count(h: usize, w: usize) -> Result<usize, Failure> {
    if h == 0 || w == 0 {
        return Err(Failure::Invalid(format!("image size {h}x{w} is empty")));
    }
    h.checked_mul(w)
        .filter(|n| n.checked_mul(3).is_some())
        .ok_or_else(|| Failure::Invalid(format!("image size {h}x{w} overflows")))
}

/// # Safety
/// `rgb` must point to `h * w * 3` readable floats.
unsafe fn read_image(rgb: *const f32, h: usize, w: usize) -> Result<RgbImage, Failure> {
    let n = pixel_count(h, w)?;
    let data = std::slice::from_raw_parts(non_null(rgb, "rgb")?, n * 3).to_vec();
    Ok(RgbImage::new(h, w, data)?)
}

/// # Safety
/// `p` must point to `h * w` readable floats.
unsafe fn read_map(p: *const f32, h: usize, w: usize, what: &'static str) -> Result<Grid<f32>, Failure> {
    let n = pixel_count(h, w)?;
    Ok(Grid::from_vec(h, w, std::slice::from_raw_parts(non_null(p, what)?, n).to_vec())?)
}

/// # Safety
/// `p` must point to `h * w` readable values.
unsafe fn read_instances(p: *const u32, h: usize, w: usize, what: &'static str) -> Result<Grid<u32>, Failure> {
    let n = pixel_count(h, w)?;
    Ok(Grid::from_vec(h, w, std::slice::from_raw_parts(non_null(p, what)?, n).to_vec())?)
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn cs_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread, or NULL. Valid until the
/// next call into the library on the same thread.
#[no_mangle]
pub extern "C" fn cs_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Reads `topology.json` + `weights.bin` from `dir` into `*out`.
///
/// # Safety
/// `dir` must be a NUL-terminated path; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cs_model_load(dir: *const c_char, out: *mut *mut CsModel) -> CsStatus {
    guard(|| {
        let dir = CStr::from_ptr(non_null(dir, "dir")?);
        let out = non_null(out, "out")? as *mut *mut CsModel;
        let dir = dir
            .to_str()
            .map_err(|_| Failure::Invalid("model path is not UTF-8".into()))?;
        let inner = load_model(Path::new(dir))?;
        *out = Box::into_raw(Box::new(CsModel { inner }));
        Ok(())
    })
}

/// # Safety
/// `model` must come from [`cs_model_load`] and not be used afterwards. NULL
/// is ignored.
#[no_mangle]
pub unsafe extern "C" fn cs_model_free(model: *mut CsModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Side length that inputs are padded to a multiple of; 0 for NULL.
///
/// # Safety
/// `model` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn cs_model_size_multiple(model: *const CsModel) -> usize {
    model.as_ref().map_or(0, |m| m.inner.size_multiple())
}

/// Cell probability (`seg_out`) and cell-centre probability (`cc_out`) per
/// pixel. Either output may be NULL.
///
/// # Safety
/// `rgb` holds `h * w * 3` floats; non-NULL outputs hold `h * w` floats.
#[no_mangle]
pub unsafe extern "C" fn cs_forward(
    model: *const CsModel,
    rgb: *const f32,
    height: usize,
    width: usize,
    seg_out: *mut f32,
    cc_out: *mut f32,
) -> CsStatus {
    guard(|| {
        let model = &(*non_null(model, "model")?).inner;
        let image = read_image(rgb, height, width)?;
        let inf = infer(model, &image)?;
        for (dst, src) in [(seg_out, &inf.seg), (cc_out, &inf.cc)] {
            if !dst.is_null() {
                std::slice::from_raw_parts_mut(dst, src.data().len()).copy_from_slice(src.data());
            }
        }
        Ok(())
    })
}

#[no_mangle]
pub extern "C" fn cs_postprocess_config_default() -> CsPostprocessConfig {
    let d = PostprocessConfig::default();
    CsPostprocessConfig {
        cc_confidence: d.cc_confidence,
        heatmap_threshold: d.heatmap_threshold,
        overlap_threshold: d.overlap_threshold,
        min_object_size: d.min_object_size,
        seg_threshold: d.seg_threshold,
    }
}

/// Instance map from seg and CC probability maps. `mode` is a [`CsMode`]
/// value; `CS_MODE_SPLIT_EXPAND` also needs `model` and the `rgb` image the
/// maps came from. `config` may be NULL for defaults, `count_out` may be NULL.
///
/// # Safety
/// Maps and `instances_out` hold `h * w` elements, `rgb` `h * w * 3`.
#[no_mangle]
pub unsafe extern "C" fn cs_postprocess(
    model: *const CsModel,
    rgb: *const f32,
    seg: *const f32,
    cc: *const f32,
    height: usize,
    width: usize,
    mode: u32,
    config: *const CsPostprocessConfig,
    instances_out: *mut u32,
    count_out: *mut u32,
) -> CsStatus {
    guard(|| {
        let mode = match mode {
            0 => PipelineMode::Base,
            1 => PipelineMode::Split,
            2 => PipelineMode::SplitExpand,
            m => return Err(Failure::Invalid(format!("unknown mode {m}"))),
        };
        let cfg: PostprocessConfig = config.as_ref().map_or_else(PostprocessConfig::default, |c| (*c).into());
        let seg = read_map(seg, height, width, "seg")?;
        let cc = read_map(cc, height, width, "cc")?;
        let out = non_null(instances_out, "instances_out")? as *mut u32;
        let post = if mode == PipelineMode::SplitExpand {
            let model = &(*non_null(model, "model")?).inner;
            let inf = infer(model, &read_image(rgb, height, width)?)?;
            postprocess_maps(Some((model, &inf.trace)), &seg, &cc, mode, &cfg)?
        } else {
            postprocess_maps(None, &seg, &cc, mode, &cfg)?
        };
        std::slice::from_raw_parts_mut(out, height * width).copy_from_slice(post.instances.data());
        if !count_out.is_null() {
            *count_out = instance_count(&post.instances);
        }
        Ok(())
    })
}

/// Pixel and object scores of `pred` against `gt` (instance IDs, 0 =
/// background).
///
/// # Safety
/// `gt` and `pred` hold `h * w` values; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cs_metrics(
    gt: *const u32,
    pred: *const u32,
    height: usize,
    width: usize,
    out: *mut CsScores,
) -> CsStatus {
    guard(|| {
        let gt = read_instances(gt, height, width, "gt")?;
        let pred = read_instances(pred, height, width, "pred")?;
        let out = non_null(out, "out")? as *mut CsScores;
        let s = evaluate(&gt, &pred)?;
        *out = CsScores {
            acc: s.acc,
            pixel_f1: s.pixel_f1,
            dice_obj: s.dice_obj,
            aji: s.aji,
        };
        Ok(())
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn engine_errors_map_to_codes() {
        assert_eq!(status_of(&Error::MissingWeight("x".into())), CsStatus::Model);
        assert_eq!(status_of(&Error::Shape { layer: "enc1".into(), detail: "bad".into() }), CsStatus::Shape);
        assert_eq!(status_of(&Error::invalid("bad")), CsStatus::InvalidArgument);
        assert_eq!(status_of(&Error::EmptyTarget), CsStatus::Data);
    }

    #[test]
    fn panics_become_a_status() {
        assert_eq!(guard(|| panic!("boom")), CsStatus::Panic);
        assert!(!cs_last_error_message().is_null());
        assert_eq!(guard(|| Ok(())), CsStatus::Ok);
        assert!(cs_last_error_message().is_null());
    }
}
