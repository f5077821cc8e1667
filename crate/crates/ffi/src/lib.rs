//! C ABI over the core library.
//!
//! Objects are opaque handles created by `ts_*_new`/`ts_*_load`/`ts_*_generate`
//! and released with the matching `ts_*_free`. Every fallible call returns a
//! [`TsStatus`]; on failure [`ts_last_error`] describes the problem for the
//! calling thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use terra_ssl::checkpoint;
use terra_ssl::dataset::{self, NormMode};
use terra_ssl::dem_synth::{self, SceneBundle, SynthConfig};
use terra_ssl::metrics;
use terra_ssl::model::{self, Head, ModelConfig, ModelParameters, Mode};
use terra_ssl::nn::Tensor;
use terra_ssl::raster::{Grid, Mask};
use terra_ssl::Error;

/// Result codes.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TsStatus {
    Ok = 0,
    Config = 1,
    Missing = 2,
    Numeric = 3,
    Shape = 4,
    Data = 5,
    NullArgument = 6,
    Panic = 7,
    Other = 8,
}

/// Which raster of a scene to copy out.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TsRaster {
    Dtm = 0,
    Dsm = 1,
    Ndsm = 2,
}

/// Opaque generated scene.
pub struct TsScene(SceneBundle);

/// Opaque model parameters.
pub struct TsModel(ModelParameters<f32>);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> TsStatus {
    match e {
        Error::Config(_) | Error::Contract(_) | Error::Generation { .. } | Error::Transfer(_) => TsStatus::Config,
        Error::Missing(_) => TsStatus::Missing,
        Error::Numeric(_) => TsStatus::Numeric,
        Error::Shape(_) => TsStatus::Shape,
        Error::Data(_) | Error::Ingest(_) | Error::Format { .. } => TsStatus::Data,
        _ => if e.exit_code() == 2 { TsStatus::Missing } else { TsStatus::Other },
    }
}

fn guard(f: impl FnOnce() -> Result<(), (TsStatus, String)>) -> TsStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => TsStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            TsStatus::Panic
        }
    }
}

fn lift(e: Error) -> (TsStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (TsStatus, String) {
    (TsStatus::NullArgument, format!("`{what}` is null"))
}

/// Copies the calling thread's last error message into `buf` (NUL
/// terminated, truncated to `len`). Returns the full message length, or 0
/// when there is no error.
///
/// # Safety
/// `buf` must be valid for `len` bytes or null.
#[no_mangle]
pub unsafe extern "C" fn ts_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let e = e.borrow();
        let Some(msg) = e.as_ref() else { return 0 };
        let bytes = msg.as_bytes();
        if !buf.is_null() && len > 0 {
            let n = bytes.len().min(len - 1);
            ptr::copy_nonoverlapping(bytes.as_ptr() as *const c_char, buf, n);
            *buf.add(n) = 0;
        }
        bytes.len()
    })
}

/// Generates a square scene with default synthesis settings.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ts_scene_generate(size_px: usize, seed: u64, out: *mut *mut TsScene) -> TsStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let cfg = SynthConfig { size_px, seed, ..SynthConfig::default() };
        let scene = dem_synth::generate_scene(&cfg).map_err(lift)?;
        *out = Box::into_raw(Box::new(TsScene(scene)));
        Ok(())
    })
}

/// # Safety
/// `scene` must come from [`ts_scene_generate`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn ts_scene_free(scene: *mut TsScene) {
    if !scene.is_null() {
        drop(Box::from_raw(scene));
    }
}

/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn ts_scene_shape(scene: *const TsScene, rows: *mut usize, cols: *mut usize) -> TsStatus {
    guard(|| {
        let s = scene.as_ref().ok_or_else(|| null("scene"))?;
        if rows.is_null() || cols.is_null() {
            return Err(null("rows/cols"));
        }
        (*rows, *cols) = s.0.shape();
        Ok(())
    })
}

/// Copies one elevation raster (row-major, meters) into `out`, which must
/// hold exactly `rows × cols` values.
///
/// # Safety
/// `out` must be valid for `len` floats.
#[no_mangle]
pub unsafe extern "C" fn ts_scene_copy_raster(scene: *const TsScene, which: TsRaster, out: *mut f32, len: usize) -> TsStatus {
    guard(|| {
        let s = scene.as_ref().ok_or_else(|| null("scene"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let g = match which {
            TsRaster::Dtm => &s.0.dtm,
            TsRaster::Dsm => &s.0.dsm,
            TsRaster::Ndsm => &s.0.ndsm,
        };
        if len != g.data.len() {
            return Err((TsStatus::Shape, format!("buffer holds {len} values, raster has {}", g.data.len())));
        }
        ptr::copy_nonoverlapping(g.data.as_ptr(), out, len);
        Ok(())
    })
}

/// Copies the building footprint mask (0/1 bytes).
///
/// # Safety
/// `out` must be valid for `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn ts_scene_copy_footprint(scene: *const TsScene, out: *mut u8, len: usize) -> TsStatus {
    guard(|| {
        let s = scene.as_ref().ok_or_else(|| null("scene"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let m = &s.0.footprint.data;
        if len != m.len() {
            return Err((TsStatus::Shape, format!("buffer holds {len} bytes, mask has {}", m.len())));
        }
        ptr::copy_nonoverlapping(m.as_ptr(), out, len);
        Ok(())
    })
}

/// Builds a randomly initialized model. `head` is 0 for reconstruction,
/// 1 for segmentation (two classes).
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ts_model_new(
    base_width: usize,
    depth: usize,
    se_reduction: usize,
    head: u32,
    seed: u64,
    out: *mut *mut TsModel,
) -> TsStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let head = match head {
            0 => Head::Reconstruction,
            1 => Head::Segmentation,
            h => return Err((TsStatus::Config, format!("unknown head {h}"))),
        };
        let cfg = ModelConfig { base_width, depth, se_reduction, head, ..ModelConfig::default() };
        let p = model::build_model(&cfg, seed).map_err(lift)?;
        *out = Box::into_raw(Box::new(TsModel(p)));
        Ok(())
    })
}

/// Loads a checkpoint directory.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ts_model_load(path: *const c_char, out: *mut *mut TsModel) -> TsStatus {
    guard(|| {
        if path.is_null() || out.is_null() {
            return Err(null("path/out"));
        }
        let p = CStr::from_ptr(path).to_str().map_err(|_| (TsStatus::Config, "path is not UTF-8".to_string()))?;
        let (params, _) = checkpoint::load_checkpoint(Path::new(p), None).map_err(lift)?;
        *out = Box::into_raw(Box::new(TsModel(params)));
        Ok(())
    })
}

/// # Safety
/// `model` and `path` must be valid.
#[no_mangle]
pub unsafe extern "C" fn ts_model_save(model: *const TsModel, path: *const c_char) -> TsStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if path.is_null() {
            return Err(null("path"));
        }
        let p = CStr::from_ptr(path).to_str().map_err(|_| (TsStatus::Config, "path is not UTF-8".to_string()))?;
        checkpoint::save_checkpoint(&m.0, &Default::default(), Path::new(p)).map_err(lift)
    })
}

/// # Safety
/// `model` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn ts_model_free(model: *mut TsModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of trainable scalars, or 0 for a null handle.
///
/// # Safety
/// `model` must be valid or null.
#[no_mangle]
pub unsafe extern "C" fn ts_model_param_count(model: *const TsModel) -> u64 {
    model.as_ref().map_or(0, |m| m.0.param_count() as u64)
}

/// Runs one `rows × cols` tile in meters through the model. A
/// reconstruction model writes the predicted DTM in meters; a
/// segmentation model writes the building probability.
///
/// # Safety
/// `input` and `out` must each be valid for `rows × cols` floats.
#[no_mangle]
pub unsafe extern "C" fn ts_model_infer(
    model: *const TsModel,
    input: *const f32,
    rows: usize,
    cols: usize,
    out: *mut f32,
) -> TsStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if input.is_null() || out.is_null() {
            return Err(null("input/out"));
        }
        let n = rows * cols;
        let values = std::slice::from_raw_parts(input, n).to_vec();
        let tile = dataset::TileRecord {
            tile_id: "ffi".into(),
            scene_id: "ffi".into(),
            row: 0,
            col: 0,
            input: Grid::new(rows, cols, values),
            target: dataset::Target::Footprint { mask: Mask::zeros(rows, cols), clean: Mask::zeros(rows, cols) },
            norm: None,
        };
        let rec = dataset::normalize_tile(&tile, NormMode::PerTileMinshift).map_err(lift)?;
        let norm = rec.norm.unwrap();
        let x = Tensor::from_vec(1, 1, rows, cols, rec.input.data);
        let pass = model::forward(&m.0, &x, Mode::Eval).map_err(lift)?;
        let dst = std::slice::from_raw_parts_mut(out, n);
        match m.0.config.head {
            Head::Reconstruction => {
                for (d, v) in dst.iter_mut().zip(&pass.logits.data) {
                    *d = v * norm.scale + norm.offset;
                }
            }
            Head::Segmentation => {
                let prob = terra_ssl::losses::softmax_channels(&pass.logits);
                dst.copy_from_slice(&prob.data[n..2 * n]);
            }
        }
        Ok(())
    })
}

/// IoU of two 0/1 masks of `len` pixels.
///
/// # Safety
/// `pred` and `gt` must be valid for `len` bytes, `out` for one double.
#[no_mangle]
pub unsafe extern "C" fn ts_iou(pred: *const u8, gt: *const u8, len: usize, out: *mut f64) -> TsStatus {
    guard(|| {
        if pred.is_null() || gt.is_null() || out.is_null() {
            return Err(null("pred/gt/out"));
        }
        let p = Mask::new(1, len, std::slice::from_raw_parts(pred, len).to_vec());
        let g = Mask::new(1, len, std::slice::from_raw_parts(gt, len).to_vec());
        *out = metrics::iou(&p, &g).map_err(lift)?;
        Ok(())
    })
}

/// Boundary IoU with band thickness `d` on `rows × cols` masks.
///
/// # Safety
/// `pred` and `gt` must be valid for `rows × cols` bytes, `out` for one double.
#[no_mangle]
pub unsafe extern "C" fn ts_boundary_iou(
    pred: *const u8,
    gt: *const u8,
    rows: usize,
    cols: usize,
    d: usize,
    out: *mut f64,
) -> TsStatus {
    guard(|| {
        if pred.is_null() || gt.is_null() || out.is_null() {
            return Err(null("pred/gt/out"));
        }
        let n = rows * cols;
        let p = Mask::new(rows, cols, std::slice::from_raw_parts(pred, n).to_vec());
        let g = Mask::new(rows, cols, std::slice::from_raw_parts(gt, n).to_vec());
        *out = metrics::boundary_iou(&p, &g, d).map_err(lift)?;
        Ok(())
    })
}
