//! C interface to a trained aptbench output root.
//!
//! Every function returns an [`AptStatus`]; on failure the message is kept in
//! thread-local storage and read back with [`apt_last_error_message`].
//! Images are flat `C*H*W` row-major `double` buffers in `[-1, 1]`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use aptbench::attack::{apt_attack, attack_rng, AttackModels, StopReason};
use aptbench::config::RunConfig;
use aptbench::evaluate::{fid, FeatureStats};
use aptbench::inversion::{invert, PivotState};
use aptbench::losses::{perceptual_distance, TermMask};
use aptbench::models::{argmax, ClassLabel, ImageTensor};
use aptbench::pipeline::Bench;
use aptbench::tensor::Tensor;
use aptbench::AptError;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AptStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    MissingPrerequisite = 4,
    Shape = 5,
    Numerical = 6,
    Checkpoint = 7,
    Dataset = 8,
    Io = 9,
    Serde = 10,
    OutputExists = 11,
    Panic = 12,
}

/// How an attack ended.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum AptStopReason {
    FooledWithinD = 0,
    HitDistanceBound = 1,
    MaxIters = 2,
    #[default]
    Failed = 3,
}

/// Result of [`apt_attack_image`].
#[repr(C)]
#[derive(Clone, Copy, Debug, Default)]
pub struct AptAttackSummary {
    pub emitted: bool,
    pub fooled: bool,
    pub predicted_class: usize,
    pub fool_target: usize,
    pub iterations: usize,
    /// Reconstruction distance of the emitted image; NaN when nothing was emitted.
    pub l_pt: f64,
    pub stop_reason: AptStopReason,
}

/// Frozen models of one output root.
pub struct AptBench(Bench);

/// Inverted latent code and noise for one image.
pub struct AptPivot(PivotState);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &AptError) -> AptStatus {
    match e {
        AptError::Config(_) => AptStatus::Config,
        AptError::Shape(_) => AptStatus::Shape,
        AptError::Numerical(_) => AptStatus::Numerical,
        AptError::Checkpoint { .. } => AptStatus::Checkpoint,
        AptError::MissingPrerequisite { .. } => AptStatus::MissingPrerequisite,
        AptError::Dataset(_) => AptStatus::Dataset,
        AptError::InvalidArgument(_) => AptStatus::InvalidArgument,
        AptError::OutputExists(_) => AptStatus::OutputExists,
        AptError::Io { .. } => AptStatus::Io,
        AptError::Serde(_) => AptStatus::Serde,
    }
}

enum Fail {
    Null(&'static str),
    Apt(AptError),
}

impl From<AptError> for Fail {
    fn from(e: AptError) -> Self {
        Fail::Apt(e)
    }
}

fn invalid(msg: impl Into<String>) -> Fail {
    Fail::Apt(AptError::InvalidArgument(msg.into()))
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> AptStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => AptStatus::Ok,
        Ok(Err(Fail::Null(what))) => {
            set_error(format!("null pointer: {what}"));
            AptStatus::NullPointer
        }
        Ok(Err(Fail::Apt(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            AptStatus::Panic
        }
    }
}

unsafe fn deref<'a, T>(p: *const T, what: &'static str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or(Fail::Null(what))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &'static str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    CStr::from_ptr(p).to_str().map_err(|_| invalid(format!("{what} is not valid UTF-8")))
}

unsafe fn slice_arg<'a>(p: *const f64, len: usize, what: &'static str) -> Result<&'a [f64], Fail> {
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn out_slice<'a>(p: *mut f64, len: usize, what: &'static str) -> Result<&'a mut [f64], Fail> {
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

unsafe fn write<T>(p: *mut T, v: T, what: &'static str) -> Result<(), Fail> {
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    p.write(v);
    Ok(())
}

fn image_shape(b: &Bench) -> [usize; 3] {
    let d = &b.cfg.dataset;
    [d.channels, d.image_size, d.image_size]
}

unsafe fn image_arg(b: &Bench, p: *const f64, len: usize, what: &'static str) -> Result<ImageTensor, Fail> {
    let shape = image_shape(b);
    let want: usize = shape.iter().product();
    if len != want {
        return Err(Fail::Apt(AptError::Shape(format!("{what} has {len} values, expected {want}"))));
    }
    let data = slice_arg(p, len, what)?;
    if data.iter().any(|v| !v.is_finite()) {
        return Err(invalid(format!("{what} contains non-finite values")));
    }
    Ok(ImageTensor(Tensor::new(shape.to_vec(), data.to_vec())))
}

fn class_arg(b: &Bench, class: usize) -> Result<ClassLabel, Fail> {
    let k = b.oracle()?.num_classes;
    if class >= k {
        return Err(invalid(format!("class {class} out of range for {k} classes")));
    }
    Ok(ClassLabel(class))
}

/// Message of the last failed call on this thread, or NULL. Valid until the next call.
#[no_mangle]
pub extern "C" fn apt_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Static name of a status code.
#[no_mangle]
pub extern "C" fn apt_status_name(status: AptStatus) -> *const c_char {
    let s: &'static CStr = match status {
        AptStatus::Ok => c"ok",
        AptStatus::NullPointer => c"null pointer",
        AptStatus::InvalidArgument => c"invalid argument",
        AptStatus::Config => c"configuration error",
        AptStatus::MissingPrerequisite => c"missing prerequisite",
        AptStatus::Shape => c"shape mismatch",
        AptStatus::Numerical => c"numerical fault",
        AptStatus::Checkpoint => c"checkpoint error",
        AptStatus::Dataset => c"dataset error",
        AptStatus::Io => c"i/o error",
        AptStatus::Serde => c"serialization error",
        AptStatus::OutputExists => c"output exists",
        AptStatus::Panic => c"panic",
    };
    s.as_ptr()
}

/// Load the dataset and checkpoints under `root` trained with the TOML config at `config_path`.
///
/// # Safety
/// `root` and `config_path` must be NUL-terminated strings; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn apt_bench_open(root: *const c_char, config_path: *const c_char, out: *mut *mut AptBench) -> AptStatus {
    guard(|| {
        if out.is_null() {
            return Err(Fail::Null("out"));
        }
        out.write(ptr::null_mut());
        let root = str_arg(root, "root")?;
        let cfg = RunConfig::load(Path::new(str_arg(config_path, "config_path")?))?;
        let b = Bench::load(Path::new(root), &cfg)?;
        out.write(Box::into_raw(Box::new(AptBench(b))));
        Ok(())
    })
}

/// # Safety
/// `bench` must come from [`apt_bench_open`] and not be used afterwards. NULL is ignored.
#[no_mangle]
pub unsafe extern "C" fn apt_bench_free(bench: *mut AptBench) {
    if !bench.is_null() {
        drop(Box::from_raw(bench));
    }
}

/// Image dimensions and class count of the bench.
///
/// # Safety
/// `bench` must be a live handle; the out pointers must be writable.
#[no_mangle]
pub unsafe extern "C" fn apt_bench_info(
    bench: *const AptBench,
    channels: *mut usize,
    height: *mut usize,
    width: *mut usize,
    num_classes: *mut usize,
) -> AptStatus {
    guard(|| {
        let b = &deref(bench, "bench")?.0;
        let [c, h, w] = image_shape(b);
        write(channels, c, "channels")?;
        write(height, h, "height")?;
        write(width, w, "width")?;
        write(num_classes, b.oracle()?.num_classes, "num_classes")
    })
}

/// Copy dataset image `id` into `out` and its label into `label`.
///
/// # Safety
/// `out` must hold `len` doubles; `label` must be writable.
#[no_mangle]
pub unsafe extern "C" fn apt_bench_image(
    bench: *const AptBench,
    id: usize,
    out: *mut f64,
    len: usize,
    label: *mut usize,
) -> AptStatus {
    guard(|| {
        let b = &deref(bench, "bench")?.0;
        if id >= b.ds.labels.len() {
            return Err(invalid(format!("image id {id} out of range for {} images", b.ds.labels.len())));
        }
        let img = b.image(id);
        let dst = out_slice(out, len, "out")?;
        if dst.len() != img.0.len() {
            return Err(Fail::Apt(AptError::Shape(format!("out has {len} slots, image has {}", img.0.len()))));
        }
        dst.copy_from_slice(img.0.data());
        write(label, b.ds.labels[id], "label")
    })
}

/// Class probabilities of `classifier` (e.g. "conv", "mlp", "oracle") for one image.
///
/// # Safety
/// `image` must hold `len` doubles and `probs` `probs_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn apt_classify(
    bench: *const AptBench,
    classifier: *const c_char,
    image: *const f64,
    len: usize,
    probs: *mut f64,
    probs_len: usize,
) -> AptStatus {
    guard(|| {
        let b = &deref(bench, "bench")?.0;
        let clf = b.classifier(str_arg(classifier, "classifier")?)?;
        let x = image_arg(b, image, len, "image")?;
        let p = clf.classify(&x)?;
        let dst = out_slice(probs, probs_len, "probs")?;
        if dst.len() != p.len() {
            return Err(Fail::Apt(AptError::Shape(format!("probs has {probs_len} slots, expected {}", p.len()))));
        }
        dst.copy_from_slice(&p);
        Ok(())
    })
}

/// Perceptual distance between two images.
///
/// # Safety
/// `x` and `y` must each hold `len` doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn apt_perceptual_distance(
    bench: *const AptBench,
    x: *const f64,
    y: *const f64,
    len: usize,
    out: *mut f64,
) -> AptStatus {
    guard(|| {
        let b = &deref(bench, "bench")?.0;
        let (x, y) = (image_arg(b, x, len, "x")?, image_arg(b, y, len, "y")?);
        write(out, perceptual_distance(&b.perceptual, &x, &y)?, "out")
    })
}

/// Invert one image of class `class` into the generator; the pivot is returned in `out`.
///
/// # Safety
/// `image` must hold `len` doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn apt_invert(
    bench: *const AptBench,
    image: *const f64,
    len: usize,
    class: usize,
    out: *mut *mut AptPivot,
) -> AptStatus {
    guard(|| {
        if out.is_null() {
            return Err(Fail::Null("out"));
        }
        out.write(ptr::null_mut());
        let b = &deref(bench, "bench")?.0;
        let x = image_arg(b, image, len, "image")?;
        let c = class_arg(b, class)?;
        let p = invert(&b.perceptual, &b.gen, &x, c, &b.cfg.inversion_config())?;
        out.write(Box::into_raw(Box::new(AptPivot(p))));
        Ok(())
    })
}

/// Final objective value and first/last reconstruction distance of an inversion.
///
/// # Safety
/// `pivot` must be a live handle; out pointers must be writable.
#[no_mangle]
pub unsafe extern "C" fn apt_pivot_losses(
    pivot: *const AptPivot,
    final_loss: *mut f64,
    initial_lpips: *mut f64,
    final_lpips: *mut f64,
) -> AptStatus {
    guard(|| {
        let p = &deref(pivot, "pivot")?.0;
        write(final_loss, p.final_loss, "final_loss")?;
        write(initial_lpips, p.initial_lpips(), "initial_lpips")?;
        write(final_lpips, p.final_lpips(), "final_lpips")
    })
}

/// # Safety
/// `pivot` must come from [`apt_invert`] and not be used afterwards. NULL is ignored.
#[no_mangle]
pub unsafe extern "C" fn apt_pivot_free(pivot: *mut AptPivot) {
    if !pivot.is_null() {
        drop(Box::from_raw(pivot));
    }
}

/// Run one pivot-tuning attack on `image` against `target` within distance `d`.
///
/// The generator is tuned on a private copy; the bench is unchanged. When an
/// image is emitted it is written to `out_image`, otherwise `out_image` is left
/// untouched.
///
/// # Safety
/// `image` and `out_image` must hold `len` doubles; `summary` must be writable.
#[no_mangle]
pub unsafe extern "C" fn apt_attack_image(
    bench: *const AptBench,
    target: *const c_char,
    image: *const f64,
    len: usize,
    class: usize,
    pivot: *const AptPivot,
    d: f64,
    seed: u64,
    out_image: *mut f64,
    summary: *mut AptAttackSummary,
) -> AptStatus {
    guard(|| {
        let b = &deref(bench, "bench")?.0;
        let target = str_arg(target, "target")?;
        let x = image_arg(b, image, len, "image")?;
        let c = class_arg(b, class)?;
        let pivot = &deref(pivot, "pivot")?.0;
        let dst = out_slice(out_image, len, "out_image")?;
        if summary.is_null() {
            return Err(Fail::Null("summary"));
        }
        if !(d.is_finite() && d > 0.0) {
            return Err(invalid(format!("d must be positive, got {d}")));
        }
        if b.oracle()?.id == target {
            return Err(Fail::Apt(AptError::Config("the oracle classifier cannot be attacked".into())));
        }
        let mut cfg = b.attack_config(target, TermMask::ALL, seed)?;
        cfg.d = d;
        let clf = b.classifier(target)?;
        let m = AttackModels {
            gen: &b.gen,
            fx: &b.perceptual,
            target: clf,
            discriminators: &b.disc,
            judges: Vec::new(),
        };
        let r = apt_attack(&x, None, c, pivot, &m, &cfg, &mut attack_rng(seed, 0))?;
        let mut s = AptAttackSummary {
            emitted: r.emitted,
            fool_target: r.c_any,
            iterations: r.iterations_used,
            l_pt: r.l_pt_at_emission.unwrap_or(f64::NAN),
            stop_reason: match r.stop_reason {
                StopReason::FooledWithinD => AptStopReason::FooledWithinD,
                StopReason::HitDistanceBound => AptStopReason::HitDistanceBound,
                StopReason::MaxIters => AptStopReason::MaxIters,
                StopReason::Failed => AptStopReason::Failed,
            },
            ..Default::default()
        };
        if let Some(img) = &r.image {
            s.predicted_class = argmax(&clf.classify(img)?);
            s.fooled = s.predicted_class != class;
            dst.copy_from_slice(img.0.data());
        }
        summary.write(s);
        Ok(())
    })
}

/// Fréchet distance between two feature sets given as row-major `n x dim` matrices.
///
/// # Safety
/// `a` must hold `na * dim` doubles and `b` `nb * dim`; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn apt_fid(a: *const f64, na: usize, b: *const f64, nb: usize, dim: usize, out: *mut f64) -> AptStatus {
    guard(|| {
        if dim == 0 || na < 2 || nb < 2 {
            return Err(invalid("need dim >= 1 and at least two rows per set"));
        }
        let rows = |p: *const f64, n: usize, what: &'static str| -> Result<Vec<Vec<f64>>, Fail> {
            let len = n.checked_mul(dim).ok_or_else(|| invalid("feature matrix size overflows"))?;
            Ok(slice_arg(p, len, what)?.chunks(dim).map(<[f64]>::to_vec).collect())
        };
        let sa = FeatureStats::from_rows(&rows(a, na, "a")?)?;
        let sb = FeatureStats::from_rows(&rows(b, nb, "b")?)?;
        write(out, fid(&sa, &sb)?, "out")
    })
}

/// Fréchet distance between two image sets in the perceptual net's feature space.
///
/// # Safety
/// `a` must hold `na` images and `b` `nb` images of the bench's shape; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn apt_image_fid(
    bench: *const AptBench,
    a: *const f64,
    na: usize,
    b: *const f64,
    nb: usize,
    out: *mut f64,
) -> AptStatus {
    guard(|| {
        let bench = &deref(bench, "bench")?.0;
        let shape = image_shape(bench);
        let per: usize = shape.iter().product();
        let images = |p: *const f64, n: usize, what: &'static str| -> Result<Vec<ImageTensor>, Fail> {
            (0..n).map(|i| image_arg(bench, p.add(i * per), per, what)).collect()
        };
        if a.is_null() || b.is_null() {
            return Err(Fail::Null(if a.is_null() { "a" } else { "b" }));
        }
        let (xa, xb) = (images(a, na, "a")?, images(b, nb, "b")?);
        let fa = aptbench::evaluate::feature_stats(&bench.perceptual, &xa)?;
        let fb = aptbench::evaluate::feature_stats(&bench.perceptual, &xb)?;
        write(out, fid(&fa, &fb)?, "out")
    })
}
