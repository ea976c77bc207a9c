use std::ffi::{CStr, CString};
use std::path::Path;
use std::process::Command;
use std::ptr;

use snr_core::diffcore::Tensor;
use snr_core::harness::{load_checkpoint, save_checkpoint, TrainConfig};
use snr_core::model::{Model, ModelConfig, NormMode};
use snr_ffi::*;

fn last_error() -> String {
    unsafe { CStr::from_ptr(snr_last_error()) }
        .to_string_lossy()
        .into_owned()
}

fn checkpoint(dir: &Path) -> Model {
    let mut cfg = ModelConfig::with_channels([3, 8, 4], &[4, 8], 6, 3);
    cfg.set_modes(NormMode::Snr);
    cfg.reduction = 2;
    let model = Model::build(cfg).unwrap();
    save_checkpoint(dir, &model, &TrainConfig::default(), 0, 0, None).unwrap();
    load_checkpoint(dir).unwrap().0
}

fn load(dir: &Path) -> *mut SnrModel {
    let path = CString::new(dir.to_str().unwrap()).unwrap();
    let mut handle = ptr::null_mut();
    assert_eq!(
        unsafe { snr_model_load(path.as_ptr(), &mut handle) },
        SnrStatus::Ok
    );
    assert!(!handle.is_null());
    handle
}

#[test]
fn embed_matches_the_library() {
    let dir = tempfile::tempdir().unwrap();
    let model = checkpoint(dir.path());
    let handle = load(dir.path());
    let mut shape = [0usize; 3];
    let mut dim = 0usize;
    let mut count = 0u64;
    unsafe {
        assert_eq!(
            snr_model_input_shape(handle, shape.as_mut_ptr()),
            SnrStatus::Ok
        );
        assert_eq!(snr_model_embedding_dim(handle, &mut dim), SnrStatus::Ok);
        assert_eq!(snr_model_parameter_count(handle, &mut count), SnrStatus::Ok);
    }
    assert_eq!(
        (shape, dim, count as usize),
        ([3, 8, 4], 6, model.parameter_count())
    );

    let images: Vec<f32> = (0..2 * 96)
        .map(|i| ((i * 37) % 101) as f32 / 100.0)
        .collect();
    let mut out = vec![0f32; 2 * dim];
    let status =
        unsafe { snr_model_embed(handle, images.as_ptr(), 2, out.as_mut_ptr(), out.len()) };
    assert_eq!(status, SnrStatus::Ok, "{}", last_error());
    let imgs: Vec<Tensor> = images
        .chunks(96)
        .map(|c| Tensor::new(&[3, 8, 4], c.iter().map(|&v| v as f64).collect()).unwrap())
        .collect();
    let want = model.embed(&imgs).unwrap();
    for (a, b) in out.iter().zip(want.data()) {
        assert!((*a as f64 - b).abs() < 1e-5);
    }

    let status = unsafe { snr_model_embed(handle, images.as_ptr(), 2, out.as_mut_ptr(), 5) };
    assert_eq!(status, SnrStatus::Shape);
    assert!(last_error().contains("need 12"));
    unsafe { snr_model_free(handle) };
}

#[test]
fn load_errors_are_reported() {
    let mut handle = ptr::null_mut();
    let missing = CString::new("/nonexistent/checkpoint").unwrap();
    assert_eq!(
        unsafe { snr_model_load(missing.as_ptr(), &mut handle) },
        SnrStatus::Io
    );
    assert!(handle.is_null());
    assert!(!last_error().is_empty());
    assert_eq!(
        unsafe { snr_model_load(ptr::null(), &mut handle) },
        SnrStatus::NullPointer
    );

    let dir = tempfile::tempdir().unwrap();
    checkpoint(dir.path());
    std::fs::remove_file(dir.path().join("params/head.fc.bias.snrt")).unwrap();
    let path = CString::new(dir.path().to_str().unwrap()).unwrap();
    assert_eq!(
        unsafe { snr_model_load(path.as_ptr(), &mut handle) },
        SnrStatus::Io
    );
    unsafe { snr_model_free(ptr::null_mut()) };
}

#[test]
fn scalar_helpers() {
    assert_eq!(snr_lr_schedule(0), 8e-6);
    assert_eq!(snr_lr_schedule(20), 8e-4);
    assert_eq!(snr_lr_schedule(60), 4e-4);
    let (a, b) = ([1.0, 0.0], [-2.0, 0.0]);
    let mut d = 0.0;
    assert_eq!(
        unsafe { snr_cosine_distance(a.as_ptr(), b.as_ptr(), 2, &mut d) },
        SnrStatus::Ok
    );
    assert_eq!(d, 1.0);
    let z = [0.0, 0.0];
    assert_eq!(
        unsafe { snr_cosine_distance(a.as_ptr(), z.as_ptr(), 2, &mut d) },
        SnrStatus::Numeric
    );
    assert_eq!(snr_last_error(), snr_last_error());
}

#[test]
fn evaluate_small_gallery() {
    let q = [1.0f32, 0.0, 0.0, 1.0];
    let g = [0.9f32, 0.1, 0.1, 0.9, 1.0, 0.05];
    let (ql, gl) = ([0u64, 1], [0u64, 1, 1]);
    let mut r = SnrRetrieval::default();
    let status = unsafe {
        snr_evaluate(
            q.as_ptr(),
            ql.as_ptr(),
            2,
            g.as_ptr(),
            gl.as_ptr(),
            3,
            2,
            &mut r,
        )
    };
    assert_eq!(status, SnrStatus::Ok, "{}", last_error());
    // query 0 finds its match second; query 1 ranks its matches first and third
    assert_eq!(r.rank1, 0.5);
    assert_eq!(r.rank5, 1.0);
    assert!((r.map - (0.5 + (1.0 + 2.0 / 3.0) / 2.0) / 2.0).abs() < 1e-12);
    let status = unsafe {
        snr_evaluate(
            q.as_ptr(),
            ql.as_ptr(),
            2,
            ptr::null(),
            gl.as_ptr(),
            3,
            2,
            &mut r,
        )
    };
    assert_eq!(status, SnrStatus::NullPointer);
}

#[test]
fn header_is_valid_c() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include/snr.h");
    let text = std::fs::read_to_string(&header).unwrap();
    for name in [
        "snr_model_load",
        "snr_model_embed",
        "snr_evaluate",
        "SNR_STATUS_OK",
        "typedef struct SnrModel SnrModel",
    ] {
        assert!(text.contains(name), "{name} missing from header");
    }
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("use.c");
    std::fs::write(
        &src,
        "#include \"snr.h\"\nint main(void) { SnrModel *m = 0; return snr_model_load(\"x\", &m) == SNR_STATUS_OK; }\n",
    )
    .unwrap();
    match Command::new("cc")
        .args(["-fsyntax-only", "-Wall", "-Werror", "-I"])
        .arg(header.parent().unwrap())
        .arg(&src)
        .output()
    {
        Ok(out) => assert!(
            out.status.success(),
            "{}",
            String::from_utf8_lossy(&out.stderr)
        ),
        Err(e) => eprintln!("no C compiler, skipping syntax check: {e}"),
    }
}
