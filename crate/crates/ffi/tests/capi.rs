use std::ffi::{c_char, CString};
use std::ptr;

use tinyllama::data::PackedBlock;
use tinyllama::eval::choice_loglik;
use tinyllama::infer::{generate, GenerationConfig};
use tinyllama::model::{Model, ModelConfig};
use tinyllama::optim::{AdamWConfig, LrSchedule};
use tinyllama::train::Trainer;
use tinyllama_ffi::*;

fn last_error() -> String {
    let mut buf = vec![0u8; 256];
    let n = unsafe { tl_last_error(buf.as_mut_ptr().cast::<c_char>(), buf.len()) };
    buf.truncate(n.min(255));
    String::from_utf8(buf).unwrap()
}

fn desk(seed: u64) -> *mut TlModel {
    let name = CString::new("desk").unwrap();
    let mut m = ptr::null_mut();
    assert_eq!(
        unsafe { tl_model_init(name.as_ptr(), seed, &mut m) },
        TlStatus::Ok
    );
    assert!(!m.is_null());
    m
}

#[test]
fn checkpoint_load_matches_the_rust_api() {
    let cfg = ModelConfig {
        context_len: 32,
        ..ModelConfig::desk()
    };
    let model = Model::init(cfg, 4).unwrap();
    let mut trainer = Trainer::new(
        model,
        AdamWConfig::default(),
        LrSchedule::new(1e-3, 1e-4, 1, 3).unwrap(),
        1.0,
    );
    let block = PackedBlock {
        tokens: (0..32).map(|i| 60 + i).collect(),
        ignore: vec![false; 32],
    };
    for _ in 0..3 {
        trainer.train_step(std::slice::from_ref(&block)).unwrap();
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    trainer.checkpoint(None).save(&path).unwrap();

    let c_path = CString::new(path.to_str().unwrap()).unwrap();
    let mut handle = ptr::null_mut();
    assert_eq!(
        unsafe { tl_model_load(c_path.as_ptr(), &mut handle) },
        TlStatus::Ok
    );
    assert_eq!(unsafe { tl_model_vocab_size(handle) }, 259);
    assert_eq!(unsafe { tl_model_context_len(handle) }, 32);

    let prompt = [256u32, 60, 61];
    let mut out = [0u32; 8];
    let mut len = 0usize;
    let status = unsafe {
        tl_generate(
            handle,
            prompt.as_ptr(),
            prompt.len(),
            8,
            0.0,
            0,
            0,
            out.as_mut_ptr(),
            out.len(),
            &mut len,
        )
    };
    assert_eq!(status, TlStatus::Ok);
    let gen = GenerationConfig {
        max_new_tokens: 8,
        ..GenerationConfig::default()
    };
    let want = generate(&trainer.model, &prompt, &gen).unwrap();
    assert_eq!(&out[..len], want.as_slice());

    let (ctx, choice) = ([256u32, 60], [61u32, 62]);
    let (mut sum, mut mean) = (0.0, 0.0);
    let status = unsafe {
        tl_choice_loglik(
            handle,
            ctx.as_ptr(),
            2,
            choice.as_ptr(),
            2,
            &mut sum,
            &mut mean,
        )
    };
    assert_eq!(status, TlStatus::Ok);
    let (s, m) = choice_loglik(&trainer.model, &ctx, &choice).unwrap();
    assert_eq!((sum, mean), (s, m));
    unsafe { tl_model_free(handle) };
}

#[test]
fn errors_are_reported_not_raised() {
    let mut handle = ptr::null_mut();
    assert_eq!(
        unsafe { tl_model_load(ptr::null(), &mut handle) },
        TlStatus::NullPointer
    );
    assert!(last_error().contains("null"));

    let missing = CString::new("/nonexistent/model.ckpt").unwrap();
    assert_eq!(
        unsafe { tl_model_load(missing.as_ptr(), &mut handle) },
        TlStatus::Data
    );
    assert!(handle.is_null());

    let bogus = CString::new("huge").unwrap();
    assert_eq!(
        unsafe { tl_model_init(bogus.as_ptr(), 0, &mut handle) },
        TlStatus::Usage
    );
    assert!(last_error().contains("preset"));

    let m = desk(1);
    let prompt = [1u32; 4];
    let mut out = [0u32; 2];
    let mut len = 0;
    let status = unsafe {
        tl_generate(
            m,
            prompt.as_ptr(),
            4,
            5,
            0.0,
            0,
            0,
            out.as_mut_ptr(),
            2,
            &mut len,
        )
    };
    assert_eq!(status, TlStatus::BufferTooSmall);
    assert_eq!(len, 5);

    let bad = [999u32];
    let status = unsafe {
        tl_generate(
            m,
            bad.as_ptr(),
            1,
            1,
            0.0,
            0,
            0,
            out.as_mut_ptr(),
            2,
            &mut len,
        )
    };
    assert_eq!(status, TlStatus::Usage);

    // Prompt plus new tokens past the window is a range error.
    let long = [1u32; 64];
    let status = unsafe {
        tl_generate(
            m,
            long.as_ptr(),
            64,
            1,
            0.0,
            0,
            0,
            out.as_mut_ptr(),
            2,
            &mut len,
        )
    };
    assert_eq!(status, TlStatus::Usage);

    let (mut a, mut b) = (0.0, 0.0);
    let status =
        unsafe { tl_choice_loglik(m, prompt.as_ptr(), 1, prompt.as_ptr(), 0, &mut a, &mut b) };
    assert_eq!(status, TlStatus::Usage);

    unsafe {
        tl_model_free(m);
        tl_model_free(ptr::null_mut());
    }
    assert_eq!(unsafe { tl_model_vocab_size(ptr::null()) }, 0);
}

#[test]
fn pure_functions() {
    let full = CString::new("full").unwrap();
    let mut n = 0;
    assert_eq!(
        unsafe { tl_preset_param_count(full.as_ptr(), &mut n) },
        TlStatus::Ok
    );
    assert_eq!(n, 1_100_048_384);

    let mut lr = 0.0;
    assert_eq!(
        unsafe { tl_lr_at(4e-4, 4e-5, 2000, 10_000, 2000, &mut lr) },
        TlStatus::Ok
    );
    assert_eq!(lr, 4e-4);
    assert_eq!(
        unsafe { tl_lr_at(4e-4, 4e-5, 20, 10, 0, &mut lr) },
        TlStatus::Usage
    );

    let v = unsafe { std::ffi::CStr::from_ptr(tl_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn last_error_truncates_and_terminates() {
    let bogus = CString::new("x".repeat(100)).unwrap();
    let mut h = ptr::null_mut();
    unsafe { tl_model_init(bogus.as_ptr(), 0, &mut h) };
    let mut small = [0x7fu8; 8];
    let n = unsafe { tl_last_error(small.as_mut_ptr().cast(), small.len()) };
    assert!(n > 100);
    assert_eq!(small[7], 0);
    assert_eq!(unsafe { tl_last_error(ptr::null_mut(), 0) }, n);
}

/// The generated header must compile as C.
#[test]
fn header_is_valid_c() {
    let header = concat!(env!("CARGO_MANIFEST_DIR"), "/include/tinyllama.h");
    let Ok(out) = std::process::Command::new("cc")
        .args(["-fsyntax-only", "-Wall", "-Werror", "-x", "c", header])
        .output()
    else {
        eprintln!("no C compiler; skipping");
        return;
    };
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
}
