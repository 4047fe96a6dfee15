use std::ffi::{CStr, CString};
use std::path::PathBuf;
use std::process::Command;
use std::ptr;

use acts_ffi::*;

fn toy() -> *mut ActsDataset {
    let names: Vec<CString> = ["a", "b", "c"].iter().map(|s| CString::new(*s).unwrap()).collect();
    let name_ptrs: Vec<_> = names.iter().map(|s| s.as_ptr()).collect();
    let days = 60;
    let values: Vec<f64> = (0..3)
        .flat_map(|i| (0..days).map(move |t| 10.0 * (i + 1) as f64 + 5.0 * (0.3 * t as f64 + i as f64).sin()))
        .collect();
    let mut ds = ptr::null_mut();
    let task = CString::new("hosp").unwrap();
    let start = CString::new("2020-03-01").unwrap();
    let status = unsafe {
        acts_dataset_from_values(task.as_ptr(), start.as_ptr(), name_ptrs.as_ptr(), 3, values.as_ptr(), days, &mut ds)
    };
    assert_eq!(status, ActsStatus::Ok);
    ds
}

fn last_error() -> String {
    let p = acts_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

#[test]
fn train_forecast_save_load() {
    let ds = toy();
    let cfg = CString::new("iters = 20\nbatch = 8\n").unwrap();
    let mut model = ptr::null_mut();
    assert_eq!(unsafe { acts_train(ds, cfg.as_ptr(), 2, &mut model) }, ActsStatus::Ok);
    assert!(acts_last_error().is_null());

    let mut out = [0.0; 7];
    let mut written = 0;
    let status = unsafe { acts_forecast(model, ds, 1, 2, out.as_mut_ptr(), 7, &mut written) };
    assert_eq!(status, ActsStatus::Ok);
    assert_eq!(written, 7);
    assert!(out.iter().all(|v| v.is_finite() && *v >= 0.0));

    let dir = tempfile::tempdir().unwrap();
    let path = CString::new(dir.path().join("m.json").to_str().unwrap()).unwrap();
    assert_eq!(unsafe { acts_model_save(model, path.as_ptr()) }, ActsStatus::Ok);
    let mut loaded = ptr::null_mut();
    assert_eq!(unsafe { acts_model_load(path.as_ptr(), &mut loaded) }, ActsStatus::Ok);
    let mut again = [0.0; 7];
    let status = unsafe { acts_forecast(loaded, ds, 1, 2, again.as_mut_ptr(), 7, &mut written) };
    assert_eq!(status, ActsStatus::Ok);
    assert_eq!(out, again);

    unsafe {
        acts_model_free(model);
        acts_model_free(loaded);
        acts_dataset_free(ds);
    }
}

#[test]
fn errors_are_reported_with_codes() {
    let mut ds = ptr::null_mut();
    let task = CString::new("hosp").unwrap();
    let status = unsafe { acts_dataset_load(ptr::null(), task.as_ptr(), &mut ds) };
    assert_eq!(status, ActsStatus::NullArgument);
    let path = CString::new("/nonexistent/x.csv").unwrap();
    let status = unsafe { acts_dataset_load(path.as_ptr(), task.as_ptr(), &mut ds) };
    assert_eq!(status, ActsStatus::Io);
    assert!(last_error().contains("/nonexistent/x.csv"));
    let bad = CString::new("flu").unwrap();
    assert_eq!(unsafe { acts_dataset_load(path.as_ptr(), bad.as_ptr(), &mut ds) }, ActsStatus::Config);

    let toy = toy();
    let mut model = ptr::null_mut();
    let cfg = CString::new("colour = 3").unwrap();
    assert_eq!(unsafe { acts_train(toy, cfg.as_ptr(), 1, &mut model) }, ActsStatus::Config);
    let mut truncated = ptr::null_mut();
    assert_eq!(unsafe { acts_dataset_truncate(toy, 500, &mut truncated) }, ActsStatus::Index);

    let mut w = 0.0;
    let zeros = [0.0, 0.0];
    assert_eq!(unsafe { acts_wape(zeros.as_ptr(), zeros.as_ptr(), 2, &mut w) }, ActsStatus::UndefinedMetric);
    unsafe {
        acts_dataset_free(toy);
        acts_dataset_free(ptr::null_mut());
        acts_model_free(ptr::null_mut());
    }
}

/// Compiles tests/smoke.c against the generated header and the static
/// library and runs it.
#[test]
fn c_program_links_and_runs() {
    let manifest = PathBuf::from(env!("CARGO_MANIFEST_DIR"));
    let header_dir = manifest.join("include");
    assert!(header_dir.join("acts.h").is_file(), "header was not generated");
    let exe = std::env::current_exe().unwrap();
    let profile_dir = exe.parent().unwrap().parent().unwrap();
    let lib = profile_dir.join("libacts_ffi.a");
    assert!(lib.is_file(), "static library not found at {}", lib.display());
    let bin = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acts_smoke");
    let compiled = Command::new("cc")
        .arg(manifest.join("tests/smoke.c"))
        .arg("-I")
        .arg(&header_dir)
        .arg(&lib)
        .args(["-lm", "-lpthread", "-ldl", "-o"])
        .arg(&bin)
        .status()
        .expect("run cc");
    assert!(compiled.success());
    let run = Command::new(&bin).output().unwrap();
    assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
    assert!(String::from_utf8_lossy(&run.stdout).starts_with("ok "));
}
