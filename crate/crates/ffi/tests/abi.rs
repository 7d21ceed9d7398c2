use std::ffi::{CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use uvcg_ffi::*;

fn last_error() -> String {
    let p = uvcg_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn ramp_pixels(frames: usize, width: usize, height: usize, offset: f32) -> Vec<f32> {
    (0..frames * height * width * 3)
        .map(|i| ((i % 97) as f32 / 97.0 * 0.8 + offset).min(1.0))
        .collect()
}

fn make_clip(name: &str, frames: usize, size: usize, offset: f32) -> *mut UvcgClip {
    let name = CString::new(name).unwrap();
    let pixels = ramp_pixels(frames, size, size, offset);
    let mut clip = ptr::null_mut();
    let status = unsafe { uvcg_clip_from_pixels(name.as_ptr(), size, size, frames, pixels.as_ptr(), &mut clip) };
    assert_eq!(status, UvcgStatus::Ok);
    clip
}

#[test]
fn protect_through_the_abi() {
    let clip = make_clip("v", 3, 16, 0.0);
    let target = make_clip("t", 2, 16, 0.1);
    let mut encoder = ptr::null_mut();
    unsafe {
        assert_eq!(uvcg_encoder_reference(7, 8, 4, &mut encoder), UvcgStatus::Ok);
        let mut config = uvcg_protection_config_default();
        assert_eq!(config.steps, 200);
        config.steps = 20;
        let mut prot = ptr::null_mut();
        assert_eq!(uvcg_protect(clip, target, encoder, &config, &mut prot), UvcgStatus::Ok);

        let eps = config.epsilon;
        let max = uvcg_protection_max_abs_delta(prot);
        assert!(max > 0.0 && max <= eps, "{max} vs {eps}");

        let immunized = uvcg_protection_clip(prot);
        assert_eq!(uvcg_clip_frame_count(immunized), 3);
        assert_eq!(uvcg_clip_width(immunized), 16);
        let (mut px, mut len) = (ptr::null(), 0usize);
        assert_eq!(uvcg_clip_frame(immunized, 2, &mut px, &mut len), UvcgStatus::Ok);
        assert_eq!(len, 16 * 16 * 3);
        assert!(std::slice::from_raw_parts(px, len)
            .iter()
            .all(|v| (0.0..=1.0).contains(v)));

        let mut loss = f32::NAN;
        assert_eq!(uvcg_protection_final_loss(prot, 0, &mut loss), UvcgStatus::Ok);
        assert!(loss.is_finite() && loss >= 0.0);
        assert_eq!(
            uvcg_protection_final_loss(prot, 3, &mut loss),
            UvcgStatus::InvalidArgument
        );

        let mut psnr = 0.0;
        assert_eq!(uvcg_psnr(clip, immunized, &mut psnr), UvcgStatus::Ok);
        assert!(psnr > 20.0 && psnr < 100.0, "{psnr}");
        let mut ssim = 0.0;
        assert_eq!(uvcg_ssim(clip, clip, &mut ssim), UvcgStatus::Ok);
        assert_eq!(ssim, 1.0);

        uvcg_protection_free(prot);
        uvcg_encoder_free(encoder);
        uvcg_clip_free(clip);
        uvcg_clip_free(target);
    }
}

#[test]
fn baseline_has_no_losses() {
    let clip = make_clip("v", 2, 16, 0.0);
    unsafe {
        let config = uvcg_protection_config_default();
        let mut prot = ptr::null_mut();
        assert_eq!(uvcg_baseline(clip, &config, &mut prot), UvcgStatus::Ok);
        assert!(uvcg_protection_max_abs_delta(prot) <= config.epsilon);
        let mut loss = 0.0;
        assert_eq!(uvcg_protection_final_loss(prot, 0, &mut loss), UvcgStatus::Capability);
        assert!(last_error().contains("no losses"));
        uvcg_protection_free(prot);
        uvcg_clip_free(clip);
    }
}

#[test]
fn errors_map_to_status_codes() {
    unsafe {
        let mut clip = ptr::null_mut();
        let missing = CString::new("/nonexistent/uvcg/clip").unwrap();
        let status = uvcg_clip_load(missing.as_ptr(), &mut clip);
        assert!(matches!(status, UvcgStatus::Io | UvcgStatus::Format), "{status:?}");
        assert!(clip.is_null());
        assert!(!last_error().is_empty());

        assert_eq!(uvcg_clip_load(ptr::null(), &mut clip), UvcgStatus::NullPointer);
        assert_eq!(last_error(), "path is null");

        let mut enc = ptr::null_mut();
        assert_eq!(uvcg_encoder_reference(1, 6, 4, &mut enc), UvcgStatus::Config);
        assert!(enc.is_null());
        assert_eq!(uvcg_encoder_identity(ptr::null_mut()), UvcgStatus::NullPointer);

        let a = make_clip("a", 1, 16, 0.0);
        let b = make_clip("b", 2, 16, 0.0);
        let mut out = 0.0;
        assert_eq!(uvcg_psnr(a, b, &mut out), UvcgStatus::Config);

        let mut config = uvcg_protection_config_default();
        config.alpha = config.epsilon * 2.0;
        assert_eq!(uvcg_encoder_identity(&mut enc), UvcgStatus::Ok);
        let mut prot = ptr::null_mut();
        assert_eq!(uvcg_protect(a, b, enc, &config, &mut prot), UvcgStatus::Config);
        assert!(prot.is_null());

        let name = CString::new("bad").unwrap();
        let px = [0.5f32; 3];
        assert_eq!(
            uvcg_clip_from_pixels(name.as_ptr(), 0, 1, 1, px.as_ptr(), &mut clip),
            UvcgStatus::InvalidArgument
        );
        assert_eq!(
            uvcg_clip_from_pixels(name.as_ptr(), usize::MAX, 2, 1, px.as_ptr(), &mut clip),
            UvcgStatus::InvalidArgument
        );

        assert_eq!(uvcg_clip_frame_count(ptr::null()), 0);
        assert!(uvcg_protection_max_abs_delta(ptr::null()).is_nan());
        assert!(uvcg_protection_clip(ptr::null()).is_null());
        uvcg_clip_free(ptr::null_mut());
        uvcg_encoder_free(enc);
        uvcg_clip_free(a);
        uvcg_clip_free(b);
    }
}

#[test]
fn last_error_is_per_thread() {
    unsafe {
        let mut clip = ptr::null_mut();
        assert_eq!(uvcg_clip_load(ptr::null(), &mut clip), UvcgStatus::NullPointer);
    }
    std::thread::spawn(|| assert!(uvcg_last_error().is_null()))
        .join()
        .unwrap();
    assert_eq!(last_error(), "path is null");
}

#[test]
fn clips_round_trip_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    let path = CString::new(dir.path().join("clip").to_str().unwrap()).unwrap();
    let clip = make_clip("disk", 2, 12, 0.0);
    unsafe {
        assert_eq!(uvcg_clip_save(clip, path.as_ptr()), UvcgStatus::Ok);
        let mut back = ptr::null_mut();
        assert_eq!(uvcg_clip_load(path.as_ptr(), &mut back), UvcgStatus::Ok);
        assert_eq!(uvcg_clip_frame_count(back), 2);
        let mut psnr = 0.0;
        assert_eq!(uvcg_psnr(clip, back, &mut psnr), UvcgStatus::Ok);
        // 8-bit quantization bounds the error by half a level.
        assert!(psnr > 50.0, "{psnr}");
        uvcg_clip_free(back);
        uvcg_clip_free(clip);
    }
}

#[test]
fn sidecar_launch_failure_is_reported() {
    let cmd = CString::new("exit 3").unwrap();
    let mut enc = ptr::null_mut();
    let status = unsafe { uvcg_encoder_sidecar(cmd.as_ptr(), &mut enc) };
    assert_eq!(status, UvcgStatus::Sidecar);
    assert!(enc.is_null());
    assert!(last_error().contains("sidecar"));
}

#[test]
fn echo_sidecar_through_the_abi() {
    // Built by uvcg-core; present whenever the workspace is tested as a whole.
    let echo = target_dir().join("uvcg-echo-sidecar");
    if !echo.exists() {
        eprintln!("{} not built; run the workspace tests", echo.display());
        return;
    }
    let cmd = CString::new(echo.to_str().unwrap()).unwrap();
    let clip = make_clip("v", 2, 8, 0.0);
    let target = make_clip("t", 1, 8, 0.2);
    unsafe {
        let (mut remote, mut local) = (ptr::null_mut(), ptr::null_mut());
        assert_eq!(
            uvcg_encoder_sidecar(cmd.as_ptr(), &mut remote),
            UvcgStatus::Ok,
            "{}",
            last_error()
        );
        assert_eq!(uvcg_encoder_identity(&mut local), UvcgStatus::Ok);
        let mut config = uvcg_protection_config_default();
        config.steps = 10;
        let (mut a, mut b) = (ptr::null_mut(), ptr::null_mut());
        assert_eq!(uvcg_protect(clip, target, remote, &config, &mut a), UvcgStatus::Ok);
        assert_eq!(uvcg_protect(clip, target, local, &config, &mut b), UvcgStatus::Ok);
        let (mut la, mut lb) = (0.0f32, 1.0f32);
        uvcg_protection_final_loss(a, 1, &mut la);
        uvcg_protection_final_loss(b, 1, &mut lb);
        assert_eq!(la.to_bits(), lb.to_bits());
        uvcg_protection_free(a);
        uvcg_protection_free(b);
        uvcg_encoder_free(remote);
        uvcg_encoder_free(local);
        uvcg_clip_free(clip);
        uvcg_clip_free(target);
    }
}

fn target_dir() -> PathBuf {
    let exe = std::env::current_exe().unwrap();
    exe.parent().unwrap().parent().unwrap().to_path_buf()
}

const C_PROGRAM: &str = r#"
#include <stdio.h>
#include "uvcg.h"

int main(void) {
    float px[16 * 16 * 3 * 2];
    for (int i = 0; i < 16 * 16 * 3 * 2; i++) px[i] = (float)(i % 50) / 50.0f;
    UvcgClip *clip = NULL;
    if (uvcg_clip_from_pixels("c", 16, 16, 2, px, &clip) != UVCG_STATUS_OK) return 2;
    UvcgProtectionConfig cfg = uvcg_protection_config_default();
    UvcgProtection *prot = NULL;
    if (uvcg_baseline(clip, &cfg, &prot) != UVCG_STATUS_OK) return 3;
    double psnr = 0.0;
    if (uvcg_psnr(clip, uvcg_protection_clip(prot), &psnr) != UVCG_STATUS_OK) return 4;
    UvcgEncoder *enc = NULL;
    UvcgStatus bad = uvcg_encoder_reference(0, 3, 4, &enc);
    printf("%s %.3f %d %s\n", uvcg_version(), psnr, (int)bad, uvcg_last_error());
    uvcg_protection_free(prot);
    uvcg_clip_free(clip);
    return 0;
}
"#;

#[test]
fn header_compiles_and_links_from_c() {
    let include = Path::new(env!("CARGO_MANIFEST_DIR")).join("include");
    let header = std::fs::read_to_string(include.join("uvcg.h")).unwrap();
    for symbol in [
        "uvcg_protect",
        "uvcg_last_error",
        "UVCG_STATUS_PANIC",
        "typedef struct UvcgClip UvcgClip",
    ] {
        assert!(header.contains(symbol), "header lacks {symbol}");
    }

    let lib = target_dir().join("libuvcg_ffi.a");
    if Command::new("cc").arg("--version").output().is_err() || !lib.exists() {
        eprintln!("no C compiler or static library; checked header text only");
        return;
    }
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("main.c");
    let exe = dir.path().join("main");
    std::fs::write(&src, C_PROGRAM).unwrap();
    let build = Command::new("cc")
        .args(["-std=c99", "-Wall", "-Werror", "-o"])
        .arg(&exe)
        .arg(&src)
        .arg("-I")
        .arg(&include)
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm"])
        .output()
        .unwrap();
    assert!(build.status.success(), "{}", String::from_utf8_lossy(&build.stderr));
    let run = Command::new(&exe).output().unwrap();
    assert!(run.status.success(), "exit {:?}", run.status.code());
    let stdout = String::from_utf8(run.stdout).unwrap();
    let fields: Vec<&str> = stdout.split_whitespace().collect();
    assert_eq!(fields[0], env!("CARGO_PKG_VERSION"));
    let psnr: f64 = fields[1].parse().unwrap();
    assert!(psnr > 25.0 && psnr < 40.0, "{stdout}");
    assert_eq!(fields[2], (UvcgStatus::Config as i32).to_string());
}
