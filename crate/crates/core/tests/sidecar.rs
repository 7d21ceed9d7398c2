//! The engine against a real child process: the echo sidecar binary.

mod common;

use std::io::{Read, Write};
use std::process::{Command, Stdio};

use common::{echo_sidecar, noise_clip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use uvcg::encoder::{IdentityEncoder, SidecarClient, SidecarEncoder};
use uvcg::wire::{self, Opcode, Tensor, MAGIC, VERSION};
use uvcg::{
    build_encoder, protect_video, Encoder, EncoderSpec, Error, FrameImage, LatentShape, LatentTensor, ProtectionConfig,
};

/// Feeds `input` to a fresh echo sidecar, closes its stdin, and returns every
/// reply plus the exit status.
fn exchange(input: &[u8]) -> (Vec<wire::Frame>, std::process::ExitStatus) {
    let mut child = Command::new(echo_sidecar())
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    let mut stdin = child.stdin.take().unwrap();
    // The sidecar may hang up early on fatal errors.
    let _ = stdin.write_all(input);
    drop(stdin);
    let mut out = Vec::new();
    child.stdout.take().unwrap().read_to_end(&mut out).unwrap();
    let status = child.wait().unwrap();
    let mut cursor = &out[..];
    let mut frames = Vec::new();
    while let Some(f) = wire::read_frame(&mut cursor).expect("sidecar replies are well framed") {
        frames.push(f);
    }
    (frames, status)
}

fn message(magic: [u8; 4], version: u8, opcode: u8, payload: &[u8]) -> Vec<u8> {
    let mut buf = Vec::new();
    wire::write_raw(&mut buf, magic, version, opcode, payload).unwrap();
    buf
}

fn error_code(frame: &wire::Frame) -> String {
    assert_eq!(frame.opcode, Opcode::Error as u8);
    let e: wire::ErrorPayload = serde_json::from_slice(&frame.payload).unwrap();
    e.code
}

#[test]
fn handshake_lists_encode_and_loss_grad() {
    let client = SidecarClient::launch(&echo_sidecar()).unwrap();
    let caps = client.capabilities();
    assert!(caps.deterministic);
    assert!(caps.supports(Opcode::Encode) && caps.supports(Opcode::LossGrad));
    assert_eq!(
        caps.latent_shape_for(4, 2),
        Some(LatentShape {
            channels: 3,
            height: 2,
            width: 4
        })
    );
}

#[test]
fn nondeterministic_sidecar_is_refused() {
    let cmd = format!("{} --nondeterministic", echo_sidecar());
    match SidecarClient::launch(&cmd) {
        Err(Error::Sidecar { code, .. }) => assert_eq!(code, "nondeterministic"),
        other => panic!("expected a sidecar error, got {:?}", other.err()),
    }
}

#[test]
fn missing_or_silent_sidecars_fail_cleanly() {
    assert!(matches!(SidecarClient::launch("exit 0"), Err(Error::Sidecar { .. })));
    assert!(matches!(
        SidecarClient::launch("printf 'not a protocol'"),
        Err(Error::Sidecar { .. })
    ));
    assert!(matches!(
        build_encoder(&EncoderSpec::sidecar("/nonexistent/uvcg-host")),
        Err(Error::Sidecar { .. })
    ));
}

#[test]
fn scalar_loss_grad_matches_identity() {
    let enc = SidecarEncoder::launch(&echo_sidecar()).unwrap();
    let frame = FrameImage::filled(1, 1, 0.5);
    let target = LatentTensor::new(
        LatentShape {
            channels: 3,
            height: 1,
            width: 1,
        },
        vec![0.53; 3],
    )
    .unwrap();
    let remote = enc.loss_gradient(&frame, &[0.0; 3], &target).unwrap();
    let local = IdentityEncoder.loss_gradient(&frame, &[0.0; 3], &target).unwrap();
    assert_eq!(remote.loss.to_bits(), local.loss.to_bits());
    assert!((remote.loss - 3.0 * 9e-4).abs() < 1e-7);
    for (r, l) in remote.grad.iter().zip(&local.grad) {
        assert_eq!(r.to_bits(), l.to_bits());
        assert!((r + 0.06).abs() < 1e-6);
    }
}

#[test]
fn shape_mismatch_is_reported_by_code() {
    let enc = SidecarEncoder::launch(&echo_sidecar()).unwrap();
    let frame = FrameImage::filled(2, 2, 0.5);
    let wrong = LatentTensor::new(
        LatentShape {
            channels: 3,
            height: 1,
            width: 1,
        },
        vec![0.0; 3],
    )
    .unwrap();
    assert!(enc.loss_gradient(&frame, &[0.0; 12], &wrong).is_err());
    // The connection is still usable.
    assert_eq!(enc.encode(&frame).unwrap().values(), frame.pixels());
}

#[test]
fn protect_video_through_echo_is_bit_identical() {
    let clip = noise_clip("v", 5, 4, 16, 16);
    let target = noise_clip("t", 6, 3, 16, 16);
    let config = ProtectionConfig {
        steps: 30,
        seed: 9,
        ..ProtectionConfig::default()
    };
    let local = protect_video(&clip, &target, &IdentityEncoder, &config).unwrap();
    let enc = SidecarEncoder::launch(&echo_sidecar()).unwrap();
    let remote = protect_video(&clip, &target, &enc, &config).unwrap();
    assert_eq!(local.losses, remote.losses);
    for (a, b) in local
        .perturbations
        .deltas
        .iter()
        .flatten()
        .zip(remote.perturbations.deltas.iter().flatten())
    {
        assert_eq!(a.to_bits(), b.to_bits());
    }
    for (a, b) in local.immunized.frames().iter().zip(remote.immunized.frames()) {
        assert_eq!(a, b);
    }
}

#[test]
fn bad_magic_gets_an_error_then_close() {
    let mut input = message(*b"XVCG", VERSION, Opcode::Hello as u8, &[]);
    input.extend(message(MAGIC, VERSION, Opcode::Hello as u8, &[]));
    let (frames, status) = exchange(&input);
    assert_eq!(frames.len(), 1);
    assert_eq!(error_code(&frames[0]), "magic");
    assert!(status.success());
}

#[test]
fn future_version_is_refused() {
    let (frames, _) = exchange(&message(MAGIC, 2, Opcode::Hello as u8, &[]));
    assert_eq!(frames.len(), 1);
    assert_eq!(error_code(&frames[0]), "unsupported_version");
}

#[test]
fn recoverable_errors_keep_the_connection() {
    let good = wire::encode_tensors(&[Tensor::new(vec![1, 1, 3], vec![0.1, 0.2, 0.3])]);
    let truncated = &good[..good.len() - 2];
    let mut wrong_dtype = good.clone();
    wrong_dtype[0] = 7;
    let mut input = message(MAGIC, VERSION, Opcode::Encode as u8, truncated);
    input.extend(message(MAGIC, VERSION, Opcode::Encode as u8, &wrong_dtype));
    input.extend(message(MAGIC, VERSION, 42, &[]));
    input.extend(message(MAGIC, VERSION, Opcode::EmbedText as u8, b"a cat"));
    input.extend(message(MAGIC, VERSION, Opcode::Encode as u8, &good));
    let (frames, status) = exchange(&input);
    assert!(status.success());
    let codes: Vec<_> = frames[..4].iter().map(error_code).collect();
    assert_eq!(codes, ["framing", "dtype", "unsupported_opcode", "unsupported_opcode"]);
    assert_eq!(frames[4].opcode, Opcode::Result as u8);
    let back = wire::decode_tensors(&frames[4].payload).unwrap();
    assert_eq!(back[0].data, vec![0.1, 0.2, 0.3]);
}

#[test]
fn truncated_stream_is_a_clean_disconnect() {
    let full = message(MAGIC, VERSION, Opcode::Hello as u8, &[]);
    for cut in 1..full.len() {
        let (frames, status) = exchange(&full[..cut]);
        assert!(frames.is_empty(), "cut at {cut}");
        assert!(status.success(), "cut at {cut}");
    }
}

#[test]
fn fuzzed_traffic_never_crashes_the_sidecar() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for case in 0..40 {
        let mut input = Vec::new();
        for _ in 0..rng.gen_range(1..5) {
            let body_len = rng.gen_range(0..64);
            let mut body: Vec<u8> = (0..body_len).map(|_| rng.gen()).collect();
            if rng.gen_bool(0.7) && body.len() >= 6 {
                body[..4].copy_from_slice(&MAGIC);
                body[4] = VERSION;
                body[5] = rng.gen_range(1..8);
            }
            // Sometimes lie about the length.
            let declared = if rng.gen_bool(0.2) {
                body.len() as u64 + rng.gen_range(1..8)
            } else {
                body.len() as u64
            };
            input.extend_from_slice(&declared.to_le_bytes());
            input.extend_from_slice(&body);
        }
        let (frames, status) = exchange(&input);
        assert!(status.success(), "case {case}: {status:?}");
        for f in &frames {
            assert!(
                f.opcode == Opcode::Error as u8 || f.opcode == Opcode::Result as u8,
                "case {case}: opcode {}",
                f.opcode
            );
        }
    }
}
