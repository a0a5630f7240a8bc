//! Integration tests for the command layer: config precedence, prep
//! idempotence, the round-trip command, and the installed binary's
//! behavior on good and bad inputs.

use std::path::Path;
use std::process::Command;

use specterra::{cmd_prep, cmd_roundtrip, load_cached_pairs, RunConfig};
use specterra_core::audio::{write_wav, AudioBuffer};
use specterra_core::seq::ingest_corpus;
use specterra_core::vad::VadConfig;

fn write_tone(path: &Path, f0: f64, rate: u32, secs: f64) {
    let n = (secs * rate as f64) as usize;
    let wave = AudioBuffer::new(
        (0..n)
            .map(|i| 0.4 * (std::f64::consts::TAU * f0 * i as f64 / rate as f64).sin())
            .collect::<Vec<f64>>(),
        rate,
    );
    write_wav(&wave, path).unwrap();
}

fn fixture_corpus(dir: &Path) -> std::path::PathBuf {
    write_tone(&dir.join("a_src.wav"), 200.0, 20_000, 0.4);
    write_tone(&dir.join("a_tgt.wav"), 300.0, 20_000, 0.4);
    write_tone(&dir.join("b_src.wav"), 220.0, 20_000, 0.5);
    write_tone(&dir.join("b_tgt.wav"), 330.0, 20_000, 0.5);
    let manifest = dir.join("pairs.tsv");
    std::fs::write(
        &manifest,
        "# toy corpus\none\ta_src.wav\ta_tgt.wav\ntwo\tb_src.wav\tb_tgt.wav\n",
    )
    .unwrap();
    manifest
}

#[test]
fn config_file_overrides_defaults_and_rejects_unknown_keys() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.cfg");
    std::fs::write(
        &path,
        "# comment\n[analysis]\nnfft = 128\nhop = 64\nd_model = 64\nbatch_size = 2\nlr0 = 0.001\nloss_normalize = false\n",
    )
    .unwrap();
    let cfg = RunConfig::load(Some(&path)).unwrap();
    assert_eq!(cfg.stft.nfft, 128);
    assert_eq!(cfg.stft.hop, 64);
    assert_eq!(cfg.model.d_model, 64);
    assert_eq!(cfg.train.batch_size, 2);
    assert_eq!(cfg.train.lr0, 1e-3);
    assert!(cfg.validate().is_ok());

    let bad = dir.path().join("bad.cfg");
    std::fs::write(&bad, "not_a_key = 3\n").unwrap();
    assert!(RunConfig::load(Some(&bad)).is_err());
}

#[test]
fn validation_ties_model_width_to_the_analysis() {
    let mut cfg = RunConfig::default();
    cfg.stft.nfft = 128;
    cfg.stft.hop = 64;
    // d_model still 256: must be rejected with a pointer at nfft/2
    let err = cfg.validate().unwrap_err().to_string();
    assert!(err.contains("nfft/2"), "unhelpful error: {err}");
}

#[test]
fn effective_config_echo_is_sorted_and_complete() {
    let cfg = RunConfig::default();
    let echo = cfg.echo();
    let lines: Vec<&str> = echo.lines().collect();
    let mut sorted = lines.clone();
    sorted.sort();
    assert_eq!(lines, sorted);
    for key in ["nfft", "hop", "d_model", "lr0", "seed", "window", "vad_threshold_db"] {
        assert!(
            echo.lines().any(|l| l.starts_with(&format!("{key} = "))),
            "echo missing {key}"
        );
    }
}

#[test]
fn prep_writes_caches_and_reruns_identically() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = fixture_corpus(dir.path());
    let mut cfg = RunConfig::default();
    cfg.stft.nfft = 128;
    cfg.stft.hop = 64;
    cfg.model.d_model = 64;

    let cache = dir.path().join("cache");
    let summary = cmd_prep(&cfg, &manifest, &cache).unwrap();
    assert_eq!(summary.processed, 2);
    assert_eq!(summary.skipped, 0);
    assert!(cache.join("pair_0000_src.vfsp").exists());
    assert!(cache.join("pair_0001_tgt.vfsp").exists());
    assert!(cache.join("index.tsv").exists());
    assert!(cache.join("prep_report.txt").exists());

    // idempotence: a rerun produces byte-identical caches
    let before: Vec<(String, Vec<u8>)> = list_files(&cache);
    cmd_prep(&cfg, &manifest, &cache).unwrap();
    let after = list_files(&cache);
    assert_eq!(before, after);

    // the cache round-trips to the same pairs as direct ingestion
    let cached = load_cached_pairs(&cfg, &cache).unwrap();
    let (direct, _) = ingest_corpus::<f32>(
        dir.path(),
        &manifest,
        &cfg.stft,
        &VadConfig::default(),
        16_000,
    )
    .unwrap();
    assert_eq!(cached.len(), direct.len());
    for (c, d) in cached.iter().zip(&direct) {
        assert_eq!(c.text_label, d.text_label);
        assert_eq!(c.source_mag, d.source_mag);
        assert_eq!(c.target_mag, d.target_mag);
    }
}

fn list_files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (
                e.file_name().to_string_lossy().into_owned(),
                std::fs::read(e.path()).unwrap(),
            )
        })
        .collect();
    out.sort_by(|a, b| a.0.cmp(&b.0));
    out
}

#[test]
fn prep_fails_on_empty_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = dir.path().join("empty.tsv");
    std::fs::write(&manifest, "# nothing\n").unwrap();
    let cfg = RunConfig::default();
    assert!(cmd_prep(&cfg, &manifest, &dir.path().join("cache")).is_err());
}

#[test]
fn roundtrip_command_reports_snr_and_frames() {
    let dir = tempfile::tempdir().unwrap();
    let wav = dir.path().join("voiced.wav");
    write_tone(&wav, 440.0, 16_000, 1.0);
    let report = cmd_roundtrip(&RunConfig::default(), &wav).unwrap();
    assert!(report.passed);
    assert!(report.snr_db >= 40.0);
    assert!(report.frames > 0);

    // silence: exact reconstruction, infinite SNR, defined as a pass
    let silent = dir.path().join("silence.wav");
    write_wav(&AudioBuffer::new(vec![0.0f64; 16_000], 16_000), &silent).unwrap();
    let report = cmd_roundtrip(&RunConfig::default(), &silent).unwrap();
    assert!(report.passed);
    assert!(report.snr_db.is_infinite());
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_specterra"))
}

#[test]
fn binary_roundtrip_subcommand_succeeds() {
    let dir = tempfile::tempdir().unwrap();
    let wav = dir.path().join("in.wav");
    write_tone(&wav, 330.0, 16_000, 0.8);
    let out = bin().arg("roundtrip").arg(&wav).output().unwrap();
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("PASS"));
    assert!(stdout.contains("# effective config"));
}

#[test]
fn binary_convert_rejects_missing_input_and_bad_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    // missing input file
    let out = bin()
        .args(["convert", "--checkpoint"])
        .arg(dir.path().join("none.vfvc"))
        .arg(dir.path().join("missing.wav"))
        .arg("--out")
        .arg(dir.path().join("out.wav"))
        .output()
        .unwrap();
    assert!(!out.status.success());

    // present input but a checkpoint with the wrong magic
    let wav = dir.path().join("in.wav");
    write_tone(&wav, 330.0, 16_000, 0.5);
    let fake = dir.path().join("fake.vfvc");
    std::fs::write(&fake, b"XXXX not a checkpoint").unwrap();
    let out = bin()
        .args(["convert", "--checkpoint"])
        .arg(&fake)
        .arg(&wav)
        .arg("--out")
        .arg(dir.path().join("out.wav"))
        .output()
        .unwrap();
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("checkpoint"), "stderr: {stderr}");
}

#[test]
fn binary_gradcheck_passes_and_lists_ops() {
    let out = bin().arg("gradcheck").output().unwrap();
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    for op in ["matmul", "softmax_lastdim", "layer_norm", "dropout", "transformer_loss_end_to_end"] {
        assert!(stdout.contains(op), "gradcheck output missing {op}");
    }
    assert!(stdout.contains("PASS"));
    assert!(!stdout.contains("FAIL"));
}

#[test]
fn binary_prep_exits_nonzero_on_empty_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = dir.path().join("m.tsv");
    std::fs::write(&manifest, "# empty\n").unwrap();
    let out = bin()
        .args(["prep", "--manifest"])
        .arg(&manifest)
        .arg("--cache-dir")
        .arg(dir.path().join("cache"))
        .output()
        .unwrap();
    assert!(!out.status.success());
}
