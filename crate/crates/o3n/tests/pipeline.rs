//! Command-line behaviors: artifacts, error diagnostics, and flag
//! precedence, exercised through the real binary.

use std::path::{Path, PathBuf};
use std::process::Command;

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_o3n")
}

fn temp_base(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("o3n_pipe_{tag}_{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn run(args: &[&str]) -> std::process::Output {
    Command::new(bin()).args(args).output().expect("binary runs")
}

fn find_run_dir(out: &Path) -> PathBuf {
    std::fs::read_dir(out).unwrap().next().expect("run dir exists").unwrap().path()
}

#[test]
fn gen_data_default_writes_240_videos_and_index() {
    let base = temp_base("gendata");
    let out = base.join("runs");
    let output = run(&["gen-data", "--out", out.to_str().unwrap()]);
    assert!(output.status.success());
    let corpus = find_run_dir(&out).join("corpus");
    let videos = std::fs::read_dir(&corpus)
        .unwrap()
        .filter(|e| {
            e.as_ref().unwrap().path().extension().map(|x| x == "o3nv").unwrap_or(false)
        })
        .count();
    assert_eq!(videos, 240, "default config emits 6 classes x 40 videos");
    let index = std::fs::read_to_string(corpus.join("index.tsv")).unwrap();
    assert_eq!(index.lines().count(), 240);
    for line in index.lines() {
        let fields: Vec<&str> = line.split('\t').collect();
        assert_eq!(fields.len(), 3, "index line is <path>\\t<label>\\t<split>: {line:?}");
        assert!(fields[1].parse::<usize>().unwrap() < 6);
        assert_eq!(fields[2], "train");
    }
}

#[test]
fn gen_data_rerun_is_identical() {
    let base = temp_base("gendata_rerun");
    let out = base.join("runs");
    assert!(run(&["gen-data", "--out", out.to_str().unwrap()]).status.success());
    let corpus = find_run_dir(&out).join("corpus");
    let index_before = std::fs::read(corpus.join("index.tsv")).unwrap();
    let sample_before = std::fs::read(corpus.join("train_0000.o3nv")).unwrap();
    assert!(run(&["gen-data", "--out", out.to_str().unwrap()]).status.success());
    assert_eq!(std::fs::read(corpus.join("index.tsv")).unwrap(), index_before);
    assert_eq!(std::fs::read(corpus.join("train_0000.o3nv")).unwrap(), sample_before);
}

#[test]
fn seed_flag_overrides_config_file() {
    let base = temp_base("precedence");
    let cfg = base.join("cfg.txt");
    std::fs::write(&cfg, "seed = 13\nvideos_per_class = 1\n").unwrap();
    let out = base.join("runs");
    let output = run(&[
        "gen-data",
        "--config",
        cfg.to_str().unwrap(),
        "--seed",
        "7",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(output.status.success());
    let run_dir = find_run_dir(&out);
    let name = run_dir.file_name().unwrap().to_string_lossy().into_owned();
    assert!(name.ends_with("-s7"), "flag seed must win over the file: {name}");
    let resolved = std::fs::read_to_string(run_dir.join("config_resolved.txt")).unwrap();
    assert!(resolved.contains("seed = 7"));
    assert!(resolved.contains("videos_per_class = 1"));
}

#[test]
fn unknown_config_key_is_named() {
    let base = temp_base("badkey");
    let cfg = base.join("cfg.txt");
    std::fs::write(&cfg, "foo = 1\n").unwrap();
    let output = run(&[
        "gen-data",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        base.join("runs").to_str().unwrap(),
    ]);
    assert!(!output.status.success());
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(stderr.contains("foo"), "diagnostic must name the key: {stderr}");
}

#[test]
fn missing_checkpoint_is_named_in_error() {
    let base = temp_base("nockpt");
    let cfg = base.join("cfg.txt");
    std::fs::write(
        &cfg,
        "videos_per_class = 2\nft_init = o3n\ncheckpoint = /nonexistent/ckpt.o3nc\n",
    )
    .unwrap();
    let out = base.join("runs");
    assert!(run(&["gen-data", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()])
        .status
        .success());
    let output = run(&[
        "finetune",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(!output.status.success());
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(
        stderr.contains("/nonexistent/ckpt.o3nc"),
        "diagnostic must name the missing path: {stderr}"
    );
}

#[test]
fn encode_emits_one_image_per_channel_triple() {
    let base = temp_base("encode");
    let out = base.join("runs");
    // A constant video encodes to zero everywhere; images are mid-gray.
    let video = o3n::video::Video::new(8, 16, 16, 3, vec![90; 8 * 16 * 16 * 3]).unwrap();
    let vpath = base.join("flat.o3nv");
    video.save(&vpath).unwrap();
    let output = run(&[
        "encode",
        vpath.to_str().unwrap(),
        "--encoder",
        "stack_of_diff",
        "--clip-len",
        "6",
        "--start",
        "2",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(output.status.success(), "{}", String::from_utf8_lossy(&output.stderr));
    let run_dir = find_run_dir(&out);
    let images: Vec<PathBuf> = (0..5)
        .map(|b| run_dir.join(format!("flat_stack_of_diff_b{b}.ppm")))
        .collect();
    for path in &images {
        let bytes = std::fs::read(path).unwrap_or_else(|_| panic!("missing {path:?}"));
        assert!(bytes.starts_with(b"P6\n16 16\n255\n"));
        assert!(bytes[13..].iter().all(|&p| p == 128), "constant clip must render mid-gray");
    }
    assert!(!run_dir.join("flat_stack_of_diff_b5.ppm").exists(), "15 channels yield 5 images");
}

#[test]
fn inspect_filters_tiles_first_layer_kernels() {
    let base = temp_base("filters");
    let out = base.join("runs");
    let mut params = o3n::tensor::ParamSet::new();
    params
        .insert("trunk.conv0.w", o3n::tensor::Tensor::zeros(&[5, 5, 15, 16]))
        .unwrap();
    let ckpt = o3n::checkpoint::Checkpoint::from_params(&params, vec![]);
    let cpath = base.join("ckpt.o3nc");
    ckpt.save(&cpath).unwrap();
    let output = run(&[
        "inspect-filters",
        cpath.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(output.status.success(), "{}", String::from_utf8_lossy(&output.stderr));
    let grid = std::fs::read(find_run_dir(&out).join("filters.ppm")).unwrap();
    // 16 kernels tile 4x4; 5x5 kernels upscaled 8x with 1-pixel borders.
    let side = 4 * (5 * 8 + 1) + 1;
    let header = format!("P6\n{side} {side}\n255\n");
    assert!(grid.starts_with(header.as_bytes()));
}
