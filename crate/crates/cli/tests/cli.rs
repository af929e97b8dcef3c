//! End-to-end checks of the `sgda` binary: exit codes, option layering,
//! artifact determinism, and the tiny train/detect/eval round trip.

mod common;

use std::path::{Path, PathBuf};

use common::{assert_same_artifacts, code_of, ok_in, run_in, sgda, stderr_of, stdout_of};
use sgda_core::ct::{write_mhd, Volume, Voxels};
use tempfile::TempDir;

/// HU scan plus a box-shaped lung mask on the same grid.
fn fixture_volumes() -> (Volume, Volume) {
    let shape = [10, 12, 14];
    let n: usize = shape.iter().product();
    let hu: Vec<i16> = (0..n).map(|i| -1000 + (i as i16 % 29) * 50).collect();
    let scan = Volume::new(shape, Voxels::Hu(hu), [0.8, 1.25, 2.0], [1.0, -2.0, 3.0]).unwrap();
    let mut mask = vec![0u8; n];
    for z in 2..8 {
        for y in 3..9 {
            for x in 4..10 {
                mask[(z * shape[1] + y) * shape[2] + x] = 1;
            }
        }
    }
    let mask_vol = Volume::new(
        shape,
        Voxels::Windowed(mask),
        [0.8, 1.25, 2.0],
        [1.0, -2.0, 3.0],
    )
    .unwrap();
    (scan, mask_vol)
}

/// MetaImage pairs `<stem>.mhd` and `<stem>_mask.mhd` in one directory.
fn write_ct_fixture(dir: &Path, stem: &str) -> (PathBuf, PathBuf) {
    let (scan, mask) = fixture_volumes();
    let scan_path = dir.join(format!("{stem}.mhd"));
    let mask_path = dir.join(format!("{stem}_mask.mhd"));
    write_mhd(&scan, &scan_path).unwrap();
    write_mhd(&mask, &mask_path).unwrap();
    (scan_path, mask_path)
}

/// The documented two-scan FROC fixture.
fn write_eval_fixture(dir: &Path) -> (PathBuf, PathBuf) {
    let cands = dir.join("cands.csv");
    let anns = dir.join("anns.csv");
    std::fs::write(
        &cands,
        "seriesuid,coordX,coordY,coordZ,probability\n\
         A,11,10,10,0.9\nA,50,50,50,0.8\nA,30,30,33,0.7\n\
         B,20,20,24,0.6\nB,5,5,5,0.5\n",
    )
    .unwrap();
    std::fs::write(
        &anns,
        "seriesuid,coordX,coordY,coordZ,diameter_mm\n\
         A,10,10,10,10\nA,30,30,30,8\nB,20,20,20,6\n",
    )
    .unwrap();
    (cands, anns)
}

/// Two small synthetic sites kept cheap enough for per-test generation.
fn write_tiny_domains(dir: &Path) -> PathBuf {
    let path = dir.join("domains.json");
    std::fs::write(
        &path,
        r#"[
  {"domain_id": "alpha", "extent": 32, "noise_sigma": 3.0, "vessel_count": 4,
   "nodule_count": [1, 2], "nodule_radius": [2.0, 3.5]},
  {"domain_id": "beta", "extent": 32, "intensity_offset": 20.0, "contrast_gain": 1.1,
   "noise_sigma": 5.0, "vessel_count": 6, "nodule_count": [1, 2],
   "nodule_radius": [2.0, 3.0], "blur_level": 1}
]"#,
    )
    .unwrap();
    path
}

fn resolved_options(dir: &Path) -> serde_json::Value {
    let text = std::fs::read_to_string(dir.join("config.resolved.json")).unwrap();
    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    v["options"].clone()
}

#[test]
fn help_exits_zero_for_every_subcommand() {
    let subs = [
        "preprocess",
        "eval",
        "train",
        "synth",
        "gradcheck",
        "params",
        "assignments",
        "detect",
    ];
    for sub in subs {
        let out = sgda().args([sub, "--help"]).output().unwrap();
        assert_eq!(code_of(&out), 0, "{sub} --help");
    }
    let out = sgda().arg("--help").output().unwrap();
    assert_eq!(code_of(&out), 0);
}

#[test]
fn preprocess_emits_unit_spacing_sidecar_and_reruns_identically() {
    let tmp = TempDir::new().unwrap();
    let (scan, mask) = write_ct_fixture(tmp.path(), "scan");
    let scan = scan.to_str().unwrap();
    let mask = mask.to_str().unwrap();

    let stdout = ok_in(
        tmp.path(),
        &["preprocess", "--input", scan, "--mask", mask, "--out", "out_a"],
    );
    assert!(stdout.contains("scan:"), "{stdout}");

    let sidecar: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(tmp.path().join("out_a/scan.sidecar.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(sidecar["spacing_mm"], serde_json::json!([1.0, 1.0, 1.0]));
    assert!(tmp.path().join("out_a/scan.sgdt").is_file());
    assert!(tmp.path().join("out_a/config.resolved.json").is_file());

    ok_in(
        tmp.path(),
        &["preprocess", "--input", scan, "--mask", mask, "--out", "out_b"],
    );
    assert_same_artifacts(&tmp.path().join("out_a"), &tmp.path().join("out_b"));
}

#[test]
fn preprocess_without_mask_flag_is_usage_error() {
    let tmp = TempDir::new().unwrap();
    let (scan, _) = write_ct_fixture(tmp.path(), "scan");
    let out = run_in(
        tmp.path(),
        &["preprocess", "--input", scan.to_str().unwrap(), "--out", "out"],
    );
    assert_eq!(code_of(&out), 2);
    assert!(stderr_of(&out).contains("--mask"), "{}", stderr_of(&out));
}

#[test]
fn preprocess_missing_input_file_is_io_error() {
    let tmp = TempDir::new().unwrap();
    let (_, mask) = write_ct_fixture(tmp.path(), "scan");
    let out = run_in(
        tmp.path(),
        &[
            "preprocess",
            "--input",
            "nope.mhd",
            "--mask",
            mask.to_str().unwrap(),
            "--out",
            "out",
        ],
    );
    assert_eq!(code_of(&out), 3);
    assert!(stderr_of(&out).contains("nope.mhd"), "{}", stderr_of(&out));
}

#[test]
fn preprocess_rejects_mask_grid_mismatch() {
    let tmp = TempDir::new().unwrap();
    let (scan, _) = write_ct_fixture(tmp.path(), "scan");
    let odd = Volume::new(
        [4, 4, 4],
        Voxels::Windowed(vec![1; 64]),
        [1.0, 1.0, 1.0],
        [0.0, 0.0, 0.0],
    )
    .unwrap();
    let odd_path = tmp.path().join("odd_mask.mhd");
    write_mhd(&odd, &odd_path).unwrap();
    let out = run_in(
        tmp.path(),
        &[
            "preprocess",
            "--input",
            scan.to_str().unwrap(),
            "--mask",
            odd_path.to_str().unwrap(),
            "--out",
            "out",
        ],
    );
    assert_eq!(code_of(&out), 2);
    assert!(
        stderr_of(&out).contains("mask grid"),
        "{}",
        stderr_of(&out)
    );
}

#[test]
fn preprocess_directory_mode_processes_every_scan() {
    let tmp = TempDir::new().unwrap();
    let scans = tmp.path().join("scans");
    let masks = tmp.path().join("masks");
    std::fs::create_dir_all(&scans).unwrap();
    std::fs::create_dir_all(&masks).unwrap();
    for stem in ["a", "b"] {
        let (scan, mask) = fixture_volumes();
        write_mhd(&scan, &scans.join(format!("{stem}.mhd"))).unwrap();
        write_mhd(&mask, &masks.join(format!("{stem}.mhd"))).unwrap();
    }
    let stdout = ok_in(
        tmp.path(),
        &[
            "preprocess",
            "--input",
            "scans",
            "--mask",
            "masks",
            "--out",
            "out",
            "--jobs",
            "2",
        ],
    );
    let lines: Vec<&str> = stdout.lines().collect();
    assert_eq!(lines.len(), 2, "{stdout}");
    assert!(lines[0].starts_with("a:") && lines[1].starts_with("b:"), "{stdout}");
    for stem in ["a", "b"] {
        assert!(tmp.path().join(format!("out/{stem}.sgdt")).is_file());
        assert!(tmp
            .path()
            .join(format!("out/{stem}.sidecar.json"))
            .is_file());
    }
}

#[test]
fn eval_scores_the_two_scan_fixture() {
    let tmp = TempDir::new().unwrap();
    let (cands, anns) = write_eval_fixture(tmp.path());
    let stdout = ok_in(
        tmp.path(),
        &[
            "eval",
            "--candidates",
            cands.to_str().unwrap(),
            "--annotations",
            anns.to_str().unwrap(),
            "--scans",
            "2",
            "--out",
            "froc.csv",
        ],
    );
    for line in [
        "0.125 0.33333",
        "0.25 0.33333",
        "0.5 0.66667",
        "1 0.66667",
        "8 0.66667",
        "average 0.57143",
    ] {
        assert!(stdout.contains(line), "missing `{line}` in:\n{stdout}");
    }
    let curve = std::fs::read_to_string(tmp.path().join("froc.csv")).unwrap();
    assert!(curve.starts_with("section,threshold,fp_per_scan,sensitivity\n"));
    assert!(tmp.path().join("config.resolved.json").is_file());
}

#[test]
fn eval_empty_candidate_file_scores_zero_everywhere() {
    let tmp = TempDir::new().unwrap();
    let (_, anns) = write_eval_fixture(tmp.path());
    let empty = tmp.path().join("none.csv");
    std::fs::write(&empty, "seriesuid,coordX,coordY,coordZ,probability\n").unwrap();
    let stdout = ok_in(
        tmp.path(),
        &[
            "eval",
            "--candidates",
            empty.to_str().unwrap(),
            "--annotations",
            anns.to_str().unwrap(),
            "--scans",
            "2",
            "--out",
            "froc.csv",
        ],
    );
    assert!(stdout.contains("average 0.00000"), "{stdout}");
    for line in stdout.lines().take(7) {
        assert!(line.ends_with(" 0.00000"), "{stdout}");
    }
}

#[test]
fn eval_malformed_candidate_line_is_parse_error_naming_the_line() {
    let tmp = TempDir::new().unwrap();
    let (_, anns) = write_eval_fixture(tmp.path());
    let bad = tmp.path().join("bad.csv");
    std::fs::write(
        &bad,
        "seriesuid,coordX,coordY,coordZ,probability\nA,1,2,3,0.5\nA,1,2,3\n",
    )
    .unwrap();
    let out = run_in(
        tmp.path(),
        &[
            "eval",
            "--candidates",
            bad.to_str().unwrap(),
            "--annotations",
            anns.to_str().unwrap(),
            "--scans",
            "1",
            "--out",
            "froc.csv",
        ],
    );
    assert_eq!(code_of(&out), 3);
    assert!(stderr_of(&out).contains("line 3"), "{}", stderr_of(&out));
}

#[test]
fn eval_zero_scan_count_is_usage_error() {
    let tmp = TempDir::new().unwrap();
    let (cands, anns) = write_eval_fixture(tmp.path());
    let out = run_in(
        tmp.path(),
        &[
            "eval",
            "--candidates",
            cands.to_str().unwrap(),
            "--annotations",
            anns.to_str().unwrap(),
            "--scans",
            "0",
            "--out",
            "froc.csv",
        ],
    );
    assert_eq!(code_of(&out), 2);
}

#[test]
fn params_prints_closed_form_counts() {
    let tmp = TempDir::new().unwrap();
    let count = |args: &[&str]| {
        let mut all = vec!["params"];
        all.extend_from_slice(args);
        ok_in(tmp.path(), &all).trim().to_string()
    };
    assert_eq!(count(&["--channels", "64"]), "13376");
    assert_eq!(count(&["--channels", "64", "--fuse", "mean_only"]), "5184");
    // a single direction cannot cross-attend, so the attention weights vanish
    assert_eq!(count(&["--channels", "64", "--directions", "axial"]), "1728");
    assert_eq!(count(&["--channels", "64", "--adapters", "1"]), "9920");
}

#[test]
fn params_layers_flag_over_env_over_config() {
    let tmp = TempDir::new().unwrap();
    let cfg = tmp.path().join("opts.json");
    std::fs::write(&cfg, r#"{"adapters": 5}"#).unwrap();
    let run = |extra: &[&str], env: Option<&str>| {
        let mut args = vec!["params", "--channels", "64"];
        args.extend_from_slice(extra);
        let mut cmd = sgda();
        cmd.current_dir(tmp.path()).args(&args);
        if let Some(v) = env {
            cmd.env("SGDA_ADAPTERS", v);
        }
        let out = cmd.output().unwrap();
        assert!(out.status.success(), "{}", stderr_of(&out));
        stdout_of(&out).trim().to_string()
    };
    let cfg_flag: &[&str] = &["--config", cfg.to_str().unwrap()];
    assert_eq!(run(cfg_flag, None), "16832"); // N=5 from the file
    assert_eq!(run(cfg_flag, Some("1")), "9920"); // env N=1 beats the file
    let mut with_flag = vec!["--adapters", "3"];
    with_flag.extend_from_slice(cfg_flag);
    assert_eq!(run(&with_flag, Some("1")), "13376"); // flag N=3 beats both
}

#[test]
fn params_rejects_unknown_config_key() {
    let tmp = TempDir::new().unwrap();
    let cfg = tmp.path().join("opts.json");
    std::fs::write(&cfg, r#"{"adaptors": 5}"#).unwrap();
    let out = run_in(
        tmp.path(),
        &["params", "--channels", "64", "--config", cfg.to_str().unwrap()],
    );
    assert_eq!(code_of(&out), 2);
    assert!(stderr_of(&out).contains("adaptors"), "{}", stderr_of(&out));
}

#[test]
fn params_without_channels_anywhere_is_usage_error() {
    let tmp = TempDir::new().unwrap();
    let out = run_in(tmp.path(), &["params"]);
    assert_eq!(code_of(&out), 2);
    assert!(stderr_of(&out).contains("channels"), "{}", stderr_of(&out));
}

#[test]
fn gradcheck_passes_and_prints_the_check_table() {
    let tmp = TempDir::new().unwrap();
    let stdout = ok_in(tmp.path(), &["gradcheck"]);
    assert!(stdout.contains("sgda_module"), "{stdout}");
    assert!(stdout.contains("checks passed"), "{stdout}");
    assert!(!stdout.contains("FAIL"), "{stdout}");
}

#[test]
fn synth_is_deterministic_and_its_echo_reproduces_the_run() {
    let tmp = TempDir::new().unwrap();
    let domains = write_tiny_domains(tmp.path());
    let base: &[&str] = &[
        "synth",
        "--volumes",
        "2",
        "--seed",
        "5",
        "--domains",
        domains.to_str().unwrap(),
    ];
    let go = |out: &str, extra: &[&str]| {
        let mut args = base.to_vec();
        args.extend_from_slice(&["--out", out]);
        args.extend_from_slice(extra);
        ok_in(tmp.path(), &args)
    };
    go("run_a", &["--jobs", "1"]);
    go("run_b", &["--jobs", "3"]);
    assert_same_artifacts(&tmp.path().join("run_a"), &tmp.path().join("run_b"));

    // the echoed config alone reproduces the run, domains included
    let echo = tmp.path().join("run_a/config.resolved.json");
    ok_in(
        tmp.path(),
        &[
            "synth",
            "--out",
            "run_c",
            "--config",
            echo.to_str().unwrap(),
        ],
    );
    assert_same_artifacts(&tmp.path().join("run_a"), &tmp.path().join("run_c"));
}

#[test]
fn train_layers_env_over_config_and_flag_over_env() {
    let tmp = TempDir::new().unwrap();
    let domains = write_tiny_domains(tmp.path());
    ok_in(
        tmp.path(),
        &[
            "synth",
            "--out",
            "data",
            "--volumes",
            "1",
            "--seed",
            "2",
            "--domains",
            domains.to_str().unwrap(),
        ],
    );
    let cfg = tmp.path().join("train.json");
    std::fs::write(
        &cfg,
        r#"{"epochs": 7, "steps": 1, "batch": 1, "channels": "4,8,16"}"#,
    )
    .unwrap();

    let mut cmd = sgda();
    cmd.current_dir(tmp.path())
        .args([
            "train",
            "--data",
            "data",
            "--out",
            "run_env",
            "--config",
            cfg.to_str().unwrap(),
        ])
        .env("SGDA_EPOCHS", "3");
    let out = cmd.output().unwrap();
    assert!(out.status.success(), "{}", stderr_of(&out));
    let opts = resolved_options(&tmp.path().join("run_env"));
    assert_eq!(opts["epochs"], 3, "env beats the config file: {opts}");
    assert_eq!(opts["channels"], serde_json::json!([4, 8, 16]));
    let loss = std::fs::read_to_string(tmp.path().join("run_env/loss.csv")).unwrap();
    assert_eq!(loss.lines().count(), 1 + 3, "header plus epochs*steps rows");

    let mut cmd = sgda();
    cmd.current_dir(tmp.path())
        .args([
            "train",
            "--data",
            "data",
            "--out",
            "run_flag",
            "--epochs",
            "1",
            "--config",
            cfg.to_str().unwrap(),
        ])
        .env("SGDA_EPOCHS", "3");
    let out = cmd.output().unwrap();
    assert!(out.status.success(), "{}", stderr_of(&out));
    let opts = resolved_options(&tmp.path().join("run_flag"));
    assert_eq!(opts["epochs"], 1, "flag beats the environment: {opts}");
}

#[test]
fn train_detect_assignments_eval_round_trip() {
    let tmp = TempDir::new().unwrap();
    let domains = write_tiny_domains(tmp.path());
    ok_in(
        tmp.path(),
        &[
            "synth",
            "--out",
            "data",
            "--volumes",
            "2",
            "--seed",
            "1",
            "--domains",
            domains.to_str().unwrap(),
        ],
    );
    let stdout = ok_in(
        tmp.path(),
        &[
            "train",
            "--data",
            "data",
            "--out",
            "run",
            "--channels",
            "4,8,16",
            "--epochs",
            "2",
            "--steps",
            "2",
            "--batch",
            "1",
            "--patch",
            "16",
            "--seed",
            "0",
        ],
    );
    assert!(stdout.contains("epoch 0"), "{stdout}");
    assert!(stdout.contains("checkpoint:"), "{stdout}");

    let stdout = ok_in(
        tmp.path(),
        &[
            "detect",
            "--checkpoint",
            "run/checkpoint",
            "--data",
            "data",
            "--out",
            "dets",
            "--tile",
            "16",
            "--assignments",
            "assign.json",
        ],
    );
    assert!(stdout.contains("alpha:"), "{stdout}");
    assert!(stdout.contains("beta:"), "{stdout}");
    for domain in ["alpha", "beta"] {
        let csv =
            std::fs::read_to_string(tmp.path().join(format!("dets/{domain}/candidates.csv")))
                .unwrap();
        assert!(csv.starts_with("seriesuid,coordX,coordY,coordZ,probability\n"));
    }
    let rows: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(tmp.path().join("assign.json")).unwrap())
            .unwrap();
    let rows = rows.as_array().unwrap();
    assert!(!rows.is_empty());
    for row in rows {
        let sum: f64 = row["mean_weights"]
            .as_array()
            .unwrap()
            .iter()
            .map(|w| w.as_f64().unwrap())
            .sum();
        assert!((sum - 1.0).abs() < 1e-6, "assignment row sums to {sum}");
    }

    let stdout = ok_in(
        tmp.path(),
        &[
            "eval",
            "--candidates",
            "dets/alpha/candidates.csv",
            "--annotations",
            "data/alpha/annotations.csv",
            "--scans",
            "2",
            "--out",
            "froc_alpha.csv",
        ],
    );
    assert!(stdout.contains("average "), "{stdout}");

    // standalone assignments pass over the same checkpoint agrees with the
    // per-detection export
    ok_in(
        tmp.path(),
        &[
            "assignments",
            "--checkpoint",
            "run/checkpoint",
            "--data",
            "data",
            "--out",
            "assign2.json",
            "--tile",
            "16",
        ],
    );
    let a = std::fs::read(tmp.path().join("assign.json")).unwrap();
    let b = std::fs::read(tmp.path().join("assign2.json")).unwrap();
    assert_eq!(a, b, "assignments export differs between detect and assignments");
}

#[test]
fn detect_without_a_matching_head_is_usage_error() {
    let tmp = TempDir::new().unwrap();
    let domains = write_tiny_domains(tmp.path());
    ok_in(
        tmp.path(),
        &[
            "synth",
            "--out",
            "data",
            "--volumes",
            "1",
            "--seed",
            "3",
            "--domains",
            domains.to_str().unwrap(),
        ],
    );
    ok_in(
        tmp.path(),
        &[
            "train",
            "--data",
            "data",
            "--out",
            "run",
            "--channels",
            "4,8,16",
            "--epochs",
            "1",
            "--steps",
            "1",
            "--batch",
            "1",
            "--patch",
            "16",
            "--sgda",
            "false",
        ],
    );
    // same volumes under a domain name the checkpoint never saw
    let gamma = tmp.path().join("other/gamma");
    std::fs::create_dir_all(&gamma).unwrap();
    for f in ["vol_000.mhd", "vol_000.raw"] {
        std::fs::copy(tmp.path().join("data/alpha").join(f), gamma.join(f)).unwrap();
    }
    let out = run_in(
        tmp.path(),
        &[
            "detect",
            "--checkpoint",
            "run/checkpoint",
            "--data",
            "other",
            "--out",
            "dets",
            "--tile",
            "16",
        ],
    );
    assert_eq!(code_of(&out), 2);
    assert!(
        stderr_of(&out).contains("no detection head"),
        "{}",
        stderr_of(&out)
    );
}
