use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mvdlm::read_nifti;
use serde_json::Value;

fn mvdlm(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mvdlm"))
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .env_remove("MVDLM_WORKERS")
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = mvdlm(dir, args);
    assert!(
        out.status.success(),
        "mvdlm {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn code(dir: &Path, args: &[&str]) -> i32 {
    mvdlm(dir, args).status.code().expect("exit code")
}

fn manifest(path: impl AsRef<Path>) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn values(path: impl AsRef<Path>) -> Vec<f64> {
    read_nifti(path).unwrap().data
}

/// Two-sphere phantom on a block design; returns the output directory.
fn simulate(dir: &Path, snr: f64) -> PathBuf {
    let spec = format!(
        r#"{{
            "dims": [10, 10, 5],
            "regions": [
                {{"center": [3, 3, 2], "radius": 1.5, "effect": 1.0}},
                {{"center": [7, 6, 2], "radius": 1.2, "effect": 1.0}}
            ],
            "snr": {snr},
            "seed": 11,
            "paradigm": "B1",
            "n_scans": 120,
            "tr": 2.0
        }}"#
    );
    std::fs::write(dir.join("phantom.json"), spec).unwrap();
    ok(dir, &["simulate", "--spec", "phantom.json", "-o", "sim"]);
    dir.join("sim")
}

#[test]
fn fit_is_byte_identical_across_runs_and_workers() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    simulate(dir, 3.0);
    let fit = |out: &str, workers: &str| {
        ok(
            dir,
            &[
                "fit",
                "--bold",
                "sim/bold.nii.gz",
                "--design",
                "sim/design.csv",
                "--draws",
                "300",
                "--burn-in",
                "10",
                "--seed",
                "42",
                "--workers",
                workers,
                "-o",
                out,
            ],
        )
    };
    fit("a", "1");
    fit("b", "3");
    for file in [
        "evidence_B1.nii.gz",
        "summary/payload.bin",
        "summary/manifest.json",
    ] {
        let a = std::fs::read(dir.join("a").join(file)).unwrap();
        let b = std::fs::read(dir.join("b").join(file)).unwrap();
        assert!(a == b, "{file} differs between runs");
    }
    let m = manifest(dir.join("a/manifest.json"));
    assert_eq!(m["seed"], 42);
    assert_eq!(m["config"]["draws"], 300);
    assert_eq!(m["config_hash"].as_str().unwrap().len(), 64);
    assert_eq!(m["results"]["voxels_failed"], 0);
}

#[test]
fn simulated_phantom_regions_are_detected() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let sim = simulate(dir, 30.0);
    assert!(
        manifest(sim.join("manifest.json"))["results"]["active_voxels"]
            .as_u64()
            .unwrap()
            > 10
    );
    for alg in ["fest", "fsts", "ffbs"] {
        let out = format!("fit_{alg}");
        ok(
            dir,
            &[
                "fit",
                "--bold",
                "sim/bold.nii.gz",
                "--design",
                "sim/design.csv",
                "--algorithm",
                alg,
                "--draws",
                "500",
                "--burn-in",
                "10",
                "--no-summary",
                "-o",
                &out,
            ],
        );
        let truth = values(sim.join("truth.nii.gz"));
        let evidence = values(dir.join(&out).join("evidence_B1.nii.gz"));
        let dims = [10usize, 10, 5];
        let region = |c: [usize; 3], r: f64| -> Vec<usize> {
            (0..truth.len())
                .filter(|&v| {
                    let ijk = [
                        v % dims[0],
                        (v / dims[0]) % dims[1],
                        v / (dims[0] * dims[1]),
                    ];
                    (0..3)
                        .map(|a| (ijk[a] as f64 - c[a] as f64).powi(2))
                        .sum::<f64>()
                        <= r * r
                })
                .collect()
        };
        for (c, r) in [([3, 3, 2], 1.5), ([7, 6, 2], 1.2)] {
            let vox = region(c, r);
            assert!(vox.iter().all(|&v| truth[v] == 1.0));
            let hit = vox.iter().filter(|&&v| evidence[v] > 0.95).count();
            assert!(
                hit * 10 >= vox.len() * 9,
                "{alg}: region {c:?} {hit}/{}",
                vox.len()
            );
        }
        let false_pos = (0..truth.len())
            .filter(|&v| truth[v] == 0.0 && evidence[v] > 0.95)
            .count();
        assert!(false_pos <= 2, "{alg}: {false_pos} false positives");
    }
}

#[test]
fn group_of_one_matches_the_subject_map() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    simulate(dir, 2.0);
    let draws = "4000";
    ok(
        dir,
        &[
            "fit",
            "--bold",
            "sim/bold.nii.gz",
            "--design",
            "sim/design.csv",
            "--draws",
            draws,
            "--burn-in",
            "10",
            "--seed",
            "1",
            "-o",
            "subj",
        ],
    );
    ok(
        dir,
        &[
            "group",
            "--subject",
            "subj",
            "--draws",
            draws,
            "--seed",
            "2",
            "-o",
            "grp",
        ],
    );
    let subject = values(dir.join("subj/evidence_B1.nii.gz"));
    let group = values(dir.join("grp/group_B1.nii.gz"));
    let n: f64 = draws.parse().unwrap();
    let mut interior = 0;
    for (s, g) in subject.iter().zip(&group) {
        let p = (s + g) / 2.0;
        let se = (2.0 * p * (1.0 - p) / n).sqrt();
        assert!((s - g).abs() <= 5.0 * se + 1e-3, "subject {s} vs group {g}");
        interior += usize::from(p > 0.05 && p < 0.95);
    }
    assert!(
        interior > 0,
        "no voxel with intermediate evidence to compare"
    );
    let m = manifest(dir.join("grp/manifest.json"));
    assert_eq!(m["results"]["subjects"], serde_json::json!([1, 0]));
    assert_eq!(m["results"]["shared_design"], true);
}

#[test]
fn group_difference_of_identical_groups_is_inactive() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    simulate(dir, 30.0);
    ok(
        dir,
        &[
            "fit",
            "--bold",
            "sim/bold.nii.gz",
            "--design",
            "sim/design.csv",
            "--draws",
            "200",
            "--burn-in",
            "10",
            "-o",
            "subj",
        ],
    );
    ok(
        dir,
        &[
            "group",
            "--subject",
            "subj",
            "--versus",
            "subj",
            "--algorithm",
            "ffbs",
            "--draws",
            "400",
            "-o",
            "diff",
        ],
    );
    let diff = values(dir.join("diff/difference_B1.nii.gz"));
    assert!(diff.iter().all(|&e| e < 0.95));
}

#[test]
fn design_from_timing_files() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    std::fs::write(dir.join("left.txt"), "# onset duration\n10 10\n50 10\n").unwrap();
    std::fs::write(dir.join("right.txt"), "30,10,1\n70,10,1\n").unwrap();
    ok(
        dir,
        &[
            "design",
            "--stimulus",
            "left.txt",
            "--stimulus",
            "R=right.txt",
            "--tr",
            "2",
            "--scans",
            "50",
            "-o",
            "d.csv",
        ],
    );
    let text = std::fs::read_to_string(dir.join("d.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("left,R"));
    assert_eq!(lines.count(), 50);
    let m = manifest(dir.join("d.csv.manifest.json"));
    assert_eq!(m["inputs"].as_object().unwrap().len(), 2);
    assert_eq!(m["results"]["tasks"], serde_json::json!(["left", "R"]));
}

#[test]
fn assess_reports_every_paradigm() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    std::fs::write(
        dir.join("null.json"),
        r#"{"dims": [6, 6, 4], "n_scans": 100, "tr": 2.0, "seed": 4}"#,
    )
    .unwrap();
    let out = ok(
        dir,
        &[
            "assess",
            "--generate",
            "null.json",
            "--draws",
            "200",
            "--burn-in",
            "10",
            "-o",
            "fpr",
        ],
    );
    let stdout = String::from_utf8_lossy(&out.stdout);
    let m = manifest(dir.join("fpr/manifest.json"));
    for p in ["B1", "B2", "E1", "E2"] {
        assert!(stdout.contains(p));
        let rate = m["results"][p]["rate"].as_f64().unwrap();
        assert!((0.0..=0.05).contains(&rate), "{p}: {rate}");
        let csv = std::fs::read_to_string(dir.join(format!("fpr/fpr_{p}.csv"))).unwrap();
        assert_eq!(csv.lines().count(), 1 + 6 * 6 * 4);
    }
}

#[test]
fn config_file_is_overridden_by_flags_and_env_fills_workers() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    simulate(dir, 30.0);
    std::fs::write(
        dir.join("run.json"),
        r#"{"draws": 50, "burn_in": 10, "seed": 9, "algorithm": "ffbs"}"#,
    )
    .unwrap();
    let base = [
        "fit",
        "--bold",
        "sim/bold.nii.gz",
        "--design",
        "sim/design.csv",
        "--config",
        "run.json",
        "--no-summary",
    ];
    let mut args = base.to_vec();
    args.extend(["--draws", "60", "-o", "a"]);
    ok(dir, &args);
    let m = manifest(dir.join("a/manifest.json"));
    assert_eq!(m["config"]["draws"], 60);
    assert_eq!(m["config"]["seed"], 9);
    assert_eq!(m["config"]["algorithm"], "ffbs");
    assert_eq!(m["config"]["workers"], 0);

    let mut args = base.to_vec();
    args.extend(["-o", "b"]);
    let out = Command::new(env!("CARGO_BIN_EXE_mvdlm"))
        .current_dir(dir)
        .env("MVDLM_WORKERS", "2")
        .args(&args)
        .output()
        .unwrap();
    assert!(out.status.success());
    assert_eq!(
        manifest(dir.join("b/manifest.json"))["config"]["workers"],
        2
    );
    assert!(String::from_utf8_lossy(&out.stderr).contains("resolved config"));

    let out = Command::new(env!("CARGO_BIN_EXE_mvdlm"))
        .current_dir(dir)
        .env("MVDLM_WORKERS", "many")
        .args(&args)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn errors_map_to_distinct_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    simulate(dir, 30.0);
    let fit = |bold: &str, design: &str, extra: &[&str]| {
        let mut args = vec![
            "fit",
            "--bold",
            bold,
            "--design",
            design,
            "--draws",
            "20",
            "--burn-in",
            "10",
            "-o",
            "x",
        ];
        args.extend_from_slice(extra);
        code(dir, &args)
    };
    // usage
    assert_eq!(code(dir, &["fit", "--bold", "sim/bold.nii.gz"]), 2);
    // invalid range
    assert_eq!(
        fit("sim/bold.nii.gz", "sim/design.csv", &["--threshold", "1.5"]),
        2
    );
    assert_eq!(
        fit("sim/bold.nii.gz", "sim/design.csv", &["--beta", "0.9,0.8"]),
        2
    );
    // unreadable input
    assert_eq!(fit("missing.nii.gz", "sim/design.csv", &[]), 3);
    // corrupt input
    std::fs::write(dir.join("bad.nii"), b"not an image").unwrap();
    assert_eq!(fit("bad.nii", "sim/design.csv", &[]), 4);
    std::fs::write(dir.join("bad.json"), "{ draws: ").unwrap();
    assert_eq!(
        fit(
            "sim/bold.nii.gz",
            "sim/design.csv",
            &["--config", "bad.json"]
        ),
        4
    );
    std::fs::write(dir.join("typo.json"), r#"{"drawz": 5}"#).unwrap();
    assert_eq!(
        fit(
            "sim/bold.nii.gz",
            "sim/design.csv",
            &["--config", "typo.json"]
        ),
        2
    );
    // incompatible metadata: design length differs from the series
    ok(
        dir,
        &[
            "design",
            "--paradigm",
            "B1",
            "--tr",
            "2",
            "--scans",
            "100",
            "-o",
            "short.csv",
        ],
    );
    assert_eq!(fit("sim/bold.nii.gz", "short.csv", &[]), 5);
}

#[test]
fn group_rejects_mismatched_or_heterogeneous_subjects() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    simulate(dir, 30.0);
    let fit = |design: &str, out: &str, extra: &[&str]| {
        let mut args = vec![
            "fit",
            "--bold",
            "sim/bold.nii.gz",
            "--design",
            design,
            "--draws",
            "20",
            "--burn-in",
            "10",
            "-o",
            out,
        ];
        args.extend_from_slice(extra);
        ok(dir, &args);
    };
    ok(
        dir,
        &[
            "design",
            "--paradigm",
            "B2",
            "--tr",
            "2",
            "--scans",
            "120",
            "-o",
            "b2.csv",
        ],
    );
    let b2 = std::fs::read_to_string(dir.join("b2.csv"))
        .unwrap()
        .replacen("B2", "B1", 1);
    std::fs::write(dir.join("b2.csv"), b2).unwrap();
    fit("sim/design.csv", "s1", &[]);
    fit("b2.csv", "s2", &[]);
    fit("sim/design.csv", "s3", &["--radius", "2"]);
    // same task count, different designs: only FSTS applies
    let hetero = [
        "group",
        "--subject",
        "s1",
        "--subject",
        "s2",
        "--draws",
        "50",
    ];
    let mut args = hetero.to_vec();
    args.extend(["-o", "g1"]);
    assert_eq!(code(dir, &args), 2);
    let mut args = hetero.to_vec();
    args.extend(["--algorithm", "fsts", "-o", "g2"]);
    ok(dir, &args);
    // different neighborhood radius
    assert_eq!(
        code(
            dir,
            &["group", "--subject", "s1", "--subject", "s3", "-o", "g3"]
        ),
        5
    );
    // missing, then not a summary
    assert_eq!(code(dir, &["group", "--subject", "nowhere", "-o", "g4"]), 3);
    assert_eq!(code(dir, &["group", "--subject", "sim", "-o", "g5"]), 4);
}
