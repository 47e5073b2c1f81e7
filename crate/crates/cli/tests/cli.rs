use std::process::Command;

fn mgi() -> Command {
    Command::new(env!("CARGO_BIN_EXE_mgi"))
}

#[test]
fn synth_then_run_prints_summary() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let status = mgi().args(["synth", "--seed", "4", "--out"]).arg(&data).status().unwrap();
    assert!(status.success());

    let out_dir = tmp.path().join("out");
    let cfg = tmp.path().join("quick.toml");
    std::fs::write(&cfg, "fid_crops = 8\nreference_samples = 16\n").unwrap();
    let out = mgi()
        .arg("run")
        .arg("--source")
        .arg(data.join("source.ppm"))
        .arg("--target")
        .arg(data.join("target.ppm"))
        .arg("--out")
        .arg(&out_dir)
        .arg("--config")
        .arg(&cfg)
        .args(["--steps", "8", "--codes", "4", "--layers", "2,3", "--distance", "l2", "--alpha", "50"])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8(out.stdout).unwrap();
    let line = stdout.lines().next().unwrap();
    assert!(line.starts_with("chosen layer="), "{line}");
    assert!(line.contains(" fid="), "{line}");

    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(out_dir.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["config"]["steps"], 8);
    assert_eq!(report["config"]["fid_crops"], 8);
    assert_eq!(report["config"]["distance"], "l2");
    assert_eq!(report["config"]["warp_temperature"], 50.0);
    let layer = report["chosen_layer"].as_u64().unwrap();
    assert_eq!(line.split_whitespace().nth(1).unwrap(), format!("layer={layer}"));
}

#[test]
fn failing_run_exits_nonzero_with_diagnostic() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.ppm");
    std::fs::write(&bad, b"P3\n1 1\n255\n0 0 0\n").unwrap();
    let out_dir = tmp.path().join("out");
    let out = mgi()
        .arg("run")
        .arg("--source")
        .arg(&bad)
        .arg("--target")
        .arg(&bad)
        .arg("--out")
        .arg(&out_dir)
        .output()
        .unwrap();
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("unsupported magic"), "{stderr}");
    assert!(out.stdout.is_empty());
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(out_dir.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["partial"], true);
}

#[test]
fn selftest_passes() {
    let out = mgi().arg("selftest").output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stdout));
    assert!(!String::from_utf8_lossy(&out.stdout).contains("FAIL"));
}
