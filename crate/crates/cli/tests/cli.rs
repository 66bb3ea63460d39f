use std::path::Path;
use std::process::{Command, Output};

fn geotrust(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_geotrust"))
        .args(args)
        .current_dir(cwd)
        .output()
        .unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

#[test]
fn end_to_end_run_embeds_config_digest() {
    let dir = tempfile::tempdir().unwrap();
    let out = geotrust(&["synth", "--out", "data", "--scenes", "30", "--seed", "3"], dir.path());
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    std::fs::write(dir.path().join("cfg.json"), r#"{"clustering": {"elbow_candidates": [2, 3, 4]}}"#).unwrap();
    let out = geotrust(
        &["run", "--manifest", "data/manifest.json", "--config", "cfg.json", "--seed", "11", "--threads", "2"],
        dir.path(),
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("work/report.json")).unwrap()).unwrap();
    assert_eq!(report["run"]["seed"], 11);
    assert_eq!(report["scenes"].as_array().unwrap().len(), 30);
    let digest = report["run"]["config_digest"].as_str().unwrap();
    assert_eq!(digest.len(), 64);

    // the thread count does not change the digest, the seed does
    let out = geotrust(
        &["report", "--manifest", "data/manifest.json", "--config", "cfg.json", "--seed", "11"],
        dir.path(),
    );
    assert_eq!(code(&out), 0);
    let again: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("work/report.json")).unwrap()).unwrap();
    assert_eq!(again["run"]["config_digest"], digest);
}

#[test]
fn stages_run_one_at_a_time() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&geotrust(&["synth", "--out", "data", "--scenes", "20"], dir.path())), 0);
    let m = ["--manifest", "data/manifest.json"];
    for stage in ["fit", "score-ood", "score-uncertainty", "evaluate", "discard", "fuse", "link", "report"] {
        let mut args = vec![stage];
        args.extend(m);
        let out = geotrust(&args, dir.path());
        assert_eq!(code(&out), 0, "{stage}: {}", String::from_utf8_lossy(&out.stderr));
    }
    assert!(dir.path().join("work/report.json").is_file());
    assert!(dir.path().join("work/scores.csv").is_file());
}

#[test]
fn exit_codes_follow_error_class() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&geotrust(&["synth", "--out", "data", "--scenes", "12"], dir.path())), 0);
    let m = ["--manifest", "data/manifest.json"];

    std::fs::write(dir.path().join("bad.json"), r#"{"clustering": {"k": 1}}"#).unwrap();
    let out = geotrust(&["fit", m[0], m[1], "--config", "bad.json"], dir.path());
    assert_eq!(code(&out), 2);
    std::fs::write(dir.path().join("typo.json"), r#"{"sed": 4}"#).unwrap();
    assert_eq!(code(&geotrust(&["fit", m[0], m[1], "--config", "typo.json"], dir.path())), 2);
    assert_eq!(code(&geotrust(&["fit", m[0], m[1], "--threads", "0"], dir.path())), 2);
    assert_eq!(code(&geotrust(&["fit", "--bogus"], dir.path())), 2);
    assert_eq!(code(&geotrust(&["synth", "--out", "x", "--scenes", "0"], dir.path())), 2);

    assert_eq!(code(&geotrust(&["fit", "--manifest", "missing.json"], dir.path())), 3);
    std::fs::write(dir.path().join("data/attributes.csv"), "scene_id,ele_mt_sav\nscene_0000,oops\n").unwrap();
    let out = geotrust(&["fit", m[0], m[1]], dir.path());
    assert_eq!(code(&out), 3, "{}", String::from_utf8_lossy(&out.stderr));

    let fresh = tempfile::tempdir().unwrap();
    assert_eq!(code(&geotrust(&["synth", "--out", "data", "--scenes", "12"], fresh.path())), 0);
    let out = geotrust(&["report", m[0], m[1]], fresh.path());
    assert_eq!(code(&out), 4, "{}", String::from_utf8_lossy(&out.stderr));
}
