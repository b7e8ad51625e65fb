use std::path::Path;
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_motionstream"))
}

fn read_tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap())
        })
        .collect();
    v.sort();
    v
}

#[test]
fn unknown_experiment_lists_valid_names() {
    let out = bin().args(["experiment", "warp-drive"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    for name in ["tokenizer-ablation", "corruption-ablation", "crossroad", "rl-compare", "retrieval", "latency"] {
        assert!(err.contains(name), "{err}");
    }
}

#[test]
fn gen_data_is_deterministic() {
    let t = tempfile::tempdir().unwrap();
    for d in ["a", "b"] {
        let s = bin()
            .args(["gen-data", "--clips-per-domain", "2", "--seconds", "2", "--seed", "9", "--out"])
            .arg(t.path().join(d))
            .status()
            .unwrap();
        assert!(s.success());
    }
    let (a, b) = (read_tree(&t.path().join("a")), read_tree(&t.path().join("b")));
    assert_eq!(a.len(), 3 * 6 + 1);
    assert_eq!(a, b);
}

#[test]
fn gen_data_with_no_clips_writes_empty_manifest() {
    let t = tempfile::tempdir().unwrap();
    let out = t.path().join("empty");
    let s = bin().args(["gen-data", "--clips-per-domain", "0", "--out"]).arg(&out).status().unwrap();
    assert!(s.success());
    let m: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m["entries"].as_array().unwrap().len(), 0);
}

#[test]
fn newer_config_major_fails() {
    let t = tempfile::tempdir().unwrap();
    let cfg = t.path().join("c.toml");
    std::fs::write(&cfg, "schema_version = \"9.0\"\n").unwrap();
    let out = bin().arg("--config").arg(&cfg).arg("show-config").output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("newer"));
}

#[test]
fn env_override_reaches_show_config() {
    let out = bin().arg("show-config").env("MOTIONSTREAM_GENERATOR__STEPS", "1234").output().unwrap();
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("steps = 1234"));
}

#[test]
fn corrupt_and_stream_round_trip_files() {
    use motionstream::formats::{read_motion, read_tokens, write_audio, write_tokens};
    use motionstream_core::audio::silence_tokens;
    use motionstream_core::tokenizer::TokenGrid;
    let t = tempfile::tempdir().unwrap();
    let grid = TokenGrid::new(4, 3, 3, 64, (0..36).map(|i| i as u16).collect()).unwrap();
    write_tokens(&t.path().join("in.mtk"), &grid).unwrap();
    let s = bin()
        .args(["corrupt", "--mode", "uniform", "--rate", "1", "--seed", "2", "--in"])
        .arg(t.path().join("in.mtk"))
        .arg("--out")
        .arg(t.path().join("out.mtk"))
        .status()
        .unwrap();
    assert!(s.success());
    let c = read_tokens(&t.path().join("out.mtk")).unwrap();
    assert_eq!((c.steps, c.layers, c.parts), (4, 3, 3));

    write_audio(&t.path().join("a.mat"), &silence_tokens(60)).unwrap();
    let s = bin()
        .arg("stream")
        .arg("--input")
        .arg(t.path().join("a.mat"))
        .arg("--out")
        .arg(t.path().join("s.msm"))
        .arg("--profile")
        .arg(t.path().join("p.csv"))
        .status()
        .unwrap();
    assert!(s.success());
    assert_eq!(read_motion(&t.path().join("s.msm")).unwrap().clip.len(), 24);
    let csv = std::fs::read_to_string(t.path().join("p.csv")).unwrap();
    assert!(csv.starts_with("step,stage,ms"));
    assert_eq!(csv.lines().count(), 1 + 3 * 4);
}
