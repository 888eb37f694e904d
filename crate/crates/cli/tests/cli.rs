use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn cleanstream(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cleanstream"))
        .args(args)
        .env_remove("CLEANSTREAM_THREADS")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Simulates a small sweep (2 utterances x 2 SNRs, 4 mics) and returns the
/// manifest path.
fn simulate(dir: &Path) -> PathBuf {
    let config = dir.join("sim.json");
    std::fs::write(
        &config,
        r#"{
            "seed": 5,
            "snr_levels": [0, 6],
            "num_utterances": 2,
            "utterance_s": 1.0,
            "num_noises": 2,
            "noise_s": 5.0,
            "noise_context_s": 1.0
        }"#,
    )
    .unwrap();
    let scenes = dir.join("scenes");
    let out = cleanstream(&["simulate", "--config", p(&config), "--out", p(&scenes)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    scenes.join("manifest.json")
}

fn data_rows(path: &Path) -> Vec<String> {
    std::fs::read_to_string(path).unwrap().lines().skip(1).map(String::from).collect()
}

#[test]
fn evaluate_writes_deterministic_reports() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = simulate(dir.path());
    let run = |name: &str| {
        let out = dir.path().join(name);
        let res = cleanstream(&[
            "evaluate",
            "--manifest",
            p(&manifest),
            "--methods",
            "passthrough,cleaner",
            "--out",
            p(&out),
        ]);
        assert_eq!(code(&res), 0, "{}", String::from_utf8_lossy(&res.stderr));
        out
    };
    let first = run("a");
    let second = run("b");
    for file in ["passthrough.csv", "cleaner.csv", "summary.csv"] {
        let a = std::fs::read(first.join(file)).unwrap();
        assert_eq!(a, std::fs::read(second.join(file)).unwrap(), "{file} differs between runs");
    }
    let passthrough = data_rows(&first.join("passthrough.csv"));
    assert_eq!(passthrough.len(), 4);
    for row in &passthrough {
        let fields: Vec<&str> = row.split(',').collect();
        assert_eq!(fields[5], fields[6], "passthrough output SNR equals input SNR");
        assert_eq!(fields[7], "0.000000");
        assert_eq!(fields[11], "ok");
    }
    assert_eq!(data_rows(&first.join("cleaner.csv")).len(), 4);
    // One summary line per (method, SNR) cell.
    assert_eq!(data_rows(&first.join("summary.csv")).len(), 4);
}

#[test]
fn sweep_covers_each_mic_count() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = simulate(dir.path());
    let out = dir.path().join("sweep");
    let res = cleanstream(&["sweep", "--manifest", p(&manifest), "--mics", "2,3,4", "--out", p(&out)]);
    assert_eq!(code(&res), 0, "{}", String::from_utf8_lossy(&res.stderr));
    let rows = data_rows(&out.join("cleaner.csv"));
    assert_eq!(rows.len(), 12);
    for mics in ["2", "3", "4"] {
        assert_eq!(rows.iter().filter(|r| r.split(',').nth(2) == Some(mics)).count(), 4);
    }
}

#[test]
fn scene_failures_exit_one_and_are_recorded() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = simulate(dir.path());
    let out = dir.path().join("sweep");
    let res = cleanstream(&["sweep", "--manifest", p(&manifest), "--mics", "2,5", "--out", p(&out)]);
    assert_eq!(code(&res), 1);
    let rows = data_rows(&out.join("cleaner.csv"));
    assert_eq!(rows.len(), 8);
    let failed: Vec<&String> = rows.iter().filter(|r| r.contains("error:")).collect();
    assert_eq!(failed.len(), 4);
    assert!(failed.iter().all(|r| r.split(',').nth(2) == Some("5")));
}

#[test]
fn enhance_writes_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = simulate(dir.path());
    let scene = manifest.with_file_name("u000_snr0.json");
    let out = dir.path().join("enh");
    let res = cleanstream(&["enhance", "--scene", p(&scene), "--method", "cleaner", "--mics", "3", "--out", p(&out)]);
    assert_eq!(code(&res), 0, "{}", String::from_utf8_lossy(&res.stderr));
    assert!(out.join("u000_snr0_cleaner.wav").exists());
    assert!(out.join("u000_snr0_cleaner_logmel.bin").exists());
    let rows = data_rows(&out.join("cleaner.csv"));
    assert_eq!(rows.len(), 1);
    assert!(rows[0].starts_with("u000_snr0,0,3,cleaner,time,"));

    let missing = cleanstream(&["enhance", "--scene", p(&scene), "--method", "cleanformer_model", "--out", p(&out)]);
    assert_eq!(code(&missing), 2);

    let weights = dir.path().join("w.bin");
    assert_eq!(code(&cleanstream(&["init-weights", "--seed", "3", "--out", p(&weights)])), 0);
    let res = cleanstream(&[
        "enhance",
        "--scene",
        p(&scene),
        "--method",
        "cleanformer_model",
        "--weights",
        p(&weights),
        "--out",
        p(&out),
    ]);
    assert_eq!(code(&res), 0, "{}", String::from_utf8_lossy(&res.stderr));
    assert!(out.join("u000_snr0_cleanformer_model_mask.bin").exists());
    assert!(!out.join("u000_snr0_cleanformer_model.wav").exists());
}

#[test]
fn config_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = simulate(dir.path());
    let out = dir.path().join("x");
    let unknown = cleanstream(&["evaluate", "--manifest", p(&manifest), "--methods", "wiener", "--out", p(&out)]);
    assert_eq!(code(&unknown), 2);
    let absent = cleanstream(&["evaluate", "--manifest", "/nonexistent/manifest.json", "--out", p(&out)]);
    assert_eq!(code(&absent), 2);
    assert_eq!(code(&cleanstream(&["evaluate"])), 2);

    let threads = |value: &str| {
        Command::new(env!("CARGO_BIN_EXE_cleanstream"))
            .args(["evaluate", "--manifest", p(&manifest), "--methods", "passthrough", "--out", p(&out)])
            .env("CLEANSTREAM_THREADS", value)
            .output()
            .unwrap()
    };
    assert_eq!(code(&threads("zero")), 2);
    assert_eq!(code(&threads("1")), 0);
}
