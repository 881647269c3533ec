use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const TINY_TRAIN: &str = "[train]\nsteps = 4\ntrain_clips = 4\nval_clips = 2\nlog_every = 2\nbatch = 2\n\
    network = { input = { channels = 2, height = 16, width = 16 }, encoder_channels = [4, 4, 4], pooling_neurons = 8 }\n";

fn run(args: &[&str], config: Option<(&Path, &str)>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_neuroflight"));
    cmd.args(args).env("RUST_LOG", "warn");
    if let Some((path, text)) = config {
        std::fs::write(path, text).unwrap();
        cmd.arg("--config").arg(path);
    }
    cmd.output().unwrap()
}

fn report(o: &Output) -> Value {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
    serde_json::from_slice(&o.stdout).expect("JSON report on stdout")
}

#[test]
fn help_lists_every_subcommand() {
    let o = run(&["--help"], None);
    let text = String::from_utf8_lossy(&o.stdout);
    for sub in ["train-vision", "eval-vision", "evolve", "fly", "bench", "serve"] {
        assert!(text.contains(sub), "{sub} missing from help");
    }
}

#[test]
fn bench_reports_the_default_network_size() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("bench");
    let cfg = dir.path().join("bench.toml");
    let v = report(&run(
        &["bench", "--seed", "3", "--out", out.to_str().unwrap()],
        Some((&cfg, "[bench]\nwindows = 10\nwarmup = 1\n")),
    ));
    assert_eq!(v["neurons"], 4352);
    assert_eq!(v["synapses"], 621_120);
    assert_eq!(v["densities"].as_array().unwrap().len(), 3);
    assert!(out.join("report.json").exists());
}

#[test]
fn training_resumes_where_it_stopped() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("train");
    let o = out.to_str().unwrap();
    let first = report(&run(&["train-vision", "--seed", "5", "--out", o], Some((&dir.path().join("a.toml"), TINY_TRAIN))));
    assert_eq!((first["start_step"].as_u64(), first["steps"].as_u64()), (Some(0), Some(4)));

    let resume = format!("[paths]\ncheckpoint = {:?}\n{TINY_TRAIN}", out.join("checkpoint.json"));
    let second = report(&run(&["train-vision", "--seed", "5", "--out", o], Some((&dir.path().join("b.toml"), &resume))));
    assert_eq!((second["start_step"].as_u64(), second["steps"].as_u64()), (Some(4), Some(8)));

    let log = std::fs::read_to_string(out.join("train_log.csv")).unwrap();
    let steps: Vec<&str> = log.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(steps, ["2", "4", "6", "8"]);
}

#[test]
fn same_seed_same_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("evolve.toml");
    let text = "[evolve]\npopulation = 4\ngenerations = 2\nsteps = 50\n";
    let outs: Vec<_> = (0..2).map(|i| dir.path().join(format!("run{i}"))).collect();
    for o in &outs {
        report(&run(&["evolve", "--seed", "9", "--out", o.to_str().unwrap()], Some((&cfg, text))));
    }
    for name in ["controller.json", "evolution_log.csv"] {
        let a = std::fs::read(outs[0].join(name)).unwrap();
        let b = std::fs::read(outs[1].join(name)).unwrap();
        assert_eq!(a, b, "{name} differs");
    }
    let third = dir.path().join("run_other_seed");
    report(&run(&["evolve", "--seed", "10", "--out", third.to_str().unwrap()], Some((&cfg, text))));
    assert_ne!(
        std::fs::read(outs[0].join("controller.json")).unwrap(),
        std::fs::read(third.join("controller.json")).unwrap()
    );
}

#[test]
fn fly_sim_writes_telemetry() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("fly");
    let cfg = dir.path().join("fly.toml");
    let text = "[fly]\ncontroller = \"pi\"\n[fly.sim]\nduration_s = 1.0\n";
    report(&run(&["fly", "--seed", "1", "--out", out.to_str().unwrap()], Some((&cfg, text))));
    let csv = std::fs::read_to_string(out.join("fly_telemetry.csv")).unwrap();
    assert!(csv.starts_with("mode,t,"));
    assert_eq!(csv.lines().count(), 51);
}

#[test]
fn missing_assets_fail_with_a_message() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("x");
    let o = out.to_str().unwrap();
    let cases = [
        ("eval-vision", ""),
        ("fly", "[fly]\ncontroller = \"evolved\"\n"),
        ("fly", "[fly]\nmode = \"replay\"\ncontroller = \"pi\"\n"),
    ];
    for (k, (sub, text)) in cases.iter().enumerate() {
        let r = run(&[sub, "--out", o], Some((&dir.path().join(format!("{k}.toml")), text)));
        assert_eq!(r.status.code(), Some(1), "{sub} should fail");
        let err = String::from_utf8_lossy(&r.stderr);
        assert!(err.contains("error:"), "{err}");
    }
    let missing = dir.path().join("nope.toml");
    let r = Command::new(env!("CARGO_BIN_EXE_neuroflight"))
        .args(["bench", "--config", missing.to_str().unwrap(), "--out", o])
        .output()
        .unwrap();
    assert_eq!(r.status.code(), Some(1));
}

#[test]
fn unknown_config_keys_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    let out = dir.path().join("x");
    let r = run(&["bench", "--out", out.to_str().unwrap()], Some((&cfg, "[bench]\nwindowz = 3\n")));
    assert_eq!(r.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&r.stderr).contains("windowz"));
}

#[test]
fn shipped_configs_parse() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut n = 0;
    for entry in std::fs::read_dir(&dir).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "toml") {
            neuroflight::cli::RunConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
            n += 1;
        }
    }
    assert!(n >= 6);
}
