use std::path::Path;

use streetscape_cli::run_command;
use streetscape_core::tnsr::Tnsr;
use streetscape_model::{init_backbone, BackboneConfig};

fn run(args: &[&str]) -> i32 {
    run_command(std::iter::once("streetscape").chain(args.iter().copied()))
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    assert_eq!(run(&["frobnicate"]), 1);
    assert_eq!(run(&[]), 1);
}

#[test]
fn generate_rejects_trajectories_shorter_than_the_window() {
    let dir = tempfile::tempdir().unwrap();
    let weights = dir.path().join("probe.sswt");
    init_backbone(&BackboneConfig::probe(), 0).unwrap().save(&weights).unwrap();
    let out = dir.path().join("gen");
    let args = ["generate", "--seed", "1", "--out", s(&out), "--generate.weights", s(&weights), "--image.size", "8"];
    let mut short = args.to_vec();
    short.extend(["--generate.frames", "1"]);
    assert_eq!(run(&short), 1);
    assert!(!out.join("generate.json").exists());
}

#[test]
fn configuration_errors_exit_1_and_io_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, "seed = 3\nworld.width = 40\nbogus.key = 1\n").unwrap();
    assert_eq!(run(&["worldgen", "--config", s(&cfg), "--out", s(&out)]), 1);
    std::fs::write(&cfg, "seed = 3\nseed = 4\n").unwrap();
    assert_eq!(run(&["worldgen", "--config", s(&cfg), "--out", s(&out)]), 1);
    // Stochastic commands never fall back to an implicit seed.
    assert_eq!(run(&["worldgen", "--out", s(&out)]), 1);
    assert_eq!(run(&["worldgen", "--seed", "x", "--out", s(&out)]), 1);
    assert_eq!(run(&["worldgen", "--world.bogus", "1", "--seed", "1"]), 1);
    assert_eq!(run(&["worldgen", "--config", s(&dir.path().join("missing.cfg"))]), 2);
    assert_eq!(
        run(&["generate", "--seed", "1", "--out", s(&out), "--generate.weights", s(&dir.path().join("none.sswt"))]),
        2
    );
}

#[test]
fn flags_override_the_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, "# small world\nseed = 3\nworld.width = 40\nworld.height = 40\n").unwrap();
    let out = dir.path().join("w");
    assert_eq!(run(&["worldgen", "--config", s(&cfg), "--world.width", "36", "--out", s(&out)]), 0);
    let layout = std::fs::read_to_string(out.join("layout.txt")).unwrap();
    assert!(layout.starts_with("STREETGRID 1 36 40 "), "{}", layout.lines().next().unwrap());
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("worldgen.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "worldgen");
    assert_eq!(manifest["seeds"]["world"], 3);
    assert_eq!(manifest["config"]["world.width"], "36");
    assert_eq!(manifest["config_hash"].as_str().unwrap().len(), 64);
}

#[test]
fn identical_configs_give_identical_manifests_and_images() {
    let dir = tempfile::tempdir().unwrap();
    let mut bytes = Vec::new();
    for name in ["a", "b"] {
        let out = dir.path().join(name);
        let args = [
            "render-gbuffer",
            "--seed",
            "9",
            "--world.width",
            "40",
            "--world.height",
            "40",
            "--image.size",
            "24",
            "--render.yaw_deg",
            "30",
            "--out",
            s(&out),
        ];
        assert_eq!(run(&args), 0);
        let read = |f: &str| std::fs::read(out.join(f)).unwrap();
        bytes.push([read("render-gbuffer.json"), read("photo.png"), read("gbuffer.tnsr")]);
        let g = Tnsr::read(out.join("gbuffer.tnsr")).unwrap();
        assert_eq!(g.dims, vec![6, 24, 24]);
    }
    assert_eq!(bytes[0], bytes[1]);
}

#[test]
fn selftest_passes() {
    let dir = tempfile::tempdir().unwrap();
    let started = std::time::Instant::now();
    assert_eq!(run(&["selftest", "--out", s(dir.path())]), 0);
    assert!(started.elapsed().as_secs() < 300);
    assert!(dir.path().join("selftest.json").exists());
}
