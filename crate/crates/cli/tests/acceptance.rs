//! Acceptance run: one line per criterion.
//!
//! The default scale ("smoke") drives the complete pipeline — world,
//! datasets, curriculum, both generation modes, metrics, a second run for
//! reproducibility — with a tiny model so it finishes in minutes on one core.
//! Structural checks (freezing, imputation exactness, reproducibility,
//! interpolation endpoints) are meaningful at any scale and gate here; the
//! quality gates of the desk experiment only mean something for a trained
//! model and are printed as DEFERRED with their measured values.
//! `STREETSCAPE_ACCEPTANCE=full` runs the desk-scale experiment instead.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::DType;
use serde_json::Value;
use streetscape_cli::run_command;
use streetscape_cli::selftest::{diffusion_checks, geometry_checks, Check};
use streetscape_core::{derive_seed, ImageTensor, NoiseRng, NoiseSchedule, ScheduleKind, StyleToken};
use streetscape_metrics::{mean_ci, patch_similarity};
use streetscape_model::condition::control_frame;
use streetscape_model::gradcheck::gradient_check;
use streetscape_model::net::{stack_windows, Backbone};
use streetscape_model::{init_backbone, BackboneConfig, ModelWeights, Stage};
use streetscape_sampler::{Sampler, SamplerConfig};
use streetscape_scene::photo::render_photo;
use streetscape_scene::world::{generate_world, sample_trajectory, WorldModel, WorldSpec};
use streetscape_scene::{render_gbuffer, CameraPose, CellClass, Intrinsics, SceneLayout};

const SEED: u64 = 2024;

struct Scale {
    name: &'static str,
    world: usize,
    image: usize,
    styles: usize,
    windows: usize,
    model: [&'static str; 4],
    iterations: [usize; 4],
    batch: usize,
    lr: &'static str,
    trajectories: usize,
    frames: usize,
    steps: usize,
    resample: usize,
    pairs: usize,
}

impl Scale {
    fn smoke() -> Self {
        Self {
            name: "smoke",
            world: 48,
            image: 16,
            styles: 2,
            windows: 64,
            model: ["8", "1,2", "16", "4"],
            iterations: [100, 50, 50, 50],
            batch: 4,
            lr: "1e-3",
            trajectories: 2,
            frames: 66,
            steps: 5,
            resample: 1,
            pairs: 32,
        }
    }

    fn full() -> Self {
        Self {
            name: "full",
            world: 128,
            image: 64,
            styles: 4,
            windows: 20_000,
            model: ["32", "1,2,4", "128", "8"],
            iterations: [20_000, 10_000, 10_000, 10_000],
            batch: 32,
            lr: "1e-4",
            trajectories: 16,
            frames: 66,
            steps: 50,
            resample: 10,
            pairs: 32,
        }
    }

    fn is_full(&self) -> bool {
        self.name == "full"
    }

    /// Flags shared by every command of the pipeline.
    fn common(&self) -> Vec<String> {
        let kv = [
            ("seed", SEED.to_string()),
            ("world.width", self.world.to_string()),
            ("world.height", self.world.to_string()),
            ("image.size", self.image.to_string()),
            ("dataset.styles", self.styles.to_string()),
            ("dataset.windows", self.windows.to_string()),
            ("model.base_channels", self.model[0].into()),
            ("model.multipliers", self.model[1].into()),
            ("model.temb", self.model[2].into()),
            ("model.groups", self.model[3].into()),
            ("train.s0_iterations", self.iterations[0].to_string()),
            ("train.s1_iterations", self.iterations[1].to_string()),
            ("train.s2_iterations", self.iterations[2].to_string()),
            ("train.batch", self.batch.to_string()),
            ("train.lr", self.lr.into()),
            ("sampler.steps", self.steps.to_string()),
            ("sampler.resample", self.resample.to_string()),
            ("generate.frames", self.frames.to_string()),
            ("generate.trajectories", self.trajectories.to_string()),
        ];
        kv.into_iter().flat_map(|(k, v)| [format!("--{k}"), v]).collect()
    }

    fn world(&self) -> WorldModel {
        let spec = WorldSpec { width: self.world, height: self.world, ..WorldSpec::default() };
        generate_world(SEED, &spec).unwrap()
    }

    fn sampler_config(&self, context: usize, seed: u64) -> SamplerConfig {
        SamplerConfig { steps: self.steps, resample: self.resample, context, seed, ..SamplerConfig::default() }
    }
}

struct Report {
    hard_failures: usize,
}

impl Report {
    fn line(&mut self, n: u32, name: &str, verdict: &str, detail: &str, started: Instant) {
        println!("criterion {n:>2} {name}: {verdict} — {detail} [{:.0}s]", started.elapsed().as_secs_f64());
        if verdict == "FAIL" {
            self.hard_failures += 1;
        }
    }

    fn gate(&mut self, n: u32, name: &str, ok: bool, detail: &str, started: Instant) {
        self.line(n, name, if ok { "PASS" } else { "FAIL" }, detail, started);
    }

    fn checks(&mut self, n: u32, name: &str, checks: &[Check], started: Instant) {
        let ok = checks.iter().all(|c| c.passed);
        let detail: Vec<String> = checks.iter().map(|c| format!("{} ({})", c.name, c.detail)).collect();
        self.gate(n, name, ok, &detail.join("; "), started);
    }
}

fn cli(command: &str, common: &[String], extra: &[(&str, String)]) {
    let mut argv: Vec<String> = vec!["streetscape".into(), command.into()];
    argv.extend_from_slice(common);
    for (k, v) in extra {
        argv.extend([format!("--{k}"), v.clone()]);
    }
    let code = run_command(&argv);
    assert_eq!(code, 0, "command failed: {}", argv.join(" "));
}

/// Criterion 6's pipeline under `root`, with paths relative to it so two
/// roots produce byte-identical manifests.
fn pipeline(scale: &Scale, root: &Path, with_k4: bool) {
    std::fs::create_dir_all(root).unwrap();
    std::env::set_current_dir(root).unwrap();
    let c = scale.common();
    let s = |v: &str| v.to_string();
    cli("worldgen", &c, &[("out", s("world"))]);
    cli("dataset", &c, &[("out", s("singles")), ("dataset.frames", s("1"))]);
    cli("dataset", &c, &[("out", s("windows")), ("dataset.frames", s("2"))]);
    let rgb = scale.iterations[3].to_string();
    let train = [("train.singles", s("singles")), ("train.windows", s("windows"))];
    cli("train", &c, &[&train[..], &[("out", s("train")), ("train.rgbctl_iterations", rgb)]].concat());
    for (mode, weights, out) in [("imputation", "train/s2.sswt", "gen_a"), ("rgbctl", "train/s2-rgbctl.sswt", "gen_b")]
    {
        cli("generate", &c, &[("out", s(out)), ("generate.mode", s(mode)), ("generate.weights", s(weights))]);
        let runs: Vec<String> = (0..scale.trajectories).map(|i| format!("{out}/run_{i:03}")).collect();
        cli("evaluate", &c, &[("out", format!("eval_{}", &out[4..])), ("evaluate.runs", runs.join(","))]);
    }
    if with_k4 {
        cli("dataset", &c, &[("out", s("windows4")), ("dataset.frames", s("4"))]);
        let k4 = [("train.singles", s("singles")), ("train.windows", s("windows4")), ("model.frames", s("4"))];
        cli("train", &c, &[&k4[..], &[("out", s("train4"))]].concat());
    }
}

fn drift(root: &Path, which: &str, bucket: &str) -> Option<f64> {
    let v: Value =
        serde_json::from_slice(&std::fs::read(root.join(format!("eval_{which}/drift.json"))).unwrap()).unwrap();
    v["rows"]
        .as_array()
        .unwrap()
        .iter()
        .find(|r| r["bucket"] == bucket && r["metric"] == "frechet")
        .and_then(|r| r["value"].as_f64())
}

fn files(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in std::fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn weights(root: &Path, f: &str) -> ModelWeights {
    ModelWeights::load(root.join(f)).unwrap()
}

fn style(i: usize, n: usize) -> StyleToken {
    StyleToken::new(i % n, n).unwrap()
}

fn crossfade(a: &ImageTensor, b: &ImageTensor, s: f32) -> ImageTensor {
    a.zip_with(b, "crossfade", |x, y| (1.0 - s) * x + s * y).unwrap()
}

fn lerp(a: &CameraPose, b: &CameraPose, s: f64) -> CameraPose {
    streetscape_sampler::engine::lerp_pose(a, b, s)
}

fn main() {
    let scale =
        if std::env::var("STREETSCAPE_ACCEPTANCE").as_deref() == Ok("full") { Scale::full() } else { Scale::smoke() };
    println!("acceptance at {} scale", scale.name);
    let mut report = Report { hard_failures: 0 };
    let tmp = tempfile::tempdir().unwrap();
    let schedule = NoiseSchedule::build(1000, ScheduleKind::Cosine).unwrap();

    let t = Instant::now();
    let checks = diffusion_checks(10_000, SEED).unwrap();
    let within = t.elapsed().as_secs() < 60;
    report.checks(1, "diffusion math", &checks, t);
    if !within {
        report.gate(1, "diffusion math runtime", false, "over 1 minute", t);
    }

    let t = Instant::now();
    let probe = init_backbone(&BackboneConfig::probe(), SEED).unwrap();
    let f32r = gradient_check(&probe, SEED, 200, DType::F32).unwrap();
    let f64r = gradient_check(&probe, SEED, 200, DType::F64).unwrap();
    report.gate(
        2,
        "gradient check",
        f32r.max_relative_error <= 1e-3 && f64r.max_relative_error <= 1e-5 && t.elapsed().as_secs() < 300,
        &format!(
            "{} params, {} samples; max relative error f32 {:.2e} (limit 1e-3), f64 {:.2e} (limit 1e-5)",
            probe.param_count(),
            f32r.checked,
            f32r.max_relative_error,
            f64r.max_relative_error
        ),
        t,
    );

    let t = Instant::now();
    let checks = geometry_checks(5, 20, 100, SEED).unwrap();
    let ok_time = t.elapsed().as_secs() < 300;
    report.checks(3, "geometry oracles", &checks, t);
    if !ok_time {
        report.gate(3, "geometry oracles runtime", false, "over 5 minutes", t);
    }

    let t = Instant::now();
    let root = tmp.path().join("run1");
    pipeline(&scale, &root, true);
    let pipeline_secs = t.elapsed().as_secs_f64();
    let world = scale.world();
    let intr = Intrinsics::new(60.0, scale.image, scale.image);

    // 4: the S2 starting point (S1 weights, control branch reset) ignores
    // its G-buffers; after S2 training it no longer does.
    let t = Instant::now();
    let mut start = weights(&root, "train/s1.sswt");
    start.reset_control_from_encoder().unwrap();
    let trained = weights(&root, "train/s2.sswt");
    let traj = sample_trajectory(&world, 4, 4, intr).unwrap().poses;
    let flat = SceneLayout::filled(scale.world, scale.world, 1.0, CellClass::Road).unwrap();
    let cfg = SamplerConfig { warp_init: false, ..scale.sampler_config(2, 4) };
    let pair = |w: &ModelWeights| {
        let s = Sampler::new(w, cfg.clone(), schedule.clone()).unwrap();
        let a = s.generate_streetscape(&world.layout, &traj, style(0, scale.styles)).unwrap().frames;
        let b = s.generate_streetscape(&flat, &traj, style(0, scale.styles)).unwrap().frames;
        a.iter().zip(&b).all(|(x, y)| x.bit_eq(y))
    };
    // Positive control on raw noise predictions: generated frames of the
    // smoke-scale model are mostly clamped, which can hide a live branch.
    let responds = |w: &ModelWeights| {
        let net = Backbone::new(w, &[], DType::F32).unwrap();
        let mut rng = NoiseRng::new(SEED);
        let x: Vec<ImageTensor> = (0..2).map(|_| rng.normal_tensor(3, scale.image, scale.image)).collect();
        let x = stack_windows(&[&x], DType::F32).unwrap();
        let predict = |layout: &SceneLayout| {
            let c: Vec<ImageTensor> = traj[..2]
                .iter()
                .map(|cam| control_frame(&render_gbuffer(layout, cam).unwrap().to_tensor(), None, false).unwrap())
                .collect();
            let c = stack_windows(&[&c], DType::F32).unwrap();
            let y = net.forward(&x, &[500], &[0], Some(&c), 1.0, true).unwrap();
            y.flatten_all().unwrap().to_vec1::<f32>().unwrap()
        };
        predict(&world.layout) != predict(&flat)
    };
    let (neutral, sensitive) = (pair(&start), responds(&trained));
    let neutral = neutral && !responds(&start);
    report.gate(
        4,
        "zero-init neutrality",
        neutral && sensitive,
        &format!(
            "city vs empty-road G-buffers: 4-frame generation and noise prediction bit-identical before S2: {neutral}; noise prediction responds after S2: {sensitive}"
        ),
        t,
    );

    let t = Instant::now();
    let (s0, s1, s2, rgb) = (
        weights(&root, "train/s0.sswt"),
        weights(&root, "train/s1.sswt"),
        weights(&root, "train/s2.sswt"),
        weights(&root, "train/s2-rgbctl.sswt"),
    );
    let h = |w: &ModelWeights, s: Stage| w.partition_hash(s);
    let frozen = h(&s0, Stage::S0) == h(&s1, Stage::S0)
        && h(&s1, Stage::S0) == h(&s2, Stage::S0)
        && h(&s1, Stage::S1) == h(&s2, Stage::S1)
        && h(&s1, Stage::S0) == h(&rgb, Stage::S0)
        && h(&s1, Stage::S1) == h(&rgb, Stage::S1);
    let moved = h(&s0, Stage::S1) != h(&s1, Stage::S1) && h(&s1, Stage::S2) != h(&s2, Stage::S2);
    report.gate(
        5,
        "stage freezing",
        frozen && moved,
        &format!("S0 hash {}… kept through S1/S2/rgbctl, S1 kept through S2/rgbctl: {frozen}; trained partitions changed: {moved}", &h(&s0, Stage::S0)[..12]),
        t,
    );

    let t = Instant::now();
    let (a_late, b_late, a_early) = (drift(&root, "a", "32-64"), drift(&root, "b", "32-64"), drift(&root, "a", "1-16"));
    let detail = format!(
        "{} trajectories x {} frames; Frechet 32-64 imputation {a_late:?} vs RGB control {b_late:?} (gate <= 0.6x), 1-16 imputation {a_early:?}; pipeline {pipeline_secs:.0}s",
        scale.trajectories, scale.frames
    );
    match (a_late, b_late, a_early) {
        (Some(a), Some(b), Some(e)) if scale.is_full() => {
            report.gate(6, "desk experiment", a <= 0.6 * b && e <= b, &detail, t)
        }
        _ if scale.is_full() => report.gate(6, "desk experiment", false, &format!("missing buckets; {detail}"), t),
        _ => report.line(6, "desk experiment", "DEFERRED", &format!("gates need the trained desk model; {detail}"), t),
    }

    let t = Instant::now();
    let variants = [
        ("full", scale.sampler_config(2, SEED)),
        ("-WarpInit", SamplerConfig { warp_init: false, ..scale.sampler_config(2, SEED) }),
        ("-Resample", SamplerConfig { resample: 0, ..scale.sampler_config(2, SEED) }),
    ];
    let mut means = Vec::new();
    for (name, cfg) in &variants {
        let sampler = Sampler::new(&trained, cfg.clone(), schedule.clone()).unwrap();
        let mut sims = Vec::new();
        for i in 0..scale.pairs {
            let cams = sample_trajectory(&world, derive_seed(SEED, &[7, i as u64]), 2, intr).unwrap().poses;
            let st = style(i, scale.styles);
            let known = render_photo(&world, &cams[0], st).unwrap();
            let gbufs: Vec<_> = cams.iter().map(|c| render_gbuffer(&world.layout, c).unwrap()).collect();
            let next = sampler.generate_next(&[known], &gbufs, &cams, st, i as u64).unwrap();
            let truth = render_photo(&world, &cams[1], st).unwrap();
            sims.push(patch_similarity(&next[0], &truth, 0).unwrap());
        }
        let (m, ci) = mean_ci(&sims);
        means.push((*name, m, ci));
    }
    let order = means[0].1 <= means[1].1 && means[0].1 <= means[2].1;
    let values: Vec<String> = means.iter().map(|(n, m, ci)| format!("{n} {m:.4} ± {ci:.4}")).collect();
    report.line(
        7,
        "ablation direction",
        "REPORT",
        &format!("{} next frames, patch distance {}; full ≤ both ablations: {order}", scale.pairs, values.join(", ")),
        t,
    );

    let t = Instant::now();
    let mut tracked = 0;
    let mut mismatches = 0;
    for i in 0..scale.trajectories {
        let v: Value =
            serde_json::from_slice(&std::fs::read(root.join(format!("gen_a/run_{i:03}/run.json"))).unwrap()).unwrap();
        if let Some(m) = v["known_mismatches"].as_u64() {
            tracked += 1;
            mismatches += m;
        }
    }
    report.gate(
        8,
        "imputation exactness",
        tracked == scale.trajectories && mismatches == 0,
        &format!("{tracked} runs audited, {mismatches} re-emitted conditioning frames differ from their source"),
        t,
    );

    let t = Instant::now();
    let k4 = weights(&root, "train4/s2.sswt");
    let sampler = Sampler::new(&k4, scale.sampler_config(4, SEED), schedule.clone()).unwrap();
    let (mut exact, mut gen_sims, mut fade_sims) = (true, Vec::new(), Vec::new());
    let mut i = 0u64;
    while gen_sims.len() < 2 * scale.pairs {
        i += 1;
        let p = sample_trajectory(&world, derive_seed(SEED, &[9, i]), 4, intr).unwrap().poses;
        let cams = [p[0], lerp(&p[0], &p[3], 1.0 / 3.0), lerp(&p[0], &p[3], 2.0 / 3.0), p[3]];
        let st = style(i as usize, scale.styles);
        // A straight line between two road poses can clip a building corner.
        let Ok(gbufs) = cams.iter().map(|c| render_gbuffer(&world.layout, c)).collect::<Result<Vec<_>, _>>() else {
            continue;
        };
        let truth: Vec<ImageTensor> = cams.iter().map(|c| render_photo(&world, c, st).unwrap()).collect();
        let slots = sampler.interpolate_slots(&truth[0], &truth[3], &gbufs, &cams, st, i).unwrap();
        exact &= slots[0].bit_eq(&truth[0]) && slots[3].bit_eq(&truth[3]);
        for (j, s) in [(1, 1.0 / 3.0), (2, 2.0 / 3.0)] {
            gen_sims.push(patch_similarity(&slots[j], &truth[j], 0).unwrap());
            fade_sims.push(patch_similarity(&crossfade(&truth[0], &truth[3], s), &truth[j], 0).unwrap());
        }
    }
    let ((g, gci), (f, fci)) = (mean_ci(&gen_sims), mean_ci(&fade_sims));
    let detail = format!(
        "{} quadruples; endpoints bit-exact: {exact}; patch distance generated {g:.4} ± {gci:.4} vs cross-fade {f:.4} ± {fci:.4}",
        scale.pairs
    );
    if scale.is_full() {
        report.gate(9, "interpolation", exact && g < f, &detail, t);
    } else if !exact {
        report.gate(9, "interpolation", false, &detail, t);
    } else {
        report.line(
            9,
            "interpolation",
            "DEFERRED",
            &format!("endpoint exactness holds; quality gate needs the trained desk model; {detail}"),
            t,
        );
    }

    let t = Instant::now();
    let again = tmp.path().join("run2");
    pipeline(&scale, &again, false);
    let (first, second) = (files(&root), files(&again));
    let compared: Vec<&PathBuf> =
        second.keys().filter(|p| !p.starts_with("train4") && !p.starts_with("windows4")).collect();
    let differing: Vec<String> =
        compared.iter().filter(|p| first.get(**p) != second.get(**p)).map(|p| p.display().to_string()).collect();
    let n_png = compared.iter().filter(|p| p.extension().is_some_and(|e| e == "png")).count();
    report.gate(
        10,
        "reproducibility",
        differing.is_empty() && !compared.is_empty(),
        &format!(
            "second run of the pipeline: {} files ({n_png} PNG) compared, {} differ{}",
            compared.len(),
            differing.len(),
            differing.first().map(|p| format!(" (first: {p})")).unwrap_or_default()
        ),
        t,
    );

    std::env::set_current_dir(env!("CARGO_MANIFEST_DIR")).unwrap();
    if report.hard_failures > 0 {
        println!("acceptance: {} criteria failed", report.hard_failures);
        std::process::exit(1);
    }
    println!("acceptance: no failing criteria");
}
