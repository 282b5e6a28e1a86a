//! One function per subcommand. Each returns what goes into the run manifest.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde_json::{json, Value};
use streetscape_core::tnsr::Tnsr;
use streetscape_core::{derive_seed, Error, ImageTensor, Result, StyleToken};
use streetscape_metrics::{drift_report, mean_ci, patch_similarity};
use streetscape_model::train::{
    run_curriculum, train_stage, write_checkpoint, CurriculumConfig, TrainConfig, TrainStage,
};
use streetscape_model::{init_backbone, BackboneConfig, ModelWeights};
use streetscape_sampler::output::{frame_name, write_run};
use streetscape_sampler::{Sampler, StreetscapeRun};
use streetscape_scene::camera::{cameras_from_tnsr, cameras_to_tnsr};
use streetscape_scene::photo::render_photo;
use streetscape_scene::png::{quantize, read_png, write_png};
use streetscape_scene::world::{generate_world, sample_trajectory, DatasetDir, WorldModel, WorldSpec, MANIFEST_FILE};
use streetscape_scene::{render_gbuffer, CameraPose, CellClass};

use crate::config::RunConfig;
use crate::selftest::run_selftest;

const TAG_DATASET: u64 = 0xDA7A;
const TAG_TRAJECTORY: u64 = 0x7A;
const TAG_SAMPLER: u64 = 0x5A;
const TAG_INTERPOLATE: u64 = 0x1E;
const TAG_INIT: u64 = 0x1417;
const TAG_STAGE: u64 = 0x5747;

/// What a command did, for its manifest.
#[derive(Debug, Default)]
pub struct Outcome {
    pub seeds: BTreeMap<String, u64>,
    /// Paths relative to the output directory.
    pub artifacts: Vec<String>,
    pub summary: Value,
    /// Commands that check something (selftest) report failure here.
    pub failed: bool,
}

impl Outcome {
    fn seed(&mut self, name: &str, value: u64) {
        self.seeds.insert(name.to_owned(), value);
    }
}

pub fn run(command: &str, cfg: &RunConfig, out: &Path) -> Result<Outcome> {
    match command {
        "worldgen" => worldgen(cfg, out),
        "dataset" => dataset(cfg, out),
        "train" => train(cfg, out),
        "generate" => generate(cfg, out),
        "interpolate" => interpolate(cfg, out),
        "render-gbuffer" => render(cfg, out),
        "evaluate" => evaluate(cfg, out),
        "selftest" => selftest(),
        other => Err(Error::config(format!("unknown subcommand '{other}'"))),
    }
}

fn world_json(world: &WorldModel) -> Value {
    let s = &world.spec;
    json!({
        "seed": world.seed,
        "width": s.width,
        "height": s.height,
        "cell_size": s.cell_size,
        "road_fraction": s.road_fraction,
        "open_lot_fraction": s.open_lot_fraction,
    })
}

fn world_spec_from_json(v: &Value) -> Result<(u64, WorldSpec)> {
    let bad = |k: &str| Error::format(format!("run.json: world.{k} missing or invalid"));
    let u = |k: &str| v.get(k).and_then(Value::as_u64).ok_or_else(|| bad(k));
    let f = |k: &str| v.get(k).and_then(Value::as_f64).ok_or_else(|| bad(k));
    let spec = WorldSpec {
        width: u("width")? as usize,
        height: u("height")? as usize,
        cell_size: f("cell_size")?,
        road_fraction: f("road_fraction")?,
        open_lot_fraction: f("open_lot_fraction")?,
    };
    spec.validate()?;
    Ok((u("seed")?, spec))
}

fn write_json(path: &Path, value: &Value) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::format(e.to_string()))?;
    std::fs::write(path, text + "\n")?;
    Ok(())
}

fn world_of(cfg: &RunConfig, command: &str, outcome: &mut Outcome) -> Result<WorldModel> {
    let seed = cfg.world_seed(command)?;
    outcome.seed("world", seed);
    generate_world(seed, &cfg.world_spec()?)
}

fn worldgen(cfg: &RunConfig, out: &Path) -> Result<Outcome> {
    let mut o = Outcome::default();
    o.seed("master", cfg.seed("worldgen")?);
    let world = world_of(cfg, "worldgen", &mut o)?;
    world.layout.write(out.join("layout.txt"))?;
    let g = &world.streets;
    let info = json!({
        "world": world_json(&world),
        "streets": { "pitch": g.pitch, "sidewalk": g.sidewalk, "road": g.road },
        "buildings": world.num_buildings(),
        "street_fraction": world.street_fraction(),
    });
    write_json(&out.join("world.json"), &info)?;
    o.artifacts = vec!["layout.txt".into(), "world.json".into()];
    o.summary = info;
    Ok(o)
}

fn dataset(cfg: &RunConfig, out: &Path) -> Result<Outcome> {
    let mut o = Outcome::default();
    let seed = cfg.seed("dataset")?;
    o.seed("master", seed);
    let world = world_of(cfg, "dataset", &mut o)?;
    let spec = cfg.dataset_spec()?;
    let ds_seed = derive_seed(seed, &[TAG_DATASET]);
    o.seed("dataset", ds_seed);
    let dir = DatasetDir::create(out, &world, &spec, ds_seed)?;
    o.artifacts = vec![MANIFEST_FILE.into(), format!("w000000 .. w{:06}", dir.len().saturating_sub(1))];
    o.summary = json!({ "windows": dir.len(), "frames": spec.frames });
    Ok(o)
}

fn stage_tag(stage: TrainStage) -> u64 {
    match stage {
        TrainStage::S0 => 0,
        TrainStage::S1 => 1,
        TrainStage::S2 => 2,
        TrainStage::S2RgbControl => 3,
    }
}

fn train(cfg: &RunConfig, out: &Path) -> Result<Outcome> {
    let mut o = Outcome::default();
    let seed = cfg.seed("train")?;
    o.seed("master", seed);
    let schedule = cfg.schedule()?;
    let open = |key: &str| DatasetDir::open(cfg.require_path(key)?);
    let Some(stage) = cfg.stage()? else {
        let rgbctl: usize = cfg.get("train.rgbctl_iterations")?;
        let cc = CurriculumConfig {
            backbone: cfg.backbone()?,
            seed,
            s0: cfg.stage_plan("train.s0_iterations")?,
            s1: cfg.stage_plan("train.s1_iterations")?,
            s2: cfg.stage_plan("train.s2_iterations")?,
            rgb_control: if rgbctl > 0 { Some(cfg.stage_plan("train.rgbctl_iterations")?) } else { None },
            cfg_dropout: cfg.get("train.cfg_dropout")?,
            out_dir: out.to_path_buf(),
            resume_from: cfg.path("train.resume"),
        };
        let outcome = run_curriculum(&cc, &open("train.singles")?, &open("train.windows")?, &schedule)?;
        let mut stages = Vec::new();
        for s in &outcome.stages {
            o.seed(&s.stage.to_string(), s.seed);
            let name = s.stage.to_string().to_lowercase();
            o.artifacts.extend([s.file.clone(), format!("{name}.txt")]);
            if s.final_loss.is_some() {
                o.artifacts.push(format!("{name}-loss.csv"));
            }
            stages
                .push(json!({ "stage": s.stage.to_string(), "iterations": s.iterations, "final_loss": s.final_loss }));
        }
        o.artifacts.push("curriculum.txt".into());
        o.summary = json!({ "stages": stages, "init_seed": derive_seed(seed, &[TAG_INIT]) });
        return Ok(o);
    };

    let data = open(if stage == TrainStage::S0 { "train.singles" } else { "train.windows" })?;
    let init_seed = derive_seed(seed, &[TAG_INIT]);
    let mut weights = match cfg.path("train.init") {
        Some(p) => ModelWeights::load(p)?,
        None if stage == TrainStage::S0 => init_backbone(&cfg.backbone()?, init_seed)?,
        None => return Err(Error::config(format!("'train.init' must be set for stage {stage}"))),
    };
    match stage {
        TrainStage::S2 => weights.reset_control_from_encoder()?,
        TrainStage::S2RgbControl if !weights.config.rgb_control => {
            let rc = BackboneConfig { rgb_control: true, ..weights.config.clone() };
            let mut v = init_backbone(&rc, init_seed)?;
            v.adopt_matching(&weights);
            v.reset_control_from_encoder()?;
            weights = v;
        }
        _ => {}
    }
    let tc = TrainConfig {
        stage,
        learning_rate: cfg.get("train.lr")?,
        batch_size: cfg.get("train.batch")?,
        iterations: cfg.get("train.iterations")?,
        cfg_dropout: cfg.get("train.cfg_dropout")?,
        seed: derive_seed(seed, &[TAG_STAGE, stage_tag(stage)]),
        checkpoint_every: cfg.get("train.checkpoint_every")?,
        checkpoint_dir: Some(out.to_path_buf()),
    };
    o.seed(&stage.to_string(), tc.seed);
    let result = train_stage(&weights, &data, &tc, &schedule)?;
    let name = stage.to_string().to_lowercase();
    let last = result.curve.losses.last().copied().unwrap_or(f64::NAN);
    write_checkpoint(out, &name, &result.weights, &tc, tc.iterations, last)?;
    std::fs::write(out.join(format!("{name}-loss.csv")), result.curve.to_csv())?;
    o.artifacts = vec![format!("{name}.sswt"), format!("{name}.txt"), format!("{name}-loss.csv")];
    if tc.checkpoint_every > 0 {
        let every = tc.checkpoint_every;
        for it in (every..tc.iterations).step_by(every) {
            o.artifacts.extend([format!("{stage}-{it}.sswt"), format!("{stage}-{it}.txt")]);
        }
    }
    o.summary = json!({
        "stage": stage.to_string(),
        "iterations": tc.iterations,
        "final_loss": last,
        "null_style_windows": result.null_style_count,
    });
    Ok(o)
}

/// Metadata of a generated run, read back from its `run.json`.
pub struct RunRecord {
    pub dir: PathBuf,
    pub world_seed: u64,
    pub world: WorldSpec,
    pub style: StyleToken,
    pub files: Vec<String>,
    pub steps: Vec<usize>,
    pub cameras: Vec<CameraPose>,
}

impl RunRecord {
    pub fn read(dir: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(dir.join("run.json"))?;
        let v: Value = serde_json::from_str(&text).map_err(|e| Error::format(format!("run.json: {e}")))?;
        let bad = |k: &str| Error::format(format!("run.json: '{k}' missing or invalid"));
        let (world_seed, world) = world_spec_from_json(v.get("world").ok_or_else(|| bad("world"))?)?;
        let n_styles = v.get("num_styles").and_then(Value::as_u64).ok_or_else(|| bad("num_styles"))?;
        let style = v.get("style").and_then(Value::as_u64).ok_or_else(|| bad("style"))?;
        let style = StyleToken::new(style as usize, n_styles as usize).map_err(|e| Error::format(e.to_string()))?;
        let frames = v.get("frames").and_then(Value::as_array).ok_or_else(|| bad("frames"))?;
        let (mut files, mut steps, mut cameras) = (Vec::new(), Vec::new(), Vec::new());
        for f in frames {
            let file = f.get("file").and_then(Value::as_str).ok_or_else(|| bad("frames.file"))?;
            if file.contains(['/', '\\']) || file.starts_with('.') {
                return Err(bad("frames.file"));
            }
            files.push(file.to_owned());
            steps.push(f.get("step").and_then(Value::as_u64).ok_or_else(|| bad("frames.step"))? as usize);
            let rec = f
                .get("camera")
                .and_then(Value::as_array)
                .ok_or_else(|| bad("frames.camera"))?
                .iter()
                .map(|x| x.as_f64().map(|x| x as f32).ok_or_else(|| bad("frames.camera")))
                .collect::<Result<Vec<f32>>>()?;
            cameras.push(CameraPose::from_record(&rec).map_err(|e| Error::format(e.to_string()))?);
        }
        Ok(Self { dir: dir.to_path_buf(), world_seed, world, style, files, steps, cameras })
    }

    pub fn frames(&self) -> Result<Vec<ImageTensor>> {
        self.files.iter().map(|f| read_png(self.dir.join(f))).collect()
    }
}

fn load_weights(cfg: &RunConfig, key: &str) -> Result<ModelWeights> {
    ModelWeights::load(cfg.require_path(key)?)
}

fn generate(cfg: &RunConfig, out: &Path) -> Result<Outcome> {
    let mut o = Outcome::default();
    let seed = cfg.seed("generate")?;
    o.seed("master", seed);
    let rgb = match cfg.raw("generate.mode") {
        "imputation" => false,
        "rgbctl" => true,
        m => return Err(Error::config(format!("generate.mode '{m}' is not 'imputation' or 'rgbctl'"))),
    };
    let weights = load_weights(cfg, "generate.weights")?;
    let mc = &weights.config;
    let n: usize = cfg.get("generate.frames")?;
    if n < mc.frames {
        return Err(Error::config(format!(
            "generate.frames = {n} is below the model window K = {}: a trajectory needs N >= K frames",
            mc.frames
        )));
    }
    if rgb != mc.rgb_control {
        return Err(Error::config(format!("mode {} needs a model with rgb_control = {rgb}", cfg.raw("generate.mode"))));
    }
    let size: usize = cfg.get("image.size")?;
    if size != mc.image_size {
        return Err(Error::config(format!("image.size = {size} but the model generates {} px frames", mc.image_size)));
    }
    let style = StyleToken::new(cfg.get("generate.style")?, mc.num_styles)?;
    let world = world_of(cfg, "generate", &mut o)?;
    let schedule = cfg.schedule()?;
    let count: usize = cfg.get("generate.trajectories")?;
    let fixed = match cfg.path("generate.trajectory") {
        Some(p) if count == 1 => Some(cameras_from_tnsr(&Tnsr::read(p)?)?),
        Some(_) => return Err(Error::config("generate.trajectory needs generate.trajectories = 1")),
        None => None,
    };
    let intrinsics = cfg.intrinsics()?;
    let mut runs = Vec::new();
    for i in 0..count {
        let traj_seed = derive_seed(seed, &[TAG_TRAJECTORY, i as u64]);
        let cams = match &fixed {
            Some(c) => c.clone(),
            None => {
                o.seed(&format!("trajectory_{i:03}"), traj_seed);
                sample_trajectory(&world, traj_seed, n, intrinsics)?.poses
            }
        };
        let sc = cfg.sampler(mc.frames, seed, &[TAG_SAMPLER, i as u64])?;
        o.seed(&format!("sampler_{i:03}"), sc.seed);
        let sampler = Sampler::new(&weights, sc.clone(), schedule.clone())?;
        let run = if rgb {
            sampler.generate_rgb_control(&world.layout, &cams, style)?
        } else {
            sampler.generate_streetscape(&world.layout, &cams, style)?
        };
        let name = format!("run_{i:03}");
        let dir = out.join(&name);
        let extra = json!({
            "world": world_json(&world),
            "style": style.id(),
            "num_styles": mc.num_styles,
            "mode": cfg.raw("generate.mode"),
            "trajectory": "trajectory.tnsr",
        });
        write_run(&dir, &run, &sc, extra)?;
        cameras_to_tnsr(&run.cameras).write(dir.join("trajectory.tnsr"))?;
        o.artifacts.extend([format!("{name}/run.json"), format!("{name}/trajectory.tnsr")]);
        o.artifacts.extend((0..run.frames.len()).map(|f| format!("{name}/{}", frame_name(f))));
        runs.push(json!({ "dir": name, "frames": run.frames.len(), "model_calls": run.model_calls, "known_mismatches": run.known_mismatches }));
    }
    o.summary = json!({ "runs": runs });
    Ok(o)
}

fn interpolate(cfg: &RunConfig, out: &Path) -> Result<Outcome> {
    let mut o = Outcome::default();
    let seed = cfg.seed("interpolate")?;
    o.seed("master", seed);
    let weights = load_weights(cfg, "interpolate.weights")?;
    if weights.config.frames != 4 {
        return Err(Error::config(format!("interpolation needs a K = 4 model, got K = {}", weights.config.frames)));
    }
    let input = RunRecord::read(&cfg.require_path("interpolate.input")?)?;
    let world = generate_world(input.world_seed, &input.world)?;
    o.seed("world", input.world_seed);
    let sc = cfg.sampler(4, seed, &[TAG_INTERPOLATE])?;
    o.seed("sampler", sc.seed);
    let sampler = Sampler::new(&weights, sc.clone(), cfg.schedule()?)?;
    let style = StyleToken::new(input.style.id(), weights.config.num_styles)?;
    let (frames, cameras) = sampler.interpolate_sequence(&world.layout, &input.frames()?, &input.cameras, style)?;
    let run = StreetscapeRun {
        steps: (0..frames.len()).map(|i| i.div_ceil(3)).collect(),
        frames,
        cameras,
        known_mismatches: None,
        model_calls: sampler.model_calls(),
    };
    let extra = json!({
        "world": world_json(&world),
        "style": style.id(),
        "num_styles": weights.config.num_styles,
        "mode": "interpolation",
        "keyframes": input.dir.display().to_string(),
    });
    write_run(out, &run, &sc, extra)?;
    o.artifacts.push("run.json".into());
    o.artifacts.extend((0..run.frames.len()).map(frame_name));
    o.summary = json!({ "keyframes": input.files.len(), "frames": run.frames.len() });
    Ok(o)
}

/// Center of the road cell nearest to the middle of the world.
fn street_center(world: &WorldModel) -> (f64, f64) {
    let l = &world.layout;
    let (mx, my) = (l.extent().0 / 2.0, l.extent().1 / 2.0);
    let cs = l.cell_size();
    let mut best = (f64::INFINITY, mx, my);
    for row in 0..l.height() {
        for col in 0..l.width() {
            if l.class_at(col, row) != CellClass::Road {
                continue;
            }
            let (x, y) = ((col as f64 + 0.5) * cs, (row as f64 + 0.5) * cs);
            let d = (x - mx).powi(2) + (y - my).powi(2);
            if d < best.0 {
                best = (d, x, y);
            }
        }
    }
    (best.1, best.2)
}

fn render(cfg: &RunConfig, out: &Path) -> Result<Outcome> {
    let mut o = Outcome::default();
    let world = world_of(cfg, "render-gbuffer", &mut o)?;
    let (cx, cy) = street_center(&world);
    let coord = |key: &str, default: f64| -> Result<f64> {
        if cfg.raw(key).is_empty() {
            Ok(default)
        } else {
            cfg.get(key)
        }
    };
    let cam = CameraPose::new(
        nalgebra::Vector3::new(coord("render.x", cx)?, coord("render.y", cy)?, cfg.get("render.z")?),
        cfg.get::<f64>("render.yaw_deg")?.to_radians(),
        cfg.get::<f64>("render.pitch_deg")?.to_radians(),
        cfg.intrinsics()?,
    );
    let g = render_gbuffer(&world.layout, &cam)?;
    let t = g.to_tensor();
    let (c, h, w) = t.shape();
    Tnsr::new(vec![c, h, w], t.into_data())?.write(out.join("gbuffer.tnsr"))?;
    cameras_to_tnsr(&[cam]).write(out.join("camera.tnsr"))?;
    let style = cfg.style("render.style")?;
    write_png(&render_photo(&world, &cam, style)?, out.join("photo.png"))?;
    o.artifacts = vec!["gbuffer.tnsr".into(), "camera.tnsr".into(), "photo.png".into()];
    o.summary = json!({ "camera": cam.to_record().to_vec(), "channels": c });
    Ok(o)
}

fn evaluate(cfg: &RunConfig, out: &Path) -> Result<Outcome> {
    let mut o = Outcome::default();
    let seed: u64 = cfg.get("evaluate.extractor_seed")?;
    o.seed("extractor", seed);
    let dirs: Vec<&str> = cfg.raw("evaluate.runs").split(',').map(str::trim).filter(|s| !s.is_empty()).collect();
    if dirs.is_empty() {
        return Err(Error::config("'evaluate.runs' must list at least one run directory"));
    }
    let mut worlds: Vec<WorldModel> = Vec::new();
    let (mut generated, mut reference, mut patch) = (Vec::new(), Vec::new(), Vec::new());
    for d in &dirs {
        let rec = RunRecord::read(Path::new(d))?;
        let wi = match worlds.iter().position(|w| w.seed == rec.world_seed && w.spec == rec.world) {
            Some(i) => i,
            None => {
                worlds.push(generate_world(rec.world_seed, &rec.world)?);
                worlds.len() - 1
            }
        };
        for ((frame, step), cam) in rec.frames()?.into_iter().zip(&rec.steps).zip(&rec.cameras) {
            let truth = quantize(&render_photo(&worlds[wi], cam, rec.style)?);
            patch.push(patch_similarity(&frame, &truth, seed)?);
            generated.push((*step, frame));
            reference.push(truth);
        }
    }
    let tagged: Vec<(usize, &ImageTensor)> = generated.iter().map(|(s, f)| (*s, f)).collect();
    let report = drift_report(&tagged, &reference, seed)?;
    let (mean, ci) = mean_ci(&patch);
    std::fs::write(out.join("drift.csv"), report.to_csv())?;
    write_json(&out.join("drift.json"), &report.to_json(json!({ "runs": dirs, "frames": patch.len() })))?;
    let patch_json = json!({ "mean": mean, "ci95": ci, "count": patch.len() });
    write_json(&out.join("patch.json"), &patch_json)?;
    o.artifacts = vec!["drift.csv".into(), "drift.json".into(), "patch.json".into()];
    o.summary = json!({ "patch_similarity": patch_json, "absent_buckets": report.absent });
    Ok(o)
}

fn selftest() -> Result<Outcome> {
    let checks = run_selftest()?;
    let mut o = Outcome::default();
    for c in &checks {
        println!("{}", c.line());
        o.failed |= !c.passed;
    }
    let rows: Vec<Value> =
        checks.iter().map(|c| json!({ "name": c.name, "passed": c.passed, "detail": c.detail })).collect();
    o.summary = json!({ "checks": rows });
    Ok(o)
}
