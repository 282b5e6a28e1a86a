//! Flat `key = value` run configuration.
//!
//! One pair per line, `#` starts a comment. Every key has a documented
//! default except `seed`; unknown and repeated keys are errors. Command-line
//! `--key value` flags are applied after the file.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use sha2::{Digest, Sha256};
use streetscape_core::{derive_seed, Error, NoiseSchedule, Result, ScheduleKind, StyleToken};
use streetscape_model::train::{StagePlan, TrainStage};
use streetscape_model::BackboneConfig;
use streetscape_sampler::SamplerConfig;
use streetscape_scene::world::{DatasetSpec, LayoutNoise, PoseJitter, WorldSpec};
use streetscape_scene::Intrinsics;

pub struct Key {
    pub name: &'static str,
    /// `None` for keys without a default.
    pub default: Option<&'static str>,
    pub doc: &'static str,
}

const fn key(name: &'static str, default: &'static str, doc: &'static str) -> Key {
    Key { name, default: Some(default), doc }
}

pub const KEYS: &[Key] = &[
    Key { name: "seed", default: None, doc: "master seed; required by every stochastic command" },
    key("out", "out", "output directory"),
    key("world.seed", "", "seed of the street world (empty: use `seed`)"),
    key("world.width", "128", "world width in cells"),
    key("world.height", "128", "world height in cells"),
    key("world.cell_size", "1", "cell edge length in meters"),
    key("world.road_fraction", "0.45", "target fraction of road + sidewalk cells"),
    key("world.open_lot_fraction", "0.15", "probability that a lot stays open ground"),
    key("image.size", "64", "frame width and height in pixels"),
    key("camera.hfov_deg", "60", "horizontal field of view in degrees"),
    key("dataset.windows", "20000", "number of training windows"),
    key("dataset.frames", "2", "frames per window (1, 2 or 4)"),
    key("dataset.styles", "4", "number of appearance styles"),
    key("dataset.height_sigma", "0", "G-buffer misalignment: building height noise (m)"),
    key("dataset.dilation", "0", "G-buffer misalignment: footprint dilation (-1, 0, 1 cells)"),
    key("dataset.jitter_m", "0", "G-buffer misalignment: camera position jitter (m)"),
    key("dataset.jitter_deg", "0", "G-buffer misalignment: camera yaw jitter (degrees)"),
    key("model.base_channels", "32", "UNet width at full resolution"),
    key("model.multipliers", "1,2,4", "per-level channel multipliers"),
    key("model.frames", "2", "window size K of the model (2 or 4)"),
    key("model.temb", "128", "time/style embedding width"),
    key("model.groups", "8", "group-norm groups"),
    key("schedule.steps", "1000", "diffusion steps T"),
    key("schedule.kind", "cosine", "noise schedule: cosine or linear"),
    key("train.stage", "curriculum", "curriculum, S0, S1, S2 or S2-rgbctl"),
    key("train.singles", "", "dataset directory with 1-frame windows (S0)"),
    key("train.windows", "", "dataset directory with K-frame windows (S1, S2)"),
    key("train.init", "", "weights to start a single stage from"),
    key("train.resume", "", "curriculum checkpoint to resume after"),
    key("train.lr", "1e-4", "learning rate"),
    key("train.batch", "32", "windows per batch"),
    key("train.s0_iterations", "20000", "S0 iterations"),
    key("train.s1_iterations", "10000", "S1 iterations"),
    key("train.s2_iterations", "10000", "S2 iterations"),
    key("train.rgbctl_iterations", "0", "S2-rgbctl iterations (0 skips the variant)"),
    key("train.iterations", "1000", "iterations of a single stage"),
    key("train.cfg_dropout", "0.1", "probability of training with the null style"),
    key("train.checkpoint_every", "0", "single-stage checkpoint cadence (0: end only)"),
    key("sampler.steps", "50", "DDIM inference levels"),
    key("sampler.cfg_scale", "7.5", "classifier-free guidance scale"),
    key("sampler.resample", "10", "Resample rounds per level"),
    key("sampler.warp_init", "true", "initialize new frames from warped conditions"),
    key("sampler.control_scale", "1", "control-branch residual scale"),
    key("generate.weights", "", "weights file"),
    key("generate.mode", "imputation", "imputation or rgbctl"),
    key("generate.frames", "64", "frames per trajectory (N)"),
    key("generate.trajectories", "1", "number of trajectories"),
    key("generate.trajectory", "", "TNSR camera file to use instead of sampling"),
    key("generate.style", "0", "style id"),
    key("interpolate.weights", "", "K = 4 weights file"),
    key("interpolate.input", "", "run directory whose frames are the keyframes"),
    key("render.x", "", "camera x (m); empty: road cell nearest the world center"),
    key("render.y", "", "camera y (m); empty: road cell nearest the world center"),
    key("render.z", "2", "camera height (m)"),
    key("render.yaw_deg", "0", "camera yaw (degrees, 0 = east)"),
    key("render.pitch_deg", "0", "camera pitch (degrees, positive = up)"),
    key("render.style", "0", "style of the photo render"),
    key("evaluate.runs", "", "comma-separated run directories"),
    key("evaluate.extractor_seed", "0", "seed of the metric feature extractor"),
];

pub fn find_key(name: &str) -> Option<&'static Key> {
    KEYS.iter().find(|k| k.name == name)
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or_default().trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("config line {}: expected 'key = value'", no + 1)))?;
            let k = k.trim();
            if cfg.values.contains_key(k) {
                return Err(Error::config(format!("config line {}: key '{k}' repeated", no + 1)));
            }
            cfg.set(k, v.trim()).map_err(|e| Error::config(format!("config line {}: {e}", no + 1)))?;
        }
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if find_key(key).is_none() {
            return Err(Error::config(format!("unknown key '{key}'")));
        }
        self.values.insert(key.to_owned(), value.to_owned());
        Ok(())
    }

    pub fn raw(&self, key: &str) -> &str {
        let spec = find_key(key).unwrap_or_else(|| panic!("undeclared key {key}"));
        self.values.get(key).map(String::as_str).or(spec.default).unwrap_or("")
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.raw(key);
        raw.parse().map_err(|_| Error::config(format!("bad value {raw:?} for '{key}'")))
    }

    pub fn flag(&self, key: &str) -> Result<bool> {
        match self.raw(key) {
            "true" | "1" | "yes" => Ok(true),
            "false" | "0" | "no" => Ok(false),
            other => Err(Error::config(format!("bad value {other:?} for '{key}' (true/false)"))),
        }
    }

    pub fn path(&self, key: &str) -> Option<PathBuf> {
        let raw = self.raw(key);
        (!raw.is_empty()).then(|| PathBuf::from(raw))
    }

    pub fn require_path(&self, key: &str) -> Result<PathBuf> {
        self.path(key).ok_or_else(|| Error::config(format!("'{key}' must be set")))
    }

    pub fn seed(&self, command: &str) -> Result<u64> {
        if self.raw("seed").is_empty() {
            return Err(Error::config(format!("--seed is required for '{command}'")));
        }
        self.get("seed")
    }

    /// Every key with its effective value, sorted: the hashed identity of a
    /// run. `out` is left out so that where a run is written does not change
    /// what it is.
    pub fn canonical_text(&self) -> String {
        let mut names: Vec<&str> = KEYS.iter().map(|k| k.name).filter(|&n| n != "out").collect();
        names.sort_unstable();
        let mut out = String::new();
        for n in names {
            let _ = writeln!(out, "{n}={}", self.raw(n));
        }
        out
    }

    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.canonical_text().as_bytes()))
    }

    pub fn world_seed(&self, command: &str) -> Result<u64> {
        if self.raw("world.seed").is_empty() {
            self.seed(command)
        } else {
            self.get("world.seed")
        }
    }

    pub fn world_spec(&self) -> Result<WorldSpec> {
        let spec = WorldSpec {
            width: self.get("world.width")?,
            height: self.get("world.height")?,
            cell_size: self.get("world.cell_size")?,
            road_fraction: self.get("world.road_fraction")?,
            open_lot_fraction: self.get("world.open_lot_fraction")?,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn intrinsics(&self) -> Result<Intrinsics> {
        let size: usize = self.get("image.size")?;
        let fov: f64 = self.get("camera.hfov_deg")?;
        if size == 0 || size > 4096 || !(fov > 0.0 && fov < 180.0) {
            return Err(Error::config(format!("bad camera: {size} px, {fov} degrees")));
        }
        Ok(Intrinsics::new(fov, size, size))
    }

    pub fn dataset_spec(&self) -> Result<DatasetSpec> {
        let spec = DatasetSpec {
            windows: self.get("dataset.windows")?,
            frames: self.get("dataset.frames")?,
            intrinsics: self.intrinsics()?,
            num_styles: self.get("dataset.styles")?,
            layout_noise: LayoutNoise {
                height_sigma: self.get("dataset.height_sigma")?,
                dilation: self.get("dataset.dilation")?,
            },
            pose_jitter: PoseJitter {
                position_m: self.get("dataset.jitter_m")?,
                yaw_deg: self.get("dataset.jitter_deg")?,
            },
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn backbone(&self) -> Result<BackboneConfig> {
        let mult = self
            .raw("model.multipliers")
            .split(',')
            .map(|m| m.trim().parse().map_err(|_| Error::config("bad value for 'model.multipliers'")))
            .collect::<Result<Vec<usize>>>()?;
        let c = BackboneConfig {
            image_size: self.get("image.size")?,
            base_channels: self.get("model.base_channels")?,
            channel_multipliers: mult,
            frames: self.get("model.frames")?,
            num_styles: self.get("dataset.styles")?,
            timestep_embed_dim: self.get("model.temb")?,
            groups: self.get("model.groups")?,
            ..BackboneConfig::default()
        };
        c.validate()?;
        Ok(c)
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        let kind: ScheduleKind = self.get("schedule.kind")?;
        NoiseSchedule::build(self.get("schedule.steps")?, kind)
    }

    pub fn stage(&self) -> Result<Option<TrainStage>> {
        match self.raw("train.stage") {
            "curriculum" => Ok(None),
            s => s.parse().map(Some),
        }
    }

    pub fn stage_plan(&self, iterations_key: &str) -> Result<StagePlan> {
        Ok(StagePlan {
            iterations: self.get(iterations_key)?,
            learning_rate: self.get("train.lr")?,
            batch_size: self.get("train.batch")?,
        })
    }

    /// Sampler settings with a seed derived from the master seed and `tags`.
    pub fn sampler(&self, context: usize, seed: u64, tags: &[u64]) -> Result<SamplerConfig> {
        Ok(SamplerConfig {
            steps: self.get("sampler.steps")?,
            cfg_scale: self.get("sampler.cfg_scale")?,
            resample: self.get("sampler.resample")?,
            warp_init: self.flag("sampler.warp_init")?,
            context,
            control_scale: self.get("sampler.control_scale")?,
            seed: derive_seed(seed, tags),
        })
    }

    pub fn style(&self, key: &str) -> Result<StyleToken> {
        let id: usize = self.get(key)?;
        let n: usize = self.get("dataset.styles")?;
        if id >= n {
            return Err(Error::config(format!("'{key}' = {id} must be below dataset.styles = {n}")));
        }
        StyleToken::new(id, n)
    }
}
