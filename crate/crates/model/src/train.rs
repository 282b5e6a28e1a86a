//! Staged optimization of the noise-prediction loss.
//!
//! S0 trains the spatial UNet on single frames, S1 the motion modules on
//! K-frame windows with S0 frozen, S2 the control branch with S0 and S1
//! frozen. `S2-rgbctl` is S2 on a control branch that also sees the
//! condition frames as RGB.

use std::fmt::{self, Write as _};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use candle_core::{DType, Device, Tensor};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use streetscape_core::{derive_seed, Error, ImageTensor, NoiseRng, NoiseSchedule, Result};
use streetscape_scene::world::{DatasetDir, WindowSample};

use crate::condition::control_frame;
use crate::config::{BackboneConfig, Stage};
use crate::net::{backend, Backbone, CResult};
use crate::weights::{init_backbone, ModelWeights};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrainStage {
    S0,
    S1,
    S2,
    S2RgbControl,
}

impl TrainStage {
    pub fn trainable(self) -> Stage {
        match self {
            TrainStage::S0 => Stage::S0,
            TrainStage::S1 => Stage::S1,
            TrainStage::S2 | TrainStage::S2RgbControl => Stage::S2,
        }
    }

    /// Frames per training window.
    pub fn window_frames(self, config: &BackboneConfig) -> usize {
        if self == TrainStage::S0 {
            1
        } else {
            config.frames
        }
    }

    pub fn uses_control(self) -> bool {
        matches!(self, TrainStage::S2 | TrainStage::S2RgbControl)
    }
}

impl fmt::Display for TrainStage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TrainStage::S0 => "S0",
            TrainStage::S1 => "S1",
            TrainStage::S2 => "S2",
            TrainStage::S2RgbControl => "S2-rgbctl",
        })
    }
}

impl FromStr for TrainStage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "S0" => TrainStage::S0,
            "S1" => TrainStage::S1,
            "S2" => TrainStage::S2,
            "S2-rgbctl" => TrainStage::S2RgbControl,
            _ => return Err(Error::config(format!("unknown stage '{s}'"))),
        })
    }
}

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub stage: TrainStage,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub iterations: usize,
    /// Probability of replacing the style by the null token.
    pub cfg_dropout: f64,
    pub seed: u64,
    /// Write a checkpoint every this many iterations (0 = only at the end).
    pub checkpoint_every: usize,
    pub checkpoint_dir: Option<PathBuf>,
}

impl TrainConfig {
    pub fn new(stage: TrainStage, iterations: usize, seed: u64) -> Self {
        Self {
            stage,
            learning_rate: 1e-4,
            batch_size: 32,
            iterations,
            cfg_dropout: 0.1,
            seed,
            checkpoint_every: 0,
            checkpoint_dir: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config(format!("learning rate {} must be > 0", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.cfg_dropout) {
            return Err(Error::config(format!("cfg dropout {} outside [0, 1)", self.cfg_dropout)));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch size must be positive"));
        }
        Ok(())
    }
}

/// Source of training windows.
pub trait WindowSource {
    fn len(&self) -> usize;
    fn frames(&self) -> usize;
    fn window(&self, index: usize) -> Result<WindowSample>;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl WindowSource for Vec<WindowSample> {
    fn len(&self) -> usize {
        Vec::len(self)
    }

    fn frames(&self) -> usize {
        self.first().map_or(0, |w| w.frames.len())
    }

    fn window(&self, index: usize) -> Result<WindowSample> {
        self.get(index).cloned().ok_or_else(|| Error::contract(format!("window {index} out of range")))
    }
}

impl WindowSource for DatasetDir {
    fn len(&self) -> usize {
        DatasetDir::len(self)
    }

    fn frames(&self) -> usize {
        self.manifest.spec.frames
    }

    fn window(&self, index: usize) -> Result<WindowSample> {
        self.load_window(index)
    }
}

/// Per-iteration losses.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossCurve {
    pub losses: Vec<f64>,
}

impl LossCurve {
    pub const EVERY: usize = 100;

    /// `(last iteration of chunk, mean loss over chunk)` per 100 iterations.
    pub fn points(&self) -> Vec<(usize, f64)> {
        self.losses
            .chunks(Self::EVERY)
            .enumerate()
            .map(|(i, c)| (i * Self::EVERY + c.len(), c.iter().sum::<f64>() / c.len() as f64))
            .collect()
    }

    pub fn mean_first(&self, n: usize) -> f64 {
        let s = &self.losses[..n.min(self.losses.len())];
        s.iter().sum::<f64>() / s.len() as f64
    }

    pub fn mean_last(&self, n: usize) -> f64 {
        let s = &self.losses[self.losses.len().saturating_sub(n)..];
        s.iter().sum::<f64>() / s.len() as f64
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("iteration,loss\n");
        for (it, l) in self.points() {
            let _ = writeln!(out, "{it},{l}");
        }
        out
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub weights: ModelWeights,
    pub curve: LossCurve,
    /// Windows presented with the null style token.
    pub null_style_count: usize,
}

/// Mean squared error on backend tensors.
pub fn noise_loss(eps_hat: &Tensor, eps: &Tensor) -> CResult<Tensor> {
    (eps_hat - eps)?.sqr()?.mean_all()
}

struct Batch {
    x: Tensor,
    eps: Tensor,
    control: Option<Tensor>,
    ts: Vec<usize>,
    styles: Vec<usize>,
}

fn assemble(
    windows: &[WindowSample],
    config: &BackboneConfig,
    stage: TrainStage,
    schedule: &NoiseSchedule,
    rng: &mut NoiseRng,
    dropout: f64,
    nulls: &mut usize,
) -> Result<Batch> {
    let (mut xs, mut es, mut cs) = (Vec::new(), Vec::new(), Vec::new());
    let (mut ts, mut styles) = (Vec::new(), Vec::new());
    let known = config.frames / 2;
    for win in windows {
        let t = 1 + rng.below(schedule.steps() as u64) as usize;
        ts.push(t);
        let mut style = win.style.id();
        if rng.bernoulli(dropout) {
            style = config.num_styles;
            *nulls += 1;
        }
        styles.push(style);
        for (j, frame) in win.frames.iter().enumerate() {
            let eps = rng.normal_tensor(frame.channels(), frame.height(), frame.width());
            let xt = streetscape_core::diffusion::forward_diffuse(frame, t, &eps, schedule)?;
            xs.extend_from_slice(xt.data());
            es.extend_from_slice(eps.data());
            if stage.uses_control() {
                let g = win.gbuffers[j].to_tensor();
                let rgb = (stage == TrainStage::S2RgbControl && j < known).then_some(frame);
                cs.extend_from_slice(control_frame(&g, rgb, config.rgb_control)?.data());
            }
        }
    }
    let (b, f) = (windows.len(), windows[0].frames.len());
    let (c, s) = (config.image_channels, config.image_size);
    let dev = Device::Cpu;
    let x = Tensor::from_vec(xs, (b, f, c, s, s), &dev).map_err(backend)?;
    let eps = Tensor::from_vec(es, (b, f, c, s, s), &dev).map_err(backend)?;
    let control = if stage.uses_control() {
        Some(Tensor::from_vec(cs, (b, f, config.control_channels(), s, s), &dev).map_err(backend)?)
    } else {
        None
    };
    Ok(Batch { x, eps, control, ts, styles })
}

fn check_window(win: &WindowSample, config: &BackboneConfig, frames: usize) -> Result<()> {
    let s = config.image_size;
    if win.frames.len() != frames || win.gbuffers.len() != frames {
        return Err(Error::config(format!("dataset windows have {} frames, stage needs {frames}", win.frames.len())));
    }
    for f in &win.frames {
        if f.shape() != (config.image_channels, s, s) {
            return Err(Error::config(format!("dataset frame shape {:?} does not match the model", f.shape())));
        }
    }
    Ok(())
}

/// Optimizes the stage's parameters; all other parameters are left
/// byte-identical.
pub fn train_stage(
    weights: &ModelWeights,
    data: &dyn WindowSource,
    config: &TrainConfig,
    schedule: &NoiseSchedule,
) -> Result<TrainOutcome> {
    config.validate()?;
    let mc = &weights.config;
    let frames = config.stage.window_frames(mc);
    if data.is_empty() {
        return Err(Error::config("training dataset is empty"));
    }
    if data.frames() != frames {
        return Err(Error::config(format!(
            "stage {} needs {frames}-frame windows, dataset has {}",
            config.stage,
            data.frames()
        )));
    }
    if (config.stage == TrainStage::S2RgbControl) != mc.rgb_control {
        return Err(Error::config(format!(
            "stage {} does not match a model with rgb_control = {}",
            config.stage, mc.rgb_control
        )));
    }
    let net = Backbone::new(weights, &[config.stage.trainable()], DType::F32)?;
    let vars = net.vars().iter().map(|(_, v)| v.clone()).collect();
    let params = ParamsAdamW { lr: config.learning_rate, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 };
    let mut opt = AdamW::new(vars, params).map_err(backend)?;
    let mut curve = LossCurve::default();
    let mut nulls = 0;
    let mut out = weights.clone();
    for it in 0..config.iterations {
        let mut rng = NoiseRng::derived(config.seed, &[it as u64]);
        let windows = (0..config.batch_size)
            .map(|_| data.window(rng.below(data.len() as u64) as usize))
            .collect::<Result<Vec<_>>>()?;
        for w in &windows {
            check_window(w, mc, frames)?;
        }
        let batch = assemble(&windows, mc, config.stage, schedule, &mut rng, config.cfg_dropout, &mut nulls)?;
        let mut step = || -> CResult<f64> {
            let y = net.forward(&batch.x, &batch.ts, &batch.styles, batch.control.as_ref(), 1.0, frames > 1)?;
            let loss = noise_loss(&y, &batch.eps)?;
            opt.backward_step(&loss)?;
            loss.to_scalar::<f32>().map(|l| l as f64)
        };
        let loss = step().map_err(backend)?;
        if !loss.is_finite() {
            return Err(Error::Backend(format!("non-finite loss at iteration {it}")));
        }
        curve.losses.push(loss);
        let done = it + 1;
        if let Some(dir) = &config.checkpoint_dir {
            if config.checkpoint_every > 0 && done % config.checkpoint_every == 0 && done < config.iterations {
                net.write_back(&mut out)?;
                write_checkpoint(dir, &format!("{}-{done}", config.stage), &out, config, done, loss)?;
            }
        }
    }
    net.write_back(&mut out)?;
    Ok(TrainOutcome { weights: out, curve, null_style_count: nulls })
}

/// Sidecar text of a checkpoint.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointInfo {
    pub stage: TrainStage,
    pub iteration: usize,
    pub loss: f64,
    pub seed: u64,
}

impl CheckpointInfo {
    pub fn to_text(&self) -> String {
        format!("stage {}\niteration {}\nloss {}\nseed {}\n", self.stage, self.iteration, self.loss, self.seed)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut fields = std::collections::BTreeMap::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line.split_once(' ').ok_or_else(|| Error::format(format!("checkpoint: bad line '{line}'")))?;
            fields.insert(k.to_owned(), v.trim().to_owned());
        }
        let get = |k: &str| fields.get(k).ok_or_else(|| Error::format(format!("checkpoint: missing '{k}'")));
        let bad = |k: &str| Error::format(format!("checkpoint: bad '{k}'"));
        Ok(Self {
            stage: get("stage")?.parse().map_err(|_| bad("stage"))?,
            iteration: get("iteration")?.parse().map_err(|_| bad("iteration"))?,
            loss: get("loss")?.parse().map_err(|_| bad("loss"))?,
            seed: get("seed")?.parse().map_err(|_| bad("seed"))?,
        })
    }
}

pub fn write_checkpoint(
    dir: &Path,
    name: &str,
    weights: &ModelWeights,
    config: &TrainConfig,
    iteration: usize,
    loss: f64,
) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let path = dir.join(format!("{name}.sswt"));
    weights.save(&path)?;
    let info = CheckpointInfo { stage: config.stage, iteration, loss, seed: config.seed };
    std::fs::write(path.with_extension("txt"), info.to_text())?;
    Ok(path)
}

pub fn read_checkpoint(path: &Path) -> Result<(ModelWeights, CheckpointInfo)> {
    let weights = ModelWeights::load(path)?;
    let info = CheckpointInfo::parse(&std::fs::read_to_string(path.with_extension("txt"))?)?;
    Ok((weights, info))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StagePlan {
    pub iterations: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
}

impl StagePlan {
    pub fn new(iterations: usize) -> Self {
        Self { iterations, learning_rate: 1e-4, batch_size: 32 }
    }
}

#[derive(Clone, Debug)]
pub struct CurriculumConfig {
    pub backbone: BackboneConfig,
    pub seed: u64,
    pub s0: StagePlan,
    pub s1: StagePlan,
    pub s2: StagePlan,
    /// Also train the RGB-control variant into its own weights file.
    pub rgb_control: Option<StagePlan>,
    pub cfg_dropout: f64,
    pub out_dir: PathBuf,
    /// Continue after this stage's checkpoint instead of starting from S0.
    pub resume_from: Option<PathBuf>,
}

#[derive(Clone, Debug)]
pub struct StageRecord {
    pub stage: TrainStage,
    pub iterations: usize,
    pub seed: u64,
    pub final_loss: Option<f64>,
    pub file: String,
}

#[derive(Clone, Debug)]
pub struct CurriculumOutcome {
    pub weights: ModelWeights,
    pub rgb_control: Option<ModelWeights>,
    pub stages: Vec<StageRecord>,
}

impl CurriculumOutcome {
    pub fn manifest_text(&self) -> String {
        let mut out = String::new();
        for s in &self.stages {
            let loss = s.final_loss.map_or("resumed".to_owned(), |l| l.to_string());
            let _ = writeln!(
                out,
                "stage {} iterations {} seed {} final_loss {} file {}",
                s.stage, s.iterations, s.seed, loss, s.file
            );
        }
        out
    }
}

fn stage_seed(seed: u64, stage: TrainStage) -> u64 {
    let tag = match stage {
        TrainStage::S0 => 0,
        TrainStage::S1 => 1,
        TrainStage::S2 => 2,
        TrainStage::S2RgbControl => 3,
    };
    derive_seed(seed, &[0x5747, tag])
}

/// Runs S0 → S1 → S2 (and optionally S2-rgbctl), checkpointing after every
/// stage into `out_dir` and writing `curriculum.txt` plus one loss CSV per
/// stage. `singles` feeds S0 (1-frame windows), `windows` the later stages.
pub fn run_curriculum(
    config: &CurriculumConfig,
    singles: &dyn WindowSource,
    windows: &dyn WindowSource,
    schedule: &NoiseSchedule,
) -> Result<CurriculumOutcome> {
    config.backbone.validate()?;
    std::fs::create_dir_all(&config.out_dir)?;
    let order = [(TrainStage::S0, config.s0), (TrainStage::S1, config.s1), (TrainStage::S2, config.s2)];
    let (mut weights, mut start) = (init_backbone(&config.backbone, derive_seed(config.seed, &[0x1417]))?, 0);
    let mut stages = Vec::new();
    if let Some(path) = &config.resume_from {
        let (w, info) = read_checkpoint(path)?;
        if w.config != config.backbone {
            return Err(Error::config("resume checkpoint was trained with a different architecture"));
        }
        start = order
            .iter()
            .position(|(s, _)| *s == info.stage)
            .ok_or_else(|| Error::config(format!("cannot resume after stage {}", info.stage)))?
            + 1;
        for (stage, plan) in &order[..start] {
            stages.push(StageRecord {
                stage: *stage,
                iterations: plan.iterations,
                seed: stage_seed(config.seed, *stage),
                final_loss: None,
                file: format!("{}.sswt", stage.to_string().to_lowercase()),
            });
        }
        weights = w;
    }
    let mut after_s1 = (start == 2).then(|| weights.clone());
    let train = |w: &ModelWeights, stage: TrainStage, plan: StagePlan, data: &dyn WindowSource| {
        let tc = TrainConfig {
            stage,
            learning_rate: plan.learning_rate,
            batch_size: plan.batch_size,
            iterations: plan.iterations,
            cfg_dropout: config.cfg_dropout,
            seed: stage_seed(config.seed, stage),
            checkpoint_every: 0,
            checkpoint_dir: None,
        };
        let out = train_stage(w, data, &tc, schedule)?;
        let name = stage.to_string().to_lowercase();
        let last = out.curve.losses.last().copied().unwrap_or(f64::NAN);
        write_checkpoint(&config.out_dir, &name, &out.weights, &tc, plan.iterations, last)?;
        std::fs::write(config.out_dir.join(format!("{name}-loss.csv")), out.curve.to_csv())?;
        let record = StageRecord {
            stage,
            iterations: plan.iterations,
            seed: tc.seed,
            final_loss: Some(last),
            file: format!("{name}.sswt"),
        };
        Ok::<_, Error>((out.weights, record))
    };
    for (i, (stage, plan)) in order.iter().enumerate().skip(start) {
        if *stage == TrainStage::S2 {
            weights.reset_control_from_encoder()?;
        }
        let data = if i == 0 { singles } else { windows };
        let (w, rec) = train(&weights, *stage, *plan, data)?;
        weights = w;
        stages.push(rec);
        if *stage == TrainStage::S1 {
            after_s1 = Some(weights.clone());
        }
    }
    let rgb = match config.rgb_control {
        Some(plan) => {
            let base = match after_s1 {
                Some(w) => w,
                None => ModelWeights::load(config.out_dir.join("s1.sswt"))?,
            };
            let rgb_config = BackboneConfig { rgb_control: true, ..config.backbone.clone() };
            let mut w = init_backbone(&rgb_config, derive_seed(config.seed, &[0x1417]))?;
            w.adopt_matching(&base);
            w.reset_control_from_encoder()?;
            let (w, rec) = train(&w, TrainStage::S2RgbControl, plan, windows)?;
            stages.push(rec);
            Some(w)
        }
        None => None,
    };
    let outcome = CurriculumOutcome { weights, rgb_control: rgb, stages };
    std::fs::write(config.out_dir.join("curriculum.txt"), outcome.manifest_text())?;
    Ok(outcome)
}

/// Host-side MSE of a prediction, for callers outside the backend.
pub fn window_loss(pred: &[ImageTensor], eps: &[ImageTensor]) -> Result<f64> {
    if pred.len() != eps.len() || pred.is_empty() {
        return Err(Error::contract("window_loss: length mismatch"));
    }
    let mut total = 0.0;
    for (p, e) in pred.iter().zip(eps) {
        total += streetscape_core::diffusion::ddpm_loss(p, e)?;
    }
    Ok(total / pred.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_predictor_has_zero_loss() {
        let eps = Tensor::randn(0f32, 1.0, (2, 2, 3, 4, 4), &Device::Cpu).unwrap();
        let l = noise_loss(&eps, &eps).unwrap().to_scalar::<f32>().unwrap();
        assert_eq!(l, 0.0);
    }

    #[test]
    fn loss_curve_points() {
        let curve = LossCurve { losses: (0..250).map(|i| i as f64).collect() };
        let pts = curve.points();
        assert_eq!(pts.len(), 3);
        assert_eq!(pts[0], (100, 49.5));
        assert_eq!(pts[2].0, 250);
        assert!(curve.to_csv().starts_with("iteration,loss\n100,49.5\n"));
        assert_eq!(curve.mean_last(50), 224.5);
    }

    #[test]
    fn checkpoint_info_round_trip() {
        let info = CheckpointInfo { stage: TrainStage::S2RgbControl, iteration: 7, loss: 0.25, seed: 9 };
        assert_eq!(CheckpointInfo::parse(&info.to_text()).unwrap(), info);
        assert!(CheckpointInfo::parse("stage S9\n").is_err());
    }

    #[test]
    fn config_validation() {
        let mut c = TrainConfig::new(TrainStage::S0, 1, 0);
        assert!(c.validate().is_ok());
        c.cfg_dropout = 1.0;
        assert!(c.validate().is_err());
        c.cfg_dropout = 0.1;
        c.learning_rate = 0.0;
        assert!(c.validate().is_err());
    }
}
