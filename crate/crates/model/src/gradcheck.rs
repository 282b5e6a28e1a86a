//! Finite-difference check of the analytic parameter gradients of the
//! noise-prediction loss.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor};
use streetscape_core::{derive_seed, Error, NoiseRng, Result};

use crate::config::Stage;
use crate::net::{backend, Backbone, CResult};
use crate::weights::ModelWeights;

pub const MAX_PROBE_PARAMS: usize = 100_000;
/// Central-difference step relative to the parameter magnitude.
pub const FD_RELATIVE_STEP: f64 = 1e-3;

/// A fixed random training example.
#[derive(Clone, Debug)]
pub struct ProbeBatch {
    /// `[1, K, C, H, W]` values.
    pub x: Vec<f64>,
    pub eps: Vec<f64>,
    pub control: Option<Vec<f64>>,
    pub t: usize,
    pub style: usize,
}

impl ProbeBatch {
    pub fn random(weights: &ModelWeights, seed: u64, with_control: bool) -> Self {
        let c = &weights.config;
        let n = c.frames * c.image_channels * c.image_size * c.image_size;
        let nc = c.frames * c.control_channels() * c.image_size * c.image_size;
        let mut rng = NoiseRng::new(seed);
        let x = (0..n).map(|_| rng.normal()).collect();
        let eps = (0..n).map(|_| rng.normal()).collect();
        let control = with_control.then(|| (0..nc).map(|_| rng.uniform()).collect());
        let t = 1 + rng.below(1000) as usize;
        let style = rng.below(c.num_styles as u64 + 1) as usize;
        Self { x, eps, control, t, style }
    }

    fn tensors(&self, weights: &ModelWeights, dtype: DType) -> CResult<(Tensor, Tensor, Option<Tensor>)> {
        let c = &weights.config;
        let s = c.image_size;
        let dev = Device::Cpu;
        let shape = (1, c.frames, c.image_channels, s, s);
        let x = Tensor::from_vec(self.x.clone(), shape, &dev)?.to_dtype(dtype)?;
        let eps = Tensor::from_vec(self.eps.clone(), shape, &dev)?.to_dtype(dtype)?;
        let ctrl = match &self.control {
            Some(v) => {
                Some(Tensor::from_vec(v.clone(), (1, c.frames, c.control_channels(), s, s), &dev)?.to_dtype(dtype)?)
            }
            None => None,
        };
        Ok((x, eps, ctrl))
    }
}

fn loss_tensor(net: &Backbone, weights: &ModelWeights, batch: &ProbeBatch) -> CResult<Tensor> {
    let (x, eps, ctrl) = batch.tensors(weights, net.dtype())?;
    let y = net.forward(&x, &[batch.t], &[batch.style], ctrl.as_ref(), 1.0, true)?;
    (y - eps)?.sqr()?.mean_all()
}

/// Loss evaluated in double precision.
pub fn probe_loss(weights: &ModelWeights, batch: &ProbeBatch) -> Result<f64> {
    let net = Backbone::new(weights, &[], DType::F64)?;
    loss_tensor(&net, weights, batch).and_then(|l| l.to_scalar::<f64>()).map_err(backend)
}

/// Analytic gradients of the probe loss for the `trainable` stages, computed
/// in `dtype`. Parameters outside those stages, and parameters that do not
/// influence the loss, get an all-zero gradient.
pub fn analytic_gradients(
    weights: &ModelWeights,
    batch: &ProbeBatch,
    trainable: &[Stage],
    dtype: DType,
) -> Result<BTreeMap<String, Vec<f64>>> {
    let net = Backbone::new(weights, trainable, dtype)?;
    let grads = loss_tensor(&net, weights, batch).and_then(|l| l.backward()).map_err(backend)?;
    let mut out = BTreeMap::new();
    for (name, p) in &weights.tensors {
        let var = net.vars().iter().find(|(n, _)| n == name).map(|(_, v)| v);
        let g = match var.and_then(|v| grads.get(v.as_tensor())) {
            Some(g) => g
                .to_dtype(DType::F64)
                .and_then(|g| g.flatten_all())
                .and_then(|g| g.to_vec1::<f64>())
                .map_err(backend)?,
            None => vec![0.0; p.data.len()],
        };
        out.insert(name.clone(), g);
    }
    Ok(out)
}

/// Central difference for one scalar parameter, in double precision.
pub fn finite_difference(weights: &ModelWeights, batch: &ProbeBatch, name: &str, index: usize) -> Result<f64> {
    let theta = weights.tensors[name].data[index] as f64;
    let h = FD_RELATIVE_STEP * theta.abs().max(1e-2);
    let mut w = weights.clone();
    // f32 storage: evaluate at the exactly representable perturbed points.
    let plus = (theta + h) as f32;
    let minus = (theta - h) as f32;
    w.tensors.get_mut(name).unwrap().data[index] = plus;
    let lp = probe_loss(&w, batch)?;
    w.tensors.get_mut(name).unwrap().data[index] = minus;
    let lm = probe_loss(&w, batch)?;
    Ok((lp - lm) / (plus as f64 - minus as f64))
}

/// Relative disagreement with a floor that keeps vanishing gradients from
/// dividing by zero.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub worst: (String, usize),
    pub checked: usize,
    pub floor: f64,
}

/// Compares analytic gradients (in `dtype`) with central differences on
/// `samples` randomly chosen parameters. Zero-initialized tensors are first
/// replaced by small random values so every path carries gradient.
pub fn gradient_check(weights: &ModelWeights, seed: u64, samples: usize, dtype: DType) -> Result<GradCheckReport> {
    if weights.param_count() > MAX_PROBE_PARAMS {
        return Err(Error::config(format!(
            "gradient check probe has {} parameters (max {MAX_PROBE_PARAMS})",
            weights.param_count()
        )));
    }
    let mut w = weights.clone();
    let mut rng = NoiseRng::new(derive_seed(seed, &[1]));
    for p in w.tensors.values_mut() {
        if p.data.iter().all(|&v| v == 0.0) {
            p.data.iter_mut().for_each(|v| *v = (0.1 * rng.normal()) as f32);
        }
    }
    let batch = ProbeBatch::random(&w, derive_seed(seed, &[2]), true);
    let grads = analytic_gradients(&w, &batch, &[Stage::S0, Stage::S1, Stage::S2], dtype)?;

    let flat: Vec<(&String, usize)> = w.tensors.iter().map(|(n, p)| (n, p.data.len())).collect();
    let total: usize = flat.iter().map(|(_, n)| n).sum();
    let scale = grads.values().flatten().fold(0.0f64, |m, g| m.max(g.abs()));
    let floor = 1e-4 * scale;
    let mut report = GradCheckReport { max_relative_error: 0.0, worst: (String::new(), 0), checked: 0, floor };
    for _ in 0..samples {
        let mut k = rng.below(total as u64) as usize;
        let (name, index) = flat
            .iter()
            .find_map(|(n, len)| {
                if k < *len {
                    Some(((*n).clone(), k))
                } else {
                    k -= len;
                    None
                }
            })
            .unwrap();
        let numeric = finite_difference(&w, &batch, &name, index)?;
        let err = relative_error(grads[&name][index], numeric, floor);
        if err > report.max_relative_error {
            report.max_relative_error = err;
            report.worst = (name, index);
        }
        report.checked += 1;
    }
    Ok(report)
}
