//! The denoiser: spatial UNet + temporal attention ("motion") modules + a
//! zero-projected control branch, evaluated with candle tensors.
//!
//! Layout per frame, for levels `0..L` with widths `c_l`:
//!
//! ```text
//! conv_in ─ [res_l ─ motion ─ (skip_l) ─ down]… ─ mid res ─ motion
//!        ─ [concat skip_l ─ res ─ motion ─ up]… ─ GN ─ SiLU ─ conv_out
//! ```
//!
//! The control branch repeats the encoder and mid block on
//! `concat(noisy frame, condition)` and adds `scale · proj_l(ctrl_skip_l)` to
//! every skip and `scale · proj_mid(ctrl_mid)` to the mid output.

use std::collections::HashMap;

use candle_core::{DType, Device, Tensor, Var, D};
use streetscape_core::{Error, ImageTensor, Result, StyleToken};

use crate::config::{BackboneConfig, Stage};
use crate::weights::ModelWeights;

pub type CResult<T> = candle_core::Result<T>;

/// Maps a tensor-engine failure into the workspace error type.
pub fn backend(e: candle_core::Error) -> Error {
    Error::Backend(e.to_string())
}

const GN_EPS: f64 = 1e-5;

/// Runtime network bound to one set of weights. Parameters of the
/// `trainable` stages are candle variables; everything else is constant.
pub struct Backbone {
    config: BackboneConfig,
    dtype: DType,
    params: HashMap<String, Tensor>,
    vars: Vec<(String, Var)>,
}

/// Sinusoidal embedding of integer timesteps, `[n, dim]`.
pub fn timestep_embedding(ts: &[usize], dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = Vec::with_capacity(ts.len() * dim);
    for &t in ts {
        let t = t as f64;
        let freqs = (0..half).map(|i| (-(10000f64.ln()) * i as f64 / half as f64).exp());
        let (s, c): (Vec<f64>, Vec<f64>) = freqs.map(|f| ((t * f).sin(), (t * f).cos())).unzip();
        out.extend(s);
        out.extend(c);
    }
    out
}

impl Backbone {
    pub fn new(weights: &ModelWeights, trainable: &[Stage], dtype: DType) -> Result<Self> {
        Self::build(weights, trainable, dtype).map_err(backend)
    }

    fn build(weights: &ModelWeights, trainable: &[Stage], dtype: DType) -> CResult<Self> {
        let mut params = HashMap::new();
        let mut vars = Vec::new();
        for (name, p) in &weights.tensors {
            let t = Tensor::from_vec(p.data.clone(), p.shape.as_slice(), &Device::Cpu)?.to_dtype(dtype)?;
            let stage = Stage::of_name(name);
            if stage.is_some_and(|s| trainable.contains(&s)) {
                let v = Var::from_tensor(&t)?;
                params.insert(name.clone(), v.as_tensor().clone());
                vars.push((name.clone(), v));
            } else {
                params.insert(name.clone(), t);
            }
        }
        Ok(Self { config: weights.config.clone(), dtype, params, vars })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn vars(&self) -> &[(String, Var)] {
        &self.vars
    }

    pub fn param(&self, name: &str) -> &Tensor {
        self.params.get(name).unwrap_or_else(|| panic!("no parameter {name}"))
    }

    /// Copies trainable variables back into host weights.
    pub fn write_back(&self, weights: &mut ModelWeights) -> Result<()> {
        for (name, v) in &self.vars {
            let data = v
                .as_tensor()
                .to_dtype(DType::F32)
                .and_then(|t| t.flatten_all())
                .and_then(|t| t.to_vec1::<f32>())
                .map_err(backend)?;
            weights.tensors.get_mut(name).expect("variable names come from the weights").data = data;
        }
        Ok(())
    }

    fn conv(&self, x: &Tensor, p: &str, padding: usize, stride: usize) -> CResult<Tensor> {
        let w = self.param(&format!("{p}.weight"));
        let b = self.param(&format!("{p}.bias"));
        let y = x.conv2d(w, padding, stride, 1, 1)?;
        y.broadcast_add(&b.reshape((1, b.dim(0)?, 1, 1))?)
    }

    fn linear(&self, x: &Tensor, p: &str) -> CResult<Tensor> {
        let w = self.param(&format!("{p}.weight"));
        let b = self.param(&format!("{p}.bias"));
        x.broadcast_matmul(&w.t()?)?.broadcast_add(b)
    }

    fn group_norm(&self, x: &Tensor, p: &str) -> CResult<Tensor> {
        let (n, c, h, w) = x.dims4()?;
        let g = self.config.groups;
        let xg = x.reshape((n, g, (c / g) * h * w))?;
        let mean = xg.mean_keepdim(2)?;
        let xc = xg.broadcast_sub(&mean)?;
        let var = xc.sqr()?.mean_keepdim(2)?;
        let xn = xc.broadcast_div(&(var + GN_EPS)?.sqrt()?)?.reshape((n, c, h, w))?;
        let gamma = self.param(&format!("{p}.weight")).reshape((1, c, 1, 1))?;
        let beta = self.param(&format!("{p}.bias")).reshape((1, c, 1, 1))?;
        xn.broadcast_mul(&gamma)?.broadcast_add(&beta)
    }

    fn res(&self, x: &Tensor, temb: &Tensor, p: &str) -> CResult<Tensor> {
        let h = self.conv(&self.group_norm(x, &format!("{p}.norm1"))?.silu()?, &format!("{p}.conv1"), 1, 1)?;
        let (n, c, _, _) = h.dims4()?;
        let t = self.linear(&temb.silu()?, &format!("{p}.temb"))?.reshape((n, c, 1, 1))?;
        let h = h.broadcast_add(&t)?;
        let h = self.conv(&self.group_norm(&h, &format!("{p}.norm2"))?.silu()?, &format!("{p}.conv2"), 1, 1)?;
        let skip = if self.params.contains_key(&format!("{p}.skip.weight")) {
            self.conv(x, &format!("{p}.skip"), 0, 1)?
        } else {
            x.clone()
        };
        h + skip
    }

    /// Temporal self-attention across the frame axis at every pixel.
    fn motion(&self, x: &Tensor, p: &str, frames: usize) -> CResult<Tensor> {
        let (n, c, h, w) = x.dims4()?;
        let b = n / frames;
        let hw = h * w;
        let y = self.group_norm(x, &format!("{p}.norm"))?.reshape((b, frames, c, hw))?;
        let pos = self.param(&format!("{p}.pos")).narrow(0, 0, frames)?.reshape((1, frames, c, 1))?;
        let tokens = y.broadcast_add(&pos)?.permute((0, 3, 1, 2))?.contiguous()?.reshape((b * hw, frames, c))?;
        let q = self.linear(&tokens, &format!("{p}.q"))?;
        let k = self.linear(&tokens, &format!("{p}.k"))?;
        let v = self.linear(&tokens, &format!("{p}.v"))?;
        let scores = (q.matmul(&k.t()?.contiguous()?)? / (c as f64).sqrt())?;
        let attn = candle_nn::ops::softmax(&scores, D::Minus1)?;
        let o = self.linear(&attn.matmul(&v)?, &format!("{p}.out"))?;
        let o = o.reshape((b, hw, frames, c))?.permute((0, 2, 3, 1))?.contiguous()?.reshape((n, c, h, w))?;
        x + o
    }

    fn upsample(&self, x: &Tensor, p: &str) -> CResult<Tensor> {
        let (n, c, h, w) = x.dims4()?;
        let up = x.reshape((n, c, h, 1, w, 1))?.broadcast_as((n, c, h, 2, w, 2))?.reshape((n, c, 2 * h, 2 * w))?;
        self.conv(&up, p, 1, 1)
    }

    /// Encoder levels and mid block; returns per-level skips and the mid output.
    fn encode(
        &self,
        mut h: Tensor,
        temb: &Tensor,
        branch: &str,
        motion_prefix: &str,
        frames: Option<usize>,
    ) -> CResult<(Vec<Tensor>, Tensor)> {
        let last = self.config.levels() - 1;
        let mut skips = Vec::with_capacity(last + 1);
        for l in 0..=last {
            h = self.res(&h, temb, &format!("{branch}.enc.{l}.res"))?;
            if let Some(f) = frames {
                h = self.motion(&h, &format!("{motion_prefix}.enc.{l}"), f)?;
            }
            skips.push(h.clone());
            if l < last {
                h = self.conv(&h, &format!("{branch}.enc.{l}.down"), 1, 2)?;
            }
        }
        h = self.res(&h, temb, &format!("{branch}.mid.res"))?;
        if let Some(f) = frames {
            h = self.motion(&h, &format!("{motion_prefix}.mid"), f)?;
        }
        Ok((skips, h))
    }

    /// Noise prediction for a batch of windows.
    ///
    /// * `x`: `[B, F, C, H, W]` noisy frames;
    /// * `ts`, `styles`: one timestep and style id per window;
    /// * `control`: optional `[B, F, Cc, H, W]` condition for the control branch;
    /// * `motion`: run the temporal modules (off for single-frame training).
    pub fn forward(
        &self,
        x: &Tensor,
        ts: &[usize],
        styles: &[usize],
        control: Option<&Tensor>,
        control_scale: f64,
        motion: bool,
    ) -> CResult<Tensor> {
        let (b, f, c, ih, iw) = x.dims5()?;
        let n = b * f;
        let dev = x.device();
        let x = x.to_dtype(self.dtype)?.reshape((n, c, ih, iw))?;
        let per_frame = |v: &[usize]| -> Vec<usize> { v.iter().flat_map(|&t| std::iter::repeat_n(t, f)).collect() };

        let c0 = self.config.base_channels;
        let emb = Tensor::from_vec(timestep_embedding(&per_frame(ts), c0), (n, c0), dev)?.to_dtype(self.dtype)?;
        let temb = self.linear(&self.linear(&emb, "spatial.time.lin1")?.silu()?, "spatial.time.lin2")?;
        let ids: Vec<u32> = per_frame(styles).into_iter().map(|s| s as u32).collect();
        let style = self.param("spatial.style.weight").index_select(&Tensor::new(ids.as_slice(), dev)?, 0)?;
        let temb = (temb + style)?;

        let frames = motion.then_some(f);
        let h0 = self.conv(&x, "spatial.conv_in", 1, 1)?;
        let (mut skips, mut h) = self.encode(h0, &temb, "spatial", "motion", frames)?;

        if let Some(ctrl) = control {
            let cc = ctrl.dim(2)?;
            let ctrl = ctrl.to_dtype(self.dtype)?.reshape((n, cc, ih, iw))?;
            let cin = Tensor::cat(&[&x, &ctrl], 1)?;
            let c0 = self.conv(&cin, "control.conv_in", 1, 1)?;
            let (cskips, cmid) = self.encode(c0, &temb, "control", "control.motion", frames)?;
            for (l, cs) in cskips.iter().enumerate() {
                let add = (self.conv(cs, &format!("control.proj.{l}"), 0, 1)? * control_scale)?;
                skips[l] = (&skips[l] + add)?;
            }
            h = (h + (self.conv(&cmid, "control.proj.mid", 0, 1)? * control_scale)?)?;
        }

        for l in (0..self.config.levels()).rev() {
            h = Tensor::cat(&[&h, &skips[l]], 1)?;
            h = self.res(&h, &temb, &format!("spatial.dec.{l}.res"))?;
            if let Some(f) = frames {
                h = self.motion(&h, &format!("motion.dec.{l}"), f)?;
            }
            if l > 0 {
                h = self.upsample(&h, &format!("spatial.dec.{l}.up"))?;
            }
        }
        let out = self.conv(&self.group_norm(&h, "spatial.out.norm")?.silu()?, "spatial.out.conv", 1, 1)?;
        out.reshape((b, f, c, ih, iw))
    }
}

/// Stacks windows of host frames into a `[B, F, C, H, W]` tensor.
pub fn stack_windows(windows: &[&[ImageTensor]], dtype: DType) -> Result<Tensor> {
    let first = windows.first().and_then(|w| w.first()).ok_or_else(|| Error::contract("empty batch"))?;
    let (c, h, w) = first.shape();
    let f = windows[0].len();
    let mut data = Vec::with_capacity(windows.len() * f * c * h * w);
    for win in windows {
        if win.len() != f {
            return Err(Error::contract("windows in a batch must have equal length"));
        }
        for frame in *win {
            frame.ensure_same_shape(first, "batch frame")?;
            data.extend_from_slice(frame.data());
        }
    }
    Tensor::from_vec(data, (windows.len(), f, c, h, w), &Device::Cpu).and_then(|t| t.to_dtype(dtype)).map_err(backend)
}

/// Splits a `[B, F, C, H, W]` tensor back into host frames.
pub fn unstack_windows(t: &Tensor) -> Result<Vec<Vec<ImageTensor>>> {
    let (b, f, c, h, w) = t.dims5().map_err(backend)?;
    let data =
        t.to_dtype(DType::F32).and_then(|t| t.flatten_all()).and_then(|t| t.to_vec1::<f32>()).map_err(backend)?;
    let plane = c * h * w;
    let mut out = Vec::with_capacity(b);
    for i in 0..b {
        let mut win = Vec::with_capacity(f);
        for j in 0..f {
            let s = (i * f + j) * plane;
            win.push(ImageTensor::new(c, h, w, data[s..s + plane].to_vec())?);
        }
        out.push(win);
    }
    Ok(out)
}

fn check_frames(config: &BackboneConfig, frames: &[ImageTensor], channels: usize, what: &str) -> Result<()> {
    if frames.len() != config.frames {
        return Err(Error::contract(format!(
            "{what}: window has {} frames, model expects K = {}",
            frames.len(),
            config.frames
        )));
    }
    let want = (channels, config.image_size, config.image_size);
    for (i, f) in frames.iter().enumerate() {
        if f.shape() != want {
            return Err(Error::contract(format!("{what}: frame {i} has shape {:?}, expected {want:?}", f.shape())));
        }
    }
    Ok(())
}

/// One noise prediction per frame of a `K`-frame window. `control` holds the
/// per-frame control-branch input (`config.control_channels()` channels);
/// when absent the control branch is skipped.
pub fn predict_noise(
    weights: &ModelWeights,
    window: &[ImageTensor],
    t: usize,
    control: Option<&[ImageTensor]>,
    style: StyleToken,
    control_scale: f64,
) -> Result<Vec<ImageTensor>> {
    let c = &weights.config;
    check_frames(c, window, c.image_channels, "predict_noise")?;
    if let Some(ctrl) = control {
        check_frames(c, ctrl, c.control_channels(), "predict_noise control")?;
    }
    if t == 0 {
        return Err(Error::contract("predict_noise: t must be ≥ 1"));
    }
    if style.id() > c.num_styles {
        return Err(Error::contract(format!("style {} outside [0, {}]", style.id(), c.num_styles)));
    }
    let net = Backbone::new(weights, &[], DType::F32)?;
    let x = stack_windows(&[window], DType::F32)?;
    let ctrl = control.map(|c| stack_windows(&[c], DType::F32)).transpose()?;
    let y = net.forward(&x, &[t], &[style.id()], ctrl.as_ref(), control_scale, true).map_err(backend)?;
    Ok(unstack_windows(&y)?.remove(0))
}
