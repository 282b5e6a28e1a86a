//! Parameter layout, initialization and the `SSWT` weights file.
//!
//! Every tensor has a dotted name whose first component is its partition:
//! `spatial.` (stage S0), `motion.` (S1) or `control.` (S2). The layout is a
//! pure function of the config, so a weights file only needs the config and
//! the tensors in layout order.

use std::collections::BTreeMap;
use std::path::Path;

use sha2::{Digest, Sha256};
use streetscape_core::tnsr::ByteReader;
use streetscape_core::{derive_seed, Error, NoiseRng, Result};

use crate::config::{BackboneConfig, Stage};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    /// Normal with standard deviation `1/sqrt(fan_in)`.
    Fan(usize),
    Normal(f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn stage(&self) -> Stage {
        Stage::of_name(&self.name).expect("every parameter carries a partition prefix")
    }
}

struct Layout<'a> {
    c: &'a BackboneConfig,
    specs: Vec<ParamSpec>,
}

impl Layout<'_> {
    fn push(&mut self, name: String, shape: Vec<usize>, init: Init) {
        self.specs.push(ParamSpec { name, shape, init });
    }

    fn conv(&mut self, p: &str, cin: usize, cout: usize, k: usize, zero: bool) {
        let init = if zero { Init::Zeros } else { Init::Fan(cin * k * k) };
        self.push(format!("{p}.weight"), vec![cout, cin, k, k], init);
        self.push(format!("{p}.bias"), vec![cout], Init::Zeros);
    }

    fn linear(&mut self, p: &str, cin: usize, cout: usize, zero: bool) {
        let init = if zero { Init::Zeros } else { Init::Fan(cin) };
        self.push(format!("{p}.weight"), vec![cout, cin], init);
        self.push(format!("{p}.bias"), vec![cout], Init::Zeros);
    }

    fn norm(&mut self, p: &str, ch: usize) {
        self.push(format!("{p}.weight"), vec![ch], Init::Ones);
        self.push(format!("{p}.bias"), vec![ch], Init::Zeros);
    }

    fn res(&mut self, p: &str, cin: usize, cout: usize) {
        let e = self.c.timestep_embed_dim;
        self.norm(&format!("{p}.norm1"), cin);
        self.conv(&format!("{p}.conv1"), cin, cout, 3, false);
        self.linear(&format!("{p}.temb"), e, cout, false);
        self.norm(&format!("{p}.norm2"), cout);
        self.conv(&format!("{p}.conv2"), cout, cout, 3, false);
        if cin != cout {
            self.conv(&format!("{p}.skip"), cin, cout, 1, false);
        }
    }

    fn motion(&mut self, p: &str, ch: usize) {
        self.norm(&format!("{p}.norm"), ch);
        self.push(format!("{p}.pos"), vec![self.c.frames, ch], Init::Normal(0.02));
        for q in ["q", "k", "v"] {
            self.linear(&format!("{p}.{q}"), ch, ch, false);
        }
        // Zero output projection: the residual path is the identity at init.
        self.linear(&format!("{p}.out"), ch, ch, true);
    }

    /// Encoder levels + mid block for one branch (`spatial` or `control`),
    /// with motion modules under `motion_prefix`.
    fn encoder(&mut self, branch: &str, motion_prefix: &str) {
        let c = self.c;
        let last = c.levels() - 1;
        for l in 0..c.levels() {
            let cin = if l == 0 { c.channels(0) } else { c.channels(l - 1) };
            self.res(&format!("{branch}.enc.{l}.res"), cin, c.channels(l));
            self.motion(&format!("{motion_prefix}.enc.{l}"), c.channels(l));
            if l < last {
                self.conv(&format!("{branch}.enc.{l}.down"), c.channels(l), c.channels(l), 3, false);
            }
        }
        self.res(&format!("{branch}.mid.res"), c.channels(last), c.channels(last));
        self.motion(&format!("{motion_prefix}.mid"), c.channels(last));
    }
}

/// The full ordered parameter list for `config`.
pub fn param_specs(config: &BackboneConfig) -> Vec<ParamSpec> {
    let c = config;
    let (c0, e) = (c.base_channels, c.timestep_embed_dim);
    let last = c.levels() - 1;
    let mut l = Layout { c, specs: Vec::new() };

    l.linear("spatial.time.lin1", c0, e, false);
    l.linear("spatial.time.lin2", e, e, false);
    l.push("spatial.style.weight".into(), vec![c.num_styles + 1, e], Init::Normal(1.0));
    l.conv("spatial.conv_in", c.image_channels, c0, 3, false);
    l.encoder("spatial", "motion");
    for lvl in (0..c.levels()).rev() {
        let below = if lvl == last { c.channels(last) } else { c.channels(lvl + 1) };
        l.res(&format!("spatial.dec.{lvl}.res"), below + c.channels(lvl), c.channels(lvl));
        l.motion(&format!("motion.dec.{lvl}"), c.channels(lvl));
        if lvl > 0 {
            l.conv(&format!("spatial.dec.{lvl}.up"), c.channels(lvl), c.channels(lvl), 3, false);
        }
    }
    l.norm("spatial.out.norm", c0);
    l.conv("spatial.out.conv", c0, c.image_channels, 3, false);

    l.conv("control.conv_in", c.image_channels + c.control_channels(), c0, 3, false);
    l.encoder("control", "control.motion");
    for lvl in 0..c.levels() {
        l.conv(&format!("control.proj.{lvl}"), c.channels(lvl), c.channels(lvl), 1, true);
    }
    l.conv("control.proj.mid", c.channels(last), c.channels(last), 1, true);
    l.specs
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

/// Host-side weights: config plus every named tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelWeights {
    pub config: BackboneConfig,
    pub tensors: BTreeMap<String, Param>,
}

fn name_tag(name: &str) -> u64 {
    // FNV-1a over the name; only used to key per-tensor RNG streams.
    name.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3))
}

/// Deterministic weights for `(config, seed)`; zero-initialized tensors are
/// the motion output projections and every control projection.
pub fn init_backbone(config: &BackboneConfig, seed: u64) -> Result<ModelWeights> {
    config.validate()?;
    let mut tensors = BTreeMap::new();
    for spec in param_specs(config) {
        let n = spec.numel();
        let data = match spec.init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Fan(fan) => normal(seed, &spec.name, n, 1.0 / (fan as f64).sqrt()),
            Init::Normal(std) => normal(seed, &spec.name, n, std),
        };
        tensors.insert(spec.name, Param { shape: spec.shape, data });
    }
    Ok(ModelWeights { config: config.clone(), tensors })
}

fn normal(seed: u64, name: &str, n: usize, std: f64) -> Vec<f32> {
    let mut rng = NoiseRng::new(derive_seed(seed, &[name_tag(name)]));
    (0..n).map(|_| (rng.normal() * std) as f32).collect()
}

const MAGIC: &[u8; 4] = b"SSWT";
pub const SSWT_VERSION: u16 = 1;
const META_PREFIX: &str = "meta:";

impl ModelWeights {
    pub fn get(&self, name: &str) -> Option<&Param> {
        self.tensors.get(name)
    }

    pub fn param_count(&self) -> usize {
        self.tensors.values().map(|p| p.data.len()).sum()
    }

    pub fn stage_param_count(&self, stage: Stage) -> usize {
        self.tensors.iter().filter(|(n, _)| Stage::of_name(n) == Some(stage)).map(|(_, p)| p.data.len()).sum()
    }

    /// SHA-256 over the names and raw bytes of one partition.
    pub fn partition_hash(&self, stage: Stage) -> String {
        let mut h = Sha256::new();
        for (name, p) in self.tensors.iter().filter(|(n, _)| Stage::of_name(n) == Some(stage)) {
            h.update(name.as_bytes());
            for v in &p.data {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Names of tensors that must be zero before control training.
    pub fn control_projection_names(&self) -> Vec<String> {
        self.tensors.keys().filter(|n| n.starts_with("control.proj.")).cloned().collect()
    }

    /// Re-initializes the control branch from the trained spatial encoder and
    /// motion modules: encoder and mid blocks are copied, the latent input
    /// channels of the control stem copy the spatial stem, the condition
    /// channels and every projection are zeroed.
    pub fn reset_control_from_encoder(&mut self) -> Result<()> {
        let names: Vec<String> = self.tensors.keys().filter(|n| n.starts_with("control.")).cloned().collect();
        let cin = self.config.image_channels;
        for name in names {
            let src = if let Some(rest) = name.strip_prefix("control.motion.") {
                Some(format!("motion.{rest}"))
            } else if name.starts_with("control.enc.") || name.starts_with("control.mid.") {
                Some(name.replacen("control.", "spatial.", 1))
            } else {
                None
            };
            if let Some(src) = src {
                let data = self
                    .tensors
                    .get(&src)
                    .ok_or_else(|| Error::contract(format!("missing source tensor {src}")))?
                    .data
                    .clone();
                self.tensors.get_mut(&name).unwrap().data = data;
            } else if name.starts_with("control.proj.") {
                self.tensors.get_mut(&name).unwrap().data.fill(0.0);
            } else if name == "control.conv_in.weight" {
                let spatial = self.tensors["spatial.conv_in.weight"].data.clone();
                let p = self.tensors.get_mut(&name).unwrap();
                let (cout, ctrl_in, kk) = (p.shape[0], p.shape[1], p.shape[2] * p.shape[3]);
                for o in 0..cout {
                    for i in 0..ctrl_in {
                        for k in 0..kk {
                            p.data[(o * ctrl_in + i) * kk + k] =
                                if i < cin { spatial[(o * cin + i) * kk + k] } else { 0.0 };
                        }
                    }
                }
            } else if name == "control.conv_in.bias" {
                let b = self.tensors["spatial.conv_in.bias"].data.clone();
                self.tensors.get_mut(&name).unwrap().data = b;
            }
        }
        Ok(())
    }

    /// Carries every tensor that exists with the same shape in `other`.
    /// Used to move S0/S1 weights into a differently shaped control variant.
    pub fn adopt_matching(&mut self, other: &ModelWeights) {
        for (name, p) in self.tensors.iter_mut() {
            if let Some(q) = other.tensors.get(name) {
                if q.shape == p.shape {
                    p.data.clone_from(&q.data);
                }
            }
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 4 * self.param_count());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&SSWT_VERSION.to_le_bytes());
        let specs = param_specs(&self.config);
        out.extend_from_slice(&(specs.len() as u32 + 1).to_le_bytes());
        let mut entry = |name: &str, dims: &[usize]| {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(dims.len() as u8);
            for &d in dims {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
        };
        entry(&format!("{META_PREFIX}{}", self.config.to_meta()), &[0]);
        for s in &specs {
            entry(&s.name, &self.tensors[&s.name].shape);
        }
        for s in &specs {
            for v in &self.tensors[&s.name].data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        if r.take(4)? != MAGIC {
            return Err(Error::format("SSWT: bad magic"));
        }
        let version = r.u16()?;
        if version != SSWT_VERSION {
            return Err(Error::format(format!("SSWT: unsupported version {version}")));
        }
        let count = r.u32()? as usize;
        let mut table: Vec<(String, Vec<usize>)> = Vec::new();
        for _ in 0..count {
            let len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::format("SSWT: tensor name is not UTF-8"))?
                .to_owned();
            let rank = r.u8()? as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(r.u32()? as usize);
            }
            table.push((name, dims));
        }
        let (meta, dims) = table.first().ok_or_else(|| Error::format("SSWT: empty name table"))?;
        let meta = meta
            .strip_prefix(META_PREFIX)
            .ok_or_else(|| Error::format("SSWT: first entry is not the model meta record"))?;
        if dims != &[0] {
            return Err(Error::format("SSWT: meta record must have dims [0]"));
        }
        let config: BackboneConfig = meta.parse()?;
        let specs = param_specs(&config);
        let expected: BTreeMap<&str, &ParamSpec> = specs.iter().map(|s| (s.name.as_str(), s)).collect();
        for (name, dims) in &table[1..] {
            let spec = expected
                .get(name.as_str())
                .ok_or_else(|| Error::format(format!("SSWT: unknown tensor name '{name}'")))?;
            if &spec.shape != dims {
                return Err(Error::format(format!(
                    "SSWT: tensor '{name}' has shape {dims:?}, expected {:?}",
                    spec.shape
                )));
            }
        }
        if table.len() - 1 != specs.len() {
            let present: std::collections::BTreeSet<&str> = table[1..].iter().map(|(n, _)| n.as_str()).collect();
            let missing = specs.iter().find(|s| !present.contains(s.name.as_str()));
            return Err(Error::format(match missing {
                Some(s) => format!("SSWT: missing tensor '{}'", s.name),
                None => "SSWT: duplicate tensor names".to_owned(),
            }));
        }
        let mut tensors = BTreeMap::new();
        for (name, dims) in &table[1..] {
            let n: usize = dims.iter().product();
            let data = r.f32s(n)?;
            if tensors.insert(name.clone(), Param { shape: dims.clone(), data }).is_some() {
                return Err(Error::format(format!("SSWT: duplicate tensor '{name}'")));
            }
        }
        if r.remaining() != 0 {
            return Err(Error::format(format!("SSWT: {} trailing bytes", r.remaining())));
        }
        Ok(ModelWeights { config, tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.encode())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::decode(&std::fs::read(path)?)
    }
}
