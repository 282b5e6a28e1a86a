use std::fmt;
use std::str::FromStr;

use streetscape_core::{Error, Result};

/// Training stage a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Stage {
    /// Per-frame spatial UNet, time and style embeddings.
    S0,
    /// Temporal attention (motion) modules.
    S1,
    /// Control branch and its zero projections.
    S2,
}

impl Stage {
    pub fn prefix(self) -> &'static str {
        match self {
            Stage::S0 => "spatial.",
            Stage::S1 => "motion.",
            Stage::S2 => "control.",
        }
    }

    pub fn of_name(name: &str) -> Option<Stage> {
        [Stage::S0, Stage::S1, Stage::S2].into_iter().find(|s| name.starts_with(s.prefix()))
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::S0 => "S0",
            Stage::S1 => "S1",
            Stage::S2 => "S2",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneConfig {
    pub image_size: usize,
    pub image_channels: usize,
    pub base_channels: usize,
    pub channel_multipliers: Vec<usize>,
    /// Frames per window (K).
    pub frames: usize,
    pub num_styles: usize,
    pub gbuffer_channels: usize,
    pub timestep_embed_dim: usize,
    pub groups: usize,
    /// Control branch additionally takes a 3-channel condition RGB.
    pub rgb_control: bool,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            image_channels: 3,
            base_channels: 32,
            channel_multipliers: vec![1, 2, 4],
            frames: 2,
            num_styles: streetscape_core::style::DEFAULT_NUM_STYLES,
            gbuffer_channels: 6,
            timestep_embed_dim: 128,
            groups: 8,
            rgb_control: false,
        }
    }
}

impl BackboneConfig {
    /// A tiny model for gradient checks and fast tests.
    pub fn probe() -> Self {
        Self {
            image_size: 8,
            base_channels: 8,
            channel_multipliers: vec![1, 2],
            timestep_embed_dim: 16,
            groups: 4,
            ..Self::default()
        }
    }

    pub fn levels(&self) -> usize {
        self.channel_multipliers.len()
    }

    pub fn channels(&self, level: usize) -> usize {
        self.base_channels * self.channel_multipliers[level]
    }

    pub fn control_channels(&self) -> usize {
        self.gbuffer_channels + if self.rgb_control { 3 } else { 0 }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::config(m));
        if self.channel_multipliers.is_empty() || self.channel_multipliers.contains(&0) {
            return fail("channel multipliers must be non-empty and positive".into());
        }
        let limits = [
            ("image size", self.image_size, 4096),
            ("image channels", self.image_channels, 64),
            ("base channels", self.base_channels, 4096),
            ("levels", self.levels(), 8),
            ("styles", self.num_styles, 1 << 16),
            ("G-buffer channels", self.gbuffer_channels, 64),
            ("embedding width", self.timestep_embed_dim, 1 << 16),
            ("groups", self.groups, 4096),
        ];
        for (what, v, max) in limits {
            if v > max {
                return fail(format!("{what} {v} exceeds {max}"));
            }
        }
        if self.channel_multipliers.iter().any(|&m| m > 64) {
            return fail("channel multipliers above 64".into());
        }
        let div = 1usize << (self.levels() - 1);
        if self.image_size == 0 || !self.image_size.is_multiple_of(div) {
            return fail(format!("image size {} not divisible by 2^{} = {div}", self.image_size, self.levels() - 1));
        }
        if ![2, 4].contains(&self.frames) {
            return fail(format!("frames {} not in {{2, 4}}", self.frames));
        }
        if self.num_styles == 0 {
            return fail("num_styles must be at least 1".into());
        }
        if self.image_channels == 0 || self.gbuffer_channels == 0 {
            return fail("channel counts must be positive".into());
        }
        if self.base_channels == 0 || !self.base_channels.is_multiple_of(2) {
            return fail(format!("base channels {} must be positive and even", self.base_channels));
        }
        if self.timestep_embed_dim == 0 || self.groups == 0 {
            return fail("embedding width and group count must be positive".into());
        }
        for l in 0..self.levels() {
            if !self.channels(l).is_multiple_of(self.groups) {
                return fail(format!("level {l} width {} not divisible by {} groups", self.channels(l), self.groups));
            }
        }
        Ok(())
    }

    /// Compact `key=value;…` encoding stored inside weight files.
    pub fn to_meta(&self) -> String {
        let mult: Vec<String> = self.channel_multipliers.iter().map(|m| m.to_string()).collect();
        format!(
            "image={};in={};base={};mult={};frames={};styles={};gbuf={};temb={};groups={};rgbctl={}",
            self.image_size,
            self.image_channels,
            self.base_channels,
            mult.join(","),
            self.frames,
            self.num_styles,
            self.gbuffer_channels,
            self.timestep_embed_dim,
            self.groups,
            self.rgb_control as u8
        )
    }
}

impl FromStr for BackboneConfig {
    type Err = Error;

    fn from_str(meta: &str) -> Result<Self> {
        let mut c = BackboneConfig::default();
        let mut seen = 0u32;
        for item in meta.split(';') {
            let (k, v) = item.split_once('=').ok_or_else(|| Error::format(format!("model meta: bad item '{item}'")))?;
            let n = || -> Result<usize> {
                v.parse().map_err(|_| Error::format(format!("model meta: bad value for '{k}'")))
            };
            let bit = match k {
                "image" => {
                    c.image_size = n()?;
                    0
                }
                "in" => {
                    c.image_channels = n()?;
                    1
                }
                "base" => {
                    c.base_channels = n()?;
                    2
                }
                "mult" => {
                    c.channel_multipliers = v
                        .split(',')
                        .map(|m| m.parse().map_err(|_| Error::format("model meta: bad multiplier")))
                        .collect::<Result<_>>()?;
                    3
                }
                "frames" => {
                    c.frames = n()?;
                    4
                }
                "styles" => {
                    c.num_styles = n()?;
                    5
                }
                "gbuf" => {
                    c.gbuffer_channels = n()?;
                    6
                }
                "temb" => {
                    c.timestep_embed_dim = n()?;
                    7
                }
                "groups" => {
                    c.groups = n()?;
                    8
                }
                "rgbctl" => {
                    c.rgb_control = match v {
                        "0" => false,
                        "1" => true,
                        _ => return Err(Error::format("model meta: rgbctl must be 0 or 1")),
                    };
                    9
                }
                _ => return Err(Error::format(format!("model meta: unknown key '{k}'"))),
            };
            if seen & (1 << bit) != 0 {
                return Err(Error::format(format!("model meta: duplicate key '{k}'")));
            }
            seen |= 1 << bit;
        }
        if seen != (1 << 10) - 1 {
            return Err(Error::format("model meta: missing keys"));
        }
        c.validate().map_err(|e| Error::format(format!("model meta: {e}")))?;
        Ok(c)
    }
}
