//! Ground-truth appearance renderer for synthetic worlds.
//!
//! Surface colors are a function of the surface point and normal only
//! (albedo × Lambert term against a fixed sun, times a global tint), so two
//! cameras seeing the same point see the same color.

use nalgebra::Vector3;
use streetscape_core::{Error, ImageTensor, NoiseRng, Result, StyleToken};

use crate::camera::CameraPose;
use crate::gbuffer::{trace_ray, Hit, Surface};
use crate::layout::CellClass;
use crate::world::{WorldModel, TAG_FACADE};

pub type Rgb = [f64; 3];

/// Per-style lighting and ground colors.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Palette {
    pub sky_zenith: Rgb,
    pub sky_horizon: Rgb,
    pub road: Rgb,
    pub marking: Rgb,
    pub sidewalk: Rgb,
    pub ground: Rgb,
    /// Direction towards the sun (not necessarily normalized).
    pub sun: Rgb,
    pub ambient: f64,
    pub diffuse: f64,
    pub tint: Rgb,
    /// Probability that a window is lit.
    pub lit_windows: f64,
}

/// Styles `2·city + {0: day, 1: dusk}`.
pub const PALETTES: [Palette; 4] = [
    Palette {
        sky_zenith: [0.25, 0.45, 0.85],
        sky_horizon: [0.70, 0.82, 0.95],
        road: [0.30, 0.30, 0.32],
        marking: [0.95, 0.95, 0.90],
        sidewalk: [0.62, 0.60, 0.56],
        ground: [0.35, 0.55, 0.25],
        sun: [0.4, 0.6, 0.7],
        ambient: 0.55,
        diffuse: 0.45,
        tint: [1.0, 1.0, 1.0],
        lit_windows: 0.0,
    },
    Palette {
        sky_zenith: [0.20, 0.15, 0.40],
        sky_horizon: [0.95, 0.55, 0.30],
        road: [0.30, 0.30, 0.32],
        marking: [0.95, 0.95, 0.90],
        sidewalk: [0.62, 0.60, 0.56],
        ground: [0.35, 0.55, 0.25],
        sun: [-0.8, 0.3, 0.15],
        ambient: 0.35,
        diffuse: 0.40,
        tint: [1.0, 0.75, 0.55],
        lit_windows: 0.45,
    },
    Palette {
        sky_zenith: [0.35, 0.55, 0.80],
        sky_horizon: [0.80, 0.85, 0.90],
        road: [0.38, 0.36, 0.33],
        marking: [0.95, 0.80, 0.20],
        sidewalk: [0.75, 0.70, 0.62],
        ground: [0.55, 0.50, 0.30],
        sun: [-0.3, -0.5, 0.8],
        ambient: 0.60,
        diffuse: 0.40,
        tint: [1.0, 0.98, 0.92],
        lit_windows: 0.0,
    },
    Palette {
        sky_zenith: [0.10, 0.12, 0.30],
        sky_horizon: [0.85, 0.40, 0.45],
        road: [0.38, 0.36, 0.33],
        marking: [0.95, 0.80, 0.20],
        sidewalk: [0.75, 0.70, 0.62],
        ground: [0.55, 0.50, 0.30],
        sun: [0.7, -0.5, 0.12],
        ambient: 0.30,
        diffuse: 0.40,
        tint: [0.85, 0.70, 0.80],
        lit_windows: 0.6,
    },
];

/// Facade base colors per city.
const CITY_FACADES: [[Rgb; 4]; 2] = [
    [[0.62, 0.30, 0.22], [0.78, 0.66, 0.48], [0.55, 0.50, 0.45], [0.70, 0.45, 0.30]],
    [[0.85, 0.85, 0.82], [0.60, 0.65, 0.70], [0.90, 0.78, 0.60], [0.45, 0.50, 0.55]],
];

pub fn palette(style: StyleToken) -> Result<&'static Palette> {
    PALETTES.get(style.id()).ok_or_else(|| Error::contract(format!("style {} has no palette", style.id())))
}

/// Appearance of one building under one style.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Facade {
    pub base: Rgb,
    pub window: Rgb,
    pub lit: Rgb,
    pub window_spacing: f64,
    pub floor_height: f64,
    /// Seed for per-window lit/unlit draws.
    pub window_seed: u64,
    pub lit_fraction: f64,
}

impl Facade {
    pub fn new(world_seed: u64, building: u32, style: StyleToken) -> Result<Self> {
        let pal = palette(style)?;
        let city = style.id() / 2;
        let mut rng = NoiseRng::derived(world_seed, &[TAG_FACADE, building as u64, city as u64]);
        let choices = &CITY_FACADES[city];
        let pick = choices[rng.below(choices.len() as u64) as usize];
        let base = pick.map(|c| (c + rng.uniform_range(-0.06, 0.06)).clamp(0.0, 1.0));
        Ok(Facade {
            base,
            window: [0.12, 0.15, 0.20],
            lit: [1.0, 0.85, 0.50],
            window_spacing: rng.uniform_range(2.0, 3.5),
            floor_height: rng.uniform_range(3.0, 4.0),
            window_seed: rng.next_u64(),
            lit_fraction: pal.lit_windows,
        })
    }

    /// Albedo at height `z` and horizontal coordinate `s` along the face.
    pub fn albedo(&self, s: f64, z: f64, roof_height: f64) -> Rgb {
        let (fs, fz) = ((s / self.window_spacing).floor(), (z / self.floor_height).floor());
        let (us, uz) = (s / self.window_spacing - fs, z / self.floor_height - fz);
        let in_window = (0.25..0.75).contains(&us) && (0.3..0.75).contains(&uz) && z > 1.0 && z < roof_height - 0.5;
        if !in_window {
            return self.base;
        }
        if self.lit_fraction > 0.0 {
            let key = streetscape_core::derive_seed(self.window_seed, &[fs as i64 as u64, fz as i64 as u64]);
            if (key >> 11) as f64 / (1u64 << 53) as f64 <= self.lit_fraction {
                return self.lit;
            }
        }
        self.window
    }
}

/// Lambert factor for a unit normal.
pub fn shading(pal: &Palette, normal: &Vector3<f64>) -> f64 {
    let sun = Vector3::from(pal.sun).normalize();
    pal.ambient + pal.diffuse * normal.dot(&sun).max(0.0)
}

pub fn shade(albedo: Rgb, pal: &Palette, normal: &Vector3<f64>, emissive: bool) -> [f32; 3] {
    let k = if emissive { 1.0 } else { shading(pal, normal) };
    [0, 1, 2].map(|i| {
        let c = (albedo[i] * k * pal.tint[i]).clamp(0.0, 1.0);
        (2.0 * c - 1.0) as f32
    })
}

pub fn sky_color(pal: &Palette, dir: &Vector3<f64>) -> [f32; 3] {
    let e = (dir.z / dir.norm()).clamp(0.0, 1.0);
    let a = (2.0 * e).min(1.0);
    [0, 1, 2].map(|i| {
        let c = pal.sky_horizon[i] * (1.0 - a) + pal.sky_zenith[i] * a;
        (2.0 * c - 1.0) as f32
    })
}

impl WorldModel {
    /// Color of a non-sky hit under `style`, in `[-1, 1]`.
    pub fn surface_color(&self, hit: &Hit, style: StyleToken) -> Result<[f32; 3]> {
        let pal = palette(style)?;
        let p = hit.point;
        Ok(match hit.surface {
            Surface::Sky => {
                return Err(Error::contract("surface_color: sky has no surface point"));
            }
            Surface::Ground { class } => {
                let albedo = match class {
                    CellClass::Road if self.is_marking(p.x, p.y) => pal.marking,
                    CellClass::Road => pal.road,
                    CellClass::Sidewalk | CellClass::Building => pal.sidewalk,
                    CellClass::OpenGround => pal.ground,
                };
                shade(albedo, pal, &Vector3::z(), false)
            }
            Surface::Wall { cell, normal } => {
                let f = self.facade_at(cell, style)?;
                let s = if normal.x != 0.0 { p.y } else { p.x };
                let roof = self.layout.height_at(cell.0, cell.1);
                let albedo = f.albedo(s, p.z, roof);
                shade(albedo, pal, &normal, albedo == f.lit)
            }
            Surface::Roof { cell } => {
                let f = self.facade_at(cell, style)?;
                shade(f.base.map(|c| c * 0.7), pal, &Vector3::z(), false)
            }
        })
    }

    pub fn facade_at(&self, cell: (usize, usize), style: StyleToken) -> Result<Facade> {
        let id = self.building_id(cell.0, cell.1).unwrap_or(0);
        Facade::new(self.seed, id, style)
    }
}

/// Sub-samples per pixel side; each pixel averages `SUPERSAMPLE²` rays.
pub const SUPERSAMPLE: usize = 4;

/// Color seen along one ray.
pub fn ray_color(world: &WorldModel, origin: &Vector3<f64>, dir: &Vector3<f64>, style: StyleToken) -> Result<[f32; 3]> {
    let hit = trace_ray(&world.layout, origin, dir);
    if hit.surface == Surface::Sky {
        Ok(sky_color(palette(style)?, dir))
    } else {
        world.surface_color(&hit, style)
    }
}

/// Sub-pixel positions `(u, v)` integrated for pixel `(x, y)`.
pub fn subsamples(x: usize, y: usize) -> impl Iterator<Item = (f64, f64)> {
    let n = SUPERSAMPLE;
    (0..n * n).map(move |i| {
        let (sx, sy) = (i % n, i / n);
        (x as f64 + (sx as f64 + 0.5) / n as f64, y as f64 + (sy as f64 + 0.5) / n as f64)
    })
}

/// Renders the world from `camera` under `style`; output in `[-1, 1]`.
/// Pixels integrate a regular sub-grid of rays with a box filter.
pub fn render_photo(world: &WorldModel, camera: &CameraPose, style: StyleToken) -> Result<ImageTensor> {
    palette(style)?;
    camera.validate_in(&world.layout)?;
    let (w, h) = (camera.intrinsics.width, camera.intrinsics.height);
    let mut out = ImageTensor::zeros(3, h, w);
    let norm = (SUPERSAMPLE * SUPERSAMPLE) as f64;
    for v in 0..h {
        for u in 0..w {
            let mut acc = [0.0f64; 3];
            for (su, sv) in subsamples(u, v) {
                let rgb = ray_color(world, &camera.position, &camera.pixel_ray(su, sv), style)?;
                for k in 0..3 {
                    acc[k] += rgb[k] as f64;
                }
            }
            for (k, a) in acc.into_iter().enumerate() {
                out.set(k, v, u, (a / norm) as f32);
            }
        }
    }
    Ok(out)
}
