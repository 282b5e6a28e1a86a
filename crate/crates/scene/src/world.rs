//! Procedural street worlds: block-grid layouts, camera trajectories along the
//! roads, K-frame training windows and misalignment noise.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use streetscape_core::tnsr::Tnsr;
use streetscape_core::{derive_seed, Error, ImageTensor, NoiseRng, Result, StyleToken};

use crate::camera::{cameras_from_tnsr, cameras_to_tnsr, CameraPose, Intrinsics};
use crate::gbuffer::{render_gbuffer, GBuffer, GBUFFER_CHANNELS};
use crate::layout::{CellClass, SceneLayout};
use crate::photo::render_photo;
use crate::png::{read_png, write_png};

pub const ROAD_WIDTH_M: f64 = 8.0;
pub const SIDEWALK_WIDTH_M: f64 = 2.0;
pub const MIN_BUILDING_HEIGHT: f64 = 5.0;
pub const MAX_BUILDING_HEIGHT: f64 = 30.0;
pub const CAMERA_HEIGHT: f64 = 2.0;
/// Proximity rule for consecutive frames of a window.
pub const MAX_STEP_M: f64 = 2.0;
pub const MAX_YAW_STEP_DEG: f64 = 30.0;

const MIN_LOT: usize = 6;
const MAX_LOT: usize = 14;

// Seed-derivation tags.
const TAG_LAYOUT: u64 = 1;
const TAG_WINDOW: u64 = 2;
const TAG_TRAJ: u64 = 3;
const TAG_STYLE: u64 = 4;
const TAG_JITTER: u64 = 5;
const TAG_PERTURB: u64 = 6;
pub(crate) const TAG_FACADE: u64 = 7;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WorldSpec {
    pub width: usize,
    pub height: usize,
    pub cell_size: f64,
    /// Target fraction of road + sidewalk cells.
    pub road_fraction: f64,
    /// Probability that a lot stays open ground instead of holding a building.
    pub open_lot_fraction: f64,
}

impl Default for WorldSpec {
    fn default() -> Self {
        Self { width: 128, height: 128, cell_size: 1.0, road_fraction: 0.45, open_lot_fraction: 0.15 }
    }
}

impl WorldSpec {
    pub fn validate(&self) -> Result<()> {
        if self.width < 32 || self.height < 32 {
            return Err(Error::config(format!("world grid {}x{} is smaller than 32x32", self.width, self.height)));
        }
        if !(self.road_fraction > 0.1 && self.road_fraction < 0.5) {
            return Err(Error::config(format!("road fraction {} outside (0.1, 0.5)", self.road_fraction)));
        }
        if !(self.cell_size >= 0.25 && self.cell_size <= 2.0) {
            return Err(Error::config(format!("cell size {} outside [0.25, 2]", self.cell_size)));
        }
        if !(0.0..=1.0).contains(&self.open_lot_fraction) {
            return Err(Error::config(format!("open lot fraction {} outside [0, 1]", self.open_lot_fraction)));
        }
        Ok(())
    }
}

/// Street band geometry in cells: `[sidewalk | road | sidewalk]`, repeating
/// every `pitch` cells along both axes starting at cell 0.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StreetGrid {
    pub pitch: usize,
    pub sidewalk: usize,
    pub road: usize,
}

impl StreetGrid {
    pub fn band(&self) -> usize {
        2 * self.sidewalk + self.road
    }

    /// 0 = block interior, 1 = sidewalk, 2 = road, along one axis.
    fn axis_kind(&self, i: usize) -> u8 {
        let m = i % self.pitch;
        if m >= self.band() {
            0
        } else if m < self.sidewalk || m >= self.sidewalk + self.road {
            1
        } else {
            2
        }
    }

    fn class(&self, col: usize, row: usize) -> Option<CellClass> {
        match self.axis_kind(col).max(self.axis_kind(row)) {
            2 => Some(CellClass::Road),
            1 => Some(CellClass::Sidewalk),
            _ => None,
        }
    }

    fn street_fraction(&self, width: usize, height: usize) -> f64 {
        let street = |n: usize| (0..n).filter(|&i| self.axis_kind(i) > 0).count();
        let (sx, sy) = (street(width), street(height));
        let blocks = (width - sx) * (height - sy);
        1.0 - blocks as f64 / (width * height) as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct WorldModel {
    pub seed: u64,
    pub spec: WorldSpec,
    pub layout: SceneLayout,
    pub streets: StreetGrid,
    /// Per-cell building id (0 where there is no building).
    building_ids: Vec<u32>,
    num_buildings: u32,
}

impl WorldModel {
    pub fn building_id(&self, col: usize, row: usize) -> Option<u32> {
        let id = self.building_ids[self.layout.index(col, row)];
        (id != 0).then_some(id)
    }

    pub fn num_buildings(&self) -> u32 {
        self.num_buildings
    }

    /// Fraction of road + sidewalk cells.
    pub fn street_fraction(&self) -> f64 {
        let n = self.layout.count(CellClass::Road) + self.layout.count(CellClass::Sidewalk);
        n as f64 / self.layout.semantic().len() as f64
    }

    /// Whether a road point carries a dashed centre-line marking.
    pub fn is_marking(&self, x: f64, y: f64) -> bool {
        let cs = self.layout.cell_size();
        let g = self.streets;
        let period = g.pitch as f64 * cs;
        let centre = (g.sidewalk as f64 + g.road as f64 / 2.0) * cs;
        let band = g.band() as f64 * cs;
        let on_line = |a: f64, b: f64| {
            let along = b.rem_euclid(period);
            (a.rem_euclid(period) - centre).abs() < 0.12 && along >= band && (b / 3.0).rem_euclid(1.0) < 0.5
        };
        on_line(x, y) || on_line(y, x)
    }
}

/// Generates a block-grid street world. The street pitch is chosen so the
/// road + sidewalk fraction is as close as possible to the target.
pub fn generate_world(seed: u64, spec: &WorldSpec) -> Result<WorldModel> {
    spec.validate()?;
    let cs = spec.cell_size;
    let sidewalk = (SIDEWALK_WIDTH_M / cs).round() as usize;
    let road = (ROAD_WIDTH_M / cs).round() as usize;
    let band = 2 * sidewalk + road;
    let max_pitch = spec.width.max(spec.height);
    let streets = (band + MIN_LOT..=max_pitch)
        .map(|pitch| StreetGrid { pitch, sidewalk, road })
        .min_by(|a, b| {
            let da = (a.street_fraction(spec.width, spec.height) - spec.road_fraction).abs();
            let db = (b.street_fraction(spec.width, spec.height) - spec.road_fraction).abs();
            da.total_cmp(&db)
        })
        .ok_or_else(|| Error::config("world grid too small for a single block"))?;
    let achieved = streets.street_fraction(spec.width, spec.height);
    if (achieved - spec.road_fraction).abs() > 0.1 {
        return Err(Error::config(format!(
            "cannot reach road fraction {} on a {}x{} grid (best {achieved:.3})",
            spec.road_fraction, spec.width, spec.height
        )));
    }

    let mut layout = SceneLayout::filled(spec.width, spec.height, cs, CellClass::OpenGround)?;
    let mut ids = vec![0u32; spec.width * spec.height];
    for row in 0..spec.height {
        for col in 0..spec.width {
            if let Some(class) = streets.class(col, row) {
                layout.set_cell(col, row, class, 0.0);
            }
        }
    }

    let mut rng = NoiseRng::derived(seed, &[TAG_LAYOUT]);
    let spans = |n: usize| -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        let mut start = 0;
        while start < n {
            if streets.axis_kind(start) > 0 {
                start += 1;
                continue;
            }
            let end = (start..n).find(|&i| streets.axis_kind(i) > 0).unwrap_or(n);
            out.push((start, end));
            start = end;
        }
        out
    };
    let (col_blocks, row_blocks) = (spans(spec.width), spans(spec.height));
    let mut next_id = 1u32;
    for &(r0, r1) in &row_blocks {
        for &(c0, c1) in &col_blocks {
            let rows = split_lots(&mut rng, r0, r1);
            let cols = split_lots(&mut rng, c0, c1);
            for &(lr0, lr1) in &rows {
                for &(lc0, lc1) in &cols {
                    if rng.bernoulli(spec.open_lot_fraction) {
                        continue;
                    }
                    let h = rng.uniform_range(MIN_BUILDING_HEIGHT, MAX_BUILDING_HEIGHT);
                    for row in lr0..lr1 {
                        for col in lc0..lc1 {
                            layout.set_cell(col, row, CellClass::Building, h);
                            ids[row * spec.width + col] = next_id;
                        }
                    }
                    next_id += 1;
                }
            }
        }
    }
    Ok(WorldModel { seed, spec: *spec, layout, streets, building_ids: ids, num_buildings: next_id - 1 })
}

fn split_lots(rng: &mut NoiseRng, start: usize, end: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut a = start;
    while a < end {
        let size = rng.range_inclusive(MIN_LOT as i64, MAX_LOT as i64) as usize;
        let mut b = (a + size).min(end);
        if end - b < MIN_LOT {
            b = end;
        }
        out.push((a, b));
        a = b;
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub poses: Vec<CameraPose>,
}

/// Signed yaw difference wrapped to `(-π, π]`.
pub fn yaw_delta(a: f64, b: f64) -> f64 {
    let d = (b - a).rem_euclid(std::f64::consts::TAU);
    if d > std::f64::consts::PI {
        d - std::f64::consts::TAU
    } else {
        d
    }
}

fn wrap_yaw(y: f64) -> f64 {
    yaw_delta(0.0, y)
}

fn on_road(layout: &SceneLayout, x: f64, y: f64) -> bool {
    layout.cell_of(x, y).is_some_and(|(c, r)| layout.class_at(c, r) == CellClass::Road)
}

fn segment_on_road(layout: &SceneLayout, a: &Vector3<f64>, b: &Vector3<f64>) -> bool {
    let n = ((b - a).norm() / 0.25).ceil().max(1.0) as usize;
    (0..=n).all(|i| {
        let p = a + (b - a) * (i as f64 / n as f64);
        on_road(layout, p.x, p.y)
    })
}

/// Random walk over road cells at camera height: each step either rotates in
/// place ("looking around") or advances up to `MAX_STEP_M` with a heading
/// change of at most `MAX_YAW_STEP_DEG`, gently pulled back towards the
/// street axes.
pub fn sample_trajectory(world: &WorldModel, seed: u64, length: usize, intrinsics: Intrinsics) -> Result<Trajectory> {
    if length < 2 {
        return Err(Error::contract(format!("trajectory length {length} < 2")));
    }
    let layout = &world.layout;
    let roads: Vec<(usize, usize)> = (0..layout.height())
        .flat_map(|r| (0..layout.width()).map(move |c| (c, r)))
        .filter(|&(c, r)| layout.class_at(c, r) == CellClass::Road)
        .collect();
    if roads.is_empty() {
        return Err(Error::config("world has no road cells"));
    }
    let mut rng = NoiseRng::derived(seed, &[TAG_TRAJ]);
    let cs = layout.cell_size();
    let (c, r) = roads[rng.below(roads.len() as u64) as usize];
    let mut pos = Vector3::new((c as f64 + 0.5) * cs, (r as f64 + 0.5) * cs, CAMERA_HEIGHT);
    let quarter = std::f64::consts::FRAC_PI_2;
    let clear_run = |p: &Vector3<f64>, yaw: f64| {
        (1..=12)
            .take_while(|&k| {
                let q = p + Vector3::new(yaw.cos(), yaw.sin(), 0.0) * (k as f64 * 0.5);
                on_road(layout, q.x, q.y)
            })
            .count()
    };
    let first = rng.below(4) as usize;
    let mut yaw =
        (0..4).map(|k| wrap_yaw(((first + k) % 4) as f64 * quarter)).max_by_key(|&y| clear_run(&pos, y)).unwrap();

    let max_turn = MAX_YAW_STEP_DEG.to_radians();
    let mut poses = vec![CameraPose::new(pos, yaw, 0.0, intrinsics)];
    while poses.len() < length {
        if rng.bernoulli(0.2) {
            yaw = wrap_yaw(yaw + rng.uniform_range(-max_turn, max_turn));
        } else {
            let axis = (yaw / quarter).round() * quarter;
            let mut moved = false;
            for attempt in 0..8 {
                let spread = if attempt < 4 { 8f64.to_radians() } else { max_turn };
                let pull = -0.3 * yaw_delta(axis, yaw);
                let turn = (rng.uniform_range(-spread, spread) + pull).clamp(-max_turn, max_turn);
                let heading = wrap_yaw(yaw + turn);
                let dist = rng.uniform_range(0.5, MAX_STEP_M);
                let next = pos + Vector3::new(heading.cos(), heading.sin(), 0.0) * dist;
                if segment_on_road(layout, &pos, &next) {
                    pos = next;
                    yaw = heading;
                    moved = true;
                    break;
                }
            }
            if !moved {
                let sign = if rng.bernoulli(0.5) { 1.0 } else { -1.0 };
                yaw = wrap_yaw(yaw + sign * max_turn);
            }
        }
        poses.push(CameraPose::new(pos, yaw, 0.0, intrinsics));
    }
    Ok(Trajectory { poses })
}

/// Checks the window proximity rule between consecutive cameras.
pub fn check_proximity(cameras: &[CameraPose]) -> Result<()> {
    for (i, pair) in cameras.windows(2).enumerate() {
        let d = (pair[1].position - pair[0].position).norm();
        let dyaw = yaw_delta(pair[0].yaw, pair[1].yaw).abs();
        if d > MAX_STEP_M + 1e-9 || dyaw > MAX_YAW_STEP_DEG.to_radians() + 1e-9 {
            return Err(Error::contract(format!(
                "frames {i}->{}: step {d:.3} m, yaw change {:.2} deg exceed the proximity rule",
                i + 1,
                dyaw.to_degrees()
            )));
        }
    }
    Ok(())
}

/// Misalignment noise applied to the geometry behind training G-buffers.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LayoutNoise {
    /// Standard deviation of per-cell building height jitter, meters.
    pub height_sigma: f64,
    /// Footprint change in cells: +1 dilates, -1 erodes.
    pub dilation: i32,
}

impl LayoutNoise {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=3.0).contains(&self.height_sigma) {
            return Err(Error::config(format!("height jitter {} outside [0, 3] m", self.height_sigma)));
        }
        if self.dilation.abs() > 1 {
            return Err(Error::config(format!("footprint change {} outside [-1, 1] cells", self.dilation)));
        }
        Ok(())
    }

    pub fn is_zero(&self) -> bool {
        self.height_sigma == 0.0 && self.dilation == 0
    }
}

/// Camera jitter between the photo pose and the G-buffer pose.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct PoseJitter {
    pub position_m: f64,
    pub yaw_deg: f64,
}

impl PoseJitter {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=0.5).contains(&self.position_m) || !(0.0..=3.0).contains(&self.yaw_deg) {
            return Err(Error::config(format!(
                "pose jitter ({} m, {} deg) outside (0.5 m, 3 deg)",
                self.position_m, self.yaw_deg
            )));
        }
        Ok(())
    }
}

/// Returns a perturbed copy of `layout`: footprint morphology first, then
/// Gaussian height jitter on building cells (clamped at 0).
pub fn perturb_layout(layout: &SceneLayout, noise: &LayoutNoise, seed: u64) -> Result<SceneLayout> {
    noise.validate()?;
    let mut out = layout.clone();
    let (w, h) = (layout.width(), layout.height());
    let neighbours = |c: usize, r: usize| {
        [(-1i64, 0i64), (1, 0), (0, -1), (0, 1)].into_iter().filter_map(move |(dc, dr)| {
            let (nc, nr) = (c as i64 + dc, r as i64 + dr);
            (nc >= 0 && nr >= 0 && (nc as usize) < w && (nr as usize) < h).then_some((nc as usize, nr as usize))
        })
    };
    let is_building = |c: usize, r: usize| layout.class_at(c, r) == CellClass::Building;
    match noise.dilation {
        1 => {
            for r in 0..h {
                for c in 0..w {
                    if is_building(c, r) {
                        continue;
                    }
                    let tallest = neighbours(c, r)
                        .filter(|&(nc, nr)| is_building(nc, nr))
                        .map(|(nc, nr)| layout.height_at(nc, nr))
                        .reduce(f64::max);
                    if let Some(height) = tallest {
                        out.set_cell(c, r, CellClass::Building, height);
                    }
                }
            }
        }
        -1 => {
            for r in 0..h {
                for c in 0..w {
                    if is_building(c, r) && neighbours(c, r).any(|(nc, nr)| !is_building(nc, nr)) {
                        out.set_cell(c, r, CellClass::OpenGround, 0.0);
                    }
                }
            }
        }
        _ => {}
    }
    if noise.height_sigma > 0.0 {
        let mut rng = NoiseRng::derived(seed, &[TAG_PERTURB]);
        for r in 0..h {
            for c in 0..w {
                if out.class_at(c, r) == CellClass::Building {
                    let jittered = (out.height_at(c, r) + noise.height_sigma * rng.normal()).max(0.0);
                    out.set_cell(c, r, CellClass::Building, jittered);
                }
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DatasetSpec {
    pub windows: usize,
    pub frames: usize,
    pub intrinsics: Intrinsics,
    pub num_styles: usize,
    pub layout_noise: LayoutNoise,
    pub pose_jitter: PoseJitter,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            windows: 1,
            frames: 2,
            intrinsics: Intrinsics::default(),
            num_styles: streetscape_core::style::DEFAULT_NUM_STYLES,
            layout_noise: LayoutNoise::default(),
            pose_jitter: PoseJitter::default(),
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.windows == 0 {
            return Err(Error::config("dataset needs at least one window"));
        }
        if ![1, 2, 4].contains(&self.frames) {
            return Err(Error::config(format!("window size {} not in {{1, 2, 4}}", self.frames)));
        }
        if self.num_styles == 0 || self.num_styles > crate::photo::PALETTES.len() {
            return Err(Error::config(format!(
                "num_styles {} outside [1, {}]",
                self.num_styles,
                crate::photo::PALETTES.len()
            )));
        }
        self.layout_noise.validate()?;
        self.pose_jitter.validate()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct WindowSample {
    pub index: usize,
    pub style: StyleToken,
    pub frames: Vec<ImageTensor>,
    pub cameras: Vec<CameraPose>,
    pub gbuffers: Vec<GBuffer>,
}

/// Builds windows of a dataset; every window depends only on
/// `(world, spec, seed, index)`.
pub struct DatasetBuilder<'a> {
    world: &'a WorldModel,
    spec: DatasetSpec,
    seed: u64,
    gbuffer_layout: SceneLayout,
}

impl<'a> DatasetBuilder<'a> {
    pub fn new(world: &'a WorldModel, spec: DatasetSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let gbuffer_layout = if spec.layout_noise.is_zero() {
            world.layout.clone()
        } else {
            perturb_layout(&world.layout, &spec.layout_noise, derive_seed(seed, &[TAG_PERTURB]))?
        };
        Ok(Self { world, spec, seed, gbuffer_layout })
    }

    pub fn window(&self, index: usize) -> Result<WindowSample> {
        let wseed = derive_seed(self.seed, &[TAG_WINDOW, index as u64]);
        let traj = sample_trajectory(
            self.world,
            derive_seed(wseed, &[TAG_TRAJ]),
            self.spec.frames.max(2),
            self.spec.intrinsics,
        )?;
        let mut cameras = traj.poses;
        cameras.truncate(self.spec.frames);
        check_proximity(&cameras)?;
        let mut style_rng = NoiseRng::derived(wseed, &[TAG_STYLE]);
        let style = StyleToken::new(style_rng.below(self.spec.num_styles as u64) as usize, self.spec.num_styles)?;
        let mut jitter_rng = NoiseRng::derived(wseed, &[TAG_JITTER]);
        let mut frames = Vec::with_capacity(cameras.len());
        let mut gbuffers = Vec::with_capacity(cameras.len());
        for cam in &cameras {
            frames.push(render_photo(self.world, cam, style)?);
            let gcam = self.jittered(cam, &mut jitter_rng);
            gbuffers.push(render_gbuffer(&self.gbuffer_layout, &gcam)?);
        }
        Ok(WindowSample { index, style, frames, cameras, gbuffers })
    }

    fn jittered(&self, cam: &CameraPose, rng: &mut NoiseRng) -> CameraPose {
        let j = self.spec.pose_jitter;
        if j.position_m == 0.0 && j.yaw_deg == 0.0 {
            return *cam;
        }
        let mut out = *cam;
        out.position.x += rng.uniform_range(-j.position_m, j.position_m);
        out.position.y += rng.uniform_range(-j.position_m, j.position_m);
        out.yaw = wrap_yaw(out.yaw + rng.uniform_range(-j.yaw_deg, j.yaw_deg).to_radians());
        if out.validate_in(&self.gbuffer_layout).is_ok() {
            out
        } else {
            *cam
        }
    }

    pub fn build_all(&self) -> Result<Vec<WindowSample>> {
        (0..self.spec.windows).map(|i| self.window(i)).collect()
    }
}

pub fn build_dataset(world: &WorldModel, spec: &DatasetSpec, seed: u64) -> Result<Vec<WindowSample>> {
    DatasetBuilder::new(world, *spec, seed)?.build_all()
}

pub const MANIFEST_FILE: &str = "manifest.txt";
const MANIFEST_MAGIC: &str = "STREETSET";
const MANIFEST_VERSION: u32 = 1;

/// Text index of a dataset directory.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub world_seed: u64,
    pub world: WorldSpec,
    pub dataset_seed: u64,
    pub spec: DatasetSpec,
    /// Style id of every window, in index order.
    pub styles: Vec<usize>,
}

impl DatasetManifest {
    pub fn to_text(&self) -> String {
        let w = &self.world;
        let s = &self.spec;
        let mut out = String::new();
        let _ = writeln!(out, "{MANIFEST_MAGIC} {MANIFEST_VERSION}");
        let _ = writeln!(out, "world_seed {}", self.world_seed);
        let _ =
            writeln!(out, "world {} {} {} {} {}", w.width, w.height, w.cell_size, w.road_fraction, w.open_lot_fraction);
        let _ = writeln!(out, "dataset_seed {}", self.dataset_seed);
        let _ = writeln!(out, "frames {}", s.frames);
        let _ = writeln!(out, "camera {} {} {}", s.intrinsics.width, s.intrinsics.height, s.intrinsics.hfov);
        let _ = writeln!(out, "styles {}", s.num_styles);
        let _ = writeln!(
            out,
            "noise {} {} {} {}",
            s.layout_noise.height_sigma, s.layout_noise.dilation, s.pose_jitter.position_m, s.pose_jitter.yaw_deg
        );
        let _ = writeln!(out, "windows {}", s.windows);
        for (i, style) in self.styles.iter().enumerate() {
            let _ = writeln!(out, "window {i} {style}");
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let mut next = |key: &str, n: usize| -> Result<(usize, Vec<String>)> {
            let (no, line) = lines.next().ok_or_else(|| Error::format(format!("manifest: missing '{key}' line")))?;
            let mut parts = line.split_whitespace();
            let got = parts.next().unwrap_or_default();
            let vals: Vec<String> = parts.map(str::to_owned).collect();
            if got != key || vals.len() != n {
                return Err(Error::format(format!("manifest line {}: expected '{key}' with {n} values", no + 1)));
            }
            Ok((no + 1, vals))
        };
        fn num<T: std::str::FromStr>(v: &str, line: usize) -> Result<T> {
            v.parse().map_err(|_| Error::format(format!("manifest line {line}: bad number '{v}'")))
        }
        let (l, v) = next(MANIFEST_MAGIC, 1)?;
        let version: u32 = num(&v[0], l)?;
        if version != MANIFEST_VERSION {
            return Err(Error::format(format!("manifest: unsupported version {version}")));
        }
        let (l, v) = next("world_seed", 1)?;
        let world_seed = num(&v[0], l)?;
        let (l, v) = next("world", 5)?;
        let world = WorldSpec {
            width: num(&v[0], l)?,
            height: num(&v[1], l)?,
            cell_size: num(&v[2], l)?,
            road_fraction: num(&v[3], l)?,
            open_lot_fraction: num(&v[4], l)?,
        };
        let (l, v) = next("dataset_seed", 1)?;
        let dataset_seed = num(&v[0], l)?;
        let (l, v) = next("frames", 1)?;
        let frames = num(&v[0], l)?;
        let (l, v) = next("camera", 3)?;
        let (iw, ih, fov): (usize, usize, f64) = (num(&v[0], l)?, num(&v[1], l)?, num(&v[2], l)?);
        if iw == 0 || ih == 0 || iw > 4096 || ih > 4096 || !(fov > 0.0 && fov < std::f64::consts::PI) {
            return Err(Error::format(format!("manifest line {l}: bad camera {iw}x{ih} @ {fov}")));
        }
        let (l, v) = next("styles", 1)?;
        let num_styles = num(&v[0], l)?;
        let (l, v) = next("noise", 4)?;
        let layout_noise = LayoutNoise { height_sigma: num(&v[0], l)?, dilation: num(&v[1], l)? };
        let pose_jitter = PoseJitter { position_m: num(&v[2], l)?, yaw_deg: num(&v[3], l)? };
        let (l, v) = next("windows", 1)?;
        let windows: usize = num(&v[0], l)?;
        let spec = DatasetSpec {
            windows,
            frames,
            intrinsics: Intrinsics { hfov: fov, width: iw, height: ih },
            num_styles,
            layout_noise,
            pose_jitter,
        };
        spec.validate().map_err(|e| Error::format(format!("manifest: {e}")))?;
        let mut styles = Vec::new();
        for i in 0..windows {
            let (l, v) = next("window", 2)?;
            let idx: usize = num(&v[0], l)?;
            let style: usize = num(&v[1], l)?;
            if idx != i || style >= num_styles {
                return Err(Error::format(format!("manifest line {l}: bad window row")));
            }
            styles.push(style);
        }
        if let Some((no, _)) = lines.next() {
            return Err(Error::format(format!("manifest line {}: trailing content", no + 1)));
        }
        Ok(Self { world_seed, world, dataset_seed, spec, styles })
    }
}

/// Directory-backed dataset with lazily loaded windows.
pub struct DatasetDir {
    root: PathBuf,
    pub manifest: DatasetManifest,
}

fn window_dir(root: &Path, index: usize) -> PathBuf {
    root.join(format!("w{index:06}"))
}

impl DatasetDir {
    /// Generates and persists a whole dataset.
    pub fn create(root: impl AsRef<Path>, world: &WorldModel, spec: &DatasetSpec, seed: u64) -> Result<Self> {
        let root = root.as_ref().to_path_buf();
        std::fs::create_dir_all(&root)?;
        let builder = DatasetBuilder::new(world, *spec, seed)?;
        let mut styles = Vec::with_capacity(spec.windows);
        for i in 0..spec.windows {
            let sample = builder.window(i)?;
            write_window(&window_dir(&root, i), &sample)?;
            styles.push(sample.style.id());
        }
        let manifest =
            DatasetManifest { world_seed: world.seed, world: world.spec, dataset_seed: seed, spec: *spec, styles };
        std::fs::write(root.join(MANIFEST_FILE), manifest.to_text())?;
        Ok(Self { root, manifest })
    }

    pub fn open(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref().to_path_buf();
        let text = std::fs::read_to_string(root.join(MANIFEST_FILE))?;
        Ok(Self { manifest: DatasetManifest::parse(&text)?, root })
    }

    pub fn len(&self) -> usize {
        self.manifest.styles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.styles.is_empty()
    }

    pub fn load_window(&self, index: usize) -> Result<WindowSample> {
        let spec = &self.manifest.spec;
        if index >= self.len() {
            return Err(Error::contract(format!("window {index} out of range ({})", self.len())));
        }
        let dir = window_dir(&self.root, index);
        let k = spec.frames;
        let (w, h) = (spec.intrinsics.width, spec.intrinsics.height);
        let frames = (0..k)
            .map(|i| {
                let f = read_png(dir.join(format!("frame{i}.png")))?;
                if f.shape() != (3, h, w) {
                    return Err(Error::format(format!("window {index} frame {i}: wrong size")));
                }
                Ok(f)
            })
            .collect::<Result<Vec<_>>>()?;
        let cams = cameras_from_tnsr(&Tnsr::read(dir.join("cameras.tnsr"))?)?;
        let g = Tnsr::read(dir.join("gbuffers.tnsr"))?;
        if g.dims != [k, GBUFFER_CHANNELS, h, w] || cams.len() != k {
            return Err(Error::format(format!("window {index}: tensor shapes do not match the manifest")));
        }
        let plane = GBUFFER_CHANNELS * h * w;
        let gbuffers = g
            .data
            .chunks(plane)
            .map(|c| GBuffer::from_tensor(&ImageTensor::new(GBUFFER_CHANNELS, h, w, c.to_vec())?))
            .collect::<Result<Vec<_>>>()?;
        Ok(WindowSample {
            index,
            style: StyleToken::new(self.manifest.styles[index], spec.num_styles)?,
            frames,
            cameras: cams,
            gbuffers,
        })
    }
}

fn write_window(dir: &Path, sample: &WindowSample) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for (i, f) in sample.frames.iter().enumerate() {
        write_png(f, dir.join(format!("frame{i}.png")))?;
    }
    cameras_to_tnsr(&sample.cameras).write(dir.join("cameras.tnsr"))?;
    let first = &sample.gbuffers[0];
    let mut data = Vec::new();
    for g in &sample.gbuffers {
        data.extend_from_slice(g.to_tensor().data());
    }
    Tnsr::new(vec![sample.gbuffers.len(), GBUFFER_CHANNELS, first.height(), first.width()], data)?
        .write(dir.join("gbuffers.tnsr"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> WorldSpec {
        WorldSpec { width: 96, height: 96, ..WorldSpec::default() }
    }

    #[test]
    fn same_seed_same_world() {
        let a = generate_world(3, &small()).unwrap();
        let b = generate_world(3, &small()).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.layout, generate_world(4, &small()).unwrap().layout);
    }

    #[test]
    fn street_fraction_near_target() {
        for target in [0.2, 0.3, 0.45] {
            for seed in 0..3 {
                let spec = WorldSpec { road_fraction: target, ..WorldSpec::default() };
                let w = generate_world(seed, &spec).unwrap();
                assert!((w.street_fraction() - target).abs() <= 0.1, "{target}: {}", w.street_fraction());
            }
        }
    }

    #[test]
    fn building_heights_in_range() {
        let w = generate_world(9, &WorldSpec::default()).unwrap();
        assert!(w.num_buildings() > 10);
        for r in 0..w.layout.height() {
            for c in 0..w.layout.width() {
                if w.layout.class_at(c, r) == CellClass::Building {
                    let h = w.layout.height_at(c, r);
                    assert!((MIN_BUILDING_HEIGHT..=MAX_BUILDING_HEIGHT).contains(&h));
                    assert!(w.building_id(c, r).is_some());
                } else {
                    assert!(w.building_id(c, r).is_none());
                }
            }
        }
    }

    #[test]
    fn bad_specs_are_config_errors() {
        for spec in [
            WorldSpec { width: 31, ..WorldSpec::default() },
            WorldSpec { road_fraction: 0.5, ..WorldSpec::default() },
            WorldSpec { road_fraction: 0.1, ..WorldSpec::default() },
        ] {
            assert!(matches!(generate_world(0, &spec), Err(Error::Config(_))));
        }
        // A 32-cell grid cannot get down to 12% streets: one band alone is 12 cells.
        let tiny = WorldSpec { width: 32, height: 32, road_fraction: 0.12, ..WorldSpec::default() };
        assert!(matches!(generate_world(0, &tiny), Err(Error::Config(_))));
    }

    #[test]
    fn trajectories_stay_on_roads_and_respect_proximity() {
        let w = generate_world(1, &WorldSpec::default()).unwrap();
        for seed in 0..10 {
            let t = sample_trajectory(&w, seed, 40, Intrinsics::default()).unwrap();
            assert_eq!(t.poses.len(), 40);
            for p in &t.poses {
                assert!(on_road(&w.layout, p.position.x, p.position.y));
                assert_eq!(p.position.z, CAMERA_HEIGHT);
            }
            check_proximity(&t.poses).unwrap();
            let rotations = t.poses.windows(2).filter(|p| p[0].position == p[1].position).count();
            let moves = t.poses.windows(2).filter(|p| p[0].position != p[1].position).count();
            assert!(moves > 0);
            let _ = rotations;
            assert_eq!(t, sample_trajectory(&w, seed, 40, Intrinsics::default()).unwrap());
        }
    }

    #[test]
    fn walk_includes_pure_rotations() {
        let w = generate_world(1, &WorldSpec::default()).unwrap();
        let t = sample_trajectory(&w, 5, 400, Intrinsics::default()).unwrap();
        let rotations = t.poses.windows(2).filter(|p| p[0].position == p[1].position && p[0].yaw != p[1].yaw).count();
        assert!(rotations > 10);
    }

    #[test]
    fn no_roads_is_a_config_error() {
        let mut w = generate_world(1, &small()).unwrap();
        w.layout = SceneLayout::filled(96, 96, 1.0, CellClass::OpenGround).unwrap();
        assert!(matches!(sample_trajectory(&w, 0, 4, Intrinsics::default()), Err(Error::Config(_))));
        assert!(sample_trajectory(&w, 0, 1, Intrinsics::default()).is_err());
    }

    #[test]
    fn zero_noise_is_identity() {
        let w = generate_world(2, &small()).unwrap();
        assert_eq!(perturb_layout(&w.layout, &LayoutNoise::default(), 1).unwrap(), w.layout);
    }

    #[test]
    fn height_jitter_matches_half_normal_mean() {
        let w = generate_world(2, &WorldSpec::default()).unwrap();
        let noise = LayoutNoise { height_sigma: 3.0, dilation: 0 };
        let p = perturb_layout(&w.layout, &noise, 8).unwrap();
        let diffs: Vec<f64> = (0..w.layout.semantic().len())
            .filter(|&i| w.layout.semantic()[i] == CellClass::Building)
            .map(|i| (p.heights()[i] - w.layout.heights()[i]).abs())
            .collect();
        let n = diffs.len() as f64;
        let mean = diffs.iter().sum::<f64>() / n;
        let var = diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let bound = 3.0 * (2.0 / std::f64::consts::PI).sqrt() * 1.05;
        assert!(mean <= bound + 3.0 * (var / n).sqrt(), "{mean} vs {bound}");
        for &h in p.heights() {
            assert!(h >= 0.0);
        }
    }

    #[test]
    fn dilation_grows_and_erosion_shrinks_footprints() {
        let w = generate_world(2, &small()).unwrap();
        let n = w.layout.count(CellClass::Building);
        let grow = perturb_layout(&w.layout, &LayoutNoise { height_sigma: 0.0, dilation: 1 }, 0).unwrap();
        let shrink = perturb_layout(&w.layout, &LayoutNoise { height_sigma: 0.0, dilation: -1 }, 0).unwrap();
        assert!(grow.count(CellClass::Building) >= n);
        assert!(shrink.count(CellClass::Building) <= n);
        for bad in [LayoutNoise { height_sigma: 3.5, dilation: 0 }, LayoutNoise { height_sigma: 0.0, dilation: 2 }] {
            assert!(matches!(perturb_layout(&w.layout, &bad, 0), Err(Error::Config(_))));
        }
    }

    fn tiny_spec(windows: usize, frames: usize) -> DatasetSpec {
        DatasetSpec { windows, frames, intrinsics: Intrinsics::new(60.0, 16, 16), ..DatasetSpec::default() }
    }

    #[test]
    fn dataset_counts_and_proximity() {
        let w = generate_world(5, &small()).unwrap();
        let ds = build_dataset(&w, &tiny_spec(25, 2), 9).unwrap();
        assert_eq!(ds.len(), 25);
        assert_eq!(ds.iter().map(|s| s.frames.len()).sum::<usize>(), 50);
        for s in &ds {
            check_proximity(&s.cameras).unwrap();
            assert_eq!(s.gbuffers.len(), 2);
        }
    }

    #[test]
    fn any_window_rebuilds_in_isolation() {
        let w = generate_world(5, &small()).unwrap();
        let spec = DatasetSpec {
            layout_noise: LayoutNoise { height_sigma: 1.0, dilation: 1 },
            pose_jitter: PoseJitter { position_m: 0.3, yaw_deg: 2.0 },
            ..tiny_spec(6, 4)
        };
        let all = build_dataset(&w, &spec, 21).unwrap();
        let lone = DatasetBuilder::new(&w, spec, 21).unwrap().window(4).unwrap();
        assert_eq!(lone, all[4]);
        assert!(lone.frames.iter().zip(&all[4].frames).all(|(a, b)| a.bit_eq(b)));
    }

    #[test]
    fn bad_dataset_specs() {
        let w = generate_world(5, &small()).unwrap();
        assert!(build_dataset(&w, &tiny_spec(0, 2), 0).is_err());
        assert!(build_dataset(&w, &tiny_spec(1, 3), 0).is_err());
        let jitter = DatasetSpec { pose_jitter: PoseJitter { position_m: 0.6, yaw_deg: 0.0 }, ..tiny_spec(1, 2) };
        assert!(matches!(build_dataset(&w, &jitter, 0), Err(Error::Config(_))));
    }

    #[test]
    fn dataset_directory_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let w = generate_world(5, &small()).unwrap();
        let spec = tiny_spec(3, 2);
        let created = DatasetDir::create(dir.path(), &w, &spec, 4).unwrap();
        let opened = DatasetDir::open(dir.path()).unwrap();
        assert_eq!(opened.manifest, created.manifest);
        let mem = build_dataset(&w, &spec, 4).unwrap();
        for (i, m) in mem.iter().enumerate() {
            let disk = opened.load_window(i).unwrap();
            assert_eq!(disk.style, m.style);
            assert_eq!(disk.gbuffers, m.gbuffers);
            for (a, b) in disk.cameras.iter().zip(&m.cameras) {
                assert!((a.position - b.position).norm() < 1e-4);
            }
            for (a, b) in disk.frames.iter().zip(&m.frames) {
                assert!(a.bit_eq(&crate::png::quantize(b)));
            }
        }
        assert!(opened.load_window(3).is_err());
    }

    #[test]
    fn manifest_rejects_malformed_text() {
        let m = DatasetManifest {
            world_seed: 1,
            world: WorldSpec::default(),
            dataset_seed: 2,
            spec: tiny_spec(2, 2),
            styles: vec![0, 3],
        };
        let text = m.to_text();
        assert_eq!(DatasetManifest::parse(&text).unwrap(), m);
        assert!(DatasetManifest::parse(&text.replace("STREETSET 1", "STREETSET 2")).is_err());
        assert!(DatasetManifest::parse(&text.replace("window 1 3", "window 1 9")).is_err());
        assert!(DatasetManifest::parse(&format!("{text}extra 1\n")).is_err());
        assert!(DatasetManifest::parse(&text[..text.len() / 2]).is_err());
    }
}
