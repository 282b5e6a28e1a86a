use nalgebra::Vector3;
use streetscape_core::{Error, ImageTensor, Result};

use crate::camera::CameraPose;
use crate::layout::{CellClass, SceneLayout};
use crate::{D_NEAR, H_MAX};

/// Screen-space semantic classes, in one-hot channel order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum ScreenClass {
    Sky = 0,
    /// Road, sidewalk and open ground share one label.
    Ground = 1,
    Wall = 2,
    Roof = 3,
}

pub const SCREEN_CLASSES: usize = 4;
/// One-hot classes plus disparity and height.
pub const GBUFFER_CHANNELS: usize = SCREEN_CLASSES + 2;

impl ScreenClass {
    pub fn from_id(id: usize) -> Option<Self> {
        match id {
            0 => Some(Self::Sky),
            1 => Some(Self::Ground),
            2 => Some(Self::Wall),
            3 => Some(Self::Roof),
            _ => None,
        }
    }
}

/// What a ray hit first.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Surface {
    Sky,
    /// Ground plane; outside the grid the plane continues as open ground.
    Ground {
        class: CellClass,
    },
    /// Vertical building face with its outward normal.
    Wall {
        cell: (usize, usize),
        normal: Vector3<f64>,
    },
    Roof {
        cell: (usize, usize),
    },
}

impl Surface {
    pub fn screen_class(&self) -> ScreenClass {
        match self {
            Surface::Sky => ScreenClass::Sky,
            Surface::Ground { .. } => ScreenClass::Ground,
            Surface::Wall { .. } => ScreenClass::Wall,
            Surface::Roof { .. } => ScreenClass::Roof,
        }
    }

    pub fn normal(&self) -> Vector3<f64> {
        match self {
            Surface::Wall { normal, .. } => *normal,
            _ => Vector3::z(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Hit {
    pub surface: Surface,
    /// Ray parameter of the hit (`f64::INFINITY` for sky).
    pub t: f64,
    pub point: Vector3<f64>,
}

impl Hit {
    fn sky() -> Self {
        Hit { surface: Surface::Sky, t: f64::INFINITY, point: Vector3::zeros() }
    }

    fn at(surface: Surface, t: f64, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Self {
        Hit { surface, t, point: origin + dir * t }
    }
}

#[derive(Clone, Copy)]
enum Axis {
    X,
    Y,
}

/// Hit beyond the grid: no buildings, only the ground plane.
fn beyond_grid(origin: &Vector3<f64>, dir: &Vector3<f64>) -> Hit {
    if dir.z < 0.0 {
        let t = -origin.z / dir.z;
        Hit::at(Surface::Ground { class: CellClass::OpenGround }, t, origin, dir)
    } else {
        Hit::sky()
    }
}

/// Exact first intersection of a ray with the extruded heightfield, by
/// Amanatides–Woo traversal of the overhead grid. Each visited cell is
/// tested over the ray interval it covers: a building is hit on its side if
/// the ray enters the cell below the roof, on its roof if it descends through
/// the roof height inside the cell. The origin must lie above the grid.
pub fn trace_ray(layout: &SceneLayout, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Hit {
    let cs = layout.cell_size();
    let (w, h) = (layout.width() as isize, layout.height() as isize);
    let mut col = ((origin.x / cs).floor() as isize).clamp(0, w - 1);
    let mut row = ((origin.y / cs).floor() as isize).clamp(0, h - 1);
    let max_h = layout.max_height();

    let setup = |o: f64, d: f64, cell: isize| -> (isize, f64, f64) {
        if d > 0.0 {
            (1, ((cell + 1) as f64 * cs - o) / d, cs / d)
        } else if d < 0.0 {
            (-1, (cell as f64 * cs - o) / d, -cs / d)
        } else {
            (0, f64::INFINITY, f64::INFINITY)
        }
    };
    let (step_x, mut t_max_x, t_delta_x) = setup(origin.x, dir.x, col);
    let (step_y, mut t_max_y, t_delta_y) = setup(origin.y, dir.y, row);

    let mut t_enter = 0.0f64;
    let mut entered_via: Option<Axis> = None;
    loop {
        let t_exit = t_max_x.min(t_max_y);
        let (c, r) = (col as usize, row as usize);
        let class = layout.class_at(c, r);
        let height = layout.height_at(c, r);
        if class == CellClass::Building && height > 0.0 {
            let z_enter = origin.z + dir.z * t_enter;
            if z_enter <= height && t_enter > 0.0 {
                let normal = match entered_via {
                    Some(Axis::X) => Vector3::new(-step_x as f64, 0.0, 0.0),
                    Some(Axis::Y) => Vector3::new(0.0, -step_y as f64, 0.0),
                    None => Vector3::z(),
                };
                return Hit::at(Surface::Wall { cell: (c, r), normal }, t_enter, origin, dir);
            }
            if dir.z < 0.0 {
                let t_roof = (height - origin.z) / dir.z;
                if t_roof <= t_exit {
                    return Hit::at(Surface::Roof { cell: (c, r) }, t_roof.max(t_enter), origin, dir);
                }
            }
        } else if dir.z < 0.0 {
            let t_ground = -origin.z / dir.z;
            if t_ground <= t_exit {
                return Hit::at(Surface::Ground { class }, t_ground, origin, dir);
            }
        }
        if dir.z >= 0.0 && origin.z + dir.z * t_exit > max_h {
            return Hit::sky();
        }
        if t_max_x < t_max_y {
            col += step_x;
            t_enter = t_max_x;
            t_max_x += t_delta_x;
            entered_via = Some(Axis::X);
        } else {
            row += step_y;
            t_enter = t_max_y;
            t_max_y += t_delta_y;
            entered_via = Some(Axis::Y);
        }
        if col < 0 || row < 0 || col >= w || row >= h || !t_enter.is_finite() {
            return beyond_grid(origin, dir);
        }
    }
}

/// Traces every pixel of `camera`; row-major hits.
pub fn render_hits(layout: &SceneLayout, camera: &CameraPose) -> Result<Vec<Hit>> {
    camera.validate_in(layout)?;
    let (w, h) = (camera.intrinsics.width, camera.intrinsics.height);
    let mut hits = Vec::with_capacity(w * h);
    for v in 0..h {
        for u in 0..w {
            let dir = camera.pixel_ray(u as f64 + 0.5, v as f64 + 0.5);
            hits.push(trace_ray(layout, &camera.position, &dir));
        }
    }
    Ok(hits)
}

/// Screen-space conditioning buffers for one camera.
#[derive(Clone, Debug, PartialEq)]
pub struct GBuffer {
    width: usize,
    height: usize,
    classes: Vec<ScreenClass>,
    disparity: Vec<f32>,
    heights: Vec<f32>,
}

/// `clamp(D_NEAR / depth, 0, 1)`.
pub fn disparity_of_depth(depth: f64) -> f32 {
    if depth.is_finite() && depth > 0.0 {
        (D_NEAR / depth).clamp(0.0, 1.0) as f32
    } else {
        0.0
    }
}

impl GBuffer {
    /// Builds a G-buffer from per-pixel hits seen by `camera`.
    pub fn from_hits(camera: &CameraPose, hits: &[Hit]) -> Self {
        let forward = camera.forward();
        let mut classes = Vec::with_capacity(hits.len());
        let mut disparity = Vec::with_capacity(hits.len());
        let mut heights = Vec::with_capacity(hits.len());
        for hit in hits {
            let class = hit.surface.screen_class();
            classes.push(class);
            if class == ScreenClass::Sky {
                disparity.push(0.0);
                heights.push(0.0);
            } else {
                let depth = (hit.point - camera.position).dot(&forward);
                disparity.push(disparity_of_depth(depth));
                heights.push((hit.point.z.max(0.0) / H_MAX).clamp(0.0, 1.0) as f32);
            }
        }
        Self { width: camera.intrinsics.width, height: camera.intrinsics.height, classes, disparity, heights }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn classes(&self) -> &[ScreenClass] {
        &self.classes
    }

    pub fn disparity(&self) -> &[f32] {
        &self.disparity
    }

    pub fn heights(&self) -> &[f32] {
        &self.heights
    }

    pub fn class_at(&self, x: usize, y: usize) -> ScreenClass {
        self.classes[y * self.width + x]
    }

    pub fn disparity_at(&self, x: usize, y: usize) -> f32 {
        self.disparity[y * self.width + x]
    }

    /// Depth recovered from disparity, `None` for zero disparity (sky).
    pub fn depth_at(&self, x: usize, y: usize) -> Option<f64> {
        let d = self.disparity_at(x, y);
        (d > 0.0).then(|| D_NEAR / d as f64)
    }

    /// Channel stack: one-hot `[sky, ground, wall, roof]`, disparity, height.
    pub fn to_tensor(&self) -> ImageTensor {
        let (w, h) = (self.width, self.height);
        let mut t = ImageTensor::zeros(GBUFFER_CHANNELS, h, w);
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                t.set(self.classes[i] as usize, y, x, 1.0);
                t.set(SCREEN_CLASSES, y, x, self.disparity[i]);
                t.set(SCREEN_CLASSES + 1, y, x, self.heights[i]);
            }
        }
        t
    }

    pub fn from_tensor(t: &ImageTensor) -> Result<Self> {
        let (c, h, w) = t.shape();
        if c != GBUFFER_CHANNELS {
            return Err(Error::format(format!("G-buffer needs {GBUFFER_CHANNELS} channels, got {c}")));
        }
        let mut classes = Vec::with_capacity(w * h);
        let mut disparity = Vec::with_capacity(w * h);
        let mut heights = Vec::with_capacity(w * h);
        for y in 0..h {
            for x in 0..w {
                let hot: Vec<usize> = (0..SCREEN_CLASSES).filter(|&k| t.get(k, y, x) == 1.0).collect();
                let sum: f32 = (0..SCREEN_CLASSES).map(|k| t.get(k, y, x)).sum();
                if hot.len() != 1 || sum != 1.0 {
                    return Err(Error::format(format!("G-buffer pixel ({x}, {y}) is not one-hot")));
                }
                let d = t.get(SCREEN_CLASSES, y, x);
                let hh = t.get(SCREEN_CLASSES + 1, y, x);
                if !(0.0..=1.0).contains(&d) || !(0.0..=1.0).contains(&hh) {
                    return Err(Error::format(format!("G-buffer pixel ({x}, {y}) out of [0, 1]")));
                }
                classes.push(ScreenClass::from_id(hot[0]).unwrap());
                disparity.push(d);
                heights.push(hh);
            }
        }
        Ok(Self { width: w, height: h, classes, disparity, heights })
    }

    /// Fraction of pixels with equal class labels.
    pub fn semantic_agreement(&self, other: &GBuffer) -> f64 {
        let same = self.classes.iter().zip(&other.classes).filter(|(a, b)| a == b).count();
        same as f64 / self.classes.len() as f64
    }

    pub fn disparity_mae(&self, other: &GBuffer) -> f64 {
        let sum: f64 = self.disparity.iter().zip(&other.disparity).map(|(a, b)| (a - b).abs() as f64).sum();
        sum / self.disparity.len() as f64
    }
}

/// Renders the conditioning G-buffer of `camera` by exact grid traversal.
pub fn render_gbuffer(layout: &SceneLayout, camera: &CameraPose) -> Result<GBuffer> {
    let hits = render_hits(layout, camera)?;
    Ok(GBuffer::from_hits(camera, &hits))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::Intrinsics;

    fn level_cam(x: f64, y: f64, yaw: f64) -> CameraPose {
        CameraPose::new(Vector3::new(x, y, 2.0), yaw, 0.0, Intrinsics::default())
    }

    #[test]
    fn flat_world_halves() {
        let layout = SceneLayout::filled(64, 64, 1.0, CellClass::Road).unwrap();
        let cam = level_cam(32.0, 32.0, 0.3);
        let g = render_gbuffer(&layout, &cam).unwrap();
        let f = cam.intrinsics.focal_px();
        for y in 0..64 {
            for x in 0..64 {
                if y < 32 {
                    assert_eq!(g.class_at(x, y), ScreenClass::Sky);
                    assert_eq!(g.disparity_at(x, y), 0.0);
                } else {
                    assert_eq!(g.class_at(x, y), ScreenClass::Ground);
                    // Ground z-depth on a row of a level camera: h·f/(v − cy).
                    let depth = 2.0 * f / (y as f64 + 0.5 - 32.0);
                    let expected = (2.0 / depth).clamp(0.0, 1.0);
                    assert!((g.disparity_at(x, y) as f64 - expected).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn looking_up_sees_only_sky() {
        let layout = SceneLayout::filled(64, 64, 1.0, CellClass::Road).unwrap();
        let cam = CameraPose::new(Vector3::new(10.0, 10.0, 2.0), 0.0, 45f64.to_radians(), Intrinsics::default());
        let g = render_gbuffer(&layout, &cam).unwrap();
        assert!(g.classes().iter().all(|&c| c == ScreenClass::Sky));
        assert!(g.disparity().iter().all(|&d| d == 0.0));
    }

    /// A 10 m tall, 4 m wide prism whose front face is 10 m ahead.
    fn building_ahead() -> (SceneLayout, CameraPose) {
        let mut layout = SceneLayout::filled(64, 64, 1.0, CellClass::Road).unwrap();
        for col in 30..34 {
            for row in 30..34 {
                layout.set_cell(col, row, CellClass::Building, 10.0);
            }
        }
        (layout, level_cam(20.0, 32.0, 0.0))
    }

    #[test]
    fn single_building_matches_pinhole_projection() {
        let (layout, cam) = building_ahead();
        let g = render_gbuffer(&layout, &cam).unwrap();
        let f = cam.intrinsics.focal_px();
        // Face spans y in [30, 34] at depth 10: lateral offsets ±2 m.
        let u_lo = 32.0 - f * 2.0 / 10.0;
        let u_hi = 32.0 + f * 2.0 / 10.0;
        // Face spans z in [0, 10] seen from z = 2: rows from above the top
        // of the image down to cy + f·2/10.
        let v_hi = 32.0 + f * 2.0 / 10.0;
        for y in 0..64 {
            for x in 0..64 {
                let (u, v) = (x as f64 + 0.5, y as f64 + 0.5);
                let inside = u > u_lo && u < u_hi && v < v_hi;
                let class = g.class_at(x, y);
                assert_eq!(class == ScreenClass::Wall, inside, "pixel ({x}, {y})");
                if inside {
                    assert!((g.disparity_at(x, y) - 0.2).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn roofs_seen_from_above() {
        let (layout, _) = building_ahead();
        let cam = CameraPose::new(Vector3::new(20.0, 32.0, 20.0), 0.0, -0.6, Intrinsics::default());
        let g = render_gbuffer(&layout, &cam).unwrap();
        assert!(g.classes().contains(&ScreenClass::Roof));
        assert!(g.classes().contains(&ScreenClass::Wall));
        for (i, &c) in g.classes().iter().enumerate() {
            if c == ScreenClass::Roof {
                assert!((g.heights()[i] - 10.0 / 30.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn sky_pixels_are_exactly_zero() {
        let (layout, cam) = building_ahead();
        let t = render_gbuffer(&layout, &cam).unwrap().to_tensor();
        for y in 0..64 {
            for x in 0..64 {
                let one_hot: f32 = (0..4).map(|k| t.get(k, y, x)).sum();
                assert_eq!(one_hot, 1.0);
                if t.get(0, y, x) == 1.0 {
                    assert_eq!(t.get(4, y, x), 0.0);
                    assert_eq!(t.get(5, y, x), 0.0);
                }
            }
        }
        assert_eq!(GBuffer::from_tensor(&t).unwrap().to_tensor(), t);
    }

    #[test]
    fn camera_outside_is_contract_error() {
        let layout = SceneLayout::filled(8, 8, 1.0, CellClass::Road).unwrap();
        let cam = level_cam(9.0, 4.0, 0.0);
        assert!(matches!(render_gbuffer(&layout, &cam), Err(Error::Contract(_))));
    }
}
