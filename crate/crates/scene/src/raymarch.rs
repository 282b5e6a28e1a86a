//! Fixed-step ray marching: a deliberately naive reference for
//! [`render_gbuffer`](crate::render_gbuffer), used by tests and the self test.

use nalgebra::Vector3;
use streetscape_core::{Error, Result};

use crate::camera::CameraPose;
use crate::gbuffer::{GBuffer, Hit, Surface};
use crate::layout::{CellClass, SceneLayout};

/// Marches each pixel ray in increments of `step` meters inside the grid and
/// reports the first sample found below the ground or inside a building.
pub fn raymarch_reference(layout: &SceneLayout, camera: &CameraPose, step: f64) -> Result<GBuffer> {
    if !(step > 0.0 && step <= 0.05 * layout.cell_size()) {
        return Err(Error::contract(format!("raymarch step {step} must be in (0, {}]", 0.05 * layout.cell_size())));
    }
    camera.validate_in(layout)?;
    let (w, h) = (camera.intrinsics.width, camera.intrinsics.height);
    let mut hits = Vec::with_capacity(w * h);
    for v in 0..h {
        for u in 0..w {
            let dir = camera.pixel_ray(u as f64 + 0.5, v as f64 + 0.5);
            hits.push(march(layout, &camera.position, &dir, step));
        }
    }
    Ok(GBuffer::from_hits(camera, &hits))
}

fn march(layout: &SceneLayout, origin: &Vector3<f64>, dir: &Vector3<f64>, step: f64) -> Hit {
    let unit = dir.normalize();
    let scale = dir.norm();
    let max_h = layout.max_height();
    let mut prev: Option<((usize, usize), f64)> = None;
    let mut s = 0.0;
    loop {
        let p = origin + unit * s;
        let cell = layout.cell_of(p.x, p.y);
        if p.z <= 0.0 {
            return ground_hit(layout, origin, dir, s / scale, cell);
        }
        let Some((col, row)) = cell else {
            // Past the grid only the ground plane remains.
            return if unit.z < 0.0 {
                let t = -origin.z / dir.z;
                Hit { surface: Surface::Ground { class: CellClass::OpenGround }, t, point: origin + dir * t }
            } else {
                sky()
            };
        };
        if unit.z >= 0.0 && p.z > max_h {
            return sky();
        }
        let height = layout.height_at(col, row);
        if layout.class_at(col, row) == CellClass::Building && p.z <= height {
            let t = s / scale;
            let surface = match prev {
                Some((prev_cell, prev_z)) if prev_cell == (col, row) && prev_z > height => {
                    Surface::Roof { cell: (col, row) }
                }
                _ => Surface::Wall { cell: (col, row), normal: -unit.xy().normalize().push(0.0) },
            };
            return Hit { surface, t, point: origin + dir * t };
        }
        prev = Some(((col, row), p.z));
        s += step;
    }
}

fn sky() -> Hit {
    Hit { surface: Surface::Sky, t: f64::INFINITY, point: Vector3::zeros() }
}

fn ground_hit(
    layout: &SceneLayout,
    origin: &Vector3<f64>,
    dir: &Vector3<f64>,
    t: f64,
    cell: Option<(usize, usize)>,
) -> Hit {
    let class = match cell {
        Some((c, r)) => layout.class_at(c, r),
        None => CellClass::OpenGround,
    };
    Hit { surface: Surface::Ground { class }, t, point: origin + dir * t }
}
