use nalgebra::{Matrix3, Vector3};
use streetscape_core::tnsr::Tnsr;
use streetscape_core::{Error, Result};

use crate::layout::{CellClass, SceneLayout};

/// Pinhole intrinsics: horizontal field of view and image size.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Intrinsics {
    /// Horizontal field of view in radians.
    pub hfov: f64,
    pub width: usize,
    pub height: usize,
}

impl Intrinsics {
    pub fn new(hfov_deg: f64, width: usize, height: usize) -> Self {
        Self { hfov: hfov_deg.to_radians(), width, height }
    }

    /// Focal length in pixels.
    pub fn focal_px(&self) -> f64 {
        (self.width as f64 / 2.0) / (self.hfov / 2.0).tan()
    }

    pub fn center(&self) -> (f64, f64) {
        (self.width as f64 / 2.0, self.height as f64 / 2.0)
    }
}

impl Default for Intrinsics {
    fn default() -> Self {
        Self::new(60.0, 64, 64)
    }
}

/// Camera pose in the world frame (x east, y north, z up).
///
/// `yaw` rotates about +z starting from +x; `pitch` tilts the view up. The
/// camera frame is right/down/forward, so a pixel ray `((u−cx)/f, (v−cy)/f, 1)`
/// has unit forward component and its ray parameter equals z-depth.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CameraPose {
    pub position: Vector3<f64>,
    pub yaw: f64,
    pub pitch: f64,
    pub intrinsics: Intrinsics,
}

/// Number of floats in the serialized camera record.
pub const CAMERA_RECORD_LEN: usize = 8;

impl CameraPose {
    pub fn new(position: Vector3<f64>, yaw: f64, pitch: f64, intrinsics: Intrinsics) -> Self {
        Self { position, yaw, pitch, intrinsics }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.position.iter().all(|v| v.is_finite()) && self.yaw.is_finite()) {
            return Err(Error::contract("camera pose must be finite"));
        }
        if !(self.pitch.abs() < std::f64::consts::FRAC_PI_2) {
            return Err(Error::contract(format!("camera pitch {} must satisfy |pitch| < pi/2", self.pitch)));
        }
        if !(self.position.z > 0.0) {
            return Err(Error::contract("camera must be above the ground (z > 0)"));
        }
        let i = &self.intrinsics;
        if i.width == 0 || i.height == 0 || !(i.hfov > 0.0 && i.hfov < std::f64::consts::PI) {
            return Err(Error::contract("camera intrinsics are degenerate"));
        }
        Ok(())
    }

    /// Checks the pose against a layout: inside the grid and not inside a building.
    pub fn validate_in(&self, layout: &SceneLayout) -> Result<()> {
        self.validate()?;
        let (w, h) = layout.extent();
        let p = self.position;
        if p.x < 0.0 || p.y < 0.0 || p.x > w || p.y > h {
            return Err(Error::contract(format!("camera at ({:.3}, {:.3}) is outside the {w}x{h} m world", p.x, p.y)));
        }
        let col = ((p.x / layout.cell_size()) as usize).min(layout.width() - 1);
        let row = ((p.y / layout.cell_size()) as usize).min(layout.height() - 1);
        if layout.class_at(col, row) == CellClass::Building && p.z <= layout.height_at(col, row) {
            return Err(Error::contract("camera is inside a building"));
        }
        Ok(())
    }

    pub fn forward(&self) -> Vector3<f64> {
        let (sy, cy) = self.yaw.sin_cos();
        let (sp, cp) = self.pitch.sin_cos();
        Vector3::new(cp * cy, cp * sy, sp)
    }

    pub fn right(&self) -> Vector3<f64> {
        let (sy, cy) = self.yaw.sin_cos();
        Vector3::new(sy, -cy, 0.0)
    }

    pub fn down(&self) -> Vector3<f64> {
        self.forward().cross(&self.right())
    }

    /// Rotation taking camera-frame vectors to world vectors.
    pub fn world_from_camera(&self) -> Matrix3<f64> {
        Matrix3::from_columns(&[self.right(), self.down(), self.forward()])
    }

    /// World-space ray direction through pixel coordinates `(u, v)`
    /// (pixel centers at half-integers), scaled to unit forward component.
    pub fn pixel_ray(&self, u: f64, v: f64) -> Vector3<f64> {
        let f = self.intrinsics.focal_px();
        let (cx, cy) = self.intrinsics.center();
        self.world_from_camera() * Vector3::new((u - cx) / f, (v - cy) / f, 1.0)
    }

    /// Projects a world point to `(u, v, depth)`; `None` behind the camera.
    pub fn project(&self, point: &Vector3<f64>) -> Option<(f64, f64, f64)> {
        let p = self.world_from_camera().transpose() * (point - self.position);
        if p.z <= 1e-9 {
            return None;
        }
        let f = self.intrinsics.focal_px();
        let (cx, cy) = self.intrinsics.center();
        Some((cx + f * p.x / p.z, cy + f * p.y / p.z, p.z))
    }

    /// `[x, y, z, yaw, pitch, hfov, width, height]` as stored in TNSR files.
    pub fn to_record(&self) -> [f32; CAMERA_RECORD_LEN] {
        let p = self.position;
        let i = self.intrinsics;
        [
            p.x as f32,
            p.y as f32,
            p.z as f32,
            self.yaw as f32,
            self.pitch as f32,
            i.hfov as f32,
            i.width as f32,
            i.height as f32,
        ]
    }

    pub fn from_record(r: &[f32]) -> Result<Self> {
        if r.len() != CAMERA_RECORD_LEN {
            return Err(Error::format(format!("camera record needs {CAMERA_RECORD_LEN} values")));
        }
        let size = |v: f32| {
            if v.is_finite() && (1.0..=65536.0).contains(&v) && v.fract() == 0.0 {
                Ok(v as usize)
            } else {
                Err(Error::format(format!("camera record: bad image size {v}")))
            }
        };
        let cam = Self {
            position: Vector3::new(r[0] as f64, r[1] as f64, r[2] as f64),
            yaw: r[3] as f64,
            pitch: r[4] as f64,
            intrinsics: Intrinsics { hfov: r[5] as f64, width: size(r[6])?, height: size(r[7])? },
        };
        cam.validate().map_err(|e| Error::format(e.to_string()))?;
        Ok(cam)
    }
}

pub fn cameras_to_tnsr(cams: &[CameraPose]) -> Tnsr {
    let data = cams.iter().flat_map(|c| c.to_record()).collect();
    Tnsr::new(vec![cams.len(), CAMERA_RECORD_LEN], data).expect("record length is fixed")
}

pub fn cameras_from_tnsr(t: &Tnsr) -> Result<Vec<CameraPose>> {
    if t.dims.len() != 2 || t.dims[1] != CAMERA_RECORD_LEN {
        return Err(Error::format(format!("camera tensor must be Nx{CAMERA_RECORD_LEN}, got {:?}", t.dims)));
    }
    t.data.chunks_exact(CAMERA_RECORD_LEN).map(CameraPose::from_record).collect()
}

/// Rigid transform `p ↦ R·p + t`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RigidTransform {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self { rotation: Matrix3::identity(), translation: Vector3::zeros() }
    }

    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// `self` followed by `next`.
    pub fn then(&self, next: &RigidTransform) -> RigidTransform {
        RigidTransform {
            rotation: next.rotation * self.rotation,
            translation: next.rotation * self.translation + next.translation,
        }
    }

    pub fn inverse(&self) -> RigidTransform {
        let rt = self.rotation.transpose();
        RigidTransform { rotation: rt, translation: -(rt * self.translation) }
    }

    pub fn max_abs_diff(&self, other: &RigidTransform) -> f64 {
        let r = (self.rotation - other.rotation).abs().max();
        let t = (self.translation - other.translation).abs().max();
        r.max(t)
    }
}

/// Transform from camera-`a` coordinates to camera-`b` coordinates.
pub fn relative_pose(a: &CameraPose, b: &CameraPose) -> RigidTransform {
    let ra = a.world_from_camera();
    let rb_t = b.world_from_camera().transpose();
    RigidTransform { rotation: rb_t * ra, translation: rb_t * (a.position - b.position) }
}
