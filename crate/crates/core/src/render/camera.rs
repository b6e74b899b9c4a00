use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::geometry::RigidTransform;

/// Pinhole camera with OpenCV axes (x right, y down, z forward).
/// Pixel `(px, py)` has its center at `(px + 0.5, py + 0.5)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(into = "CameraJson", from = "CameraJson")]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    pub world_to_cam: RigidTransform,
    pub near: f64,
    pub far: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CameraJson {
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    width: usize,
    height: usize,
    /// Row-major world-to-camera rotation.
    rotation: [[f64; 3]; 3],
    translation: [f64; 3],
    near: f64,
    far: f64,
}

impl From<Camera> for CameraJson {
    fn from(c: Camera) -> Self {
        let r = c.world_to_cam.linear;
        Self {
            fx: c.fx,
            fy: c.fy,
            cx: c.cx,
            cy: c.cy,
            width: c.width,
            height: c.height,
            rotation: [0, 1, 2].map(|i| [r[(i, 0)], r[(i, 1)], r[(i, 2)]]),
            translation: c.world_to_cam.translation.into(),
            near: c.near,
            far: c.far,
        }
    }
}

impl From<CameraJson> for Camera {
    fn from(j: CameraJson) -> Self {
        Self {
            fx: j.fx,
            fy: j.fy,
            cx: j.cx,
            cy: j.cy,
            width: j.width,
            height: j.height,
            world_to_cam: RigidTransform::new(
                Matrix3::from_fn(|i, k| j.rotation[i][k]),
                Vector3::from(j.translation),
            ),
            near: j.near,
            far: j.far,
        }
    }
}

impl Camera {
    /// Camera at `eye` looking at `target`; `up` is the approximate world up.
    pub fn look_at(
        eye: Vector3<f64>,
        target: Vector3<f64>,
        up: Vector3<f64>,
        width: usize,
        height: usize,
        focal: f64,
    ) -> Self {
        let forward = (target - eye).normalize();
        let right = forward.cross(&up).normalize();
        let down = forward.cross(&right);
        let r = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        Self {
            fx: focal,
            fy: focal,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            width,
            height,
            world_to_cam: RigidTransform::new(r, -(r * eye)),
            near: 0.01,
            far: 100.0,
        }
    }

    pub fn center(&self) -> Vector3<f64> {
        -(self.world_to_cam.linear.transpose() * self.world_to_cam.translation)
    }

    pub fn pixels(&self) -> usize {
        self.width * self.height
    }

    /// Projects a world point to pixel coordinates; `None` behind the near plane.
    pub fn project_point(&self, p: &Vector3<f64>) -> Option<(f64, f64, f64)> {
        let t = self.world_to_cam.apply_point(p);
        (t.z > self.near).then(|| {
            (
                self.fx * t.x / t.z + self.cx,
                self.fy * t.y / t.z + self.cy,
                t.z,
            )
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn look_at_centers_target() {
        let c = Camera::look_at(
            Vector3::new(0.0, 0.5, 3.0),
            Vector3::new(0.0, 0.5, 0.0),
            Vector3::y(),
            64,
            48,
            70.0,
        );
        let (u, v, z) = c.project_point(&Vector3::new(0.0, 0.5, 0.0)).unwrap();
        assert!((u - 32.0).abs() < 1e-12 && (v - 24.0).abs() < 1e-12 && (z - 3.0).abs() < 1e-12);
        assert!((c.center() - Vector3::new(0.0, 0.5, 3.0)).norm() < 1e-12);
        let (_, v_up, _) = c.project_point(&Vector3::new(0.0, 1.0, 0.0)).unwrap();
        assert!(v_up < 24.0, "world up maps to smaller row index");
    }

    #[test]
    fn json_round_trip() {
        let c = Camera::look_at(
            Vector3::new(1.0, 2.0, 3.0),
            Vector3::zeros(),
            Vector3::y(),
            8,
            8,
            10.0,
        );
        let s = serde_json::to_string(&c).unwrap();
        let back: Camera = serde_json::from_str(&s).unwrap();
        assert_eq!(c, back);
    }
}
