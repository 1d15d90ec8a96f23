//! Pinhole multi-camera rig and box projection.
//!
//! World frame: x forward, y left, z up (ego vehicle at the origin).
//! Camera frame: x right, y down, z forward. Extrinsics map world to camera.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkernel::Tensor;

/// Near plane in meters; points at or in front of it are invalid.
pub const EPS_DEPTH: f64 = 0.1;

pub type Mat4 = [[f64; 4]; 4];
pub type Vec3 = [f64; 3];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub extrinsic: Mat4,
    pub intrinsic: Intrinsics,
    pub width: f64,
    pub height: f64,
}

impl Camera {
    pub fn new(extrinsic: Mat4, intrinsic: Intrinsics, width: f64, height: f64) -> Result<Self> {
        let cam = Self {
            extrinsic,
            intrinsic,
            width,
            height,
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<()> {
        let e = &self.extrinsic;
        if e.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("camera extrinsic"));
        }
        for i in 0..3 {
            for j in 0..3 {
                let d: f64 = (0..3).map(|k| e[i][k] * e[j][k]).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                if (d - want).abs() > 1e-9 {
                    return Err(Error::invalid("extrinsic rotation is not orthonormal"));
                }
            }
        }
        if det3(e) < 0.0 {
            return Err(Error::invalid("extrinsic rotation has det -1"));
        }
        if e[3] != [0.0, 0.0, 0.0, 1.0] {
            return Err(Error::invalid("extrinsic bottom row must be (0, 0, 0, 1)"));
        }
        let k = &self.intrinsic;
        if !(k.fx > 0.0 && k.fy > 0.0) || !(self.width > 0.0 && self.height > 0.0) {
            return Err(Error::invalid("focal lengths and image size must be positive"));
        }
        Ok(())
    }
}

fn det3(m: &Mat4) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

pub fn transform_point(m: &Mat4, p: Vec3) -> Vec3 {
    let mut out = [0.0; 3];
    for (i, o) in out.iter_mut().enumerate() {
        *o = m[i][0] * p[0] + m[i][1] * p[1] + m[i][2] * p[2] + m[i][3];
    }
    out
}

pub fn compose(a: &Mat4, b: &Mat4) -> Mat4 {
    let mut out = [[0.0; 4]; 4];
    for i in 0..4 {
        for j in 0..4 {
            out[i][j] = (0..4).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

/// Inverse of a rigid transform: `[Rᵀ | −Rᵀt]`.
pub fn rigid_inverse(m: &Mat4) -> Mat4 {
    let mut out = [[0.0; 4]; 4];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = m[j][i];
        }
        out[i][3] = -(0..3).map(|k| m[k][i] * m[k][3]).sum::<f64>();
    }
    out[3][3] = 1.0;
    out
}

/// Rotation about world z by `yaw` followed by translation.
pub fn yaw_transform(yaw: f64, translation: Vec3) -> Mat4 {
    let (s, c) = yaw.sin_cos();
    [
        [c, -s, 0.0, translation[0]],
        [s, c, 0.0, translation[1]],
        [0.0, 0.0, 1.0, translation[2]],
        [0.0, 0.0, 0.0, 1.0],
    ]
}

pub const IDENTITY: Mat4 = [
    [1.0, 0.0, 0.0, 0.0],
    [0.0, 1.0, 0.0, 0.0],
    [0.0, 0.0, 1.0, 0.0],
    [0.0, 0.0, 0.0, 1.0],
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Box3D {
    pub center: Vec3,
    /// (l, w, h): extent along heading, across heading, vertical.
    pub size: Vec3,
    pub yaw: f64,
    pub class_id: usize,
}

impl Box3D {
    pub fn new(center: Vec3, size: Vec3, yaw: f64, class_id: usize) -> Result<Self> {
        if size.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::invalid("box sizes must be positive"));
        }
        if !(yaw > -PI && yaw <= PI) || center.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("box yaw {yaw} outside (-pi, pi] or bad center")));
        }
        Ok(Self {
            center,
            size,
            yaw,
            class_id,
        })
    }

    /// Maps box-local coordinates (in units of half-extent, each in [-1, 1]) to world.
    pub fn local_to_world(&self, a: f64, b: f64, c: f64) -> Vec3 {
        let (s, co) = self.yaw.sin_cos();
        let (dx, dy, dz) = (a * self.size[0] / 2.0, b * self.size[1] / 2.0, c * self.size[2] / 2.0);
        [
            self.center[0] + co * dx - s * dy,
            self.center[1] + s * dx + co * dy,
            self.center[2] + dz,
        ]
    }
}

/// Corner `i` has local signs `(bit 2, bit 1, bit 0)` of `i` along (l, w, h),
/// with a clear bit meaning the negative side. Corner 0 is (−,−,−), corner 7 is (+,+,+).
pub fn box_corners(b: &Box3D) -> [Vec3; 8] {
    let sign = |bit: usize| if bit == 1 { 1.0 } else { -1.0 };
    std::array::from_fn(|i| b.local_to_world(sign((i >> 2) & 1), sign((i >> 1) & 1), sign(i & 1)))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Projection {
    pub u: f64,
    pub v: f64,
    pub depth: f64,
    pub valid: bool,
}

pub fn project_point(p: Vec3, cam: &Camera) -> Projection {
    let pc = transform_point(&cam.extrinsic, p);
    let depth = pc[2];
    if depth <= EPS_DEPTH {
        return Projection {
            u: f64::NAN,
            v: f64::NAN,
            depth,
            valid: false,
        };
    }
    let k = &cam.intrinsic;
    Projection {
        u: k.fx * pc[0] / depth + k.cx,
        v: k.fy * pc[1] / depth + k.cy,
        depth,
        valid: true,
    }
}

pub fn project_to_camera(points: &[Vec3], cam: &Camera) -> Vec<Projection> {
    points.iter().map(|&p| project_point(p, cam)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CropRect {
    pub camera: usize,
    pub u_min: f64,
    pub v_min: f64,
    pub u_max: f64,
    pub v_max: f64,
    pub depth: f64,
}

impl CropRect {
    pub fn width(&self) -> f64 {
        self.u_max - self.u_min
    }

    pub fn height(&self) -> f64 {
        self.v_max - self.v_min
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn contains(&self, other: &CropRect, tol: f64) -> bool {
        other.u_min >= self.u_min - tol
            && other.v_min >= self.v_min - tol
            && other.u_max <= self.u_max + tol
            && other.v_max <= self.v_max + tol
    }
}

/// Clamped bounding rectangle of the valid projections, or `None` with fewer
/// than two valid points or under one square pixel of area.
pub fn rect_from_projections(proj: &[Projection], cam: &Camera, camera: usize) -> Option<CropRect> {
    let valid: Vec<&Projection> = proj.iter().filter(|p| p.valid).collect();
    if valid.len() < 2 {
        return None;
    }
    let fold = |f: fn(&Projection) -> f64, init: f64, pick: fn(f64, f64) -> f64| {
        valid.iter().map(|p| f(p)).fold(init, pick)
    };
    let u_min = fold(|p| p.u, f64::INFINITY, f64::min).clamp(0.0, cam.width);
    let u_max = fold(|p| p.u, f64::NEG_INFINITY, f64::max).clamp(0.0, cam.width);
    let v_min = fold(|p| p.v, f64::INFINITY, f64::min).clamp(0.0, cam.height);
    let v_max = fold(|p| p.v, f64::NEG_INFINITY, f64::max).clamp(0.0, cam.height);
    let rect = CropRect {
        camera,
        u_min,
        v_min,
        u_max,
        v_max,
        depth: valid.iter().map(|p| p.depth).sum::<f64>() / valid.len() as f64,
    };
    (rect.width() > 0.0 && rect.height() > 0.0 && rect.area() >= 1.0).then_some(rect)
}

pub fn crop_rect(b: &Box3D, cam: &Camera, camera: usize) -> Option<CropRect> {
    rect_from_projections(&project_to_camera(&box_corners(b), cam), cam, camera)
}

/// Every camera of the rig that sees the box, in camera order.
pub fn visible_crops(b: &Box3D, rig: &[Camera]) -> Vec<CropRect> {
    rig.iter()
        .enumerate()
        .filter_map(|(i, cam)| crop_rect(b, cam, i))
        .collect()
}

pub fn flatten_extrinsics(rig: &[Camera]) -> Result<Tensor> {
    if rig.is_empty() {
        return Err(Error::invalid("rig needs at least one camera"));
    }
    let data: Vec<f64> = rig.iter().flat_map(|c| c.extrinsic.iter().flatten().copied()).collect();
    Tensor::matrix(rig.len(), 16, data)
}

pub fn unflatten_extrinsics(e: &Tensor) -> Result<Vec<Mat4>> {
    if e.cols() != 16 {
        return Err(Error::shape("unflatten_extrinsics", e.shape(), &[e.rows(), 16]));
    }
    Ok((0..e.rows())
        .map(|r| {
            let row = e.row(r);
            std::array::from_fn(|i| std::array::from_fn(|j| row[i * 4 + j]))
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RigConfig {
    pub num_cameras: usize,
    pub mount_height: f64,
    pub mount_radius: f64,
    pub width: f64,
    pub height: f64,
    pub focal: f64,
}

impl Default for RigConfig {
    fn default() -> Self {
        Self {
            num_cameras: 6,
            mount_height: 1.6,
            mount_radius: 0.5,
            width: 320.0,
            height: 192.0,
            focal: 220.0,
        }
    }
}

/// Cameras evenly spaced in heading (60° apart for six), each looking
/// horizontally outward from a ring around the ego origin.
pub fn build_rig(cfg: &RigConfig) -> Result<Vec<Camera>> {
    if cfg.num_cameras == 0 {
        return Err(Error::invalid("rig needs at least one camera"));
    }
    (0..cfg.num_cameras)
        .map(|i| {
            let heading = 2.0 * PI * i as f64 / cfg.num_cameras as f64;
            let (s, c) = heading.sin_cos();
            let forward = [c, s, 0.0];
            let right = [s, -c, 0.0];
            let down = [0.0, 0.0, -1.0];
            let pos = [cfg.mount_radius * c, cfg.mount_radius * s, cfg.mount_height];
            let mut ext = IDENTITY;
            for (row, axis) in [right, down, forward].iter().enumerate() {
                ext[row][..3].copy_from_slice(axis);
                ext[row][3] = -(0..3).map(|k| axis[k] * pos[k]).sum::<f64>();
            }
            Camera::new(
                ext,
                Intrinsics {
                    fx: cfg.focal,
                    fy: cfg.focal,
                    cx: cfg.width / 2.0,
                    cy: cfg.height / 2.0,
                },
                cfg.width,
                cfg.height,
            )
        })
        .collect()
}

pub fn default_rig() -> Vec<Camera> {
    build_rig(&RigConfig::default()).expect("default rig is valid")
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn test_cam(ext: Mat4) -> Camera {
        Camera::new(
            ext,
            Intrinsics {
                fx: 100.0,
                fy: 100.0,
                cx: 50.0,
                cy: 50.0,
            },
            100.0,
            100.0,
        )
        .unwrap()
    }

    fn dist(a: Vec3, b: Vec3) -> f64 {
        (0..3).map(|i| (a[i] - b[i]).powi(2)).sum::<f64>().sqrt()
    }

    #[test]
    fn corners_of_unit_cube() {
        let b = Box3D::new([0.0; 3], [1.0; 3], 0.0, 0).unwrap();
        let c = box_corners(&b);
        assert_eq!(c[0], [-0.5, -0.5, -0.5]);
        assert_eq!(c[7], [0.5, 0.5, 0.5]);
        assert_eq!(c[4], [0.5, -0.5, -0.5]);
        assert!(c.iter().all(|p| p.iter().all(|v| v.abs() == 0.5)));
    }

    #[test]
    fn yaw_quarter_turn_swaps_footprint() {
        let b = Box3D::new([0.0; 3], [4.0, 2.0, 1.0], PI / 2.0, 0).unwrap();
        let c = box_corners(&b);
        let span = |axis: usize| {
            let vals: Vec<f64> = c.iter().map(|p| p[axis]).collect();
            vals.iter().cloned().fold(f64::MIN, f64::max) - vals.iter().cloned().fold(f64::MAX, f64::min)
        };
        assert!((span(0) - 2.0).abs() < 1e-12);
        assert!((span(1) - 4.0).abs() < 1e-12);
    }

    #[test]
    fn corner_distances_match_diagonals() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let size = [rng.random_range(0.2..6.0), rng.random_range(0.2..3.0), rng.random_range(0.2..3.0)];
            let center = [rng.random_range(-20.0..20.0), rng.random_range(-20.0..20.0), rng.random_range(0.0..2.0)];
            let b = Box3D::new(center, size, rng.random_range(-3.0..3.0), 0).unwrap();
            let c = box_corners(&b);
            for i in 0..8 {
                for j in 0..8 {
                    let diff = i ^ j;
                    let want = (0..3)
                        .filter(|&a| diff >> (2 - a) & 1 == 1)
                        .map(|a| size[a] * size[a])
                        .sum::<f64>()
                        .sqrt();
                    assert!((dist(c[i], c[j]) - want).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn principal_point_and_behind() {
        let cam = test_cam(IDENTITY);
        let p = project_point([0.0, 0.0, 5.0], &cam);
        assert_eq!((p.u, p.v, p.depth, p.valid), (50.0, 50.0, 5.0, true));
        assert!(!project_point([0.0, 0.0, -3.0], &cam).valid);
        assert!(!project_point([1.0, 0.0, EPS_DEPTH], &cam).valid);
    }

    #[test]
    fn translation_only_extrinsic() {
        let t = [1.5, -2.0, 3.0];
        let mut ext = IDENTITY;
        for i in 0..3 {
            ext[i][3] = t[i];
        }
        let cam = test_cam(ext);
        let p = project_point([-t[0], -t[1], 5.0 - t[2]], &cam);
        assert_eq!((p.u, p.v, p.depth), (50.0, 50.0, 5.0));
    }

    fn random_rigid(rng: &mut ChaCha8Rng) -> Mat4 {
        let (a, b, c) = (rng.random_range(-PI..PI), rng.random_range(-PI..PI), rng.random_range(-PI..PI));
        let rz = yaw_transform(a, [0.0; 3]);
        let (s, co) = b.sin_cos();
        let rx: Mat4 = [[1.0, 0.0, 0.0, 0.0], [0.0, co, -s, 0.0], [0.0, s, co, 0.0], [0.0, 0.0, 0.0, 1.0]];
        let t = yaw_transform(c, [rng.random_range(-10.0..10.0), rng.random_range(-10.0..10.0), rng.random_range(-10.0..10.0)]);
        compose(&t, &compose(&rx, &rz))
    }

    #[test]
    fn conjugation_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let rig = default_rig();
        for _ in 0..100 {
            let g = random_rigid(&mut rng);
            let p = [rng.random_range(-30.0..30.0), rng.random_range(-30.0..30.0), rng.random_range(-2.0..4.0)];
            for cam in &rig {
                let moved = Camera::new(compose(&cam.extrinsic, &rigid_inverse(&g)), cam.intrinsic.clone(), cam.width, cam.height).unwrap();
                let a = project_point(p, cam);
                let b = project_point(transform_point(&g, p), &moved);
                assert_eq!(a.valid, b.valid);
                assert!((a.depth - b.depth).abs() < 1e-9);
                if a.valid {
                    assert!((a.u - b.u).abs() < 1e-9 && (a.v - b.v).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn crop_cases() {
        let cam = test_cam(IDENTITY);
        let behind = Box3D::new([0.0, 0.0, -5.0], [1.0; 3], 0.0, 0).unwrap();
        assert!(crop_rect(&behind, &cam, 0).is_none());

        let front = Box3D::new([0.0, 0.0, 10.0], [1.0, 1.0, 1.0], 0.0, 0).unwrap();
        let r = crop_rect(&front, &cam, 0).unwrap();
        assert!((50.0 - r.u_min - (r.u_max - 50.0)).abs() < 1e-6);
        assert!((50.0 - r.v_min - (r.v_max - 50.0)).abs() < 1e-6);
        assert!(r.depth > 0.0);

        let near = Box3D::new([0.0, 0.0, 20.0], [0.5; 3], 0.0, 0).unwrap();
        let nearer = Box3D::new([0.0, 0.0, 10.0], [0.5; 3], 0.0, 0).unwrap();
        let ratio = crop_rect(&nearer, &cam, 0).unwrap().width() / crop_rect(&near, &cam, 0).unwrap().width();
        assert!((ratio - 2.0).abs() < 0.2, "{ratio}");

        let tiny = Box3D::new([0.0, 0.0, 90.0], [0.05; 3], 0.0, 0).unwrap();
        assert!(crop_rect(&tiny, &cam, 0).is_none());
    }

    #[test]
    fn flatten_roundtrip() {
        let cam = test_cam(IDENTITY);
        let e = flatten_extrinsics(std::slice::from_ref(&cam)).unwrap();
        assert_eq!(e.row(0), &[1., 0., 0., 0., 0., 1., 0., 0., 0., 0., 1., 0., 0., 0., 0., 1.]);
        let rig = default_rig();
        let e = flatten_extrinsics(&rig).unwrap();
        assert_eq!(e.shape(), &[6, 16]);
        let back = unflatten_extrinsics(&e).unwrap();
        for (m, c) in back.iter().zip(&rig) {
            for (a, b) in m.iter().flatten().zip(c.extrinsic.iter().flatten()) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
        assert!(flatten_extrinsics(&[]).is_err());
    }

    #[test]
    fn rig_geometry() {
        let rig = default_rig();
        assert_eq!(rig.len(), 6);
        // a point straight ahead lands at the front camera's principal column
        let p = project_point([15.0, 0.0, 1.6], &rig[0]);
        assert!((p.u - 160.0).abs() < 1e-9 && (p.v - 96.0).abs() < 1e-9);
        // and a point to the left is seen by the camera at +60°
        let p = project_point([10.0 * (PI / 3.0).cos(), 10.0 * (PI / 3.0).sin(), 1.6], &rig[1]);
        assert!((p.u - 160.0).abs() < 1e-9);
        assert!(!project_point([-10.0, 0.0, 1.0], &rig[0]).valid);
    }

    #[test]
    fn validation() {
        let mut bad = IDENTITY;
        bad[0][0] = 2.0;
        assert!(Camera::new(bad, test_cam(IDENTITY).intrinsic, 10.0, 10.0).is_err());
        let mut flip = IDENTITY;
        flip[2][2] = -1.0;
        assert!(Camera::new(flip, test_cam(IDENTITY).intrinsic, 10.0, 10.0).is_err());
        assert!(Box3D::new([0.0; 3], [1.0, 0.0, 1.0], 0.0, 0).is_err());
        assert!(Box3D::new([0.0; 3], [1.0; 3], -PI, 0).is_err());
        assert!(Box3D::new([0.0; 3], [1.0; 3], PI, 0).is_ok());
    }
}
