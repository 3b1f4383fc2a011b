//! Spherical conventions, pinhole cameras and the icosahedral camera rig.
//!
//! World frame: `+x` is the forward direction at azimuth 0, azimuth grows
//! toward `+y`, and `+z` points to elevation `+pi/2`. Pixel coordinates are
//! continuous and pixel `i` is centred on `i + 0.5`. ERP row 0 sits at the
//! bottom of the sphere (elevation `-pi/2`); the same holds for the rows of a
//! perspective image, whose rows grow toward the camera's up vector.

use std::f64::consts::{FRAC_PI_2, PI, TAU};

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{domain, Result};

pub type Vec3 = Vector3<f64>;

/// Azimuth `theta` in `[-pi, pi)` and elevation `phi` in `[-pi/2, pi/2]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SphericalCoord {
    theta: f64,
    phi: f64,
}

impl SphericalCoord {
    pub fn new(theta: f64, phi: f64) -> Result<Self> {
        if !(-PI..PI).contains(&theta) || !(-FRAC_PI_2..=FRAC_PI_2).contains(&phi) {
            return domain(format!("spherical coordinate out of range: theta={theta}, phi={phi}"));
        }
        Ok(Self { theta, phi })
    }

    pub fn theta(&self) -> f64 {
        self.theta
    }

    pub fn phi(&self) -> f64 {
        self.phi
    }

    /// Direction of a non-zero vector. `atan2(0, 0)` is taken as 0, so the
    /// poles land on `theta = 0`.
    pub fn from_direction(v: &Vec3) -> Result<Self> {
        if !(v.x.is_finite() && v.y.is_finite() && v.z.is_finite()) || v.norm_squared() == 0.0 {
            return domain("direction must be finite and non-zero");
        }
        let theta = wrap_angle(atan2_zero(v.y, v.x));
        let phi = atan2_zero(v.z, v.x.hypot(v.y));
        Ok(Self { theta, phi })
    }

    pub fn to_direction(&self) -> Vec3 {
        let (st, ct) = self.theta.sin_cos();
        let (sp, cp) = self.phi.sin_cos();
        Vec3::new(cp * ct, cp * st, sp)
    }
}

fn atan2_zero(y: f64, x: f64) -> f64 {
    if y == 0.0 && x == 0.0 {
        0.0
    } else {
        y.atan2(x)
    }
}

/// Maps any angle into `[-pi, pi)`.
fn wrap_angle(a: f64) -> f64 {
    let w = (a + PI).rem_euclid(TAU) - PI;
    if w >= PI {
        -PI
    } else {
        w
    }
}

/// Wraps a continuous horizontal ERP coordinate into `[0, width)`.
pub fn wrap_u(u: f64, width: usize) -> f64 {
    let w = width as f64;
    let r = u.rem_euclid(w);
    if r >= w {
        0.0
    } else {
        r
    }
}

/// A 2:1 equirectangular canvas together with the latent downsampling factor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ErpGrid {
    height: usize,
    width: usize,
    downsample: usize,
}

impl ErpGrid {
    pub fn new(height: usize, downsample: usize) -> Result<Self> {
        if height == 0 || downsample == 0 {
            return domain("grid height and downsample factor must be positive");
        }
        if height % (2 * downsample) != 0 {
            return domain(format!(
                "grid height {height} must be divisible by 2*f = {}",
                2 * downsample
            ));
        }
        Ok(Self { height, width: 2 * height, downsample })
    }

    /// Grid at pixel resolution (`f = 1`). Height must be even.
    pub fn pixel(height: usize) -> Result<Self> {
        Self::new(height, 1)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn downsample(&self) -> usize {
        self.downsample
    }

    /// The latent grid `H/f x W/f` at `f = 1`.
    pub fn latent(&self) -> Result<ErpGrid> {
        let h = self.height / self.downsample;
        if h % 2 != 0 {
            return domain("latent height must be even");
        }
        ErpGrid::pixel(h)
    }

    /// Side of the square perspective latents, `H / (2f)`.
    pub fn view_latent_side(&self) -> usize {
        self.height / (2 * self.downsample)
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    /// Direction through the centre of pixel `(row, col)`.
    pub fn pixel_direction(&self, row: usize, col: usize) -> Vec3 {
        let theta = TAU * (col as f64 + 0.5) / self.width as f64 - PI;
        let phi = PI * (row as f64 + 0.5) / self.height as f64 - FRAC_PI_2;
        let (st, ct) = theta.sin_cos();
        let (sp, cp) = phi.sin_cos();
        Vec3::new(cp * ct, cp * st, sp)
    }
}

/// Continuous ERP pixel coordinate to spherical coordinates.
pub fn sph_from_erp_pixel(grid: &ErpGrid, u: f64, v: f64) -> Result<SphericalCoord> {
    let (w, h) = (grid.width as f64, grid.height as f64);
    if !(0.0..w).contains(&u) || !(0.0..h).contains(&v) {
        return domain(format!("pixel ({u}, {v}) outside {}x{} grid", grid.height, grid.width));
    }
    let theta = TAU * u / w - PI;
    let phi = PI * v / h - FRAC_PI_2;
    SphericalCoord::new(theta.min(PI.next_down()), phi)
}

/// Spherical coordinates to a continuous ERP pixel coordinate `(u, v)`.
pub fn erp_pixel_from_sph(grid: &ErpGrid, c: &SphericalCoord) -> (f64, f64) {
    let u = grid.width as f64 * (c.theta + PI) / TAU;
    let v = grid.height as f64 * (c.phi + FRAC_PI_2) / PI;
    (u, v)
}

/// Continuous ERP coordinate hit by a direction, with `u` wrapped into `[0, W)`.
pub fn erp_pixel_from_ray(grid: &ErpGrid, v: &Vec3) -> Result<(f64, f64)> {
    if !(v.x.is_finite() && v.y.is_finite() && v.z.is_finite()) || v.norm_squared() == 0.0 {
        return domain("ray direction must be finite and non-zero");
    }
    let (w, h) = (grid.width as f64, grid.height as f64);
    let u = w * (atan2_zero(v.y, v.x) + PI) / TAU;
    let vv = h * (atan2_zero(v.z, v.x.hypot(v.y)) + FRAC_PI_2) / PI;
    Ok((wrap_u(u, grid.width), vv))
}

/// Rotation about `+z` by `angle` radians (positive turns `+x` toward `+y`).
pub fn yaw_matrix(angle: f64) -> Matrix3<f64> {
    let (s, c) = angle.sin_cos();
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

/// World-to-camera rotation. The camera looks along its local `+x`, local
/// `+y` is image right and local `+z` is image up.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraPose {
    rotation: Matrix3<f64>,
}

impl CameraPose {
    pub fn new(rotation: Matrix3<f64>) -> Result<Self> {
        let rrt = rotation * rotation.transpose();
        let ortho = (rrt - Matrix3::identity()).iter().all(|e| e.abs() < 1e-9);
        if !ortho || rotation.determinant() <= 0.0 {
            return domain("camera rotation must be orthonormal with det = +1");
        }
        Ok(Self { rotation })
    }

    pub fn identity() -> Self {
        Self { rotation: Matrix3::identity() }
    }

    /// A camera at azimuth `angle`, level with the horizon.
    pub fn from_yaw(angle: f64) -> Self {
        Self { rotation: yaw_matrix(angle).transpose() }
    }

    /// Camera looking along `forward` with image-up as close to `up` as
    /// possible.
    pub fn look_at(forward: &Vec3, up: &Vec3) -> Result<Self> {
        let f = forward.try_normalize(1e-12).ok_or_else(|| {
            crate::Error::Domain("forward axis must be non-zero".into())
        })?;
        let u = (up - f * up.dot(&f))
            .try_normalize(1e-12)
            .ok_or_else(|| crate::Error::Domain("up vector parallel to forward axis".into()))?;
        let r = u.cross(&f);
        let cam_to_world = Matrix3::from_columns(&[f, r, u]);
        Self::new(cam_to_world.transpose())
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    /// Viewing direction in world coordinates.
    pub fn forward(&self) -> Vec3 {
        self.rotation.row(0).transpose()
    }

    /// The same camera rotated about the world `+z` axis by `angle`.
    pub fn yawed(&self, angle: f64) -> Self {
        Self { rotation: self.rotation * yaw_matrix(angle).transpose() }
    }

    pub fn world_to_camera(&self, v: &Vec3) -> Vec3 {
        self.rotation * v
    }

    pub fn camera_to_world(&self, v: &Vec3) -> Vec3 {
        self.rotation.transpose() * v
    }
}

/// Square-frustum pinhole intrinsics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    fov_deg: f64,
    width: usize,
    height: usize,
}

impl CameraIntrinsics {
    pub fn new(fov_deg: f64, width: usize, height: usize) -> Result<Self> {
        if !(fov_deg > 0.0 && fov_deg < 180.0) {
            return domain(format!("field of view must lie in (0, 180), got {fov_deg}"));
        }
        if width == 0 || height == 0 {
            return domain("perspective image must be at least 1x1");
        }
        Ok(Self { fov_deg, width, height })
    }

    pub fn square(fov_deg: f64, side: usize) -> Result<Self> {
        Self::new(fov_deg, side, side)
    }

    pub fn fov_deg(&self) -> f64 {
        self.fov_deg
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn half_fov_tan(&self) -> f64 {
        (self.fov_deg.to_radians() / 2.0).tan()
    }

    pub fn focal_x(&self) -> f64 {
        self.width as f64 / 2.0 / self.half_fov_tan()
    }

    pub fn focal_y(&self) -> f64 {
        self.height as f64 / 2.0 / self.half_fov_tan()
    }

    /// `K^-1 [p, 1]` expressed in the camera's (forward, right, up) frame.
    pub fn unproject(&self, px: f64, py: f64) -> Vec3 {
        Vec3::new(
            1.0,
            (px - self.width as f64 / 2.0) / self.focal_x(),
            (py - self.height as f64 / 2.0) / self.focal_y(),
        )
    }

    /// Continuous pixel coordinate of a camera-frame direction, or `None`
    /// when the direction lies outside the frustum.
    pub fn project(&self, cam: &Vec3) -> Option<(f64, f64)> {
        if cam.x <= 0.0 {
            return None;
        }
        let a = cam.y / cam.x;
        let b = cam.z / cam.x;
        let t = self.half_fov_tan();
        if a.abs() > t || b.abs() > t {
            return None;
        }
        Some((self.width as f64 / 2.0 + a * self.focal_x(), self.height as f64 / 2.0 + b * self.focal_y()))
    }
}

/// Unit world ray through a continuous perspective pixel.
pub fn ray_from_persp_pixel(k: &CameraIntrinsics, pose: &CameraPose, px: f64, py: f64) -> Result<Vec3> {
    if !(k.fov_deg > 0.0 && k.fov_deg < 180.0) {
        return domain("degenerate intrinsics");
    }
    let (w, h) = (k.width as f64, k.height as f64);
    if !(0.0..=w).contains(&px) || !(0.0..=h).contains(&py) {
        return domain(format!("pixel ({px}, {py}) outside {}x{} image", k.height, k.width));
    }
    Ok(pose.camera_to_world(&k.unproject(px, py)).normalize())
}

/// An ordered set of camera poses sharing one set of intrinsics.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraRig {
    pub poses: Vec<CameraPose>,
    pub intrinsics: CameraIntrinsics,
}

impl CameraRig {
    pub fn new(poses: Vec<CameraPose>, intrinsics: CameraIntrinsics) -> Self {
        Self { poses, intrinsics }
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    /// Same poses, different image size.
    pub fn with_image_side(&self, side: usize) -> Result<Self> {
        Ok(Self {
            poses: self.poses.clone(),
            intrinsics: CameraIntrinsics::square(self.intrinsics.fov_deg, side)?,
        })
    }

    /// Every pose rotated about world `+z` by `angle`.
    pub fn yawed(&self, angle: f64) -> Self {
        Self {
            poses: self.poses.iter().map(|p| p.yawed(angle)).collect(),
            intrinsics: self.intrinsics,
        }
    }

    pub fn to_json(&self) -> serde_json::Value {
        let poses: Vec<_> = self
            .poses
            .iter()
            .map(|p| {
                let r = p.rotation();
                serde_json::json!({
                    "rotation": [
                        [r[(0, 0)], r[(0, 1)], r[(0, 2)]],
                        [r[(1, 0)], r[(1, 1)], r[(1, 2)]],
                        [r[(2, 0)], r[(2, 1)], r[(2, 2)]],
                    ],
                    "forward": [p.forward().x, p.forward().y, p.forward().z],
                })
            })
            .collect();
        serde_json::json!({
            "fov_deg": self.intrinsics.fov_deg,
            "width": self.intrinsics.width,
            "height": self.intrinsics.height,
            "poses": poses,
        })
    }
}

/// Unit vertices of a regular icosahedron with two vertices on `+-z`; the
/// upper ring starts at azimuth 0 and the lower ring is offset by 36 deg.
pub fn icosahedron_vertices() -> [Vec3; 12] {
    let z = 1.0 / 5f64.sqrt();
    let r = 2.0 / 5f64.sqrt();
    let mut v = [Vec3::zeros(); 12];
    v[0] = Vec3::new(0.0, 0.0, 1.0);
    v[11] = Vec3::new(0.0, 0.0, -1.0);
    for k in 0..5 {
        let a = TAU * k as f64 / 5.0;
        v[1 + k] = Vec3::new(r * a.cos(), r * a.sin(), z);
        let b = a + TAU / 10.0;
        v[6 + k] = Vec3::new(r * b.cos(), r * b.sin(), -z);
    }
    v
}

/// The 20 faces of [`icosahedron_vertices`] as vertex index triples.
pub fn icosahedron_faces() -> [[usize; 3]; 20] {
    let mut faces = [[0; 3]; 20];
    for k in 0..5 {
        let (u0, u1) = (1 + k, 1 + (k + 1) % 5);
        let (l0, l1) = (6 + k, 6 + (k + 1) % 5);
        faces[k] = [0, u0, u1];
        faces[5 + k] = [u0, l0, u1];
        faces[10 + k] = [u1, l0, l1];
        faces[15 + k] = [11, l1, l0];
    }
    faces
}

/// Unit face centres of the icosahedron, one per rig camera.
pub fn icosahedron_face_centers() -> Vec<Vec3> {
    let v = icosahedron_vertices();
    icosahedron_faces()
        .iter()
        .map(|f| (v[f[0]] + v[f[1]] + v[f[2]]).normalize())
        .collect()
}

/// Twenty 90-degree cameras looking at the icosahedron face centres.
///
/// Up vectors are `z` projected onto each image plane; a face whose centre
/// is within ~8 degrees of a pole uses `+x` instead.
pub fn icosahedron_rig(image_side: usize) -> Result<CameraRig> {
    let z = Vec3::z();
    let poses = icosahedron_face_centers()
        .iter()
        .map(|f| {
            let reference = if f.dot(&z).abs() > 0.99 { Vec3::x() } else { z };
            CameraPose::look_at(f, &reference)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CameraRig::new(poses, CameraIntrinsics::square(90.0, image_side)?))
}

/// Whether a world direction falls inside a camera frustum.
pub fn in_frustum(pose: &CameraPose, k: &CameraIntrinsics, dir: &Vec3) -> bool {
    let c = pose.world_to_camera(dir);
    if c.x <= 0.0 {
        return false;
    }
    let t = k.half_fov_tan();
    (c.y / c.x).abs() <= t && (c.z / c.x).abs() <= t
}

/// Number of rig views that see each ERP pixel centre, row-major `H x W`.
pub fn coverage_count(rig: &CameraRig, grid: &ErpGrid) -> Vec<u32> {
    let mut out = vec![0u32; grid.pixels()];
    for row in 0..grid.height {
        for col in 0..grid.width {
            let d = grid.pixel_direction(row, col);
            out[row * grid.width + col] =
                rig.poses.iter().filter(|p| in_frustum(p, &rig.intrinsics, &d)).count() as u32;
        }
    }
    out
}
