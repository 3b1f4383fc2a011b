//! Procedural training panoramas: sky gradient, a sun disk and a floor
//! checkerboard one unit below the camera.

use std::f64::consts::{PI, TAU};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{domain, shape, Result};
use crate::image::{ErpImage, PerspImage};
use crate::resample::{project_to_rig, SampleMode};
use crate::sphere::{CameraRig, SphericalCoord, Vec3};

/// Number of sun-azimuth buckets used as the condition id.
pub const SUN_BUCKETS: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthParams {
    pub height: usize,
    pub sun_radius_deg: f64,
    /// Side of one floor square, in units of the camera height.
    pub checker_size: f64,
    /// Rotation of the checker axes about the vertical.
    pub checker_angle_deg: f64,
    /// Amplitude of the slanted sky bands.
    pub band_amplitude: f64,
    /// Number of sky bands around the horizon.
    pub band_count: f64,
    /// Band phase advance per radian of elevation.
    pub band_twist: f64,
    /// Supersampling factor per pixel side.
    pub supersample: usize,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self { height: 64, sun_radius_deg: 8.0, checker_size: 0.5, checker_angle_deg: 17.0, band_amplitude: 0.3, band_count: 9.0, band_twist: 7.0, supersample: 4 }
    }
}

/// Scene description sampled from a seed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthScene {
    pub sun_theta: f64,
    pub sun_phi: f64,
}

impl SynthScene {
    pub fn from_seed(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sun_theta = rng.gen_range(-PI..PI);
        let sun_phi = rng.gen_range(0.15..0.6);
        Self { sun_theta, sun_phi }
    }

    pub fn condition(&self) -> usize {
        sun_bucket(self.sun_theta)
    }
}

/// Condition id of a sun azimuth.
pub fn sun_bucket(theta: f64) -> usize {
    let t = (theta + PI).rem_euclid(TAU);
    ((t / (TAU / SUN_BUCKETS as f64)) as usize).min(SUN_BUCKETS - 1)
}

/// Where a ray meets the floor plane `z = -1`, if it points down.
pub fn floor_hit(d: &Vec3) -> Option<(f64, f64)> {
    (d.z < -1e-9).then(|| (-d.x / d.z, -d.y / d.z))
}

/// Parity of the floor square containing `(x, y)`.
pub fn checker_parity(params: &SynthParams, x: f64, y: f64) -> bool {
    let (s, c) = params.checker_angle_deg.to_radians().sin_cos();
    // offset so no grid line passes under the camera
    let (a, b) = (c * x + s * y + 0.37 * params.checker_size, -s * x + c * y + 0.61 * params.checker_size);
    ((a / params.checker_size).floor() + (b / params.checker_size).floor()).rem_euclid(2.0) == 1.0
}

/// RGB radiance along a unit direction.
pub fn radiance(params: &SynthParams, scene: &SynthScene, d: &Vec3) -> [f64; 3] {
    let phi = d.z.clamp(-1.0, 1.0).asin();
    let mut rgb = if let Some((x, y)) = floor_hit(d) {
        let dark = checker_parity(params, x, y);
        let base = if dark { [0.25, 0.2, 0.15] } else { [0.75, 0.7, 0.6] };
        // fade to a haze colour towards the horizon
        let fade = (-(x * x + y * y).sqrt() / 6.0).exp();
        let haze = [0.5, 0.47, 0.42];
        [0, 1, 2].map(|i| haze[i] + fade * (base[i] - haze[i]))
    } else {
        let s = phi.sin().max(0.0);
        let horizon = [0.75, 0.8, 0.9];
        let zenith = [0.2, 0.35, 0.75];
        // triangle wave, so every azimuth sees the same band slope
        let x = params.band_count * d.y.atan2(d.x) / TAU + params.band_twist * phi;
        let band = params.band_amplitude * (2.0 * (x - x.floor() - 0.5).abs() - 0.5);
        [0, 1, 2].map(|i| (horizon[i] + s * (zenith[i] - horizon[i]) + band).clamp(0.0, 1.0))
    };
    let sun = SphericalCoord::new(scene.sun_theta, scene.sun_phi).expect("sun inside the sphere").to_direction();
    let ang = d.dot(&sun).clamp(-1.0, 1.0).acos();
    let r = params.sun_radius_deg.to_radians();
    // soft edge spanning the outer 80% of the radius
    let edge = ((r - ang) / (0.8 * r)).clamp(0.0, 1.0);
    let w = edge * edge * (3.0 - 2.0 * edge);
    for v in &mut rgb {
        *v += w * (1.0 - *v);
    }
    rgb
}

/// Renders a scene with `supersample^2` rays per pixel.
pub fn render(params: &SynthParams, scene: &SynthScene) -> Result<ErpImage> {
    let (h, w) = (params.height, 2 * params.height);
    if h == 0 || h % 2 != 0 || params.supersample == 0 {
        return domain("synthetic panorama height must be positive and even, supersampling positive");
    }
    let n = params.supersample;
    let mut data = vec![0.0; 3 * h * w];
    for r in 0..h {
        for k in 0..w {
            let mut acc = [0.0; 3];
            for sy in 0..n {
                for sx in 0..n {
                    let u = k as f64 + (sx as f64 + 0.5) / n as f64;
                    let v = r as f64 + (sy as f64 + 0.5) / n as f64;
                    let theta = TAU * u / w as f64 - PI;
                    let phi = PI * v / h as f64 - PI / 2.0;
                    let d = Vec3::new(phi.cos() * theta.cos(), phi.cos() * theta.sin(), phi.sin());
                    let c = radiance(params, scene, &d);
                    for i in 0..3 {
                        acc[i] += c[i];
                    }
                }
            }
            for (i, a) in acc.iter().enumerate() {
                data[(i * h + r) * w + k] = a / (n * n) as f64;
            }
        }
    }
    ErpImage::from_data(3, h, data)
}

/// A training panorama with its condition id and rig views.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSample {
    pano: ErpImage,
    condition: usize,
    views: Vec<PerspImage>,
}

impl TrainSample {
    /// Views are rendered from `pano` with bilinear sampling; `rig` sets
    /// their size.
    pub fn new(pano: ErpImage, condition: usize, rig: &CameraRig) -> Result<Self> {
        if condition >= SUN_BUCKETS {
            return domain(format!("condition {condition} outside 0..{SUN_BUCKETS}"));
        }
        if rig.intrinsics.width() * 2 != pano.height {
            return shape(format!("views of side {} do not match panorama height {}", rig.intrinsics.width(), pano.height));
        }
        let views = project_to_rig(&pano, rig, SampleMode::Bilinear)?;
        Ok(Self { pano, condition, views })
    }

    pub fn pano(&self) -> &ErpImage {
        &self.pano
    }

    pub fn condition(&self) -> usize {
        self.condition
    }

    pub fn views(&self) -> &[PerspImage] {
        &self.views
    }
}

/// Renders the scene of `seed` and derives its views for `rig`.
pub fn synth_panorama(seed: u64, params: &SynthParams, rig: &CameraRig) -> Result<TrainSample> {
    let scene = SynthScene::from_seed(seed);
    TrainSample::new(render(params, &scene)?, scene.condition(), rig)
}
