//! Warping between equirectangular and perspective images, plus the
//! loop-closure operators (circular padding, latent roll) and joint noise
//! initialisation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{domain, shape, Error, Result};
use crate::image::{ErpImage, Planar, PerspImage};
use crate::sphere::{erp_pixel_from_ray, in_frustum, CameraIntrinsics, CameraPose, CameraRig, ErpGrid};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SampleMode {
    Nearest,
    Bilinear,
}

impl std::str::FromStr for SampleMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nearest" => Ok(Self::Nearest),
            "bilinear" => Ok(Self::Bilinear),
            other => domain(format!("unknown sample mode {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy)]
enum Tap {
    Nearest(usize),
    /// Flat indices of the 2x2 neighbourhood (top-left, top-right,
    /// bottom-left, bottom-right) and the fractional offsets.
    Bilinear([usize; 4], f64, f64),
}

/// Precomputed ERP-to-view sampling table for one camera.
///
/// Applying the same warp to many images (noise, SPE maps, features) only
/// costs one gather per pixel.
#[derive(Debug, Clone)]
pub struct Warp {
    src_height: usize,
    src_width: usize,
    dst_height: usize,
    dst_width: usize,
    taps: Vec<Tap>,
}

impl Warp {
    pub fn new(grid: &ErpGrid, pose: &CameraPose, k: &CameraIntrinsics, mode: SampleMode) -> Result<Self> {
        let (h, w) = (grid.height(), grid.width());
        let mut taps = Vec::with_capacity(k.height() * k.width());
        for y in 0..k.height() {
            for x in 0..k.width() {
                let cam = k.unproject(x as f64 + 0.5, y as f64 + 0.5);
                let ray = pose.camera_to_world(&cam);
                let (u, v) = erp_pixel_from_ray(grid, &ray)?;
                taps.push(match mode {
                    SampleMode::Nearest => {
                        // round half-up on the centre-shifted coordinate, then wrap
                        let col = (u.floor() as usize) % w;
                        let row = (v.floor() as usize).min(h - 1);
                        Tap::Nearest(row * w + col)
                    }
                    SampleMode::Bilinear => bilinear_tap(u, v, h, w),
                });
            }
        }
        Ok(Self { src_height: h, src_width: w, dst_height: k.height(), dst_width: k.width(), taps })
    }

    pub fn apply(&self, src: &Planar) -> Result<Planar> {
        if src.height != self.src_height || src.width != self.src_width {
            return shape(format!(
                "warp expects {}x{} source, got {}x{}",
                self.src_height, self.src_width, src.height, src.width
            ));
        }
        let n = self.dst_height * self.dst_width;
        let mut out = Planar::zeros(src.channels, self.dst_height, self.dst_width);
        for c in 0..src.channels {
            let plane = src.plane(c);
            let dst = &mut out.data[c * n..(c + 1) * n];
            for (o, tap) in dst.iter_mut().zip(&self.taps) {
                *o = sample_tap(plane, tap);
            }
        }
        Ok(out)
    }

    /// Source pixels read by each destination pixel with their effective
    /// weights, used to build attention masks.
    pub(crate) fn weights(&self) -> impl Iterator<Item = (usize, [(usize, f64); 4])> + '_ {
        self.taps.iter().enumerate().map(|(i, tap)| {
            let w = match *tap {
                Tap::Nearest(j) => [(j, 1.0), (j, 0.0), (j, 0.0), (j, 0.0)],
                Tap::Bilinear(idx, fx, fy) => [
                    (idx[0], (1.0 - fx) * (1.0 - fy)),
                    (idx[1], fx * (1.0 - fy)),
                    (idx[2], (1.0 - fx) * fy),
                    (idx[3], fx * fy),
                ],
            };
            (i, w)
        })
    }

    pub fn dst_len(&self) -> usize {
        self.dst_height * self.dst_width
    }
}

fn bilinear_tap(u: f64, v: f64, h: usize, w: usize) -> Tap {
    let fu = u - 0.5;
    let fv = (v - 0.5).clamp(0.0, (h - 1) as f64);
    let c0 = fu.floor();
    let fx = fu - c0;
    let c0 = (c0 as i64).rem_euclid(w as i64) as usize;
    let c1 = (c0 + 1) % w;
    let (r0, fy) = if h == 1 {
        (0, 0.0)
    } else {
        let r0 = (fv.floor() as usize).min(h - 2);
        (r0, fv - r0 as f64)
    };
    let r1 = (r0 + 1).min(h - 1);
    Tap::Bilinear([r0 * w + c0, r0 * w + c1, r1 * w + c0, r1 * w + c1], fx, fy)
}

#[inline]
fn sample_tap(plane: &[f64], tap: &Tap) -> f64 {
    match *tap {
        Tap::Nearest(i) => plane[i],
        Tap::Bilinear(idx, fx, fy) => {
            // lerp form keeps constant images exactly constant
            let top = plane[idx[0]] + fx * (plane[idx[1]] - plane[idx[0]]);
            let bottom = plane[idx[2]] + fx * (plane[idx[3]] - plane[idx[2]]);
            top + fy * (bottom - top)
        }
    }
}

/// Renders the view of camera `(pose, k)` from an equirectangular image.
pub fn project_erp_to_persp(src: &ErpImage, pose: &CameraPose, k: &CameraIntrinsics, mode: SampleMode) -> Result<PerspImage> {
    if !src.is_finite() {
        return Err(Error::Data("source image has non-finite entries".into()));
    }
    let warp = Warp::new(&src.grid()?, pose, k, mode)?;
    PerspImage::new(warp.apply(src.planar())?, *pose, *k)
}

/// Projects one image into every camera of a rig.
pub fn project_to_rig(src: &ErpImage, rig: &CameraRig, mode: SampleMode) -> Result<Vec<PerspImage>> {
    rig.poses
        .iter()
        .map(|p| project_erp_to_persp(src, p, &rig.intrinsics, mode))
        .collect()
}

/// Bilinear lookup in a perspective image at a continuous pixel coordinate,
/// clamped at the image border.
fn sample_view(view: &Planar, c: usize, px: f64, py: f64) -> f64 {
    let fx = (px - 0.5).clamp(0.0, (view.width - 1) as f64);
    let fy = (py - 0.5).clamp(0.0, (view.height - 1) as f64);
    let x0 = (fx.floor() as usize).min(view.width.saturating_sub(2));
    let y0 = (fy.floor() as usize).min(view.height.saturating_sub(2));
    let x1 = (x0 + 1).min(view.width - 1);
    let y1 = (y0 + 1).min(view.height - 1);
    let (tx, ty) = (fx - x0 as f64, fy - y0 as f64);
    let p = view.plane(c);
    let w = view.width;
    let top = p[y0 * w + x0] + tx * (p[y0 * w + x1] - p[y0 * w + x0]);
    let bottom = p[y1 * w + x0] + tx * (p[y1 * w + x1] - p[y1 * w + x0]);
    top + ty * (bottom - top)
}

/// Resamples a single view onto the ERP grid. Pixels outside the view's
/// frustum get weight 0 and value 0.
pub fn backproject_single(view: &PerspImage, grid: &ErpGrid) -> (Planar, Vec<f64>) {
    let (h, w) = (grid.height(), grid.width());
    let ch = view.pixels.channels;
    let mut out = Planar::zeros(ch, h, w);
    let mut weight = vec![0.0; h * w];
    for row in 0..h {
        for col in 0..w {
            let d = grid.pixel_direction(row, col);
            if !in_frustum(&view.pose, &view.intrinsics, &d) {
                continue;
            }
            let cam = view.pose.world_to_camera(&d);
            let Some((px, py)) = view.intrinsics.project(&cam) else { continue };
            let i = row * w + col;
            weight[i] = 1.0;
            for c in 0..ch {
                out.data[c * h * w + i] = sample_view(&view.pixels, c, px, py);
            }
        }
    }
    (out, weight)
}

/// Blends views back into an equirectangular image.
///
/// Every ERP pixel centre inside a view's frustum gathers a bilinear sample
/// of that view with unit weight; the result is the weighted mean and the
/// returned weight map counts contributing views (it equals the rig's
/// [`coverage_count`](crate::sphere::coverage_count)).
pub fn backproject_persp_to_erp(views: &[PerspImage], grid: &ErpGrid) -> Result<(ErpImage, Vec<f64>)> {
    let channels = views.first().map_or(1, |v| v.pixels.channels);
    if views.iter().any(|v| v.pixels.channels != channels) {
        return shape("all views must share a channel count");
    }
    let (h, w) = (grid.height(), grid.width());
    let mut acc = Planar::zeros(channels, h, w);
    let mut weight = vec![0.0; h * w];
    for view in views {
        let (img, wt) = backproject_single(view, grid);
        for (a, b) in weight.iter_mut().zip(&wt) {
            *a += b;
        }
        for (c, plane) in acc.data.chunks_mut(h * w).enumerate() {
            for ((a, b), wt) in plane.iter_mut().zip(img.plane(c)).zip(&wt) {
                *a += b * wt;
            }
        }
    }
    for plane in acc.data.chunks_mut(h * w) {
        for (a, &wt) in plane.iter_mut().zip(&weight) {
            if wt > 0.0 {
                *a /= wt;
            }
        }
    }
    Ok((ErpImage::new(acc)?, weight))
}

/// Pads `k` columns on both sides by wrapping around horizontally.
pub fn circular_pad(x: &Planar, k: usize) -> Result<Planar> {
    if k > x.width {
        return domain(format!("circular pad {k} exceeds width {}", x.width));
    }
    let w = x.width;
    let nw = w + 2 * k;
    let mut out = Planar::zeros(x.channels, x.height, nw);
    for (src, dst) in x.data.chunks(w).zip(out.data.chunks_mut(nw)) {
        dst[..k].copy_from_slice(&src[w - k..]);
        dst[k..k + w].copy_from_slice(src);
        dst[k + w..].copy_from_slice(&src[..k]);
    }
    Ok(out)
}

/// Drops `k` columns from both sides; the inverse of [`circular_pad`].
pub fn crop_columns(x: &Planar, k: usize) -> Result<Planar> {
    if 2 * k > x.width {
        return domain("crop wider than the image");
    }
    let nw = x.width - 2 * k;
    let mut out = Planar::zeros(x.channels, x.height, nw);
    for (src, dst) in x.data.chunks(x.width).zip(out.data.chunks_mut(nw)) {
        dst.copy_from_slice(&src[k..k + nw]);
    }
    Ok(out)
}

/// Cyclic shift to the right by `shift` columns (negative shifts go left).
pub fn roll_columns(x: &Planar, shift: i64) -> Planar {
    let w = x.width;
    let s = shift.rem_euclid(w as i64) as usize;
    let mut out = x.clone();
    if s == 0 {
        return out;
    }
    for (src, dst) in x.data.chunks(w).zip(out.data.chunks_mut(w)) {
        dst[s..].copy_from_slice(&src[..w - s]);
        dst[..s].copy_from_slice(&src[w - s..]);
    }
    out
}

/// Rotates the panorama by `quarter_turns * 90` degrees of azimuth, i.e. a
/// cyclic shift by `quarter_turns * W / 4` columns.
pub fn latent_roll(z: &ErpImage, quarter_turns: i64) -> Result<ErpImage> {
    if z.width % 4 != 0 {
        return domain(format!("width {} is not divisible by 4", z.width));
    }
    ErpImage::new(roll_columns(z.planar(), quarter_turns * (z.width / 4) as i64))
}

/// I.i.d. standard normal planar buffer.
pub fn gaussian_planar(rng: &mut impl Rng, channels: usize, height: usize, width: usize) -> Planar {
    let data = (0..channels * height * width).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    Planar { channels, height, width, data }
}

/// Nearest-neighbour warps from a latent grid into every rig view.
#[derive(Debug, Clone)]
pub struct NoiseProjector {
    grid: ErpGrid,
    rig: CameraRig,
    warps: Vec<Warp>,
}

impl NoiseProjector {
    /// `grid` is the latent grid; views are `H/2 x H/2` of it.
    pub fn new(grid: &ErpGrid, rig: &CameraRig) -> Result<Self> {
        let rig = rig.with_image_side(grid.height() / 2)?;
        let warps = rig
            .poses
            .iter()
            .map(|p| Warp::new(grid, p, &rig.intrinsics, SampleMode::Nearest))
            .collect::<Result<_>>()?;
        Ok(Self { grid: *grid, rig, warps })
    }

    pub fn rig(&self) -> &CameraRig {
        &self.rig
    }

    pub fn grid(&self) -> &ErpGrid {
        &self.grid
    }

    pub fn project(&self, pano: &Planar) -> Result<Vec<PerspImage>> {
        self.warps
            .iter()
            .zip(&self.rig.poses)
            .map(|(w, p)| PerspImage::new(w.apply(pano)?, *p, self.rig.intrinsics))
            .collect()
    }

    /// Panorama noise plus its nearest-neighbour projection into each view.
    pub fn joint(&self, rng: &mut impl Rng, channels: usize) -> Result<(ErpImage, Vec<PerspImage>)> {
        let pano = gaussian_planar(rng, channels, self.grid.height(), self.grid.width());
        let views = self.project(&pano)?;
        Ok((ErpImage::new(pano)?, views))
    }

    /// Panorama noise and independently drawn view noise.
    pub fn independent(&self, rng: &mut impl Rng, channels: usize) -> Result<(ErpImage, Vec<PerspImage>)> {
        let pano = gaussian_planar(rng, channels, self.grid.height(), self.grid.width());
        let side = self.rig.intrinsics.width();
        let views = self
            .rig
            .poses
            .iter()
            .map(|p| PerspImage::new(gaussian_planar(rng, channels, side, side), *p, self.rig.intrinsics))
            .collect::<Result<_>>()?;
        Ok((ErpImage::new(pano)?, views))
    }
}

/// Seeded panorama latent noise `C x H/f x W/f` and the per-view latents
/// `C x H/(2f) x H/(2f)` obtained from it by nearest-neighbour projection.
pub fn joint_noise_init(grid: &ErpGrid, rig: &CameraRig, channels: usize, seed: u64) -> Result<(ErpImage, Vec<PerspImage>)> {
    let projector = NoiseProjector::new(&grid.latent()?, rig)?;
    projector.joint(&mut ChaCha8Rng::seed_from_u64(seed), channels)
}
