//! Deterministic DDIM sampling of both branches.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::model::{roll_tensor, ToyDenoiser};
use super::schedule::{make_schedule, NoiseSchedule};
use super::train::{draw_noise, NoiseInit};
use crate::error::{domain, Error, Result};
use crate::image::{ErpImage, Planar, PerspImage};
use crate::nn::Tensor4;
use crate::resample::{circular_pad, crop_columns, NoiseProjector};

/// What happens to the panorama latent between steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RotationPolicy {
    None,
    /// Roll one quarter turn after every step with the rig yawed along, and
    /// undo the total at the end.
    Lockstep,
}

impl std::str::FromStr for RotationPolicy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "lockstep" => Ok(Self::Lockstep),
            o => domain(format!("unknown rotation policy {o:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplerConfig {
    pub steps: usize,
    pub eta: f64,
    pub rotation: RotationPolicy,
    pub decode_pad: bool,
    pub init: NoiseInit,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { steps: 50, eta: 0.0, rotation: RotationPolicy::Lockstep, decode_pad: true, init: NoiseInit::Joint, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleOutput {
    /// Panorama in `[0, 1]`.
    pub pano: ErpImage,
    /// View-branch images in `[0, 1]` with the rig cameras.
    pub views: Vec<PerspImage>,
}

/// Evenly spaced timesteps, largest first, ending at `T/S - 1`.
pub fn ddim_timesteps(t: usize, steps: usize) -> Vec<usize> {
    (0..steps).rev().map(|i| ((i + 1) * t / steps).saturating_sub(1)).collect()
}

/// One DDIM update given the predicted noise.
pub fn ddim_update(z: &[f64], eps: &[f64], ab: f64, ab_prev: f64, eta: f64, rng: &mut impl Rng) -> Vec<f64> {
    let sigma = if eta > 0.0 { eta * ((1.0 - ab_prev) / (1.0 - ab) * (1.0 - ab / ab_prev)).max(0.0).sqrt() } else { 0.0 };
    let dir = (1.0 - ab_prev - sigma * sigma).max(0.0).sqrt();
    z.iter()
        .zip(eps)
        .map(|(z, e)| {
            let x0 = (z - (1.0 - ab).sqrt() * e) / ab.sqrt();
            let mut v = ab_prev.sqrt() * x0 + dir * e;
            if sigma > 0.0 {
                v += sigma * rng.sample::<f64, _>(StandardNormal);
            }
            v
        })
        .collect()
}

fn to_unit(x: f64) -> f64 {
    ((x + 1.0) / 2.0).clamp(0.0, 1.0)
}

/// Toy decoder: identity, optionally between a circular pad of 2 columns
/// and the matching crop.
pub fn decode(z: &Planar, pad: bool) -> Result<Planar> {
    if pad {
        crop_columns(&circular_pad(z, 2)?, 2)
    } else {
        Ok(z.clone())
    }
}

/// Samples a panorama (and the view-branch images) for condition `y`.
pub fn ddim_sample(model: &ToyDenoiser, cfg: &SamplerConfig, y: usize) -> Result<SampleOutput> {
    let schedule = make_schedule(model.cfg.timesteps, model.cfg.beta_start, model.cfg.beta_end)?;
    ddim_sample_with(model, &schedule, cfg, y)
}

pub fn ddim_sample_with(model: &ToyDenoiser, schedule: &NoiseSchedule, cfg: &SamplerConfig, y: usize) -> Result<SampleOutput> {
    if cfg.steps == 0 || cfg.steps > schedule.len() {
        return domain(format!("DDIM steps must be in 1..={}, got {}", schedule.len(), cfg.steps));
    }
    if !(0.0..=1.0).contains(&cfg.eta) {
        return domain(format!("eta must lie in [0, 1], got {}", cfg.eta));
    }
    let mc = &model.cfg;
    let projector = NoiseProjector::new(&mc.grid()?, model.rig())?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (mut zp, mut zv) = draw_noise(&projector, cfg.init, &mut rng, mc.channels)?;
    let ts = ddim_timesteps(schedule.len(), cfg.steps);
    let mut quarter_turns = 0i64;
    let quarter = (zp.w / 4) as i64;
    for (k, &t) in ts.iter().enumerate() {
        let ab = schedule.alpha_bar(t);
        let ab_prev = ts.get(k + 1).map_or(1.0, |&p| schedule.alpha_bar(p));
        let (ep, ev) = model.dual_forward(&zp, &zv, t, y, quarter_turns)?;
        zp.data = ddim_update(&zp.data, &ep.data, ab, ab_prev, cfg.eta, &mut rng);
        zv.data = ddim_update(&zv.data, &ev.data, ab, ab_prev, cfg.eta, &mut rng);
        if cfg.rotation == RotationPolicy::Lockstep {
            zp = roll_tensor(&zp, quarter);
            quarter_turns += 1;
        }
    }
    zp = roll_tensor(&zp, -quarter_turns * quarter);
    if !zp.data.iter().chain(&zv.data).all(|v| v.is_finite()) {
        return Err(Error::Numerical("sampler produced non-finite values".into()));
    }
    let planar = decode(&Planar::new(zp.c, zp.h, zp.w, zp.data)?, cfg.decode_pad)?;
    let pano = ErpImage::new(Planar::new(planar.channels, planar.height, planar.width, planar.data.iter().map(|v| to_unit(*v)).collect())?)?;
    let per = zv.image_len();
    let views = projector
        .rig()
        .poses
        .iter()
        .enumerate()
        .map(|(i, pose)| {
            let data = zv.data[i * per..(i + 1) * per].iter().map(|v| to_unit(*v)).collect();
            PerspImage::new(Planar::new(zv.c, zv.h, zv.w, data)?, *pose, projector.rig().intrinsics)
        })
        .collect::<Result<_>>()?;
    Ok(SampleOutput { pano, views })
}

/// `x0` estimate from a single prediction, mapped to `[0, 1]`.
pub fn x0_estimate(z: &Tensor4, eps: &Tensor4, ab: f64) -> Vec<f64> {
    z.data.iter().zip(&eps.data).map(|(z, e)| to_unit((z - (1.0 - ab).sqrt() * e) / ab.sqrt())).collect()
}
