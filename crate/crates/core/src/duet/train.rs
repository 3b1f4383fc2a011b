//! Noise-prediction loss over both branches and a plain SGD loop.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::model::{Geometry, ToyConfig, ToyDenoiser};
use super::schedule::{add_noise_with, make_schedule, NoiseSchedule};
use super::synth::TrainSample;
use crate::error::{domain, shape, Error, Result};
use crate::image::{ErpImage, PerspImage};
use crate::nn::{Grads, Tensor4};
use crate::resample::NoiseProjector;
use crate::sphere::CameraRig;

/// How the initial (or training) noise of the view branch is drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoiseInit {
    /// View noise is the nearest-neighbour projection of panorama noise.
    Joint,
    /// Every view draws its own noise.
    Independent,
}

impl std::str::FromStr for NoiseInit {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "joint" => Ok(Self::Joint),
            "independent" => Ok(Self::Independent),
            o => domain(format!("unknown noise init {o:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub seed: u64,
    pub noise: NoiseInit,
    /// Draw a random rig yaw every step (rebuilds attention geometry).
    pub randomize_yaw: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { steps: 2000, lr: 1e-2, seed: 0, noise: NoiseInit::Joint, randomize_yaw: false }
    }
}

/// Data mapped from `[0, 1]` to the model range `[-1, 1]`.
pub fn pano_tensor(img: &ErpImage) -> Tensor4 {
    Tensor4 { n: 1, c: img.channels, h: img.height, w: img.width, data: img.data.iter().map(|v| 2.0 * v - 1.0).collect() }
}

pub fn views_tensor(views: &[PerspImage]) -> Result<Tensor4> {
    let first = views.first().ok_or_else(|| Error::Shape("no views".into()))?;
    let [c, h, w] = first.pixels.shape();
    let mut data = Vec::with_capacity(views.len() * c * h * w);
    for v in views {
        if v.pixels.shape() != [c, h, w] {
            return shape("views differ in shape");
        }
        data.extend(v.pixels.data.iter().map(|x| 2.0 * x - 1.0));
    }
    Tensor4::new(views.len(), c, h, w, data)
}

/// Mean squared error of both branches, `L* + (1/N) sum_i L^i`, with
/// gradients with respect to the two predictions.
pub fn mse_pair(pred_p: &Tensor4, pred_v: &Tensor4, eps_p: &Tensor4, eps_v: &Tensor4) -> Result<(f64, Tensor4, Tensor4)> {
    if !pred_p.same_shape(eps_p) || !pred_v.same_shape(eps_v) {
        return shape("prediction and noise shapes differ");
    }
    let np = pred_p.data.len() as f64;
    let mut dp = pred_p.zeros_like();
    let mut lp = 0.0;
    for ((d, a), b) in dp.data.iter_mut().zip(&pred_p.data).zip(&eps_p.data) {
        let e = a - b;
        lp += e * e;
        *d = 2.0 * e / np;
    }
    let n = pred_v.n as f64;
    let per = (pred_v.image_len()) as f64;
    let mut dv = pred_v.zeros_like();
    let mut lv = 0.0;
    for ((d, a), b) in dv.data.iter_mut().zip(&pred_v.data).zip(&eps_v.data) {
        let e = a - b;
        lv += e * e;
        *d = 2.0 * e / (per * n);
    }
    Ok((lp / np + lv / (per * n), dp, dv))
}

/// Draws panorama and view noise for one example.
pub fn draw_noise(projector: &NoiseProjector, mode: NoiseInit, rng: &mut impl Rng, channels: usize) -> Result<(Tensor4, Tensor4)> {
    let (p, v) = match mode {
        NoiseInit::Joint => projector.joint(rng, channels)?,
        NoiseInit::Independent => projector.independent(rng, channels)?,
    };
    let pano = Tensor4::new(1, channels, p.height, p.width, p.into_planar().data)?;
    let side = projector.rig().intrinsics.width();
    let mut data = Vec::with_capacity(v.len() * channels * side * side);
    for view in &v {
        data.extend_from_slice(&view.pixels.data);
    }
    let views = Tensor4::new(v.len(), channels, side, side, data)?;
    Ok((pano, views))
}

/// Loss of one example at timestep `t` with the given noise, plus gradients.
#[allow(clippy::too_many_arguments)]
pub fn loss_at(
    model: &ToyDenoiser,
    x_p: &Tensor4,
    x_v: &Tensor4,
    y: usize,
    schedule: &NoiseSchedule,
    t: usize,
    eps_p: &Tensor4,
    eps_v: &Tensor4,
    geom: &Geometry,
) -> Result<(f64, Grads)> {
    let ab = schedule.alpha_bar(t);
    let zp = Tensor4::new(x_p.n, x_p.c, x_p.h, x_p.w, add_noise_with(ab, &x_p.data, &eps_p.data)?)?;
    let zv = Tensor4::new(x_v.n, x_v.c, x_v.h, x_v.w, add_noise_with(ab, &x_v.data, &eps_v.data)?)?;
    let (pp, pv, tape) = model.forward_with(Some(&zp), Some(&zv), t, y, 0, geom)?;
    let (pp, pv) = (pp.expect("pano"), pv.expect("views"));
    let (loss, dp, dv) = mse_pair(&pp, &pv, eps_p, eps_v)?;
    let mut grads = model.store.zero_grads();
    model.backward(&tape, Some(&dp), Some(&dv), &mut grads);
    Ok((loss, grads))
}

/// Stateful helper that owns the schedule, noise projector and rng.
pub struct Trainer {
    pub schedule: NoiseSchedule,
    pub cfg: TrainConfig,
    projector: NoiseProjector,
    rng: ChaCha8Rng,
    step: usize,
}

impl Trainer {
    pub fn new(model: &ToyDenoiser, cfg: TrainConfig) -> Result<Self> {
        if !(cfg.lr > 0.0 && cfg.lr.is_finite()) {
            return domain(format!("learning rate must be positive, got {}", cfg.lr));
        }
        let mc = &model.cfg;
        let schedule = make_schedule(mc.timesteps, mc.beta_start, mc.beta_end)?;
        let projector = NoiseProjector::new(&mc.grid()?, model.rig())?;
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7261_696e);
        Ok(Self { schedule, cfg, projector, rng, step: 0 })
    }

    /// Draws `t`, noise and (optionally) a rig yaw; returns loss and
    /// gradients without touching the parameters.
    pub fn combined_loss(&mut self, model: &ToyDenoiser, sample: &TrainSample) -> Result<(f64, Grads)> {
        let t = self.rng.gen_range(0..self.schedule.len());
        let c = model.cfg.channels;
        if self.cfg.randomize_yaw {
            let angle = self.rng.gen_range(0.0..std::f64::consts::TAU);
            let rig: CameraRig = model.rig().yawed(angle);
            let geom = Geometry::build(&model.cfg, &rig)?;
            let projector = NoiseProjector::new(&model.cfg.grid()?, &rig)?;
            let views = crate::resample::project_to_rig(sample.pano(), &rig, crate::resample::SampleMode::Bilinear)?;
            let (ep, ev) = draw_noise(&projector, self.cfg.noise, &mut self.rng, c)?;
            return loss_at(model, &pano_tensor(sample.pano()), &views_tensor(&views)?, sample.condition(), &self.schedule, t, &ep, &ev, &geom);
        }
        let (ep, ev) = draw_noise(&self.projector, self.cfg.noise, &mut self.rng, c)?;
        let xp = pano_tensor(sample.pano());
        let xv = views_tensor(sample.views())?;
        loss_at(model, &xp, &xv, sample.condition(), &self.schedule, t, &ep, &ev, model.geometry())
    }

    /// One SGD step on a uniformly drawn example.
    pub fn step(&mut self, model: &mut ToyDenoiser, dataset: &[TrainSample]) -> Result<f64> {
        if dataset.is_empty() {
            return domain("training set is empty");
        }
        let i = self.rng.gen_range(0..dataset.len());
        let (loss, grads) = match self.combined_loss(model, &dataset[i]) {
            Err(Error::Numerical(_)) => return Err(Error::Diverged { step: self.step, loss: f64::NAN }),
            r => r?,
        };
        if !loss.is_finite() || !grads.is_finite() {
            return Err(Error::Diverged { step: self.step, loss });
        }
        model.store.sgd_step(&grads, self.cfg.lr);
        self.step += 1;
        Ok(loss)
    }
}

/// Builds a model from `seed` and trains it; returns the model and the
/// per-step loss curve.
pub fn train_toy(model_cfg: ToyConfig, cfg: TrainConfig, dataset: &[TrainSample]) -> Result<(ToyDenoiser, Vec<f64>)> {
    if dataset.is_empty() {
        return domain("training set is empty");
    }
    let mut model = ToyDenoiser::new(model_cfg, cfg.seed)?;
    let losses = train_model(&mut model, cfg, dataset, |_, _| {})?;
    Ok((model, losses))
}

/// Trains an existing model, calling `progress(step, loss)` after each step.
pub fn train_model(model: &mut ToyDenoiser, cfg: TrainConfig, dataset: &[TrainSample], mut progress: impl FnMut(usize, f64)) -> Result<Vec<f64>> {
    let steps = cfg.steps;
    let mut trainer = Trainer::new(model, cfg)?;
    let mut losses = Vec::with_capacity(steps);
    for s in 0..steps {
        let l = trainer.step(model, dataset)?;
        progress(s, l);
        losses.push(l);
    }
    Ok(losses)
}

/// Mean of the first and last `window` losses.
pub fn smoothed_ends(losses: &[f64], window: usize) -> (f64, f64) {
    let w = window.min(losses.len()).max(1);
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len().max(1) as f64;
    (mean(&losses[..w.min(losses.len())]), mean(&losses[losses.len().saturating_sub(w)..]))
}

/// Renders the loss curve as `step,loss` CSV.
pub fn loss_csv(losses: &[f64]) -> String {
    let mut s = String::from("step,loss\n");
    for (i, l) in losses.iter().enumerate() {
        s.push_str(&format!("{i},{l}\n"));
    }
    s
}
