//! The two-branch toy denoiser.
//!
//! Both branches run the same small UNet trunk (shared parameter ids) with
//! branch-private residual 1x1 adapters. Attention sites couple the
//! branches at the lowest resolutions.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::eppa::{eppa_apply, eppa_backward, EppaCache, EppaParams, FeatureMap, SiteGeometry};
use crate::error::{domain, shape, Error, Result};
use crate::nn::{
    add_channel_bias, channel_sums, silu, silu_backward, silu_scalar, silu_scalar_grad, upsample2, upsample2_backward, Conv2d, ConvCache,
    Grads, Linear, Padding, ParamId, ParamStore, Tensor4,
};
use crate::sphere::{icosahedron_rig, CameraIntrinsics, CameraRig, ErpGrid};

/// Where an attention site sits in the UNet.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Site {
    /// After the first downsampler (half resolution).
    Down1,
    /// After the second downsampler (quarter resolution).
    Down2,
    /// After the middle block.
    Mid,
    /// Before the first upsampler (quarter resolution).
    Up2,
    /// Before the second upsampler (half resolution).
    Up1,
}

impl Site {
    pub const ALL: [Site; 5] = [Site::Down1, Site::Down2, Site::Mid, Site::Up2, Site::Up1];

    /// Resolution level: 1 = half, 2 = quarter.
    pub fn level(self) -> usize {
        match self {
            Site::Down1 | Site::Up1 => 1,
            _ => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Site::Down1 => "down1",
            Site::Down2 => "down2",
            Site::Mid => "mid",
            Site::Up2 => "up2",
            Site::Up1 => "up1",
        }
    }
}

impl std::str::FromStr for Site {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Site::ALL.into_iter().find(|x| x.name() == s).ok_or_else(|| Error::Domain(format!("unknown attention site {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyConfig {
    /// Panorama height in pixels; views are `height/2` square.
    pub height: usize,
    pub channels: usize,
    /// Feature widths at full, half and quarter resolution.
    pub widths: [usize; 3],
    pub fov_deg: f64,
    pub sigma: f64,
    pub sites: Vec<Site>,
    /// Circular padding in the panorama branch (off only for ablations).
    pub circular: bool,
    pub time_dim: usize,
    pub classes: usize,
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            height: 64,
            channels: 3,
            widths: [8, 16, 32],
            fov_deg: 90.0,
            sigma: 1.0,
            sites: vec![Site::Down2, Site::Mid, Site::Up2],
            circular: true,
            time_dim: 32,
            classes: 8,
            timesteps: 1000,
            beta_start: 1e-4,
            beta_end: 2e-2,
        }
    }
}

impl ToyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.height % 8 != 0 {
            return domain(format!("panorama height {} must be a positive multiple of 8", self.height));
        }
        if self.channels == 0 || self.classes == 0 || self.time_dim == 0 || self.time_dim % 2 != 0 {
            return domain("channels, classes and an even time_dim must be positive");
        }
        if self.widths.iter().any(|w| *w == 0 || w % 4 != 0) {
            return domain(format!("feature widths {:?} must be positive multiples of 4", self.widths));
        }
        if !(self.fov_deg > 0.0 && self.fov_deg < 180.0) {
            return domain(format!("fov {} outside (0, 180)", self.fov_deg));
        }
        if !(self.sigma > 0.0) {
            return domain(format!("smoothing width must be positive, got {}", self.sigma));
        }
        Ok(())
    }

    pub fn view_side(&self) -> usize {
        self.height / 2
    }

    /// The 20-camera rig at image resolution.
    pub fn rig(&self) -> Result<CameraRig> {
        let base = icosahedron_rig(self.view_side())?;
        Ok(CameraRig::new(base.poses, CameraIntrinsics::square(self.fov_deg, self.view_side())?))
    }

    pub fn grid(&self) -> Result<ErpGrid> {
        ErpGrid::pixel(self.height)
    }
}

/// Which branch a tensor belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    Pano = 0,
    Views = 1,
}

/// Attention geometry per resolution level for one rig.
#[derive(Debug, Clone)]
pub struct Geometry {
    pub rig: CameraRig,
    levels: BTreeMap<usize, Arc<SiteGeometry>>,
}

impl Geometry {
    pub fn build(cfg: &ToyConfig, rig: &CameraRig) -> Result<Self> {
        let mut levels = BTreeMap::new();
        for site in &cfg.sites {
            let l = site.level();
            if let std::collections::btree_map::Entry::Vacant(e) = levels.entry(l) {
                let grid = ErpGrid::pixel(cfg.height >> l)?;
                e.insert(Arc::new(SiteGeometry::build(&grid, rig, cfg.widths[l], cfg.sigma)?));
            }
        }
        Ok(Self { rig: rig.clone(), levels })
    }

    fn level(&self, l: usize) -> &SiteGeometry {
        &self.levels[&l]
    }
}

#[derive(Debug, Clone)]
struct Adapters {
    a: [Conv2d; 8],
}

#[derive(Debug, Clone)]
pub struct ToyDenoiser {
    pub cfg: ToyConfig,
    pub store: ParamStore,
    conv_in: Conv2d,
    down1: Conv2d,
    conv1: Conv2d,
    down2: Conv2d,
    mid: Conv2d,
    conv_u2: Conv2d,
    conv_u1: Conv2d,
    conv_u0: Conv2d,
    conv_out: Conv2d,
    adapters: [Adapters; 2],
    time_in: Linear,
    cond: ParamId,
    emb_out: [Linear; 3],
    sites: Vec<(Site, EppaParams)>,
    geometry: Geometry,
}

struct BlockCache {
    conv: ConvCache,
    adapter: ConvCache,
    pre: Tensor4,
}

struct BranchTape {
    blocks: Vec<BlockCache>,
    out: ConvCache,
}

struct SiteTape {
    to_pano: EppaCache,
    to_views: EppaCache,
    shift: i64,
}

struct EmbTape {
    sinus: Vec<f64>,
    pre: Vec<f64>,
    hidden: Vec<f64>,
    y: usize,
}

/// Everything [`ToyDenoiser::backward`] needs from a forward pass.
pub struct Tape {
    branches: [Option<BranchTape>; 2],
    sites: Vec<Option<SiteTape>>,
    emb: EmbTape,
}

/// Sinusoidal timestep features, `sin` half then `cos` half.
pub fn timestep_embedding(t: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let f = (-(10000f64.ln()) * i as f64 / half as f64).exp();
        let a = t as f64 * f;
        out[i] = a.sin();
        out[half + i] = a.cos();
    }
    out
}

/// Cyclic shift of every row by `shift` columns to the right.
pub fn roll_tensor(x: &Tensor4, shift: i64) -> Tensor4 {
    let w = x.w;
    let s = shift.rem_euclid(w as i64) as usize;
    if s == 0 {
        return x.clone();
    }
    let mut out = x.clone();
    for (src, dst) in x.data.chunks(w).zip(out.data.chunks_mut(w)) {
        dst[s..].copy_from_slice(&src[..w - s]);
        dst[..s].copy_from_slice(&src[w - s..]);
    }
    out
}

impl ToyDenoiser {
    pub fn new(cfg: ToyConfig, seed: u64) -> Result<Self> {
        let rig = cfg.rig()?;
        Self::with_rig(cfg, seed, &rig)
    }

    pub fn with_rig(cfg: ToyConfig, seed: u64, rig: &CameraRig) -> Result<Self> {
        cfg.validate()?;
        if rig.intrinsics.width() != cfg.view_side() || rig.intrinsics.height() != cfg.view_side() {
            return shape(format!("rig images must be {0}x{0}", cfg.view_side()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore::new();
        let [c0, c1, c2] = cfg.widths;
        let ci = cfg.channels;
        let conv_in = Conv2d::new(&mut s, "conv_in", ci, c0, 3, 1, &mut rng);
        let down1 = Conv2d::new(&mut s, "down1", c0, c1, 3, 2, &mut rng);
        let conv1 = Conv2d::new(&mut s, "conv1", c1, c1, 3, 1, &mut rng);
        let down2 = Conv2d::new(&mut s, "down2", c1, c2, 3, 2, &mut rng);
        let mid = Conv2d::new(&mut s, "mid", c2, c2, 3, 1, &mut rng);
        let conv_u2 = Conv2d::new(&mut s, "conv_u2", c2, c2, 3, 1, &mut rng);
        let conv_u1 = Conv2d::new(&mut s, "conv_u1", c2, c1, 3, 1, &mut rng);
        let conv_u0 = Conv2d::new(&mut s, "conv_u0", c1, c0, 3, 1, &mut rng);
        let conv_out = Conv2d::new(&mut s, "conv_out", c0, ci, 3, 1, &mut rng);
        let widths = [c0, c1, c1, c2, c2, c2, c1, c0];
        let adapters = ["pano", "views"].map(|b| Adapters {
            a: std::array::from_fn(|i| Conv2d::zeroed(&mut s, &format!("adapter.{b}.{i}"), widths[i], widths[i], 1)),
        });
        let time_in = Linear::new(&mut s, "time_in", cfg.time_dim, cfg.time_dim, &mut rng);
        let cond = s.normal("cond_table", vec![cfg.classes, cfg.time_dim], 1.0, &mut rng);
        let emb_out = [0, 1, 2].map(|l| Linear::new(&mut s, &format!("emb_out.{l}"), cfg.time_dim, cfg.widths[l], &mut rng));
        let mut sites = Vec::new();
        let mut seen = cfg.sites.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != cfg.sites.len() {
            return domain("attention sites listed twice");
        }
        for site in Site::ALL {
            if cfg.sites.contains(&site) {
                let p = EppaParams::new(&mut s, &format!("eppa.{}", site.name()), cfg.widths[site.level()], cfg.sigma, &mut rng)?;
                sites.push((site, p));
            }
        }
        let geometry = Geometry::build(&cfg, rig)?;
        Ok(Self {
            cfg,
            store: s,
            conv_in,
            down1,
            conv1,
            down2,
            mid,
            conv_u2,
            conv_u1,
            conv_u0,
            conv_out,
            adapters,
            time_in,
            cond,
            emb_out,
            sites,
            geometry,
        })
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geometry
    }

    pub fn rig(&self) -> &CameraRig {
        &self.geometry.rig
    }

    /// Trunk parameter ids (shared by both branches).
    pub fn trunk_params(&self) -> Vec<ParamId> {
        [&self.conv_in, &self.down1, &self.conv1, &self.down2, &self.mid, &self.conv_u2, &self.conv_u1, &self.conv_u0, &self.conv_out]
            .iter()
            .flat_map(|c| [c.weight, c.bias])
            .collect()
    }

    /// Adapter parameter ids private to one branch.
    pub fn adapter_params(&self, b: Branch) -> Vec<ParamId> {
        self.adapters[b as usize].a.iter().flat_map(|c| [c.weight, c.bias]).collect()
    }

    pub fn site_params(&self) -> &[(Site, EppaParams)] {
        &self.sites
    }

    fn padding(&self, b: Branch) -> Padding {
        match b {
            Branch::Pano if self.cfg.circular => Padding::Circular,
            _ => Padding::Zero,
        }
    }

    fn embed(&self, t: usize, y: usize) -> Result<(EmbTape, [Vec<f64>; 3])> {
        if y >= self.cfg.classes {
            return domain(format!("condition {y} outside 0..{}", self.cfg.classes));
        }
        if t >= self.cfg.timesteps {
            return domain(format!("timestep {t} outside 0..{}", self.cfg.timesteps));
        }
        let sinus = timestep_embedding(t, self.cfg.time_dim);
        let mut pre = self.time_in.forward(&self.store, &sinus);
        let d = self.cfg.time_dim;
        for (p, c) in pre.iter_mut().zip(&self.store.get(self.cond)[y * d..(y + 1) * d]) {
            *p += c;
        }
        let hidden: Vec<f64> = pre.iter().map(|v| silu_scalar(*v)).collect();
        let levels = [0, 1, 2].map(|l| self.emb_out[l].forward(&self.store, &hidden));
        Ok((EmbTape { sinus, pre, hidden, y }, levels))
    }

    fn block(&self, b: Branch, conv: &Conv2d, ai: usize, x: &Tensor4, emb: Option<&[f64]>, skip: Option<&Tensor4>) -> Result<(Tensor4, BlockCache)> {
        let (z, conv_cache) = conv.forward(&self.store, x, self.padding(b))?;
        let (mut pre, adapter) = self.adapters[b as usize].a[ai].forward(&self.store, &z, Padding::Zero)?;
        pre.add_assign(&z);
        if let Some(e) = emb {
            add_channel_bias(&mut pre, e);
        }
        if let Some(s) = skip {
            pre.add_assign(s);
        }
        let out = silu(&pre);
        Ok((out, BlockCache { conv: conv_cache, adapter, pre }))
    }

    /// Returns `(dx, d pre-activation)`; the latter is the gradient reaching
    /// the embedding bias and the skip input.
    fn block_backward(&self, b: Branch, conv: &Conv2d, ai: usize, cache: &BlockCache, dy: &Tensor4, grads: &mut Grads) -> (Tensor4, Tensor4) {
        let dpre = silu_backward(&cache.pre, dy);
        let mut dz = self.adapters[b as usize].a[ai].backward(&self.store, &cache.adapter, &dpre, grads);
        dz.add_assign(&dpre);
        let dx = conv.backward(&self.store, &cache.conv, &dz, grads);
        (dx, dpre)
    }

    fn check_inputs(&self, inputs: &[(Branch, &Tensor4)]) -> Result<()> {
        let (h, s, c) = (self.cfg.height, self.cfg.view_side(), self.cfg.channels);
        for (b, x) in inputs {
            let ok = match b {
                Branch::Pano => (x.n, x.c, x.h, x.w) == (1, c, h, 2 * h),
                Branch::Views => (x.n, x.c, x.h, x.w) == (self.rig().len(), c, s, s),
            };
            if !ok {
                return shape(format!("{b:?} input {}x{}x{}x{} does not match the model", x.n, x.c, x.h, x.w));
            }
            if !x.data.iter().all(|v| v.is_finite()) {
                return Err(Error::Data(format!("{b:?} input has non-finite values")));
            }
        }
        Ok(())
    }

    fn run_site(&self, si: usize, acts: &mut [Option<Tensor4>; 2], quarter_turns: i64, geom: &Geometry) -> Result<Option<SiteTape>> {
        let (Some(p), Some(v)) = (&acts[0], &acts[1]) else {
            return Ok(None);
        };
        let (site, params) = &self.sites[si];
        if !p.data.iter().chain(&v.data).all(|x| x.is_finite()) {
            return Err(Error::Numerical(format!("non-finite activations entering the {} site", site.name())));
        }
        let g = geom.level(site.level());
        let shift = quarter_turns * (p.w / 4) as i64;
        let pano = FeatureMap::panorama(roll_tensor(p, -shift))?;
        let views = FeatureMap::perspective(v.clone())?;
        let (new_p, to_pano) = eppa_apply(&self.store, params, &pano, &views, &g.spe.pano, &g.spe.views, &g.to_pano)?;
        let (new_v, to_views) = eppa_apply(&self.store, params, &views, &pano, &g.spe.views, &g.spe.pano, &g.to_views)?;
        acts[0] = Some(roll_tensor(new_p.tensor(), shift));
        acts[1] = Some(new_v.into_tensor());
        Ok(Some(SiteTape { to_pano, to_views, shift }))
    }

    fn site_backward(&self, si: usize, tape: &SiteTape, grads_acts: &mut [Option<Tensor4>; 2], grads: &mut Grads) {
        let params = &self.sites[si].1;
        let dp = roll_tensor(grads_acts[0].as_ref().expect("pano gradient"), -tape.shift);
        let dv = grads_acts[1].as_ref().expect("view gradient");
        let (mut dp_t, dv_s) = eppa_backward(&self.store, params, &tape.to_pano, &dp, grads);
        let (mut dv_t, dp_s) = eppa_backward(&self.store, params, &tape.to_views, dv, grads);
        dp_t.add_assign(&dp_s);
        dv_t.add_assign(&dv_s);
        grads_acts[0] = Some(roll_tensor(&dp_t, tape.shift));
        grads_acts[1] = Some(dv_t);
    }

    /// Forward pass of the active branches. With both branches present the
    /// configured attention sites couple them; `quarter_turns` says how far
    /// the panorama content (and with it the rig) has been yawed.
    pub fn forward(&self, pano: Option<&Tensor4>, views: Option<&Tensor4>, t: usize, y: usize, quarter_turns: i64) -> Result<(Option<Tensor4>, Option<Tensor4>, Tape)> {
        self.forward_with(pano, views, t, y, quarter_turns, &self.geometry)
    }

    pub fn forward_with(
        &self,
        pano: Option<&Tensor4>,
        views: Option<&Tensor4>,
        t: usize,
        y: usize,
        quarter_turns: i64,
        geom: &Geometry,
    ) -> Result<(Option<Tensor4>, Option<Tensor4>, Tape)> {
        let mut inputs = Vec::new();
        if let Some(p) = pano {
            inputs.push((Branch::Pano, p));
        }
        if let Some(v) = views {
            inputs.push((Branch::Views, v));
        }
        self.check_inputs(&inputs)?;
        if geom.rig.len() != self.rig().len() {
            return shape("geometry rig size differs from the model rig");
        }
        let (emb_tape, e) = self.embed(t, y)?;
        let mut caches: [Vec<BlockCache>; 2] = [Vec::new(), Vec::new()];
        let mut x: [Option<Tensor4>; 2] = [pano.cloned(), views.cloned()];
        let mut site_tapes: Vec<Option<SiteTape>> = (0..self.sites.len()).map(|_| None).collect();
        let mut saved: [[Option<Tensor4>; 3]; 2] = Default::default();
        let branches = [Branch::Pano, Branch::Views];

        macro_rules! stage {
            ($conv:expr, $ai:expr, $emb:expr, $skip:expr, $up:expr) => {
                for b in branches {
                    if let Some(input) = x[b as usize].take() {
                        let input = if $up { upsample2(&input) } else { input };
                        let skip: Option<&Tensor4> = $skip.map(|k: usize| saved[b as usize][k].as_ref().expect("skip"));
                        let (out, cache) = self.block(b, $conv, $ai, &input, $emb, skip)?;
                        caches[b as usize].push(cache);
                        x[b as usize] = Some(out);
                    }
                }
            };
        }
        macro_rules! site {
            ($site:expr) => {
                if let Some(si) = self.sites.iter().position(|(s, _)| *s == $site) {
                    site_tapes[si] = self.run_site(si, &mut x, quarter_turns, geom)?;
                }
            };
        }
        macro_rules! save {
            ($k:expr) => {
                for b in 0..2 {
                    saved[b][$k] = x[b].clone();
                }
            };
        }

        stage!(&self.conv_in, 0, Some(&e[0][..]), None, false);
        save!(0);
        stage!(&self.down1, 1, None, None, false);
        site!(Site::Down1);
        stage!(&self.conv1, 2, Some(&e[1][..]), None, false);
        save!(1);
        stage!(&self.down2, 3, None, None, false);
        site!(Site::Down2);
        save!(2);
        stage!(&self.mid, 4, Some(&e[2][..]), None, false);
        site!(Site::Mid);
        stage!(&self.conv_u2, 5, None, Some(2), false);
        site!(Site::Up2);
        stage!(&self.conv_u1, 6, None, Some(1), true);
        site!(Site::Up1);
        stage!(&self.conv_u0, 7, None, Some(0), true);

        let mut outs: [Option<Tensor4>; 2] = [None, None];
        let mut out_caches: [Option<ConvCache>; 2] = [None, None];
        for b in branches {
            if let Some(h) = x[b as usize].take() {
                let (o, c) = self.conv_out.forward(&self.store, &h, self.padding(b))?;
                if !o.data.iter().all(|v| v.is_finite()) {
                    return Err(Error::Numerical(format!("non-finite {b:?} output at t = {t}")));
                }
                outs[b as usize] = Some(o);
                out_caches[b as usize] = Some(c);
            }
        }
        let [c0, c1] = caches;
        let [o0, o1] = out_caches;
        let branches_tape = [
            o0.map(|out| BranchTape { blocks: c0, out }),
            o1.map(|out| BranchTape { blocks: c1, out }),
        ];
        let [p, v] = outs;
        Ok((p, v, Tape { branches: branches_tape, sites: site_tapes, emb: emb_tape }))
    }

    /// Accumulates parameter gradients for output gradients `d_pano`,
    /// `d_views` (each required iff that branch ran).
    pub fn backward(&self, tape: &Tape, d_pano: Option<&Tensor4>, d_views: Option<&Tensor4>, grads: &mut Grads) {
        let branches = [Branch::Pano, Branch::Views];
        let mut g: [Option<Tensor4>; 2] = [None, None];
        let dout = [d_pano, d_views];
        for b in branches {
            if let (Some(bt), Some(d)) = (&tape.branches[b as usize], dout[b as usize]) {
                g[b as usize] = Some(self.conv_out.backward(&self.store, &bt.out, d, grads));
            }
        }
        let mut d_skip: [[Option<Tensor4>; 3]; 2] = Default::default();
        let mut d_emb = [vec![0.0; self.cfg.widths[0]], vec![0.0; self.cfg.widths[1]], vec![0.0; self.cfg.widths[2]]];

        let convs = [&self.conv_in, &self.down1, &self.conv1, &self.down2, &self.mid, &self.conv_u2, &self.conv_u1, &self.conv_u0];
        // (block index, embedding level, skip slot, upsampled input, site after block)
        let plan: [(usize, Option<usize>, Option<usize>, bool, Option<Site>); 8] = [
            (0, Some(0), None, false, None),
            (1, None, None, false, Some(Site::Down1)),
            (2, Some(1), None, false, None),
            (3, None, None, false, Some(Site::Down2)),
            (4, Some(2), None, false, Some(Site::Mid)),
            (5, None, Some(2), false, Some(Site::Up2)),
            (6, None, Some(1), true, Some(Site::Up1)),
            (7, None, Some(0), true, None),
        ];
        // skip slots hold the outputs of blocks 0 and 2 and of the Down2 site
        let saved_after = |block: usize| match block {
            0 => Some(0),
            2 => Some(1),
            3 => Some(2),
            _ => None,
        };
        for &(bi, emb_level, skip, up, site) in plan.iter().rev() {
            if let Some(slot) = saved_after(bi) {
                for b in 0..2 {
                    if let (Some(gb), Some(ds)) = (g[b].as_mut(), d_skip[b][slot].take()) {
                        gb.add_assign(&ds);
                    }
                }
            }
            if let Some(site) = site {
                if let Some(si) = self.sites.iter().position(|(s, _)| *s == site) {
                    if let Some(st) = &tape.sites[si] {
                        self.site_backward(si, st, &mut g, grads);
                    }
                }
            }
            for b in branches {
                let (Some(bt), Some(dy)) = (&tape.branches[b as usize], g[b as usize].take()) else {
                    continue;
                };
                let (dx, dpre) = self.block_backward(b, convs[bi], bi, &bt.blocks[bi], &dy, grads);
                if let Some(l) = emb_level {
                    for (a, s) in d_emb[l].iter_mut().zip(channel_sums(&dpre)) {
                        *a += s;
                    }
                }
                if let Some(slot) = skip {
                    d_skip[b as usize][slot] = Some(dpre);
                }
                g[b as usize] = Some(if up { upsample2_backward(&dx) } else { dx });
            }
        }
        // embedding path
        let e = &tape.emb;
        let mut d_hidden = vec![0.0; self.cfg.time_dim];
        for l in 0..3 {
            let dh = self.emb_out[l].backward(&self.store, &e.hidden, &d_emb[l], grads);
            for (a, b) in d_hidden.iter_mut().zip(dh) {
                *a += b;
            }
        }
        let d_pre: Vec<f64> = d_hidden.iter().zip(&e.pre).map(|(g, p)| g * silu_scalar_grad(*p)).collect();
        let d = self.cfg.time_dim;
        for (a, b) in grads.get_mut(self.cond)[e.y * d..(e.y + 1) * d].iter_mut().zip(&d_pre) {
            *a += b;
        }
        self.time_in.backward(&self.store, &e.sinus, &d_pre, grads);
    }

    /// Noise predictions of both branches in one coupled pass.
    pub fn dual_forward(&self, pano: &Tensor4, views: &Tensor4, t: usize, y: usize, quarter_turns: i64) -> Result<(Tensor4, Tensor4)> {
        let (p, v, _) = self.forward(Some(pano), Some(views), t, y, quarter_turns)?;
        Ok((p.expect("pano output"), v.expect("view output")))
    }

    /// One branch on its own, without attention.
    pub fn single_forward(&self, branch: Branch, x: &Tensor4, t: usize, y: usize) -> Result<Tensor4> {
        let (p, v, _) = match branch {
            Branch::Pano => self.forward(Some(x), None, t, y, 0)?,
            Branch::Views => self.forward(None, Some(x), t, y, 0)?,
        };
        Ok(p.or(v).expect("branch output"))
    }
}
