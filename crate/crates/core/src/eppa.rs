//! Projection attention between panorama and perspective feature maps.
//!
//! Both directions at an insertion site share one [`EppaParams`]; the
//! reverse direction uses the transposed mask.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::sync::Arc;

use rand::Rng;

use crate::error::{domain, shape, Error, Result};
use crate::nn::{gemm, Grads, ParamId, ParamStore, Tensor4};
use crate::resample::{SampleMode, Warp};
use crate::sphere::{CameraRig, ErpGrid, SphericalCoord};

/// Positional encoding width; `L = c / 4` frequency bands per angle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SpeConfig {
    channels: usize,
}

impl SpeConfig {
    pub fn new(channels: usize) -> Result<Self> {
        if channels == 0 || channels % 4 != 0 {
            return domain(format!("encoding width {channels} must be a positive multiple of 4"));
        }
        Ok(Self { channels })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn bands(&self) -> usize {
        self.channels / 4
    }
}

fn gamma(x: f64, bands: usize, out: &mut Vec<f64>) {
    for k in 0..bands {
        let a = 2f64.powi(k as i32) * PI * x;
        out.push(a.sin());
        out.push(a.cos());
    }
}

/// Fourier features of `(theta / pi, 2 phi / pi)`.
pub fn spe_encode(cfg: &SpeConfig, c: &SphericalCoord) -> Vec<f64> {
    let mut out = Vec::with_capacity(cfg.channels);
    gamma(c.theta() / PI, cfg.bands(), &mut out);
    gamma(2.0 * c.phi() / PI, cfg.bands(), &mut out);
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Panorama,
    Perspective,
}

/// Feature maps of one branch: a single `c x h x 2h` panorama map or `N`
/// square view maps.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    role: Role,
    tensor: Tensor4,
}

impl FeatureMap {
    pub fn panorama(tensor: Tensor4) -> Result<Self> {
        if tensor.n != 1 || tensor.w != 2 * tensor.h {
            return shape(format!("panorama features must be 1 x c x h x 2h, got {}x{}x{}x{}", tensor.n, tensor.c, tensor.h, tensor.w));
        }
        Ok(Self { role: Role::Panorama, tensor })
    }

    pub fn perspective(tensor: Tensor4) -> Result<Self> {
        if tensor.h != tensor.w {
            return shape(format!("view features must be square, got {}x{}", tensor.h, tensor.w));
        }
        Ok(Self { role: Role::Perspective, tensor })
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn tensor(&self) -> &Tensor4 {
        &self.tensor
    }

    pub fn into_tensor(self) -> Tensor4 {
        self.tensor
    }

    pub fn positions(&self) -> usize {
        self.tensor.n * self.tensor.h * self.tensor.w
    }
}

/// Encoding maps for one feature resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct SpeMaps {
    pub pano: Tensor4,
    pub views: Tensor4,
}

/// `grid` is the panorama feature grid; views are `h/2 x h/2`.
pub fn build_spe_maps(cfg: &SpeConfig, grid: &ErpGrid, rig: &CameraRig) -> Result<SpeMaps> {
    let (h, w) = (grid.height(), grid.width());
    let c = cfg.channels();
    let mut pano = Tensor4::zeros(1, c, h, w);
    for r in 0..h {
        for k in 0..w {
            let coord = crate::sphere::sph_from_erp_pixel(grid, k as f64 + 0.5, r as f64 + 0.5)?;
            for (ch, v) in spe_encode(cfg, &coord).into_iter().enumerate() {
                pano.data[(ch * h + r) * w + k] = v;
            }
        }
    }
    let rig = rig.with_image_side(h / 2)?;
    let side = h / 2;
    let planar = crate::image::Planar::new(c, h, w, pano.data.clone())?;
    let mut views = Tensor4::zeros(rig.len(), c, side, side);
    let per = c * side * side;
    for (i, pose) in rig.poses.iter().enumerate() {
        let warp = Warp::new(grid, pose, &rig.intrinsics, SampleMode::Nearest)?;
        views.data[i * per..(i + 1) * per].copy_from_slice(&warp.apply(&planar)?.data);
    }
    Ok(SpeMaps { pano, views })
}

/// Dense soft mask, `rows = target positions`, `cols = source positions`.
#[derive(Debug, Clone, PartialEq)]
pub struct EppaMask {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl EppaMask {
    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn transpose(&self) -> EppaMask {
        let mut data = vec![0.0; self.data.len()];
        for r in 0..self.rows {
            for c in 0..self.cols {
                data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        EppaMask { rows: self.cols, cols: self.rows, data }
    }
}

fn gaussian_kernel(sigma: f64) -> [[f64; 5]; 5] {
    let mut k = [[0.0; 5]; 5];
    let mut sum = 0.0;
    for (dy, row) in k.iter_mut().enumerate() {
        for (dx, v) in row.iter_mut().enumerate() {
            let (a, b) = (dx as f64 - 2.0, dy as f64 - 2.0);
            *v = (-(a * a + b * b) / (2.0 * sigma * sigma)).exp();
            sum += *v;
        }
    }
    for v in k.iter_mut().flatten() {
        *v /= sum;
    }
    k
}

/// Mask for attention from the panorama (rows, `h*w`) to the stacked views
/// (cols, `N*(h/2)^2`). Each panorama pixel's bilinear footprint in every
/// view is smoothed by a 5x5 Gaussian and the row is rescaled jointly to
/// `[-1, 1]`.
pub fn build_attention_masks(grid: &ErpGrid, rig: &CameraRig, sigma: f64) -> Result<EppaMask> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return domain(format!("smoothing width must be positive, got {sigma}"));
    }
    let side = grid.height() / 2;
    let rig = rig.with_image_side(side)?;
    let rows = grid.pixels();
    let per_view = side * side;
    let cols = rig.len() * per_view;
    let kernel = gaussian_kernel(sigma);
    let mut data = vec![0.0; rows * cols];
    for (i, pose) in rig.poses.iter().enumerate() {
        let warp = Warp::new(grid, pose, &rig.intrinsics, SampleMode::Bilinear)?;
        for (p, taps) in warp.weights() {
            let (py, px) = ((p / side) as i64, (p % side) as i64);
            for (j, wt) in taps {
                if wt == 0.0 {
                    continue;
                }
                let row = &mut data[j * cols + i * per_view..][..per_view];
                for (dy, krow) in kernel.iter().enumerate() {
                    let qy = py + dy as i64 - 2;
                    if !(0..side as i64).contains(&qy) {
                        continue;
                    }
                    for (dx, kv) in krow.iter().enumerate() {
                        let qx = px + dx as i64 - 2;
                        if (0..side as i64).contains(&qx) {
                            row[qy as usize * side + qx as usize] += wt * kv;
                        }
                    }
                }
            }
        }
    }
    for row in data.chunks_mut(cols) {
        let max = row.iter().copied().fold(0.0, f64::max);
        if max > 0.0 {
            for v in row.iter_mut() {
                *v = 2.0 * *v / max - 1.0;
            }
        } else {
            row.fill(-1.0);
        }
    }
    Ok(EppaMask { rows, cols, data })
}

/// Precomputed geometry of one feature resolution: encodings and both mask
/// directions.
#[derive(Debug, Clone)]
pub struct SiteGeometry {
    pub spe: SpeMaps,
    /// Panorama queries attending to view keys.
    pub to_pano: EppaMask,
    /// View queries attending to panorama keys.
    pub to_views: EppaMask,
}

impl SiteGeometry {
    pub fn build(grid: &ErpGrid, rig: &CameraRig, channels: usize, sigma: f64) -> Result<Self> {
        let spe = build_spe_maps(&SpeConfig::new(channels)?, grid, rig)?;
        let to_pano = build_attention_masks(grid, rig, sigma)?;
        let to_views = to_pano.transpose();
        Ok(Self { spe, to_pano, to_views })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
struct GeometryKey {
    height: usize,
    downsample: usize,
    channels: usize,
    sigma: u64,
    fov: u64,
    poses: Vec<u64>,
}

/// Memoises [`SiteGeometry`] by `(grid, rig, sigma, channels)`.
#[derive(Debug, Default)]
pub struct GeometryCache {
    entries: HashMap<GeometryKey, Arc<SiteGeometry>>,
}

impl GeometryCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&mut self, grid: &ErpGrid, rig: &CameraRig, channels: usize, sigma: f64) -> Result<Arc<SiteGeometry>> {
        let key = GeometryKey {
            height: grid.height(),
            downsample: grid.downsample(),
            channels,
            sigma: sigma.to_bits(),
            fov: rig.intrinsics.fov_deg().to_bits(),
            poses: rig.poses.iter().flat_map(|p| p.rotation().iter().map(|v| v.to_bits()).collect::<Vec<_>>()).collect(),
        };
        if let Some(g) = self.entries.get(&key) {
            return Ok(g.clone());
        }
        let g = Arc::new(SiteGeometry::build(grid, rig, channels, sigma)?);
        self.entries.insert(key, g.clone());
        Ok(g)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Projections of one insertion site. `wo`/`bo` start at zero so a fresh
/// site is an identity map.
#[derive(Debug, Clone)]
pub struct EppaParams {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
    pub channels: usize,
    pub sigma: f64,
}

impl EppaParams {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, sigma: f64, rng: &mut impl Rng) -> Result<Self> {
        SpeConfig::new(channels)?;
        if !(sigma > 0.0) {
            return domain(format!("smoothing width must be positive, got {sigma}"));
        }
        let std = (1.0 / channels as f64).sqrt();
        let c = channels;
        Ok(Self {
            wq: store.normal(format!("{name}.q"), vec![c, c], std, rng),
            wk: store.normal(format!("{name}.k"), vec![c, c], std, rng),
            wv: store.normal(format!("{name}.v"), vec![c, c], std, rng),
            wo: store.zeros(format!("{name}.out.weight"), vec![c, c]),
            bo: store.zeros(format!("{name}.out.bias"), vec![c]),
            channels,
            sigma,
        })
    }
}

/// Intermediates kept for [`eppa_backward`].
#[derive(Debug, Clone)]
pub struct EppaCache {
    nt: usize,
    ns: usize,
    qin: Vec<f64>,
    kin: Vec<f64>,
    xs: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    p: Vec<f64>,
    o: Vec<f64>,
    target_shape: Tensor4,
    source_shape: Tensor4,
}

impl EppaCache {
    /// Row-stochastic attention weights, `target x source`.
    pub fn attention(&self) -> &[f64] {
        &self.p
    }
}

fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Error::Shape(msg()))
    }
}

/// Masked cross-attention from `source` into `target`, returning the
/// residually updated target.
pub fn eppa_apply(
    store: &ParamStore,
    params: &EppaParams,
    target: &FeatureMap,
    source: &FeatureMap,
    spe_target: &Tensor4,
    spe_source: &Tensor4,
    mask: &EppaMask,
) -> Result<(FeatureMap, EppaCache)> {
    let c = params.channels;
    let (t, s) = (target.tensor(), source.tensor());
    check(t.c == c && s.c == c, || format!("site expects {c} channels, got {} and {}", t.c, s.c))?;
    check(spe_target.same_shape(t) && spe_source.same_shape(s), || "encoding maps do not match features".into())?;
    let (nt, ns) = (target.positions(), source.positions());
    check(mask.rows == nt && mask.cols == ns, || format!("mask {}x{} does not match {nt}x{ns}", mask.rows, mask.cols))?;
    if !t.data.iter().chain(&s.data).all(|v| v.is_finite()) {
        return Err(Error::Data("non-finite attention input".into()));
    }

    let xt = t.to_tokens();
    let xs = s.to_tokens();
    let qin = add(&xt, &spe_target.to_tokens());
    let kin = add(&xs, &spe_source.to_tokens());
    let mut q = vec![0.0; nt * c];
    let mut k = vec![0.0; ns * c];
    let mut v = vec![0.0; ns * c];
    gemm(nt, c, c, 1.0, &qin, false, store.get(params.wq), true, 0.0, &mut q);
    gemm(ns, c, c, 1.0, &kin, false, store.get(params.wk), true, 0.0, &mut k);
    gemm(ns, c, c, 1.0, &xs, false, store.get(params.wv), true, 0.0, &mut v);

    let mut p = mask.data.clone();
    gemm(nt, c, ns, 1.0 / (c as f64).sqrt(), &q, false, &k, true, 1.0, &mut p);
    for row in p.chunks_mut(ns) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for x in row.iter_mut() {
            *x = (*x - m).exp();
            z += *x;
        }
        for x in row.iter_mut() {
            *x /= z;
        }
    }
    let mut o = vec![0.0; nt * c];
    gemm(nt, ns, c, 1.0, &p, false, &v, false, 0.0, &mut o);

    let mut y = xt;
    let bo = store.get(params.bo);
    for row in y.chunks_mut(c) {
        for (a, b) in row.iter_mut().zip(bo) {
            *a += b;
        }
    }
    gemm(nt, c, c, 1.0, &o, false, store.get(params.wo), true, 1.0, &mut y);
    if !y.iter().all(|v| v.is_finite()) {
        return Err(Error::Numerical("non-finite attention output".into()));
    }
    let out = t.from_tokens_like(&y);
    let out = match target.role() {
        Role::Panorama => FeatureMap::panorama(out)?,
        Role::Perspective => FeatureMap::perspective(out)?,
    };
    let cache = EppaCache {
        nt,
        ns,
        qin,
        kin,
        xs,
        q,
        k,
        v,
        p,
        o,
        target_shape: t.zeros_like(),
        source_shape: s.zeros_like(),
    };
    Ok((out, cache))
}

/// Gradients of [`eppa_apply`]; accumulates parameter gradients into
/// `grads` and returns `(d target, d source)`.
pub fn eppa_backward(store: &ParamStore, params: &EppaParams, cache: &EppaCache, dy: &Tensor4, grads: &mut Grads) -> (Tensor4, Tensor4) {
    let c = params.channels;
    let (nt, ns) = (cache.nt, cache.ns);
    let scale = 1.0 / (c as f64).sqrt();
    let dr = dy.to_tokens();
    let mut dxt = dr.clone();

    gemm(c, nt, c, 1.0, &dr, true, &cache.o, false, 1.0, grads.get_mut(params.wo));
    {
        let gb = grads.get_mut(params.bo);
        for row in dr.chunks(c) {
            for (g, d) in gb.iter_mut().zip(row) {
                *g += d;
            }
        }
    }
    let mut d_o = vec![0.0; nt * c];
    gemm(nt, c, c, 1.0, &dr, false, store.get(params.wo), false, 0.0, &mut d_o);

    let mut ds = vec![0.0; nt * ns];
    gemm(nt, c, ns, 1.0, &d_o, false, &cache.v, true, 0.0, &mut ds);
    let mut dv = vec![0.0; ns * c];
    gemm(ns, nt, c, 1.0, &cache.p, true, &d_o, false, 0.0, &mut dv);
    for (drow, prow) in ds.chunks_mut(ns).zip(cache.p.chunks(ns)) {
        let dot: f64 = drow.iter().zip(prow).map(|(a, b)| a * b).sum();
        for (d, p) in drow.iter_mut().zip(prow) {
            *d = p * (*d - dot);
        }
    }
    let mut dq = vec![0.0; nt * c];
    gemm(nt, ns, c, scale, &ds, false, &cache.k, false, 0.0, &mut dq);
    let mut dk = vec![0.0; ns * c];
    gemm(ns, nt, c, scale, &ds, true, &cache.q, false, 0.0, &mut dk);

    gemm(c, nt, c, 1.0, &dq, true, &cache.qin, false, 1.0, grads.get_mut(params.wq));
    gemm(nt, c, c, 1.0, &dq, false, store.get(params.wq), false, 1.0, &mut dxt);
    gemm(c, ns, c, 1.0, &dk, true, &cache.kin, false, 1.0, grads.get_mut(params.wk));
    gemm(c, ns, c, 1.0, &dv, true, &cache.xs, false, 1.0, grads.get_mut(params.wv));
    let mut dxs = vec![0.0; ns * c];
    gemm(ns, c, c, 1.0, &dk, false, store.get(params.wk), false, 0.0, &mut dxs);
    gemm(ns, c, c, 1.0, &dv, false, store.get(params.wv), false, 1.0, &mut dxs);

    (cache.target_shape.from_tokens_like(&dxt), cache.source_shape.from_tokens_like(&dxs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sphere::icosahedron_rig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn spe_examples() {
        let cfg = SpeConfig::new(8).unwrap();
        let origin = SphericalCoord::new(0.0, 0.0).unwrap();
        assert_eq!(spe_encode(&cfg, &origin), vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
        let wide = SpeConfig::new(320).unwrap();
        assert_eq!(spe_encode(&wide, &origin).len(), 320);
        assert!(SpeConfig::new(6).is_err());
        let left = spe_encode(&cfg, &SphericalCoord::new(-PI, 0.3).unwrap());
        let right = spe_encode(&cfg, &SphericalCoord::new(f64::next_down(PI), 0.3).unwrap());
        for (a, b) in left.iter().zip(&right) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn spe_maps_correspond() {
        let grid = ErpGrid::pixel(8).unwrap();
        let rig = icosahedron_rig(4).unwrap();
        let cfg = SpeConfig::new(8).unwrap();
        let maps = build_spe_maps(&cfg, &grid, &rig).unwrap();
        assert_eq!((maps.views.n, maps.views.h), (20, 4));
        let (h, w) = (8, 16);
        let pix = |t: &Tensor4, img: usize, r: usize, k: usize| -> Vec<f64> {
            (0..8).map(|ch| t.data[((img * 8 + ch) * t.h + r) * t.w + k]).collect()
        };
        let centre = sph_from_pixel_centre(&grid, h / 2, w / 2);
        assert_eq!(pix(&maps.pano, 0, h / 2, w / 2), spe_encode(&cfg, &centre));
        let pano_vectors: Vec<Vec<f64>> = (0..h).flat_map(|r| (0..w).map(move |k| (r, k))).map(|(r, k)| pix(&maps.pano, 0, r, k)).collect();
        for img in 0..20 {
            for r in 0..4 {
                for k in 0..4 {
                    assert!(pano_vectors.contains(&pix(&maps.views, img, r, k)));
                }
            }
        }
    }

    fn sph_from_pixel_centre(grid: &ErpGrid, r: usize, k: usize) -> SphericalCoord {
        crate::sphere::sph_from_erp_pixel(grid, k as f64 + 0.5, r as f64 + 0.5).unwrap()
    }

    #[test]
    fn mask_shape_and_bounds() {
        let grid = ErpGrid::pixel(32).unwrap();
        let rig = icosahedron_rig(16).unwrap();
        let m = build_attention_masks(&grid, &rig, 1.0).unwrap();
        assert_eq!((m.rows, m.cols), (2048, 5120));
        for r in 0..m.rows {
            let row = m.row(r);
            assert!(row.iter().all(|v| (-1.0..=1.0).contains(v)));
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            assert!(max == 1.0 || row.iter().all(|v| *v == -1.0));
        }
        assert!(build_attention_masks(&grid, &rig, 0.0).is_err());
        let t = m.transpose();
        assert_eq!(t.get(17, 3), m.get(3, 17));
    }

    #[test]
    fn mask_argmax_matches_projection() {
        let grid = ErpGrid::pixel(16).unwrap();
        let rig = icosahedron_rig(8).unwrap();
        let side = 8;
        let m = build_attention_masks(&grid, &rig, 1.0).unwrap();
        let k = rig.intrinsics;
        let mut checked = 0;
        // the first and last rows also collect the clamped taps of the whole
        // polar cap, so their peak need not sit at the pixel centre
        for r in 1..grid.height() - 1 {
            for col in 0..grid.width() {
                let row = m.row(r * grid.width() + col);
                let (best, &max) = row.iter().enumerate().fold((0, &f64::NEG_INFINITY), |a, b| if b.1 > a.1 { b } else { a });
                if max < 1.0 {
                    continue;
                }
                let view = best / (side * side);
                let (qy, qx) = ((best % (side * side)) / side, best % side);
                let dir = grid.pixel_direction(r, col);
                let cam = rig.poses[view].world_to_camera(&dir);
                assert!(cam.x > 0.0);
                let px = side as f64 / 2.0 + k.focal_x() * cam.y / cam.x;
                let py = side as f64 / 2.0 + k.focal_y() * cam.z / cam.x;
                assert!((qx as f64 + 0.5 - px).abs() <= 1.0, "pixel ({r},{col}) x {qx} vs {px}");
                assert!((qy as f64 + 0.5 - py).abs() <= 1.0, "pixel ({r},{col}) y {qy} vs {py}");
                checked += 1;
            }
        }
        assert!(checked > grid.pixels() / 2);
    }

    fn random_map(rng: &mut impl Rng, role: Role, n: usize, c: usize, h: usize, w: usize) -> FeatureMap {
        let t = Tensor4::new(n, c, h, w, (0..n * c * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        match role {
            Role::Panorama => FeatureMap::panorama(t).unwrap(),
            Role::Perspective => FeatureMap::perspective(t).unwrap(),
        }
    }

    struct Fixture {
        store: ParamStore,
        params: EppaParams,
        pano: FeatureMap,
        views: FeatureMap,
        spe_p: Tensor4,
        spe_v: Tensor4,
        mask: EppaMask,
    }

    fn fixture(trained: bool) -> Fixture {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let c = 8;
        let mut store = ParamStore::new();
        let params = EppaParams::new(&mut store, "site", c, 1.0, &mut rng).unwrap();
        if trained {
            for id in [params.wo, params.bo] {
                for v in store.get_mut(id) {
                    *v = rng.gen_range(-0.5..0.5);
                }
            }
        }
        let pano = random_map(&mut rng, Role::Panorama, 1, c, 4, 8);
        let views = random_map(&mut rng, Role::Perspective, 3, c, 4, 4);
        let spe_p = random_map(&mut rng, Role::Panorama, 1, c, 4, 8).into_tensor();
        let spe_v = random_map(&mut rng, Role::Perspective, 3, c, 4, 4).into_tensor();
        let mask = EppaMask { rows: 32, cols: 48, data: (0..32 * 48).map(|_| rng.gen_range(-1.0..1.0)).collect() };
        Fixture { store, params, pano, views, spe_p, spe_v, mask }
    }

    #[test]
    fn fresh_site_is_identity_and_rows_normalise() {
        let f = fixture(false);
        let (y, cache) = eppa_apply(&f.store, &f.params, &f.pano, &f.views, &f.spe_p, &f.spe_v, &f.mask).unwrap();
        assert_eq!(y, f.pano);
        for row in cache.attention().chunks(48) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        let t = f.mask.transpose();
        let (y, _) = eppa_apply(&f.store, &f.params, &f.views, &f.pano, &f.spe_v, &f.spe_p, &t).unwrap();
        assert_eq!(y, f.views);
    }

    #[test]
    fn raising_mask_entry_raises_weight() {
        let mut f = fixture(true);
        let (_, before) = eppa_apply(&f.store, &f.params, &f.pano, &f.views, &f.spe_p, &f.spe_v, &f.mask).unwrap();
        f.mask.data[5 * 48 + 7] += 0.1;
        let (_, after) = eppa_apply(&f.store, &f.params, &f.pano, &f.views, &f.spe_p, &f.spe_v, &f.mask).unwrap();
        assert!(after.attention()[5 * 48 + 7] > before.attention()[5 * 48 + 7]);
    }

    #[test]
    fn shared_parameters_affect_both_directions() {
        let mut f = fixture(true);
        let t = f.mask.transpose();
        let run = |f: &Fixture| {
            let a = eppa_apply(&f.store, &f.params, &f.pano, &f.views, &f.spe_p, &f.spe_v, &f.mask).unwrap().0;
            let b = eppa_apply(&f.store, &f.params, &f.views, &f.pano, &f.spe_v, &f.spe_p, &t).unwrap().0;
            (a, b)
        };
        let (a0, b0) = run(&f);
        f.store.get_mut(f.params.wv)[3] += 0.25;
        let (a1, b1) = run(&f);
        assert!(a0.tensor().max_abs_diff(a1.tensor()) > 1e-6);
        assert!(b0.tensor().max_abs_diff(b1.tensor()) > 1e-6);
    }

    #[test]
    fn rejects_bad_inputs() {
        let mut f = fixture(false);
        let small = EppaMask { rows: 4, cols: 4, data: vec![0.0; 16] };
        assert!(matches!(
            eppa_apply(&f.store, &f.params, &f.pano, &f.views, &f.spe_p, &f.spe_v, &small),
            Err(Error::Shape(_))
        ));
        let mut t = f.pano.clone().into_tensor();
        t.data[0] = f64::NAN;
        f.pano = FeatureMap::panorama(t).unwrap();
        assert!(matches!(
            eppa_apply(&f.store, &f.params, &f.pano, &f.views, &f.spe_p, &f.spe_v, &f.mask),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let f = fixture(true);
        let probe: Vec<f64> = {
            let mut rng = ChaCha8Rng::seed_from_u64(2);
            (0..f.pano.tensor().data.len()).map(|_| rng.gen_range(-1.0..1.0)).collect()
        };
        let loss = |store: &ParamStore, pano: &FeatureMap, views: &FeatureMap| -> f64 {
            let (y, _) = eppa_apply(store, &f.params, pano, views, &f.spe_p, &f.spe_v, &f.mask).unwrap();
            y.tensor().data.iter().zip(&probe).map(|(a, b)| a * b).sum()
        };
        let (_, cache) = eppa_apply(&f.store, &f.params, &f.pano, &f.views, &f.spe_p, &f.spe_v, &f.mask).unwrap();
        let dy = Tensor4::new(1, 8, 4, 8, probe.clone()).unwrap();
        let mut grads = f.store.zero_grads();
        let (dt, ds) = eppa_backward(&f.store, &f.params, &cache, &dy, &mut grads);
        let h = 1e-6;
        let close = |fd: f64, an: f64| (fd - an).abs() <= 1e-4 * fd.abs().max(an.abs()).max(1e-3);
        for i in 0..f.pano.tensor().data.len() {
            let mut p = f.pano.tensor().clone();
            p.data[i] += h;
            let mut m = f.pano.tensor().clone();
            m.data[i] -= h;
            let fd = (loss(&f.store, &FeatureMap::panorama(p).unwrap(), &f.views) - loss(&f.store, &FeatureMap::panorama(m).unwrap(), &f.views)) / (2.0 * h);
            assert!(close(fd, dt.data[i]), "target {i}: {fd} vs {}", dt.data[i]);
        }
        for i in 0..f.views.tensor().data.len() {
            let mut p = f.views.tensor().clone();
            p.data[i] += h;
            let mut m = f.views.tensor().clone();
            m.data[i] -= h;
            let fd = (loss(&f.store, &f.pano, &FeatureMap::perspective(p).unwrap()) - loss(&f.store, &f.pano, &FeatureMap::perspective(m).unwrap())) / (2.0 * h);
            assert!(close(fd, ds.data[i]), "source {i}: {fd} vs {}", ds.data[i]);
        }
        for id in [f.params.wq, f.params.wk, f.params.wv, f.params.wo, f.params.bo] {
            for j in 0..f.store.get(id).len() {
                let mut sp = f.store.clone();
                sp.get_mut(id)[j] += h;
                let mut sm = f.store.clone();
                sm.get_mut(id)[j] -= h;
                let fd = (loss(&sp, &f.pano, &f.views) - loss(&sm, &f.pano, &f.views)) / (2.0 * h);
                let an = grads.get(id)[j];
                assert!(close(fd, an), "param {id:?}[{j}]: {fd} vs {an}");
            }
        }
    }

    #[test]
    fn cache_reuses_geometry() {
        let grid = ErpGrid::pixel(8).unwrap();
        let rig = icosahedron_rig(4).unwrap();
        let mut cache = GeometryCache::new();
        let a = cache.get(&grid, &rig, 8, 1.0).unwrap();
        let b = cache.get(&grid, &rig, 8, 1.0).unwrap();
        assert!(Arc::ptr_eq(&a, &b));
        cache.get(&grid, &rig, 8, 2.0).unwrap();
        assert_eq!(cache.len(), 2);
    }
}
