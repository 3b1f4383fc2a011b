//! Evaluation geometry: Fréchet distance of feature statistics, loop seam
//! score, multi-view overlap consistency and the repetition score.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::error::{domain, shape, Result};
use crate::image::{ErpImage, Planar, PerspImage};
use crate::resample::{backproject_single, project_erp_to_persp, SampleMode};
use crate::sphere::{CameraIntrinsics, CameraPose, ErpGrid};

/// Mean and covariance of a feature sample.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStats {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub n: usize,
}

impl FeatureStats {
    /// Checks symmetry and positive semi-definiteness to 1e-9.
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>, n: usize) -> Result<Self> {
        let d = mean.len();
        if cov.shape() != (d, d) {
            return shape(format!("covariance {:?} does not match mean of length {d}", cov.shape()));
        }
        if (&cov - cov.transpose()).amax() > 1e-9 {
            return domain("covariance is not symmetric");
        }
        if d > 0 && SymmetricEigen::new(cov.clone()).eigenvalues.min() < -1e-9 {
            return domain("covariance has a negative eigenvalue");
        }
        Ok(Self { mean, cov, n })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Sample mean and unbiased covariance, accumulated in input order.
pub fn gaussian_stats(features: &[Vec<f64>]) -> Result<FeatureStats> {
    let n = features.len();
    if n < 2 {
        return domain(format!("need at least 2 feature vectors, got {n}"));
    }
    let d = features[0].len();
    if features.iter().any(|f| f.len() != d) {
        return shape("feature vectors differ in length");
    }
    let mut mean = DVector::zeros(d);
    for f in features {
        mean += DVector::from_column_slice(f);
    }
    mean /= n as f64;
    let mut cov = DMatrix::zeros(d, d);
    for f in features {
        let x = DVector::from_column_slice(f) - &mean;
        cov += &x * x.transpose();
    }
    cov /= (n - 1) as f64;
    Ok(FeatureStats { mean, cov, n })
}

/// Square root of a symmetric PSD matrix with negative eigenvalues clamped.
pub fn sqrtm_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let root = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&root) * eig.eigenvectors.transpose()
}

pub fn frechet_distance(a: &FeatureStats, b: &FeatureStats) -> Result<f64> {
    if a.dim() != b.dim() {
        return shape(format!("feature dims differ: {} vs {}", a.dim(), b.dim()));
    }
    let mean_term = (&a.mean - &b.mean).norm_squared();
    let ra = sqrtm_psd(&a.cov);
    let cross = sqrtm_psd(&(&ra * &b.cov * &ra));
    let trace = a.cov.trace() + b.cov.trace() - 2.0 * cross.trace();
    Ok(mean_term + trace.max(0.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SeamScore {
    /// Mean absolute difference between the first and last columns.
    pub seam: f64,
    /// Mean absolute difference between adjacent columns.
    pub baseline: f64,
    /// `seam / baseline`; 1 when both vanish.
    pub ratio: f64,
}

pub fn seam_score(x: &Planar) -> Result<SeamScore> {
    let (c, h, w) = (x.channels, x.height, x.width);
    if w < 3 {
        return domain(format!("seam score needs width >= 3, got {w}"));
    }
    let (mut seam, mut base) = (0.0, 0.0);
    for ch in 0..c {
        for r in 0..h {
            let row = &x.data[(ch * h + r) * w..(ch * h + r + 1) * w];
            seam += (row[0] - row[w - 1]).abs();
            base += row.windows(2).map(|p| (p[1] - p[0]).abs()).sum::<f64>();
        }
    }
    let seam = seam / (c * h) as f64;
    let baseline = base / (c * h * (w - 1)) as f64;
    let ratio = if baseline == 0.0 {
        if seam == 0.0 {
            1.0
        } else {
            f64::INFINITY
        }
    } else {
        seam / baseline
    };
    Ok(SeamScore { seam, baseline, ratio })
}

/// Coverage-weighted mean of the per-pixel variance across views, over
/// pixels seen by at least two views.
pub fn overlap_consistency(views: &[PerspImage], grid: &ErpGrid) -> Result<f64> {
    if views.len() < 2 {
        return domain("overlap consistency needs at least 2 views");
    }
    let channels = views[0].pixels.channels;
    if views.iter().any(|v| v.pixels.channels != channels) {
        return shape("all views must share a channel count");
    }
    let hw = grid.pixels();
    let mut count = vec![0.0; hw];
    let mut sum = vec![0.0; channels * hw];
    let mut sq = vec![0.0; channels * hw];
    for view in views {
        let (img, wt) = backproject_single(view, grid);
        for i in 0..hw {
            if wt[i] > 0.0 {
                count[i] += 1.0;
                for c in 0..channels {
                    let v = img.data[c * hw + i];
                    sum[c * hw + i] += v;
                    sq[c * hw + i] += v * v;
                }
            }
        }
    }
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..hw {
        let n = count[i];
        if n < 2.0 {
            continue;
        }
        let var: f64 = (0..channels)
            .map(|c| {
                let m = sum[c * hw + i] / n;
                (sq[c * hw + i] / n - m * m).max(0.0)
            })
            .sum::<f64>()
            / channels as f64;
        num += n * var;
        den += n;
    }
    if den == 0.0 {
        return domain("the views share no covered pixel");
    }
    Ok(num / den)
}

/// Maps an image to a feature vector.
pub trait EmbeddingProvider {
    fn embed(&self, image: &Planar) -> Result<Vec<f64>>;
}

/// Bilinear resize to `rows x cols` (pixel centres aligned, edges clamped).
pub fn resize_bilinear(x: &Planar, rows: usize, cols: usize) -> Planar {
    let (h, w) = (x.height, x.width);
    let mut out = Planar::zeros(x.channels, rows, cols);
    for r in 0..rows {
        let v = ((r as f64 + 0.5) * h as f64 / rows as f64 - 0.5).clamp(0.0, (h - 1) as f64);
        let (y0, ty) = (v.floor() as usize, v - v.floor());
        let y1 = (y0 + 1).min(h - 1);
        for k in 0..cols {
            let u = ((k as f64 + 0.5) * w as f64 / cols as f64 - 0.5).clamp(0.0, (w - 1) as f64);
            let (x0, tx) = (u.floor() as usize, u - u.floor());
            let x1 = (x0 + 1).min(w - 1);
            for c in 0..x.channels {
                let p = x.plane(c);
                let top = p[y0 * w + x0] + tx * (p[y0 * w + x1] - p[y0 * w + x0]);
                let bottom = p[y1 * w + x0] + tx * (p[y1 * w + x1] - p[y1 * w + x0]);
                out.data[(c * rows + r) * cols + k] = top + ty * (bottom - top);
            }
        }
    }
    out
}

/// Bilinear downsample to 8 x 16, flattened.
#[derive(Debug, Clone, Copy, Default)]
pub struct FlattenDownsample;

impl EmbeddingProvider for FlattenDownsample {
    fn embed(&self, image: &Planar) -> Result<Vec<f64>> {
        Ok(resize_bilinear(image, 8, 16).data)
    }
}

/// Flatten-downsample followed by a seeded Gaussian projection.
#[derive(Debug, Clone)]
pub struct RandomProjection {
    dim: usize,
    seed: u64,
}

impl RandomProjection {
    pub fn new(dim: usize, seed: u64) -> Result<Self> {
        if dim == 0 {
            return domain("projection dimension must be positive");
        }
        Ok(Self { dim, seed })
    }
}

impl EmbeddingProvider for RandomProjection {
    fn embed(&self, image: &Planar) -> Result<Vec<f64>> {
        let x = FlattenDownsample.embed(image)?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ x.len() as u64);
        let scale = 1.0 / (self.dim as f64).sqrt();
        Ok((0..self.dim)
            .map(|_| x.iter().map(|v| { let g: f64 = StandardNormal.sample(&mut rng); v * scale * g }).sum::<f64>())
            .collect::<Vec<f64>>())
    }
}

/// `max(100 cos(a, b), 0)`.
pub fn rs_pair(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return shape("embeddings differ in length");
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum();
    let nb: f64 = b.iter().map(|x| x * x).sum();
    if na == 0.0 || nb == 0.0 {
        return domain("zero-norm embedding");
    }
    let cos = (dot / (na * nb).sqrt()).clamp(-1.0, 1.0);
    Ok((100.0 * cos).max(0.0))
}

/// The four horizontal cube faces (yaw 0, 90, 180, 270 degrees).
pub fn horizontal_faces(pano: &ErpImage) -> Result<Vec<PerspImage>> {
    let k = CameraIntrinsics::square(90.0, (pano.height / 2).max(1))?;
    (0..4)
        .map(|i| project_erp_to_persp(pano, &CameraPose::from_yaw(i as f64 * std::f64::consts::FRAC_PI_2), &k, SampleMode::Bilinear))
        .collect()
}

/// Mean RS over the 6 unordered pairs of horizontal cube faces.
pub fn repetition_score(pano: &ErpImage, provider: &dyn EmbeddingProvider) -> Result<f64> {
    let emb = horizontal_faces(pano)?.iter().map(|f| provider.embed(&f.pixels)).collect::<Result<Vec<_>>>()?;
    let mut total = 0.0;
    for i in 0..4 {
        for j in i + 1..4 {
            total += rs_pair(&emb[i], &emb[j])?;
        }
    }
    Ok(total / 6.0)
}
