//! Python bindings. Images cross the boundary as flat row-major lists of
//! floats (`channel`, `row`, `col`) plus their shape.

use nalgebra::{DMatrix, DVector};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use panoduet::duet::synth::{render, SynthParams, SynthScene};
use panoduet::image::{ErpImage, PerspImage, Planar};
use panoduet::metrics::{self, EmbeddingProvider, FeatureStats, FlattenDownsample, RandomProjection};
use panoduet::ntf::{ntf_read, ntf_write, NtfTensor};
use panoduet::sphere::{self, CameraRig, ErpGrid, SphericalCoord};
use panoduet::{layout, resample, Error};

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Numerical(_) | Error::Diverged { .. } | Error::Io(_) => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

trait OrPy<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> OrPy<T> for panoduet::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(py_err)
    }
}

/// Equirectangular image, `channels x height x 2*height`.
#[pyclass(name = "Panorama")]
#[derive(Clone)]
pub struct PyPanorama {
    inner: ErpImage,
}

#[pymethods]
impl PyPanorama {
    #[new]
    fn new(data: Vec<f64>, channels: usize, height: usize) -> PyResult<Self> {
        Ok(Self { inner: ErpImage::from_data(channels, height, data).py()? })
    }

    /// Synthetic sun/checker scene for `seed`.
    #[staticmethod]
    #[pyo3(signature = (seed, height = 64))]
    fn synth(seed: u64, height: usize) -> PyResult<Self> {
        let params = SynthParams { height, ..SynthParams::default() };
        Ok(Self { inner: render(&params, &SynthScene::from_seed(seed)).py()? })
    }

    #[getter]
    fn shape(&self) -> (usize, usize, usize) {
        let [c, h, w] = self.inner.shape();
        (c, h, w)
    }

    fn data(&self) -> Vec<f64> {
        self.inner.data.clone()
    }

    fn at(&self, c: usize, row: usize, col: usize) -> PyResult<f64> {
        let [ch, h, w] = self.inner.shape();
        if c >= ch || row >= h || col >= w {
            return Err(PyValueError::new_err("index out of range"));
        }
        Ok(self.inner.at(c, row, col))
    }

    fn __repr__(&self) -> String {
        let [c, h, w] = self.inner.shape();
        format!("Panorama({c}x{h}x{w})")
    }
}

/// Perspective view with its camera.
#[pyclass(name = "View")]
#[derive(Clone)]
pub struct PyView {
    inner: PerspImage,
}

#[pymethods]
impl PyView {
    #[getter]
    fn shape(&self) -> (usize, usize, usize) {
        let [c, h, w] = self.inner.pixels.shape();
        (c, h, w)
    }

    fn data(&self) -> Vec<f64> {
        self.inner.pixels.data.clone()
    }

    /// World-to-camera rotation, row major.
    fn rotation(&self) -> Vec<Vec<f64>> {
        rows(self.inner.pose.rotation())
    }

    fn forward(&self) -> [f64; 3] {
        let f = self.inner.pose.forward();
        [f.x, f.y, f.z]
    }
}

fn rows(m: &nalgebra::Matrix3<f64>) -> Vec<Vec<f64>> {
    (0..3).map(|r| (0..3).map(|c| m[(r, c)]).collect()).collect()
}

/// Camera rig on the 20 icosahedron face centres.
#[pyclass(name = "Rig")]
#[derive(Clone)]
pub struct PyRig {
    inner: CameraRig,
}

#[pymethods]
impl PyRig {
    #[new]
    #[pyo3(signature = (side = 32))]
    fn new(side: usize) -> PyResult<Self> {
        Ok(Self { inner: sphere::icosahedron_rig(side).py()? })
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn rotations(&self) -> Vec<Vec<Vec<f64>>> {
        self.inner.poses.iter().map(|p| rows(p.rotation())).collect()
    }

    fn to_json(&self) -> String {
        self.inner.to_json().to_string()
    }

    /// Number of views seeing each pixel of an ERP grid, row major.
    fn coverage(&self, height: usize) -> PyResult<Vec<u32>> {
        Ok(sphere::coverage_count(&self.inner, &ErpGrid::pixel(height).py()?))
    }

    /// Samples every view from `pano`; `mode` is "bilinear" or "nearest".
    #[pyo3(signature = (pano, mode = "bilinear"))]
    fn project(&self, pano: &PyPanorama, mode: &str) -> PyResult<Vec<PyView>> {
        let mode = mode.parse().py()?;
        let views = resample::project_to_rig(&pano.inner, &self.inner, mode).py()?;
        Ok(views.into_iter().map(|inner| PyView { inner }).collect())
    }
}

/// `(theta, phi)` of a fractional ERP pixel position.
#[pyfunction]
fn sph_from_erp_pixel(height: usize, u: f64, v: f64) -> PyResult<(f64, f64)> {
    let s = sphere::sph_from_erp_pixel(&ErpGrid::pixel(height).py()?, u, v).py()?;
    Ok((s.theta(), s.phi()))
}

#[pyfunction]
fn erp_pixel_from_sph(height: usize, theta: f64, phi: f64) -> PyResult<(f64, f64)> {
    Ok(sphere::erp_pixel_from_sph(&ErpGrid::pixel(height).py()?, &SphericalCoord::new(theta, phi).py()?))
}

/// Weighted average of the views on an ERP grid; returns the panorama and the
/// per-pixel weight sum.
#[pyfunction]
fn backproject(views: Vec<PyView>, height: usize) -> PyResult<(PyPanorama, Vec<f64>)> {
    let views: Vec<_> = views.into_iter().map(|v| v.inner).collect();
    let (inner, weight) = resample::backproject_persp_to_erp(&views, &ErpGrid::pixel(height).py()?).py()?;
    Ok((PyPanorama { inner }, weight))
}

/// Polygonal floor plan extruded between floor and ceiling, camera at the origin.
#[pyclass(name = "RoomLayout")]
#[derive(Clone)]
pub struct PyRoomLayout {
    inner: layout::RoomLayout,
}

#[pymethods]
impl PyRoomLayout {
    #[new]
    fn new(floor: Vec<[f64; 2]>, camera_height: f64, ceiling_height: f64) -> PyResult<Self> {
        Ok(Self { inner: layout::RoomLayout::new(floor, camera_height, ceiling_height).py()? })
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(Self { inner: layout::RoomLayout::from_json(text).py()? })
    }

    fn to_json(&self) -> String {
        self.inner.to_json()
    }

    #[getter]
    fn area(&self) -> f64 {
        self.inner.area()
    }

    #[getter]
    fn volume(&self) -> f64 {
        self.inner.volume()
    }

    /// Distance from the camera to the first surface along `(theta, phi)`.
    fn distance(&self, theta: f64, phi: f64) -> PyResult<f64> {
        layout::ray_distance(&self.inner, &SphericalCoord::new(theta, phi).py()?.to_direction()).py()
    }

    /// Distance map in metres, or rescaled to [-1, 1] with `normalize`.
    #[pyo3(signature = (height = 64, normalize = false))]
    fn distance_map(&self, height: usize, normalize: bool) -> PyResult<PyPanorama> {
        let map = layout::render_distance_map(&self.inner, &ErpGrid::pixel(height).py()?).py()?;
        Ok(PyPanorama { inner: if normalize { map.normalized() } else { map.image().clone() } })
    }
}

#[pyfunction]
fn iou_2d(a: &PyRoomLayout, b: &PyRoomLayout) -> f64 {
    layout::iou_2d(&a.inner, &b.inner)
}

#[pyfunction]
fn iou_3d(a: &PyRoomLayout, b: &PyRoomLayout) -> f64 {
    layout::iou_3d(&a.inner, &b.inner)
}

fn stats(mean: Vec<f64>, cov: Vec<Vec<f64>>) -> PyResult<FeatureStats> {
    let d = mean.len();
    if cov.len() != d || cov.iter().any(|r| r.len() != d) {
        return Err(PyValueError::new_err(format!("covariance must be {d}x{d}")));
    }
    FeatureStats::new(DVector::from_vec(mean), DMatrix::from_fn(d, d, |r, c| cov[r][c]), 2).py()
}

/// Mean and sample covariance of a list of feature vectors.
#[pyfunction]
fn gaussian_stats(features: Vec<Vec<f64>>) -> PyResult<(Vec<f64>, Vec<Vec<f64>>)> {
    let s = metrics::gaussian_stats(&features).py()?;
    let d = s.dim();
    Ok((s.mean.iter().copied().collect(), (0..d).map(|r| (0..d).map(|c| s.cov[(r, c)]).collect()).collect()))
}

#[pyfunction]
fn frechet_distance(mean_a: Vec<f64>, cov_a: Vec<Vec<f64>>, mean_b: Vec<f64>, cov_b: Vec<Vec<f64>>) -> PyResult<f64> {
    metrics::frechet_distance(&stats(mean_a, cov_a)?, &stats(mean_b, cov_b)?).py()
}

/// `(seam, baseline, ratio)` column-difference score.
#[pyfunction]
fn seam_score(pano: &PyPanorama) -> PyResult<(f64, f64, f64)> {
    let s = metrics::seam_score(pano.inner.planar()).py()?;
    Ok((s.seam, s.baseline, s.ratio))
}

#[pyfunction]
fn overlap_consistency(views: Vec<PyView>, height: usize) -> PyResult<f64> {
    let views: Vec<_> = views.into_iter().map(|v| v.inner).collect();
    metrics::overlap_consistency(&views, &ErpGrid::pixel(height).py()?).py()
}

/// Repetition score with the "flatten" embedding or a seeded "random" projection.
#[pyfunction]
#[pyo3(signature = (pano, provider = "flatten", dim = 64, seed = 0))]
fn repetition_score(pano: &PyPanorama, provider: &str, dim: usize, seed: u64) -> PyResult<f64> {
    let provider: Box<dyn EmbeddingProvider> = match provider {
        "flatten" => Box::new(FlattenDownsample),
        "random" => Box::new(RandomProjection::new(dim, seed).py()?),
        other => return Err(PyValueError::new_err(format!("unknown provider {other:?}"))),
    };
    metrics::repetition_score(&pano.inner, provider.as_ref()).py()
}

/// Reads an NTF file as `(shape, data)`.
#[pyfunction]
fn read_ntf(path: std::path::PathBuf) -> PyResult<(Vec<usize>, Vec<f32>)> {
    let t = ntf_read(&path).py()?;
    Ok((t.shape().to_vec(), t.data().to_vec()))
}

#[pyfunction]
fn write_ntf(path: std::path::PathBuf, shape: Vec<usize>, data: Vec<f32>) -> PyResult<()> {
    ntf_write(&NtfTensor::new(shape, data).py()?, &path).py()
}

/// Panorama from an NTF file holding `channels x height x width`.
#[pyfunction]
fn load_panorama(path: std::path::PathBuf) -> PyResult<PyPanorama> {
    let p: Planar = ntf_read(&path).py()?.to_planar().py()?;
    Ok(PyPanorama { inner: ErpImage::new(p).py()? })
}

/// Runs the command-line tool in-process and returns its exit code.
#[pyfunction]
fn run_cli(args: Vec<String>) -> i32 {
    panoduet::cli::run(std::iter::once("panoduet".to_string()).chain(args))
}

#[pymodule]
#[pyo3(name = "panoduet")]
fn panoduet_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyPanorama>()?;
    m.add_class::<PyView>()?;
    m.add_class::<PyRig>()?;
    m.add_class::<PyRoomLayout>()?;
    m.add_function(wrap_pyfunction!(sph_from_erp_pixel, m)?)?;
    m.add_function(wrap_pyfunction!(erp_pixel_from_sph, m)?)?;
    m.add_function(wrap_pyfunction!(backproject, m)?)?;
    m.add_function(wrap_pyfunction!(iou_2d, m)?)?;
    m.add_function(wrap_pyfunction!(iou_3d, m)?)?;
    m.add_function(wrap_pyfunction!(gaussian_stats, m)?)?;
    m.add_function(wrap_pyfunction!(frechet_distance, m)?)?;
    m.add_function(wrap_pyfunction!(seam_score, m)?)?;
    m.add_function(wrap_pyfunction!(overlap_consistency, m)?)?;
    m.add_function(wrap_pyfunction!(repetition_score, m)?)?;
    m.add_function(wrap_pyfunction!(read_ntf, m)?)?;
    m.add_function(wrap_pyfunction!(write_ntf, m)?)?;
    m.add_function(wrap_pyfunction!(load_panorama, m)?)?;
    m.add_function(wrap_pyfunction!(run_cli, m)?)?;
    Ok(())
}
