//! Planar `C x H x W` buffers and the two image formats built on them.

use crate::error::{Error, Result};
use crate::sphere::{CameraIntrinsics, CameraPose, ErpGrid};

/// Channel-major real buffer, row 0 first.
#[derive(Debug, Clone, PartialEq)]
pub struct Planar {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Planar {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::Shape(format!(
                "buffer of {} values cannot hold {channels}x{height}x{width}",
                data.len()
            )));
        }
        Ok(Self { channels, height, width, data })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self { channels, height, width, data: vec![0.0; channels * height * width] }
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f64) -> Self {
        Self { channels, height, width, data: vec![value; channels * height * width] }
    }

    #[inline]
    pub fn index(&self, c: usize, row: usize, col: usize) -> usize {
        (c * self.height + row) * self.width + col
    }

    #[inline]
    pub fn at(&self, c: usize, row: usize, col: usize) -> f64 {
        self.data[self.index(c, row, col)]
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }
}

/// Equirectangular image, `W = 2H`, finite entries.
#[derive(Debug, Clone, PartialEq)]
pub struct ErpImage(Planar);

impl ErpImage {
    pub fn new(planar: Planar) -> Result<Self> {
        if planar.width != 2 * planar.height || planar.height == 0 {
            return Err(Error::Shape(format!(
                "equirectangular image must be 2:1, got {}x{}",
                planar.height, planar.width
            )));
        }
        if !planar.is_finite() {
            return Err(Error::Data("equirectangular image has non-finite entries".into()));
        }
        Ok(Self(planar))
    }

    pub fn from_data(channels: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(Planar::new(channels, height, 2 * height, data)?)
    }

    pub fn filled(channels: usize, height: usize, value: f64) -> Self {
        Self(Planar::filled(channels, height, 2 * height, value))
    }

    /// Builds an image by evaluating `f(channel, row, col)`.
    pub fn from_fn(channels: usize, height: usize, mut f: impl FnMut(usize, usize, usize) -> f64) -> Result<Self> {
        let width = 2 * height;
        let mut data = Vec::with_capacity(channels * height * width);
        for c in 0..channels {
            for r in 0..height {
                for k in 0..width {
                    data.push(f(c, r, k));
                }
            }
        }
        Self::from_data(channels, height, data)
    }

    pub fn grid(&self) -> Result<ErpGrid> {
        ErpGrid::pixel(self.0.height)
    }

    pub fn planar(&self) -> &Planar {
        &self.0
    }

    pub fn into_planar(self) -> Planar {
        self.0
    }
}

impl std::ops::Deref for ErpImage {
    type Target = Planar;
    fn deref(&self) -> &Planar {
        &self.0
    }
}

/// Perspective image together with the camera that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct PerspImage {
    pub pixels: Planar,
    pub pose: CameraPose,
    pub intrinsics: CameraIntrinsics,
}

impl PerspImage {
    pub fn new(pixels: Planar, pose: CameraPose, intrinsics: CameraIntrinsics) -> Result<Self> {
        if pixels.height != intrinsics.height() || pixels.width != intrinsics.width() {
            return Err(Error::Shape(format!(
                "view pixels {}x{} disagree with intrinsics {}x{}",
                pixels.height,
                pixels.width,
                intrinsics.height(),
                intrinsics.width()
            )));
        }
        if !pixels.is_finite() {
            return Err(Error::Data("perspective image has non-finite entries".into()));
        }
        Ok(Self { pixels, pose, intrinsics })
    }
}
