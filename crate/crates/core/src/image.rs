//! Pixel containers shared by every stage of the pipeline.
//!
//! All rasters are row-major, interleaved, and stored in `f64`. Coordinates
//! follow image convention: `x` grows to the right, `y` grows downwards.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ColorSpace {
    LinearRgb,
    Srgb,
    Lab,
    NormalXyz,
    Scalar,
}

/// `width × height × channels` raster tagged with the space its values live in.
#[derive(Debug, Clone, PartialEq)]
pub struct ImagePlane {
    width: usize,
    height: usize,
    channels: usize,
    space: ColorSpace,
    data: Vec<f64>,
}

impl ImagePlane {
    pub fn new(
        width: usize,
        height: usize,
        channels: usize,
        space: ColorSpace,
        data: Vec<f64>,
    ) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::invalid("image dimensions must be positive"));
        }
        if channels != 1 && channels != 3 {
            return Err(Error::invalid(format!(
                "images have 1 or 3 channels, got {channels}"
            )));
        }
        if data.len() != width * height * channels {
            return Err(Error::invalid(format!(
                "data length {} does not match {width}x{height}x{channels}",
                data.len()
            )));
        }
        match space {
            ColorSpace::LinearRgb | ColorSpace::NormalXyz | ColorSpace::Lab => {
                if data.iter().any(|v| !v.is_finite()) {
                    return Err(Error::invalid("non-finite pixel value"));
                }
            }
            ColorSpace::Srgb => {
                if data.iter().any(|v| !(0.0..=1.0).contains(v)) {
                    return Err(Error::invalid("srgb values must lie in [0, 1]"));
                }
            }
            ColorSpace::Scalar => {}
        }
        Ok(Self {
            width,
            height,
            channels,
            space,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, channels: usize, space: ColorSpace, v: f64) -> Self {
        Self::new(width, height, channels, space, vec![v; width * height * channels])
            .expect("filled image with a finite value is valid")
    }

    pub fn zeros(width: usize, height: usize, channels: usize, space: ColorSpace) -> Self {
        Self::filled(width, height, channels, space, 0.0)
    }

    /// Three-channel image built from a per-pixel closure `f(x, y)`.
    pub fn from_fn_rgb(
        width: usize,
        height: usize,
        space: ColorSpace,
        mut f: impl FnMut(usize, usize) -> [f64; 3],
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(width * height * 3);
        for y in 0..height {
            for x in 0..width {
                data.extend_from_slice(&f(x, y));
            }
        }
        Self::new(width, height, 3, space, data)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn space(&self) -> ColorSpace {
        self.space
    }

    pub fn len_pixels(&self) -> usize {
        self.width * self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Mutable access to the raw buffer. Callers are responsible for keeping
    /// values consistent with the space tag.
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn pixel(&self, index: usize) -> &[f64] {
        &self.data[index * self.channels..(index + 1) * self.channels]
    }

    pub fn pixel_mut(&mut self, index: usize) -> &mut [f64] {
        &mut self.data[index * self.channels..(index + 1) * self.channels]
    }

    pub fn rgb(&self, index: usize) -> [f64; 3] {
        let p = self.pixel(index);
        [p[0], p[1], p[2]]
    }

    pub fn at(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    /// Same buffer under a different tag. Validation is re-run.
    pub fn retag(self, space: ColorSpace) -> Result<Self> {
        Self::new(self.width, self.height, self.channels, space, self.data)
    }

    pub fn expect_space(&self, space: ColorSpace) -> Result<()> {
        if self.space != space {
            return Err(Error::invalid(format!(
                "expected a {space:?} image, got {:?}",
                self.space
            )));
        }
        Ok(())
    }

    pub fn same_shape(&self, other: &ImagePlane) -> bool {
        self.width == other.width && self.height == other.height && self.channels == other.channels
    }

    pub fn check_dims(&self, width: usize, height: usize, channels: usize, what: &str) -> Result<()> {
        if self.width != width || self.height != height || self.channels != channels {
            return Err(Error::invalid(format!(
                "{what}: expected {width}x{height}x{channels}, got {}x{}x{}",
                self.width, self.height, self.channels
            )));
        }
        Ok(())
    }

    /// Elementwise map producing a new image in `space`.
    pub fn map(&self, space: ColorSpace, f: impl Fn(f64) -> f64) -> Result<Self> {
        Self::new(
            self.width,
            self.height,
            self.channels,
            space,
            self.data.iter().map(|&v| f(v)).collect(),
        )
    }

    /// Copy with every off-mask pixel set to zero.
    pub fn masked(&self, mask: &Mask) -> Self {
        let mut out = self.clone();
        for i in 0..self.len_pixels() {
            if !mask.get(i) {
                out.pixel_mut(i).iter_mut().for_each(|v| *v = 0.0);
            }
        }
        out
    }

    pub fn scaled(&self, k: f64) -> Self {
        let mut out = self.clone();
        out.data.iter_mut().for_each(|v| *v *= k);
        out
    }
}

/// Foreground mask; `true` marks the decomposition domain.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    width: usize,
    height: usize,
    bits: Vec<bool>,
}

impl Mask {
    pub fn new(width: usize, height: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != width * height {
            return Err(Error::invalid(format!(
                "mask length {} does not match {width}x{height}",
                bits.len()
            )));
        }
        Ok(Self {
            width,
            height,
            bits,
        })
    }

    pub fn full(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            bits: vec![true; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                bits.push(f(x, y));
            }
        }
        Self {
            width,
            height,
            bits,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn get(&self, index: usize) -> bool {
        self.bits[index]
    }

    pub fn at(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Indices of foreground pixels in row-major order.
    pub fn indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.bits
            .iter()
            .enumerate()
            .filter_map(|(i, &b)| b.then_some(i))
    }

    pub fn check_matches(&self, img: &ImagePlane, what: &str) -> Result<()> {
        if img.width() != self.width || img.height() != self.height {
            return Err(Error::invalid(format!(
                "{what}: image {}x{} does not match mask {}x{}",
                img.width(),
                img.height(),
                self.width,
                self.height
            )));
        }
        Ok(())
    }

    pub fn require_foreground(&self, min: usize) -> Result<usize> {
        let n = self.count();
        if n < min {
            return Err(Error::insufficient(format!(
                "mask has {n} foreground pixels, need at least {min}"
            )));
        }
        Ok(n)
    }

    pub fn intersect(&self, other: &Mask) -> Result<Mask> {
        if self.width != other.width || self.height != other.height {
            return Err(Error::invalid("mask dimensions differ"));
        }
        Ok(Mask {
            width: self.width,
            height: self.height,
            bits: self.bits.iter().zip(&other.bits).map(|(a, b)| *a && *b).collect(),
        })
    }
}

/// Unit-vector field stored as a three-channel `normal-xyz` plane.
///
/// The frame is camera-facing: `x` right, `y` up, `z` towards the viewer.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalMap(ImagePlane);

impl NormalMap {
    /// Wraps a three-channel plane without checking unit length; see
    /// [`NormalMap::check_unit`].
    pub fn new(plane: ImagePlane) -> Result<Self> {
        if plane.channels() != 3 {
            return Err(Error::invalid("normal maps have 3 channels"));
        }
        Ok(Self(plane.retag(ColorSpace::NormalXyz)?))
    }

    /// Normalizes every pixel of a raw vector field. Pixels with norm below
    /// `1e-8` become `(0, 0, 1)`.
    pub fn from_raw(raw: &ImagePlane) -> Result<Self> {
        if raw.channels() != 3 {
            return Err(Error::invalid("normal maps have 3 channels"));
        }
        let mut data = raw.data().to_vec();
        for px in data.chunks_exact_mut(3) {
            let n = normalize_guarded([px[0], px[1], px[2]]);
            px.copy_from_slice(&n);
        }
        Ok(Self(ImagePlane::new(
            raw.width(),
            raw.height(),
            3,
            ColorSpace::NormalXyz,
            data,
        )?))
    }

    pub fn constant(width: usize, height: usize, n: [f64; 3]) -> Result<Self> {
        let n = normalize_guarded(n);
        Self::new(ImagePlane::from_fn_rgb(width, height, ColorSpace::NormalXyz, |_, _| n)?)
    }

    pub fn width(&self) -> usize {
        self.0.width()
    }

    pub fn height(&self) -> usize {
        self.0.height()
    }

    pub fn get(&self, index: usize) -> [f64; 3] {
        self.0.rgb(index)
    }

    pub fn plane(&self) -> &ImagePlane {
        &self.0
    }

    pub fn into_plane(self) -> ImagePlane {
        self.0
    }

    /// Errors if any foreground normal deviates from unit length by more than `tol`.
    pub fn check_unit(&self, mask: &Mask, tol: f64) -> Result<()> {
        for i in mask.indices() {
            let n = self.get(i);
            let len = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt();
            if (len - 1.0).abs() > tol {
                return Err(Error::invalid(format!(
                    "normal at pixel {i} has length {len}"
                )));
            }
        }
        Ok(())
    }
}

pub(crate) const NORMAL_EPS: f64 = 1e-8;

pub(crate) fn normalize_guarded(u: [f64; 3]) -> [f64; 3] {
    let len = (u[0] * u[0] + u[1] * u[1] + u[2] * u[2]).sqrt();
    if len < NORMAL_EPS {
        [0.0, 0.0, 1.0]
    } else {
        [u[0] / len, u[1] / len, u[2] / len]
    }
}

/// Chain rule through `n = u / ‖u‖`: maps `∂f/∂n` to `∂f/∂u`.
///
/// Zero below the normalization guard.
pub fn normalize_backward(u: [f64; 3], d_n: [f64; 3]) -> [f64; 3] {
    let len = (u[0] * u[0] + u[1] * u[1] + u[2] * u[2]).sqrt();
    if len < NORMAL_EPS {
        return [0.0; 3];
    }
    let n = [u[0] / len, u[1] / len, u[2] / len];
    let dot = n[0] * d_n[0] + n[1] * d_n[1] + n[2] * d_n[2];
    [
        (d_n[0] - n[0] * dot) / len,
        (d_n[1] - n[1] * dot) / len,
        (d_n[2] - n[2] * dot) / len,
    ]
}
