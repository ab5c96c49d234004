use crate::error::{Error, Result};

/// Grayscale image with row-major real intensities on the 0..=255 scale.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Shape(format!("empty image {width}x{height}")));
        }
        if data.len() != width * height {
            return Err(Error::Shape(format!(
                "{} values for a {width}x{height} image",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Shape(format!("non-finite value at index {i}")));
        }
        Ok(Self { width, height, data })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self::filled(width, height, 0.0)
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for r in 0..height {
            for c in 0..width {
                data.push(f(r, c));
            }
        }
        Self { width, height, data }
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: f64) {
        self.data[row * self.width + col] = value;
    }

    pub fn same_dims(&self, other: &Image) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Copy with every value clamped to 0..=255.
    pub fn clamped(&self) -> Image {
        Image {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|v| v.clamp(0.0, 255.0)).collect(),
        }
    }

    /// Clamp and round to 8-bit samples.
    pub fn to_u8(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|v| v.clamp(0.0, 255.0).round() as u8)
            .collect()
    }

    pub fn from_u8(width: usize, height: usize, bytes: &[u8]) -> Result<Self> {
        Self::new(width, height, bytes.iter().map(|&b| f64::from(b)).collect())
    }

    /// Top-left `height x width` window. Used to drop block padding.
    pub fn crop(&self, width: usize, height: usize) -> Result<Image> {
        if width > self.width || height > self.height {
            return Err(Error::Shape(format!(
                "crop {width}x{height} exceeds {}x{}",
                self.width, self.height
            )));
        }
        Ok(Image::from_fn(width, height, |r, c| self.get(r, c)))
    }

    pub fn patch(&self, origin: (usize, usize), side: usize) -> Result<Patch> {
        Patch::extract(self, origin, side)
    }
}

/// Square patch with its top-left corner inside the source image.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub side: usize,
    pub origin: (usize, usize),
    pub values: Vec<f64>,
}

impl Patch {
    pub fn extract(img: &Image, origin: (usize, usize), side: usize) -> Result<Self> {
        let (r0, c0) = origin;
        if side == 0 || r0 + side > img.height() || c0 + side > img.width() {
            return Err(Error::Shape(format!(
                "patch of side {side} at {origin:?} outside {}x{} image",
                img.width(),
                img.height()
            )));
        }
        let mut values = Vec::with_capacity(side * side);
        for r in r0..r0 + side {
            let start = r * img.width() + c0;
            values.extend_from_slice(&img.data()[start..start + side]);
        }
        Ok(Self {
            side,
            origin,
            values,
        })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}
