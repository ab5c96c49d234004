//! Block-based compressive measurement.
//!
//! The image is zero-padded to a multiple of the block size `B` and split into
//! `B x B` blocks in raster order. Every block is vectorized row-major and
//! multiplied by the same `M_B x B²` Gaussian matrix.

use std::fs;
use std::path::Path;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::linalg::orthonormalize_rows;
use crate::rng::Rng;

const MEAS_MAGIC: &[u8; 8] = b"NLCSMEAS";
const MEAS_VERSION: u32 = 1;

/// Rows per block for a given rate: `round(rate * B²)`, at least one.
pub fn rows_per_block(block_size: usize, rate: f64) -> usize {
    let n = block_size * block_size;
    ((rate * n as f64).round() as usize).clamp(1, n)
}

/// Shared per-block sensing matrix with i.i.d. `N(0, 1/M_B)` entries.
#[derive(Debug, Clone)]
pub struct BlockMeasurementOperator {
    block_size: usize,
    rate: f64,
    seed: u64,
    ortho: bool,
    phi: DMatrix<f64>,
}

impl BlockMeasurementOperator {
    pub fn new(block_size: usize, rate: f64, seed: u64) -> Result<Self> {
        Self::build(block_size, rate, seed, false)
    }

    /// `ortho` replaces the Gaussian rows by their Gram-Schmidt orthonormalization.
    pub fn build(block_size: usize, rate: f64, seed: u64, ortho: bool) -> Result<Self> {
        if block_size == 0 {
            return Err(Error::Config("block size must be positive".into()));
        }
        if !(rate > 0.0 && rate <= 1.0) {
            return Err(Error::Config(format!("sampling rate {rate} not in (0, 1]")));
        }
        let n = block_size * block_size;
        let rows = rows_per_block(block_size, rate);
        let scale = 1.0 / (rows as f64).sqrt();
        let draws: Vec<f64> = Rng::new(seed)
            .gaussian_draws(rows * n)
            .into_iter()
            .map(|g| g * scale)
            .collect();
        let mut phi = DMatrix::from_row_slice(rows, n, &draws);
        if ortho {
            phi = orthonormalize_rows(&phi).ok_or_else(|| {
                Error::RankDeficient("sensing matrix rows are linearly dependent".into())
            })?;
        }
        Ok(Self {
            block_size,
            rate,
            seed,
            ortho,
            phi,
        })
    }

    /// Wrap an explicit `M_B x B²` matrix, e.g. the identity in tests.
    pub fn from_matrix(phi: DMatrix<f64>, block_size: usize, rate: f64, seed: u64) -> Result<Self> {
        if phi.ncols() != block_size * block_size || phi.nrows() == 0 || phi.nrows() > phi.ncols() {
            return Err(Error::Shape(format!(
                "sensing matrix {}x{} incompatible with block size {block_size}",
                phi.nrows(),
                phi.ncols()
            )));
        }
        Ok(Self {
            block_size,
            rate,
            seed,
            ortho: false,
            phi,
        })
    }

    pub fn block_size(&self) -> usize {
        self.block_size
    }

    pub fn rate(&self) -> f64 {
        self.rate
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn is_ortho(&self) -> bool {
        self.ortho
    }

    /// `M_B`.
    pub fn rows(&self) -> usize {
        self.phi.nrows()
    }

    /// `B²`.
    pub fn cols(&self) -> usize {
        self.phi.ncols()
    }

    pub fn phi(&self) -> &DMatrix<f64> {
        &self.phi
    }

    pub fn forward(&self, block: &DVector<f64>) -> DVector<f64> {
        &self.phi * block
    }

    pub fn adjoint_block(&self, y: &DVector<f64>) -> DVector<f64> {
        self.phi.tr_mul(y)
    }

    pub fn grid(&self, width: usize, height: usize) -> (usize, usize) {
        (height.div_ceil(self.block_size), width.div_ceil(self.block_size))
    }

    pub fn check(&self, ms: &MeasurementSet) -> Result<()> {
        if ms.block_size != self.block_size {
            return Err(Error::OperatorMismatch(format!(
                "block size {} vs operator {}",
                ms.block_size, self.block_size
            )));
        }
        if ms.rate.to_bits() != self.rate.to_bits() || ms.seed != self.seed {
            return Err(Error::OperatorMismatch(format!(
                "measurements (rate {}, seed {}) vs operator (rate {}, seed {})",
                ms.rate, ms.seed, self.rate, self.seed
            )));
        }
        let (br, bc) = self.grid(ms.width, ms.height);
        if ms.blocks.len() != br * bc {
            return Err(Error::OperatorMismatch(format!(
                "{} blocks, expected {}",
                ms.blocks.len(),
                br * bc
            )));
        }
        if let Some(k) = ms.blocks.iter().position(|y| y.len() != self.rows()) {
            return Err(Error::OperatorMismatch(format!(
                "block {k} has {} measurements, operator produces {}",
                ms.blocks[k].len(),
                self.rows()
            )));
        }
        Ok(())
    }
}

/// Per-block measurement vectors in block raster order plus the metadata
/// needed to rebuild the operator.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementSet {
    pub width: usize,
    pub height: usize,
    pub block_size: usize,
    pub rate: f64,
    pub seed: u64,
    pub blocks: Vec<DVector<f64>>,
}

impl MeasurementSet {
    pub fn zeros_like(&self) -> MeasurementSet {
        MeasurementSet {
            blocks: self.blocks.iter().map(|y| DVector::zeros(y.len())).collect(),
            ..self.clone()
        }
    }

    pub fn dot(&self, other: &MeasurementSet) -> f64 {
        self.blocks
            .iter()
            .zip(&other.blocks)
            .map(|(a, b)| a.dot(b))
            .sum()
    }

    pub fn mean_abs(&self) -> f64 {
        let (sum, n) = self
            .blocks
            .iter()
            .flat_map(|y| y.iter())
            .fold((0.0, 0usize), |(s, n), v| (s + v.abs(), n + 1));
        if n == 0 {
            0.0
        } else {
            sum / n as f64
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let count: usize = self.blocks.iter().map(|y| y.len()).sum();
        let mut out = Vec::with_capacity(40 + 8 * count);
        out.extend_from_slice(MEAS_MAGIC);
        out.extend_from_slice(&MEAS_VERSION.to_le_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        out.extend_from_slice(&(self.block_size as u32).to_le_bytes());
        out.extend_from_slice(&self.rate.to_le_bytes());
        out.extend_from_slice(&(self.width as u32).to_le_bytes());
        out.extend_from_slice(&(self.height as u32).to_le_bytes());
        for v in self.blocks.iter().flat_map(|y| y.iter()) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        if r.take(8)? != MEAS_MAGIC {
            return Err(Error::Parse {
                offset: 0,
                msg: "missing NLCSMEAS magic".into(),
            });
        }
        let at = r.pos;
        let version = r.u32()?;
        if version != MEAS_VERSION {
            return Err(Error::Parse {
                offset: at,
                msg: format!("unsupported version {version}"),
            });
        }
        let seed = r.u64()?;
        let at = r.pos;
        let block_size = r.u32()? as usize;
        let rate = r.f64()?;
        let width = r.u32()? as usize;
        let height = r.u32()? as usize;
        if block_size == 0 || !(rate > 0.0 && rate <= 1.0) || width == 0 || height == 0 {
            return Err(Error::Parse {
                offset: at,
                msg: format!("invalid header: B={block_size} rate={rate} {width}x{height}"),
            });
        }
        let rows = rows_per_block(block_size, rate);
        let nblocks = height.div_ceil(block_size) * width.div_ceil(block_size);
        let expected = nblocks * rows * 8;
        if r.remaining() != expected {
            return Err(Error::Parse {
                offset: r.pos,
                msg: format!("expected {expected} payload bytes, found {}", r.remaining()),
            });
        }
        let mut blocks = Vec::with_capacity(nblocks);
        for _ in 0..nblocks {
            let mut y = DVector::zeros(rows);
            for v in y.iter_mut() {
                *v = r.f64()?;
            }
            blocks.push(y);
        }
        Ok(Self {
            width,
            height,
            block_size,
            rate,
            seed,
            blocks,
        })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

pub(crate) struct ByteReader<'a> {
    bytes: &'a [u8],
    pub(crate) pos: usize,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub(crate) fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::Parse {
                offset: self.pos,
                msg: format!("unexpected end of file (wanted {n} bytes)"),
            });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn f64(&mut self) -> Result<f64> {
        let at = self.pos;
        let v = f64::from_le_bytes(self.take(8)?.try_into().unwrap());
        if !v.is_finite() {
            return Err(Error::Parse {
                offset: at,
                msg: "non-finite value".into(),
            });
        }
        Ok(v)
    }
}

/// Zero-padded `B x B` blocks of `img`, raster order, each vectorized row-major.
pub fn image_blocks(img: &Image, block_size: usize) -> Vec<DVector<f64>> {
    let (w, h) = (img.width(), img.height());
    let (br, bc) = (h.div_ceil(block_size), w.div_ceil(block_size));
    let mut out = Vec::with_capacity(br * bc);
    for by in 0..br {
        for bx in 0..bc {
            let mut v = DVector::zeros(block_size * block_size);
            for r in 0..block_size {
                let row = by * block_size + r;
                if row >= h {
                    break;
                }
                for c in 0..block_size {
                    let col = bx * block_size + c;
                    if col >= w {
                        break;
                    }
                    v[r * block_size + c] = img.get(row, col);
                }
            }
            out.push(v);
        }
    }
    out
}

/// Inverse of [`image_blocks`]: place blocks and crop the padding.
pub fn blocks_to_image(blocks: &[DVector<f64>], width: usize, height: usize, block_size: usize) -> Image {
    let bc = width.div_ceil(block_size);
    let mut img = Image::zeros(width, height);
    for (k, v) in blocks.iter().enumerate() {
        let (by, bx) = (k / bc, k % bc);
        for r in 0..block_size {
            let row = by * block_size + r;
            if row >= height {
                break;
            }
            for c in 0..block_size {
                let col = bx * block_size + c;
                if col >= width {
                    break;
                }
                img.set(row, col, v[r * block_size + c]);
            }
        }
    }
    img
}

/// `y_k = Φ · vec(block_k)` for every block.
pub fn sample(img: &Image, op: &BlockMeasurementOperator) -> MeasurementSet {
    let blocks = image_blocks(img, op.block_size)
        .iter()
        .map(|b| op.forward(b))
        .collect();
    MeasurementSet {
        width: img.width(),
        height: img.height(),
        block_size: op.block_size,
        rate: op.rate,
        seed: op.seed,
        blocks,
    }
}

/// [`sample`] plus i.i.d. Gaussian noise of std-dev `sigma`; block `k` draws
/// its noise from sub-stream `k + 1` of the operator seed.
pub fn sample_noisy(img: &Image, op: &BlockMeasurementOperator, sigma: f64) -> MeasurementSet {
    let mut ms = sample(img, op);
    if sigma > 0.0 {
        for (k, y) in ms.blocks.iter_mut().enumerate() {
            let mut rng = Rng::substream(op.seed, k as u64 + 1);
            for v in y.iter_mut() {
                *v += sigma * rng.gaussian();
            }
        }
    }
    ms
}

/// `Φᵀ y_k` per block, reassembled and cropped.
pub fn adjoint(ms: &MeasurementSet, op: &BlockMeasurementOperator) -> Result<Image> {
    op.check(ms)?;
    let blocks: Vec<_> = ms.blocks.iter().map(|y| op.adjoint_block(y)).collect();
    Ok(blocks_to_image(&blocks, ms.width, ms.height, op.block_size))
}

/// Solver for `argmin_x ½‖y − Φx‖² + (η/2)‖x − z‖²`, using the small
/// `M_B x M_B` system `x = z + Φᵀ(ΦΦᵀ + ηI)⁻¹(y − Φz)`.
#[derive(Debug, Clone)]
pub struct BlockUpdate<'a> {
    op: &'a BlockMeasurementOperator,
    eta: f64,
    chol: Cholesky<f64, Dyn>,
}

impl<'a> BlockUpdate<'a> {
    pub fn new(op: &'a BlockMeasurementOperator, eta: f64) -> Result<Self> {
        if !(eta >= 0.0 && eta.is_finite()) {
            return Err(Error::Config(format!("eta = {eta} must be finite and nonnegative")));
        }
        if eta == 0.0 && op.rows() < op.cols() {
            return Err(Error::RankDeficient(format!(
                "eta = 0 needs a square sensing matrix, have {}x{}",
                op.rows(),
                op.cols()
            )));
        }
        let gram = &op.phi * op.phi.transpose() + DMatrix::identity(op.rows(), op.rows()) * eta;
        let chol = Cholesky::new(gram)
            .ok_or_else(|| Error::RankDeficient("ΦΦᵀ + ηI is not positive definite".into()))?;
        Ok(Self { op, eta, chol })
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }

    pub fn apply(&self, z: &DVector<f64>, y: &DVector<f64>) -> DVector<f64> {
        let residual = y - self.op.forward(z);
        let coef = self.chol.solve(&residual);
        z + self.op.adjoint_block(&coef)
    }
}

/// One-shot form of [`BlockUpdate::apply`].
pub fn block_data_update(
    z_block: &DVector<f64>,
    y: &DVector<f64>,
    op: &BlockMeasurementOperator,
    eta: f64,
) -> Result<DVector<f64>> {
    Ok(BlockUpdate::new(op, eta)?.apply(z_block, y))
}
