//! Binary PGM (P5, 8-bit) and, with the `png` feature, 8-bit grayscale PNG.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::image::Image;

fn parse_err(offset: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        offset,
        msg: msg.into(),
    }
}

struct HeaderReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl HeaderReader<'_> {
    /// Skip whitespace and `#` comments.
    fn skip_space(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while self.bytes.get(self.pos).is_some_and(|&b| b != b'\n') {
                    self.pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<u32> {
        self.skip_space();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(parse_err(start, format!("expected {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| parse_err(start, format!("{what} out of range")))
    }
}

pub fn parse_pgm(bytes: &[u8]) -> Result<Image> {
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        return Err(parse_err(0, "not a binary PGM (missing P5 magic)"));
    }
    let mut r = HeaderReader { bytes, pos: 2 };
    if !r.bytes.get(2).is_some_and(|b| b.is_ascii_whitespace() || *b == b'#') {
        return Err(parse_err(2, "expected whitespace after magic"));
    }
    let width_at = r.pos;
    let width = r.number("width")? as usize;
    let height = r.number("height")? as usize;
    if width == 0 || height == 0 {
        return Err(parse_err(width_at, format!("empty image {width}x{height}")));
    }
    let max_at = r.pos;
    let maxval = r.number("maxval")?;
    if maxval > 255 {
        return Err(Error::UnsupportedDepth(maxval));
    }
    if maxval == 0 {
        return Err(parse_err(max_at, "maxval must be positive"));
    }
    if !r.bytes.get(r.pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(parse_err(r.pos, "expected a single whitespace before pixel data"));
    }
    let data_at = r.pos + 1;
    let need = width * height;
    let have = bytes.len() - data_at;
    if have < need {
        return Err(parse_err(bytes.len(), format!("truncated pixel data: {have} of {need} bytes")));
    }
    Image::from_u8(width, height, &bytes[data_at..data_at + need])
}

pub fn pgm_bytes(img: &Image) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    out.extend(img.to_u8());
    out
}

pub fn read_pgm(path: impl AsRef<Path>) -> Result<Image> {
    parse_pgm(&fs::read(path)?)
}

/// Values are clamped to `[0, 255]` and rounded.
pub fn write_pgm(path: impl AsRef<Path>, img: &Image) -> Result<()> {
    fs::write(path, pgm_bytes(img))?;
    Ok(())
}

fn is_png(path: &Path) -> bool {
    path.extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("png"))
}

/// Read a PGM, or a PNG when the extension says so.
pub fn read_image(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    if is_png(path) {
        read_png(path)
    } else {
        read_pgm(path)
    }
}

pub fn write_image(path: impl AsRef<Path>, img: &Image) -> Result<()> {
    let path = path.as_ref();
    if is_png(path) {
        write_png(path, img)
    } else {
        write_pgm(path, img)
    }
}

#[cfg(feature = "png")]
fn read_png(path: &Path) -> Result<Image> {
    let decoded = image::open(path)
        .map_err(|e| Error::Config(format!("cannot decode {}: {e}", path.display())))?
        .into_luma8();
    let (w, h) = decoded.dimensions();
    Image::from_u8(w as usize, h as usize, decoded.as_raw())
}

#[cfg(feature = "png")]
fn write_png(path: &Path, img: &Image) -> Result<()> {
    let buf = image::GrayImage::from_raw(img.width() as u32, img.height() as u32, img.to_u8())
        .ok_or_else(|| Error::Shape("image buffer size mismatch".into()))?;
    buf.save(path)
        .map_err(|e| Error::Config(format!("cannot encode {}: {e}", path.display())))
}

#[cfg(not(feature = "png"))]
fn read_png(path: &Path) -> Result<Image> {
    Err(Error::Config(format!(
        "{}: PNG support is not compiled in (enable the `png` feature)",
        path.display()
    )))
}

#[cfg(not(feature = "png"))]
fn write_png(path: &Path, _img: &Image) -> Result<()> {
    read_png(path).map(|_| ())
}
