//! Minimal 8-bit image containers with binary PPM/PGM codecs.

use std::io::{BufRead, Read, Write};

use crate::binio::OffsetReader;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<[u8; 3]>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![[0; 3]; width * height],
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: [u8; 3]) {
        self.data[y * self.width + x] = c;
    }

    pub fn write_ppm<W: Write>(&self, w: &mut W) -> Result<()> {
        write!(w, "P6\n{} {}\n255\n", self.width, self.height)?;
        let bytes: Vec<u8> = self.data.iter().flatten().copied().collect();
        w.write_all(&bytes)?;
        Ok(())
    }

    pub fn read_ppm<R: BufRead>(r: R) -> Result<Self> {
        let mut rd = OffsetReader::new(r, "PPM image");
        let (width, height) = read_pnm_header(&mut rd, b"P6")?;
        let mut data = Vec::with_capacity(width * height);
        for _ in 0..width * height {
            let mut px = [0u8; 3];
            rd.read_exact(&mut px)?;
            data.push(px);
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }
}

/// Single-channel 8-bit image (masks, region labels).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0; width * height],
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.data[y * self.width + x]
    }

    pub fn from_mask(width: usize, height: usize, mask: &[bool]) -> Self {
        Self {
            width,
            height,
            data: mask.iter().map(|&m| if m { 255 } else { 0 }).collect(),
        }
    }

    pub fn to_mask(&self) -> Vec<bool> {
        self.data.iter().map(|&v| v >= 128).collect()
    }

    pub fn write_pgm<W: Write>(&self, w: &mut W) -> Result<()> {
        write!(w, "P5\n{} {}\n255\n", self.width, self.height)?;
        w.write_all(&self.data)?;
        Ok(())
    }

    pub fn read_pgm<R: BufRead>(r: R) -> Result<Self> {
        let mut rd = OffsetReader::new(r, "PGM image");
        let (width, height) = read_pnm_header(&mut rd, b"P5")?;
        let mut data = vec![0u8; width * height];
        rd.read_exact(&mut data)?;
        Ok(Self {
            width,
            height,
            data,
        })
    }
}

fn read_pnm_header<R: Read>(rd: &mut OffsetReader<R>, magic: &[u8]) -> Result<(usize, usize)> {
    rd.expect_magic(magic)?;
    let width = read_header_uint(rd)?;
    let height = read_header_uint(rd)?;
    let at = rd.offset();
    let maxval = read_header_uint(rd)?;
    if maxval != 255 {
        return Err(Error::format("PNM header", at, format!("unsupported maxval {maxval}")));
    }
    if width == 0 || height == 0 || width > 1 << 15 || height > 1 << 15 {
        return Err(rd.error(format!("unsupported image size {width}x{height}")));
    }
    Ok((width, height))
}

/// Reads whitespace, `#` comments, then a decimal integer and the single
/// whitespace byte that terminates it.
fn read_header_uint<R: Read>(rd: &mut OffsetReader<R>) -> Result<usize> {
    let mut b = rd.u8()?;
    loop {
        if b == b'#' {
            while b != b'\n' {
                b = rd.u8()?;
            }
        }
        if !b.is_ascii_whitespace() {
            break;
        }
        b = rd.u8()?;
    }
    let mut value: usize = 0;
    let mut digits = 0;
    while b.is_ascii_digit() {
        value = value
            .checked_mul(10)
            .and_then(|v| v.checked_add((b - b'0') as usize))
            .ok_or_else(|| rd.error("header integer overflow"))?;
        digits += 1;
        b = rd.u8()?;
    }
    if digits == 0 || !b.is_ascii_whitespace() {
        return Err(rd.error("expected a decimal header field"));
    }
    Ok(value)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_round_trip() {
        let mut img = RgbImage::new(3, 2);
        img.set(2, 1, [1, 2, 3]);
        let mut buf = Vec::new();
        img.write_ppm(&mut buf).unwrap();
        assert!(buf.starts_with(b"P6\n3 2\n255\n"));
        assert_eq!(RgbImage::read_ppm(buf.as_slice()).unwrap(), img);
    }

    #[test]
    fn pgm_truncated_reports_offset() {
        let g = GrayImage::from_mask(4, 4, &[true; 16]);
        let mut buf = Vec::new();
        g.write_pgm(&mut buf).unwrap();
        assert_eq!(GrayImage::read_pgm(buf.as_slice()).unwrap(), g);
        let err = GrayImage::read_pgm(&buf[..buf.len() - 1]).unwrap_err();
        assert!(matches!(err, Error::Format { offset: 11, .. }), "{err}");
        let err = GrayImage::read_pgm(&b"P5\n4 x\n255\n"[..]).unwrap_err();
        assert!(matches!(err, Error::Format { .. }));
    }
}
