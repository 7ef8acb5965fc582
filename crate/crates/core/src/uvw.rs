//! Per-pixel canonical coordinate maps and the `DMUVW01` file format.

use std::io::{Read, Write};

use crate::binio::{put_f32, put_u32, OffsetReader};
use crate::error::{Error, Result};

pub const UVW_MAGIC: &[u8; 7] = b"DMUVW01";

/// Canonical coordinates per pixel plus a validity (foreground) mask.
/// Invalid pixels carry zeros and must be ignored by consumers.
#[derive(Clone, Debug, PartialEq)]
pub struct UvwMap {
    pub width: usize,
    pub height: usize,
    pub coords: Vec<[f64; 3]>,
    pub valid: Vec<bool>,
}

impl UvwMap {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            coords: vec![[0.0; 3]; width * height],
            valid: vec![false; width * height],
        }
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize) -> usize {
        y * self.width + x
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> Option<[f64; 3]> {
        let i = self.index(x, y);
        self.valid[i].then(|| self.coords[i])
    }

    pub fn set(&mut self, x: usize, y: usize, c: [f64; 3]) {
        let i = self.index(x, y);
        self.coords[i] = c;
        self.valid[i] = true;
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    /// Linear indices of valid pixels in scan order.
    pub fn valid_indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.valid.iter().enumerate().filter(|(_, &v)| v).map(|(i, _)| i)
    }

    /// Bilinear sample at continuous pixel coordinates (pixel centers at
    /// `i + 0.5`). `None` unless all four contributing pixels are valid.
    pub fn sample_bilinear(&self, x: f64, y: f64) -> Option<[f64; 3]> {
        self.bilinear_with_gradient(x, y).map(|(v, _)| v)
    }

    /// Bilinear sample together with its derivatives along `x` and `y`.
    pub fn bilinear_with_gradient(&self, x: f64, y: f64) -> Option<([f64; 3], [[f64; 3]; 2])> {
        let fx = x - 0.5;
        let fy = y - 0.5;
        if !(fx >= 0.0 && fy >= 0.0) {
            return None;
        }
        let x0 = (fx.floor() as usize).min(self.width.saturating_sub(2));
        let y0 = (fy.floor() as usize).min(self.height.saturating_sub(2));
        if x0 + 1 >= self.width || y0 + 1 >= self.height {
            return None;
        }
        let tx = fx - x0 as f64;
        let ty = fy - y0 as f64;
        if tx > 1.0 || ty > 1.0 {
            return None;
        }
        let c00 = self.get(x0, y0)?;
        let c10 = self.get(x0 + 1, y0)?;
        let c01 = self.get(x0, y0 + 1)?;
        let c11 = self.get(x0 + 1, y0 + 1)?;
        let mut v = [0.0; 3];
        let mut d = [[0.0; 3]; 2];
        for k in 0..3 {
            let top = c00[k] + tx * (c10[k] - c00[k]);
            let bot = c01[k] + tx * (c11[k] - c01[k]);
            v[k] = top + ty * (bot - top);
            d[0][k] = (1.0 - ty) * (c10[k] - c00[k]) + ty * (c11[k] - c01[k]);
            d[1][k] = bot - top;
        }
        Some((v, d))
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(UVW_MAGIC)?;
        put_u32(w, self.width as u32)?;
        put_u32(w, self.height as u32)?;
        for c in &self.coords {
            for &x in c {
                put_f32(w, x as f32)?;
            }
        }
        let valid: Vec<u8> = self.valid.iter().map(|&v| v as u8).collect();
        w.write_all(&valid)?;
        Ok(())
    }

    pub fn read_from<R: Read>(r: R) -> Result<Self> {
        let mut rd = OffsetReader::new(r, "UVW map");
        rd.expect_magic(UVW_MAGIC)?;
        let at = rd.offset();
        let width = rd.u32()? as usize;
        let height = rd.u32()? as usize;
        if width == 0 || height == 0 || width > 1 << 15 || height > 1 << 15 {
            return Err(Error::format("UVW map", at, format!("bad size {width}x{height}")));
        }
        let n = width * height;
        let mut coords = Vec::with_capacity(n);
        for _ in 0..n {
            let c = [rd.f32()? as f64, rd.f32()? as f64, rd.f32()? as f64];
            coords.push(c);
        }
        let mut valid = Vec::with_capacity(n);
        for _ in 0..n {
            let at = rd.offset();
            match rd.u8()? {
                0 => valid.push(false),
                1 => valid.push(true),
                b => return Err(Error::format("UVW map", at, format!("validity byte {b}"))),
            }
        }
        rd.expect_eof()?;
        Ok(Self {
            width,
            height,
            coords,
            valid,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bilinear_on_ramp_is_exact() {
        let mut m = UvwMap::new(4, 3);
        for y in 0..3 {
            for x in 0..4 {
                m.set(x, y, [x as f64 * 0.1, y as f64 * 0.2, 0.5]);
            }
        }
        let (v, d) = m.bilinear_with_gradient(1.75, 2.0).unwrap();
        assert!((v[0] - 0.125).abs() < 1e-15);
        assert!((v[1] - 0.3).abs() < 1e-15);
        assert!((d[0][0] - 0.1).abs() < 1e-15 && (d[1][1] - 0.2).abs() < 1e-15);
        let i = m.index(2, 2);
        m.valid[i] = false;
        assert!(m.sample_bilinear(2.2, 2.2).is_none());
        assert!(m.sample_bilinear(0.2, 1.0).is_none());
    }

    #[test]
    fn file_round_trip_and_bad_validity() {
        let mut m = UvwMap::new(2, 2);
        m.set(1, 0, [0.25, 0.5, 0.75]);
        let mut buf = Vec::new();
        m.write_to(&mut buf).unwrap();
        assert_eq!(buf.len(), 7 + 8 + 4 * 12 + 4);
        assert_eq!(UvwMap::read_from(buf.as_slice()).unwrap(), m);
        let n = buf.len();
        buf[n - 1] = 7;
        let err = UvwMap::read_from(buf.as_slice()).unwrap_err();
        assert!(matches!(err, Error::Format { offset, .. } if offset == (n - 1) as u64));
    }
}
