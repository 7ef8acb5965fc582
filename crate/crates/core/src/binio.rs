//! Little-endian binary helpers that remember the byte offset for error reports.

use std::io::{self, Read, Write};

use crate::error::{Error, Result};

pub(crate) struct OffsetReader<R> {
    inner: R,
    offset: u64,
    what: &'static str,
}

impl<R: Read> OffsetReader<R> {
    pub fn new(inner: R, what: &'static str) -> Self {
        Self {
            inner,
            offset: 0,
            what,
        }
    }

    pub fn offset(&self) -> u64 {
        self.offset
    }

    pub fn error(&self, message: impl Into<String>) -> Error {
        Error::format(self.what, self.offset, message)
    }

    pub fn read_exact(&mut self, buf: &mut [u8]) -> Result<()> {
        match self.inner.read_exact(buf) {
            Ok(()) => {
                self.offset += buf.len() as u64;
                Ok(())
            }
            Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => {
                Err(self.error(format!("unexpected end of file reading {} bytes", buf.len())))
            }
            Err(e) => Err(e.into()),
        }
    }

    pub fn expect_magic(&mut self, magic: &[u8]) -> Result<()> {
        let start = self.offset;
        let mut buf = vec![0u8; magic.len()];
        self.read_exact(&mut buf)?;
        if buf != magic {
            return Err(Error::format(
                self.what,
                start,
                format!("bad magic, expected {:?}", String::from_utf8_lossy(magic)),
            ));
        }
        Ok(())
    }

    pub fn u8(&mut self) -> Result<u8> {
        let mut b = [0u8; 1];
        self.read_exact(&mut b)?;
        Ok(b[0])
    }

    pub fn u32(&mut self) -> Result<u32> {
        let mut b = [0u8; 4];
        self.read_exact(&mut b)?;
        Ok(u32::from_le_bytes(b))
    }

    pub fn i32(&mut self) -> Result<i32> {
        let mut b = [0u8; 4];
        self.read_exact(&mut b)?;
        Ok(i32::from_le_bytes(b))
    }

    pub fn f32(&mut self) -> Result<f32> {
        let mut b = [0u8; 4];
        self.read_exact(&mut b)?;
        Ok(f32::from_le_bytes(b))
    }

    pub fn f64(&mut self) -> Result<f64> {
        let mut b = [0u8; 8];
        self.read_exact(&mut b)?;
        Ok(f64::from_le_bytes(b))
    }

    /// Fails unless the stream is exhausted.
    pub fn expect_eof(&mut self) -> Result<()> {
        let mut b = [0u8; 1];
        match self.inner.read(&mut b)? {
            0 => Ok(()),
            _ => Err(self.error("trailing bytes after payload")),
        }
    }
}

pub(crate) fn put_u32<W: Write>(w: &mut W, v: u32) -> io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

pub(crate) fn put_i32<W: Write>(w: &mut W, v: i32) -> io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

pub(crate) fn put_f32<W: Write>(w: &mut W, v: f32) -> io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

pub(crate) fn put_f64<W: Write>(w: &mut W, v: f64) -> io::Result<()> {
    w.write_all(&v.to_le_bytes())
}
