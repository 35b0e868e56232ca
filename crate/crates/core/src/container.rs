//! Little-endian binary containers shared by the matrix, factor and
//! network files: a 7-byte magic, fixed headers, raw `f64` payloads and a
//! length-prefixed UTF-8 metadata block.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const MATRIX_MAGIC: &[u8; 7] = b"PATSVD\x01";
pub const FACTORS_MAGIC: &[u8; 7] = b"PATSVD\x02";
pub const NETWORK_MAGIC: &[u8; 7] = b"PATSVD\x03";

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// Streaming 64-bit FNV-1a.
#[derive(Debug, Clone, Copy)]
pub struct Fnv1a(u64);

impl Default for Fnv1a {
    fn default() -> Self {
        Fnv1a(FNV_OFFSET)
    }
}

impl Fnv1a {
    pub fn update(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 ^= b as u64;
            self.0 = self.0.wrapping_mul(FNV_PRIME);
        }
    }

    pub fn update_f64s(&mut self, values: &[f64]) {
        for v in values {
            self.update(&v.to_le_bytes());
        }
    }

    pub fn finish(self) -> u64 {
        self.0
    }
}

pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = Fnv1a::default();
    h.update(bytes);
    h.finish()
}

pub fn file_checksum(path: &Path) -> Result<u64> {
    let mut reader = BufReader::new(File::open(path)?);
    let mut h = Fnv1a::default();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = reader.read(&mut buf)?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(h.finish())
}

pub(crate) struct ContainerWriter<W: Write> {
    inner: W,
}

impl ContainerWriter<BufWriter<File>> {
    pub fn create(path: &Path, magic: &[u8; 7]) -> Result<Self> {
        let mut inner = BufWriter::new(File::create(path)?);
        inner.write_all(magic)?;
        Ok(ContainerWriter { inner })
    }
}

impl<W: Write> ContainerWriter<W> {
    pub fn u64(&mut self, v: u64) -> Result<()> {
        self.inner.write_all(&v.to_le_bytes())?;
        Ok(())
    }

    pub fn f64(&mut self, v: f64) -> Result<()> {
        self.inner.write_all(&v.to_le_bytes())?;
        Ok(())
    }

    pub fn f64s(&mut self, values: &[f64]) -> Result<()> {
        let mut buf = Vec::with_capacity(values.len() * 8);
        for v in values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        self.inner.write_all(&buf)?;
        Ok(())
    }

    pub fn text(&mut self, s: &str) -> Result<()> {
        self.u64(s.len() as u64)?;
        self.inner.write_all(s.as_bytes())?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<()> {
        self.inner.flush()?;
        Ok(())
    }
}

pub(crate) struct ContainerReader<'a> {
    path: &'a Path,
    inner: BufReader<File>,
}

impl<'a> ContainerReader<'a> {
    pub fn open(path: &'a Path, magic: &[u8; 7]) -> Result<Self> {
        let mut inner = BufReader::new(File::open(path)?);
        let mut found = [0u8; 7];
        inner
            .read_exact(&mut found)
            .map_err(|_| Error::container(path, "file shorter than magic"))?;
        if &found != magic {
            return Err(Error::container(
                path,
                format!("magic {:?} does not match expected {:?}", found, magic),
            ));
        }
        Ok(ContainerReader { path, inner })
    }

    fn exact(&mut self, buf: &mut [u8]) -> Result<()> {
        self.inner
            .read_exact(buf)
            .map_err(|_| Error::container(self.path, "truncated payload"))
    }

    pub fn u64(&mut self) -> Result<u64> {
        let mut b = [0u8; 8];
        self.exact(&mut b)?;
        Ok(u64::from_le_bytes(b))
    }

    pub fn f64(&mut self) -> Result<f64> {
        let mut b = [0u8; 8];
        self.exact(&mut b)?;
        Ok(f64::from_le_bytes(b))
    }

    pub fn f64s(&mut self, count: usize) -> Result<Vec<f64>> {
        let mut buf = vec![0u8; count * 8];
        self.exact(&mut buf)?;
        Ok(buf
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub fn text(&mut self) -> Result<String> {
        let len = self.u64()? as usize;
        if len > (1 << 30) {
            return Err(Error::container(self.path, "metadata block too large"));
        }
        let mut buf = vec![0u8; len];
        self.exact(&mut buf)?;
        String::from_utf8(buf).map_err(|_| Error::container(self.path, "metadata is not UTF-8"))
    }

    pub fn expect_end(mut self) -> Result<()> {
        let mut b = [0u8; 1];
        match self.inner.read(&mut b)? {
            0 => Ok(()),
            _ => Err(Error::container(self.path, "trailing bytes after metadata")),
        }
    }

    pub fn path(&self) -> &Path {
        self.path
    }
}

pub fn write_f64_file(path: &Path, values: &[f64]) -> Result<()> {
    let mut buf = Vec::with_capacity(values.len() * 8);
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn read_f64_file(path: &Path) -> Result<Vec<f64>> {
    let bytes = std::fs::read(path)?;
    if bytes.len() % 8 != 0 {
        return Err(Error::container(path, "length is not a multiple of 8"));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}
