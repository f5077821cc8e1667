//! Grid containers and the on-disk raster encoding.
//!
//! Rasters are stored headerless: elevations as little-endian `f32`,
//! row-major (`.f32`), masks as one byte per pixel (`.u8`). Shape and
//! resolution live in the accompanying key/value manifest.

use crate::error::{Error, Result};
use std::fs;
use std::io::Write;
use std::path::Path;

/// 2-D grid of heights in meters.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

impl Grid {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), rows * cols, "grid data length");
        Grid { rows, cols, data }
    }

    pub fn filled(rows: usize, cols: usize, v: f32) -> Self {
        Grid { rows, cols, data: vec![v; rows * cols] }
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn window(&self, r0: usize, c0: usize, h: usize, w: usize) -> Grid {
        let mut data = Vec::with_capacity(h * w);
        for r in r0..r0 + h {
            data.extend_from_slice(&self.data[r * self.cols + c0..r * self.cols + c0 + w]);
        }
        Grid { rows: h, cols: w, data }
    }

    pub fn min_max(&self) -> (f32, f32) {
        self.data.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), v| (lo.min(*v), hi.max(*v)))
    }
}

/// Binary (or small-label) mask, one byte per pixel.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<u8>,
}

impl Mask {
    pub fn new(rows: usize, cols: usize, data: Vec<u8>) -> Self {
        assert_eq!(data.len(), rows * cols, "mask data length");
        Mask { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mask { rows, cols, data: vec![0; rows * cols] }
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> u8 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: u8) {
        self.data[r * self.cols + c] = v;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|v| **v != 0).count()
    }

    pub fn window(&self, r0: usize, c0: usize, h: usize, w: usize) -> Mask {
        let mut data = Vec::with_capacity(h * w);
        for r in r0..r0 + h {
            data.extend_from_slice(&self.data[r * self.cols + c0..r * self.cols + c0 + w]);
        }
        Mask { rows: h, cols: w, data }
    }

    /// 8-connected component labels (0 = background) and the component count.
    pub fn components(&self) -> (Vec<u32>, usize) {
        let mut labels = vec![0u32; self.data.len()];
        let mut next = 0u32;
        let mut stack = Vec::new();
        for start in 0..self.data.len() {
            if self.data[start] == 0 || labels[start] != 0 {
                continue;
            }
            next += 1;
            labels[start] = next;
            stack.push(start);
            while let Some(i) = stack.pop() {
                let (r, c) = ((i / self.cols) as isize, (i % self.cols) as isize);
                for dr in -1..=1 {
                    for dc in -1..=1 {
                        let (nr, nc) = (r + dr, c + dc);
                        if nr < 0 || nc < 0 || nr >= self.rows as isize || nc >= self.cols as isize {
                            continue;
                        }
                        let j = nr as usize * self.cols + nc as usize;
                        if self.data[j] != 0 && labels[j] == 0 {
                            labels[j] = next;
                            stack.push(j);
                        }
                    }
                }
            }
        }
        (labels, next as usize)
    }
}

pub fn write_f32(path: &Path, data: &[f32]) -> Result<()> {
    let mut bytes = Vec::with_capacity(data.len() * 4);
    for v in data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_f32(path: &Path, expected: usize) -> Result<Vec<f32>> {
    let bytes = read_bytes(path)?;
    if bytes.len() != expected * 4 {
        return Err(Error::format(path, format!("expected {} bytes, found {}", expected * 4, bytes.len())));
    }
    Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
}

pub fn write_u8(path: &Path, data: &[u8]) -> Result<()> {
    fs::write(path, data).map_err(|e| Error::io(path, e))
}

pub fn read_u8(path: &Path, expected: usize) -> Result<Vec<u8>> {
    let bytes = read_bytes(path)?;
    if bytes.len() != expected {
        return Err(Error::format(path, format!("expected {expected} bytes, found {}", bytes.len())));
    }
    Ok(bytes)
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::Missing(path.to_path_buf())
        } else {
            Error::io(path, e)
        }
    })
}

/// Ordered `key=value` text records.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct KeyValues(pub Vec<(String, String)>);

impl KeyValues {
    pub fn push(&mut self, k: impl Into<String>, v: impl ToString) {
        self.0.push((k.into(), v.to_string()));
    }

    pub fn get(&self, k: &str) -> Option<&str> {
        self.0.iter().find(|(key, _)| key == k).map(|(_, v)| v.as_str())
    }

    pub fn require(&self, k: &str, path: &Path) -> Result<&str> {
        self.get(k).ok_or_else(|| Error::format(path, format!("missing key `{k}`")))
    }

    pub fn parse<T: std::str::FromStr>(&self, k: &str, path: &Path) -> Result<T> {
        self.require(k, path)?
            .parse()
            .map_err(|_| Error::format(path, format!("cannot parse value of `{k}`")))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        for (k, v) in &self.0 {
            writeln!(f, "{k}={v}").map_err(|e| Error::io(path, e))?;
        }
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                Error::Missing(path.to_path_buf())
            } else {
                Error::io(path, e)
            }
        })?;
        let mut kv = KeyValues::default();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim_end();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::format(path, format!("line {} is not key=value", lineno + 1)))?;
            kv.push(k, v);
        }
        Ok(kv)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn components_are_eight_connected() {
        #[rustfmt::skip]
        let m = Mask::new(3, 4, vec![
            1, 0, 0, 1,
            0, 1, 0, 0,
            0, 0, 0, 1,
        ]);
        assert_eq!(m.components().1, 3);
    }

    #[test]
    fn f32_roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.f32");
        let data = vec![0.1f32, -3.5e-12, f32::MAX, 7.0];
        write_f32(&p, &data).unwrap();
        let back = read_f32(&p, 4).unwrap();
        assert!(data.iter().zip(&back).all(|(a, b)| a.to_bits() == b.to_bits()));
        assert!(read_f32(&p, 5).is_err());
    }
}
