//! Little-endian binary containers for dense grids and correspondence maps,
//! plus portable-graymap export.
//!
//! Grid file (`GRID`): magic `b"CHGR"`, `u32` height, `u32` width, then
//! `height * width` little-endian `f32` values in row-major order.
//!
//! Map file (`CMAP`): magic `b"CHCM"`, `u32` version (1), `u32` count,
//! `u32` map height, `u32` map width, `u32` stride, `u32` pad x, `u32` pad y,
//! then `count` row-major `f32` probability grids.

use crate::error::{Error, Result};
use std::io::{Read, Write};

pub const GRID_MAGIC: [u8; 4] = *b"CHGR";
pub const MAP_MAGIC: [u8; 4] = *b"CHCM";
pub const MAP_VERSION: u32 = 1;

/// Row-major `f32` grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Grid {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::shape(
                "grid",
                format!("{} values for {height}x{width}", data.len()),
            ));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.data[row * self.width + col]
    }
}

pub(crate) fn write_u32<W: Write>(w: &mut W, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub(crate) fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn write_f32s<W: Write>(w: &mut W, values: &[f32]) -> Result<()> {
    let mut buf = Vec::with_capacity(values.len() * 4);
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub(crate) fn read_f32s<R: Read>(r: &mut R, n: usize) -> Result<Vec<f32>> {
    let mut buf = vec![0u8; n * 4];
    r.read_exact(&mut buf)?;
    Ok(buf
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

pub(crate) fn expect_magic<R: Read>(r: &mut R, magic: &[u8; 4]) -> Result<()> {
    let mut m = [0u8; 4];
    r.read_exact(&mut m)?;
    if &m != magic {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&m),
            String::from_utf8_lossy(magic)
        )));
    }
    Ok(())
}

fn dim(v: usize) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Format(format!("dimension {v} exceeds u32")))
}

pub fn write_grid<W: Write>(w: &mut W, grid: &Grid) -> Result<()> {
    w.write_all(&GRID_MAGIC)?;
    write_u32(w, dim(grid.height)?)?;
    write_u32(w, dim(grid.width)?)?;
    write_f32s(w, &grid.data)
}

pub fn read_grid<R: Read>(r: &mut R) -> Result<Grid> {
    expect_magic(r, &GRID_MAGIC)?;
    let h = read_u32(r)? as usize;
    let w = read_u32(r)? as usize;
    let data = read_f32s(r, h * w)?;
    Grid::new(h, w, data)
}

/// Writes a binary PGM (P5), linearly rescaling `[lo, hi]` to `0..=255`.
pub fn write_pgm<W: Write>(w: &mut W, grid: &Grid, lo: f32, hi: f32) -> Result<()> {
    write!(w, "P5\n{} {}\n255\n", grid.width, grid.height)?;
    let span = if hi > lo { hi - lo } else { 1.0 };
    let bytes: Vec<u8> = grid
        .data
        .iter()
        .map(|&v| (((v - lo) / span).clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    w.write_all(&bytes)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_layout_is_bit_exact() {
        let g = Grid::new(1, 2, vec![1.0, -0.5]).unwrap();
        let mut buf = Vec::new();
        write_grid(&mut buf, &g).unwrap();
        let mut expect = b"CHGR".to_vec();
        expect.extend_from_slice(&1u32.to_le_bytes());
        expect.extend_from_slice(&2u32.to_le_bytes());
        expect.extend_from_slice(&1.0f32.to_le_bytes());
        expect.extend_from_slice(&(-0.5f32).to_le_bytes());
        assert_eq!(buf, expect);
        assert_eq!(read_grid(&mut buf.as_slice()).unwrap(), g);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        assert!(matches!(
            read_grid(&mut b"XXXX".as_slice()),
            Err(Error::Format(_))
        ));
        let g = Grid::new(2, 2, vec![0.0; 4]).unwrap();
        let mut buf = Vec::new();
        write_grid(&mut buf, &g).unwrap();
        buf.truncate(buf.len() - 1);
        assert!(read_grid(&mut buf.as_slice()).is_err());
    }

    #[test]
    fn pgm_header_and_scaling() {
        let g = Grid::new(1, 3, vec![0.0, 0.5, 1.0]).unwrap();
        let mut buf = Vec::new();
        write_pgm(&mut buf, &g, 0.0, 1.0).unwrap();
        assert!(buf.starts_with(b"P5\n3 1\n255\n"));
        assert_eq!(&buf[buf.len() - 3..], &[0, 128, 255]);
    }
}
