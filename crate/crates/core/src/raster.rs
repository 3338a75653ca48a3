//! RGB rasters and binary netpbm I/O (PPM for images, PGM for masks).

use crate::error::{Error, Result};
use std::io::{Read, Write};
use std::path::Path;

/// Interleaved RGB image with float channels in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    pub h: usize,
    pub w: usize,
    /// Row-major, `h * w * 3` values.
    pub data: Vec<f32>,
}

impl Raster {
    pub fn new(h: usize, w: usize) -> Self {
        Raster {
            h,
            w,
            data: vec![0.0; h * w * 3],
        }
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        let o = (y * self.w + x) * 3;
        [self.data[o], self.data[o + 1], self.data[o + 2]]
    }

    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [f32; 3]) {
        let o = (y * self.w + x) * 3;
        self.data[o] = rgb[0];
        self.data[o + 1] = rgb[1];
        self.data[o + 2] = rgb[2];
    }

    /// Write as binary PPM (P6), clamping to [0, 1].
    pub fn write_ppm(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        write!(f, "P6\n{} {}\n255\n", self.w, self.h)?;
        let bytes: Vec<u8> = self
            .data
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        f.write_all(&bytes)?;
        Ok(())
    }

    /// Read a binary PPM (P6) file.
    pub fn read_ppm(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        let name = path.display().to_string();
        let mut pos = 0usize;
        let mut token = |pos: &mut usize| -> Result<String> {
            while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
                *pos += 1;
            }
            if *pos < bytes.len() && bytes[*pos] == b'#' {
                while *pos < bytes.len() && bytes[*pos] != b'\n' {
                    *pos += 1;
                }
                while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
                    *pos += 1;
                }
            }
            let start = *pos;
            while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
                *pos += 1;
            }
            if start == *pos {
                return Err(Error::format(&name, start as u64, "unexpected end of header"));
            }
            Ok(String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
        };
        let magic = token(&mut pos)?;
        if magic != "P6" {
            return Err(Error::format(&name, 0, format!("expected P6 magic, got {magic:?}")));
        }
        let w: usize = token(&mut pos)?.parse().map_err(|_| Error::format(&name, pos as u64, "bad width"))?;
        let h: usize = token(&mut pos)?.parse().map_err(|_| Error::format(&name, pos as u64, "bad height"))?;
        let maxval: usize = token(&mut pos)?.parse().map_err(|_| Error::format(&name, pos as u64, "bad maxval"))?;
        if maxval != 255 {
            return Err(Error::format(&name, pos as u64, format!("unsupported maxval {maxval}")));
        }
        pos += 1; // single whitespace after maxval
        let need = w * h * 3;
        if bytes.len() < pos + need {
            return Err(Error::format(&name, bytes.len() as u64, format!("truncated pixel data: need {need} bytes")));
        }
        let data = bytes[pos..pos + need].iter().map(|&b| b as f32 / 255.0).collect();
        Ok(Raster { h, w, data })
    }
}

/// Write a grayscale mask as binary PGM (P5).
pub fn write_pgm(path: &Path, w: usize, h: usize, pixels: &[u8]) -> Result<()> {
    if pixels.len() != w * h {
        return Err(Error::shape("write_pgm", format!("{}x{} vs {} pixels", w, h, pixels.len())));
    }
    let mut f = std::fs::File::create(path)?;
    write!(f, "P5\n{} {}\n255\n", w, h)?;
    f.write_all(pixels)?;
    Ok(())
}
