//! 8-bit binary PGM output with min/max normalization.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};

/// Affine map used for an image: `min → 0`, `max → 255`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GrayScale {
    pub min: f64,
    pub max: f64,
}

impl GrayScale {
    pub fn of(values: &[f64]) -> Self {
        let min = values.iter().copied().fold(f64::INFINITY, f64::min);
        let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if values.is_empty() {
            GrayScale { min: 0.0, max: 0.0 }
        } else {
            // adding zero turns -0.0 into 0.0
            GrayScale {
                min: min + 0.0,
                max: max + 0.0,
            }
        }
    }

    /// Constant images map to 0.
    pub fn level(&self, v: f64) -> u8 {
        let span = self.max - self.min;
        if span <= 0.0 {
            return 0;
        }
        (255.0 * ((v - self.min) / span).clamp(0.0, 1.0)).round() as u8
    }

    /// Sidecar text: `min <value>` and `max <value>` lines.
    pub fn to_text(&self) -> String {
        format!("min {:e}\nmax {:e}\n", self.min, self.max)
    }
}

/// Writes a row-major `width × height` image whose first row is the
/// bottom (`y = -1`) row, so the file displays upright.
pub fn write_pgm(path: &Path, width: usize, height: usize, values: &[f64]) -> Result<GrayScale> {
    check_len("PGM image", width * height, values.len())?;
    let scale = GrayScale::of(values);
    let mut buf = format!("P5\n{width} {height}\n255\n").into_bytes();
    for row in (0..height).rev() {
        buf.extend(values[row * width..(row + 1) * width].iter().map(|v| scale.level(*v)));
    }
    std::fs::File::create(path)?.write_all(&buf)?;
    Ok(scale)
}

/// Reads back `(width, height, pixels)` in file order.
pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let bytes = std::fs::read(path)?;
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::container(path, "truncated PGM header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    let parse = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| Error::container(path, format!("bad PGM header field {s:?}")))
    };
    if fields[0] != "P5" || parse(&fields[3])? != 255 {
        return Err(Error::container(path, "not an 8-bit binary PGM"));
    }
    let (w, h) = (parse(&fields[1])?, parse(&fields[2])?);
    let pixels = bytes[pos + 1..].to_vec();
    check_len("PGM pixels", w * h, pixels.len())?;
    Ok((w, h, pixels))
}
