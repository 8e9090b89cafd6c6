//! Portable Float Map codec.
//!
//! Header is `PF` (3 channels) or `Pf` (1 channel), the width and height,
//! then a scale whose sign encodes endianness (negative = little-endian).
//! Rows are stored bottom-to-top as 32-bit floats.

use std::path::Path;

use crate::error::{Error, Result};
use crate::grid::{DepthGrid, ImageGrid};
use crate::io::{read_file, write_atomic};

#[derive(Debug, Clone, PartialEq)]
pub struct FloatMap {
    pub width: usize,
    pub height: usize,
    /// 1 or 3.
    pub channels: usize,
    /// Row-major, top row first, channels interleaved.
    pub data: Vec<f32>,
}

impl FloatMap {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::invalid(format!("PFM holds 1 or 3 channels, not {channels}")));
        }
        if width == 0 || height == 0 {
            return Err(Error::invalid("PFM dimensions must be positive"));
        }
        if data.len() != width * height * channels {
            return Err(Error::invalid("PFM payload length does not match dimensions"));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn from_depth(depth: &DepthGrid) -> Self {
        let (h, w) = depth.dims();
        Self {
            width: w,
            height: h,
            channels: 1,
            data: depth.data().iter().map(|&v| v as f32).collect(),
        }
    }

    pub fn from_image(image: &ImageGrid) -> Result<Self> {
        let (h, w) = image.dims();
        Self::new(w, h, image.channels(), image.data().iter().map(|&v| v as f32).collect())
    }

    /// Single-channel map from arbitrary per-pixel values.
    pub fn from_values(height: usize, width: usize, values: &[f64]) -> Result<Self> {
        Self::new(width, height, 1, values.iter().map(|&v| v as f32).collect())
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| v as f64).collect()
    }

    pub fn into_depth(self) -> Result<DepthGrid> {
        if self.channels != 1 {
            return Err(Error::invalid("depth maps must have one channel"));
        }
        DepthGrid::new(self.height, self.width, self.to_f64())
    }

    pub fn into_image(self) -> Result<ImageGrid> {
        ImageGrid::new(self.height, self.width, self.channels, self.to_f64())
    }
}

/// Little-endian encoding with scale `-1.0`.
pub fn encode_pfm(map: &FloatMap) -> Vec<u8> {
    let magic = if map.channels == 3 { "PF" } else { "Pf" };
    let mut out = format!("{magic}\n{} {}\n-1.0\n", map.width, map.height).into_bytes();
    let row_len = map.width * map.channels;
    out.reserve(map.data.len() * 4);
    for row in map.data.chunks_exact(row_len).rev() {
        for v in row {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn fail(&self, message: impl Into<String>) -> Error {
        Error::Format {
            path: self.path.to_path_buf(),
            offset: self.pos,
            message: message.into(),
        }
    }

    fn skip_space(&mut self) {
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn token(&mut self, what: &str) -> Result<&'a str> {
        self.skip_space();
        let start = self.pos;
        while self.pos < self.bytes.len() && !self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(self.fail(format!("expected {what}, found end of header")));
        }
        let bytes = self.bytes;
        std::str::from_utf8(&bytes[start..self.pos]).map_err(|_| Error::Format {
            path: self.path.to_path_buf(),
            offset: start,
            message: format!("{what} is not ASCII"),
        })
    }

    fn dimension(&mut self, what: &str) -> Result<usize> {
        self.skip_space();
        let start = self.pos;
        let tok = self.token(what)?;
        match tok.parse::<usize>() {
            Ok(v) if v > 0 => Ok(v),
            _ => Err(Error::Format {
                path: self.path.to_path_buf(),
                offset: start,
                message: format!("{what} must be a positive integer, got {tok:?}"),
            }),
        }
    }
}

/// Decodes a PFM byte stream; `path` only labels errors.
pub fn decode_pfm(bytes: &[u8], path: &Path) -> Result<FloatMap> {
    let mut cur = Cursor { bytes, pos: 0, path };
    let channels = match bytes.get(..2) {
        Some(b"PF") => 3,
        Some(b"Pf") => 1,
        _ => return Err(cur.fail("bad magic, expected \"PF\" or \"Pf\"")),
    };
    cur.pos = 2;
    if !bytes.get(2).is_some_and(|b| b.is_ascii_whitespace()) {
        return Err(cur.fail("expected whitespace after magic"));
    }
    let width = cur.dimension("width")?;
    let height = cur.dimension("height")?;
    cur.skip_space();
    let scale_at = cur.pos;
    let scale_tok = cur.token("scale")?;
    let scale: f64 = scale_tok.parse().map_err(|_| Error::Format {
        path: path.to_path_buf(),
        offset: scale_at,
        message: format!("scale is not a number: {scale_tok:?}"),
    })?;
    if scale == 0.0 || !scale.is_finite() {
        return Err(Error::Format {
            path: path.to_path_buf(),
            offset: scale_at,
            message: "scale must be finite and non-zero".into(),
        });
    }
    // Exactly one whitespace byte separates the header from the payload.
    if !bytes.get(cur.pos).is_some_and(|b| b.is_ascii_whitespace()) {
        return Err(cur.fail("header must end with a whitespace byte"));
    }
    cur.pos += 1;
    let little = scale < 0.0;
    let count = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(channels))
        .ok_or_else(|| cur.fail("dimensions overflow"))?;
    let payload = &bytes[cur.pos..];
    if payload.len() < count * 4 {
        return Err(Error::Format {
            path: path.to_path_buf(),
            offset: bytes.len(),
            message: format!("truncated payload: need {} bytes, found {}", count * 4, payload.len()),
        });
    }
    if payload.len() > count * 4 {
        return Err(Error::Format {
            path: path.to_path_buf(),
            offset: cur.pos + count * 4,
            message: "trailing bytes after payload".into(),
        });
    }
    let row_len = width * channels;
    let mut data = vec![0.0f32; count];
    for (file_row, chunk) in payload.chunks_exact(row_len * 4).enumerate() {
        let row = height - 1 - file_row;
        for (k, b) in chunk.chunks_exact(4).enumerate() {
            let raw = [b[0], b[1], b[2], b[3]];
            data[row * row_len + k] = if little {
                f32::from_le_bytes(raw)
            } else {
                f32::from_be_bytes(raw)
            };
        }
    }
    FloatMap::new(width, height, channels, data)
}

pub fn read_pfm(path: &Path) -> Result<FloatMap> {
    decode_pfm(&read_file(path)?, path)
}

pub fn write_pfm(path: &Path, map: &FloatMap) -> Result<()> {
    write_atomic(path, &encode_pfm(map))
}
