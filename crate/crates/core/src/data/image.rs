//! Binary PPM (P6) / PGM (P5) reading and writing.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::DataError;

/// Planar image, channels-first, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }
}

fn next_token(bytes: &[u8], pos: &mut usize) -> Option<String> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    (start < *pos).then(|| String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
}

/// Decode a P5 or P6 file (8- or 16-bit samples).
pub fn decode_pnm(bytes: &[u8]) -> Result<Image, DataError> {
    let bad = |m: &str| DataError::Image(m.to_string());
    let mut pos = 0;
    let magic = next_token(bytes, &mut pos).ok_or_else(|| bad("empty file"))?;
    let channels = match magic.as_str() {
        "P5" => 1,
        "P6" => 3,
        other => return Err(bad(&format!("unsupported magic {other:?}"))),
    };
    let mut num = || -> Result<usize, DataError> {
        next_token(bytes, &mut pos)
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| bad("malformed header"))
    };
    let (width, height, maxval) = (num()?, num()?, num()?);
    if width == 0 || height == 0 || maxval == 0 || maxval > 65535 {
        return Err(bad("invalid dimensions or maxval"));
    }
    pos += 1;
    let wide = maxval > 255;
    let n = width * height * channels;
    let need = if wide { 2 * n } else { n };
    if bytes.len() < pos + need {
        return Err(bad("truncated pixel data"));
    }
    let raw = &bytes[pos..pos + need];
    let mut img = Image::new(channels, height, width);
    for i in 0..n {
        let v = if wide {
            u16::from_be_bytes([raw[2 * i], raw[2 * i + 1]]) as f32
        } else {
            raw[i] as f32
        };
        let (pix, c) = (i / channels, i % channels);
        img.data[c * height * width + pix] = v / maxval as f32;
    }
    Ok(img)
}

pub fn read_pnm(path: &Path) -> Result<Image, DataError> {
    let bytes = fs::read(path).map_err(|e| DataError::Io(path.display().to_string(), e.to_string()))?;
    decode_pnm(&bytes)
}

/// 8-bit P6 (3 channels) or P5 (1 channel) encoding.
pub fn encode_pnm8(img: &Image) -> Result<Vec<u8>, DataError> {
    let magic = match img.channels {
        1 => "P5",
        3 => "P6",
        c => return Err(DataError::Image(format!("cannot encode {c} channels"))),
    };
    let mut out = format!("{magic}\n{} {}\n255\n", img.width, img.height).into_bytes();
    let plane = img.height * img.width;
    for p in 0..plane {
        for c in 0..img.channels {
            let v = img.data[c * plane + p].clamp(0.0, 1.0);
            out.push((v * 255.0).round() as u8);
        }
    }
    Ok(out)
}

pub fn write_pnm8(path: &Path, img: &Image) -> Result<(), DataError> {
    let bytes = encode_pnm8(img)?;
    fs::write(path, bytes).map_err(|e| DataError::Io(path.display().to_string(), e.to_string()))
}

/// 16-bit grayscale PGM of `values` (row-major `height x width`), min-max
/// normalized to `0..=65535`. `comments` become `#` header lines.
pub fn encode_pgm16(values: &[f64], width: usize, height: usize, comments: &[&str]) -> Vec<u8> {
    assert_eq!(values.len(), width * height);
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let mut out = b"P5\n".to_vec();
    for c in comments {
        for line in c.lines() {
            out.extend_from_slice(format!("# {line}\n").as_bytes());
        }
    }
    out.extend_from_slice(format!("{width} {height}\n65535\n").as_bytes());
    for &v in values {
        let q = if span > 0.0 { ((v - lo) / span * 65535.0).round() as u16 } else { 0 };
        out.extend_from_slice(&q.to_be_bytes());
    }
    out
}

pub fn write_pgm16(path: &Path, values: &[f64], width: usize, height: usize, comments: &[&str]) -> Result<(), DataError> {
    let bytes = encode_pgm16(values, width, height, comments);
    let mut f = fs::File::create(path).map_err(|e| DataError::Io(path.display().to_string(), e.to_string()))?;
    f.write_all(&bytes)
        .map_err(|e| DataError::Io(path.display().to_string(), e.to_string()))
}
