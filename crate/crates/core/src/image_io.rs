//! 8-bit grayscale PGM (P5) and PNG images as `1 x 1 x H x W` tensors in `[0, 1]`.

use std::path::Path;

use crate::error::{N2kError, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ImageFormat {
    Pgm,
    Png,
}

impl ImageFormat {
    pub fn from_path(path: &Path) -> Result<Self> {
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase);
        match ext.as_deref() {
            Some("pgm") => Ok(ImageFormat::Pgm),
            Some("png") => Ok(ImageFormat::Png),
            _ => Err(N2kError::Unsupported(format!(
                "{}: expected a .pgm or .png file",
                path.display()
            ))),
        }
    }
}

fn parse_err(offset: usize, message: impl Into<String>) -> N2kError {
    N2kError::Parse {
        offset,
        message: message.into(),
    }
}

struct HeaderReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl HeaderReader<'_> {
    fn skip_space_and_comments(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while let Some(&c) = self.bytes.get(self.pos) {
                    self.pos += 1;
                    if c == b'\n' || c == b'\r' {
                        break;
                    }
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(parse_err(start, format!("expected {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| parse_err(start, format!("{what} out of range")))
    }
}

/// Decodes a binary PGM; samples are divided by `maxval`.
pub fn decode_pgm(bytes: &[u8]) -> Result<Tensor> {
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        return Err(parse_err(0, "missing P5 magic"));
    }
    let mut r = HeaderReader { bytes, pos: 2 };
    let width = r.number("width")?;
    let height = r.number("height")?;
    let maxval_at = r.pos;
    let maxval = r.number("maxval")?;
    if width == 0 || height == 0 {
        return Err(parse_err(maxval_at, "image has zero size"));
    }
    if maxval == 0 || maxval > 255 {
        return Err(N2kError::Unsupported(format!(
            "PGM maxval {maxval}; only 8-bit images are supported"
        )));
    }
    match bytes.get(r.pos) {
        Some(b) if b.is_ascii_whitespace() => r.pos += 1,
        _ => return Err(parse_err(r.pos, "expected whitespace after maxval")),
    }
    let n = width
        .checked_mul(height)
        .ok_or_else(|| parse_err(0, "image dimensions overflow"))?;
    let pixels = bytes
        .get(r.pos..r.pos + n)
        .ok_or_else(|| parse_err(bytes.len(), format!("expected {n} pixel bytes")))?;
    let scale = maxval as f64;
    Tensor::image(
        height,
        width,
        pixels.iter().map(|&p| p as f64 / scale).collect(),
    )
}

fn to_bytes(t: &Tensor) -> Result<(usize, usize, Vec<u8>)> {
    let s = t.shape();
    if s.batch != 1 || s.channels != 1 {
        return Err(N2kError::Unsupported(format!(
            "only single grayscale images can be written, got {s}"
        )));
    }
    let bytes = t
        .data()
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    Ok((s.height, s.width, bytes))
}

/// Clamps to `[0, 1]`, scales by 255 and rounds half away from zero.
pub fn encode_pgm(t: &Tensor) -> Result<Vec<u8>> {
    let (h, w, pixels) = to_bytes(t)?;
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend_from_slice(&pixels);
    Ok(out)
}

pub fn decode_png(bytes: &[u8]) -> Result<Tensor> {
    let mut decoder = png::Decoder::new(std::io::Cursor::new(bytes));
    decoder.set_transformations(png::Transformations::EXPAND);
    let mut reader = decoder
        .read_info()
        .map_err(|e| parse_err(0, format!("PNG: {e}")))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| parse_err(0, "PNG dimensions overflow"))?;
    let mut buf = vec![0; size];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| parse_err(0, format!("PNG: {e}")))?;
    if info.color_type != png::ColorType::Grayscale || info.bit_depth != png::BitDepth::Eight {
        return Err(N2kError::Unsupported(format!(
            "PNG is {:?} at {:?}; only 8-bit grayscale is supported",
            info.color_type, info.bit_depth
        )));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let data = buf[..info.buffer_size()]
        .iter()
        .map(|&p| p as f64 / 255.0)
        .collect();
    Tensor::image(h, w, data)
}

pub fn encode_png(t: &Tensor) -> Result<Vec<u8>> {
    let (h, w, pixels) = to_bytes(t)?;
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, w as u32, h as u32);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc
            .write_header()
            .map_err(|e| N2kError::Unsupported(format!("PNG encoder: {e}")))?;
        writer
            .write_image_data(&pixels)
            .map_err(|e| N2kError::Unsupported(format!("PNG encoder: {e}")))?;
    }
    Ok(out)
}

pub fn decode_image(bytes: &[u8], format: ImageFormat) -> Result<Tensor> {
    match format {
        ImageFormat::Pgm => decode_pgm(bytes),
        ImageFormat::Png => decode_png(bytes),
    }
}

pub fn encode_image(t: &Tensor, format: ImageFormat) -> Result<Vec<u8>> {
    match format {
        ImageFormat::Pgm => encode_pgm(t),
        ImageFormat::Png => encode_png(t),
    }
}

pub fn read_image(path: &Path) -> Result<Tensor> {
    let format = ImageFormat::from_path(path)?;
    let bytes = std::fs::read(path).map_err(|e| N2kError::io(path, e))?;
    decode_image(&bytes, format).map_err(|e| match e {
        N2kError::Parse { offset, message } => N2kError::Parse {
            offset,
            message: format!("{}: {message}", path.display()),
        },
        other => other,
    })
}

pub fn write_image(path: &Path, t: &Tensor) -> Result<()> {
    let bytes = encode_image(t, ImageFormat::from_path(path)?)?;
    std::fs::write(path, bytes).map_err(|e| N2kError::io(path, e))
}

/// Image files with a supported extension directly inside `dir`, sorted by name.
pub fn list_images(dir: &Path) -> Result<Vec<std::path::PathBuf>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| N2kError::io(dir, e))? {
        let path = entry.map_err(|e| N2kError::io(dir, e))?.path();
        if path.is_file() && ImageFormat::from_path(&path).is_ok() {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}
