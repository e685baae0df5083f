//! Grayscale PGM and PNG reading and writing.

use std::io::{BufReader, Cursor};
use std::path::Path;

use crate::error::{GksError, Result};
use crate::grid::{Image, Mask};

const PNG_SIGNATURE: &[u8; 8] = b"\x89PNG\r\n\x1a\n";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ImageFormat {
    Pgm,
    Png,
}

impl ImageFormat {
    /// Chosen from the file extension; anything but `.png` is PGM.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(e) if e.eq_ignore_ascii_case("png") => ImageFormat::Png,
            _ => ImageFormat::Pgm,
        }
    }
}

/// Loads an 8- or 16-bit grayscale image scaled linearly to `[0, 1]`.
pub fn load_image(path: &Path) -> Result<Image> {
    let bytes = std::fs::read(path).map_err(|e| GksError::io(path, e))?;
    decode_image(&bytes, path)
}

/// Decodes in-memory PGM or PNG bytes; `path` only labels errors.
pub fn decode_image(bytes: &[u8], path: &Path) -> Result<Image> {
    if bytes.starts_with(PNG_SIGNATURE) {
        decode_png(bytes, path)
    } else if bytes.starts_with(b"P") {
        decode_pgm(bytes, path)
    } else {
        Err(GksError::Format {
            path: path.to_path_buf(),
            msg: "unrecognized image format (expected PGM or PNG)".into(),
        })
    }
}

/// Loads a binary mask: pixels above one half are changed.
pub fn load_mask(path: &Path) -> Result<Mask> {
    Ok(load_image(path)?.map(|&v| u8::from(v > 0.5)))
}

fn format_err(path: &Path, msg: impl Into<String>) -> GksError {
    GksError::Format {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

fn decode_pgm(bytes: &[u8], path: &Path) -> Result<Image> {
    match &bytes[..bytes.len().min(2)] {
        b"P5" => {}
        b"P6" | b"P3" => return Err(GksError::NotGrayscale { path: path.to_path_buf() }),
        _ => return Err(format_err(path, "only binary P5 PGM is supported")),
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => return Err(GksError::Truncated { path: path.to_path_buf() }),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(|b| b.is_ascii_digit()) {
            pos += 1;
        }
        if start == pos {
            return Err(format_err(path, "malformed PGM header"));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| format_err(path, "PGM header value out of range"))?;
    }
    let [width, height, maxval] = fields;
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(GksError::Truncated { path: path.to_path_buf() }),
    }
    if width == 0 || height == 0 {
        return Err(format_err(path, "PGM has zero extent"));
    }
    let bytes_per = match maxval {
        255 => 1,
        65535 => 2,
        depth => {
            return Err(GksError::UnsupportedBitDepth {
                path: path.to_path_buf(),
                depth: format!("maxval {depth}"),
            })
        }
    };
    let n = width * height;
    let raw = &bytes[pos..];
    if raw.len() < n * bytes_per {
        return Err(GksError::Truncated { path: path.to_path_buf() });
    }
    let scale = maxval as f64;
    let data = if bytes_per == 1 {
        raw[..n].iter().map(|&b| b as f64 / scale).collect()
    } else {
        raw[..2 * n]
            .chunks_exact(2)
            .map(|c| u16::from_be_bytes([c[0], c[1]]) as f64 / scale)
            .collect()
    };
    Image::new(height, width, data)
}

fn png_err(path: &Path, e: png::DecodingError) -> GksError {
    match e {
        png::DecodingError::IoError(io) if io.kind() == std::io::ErrorKind::UnexpectedEof => {
            GksError::Truncated { path: path.to_path_buf() }
        }
        other => format_err(path, other.to_string()),
    }
}

fn decode_png(bytes: &[u8], path: &Path) -> Result<Image> {
    let mut decoder = png::Decoder::new(BufReader::new(Cursor::new(bytes)));
    decoder.set_transformations(png::Transformations::IDENTITY);
    let mut reader = decoder.read_info().map_err(|e| png_err(path, e))?;
    let (color, depth) = {
        let info = reader.info();
        (info.color_type, info.bit_depth)
    };
    if color != png::ColorType::Grayscale {
        return Err(GksError::NotGrayscale { path: path.to_path_buf() });
    }
    let scale = match depth {
        png::BitDepth::Eight => 255.0,
        png::BitDepth::Sixteen => 65535.0,
        other => {
            return Err(GksError::UnsupportedBitDepth {
                path: path.to_path_buf(),
                depth: format!("{} bits", other as u8),
            })
        }
    };
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| format_err(path, "PNG too large"))?;
    let mut buf = vec![0; size];
    let frame = reader.next_frame(&mut buf).map_err(|e| png_err(path, e))?;
    let (w, h) = (frame.width as usize, frame.height as usize);
    let data = if depth == png::BitDepth::Eight {
        buf[..w * h].iter().map(|&b| b as f64 / scale).collect()
    } else {
        buf[..2 * w * h]
            .chunks_exact(2)
            .map(|c| u16::from_be_bytes([c[0], c[1]]) as f64 / scale)
            .collect()
    };
    Image::new(h, w, data)
}

fn quantize16(v: f64) -> u16 {
    (v.clamp(0.0, 1.0) * 65535.0).round() as u16
}

fn encode_pgm(width: usize, height: usize, maxval: u32, samples: &[u8]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n{maxval}\n").into_bytes();
    out.extend_from_slice(samples);
    out
}

fn encode_png(width: usize, height: usize, depth: png::BitDepth, samples: &[u8], path: &Path) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, width as u32, height as u32);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(depth);
        let mut w = enc.write_header().map_err(|e| format_err(path, e.to_string()))?;
        w.write_image_data(samples)
            .map_err(|e| format_err(path, e.to_string()))?;
        w.finish().map_err(|e| format_err(path, e.to_string()))?;
    }
    Ok(out)
}

/// Writes a `[0, 1]` image as 16-bit grayscale, format chosen by extension.
pub fn save_image(image: &Image, path: &Path) -> Result<()> {
    let samples: Vec<u8> = image
        .data()
        .iter()
        .flat_map(|&v| quantize16(v).to_be_bytes())
        .collect();
    let (h, w) = image.dims();
    let bytes = match ImageFormat::from_path(path) {
        ImageFormat::Pgm => encode_pgm(w, h, 65535, &samples),
        ImageFormat::Png => encode_png(w, h, png::BitDepth::Sixteen, &samples, path)?,
    };
    std::fs::write(path, bytes).map_err(|e| GksError::io(path, e))
}

/// Writes a binary map as 8-bit 0/255 grayscale.
pub fn save_map(map: &Mask, path: &Path) -> Result<()> {
    let samples: Vec<u8> = map.data().iter().map(|&v| if v != 0 { 255 } else { 0 }).collect();
    let (h, w) = map.dims();
    let bytes = match ImageFormat::from_path(path) {
        ImageFormat::Pgm => encode_pgm(w, h, 255, &samples),
        ImageFormat::Png => encode_png(w, h, png::BitDepth::Eight, &samples, path)?,
    };
    std::fs::write(path, bytes).map_err(|e| GksError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_header_with_comment() {
        let mut bytes = b"P5\n# made by hand\n2 1\n255\n".to_vec();
        bytes.extend_from_slice(&[0, 255]);
        let img = decode_image(&bytes, Path::new("x.pgm")).unwrap();
        assert_eq!(img.dims(), (1, 2));
        assert_eq!(img.data(), &[0.0, 1.0]);
    }

    #[test]
    fn pgm_sixteen_bit_max() {
        let bytes = encode_pgm(1, 1, 65535, &[0xff, 0xff]);
        let img = decode_image(&bytes, Path::new("x.pgm")).unwrap();
        assert_eq!(img.data(), &[1.0]);
    }

    #[test]
    fn pgm_errors() {
        let p = Path::new("x.pgm");
        let trunc = encode_pgm(4, 4, 255, &[0; 7]);
        assert!(matches!(decode_image(&trunc, p), Err(GksError::Truncated { .. })));
        let depth = encode_pgm(1, 1, 1023, &[0, 0]);
        assert!(matches!(decode_image(&depth, p), Err(GksError::UnsupportedBitDepth { .. })));
        let color = b"P6\n1 1\n255\n\0\0\0".to_vec();
        assert!(matches!(decode_image(&color, p), Err(GksError::NotGrayscale { .. })));
    }

    #[test]
    fn png_rgb_rejected() {
        let p = Path::new("x.png");
        let mut out = Vec::new();
        {
            let mut enc = png::Encoder::new(&mut out, 1, 1);
            enc.set_color(png::ColorType::Rgb);
            enc.set_depth(png::BitDepth::Eight);
            let mut w = enc.write_header().unwrap();
            w.write_image_data(&[1, 2, 3]).unwrap();
            w.finish().unwrap();
        }
        let err = decode_image(&out, p).unwrap_err();
        assert!(err.to_string().contains("grayscale required"));
    }
}
