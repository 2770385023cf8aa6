//! Grayscale image files: raw little-endian `f32` blobs, binary/ASCII PGM and PNG.

use std::path::Path;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub fn write_f32_blob(path: &Path, image: &Tensor) -> Result<()> {
    let mut bytes = Vec::with_capacity(image.len() * 4);
    for &v in image.data() {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_f32_blob(path: &Path, height: usize, width: usize) -> Result<Tensor> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() != height * width * 4 {
        return Err(Error::malformed(
            path,
            format!("expected {} bytes for {height}x{width} f32, got {}", height * width * 4, bytes.len()),
        ));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Tensor::matrix(height, width, data).map_err(|e| Error::malformed(path, e.to_string()))
}

/// Decodes `P2`/`P5` PGM (8- or 16-bit) into `[0, 1]` floats.
pub fn read_pgm(path: &Path) -> Result<Tensor> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pgm(&bytes).map_err(|reason| Error::malformed(path, reason))
}

/// Decodes a PNG to 8-bit and converts colour images to luma
/// (`0.299 R + 0.587 G + 0.114 B`); alpha is dropped.
pub fn read_png(path: &Path) -> Result<Tensor> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let bad = |e: png::DecodingError| Error::malformed(path, e.to_string());
    let mut decoder = png::Decoder::new(std::io::BufReader::new(file));
    decoder.set_transformations(png::Transformations::normalize_to_color8());
    let mut reader = decoder.read_info().map_err(bad)?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::malformed(path, "image too large"))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(bad)?;
    let (w, h) = (info.width as usize, info.height as usize);
    let channels = info.color_type.samples();
    let row = info.line_size;
    let mut data = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let px = &buf[y * row + x * channels..][..channels];
            let v = match channels {
                1 | 2 => px[0] as f64,
                _ => 0.299 * px[0] as f64 + 0.587 * px[1] as f64 + 0.114 * px[2] as f64,
            };
            data.push(v / 255.0);
        }
    }
    Tensor::matrix(h, w, data).map_err(|e| Error::malformed(path, e.to_string()))
}

/// Dispatches on extension: `.f32` needs the declared size, `.pgm`/`.png`
/// carry their own and are checked against it.
pub fn read_image(path: &Path, height: usize, width: usize) -> Result<Tensor> {
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(|e| e.to_ascii_lowercase())
        .unwrap_or_default();
    let img = match ext.as_str() {
        "f32" => return read_f32_blob(path, height, width),
        "pgm" => read_pgm(path)?,
        "png" => read_png(path)?,
        other => {
            return Err(Error::malformed(
                path,
                format!("unsupported image extension {other:?}"),
            ))
        }
    };
    if img.dims() != (height, width) {
        return Err(Error::malformed(
            path,
            format!("declared {height}x{width}, file is {}x{}", img.rows(), img.cols()),
        ));
    }
    Ok(img)
}

fn decode_pgm(bytes: &[u8]) -> std::result::Result<Tensor, String> {
    let mut pos = 0;
    let mut token = || -> std::result::Result<String, String> {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err("truncated header".into());
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    let magic = token()?;
    let num = |s: String| s.parse::<usize>().map_err(|_| format!("bad header field {s:?}"));
    let width = num(token()?)?;
    let height = num(token()?)?;
    let maxval = num(token()?)?;
    if maxval == 0 || maxval > 65535 {
        return Err(format!("maxval {maxval} out of range"));
    }
    let n = width * height;
    let scale = maxval as f64;
    let data: Vec<f64> = match magic.as_str() {
        "P5" => {
            let body = &bytes[pos + 1..];
            if maxval < 256 {
                if body.len() < n {
                    return Err("truncated pixel data".into());
                }
                body[..n].iter().map(|&b| b as f64 / scale).collect()
            } else {
                if body.len() < 2 * n {
                    return Err("truncated pixel data".into());
                }
                body.chunks_exact(2)
                    .take(n)
                    .map(|c| u16::from_be_bytes([c[0], c[1]]) as f64 / scale)
                    .collect()
            }
        }
        "P2" => {
            let rest = String::from_utf8_lossy(&bytes[pos..]);
            let vals: std::result::Result<Vec<f64>, String> = rest
                .split_ascii_whitespace()
                .take(n)
                .map(|s| s.parse::<f64>().map(|v| v / scale).map_err(|_| format!("bad pixel {s:?}")))
                .collect();
            let vals = vals?;
            if vals.len() < n {
                return Err("truncated pixel data".into());
            }
            vals
        }
        other => return Err(format!("unsupported PGM magic {other:?}")),
    };
    Tensor::matrix(height, width, data).map_err(|e| e.to_string())
}
