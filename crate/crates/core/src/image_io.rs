//! Image files: binary PPM (`P6`, 8-bit) always, PNG with the `png` feature.
//!
//! Images are `(1, 3, h, w)` tensors with values `byte / 255`.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

const PNG_MAGIC: &[u8] = b"\x89PNG";

/// Parses a binary PPM.
pub fn decode_ppm(bytes: &[u8]) -> Result<Tensor> {
    let mut pos = 0;
    let mut token = || -> Result<String> {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => return Err(Error::Format("PPM header ends early".into())),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(|b| !b.is_ascii_whitespace()) {
            pos += 1;
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    if token()? != "P6" {
        return Err(Error::Format("not a binary PPM (expected magic P6)".into()));
    }
    let mut num = |what: &str| -> Result<usize> {
        let t = token()?;
        t.parse().map_err(|_| Error::Format(format!("PPM {what} `{t}` is not a number")))
    };
    let w = num("width")?;
    let h = num("height")?;
    let maxval = num("maxval")?;
    if maxval != 255 {
        return Err(Error::Format(format!("only 8-bit PPM is supported (maxval {maxval})")));
    }
    if w == 0 || h == 0 {
        return Err(Error::Format("PPM has zero size".into()));
    }
    // exactly one whitespace byte separates the header from the raster
    let start = pos + 1;
    let need = w * h * 3;
    let raster = bytes
        .get(start..start + need)
        .ok_or_else(|| Error::Format(format!("PPM raster truncated: need {need} bytes")))?;
    Ok(from_interleaved(raster, h, w))
}

fn from_interleaved(raster: &[u8], h: usize, w: usize) -> Tensor {
    Tensor::from_fn(Shape::new(1, 3, h, w), |_, c, y, x| raster[(y * w + x) * 3 + c] as f64 / 255.0)
}

fn to_interleaved(img: &Tensor) -> Result<Vec<u8>> {
    let s = img.shape();
    if s.n != 1 || s.c != 3 {
        return Err(Error::invalid(format!("expected a 1x3xHxW image, got {s}")));
    }
    let mut out = Vec::with_capacity(s.plane() * 3);
    for y in 0..s.h {
        for x in 0..s.w {
            for c in 0..3 {
                out.push((img.at(0, c, y, x).clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    Ok(out)
}

/// Serializes an image as binary PPM after clamping to `[0, 1]` and
/// rounding to 8-bit.
pub fn encode_ppm(img: &Tensor) -> Result<Vec<u8>> {
    let s = img.shape();
    let mut out = format!("P6\n{} {}\n255\n", s.w, s.h).into_bytes();
    out.extend(to_interleaved(img)?);
    Ok(out)
}

/// Loads a PPM, or a PNG when built with the `png` feature.
pub fn load_image(path: &Path) -> Result<Tensor> {
    let bytes = std::fs::read(path)?;
    if bytes.starts_with(b"P6") {
        return decode_ppm(&bytes);
    }
    if bytes.starts_with(PNG_MAGIC) {
        return decode_png(&bytes);
    }
    Err(Error::Format(format!("{}: unsupported image format (use binary PPM or PNG)", path.display())))
}

/// Writes a PPM, or a PNG when the path ends in `.png` and the `png`
/// feature is on.
pub fn save_image(path: &Path, img: &Tensor) -> Result<()> {
    let is_png = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png"));
    let bytes = if is_png { encode_png(img)? } else { encode_ppm(img)? };
    std::fs::write(path, bytes)?;
    Ok(())
}

#[cfg(feature = "png")]
fn decode_png(bytes: &[u8]) -> Result<Tensor> {
    let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)
        .map_err(|e| Error::Format(format!("PNG: {e}")))?
        .to_rgb8();
    let (w, h) = img.dimensions();
    Ok(from_interleaved(img.as_raw(), h as usize, w as usize))
}

#[cfg(not(feature = "png"))]
fn decode_png(_: &[u8]) -> Result<Tensor> {
    Err(Error::Format("PNG input needs the `png` feature; convert to binary PPM or rebuild with --features png".into()))
}

#[cfg(feature = "png")]
fn encode_png(img: &Tensor) -> Result<Vec<u8>> {
    let s = img.shape();
    let raw = to_interleaved(img)?;
    let buf = image::RgbImage::from_raw(s.w as u32, s.h as u32, raw).expect("sized raster");
    let mut out = std::io::Cursor::new(Vec::new());
    buf.write_to(&mut out, image::ImageFormat::Png)
        .map_err(|e| Error::Format(format!("PNG: {e}")))?;
    Ok(out.into_inner())
}

#[cfg(not(feature = "png"))]
fn encode_png(_: &Tensor) -> Result<Vec<u8>> {
    Err(Error::Format("PNG output needs the `png` feature; write a .ppm file instead".into()))
}
