//! Image file I/O: 8/16-bit PNG, binary PPM (P6), and PFM.
//!
//! Integer formats are normalized to `[0, 1]` on load and quantized with
//! round-half-up on save. PFM carries `f32` samples verbatim, stored
//! little-endian with the bottom row first.

use std::fs;
use std::io::Read;
use std::path::Path;

use image::{DynamicImage, ImageBuffer};

use crate::error::{Error, Result};
use crate::image::Image;

/// Bit depth for integer-format encodes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BitDepth {
    Eight,
    Sixteen,
}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn ext_lower(path: &Path) -> String {
    path.extension()
        .and_then(|e| e.to_str())
        .unwrap_or("")
        .to_ascii_lowercase()
}

/// Loads an 8/16-bit PNG, binary PPM/PGM, or PFM file.
pub fn load_image(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    if ext_lower(path) == "pfm" {
        return load_pfm(path);
    }
    let dynimg = image::open(path).map_err(|e| Error::Decode {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    if dynimg.width() == 0 || dynimg.height() == 0 {
        return Err(Error::Decode {
            path: path.to_path_buf(),
            reason: "zero-dimension image".into(),
        });
    }
    let (w, h) = (dynimg.width() as usize, dynimg.height() as usize);
    let (channels, data) = match dynimg {
        DynamicImage::ImageLuma8(buf) => (1, planar_from_u8(&buf, w, h, 1)),
        DynamicImage::ImageLuma16(buf) => (1, planar_from_u16(&buf, w, h, 1)),
        DynamicImage::ImageRgb8(buf) => (3, planar_from_u8(&buf, w, h, 3)),
        DynamicImage::ImageRgb16(buf) => (3, planar_from_u16(&buf, w, h, 3)),
        // Alpha planes carry no signal for filtering; drop them.
        DynamicImage::ImageLumaA8(_) | DynamicImage::ImageLumaA16(_) => {
            let gray = dynimg.to_luma16();
            (1, planar_from_u16(&gray, w, h, 1))
        }
        DynamicImage::ImageRgba8(_) | DynamicImage::ImageRgba16(_) => {
            let rgb = dynimg.to_rgb16();
            (3, planar_from_u16(&rgb, w, h, 3))
        }
        other => {
            return Err(Error::Decode {
                path: path.to_path_buf(),
                reason: format!("unsupported sample format {:?}", other.color()),
            })
        }
    };
    Image::from_data(w, h, channels, data)
}

fn planar_from_u8<C>(buf: &ImageBuffer<C, Vec<u8>>, w: usize, h: usize, ch: usize) -> Vec<f64>
where
    C: image::Pixel<Subpixel = u8>,
{
    let raw = buf.as_raw();
    let mut data = vec![0.0; w * h * ch];
    for i in 0..w * h {
        for c in 0..ch {
            data[c * w * h + i] = raw[i * ch + c] as f64 / 255.0;
        }
    }
    data
}

fn planar_from_u16<C>(buf: &ImageBuffer<C, Vec<u16>>, w: usize, h: usize, ch: usize) -> Vec<f64>
where
    C: image::Pixel<Subpixel = u16>,
{
    let raw = buf.as_raw();
    let mut data = vec![0.0; w * h * ch];
    for i in 0..w * h {
        for c in 0..ch {
            data[c * w * h + i] = raw[i * ch + c] as f64 / 65535.0;
        }
    }
    data
}

/// Round-half-up quantization of a clamped sample.
#[inline]
pub fn quantize(v: f64, max: f64) -> u64 {
    (v.clamp(0.0, 1.0) * max + 0.5).floor() as u64
}

/// Saves as 8-bit PNG/PPM or PFM depending on the file extension.
pub fn save_image(img: &Image, path: impl AsRef<Path>) -> Result<()> {
    save_image_depth(img, path, BitDepth::Eight)
}

/// Saves with an explicit bit depth for the integer formats.
pub fn save_image_depth(img: &Image, path: impl AsRef<Path>, depth: BitDepth) -> Result<()> {
    let path = path.as_ref();
    match ext_lower(path).as_str() {
        "pfm" => save_pfm(img, path),
        "png" | "ppm" | "pgm" => save_integer(img, path, depth),
        other => Err(Error::Encode {
            path: path.to_path_buf(),
            reason: format!("unsupported output extension '{other}'"),
        }),
    }
}

fn save_integer(img: &Image, path: &Path, depth: BitDepth) -> Result<()> {
    let (w, h) = (img.width as u32, img.height as u32);
    let n = img.width * img.height;
    let encode_err = |e: image::ImageError| Error::Encode {
        path: path.to_path_buf(),
        reason: e.to_string(),
    };
    match (img.channels, depth) {
        (1, BitDepth::Eight) => {
            let raw: Vec<u8> = (0..n).map(|i| quantize(img.data[i], 255.0) as u8).collect();
            image::GrayImage::from_raw(w, h, raw)
                .expect("sized buffer")
                .save(path)
                .map_err(encode_err)
        }
        (1, BitDepth::Sixteen) => {
            let raw: Vec<u16> = (0..n)
                .map(|i| quantize(img.data[i], 65535.0) as u16)
                .collect();
            ImageBuffer::<image::Luma<u16>, _>::from_raw(w, h, raw)
                .expect("sized buffer")
                .save(path)
                .map_err(encode_err)
        }
        (3, BitDepth::Eight) => {
            let mut raw = Vec::with_capacity(n * 3);
            for i in 0..n {
                for c in 0..3 {
                    raw.push(quantize(img.data[c * n + i], 255.0) as u8);
                }
            }
            image::RgbImage::from_raw(w, h, raw)
                .expect("sized buffer")
                .save(path)
                .map_err(encode_err)
        }
        (3, BitDepth::Sixteen) => {
            let mut raw = Vec::with_capacity(n * 3);
            for i in 0..n {
                for c in 0..3 {
                    raw.push(quantize(img.data[c * n + i], 65535.0) as u16);
                }
            }
            ImageBuffer::<image::Rgb<u16>, _>::from_raw(w, h, raw)
                .expect("sized buffer")
                .save(path)
                .map_err(encode_err)
        }
        (ch, _) => Err(Error::Encode {
            path: path.to_path_buf(),
            reason: format!("{ch}-channel images cannot be written to this format"),
        }),
    }
}

/// Reads a PFM file (PF = rgb, Pf = gray). The scale line's sign encodes
/// endianness; rows are stored bottom-up.
pub fn load_pfm(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    fs::File::open(path)
        .map_err(|e| io_err(path, e))?
        .read_to_end(&mut bytes)
        .map_err(|e| io_err(path, e))?;
    let bad = |reason: &str| Error::Decode {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };

    let mut pos = 0usize;
    let mut token = || -> Result<String> {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        let tok = String::from_utf8_lossy(&bytes[start..pos]).into_owned();
        pos += 1; // single whitespace after each token
        Ok(tok)
    };

    let magic = token()?;
    let channels = match magic.as_str() {
        "PF" => 3,
        "Pf" => 1,
        _ => return Err(bad("not a PFM file")),
    };
    let width: usize = token()?.parse().map_err(|_| bad("bad width"))?;
    let height: usize = token()?.parse().map_err(|_| bad("bad height"))?;
    let scale: f64 = token()?.parse().map_err(|_| bad("bad scale"))?;
    if width == 0 || height == 0 {
        return Err(bad("zero-dimension image"));
    }
    let little_endian = scale < 0.0;
    let n = width * height * channels;
    if bytes.len() < pos + n * 4 {
        return Err(bad("truncated sample data"));
    }
    let mut data = vec![0.0f64; n];
    for i in 0..n {
        let b: [u8; 4] = bytes[pos + i * 4..pos + i * 4 + 4].try_into().unwrap();
        let v = if little_endian {
            f32::from_le_bytes(b)
        } else {
            f32::from_be_bytes(b)
        };
        // samples are interleaved per pixel, bottom row first
        let pixel = i / channels;
        let c = i % channels;
        let x = pixel % width;
        let y = height - 1 - pixel / width;
        data[c * width * height + y * width + x] = v as f64;
    }
    Image::from_data(width, height, channels, data)
}

/// Writes a PFM file, little-endian, bottom row first.
pub fn save_pfm(img: &Image, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let magic = match img.channels {
        1 => "Pf",
        3 => "PF",
        ch => {
            return Err(Error::Encode {
                path: path.to_path_buf(),
                reason: format!("PFM supports 1 or 3 channels, got {ch}"),
            })
        }
    };
    let mut out = Vec::with_capacity(32 + img.data.len() * 4);
    out.extend_from_slice(format!("{magic}\n{} {}\n-1.0\n", img.width, img.height).as_bytes());
    for y in (0..img.height).rev() {
        for x in 0..img.width {
            for c in 0..img.channels {
                out.extend_from_slice(&(img.at(x, y, c) as f32).to_le_bytes());
            }
        }
    }
    fs::write(path, out).map_err(|e| io_err(path, e))
}
