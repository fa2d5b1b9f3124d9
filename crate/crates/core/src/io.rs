//! PNG import/export and the `AVGI` float raster format.
//!
//! `AVGI` layout (all little-endian):
//!
//! ```text
//! b"AVGI" | u32 height | u32 width | u32 channels | f32 x (height*width*channels)
//! ```
//!
//! Pixels are row-major with interleaved channels. Values are stored as
//! `f32`, so a round trip is bit-exact for any image whose values are
//! representable in single precision.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::image::Image;

pub const AVGI_MAGIC: &[u8; 4] = b"AVGI";

pub fn load_image(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let decode_err = |reason: String| Error::Decode {
        path: path.to_path_buf(),
        reason,
    };
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(png::Transformations::IDENTITY);
    let mut reader = decoder.read_info().map_err(|e| decode_err(e.to_string()))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| decode_err("image too large".into()))?;
    let mut buf = vec![0u8; size];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| decode_err(e.to_string()))?;
    let channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::Rgb => 3,
        other => return Err(decode_err(format!("unsupported color type {other:?}"))),
    };
    let (h, w) = (info.height as usize, info.width as usize);
    let n = h * w * channels;
    let mut data = Vec::with_capacity(n);
    match info.bit_depth {
        png::BitDepth::Eight => {
            for row in buf.chunks(info.line_size).take(h) {
                data.extend(row[..w * channels].iter().map(|&b| b as f64));
            }
        }
        png::BitDepth::Sixteen => {
            let scale = 255.0 / 65535.0;
            for row in buf.chunks(info.line_size).take(h) {
                data.extend(
                    row[..w * channels * 2]
                        .chunks_exact(2)
                        .map(|b| u16::from_be_bytes([b[0], b[1]]) as f64 * scale),
                );
            }
        }
        other => return Err(decode_err(format!("unsupported bit depth {other:?}"))),
    }
    Image::new(h, w, channels, data)
}

/// Writes an 8-bit PNG preview. Values are rounded and clipped to `[0, 255]`;
/// a warning is logged when clipping occurs.
pub fn save_png(image: &Image, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let color = match image.channels() {
        1 => png::ColorType::Grayscale,
        3 => png::ColorType::Rgb,
        c => {
            return Err(Error::InvalidArgument(format!(
                "PNG export needs 1 or 3 channels, got {c}"
            )))
        }
    };
    let mut clipped = 0usize;
    let bytes: Vec<u8> = image
        .data()
        .iter()
        .map(|&v| {
            if !(0.0..=255.0).contains(&v) {
                clipped += 1;
            }
            v.round().clamp(0.0, 255.0) as u8
        })
        .collect();
    if clipped > 0 {
        log::warn!(
            "{}: {clipped} values outside [0, 255] clipped on 8-bit export",
            path.display()
        );
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut encoder = png::Encoder::new(
        BufWriter::new(file),
        image.width() as u32,
        image.height() as u32,
    );
    encoder.set_color(color);
    encoder.set_depth(png::BitDepth::Eight);
    let png_err = |e: png::EncodingError| Error::Format(format!("{}: {e}", path.display()));
    let mut writer = encoder.write_header().map_err(png_err)?;
    writer.write_image_data(&bytes).map_err(png_err)?;
    writer.finish().map_err(png_err)?;
    Ok(())
}

pub fn write_float_raster(image: &Image, mut out: impl Write) -> std::io::Result<()> {
    out.write_all(AVGI_MAGIC)?;
    for dim in [image.height(), image.width(), image.channels()] {
        out.write_all(&(dim as u32).to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(image.len() * 4);
    for &v in image.data() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out.write_all(&buf)?;
    out.flush()
}

pub fn read_float_raster(mut input: impl Read) -> Result<Image> {
    let mut header = [0u8; 16];
    input
        .read_exact(&mut header)
        .map_err(|_| Error::Format("truncated AVGI header".into()))?;
    if &header[..4] != AVGI_MAGIC {
        return Err(Error::Format("bad magic, expected AVGI".into()));
    }
    let dim =
        |i: usize| u32::from_le_bytes(header[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
    let (h, w, c) = (dim(0), dim(1), dim(2));
    let n = h
        .checked_mul(w)
        .and_then(|v| v.checked_mul(c))
        .ok_or_else(|| Error::Format("AVGI dimensions overflow".into()))?;
    let mut payload = Vec::new();
    input
        .read_to_end(&mut payload)
        .map_err(|e| Error::Format(format!("reading AVGI payload: {e}")))?;
    if payload.len() != n * 4 {
        return Err(Error::Format(format!(
            "AVGI payload holds {} bytes, expected {}",
            payload.len(),
            n * 4
        )));
    }
    let data = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect();
    Image::new(h, w, c, data).map_err(|e| Error::Format(e.to_string()))
}

pub fn save_float_raster(image: &Image, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_float_raster(image, BufWriter::new(file)).map_err(|e| Error::io(path, e))
}

pub fn load_float_raster(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_float_raster(BufReader::new(file))
}

/// Loads either an `AVGI` raster or a PNG, chosen by the file's magic bytes.
pub fn load_any(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let mut magic = [0u8; 4];
    let mut file = File::open(path).map_err(|e| Error::io(path, e))?;
    let n = file.read(&mut magic).map_err(|e| Error::io(path, e))?;
    if n == 4 && &magic == AVGI_MAGIC {
        load_float_raster(path)
    } else {
        load_image(path)
    }
}
