//! PNG label maps (16-bit grey) and images (8-bit RGB).

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use diffseg_core::{LabelMap, Tensor};
use png::{BitDepth, ColorType, Transformations};

use crate::error::{Error, Result};

fn encoder_error(path: &Path, e: png::EncodingError) -> Error {
    match e {
        png::EncodingError::IoError(io) => Error::io(path, io),
        other => Error::format(path, other.to_string()),
    }
}

fn decoder_error(path: &Path, e: png::DecodingError) -> Error {
    match e {
        png::DecodingError::IoError(io) => Error::io(path, io),
        other => Error::format(path, other.to_string()),
    }
}

fn write_png(path: &Path, width: usize, height: usize, color: ColorType, depth: BitDepth, bytes: &[u8]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    enc.set_color(color);
    enc.set_depth(depth);
    let mut writer = enc.write_header().map_err(|e| encoder_error(path, e))?;
    writer.write_image_data(bytes).map_err(|e| encoder_error(path, e))?;
    writer.finish().map_err(|e| encoder_error(path, e))
}

fn read_png(path: &Path, color: ColorType, depth: BitDepth) -> Result<(usize, usize, Vec<u8>)> {
    let file = File::open(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::Missing(path.to_path_buf())
        } else {
            Error::io(path, e)
        }
    })?;
    let mut dec = png::Decoder::new(BufReader::new(file));
    dec.set_transformations(Transformations::IDENTITY);
    let mut reader = dec.read_info().map_err(|e| decoder_error(path, e))?;
    let size = reader.output_buffer_size().ok_or_else(|| Error::format(path, "image too large"))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(|e| decoder_error(path, e))?;
    if info.color_type != color || info.bit_depth != depth {
        return Err(Error::format(
            path,
            format!("expected {color:?} at {depth:?}, found {:?} at {:?}", info.color_type, info.bit_depth),
        ));
    }
    buf.truncate(info.buffer_size());
    Ok((info.width as usize, info.height as usize, buf))
}

pub fn save_labelmap(path: &Path, map: &LabelMap) -> Result<()> {
    let mut bytes = Vec::with_capacity(2 * map.len());
    for &v in map.as_slice() {
        let v = u16::try_from(v).map_err(|_| Error::format(path, format!("label {v} exceeds 65535")))?;
        bytes.extend_from_slice(&v.to_be_bytes());
    }
    write_png(path, map.width(), map.height(), ColorType::Grayscale, BitDepth::Sixteen, &bytes)
}

pub fn load_labelmap(path: &Path) -> Result<LabelMap> {
    let (w, h, bytes) = read_png(path, ColorType::Grayscale, BitDepth::Sixteen)?;
    let data = bytes.chunks_exact(2).map(|b| u16::from_be_bytes([b[0], b[1]]) as u32).collect();
    Ok(LabelMap::new(h, w, data)?)
}

/// `[-1, 1]` to `0..=255`, rounding half up.
pub fn to_byte(v: f32) -> u8 {
    ((v as f64 + 1.0) * 127.5 + 0.5).floor().clamp(0.0, 255.0) as u8
}

pub fn from_byte(b: u8) -> f32 {
    (b as f64 / 127.5 - 1.0) as f32
}

/// Writes item 0 of a `[1, 3, H, W]` tensor.
pub fn save_image(path: &Path, image: &Tensor<f32>) -> Result<()> {
    let [_, c, h, w] = image.shape();
    if c != 3 {
        return Err(Error::format(path, format!("image has {c} channels, expected 3")));
    }
    let plane = h * w;
    let item = image.item(0);
    let mut bytes = Vec::with_capacity(3 * plane);
    for p in 0..plane {
        for ch in 0..3 {
            bytes.push(to_byte(item[ch * plane + p]));
        }
    }
    write_png(path, w, h, ColorType::Rgb, BitDepth::Eight, &bytes)
}

pub fn load_image(path: &Path) -> Result<Tensor<f32>> {
    let (w, h, bytes) = read_png(path, ColorType::Rgb, BitDepth::Eight)?;
    let plane = h * w;
    let mut data = vec![0.0; 3 * plane];
    for (p, px) in bytes.chunks_exact(3).enumerate() {
        for ch in 0..3 {
            data[ch * plane + p] = from_byte(px[ch]);
        }
    }
    Ok(Tensor::from_vec([1, 3, h, w], data)?)
}
