//! PNG encode/decode helpers shared by the container reader and dataset writer.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use image::RgbImage;

use crate::error::{Error, Result};

pub(crate) fn read_rgb(path: &Path) -> Result<RgbImage> {
    let img = image::open(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::codec(path, other),
    })?;
    Ok(img.to_rgb8())
}

fn encoder<'a, W: Write>(w: W, width: u32, height: u32, color: png::ColorType) -> png::Encoder<'a, W> {
    let mut enc = png::Encoder::new(w, width, height);
    enc.set_color(color);
    enc.set_depth(png::BitDepth::Eight);
    enc.set_compression(png::Compression::Fast);
    enc
}

fn finish<W: Write>(path: &Path, enc: png::Encoder<'_, W>, data: &[u8]) -> Result<()> {
    let mut writer = enc.write_header().map_err(|e| Error::codec(path, e))?;
    writer.write_image_data(data).map_err(|e| Error::codec(path, e))?;
    writer.finish().map_err(|e| Error::codec(path, e))
}

pub(crate) fn encode_rgb<W: Write>(path: &Path, w: W, img: &RgbImage) -> Result<()> {
    let enc = encoder(w, img.width(), img.height(), png::ColorType::Rgb);
    finish(path, enc, img.as_raw())
}

pub(crate) fn encode_gray<W: Write>(path: &Path, w: W, width: u32, height: u32, data: &[u8]) -> Result<()> {
    let enc = encoder(w, width, height, png::ColorType::Grayscale);
    finish(path, enc, data)
}

pub(crate) fn encode_indexed<W: Write>(
    path: &Path,
    w: W,
    width: u32,
    height: u32,
    palette: &[u8],
    data: &[u8],
) -> Result<()> {
    let mut enc = encoder(w, width, height, png::ColorType::Indexed);
    enc.set_palette(palette.to_vec());
    finish(path, enc, data)
}

pub(crate) fn write_rgb(path: &Path, img: &RgbImage) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    encode_rgb(path, BufWriter::new(file), img)
}

/// Raw 8-bit samples of a PNG with no palette expansion, plus its dimensions.
pub struct DecodedPng {
    pub width: u32,
    pub height: u32,
    pub color: png::ColorType,
    pub palette: Option<Vec<u8>>,
    pub data: Vec<u8>,
}

/// Decodes a PNG keeping indexed pixels as indices.
pub fn read_png_raw(path: &Path) -> Result<DecodedPng> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut decoder = png::Decoder::new(std::io::BufReader::new(file));
    decoder.set_transformations(png::Transformations::IDENTITY);
    let mut reader = decoder.read_info().map_err(|e| Error::codec(path, e))?;
    let mut buf = vec![0; reader.output_buffer_size().ok_or_else(|| Error::codec(path, "image too large"))?];
    let frame = reader.next_frame(&mut buf).map_err(|e| Error::codec(path, e))?;
    if frame.bit_depth != png::BitDepth::Eight {
        return Err(Error::codec(path, "only 8-bit PNGs are supported"));
    }
    buf.truncate(frame.buffer_size());
    let palette = reader.info().palette.as_ref().map(|p| p.to_vec());
    Ok(DecodedPng {
        width: frame.width,
        height: frame.height,
        color: frame.color_type,
        palette,
        data: buf,
    })
}
