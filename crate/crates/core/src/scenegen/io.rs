//! 8-bit PNG persistence: RGB for images, single-channel for label maps.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use png::{BitDepth, ColorType};

use super::LabelMap;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

fn write_png(path: &Path, width: usize, height: usize, color: ColorType, data: &[u8]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    enc.set_color(color);
    enc.set_depth(BitDepth::Eight);
    let fmt = |e: png::EncodingError| match e {
        png::EncodingError::IoError(io) => Error::io(path, io),
        other => Error::format(path, other.to_string()),
    };
    let mut writer = enc.write_header().map_err(fmt)?;
    writer.write_image_data(data).map_err(fmt)?;
    writer.finish().map_err(fmt)
}

fn read_png(path: &Path, expect: ColorType) -> Result<(usize, usize, Vec<u8>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let fmt = |e: png::DecodingError| match e {
        png::DecodingError::IoError(io) => Error::io(path, io),
        other => Error::format(path, other.to_string()),
    };
    let mut reader = png::Decoder::new(BufReader::new(file)).read_info().map_err(fmt)?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::format(path, "image too large"))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(fmt)?;
    if info.color_type != expect || info.bit_depth != BitDepth::Eight {
        return Err(Error::format(
            path,
            format!("expected 8-bit {expect:?}, found {:?} {:?}", info.bit_depth, info.color_type),
        ));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let channels = if expect == ColorType::Rgb { 3 } else { 1 };
    let mut data = Vec::with_capacity(w * h * channels);
    for row in buf.chunks(info.line_size).take(h) {
        data.extend_from_slice(&row[..w * channels]);
    }
    Ok((h, w, data))
}

/// Writes a `(3, H*W)` image, quantizing `[0,1]` to 8 bits.
pub fn write_rgb_png<T: Scalar>(path: &Path, image: &Tensor<T>, height: usize, width: usize) -> Result<()> {
    if image.shape() != (3, height * width) {
        return Err(Error::shape("write_rgb_png", format!("{:?} for {height}x{width}", image.shape())));
    }
    let mut bytes = Vec::with_capacity(3 * height * width);
    for i in 0..height * width {
        for ch in 0..3 {
            let v = image.get(ch, i).f64().clamp(0.0, 1.0);
            bytes.push((v * 255.0).round() as u8);
        }
    }
    write_png(path, width, height, ColorType::Rgb, &bytes)
}

pub fn read_rgb_png<T: Scalar>(path: &Path) -> Result<(Tensor<T>, usize, usize)> {
    let (h, w, bytes) = read_png(path, ColorType::Rgb)?;
    let mut image = Tensor::zeros(3, h * w);
    for (i, px) in bytes.chunks_exact(3).enumerate() {
        for (ch, &b) in px.iter().enumerate() {
            image.set(ch, i, T::of(b as f64 / 255.0));
        }
    }
    Ok((image, h, w))
}

pub fn write_label_png(path: &Path, label: &LabelMap) -> Result<()> {
    write_png(path, label.width, label.height, ColorType::Grayscale, &label.data)
}

pub fn read_label_png(path: &Path) -> Result<LabelMap> {
    let (h, w, data) = read_png(path, ColorType::Grayscale)?;
    LabelMap::new(h, w, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip_is_exact_on_8bit_values() {
        let dir = tempfile::tempdir().unwrap();
        let (h, w) = (4, 5);
        let img = Tensor::<f64>::from_fn(3, h * w, |c, i| ((c * 31 + i * 7) % 256) as f64 / 255.0);
        let p = dir.path().join("x.png");
        write_rgb_png(&p, &img, h, w).unwrap();
        let (back, bh, bw) = read_rgb_png::<f64>(&p).unwrap();
        assert_eq!((bh, bw), (h, w));
        assert_eq!(back, img);

        let label = LabelMap::new(h, w, (0..20).map(|i| if i == 3 { 255 } else { i % 4 }).collect()).unwrap();
        let q = dir.path().join("y.png");
        write_label_png(&q, &label).unwrap();
        assert_eq!(read_label_png(&q).unwrap(), label);
        // A label file is not an RGB image.
        assert!(read_rgb_png::<f32>(&q).is_err());
    }
}
