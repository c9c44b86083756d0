//! Row-major single-channel images and their PNG encodings.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Image<T> {
    height: usize,
    width: usize,
    data: Vec<T>,
}

/// Depth in metres (or normalized units, depending on context).
pub type DepthImage = Image<f32>;
/// Per-pixel class ids.
pub type LabelMap = Image<u8>;

impl<T: Copy> Image<T> {
    pub fn new(height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != height * width {
            return Err(CoreError::invalid(format!(
                "{} values cannot form a {height}x{width} image",
                data.len()
            )));
        }
        Ok(Image { height, width, data })
    }

    pub fn filled(height: usize, width: usize, v: T) -> Self {
        Image {
            height,
            width,
            data: vec![v; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn get(&self, y: usize, x: usize) -> T {
        self.data[y * self.width + x]
    }

    pub fn map<U: Copy>(&self, f: impl Fn(T) -> U) -> Image<U> {
        Image {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Nearest-neighbour resampling with pixel centres aligned; values are
    /// copied, never blended.
    pub fn resize_nearest(&self, out_h: usize, out_w: usize) -> Result<Self> {
        if out_h == 0 || out_w == 0 {
            return Err(CoreError::invalid("resize target must be positive"));
        }
        let src_index = |o: usize, n_out: usize, n_in: usize| -> usize {
            let s = ((o as f64 + 0.5) * n_in as f64 / n_out as f64).floor() as usize;
            s.min(n_in - 1)
        };
        let xs: Vec<usize> = (0..out_w).map(|x| src_index(x, out_w, self.width)).collect();
        let mut data = Vec::with_capacity(out_h * out_w);
        for y in 0..out_h {
            let row = src_index(y, out_h, self.height) * self.width;
            data.extend(xs.iter().map(|&x| self.data[row + x]));
        }
        Image::new(out_h, out_w, data)
    }
}

fn png_err(path: &Path, e: impl std::fmt::Display) -> CoreError {
    CoreError::Format {
        path: path.display().to_string(),
        detail: e.to_string(),
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).map_err(|e| CoreError::io(path, e))?))
}

fn open(path: &Path) -> Result<BufReader<File>> {
    match File::open(path) {
        Ok(f) => Ok(BufReader::new(f)),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Err(CoreError::MissingFile(path.to_path_buf())),
        Err(e) => Err(CoreError::io(path, e)),
    }
}

/// Writes values in [0, 1] as 16-bit grayscale (clamped, rounded).
pub fn write_depth_png(path: &Path, img: &Image<f32>) -> Result<()> {
    let mut enc = png::Encoder::new(create(path)?, img.width as u32, img.height as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Sixteen);
    let mut w = enc.write_header().map_err(|e| png_err(path, e))?;
    let bytes: Vec<u8> = img
        .data
        .iter()
        .flat_map(|&v| {
            let q = (v.clamp(0.0, 1.0) as f64 * 65535.0).round() as u16;
            q.to_be_bytes()
        })
        .collect();
    w.write_image_data(&bytes).map_err(|e| png_err(path, e))?;
    w.finish().map_err(|e| png_err(path, e))
}

/// Reads 16-bit grayscale as values in [0, 1].
pub fn read_depth_png(path: &Path) -> Result<Image<f32>> {
    let mut dec = png::Decoder::new(open(path)?);
    dec.set_transformations(png::Transformations::IDENTITY);
    let mut reader = dec.read_info().map_err(|e| png_err(path, e))?;
    let mut buf = vec![0; reader.output_buffer_size().ok_or_else(|| png_err(path, "image too large"))?];
    let info = reader.next_frame(&mut buf).map_err(|e| png_err(path, e))?;
    if info.color_type != png::ColorType::Grayscale || info.bit_depth != png::BitDepth::Sixteen {
        return Err(png_err(path, "depth maps must be 16-bit grayscale"));
    }
    let data = buf[..info.buffer_size()]
        .chunks_exact(2)
        .map(|b| u16::from_be_bytes([b[0], b[1]]) as f32 / 65535.0)
        .collect();
    Image::new(info.height as usize, info.width as usize, data)
}

/// Writes class ids as an 8-bit paletted PNG. `palette` holds RGB triples.
pub fn write_label_png(path: &Path, img: &LabelMap, palette: &[[u8; 3]]) -> Result<()> {
    if palette.is_empty() || palette.len() > 256 {
        return Err(CoreError::invalid("palette must hold 1 to 256 colours"));
    }
    if let Some(&bad) = img.data.iter().find(|&&c| c as usize >= palette.len()) {
        return Err(CoreError::invalid(format!("class {bad} outside a {}-colour palette", palette.len())));
    }
    let mut enc = png::Encoder::new(create(path)?, img.width as u32, img.height as u32);
    enc.set_color(png::ColorType::Indexed);
    enc.set_depth(png::BitDepth::Eight);
    enc.set_palette(palette.iter().flatten().copied().collect::<Vec<u8>>());
    let mut w = enc.write_header().map_err(|e| png_err(path, e))?;
    w.write_image_data(&img.data).map_err(|e| png_err(path, e))?;
    w.finish().map_err(|e| png_err(path, e))
}

pub fn read_label_png(path: &Path) -> Result<LabelMap> {
    let mut dec = png::Decoder::new(open(path)?);
    dec.set_transformations(png::Transformations::IDENTITY);
    let mut reader = dec.read_info().map_err(|e| png_err(path, e))?;
    let mut buf = vec![0; reader.output_buffer_size().ok_or_else(|| png_err(path, "image too large"))?];
    let info = reader.next_frame(&mut buf).map_err(|e| png_err(path, e))?;
    let gray8 = info.color_type == png::ColorType::Grayscale;
    if !(info.color_type == png::ColorType::Indexed || gray8) || info.bit_depth != png::BitDepth::Eight {
        return Err(png_err(path, "label maps must be 8-bit indexed"));
    }
    buf.truncate(info.buffer_size());
    Image::new(info.height as usize, info.width as usize, buf)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nearest_hand_cases() {
        let img = LabelMap::new(2, 2, vec![1, 2, 3, 4]).unwrap();
        assert_eq!(img.resize_nearest(2, 2).unwrap(), img);
        let up = img.resize_nearest(4, 4).unwrap();
        assert_eq!(up.data(), &[1, 1, 2, 2, 1, 1, 2, 2, 3, 3, 4, 4, 3, 3, 4, 4]);
        let one = LabelMap::new(1, 1, vec![7]).unwrap();
        assert!(one.resize_nearest(3, 5).unwrap().data().iter().all(|&v| v == 7));
        let down = up.resize_nearest(2, 2).unwrap();
        assert_eq!(down, img);
    }

    #[test]
    fn png_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let depth = DepthImage::new(3, 4, (0..12).map(|i| i as f32 / 11.0).collect()).unwrap();
        let p = dir.path().join("d.png");
        write_depth_png(&p, &depth).unwrap();
        let back = read_depth_png(&p).unwrap();
        assert_eq!(back.dims(), (3, 4));
        for (a, b) in back.data().iter().zip(depth.data()) {
            assert!((a - b).abs() <= 0.5 / 65535.0 + 1e-7);
        }
        let labels = LabelMap::new(2, 3, vec![0, 1, 2, 2, 1, 0]).unwrap();
        let p = dir.path().join("s.png");
        write_label_png(&p, &labels, &[[0, 0, 0], [255, 0, 0], [0, 255, 0]]).unwrap();
        assert_eq!(read_label_png(&p).unwrap(), labels);
        assert!(write_label_png(&p, &labels, &[[0, 0, 0]]).is_err());
        assert!(matches!(read_depth_png(&dir.path().join("nope.png")), Err(CoreError::MissingFile(_))));
    }
}
