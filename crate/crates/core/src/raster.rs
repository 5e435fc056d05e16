//! In-memory rasters and label masks, with PNG/TIFF reading and writing.

use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use image::{DynamicImage, ImageBuffer, ImageReader, Luma, LumaA, Rgb, Rgba};

use crate::error::{Error, Result};

/// File extensions accepted when scanning directories.
pub const RASTER_EXTENSIONS: &[&str] = &["png", "tif", "tiff"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BitDepth {
    Eight,
    Sixteen,
}

/// Interleaved `height x width x channels` intensity image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Raster {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub depth: BitDepth,
    pub samples: Vec<u16>,
}

impl Raster {
    pub fn new(
        height: usize,
        width: usize,
        channels: usize,
        depth: BitDepth,
        samples: Vec<u16>,
    ) -> Result<Self> {
        if height == 0 || width == 0 || !(1..=4).contains(&channels) {
            return Err(Error::InvalidArgument(format!(
                "raster must be non-empty with 1-4 channels, got {height}x{width}x{channels}"
            )));
        }
        if samples.len() != height * width * channels {
            return Err(Error::InvalidArgument(format!(
                "raster {height}x{width}x{channels} needs {} samples, got {}",
                height * width * channels,
                samples.len()
            )));
        }
        Ok(Raster {
            height,
            width,
            channels,
            depth,
            samples,
        })
    }

    pub fn zeros(height: usize, width: usize, channels: usize, depth: BitDepth) -> Self {
        Raster {
            height,
            width,
            channels,
            depth,
            samples: vec![0; height * width * channels],
        }
    }

    pub fn pixel(&self, row: usize, col: usize) -> &[u16] {
        let start = (row * self.width + col) * self.channels;
        &self.samples[start..start + self.channels]
    }

    /// Channel-mean reduction to a single channel. Alpha (the last channel of
    /// 2- and 4-channel images) is dropped, not averaged.
    pub fn grayscale(&self) -> Raster {
        let colour = match self.channels {
            2 => 1,
            4 => 3,
            c => c,
        };
        let samples = self
            .samples
            .chunks_exact(self.channels)
            .map(|px| {
                let sum: u32 = px[..colour].iter().map(|&v| u32::from(v)).sum();
                ((sum + colour as u32 / 2) / colour as u32) as u16
            })
            .collect();
        Raster {
            height: self.height,
            width: self.width,
            channels: 1,
            depth: self.depth,
            samples,
        }
    }

    /// Copy a `size x size` window with top-left corner `(row, col)`;
    /// pixels past the border are zero.
    pub fn window(&self, row: usize, col: usize, size: usize) -> Raster {
        let mut out = Raster::zeros(size, size, self.channels, self.depth);
        let rows = size.min(self.height.saturating_sub(row));
        let cols = size.min(self.width.saturating_sub(col));
        let c = self.channels;
        for r in 0..rows {
            let src = ((row + r) * self.width + col) * c;
            let dst = r * size * c;
            out.samples[dst..dst + cols * c].copy_from_slice(&self.samples[src..src + cols * c]);
        }
        out
    }
}

/// Integer instance labels, 0 = background.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMask {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<u32>,
}

impl LabelMask {
    pub fn new(height: usize, width: usize, labels: Vec<u32>) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::InvalidArgument(format!(
                "mask {height}x{width} needs {} labels, got {}",
                height * width,
                labels.len()
            )));
        }
        Ok(LabelMask {
            height,
            width,
            labels,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        LabelMask {
            height,
            width,
            labels: vec![0; height * width],
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn get(&self, row: usize, col: usize) -> u32 {
        self.labels[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, label: u32) {
        self.labels[row * self.width + col] = label;
    }

    pub fn window(&self, row: usize, col: usize, size: usize) -> LabelMask {
        let mut out = LabelMask::zeros(size, size);
        let rows = size.min(self.height.saturating_sub(row));
        let cols = size.min(self.width.saturating_sub(col));
        for r in 0..rows {
            let src = (row + r) * self.width + col;
            out.labels[r * size..r * size + cols].copy_from_slice(&self.labels[src..src + cols]);
        }
        out
    }

    pub fn transpose(&self) -> LabelMask {
        let mut out = LabelMask::zeros(self.width, self.height);
        for r in 0..self.height {
            for c in 0..self.width {
                out.set(c, r, self.get(r, c));
            }
        }
        out
    }

    pub fn max_label(&self) -> u32 {
        self.labels.iter().copied().max().unwrap_or(0)
    }
}

fn image_err(path: &Path, message: impl ToString) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        message: message.to_string(),
    }
}

fn is_tiff(path: &Path) -> bool {
    matches!(
        path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
        Some("tif" | "tiff")
    )
}

fn decode_dynamic(path: &Path) -> Result<DynamicImage> {
    ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|e| image_err(path, e))
}

/// Read an 8/16-bit PNG or TIFF with 1-4 channels.
pub fn read_raster(path: impl AsRef<Path>) -> Result<Raster> {
    let path = path.as_ref();
    let img = decode_dynamic(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let widen = |v: Vec<u8>| v.into_iter().map(u16::from).collect::<Vec<_>>();
    let (channels, depth, samples) = match img {
        DynamicImage::ImageLuma8(b) => (1, BitDepth::Eight, widen(b.into_raw())),
        DynamicImage::ImageLumaA8(b) => (2, BitDepth::Eight, widen(b.into_raw())),
        DynamicImage::ImageRgb8(b) => (3, BitDepth::Eight, widen(b.into_raw())),
        DynamicImage::ImageRgba8(b) => (4, BitDepth::Eight, widen(b.into_raw())),
        DynamicImage::ImageLuma16(b) => (1, BitDepth::Sixteen, b.into_raw()),
        DynamicImage::ImageLumaA16(b) => (2, BitDepth::Sixteen, b.into_raw()),
        DynamicImage::ImageRgb16(b) => (3, BitDepth::Sixteen, b.into_raw()),
        DynamicImage::ImageRgba16(b) => (4, BitDepth::Sixteen, b.into_raw()),
        other => {
            return Err(image_err(
                path,
                format!("unsupported pixel type {:?}", other.color()),
            ))
        }
    };
    Raster::new(h, w, channels, depth, samples)
}

/// Read a single-channel integer label mask (PNG 8/16-bit, TIFF 8/16/32-bit).
pub fn read_mask(path: impl AsRef<Path>) -> Result<LabelMask> {
    let path = path.as_ref();
    if is_tiff(path) {
        return read_tiff_mask(path);
    }
    let img = decode_dynamic(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let labels = match img {
        DynamicImage::ImageLuma8(b) => b.into_raw().into_iter().map(u32::from).collect(),
        DynamicImage::ImageLuma16(b) => b.into_raw().into_iter().map(u32::from).collect(),
        other => {
            return Err(image_err(
                path,
                format!("label masks must be single-channel, found {:?}", other.color()),
            ))
        }
    };
    LabelMask::new(h, w, labels)
}

fn read_tiff_mask(path: &Path) -> Result<LabelMask> {
    use tiff::decoder::{Decoder, DecodingResult};
    use tiff::ColorType;

    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut dec = Decoder::new(BufReader::new(file)).map_err(|e| image_err(path, e))?;
    let (w, h) = dec.dimensions().map_err(|e| image_err(path, e))?;
    match dec.colortype().map_err(|e| image_err(path, e))? {
        ColorType::Gray(_) => {}
        other => {
            return Err(image_err(
                path,
                format!("label masks must be single-channel, found {other:?}"),
            ))
        }
    }
    let labels: Vec<u32> = match dec.read_image().map_err(|e| image_err(path, e))? {
        DecodingResult::U8(v) => v.into_iter().map(u32::from).collect(),
        DecodingResult::U16(v) => v.into_iter().map(u32::from).collect(),
        DecodingResult::U32(v) => v,
        DecodingResult::I32(v) if v.iter().all(|&x| x >= 0) => {
            v.into_iter().map(|x| x as u32).collect()
        }
        DecodingResult::I16(v) if v.iter().all(|&x| x >= 0) => {
            v.into_iter().map(|x| x as u32).collect()
        }
        _ => return Err(image_err(path, "unsupported or negative label sample type")),
    };
    LabelMask::new(h as usize, w as usize, labels)
}

fn save_buffer<P, C>(buf: ImageBuffer<P, C>, path: &Path) -> Result<()>
where
    P: image::PixelWithColorType,
    [P::Subpixel]: image::EncodableLayout,
    C: std::ops::Deref<Target = [P::Subpixel]>,
{
    buf.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| image_err(path, e))
}

/// Write a raster as PNG at its native depth and channel count.
pub fn write_raster_png(r: &Raster, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let (w, h) = (r.width as u32, r.height as u32);
    let narrow = || r.samples.iter().map(|&v| v as u8).collect::<Vec<u8>>();
    let wide = || r.samples.clone();
    let shape_err = || image_err(path, "sample buffer does not match dimensions");
    match (r.channels, r.depth) {
        (1, BitDepth::Eight) => save_buffer(
            ImageBuffer::<Luma<u8>, _>::from_raw(w, h, narrow()).ok_or_else(shape_err)?,
            path,
        ),
        (2, BitDepth::Eight) => save_buffer(
            ImageBuffer::<LumaA<u8>, _>::from_raw(w, h, narrow()).ok_or_else(shape_err)?,
            path,
        ),
        (3, BitDepth::Eight) => save_buffer(
            ImageBuffer::<Rgb<u8>, _>::from_raw(w, h, narrow()).ok_or_else(shape_err)?,
            path,
        ),
        (4, BitDepth::Eight) => save_buffer(
            ImageBuffer::<Rgba<u8>, _>::from_raw(w, h, narrow()).ok_or_else(shape_err)?,
            path,
        ),
        (1, BitDepth::Sixteen) => save_buffer(
            ImageBuffer::<Luma<u16>, _>::from_raw(w, h, wide()).ok_or_else(shape_err)?,
            path,
        ),
        (2, BitDepth::Sixteen) => save_buffer(
            ImageBuffer::<LumaA<u16>, _>::from_raw(w, h, wide()).ok_or_else(shape_err)?,
            path,
        ),
        (3, BitDepth::Sixteen) => save_buffer(
            ImageBuffer::<Rgb<u16>, _>::from_raw(w, h, wide()).ok_or_else(shape_err)?,
            path,
        ),
        (4, BitDepth::Sixteen) => save_buffer(
            ImageBuffer::<Rgba<u16>, _>::from_raw(w, h, wide()).ok_or_else(shape_err)?,
            path,
        ),
        (c, _) => Err(image_err(path, format!("cannot write {c}-channel raster"))),
    }
}

/// Write a mask next to `stem` (a path without extension): 16-bit PNG when
/// every label fits, otherwise 32-bit TIFF. Labels are written unchanged.
/// Returns the path written.
pub fn write_mask(mask: &LabelMask, stem: impl AsRef<Path>) -> Result<PathBuf> {
    let stem = stem.as_ref();
    let (w, h) = (mask.width as u32, mask.height as u32);
    if mask.max_label() <= u32::from(u16::MAX) {
        let path = with_extension(stem, "png");
        let data: Vec<u16> = mask.labels.iter().map(|&l| l as u16).collect();
        let buf = ImageBuffer::<Luma<u16>, _>::from_raw(w, h, data)
            .ok_or_else(|| image_err(&path, "label buffer does not match dimensions"))?;
        save_buffer(buf, &path)?;
        Ok(path)
    } else {
        let path = with_extension(stem, "tif");
        let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut enc = tiff::encoder::TiffEncoder::new(std::io::BufWriter::new(file))
            .map_err(|e| image_err(&path, e))?;
        enc.write_image::<tiff::encoder::colortype::Gray32>(w, h, &mask.labels)
            .map_err(|e| image_err(&path, e))?;
        Ok(path)
    }
}

// Appends instead of replacing: image names inside patch ids may contain dots.
fn with_extension(stem: &Path, ext: &str) -> PathBuf {
    let mut s = stem.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

/// Supported raster files in `dir`, sorted by file name.
pub fn list_rasters(dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && has_raster_extension(p))
        .collect();
    files.sort();
    Ok(files)
}

pub fn has_raster_extension(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| RASTER_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        .unwrap_or(false)
}

/// Image name a mask file belongs to: its stem without a trailing
/// `_masks` or `_mask`.
pub fn mask_image_name(path: &Path) -> String {
    let stem = file_stem(path);
    for suffix in ["_masks", "_mask"] {
        if let Some(name) = stem.strip_suffix(suffix).filter(|n| !n.is_empty()) {
            return name.to_string();
        }
    }
    stem
}

/// File name without its final extension.
pub fn file_stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mask_png_round_trip_keeps_labels() {
        let dir = tempfile::tempdir().unwrap();
        let mask = LabelMask::new(2, 3, vec![0, 7, 7, 65535, 0, 2]).unwrap();
        let path = write_mask(&mask, dir.path().join("m")).unwrap();
        assert!(path.ends_with("m.png"));
        assert_eq!(read_mask(&path).unwrap(), mask);
    }

    #[test]
    fn large_labels_go_to_tiff() {
        let dir = tempfile::tempdir().unwrap();
        let mask = LabelMask::new(1, 2, vec![70_000, 1]).unwrap();
        let path = write_mask(&mask, dir.path().join("img:0:112")).unwrap();
        assert!(path.to_string_lossy().ends_with("img:0:112.tif"));
        assert_eq!(read_mask(&path).unwrap(), mask);
    }

    #[test]
    fn raster_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        for (channels, depth, max) in [
            (1, BitDepth::Eight, 255u16),
            (3, BitDepth::Eight, 255),
            (1, BitDepth::Sixteen, 65535),
            (4, BitDepth::Sixteen, 65535),
        ] {
            let samples = (0..4 * 5 * channels).map(|i| (i as u16 * 37) % max).collect();
            let r = Raster::new(4, 5, channels, depth, samples).unwrap();
            let path = dir.path().join(format!("r{channels}.png"));
            write_raster_png(&r, &path).unwrap();
            assert_eq!(read_raster(&path).unwrap(), r);
        }
    }

    #[test]
    fn rgb_mask_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let r = Raster::new(2, 2, 3, BitDepth::Eight, vec![1; 12]).unwrap();
        let path = dir.path().join("rgb.png");
        write_raster_png(&r, &path).unwrap();
        assert!(read_mask(&path).is_err());
    }

    #[test]
    fn grayscale_is_channel_mean() {
        let r = Raster::new(1, 2, 3, BitDepth::Eight, vec![10, 20, 30, 0, 0, 1]).unwrap();
        let g = r.grayscale();
        assert_eq!(g.channels, 1);
        assert_eq!(g.samples, vec![20, 0]);
        let rgba = Raster::new(1, 1, 4, BitDepth::Eight, vec![3, 6, 9, 255]).unwrap();
        assert_eq!(rgba.grayscale().samples, vec![6]);
    }

    #[test]
    fn window_zero_pads() {
        let m = LabelMask::new(2, 2, vec![1, 2, 3, 4]).unwrap();
        let w = m.window(1, 0, 3);
        assert_eq!(w.labels, vec![3, 4, 0, 0, 0, 0, 0, 0, 0]);
    }
}
