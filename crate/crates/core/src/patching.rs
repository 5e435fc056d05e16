//! Sliding-window patch extraction.
//!
//! Along each axis, window origins are `0, stride, 2*stride, ...` while the
//! window fits. If the last regular window stops short of the border, one
//! border-aligned origin `dim - window` is appended so every pixel is
//! covered. An axis shorter than the window yields a single origin and the
//! window is zero-padded.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::embeddings::PatchId;
use crate::error::{Error, Result};
use crate::listing::{LedgerEntry, PatchLedger};
use crate::raster::{self, LabelMask, Raster};

pub const DEFAULT_WINDOW: usize = 224;
pub const DEFAULT_STRIDE: usize = 112;

/// An image with its instance mask.
#[derive(Debug, Clone)]
pub struct LabeledImage {
    pub name: String,
    pub image: Raster,
    pub mask: LabelMask,
}

impl LabeledImage {
    pub fn new(name: impl Into<String>, image: Raster, mask: LabelMask) -> Result<Self> {
        let name = name.into();
        if (image.height, image.width) != mask.shape() {
            return Err(Error::InvalidArgument(format!(
                "image `{name}` is {}x{} but its mask is {}x{}",
                image.height, image.width, mask.height, mask.width
            )));
        }
        Ok(LabeledImage { name, image, mask })
    }
}

#[derive(Debug, Clone)]
pub struct Patch {
    pub id: PatchId,
    pub image: Raster,
    pub mask: LabelMask,
}

#[derive(Debug, Clone)]
pub struct PatchSet {
    pub window: usize,
    pub stride: usize,
    pub patches: Vec<Patch>,
}

fn check_geometry(window: usize, stride: usize) -> Result<()> {
    if window == 0 || stride == 0 {
        return Err(Error::InvalidArgument(
            "window and stride must be positive".into(),
        ));
    }
    if stride > window {
        return Err(Error::InvalidArgument(format!(
            "stride {stride} exceeds window {window}; pixels would be skipped"
        )));
    }
    Ok(())
}

/// Number of windows along an axis of length `dim`.
pub fn windows_along(dim: usize, window: usize, stride: usize) -> usize {
    if dim <= window {
        1
    } else {
        (dim - window).div_ceil(stride) + 1
    }
}

/// Window origins along one axis.
pub fn axis_origins(dim: usize, window: usize, stride: usize) -> Vec<usize> {
    if dim <= window {
        return vec![0];
    }
    let mut origins: Vec<usize> = (0..)
        .map(|k| k * stride)
        .take_while(|&o| o + window <= dim)
        .collect();
    let last = *origins.last().expect("origin 0 always fits");
    if last + window < dim {
        origins.push(dim - window);
    }
    origins
}

/// Total patch count for a list of `(height, width)` image sizes.
pub fn count_patches(dims: &[(usize, usize)], window: usize, stride: usize) -> Result<usize> {
    check_geometry(window, stride)?;
    dims.iter()
        .map(|&(h, w)| {
            if h == 0 || w == 0 {
                Err(Error::InvalidArgument(format!("image size {h}x{w} is empty")))
            } else {
                Ok(windows_along(h, window, stride) * windows_along(w, window, stride))
            }
        })
        .sum()
}

/// Cut `img` into `window x window` patches in row-major origin order.
/// Mask labels are copied unchanged.
pub fn extract_patches(img: &LabeledImage, window: usize, stride: usize) -> Result<PatchSet> {
    check_geometry(window, stride)?;
    let rows = axis_origins(img.image.height, window, stride);
    let cols = axis_origins(img.image.width, window, stride);
    let patches = rows
        .iter()
        .flat_map(|&r| cols.iter().map(move |&c| (r, c)))
        .map(|(r, c)| Patch {
            id: PatchId::new(img.name.clone(), r, c),
            image: img.image.window(r, c, window),
            mask: img.mask.window(r, c, window),
        })
        .collect();
    Ok(PatchSet {
        window,
        stride,
        patches,
    })
}

#[derive(Debug, Clone)]
pub struct PatchOptions {
    pub window: usize,
    pub stride: usize,
    /// Reduce multi-channel images to their channel mean before writing.
    pub grayscale: bool,
}

impl Default for PatchOptions {
    fn default() -> Self {
        PatchOptions {
            window: DEFAULT_WINDOW,
            stride: DEFAULT_STRIDE,
            grayscale: false,
        }
    }
}

/// Find the mask for an image stem: same stem, or the stem with a `_masks`
/// / `_mask` suffix.
pub(crate) fn find_mask(masks: &[PathBuf], stem: &str) -> Option<PathBuf> {
    for candidate in [stem.to_string(), format!("{stem}_masks"), format!("{stem}_mask")] {
        if let Some(p) = masks.iter().find(|p| raster::file_stem(p) == candidate) {
            return Some(p.clone());
        }
    }
    None
}

/// Patch every image in `images_dir` against its mask in `masks_dir`,
/// writing `images/<id>.png`, `masks/<id>.png` (or `.tif`) and
/// `patches.json` under `out_dir`.
pub fn patch_directory(
    images_dir: &Path,
    masks_dir: &Path,
    out_dir: &Path,
    opts: &PatchOptions,
) -> Result<PatchLedger> {
    check_geometry(opts.window, opts.stride)?;
    let images = raster::list_rasters(images_dir)?;
    if images.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "no PNG/TIFF images in {}",
            images_dir.display()
        )));
    }
    let masks = raster::list_rasters(masks_dir)?;
    let img_out = out_dir.join("images");
    let mask_out = out_dir.join("masks");
    for dir in [&img_out, &mask_out] {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }

    let per_image: Vec<Vec<LedgerEntry>> = images
        .par_iter()
        .map(|path| {
            let name = raster::file_stem(path);
            let mask_path = find_mask(&masks, &name).ok_or_else(|| {
                Error::InvalidArgument(format!("no mask for image `{name}` in {}", masks_dir.display()))
            })?;
            let mut image = raster::read_raster(path)?;
            if opts.grayscale {
                image = image.grayscale();
            }
            let mask = raster::read_mask(&mask_path)?;
            let labeled = LabeledImage::new(name.clone(), image, mask)?;
            let set = extract_patches(&labeled, opts.window, opts.stride)?;
            set.patches
                .iter()
                .map(|p| {
                    let id = p.id.to_string();
                    let image_file = img_out.join(format!("{id}.png"));
                    raster::write_raster_png(&p.image, &image_file)?;
                    let mask_file = raster::write_mask(&p.mask, mask_out.join(&id))?;
                    Ok(LedgerEntry {
                        id,
                        image: name.clone(),
                        row: p.id.row,
                        col: p.id.col,
                        image_file: relative_name(&image_file, out_dir),
                        mask_file: relative_name(&mask_file, out_dir),
                    })
                })
                .collect()
        })
        .collect::<Result<_>>()?;

    let ledger = PatchLedger {
        window: opts.window,
        stride: opts.stride,
        patches: per_image.into_iter().flatten().collect(),
    };
    ledger.check_unique()?;
    ledger.write(out_dir.join("patches.json"))?;
    Ok(ledger)
}

fn relative_name(path: &Path, base: &Path) -> String {
    path.strip_prefix(base)
        .unwrap_or(path)
        .to_string_lossy()
        .into_owned()
}
