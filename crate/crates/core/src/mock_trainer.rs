//! A stand-in trainer for exercising the harness without a GPU. Training
//! only records what it was given; prediction derives masks from the test
//! set's own ground truth (`<images>/../masks`).

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::listing;
use crate::patching;
use crate::raster::{self, LabelMask};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MockMode {
    /// Predict the ground truth exactly.
    Identity,
    /// Predict nothing.
    Empty,
    /// Grow every instance by one pixel (4-neighbourhood) into background.
    Dilate,
}

impl FromStr for MockMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "identity" => Ok(MockMode::Identity),
            "empty" => Ok(MockMode::Empty),
            "dilate" => Ok(MockMode::Dilate),
            _ => Err(Error::InvalidArgument(format!("unknown mock mode `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockStage {
    pub subset: String,
    pub patches: usize,
    pub learning_rate: f64,
    pub epochs: u32,
}

/// What a mock "model" file contains.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockModel {
    pub mode: MockMode,
    pub history: Vec<MockStage>,
}

#[derive(Debug, Clone)]
pub struct TrainArgs {
    pub mode: MockMode,
    pub subset: PathBuf,
    /// `None` trains from scratch.
    pub init_model: Option<PathBuf>,
    pub out_model: PathBuf,
    pub learning_rate: f64,
    pub epochs: u32,
}

pub fn train(args: &TrainArgs) -> Result<MockModel> {
    let patches = listing::read_subset_patches(&args.subset)?;
    if patches.is_empty() {
        return Err(Error::Trainer(format!("{} lists no patches", args.subset.display())));
    }
    let mut history = match &args.init_model {
        Some(p) => listing::read_json::<MockModel>(p)?.history,
        None => Vec::new(),
    };
    history.push(MockStage {
        subset: args.subset.display().to_string(),
        patches: patches.len(),
        learning_rate: args.learning_rate,
        epochs: args.epochs,
    });
    let model = MockModel {
        mode: args.mode,
        history,
    };
    listing::write_json(&model, &args.out_model)?;
    Ok(model)
}

pub fn dilate(mask: &LabelMask) -> LabelMask {
    let (h, w) = mask.shape();
    let mut out = mask.clone();
    for r in 0..h {
        for c in 0..w {
            if mask.get(r, c) != 0 {
                continue;
            }
            let neighbours = [
                (r > 0).then(|| (r - 1, c)),
                (r + 1 < h).then(|| (r + 1, c)),
                (c > 0).then(|| (r, c - 1)),
                (c + 1 < w).then(|| (r, c + 1)),
            ];
            // lowest neighbouring label wins so the result is order-free
            if let Some(l) = neighbours
                .into_iter()
                .flatten()
                .map(|(rr, cc)| mask.get(rr, cc))
                .filter(|&l| l != 0)
                .min()
            {
                out.set(r, c, l);
            }
        }
    }
    out
}

/// Write one prediction per image of `images` into `out`. Returns the
/// number of masks written.
pub fn predict(model: &Path, images: &Path, out: &Path) -> Result<usize> {
    let model: MockModel = listing::read_json(model)?;
    let masks_dir = images.join("..").join("masks");
    let masks = raster::list_rasters(&masks_dir)?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let images = raster::list_rasters(images)?;
    for image in &images {
        let stem = raster::file_stem(image);
        let gt_path = patching::find_mask(&masks, &stem).ok_or_else(|| {
            Error::InvalidArgument(format!("no ground truth for {stem} in {}", masks_dir.display()))
        })?;
        let gt = raster::read_mask(gt_path)?;
        let pred = match model.mode {
            MockMode::Identity => gt,
            MockMode::Empty => LabelMask::zeros(gt.height, gt.width),
            MockMode::Dilate => dilate(&gt),
        };
        raster::write_mask(&pred, out.join(&stem))?;
    }
    Ok(images.len())
}
