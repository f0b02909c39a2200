//! In-memory view of a manifest split, ready for training and evaluation.

use std::path::Path;

use crate::error::{Error, Result};
use crate::exec;
use crate::objective::TrainSample;
use crate::tensor::Tensor;

use super::io;
use super::manifest::{DatasetManifest, ManifestRecord, SourceTag, Split};
use super::mask::ManipulationMask;

#[derive(Debug, Clone, PartialEq)]
pub struct LoadedSample {
    pub image: Tensor<f32>,
    pub mask: ManipulationMask,
    pub label: u8,
    pub source_tag: SourceTag,
    pub group_id: String,
}

impl LoadedSample {
    pub fn to_train_sample(&self) -> TrainSample<f32> {
        TrainSample {
            image: self.image.clone(),
            mask: self.mask.as_f32(),
            label: self.label as f32,
        }
    }
}

fn load_record(record: &ManifestRecord, base: &Path, channels: usize) -> Result<LoadedSample> {
    let img = io::load_image(&base.join(&record.image_path), channels)?;
    let mask = io::load_mask(&base.join(&record.mask_path))?;
    if (mask.height, mask.width) != (img.height, img.width) {
        return Err(Error::Dimension(format!(
            "{}: mask {}x{} vs image {}x{}",
            record.mask_path, mask.height, mask.width, img.height, img.width
        )));
    }
    match (record.label, mask.is_empty()) {
        (0, false) => {
            return Err(Error::Validation(format!("{}: real sample with a non-empty mask", record.image_path)))
        }
        (1, true) => return Err(Error::Validation(format!("{}: fake sample with an empty mask", record.image_path))),
        _ => {}
    }
    Ok(LoadedSample {
        image: img.to_tensor(),
        mask,
        label: record.label,
        source_tag: record.source_tag,
        group_id: record.group_id.clone(),
    })
}

/// Loads every record of `split`, in manifest order, checking the
/// label/mask invariants along the way.
pub fn load_split(manifest: &DatasetManifest, base: &Path, split: Split, channels: usize) -> Result<Vec<LoadedSample>> {
    let records = manifest.split(split);
    exec::map(&records, |r| load_record(r, base, channels))
        .into_iter()
        .collect()
}

/// Full-manifest scan of the label/mask invariants.
pub fn verify_manifest(manifest: &DatasetManifest, base: &Path) -> Result<()> {
    manifest.validate()?;
    exec::map(&manifest.records, |r| load_record(r, base, 3).map(|_| ()))
        .into_iter()
        .collect()
}
