//! Dataset directories: `manifest.json`, `images/*.gt` (`u8`, `[3, H, W]`)
//! and, for labelled sets, `labels/*.gt` (`i32`, `[H, W]`).

use std::path::Path;

use gssl_core::synth::{Dataset, DomainSpec, Scene, Style};
use serde::{Deserialize, Serialize};

use crate::error::{IoError, Result};
use crate::tensor_io::{read_tensor, write_tensor, Data, Stored};

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub name: String,
    pub k_known: usize,
    pub k_total: usize,
    pub include_ood: bool,
    pub n_images: usize,
    pub extent: [usize; 2],
    pub seed: u64,
    pub style: Style,
    /// File names under `images/` (and `labels/`), in dataset order.
    pub files: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub scenes: Vec<Scene>,
}

impl Manifest {
    pub fn spec(&self) -> DomainSpec {
        DomainSpec {
            name: self.name.clone(),
            k_known: self.k_known,
            include_ood: self.include_ood,
            style: self.style,
            n_images: self.n_images,
            extent: self.extent,
            seed: self.seed,
        }
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| IoError::json(path, e))?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| IoError::path(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| IoError::path(path, e))?;
    serde_json::from_str(&text).map_err(|e| IoError::json(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| IoError::path(path, e))
}

pub fn save_dataset(dir: &Path, data: &Dataset) -> Result<()> {
    data.validate()?;
    let [h, w] = data.spec.extent;
    let files: Vec<String> = (0..data.len()).map(|i| format!("{i:05}.gt")).collect();
    create_dir(&dir.join("images"))?;
    for (img, file) in data.images.iter().zip(&files) {
        write_tensor(&dir.join("images").join(file), &Stored::u8_image(img)?)?;
    }
    if let Some(labels) = &data.labels {
        create_dir(&dir.join("labels"))?;
        for (map, file) in labels.iter().zip(&files) {
            let t = Stored::new(vec![h, w], Data::I32(map.clone()))?;
            write_tensor(&dir.join("labels").join(file), &t)?;
        }
    }
    let spec = &data.spec;
    let manifest = Manifest {
        name: spec.name.clone(),
        k_known: spec.k_known,
        k_total: spec.k_total(),
        include_ood: spec.include_ood,
        n_images: data.len(),
        extent: spec.extent,
        seed: spec.seed,
        style: spec.style,
        files,
        scenes: data.scenes.clone(),
    };
    write_json(&dir.join(MANIFEST), &manifest)
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest: Manifest = read_json(&dir.join(MANIFEST))?;
    if manifest.files.len() != manifest.n_images {
        return Err(IoError::Invalid(format!(
            "{}: manifest lists {} files for {} images",
            dir.display(),
            manifest.files.len(),
            manifest.n_images
        )));
    }
    let spec = manifest.spec();
    if spec.k_total() != manifest.k_total {
        return Err(IoError::Invalid(format!(
            "{}: k_total {} disagrees with k_known {} and include_ood {}",
            dir.display(),
            manifest.k_total,
            manifest.k_known,
            manifest.include_ood
        )));
    }
    let [h, w] = manifest.extent;
    let mut images = Vec::with_capacity(manifest.n_images);
    for file in &manifest.files {
        let path = dir.join("images").join(file);
        let stored = read_tensor(&path)?;
        if !matches!(stored.data, Data::U8(_)) || stored.shape != [3, h, w] {
            return Err(IoError::Invalid(format!(
                "{}: expected u8 [3, {h}, {w}], got {:?} {:?}",
                path.display(),
                stored.data.dtype(),
                stored.shape
            )));
        }
        images.push(stored.to_tensor()?);
    }
    let label_dir = dir.join("labels");
    let labels = if label_dir.is_dir() {
        let mut maps = Vec::with_capacity(manifest.n_images);
        for file in &manifest.files {
            let path = label_dir.join(file);
            match read_tensor(&path)? {
                Stored {
                    shape,
                    data: Data::I32(v),
                } if shape == [h, w] => maps.push(v),
                other => {
                    return Err(IoError::Invalid(format!(
                        "{}: expected i32 [{h}, {w}], got {:?} {:?}",
                        path.display(),
                        other.data.dtype(),
                        other.shape
                    )))
                }
            }
        }
        Some(maps)
    } else {
        None
    };
    if !manifest.scenes.is_empty() && manifest.scenes.len() != manifest.n_images {
        return Err(IoError::Invalid(format!("{}: scene count mismatch", dir.display())));
    }
    let data = Dataset {
        spec,
        images,
        labels,
        scenes: manifest.scenes,
    };
    data.validate()
        .map_err(|e| IoError::Invalid(format!("{}: {e}", dir.display())))?;
    Ok(data)
}
