//! On-disk synthetic datasets: one PNG per scene plus a JSON manifest with
//! annotations, splits and SHA-256 checksums.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use explainer_core::rng::{derive_seed, stream};
use explainer_core::synth::{
    background_image, plan_splits, BoundingBox, CategoryDescriptor, ObjectPose, SceneGenerator, SceneGeometry, SplitPlan,
    SyntheticScene,
};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;
use crate::error::{AppError, Result};
use crate::imageio::GrayImage;

pub const MANIFEST: &str = "manifest.json";
pub const IMAGE_FORMAT: &str = "png-gray8";
pub const BACKGROUND: &str = "background";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneRecord {
    pub file: String,
    pub label: usize,
    pub landmarks: Vec<(f64, f64)>,
    pub object_bbox: BoundingBox,
    pub pose: ObjectPose,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub seed: u64,
    pub num_scenes: usize,
    pub categories: Vec<CategoryDescriptor>,
    /// Class names in label order; a single category gains a background class.
    pub class_names: Vec<String>,
    pub geometry: SceneGeometry,
    pub image_format: String,
    pub scenes: Vec<SceneRecord>,
    pub splits: SplitPlan,
    /// SHA-256 of every image file, keyed by relative path.
    pub checksums: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub scenes: Vec<SyntheticScene>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> &[usize] {
        match split {
            Split::Train => &self.manifest.splits.train,
            Split::Val => &self.manifest.splits.val,
            Split::Test => &self.manifest.splits.test,
        }
    }

    /// Evaluation images: validation followed by test.
    pub fn eval_indices(&self) -> Vec<usize> {
        let mut v = self.manifest.splits.val.clone();
        v.extend(&self.manifest.splits.test);
        v
    }

    /// Scene tagged with its split, in manifest order.
    pub fn iter(&self) -> impl Iterator<Item = (&SyntheticScene, Split)> {
        let mut tags = vec![Split::Train; self.scenes.len()];
        for &i in &self.manifest.splits.val {
            tags[i] = Split::Val;
        }
        for &i in &self.manifest.splits.test {
            tags[i] = Split::Test;
        }
        self.scenes.iter().zip(tags)
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Renders every scene of the configured dataset in memory.
pub fn render_dataset(cfg: &ExperimentConfig) -> Result<(Vec<SyntheticScene>, SplitPlan)> {
    let d = &cfg.data;
    let seed = cfg.data_seed();
    let generator = SceneGenerator::new(d.geometry.clone(), d.categories.clone())?;
    let single = d.categories.len() == 1;
    let scenes = (0..d.num_scenes)
        .map(|i| {
            if single && i % 2 == 1 {
                let image = background_image(&d.geometry, derive_seed(seed, stream::NEGATIVE, i as u64));
                SyntheticScene {
                    image,
                    label: 1,
                    landmarks: Vec::new(),
                    object_bbox: BoundingBox { top: 0.0, left: 0.0, height: 0.0, width: 0.0 },
                    pose: ObjectPose { center: (0.0, 0.0), scale: 0.0 },
                }
            } else {
                generator.scene(seed, if single { i / 2 } else { i })
            }
        })
        .collect();
    let splits = plan_splits(d.num_scenes, (d.train_fraction, d.val_fraction), seed)?;
    Ok((scenes, splits))
}

/// Writes images and manifest under `dir` and returns the manifest.
pub fn generate_dataset(cfg: &ExperimentConfig, dir: &Path) -> Result<DatasetManifest> {
    let (scenes, splits) = render_dataset(cfg)?;
    let images = dir.join("images");
    std::fs::create_dir_all(&images).map_err(AppError::io(&images))?;
    let mut records = Vec::with_capacity(scenes.len());
    let mut checksums = BTreeMap::new();
    for (i, s) in scenes.iter().enumerate() {
        let file = format!("images/scene_{i:05}.png");
        let bytes = GrayImage::from_unit_map(&s.image).encode_png()?;
        let path = dir.join(&file);
        std::fs::write(&path, &bytes).map_err(AppError::io(&path))?;
        checksums.insert(file.clone(), sha256_hex(&bytes));
        records.push(SceneRecord {
            file,
            label: s.label,
            landmarks: s.landmarks.clone(),
            object_bbox: s.object_bbox,
            pose: s.pose,
        });
    }
    let mut class_names: Vec<String> = cfg.data.categories.iter().map(|c| c.name.clone()).collect();
    if class_names.len() == 1 {
        class_names.push(BACKGROUND.to_string());
    }
    let manifest = DatasetManifest {
        seed: cfg.data_seed(),
        num_scenes: scenes.len(),
        categories: cfg.data.categories.clone(),
        class_names,
        geometry: cfg.data.geometry.clone(),
        image_format: IMAGE_FORMAT.to_string(),
        scenes: records,
        splits,
        checksums,
    };
    let path = dir.join(MANIFEST);
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| AppError::Failed(e.to_string()))?;
    std::fs::write(&path, text).map_err(AppError::io(&path))?;
    Ok(manifest)
}

fn corrupt(file: impl Into<PathBuf>, reason: impl Into<String>) -> AppError {
    AppError::Corrupt { file: file.into(), reason: reason.into() }
}

/// Reads a dataset back, verifying every image checksum.
pub fn load_dataset(manifest_path: &Path) -> Result<Dataset> {
    let text = std::fs::read_to_string(manifest_path).map_err(|e| corrupt(manifest_path, e.to_string()))?;
    let manifest: DatasetManifest = serde_json::from_str(&text).map_err(|e| corrupt(manifest_path, e.to_string()))?;
    if manifest.image_format != IMAGE_FORMAT {
        return Err(corrupt(manifest_path, format!("unsupported image format '{}'", manifest.image_format)));
    }
    if manifest.scenes.len() != manifest.num_scenes {
        return Err(corrupt(manifest_path, "scene count does not match num_scenes"));
    }
    let root = manifest_path.parent().unwrap_or(Path::new("."));
    let size = manifest.geometry.size;
    let mut scenes = Vec::with_capacity(manifest.scenes.len());
    for rec in &manifest.scenes {
        let path = root.join(&rec.file);
        let bytes = std::fs::read(&path).map_err(|e| corrupt(&path, e.to_string()))?;
        let expected = manifest
            .checksums
            .get(&rec.file)
            .ok_or_else(|| corrupt(&path, "no checksum recorded"))?;
        if &sha256_hex(&bytes) != expected {
            return Err(corrupt(&path, "checksum mismatch"));
        }
        let img = GrayImage::decode_png(&bytes).map_err(|e| corrupt(&path, e))?;
        if img.width != size || img.height != size {
            return Err(corrupt(&path, format!("expected {size}x{size}, found {}x{}", img.width, img.height)));
        }
        scenes.push(SyntheticScene {
            image: img.to_unit_map(),
            label: rec.label,
            landmarks: rec.landmarks.clone(),
            object_bbox: rec.object_bbox,
            pose: rec.pose,
        });
    }
    let n = scenes.len();
    let mut seen = vec![false; n];
    let s = &manifest.splits;
    for &i in s.train.iter().chain(&s.val).chain(&s.test) {
        if i >= n || seen[i] {
            return Err(corrupt(manifest_path, "splits are not a partition of the scenes"));
        }
        seen[i] = true;
    }
    if seen.iter().any(|v| !v) {
        return Err(corrupt(manifest_path, "splits do not cover every scene"));
    }
    Ok(Dataset { manifest, scenes })
}
