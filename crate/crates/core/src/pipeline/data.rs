//! Synthetic benchmark construction and its on-disk layout.
//!
//! ```text
//! <dir>/manifest.json       DataConfig, scene-level split, patch index
//! <dir>/split.json          scene ids per partition, ratio, seed
//! <dir>/images/<id>.png     8-bit RGB patch
//! <dir>/labels/<id>.png     16-bit instance map
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datagen::{crop_patches, generate_scene, make_split, DatasetSplit, InstanceLabelMap, LabelRatio, RgbImage};
use crate::error::{Error, Result};
use crate::io::{load_labels, load_rgb, read_json, save_labels, save_rgb, write_json};

use super::derive_seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub scenes: usize,
    pub height: usize,
    pub width: usize,
    pub nuclei_per_scene: usize,
    pub texture_noise: f64,
    pub patch: usize,
    pub overlap: usize,
    pub ratio: LabelRatio,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            scenes: 10,
            height: 256,
            width: 256,
            nuclei_per_scene: 24,
            texture_noise: 0.03,
            patch: 128,
            overlap: 64,
            ratio: LabelRatio::Quarter,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `scene_id * 1000 + patch index`.
    pub id: u32,
    pub scene_id: u32,
    pub image: RgbImage,
    pub labels: InstanceLabelMap,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Partition {
    Labeled,
    Unlabeled,
    Val,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub config: DataConfig,
    pub split: DatasetSplit,
    pub labeled: Vec<Sample>,
    pub unlabeled: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl Dataset {
    pub fn partition(&self, p: Partition) -> &[Sample] {
        match p {
            Partition::Labeled => &self.labeled,
            Partition::Unlabeled => &self.unlabeled,
            Partition::Val => &self.val,
            Partition::Test => &self.test,
        }
    }
}

/// Scene `k` (ids `1..=scenes`) is generated from an independent sub-seed;
/// the split is drawn over scene ids and every patch inherits its scene's
/// partition.
pub fn build_dataset(cfg: &DataConfig) -> Result<Dataset> {
    let ids: Vec<u32> = (1..=cfg.scenes as u32).collect();
    let split = make_split(&ids, cfg.ratio, cfg.seed)?;
    let mut ds = Dataset {
        config: cfg.clone(),
        split: split.clone(),
        labeled: vec![],
        unlabeled: vec![],
        val: vec![],
        test: vec![],
    };
    for &sid in &ids {
        let scene = generate_scene(
            derive_seed(cfg.seed, sid as u64),
            cfg.height,
            cfg.width,
            cfg.nuclei_per_scene,
            cfg.texture_noise,
        )?;
        let patches = crop_patches(&scene, cfg.patch, cfg.overlap)?;
        let dst = if split.labeled.contains(&sid) {
            &mut ds.labeled
        } else if split.unlabeled.contains(&sid) {
            &mut ds.unlabeled
        } else if split.val.contains(&sid) {
            &mut ds.val
        } else {
            &mut ds.test
        };
        for (k, p) in patches.into_iter().enumerate() {
            dst.push(Sample {
                id: sid * 1000 + k as u32,
                scene_id: sid,
                image: p.scene.image,
                labels: p.scene.labels,
            });
        }
    }
    Ok(ds)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct PatchEntry {
    id: u32,
    scene_id: u32,
    partition: Partition,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Manifest {
    config: DataConfig,
    split: DatasetSplit,
    patches: Vec<PatchEntry>,
}

pub fn save_dataset(dir: &Path, ds: &Dataset) -> Result<()> {
    std::fs::create_dir_all(dir.join("images"))?;
    std::fs::create_dir_all(dir.join("labels"))?;
    let mut patches = Vec::new();
    for p in [Partition::Labeled, Partition::Unlabeled, Partition::Val, Partition::Test] {
        for s in ds.partition(p) {
            save_rgb(&dir.join("images").join(format!("{:06}.png", s.id)), &s.image)?;
            save_labels(&dir.join("labels").join(format!("{:06}.png", s.id)), &s.labels)?;
            patches.push(PatchEntry {
                id: s.id,
                scene_id: s.scene_id,
                partition: p,
            });
        }
    }
    write_json(&dir.join("split.json"), &ds.split)?;
    write_json(
        &dir.join("manifest.json"),
        &Manifest {
            config: ds.config.clone(),
            split: ds.split.clone(),
            patches,
        },
    )
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let m: Manifest = read_json(&dir.join("manifest.json"))?;
    let mut ds = Dataset {
        config: m.config,
        split: m.split,
        labeled: vec![],
        unlabeled: vec![],
        val: vec![],
        test: vec![],
    };
    for e in m.patches {
        let s = Sample {
            id: e.id,
            scene_id: e.scene_id,
            image: load_rgb(&dir.join("images").join(format!("{:06}.png", e.id)))?,
            labels: load_labels(&dir.join("labels").join(format!("{:06}.png", e.id)))?,
        };
        match e.partition {
            Partition::Labeled => ds.labeled.push(s),
            Partition::Unlabeled => ds.unlabeled.push(s),
            Partition::Val => ds.val.push(s),
            Partition::Test => ds.test.push(s),
        }
    }
    if ds.labeled.is_empty() {
        return Err(Error::InvalidArgument(format!("{}: no labeled patches", dir.display())));
    }
    Ok(ds)
}
