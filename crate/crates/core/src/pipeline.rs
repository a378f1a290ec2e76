//! Dataset files and the glue from scenes to training examples and
//! evaluation inputs.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{contract, io_err, Result};
use crate::evalkit::EvalImage;
use crate::imagecore::{generate_scene, read_ground_truth, read_image, write_ground_truth, write_image, GroundTruth, Image, SceneConfig};
use crate::inference::{segment_image, MergePolicy};
use crate::overseg::{default_min_size, SegParams, DEFAULT_SIGMA};
use crate::regionfeat::FEATURE_DIM;
use crate::rng::mix_seed;
use crate::training::{label_regions, TrainConfig, TrainExample};

#[derive(Clone, Debug)]
pub struct Scene {
    pub name: String,
    pub image: Image,
    pub gt: GroundTruth,
}

/// Config of the `index`-th scene of a corpus.
pub fn scene_config(config: &SceneConfig, index: usize) -> SceneConfig {
    config.with_seed(mix_seed(config.seed, index as u64))
}

/// Scenes `start..start + count` of the corpus defined by `config`.
pub fn generate_corpus(config: &SceneConfig, start: usize, count: usize) -> Result<Vec<Scene>> {
    config.validate()?;
    (start..start + count)
        .map(|i| {
            let (image, gt) = generate_scene(&scene_config(config, i))?;
            Ok(Scene { name: format!("scene_{i:04}"), image, gt })
        })
        .collect()
}

/// Writes `scene_%04d.ppm`, `.gt.json` and `.mask.pgm` for each of `count`
/// scenes.
pub fn write_dataset(config: &SceneConfig, dir: &Path, count: usize) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    for scene in generate_corpus(config, 0, count)? {
        write_scene(&scene, dir)?;
    }
    Ok(())
}

pub fn write_scene(scene: &Scene, dir: &Path) -> Result<()> {
    write_image(&scene.image, &dir.join(format!("{}.ppm", scene.name)))?;
    write_ground_truth(
        &scene.gt,
        &dir.join(format!("{}.gt.json", scene.name)),
        &dir.join(format!("{}.mask.pgm", scene.name)),
    )
}

/// Every `*.ppm` in `dir` with its `*.gt.json`, sorted by file name.
pub fn load_dataset(dir: &Path) -> Result<Vec<Scene>> {
    let mut images: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io_err(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "ppm"))
        .collect();
    images.sort();
    images
        .into_iter()
        .map(|path| {
            let name = path.file_stem().unwrap_or_default().to_string_lossy().into_owned();
            let image = read_image(&path)?;
            let gt = read_ground_truth(&dir.join(format!("{name}.gt.json")))?;
            if gt.mask.width() != image.width() || gt.mask.height() != image.height() {
                return contract(format!("{name}: mask and image sizes differ"));
            }
            Ok(Scene { name, image, gt })
        })
        .collect()
}

/// One segmentation config per `k`, with the default sigma and a
/// canvas-scaled minimum size unless `min_size` is given.
pub fn seg_configs(ks: &[f64], min_size: Option<usize>, sigma: f64, width: usize, height: usize) -> Vec<SegParams> {
    let min_size = min_size.unwrap_or_else(|| default_min_size(width * height));
    ks.iter().map(|&k| SegParams { k, min_size, sigma }).collect()
}

/// Training examples, one per scene and segmentation.
pub fn training_examples(scenes: &[Scene], config: &RunConfig) -> Result<Vec<TrainExample>> {
    let mut out = Vec::new();
    for scene in scenes {
        let configs = config.seg_configs_for(&scene.image);
        for s in segment_image(&scene.image, &configs, config.feature_dim)? {
            let labeling = label_regions(&s.seg, &s.graph, &scene.gt)?;
            out.push(TrainExample {
                graph: s.graph,
                features: s.features,
                labeling,
                gt_boxes: scene.gt.bboxes(),
            });
        }
    }
    Ok(out)
}

/// Segmentations plus gt boxes and relative gt areas for evaluation.
pub fn eval_images(scenes: &[Scene], config: &RunConfig) -> Result<Vec<EvalImage>> {
    scenes
        .iter()
        .map(|scene| {
            let segs = segment_image(&scene.image, &config.seg_configs_for(&scene.image), config.feature_dim)?;
            let canvas = scene.image.area() as f64;
            let labels = scene.gt.mask.labels();
            let gt_areas = scene
                .gt
                .boxes
                .iter()
                .map(|b| labels.iter().filter(|&&l| l == b.id).count() as f64 / canvas)
                .collect();
            Ok(EvalImage { segs, gt_boxes: scene.gt.bboxes(), gt_areas })
        })
        .collect()
}

/// Everything a run needs besides file paths; paths given here are used
/// when the command line leaves them out.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub scene: SceneConfig,
    pub train: TrainConfig,
    pub policy: MergePolicy,
    /// Segmentation scales; one tree per scale and repeat.
    pub seg_k: Vec<f64>,
    pub seg_sigma: f64,
    /// Defaults to `max(4, area / 500)`.
    pub seg_min_size: Option<usize>,
    pub feature_dim: usize,
    pub budgets: Vec<usize>,
    pub data_dir: Option<PathBuf>,
    pub model_path: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            scene: SceneConfig::default(),
            train: TrainConfig::default(),
            policy: MergePolicy::default(),
            seg_k: vec![100.0, 250.0],
            seg_sigma: DEFAULT_SIGMA,
            seg_min_size: None,
            feature_dim: FEATURE_DIM,
            budgets: vec![100, 500, 1000],
            data_dir: None,
            model_path: None,
            out_dir: None,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        self.train.validate()?;
        self.policy.validate()?;
        if self.seg_k.is_empty() || self.seg_k.iter().any(|k| !(*k > 0.0)) {
            return contract("seg_k must list positive scales");
        }
        if !(self.seg_sigma >= 0.0) {
            return contract("seg_sigma must be >= 0");
        }
        if self.seg_min_size == Some(0) {
            return contract("seg_min_size must be positive");
        }
        if self.feature_dim < crate::regionfeat::USED_DIM {
            return contract(format!("feature_dim must be at least {}", crate::regionfeat::USED_DIM));
        }
        Ok(())
    }

    pub fn seg_configs_for(&self, image: &Image) -> Vec<SegParams> {
        seg_configs(&self.seg_k, self.seg_min_size, self.seg_sigma, image.width(), image.height())
    }
}
