//! Slide preparation: sifting, cropping, thumbnail matrices, patch embeddings,
//! and the S-CAE training stage that produces the patch encoder.

use std::path::Path;

use gigaslide_core::checkpoint::{load_tensors, save_tensors};
use gigaslide_core::ParamStore;
use gigaslide_scae::train::{mean_image_mse, sample_training_patches, BatchObservation};
use gigaslide_scae::{encode_scan, search_sparsity_rate, train_scae, EmbeddingMatrix, RhoSearch, Scae, ScaeConfig, ScaeHistory, ScaeTrainConfig};
use gigaslide_slide::{build_thumbnail_matrix, scan_slide, Lesion, ScanConfig, SlideScan, SlideSource, ThumbnailMatrix};
use image::RgbImage;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{CorpusSlide, Split};
use crate::error::{io_err, HarnessError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PreprocessConfig {
    pub patch_size: u32,
    /// Thumbnail block size; half the patch size puts T at twice V's extent.
    pub k: u32,
    /// Levels stored on disk; narrower variants slice the leading channels.
    pub levels: Vec<u32>,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            patch_size: 256,
            k: 128,
            levels: vec![0, 1, 2, 3],
        }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.patch_size != 2 * self.k {
            return Err(HarnessError::Config(format!(
                "patch size {} must be twice the thumbnail block {}",
                self.patch_size, self.k
            )));
        }
        if self.levels.is_empty() || self.levels.iter().enumerate().any(|(i, &l)| l != i as u32) {
            return Err(HarnessError::Config(format!("levels must be 0, 1, .., L-1, got {:?}", self.levels)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScaeStage {
    pub model: ScaeConfig,
    pub train: ScaeTrainConfig,
    /// Leading train-split slides that supply training patches.
    pub source_slides: usize,
    /// Following train-split slides that supply validation patches.
    pub val_source_slides: usize,
    pub patches: usize,
    pub val_patches: usize,
    /// Golden-section probes over the sparsity rate before the final run; 0 skips the search.
    pub rho_probes: usize,
    pub rho_range: (f64, f64),
    pub probe_epochs: usize,
}

impl Default for ScaeStage {
    fn default() -> Self {
        ScaeStage {
            model: ScaeConfig::default(),
            train: ScaeTrainConfig::default(),
            source_slides: 40,
            val_source_slides: 8,
            patches: 2000,
            val_patches: 200,
            rho_probes: 0,
            rho_range: (0.6, 0.98),
            probe_epochs: 1,
        }
    }
}

/// Patch scan retaining resized kept patches for the encoder.
pub fn scan_for_encoding(source: &dyn SlideSource, cfg: &PreprocessConfig, side: u32) -> Result<SlideScan> {
    Ok(scan_slide(
        source,
        ScanConfig {
            patch_size: cfg.patch_size,
            k: cfg.k,
            resize_to: Some(side),
            retain_sifted: false,
        },
    )?)
}

/// Kept patches of the given slides.
pub fn kept_patches(slides: &[&CorpusSlide], cfg: &PreprocessConfig, side: u32) -> Result<Vec<RgbImage>> {
    let mut out = Vec::new();
    for s in slides {
        let scan = scan_for_encoding(s.source.as_ref(), cfg, side)?;
        out.extend(scan.patches.into_iter().flatten());
    }
    Ok(out)
}

/// Training and validation patches for the S-CAE, drawn from disjoint train-split slides.
pub fn collect_scae_patches(corpus: &[CorpusSlide], stage: &ScaeStage, cfg: &PreprocessConfig) -> Result<(Vec<RgbImage>, Vec<RgbImage>)> {
    let train_slides: Vec<&CorpusSlide> = corpus.iter().filter(|s| s.split == Split::Train).collect();
    let n_src = stage.source_slides.min(train_slides.len());
    let n_val = stage.val_source_slides.min(train_slides.len() - n_src);
    if n_src == 0 || n_val == 0 {
        return Err(HarnessError::Config(format!(
            "S-CAE stage needs training and validation source slides, have {} train slides",
            train_slides.len()
        )));
    }
    let side = stage.model.input as u32;
    let mut rng = ChaCha8Rng::seed_from_u64(stage.train.seed ^ 0x5ca3);
    let train = sample_training_patches(kept_patches(&train_slides[..n_src], cfg, side)?, stage.patches, &mut rng);
    let val = sample_training_patches(kept_patches(&train_slides[n_src..n_src + n_val], cfg, side)?, stage.val_patches, &mut rng);
    if train.is_empty() || val.is_empty() {
        return Err(HarnessError::Data("source slides yielded no kept patches".into()));
    }
    Ok((train, val))
}

pub struct TrainedScae {
    pub model: Scae,
    pub store: ParamStore<f32>,
    pub history: ScaeHistory,
    pub search: Option<RhoSearch>,
    /// Validation MSE of the per-pixel mean of the training patches.
    pub blind_mse: f64,
}

fn fresh_scae(config: &ScaeConfig, seed: u64) -> gigaslide_scae::Result<(Scae, ParamStore<f32>)> {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = Scae::new(&mut store, config.clone(), &mut rng)?;
    Ok((model, store))
}

/// Optional sparsity-rate search, then the full training run. `observer`
/// sees every batch of the full run.
pub fn train_scae_stage(
    stage: &ScaeStage,
    train: &[RgbImage],
    val: &[RgbImage],
    observer: Option<&mut dyn FnMut(&BatchObservation)>,
) -> Result<TrainedScae> {
    let mut config = stage.model.clone();
    let search = if stage.rho_probes > 0 && !config.mixed {
        let probe_cfg = ScaeTrainConfig {
            epochs: stage.probe_epochs,
            ..stage.train.clone()
        };
        let found = search_sparsity_rate(stage.rho_range, stage.rho_probes, |rho| {
            let (model, mut store) = fresh_scae(&ScaeConfig { rho_init: rho, ..config.clone() }, stage.train.seed)?;
            Ok(train_scae(&model, &mut store, train, val, &probe_cfg, None)?.final_val_mse())
        })?;
        config.rho_init = found.best;
        Some(found)
    } else {
        None
    };
    let (model, mut store) = fresh_scae(&config, stage.train.seed)?;
    let history = train_scae(&model, &mut store, train, val, &stage.train, observer)?;
    Ok(TrainedScae {
        model,
        store,
        history,
        search,
        blind_mse: mean_image_mse(train, val)?,
    })
}

/// Everything the classifiers need from one slide.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedSlide {
    pub meta: SlideMeta,
    pub thumbnail: ThumbnailMatrix,
    pub embedding: EmbeddingMatrix,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlideMeta {
    pub slide_id: String,
    pub split: Split,
    pub label: u8,
    pub lesions: Vec<Lesion>,
    pub extent: (u32, u32),
    pub patch_size: u32,
    pub k: u32,
    /// Top-left patch cell `(row, col)` of the crop.
    pub origin: (usize, usize),
    /// Cropped grid in patch cells `(rows, cols)`.
    pub cells: (usize, usize),
    pub kept_patches: usize,
}

impl SlideMeta {
    /// Pixels covered by the cropped region.
    pub fn pixel_count(&self) -> u64 {
        (self.cells.0 * self.cells.1) as u64 * (self.patch_size as u64).pow(2)
    }
}

/// Sifts, crops to the kept-cell bounding box, and builds both matrices.
pub fn prepare_slide(slide: &CorpusSlide, cfg: &PreprocessConfig, scae: &Scae, store: &ParamStore<f32>) -> Result<PreparedSlide> {
    let source = slide.source.as_ref();
    let id = source.slide_id().to_string();
    let label = source
        .label()
        .ok_or_else(|| HarnessError::Data(format!("{id}: slide has no label")))?;
    let scan = scan_for_encoding(source, cfg, scae.config.input as u32)?;
    let (crop, origin) = scan.grid.crop_bounding_box(&id)?;
    let region = (origin.0, origin.1, crop.rows, crop.cols);
    let thumbnail = build_thumbnail_matrix(&scan, region, &cfg.levels)?;
    let embedding = encode_scan(scae, store, &scan, region, &id)?;
    Ok(PreparedSlide {
        meta: SlideMeta {
            slide_id: id,
            split: slide.split,
            label,
            lesions: source.lesions().to_vec(),
            extent: source.extent(),
            patch_size: cfg.patch_size,
            k: cfg.k,
            origin,
            cells: (crop.rows, crop.cols),
            kept_patches: crop.kept_count(),
        },
        thumbnail,
        embedding,
    })
}

pub fn prepare_corpus(corpus: &[CorpusSlide], cfg: &PreprocessConfig, scae: &Scae, store: &ParamStore<f32>) -> Result<Vec<PreparedSlide>> {
    cfg.validate()?;
    corpus
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let p = prepare_slide(s, cfg, scae, store)?;
            log::debug!("prepared {} ({}/{}), {:?} cells", p.meta.slide_id, i + 1, corpus.len(), p.meta.cells);
            Ok(p)
        })
        .collect()
}

const META_FILE: &str = "meta.json";
const THUMBNAIL_FILE: &str = "thumbnail.gst";
const EMBEDDING_FILE: &str = "embedding.gst";

impl PreparedSlide {
    /// Writes `dir/<slide_id>/{meta.json, thumbnail.gst, embedding.gst}`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let d = dir.join(&self.meta.slide_id);
        std::fs::create_dir_all(&d).map_err(io_err(&d))?;
        let meta = serde_json::to_string_pretty(&self.meta).map_err(|e| HarnessError::Data(e.to_string()))?;
        let p = d.join(META_FILE);
        std::fs::write(&p, meta).map_err(io_err(&p))?;
        let levels = gigaslide_core::Tensor::from_vec(
            &[self.thumbnail.levels.len()],
            self.thumbnail.levels.iter().map(|&l| l as f32).collect(),
        )?;
        save_tensors(&d.join(THUMBNAIL_FILE), &[("thumbnail", &self.thumbnail.data), ("levels", &levels)])?;
        self.embedding.save(&d.join(EMBEDDING_FILE))?;
        Ok(())
    }

    pub fn load(slide_dir: &Path) -> Result<Self> {
        let p = slide_dir.join(META_FILE);
        let text = std::fs::read_to_string(&p).map_err(io_err(&p))?;
        let meta: SlideMeta = serde_json::from_str(&text).map_err(|e| HarnessError::Data(format!("{}: {e}", p.display())))?;
        let entries = load_tensors(&slide_dir.join(THUMBNAIL_FILE))?;
        let get = |name: &str| {
            entries
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t.to_real::<f32>())
                .ok_or_else(|| HarnessError::Data(format!("{}: missing {name}", slide_dir.display())))
        };
        let thumbnail = ThumbnailMatrix {
            data: get("thumbnail")?,
            levels: get("levels")?.data().iter().map(|&l| l as u32).collect(),
            k: meta.k,
        };
        let embedding = EmbeddingMatrix::load(&slide_dir.join(EMBEDDING_FILE), &meta.slide_id)?;
        Ok(PreparedSlide { meta, thumbnail, embedding })
    }
}

pub fn save_prepared(slides: &[PreparedSlide], dir: &Path) -> Result<()> {
    slides.iter().try_for_each(|s| s.save(dir))
}

/// Loads every prepared slide under `dir`, sorted by slide id.
pub fn load_prepared(dir: &Path) -> Result<Vec<PreparedSlide>> {
    let mut dirs: Vec<_> = std::fs::read_dir(dir)
        .map_err(io_err(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(META_FILE).exists())
        .collect();
    dirs.sort();
    dirs.iter().map(|d| PreparedSlide::load(d)).collect()
}
