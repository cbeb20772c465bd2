//! Experiment configuration and the preparation pipeline shared by the CLI
//! and the acceptance suite.

use std::path::Path;

use gigaslide_dsnet::DsnetConfig;
use gigaslide_scae::train::BatchObservation;
use serde::{Deserialize, Serialize};

use crate::classifier::NaiveConfig;
use crate::corpus::{CorpusConfig, CorpusSlide, Split};
use crate::data::SlideSample;
use crate::error::{io_err, HarnessError, Result};
use crate::preprocess::{collect_scae_patches, prepare_corpus, train_scae_stage, PreparedSlide, PreprocessConfig, ScaeStage, TrainedScae};
use crate::train::TrainingConfig;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub corpus: CorpusConfig,
    pub preprocess: PreprocessConfig,
    pub scae: ScaeStage,
    pub dsnet: DsnetConfig,
    pub naive: NaiveConfig,
    pub training: TrainingConfig,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path).map_err(io_err(path))?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| HarnessError::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.corpus.validate()?;
        self.preprocess.validate()?;
        self.training.validate()?;
        self.dsnet.validate()?;
        if self.dsnet.levels > self.preprocess.levels.len() {
            return Err(HarnessError::Config(format!(
                "network reads {} thumbnail levels, preprocessing stores {}",
                self.dsnet.levels,
                self.preprocess.levels.len()
            )));
        }
        if self.dsnet.embedding_channels != self.scae.model.embedding_channels() {
            return Err(HarnessError::Config(format!(
                "network expects {} embedding channels, encoder emits {}",
                self.dsnet.embedding_channels,
                self.scae.model.embedding_channels()
            )));
        }
        Ok(())
    }
}

/// Prepared slides split into training and validation sets.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PreparedCorpus {
    pub train: Vec<PreparedSlide>,
    pub val: Vec<PreparedSlide>,
}

impl PreparedCorpus {
    pub fn from_slides(slides: Vec<PreparedSlide>) -> Self {
        let (train, val) = slides.into_iter().partition(|s| s.meta.split == Split::Train);
        PreparedCorpus { train, val }
    }

    fn first(&self) -> Result<&PreparedSlide> {
        self.train
            .first()
            .or(self.val.first())
            .ok_or_else(|| HarnessError::Data("empty corpus".into()))
    }

    pub fn embedding_channels(&self) -> Result<usize> {
        Ok(self.first()?.embedding.channels())
    }

    /// Patch size and thumbnail block size.
    pub fn geometry(&self) -> Result<(u32, u32)> {
        let m = &self.first()?.meta;
        Ok((m.patch_size, m.k))
    }

    /// Network inputs of both splits with `levels` thumbnail levels and the
    /// `(start, len)` embedding channels.
    pub fn samples(&self, levels: usize, channels: (usize, usize)) -> Result<(Vec<SlideSample>, Vec<SlideSample>)> {
        let conv = |v: &[PreparedSlide]| v.iter().map(|p| SlideSample::from_prepared(p, levels, channels)).collect::<Result<Vec<_>>>();
        Ok((conv(&self.train)?, conv(&self.val)?))
    }
}

/// Trains the patch encoder on a slice of the training split, then prepares
/// every slide.
pub fn prepare(
    config: &ExperimentConfig,
    corpus: &[CorpusSlide],
    observer: Option<&mut dyn FnMut(&BatchObservation)>,
) -> Result<(PreparedCorpus, TrainedScae)> {
    config.validate()?;
    let (train_patches, val_patches) = collect_scae_patches(corpus, &config.scae, &config.preprocess)?;
    log::info!("encoder patches: {} train, {} val", train_patches.len(), val_patches.len());
    let scae = train_scae_stage(&config.scae, &train_patches, &val_patches, observer)?;
    drop((train_patches, val_patches));
    let slides = prepare_corpus(corpus, &config.preprocess, &scae.model, &scae.store)?;
    Ok((PreparedCorpus::from_slides(slides), scae))
}
