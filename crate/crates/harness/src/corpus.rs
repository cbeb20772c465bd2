//! Synthetic planted-lesion corpus and on-disk slide directories.

use std::fmt;
use std::path::{Path, PathBuf};

use gigaslide_slide::{write_slide, Decoy, SlideSource, StoredSlide, SynthConfig, SynthSlide};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{io_err, HarnessError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn dir_name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.dir_name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusConfig {
    pub train_slides: usize,
    pub val_slides: usize,
    /// Side of every synthetic slide in pixels.
    pub extent: u32,
    pub tile_size: u32,
    pub positive_fraction: f64,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            train_slides: 200,
            val_slides: 50,
            extent: 4096,
            tile_size: 512,
            positive_fraction: 0.5,
            seed: 2024,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SlideSpec {
    pub split: Split,
    pub synth: SynthConfig,
}

const DECOYS: [Decoy; 3] = [Decoy::None, Decoy::CoreWithPaleBlock, Decoy::TintWithoutCore];

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        if self.train_slides == 0 || self.val_slides == 0 {
            return Err(HarnessError::Config("both splits need at least one slide".into()));
        }
        if !(0.0..=1.0).contains(&self.positive_fraction) {
            return Err(HarnessError::Config(format!("positive fraction {} outside [0, 1]", self.positive_fraction)));
        }
        if self.tile_size == 0 || self.extent % self.tile_size != 0 {
            return Err(HarnessError::Config(format!("extent {} is not a multiple of tile size {}", self.extent, self.tile_size)));
        }
        Ok(())
    }

    /// Every slide of the corpus, train split first. Labels are shuffled per
    /// split; negatives cycle through the decoy kinds in label order.
    pub fn specs(&self) -> Result<Vec<SlideSpec>> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut out = Vec::with_capacity(self.train_slides + self.val_slides);
        for (split, n) in [(Split::Train, self.train_slides), (Split::Val, self.val_slides)] {
            let positives = (n as f64 * self.positive_fraction).round() as usize;
            let mut labels: Vec<bool> = (0..n).map(|i| i < positives).collect();
            labels.shuffle(&mut rng);
            let mut negatives = 0;
            for (i, positive) in labels.into_iter().enumerate() {
                let mut synth = SynthConfig::new(format!("{split}_{i:03}"), self.extent, self.extent, rng.gen());
                synth.tile_size = self.tile_size;
                if positive {
                    synth.lesion_density = 1;
                } else {
                    synth.decoy = DECOYS[negatives % DECOYS.len()];
                    negatives += 1;
                }
                out.push(SlideSpec { split, synth });
            }
        }
        Ok(out)
    }
}

/// A slide plus the split it belongs to.
pub struct CorpusSlide {
    pub split: Split,
    pub source: Box<dyn SlideSource + Send + Sync>,
}

pub fn synthetic_corpus(cfg: &CorpusConfig) -> Result<Vec<CorpusSlide>> {
    cfg.specs()?
        .into_iter()
        .map(|s| {
            Ok(CorpusSlide {
                split: s.split,
                source: Box::new(SynthSlide::new(&s.synth)?),
            })
        })
        .collect()
}

/// Renders the synthetic corpus to `root/<split>/<slide_id>/`.
pub fn write_corpus(cfg: &CorpusConfig, root: &Path) -> Result<Vec<PathBuf>> {
    let mut dirs = Vec::new();
    for slide in synthetic_corpus(cfg)? {
        let dir = root.join(slide.split.dir_name()).join(slide.source.slide_id());
        write_slide(slide.source.as_ref(), &dir)?;
        log::info!("wrote {}", dir.display());
        dirs.push(dir);
    }
    Ok(dirs)
}

/// Opens every slide directory under `root/train` and `root/val`, sorted by name.
pub fn open_corpus(root: &Path) -> Result<Vec<CorpusSlide>> {
    let mut out = Vec::new();
    for split in [Split::Train, Split::Val] {
        let dir = root.join(split.dir_name());
        let mut entries: Vec<PathBuf> = std::fs::read_dir(&dir)
            .map_err(io_err(&dir))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_dir())
            .collect();
        entries.sort();
        for path in entries {
            out.push(CorpusSlide {
                split,
                source: Box::new(StoredSlide::open(&path)?),
            });
        }
    }
    if out.is_empty() {
        return Err(HarnessError::Data(format!("no slides under {}", root.display())));
    }
    Ok(out)
}
