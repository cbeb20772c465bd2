//! Variant training runs and the tables they fill.

use std::fmt::Write as _;

use gigaslide_core::ParamStore;
use gigaslide_dsnet::{Components, Dsnet, DsnetConfig};
use gigaslide_slide::compression_report;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::classifier::{NaiveCnn, NaiveConfig};
use crate::data::EncodingMode;
use crate::error::{HarnessError, Result};
use crate::eval::{evaluate, to_csv, EvalReport};
use crate::experiment::PreparedCorpus;
use crate::train::{train_classifier, TrainOutcome, TrainingConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum VariantKind {
    Dsnet {
        components: Components,
        /// Number of thumbnail levels, finest first.
        levels: usize,
        encoding: EncodingMode,
    },
    Naive,
}

impl VariantKind {
    pub fn full() -> Self {
        VariantKind::Dsnet {
            components: Components::default(),
            levels: DsnetConfig::default().levels,
            encoding: EncodingMode::Separated,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Variant {
    pub table: String,
    pub name: String,
    pub kind: VariantKind,
}

impl Variant {
    fn new(table: &str, name: &str, kind: VariantKind) -> Self {
        Variant {
            table: table.into(),
            name: name.into(),
            kind,
        }
    }
}

/// One row per network component switch.
pub fn component_variants() -> Vec<Variant> {
    Components::ablation_rows()
        .into_iter()
        .map(|(name, components)| {
            Variant::new(
                "components",
                name,
                VariantKind::Dsnet {
                    components,
                    levels: DsnetConfig::default().levels,
                    encoding: EncodingMode::Separated,
                },
            )
        })
        .collect()
}

/// Thumbnail pyramids `{0}`, `{0,1}`, .. up to `max_levels` levels.
pub fn level_variants(max_levels: usize) -> Vec<Variant> {
    (1..=max_levels)
        .map(|l| {
            let name = format!("levels_{}", (0..l).map(|a| a.to_string()).collect::<Vec<_>>().join("_"));
            Variant::new(
                "levels",
                &name,
                VariantKind::Dsnet {
                    components: Components::default(),
                    levels: l,
                    encoding: EncodingMode::Separated,
                },
            )
        })
        .collect()
}

pub fn encoding_variants() -> Vec<Variant> {
    [
        ("foreground_only", EncodingMode::ForegroundOnly),
        ("background_only", EncodingMode::BackgroundOnly),
        ("mixed", EncodingMode::Mixed),
        ("separated", EncodingMode::Separated),
    ]
    .into_iter()
    .map(|(name, encoding)| {
        Variant::new(
            "encoding",
            name,
            VariantKind::Dsnet {
                components: Components::default(),
                levels: DsnetConfig::default().levels,
                encoding,
            },
        )
    })
    .collect()
}

pub fn baseline_variants() -> Vec<Variant> {
    vec![Variant::new("baseline", "naive", VariantKind::Naive), Variant::new("baseline", "dsnet", VariantKind::full())]
}

pub fn standard_variants(max_levels: usize) -> Vec<Variant> {
    let mut v = baseline_variants();
    v.extend(component_variants());
    v.extend(level_variants(max_levels));
    v.extend(encoding_variants());
    v
}

/// A trained variant and its validation report.
pub struct VariantRun {
    pub report: EvalReport,
    pub outcome: TrainOutcome,
    pub store: ParamStore<f32>,
    pub model: TrainedModel,
}

pub enum TrainedModel {
    Dsnet(Dsnet),
    Naive(NaiveCnn),
}

/// Shared settings for every variant of a suite.
pub struct SuiteSettings<'a> {
    pub dsnet: &'a DsnetConfig,
    pub naive: &'a NaiveConfig,
    pub training: &'a TrainingConfig,
    /// Foreground channels of a separated embedding.
    pub fg_channels: usize,
}

/// Trains and evaluates one variant. Model initialisation and batch order
/// come from the training seed, so every variant sees the same stream.
pub fn run_variant(kind: &VariantKind, corpus: &PreparedCorpus, mixed: Option<&PreparedCorpus>, settings: &SuiteSettings) -> Result<VariantRun> {
    let tcfg = settings.training;
    let mut rng = ChaCha8Rng::seed_from_u64(tcfg.seed);
    let mut store = ParamStore::new();
    match kind {
        VariantKind::Dsnet {
            components,
            levels,
            encoding,
        } => {
            let source = match encoding {
                EncodingMode::Mixed => mixed.ok_or_else(|| HarnessError::Config("mixed encoding needs a mixed-encoder corpus".into()))?,
                _ => corpus,
            };
            let total = source.embedding_channels()?;
            let channels = encoding.channel_range(settings.fg_channels.min(total), total);
            let (train, val) = source.samples(*levels, channels)?;
            let config = DsnetConfig {
                levels: *levels,
                embedding_channels: channels.1,
                components: *components,
                ..settings.dsnet.clone()
            };
            let model = Dsnet::new(&mut store, config, &mut rng)?;
            let outcome = train_classifier(&model, &mut store, &train, &val, tcfg, None)?;
            let report = evaluate("dsnet", &model, &store, &val, tcfg.pad_multiple)?;
            Ok(VariantRun {
                report,
                outcome,
                store,
                model: TrainedModel::Dsnet(model),
            })
        }
        VariantKind::Naive => {
            let (train, val) = corpus.samples(1, (0, corpus.embedding_channels()?))?;
            let model = NaiveCnn::new(&mut store, settings.naive.clone(), &mut rng)?;
            let outcome = train_classifier(&model, &mut store, &train, &val, tcfg, None)?;
            let report = evaluate("naive", &model, &store, &val, tcfg.pad_multiple)?;
            Ok(VariantRun {
                report,
                outcome,
                store,
                model: TrainedModel::Naive(model),
            })
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRow {
    pub table: String,
    pub variant: String,
    /// The full network with default settings.
    pub reference: bool,
    pub params: usize,
    pub auc: Option<f64>,
    pub accuracy: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
    pub best_epoch: usize,
    pub compression: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, table: &str, variant: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.table == table && r.variant == variant)
    }

    pub fn to_csv(&self) -> Result<String> {
        to_csv(&self.rows)
    }

    pub fn to_text(&self) -> String {
        let f = |v: Option<f64>| v.map_or("n/a".to_string(), |v| format!("{v:.4}"));
        let mut out = String::new();
        let mut table = "";
        for r in &self.rows {
            if r.table != table {
                table = &r.table;
                let _ = writeln!(out, "\n[{table}]");
                let _ = writeln!(
                    out,
                    "{:<32} {:>10} {:>8} {:>8} {:>9} {:>8} {:>8} {:>8}",
                    "variant", "params", "auc", "acc", "precision", "recall", "f1", "ratio"
                );
            }
            let name = if r.reference { format!("{} *", r.variant) } else { r.variant.clone() };
            let _ = writeln!(
                out,
                "{:<32} {:>10} {:>8} {:>8} {:>9} {:>8} {:>8} {:>8}",
                name,
                r.params,
                f(r.auc),
                f(r.accuracy),
                f(r.precision),
                f(r.recall),
                f(r.f1),
                r.compression.map_or("-".to_string(), |c| format!("{c:.1}"))
            );
        }
        out
    }
}

/// Raw pixel volume over the volume of what the variant reads.
pub fn compression_of(kind: &VariantKind, patch_size: u32, k: u32, fg_channels: usize, total_channels: usize) -> Result<Option<f64>> {
    Ok(match kind {
        VariantKind::Naive => Some(compression_report(patch_size, total_channels as u32, k, 1)?.thumbnail),
        VariantKind::Dsnet {
            components,
            levels,
            encoding,
        } => {
            let c = encoding.channel_range(fg_channels.min(total_channels), total_channels).1;
            let r = compression_report(patch_size, c as u32, k, *levels as u32)?;
            Some(match (components.thumbnail_stream, components.embedding_stream) {
                (true, true) => r.combined,
                (true, false) => r.thumbnail,
                _ => r.embedding,
            })
        }
    })
}

/// Trains every variant (identical kinds train once) and tabulates the
/// validation metrics in variant order. Mixed-encoding rows are skipped when
/// no mixed corpus is given.
pub fn run_ablation_suite(
    corpus: &PreparedCorpus,
    mixed: Option<&PreparedCorpus>,
    variants: &[Variant],
    settings: &SuiteSettings,
) -> Result<AblationTable> {
    let mut done: Vec<(VariantKind, EvalReport, usize)> = Vec::new();
    let mut table = AblationTable::default();
    let (s, k) = corpus.geometry()?;
    let total = corpus.embedding_channels()?;
    for v in variants {
        if matches!(v.kind, VariantKind::Dsnet { encoding: EncodingMode::Mixed, .. }) && mixed.is_none() {
            log::warn!("skipping {}/{}: no mixed-encoder corpus", v.table, v.name);
            continue;
        }
        let (report, best_epoch) = match done.iter().find(|(kind, _, _)| *kind == v.kind) {
            Some((_, r, e)) => (r.clone(), *e),
            None => {
                log::info!("training variant {}/{}", v.table, v.name);
                let run = run_variant(&v.kind, corpus, mixed, settings)?;
                done.push((v.kind.clone(), run.report.clone(), run.outcome.best_epoch));
                (run.report, run.outcome.best_epoch)
            }
        };
        table.rows.push(AblationRow {
            table: v.table.clone(),
            variant: v.name.clone(),
            reference: v.kind == VariantKind::full(),
            params: report.params,
            auc: report.auc,
            accuracy: report.accuracy,
            precision: report.precision,
            recall: report.recall,
            f1: report.f1,
            best_epoch,
            compression: compression_of(&v.kind, s, k, settings.fg_channels, total)?,
        });
    }
    Ok(table)
}
