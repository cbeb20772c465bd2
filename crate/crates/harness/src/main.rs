use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use gigaslide_core::checkpoint::{load_store_into, save_store};
use gigaslide_core::ParamStore;
use gigaslide_dsnet::Dsnet;
use gigaslide_harness::ablation::{baseline_variants, component_variants, encoding_variants, level_variants};
use gigaslide_harness::artifacts::{heatmap_png, thumbnail_png};
use gigaslide_harness::cam::{score_cam, slide_cam};
use gigaslide_harness::corpus::{open_corpus, write_corpus};
use gigaslide_harness::eval::to_csv;
use gigaslide_harness::preprocess::{collect_scae_patches, load_prepared, prepare_corpus, save_prepared, scan_for_encoding, train_scae_stage};
use gigaslide_harness::{
    evaluate, run_ablation_suite, synthetic_corpus, train_classifier, CorpusSlide, ExperimentConfig, HarnessError, NaiveCnn, PreparedCorpus, Result,
    SuiteSettings,
};
use gigaslide_scae::Scae;
use gigaslide_slide::build_thumbnail_matrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

#[derive(Parser)]
#[command(name = "gigaslide", about = "Dual-stream gigapixel slide classification", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment configuration (TOML); defaults apply to missing fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Render the synthetic corpus to slide directories.
    SynthGen(Common),
    /// Sift, crop and write level-0 thumbnails plus a sifting summary.
    Preprocess {
        #[command(flatten)]
        common: Common,
        /// Slide root with train/ and val/; the synthetic corpus when omitted.
        #[arg(long)]
        slides: Option<PathBuf>,
    },
    /// Train the patch encoder.
    TrainScae {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        slides: Option<PathBuf>,
    },
    /// Encode every slide with a trained patch encoder.
    Encode {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        slides: Option<PathBuf>,
        #[arg(long)]
        scae: PathBuf,
    },
    /// Train a slide classifier on encoded slides.
    TrainDsnet {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Train the thumbnail-only baseline instead.
        #[arg(long)]
        naive: bool,
    },
    /// Evaluate a checkpoint on the validation split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        naive: bool,
    },
    /// Train and tabulate the ablation variants.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Encoded slides from a single-branch encoder, for the mixed-encoding row.
        #[arg(long)]
        mixed_data: Option<PathBuf>,
        /// Comma-separated tables: baseline, components, levels, encoding.
        #[arg(long, default_value = "baseline,components,levels,encoding")]
        tables: String,
    },
    /// Class activation maps for the positive validation slides.
    Gradcam {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = run(Cli::parse()) {
        log::error!("{e}");
        std::process::exit(1);
    }
}

fn load_config(path: &Option<PathBuf>) -> Result<ExperimentConfig> {
    match path {
        Some(p) => ExperimentConfig::load(p),
        None => Ok(ExperimentConfig::default()),
    }
}

fn slides_from(cfg: &ExperimentConfig, root: &Option<PathBuf>) -> Result<Vec<CorpusSlide>> {
    match root {
        Some(r) => open_corpus(r),
        None => synthetic_corpus(&cfg.corpus),
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(d) = path.parent() {
        std::fs::create_dir_all(d).map_err(|source| HarnessError::Io {
            path: d.display().to_string(),
            source,
        })?;
    }
    std::fs::write(path, text).map_err(|source| HarnessError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn load_scae(cfg: &ExperimentConfig, path: &Path) -> Result<(Scae, ParamStore<f32>)> {
    let mut store = ParamStore::new();
    let model = Scae::new(&mut store, cfg.scae.model.clone(), &mut ChaCha8Rng::seed_from_u64(0))?;
    load_store_into(path, &mut store)?;
    Ok((model, store))
}

enum Loaded {
    Dsnet(Dsnet),
    Naive(NaiveCnn),
}

fn build_model(cfg: &ExperimentConfig, naive: bool, store: &mut ParamStore<f32>) -> Result<Loaded> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.training.seed);
    Ok(if naive {
        Loaded::Naive(NaiveCnn::new(store, cfg.naive.clone(), &mut rng)?)
    } else {
        Loaded::Dsnet(Dsnet::new(store, cfg.dsnet.clone(), &mut rng)?)
    })
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::SynthGen(c) => {
            let cfg = load_config(&c.config)?;
            let dirs = write_corpus(&cfg.corpus, &c.out)?;
            log::info!("wrote {} slides under {}", dirs.len(), c.out.display());
        }
        Command::Preprocess { common: c, slides } => {
            let cfg = load_config(&c.config)?;
            cfg.preprocess.validate()?;
            #[derive(Serialize)]
            struct Row {
                slide_id: String,
                split: String,
                label: Option<u8>,
                rows: usize,
                cols: usize,
                kept: usize,
                threshold: Option<u32>,
                crop_rows: usize,
                crop_cols: usize,
            }
            let mut rows = Vec::new();
            for s in slides_from(&cfg, &slides)? {
                let id = s.source.slide_id().to_string();
                let scan = scan_for_encoding(s.source.as_ref(), &cfg.preprocess, cfg.scae.model.input as u32)?;
                let (crop, origin) = scan.grid.crop_bounding_box(&id)?;
                let thumb = build_thumbnail_matrix(&scan, (origin.0, origin.1, crop.rows, crop.cols), &cfg.preprocess.levels)?;
                thumbnail_png(&thumb.data, &c.out.join("thumbnails").join(format!("{id}.png")))?;
                rows.push(Row {
                    slide_id: id,
                    split: s.split.to_string(),
                    label: s.source.label(),
                    rows: scan.grid.rows,
                    cols: scan.grid.cols,
                    kept: scan.grid.kept_count(),
                    threshold: scan.threshold,
                    crop_rows: crop.rows,
                    crop_cols: crop.cols,
                });
            }
            write_text(&c.out.join("sifting.csv"), &to_csv(&rows)?)?;
        }
        Command::TrainScae { common: c, slides } => {
            let cfg = load_config(&c.config)?;
            let corpus = slides_from(&cfg, &slides)?;
            let (train, val) = collect_scae_patches(&corpus, &cfg.scae, &cfg.preprocess)?;
            let trained = train_scae_stage(&cfg.scae, &train, &val, None)?;
            std::fs::create_dir_all(&c.out).map_err(|source| HarnessError::Io {
                path: c.out.display().to_string(),
                source,
            })?;
            save_store(&c.out.join("scae.gst"), &trained.store)?;
            write_text(&c.out.join("scae_history.csv"), &to_csv(&trained.history.epochs)?)?;
            write_text(
                &c.out.join("scae_summary.txt"),
                &format!(
                    "initial val mse {:.6}\nfinal val mse {:.6}\nmean-image val mse {:.6}\nsparsity rate {:.4}\n",
                    trained.history.initial_val_mse,
                    trained.history.final_val_mse(),
                    trained.blind_mse,
                    trained.model.rho(&trained.store)
                ),
            )?;
        }
        Command::Encode { common: c, slides, scae } => {
            let cfg = load_config(&c.config)?;
            cfg.preprocess.validate()?;
            let (model, store) = load_scae(&cfg, &scae)?;
            let prepared = prepare_corpus(&slides_from(&cfg, &slides)?, &cfg.preprocess, &model, &store)?;
            save_prepared(&prepared, &c.out)?;
            log::info!("encoded {} slides into {}", prepared.len(), c.out.display());
        }
        Command::TrainDsnet { common: c, data, naive } => {
            let cfg = load_config(&c.config)?;
            let corpus = PreparedCorpus::from_slides(load_prepared(&data)?);
            let (train, val) = corpus.samples(cfg.dsnet.levels, (0, corpus.embedding_channels()?))?;
            let mut store = ParamStore::new();
            let model = build_model(&cfg, naive, &mut store)?;
            let ckpt = c.out.join("checkpoint.gst");
            std::fs::create_dir_all(&c.out).map_err(|source| HarnessError::Io {
                path: c.out.display().to_string(),
                source,
            })?;
            let (outcome, report) = match &model {
                Loaded::Dsnet(m) => (
                    train_classifier(m, &mut store, &train, &val, &cfg.training, Some(&ckpt))?,
                    evaluate("dsnet", m, &store, &val, cfg.training.pad_multiple)?,
                ),
                Loaded::Naive(m) => (
                    train_classifier(m, &mut store, &train, &val, &cfg.training, Some(&ckpt))?,
                    evaluate("naive", m, &store, &val, cfg.training.pad_multiple)?,
                ),
            };
            write_text(&c.out.join("history.csv"), &to_csv(&outcome.history)?)?;
            report.write(&c.out.join("eval"))?;
            println!("{}", report.to_text());
        }
        Command::Eval {
            common: c,
            data,
            checkpoint,
            naive,
        } => {
            let cfg = load_config(&c.config)?;
            let corpus = PreparedCorpus::from_slides(load_prepared(&data)?);
            let (_, val) = corpus.samples(cfg.dsnet.levels, (0, corpus.embedding_channels()?))?;
            let mut store = ParamStore::new();
            let model = build_model(&cfg, naive, &mut store)?;
            load_store_into(&checkpoint, &mut store)?;
            let report = match &model {
                Loaded::Dsnet(m) => evaluate("dsnet", m, &store, &val, cfg.training.pad_multiple)?,
                Loaded::Naive(m) => evaluate("naive", m, &store, &val, cfg.training.pad_multiple)?,
            };
            report.write(&c.out)?;
            println!("{}", report.to_text());
        }
        Command::Ablate {
            common: c,
            data,
            mixed_data,
            tables,
        } => {
            let cfg = load_config(&c.config)?;
            let corpus = PreparedCorpus::from_slides(load_prepared(&data)?);
            let mixed = mixed_data.map(|d| load_prepared(&d).map(PreparedCorpus::from_slides)).transpose()?;
            let mut variants = Vec::new();
            for t in tables.split(',').map(str::trim) {
                variants.extend(match t {
                    "baseline" => baseline_variants(),
                    "components" => component_variants(),
                    "levels" => level_variants(cfg.preprocess.levels.len()),
                    "encoding" => encoding_variants(),
                    other => return Err(HarnessError::Config(format!("unknown table {other}"))),
                });
            }
            let settings = SuiteSettings {
                dsnet: &cfg.dsnet,
                naive: &cfg.naive,
                training: &cfg.training,
                fg_channels: cfg.scae.model.fg_channels,
            };
            let table = run_ablation_suite(&corpus, mixed.as_ref(), &variants, &settings)?;
            write_text(&c.out.join("ablation.csv"), &table.to_csv()?)?;
            write_text(&c.out.join("ablation.txt"), &table.to_text())?;
            println!("{}", table.to_text());
        }
        Command::Gradcam { common: c, data, checkpoint } => {
            let cfg = load_config(&c.config)?;
            let corpus = PreparedCorpus::from_slides(load_prepared(&data)?);
            let (_, val) = corpus.samples(cfg.dsnet.levels, (0, corpus.embedding_channels()?))?;
            let mut store = ParamStore::new();
            let model = Dsnet::new(&mut store, cfg.dsnet.clone(), &mut ChaCha8Rng::seed_from_u64(cfg.training.seed))?;
            load_store_into(&checkpoint, &mut store)?;
            let mut rows = Vec::new();
            for (sample, prepared) in val.iter().zip(&corpus.val) {
                if sample.label != 1 {
                    continue;
                }
                let map = slide_cam(&model, &store, sample, cfg.training.pad_multiple)?;
                heatmap_png(&map, 8, &c.out.join(format!("{}_cam.png", sample.slide_id)))?;
                thumbnail_png(&sample.thumbnail, &c.out.join(format!("{}_thumbnail.png", sample.slide_id)))?;
                rows.push(score_cam(&map, &prepared.meta));
            }
            let hits = rows.iter().filter(|r| r.localizes()).count();
            write_text(&c.out.join("localization.csv"), &to_csv(&rows)?)?;
            println!("lesion cells hotter than the rest on {hits} of {} positive slides", rows.len());
        }
    }
    Ok(())
}
