//! Evaluation reports: per-slide scores, confusion metrics, ROC and AUC.

use std::fmt::Write as _;
use std::path::Path;

use gigaslide_core::ParamStore;
use serde::Serialize;

use crate::artifacts::roc_png;
use crate::classifier::SlideClassifier;
use crate::data::SlideSample;
use crate::error::{io_err, HarnessError, Result};
use crate::metrics::{pearson, roc_curve, trapezoid, Confusion};
use crate::train::predict;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SlideScore {
    pub slide_id: String,
    pub label: u8,
    pub score: f64,
    pub stream_score: Option<f64>,
    pub pixel_count: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub model: String,
    pub params: usize,
    pub slides: Vec<SlideScore>,
    pub confusion: Confusion,
    pub accuracy: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
    /// `None` when the corpus holds a single class.
    pub auc: Option<f64>,
    pub roc: Vec<(f64, f64)>,
    /// Correlation of the stream score with the cropped slide pixel count.
    pub stream_pixel_pearson: Option<f64>,
}

pub const THRESHOLD: f64 = 0.5;

impl EvalReport {
    pub fn from_scores(model: impl Into<String>, params: usize, slides: Vec<SlideScore>) -> Self {
        let scores: Vec<f64> = slides.iter().map(|s| s.score).collect();
        let labels: Vec<bool> = slides.iter().map(|s| s.label == 1).collect();
        let confusion = Confusion::at(&scores, &labels, THRESHOLD);
        let roc = roc_curve(&scores, &labels);
        let (s, px): (Vec<f64>, Vec<f64>) = slides
            .iter()
            .filter_map(|x| x.stream_score.map(|s| (s, x.pixel_count as f64)))
            .unzip();
        EvalReport {
            model: model.into(),
            params,
            confusion,
            accuracy: confusion.accuracy(),
            precision: confusion.precision(),
            recall: confusion.recall(),
            f1: confusion.f1(),
            auc: roc.as_ref().map(|r| trapezoid(r)),
            roc: roc.unwrap_or_default(),
            stream_pixel_pearson: if s.len() == slides.len() { pearson(&s, &px) } else { None },
            slides,
        }
    }

    pub fn to_text(&self) -> String {
        let f = |v: Option<f64>| v.map_or("n/a".to_string(), |v| format!("{v:.4}"));
        let mut out = String::new();
        let _ = writeln!(out, "model        {}", self.model);
        let _ = writeln!(out, "parameters   {}", self.params);
        let _ = writeln!(out, "slides       {}", self.slides.len());
        let _ = writeln!(out, "auc          {}", f(self.auc));
        let _ = writeln!(out, "accuracy     {}", f(self.accuracy));
        let _ = writeln!(out, "precision    {}", f(self.precision));
        let _ = writeln!(out, "recall       {}", f(self.recall));
        let _ = writeln!(out, "f1           {}", f(self.f1));
        let c = &self.confusion;
        let _ = writeln!(out, "confusion    tp {} fp {} tn {} fn {}", c.tp, c.fp, c.tn, c.fn_);
        let _ = writeln!(out, "stream/pixels pearson r {}", f(self.stream_pixel_pearson));
        out
    }

    pub fn slides_csv(&self) -> Result<String> {
        to_csv(&self.slides)
    }

    pub fn roc_csv(&self) -> Result<String> {
        #[derive(Serialize)]
        struct Point {
            fpr: f64,
            tpr: f64,
        }
        to_csv(&self.roc.iter().map(|&(fpr, tpr)| Point { fpr, tpr }).collect::<Vec<_>>())
    }

    /// `report.txt`, `slides.csv`, `roc.csv` and `roc.png` under `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        for (name, text) in [
            ("report.txt", self.to_text()),
            ("slides.csv", self.slides_csv()?),
            ("roc.csv", self.roc_csv()?),
        ] {
            let p = dir.join(name);
            std::fs::write(&p, text).map_err(io_err(&p))?;
        }
        if !self.roc.is_empty() {
            roc_png(&self.roc, &dir.join("roc.png"))?;
        }
        Ok(())
    }
}

pub fn to_csv<S: Serialize>(rows: &[S]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| HarnessError::Data(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| HarnessError::Data(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| HarnessError::Data(e.to_string()))
}

pub fn evaluate<M: SlideClassifier>(
    name: &str,
    model: &M,
    store: &ParamStore<f32>,
    samples: &[SlideSample],
    pad_multiple: usize,
) -> Result<EvalReport> {
    let scored = predict(model, store, samples, pad_multiple)?;
    let slides = samples
        .iter()
        .zip(scored)
        .map(|(s, p)| SlideScore {
            slide_id: s.slide_id.clone(),
            label: s.label,
            score: p.score,
            stream_score: p.stream_score,
            pixel_count: s.pixel_count,
        })
        .collect();
    Ok(EvalReport::from_scores(name, store.count_trainable(), slides))
}
