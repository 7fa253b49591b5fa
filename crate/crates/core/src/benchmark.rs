//! The synthetic benchmark held in memory: render once, then train and score
//! any number of configurations against the same images.

use std::path::Path;

use image::RgbImage;

use crate::attribute_schema::AttributeVocabulary;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::evalproto::{cmc_and_map, embed_images, Metrics, Setting};
use crate::model::Model;
use crate::synthdata::{plan, render_all, DatasetManifest, GenConfig, SampleRecord, Split};
use crate::trainer::{train, TrainOutcome, TrainSet};

pub struct Benchmark {
    pub manifest: DatasetManifest,
    /// Parallel to `manifest.records`.
    pub images: Vec<RgbImage>,
}

/// A finished benchmark run.
pub struct BenchmarkRun {
    pub outcome: TrainOutcome,
    /// One entry per setting, in `Setting::ALL` order.
    pub metrics: Vec<Metrics>,
}

impl BenchmarkRun {
    pub fn metrics(&self, setting: Setting) -> &Metrics {
        self.metrics
            .iter()
            .find(|m| m.setting == setting)
            .expect("every setting is evaluated")
    }
}

impl Benchmark {
    pub fn render(gen: &GenConfig, vocab: &AttributeVocabulary) -> Result<Self> {
        let p = plan(gen, vocab, "")?;
        let images = render_all(&p, gen, vocab);
        Ok(Self {
            manifest: p.manifest,
            images,
        })
    }

    /// The dataset a run configuration describes.
    pub fn from_config(cfg: &RunConfig) -> Result<Self> {
        Self::render(&cfg.gen_config(), &cfg.vocabulary()?)
    }

    pub fn split(&self, split: Split) -> (Vec<&SampleRecord>, Vec<RgbImage>) {
        self.manifest
            .records
            .iter()
            .zip(&self.images)
            .filter(|(r, _)| r.split() == split)
            .map(|(r, i)| (r, i.clone()))
            .unzip()
    }

    pub fn train_set(&self) -> Result<TrainSet<'_>> {
        let (records, images) = self.split(Split::Train);
        TrainSet::new(records, images)
    }

    pub fn evaluate(&self, model: &Model, settings: &[Setting]) -> Result<Vec<Metrics>> {
        let (qr, qi) = self.split(Split::Query);
        let (gr, gi) = self.split(Split::Gallery);
        if qr.is_empty() {
            return Err(Error::Protocol("benchmark has no query split".into()));
        }
        let queries = embed_images(model, &qr, &qi)?;
        let gallery = embed_images(model, &gr, &gi)?;
        settings.iter().map(|&s| cmc_and_map(&queries, &gallery, s)).collect()
    }

    /// Train `cfg` on the training split and evaluate every setting.
    pub fn run(&self, cfg: &RunConfig, out_dir: &Path) -> Result<BenchmarkRun> {
        let data = self.train_set()?;
        let vocab = cfg.vocabulary()?;
        let model_cfg = cfg.model_config(vocab.len(), data.num_classes());
        let outcome = train(&data, &vocab, &model_cfg, &cfg.train_config(), &cfg.loss, out_dir)?;
        let metrics = self.evaluate(&outcome.model, &Setting::ALL)?;
        Ok(BenchmarkRun { outcome, metrics })
    }
}
