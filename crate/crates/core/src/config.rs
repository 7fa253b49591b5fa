//! Flat `key = value` run configuration.
//!
//! One file configures data generation, the model, training and the loss.
//! Unknown keys are rejected, and [`RunConfig::to_text`] writes the resolved
//! configuration with every default filled in, which parses back to the
//! same value.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::attribute_schema::{AttributeVocabulary, Category};
use crate::checkpoint::parse_stage_layers;
use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::model::{ModelConfig, NullDescription};
use crate::synthdata::GenConfig;
use crate::trainer::TrainConfig;

/// Hyperparameter bundles selected by the `preset` key.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    /// Desk-scale settings that train from scratch in seconds.
    Toy,
    /// Full-scale architecture and optimizer settings.
    Paper,
}

impl Preset {
    pub fn name(self) -> &'static str {
        match self {
            Preset::Toy => "toy",
            Preset::Paper => "paper",
        }
    }
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "toy" => Ok(Preset::Toy),
            "paper" => Ok(Preset::Paper),
            other => Err(Error::Config(format!("unknown preset `{other}` (expected toy or paper)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub preset: Preset,
    pub seed: u64,
    /// Vocabulary file; `None` uses the bundled 105-label vocabulary.
    pub vocabulary: Option<PathBuf>,
    pub gen: GenConfig,
    /// Architecture; `vocab_size` and `num_classes` are filled in from the
    /// vocabulary and training split when a model is built.
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub loss: LossConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::preset(Preset::Toy)
    }
}

fn parse<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("invalid value `{v}` for `{key}`")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(Error::Config(format!("`{key}` expects true or false, got `{v}`"))),
    }
}

fn parse_pair(key: &str, v: &str) -> Result<(f64, f64)> {
    let (a, b) = v
        .split_once(',')
        .ok_or_else(|| Error::Config(format!("`{key}` expects `lo,hi`, got `{v}`")))?;
    Ok((parse(key, a.trim())?, parse(key, b.trim())?))
}

fn parse_list(key: &str, v: &str) -> Result<Vec<usize>> {
    if v.trim().is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|x| parse(key, x.trim())).collect()
}

const RETENTION_PREFIX: &str = "retention_prob.";

impl RunConfig {
    pub fn preset(preset: Preset) -> Self {
        let mut gen = GenConfig::default();
        let mut train = TrainConfig::default();
        let model = match preset {
            Preset::Toy => {
                let mut m = ModelConfig::toy(0, 0);
                m.embed_dim = 32;
                m.heads = 4;
                m.mlp_hidden = 64;
                train.optimizer = "sgd".into();
                train.base_lr = 0.01;
                train.warmup_lr = 0.01 / 25.6;
                train.weight_decay = 5e-4;
                train.warmup_epochs = 3;
                train.decay_epochs = Vec::new();
                train.decay_factor = 10.0;
                train.null_description_rate = 0.5;
                m.null_description = NullDescription::Learned;
                m
            }
            Preset::Paper => {
                let m = ModelConfig::paper(0, 0);
                gen.height = m.height;
                gen.width = m.width;
                gen.patch_size = m.patch_size;
                m
            }
        };
        Self {
            preset,
            seed: 0,
            vocabulary: None,
            gen,
            model,
            train,
            loss: LossConfig::default(),
        }
    }

    /// Parse configuration text. A `preset` line, wherever it appears,
    /// selects the defaults the other keys override.
    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let mut pairs = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::parse(origin, n + 1, format!("expected `key = value`, got `{line}`")))?;
            pairs.push((n + 1, k.trim().to_string(), v.trim().to_string()));
        }
        let preset = match pairs.iter().rev().find(|(_, k, _)| k == "preset") {
            Some((_, _, v)) => v.parse()?,
            None => Preset::Toy,
        };
        let mut cfg = Self::preset(preset);
        for (line, k, v) in &pairs {
            cfg.set(k, v).map_err(|e| Error::parse(origin, *line, e.to_string()))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    /// Set one key. Unknown keys are an error.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let (g, m, t, l) = (&mut self.gen, &mut self.model, &mut self.train, &mut self.loss);
        match key {
            "preset" => {
                let p: Preset = v.parse()?;
                if p != self.preset {
                    return Err(Error::Config("`preset` may only be given once".into()));
                }
            }
            "seed" => self.seed = parse(key, v)?,
            "vocabulary" => self.vocabulary = (!v.is_empty()).then(|| PathBuf::from(v)),
            "workers" => t.workers = parse(key, v)?,

            "num_identities" => g.num_identities = parse(key, v)?,
            "num_train_identities" => g.num_train_identities = parse(key, v)?,
            "outfits_per_identity" => g.outfits_per_identity = parse(key, v)?,
            "images_per_outfit" => g.images_per_outfit = parse(key, v)?,
            "num_cameras" => g.num_cameras = parse(key, v)?,
            "image_height" => g.height = parse(key, v)?,
            "image_width" => g.width = parse(key, v)?,
            "cloth_palette" => g.cloth_palette = parse(key, v)?,
            "jitter" => g.jitter = parse(key, v)?,
            "retention_prob" => {
                let p: f64 = parse(key, v)?;
                *g = g.clone().with_retention(p);
            }

            "patch_size" => m.patch_size = parse(key, v)?,
            "embed_dim" => m.embed_dim = parse(key, v)?,
            "heads" => m.heads = parse(key, v)?,
            "mlp_hidden" => m.mlp_hidden = parse(key, v)?,
            "stage_layers" => m.stage_layers = parse_stage_layers(v)?,
            "desc_tokens" => m.desc_tokens = parse(key, v)?,
            "null_description" => m.null_description = v.parse()?,

            "ids_per_batch" => t.ids_per_batch = parse(key, v)?,
            "imgs_per_id" => t.imgs_per_id = parse(key, v)?,
            "epochs" => t.epochs = parse(key, v)?,
            "steps_per_epoch" => t.steps_per_epoch = parse(key, v)?,
            "optimizer" => t.optimizer = v.to_string(),
            "momentum" => t.momentum = parse(key, v)?,
            "weight_decay" => t.weight_decay = parse(key, v)?,
            "base_lr" => t.base_lr = parse(key, v)?,
            "warmup_lr" => t.warmup_lr = parse(key, v)?,
            "warmup_epochs" => t.warmup_epochs = parse(key, v)?,
            "decay_epochs" => t.decay_epochs = parse_list(key, v)?,
            "decay_factor" => t.decay_factor = parse(key, v)?,
            "description_policy" => t.description_policy = v.to_string(),
            "mask_ratio" => t.mask_ratio = parse(key, v)?,
            "noise_ratio" => t.noise_ratio = parse(key, v)?,
            "noise_model" => t.noise_model = v.to_string(),
            "freeze_noise" => t.freeze_noise = parse_bool(key, v)?,
            "null_description_rate" => t.null_description_rate = parse(key, v)?,
            "random_crop" => t.random_crop = parse_bool(key, v)?,
            "crop_scale" => t.crop_scale = parse_pair(key, v)?,
            "random_erasing" => t.random_erasing = parse_bool(key, v)?,
            "erasing_prob" => t.erasing_prob = parse(key, v)?,
            "erasing_area" => t.erasing_area = parse_pair(key, v)?,
            "checkpoint_every" => t.checkpoint_every = parse(key, v)?,

            "lambda_id" => l.lambda_id = parse(key, v)?,
            "lambda_tri" => l.lambda_tri = parse(key, v)?,
            "margin" => l.margin = parse(key, v)?,

            other => match other.strip_prefix(RETENTION_PREFIX) {
                Some(cat) => {
                    let cat: Category = cat.parse()?;
                    if cat.is_cloth_related() {
                        return Err(Error::Config(format!(
                            "retention_prob applies to cloth-irrelevant categories, not {cat}"
                        )));
                    }
                    g.retention_prob.insert(cat, parse(key, v)?);
                }
                None => return Err(Error::Config(format!("unknown config key `{other}`"))),
            },
        }
        Ok(())
    }

    /// Cross-module consistency plus each module's own validation.
    pub fn validate(&self) -> Result<()> {
        let mut gen = self.gen.clone();
        gen.patch_size = self.model.patch_size;
        gen.validate()?;
        let mut model = self.model.clone();
        model.height = gen.height;
        model.width = gen.width;
        model.vocab_size = model.vocab_size.max(1);
        model.num_classes = model.num_classes.max(1);
        model.validate()?;
        self.train.validate()?;
        self.loss.validate()
    }

    /// Generator settings with the run seed and the model's patch size.
    pub fn gen_config(&self) -> GenConfig {
        let mut g = self.gen.clone();
        g.seed = self.seed;
        g.patch_size = self.model.patch_size;
        g
    }

    pub fn train_config(&self) -> TrainConfig {
        let mut t = self.train.clone();
        t.seed = self.seed;
        t
    }

    /// Model architecture for a given vocabulary and class count.
    pub fn model_config(&self, vocab_size: usize, num_classes: usize) -> ModelConfig {
        let mut m = self.model.clone();
        m.height = self.gen.height;
        m.width = self.gen.width;
        m.vocab_size = vocab_size;
        m.num_classes = num_classes;
        m
    }

    pub fn vocabulary(&self) -> Result<AttributeVocabulary> {
        match &self.vocabulary {
            Some(p) => AttributeVocabulary::load(p),
            None => Ok(AttributeVocabulary::bundled()),
        }
    }

    /// Every key with its resolved value, in a fixed order.
    pub fn to_text(&self) -> String {
        let (g, m, t, l) = (&self.gen, &self.model, &self.train, &self.loss);
        let list = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        let mut out = String::new();
        let mut section = |title: &str, rows: Vec<(String, String)>| {
            let _ = writeln!(out, "# {title}");
            for (k, v) in rows {
                let _ = writeln!(out, "{k} = {v}");
            }
            out.push('\n');
        };
        let s = |k: &str, v: String| (k.to_string(), v);
        section(
            "run",
            vec![
                s("preset", self.preset.name().into()),
                s("seed", self.seed.to_string()),
                s(
                    "vocabulary",
                    self.vocabulary.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
                ),
                s("workers", t.workers.to_string()),
            ],
        );
        let mut data = vec![
            s("num_identities", g.num_identities.to_string()),
            s("num_train_identities", g.num_train_identities.to_string()),
            s("outfits_per_identity", g.outfits_per_identity.to_string()),
            s("images_per_outfit", g.images_per_outfit.to_string()),
            s("num_cameras", g.num_cameras.to_string()),
            s("image_height", g.height.to_string()),
            s("image_width", g.width.to_string()),
            s("cloth_palette", g.cloth_palette.to_string()),
            s("jitter", g.jitter.to_string()),
        ];
        for (cat, p) in &g.retention_prob {
            data.push((format!("{RETENTION_PREFIX}{cat}"), p.to_string()));
        }
        section("data", data);
        section(
            "model",
            vec![
                s("patch_size", m.patch_size.to_string()),
                s("embed_dim", m.embed_dim.to_string()),
                s("heads", m.heads.to_string()),
                s("mlp_hidden", m.mlp_hidden.to_string()),
                s("stage_layers", list(&m.stage_layers)),
                s("desc_tokens", m.desc_tokens.to_string()),
                s("null_description", m.null_description.name().into()),
            ],
        );
        section(
            "training",
            vec![
                s("ids_per_batch", t.ids_per_batch.to_string()),
                s("imgs_per_id", t.imgs_per_id.to_string()),
                s("epochs", t.epochs.to_string()),
                s("steps_per_epoch", t.steps_per_epoch.to_string()),
                s("optimizer", t.optimizer.clone()),
                s("momentum", t.momentum.to_string()),
                s("weight_decay", t.weight_decay.to_string()),
                s("base_lr", t.base_lr.to_string()),
                s("warmup_lr", t.warmup_lr.to_string()),
                s("warmup_epochs", t.warmup_epochs.to_string()),
                s("decay_epochs", list(&t.decay_epochs)),
                s("decay_factor", t.decay_factor.to_string()),
                s("description_policy", t.description_policy.clone()),
                s("mask_ratio", t.mask_ratio.to_string()),
                s("noise_ratio", t.noise_ratio.to_string()),
                s("noise_model", t.noise_model.clone()),
                s("freeze_noise", t.freeze_noise.to_string()),
                s("null_description_rate", t.null_description_rate.to_string()),
                s("random_crop", t.random_crop.to_string()),
                s("crop_scale", format!("{},{}", t.crop_scale.0, t.crop_scale.1)),
                s("random_erasing", t.random_erasing.to_string()),
                s("erasing_prob", t.erasing_prob.to_string()),
                s("erasing_area", format!("{},{}", t.erasing_area.0, t.erasing_area.1)),
                s("checkpoint_every", t.checkpoint_every.to_string()),
            ],
        );
        section(
            "loss",
            vec![
                s("lambda_id", l.lambda_id.to_string()),
                s("lambda_tri", l.lambda_tri.to_string()),
                s("margin", l.margin.to_string()),
            ],
        );
        out
    }
}
