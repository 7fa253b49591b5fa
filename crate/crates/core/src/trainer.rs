//! PK sampling, learning-rate schedule, augmentation and the training loop.
//!
//! Per-sample forward and backward passes run in parallel, but each sample
//! writes its own gradient buffer and the buffers are summed in batch order,
//! so the result does not depend on the thread count.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use image::imageops::{self, FilterType};
use image::{Rgb, RgbImage};
use ndarray::Array2;
use rand::seq::index::sample;
use rand::Rng as _;
use rayon::prelude::*;

use crate::attribute_schema::{AttributeVector, AttributeVocabulary};
use crate::checkpoint::Checkpoint;
use crate::dem::{build_description, description_policies, noise_models};
use crate::error::{Error, Result};
use crate::losses::{total_loss_grad, LossBreakdown, LossConfig};
use crate::model::{ForwardCache, ForwardOutput, Model, ModelConfig, ModelParams};
use crate::registry::Registry;
use crate::rng::{stream, Rng};
use crate::synthdata::{DatasetManifest, SampleRecord, Split};

pub const LOG_FILE: &str = "train_log.csv";
pub const FINAL_CHECKPOINT: &str = "model.ckpt";
pub const LAST_GOOD_CHECKPOINT: &str = "last_good.ckpt";

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub ids_per_batch: usize,
    pub imgs_per_id: usize,
    pub epochs: usize,
    /// Batches per epoch; 0 means `train images / batch size`.
    pub steps_per_epoch: usize,
    pub optimizer: String,
    pub momentum: f64,
    pub weight_decay: f64,
    pub base_lr: f64,
    pub warmup_lr: f64,
    pub warmup_epochs: usize,
    pub decay_epochs: Vec<usize>,
    pub decay_factor: f64,
    pub description_policy: String,
    pub mask_ratio: f64,
    pub noise_ratio: f64,
    pub noise_model: String,
    /// Draw each sample's description noise once instead of every epoch.
    pub freeze_noise: bool,
    /// Probability of replacing a training description by the null one.
    pub null_description_rate: f64,
    pub random_crop: bool,
    /// Area fraction range of the crop.
    pub crop_scale: (f64, f64),
    pub random_erasing: bool,
    pub erasing_prob: f64,
    /// Area fraction range of the erased rectangle.
    pub erasing_area: (f64, f64),
    /// Save a checkpoint every this many epochs; 0 disables.
    pub checkpoint_every: usize,
    /// Worker threads; 1 gives a single-worker run.
    pub workers: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            ids_per_batch: 2,
            imgs_per_id: 4,
            epochs: 60,
            steps_per_epoch: 0,
            optimizer: "sgd".into(),
            momentum: 0.9,
            weight_decay: 5e-2,
            base_lr: 2e-5,
            warmup_lr: 7.8125e-7,
            warmup_epochs: 5,
            decay_epochs: vec![40, 60],
            decay_factor: 100.0,
            description_policy: "masked".into(),
            mask_ratio: 1.0,
            noise_ratio: 0.1,
            noise_model: "replace".into(),
            freeze_noise: false,
            null_description_rate: 0.0,
            random_crop: true,
            crop_scale: (0.8, 1.0),
            random_erasing: true,
            erasing_prob: 0.5,
            erasing_area: (0.02, 0.2),
            checkpoint_every: 10,
            workers: 1,
            seed: 0,
        }
    }
}

fn check_unit(name: &str, v: f64) -> Result<()> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(Error::Config(format!("{name} must lie in [0, 1], got {v}")))
    }
}

fn check_range(name: &str, (lo, hi): (f64, f64)) -> Result<()> {
    if 0.0 < lo && lo <= hi && hi <= 1.0 {
        Ok(())
    } else {
        Err(Error::Config(format!("{name} needs 0 < lo <= hi <= 1, got ({lo}, {hi})")))
    }
}

impl TrainConfig {
    pub fn batch_size(&self) -> usize {
        self.ids_per_batch * self.imgs_per_id
    }

    pub fn validate(&self) -> Result<()> {
        if self.ids_per_batch < 2 || self.imgs_per_id < 2 {
            return Err(Error::Config(
                "PK batches need at least 2 identities with at least 2 images each".into(),
            ));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        for (name, v) in [
            ("base_lr", self.base_lr),
            ("warmup_lr", self.warmup_lr),
            ("decay_factor", self.decay_factor),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.weight_decay >= 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("weight_decay must be >= 0 and momentum in [0, 1)".into()));
        }
        check_unit("mask_ratio", self.mask_ratio)?;
        check_unit("noise_ratio", self.noise_ratio)?;
        check_unit("null_description_rate", self.null_description_rate)?;
        check_unit("erasing_prob", self.erasing_prob)?;
        check_range("crop_scale", self.crop_scale)?;
        check_range("erasing_area", self.erasing_area)?;
        if self.workers == 0 {
            return Err(Error::Config("workers must be at least 1".into()));
        }
        description_policies().create(&self.description_policy)?;
        noise_models().create(&self.noise_model)?;
        optimizers().create(&self.optimizer)?;
        Ok(())
    }
}

/// Learning rate at `step` of `epoch`: linear warmup from `warmup_lr` to
/// `base_lr`, then a division by `decay_factor` at every decay epoch reached.
pub fn lr_at(epoch: usize, step: usize, steps_per_epoch: usize, cfg: &TrainConfig) -> f64 {
    if epoch < cfg.warmup_epochs {
        let total = (cfg.warmup_epochs * steps_per_epoch.max(1)) as f64;
        let done = (epoch * steps_per_epoch.max(1) + step) as f64;
        return cfg.warmup_lr + (cfg.base_lr - cfg.warmup_lr) * (done / total);
    }
    let drops = cfg.decay_epochs.iter().filter(|&&e| epoch >= e).count();
    cfg.base_lr / cfg.decay_factor.powi(drops as i32)
}

/// Training record indices grouped by identity, in ascending identity order.
#[derive(Debug, Clone)]
pub struct IdentityIndex {
    pub groups: BTreeMap<usize, Vec<usize>>,
}

impl IdentityIndex {
    pub fn new(records: &[&SampleRecord]) -> Self {
        let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, r) in records.iter().enumerate() {
            groups.entry(r.identity_id).or_default().push(i);
        }
        Self { groups }
    }
}

/// One PK batch as record indices: `p` distinct identities, `k` images each,
/// grouped by identity. Images are drawn without replacement when an
/// identity has at least `k`, with replacement otherwise.
pub fn pk_sample(index: &IdentityIndex, p: usize, k: usize, rng: &mut Rng) -> Result<Vec<usize>> {
    let ids: Vec<&Vec<usize>> = index.groups.values().filter(|g| !g.is_empty()).collect();
    if ids.len() < p {
        return Err(Error::Sampling(format!(
            "need {p} identities for a batch, the split has {}",
            ids.len()
        )));
    }
    let mut batch = Vec::with_capacity(p * k);
    for i in sample(rng, ids.len(), p).iter() {
        let imgs = ids[i];
        if imgs.len() >= k {
            batch.extend(sample(rng, imgs.len(), k).iter().map(|j| imgs[j]));
        } else {
            batch.extend((0..k).map(|_| imgs[rng.gen_range(0..imgs.len())]));
        }
    }
    Ok(batch)
}

/// Rectangle `(x, y, width, height)` in pixels.
pub type Rect = (u32, u32, u32, u32);

fn random_rect(w: u32, h: u32, (lo, hi): (f64, f64), rng: &mut Rng) -> Rect {
    let area = f64::from(w * h);
    for _ in 0..10 {
        let target = area * rng.gen_range(lo..=hi);
        let aspect = rng.gen_range((0.3f64).ln()..=(1.0 / 0.3f64).ln()).exp();
        let rw = (target * aspect).sqrt().round() as u32;
        let rh = (target / aspect).sqrt().round() as u32;
        if rw >= 1 && rh >= 1 && rw <= w && rh <= h {
            return (rng.gen_range(0..=w - rw), rng.gen_range(0..=h - rh), rw, rh);
        }
    }
    // fall back to a centred square of the lower bound
    let side = ((area * lo).sqrt().round() as u32).clamp(1, w.min(h));
    ((w - side) / 2, (h - side) / 2, side, side)
}

/// Crop a random region of the given area fraction and resize it back.
pub fn random_resized_crop(img: &RgbImage, scale: (f64, f64), rng: &mut Rng) -> RgbImage {
    let (w, h) = img.dimensions();
    let target = f64::from(w * h) * rng.gen_range(scale.0..=scale.1);
    let aspect = rng.gen_range((0.75f64).ln()..=(4.0 / 3.0f64).ln()).exp();
    let cw = ((target * aspect).sqrt().round() as u32).clamp(1, w);
    let ch = ((target / aspect).sqrt().round() as u32).clamp(1, h);
    let x = rng.gen_range(0..=w - cw);
    let y = rng.gen_range(0..=h - ch);
    let crop = imageops::crop_imm(img, x, y, cw, ch).to_image();
    imageops::resize(&crop, w, h, FilterType::Triangle)
}

/// Fill one random rectangle with random pixels; returns the rectangle.
pub fn random_erase(img: &mut RgbImage, area: (f64, f64), rng: &mut Rng) -> Rect {
    let (w, h) = img.dimensions();
    let rect = random_rect(w, h, area, rng);
    let (x0, y0, rw, rh) = rect;
    for y in y0..y0 + rh {
        for x in x0..x0 + rw {
            img.put_pixel(x, y, Rgb([rng.gen(), rng.gen(), rng.gen()]));
        }
    }
    rect
}

/// Training-time augmentation. With both switches off the image is returned
/// unchanged and `rng` is not touched.
pub fn augment(img: &RgbImage, rng: &mut Rng, cfg: &TrainConfig) -> RgbImage {
    let mut out = if cfg.random_crop {
        random_resized_crop(img, cfg.crop_scale, rng)
    } else {
        img.clone()
    };
    if cfg.random_erasing && rng.gen::<f64>() < cfg.erasing_prob {
        random_erase(&mut out, cfg.erasing_area, rng);
    }
    out
}

/// Parameter update rule. State is created lazily on the first step.
pub trait Optimizer: Send {
    fn name(&self) -> &'static str;

    fn step(&mut self, params: &mut ModelParams, grads: &ModelParams, lr: f64, cfg: &TrainConfig);
}

/// Stochastic gradient descent with heavy-ball momentum and L2 weight decay.
#[derive(Default)]
pub struct Sgd {
    velocity: Option<ModelParams>,
}

impl Optimizer for Sgd {
    fn name(&self) -> &'static str {
        "sgd"
    }

    fn step(&mut self, params: &mut ModelParams, grads: &ModelParams, lr: f64, cfg: &TrainConfig) {
        let velocity = self.velocity.get_or_insert_with(|| {
            let mut v = grads.clone();
            for t in v.tensors_mut() {
                t.fill(0.0);
            }
            v
        });
        let g = grads.tensors();
        for ((p, v), (_, _, g)) in params.tensors_mut().into_iter().zip(velocity.tensors_mut()).zip(g) {
            for ((p, v), g) in p.iter_mut().zip(v.iter_mut()).zip(g) {
                *v = cfg.momentum * *v + g + cfg.weight_decay * *p;
                *p -= lr * *v;
            }
        }
    }
}

/// Adam with decoupled weight decay; `momentum` is used as beta1.
#[derive(Default)]
pub struct AdamW {
    state: Option<(ModelParams, ModelParams)>,
    t: i32,
}

impl Optimizer for AdamW {
    fn name(&self) -> &'static str {
        "adamw"
    }

    fn step(&mut self, params: &mut ModelParams, grads: &ModelParams, lr: f64, cfg: &TrainConfig) {
        const BETA2: f64 = 0.999;
        const EPS: f64 = 1e-8;
        let (m, v) = self.state.get_or_insert_with(|| {
            let mut z = grads.clone();
            for t in z.tensors_mut() {
                t.fill(0.0);
            }
            (z.clone(), z)
        });
        self.t += 1;
        let beta1 = cfg.momentum;
        let c1 = 1.0 - beta1.powi(self.t);
        let c2 = 1.0 - BETA2.powi(self.t);
        let g = grads.tensors();
        for (((p, m), v), (_, _, g)) in params
            .tensors_mut()
            .into_iter()
            .zip(m.tensors_mut())
            .zip(v.tensors_mut())
            .zip(g)
        {
            for (((p, m), v), g) in p.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(g) {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = BETA2 * *v + (1.0 - BETA2) * g * g;
                *p -= lr * ((*m / c1) / ((*v / c2).sqrt() + EPS) + cfg.weight_decay * *p);
            }
        }
    }
}

pub fn optimizers() -> Registry<dyn Optimizer> {
    Registry::<dyn Optimizer>::new("optimizer")
        .register("sgd", || Box::<Sgd>::default())
        .register("adamw", || Box::<AdamW>::default())
}

/// One training example after augmentation and description building.
pub struct Example {
    pub image: RgbImage,
    /// `None` feeds the null description.
    pub description: Option<AttributeVector>,
    pub label: usize,
}

/// Loss and summed parameter gradients of one batch.
pub fn batch_gradients(
    model: &Model,
    examples: &[Example],
    loss_cfg: &LossConfig,
) -> Result<(LossBreakdown, ModelParams)> {
    let forward: Vec<(ForwardOutput, ForwardCache)> = examples
        .par_iter()
        .map(|ex| model.forward_cached(&ex.image, ex.description.as_ref()))
        .collect::<Result<_>>()?;
    let b = examples.len();
    let (d, c) = (model.config.embed_dim, model.config.num_classes);
    let mut logits = Array2::zeros((b, c));
    let mut feats = Array2::zeros((b, d));
    for (i, (out, _)) in forward.iter().enumerate() {
        logits.row_mut(i).assign(&out.logits);
        feats.row_mut(i).assign(&out.fused);
    }
    let labels: Vec<usize> = examples.iter().map(|e| e.label).collect();
    let (loss, dlogits, dfeats) = total_loss_grad(&logits, &feats, &labels, loss_cfg)?;
    let partials: Vec<ModelParams> = forward
        .par_iter()
        .enumerate()
        .map(|(i, (out, cache))| {
            let mut g = ModelParams::zeros(&model.config);
            model.backward(out, cache, &dfeats.row(i).to_owned(), &dlogits.row(i).to_owned(), &mut g);
            g
        })
        .collect();
    let mut grads = ModelParams::zeros(&model.config);
    for g in &partials {
        grads.add_assign(g);
    }
    Ok((loss, grads))
}

/// Decode every image of `records`, in order.
pub fn load_images(manifest: &DatasetManifest, records: &[&SampleRecord]) -> Result<Vec<RgbImage>> {
    records
        .par_iter()
        .map(|r| {
            let path = manifest.image_path(r);
            image::open(&path)
                .map(|img| img.to_rgb8())
                .map_err(|source| Error::Image { path, source })
        })
        .collect()
}

/// Training split with decoded images and dense class labels.
pub struct TrainSet<'a> {
    pub records: Vec<&'a SampleRecord>,
    pub images: Vec<RgbImage>,
    /// Dense label per record, by ascending identity id.
    pub labels: Vec<usize>,
    pub index: IdentityIndex,
}

impl<'a> TrainSet<'a> {
    pub fn from_manifest(manifest: &'a DatasetManifest) -> Result<Self> {
        let records = manifest.split(Split::Train);
        let images = load_images(manifest, &records)?;
        Self::new(records, images)
    }

    pub fn new(records: Vec<&'a SampleRecord>, images: Vec<RgbImage>) -> Result<Self> {
        if records.len() != images.len() {
            return Err(Error::Argument("one image per record required".into()));
        }
        let index = IdentityIndex::new(&records);
        if index.groups.len() < 2 {
            return Err(Error::Sampling(format!(
                "training needs at least 2 identities, found {}",
                index.groups.len()
            )));
        }
        let dense: BTreeMap<usize, usize> = index.groups.keys().enumerate().map(|(i, &id)| (id, i)).collect();
        let labels = records.iter().map(|r| dense[&r.identity_id]).collect();
        Ok(Self {
            records,
            images,
            labels,
            index,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.index.groups.len()
    }
}

/// Result of a finished training run.
pub struct TrainOutcome {
    pub model: Model,
    /// One entry per optimizer step.
    pub losses: Vec<LossBreakdown>,
    pub checkpoint: PathBuf,
}

fn write_log_row(log: &mut fs::File, path: &Path, step: usize, l: &LossBreakdown) -> Result<()> {
    writeln!(log, "{step},{:?},{:?},{:?}", l.id, l.triplet, l.total).map_err(|e| Error::io(path, e))
}

/// Run the full training loop and write `train_log.csv`, periodic
/// checkpoints and `model.ckpt` into `out_dir`.
pub fn train(
    data: &TrainSet<'_>,
    vocab: &AttributeVocabulary,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    loss_cfg: &LossConfig,
    out_dir: &Path,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    loss_cfg.validate()?;
    let policy = description_policies().create(&cfg.description_policy)?;
    let mut model_cfg = model_cfg.clone();
    model_cfg.use_description = model_cfg.use_description && policy.uses_description();
    if model_cfg.num_classes != data.num_classes() {
        return Err(Error::Config(format!(
            "model has {} classes but the training split has {} identities",
            model_cfg.num_classes,
            data.num_classes()
        )));
    }
    if model_cfg.vocab_size != vocab.len() {
        return Err(Error::Config(format!(
            "model expects {} attributes, vocabulary has {}",
            model_cfg.vocab_size,
            vocab.len()
        )));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    pool.install(|| train_inner(data, vocab, model_cfg, policy.effective_mask_ratio(cfg.mask_ratio), cfg, loss_cfg, out_dir))
}

fn train_inner(
    data: &TrainSet<'_>,
    vocab: &AttributeVocabulary,
    model_cfg: ModelConfig,
    mask_ratio: f64,
    cfg: &TrainConfig,
    loss_cfg: &LossConfig,
    out_dir: &Path,
) -> Result<TrainOutcome> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let noise = noise_models().create(&cfg.noise_model)?;
    let source = {
        let mut t = crate::dem::TableSource::new();
        for r in &data.records {
            t.insert(r.sample_id.clone(), r.attrs.clone());
        }
        t
    };
    let mut model = Model::new(model_cfg, &mut stream(cfg.seed, "init", &[]))?;
    let tags = [
        ("description_policy", cfg.description_policy.clone()),
        ("mask_ratio", mask_ratio.to_string()),
        ("noise_ratio", cfg.noise_ratio.to_string()),
        ("seed", cfg.seed.to_string()),
    ];
    let checkpoint = |model: &Model, epoch: usize| {
        let mut ck = Checkpoint::new(model.clone());
        for (k, v) in &tags {
            ck.meta.insert(k.to_string(), v.clone());
        }
        ck.meta.insert("epoch".into(), epoch.to_string());
        ck
    };
    let mut optimizer = optimizers().create(&cfg.optimizer)?;
    let steps = if cfg.steps_per_epoch > 0 {
        cfg.steps_per_epoch
    } else {
        (data.records.len() / cfg.batch_size()).max(1)
    };

    let log_path = out_dir.join(LOG_FILE);
    let mut log = fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    writeln!(log, "step,L_id,L_tri,L_total").map_err(|e| Error::io(&log_path, e))?;

    let mut losses = Vec::with_capacity(cfg.epochs * steps);
    let mut global = 0usize;
    for epoch in 0..cfg.epochs {
        let mut batch_rng = stream(cfg.seed, "batches", &[epoch as u64]);
        for step in 0..steps {
            let batch = pk_sample(&data.index, cfg.ids_per_batch, cfg.imgs_per_id, &mut batch_rng)?;
            let examples = batch
                .iter()
                .enumerate()
                .map(|(slot, &i)| {
                    let path = [epoch as u64, step as u64, slot as u64];
                    let mut aug_rng = stream(cfg.seed, "augment", &path);
                    let image = augment(&data.images[i], &mut aug_rng, cfg);
                    let mut noise_rng = if cfg.freeze_noise {
                        stream(cfg.seed, "noise-frozen", &[i as u64])
                    } else {
                        stream(cfg.seed, "noise", &path)
                    };
                    let description = if !model.config.use_description
                        || stream(cfg.seed, "null-description", &path).gen::<f64>() < cfg.null_description_rate
                    {
                        None
                    } else {
                        let rec = data.records[i];
                        Some(
                            build_description(
                                &rec.sample_id,
                                &source,
                                vocab,
                                mask_ratio,
                                cfg.noise_ratio,
                                noise.as_ref(),
                                &mut noise_rng,
                            )?
                            .bits,
                        )
                    };
                    Ok(Example {
                        image,
                        description,
                        label: data.labels[i],
                    })
                })
                .collect::<Result<Vec<_>>>()?;

            // the forward pass reports non-finite activations as an error;
            // both that and a non-finite loss end the run the same way
            let result = match batch_gradients(&model, &examples, loss_cfg) {
                Ok((loss, grads)) if loss.total.is_finite() && grads.is_finite() => Some((loss, grads)),
                Ok(_) | Err(Error::Numeric(_)) => None,
                Err(e) => return Err(e),
            };
            let Some((loss, grads)) = result else {
                let keep = out_dir.join(LAST_GOOD_CHECKPOINT);
                let mut ck = checkpoint(&model, epoch);
                ck.meta.insert("step".into(), global.to_string());
                ck.save(&keep)?;
                return Err(Error::Numeric(format!(
                    "non-finite loss at epoch {epoch} step {step}; last good parameters kept in {}",
                    keep.display()
                )));
            };
            write_log_row(&mut log, &log_path, global, &loss)?;
            losses.push(loss);
            let lr = lr_at(epoch, step, steps, cfg);
            optimizer.step(&mut model.params, &grads, lr, cfg);
            global += 1;
        }
        let recent = &losses[losses.len() - steps..];
        let mean = |f: fn(&LossBreakdown) -> f64| recent.iter().map(f).sum::<f64>() / steps as f64;
        log::info!(
            "epoch {}/{}: L_id {:.4} L_tri {:.4} lr {:.3e}",
            epoch + 1,
            cfg.epochs,
            mean(|l| l.id),
            mean(|l| l.triplet),
            lr_at(epoch, steps - 1, steps, cfg)
        );
        if cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0 && epoch + 1 < cfg.epochs {
            checkpoint(&model, epoch + 1).save(&out_dir.join(format!("epoch_{:03}.ckpt", epoch + 1)))?;
        }
    }
    log.flush().map_err(|e| Error::io(&log_path, e))?;

    let path = out_dir.join(FINAL_CHECKPOINT);
    let mut ck = checkpoint(&model, cfg.epochs);
    ck.meta.insert("steps".into(), global.to_string());
    ck.save(&path)?;
    Ok(TrainOutcome {
        model: ck.model,
        losses,
        checkpoint: path,
    })
}
