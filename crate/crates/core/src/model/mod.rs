//! The fusion network.
//!
//! ```text
//!  image -> patches -> [CLS | patch tokens] + pos1 -> stage 1 (L1 blocks) -> f_cls
//!                                                        |
//!  description -> linear -> K tokens                     | patch outputs
//!                              \                         v
//!            [DES | description tokens | patch tokens] + pos2
//!                              -> stage 2 (L2 blocks) -> f_des2
//!                              -> stage 3 (L3 blocks) -> f_des3
//!  fused = LayerNorm(w1 f_cls + w2 f_des2 + w3 f_des3 + b)
//!  logits = W fused + b
//! ```
//!
//! The stage-1 class token is not carried into the fusion sequence; it only
//! re-enters at aggregation. The aggregation is a width-1 one-dimensional
//! convolution over the three stage features treated as channels.

pub mod layers;

use std::fmt;
use std::str::FromStr;

use image::RgbImage;
use ndarray::{s, Array1, Array2, Axis};

use crate::attribute_schema::AttributeVector;
use crate::error::{Error, Result};
use crate::rng::Rng;
use layers::{normal, normal_vec, Block, BlockCache, LayerNorm, LayerNormCache, Linear};

/// What stands in for the description when none is supplied (inference).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NullDescription {
    /// The all-zeros attribute vector through the usual projection.
    Zeros,
    /// Dedicated learned tokens.
    Learned,
}

impl NullDescription {
    pub fn name(self) -> &'static str {
        match self {
            NullDescription::Zeros => "zeros",
            NullDescription::Learned => "learned",
        }
    }
}

impl FromStr for NullDescription {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "zeros" => Ok(NullDescription::Zeros),
            "learned" => Ok(NullDescription::Learned),
            other => Err(Error::Config(format!(
                "unknown null description `{other}` (expected zeros or learned)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub height: usize,
    pub width: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
    pub stage_layers: [usize; 3],
    /// Description tokens K.
    pub desc_tokens: usize,
    /// Attribute vocabulary size V.
    pub vocab_size: usize,
    /// Training identities C.
    pub num_classes: usize,
    /// When false the fusion sequence is `[DES | patch tokens]`.
    pub use_description: bool,
    pub null_description: NullDescription,
}

impl ModelConfig {
    /// 32x32 images, 8-pixel patches, 16-dim tokens, stages [2, 2, 1].
    pub fn toy(vocab_size: usize, num_classes: usize) -> Self {
        Self {
            height: 32,
            width: 32,
            patch_size: 8,
            embed_dim: 16,
            heads: 2,
            mlp_hidden: 32,
            stage_layers: [2, 2, 1],
            desc_tokens: 1,
            vocab_size,
            num_classes,
            use_description: true,
            null_description: NullDescription::Zeros,
        }
    }

    /// 224x224 images, 16-pixel patches, 24 layers split [10, 10, 4].
    pub fn paper(vocab_size: usize, num_classes: usize) -> Self {
        Self {
            height: 224,
            width: 224,
            patch_size: 16,
            embed_dim: 1024,
            heads: 16,
            mlp_hidden: 4096,
            stage_layers: [10, 10, 4],
            desc_tokens: 1,
            vocab_size,
            num_classes,
            use_description: true,
            null_description: NullDescription::Zeros,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.patch_size;
        if p == 0 || self.height % p != 0 || self.width % p != 0 || self.height == 0 || self.width == 0 {
            return Err(Error::Config(format!(
                "patch size {p} must divide image size {}x{}",
                self.height, self.width
            )));
        }
        if self.heads == 0 || self.embed_dim == 0 || self.embed_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "embed_dim {} must be a positive multiple of heads {}",
                self.embed_dim, self.heads
            )));
        }
        if self.stage_layers.contains(&0) {
            return Err(Error::Config("every stage needs at least one layer".into()));
        }
        if self.desc_tokens == 0 {
            return Err(Error::Config("desc_tokens must be at least 1".into()));
        }
        if self.vocab_size == 0 || self.num_classes == 0 || self.mlp_hidden == 0 {
            return Err(Error::Config(
                "vocab_size, num_classes and mlp_hidden must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Patch count N = H * W / P^2.
    pub fn num_patches(&self) -> usize {
        (self.height / self.patch_size) * (self.width / self.patch_size)
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * 3
    }

    pub fn stage1_len(&self) -> usize {
        1 + self.num_patches()
    }

    /// Description tokens actually present in the fusion sequence.
    pub fn active_desc_tokens(&self) -> usize {
        if self.use_description {
            self.desc_tokens
        } else {
            0
        }
    }

    pub fn fusion_len(&self) -> usize {
        1 + self.active_desc_tokens() + self.num_patches()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub patch: Linear,
    pub cls: Array1<f64>,
    pub pos1: Array2<f64>,
    pub des: Array1<f64>,
    /// `V x (K * D)`
    pub desc_proj: Linear,
    pub null_desc: Array2<f64>,
    pub pos2: Array2<f64>,
    pub stages: [Vec<Block>; 3],
    /// Width-1 convolution weights over the three stage channels.
    pub agg_w: Array1<f64>,
    pub agg_b: Array1<f64>,
    pub agg_ln: LayerNorm,
    /// `D x C`
    pub classifier: Linear,
}

impl ModelParams {
    pub fn init(cfg: &ModelConfig, rng: &mut Rng) -> Self {
        let d = cfg.embed_dim;
        let k = cfg.desc_tokens;
        let stage = |n: usize, rng: &mut Rng| -> Vec<Block> {
            (0..n).map(|_| Block::init(d, cfg.heads, cfg.mlp_hidden, rng)).collect()
        };
        let stages = [
            stage(cfg.stage_layers[0], rng),
            stage(cfg.stage_layers[1], rng),
            stage(cfg.stage_layers[2], rng),
        ];
        Self {
            patch: Linear::init(cfg.patch_dim(), d, 1.0, rng),
            cls: normal_vec(rng, d, 0.1),
            pos1: normal(rng, (cfg.stage1_len(), d), 0.1),
            des: normal_vec(rng, d, 0.1),
            desc_proj: Linear::init(cfg.vocab_size, k * d, 1.0, rng),
            null_desc: normal(rng, (k, d), 0.1),
            pos2: normal(rng, (cfg.fusion_len(), d), 0.1),
            stages,
            agg_w: Array1::from_elem(3, 1.0 / 3.0),
            agg_b: Array1::zeros(1),
            agg_ln: LayerNorm::new(d),
            classifier: Linear::init(d, cfg.num_classes, 1.0, rng),
        }
    }

    /// Same shapes as `init`, every entry zero; used as a gradient buffer.
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let d = cfg.embed_dim;
        let stage = |n: usize| -> Vec<Block> {
            (0..n).map(|_| Block::zeros(d, cfg.heads, cfg.mlp_hidden)).collect()
        };
        Self {
            patch: Linear::zeros(cfg.patch_dim(), d),
            cls: Array1::zeros(d),
            pos1: Array2::zeros((cfg.stage1_len(), d)),
            des: Array1::zeros(d),
            desc_proj: Linear::zeros(cfg.vocab_size, cfg.desc_tokens * d),
            null_desc: Array2::zeros((cfg.desc_tokens, d)),
            pos2: Array2::zeros((cfg.fusion_len(), d)),
            stages: [
                stage(cfg.stage_layers[0]),
                stage(cfg.stage_layers[1]),
                stage(cfg.stage_layers[2]),
            ],
            agg_w: Array1::zeros(3),
            agg_b: Array1::zeros(1),
            agg_ln: LayerNorm::zeros(d),
            classifier: Linear::zeros(d, cfg.num_classes),
        }
    }

    /// Every tensor with its dotted name and shape, in a fixed order.
    pub fn tensors(&self) -> Vec<(String, Vec<usize>, &[f64])> {
        let mut out = Vec::new();
        macro_rules! push {
            ($name:expr, $a:expr) => {
                out.push(($name.to_string(), $a.shape().to_vec(), $a.as_slice().expect("standard layout")))
            };
        }
        macro_rules! linear {
            ($name:expr, $l:expr) => {
                push!(format!("{}.w", $name), $l.w);
                push!(format!("{}.b", $name), $l.b);
            };
        }
        macro_rules! norm {
            ($name:expr, $l:expr) => {
                push!(format!("{}.gamma", $name), $l.gamma);
                push!(format!("{}.beta", $name), $l.beta);
            };
        }
        linear!("patch", self.patch);
        push!("cls", self.cls);
        push!("pos1", self.pos1);
        push!("des", self.des);
        linear!("desc_proj", self.desc_proj);
        push!("null_desc", self.null_desc);
        push!("pos2", self.pos2);
        for (si, stage) in self.stages.iter().enumerate() {
            for (bi, b) in stage.iter().enumerate() {
                let p = format!("stage{}.{}", si + 1, bi);
                norm!(format!("{p}.ln1"), b.ln1);
                linear!(format!("{p}.attn.q"), b.attn.q);
                linear!(format!("{p}.attn.k"), b.attn.k);
                linear!(format!("{p}.attn.v"), b.attn.v);
                linear!(format!("{p}.attn.o"), b.attn.o);
                norm!(format!("{p}.ln2"), b.ln2);
                linear!(format!("{p}.fc1"), b.fc1);
                linear!(format!("{p}.fc2"), b.fc2);
            }
        }
        push!("agg.w", self.agg_w);
        push!("agg.b", self.agg_b);
        norm!("agg.ln", self.agg_ln);
        linear!("classifier", self.classifier);
        out
    }

    /// Mutable views in the same order as [`ModelParams::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        macro_rules! push {
            ($a:expr) => {
                out.push($a.as_slice_mut().expect("standard layout"))
            };
        }
        push!(self.patch.w);
        push!(self.patch.b);
        push!(self.cls);
        push!(self.pos1);
        push!(self.des);
        push!(self.desc_proj.w);
        push!(self.desc_proj.b);
        push!(self.null_desc);
        push!(self.pos2);
        for stage in self.stages.iter_mut() {
            for b in stage.iter_mut() {
                push!(b.ln1.gamma);
                push!(b.ln1.beta);
                push!(b.attn.q.w);
                push!(b.attn.q.b);
                push!(b.attn.k.w);
                push!(b.attn.k.b);
                push!(b.attn.v.w);
                push!(b.attn.v.b);
                push!(b.attn.o.w);
                push!(b.attn.o.b);
                push!(b.ln2.gamma);
                push!(b.ln2.beta);
                push!(b.fc1.w);
                push!(b.fc1.b);
                push!(b.fc2.w);
                push!(b.fc2.b);
            }
        }
        push!(self.agg_w);
        push!(self.agg_b);
        push!(self.agg_ln.gamma);
        push!(self.agg_ln.beta);
        push!(self.classifier.w);
        push!(self.classifier.b);
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|(_, _, v)| v.len()).sum()
    }

    /// `self += other`, tensor by tensor.
    pub fn add_assign(&mut self, other: &ModelParams) {
        let src = other.tensors();
        for (dst, (_, _, s)) in self.tensors_mut().into_iter().zip(src) {
            for (d, v) in dst.iter_mut().zip(s) {
                *d += v;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|(_, _, v)| v.iter().all(|x| x.is_finite()))
    }
}

/// Stage features, fused embedding and classifier logits for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    pub f_cls_v: Array1<f64>,
    pub f_des_2: Array1<f64>,
    pub f_des_3: Array1<f64>,
    pub fused: Array1<f64>,
    pub logits: Array1<f64>,
}

/// Everything `backward` needs from a forward pass.
pub struct ForwardCache {
    patches: Array2<f64>,
    stage1: Vec<BlockCache>,
    desc: Option<Array1<f64>>,
    stage2: Vec<BlockCache>,
    stage3: Vec<BlockCache>,
    agg_ln: LayerNormCache,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ModelParams,
}

fn run_blocks(blocks: &[Block], mut x: Array2<f64>) -> (Array2<f64>, Vec<BlockCache>) {
    let mut caches = Vec::with_capacity(blocks.len());
    for b in blocks {
        let (y, c) = b.forward(&x);
        caches.push(c);
        x = y;
    }
    (x, caches)
}

fn backprop_blocks(blocks: &[Block], caches: &[BlockCache], mut dy: Array2<f64>, g: &mut [Block]) -> Array2<f64> {
    for ((b, c), gb) in blocks.iter().zip(caches).zip(g.iter_mut()).rev() {
        dy = b.backward(c, &dy, gb);
    }
    dy
}

fn check_finite(what: &str, a: &Array1<f64>) -> Result<()> {
    if a.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numeric(format!("non-finite values in {what}")))
    }
}

impl Model {
    pub fn new(config: ModelConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let params = ModelParams::init(&config, rng);
        Ok(Self { config, params })
    }

    pub fn from_parts(config: ModelConfig, params: ModelParams) -> Result<Self> {
        config.validate()?;
        let expected = ModelParams::zeros(&config);
        for ((name, shape, _), (_, want, _)) in params.tensors().iter().zip(expected.tensors().iter()) {
            if shape != want {
                return Err(Error::Shape(format!("{name}: shape {shape:?}, expected {want:?}")));
            }
        }
        if params.tensors().len() != expected.tensors().len() {
            return Err(Error::Shape("parameter count does not match config".into()));
        }
        Ok(Self { config, params })
    }

    /// Raw patch vectors, `N x 3P^2`, row-major over the patch grid. Pixels
    /// are scaled to [-1, 1].
    fn patch_matrix(&self, image: &RgbImage) -> Result<Array2<f64>> {
        let c = &self.config;
        if image.width() as usize != c.width || image.height() as usize != c.height {
            return Err(Error::Shape(format!(
                "image is {}x{}, model expects {}x{}",
                image.height(),
                image.width(),
                c.height,
                c.width
            )));
        }
        let p = c.patch_size;
        let cols = c.width / p;
        let mut out = Array2::zeros((c.num_patches(), c.patch_dim()));
        for (n, mut row) in out.rows_mut().into_iter().enumerate() {
            let (py, px) = (n / cols, n % cols);
            let mut j = 0;
            for y in 0..p {
                for x in 0..p {
                    let pix = image.get_pixel((px * p + x) as u32, (py * p + y) as u32);
                    for ch in 0..3 {
                        row[j] = f64::from(pix[ch]) / 127.5 - 1.0;
                        j += 1;
                    }
                }
            }
        }
        Ok(out)
    }

    /// `[CLS | projected patches] + pos1`, length N + 1.
    pub fn patchify(&self, image: &RgbImage) -> Result<Array2<f64>> {
        let patches = self.patch_matrix(image)?;
        Ok(self.embed_patches(&patches))
    }

    fn embed_patches(&self, patches: &Array2<f64>) -> Array2<f64> {
        let p = &self.params;
        let d = self.config.embed_dim;
        let mut tokens = Array2::zeros((patches.nrows() + 1, d));
        tokens.row_mut(0).assign(&p.cls);
        tokens.slice_mut(s![1.., ..]).assign(&p.patch.forward(patches));
        tokens + &p.pos1
    }

    /// Stage 1 over a full `N + 1` sequence; returns the sequence and f_cls.
    pub fn stage1(&self, tokens: &Array2<f64>) -> Result<(Array2<f64>, Array1<f64>)> {
        self.check_len("stage 1", tokens, self.config.stage1_len())?;
        let (out, _) = run_blocks(&self.params.stages[0], tokens.clone());
        let f_cls = out.row(0).to_owned();
        check_finite("stage 1", &f_cls)?;
        Ok((out, f_cls))
    }

    fn check_len(&self, what: &str, tokens: &Array2<f64>, len: usize) -> Result<()> {
        if tokens.nrows() != len || tokens.ncols() != self.config.embed_dim {
            return Err(Error::Shape(format!(
                "{what}: got {}x{}, expected {len}x{}",
                tokens.nrows(),
                tokens.ncols(),
                self.config.embed_dim
            )));
        }
        Ok(())
    }

    /// Project a description to K tokens of width D. `None` gives the null
    /// description.
    pub fn project_description(&self, desc: Option<&AttributeVector>) -> Result<Array2<f64>> {
        let (tokens, _) = self.description_tokens(desc)?;
        Ok(tokens)
    }

    fn description_tokens(&self, desc: Option<&AttributeVector>) -> Result<(Array2<f64>, Option<Array1<f64>>)> {
        let c = &self.config;
        let (k, d) = (c.desc_tokens, c.embed_dim);
        let input = match (desc, c.null_description) {
            (Some(v), _) => {
                if v.len() != c.vocab_size {
                    return Err(Error::Shape(format!(
                        "description has {} bits, model expects {}",
                        v.len(),
                        c.vocab_size
                    )));
                }
                Array1::from(v.as_f64())
            }
            (None, NullDescription::Zeros) => Array1::zeros(c.vocab_size),
            (None, NullDescription::Learned) => return Ok((self.params.null_desc.clone(), None)),
        };
        let flat = input.dot(&self.params.desc_proj.w) + &self.params.desc_proj.b;
        let tokens = flat
            .into_shape_with_order((k, d))
            .map_err(|e| Error::Shape(e.to_string()))?;
        Ok((tokens, Some(input)))
    }

    fn fusion_input(&self, patch_tokens: &Array2<f64>, desc_tokens: &Array2<f64>) -> Array2<f64> {
        let c = &self.config;
        let k = c.active_desc_tokens();
        let mut seq = Array2::zeros((c.fusion_len(), c.embed_dim));
        seq.row_mut(0).assign(&self.params.des);
        if k > 0 {
            seq.slice_mut(s![1..1 + k, ..]).assign(desc_tokens);
        }
        seq.slice_mut(s![1 + k.., ..]).assign(patch_tokens);
        seq + &self.params.pos2
    }

    /// Stages 2 and 3 over `[DES | description tokens | patch tokens]`;
    /// returns the `[DES]` outputs of both stages.
    pub fn fuse_stages(&self, patch_tokens: &Array2<f64>, desc_tokens: &Array2<f64>) -> Result<(Array1<f64>, Array1<f64>)> {
        self.check_len("patch tokens", patch_tokens, self.config.num_patches())?;
        if self.config.use_description {
            self.check_len("description tokens", desc_tokens, self.config.desc_tokens)?;
        }
        let seq = self.fusion_input(patch_tokens, desc_tokens);
        let (s2, _) = run_blocks(&self.params.stages[1], seq);
        let f2 = s2.row(0).to_owned();
        let (s3, _) = run_blocks(&self.params.stages[2], s2);
        let f3 = s3.row(0).to_owned();
        check_finite("fusion stages", &f3)?;
        Ok((f2, f3))
    }

    fn aggregate_pre(&self, feats: [&Array1<f64>; 3]) -> Array1<f64> {
        let w = &self.params.agg_w;
        feats[0] * w[0] + feats[1] * w[1] + feats[2] * w[2] + self.params.agg_b[0]
    }

    /// Width-1 convolution of the three stage features, then LayerNorm.
    pub fn aggregate(&self, f_cls: &Array1<f64>, f_des_2: &Array1<f64>, f_des_3: &Array1<f64>) -> Array1<f64> {
        let pre = self.aggregate_pre([f_cls, f_des_2, f_des_3]);
        let (y, _) = self.params.agg_ln.forward(&pre.insert_axis(Axis(0)));
        y.row(0).to_owned()
    }

    /// Full forward pass. `desc = None` substitutes the null description.
    pub fn forward(&self, image: &RgbImage, desc: Option<&AttributeVector>) -> Result<ForwardOutput> {
        self.forward_cached(image, desc).map(|(out, _)| out)
    }

    pub fn forward_cached(&self, image: &RgbImage, desc: Option<&AttributeVector>) -> Result<(ForwardOutput, ForwardCache)> {
        let p = &self.params;
        let k = self.config.active_desc_tokens();
        let patches = self.patch_matrix(image)?;
        let tokens = self.embed_patches(&patches);
        let (s1, stage1) = run_blocks(&p.stages[0], tokens);
        let f_cls_v = s1.row(0).to_owned();

        let (desc_tokens, desc_in) = if k > 0 {
            self.description_tokens(desc)?
        } else {
            (Array2::zeros((0, self.config.embed_dim)), None)
        };
        let seq = self.fusion_input(&s1.slice(s![1.., ..]).to_owned(), &desc_tokens);
        let (s2, stage2) = run_blocks(&p.stages[1], seq);
        let f_des_2 = s2.row(0).to_owned();
        let (s3, stage3) = run_blocks(&p.stages[2], s2);
        let f_des_3 = s3.row(0).to_owned();

        let pre = self.aggregate_pre([&f_cls_v, &f_des_2, &f_des_3]);
        let (fused, agg_ln) = p.agg_ln.forward(&pre.insert_axis(Axis(0)));
        let fused = fused.row(0).to_owned();
        let logits = p.classifier.forward(&fused.clone().insert_axis(Axis(0))).row(0).to_owned();
        check_finite("logits", &logits)?;
        check_finite("fused feature", &fused)?;
        Ok((
            ForwardOutput {
                f_cls_v,
                f_des_2,
                f_des_3,
                fused,
                logits,
            },
            ForwardCache {
                patches,
                stage1,
                desc: desc_in,
                stage2,
                stage3,
                agg_ln,
            },
        ))
    }

    /// Accumulate into `grads` the parameter gradients of a scalar loss whose
    /// partial derivatives with respect to the fused feature and the logits
    /// are `d_fused` and `d_logits`.
    pub fn backward(
        &self,
        out: &ForwardOutput,
        cache: &ForwardCache,
        d_fused: &Array1<f64>,
        d_logits: &Array1<f64>,
        grads: &mut ModelParams,
    ) {
        let p = &self.params;
        let c = &self.config;
        let k = c.active_desc_tokens();
        let row = |v: &Array1<f64>| v.clone().insert_axis(Axis(0));

        let dfused = p.classifier.backward(&row(&out.fused), &row(d_logits), &mut grads.classifier);
        let dfused = dfused.row(0).to_owned() + d_fused;
        let dpre = p.agg_ln.backward(&cache.agg_ln, &row(&dfused), &mut grads.agg_ln);
        let dpre = dpre.row(0);
        let feats = [&out.f_cls_v, &out.f_des_2, &out.f_des_3];
        for (i, f) in feats.iter().enumerate() {
            grads.agg_w[i] += dpre.dot(*f);
        }
        grads.agg_b[0] += dpre.sum();
        let dfeat = |i: usize| dpre.mapv(|v| v * p.agg_w[i]);

        let mut d3 = Array2::zeros((c.fusion_len(), c.embed_dim));
        d3.row_mut(0).assign(&dfeat(2));
        let mut d2 = backprop_blocks(&p.stages[2], &cache.stage3, d3, &mut grads.stages[2]);
        let mut r0 = d2.row_mut(0);
        r0 += &dfeat(1);
        let dseq = backprop_blocks(&p.stages[1], &cache.stage2, d2, &mut grads.stages[1]);

        grads.pos2 += &dseq;
        grads.des += &dseq.row(0);
        if k > 0 {
            let dtok = dseq.slice(s![1..1 + k, ..]);
            match &cache.desc {
                Some(input) => {
                    let flat: Array1<f64> = dtok.iter().copied().collect();
                    grads.desc_proj.b += &flat;
                    for (i, &m) in input.iter().enumerate() {
                        if m != 0.0 {
                            let mut gw = grads.desc_proj.w.row_mut(i);
                            gw.scaled_add(m, &flat);
                        }
                    }
                }
                None => grads.null_desc += &dtok,
            }
        }

        let mut d1 = Array2::zeros((c.stage1_len(), c.embed_dim));
        d1.slice_mut(s![1.., ..]).assign(&dseq.slice(s![1 + k.., ..]));
        d1.row_mut(0).assign(&dfeat(0));
        let dtokens = backprop_blocks(&p.stages[0], &cache.stage1, d1, &mut grads.stages[0]);
        grads.pos1 += &dtokens;
        grads.cls += &dtokens.row(0);
        p.patch
            .backward(&cache.patches, &dtokens.slice(s![1.., ..]).to_owned(), &mut grads.patch);
    }

    /// Inference embedding: the image with the null description, fused and
    /// L2-normalized. No per-sample description is ever read.
    pub fn embed_inference(&self, image: &RgbImage) -> Result<Array1<f64>> {
        let out = self.forward(image, None)?;
        let norm = out.fused.dot(&out.fused).sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return Err(Error::Numeric("embedding has zero or non-finite norm".into()));
        }
        Ok(out.fused / norm)
    }
}

impl fmt::Display for ModelConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}x{} P={} D={} heads={} stages={:?} K={} V={} C={}",
            self.height,
            self.width,
            self.patch_size,
            self.embed_dim,
            self.heads,
            self.stage_layers,
            self.active_desc_tokens(),
            self.vocab_size,
            self.num_classes
        )
    }
}
