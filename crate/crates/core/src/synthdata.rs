//! Deterministic synthetic person images with controllable identities,
//! outfits, cameras and attribute stability.
//!
//! Images are rendered attribute encodings laid out on a 4x4 region grid:
//!
//! ```text
//!   row 0  head   | hair | gender/age | identity texture (2 cells) |
//!   row 1  torso  | upper-body color + type pattern                |
//!   row 2  legs   | lower-body color + type pattern                |
//!   row 3  feet   | shoes (2 cells) | carried item | orientation/id |
//! ```
//!
//! Only rows 1 and 2 depend on the outfit. Each camera applies a fixed
//! brightness/contrast shift, and every image gets its own pixel jitter.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use rand::seq::SliceRandom;
use rand::Rng as _;
use rayon::prelude::*;

use crate::attribute_schema::{AttributeVector, AttributeVocabulary, Category};
use crate::dem::TableSource;
use crate::error::{Error, Result};
use crate::rng::{derive_seed, stream};

pub const MANIFEST_FILE: &str = "manifest.tsv";
pub const ATTRIBUTES_FILE: &str = "attributes.tsv";

#[derive(Debug, Clone, PartialEq)]
pub struct GenConfig {
    pub num_identities: usize,
    /// Identities `0..num_train_identities` form the training split; the rest
    /// are split into query (camera 0) and gallery (other cameras).
    pub num_train_identities: usize,
    pub outfits_per_identity: usize,
    /// Images per (outfit, camera) pair.
    pub images_per_outfit: usize,
    pub num_cameras: usize,
    pub height: usize,
    pub width: usize,
    pub patch_size: usize,
    /// Per cloth-irrelevant category: probability that an image's detected
    /// value equals the identity's true value rather than a uniform resample.
    pub retention_prob: BTreeMap<Category, f64>,
    /// Number of named colors outfits draw from; fewer colors means more
    /// sharing of clothes colors between identities.
    pub cloth_palette: usize,
    /// Amplitude of the uniform per-pixel jitter.
    pub jitter: u8,
    pub seed: u64,
}

impl GenConfig {
    pub fn with_retention(mut self, p: f64) -> Self {
        for v in self.retention_prob.values_mut() {
            *v = p;
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("num_identities", self.num_identities),
            ("outfits_per_identity", self.outfits_per_identity),
            ("images_per_outfit", self.images_per_outfit),
            ("num_cameras", self.num_cameras),
            ("image_height", self.height),
            ("image_width", self.width),
            ("patch_size", self.patch_size),
            ("cloth_palette", self.cloth_palette),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if self.num_train_identities > self.num_identities {
            return Err(Error::Config(format!(
                "num_train_identities {} exceeds num_identities {}",
                self.num_train_identities, self.num_identities
            )));
        }
        if self.height % self.patch_size != 0 || self.width % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "image size {}x{} is not divisible by patch size {}",
                self.height, self.width, self.patch_size
            )));
        }
        if self.height < 4 || self.width < 4 {
            return Err(Error::Config("images must be at least 4x4".into()));
        }
        if self.cloth_palette > COLORS.len() {
            return Err(Error::Config(format!(
                "cloth_palette must be at most {}",
                COLORS.len()
            )));
        }
        for (cat, &p) in &self.retention_prob {
            if cat.is_cloth_related() {
                return Err(Error::Config(format!(
                    "retention_prob applies to cloth-irrelevant categories, not {cat}"
                )));
            }
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("retention_prob.{cat} = {p} outside [0, 1]")));
            }
        }
        Ok(())
    }

    pub fn images_per_identity(&self) -> usize {
        self.outfits_per_identity * self.num_cameras * self.images_per_outfit
    }

    pub fn retention(&self, cat: Category) -> f64 {
        self.retention_prob.get(&cat).copied().unwrap_or(1.0)
    }
}

impl Default for GenConfig {
    fn default() -> Self {
        let retention_prob = Category::ALL
            .iter()
            .filter(|c| !c.is_cloth_related())
            .map(|&c| (c, 0.9))
            .collect();
        Self {
            num_identities: 40,
            num_train_identities: 20,
            outfits_per_identity: 3,
            images_per_outfit: 2,
            num_cameras: 2,
            height: 32,
            width: 32,
            patch_size: 8,
            retention_prob,
            cloth_palette: 11,
            jitter: 12,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Split {
    Train,
    Query,
    Gallery,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Query => "query",
            Split::Gallery => "gallery",
        }
    }

    pub fn parse(s: &str) -> Option<Split> {
        match s {
            "train" => Some(Split::Train),
            "query" => Some(Split::Query),
            "gallery" => Some(Split::Gallery),
            _ => None,
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord {
    /// `<split>/<name>`; the prefix names the split the sample belongs to.
    pub sample_id: String,
    /// Relative to the manifest directory unless absolute.
    pub image_path: PathBuf,
    pub identity_id: usize,
    pub camera_id: usize,
    pub clothes_id: usize,
    pub attrs: AttributeVector,
}

impl SampleRecord {
    pub fn split(&self) -> Split {
        self.sample_id
            .split_once('/')
            .and_then(|(s, _)| Split::parse(s))
            .unwrap_or(Split::Train)
    }

    /// Globally unique outfit key: clothes ids are only unique per identity.
    pub fn outfit_key(&self) -> (usize, usize) {
        (self.identity_id, self.clothes_id)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub records: Vec<SampleRecord>,
}

impl DatasetManifest {
    pub fn split(&self, split: Split) -> Vec<&SampleRecord> {
        self.records.iter().filter(|r| r.split() == split).collect()
    }

    pub fn image_path(&self, rec: &SampleRecord) -> PathBuf {
        if rec.image_path.is_absolute() {
            rec.image_path.clone()
        } else {
            self.root.join(&rec.image_path)
        }
    }

    /// Ground-truth attributes as a pluggable source.
    pub fn attribute_source(&self) -> TableSource {
        let mut src = TableSource::new();
        for r in &self.records {
            src.insert(r.sample_id.clone(), r.attrs.clone());
        }
        src
    }

    pub fn to_tsv(&self) -> String {
        self.records
            .iter()
            .map(|r| {
                format!(
                    "{}\t{}\t{}\t{}\t{}\t{}\n",
                    r.sample_id,
                    r.image_path.display(),
                    r.identity_id,
                    r.camera_id,
                    r.clothes_id,
                    r.attrs
                )
            })
            .collect()
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_tsv()).map_err(|e| Error::io(path, e))
    }
}

/// Load and validate a manifest; every referenced image must exist.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut records = Vec::new();
    let mut width = None;
    for (n, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        let lineno = n + 1;
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 6 {
            return Err(Error::parse(
                path,
                lineno,
                format!("expected 6 tab-separated fields, found {}", fields.len()),
            ));
        }
        let int = |i: usize, name: &str| -> Result<usize> {
            fields[i]
                .trim()
                .parse()
                .map_err(|_| Error::parse(path, lineno, format!("{name} `{}` is not an integer", fields[i])))
        };
        let sample_id = fields[0].to_string();
        match sample_id.split_once('/') {
            Some((s, rest)) if Split::parse(s).is_some() && !rest.is_empty() => {}
            _ => {
                return Err(Error::parse(
                    path,
                    lineno,
                    format!("sample id `{sample_id}` lacks a train/query/gallery prefix"),
                ))
            }
        }
        let attrs: AttributeVector = fields[5]
            .trim()
            .parse()
            .map_err(|e: Error| Error::parse(path, lineno, e.to_string()))?;
        match width {
            None => width = Some(attrs.len()),
            Some(w) if w != attrs.len() => {
                return Err(Error::parse(
                    path,
                    lineno,
                    format!("bitstring length {} differs from earlier rows ({w})", attrs.len()),
                ))
            }
            _ => {}
        }
        let rec = SampleRecord {
            sample_id,
            image_path: PathBuf::from(fields[1]),
            identity_id: int(2, "identity_id")?,
            camera_id: int(3, "camera_id")?,
            clothes_id: int(4, "clothes_id")?,
            attrs,
        };
        let full = if rec.image_path.is_absolute() {
            rec.image_path.clone()
        } else {
            root.join(&rec.image_path)
        };
        if !full.is_file() {
            return Err(Error::parse(
                path,
                lineno,
                format!("image not found: {}", full.display()),
            ));
        }
        records.push(rec);
    }
    Ok(DatasetManifest { root, records })
}

const COLORS: [(&str, [u8; 3]); 11] = [
    ("black", [20, 20, 20]),
    ("blue", [30, 60, 200]),
    ("brown", [120, 70, 30]),
    ("green", [40, 160, 60]),
    ("grey", [128, 128, 128]),
    ("orange", [240, 140, 20]),
    ("pink", [240, 150, 190]),
    ("purple", [130, 50, 160]),
    ("red", [210, 30, 30]),
    ("white", [235, 235, 235]),
    ("yellow", [235, 220, 40]),
];

fn hsv(h: f64, s: f64, v: f64) -> [u8; 3] {
    let h = h.rem_euclid(1.0) * 6.0;
    let c = v * s;
    let x = c * (1.0 - ((h % 2.0) - 1.0).abs());
    let (r, g, b) = match h as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r, g, b].map(|u| ((u + m) * 255.0).round() as u8)
}

/// Display color of a label: named colors map to their RGB value, everything
/// else to a hue determined by its position inside its category.
fn label_color(vocab: &AttributeVocabulary, label: usize) -> [u8; 3] {
    let name = vocab.label(label);
    if let Some((_, rgb)) = COLORS
        .iter()
        .find(|(c, _)| name.rsplit('-').next() == Some(*c))
    {
        return *rgb;
    }
    let cat = vocab.category(label);
    let members = vocab.indices_of(cat);
    let pos = members.iter().position(|&i| i == label).unwrap_or(0);
    let cat_offset = Category::ALL.iter().position(|&c| c == cat).unwrap_or(0) as f64 * 0.13;
    hsv(cat_offset + pos as f64 * 0.618_034, 0.75, 0.85)
}

type Tile = [[bool; 4]; 4];

/// Deterministic 4x4 texture for a type label; position 0 of a category is
/// solid.
fn type_tile(vocab: &AttributeVocabulary, label: usize) -> Tile {
    let cat = vocab.category(label);
    let pos = vocab
        .indices_of(cat)
        .iter()
        .position(|&i| i == label)
        .unwrap_or(0);
    if pos == 0 {
        return [[false; 4]; 4];
    }
    random_tile(&mut stream(pos as u64, "type-tile", &[]))
}

fn random_tile(rng: &mut crate::rng::Rng) -> Tile {
    let mut t = [[false; 4]; 4];
    for row in t.iter_mut() {
        for cell in row.iter_mut() {
            *cell = rng.gen();
        }
    }
    t
}

#[derive(Debug, Clone, PartialEq)]
pub struct IdentitySpec {
    pub identity_id: usize,
    /// True label index for every cloth-irrelevant category.
    pub traits: BTreeMap<Category, usize>,
    pub texture: Tile,
    pub texture_colors: [[u8; 3]; 2],
}

#[derive(Debug, Clone, PartialEq)]
pub struct OutfitSpec {
    pub clothes_id: usize,
    /// Label index for every cloth-related category.
    pub items: BTreeMap<Category, usize>,
}

pub struct Renderer<'a> {
    pub vocab: &'a AttributeVocabulary,
    pub height: usize,
    pub width: usize,
    pub num_cameras: usize,
    pub jitter: u8,
}

impl Renderer<'_> {
    pub fn new<'a>(vocab: &'a AttributeVocabulary, cfg: &GenConfig) -> Renderer<'a> {
        Renderer {
            vocab,
            height: cfg.height,
            width: cfg.width,
            num_cameras: cfg.num_cameras,
            jitter: cfg.jitter,
        }
    }

    /// Row band boundaries: head, torso, legs, feet.
    pub fn bands(&self) -> [usize; 5] {
        let h = self.height;
        [0, h / 4, h / 2, 3 * h / 4, h]
    }

    /// Rows whose pixels depend on the outfit.
    pub fn outfit_rows(&self) -> std::ops::Range<usize> {
        let b = self.bands();
        b[1]..b[3]
    }

    fn camera_transform(&self, camera: usize) -> (f64, f64) {
        let centered = camera as f64 - (self.num_cameras as f64 - 1.0) / 2.0;
        let contrast = 1.0 + 0.08 * ((camera % 3) as f64 - 1.0);
        (contrast, 14.0 * centered)
    }

    pub fn render(
        &self,
        identity: &IdentitySpec,
        outfit: &OutfitSpec,
        camera: usize,
        jitter_seed: u64,
    ) -> RgbImage {
        let (h, w) = (self.height, self.width);
        let b = self.bands();
        let (q1, q2, q3) = (w / 4, w / 2, 3 * w / 4);
        let mut img = RgbImage::new(w as u32, h as u32);

        let trait_of = |c: Category| identity.traits.get(&c).copied();
        let item_of = |c: Category| outfit.items.get(&c).copied();

        let mut fill = |x0: usize, x1: usize, y0: usize, y1: usize, f: &dyn Fn(usize, usize) -> [u8; 3]| {
            for y in y0..y1 {
                for x in x0..x1 {
                    img.put_pixel(x as u32, y as u32, Rgb(f(x, y)));
                }
            }
        };
        let swatch = |label: Option<usize>, pattern: Option<usize>| {
            let base = label.map_or([90, 90, 90], |l| label_color(self.vocab, l));
            let tile = pattern.map_or([[false; 4]; 4], |l| type_tile(self.vocab, l));
            move |x: usize, y: usize| {
                if tile[y % 4][x % 4] {
                    base.map(|c| (c as f64 * 0.55) as u8)
                } else {
                    base
                }
            }
        };
        let texture = |x: usize, y: usize| {
            identity.texture_colors[usize::from(identity.texture[y % 4][x % 4])]
        };

        // head
        let hair = trait_of(Category::Hair);
        fill(0, q1, b[0], b[1], &swatch(hair, hair));
        let mid = (b[0] + b[1]) / 2;
        fill(q1, q2, b[0], mid, &swatch(trait_of(Category::Gender), None));
        fill(q1, q2, mid, b[1], &swatch(trait_of(Category::Age), None));
        fill(q2, w, b[0], b[1], &texture);
        // torso and legs
        fill(
            0,
            w,
            b[1],
            b[2],
            &swatch(item_of(Category::UpperBodyColor), item_of(Category::UpperBodyType)),
        );
        fill(
            0,
            w,
            b[2],
            b[3],
            &swatch(item_of(Category::LowerBodyColor), item_of(Category::LowerBodyType)),
        );
        // feet
        fill(
            0,
            q2,
            b[3],
            b[4],
            &swatch(trait_of(Category::ShoeColor), trait_of(Category::ShoeType)),
        );
        let carried = trait_of(Category::CarriedItems);
        fill(q2, q3, b[3], b[4], &swatch(carried, carried));
        let feet_mid = (b[3] + b[4]) / 2;
        fill(q3, w, b[3], feet_mid, &swatch(trait_of(Category::Orientation), None));
        fill(q3, w, feet_mid, b[4], &texture);

        let (contrast, brightness) = self.camera_transform(camera);
        let mut rng = stream(jitter_seed, "pixel-jitter", &[]);
        let amp = i32::from(self.jitter);
        for px in img.pixels_mut() {
            for c in px.0.iter_mut() {
                let shifted = (f64::from(*c) - 128.0) * contrast + 128.0 + brightness;
                let noise = if amp > 0 { rng.gen_range(-amp..=amp) } else { 0 };
                *c = (shifted.round() as i32 + noise).clamp(0, 255) as u8;
            }
        }
        img
    }
}

/// Everything `generate` decides before touching the disk.
#[derive(Debug, Clone)]
pub struct DatasetPlan {
    pub manifest: DatasetManifest,
    pub identities: Vec<IdentitySpec>,
    /// Outfits per identity, indexed by clothes id.
    pub outfits: Vec<Vec<OutfitSpec>>,
    /// Jitter seed per record, parallel to `manifest.records`.
    pub jitter_seeds: Vec<u64>,
}

fn pick(rng: &mut crate::rng::Rng, options: &[usize]) -> usize {
    *options.choose(rng).expect("non-empty category")
}

/// Sample identities, outfits, and per-image detected attributes.
pub fn plan(cfg: &GenConfig, vocab: &AttributeVocabulary, root: impl Into<PathBuf>) -> Result<DatasetPlan> {
    cfg.validate()?;
    let cats = vocab.categories();
    let stable: Vec<Category> = cats.iter().copied().filter(|c| !c.is_cloth_related()).collect();
    let cloth: Vec<Category> = cats.iter().copied().filter(|c| c.is_cloth_related()).collect();
    let palette: Vec<&str> = COLORS[..cfg.cloth_palette].iter().map(|(n, _)| *n).collect();
    let members = |c: Category| -> Vec<usize> {
        let all = vocab.indices_of(c);
        if matches!(c, Category::UpperBodyColor | Category::LowerBodyColor) {
            let restricted: Vec<usize> = all
                .iter()
                .copied()
                .filter(|&i| palette.iter().any(|p| vocab.label(i).ends_with(&format!("-{p}"))))
                .collect();
            if !restricted.is_empty() {
                return restricted;
            }
        }
        all
    };

    let mut identities = Vec::with_capacity(cfg.num_identities);
    let mut outfits = Vec::with_capacity(cfg.num_identities);
    for id in 0..cfg.num_identities {
        let mut rng = stream(cfg.seed, "identity", &[id as u64]);
        let traits = stable.iter().map(|&c| (c, pick(&mut rng, &members(c)))).collect();
        let texture = random_tile(&mut rng);
        let texture_colors = [
            hsv(rng.gen(), rng.gen_range(0.4..0.9), rng.gen_range(0.35..0.6)),
            hsv(rng.gen(), rng.gen_range(0.4..0.9), rng.gen_range(0.7..1.0)),
        ];
        identities.push(IdentitySpec {
            identity_id: id,
            traits,
            texture,
            texture_colors,
        });

        let mut mine: Vec<OutfitSpec> = Vec::with_capacity(cfg.outfits_per_identity);
        for clothes_id in 0..cfg.outfits_per_identity {
            // Outfits of one person differ in at least one garment color when
            // the palette allows it; colors are shared freely across people.
            let mut items = BTreeMap::new();
            for attempt in 0..64 {
                items = cloth.iter().map(|&c| (c, pick(&mut rng, &members(c)))).collect();
                let colors = |o: &BTreeMap<Category, usize>| {
                    (
                        o.get(&Category::UpperBodyColor).copied(),
                        o.get(&Category::LowerBodyColor).copied(),
                    )
                };
                if attempt == 63 || mine.iter().all(|o| colors(&o.items) != colors(&items)) {
                    break;
                }
            }
            mine.push(OutfitSpec { clothes_id, items });
        }
        outfits.push(mine);
    }

    let mut records = Vec::new();
    let mut jitter_seeds = Vec::new();
    let mut index = 0u64;
    for ident in &identities {
        let id = ident.identity_id;
        let mut rng = stream(cfg.seed, "detect", &[id as u64]);
        for outfit in &outfits[id] {
            for camera in 0..cfg.num_cameras {
                for k in 0..cfg.images_per_outfit {
                    let split = if id < cfg.num_train_identities {
                        Split::Train
                    } else if camera == 0 {
                        Split::Query
                    } else {
                        Split::Gallery
                    };
                    let mut attrs = AttributeVector::zeros(vocab.len());
                    for (&cat, &label) in &ident.traits {
                        let observed = if rng.gen::<f64>() < cfg.retention(cat) {
                            label
                        } else {
                            pick(&mut rng, &vocab.indices_of(cat))
                        };
                        attrs.set(observed, true);
                    }
                    for &label in outfit.items.values() {
                        attrs.set(label, true);
                    }
                    let name = format!("p{id:04}_o{}_c{camera}_{k}", outfit.clothes_id);
                    records.push(SampleRecord {
                        sample_id: format!("{split}/{name}"),
                        image_path: PathBuf::from("images").join(format!("{name}.png")),
                        identity_id: id,
                        camera_id: camera,
                        clothes_id: outfit.clothes_id,
                        attrs,
                    });
                    jitter_seeds.push(derive_seed(cfg.seed, "jitter", &[index]));
                    index += 1;
                }
            }
        }
    }

    Ok(DatasetPlan {
        manifest: DatasetManifest {
            root: root.into(),
            records,
        },
        identities,
        outfits,
        jitter_seeds,
    })
}

/// Render every record of a plan in manifest order, without touching disk.
pub fn render_all(plan: &DatasetPlan, cfg: &GenConfig, vocab: &AttributeVocabulary) -> Vec<RgbImage> {
    let renderer = Renderer::new(vocab, cfg);
    plan.manifest
        .records
        .par_iter()
        .zip(plan.jitter_seeds.par_iter())
        .map(|(rec, &seed)| {
            renderer.render(
                &plan.identities[rec.identity_id],
                &plan.outfits[rec.identity_id][rec.clothes_id],
                rec.camera_id,
                seed,
            )
        })
        .collect()
}

/// Render all images and write the manifest plus the ground-truth attribute
/// file into `out_dir`.
pub fn generate(cfg: &GenConfig, vocab: &AttributeVocabulary, out_dir: impl AsRef<Path>) -> Result<DatasetManifest> {
    let out_dir = out_dir.as_ref();
    let plan = plan(cfg, vocab, out_dir)?;
    let images = out_dir.join("images");
    std::fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    render_all(&plan, cfg, vocab)
        .par_iter()
        .zip(plan.manifest.records.par_iter())
        .try_for_each(|(img, rec)| {
            let path = plan.manifest.image_path(rec);
            img.save(&path).map_err(|source| Error::Image { path, source })
        })?;
    plan.manifest.write(out_dir.join(MANIFEST_FILE))?;
    let attrs = out_dir.join(ATTRIBUTES_FILE);
    std::fs::write(&attrs, plan.manifest.attribute_source().to_tsv()).map_err(|e| Error::io(&attrs, e))?;
    Ok(plan.manifest)
}

/// Expected strict retention ratio of a category under the generator's
/// resampling model: each image shows the true label with probability
/// `p + (1 - p) / L` and any specific other label with `(1 - p) / L`; a label
/// is retained when its bit is equal across all `n` images of the identity.
pub fn expected_retention(p: f64, labels: usize, n: usize) -> f64 {
    let l = labels as f64;
    let own = p + (1.0 - p) / l;
    let other = (1.0 - p) / l;
    let n = n as i32;
    let constant = |q: f64| q.powi(n) + (1.0 - q).powi(n);
    (constant(own) + (l - 1.0) * constant(other)) / l
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> GenConfig {
        GenConfig {
            num_identities: 2,
            num_train_identities: 1,
            outfits_per_identity: 2,
            images_per_outfit: 2,
            num_cameras: 2,
            ..GenConfig::default()
        }
    }

    #[test]
    fn counting() {
        let vocab = AttributeVocabulary::bundled();
        let p = plan(&small(), &vocab, "x").unwrap();
        assert_eq!(p.manifest.records.len(), 16);
        for id in 0..2 {
            let mut clothes: Vec<usize> = p
                .manifest
                .records
                .iter()
                .filter(|r| r.identity_id == id)
                .map(|r| r.clothes_id)
                .collect();
            clothes.dedup();
            clothes.sort_unstable();
            clothes.dedup();
            assert_eq!(clothes, vec![0, 1]);
        }
        assert_eq!(p.manifest.split(Split::Train).len(), 8);
        assert_eq!(p.manifest.split(Split::Query).len(), 4);
        assert_eq!(p.manifest.split(Split::Gallery).len(), 4);
    }

    #[test]
    fn config_validation() {
        let mut c = small();
        c.patch_size = 5;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = small();
        c.num_cameras = 0;
        assert!(c.validate().is_err());
        let mut c = small();
        c.retention_prob.insert(Category::Gender, 1.5);
        assert!(c.validate().is_err());
        let mut c = small();
        c.retention_prob.insert(Category::UpperBodyColor, 0.5);
        assert!(c.validate().is_err());
    }

    #[test]
    fn full_retention_keeps_irrelevant_bits_constant() {
        let vocab = AttributeVocabulary::bundled();
        let cfg = GenConfig {
            num_identities: 5,
            num_train_identities: 5,
            ..GenConfig::default()
        }
        .with_retention(1.0);
        let p = plan(&cfg, &vocab, "x").unwrap();
        for id in 0..5 {
            let recs: Vec<_> = p.manifest.records.iter().filter(|r| r.identity_id == id).collect();
            for i in (0..vocab.len()).filter(|&i| !vocab.is_cloth_related(i)) {
                assert!(recs.iter().all(|r| r.attrs.get(i) == recs[0].attrs.get(i)));
            }
        }
    }

    #[test]
    fn one_label_per_category() {
        let vocab = AttributeVocabulary::bundled();
        let p = plan(&GenConfig::default(), &vocab, "x").unwrap();
        for r in &p.manifest.records {
            for cat in vocab.categories() {
                let n = vocab.indices_of(cat).iter().filter(|&&i| r.attrs.get(i)).count();
                assert_eq!(n, 1, "{} {cat}", r.sample_id);
            }
        }
    }

    #[test]
    fn rendering_is_deterministic() {
        let vocab = AttributeVocabulary::bundled();
        let cfg = small();
        let p = plan(&cfg, &vocab, "x").unwrap();
        let r = Renderer::new(&vocab, &cfg);
        let a = r.render(&p.identities[0], &p.outfits[0][0], 1, 42);
        let b = r.render(&p.identities[0], &p.outfits[0][0], 1, 42);
        assert_eq!(a.as_raw(), b.as_raw());
        assert_eq!(a.dimensions(), (32, 32));
    }

    #[test]
    fn outfits_only_change_torso_and_legs() {
        let vocab = AttributeVocabulary::bundled();
        let cfg = small();
        let p = plan(&cfg, &vocab, "x").unwrap();
        let r = Renderer::new(&vocab, &cfg);
        let a = r.render(&p.identities[0], &p.outfits[0][0], 0, 7);
        let b = r.render(&p.identities[0], &p.outfits[0][1], 0, 7);
        let rows = r.outfit_rows();
        let mut changed_inside = 0;
        for (x, y, pa) in a.enumerate_pixels() {
            let pb = b.get_pixel(x, y);
            if pa != pb {
                assert!(rows.contains(&(y as usize)), "pixel ({x},{y}) changed outside outfit rows");
                changed_inside += 1;
            }
        }
        assert!(changed_inside > 0);
    }

    #[test]
    fn identities_with_equal_attributes_differ_in_texture() {
        let vocab = AttributeVocabulary::bundled();
        let cfg = small();
        let p = plan(&cfg, &vocab, "x").unwrap();
        let r = Renderer::new(&vocab, &cfg);
        let mut twin = p.identities[1].clone();
        twin.traits = p.identities[0].traits.clone();
        let a = r.render(&p.identities[0], &p.outfits[0][0], 0, 7);
        let b = r.render(&twin, &p.outfits[0][0], 0, 7);
        let mut diff_rows = std::collections::BTreeSet::new();
        for (x, y, pa) in a.enumerate_pixels() {
            if pa != b.get_pixel(x, y) {
                assert!(x as usize >= cfg.width / 2, "difference outside texture cells");
                diff_rows.insert(y);
            }
        }
        assert!(!diff_rows.is_empty());
    }

    #[test]
    fn expected_retention_limits() {
        assert_eq!(expected_retention(1.0, 11, 20), 1.0);
        // a single image is always retained
        assert!((expected_retention(0.3, 5, 1) - 1.0).abs() < 1e-12);
        let v = expected_retention(0.9, 2, 4);
        assert!(v > 0.0 && v < 1.0);
    }

    #[test]
    fn generate_write_load_roundtrip() {
        let vocab = AttributeVocabulary::bundled();
        let dir = tempfile::tempdir().unwrap();
        let m = generate(&small(), &vocab, dir.path()).unwrap();
        let back = load_manifest(dir.path().join(MANIFEST_FILE)).unwrap();
        assert_eq!(m, back);

        let victim = back.image_path(&back.records[3]);
        std::fs::remove_file(&victim).unwrap();
        let err = load_manifest(dir.path().join(MANIFEST_FILE)).unwrap_err().to_string();
        assert!(err.contains(&victim.display().to_string()), "{err}");
    }

    #[test]
    fn handwritten_manifest_preserves_order() {
        let dir = tempfile::tempdir().unwrap();
        for n in ["a.png", "b.png", "c.png"] {
            RgbImage::new(8, 8).save(dir.path().join(n)).unwrap();
        }
        let text = "train/z\tc.png\t0\t0\t0\t0101\n\
                    query/y\ta.png\t1\t0\t1\t0011\n\
                    gallery/x\tb.png\t1\t1\t0\t1111\n";
        std::fs::write(dir.path().join("m.tsv"), text).unwrap();
        let m = load_manifest(dir.path().join("m.tsv")).unwrap();
        let ids: Vec<_> = m.records.iter().map(|r| r.sample_id.as_str()).collect();
        assert_eq!(ids, ["train/z", "query/y", "gallery/x"]);
        assert_eq!(m.records[1].split(), Split::Query);

        std::fs::write(dir.path().join("bad.tsv"), "train/z\tc.png\t0\t0\n").unwrap();
        assert!(matches!(
            load_manifest(dir.path().join("bad.tsv")),
            Err(Error::Parse { line: 1, .. })
        ));
    }
}
