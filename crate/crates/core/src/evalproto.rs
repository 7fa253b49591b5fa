//! Re-identification evaluation: per-setting gallery filtering, ranking by
//! cosine distance, CMC and mean average precision.

use std::fmt;
use std::str::FromStr;

use image::RgbImage;
use ndarray::Array1;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::Model;
use crate::registry::Registry;
use crate::synthdata::{DatasetManifest, SampleRecord, Split};
use crate::trainer::load_images;

pub const CSV_HEADER: &str = "setting,rank1,rank5,rank10,mAP,evaluated,skipped";

#[derive(Debug, Clone, PartialEq)]
pub struct EvalEntry {
    /// Unit-norm embedding.
    pub feature: Array1<f64>,
    pub identity_id: usize,
    pub camera_id: usize,
    pub clothes_id: usize,
}

impl EvalEntry {
    /// Normalizes `feature`; a zero vector is rejected.
    pub fn new(feature: Array1<f64>, identity_id: usize, camera_id: usize, clothes_id: usize) -> Result<Self> {
        let norm = feature.dot(&feature).sqrt();
        if !(norm > 0.0 && norm.is_finite()) {
            return Err(Error::Numeric("cannot normalize a zero or non-finite feature".into()));
        }
        Ok(Self {
            feature: feature / norm,
            identity_id,
            camera_id,
            clothes_id,
        })
    }
}

/// Which gallery items a query may be matched against.
pub trait GalleryRule: Send + Sync {
    fn name(&self) -> &'static str;

    fn admits(&self, query: &EvalEntry, item: &EvalEntry) -> bool;
}

fn same_view(q: &EvalEntry, g: &EvalEntry) -> bool {
    q.identity_id == g.identity_id && q.camera_id == g.camera_id
}

/// Drops same-identity items from the query's own camera.
pub struct GeneralRule;

/// Additionally drops same-identity items wearing the query's outfit.
pub struct ClothChangingRule;

/// Keeps only same-identity items wearing the query's outfit.
pub struct SameClothesRule;

impl GalleryRule for GeneralRule {
    fn name(&self) -> &'static str {
        "general"
    }

    fn admits(&self, q: &EvalEntry, g: &EvalEntry) -> bool {
        !same_view(q, g)
    }
}

impl GalleryRule for ClothChangingRule {
    fn name(&self) -> &'static str {
        "cc"
    }

    fn admits(&self, q: &EvalEntry, g: &EvalEntry) -> bool {
        !same_view(q, g) && !(q.identity_id == g.identity_id && q.clothes_id == g.clothes_id)
    }
}

impl GalleryRule for SameClothesRule {
    fn name(&self) -> &'static str {
        "sc"
    }

    fn admits(&self, q: &EvalEntry, g: &EvalEntry) -> bool {
        !same_view(q, g) && (q.identity_id != g.identity_id || q.clothes_id == g.clothes_id)
    }
}

pub fn gallery_rules() -> Registry<dyn GalleryRule> {
    Registry::<dyn GalleryRule>::new("evaluation setting")
        .register("general", || Box::new(GeneralRule))
        .register("cc", || Box::new(ClothChangingRule))
        .register("sc", || Box::new(SameClothesRule))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Setting {
    General,
    ClothChanging,
    SameClothes,
}

impl Setting {
    pub const ALL: [Setting; 3] = [Setting::General, Setting::ClothChanging, Setting::SameClothes];

    pub fn name(self) -> &'static str {
        match self {
            Setting::General => "general",
            Setting::ClothChanging => "cc",
            Setting::SameClothes => "sc",
        }
    }

    pub fn rule(self) -> Box<dyn GalleryRule> {
        gallery_rules().create(self.name()).expect("every setting is registered")
    }
}

impl fmt::Display for Setting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Setting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "general" => Ok(Setting::General),
            "cc" | "cloth-changing" => Ok(Setting::ClothChanging),
            "sc" | "same-clothes" => Ok(Setting::SameClothes),
            other => Err(Error::Config(format!(
                "unknown setting `{other}` (expected general, cc or sc)"
            ))),
        }
    }
}

/// Indices of the gallery items the query may be ranked against.
pub fn valid_gallery(query: &EvalEntry, gallery: &[EvalEntry], setting: Setting) -> Result<Vec<usize>> {
    let rule = setting.rule();
    let valid: Vec<usize> = (0..gallery.len()).filter(|&i| rule.admits(query, &gallery[i])).collect();
    if valid.is_empty() {
        return Err(Error::Protocol(format!(
            "no valid gallery items for query (identity {}, camera {}, clothes {}) under {setting}",
            query.identity_id, query.camera_id, query.clothes_id
        )));
    }
    Ok(valid)
}

/// Valid items by ascending cosine distance, ties by ascending index.
pub fn rank_list(query: &EvalEntry, gallery: &[EvalEntry], valid: &[usize]) -> Vec<usize> {
    let mut scored: Vec<(f64, usize)> = valid
        .iter()
        .map(|&i| (1.0 - query.feature.dot(&gallery[i].feature), i))
        .collect();
    scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    scored.into_iter().map(|(_, i)| i).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Metrics {
    pub setting: Setting,
    /// `cmc[k - 1]` is the fraction of evaluated queries matched within rank k.
    pub cmc: Vec<f64>,
    pub rank1: f64,
    pub rank5: f64,
    pub rank10: f64,
    pub map: f64,
    /// Per query; `None` for skipped queries.
    pub ap: Vec<Option<f64>>,
    pub evaluated: usize,
    pub skipped: usize,
}

impl Metrics {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.6},{:.6},{:.6},{:.6},{},{}",
            self.setting, self.rank1, self.rank5, self.rank10, self.map, self.evaluated, self.skipped
        )
    }
}

/// First-hit rank (0-based) and AP of one ranked list; `None` when no
/// correct item is present.
fn score_ranking(query: &EvalEntry, gallery: &[EvalEntry], ranking: &[usize]) -> Option<(usize, f64)> {
    let mut hits = 0usize;
    let mut first = None;
    let mut precision_sum = 0.0;
    for (r, &i) in ranking.iter().enumerate() {
        if gallery[i].identity_id == query.identity_id {
            hits += 1;
            first.get_or_insert(r);
            precision_sum += hits as f64 / (r + 1) as f64;
        }
    }
    first.map(|f| (f, precision_sum / hits as f64))
}

pub fn cmc_and_map(queries: &[EvalEntry], gallery: &[EvalEntry], setting: Setting) -> Result<Metrics> {
    if gallery.is_empty() {
        return Err(Error::Protocol("empty gallery".into()));
    }
    let per_query: Vec<Option<(usize, f64)>> = queries
        .par_iter()
        .map(|q| {
            let valid = valid_gallery(q, gallery, setting).ok()?;
            score_ranking(q, gallery, &rank_list(q, gallery, &valid))
        })
        .collect();
    let scored: Vec<(usize, f64)> = per_query.iter().flatten().copied().collect();
    let evaluated = scored.len();
    if evaluated == 0 {
        return Err(Error::Protocol(format!(
            "none of the {} queries has a valid correct match under {setting}",
            queries.len()
        )));
    }
    let mut cmc = vec![0.0; gallery.len()];
    for &(first, _) in &scored {
        for c in cmc.iter_mut().skip(first) {
            *c += 1.0;
        }
    }
    for c in cmc.iter_mut() {
        *c /= evaluated as f64;
    }
    let at = |k: usize| cmc[k.min(cmc.len()) - 1];
    Ok(Metrics {
        setting,
        rank1: at(1),
        rank5: at(5),
        rank10: at(10),
        map: scored.iter().map(|s| s.1).sum::<f64>() / evaluated as f64,
        ap: per_query.iter().map(|s| s.map(|(_, ap)| ap)).collect(),
        cmc,
        evaluated,
        skipped: queries.len() - evaluated,
    })
}

/// Inference embeddings for a list of records, in order.
pub fn embed_records(model: &Model, manifest: &DatasetManifest, records: &[&SampleRecord]) -> Result<Vec<EvalEntry>> {
    let images = load_images(manifest, records)?;
    embed_images(model, records, &images)
}

/// Inference embeddings for already decoded images, parallel to `records`.
pub fn embed_images(model: &Model, records: &[&SampleRecord], images: &[RgbImage]) -> Result<Vec<EvalEntry>> {
    images
        .par_iter()
        .zip(records.par_iter())
        .map(|(img, r)| {
            let f = model.embed_inference(img)?;
            EvalEntry::new(f, r.identity_id, r.camera_id, r.clothes_id)
        })
        .collect()
}

/// Embed the query and gallery splits once and score every requested setting.
pub fn evaluate(model: &Model, manifest: &DatasetManifest, settings: &[Setting]) -> Result<Vec<Metrics>> {
    let queries = embed_records(model, manifest, &manifest.split(Split::Query))?;
    let gallery = embed_records(model, manifest, &manifest.split(Split::Gallery))?;
    if queries.is_empty() {
        return Err(Error::Protocol("manifest has no query split".into()));
    }
    settings.iter().map(|&s| cmc_and_map(&queries, &gallery, s)).collect()
}
