//! Attribute-retention statistics and ablation reports.

pub mod plot;

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::attribute_schema::{AttributeVector, AttributeVocabulary, Category};
use crate::dem::AttributeSource;
use crate::error::{Error, Result};
use crate::evalproto::{Metrics, Setting};
use crate::registry::Registry;
use crate::synthdata::SampleRecord;
use plot::{line_chart, Series, PALETTE};

/// How to score the stability of one label across an identity's images.
pub trait RetentionRule: Send + Sync {
    fn name(&self) -> &'static str;

    /// Score in [0, 1] for one label given its bit in every image.
    fn score(&self, bits: &[bool]) -> f64;
}

/// Retained iff the bit is identical in every image.
pub struct Strict;

/// Fraction of image pairs that agree on the bit.
pub struct Pairwise;

impl RetentionRule for Strict {
    fn name(&self) -> &'static str {
        "strict"
    }

    fn score(&self, bits: &[bool]) -> f64 {
        if bits.iter().all(|&b| b == bits[0]) {
            1.0
        } else {
            0.0
        }
    }
}

impl RetentionRule for Pairwise {
    fn name(&self) -> &'static str {
        "pairwise"
    }

    fn score(&self, bits: &[bool]) -> f64 {
        let n = bits.len();
        let ones = bits.iter().filter(|&&b| b).count();
        let agree = ones * ones.saturating_sub(1) / 2 + (n - ones) * (n - ones).saturating_sub(1) / 2;
        agree as f64 / (n * (n - 1) / 2) as f64
    }
}

pub fn retention_rules() -> Registry<dyn RetentionRule> {
    Registry::<dyn RetentionRule>::new("retention rule")
        .register("strict", || Box::new(Strict))
        .register("pairwise", || Box::new(Pairwise))
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetentionReport {
    pub split: String,
    pub rule: String,
    /// Cloth-irrelevant categories in vocabulary order.
    pub categories: Vec<(Category, f64)>,
    /// Per identity, the same categories in the same order.
    pub per_identity: BTreeMap<usize, Vec<f64>>,
    /// Identities skipped because they have a single image.
    pub excluded_identities: usize,
}

impl RetentionReport {
    pub fn ratio(&self, cat: Category) -> Option<f64> {
        self.categories.iter().find(|(c, _)| *c == cat).map(|(_, r)| *r)
    }

    /// `split,identity,category,retention` rows; `identity` is `all` for the
    /// category means.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("split,identity,category,retention\n");
        for (cat, r) in &self.categories {
            out.push_str(&format!("{},all,{cat},{r:.6}\n", self.split));
        }
        for (id, ratios) in &self.per_identity {
            for ((cat, _), r) in self.categories.iter().zip(ratios) {
                out.push_str(&format!("{},{id},{cat},{r:.6}\n", self.split));
            }
        }
        out
    }
}

/// Per-category retention over the identities of `records`.
///
/// A category's ratio is the mean of the rule's score over every
/// (identity, label in category) pair. Identities with a single image are
/// excluded and counted.
pub fn retention(
    split: &str,
    records: &[&SampleRecord],
    source: &dyn AttributeSource,
    vocab: &AttributeVocabulary,
    rule: &dyn RetentionRule,
) -> Result<RetentionReport> {
    let mut by_identity: BTreeMap<usize, Vec<AttributeVector>> = BTreeMap::new();
    for r in records {
        let v = source.attributes(&r.sample_id)?;
        vocab.check(&v)?;
        by_identity.entry(r.identity_id).or_default().push(v);
    }
    let cats: Vec<Category> = vocab.categories().into_iter().filter(|c| !c.is_cloth_related()).collect();
    let members: Vec<Vec<usize>> = cats.iter().map(|&c| vocab.indices_of(c)).collect();

    let scored: Vec<(usize, Vec<f64>)> = by_identity
        .par_iter()
        .filter(|(_, imgs)| imgs.len() >= 2)
        .map(|(&id, imgs)| {
            let per_cat = members
                .iter()
                .map(|labels| {
                    let total: f64 = labels
                        .iter()
                        .map(|&l| {
                            let bits: Vec<bool> = imgs.iter().map(|v| v.get(l)).collect();
                            rule.score(&bits)
                        })
                        .sum();
                    total / labels.len() as f64
                })
                .collect();
            (id, per_cat)
        })
        .collect();
    let excluded = by_identity.len() - scored.len();
    if excluded > 0 {
        log::warn!("{excluded} identities with a single image excluded from retention");
    }
    if scored.is_empty() {
        return Err(Error::Argument("no identity has two or more images".into()));
    }
    let n = scored.len() as f64;
    let categories = cats
        .iter()
        .enumerate()
        .map(|(ci, &c)| (c, scored.iter().map(|(_, r)| r[ci]).sum::<f64>() / n))
        .collect();
    Ok(RetentionReport {
        split: split.to_string(),
        rule: rule.name().to_string(),
        categories,
        per_identity: scored.into_iter().collect(),
        excluded_identities: excluded,
    })
}

/// Metadata attached to an evaluation CSV so runs can be merged later.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunTags {
    pub run: String,
    pub mask_ratio: Option<f64>,
    pub noise_ratio: Option<f64>,
}

pub const METRICS_HEADER: &str = "setting,rank1,rank5,rank10,mAP,evaluated,skipped,run,mask_ratio,noise_ratio";

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Evaluation CSV: the metric columns followed by the run tags.
pub fn metrics_csv(metrics: &[Metrics], tags: &RunTags) -> String {
    let mut out = format!("{METRICS_HEADER}\n");
    for m in metrics {
        out.push_str(&format!(
            "{},{},{},{}\n",
            m.csv_row(),
            tags.run,
            opt(tags.mask_ratio),
            opt(tags.noise_ratio)
        ));
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub run: String,
    pub setting: Setting,
    pub mask_ratio: Option<f64>,
    pub noise_ratio: Option<f64>,
    pub rank1: f64,
    pub rank5: f64,
    pub rank10: f64,
    pub map: f64,
    pub evaluated: usize,
    pub skipped: usize,
    pub source: PathBuf,
}

const REQUIRED: [&str; 7] = ["setting", "rank1", "rank5", "rank10", "mAP", "evaluated", "skipped"];

/// Parse one evaluation CSV. Rows without a `run` value are labelled with
/// the name of the file's parent directory.
pub fn parse_metrics_csv(path: &Path) -> Result<Vec<AblationRow>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines.next().ok_or_else(|| Error::parse(path, 1, "empty file"))?;
    let cols: HashMap<&str, usize> = header.split(',').map(str::trim).enumerate().map(|(i, c)| (c, i)).collect();
    for r in REQUIRED {
        if !cols.contains_key(r) {
            return Err(Error::parse(path, 1, format!("missing column `{r}`")));
        }
    }
    let fallback = path
        .parent()
        .and_then(|p| p.file_name())
        .or_else(|| path.file_stem())
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let mut rows = Vec::new();
    for (n, line) in lines {
        let line_no = n + 1;
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != cols.len() {
            return Err(Error::parse(
                path,
                line_no,
                format!("expected {} fields, found {}", cols.len(), fields.len()),
            ));
        }
        let get = |c: &str| cols.get(c).map(|&i| fields[i]).unwrap_or("");
        let num = |c: &str| -> Result<f64> {
            get(c)
                .parse::<f64>()
                .map_err(|_| Error::parse(path, line_no, format!("`{c}` is not a number: `{}`", get(c))))
        };
        let count = |c: &str| -> Result<usize> {
            get(c)
                .parse::<usize>()
                .map_err(|_| Error::parse(path, line_no, format!("`{c}` is not a count: `{}`", get(c))))
        };
        let maybe = |c: &str| -> Result<Option<f64>> {
            if get(c).is_empty() {
                Ok(None)
            } else {
                num(c).map(Some)
            }
        };
        let setting = get("setting")
            .parse::<Setting>()
            .map_err(|e| Error::parse(path, line_no, e.to_string()))?;
        let run = match get("run") {
            "" => fallback.clone(),
            r => r.to_string(),
        };
        rows.push(AblationRow {
            run,
            setting,
            mask_ratio: maybe("mask_ratio")?,
            noise_ratio: maybe("noise_ratio")?,
            rank1: num("rank1")?,
            rank5: num("rank5")?,
            rank10: num("rank10")?,
            map: num("mAP")?,
            evaluated: count("evaluated")?,
            skipped: count("skipped")?,
            source: path.to_path_buf(),
        });
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
    pub table: PathBuf,
    pub plots: Vec<PathBuf>,
}

pub const ABLATION_TABLE: &str = "ablation.csv";

pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mut out = String::from("run,setting,mask_ratio,noise_ratio,rank1,rank5,rank10,mAP,evaluated,skipped\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{:.6},{:.6},{:.6},{:.6},{},{}\n",
            r.run,
            r.setting,
            opt(r.mask_ratio),
            opt(r.noise_ratio),
            r.rank1,
            r.rank5,
            r.rank10,
            r.map,
            r.evaluated,
            r.skipped
        ));
    }
    out
}

fn axis_chart(rows: &[AblationRow], axis: &str, x: fn(&AblationRow) -> Option<f64>) -> Option<image::RgbImage> {
    let mut series = Vec::new();
    for (si, setting) in Setting::ALL.iter().enumerate() {
        let pts: Vec<&AblationRow> = rows.iter().filter(|r| r.setting == *setting && x(r).is_some()).collect();
        if pts.is_empty() {
            continue;
        }
        let color = PALETTE[si % PALETTE.len()];
        series.push(Series {
            name: format!("{setting} rank1"),
            points: pts.iter().map(|r| (x(r).unwrap(), r.rank1)).collect(),
            dashed: false,
            color,
        });
        series.push(Series {
            name: format!("{setting} map"),
            points: pts.iter().map(|r| (x(r).unwrap(), r.map)).collect(),
            dashed: true,
            color,
        });
    }
    if series.is_empty() {
        return None;
    }
    Some(line_chart(&format!("rank1 and map vs {axis}"), &format!("{axis} ratio"), &series))
}

/// Merge evaluation CSVs into one table keyed by (run, setting) and draw
/// rank-1/mAP against the noise and mask ratios.
pub fn ablation_report(inputs: &[PathBuf], out_dir: &Path) -> Result<AblationReport> {
    if inputs.is_empty() {
        return Err(Error::Argument("ablation report needs at least one input".into()));
    }
    let mut rows: Vec<AblationRow> = Vec::new();
    let mut seen: HashMap<(String, Setting), PathBuf> = HashMap::new();
    for path in inputs {
        for row in parse_metrics_csv(path)? {
            let key = (row.run.clone(), row.setting);
            if let Some(first) = seen.get(&key) {
                return Err(Error::Argument(format!(
                    "duplicate run label `{}` for setting {} in {} and {}",
                    row.run,
                    row.setting,
                    first.display(),
                    path.display()
                )));
            }
            seen.insert(key, path.clone());
            rows.push(row);
        }
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let table = out_dir.join(ABLATION_TABLE);
    fs::write(&table, ablation_table(&rows)).map_err(|e| Error::io(&table, e))?;
    let mut plots = Vec::new();
    let axes: [(&str, fn(&AblationRow) -> Option<f64>); 2] =
        [("noise", |r| r.noise_ratio), ("mask", |r| r.mask_ratio)];
    for (axis, x) in axes {
        if let Some(img) = axis_chart(&rows, axis, x) {
            let path = out_dir.join(format!("{axis}_ratio.png"));
            img.save(&path).map_err(|source| Error::Image {
                path: path.clone(),
                source,
            })?;
            plots.push(path);
        }
    }
    Ok(AblationReport { rows, table, plots })
}
