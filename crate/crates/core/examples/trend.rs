//! Compare description variants on the in-memory synthetic benchmark.
//!
//! Usage: `cargo run --release --example trend -- [seeds=0,1,2]
//! [variants=masked,image-only,unmasked] [key=value ...]`, where the remaining
//! pairs are configuration keys applied on top of the toy preset. Variants are
//! `masked`, `unmasked`, `image-only`, or `mask<r>` for a masked run at ratio
//! `r` (e.g. `mask0.3`).
//!
//! `test_descriptions=true` additionally scores each trained model with
//! noise-free descriptions fed at test time, masked as in training. This is a
//! diagnostic only: the shipped inference path never reads a description.
use std::collections::BTreeMap;
use std::time::Instant;

use made_core::benchmark::Benchmark;
use made_core::config::RunConfig;
use made_core::dem::mask_cloth;
use made_core::evalproto::{cmc_and_map, EvalEntry, Setting};
use made_core::model::Model;
use made_core::synthdata::Split;

/// CC rank-1 with each image's own description fed through the fusion stages.
fn described_cc_rank1(bench: &Benchmark, model: &Model, cfg: &RunConfig) -> made_core::Result<f64> {
    let vocab = cfg.vocabulary()?;
    let policy = made_core::dem::description_policies().create(&cfg.train.description_policy)?;
    let ratio = policy.effective_mask_ratio(cfg.train.mask_ratio);
    let mut rng = made_core::rng::stream(cfg.seed, "test-descriptions", &[]);
    let mut entries = |split: Split| -> made_core::Result<Vec<EvalEntry>> {
        let (records, images) = bench.split(split);
        records
            .iter()
            .zip(&images)
            .map(|(r, img)| {
                let desc = mask_cloth(&r.attrs, &vocab, ratio, &mut rng)?;
                let desc = policy.uses_description().then_some(desc);
                let out = model.forward(img, desc.as_ref())?;
                EvalEntry::new(out.fused, r.identity_id, r.camera_id, r.clothes_id)
            })
            .collect()
    };
    let (q, g) = (entries(Split::Query)?, entries(Split::Gallery)?);
    Ok(cmc_and_map(&q, &g, Setting::ClothChanging)?.rank1)
}

fn variant(cfg: &mut RunConfig, name: &str) -> made_core::Result<()> {
    match name.strip_prefix("mask").filter(|r| !r.is_empty() && *r != "ed") {
        Some(ratio) => {
            cfg.set("description_policy", "masked")?;
            cfg.set("mask_ratio", ratio)
        }
        None => cfg.set("description_policy", name),
    }
}

fn main() -> made_core::Result<()> {
    let mut seeds = vec![0u64, 1, 2];
    let mut variants = vec!["masked".to_string(), "image-only".into(), "unmasked".into()];
    let mut base = RunConfig::default();
    let mut test_descriptions = false;
    for arg in std::env::args().skip(1) {
        let (k, v) = arg.split_once('=').expect("arguments are key=value");
        match k {
            "seeds" => seeds = v.split(',').map(|s| s.parse().expect("seed")).collect(),
            "variants" => variants = v.split(',').map(String::from).collect(),
            "test_descriptions" => test_descriptions = v == "true",
            _ => base.set(k, v)?,
        }
    }
    base.set("checkpoint_every", "0")?;
    base.validate()?;

    let mut results: BTreeMap<String, Vec<(f64, f64, f64)>> = BTreeMap::new();
    let mut described: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for &seed in &seeds {
        let mut cfg = base.clone();
        cfg.seed = seed;
        let bench = Benchmark::from_config(&cfg)?;
        for v in &variants {
            let mut run_cfg = cfg.clone();
            variant(&mut run_cfg, v)?;
            let t = Instant::now();
            let dir = tempfile_dir(v, seed);
            let run = bench.run(&run_cfg, &dir)?;
            let _ = std::fs::remove_dir_all(&dir);
            let cc = run.metrics(Setting::ClothChanging);
            let general = run.metrics(Setting::General);
            println!(
                "seed {seed} {v:>11}: cc r1 {:.3} map {:.3} | general r1 {:.3} | {:.1}s",
                cc.rank1,
                cc.map,
                general.rank1,
                t.elapsed().as_secs_f64()
            );
            results.entry(v.clone()).or_default().push((cc.rank1, cc.map, general.rank1));
            if test_descriptions {
                let r1 = described_cc_rank1(&bench, &run.outcome.model, &run_cfg)?;
                println!("seed {seed} {v:>11}: cc r1 with test descriptions {r1:.3}");
                described.entry(v.clone()).or_default().push(r1);
            }
        }
    }
    for (v, r) in &results {
        let n = r.len() as f64;
        let mean = |f: fn(&(f64, f64, f64)) -> f64| r.iter().map(f).sum::<f64>() / n;
        println!(
            "{v:>11}: mean cc r1 {:.3} map {:.3} general r1 {:.3}",
            mean(|x| x.0),
            mean(|x| x.1),
            mean(|x| x.2)
        );
    }
    for (v, r) in &described {
        println!("{v:>11}: mean cc r1 with test descriptions {:.3}", r.iter().sum::<f64>() / r.len() as f64);
    }
    Ok(())
}

fn tempfile_dir(variant: &str, seed: u64) -> std::path::PathBuf {
    std::env::temp_dir().join(format!("made-trend-{}-{variant}-{seed}", std::process::id()))
}
