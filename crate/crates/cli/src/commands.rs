use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use made_core::analyzer::{ablation_report, metrics_csv, retention, retention_rules, RunTags};
use made_core::attribute_schema::{AttributeVector, AttributeVocabulary};
use made_core::checkpoint::Checkpoint;
use made_core::config::RunConfig;
use made_core::dem::{mask_cloth, noise_models, AttributeSource, TableSource};
use made_core::evalproto::{evaluate, Setting};
use made_core::model::Model;
use made_core::rng::stream;
use made_core::synthdata::{generate, load_manifest, DatasetManifest, Split, MANIFEST_FILE};
use made_core::trainer::{train, TrainSet};
use made_core::Error;

use crate::failure::Failure;
use crate::{
    AblationArgs, AnalyzeCommand, Axis, Command, ConfigArgs, EvalArgs, GenDataArgs, MaskDebugArgs, RetentionArgs,
    SettingArg, SweepArgs, TrainArgs, OUTPUT_ROOT_ENV,
};

type Outcome<T = ()> = std::result::Result<T, Failure>;

/// Name of the resolved configuration written into every run directory.
pub const RESOLVED_CONFIG: &str = "config.resolved";
pub const METRICS_FILE: &str = "metrics.csv";

pub fn run(command: Command) -> Outcome {
    match command {
        Command::GenData(a) => gen_data(a),
        Command::MaskDebug(a) => mask_debug(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Analyze(AnalyzeCommand::Retention(a)) => retention_cmd(a),
        Command::Analyze(AnalyzeCommand::Ablation(a)) => ablation_cmd(a),
        Command::Sweep(a) => sweep(a),
    }
}

fn require_file(flag: &str, path: &Path) -> Outcome {
    if path.is_file() {
        Ok(())
    } else {
        Err(Failure::Usage(format!("{flag} {}: no such file", path.display())))
    }
}

/// `out` when given, else a fresh `<command>-<timestamp>` directory under the
/// output root.
fn run_dir(command: &str, out: Option<&Path>) -> Outcome<PathBuf> {
    let dir = match out {
        Some(p) => p.to_path_buf(),
        None => {
            let root = std::env::var_os(OUTPUT_ROOT_ENV).map(PathBuf::from).unwrap_or_else(|| "runs".into());
            let stamp = chrono::Local::now().format("%Y%m%d-%H%M%S%.3f");
            root.join(format!("{command}-{stamp}"))
        }
    };
    fs::create_dir_all(&dir).map_err(|e| Error::Io { path: dir.clone(), source: e })?;
    Ok(dir)
}

fn write(path: &Path, text: &str) -> Outcome {
    fs::write(path, text).map_err(|e| Failure::Runtime(Error::Io { path: path.to_path_buf(), source: e }))
}

fn load_config(args: &ConfigArgs) -> Outcome<RunConfig> {
    let mut cfg = match &args.config {
        Some(p) => {
            require_file("--config", p)?;
            RunConfig::load(p)?
        }
        None => RunConfig::default(),
    };
    for kv in &args.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Failure::Usage(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_vocabulary(path: Option<&Path>) -> Outcome<AttributeVocabulary> {
    match path {
        Some(p) => {
            require_file("--vocabulary", p)?;
            Ok(AttributeVocabulary::load(p)?)
        }
        None => Ok(AttributeVocabulary::bundled()),
    }
}

fn gen_data(a: GenDataArgs) -> Outcome {
    let cfg = load_config(&a.config)?;
    let dir = run_dir("gen-data", a.out.as_deref())?;
    write(&dir.join(RESOLVED_CONFIG), &cfg.to_text())?;
    let manifest = generate(&cfg.gen_config(), &cfg.vocabulary()?, &dir)?;
    info!("wrote {} images to {}", manifest.records.len(), dir.display());
    println!("{}", dir.join(MANIFEST_FILE).display());
    Ok(())
}

fn mask_debug(a: MaskDebugArgs) -> Outcome {
    let vocab = load_vocabulary(a.vocabulary.as_deref())?;
    let (label, before) = match (&a.attrs, &a.bits) {
        (Some(path), _) => {
            require_file("--attrs", path)?;
            let id = a.sample.clone().unwrap_or_default();
            (id.clone(), TableSource::load(path, &vocab)?.attributes(&id)?)
        }
        (None, Some(bits)) => ("<bits>".to_string(), bits.parse::<AttributeVector>()?),
        (None, None) => return Err(Failure::Usage("give --attrs with --sample, or --bits".into())),
    };
    vocab.check(&before)?;
    let noise = noise_models().create(&a.noise_model)?;
    let mut rng = stream(a.seed, "mask-debug", &[]);
    let masked = mask_cloth(&before, &vocab, a.mask_ratio, &mut rng)?;
    let after = noise.corrupt(&masked, a.noise_ratio, &mut rng);
    let changed = before.diff(&after);
    println!("sample:  {label}");
    println!("before:  {before}");
    println!("after:   {after}");
    println!(
        "changed: {}",
        changed.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(",")
    );
    for i in changed {
        println!("  {i:>4} {:<24} {} -> {}", vocab.label(i), before.get(i) as u8, after.get(i) as u8);
    }
    Ok(())
}

fn load_manifest_arg(path: &Path) -> Outcome<DatasetManifest> {
    require_file("--manifest", path)?;
    Ok(load_manifest(path)?)
}

/// Train one configuration into `dir`, evaluate it in every setting and
/// write `metrics.csv`. Returns the metrics path.
fn train_and_eval(
    data: &TrainSet<'_>,
    manifest: &DatasetManifest,
    cfg: &RunConfig,
    dir: &Path,
    label: &str,
    evaluate_after: bool,
) -> Outcome<Option<PathBuf>> {
    write(&dir.join(RESOLVED_CONFIG), &cfg.to_text())?;
    let vocab = cfg.vocabulary()?;
    let mut model_cfg = cfg.model_config(vocab.len(), data.num_classes());
    if let Some(img) = data.images.first() {
        model_cfg.height = img.height() as usize;
        model_cfg.width = img.width() as usize;
    }
    let outcome = train(data, &vocab, &model_cfg, &cfg.train_config(), &cfg.loss, dir)?;
    info!("{label}: checkpoint {}", outcome.checkpoint.display());
    if !evaluate_after {
        println!("{}", outcome.checkpoint.display());
        return Ok(None);
    }
    let checkpoint = Checkpoint::load(&outcome.checkpoint)?;
    let metrics = evaluate(&outcome.model, manifest, &Setting::ALL)?;
    let path = dir.join(METRICS_FILE);
    write(&path, &metrics_csv(&metrics, &tags(&checkpoint, label)))?;
    Ok(Some(path))
}

fn train_cmd(a: TrainArgs) -> Outcome {
    let cfg = load_config(&a.config)?;
    let manifest = load_manifest_arg(&a.manifest)?;
    let dir = run_dir("train", a.out.as_deref())?;
    let data = TrainSet::from_manifest(&manifest)?;
    let label = dir_label(&dir);
    train_and_eval(&data, &manifest, &cfg, &dir, &label, false)?;
    Ok(())
}

fn dir_label(dir: &Path) -> String {
    dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| "run".into())
}

/// Run tags from checkpoint metadata. Image-only runs carry no description,
/// so their ratios are left blank.
fn tags(checkpoint: &Checkpoint, run: &str) -> RunTags {
    let meta = &checkpoint.meta;
    let ratio = |k: &str| meta.get(k).and_then(|v| v.parse::<f64>().ok());
    let described = meta.get("description_policy").map(String::as_str) != Some("image-only");
    RunTags {
        run: run.to_string(),
        mask_ratio: ratio("mask_ratio").filter(|_| described),
        noise_ratio: ratio("noise_ratio").filter(|_| described),
    }
}

fn eval_cmd(a: EvalArgs) -> Outcome {
    require_file("--checkpoint", &a.checkpoint)?;
    let manifest = load_manifest_arg(&a.manifest)?;
    let checkpoint = Checkpoint::load(&a.checkpoint)?;
    let settings: Vec<Setting> = match a.setting {
        SettingArg::General => vec![Setting::General],
        SettingArg::Cc => vec![Setting::ClothChanging],
        SettingArg::Sc => vec![Setting::SameClothes],
        SettingArg::All => Setting::ALL.to_vec(),
    };
    let model: &Model = &checkpoint.model;
    let metrics = evaluate(model, &manifest, &settings)?;
    let run = a.run.clone().unwrap_or_else(|| {
        a.checkpoint
            .canonicalize()
            .ok()
            .and_then(|p| p.parent().map(dir_label))
            .unwrap_or_else(|| "run".into())
    });
    let out = match &a.out {
        Some(p) => {
            if let Some(parent) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(parent).map_err(|e| Error::Io { path: parent.to_path_buf(), source: e })?;
            }
            p.clone()
        }
        None => run_dir("eval", None)?.join(METRICS_FILE),
    };
    write(&out, &metrics_csv(&metrics, &tags(&checkpoint, &run)))?;
    for m in &metrics {
        println!(
            "{:<8} rank1 {:.4}  rank5 {:.4}  rank10 {:.4}  mAP {:.4}  ({} queries, {} skipped)",
            m.setting.name(),
            m.rank1,
            m.rank5,
            m.rank10,
            m.map,
            m.evaluated,
            m.skipped
        );
    }
    println!("{}", out.display());
    Ok(())
}

fn retention_cmd(a: RetentionArgs) -> Outcome {
    let manifest = load_manifest_arg(&a.manifest)?;
    let vocab = load_vocabulary(a.vocabulary.as_deref())?;
    let rule = retention_rules().create(&a.rule)?;
    let records = match a.split.as_str() {
        "all" => manifest.records.iter().collect(),
        s => manifest
            .split(Split::parse(s).ok_or_else(|| Failure::Usage(format!("unknown split `{s}`")))?),
    };
    let source: TableSource = match &a.attrs {
        Some(p) => {
            require_file("--attrs", p)?;
            TableSource::load(p, &vocab)?
        }
        None => manifest.attribute_source(),
    };
    let report = retention(&a.split, &records, &source, &vocab, rule.as_ref())?;
    let dir = run_dir("retention", a.out.as_deref())?;
    let path = dir.join("retention.csv");
    write(&path, &report.to_csv())?;
    for (cat, r) in &report.categories {
        println!("{:<12} {:.4}", cat.name(), r);
    }
    if report.excluded_identities > 0 {
        println!("({} single-image identities excluded)", report.excluded_identities);
    }
    println!("{}", path.display());
    Ok(())
}

fn ablation_cmd(a: AblationArgs) -> Outcome {
    for p in &a.inputs {
        require_file("--in", p)?;
    }
    let dir = run_dir("ablation", a.out.as_deref())?;
    let report = ablation_report(&a.inputs, &dir)?;
    println!("{}", report.table.display());
    for p in &report.plots {
        println!("{}", p.display());
    }
    Ok(())
}

/// Grid points for an ablation axis: `(label, mask_ratio, noise_ratio)`.
/// `None` keeps the configured value.
pub fn grid(axis: Axis) -> Vec<(String, Option<f64>, Option<f64>)> {
    match axis {
        Axis::Noise => [0.0, 0.05, 0.10, 0.15, 0.20]
            .iter()
            .map(|&p| (format!("noise_{:02}", (p * 100.0f64).round()), Some(1.0), Some(p)))
            .collect(),
        Axis::Mask => [0.3, 0.6, 0.9, 1.0]
            .iter()
            .map(|&r| (format!("mask_{:03}", (r * 100.0f64).round()), Some(r), None))
            .collect(),
    }
}

fn sweep(a: SweepArgs) -> Outcome {
    let base = load_config(&a.config)?;
    let dir = run_dir("sweep", a.out.as_deref())?;
    write(&dir.join(RESOLVED_CONFIG), &base.to_text())?;
    let manifest = match &a.manifest {
        Some(p) => load_manifest_arg(p)?,
        None => {
            let data_dir = dir.join("data");
            generate(&base.gen_config(), &base.vocabulary()?, &data_dir)?;
            load_manifest(data_dir.join(MANIFEST_FILE))?
        }
    };
    let data = TrainSet::from_manifest(&manifest)?;
    let mut inputs = Vec::new();
    for (label, mask, noise) in grid(a.axis) {
        let mut cfg = base.clone();
        cfg.set("description_policy", "masked")?;
        if let Some(m) = mask {
            cfg.set("mask_ratio", &m.to_string())?;
        }
        if let Some(p) = noise {
            cfg.set("noise_ratio", &p.to_string())?;
        }
        let run = dir.join(&label);
        fs::create_dir_all(&run).map_err(|e| Error::Io { path: run.clone(), source: e })?;
        info!("sweep point {label}");
        if let Some(metrics) = train_and_eval(&data, &manifest, &cfg, &run, &label, true)? {
            inputs.push(metrics);
        }
    }
    let report = ablation_report(&inputs, &dir)?;
    println!("{}", report.table.display());
    Ok(())
}
