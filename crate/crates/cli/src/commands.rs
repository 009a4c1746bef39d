use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use mmvenc::config::RunConfig;
use mmvenc::data::{generate_synthetic, load_dataset, save_dataset, Dataset, SynthSpec};
use mmvenc::encoder::{load_checkpoint, save_checkpoint, Checkpoint, ModelConfig};
use mmvenc::eval::{
    comparisons_csv, fingerprint, hemisphere_reports, report_svg, reports_csv, run_ablation,
    AblationConfig, Arm,
};
use mmvenc::train::{trace_csv, train, voxel_correlations, FoldSplit, TrainingData};

use crate::manifest::{content_hash, dataset_fingerprint, RunManifest, Staging};
use crate::{AblateArgs, Cli, Command, EvalArgs, SynthArgs, TrainArgs};

pub fn run(cli: &Cli) -> Result<PathBuf> {
    let out = cli
        .out
        .as_deref()
        .context("an output directory is required (--out DIR)")?;
    let mut log = |msg: &str| {
        if !cli.quiet {
            eprintln!("{msg}");
        }
    };
    match &cli.command {
        Command::Synth(a) => synth(a, cli.seed, out, &mut log),
        Command::Train(a) => train_cmd(a, cli.seed, out, &mut log),
        Command::Eval(a) => eval_cmd(a, cli.seed, out, &mut log),
        Command::Ablate(a) => ablate(a, cli.seed, out, &mut log),
    }
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn load_data(dir: &Path) -> Result<Dataset> {
    if !dir.is_dir() {
        bail!("dataset directory {} does not exist", dir.display());
    }
    load_dataset(dir).with_context(|| format!("loading dataset {}", dir.display()))
}

fn run_config(
    file: Option<&Path>,
    overrides: &[String],
    seed: Option<u64>,
) -> Result<RunConfig> {
    let mut cfg = match file {
        Some(p) => RunConfig::from_toml_str(&read_text(p)?)
            .with_context(|| format!("in config {}", p.display()))?,
        None => RunConfig::default(),
    };
    for o in overrides {
        let (k, v) = o
            .split_once('=')
            .with_context(|| format!("override `{o}` is not KEY=VALUE"))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(s) = seed {
        cfg.set("seed", &s.to_string())?;
    }
    Ok(cfg)
}

fn config_json(cfg: &RunConfig) -> Result<serde_json::Value> {
    Ok(serde_json::to_value(cfg)?)
}

fn synth(a: &SynthArgs, seed: Option<u64>, out: &Path, log: &mut dyn FnMut(&str)) -> Result<PathBuf> {
    let mut spec = match &a.spec {
        Some(p) => SynthSpec::from_toml_str(&read_text(p)?)
            .with_context(|| format!("in spec {}", p.display()))?,
        None => SynthSpec::default(),
    };
    if let Some(n) = a.samples {
        spec.n_samples = n;
    }
    if let Some(s) = a.noise_sigma {
        spec.noise_sigma = s;
    }
    if let Some(f) = a.text_dependence {
        spec.text_dependence_fraction = f;
    }
    if let Some(s) = seed {
        spec.seed = s;
    }
    spec.validate()?;
    log(&format!("generating {} samples", spec.n_samples));
    let dataset = generate_synthetic(&spec)?;
    let stage = Staging::new(out)?;
    save_dataset(stage.path(), &dataset)?;
    let mut m = RunManifest::new("synth", serde_json::to_value(&spec)?, spec.seed);
    m.dataset_fingerprint = Some(dataset_fingerprint(stage.path())?);
    m.write(stage.path())?;
    stage.commit()
}

fn train_cmd(a: &TrainArgs, seed: Option<u64>, out: &Path, log: &mut dyn FnMut(&str)) -> Result<PathBuf> {
    let dataset = load_data(&a.data)?;
    let mut overrides = a.overrides.clone();
    if let Some(m) = a.mode {
        overrides.push(format!("mode={m}"));
    }
    if let Some(e) = a.epochs {
        overrides.push(format!("epochs={e}"));
    }
    if let Some(lr) = a.lr {
        overrides.push(format!("base_lr={lr:e}"));
    }
    if let Some(b) = a.batch_size {
        overrides.push(format!("batch_size={b}"));
    }
    let mut cfg = run_config(a.config.as_deref(), &overrides, seed)?;
    cfg.fit_dataset(&dataset)?;
    if a.fold >= cfg.train.folds {
        bail!("fold index {} out of range for {} folds", a.fold, cfg.train.folds);
    }
    let data = TrainingData::from_dataset(&dataset, cfg.model.text_length);
    data.check_compatible(&cfg.model, dataset.vocab.len())?;
    let split = FoldSplit::new(dataset.len(), a.fold, &cfg.train)?;
    log(&format!(
        "training {} model, fold {}, {} epochs, seq len {}",
        cfg.model.mode,
        a.fold,
        cfg.train.epochs,
        cfg.model.seq_len()
    ));
    let outcome = train(&cfg.model, &data, &split, &cfg.train)?;
    for r in &outcome.trace {
        log(&format!(
            "epoch {:>3} lr {:.2e} loss {:.4} val median R {:.4}",
            r.epoch, r.lr, r.train_loss, r.val_median_r
        ));
    }
    let stage = Staging::new(out)?;
    let ckpt = Checkpoint {
        config: cfg.model.clone(),
        params: outcome.params,
        seed: cfg.train.seed,
        epoch: outcome.best_epoch.map_or(cfg.train.epochs, |e| e + 1),
    };
    save_checkpoint(stage.path(), &ckpt)?;
    write_text(&stage.path().join("trace.csv"), &trace_csv(&outcome.trace))?;
    let mut m = RunManifest::new("train", config_json(&cfg)?, cfg.train.seed);
    m.dataset_fingerprint = Some(dataset_fingerprint(&a.data)?);
    m.params_hash = Some(content_hash(&stage.path().join("params.bin"))?);
    m.mode = Some(cfg.model.mode.to_string());
    m.seq_len = Some(cfg.model.seq_len());
    m.fold = Some(a.fold);
    m.write(stage.path())?;
    stage.commit()
}

fn check_dims(model: &ModelConfig, dataset: &Dataset) -> Result<()> {
    let data = TrainingData::from_dataset(dataset, model.text_length);
    data.check_compatible(model, dataset.vocab.len())?;
    Ok(())
}

fn eval_cmd(a: &EvalArgs, seed: Option<u64>, out: &Path, log: &mut dyn FnMut(&str)) -> Result<PathBuf> {
    let ckpt = load_checkpoint(&a.checkpoint)
        .with_context(|| format!("loading checkpoint {}", a.checkpoint.display()))?;
    let dataset = load_data(&a.data)?;
    check_dims(&ckpt.config, &dataset)?;
    let mut cfg = run_config(a.config.as_deref(), &[], None)?;
    cfg.train.seed = seed.unwrap_or(ckpt.seed);
    cfg.model = ckpt.config.clone();
    if a.fold >= cfg.train.folds {
        bail!("fold index {} out of range for {} folds", a.fold, cfg.train.folds);
    }
    let split = FoldSplit::new(dataset.len(), a.fold, &cfg.train)?;
    let data = TrainingData::from_dataset(&dataset, ckpt.config.text_length);
    log(&format!("evaluating on {} held-out stimuli", split.test.len()));
    let r = voxel_correlations(&ckpt.config, &ckpt.params, &data, &split.test)?;
    let params_hash = content_hash(&a.checkpoint.join("params.bin"))?;
    let run_id = format!("{}-fold{}-{}", ckpt.config.mode, a.fold, &params_hash[..12]);
    let fp = fingerprint(&(&ckpt.config, &cfg.train));
    let reports = hemisphere_reports(&dataset, &r, a.fold, &run_id, &fp)?;
    let stage = Staging::new(out)?;
    for rep in &reports {
        let h = rep.hemisphere;
        write_text(
            &stage.path().join(format!("report_{h}.csv")),
            &reports_csv(std::slice::from_ref(rep))?,
        )?;
        if a.svg {
            write_text(&stage.path().join(format!("report_{h}.svg")), &report_svg(rep))?;
        }
        log(&format!("{h}: all-vertices median R {:.4}", rep.all_vertices()));
    }
    write_text(
        &stage.path().join("report.json"),
        &serde_json::to_string_pretty(&reports)?,
    )?;
    let mut m = RunManifest::new("eval", config_json(&cfg)?, cfg.train.seed);
    m.dataset_fingerprint = Some(dataset_fingerprint(&a.data)?);
    m.params_hash = Some(params_hash);
    m.mode = Some(ckpt.config.mode.to_string());
    m.seq_len = Some(ckpt.config.seq_len());
    m.fold = Some(a.fold);
    m.write(stage.path())?;
    stage.commit()
}

fn ablate(a: &AblateArgs, seed: Option<u64>, out: &Path, log: &mut dyn FnMut(&str)) -> Result<PathBuf> {
    let dataset = load_data(&a.data)?;
    let mut overrides = a.overrides.clone();
    if let Some(e) = a.epochs {
        overrides.push(format!("epochs={e}"));
    }
    if let Some(n) = a.caption_noise {
        overrides.push(format!("caption_noise={n}"));
    }
    let mut cfg = run_config(a.config.as_deref(), &overrides, seed)?;
    cfg.fit_dataset(&dataset)?;
    let mut ab = AblationConfig::new(cfg.model.clone(), cfg.train.clone());
    ab.caption_noise = cfg.caption_noise;
    ab.extended_factor = cfg.extended_factor;
    ab.folds = a.folds.clone();
    if let Some(folds) = &ab.folds {
        if let Some(f) = folds.iter().find(|&&f| f >= cfg.train.folds) {
            bail!("fold index {f} out of range for {} folds", cfg.train.folds);
        }
    }
    if let Some(arms) = &a.arms {
        ab.arms = arms
            .iter()
            .map(|s| s.parse::<Arm>())
            .collect::<mmvenc::Result<_>>()?;
    }
    let result = run_ablation(&dataset, &ab, log)?;
    let stage = Staging::new(out)?;
    let reports_dir = stage.path().join("reports");
    let cmp_dir = stage.path().join("comparisons");
    let trace_dir = stage.path().join("traces");
    for d in [&reports_dir, &cmp_dir, &trace_dir] {
        fs::create_dir_all(d)?;
    }
    for &arm in &ab.arms {
        write_text(
            &reports_dir.join(format!("{arm}.csv")),
            &reports_csv(&result.reports(arm))?,
        )?;
        if arm != Arm::Multimodal && ab.arms.contains(&Arm::Multimodal) {
            write_text(
                &cmp_dir.join(format!("{arm}_vs_multimodal.csv")),
                &comparisons_csv(&result.comparisons(arm)),
            )?;
        }
    }
    for run in &result.runs {
        write_text(
            &trace_dir.join(format!("{}.csv", run.run_id)),
            &trace_csv(&run.trace),
        )?;
    }
    write_text(&stage.path().join("summary.csv"), &result.summary_csv())?;
    let mut m = RunManifest::new("ablate", serde_json::to_value(&ab)?, cfg.train.seed);
    m.dataset_fingerprint = Some(dataset_fingerprint(&a.data)?);
    m.write(stage.path())?;
    stage.commit()
}
