use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use aquaforge_core::dataio::{index_corpus, load_pairs, MetaDataset};
use aquaforge_core::estimator::{init, load_checkpoint, save_checkpoint};
use aquaforge_core::metatrain::{enhance, fine_tune, meta_train, EpochRecord, FineTuneRecord};
use aquaforge_core::metrics::{
    mse, psnr_from_mse, ssim, uciqe, uiqm, UciqeReport, UiqmReport, SSIM_WINDOW,
};
use aquaforge_core::synthgen::{build_dataset, BuildOptions, MANIFEST_FILE};
use aquaforge_core::{io, WaterType};
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::Config;
use crate::{Command, ConfigArg, DataErrors, UsageError};

pub fn run(command: Command) -> Result<Value> {
    match command {
        Command::Synth {
            corpus,
            out,
            seed,
            draws_per_type,
            types,
            config,
        } => synth(corpus, &out, seed, draws_per_type, types, &config),
        Command::MetaTrain {
            data,
            out,
            init,
            seed,
            log,
            config,
        } => meta_train_cmd(data, &out, init, seed, log, &config),
        Command::Finetune {
            ck,
            pairs,
            out,
            seed,
            log,
            config,
        } => finetune_cmd(ck, pairs, &out, seed, log, &config),
        Command::Enhance {
            ck,
            input,
            out,
            emit_tb,
        } => enhance_cmd(&ck, &input, &out, emit_tb),
        Command::Eval {
            pred,
            reference,
            out,
        } => eval_cmd(&pred, reference.as_deref(), &out),
    }
}

fn load_config(arg: &ConfigArg) -> Result<Config> {
    Config::load(arg.config.as_deref()).map_err(|e| UsageError(format!("{e:#}")).into())
}

fn require(path: Option<PathBuf>, flag: &str) -> Result<PathBuf> {
    path.ok_or_else(|| UsageError(format!("{flag} is required (flag or config key)")).into())
}

fn sidecar(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// Appends one JSON document per line; remembers the first failure.
struct JsonLines {
    path: PathBuf,
    out: BufWriter<File>,
    failed: Option<std::io::Error>,
}

impl JsonLines {
    fn create(path: PathBuf) -> Result<Self> {
        let file = File::create(&path).with_context(|| format!("creating {}", path.display()))?;
        Ok(Self {
            path,
            out: BufWriter::new(file),
            failed: None,
        })
    }

    fn push(&mut self, record: &impl Serialize) {
        if self.failed.is_some() {
            return;
        }
        let line = serde_json::to_string(record).expect("records serialize");
        if let Err(e) = writeln!(self.out, "{line}").and_then(|_| self.out.flush()) {
            self.failed = Some(e);
        }
    }

    fn finish(self) -> Result<()> {
        match self.failed {
            Some(e) => Err(e).with_context(|| format!("writing {}", self.path.display())),
            None => Ok(()),
        }
    }
}

fn synth(
    corpus: Option<PathBuf>,
    out: &Path,
    seed: Option<u64>,
    draws_per_type: Option<usize>,
    types: Option<Vec<String>>,
    config: &ConfigArg,
) -> Result<Value> {
    let mut cfg = load_config(config)?;
    if corpus.is_some() {
        cfg.inputs.corpus = corpus;
    }
    if let Some(s) = seed {
        cfg.meta.seed = s;
    }
    if let Some(d) = draws_per_type {
        cfg.synth.draws_per_type = d;
    }
    if let Some(names) = types {
        cfg.synth.types = names
            .iter()
            .map(|n| {
                n.parse::<WaterType>()
                    .map_err(|e| UsageError(e.to_string()))
            })
            .collect::<std::result::Result<_, _>>()?;
    }
    if cfg.synth.draws_per_type == 0 || cfg.synth.types.is_empty() {
        return Err(UsageError("need at least one water type and one draw per type".into()).into());
    }
    let corpus = require(cfg.inputs.corpus.clone(), "--corpus")?;
    let index = index_corpus(&corpus)?;
    let opts = BuildOptions {
        seed: cfg.meta.seed,
        draws_per_type: cfg.synth.draws_per_type,
        types: cfg.synth.types.clone(),
        config: Some(cfg.to_json()),
    };
    let manifest = build_dataset(&index, out, &opts)?;
    Ok(json!({
        "manifest": out.join(MANIFEST_FILE),
        "distortions": manifest.distortions.len(),
        "images": manifest.images.len(),
        "degraded": manifest.samples.len(),
        "skipped": manifest.skipped,
        "warnings": index.warnings,
    }))
}

fn meta_train_cmd(
    data: Option<PathBuf>,
    out: &Path,
    init_ck: Option<PathBuf>,
    seed: Option<u64>,
    log: Option<PathBuf>,
    config: &ConfigArg,
) -> Result<Value> {
    let mut cfg = load_config(config)?;
    if data.is_some() {
        cfg.inputs.data = data;
    }
    if init_ck.is_some() {
        cfg.inputs.checkpoint = init_ck;
    }
    if let Some(s) = seed {
        cfg.meta.seed = s;
    }
    let data = require(cfg.inputs.data.clone(), "--data")?;
    let ds = MetaDataset::load(&data, cfg.meta.val_fraction, cfg.meta.seed)?;
    let params = match &cfg.inputs.checkpoint {
        Some(ck) => {
            let p = load_checkpoint(ck)?;
            cfg.arch = p.arch.clone();
            p
        }
        None => init(&cfg.arch, cfg.meta.seed)?,
    };
    write_json(&sidecar(out, ".config.json"), &cfg.to_json())?;
    let mut lines = JsonLines::create(log.unwrap_or_else(|| sidecar(out, ".log.jsonl")))?;
    let mut last: Option<EpochRecord> = None;
    let trained = meta_train(&ds, &cfg.meta, params, |r| {
        lines.push(r);
        last = Some(r.clone());
    })?;
    lines.finish()?;
    save_checkpoint(out, &trained)?;
    Ok(json!({
        "checkpoint": out,
        "train_configurations": ds.train.len(),
        "validation_configurations": ds.validation.len(),
        "last_epoch": last,
    }))
}

fn finetune_cmd(
    ck: Option<PathBuf>,
    pairs: Option<PathBuf>,
    out: &Path,
    seed: Option<u64>,
    log: Option<PathBuf>,
    config: &ConfigArg,
) -> Result<Value> {
    let mut cfg = load_config(config)?;
    if ck.is_some() {
        cfg.inputs.checkpoint = ck;
    }
    if pairs.is_some() {
        cfg.inputs.pairs = pairs;
    }
    if let Some(s) = seed {
        cfg.meta.seed = s;
    }
    let ck = require(cfg.inputs.checkpoint.clone(), "--ck")?;
    let pairs_dir = require(cfg.inputs.pairs.clone(), "--pairs")?;
    let params = load_checkpoint(&ck)?;
    cfg.arch = params.arch.clone();
    let set = load_pairs(&pairs_dir)?;
    if set.pairs.is_empty() {
        return Err(DataErrors {
            message: format!("no usable pairs in {}", pairs_dir.display()),
            details: set.warnings,
        }
        .into());
    }
    let examples: Vec<_> = set.pairs.iter().map(|p| p.to_example()).collect();
    write_json(&sidecar(out, ".config.json"), &cfg.to_json())?;
    let mut lines = JsonLines::create(log.unwrap_or_else(|| sidecar(out, ".log.jsonl")))?;
    let mut last: Option<FineTuneRecord> = None;
    let tuned = fine_tune(params, &examples, &cfg.meta, |r| {
        lines.push(r);
        last = Some(r.clone());
    })?;
    lines.finish()?;
    save_checkpoint(out, &tuned)?;
    Ok(json!({
        "checkpoint": out,
        "pairs": examples.len(),
        "warnings": set.warnings,
        "last_epoch": last,
    }))
}

fn png_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("listing {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|x| x == "png"))
        .collect();
    files.sort();
    Ok(files)
}

fn enhance_one(
    params: &aquaforge_core::ModelParams,
    input: &Path,
    out: &Path,
    emit_tb: bool,
) -> Result<()> {
    let img = io::read_png(input)?;
    let pred = enhance(params, &img)?;
    io::write_png(out, &pred.clean)?;
    if emit_tb {
        let stem = out.with_extension("");
        io::write_field(&sidecar(&stem, ".t.aqf"), &pred.transmission)?;
        io::write_field(&sidecar(&stem, ".b.aqf"), &pred.background)?;
    }
    Ok(())
}

fn enhance_cmd(ck: &Path, input: &Path, out: &Path, emit_tb: bool) -> Result<Value> {
    let params = load_checkpoint(ck)?;
    if !input.is_dir() {
        enhance_one(&params, input, out, emit_tb)?;
        return Ok(json!({ "enhanced": [out] }));
    }
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let mut written = Vec::new();
    let mut errors = Vec::new();
    for file in png_files(input)? {
        let target = out.join(file.file_name().expect("listed file has a name"));
        match enhance_one(&params, &file, &target, emit_tb) {
            Ok(()) => written.push(target),
            Err(e) => errors.push(format!("{}: {e:#}", file.display())),
        }
    }
    if !errors.is_empty() {
        return Err(DataErrors {
            message: format!(
                "{} of {} images failed",
                errors.len(),
                errors.len() + written.len()
            ),
            details: errors,
        }
        .into());
    }
    Ok(json!({ "enhanced": written }))
}

#[derive(Debug, Serialize)]
struct ImageScores {
    id: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    mse: Option<f64>,
    /// Absent when the images are identical.
    #[serde(skip_serializing_if = "Option::is_none")]
    psnr: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    ssim: Option<f64>,
    uiqm: UiqmReport,
    uciqe: UciqeReport,
}

fn find_reference(dir: &Path, pred: &Path) -> Option<PathBuf> {
    let name = pred.file_name()?;
    let stem = pred.file_stem()?.to_string_lossy();
    [dir.join(name), dir.join(format!("{stem}.ref.png"))]
        .into_iter()
        .find(|p| p.is_file())
}

fn mean_of(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

fn eval_cmd(pred_dir: &Path, ref_dir: Option<&Path>, out: &Path) -> Result<Value> {
    let files = png_files(pred_dir)?;
    if files.is_empty() {
        return Err(DataErrors {
            message: format!("no PNG images in {}", pred_dir.display()),
            details: vec![],
        }
        .into());
    }
    let mut scores = Vec::new();
    let mut errors = Vec::new();
    for file in &files {
        let id = file
            .file_stem()
            .unwrap_or_default()
            .to_string_lossy()
            .into_owned();
        let result = (|| -> Result<ImageScores> {
            let img = io::read_png(file)?;
            let mut s = ImageScores {
                id: id.clone(),
                mse: None,
                psnr: None,
                ssim: None,
                uiqm: uiqm(&img),
                uciqe: uciqe(&img),
            };
            if let Some(dir) = ref_dir {
                let ref_path = find_reference(dir, file).context("no reference image")?;
                let reference = io::read_png(&ref_path)?;
                let m = mse(&img, &reference)?;
                s.mse = Some(m);
                s.psnr = Some(psnr_from_mse(m)).filter(|v| v.is_finite());
                let (h, w) = img.shape();
                if h >= SSIM_WINDOW && w >= SSIM_WINDOW {
                    s.ssim = Some(ssim(&img, &reference)?);
                }
            }
            Ok(s)
        })();
        match result {
            Ok(s) => scores.push(s),
            Err(e) => errors.push(format!("{}: {e:#}", file.display())),
        }
    }
    if !errors.is_empty() {
        return Err(DataErrors {
            message: format!(
                "{} of {} images could not be scored",
                errors.len(),
                files.len()
            ),
            details: errors,
        }
        .into());
    }
    let mean_uiqm = UiqmReport::from_components(
        mean_of(scores.iter().map(|s| Some(s.uiqm.uicm))).unwrap_or(0.0),
        mean_of(scores.iter().map(|s| Some(s.uiqm.uism))).unwrap_or(0.0),
        mean_of(scores.iter().map(|s| Some(s.uiqm.uiconm))).unwrap_or(0.0),
    );
    let mean_uciqe = UciqeReport::from_components(
        mean_of(scores.iter().map(|s| Some(s.uciqe.sigma_c))).unwrap_or(0.0),
        mean_of(scores.iter().map(|s| Some(s.uciqe.con_l))).unwrap_or(0.0),
        mean_of(scores.iter().map(|s| Some(s.uciqe.mu_s))).unwrap_or(0.0),
    );
    let report = json!({
        "config": { "pred": pred_dir, "ref": ref_dir },
        "images": scores,
        "mean": {
            "mse": mean_of(scores.iter().map(|s| s.mse)),
            "psnr": mean_of(scores.iter().map(|s| s.psnr)),
            "ssim": mean_of(scores.iter().map(|s| s.ssim)),
            "uiqm": mean_uiqm,
            "uciqe": mean_uciqe,
        },
        "count": scores.len(),
    });
    write_json(out, &report)?;
    Ok(json!({ "report": out, "count": scores.len(), "mean": report["mean"] }))
}
