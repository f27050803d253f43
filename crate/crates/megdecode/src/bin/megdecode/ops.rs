//! Subcommand implementations. Every command that writes results also drops
//! a run manifest (resolved config, input hashes, seed) so outputs stay
//! traceable, and refuses to clobber existing files unless forced.

use std::collections::HashSet;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::Args;
use megdecode::baselines::{self, DEFAULT_ALPHA_GRID};
use megdecode::brain::{self, BrainModuleConfig, BrainModuleParams};
use megdecode::datastore::{self, LatentBank, PresentationRecord, SplitTag};
use megdecode::embeddings::{self, FeatureKind};
use megdecode::genmetrics::{self, ExampleScore, GrayImage, Provider};
use megdecode::linalg::{self, Mat};
use megdecode::losses::{ClipLossConfig, NormAxis, TemperatureMode};
use megdecode::preprocess::{self, ContinuousRecording};
use megdecode::report::{self, RunManifest, TsvTable};
use megdecode::retrieval::{self, RetrievalReport, RetrievalSet};
use megdecode::splits;
use megdecode::synth::{self, SynthConfig};
use megdecode::trainer::{self, EvalData, GridPoint, StopMetric, TrainConfig, TrainData, TrainSample};
use megdecode::windows::{self, WindowKind, WindowSpec};
use megdecode::{MegError, Result};

use crate::dataset::{
    adapted_model_config, parse_toml, parse_window, write_dataset, Dataset, DatasetMeta,
    LATENTS_FILE,
};

const TEST_TAGS: [SplitTag; 2] = [SplitTag::SmallTest, SplitTag::LargeTest];

fn group_thousands(n: usize) -> String {
    let digits = n.to_string();
    let mut out = String::with_capacity(digits.len() + digits.len() / 3);
    for (i, ch) in digits.chars().enumerate() {
        if i > 0 && (digits.len() - i) % 3 == 0 {
            out.push(',');
        }
        out.push(ch);
    }
    out
}

fn parse_float_list(s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|p| {
            p.trim()
                .parse::<f64>()
                .map_err(|_| MegError::Invalid(format!("bad number {:?} in list", p.trim())))
        })
        .collect()
}

fn parse_int_list(s: &str) -> Result<Vec<u64>> {
    s.split(',')
        .map(|p| {
            p.trim()
                .parse::<u64>()
                .map_err(|_| MegError::Invalid(format!("bad integer {:?} in list", p.trim())))
        })
        .collect()
}

fn read_id_lines(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path)?;
    let ids: Vec<String> = text.lines().map(|l| l.trim().to_string()).filter(|l| !l.is_empty()).collect();
    if ids.is_empty() {
        return Err(MegError::Format(format!("{} lists no ids", path.display())));
    }
    Ok(ids)
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T, force: bool) -> Result<()> {
    report::ensure_writable(path, force)?;
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let json = serde_json::to_string_pretty(value)
        .map_err(|e| MegError::Runtime(format!("serialization for {}: {e}", path.display())))?;
    std::fs::write(path, json)?;
    Ok(())
}

/// Run manifest next to a file output, named `<file>.run.json`.
fn write_manifest_beside(rm: &RunManifest, out_file: &Path) -> Result<()> {
    let mut name = out_file
        .file_name()
        .ok_or_else(|| MegError::Invalid(format!("{} has no file name", out_file.display())))?
        .to_os_string();
    name.push(".run.json");
    let json = serde_json::to_string_pretty(rm)
        .map_err(|e| MegError::Runtime(format!("manifest serialization: {e}")))?;
    std::fs::write(out_file.with_file_name(name), json)?;
    Ok(())
}

fn resolve_window(ds: &Dataset, window: Option<&str>) -> Result<Option<(usize, usize)>> {
    let Some(s) = window else { return Ok(None) };
    let (a, b) = parse_window(s)?;
    let spec = WindowSpec::new(a, b, WindowKind::Full)?;
    let range = windows::window_to_sample_range(&spec, ds.meta.t_min, ds.meta.sfreq, ds.t)?;
    Ok(Some(range))
}

fn bank_set(bank: &LatentBank, ids: &[String]) -> Result<RetrievalSet> {
    let flat = bank.gather(ids)?;
    let latents = Mat::from_vec(ids.len(), bank.dim, flat)?;
    RetrievalSet::new(latents, ids.to_vec(), vec![String::new(); ids.len()])
}

fn mat_from_rows(rows: Vec<Vec<f64>>) -> Result<Mat> {
    let n = rows.len();
    let d = rows.first().map(|r| r.len()).unwrap_or(0);
    let mut flat = Vec::with_capacity(n * d);
    for r in &rows {
        if r.len() != d {
            return Err(MegError::Shape("ragged feature rows".into()));
        }
        flat.extend_from_slice(r);
    }
    Mat::from_vec(n, d, flat)
}

/// Repetition-averaged retrieval of predictions against the unique ids they
/// query, with latents from `bank`.
fn retrieval_against_own_ids(
    preds: &Mat,
    keys: &[String],
    bank: &LatentBank,
) -> Result<RetrievalReport> {
    let (avg, ids) = retrieval::average_predictions(preds, keys)?;
    let set = bank_set(bank, &ids)?;
    retrieval::evaluate(&avg, &ids, &set, &[1, 5])
}

fn push_retrieval_rows(table: &mut TsvTable, set_name: &str, rep: &RetrievalReport) -> Result<()> {
    let rows = [
        ("top1", rep.topk.iter().find(|(k, _)| *k == 1).map(|(_, v)| *v).unwrap_or(f64::NAN)),
        ("top5", rep.top5),
        ("top5_sem", rep.top5_sem),
        ("median_relative_rank", rep.median_relative_rank),
        ("relative_rank_sem", rep.relative_rank_sem),
        ("n_queries", rep.ranks.len() as f64),
        ("set_size", rep.set_size as f64),
    ];
    for (metric, value) in rows {
        table.push(vec![set_name.to_string(), metric.to_string(), report::fmt_float(value)])?;
    }
    Ok(())
}

fn save_predictions(dir: &Path, stem: &str, preds: &Mat, keys: &[String], force: bool) -> Result<()> {
    let tensor_path = dir.join(format!("{stem}.megt"));
    report::ensure_writable(&tensor_path, force)?;
    datastore::write_tensor_f64(&tensor_path, &[preds.rows, preds.cols], &preds.data)?;
    let mut text = String::new();
    for k in keys {
        text.push_str(k);
        text.push('\n');
    }
    std::fs::write(dir.join(format!("{stem}.megt.ids")), text)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// synth-gen

#[derive(Args, Debug)]
pub struct SynthGenArgs {
    /// Generator config (TOML); built-in desk-scale defaults when omitted
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output dataset directory
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the config seed
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides the config signal-to-noise ratio
    #[arg(long)]
    pub snr: Option<f64>,
    #[arg(long)]
    pub force: bool,
}

pub fn synth_gen(args: &SynthGenArgs) -> Result<()> {
    let mut cfg: SynthConfig = match &args.config {
        Some(p) => parse_toml(p)?,
        None => SynthConfig::default(),
    };
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(s) = args.snr {
        cfg.snr = s;
    }
    let started = Instant::now();
    let data = synth::generate(&cfg)?;
    let meta = DatasetMeta { sfreq: cfg.sfreq, t_min: cfg.t_min };
    write_dataset(
        &args.out,
        &data.epochs,
        cfg.c,
        cfg.t,
        &data.manifest,
        &data.layout,
        &meta,
        args.force,
    )?;
    datastore::save_latent_bank(&args.out.join(LATENTS_FILE), &data.bank)?;

    // A model sized for this dataset, picked up by `train` when present.
    let subjects = cfg.subjects.max(1);
    let model = adapted_model_config(cfg.c, cfg.t, cfg.f, subjects);
    let model_toml = toml::to_string_pretty(&model)
        .map_err(|e| MegError::Runtime(format!("model config serialization: {e}")))?;
    std::fs::write(args.out.join("model.toml"), model_toml)?;

    let config_json = serde_json::to_value(&cfg)
        .map_err(|e| MegError::Runtime(format!("config serialization: {e}")))?;
    let mut rm = RunManifest::new("synth-gen", config_json, Some(cfg.seed));
    if let Some(p) = &args.config {
        rm.add_input(p)?;
    }
    rm.write(&args.out)?;

    let mut counts = Vec::new();
    for tag in SplitTag::ALL {
        let n = data.manifest.records_with_tag(tag).count();
        if n > 0 {
            counts.push(format!("{tag}={n}"));
        }
    }
    println!(
        "wrote {} epochs ({} ch x {} samples, {} subjects) to {} in {:.1}s",
        data.epochs.len(),
        cfg.c,
        cfg.t,
        subjects,
        args.out.display(),
        started.elapsed().as_secs_f64()
    );
    println!("splits: {}", counts.join(" "));
    Ok(())
}

// ---------------------------------------------------------------------------
// preprocess

#[derive(Args, Debug)]
pub struct PreprocessArgs {
    /// Continuous recording, rank-2 tensor (channels x samples)
    #[arg(long)]
    pub raw: PathBuf,
    /// Stimulus onsets, one sample index per line
    #[arg(long)]
    pub onsets: PathBuf,
    /// Presentation manifest, one record per onset
    #[arg(long)]
    pub manifest: PathBuf,
    /// Sensor layout TSV
    #[arg(long)]
    pub layout: PathBuf,
    /// Sampling rate of the raw recording (Hz)
    #[arg(long)]
    pub sfreq_in: f64,
    /// Target sampling rate (Hz)
    #[arg(long, default_value_t = 120.0)]
    pub sfreq: f64,
    /// Epoch start relative to onset (s)
    #[arg(long, default_value_t = preprocess::DEFAULT_T_MIN, allow_hyphen_values = true)]
    pub t_min: f64,
    /// Epoch end relative to onset (s)
    #[arg(long, default_value_t = preprocess::DEFAULT_T_MAX)]
    pub t_max: f64,
    /// Robust-scaler clamp, in scaled units
    #[arg(long, default_value_t = preprocess::DEFAULT_CLIP)]
    pub clip: f64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub force: bool,
}

fn read_onsets(path: &Path) -> Result<Vec<usize>> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let s = line.trim();
        if s.is_empty() {
            continue;
        }
        match s.parse::<usize>() {
            Ok(v) => out.push(v),
            // a single header line is fine; anything later is a bad value
            Err(_) if i == 0 => continue,
            Err(_) => {
                return Err(MegError::Format(format!(
                    "{}:{}: onset {s:?} is not a sample index",
                    path.display(),
                    i + 1
                )))
            }
        }
    }
    if out.is_empty() {
        return Err(MegError::Format(format!("{} lists no onsets", path.display())));
    }
    Ok(out)
}

pub fn run_preprocess(args: &PreprocessArgs) -> Result<()> {
    let (shape, data) = datastore::read_tensor_f64(&args.raw)?;
    if shape.len() != 2 {
        return Err(MegError::Shape(format!(
            "raw recording must be rank 2 (channels x samples), got shape {shape:?}"
        )));
    }
    let onsets = read_onsets(&args.onsets)?;
    let manifest = datastore::read_manifest(&args.manifest)?;
    if manifest.records.len() != onsets.len() {
        return Err(MegError::Shape(format!(
            "{} onsets but {} manifest records",
            onsets.len(),
            manifest.records.len()
        )));
    }
    let layout = datastore::read_layout(&args.layout)?;
    if layout.channels.len() != shape[0] {
        return Err(MegError::Shape(format!(
            "raw recording has {} channels but the layout lists {}",
            shape[0],
            layout.channels.len()
        )));
    }

    let mut rec = ContinuousRecording::new(data, shape[0], shape[1], args.sfreq_in, onsets)?;
    if args.sfreq != args.sfreq_in {
        rec = preprocess::downsample(&rec, args.sfreq)?;
    }
    let epochs = preprocess::epoch(&rec, args.t_min, args.t_max)?;
    let missing: Vec<usize> = epochs
        .iter()
        .enumerate()
        .filter_map(|(i, e)| e.is_none().then_some(i))
        .collect();
    if !missing.is_empty() {
        return Err(MegError::Invalid(format!(
            "{} events have incomplete epochs (first at record {}); extend the recording or narrow the epoch",
            missing.len(),
            missing[0]
        )));
    }
    let epochs: Vec<_> = epochs.into_iter().map(|e| e.unwrap()).collect();
    let corrected: Vec<_> = epochs.iter().map(preprocess::baseline_correct).collect::<Result<_>>()?;

    let train_epochs: Vec<_> = manifest
        .records
        .iter()
        .zip(&corrected)
        .filter(|(r, _)| r.split_tag == SplitTag::Train)
        .map(|(_, e)| e.clone())
        .collect();
    if train_epochs.is_empty() {
        return Err(MegError::Invalid(
            "no train-tagged records; the robust scaler must be fit on the training split".into(),
        ));
    }
    let scaler = preprocess::fit_robust_scaler(&train_epochs, args.clip)?;
    let scaled: Vec<_> = corrected
        .iter()
        .map(|e| preprocess::apply_scaler_clip(e, &scaler))
        .collect::<Result<_>>()?;

    let c = scaled[0].n_channels;
    let t = scaled[0].n_times;
    let slabs: Vec<Vec<f64>> = scaled.into_iter().map(|e| e.data).collect();
    let meta = DatasetMeta { sfreq: args.sfreq, t_min: args.t_min };
    write_dataset(&args.out, &slabs, c, t, &manifest, &layout, &meta, args.force)?;

    let config = serde_json::json!({
        "sfreq_in": args.sfreq_in, "sfreq": args.sfreq,
        "t_min": args.t_min, "t_max": args.t_max, "clip": args.clip,
    });
    let mut rm = RunManifest::new("preprocess", config, None);
    for p in [&args.raw, &args.onsets, &args.manifest, &args.layout] {
        rm.add_input(p)?;
    }
    rm.write(&args.out)?;

    let degenerate = scaler.degenerate.iter().filter(|&&d| d).count();
    println!(
        "preprocessed {} epochs ({c} ch x {t} samples at {} Hz) to {}",
        slabs.len(),
        args.sfreq,
        args.out.display()
    );
    if degenerate > 0 {
        println!("note: {degenerate} channels had a degenerate inter-quantile range");
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// make-splits

#[derive(Args, Debug)]
pub struct MakeSplitsArgs {
    /// Manifest to re-split
    #[arg(long)]
    pub manifest: PathBuf,
    /// Zero-shot scheme: held-out test images and their categories
    #[arg(long, value_parser = ["adapted", "hpsearch"], default_value = "adapted")]
    pub scheme: String,
    /// Image ids (one per line) forming the test set; required for `adapted`
    #[arg(long)]
    pub test_ids: Option<PathBuf>,
    #[arg(long, default_value_t = 0.1)]
    pub valid_fraction: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output manifest path
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub force: bool,
}

pub fn make_splits(args: &MakeSplitsArgs) -> Result<()> {
    report::ensure_writable(&args.out, args.force)?;
    let manifest = datastore::read_manifest(&args.manifest)?;
    let out_manifest = match args.scheme.as_str() {
        "adapted" => {
            let ids_path = args.test_ids.as_ref().ok_or_else(|| {
                MegError::Invalid("scheme `adapted` needs --test-ids".into())
            })?;
            let ids = read_id_lines(ids_path)?;
            splits::build_adapted_split(&manifest.records, &ids, args.valid_fraction, args.seed)?
                .to_manifest()
        }
        "hpsearch" => {
            let (train, valid, test) = splits::build_hpsearch_split(&manifest.records, args.seed)?;
            datastore::Manifest::new([train, valid, test].concat())
        }
        other => return Err(MegError::Invalid(format!("unknown scheme {other:?}"))),
    };
    if let Some(parent) = args.out.parent() {
        std::fs::create_dir_all(parent)?;
    }
    datastore::write_manifest(&args.out, &out_manifest)?;

    let config = serde_json::json!({
        "scheme": args.scheme, "valid_fraction": args.valid_fraction,
    });
    let mut rm = RunManifest::new("make-splits", config, Some(args.seed));
    rm.add_input(&args.manifest)?;
    if let Some(p) = &args.test_ids {
        rm.add_input(p)?;
    }
    write_manifest_beside(&rm, &args.out)?;

    let counts: Vec<String> = SplitTag::ALL
        .iter()
        .map(|&t| (t, out_manifest.records_with_tag(t).count()))
        .filter(|(_, n)| *n > 0)
        .map(|(t, n)| format!("{t}={n}"))
        .collect();
    println!("{} -> {}", counts.join(" "), args.out.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// extract-features

#[derive(Args, Debug)]
pub struct ExtractFeaturesArgs {
    /// Directory of PNG or PPM images; the file stem becomes the image id
    #[arg(long)]
    pub images: PathBuf,
    /// Feature family
    #[arg(long, default_value = "colorhist")]
    pub kind: String,
    /// Output bank path (.megt plus an .ids sidecar)
    #[arg(long)]
    pub out: PathBuf,
    /// Bank name stored in reports
    #[arg(long)]
    pub name: Option<String>,
    /// Image ids whose rows define the bank's train statistics
    #[arg(long)]
    pub train_ids: Option<PathBuf>,
    #[arg(long)]
    pub force: bool,
}

pub fn extract_features(args: &ExtractFeaturesArgs) -> Result<()> {
    report::ensure_writable(&args.out, args.force)?;
    let kind: FeatureKind = args.kind.parse()?;
    let name = args.name.clone().unwrap_or_else(|| args.kind.clone());

    let mut files: Vec<PathBuf> = std::fs::read_dir(&args.images)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            matches!(
                p.extension().and_then(|e| e.to_str()),
                Some("png") | Some("ppm")
            )
        })
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(MegError::Invalid(format!(
            "{} holds no .png or .ppm images",
            args.images.display()
        )));
    }

    // Content-addressed cache under MEGDECODE_CACHE, keyed by kind and bytes.
    let mut key_src = format!("{kind:?}\n");
    for f in &files {
        key_src.push_str(&format!("{}:{}\n", f.display(), report::sha256_file(f)?));
    }
    let key = report::sha256_hex(key_src.as_bytes());
    let cached_path = report::cache_dir().map(|d| d.join(format!("bank-{}.megt", &key[..16])));

    let (bank, cache_hit) = match &cached_path {
        Some(p) if p.exists() => (datastore::load_latent_bank(p, &name)?, true),
        _ => {
            let mut images = Vec::with_capacity(files.len());
            for f in &files {
                let stem = f
                    .file_stem()
                    .and_then(|s| s.to_str())
                    .ok_or_else(|| MegError::Invalid(format!("bad file name {}", f.display())))?;
                images.push((stem.to_string(), embeddings::load_image(f)?));
            }
            (embeddings::feature_bank(&images, kind, &name)?, false)
        }
    };

    let mut bank = bank;
    if let Some(p) = &args.train_ids {
        let ids: HashSet<String> = read_id_lines(p)?.into_iter().collect();
        bank.compute_train_stats(&ids)?;
    }
    datastore::save_latent_bank(&args.out, &bank)?;
    if let (Some(p), false) = (&cached_path, cache_hit) {
        if let Some(dir) = p.parent() {
            // best effort: a broken cache must not fail the extraction
            if std::fs::create_dir_all(dir).is_ok() {
                if let Err(e) = datastore::save_latent_bank(p, &bank) {
                    eprintln!("warning: could not populate cache {}: {e}", p.display());
                }
            }
        }
    }

    let config = serde_json::json!({
        "images": args.images.display().to_string(),
        "kind": args.kind, "n_images": files.len(), "content_key": key,
    });
    let mut rm = RunManifest::new("extract-features", config, None);
    if let Some(p) = &args.train_ids {
        rm.add_input(p)?;
    }
    write_manifest_beside(&rm, &args.out)?;

    println!(
        "{} features ({}-d) for {} images -> {}{}",
        name,
        bank.dim,
        bank.ids.len(),
        args.out.display(),
        if cache_hit { " (cache hit)" } else { "" }
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// train

#[derive(Args, Debug, Clone)]
pub struct TrainArgs {
    /// Dataset directory
    #[arg(long)]
    pub data: PathBuf,
    /// Target latent bank; defaults to latents.megt inside the dataset
    #[arg(long)]
    pub latents: Option<PathBuf>,
    /// Second bank for the MSE head (two-head models)
    #[arg(long)]
    pub mse_latents: Option<PathBuf>,
    /// Model config (TOML); falls back to the dataset's model.toml, then to
    /// a config sized from the data
    #[arg(long)]
    pub model_config: Option<PathBuf>,
    /// Optimization config (TOML)
    #[arg(long)]
    pub train_config: Option<PathBuf>,
    /// Restrict epochs to a time window, `start:end` in seconds
    #[arg(long, allow_hyphen_values = true)]
    pub window: Option<String>,
    /// Contrastive weight; overrides the train config
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Early-stop metric: val_loss or val_top5
    #[arg(long)]
    pub stop_metric: Option<String>,
    /// Fixed softmax temperature
    #[arg(long)]
    pub tau: Option<f64>,
    /// Learn the temperature, starting from this value
    #[arg(long)]
    pub learned_tau: Option<f64>,
    /// One-directional contrastive loss
    #[arg(long)]
    pub asymmetric: bool,
    /// Latent normalization: image_only or both
    #[arg(long)]
    pub norm_axis: Option<String>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub force: bool,
}

fn loss_config(args: &TrainArgs) -> Result<ClipLossConfig> {
    let mut cfg = ClipLossConfig::default();
    if args.asymmetric {
        cfg.symmetric = false;
    }
    if let Some(axis) = &args.norm_axis {
        cfg.norm_axis = match axis.as_str() {
            "image_only" => NormAxis::ImageOnly,
            "both" => NormAxis::Both,
            other => return Err(MegError::Invalid(format!("unknown norm axis {other:?}"))),
        };
    }
    cfg.temperature = match (args.tau, args.learned_tau) {
        (Some(_), Some(_)) => {
            return Err(MegError::Invalid("--tau and --learned-tau are exclusive".into()))
        }
        (Some(t), None) if t > 0.0 && t.is_finite() => TemperatureMode::Fixed { tau: t },
        (None, Some(t)) if t > 0.0 && t.is_finite() => TemperatureMode::Learned { log_tau: t.ln() },
        (None, None) => cfg.temperature,
        _ => return Err(MegError::Invalid("temperature must be positive and finite".into())),
    };
    Ok(cfg)
}

fn resolve_train_config(args: &TrainArgs) -> Result<TrainConfig> {
    let mut cfg: TrainConfig = match &args.train_config {
        Some(p) => parse_toml(p)?,
        None => TrainConfig::default(),
    };
    if let Some(l) = args.lambda {
        cfg.lambda = l;
    }
    if let Some(m) = &args.stop_metric {
        cfg.stop_metric = match m.as_str() {
            "val_loss" => StopMetric::ValLoss,
            "val_top5" => StopMetric::ValTop5,
            other => return Err(MegError::Invalid(format!("unknown stop metric {other:?}"))),
        };
    }
    cfg.validate()?;
    Ok(cfg)
}

fn resolve_model_config(
    explicit: Option<&Path>,
    ds: &Dataset,
    t_window: usize,
    f_out: usize,
) -> Result<BrainModuleConfig> {
    if let Some(p) = explicit {
        return parse_toml(p);
    }
    let default_path = ds.dir.join("model.toml");
    if t_window == ds.t && default_path.exists() {
        return parse_toml(&default_path);
    }
    Ok(adapted_model_config(ds.c, t_window, f_out, ds.subjects.len()))
}

fn load_mse_bank(path: Option<&Path>) -> Result<Option<LatentBank>> {
    path.map(|p| datastore::load_latent_bank(p, "mse-latents")).transpose()
}

pub fn run_train(args: &TrainArgs) -> Result<()> {
    report::ensure_writable(&args.out.join("report.json"), args.force)?;
    let ds = Dataset::load(&args.data)?;
    let bank = ds.load_bank(args.latents.as_deref())?;
    let mse_bank = load_mse_bank(args.mse_latents.as_deref())?;
    let win = resolve_window(&ds, args.window.as_deref())?;
    let t_window = win.map(|(_, len)| len).unwrap_or(ds.t);

    let data = TrainData {
        c: ds.c,
        t: t_window,
        train: ds.samples(&[SplitTag::Train], win)?,
        valid: ds.samples(&[SplitTag::Valid], win)?,
    };
    if data.valid.is_empty() {
        return Err(MegError::Invalid(
            "dataset has no valid-tagged records; run make-splits first".into(),
        ));
    }
    let model_cfg = resolve_model_config(args.model_config.as_deref(), &ds, t_window, bank.dim)?;
    let train_cfg = resolve_train_config(args)?;
    let loss_cfg = loss_config(args)?;

    let started = Instant::now();
    let (module, rep) = trainer::train(
        &model_cfg,
        &ds.layout,
        &data,
        &bank,
        mse_bank.as_ref(),
        &loss_cfg,
        &train_cfg,
        args.seed,
    )?;
    if rep.diverged {
        eprintln!("warning: training diverged; checkpoint holds the best pre-divergence epoch");
    }

    std::fs::create_dir_all(&args.out)?;
    brain::save_checkpoint(&args.out.join("checkpoint"), &model_cfg, &module.params)?;
    write_json(&args.out.join("report.json"), &rep, true)?;

    let mut table = TsvTable::new(vec!["set", "metric", "value"]);
    for tag in TEST_TAGS {
        let samples = ds.samples(&[tag], win)?;
        if samples.is_empty() {
            continue;
        }
        let (preds, keys) = trainer::predict(&module, &samples, train_cfg.batch)?;
        save_predictions(&args.out, &format!("preds_{tag}"), &preds, &keys, args.force)?;
        let retr = retrieval_against_own_ids(&preds, &keys, &bank)?;
        push_retrieval_rows(&mut table, tag.as_str(), &retr)?;
        println!(
            "{tag}: top5 {:.3} median_rel_rank {:.3} ({} images)",
            retr.top5,
            retr.median_relative_rank,
            retr.set_size
        );
    }
    table.write(&args.out.join("metrics.tsv"), true)?;

    let config = serde_json::json!({
        "model": model_cfg, "train": train_cfg, "loss": loss_cfg,
        "window": args.window, "data": args.data.display().to_string(),
    });
    let mut rm = RunManifest::new("train", config, Some(args.seed));
    rm.add_input(&ds.dir.join(crate::dataset::DATA_FILE))?;
    rm.write(&args.out)?;

    println!(
        "best epoch {} (stopped {}), valid loss {:.6} -> {:.6}, {:.1}s",
        rep.best_epoch,
        rep.stopping_epoch,
        rep.initial_valid_loss,
        rep.valid_losses.last().copied().unwrap_or(f64::NAN),
        started.elapsed().as_secs_f64()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// lambda-sweep

#[derive(Args, Debug)]
pub struct LambdaSweepArgs {
    #[command(flatten)]
    pub train: TrainArgs,
    /// Comma-separated lambda grid; overrides the train config
    #[arg(long)]
    pub grid: Option<String>,
}

pub fn lambda_sweep(args: &LambdaSweepArgs) -> Result<()> {
    let out = &args.train.out;
    report::ensure_writable(&out.join("sweep.tsv"), args.train.force)?;
    let ds = Dataset::load(&args.train.data)?;
    let bank = ds.load_bank(args.train.latents.as_deref())?;
    let mse_bank = load_mse_bank(args.train.mse_latents.as_deref())?;
    let win = resolve_window(&ds, args.train.window.as_deref())?;
    let t_window = win.map(|(_, len)| len).unwrap_or(ds.t);

    let data = TrainData {
        c: ds.c,
        t: t_window,
        train: ds.samples(&[SplitTag::Train], win)?,
        valid: ds.samples(&[SplitTag::Valid], win)?,
    };
    // model selection metric: retrieval on the large test set
    let eval_samples = ds.samples(&[SplitTag::LargeTest], win)?;
    if eval_samples.is_empty() {
        return Err(MegError::Invalid("lambda sweep needs large_test records".into()));
    }
    let eval = EvalData { set: trainer::own_latent_set(&eval_samples, &bank)?, samples: eval_samples };

    let model_cfg =
        resolve_model_config(args.train.model_config.as_deref(), &ds, t_window, bank.dim)?;
    let mut train_cfg = resolve_train_config(&args.train)?;
    if let Some(g) = &args.grid {
        train_cfg.lambda_grid = parse_float_list(g)?;
    }
    let loss_cfg = loss_config(&args.train)?;

    let (best, runs) = trainer::lambda_sweep(
        &model_cfg,
        &ds.layout,
        &data,
        &eval,
        &bank,
        mse_bank.as_ref(),
        &loss_cfg,
        &train_cfg,
        args.train.seed,
    )?;

    let mut table = TsvTable::new(vec!["lambda", "top5", "best_epoch", "stopping_epoch"]);
    for run in &runs {
        table.push(vec![
            report::fmt_float(run.lambda),
            report::fmt_float(run.top5),
            run.report.best_epoch.to_string(),
            run.report.stopping_epoch.to_string(),
        ])?;
        println!("lambda {:>5.2}: top5 {:.3}", run.lambda, run.top5);
    }
    std::fs::create_dir_all(out)?;
    table.write(&out.join("sweep.tsv"), true)?;

    let config = serde_json::json!({
        "model": model_cfg, "train": train_cfg, "loss": loss_cfg, "window": args.train.window,
    });
    let mut rm = RunManifest::new("lambda-sweep", config, Some(args.train.seed));
    rm.add_input(&ds.dir.join(crate::dataset::DATA_FILE))?;
    rm.write(out)?;

    println!("best lambda: {best}");
    Ok(())
}

// ---------------------------------------------------------------------------
// grid-search

#[derive(Args, Debug)]
pub struct GridSearchArgs {
    /// Search space (TOML): [[point]] tables with optional model/train overrides
    #[arg(long)]
    pub space: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub latents: Option<PathBuf>,
    #[arg(long)]
    pub mse_latents: Option<PathBuf>,
    /// Validation resamplings of the training pool
    #[arg(long, default_value_t = 1)]
    pub n_splits: usize,
    /// Comma-separated seeds
    #[arg(long, default_value = "0,1,2")]
    pub seeds: String,
    #[arg(long, allow_hyphen_values = true)]
    pub window: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub force: bool,
}

#[derive(serde::Deserialize)]
#[serde(deny_unknown_fields)]
struct SpaceToml {
    #[serde(default)]
    point: Vec<PointToml>,
}

#[derive(serde::Deserialize)]
#[serde(deny_unknown_fields)]
struct PointToml {
    name: String,
    /// Partial model table merged over the dataset-sized default.
    #[serde(default)]
    model: Option<toml::Value>,
    #[serde(default)]
    train: Option<TrainConfig>,
}

fn merged_model(base: &BrainModuleConfig, over: &toml::Value) -> Result<BrainModuleConfig> {
    let mut js = serde_json::to_value(base)
        .map_err(|e| MegError::Runtime(format!("model serialization: {e}")))?;
    let ov = serde_json::to_value(over)
        .map_err(|e| MegError::Format(format!("model override: {e}")))?;
    let (Some(obj), Some(oobj)) = (js.as_object_mut(), ov.as_object()) else {
        return Err(MegError::Format("model override must be a table".into()));
    };
    for (k, v) in oobj {
        obj.insert(k.clone(), v.clone());
    }
    serde_json::from_value(js).map_err(|e| MegError::Format(format!("model override: {e}")))
}

fn sample_for_records(
    ds: &Dataset,
    records: &[PresentationRecord],
    win: Option<(usize, usize)>,
) -> Result<Vec<TrainSample>> {
    use std::collections::HashMap;
    let mut rows: HashMap<(&str, u32, u32, u32), usize> = HashMap::new();
    for (i, r) in ds.manifest.records.iter().enumerate() {
        rows.insert((r.image_id.as_str(), r.subject_id, r.session, r.repetition_index), i);
    }
    let (first, len) = win.unwrap_or((0, ds.t));
    let mut out = Vec::with_capacity(records.len());
    for r in records {
        let key = (r.image_id.as_str(), r.subject_id, r.session, r.repetition_index);
        let &row = rows.get(&key).ok_or_else(|| {
            MegError::Invalid(format!("record {}/{} not present in the dataset", r.image_id, r.subject_id))
        })?;
        let epoch = ds.epoch(row);
        let mut x = Vec::with_capacity(ds.c * len);
        for ch in 0..ds.c {
            let chan = &epoch[ch * ds.t..(ch + 1) * ds.t];
            x.extend_from_slice(&chan[first..first + len]);
        }
        out.push(TrainSample { x, subject: ds.subject_index(r.subject_id)?, image_id: r.image_id.clone() });
    }
    Ok(out)
}

pub fn grid_search(args: &GridSearchArgs) -> Result<()> {
    report::ensure_writable(&args.out.join("ranked.tsv"), args.force)?;
    let ds = Dataset::load(&args.data)?;
    let bank = ds.load_bank(args.latents.as_deref())?;
    let mse_bank = load_mse_bank(args.mse_latents.as_deref())?;
    let win = resolve_window(&ds, args.window.as_deref())?;
    let t_window = win.map(|(_, len)| len).unwrap_or(ds.t);
    let seeds = parse_int_list(&args.seeds)?;

    let space_toml: SpaceToml = parse_toml(&args.space)?;
    if space_toml.point.is_empty() {
        return Err(MegError::Invalid(format!("{} defines no points", args.space.display())));
    }
    let base = resolve_model_config(None, &ds, t_window, bank.dim)?;
    let mut points = Vec::with_capacity(space_toml.point.len());
    for p in &space_toml.point {
        let model = match &p.model {
            Some(over) => merged_model(&base, over)?,
            None => base.clone(),
        };
        let train = p.train.clone().unwrap_or_default();
        train.validate()?;
        points.push(GridPoint {
            name: p.name.clone(),
            model,
            train,
            loss: ClipLossConfig::default(),
        });
    }

    let base_train = ds.manifest.records_with_tag(SplitTag::Train).cloned().collect::<Vec<_>>();
    let base_valid = ds.manifest.records_with_tag(SplitTag::Valid).cloned().collect::<Vec<_>>();
    if base_valid.is_empty() {
        return Err(MegError::Invalid("dataset has no validation split".into()));
    }
    let mut split_data = Vec::with_capacity(args.n_splits.max(1));
    split_data.push(TrainData {
        c: ds.c,
        t: t_window,
        train: sample_for_records(&ds, &base_train, win)?,
        valid: sample_for_records(&ds, &base_valid, win)?,
    });
    if args.n_splits > 1 {
        let pool: Vec<PresentationRecord> =
            base_train.iter().chain(&base_valid).cloned().collect();
        let fraction = base_valid.len() as f64 / pool.len() as f64;
        for k in 1..args.n_splits {
            let (tr, va) = splits::sample_validation(&pool, fraction, k as u64)?;
            split_data.push(TrainData {
                c: ds.c,
                t: t_window,
                train: sample_for_records(&ds, &tr, win)?,
                valid: sample_for_records(&ds, &va, win)?,
            });
        }
    }

    let ranked = trainer::grid_search(&points, &ds.layout, &split_data, &bank, mse_bank.as_ref(), &seeds)?;

    let mut table = TsvTable::new(vec!["rank", "name", "mean_top5", "sem", "n_cells"]);
    for (i, r) in ranked.iter().enumerate() {
        table.push(vec![
            (i + 1).to_string(),
            r.name.clone(),
            report::fmt_float(r.mean),
            report::fmt_float(r.sem),
            r.scores.len().to_string(),
        ])?;
        println!("{:>2}. {:<24} top5 {:.3} +/- {:.3}", i + 1, r.name, r.mean, r.sem);
    }
    std::fs::create_dir_all(&args.out)?;
    table.write(&args.out.join("ranked.tsv"), true)?;

    let config = serde_json::json!({
        "space": args.space.display().to_string(), "n_splits": args.n_splits,
        "seeds": seeds, "window": args.window,
    });
    let mut rm = RunManifest::new("grid-search", config, None);
    rm.add_input(&args.space)?;
    rm.add_input(&ds.dir.join(crate::dataset::DATA_FILE))?;
    rm.write(&args.out)?;

    println!("winner: {}", ranked[0].name);
    Ok(())
}

// ---------------------------------------------------------------------------
// eval-retrieval

#[derive(Args, Debug)]
pub struct EvalRetrievalArgs {
    /// Predicted latents, rank-2 tensor
    #[arg(long)]
    pub preds: PathBuf,
    /// Query image ids, one per row; defaults to `<preds>.ids`
    #[arg(long)]
    pub ids: Option<PathBuf>,
    /// Candidate latent bank
    #[arg(long)]
    pub bank: PathBuf,
    /// Restrict candidates to these ids (one per line)
    #[arg(long)]
    pub restrict: Option<PathBuf>,
    /// Average predictions sharing an image id before ranking
    #[arg(long)]
    pub average: bool,
    /// Z-score predictions onto the bank's train statistics first
    #[arg(long)]
    pub zscore: bool,
    /// Train ids used to compute bank statistics for --zscore
    #[arg(long)]
    pub train_ids: Option<PathBuf>,
    /// Comma-separated top-k accuracies to report
    #[arg(long, default_value = "1,5")]
    pub topk: String,
    /// Output report TSV
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub force: bool,
}

pub fn eval_retrieval(args: &EvalRetrievalArgs) -> Result<()> {
    report::ensure_writable(&args.out, args.force)?;
    let (shape, data) = datastore::read_tensor_f64(&args.preds)?;
    if shape.len() != 2 {
        return Err(MegError::Shape(format!(
            "predictions must be rank 2, got shape {shape:?}"
        )));
    }
    let mut preds = Mat::from_vec(shape[0], shape[1], data)?;
    let ids_path = args
        .ids
        .clone()
        .unwrap_or_else(|| PathBuf::from(format!("{}.ids", args.preds.display())));
    let mut ids = read_id_lines(&ids_path)?;
    if ids.len() != preds.rows {
        return Err(MegError::Shape(format!(
            "{} ids for {} prediction rows",
            ids.len(),
            preds.rows
        )));
    }
    let mut bank = datastore::load_latent_bank(&args.bank, "candidates")?;

    if args.zscore {
        let train_ids = args.train_ids.as_ref().ok_or_else(|| {
            MegError::Invalid("--zscore needs --train-ids to define bank statistics".into())
        })?;
        let set: HashSet<String> = read_id_lines(train_ids)?.into_iter().collect();
        bank.compute_train_stats(&set)?;
        let (z, degenerate) = embeddings::zscore_postprocess(&preds, &bank)?;
        if !degenerate.is_empty() {
            eprintln!("warning: {} constant prediction dims pinned to train means", degenerate.len());
        }
        preds = z;
    }
    if args.average {
        let (avg, uniq) = retrieval::average_predictions(&preds, &ids)?;
        preds = avg;
        ids = uniq;
    }

    let candidate_ids = match &args.restrict {
        Some(p) => read_id_lines(p)?,
        None => bank.ids.clone(),
    };
    let set = bank_set(&bank, &candidate_ids)?;
    let ks: Vec<usize> = parse_int_list(&args.topk)?.into_iter().map(|k| k as usize).collect();
    let rep = retrieval::evaluate(&preds, &ids, &set, &ks)?;

    let mut table = TsvTable::new(vec!["metric", "value"]);
    for (k, acc) in &rep.topk {
        table.push(vec![format!("top{k}"), report::fmt_float(*acc)])?;
        println!("top{k}: {acc:.4}");
    }
    for (name, value) in [
        ("top5_sem", rep.top5_sem),
        ("median_relative_rank", rep.median_relative_rank),
        ("relative_rank_sem", rep.relative_rank_sem),
        ("n_queries", rep.ranks.len() as f64),
        ("set_size", rep.set_size as f64),
    ] {
        table.push(vec![name.to_string(), report::fmt_float(value)])?;
    }
    table.write(&args.out, true)?;
    println!(
        "median relative rank: {:.4} over {} queries, {} candidates",
        rep.median_relative_rank,
        rep.ranks.len(),
        rep.set_size
    );

    let config = serde_json::json!({
        "average": args.average, "zscore": args.zscore, "topk": args.topk,
    });
    let mut rm = RunManifest::new("eval-retrieval", config, None);
    rm.add_input(&args.preds)?;
    rm.add_input(&args.bank)?;
    write_manifest_beside(&rm, &args.out)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// eval-generation

#[derive(Args, Debug)]
pub struct EvalGenerationArgs {
    /// Ground-truth images
    #[arg(long)]
    pub truth: PathBuf,
    /// Generated images, matched to truth by file stem
    #[arg(long)]
    pub generated: PathBuf,
    /// Comma-separated embedding providers for two-way accuracy
    #[arg(long, default_value = "thumb16,grayhist,gradhist")]
    pub providers: String,
    #[arg(long, default_value_t = genmetrics::DEFAULT_PIXCORR_SIDE)]
    pub pixcorr_side: usize,
    /// Qualitative selection: split ranking into this many blocks
    #[arg(long)]
    pub n_blocks: Option<usize>,
    /// Examples kept from the best, middle, and worst blocks
    #[arg(long)]
    pub per_block: Option<usize>,
    /// Output directory
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub force: bool,
}

fn gray_images(dir: &Path) -> Result<Vec<(String, GrayImage)>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| matches!(p.extension().and_then(|e| e.to_str()), Some("png") | Some("ppm")))
        .collect();
    files.sort();
    let mut out = Vec::with_capacity(files.len());
    for f in files {
        let stem = f
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| MegError::Invalid(format!("bad file name {}", f.display())))?
            .to_string();
        let img = embeddings::load_image(&f)?;
        out.push((stem, GrayImage::new(img.height, img.width, img.to_gray())?));
    }
    Ok(out)
}

pub fn eval_generation(args: &EvalGenerationArgs) -> Result<()> {
    report::ensure_writable(&args.out.join("report.tsv"), args.force)?;
    let truth = gray_images(&args.truth)?;
    let generated = gray_images(&args.generated)?;
    let gen_by_id: std::collections::HashMap<&str, &GrayImage> =
        generated.iter().map(|(id, img)| (id.as_str(), img)).collect();

    let mut ids = Vec::new();
    let mut trues = Vec::new();
    let mut gens = Vec::new();
    for (id, t) in &truth {
        if let Some(g) = gen_by_id.get(id.as_str()) {
            ids.push(id.clone());
            trues.push(t.clone());
            // metrics compare at the ground-truth resolution
            gens.push(g.resize(t.h, t.w)?);
        }
    }
    if ids.is_empty() {
        return Err(MegError::Invalid(
            "no generated image shares a file stem with a ground-truth image".into(),
        ));
    }

    let providers: Vec<Provider> = args
        .providers
        .split(',')
        .map(|p| Provider::parse(p.trim()))
        .collect::<Result<_>>()?;
    let rep = genmetrics::evaluate_pairs(&trues, &gens, &providers, args.pixcorr_side)?;

    std::fs::create_dir_all(&args.out)?;
    let mut table = TsvTable::new(vec!["metric", "provider", "value"]);
    table.push(vec!["n_pairs".into(), "-".into(), rep.n_pairs.to_string()])?;
    table.push(vec!["pixcorr".into(), "-".into(), report::fmt_float(rep.pixcorr_mean)])?;
    table.push(vec!["pixcorr_sem".into(), "-".into(), report::fmt_float(rep.pixcorr_sem)])?;
    table.push(vec!["ssim".into(), "-".into(), report::fmt_float(rep.ssim_mean)])?;
    table.push(vec!["ssim_sem".into(), "-".into(), report::fmt_float(rep.ssim_sem)])?;
    for (name, v) in &rep.two_way {
        table.push(vec!["two_way".into(), name.clone(), report::fmt_float(*v)])?;
    }
    for (name, v) in &rep.embedding_distance {
        table.push(vec!["embedding_distance".into(), name.clone(), report::fmt_float(*v)])?;
    }
    table.write(&args.out.join("report.tsv"), true)?;
    println!(
        "{} pairs: pixcorr {:.4}, ssim {:.4}",
        rep.n_pairs, rep.pixcorr_mean, rep.ssim_mean
    );
    for (name, v) in &rep.two_way {
        println!("two-way ({name}): {v:.4}");
    }

    if let (Some(n_blocks), Some(per_block)) = (args.n_blocks, args.per_block) {
        let embedder = providers.first().copied().ok_or_else(|| {
            MegError::Invalid("example selection needs at least one provider".into())
        })?;
        let mut scores = Vec::with_capacity(ids.len());
        for i in 0..ids.len() {
            let e_t = embedder.embed(&trues[i])?;
            let e_g = embedder.embed(&gens[i])?;
            scores.push(ExampleScore {
                id: ids[i].clone(),
                swav: 1.0 - linalg::pearson(&e_t, &e_g)?,
                ssim: rep.ssim[i],
            });
        }
        let picked = genmetrics::select_examples(&scores, n_blocks, per_block)?;
        let mut ex = TsvTable::new(vec!["block", "image_id", "swav_distance", "ssim"]);
        for (block, rows) in [("best", &picked.best), ("middle", &picked.middle), ("worst", &picked.worst)] {
            for &i in rows {
                ex.push(vec![
                    block.to_string(),
                    scores[i].id.clone(),
                    report::fmt_float(scores[i].swav),
                    report::fmt_float(scores[i].ssim),
                ])?;
            }
        }
        ex.write(&args.out.join("examples.tsv"), true)?;
        println!("examples: {} best / {} middle / {} worst", picked.best.len(), picked.middle.len(), picked.worst.len());
    }

    let config = serde_json::json!({
        "providers": args.providers, "pixcorr_side": args.pixcorr_side, "n_pairs": rep.n_pairs,
    });
    let rm = RunManifest::new("eval-generation", config, None);
    rm.write(&args.out)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// window-sweep

#[derive(Args, Debug)]
pub struct WindowSweepArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub latents: Option<PathBuf>,
    /// Enumeration: sliding or growing
    #[arg(long, value_parser = ["sliding", "growing"], default_value = "sliding")]
    pub kind: String,
    /// Sliding window width (s)
    #[arg(long, default_value_t = 0.1)]
    pub width: f64,
    /// Sliding stride / growing step (s)
    #[arg(long, default_value_t = 0.025)]
    pub stride: f64,
    /// Growing-window start (s)
    #[arg(long, default_value_t = -0.1, allow_hyphen_values = true)]
    pub start: f64,
    /// First growing-window end (s)
    #[arg(long, default_value_t = 0.0)]
    pub end_min: f64,
    /// Last growing-window end (s); defaults to the epoch end
    #[arg(long)]
    pub end_max: Option<f64>,
    /// Estimator per window: ridge or brain
    #[arg(long, value_parser = ["ridge", "brain"], default_value = "ridge")]
    pub estimator: String,
    /// Ridge penalty
    #[arg(long, default_value_t = 1e3)]
    pub alpha: f64,
    /// Optimization config for the brain estimator (TOML)
    #[arg(long)]
    pub train_config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Also write per-metric min-max normalized curves
    #[arg(long)]
    pub normalized: bool,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub force: bool,
}

pub fn window_sweep(args: &WindowSweepArgs) -> Result<()> {
    report::ensure_writable(&args.out.join("windows.tsv"), args.force)?;
    let ds = Dataset::load(&args.data)?;
    let bank = ds.load_bank(args.latents.as_deref())?;
    let epoch_end = ds.meta.t_end(ds.t);

    let specs = match args.kind.as_str() {
        "sliding" => windows::enumerate_sliding(ds.meta.t_min, epoch_end, args.width, args.stride)?,
        "growing" => windows::enumerate_growing(
            args.start,
            args.end_min,
            args.end_max.unwrap_or(epoch_end),
            args.stride,
        )?,
        other => return Err(MegError::Invalid(format!("unknown kind {other:?}"))),
    };
    println!("{} {} windows", specs.len(), args.kind);

    let train_cfg: TrainConfig = match &args.train_config {
        Some(p) => parse_toml(p)?,
        None => TrainConfig::default(),
    };

    let started = Instant::now();
    let rows = windows::window_sweep(&specs, |spec| {
        let (first, len) = windows::window_to_sample_range(spec, ds.meta.t_min, ds.meta.sfreq, ds.t)?;
        let win = Some((first, len));
        let (top5, median) = match args.estimator.as_str() {
            "ridge" => {
                let (x_rows, recs) = ds.flat_features(&[SplitTag::Train, SplitTag::Valid], win)?;
                let x = mat_from_rows(x_rows)?;
                let y_ids: Vec<&str> = recs.iter().map(|r| r.image_id.as_str()).collect();
                let mut y_flat = Vec::with_capacity(y_ids.len() * bank.dim);
                for id in &y_ids {
                    y_flat.extend_from_slice(bank.require(id)?);
                }
                let y = Mat::from_vec(y_ids.len(), bank.dim, y_flat)?;
                let model = baselines::fit(&x, &y, args.alpha)?;
                let (tx_rows, trecs) = ds.flat_features(&TEST_TAGS, win)?;
                let tx = mat_from_rows(tx_rows)?;
                let keys: Vec<String> = trecs.iter().map(|r| r.image_id.clone()).collect();
                let rep = retrieval_against_own_ids(&model.predict(&tx)?, &keys, &bank)?;
                (rep.top5, rep.median_relative_rank)
            }
            "brain" => {
                let data = TrainData {
                    c: ds.c,
                    t: len,
                    train: ds.samples(&[SplitTag::Train], win)?,
                    valid: ds.samples(&[SplitTag::Valid], win)?,
                };
                let model_cfg = adapted_model_config(ds.c, len, bank.dim, ds.subjects.len());
                let (module, _) = trainer::train(
                    &model_cfg,
                    &ds.layout,
                    &data,
                    &bank,
                    None,
                    &ClipLossConfig::default(),
                    &train_cfg,
                    args.seed,
                )?;
                let samples = ds.samples(&TEST_TAGS, win)?;
                let (preds, keys) = trainer::predict(&module, &samples, train_cfg.batch)?;
                let rep = retrieval_against_own_ids(&preds, &keys, &bank)?;
                (rep.top5, rep.median_relative_rank)
            }
            other => return Err(MegError::Invalid(format!("unknown estimator {other:?}"))),
        };
        println!(
            "  [{:+.3}, {:+.3}] top5 {:.3} median_rel_rank {:.3}",
            spec.t_start, spec.t_end, top5, median
        );
        Ok(vec![("top5".to_string(), top5), ("median_relative_rank".to_string(), median)])
    })?;

    std::fs::create_dir_all(&args.out)?;
    report::window_table(&rows)?.write(&args.out.join("windows.tsv"), true)?;
    if args.normalized {
        let curves = genmetrics::normalize_window_table(&rows)?;
        let mut norm = TsvTable::new(vec!["t_start", "t_end", "midpoint", "metric", "value"]);
        for (name, values) in &curves {
            for (spec, v) in rows.iter().map(|r| &r.spec).zip(values) {
                norm.push(vec![
                    report::fmt_float(spec.t_start),
                    report::fmt_float(spec.t_end),
                    report::fmt_float(spec.midpoint()),
                    name.clone(),
                    report::fmt_float(*v),
                ])?;
            }
        }
        norm.write(&args.out.join("windows_normalized.tsv"), true)?;
    }

    let config = serde_json::json!({
        "kind": args.kind, "estimator": args.estimator, "alpha": args.alpha,
        "width": args.width, "stride": args.stride,
        "start": args.start, "end_min": args.end_min, "end_max": args.end_max,
        "n_windows": specs.len(),
    });
    let mut rm = RunManifest::new("window-sweep", config, Some(args.seed));
    rm.add_input(&ds.dir.join(crate::dataset::DATA_FILE))?;
    rm.write(&args.out)?;

    let best = rows
        .iter()
        .max_by(|a, b| a.metrics[0].1.total_cmp(&b.metrics[0].1))
        .expect("nonempty sweep");
    println!(
        "best window [{:+.3}, {:+.3}] top5 {:.3}; swept in {:.1}s",
        best.spec.t_start,
        best.spec.t_end,
        best.metrics[0].1,
        started.elapsed().as_secs_f64()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// baseline-ridge

#[derive(Args, Debug)]
pub struct BaselineRidgeArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub latents: Option<PathBuf>,
    /// Fixed penalty; exclusive with --cv
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Pick alpha by k-fold cross-validation
    #[arg(long)]
    pub cv: bool,
    /// Comma-separated CV grid; defaults to 1e0..1e6
    #[arg(long)]
    pub alphas: Option<String>,
    #[arg(long, default_value_t = 5)]
    pub folds: usize,
    #[arg(long, allow_hyphen_values = true)]
    pub window: Option<String>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub force: bool,
}

pub fn baseline_ridge(args: &BaselineRidgeArgs) -> Result<()> {
    report::ensure_writable(&args.out.join("metrics.tsv"), args.force)?;
    if args.alpha.is_some() && args.cv {
        return Err(MegError::Invalid("--alpha and --cv are exclusive".into()));
    }
    let ds = Dataset::load(&args.data)?;
    let bank = ds.load_bank(args.latents.as_deref())?;
    let win = resolve_window(&ds, args.window.as_deref())?;

    let (x_rows, recs) = ds.flat_features(&[SplitTag::Train, SplitTag::Valid], win)?;
    if x_rows.is_empty() {
        return Err(MegError::Invalid("no train or valid records to fit on".into()));
    }
    let x = mat_from_rows(x_rows)?;
    let mut y_flat = Vec::with_capacity(recs.len() * bank.dim);
    for r in &recs {
        y_flat.extend_from_slice(bank.require(&r.image_id)?);
    }
    let y = Mat::from_vec(recs.len(), bank.dim, y_flat)?;

    let started = Instant::now();
    let (model, cv_report) = if args.cv {
        let grid = match &args.alphas {
            Some(s) => parse_float_list(s)?,
            None => DEFAULT_ALPHA_GRID.to_vec(),
        };
        let (m, rep) = baselines::fit_cv(&x, &y, &grid, args.folds, args.seed)?;
        (m, Some(rep))
    } else {
        (baselines::fit(&x, &y, args.alpha.unwrap_or(1e3))?, None)
    };
    println!(
        "ridge alpha {:.3e} fit on {} rows x {} features in {:.1}s",
        model.alpha,
        x.rows,
        x.cols,
        started.elapsed().as_secs_f64()
    );

    std::fs::create_dir_all(&args.out)?;
    let mut table = TsvTable::new(vec!["set", "metric", "value"]);
    for tag in TEST_TAGS {
        let (tx_rows, trecs) = ds.flat_features(&[tag], win)?;
        if tx_rows.is_empty() {
            continue;
        }
        let tx = mat_from_rows(tx_rows)?;
        let preds = model.predict(&tx)?;
        let keys: Vec<String> = trecs.iter().map(|r| r.image_id.clone()).collect();
        save_predictions(&args.out, &format!("preds_{tag}"), &preds, &keys, args.force)?;
        let rep = retrieval_against_own_ids(&preds, &keys, &bank)?;
        push_retrieval_rows(&mut table, tag.as_str(), &rep)?;
        println!(
            "{tag}: top5 {:.3} median_rel_rank {:.3} ({} images)",
            rep.top5, rep.median_relative_rank, rep.set_size
        );
    }
    table.write(&args.out.join("metrics.tsv"), true)?;

    if let Some(rep) = &cv_report {
        let mut cv = TsvTable::new(vec!["alpha", "pooled_mse"]);
        for (a, m) in rep.alphas.iter().zip(&rep.mse) {
            cv.push(vec![report::fmt_float(*a), report::fmt_float(*m)])?;
        }
        cv.write(&args.out.join("cv.tsv"), true)?;
        println!("cv picked alpha {:.3e} over {} folds", rep.best_alpha, rep.n_folds);
    }
    write_json(&args.out.join("model.json"), &model, true)?;

    let config = serde_json::json!({
        "alpha": model.alpha, "cv": args.cv, "folds": args.folds, "window": args.window,
    });
    let mut rm = RunManifest::new("baseline-ridge", config, Some(args.seed));
    rm.add_input(&ds.dir.join(crate::dataset::DATA_FILE))?;
    rm.write(&args.out)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// model-summarize

#[derive(Args, Debug)]
pub struct ModelSummarizeArgs {
    /// Model config (TOML); the reference architecture when omitted
    #[arg(long)]
    pub model_config: Option<PathBuf>,
}

pub fn model_summarize(args: &ModelSummarizeArgs) -> Result<()> {
    let cfg: BrainModuleConfig = match &args.model_config {
        Some(p) => parse_toml(p)?,
        None => BrainModuleConfig::default(),
    };
    let params = BrainModuleParams::zeros(&cfg)?;
    let (rows, total) = brain::count_params(&params);
    let name_w = rows.iter().map(|(n, _)| n.len()).max().unwrap_or(0).max("component".len());
    println!("{:<name_w$}  {:>12}", "component", "parameters");
    for (name, count) in &rows {
        println!("{name:<name_w$}  {:>12}", group_thousands(*count));
    }
    println!("{:<name_w$}  {:>12}", "total", group_thousands(total));
    Ok(())
}

// ---------------------------------------------------------------------------
// inspect

#[derive(Args, Debug)]
pub struct InspectArgs {
    /// Tensor, bank, manifest, layout, JSON report, checkpoint or dataset dir
    pub path: PathBuf,
}

fn inspect_tensor(path: &Path) -> Result<()> {
    let header = datastore::read_header(path)?;
    println!(
        "tensor v{} f32 shape {:?} ({} values)",
        header.version,
        header.shape,
        header.len()
    );
    let ids = PathBuf::from(format!("{}.ids", path.display()));
    if ids.exists() {
        // a sidecar with repeated ids is a prediction table, not a bank
        match datastore::load_latent_bank(path, "bank") {
            Ok(bank) => println!("latent bank: {} ids x {} dims", bank.ids.len(), bank.dim),
            Err(_) => println!("id sidecar: {} rows", read_id_lines(&ids)?.len()),
        }
    }
    Ok(())
}

fn inspect_tsv(path: &Path) -> Result<()> {
    if let Ok(man) = datastore::read_manifest(path) {
        println!("manifest: {} records", man.records.len());
        for tag in SplitTag::ALL {
            let n = man.records_with_tag(tag).count();
            if n > 0 {
                let images: HashSet<&str> =
                    man.records_with_tag(tag).map(|r| r.image_id.as_str()).collect();
                println!("  {tag}: {n} records, {} images", images.len());
            }
        }
        if let (Some(s), Some(l)) = (man.small_test_reps, man.large_test_reps) {
            println!("  reps: small_test={s} large_test={l}");
        }
        return Ok(());
    }
    if let Ok(layout) = datastore::read_layout(path) {
        println!("sensor layout: {} channels", layout.channels.len());
        return Ok(());
    }
    Err(MegError::Format(format!(
        "{} is neither a manifest nor a layout",
        path.display()
    )))
}

fn inspect_dir(path: &Path) -> Result<()> {
    if path.join("config.json").exists() {
        let (cfg, params) = brain::load_checkpoint(path)?;
        let (_, total) = brain::count_params(&params);
        println!(
            "checkpoint: {} params, c_in={} t={} f_out={} subjects={} finite={}",
            group_thousands(total),
            cfg.c_in,
            cfg.t,
            cfg.f_out,
            cfg.n_subjects,
            params.all_finite()
        );
        return Ok(());
    }
    if path.join(crate::dataset::DATA_FILE).exists() {
        let ds = Dataset::load(path)?;
        println!(
            "dataset: {} epochs x {} ch x {} samples, {} Hz, t_min {}",
            ds.n, ds.c, ds.t, ds.meta.sfreq, ds.meta.t_min
        );
        for tag in SplitTag::ALL {
            let n = ds.manifest.records_with_tag(tag).count();
            if n > 0 {
                println!("  {tag}: {n} records");
            }
        }
        let bank_path = path.join(LATENTS_FILE);
        if bank_path.exists() {
            let bank = datastore::load_latent_bank(&bank_path, "latents")?;
            println!("  latents: {} ids x {} dims", bank.ids.len(), bank.dim);
        }
        return Ok(());
    }
    Err(MegError::Invalid(format!(
        "{} is neither a checkpoint nor a dataset directory",
        path.display()
    )))
}

pub fn inspect(args: &InspectArgs) -> Result<()> {
    let path = &args.path;
    if path.is_dir() {
        return inspect_dir(path);
    }
    match path.extension().and_then(|e| e.to_str()) {
        Some("megt") => inspect_tensor(path),
        Some("tsv") => inspect_tsv(path),
        Some("json") => {
            let value: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(path)?)
                .map_err(|e| MegError::Format(format!("{}: {e}", path.display())))?;
            println!("{}", serde_json::to_string_pretty(&value).unwrap_or_default());
            Ok(())
        }
        Some("ids") => {
            let ids = read_id_lines(path)?;
            println!("{} ids ({} ... {})", ids.len(), ids[0], ids[ids.len() - 1]);
            Ok(())
        }
        _ => Err(MegError::Format(format!(
            "cannot inspect {}: unknown format",
            path.display()
        ))),
    }
}

// ---------------------------------------------------------------------------
// convert

#[derive(Args, Debug)]
pub struct ConvertArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long)]
    pub force: bool,
}

fn ext_of(p: &Path) -> &str {
    p.extension().and_then(|e| e.to_str()).unwrap_or("")
}

fn tensor_to_tsv(input: &Path, output: &Path, force: bool) -> Result<()> {
    let (shape, data) = datastore::read_tensor_f64(input)?;
    let (rows, cols) = match shape.len() {
        1 => (shape[0], 1),
        2 => (shape[0], shape[1]),
        n => {
            return Err(MegError::Shape(format!(
                "cannot tabulate a rank-{n} tensor; slice it first"
            )))
        }
    };
    let ids_file = PathBuf::from(format!("{}.ids", input.display()));
    let ids = if ids_file.exists() { Some(read_id_lines(&ids_file)?) } else { None };
    if let Some(ids) = &ids {
        if ids.len() != rows {
            return Err(MegError::Shape(format!(
                "{} ids for {} tensor rows",
                ids.len(),
                rows
            )));
        }
    }

    let mut columns: Vec<String> = Vec::new();
    if ids.is_some() {
        columns.push("id".into());
    }
    columns.extend((0..cols).map(|j| format!("f{j}")));
    let mut table = TsvTable::new(columns);
    for i in 0..rows {
        let mut row = Vec::with_capacity(cols + 1);
        if let Some(ids) = &ids {
            row.push(ids[i].clone());
        }
        row.extend(data[i * cols..(i + 1) * cols].iter().map(|v| report::fmt_float(*v)));
        table.push(row)?;
    }
    table.write(output, force)?;
    println!("{rows} x {cols} tensor -> {}", output.display());
    Ok(())
}

fn tsv_to_tensor(input: &Path, output: &Path, force: bool) -> Result<()> {
    report::ensure_writable(output, force)?;
    let text = std::fs::read_to_string(input)?;
    let mut ids: Vec<String> = Vec::new();
    let mut values: Vec<f64> = Vec::new();
    let mut cols = 0usize;
    let mut rows = 0usize;
    let mut with_ids = false;
    for (ln, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if rows == 0 && ln == 0 && fields.iter().any(|f| f.parse::<f64>().is_err()) {
            // header row; an `id` first column switches on the sidecar
            with_ids = fields.first() == Some(&"id");
            continue;
        }
        let start = usize::from(with_ids);
        if with_ids {
            ids.push(fields[0].to_string());
        }
        let n_vals = fields.len() - start;
        if cols == 0 {
            cols = n_vals;
        } else if n_vals != cols {
            return Err(MegError::Format(format!(
                "{}:{}: {} values, expected {}",
                input.display(),
                ln + 1,
                n_vals,
                cols
            )));
        }
        for f in &fields[start..] {
            values.push(f.parse::<f64>().map_err(|_| {
                MegError::Format(format!("{}:{}: bad number {f:?}", input.display(), ln + 1))
            })?);
        }
        rows += 1;
    }
    if rows == 0 {
        return Err(MegError::Format(format!("{} holds no data rows", input.display())));
    }
    datastore::write_tensor_f64(output, &[rows, cols], &values)?;
    if with_ids {
        let mut text = String::new();
        for id in &ids {
            text.push_str(id);
            text.push('\n');
        }
        std::fs::write(PathBuf::from(format!("{}.ids", output.display())), text)?;
    }
    println!("{rows} x {cols} table -> {}", output.display());
    Ok(())
}

pub fn convert(args: &ConvertArgs) -> Result<()> {
    match (ext_of(&args.input), ext_of(&args.output)) {
        ("megt", "tsv") => tensor_to_tsv(&args.input, &args.output, args.force),
        ("tsv", "megt") => tsv_to_tensor(&args.input, &args.output, args.force),
        (a, b) => Err(MegError::Invalid(format!(
            "cannot convert .{a} to .{b}; supported: megt<->tsv"
        ))),
    }
}
