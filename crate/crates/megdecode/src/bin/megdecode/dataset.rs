//! On-disk dataset directories shared by the pipeline commands.
//!
//! A dataset directory is the unit every downstream command consumes:
//!
//! ```text
//! dataset/
//!   data.megt         f32 tensor, epochs x channels x times, manifest order
//!   manifest.tsv      presentation records with split tags
//!   layout.tsv        sensor layout
//!   meta.json         sampling rate and epoch start time
//!   latents.megt      target latent bank (plus latents.megt.ids)
//! ```

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use megdecode::brain::{Aggregation, BrainModuleConfig, HeadLayout};
use megdecode::datastore::{
    self, LatentBank, Manifest, PresentationRecord, SensorLayout, SplitTag,
};
use megdecode::trainer::TrainSample;
use megdecode::{MegError, Result};
use serde::{Deserialize, Serialize};

pub const DATA_FILE: &str = "data.megt";
pub const MANIFEST_FILE: &str = "manifest.tsv";
pub const LAYOUT_FILE: &str = "layout.tsv";
pub const META_FILE: &str = "meta.json";
pub const LATENTS_FILE: &str = "latents.megt";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub sfreq: f64,
    pub t_min: f64,
}

impl DatasetMeta {
    pub fn t_end(&self, n_times: usize) -> f64 {
        self.t_min + (n_times.saturating_sub(1)) as f64 / self.sfreq
    }
}

pub struct Dataset {
    pub dir: PathBuf,
    pub n: usize,
    pub c: usize,
    pub t: usize,
    pub data: Vec<f64>,
    pub manifest: Manifest,
    pub layout: SensorLayout,
    pub meta: DatasetMeta,
    /// Sorted unique subject ids; position in this list is the model index.
    pub subjects: Vec<u32>,
}

impl Dataset {
    pub fn load(dir: &Path) -> Result<Self> {
        let (shape, data) = datastore::read_tensor_f64(&dir.join(DATA_FILE))?;
        if shape.len() != 3 {
            return Err(MegError::Shape(format!(
                "{} must be a rank-3 tensor, got rank {}",
                DATA_FILE,
                shape.len()
            )));
        }
        let (n, c, t) = (shape[0], shape[1], shape[2]);
        let manifest = datastore::read_manifest(&dir.join(MANIFEST_FILE))?;
        if manifest.records.len() != n {
            return Err(MegError::Shape(format!(
                "{} has {} epochs but the manifest lists {} records",
                DATA_FILE,
                n,
                manifest.records.len()
            )));
        }
        let layout = datastore::read_layout(&dir.join(LAYOUT_FILE))?;
        if layout.channels.len() != c {
            return Err(MegError::Shape(format!(
                "data has {} channels but the layout lists {}",
                c,
                layout.channels.len()
            )));
        }
        let meta: DatasetMeta = serde_json::from_str(&std::fs::read_to_string(dir.join(META_FILE))?)
            .map_err(|e| MegError::Format(format!("{META_FILE}: {e}")))?;
        let subjects: Vec<u32> = manifest
            .records
            .iter()
            .map(|r| r.subject_id)
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        Ok(Dataset { dir: dir.to_path_buf(), n, c, t, data, manifest, layout, meta, subjects })
    }

    pub fn epoch(&self, i: usize) -> &[f64] {
        &self.data[i * self.c * self.t..(i + 1) * self.c * self.t]
    }

    pub fn subject_index(&self, id: u32) -> Result<usize> {
        self.subjects
            .binary_search(&id)
            .map_err(|_| MegError::Invalid(format!("unknown subject id {id}")))
    }

    /// Builds training samples for the given split tags, optionally sliced to
    /// a window of `len` samples starting at `first`.
    pub fn samples(
        &self,
        tags: &[SplitTag],
        window: Option<(usize, usize)>,
    ) -> Result<Vec<TrainSample>> {
        let (first, len) = window.unwrap_or((0, self.t));
        if first + len > self.t {
            return Err(MegError::Shape(format!(
                "window [{first}, {}) exceeds {} samples",
                first + len,
                self.t
            )));
        }
        let mut out = Vec::new();
        for (i, rec) in self.manifest.records.iter().enumerate() {
            if !tags.contains(&rec.split_tag) {
                continue;
            }
            let epoch = self.epoch(i);
            let mut x = Vec::with_capacity(self.c * len);
            for ch in 0..self.c {
                let row = &epoch[ch * self.t..(ch + 1) * self.t];
                x.extend_from_slice(&row[first..first + len]);
            }
            out.push(TrainSample {
                x,
                subject: self.subject_index(rec.subject_id)?,
                image_id: rec.image_id.clone(),
            });
        }
        Ok(out)
    }

    /// Flat ridge features (window slice, channel major) for the given tags,
    /// returned with the matching records.
    pub fn flat_features(
        &self,
        tags: &[SplitTag],
        window: Option<(usize, usize)>,
    ) -> Result<(Vec<Vec<f64>>, Vec<&PresentationRecord>)> {
        let (first, len) = window.unwrap_or((0, self.t));
        let mut rows = Vec::new();
        let mut recs = Vec::new();
        for (i, rec) in self.manifest.records.iter().enumerate() {
            if !tags.contains(&rec.split_tag) {
                continue;
            }
            rows.push(megdecode::baselines::epoch_features(
                self.epoch(i),
                self.c,
                self.t,
                first,
                len,
            )?);
            recs.push(rec);
        }
        Ok((rows, recs))
    }

    pub fn load_bank(&self, explicit: Option<&Path>) -> Result<LatentBank> {
        let path = match explicit {
            Some(p) => p.to_path_buf(),
            None => self.dir.join(LATENTS_FILE),
        };
        datastore::load_latent_bank(&path, "latents")
    }
}

/// Writes a dataset directory. `epochs` are row-major C x T slabs in manifest
/// record order.
pub fn write_dataset(
    dir: &Path,
    epochs: &[Vec<f64>],
    c: usize,
    t: usize,
    manifest: &Manifest,
    layout: &SensorLayout,
    meta: &DatasetMeta,
    force: bool,
) -> Result<()> {
    if epochs.len() != manifest.records.len() {
        return Err(MegError::Shape(format!(
            "{} epochs vs {} manifest records",
            epochs.len(),
            manifest.records.len()
        )));
    }
    megdecode::report::ensure_writable(&dir.join(DATA_FILE), force)?;
    std::fs::create_dir_all(dir)?;
    let mut flat = Vec::with_capacity(epochs.len() * c * t);
    for ep in epochs {
        if ep.len() != c * t {
            return Err(MegError::Shape(format!("epoch has {} values, expected {}", ep.len(), c * t)));
        }
        flat.extend(ep.iter().map(|&v| v as f32));
    }
    datastore::write_tensor(&dir.join(DATA_FILE), &[epochs.len(), c, t], &flat)?;
    datastore::write_manifest(&dir.join(MANIFEST_FILE), manifest)?;
    datastore::write_layout(&dir.join(LAYOUT_FILE), layout)?;
    let json = serde_json::to_string_pretty(meta)
        .map_err(|e| MegError::Runtime(format!("meta serialization: {e}")))?;
    std::fs::write(dir.join(META_FILE), json)?;
    Ok(())
}

/// A model sized for whatever data is at hand. The stock defaults assume
/// the full 272-sensor rig; desk-scale runs need every dimension derived
/// from the dataset instead.
pub fn adapted_model_config(c: usize, t: usize, f_out: usize, n_subjects: usize) -> BrainModuleConfig {
    BrainModuleConfig {
        c_in: c,
        c_att: c.saturating_sub(2).max(1),
        d: 64,
        n_blocks: 2,
        f_proj: 256,
        t,
        fourier_k: 8,
        n_subjects,
        aggregation: Aggregation::Affine,
        head_blocks: 1,
        f_out,
        head_layout: HeadLayout::ClipOnly,
        f_out_mse: None,
    }
}

/// Parses "a:b" into a closed time window.
pub fn parse_window(s: &str) -> Result<(f64, f64)> {
    let parts: Vec<&str> = s.split(':').collect();
    if parts.len() != 2 {
        return Err(MegError::Invalid(format!("window {s:?} must be start:end in seconds")));
    }
    let a: f64 = parts[0]
        .trim()
        .parse()
        .map_err(|_| MegError::Invalid(format!("bad window start {:?}", parts[0])))?;
    let b: f64 = parts[1]
        .trim()
        .parse()
        .map_err(|_| MegError::Invalid(format!("bad window end {:?}", parts[1])))?;
    if !(a.is_finite() && b.is_finite() && b > a) {
        return Err(MegError::Invalid(format!("window {s:?} must satisfy start < end")));
    }
    Ok((a, b))
}

pub fn parse_toml<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)?;
    toml::from_str(&text).map_err(|e| MegError::Format(format!("{}: {e}", path.display())))
}
