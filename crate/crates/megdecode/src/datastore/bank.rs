//! Latent banks: a named matrix of precomputed image embeddings keyed by
//! image id, with per-feature statistics over the training split.
//!
//! On disk a bank is a `[N, F]` tensor file plus a sibling `<path>.ids` text
//! file with one image id per line, row order matching the tensor.

use std::collections::{HashMap, HashSet};
use std::path::{Path, PathBuf};

use crate::datastore::tensor;
use crate::error::{MegError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainStats {
    pub mean: Vec<f64>,
    /// Population standard deviation (ddof = 0), strictly positive.
    pub std: Vec<f64>,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatentBank {
    pub name: String,
    pub ids: Vec<String>,
    pub dim: usize,
    data: Vec<f64>,
    index: HashMap<String, usize>,
    stats: Option<TrainStats>,
}

impl LatentBank {
    pub fn new(name: &str, ids: Vec<String>, dim: usize, data: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(MegError::Invalid("latent bank with zero feature dim".into()));
        }
        if data.len() != ids.len() * dim {
            return Err(MegError::Shape(format!(
                "bank {name:?}: {} values for {} ids × {dim} features",
                data.len(),
                ids.len()
            )));
        }
        for (row, id) in ids.iter().enumerate() {
            let slice = &data[row * dim..(row + 1) * dim];
            if slice.iter().any(|v| !v.is_finite()) {
                return Err(MegError::NonFinite(format!(
                    "bank {name:?} row for image {id:?}"
                )));
            }
        }
        let mut index = HashMap::with_capacity(ids.len());
        for (row, id) in ids.iter().enumerate() {
            if index.insert(id.clone(), row).is_some() {
                return Err(MegError::Invalid(format!(
                    "bank {name:?} has duplicate id {id:?}"
                )));
            }
        }
        Ok(LatentBank { name: name.to_string(), ids, dim, data, index, stats: None })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn row(&self, row: usize) -> &[f64] {
        &self.data[row * self.dim..(row + 1) * self.dim]
    }

    pub fn get(&self, id: &str) -> Option<&[f64]> {
        self.index.get(id).map(|&row| self.row(row))
    }

    pub fn require(&self, id: &str) -> Result<&[f64]> {
        self.get(id).ok_or_else(|| {
            MegError::Invalid(format!("bank {:?} has no entry for image {id:?}", self.name))
        })
    }

    /// Rows for `ids`, in order, as one dense N×F buffer.
    pub fn gather(&self, ids: &[String]) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(ids.len() * self.dim);
        for id in ids {
            out.extend_from_slice(self.require(id)?);
        }
        Ok(out)
    }

    pub fn train_stats(&self) -> Option<&TrainStats> {
        self.stats.as_ref()
    }

    /// Per-feature mean/std over the bank entries named in `train_ids`,
    /// cached on the bank. Single-pass (Welford); the tests check it against
    /// a direct two-pass computation. Needs at least two training entries and
    /// strictly positive spread in every feature.
    pub fn compute_train_stats(&mut self, train_ids: &HashSet<String>) -> Result<&TrainStats> {
        let rows: Vec<usize> = self
            .ids
            .iter()
            .enumerate()
            .filter(|(_, id)| train_ids.contains(id.as_str()))
            .map(|(row, _)| row)
            .collect();
        if rows.len() < 2 {
            return Err(MegError::Invalid(format!(
                "bank {:?}: train statistics need >= 2 training entries, found {}",
                self.name,
                rows.len()
            )));
        }
        let mut mean = vec![0.0; self.dim];
        let mut m2 = vec![0.0; self.dim];
        for (k, &row) in rows.iter().enumerate() {
            let v = self.row(row);
            let inv = 1.0 / (k + 1) as f64;
            for f in 0..self.dim {
                let delta = v[f] - mean[f];
                mean[f] += delta * inv;
                m2[f] += delta * (v[f] - mean[f]);
            }
        }
        let n = rows.len();
        let mut std = vec![0.0; self.dim];
        for f in 0..self.dim {
            std[f] = (m2[f] / n as f64).sqrt();
            if std[f] <= 0.0 {
                return Err(MegError::Invalid(format!(
                    "bank {:?}: feature {f} is constant over the training split",
                    self.name
                )));
            }
        }
        self.stats = Some(TrainStats { mean, std, n });
        Ok(self.stats.as_ref().unwrap())
    }
}

fn ids_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_os_string();
    s.push(".ids");
    PathBuf::from(s)
}

pub fn load_latent_bank(path: &Path, name: &str) -> Result<LatentBank> {
    let (shape, data) = tensor::read_tensor_f64(path)?;
    if shape.len() != 2 {
        return Err(MegError::Shape(format!(
            "bank tensor must be rank 2 [N, F], got shape {shape:?}"
        )));
    }
    let ids_file = ids_path(path);
    let text = std::fs::read_to_string(&ids_file).map_err(|e| {
        MegError::Format(format!("cannot read id list {}: {e}", ids_file.display()))
    })?;
    let ids: Vec<String> = text.lines().map(|l| l.to_string()).collect();
    if ids.len() != shape[0] {
        return Err(MegError::Shape(format!(
            "bank has {} rows but id list has {} entries",
            shape[0],
            ids.len()
        )));
    }
    LatentBank::new(name, ids, shape[1], data)
}

pub fn save_latent_bank(path: &Path, bank: &LatentBank) -> Result<()> {
    tensor::write_tensor_f64(path, &[bank.len(), bank.dim], bank_rows(bank))?;
    let mut text = String::new();
    for id in &bank.ids {
        text.push_str(id);
        text.push('\n');
    }
    std::fs::write(ids_path(path), text)?;
    Ok(())
}

fn bank_rows(bank: &LatentBank) -> &[f64] {
    &bank.data
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use tempfile::tempdir;

    fn bank_3x2() -> LatentBank {
        LatentBank::new(
            "toy",
            vec!["a".into(), "b".into(), "c".into()],
            2,
            vec![1.0, 10.0, 2.0, 20.0, 3.0, 60.0],
        )
        .unwrap()
    }

    #[test]
    fn lookup_by_id() {
        let bank = bank_3x2();
        assert_eq!(bank.get("b"), Some(&[2.0, 20.0][..]));
        assert!(bank.get("zzz").is_none());
    }

    #[test]
    fn nan_row_rejected() {
        let err = LatentBank::new("bad", vec!["a".into()], 2, vec![1.0, f64::NAN]);
        assert!(matches!(err, Err(MegError::NonFinite(_))));
    }

    #[test]
    fn stats_match_two_pass_oracle() {
        let mut bank = bank_3x2();
        let train: HashSet<String> = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
        let stats = bank.compute_train_stats(&train).unwrap().clone();

        // independent two-pass computation
        for f in 0..2 {
            let vals: Vec<f64> = (0..3).map(|r| bank.row(r)[f]).collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            assert_abs_diff_eq!(stats.mean[f], mean, epsilon = 1e-12);
            assert_abs_diff_eq!(stats.std[f], var.sqrt(), epsilon = 1e-12);
        }
        assert_eq!(stats.n, 3);
    }

    #[test]
    fn stats_use_training_entries_only() {
        let mut bank = bank_3x2();
        let train: HashSet<String> = ["a", "b"].iter().map(|s| s.to_string()).collect();
        let stats = bank.compute_train_stats(&train).unwrap();
        assert_abs_diff_eq!(stats.mean[0], 1.5, epsilon = 1e-12);
        assert_abs_diff_eq!(stats.std[0], 0.5, epsilon = 1e-12);
        assert_eq!(stats.n, 2);
    }

    #[test]
    fn stats_need_two_train_entries() {
        let mut bank = bank_3x2();
        let train: HashSet<String> = ["a"].iter().map(|s| s.to_string()).collect();
        assert!(bank.compute_train_stats(&train).is_err());
        assert!(bank.train_stats().is_none());
    }

    #[test]
    fn constant_train_feature_rejected() {
        let mut bank = LatentBank::new(
            "flat",
            vec!["a".into(), "b".into()],
            2,
            vec![5.0, 1.0, 5.0, 2.0],
        )
        .unwrap();
        let train: HashSet<String> = ["a", "b"].iter().map(|s| s.to_string()).collect();
        assert!(matches!(
            bank.compute_train_stats(&train),
            Err(MegError::Invalid(_))
        ));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("bank.megt");
        let bank = bank_3x2();
        save_latent_bank(&path, &bank).unwrap();
        let loaded = load_latent_bank(&path, "toy").unwrap();
        assert_eq!(loaded.ids, bank.ids);
        assert_eq!(loaded.dim, 2);
        assert_eq!(loaded.row(2), &[3.0, 60.0]);
    }

    #[test]
    fn id_count_mismatch_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("bank.megt");
        save_latent_bank(&path, &bank_3x2()).unwrap();
        std::fs::write(dir.path().join("bank.megt.ids"), "a\nb\n").unwrap();
        assert!(matches!(
            load_latent_bank(&path, "toy"),
            Err(MegError::Shape(_))
        ));
    }
}
