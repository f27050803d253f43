//! Retrieval evaluation: cosine ranking against a candidate bank, top-k
//! accuracy, and relative median rank, with repetition averaging.

use std::collections::HashMap;

use crate::error::{MegError, Result};
use crate::linalg::{dot, norm, quantile_sorted, Mat};

/// Candidate latents plus identity; may contain never-seen distractors.
#[derive(Debug, Clone)]
pub struct RetrievalSet {
    pub latents: Mat,
    pub image_ids: Vec<String>,
    pub category_ids: Vec<String>,
}

impl RetrievalSet {
    pub fn new(latents: Mat, image_ids: Vec<String>, category_ids: Vec<String>) -> Result<Self> {
        if latents.rows != image_ids.len() || latents.rows != category_ids.len() {
            return Err(MegError::Shape(format!(
                "{} latent rows, {} image ids, {} category ids",
                latents.rows,
                image_ids.len(),
                category_ids.len()
            )));
        }
        if latents.rows == 0 {
            return Err(MegError::Invalid("empty retrieval set".into()));
        }
        if !latents.is_finite() {
            return Err(MegError::NonFinite("non-finite candidate latents".into()));
        }
        let mut seen = HashMap::new();
        for (i, id) in image_ids.iter().enumerate() {
            if let Some(prev) = seen.insert(id.as_str(), i) {
                return Err(MegError::Invalid(format!(
                    "duplicate candidate id {id} at rows {prev} and {i}"
                )));
            }
        }
        Ok(RetrievalSet { latents, image_ids, category_ids })
    }

    pub fn len(&self) -> usize {
        self.latents.rows
    }

    pub fn is_empty(&self) -> bool {
        self.latents.rows == 0
    }

    pub fn index_of(&self, image_id: &str) -> Option<usize> {
        self.image_ids.iter().position(|id| id == image_id)
    }
}

#[derive(Debug, Clone)]
pub struct RankResult {
    /// Candidate indices sorted by descending similarity, ties in id order.
    pub order: Vec<usize>,
    /// 1-based rank of the true candidate under the same tie rule.
    pub rank: usize,
}

fn cosine_similarities(zhat: &[f64], set: &RetrievalSet) -> Result<Vec<f64>> {
    if zhat.len() != set.latents.cols {
        return Err(MegError::Shape(format!(
            "query has {} features, candidates have {}",
            zhat.len(),
            set.latents.cols
        )));
    }
    let qn = norm(zhat);
    if qn < 1e-12 {
        return Err(MegError::Invalid("zero-norm query".into()));
    }
    let mut sims = Vec::with_capacity(set.len());
    for i in 0..set.len() {
        let row = set.latents.row(i);
        let cn = norm(row);
        if cn < 1e-12 {
            return Err(MegError::Invalid(format!(
                "zero-norm candidate {}",
                set.image_ids[i]
            )));
        }
        sims.push(dot(zhat, row) / (qn * cn));
    }
    Ok(sims)
}

/// Ranks all candidates for one query. Rank counts strictly-more-similar
/// candidates, with exact ties broken by candidate order in the set.
pub fn rank_candidates(zhat: &[f64], set: &RetrievalSet, true_id: &str) -> Result<RankResult> {
    let target = set
        .index_of(true_id)
        .ok_or_else(|| MegError::Invalid(format!("true id {true_id} not in retrieval set")))?;
    let sims = cosine_similarities(zhat, set)?;
    let mut order: Vec<usize> = (0..sims.len()).collect();
    order.sort_by(|&a, &b| sims[b].partial_cmp(&sims[a]).unwrap().then(a.cmp(&b)));
    let rank = 1 + order.iter().position(|&i| i == target).unwrap();
    Ok(RankResult { order, rank })
}

#[derive(Debug, Clone)]
pub struct RetrievalReport {
    pub ranks: Vec<usize>,
    pub relative_ranks: Vec<f64>,
    /// (k, accuracy) per requested k.
    pub topk: Vec<(usize, f64)>,
    pub top5: f64,
    pub top5_sem: f64,
    pub median_relative_rank: f64,
    pub relative_rank_sem: f64,
    pub set_size: usize,
}

fn sem(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let n = values.clone().count();
    if n < 2 {
        return 0.0;
    }
    let mean = values.clone().sum::<f64>() / n as f64;
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    (var / n as f64).sqrt()
}

/// Scores one prediction row per query id against the candidate set.
pub fn evaluate(
    preds: &Mat,
    query_ids: &[String],
    set: &RetrievalSet,
    ks: &[usize],
) -> Result<RetrievalReport> {
    if preds.rows != query_ids.len() {
        return Err(MegError::Shape(format!(
            "{} prediction rows for {} query ids",
            preds.rows,
            query_ids.len()
        )));
    }
    if preds.rows == 0 {
        return Err(MegError::Invalid("no queries to evaluate".into()));
    }
    let m = set.len() as f64;
    let mut ranks = Vec::with_capacity(preds.rows);
    for (i, id) in query_ids.iter().enumerate() {
        ranks.push(rank_candidates(preds.row(i), set, id)?.rank);
    }
    let relative_ranks: Vec<f64> = ranks.iter().map(|&r| r as f64 / m).collect();
    let topk: Vec<(usize, f64)> = ks
        .iter()
        .map(|&k| {
            let acc = ranks.iter().filter(|&&r| r <= k).count() as f64 / ranks.len() as f64;
            (k, acc)
        })
        .collect();
    let top5 = ranks.iter().filter(|&&r| r <= 5).count() as f64 / ranks.len() as f64;
    let top5_sem = sem(ranks.iter().map(|&r| if r <= 5 { 1.0 } else { 0.0 }));
    let mut sorted = relative_ranks.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median_relative_rank = quantile_sorted(&sorted, 0.5);
    let relative_rank_sem = sem(relative_ranks.iter().cloned());
    Ok(RetrievalReport {
        ranks,
        relative_ranks,
        topk,
        top5,
        top5_sem,
        median_relative_rank,
        relative_rank_sem,
        set_size: set.len(),
    })
}

/// Means predictions that share a key (image id), preserving first-seen
/// order. Averaging across repetitions and subjects happens before metrics.
pub fn average_predictions(preds: &Mat, keys: &[String]) -> Result<(Mat, Vec<String>)> {
    if preds.rows != keys.len() {
        return Err(MegError::Shape(format!(
            "{} prediction rows for {} keys",
            preds.rows,
            keys.len()
        )));
    }
    if preds.rows == 0 {
        return Err(MegError::Invalid("nothing to average".into()));
    }
    let mut order: Vec<&String> = Vec::new();
    let mut groups: HashMap<&String, Vec<usize>> = HashMap::new();
    for (i, key) in keys.iter().enumerate() {
        let entry = groups.entry(key).or_default();
        if entry.is_empty() {
            order.push(key);
        }
        entry.push(i);
    }
    let mut out = Mat::zeros(order.len(), preds.cols);
    for (row, key) in order.iter().enumerate() {
        let members = &groups[*key];
        let inv = 1.0 / members.len() as f64;
        let dst = out.row_mut(row);
        for &i in members {
            for (d, &v) in dst.iter_mut().zip(preds.row(i)) {
                *d += v * inv;
            }
        }
    }
    Ok((out, order.into_iter().cloned().collect()))
}
