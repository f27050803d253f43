//! Split construction: adapted zero-leakage training set, small/large test
//! sets, and image-level validation sampling.
//!
//! The small test set is the original test set of the source data. Its
//! categories are removed from training wholesale; removed images that are
//! not themselves small-test images become the large (zero-shot) test set.
//! Validation is sampled at the image level so repetitions of one image never
//! straddle a split boundary.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::datastore::{Manifest, PresentationRecord, SplitTag};
use crate::error::{MegError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct SplitManifest {
    pub train: Vec<PresentationRecord>,
    pub valid: Vec<PresentationRecord>,
    pub small_test: Vec<PresentationRecord>,
    pub large_test: Vec<PresentationRecord>,
    pub category_index: BTreeMap<String, BTreeSet<String>>,
}

fn image_set(records: &[PresentationRecord]) -> HashSet<&str> {
    records.iter().map(|r| r.image_id.as_str()).collect()
}

fn category_set(records: &[PresentationRecord]) -> HashSet<&str> {
    records.iter().map(|r| r.category_id.as_str()).collect()
}

impl SplitManifest {
    /// Checks the zero-leakage invariants; every constructor calls this.
    pub fn validate(&self) -> Result<()> {
        let fit_images: HashSet<&str> = image_set(&self.train)
            .union(&image_set(&self.valid))
            .copied()
            .collect();
        let small_images = image_set(&self.small_test);
        let large_images = image_set(&self.large_test);
        if fit_images.intersection(&small_images).next().is_some()
            || fit_images.intersection(&large_images).next().is_some()
        {
            return Err(MegError::Invalid(
                "test image appears in train or valid".into(),
            ));
        }
        if small_images.intersection(&large_images).next().is_some() {
            return Err(MegError::Invalid(
                "image appears in both small and large test sets".into(),
            ));
        }
        let fit_cats: HashSet<&str> = category_set(&self.train)
            .union(&category_set(&self.valid))
            .copied()
            .collect();
        let small_cats = category_set(&self.small_test);
        if fit_cats.intersection(&small_cats).next().is_some() {
            return Err(MegError::Invalid(
                "small-test category leaks into train or valid".into(),
            ));
        }
        for r in &self.large_test {
            if !small_cats.contains(r.category_id.as_str()) {
                return Err(MegError::Invalid(format!(
                    "large-test image {:?} is not from a removed category",
                    r.image_id
                )));
            }
        }
        Ok(())
    }

    /// Flattens into one tagged manifest (train, valid, small, large order).
    pub fn to_manifest(&self) -> Manifest {
        let mut records = Vec::with_capacity(
            self.train.len() + self.valid.len() + self.small_test.len() + self.large_test.len(),
        );
        for (set, tag) in [
            (&self.train, SplitTag::Train),
            (&self.valid, SplitTag::Valid),
            (&self.small_test, SplitTag::SmallTest),
            (&self.large_test, SplitTag::LargeTest),
        ] {
            records.extend(set.iter().cloned().map(|mut r| {
                r.split_tag = tag;
                r
            }));
        }
        Manifest::new(records)
    }

    pub fn from_manifest(manifest: &Manifest) -> Result<Self> {
        let pick = |tag: SplitTag| -> Vec<PresentationRecord> {
            manifest.records_with_tag(tag).cloned().collect()
        };
        let split = SplitManifest {
            train: pick(SplitTag::Train),
            valid: pick(SplitTag::Valid),
            small_test: pick(SplitTag::SmallTest),
            large_test: pick(SplitTag::LargeTest),
            category_index: build_category_index(&manifest.records)?,
        };
        split.validate()?;
        Ok(split)
    }
}

pub fn build_category_index(
    records: &[PresentationRecord],
) -> Result<BTreeMap<String, BTreeSet<String>>> {
    let mut by_image: HashMap<&str, &str> = HashMap::new();
    let mut index: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
    for r in records {
        if let Some(prev) = by_image.insert(&r.image_id, &r.category_id) {
            if prev != r.category_id {
                return Err(MegError::Invalid(format!(
                    "image {:?} listed under categories {prev:?} and {:?}",
                    r.image_id, r.category_id
                )));
            }
        }
        index
            .entry(r.category_id.clone())
            .or_default()
            .insert(r.image_id.clone());
    }
    Ok(index)
}

/// Unique image ids in lexicographic order, then a seeded shuffle. The sort
/// pins the permutation to the id strings, not to record order.
fn shuffled_images(records: &[PresentationRecord], seed: u64) -> Vec<String> {
    let unique: BTreeSet<&str> = records.iter().map(|r| r.image_id.as_str()).collect();
    let mut images: Vec<String> = unique.into_iter().map(|s| s.to_string()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    images.shuffle(&mut rng);
    images
}

/// Splits records image-wise: the first round(fraction·n_images) shuffled
/// images are drawn out, everything else is kept.
fn partition_by_image(
    records: &[PresentationRecord],
    fraction: f64,
    seed: u64,
) -> Result<(Vec<PresentationRecord>, Vec<PresentationRecord>)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(MegError::Invalid(format!(
            "fraction must be in (0, 1), got {fraction}"
        )));
    }
    let images = shuffled_images(records, seed);
    let n_drawn = (fraction * images.len() as f64).round() as usize;
    let drawn: HashSet<&str> = images[..n_drawn].iter().map(|s| s.as_str()).collect();
    let mut kept_records = Vec::new();
    let mut drawn_records = Vec::new();
    for r in records {
        if drawn.contains(r.image_id.as_str()) {
            drawn_records.push(r.clone());
        } else {
            kept_records.push(r.clone());
        }
    }
    Ok((kept_records, drawn_records))
}

fn retag(mut records: Vec<PresentationRecord>, tag: SplitTag) -> Vec<PresentationRecord> {
    for r in records.iter_mut() {
        r.split_tag = tag;
    }
    records
}

pub fn sample_validation(
    train_records: &[PresentationRecord],
    fraction: f64,
    seed: u64,
) -> Result<(Vec<PresentationRecord>, Vec<PresentationRecord>)> {
    let (train, valid) = partition_by_image(train_records, fraction, seed)?;
    Ok((retag(train, SplitTag::Train), retag(valid, SplitTag::Valid)))
}

pub fn build_adapted_split(
    records: &[PresentationRecord],
    original_test_ids: &[String],
    valid_fraction: f64,
    seed: u64,
) -> Result<SplitManifest> {
    let category_index = build_category_index(records)?;
    let all_images: HashSet<&str> = records.iter().map(|r| r.image_id.as_str()).collect();
    let test_ids: HashSet<&str> = original_test_ids.iter().map(|s| s.as_str()).collect();
    for id in &test_ids {
        if !all_images.contains(id) {
            return Err(MegError::Invalid(format!(
                "original test id {id:?} has no presentations"
            )));
        }
    }
    let test_categories: HashSet<&str> = records
        .iter()
        .filter(|r| test_ids.contains(r.image_id.as_str()))
        .map(|r| r.category_id.as_str())
        .collect();

    let mut small_test = Vec::new();
    let mut large_test = Vec::new();
    let mut pool = Vec::new();
    for r in records {
        if test_ids.contains(r.image_id.as_str()) {
            small_test.push(r.clone());
        } else if test_categories.contains(r.category_id.as_str()) {
            large_test.push(r.clone());
        } else {
            pool.push(r.clone());
        }
    }
    if pool.is_empty() {
        return Err(MegError::Invalid(
            "removing test categories leaves an empty training pool".into(),
        ));
    }
    let (train, valid) = sample_validation(&pool, valid_fraction, seed)?;
    if train.is_empty() {
        return Err(MegError::Invalid(
            "validation sampling leaves an empty training set".into(),
        ));
    }
    let split = SplitManifest {
        train,
        valid,
        small_test: retag(small_test, SplitTag::SmallTest),
        large_test: retag(large_test, SplitTag::LargeTest),
        category_index,
    };
    split.validate()?;
    Ok(split)
}

/// 60/20/20 image-level split for hyperparameter search: one draw removes
/// the test images, a second (seed+1) removes validation from the rest.
pub fn build_hpsearch_split(
    records: &[PresentationRecord],
    seed: u64,
) -> Result<(
    Vec<PresentationRecord>,
    Vec<PresentationRecord>,
    Vec<PresentationRecord>,
)> {
    let (rest, test) = partition_by_image(records, 0.2, seed)?;
    if rest.is_empty() || test.is_empty() {
        return Err(MegError::Invalid(
            "too few images for a 60/20/20 split".into(),
        ));
    }
    // 0.25 of the remaining 80% is 20% of the whole
    let (train, valid) = partition_by_image(&rest, 0.25, seed.wrapping_add(1))?;
    if train.is_empty() || valid.is_empty() {
        return Err(MegError::Invalid(
            "too few images for a 60/20/20 split".into(),
        ));
    }
    Ok((
        retag(train, SplitTag::Train),
        retag(valid, SplitTag::Valid),
        retag(test, SplitTag::SmallTest),
    ))
}
