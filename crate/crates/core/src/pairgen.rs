//! Train/test splits and positive/negative training pairs.
//!
//! Single-object sketch pairs use the fine-grained sketches linked to each
//! training image; single-object text pairs use the class-label text feature.
//! Multi-object pairs hold one query per constituent class of a combined
//! class. Every positive is matched by one negative that reuses its query
//! with an image drawn uniformly from a different (combined) class.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::embedheads::Label;
use crate::error::{Error, Result};
use crate::rng::{seeded, Rng, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Text,
    Sketch,
}

impl Modality {
    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Text => "text",
            Modality::Sketch => "sketch",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "text" => Ok(Modality::Text),
            "sketch" => Ok(Modality::Sketch),
            other => Err(Error::arg(format!("unknown modality '{other}' (expected text or sketch)"))),
        }
    }
}

/// One database image as listed in a manifest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetItem {
    pub id: String,
    pub class_labels: Vec<String>,
    /// Grid tensor path, relative to the manifest directory.
    pub grid_ref: String,
    #[serde(default)]
    pub fine_grained_sketch_refs: Vec<String>,
    #[serde(default)]
    pub text_label_refs: Vec<String>,
}

impl DatasetItem {
    /// Sorted labels joined by `+`; the single label for single-object items.
    pub fn class_key(&self) -> String {
        class_key(&self.class_labels)
    }
}

pub fn class_key<S: AsRef<str>>(labels: &[S]) -> String {
    let mut sorted: Vec<&str> = labels.iter().map(AsRef::as_ref).collect();
    sorted.sort_unstable();
    sorted.join("+")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PairGenConfig {
    pub seed: u64,
    /// Sketch combinations per multi-object image.
    pub n_m: usize,
    pub train_fraction: f64,
}

impl Default for PairGenConfig {
    fn default() -> Self {
        PairGenConfig { seed: 0, n_m: 5, train_fraction: 0.8 }
    }
}

impl PairGenConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::arg(format!("train_fraction must lie in (0, 1), got {}", self.train_fraction)));
        }
        if self.n_m == 0 {
            return Err(Error::arg("n_m must be at least 1"));
        }
        Ok(())
    }
}

/// A query feature: the modality, its key in the manifest's query table and
/// the class it depicts.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct QueryRef {
    pub modality: Modality,
    pub key: String,
    pub class: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingPair {
    pub query_refs: Vec<QueryRef>,
    pub item: DatasetItem,
    pub label: Label,
}

impl TrainingPair {
    /// Positive pairs' query classes equal the item labels as a multiset;
    /// negatives' differ.
    pub fn check(&self) -> Result<()> {
        if self.query_refs.is_empty() || self.query_refs.len() > 2 {
            return Err(Error::Protocol(format!("pair for {} has {} queries", self.item.id, self.query_refs.len())));
        }
        let classes: Vec<&str> = self.query_refs.iter().map(|q| q.class.as_str()).collect();
        let same = class_key(&classes) == self.item.class_key();
        match (self.label, same) {
            (Label::Positive, true) | (Label::Negative, false) => Ok(()),
            _ => Err(Error::Protocol(format!(
                "{:?} pair for {} has query classes {classes:?} against labels {:?}",
                self.label, self.item.id, self.item.class_labels
            ))),
        }
    }
}

/// Class → sketch keys available for composing multi-object sketch queries.
pub type SketchPool = BTreeMap<String, Vec<String>>;

/// Builds the sketch pool from the fine-grained sketches of `items`.
pub fn sketch_pool(items: &[DatasetItem], sketch_classes: &BTreeMap<String, String>) -> Result<SketchPool> {
    let mut pool = SketchPool::new();
    for item in items {
        for s in &item.fine_grained_sketch_refs {
            let class = sketch_classes
                .get(s)
                .ok_or_else(|| Error::Protocol(format!("sketch {s} of item {} has no class", item.id)))?;
            pool.entry(class.clone()).or_default().push(s.clone());
        }
    }
    Ok(pool)
}

/// Splits every class (combined class for multi-object items) into train and
/// test parts; the test part gets `floor(n · (1 - train_fraction))` items,
/// at least one.
pub fn split_dataset(items: &[DatasetItem], cfg: &PairGenConfig) -> Result<(Vec<DatasetItem>, Vec<DatasetItem>)> {
    cfg.validate()?;
    let mut by_class: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (i, item) in items.iter().enumerate() {
        by_class.entry(item.class_key()).or_default().push(i);
    }
    let mut rng = seeded(cfg.seed, Stream::Split);
    let mut is_train = vec![false; items.len()];
    for (class, members) in &by_class {
        let n = members.len();
        if n < 2 {
            return Err(Error::Protocol(format!("class {class} has {n} item(s); a split needs at least 2")));
        }
        // 1e-9 absorbs representation error, e.g. 10 · (1 - 0.8) = 1.9999999999999996
        let test = ((n as f64 * (1.0 - cfg.train_fraction) + 1e-9).floor() as usize).clamp(1, n - 1);
        let mut order = members.clone();
        order.shuffle(&mut rng);
        for &i in &order[..n - test] {
            is_train[i] = true;
        }
    }
    let (train, test): (Vec<_>, Vec<_>) = items.iter().zip(is_train).partition(|(_, t)| *t);
    Ok((
        train.into_iter().map(|(i, _)| i.clone()).collect(),
        test.into_iter().map(|(i, _)| i.clone()).collect(),
    ))
}

/// Uniform draws of images outside a given class.
struct NegativeSampler<'a> {
    items: &'a [DatasetItem],
    keys: Vec<String>,
}

impl<'a> NegativeSampler<'a> {
    fn new(items: &'a [DatasetItem]) -> Result<Self> {
        let keys: Vec<String> = items.iter().map(DatasetItem::class_key).collect();
        let distinct: BTreeSet<&String> = keys.iter().collect();
        if distinct.len() < 2 {
            return Err(Error::Protocol(format!(
                "negatives need at least two classes, training set has {}",
                distinct.len()
            )));
        }
        Ok(NegativeSampler { items, keys })
    }

    fn draw(&self, rng: &mut Rng, exclude: &str) -> &'a DatasetItem {
        let eligible = self.keys.iter().filter(|k| k.as_str() != exclude).count();
        let pick = rng.random_range(0..eligible);
        let idx = self
            .keys
            .iter()
            .enumerate()
            .filter(|(_, k)| k.as_str() != exclude)
            .nth(pick)
            .map(|(i, _)| i)
            .expect("pick < eligible");
        &self.items[idx]
    }
}

fn push_with_negative(
    out: &mut Vec<TrainingPair>,
    sampler: &NegativeSampler<'_>,
    rng: &mut Rng,
    query_refs: Vec<QueryRef>,
    item: &DatasetItem,
) {
    let key = item.class_key();
    let neg = sampler.draw(rng, &key);
    out.push(TrainingPair { query_refs: query_refs.clone(), item: item.clone(), label: Label::Positive });
    out.push(TrainingPair { query_refs, item: neg.clone(), label: Label::Negative });
}

fn single_label(item: &DatasetItem) -> Result<&str> {
    match item.class_labels.as_slice() {
        [c] => Ok(c),
        other => Err(Error::Protocol(format!("item {} is not single-object: {other:?}", item.id))),
    }
}

/// One positive per linked fine-grained sketch, each followed by a negative
/// pairing the same sketch with an image of another class.
pub fn gen_single_sketch_pairs(train: &[DatasetItem], cfg: &PairGenConfig) -> Result<Vec<TrainingPair>> {
    let sampler = NegativeSampler::new(train)?;
    let mut rng = seeded(cfg.seed, Stream::Pairs);
    let mut out = Vec::new();
    for item in train {
        let class = single_label(item)?;
        for s in &item.fine_grained_sketch_refs {
            let q = QueryRef { modality: Modality::Sketch, key: s.clone(), class: class.to_owned() };
            push_with_negative(&mut out, &sampler, &mut rng, vec![q], item);
        }
    }
    Ok(out)
}

/// One positive per training image (its class-label text), each followed by
/// one negative.
pub fn gen_single_text_pairs(train: &[DatasetItem], cfg: &PairGenConfig) -> Result<Vec<TrainingPair>> {
    let sampler = NegativeSampler::new(train)?;
    let mut rng = seeded(cfg.seed, Stream::Pairs);
    let mut out = Vec::with_capacity(2 * train.len());
    for item in train {
        let class = single_label(item)?;
        let key = item.text_label_refs.first().map(String::as_str).unwrap_or(class);
        let q = QueryRef { modality: Modality::Text, key: key.to_owned(), class: class.to_owned() };
        push_with_negative(&mut out, &sampler, &mut rng, vec![q], item);
    }
    Ok(out)
}

/// Pairs for two-object images.
///
/// Text mode gives one positive per image holding both class-label texts.
/// Sketch mode gives `n_m` positives per image, each combining one sketch per
/// constituent class drawn from `pool`. Queries follow the order of the
/// item's labels.
pub fn gen_multi_pairs(
    train: &[DatasetItem],
    modality: Modality,
    pool: &SketchPool,
    cfg: &PairGenConfig,
) -> Result<Vec<TrainingPair>> {
    cfg.validate()?;
    let sampler = NegativeSampler::new(train)?;
    let mut rng = seeded(cfg.seed, Stream::Pairs);
    let mut out = Vec::new();
    for item in train {
        if item.class_labels.len() != 2 {
            return Err(Error::Protocol(format!(
                "item {} is not a two-object image: {:?}",
                item.id, item.class_labels
            )));
        }
        match modality {
            Modality::Text => {
                let refs = item
                    .class_labels
                    .iter()
                    .enumerate()
                    .map(|(i, c)| QueryRef {
                        modality: Modality::Text,
                        key: item.text_label_refs.get(i).unwrap_or(c).clone(),
                        class: c.clone(),
                    })
                    .collect();
                push_with_negative(&mut out, &sampler, &mut rng, refs, item);
            }
            Modality::Sketch => {
                for _ in 0..cfg.n_m {
                    let mut refs = Vec::with_capacity(2);
                    for c in &item.class_labels {
                        let sketches = pool
                            .get(c)
                            .filter(|s| !s.is_empty())
                            .ok_or_else(|| Error::Protocol(format!("no sketches available for class {c}")))?;
                        let key = sketches[rng.random_range(0..sketches.len())].clone();
                        refs.push(QueryRef { modality: Modality::Sketch, key, class: c.clone() });
                    }
                    push_with_negative(&mut out, &sampler, &mut rng, refs, item);
                }
            }
        }
    }
    Ok(out)
}
