//! The full protocol on one dataset: split, pair generation, training,
//! indexing of the test split and evaluation with test-split queries.

use serde::{Deserialize, Serialize};

use crate::datasetio::{Dataset, FeatureSource};
use crate::embedheads::embed_query;
use crate::error::{Error, Result};
use crate::numkernel::ParamStore;
use crate::pairgen::{
    class_key, gen_multi_pairs, gen_single_sketch_pairs, gen_single_text_pairs, sketch_pool, split_dataset,
    DatasetItem, Modality, PairGenConfig, TrainingPair,
};
use crate::retrieval::{build_index, evaluate, same_class, EvalQuery, EvalReport, ImageIndex};
use crate::trainer::{init_params, train, Checkpoint, ModelDims, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    /// Seeds the split, pair sampling, initialization and shuffling.
    pub seed: u64,
    pub modality: Modality,
    /// Two-object images and queries.
    pub multi: bool,
    pub pairgen: PairGenConfig,
    /// `query_dim` is taken from the dataset.
    pub model: ModelDims,
    pub train: TrainConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            modality: Modality::Text,
            multi: false,
            pairgen: PairGenConfig::default(),
            model: ModelDims::default(),
            train: TrainConfig::default(),
        }
    }
}

impl ExperimentConfig {
    /// Copies the top-level seed into the nested configurations and the
    /// dataset's query width into the model dimensions.
    pub fn resolve(mut self, dataset: &Dataset) -> Result<Self> {
        self.pairgen.seed = self.seed;
        self.train.seed = self.seed;
        self.model.channels = dataset.manifest.grid_dims().2;
        self.model.query_dim = dataset
            .query_dim(self.modality)
            .ok_or_else(|| Error::Protocol(format!("dataset has no {} query features", self.modality)))?;
        self.pairgen.validate()?;
        self.train.validate()?;
        if self.multi && self.train.n_max < 2 {
            return Err(Error::arg("multi-object training needs n_max of at least 2"));
        }
        Ok(self)
    }
}

pub fn training_pairs(
    dataset: &Dataset,
    train_items: &[DatasetItem],
    modality: Modality,
    multi: bool,
    cfg: &PairGenConfig,
) -> Result<Vec<TrainingPair>> {
    match (multi, modality) {
        (false, Modality::Text) => gen_single_text_pairs(train_items, cfg),
        (false, Modality::Sketch) => gen_single_sketch_pairs(train_items, cfg),
        (true, _) => {
            let pool = sketch_pool(train_items, &dataset.manifest.sketch_classes)?;
            gen_multi_pairs(train_items, modality, &pool, cfg)
        }
    }
}

/// Raw query keys of the test queries, each with its class key.
///
/// Text: one query per distinct (combined) class of the test items.
/// Single-object sketch: every sketch linked to a test item.
/// Multi-object sketch: per test item, its first sketch of each label.
pub fn test_query_keys(
    dataset: &Dataset,
    test_items: &[DatasetItem],
    modality: Modality,
    multi: bool,
) -> Result<Vec<(String, Vec<String>, String)>> {
    let mut out = Vec::new();
    match modality {
        Modality::Text => {
            let mut keys: Vec<(String, Vec<String>)> = test_items
                .iter()
                .map(|i| {
                    let mut labels = i.class_labels.clone();
                    labels.sort();
                    (class_key(&labels), labels)
                })
                .collect();
            keys.sort();
            keys.dedup();
            for (key, labels) in keys {
                out.push((format!("text:{key}"), labels, key));
            }
        }
        Modality::Sketch if !multi => {
            for item in test_items {
                for s in &item.fine_grained_sketch_refs {
                    out.push((format!("sketch:{s}"), vec![s.clone()], item.class_key()));
                }
            }
        }
        Modality::Sketch => {
            for item in test_items {
                let keys = item
                    .class_labels
                    .iter()
                    .map(|c| {
                        item.fine_grained_sketch_refs
                            .iter()
                            .find(|s| dataset.manifest.sketch_classes.get(*s) == Some(c))
                            .cloned()
                            .ok_or_else(|| Error::Protocol(format!("item {} has no sketch of class {c}", item.id)))
                    })
                    .collect::<Result<Vec<_>>>()?;
                out.push((format!("sketch:{}", keys.join("+")), keys, item.class_key()));
            }
        }
    }
    if out.is_empty() {
        return Err(Error::Protocol("the test split yields no queries".into()));
    }
    Ok(out)
}

pub fn test_queries(
    dataset: &Dataset,
    test_items: &[DatasetItem],
    modality: Modality,
    multi: bool,
    params: &ParamStore,
) -> Result<Vec<EvalQuery>> {
    test_query_keys(dataset, test_items, modality, multi)?
        .into_iter()
        .map(|(name, keys, class_key)| {
            let embeddings = keys
                .iter()
                .map(|k| embed_query(dataset.query(modality, k)?, params))
                .collect::<Result<Vec<_>>>()?;
            Ok(EvalQuery { name, embeddings, class_key })
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub config: ExperimentConfig,
    pub checkpoint: Checkpoint,
    pub index: ImageIndex,
    pub report: EvalReport,
    pub num_pairs: usize,
}

/// Generates pairs from the training split and trains a freshly initialized
/// model. `cfg` must already be resolved against `dataset`.
pub fn train_model(dataset: &Dataset, train_items: &[DatasetItem], cfg: &ExperimentConfig) -> Result<(Checkpoint, usize)> {
    let pairs = training_pairs(dataset, train_items, cfg.modality, cfg.multi, &cfg.pairgen)?;
    let params = init_params(&cfg.model, cfg.seed)?;
    let outcome = train(&pairs, params, &cfg.train, dataset)?;
    let checkpoint = Checkpoint {
        params: outcome.params,
        config: cfg.train.clone(),
        epoch: cfg.train.epochs,
        loss_history: outcome.loss_curve,
    };
    Ok((checkpoint, pairs.len()))
}

pub fn run_experiment(dataset: &Dataset, cfg: ExperimentConfig) -> Result<ExperimentOutcome> {
    let cfg = cfg.resolve(dataset)?;
    let (train_items, test_items) = split_dataset(&dataset.manifest.items, &cfg.pairgen)?;
    let (checkpoint, num_pairs) = train_model(dataset, &train_items, &cfg)?;
    let index = build_index(&test_items, dataset, &checkpoint.params, cfg.train.n_max)?;
    let queries = test_queries(dataset, &test_items, cfg.modality, cfg.multi, &checkpoint.params)?;
    let report = evaluate(&queries, &index, same_class)?;
    Ok(ExperimentOutcome { config: cfg, checkpoint, index, report, num_pairs })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasetio::{synthesize, SynthConfig};

    fn tiny(multi: bool) -> Dataset {
        synthesize(&SynthConfig {
            num_classes: 3,
            images_per_class: 5,
            grid_h: 3,
            grid_w: 3,
            channels: 8,
            object_cells: 2,
            multi,
            text_dim: 6,
            sketch_dim: 7,
            ..Default::default()
        })
        .unwrap()
        .into_dataset()
        .unwrap()
    }

    fn cfg(modality: Modality, multi: bool) -> ExperimentConfig {
        ExperimentConfig {
            seed: 3,
            modality,
            multi,
            model: ModelDims { hidden: 6, attn: 5, query_hidden: 8, embed: 6, ..Default::default() },
            train: TrainConfig { epochs: 2, batch_size: 4, lr: 1e-2, ..Default::default() },
            ..Default::default()
        }
    }

    #[test]
    fn query_construction() {
        let single = tiny(false);
        let (_, test) = split_dataset(&single.manifest.items, &PairGenConfig::default()).unwrap();
        assert_eq!(test.len(), 3);
        let text = test_query_keys(&single, &test, Modality::Text, false).unwrap();
        assert_eq!(text.len(), 3);
        let sketch = test_query_keys(&single, &test, Modality::Sketch, false).unwrap();
        assert_eq!(sketch.len(), 3 * SynthConfig::default().sketches_per_image);

        let multi = tiny(true);
        let (_, test) = split_dataset(&multi.manifest.items, &PairGenConfig::default()).unwrap();
        let text = test_query_keys(&multi, &test, Modality::Text, true).unwrap();
        assert_eq!(text.len(), 3);
        assert!(text.iter().all(|(_, keys, _)| keys.len() == 2));
        let sketch = test_query_keys(&multi, &test, Modality::Sketch, true).unwrap();
        assert_eq!(sketch.len(), test.len());
        for (_, keys, class) in &sketch {
            let classes: Vec<&str> = keys.iter().map(|k| multi.manifest.sketch_classes[k].as_str()).collect();
            assert_eq!(&class_key(&classes), class);
        }
    }

    #[test]
    fn end_to_end_runs_and_repeats() {
        for (modality, multi) in [(Modality::Text, false), (Modality::Sketch, true)] {
            let data = tiny(multi);
            let a = run_experiment(&data, cfg(modality, multi)).unwrap();
            let b = run_experiment(&data, cfg(modality, multi)).unwrap();
            assert!(a.checkpoint.bit_eq(&b.checkpoint));
            assert_eq!(a.index, b.index);
            assert_eq!(a.report.to_json().unwrap(), b.report.to_json().unwrap());
            assert!((0.0..=1.0).contains(&a.report.map));
            assert_eq!(a.checkpoint.loss_history.len(), 2);
        }
    }
}
