//! Precomputed image index, cosine-distance ranking and mAP evaluation.

mod metrics;

use std::path::Path;

use serde::{Deserialize, Serialize};

pub use metrics::{
    average_precision, evaluate, precision_at, same_class, EvalQuery, EvalReport, QueryScore, PRECISION_CUTOFFS,
};

use crate::attention::attend_sequence;
use crate::datasetio::{Container, FeatureSource};
use crate::embedheads::{embed_image, Embedding};
use crate::error::{Error, Result};
use crate::numkernel::{dot, ParamStore, Tensor};
use crate::pairgen::{class_key, DatasetItem};

const KIND: &str = "image_index";
const EMBEDDINGS: &str = "embeddings";

/// Per-step image embeddings for every indexed item.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageIndex {
    pub ids: Vec<String>,
    pub class_labels: Vec<Vec<String>>,
    n_max: usize,
    dim: usize,
    /// `embeddings[item][step]`
    embeddings: Vec<Vec<Embedding>>,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    kind: String,
    ids: Vec<String>,
    class_labels: Vec<Vec<String>>,
    n_max: usize,
    dim: usize,
}

impl ImageIndex {
    pub fn new(ids: Vec<String>, class_labels: Vec<Vec<String>>, embeddings: Vec<Vec<Embedding>>) -> Result<Self> {
        if ids.len() != class_labels.len() || ids.len() != embeddings.len() {
            return Err(Error::arg("index ids, labels and embeddings differ in length"));
        }
        let n_max = embeddings.first().map_or(0, Vec::len);
        let dim = embeddings.first().and_then(|e| e.first()).map_or(0, Embedding::dim);
        if ids.is_empty() {
            return Ok(ImageIndex { ids, class_labels, n_max, dim, embeddings });
        }
        if n_max == 0 || dim == 0 {
            return Err(Error::arg("index items need at least one nonempty embedding"));
        }
        for (id, e) in ids.iter().zip(&embeddings) {
            if e.len() != n_max || e.iter().any(|x| x.dim() != dim) {
                return Err(Error::arg(format!("item {id} does not have {n_max} embeddings of width {dim}")));
            }
        }
        let mut seen = std::collections::BTreeSet::new();
        if let Some(dup) = ids.iter().find(|id| !seen.insert(id.as_str())) {
            return Err(Error::arg(format!("duplicate index id {dup}")));
        }
        Ok(ImageIndex { ids, class_labels, n_max, dim, embeddings })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn n_max(&self) -> usize {
        self.n_max
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Embedding of `item` at attention step `step` (0-based).
    pub fn embedding(&self, item: usize, step: usize) -> &Embedding {
        &self.embeddings[item][step]
    }

    pub fn class_key(&self, item: usize) -> String {
        class_key(&self.class_labels[item])
    }

    pub fn to_container(&self) -> Result<Container> {
        let meta = Meta {
            kind: KIND.into(),
            ids: self.ids.clone(),
            class_labels: self.class_labels.clone(),
            n_max: self.n_max,
            dim: self.dim,
        };
        let mut tensors = ParamStore::new();
        if !self.is_empty() {
            let data = self.embeddings.iter().flatten().flat_map(|e| e.values().iter().copied()).collect();
            tensors.insert(EMBEDDINGS, Tensor::new(vec![self.len(), self.n_max, self.dim], data)?);
        }
        Ok(Container { meta: serde_json::to_value(meta)?, tensors })
    }

    pub fn from_container(c: Container) -> Result<Self> {
        let meta: Meta = serde_json::from_value(c.meta).map_err(|e| Error::format(0, format!("index metadata: {e}")))?;
        if meta.kind != KIND {
            return Err(Error::format(0, format!("container holds '{}', not an image index", meta.kind)));
        }
        if meta.ids.is_empty() {
            return Self::new(vec![], vec![], vec![]);
        }
        let t = c.tensors.get(EMBEDDINGS)?;
        if t.shape() != [meta.ids.len(), meta.n_max, meta.dim] {
            return Err(Error::format(0, format!("embedding tensor shape {:?} does not match metadata", t.shape())));
        }
        let embeddings = t
            .data()
            .chunks(meta.n_max * meta.dim)
            .map(|item| item.chunks(meta.dim).map(|e| Embedding::from_unit(Tensor::vector(e.to_vec()))).collect())
            .collect::<Result<_>>()?;
        Self::new(meta.ids, meta.class_labels, embeddings)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_container()?.write(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_container(Container::read(path)?)
    }
}

/// Embeds `n_max` attention steps of every item's grid.
pub fn build_index(
    items: &[DatasetItem],
    source: &dyn FeatureSource,
    params: &ParamStore,
    n_max: usize,
) -> Result<ImageIndex> {
    let mut embeddings = Vec::with_capacity(items.len());
    for item in items {
        let per_item = source
            .grid(&item.id)
            .and_then(|grid| attend_sequence(grid, n_max, params))
            .and_then(|steps| steps.iter().map(|(_, pooled)| embed_image(&pooled.0, params)).collect::<Result<Vec<_>>>())
            .map_err(|e| Error::Item { id: item.id.clone(), source: Box::new(e) })?;
        embeddings.push(per_item);
    }
    ImageIndex::new(
        items.iter().map(|i| i.id.clone()).collect(),
        items.iter().map(|i| i.class_labels.clone()).collect(),
        embeddings,
    )
}

/// Items ordered by ascending distance, ties by ascending id.
#[derive(Debug, Clone, PartialEq)]
pub struct RankedList(Vec<(String, f64)>);

impl RankedList {
    pub fn new(mut entries: Vec<(String, f64)>) -> Self {
        entries.sort_by(|a, b| a.1.total_cmp(&b.1).then_with(|| a.0.cmp(&b.0)));
        RankedList(entries)
    }

    pub fn entries(&self) -> &[(String, f64)] {
        &self.0
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.0.iter().map(|(id, _)| id.as_str())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn top(&self, k: usize) -> &[(String, f64)] {
        &self.0[..k.min(self.0.len())]
    }
}

/// Cosine distance `1 - cos` between unit vectors.
pub fn cosine_distance(a: &Embedding, b: &Embedding) -> f64 {
    1.0 - dot(a.values(), b.values()).clamp(-1.0, 1.0)
}

fn check_query(q: &Embedding, index: &ImageIndex) -> Result<()> {
    if index.is_empty() {
        return Err(Error::arg("cannot rank against an empty index"));
    }
    if q.dim() != index.dim {
        return Err(Error::dim(format!("query width {} against index width {}", q.dim(), index.dim)));
    }
    Ok(())
}

/// Ranks by distance to each item's first-step embedding.
pub fn rank_single(q: &Embedding, index: &ImageIndex) -> Result<RankedList> {
    check_query(q, index)?;
    Ok(RankedList::new(
        index.ids.iter().enumerate().map(|(i, id)| (id.clone(), cosine_distance(q, index.embedding(i, 0)))).collect(),
    ))
}

/// Smallest total distance over injective query → step assignments.
fn best_assignment(dist: &[Vec<f64>], q: usize, used: &mut [bool]) -> f64 {
    if q == dist.len() {
        return 0.0;
    }
    let mut best = f64::INFINITY;
    for s in 0..used.len() {
        if !used[s] {
            used[s] = true;
            best = best.min(dist[q][s] + best_assignment(dist, q + 1, used));
            used[s] = false;
        }
    }
    best
}

/// Ranks by the minimum over injective assignments of queries to attention
/// steps of the summed cosine distances.
pub fn rank_multi(queries: &[Embedding], index: &ImageIndex) -> Result<RankedList> {
    if queries.is_empty() {
        return Err(Error::arg("rank_multi needs at least one query"));
    }
    if queries.len() > index.n_max.max(1) {
        return Err(Error::arg(format!("{} queries exceed the index's n_max = {}", queries.len(), index.n_max)));
    }
    if queries.len() == 1 {
        return rank_single(&queries[0], index);
    }
    for q in queries {
        check_query(q, index)?;
    }
    let mut used = vec![false; index.n_max];
    let entries = (0..index.len())
        .map(|i| {
            let dist: Vec<Vec<f64>> = queries
                .iter()
                .map(|q| (0..index.n_max).map(|s| cosine_distance(q, index.embedding(i, s))).collect())
                .collect();
            (index.ids[i].clone(), best_assignment(&dist, 0, &mut used))
        })
        .collect();
    Ok(RankedList::new(entries))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit(rng: &mut ChaCha8Rng, d: usize) -> Embedding {
        Embedding::normalize(Tensor::vector((0..d).map(|_| rng.random_range(-1.0..1.0)).collect())).unwrap()
    }

    fn random_index(rng: &mut ChaCha8Rng, n: usize, n_max: usize, d: usize) -> ImageIndex {
        ImageIndex::new(
            (0..n).map(|i| format!("im{i}")).collect(),
            (0..n).map(|i| vec![format!("c{}", i % 3)]).collect(),
            (0..n).map(|_| (0..n_max).map(|_| unit(rng, d)).collect()).collect(),
        )
        .unwrap()
    }

    fn naive_cos(a: &Embedding, b: &Embedding) -> f64 {
        let (x, y) = (a.values(), b.values());
        let num: f64 = x.iter().zip(y).map(|(p, q)| p * q).sum();
        let na: f64 = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        let nb: f64 = y.iter().map(|v| v * v).sum::<f64>().sqrt();
        num / (na * nb)
    }

    #[test]
    fn single_ranking_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let index = random_index(&mut rng, 5, 2, 6);
        let q = index.embedding(3, 0).clone();
        let r = rank_single(&q, &index).unwrap();
        assert_eq!(r.entries()[0].0, "im3");
        assert!(r.entries()[0].1.abs() < 1e-12);
        assert!(r.entries().iter().all(|(_, d)| (0.0..=2.0).contains(d)));

        let q = unit(&mut rng, 6);
        let r = rank_single(&q, &index).unwrap();
        let mut oracle: Vec<(f64, String)> =
            (0..5).map(|i| (1.0 - naive_cos(&q, index.embedding(i, 0)), format!("im{i}"))).collect();
        oracle.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        assert_eq!(r.ids().collect::<Vec<_>>(), oracle.iter().map(|o| o.1.as_str()).collect::<Vec<_>>());
        for ((_, d), (od, _)) in r.entries().iter().zip(&oracle) {
            assert!((d - od).abs() < 1e-12);
        }

        let empty = ImageIndex::new(vec![], vec![], vec![]).unwrap();
        assert!(matches!(rank_single(&q, &empty), Err(Error::Argument(_))));
    }

    #[test]
    fn ties_break_by_id() {
        let e = Embedding::from_unit(Tensor::vector(vec![1.0, 0.0])).unwrap();
        let index = ImageIndex::new(
            vec!["b".into(), "a".into(), "c".into()],
            vec![vec!["x".into()]; 3],
            vec![vec![e.clone()]; 3],
        )
        .unwrap();
        assert_eq!(rank_single(&e, &index).unwrap().ids().collect::<Vec<_>>(), ["a", "b", "c"]);
    }

    #[test]
    fn multi_matches_two_assignment_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let index = random_index(&mut rng, 6, 2, 5);
            let (q1, q2) = (unit(&mut rng, 5), unit(&mut rng, 5));
            let r = rank_multi(&[q1.clone(), q2.clone()], &index).unwrap();
            let swapped = rank_multi(&[q2.clone(), q1.clone()], &index).unwrap();
            assert_eq!(r.ids().collect::<Vec<_>>(), swapped.ids().collect::<Vec<_>>());
            let mut oracle: Vec<(f64, String)> = (0..6)
                .map(|i| {
                    let d = |q: &Embedding, s| 1.0 - naive_cos(q, index.embedding(i, s));
                    let straight = d(&q1, 0) + d(&q2, 1);
                    let crossed = d(&q1, 1) + d(&q2, 0);
                    (straight.min(crossed), format!("im{i}"))
                })
                .collect();
            oracle.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
            assert_eq!(r.ids().collect::<Vec<_>>(), oracle.iter().map(|o| o.1.as_str()).collect::<Vec<_>>());
            for ((_, d), (od, _)) in r.entries().iter().zip(&oracle) {
                assert!((d - od).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn multi_edge_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let index = random_index(&mut rng, 4, 2, 3);
        let q = unit(&mut rng, 3);
        assert_eq!(rank_multi(&[q.clone()], &index).unwrap(), rank_single(&q, &index).unwrap());
        assert!(matches!(rank_multi(&[q.clone(), q.clone(), q.clone()], &index), Err(Error::Argument(_))));
        assert!(matches!(rank_multi(&[], &index), Err(Error::Argument(_))));
    }

    proptest! {
        #[test]
        fn duplicated_query_orders_by_min_assignment(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let index = random_index(&mut rng, 6, 2, 4);
            let q = unit(&mut rng, 4);
            let r = rank_multi(&[q.clone(), q.clone()], &index).unwrap();
            let mut oracle: Vec<(f64, String)> = (0..6)
                .map(|i| {
                    let a = cosine_distance(&q, index.embedding(i, 0));
                    let b = cosine_distance(&q, index.embedding(i, 1));
                    ((a + b).min(b + a), format!("im{i}"))
                })
                .collect();
            oracle.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            prop_assert_eq!(r.ids().collect::<Vec<_>>(), oracle.iter().map(|o| o.1.as_str()).collect::<Vec<_>>());
            prop_assert!(r.entries().windows(2).all(|w| w[0].1 <= w[1].1));
        }
    }

    #[test]
    fn evaluate_examples() {
        let e = |v: Vec<f64>| Embedding::normalize(Tensor::vector(v)).unwrap();
        let index = ImageIndex::new(
            vec!["a".into(), "b".into(), "c".into()],
            vec![vec!["x".into()], vec!["y".into()], vec!["x".into()]],
            vec![vec![e(vec![1.0, 0.0])], vec![e(vec![0.0, 1.0])], vec![e(vec![1.0, -0.5])]],
        )
        .unwrap();
        let perfect = EvalQuery { name: "q1".into(), embeddings: vec![e(vec![1.0, 0.0])], class_key: "x".into() };
        let report = evaluate(std::slice::from_ref(&perfect), &index, same_class).unwrap();
        assert_eq!(report.map, 1.0);
        assert_eq!(report.precision_at["1"], 1.0);

        // y is ranked second of three: AP = 1/2
        let half = EvalQuery { name: "q2".into(), embeddings: vec![e(vec![1.0, 0.8])], class_key: "y".into() };
        let report = evaluate(&[perfect, half], &index, same_class).unwrap();
        assert_eq!(report.per_query[1].ap, 0.5);
        assert_eq!(report.map, 0.75);
        let json: serde_json::Value = serde_json::from_str(&report.to_json().unwrap()).unwrap();
        for field in ["map", "per_query", "precision_at"] {
            assert!(json.get(field).is_some(), "{field}");
        }
        assert!(matches!(evaluate(&[], &index, same_class), Err(Error::Argument(_))));
    }

    #[test]
    fn evaluate_matches_ap_oracle_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let index = random_index(&mut rng, 9, 1, 4);
        let queries: Vec<EvalQuery> = (0..5)
            .map(|i| EvalQuery { name: format!("q{i}"), embeddings: vec![unit(&mut rng, 4)], class_key: format!("c{}", i % 3) })
            .collect();
        let report = evaluate(&queries, &index, same_class).unwrap();
        let mut sum = 0.0;
        for q in &queries {
            let mut scored: Vec<(f64, usize)> =
                (0..9).map(|i| (1.0 - naive_cos(&q.embeddings[0], index.embedding(i, 0)), i)).collect();
            scored.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
            let rel: Vec<bool> = scored.iter().map(|&(_, i)| index.class_key(i) == q.class_key).collect();
            let total = rel.iter().filter(|&&r| r).count() as f64;
            let mut hits = 0.0;
            let mut ap = 0.0;
            for (r, &is_rel) in rel.iter().enumerate() {
                if is_rel {
                    hits += 1.0;
                    ap += hits / (r + 1) as f64;
                }
            }
            sum += ap / total;
        }
        assert!((report.map - sum / 5.0).abs() < 1e-12);
        let mean: f64 = report.per_query.iter().map(|s| s.ap).sum::<f64>() / 5.0;
        assert!((report.map - mean).abs() < 1e-12);
        assert!((0.0..=1.0).contains(&report.map));
    }

    #[test]
    fn index_file_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let index = random_index(&mut rng, 4, 2, 3);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("index.xmc");
        index.save(&path).unwrap();
        let back = ImageIndex::load(&path).unwrap();
        assert_eq!(back, index);
        assert_eq!(std::fs::read(&path).unwrap(), back.to_container().unwrap().encode().unwrap());
    }
}
