use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::{rank_multi, ImageIndex, RankedList};
use crate::embedheads::Embedding;
use crate::error::{Error, Result};

/// Cutoffs reported in [`EvalReport::precision_at`].
pub const PRECISION_CUTOFFS: [usize; 3] = [1, 5, 10];

/// Mean over relevant hits of the precision at the hit's rank.
///
/// An empty relevant set scores 0 and logs a warning.
pub fn average_precision(ranked: &RankedList, relevant: &BTreeSet<String>) -> Result<f64> {
    if relevant.is_empty() {
        log::warn!("average precision of a query with no relevant items is taken as 0");
        return Ok(0.0);
    }
    let ids: BTreeSet<&str> = ranked.ids().collect();
    if let Some(missing) = relevant.iter().find(|r| !ids.contains(r.as_str())) {
        return Err(Error::arg(format!("relevant id {missing} is not in the ranking")));
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (r, id) in ranked.ids().enumerate() {
        if relevant.contains(id) {
            hits += 1;
            sum += hits as f64 / (r + 1) as f64;
        }
    }
    Ok(sum / relevant.len() as f64)
}

/// Fraction of the first `k` results that are relevant.
pub fn precision_at(ranked: &RankedList, relevant: &BTreeSet<String>, k: usize) -> f64 {
    if k == 0 {
        return 0.0;
    }
    let hits = ranked.ids().take(k).filter(|id| relevant.contains(*id)).count();
    hits as f64 / k as f64
}

/// A test query: one embedding per object and the class key it stands for.
#[derive(Debug, Clone)]
pub struct EvalQuery {
    pub name: String,
    pub embeddings: Vec<Embedding>,
    pub class_key: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryScore {
    pub query: String,
    pub ap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub map: f64,
    pub per_query: Vec<QueryScore>,
    /// Mean precision at each cutoff, keyed by the cutoff.
    pub precision_at: BTreeMap<String, f64>,
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }
}

/// Item relevance by equal class key (the combined key for multi-object items).
pub fn same_class(query: &EvalQuery, index: &ImageIndex, item: usize) -> bool {
    index.class_key(item) == query.class_key
}

/// Ranks the index for every query and averages AP and precision at the
/// standard cutoffs. `relevant(query, index, item)` decides relevance.
pub fn evaluate<F>(queries: &[EvalQuery], index: &ImageIndex, relevant: F) -> Result<EvalReport>
where
    F: Fn(&EvalQuery, &ImageIndex, usize) -> bool,
{
    if queries.is_empty() {
        return Err(Error::arg("evaluation needs at least one query"));
    }
    let mut per_query = Vec::with_capacity(queries.len());
    let mut p_sums = [0.0; PRECISION_CUTOFFS.len()];
    for q in queries {
        let ranked = rank_multi(&q.embeddings, index)?;
        let rel: BTreeSet<String> = (0..index.len())
            .filter(|&i| relevant(q, index, i))
            .map(|i| index.ids[i].clone())
            .collect();
        let ap = average_precision(&ranked, &rel)?;
        for (s, &k) in p_sums.iter_mut().zip(&PRECISION_CUTOFFS) {
            *s += precision_at(&ranked, &rel, k);
        }
        per_query.push(QueryScore { query: q.name.clone(), ap });
    }
    let n = queries.len() as f64;
    let map = per_query.iter().map(|s| s.ap).sum::<f64>() / n;
    let precision_at = PRECISION_CUTOFFS
        .iter()
        .zip(p_sums)
        .map(|(k, s)| (k.to_string(), s / n))
        .collect();
    Ok(EvalReport { map, per_query, precision_at })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ranking(ids: &[&str]) -> RankedList {
        RankedList::new(ids.iter().enumerate().map(|(i, id)| (id.to_string(), i as f64 * 0.1)).collect())
    }

    fn set(ids: &[&str]) -> BTreeSet<String> {
        ids.iter().map(|s| s.to_string()).collect()
    }

    /// Literal definition: average over relevant items of
    /// |relevant ∩ top-rank(item)| / rank(item).
    fn oracle_ap(order: &[usize], relevant: &[bool]) -> f64 {
        let total = relevant.iter().filter(|&&r| r).count();
        if total == 0 {
            return 0.0;
        }
        let mut acc = 0.0;
        for (pos, &item) in order.iter().enumerate() {
            if relevant[item] {
                let above = order[..=pos].iter().filter(|&&j| relevant[j]).count();
                acc += above as f64 / (pos + 1) as f64;
            }
        }
        acc / total as f64
    }

    #[test]
    fn examples() {
        let r = ranking(&["a", "b", "c"]);
        assert_eq!(average_precision(&r, &set(&["a", "c"])).unwrap(), (1.0 + 2.0 / 3.0) / 2.0);
        assert!((average_precision(&r, &set(&["a", "c"])).unwrap() - 0.83333).abs() < 1e-5);
        assert_eq!(average_precision(&r, &set(&["a", "b"])).unwrap(), 1.0);
        assert_eq!(average_precision(&r, &set(&[])).unwrap(), 0.0);
        assert!(matches!(average_precision(&r, &set(&["z"])), Err(Error::Argument(_))));
        assert_eq!(precision_at(&r, &set(&["a", "c"]), 1), 1.0);
        assert_eq!(precision_at(&r, &set(&["a", "c"]), 5), 0.4);
    }

    proptest! {
        #[test]
        fn ap_matches_definition(
            (order, relevant) in (1usize..30).prop_flat_map(|n| (
                Just((0..n).collect::<Vec<_>>()).prop_shuffle(),
                proptest::collection::vec(any::<bool>(), n),
            ))
        ) {
            let ids: Vec<String> = order.iter().map(|i| format!("i{i:03}")).collect();
            let ranked = RankedList::new(ids.iter().enumerate().map(|(p, id)| (id.clone(), p as f64)).collect());
            let rel: BTreeSet<String> = (0..order.len()).filter(|&i| relevant[i]).map(|i| format!("i{i:03}")).collect();
            let ap = average_precision(&ranked, &rel).unwrap();
            prop_assert_eq!(ap.to_bits(), oracle_ap(&order, &relevant).to_bits());
            prop_assert!((0.0..=1.0).contains(&ap));
        }

        #[test]
        fn promoting_a_relevant_item_never_lowers_ap(
            (order, relevant, pos) in (2usize..20).prop_flat_map(|n| (
                Just((0..n).collect::<Vec<_>>()).prop_shuffle(),
                proptest::collection::vec(any::<bool>(), n),
                1..n,
            ))
        ) {
            prop_assume!(relevant[order[pos]]);
            let mut promoted = order.clone();
            promoted.swap(pos - 1, pos);
            prop_assert!(oracle_ap(&promoted, &relevant) >= oracle_ap(&order, &relevant));
            let build = |o: &[usize]| RankedList::new(o.iter().enumerate().map(|(p, i)| (format!("i{i:03}"), p as f64)).collect());
            let rel: BTreeSet<String> = (0..order.len()).filter(|&i| relevant[i]).map(|i| format!("i{i:03}")).collect();
            prop_assert!(
                average_precision(&build(&promoted), &rel).unwrap() >= average_precision(&build(&order), &rel).unwrap()
            );
        }
    }
}
