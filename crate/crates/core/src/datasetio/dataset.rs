use std::collections::BTreeMap;
use std::path::Path;

use super::manifest::{load_manifest, Manifest};
use super::tensorfile::read_tensor;
use crate::attention::FeatureGrid;
use crate::error::{Error, Result};
use crate::numkernel::Tensor;
use crate::pairgen::Modality;

/// Access to image grids and raw query features by key.
pub trait FeatureSource: Sync {
    fn grid(&self, item_id: &str) -> Result<&FeatureGrid>;
    fn query(&self, modality: Modality, key: &str) -> Result<&Tensor>;
}

/// A manifest with every referenced tensor held in memory.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: Manifest,
    grids: BTreeMap<String, FeatureGrid>,
    queries: BTreeMap<(Modality, String), Tensor>,
}

impl Dataset {
    pub fn load(manifest_path: impl AsRef<Path>) -> Result<Self> {
        let manifest = load_manifest(manifest_path)?;
        let mut grids = BTreeMap::new();
        for item in &manifest.items {
            let t = read_tensor(manifest.resolve(&item.grid_ref))
                .map_err(|e| Error::Item { id: item.id.clone(), source: Box::new(e) })?;
            grids.insert(item.id.clone(), t);
        }
        let mut queries = BTreeMap::new();
        for (&modality, table) in &manifest.query_features {
            for (key, path) in table {
                queries.insert((modality, key.clone()), read_tensor(manifest.resolve(path))?);
            }
        }
        Self::from_parts(manifest, grids, queries)
    }

    /// Assembles a dataset from tensors already in memory; grid shapes are
    /// checked against the manifest.
    pub fn from_parts(
        manifest: Manifest,
        grids: BTreeMap<String, Tensor>,
        queries: BTreeMap<(Modality, String), Tensor>,
    ) -> Result<Self> {
        let expected = manifest.grid_shape.clone();
        let grids = grids
            .into_iter()
            .map(|(id, t)| {
                if t.shape() != expected.as_slice() {
                    return Err(Error::Item {
                        id: id.clone(),
                        source: Box::new(Error::dim(format!("grid shape {:?}, manifest says {expected:?}", t.shape()))),
                    });
                }
                Ok((id, FeatureGrid::from_tensor(t)?))
            })
            .collect::<Result<_>>()?;
        Ok(Dataset { manifest, grids, queries })
    }

    /// Width of the raw features of one modality.
    pub fn query_dim(&self, modality: Modality) -> Option<usize> {
        self.queries.iter().find(|((m, _), _)| *m == modality).map(|(_, t)| t.numel())
    }
}

impl FeatureSource for Dataset {
    fn grid(&self, item_id: &str) -> Result<&FeatureGrid> {
        self.grids
            .get(item_id)
            .ok_or_else(|| Error::arg(format!("no grid for item {item_id}")))
    }

    fn query(&self, modality: Modality, key: &str) -> Result<&Tensor> {
        self.queries
            .get(&(modality, key.to_owned()))
            .ok_or_else(|| Error::arg(format!("no {modality} query feature '{key}'")))
    }
}
