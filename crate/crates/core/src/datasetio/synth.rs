//! Synthetic stand-in for a sketch/text/image retrieval corpus.
//!
//! Every class `c` gets a random unit prototype `u_c ∈ ℝ^M`. An image of class
//! `c` is a grid of Gaussian noise in which `object_cells` randomly chosen
//! cells additionally carry `u_c`; two-object images place the two classes on
//! disjoint cell sets. Text features are `A_text·u_c + noise` (one per class)
//! and sketches `A_sketch·u_c + noise` (several per image), with fixed random
//! maps whose entries have standard deviation `projection_std`; the ratio of
//! a noise sigma to `projection_std` is the per-coordinate noise-to-signal
//! ratio of that modality.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::index::sample;
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::dataset::Dataset;
use super::manifest::Manifest;
use super::tensorfile::write_tensor;
use crate::error::{Error, Result};
use crate::numkernel::{matvec, Tensor};
use crate::pairgen::{DatasetItem, Modality};
use crate::rng::{seeded, Rng, Stream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub seed: u64,
    pub num_classes: usize,
    /// Images per class, or per combined class in multi mode.
    pub images_per_class: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    pub channels: usize,
    /// Cells carrying each object's signal.
    pub object_cells: usize,
    pub noise_image: f64,
    pub noise_text: f64,
    pub noise_sketch: f64,
    /// Two-object images, one per pair of classes.
    pub multi: bool,
    pub text_dim: usize,
    pub sketch_dim: usize,
    /// Standard deviation of the entries of the text and sketch projection
    /// maps, i.e. of the clean signal in each feature coordinate.
    pub projection_std: f64,
    /// Sketches drawn per image and per depicted class.
    pub sketches_per_image: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 0,
            num_classes: 10,
            images_per_class: 50,
            grid_h: 7,
            grid_w: 7,
            channels: 512,
            object_cells: 2,
            noise_image: 0.1,
            noise_text: 0.05,
            noise_sketch: 0.2,
            multi: false,
            text_dim: 1000,
            sketch_dim: 4096,
            projection_std: 0.03,
            sketches_per_image: 5,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let cells = self.grid_h * self.grid_w;
        let positive = [
            ("num_classes", self.num_classes),
            ("images_per_class", self.images_per_class),
            ("grid_h", self.grid_h),
            ("grid_w", self.grid_w),
            ("channels", self.channels),
            ("object_cells", self.object_cells),
            ("text_dim", self.text_dim),
            ("sketch_dim", self.sketch_dim),
            ("sketches_per_image", self.sketches_per_image),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::arg(format!("{name} must be positive")));
            }
        }
        if self.object_cells > cells {
            return Err(Error::arg(format!("object_cells {} exceeds the {cells} grid cells", self.object_cells)));
        }
        if self.multi && 2 * self.object_cells > cells {
            return Err(Error::arg(format!(
                "two objects of {} cells do not fit disjointly in {cells} grid cells",
                self.object_cells
            )));
        }
        if self.multi && self.num_classes < 2 {
            return Err(Error::arg("multi mode needs at least two classes"));
        }
        if !(self.projection_std > 0.0) || !self.projection_std.is_finite() {
            return Err(Error::arg(format!("projection_std must be finite and positive, got {}", self.projection_std)));
        }
        for (name, s) in [("noise_image", self.noise_image), ("noise_text", self.noise_text), ("noise_sketch", self.noise_sketch)] {
            if !(s >= 0.0) || !s.is_finite() {
                return Err(Error::arg(format!("{name} must be a finite nonnegative number, got {s}")));
            }
        }
        Ok(())
    }
}

/// A generated dataset held in memory.
#[derive(Debug, Clone)]
pub struct SynthDataset {
    pub manifest: Manifest,
    pub grids: BTreeMap<String, Tensor>,
    pub queries: BTreeMap<(Modality, String), Tensor>,
    /// Per item, the object cells of each label (in label order).
    pub object_cells: BTreeMap<String, Vec<Vec<usize>>>,
    /// Class prototypes, in class order.
    pub prototypes: Vec<Tensor>,
}

impl SynthDataset {
    pub fn into_dataset(self) -> Result<Dataset> {
        Dataset::from_parts(self.manifest, self.grids, self.queries)
    }

    /// Writes the directory tree under `dir`: `manifest.json`, `grids/`,
    /// `queries/text/` and `queries/sketch/`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        for sub in ["grids", "queries/text", "queries/sketch"] {
            let p = dir.join(sub);
            fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
        }
        for item in &self.manifest.items {
            write_tensor(dir.join(&item.grid_ref), &self.grids[&item.id])?;
        }
        for (&modality, table) in &self.manifest.query_features {
            for (key, path) in table {
                write_tensor(dir.join(path), &self.queries[&(modality, key.clone())])?;
            }
        }
        let path = dir.join("manifest.json");
        fs::write(&path, self.manifest.to_json()?).map_err(|e| Error::io(&path, e))
    }
}

fn normals(rng: &mut Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()
}

fn noisy_projection(rng: &mut Rng, map: &Tensor, proto: &Tensor, sigma: f64) -> Tensor {
    let clean = matvec(map, proto).expect("projection shapes agree");
    let noise = normals(rng, clean.numel(), sigma);
    Tensor::vector(clean.data().iter().zip(noise).map(|(c, n)| c + n).collect())
}

pub fn class_name(c: usize) -> String {
    format!("class{c:02}")
}

pub fn synthesize(cfg: &SynthConfig) -> Result<SynthDataset> {
    cfg.validate()?;
    let mut rng = seeded(cfg.seed, Stream::Synth);
    let (m, cells) = (cfg.channels, cfg.grid_h * cfg.grid_w);
    let classes: Vec<String> = (0..cfg.num_classes).map(class_name).collect();

    let prototypes: Vec<Tensor> = (0..cfg.num_classes)
        .map(|_| {
            let v = Tensor::vector(normals(&mut rng, m, 1.0));
            let n = v.norm();
            Tensor::vector(v.into_data().into_iter().map(|x| x / n).collect())
        })
        .collect();
    let text_map = Tensor::matrix(
        cfg.text_dim,
        m,
        normals(&mut rng, cfg.text_dim * m, cfg.projection_std),
    )?;
    let sketch_map = Tensor::matrix(
        cfg.sketch_dim,
        m,
        normals(&mut rng, cfg.sketch_dim * m, cfg.projection_std),
    )?;

    let mut queries = BTreeMap::new();
    let mut text_table = BTreeMap::new();
    for (c, name) in classes.iter().enumerate() {
        let t = noisy_projection(&mut rng, &text_map, &prototypes[c], cfg.noise_text);
        queries.insert((Modality::Text, name.clone()), t);
        text_table.insert(name.clone(), format!("queries/text/{name}.xmt"));
    }

    let groups: Vec<Vec<usize>> = if cfg.multi {
        (0..cfg.num_classes)
            .flat_map(|a| (a + 1..cfg.num_classes).map(move |b| vec![a, b]))
            .collect()
    } else {
        (0..cfg.num_classes).map(|c| vec![c]).collect()
    };

    let mut items = Vec::new();
    let mut grids = BTreeMap::new();
    let mut object_cells = BTreeMap::new();
    let mut sketch_table = BTreeMap::new();
    let mut sketch_classes = BTreeMap::new();
    for group in &groups {
        for _ in 0..cfg.images_per_class {
            let id = format!("img{:05}", items.len());
            let chosen = sample(&mut rng, cells, cfg.object_cells * group.len()).into_vec();
            let mut grid = normals(&mut rng, cells * m, cfg.noise_image);
            let mut placed = Vec::with_capacity(group.len());
            for (k, &c) in group.iter().enumerate() {
                let mine = chosen[k * cfg.object_cells..(k + 1) * cfg.object_cells].to_vec();
                for &cell in &mine {
                    for (g, u) in grid[cell * m..(cell + 1) * m].iter_mut().zip(prototypes[c].data()) {
                        *g += u;
                    }
                }
                placed.push(mine);
            }
            grids.insert(id.clone(), Tensor::new(vec![cfg.grid_h, cfg.grid_w, m], grid)?);
            object_cells.insert(id.clone(), placed);

            let mut sketch_refs = Vec::new();
            for &c in group {
                for _ in 0..cfg.sketches_per_image {
                    let sid = format!("{id}_s{}", sketch_refs.len());
                    let s = noisy_projection(&mut rng, &sketch_map, &prototypes[c], cfg.noise_sketch);
                    queries.insert((Modality::Sketch, sid.clone()), s);
                    sketch_table.insert(sid.clone(), format!("queries/sketch/{sid}.xmt"));
                    sketch_classes.insert(sid.clone(), classes[c].clone());
                    sketch_refs.push(sid);
                }
            }
            let labels: Vec<String> = group.iter().map(|&c| classes[c].clone()).collect();
            items.push(DatasetItem {
                grid_ref: format!("grids/{id}.xmt"),
                id,
                text_label_refs: labels.clone(),
                class_labels: labels,
                fine_grained_sketch_refs: sketch_refs,
            });
        }
    }

    let manifest = Manifest {
        classes,
        grid_shape: vec![cfg.grid_h, cfg.grid_w, m],
        items,
        query_features: BTreeMap::from([(Modality::Text, text_table), (Modality::Sketch, sketch_table)]),
        sketch_classes,
        root: Default::default(),
    };
    Ok(SynthDataset { manifest, grids, queries, object_cells, prototypes })
}

/// Generates the dataset and writes it under `dir`.
pub fn gen_synthetic(cfg: &SynthConfig, dir: impl AsRef<Path>) -> Result<Manifest> {
    let dir = dir.as_ref();
    let mut data = synthesize(cfg)?;
    data.write(dir)?;
    data.manifest.root = dir.to_path_buf();
    Ok(data.manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasetio::load_manifest;
    use crate::numkernel::cosine_similarity;

    fn small(multi: bool) -> SynthConfig {
        SynthConfig {
            num_classes: 4,
            images_per_class: 3,
            grid_h: 3,
            grid_w: 3,
            channels: 8,
            object_cells: 2,
            text_dim: 6,
            sketch_dim: 10,
            multi,
            ..Default::default()
        }
    }

    #[test]
    fn default_layout() {
        let cfg = SynthConfig { images_per_class: 2, ..Default::default() };
        let d = synthesize(&cfg).unwrap();
        assert_eq!(d.manifest.items.len(), 20);
        assert_eq!(d.manifest.grid_shape, [7, 7, 512]);
        assert_eq!(d.grids.values().next().unwrap().shape(), &[7, 7, 512]);
        assert_eq!(d.queries[&(Modality::Text, class_name(0))].numel(), 1000);
    }

    #[test]
    fn multi_items_have_two_labels_on_disjoint_cells() {
        let d = synthesize(&small(true)).unwrap();
        assert_eq!(d.manifest.items.len(), 6 * 3);
        for item in &d.manifest.items {
            assert_eq!(item.class_labels.len(), 2);
            let cells = &d.object_cells[&item.id];
            assert!(cells[0].iter().all(|c| !cells[1].contains(c)));
            assert_eq!(item.fine_grained_sketch_refs.len(), 2 * SynthConfig::default().sketches_per_image);
        }
    }

    #[test]
    fn oversize_objects_rejected() {
        let cfg = SynthConfig { object_cells: 5, ..small(true) };
        assert!(matches!(synthesize(&cfg), Err(Error::Argument(_))));
        let cfg = SynthConfig { object_cells: 10, ..small(false) };
        assert!(matches!(synthesize(&cfg), Err(Error::Argument(_))));
        let cfg = SynthConfig { noise_text: -1.0, ..small(false) };
        assert!(synthesize(&cfg).is_err());
    }

    #[test]
    fn written_tree_loads_and_is_byte_identical() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let cfg = small(false);
        gen_synthetic(&cfg, a.path()).unwrap();
        gen_synthetic(&cfg, b.path()).unwrap();
        let m = load_manifest(a.path().join("manifest.json")).unwrap();
        assert_eq!(m.items.len(), 12);
        for entry in walk(a.path()) {
            let rel = entry.strip_prefix(a.path()).unwrap();
            assert_eq!(fs::read(&entry).unwrap(), fs::read(b.path().join(rel)).unwrap(), "{rel:?}");
        }
        assert_eq!(walk(a.path()).len(), walk(b.path()).len());
    }

    fn walk(dir: &Path) -> Vec<std::path::PathBuf> {
        let mut out = Vec::new();
        for e in fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                out.extend(walk(&p));
            } else {
                out.push(p);
            }
        }
        out.sort();
        out
    }

    #[test]
    fn classes_are_separable_by_grid_mean() {
        let cfg = SynthConfig { num_classes: 5, images_per_class: 6, channels: 64, ..Default::default() };
        let d = synthesize(&cfg).unwrap();
        let means: Vec<(String, Tensor)> = d
            .manifest
            .items
            .iter()
            .map(|it| {
                let g = &d.grids[&it.id];
                let m = g.shape()[2];
                let mut mean = vec![0.0; m];
                for row in g.data().chunks_exact(m) {
                    mean.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                }
                (it.class_key(), Tensor::vector(mean))
            })
            .collect();
        let (mut within, mut nw, mut between, mut nb) = (0.0, 0, 0.0, 0);
        for i in 0..means.len() {
            for j in i + 1..means.len() {
                let c = cosine_similarity(&means[i].1, &means[j].1).unwrap();
                if means[i].0 == means[j].0 {
                    within += c;
                    nw += 1;
                } else {
                    between += c;
                    nb += 1;
                }
            }
        }
        assert!(within / nw as f64 > between / nb as f64);
    }
}
