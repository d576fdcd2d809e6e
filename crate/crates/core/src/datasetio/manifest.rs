use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, Violation, ViolationKind};
use crate::pairgen::{DatasetItem, Modality};

/// Dataset description. Paths are relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub classes: Vec<String>,
    /// `[h, w, M]`
    pub grid_shape: Vec<usize>,
    pub items: Vec<DatasetItem>,
    /// modality → key (class name for text, sketch id for sketches) → path
    pub query_features: BTreeMap<Modality, BTreeMap<String, String>>,
    /// sketch id → depicted class
    #[serde(default)]
    pub sketch_classes: BTreeMap<String, String>,
    #[serde(skip)]
    pub root: PathBuf,
}

impl Manifest {
    pub fn grid_dims(&self) -> (usize, usize, usize) {
        (self.grid_shape[0], self.grid_shape[1], self.grid_shape[2])
    }

    pub fn query_table(&self, modality: Modality) -> Option<&BTreeMap<String, String>> {
        self.query_features.get(&modality)
    }

    pub fn resolve(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    /// Every violation found, in a stable order.
    pub fn violations(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        let mut flag = |kind, detail: String| out.push(Violation { kind, detail });

        if self.grid_shape.len() != 3 || self.grid_shape.contains(&0) {
            flag(ViolationKind::BadGridShape, format!("grid_shape {:?} is not [h, w, M] with positive entries", self.grid_shape));
        }
        let classes: BTreeSet<&str> = self.classes.iter().map(String::as_str).collect();
        if classes.len() != self.classes.len() {
            flag(ViolationKind::DuplicateId, "class list contains duplicates".into());
        }

        let empty = BTreeMap::new();
        let text = self.query_table(Modality::Text).unwrap_or(&empty);
        let sketch = self.query_table(Modality::Sketch).unwrap_or(&empty);

        let mut seen = BTreeSet::new();
        for item in &self.items {
            if !seen.insert(item.id.as_str()) {
                flag(ViolationKind::DuplicateId, format!("item id {} appears more than once", item.id));
            }
            let n = item.class_labels.len();
            if !(1..=2).contains(&n) {
                flag(ViolationKind::BadLabelCount, format!("item {} has {n} labels", item.id));
            } else if n == 2 && item.class_labels[0] == item.class_labels[1] {
                flag(ViolationKind::BadLabelCount, format!("item {} repeats label {}", item.id, item.class_labels[0]));
            }
            for l in &item.class_labels {
                if !classes.contains(l.as_str()) {
                    flag(ViolationKind::UnknownClass, format!("item {} has label {l} outside the class list", item.id));
                }
            }
            if !self.resolve(&item.grid_ref).is_file() {
                flag(ViolationKind::DanglingPath, format!("item {}: grid file {} not found", item.id, item.grid_ref));
            }
            for s in &item.fine_grained_sketch_refs {
                if !sketch.contains_key(s) {
                    flag(ViolationKind::UnknownQuery, format!("item {} links unknown sketch {s}", item.id));
                }
            }
            for t in &item.text_label_refs {
                if !text.contains_key(t) {
                    flag(ViolationKind::UnknownQuery, format!("item {} links unknown text feature {t}", item.id));
                }
            }
        }

        for (modality, table) in &self.query_features {
            for (key, path) in table {
                if *modality == Modality::Text && !classes.contains(key.as_str()) {
                    flag(ViolationKind::UnknownClass, format!("text feature for unknown class {key}"));
                }
                if !self.resolve(path).is_file() {
                    flag(ViolationKind::DanglingPath, format!("{modality} feature {key}: file {path} not found"));
                }
            }
        }
        for (s, c) in &self.sketch_classes {
            if !sketch.contains_key(s) {
                flag(ViolationKind::UnknownQuery, format!("class given for unknown sketch {s}"));
            }
            if !classes.contains(c.as_str()) {
                flag(ViolationKind::UnknownClass, format!("sketch {s} has class {c} outside the class list"));
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(v))
        }
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }
}

/// Reads and validates a manifest; every violation is reported at once.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<Manifest> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut manifest: Manifest = serde_json::from_str(&text).map_err(|e| {
        Error::Validation(vec![Violation { kind: ViolationKind::MalformedJson, detail: e.to_string() }])
    })?;
    manifest.root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    manifest.validate()?;
    Ok(manifest)
}
