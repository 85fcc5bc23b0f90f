//! JSON dataset manifest (`docs/manifest.schema.json`).
//!
//! Tensor paths are stored relative to the manifest's directory unless absolute.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::format::read_header;
use super::{load_feature_map, Detection, FeatureMap, FeaturePyramid};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageSize {
    pub width: f64,
    pub height: f64,
}

/// One annotated image with pointers to its exported features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageRecord {
    pub id: String,
    pub size: ImageSize,
    /// Per-level detector feature files, shallowest level first.
    pub features: Vec<PathBuf>,
    pub oracle: Option<PathBuf>,
    pub detections: Vec<Detection>,
    pub ground_truth: Vec<Detection>,
}

/// Coarse → fine class map with its inverse.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ClassTaxonomy {
    coarse_to_fine: BTreeMap<String, BTreeSet<String>>,
    fine_to_coarse: BTreeMap<String, String>,
}

impl ClassTaxonomy {
    pub fn new(coarse_to_fine: BTreeMap<String, Vec<String>>) -> Result<Self> {
        let mut out = ClassTaxonomy::default();
        for (coarse, fines) in coarse_to_fine {
            let set = out.coarse_to_fine.entry(coarse.clone()).or_default();
            for fine in fines {
                if let Some(prev) = out.fine_to_coarse.get(&fine) {
                    return Err(Error::Schema(format!(
                        "fine class {fine:?} listed under both {prev:?} and {coarse:?}"
                    )));
                }
                out.fine_to_coarse.insert(fine.clone(), coarse.clone());
                set.insert(fine);
            }
        }
        Ok(out)
    }

    pub fn coarse_classes(&self) -> impl Iterator<Item = &str> {
        self.coarse_to_fine.keys().map(String::as_str)
    }

    pub fn fine_classes(&self) -> impl Iterator<Item = &str> {
        self.fine_to_coarse.keys().map(String::as_str)
    }

    pub fn fines_of(&self, coarse: &str) -> Option<&BTreeSet<String>> {
        self.coarse_to_fine.get(coarse)
    }

    pub fn coarse_of(&self, fine: &str) -> Option<&str> {
        self.fine_to_coarse.get(fine).map(String::as_str)
    }

    pub fn num_coarse(&self) -> usize {
        self.coarse_to_fine.len()
    }

    pub fn num_fine(&self) -> usize {
        self.fine_to_coarse.len()
    }

    pub fn as_map(&self) -> BTreeMap<String, Vec<String>> {
        self.coarse_to_fine
            .iter()
            .map(|(c, f)| (c.clone(), f.iter().cloned().collect()))
            .collect()
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawManifest {
    images: Vec<ImageRecord>,
    coarse_to_fine: BTreeMap<String, Vec<String>>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LoadOptions {
    /// Pixels added on every side of ground-truth boxes (clamped to the image).
    pub gt_padding: f64,
}

/// Validated dataset manifest.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    root: PathBuf,
    pub images: Vec<ImageRecord>,
    pub taxonomy: ClassTaxonomy,
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest> {
    load_manifest_with(path, LoadOptions::default())
}

pub fn load_manifest_with(path: impl AsRef<Path>, options: LoadOptions) -> Result<DatasetManifest> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let raw: RawManifest = serde_json::from_str(&text)
        .map_err(|e| Error::Schema(format!("{}: {e}", path.display())))?;
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut manifest =
        DatasetManifest::from_parts(root, raw.images, ClassTaxonomy::new(raw.coarse_to_fine)?)?;
    if options.gt_padding != 0.0 {
        manifest.pad_ground_truth(options.gt_padding)?;
    }
    Ok(manifest)
}

impl DatasetManifest {
    /// Validates every invariant eagerly, including that each referenced tensor file
    /// has a well-formed rank-3 header and matching length.
    pub fn from_parts(
        root: PathBuf,
        images: Vec<ImageRecord>,
        taxonomy: ClassTaxonomy,
    ) -> Result<Self> {
        let manifest = Self {
            root,
            images,
            taxonomy,
        };
        manifest.validate()?;
        Ok(manifest)
    }

    fn validate(&self) -> Result<()> {
        let mut ids = HashSet::new();
        let levels = self.images.first().map(|r| r.features.len());
        for rec in &self.images {
            if !ids.insert(rec.id.as_str()) {
                return Err(Error::Schema(format!("duplicate image id {:?}", rec.id)));
            }
            if !(rec.size.width > 0.0 && rec.size.height > 0.0) {
                return Err(Error::Schema(format!(
                    "image {:?} has non-positive size",
                    rec.id
                )));
            }
            if rec.features.is_empty() {
                return Err(Error::Schema(format!(
                    "image {:?} lists no feature levels",
                    rec.id
                )));
            }
            if Some(rec.features.len()) != levels {
                return Err(Error::Schema(format!(
                    "image {:?} has {} feature levels, expected {}",
                    rec.id,
                    rec.features.len(),
                    levels.unwrap_or(0)
                )));
            }
            for det in rec.detections.iter().chain(&rec.ground_truth) {
                det.validate()
                    .map_err(|e| Error::Schema(format!("image {:?}: {e}", rec.id)))?;
            }
            for gt in &rec.ground_truth {
                if let Some(fine) = &gt.fine_class {
                    match self.taxonomy.coarse_of(fine) {
                        None => {
                            return Err(Error::Schema(format!(
                                "image {:?}: fine class {fine:?} not in coarse_to_fine",
                                rec.id
                            )))
                        }
                        Some(parent) if parent != gt.coarse_class => {
                            return Err(Error::Schema(format!(
                                "image {:?}: fine class {fine:?} belongs to {parent:?}, annotated as {:?}",
                                rec.id, gt.coarse_class
                            )))
                        }
                        _ => {}
                    }
                }
            }
            for p in rec.features.iter().chain(rec.oracle.iter()) {
                let full = self.resolve(p);
                let header = read_header(&full)
                    .map_err(|e| Error::Reference(format!("image {:?}: {e}", rec.id)))?;
                if header.dims.len() != 3 {
                    return Err(Error::Reference(format!(
                        "image {:?}: {} is rank {}, expected a feature map",
                        rec.id,
                        full.display(),
                        header.dims.len()
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    pub fn image(&self, id: &str) -> Option<&ImageRecord> {
        self.images.iter().find(|r| r.id == id)
    }

    pub fn num_levels(&self) -> usize {
        self.images.first().map_or(0, |r| r.features.len())
    }

    pub fn load_pyramid(&self, rec: &ImageRecord) -> Result<FeaturePyramid> {
        let levels = rec
            .features
            .iter()
            .map(|p| load_feature_map(self.resolve(p)))
            .collect::<Result<Vec<_>>>()?;
        FeaturePyramid::new(levels)
    }

    pub fn load_oracle(&self, rec: &ImageRecord) -> Result<FeatureMap> {
        let p = rec.oracle.as_ref().ok_or_else(|| {
            Error::Validation(format!("image {:?} has no oracle features", rec.id))
        })?;
        load_feature_map(self.resolve(p))
    }

    /// Fails unless every image carries an oracle feature file.
    pub fn require_oracle(&self) -> Result<()> {
        match self.images.iter().find(|r| r.oracle.is_none()) {
            Some(r) => Err(Error::Validation(format!(
                "image {:?} has no oracle features; training needs them everywhere",
                r.id
            ))),
            None => Ok(()),
        }
    }

    pub fn pad_ground_truth(&mut self, pad: f64) -> Result<()> {
        for rec in &mut self.images {
            for gt in &mut rec.ground_truth {
                gt.x0 = (gt.x0 - pad).max(0.0);
                gt.y0 = (gt.y0 - pad).max(0.0);
                gt.x1 = (gt.x1 + pad).min(rec.size.width);
                gt.y1 = (gt.y1 + pad).min(rec.size.height);
                gt.validate()
                    .map_err(|e| Error::Schema(format!("padding {pad} on {:?}: {e}", rec.id)))?;
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        let raw = RawManifest {
            images: self.images.clone(),
            coarse_to_fine: self.taxonomy.as_map(),
        };
        serde_json::to_string_pretty(&raw).map_err(|e| Error::Schema(e.to_string()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn write_map(dir: &Path, name: &str) -> String {
        FeatureMap::<f32>::zeros(2, 2, 3)
            .save(dir.join(name))
            .unwrap();
        name.to_string()
    }

    fn record(id: &str, feat: &str, gt: serde_json::Value) -> serde_json::Value {
        json!({
            "id": id,
            "size": {"width": 10.0, "height": 10.0},
            "features": [feat],
            "oracle": null,
            "detections": [],
            "ground_truth": gt,
        })
    }

    #[test]
    fn minimal_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let f = write_map(dir.path(), "f.axft");
        let doc = json!({
            "images": [record("a", &f, json!([{"x0":1,"y0":1,"x1":5,"y1":5,"coarse_class":"dog","confidence":1.0,"fine_class":"dog1"}]))],
            "coarse_to_fine": {"dog": ["dog1"]},
        });
        let p = dir.path().join("m.json");
        fs::write(&p, doc.to_string()).unwrap();
        let m = load_manifest(&p).unwrap();
        assert_eq!(m.taxonomy.num_coarse(), 1);
        assert_eq!(m.taxonomy.num_fine(), 1);
        assert_eq!(m.load_pyramid(&m.images[0]).unwrap().len(), 1);
        assert!(m.require_oracle().is_err());
    }

    #[test]
    fn fine_under_two_coarse_is_schema_error() {
        let mut map = BTreeMap::new();
        map.insert("dog".to_string(), vec!["dog1".to_string()]);
        map.insert("cat".to_string(), vec!["dog1".to_string()]);
        assert!(matches!(ClassTaxonomy::new(map), Err(Error::Schema(_))));
    }

    #[test]
    fn missing_file_is_reference_error() {
        let dir = tempfile::tempdir().unwrap();
        let doc = json!({
            "images": [record("a", "nope.axft", json!([]))],
            "coarse_to_fine": {},
        });
        let p = dir.path().join("m.json");
        fs::write(&p, doc.to_string()).unwrap();
        assert!(matches!(load_manifest(&p), Err(Error::Reference(_))));
    }

    #[test]
    fn unknown_keys_and_wrong_parent_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let f = write_map(dir.path(), "f.axft");
        let mut rec = record("a", &f, json!([]));
        rec["extra"] = json!(1);
        let doc = json!({"images": [rec], "coarse_to_fine": {}});
        let p = dir.path().join("m.json");
        fs::write(&p, doc.to_string()).unwrap();
        assert!(matches!(load_manifest(&p), Err(Error::Schema(_))));

        let doc = json!({
            "images": [record("a", &f, json!([{"x0":1,"y0":1,"x1":5,"y1":5,"coarse_class":"cat","confidence":1.0,"fine_class":"dog1"}]))],
            "coarse_to_fine": {"dog": ["dog1"], "cat": []},
        });
        fs::write(&p, doc.to_string()).unwrap();
        assert!(matches!(load_manifest(&p), Err(Error::Schema(_))));
    }

    #[test]
    fn padding_expands_and_clamps() {
        let dir = tempfile::tempdir().unwrap();
        let f = write_map(dir.path(), "f.axft");
        let doc = json!({
            "images": [record("a", &f, json!([{"x0":1,"y0":1,"x1":5,"y1":9,"coarse_class":"dog","confidence":1.0}]))],
            "coarse_to_fine": {"dog": []},
        });
        let p = dir.path().join("m.json");
        fs::write(&p, doc.to_string()).unwrap();
        let m = load_manifest_with(&p, LoadOptions { gt_padding: 2.0 }).unwrap();
        let gt = &m.images[0].ground_truth[0];
        assert_eq!((gt.x0, gt.y0, gt.x1, gt.y1), (0.0, 0.0, 7.0, 10.0));
    }
}
