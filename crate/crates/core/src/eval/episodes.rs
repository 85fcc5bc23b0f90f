use std::collections::{BTreeMap, BTreeSet};

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::indexed_substream;
use crate::tensor_store::{DatasetManifest, Detection};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SupportItem {
    pub image_id: String,
    pub annotation: Detection,
}

/// One support/query split. Support annotations are grouped by fine class in
/// sorted class order; query images keep manifest order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub shots: usize,
    pub support: Vec<SupportItem>,
    pub query: Vec<String>,
}

impl Episode {
    pub fn support_images(&self) -> BTreeSet<&str> {
        self.support.iter().map(|s| s.image_id.as_str()).collect()
    }

    /// Fine classes with no ground-truth annotation left in the query images.
    pub fn classes_missing_from_query(&self, manifest: &DatasetManifest) -> Vec<String> {
        let present: BTreeSet<&str> = self
            .query
            .iter()
            .filter_map(|id| manifest.image(id))
            .flat_map(|r| {
                r.ground_truth
                    .iter()
                    .filter_map(|g| g.fine_class.as_deref())
            })
            .collect();
        manifest
            .taxonomy
            .fine_classes()
            .filter(|f| !present.contains(f))
            .map(str::to_string)
            .collect()
    }
}

/// Every fine-labeled ground-truth annotation as `(image index, annotation index)`,
/// grouped by fine class.
fn annotation_pool(manifest: &DatasetManifest) -> Result<BTreeMap<String, Vec<(usize, usize)>>> {
    let mut pool: BTreeMap<String, Vec<(usize, usize)>> = manifest
        .taxonomy
        .fine_classes()
        .map(|f| (f.to_string(), Vec::new()))
        .collect();
    for (i, rec) in manifest.images.iter().enumerate() {
        for (j, g) in rec.ground_truth.iter().enumerate() {
            if let Some(f) = &g.fine_class {
                pool.entry(f.clone()).or_default().push((i, j));
            }
        }
    }
    if let Some((f, _)) = pool.iter().find(|(_, v)| v.is_empty()) {
        return Err(Error::Dataset(format!(
            "fine class {f:?} has no annotated samples"
        )));
    }
    Ok(pool)
}

/// Samples `min(shots, available)` support annotations per fine class without
/// replacement; episode `e` draws from its own sub-stream of `seed`.
pub fn sample_episodes(
    manifest: &DatasetManifest,
    shots: usize,
    n_episodes: usize,
    seed: u64,
) -> Result<Vec<Episode>> {
    if n_episodes == 0 {
        return Err(Error::Config("at least one episode is required".into()));
    }
    if shots == 0 {
        return Err(Error::Config("shots must be at least 1".into()));
    }
    let pool = annotation_pool(manifest)?;
    (0..n_episodes)
        .map(|e| {
            let mut rng = indexed_substream(seed, "episodes", e as u64);
            let mut support = Vec::new();
            for anns in pool.values() {
                let k = shots.min(anns.len());
                let mut picked = sample(&mut rng, anns.len(), k).into_vec();
                picked.sort_unstable();
                support.extend(picked.into_iter().map(|p| {
                    let (i, j) = anns[p];
                    let rec = &manifest.images[i];
                    SupportItem {
                        image_id: rec.id.clone(),
                        annotation: rec.ground_truth[j].clone(),
                    }
                }));
            }
            let used: BTreeSet<&str> = support.iter().map(|s| s.image_id.as_str()).collect();
            let query = manifest
                .images
                .iter()
                .filter(|r| !used.contains(r.id.as_str()))
                .map(|r| r.id.clone())
                .collect();
            Ok(Episode {
                shots,
                support,
                query,
            })
        })
        .collect()
}
