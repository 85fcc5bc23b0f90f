use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::episodes::Episode;
use super::metrics::{map50_95, retrieval_accuracy, ImageEval, IOU_THRESHOLDS};
use crate::ddfp::{map_box_to_grid, pool_box, pool_detections};
use crate::error::{Error, Result};
use crate::fsl::{FslConfig, PrototypeStore, SupportSample};
use crate::parallel::Workers;
use crate::tensor_store::{ClassTaxonomy, Detection, Grid, ImageSize};

/// Everything an episode needs from one image: the map to pool from, the
/// detector's boxes and the fine-labeled ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageInputs {
    pub size: ImageSize,
    pub features: Grid,
    pub detections: Vec<Detection>,
    pub ground_truth: Vec<Detection>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalData {
    pub images: BTreeMap<String, ImageInputs>,
    pub taxonomy: ClassTaxonomy,
}

impl EvalData {
    fn get(&self, id: &str) -> Result<&ImageInputs> {
        self.images
            .get(id)
            .ok_or_else(|| Error::Lookup(format!("no inputs for image {id:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub episode: usize,
    pub map: f64,
    pub per_threshold: [f64; 10],
    pub retrieval: f64,
    pub support_size: usize,
    pub query_images: usize,
    /// Query detections whose coarse class has no prototypes in this episode.
    pub dropped_detections: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub mean: f64,
    /// Sample standard deviation (n − 1 denominator); 0 for a single episode.
    pub std: f64,
    pub std_defined: bool,
}

impl MetricSummary {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Self {
                mean: 0.0,
                std: 0.0,
                std_defined: false,
            };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        if n == 1 {
            return Self {
                mean,
                std: 0.0,
                std_defined: false,
            };
        }
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
        Self {
            mean,
            std: var.sqrt(),
            std_defined: true,
        }
    }

    /// `mean ± std` in percent, or just the mean when the spread is undefined.
    pub fn display_percent(&self) -> String {
        if self.std_defined {
            format!("{:.1} ± {:.1}", 100.0 * self.mean, 100.0 * self.std)
        } else {
            format!("{:.1}", 100.0 * self.mean)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub episodes: Vec<EpisodeResult>,
    pub map: MetricSummary,
    pub retrieval: MetricSummary,
    pub per_threshold_mean: [f64; 10],
}

impl EvalSummary {
    pub fn from_results(episodes: Vec<EpisodeResult>) -> Self {
        let maps: Vec<f64> = episodes.iter().map(|e| e.map).collect();
        let rets: Vec<f64> = episodes.iter().map(|e| e.retrieval).collect();
        let mut per_threshold_mean = [0.0; 10];
        if !episodes.is_empty() {
            for e in &episodes {
                for (m, v) in per_threshold_mean.iter_mut().zip(e.per_threshold) {
                    *m += v;
                }
            }
            per_threshold_mean
                .iter_mut()
                .for_each(|m| *m /= episodes.len() as f64);
        }
        Self {
            map: MetricSummary::of(&maps),
            retrieval: MetricSummary::of(&rets),
            per_threshold_mean,
            episodes,
        }
    }

    pub fn results_csv(&self) -> String {
        let mut s = String::from("episode,map50_95");
        for t in IOU_THRESHOLDS {
            let _ = write!(s, ",map{}", (t * 100.0).round() as u32);
        }
        s.push_str(",retrieval_accuracy\n");
        for e in &self.episodes {
            let _ = write!(s, "{},{:.6}", e.episode, e.map);
            for v in e.per_threshold {
                let _ = write!(s, ",{v:.6}");
            }
            let _ = writeln!(s, ",{:.6}", e.retrieval);
        }
        s
    }

    pub fn summary_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "episodes: {}", self.episodes.len());
        let _ = writeln!(s, "mAP50-95: {}", self.map.display_percent());
        let _ = writeln!(
            s,
            "retrieval accuracy: {}",
            self.retrieval.display_percent()
        );
        if !self.map.std_defined {
            let _ = writeln!(s, "note: a single episode has no standard deviation");
        }
        s
    }

    /// Writes `results.csv`, `summary.json` and `summary.txt`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let json = serde_json::json!({
            "episodes": self.episodes.len(),
            "map50_95": self.map,
            "retrieval_accuracy": self.retrieval,
            "per_threshold_mean": self.per_threshold_mean,
        });
        let files = [
            ("results.csv", self.results_csv()),
            (
                "summary.json",
                serde_json::to_string_pretty(&json).map_err(|e| Error::Schema(e.to_string()))?,
            ),
            ("summary.txt", self.summary_text()),
        ];
        for (name, body) in files {
            let p = dir.join(name);
            fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    }
}

/// Pools the support annotations of `episode` into labeled support vectors.
pub fn support_samples(episode: &Episode, data: &EvalData) -> Result<Vec<SupportSample>> {
    episode
        .support
        .iter()
        .map(|item| {
            let img = data.get(&item.image_id)?;
            let ann = &item.annotation;
            let fine = ann.fine_class.clone().ok_or_else(|| {
                Error::Label(format!(
                    "support annotation in {:?} has no fine label",
                    item.image_id
                ))
            })?;
            let cells =
                map_box_to_grid(ann, img.size, img.features.height(), img.features.width())?;
            Ok(SupportSample {
                vector: pool_box(&img.features, cells)?,
                coarse: ann.coarse_class.clone(),
                fine,
            })
        })
        .collect()
}

/// Fits the prototype store, relabels every query detection and scores the episode.
pub fn run_episode(
    index: usize,
    episode: &Episode,
    data: &EvalData,
    config: &FslConfig,
) -> Result<EpisodeResult> {
    let support = support_samples(episode, data)?;
    let store = PrototypeStore::fit(&support, &data.taxonomy, config.clone())?;
    let known: BTreeSet<&str> = store.coarse_classes().collect();
    let mut dropped = 0;
    let mut evals = Vec::with_capacity(episode.query.len());
    for id in &episode.query {
        let img = data.get(id)?;
        let mut predictions = Vec::with_capacity(img.detections.len());
        for emb in pool_detections(&img.features, &img.detections, img.size)? {
            if !known.contains(emb.coarse_class.as_str()) {
                dropped += 1;
                continue;
            }
            let c = store.classify(&emb.vector, &emb.coarse_class)?;
            let mut det = emb.source;
            det.fine_class = c.label.fine().map(str::to_string);
            predictions.push(det);
        }
        evals.push(ImageEval {
            predictions,
            ground_truth: img
                .ground_truth
                .iter()
                .filter(|g| g.fine_class.is_some())
                .cloned()
                .collect(),
        });
    }
    let fine: BTreeSet<String> = data.taxonomy.fine_classes().map(str::to_string).collect();
    let m = map50_95(&evals, &fine)?;
    Ok(EpisodeResult {
        episode: index,
        map: m.map,
        per_threshold: m.per_threshold,
        retrieval: retrieval_accuracy(&evals),
        support_size: support.len(),
        query_images: episode.query.len(),
        dropped_detections: dropped,
    })
}

/// Runs every episode (in parallel when `threads > 1`) and aggregates in episode order.
pub fn run_episodes(
    episodes: &[Episode],
    data: &EvalData,
    config: &FslConfig,
    threads: usize,
) -> Result<EvalSummary> {
    if episodes.is_empty() {
        return Err(Error::Config("no episodes to run".into()));
    }
    let indexed: Vec<(usize, &Episode)> = episodes.iter().enumerate().collect();
    let results =
        Workers::new(threads)?.map(&indexed, |(i, ep)| run_episode(*i, ep, data, config))?;
    Ok(EvalSummary::from_results(results))
}
