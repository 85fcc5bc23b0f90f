//! End-to-end commands over files: training, episodic evaluation, synthetic
//! data, visualization, pooling and standalone few-shot fitting/prediction.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::ddfp::{load_embeddings, pool_detections, save_embeddings};
use crate::error::{Error, Result};
use crate::eval::colorize::{
    cosine_similarity_map, save_gray_png, save_png, similarity_image, ColorizeConfig, Colorizer,
};
use crate::eval::synth::{linear_oracle_generate, synth_generate, LinearOracleConfig, SynthConfig};
use crate::eval::{run_episodes, sample_episodes, EvalData, EvalSummary, ImageInputs};
use crate::fsl::{FslConfig, PrototypeStore, SupportSample};
use crate::tensor_store::{load_manifest, DatasetManifest, Grid, ImageRecord};
use crate::trainer::{train, TrainConfig, TrainReport, TrainingSample};
use crate::translator::{ChainPlan, TranslatorParams, Variant};

/// Loads every `(pyramid, oracle)` pair; all oracle maps must share one shape.
pub fn training_samples(manifest: &DatasetManifest) -> Result<Vec<TrainingSample>> {
    manifest.require_oracle()?;
    let mut out = Vec::with_capacity(manifest.images.len());
    for rec in &manifest.images {
        let sample = TrainingSample {
            pyramid: manifest.load_pyramid(rec)?.cast(),
            oracle: manifest.load_oracle(rec)?.cast(),
        };
        if let Some(first) = out.first() {
            let first: &TrainingSample = first;
            if first.oracle.shape() != sample.oracle.shape() {
                return Err(Error::Shape(format!(
                    "oracle of image {:?} is {:?}, expected {:?}",
                    rec.id,
                    sample.oracle.shape(),
                    first.oracle.shape()
                )));
            }
        }
        out.push(sample);
    }
    if out.is_empty() {
        return Err(Error::Validation("manifest has no images".into()));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub variant: Variant,
    pub delta: f64,
    /// `(height, width, channels)` of the oracle the translator was distilled from.
    pub oracle_shape: (usize, usize, usize),
    pub level_shapes: Vec<(usize, usize, usize)>,
    pub train: TrainConfig,
    pub iterations: usize,
    pub final_loss: f64,
    pub final_ema_loss: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeightsChoice {
    Raw,
    #[default]
    Ema,
}

impl FromStr for WeightsChoice {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "raw" => Ok(Self::Raw),
            "ema" => Ok(Self::Ema),
            _ => Err(Error::Config(format!(
                "unknown weights {s:?}; expected raw or ema"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub raw: TranslatorParams,
    pub ema: TranslatorParams,
}

impl Checkpoint {
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let p = dir.join("checkpoint.json");
        let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        let meta: CheckpointMeta = serde_json::from_str(&text)
            .map_err(|e| Error::Schema(format!("{}: {e}", p.display())))?;
        Ok(Self {
            meta,
            raw: TranslatorParams::load(dir, "raw")?,
            ema: TranslatorParams::load(dir, "ema")?,
        })
    }

    pub fn params(&self, which: WeightsChoice) -> &TranslatorParams {
        match which {
            WeightsChoice::Raw => &self.raw,
            WeightsChoice::Ema => &self.ema,
        }
    }

    /// Auxiliary maps `R_1 … R_n` of one image.
    pub fn residuals(
        &self,
        manifest: &DatasetManifest,
        rec: &ImageRecord,
        which: WeightsChoice,
    ) -> Result<Vec<Grid>> {
        let pyramid = manifest.load_pyramid(rec)?;
        let plan = ChainPlan::for_pyramid(&pyramid, self.meta.oracle_shape, self.meta.delta)?;
        let params = self.params(which);
        plan.check(params, &pyramid.channel_depths())
            .map_err(|e| relabel_shape(e, &rec.id))?;
        plan.residuals(&pyramid, params)
    }
}

fn relabel_shape(e: Error, id: &str) -> Error {
    match e {
        Error::Shape(m) => Error::Shape(format!("image {id:?}: {m}")),
        other => other,
    }
}

/// Trains on every image of the manifest and writes the checkpoint into `out`.
pub fn cmd_train(
    manifest_path: impl AsRef<Path>,
    out: impl AsRef<Path>,
    config: &TrainConfig,
) -> Result<TrainReport> {
    config.validate()?;
    let manifest = load_manifest(manifest_path)?;
    let samples = training_samples(&manifest)?;
    let report = train(config, &samples)?;
    let out = out.as_ref();
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    report.save(out)?;
    let meta = CheckpointMeta {
        variant: config.variant,
        delta: config.delta,
        oracle_shape: samples[0].oracle.shape(),
        level_shapes: samples[0]
            .pyramid
            .levels()
            .iter()
            .map(|l| l.shape())
            .collect(),
        train: config.clone(),
        iterations: report.trace.len(),
        final_loss: report.final_loss,
        final_ema_loss: report.final_ema_loss,
    };
    let p = out.join("checkpoint.json");
    let json = serde_json::to_string_pretty(&meta).map_err(|e| Error::Schema(e.to_string()))?;
    fs::write(&p, json).map_err(|e| Error::io(&p, e))?;
    Ok(report)
}

/// Which map embeddings are pooled from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureSource {
    /// Auxiliary map `R_i` (0-based index).
    Aux(usize),
    /// Detector level `F_j` as exported (0-based index).
    Raw(usize),
    Oracle,
}

impl FeatureSource {
    pub fn needs_checkpoint(self) -> bool {
        matches!(self, FeatureSource::Aux(_))
    }
}

/// Parses `R1`…`Rn` into a 0-based residual index.
pub fn parse_residual(s: &str) -> Result<usize> {
    s.strip_prefix(['R', 'r'])
        .and_then(|d| d.parse::<usize>().ok())
        .filter(|&i| i >= 1)
        .map(|i| i - 1)
        .ok_or_else(|| Error::Config(format!("residual {s:?} must look like R1, R2, …")))
}

/// Per-image maps for `source`.
pub fn feature_maps(
    manifest: &DatasetManifest,
    checkpoint: Option<&Checkpoint>,
    source: FeatureSource,
    weights: WeightsChoice,
) -> Result<BTreeMap<String, Grid>> {
    let n = manifest.num_levels();
    match source {
        FeatureSource::Aux(i) | FeatureSource::Raw(i) if i >= n => {
            return Err(Error::Config(format!(
                "level index {} exceeds the {n}-level pyramid",
                i + 1
            )));
        }
        FeatureSource::Oracle => manifest.require_oracle()?,
        _ => {}
    }
    let ck = match (source, checkpoint) {
        (FeatureSource::Aux(_), None) => {
            return Err(Error::Config("auxiliary features need a checkpoint".into()));
        }
        (_, c) => c,
    };
    manifest
        .images
        .iter()
        .map(|rec| {
            let map = match source {
                FeatureSource::Aux(i) => ck
                    .expect("checked above")
                    .residuals(manifest, rec, weights)?
                    .swap_remove(i),
                FeatureSource::Raw(j) => manifest.load_pyramid(rec)?.level(j).cast(),
                FeatureSource::Oracle => manifest.load_oracle(rec)?.cast(),
            };
            Ok((rec.id.clone(), map))
        })
        .collect()
}

pub fn eval_data(manifest: &DatasetManifest, maps: BTreeMap<String, Grid>) -> Result<EvalData> {
    let mut maps = maps;
    let images = manifest
        .images
        .iter()
        .map(|rec| {
            let features = maps
                .remove(&rec.id)
                .ok_or_else(|| Error::Lookup(format!("no features for image {:?}", rec.id)))?;
            Ok((
                rec.id.clone(),
                ImageInputs {
                    size: rec.size,
                    features,
                    detections: rec.detections.clone(),
                    ground_truth: rec.ground_truth.clone(),
                },
            ))
        })
        .collect::<Result<_>>()?;
    Ok(EvalData {
        images,
        taxonomy: manifest.taxonomy.clone(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOptions {
    pub shots: usize,
    pub episodes: usize,
    pub seed: u64,
    pub source: FeatureSource,
    pub weights: WeightsChoice,
    pub fsl: FslConfig,
    pub threads: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            shots: 1,
            episodes: 100,
            seed: 0,
            source: FeatureSource::Aux(0),
            weights: WeightsChoice::Ema,
            fsl: FslConfig::default(),
            threads: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOutcome {
    pub summary: EvalSummary,
    pub warnings: Vec<String>,
}

/// Samples episodes and scores them on an already loaded manifest.
pub fn evaluate(
    manifest: &DatasetManifest,
    checkpoint: Option<&Checkpoint>,
    options: &EvalOptions,
) -> Result<EvalOutcome> {
    options.fsl.validate()?;
    let episodes = sample_episodes(manifest, options.shots, options.episodes, options.seed)?;
    let mut missing: BTreeMap<String, usize> = BTreeMap::new();
    for ep in &episodes {
        for f in ep.classes_missing_from_query(manifest) {
            *missing.entry(f).or_default() += 1;
        }
    }
    let warnings = missing
        .into_iter()
        .map(|(f, n)| {
            format!(
                "fine class {f:?} has no query samples in {n} of {} episodes (all its samples are in the support set)",
                episodes.len()
            )
        })
        .collect();
    let maps = feature_maps(manifest, checkpoint, options.source, options.weights)?;
    let data = eval_data(manifest, maps)?;
    let summary = run_episodes(&episodes, &data, &options.fsl, options.threads)?;
    Ok(EvalOutcome { summary, warnings })
}

/// Runs [`evaluate`] from files and writes `results.csv`, `summary.json` and
/// `summary.txt` into `out`.
pub fn cmd_eval(
    manifest_path: impl AsRef<Path>,
    checkpoint: Option<&Path>,
    out: impl AsRef<Path>,
    options: &EvalOptions,
) -> Result<EvalOutcome> {
    let manifest = load_manifest(manifest_path)?;
    let ck = match checkpoint {
        Some(dir) if options.source.needs_checkpoint() => Some(Checkpoint::load(dir)?),
        _ => None,
    };
    let outcome = evaluate(&manifest, ck.as_ref(), options)?;
    outcome.summary.save(out)?;
    Ok(outcome)
}

#[derive(Debug, Clone, PartialEq)]
pub enum SynthKind {
    Collapse(SynthConfig),
    LinearOracle(LinearOracleConfig),
}

pub fn cmd_synth(kind: &SynthKind, out: impl AsRef<Path>) -> Result<DatasetManifest> {
    match kind {
        SynthKind::Collapse(c) => synth_generate(c, out),
        SynthKind::LinearOracle(c) => linear_oracle_generate(c, out),
    }
}

/// Writes `r{i}.png` per auxiliary level, `oracle.png` and `similarity.png`
/// (pointwise cosine between `R_1` and the oracle) for one image.
pub fn cmd_viz(
    manifest_path: impl AsRef<Path>,
    checkpoint: &Path,
    image_id: Option<&str>,
    out: impl AsRef<Path>,
    config: &ColorizeConfig,
    scale: u32,
) -> Result<Vec<PathBuf>> {
    let manifest = load_manifest(manifest_path)?;
    manifest.require_oracle()?;
    let ck = Checkpoint::load(checkpoint)?;
    let rec = match image_id {
        Some(id) => manifest
            .image(id)
            .ok_or_else(|| Error::Lookup(format!("image {id:?} is not in the manifest")))?,
        None => manifest
            .images
            .first()
            .ok_or_else(|| Error::Validation("manifest has no images".into()))?,
    };
    let oracles = manifest
        .images
        .iter()
        .map(|r| manifest.load_oracle(r).map(|m| m.cast()))
        .collect::<Result<Vec<Grid>>>()?;
    let colorizer = Colorizer::fit(&oracles, config)?;
    let residuals = ck.residuals(&manifest, rec, WeightsChoice::Ema)?;
    let oracle: Grid = manifest.load_oracle(rec)?.cast();

    let out = out.as_ref();
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut written = Vec::new();
    for (i, r) in residuals.iter().enumerate() {
        let p = out.join(format!("r{}.png", i + 1));
        save_png(&colorizer.to_image(r, scale)?, &p)?;
        written.push(p);
    }
    let p = out.join("oracle.png");
    save_png(&colorizer.to_image(&oracle, scale)?, &p)?;
    written.push(p);
    let sim = cosine_similarity_map(&residuals[0], &oracle)?;
    let p = out.join("similarity.png");
    save_gray_png(&similarity_image(&sim, scale), &p)?;
    written.push(p);
    let p = out.join("colorize_trace.csv");
    let mut trace = String::from("iteration,loss\n");
    for (i, l) in colorizer.trace.iter().enumerate() {
        let _ = writeln!(trace, "{i},{l:.9e}");
    }
    fs::write(&p, trace).map_err(|e| Error::io(&p, e))?;
    Ok(written)
}

/// Boxes to pool in [`cmd_pool`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PoolBoxes {
    #[default]
    Detections,
    GroundTruth,
}

/// Pools one embedding per box for every image; writes `<id>.axft` and `<id>.csv`.
pub fn cmd_pool(
    manifest_path: impl AsRef<Path>,
    checkpoint: Option<&Path>,
    source: FeatureSource,
    boxes: PoolBoxes,
    out: impl AsRef<Path>,
) -> Result<usize> {
    let manifest = load_manifest(manifest_path)?;
    let ck = match checkpoint {
        Some(dir) if source.needs_checkpoint() => Some(Checkpoint::load(dir)?),
        _ => None,
    };
    let maps = feature_maps(&manifest, ck.as_ref(), source, WeightsChoice::Ema)?;
    let out = out.as_ref();
    let mut total = 0;
    for rec in &manifest.images {
        let map = &maps[&rec.id];
        let list = match boxes {
            PoolBoxes::Detections => &rec.detections,
            PoolBoxes::GroundTruth => &rec.ground_truth,
        };
        let embs = pool_detections(map, list, rec.size)?;
        total += embs.len();
        save_embeddings(out, &rec.id, &embs, map.channels())?;
    }
    Ok(total)
}

/// Stems `s` with both `s.axft` and `s.csv` in `dir`, sorted.
pub fn embedding_stems(dir: impl AsRef<Path>) -> Result<Vec<String>> {
    let dir = dir.as_ref();
    let mut stems = BTreeSet::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().is_some_and(|e| e == "axft") && path.with_extension("csv").exists() {
            if let Some(s) = path.file_stem().and_then(|s| s.to_str()) {
                stems.insert(s.to_string());
            }
        }
    }
    Ok(stems.into_iter().collect())
}

/// Fits a prototype store from fine-labeled embedding dumps in `embeddings`.
pub fn cmd_fsl_fit(
    manifest_path: impl AsRef<Path>,
    embeddings: impl AsRef<Path>,
    config: &FslConfig,
    out: impl AsRef<Path>,
) -> Result<PrototypeStore> {
    let manifest = load_manifest(manifest_path)?;
    let mut support = Vec::new();
    for stem in embedding_stems(&embeddings)? {
        for (i, e) in load_embeddings(&embeddings, &stem)?.into_iter().enumerate() {
            let fine = e.source.fine_class.clone().ok_or_else(|| {
                Error::Label(format!("support embedding {stem}#{i} has no fine label"))
            })?;
            support.push(SupportSample {
                vector: e.vector,
                coarse: e.coarse_class,
                fine,
            });
        }
    }
    let store = PrototypeStore::fit(&support, &manifest.taxonomy, config.clone())?;
    store.save(out)?;
    Ok(store)
}

/// Relabels every embedding dump in `embeddings`; writes one CSV per stem with
/// the predicted fine class (empty for the fallback or an unknown coarse class).
pub fn cmd_fsl_predict(
    store_dir: impl AsRef<Path>,
    embeddings: impl AsRef<Path>,
    out: impl AsRef<Path>,
) -> Result<usize> {
    let store = PrototypeStore::load(store_dir)?;
    let known: BTreeSet<String> = store.coarse_classes().map(str::to_string).collect();
    let out = out.as_ref();
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut count = 0;
    for stem in embedding_stems(&embeddings)? {
        let mut csv = String::from("index,x0,y0,x1,y1,coarse_class,confidence,fine_class,score\n");
        for (i, e) in load_embeddings(&embeddings, &stem)?.iter().enumerate() {
            let (fine, score) = if known.contains(&e.coarse_class) {
                let c = store.classify(&e.vector, &e.coarse_class)?;
                (c.label.fine().unwrap_or("").to_string(), c.scores[c.index])
            } else {
                (String::new(), 0.0)
            };
            let d = &e.source;
            let _ = writeln!(
                csv,
                "{i},{},{},{},{},{},{},{fine},{score:.6}",
                d.x0, d.y0, d.x1, d.y1, e.coarse_class, e.confidence
            );
            count += 1;
        }
        let p = out.join(format!("{stem}.csv"));
        fs::write(&p, csv).map_err(|e| Error::io(&p, e))?;
    }
    Ok(count)
}
