//! Conditional coarse-to-fine prototypical few-shot learner.
//!
//! The fine-class search is restricted to the prototypes of the detector's coarse
//! prediction, plus one fallback centroid per coarse class. Each distance in the
//! configured set yields a softmax over inverse distances; the distributions are
//! averaged and the arg-max wins (lowest index on ties, fallback last).

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor_store::{read_tensor, write_tensor, ClassTaxonomy, Tensor};

pub const DEFAULT_EPSILON: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Distance {
    Cosine,
    L1,
    L2,
}

impl Distance {
    pub const ALL: [Distance; 3] = [Distance::Cosine, Distance::L1, Distance::L2];

    pub fn name(self) -> &'static str {
        match self {
            Distance::Cosine => "cos",
            Distance::L1 => "l1",
            Distance::L2 => "l2",
        }
    }
}

impl fmt::Display for Distance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Distance {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cos" | "cosine" => Ok(Distance::Cosine),
            "l1" => Ok(Distance::L1),
            "l2" => Ok(Distance::L2),
            _ => Err(Error::Config(format!("unknown distance {s:?}"))),
        }
    }
}

/// Parses a comma-separated distance list such as `cos,l1,l2`.
pub fn parse_distances(s: &str) -> Result<Vec<Distance>> {
    let out: Vec<Distance> = s
        .split(',')
        .map(|t| t.trim().parse())
        .collect::<Result<_>>()?;
    if out.is_empty() {
        return Err(Error::Config("distance set is empty".into()));
    }
    Ok(out)
}

pub fn distance(kind: Distance, q: &[f64], p: &[f64]) -> Result<f64> {
    if q.len() != p.len() {
        return Err(Error::Shape(format!(
            "vector lengths {} and {} differ",
            q.len(),
            p.len()
        )));
    }
    Ok(match kind {
        Distance::L1 => q.iter().zip(p).map(|(a, b)| (a - b).abs()).sum(),
        Distance::L2 => q
            .iter()
            .zip(p)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt(),
        Distance::Cosine => {
            let dot: f64 = q.iter().zip(p).map(|(a, b)| a * b).sum();
            let nq = q.iter().map(|a| a * a).sum::<f64>().sqrt();
            let np = p.iter().map(|a| a * a).sum::<f64>().sqrt();
            match (nq == 0.0, np == 0.0) {
                (true, true) => 0.0,
                (true, false) | (false, true) => 1.0,
                // Rounding can push the ratio marginally outside [-1, 1].
                _ => (1.0 - dot / (nq * np)).max(0.0),
            }
        }
    })
}

/// How the per-coarse-class fallback vector is formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FallbackMode {
    /// Mean of the fine-class prototypes.
    #[default]
    Prototypes,
    /// Mean of every support vector of the coarse class.
    SupportVectors,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FslConfig {
    pub distances: Vec<Distance>,
    pub epsilon: f64,
    pub fallback: FallbackMode,
}

impl Default for FslConfig {
    fn default() -> Self {
        Self {
            distances: Distance::ALL.to_vec(),
            epsilon: DEFAULT_EPSILON,
            fallback: FallbackMode::Prototypes,
        }
    }
}

impl FslConfig {
    pub fn validate(&self) -> Result<()> {
        if self.distances.is_empty() {
            return Err(Error::Config("distance set is empty".into()));
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::Config(format!(
                "epsilon must be positive, got {}",
                self.epsilon
            )));
        }
        Ok(())
    }
}

/// Labeled support vector.
#[derive(Debug, Clone, PartialEq)]
pub struct SupportSample {
    pub vector: Vec<f64>,
    pub coarse: String,
    pub fine: String,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum FineLabel {
    Fine(String),
    Fallback,
}

impl FineLabel {
    pub fn fine(&self) -> Option<&str> {
        match self {
            FineLabel::Fine(s) => Some(s),
            FineLabel::Fallback => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prototype {
    pub label: FineLabel,
    pub vector: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Classification {
    pub label: FineLabel,
    /// Averaged assignment distribution over the searched entries.
    pub scores: Vec<f64>,
    pub index: usize,
}

/// Per-coarse-class prototype lists, each ending with its fallback centroid.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeStore {
    sets: BTreeMap<String, Vec<Prototype>>,
    config: FslConfig,
    dim: usize,
}

fn mean_of<'a>(vectors: impl Iterator<Item = &'a [f64]>, dim: usize) -> Vec<f64> {
    let mut sum = vec![0.0; dim];
    let mut n = 0usize;
    for v in vectors {
        for (s, x) in sum.iter_mut().zip(v) {
            *s += x;
        }
        n += 1;
    }
    sum.iter().map(|s| s / n as f64).collect()
}

/// Softmax with max subtraction.
fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.iter().map(|e| e / z).collect()
}

fn argmax_first(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

impl PrototypeStore {
    /// Fine prototypes are support means; fallbacks follow `config.fallback`.
    pub fn fit(
        support: &[SupportSample],
        taxonomy: &ClassTaxonomy,
        config: FslConfig,
    ) -> Result<Self> {
        config.validate()?;
        let first = support.first().ok_or(Error::EmptyStore)?;
        let dim = first.vector.len();
        // coarse -> fine -> member vectors, preserving sorted order for determinism.
        let mut groups: BTreeMap<&str, BTreeMap<&str, Vec<&[f64]>>> = BTreeMap::new();
        for s in support {
            if s.vector.len() != dim {
                return Err(Error::Shape(format!(
                    "support vector of length {} (expected {dim})",
                    s.vector.len()
                )));
            }
            if s.vector.iter().any(|v| !v.is_finite()) {
                return Err(Error::Validation(format!(
                    "non-finite support vector for {:?}",
                    s.fine
                )));
            }
            match taxonomy.coarse_of(&s.fine) {
                Some(parent) if parent == s.coarse => {}
                Some(parent) => {
                    return Err(Error::Consistency(format!(
                        "fine class {:?} belongs to {parent:?}, labeled under {:?}",
                        s.fine, s.coarse
                    )))
                }
                None => {
                    return Err(Error::Consistency(format!(
                        "fine class {:?} is not in the taxonomy",
                        s.fine
                    )))
                }
            }
            groups
                .entry(&s.coarse)
                .or_default()
                .entry(&s.fine)
                .or_default()
                .push(&s.vector);
        }
        let mut sets = BTreeMap::new();
        for (coarse, fines) in groups {
            let mut list: Vec<Prototype> = fines
                .iter()
                .map(|(fine, vs)| Prototype {
                    label: FineLabel::Fine(fine.to_string()),
                    vector: mean_of(vs.iter().copied(), dim),
                })
                .collect();
            let fallback = match config.fallback {
                FallbackMode::Prototypes => mean_of(list.iter().map(|p| p.vector.as_slice()), dim),
                FallbackMode::SupportVectors => mean_of(fines.values().flatten().copied(), dim),
            };
            list.push(Prototype {
                label: FineLabel::Fallback,
                vector: fallback,
            });
            sets.insert(coarse.to_string(), list);
        }
        Ok(Self { sets, config, dim })
    }

    pub fn config(&self) -> &FslConfig {
        &self.config
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn coarse_classes(&self) -> impl Iterator<Item = &str> {
        self.sets.keys().map(String::as_str)
    }

    /// Entries searched for `coarse`, fallback last.
    pub fn prototypes(&self, coarse: &str) -> Option<&[Prototype]> {
        self.sets.get(coarse).map(Vec::as_slice)
    }

    fn score(&self, q: &[f64], entries: &[&Prototype]) -> Result<Vec<f64>> {
        let mut avg = vec![0.0; entries.len()];
        for &kind in &self.config.distances {
            let logits = entries
                .iter()
                .map(|p| Ok(1.0 / (distance(kind, q, &p.vector)? + self.config.epsilon)))
                .collect::<Result<Vec<_>>>()?;
            for (a, s) in avg.iter_mut().zip(softmax(&logits)) {
                *a += s;
            }
        }
        let k = self.config.distances.len() as f64;
        avg.iter_mut().for_each(|a| *a /= k);
        Ok(avg)
    }

    /// Fine class (or fallback) for a query with coarse prediction `coarse`.
    pub fn classify(&self, q: &[f64], coarse: &str) -> Result<Classification> {
        let entries = self
            .sets
            .get(coarse)
            .ok_or_else(|| Error::Lookup(format!("no prototypes for coarse class {coarse:?}")))?;
        let refs: Vec<&Prototype> = entries.iter().collect();
        let scores = self.score(q, &refs)?;
        let index = argmax_first(&scores);
        Ok(Classification {
            label: entries[index].label.clone(),
            scores,
            index,
        })
    }

    /// Search over every fine prototype of every coarse class, fallbacks excluded.
    pub fn classify_unconditional(&self, q: &[f64]) -> Result<Classification> {
        let refs: Vec<&Prototype> = self
            .sets
            .values()
            .flat_map(|l| l.iter().filter(|p| p.label != FineLabel::Fallback))
            .collect();
        if refs.is_empty() {
            return Err(Error::EmptyStore);
        }
        let scores = self.score(q, &refs)?;
        let index = argmax_first(&scores);
        Ok(Classification {
            label: refs[index].label.clone(),
            scores,
            index,
        })
    }

    /// Writes `store.json` plus one `(|P[c]|+1) × dim` tensor per coarse class.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut classes = Vec::new();
        for (i, (coarse, list)) in self.sets.iter().enumerate() {
            let file = format!("coarse{i}.axft");
            let values = list
                .iter()
                .flat_map(|p| p.vector.iter().map(|&v| v as f32))
                .collect();
            write_tensor(
                dir.join(&file),
                &Tensor::new(vec![list.len(), self.dim], values)?,
            )?;
            classes.push(StoredClass {
                coarse: coarse.clone(),
                fines: list
                    .iter()
                    .filter_map(|p| p.label.fine().map(str::to_string))
                    .collect(),
                file,
            });
        }
        let header = StoreHeader {
            distances: self.config.distances.clone(),
            epsilon: self.config.epsilon,
            fallback: self.config.fallback,
            dim: self.dim,
            classes,
        };
        let p = dir.join("store.json");
        let text =
            serde_json::to_string_pretty(&header).map_err(|e| Error::Format(e.to_string()))?;
        fs::write(&p, text).map_err(|e| Error::io(&p, e))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let p = dir.join("store.json");
        let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        let header: StoreHeader = serde_json::from_str(&text)
            .map_err(|e| Error::Format(format!("{}: {e}", p.display())))?;
        let config = FslConfig {
            distances: header.distances,
            epsilon: header.epsilon,
            fallback: header.fallback,
        };
        config.validate()?;
        let mut sets = BTreeMap::new();
        for class in header.classes {
            let t = read_tensor(dir.join(&class.file))?;
            if t.dims != [class.fines.len() + 1, header.dim] {
                return Err(Error::Shape(format!(
                    "{}: dims {:?} for {} fine classes of width {}",
                    class.file,
                    t.dims,
                    class.fines.len(),
                    header.dim
                )));
            }
            let rows: Vec<Vec<f64>> = t
                .values
                .chunks(header.dim.max(1))
                .map(|r| r.iter().map(|&v| v as f64).collect())
                .collect();
            let labels = class
                .fines
                .into_iter()
                .map(FineLabel::Fine)
                .chain(std::iter::once(FineLabel::Fallback));
            let list = labels
                .zip(rows)
                .map(|(label, vector)| Prototype { label, vector })
                .collect();
            sets.insert(class.coarse, list);
        }
        if sets.is_empty() {
            return Err(Error::EmptyStore);
        }
        Ok(Self {
            sets,
            config,
            dim: header.dim,
        })
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct StoredClass {
    coarse: String,
    fines: Vec<String>,
    file: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct StoreHeader {
    distances: Vec<Distance>,
    epsilon: f64,
    fallback: FallbackMode,
    dim: usize,
    classes: Vec<StoredClass>,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn taxonomy(pairs: &[(&str, &[&str])]) -> ClassTaxonomy {
        ClassTaxonomy::new(
            pairs
                .iter()
                .map(|(c, f)| (c.to_string(), f.iter().map(|s| s.to_string()).collect()))
                .collect(),
        )
        .unwrap()
    }

    fn sample(v: &[f64], coarse: &str, fine: &str) -> SupportSample {
        SupportSample {
            vector: v.to_vec(),
            coarse: coarse.into(),
            fine: fine.into(),
        }
    }

    #[test]
    fn distance_examples() {
        let q = [1.5, -2.0, 0.25];
        for d in Distance::ALL {
            assert!(distance(d, &q, &q).unwrap().abs() < 1e-15, "{d}");
        }
        assert_eq!(
            distance(Distance::L1, &[1.0, 0.0], &[0.0, 1.0]).unwrap(),
            2.0
        );
        assert_eq!(
            distance(Distance::L2, &[1.0, 0.0], &[0.0, 1.0]).unwrap(),
            2f64.sqrt()
        );
        assert_eq!(
            distance(Distance::Cosine, &[1.0, 0.0], &[0.0, 1.0]).unwrap(),
            1.0
        );
        assert_eq!(
            distance(Distance::Cosine, &[2.0, 0.0], &[1.0, 0.0]).unwrap(),
            0.0
        );
        assert_eq!(
            distance(Distance::L1, &[2.0, 0.0], &[1.0, 0.0]).unwrap(),
            1.0
        );
        assert_eq!(
            distance(Distance::Cosine, &[0.0, 0.0], &[0.0, 0.0]).unwrap(),
            0.0
        );
        assert_eq!(
            distance(Distance::Cosine, &[0.0, 0.0], &[1.0, 0.0]).unwrap(),
            1.0
        );
        assert!(matches!(
            distance(Distance::L1, &[1.0], &[1.0, 2.0]),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn fit_prototypes_and_fallback() {
        let tax = taxonomy(&[("dog", &["d1", "d2"])]);
        let support = [
            sample(&[1.0, 0.0], "dog", "d1"),
            sample(&[3.0, 0.0], "dog", "d1"),
            sample(&[0.0, 4.0], "dog", "d2"),
        ];
        let store = PrototypeStore::fit(&support, &tax, FslConfig::default()).unwrap();
        let p = store.prototypes("dog").unwrap();
        assert_eq!(p.len(), 3);
        assert_eq!(p[0].vector, vec![2.0, 0.0]);
        assert_eq!(p[1].vector, vec![0.0, 4.0]);
        assert_eq!(p[2].label, FineLabel::Fallback);
        assert_eq!(p[2].vector, vec![1.0, 2.0]);

        let cfg = FslConfig {
            fallback: FallbackMode::SupportVectors,
            ..FslConfig::default()
        };
        let store = PrototypeStore::fit(&support, &tax, cfg).unwrap();
        let fb = &store.prototypes("dog").unwrap()[2].vector;
        assert!((fb[0] - 4.0 / 3.0).abs() < 1e-15 && (fb[1] - 4.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn identical_shots_give_that_vector() {
        let tax = taxonomy(&[("cup", &["c1"])]);
        let support: Vec<_> = (0..5)
            .map(|_| sample(&[0.3, -1.7, 2.2], "cup", "c1"))
            .collect();
        let store = PrototypeStore::fit(&support, &tax, FslConfig::default()).unwrap();
        let p = &store.prototypes("cup").unwrap()[0].vector;
        for (a, b) in p.iter().zip([0.3, -1.7, 2.2]) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn fit_errors() {
        let tax = taxonomy(&[("dog", &["d1"]), ("cat", &["c1"])]);
        assert!(matches!(
            PrototypeStore::fit(&[], &tax, FslConfig::default()),
            Err(Error::EmptyStore)
        ));
        assert!(matches!(
            PrototypeStore::fit(&[sample(&[1.0], "cat", "d1")], &tax, FslConfig::default()),
            Err(Error::Consistency(_))
        ));
        assert!(matches!(
            PrototypeStore::fit(&[sample(&[1.0], "cat", "zz")], &tax, FslConfig::default()),
            Err(Error::Consistency(_))
        ));
    }

    #[test]
    fn hand_evaluated_l2_case() {
        let tax = taxonomy(&[("c", &["p1", "p2"])]);
        let support = [
            sample(&[0.0, 0.0], "c", "p1"),
            sample(&[4.0, 0.0], "c", "p2"),
        ];
        let cfg = FslConfig {
            distances: vec![Distance::L2],
            ..FslConfig::default()
        };
        let store = PrototypeStore::fit(&support, &tax, cfg).unwrap();
        assert_eq!(store.prototypes("c").unwrap()[2].vector, vec![2.0, 0.0]);
        let out = store.classify(&[0.5, 0.0], "c").unwrap();
        assert_eq!(out.label, FineLabel::Fine("p1".into()));
        // softmax(2, 2/7, 2/3) computed by hand.
        let e = [2.0f64.exp(), (2.0f64 / 7.0).exp(), (2.0f64 / 3.0).exp()];
        let z: f64 = e.iter().sum();
        for (s, x) in out.scores.iter().zip(e) {
            assert!((s - x / z).abs() < 1e-6);
        }
        assert!((out.scores.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn exact_match_and_ties() {
        let tax = taxonomy(&[("c", &["a", "b"])]);
        let support = [
            sample(&[1.0, 0.0], "c", "a"),
            sample(&[-1.0, 0.0], "c", "b"),
        ];
        let store = PrototypeStore::fit(&support, &tax, FslConfig::default()).unwrap();
        assert_eq!(
            store.classify(&[-1.0, 0.0], "c").unwrap().label,
            FineLabel::Fine("b".into())
        );
        // Equidistant from a and b under every distance: lowest index wins among the pair,
        // but the fallback at the origin is closer, so compare only the two prototypes.
        let out = store.classify(&[0.0, 5.0], "c").unwrap();
        assert_eq!(out.scores[0], out.scores[1]);
        let l2 = FslConfig {
            distances: vec![Distance::L2],
            ..FslConfig::default()
        };
        let far = [sample(&[1.0, 0.0], "c", "a"), sample(&[1.0, 0.0], "c", "b")];
        let store = PrototypeStore::fit(&far, &tax, l2).unwrap();
        assert_eq!(
            store.classify(&[1.0, 3.0], "c").unwrap().label,
            FineLabel::Fine("a".into())
        );
        assert!(matches!(
            store.classify(&[1.0, 3.0], "dog"),
            Err(Error::Lookup(_))
        ));
    }

    #[test]
    fn unconditional_search_crosses_coarse_boundaries() {
        let tax = taxonomy(&[("dog", &["d1", "d2"]), ("cat", &["c1", "c2"])]);
        let support = [
            sample(&[0.0, 0.0], "dog", "d1"),
            sample(&[1.0, 0.0], "dog", "d2"),
            sample(&[10.0, 0.0], "cat", "c1"),
            sample(&[11.0, 0.0], "cat", "c2"),
        ];
        let store = PrototypeStore::fit(&support, &tax, FslConfig::default()).unwrap();
        let q = [9.5, 0.0];
        assert_eq!(
            store.classify_unconditional(&q).unwrap().label,
            FineLabel::Fine("c1".into())
        );
        let cond = store.classify(&q, "dog").unwrap().label;
        assert!(matches!(cond, FineLabel::Fine(ref f) if f.starts_with('d')));
        assert_eq!(
            store.classify_unconditional(&[11.0, 0.0]).unwrap().label,
            FineLabel::Fine("c2".into())
        );
    }

    #[test]
    fn store_roundtrip() {
        let tax = taxonomy(&[("dog", &["d1", "d2"]), ("cat", &["c1"])]);
        let support = [
            sample(&[0.5, 0.25], "dog", "d1"),
            sample(&[1.0, 0.0], "dog", "d2"),
            sample(&[2.0, -4.0], "cat", "c1"),
        ];
        let store = PrototypeStore::fit(&support, &tax, FslConfig::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        store.save(dir.path()).unwrap();
        assert_eq!(PrototypeStore::load(dir.path()).unwrap(), store);
    }

    #[test]
    fn distance_list_parsing() {
        assert_eq!(
            parse_distances("cos,l1,l2").unwrap(),
            Distance::ALL.to_vec()
        );
        assert!(parse_distances("cos,l3").is_err());
    }
}
