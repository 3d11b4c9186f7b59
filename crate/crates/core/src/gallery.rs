//! Class prototypes built from stored embeddings, nearest-prototype
//! assignment, partial re-indexing, and width truncation for comparing
//! models with different embedding sizes.

use crate::error::{Error, Result};
use crate::store::FeatureStore;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

/// Embedding-space geometry used for all retrieval comparisons.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Distance {
    Cosine,
    Euclidean,
}

impl Distance {
    /// Distance between two equal-length vectors (cosine distance is
    /// 1 - cos similarity, computed on normalized copies).
    pub fn between(&self, a: &[f64], b: &[f64]) -> Result<f64> {
        if a.len() != b.len() {
            return Err(Error::ShapeMismatch {
                context: "distance operands",
                expected: format!("{}", a.len()),
                actual: format!("{}", b.len()),
            });
        }
        match self {
            Distance::Euclidean => {
                Ok(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt())
            }
            Distance::Cosine => {
                let na = norm(a);
                let nb = norm(b);
                if na <= 1e-12 || nb <= 1e-12 {
                    return Err(Error::DegenerateNorm {
                        context: "cosine distance operand",
                        norm: na.min(nb),
                    });
                }
                let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                Ok(1.0 - dot / (na * nb))
            }
        }
    }

    /// Monotone decreasing map of distance onto a score where larger means
    /// more alike: 1 - d for cosine, -d for euclidean.
    pub fn similarity(&self, d: f64) -> f64 {
        match self {
            Distance::Cosine => 1.0 - d,
            Distance::Euclidean => -d,
        }
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Mean embedding standing in for a whole identity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prototype {
    pub vector: Vec<f64>,
    /// Which model version produced the records behind this prototype.
    pub source_version: String,
}

/// An index of class prototypes; lookups report the nearest class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Gallery {
    distance: Distance,
    prototypes: BTreeMap<i64, Prototype>,
}

/// Mean of the class's records in f64, normalized under cosine.
fn prototype_from_records(
    vectors: &[&[f32]],
    distance: Distance,
    source_version: String,
) -> Result<Prototype> {
    debug_assert!(!vectors.is_empty());
    let dim = vectors[0].len();
    let mut mean = vec![0.0f64; dim];
    for v in vectors {
        for (m, x) in mean.iter_mut().zip(*v) {
            *m += *x as f64;
        }
    }
    for m in &mut mean {
        *m /= vectors.len() as f64;
    }
    if distance == Distance::Cosine {
        let n = norm(&mean);
        if n <= 1e-12 {
            return Err(Error::DegenerateNorm {
                context: "cosine prototype",
                norm: n,
            });
        }
        for m in &mut mean {
            *m /= n;
        }
    }
    Ok(Prototype { vector: mean, source_version })
}

/// Collects a version's records per class, optionally restricted to a set
/// of sample ids; every requested class must be covered.
fn class_vectors<'a>(
    store: &'a FeatureStore,
    version: &str,
    class_ids: &[i64],
    restrict_to: Option<&BTreeSet<String>>,
) -> Result<BTreeMap<i64, Vec<&'a [f32]>>> {
    let wanted: BTreeSet<i64> = class_ids.iter().copied().collect();
    let mut by_class: BTreeMap<i64, Vec<&[f32]>> = BTreeMap::new();
    for r in store.records_for_version(version) {
        if !wanted.contains(&r.class_id) {
            continue;
        }
        if let Some(allow) = restrict_to {
            if !allow.contains(&r.sample_id) {
                continue;
            }
        }
        by_class.entry(r.class_id).or_default().push(r.embedding.as_slice());
    }
    let missing: Vec<i64> =
        wanted.iter().copied().filter(|c| !by_class.contains_key(c)).collect();
    if !missing.is_empty() {
        return Err(Error::MissingClasses {
            version: version.to_string(),
            class_ids: missing,
        });
    }
    Ok(by_class)
}

impl Gallery {
    /// Builds one prototype per requested class from a single model version.
    pub fn build_prototypes(
        store: &FeatureStore,
        version: &str,
        class_ids: &[i64],
        restrict_to: Option<&BTreeSet<String>>,
        distance: Distance,
    ) -> Result<Gallery> {
        if class_ids.is_empty() {
            return Err(Error::EmptyGallery);
        }
        let by_class = class_vectors(store, version, class_ids, restrict_to)?;
        let mut prototypes = BTreeMap::new();
        for (class, vectors) in by_class {
            prototypes.insert(
                class,
                prototype_from_records(&vectors, distance, version.to_string())?,
            );
        }
        Ok(Gallery { distance, prototypes })
    }

    /// Rebuilds the first ceil(fraction * n) classes (under a seeded shuffle)
    /// with the new model's embeddings, keeping old prototypes elsewhere.
    /// Larger fractions refresh supersets of smaller ones at the same seed.
    #[allow(clippy::too_many_arguments)]
    pub fn partial_backfill(
        store: &FeatureStore,
        old_version: &str,
        new_version: &str,
        class_ids: &[i64],
        restrict_to: Option<&BTreeSet<String>>,
        fraction: f64,
        seed: u64,
        distance: Distance,
    ) -> Result<Gallery> {
        if !(0.0..=1.0).contains(&fraction) || !fraction.is_finite() {
            return Err(Error::BadFraction(fraction));
        }
        if class_ids.is_empty() {
            return Err(Error::EmptyGallery);
        }
        let mut sorted: Vec<i64> = class_ids.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        let mut order = sorted.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        order.shuffle(&mut rng);
        let refreshed: BTreeSet<i64> = order
            .into_iter()
            .take((fraction * sorted.len() as f64).ceil() as usize)
            .collect();

        let old_classes: Vec<i64> =
            sorted.iter().copied().filter(|c| !refreshed.contains(c)).collect();
        let new_classes: Vec<i64> = refreshed.iter().copied().collect();

        let mut prototypes = BTreeMap::new();
        if !old_classes.is_empty() {
            let by_class = class_vectors(store, old_version, &old_classes, restrict_to)?;
            for (class, vectors) in by_class {
                prototypes.insert(
                    class,
                    prototype_from_records(&vectors, distance, old_version.to_string())?,
                );
            }
        }
        if !new_classes.is_empty() {
            let by_class = class_vectors(store, new_version, &new_classes, restrict_to)?;
            for (class, vectors) in by_class {
                prototypes.insert(
                    class,
                    prototype_from_records(&vectors, distance, new_version.to_string())?,
                );
            }
        }
        Ok(Gallery { distance, prototypes })
    }

    pub fn distance(&self) -> Distance {
        self.distance
    }

    pub fn len(&self) -> usize {
        self.prototypes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prototypes.is_empty()
    }

    pub fn class_ids(&self) -> Vec<i64> {
        self.prototypes.keys().copied().collect()
    }

    pub fn prototype(&self, class_id: i64) -> Option<&Prototype> {
        self.prototypes.get(&class_id)
    }

    pub fn contains(&self, class_id: i64) -> bool {
        self.prototypes.contains_key(&class_id)
    }

    /// Nearest prototype to the query: (class id, distance). When the query
    /// and a prototype differ in width, the longer one is cut to the first
    /// coordinates of the shorter (renormalized under cosine). Exact ties go
    /// to the smallest class id.
    pub fn assign(&self, query: &[f64]) -> Result<(i64, f64)> {
        if self.prototypes.is_empty() {
            return Err(Error::EmptyGallery);
        }
        let mut best: Option<(i64, f64)> = None;
        for (&class, proto) in &self.prototypes {
            let d = self.compare(query, &proto.vector)?;
            if best.map_or(true, |(_, bd)| d < bd) {
                best = Some((class, d));
            }
        }
        Ok(best.unwrap())
    }

    /// Distance from each prototype, ascending by class id.
    pub fn distances(&self, query: &[f64]) -> Result<Vec<(i64, f64)>> {
        self.prototypes
            .iter()
            .map(|(&class, proto)| Ok((class, self.compare(query, &proto.vector)?)))
            .collect()
    }

    fn compare(&self, query: &[f64], proto: &[f64]) -> Result<f64> {
        let shared = query.len().min(proto.len());
        if shared == query.len() && shared == proto.len() {
            return self.distance.between(query, proto);
        }
        if shared == 0 {
            return Err(Error::BadTruncation { target: 0, dim: query.len().max(proto.len()) });
        }
        self.distance.between(&query[..shared], &proto[..shared])
    }

    /// A copy with every prototype cut to its first `target_dim` coordinates
    /// (renormalized under cosine), for comparing against a narrower model.
    pub fn truncate_for_comparison(&self, target_dim: usize) -> Result<Gallery> {
        let mut prototypes = BTreeMap::new();
        for (&class, proto) in &self.prototypes {
            if target_dim == 0 || target_dim > proto.vector.len() {
                return Err(Error::BadTruncation { target: target_dim, dim: proto.vector.len() });
            }
            let mut vector = proto.vector[..target_dim].to_vec();
            if self.distance == Distance::Cosine {
                let n = norm(&vector);
                if n <= 1e-12 {
                    return Err(Error::DegenerateNorm {
                        context: "truncated prototype",
                        norm: n,
                    });
                }
                for v in &mut vector {
                    *v /= n;
                }
            }
            prototypes
                .insert(class, Prototype { vector, source_version: proto.source_version.clone() });
        }
        Ok(Gallery { distance: self.distance, prototypes })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Gallery> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }
}
