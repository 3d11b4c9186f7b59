//! Synthetic identity benchmark: gaussian clusters around per-class centers
//! on a sphere, pushed through a frozen random nonlinearity. Everything is a
//! pure function of the spec, so regeneration is bit-exact.

use crate::error::{Error, Result};
use crate::matrix::DenseMatrix;
use crate::scalar::Scalar;
use crate::{derive_seed, Mat};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

/// Recipe for one synthetic benchmark; two equal specs generate identical data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    /// Identities available for training (class ids 0..n).
    pub num_train_identities: usize,
    /// Extra identities never trained on (ids continue after the train ids).
    pub num_openset_identities: usize,
    pub samples_per_identity: usize,
    pub input_dim: usize,
    /// Radius of the sphere the class centers sit on, in units of the
    /// within-class noise standard deviation (1.0).
    pub class_separation: f64,
    pub rng_seed: u64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_train_identities == 0 {
            return Err(Error::InvalidConfig("num_train_identities must be positive".into()));
        }
        if self.samples_per_identity == 0 {
            return Err(Error::InvalidConfig("samples_per_identity must be positive".into()));
        }
        if self.input_dim < 2 {
            return Err(Error::InvalidConfig("input_dim must be at least 2".into()));
        }
        if !self.class_separation.is_finite() || self.class_separation <= 0.0 {
            return Err(Error::InvalidConfig("class_separation must be positive".into()));
        }
        Ok(())
    }

    pub fn total_identities(&self) -> usize {
        self.num_train_identities + self.num_openset_identities
    }
}

/// One generated observation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledSample {
    pub sample_id: String,
    pub class_id: i64,
    pub input: Vec<f64>,
}

/// A fully materialized benchmark, ordered by class then sample index.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    spec: SyntheticSpec,
    samples: Vec<LabeledSample>,
}

/// Sample ids selected for indexing vs querying in retrieval evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSplit {
    pub gallery_ids: Vec<String>,
    pub query_ids: Vec<String>,
}

fn gaussian_vec(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

impl Dataset {
    pub fn generate(spec: &SyntheticSpec) -> Result<Dataset> {
        spec.validate()?;
        let dim = spec.input_dim;
        let total = spec.total_identities();

        // class centers: uniform directions scaled to the separation radius
        let mut center_rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.rng_seed, "centers"));
        let mut centers = Vec::with_capacity(total);
        for _ in 0..total {
            let v = loop {
                let v = gaussian_vec(&mut center_rng, dim);
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                if norm > 1e-6 {
                    break v.into_iter().map(|x| x / norm * spec.class_separation).collect::<Vec<_>>();
                }
            };
            centers.push(v);
        }

        // frozen warp: y = tanh(0.75 * (A x + b)) with A = up · proj, a
        // rank-limited random affine. The bottleneck keeps the warped data on
        // a low-dimensional manifold so held-out identities interpolate
        // among training ones instead of landing in unconstrained directions.
        let rank = dim.min(6);
        let mut warp_rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.rng_seed, "warp"));
        let proj = Mat::from_fn(rank, dim, |_, _| {
            warp_rng.sample::<f64, _>(StandardNormal) / (dim as f64).sqrt()
        });
        let up = Mat::from_fn(dim, rank, |_, _| {
            warp_rng.sample::<f64, _>(StandardNormal) / (rank as f64).sqrt()
        });
        // warp_a[(i, j)] = (up · proj)[j][i]: input coordinate i, output j
        let warp_a = Mat::from_fn(dim, dim, |i, j| {
            (0..rank).map(|k| up.get(j, k) * proj.get(k, i)).sum()
        });
        let warp_b: Vec<f64> = (0..dim)
            .map(|_| warp_rng.sample::<f64, _>(StandardNormal) * 0.2)
            .collect();

        let mut noise_rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.rng_seed, "noise"));
        let mut samples = Vec::with_capacity(total * spec.samples_per_identity);
        for (class, center) in centers.iter().enumerate() {
            for k in 0..spec.samples_per_identity {
                let raw: Vec<f64> = center
                    .iter()
                    .map(|c| c + noise_rng.sample::<f64, _>(StandardNormal))
                    .collect();
                let mut input = vec![0.0; dim];
                for (j, out) in input.iter_mut().enumerate() {
                    let mut acc = warp_b[j];
                    for (i, r) in raw.iter().enumerate() {
                        acc += warp_a.get(i, j) * r;
                    }
                    *out = (0.75 * acc).tanh();
                }
                samples.push(LabeledSample {
                    sample_id: format!("id{class:04}-s{k:04}"),
                    class_id: class as i64,
                    input,
                });
            }
        }
        Ok(Dataset { spec: spec.clone(), samples })
    }

    pub fn spec(&self) -> &SyntheticSpec {
        &self.spec
    }

    pub fn samples(&self) -> &[LabeledSample] {
        &self.samples
    }

    /// Class ids of the training identities, ascending.
    pub fn train_class_ids(&self) -> Vec<i64> {
        (0..self.spec.num_train_identities as i64).collect()
    }

    /// Class ids of the held-back identities, ascending.
    pub fn openset_class_ids(&self) -> Vec<i64> {
        (self.spec.num_train_identities as i64..self.spec.total_identities() as i64).collect()
    }

    pub fn samples_for_classes(&self, class_ids: &[i64]) -> Vec<&LabeledSample> {
        let wanted: std::collections::BTreeSet<i64> = class_ids.iter().copied().collect();
        self.samples.iter().filter(|s| wanted.contains(&s.class_id)).collect()
    }

    /// The first ceil(fraction * n) training identities under a fixed
    /// seed-derived shuffle, returned ascending. Prefixes nest: a larger
    /// fraction always contains every smaller one's identities.
    pub fn identity_subset(&self, fraction: f64) -> Result<Vec<i64>> {
        if !(fraction > 0.0 && fraction <= 1.0) {
            return Err(Error::BadFraction(fraction));
        }
        let mut ids = self.train_class_ids();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.spec.rng_seed, "identity-subset"));
        ids.shuffle(&mut rng);
        let take = (fraction * ids.len() as f64).ceil() as usize;
        let mut chosen: Vec<i64> = ids.into_iter().take(take).collect();
        chosen.sort_unstable();
        Ok(chosen)
    }

    /// Deterministically pick per-class gallery and query samples (disjoint)
    /// from the listed classes.
    pub fn split_queries_galleries(
        &self,
        class_ids: &[i64],
        per_class_gallery: usize,
        per_class_query: usize,
        seed: u64,
    ) -> Result<EvalSplit> {
        let mut by_class: BTreeMap<i64, Vec<&LabeledSample>> = BTreeMap::new();
        for s in &self.samples {
            by_class.entry(s.class_id).or_default().push(s);
        }
        let mut gallery_ids = Vec::new();
        let mut query_ids = Vec::new();
        for &class in class_ids {
            let Some(members) = by_class.get(&class) else {
                return Err(Error::EmptyClass { class_id: class });
            };
            let needed = per_class_gallery + per_class_query;
            if members.len() < needed {
                return Err(Error::InsufficientSamples {
                    class_id: class,
                    needed,
                    available: members.len(),
                });
            }
            let mut order: Vec<usize> = (0..members.len()).collect();
            let mut rng =
                ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("split-{class}")));
            order.shuffle(&mut rng);
            for &i in order.iter().take(per_class_gallery) {
                gallery_ids.push(members[i].sample_id.clone());
            }
            for &i in order.iter().skip(per_class_gallery).take(per_class_query) {
                query_ids.push(members[i].sample_id.clone());
            }
        }
        Ok(EvalSplit { gallery_ids, query_ids })
    }

    /// Writes `<path>` as JSON-lines samples plus a `<path>.spec.json` sidecar.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        for s in &self.samples {
            serde_json::to_writer(&mut out, s)?;
            out.write_all(b"\n")?;
        }
        out.flush()?;
        let spec_path = sidecar_path(path);
        std::fs::write(spec_path, serde_json::to_vec_pretty(&self.spec)?)?;
        Ok(())
    }

    /// Reads a saved dataset and checks it is exactly what its spec promises.
    pub fn load(path: &Path) -> Result<Dataset> {
        let spec: SyntheticSpec =
            serde_json::from_slice(&std::fs::read(sidecar_path(path))?)?;
        spec.validate()?;
        let reader = BufReader::new(std::fs::File::open(path)?);
        let mut samples = Vec::new();
        for line in reader.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            samples.push(serde_json::from_str::<LabeledSample>(&line)?);
        }
        let ds = Dataset { spec, samples };
        ds.check_consistent()?;
        Ok(ds)
    }

    fn check_consistent(&self) -> Result<()> {
        let expected = self.spec.total_identities() * self.spec.samples_per_identity;
        if self.samples.len() != expected {
            return Err(Error::InvalidConfig(format!(
                "dataset holds {} samples but its spec implies {expected}",
                self.samples.len()
            )));
        }
        let mut per_class: BTreeMap<i64, usize> = BTreeMap::new();
        for s in &self.samples {
            if s.input.len() != self.spec.input_dim {
                return Err(Error::ShapeMismatch {
                    context: "dataset sample input",
                    expected: format!("{}", self.spec.input_dim),
                    actual: format!("{}", s.input.len()),
                });
            }
            if s.input.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite { context: "dataset sample input" });
            }
            if s.class_id < 0 || s.class_id >= self.spec.total_identities() as i64 {
                return Err(Error::UnresolvableClass { class_id: s.class_id });
            }
            *per_class.entry(s.class_id).or_insert(0) += 1;
        }
        if per_class.len() != self.spec.total_identities()
            || per_class.values().any(|&n| n != self.spec.samples_per_identity)
        {
            return Err(Error::InvalidConfig(
                "dataset class counts disagree with its spec".into(),
            ));
        }
        Ok(())
    }
}

fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut os = path.as_os_str().to_owned();
    os.push(".spec.json");
    std::path::PathBuf::from(os)
}

/// Stacks sample inputs into one batch matrix.
pub fn inputs_matrix<S: Scalar>(samples: &[&LabeledSample]) -> Result<DenseMatrix<S>> {
    if samples.is_empty() {
        return Err(Error::InvalidConfig("cannot batch zero samples".into()));
    }
    let dim = samples[0].input.len();
    let mut m = DenseMatrix::zeros(samples.len(), dim);
    for (r, s) in samples.iter().enumerate() {
        if s.input.len() != dim {
            return Err(Error::ShapeMismatch {
                context: "batch input row",
                expected: format!("{dim}"),
                actual: format!("{}", s.input.len()),
            });
        }
        for (c, &v) in s.input.iter().enumerate() {
            m.set(r, c, S::from_f64_lossy(v));
        }
    }
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> SyntheticSpec {
        SyntheticSpec {
            num_train_identities: 8,
            num_openset_identities: 4,
            samples_per_identity: 6,
            input_dim: 5,
            class_separation: 6.0,
            rng_seed: 42,
        }
    }

    #[test]
    fn generation_is_deterministic_and_well_formed() {
        let spec = small_spec();
        let a = Dataset::generate(&spec).unwrap();
        let b = Dataset::generate(&spec).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.samples().len(), 12 * 6);
        for s in a.samples() {
            assert!(s.input.iter().all(|v| v.is_finite() && v.abs() < 1.0));
        }
        assert_eq!(a.train_class_ids(), (0..8).collect::<Vec<i64>>());
        assert_eq!(a.openset_class_ids(), (8..12).collect::<Vec<i64>>());
        // a different seed actually moves the data
        let mut other = spec.clone();
        other.rng_seed = 43;
        assert_ne!(Dataset::generate(&other).unwrap().samples()[0].input, a.samples()[0].input);
    }

    #[test]
    fn classes_are_separated_in_input_space() {
        let ds = Dataset::generate(&small_spec()).unwrap();
        let dist = |a: &[f64], b: &[f64]| -> f64 {
            a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
        };
        let mut within = (0.0, 0usize);
        let mut across = (0.0, 0usize);
        let ss = ds.samples();
        for i in 0..ss.len() {
            for j in (i + 1)..ss.len() {
                let d = dist(&ss[i].input, &ss[j].input);
                if ss[i].class_id == ss[j].class_id {
                    within = (within.0 + d, within.1 + 1);
                } else {
                    across = (across.0 + d, across.1 + 1);
                }
            }
        }
        assert!(across.0 / across.1 as f64 > 1.2 * (within.0 / within.1 as f64));
    }

    #[test]
    fn identity_subsets_nest_and_are_sorted() {
        let ds = Dataset::generate(&small_spec()).unwrap();
        let fractions = [0.25, 0.5, 0.75, 1.0];
        let subsets: Vec<Vec<i64>> =
            fractions.iter().map(|&f| ds.identity_subset(f).unwrap()).collect();
        assert_eq!(subsets[0].len(), 2);
        assert_eq!(subsets[1].len(), 4);
        assert_eq!(subsets[2].len(), 6);
        assert_eq!(subsets[3], (0..8).collect::<Vec<i64>>());
        for pair in subsets.windows(2) {
            assert!(pair[0].iter().all(|id| pair[1].contains(id)), "subsets must nest");
        }
        for s in &subsets {
            let mut sorted = s.clone();
            sorted.sort_unstable();
            assert_eq!(&sorted, s);
        }
        assert!(matches!(ds.identity_subset(0.0), Err(Error::BadFraction(_))));
        assert!(matches!(ds.identity_subset(1.2), Err(Error::BadFraction(_))));
    }

    #[test]
    fn split_is_disjoint_and_guarded() {
        let ds = Dataset::generate(&small_spec()).unwrap();
        let classes = ds.openset_class_ids();
        let split = ds.split_queries_galleries(&classes, 2, 3, 7).unwrap();
        assert_eq!(split.gallery_ids.len(), 4 * 2);
        assert_eq!(split.query_ids.len(), 4 * 3);
        assert!(split.gallery_ids.iter().all(|g| !split.query_ids.contains(g)));
        let again = ds.split_queries_galleries(&classes, 2, 3, 7).unwrap();
        assert_eq!(split, again);
        assert!(matches!(
            ds.split_queries_galleries(&classes, 4, 3, 7),
            Err(Error::InsufficientSamples { needed: 7, available: 6, .. })
        ));
        assert!(matches!(
            ds.split_queries_galleries(&[99], 1, 1, 7),
            Err(Error::EmptyClass { class_id: 99 })
        ));
    }

    #[test]
    fn save_load_round_trips_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bench.jsonl");
        let ds = Dataset::generate(&small_spec()).unwrap();
        ds.save(&path).unwrap();
        let back = Dataset::load(&path).unwrap();
        assert_eq!(ds, back);
    }

    #[test]
    fn inputs_matrix_stacks_rows() {
        let ds = Dataset::generate(&small_spec()).unwrap();
        let refs: Vec<&LabeledSample> = ds.samples().iter().take(3).collect();
        let m = inputs_matrix::<f64>(&refs).unwrap();
        assert_eq!(m.shape(), (3, 5));
        assert_eq!(m.row(1), refs[1].input.as_slice());
    }
}
