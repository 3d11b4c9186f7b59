//! Shared fixture glue for the compatibility benchmarks: dataset and recipe
//! defaults, checkpoint training, feature extraction, and the scalar search
//! and verification metrics the acceptance criteria are stated over.

// each test target uses a different slice of this module
#![allow(dead_code)]

use bctlab::datagen::{Dataset, EvalSplit, SyntheticSpec};
use bctlab::derive_seed;
use bctlab::eval::{build_verification_pairs, choose_held_out_classes, search_1vn, verify_1v1};
use bctlab::gallery::{Distance, Gallery};
use bctlab::heads::HeadVariant;
use bctlab::layers::LayerSpec;
use bctlab::optim::SgdConfig;
use bctlab::store::FeatureStore;
use bctlab::trainer::{extract_features, train, Checkpoint, TrainRecipe};
use bctlab::trainer::BctMode;
use std::collections::BTreeSet;

pub const FAR_TARGET: f64 = 1e-2;
pub const FPIR_TARGET: f64 = 1e-1;
/// Seed for the gallery/query/holdout draws shared by every experiment.
pub const PROTOCOL_SEED: u64 = 999;

/// Desk benchmark dataset: large enough for stable operating points, small
/// enough to train the whole model fixture in seconds.
pub fn desk_spec() -> SyntheticSpec {
    SyntheticSpec {
        num_train_identities: 60,
        num_openset_identities: 40,
        samples_per_identity: 50,
        input_dim: 32,
        class_separation: 6.0,
        rng_seed: 4242,
    }
}

/// Compatibility benchmark dataset. Identities sit further apart than the
/// generator default: with crowded classes, independently-seeded trainings
/// disagree so much off the training classes that no influence weight can
/// pull a successor across the old model's own accuracy.
pub fn benchmark_spec() -> SyntheticSpec {
    SyntheticSpec { class_separation: 14.0, ..desk_spec() }
}

/// Recipe shared by the compatibility benchmark models. The tight angular
/// margin forces every training run toward the same max-spread class
/// geometry, and heavy weight decay with small batches smooths the learned
/// map — both make influence anchoring transfer to unseen identities.
pub fn benchmark_recipe(tag: &str, seed: u64) -> TrainRecipe {
    let mut r = desk_recipe(tag, seed);
    r.head = HeadVariant::CosineMargin { scale: 24.0, margin: 0.4 };
    r.sgd.weight_decay = 3e-3;
    r.sgd.batch_size = 16;
    r
}

/// Shrunk dataset for fast directional property tests.
pub fn probe_spec() -> SyntheticSpec {
    SyntheticSpec {
        num_train_identities: 30,
        num_openset_identities: 10,
        samples_per_identity: 30,
        input_dim: 24,
        class_separation: 6.0,
        rng_seed: 515,
    }
}

/// Affine/relu stack through the listed widths; hidden layers carry biases,
/// the embedding layer does not.
pub fn mlp(dims: &[usize]) -> Vec<LayerSpec> {
    let mut specs = Vec::new();
    for (i, w) in dims.windows(2).enumerate() {
        if i > 0 {
            specs.push(LayerSpec::Relu);
        }
        specs.push(LayerSpec::Affine { in_dim: w[0], out_dim: w[1], bias: i + 2 < dims.len() });
    }
    specs
}

pub fn desk_recipe(tag: &str, seed: u64) -> TrainRecipe {
    TrainRecipe {
        version_tag: tag.into(),
        model_arch: mlp(&[32, 64, 64, 16]),
        head: HeadVariant::CosineMargin { scale: 16.0, margin: 0.25 },
        data_fraction: 1.0,
        bct_mode: BctMode::None,
        old_checkpoint: None,
        lambda: 0.0,
        sgd: SgdConfig {
            learning_rate_schedule: vec![(0, 0.05), (20, 0.01), (26, 0.002)],
            weight_decay: 5e-4,
            batch_size: 64,
            epochs: 30,
            rng_seed: seed,
        },
        relu_on_embedding: false,
        embed_dim: 16,
        distance: Distance::Cosine,
        kd_temperature: None,
    }
}

pub fn probe_recipe(tag: &str, seed: u64) -> TrainRecipe {
    TrainRecipe {
        version_tag: tag.into(),
        model_arch: mlp(&[24, 48, 8]),
        head: HeadVariant::CosineMargin { scale: 16.0, margin: 0.25 },
        data_fraction: 1.0,
        bct_mode: BctMode::None,
        old_checkpoint: None,
        lambda: 0.0,
        sgd: SgdConfig {
            learning_rate_schedule: vec![(0, 0.08), (20, 0.016)],
            weight_decay: 5e-4,
            batch_size: 32,
            epochs: 30,
            rng_seed: seed,
        },
        relu_on_embedding: false,
        embed_dim: 8,
        distance: Distance::Cosine,
        kd_temperature: None,
    }
}

pub fn train_f64(recipe: &TrainRecipe, ds: &Dataset, old: Option<&Checkpoint>) -> Checkpoint {
    train::<f64>(recipe, ds, old).unwrap()
}

/// Extracts every sample in the dataset with the checkpoint's model.
pub fn extract_all(ckpt: &Checkpoint, ds: &Dataset) -> FeatureStore {
    let samples: Vec<&_> = ds.samples().iter().collect();
    extract_features::<f64>(ckpt, &samples).unwrap()
}

/// Open-set evaluation protocol: a quarter of the open identities never
/// reach the gallery and act as unknowns; the rest contribute half their
/// samples to the gallery and the other half as known queries.
pub struct OpenSetProtocol {
    pub kept: Vec<i64>,
    pub held: Vec<i64>,
    pub split: EvalSplit,
    pub unknown_query_ids: Vec<String>,
    pub gallery_sample_ids: BTreeSet<String>,
    /// (sample id, class) over all open identities, for verification pairs.
    pub open_items: Vec<(String, i64)>,
    seed: u64,
}

impl OpenSetProtocol {
    pub fn new(ds: &Dataset, seed: u64) -> Self {
        let open = ds.openset_class_ids();
        let (kept, held) =
            choose_held_out_classes(&open, 0.25, derive_seed(seed, "holdout")).unwrap();
        let spi = ds.spec().samples_per_identity;
        let split = ds
            .split_queries_galleries(&kept, spi / 2, spi - spi / 2, derive_seed(seed, "split"))
            .unwrap();
        let unknown_query_ids: Vec<String> = ds
            .samples_for_classes(&held)
            .iter()
            .map(|s| s.sample_id.clone())
            .collect();
        let open_items: Vec<(String, i64)> = ds
            .samples_for_classes(&open)
            .iter()
            .map(|s| (s.sample_id.clone(), s.class_id))
            .collect();
        OpenSetProtocol {
            gallery_sample_ids: split.gallery_ids.iter().cloned().collect(),
            unknown_query_ids,
            kept,
            held,
            split,
            open_items,
            seed,
        }
    }

    pub fn all_query_ids(&self) -> Vec<String> {
        let mut q = self.split.query_ids.clone();
        q.extend(self.unknown_query_ids.iter().cloned());
        q
    }

    pub fn gallery_from(&self, store: &FeatureStore, version: &str) -> Gallery {
        Gallery::build_prototypes(
            store,
            version,
            &self.kept,
            Some(&self.gallery_sample_ids),
            Distance::Cosine,
        )
        .unwrap()
    }

    /// Identification rate of query features against a prototype gallery at
    /// the benchmark false-positive identification rate.
    pub fn search_metric_against(&self, query_store: &FeatureStore, query_version: &str, gallery: &Gallery) -> f64 {
        let report = search_1vn(
            query_store,
            query_version,
            &self.all_query_ids(),
            gallery,
            &[FPIR_TARGET],
            &[1],
        )
        .unwrap();
        report.true_rate_at(FPIR_TARGET).unwrap()
    }

    /// Search metric with the gallery built from `gallery_store` features.
    pub fn search_metric(
        &self,
        query_store: &FeatureStore,
        query_version: &str,
        gallery_store: &FeatureStore,
        gallery_version: &str,
    ) -> f64 {
        let gallery = self.gallery_from(gallery_store, gallery_version);
        self.search_metric_against(query_store, query_version, &gallery)
    }

    /// Cross-version 1:1 verification rate at the benchmark FAR; the probe
    /// side of each pair comes from `query_store`, the enrolled side from
    /// `ref_store`.
    pub fn verify_metric(
        &self,
        query_store: &FeatureStore,
        query_version: &str,
        ref_store: &FeatureStore,
        ref_version: &str,
    ) -> f64 {
        let pairs =
            build_verification_pairs(&self.open_items, 20, 1, derive_seed(self.seed, "pairs"))
                .unwrap();
        let report = verify_1v1(
            query_store,
            query_version,
            ref_store,
            ref_version,
            &pairs,
            Distance::Cosine,
            &[FAR_TARGET],
        )
        .unwrap();
        report.true_rate_at(FAR_TARGET).unwrap()
    }
}
