//! Open-set evaluation protocol shared by the reporting commands: a fraction
//! of open identities never reaches the gallery (their samples become the
//! unknown queries); each remaining identity contributes half its samples as
//! gallery and the other half as known queries.

use bctlab::datagen::Dataset;
use bctlab::derive_seed;
use bctlab::eval::{
    build_verification_pairs, choose_held_out_classes, search_1vn, verify_1v1, EvalReport,
};
use bctlab::gallery::{Distance, Gallery};
use bctlab::store::FeatureStore;
use std::collections::BTreeSet;

use crate::config::ProtocolSettings;
use crate::error::Result;

pub struct OpenSetProtocol {
    pub kept: Vec<i64>,
    pub known_query_ids: Vec<String>,
    pub unknown_query_ids: Vec<String>,
    pub gallery_sample_ids: BTreeSet<String>,
    /// (sample id, class) over all open identities, for verification pairs.
    pub open_items: Vec<(String, i64)>,
    pub settings: ProtocolSettings,
    pub seed: u64,
}

impl OpenSetProtocol {
    pub fn new(ds: &Dataset, settings: &ProtocolSettings, global_seed: u64) -> Result<Self> {
        let seed = settings.seed.unwrap_or(global_seed);
        let open = ds.openset_class_ids();
        let (kept, held) =
            choose_held_out_classes(&open, settings.holdout_fraction, derive_seed(seed, "holdout"))?;
        let spi = ds.spec().samples_per_identity;
        let split =
            ds.split_queries_galleries(&kept, spi / 2, spi - spi / 2, derive_seed(seed, "split"))?;
        let unknown_query_ids =
            ds.samples_for_classes(&held).iter().map(|s| s.sample_id.clone()).collect();
        let open_items = ds
            .samples_for_classes(&open)
            .iter()
            .map(|s| (s.sample_id.clone(), s.class_id))
            .collect();
        Ok(OpenSetProtocol {
            gallery_sample_ids: split.gallery_ids.iter().cloned().collect(),
            known_query_ids: split.query_ids,
            unknown_query_ids,
            kept,
            open_items,
            settings: settings.clone(),
            seed,
        })
    }

    pub fn all_query_ids(&self) -> Vec<String> {
        let mut ids = self.known_query_ids.clone();
        ids.extend(self.unknown_query_ids.iter().cloned());
        ids
    }

    pub fn gallery(&self, store: &FeatureStore, version: &str, distance: Distance) -> Result<Gallery> {
        Ok(Gallery::build_prototypes(
            store,
            version,
            &self.kept,
            Some(&self.gallery_sample_ids),
            distance,
        )?)
    }

    /// Open-set search report at the configured FPIR target, ranks 1 and 5.
    pub fn search_report(
        &self,
        queries: &FeatureStore,
        version: &str,
        gallery: &Gallery,
    ) -> Result<EvalReport> {
        Ok(search_1vn(
            queries,
            version,
            &self.all_query_ids(),
            gallery,
            &[self.settings.fpir_target],
            &[1, 5],
        )?)
    }

    pub fn search_rate(
        &self,
        queries: &FeatureStore,
        version: &str,
        gallery: &Gallery,
    ) -> Result<f64> {
        let report = self.search_report(queries, version, gallery)?;
        Ok(report.true_rate_at(self.settings.fpir_target).expect("requested operating point"))
    }

    /// 1:1 verification report at the configured FAR target.
    pub fn verify_report(
        &self,
        queries: &FeatureStore,
        query_version: &str,
        refs: &FeatureStore,
        ref_version: &str,
        distance: Distance,
    ) -> Result<EvalReport> {
        let pairs = build_verification_pairs(
            &self.open_items,
            self.settings.genuine_pairs_per_class,
            self.settings.impostors_per_genuine,
            derive_seed(self.seed, "pairs"),
        )?;
        Ok(verify_1v1(queries, query_version, refs, ref_version, &pairs, distance, &[self.settings.far_target])?)
    }

    pub fn verify_rate(
        &self,
        queries: &FeatureStore,
        query_version: &str,
        refs: &FeatureStore,
        ref_version: &str,
        distance: Distance,
    ) -> Result<f64> {
        let report = self.verify_report(queries, query_version, refs, ref_version, distance)?;
        Ok(report.true_rate_at(self.settings.far_target).expect("requested operating point"))
    }
}
