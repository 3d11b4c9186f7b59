//! The eight experiment commands. Each validates its config section and
//! referenced paths, runs the underlying library operation, writes artifacts
//! named `<kind>-<confighash>.<ext>` under the output directory, and reports
//! what it wrote. Reports embed the config hash and content hashes of every
//! input they were computed from.

use bctlab::datagen::Dataset;
use bctlab::derive_seed;
use bctlab::eval::{empirical_criterion, update_gain};
use bctlab::gallery::Gallery;
use bctlab::store::FeatureStore;
use bctlab::trainer::{self, Checkpoint};
use serde_json::json;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::config::{self, EvalMode, ExperimentConfig};
use crate::error::{CliError, Result};
use crate::protocol::OpenSetProtocol;

pub struct Outcome {
    pub outputs: Vec<PathBuf>,
    pub summary: Option<serde_json::Value>,
}

impl Outcome {
    fn files(outputs: Vec<PathBuf>) -> Outcome {
        Outcome { outputs, summary: None }
    }
}

fn existing(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::Config(format!("referenced path `{}` does not exist", path.display())))
    }
}

fn load_dataset(cfg: &ExperimentConfig) -> Result<(PathBuf, Dataset)> {
    let path = cfg
        .dataset
        .clone()
        .ok_or_else(|| CliError::Config("`dataset` path is required by this command".into()))?;
    existing(&path)?;
    Ok((path.clone(), Dataset::load(&path)?))
}

fn read_store(path: &Path) -> Result<FeatureStore> {
    existing(path)?;
    Ok(FeatureStore::read_file(path)?)
}

fn load_checkpoint(stem: &Path) -> Result<Checkpoint> {
    existing(&suffixed(stem)[0])?;
    Ok(Checkpoint::load(stem)?)
}

/// The two files a checkpoint stem stands for.
fn suffixed(stem: &Path) -> Vec<PathBuf> {
    [".json", ".bin"].iter().map(|s| PathBuf::from(format!("{}{s}", stem.display()))).collect()
}

/// Content hashes of the inputs a report was computed from.
fn provenance(paths: &[&Path]) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for p in paths {
        map.insert(p.display().to_string(), config::sha256_hex(&std::fs::read(p)?));
    }
    Ok(map)
}

pub fn gen(cfg: &ExperimentConfig, hash: &str, out: &Path) -> Result<Outcome> {
    let spec = config::section(&cfg.spec, "spec")?;
    let ds = Dataset::generate(spec)?;
    let path = out.join(format!("dataset-{hash}.jsonl"));
    ds.save(&path)?;
    let sidecar = PathBuf::from(format!("{}.spec.json", path.display()));
    Ok(Outcome::files(vec![path, sidecar]))
}

pub fn train(cfg: &ExperimentConfig, hash: &str, out: &Path) -> Result<Outcome> {
    let job = config::section(&cfg.train, "train")?;
    let (_, ds) = load_dataset(cfg)?;
    let old = match &job.old_checkpoint_path {
        Some(stem) => Some(load_checkpoint(stem)?),
        None => None,
    };
    let ckpt = trainer::train::<f64>(&job.recipe, &ds, old.as_ref())?;
    let stem = out.join(format!("checkpoint-{hash}"));
    ckpt.save(&stem)?;
    Ok(Outcome::files(suffixed(&stem)))
}

pub fn chain(cfg: &ExperimentConfig, hash: &str, out: &Path) -> Result<Outcome> {
    let recipes = config::section(&cfg.chain, "chain")?;
    let (_, ds) = load_dataset(cfg)?;
    let checkpoints = trainer::train_chain::<f64>(recipes, &ds)?;
    let mut outputs = Vec::new();
    for ckpt in &checkpoints {
        let stem = out.join(format!("checkpoint-{}-{hash}", ckpt.version_tag));
        ckpt.save(&stem)?;
        outputs.extend(suffixed(&stem));
    }
    Ok(Outcome::files(outputs))
}

pub fn extract(cfg: &ExperimentConfig, hash: &str, out: &Path) -> Result<Outcome> {
    let job = config::section(&cfg.extract, "extract")?;
    let (_, ds) = load_dataset(cfg)?;
    let ckpt = load_checkpoint(&job.checkpoint)?;
    let samples: Vec<&_> = ds.samples().iter().collect();
    let store = trainer::extract_features::<f64>(&ckpt, &samples)?;
    let path = out.join(format!("features-{hash}.features"));
    store.write_file(&path)?;
    Ok(Outcome::files(vec![path]))
}

pub fn index(cfg: &ExperimentConfig, hash: &str, out: &Path) -> Result<Outcome> {
    let job = config::section(&cfg.index, "index")?;
    let (_, ds) = load_dataset(cfg)?;
    let protocol = OpenSetProtocol::new(&ds, &cfg.protocol, cfg.seed)?;
    let store = read_store(&job.store)?;
    let gallery = match (&job.old_version, job.fraction) {
        (None, None) => protocol.gallery(&store, &job.version, job.distance)?,
        (Some(old_version), Some(fraction)) => Gallery::partial_backfill(
            &store,
            old_version,
            &job.version,
            &protocol.kept,
            Some(&protocol.gallery_sample_ids),
            fraction,
            derive_seed(protocol.seed, "backfill"),
            job.distance,
        )?,
        _ => {
            return Err(CliError::Config(
                "`old_version` and `fraction` must be given together".into(),
            ))
        }
    };
    let path = out.join(format!("gallery-{hash}.json"));
    gallery.save(&path)?;
    let summary = json!({ "classes": gallery.len() });
    Ok(Outcome { outputs: vec![path], summary: Some(summary) })
}

pub fn eval(cfg: &ExperimentConfig, hash: &str, out: &Path) -> Result<Outcome> {
    let job = config::section(&cfg.eval, "eval")?;
    let (ds_path, ds) = load_dataset(cfg)?;
    let protocol = OpenSetProtocol::new(&ds, &cfg.protocol, cfg.seed)?;
    let query_store = read_store(&job.query_store)?;
    let (report, target) = match job.mode {
        EvalMode::Search => {
            let gallery_store = read_store(&job.gallery_store)?;
            let gallery = protocol.gallery(&gallery_store, &job.gallery_version, job.distance)?;
            (
                protocol.search_report(&query_store, &job.query_version, &gallery)?,
                protocol.settings.fpir_target,
            )
        }
        EvalMode::Verify => {
            let ref_store = read_store(&job.gallery_store)?;
            (
                protocol.verify_report(
                    &query_store,
                    &job.query_version,
                    &ref_store,
                    &job.gallery_version,
                    job.distance,
                )?,
                protocol.settings.far_target,
            )
        }
    };
    let rate = report.true_rate_at(target);
    let payload = json!({
        "config_hash": hash,
        "inputs": provenance(&[&ds_path, &job.query_store, &job.gallery_store])?,
        "report": report,
    });
    let path = out.join(format!("report-{hash}.json"));
    std::fs::write(&path, serde_json::to_vec_pretty(&payload).expect("report serializes"))?;
    let summary = json!({ "true_rate": rate });
    Ok(Outcome { outputs: vec![path], summary: Some(summary) })
}

/// One protocol's row block of the comparison report; the gain is present
/// only when the criterion passed and a paragon rate was supplied.
fn compat_section(new_old: f64, old_old: f64, paragon: Option<f64>, baseline: bool) -> serde_json::Value {
    let verdict = if baseline {
        "baseline"
    } else if empirical_criterion(new_old, old_old) {
        "pass"
    } else {
        "fail"
    };
    let mut section = serde_json::Map::new();
    section.insert("old_old".into(), json!(old_old));
    section.insert("new_old".into(), json!(new_old));
    if let Some(p) = paragon {
        section.insert("paragon_paragon".into(), json!(p));
    }
    section.insert("verdict".into(), json!(verdict));
    if !baseline {
        if let Some(p) = paragon {
            if let Ok(gain) = update_gain(new_old, old_old, p) {
                section.insert("update_gain".into(), json!(gain));
            }
        }
    }
    serde_json::Value::Object(section)
}

pub fn compat(cfg: &ExperimentConfig, hash: &str, out: &Path) -> Result<Outcome> {
    let job = config::section(&cfg.compat, "compat")?;
    let (ds_path, ds) = load_dataset(cfg)?;
    let protocol = OpenSetProtocol::new(&ds, &cfg.protocol, cfg.seed)?;

    let baseline = job.new_store == job.old_store && job.new_version == job.old_version;
    let old_store = read_store(&job.old_store)?;
    let new_store =
        if baseline { old_store.clone() } else { read_store(&job.new_store)? };
    let paragon = match (&job.paragon_store, &job.paragon_version) {
        (Some(path), Some(version)) => Some((read_store(path)?, version.clone())),
        (None, None) => None,
        _ => {
            return Err(CliError::Config(
                "`paragon_store` and `paragon_version` must be given together".into(),
            ))
        }
    };

    let old_gallery = protocol.gallery(&old_store, &job.old_version, job.distance)?;
    let m_old_old = protocol.search_rate(&old_store, &job.old_version, &old_gallery)?;
    let m_new_old = protocol.search_rate(&new_store, &job.new_version, &old_gallery)?;
    let v_old_old =
        protocol.verify_rate(&old_store, &job.old_version, &old_store, &job.old_version, job.distance)?;
    let v_new_old =
        protocol.verify_rate(&new_store, &job.new_version, &old_store, &job.old_version, job.distance)?;
    let (m_paragon, v_paragon) = match &paragon {
        Some((store, version)) => {
            let gallery = protocol.gallery(store, version, job.distance)?;
            (
                Some(protocol.search_rate(store, version, &gallery)?),
                Some(protocol.verify_rate(store, version, store, version, job.distance)?),
            )
        }
        None => (None, None),
    };

    let search = compat_section(m_new_old, m_old_old, m_paragon, baseline);
    let verification = compat_section(v_new_old, v_old_old, v_paragon, baseline);

    let mut inputs: Vec<&Path> = vec![&ds_path, &job.old_store, &job.new_store];
    if let Some(p) = &job.paragon_store {
        inputs.push(p);
    }
    let payload = json!({
        "config_hash": hash,
        "inputs": provenance(&inputs)?,
        "baseline": baseline,
        "search": search,
        "verification": verification,
    });
    let path = out.join(format!("compat-{hash}.json"));
    std::fs::write(&path, serde_json::to_vec_pretty(&payload).expect("report serializes"))?;
    let summary = json!({ "search": search, "verification": verification });
    Ok(Outcome { outputs: vec![path], summary: Some(summary) })
}

pub fn backfill_sweep(cfg: &ExperimentConfig, hash: &str, out: &Path) -> Result<Outcome> {
    let job = config::section(&cfg.backfill_sweep, "backfill_sweep")?;
    if job.steps == 0 {
        return Err(CliError::Config("`steps` must be positive".into()));
    }
    let (_, ds) = load_dataset(cfg)?;
    let protocol = OpenSetProtocol::new(&ds, &cfg.protocol, cfg.seed)?;
    let mut combined = read_store(&job.old_store)?;
    if job.new_store != job.old_store {
        combined.merge(read_store(&job.new_store)?)?;
    }

    let mut rows = Vec::new();
    for i in 0..=job.steps {
        let fraction = i as f64 / job.steps as f64;
        let gallery = Gallery::partial_backfill(
            &combined,
            &job.old_version,
            &job.new_version,
            &protocol.kept,
            Some(&protocol.gallery_sample_ids),
            fraction,
            derive_seed(protocol.seed, "backfill"),
            job.distance,
        )?;
        rows.push((fraction, protocol.search_rate(&combined, &job.new_version, &gallery)?));
    }

    let mut csv = String::from("fraction,identification_rate\n");
    for (fraction, rate) in &rows {
        csv.push_str(&format!("{fraction},{rate}\n"));
    }
    let path = out.join(format!("backfill-{hash}.csv"));
    std::fs::write(&path, csv)?;
    let summary = json!({
        "backward": rows.first().map(|r| r.1),
        "paragon": rows.last().map(|r| r.1),
    });
    Ok(Outcome { outputs: vec![path], summary: Some(summary) })
}
