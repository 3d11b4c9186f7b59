//! Retrieval evaluation: 1:1 verification and open-set 1:N search, with
//! operating points picked from negative-score thresholds, plus the
//! compatibility checks and the update-gain ratio built on top of them.

use crate::error::{Error, Result};
use crate::gallery::{Distance, Gallery};
use crate::store::FeatureStore;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::io::Write;
use std::path::Path;

/// One verification trial: compare sample `a` against sample `b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyPair {
    pub a: String,
    pub b: String,
    pub genuine: bool,
}

/// Acceptance rate of positives at a negative-rate budget.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OperatingPoint {
    pub false_rate_target: f64,
    /// Scores at or above this are accepted.
    pub threshold: f64,
    pub true_rate: f64,
    pub achieved_false_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub false_rate: f64,
    pub true_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankRate {
    pub rank: usize,
    pub rate: f64,
}

/// Everything one protocol run produces; comparison fields stay empty until
/// a compatibility workflow fills them in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub protocol: String,
    pub query_version: String,
    pub gallery_version: String,
    pub distance: Distance,
    pub num_positive: usize,
    pub num_negative: usize,
    pub operating_points: Vec<OperatingPoint>,
    pub curve: Vec<CurvePoint>,
    pub rank_rates: Vec<RankRate>,
    pub criterion_verdict: Option<bool>,
    pub update_gain: Option<f64>,
}

impl EvalReport {
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<EvalReport> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }

    /// Writes the sweep as `false_rate,true_rate` rows.
    pub fn write_curve_csv(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(out, "false_rate,true_rate")?;
        for p in &self.curve {
            writeln!(out, "{},{}", p.false_rate, p.true_rate)?;
        }
        out.flush()?;
        Ok(())
    }

    /// The true rate at a previously computed operating point.
    pub fn true_rate_at(&self, false_rate_target: f64) -> Option<f64> {
        self.operating_points
            .iter()
            .find(|p| p.false_rate_target == false_rate_target)
            .map(|p| p.true_rate)
    }
}

fn count_at_or_above(sorted: &[f64], t: f64) -> usize {
    sorted.len() - sorted.partition_point(|&s| s < t)
}

/// Fraction of positive scores accepted at the most permissive threshold
/// whose negative acceptance stays within `target`. Candidate thresholds are
/// the negative scores themselves; if every candidate overshoots, only
/// scores strictly above the largest negative are accepted.
pub fn true_rate_at_false_rate(
    positive: &[f64],
    negative: &[f64],
    target: f64,
) -> Result<OperatingPoint> {
    if negative.is_empty() {
        return Err(Error::Protocol("operating points need negative scores".into()));
    }
    if !(0.0..=1.0).contains(&target) || !target.is_finite() {
        return Err(Error::Protocol(format!("false-rate target {target} outside [0, 1]")));
    }
    let mut pos = positive.to_vec();
    pos.sort_by(f64::total_cmp);
    let mut neg = negative.to_vec();
    neg.sort_by(f64::total_cmp);
    let n_neg = neg.len() as f64;
    // no positives means nothing can be accepted, never a divide-by-zero
    let rate = |sorted: &[f64], t: f64| {
        if sorted.is_empty() {
            0.0
        } else {
            count_at_or_above(sorted, t) as f64 / sorted.len() as f64
        }
    };

    // ascending candidates: the first whose false rate fits is the most
    // permissive acceptable threshold
    for &t in neg.iter() {
        let fr = count_at_or_above(&neg, t) as f64 / n_neg;
        if fr <= target {
            return Ok(OperatingPoint {
                false_rate_target: target,
                threshold: t,
                true_rate: rate(&pos, t),
                achieved_false_rate: fr,
            });
        }
    }
    let above_max = neg[neg.len() - 1].next_up();
    Ok(OperatingPoint {
        false_rate_target: target,
        threshold: above_max,
        true_rate: rate(&pos, above_max),
        achieved_false_rate: 0.0,
    })
}

/// Full sweep over unique negative-score thresholds plus the stricter
/// above-the-top point, ascending in false rate.
pub fn sweep_curve(positive: &[f64], negative: &[f64]) -> Result<Vec<CurvePoint>> {
    if negative.is_empty() {
        return Err(Error::Protocol("curve needs negative scores".into()));
    }
    let mut pos = positive.to_vec();
    pos.sort_by(f64::total_cmp);
    let mut neg = negative.to_vec();
    neg.sort_by(f64::total_cmp);
    let mut candidates: Vec<f64> = neg.clone();
    candidates.dedup();
    candidates.push(neg[neg.len() - 1].next_up());
    let mut curve: Vec<CurvePoint> = candidates
        .into_iter()
        .map(|t| CurvePoint {
            false_rate: count_at_or_above(&neg, t) as f64 / neg.len() as f64,
            true_rate: if pos.is_empty() {
                0.0
            } else {
                count_at_or_above(&pos, t) as f64 / pos.len() as f64
            },
        })
        .collect();
    curve.reverse();
    Ok(curve)
}

fn fetch<'a>(
    store: &'a FeatureStore,
    sample_id: &str,
    version: &str,
) -> Result<&'a crate::store::FeatureRecord> {
    store.get(sample_id, version).ok_or_else(|| Error::MissingRecord {
        sample_id: sample_id.to_string(),
        version: version.to_string(),
    })
}

fn to_f64(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| x as f64).collect()
}

/// Similarity of two embeddings that may come from models of different
/// widths: the longer is cut to the shorter before measuring.
fn cross_width_similarity(a: &[f64], b: &[f64], distance: Distance) -> Result<f64> {
    let shared = a.len().min(b.len());
    if shared == 0 {
        return Err(Error::BadTruncation { target: 0, dim: a.len().max(b.len()) });
    }
    Ok(distance.similarity(distance.between(&a[..shared], &b[..shared])?))
}

/// 1:1 verification. Pair side `a` is embedded by the query model, side `b`
/// by the reference model; operating points are taken at each false-accept
/// target.
pub fn verify_1v1(
    query_store: &FeatureStore,
    query_version: &str,
    ref_store: &FeatureStore,
    ref_version: &str,
    pairs: &[VerifyPair],
    distance: Distance,
    far_targets: &[f64],
) -> Result<EvalReport> {
    if pairs.is_empty() {
        return Err(Error::Protocol("no verification pairs".into()));
    }
    let mut genuine = Vec::new();
    let mut impostor = Vec::new();
    for p in pairs {
        let a = to_f64(&fetch(query_store, &p.a, query_version)?.embedding);
        let b = to_f64(&fetch(ref_store, &p.b, ref_version)?.embedding);
        let s = cross_width_similarity(&a, &b, distance)?;
        if p.genuine {
            genuine.push(s);
        } else {
            impostor.push(s);
        }
    }
    let operating_points = far_targets
        .iter()
        .map(|&t| true_rate_at_false_rate(&genuine, &impostor, t))
        .collect::<Result<Vec<_>>>()?;
    let curve = sweep_curve(&genuine, &impostor)?;
    Ok(EvalReport {
        protocol: "verify-1v1".into(),
        query_version: query_version.into(),
        gallery_version: ref_version.into(),
        distance,
        num_positive: genuine.len(),
        num_negative: impostor.len(),
        operating_points,
        curve,
        rank_rates: Vec::new(),
        criterion_verdict: None,
        update_gain: None,
    })
}

/// Open-set 1:N search. Queries whose class has a prototype are the
/// positives (they must hit their own class at rank 1 and clear the
/// threshold); queries without one supply the false-positive scores.
/// `ranks` adds closed-set rank-k rates over the in-gallery queries.
pub fn search_1vn(
    query_store: &FeatureStore,
    query_version: &str,
    query_ids: &[String],
    gallery: &Gallery,
    fpir_targets: &[f64],
    ranks: &[usize],
) -> Result<EvalReport> {
    if query_ids.is_empty() {
        return Err(Error::Protocol("no search queries".into()));
    }
    let distance = gallery.distance();
    let mut known_top_scores = Vec::new(); // rank-1-correct known queries
    let mut known_miss_scores = Vec::new(); // known queries whose top hit is wrong
    let mut unknown_top_scores = Vec::new();
    let mut rank_hits = vec![0usize; ranks.len()];
    let mut num_known = 0usize;

    for id in query_ids {
        let rec = fetch(query_store, id, query_version)?;
        let q = to_f64(&rec.embedding);
        let mut dists = gallery.distances(&q)?;
        // ascending distance, class id breaking exact ties
        dists.sort_by(|x, y| x.1.total_cmp(&y.1).then(x.0.cmp(&y.0)));
        let (top_class, top_d) = dists[0];
        let top_sim = distance.similarity(top_d);
        if gallery.contains(rec.class_id) {
            num_known += 1;
            if top_class == rec.class_id {
                known_top_scores.push(top_sim);
            } else {
                known_miss_scores.push(top_sim);
            }
            let true_pos = dists.iter().position(|&(c, _)| c == rec.class_id).unwrap();
            for (slot, &r) in rank_hits.iter_mut().zip(ranks) {
                if true_pos < r {
                    *slot += 1;
                }
            }
        } else {
            unknown_top_scores.push(top_sim);
        }
    }

    let mut operating_points = Vec::new();
    let mut curve = Vec::new();
    if !fpir_targets.is_empty() {
        if unknown_top_scores.is_empty() || num_known == 0 {
            return Err(Error::Protocol(
                "open-set operating points need both known and unknown queries".into(),
            ));
        }
        // a known query counts as identified only if its top hit is correct
        // AND accepted, so misses dilute the rate regardless of threshold
        for &t in fpir_targets {
            let op = true_rate_at_false_rate(&known_top_scores, &unknown_top_scores, t)?;
            operating_points.push(OperatingPoint {
                false_rate_target: op.false_rate_target,
                threshold: op.threshold,
                true_rate: op.true_rate * known_top_scores.len() as f64 / num_known as f64,
                achieved_false_rate: op.achieved_false_rate,
            });
        }
        curve = sweep_curve(&known_top_scores, &unknown_top_scores)?
            .into_iter()
            .map(|p| CurvePoint {
                false_rate: p.false_rate,
                true_rate: p.true_rate * known_top_scores.len() as f64 / num_known as f64,
            })
            .collect();
    }
    let rank_rates = ranks
        .iter()
        .zip(&rank_hits)
        .map(|(&rank, &hits)| {
            if num_known == 0 {
                return Err(Error::Protocol("rank rates need in-gallery queries".into()));
            }
            Ok(RankRate { rank, rate: hits as f64 / num_known as f64 })
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(EvalReport {
        protocol: "search-1vn".into(),
        query_version: query_version.into(),
        gallery_version: gallery_version_label(gallery),
        distance,
        num_positive: num_known,
        num_negative: unknown_top_scores.len(),
        operating_points,
        curve,
        rank_rates,
        criterion_verdict: None,
        update_gain: None,
    })
}

/// Version tag summarizing a gallery's prototype sources ("old", or
/// "old+new" for a partially re-indexed gallery).
fn gallery_version_label(gallery: &Gallery) -> String {
    let mut versions = BTreeSet::new();
    for class in gallery.class_ids() {
        versions.insert(gallery.prototype(class).unwrap().source_version.clone());
    }
    versions.into_iter().collect::<Vec<_>>().join("+")
}

/// Did the cross-model pairing beat the old model's self-pairing?
/// Compatibility demands a strict improvement.
pub fn empirical_criterion(new_old: f64, old_old: f64) -> bool {
    new_old > old_old
}

/// Gain of an update relative to what a from-scratch reference achieves:
/// (new_old - old_old) / (paragon - old_old).
pub fn update_gain(new_old: f64, old_old: f64, paragon: f64) -> Result<f64> {
    if !empirical_criterion(new_old, old_old) {
        return Err(Error::CriterionUnsatisfied { new_old, old_old });
    }
    if paragon <= old_old {
        return Err(Error::DegenerateGainDenominator { paragon, old_old });
    }
    Ok((new_old - old_old) / (paragon - old_old))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrictViolation {
    pub sample_a: String,
    pub sample_b: String,
    pub same_class: bool,
    pub cross_distance: f64,
    pub old_distance: f64,
}

/// Outcome of the exhaustive pairwise-distance compatibility check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrictCriterionOutcome {
    pub ordered_pairs: usize,
    pub same_class_violations: usize,
    pub cross_class_violations: usize,
    /// At most the first 16 violations, for inspection.
    pub examples: Vec<StrictViolation>,
    pub satisfied: bool,
}

/// Checks, over every ordered pair of the given samples (self-pairs
/// included), that swapping in the new model's query-side embedding never
/// pushes same-class pairs further apart nor pulls different-class pairs
/// closer than the old model had them.
pub fn check_strict_criterion(
    new_store: &FeatureStore,
    new_version: &str,
    old_store: &FeatureStore,
    old_version: &str,
    sample_ids: &[String],
    distance: Distance,
) -> Result<StrictCriterionOutcome> {
    if sample_ids.is_empty() {
        return Err(Error::Protocol("strict criterion needs samples".into()));
    }
    let mut news = Vec::with_capacity(sample_ids.len());
    let mut olds = Vec::with_capacity(sample_ids.len());
    let mut classes = Vec::with_capacity(sample_ids.len());
    for id in sample_ids {
        let n = fetch(new_store, id, new_version)?;
        let o = fetch(old_store, id, old_version)?;
        news.push(to_f64(&n.embedding));
        olds.push(to_f64(&o.embedding));
        classes.push(o.class_id);
    }
    let mut same_violations = 0usize;
    let mut cross_violations = 0usize;
    let mut examples = Vec::new();
    let mut ordered_pairs = 0usize;
    for i in 0..sample_ids.len() {
        for j in 0..sample_ids.len() {
            ordered_pairs += 1;
            let shared = news[i].len().min(olds[j].len());
            let cross = distance.between(&news[i][..shared], &olds[j][..shared])?;
            let old = distance.between(&olds[i][..shared.min(olds[i].len())], &olds[j][..shared.min(olds[j].len())])?;
            let same = classes[i] == classes[j];
            let violated = if same { cross > old } else { cross < old };
            if violated {
                if same {
                    same_violations += 1;
                } else {
                    cross_violations += 1;
                }
                if examples.len() < 16 {
                    examples.push(StrictViolation {
                        sample_a: sample_ids[i].clone(),
                        sample_b: sample_ids[j].clone(),
                        same_class: same,
                        cross_distance: cross,
                        old_distance: old,
                    });
                }
            }
        }
    }
    Ok(StrictCriterionOutcome {
        ordered_pairs,
        same_class_violations: same_violations,
        cross_class_violations: cross_violations,
        examples,
        satisfied: same_violations == 0 && cross_violations == 0,
    })
}

/// Splits identities into (kept-in-gallery, held-out) with the held-out
/// share chosen by a seeded shuffle; both halves come back sorted.
pub fn choose_held_out_classes(
    class_ids: &[i64],
    held_out_fraction: f64,
    seed: u64,
) -> Result<(Vec<i64>, Vec<i64>)> {
    if !(0.0..=1.0).contains(&held_out_fraction) || !held_out_fraction.is_finite() {
        return Err(Error::BadFraction(held_out_fraction));
    }
    let mut order: Vec<i64> = class_ids.to_vec();
    order.sort_unstable();
    order.dedup();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let take = (held_out_fraction * order.len() as f64).ceil() as usize;
    let mut held: Vec<i64> = order.drain(..take).collect();
    held.sort_unstable();
    order.sort_unstable();
    Ok((order, held))
}

/// Deterministic trial list: up to `genuine_per_class` same-class pairs per
/// identity, and `impostors_per_genuine` cross-class pairs per genuine one.
pub fn build_verification_pairs(
    items: &[(String, i64)],
    genuine_per_class: usize,
    impostors_per_genuine: usize,
    seed: u64,
) -> Result<Vec<VerifyPair>> {
    if genuine_per_class == 0 || impostors_per_genuine == 0 {
        return Err(Error::Protocol("pair budgets must be positive".into()));
    }
    let mut by_class: std::collections::BTreeMap<i64, Vec<&str>> = Default::default();
    for (id, class) in items {
        by_class.entry(*class).or_default().push(id);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pairs = Vec::new();
    for members in by_class.values() {
        let mut all: Vec<(usize, usize)> = Vec::new();
        for i in 0..members.len() {
            for j in (i + 1)..members.len() {
                all.push((i, j));
            }
        }
        all.shuffle(&mut rng);
        for &(i, j) in all.iter().take(genuine_per_class) {
            pairs.push(VerifyPair {
                a: members[i].to_string(),
                b: members[j].to_string(),
                genuine: true,
            });
        }
    }
    let n_genuine = pairs.len();
    if n_genuine == 0 {
        return Err(Error::Protocol("no class has two samples to pair".into()));
    }
    let mut impostors = 0usize;
    let target = n_genuine * impostors_per_genuine;
    let mut guard = 0usize;
    while impostors < target {
        guard += 1;
        if guard > target * 100 {
            return Err(Error::Protocol("cannot draw enough cross-class pairs".into()));
        }
        let x = &items[rng.gen_range(0..items.len())];
        let y = &items[rng.gen_range(0..items.len())];
        if x.1 == y.1 {
            continue;
        }
        pairs.push(VerifyPair { a: x.0.clone(), b: y.0.clone(), genuine: false });
        impostors += 1;
    }
    Ok(pairs)
}

/// Spearman rank correlation with averaged ranks on ties.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() {
        return Err(Error::ShapeMismatch {
            context: "spearman inputs",
            expected: format!("{}", xs.len()),
            actual: format!("{}", ys.len()),
        });
    }
    if xs.len() < 2 {
        return Err(Error::Protocol("spearman needs at least two points".into()));
    }
    let rx = average_ranks(xs);
    let ry = average_ranks(ys);
    let n = rx.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        cov += (a - mx) * (b - my);
        vx += (a - mx) * (a - mx);
        vy += (b - my) * (b - my);
    }
    if vx <= 0.0 || vy <= 0.0 {
        return Err(Error::Protocol("spearman undefined for constant inputs".into()));
    }
    Ok(cov / (vx.sqrt() * vy.sqrt()))
}

fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = avg;
        }
        i = j + 1;
    }
    ranks
}
