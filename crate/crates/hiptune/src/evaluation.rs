//! Biometric metrics (ACER / AUC / EER / ACC with a full threshold sweep),
//! the four protocol splits, comparator runs and report formatting.
//!
//! Scores are fake-probabilities; thresholds operate on the liveness score
//! `1 - p_fake` (predict live when the liveness score clears the threshold),
//! so FAR is nonincreasing as the threshold rises. AUC treats fake as the
//! positive class with ties counted half. EER is found by linear
//! interpolation between the two sweep thresholds bracketing the FAR/FRR
//! crossing.

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{generate_dataset, mix_seed, DatasetConfig};
use crate::dpi::hiptune_score;
use crate::encoders::{
    class_probs_plain, coop_class_weights, encode_image, patch_embed, template_class_weights,
};
use crate::error::{Error, Result};
use crate::manifest::Manifest;
use crate::math::Tensor;
use crate::model::{Model, ModelConfig, Tape};
use crate::parallel::par_map;
use crate::taxonomy::build_taxonomy;
use crate::training::{
    pretrain_encoder, train_coop, train_stage1, train_stage2, LoadedData, LossConfig,
};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    /// Liveness-score threshold.
    pub threshold: f64,
    pub far: f64,
    pub frr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub acer: f64,
    pub auc: f64,
    pub eer: f64,
    pub acc: f64,
    /// Liveness threshold at the FAR/FRR crossing.
    pub eer_threshold: f64,
    /// Liveness threshold ACER and ACC were computed at.
    pub policy_threshold: f64,
    pub threshold_policy: String,
    pub roc: Vec<RocPoint>,
    pub n_live: usize,
    pub n_fake: usize,
}

/// Threshold policy for ACER/ACC: a fixed liveness threshold (default 0.5)
/// or the EER threshold of a held-out dev set.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ThresholdPolicy {
    Fixed(f64),
    DevEer,
}

impl Default for ThresholdPolicy {
    fn default() -> Self {
        ThresholdPolicy::Fixed(0.5)
    }
}

/// FAR/FRR at one liveness threshold by direct counting.
fn far_frr_at(scores: &[f64], is_live: &[bool], threshold: f64) -> (f64, f64) {
    let mut fa = 0usize;
    let mut fr = 0usize;
    let mut n_fake = 0usize;
    let mut n_live = 0usize;
    for (s, &live) in scores.iter().zip(is_live) {
        let liveness = 1.0 - s;
        if live {
            n_live += 1;
            if liveness < threshold {
                fr += 1;
            }
        } else {
            n_fake += 1;
            if liveness >= threshold {
                fa += 1;
            }
        }
    }
    (fa as f64 / n_fake as f64, fr as f64 / n_live as f64)
}

/// Full metric computation from fake-probability scores.
pub fn compute_metrics(
    scores: &[f64],
    is_live: &[bool],
    policy: ThresholdPolicy,
) -> Result<MetricsReport> {
    if scores.len() != is_live.len() || scores.is_empty() {
        return Err(Error::Metric(
            "scores and labels must be equal-length and non-empty".into(),
        ));
    }
    let n_live = is_live.iter().filter(|&&l| l).count();
    let n_fake = scores.len() - n_live;
    if n_live == 0 || n_fake == 0 {
        return Err(Error::Metric(
            "both classes must be present to compute error rates".into(),
        ));
    }

    // Threshold sweep over the distinct liveness values plus a sentinel
    // above the maximum (reject-everything end).
    let mut thresholds: Vec<f64> = scores.iter().map(|s| 1.0 - s).collect();
    thresholds.sort_by(|a, b| a.partial_cmp(b).unwrap());
    thresholds.dedup();
    let top = thresholds.last().unwrap() + 1.0;
    thresholds.push(top);

    let roc: Vec<RocPoint> = thresholds
        .iter()
        .map(|&t| {
            let (far, frr) = far_frr_at(scores, is_live, t);
            RocPoint { threshold: t, far, frr }
        })
        .collect();

    // EER: first sign change of FAR - FRR along the sweep, linearly
    // interpolated between the bracketing thresholds.
    let (eer, eer_threshold) = interpolate_eer(&roc);

    let policy_threshold = match policy {
        ThresholdPolicy::Fixed(t) => t,
        ThresholdPolicy::DevEer => eer_threshold,
    };
    let (far, frr) = far_frr_at(scores, is_live, policy_threshold);
    let acer = 0.5 * (far + frr);
    let correct = scores
        .iter()
        .zip(is_live)
        .filter(|(s, &live)| {
            let predicted_live = 1.0 - **s >= policy_threshold;
            predicted_live == live
        })
        .count();
    let acc = correct as f64 / scores.len() as f64;

    Ok(MetricsReport {
        acer,
        auc: rank_auc(scores, is_live),
        eer,
        acc,
        eer_threshold,
        policy_threshold,
        threshold_policy: match policy {
            ThresholdPolicy::Fixed(t) => format!("fixed-{t}"),
            ThresholdPolicy::DevEer => "dev-eer".into(),
        },
        roc,
        n_live,
        n_fake,
    })
}

fn interpolate_eer(roc: &[RocPoint]) -> (f64, f64) {
    let g = |p: &RocPoint| p.far - p.frr;
    if g(&roc[0]) <= 0.0 {
        // Sweep starts at FAR = 1, FRR = 0, so this only guards degenerate
        // callers; report the crossing-free point directly.
        return (roc[0].far.max(roc[0].frr), roc[0].threshold);
    }
    for w in roc.windows(2) {
        let (a, b) = (&w[0], &w[1]);
        if g(a) >= 0.0 && g(b) <= 0.0 {
            let denom = g(a) - g(b);
            let alpha = if denom == 0.0 { 0.0 } else { g(a) / denom };
            let eer = a.far + alpha * (b.far - a.far);
            let t = a.threshold + alpha * (b.threshold - a.threshold);
            return (eer, t);
        }
    }
    let last = roc.last().unwrap();
    (last.far.max(last.frr), last.threshold)
}

/// Rank-statistic AUC with fake as the positive class, ties counted half.
fn rank_auc(scores: &[f64], is_live: &[bool]) -> f64 {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap());
    // Average ranks over tied score groups (1-based ranks).
    let mut ranks = vec![0.0; scores.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg = (i + j + 2) as f64 / 2.0;
        for k in i..=j {
            ranks[order[k]] = avg;
        }
        i = j + 1;
    }
    let n_fake = is_live.iter().filter(|&&l| !l).count() as f64;
    let n_live = scores.len() as f64 - n_fake;
    let fake_rank_sum: f64 = ranks
        .iter()
        .zip(is_live)
        .filter(|(_, &live)| !live)
        .map(|(r, _)| r)
        .sum();
    (fake_rank_sum - n_fake * (n_fake + 1.0) / 2.0) / (n_fake * n_live)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ProtocolId {
    P1,
    P2,
    P31,
    P32,
}

impl fmt::Display for ProtocolId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ProtocolId::P1 => "p1",
            ProtocolId::P2 => "p2",
            ProtocolId::P31 => "p3.1",
            ProtocolId::P32 => "p3.2",
        };
        write!(f, "{s}")
    }
}

impl FromStr for ProtocolId {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "p1" => Ok(ProtocolId::P1),
            "p2" => Ok(ProtocolId::P2),
            "p3.1" => Ok(ProtocolId::P31),
            "p3.2" => Ok(ProtocolId::P32),
            other => Err(Error::Config(format!("unknown protocol {other}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProtocolSplit {
    pub protocol: ProtocolId,
    pub seed: u64,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl ProtocolSplit {
    /// Disjointness and range checks.
    pub fn validate(&self, manifest: &Manifest) -> Result<()> {
        let mut seen = BTreeSet::new();
        for (name, set) in [("train", &self.train), ("val", &self.val), ("test", &self.test)] {
            for &i in set {
                if i >= manifest.records.len() {
                    return Err(Error::Protocol(format!(
                        "{name} index {i} outside manifest"
                    )));
                }
                if !seen.insert(i) {
                    return Err(Error::Protocol(format!(
                        "record {i} appears in two splits"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Config(format!("split serialization: {e}")))?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<ProtocolSplit> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("split parse: {e}")))
    }
}

/// Level-2 category names on the "easy" side of the P3 protocols.
const P3_EASY: [&str; 3] = ["2D", "manipulation", "adversarial"];
/// Level-2 category names on the "hard" side.
const P3_HARD: [&str; 2] = ["3D", "generation"];

/// Build a protocol split over a manifest.
///
/// P1: identity-disjoint 60/20/20. P2: leaf methods partitioned 50/20/30
/// (floor for val, remainder to test), lives split by identity
/// proportionally. P3.1: easy-category fakes 70/30 into train/val, all
/// hard-category fakes in test (P3.2 reverses the direction); live records
/// are pooled 49/21/30 so every split keeps both classes.
pub fn make_protocol_split(
    manifest: &Manifest,
    protocol: ProtocolId,
    seed: u64,
) -> Result<ProtocolSplit> {
    if manifest.records.is_empty() {
        return Err(Error::Protocol("empty manifest".into()));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(mix_seed(seed, &[41, protocol as u64]));
    let split = match protocol {
        ProtocolId::P1 => split_p1(manifest, &mut rng, seed)?,
        ProtocolId::P2 => split_p2(manifest, &mut rng, seed)?,
        ProtocolId::P31 => split_p3(manifest, &mut rng, seed, false)?,
        ProtocolId::P32 => split_p3(manifest, &mut rng, seed, true)?,
    };
    split.validate(manifest)?;
    Ok(split)
}

fn split_p1(manifest: &Manifest, rng: &mut ChaCha12Rng, seed: u64) -> Result<ProtocolSplit> {
    let mut identities: Vec<u32> = manifest
        .records
        .iter()
        .map(|r| r.identity_id)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    if identities.len() < 3 {
        return Err(Error::Protocol(format!(
            "identity-disjoint split needs at least 3 identities, got {}",
            identities.len()
        )));
    }
    identities.shuffle(rng);
    let n = identities.len();
    let n_train = (0.6 * n as f64).floor() as usize;
    let n_val = (0.2 * n as f64).floor().max(1.0) as usize;
    let train_ids: BTreeSet<u32> = identities[..n_train].iter().copied().collect();
    let val_ids: BTreeSet<u32> = identities[n_train..n_train + n_val].iter().copied().collect();

    let mut split = ProtocolSplit {
        protocol: ProtocolId::P1,
        seed,
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    for (i, rec) in manifest.records.iter().enumerate() {
        if train_ids.contains(&rec.identity_id) {
            split.train.push(i);
        } else if val_ids.contains(&rec.identity_id) {
            split.val.push(i);
        } else {
            split.test.push(i);
        }
    }
    Ok(split)
}

fn split_p2(manifest: &Manifest, rng: &mut ChaCha12Rng, seed: u64) -> Result<ProtocolSplit> {
    let methods: BTreeSet<u16> = manifest.records.iter().filter_map(|r| r.method_id).collect();
    if methods.len() < 3 {
        return Err(Error::Protocol(
            "method-disjoint split needs at least 3 leaf methods".into(),
        ));
    }
    let mut methods: Vec<u16> = methods.into_iter().collect();
    methods.shuffle(rng);
    let m = methods.len();
    let n_train = (0.5 * m as f64).floor() as usize;
    let n_val = (0.2 * m as f64).floor() as usize;
    let train_m: BTreeSet<u16> = methods[..n_train].iter().copied().collect();
    let val_m: BTreeSet<u16> = methods[n_train..n_train + n_val].iter().copied().collect();

    // Lives split by identity, proportionally to the method shares.
    let mut identities: Vec<u32> = manifest
        .records
        .iter()
        .map(|r| r.identity_id)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    identities.shuffle(rng);
    let i = identities.len();
    let li_train = (0.5 * i as f64).floor() as usize;
    let li_val = (0.2 * i as f64).floor() as usize;
    let train_ids: BTreeSet<u32> = identities[..li_train].iter().copied().collect();
    let val_ids: BTreeSet<u32> = identities[li_train..li_train + li_val].iter().copied().collect();

    let mut split = ProtocolSplit {
        protocol: ProtocolId::P2,
        seed,
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    for (i, rec) in manifest.records.iter().enumerate() {
        match rec.method_id {
            Some(m) => {
                if train_m.contains(&m) {
                    split.train.push(i);
                } else if val_m.contains(&m) {
                    split.val.push(i);
                } else {
                    split.test.push(i);
                }
            }
            None => {
                if train_ids.contains(&rec.identity_id) {
                    split.train.push(i);
                } else if val_ids.contains(&rec.identity_id) {
                    split.val.push(i);
                } else {
                    split.test.push(i);
                }
            }
        }
    }
    Ok(split)
}

fn split_p3(
    manifest: &Manifest,
    rng: &mut ChaCha12Rng,
    seed: u64,
    reversed: bool,
) -> Result<ProtocolSplit> {
    let taxonomy_names = |names: &[&str]| -> Vec<String> {
        names.iter().map(|s| s.to_string()).collect()
    };
    let (easy, hard) = if reversed {
        (taxonomy_names(&P3_HARD), taxonomy_names(&P3_EASY))
    } else {
        (taxonomy_names(&P3_EASY), taxonomy_names(&P3_HARD))
    };

    // Resolve level-2 node ids by name from the records themselves: the
    // manifest must cover every named category.
    let tax = build_taxonomy();
    let name_of = |l2: u16| tax.node(l2).map(|n| n.name.clone());
    let mut present: BTreeSet<String> = BTreeSet::new();
    for rec in &manifest.records {
        if let Some((_, l2, _)) = rec.path {
            present.insert(name_of(l2)?);
        }
    }
    for cat in easy.iter().chain(hard.iter()) {
        if !present.contains(cat) {
            return Err(Error::Protocol(format!(
                "manifest has no samples in category {cat}"
            )));
        }
    }

    let protocol = if reversed { ProtocolId::P32 } else { ProtocolId::P31 };
    let mut split = ProtocolSplit {
        protocol,
        seed,
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };

    // Easy fakes: 70/30 train/val stratified per method.
    let methods: BTreeSet<u16> = manifest.records.iter().filter_map(|r| r.method_id).collect();
    for m in methods {
        let mut idxs: Vec<usize> = manifest
            .records
            .iter()
            .enumerate()
            .filter(|(_, r)| r.method_id == Some(m))
            .map(|(i, _)| i)
            .collect();
        let l2 = manifest.records[idxs[0]].path.unwrap().1;
        let is_easy = easy.contains(&name_of(l2)?);
        if is_easy {
            idxs.shuffle(rng);
            let n_train = (0.7 * idxs.len() as f64).floor() as usize;
            split.train.extend_from_slice(&idxs[..n_train]);
            split.val.extend_from_slice(&idxs[n_train..]);
        } else {
            split.test.extend(idxs);
        }
    }

    // Lives pooled 49/21/30 so train keeps the 70/30 shape and test has
    // genuine samples to measure FRR against.
    let mut lives: Vec<usize> = manifest
        .records
        .iter()
        .enumerate()
        .filter(|(_, r)| r.is_live)
        .map(|(i, _)| i)
        .collect();
    lives.shuffle(rng);
    let n = lives.len();
    let n_train = (0.49 * n as f64).floor() as usize;
    let n_val = (0.21 * n as f64).floor() as usize;
    split.train.extend_from_slice(&lives[..n_train]);
    split.val.extend_from_slice(&lives[n_train..n_train + n_val]);
    split.test.extend_from_slice(&lives[n_train + n_val..]);

    split.train.sort_unstable();
    split.val.sort_unstable();
    split.test.sort_unstable();
    Ok(split)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Comparator {
    Hiptune,
    ClipV,
    CoopUnified,
    CoopSpecific,
}

impl fmt::Display for Comparator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Comparator::Hiptune => "hiptune",
            Comparator::ClipV => "clip-v",
            Comparator::CoopUnified => "coop-unified",
            Comparator::CoopSpecific => "coop-specific",
        };
        write!(f, "{s}")
    }
}

impl FromStr for Comparator {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hiptune" => Ok(Comparator::Hiptune),
            "clip-v" => Ok(Comparator::ClipV),
            "coop-unified" => Ok(Comparator::CoopUnified),
            "coop-specific" => Ok(Comparator::CoopSpecific),
            other => Err(Error::Config(format!("unknown comparator {other}"))),
        }
    }
}

/// Fake-probability scores for a comparator over the given records, plus
/// the routed-path hit count for the hierarchical model.
pub struct ScoreSet {
    pub scores: Vec<f64>,
    pub is_live: Vec<bool>,
    /// Fraction of samples routed exactly to their labeled taxonomy path
    /// (hierarchical model only).
    pub routing_accuracy: Option<f64>,
}

pub fn score_comparator(
    model: &Model,
    comparator: Comparator,
    data: &LoadedData,
    indices: &[usize],
) -> Result<ScoreSet> {
    if indices.is_empty() {
        return Err(Error::Metric("no records to score".into()));
    }
    let is_live: Vec<bool> = indices.iter().map(|&i| data.record(i).is_live).collect();
    match comparator {
        Comparator::Hiptune => {
            let results = par_map(indices, |&idx| -> Result<(f64, bool)> {
                let rec = data.record(idx);
                let (_, p_fake, dec) = hiptune_score(model, &data.images[idx])?;
                let want: Vec<u16> = match rec.path {
                    None => vec![model.taxonomy.live_id()],
                    Some((a, b, c)) => vec![a, b, c],
                };
                Ok((p_fake, dec.node_path == want))
            });
            let mut scores = Vec::with_capacity(indices.len());
            let mut hits = 0usize;
            for r in results {
                let (s, hit) = r?;
                scores.push(s);
                hits += hit as usize;
            }
            Ok(ScoreSet {
                scores,
                is_live,
                routing_accuracy: Some(hits as f64 / indices.len() as f64),
            })
        }
        _ => {
            // Class weights are sample-independent: compute them once.
            let mut tape = Tape::new();
            let weights = match comparator {
                Comparator::ClipV => template_class_weights(&mut tape, &model.encoder)?,
                Comparator::CoopUnified => {
                    coop_class_weights(&mut tape, &model.encoder, &model.coop_unified, "coop_unified")?
                }
                Comparator::CoopSpecific => coop_class_weights(
                    &mut tape,
                    &model.encoder,
                    &model.coop_specific,
                    "coop_specific",
                )?,
                Comparator::Hiptune => unreachable!(),
            };
            let ws: Vec<Tensor> = weights
                .iter()
                .map(|&w| tape.graph.value(w).clone())
                .collect();
            let results = par_map(indices, |&idx| -> Result<f64> {
                let mut tape = Tape::new();
                let seq = patch_embed(&mut tape, &model.encoder, &data.images[idx])?;
                let f = encode_image(&mut tape, &model.encoder, &seq, None)?;
                let probs = class_probs_plain(
                    tape.graph.value(f),
                    &ws,
                    model.cfg.encoder.temperature,
                )?;
                Ok(probs[1])
            });
            let scores = results.into_iter().collect::<Result<Vec<f64>>>()?;
            Ok(ScoreSet {
                scores,
                is_live,
                routing_accuracy: None,
            })
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ComparatorReport {
    pub comparator: Comparator,
    pub metrics: MetricsReport,
    pub routing_accuracy: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ProtocolReport {
    pub protocol: ProtocolId,
    pub seed: u64,
    pub reports: Vec<ComparatorReport>,
}

#[derive(Clone, Debug)]
pub struct ProtocolRunConfig {
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub comparators: Vec<Comparator>,
    pub threshold_policy: ThresholdPolicy,
}

impl Default for ProtocolRunConfig {
    fn default() -> Self {
        ProtocolRunConfig {
            dataset: DatasetConfig::default(),
            model: ModelConfig::default(),
            loss: LossConfig::default(),
            comparators: vec![Comparator::Hiptune, Comparator::CoopUnified],
            threshold_policy: ThresholdPolicy::default(),
        }
    }
}

/// Evaluate a trained comparator on a split, resolving the dev-EER policy
/// against the validation indices.
pub fn evaluate_comparator(
    model: &Model,
    comparator: Comparator,
    data: &LoadedData,
    split: &ProtocolSplit,
    policy: ThresholdPolicy,
) -> Result<ComparatorReport> {
    let resolved = match policy {
        ThresholdPolicy::Fixed(t) => ThresholdPolicy::Fixed(t),
        ThresholdPolicy::DevEer => {
            let dev = score_comparator(model, comparator, data, &split.val)?;
            let dev_metrics =
                compute_metrics(&dev.scores, &dev.is_live, ThresholdPolicy::Fixed(0.5))?;
            ThresholdPolicy::Fixed(dev_metrics.eer_threshold)
        }
    };
    let test = score_comparator(model, comparator, data, &split.test)?;
    let mut metrics = compute_metrics(&test.scores, &test.is_live, resolved)?;
    if policy == ThresholdPolicy::DevEer {
        metrics.threshold_policy = "dev-eer".into();
    }
    Ok(ComparatorReport {
        comparator,
        metrics,
        routing_accuracy: test.routing_accuracy,
    })
}

/// End-to-end protocol run: generate data, split, pretrain the shared
/// encoder on the train split, train each requested comparator, evaluate on
/// the test split. Fully deterministic under (config, seed).
pub fn run_protocol(
    protocol: ProtocolId,
    cfg: &ProtocolRunConfig,
    seed: u64,
) -> Result<(ProtocolReport, Model, LoadedData, ProtocolSplit)> {
    let taxonomy = build_taxonomy();
    let mut dataset_cfg = cfg.dataset.clone();
    dataset_cfg.seed = mix_seed(seed, &[51]);
    let (manifest, store) = generate_dataset(&taxonomy, &dataset_cfg)?;
    let split = make_protocol_split(&manifest, protocol, seed)?;
    let data = LoadedData::new(manifest, &store);

    let mut model = Model::new(taxonomy, cfg.model.clone(), mix_seed(seed, &[52]))?;
    pretrain_encoder(&mut model, &data, &split.train, &cfg.loss, mix_seed(seed, &[53]))?;

    let mut reports = Vec::new();
    for &comparator in &cfg.comparators {
        train_comparator(&mut model, comparator, &data, &split, &cfg.loss, seed)?;
    }
    for &comparator in &cfg.comparators {
        reports.push(evaluate_comparator(
            &model,
            comparator,
            &data,
            &split,
            cfg.threshold_policy,
        )?);
    }
    Ok((
        ProtocolReport {
            protocol,
            seed,
            reports,
        },
        model,
        data,
        split,
    ))
}

fn train_comparator(
    model: &mut Model,
    comparator: Comparator,
    data: &LoadedData,
    split: &ProtocolSplit,
    loss: &LossConfig,
    seed: u64,
) -> Result<()> {
    match comparator {
        Comparator::Hiptune => {
            train_stage1(model, data, &split.train, loss, mix_seed(seed, &[54]))?;
            train_stage2(model, data, &split.train, loss, mix_seed(seed, &[55]))?;
        }
        Comparator::CoopUnified => {
            train_coop(model, false, data, &split.train, loss, mix_seed(seed, &[56]))?;
        }
        Comparator::CoopSpecific => {
            train_coop(model, true, data, &split.train, loss, mix_seed(seed, &[57]))?;
        }
        Comparator::ClipV => {}
    }
    Ok(())
}

/// Per-metric mean/stddev over a set of runs, one row per comparator.
#[derive(Clone, Debug, Serialize)]
pub struct AggregateRow {
    pub comparator: Comparator,
    pub mean: MetricsSummary,
    pub stddev: MetricsSummary,
    pub n_runs: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct MetricsSummary {
    pub acer: f64,
    pub auc: f64,
    pub eer: f64,
    pub acc: f64,
}

pub fn aggregate_reports(reports: &[ProtocolReport]) -> Vec<AggregateRow> {
    let mut comparators: Vec<Comparator> = Vec::new();
    for r in reports {
        for c in &r.reports {
            if !comparators.contains(&c.comparator) {
                comparators.push(c.comparator);
            }
        }
    }
    comparators
        .into_iter()
        .map(|comp| {
            let values: Vec<&MetricsReport> = reports
                .iter()
                .flat_map(|r| r.reports.iter())
                .filter(|c| c.comparator == comp)
                .map(|c| &c.metrics)
                .collect();
            let n = values.len() as f64;
            let mean = |f: &dyn Fn(&MetricsReport) -> f64| -> f64 {
                values.iter().map(|m| f(m)).sum::<f64>() / n
            };
            let std = |f: &dyn Fn(&MetricsReport) -> f64, mu: f64| -> f64 {
                (values.iter().map(|m| (f(m) - mu).powi(2)).sum::<f64>() / n).sqrt()
            };
            let mu = MetricsSummary {
                acer: mean(&|m| m.acer),
                auc: mean(&|m| m.auc),
                eer: mean(&|m| m.eer),
                acc: mean(&|m| m.acc),
            };
            let sd = MetricsSummary {
                acer: std(&|m| m.acer, mu.acer),
                auc: std(&|m| m.auc, mu.auc),
                eer: std(&|m| m.eer, mu.eer),
                acc: std(&|m| m.acc, mu.acc),
            };
            AggregateRow {
                comparator: comp,
                mean: mu,
                stddev: sd,
                n_runs: values.len(),
            }
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReportFormat {
    Text,
    Csv,
    Json,
}

impl FromStr for ReportFormat {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "text" => Ok(ReportFormat::Text),
            "csv" => Ok(ReportFormat::Csv),
            "json" => Ok(ReportFormat::Json),
            other => Err(Error::Config(format!("unknown report format {other}"))),
        }
    }
}

/// One row per comparator with the four metrics as percentages to two
/// decimals.
pub fn format_reports(reports: &[ComparatorReport], format: ReportFormat) -> Result<String> {
    match format {
        ReportFormat::Json => serde_json::to_string_pretty(reports)
            .map(|mut s| {
                s.push('\n');
                s
            })
            .map_err(|e| Error::Config(format!("report serialization: {e}"))),
        ReportFormat::Csv => {
            let mut out = String::from("comparator,acer,auc,eer,acc,routing_accuracy\n");
            for r in reports {
                out.push_str(&format!(
                    "{},{:.2},{:.2},{:.2},{:.2},{}\n",
                    r.comparator,
                    100.0 * r.metrics.acer,
                    100.0 * r.metrics.auc,
                    100.0 * r.metrics.eer,
                    100.0 * r.metrics.acc,
                    r.routing_accuracy
                        .map(|a| format!("{:.2}", 100.0 * a))
                        .unwrap_or_else(|| "-".into()),
                ));
            }
            Ok(out)
        }
        ReportFormat::Text => {
            let mut out = format!(
                "{:<16} {:>8} {:>8} {:>8} {:>8} {:>10}\n",
                "comparator", "acer%", "auc%", "eer%", "acc%", "routing%"
            );
            for r in reports {
                out.push_str(&format!(
                    "{:<16} {:>8.2} {:>8.2} {:>8.2} {:>8.2} {:>10}\n",
                    r.comparator.to_string(),
                    100.0 * r.metrics.acer,
                    100.0 * r.metrics.auc,
                    100.0 * r.metrics.eer,
                    100.0 * r.metrics.acc,
                    r.routing_accuracy
                        .map(|a| format!("{:.2}", 100.0 * a))
                        .unwrap_or_else(|| "-".into()),
                ));
            }
            Ok(out)
        }
    }
}
