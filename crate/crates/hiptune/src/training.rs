//! Loss functions and the optimization loops: the pretraining substitute
//! that gives the dual encoder class-relevant structure before freezing it,
//! stage 1 (supervised prompt training), stage 2 (gate and integration
//! training with frozen prompts), and the flat-context baseline trainer.
//!
//! Batches run one tape per sample in parallel; gradients merge in sample
//! order, so traces are bit-identical across thread counts.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::app::{RoutedLevel, RoutingDecision, RoutingTrace};
use crate::dataset::{mix_seed, SampleStore};
use crate::dpi::{forward_with_trace, hiptune_forward};
use crate::encoders::{
    class_probabilities, coop_baseline_probabilities, encode_image, patch_embed,
    template_class_weights,
};
use crate::error::{Error, Result};
use crate::manifest::{Manifest, ManifestRecord};
use crate::math::adam::{AdamConfig, AdamState};
use crate::math::graph::NodeId;
use crate::math::Tensor;
use crate::model::{merge_grads, Model, Tape};
use crate::parallel::par_map;
use crate::vptree::{select_supervised_path, PromptPath};

pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug)]
pub struct LossConfig {
    pub triplet_margin: f64,
    pub triplet_weight: f64,
    /// Weight of the auxiliary per-level routing cross-entropy (stage 2).
    pub routing_ce_weight: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    /// Pretraining-substitute epochs and learning rate (encoder warm-up).
    pub pretrain_epochs: usize,
    pub pretrain_lr: f64,
    /// Epochs for the flat-context baseline trainer.
    pub coop_epochs: usize,
    /// Keep prompt blocks trainable during stage 2.
    pub joint_finetune: bool,
    /// Repeat live records in each epoch until they reach about half the
    /// fake count, echoing training on (live, fake) pairs. Off: natural
    /// class frequencies.
    pub balance_live: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            triplet_margin: 0.3,
            triplet_weight: 1.0,
            routing_ce_weight: 1.0,
            learning_rate: 2e-2,
            batch_size: 32,
            stage1_epochs: 20,
            stage2_epochs: 40,
            pretrain_epochs: 8,
            pretrain_lr: 2e-3,
            coop_epochs: 30,
            joint_finetune: false,
            balance_live: true,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.triplet_margin < 0.0 {
            return Err(Error::Config("triplet margin must be >= 0".into()));
        }
        if self.learning_rate < 0.0 || self.pretrain_lr < 0.0 {
            return Err(Error::Config("learning rates must be >= 0".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        Ok(())
    }
}

/// One loss-trace record: `(step, stage, component, value)`.
#[derive(Clone, Debug, PartialEq)]
pub struct TraceRow {
    pub step: u64,
    pub stage: String,
    pub component: String,
    pub value: f64,
}

#[derive(Clone, Debug, Default)]
pub struct TrainReport {
    pub rows: Vec<TraceRow>,
    /// Mean total loss per epoch.
    pub epoch_means: Vec<f64>,
}

impl TrainReport {
    pub fn trace_text(&self) -> String {
        let mut out = String::new();
        for r in &self.rows {
            out.push_str(&format!(
                "{}\t{}\t{}\t{:.12e}\n",
                r.step, r.stage, r.component, r.value
            ));
        }
        out
    }
}

/// Dataset with images decoded to f64 tensors, indexed like the manifest.
pub struct LoadedData {
    pub manifest: Manifest,
    pub images: Vec<Tensor>,
}

impl LoadedData {
    pub fn new(manifest: Manifest, store: &SampleStore) -> LoadedData {
        let images = store.images.iter().map(|i| i.to_tensor()).collect();
        LoadedData { manifest, images }
    }

    pub fn record(&self, idx: usize) -> &ManifestRecord {
        &self.manifest.records[idx]
    }
}

/// Mean negative log-likelihood over a batch of probability rows.
/// Probabilities are clamped at 1e-12; labels must be 0 or 1.
pub fn cross_entropy_loss(probabilities: &[Vec<f64>], labels: &[u8]) -> Result<f64> {
    Ok(cross_entropy_with_grads(probabilities, labels)?.0)
}

/// Cross entropy plus its analytic gradient w.r.t. every probability row.
pub fn cross_entropy_with_grads(
    probabilities: &[Vec<f64>],
    labels: &[u8],
) -> Result<(f64, Vec<Vec<f64>>)> {
    if probabilities.len() != labels.len() || probabilities.is_empty() {
        return Err(Error::Contract(
            "probability and label batches must be equal-length and non-empty".into(),
        ));
    }
    let b = probabilities.len() as f64;
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(probabilities.len());
    for (row, &label) in probabilities.iter().zip(labels) {
        if label > 1 {
            return Err(Error::Label(format!("binary label expected, got {label}")));
        }
        let li = label as usize;
        if li >= row.len() {
            return Err(Error::Label(format!(
                "label {li} out of range for {} classes",
                row.len()
            )));
        }
        let p = row[li];
        let clamped = p.max(PROB_FLOOR);
        total -= clamped.ln();
        let mut g = vec![0.0; row.len()];
        if p > PROB_FLOOR {
            g[li] = -1.0 / (b * p);
        }
        grads.push(g);
    }
    Ok((total / b, grads))
}

#[derive(Clone, Debug)]
pub struct TripletOutcome {
    pub value: f64,
    /// d(loss)/d(embedding_i).
    pub grads: Vec<Tensor>,
    /// True when fewer than two classes were present (loss is 0).
    pub degenerate: bool,
    pub n_triples: usize,
}

/// Asymmetric triplet loss with squared Euclidean distances over all valid
/// (anchor, positive, negative) triples. Classes carry the asymmetric
/// semantics (all live samples share one class; each fake category is its
/// own class). The positive may coincide with the anchor, so singleton
/// classes still repel every other class by the margin.
pub fn asymmetric_triplet_loss(
    embeddings: &[Tensor],
    classes: &[u32],
    margin: f64,
) -> Result<TripletOutcome> {
    if embeddings.len() != classes.len() || embeddings.is_empty() {
        return Err(Error::Contract(
            "embedding and class batches must be equal-length and non-empty".into(),
        ));
    }
    let n = embeddings.len();
    let dim = embeddings[0].shape().to_vec();
    for e in embeddings {
        if e.shape() != dim.as_slice() {
            return Err(Error::shape(format!("{dim:?}"), e.shape_string()));
        }
    }
    let mut distinct: Vec<u32> = classes.to_vec();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.len() < 2 {
        return Ok(TripletOutcome {
            value: 0.0,
            grads: vec![Tensor::zeros(&dim); n],
            degenerate: true,
            n_triples: 0,
        });
    }

    let d2 = |a: usize, b: usize| -> f64 {
        embeddings[a]
            .data()
            .iter()
            .zip(embeddings[b].data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum()
    };

    let mut n_triples = 0usize;
    let mut active: Vec<(usize, usize, usize)> = Vec::new();
    let mut total = 0.0;
    for a in 0..n {
        for p in 0..n {
            if classes[p] != classes[a] {
                continue;
            }
            for neg in 0..n {
                if classes[neg] == classes[a] {
                    continue;
                }
                n_triples += 1;
                let h = margin + d2(a, p) - d2(a, neg);
                if h > 0.0 {
                    total += h;
                    active.push((a, p, neg));
                }
            }
        }
    }
    let scale = 1.0 / n_triples as f64;
    let mut grads = vec![Tensor::zeros(&dim); n];
    for (a, p, neg) in active {
        // d(h)/d(e): through d2(a, p) and -d2(a, neg).
        for i in 0..embeddings[0].len() {
            let ea = embeddings[a].data()[i];
            let ep = embeddings[p].data()[i];
            let en = embeddings[neg].data()[i];
            grads[a].data_mut()[i] += scale * (2.0 * (ea - ep) - 2.0 * (ea - en));
            grads[p].data_mut()[i] += scale * (-2.0 * (ea - ep));
            grads[neg].data_mut()[i] += scale * (2.0 * (ea - en));
        }
    }
    Ok(TripletOutcome {
        value: total * scale,
        grads,
        degenerate: false,
        n_triples,
    })
}

/// Stage-1 prompt separation: triplet over the per-node block means, each
/// node its own class. Returns the loss and gradients per block parameter.
pub fn prompt_tree_triplet(
    tree: &crate::vptree::PromptTree,
    margin: f64,
) -> Result<(f64, BTreeMap<String, Tensor>)> {
    let ids = tree.node_ids();
    let mut embeddings = Vec::with_capacity(ids.len());
    for id in &ids {
        let block = tree.block(*id)?;
        let (lp, d) = (block.shape()[0], block.shape()[1]);
        let mut mean = vec![0.0; d];
        for r in 0..lp {
            for c in 0..d {
                mean[c] += block.data()[r * d + c];
            }
        }
        for m in mean.iter_mut() {
            *m /= lp as f64;
        }
        embeddings.push(Tensor::from_vec(&[d], mean));
    }
    let classes: Vec<u32> = ids.iter().map(|id| *id as u32).collect();
    let out = asymmetric_triplet_loss(&embeddings, &classes, margin)?;
    let mut grads = BTreeMap::new();
    for (i, id) in ids.iter().enumerate() {
        let block = tree.block(*id)?;
        let (lp, d) = (block.shape()[0], block.shape()[1]);
        let mut g = Tensor::zeros(&[lp, d]);
        for r in 0..lp {
            for c in 0..d {
                g.data_mut()[r * d + c] = out.grads[i].data()[c] / lp as f64;
            }
        }
        grads.insert(crate::vptree::PromptTree::param_name(*id), g);
    }
    Ok((out.value, grads))
}

/// Attach a per-sample cross-entropy head to a probability node.
fn ce_node(tape: &mut Tape, probs: NodeId, label: usize) -> NodeId {
    let picked = tape.graph.pick(probs, label);
    let ln = tape.graph.ln_clamped(picked, PROB_FLOOR);
    tape.graph.neg(ln)
}

/// Synthetic routing trace for stage-1 supervised training: one-hot
/// distributions along the supervised path (uniform level-1 distribution
/// for an unpaired live sample, so the masked fake weights are even).
fn supervised_trace(tape: &mut Tape, model: &Model, path: &PromptPath) -> Result<RoutingTrace> {
    let taxonomy = &model.taxonomy;
    let live = taxonomy.live_id();
    if path.steps.len() == 1 {
        let candidates = taxonomy.level1_order();
        let n = candidates.len();
        let idx = candidates
            .iter()
            .position(|&c| c == live)
            .expect("live in level 1");
        let dist = tape.input(Tensor::filled(&[n], 1.0 / n as f64));
        return Ok(RoutingTrace {
            decision: RoutingDecision {
                indices: vec![idx],
                node_path: vec![live],
                distributions: vec![vec![1.0 / n as f64; n]],
                stopped_at_live: true,
            },
            levels: vec![RoutedLevel {
                candidates,
                dist,
                selected_index: idx,
            }],
        });
    }

    let mut levels = Vec::new();
    let mut indices = Vec::new();
    let mut distributions = Vec::new();
    let mut parent: Option<u16> = None;
    for (_, node) in &path.steps {
        let candidates = match parent {
            None => taxonomy.level1_order(),
            Some(p) => taxonomy.children(p),
        };
        let idx = candidates
            .iter()
            .position(|c| c == node)
            .ok_or_else(|| Error::Label(format!("node {node} not under {parent:?}")))?;
        let mut onehot = vec![0.0; candidates.len()];
        onehot[idx] = 1.0;
        let dist = tape.input(Tensor::from_vec(&[candidates.len()], onehot.clone()));
        levels.push(RoutedLevel {
            candidates,
            dist,
            selected_index: idx,
        });
        indices.push(idx);
        distributions.push(onehot);
        parent = Some(*node);
    }
    Ok(RoutingTrace {
        decision: RoutingDecision {
            indices,
            node_path: path.node_ids(),
            distributions,
            stopped_at_live: false,
        },
        levels,
    })
}

fn apply_grads(
    model: &mut Model,
    grads: &BTreeMap<String, Tensor>,
    adam: &mut BTreeMap<String, AdamState>,
    cfg: &AdamConfig,
    trainable: &dyn Fn(&str) -> bool,
) {
    for (name, grad) in grads {
        if !trainable(name) {
            continue;
        }
        let state = adam
            .entry(name.clone())
            .or_insert_with(|| AdamState::new(grad.shape()));
        let param = model
            .param_mut(name)
            .unwrap_or_else(|| panic!("gradient for unknown parameter {name}"));
        state.apply(cfg, param, grad);
    }
}

fn epoch_batches(
    data: &LoadedData,
    indices: &[usize],
    cfg: &LossConfig,
    rng: &mut ChaCha12Rng,
) -> Vec<Vec<usize>> {
    let mut pool = indices.to_vec();
    if cfg.balance_live {
        let lives: Vec<usize> = indices
            .iter()
            .copied()
            .filter(|&i| data.record(i).is_live)
            .collect();
        let n_fake = indices.len() - lives.len();
        if !lives.is_empty() && n_fake > 0 {
            // Top lives up to roughly half the fake count.
            let target = n_fake / 2;
            let mut extra = target.saturating_sub(lives.len());
            while extra > 0 {
                for &l in &lives {
                    if extra == 0 {
                        break;
                    }
                    pool.push(l);
                    extra -= 1;
                }
            }
        }
    }
    pool.shuffle(rng);
    pool.chunks(cfg.batch_size).map(|c| c.to_vec()).collect()
}

/// Pretraining substitute: brief supervised warm-up of the whole dual
/// encoder (towers, class embeddings, template contexts) on the live/fake
/// task with the fixed template prompts, after which the encoder is frozen.
pub fn pretrain_encoder(
    model: &mut Model,
    data: &LoadedData,
    indices: &[usize],
    cfg: &LossConfig,
    seed: u64,
) -> Result<TrainReport> {
    cfg.validate()?;
    if model.encoder.frozen {
        return Err(Error::Invariant("encoder is already frozen".into()));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(mix_seed(seed, &[21]));
    let adam_cfg = AdamConfig::with_lr(cfg.pretrain_lr);
    let mut adam = BTreeMap::new();
    let mut report = TrainReport::default();
    let mut step = 0u64;
    for _epoch in 0..cfg.pretrain_epochs {
        let mut epoch_loss = 0.0;
        let batches = epoch_batches(data, indices, cfg, &mut rng);
        let n_batches = batches.len();
        for batch in batches {
            let results = par_map(&batch, |&idx| -> Result<(f64, BTreeMap<String, Tensor>)> {
                let rec = data.record(idx);
                let mut tape = Tape::new();
                let seq = patch_embed(&mut tape, &model.encoder, &data.images[idx])?;
                let feature = encode_image(&mut tape, &model.encoder, &seq, None)?;
                let weights = template_class_weights(&mut tape, &model.encoder)?;
                let probs = class_probabilities(
                    &mut tape,
                    model.cfg.encoder.temperature,
                    feature,
                    &weights,
                )?;
                let label = if rec.is_live { 0 } else { 1 };
                let ce = ce_node(&mut tape, probs, label);
                let val = tape.graph.scalar_value(ce);
                let scale = 1.0 / batch.len() as f64;
                let grads = tape.param_grads(&[(ce, Tensor::scalar(scale))]);
                Ok((val, grads))
            });
            let mut total = BTreeMap::new();
            let mut loss = 0.0;
            for r in results {
                let (v, g) = r?;
                loss += v;
                merge_grads(&mut total, &g);
            }
            loss /= batch.len() as f64;
            // The patch projection and positional tables stay at their
            // (well-conditioned) initialization: the warm-up only needs to
            // give the pooled features live/fake structure, and the routing
            // gates read the patch embeddings directly.
            apply_grads(model, &total, &mut adam, &adam_cfg, &|n| {
                n.starts_with("encoder.")
                    && !matches!(
                        n,
                        "encoder.vision.patch_w"
                            | "encoder.vision.patch_b"
                            | "encoder.vision.pos"
                            | "encoder.vision.cls"
                    )
            });
            step += 1;
            report.rows.push(TraceRow {
                step,
                stage: "pretrain".into(),
                component: "ce".into(),
                value: loss,
            });
            epoch_loss += loss;
        }
        report.epoch_means.push(epoch_loss / n_batches as f64);
    }
    model.encoder.freeze();
    Ok(report)
}

/// Fake partner for each live sample in a batch: same identity when one is
/// present, otherwise a seeded random fake from the batch.
fn pair_paths(
    data: &LoadedData,
    batch: &[usize],
    rng: &mut ChaCha12Rng,
) -> Vec<Option<(u16, u16, u16)>> {
    let fakes: Vec<usize> = batch
        .iter()
        .copied()
        .filter(|&i| !data.record(i).is_live)
        .collect();
    batch
        .iter()
        .map(|&idx| {
            let rec = data.record(idx);
            if !rec.is_live {
                return None;
            }
            let same_id = fakes
                .iter()
                .find(|&&f| data.record(f).identity_id == rec.identity_id);
            let partner = same_id.copied().or_else(|| {
                if fakes.is_empty() {
                    None
                } else {
                    Some(fakes[rng.random_range(0..fakes.len())])
                }
            });
            partner.and_then(|p| data.record(p).path)
        })
        .collect()
}

/// Stage 1: supervised prompt training. Only prompt blocks and the
/// integration parameters receive updates; the frozen encoder is checked by
/// checksum at the end of the run.
pub fn train_stage1(
    model: &mut Model,
    data: &LoadedData,
    indices: &[usize],
    cfg: &LossConfig,
    seed: u64,
) -> Result<TrainReport> {
    cfg.validate()?;
    if !model.encoder.frozen {
        return Err(Error::Invariant(
            "stage-1 training requires a frozen encoder".into(),
        ));
    }
    let encoder_sum = model.encoder.checksum();
    let mut rng = ChaCha12Rng::seed_from_u64(mix_seed(seed, &[22]));
    let adam_cfg = AdamConfig::with_lr(cfg.learning_rate);
    let mut adam = BTreeMap::new();
    let mut report = TrainReport::default();
    let mut step = 0u64;
    for _epoch in 0..cfg.stage1_epochs {
        let mut epoch_loss = 0.0;
        let batches = epoch_batches(data, indices, cfg, &mut rng);
        let n_batches = batches.len();
        for batch in batches {
            let partners = pair_paths(data, &batch, &mut rng);
            let jobs: Vec<(usize, Option<(u16, u16, u16)>)> =
                batch.iter().copied().zip(partners).collect();
            let results = par_map(&jobs, |&(idx, partner)| -> Result<(f64, BTreeMap<String, Tensor>)> {
                let rec = data.record(idx);
                let mut tape = Tape::new();
                let tokens = patch_embed(&mut tape, &model.encoder, &data.images[idx])?;
                let path = select_supervised_path(&model.taxonomy, rec.path, partner)?;
                let trace = supervised_trace(&mut tape, model, &path)?;
                let parts = forward_with_trace(&mut tape, model, tokens, trace)?;
                let label = if rec.is_live { 0 } else { 1 };
                let ce = ce_node(&mut tape, parts.probs, label);
                let val = tape.graph.scalar_value(ce);
                let scale = 1.0 / jobs.len() as f64;
                let grads = tape.param_grads(&[(ce, Tensor::scalar(scale))]);
                Ok((val, grads))
            });
            let mut total = BTreeMap::new();
            let mut ce_loss = 0.0;
            for r in results {
                let (v, g) = r?;
                ce_loss += v;
                merge_grads(&mut total, &g);
            }
            ce_loss /= batch.len() as f64;

            // Prompt-separation triplet over block means, once per step.
            let (trip, trip_grads) = prompt_tree_triplet(&model.tree, cfg.triplet_margin)?;
            let mut scaled = trip_grads;
            for g in scaled.values_mut() {
                g.scale_in_place(cfg.triplet_weight);
            }
            merge_grads(&mut total, &scaled);

            apply_grads(model, &total, &mut adam, &adam_cfg, &|n| {
                n.starts_with("tree.") || n.starts_with("dpi.")
            });
            step += 1;
            let total_loss = ce_loss + cfg.triplet_weight * trip;
            for (comp, v) in [("ce", ce_loss), ("triplet", trip), ("total", total_loss)] {
                report.rows.push(TraceRow {
                    step,
                    stage: "stage1".into(),
                    component: comp.into(),
                    value: v,
                });
            }
            epoch_loss += total_loss;
        }
        report.epoch_means.push(epoch_loss / n_batches as f64);
    }
    if model.encoder.checksum() != encoder_sum {
        return Err(Error::Invariant(
            "encoder parameters changed during stage 1".into(),
        ));
    }
    Ok(report)
}

/// Teacher-forced per-level routing cross-entropy nodes for one sample.
/// Fake samples supervise all three levels along their labeled path; live
/// samples supervise level 1 only. When the actual route already followed
/// the labeled branch, the routed gate's distribution node is reused instead
/// of re-running the same convolution.
fn routing_ce_nodes(
    tape: &mut Tape,
    model: &Model,
    tokens: &crate::encoders::TokenSequence,
    trace: &crate::app::RoutingTrace,
    rec: &ManifestRecord,
) -> Result<Vec<NodeId>> {
    let taxonomy = &model.taxonomy;
    let mut nodes = Vec::new();
    let level1 = taxonomy.level1_order();
    let l1_target = match rec.path {
        None => taxonomy.live_id(),
        Some((l1, _, _)) => l1,
    };
    let idx1 = level1.iter().position(|&c| c == l1_target).unwrap();
    nodes.push(ce_node(tape, trace.levels[0].dist, idx1));

    if let Some((l1, l2, l3)) = rec.path {
        let routed = &trace.decision.node_path;
        let dist2 = if routed[0] == l1 && trace.levels.len() > 1 {
            trace.levels[1].dist
        } else {
            let block1 = model.tree.block_on_tape(tape, l1)?;
            let cond1 = tape.graph.mean_rows(block1);
            let scores2 = crate::app::gate_conv(tape, &model.gates, tokens, l1, Some(cond1))?;
            tape.graph.softmax_vec(scores2)
        };
        let idx2 = taxonomy.child_index(l1, l2)?;
        nodes.push(ce_node(tape, dist2, idx2));

        let dist3 = if routed.len() > 1 && routed[0] == l1 && routed[1] == l2 {
            trace.levels[2].dist
        } else {
            let block1 = model.tree.block_on_tape(tape, l1)?;
            let block2 = model.tree.block_on_tape(tape, l2)?;
            let half = tape.input(Tensor::from_vec(&[2], vec![0.5, 0.5]));
            let mean12 = tape.graph.blend(&[block1, block2], half);
            let cond2 = tape.graph.mean_rows(mean12);
            let scores3 = crate::app::gate_conv(tape, &model.gates, tokens, l2, Some(cond2))?;
            tape.graph.softmax_vec(scores3)
        };
        let idx3 = taxonomy.child_index(l2, l3)?;
        nodes.push(ce_node(tape, dist3, idx3));
    }
    Ok(nodes)
}

/// Triplet class for stage 2: live is one class, each level-3 category its
/// own class.
fn stage2_class(rec: &ManifestRecord) -> u32 {
    match rec.path {
        None => 0,
        Some((_, _, l3)) => 1 + l3 as u32,
    }
}

struct Stage2Forward {
    tape: Tape,
    ce: NodeId,
    routing: Vec<NodeId>,
    feature: NodeId,
    feature_value: Tensor,
    ce_value: f64,
    routing_value: f64,
}

/// Stage 2: train the gates and integration parameters against the full
/// pipeline loss (classification CE + image-feature triplet + auxiliary
/// routing CE). Prompts and the encoder stay frozen unless joint fine-tuning
/// is explicitly enabled.
pub fn train_stage2(
    model: &mut Model,
    data: &LoadedData,
    indices: &[usize],
    cfg: &LossConfig,
    seed: u64,
) -> Result<TrainReport> {
    cfg.validate()?;
    if !model.encoder.frozen {
        return Err(Error::Invariant(
            "stage-2 training requires a frozen encoder".into(),
        ));
    }
    model.tree.frozen = !cfg.joint_finetune;
    let encoder_sum = model.encoder.checksum();
    let prompt_sum = model.tree.checksum();
    let mut rng = ChaCha12Rng::seed_from_u64(mix_seed(seed, &[23]));
    let adam_cfg = AdamConfig::with_lr(cfg.learning_rate);
    let mut adam = BTreeMap::new();
    let mut report = TrainReport::default();
    let mut step = 0u64;
    let joint = cfg.joint_finetune;
    for _epoch in 0..cfg.stage2_epochs {
        let mut epoch_loss = 0.0;
        let batches = epoch_batches(data, indices, cfg, &mut rng);
        let n_batches = batches.len();
        for batch in batches {
            // Phase A: forward every sample, keeping tapes.
            let forwards = par_map(&batch, |&idx| -> Result<Stage2Forward> {
                let rec = data.record(idx);
                let mut tape = Tape::new();
                let parts = hiptune_forward(&mut tape, model, &data.images[idx])?;
                let label = if rec.is_live { 0 } else { 1 };
                let ce = ce_node(&mut tape, parts.probs, label);
                let routing = routing_ce_nodes(&mut tape, model, &parts.tokens, &parts.trace, rec)?;
                let ce_value = tape.graph.scalar_value(ce);
                let routing_value = routing
                    .iter()
                    .map(|&n| tape.graph.scalar_value(n))
                    .sum::<f64>();
                let feature_value = tape.graph.value(parts.feature).clone();
                Ok(Stage2Forward {
                    tape,
                    ce,
                    routing,
                    feature: parts.feature,
                    feature_value,
                    ce_value,
                    routing_value,
                })
            });
            let mut fwd = Vec::with_capacity(batch.len());
            for f in forwards {
                fwd.push(f?);
            }

            // Phase B: batch triplet over the pooled image features.
            let embeddings: Vec<Tensor> = fwd.iter().map(|f| f.feature_value.clone()).collect();
            let classes: Vec<u32> = batch.iter().map(|&i| stage2_class(data.record(i))).collect();
            let triplet = asymmetric_triplet_loss(&embeddings, &classes, cfg.triplet_margin)?;

            // Phase C: per-sample backward with all seeds.
            let b = batch.len() as f64;
            let jobs: Vec<(usize, &Stage2Forward)> = fwd.iter().enumerate().collect();
            let grad_parts = par_map(&jobs, |&(i, f)| {
                let mut seeds: Vec<(NodeId, Tensor)> =
                    vec![(f.ce, Tensor::scalar(1.0 / b))];
                for &r in &f.routing {
                    seeds.push((r, Tensor::scalar(cfg.routing_ce_weight / b)));
                }
                let mut trip_seed = triplet.grads[i].clone();
                trip_seed.scale_in_place(cfg.triplet_weight);
                seeds.push((f.feature, trip_seed));
                f.tape.param_grads(&seeds)
            });

            // Phase D: ordered merge and the optimizer step.
            let mut total = BTreeMap::new();
            for g in &grad_parts {
                merge_grads(&mut total, g);
            }
            apply_grads(model, &total, &mut adam, &adam_cfg, &|n| {
                n.starts_with("gates.") || n.starts_with("dpi.") || (joint && n.starts_with("tree."))
            });

            let ce_loss = fwd.iter().map(|f| f.ce_value).sum::<f64>() / b;
            let routing_loss = fwd.iter().map(|f| f.routing_value).sum::<f64>() / b;
            let total_loss = ce_loss
                + cfg.routing_ce_weight * routing_loss
                + cfg.triplet_weight * triplet.value;
            step += 1;
            for (comp, v) in [
                ("ce", ce_loss),
                ("routing_ce", routing_loss),
                ("triplet", triplet.value),
                ("total", total_loss),
            ] {
                report.rows.push(TraceRow {
                    step,
                    stage: "stage2".into(),
                    component: comp.into(),
                    value: v,
                });
            }
            epoch_loss += total_loss;
        }
        report.epoch_means.push(epoch_loss / n_batches as f64);
    }
    if model.encoder.checksum() != encoder_sum {
        return Err(Error::Invariant(
            "encoder parameters changed during stage 2".into(),
        ));
    }
    if !cfg.joint_finetune && model.tree.checksum() != prompt_sum {
        return Err(Error::Invariant(
            "prompt blocks changed during stage 2".into(),
        ));
    }
    Ok(report)
}

/// Train a flat-context baseline (classification CE only).
pub fn train_coop(
    model: &mut Model,
    class_specific: bool,
    data: &LoadedData,
    indices: &[usize],
    cfg: &LossConfig,
    seed: u64,
) -> Result<TrainReport> {
    cfg.validate()?;
    if !model.encoder.frozen {
        return Err(Error::Invariant(
            "baseline training requires a frozen encoder".into(),
        ));
    }
    let prefix = if class_specific { "coop_specific" } else { "coop_unified" };
    let encoder_sum = model.encoder.checksum();
    let mut rng = ChaCha12Rng::seed_from_u64(mix_seed(seed, &[24, class_specific as u64]));
    let adam_cfg = AdamConfig::with_lr(cfg.learning_rate);
    let mut adam = BTreeMap::new();
    let mut report = TrainReport::default();
    let mut step = 0u64;
    for _epoch in 0..cfg.coop_epochs {
        let mut epoch_loss = 0.0;
        let batches = epoch_batches(data, indices, cfg, &mut rng);
        let n_batches = batches.len();
        for batch in batches {
            let results = par_map(&batch, |&idx| -> Result<(f64, BTreeMap<String, Tensor>)> {
                let rec = data.record(idx);
                let baseline = if class_specific {
                    &model.coop_specific
                } else {
                    &model.coop_unified
                };
                let mut tape = Tape::new();
                let probs = coop_baseline_probabilities(
                    &mut tape,
                    &model.encoder,
                    baseline,
                    prefix,
                    &data.images[idx],
                )?;
                let label = if rec.is_live { 0 } else { 1 };
                let ce = ce_node(&mut tape, probs, label);
                let val = tape.graph.scalar_value(ce);
                let scale = 1.0 / batch.len() as f64;
                Ok((val, tape.param_grads(&[(ce, Tensor::scalar(scale))])))
            });
            let mut total = BTreeMap::new();
            let mut loss = 0.0;
            for r in results {
                let (v, g) = r?;
                loss += v;
                merge_grads(&mut total, &g);
            }
            loss /= batch.len() as f64;
            apply_grads(model, &total, &mut adam, &adam_cfg, &|n| n.starts_with(prefix));
            step += 1;
            report.rows.push(TraceRow {
                step,
                stage: format!("coop-{}", if class_specific { "specific" } else { "unified" }),
                component: "ce".into(),
                value: loss,
            });
            epoch_loss += loss;
        }
        report.epoch_means.push(epoch_loss / n_batches as f64);
    }
    if model.encoder.checksum() != encoder_sum {
        return Err(Error::Invariant(
            "encoder parameters changed during baseline training".into(),
        ));
    }
    Ok(report)
}
