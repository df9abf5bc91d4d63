//! Dynamic prompt integration: converts per-level routing probabilities and
//! candidate prompt blocks into live/fake text contexts, and the end-to-end
//! live/fake scorer built on top of it.
//!
//! Within each routed level the sibling prompts are probability-weighted (at
//! level 1 the live score is masked out and the remaining two renormalized);
//! the per-level prompts are then stacked, passed through a residual
//! self-attention block (output projection zero-initialized, so the block is
//! the identity at init and can be disabled outright), mean-combined across
//! levels, and projected tokenwise into the text embedding dimension. The
//! live context is the projection of the live node's block.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::app::{route_sample, RoutingDecision, RoutingTrace};
use crate::encoders::{
    class_probabilities, encode_image, encode_text, patch_embed, ClassTag, TokenSequence,
};
use crate::error::{Error, Result};
use crate::math::graph::NodeId;
use crate::math::Tensor;
use crate::model::{Model, ModelConfig, Tape};
use crate::taxonomy::AttackTaxonomy;
use crate::vptree::{PromptPath, PromptTree};

pub struct DpiParams {
    /// Cross-level self-attention (single head over stacked level prompts).
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    /// Residual output projection; zero-initialized.
    pub w_o: Tensor,
    /// Tokenwise projection into the text embedding dimension.
    pub proj: Tensor,
    pub attention_enabled: bool,
}

impl DpiParams {
    pub fn new(cfg: &ModelConfig, seed: u64) -> DpiParams {
        let d = cfg.encoder.visual_dim;
        let td = cfg.encoder.text_dim;
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        DpiParams {
            w_q: Tensor::randn(&[d, d], 0.02, &mut rng),
            w_k: Tensor::randn(&[d, d], 0.02, &mut rng),
            w_v: Tensor::randn(&[d, d], 0.02, &mut rng),
            w_o: Tensor::zeros(&[d, d]),
            proj: Tensor::randn(&[d, td], 0.02, &mut rng),
            attention_enabled: cfg.dpi_attention,
        }
    }

    pub fn collect_params<'a>(&'a self, map: &mut BTreeMap<String, &'a Tensor>) {
        map.insert("dpi.w_q".into(), &self.w_q);
        map.insert("dpi.w_k".into(), &self.w_k);
        map.insert("dpi.w_v".into(), &self.w_v);
        map.insert("dpi.w_o".into(), &self.w_o);
        map.insert("dpi.proj".into(), &self.proj);
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        match name {
            "dpi.w_q" => Some(&mut self.w_q),
            "dpi.w_k" => Some(&mut self.w_k),
            "dpi.w_v" => Some(&mut self.w_v),
            "dpi.w_o" => Some(&mut self.w_o),
            "dpi.proj" => Some(&mut self.proj),
            _ => None,
        }
    }
}

/// Value-level probability-weighted prompt combination.
pub fn weighted_level_prompt(probs: &[f64], candidates: &[Tensor]) -> Result<Tensor> {
    if probs.len() != candidates.len() {
        return Err(Error::shape(
            format!("{} weights", candidates.len()),
            format!("{}", probs.len()),
        ));
    }
    if candidates.is_empty() {
        return Err(Error::Contract("no candidate prompts".into()));
    }
    let sum: f64 = probs.iter().sum();
    if (sum - 1.0).abs() > 1e-6 {
        return Err(Error::Numerical(format!(
            "weights sum to {sum}, expected 1"
        )));
    }
    let mut out = Tensor::zeros(candidates[0].shape());
    for (p, c) in probs.iter().zip(candidates) {
        if !out.same_shape(c) {
            return Err(Error::shape(out.shape_string(), c.shape_string()));
        }
        out.add_scaled(c, *p);
    }
    Ok(out)
}

/// Per-level weighted prompts on the tape. Level 1 masks out the live entry
/// and renormalizes over {physical, digital} before weighting.
fn level_weighted_prompts(
    tape: &mut Tape,
    taxonomy: &AttackTaxonomy,
    tree: &PromptTree,
    trace: &RoutingTrace,
) -> Result<Vec<NodeId>> {
    let live = taxonomy.live_id();
    let mut out = Vec::with_capacity(trace.levels.len());
    for (li, level) in trace.levels.iter().enumerate() {
        let (weights, nodes): (NodeId, Vec<u16>) = if li == 0 {
            let keep: Vec<usize> = level
                .candidates
                .iter()
                .enumerate()
                .filter(|(_, id)| **id != live)
                .map(|(i, _)| i)
                .collect();
            let kept_nodes: Vec<u16> = level
                .candidates
                .iter()
                .copied()
                .filter(|id| *id != live)
                .collect();
            (tape.graph.mask_renorm(level.dist, &keep), kept_nodes)
        } else {
            (level.dist, level.candidates.clone())
        };
        let blocks: Vec<NodeId> = nodes
            .iter()
            .map(|id| tree.block_on_tape(tape, *id))
            .collect::<Result<Vec<_>>>()?;
        out.push(tape.graph.blend(&blocks, weights));
    }
    Ok(out)
}

/// Residual single-head self-attention over stacked level prompts.
fn cross_level_attention(tape: &mut Tape, dpi: &DpiParams, stacked: NodeId) -> NodeId {
    if !dpi.attention_enabled {
        return stacked;
    }
    let w_q = tape.param("dpi.w_q", &dpi.w_q);
    let w_k = tape.param("dpi.w_k", &dpi.w_k);
    let w_v = tape.param("dpi.w_v", &dpi.w_v);
    let w_o = tape.param("dpi.w_o", &dpi.w_o);
    let q = tape.graph.matmul(stacked, w_q);
    let k = tape.graph.matmul(stacked, w_k);
    let v = tape.graph.matmul(stacked, w_v);
    let attn = tape.graph.mha(q, k, v, 1);
    let o = tape.graph.matmul(attn, w_o);
    tape.graph.add(stacked, o)
}

/// Build the live and fake text contexts (each `L_p x text_dim`) from a
/// routing trace.
pub fn build_text_prompts(
    tape: &mut Tape,
    taxonomy: &AttackTaxonomy,
    tree: &PromptTree,
    dpi: &DpiParams,
    trace: &RoutingTrace,
) -> Result<(NodeId, NodeId)> {
    if trace.levels.is_empty() {
        return Err(Error::Contract("routing trace has no levels".into()));
    }
    for level in &trace.levels {
        let n = tape.graph.value(level.dist).len();
        if n != level.candidates.len() {
            return Err(Error::Contract(format!(
                "distribution arity {n} does not match {} candidates",
                level.candidates.len()
            )));
        }
    }
    let proj = tape.param("dpi.proj", &dpi.proj);

    // Live context: straight projection of the live node's block.
    let live_block = tree.block_on_tape(tape, taxonomy.live_id())?;
    let live_ctx = tape.graph.matmul(live_block, proj);

    // Fake context: per-level weighted prompts, stacked, attended, averaged.
    let level_prompts = level_weighted_prompts(tape, taxonomy, tree, trace)?;
    let mut stacked = level_prompts[0];
    for p in &level_prompts[1..] {
        stacked = tape.graph.concat_rows(stacked, *p);
    }
    let attended = cross_level_attention(tape, dpi, stacked);
    let lp = tree.prompt_length;
    let n_levels = level_prompts.len();
    let combined = if n_levels == 1 {
        attended
    } else {
        let slices: Vec<NodeId> = (0..n_levels)
            .map(|k| tape.graph.slice_rows(attended, k * lp, lp))
            .collect();
        let w = tape.input(Tensor::filled(&[n_levels], 1.0 / n_levels as f64));
        tape.graph.blend(&slices, w)
    };
    let fake_ctx = tape.graph.matmul(combined, proj);
    Ok((live_ctx, fake_ctx))
}

/// End-to-end forward pass recorded on a tape.
pub struct ScoreParts {
    /// (p_live, p_fake) probability node, length 2.
    pub probs: NodeId,
    /// Projected image feature (joint embedding dimension).
    pub feature: NodeId,
    pub trace: RoutingTrace,
    pub tokens: TokenSequence,
}

/// Full pipeline on an existing tape: patch embed, route, integrate the
/// selected prompts into the encoder input, score against DPI-built text
/// contexts.
pub fn hiptune_forward(tape: &mut Tape, model: &Model, image: &Tensor) -> Result<ScoreParts> {
    let tokens = patch_embed(tape, &model.encoder, image)?;
    let trace = route_sample(tape, &model.taxonomy, &model.tree, &model.gates, &tokens)?;
    forward_with_trace(tape, model, tokens, trace)
}

/// Same pipeline but with the routing trace supplied by the caller (stage-1
/// training uses supervised one-hot traces).
pub fn forward_with_trace(
    tape: &mut Tape,
    model: &Model,
    tokens: TokenSequence,
    trace: RoutingTrace,
) -> Result<ScoreParts> {
    let path = PromptPath {
        steps: trace
            .decision
            .node_path
            .iter()
            .enumerate()
            .map(|(i, id)| (i as u8 + 1, *id))
            .collect(),
    };
    let prompt = crate::vptree::integrate_prompts_on_tape(tape, &model.tree, &path)?;
    let full = crate::vptree::assemble_encoder_input(tape, &tokens, prompt)?;
    let depth_prompt = model.cfg.depth_insertion.then_some(prompt);
    let feature = encode_image(tape, &model.encoder, &full, depth_prompt)?;

    let (live_ctx, fake_ctx) =
        build_text_prompts(tape, &model.taxonomy, &model.tree, &model.dpi, &trace)?;
    let w_live = encode_text(tape, &model.encoder, live_ctx, ClassTag::Live)?;
    let w_fake = encode_text(tape, &model.encoder, fake_ctx, ClassTag::Fake)?;
    let probs = class_probabilities(
        tape,
        model.cfg.encoder.temperature,
        feature,
        &[w_live, w_fake],
    )?;
    Ok(ScoreParts {
        probs,
        feature,
        trace,
        tokens,
    })
}

/// Value-level scorer: returns (p_live, p_fake) and the routing decision.
pub fn hiptune_score(model: &Model, image: &Tensor) -> Result<(f64, f64, RoutingDecision)> {
    let mut tape = Tape::new();
    let parts = hiptune_forward(&mut tape, model, image)?;
    let p = tape.graph.value(parts.probs);
    Ok((p.data()[0], p.data()[1], parts.trace.decision))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::app::RoutedLevel;
    use crate::taxonomy::build_taxonomy;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn desk_model() -> Model {
        Model::new(build_taxonomy(), ModelConfig::default(), 99).unwrap()
    }

    fn random_image(seed: u64) -> Tensor {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        Tensor::randn(&[3, 32, 32], 0.5, &mut rng)
    }

    #[test]
    fn weighted_prompt_value_level() {
        let a = Tensor::filled(&[2, 3], 1.0);
        let b = Tensor::filled(&[2, 3], 3.0);

        // One-hot picks the candidate exactly.
        let out = weighted_level_prompt(&[1.0, 0.0], &[a.clone(), b.clone()]).unwrap();
        assert!(out.bit_equal(&a));

        // Even weights average.
        let out = weighted_level_prompt(&[0.5, 0.5], &[a.clone(), b.clone()]).unwrap();
        assert!(out.max_abs_diff(&Tensor::filled(&[2, 3], 2.0)) < 1e-15);

        // Arity mismatch is a shape error.
        assert!(weighted_level_prompt(&[1.0], &[a.clone(), b.clone()]).is_err());
        // Weights must sum to one.
        assert!(weighted_level_prompt(&[0.9, 0.3], &[a, b]).is_err());
    }

    #[test]
    fn level1_masked_resoftmax_gives_even_fake_weights() {
        // Logits (live=9, phys=1, digi=1): masked renormalization over the
        // two fake entries yields (0.5, 0.5).
        let model = desk_model();
        let mut tape = Tape::new();
        let logits = tape.input(Tensor::from_vec(&[3], vec![9.0, 1.0, 1.0]));
        let dist = tape.graph.softmax_vec(logits);
        let trace = RoutingTrace {
            decision: RoutingDecision {
                indices: vec![0],
                node_path: vec![model.taxonomy.live_id()],
                distributions: vec![tape.graph.value(dist).data().to_vec()],
                stopped_at_live: true,
            },
            levels: vec![RoutedLevel {
                candidates: model.taxonomy.level1_order(),
                dist,
                selected_index: 0,
            }],
        };
        let prompts =
            level_weighted_prompts(&mut tape, &model.taxonomy, &model.tree, &trace).unwrap();
        assert_eq!(prompts.len(), 1);
        let phys = model.taxonomy.node_by_name(crate::taxonomy::PHYSICAL).unwrap().id;
        let digi = model.taxonomy.node_by_name(crate::taxonomy::DIGITAL).unwrap().id;
        let expect = weighted_level_prompt(
            &[0.5, 0.5],
            &[
                model.tree.block(phys).unwrap().clone(),
                model.tree.block(digi).unwrap().clone(),
            ],
        )
        .unwrap();
        assert!(tape.graph.value(prompts[0]).max_abs_diff(&expect) < 1e-12);
    }

    #[test]
    fn one_hot_routing_collapses_to_path_blocks() {
        // With one-hot distributions along a fake path and identity
        // attention (w_o = 0 at init), the fake context is the projection of
        // the mean of that path's blocks: no off-path mixing.
        let model = desk_model();
        let path = model.taxonomy.path_for_method(20).unwrap();
        let mut tape = Tape::new();

        let onehot = |tape: &mut Tape, arity: usize, idx: usize| -> NodeId {
            let mut v = vec![0.0; arity];
            v[idx] = 1.0;
            tape.input(Tensor::from_vec(&[arity], v))
        };
        let l1_candidates = model.taxonomy.level1_order();
        let i1 = l1_candidates.iter().position(|&c| c == path.0).unwrap();
        let l2_candidates = model.taxonomy.children(path.0);
        let i2 = l2_candidates.iter().position(|&c| c == path.1).unwrap();
        let l3_candidates = model.taxonomy.children(path.1);
        let i3 = l3_candidates.iter().position(|&c| c == path.2).unwrap();
        let d1 = onehot(&mut tape, l1_candidates.len(), i1);
        let d2 = onehot(&mut tape, l2_candidates.len(), i2);
        let d3 = onehot(&mut tape, l3_candidates.len(), i3);
        let trace = RoutingTrace {
            decision: RoutingDecision {
                indices: vec![i1, i2, i3],
                node_path: vec![path.0, path.1, path.2],
                distributions: Vec::new(),
                stopped_at_live: false,
            },
            levels: vec![
                RoutedLevel { candidates: l1_candidates, dist: d1, selected_index: i1 },
                RoutedLevel { candidates: l2_candidates, dist: d2, selected_index: i2 },
                RoutedLevel { candidates: l3_candidates, dist: d3, selected_index: i3 },
            ],
        };
        let (_, fake_ctx) =
            build_text_prompts(&mut tape, &model.taxonomy, &model.tree, &model.dpi, &trace)
                .unwrap();

        let mean = crate::vptree::integrate_prompts(&model.tree, &PromptPath::chain(path)).unwrap();
        let expect = crate::math::matmul(&mean, &model.dpi.proj, false, false);
        assert!(tape.graph.value(fake_ctx).max_abs_diff(&expect) < 1e-10);
    }

    #[test]
    fn identical_blocks_make_live_and_fake_contexts_equal() {
        // Degenerate tree (every block identical): at init (w_o = 0) the
        // live and fake contexts coincide after projection.
        let mut model = desk_model();
        let block = model.tree.block(0).unwrap().clone();
        for id in model.tree.node_ids() {
            *model.tree.block_mut(id).unwrap() = block.clone();
        }
        let mut tape = Tape::new();
        let seq = patch_embed(&mut tape, &model.encoder, &random_image(3)).unwrap();
        let trace =
            route_sample(&mut tape, &model.taxonomy, &model.tree, &model.gates, &seq).unwrap();
        let (live_ctx, fake_ctx) =
            build_text_prompts(&mut tape, &model.taxonomy, &model.tree, &model.dpi, &trace)
                .unwrap();
        let lv = tape.graph.value(live_ctx);
        let fv = tape.graph.value(fake_ctx);
        assert!(lv.max_abs_diff(fv) < 1e-6);
    }

    #[test]
    fn stopped_at_live_uses_masked_level1_pair_only() {
        let mut model = desk_model();
        // Steer routing to live via the level-1 bias.
        model.gates.w1 = Tensor::zeros(model.gates.w1.shape());
        model.gates.b1 = Tensor::from_vec(&[3], vec![6.0, 0.0, 0.0]);
        let mut tape = Tape::new();
        let parts = hiptune_forward(&mut tape, &model, &random_image(4)).unwrap();
        assert!(parts.trace.decision.stopped_at_live);
        assert_eq!(parts.trace.levels.len(), 1);
        let p = tape.graph.value(parts.probs);
        assert!((p.data().iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn attention_bypass_scales_linearly() {
        // With the attention block disabled the context build is linear in
        // the prompt blocks: scaling every block by c scales both contexts.
        // Gates are pinned to constant outputs up front so both runs route
        // identically with identical distributions.
        let mut model = desk_model();
        model.dpi.attention_enabled = false;
        model.gates.w1 = Tensor::zeros(model.gates.w1.shape());
        model.gates.b1 = Tensor::from_vec(&[3], vec![0.0, 0.0, 1.0]);
        for gate in model.gates.conv_gates.values_mut() {
            gate.kernel = Tensor::zeros(gate.kernel.shape());
            gate.head_w = Tensor::zeros(gate.head_w.shape());
        }
        let img = random_image(5);
        let run = |model: &Model| -> (Tensor, Tensor) {
            let mut tape = Tape::new();
            let seq = patch_embed(&mut tape, &model.encoder, &img).unwrap();
            let trace =
                route_sample(&mut tape, &model.taxonomy, &model.tree, &model.gates, &seq).unwrap();
            let (l, f) =
                build_text_prompts(&mut tape, &model.taxonomy, &model.tree, &model.dpi, &trace)
                    .unwrap();
            (tape.graph.value(l).clone(), tape.graph.value(f).clone())
        };
        let (l1, f1) = run(&model);
        let c = 2.5;
        for id in model.tree.node_ids() {
            model.tree.block_mut(id).unwrap().scale_in_place(c);
        }
        let (l2, f2) = run(&model);
        let mut l1s = l1;
        l1s.scale_in_place(c);
        assert!(l1s.max_abs_diff(&l2) < 1e-9);
        let mut f1s = f1;
        f1s.scale_in_place(c);
        assert!(f1s.max_abs_diff(&f2) < 1e-9);
    }

    #[test]
    fn score_probabilities_sum_to_one_and_are_deterministic() {
        let model = desk_model();
        let img = random_image(6);
        let (pl, pf, dec) = hiptune_score(&model, &img).unwrap();
        assert!((pl + pf - 1.0).abs() < 1e-6);
        let (pl2, pf2, dec2) = hiptune_score(&model, &img).unwrap();
        assert_eq!(pl.to_bits(), pl2.to_bits());
        assert_eq!(pf.to_bits(), pf2.to_bits());
        assert_eq!(dec, dec2);
    }

    #[test]
    fn feature_rescaling_leaves_probabilities_unchanged() {
        // Cosine head: scaling the image feature must not move (p_live,
        // p_fake). Checked at the head level with the DPI-built weights.
        let model = desk_model();
        let img = random_image(7);
        let mut tape = Tape::new();
        let parts = hiptune_forward(&mut tape, &model, &img).unwrap();
        let f = tape.graph.value(parts.feature).clone();
        let p = tape.graph.value(parts.probs).clone();

        // Rebuild the head with a scaled copy of the feature.
        let mut tape2 = Tape::new();
        let seq = patch_embed(&mut tape2, &model.encoder, &img).unwrap();
        let trace =
            route_sample(&mut tape2, &model.taxonomy, &model.tree, &model.gates, &seq).unwrap();
        let (lc, fc) =
            build_text_prompts(&mut tape2, &model.taxonomy, &model.tree, &model.dpi, &trace)
                .unwrap();
        let wl = encode_text(&mut tape2, &model.encoder, lc, ClassTag::Live).unwrap();
        let wf = encode_text(&mut tape2, &model.encoder, fc, ClassTag::Fake).unwrap();
        let mut scaled = f.clone();
        scaled.scale_in_place(41.5);
        let fid = tape2.input(scaled);
        let probs = class_probabilities(
            &mut tape2,
            model.cfg.encoder.temperature,
            fid,
            &[wl, wf],
        )
        .unwrap();
        assert!(tape2.graph.value(probs).max_abs_diff(&p) < 1e-9);
    }
}
