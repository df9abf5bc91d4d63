//! Adaptive prompt pruning: per-level gate functions and hard top-1 routing.
//!
//! Level 1 is a linear gate over token features. Levels 2 and 3 run a
//! spatial convolution over the image-token grid first — central difference
//! convolution on physical branches (texture cues), frequency-adaptive
//! dilated convolution on digital branches (frequency cues) — conditioned on
//! the prompts selected so far via a channel-wise bias, then a linear head
//! averaged over locations. Ties break to the lowest child index.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::TokenSequence;
use crate::error::{Error, Result};
use crate::math::conv::{laplacian_energy, select_dilations};
use crate::math::graph::NodeId;
use crate::math::{argmax, Tensor};
use crate::model::{ModelConfig, Tape};
use crate::taxonomy::{AttackTaxonomy, PHYSICAL};
use crate::vptree::PromptTree;

/// Gate weights use fan-in-scaled initialization: location/token means
/// dilute the logits, so the usual prompt-style 0.02 leaves the routing
/// softmax frozen near uniform.
pub fn gate_init_std(fan_in: usize) -> f64 {
    1.0 / (fan_in as f64).sqrt()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ConvKind {
    Cdc,
    Fadc,
}

/// One conv-fed gate for the children of `parent`.
pub struct ConvGate {
    pub parent: u16,
    pub kind: ConvKind,
    /// (D, D, 3, 3) spatial kernel.
    pub kernel: Tensor,
    /// (D, n_children) linear head.
    pub head_w: Tensor,
    pub head_b: Tensor,
}

/// All gate parameters. Arity of each gate equals the child count of its
/// branch node, checked at construction.
pub struct GateParams {
    /// Level-1 linear gate: (D, 3) weights over {live, physical, digital}.
    pub w1: Tensor,
    pub b1: Tensor,
    /// CDC theta in [0, 1].
    pub theta: f64,
    /// FADC dilation-selector thresholds on Laplacian energy.
    pub fadc_low: f64,
    pub fadc_high: f64,
    /// Pin the FADC selector to one rate (diagnostics / ablation).
    pub forced_dilation: Option<u8>,
    /// Conv gates keyed by branch (parent) node id: 2 at level 2 feeding
    /// level-2 choices, 5 at level 3.
    pub conv_gates: BTreeMap<u16, ConvGate>,
    taxonomy_hash: u64,
}

impl GateParams {
    pub fn new(taxonomy: &AttackTaxonomy, cfg: &ModelConfig, seed: u64) -> Result<GateParams> {
        if !(0.0..=1.0).contains(&cfg.theta) {
            return Err(Error::Config(format!("theta {} outside [0, 1]", cfg.theta)));
        }
        let d = cfg.encoder.visual_dim;
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let level1 = taxonomy.level1_order();
        let w1 = Tensor::randn(&[d, level1.len()], gate_init_std(d), &mut rng);
        let b1 = Tensor::zeros(&[level1.len()]);

        let mut conv_gates = BTreeMap::new();
        // One gate per branch node that has children to choose between:
        // the two level-1 fake nodes and every level-2 node.
        let mut branches: Vec<u16> = Vec::new();
        for node in taxonomy.level_nodes(1) {
            if node.name != crate::taxonomy::LIVE {
                branches.push(node.id);
            }
        }
        for node in taxonomy.level_nodes(2) {
            branches.push(node.id);
        }
        for parent in branches {
            let children = taxonomy.children(parent);
            if children.is_empty() {
                return Err(Error::Config(format!(
                    "branch node {parent} has no children to route between"
                )));
            }
            // Conv family follows the level-1 ancestor: physical texture
            // cues use CDC, digital frequency cues use FADC.
            let l1 = taxonomy.level1_ancestor(parent)?;
            let kind = if taxonomy.node(l1)?.name == PHYSICAL {
                ConvKind::Cdc
            } else {
                ConvKind::Fadc
            };
            conv_gates.insert(
                parent,
                ConvGate {
                    parent,
                    kind,
                    kernel: Tensor::randn(&[d, d, 3, 3], gate_init_std(9 * d), &mut rng),
                    head_w: Tensor::randn(&[d, children.len()], gate_init_std(d), &mut rng),
                    head_b: Tensor::zeros(&[children.len()]),
                },
            );
        }
        Ok(GateParams {
            w1,
            b1,
            theta: cfg.theta,
            fadc_low: cfg.fadc_thresholds.0,
            fadc_high: cfg.fadc_thresholds.1,
            forced_dilation: None,
            conv_gates,
            taxonomy_hash: taxonomy.hash(),
        })
    }

    pub fn check_taxonomy(&self, taxonomy: &AttackTaxonomy) -> Result<()> {
        if taxonomy.hash() != self.taxonomy_hash {
            return Err(Error::Invariant("gates do not match this taxonomy".into()));
        }
        Ok(())
    }

    pub fn collect_params<'a>(&'a self, map: &mut BTreeMap<String, &'a Tensor>) {
        map.insert("gates.w1".into(), &self.w1);
        map.insert("gates.b1".into(), &self.b1);
        for (id, gate) in &self.conv_gates {
            map.insert(format!("gates.conv{id}.kernel"), &gate.kernel);
            map.insert(format!("gates.conv{id}.head_w"), &gate.head_w);
            map.insert(format!("gates.conv{id}.head_b"), &gate.head_b);
        }
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        match name {
            "gates.w1" => return Some(&mut self.w1),
            "gates.b1" => return Some(&mut self.b1),
            _ => {}
        }
        let rest = name.strip_prefix("gates.conv")?;
        let (id, field) = rest.split_once('.')?;
        let id: u16 = id.parse().ok()?;
        let gate = self.conv_gates.get_mut(&id)?;
        match field {
            "kernel" => Some(&mut gate.kernel),
            "head_w" => Some(&mut gate.head_w),
            "head_b" => Some(&mut gate.head_b),
            _ => None,
        }
    }

    pub fn checksum(&self) -> u64 {
        let mut map = BTreeMap::new();
        self.collect_params(&mut map);
        let mut h = crate::math::fnv1a_init();
        for (_, t) in map {
            h = crate::math::fnv1a_u64(h, t.checksum());
        }
        h
    }
}

/// Central difference convolution as a standalone value-level operation.
pub fn cdc_conv(grid: &Tensor, kernel: &Tensor, theta: f64) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&theta) {
        return Err(Error::Config(format!("theta {theta} outside [0, 1]")));
    }
    check_conv_shapes(grid, kernel)?;
    Ok(crate::math::conv::cdc_forward(grid, kernel, theta))
}

#[derive(Clone, Debug)]
pub struct FadcConfig {
    pub low: f64,
    pub high: f64,
    pub forced_dilation: Option<u8>,
}

#[derive(Clone, Debug)]
pub struct FadcOutput {
    pub grid: Tensor,
    /// Per-location dilation rate actually applied.
    pub dilations: Vec<u8>,
}

/// Frequency-adaptive dilated convolution: per-location dilation in {1,2,3}
/// selected by local Laplacian energy, then dilated convolution at the
/// selected rate.
pub fn fadc_conv(grid: &Tensor, kernel: &Tensor, cfg: &FadcConfig) -> Result<FadcOutput> {
    check_conv_shapes(grid, kernel)?;
    let dilations = fadc_dilation_map(grid, cfg);
    let out = crate::math::conv::dilated_forward(grid, kernel, &dilations);
    Ok(FadcOutput { grid: out, dilations })
}

pub fn fadc_dilation_map(grid: &Tensor, cfg: &FadcConfig) -> Vec<u8> {
    let hw = grid.shape()[0] * grid.shape()[1];
    match cfg.forced_dilation {
        Some(d) => vec![d; hw],
        None => select_dilations(&laplacian_energy(grid), cfg.low, cfg.high),
    }
}

fn check_conv_shapes(grid: &Tensor, kernel: &Tensor) -> Result<()> {
    if grid.shape().len() != 3 {
        return Err(Error::shape("[H, W, C] grid", grid.shape_string()));
    }
    if kernel.shape().len() != 4 || kernel.shape()[1] != grid.shape()[2] {
        return Err(Error::shape(
            format!("[Cout, {}, kh, kw] kernel", grid.shape()[2]),
            kernel.shape_string(),
        ));
    }
    Ok(())
}

/// Per-level routing outcome: selected child indices, the post-softmax
/// distributions that produced them, and the live shortcut flag.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoutingDecision {
    /// Child index chosen at each routed level.
    pub indices: Vec<usize>,
    /// Selected node id at each routed level.
    pub node_path: Vec<u16>,
    /// Post-softmax distribution at each routed level.
    pub distributions: Vec<Vec<f64>>,
    pub stopped_at_live: bool,
}

/// One routed level on the tape, for training and integration.
pub struct RoutedLevel {
    /// Candidate child node ids, canonical order.
    pub candidates: Vec<u16>,
    /// Post-softmax distribution node.
    pub dist: NodeId,
    pub selected_index: usize,
}

/// Routing decision plus its tape nodes.
pub struct RoutingTrace {
    pub decision: RoutingDecision,
    pub levels: Vec<RoutedLevel>,
}

impl RoutingTrace {
    /// Selected prompt-tree node ids (1 entry for live, else 3).
    pub fn selected_nodes(&self) -> Vec<u16> {
        self.decision.node_path.clone()
    }
}

/// Level-1 gate: per-token linear map to three logits, averaged over all
/// tokens. Returns the pre-softmax scores node.
pub fn gate_level1(tape: &mut Tape, gates: &GateParams, seq: &TokenSequence) -> NodeId {
    let w1 = tape.param("gates.w1", &gates.w1);
    let b1 = tape.param("gates.b1", &gates.b1);
    let logits = tape.graph.matmul(seq.id, w1);
    let logits = tape.graph.add_row_bias(logits, b1);
    tape.graph.mean_rows(logits)
}

/// Conv-fed gate for the children of `branch`. `prompt_cond` is the mean of
/// the prompt tokens selected so far, added channel-wise to the conv output
/// before the linear head. Returns pre-softmax scores.
pub fn gate_conv(
    tape: &mut Tape,
    gates: &GateParams,
    seq: &TokenSequence,
    branch: u16,
    prompt_cond: Option<NodeId>,
) -> Result<NodeId> {
    let gate = gates
        .conv_gates
        .get(&branch)
        .ok_or_else(|| Error::Label(format!("no conv gate for branch {branch}")))?;
    let l = seq.layout.n_image;
    let side = (l as f64).sqrt().round() as usize;
    if side * side != l {
        return Err(Error::shape(
            "square image-token grid",
            format!("{l} tokens"),
        ));
    }
    let d = tape.graph.value(seq.id).shape()[1];
    // Image tokens only: cls excluded, prompts are folded in via the bias.
    let image_tokens = tape.graph.slice_rows(seq.id, 1, l);
    let grid = tape.graph.reshape(image_tokens, &[side, side, d]);
    let kernel = tape.param(&format!("gates.conv{branch}.kernel"), &gate.kernel);
    let conv_out = match gate.kind {
        ConvKind::Cdc => tape.graph.cdc(grid, kernel, gates.theta),
        ConvKind::Fadc => {
            let cfg = FadcConfig {
                low: gates.fadc_low,
                high: gates.fadc_high,
                forced_dilation: gates.forced_dilation,
            };
            // The dilation map is data-dependent but parameter-free: it is
            // computed from the grid values and treated as a constant.
            let map = fadc_dilation_map(tape.graph.value(grid), &cfg);
            tape.graph.dilated(grid, kernel, map)
        }
    };
    let conditioned = match prompt_cond {
        Some(bias) => tape.graph.add_chan_bias(conv_out, bias),
        None => conv_out,
    };
    let flat = tape.graph.reshape(conditioned, &[l, d]);
    let head_w = tape.param(&format!("gates.conv{branch}.head_w"), &gate.head_w);
    let head_b = tape.param(&format!("gates.conv{branch}.head_b"), &gate.head_b);
    let scores = tape.graph.matmul(flat, head_w);
    let scores = tape.graph.add_row_bias(scores, head_b);
    Ok(tape.graph.mean_rows(scores))
}

/// Full hierarchical top-1 routing. Level 1 routes over
/// {live, physical, digital}; live stops immediately; fake branches descend
/// with the selected prompts conditioning the next gate.
pub fn route_sample(
    tape: &mut Tape,
    taxonomy: &AttackTaxonomy,
    tree: &PromptTree,
    gates: &GateParams,
    seq: &TokenSequence,
) -> Result<RoutingTrace> {
    gates.check_taxonomy(taxonomy)?;
    tree.check_taxonomy(taxonomy)?;

    let mut levels = Vec::new();
    let mut indices = Vec::new();
    let mut node_path = Vec::new();
    let mut distributions = Vec::new();

    // Level 1.
    let candidates1 = taxonomy.level1_order();
    let scores1 = gate_level1(tape, gates, seq);
    let dist1 = tape.graph.softmax_vec(scores1);
    let dvals = tape.graph.value(dist1).data().to_vec();
    let idx1 = argmax(&dvals);
    let selected1 = candidates1[idx1];
    levels.push(RoutedLevel {
        candidates: candidates1.clone(),
        dist: dist1,
        selected_index: idx1,
    });
    indices.push(idx1);
    node_path.push(selected1);
    distributions.push(dvals);

    let stopped_at_live = selected1 == taxonomy.live_id();
    if !stopped_at_live {
        // Level 2: conditioned on the selected level-1 prompt.
        let block1 = tree.block_on_tape(tape, selected1)?;
        let cond1 = tape.graph.mean_rows(block1);
        let candidates2 = taxonomy.children(selected1);
        let scores2 = gate_conv(tape, gates, seq, selected1, Some(cond1))?;
        let dist2 = tape.graph.softmax_vec(scores2);
        let dvals2 = tape.graph.value(dist2).data().to_vec();
        let idx2 = argmax(&dvals2);
        let selected2 = candidates2[idx2];
        levels.push(RoutedLevel {
            candidates: candidates2,
            dist: dist2,
            selected_index: idx2,
        });
        indices.push(idx2);
        node_path.push(selected2);
        distributions.push(dvals2);

        // Level 3: conditioned on the mean of the level-1/2 prompts.
        let block2 = tree.block_on_tape(tape, selected2)?;
        let half = tape.input(Tensor::from_vec(&[2], vec![0.5, 0.5]));
        let mean12 = tape.graph.blend(&[block1, block2], half);
        let cond2 = tape.graph.mean_rows(mean12);
        let candidates3 = taxonomy.children(selected2);
        let scores3 = gate_conv(tape, gates, seq, selected2, Some(cond2))?;
        let dist3 = tape.graph.softmax_vec(scores3);
        let dvals3 = tape.graph.value(dist3).data().to_vec();
        let idx3 = argmax(&dvals3);
        let selected3 = candidates3[idx3];
        levels.push(RoutedLevel {
            candidates: candidates3,
            dist: dist3,
            selected_index: idx3,
        });
        indices.push(idx3);
        node_path.push(selected3);
        distributions.push(dvals3);
    }

    Ok(RoutingTrace {
        decision: RoutingDecision {
            indices,
            node_path,
            distributions,
            stopped_at_live,
        },
        levels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::{patch_embed, Encoder};
    use crate::model::ModelConfig;
    use crate::taxonomy::build_taxonomy;
    use crate::vptree::init_prompt_tree;
    use rand::SeedableRng;

    fn test_rig() -> (AttackTaxonomy, Encoder, PromptTree, GateParams) {
        let tax = build_taxonomy();
        let cfg = ModelConfig::default();
        let enc = Encoder::new(cfg.encoder.clone(), 1).unwrap();
        let tree = init_prompt_tree(&tax, cfg.prompt_length, cfg.encoder.visual_dim, 2).unwrap();
        let gates = GateParams::new(&tax, &cfg, 3).unwrap();
        (tax, enc, tree, gates)
    }

    fn random_image(seed: u64) -> Tensor {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        Tensor::randn(&[3, 32, 32], 0.5, &mut rng)
    }

    use rand_chacha::ChaCha12Rng;

    #[test]
    fn gate_arity_matches_child_counts() {
        let (tax, _, _, gates) = test_rig();
        assert_eq!(gates.w1.shape()[1], 3);
        assert_eq!(gates.conv_gates.len(), 7);
        for (parent, gate) in &gates.conv_gates {
            assert_eq!(gate.head_w.shape()[1], tax.children(*parent).len());
            let l1 = tax.level1_ancestor(*parent).unwrap();
            let expect = if tax.node(l1).unwrap().name == PHYSICAL {
                ConvKind::Cdc
            } else {
                ConvKind::Fadc
            };
            assert_eq!(gate.kind, expect);
        }
    }

    #[test]
    fn cdc_theta_zero_is_vanilla_and_matches_brute_force() {
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        let grid = Tensor::randn(&[5, 5, 2], 1.0, &mut rng);
        let kernel = Tensor::randn(&[3, 2, 3, 3], 1.0, &mut rng);

        // theta = 0: vanilla convolution via independent per-pixel loops.
        let vanilla = cdc_conv(&grid, &kernel, 0.0).unwrap();
        let oracle = brute_force_cdc(&grid, &kernel, 0.0);
        assert!(vanilla.max_abs_diff(&oracle) < 1e-12);

        // theta = 0.7 matches the brute-force form too.
        let got = cdc_conv(&grid, &kernel, 0.7).unwrap();
        let oracle = brute_force_cdc(&grid, &kernel, 0.7);
        assert!(got.max_abs_diff(&oracle) < 1e-12);

        // theta = 1 on constant input: zero in the interior.
        let grid = Tensor::filled(&[5, 5, 2], 2.5);
        let got = cdc_conv(&grid, &kernel, 1.0).unwrap();
        for y in 1..4 {
            for x in 1..4 {
                for oc in 0..3 {
                    assert!(got.data()[(y * 5 + x) * 3 + oc].abs() < 1e-12);
                }
            }
        }

        assert!(cdc_conv(&grid, &kernel, 1.5).is_err());
    }

    /// Independent per-output-pixel evaluation of the CDC form.
    fn brute_force_cdc(grid: &Tensor, kernel: &Tensor, theta: f64) -> Tensor {
        let (h, w, cin) = (grid.shape()[0], grid.shape()[1], grid.shape()[2]);
        let (cout, kh, kw) = (kernel.shape()[0], kernel.shape()[2], kernel.shape()[3]);
        let mut out = Tensor::zeros(&[h, w, cout]);
        for y0 in 0..h as isize {
            for x0 in 0..w as isize {
                for oc in 0..cout {
                    let mut acc = 0.0;
                    for ic in 0..cin {
                        for ky in 0..kh as isize {
                            for kx in 0..kw as isize {
                                let wv = kernel.data()
                                    [((oc * cin + ic) * kh + ky as usize) * kw + kx as usize];
                                let yy = y0 + ky - (kh / 2) as isize;
                                let xx = x0 + kx - (kw / 2) as isize;
                                let xv = if yy >= 0 && yy < h as isize && xx >= 0 && xx < w as isize
                                {
                                    grid.data()[((yy as usize) * w + xx as usize) * cin + ic]
                                } else {
                                    0.0
                                };
                                let center = grid.data()[(y0 as usize * w + x0 as usize) * cin + ic];
                                acc += wv * (xv - theta * center);
                            }
                        }
                    }
                    out.data_mut()[(y0 as usize * w + x0 as usize) * cout + oc] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn fadc_degenerate_and_oracle_cases() {
        let mut rng = ChaCha12Rng::seed_from_u64(6);
        let grid = Tensor::randn(&[6, 6, 2], 1.0, &mut rng);
        let kernel = Tensor::randn(&[2, 2, 3, 3], 1.0, &mut rng);

        // Forced dilation 1 equals vanilla convolution.
        let forced = FadcConfig { low: 0.1, high: 0.5, forced_dilation: Some(1) };
        let out = fadc_conv(&grid, &kernel, &forced).unwrap();
        let vanilla = cdc_conv(&grid, &kernel, 0.0).unwrap();
        assert!(out.grid.max_abs_diff(&vanilla) < 1e-12);
        assert!(out.dilations.iter().all(|&d| d == 1));

        // Constant input: Laplacian energy 0 -> dilation 1 everywhere.
        let flat = Tensor::filled(&[6, 6, 2], 1.23);
        let cfg = FadcConfig { low: 0.1, high: 0.5, forced_dilation: None };
        let out = fadc_conv(&flat, &kernel, &cfg).unwrap();
        assert!(out.dilations.iter().all(|&d| d == 1));

        // Random input: per-pixel brute force with the recorded map.
        let cfg = FadcConfig { low: 0.05, high: 0.3, forced_dilation: None };
        let out = fadc_conv(&grid, &kernel, &cfg).unwrap();
        let oracle = brute_force_dilated(&grid, &kernel, &out.dilations);
        assert!(out.grid.max_abs_diff(&oracle) < 1e-12);
        assert!(out.dilations.iter().any(|&d| d > 1), "map never adapted");
    }

    fn brute_force_dilated(grid: &Tensor, kernel: &Tensor, map: &[u8]) -> Tensor {
        let (h, w, cin) = (grid.shape()[0], grid.shape()[1], grid.shape()[2]);
        let (cout, kh, kw) = (kernel.shape()[0], kernel.shape()[2], kernel.shape()[3]);
        let mut out = Tensor::zeros(&[h, w, cout]);
        for y0 in 0..h as isize {
            for x0 in 0..w as isize {
                let d = map[y0 as usize * w + x0 as usize] as isize;
                for oc in 0..cout {
                    let mut acc = 0.0;
                    for ic in 0..cin {
                        for ky in 0..kh as isize {
                            for kx in 0..kw as isize {
                                let yy = y0 + (ky - (kh / 2) as isize) * d;
                                let xx = x0 + (kx - (kw / 2) as isize) * d;
                                if yy < 0 || yy >= h as isize || xx < 0 || xx >= w as isize {
                                    continue;
                                }
                                acc += kernel.data()
                                    [((oc * cin + ic) * kh + ky as usize) * kw + kx as usize]
                                    * grid.data()[(yy as usize * w + xx as usize) * cin + ic];
                            }
                        }
                    }
                    out.data_mut()[(y0 as usize * w + x0 as usize) * cout + oc] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn level1_gate_zero_weight_returns_bias() {
        let (_, enc, _, mut gates) = test_rig();
        gates.w1 = Tensor::zeros(gates.w1.shape());
        gates.b1 = Tensor::from_vec(&[3], vec![1.0, 2.0, 3.0]);
        let mut tape = Tape::new();
        let seq = patch_embed(&mut tape, &enc, &random_image(7)).unwrap();
        let scores = gate_level1(&mut tape, &gates, &seq);
        let v = tape.graph.value(scores);
        assert!(v.max_abs_diff(&Tensor::from_vec(&[3], vec![1.0, 2.0, 3.0])) < 1e-12);

        // Softmax of (1, 2, 3) and its argmax.
        let sm = crate::math::softmax_slice(v.data());
        assert!((sm[0] - 0.09003057).abs() < 1e-7);
        assert!((sm[1] - 0.24472847).abs() < 1e-7);
        assert!((sm[2] - 0.66524096).abs() < 1e-7);
        assert_eq!(argmax(&sm), 2);
    }

    #[test]
    fn level1_gate_column_permutation_permutes_scores() {
        let (_, enc, _, mut gates) = test_rig();
        let mut rng = ChaCha12Rng::seed_from_u64(12);
        gates.w1 = Tensor::randn(&[64, 3], 0.5, &mut rng);
        gates.b1 = Tensor::zeros(&[3]);
        let img = random_image(13);
        let score = |gates: &GateParams| -> Vec<f64> {
            let mut tape = Tape::new();
            let seq = patch_embed(&mut tape, &enc, &img).unwrap();
            let s = gate_level1(&mut tape, gates, &seq);
            tape.graph.value(s).data().to_vec()
        };
        let base = score(&gates);
        // Swap columns 0 and 2 of w1.
        let mut swapped = gates.w1.clone();
        for r in 0..64 {
            let tmp = swapped.data()[r * 3];
            swapped.data_mut()[r * 3] = swapped.data()[r * 3 + 2];
            swapped.data_mut()[r * 3 + 2] = tmp;
        }
        gates.w1 = swapped;
        let perm = score(&gates);
        assert!((perm[0] - base[2]).abs() < 1e-12);
        assert!((perm[2] - base[0]).abs() < 1e-12);
        assert!((perm[1] - base[1]).abs() < 1e-12);
    }

    #[test]
    fn conv_gate_arities_and_zero_kernel_bias() {
        let (tax, enc, tree, mut gates) = test_rig();
        let physical = tax.node_by_name(PHYSICAL).unwrap().id;
        let two_d = tax.children(physical)[0];
        let digital = tax.node_by_name(crate::taxonomy::DIGITAL).unwrap().id;
        let adversarial = tax.children(digital)[1];

        let mut tape = Tape::new();
        let seq = patch_embed(&mut tape, &enc, &random_image(21)).unwrap();
        let cond = tree.block_on_tape(&mut tape, physical).unwrap();
        let cond = tape.graph.mean_rows(cond);

        // physical/2D branch: 3 children (print, replay, cutouts).
        let s = gate_conv(&mut tape, &gates, &seq, two_d, Some(cond)).unwrap();
        assert_eq!(tape.graph.value(s).len(), 3);

        // digital/adversarial branch: 2 children.
        let s = gate_conv(&mut tape, &gates, &seq, adversarial, None).unwrap();
        assert_eq!(tape.graph.value(s).len(), 2);

        // Zero kernels and zero conditioning: scores equal the head bias.
        let gate = gates.conv_gates.get_mut(&two_d).unwrap();
        gate.kernel = Tensor::zeros(gate.kernel.shape());
        gate.head_w = Tensor::zeros(gate.head_w.shape());
        gate.head_b = Tensor::from_vec(&[3], vec![0.4, -0.2, 0.9]);
        let mut tape = Tape::new();
        let seq = patch_embed(&mut tape, &enc, &random_image(22)).unwrap();
        let s = gate_conv(&mut tape, &gates, &seq, two_d, None).unwrap();
        assert!(tape
            .graph
            .value(s)
            .max_abs_diff(&Tensor::from_vec(&[3], vec![0.4, -0.2, 0.9]))
            < 1e-12);
    }

    #[test]
    fn forced_routing_reaches_expected_indices() {
        let (tax, enc, tree, mut gates) = test_rig();
        // Force level 1 toward digital (index 2), level 2 toward adversarial
        // (index 1), level 3 toward pixel-level (index 0) with bias-only gates.
        gates.w1 = Tensor::zeros(gates.w1.shape());
        gates.b1 = Tensor::from_vec(&[3], vec![0.0, 0.0, 5.0]);
        let digital = tax.node_by_name(crate::taxonomy::DIGITAL).unwrap().id;
        let adversarial = tax.children(digital)[1];
        {
            let g = gates.conv_gates.get_mut(&digital).unwrap();
            g.kernel = Tensor::zeros(g.kernel.shape());
            g.head_w = Tensor::zeros(g.head_w.shape());
            g.head_b = Tensor::from_vec(&[3], vec![0.0, 4.0, 0.0]);
        }
        {
            let g = gates.conv_gates.get_mut(&adversarial).unwrap();
            g.kernel = Tensor::zeros(g.kernel.shape());
            g.head_w = Tensor::zeros(g.head_w.shape());
            g.head_b = Tensor::from_vec(&[2], vec![3.0, 0.0]);
        }
        let mut tape = Tape::new();
        let seq = patch_embed(&mut tape, &enc, &random_image(31)).unwrap();
        let trace = route_sample(&mut tape, &tax, &tree, &gates, &seq).unwrap();
        assert_eq!(trace.decision.indices, vec![2, 1, 0]);
        assert!(!trace.decision.stopped_at_live);
        assert_eq!(trace.decision.distributions.len(), 3);
        for dist in &trace.decision.distributions {
            assert!((dist.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }

        // Live shortcut: level-1 argmax live -> no level 2/3 entries.
        gates.b1 = Tensor::from_vec(&[3], vec![5.0, 0.0, 0.0]);
        let mut tape = Tape::new();
        let seq = patch_embed(&mut tape, &enc, &random_image(32)).unwrap();
        let trace = route_sample(&mut tape, &tax, &tree, &gates, &seq).unwrap();
        assert!(trace.decision.stopped_at_live);
        assert_eq!(trace.decision.indices, vec![0]);
        assert_eq!(trace.levels.len(), 1);

        // Exact tie at level 1: lowest index wins.
        gates.b1 = Tensor::zeros(&[3]);
        let mut tape = Tape::new();
        let seq = patch_embed(&mut tape, &enc, &random_image(33)).unwrap();
        let trace = route_sample(&mut tape, &tax, &tree, &gates, &seq).unwrap();
        assert_eq!(trace.decision.indices[0], 0);
        assert!(trace.decision.stopped_at_live);
    }

    #[test]
    fn argmax_index_invariant_under_logit_shift() {
        let logits = vec![0.3, 1.7, -0.4];
        let shifted: Vec<f64> = logits.iter().map(|v| v + 123.4).collect();
        let p1 = crate::math::softmax_slice(&logits);
        let p2 = crate::math::softmax_slice(&shifted);
        assert_eq!(argmax(&p1), argmax(&p2));
        // Softmax itself is shift-invariant as well.
        for (a, b) in p1.iter().zip(&p2) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
