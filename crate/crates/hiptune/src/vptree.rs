//! The visual prompt tree: one learnable prompt block per taxonomy node,
//! supervised path selection for stage-1 training, prompt integration by
//! elementwise averaging, and encoder-input assembly.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::encoders::{TokenLayout, TokenSequence};
use crate::error::{Error, Result};
use crate::math::graph::NodeId;
use crate::math::Tensor;
use crate::model::Tape;
use crate::taxonomy::AttackTaxonomy;

pub const PROMPT_INIT_STD: f64 = 0.02;

/// Learnable prompt blocks, one per taxonomy node, all (L_p, D).
pub struct PromptTree {
    pub prompt_length: usize,
    pub dim: usize,
    /// Stage flag: stage-2 freezes the blocks.
    pub frozen: bool,
    taxonomy_hash: u64,
    blocks: BTreeMap<u16, Tensor>,
}

/// Initialize one i.i.d. normal prompt block per taxonomy node.
pub fn init_prompt_tree(
    taxonomy: &AttackTaxonomy,
    prompt_length: usize,
    dim: usize,
    seed: u64,
) -> Result<PromptTree> {
    if prompt_length == 0 {
        return Err(Error::Config("prompt length must be >= 1".into()));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut blocks = BTreeMap::new();
    for node in taxonomy.nodes() {
        blocks.insert(
            node.id,
            Tensor::randn(&[prompt_length, dim], PROMPT_INIT_STD, &mut rng),
        );
    }
    Ok(PromptTree {
        prompt_length,
        dim,
        frozen: false,
        taxonomy_hash: taxonomy.hash(),
        blocks,
    })
}

impl PromptTree {
    pub fn n_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn node_ids(&self) -> Vec<u16> {
        self.blocks.keys().copied().collect()
    }

    pub fn block(&self, node_id: u16) -> Result<&Tensor> {
        self.blocks
            .get(&node_id)
            .ok_or_else(|| Error::Label(format!("no prompt block for node {node_id}")))
    }

    pub fn block_mut(&mut self, node_id: u16) -> Result<&mut Tensor> {
        self.blocks
            .get_mut(&node_id)
            .ok_or_else(|| Error::Label(format!("no prompt block for node {node_id}")))
    }

    /// The tree is bound to the taxonomy it was created from.
    pub fn check_taxonomy(&self, taxonomy: &AttackTaxonomy) -> Result<()> {
        if taxonomy.hash() != self.taxonomy_hash {
            return Err(Error::Invariant(
                "prompt tree does not match this taxonomy".into(),
            ));
        }
        Ok(())
    }

    pub fn taxonomy_hash(&self) -> u64 {
        self.taxonomy_hash
    }

    pub fn param_name(node_id: u16) -> String {
        format!("tree.node{node_id}")
    }

    /// Lease a block onto a tape.
    pub fn block_on_tape(&self, tape: &mut Tape, node_id: u16) -> Result<NodeId> {
        let block = self.block(node_id)?;
        Ok(tape.param(&Self::param_name(node_id), block))
    }

    pub fn collect_params<'a>(&'a self, map: &mut BTreeMap<String, &'a Tensor>) {
        for (id, b) in &self.blocks {
            map.insert(Self::param_name(*id), b);
        }
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        let id: u16 = name.strip_prefix("tree.node")?.parse().ok()?;
        self.blocks.get_mut(&id)
    }

    pub fn checksum(&self) -> u64 {
        let mut h = crate::math::fnv1a_init();
        for (id, b) in &self.blocks {
            h = crate::math::fnv1a_u64(h, *id as u64);
            h = crate::math::fnv1a_u64(h, b.checksum());
        }
        h
    }
}

/// A selected chain of prompt nodes: the single live node, or a
/// (level-1, level-2, level-3) parent chain.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PromptPath {
    /// (level, node id) pairs, outermost first.
    pub steps: Vec<(u8, u16)>,
}

impl PromptPath {
    pub fn live(live_id: u16) -> Self {
        PromptPath {
            steps: vec![(1, live_id)],
        }
    }

    pub fn chain(path: (u16, u16, u16)) -> Self {
        PromptPath {
            steps: vec![(1, path.0), (2, path.1), (3, path.2)],
        }
    }

    pub fn node_ids(&self) -> Vec<u16> {
        self.steps.iter().map(|(_, id)| *id).collect()
    }
}

/// Stage-1 supervised prompt selection. A fake sample takes its labeled
/// chain; a live sample paired with a fake partner takes the partner's
/// chain; an unpaired live sample takes the live node alone.
pub fn select_supervised_path(
    taxonomy: &AttackTaxonomy,
    sample_path: Option<(u16, u16, u16)>,
    partner_path: Option<(u16, u16, u16)>,
) -> Result<PromptPath> {
    match sample_path {
        Some(path) => {
            taxonomy.validate_path(path)?;
            Ok(PromptPath::chain(path))
        }
        None => match partner_path {
            Some(path) => {
                taxonomy.validate_path(path)?;
                Ok(PromptPath::chain(path))
            }
            None => Ok(PromptPath::live(taxonomy.live_id())),
        },
    }
}

/// Elementwise arithmetic mean of the selected blocks. A single-block path
/// returns the block unchanged.
pub fn integrate_prompts(tree: &PromptTree, path: &PromptPath) -> Result<Tensor> {
    if path.steps.is_empty() {
        return Err(Error::Contract("empty prompt path".into()));
    }
    let mut acc: Option<Tensor> = None;
    for (_, id) in &path.steps {
        let block = tree.block(*id)?;
        match &mut acc {
            None => acc = Some(block.clone()),
            Some(t) => {
                if !t.same_shape(block) {
                    return Err(Error::shape(t.shape_string(), block.shape_string()));
                }
                t.add_scaled(block, 1.0);
            }
        }
    }
    let mut out = acc.expect("non-empty path");
    out.scale_in_place(1.0 / path.steps.len() as f64);
    Ok(out)
}

/// Tape version of [`integrate_prompts`]: mean of the leased blocks.
pub fn integrate_prompts_on_tape(
    tape: &mut Tape,
    tree: &PromptTree,
    path: &PromptPath,
) -> Result<NodeId> {
    if path.steps.is_empty() {
        return Err(Error::Contract("empty prompt path".into()));
    }
    let blocks: Vec<NodeId> = path
        .steps
        .iter()
        .map(|(_, id)| tree.block_on_tape(tape, *id))
        .collect::<Result<Vec<_>>>()?;
    if blocks.len() == 1 {
        return Ok(blocks[0]);
    }
    let n = blocks.len();
    let weights = tape.input(Tensor::filled(&[n], 1.0 / n as f64));
    Ok(tape.graph.blend(&blocks, weights))
}

/// Concatenate prompt tokens after the image tokens:
/// `[cls | image | prompt]`, updating the span layout.
pub fn assemble_encoder_input(
    tape: &mut Tape,
    seq: &TokenSequence,
    prompt: NodeId,
) -> Result<TokenSequence> {
    let pshape = tape.graph.value(prompt).shape().to_vec();
    let tshape = tape.graph.value(seq.id).shape().to_vec();
    if pshape.len() != 2 || pshape[0] == 0 {
        return Err(Error::shape("non-empty (L_p, D) prompt", format!("{pshape:?}")));
    }
    if pshape[1] != tshape[1] {
        return Err(Error::shape(
            format!("prompt dim {}", tshape[1]),
            format!("{}", pshape[1]),
        ));
    }
    if seq.layout.n_prompt != 0 {
        return Err(Error::Contract("sequence already carries prompts".into()));
    }
    let id = tape.graph.concat_rows(seq.id, prompt);
    Ok(TokenSequence {
        id,
        layout: TokenLayout {
            n_image: seq.layout.n_image,
            n_prompt: pshape[0],
        },
    })
}
