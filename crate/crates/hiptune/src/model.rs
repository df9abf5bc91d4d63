//! The assembled model: taxonomy, frozen dual encoder, prompt tree, routing
//! gates, integration parameters and baselines, plus the [`Tape`] used to
//! record per-sample forward passes for training.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::app::GateParams;
use crate::dataset::mix_seed;
use crate::dpi::DpiParams;
use crate::encoders::{CoopBaseline, Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::math::graph::{Graph, NodeId};
use crate::math::{fnv1a_init, fnv1a_u64, Tensor};
use crate::taxonomy::AttackTaxonomy;
use crate::vptree::{init_prompt_tree, PromptTree};

/// A recording of one forward pass: a [`Graph`] plus the mapping from
/// parameter names to their leaf nodes, cached so each parameter enters the
/// graph exactly once and its gradient accumulates in one place.
pub struct Tape {
    pub graph: Graph,
    leaves: BTreeMap<String, NodeId>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            graph: Graph::new(),
            leaves: BTreeMap::new(),
        }
    }

    /// Leaf for a named parameter; repeated calls return the same node.
    pub fn param(&mut self, name: &str, value: &Tensor) -> NodeId {
        if let Some(id) = self.leaves.get(name) {
            return *id;
        }
        let id = self.graph.leaf(value.clone());
        self.leaves.insert(name.to_string(), id);
        id
    }

    /// Leaf for an unnamed input (no gradient is collected for it).
    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.graph.leaf(value)
    }

    /// Run backward from the seeds and collect per-parameter gradients.
    pub fn param_grads(&self, seeds: &[(NodeId, Tensor)]) -> BTreeMap<String, Tensor> {
        let grads = self.graph.backward(seeds);
        let mut out = BTreeMap::new();
        for (name, id) in &self.leaves {
            if let Some(g) = grads.get(*id) {
                out.insert(name.clone(), g.clone());
            }
        }
        out
    }
}

/// Accumulate `delta` gradients into `total` (missing keys are inserted).
pub fn merge_grads(total: &mut BTreeMap<String, Tensor>, delta: &BTreeMap<String, Tensor>) {
    for (name, g) in delta {
        match total.get_mut(name) {
            Some(t) => t.add_scaled(g, 1.0),
            None => {
                total.insert(name.clone(), g.clone());
            }
        }
    }
}

/// Structural knobs that live outside the encoder config.
#[derive(Clone, Debug)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    /// Prompt length L_p (tokens per prompt block).
    pub prompt_length: usize,
    /// CDC theta.
    pub theta: f64,
    /// FADC dilation-selector thresholds (low, high) on Laplacian energy.
    pub fadc_thresholds: (f64, f64),
    /// Enables the cross-level self-attention block inside DPI.
    pub dpi_attention: bool,
    /// Re-inject the integrated prompt at every transformer depth.
    pub depth_insertion: bool,
    /// Context length M for the CoOp-style baselines.
    pub baseline_context_length: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            encoder: EncoderConfig::default(),
            prompt_length: 8,
            theta: 0.7,
            fadc_thresholds: (0.05, 0.2),
            dpi_attention: true,
            depth_insertion: false,
            baseline_context_length: 16,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.prompt_length < 1 {
            return Err(Error::Config("prompt_length must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.theta) {
            return Err(Error::Config(format!(
                "theta must lie in [0, 1], got {}",
                self.theta
            )));
        }
        if self.fadc_thresholds.0 > self.fadc_thresholds.1 {
            return Err(Error::Config("fadc thresholds must be ordered".into()));
        }
        if self.baseline_context_length < 1 {
            return Err(Error::Config("baseline context length must be >= 1".into()));
        }
        let needed = self
            .prompt_length
            .max(self.baseline_context_length)
            .max(self.encoder.template_length)
            + 1;
        if self.encoder.max_text_tokens < needed {
            return Err(Error::Config(format!(
                "max_text_tokens {} cannot hold {} context tokens plus a class token",
                self.encoder.max_text_tokens, needed - 1
            )));
        }
        Ok(())
    }
}

pub struct Model {
    pub taxonomy: AttackTaxonomy,
    pub cfg: ModelConfig,
    pub encoder: Encoder,
    pub tree: PromptTree,
    pub gates: GateParams,
    pub dpi: DpiParams,
    pub coop_unified: CoopBaseline,
    pub coop_specific: CoopBaseline,
}

impl Model {
    pub fn new(taxonomy: AttackTaxonomy, cfg: ModelConfig, seed: u64) -> Result<Model> {
        cfg.validate()?;
        let encoder = Encoder::new(cfg.encoder.clone(), mix_seed(seed, &[11]))?;
        let tree = init_prompt_tree(
            &taxonomy,
            cfg.prompt_length,
            cfg.encoder.visual_dim,
            mix_seed(seed, &[12]),
        )?;
        let gates = GateParams::new(&taxonomy, &cfg, mix_seed(seed, &[13]))?;
        let dpi = DpiParams::new(&cfg, mix_seed(seed, &[14]));
        let mut rng = ChaCha12Rng::seed_from_u64(mix_seed(seed, &[15]));
        let coop_unified = CoopBaseline::new(
            cfg.baseline_context_length,
            false,
            cfg.encoder.text_dim,
            &mut rng,
        );
        let coop_specific = CoopBaseline::new(
            cfg.baseline_context_length,
            true,
            cfg.encoder.text_dim,
            &mut rng,
        );
        Ok(Model {
            taxonomy,
            cfg,
            encoder,
            tree,
            gates,
            dpi,
            coop_unified,
            coop_specific,
        })
    }

    /// All named parameters, sorted by name (BTreeMap iteration order).
    pub fn params(&self) -> BTreeMap<String, &Tensor> {
        let mut map = BTreeMap::new();
        self.encoder.collect_params(&mut map);
        self.tree.collect_params(&mut map);
        self.gates.collect_params(&mut map);
        self.dpi.collect_params(&mut map);
        self.coop_unified.collect_params("coop_unified", &mut map);
        self.coop_specific.collect_params("coop_specific", &mut map);
        map
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        if let Some(t) = self.encoder.param_mut(name) {
            return Some(t);
        }
        if let Some(t) = self.tree.param_mut(name) {
            return Some(t);
        }
        if let Some(t) = self.gates.param_mut(name) {
            return Some(t);
        }
        if let Some(t) = self.dpi.param_mut(name) {
            return Some(t);
        }
        if let Some(t) = self.coop_unified.param_mut("coop_unified", name) {
            return Some(t);
        }
        if let Some(t) = self.coop_specific.param_mut("coop_specific", name) {
            return Some(t);
        }
        None
    }

    /// Checksum over every parameter whose name starts with `prefix`.
    pub fn checksum_of(&self, prefix: &str) -> u64 {
        let mut h = fnv1a_init();
        for (name, t) in self.params() {
            if name.starts_with(prefix) {
                h = fnv1a_u64(h, t.checksum());
            }
        }
        h
    }
}
