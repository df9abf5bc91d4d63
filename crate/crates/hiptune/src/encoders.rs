//! Frozen dual encoder standing in for CLIP: a patch-embedding vision
//! transformer that accepts appended prompt tokens, a small text transformer
//! consuming learned vector contexts, and the cosine-similarity probability
//! head. A short supervised warm-up (the pretraining substitute, see the
//! training module) gives the towers class-relevant structure before they
//! are frozen; prompt and gate tuning never touches them again.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::math::graph::NodeId;
use crate::math::{softmax_slice, Tensor};
use crate::model::Tape;

pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub image_size: usize,
    pub patch_size: usize,
    /// Vision transformer width D.
    pub visual_dim: usize,
    /// Text transformer width; also the joint embedding dimension the
    /// vision feature is projected into for the cosine head.
    pub text_dim: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    /// Softmax temperature for the probability head (fixed, not learned).
    pub temperature: f64,
    /// Capacity of the text positional table (longest context + class token).
    pub max_text_tokens: usize,
    /// Length of the fixed template context pair used by the zero-shot
    /// comparator and the pretraining substitute.
    pub template_length: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            image_size: 32,
            patch_size: 4,
            visual_dim: 64,
            text_dim: 32,
            n_layers: 4,
            n_heads: 4,
            temperature: 0.07,
            max_text_tokens: 17,
            template_length: 8,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "image_size {} not divisible by patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.temperature <= 0.0 {
            return Err(Error::Config("temperature must be positive".into()));
        }
        if self.visual_dim % self.n_heads != 0 || self.text_dim % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "dims ({}, {}) must be divisible by head count {}",
                self.visual_dim, self.text_dim, self.n_heads
            )));
        }
        if self.n_layers == 0 || self.max_text_tokens < self.template_length + 1 {
            return Err(Error::Config("bad transformer geometry".into()));
        }
        Ok(())
    }

    /// Image token count l = (image_size / patch_size)^2.
    pub fn n_image_tokens(&self) -> usize {
        let side = self.image_size / self.patch_size;
        side * side
    }

    pub fn patch_dim(&self) -> usize {
        crate::dataset::CHANNELS * self.patch_size * self.patch_size
    }
}

/// Span layout of a token sequence: `[cls | image tokens | prompt tokens]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TokenLayout {
    pub n_image: usize,
    pub n_prompt: usize,
}

impl TokenLayout {
    pub fn total(&self) -> usize {
        1 + self.n_image + self.n_prompt
    }
}

/// A token matrix on a tape, with its span layout.
#[derive(Clone, Copy, Debug)]
pub struct TokenSequence {
    pub id: NodeId,
    pub layout: TokenLayout,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ClassTag {
    Live = 0,
    Fake = 1,
}

struct LayerParams {
    ln1_g: Tensor,
    ln1_b: Tensor,
    w_q: Tensor,
    b_q: Tensor,
    w_k: Tensor,
    b_k: Tensor,
    w_v: Tensor,
    b_v: Tensor,
    w_o: Tensor,
    b_o: Tensor,
    ln2_g: Tensor,
    ln2_b: Tensor,
    w_fc1: Tensor,
    b_fc1: Tensor,
    w_fc2: Tensor,
    b_fc2: Tensor,
}

impl LayerParams {
    fn new(dim: usize, rng: &mut ChaCha12Rng) -> Self {
        let hidden = 4 * dim;
        LayerParams {
            ln1_g: Tensor::filled(&[dim], 1.0),
            ln1_b: Tensor::zeros(&[dim]),
            w_q: Tensor::randn(&[dim, dim], INIT_STD, rng),
            b_q: Tensor::zeros(&[dim]),
            w_k: Tensor::randn(&[dim, dim], INIT_STD, rng),
            b_k: Tensor::zeros(&[dim]),
            w_v: Tensor::randn(&[dim, dim], INIT_STD, rng),
            b_v: Tensor::zeros(&[dim]),
            w_o: Tensor::randn(&[dim, dim], INIT_STD, rng),
            b_o: Tensor::zeros(&[dim]),
            ln2_g: Tensor::filled(&[dim], 1.0),
            ln2_b: Tensor::zeros(&[dim]),
            w_fc1: Tensor::randn(&[dim, hidden], INIT_STD, rng),
            b_fc1: Tensor::zeros(&[hidden]),
            w_fc2: Tensor::randn(&[hidden, dim], INIT_STD, rng),
            b_fc2: Tensor::zeros(&[dim]),
        }
    }

    fn fields(&self) -> [(&'static str, &Tensor); 16] {
        [
            ("ln1_g", &self.ln1_g),
            ("ln1_b", &self.ln1_b),
            ("w_q", &self.w_q),
            ("b_q", &self.b_q),
            ("w_k", &self.w_k),
            ("b_k", &self.b_k),
            ("w_v", &self.w_v),
            ("b_v", &self.b_v),
            ("w_o", &self.w_o),
            ("b_o", &self.b_o),
            ("ln2_g", &self.ln2_g),
            ("ln2_b", &self.ln2_b),
            ("w_fc1", &self.w_fc1),
            ("b_fc1", &self.b_fc1),
            ("w_fc2", &self.w_fc2),
            ("b_fc2", &self.b_fc2),
        ]
    }

    fn field_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        Some(match name {
            "ln1_g" => &mut self.ln1_g,
            "ln1_b" => &mut self.ln1_b,
            "w_q" => &mut self.w_q,
            "b_q" => &mut self.b_q,
            "w_k" => &mut self.w_k,
            "b_k" => &mut self.b_k,
            "w_v" => &mut self.w_v,
            "b_v" => &mut self.b_v,
            "w_o" => &mut self.w_o,
            "b_o" => &mut self.b_o,
            "ln2_g" => &mut self.ln2_g,
            "ln2_b" => &mut self.ln2_b,
            "w_fc1" => &mut self.w_fc1,
            "b_fc1" => &mut self.b_fc1,
            "w_fc2" => &mut self.w_fc2,
            "b_fc2" => &mut self.b_fc2,
            _ => return None,
        })
    }
}

/// One transformer block on the tape.
fn layer_forward(tape: &mut Tape, prefix: &str, lp: &LayerParams, heads: usize, x: NodeId) -> NodeId {
    let p = |tape: &mut Tape, f: &str, t: &Tensor| tape.param(&format!("{prefix}.{f}"), t);
    let ln1_g = p(tape, "ln1_g", &lp.ln1_g);
    let ln1_b = p(tape, "ln1_b", &lp.ln1_b);
    let h = tape.graph.layer_norm(x, ln1_g, ln1_b);
    let w_q = p(tape, "w_q", &lp.w_q);
    let b_q = p(tape, "b_q", &lp.b_q);
    let w_k = p(tape, "w_k", &lp.w_k);
    let b_k = p(tape, "b_k", &lp.b_k);
    let w_v = p(tape, "w_v", &lp.w_v);
    let b_v = p(tape, "b_v", &lp.b_v);
    let q = tape.graph.matmul(h, w_q);
    let q = tape.graph.add_row_bias(q, b_q);
    let k = tape.graph.matmul(h, w_k);
    let k = tape.graph.add_row_bias(k, b_k);
    let v = tape.graph.matmul(h, w_v);
    let v = tape.graph.add_row_bias(v, b_v);
    let attn = tape.graph.mha(q, k, v, heads);
    let w_o = p(tape, "w_o", &lp.w_o);
    let b_o = p(tape, "b_o", &lp.b_o);
    let o = tape.graph.matmul(attn, w_o);
    let o = tape.graph.add_row_bias(o, b_o);
    let x = tape.graph.add(x, o);

    let ln2_g = p(tape, "ln2_g", &lp.ln2_g);
    let ln2_b = p(tape, "ln2_b", &lp.ln2_b);
    let h2 = tape.graph.layer_norm(x, ln2_g, ln2_b);
    let w_fc1 = p(tape, "w_fc1", &lp.w_fc1);
    let b_fc1 = p(tape, "b_fc1", &lp.b_fc1);
    let w_fc2 = p(tape, "w_fc2", &lp.w_fc2);
    let b_fc2 = p(tape, "b_fc2", &lp.b_fc2);
    let f1 = tape.graph.matmul(h2, w_fc1);
    let f1 = tape.graph.add_row_bias(f1, b_fc1);
    let f1 = tape.graph.gelu(f1);
    let f2 = tape.graph.matmul(f1, w_fc2);
    let f2 = tape.graph.add_row_bias(f2, b_fc2);
    tape.graph.add(x, f2)
}

struct VisionTower {
    patch_w: Tensor,
    patch_b: Tensor,
    pos: Tensor,
    cls: Tensor,
    layers: Vec<LayerParams>,
    ln_g: Tensor,
    ln_b: Tensor,
    /// Projection into the joint (text) embedding dimension.
    proj: Tensor,
}

struct TextTower {
    pos: Tensor,
    layers: Vec<LayerParams>,
    ln_g: Tensor,
    ln_b: Tensor,
}

pub struct Encoder {
    pub cfg: EncoderConfig,
    vision: VisionTower,
    text: TextTower,
    /// Learned class-token embeddings: [live, fake], each (1, text_dim).
    class_embeds: [Tensor; 2],
    /// Fixed learned template context (the zero-shot comparator's prompt).
    template: Tensor,
    pub frozen: bool,
}

impl Encoder {
    pub fn new(cfg: EncoderConfig, seed: u64) -> Result<Encoder> {
        cfg.validate()?;
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let l = cfg.n_image_tokens();
        let d = cfg.visual_dim;
        let td = cfg.text_dim;
        let vision = VisionTower {
            patch_w: Tensor::randn(&[cfg.patch_dim(), d], INIT_STD, &mut rng),
            patch_b: Tensor::zeros(&[d]),
            pos: Tensor::randn(&[l + 1, d], INIT_STD, &mut rng),
            cls: Tensor::randn(&[1, d], INIT_STD, &mut rng),
            layers: (0..cfg.n_layers).map(|_| LayerParams::new(d, &mut rng)).collect(),
            ln_g: Tensor::filled(&[d], 1.0),
            ln_b: Tensor::zeros(&[d]),
            proj: Tensor::randn(&[d, td], INIT_STD, &mut rng),
        };
        let text = TextTower {
            pos: Tensor::randn(&[cfg.max_text_tokens, td], INIT_STD, &mut rng),
            layers: (0..cfg.n_layers).map(|_| LayerParams::new(td, &mut rng)).collect(),
            ln_g: Tensor::filled(&[td], 1.0),
            ln_b: Tensor::zeros(&[td]),
        };
        let class_embeds = [
            Tensor::randn(&[1, td], INIT_STD, &mut rng),
            Tensor::randn(&[1, td], INIT_STD, &mut rng),
        ];
        let template = Tensor::randn(&[cfg.template_length, td], INIT_STD, &mut rng);
        Ok(Encoder {
            cfg,
            vision,
            text,
            class_embeds,
            template,
            frozen: false,
        })
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn template(&self) -> &Tensor {
        &self.template
    }

    pub fn collect_params<'a>(&'a self, map: &mut BTreeMap<String, &'a Tensor>) {
        let v = &self.vision;
        map.insert("encoder.vision.patch_w".into(), &v.patch_w);
        map.insert("encoder.vision.patch_b".into(), &v.patch_b);
        map.insert("encoder.vision.pos".into(), &v.pos);
        map.insert("encoder.vision.cls".into(), &v.cls);
        map.insert("encoder.vision.ln_g".into(), &v.ln_g);
        map.insert("encoder.vision.ln_b".into(), &v.ln_b);
        map.insert("encoder.vision.proj".into(), &v.proj);
        for (i, lp) in v.layers.iter().enumerate() {
            for (f, t) in lp.fields() {
                map.insert(format!("encoder.vision.l{i}.{f}"), t);
            }
        }
        let t = &self.text;
        map.insert("encoder.text.pos".into(), &t.pos);
        map.insert("encoder.text.ln_g".into(), &t.ln_g);
        map.insert("encoder.text.ln_b".into(), &t.ln_b);
        for (i, lp) in t.layers.iter().enumerate() {
            for (f, tt) in lp.fields() {
                map.insert(format!("encoder.text.l{i}.{f}"), tt);
            }
        }
        map.insert("encoder.class.live".into(), &self.class_embeds[0]);
        map.insert("encoder.class.fake".into(), &self.class_embeds[1]);
        map.insert("encoder.template".into(), &self.template);
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        let rest = name.strip_prefix("encoder.")?;
        if let Some(rest) = rest.strip_prefix("vision.") {
            let v = &mut self.vision;
            return match rest {
                "patch_w" => Some(&mut v.patch_w),
                "patch_b" => Some(&mut v.patch_b),
                "pos" => Some(&mut v.pos),
                "cls" => Some(&mut v.cls),
                "ln_g" => Some(&mut v.ln_g),
                "ln_b" => Some(&mut v.ln_b),
                "proj" => Some(&mut v.proj),
                layer => layer_param_mut(&mut v.layers, layer),
            };
        }
        if let Some(rest) = rest.strip_prefix("text.") {
            let t = &mut self.text;
            return match rest {
                "pos" => Some(&mut t.pos),
                "ln_g" => Some(&mut t.ln_g),
                "ln_b" => Some(&mut t.ln_b),
                layer => layer_param_mut(&mut t.layers, layer),
            };
        }
        match rest {
            "class.live" => Some(&mut self.class_embeds[0]),
            "class.fake" => Some(&mut self.class_embeds[1]),
            "template" => Some(&mut self.template),
            _ => None,
        }
    }

    /// Checksum over every encoder parameter (frozen-weight invariant).
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

fn layer_param_mut<'a>(layers: &'a mut [LayerParams], spec: &str) -> Option<&'a mut Tensor> {
    let rest = spec.strip_prefix('l')?;
    let (idx, field) = rest.split_once('.')?;
    let idx: usize = idx.parse().ok()?;
    layers.get_mut(idx)?.field_mut(field)
}

/// Flatten an image tensor [C, H, W] into per-patch rows (l, patch_dim),
/// channel-major within each patch.
fn extract_patches(cfg: &EncoderConfig, image: &Tensor) -> Result<Tensor> {
    let expect = [crate::dataset::CHANNELS, cfg.image_size, cfg.image_size];
    if image.shape() != expect {
        return Err(Error::shape(format!("{expect:?}"), image.shape_string()));
    }
    let p = cfg.patch_size;
    let side = cfg.image_size / p;
    let pd = cfg.patch_dim();
    let mut out = vec![0.0; side * side * pd];
    let data = image.data();
    let hw = cfg.image_size;
    for gy in 0..side {
        for gx in 0..side {
            let row = gy * side + gx;
            let mut k = 0;
            for c in 0..crate::dataset::CHANNELS {
                for py in 0..p {
                    for px in 0..p {
                        let y = gy * p + py;
                        let x = gx * p + px;
                        out[row * pd + k] = data[(c * hw + y) * hw + x];
                        k += 1;
                    }
                }
            }
        }
    }
    Ok(Tensor::from_vec(&[side * side, pd], out))
}

/// Project an image into `l` embedded tokens, prepend the class token and add
/// positional embeddings.
pub fn patch_embed(tape: &mut Tape, enc: &Encoder, image: &Tensor) -> Result<TokenSequence> {
    let patches = extract_patches(&enc.cfg, image)?;
    let patches = tape.input(patches);
    let w = tape.param("encoder.vision.patch_w", &enc.vision.patch_w);
    let b = tape.param("encoder.vision.patch_b", &enc.vision.patch_b);
    let x = tape.graph.matmul(patches, w);
    let x = tape.graph.add_row_bias(x, b);
    let cls = tape.param("encoder.vision.cls", &enc.vision.cls);
    let seq = tape.graph.concat_rows(cls, x);
    let pos = tape.param("encoder.vision.pos", &enc.vision.pos);
    let seq = tape.graph.add(seq, pos);
    Ok(TokenSequence {
        id: seq,
        layout: TokenLayout {
            n_image: enc.cfg.n_image_tokens(),
            n_prompt: 0,
        },
    })
}

/// Run the vision tower and return the projected cls feature (a vector in
/// the joint/text embedding dimension). `depth_prompt` re-injects a prompt
/// block into the prompt span before every layer after the first.
pub fn encode_image(
    tape: &mut Tape,
    enc: &Encoder,
    seq: &TokenSequence,
    depth_prompt: Option<NodeId>,
) -> Result<NodeId> {
    let total = seq.layout.total();
    let got = tape.graph.value(seq.id).shape().to_vec();
    if got != [total, enc.cfg.visual_dim] {
        return Err(Error::shape(
            format!("[{total}, {}]", enc.cfg.visual_dim),
            format!("{got:?}"),
        ));
    }
    let mut x = seq.id;
    for (i, lp) in enc.vision.layers.iter().enumerate() {
        if i > 0 && seq.layout.n_prompt > 0 {
            if let Some(p) = depth_prompt {
                let head = tape.graph.slice_rows(x, 0, 1 + seq.layout.n_image);
                x = tape.graph.concat_rows(head, p);
            }
        }
        x = layer_forward(tape, &format!("encoder.vision.l{i}"), lp, enc.cfg.n_heads, x);
    }
    let g = tape.param("encoder.vision.ln_g", &enc.vision.ln_g);
    let b = tape.param("encoder.vision.ln_b", &enc.vision.ln_b);
    let x = tape.graph.layer_norm(x, g, b);
    let cls_row = tape.graph.slice_rows(x, 0, 1);
    let proj = tape.param("encoder.vision.proj", &enc.vision.proj);
    let feat = tape.graph.matmul(cls_row, proj);
    Ok(tape.graph.reshape(feat, &[enc.cfg.text_dim]))
}

/// Encode a learned vector context plus the class token into a class weight
/// vector (last-token pooling after the final layer norm).
pub fn encode_text(tape: &mut Tape, enc: &Encoder, ctx: NodeId, class: ClassTag) -> Result<NodeId> {
    let shape = tape.graph.value(ctx).shape().to_vec();
    if shape.len() != 2 || shape[1] != enc.cfg.text_dim {
        return Err(Error::shape(
            format!("[n_ctx, {}]", enc.cfg.text_dim),
            format!("{shape:?}"),
        ));
    }
    let n_ctx = shape[0];
    if n_ctx == 0 {
        return Err(Error::shape("n_ctx >= 1", "0 context tokens"));
    }
    let n = n_ctx + 1;
    if n > enc.cfg.max_text_tokens {
        return Err(Error::shape(
            format!("<= {} text tokens", enc.cfg.max_text_tokens),
            format!("{n}"),
        ));
    }
    let class_name = match class {
        ClassTag::Live => "encoder.class.live",
        ClassTag::Fake => "encoder.class.fake",
    };
    let class_embed = tape.param(class_name, &enc.class_embeds[class as usize]);
    let seq = tape.graph.concat_rows(ctx, class_embed);
    let pos_full = tape.param("encoder.text.pos", &enc.text.pos);
    let pos = tape.graph.slice_rows(pos_full, 0, n);
    let mut x = tape.graph.add(seq, pos);
    for (i, lp) in enc.text.layers.iter().enumerate() {
        x = layer_forward(tape, &format!("encoder.text.l{i}"), lp, enc.cfg.n_heads, x);
    }
    let g = tape.param("encoder.text.ln_g", &enc.text.ln_g);
    let b = tape.param("encoder.text.ln_b", &enc.text.ln_b);
    let x = tape.graph.layer_norm(x, g, b);
    let last = tape.graph.slice_rows(x, n - 1, 1);
    Ok(tape.graph.reshape(last, &[enc.cfg.text_dim]))
}

/// Cosine-similarity softmax head:
/// `p_i = exp(cos(w_i, f) / tau) / sum_j exp(cos(w_j, f) / tau)`.
pub fn class_probabilities(
    tape: &mut Tape,
    tau: f64,
    feature: NodeId,
    weights: &[NodeId],
) -> Result<NodeId> {
    let norm = |t: &Tensor| t.data().iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm(tape.graph.value(feature)) == 0.0 {
        return Err(Error::Numerical("zero-norm image feature".into()));
    }
    for &w in weights {
        if norm(tape.graph.value(w)) == 0.0 {
            return Err(Error::Numerical("zero-norm class weight".into()));
        }
    }
    let mut sims = Vec::with_capacity(weights.len());
    for &w in weights {
        let c = tape.graph.cosine(w, feature);
        sims.push(tape.graph.scale(c, 1.0 / tau));
    }
    let logits = tape.graph.stack_scalars(&sims);
    Ok(tape.graph.softmax_vec(logits))
}

/// Plain-value softmax head over cached class weights.
pub fn class_probs_plain(feature: &Tensor, weights: &[Tensor], tau: f64) -> Result<Vec<f64>> {
    let dot = |a: &Tensor, b: &Tensor| -> f64 {
        a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
    };
    let norm = |t: &Tensor| dot(t, t).sqrt();
    let nf = norm(feature);
    if nf == 0.0 {
        return Err(Error::Numerical("zero-norm image feature".into()));
    }
    let mut logits = Vec::with_capacity(weights.len());
    for w in weights {
        let nw = norm(w);
        if nw == 0.0 {
            return Err(Error::Numerical("zero-norm class weight".into()));
        }
        logits.push(dot(w, feature) / (nw * nf) / tau);
    }
    Ok(softmax_slice(&logits))
}

/// Flat learnable-context baseline. `class_specific` gives each class its
/// own context; the unified variant shares one across classes.
pub struct CoopBaseline {
    pub context_length: usize,
    pub class_specific: bool,
    /// One context (unified) or one per class (specific), each (M, text_dim).
    pub contexts: Vec<Tensor>,
}

impl CoopBaseline {
    pub fn new(
        context_length: usize,
        class_specific: bool,
        text_dim: usize,
        rng: &mut ChaCha12Rng,
    ) -> CoopBaseline {
        let n = if class_specific { 2 } else { 1 };
        CoopBaseline {
            context_length,
            class_specific,
            contexts: (0..n)
                .map(|_| Tensor::randn(&[context_length, text_dim], INIT_STD, rng))
                .collect(),
        }
    }

    pub fn context_for(&self, class: ClassTag) -> &Tensor {
        if self.class_specific {
            &self.contexts[class as usize]
        } else {
            &self.contexts[0]
        }
    }

    pub fn collect_params<'a>(&'a self, prefix: &str, map: &mut BTreeMap<String, &'a Tensor>) {
        for (i, c) in self.contexts.iter().enumerate() {
            map.insert(format!("{prefix}.ctx{i}"), c);
        }
    }

    pub fn param_mut(&mut self, prefix: &str, name: &str) -> Option<&mut Tensor> {
        let rest = name.strip_prefix(prefix)?.strip_prefix(".ctx")?;
        let idx: usize = rest.parse().ok()?;
        self.contexts.get_mut(idx)
    }

    fn param_name(&self, prefix: &str, class: ClassTag) -> String {
        if self.class_specific {
            format!("{prefix}.ctx{}", class as usize)
        } else {
            format!("{prefix}.ctx0")
        }
    }
}

/// Class weights from the baseline's learnable contexts.
pub fn coop_class_weights(
    tape: &mut Tape,
    enc: &Encoder,
    baseline: &CoopBaseline,
    prefix: &str,
) -> Result<Vec<NodeId>> {
    let mut out = Vec::with_capacity(2);
    for class in [ClassTag::Live, ClassTag::Fake] {
        let name = baseline.param_name(prefix, class);
        let ctx = tape.param(&name, baseline.context_for(class));
        out.push(encode_text(tape, enc, ctx, class)?);
    }
    Ok(out)
}

/// Full baseline probability head: prompt-free image feature against the
/// baseline's contexts.
pub fn coop_baseline_probabilities(
    tape: &mut Tape,
    enc: &Encoder,
    baseline: &CoopBaseline,
    prefix: &str,
    image: &Tensor,
) -> Result<NodeId> {
    let seq = patch_embed(tape, enc, image)?;
    let feature = encode_image(tape, enc, &seq, None)?;
    let weights = coop_class_weights(tape, enc, baseline, prefix)?;
    class_probabilities(tape, enc.cfg.temperature, feature, &weights)
}

/// Class weights from the fixed template contexts (zero-shot comparator).
pub fn template_class_weights(tape: &mut Tape, enc: &Encoder) -> Result<Vec<NodeId>> {
    let mut out = Vec::with_capacity(2);
    for class in [ClassTag::Live, ClassTag::Fake] {
        let ctx = tape.param("encoder.template", &enc.template);
        out.push(encode_text(tape, enc, ctx, class)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Tape;
    use rand::SeedableRng;

    fn desk_encoder() -> Encoder {
        Encoder::new(EncoderConfig::default(), 42).unwrap()
    }

    fn random_image(seed: u64, size: usize) -> Tensor {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        Tensor::randn(&[3, size, size], 0.5, &mut rng)
    }

    #[test]
    fn patch_embed_shapes() {
        // Paper-scale geometry: 224/16 -> 196 + cls tokens at width 768.
        let cfg = EncoderConfig {
            image_size: 224,
            patch_size: 16,
            visual_dim: 768,
            text_dim: 64,
            n_layers: 1,
            ..EncoderConfig::default()
        };
        let enc = Encoder::new(cfg, 1).unwrap();
        let mut tape = Tape::new();
        let seq = patch_embed(&mut tape, &enc, &random_image(3, 224)).unwrap();
        assert_eq!(tape.graph.value(seq.id).shape(), &[197, 768]);

        // Desk geometry: 32/4 -> 64 + cls at width 64.
        let enc = desk_encoder();
        let mut tape = Tape::new();
        let seq = patch_embed(&mut tape, &enc, &random_image(4, 32)).unwrap();
        assert_eq!(tape.graph.value(seq.id).shape(), &[65, 64]);
    }

    #[test]
    fn zero_image_gives_pos_plus_bias_tokens() {
        let enc = desk_encoder();
        let mut tape = Tape::new();
        let zero = Tensor::zeros(&[3, 32, 32]);
        let seq = patch_embed(&mut tape, &enc, &zero).unwrap();
        let toks = tape.graph.value(seq.id);
        let d = enc.cfg.visual_dim;
        for i in 1..seq.layout.total() {
            for j in 0..d {
                let expect = enc.vision.pos.data()[i * d + j] + enc.vision.patch_b.data()[j];
                assert!((toks.data()[i * d + j] - expect).abs() < 1e-12);
            }
        }
        for j in 0..d {
            let expect = enc.vision.pos.data()[j] + enc.vision.cls.data()[j];
            assert!((toks.data()[j] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn patch_embed_rejects_wrong_size() {
        let enc = desk_encoder();
        let mut tape = Tape::new();
        let err = patch_embed(&mut tape, &enc, &random_image(5, 16)).unwrap_err();
        assert!(matches!(err, Error::Shape { .. }));
    }

    #[test]
    fn encode_image_deterministic_and_position_sensitive() {
        let enc = desk_encoder();
        let img = random_image(6, 32);
        let feat = |image: &Tensor| -> Tensor {
            let mut tape = Tape::new();
            let seq = patch_embed(&mut tape, &enc, image).unwrap();
            let f = encode_image(&mut tape, &enc, &seq, None).unwrap();
            tape.graph.value(f).clone()
        };
        let a = feat(&img);
        let b = feat(&img);
        assert!(a.bit_equal(&b));

        // Moving patch content to a different position must change the
        // output: positional embeddings bind content to location, so the
        // encoder is not a bag-of-patches pooler. (Swapping tokens together
        // with their positions is exactly invariant for any attention
        // weights, so the permutation must happen in pixel space.)
        let mut swapped = img.clone();
        for c in 0..3 {
            for y in 0..4 {
                for x in 0..4 {
                    let a = (c * 32 + y) * 32 + x;
                    let b = (c * 32 + (y + 8)) * 32 + (x + 12);
                    let tmp = swapped.data()[a];
                    swapped.data_mut()[a] = swapped.data()[b];
                    swapped.data_mut()[b] = tmp;
                }
            }
        }
        assert!(feat(&swapped).max_abs_diff(&a) > 1e-9);
    }

    #[test]
    fn encode_text_contract() {
        let enc = desk_encoder();
        let mut rng = ChaCha12Rng::seed_from_u64(8);
        let ctx = Tensor::randn(&[8, 32], 1.0, &mut rng);
        let run = |ctx: &Tensor, tag: ClassTag| -> Tensor {
            let mut tape = Tape::new();
            let c = tape.input(ctx.clone());
            let w = encode_text(&mut tape, &enc, c, tag).unwrap();
            tape.graph.value(w).clone()
        };
        let w1 = run(&ctx, ClassTag::Live);
        let w2 = run(&ctx, ClassTag::Live);
        assert!(w1.bit_equal(&w2));
        let other = Tensor::randn(&[8, 32], 1.0, &mut rng);
        assert!(run(&other, ClassTag::Live).max_abs_diff(&w1) > 1e-9);

        // Zero-length context rejected.
        let mut tape = Tape::new();
        let c = tape.input(Tensor::zeros(&[0, 32]));
        assert!(encode_text(&mut tape, &enc, c, ClassTag::Live).is_err());
    }

    #[test]
    fn probability_head_closed_forms() {
        // cos values (1, 0) at tau = 1 -> (e/(e+1), 1/(e+1)).
        let f = Tensor::from_vec(&[2], vec![1.0, 0.0]);
        let w1 = Tensor::from_vec(&[2], vec![2.0, 0.0]); // cos = 1
        let w2 = Tensor::from_vec(&[2], vec![0.0, 3.0]); // cos = 0
        let p = class_probs_plain(&f, &[w1.clone(), w2.clone()], 1.0).unwrap();
        let e = std::f64::consts::E;
        assert!((p[0] - e / (e + 1.0)).abs() < 1e-12);
        assert!((p[1] - 1.0 / (e + 1.0)).abs() < 1e-12);

        // Identical weights -> exactly (0.5, 0.5).
        let p = class_probs_plain(&f, &[w1.clone(), w1.clone()], 0.07).unwrap();
        assert_eq!(p, vec![0.5, 0.5]);

        // Tiny temperature saturates.
        let wa = Tensor::from_vec(&[2], vec![0.9, (1.0f64 - 0.81).sqrt()]);
        let wb = Tensor::from_vec(&[2], vec![0.1, (1.0f64 - 0.01).sqrt()]);
        let p = class_probs_plain(&f, &[wa, wb], 0.01).unwrap();
        assert!(p[0] > 1.0 - 1e-10);

        // Rescaling the feature does not move cosine probabilities.
        let mut scaled = f.clone();
        scaled.scale_in_place(3.7);
        let p1 = class_probs_plain(&f, &[w1.clone(), w2.clone()], 0.07).unwrap();
        let p2 = class_probs_plain(&scaled, &[w1.clone(), w2.clone()], 0.07).unwrap();
        for (a, b) in p1.iter().zip(&p2) {
            assert!((a - b).abs() < 1e-12);
        }

        // Zero-norm input is a numerical-domain error.
        let zero = Tensor::zeros(&[2]);
        assert!(class_probs_plain(&zero, &[w1.clone(), w2.clone()], 1.0).is_err());
        assert!(class_probs_plain(&f, &[zero, w2], 1.0).is_err());
    }

    #[test]
    fn tape_probability_head_matches_plain_and_sums_to_one() {
        let enc = desk_encoder();
        let img = random_image(9, 32);
        let mut tape = Tape::new();
        let seq = patch_embed(&mut tape, &enc, &img).unwrap();
        let f = encode_image(&mut tape, &enc, &seq, None).unwrap();
        let ws = template_class_weights(&mut tape, &enc).unwrap();
        let probs = class_probabilities(&mut tape, enc.cfg.temperature, f, &ws).unwrap();
        let p = tape.graph.value(probs);
        assert!((p.data().iter().sum::<f64>() - 1.0).abs() < 1e-6);
        let plain = class_probs_plain(
            tape.graph.value(f),
            &[tape.graph.value(ws[0]).clone(), tape.graph.value(ws[1]).clone()],
            enc.cfg.temperature,
        )
        .unwrap();
        assert!((p.data()[0] - plain[0]).abs() < 1e-12);
    }

    #[test]
    fn coop_modes_have_expected_context_counts() {
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let unified = CoopBaseline::new(16, false, 32, &mut rng);
        assert_eq!(unified.contexts.len(), 1);
        let specific = CoopBaseline::new(16, true, 32, &mut rng);
        assert_eq!(specific.contexts.len(), 2);
        // Specific mode owns K * M context tokens in total.
        let total: usize = specific.contexts.iter().map(|c| c.shape()[0]).sum();
        assert_eq!(total, 2 * 16);

        // Unified mode: the two class weights differ only via the class token,
        // so they are distinct but share the context.
        let enc = desk_encoder();
        let mut tape = Tape::new();
        let ws = coop_class_weights(&mut tape, &enc, &unified, "coop_unified").unwrap();
        let w_live = tape.graph.value(ws[0]);
        let w_fake = tape.graph.value(ws[1]);
        assert!(w_live.max_abs_diff(w_fake) > 1e-9);
    }

    #[test]
    fn encoder_checksum_tracks_mutation() {
        let mut enc = desk_encoder();
        let before = enc.checksum();
        enc.param_mut("encoder.vision.l2.w_fc1").unwrap().data_mut()[0] += 1e-9;
        assert_ne!(before, enc.checksum());
    }
}
