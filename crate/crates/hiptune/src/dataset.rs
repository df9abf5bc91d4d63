//! Procedural sample generator and sample-store I/O.
//!
//! Real capture data cannot ship with the crate, so every sample is rendered
//! from seeds: an identity-specific smooth base pattern, plus a per-category
//! visual signature (dot lattices for print, interference gratings for
//! replay, low-frequency warps for face-swap, dense noise for pixel-level
//! adversarial edits, and so on), plus an i.i.d. noise floor. Leaf methods
//! within a category are parameter variants of the category signature, and
//! each level-1 family carries a distinct global color statistic so the
//! coarse gate has a linearly recoverable cue. Everything is a pure function
//! of `(taxonomy, config, seed)`.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::error::{Error, Result};
use crate::manifest::{Manifest, ManifestRecord, Split};
use crate::math::Tensor;
use crate::parallel::par_map;
use crate::taxonomy::{AttackTaxonomy, PHYSICAL};

pub const CHANNELS: usize = 3;

/// One rendered sample: an f32 image plus its hierarchical label.
#[derive(Clone, Debug)]
pub struct Sample {
    pub image: Image,
    pub identity_id: u32,
    pub is_live: bool,
    pub path: Option<(u16, u16, u16)>,
    pub method_id: Option<u16>,
}

/// f32 image tensor, layout `[C, H, W]` row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub size: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn zeros(size: usize) -> Self {
        Image {
            size,
            data: vec![0.0; CHANNELS * size * size],
        }
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.size + y) * self.size + x]
    }

    #[inline]
    pub fn at_mut(&mut self, c: usize, y: usize, x: usize) -> &mut f32 {
        &mut self.data[(c * self.size + y) * self.size + x]
    }

    /// Convert to an f64 tensor of shape [C, H, W] for the math pipeline.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(
            &[CHANNELS, self.size, self.size],
            self.data.iter().map(|&v| v as f64).collect(),
        )
    }
}

#[derive(Clone, Debug)]
pub struct DatasetConfig {
    pub n_identities: usize,
    /// Frames per attack method and per identity's live captures.
    pub frames_per_method: usize,
    pub image_size: usize,
    pub seed: u64,
    /// Standard deviation of the i.i.d. noise floor.
    pub noise_level: f64,
    /// Scales every signature component; 0 collapses all classes onto the
    /// identity base patterns.
    pub signature_strength: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            n_identities: 10,
            frames_per_method: 1,
            image_size: 32,
            seed: 7,
            noise_level: 0.05,
            signature_strength: 1.0,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_identities < 2 {
            return Err(Error::Config(format!(
                "need at least 2 identities, got {}",
                self.n_identities
            )));
        }
        if self.frames_per_method < 1 {
            return Err(Error::Config("frames_per_method must be >= 1".into()));
        }
        if self.image_size < 8 {
            return Err(Error::Config(format!(
                "image_size {} too small",
                self.image_size
            )));
        }
        Ok(())
    }
}

/// In-memory sample store; images indexed like the manifest records.
#[derive(Clone, Debug)]
pub struct SampleStore {
    pub images: Vec<Image>,
}

impl SampleStore {
    pub fn sample(&self, manifest: &Manifest, index: usize) -> Sample {
        let rec = &manifest.records[index];
        Sample {
            image: self.images[index].clone(),
            identity_id: rec.identity_id,
            is_live: rec.is_live,
            path: rec.path,
            method_id: rec.method_id,
        }
    }

    /// Write one binary tensor file per record under `dir`.
    pub fn save(&self, dir: &Path, manifest: &Manifest) -> Result<()> {
        for (img, rec) in self.images.iter().zip(&manifest.records) {
            let path = dir.join(&rec.file);
            if let Some(parent) = path.parent() {
                fs::create_dir_all(parent)?;
            }
            write_image_file(img, &path)?;
        }
        Ok(())
    }

    pub fn load(dir: &Path, manifest: &Manifest) -> Result<SampleStore> {
        let images = manifest
            .records
            .iter()
            .map(|rec| read_image_file(&dir.join(&rec.file)))
            .collect::<Result<Vec<_>>>()?;
        Ok(SampleStore { images })
    }

    /// 8-bit lossless export for inspection, next to each tensor file.
    pub fn export_png(&self, dir: &Path, manifest: &Manifest) -> Result<()> {
        for (img, rec) in self.images.iter().zip(&manifest.records) {
            let path = dir.join(rec.file.replace(".bin", ".png"));
            if let Some(parent) = path.parent() {
                fs::create_dir_all(parent)?;
            }
            write_png(img, &path)?;
        }
        Ok(())
    }
}

/// Binary tensor file: `[u32 ndims][u32 dims...]` then f32 data, all LE.
pub fn write_image_file(img: &Image, path: &Path) -> Result<()> {
    let mut buf = Vec::with_capacity(16 + img.data.len() * 4);
    buf.extend_from_slice(&3u32.to_le_bytes());
    for dim in [CHANNELS, img.size, img.size] {
        buf.extend_from_slice(&(dim as u32).to_le_bytes());
    }
    for v in &img.data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

pub fn read_image_file(path: &Path) -> Result<Image> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    let fail = |msg: &str| Error::Config(format!("{}: {msg}", path.display()));
    if bytes.len() < 4 {
        return Err(fail("truncated tensor file"));
    }
    let read_u32 = |off: usize| u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
    let ndims = read_u32(0) as usize;
    if ndims != 3 || bytes.len() < 4 + 4 * ndims {
        return Err(fail("expected 3-d tensor header"));
    }
    let c = read_u32(4) as usize;
    let h = read_u32(8) as usize;
    let w = read_u32(12) as usize;
    if c != CHANNELS || h != w {
        return Err(fail("expected square 3-channel image"));
    }
    let start = 4 + 4 * ndims;
    let expect = c * h * w * 4;
    if bytes.len() != start + expect {
        return Err(fail("tensor payload size mismatch"));
    }
    let data: Vec<f32> = bytes[start..]
        .chunks_exact(4)
        .map(|ch| f32::from_le_bytes(ch.try_into().unwrap()))
        .collect();
    Ok(Image { size: h, data })
}

fn write_png(img: &Image, path: &Path) -> Result<()> {
    let file = fs::File::create(path)?;
    let mut enc = png::Encoder::new(
        std::io::BufWriter::new(file),
        img.size as u32,
        img.size as u32,
    );
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc
        .write_header()
        .map_err(|e| Error::Config(format!("png header: {e}")))?;
    let mut rgb = Vec::with_capacity(img.size * img.size * 3);
    for y in 0..img.size {
        for x in 0..img.size {
            for c in 0..CHANNELS {
                rgb.push((img.at(c, y, x).clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    writer
        .write_image_data(&rgb)
        .map_err(|e| Error::Config(format!("png data: {e}")))?;
    Ok(())
}

/// Render the full dataset: per identity, `frames_per_method` live captures
/// plus `frames_per_method` samples of every leaf attack method.
pub fn generate_dataset(
    taxonomy: &AttackTaxonomy,
    cfg: &DatasetConfig,
) -> Result<(Manifest, SampleStore)> {
    cfg.validate()?;
    let mut records = Vec::new();
    let mut descriptors = Vec::new();
    for identity in 0..cfg.n_identities as u32 {
        for frame in 0..cfg.frames_per_method as u32 {
            descriptors.push((identity, None, frame));
        }
        for method in 0..taxonomy.n_methods() as u16 {
            for frame in 0..cfg.frames_per_method as u32 {
                descriptors.push((identity, Some(method), frame));
            }
        }
    }
    for (i, (identity, method, _)) in descriptors.iter().enumerate() {
        let path = method.map(|m| taxonomy.path_for_method(m).expect("valid method"));
        records.push(ManifestRecord {
            file: format!("samples/{i:06}.bin"),
            identity_id: *identity,
            is_live: method.is_none(),
            path,
            method_id: *method,
            split: Split::Unassigned,
        });
    }
    let images = par_map(&descriptors, |(identity, method, frame)| {
        render_sample(taxonomy, cfg, *identity, *method, *frame)
    });
    Ok((Manifest { records }, SampleStore { images }))
}

/// Deterministic seed mixing (splitmix64 over a tag stream).
pub fn mix_seed(base: u64, tags: &[u64]) -> u64 {
    let mut state = base;
    for &t in tags {
        state = state.wrapping_add(0x9e3779b97f4a7c15).wrapping_add(t);
        let mut z = state;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
        state = z ^ (z >> 31);
    }
    state
}

/// Render a single sample. Pure function of its arguments.
pub fn render_sample(
    taxonomy: &AttackTaxonomy,
    cfg: &DatasetConfig,
    identity: u32,
    method: Option<u16>,
    frame: u32,
) -> Image {
    let strength = cfg.signature_strength;
    let mut img = identity_base(cfg, identity);

    if let Some(method_id) = method {
        let (l1, l2, l3) = taxonomy.path_for_method(method_id).expect("valid method");
        let node_name = taxonomy.node(l3).expect("valid node").name.clone();
        let mut method_rng = ChaCha12Rng::seed_from_u64(mix_seed(cfg.seed, &[2, method_id as u64]));
        apply_signature(
            &mut img,
            &node_name,
            strength,
            &mut method_rng,
            cfg,
            identity,
        );
        // Group statistic in the green channel: one mid-frequency pattern
        // per level-2 category, shared by all of its methods.
        let group_name = taxonomy.node(l2).expect("valid node").name.clone();
        apply_group_pattern(&mut img, &group_name, strength);
        // Sibling tag: a period-coded diagonal grating shared by all methods
        // of one level-3 node, distinguishing it from its siblings.
        let sibling = taxonomy
            .children(l2)
            .iter()
            .position(|&c| c == l3)
            .expect("l3 under l2");
        let physical_family = taxonomy.node(l1).expect("valid node").name == PHYSICAL;
        apply_sibling_tag(&mut img, sibling, strength, physical_family);
        // Family statistic for the coarse gate: a global tint plus a fine
        // parity grating, physical in the red channel (vertical, 2 px),
        // digital in the blue channel (horizontal). The grating survives
        // token averaging, which smooth per-category signatures do not.
        let family = taxonomy.node(l1).expect("valid node").name.clone();
        let dc = 0.12 * strength as f32;
        let grate = 0.22 * strength as f32;
        let physical = family == PHYSICAL;
        let (r_shift, b_shift) = if physical { (dc, -dc) } else { (-dc, dc) };
        let s = img.size;
        for y in 0..s {
            for x in 0..s {
                *img.at_mut(0, y, x) += r_shift;
                *img.at_mut(2, y, x) += b_shift;
                if physical {
                    *img.at_mut(0, y, x) += if x % 2 == 0 { grate } else { -grate };
                } else {
                    *img.at_mut(2, y, x) += if y % 2 == 0 { grate } else { -grate };
                }
            }
        }
    }

    // Per-frame noise floor.
    let tag = method.map(|m| m as u64 + 1).unwrap_or(0);
    let mut frame_rng = ChaCha12Rng::seed_from_u64(mix_seed(
        cfg.seed,
        &[3, identity as u64, tag, frame as u64],
    ));
    let noise = cfg.noise_level as f32;
    for v in img.data.iter_mut() {
        *v += noise * gauss(&mut frame_rng);
    }
    img
}

fn gauss(rng: &mut impl Rng) -> f32 {
    // Box-Muller on two uniforms; cheap and reproducible.
    let u1: f64 = rng.random::<f64>().max(1e-12);
    let u2: f64 = rng.random::<f64>();
    ((-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()) as f32
}

/// Smooth per-identity base: per-channel tone plus a few low-frequency waves.
fn identity_base(cfg: &DatasetConfig, identity: u32) -> Image {
    let mut rng = ChaCha12Rng::seed_from_u64(mix_seed(cfg.seed, &[1, identity as u64]));
    let s = cfg.image_size;
    let mut img = Image::zeros(s);
    let tones: Vec<f32> = (0..CHANNELS).map(|_| 0.4 + 0.2 * rng.random::<f32>()).collect();
    let waves: Vec<(f32, f32, f32, f32)> = (0..3)
        .map(|_| {
            (
                0.5 + 2.0 * rng.random::<f32>(),                   // fx cycles
                0.5 + 2.0 * rng.random::<f32>(),                   // fy cycles
                std::f32::consts::TAU * rng.random::<f32>(),       // phase
                0.08 + 0.07 * rng.random::<f32>(),                 // amplitude
            )
        })
        .collect();
    let chan_phase: Vec<f32> = (0..CHANNELS).map(|_| 0.6 * rng.random::<f32>()).collect();
    for c in 0..CHANNELS {
        for y in 0..s {
            let v = y as f32 / s as f32;
            for x in 0..s {
                let u = x as f32 / s as f32;
                let mut val = tones[c];
                for (fx, fy, ph, amp) in &waves {
                    val += amp
                        * (std::f32::consts::TAU * (fx * u + fy * v) + ph + chan_phase[c]).sin();
                }
                *img.at_mut(c, y, x) = val;
            }
        }
    }
    img
}

/// Orientation-coded gratings, one per level-2 attack group, all in the
/// green channel so they stay out of the level-1 family channels.
fn apply_group_pattern(img: &mut Image, group: &str, strength: f64) {
    let g = 0.2 * strength as f32;
    let s = img.size;
    for y in 0..s {
        for x in 0..s {
            let v = match group {
                "2D" => if x % 4 < 2 { g } else { -g },
                "3D" => if y % 4 < 2 { g } else { -g },
                "manipulation" => if (x + y) % 4 < 2 { g } else { -g },
                "adversarial" => if (x + s - y) % 4 < 2 { g } else { -g },
                "generation" => {
                    if (x / 2 + y / 2) % 2 == 0 { g } else { -g }
                }
                _ => 0.0,
            };
            *img.at_mut(1, y, x) += v;
        }
    }
}

/// Red/blue pattern whose orientation encodes the node's position among its
/// siblings: vertical split, horizontal split, or block checker, mutually
/// orthogonal and orthogonal to the period-2 family stripes. Physical
/// categories alternate at period 8 (texture-gradient cue), digital ones at
/// period 4 (frequency-content cue).
fn apply_sibling_tag(img: &mut Image, sibling: usize, strength: f64, physical: bool) {
    let g = 0.2 * strength as f32;
    let p = if physical { 8 } else { 4 };
    let h = p / 2;
    let s = img.size;
    for y in 0..s {
        for x in 0..s {
            let on = match sibling % 3 {
                0 => x % p < h,
                1 => y % p < h,
                _ => (x % p < h) == (y % p < h),
            };
            let v = if on { g } else { -g };
            *img.at_mut(0, y, x) += v;
            *img.at_mut(2, y, x) += v;
        }
    }
}

/// Apply the level-3 category signature, parameterized by the method RNG so
/// sibling methods are distinct variants of the same visual family.
fn apply_signature(
    img: &mut Image,
    node: &str,
    strength: f64,
    rng: &mut ChaCha12Rng,
    cfg: &DatasetConfig,
    identity: u32,
) {
    let a = 0.35 * strength as f32;
    let s = img.size;
    let sf = s as f32;
    match node {
        "print" => {
            // Halftone dot lattice.
            let pitch = 3 + (rng.random::<u32>() % 3) as usize;
            let sigma = 0.7 + 0.5 * rng.random::<f32>();
            let offset = (rng.random::<u32>() % pitch as u32) as usize;
            for y in 0..s {
                for x in 0..s {
                    let dy = ((y + offset) % pitch) as f32 - pitch as f32 / 2.0;
                    let dx = ((x + offset) % pitch) as f32 - pitch as f32 / 2.0;
                    let dot = (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp();
                    for c in 0..CHANNELS {
                        *img.at_mut(c, y, x) += a * (dot - 0.3);
                    }
                }
            }
        }
        "replay" => {
            // Two interfering gratings: screen moire.
            let f1 = 6.0 + 4.0 * rng.random::<f32>();
            let f2 = f1 * (1.05 + 0.1 * rng.random::<f32>());
            let th1 = std::f32::consts::PI * rng.random::<f32>();
            let th2 = th1 + 0.15 + 0.2 * rng.random::<f32>();
            for y in 0..s {
                let v = y as f32 / sf;
                for x in 0..s {
                    let u = x as f32 / sf;
                    let g1 = (std::f32::consts::TAU * f1 * (u * th1.cos() + v * th1.sin())).sin();
                    let g2 = (std::f32::consts::TAU * f2 * (u * th2.cos() + v * th2.sin())).sin();
                    for c in 0..CHANNELS {
                        *img.at_mut(c, y, x) += a * g1 * g2;
                    }
                }
            }
        }
        "cutouts" => {
            // Flat occluding rectangles.
            let n_rects = 2 + (rng.random::<u32>() % 2) as usize;
            for _ in 0..n_rects {
                let rw = s / 4 + (rng.random::<u32>() as usize % (s / 4));
                let rh = s / 4 + (rng.random::<u32>() as usize % (s / 4));
                let x0 = rng.random::<u32>() as usize % (s - rw);
                let y0 = rng.random::<u32>() as usize % (s - rh);
                let lvl = if rng.random::<f32>() > 0.5 { a } else { -a };
                for y in y0..y0 + rh {
                    for x in x0..x0 + rw {
                        for c in 0..CHANNELS {
                            *img.at_mut(c, y, x) += lvl;
                        }
                    }
                }
            }
        }
        "transparent" => {
            // Broad specular streaks.
            let n = 1 + (rng.random::<u32>() % 2) as usize;
            for _ in 0..n {
                let th = std::f32::consts::PI * rng.random::<f32>();
                let (nx, ny) = (th.cos(), th.sin());
                let offset = rng.random::<f32>() - 0.5;
                let sigma = 0.08 + 0.06 * rng.random::<f32>();
                for y in 0..s {
                    let v = y as f32 / sf - 0.5;
                    for x in 0..s {
                        let u = x as f32 / sf - 0.5;
                        let d = nx * u + ny * v - offset;
                        let ridge = (-d * d / (2.0 * sigma * sigma)).exp();
                        for c in 0..CHANNELS {
                            *img.at_mut(c, y, x) += a * 0.9 * ridge;
                        }
                    }
                }
            }
        }
        "plaster" => {
            // Matte blotches: thresholded smooth field.
            let waves: Vec<(f32, f32, f32)> = (0..4)
                .map(|_| {
                    (
                        1.0 + 3.0 * rng.random::<f32>(),
                        1.0 + 3.0 * rng.random::<f32>(),
                        std::f32::consts::TAU * rng.random::<f32>(),
                    )
                })
                .collect();
            for y in 0..s {
                let v = y as f32 / sf;
                for x in 0..s {
                    let u = x as f32 / sf;
                    let mut field = 0.0;
                    for (fx, fy, ph) in &waves {
                        field += (std::f32::consts::TAU * (fx * u + fy * v) + ph).sin();
                    }
                    let blotch = (1.5 * field).tanh();
                    for c in 0..CHANNELS {
                        *img.at_mut(c, y, x) += a * 0.7 * blotch;
                    }
                }
            }
        }
        "resin" => {
            // Glossy specks with halos.
            let n = 6 + (rng.random::<u32>() % 5) as usize;
            let pts: Vec<(f32, f32)> = (0..n)
                .map(|_| (sf * rng.random::<f32>(), sf * rng.random::<f32>()))
                .collect();
            let sigma = 1.0 + 1.0 * rng.random::<f32>();
            for y in 0..s {
                for x in 0..s {
                    let mut speck = 0.0;
                    for (px, py) in &pts {
                        let d2 = (x as f32 - px).powi(2) + (y as f32 - py).powi(2);
                        speck += (-d2 / (2.0 * sigma * sigma)).exp();
                    }
                    for c in 0..CHANNELS {
                        *img.at_mut(c, y, x) += a * 1.1 * speck.min(1.5);
                    }
                }
            }
        }
        "attribute-edit" => {
            // Local contrast/brightness edit in one region.
            let rw = s / 3 + (rng.random::<u32>() as usize % (s / 3));
            let rh = s / 3 + (rng.random::<u32>() as usize % (s / 3));
            let x0 = rng.random::<u32>() as usize % (s - rw);
            let y0 = rng.random::<u32>() as usize % (s - rh);
            let gain = 1.4 + 0.6 * rng.random::<f32>();
            let shift = a * (0.4 + 0.3 * rng.random::<f32>());
            for y in y0..y0 + rh {
                for x in x0..x0 + rw {
                    for c in 0..CHANNELS {
                        let v = img.at(c, y, x);
                        *img.at_mut(c, y, x) = (v - 0.5) * gain + 0.5 + shift;
                    }
                }
            }
        }
        "face-swap" => {
            // Low-frequency warp of the base content.
            let amp = (1.5 + 2.5 * rng.random::<f32>()) * strength as f32;
            let (fx, fy) = (1.0 + rng.random::<f32>(), 1.0 + rng.random::<f32>());
            let (p1, p2) = (
                std::f32::consts::TAU * rng.random::<f32>(),
                std::f32::consts::TAU * rng.random::<f32>(),
            );
            let src = img.clone();
            for y in 0..s {
                let v = y as f32 / sf;
                for x in 0..s {
                    let u = x as f32 / sf;
                    let dx = amp * (std::f32::consts::TAU * (fx * v) + p1).sin();
                    let dy = amp * (std::f32::consts::TAU * (fy * u) + p2).cos();
                    let sx = (x as f32 + dx).rem_euclid(sf) as usize % s;
                    let sy = (y as f32 + dy).rem_euclid(sf) as usize % s;
                    for c in 0..CHANNELS {
                        *img.at_mut(c, y, x) = src.at(c, sy, sx);
                    }
                }
            }
        }
        "video-driven" => {
            // Row-wise phase shifts: driving artifacts.
            let f = 2.0 + 3.0 * rng.random::<f32>();
            let amp = (2.0 + 2.0 * rng.random::<f32>()) * strength as f32;
            let ph = std::f32::consts::TAU * rng.random::<f32>();
            let src = img.clone();
            for y in 0..s {
                let shift = (amp * (std::f32::consts::TAU * f * y as f32 / sf + ph).sin()) as i32;
                for x in 0..s {
                    let sx = (x as i32 + shift).rem_euclid(s as i32) as usize;
                    for c in 0..CHANNELS {
                        *img.at_mut(c, y, x) = src.at(c, y, sx);
                    }
                    *img.at_mut(1, y, x) += a * 0.25 * (y as f32 / sf * 20.0 + ph).sin();
                }
            }
        }
        "pixel-level" => {
            // Dense fixed noise pattern: a universal perturbation per method.
            let pattern: Vec<f32> = (0..CHANNELS * s * s)
                .map(|_| if rng.random::<f32>() > 0.5 { 1.0 } else { -1.0 })
                .collect();
            for (v, p) in img.data.iter_mut().zip(&pattern) {
                *v += a * 0.8 * p;
            }
        }
        "semantic-level" => {
            // Smooth channel-space rotation inside a soft mask.
            let angle = (0.6 + 0.8 * rng.random::<f32>()) * strength as f32;
            let (cx, cy) = (rng.random::<f32>(), rng.random::<f32>());
            let radius = 0.35 + 0.2 * rng.random::<f32>();
            for y in 0..s {
                let v = y as f32 / sf;
                for x in 0..s {
                    let u = x as f32 / sf;
                    let d2 = (u - cx).powi(2) + (v - cy).powi(2);
                    let m = (-d2 / (2.0 * radius * radius)).exp();
                    let th = angle * m;
                    let (r, g) = (img.at(0, y, x), img.at(1, y, x));
                    *img.at_mut(0, y, x) = r * th.cos() - g * th.sin();
                    *img.at_mut(1, y, x) = r * th.sin() + g * th.cos();
                }
            }
        }
        "id-consistent" => {
            // Blend in another (generated) identity's base content.
            let donor_tag = 1000 + (rng.random::<u32>() % 64);
            let donor = identity_base(cfg, donor_tag);
            let w = 0.45 + 0.15 * rng.random::<f32>();
            let _ = identity; // donor content is method-specific, not per-identity
            for (v, d) in img.data.iter_mut().zip(&donor.data) {
                *v = (1.0 - w) * *v + w * d;
            }
        }
        "style-transfer" => {
            // Global tone-curve remap plus a faint texture overlay.
            let gamma = 0.5 + 1.1 * rng.random::<f32>();
            let f = 4.0 + 3.0 * rng.random::<f32>();
            for y in 0..s {
                let v = y as f32 / sf;
                for x in 0..s {
                    let u = x as f32 / sf;
                    let tex = a * 0.25 * (std::f32::consts::TAU * f * (u + v)).sin();
                    for c in 0..CHANNELS {
                        let val = img.at(c, y, x).clamp(0.0, 1.0);
                        *img.at_mut(c, y, x) = val.powf(gamma) + tex;
                    }
                }
            }
        }
        "prompt-based" => {
            // Tile shuffle with per-tile recolor: patchwork artifacts.
            let tile = (s / 8).max(2);
            let tiles = s / tile;
            let src = img.clone();
            for ty in 0..tiles {
                for tx in 0..tiles {
                    // Swap with a neighbour chosen by the method rng.
                    let sy = (ty + (rng.random::<u32>() % 2) as usize) % tiles;
                    let sx = (tx + (rng.random::<u32>() % 2) as usize) % tiles;
                    let recolor = a * 0.3 * (rng.random::<f32>() - 0.5);
                    for y in 0..tile {
                        for x in 0..tile {
                            for c in 0..CHANNELS {
                                *img.at_mut(c, ty * tile + y, tx * tile + x) =
                                    src.at(c, sy * tile + y, sx * tile + x) + recolor;
                            }
                        }
                    }
                }
            }
        }
        other => {
            // Custom taxonomies fall back to a node-keyed grating.
            let f = 3.0 + (other.len() % 7) as f32;
            for y in 0..s {
                let v = y as f32 / sf;
                for x in 0..s {
                    let u = x as f32 / sf;
                    for c in 0..CHANNELS {
                        *img.at_mut(c, y, x) += a * (std::f32::consts::TAU * f * (u + 0.5 * v)).sin();
                    }
                }
            }
        }
    }
}
