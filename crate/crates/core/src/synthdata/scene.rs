//! Procedural scenes: colored shapes on a noisy gray background with exact
//! per-pixel class masks and templated captions.
//!
//! Rasterization uses only IEEE add/mul/compare (noise comes from an
//! Irwin–Hall sum), so generated corpora are bit-identical across platforms
//! and can be pinned as golden files.

use super::vocab::{tokenize, Vocab};
use crate::error::{Error, Result};
use crate::numerics::RngStream;
use crate::raster::Raster;

pub const COLOR_NAMES: [&str; 6] = ["red", "green", "blue", "yellow", "purple", "orange"];
pub const COLOR_RGB: [[f32; 3]; 6] = [
    [0.85, 0.10, 0.10],
    [0.10, 0.70, 0.15],
    [0.15, 0.25, 0.85],
    [0.90, 0.85, 0.10],
    [0.55, 0.15, 0.75],
    [0.95, 0.55, 0.10],
];
pub const SHAPE_NAMES: [&str; 5] = ["circle", "square", "triangle", "cross", "ring"];

pub const GRAY: f32 = 0.5;
pub const NOISE_STD: f64 = 0.02;

/// A (color, shape) pair; the unit of the open-world split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Noun {
    pub color: u8,
    pub shape: u8,
}

impl Noun {
    pub fn phrase(&self) -> String {
        format!(
            "{} {}",
            COLOR_NAMES[self.color as usize], SHAPE_NAMES[self.shape as usize]
        )
    }

    /// Parse "red circle".
    pub fn parse(text: &str) -> Result<Noun> {
        let mut it = text.split_whitespace();
        let (c, s) = (it.next().unwrap_or(""), it.next().unwrap_or(""));
        let color = COLOR_NAMES
            .iter()
            .position(|&n| n == c)
            .ok_or_else(|| Error::Vocab(format!("unknown color {c:?}")))?;
        let shape = SHAPE_NAMES
            .iter()
            .position(|&n| n == s)
            .ok_or_else(|| Error::Vocab(format!("unknown shape {s:?}")))?;
        Ok(Noun { color: color as u8, shape: shape as u8 })
    }

    /// All 30 pairs in (color-major) order.
    pub fn all() -> Vec<Noun> {
        let mut v = Vec::with_capacity(30);
        for color in 0..COLOR_NAMES.len() as u8 {
            for shape in 0..SHAPE_NAMES.len() as u8 {
                v.push(Noun { color, shape });
            }
        }
        v
    }
}

/// One generated image with its exact ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub image: Raster,
    /// `H*W` class ids; 0 is background, `k` refers to `nouns[k-1]`.
    pub pixel_mask: Vec<u8>,
    pub caption: String,
    pub token_ids: Vec<u16>,
    pub nouns: Vec<Noun>,
}

/// Scene-generation parameters (one record per corpus).
#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub image_size: usize,
    pub max_text_len: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Pairs this corpus may draw from.
    pub allowed: Vec<Noun>,
}

struct PlacedShape {
    noun: Noun,
    cx: f32,
    cy: f32,
    r: f32,
}

fn inside(shape: u8, dx: f32, dy: f32, r: f32) -> bool {
    match shape {
        0 => dx * dx + dy * dy <= r * r,                      // circle
        1 => dx.abs() <= r * 0.9 && dy.abs() <= r * 0.9,      // square
        2 => dy >= -r && dy <= r && dx.abs() <= (dy + r) / 2.0, // triangle (apex up)
        3 => {
            // cross
            (dx.abs() <= r / 3.0 && dy.abs() <= r) || (dy.abs() <= r / 3.0 && dx.abs() <= r)
        }
        4 => {
            // ring
            let d2 = dx * dx + dy * dy;
            d2 <= r * r && d2 >= (0.55 * r) * (0.55 * r)
        }
        _ => unreachable!("shape id out of range"),
    }
}

fn rasterize(shape: &PlacedShape, size: usize, mask: &mut [u8], class: u8) -> usize {
    let mut painted = 0;
    for y in 0..size {
        for x in 0..size {
            let dx = x as f32 - shape.cx;
            let dy = y as f32 - shape.cy;
            if inside(shape.noun.shape, dx, dy, shape.r) {
                mask[y * size + x] = class;
                painted += 1;
            }
        }
    }
    painted
}

fn overlaps(shape: &PlacedShape, size: usize, mask: &[u8]) -> bool {
    for y in 0..size {
        for x in 0..size {
            let dx = x as f32 - shape.cx;
            let dy = y as f32 - shape.cy;
            if inside(shape.noun.shape, dx, dy, shape.r) && mask[y * size + x] != 0 {
                return true;
            }
        }
    }
    false
}

/// Generate one scene. Draws every random decision from `rng`; placement
/// failure after 100 attempts retries with one object fewer.
pub fn generate_scene(rng: &mut RngStream, spec: &SceneSpec, vocab: &Vocab) -> Result<SyntheticScene> {
    let size = spec.image_size;
    let mut target = if spec.max_objects >= spec.min_objects {
        spec.min_objects + rng.below((spec.max_objects - spec.min_objects + 1) as u64) as usize
    } else {
        return Err(Error::Config("min_objects exceeds max_objects".into()));
    };
    if target > 0 && spec.allowed.is_empty() {
        return Err(Error::Config("no allowed (color, shape) pairs".into()));
    }

    let mut mask = vec![0u8; size * size];
    let mut placed: Vec<PlacedShape> = Vec::new();
    let r_min = (size as f64 / 10.0).max(3.0);
    let r_max = (size as f64 / 5.0).max(r_min + 1.0);

    'outer: loop {
        mask.iter_mut().for_each(|v| *v = 0);
        placed.clear();
        for k in 0..target {
            let mut attempts = 0;
            loop {
                let noun = spec.allowed[rng.below(spec.allowed.len() as u64) as usize];
                let r = rng.uniform_range(r_min, r_max) as f32;
                let margin = r as f64 + 1.0;
                let cx = rng.uniform_range(margin, size as f64 - margin) as f32;
                let cy = rng.uniform_range(margin, size as f64 - margin) as f32;
                let cand = PlacedShape { noun, cx, cy, r };
                if !overlaps(&cand, size, &mask) {
                    rasterize(&cand, size, &mut mask, (k + 1) as u8);
                    placed.push(cand);
                    break;
                }
                attempts += 1;
                if attempts >= 100 {
                    target -= 1; // crowded: retry the whole scene with fewer objects
                    continue 'outer;
                }
            }
        }
        break;
    }

    let nouns: Vec<Noun> = placed.iter().map(|p| p.noun).collect();
    let mut image = Raster::new(size, size);
    for y in 0..size {
        for x in 0..size {
            let class = mask[y * size + x];
            let base = if class == 0 {
                [GRAY, GRAY, GRAY]
            } else {
                COLOR_RGB[nouns[class as usize - 1].color as usize]
            };
            let mut px = [0f32; 3];
            for (c, b) in px.iter_mut().zip(base) {
                let noise = (rng.normal() * NOISE_STD) as f32;
                *c = (b + noise).clamp(0.0, 1.0);
            }
            image.set_pixel(y, x, px);
        }
    }

    let caption = if nouns.is_empty() {
        "a photo of the scene".to_string()
    } else {
        let phrases: Vec<String> = nouns.iter().map(Noun::phrase).collect();
        format!("a photo of {}", phrases.join(" and "))
    };
    let token_ids = tokenize(&caption, vocab, spec.max_text_len)?;

    Ok(SyntheticScene {
        image,
        pixel_mask: mask,
        caption,
        token_ids,
        nouns,
    })
}

/// Majority pixel class of each `patch_size`² patch (ties take the smaller
/// class id). This is the exact patch-level ground truth used by evaluation.
pub fn patch_majority_labels(scene: &SyntheticScene, patch_size: usize) -> Vec<u8> {
    let size = scene.image.h;
    let side = size / patch_size;
    let mut labels = Vec::with_capacity(side * side);
    for py in 0..side {
        for px in 0..side {
            let mut counts = [0usize; 256];
            for dy in 0..patch_size {
                for dx in 0..patch_size {
                    let c = scene.pixel_mask[(py * patch_size + dy) * size + px * patch_size + dx];
                    counts[c as usize] += 1;
                }
            }
            let mut best = 0usize;
            for (c, &n) in counts.iter().enumerate() {
                if n > counts[best] {
                    best = c;
                }
            }
            labels.push(best as u8);
        }
    }
    labels
}

/// The fixed prompt templates of the multi-label loss.
pub const PROMPT_TEMPLATES: [&str; 3] = ["a photo of a {}", "an image of a {}", "a {} in the scene"];

/// K prompt token sequences for one scene; template k cycles through
/// [`PROMPT_TEMPLATES`], the noun is drawn from `rng`. Scenes without
/// objects fall back to the full caption repeated K times.
pub fn prompt_labels(
    scene: &SyntheticScene,
    k: usize,
    rng: &mut RngStream,
    vocab: &Vocab,
    max_text_len: usize,
) -> Result<Vec<Vec<u16>>> {
    if scene.nouns.is_empty() {
        return Ok(vec![scene.token_ids.clone(); k]);
    }
    if k > PROMPT_TEMPLATES.len() * scene.nouns.len() {
        return Err(Error::Config(format!(
            "{k} prompts requested but only {} templates x {} nouns available",
            PROMPT_TEMPLATES.len(),
            scene.nouns.len()
        )));
    }
    let mut out = Vec::with_capacity(k);
    for t in 0..k {
        let template = PROMPT_TEMPLATES[t % PROMPT_TEMPLATES.len()];
        let noun = scene.nouns[rng.below(scene.nouns.len() as u64) as usize];
        let text = template.replace("{}", &noun.phrase());
        out.push(tokenize(&text, vocab, max_text_len)?);
    }
    Ok(out)
}
