//! Corpus generation and the MXDS dataset file format.

use super::scene::{generate_scene, Noun, SceneSpec, SyntheticScene};
use super::vocab::{detokenize, Vocab};
use crate::error::{Error, Result};
use crate::raster::Raster;
use std::collections::HashSet;
use std::io::{Read, Write};
use std::path::Path;

pub const DATASET_MAGIC: &[u8; 4] = b"MXDS";
pub const DATASET_VERSION: u32 = 1;

/// Which (color, shape) pairs a corpus draws from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CorpusMode {
    /// Everything except the held-out pairs.
    Train,
    /// Only the held-out pairs (zero-shot evaluation scenes).
    HeldOut,
    /// The full pair vocabulary.
    All,
}

/// Declarative corpus description, parseable from a key=value file.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusSpec {
    pub scene_count: usize,
    pub seed: u64,
    pub image_size: usize,
    pub max_text_len: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub held_out: Vec<Noun>,
    pub mode: CorpusMode,
    /// Reject scenes whose caption already occurred (keeps the contrastive
    /// targets unambiguous). Requires scene_count within the caption space.
    pub unique_captions: bool,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec {
            scene_count: 64,
            seed: 7,
            image_size: 64,
            max_text_len: 16,
            min_objects: 1,
            max_objects: 3,
            held_out: Vec::new(),
            mode: CorpusMode::All,
            unique_captions: true,
        }
    }
}

impl CorpusSpec {
    /// Parse a flat `key = value` file; unknown keys are rejected.
    pub fn parse(text: &str) -> Result<Self> {
        let mut spec = CorpusSpec::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value", lineno + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            let bad = |what: &str| Error::Config(format!("line {}: bad {what}: {value:?}", lineno + 1));
            match key {
                "scenes" => spec.scene_count = value.parse().map_err(|_| bad("scenes"))?,
                "seed" => spec.seed = value.parse().map_err(|_| bad("seed"))?,
                "image_size" => spec.image_size = value.parse().map_err(|_| bad("image_size"))?,
                "max_text_len" => spec.max_text_len = value.parse().map_err(|_| bad("max_text_len"))?,
                "min_objects" => spec.min_objects = value.parse().map_err(|_| bad("min_objects"))?,
                "max_objects" => spec.max_objects = value.parse().map_err(|_| bad("max_objects"))?,
                "unique_captions" => {
                    spec.unique_captions = value.parse().map_err(|_| bad("unique_captions"))?
                }
                "mode" => {
                    spec.mode = match value {
                        "train" => CorpusMode::Train,
                        "heldout" => CorpusMode::HeldOut,
                        "all" => CorpusMode::All,
                        _ => return Err(bad("mode (train|heldout|all)")),
                    }
                }
                "held_out" => {
                    spec.held_out = value
                        .split(',')
                        .filter(|s| !s.trim().is_empty())
                        .map(|pair| Noun::parse(&pair.trim().replace(':', " ")))
                        .collect::<Result<_>>()?;
                }
                other => {
                    return Err(Error::Config(format!(
                        "line {}: unknown key {other:?}",
                        lineno + 1
                    )))
                }
            }
        }
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Pairs this corpus may use.
    pub fn allowed_pairs(&self) -> Vec<Noun> {
        let held: HashSet<Noun> = self.held_out.iter().copied().collect();
        match self.mode {
            CorpusMode::All => Noun::all(),
            CorpusMode::Train => Noun::all().into_iter().filter(|n| !held.contains(n)).collect(),
            CorpusMode::HeldOut => self.held_out.clone(),
        }
    }
}

/// Generate the corpus described by `spec`. Each scene derives its stream
/// from (seed, scene index), so generation could fan out per scene.
pub fn generate_corpus(spec: &CorpusSpec, vocab: &Vocab) -> Result<Vec<SyntheticScene>> {
    let allowed = spec.allowed_pairs();
    if allowed.is_empty() && spec.min_objects > 0 {
        return Err(Error::Config("corpus has no allowed (color, shape) pairs".into()));
    }
    let scene_spec = SceneSpec {
        image_size: spec.image_size,
        max_text_len: spec.max_text_len,
        min_objects: spec.min_objects,
        max_objects: spec.max_objects,
        allowed,
    };
    let mut scenes = Vec::with_capacity(spec.scene_count);
    let mut seen = HashSet::new();
    for index in 0..spec.scene_count {
        let mut scene = None;
        for attempt in 0..200 {
            let mut rng = crate::numerics::RngStream::new(
                spec.seed,
                &format!("scene.{index}.{attempt}"),
            );
            let candidate = generate_scene(&mut rng, &scene_spec, vocab)?;
            if !spec.unique_captions || seen.insert(candidate.caption.clone()) {
                scene = Some(candidate);
                break;
            }
        }
        scenes.push(scene.ok_or_else(|| {
            Error::Config(format!(
                "could not draw a fresh caption for scene {index}; caption space too small for {} unique scenes",
                spec.scene_count
            ))
        })?);
    }
    Ok(scenes)
}

/// Serialize scenes to the MXDS binary format.
pub fn write_dataset_to(
    w: &mut impl Write,
    scenes: &[SyntheticScene],
    vocab: &Vocab,
) -> Result<()> {
    let (h, ww, max_len) = match scenes.first() {
        Some(s) => (s.image.h, s.image.w, s.token_ids.len()),
        None => return Err(Error::Config("refusing to write an empty dataset".into())),
    };
    w.write_all(DATASET_MAGIC)?;
    w.write_all(&DATASET_VERSION.to_le_bytes())?;
    w.write_all(&(scenes.len() as u32).to_le_bytes())?;
    w.write_all(&(h as u32).to_le_bytes())?;
    w.write_all(&(ww as u32).to_le_bytes())?;
    w.write_all(&(max_len as u32).to_le_bytes())?;
    w.write_all(&vocab.hash().to_le_bytes())?;
    for (i, scene) in scenes.iter().enumerate() {
        if scene.image.h != h || scene.image.w != ww || scene.token_ids.len() != max_len {
            return Err(Error::Config(format!("scene {i} disagrees with header dimensions")));
        }
        for &v in &scene.image.data {
            w.write_all(&v.to_le_bytes())?;
        }
        w.write_all(&scene.pixel_mask)?;
        for &t in &scene.token_ids {
            w.write_all(&t.to_le_bytes())?;
        }
        w.write_all(&[scene.nouns.len() as u8])?;
        for n in &scene.nouns {
            w.write_all(&[n.color, n.shape])?;
        }
    }
    Ok(())
}

pub fn write_dataset(path: &Path, scenes: &[SyntheticScene], vocab: &Vocab) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_dataset_to(&mut f, scenes, vocab)
}

/// Read an MXDS file, verifying magic, version, and vocabulary hash.
pub fn read_dataset_from(
    r: &mut impl Read,
    name: &str,
    vocab: &Vocab,
) -> Result<Vec<SyntheticScene>> {
    let mut offset = 0u64;
    let mut take = |r: &mut dyn Read, buf: &mut [u8], what: &str| -> Result<()> {
        r.read_exact(buf)
            .map_err(|_| Error::format(name, offset, format!("truncated while reading {what}")))?;
        offset += buf.len() as u64;
        Ok(())
    };
    let mut magic = [0u8; 4];
    take(r, &mut magic, "magic")?;
    if &magic != DATASET_MAGIC {
        return Err(Error::format(name, 0, format!("bad magic {magic:?}")));
    }
    let mut u32b = [0u8; 4];
    take(r, &mut u32b, "version")?;
    let version = u32::from_le_bytes(u32b);
    if version != DATASET_VERSION {
        return Err(Error::format(name, 4, format!("unsupported version {version}")));
    }
    take(r, &mut u32b, "count")?;
    let count = u32::from_le_bytes(u32b) as usize;
    take(r, &mut u32b, "height")?;
    let h = u32::from_le_bytes(u32b) as usize;
    take(r, &mut u32b, "width")?;
    let w = u32::from_le_bytes(u32b) as usize;
    take(r, &mut u32b, "max_len")?;
    let max_len = u32::from_le_bytes(u32b) as usize;
    let mut u64b = [0u8; 8];
    take(r, &mut u64b, "vocab hash")?;
    let hash = u64::from_le_bytes(u64b);
    if hash != vocab.hash() {
        return Err(Error::format(
            name,
            20,
            format!(
                "vocabulary hash mismatch: file {hash:#018x}, table {:#018x}",
                vocab.hash()
            ),
        ));
    }

    let mut scenes = Vec::with_capacity(count);
    for i in 0..count {
        let mut data = vec![0f32; h * w * 3];
        let mut buf = vec![0u8; h * w * 3 * 4];
        take(r, &mut buf, &format!("scene {i} image"))?;
        for (v, c) in data.iter_mut().zip(buf.chunks_exact(4)) {
            *v = f32::from_le_bytes([c[0], c[1], c[2], c[3]]);
        }
        let image = Raster { h, w, data };
        let mut pixel_mask = vec![0u8; h * w];
        take(r, &mut pixel_mask, &format!("scene {i} mask"))?;
        let mut tok = vec![0u8; max_len * 2];
        take(r, &mut tok, &format!("scene {i} tokens"))?;
        let token_ids: Vec<u16> = tok
            .chunks_exact(2)
            .map(|c| u16::from_le_bytes([c[0], c[1]]))
            .collect();
        let mut nb = [0u8; 1];
        take(r, &mut nb, &format!("scene {i} noun count"))?;
        let mut nouns = Vec::with_capacity(nb[0] as usize);
        for _ in 0..nb[0] {
            let mut pair = [0u8; 2];
            take(r, &mut pair, &format!("scene {i} noun"))?;
            nouns.push(Noun { color: pair[0], shape: pair[1] });
        }
        let caption = detokenize(&token_ids, vocab)?;
        scenes.push(SyntheticScene {
            image,
            pixel_mask,
            caption,
            token_ids,
            nouns,
        });
    }
    Ok(scenes)
}

pub fn read_dataset(path: &Path, vocab: &Vocab) -> Result<Vec<SyntheticScene>> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    read_dataset_from(&mut f, &path.display().to_string(), vocab)
}

/// Exact byte size the format implies for these scenes.
pub fn expected_file_size(scenes: &[SyntheticScene]) -> usize {
    let header = 4 + 4 + 4 + 4 + 4 + 4 + 8;
    let per_scene: usize = scenes
        .iter()
        .map(|s| s.image.data.len() * 4 + s.pixel_mask.len() + s.token_ids.len() * 2 + 1 + 2 * s.nouns.len())
        .sum();
    header + per_scene
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> CorpusSpec {
        CorpusSpec {
            scene_count: 6,
            seed: 21,
            image_size: 32,
            ..CorpusSpec::default()
        }
    }

    #[test]
    fn round_trip_is_structural_equality() {
        let vocab = Vocab::builtin();
        let scenes = generate_corpus(&small_spec(), &vocab).unwrap();
        let mut bytes = Vec::new();
        write_dataset_to(&mut bytes, &scenes, &vocab).unwrap();
        let back = read_dataset_from(&mut bytes.as_slice(), "mem", &vocab).unwrap();
        assert_eq!(scenes, back);
    }

    #[test]
    fn corrupted_magic_is_rejected() {
        let vocab = Vocab::builtin();
        let scenes = generate_corpus(&small_spec(), &vocab).unwrap();
        let mut bytes = Vec::new();
        write_dataset_to(&mut bytes, &scenes, &vocab).unwrap();
        bytes[1] = b'Z';
        let err = read_dataset_from(&mut bytes.as_slice(), "mem", &vocab).unwrap_err();
        assert!(err.to_string().contains("magic"), "{err}");
    }

    #[test]
    fn truncation_reports_offset() {
        let vocab = Vocab::builtin();
        let scenes = generate_corpus(&small_spec(), &vocab).unwrap();
        let mut bytes = Vec::new();
        write_dataset_to(&mut bytes, &scenes, &vocab).unwrap();
        let cut = bytes.len() - 5;
        let err = read_dataset_from(&mut &bytes[..cut], "mem", &vocab).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("truncated"), "{msg}");
        assert!(msg.contains("byte"), "{msg}");
    }

    #[test]
    fn file_size_matches_format_computation() {
        let vocab = Vocab::builtin();
        let mut spec = small_spec();
        spec.scene_count = 64;
        spec.image_size = 16;
        let scenes = generate_corpus(&spec, &vocab).unwrap();
        let mut bytes = Vec::new();
        write_dataset_to(&mut bytes, &scenes, &vocab).unwrap();
        assert_eq!(bytes.len(), expected_file_size(&scenes));
    }

    #[test]
    fn determinism_same_seed_bitwise_identical_corpus() {
        let vocab = Vocab::builtin();
        let spec = small_spec();
        let a = generate_corpus(&spec, &vocab).unwrap();
        let b = generate_corpus(&spec, &vocab).unwrap();
        let mut ab = Vec::new();
        let mut bb = Vec::new();
        write_dataset_to(&mut ab, &a, &vocab).unwrap();
        write_dataset_to(&mut bb, &b, &vocab).unwrap();
        assert_eq!(ab, bb);
    }

    #[test]
    fn held_out_pairs_never_appear_in_training_corpus() {
        let vocab = Vocab::builtin();
        let mut spec = small_spec();
        spec.scene_count = 40;
        spec.held_out = vec![
            Noun::parse("red circle").unwrap(),
            Noun::parse("blue ring").unwrap(),
        ];
        spec.mode = CorpusMode::Train;
        let scenes = generate_corpus(&spec, &vocab).unwrap();
        for scene in &scenes {
            for noun in &scene.nouns {
                assert!(
                    !spec.held_out.contains(noun),
                    "held-out pair {:?} leaked into training scene",
                    noun.phrase()
                );
            }
        }
        // held-out corpus only contains held-out pairs
        spec.mode = CorpusMode::HeldOut;
        spec.scene_count = 4;
        spec.max_objects = 2;
        let eval = generate_corpus(&spec, &vocab).unwrap();
        for scene in &eval {
            assert!(!scene.nouns.is_empty());
            for noun in &scene.nouns {
                assert!(spec.held_out.contains(noun));
            }
        }
    }

    #[test]
    fn unique_captions_are_enforced() {
        let vocab = Vocab::builtin();
        let mut spec = small_spec();
        spec.scene_count = 24;
        spec.min_objects = 1;
        spec.max_objects = 1;
        let scenes = generate_corpus(&spec, &vocab).unwrap();
        let mut seen = std::collections::HashSet::new();
        for s in &scenes {
            assert!(seen.insert(s.caption.clone()), "duplicate caption {:?}", s.caption);
        }
        // 30 single-object captions exist; asking for more must fail
        spec.scene_count = 31;
        assert!(generate_corpus(&spec, &vocab).is_err());
    }

    #[test]
    fn spec_file_parsing_rejects_unknown_keys() {
        let good = "scenes = 8\nseed = 3\nmode = train\nheld_out = red:circle, blue:ring\n# comment\n";
        let spec = CorpusSpec::parse(good).unwrap();
        assert_eq!(spec.scene_count, 8);
        assert_eq!(spec.held_out.len(), 2);
        assert_eq!(spec.mode, CorpusMode::Train);

        let err = CorpusSpec::parse("scenes = 8\nbogus = 1\n").unwrap_err();
        assert!(err.to_string().contains("bogus"), "{err}");
    }
}
