//! Synthetic scene/caption corpus.
//!
//! Each scene has a fixed number of visual slots; most hold an object with a
//! size, color, material and shape. The caption lists the objects in slot
//! order as four-word phrases, with separator tokens (`,`, `the`, `and`)
//! interleaved at a configured rate. Captions are cut to the generation
//! length and closed with `eot`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelSpec, SequenceLayout};

pub const SEPARATORS: [u32; 3] = [0, 1, 2];
pub const PROMPT: [u32; 4] = [3, 4, 5, 6];
const SIZE_BASE: u32 = 7;
const COLOR_BASE: u32 = 13;
const MATERIAL_BASE: u32 = 23;
const SHAPE_BASE: u32 = 29;
/// One past the last id the corpus produces. Ids from here up to the
/// specials never occur in captions.
pub const CONTENT_END: u32 = 41;

const SIZES: [&str; 6] = ["tiny", "small", "medium", "large", "huge", "giant"];
const COLORS: [&str; 10] = [
    "red", "blue", "green", "yellow", "purple", "cyan", "brown", "gray", "white", "black",
];
const MATERIALS: [&str; 6] = ["metal", "rubber", "glass", "wooden", "stone", "paper"];
const SHAPES: [&str; 12] = [
    "cube", "sphere", "cylinder", "cone", "torus", "pyramid", "ring", "disk", "prism", "block", "ball", "star",
];
const PROMPT_WORDS: [&str; 4] = ["please", "describe", "this", "scene"];
const SEPARATOR_WORDS: [&str; 3] = [",", "the", "and"];

/// Human-readable name of a token id.
pub fn token_name(id: u32, spec: &ModelSpec) -> String {
    let i = id as usize;
    match id {
        _ if id == spec.mask_id => "<mask>".into(),
        _ if id == spec.eot_id => "<eot>".into(),
        _ if id == spec.pad_id => "<pad>".into(),
        0..=2 => SEPARATOR_WORDS[i].into(),
        3..=6 => PROMPT_WORDS[i - 3].into(),
        7..=12 => SIZES[i - 7].into(),
        13..=22 => COLORS[i - 13].into(),
        23..=28 => MATERIALS[i - 23].into(),
        29..=40 => SHAPES[i - 29].into(),
        _ => format!("<unused{id}>"),
    }
}

pub fn is_separator(id: u32) -> bool {
    SEPARATORS.contains(&id)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub n_visual: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub gen_len: usize,
    /// Gaussian noise added to each visual vector.
    pub noise_sigma: f64,
    /// Probability that a caption position holds a separator.
    pub separator_rate: f64,
    /// Seed of the attribute codebooks (fixed per corpus "world").
    pub world_seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            n_visual: 8,
            min_objects: 6,
            max_objects: 8,
            gen_len: 32,
            noise_sigma: 0.1,
            separator_rate: 0.35,
            world_seed: 7,
        }
    }
}

impl CorpusConfig {
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.n_visual == 0 {
            v.push("n_visual: must be >= 1".to_string());
        }
        if self.min_objects == 0 || self.min_objects > self.max_objects || self.max_objects > self.n_visual {
            v.push(format!(
                "min_objects: need 1 <= min_objects <= max_objects <= n_visual, got {}..{} over {}",
                self.min_objects, self.max_objects, self.n_visual
            ));
        }
        if self.gen_len < 2 {
            v.push("gen_len: must be >= 2".to_string());
        }
        if !(self.noise_sigma >= 0.0) {
            v.push("noise_sigma: must be >= 0".to_string());
        }
        if !(0.0..1.0).contains(&self.separator_rate) {
            v.push("separator_rate: must lie in [0, 1)".to_string());
        }
        v
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SceneObject {
    pub size: usize,
    pub color: usize,
    pub material: usize,
    pub shape: usize,
}

impl SceneObject {
    pub fn words(&self) -> [u32; 4] {
        [
            SIZE_BASE + self.size as u32,
            COLOR_BASE + self.color as u32,
            MATERIAL_BASE + self.material as u32,
            SHAPE_BASE + self.shape as u32,
        ]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSample {
    /// One entry per visual slot.
    pub objects: Vec<Option<SceneObject>>,
    pub visual: Vec<Vec<f32>>,
    pub prompt: Vec<u32>,
    /// Exactly `gen_len` ids, ending in `eot`.
    pub response: Vec<u32>,
}

impl SceneSample {
    /// Layout with the generation span fully masked.
    pub fn masked_layout(&self, mask_id: u32) -> SequenceLayout {
        SequenceLayout::masked(self.visual.clone(), self.prompt.clone(), self.response.len(), mask_id)
    }

    /// Layout with the reference response in the generation span.
    pub fn full_layout(&self) -> SequenceLayout {
        SequenceLayout::new(self.visual.clone(), self.prompt.clone(), self.response.clone())
    }
}

/// Attribute codebooks plus sampling parameters.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub config: CorpusConfig,
    eot_id: u32,
    d_vis: usize,
    size_cb: Vec<Vec<f64>>,
    color_cb: Vec<Vec<f64>>,
    material_cb: Vec<Vec<f64>>,
    shape_cb: Vec<Vec<f64>>,
    empty: Vec<f64>,
}

impl Corpus {
    pub fn new(config: CorpusConfig, spec: &ModelSpec) -> Result<Self> {
        if let Some(first) = config.violations().first() {
            return Err(Error::invalid(format!("corpus {first}")));
        }
        if let Some(id) = (0..CONTENT_END).find(|&i| spec.is_special(i) || i as usize >= spec.vocab_size) {
            return Err(Error::invalid(format!(
                "corpus needs content ids 0..{CONTENT_END}, but id {id} is special or out of range"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.world_seed);
        let d = spec.d_vis;
        let scale = 1.0 / (d as f64).sqrt() * 2.0;
        let mut book = |n: usize| -> Vec<Vec<f64>> {
            (0..n)
                .map(|_| {
                    (0..d)
                        .map(|_| {
                            let g: f64 = StandardNormal.sample(&mut rng);
                            g * scale
                        })
                        .collect()
                })
                .collect()
        };
        let size_cb = book(SIZES.len());
        let color_cb = book(COLORS.len());
        let material_cb = book(MATERIALS.len());
        let shape_cb = book(SHAPES.len());
        let empty = book(1).remove(0);
        Ok(Self {
            config,
            eot_id: spec.eot_id,
            d_vis: d,
            size_cb,
            color_cb,
            material_cb,
            shape_cb,
            empty,
        })
    }

    /// Noise-free visual vector of a slot.
    pub fn clean_vector(&self, object: Option<&SceneObject>) -> Vec<f64> {
        match object {
            None => self.empty.clone(),
            Some(o) => (0..self.d_vis)
                .map(|i| {
                    self.size_cb[o.size][i]
                        + self.color_cb[o.color][i]
                        + self.material_cb[o.material][i]
                        + self.shape_cb[o.shape][i]
                })
                .collect(),
        }
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> SceneSample {
        let c = &self.config;
        let n_obj = rng.random_range(c.min_objects..=c.max_objects);
        // Choose which slots are occupied.
        let mut slots: Vec<usize> = (0..c.n_visual).collect();
        for i in 0..n_obj {
            let j = rng.random_range(i..c.n_visual);
            slots.swap(i, j);
        }
        let mut occupied = vec![false; c.n_visual];
        for &s in &slots[..n_obj] {
            occupied[s] = true;
        }
        let objects: Vec<Option<SceneObject>> = occupied
            .iter()
            .map(|&o| {
                o.then(|| SceneObject {
                    size: rng.random_range(0..SIZES.len()),
                    color: rng.random_range(0..COLORS.len()),
                    material: rng.random_range(0..MATERIALS.len()),
                    shape: rng.random_range(0..SHAPES.len()),
                })
            })
            .collect();

        let noise = (c.noise_sigma > 0.0).then(|| Normal::new(0.0, c.noise_sigma).expect("valid sigma"));
        let visual = objects
            .iter()
            .map(|o| {
                self.clean_vector(o.as_ref())
                    .into_iter()
                    .map(|v| match &noise {
                        Some(n) => (v + n.sample(rng)) as f32,
                        None => v as f32,
                    })
                    .collect()
            })
            .collect();

        let words: Vec<u32> = objects.iter().flatten().flat_map(|o| o.words()).collect();
        let body = c.gen_len - 1;
        let mut response = Vec::with_capacity(c.gen_len);
        let mut next = 0;
        while response.len() < body && next < words.len() {
            if rng.random::<f64>() < c.separator_rate {
                response.push(SEPARATORS[rng.random_range(0..SEPARATORS.len())]);
            } else {
                response.push(words[next]);
                next += 1;
            }
        }
        response.resize(c.gen_len, self.eot_id);

        SceneSample {
            objects,
            visual,
            prompt: PROMPT.to_vec(),
            response,
        }
    }

    /// Deterministic sample stream.
    pub fn stream(&self, seed: u64) -> impl Iterator<Item = SceneSample> + '_ {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        std::iter::repeat_with(move || self.sample(&mut rng))
    }

    /// Response-token counts over `n` samples, indexed by token id.
    pub fn token_frequencies(&self, n: usize, seed: u64, vocab_size: usize) -> Vec<f64> {
        let mut f = vec![0.0; vocab_size];
        for s in self.stream(seed).take(n) {
            for &t in &s.response {
                f[t as usize] += 1.0;
            }
        }
        f
    }
}

/// `n` samples from a fresh corpus stream.
pub fn gen_corpus(corpus: &Corpus, seed: u64, n: usize) -> Vec<SceneSample> {
    corpus.stream(seed).take(n).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_cover_every_id() {
        let spec = ModelSpec::default();
        assert_eq!(token_name(0, &spec), ",");
        assert_eq!(token_name(40, &spec), "star");
        assert_eq!(token_name(63, &spec), "<mask>");
        assert_eq!(token_name(41, &spec), "<unused41>");
    }

    #[test]
    fn responses_end_in_eot_and_fill_gen_len() {
        let spec = ModelSpec::default();
        let c = Corpus::new(CorpusConfig::default(), &spec).unwrap();
        for s in c.stream(3).take(50) {
            assert_eq!(s.response.len(), 32);
            assert_eq!(*s.response.last().unwrap(), spec.eot_id);
            assert_eq!(s.visual.len(), 8);
        }
    }

    #[test]
    fn rejects_small_vocabulary() {
        let spec = ModelSpec {
            vocab_size: 32,
            mask_id: 31,
            eot_id: 30,
            pad_id: 29,
            ..ModelSpec::default()
        };
        assert!(Corpus::new(CorpusConfig::default(), &spec).is_err());
    }
}
