//! Synthetic counting task. Each image is `n_vision_tokens` region
//! embeddings; `k` of them come from the asked-about object's cluster and
//! the rest from background or distractor clusters. The response is a short
//! numbered chain of thought ending in the count word.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{CalibrationSample, Corpus};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::seed::{rng, sub_seed};

pub const DEFAULT_CORPUS_SIZE: usize = 128;

/// Cluster centres are shared by every corpus so that training and
/// calibration data describe the same visual world.
const WORLD_SEED: u64 = 0x0057_0a1d;
const OBJECTS: [&str; 6] = ["cube", "ball", "cup", "star", "key", "leaf"];
const NOISE_STD: f64 = 0.15;
const MAX_COUNT: usize = 6;

pub fn number_word(k: usize) -> &'static str {
    const WORDS: [&str; 10] = [
        "zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine",
    ];
    WORDS.get(k).copied().unwrap_or("many")
}

struct World {
    objects: Vec<Vec<f64>>,
    background: Vec<f64>,
}

impl World {
    fn new(d_model: usize) -> Self {
        let mut r = rng(sub_seed(WORLD_SEED, "centres"));
        let n = Normal::new(0.0, 1.0).unwrap();
        let mut centre = || -> Vec<f64> { (0..d_model).map(|_| n.sample(&mut r)).collect() };
        let objects = OBJECTS.iter().map(|_| centre()).collect();
        let background = centre();
        World { objects, background }
    }
}

fn plural(obj: &str, k: usize) -> String {
    if k == 1 {
        obj.to_string()
    } else {
        format!("{obj}s")
    }
}

fn response(template: usize, obj: &str, k: usize, regions: usize) -> String {
    let word = number_word(k);
    let objs = plural(obj, k);
    match template {
        0 => format!(
            "1. I look at all {regions} regions of the image one by one.\n\
             2. I check whether each region shows a {obj}.\n\
             3. I find {k} regions that show a {obj}.\n\
             Therefore, the count is {word}.\n\
             Final Answer: {word}"
        ),
        1 => format!(
            "Step 1: I scan the picture for every {obj} it contains.\n\
             Step 2: I mark each {obj} once so none is counted twice.\n\
             Next, I add up the marks and get {k}.\n\
             So the image has {word} {objs}.\n\
             Answer: {word}"
        ),
        _ => format!(
            "1. The picture holds {regions} regions with different objects.\n\
             2. Some regions are empty background or other things.\n\
             However, exactly {k} of the regions hold a {obj}.\n\
             Thus, there are {word} {objs}.\n\
             Final Answer: {word}"
        ),
    }
}

/// Deterministic synthetic corpus of `n` samples.
pub fn generate_synthetic_corpus(seed: u64, n: usize, config: &ModelConfig) -> Result<Corpus> {
    if n == 0 {
        return Err(Error::InvalidArgument("corpus size must be >= 1".into()));
    }
    let world = World::new(config.d_model);
    let nv = config.n_vision_tokens;
    let noise = Normal::new(0.0, NOISE_STD).unwrap();
    let mut r = rng(sub_seed(seed, "data"));
    let mut samples = Vec::with_capacity(n);
    for _ in 0..n {
        let target = r.random_range(0..OBJECTS.len());
        let k = r.random_range(1..=MAX_COUNT.min(nv));
        let mut slots: Vec<Option<usize>> = vec![Some(target); k];
        for _ in k..nv {
            // Background or a distractor object, never the target.
            let pick = r.random_range(0..OBJECTS.len());
            slots.push((pick != target && r.random_bool(0.5)).then_some(pick));
        }
        slots.shuffle(&mut r);
        let vision = slots
            .iter()
            .map(|slot| {
                let centre = match slot {
                    Some(o) => &world.objects[*o],
                    None => &world.background,
                };
                centre.iter().map(|c| c + noise.sample(&mut r)).collect()
            })
            .collect();
        let obj = OBJECTS[target];
        let prompt = format!("Q: How many {}s are in the image?\n", obj);
        let template = r.random_range(0..3);
        let text = response(template, obj, k, nv);
        let sample = CalibrationSample::new(vision, prompt, text, k as i64);
        let len = nv + sample.token_ids.len();
        if len > config.max_seq {
            return Err(Error::SequenceTooLong {
                len,
                max_seq: config.max_seq,
            });
        }
        samples.push(sample);
    }
    Ok(Corpus { samples, seed })
}
