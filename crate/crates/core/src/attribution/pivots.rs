//! Reasoning-transition detection over chain-of-thought text.

use std::collections::BTreeSet;
use std::sync::OnceLock;

use rand::seq::index::sample;
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::calibration::tokenizer::char_index_of_byte;
use crate::error::{Error, Result};
use crate::calibration::Corpus;
use crate::seed::{rng, sub_seed};

pub const DEFAULT_HALF_WIDTH: usize = 8;
pub const DEFAULT_MIN_MARKERS: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MarkerClass {
    StructuralDelimiter,
    LogicalConnective,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PivotSource {
    Markers,
    FallbackThirds,
    Random,
}

/// Where transition windows come from when scoring a corpus.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PivotMode {
    #[default]
    Real,
    Random,
    None,
}

pub struct Marker {
    pub class: MarkerClass,
    pub name: &'static str,
    pub regex: Regex,
}

const PATTERNS: &[(MarkerClass, &str, &str)] = &[
    (MarkerClass::StructuralDelimiter, "numbered_step", r"(?m)^(\d+)[.)]\s"),
    (MarkerClass::StructuralDelimiter, "labelled_step", r"Step\s*\d+\s*[:–]"),
    (MarkerClass::StructuralDelimiter, "sub_step", r"(\d+)\.(\d+)\s"),
    (MarkerClass::StructuralDelimiter, "final_answer", r"Final Answer[:–]"),
    (MarkerClass::StructuralDelimiter, "answer_marker", r"\bAnswer\b\s*[:–]"),
    (MarkerClass::StructuralDelimiter, "conclusion_label", r"(Conclusion|Summary)[:–]"),
    (MarkerClass::StructuralDelimiter, "think_tag", r"<think>|</think>"),
    (MarkerClass::LogicalConnective, "causal_conclusion", r"\b(Therefore|Thus|Hence)\b"),
    (MarkerClass::LogicalConnective, "consequence", r"\b(So|Consequently|As a result)\b"),
    (MarkerClass::LogicalConnective, "inference", r"\b(This means|This implies|This suggests)\b"),
    (MarkerClass::LogicalConnective, "deduction", r"\b(We can (therefore|thus) conclude)\b"),
    (MarkerClass::LogicalConnective, "summary", r"\b(In (summary|conclusion)|To summarize)\b"),
    (MarkerClass::LogicalConnective, "transition_adverb", r"\b(Next|Now|Moving on|Finally)\b"),
    (MarkerClass::LogicalConnective, "contrastive_pivot", r"\b(However|Nevertheless|Despite this)\b"),
    (MarkerClass::LogicalConnective, "additive_reasoning", r"\b(Furthermore|Additionally|Moreover)\b"),
];

/// The marker taxonomy, compiled once, all case-insensitive.
pub fn markers() -> &'static [Marker] {
    static MARKERS: OnceLock<Vec<Marker>> = OnceLock::new();
    MARKERS.get_or_init(|| {
        PATTERNS
            .iter()
            .map(|&(class, name, pat)| Marker {
                class,
                name,
                regex: Regex::new(&format!("(?i){pat}")).expect("marker regex"),
            })
            .collect()
    })
}

/// One marker occurrence in a response.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct MarkerMatch {
    pub name: &'static str,
    pub class: MarkerClass,
    /// Character index of the match start.
    pub char_index: usize,
}

pub fn find_markers(text: &str) -> Vec<MarkerMatch> {
    let mut out: Vec<MarkerMatch> = markers()
        .iter()
        .flat_map(|m| {
            m.regex.find_iter(text).map(move |hit| MarkerMatch {
                name: m.name,
                class: m.class,
                char_index: char_index_of_byte(text, hit.start()),
            })
        })
        .collect();
    out.sort_by_key(|m| m.char_index);
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PivotMask {
    /// Response-relative token indices, ascending and distinct.
    pub pivot_indices: Vec<usize>,
    /// Response-relative token indices within `half_width` of a pivot.
    pub window: Vec<usize>,
    pub half_width: usize,
    pub source: PivotSource,
}

impl PivotMask {
    pub fn from_pivots(
        pivots: impl IntoIterator<Item = usize>,
        response_len: usize,
        half_width: usize,
        source: PivotSource,
    ) -> Self {
        let pivot_indices: Vec<usize> = pivots
            .into_iter()
            .filter(|&p| p < response_len)
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let window: BTreeSet<usize> = pivot_indices
            .iter()
            .flat_map(|&i| i.saturating_sub(half_width)..=(i + half_width).min(response_len - 1))
            .collect();
        PivotMask {
            pivot_indices,
            window: window.into_iter().collect(),
            half_width,
            source,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.pivot_indices.is_empty()
    }
}

/// Pivots at the two internal boundaries of three equal token segments.
pub fn thirds(response_len: usize) -> Vec<usize> {
    vec![response_len / 3, 2 * response_len / 3]
}

/// Scan `response_text` for transition markers and build the window around
/// each. Fewer than `min_markers` distinct pivot tokens falls back to
/// equal thirds.
pub fn detect_pivots(
    response_text: &str,
    char_to_token: &[usize],
    response_len: usize,
    half_width: usize,
    min_markers: usize,
) -> Result<PivotMask> {
    if response_text.is_empty() || response_len == 0 {
        return Err(Error::InvalidArgument("empty response".into()));
    }
    if half_width == 0 {
        return Err(Error::InvalidArgument("window half-width must be >= 1".into()));
    }
    let pivots: BTreeSet<usize> = find_markers(response_text)
        .iter()
        .map(|m| char_to_token[m.char_index])
        .collect();
    if pivots.len() < min_markers {
        return Ok(PivotMask::from_pivots(
            thirds(response_len),
            response_len,
            half_width,
            PivotSource::FallbackThirds,
        ));
    }
    Ok(PivotMask::from_pivots(
        pivots,
        response_len,
        half_width,
        PivotSource::Markers,
    ))
}

/// `count` distinct uniformly drawn response positions.
pub fn random_pivots(
    response_len: usize,
    count: usize,
    half_width: usize,
    seed: u64,
) -> Result<PivotMask> {
    if count == 0 {
        return Err(Error::InvalidArgument("pivot count must be >= 1".into()));
    }
    if count > response_len {
        return Err(Error::InvalidArgument(format!(
            "{count} pivots requested for a response of {response_len} tokens"
        )));
    }
    let mut r = rng(seed);
    let picked = sample(&mut r, response_len, count).into_vec();
    Ok(PivotMask::from_pivots(
        picked,
        response_len,
        half_width,
        PivotSource::Random,
    ))
}

/// One mask per sample. `Random` draws as many pivots as real detection
/// found for that sample; `None` yields empty masks.
pub fn corpus_pivot_masks(
    corpus: &Corpus,
    mode: PivotMode,
    half_width: usize,
    min_markers: usize,
    seed: u64,
) -> Result<Vec<PivotMask>> {
    corpus
        .samples
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let n = s.response_len();
            if mode == PivotMode::None {
                return Ok(PivotMask::from_pivots([], n, half_width, PivotSource::Markers));
            }
            let real = detect_pivots(&s.response_text, &s.char_to_token, n, half_width, min_markers)?;
            match mode {
                PivotMode::Random => random_pivots(
                    n,
                    real.pivot_indices.len(),
                    half_width,
                    sub_seed(seed, &format!("random-pivots/{i}")),
                ),
                _ => Ok(real),
            }
        })
        .collect()
}

/// Corpus-level pivot statistics recorded alongside plans.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PivotSummary {
    pub samples_with_pivots: usize,
    pub fallback_samples: usize,
    pub mean_pivots: f64,
    /// Mean of |window| / response length.
    pub mean_window_fraction: f64,
}

impl PivotSummary {
    pub fn of(masks: &[PivotMask], response_lens: &[usize]) -> Self {
        let n = masks.len().max(1) as f64;
        PivotSummary {
            samples_with_pivots: masks.iter().filter(|m| !m.is_empty()).count(),
            fallback_samples: masks
                .iter()
                .filter(|m| m.source == PivotSource::FallbackThirds)
                .count(),
            mean_pivots: masks.iter().map(|m| m.pivot_indices.len() as f64).sum::<f64>() / n,
            mean_window_fraction: masks
                .iter()
                .zip(response_lens)
                .map(|(m, &len)| m.window.len() as f64 / len.max(1) as f64)
                .sum::<f64>()
                / n,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calibration::tokenize;
    use proptest::prelude::*;

    fn detect(text: &str, min_markers: usize) -> PivotMask {
        let (ids, map) = tokenize(text);
        detect_pivots(text, &map, ids.len(), 8, min_markers).unwrap()
    }

    #[test]
    fn labelled_step_row() {
        let m = detect("Step 2: The object is circular...", 1);
        assert_eq!(m.pivot_indices, vec![0]);
        assert_eq!(m.source, PivotSource::Markers);
    }

    #[test]
    fn causal_conclusion_row() {
        let m = detect("Therefore, the count is two.", 1);
        assert_eq!(m.pivot_indices, vec![0]);
        assert_eq!(m.window, (0..=8).collect::<Vec<_>>());
    }

    #[test]
    fn single_marker_falls_back_under_default_threshold() {
        let m = detect("Therefore, the count is two.", DEFAULT_MIN_MARKERS);
        assert_eq!(m.source, PivotSource::FallbackThirds);
    }

    #[test]
    fn marker_free_text_uses_thirds() {
        let text = "abcdefghij klmnopqrst uvwxyzabc";
        assert_eq!(text.len(), 31);
        let text = &text[..30];
        let m = detect(text, 2);
        assert_eq!(m.source, PivotSource::FallbackThirds);
        assert_eq!(m.pivot_indices, vec![10, 20]);
    }

    #[test]
    fn matching_is_case_insensitive() {
        let m = detect("first THEREFORE second. moreover third", 2);
        assert_eq!(m.source, PivotSource::Markers);
        assert_eq!(m.pivot_indices, vec![6, 24]);
    }

    #[test]
    fn numbered_step_needs_line_start() {
        assert!(find_markers("I see 3. objects").is_empty());
        assert_eq!(find_markers("x\n2. y")[0].name, "numbered_step");
    }

    #[test]
    fn en_dash_separators() {
        let hits = find_markers("Step 3 – look. Conclusion– done");
        let names: Vec<_> = hits.iter().map(|h| h.name).collect();
        assert_eq!(names, vec!["labelled_step", "conclusion_label"]);
    }

    #[test]
    fn multibyte_text_maps_to_first_byte() {
        let text = "é So done, thus over";
        let (ids, map) = tokenize(text);
        let m = detect_pivots(text, &map, ids.len(), 2, 2).unwrap();
        // "So" starts at char 2 which is byte 3.
        assert_eq!(m.pivot_indices, vec![3, 12]);
    }

    #[test]
    fn empty_response_is_an_error() {
        assert!(detect_pivots("", &[], 0, 8, 2).is_err());
    }

    #[test]
    fn random_pivots_cover_and_repeat() {
        let m = random_pivots(30, 30, 8, 1).unwrap();
        assert_eq!(m.window, (0..30).collect::<Vec<_>>());
        assert_eq!(random_pivots(30, 2, 8, 5).unwrap(), random_pivots(30, 2, 8, 5).unwrap());
        let m = random_pivots(30, 2, 8, 5).unwrap();
        assert!(m.pivot_indices.iter().all(|&p| p < 30));
        assert_eq!(m.source, PivotSource::Random);
        assert!(random_pivots(3, 4, 8, 1).is_err());
    }

    proptest! {
        #[test]
        fn window_is_union_of_clipped_intervals(
            len in 1usize..200,
            w in 1usize..12,
            raw in proptest::collection::vec(0usize..220, 0..10),
        ) {
            let m = PivotMask::from_pivots(raw.clone(), len, w, PivotSource::Markers);
            for t in 0..len {
                let near = m.pivot_indices.iter().any(|&i| t.abs_diff(i) <= w);
                prop_assert_eq!(m.window.binary_search(&t).is_ok(), near);
            }
            prop_assert!(m.window.iter().all(|&t| t < len));
        }
    }
}
