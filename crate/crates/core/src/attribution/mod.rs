//! Pivot detection over chain-of-thought text and per-unit Taylor
//! importance, globally and restricted to transition windows.

pub mod pivots;
mod table;
mod taylor;

pub use pivots::{
    corpus_pivot_masks, detect_pivots, find_markers, random_pivots, MarkerClass, MarkerMatch,
    PivotMask, PivotMode, PivotSource, PivotSummary,
    DEFAULT_HALF_WIDTH, DEFAULT_MIN_MARKERS,
};
pub use table::{normalize_importance, ImportanceTable, TableKind};
pub use taylor::{global_attribution, magnitude_scores, pivot_attribution, AttnSlices};
