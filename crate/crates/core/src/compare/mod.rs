//! Discriminative pair selection, 2AFC accounting, Thurstone Case V scaling
//! and significance grouping.

mod choices;
mod distance;
mod observer;
mod select;
mod thurstone;

pub use choices::{append_choices, read_choices, read_choices_from, write_choices, ChoiceMatrix, ChoiceRecord, Side};
pub use distance::{cosine_distance, perceptual_distance_d1, semantic_set_distance_d2, Embedder, D1_LEVELS};
pub use observer::{simulate_2afc, simulate_choice, simulate_study, SimPair};
pub use select::{select_discriminative_subset, select_for_pair, Candidate, EnhancerRecord, Selected, DEFAULT_GAMMA};
pub use thurstone::{
    aggregate_thurstone, aggregate_with_bootstrap, jod_anchor, ranking_report, significance_groups,
    RankingResult, DEFAULT_BOOTSTRAP, JOD_SIGMA, MIN_BOOTSTRAP,
};
