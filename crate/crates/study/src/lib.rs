//! A small HTTP+JSON service that runs 2AFC quality studies: observers get a
//! seeded, side-balanced schedule (practice trials first), every answer is
//! appended to the same CSV choice log the comparison harness reads, and a
//! study exports its pairwise win counts for Thurstone scaling.
//!
//! [`StudyService`] holds all state and is usable without HTTP; [`router`]
//! exposes it over axum.

mod api;
mod error;
mod schedule;
mod service;

pub use api::{router, serve};
pub use error::{ServiceError, ServiceResult};
pub use schedule::{build_pairs, observer_seed, schedule, Assignment, DisplayMetadata, Pair, StudySpec, Stimulus, Trial};
pub use service::{
    Acknowledgment, ChoiceRequest, ExportedMatrix, NewSession, NextPair, SessionStatus, SessionView, StudyInfo,
    StudyService, TrialView,
};
