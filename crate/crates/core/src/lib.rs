//! Detection, localization and correction of errors in sentence-numbered
//! clinical notes using prompted LLMs, self-consistency voting and two-model
//! ensembling, with the matching three-part scoring.

pub mod cli;
pub mod consensus;
pub mod corpus;
pub mod ledger;
pub mod outparse;
pub mod par;
pub mod prompting;
pub mod providers;
pub mod scoring;
