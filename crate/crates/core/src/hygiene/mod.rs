//! Benchmark hygiene: pretraining/test overlap audits and harder-setting splits.

pub mod harder;
pub mod leakage;

pub use harder::{generate_harder_split, HarderSplit};
pub use leakage::{audit_leakage, canonical_relation, Corpus, CorpusScope, DatasetLeak, LeakageReport};
