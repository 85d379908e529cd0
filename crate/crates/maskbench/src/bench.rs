//! Experiment orchestration (filled in below).
