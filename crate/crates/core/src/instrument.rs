//! Per-thread evaluation counters.
//!
//! The trainer's mode reductions promise that some sub-networks are never
//! touched (no clustering network in `cgan`, no label embedding in `ugan`).
//! The forward passes bump these counters so tests can check that directly.

use std::cell::Cell;

thread_local! {
    static CLUSTERING_FORWARDS: Cell<u64> = const { Cell::new(0) };
    static LABEL_EMBEDDINGS: Cell<u64> = const { Cell::new(0) };
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Counts {
    pub clustering_forwards: u64,
    pub label_embeddings: u64,
}

pub fn reset() {
    CLUSTERING_FORWARDS.with(|c| c.set(0));
    LABEL_EMBEDDINGS.with(|c| c.set(0));
}

pub fn counts() -> Counts {
    Counts {
        clustering_forwards: CLUSTERING_FORWARDS.with(Cell::get),
        label_embeddings: LABEL_EMBEDDINGS.with(Cell::get),
    }
}

pub(crate) fn clustering_forward() {
    CLUSTERING_FORWARDS.with(|c| c.set(c.get() + 1));
}

pub(crate) fn label_embedding() {
    LABEL_EMBEDDINGS.with(|c| c.set(c.get() + 1));
}
