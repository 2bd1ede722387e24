//! Fixtures shared by the benchmarks.

use sercap::harness::{ExperimentConfig, Prepared};
use sercap::metrics::EvalItem;

/// The desk preset with its full default corpus.
pub fn desk() -> (ExperimentConfig, Prepared) {
    let cfg = ExperimentConfig::desk();
    let prep = Prepared::new(&cfg).expect("desk corpus");
    (cfg, prep)
}

/// Test-split items scored against their own first reference, as a decoded
/// system would be.
pub fn cider_items(prep: &Prepared) -> Vec<EvalItem> {
    prep.corpus
        .test
        .iter()
        .map(|c| EvalItem::new(&c.captions[0], &c.captions[1..]).expect("references"))
        .collect()
}
