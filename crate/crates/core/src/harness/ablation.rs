//! The fixed ablation matrix: tokenizer × SER weight × weight decay, each
//! cell trained over several seeds and scored on the test split.

use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;

use super::config::ExperimentConfig;
use super::run::{train_to_dir, RunSummary};
use crate::error::Result;
use crate::metrics::CorpusScores;
use crate::text::VocabKind;

pub const LAMBDAS: [f64; 2] = [0.0, 100.0];
pub const WEIGHT_DECAYS: [f64; 2] = [1e-6, 2.0];
pub const TOKENIZERS: [VocabKind; 2] = [VocabKind::Word, VocabKind::Subword];

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SeedResult {
    pub seed: u64,
    pub scores: CorpusScores,
    pub final_param_norm: f64,
    pub best_epoch: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationCell {
    pub name: String,
    pub tokenizer: VocabKind,
    pub lambda: f64,
    pub weight_decay: f64,
    pub runs: Vec<SeedResult>,
    /// Seed means; absent when any seed failed.
    pub mean: Option<CorpusScores>,
    pub mean_param_norm: Option<f64>,
    /// First failure, if any. Failed cells stay in the table.
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationReport {
    pub n_seeds: usize,
    pub cells: Vec<AblationCell>,
}

/// Row label in the style of the published table.
pub fn cell_label(tokenizer: VocabKind, lambda: f64) -> &'static str {
    match (tokenizer, lambda > 0.0) {
        (VocabKind::Word, false) => "baseline",
        (VocabKind::Word, true) => "baseline +SER loss",
        (VocabKind::Subword, false) => "+SBERT tokens",
        (VocabKind::Subword, true) => "+SBERT tokens +SER loss",
    }
}

pub fn cell_name(tokenizer: VocabKind, lambda: f64, wd: f64) -> String {
    format!("{tokenizer}_lambda{lambda}_wd{wd}")
}

/// The eight cell configurations derived from `base`, in table order.
pub fn matrix(base: &ExperimentConfig) -> Vec<(String, ExperimentConfig)> {
    let mut out = Vec::new();
    for wd in WEIGHT_DECAYS {
        for tok in TOKENIZERS {
            for lambda in LAMBDAS {
                let mut c = base.clone();
                c.tokenizer = tok;
                c.loss.lambda = lambda;
                c.optim.weight_decay = wd;
                out.push((cell_name(tok, lambda, wd), c));
            }
        }
    }
    out
}

/// Trains every cell for `base.n_seeds` seeds (`base.seed`, `base.seed + 1`, …)
/// with outputs under `out_dir/<cell>/seed<k>`.
pub fn run_ablation(base: &ExperimentConfig, out_dir: &Path) -> Result<AblationReport> {
    run_cells(base, out_dir, |cfg, dir| train_to_dir(cfg, dir, None))
}

/// [`run_ablation`] with the per-run trainer injected.
pub fn run_cells<F>(base: &ExperimentConfig, out_dir: &Path, mut train: F) -> Result<AblationReport>
where
    F: FnMut(&ExperimentConfig, &Path) -> Result<RunSummary>,
{
    base.validate()?;
    let mut cells = Vec::new();
    for (name, cfg) in matrix(base) {
        let mut runs = Vec::new();
        let mut error = None;
        for k in 0..base.n_seeds as u64 {
            let mut c = cfg.clone();
            c.seed = base.seed + k;
            let dir = out_dir.join(&name).join(format!("seed{}", c.seed));
            log::info!("ablation cell {name} seed {}", c.seed);
            match train(&c, &dir) {
                Ok(s) => runs.push(SeedResult {
                    seed: c.seed,
                    scores: s.test.corpus,
                    final_param_norm: s.final_param_norm,
                    best_epoch: s.best_epoch,
                }),
                Err(e) => {
                    log::error!("ablation cell {name} seed {} failed: {e}", c.seed);
                    error.get_or_insert_with(|| format!("seed {}: {e}", c.seed));
                }
            }
        }
        let complete = error.is_none() && !runs.is_empty();
        let mean = if complete {
            Some(CorpusScores::mean_of(&runs.iter().map(|r| r.scores.clone()).collect::<Vec<_>>())?)
        } else {
            None
        };
        let mean_param_norm =
            complete.then(|| runs.iter().map(|r| r.final_param_norm).sum::<f64>() / runs.len() as f64);
        cells.push(AblationCell {
            name,
            tokenizer: cfg.tokenizer,
            lambda: cfg.loss.lambda,
            weight_decay: cfg.optim.weight_decay,
            runs,
            mean,
            mean_param_norm,
            error,
        });
    }
    Ok(AblationReport {
        n_seeds: base.n_seeds,
        cells,
    })
}

fn cell(x: Option<f64>) -> String {
    x.map_or_else(|| "-".to_string(), |v| format!("{v:.3}"))
}

impl AblationReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn failed(&self) -> bool {
        self.cells.iter().any(|c| c.error.is_some())
    }

    /// Markdown table with the published column order.
    pub fn to_markdown(&self) -> String {
        let mut s = format!("Test-split means over {} seed(s).\n\n", self.n_seeds);
        s.push_str("| system | wd | SPIDEr | CIDEr-D | SPICE | FENSE | SBERT | FluErr | #words | ‖θ‖ | status |\n");
        s.push_str("|---|---|---|---|---|---|---|---|---|---|---|\n");
        for c in &self.cells {
            let m = c.mean.as_ref();
            let _ = writeln!(
                s,
                "| {} | {} | {} | {} | {} | {} | {} | {} | {} | {} | {} |",
                cell_label(c.tokenizer, c.lambda),
                c.weight_decay,
                cell(m.and_then(|m| m.spider)),
                cell(m.map(|m| m.cider_d)),
                cell(m.and_then(|m| m.spice)),
                cell(m.map(|m| m.fense)),
                cell(m.map(|m| m.sbert)),
                cell(m.map(|m| m.flu_err)),
                m.map_or_else(|| "-".to_string(), |m| format!("{:.1}", m.n_words)),
                cell(c.mean_param_norm),
                c.error.as_deref().map_or("ok".to_string(), |e| format!("FAILED ({e})")),
            );
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use crate::harness::train::tests::tiny_cfg;
    use crate::metrics::{MetricReport, SbertAggregation};

    fn constant_summary(dir: &Path, norm: f64) -> RunSummary {
        RunSummary {
            dir: dir.to_path_buf(),
            best_epoch: Some(0),
            best_val_fense: Some(0.5),
            final_param_norm: norm,
            curve: Vec::new(),
            test: MetricReport {
                n_items: 1,
                sbert_aggregation: SbertAggregation::Mean,
                corpus: CorpusScores {
                    cider_d: 0.25,
                    spice: None,
                    spider: None,
                    sbert: 0.5,
                    flu_err: 0.125,
                    fense: 0.375,
                    n_words: 7.0,
                },
                items: Vec::new(),
            },
        }
    }

    #[test]
    fn eight_cells_and_constant_metrics_average_to_themselves() {
        let mut base = tiny_cfg();
        base.n_seeds = 3;
        let dir = tempfile::tempdir().unwrap();
        let r = run_cells(&base, dir.path(), |_, d| Ok(constant_summary(d, 2.0))).unwrap();
        assert_eq!(r.cells.len(), 8);
        let names: std::collections::BTreeSet<_> = r.cells.iter().map(|c| c.name.clone()).collect();
        assert_eq!(names.len(), 8);
        for c in &r.cells {
            assert_eq!(c.runs.len(), 3);
            let m = c.mean.as_ref().unwrap();
            assert_eq!(m.cider_d, 0.25);
            assert_eq!(m.fense, 0.375);
            assert_eq!(m.n_words, 7.0);
            assert_eq!(c.mean_param_norm, Some(2.0));
        }
        let md = r.to_markdown();
        assert_eq!(md.lines().filter(|l| l.starts_with("| ") && !l.starts_with("| system")).count(), 8);
        assert!(!r.failed());
    }

    #[test]
    fn failed_cell_is_marked_not_dropped() {
        let mut base = tiny_cfg();
        base.n_seeds = 2;
        let dir = tempfile::tempdir().unwrap();
        let r = run_cells(&base, dir.path(), |c, d| {
            if c.optim.weight_decay == 2.0 && c.loss.lambda == 0.0 && c.seed == base.seed + 1 {
                Err(Error::NonFinite("loss nan".into()))
            } else {
                Ok(constant_summary(d, 1.0))
            }
        })
        .unwrap();
        assert_eq!(r.cells.len(), 8);
        assert!(r.failed());
        let bad: Vec<_> = r.cells.iter().filter(|c| c.error.is_some()).collect();
        assert_eq!(bad.len(), 2);
        assert!(bad.iter().all(|c| c.mean.is_none() && c.runs.len() == 1));
        assert!(r.to_markdown().contains("FAILED"));
        assert!(r.to_json().unwrap().contains("loss nan"));
    }

    #[test]
    fn real_cells_order_param_norms_by_decay() {
        let mut base = tiny_cfg();
        base.n_seeds = 1;
        base.optim.epochs = 2;
        base.optim.lr0 = 5e-2;
        let dir = tempfile::tempdir().unwrap();
        let r = run_ablation(&base, dir.path()).unwrap();
        assert!(!r.failed());
        for small in r.cells.iter().filter(|c| c.weight_decay < 1.0) {
            let big = r
                .cells
                .iter()
                .find(|c| c.weight_decay == 2.0 && c.tokenizer == small.tokenizer && c.lambda == small.lambda)
                .unwrap();
            assert!(big.mean_param_norm.unwrap() < small.mean_param_norm.unwrap(), "{}", small.name);
        }
    }
}
