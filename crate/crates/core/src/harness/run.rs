//! One training run on disk: manifest, learning curve, checkpoint and test report.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::checkpoint::Checkpoint;
use super::config::ExperimentConfig;
use super::plot::curve_csv;
use super::train::{decayed_param_norm, evaluate_clips, CurveRow, Prepared, Trainer};
use crate::error::{Error, Result};
use crate::metrics::MetricReport;
use crate::model::ParamStore;
use crate::util::Fnv1a;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const CURVE_FILE: &str = "curve.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const DIAGNOSTIC_FILE: &str = "diagnostic.bin";
pub const TEST_REPORT_FILE: &str = "test_metrics.json";
pub const TEST_CAPTIONS_FILE: &str = "test_captions.txt";

/// Everything that determines a run, with no host or time information.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Manifest {
    pub format: &'static str,
    pub version: &'static str,
    pub config: BTreeMap<&'static str, String>,
    pub vocab_size: usize,
    pub sentence_vocab_size: usize,
    pub trainable_parameters: usize,
    pub initial_parameters: String,
    pub sentence_encoder: String,
    pub corpus: String,
    pub clips: [usize; 3],
}

fn hex(x: u64) -> String {
    format!("{x:016x}")
}

/// Hash over every clip id, feature bit and caption.
pub fn corpus_fingerprint(prep: &Prepared) -> u64 {
    let mut h = Fnv1a::new();
    let c = &prep.corpus;
    for clip in c.train.iter().chain(&c.val).chain(&c.test) {
        h.write(clip.id.as_bytes());
        for x in clip.features.tensor().data() {
            h.write(&x.to_bits().to_le_bytes());
        }
        for cap in &clip.captions {
            h.write(cap.as_bytes());
            h.write(&[0]);
        }
    }
    h.finish()
}

fn trainable(p: &ParamStore) -> usize {
    p.iter()
        .filter(|p| p.tensor.requires_grad())
        .map(|p| p.tensor.numel())
        .sum()
}

impl Manifest {
    pub fn new(cfg: &ExperimentConfig, prep: &Prepared, initial: &ParamStore) -> Self {
        Self {
            format: "sercap-run",
            version: env!("CARGO_PKG_VERSION"),
            config: cfg.entries().into_iter().collect(),
            vocab_size: prep.vocab.len(),
            sentence_vocab_size: prep.sentence.vocab().len(),
            trainable_parameters: trainable(initial),
            initial_parameters: hex(initial.fingerprint()),
            sentence_encoder: hex(prep.sentence.fingerprint()),
            corpus: hex(corpus_fingerprint(prep)),
            clips: [prep.corpus.train.len(), prep.corpus.val.len(), prep.corpus.test.len()],
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }
}

#[derive(Clone, Debug)]
pub struct RunSummary {
    pub dir: PathBuf,
    pub best_epoch: Option<usize>,
    pub best_val_fense: Option<f64>,
    /// L2 norm of the weight-decayed parameters of the final model.
    pub final_param_norm: f64,
    pub curve: Vec<CurveRow>,
    pub test: MetricReport,
}

/// Trains `cfg` (or continues `resume`) writing everything under `dir`.
/// A non-finite loss leaves a diagnostic checkpoint and returns the error.
pub fn train_to_dir(cfg: &ExperimentConfig, dir: &Path, resume: Option<Checkpoint>) -> Result<RunSummary> {
    std::fs::create_dir_all(dir)?;
    let cfg = match &resume {
        Some(ck) if &ck.config != cfg => {
            return Err(Error::Contract("checkpoint was produced by a different config".into()))
        }
        _ => cfg.clone(),
    };
    let prep = Prepared::new(&cfg)?;
    let mut trainer = match resume {
        Some(ck) => Trainer::resume(ck, &prep)?,
        None => Trainer::new(cfg.clone(), &prep)?,
    };
    let initial = crate::model::Captioner::new(prep.model_config(&cfg), cfg.seed)?;
    std::fs::write(dir.join(MANIFEST_FILE), Manifest::new(&cfg, &prep, initial.params()).to_json()?)?;

    while trainer.state.epoch < cfg.optim.epochs {
        let before = trainer.checkpoint();
        match trainer.run_epoch() {
            Ok(_) => {}
            Err(e @ Error::NonFinite(_)) => {
                before.save(dir.join(DIAGNOSTIC_FILE))?;
                log::error!("{e}; diagnostic checkpoint in {}", dir.join(DIAGNOSTIC_FILE).display());
                return Err(e);
            }
            Err(e) => return Err(e),
        }
        std::fs::write(dir.join(CURVE_FILE), curve_csv(&trainer.state.curve))?;
        trainer.checkpoint().save(dir.join(CHECKPOINT_FILE))?;
    }
    // also covers zero epochs and resuming a finished run into a new directory
    std::fs::write(dir.join(CURVE_FILE), curve_csv(&trainer.state.curve))?;
    trainer.checkpoint().save(dir.join(CHECKPOINT_FILE))?;

    let best = trainer.best_model()?;
    let dcfg = trainer.decode_config().clone();
    let (test, captions) = evaluate_clips(&best, &prep.vocab, &prep.corpus.test, &dcfg, trainer.evaluator())?;
    std::fs::write(dir.join(TEST_REPORT_FILE), test.to_json()? + "\n")?;
    let lines: String = prep
        .corpus
        .test
        .iter()
        .zip(&captions)
        .map(|(c, t)| format!("{}\t{t}\n", c.id))
        .collect();
    std::fs::write(dir.join(TEST_CAPTIONS_FILE), lines)?;
    Ok(RunSummary {
        dir: dir.to_path_buf(),
        best_epoch: trainer.state.best.as_ref().map(|b| b.epoch),
        best_val_fense: trainer.state.best.as_ref().map(|b| b.fense),
        final_param_norm: decayed_param_norm(trainer.state.model.params()),
        curve: trainer.state.curve.clone(),
        test,
    })
}
