use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use sercap::decoding::beam_search;
use sercap::harness::ablation::run_ablation;
use sercap::harness::gradsuite::{run_suite, DEFAULT_RTOL, DEFAULT_SEEDS};
use sercap::harness::plot::{combined_csv, curves_svg, read_curve, CurveSeries};
use sercap::harness::{train_to_dir, Checkpoint, ExperimentConfig, Prepared};
use sercap::metrics::{read_spice_scores, EvalItem, Evaluator};
use sercap::model::{AudioFeatures, SentenceEncoder};
use sercap::synth::{
    dataset_stats, read_captions, read_features, write_corpus, Corpus, EventGrammar, GRAMMAR_SEED,
};

#[derive(Parser)]
#[command(name = "sercap", version, about = "Audio captioning with sentence-embedding regression on synthetic data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    /// Small model that trains in minutes on one core.
    Desk,
    /// Wider decoder without dropout, for the overfitting study.
    OverfitStudy,
    /// The published model size.
    Paper,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// Config file of `key = value` lines, applied on top of the preset.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "desk")]
    preset: Preset,
    /// Extra `key=value` overrides, applied last.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = match self.preset {
            Preset::Desk => ExperimentConfig::desk(),
            Preset::OverfitStudy => ExperimentConfig::overfit_study(),
            Preset::Paper => ExperimentConfig::default(),
        };
        if let Some(p) = &self.config {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            cfg.apply_text(&text).with_context(|| format!("in {}", p.display()))?;
        }
        for o in &self.overrides {
            let (k, v) = o.split_once('=').with_context(|| format!("--set {o}: expected KEY=VALUE"))?;
            cfg.set(k.trim(), v.trim()).with_context(|| format!("--set {o}"))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus and write it to disk.
    SynthData {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one model; writes manifest, curve, checkpoint and test metrics.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        /// Continue from a checkpoint written by an earlier run of the same config.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Beam-decode clips with the best model of a checkpoint.
    Decode {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Feature file to decode; defaults to the checkpoint corpus test split.
        #[arg(long)]
        features: Option<PathBuf>,
        /// Captions file whose ids name the clips in `--features`.
        #[arg(long)]
        ids: Option<PathBuf>,
        /// Output captions (`id<TAB>caption`); a `.json` sidecar is written next to it.
        #[arg(long)]
        out: PathBuf,
    },
    /// Score candidate captions against references.
    Evaluate {
        /// `id<TAB>caption` lines.
        #[arg(long, required_unless_present = "cross_reference")]
        candidates: Option<PathBuf>,
        /// Captions JSON-lines file with the references.
        #[arg(long)]
        references: PathBuf,
        /// One external SPICE score per candidate, in candidate order.
        #[arg(long)]
        spice_scores: Option<PathBuf>,
        /// Score each reference against the others instead of candidates.
        #[arg(long)]
        cross_reference: bool,
        /// Take the sentence encoder from this checkpoint instead of the config.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Report path; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the tokenizer × λ × weight-decay matrix over several seeds.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        /// Seeds per cell; defaults to `n_seeds` from the config.
        #[arg(long)]
        seeds: Option<usize>,
    },
    /// Finite-difference check of every primitive and of the full loss.
    Gradcheck {
        #[arg(long, default_value_t = DEFAULT_SEEDS)]
        seeds: usize,
        #[arg(long, default_value_t = DEFAULT_RTOL)]
        rtol: f64,
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Combine learning curves into one CSV and an SVG chart.
    Plot {
        /// Curve files as `[GROUP:]LABEL=PATH` or a bare path.
        #[arg(required = true)]
        curves: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn synth_data(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let corpus = Corpus::generate(&cfg.corpus)?;
    let grammar = EventGrammar::new(cfg.corpus.frames, cfg.corpus.d_enc, GRAMMAR_SEED)?;
    write_corpus(out, &grammar, &corpus)?;
    let prep = Prepared::from_corpus(cfg, corpus)?;
    prep.vocab.save(out.join("vocab.txt"))?;
    prep.sentence.vocab().save(out.join("sentence_vocab.txt"))?;
    let stats: BTreeMap<&str, _> = [
        ("train", dataset_stats(&grammar, &prep.corpus.train)?),
        ("val", dataset_stats(&grammar, &prep.corpus.val)?),
        ("test", dataset_stats(&grammar, &prep.corpus.test)?),
    ]
    .into_iter()
    .collect();
    write(&out.join("stats.json"), &(serde_json::to_string_pretty(&stats)? + "\n"))?;
    write(&out.join("config.txt"), &cfg.to_text())?;
    println!(
        "wrote {} / {} / {} clips to {}",
        prep.corpus.train.len(),
        prep.corpus.val.len(),
        prep.corpus.test.len(),
        out.display()
    );
    Ok(())
}

/// `cfg` is `None` when no config was given, in which case a resumed run
/// follows the checkpoint's own snapshot.
fn train(cfg: Option<ExperimentConfig>, out: &Path, resume: Option<&Path>) -> Result<()> {
    let ck = resume
        .map(|p| Checkpoint::load(p).with_context(|| format!("loading {}", p.display())))
        .transpose()?;
    let cfg = match (cfg, &ck) {
        (Some(c), _) => c,
        (None, Some(ck)) => ck.config.clone(),
        (None, None) => ExperimentConfig::desk(),
    };
    let s = train_to_dir(&cfg, out, ck)?;
    println!(
        "best epoch {:?} (val FENSE {:.4}); test FENSE {:.4}, CIDEr-D {:.4}, SBERT {:.4}",
        s.best_epoch,
        s.best_val_fense.unwrap_or(f64::NAN),
        s.test.corpus.fense,
        s.test.corpus.cider_d,
        s.test.corpus.sbert
    );
    Ok(())
}

#[derive(Serialize)]
struct DecodedCaption {
    id: String,
    caption: String,
    tokens: Vec<usize>,
    log_prob: f64,
}

fn decode(checkpoint: &Path, features: Option<&Path>, ids: Option<&Path>, out: &Path) -> Result<()> {
    let ck = Checkpoint::load(checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
    let model = ck.best_model()?;
    let (ids, feats): (Vec<String>, Vec<AudioFeatures>) = match features {
        Some(path) => {
            let feats = read_features(path).with_context(|| format!("reading {}", path.display()))?;
            let ids: Vec<String> = match ids {
                Some(p) => read_captions(p)?.into_iter().map(|(id, _)| id).collect(),
                None => (0..feats.len()).map(|i| format!("clip_{i}")).collect(),
            };
            if ids.len() != feats.len() {
                bail!("{} ids for {} feature clips", ids.len(), feats.len());
            }
            (ids, feats)
        }
        None => Corpus::generate(&ck.config.corpus)?
            .test
            .into_iter()
            .map(|c| (c.id, c.features))
            .unzip(),
    };
    let dcfg = ck
        .config
        .decode_config()
        .with_stopwords(&ck.config.stopword_set()?, &ck.vocab);
    let mut session = model.session();
    let mut decoded = Vec::with_capacity(feats.len());
    for (id, f) in ids.into_iter().zip(&feats) {
        session.set_features(f)?;
        let d = beam_search(&mut session, &dcfg)?;
        decoded.push(DecodedCaption {
            id,
            caption: ck.vocab.decode(&d.tokens),
            tokens: d.tokens.ids().to_vec(),
            log_prob: d.log_prob,
        });
    }
    let text: String = decoded.iter().map(|d| format!("{}\t{}\n", d.id, d.caption)).collect();
    write(out, &text)?;
    write(&out.with_extension("json"), &(serde_json::to_string_pretty(&decoded)? + "\n"))?;
    println!("decoded {} clips to {}", decoded.len(), out.display());
    Ok(())
}

fn read_candidates(path: &Path) -> Result<Vec<(String, String)>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| {
            let (id, cap) = l
                .split_once('\t')
                .with_context(|| format!("{}:{}: expected id<TAB>caption", path.display(), n + 1))?;
            Ok((id.to_string(), cap.to_string()))
        })
        .collect()
}

struct EvaluateArgs<'a> {
    candidates: Option<&'a Path>,
    references: &'a Path,
    spice: Option<&'a Path>,
    cross_reference: bool,
    checkpoint: Option<&'a Path>,
    out: Option<&'a Path>,
}

fn evaluate(a: EvaluateArgs, cfg: &ExperimentConfig) -> Result<()> {
    let encoder = match a.checkpoint {
        Some(p) => {
            let ck = Checkpoint::load(p)?;
            let m = &ck.config.model;
            SentenceEncoder::new(ck.sentence_vocab, m.d_sent, m.sent_layers, m.sent_heads, m.sent_ffn_dim)?
        }
        None => Prepared::new(cfg)?.sentence,
    };
    let mut ev = Evaluator::new(&encoder);
    ev.aggregation = cfg.sbert_aggregation;
    let refs = read_captions(a.references).with_context(|| format!("reading {}", a.references.display()))?;
    let json = if a.cross_reference {
        let groups: Vec<Vec<String>> = refs.into_iter().map(|(_, c)| c).collect();
        let x = ev.cross_reference(&groups)?;
        eprintln!("cross-reference FENSE {:.4} over {} folds", x.mean.fense, x.folds.len());
        serde_json::to_string_pretty(&x.mean)?
    } else {
        let Some(cpath) = a.candidates else { bail!("--candidates is required") };
        let by_id: BTreeMap<String, Vec<String>> = refs.into_iter().collect();
        let cands = read_candidates(cpath)?;
        let items = cands
            .iter()
            .map(|(id, cap)| {
                let r = by_id.get(id).with_context(|| format!("no references for clip {id}"))?;
                Ok(EvalItem::new(cap, r)?)
            })
            .collect::<Result<Vec<_>>>()?;
        let spice = a.spice.map(read_spice_scores).transpose()?;
        let report = ev.evaluate(&items, spice.as_deref())?;
        eprintln!(
            "FENSE {:.4}  SBERT {:.4}  CIDEr-D {:.4}  FluErr {:.4}{}",
            report.corpus.fense,
            report.corpus.sbert,
            report.corpus.cider_d,
            report.corpus.flu_err,
            report.corpus.spider.map(|s| format!("  SPIDEr {s:.4}")).unwrap_or_default()
        );
        report.to_json()?
    };
    match a.out {
        Some(p) => write(p, &(json + "\n")),
        None => {
            println!("{json}");
            Ok(())
        }
    }
}

fn ablate(cfg: &ExperimentConfig, out: &Path, seeds: Option<usize>) -> Result<bool> {
    let mut cfg = cfg.clone();
    if let Some(s) = seeds {
        cfg.n_seeds = s;
    }
    let report = run_ablation(&cfg, out)?;
    write(&out.join("ablation.json"), &report.to_json()?)?;
    let md = report.to_markdown();
    write(&out.join("ablation.md"), &md)?;
    print!("{md}");
    Ok(!report.failed())
}

fn gradcheck(seeds: usize, rtol: f64, json: Option<&Path>) -> Result<bool> {
    let start = std::time::Instant::now();
    let report = run_suite(seeds, rtol)?;
    for e in &report.entries {
        println!(
            "{:<4} {:<48} max rel err {:.3e} over {} coords",
            if e.passed { "ok" } else { "FAIL" },
            e.name,
            e.max_rel_error,
            e.coordinates
        );
    }
    println!(
        "{} checks, {} seeds, worst {:.3e} (tolerance {rtol:e}), {:.1}s",
        report.entries.len(),
        seeds,
        report.max_rel_error(),
        start.elapsed().as_secs_f64()
    );
    if let Some(p) = json {
        write(p, &(serde_json::to_string_pretty(&report)? + "\n"))?;
    }
    Ok(report.passed())
}

fn parse_curve_arg(arg: &str) -> (String, String, PathBuf) {
    // labels such as `lambda=100` contain '=', paths practically never do
    match arg.rsplit_once('=') {
        Some((name, path)) => match name.split_once(':') {
            Some((g, l)) => (g.to_string(), l.to_string(), PathBuf::from(path)),
            None => (String::new(), name.to_string(), PathBuf::from(path)),
        },
        None => {
            let p = PathBuf::from(arg);
            let label = p
                .parent()
                .and_then(|d| d.file_name())
                .map_or_else(|| arg.to_string(), |n| n.to_string_lossy().into_owned());
            (String::new(), label, p)
        }
    }
}

fn plot(curves: &[String], out: &Path) -> Result<()> {
    let series = curves
        .iter()
        .map(|c| {
            let (group, label, path) = parse_curve_arg(c);
            let rows = read_curve(&path).with_context(|| format!("reading {}", path.display()))?;
            Ok(CurveSeries { label, group, rows })
        })
        .collect::<Result<Vec<_>>>()?;
    std::fs::create_dir_all(out)?;
    write(&out.join("curves.csv"), &combined_csv(&series))?;
    write(&out.join("curves.svg"), &curves_svg(&series)?)?;
    println!("wrote {} and {}", out.join("curves.csv").display(), out.join("curves.svg").display());
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::SynthData { cfg, out } => synth_data(&cfg.load()?, &out).map(|_| true),
        Command::Train { cfg, out, resume } => {
            let explicit = cfg.config.is_some() || !cfg.overrides.is_empty() || resume.is_none();
            let cfg = if explicit { Some(cfg.load()?) } else { None };
            train(cfg, &out, resume.as_deref()).map(|_| true)
        }
        Command::Decode {
            checkpoint,
            features,
            ids,
            out,
        } => decode(&checkpoint, features.as_deref(), ids.as_deref(), &out).map(|_| true),
        Command::Evaluate {
            candidates,
            references,
            spice_scores,
            cross_reference,
            checkpoint,
            cfg,
            out,
        } => {
            let a = EvaluateArgs {
                candidates: candidates.as_deref(),
                references: &references,
                spice: spice_scores.as_deref(),
                cross_reference,
                checkpoint: checkpoint.as_deref(),
                out: out.as_deref(),
            };
            evaluate(a, &cfg.load()?).map(|_| true)
        }
        Command::Ablate { cfg, out, seeds } => ablate(&cfg.load()?, &out, seeds),
        Command::Gradcheck { seeds, rtol, json } => gradcheck(seeds, rtol, json.as_deref()),
        Command::Plot { curves, out } => plot(&curves, &out).map(|_| true),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("error: one or more checks failed");
            ExitCode::FAILURE
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
