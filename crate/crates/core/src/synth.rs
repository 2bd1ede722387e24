//! Procedural (features, captions) corpus. Each clip mixes one to three sound
//! events; features are the sum of the active events' signature vectors over
//! their frame spans plus Gaussian noise, and captions name exactly those
//! events in onset order.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::AudioFeatures;
use crate::tensor::Tensor;
use crate::text::{Vocabulary, VocabKind, build_vocab};

pub const DEFAULT_FRAMES: usize = 31;
pub const DEFAULT_D_ENC: usize = 64;
pub const GRAMMAR_SEED: u64 = 0xa0d1_0ca9;
pub const MIN_SPAN: usize = 6;

pub const FEATURE_MAGIC: &[u8; 8] = b"SCAPFEAT";
pub const FEATURE_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Event {
    pub key: &'static str,
    pub subjects: &'static [&'static str],
    pub verbs: &'static [&'static str],
}

const EVENTS: [Event; 12] = [
    Event { key: "dog_bark", subjects: &["a dog", "a puppy"], verbs: &["barks", "yaps", "growls"] },
    Event { key: "man_speak", subjects: &["a man", "a male voice"], verbs: &["speaks", "talks", "chats"] },
    Event { key: "door_squeak", subjects: &["a door", "a hinge"], verbs: &["squeaks", "creaks", "rattles"] },
    Event { key: "woman_laugh", subjects: &["a woman", "a girl"], verbs: &["laughs", "giggles", "chuckles"] },
    Event { key: "car_pass", subjects: &["a car", "a vehicle"], verbs: &["passes", "zooms", "drives"] },
    Event { key: "bell_ring", subjects: &["a bell", "a church bell"], verbs: &["rings", "chimes", "clangs"] },
    Event { key: "water_flow", subjects: &["running water", "a stream"], verbs: &["flows", "trickles", "gurgles"] },
    Event { key: "bird_chirp", subjects: &["a bird", "a small bird"], verbs: &["chirps", "tweets", "sings"] },
    Event { key: "engine_idle", subjects: &["an engine", "a motor"], verbs: &["idles", "hums", "rumbles"] },
    Event { key: "baby_cry", subjects: &["a baby", "an infant"], verbs: &["cries", "wails", "whimpers"] },
    Event { key: "clock_tick", subjects: &["a clock", "a timer"], verbs: &["ticks", "clicks", "tocks"] },
    Event { key: "wind_blow", subjects: &["strong wind", "the wind"], verbs: &["blows", "howls", "whistles"] },
];

pub const CONNECTIVES: [&str; 3] = ["and", "while", "as"];

/// Event inventory plus one fixed signature vector per event.
#[derive(Clone, Debug, PartialEq)]
pub struct EventGrammar {
    pub events: Vec<Event>,
    pub frames: usize,
    pub d_enc: usize,
    signatures: Vec<Vec<f64>>,
}

impl EventGrammar {
    pub fn new(frames: usize, d_enc: usize, seed: u64) -> Result<Self> {
        if frames < MIN_SPAN || d_enc == 0 {
            return Err(Error::config(format!(
                "synthetic grammar needs frames >= {MIN_SPAN} and d_enc >= 1"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let signatures = EVENTS
            .iter()
            .map(|_| {
                (0..d_enc)
                    .map(|_| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        z
                    })
                    .collect()
            })
            .collect();
        Ok(Self {
            events: EVENTS.to_vec(),
            frames,
            d_enc,
            signatures,
        })
    }

    pub fn desk() -> Self {
        Self::new(DEFAULT_FRAMES, DEFAULT_D_ENC, GRAMMAR_SEED).expect("default grammar")
    }

    pub fn signature(&self, event: usize) -> &[f64] {
        &self.signatures[event]
    }

    fn clause<R: Rng + ?Sized>(&self, event: usize, rng: &mut R) -> String {
        let e = &self.events[event];
        let s = e.subjects.choose(rng).expect("subjects");
        let v = e.verbs.choose(rng).expect("verbs");
        format!("{s} {v}")
    }

    /// One surface realisation for events listed in onset order.
    pub fn realize<R: Rng + ?Sized>(&self, ordered_events: &[usize], rng: &mut R) -> String {
        let mut out = String::new();
        for (i, &e) in ordered_events.iter().enumerate() {
            if i > 0 {
                out.push(' ');
                out.push_str(CONNECTIVES.choose(rng).expect("connectives"));
                out.push(' ');
            }
            out.push_str(&self.clause(e, rng));
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventSpan {
    pub event: usize,
    pub start: usize,
    pub end: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CaptionedClip {
    pub id: String,
    pub features: AudioFeatures,
    pub captions: Vec<String>,
    pub events: Vec<EventSpan>,
}

/// Generates `n_clips` clips with `refs_per_clip` captions each (1 or 5).
pub fn generate_split(
    grammar: &EventGrammar,
    seed: u64,
    n_clips: usize,
    refs_per_clip: usize,
    noise_sigma: f64,
    id_prefix: &str,
) -> Result<Vec<CaptionedClip>> {
    if n_clips == 0 {
        return Err(Error::config("n_clips must be >= 1"));
    }
    if refs_per_clip != 1 && refs_per_clip != 5 {
        return Err(Error::config(format!("refs_per_clip must be 1 or 5, got {refs_per_clip}")));
    }
    if !(noise_sigma >= 0.0) {
        return Err(Error::config(format!("noise_sigma {noise_sigma} must be >= 0")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, noise_sigma).map_err(|e| Error::config(e.to_string()))?;
    let (t, d) = (grammar.frames, grammar.d_enc);
    let mut clips = Vec::with_capacity(n_clips);
    for c in 0..n_clips {
        let k = rng.random_range(1..=3);
        let mut ids: Vec<usize> = (0..grammar.events.len()).collect();
        ids.shuffle(&mut rng);
        let mut spans: Vec<EventSpan> = ids[..k]
            .iter()
            .map(|&event| {
                let len = rng.random_range(MIN_SPAN..=t);
                let start = rng.random_range(0..=t - len);
                EventSpan {
                    event,
                    start,
                    end: start + len,
                }
            })
            .collect();
        spans.sort_by_key(|s| (s.start, s.event));

        let mut data = vec![0.0; t * d];
        for s in &spans {
            let sig = grammar.signature(s.event);
            for f in s.start..s.end {
                for (x, y) in data[f * d..(f + 1) * d].iter_mut().zip(sig) {
                    *x += y;
                }
            }
        }
        if noise_sigma > 0.0 {
            data.iter_mut().for_each(|x| *x += noise.sample(&mut rng));
        }

        let order: Vec<usize> = spans.iter().map(|s| s.event).collect();
        let mut captions = Vec::with_capacity(refs_per_clip);
        let mut seen = BTreeSet::new();
        let mut attempts = 0;
        while captions.len() < refs_per_clip {
            let cap = grammar.realize(&order, &mut rng);
            attempts += 1;
            if seen.insert(cap.clone()) || attempts > 64 {
                captions.push(cap);
            }
        }
        clips.push(CaptionedClip {
            id: format!("{id_prefix}{c:05}"),
            features: AudioFeatures::new(Tensor::new(vec![t, d], data)?)?,
            captions,
            events: spans,
        });
    }
    Ok(clips)
}

/// Split sizes and noise for a full corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusConfig {
    pub seed: u64,
    pub train_clips: usize,
    pub val_clips: usize,
    pub test_clips: usize,
    pub noise_sigma: f64,
    pub frames: usize,
    pub d_enc: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            train_clips: 512,
            val_clips: 64,
            test_clips: 64,
            noise_sigma: 1.5,
            frames: DEFAULT_FRAMES,
            d_enc: DEFAULT_D_ENC,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub train: Vec<CaptionedClip>,
    pub val: Vec<CaptionedClip>,
    pub test: Vec<CaptionedClip>,
}

impl Corpus {
    pub fn generate(cfg: &CorpusConfig) -> Result<Self> {
        let g = EventGrammar::new(cfg.frames, cfg.d_enc, GRAMMAR_SEED)?;
        let split_seed = |k: u64| cfg.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(k);
        Ok(Self {
            train: generate_split(&g, split_seed(1), cfg.train_clips, 1, cfg.noise_sigma, "train_")?,
            val: generate_split(&g, split_seed(2), cfg.val_clips, 5, cfg.noise_sigma, "val_")?,
            test: generate_split(&g, split_seed(3), cfg.test_clips, 5, cfg.noise_sigma, "test_")?,
        })
    }

    pub fn train_captions(&self) -> Vec<String> {
        self.train.iter().flat_map(|c| c.captions.iter().cloned()).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub n_clips: usize,
    pub n_captions: usize,
    pub vocab_size: usize,
    pub caption_lengths: BTreeMap<usize, usize>,
    pub event_counts: BTreeMap<String, usize>,
}

/// Word vocabulary size (specials included), caption lengths in words and
/// event frequencies.
pub fn dataset_stats(grammar: &EventGrammar, clips: &[CaptionedClip]) -> Result<DatasetStats> {
    if clips.is_empty() {
        return Err(Error::Contract("stats over an empty corpus".into()));
    }
    let captions: Vec<&str> = clips.iter().flat_map(|c| c.captions.iter().map(String::as_str)).collect();
    let vocab = build_vocab(&captions, VocabKind::Word, 1)?;
    let mut caption_lengths = BTreeMap::new();
    for c in &captions {
        *caption_lengths.entry(c.split_whitespace().count()).or_insert(0) += 1;
    }
    let mut event_counts = BTreeMap::new();
    for c in clips {
        for s in &c.events {
            *event_counts.entry(grammar.events[s.event].key.to_string()).or_insert(0) += 1;
        }
    }
    Ok(DatasetStats {
        n_clips: clips.len(),
        n_captions: captions.len(),
        vocab_size: vocab.len(),
        caption_lengths,
        event_counts,
    })
}

#[derive(Serialize, Deserialize)]
struct CaptionRecord {
    id: String,
    captions: Vec<String>,
    events: Vec<EventRecord>,
}

#[derive(Serialize, Deserialize)]
struct EventRecord {
    event: String,
    start: usize,
    end: usize,
}

/// Writes the binary feature container for `clips` (all with equal shape).
pub fn write_features(path: impl AsRef<Path>, clips: &[CaptionedClip]) -> Result<()> {
    let feats: Vec<&AudioFeatures> = clips.iter().map(|c| &c.features).collect();
    write_feature_file(path, &feats)
}

pub fn write_feature_file(path: impl AsRef<Path>, feats: &[&AudioFeatures]) -> Result<()> {
    let (t, d) = match feats.first() {
        Some(f) => (f.frames(), f.dim()),
        None => (0, 0),
    };
    if feats.iter().any(|f| f.frames() != t || f.dim() != d) {
        return Err(Error::dim("all clips in a feature file must share T and d_enc"));
    }
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(FEATURE_MAGIC)?;
    w.write_all(&FEATURE_VERSION.to_le_bytes())?;
    for n in [feats.len(), t, d] {
        w.write_all(&(n as u64).to_le_bytes())?;
    }
    for f in feats {
        for x in f.tensor().data() {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_features(path: impl AsRef<Path>) -> Result<Vec<AudioFeatures>> {
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 36 || &bytes[..8] != FEATURE_MAGIC {
        return Err(Error::format("not a feature file (bad magic)"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != FEATURE_VERSION {
        return Err(Error::format(format!("unsupported feature file version {version}")));
    }
    let word = |i: usize| u64::from_le_bytes(bytes[12 + 8 * i..20 + 8 * i].try_into().expect("8 bytes")) as usize;
    let (n, t, d) = (word(0), word(1), word(2));
    let body = &bytes[36..];
    let expected = n
        .checked_mul(t)
        .and_then(|x| x.checked_mul(d))
        .and_then(|x| x.checked_mul(8))
        .ok_or_else(|| Error::format("feature header overflows"))?;
    if body.len() != expected {
        return Err(Error::format(format!(
            "feature payload is {} bytes, header implies {expected}",
            body.len()
        )));
    }
    body.chunks_exact(t * d * 8)
        .map(|chunk| {
            let data = chunk
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
                .collect();
            AudioFeatures::new(Tensor::new(vec![t, d], data)?)
        })
        .collect()
}

pub fn write_captions(path: impl AsRef<Path>, grammar: &EventGrammar, clips: &[CaptionedClip]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for c in clips {
        let rec = CaptionRecord {
            id: c.id.clone(),
            captions: c.captions.clone(),
            events: c
                .events
                .iter()
                .map(|s| EventRecord {
                    event: grammar.events[s.event].key.to_string(),
                    start: s.start,
                    end: s.end,
                })
                .collect(),
        };
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Reads `(id, captions)` pairs from a captions JSON-lines file.
pub fn read_captions(path: impl AsRef<Path>) -> Result<Vec<(String, Vec<String>)>> {
    let r = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: CaptionRecord = serde_json::from_str(&line)?;
        out.push((rec.id, rec.captions));
    }
    Ok(out)
}

/// Writes `<dir>/<split>.features.bin` and `<dir>/<split>.captions.jsonl`.
pub fn write_corpus(dir: impl AsRef<Path>, grammar: &EventGrammar, corpus: &Corpus) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    for (name, clips) in [("train", &corpus.train), ("val", &corpus.val), ("test", &corpus.test)] {
        write_features(dir.join(format!("{name}.features.bin")), clips)?;
        write_captions(dir.join(format!("{name}.captions.jsonl")), grammar, clips)?;
    }
    Ok(())
}

/// Vocabulary of the requested kind built from the training captions.
pub fn corpus_vocab(corpus: &Corpus, kind: VocabKind, subword_size: usize) -> Result<Vocabulary> {
    let caps = corpus.train_captions();
    match kind {
        VocabKind::Word => Vocabulary::word(&caps, 1),
        VocabKind::Subword => Vocabulary::subword(&caps, 1, subword_size),
    }
}
