//! Synthetic emotion corpus with session/speaker structure, its file
//! format, and leave-one-session-out fold planning.
//!
//! Frames are Gaussian around a per-class mean plus a per-speaker offset.
//! A fixed fraction of each utterance's frames (one contiguous block) is
//! drawn from the neutral class regardless of the utterance label, so frame
//! content and utterance label disagree in a controlled way. `frame_truth`
//! records the class each frame was actually drawn from.
//!
//! # File format
//!
//! JSON lines. The first line is a header record:
//!
//! ```text
//! {"format":"flea-corpus","version":1,"sessions":5,"speakers_per_session":2,
//!  "feature_dim":8,"speakers":[{"id":"Ses01F","session":1},...],
//!  "generation_spec":{...}|null,"num_utterances":200}
//! ```
//!
//! followed by `num_utterances` utterance records:
//!
//! ```text
//! {"id":"Ses01F_000","session":1,"speaker":"Ses01F","label":"happy",
//!  "frames":[[f, f, ...], ...],"frame_truth":["happy", ...]}
//! ```
//!
//! `frames` is the `T × feature_dim` matrix in row-major order; `frame_truth`
//! is omitted when unknown.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const SPEAKERS_PER_SESSION: usize = 2;
pub const NUM_FOLDS: usize = 5;

const FORMAT: &str = "flea-corpus";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmotionLabel {
    Happy,
    Sad,
    Neutral,
    Angry,
}

impl EmotionLabel {
    pub const COUNT: usize = 4;
    pub const ALL: [EmotionLabel; 4] = [
        EmotionLabel::Happy,
        EmotionLabel::Sad,
        EmotionLabel::Neutral,
        EmotionLabel::Angry,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            EmotionLabel::Happy => "happy",
            EmotionLabel::Sad => "sad",
            EmotionLabel::Neutral => "neutral",
            EmotionLabel::Angry => "angry",
        }
    }
}

impl fmt::Display for EmotionLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerationSpec {
    pub sessions: u32,
    pub utterances_per_speaker: usize,
    pub feature_dim: usize,
    pub frames_min: usize,
    pub frames_max: usize,
    /// Fraction of frames per utterance drawn from the neutral class.
    pub inconsistency_rate: f64,
    pub seed: u64,
    /// Minimum distance between class means, in units of `noise_std`.
    pub class_separation: f64,
    pub speaker_offset_std: f64,
    pub noise_std: f64,
}

impl Default for GenerationSpec {
    fn default() -> Self {
        Self {
            sessions: 5,
            utterances_per_speaker: 20,
            feature_dim: 8,
            frames_min: 16,
            frames_max: 32,
            inconsistency_rate: 0.0,
            seed: 0,
            class_separation: 3.0,
            speaker_offset_std: 0.5,
            noise_std: 1.0,
        }
    }
}

impl GenerationSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.sessions < 1 {
            return fail("sessions must be at least 1".into());
        }
        if self.utterances_per_speaker < 1 {
            return fail("utterances_per_speaker must be at least 1".into());
        }
        if self.feature_dim < 1 {
            return fail("feature_dim must be at least 1".into());
        }
        if self.frames_min < 4 {
            return fail(format!("frames_min must be at least 4, got {}", self.frames_min));
        }
        if self.frames_max < self.frames_min {
            return fail(format!(
                "frames_max ({}) is below frames_min ({})",
                self.frames_max, self.frames_min
            ));
        }
        if !(0.0..1.0).contains(&self.inconsistency_rate) {
            return fail(format!(
                "inconsistency_rate must lie in [0, 1), got {}",
                self.inconsistency_rate
            ));
        }
        if !(self.class_separation >= 2.0 && self.class_separation.is_finite()) {
            return fail(format!(
                "class_separation must be at least 2 noise deviations, got {}",
                self.class_separation
            ));
        }
        if !(self.noise_std > 0.0 && self.noise_std.is_finite()) {
            return fail(format!("noise_std must be positive, got {}", self.noise_std));
        }
        if !(self.speaker_offset_std >= 0.0 && self.speaker_offset_std.is_finite()) {
            return fail(format!(
                "speaker_offset_std must be non-negative, got {}",
                self.speaker_offset_std
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Speaker {
    pub id: String,
    pub session: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub session: u32,
    pub speaker: String,
    pub label: EmotionLabel,
    /// `T × F` frame features.
    pub frames: Tensor,
    pub frame_truth: Option<Vec<EmotionLabel>>,
}

impl Utterance {
    pub fn num_frames(&self) -> usize {
        self.frames.rows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub sessions: u32,
    pub feature_dim: usize,
    pub speakers: Vec<Speaker>,
    pub generation_spec: Option<GenerationSpec>,
    pub utterances: Vec<Utterance>,
}

impl Corpus {
    pub fn speakers_in_session(&self, session: u32) -> Vec<&Speaker> {
        let mut v: Vec<&Speaker> = self.speakers.iter().filter(|s| s.session == session).collect();
        v.sort_by(|a, b| a.id.cmp(&b.id));
        v
    }

    pub fn utterance(&self, id: &str) -> Option<&Utterance> {
        self.utterances.iter().find(|u| u.id == id)
    }

    pub fn total_frames(&self) -> usize {
        self.utterances.iter().map(Utterance::num_frames).sum()
    }

    /// Checks the structural invariants: a two-speaker roster per session,
    /// every speaker in exactly one session, and well-formed utterances.
    pub fn validate(&self) -> Result<()> {
        let mut roster: BTreeMap<&str, u32> = BTreeMap::new();
        for s in &self.speakers {
            if s.session < 1 || s.session > self.sessions {
                return Err(Error::Input(format!(
                    "speaker {} references session {} outside 1..={}",
                    s.id, s.session, self.sessions
                )));
            }
            if roster.insert(&s.id, s.session).is_some() {
                return Err(Error::Input(format!("speaker {} listed twice", s.id)));
            }
        }
        for session in 1..=self.sessions {
            let n = self.speakers.iter().filter(|s| s.session == session).count();
            if n != SPEAKERS_PER_SESSION {
                return Err(Error::Input(format!(
                    "session {session} has {n} speakers, expected {SPEAKERS_PER_SESSION}"
                )));
            }
        }
        let mut ids = BTreeSet::new();
        for u in &self.utterances {
            if !ids.insert(u.id.as_str()) {
                return Err(Error::Input(format!("duplicate utterance id {}", u.id)));
            }
            match roster.get(u.speaker.as_str()) {
                Some(&s) if s == u.session => {}
                _ => {
                    return Err(Error::Input(format!(
                        "utterance {} references unknown speaker {} in session {}",
                        u.id, u.speaker, u.session
                    )))
                }
            }
            validate_frames(u, self.feature_dim)?;
        }
        Ok(())
    }
}

fn validate_frames(u: &Utterance, feature_dim: usize) -> Result<()> {
    if u.frames.rank() != 2 || u.num_frames() < 1 || u.frames.cols() != feature_dim {
        return Err(Error::Input(format!(
            "utterance {} has frame matrix {:?}, expected T×{feature_dim} with T ≥ 1",
            u.id,
            u.frames.shape()
        )));
    }
    if !u.frames.is_finite() {
        return Err(Error::Input(format!("utterance {} has non-finite frames", u.id)));
    }
    if let Some(truth) = &u.frame_truth {
        if truth.len() != u.num_frames() {
            return Err(Error::Input(format!(
                "utterance {} has {} frame_truth entries for {} frames",
                u.id,
                truth.len(),
                u.num_frames()
            )));
        }
    }
    Ok(())
}

/// Class means scaled so the closest pair sits `separation · noise_std` apart.
fn class_means(spec: &GenerationSpec, rng: &mut ChaCha8Rng) -> Result<Vec<Vec<f64>>> {
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let raw: Vec<Vec<f64>> = (0..EmotionLabel::COUNT)
        .map(|_| (0..spec.feature_dim).map(|_| unit.sample(rng)).collect())
        .collect();
    let mut min_dist = f64::INFINITY;
    for a in 0..raw.len() {
        for b in a + 1..raw.len() {
            min_dist = min_dist.min(crate::numerics::squared_distance(&raw[a], &raw[b]).sqrt());
        }
    }
    if !(min_dist > 1e-9) {
        return Err(Error::Config("degenerate class means; try another seed".into()));
    }
    let scale = spec.class_separation * spec.noise_std / min_dist;
    Ok(raw
        .into_iter()
        .map(|m| m.into_iter().map(|v| v * scale).collect())
        .collect())
}

pub fn generate_corpus(spec: &GenerationSpec) -> Result<Corpus> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let means = class_means(spec, &mut rng)?;
    let offset_dist = Normal::new(0.0, spec.speaker_offset_std)
        .map_err(|e| Error::Config(format!("speaker_offset_std: {e}")))?;
    let noise = Normal::new(0.0, spec.noise_std)
        .map_err(|e| Error::Config(format!("noise_std: {e}")))?;

    let mut speakers = Vec::new();
    let mut utterances = Vec::new();
    for session in 1..=spec.sessions {
        for gender in ["F", "M"] {
            let speaker = format!("Ses{session:02}{gender}");
            speakers.push(Speaker {
                id: speaker.clone(),
                session,
            });
            let offset: Vec<f64> = (0..spec.feature_dim)
                .map(|_| offset_dist.sample(&mut rng))
                .collect();
            let mut labels: Vec<EmotionLabel> = (0..spec.utterances_per_speaker)
                .map(|i| EmotionLabel::ALL[i % EmotionLabel::COUNT])
                .collect();
            labels.shuffle(&mut rng);

            for (i, &label) in labels.iter().enumerate() {
                let t = rng.random_range(spec.frames_min..=spec.frames_max);
                let off_label = (spec.inconsistency_rate * t as f64).round() as usize;
                let block_start = rng.random_range(0..=t - off_label);
                let truth: Vec<EmotionLabel> = (0..t)
                    .map(|f| {
                        if (block_start..block_start + off_label).contains(&f) {
                            EmotionLabel::Neutral
                        } else {
                            label
                        }
                    })
                    .collect();
                let mut data = Vec::with_capacity(t * spec.feature_dim);
                for class in &truth {
                    let mean = &means[class.index()];
                    for d in 0..spec.feature_dim {
                        data.push(mean[d] + offset[d] + noise.sample(&mut rng));
                    }
                }
                utterances.push(Utterance {
                    id: format!("{speaker}_{i:03}"),
                    session,
                    speaker: speaker.clone(),
                    label,
                    frames: Tensor::matrix(t, spec.feature_dim, data)?,
                    frame_truth: Some(truth),
                });
            }
        }
    }
    Ok(Corpus {
        sessions: spec.sessions,
        feature_dim: spec.feature_dim,
        speakers,
        generation_spec: Some(spec.clone()),
        utterances,
    })
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct HeaderRecord {
    format: String,
    version: u32,
    sessions: u32,
    speakers_per_session: usize,
    feature_dim: usize,
    speakers: Vec<Speaker>,
    generation_spec: Option<GenerationSpec>,
    num_utterances: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct UtteranceRecord {
    id: String,
    session: u32,
    speaker: String,
    label: EmotionLabel,
    frames: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    frame_truth: Option<Vec<EmotionLabel>>,
}

pub fn corpus_to_string(corpus: &Corpus) -> Result<String> {
    let header = HeaderRecord {
        format: FORMAT.into(),
        version: VERSION,
        sessions: corpus.sessions,
        speakers_per_session: SPEAKERS_PER_SESSION,
        feature_dim: corpus.feature_dim,
        speakers: corpus.speakers.clone(),
        generation_spec: corpus.generation_spec.clone(),
        num_utterances: corpus.utterances.len(),
    };
    let mut out = json_line(&header)?;
    for u in &corpus.utterances {
        let rec = UtteranceRecord {
            id: u.id.clone(),
            session: u.session,
            speaker: u.speaker.clone(),
            label: u.label,
            frames: u.frames.iter_rows().map(<[f64]>::to_vec).collect(),
            frame_truth: u.frame_truth.clone(),
        };
        out.push_str(&json_line(&rec)?);
    }
    Ok(out)
}

pub(crate) fn json_line<T: Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string(value)
        .map_err(|e| Error::Input(format!("serialisation failed: {e}")))?;
    s.push('\n');
    Ok(s)
}

pub fn corpus_from_str(text: &str, origin: &Path) -> Result<Corpus> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, first) = lines
        .next()
        .ok_or_else(|| Error::parse(origin, "line 1 (header)", "empty file"))?;
    let header: HeaderRecord = serde_json::from_str(first)
        .map_err(|e| Error::parse(origin, "line 1 (header)", e))?;
    if header.format != FORMAT || header.version != VERSION {
        return Err(Error::parse(
            origin,
            "line 1 (header)",
            format!("unsupported format {} v{}", header.format, header.version),
        ));
    }
    if header.speakers_per_session != SPEAKERS_PER_SESSION {
        return Err(Error::parse(
            origin,
            "line 1 (header)",
            format!("speakers_per_session must be {SPEAKERS_PER_SESSION}"),
        ));
    }

    let mut utterances = Vec::with_capacity(header.num_utterances);
    for (idx, line) in lines {
        let record_name = |id: Option<&str>| match id {
            Some(id) => format!("line {} (utterance {id})", idx + 1),
            None => format!("line {}", idx + 1),
        };
        let rec: UtteranceRecord =
            serde_json::from_str(line).map_err(|e| Error::parse(origin, record_name(None), e))?;
        let frames = Tensor::from_rows(&rec.frames)
            .map_err(|e| Error::parse(origin, record_name(Some(&rec.id)), e))?;
        let u = Utterance {
            id: rec.id,
            session: rec.session,
            speaker: rec.speaker,
            label: rec.label,
            frames,
            frame_truth: rec.frame_truth,
        };
        validate_frames(&u, header.feature_dim)
            .map_err(|e| Error::parse(origin, record_name(Some(&u.id)), e))?;
        utterances.push(u);
    }
    if utterances.len() != header.num_utterances {
        return Err(Error::parse(
            origin,
            "end of file",
            format!(
                "expected {} utterance records, found {} (truncated file?)",
                header.num_utterances,
                utterances.len()
            ),
        ));
    }
    let corpus = Corpus {
        sessions: header.sessions,
        feature_dim: header.feature_dim,
        speakers: header.speakers,
        generation_spec: header.generation_spec,
        utterances,
    };
    corpus
        .validate()
        .map_err(|e| Error::parse(origin, "corpus", e))?;
    Ok(corpus)
}

pub fn save_corpus(corpus: &Corpus, path: &Path) -> Result<()> {
    let text = corpus_to_string(corpus)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_corpus(path: &Path) -> Result<Corpus> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    corpus_from_str(&text, path)
}

/// One leave-one-session-out fold.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub fold_index: usize,
    pub held_out_session: u32,
    pub train_sessions: Vec<u32>,
    pub val_speaker: String,
    pub test_speaker: String,
}

/// Utterances of one fold, by partition.
#[derive(Debug, Clone)]
pub struct FoldSplit<'a> {
    pub train: Vec<&'a Utterance>,
    pub val: Vec<&'a Utterance>,
    pub test: Vec<&'a Utterance>,
}

impl FoldPlan {
    pub fn train_speakers(&self, corpus: &Corpus) -> Vec<String> {
        let mut v: Vec<String> = corpus
            .speakers
            .iter()
            .filter(|s| self.train_sessions.contains(&s.session))
            .map(|s| s.id.clone())
            .collect();
        v.sort();
        v
    }

    pub fn split<'a>(&self, corpus: &'a Corpus) -> Result<FoldSplit<'a>> {
        let mut split = FoldSplit {
            train: Vec::new(),
            val: Vec::new(),
            test: Vec::new(),
        };
        for u in &corpus.utterances {
            if self.train_sessions.contains(&u.session) {
                split.train.push(u);
            } else if u.speaker == self.val_speaker {
                split.val.push(u);
            } else if u.speaker == self.test_speaker {
                split.test.push(u);
            }
        }
        for (name, part) in [("train", &split.train), ("validation", &split.val), ("test", &split.test)] {
            if part.is_empty() {
                return Err(Error::Fold(format!(
                    "fold {} has an empty {name} partition",
                    self.fold_index
                )));
            }
        }
        Ok(split)
    }
}

/// Five leave-one-session-out folds; fold `k` holds out the `k`-th session
/// (in ascending id order). The lexicographically smaller speaker of the
/// held-out session is the validation speaker, the other the test speaker.
pub fn make_folds(corpus: &Corpus) -> Result<Vec<FoldPlan>> {
    if corpus.sessions as usize != NUM_FOLDS {
        return Err(Error::Fold(format!(
            "leave-one-session-out needs exactly {NUM_FOLDS} sessions, corpus has {}",
            corpus.sessions
        )));
    }
    let sessions: Vec<u32> = (1..=corpus.sessions).collect();
    let mut folds = Vec::with_capacity(NUM_FOLDS);
    for (k, &held_out) in sessions.iter().enumerate() {
        let speakers = corpus.speakers_in_session(held_out);
        if speakers.len() != SPEAKERS_PER_SESSION {
            return Err(Error::Fold(format!(
                "session {held_out} has {} speakers, expected {SPEAKERS_PER_SESSION}",
                speakers.len()
            )));
        }
        folds.push(FoldPlan {
            fold_index: k,
            held_out_session: held_out,
            train_sessions: sessions.iter().copied().filter(|&s| s != held_out).collect(),
            val_speaker: speakers[0].id.clone(),
            test_speaker: speakers[1].id.clone(),
        });
    }
    Ok(folds)
}
