//! Trace data model and the canonical trace / vocabulary file formats.
//!
//! A trace file is UTF-8 with one JSON record per line:
//!
//! ```text
//! {"schema":1,"trajectory_id":0,"prompt_id":3,"tokens":[15,31],
//!  "losses":{"pre":[1.2,0.03],"post":[1.1,0.01]},
//!  "dists":{"post":[{"student":{"entries":[[15,0.99]],"tail_mass":0.01},"teacher":{...}}, ...]}}
//! ```
//!
//! Floats are written in shortest round-trip form after rounding to nine
//! significant digits, so writing the same corpus twice is byte-identical.

use std::collections::HashSet;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::marker::PhantomData;
use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use serde::de::{Deserializer, MapAccess, Visitor};
use serde::ser::{SerializeMap, SerializeSeq, SerializeStruct, Serializer};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type TokenId = u32;

pub const SCHEMA_VERSION: u32 = 1;

/// Tolerance on the total mass of a truncated distribution.
pub const MASS_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("I/O error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("trajectory {trajectory_id}: invalid {field}: {message}")]
    Validation {
        trajectory_id: u64,
        field: &'static str,
        message: String,
    },
    #[error("vocabulary: {0}")]
    Vocabulary(String),
    #[error("checkpoint {0:?} not present in corpus")]
    MissingCheckpoint(String),
}

fn invalid(trajectory_id: u64, field: &'static str, message: impl Into<String>) -> TraceError {
    TraceError::Validation {
        trajectory_id,
        field,
        message: message.into(),
    }
}

/// Top-k probability vector with the omitted mass kept as `tail_mass`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TruncatedDist {
    /// `(token, probability)` sorted by descending probability.
    pub entries: Vec<(TokenId, f64)>,
    pub tail_mass: f64,
}

impl TruncatedDist {
    /// Builds a distribution from a dense probability vector, keeping the
    /// `top_k` largest positive entries.
    pub fn from_dense(probs: &[f64], top_k: usize) -> Self {
        let mut entries: Vec<(TokenId, f64)> = probs
            .iter()
            .enumerate()
            .filter(|(_, &p)| p > 0.0)
            .map(|(i, &p)| (i as TokenId, p))
            .collect();
        entries.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        entries.truncate(top_k);
        let kept: f64 = entries.iter().map(|e| e.1).sum();
        let tail_mass = (1.0 - kept).max(0.0);
        Self { entries, tail_mass }
    }

    pub fn mass(&self) -> f64 {
        self.entries.iter().map(|e| e.1).sum::<f64>() + self.tail_mass
    }

    fn validate(&self, vocab_size: Option<usize>) -> Result<(), String> {
        if !(0.0..=1.0).contains(&self.tail_mass) {
            return Err(format!("tail_mass {} outside [0,1]", self.tail_mass));
        }
        let mut seen = HashSet::with_capacity(self.entries.len());
        for &(id, p) in &self.entries {
            if !(p.is_finite() && p > 0.0) {
                return Err(format!("probability {p} for token {id} is not positive"));
            }
            if !seen.insert(id) {
                return Err(format!("duplicate token {id}"));
            }
            if let Some(size) = vocab_size {
                if id as usize >= size {
                    return Err(format!("token {id} outside vocabulary of size {size}"));
                }
            }
        }
        let mass = self.mass();
        if (mass - 1.0).abs() > MASS_TOLERANCE {
            return Err(format!("total mass {mass} differs from 1"));
        }
        Ok(())
    }
}

/// Student and teacher distributions at one position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistPair {
    pub student: TruncatedDist,
    pub teacher: TruncatedDist,
}

/// One sampled trajectory with per-position losses at named checkpoints.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryTrace {
    pub trajectory_id: u64,
    pub prompt_id: u64,
    pub tokens: Vec<TokenId>,
    pub losses: IndexMap<String, Vec<f64>>,
    pub dists: Option<IndexMap<String, Vec<DistPair>>>,
}

impl TrajectoryTrace {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn loss(&self, checkpoint: &str) -> Option<&[f64]> {
        self.losses.get(checkpoint).map(Vec::as_slice)
    }

    pub fn dists_at(&self, checkpoint: &str) -> Option<&[DistPair]> {
        self.dists.as_ref()?.get(checkpoint).map(Vec::as_slice)
    }

    /// Checks the per-record invariants. `vocab_size`, when given, bounds token ids.
    pub fn validate(&self, vocab_size: Option<usize>) -> Result<(), TraceError> {
        let id = self.trajectory_id;
        if let Some(size) = vocab_size {
            if let Some(bad) = self.tokens.iter().find(|&&t| t as usize >= size) {
                return Err(invalid(
                    id,
                    "tokens",
                    format!("token {bad} outside vocabulary of size {size}"),
                ));
            }
        }
        if self.losses.is_empty() {
            return Err(invalid(id, "losses", "no checkpoint present"));
        }
        for (name, values) in &self.losses {
            if values.len() != self.tokens.len() {
                return Err(invalid(
                    id,
                    "losses",
                    format!(
                        "checkpoint {name:?} has {} values for {} tokens",
                        values.len(),
                        self.tokens.len()
                    ),
                ));
            }
            if let Some(bad) = values.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
                return Err(invalid(
                    id,
                    "losses",
                    format!("checkpoint {name:?} has non-finite or negative loss {bad}"),
                ));
            }
        }
        if let Some(dists) = &self.dists {
            for (name, pairs) in dists {
                if !self.losses.contains_key(name) {
                    return Err(invalid(
                        id,
                        "dists",
                        format!("checkpoint {name:?} has dists but no losses"),
                    ));
                }
                if pairs.len() != self.tokens.len() {
                    return Err(invalid(
                        id,
                        "dists",
                        format!(
                            "checkpoint {name:?} has {} positions for {} tokens",
                            pairs.len(),
                            self.tokens.len()
                        ),
                    ));
                }
                for (t, pair) in pairs.iter().enumerate() {
                    for (side, dist) in [("student", &pair.student), ("teacher", &pair.teacher)] {
                        dist.validate(vocab_size).map_err(|m| {
                            invalid(id, "dists", format!("{name:?} position {t} {side}: {m}"))
                        })?;
                    }
                }
            }
        }
        Ok(())
    }
}

/// Dense id → surface string table.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Vocabulary {
    pub id_to_string: Vec<String>,
}

impl Vocabulary {
    pub fn new(id_to_string: Vec<String>) -> Self {
        Self { id_to_string }
    }

    pub fn size(&self) -> usize {
        self.id_to_string.len()
    }

    pub fn surface(&self, id: TokenId) -> Option<&str> {
        self.id_to_string.get(id as usize).map(String::as_str)
    }
}

/// Validated collection of trajectories sharing a vocabulary and checkpoint list.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Corpus {
    pub trajectories: Vec<TrajectoryTrace>,
    pub vocabulary: Vocabulary,
    pub checkpoints: Vec<String>,
}

impl Corpus {
    /// Validates every trajectory and infers the checkpoint list from the first one.
    pub fn new(trajectories: Vec<TrajectoryTrace>, vocabulary: Vocabulary) -> Result<Self, TraceError> {
        let checkpoints: Vec<String> = trajectories
            .first()
            .map(|t| t.losses.keys().cloned().collect())
            .unwrap_or_default();
        let mut ids = HashSet::with_capacity(trajectories.len());
        for traj in &trajectories {
            traj.validate(Some(vocabulary.size()))?;
            check_checkpoints(traj, &checkpoints)?;
            if !ids.insert(traj.trajectory_id) {
                return Err(invalid(traj.trajectory_id, "trajectory_id", "duplicate id"));
            }
        }
        Ok(Self {
            trajectories,
            vocabulary,
            checkpoints,
        })
    }

    pub fn has_checkpoint(&self, name: &str) -> bool {
        self.checkpoints.iter().any(|c| c == name)
    }

    pub fn require_checkpoint(&self, name: &str) -> Result<(), TraceError> {
        if self.has_checkpoint(name) {
            Ok(())
        } else {
            Err(TraceError::MissingCheckpoint(name.to_string()))
        }
    }

    pub fn total_positions(&self) -> usize {
        self.trajectories.iter().map(TrajectoryTrace::len).sum()
    }

    /// Copy restricted to the trajectories at `indices` (in the given order).
    pub fn subset(&self, indices: &[usize]) -> Corpus {
        Corpus {
            trajectories: indices.iter().map(|&i| self.trajectories[i].clone()).collect(),
            vocabulary: self.vocabulary.clone(),
            checkpoints: self.checkpoints.clone(),
        }
    }
}

fn check_checkpoints(traj: &TrajectoryTrace, checkpoints: &[String]) -> Result<(), TraceError> {
    let same = traj.losses.len() == checkpoints.len()
        && checkpoints.iter().all(|c| traj.losses.contains_key(c));
    if same {
        Ok(())
    } else {
        Err(invalid(
            traj.trajectory_id,
            "losses",
            format!(
                "checkpoints {:?} differ from corpus checkpoints {:?}",
                traj.losses.keys().collect::<Vec<_>>(),
                checkpoints
            ),
        ))
    }
}

/// Rounds to nine significant digits; serialization then emits the shortest
/// decimal that round-trips the rounded value.
pub fn canonical_float(x: f64) -> f64 {
    if !x.is_finite() || x == 0.0 {
        return x;
    }
    format!("{x:.8e}").parse().unwrap_or(x)
}

struct CanonSeq<'a>(&'a [f64]);

impl Serialize for CanonSeq<'_> {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let mut seq = s.serialize_seq(Some(self.0.len()))?;
        for &x in self.0 {
            seq.serialize_element(&canonical_float(x))?;
        }
        seq.end()
    }
}

struct CanonDist<'a>(&'a TruncatedDist);

impl Serialize for CanonDist<'_> {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let entries: Vec<(TokenId, f64)> = self
            .0
            .entries
            .iter()
            .map(|&(id, p)| (id, canonical_float(p)))
            .collect();
        let mut st = s.serialize_struct("TruncatedDist", 2)?;
        st.serialize_field("entries", &entries)?;
        st.serialize_field("tail_mass", &canonical_float(self.0.tail_mass))?;
        st.end()
    }
}

struct CanonPairs<'a>(&'a [DistPair]);

impl Serialize for CanonPairs<'_> {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        #[derive(Serialize)]
        struct Pair<'b> {
            student: CanonDist<'b>,
            teacher: CanonDist<'b>,
        }
        let mut seq = s.serialize_seq(Some(self.0.len()))?;
        for p in self.0 {
            seq.serialize_element(&Pair {
                student: CanonDist(&p.student),
                teacher: CanonDist(&p.teacher),
            })?;
        }
        seq.end()
    }
}

struct RecordOut<'a> {
    traj: &'a TrajectoryTrace,
    order: &'a [String],
}

impl Serialize for RecordOut<'_> {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        struct Losses<'b>(&'b TrajectoryTrace, &'b [String]);
        impl Serialize for Losses<'_> {
            fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
                let mut m = s.serialize_map(Some(self.1.len()))?;
                for name in self.1 {
                    if let Some(v) = self.0.losses.get(name) {
                        m.serialize_entry(name, &CanonSeq(v))?;
                    }
                }
                m.end()
            }
        }
        struct Dists<'b>(&'b IndexMap<String, Vec<DistPair>>, &'b [String]);
        impl Serialize for Dists<'_> {
            fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
                let mut m = s.serialize_map(Some(self.0.len()))?;
                for name in self.1 {
                    if let Some(v) = self.0.get(name) {
                        m.serialize_entry(name, &CanonPairs(v))?;
                    }
                }
                m.end()
            }
        }
        let t = self.traj;
        let n = if t.dists.is_some() { 6 } else { 5 };
        let mut st = s.serialize_struct("TrajectoryTrace", n)?;
        st.serialize_field("schema", &SCHEMA_VERSION)?;
        st.serialize_field("trajectory_id", &t.trajectory_id)?;
        st.serialize_field("prompt_id", &t.prompt_id)?;
        st.serialize_field("tokens", &t.tokens)?;
        st.serialize_field("losses", &Losses(t, self.order))?;
        if let Some(d) = &t.dists {
            st.serialize_field("dists", &Dists(d, self.order))?;
        }
        st.end()
    }
}

/// Deserializes a JSON object into an `IndexMap`, rejecting repeated keys.
fn unique_map<'de, D, V>(d: D) -> Result<IndexMap<String, V>, D::Error>
where
    D: Deserializer<'de>,
    V: Deserialize<'de>,
{
    struct UniqueVisitor<V>(PhantomData<V>);

    impl<'de, V: Deserialize<'de>> Visitor<'de> for UniqueVisitor<V> {
        type Value = IndexMap<String, V>;

        fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
            f.write_str("an object keyed by checkpoint name")
        }

        fn visit_map<A: MapAccess<'de>>(self, mut access: A) -> Result<Self::Value, A::Error> {
            let mut out = IndexMap::new();
            while let Some((k, v)) = access.next_entry::<String, V>()? {
                if out.contains_key(&k) {
                    return Err(serde::de::Error::custom(format!("duplicate checkpoint {k:?}")));
                }
                out.insert(k, v);
            }
            Ok(out)
        }
    }

    d.deserialize_map(UniqueVisitor(PhantomData))
}

fn opt_unique_map<'de, D, V>(d: D) -> Result<Option<IndexMap<String, V>>, D::Error>
where
    D: Deserializer<'de>,
    V: Deserialize<'de>,
{
    unique_map(d).map(Some)
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RecordIn {
    schema: u32,
    trajectory_id: u64,
    prompt_id: u64,
    tokens: Vec<TokenId>,
    #[serde(deserialize_with = "unique_map")]
    losses: IndexMap<String, Vec<f64>>,
    #[serde(default, deserialize_with = "opt_unique_map")]
    dists: Option<IndexMap<String, Vec<DistPair>>>,
}

/// Parses one trace line. Line numbers in errors are 1-based.
pub fn parse_record(line: &str, line_no: usize) -> Result<TrajectoryTrace, TraceError> {
    let rec: RecordIn = serde_json::from_str(line).map_err(|e| TraceError::Parse {
        line: line_no,
        message: e.to_string(),
    })?;
    if rec.schema != SCHEMA_VERSION {
        return Err(TraceError::Parse {
            line: line_no,
            message: format!("unsupported schema version {}", rec.schema),
        });
    }
    Ok(TrajectoryTrace {
        trajectory_id: rec.trajectory_id,
        prompt_id: rec.prompt_id,
        tokens: rec.tokens,
        losses: rec.losses,
        dists: rec.dists,
    })
}

/// Serializes one trajectory as a single line (without the newline).
pub fn format_record(traj: &TrajectoryTrace, checkpoint_order: &[String]) -> String {
    // Serialization of these types cannot fail: all keys are strings.
    serde_json::to_string(&RecordOut {
        traj,
        order: checkpoint_order,
    })
    .expect("trace record serialization")
}

/// Streams trajectories from a reader, validating each record on its own.
pub fn read_trajectories<R: BufRead>(
    reader: R,
    vocab_size: Option<usize>,
) -> impl Iterator<Item = Result<TrajectoryTrace, TraceError>> {
    reader
        .lines()
        .enumerate()
        .filter_map(move |(i, line)| {
            let line_no = i + 1;
            match line {
                Err(e) => Some(Err(TraceError::Parse {
                    line: line_no,
                    message: e.to_string(),
                })),
                Ok(l) if l.trim().is_empty() => None,
                Ok(l) => Some(parse_record(&l, line_no).and_then(|t| {
                    t.validate(vocab_size)?;
                    Ok(t)
                })),
            }
        })
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TraceError + '_ {
    move |source| TraceError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Reads and validates a trace file and its vocabulary.
pub fn load_corpus(trace_path: &Path, vocab_path: &Path) -> Result<Corpus, TraceError> {
    let vocabulary = load_vocabulary(vocab_path)?;
    let file = File::open(trace_path).map_err(io_err(trace_path))?;
    let trajectories = read_trajectories(BufReader::new(file), Some(vocabulary.size()))
        .collect::<Result<Vec<_>, _>>()?;
    Corpus::new(trajectories, vocabulary)
}

/// Writes the trace file. Checkpoints are emitted in corpus order.
pub fn write_corpus(corpus: &Corpus, trace_path: &Path) -> Result<(), TraceError> {
    let file = File::create(trace_path).map_err(io_err(trace_path))?;
    let mut w = BufWriter::new(file);
    for traj in &corpus.trajectories {
        let line = format_record(traj, &corpus.checkpoints);
        w.write_all(line.as_bytes()).map_err(io_err(trace_path))?;
        w.write_all(b"\n").map_err(io_err(trace_path))?;
    }
    w.flush().map_err(io_err(trace_path))
}

pub fn vocabulary_to_json(vocab: &Vocabulary) -> String {
    let mut tokens = IndexMap::new();
    for (i, s) in vocab.id_to_string.iter().enumerate() {
        tokens.insert(i.to_string(), s.as_str());
    }
    #[derive(Serialize)]
    struct Out<'a> {
        size: usize,
        tokens: IndexMap<String, &'a str>,
    }
    let mut text = serde_json::to_string_pretty(&Out {
        size: vocab.size(),
        tokens,
    })
    .expect("vocabulary serialization");
    text.push('\n');
    text
}

pub fn parse_vocabulary(text: &str) -> Result<Vocabulary, TraceError> {
    #[derive(Deserialize)]
    #[serde(deny_unknown_fields)]
    struct In {
        size: usize,
        tokens: IndexMap<String, String>,
    }
    let raw: In = serde_json::from_str(text).map_err(|e| TraceError::Vocabulary(e.to_string()))?;
    let mut slots: Vec<Option<String>> = vec![None; raw.size];
    for (key, surface) in raw.tokens {
        let id: usize = key
            .parse()
            .map_err(|_| TraceError::Vocabulary(format!("key {key:?} is not a decimal id")))?;
        if id >= raw.size {
            return Err(TraceError::Vocabulary(format!("id {id} outside size {}", raw.size)));
        }
        if slots[id].replace(surface).is_some() {
            return Err(TraceError::Vocabulary(format!("id {id} listed twice")));
        }
    }
    let id_to_string = slots
        .into_iter()
        .enumerate()
        .map(|(i, s)| s.ok_or_else(|| TraceError::Vocabulary(format!("id {i} missing"))))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Vocabulary { id_to_string })
}

pub fn load_vocabulary(path: &Path) -> Result<Vocabulary, TraceError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    parse_vocabulary(&text)
}

pub fn write_vocabulary(vocab: &Vocabulary, path: &Path) -> Result<(), TraceError> {
    std::fs::write(path, vocabulary_to_json(vocab)).map_err(io_err(path))
}

/// Losses of one position at two checkpoints.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OccurrencePair {
    pub trajectory_id: u64,
    pub position: usize,
    pub token: TokenId,
    pub loss_pre: f64,
    pub loss_post: f64,
}

/// One pair per position, in trajectory order then position order.
pub fn align_checkpoints(corpus: &Corpus, pre: &str, post: &str) -> Result<Vec<OccurrencePair>, TraceError> {
    corpus.require_checkpoint(pre)?;
    corpus.require_checkpoint(post)?;
    let mut out = Vec::with_capacity(corpus.total_positions());
    for traj in &corpus.trajectories {
        let (lp, lq) = (&traj.losses[pre], &traj.losses[post]);
        for (t, &token) in traj.tokens.iter().enumerate() {
            out.push(OccurrencePair {
                trajectory_id: traj.trajectory_id,
                position: t,
                token,
                loss_pre: lp[t],
                loss_post: lq[t],
            });
        }
    }
    Ok(out)
}
