//! Byte-level corpus packing and synthetic needle-in-a-haystack tasks.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Beginning-of-sequence id, one past the byte range.
pub const BOS: u32 = 256;
pub const VOCAB_SIZE: usize = 257;

/// Separator between documents in a corpus file.
pub const DOC_DELIMITER: &str = "\n<|endoftext|>\n";

/// Small sample corpus shipped with the crate: the Python language
/// reference topics, one document per topic.
pub const BUNDLED_CORPUS: &str = include_str!("../data/corpus.txt");

pub fn encode(text: &str) -> Vec<u32> {
    text.bytes().map(u32::from).collect()
}

/// Lossy decode; BOS and other non-byte ids are dropped.
pub fn decode(ids: &[u32]) -> String {
    let bytes: Vec<u8> = ids.iter().filter(|&&t| t < 256).map(|&t| t as u8).collect();
    String::from_utf8_lossy(&bytes).into_owned()
}

/// A training sequence `[BOS, x_1, …, x_T]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PackedSequence {
    pub tokens: Vec<u32>,
    /// Source document of every token; BOS inherits the one after it.
    pub doc_ids: Vec<usize>,
}

/// Documents of a plain-text corpus.
#[derive(Clone, Debug)]
pub struct Corpus {
    docs: Vec<Vec<u8>>,
}

impl Corpus {
    pub fn from_text(text: &str, delimiter: &str) -> Self {
        let docs = if delimiter.is_empty() {
            vec![text]
        } else {
            text.split(delimiter).collect()
        };
        Self {
            docs: docs
                .into_iter()
                .filter(|d| !d.trim().is_empty())
                .map(|d| d.as_bytes().to_vec())
                .collect(),
        }
    }

    pub fn from_docs(docs: Vec<Vec<u8>>) -> Self {
        Self { docs }
    }

    pub fn load(path: &Path, delimiter: &str) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        let text = String::from_utf8_lossy(&bytes);
        Ok(Self::from_text(&text, delimiter))
    }

    pub fn bundled() -> Self {
        Self::from_text(BUNDLED_CORPUS, DOC_DELIMITER)
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    pub fn doc(&self, i: usize) -> &[u8] {
        &self.docs[i]
    }

    pub fn total_bytes(&self) -> usize {
        self.docs.iter().map(Vec::len).sum()
    }

    /// Drops documents shorter than `min_doc_len` bytes, shuffles the rest
    /// by `seed`, concatenates them and cuts the stream into sequences of
    /// `t` bytes, each preceded by BOS. A trailing remainder shorter than
    /// `t` is dropped.
    pub fn pack(&self, min_doc_len: usize, t: usize, seed: u64) -> Result<Vec<PackedSequence>> {
        if t == 0 {
            return Err(Error::Data("sequence length must be positive".into()));
        }
        let mut kept: Vec<usize> = (0..self.docs.len())
            .filter(|&i| self.docs[i].len() >= min_doc_len)
            .collect();
        if kept.is_empty() {
            return Err(Error::Data(format!(
                "corpus empty after filter: 0 of {} documents have at least {min_doc_len} bytes",
                self.docs.len()
            )));
        }
        kept.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let stream = kept
            .iter()
            .flat_map(|&d| self.docs[d].iter().map(move |&b| (b, d)));
        let mut out = Vec::new();
        let mut cur = PackedSequence {
            tokens: vec![BOS],
            doc_ids: vec![0],
        };
        for (b, d) in stream {
            if cur.tokens.len() == 1 {
                cur.doc_ids[0] = d;
            }
            cur.tokens.push(u32::from(b));
            cur.doc_ids.push(d);
            if cur.tokens.len() == t + 1 {
                out.push(std::mem::replace(
                    &mut cur,
                    PackedSequence {
                        tokens: vec![BOS],
                        doc_ids: vec![0],
                    },
                ));
            }
        }
        if out.is_empty() {
            return Err(Error::Data(format!(
                "corpus too small: {} bytes left after filter, need {t} per sequence",
                kept.iter().map(|&d| self.docs[d].len()).sum::<usize>()
            )));
        }
        Ok(out)
    }
}

/// Packs a corpus file. See [`Corpus::pack`].
pub fn ingest(
    path: &Path,
    delimiter: &str,
    min_doc_len: usize,
    t: usize,
    seed: u64,
) -> Result<Vec<PackedSequence>> {
    Corpus::load(path, delimiter)?.pack(min_doc_len, t, seed)
}

/// Splits off the last `fraction` of sequences (at least one) for held-out
/// evaluation.
pub fn split_holdout(
    mut seqs: Vec<PackedSequence>,
    fraction: f64,
) -> Result<(Vec<PackedSequence>, Vec<PackedSequence>)> {
    let n = seqs.len();
    let held = ((n as f64 * fraction).round() as usize).max(1);
    if held >= n {
        return Err(Error::Data(format!(
            "cannot hold out {held} of {n} sequences"
        )));
    }
    let test = seqs.split_off(n - held);
    Ok((seqs, test))
}

// ---- needle in a haystack ----------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NiahKind {
    Passkey,
    Number,
    Uuid,
}

impl NiahKind {
    pub const ALL: [NiahKind; 3] = [NiahKind::Passkey, NiahKind::Number, NiahKind::Uuid];

    pub fn name(&self) -> &'static str {
        match self {
            NiahKind::Passkey => "passkey",
            NiahKind::Number => "number",
            NiahKind::Uuid => "uuid",
        }
    }

    /// Sentence that introduces the needle value.
    pub fn key(&self) -> &'static str {
        match self {
            NiahKind::Passkey => "The pass key is ",
            NiahKind::Number => "One of the special magic numbers is ",
            NiahKind::Uuid => "One of the special magic uuids is ",
        }
    }

    fn question(&self) -> &'static str {
        match self {
            NiahKind::Passkey => " What is the pass key? ",
            NiahKind::Number => " What is the special magic number? ",
            NiahKind::Uuid => " What is the special magic uuid? ",
        }
    }

    fn value(&self, rng: &mut impl Rng) -> String {
        match self {
            NiahKind::Passkey => rng.gen_range(10_000..100_000u32).to_string(),
            NiahKind::Number => rng.gen_range(1_000_000..10_000_000u32).to_string(),
            NiahKind::Uuid => (0..32)
                .map(|_| char::from_digit(rng.gen_range(0..16), 16).unwrap())
                .collect(),
        }
    }
}

impl std::str::FromStr for NiahKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        NiahKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown needle kind {s:?}")))
    }
}

impl std::fmt::Display for NiahKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Filler free of digits, so numeric needles stay unique.
const FILLER: [&str; 8] = [
    "The grass is green and the sky is blue. ",
    "The sun is yellow and the river runs down to the sea. ",
    "Here we go, there and back again. ",
    "A quiet wind moves over the hills in the evening. ",
    "Birds sing in the old trees while the town sleeps. ",
    "The road bends past the mill and on toward the village. ",
    "Clouds gather slowly and then drift away again. ",
    "Nothing much happens here, and that is fine. ",
];

/// One retrieval task. All byte offsets count from the start of the
/// haystack; the prompt fed to a model is `BOS · haystack · query`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NiahInstance {
    pub kind: NiahKind,
    pub haystack: String,
    pub query: String,
    pub answer: String,
    /// Byte offset of the needle sentence in the haystack.
    pub position: usize,
}

impl NiahInstance {
    /// `BOS · haystack · query` as token ids.
    pub fn prompt(&self) -> Vec<u32> {
        let mut out = vec![BOS];
        out.extend(encode(&self.haystack));
        out.extend(encode(&self.query));
        out
    }

    pub fn answer_tokens(&self) -> Vec<u32> {
        encode(&self.answer)
    }

    /// Distance in tokens from the needle's value to the end of the prompt.
    pub fn needle_distance(&self) -> usize {
        self.haystack.len() + self.query.len() - (self.position + self.kind.key().len())
    }
}

fn filler(len: usize, rng: &mut impl Rng) -> String {
    let mut s = String::with_capacity(len + 64);
    while s.len() < len {
        s.push_str(FILLER[rng.gen_range(0..FILLER.len())]);
    }
    s.truncate(len);
    s
}

/// Generates an instance whose prompt, without BOS, is exactly
/// `haystack_len` bytes, with the needle at a uniformly drawn word
/// boundary.
pub fn gen_niah(kind: NiahKind, haystack_len: usize, seed: u64) -> Result<NiahInstance> {
    gen_niah_at(kind, haystack_len, seed, None)
}

/// As [`gen_niah`], but with `depth` in `[0, 1]` the needle goes to the last
/// word boundary at or before that fraction of the filler.
pub fn gen_niah_at(
    kind: NiahKind,
    haystack_len: usize,
    seed: u64,
    depth: Option<f64>,
) -> Result<NiahInstance> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let answer = kind.value(&mut rng);
    let needle = format!("{}{}. ", kind.key(), answer);
    let query = format!("{}{}", kind.question(), kind.key());
    let fixed = needle.len() + query.len();
    if haystack_len < fixed {
        return Err(Error::Data(format!(
            "haystack of {haystack_len} bytes cannot hold needle and query ({fixed})"
        )));
    }
    let fill = filler(haystack_len - fixed, &mut rng);
    let bounds: Vec<usize> = std::iter::once(0)
        .chain(
            fill.bytes()
                .enumerate()
                .filter(|&(_, b)| b == b' ')
                .map(|(i, _)| i + 1),
        )
        .chain(std::iter::once(fill.len()))
        .collect();
    let position = match depth {
        None => bounds[rng.gen_range(0..bounds.len())],
        Some(f) => {
            if !(0.0..=1.0).contains(&f) {
                return Err(Error::Config(format!("needle depth {f} outside [0, 1]")));
            }
            let target = (f * fill.len() as f64).floor() as usize;
            *bounds.iter().rev().find(|&&b| b <= target).unwrap_or(&0)
        }
    };
    let haystack = format!("{}{}{}", &fill[..position], needle, &fill[position..]);
    let inst = NiahInstance {
        kind,
        haystack,
        query,
        answer,
        position,
    };
    if inst.haystack.matches(&inst.answer).count() != 1 {
        return Err(Error::Data(format!(
            "needle value {} is not unique",
            inst.answer
        )));
    }
    Ok(inst)
}

/// Writes instances as JSON lines.
pub fn write_niah_jsonl(path: &Path, instances: &[NiahInstance]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for inst in instances {
        serde_json::to_writer(&mut f, inst)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_niah_jsonl(path: &Path) -> Result<Vec<NiahInstance>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}
