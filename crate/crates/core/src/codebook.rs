//! The shared codebook: 4096 words carrying 10 bits each.
//!
//! Both shims derive an identical table from a public frequency-ranked word
//! list and the secret channel key. Words are split into four groups of
//! 1024; within a group each word stands for one 10-bit value, so any value
//! can be voiced by four different words and repeated chunks need not repeat
//! words on the wire.
//!
//! Construction pipeline, applied in order to the input list:
//!
//! 1. drop entries tagged `other` (only nouns, verbs, adjectives, adverbs
//!    and quantifiers carry data)
//! 2. drop homographs: any spelling that occurs more than once in the input
//! 3. keep the 4096 survivors with the lowest rank numbers
//! 4. group = position mod 4, positions counted in rank order from 0
//! 5. within each group, assign values by a [`SplitMix64`]-driven
//!    Fisher-Yates shuffle seeded with the channel key; the four groups draw
//!    from one shared stream in group order

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

use rand::RngCore;

use crate::digest::DigestAlg;
use crate::rng::{shuffle, SplitMix64};

/// Number of word groups.
pub const GROUPS: usize = 4;
/// Words per group; one word per 10-bit value.
pub const GROUP_SIZE: usize = 1024;
/// Total table size.
pub const WORD_COUNT: usize = GROUPS * GROUP_SIZE;

const HEADER_PREFIX: &str = "# stegsuggest-codebook";

// ----- input types -----

/// Part-of-speech tag attached to each word-list entry.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pos {
    Noun,
    Verb,
    Adjective,
    Adverb,
    Quantifier,
    /// Anything else; filtered out during construction.
    Other,
}

impl Pos {
    pub fn as_str(self) -> &'static str {
        match self {
            Pos::Noun => "noun",
            Pos::Verb => "verb",
            Pos::Adjective => "adjective",
            Pos::Adverb => "adverb",
            Pos::Quantifier => "quantifier",
            Pos::Other => "other",
        }
    }

    pub fn from_str(s: &str) -> Option<Self> {
        match s {
            "noun" => Some(Pos::Noun),
            "verb" => Some(Pos::Verb),
            "adjective" => Some(Pos::Adjective),
            "adverb" => Some(Pos::Adverb),
            "quantifier" => Some(Pos::Quantifier),
            "other" => Some(Pos::Other),
            _ => None,
        }
    }
}

/// One line of the input frequency list.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WordEntry {
    /// Frequency rank; 1 is the most frequent. Unique within a list.
    pub rank: u32,
    pub word: String,
    pub pos: Pos,
}

/// The 64-bit secret shared by the two shims.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ChannelKey(pub u64);

/// Survivor counts after each construction step.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BuildStats {
    pub input: usize,
    pub after_pos_filter: usize,
    pub after_homograph_filter: usize,
    pub selected: usize,
}

// ----- errors -----

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum CodebookError {
    /// Fewer than 4096 words survived filtering.
    InsufficientWords { survivors: usize },
    /// The input list repeats a rank number.
    DuplicateRank { rank: u32 },
    /// A word handed to `decode_word` is not in the table.
    UnknownWord(String),
    /// A serialized codebook or word list failed structural checks.
    MalformedFile { line: usize, reason: String },
    /// The codebook header fingerprint does not match the supplied key.
    KeyMismatch,
}

impl fmt::Display for CodebookError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CodebookError::InsufficientWords { survivors } => write!(
                f,
                "only {survivors} words survived filtering; {WORD_COUNT} required"
            ),
            CodebookError::DuplicateRank { rank } => {
                write!(f, "rank {rank} appears more than once in the word list")
            }
            CodebookError::UnknownWord(w) => write!(f, "word {w:?} is not in the codebook"),
            CodebookError::MalformedFile { line, reason } => {
                write!(f, "malformed file at line {line}: {reason}")
            }
            CodebookError::KeyMismatch => {
                write!(f, "codebook fingerprint does not match the supplied key")
            }
        }
    }
}

impl core::error::Error for CodebookError {}

// ----- the codebook -----

/// Bijective word table: `(group, value) -> word` and back.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Codebook {
    digest: DigestAlg,
    fingerprint: String,
    /// `words[g][v]` is the word for value `v` in group `g`.
    words: [Vec<String>; GROUPS],
    /// Reverse map: word -> (value, group).
    lookup: BTreeMap<String, (u16, u8)>,
}

/// Hex of the first 8 digest bytes over the big-endian key.
pub fn key_fingerprint(digest: DigestAlg, key: ChannelKey) -> String {
    let d = digest.digest(&key.0.to_be_bytes());
    let mut out = String::with_capacity(16);
    for b in &d[..8] {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

impl Codebook {
    /// Builds the table from a frequency list and the channel key, using the
    /// default SHA-1 fingerprint.
    pub fn build(words: &[WordEntry], key: ChannelKey) -> Result<Self, CodebookError> {
        Self::build_with_stats(words, key, DigestAlg::Sha1).map(|(cb, _)| cb)
    }

    /// As [`Codebook::build`], also reporting survivor counts per step.
    pub fn build_with_stats(
        words: &[WordEntry],
        key: ChannelKey,
        digest: DigestAlg,
    ) -> Result<(Self, BuildStats), CodebookError> {
        let mut ranks_seen = BTreeMap::new();
        for e in words {
            if ranks_seen.insert(e.rank, ()).is_some() {
                return Err(CodebookError::DuplicateRank { rank: e.rank });
            }
        }

        let mut spelling_counts: BTreeMap<&str, u32> = BTreeMap::new();
        for e in words {
            *spelling_counts.entry(e.word.as_str()).or_insert(0) += 1;
        }

        let after_pos: Vec<&WordEntry> = words.iter().filter(|e| e.pos != Pos::Other).collect();
        let mut kept: Vec<&WordEntry> = after_pos
            .iter()
            .copied()
            .filter(|e| spelling_counts[e.word.as_str()] == 1)
            .collect();
        let after_homograph = kept.len();

        if kept.len() < WORD_COUNT {
            return Err(CodebookError::InsufficientWords {
                survivors: kept.len(),
            });
        }
        kept.sort_by_key(|e| e.rank);
        kept.truncate(WORD_COUNT);

        // Step 4: deal words into groups round-robin by rank position.
        let mut group_words: [Vec<&str>; GROUPS] = Default::default();
        for (pos, e) in kept.iter().enumerate() {
            group_words[pos % GROUPS].push(e.word.as_str());
        }

        // Step 5: one shared key-seeded stream, groups shuffled in order.
        let mut rng = SplitMix64::new(key.0);
        let mut words_by_value: [Vec<String>; GROUPS] = Default::default();
        for g in 0..GROUPS {
            let mut perm: Vec<u16> = (0..GROUP_SIZE as u16).collect();
            shuffle(&mut perm, &mut rng);
            let mut table = alloc::vec![String::new(); GROUP_SIZE];
            for (i, w) in group_words[g].iter().enumerate() {
                table[perm[i] as usize] = w.to_string();
            }
            words_by_value[g] = table;
        }

        let stats = BuildStats {
            input: words.len(),
            after_pos_filter: after_pos.len(),
            after_homograph_filter: after_homograph,
            selected: WORD_COUNT,
        };
        let cb = Self::from_parts(digest, key_fingerprint(digest, key), words_by_value)?;
        Ok((cb, stats))
    }

    fn from_parts(
        digest: DigestAlg,
        fingerprint: String,
        words: [Vec<String>; GROUPS],
    ) -> Result<Self, CodebookError> {
        let mut lookup = BTreeMap::new();
        for (g, group) in words.iter().enumerate() {
            debug_assert_eq!(group.len(), GROUP_SIZE);
            for (v, w) in group.iter().enumerate() {
                if lookup.insert(w.clone(), (v as u16, g as u8)).is_some() {
                    return Err(CodebookError::MalformedFile {
                        line: 0,
                        reason: format!("word {w:?} assigned twice"),
                    });
                }
            }
        }
        Ok(Codebook {
            digest,
            fingerprint,
            words,
            lookup,
        })
    }

    pub fn digest(&self) -> DigestAlg {
        self.digest
    }

    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    /// The word for `value` in `group`. Panics if either is out of range.
    pub fn word(&self, group: u8, value: u16) -> &str {
        &self.words[group as usize][value as usize]
    }

    /// Encodes a 10-bit value as a word from a uniformly drawn group.
    ///
    /// Panics if `value >= 1024`; chunk extraction upstream guarantees the
    /// range.
    pub fn encode_chunk(&self, value: u16, rng: &mut impl RngCore) -> &str {
        assert!((value as usize) < GROUP_SIZE, "chunk value out of range");
        let group = (rng.next_u32() % GROUPS as u32) as u8;
        self.word(group, value)
    }

    /// Maps a word back to its `(value, group)` pair.
    pub fn decode_word(&self, word: &str) -> Result<(u16, u8), CodebookError> {
        self.lookup
            .get(word)
            .copied()
            .ok_or_else(|| CodebookError::UnknownWord(word.to_string()))
    }

    pub fn contains(&self, word: &str) -> bool {
        self.lookup.contains_key(word)
    }

    /// Serializes to the interchange format: one header line, then
    /// `group<TAB>value<TAB>word` lines sorted by group and value.
    pub fn to_text(&self) -> String {
        let mut out = format!(
            "{HEADER_PREFIX} digest={} fingerprint={}\n",
            self.digest.as_str(),
            self.fingerprint
        );
        for (g, group) in self.words.iter().enumerate() {
            for (v, w) in group.iter().enumerate() {
                out.push_str(&format!("{g}\t{v}\t{w}\n"));
            }
        }
        out
    }

    /// Parses and structurally validates the interchange format.
    ///
    /// Checks the header, exactly 4096 records, full coverage of every
    /// `(group, value)` slot, and pairwise-distinct words. Key agreement is
    /// a separate step; see [`Codebook::verify_key`].
    pub fn from_text(text: &str) -> Result<Self, CodebookError> {
        let malformed = |line: usize, reason: &str| CodebookError::MalformedFile {
            line,
            reason: reason.to_string(),
        };

        let mut lines = text.lines().enumerate();
        let (_, header) = lines
            .next()
            .ok_or_else(|| malformed(1, "empty codebook file"))?;
        let rest = header
            .strip_prefix(HEADER_PREFIX)
            .ok_or_else(|| malformed(1, "missing codebook header"))?;
        let mut digest = None;
        let mut fingerprint = None;
        for field in rest.split_whitespace() {
            if let Some(v) = field.strip_prefix("digest=") {
                digest = DigestAlg::from_str(v);
                if digest.is_none() {
                    return Err(malformed(1, "unknown digest algorithm"));
                }
            } else if let Some(v) = field.strip_prefix("fingerprint=") {
                fingerprint = Some(v.to_string());
            }
        }
        let digest = digest.ok_or_else(|| malformed(1, "header lacks digest field"))?;
        let fingerprint = fingerprint.ok_or_else(|| malformed(1, "header lacks fingerprint"))?;

        let mut words: [Vec<String>; GROUPS] =
            core::array::from_fn(|_| alloc::vec![String::new(); GROUP_SIZE]);
        let mut filled = [[false; GROUP_SIZE]; GROUPS];
        let mut records = 0usize;
        for (idx, line) in lines {
            let lineno = idx + 1;
            if line.is_empty() {
                continue;
            }
            let mut parts = line.split('\t');
            let (g, v, w) = match (parts.next(), parts.next(), parts.next(), parts.next()) {
                (Some(g), Some(v), Some(w), None) => (g, v, w),
                _ => return Err(malformed(lineno, "expected group<TAB>value<TAB>word")),
            };
            let g: usize = g
                .parse()
                .map_err(|_| malformed(lineno, "bad group number"))?;
            let v: usize = v
                .parse()
                .map_err(|_| malformed(lineno, "bad value number"))?;
            if g >= GROUPS || v >= GROUP_SIZE {
                return Err(malformed(lineno, "group or value out of range"));
            }
            if filled[g][v] {
                return Err(malformed(lineno, "duplicate (group, value) slot"));
            }
            if w.is_empty() {
                return Err(malformed(lineno, "empty word"));
            }
            filled[g][v] = true;
            words[g][v] = w.to_string();
            records += 1;
        }
        if records != WORD_COUNT {
            return Err(malformed(
                0,
                &format!("expected {WORD_COUNT} records, found {records}"),
            ));
        }

        Self::from_parts(digest, fingerprint, words)
    }

    /// Confirms the header fingerprint was produced by `key`.
    pub fn verify_key(&self, key: ChannelKey) -> Result<(), CodebookError> {
        if key_fingerprint(self.digest, key) == self.fingerprint {
            Ok(())
        } else {
            Err(CodebookError::KeyMismatch)
        }
    }
}

/// Parses a word list in `rank<TAB>word<TAB>pos` line format.
pub fn parse_word_list(text: &str) -> Result<Vec<WordEntry>, CodebookError> {
    let mut out = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let lineno = idx + 1;
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let malformed = |reason: &str| CodebookError::MalformedFile {
            line: lineno,
            reason: reason.to_string(),
        };
        let mut parts = line.split('\t');
        let (rank, word, pos) = match (parts.next(), parts.next(), parts.next(), parts.next()) {
            (Some(r), Some(w), Some(p), None) => (r, w, p),
            _ => return Err(malformed("expected rank<TAB>word<TAB>pos")),
        };
        let rank: u32 = rank.parse().map_err(|_| malformed("bad rank"))?;
        let pos = Pos::from_str(pos).ok_or_else(|| malformed("unknown part of speech"))?;
        if word.is_empty() || word.contains(char::is_whitespace) {
            return Err(malformed("word must be a single non-empty token"));
        }
        out.push(WordEntry {
            rank,
            word: word.to_string(),
            pos,
        });
    }
    Ok(out)
}
