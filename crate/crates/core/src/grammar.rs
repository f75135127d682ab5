//! The seven-dimension action-plan grammar.
//!
//! A plan is an ordered chain of seven photographic decisions, each wrapped in
//! its own pair of reserved delimiter tokens:
//!
//! ```text
//! <d1> ratio-4:3 </d1> <d2> rule-of-thirds </d2> ... <d7> warm-tone </d7>
//! ```
//!
//! Nothing may appear outside a delimited segment, every dimension appears
//! exactly once, and dimensions appear in the fixed order 1 -> 7. Segment
//! content may be empty.

use std::collections::HashMap;
use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Number of plan dimensions.
pub const NUM_DIMENSIONS: usize = 7;

/// Number of reserved delimiter tokens (open/close per dimension).
pub const NUM_DELIMITERS: usize = 2 * NUM_DIMENSIONS;

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenId(pub u32);

impl TokenId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for TokenId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

/// One of the seven ordered photographic decisions.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Dimension {
    AspectRatio,
    FramingComposition,
    CameraViewpoint,
    SubjectPlacement,
    SubjectPose,
    FocusDepth,
    ColorLight,
}

impl Dimension {
    pub const ALL: [Dimension; NUM_DIMENSIONS] = [
        Dimension::AspectRatio,
        Dimension::FramingComposition,
        Dimension::CameraViewpoint,
        Dimension::SubjectPlacement,
        Dimension::SubjectPose,
        Dimension::FocusDepth,
        Dimension::ColorLight,
    ];

    /// 1-based position in the decision chain.
    pub fn index(self) -> usize {
        self as usize + 1
    }

    pub fn from_index(k: usize) -> Option<Dimension> {
        k.checked_sub(1).and_then(|i| Self::ALL.get(i).copied())
    }

    pub fn name(self) -> &'static str {
        match self {
            Dimension::AspectRatio => "aspect ratio",
            Dimension::FramingComposition => "framing and composition",
            Dimension::CameraViewpoint => "camera viewpoint",
            Dimension::SubjectPlacement => "subject placement",
            Dimension::SubjectPose => "subject pose and action details",
            Dimension::FocusDepth => "focus and depth-of-field",
            Dimension::ColorLight => "color and light",
        }
    }

    pub fn open_text(self) -> String {
        format!("<d{}>", self.index())
    }

    pub fn close_text(self) -> String {
        format!("</d{}>", self.index())
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum Delimiter {
    Open(Dimension),
    Close(Dimension),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum VocabError {
    #[error("duplicate token {0:?}")]
    Duplicate(String),
    #[error("content token {0:?} collides with a reserved delimiter")]
    ReservedCollision(String),
    #[error("invalid token text {0:?}: tokens must be non-empty and contain no whitespace")]
    InvalidText(String),
    #[error("unknown token {0:?}")]
    UnknownToken(String),
}

/// Token inventory: 14 reserved delimiters at ids `0..14`, content tokens after.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl Vocabulary {
    pub fn new<I, S>(content: I) -> Result<Self, VocabError>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut tokens = Vec::new();
        for d in Dimension::ALL {
            tokens.push(d.open_text());
            tokens.push(d.close_text());
        }
        let mut index: HashMap<String, TokenId> = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), TokenId(i as u32)))
            .collect();
        for tok in content {
            let tok = tok.into();
            if tok.is_empty() || tok.chars().any(char::is_whitespace) {
                return Err(VocabError::InvalidText(tok));
            }
            if let Some(id) = index.get(&tok) {
                return Err(if id.index() < NUM_DELIMITERS {
                    VocabError::ReservedCollision(tok)
                } else {
                    VocabError::Duplicate(tok)
                });
            }
            index.insert(tok.clone(), TokenId(tokens.len() as u32));
            tokens.push(tok);
        }
        Ok(Self { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn open(&self, d: Dimension) -> TokenId {
        TokenId(2 * (d.index() as u32 - 1))
    }

    pub fn close(&self, d: Dimension) -> TokenId {
        TokenId(2 * (d.index() as u32 - 1) + 1)
    }

    /// The token that terminates generation of a plan.
    pub fn end_token(&self) -> TokenId {
        self.close(Dimension::ColorLight)
    }

    pub fn delimiter(&self, t: TokenId) -> Option<Delimiter> {
        let i = t.index();
        if i >= NUM_DELIMITERS {
            return None;
        }
        let d = Dimension::ALL[i / 2];
        Some(if i.is_multiple_of(2) {
            Delimiter::Open(d)
        } else {
            Delimiter::Close(d)
        })
    }

    pub fn is_delimiter(&self, t: TokenId) -> bool {
        t.index() < NUM_DELIMITERS
    }

    pub fn contains(&self, t: TokenId) -> bool {
        t.index() < self.tokens.len()
    }

    pub fn text(&self, t: TokenId) -> Option<&str> {
        self.tokens.get(t.index()).map(String::as_str)
    }

    pub fn id(&self, text: &str) -> Option<TokenId> {
        self.index.get(text).copied()
    }

    pub fn content_ids(&self) -> impl Iterator<Item = TokenId> + '_ {
        (NUM_DELIMITERS..self.tokens.len()).map(|i| TokenId(i as u32))
    }

    /// SHA-256 over the ordered token list; checkpoints record it so a
    /// policy can't be loaded against a different vocabulary.
    pub fn fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        for t in &self.tokens {
            hasher.update(t.as_bytes());
            hasher.update([0u8]);
        }
        hex_digest(&hasher.finalize())
    }

    /// Parses the line-oriented text form (tokens separated by whitespace).
    pub fn encode_line(&self, line: &str) -> Result<Vec<TokenId>, VocabError> {
        line.split_whitespace()
            .map(|w| self.id(w).ok_or_else(|| VocabError::UnknownToken(w.to_string())))
            .collect()
    }

    pub fn render(&self, tokens: &[TokenId]) -> String {
        tokens
            .iter()
            .map(|&t| self.text(t).map(str::to_string).unwrap_or_else(|| t.to_string()))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

pub(crate) fn hex_digest(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Segment {
    pub dimension: Dimension,
    pub content: Vec<TokenId>,
}

/// A parsed, valid plan: exactly one segment per dimension, in order.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ActionPlan {
    segments: Vec<Segment>,
    raw_tokens: Vec<TokenId>,
}

impl ActionPlan {
    /// Builds a plan from per-dimension contents (index 0 is dimension 1).
    pub fn from_contents(vocab: &Vocabulary, contents: [Vec<TokenId>; NUM_DIMENSIONS]) -> Result<Self, ParseError> {
        let mut raw = Vec::new();
        for (d, content) in Dimension::ALL.into_iter().zip(contents.iter()) {
            raw.push(vocab.open(d));
            raw.extend_from_slice(content);
            raw.push(vocab.close(d));
        }
        parse_action_plan(&raw, vocab)
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn segment(&self, d: Dimension) -> &Segment {
        &self.segments[d.index() - 1]
    }

    pub fn raw_tokens(&self) -> &[TokenId] {
        &self.raw_tokens
    }

    pub fn content_tokens(&self) -> impl Iterator<Item = TokenId> + '_ {
        self.segments.iter().flat_map(|s| s.content.iter().copied())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum ParseError {
    #[error("dimension {0} is missing")]
    MissingDimension(usize),
    #[error("dimension {0} appears where dimension {1} was expected")]
    OutOfOrder(usize, usize),
    #[error("unbalanced delimiter at position {0}")]
    UnbalancedDelimiter(usize),
    #[error("token outside any segment at position {0}")]
    StrayToken(usize),
    #[error("dimension {0} appears twice")]
    DuplicateDimension(usize),
    #[error("token id at position {0} is not in the vocabulary")]
    UnknownToken(usize),
}

/// Parses a token sequence into an [`ActionPlan`], reporting the first
/// violation found scanning left to right.
pub fn parse_action_plan(tokens: &[TokenId], vocab: &Vocabulary) -> Result<ActionPlan, ParseError> {
    let mut segments = Vec::with_capacity(NUM_DIMENSIONS);
    let mut seen = [false; NUM_DIMENSIONS + 1];
    let mut expected = 1usize;
    let mut i = 0usize;

    while i < tokens.len() {
        let t = tokens[i];
        if !vocab.contains(t) {
            return Err(ParseError::UnknownToken(i));
        }
        let d = match vocab.delimiter(t) {
            None => return Err(ParseError::StrayToken(i)),
            Some(Delimiter::Close(_)) => return Err(ParseError::UnbalancedDelimiter(i)),
            Some(Delimiter::Open(d)) => d,
        };
        let k = d.index();
        if seen[k] {
            return Err(ParseError::DuplicateDimension(k));
        }
        if k != expected {
            // A dimension that never shows up is "missing"; one that shows up
            // later is merely out of order.
            let later = tokens[i + 1..]
                .iter()
                .any(|&u| vocab.delimiter(u) == Some(Delimiter::Open(Dimension::ALL[expected - 1])));
            return Err(if later {
                ParseError::OutOfOrder(k, expected)
            } else {
                ParseError::MissingDimension(expected)
            });
        }

        let mut j = i + 1;
        while j < tokens.len() && vocab.contains(tokens[j]) && !vocab.is_delimiter(tokens[j]) {
            j += 1;
        }
        if j == tokens.len() {
            return Err(ParseError::UnbalancedDelimiter(i));
        }
        if !vocab.contains(tokens[j]) {
            return Err(ParseError::UnknownToken(j));
        }
        if tokens[j] != vocab.close(d) {
            return Err(ParseError::UnbalancedDelimiter(j));
        }
        segments.push(Segment {
            dimension: d,
            content: tokens[i + 1..j].to_vec(),
        });
        seen[k] = true;
        expected += 1;
        i = j + 1;
    }

    if expected <= NUM_DIMENSIONS {
        return Err(ParseError::MissingDimension(expected));
    }
    Ok(ActionPlan {
        segments,
        raw_tokens: tokens.to_vec(),
    })
}

pub fn serialize_action_plan(plan: &ActionPlan) -> Vec<TokenId> {
    plan.raw_tokens.clone()
}

/// Binary format reward: 1 iff the sequence is a complete, strictly ordered plan.
pub fn format_reward(tokens: &[TokenId], vocab: &Vocabulary) -> u8 {
    u8::from(parse_action_plan(tokens, vocab).is_ok())
}

/// Re-serializes the plan's segments in a seeded non-identity permutation.
pub fn shuffle_dimensions(plan: &ActionPlan, vocab: &Vocabulary, seed: u64) -> Vec<TokenId> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let identity: Vec<usize> = (0..NUM_DIMENSIONS).collect();
    let mut order = identity.clone();
    while order == identity {
        order.shuffle(&mut rng);
    }
    let mut out = Vec::with_capacity(plan.raw_tokens.len());
    for i in order {
        let seg = &plan.segments[i];
        out.push(vocab.open(seg.dimension));
        out.extend_from_slice(&seg.content);
        out.push(vocab.close(seg.dimension));
    }
    out
}

/// A delimited segment recovered from a possibly malformed sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LooseSegment {
    pub dimension: Dimension,
    pub content: Vec<TokenId>,
    pub closed: bool,
}

/// Best-effort segment extraction in order of appearance. Content outside
/// segments is ignored; a segment ends at the next delimiter of any kind.
pub fn loose_segments(tokens: &[TokenId], vocab: &Vocabulary) -> Vec<LooseSegment> {
    let mut out = Vec::new();
    let mut current: Option<LooseSegment> = None;
    for &t in tokens.iter().filter(|t| vocab.contains(**t)) {
        match vocab.delimiter(t) {
            None => {
                if let Some(seg) = current.as_mut() {
                    seg.content.push(t);
                }
            }
            Some(Delimiter::Open(d)) => {
                if let Some(seg) = current.take() {
                    out.push(seg);
                }
                current = Some(LooseSegment {
                    dimension: d,
                    content: Vec::new(),
                    closed: false,
                });
            }
            Some(Delimiter::Close(d)) => {
                if let Some(mut seg) = current.take() {
                    seg.closed = seg.dimension == d;
                    out.push(seg);
                }
            }
        }
    }
    out.extend(current);
    out
}

/// `{dimension_index, content}` record used inside corpus JSONL and the
/// remote oracle protocol.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentRecord {
    pub dimension_index: usize,
    pub content: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PlanRecord(pub Vec<SegmentRecord>);

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PlanRecordError {
    #[error(transparent)]
    Vocab(#[from] VocabError),
    #[error("invalid dimension index {0}")]
    BadDimension(usize),
    #[error(transparent)]
    Parse(#[from] ParseError),
}

impl PlanRecord {
    pub fn from_plan(plan: &ActionPlan, vocab: &Vocabulary) -> Self {
        Self::from_segments(plan.segments.iter().map(|s| (s.dimension, s.content.as_slice())), vocab)
    }

    /// Record for an arbitrary (possibly invalid) token sequence, built from
    /// its loose segments.
    pub fn from_tokens(tokens: &[TokenId], vocab: &Vocabulary) -> Self {
        let segs = loose_segments(tokens, vocab);
        Self::from_segments(segs.iter().map(|s| (s.dimension, s.content.as_slice())), vocab)
    }

    fn from_segments<'a>(segs: impl Iterator<Item = (Dimension, &'a [TokenId])>, vocab: &Vocabulary) -> Self {
        PlanRecord(
            segs.map(|(d, content)| SegmentRecord {
                dimension_index: d.index(),
                content: content
                    .iter()
                    .map(|&t| vocab.text(t).unwrap_or_default().to_string())
                    .collect(),
            })
            .collect(),
        )
    }

    /// Serializes the record's segments in the order stored, then parses.
    pub fn to_tokens(&self, vocab: &Vocabulary) -> Result<Vec<TokenId>, PlanRecordError> {
        let mut out = Vec::new();
        for seg in &self.0 {
            let d =
                Dimension::from_index(seg.dimension_index).ok_or(PlanRecordError::BadDimension(seg.dimension_index))?;
            out.push(vocab.open(d));
            for w in &seg.content {
                let id = vocab.id(w).ok_or_else(|| VocabError::UnknownToken(w.clone()))?;
                if vocab.is_delimiter(id) {
                    return Err(VocabError::ReservedCollision(w.clone()).into());
                }
                out.push(id);
            }
            out.push(vocab.close(d));
        }
        Ok(out)
    }

    pub fn to_plan(&self, vocab: &Vocabulary) -> Result<ActionPlan, PlanRecordError> {
        let tokens = self.to_tokens(vocab)?;
        Ok(parse_action_plan(&tokens, vocab)?)
    }
}
