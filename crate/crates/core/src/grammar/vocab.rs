use std::collections::HashMap;
use std::fmt;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::SequenceError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TokenId(pub u32);

impl TokenId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

/// The six communication tokens.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CommToken {
    ObjOpen,
    ObjClose,
    Visual,
    Box,
    Previsual,
    Prebox,
}

impl CommToken {
    pub const ALL: [CommToken; 6] = [
        CommToken::ObjOpen,
        CommToken::ObjClose,
        CommToken::Visual,
        CommToken::Box,
        CommToken::Previsual,
        CommToken::Prebox,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            CommToken::ObjOpen => "<obj>",
            CommToken::ObjClose => "</obj>",
            CommToken::Visual => "<visual>",
            CommToken::Box => "<box>",
            CommToken::Previsual => "<previsual>",
            CommToken::Prebox => "<prebox>",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|t| t.as_str() == s)
    }
}

impl fmt::Display for CommToken {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

pub const PAD: &str = "<pad>";
pub const BOS: &str = "<bos>";
pub const EOS: &str = "<eos>";

pub const COLORS: [&str; 4] = ["red", "green", "blue", "yellow"];
pub const SHAPES: [&str; 3] = ["circle", "square", "triangle"];

/// Words of the synthetic micro-world: scene captions, question templates,
/// and the probe phrases used by evaluation.
pub const SYNTHETIC_WORDS: &[&str] = &[
    "the", "a", "is", "not", "of", "and", "there", "object", "thing",
    "red", "green", "blue", "yellow",
    "circle", "square", "triangle",
    "left", "right", "above", "below", "on",
    "question", "short", "answer", "what", "color", "shape", "where", "which",
    "image", "picture", "in", "to",
    ":", "?", ".", ",",
];

/// Closed word-level vocabulary. Special tokens occupy the lowest ids, words
/// follow in insertion order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
    num_special: usize,
}

impl From<Vec<String>> for Vocab {
    fn from(words: Vec<String>) -> Self {
        Self::new(&words)
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.words().map(str::to_string).collect()
    }
}

/// A token of a caption with its byte range in the original text.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawToken {
    pub text: String,
    pub range: Range<usize>,
}

impl Vocab {
    pub fn new<S: AsRef<str>>(words: &[S]) -> Self {
        let mut tokens: Vec<String> = vec![PAD.into(), BOS.into(), EOS.into()];
        tokens.extend(CommToken::ALL.iter().map(|t| t.as_str().to_string()));
        let num_special = tokens.len();
        for w in words {
            let w = w.as_ref().to_lowercase();
            if !tokens.contains(&w) {
                tokens.push(w);
            }
        }
        let mut v = Self { tokens, index: HashMap::new(), num_special };
        v.rebuild_index();
        v
    }

    pub fn synthetic() -> Self {
        Self::new(SYNTHETIC_WORDS)
    }

    fn rebuild_index(&mut self) {
        self.index = self.tokens.iter().enumerate().map(|(i, t)| (t.clone(), TokenId(i as u32))).collect();
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub const PAD_ID: usize = 0;
    pub const BOS_ID: usize = 1;
    pub const EOS_ID: usize = 2;

    pub fn pad(&self) -> TokenId {
        TokenId(Self::PAD_ID as u32)
    }

    pub fn bos(&self) -> TokenId {
        TokenId(Self::BOS_ID as u32)
    }

    pub fn eos(&self) -> TokenId {
        TokenId(Self::EOS_ID as u32)
    }

    /// Id of a communication token; identical in every vocabulary.
    pub fn comm_id(t: CommToken) -> TokenId {
        let pos = CommToken::ALL.iter().position(|&x| x == t).expect("listed");
        TokenId(3 + pos as u32)
    }

    pub fn comm(&self, t: CommToken) -> TokenId {
        Self::comm_id(t)
    }

    pub fn comm_of(&self, id: TokenId) -> Option<CommToken> {
        let i = id.index();
        (3..3 + CommToken::ALL.len()).contains(&i).then(|| CommToken::ALL[i - 3])
    }

    pub fn is_word(&self, id: TokenId) -> bool {
        id.index() >= self.num_special && id.index() < self.tokens.len()
    }

    pub fn word_ids(&self) -> impl Iterator<Item = TokenId> + '_ {
        (self.num_special..self.tokens.len()).map(|i| TokenId(i as u32))
    }

    pub fn words(&self) -> impl Iterator<Item = &str> {
        self.tokens[self.num_special..].iter().map(|s| s.as_str())
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn word_id(&self, word: &str) -> Result<TokenId, SequenceError> {
        let lower = word.to_lowercase();
        match self.id(&lower) {
            Some(id) if self.is_word(id) => Ok(id),
            _ => Err(SequenceError::UnknownWord(word.to_string())),
        }
    }

    pub fn token(&self, id: TokenId) -> &str {
        &self.tokens[id.index()]
    }

    /// Splits on whitespace and detaches `:`, `?`, `.`, `,` from adjoining
    /// words. Ranges are byte offsets into `text`.
    pub fn tokenize(text: &str) -> Vec<RawToken> {
        let mut out = Vec::new();
        let mut start: Option<usize> = None;
        let flush = |out: &mut Vec<RawToken>, s: usize, e: usize| {
            if e > s {
                out.push(RawToken { text: text[s..e].to_lowercase(), range: s..e });
            }
        };
        for (i, ch) in text.char_indices() {
            if ch.is_whitespace() {
                if let Some(s) = start.take() {
                    flush(&mut out, s, i);
                }
            } else if matches!(ch, ':' | '?' | '.' | ',') {
                if let Some(s) = start.take() {
                    flush(&mut out, s, i);
                }
                flush(&mut out, i, i + ch.len_utf8());
            } else if start.is_none() {
                start = Some(i);
            }
        }
        if let Some(s) = start {
            flush(&mut out, s, text.len());
        }
        out
    }

    pub fn encode(&self, text: &str) -> Result<Vec<TokenId>, SequenceError> {
        Self::tokenize(text).iter().map(|t| self.word_id(&t.text)).collect()
    }

    pub fn decode(&self, ids: &[TokenId]) -> String {
        ids.iter().map(|&id| self.token(id)).collect::<Vec<_>>().join(" ")
    }
}
