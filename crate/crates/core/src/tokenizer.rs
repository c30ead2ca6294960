//! Word-unigram, word-bigram and character-trigram vocabularies sharing one
//! contiguous id space, plus the tokenizer that maps text onto them.

use std::collections::HashMap;
use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use unicode_normalization::UnicodeNormalization;

use crate::error::{Error, Result};

pub type TokenId = u32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TokenKind {
    Unigram,
    Bigram,
    Trigram,
}

impl fmt::Display for TokenKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TokenKind::Unigram => "unigram",
            TokenKind::Bigram => "bigram",
            TokenKind::Trigram => "trigram",
        })
    }
}

impl FromStr for TokenKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "unigram" => Ok(TokenKind::Unigram),
            "bigram" => Ok(TokenKind::Bigram),
            "trigram" => Ok(TokenKind::Trigram),
            other => Err(Error::format(format!("unknown token kind {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VocabCaps {
    pub unigrams: usize,
    pub bigrams: usize,
    pub trigrams: usize,
}

impl VocabCaps {
    pub fn new(unigrams: usize, bigrams: usize, trigrams: usize) -> Self {
        Self {
            unigrams,
            bigrams,
            trigrams,
        }
    }
}

impl Default for VocabCaps {
    fn default() -> Self {
        Self::new(8_000, 16_000, 8_000)
    }
}

impl FromStr for VocabCaps {
    type Err = Error;

    /// Parses `"u,b,t"`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(',').map(str::trim).collect();
        if parts.len() != 3 {
            return Err(Error::invalid(format!("caps must be u,b,t; got {s:?}")));
        }
        let p = |x: &str| x.parse::<usize>().map_err(|e| Error::invalid(format!("bad cap {x:?}: {e}")));
        Ok(Self::new(p(parts[0])?, p(parts[1])?, p(parts[2])?))
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct VocabularyBundle {
    unigrams: HashMap<String, TokenId>,
    bigrams: HashMap<String, TokenId>,
    trigrams: HashMap<String, TokenId>,
    /// `tokens[id]` is the token string and its kind.
    tokens: Vec<(String, TokenKind)>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TokenizedText {
    pub ids: Vec<TokenId>,
}

impl TokenizedText {
    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }
}

/// Lowercased, NFC-normalized words with leading/trailing punctuation removed.
pub fn normalize_words(text: &str) -> Vec<String> {
    let normalized: String = text.nfc().collect::<String>().to_lowercase();
    normalized
        .split_whitespace()
        .map(|w| w.trim_matches(|c: char| !c.is_alphanumeric()).to_string())
        .filter(|w| !w.is_empty())
        .collect()
}

/// `#`-padded character trigrams of one word: "red" -> #re, red, ed#.
pub fn char_trigrams(word: &str) -> Vec<String> {
    let chars: Vec<char> = std::iter::once('#').chain(word.chars()).chain(std::iter::once('#')).collect();
    chars.windows(3).map(|w| w.iter().collect()).collect()
}

fn bigrams(words: &[String]) -> impl Iterator<Item = String> + '_ {
    words.windows(2).map(|w| format!("{} {}", w[0], w[1]))
}

fn top_k(counts: HashMap<String, u64>, cap: usize) -> Vec<String> {
    let mut v: Vec<(String, u64)> = counts.into_iter().collect();
    v.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    v.truncate(cap);
    v.into_iter().map(|(t, _)| t).collect()
}

impl VocabularyBundle {
    /// Keeps the most frequent tokens of each kind up to its cap; frequency
    /// ties are broken by the token string so the result is deterministic.
    pub fn build<'a, I>(corpus: I, caps: VocabCaps) -> Result<Self>
    where
        I: IntoIterator<Item = &'a str>,
    {
        let mut uni: HashMap<String, u64> = HashMap::new();
        let mut bi: HashMap<String, u64> = HashMap::new();
        let mut tri: HashMap<String, u64> = HashMap::new();
        let mut docs = 0usize;
        for text in corpus {
            docs += 1;
            let words = normalize_words(text);
            for w in &words {
                *uni.entry(w.clone()).or_default() += 1;
                for t in char_trigrams(w) {
                    *tri.entry(t).or_default() += 1;
                }
            }
            for b in bigrams(&words) {
                *bi.entry(b).or_default() += 1;
            }
        }
        if docs == 0 {
            return Err(Error::Empty("vocabulary corpus"));
        }
        let mut bundle = VocabularyBundle::default();
        for t in top_k(uni, caps.unigrams) {
            bundle.push(t, TokenKind::Unigram);
        }
        for t in top_k(bi, caps.bigrams) {
            bundle.push(t, TokenKind::Bigram);
        }
        for t in top_k(tri, caps.trigrams) {
            bundle.push(t, TokenKind::Trigram);
        }
        Ok(bundle)
    }

    fn push(&mut self, token: String, kind: TokenKind) {
        let id = self.tokens.len() as TokenId;
        self.map_mut(kind).insert(token.clone(), id);
        self.tokens.push((token, kind));
    }

    fn map(&self, kind: TokenKind) -> &HashMap<String, TokenId> {
        match kind {
            TokenKind::Unigram => &self.unigrams,
            TokenKind::Bigram => &self.bigrams,
            TokenKind::Trigram => &self.trigrams,
        }
    }

    fn map_mut(&mut self, kind: TokenKind) -> &mut HashMap<String, TokenId> {
        match kind {
            TokenKind::Unigram => &mut self.unigrams,
            TokenKind::Bigram => &mut self.bigrams,
            TokenKind::Trigram => &mut self.trigrams,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn count(&self, kind: TokenKind) -> usize {
        self.map(kind).len()
    }

    pub fn lookup(&self, token: &str, kind: TokenKind) -> Option<TokenId> {
        self.map(kind).get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> Option<(&str, TokenKind)> {
        self.tokens.get(id as usize).map(|(t, k)| (t.as_str(), *k))
    }

    pub fn tokens_of_kind(&self, kind: TokenKind) -> Vec<&str> {
        self.tokens.iter().filter(|(_, k)| *k == kind).map(|(t, _)| t.as_str()).collect()
    }

    /// Unigrams, then adjacent-word bigrams, then per-word trigrams.
    /// Out-of-vocabulary tokens are dropped.
    pub fn tokenize(&self, text: &str) -> TokenizedText {
        let words = normalize_words(text);
        let mut ids = Vec::new();
        ids.extend(words.iter().filter_map(|w| self.unigrams.get(w).copied()));
        ids.extend(bigrams(&words).filter_map(|b| self.bigrams.get(&b).copied()));
        for w in &words {
            ids.extend(char_trigrams(w).iter().filter_map(|t| self.trigrams.get(t).copied()));
        }
        TokenizedText { ids }
    }

    pub fn write_tsv<W: Write>(&self, mut out: W) -> Result<()> {
        for (id, (token, kind)) in self.tokens.iter().enumerate() {
            writeln!(out, "{token}\t{id}\t{kind}")?;
        }
        Ok(())
    }

    pub fn read_tsv<R: BufRead>(input: R) -> Result<Self> {
        let mut bundle = VocabularyBundle::default();
        for (lineno, line) in input.lines().enumerate() {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let mut parts = line.split('\t');
            let (Some(token), Some(id), Some(kind), None) = (parts.next(), parts.next(), parts.next(), parts.next()) else {
                return Err(Error::format(format!("vocab line {}: expected token<TAB>id<TAB>kind", lineno + 1)));
            };
            let id: usize = id
                .parse()
                .map_err(|e| Error::format(format!("vocab line {}: bad id: {e}", lineno + 1)))?;
            if id != bundle.tokens.len() {
                return Err(Error::format(format!(
                    "vocab line {}: ids must be contiguous, expected {} got {id}",
                    lineno + 1,
                    bundle.tokens.len()
                )));
            }
            let kind: TokenKind = kind.parse()?;
            if bundle.map(kind).contains_key(token) {
                return Err(Error::format(format!("vocab line {}: duplicate {kind} {token:?}", lineno + 1)));
            }
            bundle.push(token.to_string(), kind);
        }
        Ok(bundle)
    }

    /// Hex SHA-256 of the serialized vocabulary.
    pub fn fingerprint(&self) -> String {
        let mut buf = Vec::new();
        self.write_tsv(&mut buf).expect("writing to a Vec cannot fail");
        hex_digest(&buf)
    }
}

pub(crate) fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Free-function form of [`VocabularyBundle::build`].
pub fn build_vocab<'a, I: IntoIterator<Item = &'a str>>(corpus: I, caps: VocabCaps) -> Result<VocabularyBundle> {
    VocabularyBundle::build(corpus, caps)
}

/// Free-function form of [`VocabularyBundle::tokenize`].
pub fn tokenize(text: &str, bundle: &VocabularyBundle) -> TokenizedText {
    bundle.tokenize(text)
}
