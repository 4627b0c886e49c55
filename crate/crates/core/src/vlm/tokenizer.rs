//! Word-level tokenizer over a closed vocabulary.
//!
//! Text is lowercased and split into words (runs of alphanumerics, with a
//! `.` kept between two digits) and single punctuation characters.
//! Whitespace only separates tokens. `decode` joins tokens with one space,
//! so `decode(encode(s)) == normalize(s)` for in-vocabulary text.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const SEP: usize = 3;
pub const UNK: usize = 4;
pub const SPECIALS: [&str; 5] = ["<pad>", "<bos>", "<eos>", "<sep>", "<unk>"];

/// Words every vocabulary carries so needle prompts are always in-vocabulary.
pub const PROMPT_WORDS: [&str; 10] = ["where", "is", "the", "caption", "?", "top", "or", "bottom", "left", "right"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TokenKind {
    Image,
    Text,
}

/// Token ids with a kind tag per position; image positions form a prefix.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TokenSequence {
    ids: Vec<usize>,
    kinds: Vec<TokenKind>,
}

impl TokenSequence {
    pub fn text(ids: Vec<usize>) -> Self {
        let kinds = vec![TokenKind::Text; ids.len()];
        TokenSequence { ids, kinds }
    }

    /// `n_image` placeholder positions followed by `text`.
    pub fn with_image_prefix(n_image: usize, text: &[usize]) -> Self {
        let mut ids = vec![PAD; n_image];
        ids.extend_from_slice(text);
        let mut kinds = vec![TokenKind::Image; n_image];
        kinds.extend(std::iter::repeat_n(TokenKind::Text, text.len()));
        TokenSequence { ids, kinds }
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn kinds(&self) -> &[TokenKind] {
        &self.kinds
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn image_len(&self) -> usize {
        self.kinds.iter().take_while(|k| **k == TokenKind::Image).count()
    }

    /// Text ids; `None` if an image position follows a text position.
    pub fn text_ids(&self) -> Option<&[usize]> {
        let n = self.image_len();
        self.kinds[n..]
            .iter()
            .all(|k| *k == TokenKind::Text)
            .then(|| &self.ids[n..])
    }

    pub fn push(&mut self, id: usize) {
        self.ids.push(id);
        self.kinds.push(TokenKind::Text);
    }
}

/// Splits lowercased text into word and punctuation tokens.
pub fn split_words(text: &str) -> Vec<String> {
    let chars: Vec<char> = text.to_lowercase().chars().collect();
    let mut out = Vec::new();
    let mut word = String::new();
    for (i, &c) in chars.iter().enumerate() {
        let decimal_point = c == '.'
            && word.chars().last().is_some_and(|p| p.is_ascii_digit())
            && chars.get(i + 1).is_some_and(|n| n.is_ascii_digit());
        if c.is_alphanumeric() || decimal_point {
            word.push(c);
            continue;
        }
        if !word.is_empty() {
            out.push(std::mem::take(&mut word));
        }
        if !c.is_whitespace() {
            out.push(c.to_string());
        }
    }
    if !word.is_empty() {
        out.push(word);
    }
    out
}

/// Canonical text form: tokens joined by single spaces.
pub fn normalize(text: &str) -> String {
    split_words(text).join(" ")
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ToyTokenizer {
    vocab: Vec<String>,
    index: HashMap<String, usize>,
}

impl ToyTokenizer {
    /// Builds a vocabulary of at most `max_size` entries (specials
    /// included) from the given texts. Needle prompt words are always kept;
    /// other words are ranked by frequency, ties broken alphabetically.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>, max_size: usize) -> Self {
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for t in texts {
            for w in split_words(t) {
                *counts.entry(w).or_default() += 1;
            }
        }
        let mut words: Vec<String> = PROMPT_WORDS.iter().map(|w| w.to_string()).collect();
        let mut ranked: Vec<(String, usize)> =
            counts.into_iter().filter(|(w, _)| !PROMPT_WORDS.contains(&w.as_str())).collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let room = max_size.saturating_sub(SPECIALS.len() + words.len());
        words.extend(ranked.into_iter().take(room).map(|(w, _)| w));
        words.sort();
        Self::from_vocab(SPECIALS.iter().map(|s| s.to_string()).chain(words).collect())
            .expect("specials lead the vocabulary")
    }

    /// Restores a tokenizer from its id-ordered vocabulary.
    pub fn from_vocab(vocab: Vec<String>) -> crate::Result<Self> {
        if vocab.len() < SPECIALS.len() || vocab.iter().zip(SPECIALS).any(|(v, s)| v != s) {
            return Err(crate::Error::Corrupt("vocabulary does not start with the special tokens".into()));
        }
        let index: HashMap<String, usize> = vocab.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        if index.len() != vocab.len() {
            return Err(crate::Error::Corrupt("vocabulary has duplicate entries".into()));
        }
        Ok(ToyTokenizer { vocab, index })
    }

    pub fn len(&self) -> usize {
        self.vocab.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vocab.is_empty()
    }

    pub fn vocab(&self) -> &[String] {
        &self.vocab
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    /// Word ids without specials; unknown words map to `UNK`.
    pub fn encode(&self, text: &str) -> Vec<usize> {
        split_words(text)
            .iter()
            .map(|w| self.id(w).unwrap_or(UNK))
            .collect()
    }

    /// `BOS question SEP`.
    pub fn encode_prompt(&self, question: &str) -> Vec<usize> {
        let mut ids = vec![BOS];
        ids.extend(self.encode(question));
        ids.push(SEP);
        ids
    }

    /// `answer EOS`.
    pub fn encode_answer(&self, answer: &str) -> Vec<usize> {
        let mut ids = self.encode(answer);
        ids.push(EOS);
        ids
    }

    /// Joins non-special tokens with single spaces; `UNK` renders as `<unk>`.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&i| !matches!(i, PAD | BOS | EOS | SEP))
            .map(|&i| self.vocab.get(i).map_or(SPECIALS[UNK], String::as_str))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn splitting_rules() {
        assert_eq!(split_words("  What color, is it?"), ["what", "color", ",", "is", "it", "?"]);
        assert_eq!(split_words("2.5 m. 3."), ["2.5", "m", ".", "3", "."]);
        assert!(split_words("   ").is_empty());
    }

    #[test]
    fn round_trip_and_unknowns() {
        let tok = ToyTokenizer::build(["a red car", "a blue car!"], 64);
        let s = "A  Red car!";
        assert_eq!(tok.decode(&tok.encode(s)), normalize(s));
        assert_eq!(tok.encode("zebra"), vec![UNK]);
        assert!(tok.id("bottom").is_some());
    }

    #[test]
    fn cap_keeps_most_frequent() {
        let tok = ToyTokenizer::build(["b b b a a c"], SPECIALS.len() + PROMPT_WORDS.len() + 2);
        assert!(tok.id("b").is_some() && tok.id("a").is_some());
        assert!(tok.id("c").is_none());
    }

    #[test]
    fn image_prefix_layout() {
        let seq = TokenSequence::with_image_prefix(3, &[BOS, 7]);
        assert_eq!(seq.image_len(), 3);
        assert_eq!(seq.text_ids().unwrap(), &[BOS, 7]);
        assert_eq!(seq.len(), 5);
    }
}
