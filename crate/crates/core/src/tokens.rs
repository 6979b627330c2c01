//! Caption tokenization and phrase-to-token-span binding.
//!
//! The built-in `lexical` tokenizer splits on whitespace, emits every
//! punctuation character as its own token and lowercases. Token sequences
//! produced elsewhere (e.g. a CLIP tokenizer, padded to 77) can be loaded
//! from a JSON token-list file; phrases are then located by character span.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::layout::Layout;

pub const LEXICAL_TOKENIZER: &str = "lexical";
pub const EXTERNAL_TOKENIZER: &str = "external";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TokenError {
    #[error("unknown tokenizer '{0}'")]
    UnknownTokenizer(String),
    #[error("caption is empty")]
    EmptyCaption,
    #[error("phrase is empty")]
    EmptyPhrase,
    #[error("phrase '{0}' not found in caption")]
    PhraseNotFound(String),
    #[error("could not bind phrases: {0:?}")]
    BindFailure(Vec<String>),
    #[error("invalid token list: {0}")]
    InvalidTokenList(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Token {
    pub text: String,
    /// Half-open character interval in the caption (counted in `char`s).
    pub span: (usize, usize),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSeq {
    pub tokens: Vec<Token>,
    pub tokenizer_id: String,
}

impl TokenSeq {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Load an externally produced tokenization:
    /// `{"tokens": [string], "spans": [[start_char, end_char]]}`.
    ///
    /// Special and padding tokens should carry empty spans (`[k, k]`); they
    /// never match a phrase and therefore stay non-object tokens.
    pub fn from_external_json(text: &str, caption: &str) -> Result<Self, TokenError> {
        #[derive(Deserialize)]
        #[serde(deny_unknown_fields)]
        struct TokenListFile {
            tokens: Vec<String>,
            spans: Vec<(usize, usize)>,
        }
        let file: TokenListFile =
            serde_json::from_str(text).map_err(|e| TokenError::InvalidTokenList(e.to_string()))?;
        if file.tokens.len() != file.spans.len() {
            return Err(TokenError::InvalidTokenList(format!(
                "{} tokens but {} spans",
                file.tokens.len(),
                file.spans.len()
            )));
        }
        let caption_len = caption.chars().count();
        let mut prev_end = 0;
        for &(start, end) in &file.spans {
            if start > end || end > caption_len || start < prev_end {
                return Err(TokenError::InvalidTokenList(format!(
                    "span [{start}, {end}) is out of order or outside the caption"
                )));
            }
            prev_end = end;
        }
        Ok(Self {
            tokens: file
                .tokens
                .into_iter()
                .zip(file.spans)
                .map(|(text, span)| Token { text, span })
                .collect(),
            tokenizer_id: EXTERNAL_TOKENIZER.to_string(),
        })
    }
}

/// Token index interval `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenSpan {
    pub start: usize,
    pub end: usize,
}

impl TokenSpan {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.start >= self.end
    }

    pub fn contains(&self, n: usize) -> bool {
        self.start <= n && n < self.end
    }
}

fn lexical_tokens(text: &str) -> Vec<Token> {
    let mut out = Vec::new();
    let mut word = String::new();
    let mut word_start = 0;
    let flush = |word: &mut String, start: usize, end: usize, out: &mut Vec<Token>| {
        if !word.is_empty() {
            out.push(Token {
                text: std::mem::take(word),
                span: (start, end),
            });
        }
    };
    let mut pos = 0;
    for ch in text.chars() {
        if ch.is_whitespace() {
            flush(&mut word, word_start, pos, &mut out);
        } else if ch.is_ascii_punctuation() || (!ch.is_alphanumeric() && !ch.is_whitespace()) {
            flush(&mut word, word_start, pos, &mut out);
            out.push(Token {
                text: ch.to_lowercase().collect(),
                span: (pos, pos + 1),
            });
        } else {
            if word.is_empty() {
                word_start = pos;
            }
            word.extend(ch.to_lowercase());
        }
        pos += 1;
    }
    flush(&mut word, word_start, pos, &mut out);
    out
}

pub fn tokenize(caption: &str, tokenizer_id: &str) -> Result<TokenSeq, TokenError> {
    if caption.trim().is_empty() {
        return Err(TokenError::EmptyCaption);
    }
    match tokenizer_id {
        LEXICAL_TOKENIZER => Ok(TokenSeq {
            tokens: lexical_tokens(caption),
            tokenizer_id: tokenizer_id.to_string(),
        }),
        other => Err(TokenError::UnknownTokenizer(other.to_string())),
    }
}

/// Finds phrase occurrences, handing out each exact span at most once so that
/// repeated phrases bind to successive occurrences.
#[derive(Debug)]
pub struct PhraseMatcher<'a> {
    tokens: &'a TokenSeq,
    caption: Option<&'a str>,
    claimed: HashSet<TokenSpan>,
}

impl<'a> PhraseMatcher<'a> {
    pub fn new(tokens: &'a TokenSeq) -> Self {
        Self {
            tokens,
            caption: None,
            claimed: HashSet::new(),
        }
    }

    /// Required for externally tokenized captions, which are matched by character span.
    pub fn with_caption(mut self, caption: &'a str) -> Self {
        self.caption = Some(caption);
        self
    }

    pub fn claim(&mut self, phrase: &str) -> Result<TokenSpan, TokenError> {
        if phrase.trim().is_empty() {
            return Err(TokenError::EmptyPhrase);
        }
        let candidates = if self.tokens.tokenizer_id == EXTERNAL_TOKENIZER {
            let caption = self
                .caption
                .ok_or_else(|| TokenError::PhraseNotFound(phrase.to_string()))?;
            char_level_candidates(self.tokens, caption, phrase)
        } else {
            let needle = tokenize(phrase, &self.tokens.tokenizer_id).map_err(|e| match e {
                TokenError::EmptyCaption => TokenError::EmptyPhrase,
                other => other,
            })?;
            token_level_candidates(self.tokens, &needle)
        };
        let span = candidates
            .into_iter()
            .find(|s| !self.claimed.contains(s))
            .ok_or_else(|| TokenError::PhraseNotFound(phrase.to_string()))?;
        self.claimed.insert(span);
        Ok(span)
    }
}

fn token_level_candidates(hay: &TokenSeq, needle: &TokenSeq) -> Vec<TokenSpan> {
    let n = needle.len();
    if n == 0 || n > hay.len() {
        return Vec::new();
    }
    (0..=hay.len() - n)
        .filter(|&start| {
            hay.tokens[start..start + n]
                .iter()
                .zip(&needle.tokens)
                .all(|(a, b)| a.text == b.text)
        })
        .map(|start| TokenSpan { start, end: start + n })
        .collect()
}

fn char_level_candidates(hay: &TokenSeq, caption: &str, phrase: &str) -> Vec<TokenSpan> {
    let cap: Vec<char> = caption.chars().flat_map(char::to_lowercase).collect();
    let needle: Vec<char> = phrase.trim().chars().flat_map(char::to_lowercase).collect();
    // to_lowercase can change length for a few scripts; fall back to no match then
    if cap.len() != caption.chars().count() || needle.is_empty() || needle.len() > cap.len() {
        return Vec::new();
    }
    let boundary = |i: usize| i == 0 || i == cap.len() || !cap[i - 1].is_alphanumeric() || !cap[i].is_alphanumeric();
    let mut out = Vec::new();
    for start in 0..=cap.len() - needle.len() {
        let end = start + needle.len();
        if cap[start..end] != needle[..] || !boundary(start) || !boundary(end) {
            continue;
        }
        let hits: Vec<usize> = hay
            .tokens
            .iter()
            .enumerate()
            .filter(|(_, t)| t.span.0 < t.span.1 && t.span.0 < end && start < t.span.1)
            .map(|(i, _)| i)
            .collect();
        if let (Some(&first), Some(&last)) = (hits.first(), hits.last()) {
            out.push(TokenSpan {
                start: first,
                end: last + 1,
            });
        }
    }
    out.dedup();
    out
}

/// Bind one phrase without any previously claimed spans.
pub fn match_phrase(tokens: &TokenSeq, phrase: &str) -> Result<TokenSpan, TokenError> {
    PhraseMatcher::new(tokens).claim(phrase)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Binding {
    pub entry_index: usize,
    pub phrase: String,
    pub span: TokenSpan,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoundLayout {
    pub layout: Layout,
    pub tokens: TokenSeq,
    /// One binding per visual entry, in entry order.
    pub bindings: Vec<Binding>,
}

impl BoundLayout {
    /// N: number of caption tokens.
    pub fn token_count(&self) -> usize {
        self.tokens.len()
    }

    /// K: number of object instances (every box counts).
    pub fn object_count(&self) -> usize {
        self.layout.instance_count()
    }

    pub fn binding(&self, phrase: &str) -> Option<TokenSpan> {
        self.bindings.iter().find(|b| b.phrase == phrase).map(|b| b.span)
    }

    /// Per-token flag: true if any binding covers the token.
    pub fn object_token_mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.token_count()];
        for b in &self.bindings {
            let end = b.span.end.min(mask.len());
            for flag in mask.iter_mut().take(end).skip(b.span.start) {
                *flag = true;
            }
        }
        mask
    }

    /// Every (span, box) instance, in entry then box order.
    pub fn instances(&self) -> impl Iterator<Item = (TokenSpan, crate::layout::BBox)> + '_ {
        self.bindings.iter().flat_map(move |b| {
            self.layout.entries[b.entry_index]
                .boxes
                .iter()
                .map(move |bx| (b.span, *bx))
        })
    }
}

pub fn bind_layout(layout: &Layout, caption: &str, tokenizer_id: &str) -> Result<BoundLayout, TokenError> {
    let tokens = tokenize(caption, tokenizer_id)?;
    bind_with_tokens(layout, caption, tokens)
}

/// Bind against a precomputed token sequence (lexical or external). All-or-nothing.
pub fn bind_with_tokens(layout: &Layout, caption: &str, tokens: TokenSeq) -> Result<BoundLayout, TokenError> {
    let mut matcher = PhraseMatcher::new(&tokens).with_caption(caption);
    let mut bindings = Vec::new();
    let mut failed = Vec::new();
    for (entry_index, entry) in layout.entries.iter().enumerate() {
        if !entry.is_visual() {
            continue;
        }
        match matcher.claim(&entry.phrase) {
            Ok(span) => bindings.push(Binding {
                entry_index,
                phrase: entry.phrase.clone(),
                span,
            }),
            Err(_) => failed.push(entry.phrase.clone()),
        }
    }
    if !failed.is_empty() {
        return Err(TokenError::BindFailure(failed));
    }
    Ok(BoundLayout {
        layout: layout.clone(),
        tokens,
        bindings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layout::{BBox, CanvasSpec, ObjectEntry};

    fn texts(seq: &TokenSeq) -> Vec<&str> {
        seq.tokens.iter().map(|t| t.text.as_str()).collect()
    }

    #[test]
    fn whitespace_split() {
        let seq = tokenize("a red apple and a blue bird", LEXICAL_TOKENIZER).unwrap();
        assert_eq!(texts(&seq), ["a", "red", "apple", "and", "a", "blue", "bird"]);
    }

    #[test]
    fn punctuation_and_case() {
        let seq = tokenize("A man, running.", LEXICAL_TOKENIZER).unwrap();
        assert_eq!(texts(&seq), ["a", "man", ",", "running", "."]);
        assert_eq!(seq.tokens[1].span, (2, 5));
        assert_eq!(seq.tokens[2].span, (5, 6));
    }

    #[test]
    fn empty_caption_and_unknown_tokenizer() {
        assert_eq!(tokenize("", LEXICAL_TOKENIZER), Err(TokenError::EmptyCaption));
        assert!(matches!(tokenize("x", "clip-bpe"), Err(TokenError::UnknownTokenizer(_))));
    }

    #[test]
    fn phrase_spans() {
        let seq = tokenize("a red apple and a blue bird", LEXICAL_TOKENIZER).unwrap();
        assert_eq!(match_phrase(&seq, "a red apple").unwrap(), TokenSpan { start: 0, end: 3 });
        assert_eq!(
            match_phrase(&seq, "a red apple and a blue bird").unwrap(),
            TokenSpan { start: 0, end: 7 }
        );
        assert_eq!(
            match_phrase(&seq, "purple cow"),
            Err(TokenError::PhraseNotFound("purple cow".into()))
        );
    }

    #[test]
    fn repeated_phrases_take_successive_occurrences() {
        let seq = tokenize("a dog chases a dog", LEXICAL_TOKENIZER).unwrap();
        let mut m = PhraseMatcher::new(&seq);
        assert_eq!(m.claim("a dog").unwrap(), TokenSpan { start: 0, end: 2 });
        assert_eq!(m.claim("a dog").unwrap(), TokenSpan { start: 3, end: 5 });
        assert!(m.claim("a dog").is_err());
    }

    #[test]
    fn substring_phrases_may_overlap() {
        let seq = tokenize("a red apple", LEXICAL_TOKENIZER).unwrap();
        let mut m = PhraseMatcher::new(&seq);
        assert_eq!(m.claim("a red apple").unwrap(), TokenSpan { start: 0, end: 3 });
        assert_eq!(m.claim("apple").unwrap(), TokenSpan { start: 2, end: 3 });
    }

    fn b() -> BBox {
        BBox::new(0.0, 0.0, 0.5, 0.5).unwrap()
    }

    #[test]
    fn bind_two_objects() {
        let caption = "a red apple and a blue bird";
        let layout = Layout::new(
            CanvasSpec::default(),
            caption,
            vec![ObjectEntry::visual("a red apple", vec![b()]), ObjectEntry::visual("a blue bird", vec![b()])],
        );
        let bound = bind_layout(&layout, caption, LEXICAL_TOKENIZER).unwrap();
        assert_eq!(bound.binding("a red apple"), Some(TokenSpan { start: 0, end: 3 }));
        assert_eq!(bound.binding("a blue bird"), Some(TokenSpan { start: 4, end: 7 }));
        assert_eq!(bound.token_count(), 7);
        assert_eq!(bound.object_count(), 2);
    }

    #[test]
    fn bind_counts_instances() {
        let caption = "four apples and an orange";
        let layout = Layout::new(
            CanvasSpec::default(),
            caption,
            vec![
                ObjectEntry::visual("apples", vec![b(); 4]),
                ObjectEntry::visual("an orange", vec![b()]),
            ],
        );
        assert_eq!(bind_layout(&layout, caption, LEXICAL_TOKENIZER).unwrap().object_count(), 5);
    }

    #[test]
    fn bind_non_visual_only_and_failures() {
        let caption = "a quiet office";
        let layout = Layout::new(CanvasSpec::default(), caption, vec![ObjectEntry::non_visual("office")]);
        let bound = bind_layout(&layout, caption, LEXICAL_TOKENIZER).unwrap();
        assert!(bound.bindings.is_empty());
        assert_eq!(bound.object_count(), 0);

        let layout = Layout::new(
            CanvasSpec::default(),
            caption,
            vec![ObjectEntry::visual("a desk", vec![b()]), ObjectEntry::visual("office", vec![b()])],
        );
        assert_eq!(
            bind_layout(&layout, caption, LEXICAL_TOKENIZER),
            Err(TokenError::BindFailure(vec!["a desk".into()]))
        );
    }

    #[test]
    fn external_token_list_binds_by_characters() {
        let caption = "a red apple";
        let json = r#"{"tokens": ["<|startoftext|>", "a</w>", "red</w>", "apple</w>", "<|endoftext|>", "<|endoftext|>"],
                       "spans": [[0,0],[0,1],[2,5],[6,11],[11,11],[11,11]]}"#;
        let seq = TokenSeq::from_external_json(json, caption).unwrap();
        let layout = Layout::new(CanvasSpec::default(), caption, vec![ObjectEntry::visual("red apple", vec![b()])]);
        let bound = bind_with_tokens(&layout, caption, seq).unwrap();
        assert_eq!(bound.binding("red apple"), Some(TokenSpan { start: 2, end: 4 }));
        assert_eq!(bound.token_count(), 6);
        assert_eq!(bound.object_token_mask(), [false, false, true, true, false, false]);
    }

    #[test]
    fn external_token_list_rejects_bad_spans() {
        let bad = r#"{"tokens": ["a", "b"], "spans": [[2,3],[0,1]]}"#;
        assert!(TokenSeq::from_external_json(bad, "a b c").is_err());
        let short = r#"{"tokens": ["a"], "spans": []}"#;
        assert!(TokenSeq::from_external_json(short, "a").is_err());
    }
}
